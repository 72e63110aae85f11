//! The dual attention two-stream network.
//!
//! Data flow for one sample (`H x W` PAN, upsampled MS of the same size):
//!
//! ```text
//! PAN ──encoder──► a3_pan ──PLA──────────────┐
//!                                            ├─concat─► 3 residual units ─► up ×2 (with skips) ─► conv ─► + MS_up
//! MS_up ─encoder─► a3_ms ──CLA──PLA──────────┘
//! ```
//!
//! Each encoder is conv(s1) → conv(s2) → conv(s2), so the fused bottleneck is
//! `H/4 x W/4`. After each decoder upsampling step the matching-resolution
//! activations of both encoders are concatenated and merged by a 3x3 conv.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat, relu_backward_inplace, relu_inplace, sigmoid, split_channels, Conv2d, ConvCache,
    ConvTranspose2d, ConvTransposeCache, FeatureMap, Tensor,
};
use crate::raster::Raster;

pub const PAN_BANDS: usize = 1;
pub const MS_BANDS: usize = 4;

/// Architecture hyperparameters. Stored alongside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Output channels of the three encoder stages (stride 1, 2, 2).
    pub encoder_widths: [usize; 3],
    pub cla_hidden: usize,
    pub pla_hidden: usize,
    pub residual_units: usize,
    /// Output channels of the two decoder upsampling stages.
    pub decoder_widths: [usize; 2],
    /// Multiplier on the Kaiming std of the last conv; 0 starts from the
    /// upsampled-MS identity.
    pub final_init_scale: f64,
}

impl Manifest {
    /// Full-width configuration: 32/64/128 encoders, 256-channel bottleneck.
    pub fn full() -> Self {
        Self {
            encoder_widths: [32, 64, 128],
            cla_hidden: 16,
            pla_hidden: 16,
            residual_units: 3,
            decoder_widths: [128, 64],
            final_init_scale: 0.1,
        }
    }

    /// The full layout with every width divided by `divisor` (min 1).
    pub fn reduced(divisor: usize) -> Self {
        let d = |v: usize| (v / divisor).max(1);
        let f = Self::full();
        Self {
            encoder_widths: f.encoder_widths.map(d),
            cla_hidden: d(f.cla_hidden),
            pla_hidden: d(f.pla_hidden),
            residual_units: f.residual_units,
            decoder_widths: f.decoder_widths.map(d),
            final_init_scale: f.final_init_scale,
        }
    }

    pub fn fusion_width(&self) -> usize {
        2 * self.encoder_widths[2]
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain([&self.cla_hidden, &self.pla_hidden]);
        if widths.into_iter().any(|w| *w == 0) {
            return Err(Error::Config(format!("zero width in manifest {self:?}")));
        }
        if !self.final_init_scale.is_finite() || self.final_init_scale < 0.0 {
            return Err(Error::Config("final_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "encoder_widths = {:?}\ncla_hidden = {}\npla_hidden = {}\nresidual_units = {}\ndecoder_widths = {:?}\nfinal_init_scale = {:?}\n",
            self.encoder_widths,
            self.cla_hidden,
            self.pla_hidden,
            self.residual_units,
            self.decoder_widths,
            self.final_init_scale
        )
    }
}

/// Three-stage convolutional feature extractor for one input stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl Encoder {
    fn new(input: usize, widths: [usize; 3]) -> Self {
        Self {
            conv1: Conv2d::new(input, widths[0], 3, 1),
            conv2: Conv2d::new(widths[0], widths[1], 3, 2),
            conv3: Conv2d::new(widths[1], widths[2], 3, 2),
        }
    }
}

/// Two-layer 1x1 gate: conv → ReLU → conv → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Gate {
    fn new(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            conv1: Conv2d::new(input, hidden, 1, 1),
            conv2: Conv2d::new(hidden, output, 1, 1),
        }
    }
}

/// `r_next = ReLU(r + conv_b(ReLU(conv_a(r))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnit {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub up1: ConvTranspose2d,
    pub merge1: Conv2d,
    pub up2: ConvTranspose2d,
    pub merge2: Conv2d,
    pub output: Conv2d,
}

/// Full parameter set of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct DatsModel {
    pub manifest: Manifest,
    pub pan_encoder: Encoder,
    pub ms_encoder: Encoder,
    pub cla: Gate,
    pub pla_pan: Gate,
    pub pla_ms: Gate,
    pub fusion: Vec<ResidualUnit>,
    pub decoder: Decoder,
}

/// Common surface of the parameterized layers.
pub trait Layer {
    fn weight(&self) -> &Tensor;
    fn bias(&self) -> &Tensor;
    /// Weight and bias, mutably.
    fn tensors_mut(&mut self) -> [&mut Tensor; 2];
    fn fan_in(&self) -> usize;
}

macro_rules! impl_layer {
    ($t:ty) => {
        impl Layer for $t {
            fn weight(&self) -> &Tensor {
                &self.weight
            }
            fn bias(&self) -> &Tensor {
                &self.bias
            }
            fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
                [&mut self.weight, &mut self.bias]
            }
            fn fan_in(&self) -> usize {
                <$t>::fan_in(self)
            }
        }
    };
}

impl_layer!(Conv2d);
impl_layer!(ConvTranspose2d);

/// Immutable view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
}

impl DatsModel {
    /// Zero-valued parameters with shapes taken from the manifest.
    pub fn zeros(manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let [e1, e2, e3] = manifest.encoder_widths;
        let [d1, d2] = manifest.decoder_widths;
        let fw = manifest.fusion_width();
        let fusion = (0..manifest.residual_units)
            .map(|_| ResidualUnit {
                conv_a: Conv2d::new(fw, fw, 3, 1),
                conv_b: Conv2d::new(fw, fw, 3, 1),
            })
            .collect();
        Ok(Self {
            pan_encoder: Encoder::new(PAN_BANDS, manifest.encoder_widths),
            ms_encoder: Encoder::new(MS_BANDS, manifest.encoder_widths),
            cla: Gate::new(e3, manifest.cla_hidden, e3),
            pla_pan: Gate::new(e3, manifest.pla_hidden, 1),
            pla_ms: Gate::new(e3, manifest.pla_hidden, 1),
            fusion,
            decoder: Decoder {
                up1: ConvTranspose2d::upsample2x(fw, d1),
                merge1: Conv2d::new(d1 + 2 * e2, d1, 3, 1),
                up2: ConvTranspose2d::upsample2x(d1, d2),
                merge2: Conv2d::new(d2 + 2 * e1, d2, 3, 1),
                output: Conv2d::new(d2, MS_BANDS, 3, 1),
            },
            manifest,
        })
    }

    /// Kaiming-normal weights, zero biases, seeded.
    pub fn init(manifest: Manifest, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(manifest)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let final_scale = m.manifest.final_init_scale;
        for (name, layer) in m.layers_mut() {
            let mut std = (2.0 / layer.fan_in() as f64).sqrt();
            if name == "decoder.output" {
                std *= final_scale;
            }
            let [w, _] = layer.tensors_mut();
            w.fill_normal(&mut rng, std);
        }
        Ok(m)
    }

    /// Every layer with its stable name, in checkpoint order.
    pub fn layers(&self) -> Vec<(String, &dyn Layer)> {
        let mut out: Vec<(String, &dyn Layer)> = vec![
            ("pan_encoder.conv1".into(), &self.pan_encoder.conv1),
            ("pan_encoder.conv2".into(), &self.pan_encoder.conv2),
            ("pan_encoder.conv3".into(), &self.pan_encoder.conv3),
            ("ms_encoder.conv1".into(), &self.ms_encoder.conv1),
            ("ms_encoder.conv2".into(), &self.ms_encoder.conv2),
            ("ms_encoder.conv3".into(), &self.ms_encoder.conv3),
            ("cla.conv1".into(), &self.cla.conv1),
            ("cla.conv2".into(), &self.cla.conv2),
            ("pla_pan.conv1".into(), &self.pla_pan.conv1),
            ("pla_pan.conv2".into(), &self.pla_pan.conv2),
            ("pla_ms.conv1".into(), &self.pla_ms.conv1),
            ("pla_ms.conv2".into(), &self.pla_ms.conv2),
        ];
        for (i, unit) in self.fusion.iter().enumerate() {
            out.push((format!("fusion.unit{i}.conv_a"), &unit.conv_a));
            out.push((format!("fusion.unit{i}.conv_b"), &unit.conv_b));
        }
        out.push(("decoder.up1".into(), &self.decoder.up1));
        out.push(("decoder.merge1".into(), &self.decoder.merge1));
        out.push(("decoder.up2".into(), &self.decoder.up2));
        out.push(("decoder.merge2".into(), &self.decoder.merge2));
        out.push(("decoder.output".into(), &self.decoder.output));
        out
    }

    /// Mutable counterpart of [`Self::layers`], same order.
    pub fn layers_mut(&mut self) -> Vec<(String, &mut dyn Layer)> {
        let mut out: Vec<(String, &mut dyn Layer)> = vec![
            ("pan_encoder.conv1".into(), &mut self.pan_encoder.conv1),
            ("pan_encoder.conv2".into(), &mut self.pan_encoder.conv2),
            ("pan_encoder.conv3".into(), &mut self.pan_encoder.conv3),
            ("ms_encoder.conv1".into(), &mut self.ms_encoder.conv1),
            ("ms_encoder.conv2".into(), &mut self.ms_encoder.conv2),
            ("ms_encoder.conv3".into(), &mut self.ms_encoder.conv3),
            ("cla.conv1".into(), &mut self.cla.conv1),
            ("cla.conv2".into(), &mut self.cla.conv2),
            ("pla_pan.conv1".into(), &mut self.pla_pan.conv1),
            ("pla_pan.conv2".into(), &mut self.pla_pan.conv2),
            ("pla_ms.conv1".into(), &mut self.pla_ms.conv1),
            ("pla_ms.conv2".into(), &mut self.pla_ms.conv2),
        ];
        for (i, unit) in self.fusion.iter_mut().enumerate() {
            out.push((format!("fusion.unit{i}.conv_a"), &mut unit.conv_a));
            out.push((format!("fusion.unit{i}.conv_b"), &mut unit.conv_b));
        }
        let d = &mut self.decoder;
        out.push(("decoder.up1".into(), &mut d.up1));
        out.push(("decoder.merge1".into(), &mut d.merge1));
        out.push(("decoder.up2".into(), &mut d.up2));
        out.push(("decoder.merge2".into(), &mut d.merge2));
        out.push(("decoder.output".into(), &mut d.output));
        out
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.manifest.clone()).expect("manifest already validated")
    }

    /// Every parameter tensor with its stable name, in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    ParamRef { name: format!("{name}.weight"), tensor: l.weight() },
                    ParamRef { name: format!("{name}.bias"), tensor: l.bias() },
                ]
            })
            .collect()
    }

    /// Mutable parameter tensors in the same order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(_, l)| l.tensors_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|p| p.name).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    /// Zeroes the last conv so the network reproduces its MS input.
    pub fn zero_output_layer(&mut self) {
        self.decoder.output.weight.data.fill(0.0);
        self.decoder.output.bias.data.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.tensor.data.iter().all(|v| v.is_finite()))
    }
}

/// Switches used by ablation checks; both on in normal operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub pla_on_ms: bool,
    pub skips: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            pla_on_ms: true,
            skips: true,
        }
    }
}

/// Converts an interleaved raster into a channel-major feature map.
pub fn raster_to_map(r: &Raster) -> FeatureMap {
    let bands: Vec<f64> = (0..r.channels()).flat_map(|c| r.band(c)).collect();
    FeatureMap::from_data(r.channels(), r.height(), r.width(), bands)
}

/// Converts a 1-, 3- or 4-channel feature map back to a raster (unclamped).
pub fn map_to_raster(f: &FeatureMap) -> Result<Raster> {
    let planes: Vec<Vec<f64>> = (0..f.channels).map(|c| f.plane(c).to_vec()).collect();
    Raster::from_bands(f.height, f.width, &planes)
}

fn check_input(pan: &FeatureMap, ms_up: &FeatureMap) -> Result<()> {
    if pan.channels != PAN_BANDS {
        return Err(Error::network("input", format!("PAN has {} channels", pan.channels)));
    }
    if ms_up.channels != MS_BANDS {
        return Err(Error::network("input", format!("MS has {} bands", ms_up.channels)));
    }
    if (pan.height, pan.width) != (ms_up.height, ms_up.width) {
        return Err(Error::network(
            "input",
            format!(
                "PAN {}x{} and MS {}x{} differ",
                pan.height, pan.width, ms_up.height, ms_up.width
            ),
        ));
    }
    if pan.height % 4 != 0 || pan.width % 4 != 0 || pan.height == 0 || pan.width == 0 {
        return Err(Error::NotDivisible {
            height: pan.height,
            width: pan.width,
            factor: 4,
        });
    }
    Ok(())
}

/// Activations of one encoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub a1: FeatureMap,
    pub a2: FeatureMap,
    pub a3: FeatureMap,
    c1: ConvCache,
    c2: ConvCache,
    c3: ConvCache,
}

impl EncoderTrace {
    pub fn output(&self) -> &FeatureMap {
        &self.a3
    }
}

fn conv_relu(conv: &Conv2d, x: &FeatureMap, stage: &str) -> Result<(FeatureMap, ConvCache)> {
    let (mut y, cache) = conv
        .forward(x)
        .map_err(|e| Error::network(stage, e.to_string()))?;
    relu_inplace(&mut y);
    Ok((y, cache))
}

pub fn encode(enc: &Encoder, x: &FeatureMap, stage: &str) -> Result<EncoderTrace> {
    if x.height % 4 != 0 || x.width % 4 != 0 {
        return Err(Error::NotDivisible {
            height: x.height,
            width: x.width,
            factor: 4,
        });
    }
    let (a1, c1) = conv_relu(&enc.conv1, x, stage)?;
    let (a2, c2) = conv_relu(&enc.conv2, &a1, stage)?;
    let (a3, c3) = conv_relu(&enc.conv3, &a2, stage)?;
    Ok(EncoderTrace { a1, a2, a3, c1, c2, c3 })
}

/// Returns the input gradient and accumulates parameter gradients.
fn encode_backward(
    enc: &Encoder,
    t: &EncoderTrace,
    mut g1: FeatureMap,
    mut g2: FeatureMap,
    mut g3: FeatureMap,
    grad: &mut Encoder,
) {
    relu_backward_inplace(&mut g3, &t.a3);
    let d2 = enc.conv3.backward(&t.c3, &g3, &mut grad.conv3);
    g2.add_assign(&d2);
    relu_backward_inplace(&mut g2, &t.a2);
    let d1 = enc.conv2.backward(&t.c2, &g2, &mut grad.conv2);
    g1.add_assign(&d1);
    relu_backward_inplace(&mut g1, &t.a1);
    // Input gradient is not needed.
    let _ = enc.conv1.backward(&t.c1, &g1, &mut grad.conv1);
}

/// Channel attention intermediates.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub pooled: FeatureMap,
    pub hidden: FeatureMap,
    /// Per-channel weights in (0, 1), shape `C x 1 x 1`.
    pub weights: FeatureMap,
    pub output: FeatureMap,
    c1: ConvCache,
    c2: ConvCache,
}

/// Global mean pooling, gate, channel-wise rescale.
pub fn channel_attention(gate: &Gate, f: &FeatureMap) -> Result<ChannelAttention> {
    let n = f.plane_len() as f64;
    let pooled = FeatureMap::from_data(
        f.channels,
        1,
        1,
        (0..f.channels).map(|c| f.plane(c).iter().sum::<f64>() / n).collect(),
    );
    let (hidden, c1) = conv_relu(&gate.conv1, &pooled, "channel attention")?;
    let (mut weights, c2) = gate
        .conv2
        .forward(&hidden)
        .map_err(|e| Error::network("channel attention", e.to_string()))?;
    weights.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut output = f.clone();
    for c in 0..f.channels {
        let w = weights.data[c];
        output.plane_mut(c).iter_mut().for_each(|v| *v *= w);
    }
    Ok(ChannelAttention { pooled, hidden, weights, output, c1, c2 })
}

fn channel_attention_backward(
    gate: &Gate,
    input: &FeatureMap,
    t: &ChannelAttention,
    grad_out: &FeatureMap,
    grad: &mut Gate,
) -> FeatureMap {
    let n = input.plane_len();
    let mut d_in = grad_out.clone();
    let mut d_logits = FeatureMap::zeros(input.channels, 1, 1);
    for c in 0..input.channels {
        let w = t.weights.data[c];
        let dw: f64 = grad_out
            .plane(c)
            .iter()
            .zip(input.plane(c))
            .map(|(g, x)| g * x)
            .sum();
        d_logits.data[c] = dw * w * (1.0 - w);
        d_in.plane_mut(c).iter_mut().for_each(|v| *v *= w);
    }
    let mut d_hidden = gate.conv2.backward(&t.c2, &d_logits, &mut grad.conv2);
    relu_backward_inplace(&mut d_hidden, &t.hidden);
    let d_pooled = gate.conv1.backward(&t.c1, &d_hidden, &mut grad.conv1);
    for c in 0..input.channels {
        let g = d_pooled.data[c] / n as f64;
        d_in.plane_mut(c).iter_mut().for_each(|v| *v += g);
    }
    d_in
}

/// Pixel attention intermediates.
#[derive(Debug, Clone)]
pub struct PixelAttention {
    pub hidden: FeatureMap,
    /// Per-pixel weights in (0, 1), shape `1 x H x W`.
    pub weights: FeatureMap,
    pub output: FeatureMap,
    c1: ConvCache,
    c2: ConvCache,
}

/// Gate on each pixel's feature vector, pixel-wise rescale.
pub fn pixel_attention(gate: &Gate, f: &FeatureMap) -> Result<PixelAttention> {
    let (hidden, c1) = conv_relu(&gate.conv1, f, "pixel attention")?;
    let (mut weights, c2) = gate
        .conv2
        .forward(&hidden)
        .map_err(|e| Error::network("pixel attention", e.to_string()))?;
    weights.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut output = f.clone();
    for c in 0..f.channels {
        for (v, w) in output.plane_mut(c).iter_mut().zip(&weights.data) {
            *v *= w;
        }
    }
    Ok(PixelAttention { hidden, weights, output, c1, c2 })
}

fn pixel_attention_backward(
    gate: &Gate,
    input: &FeatureMap,
    t: &PixelAttention,
    grad_out: &FeatureMap,
    grad: &mut Gate,
) -> FeatureMap {
    let mut d_in = grad_out.clone();
    let mut d_logits = FeatureMap::zeros(1, input.height, input.width);
    for c in 0..input.channels {
        let (g, x) = (grad_out.plane(c), input.plane(c));
        for (i, dl) in d_logits.data.iter_mut().enumerate() {
            *dl += g[i] * x[i];
        }
        for (dv, w) in d_in.plane_mut(c).iter_mut().zip(&t.weights.data) {
            *dv *= w;
        }
    }
    for (dl, w) in d_logits.data.iter_mut().zip(&t.weights.data) {
        *dl *= w * (1.0 - w);
    }
    let mut d_hidden = gate.conv2.backward(&t.c2, &d_logits, &mut grad.conv2);
    relu_backward_inplace(&mut d_hidden, &t.hidden);
    let d_extra = gate.conv1.backward(&t.c1, &d_hidden, &mut grad.conv1);
    d_in.add_assign(&d_extra);
    d_in
}

/// Channel concatenation, MS block first.
pub fn fuse(ms_att: &FeatureMap, pan_att: &FeatureMap) -> Result<FeatureMap> {
    concat(&[ms_att, pan_att]).map_err(|e| Error::network("fusion", e.to_string()))
}

#[derive(Debug, Clone)]
pub struct ResidualTrace {
    t: FeatureMap,
    out: FeatureMap,
    ca: ConvCache,
    cb: ConvCache,
}

pub fn residual_unit(unit: &ResidualUnit, r: &FeatureMap) -> Result<(FeatureMap, ResidualTrace)> {
    let (t, ca) = conv_relu(&unit.conv_a, r, "fusion network")?;
    let (branch, cb) = unit
        .conv_b
        .forward(&t)
        .map_err(|e| Error::network("fusion network", e.to_string()))?;
    let mut out = r.clone();
    out.add_assign(&branch);
    relu_inplace(&mut out);
    Ok((out.clone(), ResidualTrace { t, out, ca, cb }))
}

fn residual_unit_backward(
    unit: &ResidualUnit,
    tr: &ResidualTrace,
    mut grad_out: FeatureMap,
    grad: &mut ResidualUnit,
) -> FeatureMap {
    relu_backward_inplace(&mut grad_out, &tr.out);
    let mut dt = unit.conv_b.backward(&tr.cb, &grad_out, &mut grad.conv_b);
    relu_backward_inplace(&mut dt, &tr.t);
    let dr = unit.conv_a.backward(&tr.ca, &dt, &mut grad.conv_a);
    grad_out.add_assign(&dr);
    grad_out
}

/// Runs the residual units over the fused features.
pub fn fusion_network(model: &DatsModel, f: &FeatureMap) -> Result<(FeatureMap, Vec<ResidualTrace>)> {
    if f.channels != model.manifest.fusion_width() {
        return Err(Error::network(
            "fusion network",
            format!("expected {} channels, got {}", model.manifest.fusion_width(), f.channels),
        ));
    }
    let mut r = f.clone();
    let mut traces = Vec::with_capacity(model.fusion.len());
    for unit in &model.fusion {
        let (next, tr) = residual_unit(unit, &r)?;
        traces.push(tr);
        r = next;
    }
    Ok((r, traces))
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    q1: FeatureMap,
    s1: FeatureMap,
    q2: FeatureMap,
    s2: FeatureMap,
    u1: ConvTransposeCache,
    m1: ConvCache,
    u2: ConvTransposeCache,
    m2: ConvCache,
    out: ConvCache,
}

/// Encoder activations reused by the decoder, per resolution.
pub struct Skips<'a> {
    pub pan_half: &'a FeatureMap,
    pub ms_half: &'a FeatureMap,
    pub pan_full: &'a FeatureMap,
    pub ms_full: &'a FeatureMap,
}

/// Upsamples the bottleneck back to input resolution and adds `ms_up`.
/// Returns unclamped values.
pub fn reconstruct(
    model: &DatsModel,
    f: &FeatureMap,
    skips: &Skips<'_>,
    ms_up: &FeatureMap,
    opts: ForwardOptions,
) -> Result<(FeatureMap, DecoderTrace)> {
    let dec = &model.decoder;
    let stage = "reconstruction";
    let (mut q1, u1) = dec.up1.forward(f).map_err(|e| Error::network(stage, e.to_string()))?;
    relu_inplace(&mut q1);
    if (skips.pan_half.height, skips.pan_half.width) != (q1.height, q1.width) {
        return Err(Error::network(
            stage,
            format!(
                "skip at {}x{} does not match upsampled {}x{}",
                skips.pan_half.height, skips.pan_half.width, q1.height, q1.width
            ),
        ));
    }
    let zero_like = |m: &FeatureMap| FeatureMap::zeros(m.channels, m.height, m.width);
    let cat1 = if opts.skips {
        concat(&[&q1, skips.pan_half, skips.ms_half])
    } else {
        concat(&[&q1, &zero_like(skips.pan_half), &zero_like(skips.ms_half)])
    }
    .map_err(|e| Error::network(stage, e.to_string()))?;
    let (s1, m1) = conv_relu(&dec.merge1, &cat1, stage)?;
    let (mut q2, u2) = dec.up2.forward(&s1).map_err(|e| Error::network(stage, e.to_string()))?;
    relu_inplace(&mut q2);
    if (skips.pan_full.height, skips.pan_full.width) != (q2.height, q2.width) {
        return Err(Error::network(stage, "full-resolution skip does not match"));
    }
    let cat2 = if opts.skips {
        concat(&[&q2, skips.pan_full, skips.ms_full])
    } else {
        concat(&[&q2, &zero_like(skips.pan_full), &zero_like(skips.ms_full)])
    }
    .map_err(|e| Error::network(stage, e.to_string()))?;
    let (s2, m2) = conv_relu(&dec.merge2, &cat2, stage)?;
    let (mut y, out) = dec.output.forward(&s2).map_err(|e| Error::network(stage, e.to_string()))?;
    if y.shape() != ms_up.shape() {
        return Err(Error::network(stage, "output does not match MS input"));
    }
    y.add_assign(ms_up);
    Ok((y, DecoderTrace { q1, s1, q2, s2, u1, m1, u2, m2, out }))
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pan: EncoderTrace,
    pub ms: EncoderTrace,
    pub cla: ChannelAttention,
    pub pla_ms: Option<PixelAttention>,
    pub pla_pan: PixelAttention,
    pub fused: FeatureMap,
    pub bottleneck: FeatureMap,
    residual: Vec<ResidualTrace>,
    decoder: DecoderTrace,
    /// Network output before clamping.
    pub raw_output: FeatureMap,
    opts: ForwardOptions,
}

impl DatsModel {
    /// Forward pass on channel-major inputs, keeping intermediates.
    pub fn forward_trace(&self, pan: &FeatureMap, ms_up: &FeatureMap, opts: ForwardOptions) -> Result<ForwardTrace> {
        check_input(pan, ms_up)?;
        let pan_t = encode(&self.pan_encoder, pan, "PAN encoder")?;
        let ms_t = encode(&self.ms_encoder, ms_up, "MS encoder")?;
        let pla_pan = pixel_attention(&self.pla_pan, &pan_t.a3)?;
        let cla = channel_attention(&self.cla, &ms_t.a3)?;
        let pla_ms = if opts.pla_on_ms {
            Some(pixel_attention(&self.pla_ms, &cla.output)?)
        } else {
            None
        };
        let ms_att = pla_ms.as_ref().map_or(&cla.output, |p| &p.output);
        let fused = fuse(ms_att, &pla_pan.output)?;
        let (bottleneck, residual) = fusion_network(self, &fused)?;
        let skips = Skips {
            pan_half: &pan_t.a2,
            ms_half: &ms_t.a2,
            pan_full: &pan_t.a1,
            ms_full: &ms_t.a1,
        };
        let (raw_output, decoder) = reconstruct(self, &bottleneck, &skips, ms_up, opts)?;
        Ok(ForwardTrace {
            pan: pan_t,
            ms: ms_t,
            cla,
            pla_ms,
            pla_pan,
            fused,
            bottleneck,
            residual,
            decoder,
            raw_output,
            opts,
        })
    }

    /// Unclamped output on channel-major inputs.
    pub fn forward_raw(&self, pan: &FeatureMap, ms_up: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_trace(pan, ms_up, ForwardOptions::default())?.raw_output)
    }

    /// Pansharpens one PAN / upsampled-MS pair; output clamped to [0, 1].
    pub fn forward(&self, pan: &Raster, lrms_up: &Raster) -> Result<Raster> {
        let raw = self.forward_raw(&raster_to_map(pan), &raster_to_map(lrms_up))?;
        let mut out = map_to_raster(&raw)?;
        out.clamp_unit();
        Ok(out)
    }

    /// Back-propagates `grad_out` (w.r.t. the raw output) through the trace,
    /// accumulating parameter gradients into `grad`.
    pub fn backward(&self, tr: &ForwardTrace, grad_out: &FeatureMap, grad: &mut DatsModel) {
        let dec = &self.decoder;
        let gdec = &mut grad.decoder;
        let dt = &tr.decoder;
        let [e1, e2, _] = self.manifest.encoder_widths;
        let [d1, d2] = self.manifest.decoder_widths;

        // Decoder.
        let mut g_s2 = dec.output.backward(&dt.out, grad_out, &mut gdec.output);
        relu_backward_inplace(&mut g_s2, &dt.s2);
        let g_cat2 = dec.merge2.backward(&dt.m2, &g_s2, &mut gdec.merge2);
        let mut parts = split_channels(&g_cat2, &[d2, e1, e1]).into_iter();
        let mut g_q2 = parts.next().unwrap();
        let (g_pan_full, g_ms_full) = if tr.opts.skips {
            (parts.next().unwrap(), parts.next().unwrap())
        } else {
            (FeatureMap::zeros(e1, g_q2.height, g_q2.width), FeatureMap::zeros(e1, g_q2.height, g_q2.width))
        };
        relu_backward_inplace(&mut g_q2, &dt.q2);
        let mut g_s1 = dec.up2.backward(&dt.u2, &g_q2, &mut gdec.up2);
        relu_backward_inplace(&mut g_s1, &dt.s1);
        let g_cat1 = dec.merge1.backward(&dt.m1, &g_s1, &mut gdec.merge1);
        let mut parts = split_channels(&g_cat1, &[d1, e2, e2]).into_iter();
        let mut g_q1 = parts.next().unwrap();
        let (g_pan_half, g_ms_half) = if tr.opts.skips {
            (parts.next().unwrap(), parts.next().unwrap())
        } else {
            (FeatureMap::zeros(e2, g_q1.height, g_q1.width), FeatureMap::zeros(e2, g_q1.height, g_q1.width))
        };
        relu_backward_inplace(&mut g_q1, &dt.q1);
        let mut g = dec.up1.backward(&dt.u1, &g_q1, &mut gdec.up1);

        // Fusion network.
        for ((unit, rt), gunit) in self.fusion.iter().zip(&tr.residual).zip(grad.fusion.iter_mut()).rev() {
            g = residual_unit_backward(unit, rt, g, gunit);
        }

        // Split the concatenation: MS block first.
        let c3 = tr.ms.a3.channels;
        let mut parts = split_channels(&g, &[c3, c3]).into_iter();
        let g_ms_att = parts.next().unwrap();
        let g_pan_att = parts.next().unwrap();

        let g_pan_a3 = pixel_attention_backward(&self.pla_pan, &tr.pan.a3, &tr.pla_pan, &g_pan_att, &mut grad.pla_pan);
        let g_cla_out = match &tr.pla_ms {
            Some(p) => pixel_attention_backward(&self.pla_ms, &tr.cla.output, p, &g_ms_att, &mut grad.pla_ms),
            None => g_ms_att,
        };
        let g_ms_a3 = channel_attention_backward(&self.cla, &tr.ms.a3, &tr.cla, &g_cla_out, &mut grad.cla);

        encode_backward(&self.pan_encoder, &tr.pan, g_pan_full, g_pan_half, g_pan_a3, &mut grad.pan_encoder);
        encode_backward(&self.ms_encoder, &tr.ms, g_ms_full, g_ms_half, g_ms_a3, &mut grad.ms_encoder);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> Manifest {
        Manifest {
            encoder_widths: [2, 3, 4],
            cla_hidden: 2,
            pla_hidden: 2,
            residual_units: 2,
            decoder_widths: [3, 2],
            final_init_scale: 1.0,
        }
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn parameter_names_are_unique_and_ordered_consistently() {
        let mut m = DatsModel::init(toy(), 1).unwrap();
        let names = m.param_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let shapes: Vec<Vec<usize>> = m.params().iter().map(|p| p.tensor.shape.clone()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn full_manifest_shapes() {
        let m = DatsModel::zeros(Manifest::full()).unwrap();
        assert_eq!(m.manifest.fusion_width(), 256);
        assert_eq!(m.decoder.up1.weight.shape, vec![256, 128, 4, 4]);
        assert_eq!(m.decoder.merge1.weight.shape, vec![128, 128 + 128, 3, 3]);
        assert_eq!(m.decoder.merge2.weight.shape, vec![64, 64 + 64, 3, 3]);
        assert_eq!(m.cla.conv1.weight.shape, vec![16, 128, 1, 1]);
        assert_eq!(m.pla_pan.conv2.weight.shape, vec![1, 16, 1, 1]);
        // Deterministic count for the reference layout.
        assert_eq!(m.parameter_count(), DatsModel::zeros(Manifest::full()).unwrap().parameter_count());
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(DatsModel::init(toy(), 7).unwrap(), DatsModel::init(toy(), 7).unwrap());
        assert_ne!(DatsModel::init(toy(), 7).unwrap(), DatsModel::init(toy(), 8).unwrap());
    }

    #[test]
    fn rejects_non_divisible_and_mismatched_inputs() {
        let m = DatsModel::init(toy(), 1).unwrap();
        let pan = random_map(1, 10, 12, 1);
        let ms = random_map(4, 10, 12, 2);
        assert!(matches!(m.forward_raw(&pan, &ms), Err(Error::NotDivisible { .. })));
        let pan = random_map(1, 8, 8, 1);
        let ms = random_map(4, 8, 12, 2);
        assert!(m.forward_raw(&pan, &ms).is_err());
    }

    #[test]
    fn residual_unit_with_zero_branch_is_relu_identity() {
        let fw = 4;
        let unit = ResidualUnit {
            conv_a: Conv2d::new(fw, fw, 3, 1),
            conv_b: Conv2d::new(fw, fw, 3, 1),
        };
        let mut x = random_map(fw, 4, 4, 3);
        x.data.iter_mut().for_each(|v| *v -= 0.5);
        let (y, _) = residual_unit(&unit, &x).unwrap();
        let mut expect = x.clone();
        relu_inplace(&mut expect);
        assert_eq!(y, expect);
    }
}
