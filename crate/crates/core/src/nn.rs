//! Minimal CPU tensor kernels with hand-written backward passes.
//!
//! Feature maps are channel-major (`c, h, w`). Convolutions lower to GEMM via
//! im2col; transposed convolutions run the same lowering in reverse.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// An activation tensor flowing between network blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Concatenates along the channel axis, in argument order.
pub fn concat(parts: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = parts
        .first()
        .ok_or_else(|| Error::network("concat", "nothing to concatenate"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::new();
    let mut channels = 0;
    for p in parts {
        if (p.height, p.width) != (h, w) {
            return Err(Error::network(
                "concat",
                format!("spatial {}x{} vs {}x{}", p.height, p.width, h, w),
            ));
        }
        data.extend_from_slice(&p.data);
        channels += p.channels;
    }
    Ok(FeatureMap::from_data(channels, h, w, data))
}

/// Splits a channel-axis gradient back into per-part pieces.
pub fn split_channels(g: &FeatureMap, sizes: &[usize]) -> Vec<FeatureMap> {
    let n = g.plane_len();
    let mut at = 0;
    sizes
        .iter()
        .map(|c| {
            let part = FeatureMap::from_data(*c, g.height, g.width, g.data[at * n..(at + c) * n].to_vec());
            at += c;
            part
        })
        .collect()
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut FeatureMap, activated: &FeatureMap) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// A named, shaped parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn fill_normal<R: Rng>(&mut self, rng: &mut R, std: f64) {
        for v in &mut self.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C`, where `op(A)` is
/// `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe row-major buffers of
    // exactly those sizes, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds `img` (c x h x w) into a `(c*k*k) x (oh*ow)` matrix.
pub(crate) fn im2col(img: &[f64], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Vec<f64> {
    let k = win.kernel;
    let n = oh * ow;
    let mut cols = vec![0.0; c * k * k * n];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `c x h x w` image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Vec<f64> {
    let k = win.kernel;
    let n = oh * ow;
    let mut img = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    img
}

/// 2-D convolution with zero padding. Weight is `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            window: Window {
                kernel,
                stride,
                pad: kernel / 2,
            },
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.window.kernel * self.window.kernel
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        if x.channels != self.in_channels {
            return Err(Error::network(
                "conv",
                format!("expected {} input channels, got {}", self.in_channels, x.channels),
            ));
        }
        let oh = self.window.output_len(x.height);
        let ow = self.window.output_len(x.width);
        let cols = im2col(&x.data, x.channels, x.height, x.width, self.window, oh, ow);
        let n = oh * ow;
        let mut out = vec![0.0; self.out_channels * n];
        for (o, b) in self.bias.data.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(*b);
        }
        gemm(self.out_channels, self.fan_in(), n, &self.weight.data, false, &cols, false, 1.0, &mut out);
        Ok((
            FeatureMap::from_data(self.out_channels, oh, ow, out),
            ConvCache {
                cols,
                in_shape: x.shape(),
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, grad_out: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        let n = grad_out.plane_len();
        let k = self.fan_in();
        gemm(self.out_channels, n, k, &grad_out.data, false, &cache.cols, true, 1.0, &mut grad.weight.data);
        for (o, gb) in grad.bias.data.iter_mut().enumerate() {
            *gb += grad_out.plane(o).iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; k * n];
        gemm(k, self.out_channels, n, &self.weight.data, true, &grad_out.data, false, 0.0, &mut dcols);
        let (c, h, w) = cache.in_shape;
        FeatureMap::from_data(c, h, w, col2im(&dcols, c, h, w, self.window, grad_out.height, grad_out.width))
    }
}

/// Transposed convolution (fractionally strided). Weight is `[in, out, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub window: Window,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvTransposeCache {
    input: FeatureMap,
}

impl ConvTranspose2d {
    /// 4x4 kernel, stride 2, padding 1: doubles height and width.
    pub fn upsample2x(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            window: Window {
                kernel: 4,
                stride: 2,
                pad: 1,
            },
            weight: Tensor::zeros(&[in_channels, out_channels, 4, 4]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn out_len(&self, n: usize) -> usize {
        (n - 1) * self.window.stride + self.window.kernel - 2 * self.window.pad
    }

    /// Inputs feeding each output pixel, used for weight scaling.
    pub fn fan_in(&self) -> usize {
        let taps = self.window.kernel / self.window.stride;
        self.in_channels * taps * taps
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvTransposeCache)> {
        if x.channels != self.in_channels {
            return Err(Error::network(
                "transposed conv",
                format!("expected {} input channels, got {}", self.in_channels, x.channels),
            ));
        }
        let (oh, ow) = (self.out_len(x.height), self.out_len(x.width));
        let kk = self.out_channels * self.window.kernel * self.window.kernel;
        let n = x.plane_len();
        let mut cols = vec![0.0; kk * n];
        gemm(kk, self.in_channels, n, &self.weight.data, true, &x.data, false, 0.0, &mut cols);
        let mut out = col2im(&cols, self.out_channels, oh, ow, self.window, x.height, x.width);
        let plane = oh * ow;
        for (o, b) in self.bias.data.iter().enumerate() {
            out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        Ok((
            FeatureMap::from_data(self.out_channels, oh, ow, out),
            ConvTransposeCache { input: x.clone() },
        ))
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache,
        grad_out: &FeatureMap,
        grad: &mut ConvTranspose2d,
    ) -> FeatureMap {
        let x = &cache.input;
        let n = x.plane_len();
        let kk = self.out_channels * self.window.kernel * self.window.kernel;
        let dcols = im2col(
            &grad_out.data,
            self.out_channels,
            grad_out.height,
            grad_out.width,
            self.window,
            x.height,
            x.width,
        );
        gemm(self.in_channels, n, kk, &x.data, false, &dcols, true, 1.0, &mut grad.weight.data);
        for (o, gb) in grad.bias.data.iter_mut().enumerate() {
            *gb += grad_out.plane(o).iter().sum::<f64>();
        }
        let mut dx = vec![0.0; self.in_channels * n];
        gemm(self.in_channels, kk, n, &self.weight.data, false, &dcols, false, 0.0, &mut dx);
        FeatureMap::from_data(self.in_channels, x.height, x.width, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Textbook nested-loop convolution.
    fn conv_oracle(layer: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let win = layer.window;
        let (oh, ow) = (win.output_len(x.height), win.output_len(x.width));
        let k = win.kernel;
        let mut out = FeatureMap::zeros(layer.out_channels, oh, ow);
        for o in 0..layer.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias.data[o];
                    for i in 0..layer.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                                let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wv = layer.weight.data[((o * layer.in_channels + i) * k + ky) * k + kx];
                                acc += wv * x.data[(i * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    /// Scatter definition of the transposed convolution.
    fn tconv_oracle(layer: &ConvTranspose2d, x: &FeatureMap) -> FeatureMap {
        let win = layer.window;
        let k = win.kernel;
        let (oh, ow) = (2 * x.height, 2 * x.width);
        let mut out = FeatureMap::zeros(layer.out_channels, oh, ow);
        for o in 0..layer.out_channels {
            out.plane_mut(o).fill(layer.bias.data[o]);
        }
        for i in 0..layer.in_channels {
            for y in 0..x.height {
                for xx in 0..x.width {
                    let v = x.data[(i * x.height + y) * x.width + xx];
                    for o in 0..layer.out_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = (y * win.stride + ky) as isize - win.pad as isize;
                                let ox = (xx * win.stride + kx) as isize - win.pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = layer.weight.data[((i * layer.out_channels + o) * k + ky) * k + kx];
                                out.data[(o * oh + oy as usize) * ow + ox as usize] += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, k) in [(1, 3), (2, 3), (1, 1)] {
            let mut layer = Conv2d::new(3, 5, k, stride);
            layer.weight.fill_normal(&mut rng, 0.5);
            layer.bias.fill_normal(&mut rng, 0.5);
            let x = random_map(3, 6, 8, &mut rng);
            let (y, _) = layer.forward(&x).unwrap();
            assert_close(&y.data, &conv_oracle(&layer, &x).data, 1e-12);
        }
    }

    #[test]
    fn transposed_conv_matches_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = ConvTranspose2d::upsample2x(3, 2);
        layer.weight.fill_normal(&mut rng, 0.5);
        layer.bias.fill_normal(&mut rng, 0.5);
        let x = random_map(3, 4, 5, &mut rng);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), (2, 8, 10));
        assert_close(&y.data, &tconv_oracle(&layer, &x).data, 1e-12);
    }

    /// Checks <backward(g), dx> against the directional finite difference of
    /// <forward(x), g>, for inputs and every parameter entry.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Conv2d::new(2, 3, 3, 2);
        layer.weight.fill_normal(&mut rng, 0.5);
        layer.bias.fill_normal(&mut rng, 0.5);
        let x = random_map(2, 6, 6, &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        let g = random_map(y.channels, y.height, y.width, &mut rng);
        let objective = |l: &Conv2d, x: &FeatureMap| -> f64 {
            let (y, _) = l.forward(x).unwrap();
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = layer.clone();
        grad.weight = grad.weight.zeros_like();
        grad.bias = grad.bias.zeros_like();
        let dx = layer.backward(&cache, &g, &mut grad);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += eps;
            xm.data[i] -= eps;
            let fd = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in 0..layer.weight.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.weight.data[i] += eps;
            lm.weight.data[i] -= eps;
            let fd = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * eps);
            assert!((fd - grad.weight.data[i]).abs() < 1e-7);
        }
        for i in 0..layer.bias.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.bias.data[i] += eps;
            lm.bias.data[i] -= eps;
            let fd = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * eps);
            assert!((fd - grad.bias.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn transposed_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = ConvTranspose2d::upsample2x(2, 3);
        layer.weight.fill_normal(&mut rng, 0.5);
        layer.bias.fill_normal(&mut rng, 0.5);
        let x = random_map(2, 3, 4, &mut rng);
        let (y, cache) = layer.forward(&x).unwrap();
        let g = random_map(y.channels, y.height, y.width, &mut rng);
        let objective = |l: &ConvTranspose2d, x: &FeatureMap| -> f64 {
            let (y, _) = l.forward(x).unwrap();
            y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = layer.clone();
        grad.weight = grad.weight.zeros_like();
        grad.bias = grad.bias.zeros_like();
        let dx = layer.backward(&cache, &g, &mut grad);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += eps;
            xm.data[i] -= eps;
            let fd = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7);
        }
        for i in 0..layer.weight.len() {
            let (mut lp, mut lm) = (layer.clone(), layer.clone());
            lp.weight.data[i] += eps;
            lm.weight.data[i] -= eps;
            let fd = (objective(&lp, &x) - objective(&lm, &x)) / (2.0 * eps);
            assert!((fd - grad.weight.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(2, 3, 3, &mut rng);
        let b = random_map(4, 3, 3, &mut rng);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.channels, 6);
        assert_eq!(&c.data[..a.data.len()], &a.data[..]);
        let parts = split_channels(&c, &[2, 4]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat(&[&a, &random_map(1, 2, 3, &mut rng)]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
