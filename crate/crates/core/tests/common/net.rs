//! Network checks shared by the tests and the acceptance runner.

use dats_core::model::{DatsModel, ForwardOptions, ForwardTrace, Manifest};
use dats_core::nn::FeatureMap;
use rand::Rng;

use super::rng;

/// Small model used by the gradient check.
pub fn toy_manifest() -> Manifest {
    Manifest {
        final_init_scale: 1.0,
        ..Manifest::reduced(16)
    }
}

pub fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
    let mut r = rng(seed);
    FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| r.random::<f64>()).collect())
}

/// Checks weight ranges and the broadcast-multiply identities of both gates.
pub fn check_attention(tr: &ForwardTrace) -> Result<(), String> {
    let open = |name: &str, w: &FeatureMap| -> Result<(), String> {
        match w.data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            Some(v) => Err(format!("{name} weight {v} outside (0, 1)")),
            None => Ok(()),
        }
    };
    open("CLA", &tr.cla.weights)?;
    open("PLA(PAN)", &tr.pla_pan.weights)?;

    let f = &tr.ms.a3;
    for c in 0..f.channels {
        let w = tr.cla.weights.data[c];
        for (o, x) in tr.cla.output.plane(c).iter().zip(f.plane(c)) {
            if *o != x * w {
                return Err(format!("CLA output differs from broadcast oracle in channel {c}"));
            }
        }
    }
    let pixel_oracle = |name: &str, input: &FeatureMap, w: &FeatureMap, out: &FeatureMap| {
        for c in 0..input.channels {
            for ((o, x), wv) in out.plane(c).iter().zip(input.plane(c)).zip(&w.data) {
                if *o != x * wv {
                    return Err(format!("{name} output differs from broadcast oracle"));
                }
            }
        }
        Ok(())
    };
    pixel_oracle("PLA(PAN)", &tr.pan.a3, &tr.pla_pan.weights, &tr.pla_pan.output)?;
    if let Some(p) = &tr.pla_ms {
        open("PLA(MS)", &p.weights)?;
        pixel_oracle("PLA(MS)", &tr.cla.output, &p.weights, &p.output)?;
    }
    Ok(())
}

/// Result of comparing backprop with central differences.
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Probes `per_tensor` random entries of every parameter tensor with the
/// linear loss sum(output * probe).
/// Zero biases put pre-activations of dead input windows exactly on the
/// ReLU kink, where central differences see half a slope.
pub fn jitter_biases(mut model: DatsModel, seed: u64) -> DatsModel {
    let names: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
    let mut r = rng(seed);
    for (name, t) in names.iter().zip(model.params_mut()) {
        if name.ends_with(".bias") {
            t.data.iter_mut().for_each(|b| *b = r.random_range(-0.05..0.05));
        }
    }
    model
}

pub fn gradient_check(model: &DatsModel, size: usize, per_tensor: usize, tol: f64, seed: u64) -> GradCheck {
    let pan = random_map(seed, 1, size, size);
    let ms = random_map(seed + 1, 4, size, size);
    let probe = random_map(seed + 2, 4, size, size);
    let opts = ForwardOptions::default();
    let loss = |m: &DatsModel| -> f64 {
        let out = m.forward_trace(&pan, &ms, opts).unwrap().raw_output;
        out.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
    };
    let tr = model.forward_trace(&pan, &ms, opts).unwrap();
    let mut grad = model.zeros_like();
    model.backward(&tr, &probe, &mut grad);
    let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.tensor.data.clone()).collect();

    let mut r = rng(seed + 3);
    let mut probe_model = model.clone();
    let (mut checked, mut passed, mut worst) = (0, 0, 0.0f64);
    let h = 1e-6;
    for (t, a) in analytic.iter().enumerate() {
        for _ in 0..per_tensor.min(a.len()) {
            let i = r.random_range(0..a.len());
            let orig = probe_model.params_mut()[t].data[i];
            probe_model.params_mut()[t].data[i] = orig + h;
            let up = loss(&probe_model);
            probe_model.params_mut()[t].data[i] = orig - h;
            let down = loss(&probe_model);
            probe_model.params_mut()[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let diff = (a[i] - numeric).abs();
            let rel = if diff < 1e-8 { 0.0 } else { diff / a[i].abs().max(numeric.abs()) };
            worst = worst.max(rel);
            checked += 1;
            if rel <= tol {
                passed += 1;
            }
        }
    }
    GradCheck { checked, passed, worst }
}
