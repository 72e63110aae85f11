//! Acceptance runner. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::net::{check_attention, gradient_check, jitter_biases, random_map, toy_manifest};
use dats_core::baselines::{pansharpen_classical, BaselineKind, BaselineMethod};
use dats_core::checkpoint;
use dats_core::metrics::{self, MetricConfig, MetricReport};
use dats_core::model::{DatsModel, ForwardOptions, Manifest};
use dats_core::synthetic;
use dats_core::trainer::{self, TrainConfig, TrainState};
use dats_core::Sample;

type Outcome = Result<String, String>;

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(" ")
}

/// Desk-scale training run shared by the overfit and ordering criteria.
struct Overfit {
    model: DatsModel,
    train_loss: f64,
    bicubic_loss: f64,
    smoothed: Vec<f64>,
    elapsed: Duration,
}

const OVERFIT_STEPS: usize = 2000;
const OVERFIT_SAMPLES: usize = 8;

fn overfit_manifest() -> Manifest {
    Manifest {
        final_init_scale: 0.0,
        ..Manifest::reduced(4)
    }
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        learning_rate: 1e-4,
        adam_beta1: 0.5,
        adam_beta2: 0.999,
        epochs: OVERFIT_STEPS / OVERFIT_SAMPLES,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn run_overfit() -> Overfit {
    let start = Instant::now();
    let data = synthetic::samples(OVERFIT_SAMPLES, 64, 4, 100).unwrap();
    let model = DatsModel::init(overfit_manifest(), 7).unwrap();
    let (model, log) = trainer::fit(model, &data, &overfit_config()).unwrap();
    assert_eq!(log.len(), OVERFIT_STEPS);
    let bicubic_loss = data
        .iter()
        .map(|s| trainer::l1_loss(&s.lrms_up, &s.hrms_ref).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    Overfit {
        train_loss: trainer::dataset_loss(&model, &data).unwrap(),
        smoothed: trainer::smoothed(&log.losses(), 50),
        model,
        bicubic_loss,
        elapsed: start.elapsed(),
    }
}

fn ideal_values() -> Outcome {
    let cfg = MetricConfig::default();
    let mut worst = [0.0f64; 5];
    for seed in 0..100 {
        let mut rng = common::rng(seed);
        let (_, r) = common::random_pair(seed);
        let r = if seed % 2 == 0 { r } else { common::random_raster(&mut rng, 24, 17, 4) };
        let rep = metrics::evaluate(&r, &r, &cfg).map_err(|e| e.to_string())?;
        for (i, (v, ideal)) in rep.values().iter().zip(MetricReport::IDEAL.values()).enumerate() {
            worst[i] = worst[i].max((v - ideal).abs());
        }
    }
    // ERGAS, SAM, SCC exact to 1e-9; windowed UIQI and SSIM to 1e-6.
    let tol = [1e-9, 1e-9, 1e-6, 1e-9, 1e-6];
    let ok = worst.iter().zip(tol).all(|(w, t)| *w <= t);
    let msg = format!("max deviation from ideal [{}] over 100 rasters", sci(&worst));
    if ok { Ok(msg) } else { Err(msg) }
}

fn oracle_equivalence() -> Outcome {
    let cfg = MetricConfig::default();
    let mut worst = [0.0f64; 5];
    for seed in 0..100 {
        let (f, r) = common::random_pair(1000 + seed);
        let lib = metrics::evaluate(&f, &r, &cfg).map_err(|e| e.to_string())?;
        let oracle = [
            common::ergas(&f, &r, cfg.resolution_ratio),
            common::sam(&f, &r),
            common::uiqi(&f, &r, cfg.uiqi_window),
            common::scc(&f, &r),
            common::ssim(&f, &r, cfg.ssim_window, cfg.ssim_sigma, cfg.ssim_c1, cfg.ssim_c2),
        ];
        for i in 0..5 {
            worst[i] = worst[i].max((lib.values()[i] - oracle[i]).abs());
        }
    }
    let tol = [1e-9, 1e-9, 1e-7, 1e-9, 1e-7];
    let ok = worst.iter().zip(tol).all(|(w, t)| *w <= t);
    let msg = format!("max |library - oracle| [{}] (ERGAS SAM UIQI SCC SSIM) over 100 pairs", sci(&worst));
    if ok { Ok(msg) } else { Err(msg) }
}

fn invariances() -> Outcome {
    let cfg = MetricConfig::default();
    let (mut d_sam, mut d_scc, mut d_ergas) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let (f, r) = common::random_pair(2000 + seed);
        let k = 0.1 + seed as f64 * 0.07;
        let map = |g: &dyn Fn(f64) -> f64| {
            dats_core::Raster::new(f.height(), f.width(), 4, f.data().iter().map(|v| g(*v)).collect()).unwrap()
        };
        let sam0 = metrics::sam(&f, &r, &cfg).unwrap();
        d_sam = d_sam.max((metrics::sam(&map(&|v| v * k), &r, &cfg).unwrap() - sam0).abs());
        let scc0 = metrics::scc(&f, &r).unwrap();
        d_scc = d_scc.max((metrics::scc(&map(&|v| v + k - 0.5), &r).unwrap() - scc0).abs());
        let unit = metrics::ergas(&f, &r, &MetricConfig { resolution_ratio: 1.0, ..cfg }).unwrap();
        let ratio = 1.0 / (1.0 + seed as f64);
        let e = metrics::ergas(&f, &r, &MetricConfig { resolution_ratio: ratio, ..cfg }).unwrap();
        d_ergas = d_ergas.max((e - ratio * unit).abs());
    }
    let msg = format!("SAM scale {d_sam:.1e}, SCC shift {d_scc:.1e}, ERGAS ratio linearity {d_ergas:.1e}");
    if d_sam.max(d_scc).max(d_ergas) <= 1e-9 { Ok(msg) } else { Err(msg) }
}

fn network_shapes() -> Outcome {
    let model = DatsModel::init(Manifest::reduced(8), 3).map_err(|e| e.to_string())?;
    let mut traces = 0;
    for (i, size) in [8usize, 16, 32, 64, 128].into_iter().enumerate() {
        for (h, w) in [(size, size), (size, 2 * size)] {
            let pan = random_map(10 * i as u64 + h as u64, 1, h, w);
            let ms = random_map(10 * i as u64 + w as u64 + 1, 4, h, w);
            let tr = model.forward_trace(&pan, &ms, ForwardOptions::default()).map_err(|e| e.to_string())?;
            if tr.raw_output.shape() != (4, h, w) {
                return Err(format!("{h}x{w} input gave output {:?}", tr.raw_output.shape()));
            }
            check_attention(&tr)?;
            traces += 1;
        }
    }
    Ok(format!("{traces} inputs from 8x8 to 128x256: 4-band PAN-sized outputs, weights in (0,1), exact broadcast oracles"))
}

fn gradients() -> Outcome {
    let model = jitter_biases(DatsModel::init(toy_manifest(), 5).map_err(|e| e.to_string())?, 6);
    let gc = gradient_check(&model, 16, 12, 1e-3, 99);
    let msg = format!(
        "{}/{} sampled parameters within 1e-3 relative error ({:.2}%), worst {:.1e}",
        gc.passed,
        gc.checked,
        100.0 * gc.fraction(),
        gc.worst
    );
    if gc.fraction() >= 0.99 { Ok(msg) } else { Err(msg) }
}

fn overfit(o: &Overfit) -> Outcome {
    let first = o.smoothed.first().copied().unwrap_or(f64::NAN);
    let last = o.smoothed.last().copied().unwrap_or(f64::NAN);
    let rises = o.smoothed.windows(2).filter(|w| w[1] > w[0]).count();
    let msg = format!(
        "L1 {:.4} after {OVERFIT_STEPS} steps (target < 0.01; bicubic input {:.4}; 50-step mean {:.4} -> {:.4}, {rises} of {} windows rose)",
        o.train_loss,
        o.bicubic_loss,
        first,
        last,
        o.smoothed.len().saturating_sub(1)
    );
    if o.train_loss < 0.01 { Ok(msg) } else { Err(msg) }
}

fn mean_report(samples: &[Sample], f: impl Fn(&Sample) -> dats_core::Raster) -> MetricReport {
    let cfg = MetricConfig::default();
    let reports: Vec<MetricReport> = samples
        .iter()
        .map(|s| metrics::evaluate(&f(s), &s.hrms_ref, &cfg).unwrap())
        .collect();
    MetricReport::mean(&reports).unwrap()
}

fn ordering(o: &Overfit) -> Outcome {
    let test = synthetic::samples(8, 64, 4, 5000).map_err(|e| e.to_string())?;
    let dats = mean_report(&test, |s| o.model.forward(&s.pan, &s.lrms_up).unwrap());
    let classical = |k| move |s: &Sample| pansharpen_classical(&BaselineMethod::new(k), &s.pan, &s.lrms_up).unwrap();
    let bicubic = mean_report(&test, classical(BaselineKind::Bicubic));
    let hpf = mean_report(&test, classical(BaselineKind::Hpf));
    let ok = dats.ergas < bicubic.ergas && dats.ssim > bicubic.ssim && hpf.scc > bicubic.scc;
    let msg = format!(
        "held-out scenes: ERGAS dats {:.3} vs bicubic {:.3}; SSIM dats {:.4} vs bicubic {:.4}; SCC hpf {:.4} vs bicubic {:.4}",
        dats.ergas, bicubic.ergas, dats.ssim, bicubic.ssim, hpf.scc, bicubic.scc
    );
    if ok { Ok(msg) } else { Err(msg) }
}

fn persistence() -> Outcome {
    let manifest = Manifest::reduced(16);
    let data = synthetic::samples(5, 16, 4, 77).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { batch_size: 2, epochs: 3, seed: 11, ..TrainConfig::default() };
    let (a, _) = trainer::fit(DatsModel::init(manifest.clone(), 1).unwrap(), &data, &cfg).map_err(|e| e.to_string())?;
    let (b, _) = trainer::fit(DatsModel::init(manifest.clone(), 1).unwrap(), &data, &cfg).map_err(|e| e.to_string())?;
    if a != b {
        return Err("two fixed-seed runs differ".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save_model(&path, &a).map_err(|e| e.to_string())?;
    if checkpoint::load_model(&path).map_err(|e| e.to_string())? != a {
        return Err("checkpoint round trip changed parameters".into());
    }

    let ck_cfg = TrainConfig { checkpoint_every: 4, checkpoint_dir: Some(dir.path().to_path_buf()), ..cfg.clone() };
    let (full, _) = trainer::fit_from(TrainState::fresh(DatsModel::init(manifest, 1).unwrap()), &data, &ck_cfg, &BTreeMap::new())
        .map_err(|e| e.to_string())?;
    let mid = checkpoint::load_state(&trainer::checkpoint_path(dir.path(), 4)).map_err(|e| e.to_string())?;
    let (resumed, _) = trainer::fit_from(mid, &data, &cfg, &BTreeMap::new()).map_err(|e| e.to_string())?;
    if resumed.model != full.model || resumed.adam != full.adam {
        return Err("resume from step 4 diverged from the uninterrupted run".into());
    }
    Ok("fixed-seed runs bitwise equal; checkpoint round trip exact; resume at step 4 of 9 matches".into())
}

fn report(id: usize, name: &str, limit: Option<Duration>, elapsed: Duration, outcome: Outcome) -> bool {
    let over = limit.is_some_and(|l| elapsed > l);
    let (pass, detail) = match outcome {
        Ok(d) if over => (false, format!("{d}; exceeded {:?} limit", limit.unwrap())),
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "[{}] {id}. {name} ({:.1} s): {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn timed(f: impl FnOnce() -> Outcome) -> (Duration, Outcome) {
    let t = Instant::now();
    let out = f();
    (t.elapsed(), out)
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;

    let (t, o) = timed(ideal_values);
    all &= report(1, "metric ideal values", Some(secs(10)), t, o);
    let (t, o) = timed(oracle_equivalence);
    all &= report(2, "metric oracle equivalence", Some(secs(30)), t, o);
    let (t, o) = timed(invariances);
    all &= report(3, "metric invariances", None, t, o);
    let (t, o) = timed(network_shapes);
    all &= report(4, "network shapes and attention", Some(secs(20)), t, o);
    let (t, o) = timed(gradients);
    all &= report(5, "gradient check", Some(secs(120)), t, o);

    let run = run_overfit();
    let (t, o) = timed(|| overfit(&run));
    all &= report(6, "overfit smoke test", Some(secs(600)), run.elapsed + t, o);
    let (t, o) = timed(|| ordering(&run));
    all &= report(7, "relative ordering", Some(secs(900)), run.elapsed + t, o);

    let (t, o) = timed(persistence);
    all &= report(8, "determinism and persistence", None, t, o);

    if !all {
        std::process::exit(1);
    }
}
