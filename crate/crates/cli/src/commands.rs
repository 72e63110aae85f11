use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use dats_core::baselines::{pansharpen_classical, BaselineKind};
use dats_core::checkpoint;
use dats_core::imaging::{self, default_stride, extract_patches, upsample};
use dats_core::io::{self, BandLayout};
use dats_core::metrics::{self, MetricConfig, MetricReport};
use dats_core::raster::normalize;
use dats_core::trainer::{self, TrainState};
use dats_core::{DatsModel, Raster, Sample};

use crate::archive::{self, ArchiveManifest};
use crate::config::FileConfig;
use crate::{
    required, Cli, CliError, Command, CompareArgs, EvaluateArgs, PansharpenArgs, PrepareArgs, Split,
    TrainArgs,
};

/// Checkpoint metadata key listing the archive sources used for training.
pub const SOURCES_KEY: &str = "train.sources";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Classical(BaselineKind),
    Dats,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s.eq_ignore_ascii_case("dats") {
            return Ok(Method::Dats);
        }
        s.parse::<BaselineKind>()
            .map(Method::Classical)
            .map_err(|_| CliError::Usage(format!("unknown method {s:?} (ihs, brovey, hpf, bicubic, dats)")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Classical(k) => k.name(),
            Method::Dats => "dats",
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::Prepare(a) => prepare(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Pansharpen(a) => pansharpen(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Compare(a) => compare(&cfg, a),
    }
}

fn load_normalized(path: &Path, layout: BandLayout) -> Result<Raster, CliError> {
    Ok(normalize(&io::load_raster(path, layout)?))
}

fn prepare(cfg: &FileConfig, a: PrepareArgs) -> Result<(), CliError> {
    let pan_path = a.pan.clone().or_else(|| cfg.pan.clone());
    let pan_path = required(&pan_path, "--pan")?;
    let out = a.out.clone().or_else(|| cfg.out.clone());
    let out = required(&out, "--out")?;
    let degrade = cfg.degrade()?;
    let patch = a.patch.or(cfg.patch).unwrap_or(64);
    let stride = if a.eval {
        patch
    } else {
        a.stride.or(cfg.stride).unwrap_or_else(|| default_stride(patch, true))
    };
    let layout = a.layout.into();

    let pan = load_normalized(pan_path, layout)?;
    let (ms, ms_path) = match (&a.ms_bands, a.ms.clone().or_else(|| cfg.ms.clone())) {
        (Some(bands), _) => {
            let refs: Vec<&Path> = bands.iter().map(PathBuf::as_path).collect();
            (normalize(&io::load_band_stack(&refs)?), bands[0].clone())
        }
        (None, Some(p)) => (load_normalized(&p, layout)?, p),
        (None, None) => return Err(CliError::Usage("missing --ms or --ms-bands".into())),
    };
    if ms.channels() != 4 {
        return Err(CliError::InvalidData(format!("MS has {} bands, expected 4", ms.channels())));
    }
    let samples = extract_patches(&pan, &ms, patch, stride, &degrade)?;
    if samples.is_empty() {
        return Err(CliError::InvalidData("no complete window fits the image".into()));
    }
    let preview = match &a.preview {
        Some(_) => Some(imaging::false_color(&samples[0].hrms_ref)?),
        None => None,
    };

    let manifest = ArchiveManifest {
        version: archive::FORMAT_VERSION,
        source: a.source,
        scale: degrade.scale,
        patch,
        stride,
        samples: samples.len(),
        pan: pan_path.to_path_buf(),
        ms: ms_path,
    };
    archive::write(out, &manifest, &samples)?;
    if let (Some(p), Some(img)) = (&a.preview, preview) {
        io::save_png(p, &img)?;
    }
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn load_archives(dirs: &[PathBuf]) -> Result<Vec<(ArchiveManifest, Vec<Sample>)>, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Usage("no sample archive given (--data)".into()));
    }
    dirs.iter().map(|d| archive::read(d)).collect()
}

fn train(cfg: &FileConfig, a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    macro_rules! over {
        ($($f:ident),*) => { $( if a.$f.is_some() { cfg.$f = a.$f; } )* };
    }
    over!(epochs, batch_size, learning_rate, width_divisor, checkpoint_every, holdout);
    let out = a.out.clone().or_else(|| cfg.out.clone());
    let out = required(&out, "--out")?.to_path_buf();
    let data = if a.data.is_empty() { cfg.data.clone().unwrap_or_default() } else { a.data.clone() };

    let mut tc = cfg.train()?;
    tc.checkpoint_dir = Some(out.clone());
    let holdout = cfg.holdout()?;
    let state = match &a.resume {
        Some(p) => checkpoint::load_state(p)?,
        None => TrainState::fresh(DatsModel::init(cfg.manifest()?, tc.seed)?),
    };
    let archives = load_archives(&data)?;
    let sources: BTreeSet<String> = archives.iter().map(|(m, _)| m.source.clone()).collect();
    let mut samples: Vec<Sample> = archives.into_iter().flat_map(|(_, s)| s).collect();
    let held = ((samples.len() as f64) * holdout).floor() as usize;
    let held_out = samples.split_off(samples.len() - held);
    if samples.is_empty() {
        return Err(CliError::InvalidData("no training samples left after holdout".into()));
    }

    let meta = BTreeMap::from([
        (SOURCES_KEY.to_string(), sources.into_iter().collect::<Vec<_>>().join(",")),
        ("train.seed".to_string(), tc.seed.to_string()),
    ]);
    let (state, log) = trainer::fit_from(state, &samples, &tc, &meta)?;
    log.write_jsonl(&out.join(LOG_FILE))?;

    let last = log.last_loss().map_or("n/a".to_string(), |l| format!("{l:.6}"));
    let mut summary = format!(
        "trained {} steps on {} samples in {:.1} s, final loss {last}",
        log.len(),
        samples.len(),
        log.wall_seconds
    );
    if !held_out.is_empty() {
        let l = trainer::dataset_loss(&state.model, &held_out)?;
        summary.push_str(&format!(", holdout loss {l:.6} on {} samples", held_out.len()));
    }
    println!("{summary}; checkpoint {}", out.join(trainer::FINAL_CHECKPOINT).display());
    Ok(())
}

fn fuse(method: &Method, model: Option<&DatsModel>, cfg: &FileConfig, pan: &Raster, lrms_up: &Raster) -> Result<Raster, CliError> {
    match method {
        Method::Classical(k) => Ok(pansharpen_classical(&cfg.baseline(*k)?, pan, lrms_up)?),
        Method::Dats => Ok(model.expect("checked by caller").forward(pan, lrms_up)?),
    }
}

fn checkpoint_for(methods: &[Method], path: Option<&Path>) -> Result<Option<(DatsModel, BTreeMap<String, String>)>, CliError> {
    let needs = methods.contains(&Method::Dats);
    match (needs, path) {
        (true, None) => Err(CliError::Usage("method dats requires --checkpoint".into())),
        (false, Some(_)) => Err(CliError::Usage("--checkpoint is only used by method dats".into())),
        (true, Some(p)) => {
            let c = checkpoint::load_container(p)?;
            let st = checkpoint::from_container(&c).map_err(|r| CliError::InvalidData(format!("{}: {r}", p.display())))?;
            Ok(Some((st.model, c.meta)))
        }
        (false, None) => Ok(None),
    }
}

fn pansharpen(cfg: &FileConfig, a: PansharpenArgs) -> Result<(), CliError> {
    let method = Method::parse(&a.method)?;
    let ckpt = a.checkpoint.clone().or_else(|| match method {
        Method::Dats => cfg.checkpoint.clone(),
        Method::Classical(_) => None,
    });
    let model = checkpoint_for(std::slice::from_ref(&method), ckpt.as_deref())?.map(|(m, _)| m);
    let scale = cfg.scale();
    let layout = a.layout.into();
    let pan = load_normalized(&a.pan, layout)?;
    let lrms = load_normalized(&a.lrms, layout)?;
    if pan.channels() != 1 || lrms.channels() != 4 {
        return Err(CliError::InvalidData(format!(
            "expected 1-band PAN and 4-band MS, got {} and {}",
            pan.channels(),
            lrms.channels()
        )));
    }
    if (lrms.height() * scale, lrms.width() * scale) != (pan.height(), pan.width()) {
        return Err(dats_core::Error::DimensionMismatch {
            expected: (pan.height() / scale, pan.width() / scale, 4),
            found: lrms.shape(),
        }
        .into());
    }
    let fused = fuse(&method, model.as_ref(), cfg, &pan, &upsample(&lrms, scale)?)?;
    let preview = match &a.preview {
        Some(_) => Some(imaging::false_color(&fused)?),
        None => None,
    };
    io::save_raster(&a.out, &fused, BandLayout::Interleaved)?;
    if let (Some(p), Some(img)) = (&a.preview, preview) {
        io::save_png(p, &img)?;
    }
    Ok(())
}

fn evaluate(cfg: &FileConfig, a: EvaluateArgs) -> Result<(), CliError> {
    let mc = cfg.metrics()?;
    let layout = a.layout.into();
    let fused = load_normalized(&a.fused, layout)?;
    let reference = load_normalized(&a.reference, layout)?;
    let rows = vec![(a.name, metrics::evaluate(&fused, &reference, &mc)?)];
    if a.json {
        print!("{}", metrics::format_records(&rows));
    } else {
        print!("{}", metrics::format_table(&rows, true));
    }
    Ok(())
}

/// Mean metrics of each method over the samples, in the given order.
pub fn compare_samples(
    methods: &[Method],
    model: Option<&DatsModel>,
    cfg: &FileConfig,
    mc: &MetricConfig,
    samples: &[Sample],
) -> Result<Vec<(String, MetricReport)>, CliError> {
    let mut rows = Vec::with_capacity(methods.len());
    for m in methods {
        let mut reports = Vec::with_capacity(samples.len());
        for s in samples {
            let fused = fuse(m, model, cfg, &s.pan, &s.lrms_up)?;
            reports.push(metrics::evaluate(&fused, &s.hrms_ref, mc)?);
        }
        let mean = MetricReport::mean(&reports).ok_or_else(|| CliError::InvalidData("no samples to compare".into()))?;
        rows.push((m.name().to_string(), mean));
    }
    Ok(rows)
}

fn compare(cfg: &FileConfig, a: CompareArgs) -> Result<(), CliError> {
    let methods = a.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    let mc = cfg.metrics()?;
    let ckpt = a.checkpoint.clone().or_else(|| {
        if methods.contains(&Method::Dats) { cfg.checkpoint.clone() } else { None }
    });
    if a.split != Split::All && ckpt.is_none() {
        return Err(CliError::Usage("--split needs a checkpoint to know the training sources".into()));
    }
    let loaded = match &ckpt {
        Some(p) if !methods.contains(&Method::Dats) => {
            // Only the training sources are needed.
            let c = checkpoint::load_container(p)?;
            Some((None, c.meta))
        }
        _ => checkpoint_for(&methods, ckpt.as_deref())?.map(|(m, meta)| (Some(m), meta)),
    };
    let (model, meta) = match loaded {
        Some((m, meta)) => (m, meta),
        None => (None, BTreeMap::new()),
    };
    let trained_on: BTreeSet<&str> = meta
        .get(SOURCES_KEY)
        .map(|s| s.split(',').filter(|t| !t.is_empty()).collect())
        .unwrap_or_default();

    let data = if a.data.is_empty() { cfg.data.clone().unwrap_or_default() } else { a.data.clone() };
    let archives = load_archives(&data)?;
    let samples: Vec<Sample> = archives
        .into_iter()
        .filter(|(m, _)| match a.split {
            Split::All => true,
            Split::Favorable => trained_on.contains(m.source.as_str()),
            Split::Typical => !trained_on.contains(m.source.as_str()),
        })
        .flat_map(|(_, s)| s)
        .collect();
    if samples.is_empty() {
        return Err(CliError::InvalidData(format!("no samples in the {:?} split", a.split)));
    }
    let rows = compare_samples(&methods, model.as_ref(), cfg, &mc, &samples)?;
    let mut previews = Vec::new();
    if a.preview.is_some() {
        for m in &methods {
            let fused = fuse(m, model.as_ref(), cfg, &samples[0].pan, &samples[0].lrms_up)?;
            previews.push((m.name(), imaging::false_color(&fused)?));
        }
        previews.push(("reference", imaging::false_color(&samples[0].hrms_ref)?));
    }

    let table = metrics::format_table(&rows, true);
    print!("{table}");
    if let Some(p) = &a.table {
        std::fs::write(p, &table).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, metrics::format_records(&rows)).map_err(|e| CliError::io(p, e))?;
    }
    if let Some(dir) = &a.preview {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (name, img) in &previews {
            io::save_png(&dir.join(format!("{name}.png")), img)?;
        }
    }
    Ok(())
}
