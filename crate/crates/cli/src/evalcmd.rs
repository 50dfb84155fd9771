//! Evaluation command: score a checkpoint on one split and emit the
//! metrics report, per-image scores, and optional overlay images.

use crate::config::{RunConfig, ENV_DATA_DIR, ENV_OUT_DIR};
use crate::data::{load_prepared, read_manifest, split_names, PreparedSample};
use aasn_core::checkpoint::Checkpoint;
use aasn_core::error::{Error, Result};
use aasn_core::metrics::{evaluate, image_score, EvalRecord, MetricsReport};
use aasn_core::model::{AasnModel, Contrastive};
use aasn_core::synthdata::{GrayImage, SplitKind};
use aasn_core::tensor::{sub, sum_channels, upsample_bilinear2x, Tensor};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct EvalOutputs {
    pub cfg: RunConfig,
    pub report: MetricsReport,
    pub report_path: PathBuf,
    pub scores_path: PathBuf,
    pub overlay_count: usize,
}

/// Evenly spaced FROC thresholds covering [0, 1].
pub fn thresholds(bins: usize) -> Vec<f64> {
    (0..bins).map(|k| k as f64 / (bins as f64 - 1.0)).collect()
}

/// Resolve the effective config: the checkpoint's embedded config is
/// authoritative for the model; a user-supplied config may redirect paths
/// or evaluation settings but must agree on the architecture.
fn resolve_config(
    embedded: &RunConfig,
    config_path: Option<&Path>,
    sets: &[String],
) -> Result<RunConfig> {
    if config_path.is_none() && sets.is_empty() {
        let mut cfg = embedded.clone();
        if let Ok(v) = std::env::var(ENV_DATA_DIR) {
            cfg.paths.data_dir = v;
        }
        if let Ok(v) = std::env::var(ENV_OUT_DIR) {
            cfg.paths.out_dir = v;
        }
        return Ok(cfg);
    }
    let requested = RunConfig::load(config_path, sets)?;
    if requested.model != embedded.model {
        let want = toml::Table::try_from(&requested.model).expect("serializes");
        let have = toml::Table::try_from(&embedded.model).expect("serializes");
        let diffs: Vec<String> = have
            .iter()
            .filter(|(k, v)| want.get(*k) != Some(v))
            .map(|(k, v)| format!("model.{k}: checkpoint has {v}, config requests {}", want[k]))
            .collect();
        return Err(Error::Config(format!(
            "config does not match the architecture this checkpoint was trained with — {}",
            diffs.join("; ")
        )));
    }
    Ok(requested)
}

/// Forward one prepared sample in eval mode and bundle everything the
/// metrics need. Returns (record, image score, heatmap, feature distance).
/// (eval record, image score, heatmap, aligned-mirror feature map).
type ScoredSample = (EvalRecord, f64, Tensor<f32>, Option<Tensor<f32>>);

fn score_sample(
    model: &AasnModel<f32>,
    s: &PreparedSample,
    output_stride: usize,
    ambiguous_radius_px: f64,
) -> Result<ScoredSample> {
    let out = model.forward(&s.i, &s.i_f, s.grid.as_ref())?;
    let record = EvalRecord::new(&out.y, &s.points, output_stride, ambiguous_radius_px)?;
    let score = image_score(&out.y)? as f64;
    let fdist = match &out.ff {
        Some(ff) => {
            let (a, b) = match model.config().contrastive {
                Contrastive::OnWithProjection => (model.project(&out.f)?, model.project(ff)?),
                _ => (out.f.clone(), ff.clone()),
            };
            let diff = sub(&a, &b)?;
            let d2 = sum_channels(&aasn_core::tensor::mul(&diff, &diff)?);
            Some(d2)
        }
        None => None,
    };
    Ok((record, score, out.y, fdist))
}

/// Upsample a lattice map by factors of two until it reaches the crop size.
fn to_crop_size(mut t: Tensor<f32>, roi_h: usize, roi_w: usize) -> Result<Tensor<f32>> {
    loop {
        let s = t.shape();
        if s.h == roi_h && s.w == roi_w {
            return Ok(t.detach());
        }
        if s.h > roi_h || s.w > roi_w {
            return Err(Error::Contract(format!(
                "lattice {}x{} does not upsample onto crop {roi_h}x{roi_w}",
                s.h, s.w
            )));
        }
        t = upsample_bilinear2x(&t);
    }
}

/// Normalize a non-negative map to [0, 1] by its maximum (zeros stay zero).
fn normalized(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let max = t.data().iter().fold(0f32, |a, &b| a.max(b));
    let data =
        if max > 0.0 { t.data().iter().map(|v| v / max).collect() } else { t.data().to_vec() };
    Tensor::constant(t.shape(), data)
}

fn write_gray(t: &Tensor<f32>, path: &Path) -> Result<()> {
    GrayImage::from_tensor(t)?.save_png(path)
}

pub fn run(
    checkpoint: &Path,
    config_path: Option<&Path>,
    sets: &[String],
    split: SplitKind,
    overlays: bool,
    verbose: bool,
) -> Result<EvalOutputs> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let embedded = RunConfig::parse(&ckpt.header).map_err(|e| {
        Error::Format(format!(
            "checkpoint {} does not carry a readable run config: {e}",
            checkpoint.display()
        ))
    })?;
    let cfg = resolve_config(&embedded, config_path, sets)?;
    cfg.validate()?;
    let mc = cfg.model_config()?;
    let mut model = AasnModel::from_checkpoint(ckpt, mc)?;
    model.set_train(false);

    let root = Path::new(&cfg.paths.data_dir);
    let manifest = read_manifest(root)?;
    let names = split_names(&manifest, split);
    if names.is_empty() {
        return Err(Error::Config(format!("split '{}' is empty", split.as_str())));
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let samples = load_prepared(&cfg, root, &name_refs)?;

    let out_dir = Path::new(&cfg.paths.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let overlay_dir = out_dir.join("overlays");
    if overlays {
        std::fs::create_dir_all(&overlay_dir)?;
    }

    let (roi_h, roi_w) = mc.input_hw;
    let mut records = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    let mut overlay_count = 0usize;
    for s in &samples {
        let (record, score, heat, fdist) =
            score_sample(&model, s, mc.output_stride, cfg.eval.ambiguous_radius_px)?;
        if overlays {
            let base = |kind: &str| overlay_dir.join(format!("{}_{kind}.png", s.name));
            write_gray(&s.i, &base("input"))?;
            write_gray(&to_crop_size(heat.clone(), roi_h, roi_w)?, &base("heatmap"))?;
            write_gray(&to_crop_size(s.cmask.clone(), roi_h, roi_w)?, &base("cmask"))?;
            if let Some(d) = &fdist {
                let n = normalized(d)?;
                write_gray(&to_crop_size(n, roi_h, roi_w)?, &base("featdist"))?;
            }
            overlay_count += 1;
        }
        records.push(record);
        scores.push(score);
    }

    let report = evaluate(&records, &scores, &thresholds(cfg.eval.froc_bins))?;

    let mut scores_text = String::from("# name\tlabel\tscore\n");
    for (s, v) in samples.iter().zip(&scores) {
        let _ = writeln!(scores_text, "{}\t{}\t{:.6}", s.name, s.label as u8, v);
    }
    let scores_path = out_dir.join(format!("scores_{}.txt", split.as_str()));
    std::fs::write(&scores_path, &scores_text)?;

    let mut text = String::new();
    let _ =
        writeln!(text, "# evaluation of {} on split '{}'", checkpoint.display(), split.as_str());
    let _ = writeln!(text, "# samples: {}", samples.len());
    let _ = writeln!(text, "# run config:");
    for line in cfg.to_text().lines() {
        let _ = writeln!(text, "#   {line}");
    }
    text.push_str(&report.to_text());
    let report_path = out_dir.join(format!("metrics_{}.txt", split.as_str()));
    std::fs::write(&report_path, &text)?;

    if verbose {
        println!("auc         {:.6}", report.auc);
        println!("ap          {:.6}", report.ap);
        println!("recall_fp1  {:.6}", report.recall_fp1);
        println!("recall_fp10 {:.6}", report.recall_fp10);
        println!("report -> {}", report_path.display());
    }

    Ok(EvalOutputs { cfg, report, report_path, scores_path, overlay_count })
}
