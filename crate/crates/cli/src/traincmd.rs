//! Training command: epoch loop, validation tracking, best checkpoint.

use crate::config::RunConfig;
use crate::data::{load_prepared, make_batch, read_manifest, split_names, PreparedSample};
use aasn_core::checkpoint::Checkpoint;
use aasn_core::error::{Error, Result};
use aasn_core::losses::{bce_loss, contrastive_loss, total_loss, Reduction};
use aasn_core::metrics::{auc, image_score};
use aasn_core::model::{AasnModel, Contrastive};
use aasn_core::optim::Adam;
use aasn_core::synthdata::SplitKind;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_b: f64,
    pub l_c: f64,
    pub l: f64,
    pub val_auc: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {:>3}  L_b {:.6}  L_c {:.6}  L {:.6}  val_auc {:.6}",
            self.epoch, self.l_b, self.l_c, self.l, self.val_auc
        )
    }
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    /// Model state at the best validation epoch, header = the run config.
    pub best: Checkpoint,
}

pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Validation AUC of image-level scores (heatmap maxima) in eval mode.
pub fn validation_auc(model: &AasnModel<f32>, val: &[PreparedSample]) -> Result<f64> {
    let mut scores = Vec::with_capacity(val.len());
    let mut labels = Vec::with_capacity(val.len());
    for s in val {
        let out = model.forward(&s.i, &s.i_f, s.grid.as_ref())?;
        scores.push(image_score(&out.y)? as f64);
        labels.push(s.label);
    }
    auc(&scores, &labels)
}

/// Train on prepared samples. Deterministic given the config: the model
/// seed, the per-epoch shuffle, and every op are fixed functions of it.
pub fn train_prepared(
    cfg: &RunConfig,
    train: &[PreparedSample],
    val: &[PreparedSample],
    verbose: bool,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let mc = cfg.model_config()?;
    let mut model = AasnModel::<f32>::new(mc, cfg.train.seed)?;
    let mut adam = Adam::new(cfg.train.lr as f32);
    let margin = cfg.loss.margin as f32;
    let lambda = cfg.loss.lambda as f32;
    let use_contrastive = mc.contrastive != Contrastive::Off;

    let mut logs = Vec::with_capacity(cfg.train.epochs);
    let mut best_epoch = 0usize;
    let mut best_val_auc = f64::NEG_INFINITY;
    let mut best: Option<Checkpoint> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ mix64(epoch as u64));
        order.shuffle(&mut rng);

        model.set_train(true);
        let (mut sum_b, mut sum_c, mut sum_l) = (0f64, 0f64, 0f64);
        for (batch_idx, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&samples)?;
            let out = model.forward(&batch.i, &batch.i_f, batch.grid.as_ref())?;
            let lb = bce_loss(&out.logits, &batch.target)?;
            let (lc_val, total) = if use_contrastive {
                let ff = out.ff.as_ref().expect("contrastive training computes ff");
                let (a, b) = match mc.contrastive {
                    Contrastive::OnWithProjection => (model.project(&out.f)?, model.project(ff)?),
                    _ => (out.f.clone(), ff.clone()),
                };
                let lc = contrastive_loss(&a, &b, &batch.cmask, margin, Reduction::Mean)?;
                let total = total_loss(&lb, &lc, lambda)?;
                (lc.item() as f64, total)
            } else {
                (0.0, lb.clone())
            };
            let (lb_val, l_val) = (lb.item() as f64, total.item() as f64);
            if !l_val.is_finite() {
                return Err(Error::Contract(format!(
                    "training diverged: loss {l_val} at epoch {epoch}, batch {batch_idx} \
                     (samples {:?})",
                    chunk
                )));
            }
            model.zero_grad();
            total.backward()?;
            adam.step(&mut model.params_mut())?;

            let w = chunk.len() as f64;
            sum_b += lb_val * w;
            sum_c += lc_val * w;
            sum_l += l_val * w;
        }

        model.set_train(false);
        let val_auc = validation_auc(&model, val)?;
        let n = train.len() as f64;
        let log = EpochLog { epoch, l_b: sum_b / n, l_c: sum_c / n, l: sum_l / n, val_auc };
        if verbose {
            println!("{}", log.line());
        }
        logs.push(log);

        // `>=` so validation ties resolve to the later epoch: among
        // checkpoints the validation set cannot distinguish, keep the one
        // that optimized the training objective further.
        if val_auc >= best_val_auc {
            best_val_auc = val_auc;
            best_epoch = epoch;
            let mut ckpt = Checkpoint::new(cfg.to_text());
            for (name, t) in model.named_tensors() {
                ckpt.push(&name, t.detach())?;
            }
            best = Some(ckpt);
        }
    }

    Ok(TrainOutcome { logs, best_epoch, best_val_auc, best: best.expect("at least one epoch ran") })
}

/// Full command: load the dataset, train, and write the best checkpoint,
/// the log, and the run config under `paths.out_dir`.
pub fn run(cfg: &RunConfig, verbose: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let root = Path::new(&cfg.paths.data_dir);
    let manifest = read_manifest(root)?;
    let train_names = split_names(&manifest, SplitKind::Train);
    let val_names = split_names(&manifest, SplitKind::Val);
    let train_refs: Vec<&str> = train_names.iter().map(String::as_str).collect();
    let val_refs: Vec<&str> = val_names.iter().map(String::as_str).collect();
    if verbose {
        println!("preparing {} train / {} val samples", train_refs.len(), val_refs.len());
    }
    let train_set = load_prepared(cfg, root, &train_refs)?;
    let val_set = load_prepared(cfg, root, &val_refs)?;

    let outcome = train_prepared(cfg, &train_set, &val_set, verbose)?;

    let out_dir = Path::new(&cfg.paths.out_dir);
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("model_best.ckpt");
    outcome.best.save(&checkpoint_path)?;
    std::fs::write(out_dir.join("run_config.toml"), cfg.to_text())?;

    let mut log_text = String::new();
    for l in &outcome.logs {
        log_text.push_str(&l.line());
        log_text.push('\n');
    }
    log_text.push_str(&format!(
        "best epoch {}  val_auc {:.6}\n",
        outcome.best_epoch, outcome.best_val_auc
    ));
    let log_path = out_dir.join("train_log.txt");
    std::fs::write(&log_path, &log_text)?;
    if verbose {
        println!(
            "best epoch {}  val_auc {:.6}  -> {}",
            outcome.best_epoch,
            outcome.best_val_auc,
            checkpoint_path.display()
        );
    }

    Ok(TrainReport { outcome, checkpoint_path, log_path })
}
