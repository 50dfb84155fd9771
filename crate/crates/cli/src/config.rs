//! Run configuration: one flat `[section] key = value` document that pins
//! every knob of a run — data generation, model, losses, optimization,
//! evaluation, and paths. The exact text is embedded in every checkpoint
//! and metrics report, so any artifact can be reproduced from itself.

use aasn_core::error::{Error, Result};
use aasn_core::model::ModelConfig;
use aasn_core::synthdata::PhantomSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Environment variable overriding `paths.data_dir`.
pub const ENV_DATA_DIR: &str = "AASN_DATA_DIR";
/// Environment variable overriding `paths.out_dir`.
pub const ENV_OUT_DIR: &str = "AASN_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lesion_prob: f64,
    pub max_lesions: usize,
    pub pose_magnitude: f64,
    pub nuisance_magnitude: f64,
    pub lesion_contrast: f64,
    pub lesion_width_px: f64,
    pub noise_sigma: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        DataSection {
            seed: spec.seed,
            image_h: spec.image_hw.0,
            image_w: spec.image_hw.1,
            n_train: 2000,
            n_val: 250,
            n_test: 500,
            lesion_prob: spec.lesion_prob,
            max_lesions: spec.max_lesions,
            pose_magnitude: spec.pose_magnitude,
            nuisance_magnitude: spec.nuisance_magnitude,
            lesion_contrast: spec.lesion_contrast,
            lesion_width_px: spec.lesion_width_px,
            noise_sigma: spec.noise_sigma,
            split_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_channels: usize,
    pub blocks_before_split: usize,
    pub blocks_after_split: usize,
    pub fusion: String,
    pub align: String,
    pub contrastive: String,
    pub proj_dim: usize,
    pub roi_h: usize,
    pub roi_w: usize,
    pub output_stride: usize,
    pub roi_margin_frac: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            base_channels: 8,
            blocks_before_split: 3,
            blocks_after_split: 1,
            fusion: "inside_transition".into(),
            align: "feature".into(),
            contrastive: "on_with_projection".into(),
            proj_dim: 0,
            roi_h: 64,
            roi_w: 128,
            output_stride: 4,
            roi_margin_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub margin: f64,
    pub lambda: f64,
    pub dilation_radius_px: f64,
    pub lambda_tps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { margin: 0.5, lambda: 0.5, dilation_radius_px: 12.0, lambda_tps: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { lr: 1e-3, epochs: 30, batch_size: 8, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ambiguous_radius_px: f64,
    pub froc_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ambiguous_radius_px: 12.0, froc_bins: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { data_dir: "data/phantoms".into(), out_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Parse a config document. Only keys present in the text override the
    /// defaults; unknown sections or keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut merged = default_table();
        merge_into(&mut merged, &table)?;
        finish(merged)
    }

    /// Load `path` (or start from defaults when `None`), apply environment
    /// path overrides, then apply `section.key=value` assignments, which
    /// take precedence over everything else.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut merged = default_table();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            let table: toml::Table =
                text.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            merge_into(&mut merged, &table)?;
        }
        for (env, key) in [(ENV_DATA_DIR, "data_dir"), (ENV_OUT_DIR, "out_dir")] {
            if let Ok(v) = std::env::var(env) {
                assign(&mut merged, "paths", key, toml::Value::String(v))?;
            }
        }
        for s in sets {
            apply_set(&mut merged, s)?;
        }
        finish(merged)
    }

    /// The exact serialized form embedded in artifacts.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        self.model_config()?.validate()?;
        let d = &self.data;
        for (name, n) in
            [("data.n_train", d.n_train), ("data.n_val", d.n_val), ("data.n_test", d.n_test)]
        {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be at least 1, got 0")));
            }
        }
        let l = &self.loss;
        for (name, v) in [
            ("loss.margin", l.margin),
            ("loss.lambda", l.lambda),
            ("loss.dilation_radius_px", l.dilation_radius_px),
            ("loss.lambda_tps", l.lambda_tps),
            ("eval.ambiguous_radius_px", self.eval.ambiguous_radius_px),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", t.lr)));
        }
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.eval.froc_bins < 2 {
            return Err(Error::Config(format!(
                "eval.froc_bins must be at least 2, got {}",
                self.eval.froc_bins
            )));
        }
        let mc = self.model_config()?;
        if mc.contrastive != aasn_core::model::Contrastive::Off
            && mc.feature_stride() % mc.output_stride != 0
        {
            return Err(Error::Config(format!(
                "the contrastive mask pools the output mask down to the feature lattice, \
                 so the feature stride {} must be a multiple of output_stride {}",
                mc.feature_stride(),
                mc.output_stride
            )));
        }
        Ok(())
    }

    /// Generator spec for the whole dataset (all three splits).
    pub fn phantom_spec(&self) -> PhantomSpec {
        let d = &self.data;
        PhantomSpec {
            seed: d.seed,
            image_hw: (d.image_h, d.image_w),
            n_images: d.n_train + d.n_val + d.n_test,
            lesion_prob: d.lesion_prob,
            max_lesions: d.max_lesions,
            pose_magnitude: d.pose_magnitude,
            nuisance_magnitude: d.nuisance_magnitude,
            lesion_contrast: d.lesion_contrast,
            lesion_width_px: d.lesion_width_px,
            noise_sigma: d.noise_sigma,
        }
    }

    /// Split fractions implied by the requested counts.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let d = &self.data;
        let n = (d.n_train + d.n_val + d.n_test) as f64;
        (d.n_train as f64 / n, d.n_val as f64 / n, d.n_test as f64 / n)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            base_channels: m.base_channels,
            blocks_before_split: m.blocks_before_split,
            blocks_after_split: m.blocks_after_split,
            fusion: m.fusion.parse()?,
            align: m.align.parse()?,
            contrastive: m.contrastive.parse()?,
            proj_dim: m.proj_dim,
            input_hw: (m.roi_h, m.roi_w),
            output_stride: m.output_stride,
        })
    }
}

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize")
}

fn finish(merged: toml::Table) -> Result<RunConfig> {
    let cfg: RunConfig =
        toml::Value::Table(merged).try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Overlay `user` onto the full default table, rejecting unknown sections
/// and keys by name and coercing integer literals into float-typed keys.
fn merge_into(base: &mut toml::Table, user: &toml::Table) -> Result<()> {
    for (section, value) in user {
        let toml::Value::Table(entries) = value else {
            return Err(Error::Config(format!(
                "'{section}' is not a config section; keys live under [data], [model], [loss], [train], [eval], or [paths]"
            )));
        };
        for (key, v) in entries {
            assign(base, section, key, v.clone())?;
        }
    }
    Ok(())
}

/// Set one key, validating the path against the defaults and the value
/// against the default's type.
fn assign(base: &mut toml::Table, section: &str, key: &str, value: toml::Value) -> Result<()> {
    let Some(toml::Value::Table(sec)) = base.get_mut(section) else {
        return Err(Error::Config(format!("unknown config section '[{section}]'")));
    };
    let Some(slot) = sec.get_mut(key) else {
        return Err(Error::Config(format!("unknown config key '{section}.{key}'")));
    };
    use toml::Value::*;
    let coerced = match (&*slot, value) {
        (Integer(_), v @ Integer(_)) => v,
        (Float(_), v @ Float(_)) => v,
        (Float(_), Integer(i)) => Float(i as f64),
        (String(_), v @ String(_)) => v,
        (Boolean(_), v @ Boolean(_)) => v,
        (expected, got) => {
            return Err(Error::Config(format!(
                "config key '{section}.{key}' expects a {}, got {got}",
                type_name(expected)
            )))
        }
    };
    *slot = coerced;
    Ok(())
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "number",
        toml::Value::String(_) => "string",
        toml::Value::Boolean(_) => "boolean",
        _ => "value",
    }
}

/// Apply one `section.key=value` command-line assignment.
fn apply_set(base: &mut toml::Table, s: &str) -> Result<()> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected section.key=value, got '{s}'")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("expected section.key=value, got '{s}'")))?;
    let raw = raw.trim();
    // Parse the value as a bare TOML scalar; anything that does not parse
    // (e.g. inside_transition) is taken as a string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| {
            matches!(
                v,
                toml::Value::Integer(_)
                    | toml::Value::Float(_)
                    | toml::Value::Boolean(_)
                    | toml::Value::String(_)
            )
        })
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    assign(base, section.trim(), key.trim(), value)
}
