//! Dataset generation command.

use crate::config::RunConfig;
use aasn_core::error::{Error, Result};
use aasn_core::synthdata::{manifest_path, write_dataset, Manifest, SplitKind};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub struct GenDataReport {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Generate the configured dataset under `paths.data_dir`. An existing
/// dataset is only replaced when `force` is set.
pub fn run(cfg: &RunConfig, force: bool) -> Result<GenDataReport> {
    cfg.validate()?;
    let root = Path::new(&cfg.paths.data_dir).to_path_buf();
    if manifest_path(&root).exists() && !force {
        return Err(Error::Config(format!(
            "dataset already exists at {} (pass --force to regenerate)",
            root.display()
        )));
    }
    let manifest = write_dataset(&root, &cfg.phantom_spec(), cfg.fractions(), cfg.data.split_seed)?;
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("run_config.toml"), cfg.to_text())?;
    Ok(GenDataReport { root, manifest })
}

impl GenDataReport {
    pub fn summary(&self) -> String {
        let count = |k: SplitKind| self.manifest.entries.iter().filter(|e| e.split == k).count();
        let pos = self.manifest.entries.iter().filter(|e| e.label).count();
        format!(
            "wrote {} phantoms ({} abnormal) to {} — train/val/test = {}/{}/{}",
            self.manifest.entries.len(),
            pos,
            self.root.display(),
            count(SplitKind::Train),
            count(SplitKind::Val),
            count(SplitKind::Test),
        )
    }
}
