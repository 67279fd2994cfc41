use std::path::Path;

use anyhow::{bail, Context, Result};
use ini::Ini;
use metaprune::experiment::ExperimentConfig;

/// Applies every `key = value` of an INI file on top of `cfg`.
pub fn apply_file(cfg: &mut ExperimentConfig, path: &Path) -> Result<()> {
    let ini = Ini::load_from_file(path).with_context(|| format!("reading config {}", path.display()))?;
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if props.iter().next().is_some() {
                bail!("{}: settings must sit under a [section]", path.display());
            }
            continue;
        };
        for (k, v) in props.iter() {
            cfg.set(section, k, v).with_context(|| format!("{}: [{section}] {k}", path.display()))?;
        }
    }
    Ok(())
}

/// Parses `section.key=value`.
pub fn apply_override(cfg: &mut ExperimentConfig, spec: &str) -> Result<()> {
    let (key, value) = spec.split_once('=').with_context(|| format!("override {spec:?} is not section.key=value"))?;
    let (section, key) = key.trim().split_once('.').with_context(|| format!("override {spec:?} is not section.key=value"))?;
    cfg.set(section, key, value.trim())?;
    Ok(())
}
