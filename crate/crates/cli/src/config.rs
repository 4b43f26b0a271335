//! The run configuration document and `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ssreg_core::augment::AugmentationPolicy;
use ssreg_core::eval::DcfParams;
use ssreg_core::model::ModelConfig;
use ssreg_core::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Input and output locations. Relative paths resolve against the directory
/// holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// `<id>\t<wav>\t<duration_s>` training list.
    pub manifest: PathBuf,
    /// Noise clip list, `<id>\t<wav>[\t<category>]`.
    pub noises: PathBuf,
    /// Room impulse response list, same layout as `noises`.
    pub rirs: PathBuf,
    /// Trials scored by `ablate`.
    pub trials: PathBuf,
    /// Utterances the trials refer to; the training manifest when unset.
    pub eval_manifest: Option<PathBuf>,
    /// Where checkpoints, metrics and reports go.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: "manifest.tsv".into(),
            noises: "noises.tsv".into(),
            rirs: "rirs.tsv".into(),
            trials: "trials.txt".into(),
            eval_manifest: None,
            out_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub precision: Precision,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub paths: Paths,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Replaces the policy implied by `train.strategy` when present.
    pub augment: Option<AugmentationPolicy>,
    pub dcf: DcfParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            precision: Precision::F32,
            checkpoint_every: 100,
            paths: Paths::default(),
            train: TrainConfig::default(),
            model: ModelConfig::tiny(),
            augment: None,
            dcf: DcfParams::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document after applying `overrides`.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` and rebases its relative paths onto the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text, overrides).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.manifest,
            &mut cfg.paths.noises,
            &mut cfg.paths.rirs,
            &mut cfg.paths.trials,
            &mut cfg.paths.out_dir,
        ]
        .into_iter()
        .chain(cfg.paths.eval_manifest.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        self.train.validate()?;
        self.model.validate()?;
        self.policy().validate()?;
        self.dcf.validate()?;
        Ok(())
    }

    pub fn policy(&self) -> AugmentationPolicy {
        self.augment.clone().unwrap_or_else(|| self.train.strategy.policy())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Sets a dotted key, e.g. `train.lambda=0.5`. The value is read as a TOML
/// literal, falling back to a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` must look like key=value");
    };
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssreg_core::augment::Strategy;

    #[test]
    fn defaults_roundtrip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlamda = 0.1\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("lamda"), "{err:#}");
        assert!(RunConfig::from_toml("colour = 1\n", &[]).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = RunConfig::from_toml("schema_version = 2\n", &[]).unwrap_err();
        assert!(format!("{err:#}").contains("schema_version"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml(
            "[train]\nlambda = 0.2\n",
            &[
                "train.lambda=0".into(),
                "train.strategy=1".into(),
                "paths.out_dir=elsewhere".into(),
                "precision=\"f64\"".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lambda, 0.0);
        assert_eq!(cfg.train.strategy, Strategy::NoAug);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.precision, Precision::F64);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        assert!(RunConfig::from_toml("", &["train.lambda".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train..x=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train.strategy=9".into()]).is_err());
        assert!(RunConfig::from_toml("", &["schema_version.x=1".into()]).is_err());
    }

    #[test]
    fn explicit_augment_table_replaces_strategy() {
        let cfg = RunConfig::from_toml("[augment]\nreverb_enabled = false\n", &[]).unwrap();
        let p = cfg.policy();
        assert!(p.noise_enabled && !p.reverb_enabled);
    }
}
