//! Layered configuration: built-in defaults, then an optional TOML file,
//! then command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::Table;

pub const SEED_ENV: &str = "PIVOT_SEED";

/// Contents of a `--config` file. Sections are overlaid key by key on the
/// command's defaults, so a file only names what it changes.
///
/// ```toml
/// seed = 7
///
/// [train]
/// epochs = 300
/// batch_size = 32
///
/// [train.augment]
/// threshold_enabled = true
/// ```
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub corpus: Option<Table>,
    pub train: Option<Table>,
    pub finetune: Option<Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }

    /// Flag, then config file, then `PIVOT_SEED`, then zero.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
            Err(_) => Ok(0),
        }
    }
}

/// `base` with the keys of `section` written over it.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, section: Option<&Table>, name: &str) -> Result<T> {
    let Some(section) = section else {
        return Ok(base);
    };
    let mut value = toml::Value::try_from(&base).context("serializing defaults")?;
    merge(&mut value, section, name)?;
    value
        .try_into()
        .with_context(|| format!("invalid [{name}] section in config file"))
}

fn merge(base: &mut toml::Value, over: &Table, path: &str) -> Result<()> {
    let toml::Value::Table(table) = base else {
        bail!("[{path}] is not a table");
    };
    for (k, v) in over {
        let key = format!("{path}.{k}");
        match (table.get_mut(k), v) {
            (None, _) => bail!("unknown config key {key}"),
            (Some(dst @ toml::Value::Table(_)), toml::Value::Table(sub)) => merge(dst, sub, &key)?,
            (Some(dst), v) => *dst = v.clone(),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use pivot_core::corpus::CorpusConfig;
    use pivot_core::pretrain::TrainConfig;

    #[test]
    fn sections_fill_from_defaults() {
        let c: FileConfig = toml::from_str(
            "seed = 3\n[train]\nepochs = 12\n[train.augment]\nsort = true\n",
        )
        .unwrap();
        let t = overlay(TrainConfig::default(), c.train.as_ref(), "train").unwrap();
        assert_eq!(t.epochs, 12);
        assert!(t.augment.sort);
        assert_eq!(t.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.seed, Some(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[trian]\nepochs = 1\n").is_err());
        let c: FileConfig = toml::from_str("[train]\nepoch = 1\n").unwrap();
        let err = overlay(TrainConfig::default(), c.train.as_ref(), "train").unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
    }

    #[test]
    fn overlay_keeps_preset_values() {
        let base = CorpusConfig::large();
        let c: FileConfig = toml::from_str("[corpus]\nclips_per_video = 5\n").unwrap();
        let merged = overlay(base.clone(), c.corpus.as_ref(), "corpus").unwrap();
        assert_eq!(merged.clips_per_video, 5);
        assert_eq!(merged.level_counts, base.level_counts);
    }

    #[test]
    fn flag_beats_file_seed() {
        let c = FileConfig {
            seed: Some(5),
            ..FileConfig::default()
        };
        assert_eq!(c.resolve_seed(Some(9)).unwrap(), 9);
        assert_eq!(c.resolve_seed(None).unwrap(), 5);
    }
}
