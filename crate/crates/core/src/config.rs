//! Run configuration: every training setting plus dataset and output
//! locations, stored as one flat TOML table.
//!
//! ```toml
//! data = "data/synth"
//! out = "runs/synth"
//! epochs = 50
//! top_k = 16
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Split;
use crate::training::TrainConfig;

/// Keys that belong to the run rather than to training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunKeys {
    /// Dataset directory (see [`crate::kg::load_dir`]).
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Seed for the 8:1:1 split of an unsplit `numerical.tsv`.
    pub split_seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub entity: Option<String>,
    pub attribute: Option<String>,
    /// Chains listed per prediction and patterns per explanation.
    pub top: usize,
}

impl Default for RunKeys {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("runs/latest"),
            split_seed: 0,
            checkpoint: None,
            split: Split::Test,
            entity: None,
            attribute: None,
            top: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub run: RunKeys,
    pub train: TrainConfig,
}

const RUN_KEYS: &[&str] = &["data", "out", "split_seed", "checkpoint", "split", "entity", "attribute", "top"];

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let table: toml::Table = s.parse().map_err(config_err)?;
        let (run, train): (toml::Table, toml::Table) = table.into_iter().partition(|(k, _)| RUN_KEYS.contains(&k.as_str()));
        let cfg = Self {
            run: toml::Value::Table(run).try_into().map_err(config_err)?,
            train: toml::Value::Table(train).try_into().map_err(config_err)?,
        };
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = match toml::Value::try_from(&self.run).map_err(config_err)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("RunKeys serializes to a table"),
        };
        if let toml::Value::Table(t) = toml::Value::try_from(&self.train).map_err(config_err)? {
            table.extend(t);
        }
        toml::to_string(&table).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `data` or an error naming the missing key.
    pub fn data_dir(&self) -> Result<&Path> {
        self.run.data.as_deref().ok_or_else(|| Error::Config("no dataset directory given (set `data` or pass --data)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LossKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_land_in_the_right_half() {
        let c = RunConfig::from_toml("data = \"d\"\nepochs = 7\nloss = \"l1\"\nsplit = \"valid\"\n").unwrap();
        assert_eq!(c.run.data.as_deref(), Some(Path::new("d")));
        assert_eq!(c.run.split, Split::Valid);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.loss, LossKind::L1);
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(RunConfig::from_toml("epoch = 3").is_err());
        assert!(RunConfig::from_toml("top_k = 0").is_err());
        assert!(RunConfig::from_toml("lambda = 2.0").is_err());
    }

    #[test]
    fn emitted_text_is_stable() {
        let mut c = RunConfig::default();
        c.run.entity = Some("q1".into());
        c.train.ablations = vec!["no_filter".into()];
        c.train.lambda = 0.3;
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}
