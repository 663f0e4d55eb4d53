//! Run configuration: one TOML document covering every stage, plus dotted
//! `key=value` overrides and a content hash that names output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::VITL14_ID;
use crate::dataset::Layout;
use crate::error::{Error, Result};
use crate::fewshot::{BankSource, FusionConfig};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// `vitl14-336`, `stub-32` or `stub-32:<seed>`.
    pub id: String,
    /// Directory holding pretrained weights; falls back to `FOCUSAD_BACKBONE_DIR`.
    pub weights_dir: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            id: VITL14_ID.into(),
            weights_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    /// Categories to use; empty means all.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub bank_source: BankSource,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            seeds: vec![0, 1, 2],
            bank_source: BankSource::Aggregated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub aupro_fpr_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { aupro_fpr_limit: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub fewshot: FewShotConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            fewshot: FewShotConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Applies `section.key=value` overrides in order. Values are parsed as
    /// TOML literals when possible (`0.5`, `true`, `[1, 3]`) and as bare
    /// strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::config(format!("cannot serialise config: {e}")))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::config(format!("override key `{key}` is malformed")));
            }
            let (leaf, parents) = path.split_last().expect("split yields at least one part");
            let mut table = &mut doc;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override `{key}`: `{p}` is not a section")))?;
            }
            table.insert(leaf.to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid override: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        let l = self.eval.aupro_fpr_limit;
        if !(l > 0.0 && l <= 1.0) {
            return Err(Error::config(format!("aupro_fpr_limit {l} must lie in (0, 1]")));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes())[..12].to_string())
    }

    /// `<output_dir>/<command>-<hash>`.
    pub fn run_dir(&self, command: &str) -> Result<PathBuf> {
        Ok(self.output_dir.join(format!("{command}-{}", self.hash()?)))
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.data
            .root
            .as_deref()
            .ok_or_else(|| Error::config("no dataset root configured (set data.root)"))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}
