//! Run configuration: one document with `data`, `model`, `objective`,
//! `trainer` and `eval` sections, built from a named profile, an optional
//! TOML file and dotted-path overrides, in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorSpec;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::objectives::ObjectiveConfig;
use crate::trainer::{sha256_hex, TrainConfig};

pub const DATA_DIR_ENV: &str = "BALI_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Data directory; falls back to `$BALI_DATA_DIR`, then `data`.
    pub dir: Option<PathBuf>,
    pub min_freq: usize,
    pub generator: GeneratorSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            min_freq: 1,
            generator: GeneratorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    /// Where checkpoints, logs and reports go.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl RunConfig {
    /// Desk-scale settings: 200 concepts, d = 64, two LM layers, three GNN
    /// layers, batch 32.
    pub fn tiny() -> Self {
        Self {
            profile: "tiny".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/tiny"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            trainer: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Base-model pretraining hyperparameters.
    pub fn paper() -> Self {
        let mut c = Self::tiny();
        c.profile = "paper".into();
        c.out_dir = PathBuf::from("runs/paper");
        c.model = ModelConfig {
            d: 768,
            lm_layers: 12,
            heads: 12,
            max_len: 512,
            gnn_layers: 5,
            gnn_heads: 2,
            ..ModelConfig::default()
        };
        c.trainer = TrainConfig {
            batch_size: 256,
            steps: 65_000,
            epochs: 10,
            lr_lm: 2e-5,
            lr_other: 1e-4,
            neighbor_cap: 3,
            checkpoint_every: 5_000,
            ..TrainConfig::default()
        };
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected tiny or paper)"))),
        }
    }

    /// Profile named by the document's `profile` key (default `tiny`),
    /// overlaid with the document, then with `overrides` as
    /// `(dotted.path, value)` pairs. Values parse as TOML literals and fall
    /// back to plain strings.
    pub fn resolve(document: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let doc: toml::Table = match document {
            Some(text) => text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let mut profile = match doc.get("profile") {
            Some(toml::Value::String(p)) => p.clone(),
            Some(_) => return Err(Error::Config("`profile` must be a string".into())),
            None => "tiny".into(),
        };
        if let Some((_, v)) = overrides.iter().rev().find(|(k, _)| k == "profile") {
            profile = v.clone();
        }
        let base = toml::Table::try_from(Self::profile(&profile)?)
            .map_err(|e| Error::Config(format!("profile serialization: {e}")))?;
        let mut merged = toml::Value::Table(base);
        merge(&mut merged, toml::Value::Table(doc));
        for (path, raw) in overrides {
            set_path(&mut merged, path, parse_literal(raw))?;
        }
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    /// Configuration snapshot stored inside a checkpoint.
    pub fn from_snapshot(value: &serde_json::Value) -> Result<Self> {
        Self::deserialize(value).map_err(|e| Error::Checkpoint(format!("stored configuration is unreadable: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        self.data.generator.validate()?;
        if self.data.min_freq == 0 {
            return Err(Error::Config("data.min_freq must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)[..16].to_string()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override path".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn paper_profile_hyperparameters() {
        let c = RunConfig::paper();
        assert_eq!(c.model.d, 768);
        assert_eq!(c.model.gnn_layers, 5);
        assert_eq!(c.model.gnn_heads, 2);
        assert_eq!(c.trainer.neighbor_cap, 3);
        assert_eq!(c.trainer.lr_lm, 2e-5);
        assert_eq!(c.trainer.lr_other, 1e-4);
        assert_eq!(c.trainer.batch_size, 256);
        assert_eq!(c.trainer.epochs, 10);
        assert_eq!(c.trainer.steps, 65_000);
        assert_eq!(c.objective.select_ratio, 0.15);
        c.validate().unwrap();
    }

    #[test]
    fn tiny_profile_sizes() {
        let c = RunConfig::tiny();
        assert_eq!(c.data.generator.concepts, 200);
        assert_eq!((c.model.d, c.model.lm_layers, c.model.gnn_layers), (64, 2, 3));
        assert_eq!(c.trainer.batch_size, 32);
        assert!(c.trainer.steps <= 2000);
    }

    #[test]
    fn roundtrips_through_toml() {
        for c in [RunConfig::tiny(), RunConfig::paper()] {
            let back = RunConfig::resolve(Some(&c.to_toml()), &[]).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn overrides_apply_in_order() {
        let doc = "profile = \"tiny\"\n[trainer]\nbatch_size = 16\n";
        let c = RunConfig::resolve(
            Some(doc),
            &ov(&[
                ("trainer.batch_size", "8"),
                ("objective.align", "none"),
                ("model.pathway", "linearized"),
                ("objective.tau", "0.5"),
            ]),
        )
        .unwrap();
        assert_eq!(c.trainer.batch_size, 8);
        assert_eq!(c.objective.align, crate::objectives::AlignKind::None);
        assert_eq!(c.model.pathway, crate::encoders::Pathway::Linearized);
        assert_eq!(c.objective.tau, 0.5);
    }

    #[test]
    fn profile_key_selects_preset() {
        let c = RunConfig::resolve(Some("profile = \"paper\"\n[trainer]\nsteps = 10\n"), &[]).unwrap();
        assert_eq!(c.model.d, 768);
        assert_eq!(c.trainer.steps, 10);
        assert!(RunConfig::resolve(Some("profile = \"huge\""), &[]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::resolve(Some("[trainer]\nbatchsize = 3\n"), &[]).is_err());
        assert!(RunConfig::resolve(Some("colour = 1\n"), &[]).is_err());
        assert!(RunConfig::resolve(None, &ov(&[("model.width", "3")])).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::resolve(None, &ov(&[("trainer.batch_size", "0")])).is_err());
        assert!(RunConfig::resolve(None, &ov(&[("data.generator.relations", "0")])).is_err());
        assert!(RunConfig::resolve(None, &ov(&[("model.pathway", "hypergraph")])).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::tiny();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn explicit_data_dir_wins() {
        let mut c = RunConfig::tiny();
        c.data.dir = Some(PathBuf::from("/tmp/x"));
        assert_eq!(c.data_dir(), PathBuf::from("/tmp/x"));
    }
}
