use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::EvalEntry;
use crate::error::{Error, Result};
use crate::latent_control::PrefixMode;
use crate::palette_vae::VaeConfig;
use crate::rl::RlConfig;
use crate::sft::SftConfig;
use crate::toy_lm::{ModelConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub pretrain_per_domain: usize,
    /// Corpus shared by the VAE and SFT.
    pub train_per_domain: usize,
    pub rl_per_domain: usize,
    pub test_per_domain: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { pretrain_per_domain: 2000, train_per_domain: 100, rl_per_domain: 500, test_per_domain: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub ks: Vec<usize>,
    pub prefix_len: usize,
    pub prefix_mode: PrefixMode,
    pub max_new: usize,
    /// Checkpoints to evaluate: any of `base`, `sft`, `rl`.
    pub models: Vec<String>,
    pub configs: Vec<EvalEntry>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let e = |d: &str, l: &str| EvalEntry { decoding: d.into(), latent: l.into() };
        Self {
            n_samples: 16,
            ks: vec![1, 4, 8, 16],
            prefix_len: 1,
            prefix_mode: PrefixMode::Independent,
            max_new: 80,
            models: vec!["sft".into(), "rl".into()],
            configs: vec![e("greedy", "none"), e("greedy", "prior"), e("1.0", "none"), e("1.0", "prior"), e("greedy", "biased:matched")],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub pca_dims: usize,
    pub prefix_len: usize,
    pub prefix_mode: PrefixMode,
    pub draws_per_domain: usize,
    /// Test tasks sampled for the diversity table.
    pub diversity_tasks: usize,
    pub diversity_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            pca_dims: 2,
            prefix_len: 8,
            prefix_mode: PrefixMode::Independent,
            draws_per_domain: 20,
            diversity_tasks: 30,
            diversity_samples: 4,
        }
    }
}

/// Whole-pipeline configuration, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub tasks: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub vae: VaeConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            tasks: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            vae: VaeConfig::default(),
            sft: SftConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| field_path(text, s.start)).unwrap_or_default();
            Error::Config { field, msg: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: field.into(), msg: msg.into() });
        self.model.validate()?;
        self.pretrain.validate()?;
        self.vae.validate()?;
        self.sft.validate()?;
        self.rl.validate()?;
        let t = &self.tasks;
        if t.pretrain_per_domain == 0 || t.train_per_domain == 0 || t.rl_per_domain == 0 || t.test_per_domain == 0 {
            return bad("tasks", "every split needs at least one task per domain");
        }
        let e = &self.eval;
        if e.n_samples == 0 {
            return bad("eval.n_samples", "must be positive");
        }
        if let Some(k) = e.ks.iter().find(|k| **k == 0 || **k > e.n_samples) {
            return bad("eval.ks", &format!("k = {k} outside 1..=n_samples"));
        }
        if e.max_new == 0 {
            return bad("eval.max_new", "must be positive");
        }
        if let Some(m) = e.models.iter().find(|m| !["base", "sft", "rl"].contains(&m.as_str())) {
            return bad("eval.models", &format!("unknown model {m:?}"));
        }
        for c in &e.configs {
            c.parse_decoding()?;
            if c.latent != "biased:matched" {
                c.latent.parse::<super::eval::LatentSource>().map_err(|_| Error::Config {
                    field: "eval.configs.latent".into(),
                    msg: format!("unknown latent source {:?}", c.latent),
                })?;
            }
        }
        if self.analysis.pca_dims == 0 {
            return bad("analysis.pca_dims", "must be positive");
        }
        if self.analysis.draws_per_domain == 0 {
            return bad("analysis.draws_per_domain", "must be positive");
        }
        if self.analysis.diversity_tasks == 0 || self.analysis.diversity_samples == 0 {
            return bad("analysis.diversity_tasks", "diversity tasks and samples must be positive");
        }
        Ok(())
    }
}

/// Dotted `section.key` path of the TOML entry containing byte `offset`.
fn field_path(text: &str, offset: usize) -> String {
    let mut section = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if trimmed.starts_with('[') && !trimmed.starts_with("[[") {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (section.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}
