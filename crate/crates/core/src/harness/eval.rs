use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::mean_pass_at_k;
use crate::error::{Error, Result};
use crate::latent_control::{assemble_input, sample_biased, sample_prefix, PrefixEmbeddings, PrefixMode, RegionStore};
use crate::palette_vae::Vae;
use crate::seeding;
use crate::tasks::{verify, Domain, Task};
use crate::toy_lm::{Decoding, PolicyModel};

/// Where prefixes come from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    None,
    Prior,
    Biased(Domain),
}

impl fmt::Display for LatentSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentSource::None => f.write_str("none"),
            LatentSource::Prior => f.write_str("prior"),
            LatentSource::Biased(d) => write!(f, "biased:{d}"),
        }
    }
}

impl FromStr for LatentSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "prior" => Ok(Self::Prior),
            _ => match s.strip_prefix("biased:") {
                Some(d) => Ok(Self::Biased(d.parse()?)),
                None => Err(Error::InvalidArgument(format!("unknown latent source {s:?}"))),
            },
        }
    }
}

/// One evaluation configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub decoding: Decoding,
    pub latent: LatentSource,
    pub prefix_len: usize,
    pub mode: PrefixMode,
    pub n_samples: usize,
    pub max_new: usize,
}

impl EvalSpec {
    pub fn label(&self) -> String {
        let dec = match self.decoding {
            Decoding::Greedy => "greedy".to_string(),
            Decoding::Temperature(t) => format!("sample:{t}"),
        };
        format!("{dec}/{}", self.latent)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub domain: Domain,
    pub n_samples: usize,
    pub n_correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub spec: EvalSpec,
    pub per_task: Vec<TaskOutcome>,
}

impl EvalResult {
    /// Mean pass@k over tasks, optionally restricted to one domain.
    pub fn pass_at(&self, k: usize, domain: Option<Domain>) -> Result<f64> {
        let counts: Vec<_> =
            self.per_task.iter().filter(|t| domain.is_none_or(|d| t.domain == d)).map(|t| (t.n_samples, t.n_correct)).collect();
        mean_pass_at_k(&counts, k)
    }
}

/// Sample `spec.n_samples` responses per task. Draw `s` of task `i` uses the
/// stream `(seed, i, s)`, so results do not depend on evaluation order.
pub fn evaluate(
    model: &PolicyModel,
    vae: Option<&Vae>,
    regions: Option<&RegionStore>,
    tasks: &[Task],
    spec: &EvalSpec,
    seed: u64,
) -> Result<EvalResult> {
    if spec.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation tasks"));
    }
    let needs_vae = spec.latent != LatentSource::None && spec.prefix_len > 0;
    let vae = match (needs_vae, vae) {
        (true, None) => return Err(Error::InvalidArgument("latent evaluation needs a VAE".into())),
        (_, v) => v,
    };
    let region = match spec.latent {
        LatentSource::Biased(d) => {
            Some(regions.and_then(|r| r.get(d)).ok_or_else(|| Error::InvalidArgument(format!("no fitted region for domain {d}")))?)
        }
        _ => None,
    };
    let deterministic = matches!(spec.decoding, Decoding::Greedy) && !needs_vae;
    let mut per_task = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let mut correct = 0;
        for s in 0..spec.n_samples {
            if deterministic && s > 0 {
                correct = if correct > 0 { spec.n_samples } else { 0 };
                break;
            }
            let mut rng = seeding::stream(seed, &[0xe7a1, i as u64, s as u64]);
            let prefix = match (spec.latent, vae) {
                (_, _) if !needs_vae => PrefixEmbeddings::empty(),
                (LatentSource::Biased(d), Some(v)) => {
                    sample_biased(region.expect("checked above"), d, v, spec.prefix_len, spec.mode, &mut rng)?
                }
                (_, Some(v)) => sample_prefix(v, spec.prefix_len, spec.mode, &mut rng)?,
                (_, None) => unreachable!("VAE presence checked above"),
            };
            let input = assemble_input(&prefix, &task.question, model)?;
            let out = model.generate(&input, spec.decoding, spec.max_new, &mut rng)?;
            if verify(&task.question, &out.tokens) > 0.0 {
                correct += 1;
            }
        }
        per_task.push(TaskOutcome { domain: task.domain, n_samples: spec.n_samples, n_correct: correct });
    }
    Ok(EvalResult { spec: spec.clone(), per_task })
}

/// Serialized form of an evaluation configuration in experiment files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    /// `greedy` or a positive temperature.
    pub decoding: String,
    /// `none`, `prior`, or `biased:<DOMAIN>`; `biased:matched` expands to each
    /// test task's own domain.
    pub latent: String,
}

impl EvalEntry {
    pub fn parse_decoding(&self) -> Result<Decoding> {
        if self.decoding == "greedy" {
            return Ok(Decoding::Greedy);
        }
        match self.decoding.parse::<f64>() {
            Ok(t) if t > 0.0 && t.is_finite() => Ok(Decoding::Temperature(t)),
            _ => Err(Error::Config {
                field: "eval.configs.decoding".into(),
                msg: format!("{:?} is neither greedy nor a temperature", self.decoding),
            }),
        }
    }
}
