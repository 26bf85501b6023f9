//! Latent-scheduled group policy optimization with verifiable rewards.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latent_control::{assemble_input, sample_prefix, PrefixEmbeddings, PrefixMode};
use crate::numerics::{clip_grad_norm, Adam, Graph, Var};
use crate::palette_vae::Vae;
use crate::seeding;
use crate::tasks::{verify, Task};
use crate::toy_lm::{Decoding, PolicyModel, ScoreItem, Token};

pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "rho")]
pub enum Schedule {
    TwoPhase,
    LinearDecay,
    Constant(f64),
    Off,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant(r) if !(0.0..=1.0).contains(r) => {
                Err(Error::Config { field: "rl.schedule".into(), msg: format!("constant rho {r} outside [0, 1]") })
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    /// `two_phase`, `linear_decay`, `off`, or `constant:<rho>`.
    fn from_str(s: &str) -> Result<Self> {
        let out = match s {
            "two_phase" => Schedule::TwoPhase,
            "linear_decay" => Schedule::LinearDecay,
            "off" => Schedule::Off,
            _ => match s.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(r)) => Schedule::Constant(r),
                _ => return Err(Error::InvalidArgument(format!("unknown schedule {s:?}"))),
            },
        };
        out.validate()?;
        Ok(out)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::TwoPhase => f.write_str("two_phase"),
            Schedule::LinearDecay => f.write_str("linear_decay"),
            Schedule::Off => f.write_str("off"),
            Schedule::Constant(r) => write!(f, "constant:{r}"),
        }
    }
}

/// Guided fraction at training progress `tau ∈ [0, 1]`.
pub fn rho(schedule: Schedule, tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    Ok(match schedule {
        Schedule::TwoPhase => {
            if tau < 0.5 {
                1.0
            } else {
                0.0
            }
        }
        Schedule::LinearDecay => 1.0 - tau,
        Schedule::Constant(r) => r,
        Schedule::Off => 0.0,
    })
}

/// `round(rho · g)` with halves rounded up.
pub fn guided_count(rho: f64, g: usize) -> usize {
    ((rho * g as f64 + 0.5).floor() as usize).min(g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentScope {
    /// Fresh latent draw for every guided response.
    #[default]
    PerResponse,
    /// One draw shared by all guided responses of a prompt.
    PerPrompt,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Grpo,
    Rloo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateGroups {
    /// Keep the group with zero advantages.
    #[default]
    Zero,
    /// Drop the group from the update.
    Skip,
}

/// Sampling settings for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutSpec {
    pub group_size: usize,
    pub rho: f64,
    pub prefix_len: usize,
    pub mode: PrefixMode,
    pub scope: LatentScope,
    pub temperature: f64,
    pub max_new: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub question: Vec<Token>,
    pub responses: Vec<Vec<Token>>,
    pub rewards: Vec<f64>,
    /// Snapshot log-probs of each response token.
    pub old_logprobs: Vec<Vec<f64>>,
    pub guided: Vec<bool>,
    /// Prefix used by each response; empty for unguided ones.
    pub prefixes: Vec<PrefixEmbeddings>,
}

impl RolloutGroup {
    pub fn guided_count(&self) -> usize {
        self.guided.iter().filter(|g| **g).count()
    }
}

/// Sample `spec.group_size` responses to `question`, the first
/// `round(rho·G)` of them behind decoded prior prefixes. Randomness for
/// response `i` comes from the stream `(seed, step, prompt, i)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    question: &[Token],
    spec: &RolloutSpec,
    policy: &PolicyModel,
    vae: &Vae,
    seed: u64,
    step: u64,
    prompt: u64,
) -> Result<RolloutGroup> {
    let g = spec.group_size;
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group size {g} < 2")));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", spec.rho)));
    }
    let n_guided = guided_count(spec.rho, g);
    let shared = match spec.scope {
        LatentScope::PerPrompt if n_guided > 0 => {
            let mut rng = seeding::stream(seed, &[0x71, step, prompt, u64::MAX]);
            Some(sample_prefix(vae, spec.prefix_len, spec.mode, &mut rng)?)
        }
        _ => None,
    };
    let mut out = RolloutGroup {
        question: question.to_vec(),
        responses: Vec::with_capacity(g),
        rewards: Vec::with_capacity(g),
        old_logprobs: Vec::with_capacity(g),
        guided: Vec::with_capacity(g),
        prefixes: Vec::with_capacity(g),
    };
    for i in 0..g {
        let mut rng = seeding::stream(seed, &[0x71, step, prompt, i as u64]);
        let guided = i < n_guided;
        let prefix = match (&shared, guided) {
            (_, false) => PrefixEmbeddings::empty(),
            (Some(p), true) => p.clone(),
            (None, true) => sample_prefix(vae, spec.prefix_len, spec.mode, &mut rng)?,
        };
        let input = assemble_input(&prefix, question, policy)?;
        let decoding = if spec.temperature > 0.0 { Decoding::Temperature(spec.temperature) } else { Decoding::Greedy };
        let gen = policy.generate(&input, decoding, spec.max_new, &mut rng)?;
        out.rewards.push(verify(question, &gen.tokens));
        out.responses.push(gen.tokens);
        out.old_logprobs.push(gen.logprobs);
        out.guided.push(guided);
        out.prefixes.push(prefix);
    }
    Ok(out)
}

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("group of {} rewards; need at least 2", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "advantage" });
    }
    Ok(())
}

/// `(r − mean) / std` with the population std; zeros when std < 1e-8.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `r_i − mean_{j≠i} r_j`.
pub fn rloo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let n = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r - (total - r) / (n - 1.0)).collect())
}

fn surrogate_term(new: f64, old: f64, adv: f64, eps: f64) -> (f64, f64) {
    let ratio = (new - old).exp();
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        // The clipped branch is constant in `new` outside the trust region.
        let inside = (1.0 - eps..=1.0 + eps).contains(&ratio);
        (clipped, if inside { unclipped } else { 0.0 })
    }
}

fn kl_term(new: f64, reference: f64) -> (f64, f64) {
    let delta = reference - new;
    let e = delta.exp();
    (e - delta - 1.0, 1.0 - e)
}

fn check_pairs(a: &[Vec<f64>], b: &[Vec<f64>], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::shape(op, "per-response token counts differ"));
    }
    Ok(())
}

/// Per-token `min(ρÂ, clip(ρ)Â)` averaged within each response, then over
/// responses. Empty responses contribute zero.
pub fn clipped_surrogate(new: &[Vec<f64>], old: &[Vec<f64>], advantages: &[f64], eps: f64) -> Result<f64> {
    check_pairs(new, old, "clipped_surrogate")?;
    if advantages.len() != new.len() || new.is_empty() {
        return Err(Error::shape("clipped_surrogate", "one advantage per response required"));
    }
    let mut total = 0.0;
    for ((n, o), a) in new.iter().zip(old).zip(advantages) {
        let mut s = 0.0;
        for (x, y) in n.iter().zip(o) {
            let (v, _) = surrogate_term(*x, *y, *a, eps);
            if !(v.is_finite() && (x - y).exp().is_finite()) {
                return Err(Error::NonFinite { op: "clipped_surrogate" });
            }
            s += v;
        }
        if !n.is_empty() {
            total += s / n.len() as f64;
        }
    }
    Ok(total / new.len() as f64)
}

/// Mean of `exp(Δ) − Δ − 1`, `Δ = ref − new`, with the same averaging as
/// [`clipped_surrogate`].
pub fn kl_penalty(new: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    check_pairs(new, reference, "kl_penalty")?;
    if new.is_empty() {
        return Err(Error::Empty("kl_penalty responses"));
    }
    let mut total = 0.0;
    for (n, r) in new.iter().zip(reference) {
        if !n.is_empty() {
            total += n.iter().zip(r).map(|(x, y)| kl_term(*x, *y).0).sum::<f64>() / n.len() as f64;
        }
    }
    Ok(total / new.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub algorithm: Algorithm,
    #[serde(with = "schedule_str")]
    pub schedule: Schedule,
    pub total_steps: usize,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub prefix_len: usize,
    pub prefix_mode: PrefixMode,
    pub latent_scope: LatentScope,
    pub epsilon_clip: f64,
    pub kl_coefficient: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub max_new: usize,
    pub degenerate_groups: DegenerateGroups,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Set by the pipeline from the experiment seed; not read from files.
    #[serde(skip)]
    pub seed: u64,
}

mod schedule_str {
    use super::Schedule;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Schedule, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&s.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Schedule, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            schedule: Schedule::LinearDecay,
            total_steps: 400,
            group_size: 8,
            prompts_per_step: 2,
            prefix_len: 8,
            prefix_mode: PrefixMode::Independent,
            latent_scope: LatentScope::PerResponse,
            epsilon_clip: 0.2,
            kl_coefficient: 0.01,
            lr: 1e-4,
            grad_clip: 1.0,
            temperature: 1.0,
            max_new: 64,
            degenerate_groups: DegenerateGroups::Zero,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config { field: format!("rl.{field}"), msg });
        self.schedule.validate()?;
        if self.total_steps == 0 {
            return bad("total_steps", "must be at least 1".into());
        }
        if self.group_size < 2 {
            return bad("group_size", format!("{} < 2", self.group_size));
        }
        if self.prompts_per_step == 0 {
            return bad("prompts_per_step", "must be positive".into());
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return bad("epsilon_clip", format!("{} outside (0, 1)", self.epsilon_clip));
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return bad("kl_coefficient", "must be finite and nonnegative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature", "must be finite and nonnegative (0 means greedy)".into());
        }
        if self.max_new == 0 {
            return bad("max_new", "must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the RL metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub tau: f64,
    pub rho: f64,
    pub guided_fraction: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub adv_std: f64,
    pub loss: f64,
}

pub const METRICS_HEADER: &str = "step,tau,rho,guided_fraction,mean_reward,mean_kl,adv_std,loss";

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    for m in rows {
        writeln!(
            f,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            m.step, m.tau, m.rho, m.guided_fraction, m.mean_reward, m.mean_kl, m.adv_std, m.loss
        )
        .map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Train from `sft` (which also serves as the frozen KL reference). Returns
/// the final policy and one metrics row per step.
pub fn train_rl(
    cfg: &RlConfig,
    sft: &PolicyModel,
    vae: &Vae,
    tasks: &[Task],
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyModel, Vec<StepMetrics>)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("RL task set"));
    }
    if cfg.prefix_len > 0 && vae.input_dim() != sft.d_model() {
        return Err(Error::Config {
            field: "rl.prefix_len".into(),
            msg: format!("VAE width {} does not match policy width {}", vae.input_dim(), sft.d_model()),
        });
    }
    let reference = sft;
    let mut policy = sft.clone();
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let tau = step as f64 / cfg.total_steps as f64;
        let rho_now = rho(cfg.schedule, tau)?;
        let spec = RolloutSpec {
            group_size: cfg.group_size,
            rho: rho_now,
            prefix_len: cfg.prefix_len,
            mode: cfg.prefix_mode,
            scope: cfg.latent_scope,
            temperature: cfg.temperature,
            max_new: cfg.max_new,
        };
        let mut pick = seeding::stream(cfg.seed, &[0x70, step as u64]);
        let mut groups = Vec::with_capacity(cfg.prompts_per_step);
        for p in 0..cfg.prompts_per_step {
            let task = &tasks[pick.random_range(0..tasks.len())];
            groups.push(rollout_group(&task.question, &spec, &policy, vae, cfg.seed, step as u64, p as u64)?);
        }
        let metrics = update(cfg, &mut policy, reference, &mut adam, &groups, step, tau, rho_now)?;
        log.push(metrics);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let ck = Checkpoint { sections: vec![policy.to_section("policy")] };
                ck.save(&dir.join(format!("rl_step{:05}.ckpt", step + 1)))?;
            }
        }
    }
    Ok((policy, log))
}

#[allow(clippy::too_many_arguments)]
fn update(
    cfg: &RlConfig,
    policy: &mut PolicyModel,
    reference: &PolicyModel,
    adam: &mut Adam,
    groups: &[RolloutGroup],
    step: usize,
    tau: f64,
    rho_now: f64,
) -> Result<StepMetrics> {
    let g = cfg.group_size as f64;
    let n_resp = groups.len() as f64 * g;
    let mean_reward = groups.iter().flat_map(|x| &x.rewards).sum::<f64>() / n_resp;
    let guided_fraction = groups.iter().map(|x| x.guided_count()).sum::<usize>() as f64 / n_resp;
    let mut adv = Vec::new();
    let mut keep = Vec::new();
    for grp in groups {
        let a = match cfg.algorithm {
            Algorithm::Grpo => grpo_advantage(&grp.rewards)?,
            Algorithm::Rloo => rloo_advantage(&grp.rewards)?,
        };
        let degenerate = a.iter().all(|x| *x == 0.0);
        let drop = degenerate && cfg.degenerate_groups == DegenerateGroups::Skip;
        for (i, ai) in a.into_iter().enumerate() {
            if !drop {
                keep.push((grp, i));
                adv.push(ai);
            }
        }
    }
    let adv_std = population_std(&adv);
    let items: Vec<ScoreItem<'_>> = keep
        .iter()
        .filter(|(grp, i)| !grp.responses[*i].is_empty())
        .map(|(grp, i)| ScoreItem { prefix: grp.prefixes[*i].rows(), question: &grp.question, output: &grp.responses[*i], offset: 0 })
        .collect();
    if items.is_empty() {
        return Ok(StepMetrics { step, tau, rho: rho_now, guided_fraction, mean_reward, mean_kl: 0.0, adv_std, loss: 0.0 });
    }
    let kept: Vec<(&RolloutGroup, usize, f64)> =
        keep.iter().zip(&adv).filter(|((grp, i), _)| !grp.responses[*i].is_empty()).map(|((grp, i), a)| (*grp, *i, *a)).collect();
    let n_items = keep.len() as f64;

    let reference_lp = {
        let mut g = Graph::new();
        let vars = reference.params().attach_frozen(&mut g);
        let (lp, _) = reference.score(&mut g, &vars, &items)?;
        g.value(lp).data().to_vec()
    };
    let mut graph = Graph::new();
    let vars = policy.params().attach(&mut graph);
    let (new_lp, ranges) = policy.score(&mut graph, &vars, &items)?;
    let mut targets = TokenTargets::default();
    for ((grp, i, a), r) in kept.iter().zip(&ranges) {
        targets.old.extend_from_slice(&grp.old_logprobs[*i]);
        let w = 1.0 / (r.len() as f64 * n_items);
        for _ in r.clone() {
            targets.advantage.push(*a);
            targets.weight.push(w);
        }
    }
    targets.reference = reference_lp;
    let (loss, kl_mean) = policy_loss(&mut graph, new_lp, &targets, cfg.epsilon_clip, cfg.kl_coefficient)?;
    let loss_value = graph.value(loss).item();
    let mean_kl = graph.value(kl_mean).item();
    let grads = graph.backward(loss)?;
    let mut gs: Vec<_> = vars.iter().map(|v| grads.get(*v)).collect();
    clip_grad_norm(&mut gs, cfg.grad_clip);
    adam.step(policy.params_mut().tensors_mut(), &gs)?;
    Ok(StepMetrics { step, tau, rho: rho_now, guided_fraction, mean_reward, mean_kl, adv_std, loss: loss_value })
}

/// Per-token quantities for [`policy_loss`], aligned with the scored
/// log-prob vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenTargets {
    pub old: Vec<f64>,
    pub reference: Vec<f64>,
    pub advantage: Vec<f64>,
    /// `1 / (|o| · responses)` for each token of response `o`.
    pub weight: Vec<f64>,
}

/// `−(surrogate − β·KL)` over token log-probs `new_lp`, with the same
/// averaging as [`clipped_surrogate`] and [`kl_penalty`]. Returns the loss and
/// the mean KL node.
pub fn policy_loss(g: &mut Graph, new_lp: Var, t: &TokenTargets, eps: f64, kl_coefficient: f64) -> Result<(Var, Var)> {
    let n = g.value(new_lp).len();
    if [t.old.len(), t.reference.len(), t.advantage.len(), t.weight.len()].iter().any(|l| *l != n) {
        return Err(Error::shape("policy_loss", format!("{n} log-probs but targets of differing length")));
    }
    let surr = g.map(new_lp, "clipped_surrogate", |j, v| surrogate_term(v, t.old[j], t.advantage[j], eps));
    let kl = g.map(new_lp, "kl_k3", |j, v| kl_term(v, t.reference[j]));
    let objective = g.dot_const(surr, t.weight.clone());
    let kl_mean = g.dot_const(kl, t.weight.clone());
    let penalty = g.scale(kl_mean, kl_coefficient);
    let gain = g.sub(objective, penalty);
    Ok((g.scale(gain, -1.0), kl_mean))
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}
