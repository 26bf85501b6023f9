use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalSpec, LatentSource, TaskOutcome};
use super::metrics::{mean_pass_at_k, strategy_diversity};
use super::pca::pca_project;
use super::probe::LogisticProbe;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latent_control::{encode_tasks, sample_biased, sample_prefix, PrefixEmbeddings, RegionStore};
use crate::palette_vae::{train_vae, Vae};
use crate::rl::{train_rl, write_metrics_csv};
use crate::seeding;
use crate::sft::{build_sft_dataset, train_sft, write_sft_dataset};
use crate::tasks::{generate_mixed, read_dataset, write_dataset, Domain, Task};
use crate::toy_lm::{pretrain, Decoding, PolicyModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    Pretrain,
    TrainVae,
    Sft,
    Rl,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [Stage::GenData, Stage::Pretrain, Stage::TrainVae, Stage::Sft, Stage::Rl, Stage::Eval, Stage::Analyze];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::TrainVae => "train-vae",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }

    fn index(self) -> u64 {
        Stage::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Pretrain => &[Stage::GenData],
            Stage::TrainVae => &[Stage::GenData, Stage::Pretrain],
            Stage::Sft => &[Stage::GenData, Stage::TrainVae],
            Stage::Rl => &[Stage::GenData, Stage::TrainVae, Stage::Sft],
            Stage::Eval => &[Stage::GenData, Stage::TrainVae],
            Stage::Analyze => &[Stage::GenData, Stage::Pretrain, Stage::TrainVae, Stage::Sft],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Fingerprint of the config sections this stage and its inputs depend on.
    pub fingerprint: String,
    pub seed: u64,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { what: "manifest", msg: e.to_string() })
    }

    fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest is serializable");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Seed handed to one stage, derived from the experiment seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seeding::derive_seed(seed, &[0x5eed, stage.index()])
}

/// Hash of the config sections that determine `stage`'s outputs, its
/// upstream stages included.
pub fn fingerprint(cfg: &ExperimentConfig, stage: Stage) -> String {
    let mut parts = vec![format!("seed={}", cfg.seed), toml_of("tasks", &cfg.tasks)];
    let mut add = |s: Stage, part: String| {
        if stage >= s {
            parts.push(part);
        }
    };
    add(Stage::Pretrain, toml_of("model", &cfg.model) + &toml_of("pretrain", &cfg.pretrain));
    add(Stage::TrainVae, toml_of("vae", &cfg.vae));
    add(Stage::Sft, toml_of("sft", &cfg.sft));
    add(Stage::Rl, toml_of("rl", &cfg.rl));
    add(Stage::Eval, toml_of("eval", &cfg.eval));
    add(Stage::Analyze, toml_of("analysis", &cfg.analysis));
    parts.push(stage.name().to_string());
    hex::encode(Sha256::digest(parts.join("\n").as_bytes()))
}

fn toml_of<T: Serialize>(name: &str, v: &T) -> String {
    format!("[{name}]\n{}", toml::to_string(v).expect("config sections serialize"))
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::InvalidArgument(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Load the config at `path` and apply overrides. Nothing is written.
pub fn load_config(path: &Path, opts: &RunOptions) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(d) = &opts.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

/// Run every stage in order.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    run_stages(config_path, &Stage::ALL, opts)
}

pub fn run_stages(config_path: &Path, stages: &[Stage], opts: &RunOptions) -> Result<PathBuf> {
    let cfg = load_config(config_path, opts)?;
    run_config(&cfg, stages, opts.force)
}

/// Run `stages` (sorted into pipeline order) for an already-validated config.
/// A stage whose manifest record matches its fingerprint and whose outputs
/// still exist is skipped unless `force`.
pub fn run_config(cfg: &ExperimentConfig, stages: &[Stage], force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _lock = Lock::acquire(&dir)?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = if manifest_path.exists() { Manifest::load(&manifest_path)? } else { Manifest::default() };
    manifest.config_hash = cfg.hash();
    manifest.seed = cfg.seed;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut order = stages.to_vec();
    order.sort();
    order.dedup();
    let ctx = Ctx { cfg, dir: &dir };
    for stage in order {
        let fp = fingerprint(cfg, stage);
        let done = manifest
            .stages
            .get(stage.name())
            .is_some_and(|r| r.status == StageStatus::Completed && r.fingerprint == fp && r.outputs.iter().all(|o| dir.join(o).exists()));
        if done && !force {
            eprintln!("[{stage}] up to date");
            continue;
        }
        for up in stage.upstream() {
            let current = manifest
                .stages
                .get(up.name())
                .is_some_and(|r| r.status == StageStatus::Completed && r.fingerprint == fingerprint(cfg, *up));
            if !current && manifest.stages.contains_key(up.name()) {
                return Err(Error::InvalidArgument(format!(
                    "stage {up} was produced with a different config or failed; rerun it before {stage}"
                )));
            }
        }
        eprintln!("[{stage}] running");
        let seed = stage_seed(cfg.seed, stage);
        let result = ctx.run(stage, seed);
        let record = match &result {
            Ok(outputs) => StageRecord { status: StageStatus::Completed, fingerprint: fp, seed, outputs: outputs.clone(), error: None },
            Err(e) => StageRecord { status: StageStatus::Failed, fingerprint: fp, seed, outputs: Vec::new(), error: Some(e.to_string()) },
        };
        manifest.stages.insert(stage.name().to_string(), record);
        manifest.save(&manifest_path)?;
        result?;
    }
    Ok(dir)
}

pub mod artifacts {
    pub const PRETRAIN_DATA: &str = "data/pretrain.tsv";
    pub const TRAIN_DATA: &str = "data/train.tsv";
    pub const RL_DATA: &str = "data/rl.tsv";
    pub const TEST_DATA: &str = "data/test.tsv";
    pub const BASE_CKPT: &str = "checkpoints/base.ckpt";
    pub const VAE_CKPT: &str = "checkpoints/vae.ckpt";
    pub const SFT_CKPT: &str = "checkpoints/sft.ckpt";
    pub const RL_CKPT: &str = "checkpoints/rl.ckpt";
    pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
    pub const VAE_METRICS: &str = "vae_metrics.csv";
    pub const REGIONS: &str = "regions.tsv";
    pub const SFT_DATASET: &str = "sft_dataset.tsv";
    pub const SFT_METRICS: &str = "sft_metrics.csv";
    pub const RL_METRICS: &str = "rl_metrics.csv";
    pub const EVAL_REPORT: &str = "eval_report.csv";
    pub const LATENTS: &str = "latents.csv";
    pub const PREFIXES: &str = "prefixes.csv";
    pub const PCA_LATENTS: &str = "pca_latents.csv";
    pub const PCA_PREFIXES: &str = "pca_prefixes.csv";
    pub const PCA_EXPLAINED: &str = "pca_explained.csv";
    pub const PROBE: &str = "probe.csv";
    pub const DIVERSITY: &str = "diversity.csv";
}

use artifacts as a;

pub const EVAL_HEADER: &str = "model,decoding,latent,prefix_len,domain,k,pass_at_k,n_tasks,n_samples,n_correct";

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn numbered(prefix: &str, n: usize) -> String {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect::<Vec<_>>().join(",")
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn input(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn tasks(&self, rel: &str) -> Result<Vec<Task>> {
        read_dataset(&self.input(rel)?)
    }

    fn policy(&self, rel: &str) -> Result<PolicyModel> {
        let p = self.input(rel)?;
        let ck = Checkpoint::load(&p)?;
        let s = ck
            .section("policy")
            .ok_or_else(|| Error::Format { what: "checkpoint", msg: format!("{} has no policy section", p.display()) })?;
        PolicyModel::from_section(s)
    }

    fn vae(&self) -> Result<Vae> {
        let p = self.input(a::VAE_CKPT)?;
        let ck = Checkpoint::load(&p)?;
        let s =
            ck.section("vae").ok_or_else(|| Error::Format { what: "checkpoint", msg: format!("{} has no vae section", p.display()) })?;
        Vae::from_section(s)
    }

    fn save_policy(&self, rel: &str, model: &PolicyModel) -> Result<()> {
        Checkpoint { sections: vec![model.to_section("policy")] }.save(&self.path(rel))
    }

    fn run(&self, stage: Stage, seed: u64) -> Result<Vec<String>> {
        let outputs: &[&str] = match stage {
            Stage::GenData => {
                self.gen_data(seed)?;
                &[a::PRETRAIN_DATA, a::TRAIN_DATA, a::RL_DATA, a::TEST_DATA]
            }
            Stage::Pretrain => {
                self.pretrain(seed)?;
                &[a::BASE_CKPT, a::PRETRAIN_METRICS]
            }
            Stage::TrainVae => {
                self.train_vae(seed)?;
                &[a::VAE_CKPT, a::VAE_METRICS, a::REGIONS]
            }
            Stage::Sft => {
                self.sft(seed)?;
                &[a::SFT_CKPT, a::SFT_DATASET, a::SFT_METRICS]
            }
            Stage::Rl => {
                self.rl(seed)?;
                &[a::RL_CKPT, a::RL_METRICS]
            }
            Stage::Eval => {
                self.eval(seed)?;
                &[a::EVAL_REPORT]
            }
            Stage::Analyze => {
                self.analyze(seed)?;
                &[a::LATENTS, a::PREFIXES, a::PCA_LATENTS, a::PCA_PREFIXES, a::PCA_EXPLAINED, a::PROBE, a::DIVERSITY]
            }
        };
        Ok(outputs.iter().map(|s| s.to_string()).collect())
    }

    fn gen_data(&self, seed: u64) -> Result<()> {
        let t = &self.cfg.tasks;
        let data = self.path("data");
        fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
        let splits = [
            (a::PRETRAIN_DATA, t.pretrain_per_domain),
            (a::TRAIN_DATA, t.train_per_domain),
            (a::RL_DATA, t.rl_per_domain),
            (a::TEST_DATA, t.test_per_domain),
        ];
        for (i, (rel, n)) in splits.into_iter().enumerate() {
            let tasks = generate_mixed(n, seeding::derive_seed(seed, &[i as u64]))?;
            write_dataset(&self.path(rel), &tasks)?;
        }
        Ok(())
    }

    fn pretrain(&self, seed: u64) -> Result<()> {
        let corpus = self.tasks(a::PRETRAIN_DATA)?;
        let mut model = PolicyModel::new(self.cfg.model.clone(), &mut seeding::stream(seed, &[0]))?;
        let losses = pretrain(&mut model, &corpus, &self.cfg.pretrain, seed)?;
        let ckpts = self.path("checkpoints");
        fs::create_dir_all(&ckpts).map_err(|e| Error::io(&ckpts, e))?;
        self.save_policy(a::BASE_CKPT, &model)?;
        write_csv(&self.path(a::PRETRAIN_METRICS), "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{i},{l:?}")))
    }

    fn train_vae(&self, seed: u64) -> Result<()> {
        let base = self.policy(a::BASE_CKPT)?;
        let corpus = self.tasks(a::TRAIN_DATA)?;
        let (vae, epochs) = train_vae(&corpus, &base, &self.cfg.vae, seed)?;
        Checkpoint { sections: vec![vae.to_section("vae")] }.save(&self.path(a::VAE_CKPT))?;
        write_csv(
            &self.path(a::VAE_METRICS),
            "epoch,loss,recon,kl",
            epochs.iter().enumerate().map(|(i, e)| format!("{i},{:?},{:?},{:?}", e.loss, e.recon, e.kl)),
        )?;
        RegionStore::fit(&corpus, &base, &vae)?.write(&self.path(a::REGIONS))
    }

    fn sft(&self, seed: u64) -> Result<()> {
        let mut model = self.policy(a::BASE_CKPT)?;
        let vae = self.vae()?;
        let corpus = self.tasks(a::TRAIN_DATA)?;
        let ds = build_sft_dataset(&corpus, &vae, seed)?;
        write_sft_dataset(&self.path(a::SFT_DATASET), &ds)?;
        let losses = train_sft(&mut model, &ds, &self.cfg.sft, seed)?;
        self.save_policy(a::SFT_CKPT, &model)?;
        write_csv(&self.path(a::SFT_METRICS), "step,loss", losses.iter().enumerate().map(|(i, l)| format!("{i},{l:?}")))
    }

    fn rl(&self, seed: u64) -> Result<()> {
        let sft = self.policy(a::SFT_CKPT)?;
        let vae = self.vae()?;
        let tasks = self.tasks(a::RL_DATA)?;
        let cfg = crate::rl::RlConfig { seed, ..self.cfg.rl.clone() };
        let (model, log) = train_rl(&cfg, &sft, &vae, &tasks, Some(&self.path("checkpoints")))?;
        self.save_policy(a::RL_CKPT, &model)?;
        write_metrics_csv(&self.path(a::RL_METRICS), &log)
    }

    fn eval(&self, seed: u64) -> Result<()> {
        let e = &self.cfg.eval;
        let vae = self.vae()?;
        let regions = RegionStore::read(&self.input(a::REGIONS)?)?;
        let test = self.tasks(a::TEST_DATA)?;
        let mut rows = Vec::new();
        for name in &e.models {
            let rel = match name.as_str() {
                "base" => a::BASE_CKPT,
                "sft" => a::SFT_CKPT,
                _ => a::RL_CKPT,
            };
            let model = self.policy(rel)?;
            for entry in &e.configs {
                let decoding = entry.parse_decoding()?;
                let spec = |latent| EvalSpec {
                    decoding,
                    latent,
                    prefix_len: e.prefix_len,
                    mode: e.prefix_mode,
                    n_samples: e.n_samples,
                    max_new: e.max_new,
                };
                let mut outcomes: Vec<TaskOutcome> = Vec::new();
                if entry.latent == "biased:matched" {
                    for d in Domain::ALL {
                        let subset: Vec<Task> = test.iter().filter(|t| t.domain == d).cloned().collect();
                        if !subset.is_empty() {
                            outcomes.extend(
                                evaluate(&model, Some(&vae), Some(&regions), &subset, &spec(LatentSource::Biased(d)), seed)?.per_task,
                            );
                        }
                    }
                } else {
                    let latent: LatentSource = entry.latent.parse()?;
                    outcomes = evaluate(&model, Some(&vae), Some(&regions), &test, &spec(latent), seed)?.per_task;
                }
                let prefix_len = if entry.latent == "none" { 0 } else { e.prefix_len };
                let groups = Domain::ALL.iter().map(|d| (d.to_string(), Some(*d))).chain([("ALL".to_string(), None)]);
                for (label, dom) in groups {
                    let sel: Vec<&TaskOutcome> = outcomes.iter().filter(|o| dom.is_none_or(|d| o.domain == d)).collect();
                    if sel.is_empty() {
                        continue;
                    }
                    let counts: Vec<(usize, usize)> = sel.iter().map(|o| (o.n_samples, o.n_correct)).collect();
                    let n_correct: usize = sel.iter().map(|o| o.n_correct).sum();
                    for &k in &e.ks {
                        rows.push(format!(
                            "{name},{},{},{prefix_len},{label},{k},{:?},{},{},{n_correct}",
                            entry.decoding,
                            entry.latent,
                            mean_pass_at_k(&counts, k)?,
                            sel.len(),
                            e.n_samples
                        ));
                    }
                }
            }
        }
        write_csv(&self.path(a::EVAL_REPORT), EVAL_HEADER, rows)
    }

    fn analyze(&self, seed: u64) -> Result<()> {
        let an = &self.cfg.analysis;
        let base = self.policy(a::BASE_CKPT)?;
        let sft = self.policy(a::SFT_CKPT)?;
        let vae = self.vae()?;
        let regions = RegionStore::read(&self.input(a::REGIONS)?)?;
        let train = self.tasks(a::TRAIN_DATA)?;
        let test = self.tasks(a::TEST_DATA)?;
        let k = vae.latent_dim();
        let d = vae.input_dim();

        let z_train = encode_tasks(&train, &base, &vae)?;
        let z_test = encode_tasks(&test, &base, &vae)?;
        write_csv(
            &self.path(a::LATENTS),
            &format!("split,domain,{}", numbered("z", k)),
            train
                .iter()
                .zip(&z_train)
                .map(|(t, z)| ("train", t, z))
                .chain(test.iter().zip(&z_test).map(|(t, z)| ("test", t, z)))
                .map(|(s, t, z)| format!("{s},{},{}", t.domain, join_f64(z))),
        )?;
        let labels = |ts: &[Task]| ts.iter().map(|t| t.domain.index()).collect::<Vec<_>>();
        let probe = LogisticProbe::fit(&z_train, &labels(&train), Domain::ALL.len());
        write_csv(
            &self.path(a::PROBE),
            "split,accuracy,n",
            [
                format!("train,{:?},{}", probe.accuracy(&z_train, &labels(&train)), train.len()),
                format!("test,{:?},{}", probe.accuracy(&z_test, &labels(&test)), test.len()),
            ],
        )?;

        let dims = an.pca_dims.min(k).min(z_train.len());
        let pl = pca_project(&z_train, dims)?;
        write_csv(
            &self.path(a::PCA_LATENTS),
            &format!("domain,{}", numbered("pc", dims)),
            train.iter().zip(&pl.coords).map(|(t, c)| format!("{},{}", t.domain, join_f64(c))),
        )?;

        let mut prefix_rows: Vec<(Domain, usize, usize, Vec<f64>)> = Vec::new();
        for dom in Domain::ALL {
            let Some(region) = regions.get(dom) else { continue };
            for draw in 0..an.draws_per_domain {
                let mut rng = seeding::stream(seed, &[0, dom.index() as u64, draw as u64]);
                let p = sample_biased(region, dom, &vae, an.prefix_len, an.prefix_mode, &mut rng)?;
                for (r, row) in p.rows().iter().enumerate() {
                    prefix_rows.push((dom, draw, r, row.clone()));
                }
            }
        }
        write_csv(
            &self.path(a::PREFIXES),
            &format!("domain,draw,row,{}", numbered("p", d)),
            prefix_rows.iter().map(|(dom, draw, r, p)| format!("{dom},{draw},{r},{}", join_f64(p))),
        )?;
        let rows: Vec<Vec<f64>> = prefix_rows.iter().map(|r| r.3.clone()).collect();
        let pdims = an.pca_dims.min(d).min(rows.len());
        let pp = pca_project(&rows, pdims)?;
        write_csv(
            &self.path(a::PCA_PREFIXES),
            &format!("domain,draw,row,{}", numbered("pc", pdims)),
            prefix_rows.iter().zip(&pp.coords).map(|((dom, draw, r, _), c)| format!("{dom},{draw},{r},{}", join_f64(c))),
        )?;
        let explained = pl
            .explained_ratio
            .iter()
            .enumerate()
            .map(|(i, r)| format!("latents,{},{r:?}", i + 1))
            .chain(pp.explained_ratio.iter().enumerate().map(|(i, r)| format!("prefixes,{},{r:?}", i + 1)));
        write_csv(&self.path(a::PCA_EXPLAINED), "source,component,ratio", explained)?;

        let configs = [
            ("greedy", "none", Decoding::Greedy, false),
            ("greedy", "prior", Decoding::Greedy, true),
            ("1.0", "none", Decoding::Temperature(1.0), false),
            ("1.0", "prior", Decoding::Temperature(1.0), true),
        ];
        let n_tasks = an.diversity_tasks.min(test.len());
        let mut div_rows = Vec::new();
        for (c, (dec_label, lat_label, decoding, latent)) in configs.into_iter().enumerate() {
            let (mut styles, mut ratio) = (0.0, 0.0);
            for (i, task) in test.iter().take(n_tasks).enumerate() {
                let mut outs = Vec::with_capacity(an.diversity_samples);
                for s in 0..an.diversity_samples {
                    let mut rng = seeding::stream(seed, &[1, c as u64, i as u64, s as u64]);
                    let prefix = if latent {
                        sample_prefix(&vae, self.cfg.eval.prefix_len, self.cfg.eval.prefix_mode, &mut rng)?
                    } else {
                        PrefixEmbeddings::empty()
                    };
                    let input = crate::latent_control::assemble_input(&prefix, &task.question, &sft)?;
                    outs.push(sft.generate(&input, decoding, self.cfg.eval.max_new, &mut rng)?.tokens);
                }
                let dv = strategy_diversity(&outs)?;
                styles += dv.distinct_trace_styles as f64;
                ratio += dv.distinct_ngram_ratio;
            }
            let n = n_tasks as f64;
            div_rows.push(format!("{dec_label},{lat_label},{:?},{:?},{n_tasks},{}", styles / n, ratio / n, an.diversity_samples));
        }
        write_csv(
            &self.path(a::DIVERSITY),
            "decoding,latent,mean_distinct_trace_styles,mean_distinct_ngram_ratio,n_tasks,samples_per_task",
            div_rows,
        )
    }
}
