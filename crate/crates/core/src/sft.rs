//! Short supervised warm-up on prior-sampled single-row prefixes.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_control::{sample_prefix, PrefixEmbeddings, PrefixMode, Provenance};
use crate::numerics::Adam;
use crate::palette_vae::Vae;
use crate::seeding;
use crate::tasks::Task;
use crate::toy_lm::{nll_step, PolicyModel, ScoreItem, Token, Vocabulary};

pub const SFT_PREFIX_LEN: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub prefix: PrefixEmbeddings,
    pub question: Vec<Token>,
    pub output: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Optimizer steps.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { iterations: 10, batch_size: 32, lr: 1e-3, grad_clip: 1.0 }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: format!("sft.{field}"), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }
}

/// Pair every corpus item with a fresh prior latent decoded to one row. The
/// encoder is never consulted.
pub fn build_sft_dataset(corpus: &[Task], vae: &Vae, seed: u64) -> Result<Vec<SftExample>> {
    if corpus.is_empty() {
        return Err(Error::Empty("SFT corpus"));
    }
    let mut rng = seeding::stream(seed, &[0x5f7]);
    corpus
        .iter()
        .map(|t| {
            Ok(SftExample {
                prefix: sample_prefix(vae, SFT_PREFIX_LEN, PrefixMode::Independent, &mut rng)?,
                question: t.question.clone(),
                output: t.gold_output(),
            })
        })
        .collect()
}

/// Cross-entropy over output tokens only. Returns the loss at each step,
/// measured before that step's update.
pub fn train_sft(model: &mut PolicyModel, dataset: &[SftExample], cfg: &SftConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok(Vec::new());
    }
    if dataset.is_empty() {
        return Err(Error::Empty("SFT dataset"));
    }
    let max = model.config().max_len;
    for ex in dataset {
        let len = ex.prefix.len() + ex.question.len() + ex.output.len();
        if len > max {
            return Err(Error::LengthOverflow { len, max });
        }
    }
    let mut adam = Adam::new(cfg.lr);
    let mut rng = seeding::stream(seed, &[0x5f7, 1]);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(dataset.len()) {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let items: Vec<_> = batch
            .iter()
            .map(|&i| {
                let ex = &dataset[i];
                ScoreItem { prefix: ex.prefix.rows(), question: &ex.question, output: &ex.output, offset: 0 }
            })
            .collect();
        losses.push(nll_step(model, &mut adam, &items, cfg.lr, cfg.grad_clip)?);
    }
    Ok(losses)
}

/// One line per example: question, output, comma-joined latent.
pub fn write_sft_dataset(path: &Path, dataset: &[SftExample]) -> Result<()> {
    let v = Vocabulary::standard();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "question\toutput\tz").map_err(|e| Error::io(path, e))?;
    for ex in dataset {
        let z = ex
            .prefix
            .latents()
            .iter()
            .map(|z| z.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(f, "{}\t{}\t{z}", v.render(&ex.question), v.render(&ex.output)).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Rebuild a persisted dataset, re-decoding each stored latent.
pub fn read_sft_dataset(path: &Path, vae: &Vae) -> Result<Vec<SftExample>> {
    let v = Vocabulary::standard();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format { what: "SFT dataset", msg: format!("line {line}: {msg}") };
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        let latents = fields[2]
            .split(';')
            .map(|z| z.split(',').map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 1, "bad latent"))?;
        out.push(SftExample {
            prefix: PrefixEmbeddings::from_latents(vae, latents, Provenance::Prior)?,
            question: v.parse(fields[0])?,
            output: v.parse(fields[1])?,
        });
    }
    Ok(out)
}
