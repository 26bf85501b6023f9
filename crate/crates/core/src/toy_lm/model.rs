use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Token, Vocabulary};
use crate::checkpoint::Section;
use crate::error::{Error, Result};
use crate::numerics::{randn, AttentionLayout, Graph, Params, RowSource, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: Vocabulary::standard().len(), d_model: 64, n_layers: 4, n_heads: 4, max_len: 256, d_ff: 256 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: &str| Err(Error::Config { field: field.into(), msg: msg.into() });
        if self.vocab_size < Vocabulary::standard().len() {
            return bad("model.vocab_size", "smaller than the task vocabulary");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("model.d_model", "must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.max_len < 2 || self.d_ff == 0 {
            return bad("model", "n_layers, d_ff must be positive and max_len at least 2");
        }
        Ok(())
    }
}

// Per-block parameter offsets.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const W_QKV: usize = 2;
pub(crate) const B_QKV: usize = 3;
pub(crate) const W_O: usize = 4;
pub(crate) const B_O: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;
const PER_LAYER: usize = 12;

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

/// Sequence to score: `[prefix; question; output]`, log-probs taken over
/// the output positions only.
#[derive(Clone, Copy, Debug)]
pub struct ScoreItem<'a> {
    pub prefix: &'a [Vec<f64>],
    pub question: &'a [Token],
    pub output: &'a [Token],
    /// Shift applied to every position index.
    pub offset: usize,
}

/// Decoder-only transformer over the fixed vocabulary, with pre-norm blocks,
/// learned positions and an optional continuous prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    config: ModelConfig,
    params: Params,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ModelConfig { vocab_size: v, d_model: d, n_layers, d_ff, max_len, .. } = config;
        let mut p = Params::new();
        let resid_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        p.push("tok_emb", randn(&[v, d], 0.1, rng));
        p.push("pos_emb", randn(&[max_len, d], 0.02, rng));
        for l in 0..n_layers {
            let n = |s: &str| format!("h{l}.{s}");
            p.push(n("ln1.g"), Tensor::filled(&[d], 1.0));
            p.push(n("ln1.b"), Tensor::zeros(&[d]));
            p.push(n("attn.w_qkv"), randn(&[d, 3 * d], 0.02, rng));
            p.push(n("attn.b_qkv"), Tensor::zeros(&[3 * d]));
            p.push(n("attn.w_o"), randn(&[d, d], resid_std, rng));
            p.push(n("attn.b_o"), Tensor::zeros(&[d]));
            p.push(n("ln2.g"), Tensor::filled(&[d], 1.0));
            p.push(n("ln2.b"), Tensor::zeros(&[d]));
            p.push(n("mlp.w1"), randn(&[d, d_ff], 0.02, rng));
            p.push(n("mlp.b1"), Tensor::zeros(&[d_ff]));
            p.push(n("mlp.w2"), randn(&[d_ff, d], resid_std, rng));
            p.push(n("mlp.b2"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.g", Tensor::filled(&[d], 1.0));
        p.push("ln_f.b", Tensor::zeros(&[d]));
        p.push("head.w", randn(&[d, v], 0.02, rng));
        p.push("head.b", Tensor::zeros(&[v]));
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// The token embedding table, `V × d`.
    pub fn embedding_table(&self) -> &Tensor {
        self.params.get(TOK_EMB)
    }

    pub fn embedding(&self, t: Token) -> &[f64] {
        self.embedding_table().row(t.index())
    }

    pub(crate) fn layer(&self, l: usize, k: usize) -> &Tensor {
        self.params.get(2 + l * PER_LAYER + k)
    }

    pub(crate) fn tail(&self, k: usize) -> &Tensor {
        self.params.get(2 + self.config.n_layers * PER_LAYER + k)
    }

    pub(crate) fn pos_emb(&self) -> &Tensor {
        self.params.get(POS_EMB)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.config.vocab_size) {
            Some(t) => Err(Error::OutOfVocab(t.index())),
            None => Ok(()),
        }
    }

    fn check_prefix(&self, prefix: &[Vec<f64>]) -> Result<()> {
        let d = self.config.d_model;
        if let Some(r) = prefix.iter().find(|r| r.len() != d) {
            return Err(Error::shape("prefix", format!("row width {} != d_model {d}", r.len())));
        }
        if prefix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "prefix" });
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::LengthOverflow { len, max: self.config.max_len });
        }
        Ok(())
    }

    /// Arithmetic mean of the raw embedding rows of `[question; answer]`.
    pub fn mean_pool(&self, question: &[Token], answer: &[Token]) -> Result<Vec<f64>> {
        let n = question.len() + answer.len();
        if n == 0 {
            return Err(Error::Empty("mean_pool sequence"));
        }
        self.check_tokens(question)?;
        self.check_tokens(answer)?;
        // Summing per-vocabulary counts keeps the result exactly independent
        // of token order.
        let mut counts = vec![0usize; self.config.vocab_size];
        for t in question.iter().chain(answer) {
            counts[t.index()] += 1;
        }
        let mut h = vec![0.0; self.config.d_model];
        for (v, &c) in counts.iter().enumerate().filter(|(_, c)| **c > 0) {
            for (a, e) in h.iter_mut().zip(self.embedding(Token(v as u16))) {
                *a += c as f64 * e;
            }
        }
        let inv = 1.0 / n as f64;
        h.iter_mut().for_each(|a| *a *= inv);
        Ok(h)
    }

    /// Full-sequence logits, one row per input position (prefix rows included).
    pub fn forward_logits(&self, prefix: &[Vec<f64>], tokens: &[Token]) -> Result<Tensor> {
        if prefix.len() + tokens.len() == 0 {
            return Err(Error::Empty("forward_logits input"));
        }
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let (logits, _) = self.build(&mut g, &vars, &[(prefix, tokens, 0)])?;
        g.check_finite()?;
        Ok(g.value(logits).clone())
    }

    /// Log-probability of each output token given everything before it.
    pub fn sequence_logprob(&self, prefix: &[Vec<f64>], question: &[Token], output: &[Token]) -> Result<Vec<f64>> {
        if output.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let vars = self.params.attach_frozen(&mut g);
        let item = ScoreItem { prefix, question, output, offset: 0 };
        let (lp, _) = self.score(&mut g, &vars, &[item])?;
        g.check_finite()?;
        Ok(g.value(lp).data().to_vec())
    }

    /// Record per-output-token log-probs for a batch of sequences into `g`.
    ///
    /// Returns a vector node holding every scored entry back to back and the
    /// range each item occupies in it. Items with empty outputs get empty
    /// ranges.
    pub fn score(&self, g: &mut Graph, vars: &[Var], items: &[ScoreItem<'_>]) -> Result<(Var, Vec<Range<usize>>)> {
        if items.is_empty() {
            return Err(Error::Empty("score batch"));
        }
        let v = self.config.vocab_size;
        let seqs: Vec<(&[Vec<f64>], Vec<Token>, usize)> = items
            .iter()
            .map(|it| {
                let mut toks = it.question.to_vec();
                toks.extend_from_slice(it.output);
                (it.prefix, toks, it.offset)
            })
            .collect();
        for it in items {
            if !it.output.is_empty() && it.prefix.is_empty() && it.question.is_empty() {
                return Err(Error::InvalidArgument("first output token has no context".into()));
            }
        }
        let borrowed: Vec<(&[Vec<f64>], &[Token], usize)> = seqs.iter().map(|(p, t, o)| (*p, t.as_slice(), *o)).collect();
        let (logits, t_max) = self.build(g, vars, &borrowed)?;
        let logp = g.log_softmax_rows(logits);
        let mut index = Vec::new();
        let mut ranges = Vec::with_capacity(items.len());
        for (b, it) in items.iter().enumerate() {
            let start = index.len();
            let ctx = it.prefix.len() + it.question.len();
            for (t, tok) in it.output.iter().enumerate() {
                let row = b * t_max + ctx + t - 1;
                index.push(row * v + tok.index());
            }
            ranges.push(start..index.len());
        }
        if index.is_empty() {
            return Err(Error::Empty("score outputs"));
        }
        Ok((g.pick(logp, index), ranges))
    }

    /// Batched forward into `g`. Sequences are right-padded to the longest
    /// one; padding keys are masked. Returns `[B*T, V]` logits and `T`.
    pub(crate) fn build(&self, g: &mut Graph, vars: &[Var], seqs: &[(&[Vec<f64>], &[Token], usize)]) -> Result<(Var, usize)> {
        assert_eq!(vars.len(), self.params.len(), "build: parameter vars do not match the model");
        let cfg = &self.config;
        let t_max = seqs.iter().map(|(p, t, _)| p.len() + t.len()).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::Empty("forward input"));
        }
        for (p, t, off) in seqs {
            self.check_prefix(p)?;
            self.check_tokens(t)?;
            self.check_len(off + p.len() + t.len())?;
        }
        let b = seqs.len();
        let mut tok_rows = Vec::with_capacity(b * t_max);
        let mut pos_rows = Vec::with_capacity(b * t_max);
        let mut mask = Vec::with_capacity(b * t_max);
        for (p, t, off) in seqs {
            let n = p.len() + t.len();
            tok_rows.extend(p.iter().map(|r| RowSource::Fixed(r)));
            tok_rows.extend(t.iter().map(|t| RowSource::Table(t.index())));
            tok_rows.extend((n..t_max).map(|_| RowSource::Table(Token::PAD.index())));
            pos_rows.extend((0..t_max).map(|i| RowSource::Table((off + i).min(cfg.max_len - 1))));
            mask.extend((0..t_max).map(|i| i < n));
        }
        let key_mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
        let te = g.embed(vars[TOK_EMB], &tok_rows);
        let pe = g.embed(vars[POS_EMB], &pos_rows);
        let mut x = g.add(te, pe);
        let layout = AttentionLayout { batch: b, seq: t_max, heads: cfg.n_heads, key_mask };
        for l in 0..cfg.n_layers {
            let p = |k: usize| vars[2 + l * PER_LAYER + k];
            let h = norm(g, x, p(LN1_G), p(LN1_B));
            let qkv = affine(g, h, p(W_QKV), p(B_QKV));
            let att = g.causal_attention(qkv, layout.clone());
            let o = affine(g, att, p(W_O), p(B_O));
            x = g.add(x, o);
            let h = norm(g, x, p(LN2_G), p(LN2_B));
            let m = affine(g, h, p(W1), p(B1));
            let m = g.gelu(m);
            let m = affine(g, m, p(W2), p(B2));
            x = g.add(x, m);
        }
        let tail = 2 + cfg.n_layers * PER_LAYER;
        let h = norm(g, x, vars[tail], vars[tail + 1]);
        let logits = affine(g, h, vars[tail + 2], vars[tail + 3]);
        Ok((logits, t_max))
    }

    pub fn to_section(&self, name: &str) -> Section {
        let c = &self.config;
        Section {
            name: name.to_string(),
            hyper: vec![
                ("vocab_size".into(), c.vocab_size.to_string()),
                ("d_model".into(), c.d_model.to_string()),
                ("n_layers".into(), c.n_layers.to_string()),
                ("n_heads".into(), c.n_heads.to_string()),
                ("max_len".into(), c.max_len.to_string()),
                ("d_ff".into(), c.d_ff.to_string()),
            ],
            params: self.params.clone(),
        }
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let config = ModelConfig {
            vocab_size: section.hyper_usize("vocab_size")?,
            d_model: section.hyper_usize("d_model")?,
            n_layers: section.hyper_usize("n_layers")?,
            n_heads: section.hyper_usize("n_heads")?,
            max_len: section.hyper_usize("max_len")?,
            d_ff: section.hyper_usize("d_ff")?,
        };
        let mut model = Self::new(config, &mut crate::seeding::stream(0, &[]))?;
        model.params.assign(&section.params).map_err(|_| Error::Format {
            what: "checkpoint",
            msg: format!("section {:?} does not match the model layout", section.name),
        })?;
        Ok(model)
    }
}

pub(crate) fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let h = g.layer_norm(x);
    let h = g.mul_row(h, gain);
    g.add_row(h, bias)
}

pub(crate) fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub(crate) mod layout {
    pub(crate) use super::{B1, B2, B_O, B_QKV, LN1_B, LN1_G, LN2_B, LN2_G, W1, W2, W_O, W_QKV};
}
