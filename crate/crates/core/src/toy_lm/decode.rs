//! Incremental, gradient-free evaluation used for generation.

use rand::Rng;

use super::model::{layout::*, PolicyModel};
use super::vocab::Token;
use crate::error::{Error, Result};
use crate::numerics::{gelu_with_derivative, kernels, layer_norm_in_place, log_softmax, softmax};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

/// Output of [`PolicyModel::generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted tokens, including the terminating EOS when one was produced.
    pub tokens: Vec<Token>,
    /// Model log-probability (temperature 1) of each emitted token.
    pub logprobs: Vec<f64>,
    /// Log-probability of each emitted token under the distribution it was
    /// drawn from. Equals `logprobs` for temperature 1.
    pub sample_logprobs: Vec<f64>,
    /// Raw logits at each step.
    pub step_logits: Vec<Vec<f64>>,
}

/// Key/value cache over a growing input sequence.
pub struct Decoder<'m> {
    model: &'m PolicyModel,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m PolicyModel) -> Self {
        let n = model.config().n_layers;
        Self { model, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one input row (a raw embedding, no position) and return the
    /// logits at its position.
    pub fn push(&mut self, row: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let cfg = m.config();
        let d = cfg.d_model;
        if row.len() != d {
            return Err(Error::shape("decode", format!("row width {} != d_model {d}", row.len())));
        }
        if self.len >= cfg.max_len {
            return Err(Error::LengthOverflow { len: self.len + 1, max: cfg.max_len });
        }
        let pos = self.len;
        let mut x: Vec<f64> = row.iter().zip(m.pos_emb().row(pos)).map(|(a, b)| a + b).collect();
        let (h, dh) = (cfg.n_heads, d / cfg.n_heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut qkv = vec![0.0; 3 * d];
        let mut att = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut ff = vec![0.0; cfg.d_ff];
        let mut scores = vec![0.0; pos + 1];
        for l in 0..cfg.n_layers {
            let p = |k| m.layer(l, k).data();
            let hn = normed(&x, p(LN1_G), p(LN1_B));
            kernels::vecmat(&hn, p(W_QKV), 3 * d, &mut qkv);
            add(&mut qkv, p(B_QKV));
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (ks, vs) = (&self.keys[l], &self.values[l]);
            att.fill(0.0);
            for hi in 0..h {
                let q = &qkv[hi * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(q, &ks[j * d + hi * dh..][..dh]) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[hi * dh..][..dh];
                for (j, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    for (a, v) in out.iter_mut().zip(&vs[j * d + hi * dh..][..dh]) {
                        *a += w * v;
                    }
                }
            }
            kernels::vecmat(&att, p(W_O), d, &mut o);
            add(&mut o, p(B_O));
            add(&mut x, &o);
            let hn = normed(&x, p(LN2_G), p(LN2_B));
            kernels::vecmat(&hn, p(W1), cfg.d_ff, &mut ff);
            add(&mut ff, p(B1));
            ff.iter_mut().for_each(|v| *v = gelu_with_derivative(*v).0);
            kernels::vecmat(&ff, p(W2), d, &mut o);
            add(&mut o, p(B2));
            add(&mut x, &o);
        }
        let hn = normed(&x, m.tail(0).data(), m.tail(1).data());
        let mut logits = vec![0.0; cfg.vocab_size];
        kernels::vecmat(&hn, m.tail(2).data(), cfg.vocab_size, &mut logits);
        add(&mut logits, m.tail(3).data());
        self.len += 1;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(logits)
    }
}

fn normed(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    layer_norm_in_place(&mut h);
    for ((v, g), b) in h.iter_mut().zip(g).zip(b) {
        *v = *v * g + b;
    }
    h
}

fn add(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Draw an index from `softmax(logits / temperature)`; returns the index and
/// its log-probability under that distribution.
pub fn sample_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> (usize, f64) {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let p = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = p.len() - 1;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            pick = i;
            break;
        }
    }
    (pick, log_softmax(&scaled)[pick])
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl PolicyModel {
    /// Raw embedding rows for `[prefix; ℰ(question)]`.
    pub fn embed_input(&self, prefix: &[Vec<f64>], question: &[Token]) -> Vec<Vec<f64>> {
        prefix.iter().cloned().chain(question.iter().map(|t| self.embedding(*t).to_vec())).collect()
    }

    /// Autoregressive continuation of already-embedded input rows.
    ///
    /// Stops after EOS, after `max_new` tokens, or when the context is full.
    pub fn generate<R: Rng + ?Sized>(&self, input: &[Vec<f64>], decoding: Decoding, max_new: usize, rng: &mut R) -> Result<Generation> {
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be at least 1".into()));
        }
        if let Decoding::Temperature(t) = decoding {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
            }
        }
        if input.is_empty() {
            return Err(Error::Empty("generation input"));
        }
        let max_len = self.config().max_len;
        if input.len() >= max_len {
            return Err(Error::LengthOverflow { len: input.len() + 1, max: max_len });
        }
        if input.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "generation input" });
        }
        let mut dec = Decoder::new(self);
        let mut logits = Vec::new();
        for row in input {
            logits = dec.push(row)?;
        }
        let mut out = Generation { tokens: Vec::new(), logprobs: Vec::new(), sample_logprobs: Vec::new(), step_logits: Vec::new() };
        loop {
            let lp = log_softmax(&logits);
            let (idx, slp) = match decoding {
                Decoding::Greedy => {
                    let i = argmax(&logits);
                    (i, lp[i])
                }
                Decoding::Temperature(t) => sample_logits(&logits, t, rng),
            };
            let tok = Token(idx as u16);
            out.tokens.push(tok);
            out.logprobs.push(lp[idx]);
            out.sample_logprobs.push(slp);
            out.step_logits.push(logits);
            if tok == Token::EOS || out.tokens.len() >= max_new || dec.len() >= max_len {
                break;
            }
            logits = dec.push(self.embedding(tok))?;
        }
        Ok(out)
    }
}
