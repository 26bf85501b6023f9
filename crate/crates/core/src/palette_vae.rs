//! Gaussian VAE over mean-pooled question/answer embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Section;
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, kernels, randn, Adam, Graph, Params, Tensor, Var};
use crate::seeding;
use crate::tasks::Task;
use crate::toy_lm::PolicyModel;

pub const SIGMA_MIN: f64 = 1e-6;
pub const SIGMA_MAX: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent_dim: 16, hidden: 128, beta: 0.05, epochs: 200, batch_size: 32, lr: 1e-3 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config { field: format!("vae.{field}"), msg: msg.into() });
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("latent_dim", "latent_dim and hidden must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        Ok(())
    }
}

/// Diagonal Gaussian `q(z | h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

// Parameter order: encoder (w1 b1 w2 b2 w3 b3), decoder (v1 c1 v2 c2 v3 c3).
const ENC: usize = 0;
const DEC: usize = 6;

/// Encoder `d → hidden → hidden → 2k` and decoder `k → hidden → hidden → d`,
/// tanh hidden units.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    d: usize,
    config: VaeConfig,
    params: Params,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(d: usize, config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if d == 0 {
            return Err(Error::Config { field: "vae.d".into(), msg: "input width must be positive".into() });
        }
        let (h, k) = (config.hidden, config.latent_dim);
        let mut p = Params::new();
        let mut linear = |p: &mut Params, name: &str, i: usize, o: usize| {
            p.push(format!("{name}.w"), randn(&[i, o], 1.0 / (i as f64).sqrt(), rng));
            p.push(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        linear(&mut p, "enc.l1", d, h);
        linear(&mut p, "enc.l2", h, h);
        linear(&mut p, "enc.out", h, 2 * k);
        linear(&mut p, "dec.l1", k, h);
        linear(&mut p, "dec.l2", h, h);
        linear(&mut p, "dec.out", h, d);
        Ok(Self { d, config, params: p })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn mlp(&self, base: usize, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in 0..3 {
            let w = self.params.get(base + 2 * layer);
            let b = self.params.get(base + 2 * layer + 1);
            let mut y = b.data().to_vec();
            let mut tmp = vec![0.0; w.cols()];
            kernels::vecmat(&cur, w.data(), w.cols(), &mut tmp);
            y.iter_mut().zip(&tmp).for_each(|(a, t)| *a += t);
            if layer < 2 {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = y;
        }
        cur
    }

    pub fn encode(&self, h: &[f64]) -> Result<GaussianPosterior> {
        if h.len() != self.d {
            return Err(Error::shape("encode", format!("input width {} != {}", h.len(), self.d)));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "encode" });
        }
        let k = self.config.latent_dim;
        let out = self.mlp(ENC, h);
        let sigma = out[k..].iter().map(|&s| s.exp().clamp(SIGMA_MIN, SIGMA_MAX)).collect();
        Ok(GaussianPosterior { mu: out[..k].to_vec(), sigma })
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape("decode", format!("latent width {} != {}", z.len(), self.config.latent_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(self.mlp(DEC, z))
    }

    /// ELBO over a batch, recorded into `g`: mean over rows of
    /// `‖h − D(μ + σ⊙ε)‖² + β·KL`. Returns `(loss, reconstruction, kl)`.
    pub fn elbo_graph(&self, g: &mut Graph, vars: &[Var], h: &Tensor, noise: &Tensor) -> Result<(Var, Var, Var)> {
        let k = self.config.latent_dim;
        if h.shape().len() != 2 || h.cols() != self.d {
            return Err(Error::shape("elbo", format!("inputs {:?}, want [n, {}]", h.shape(), self.d)));
        }
        if noise.shape() != [h.rows(), k] {
            return Err(Error::shape("elbo", format!("noise {:?}, want [{}, {k}]", noise.shape(), h.rows())));
        }
        let n = h.rows() as f64;
        let x = g.constant(h.clone());
        let eps = g.constant(noise.clone());
        let layer = |g: &mut Graph, x, i: usize, act: bool| {
            let y = g.matmul(x, vars[i]);
            let y = g.add_row(y, vars[i + 1]);
            if act {
                g.tanh(y)
            } else {
                y
            }
        };
        let e1 = layer(g, x, ENC, true);
        let e2 = layer(g, e1, ENC + 2, true);
        let out = layer(g, e2, ENC + 4, false);
        let mu = g.slice_cols(out, 0, k);
        let pre = g.slice_cols(out, k, k);
        let log_sigma = g.clamp(pre, SIGMA_MIN.ln(), SIGMA_MAX.ln());
        let sigma = g.exp(log_sigma);
        let spread = g.mul(sigma, eps);
        let z = g.add(mu, spread);
        let d1 = layer(g, z, DEC, true);
        let d2 = layer(g, d1, DEC + 2, true);
        let recon_x = layer(g, d2, DEC + 4, false);
        let diff = g.sub(x, recon_x);
        let sq = g.square(diff);
        let rs = g.sum(sq);
        let recon = g.scale(rs, 1.0 / n);
        // 0.5 Σ (μ² + σ² − 2 log σ − 1)
        let mu2 = g.square(mu);
        let s2 = g.square(sigma);
        let a = g.add(mu2, s2);
        let b = g.scale(log_sigma, 2.0);
        let terms = g.sub(a, b);
        let ts = g.sum(terms);
        let kl_sum = g.scale(ts, 0.5);
        let kl_raw = g.scale(kl_sum, 1.0 / n);
        let kl = g.map(kl_raw, "kl_shift", |_, v| (v - 0.5 * k as f64, 1.0));
        let weighted = g.scale(kl, self.config.beta);
        let loss = g.add(recon, weighted);
        Ok((loss, recon, kl))
    }

    pub fn to_section(&self, name: &str) -> Section {
        let c = &self.config;
        Section {
            name: name.to_string(),
            hyper: vec![
                ("input_dim".into(), self.d.to_string()),
                ("latent_dim".into(), c.latent_dim.to_string()),
                ("hidden".into(), c.hidden.to_string()),
                ("beta".into(), format!("{:?}", c.beta)),
            ],
            params: self.params.clone(),
        }
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let config = VaeConfig {
            latent_dim: section.hyper_usize("latent_dim")?,
            hidden: section.hyper_usize("hidden")?,
            beta: section.hyper_f64("beta")?,
            ..VaeConfig::default()
        };
        let mut vae = Self::new(section.hyper_usize("input_dim")?, config, &mut seeding::stream(0, &[]))?;
        vae.params
            .assign(&section.params)
            .map_err(|_| Error::Format { what: "checkpoint", msg: format!("section {:?} does not match the VAE layout", section.name) })?;
        Ok(vae)
    }
}

/// `z = μ + σ ⊙ noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != post.mu.len() || post.sigma.len() != post.mu.len() {
        return Err(Error::shape("reparameterize", format!("noise width {} != {}", noise.len(), post.mu.len())));
    }
    Ok(post.mu.iter().zip(&post.sigma).zip(noise).map(|((m, s), e)| m + s * e).collect())
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn kl_divergence(post: &GaussianPosterior) -> Result<f64> {
    if post.sigma.len() != post.mu.len() {
        return Err(Error::shape("kl_divergence", "mu and sigma widths differ"));
    }
    if post.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument("sigma must be positive and finite".into()));
    }
    let kl: f64 = post.mu.iter().zip(&post.sigma).map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0).sum::<f64>() * 0.5;
    Ok(kl.max(0.0))
}

/// Single-datum ELBO loss with gradients for every VAE parameter.
pub fn elbo_loss(h: &[f64], vae: &Vae, noise: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = vae.params.attach(&mut g);
    let (loss, _, _) =
        vae.elbo_graph(&mut g, &vars, &Tensor::matrix(1, h.len(), h.to_vec()), &Tensor::matrix(1, noise.len(), noise.to_vec()))?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.get(*v)).collect()))
}

/// Per-epoch mean ELBO, reconstruction and KL.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeEpoch {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Pooled embedding of each task's question and gold output.
pub fn pooled_corpus(corpus: &[Task], model: &PolicyModel) -> Result<Vec<Vec<f64>>> {
    corpus.iter().map(|t| model.mean_pool(&t.question, &t.gold_output())).collect()
}

/// Fit a VAE to the pooled embeddings of `corpus` under `model`'s (read-only)
/// embedding table.
pub fn train_vae(corpus: &[Task], model: &PolicyModel, config: &VaeConfig, seed: u64) -> Result<(Vae, Vec<VaeEpoch>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("VAE corpus"));
    }
    let data = pooled_corpus(corpus, model)?;
    train_vae_on(&data, config, seed)
}

pub fn train_vae_on(data: &[Vec<f64>], config: &VaeConfig, seed: u64) -> Result<(Vae, Vec<VaeEpoch>)> {
    config.validate()?;
    let d = data.first().ok_or(Error::Empty("VAE corpus"))?.len();
    let mut vae = Vae::new(d, config.clone(), &mut seeding::stream(seed, &[0xae, 0]))?;
    let mut adam = Adam::new(config.lr);
    let k = config.latent_dim;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seeding::stream(seed, &[0xae, 1, epoch as u64]);
        order.shuffle(&mut rng);
        let (mut tot, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let h = Tensor::matrix(chunk.len(), d, chunk.iter().flat_map(|&i| data[i].iter().copied()).collect());
            let noise = Tensor::from_fn(&[chunk.len(), k], |_| rng.sample(StandardNormal));
            let mut g = Graph::new();
            let vars = vae.params.attach(&mut g);
            let (loss, r, q) = vae.elbo_graph(&mut g, &vars, &h, &noise)?;
            let w = chunk.len() as f64;
            tot += g.value(loss).item() * w;
            rec += g.value(r).item() * w;
            kl += g.value(q).item() * w;
            let grads = g.backward(loss)?;
            let mut gs: Vec<_> = vars.iter().map(|v| grads.get(*v)).collect();
            clip_grad_norm(&mut gs, 10.0);
            adam.step(vae.params.tensors_mut(), &gs)?;
        }
        let n = data.len() as f64;
        log.push(VaeEpoch { loss: tot / n, recon: rec / n, kl: kl / n });
    }
    Ok((vae, log))
}
