//! Latents to prefixes: prior and region sampling, tiling, and input
//! assembly.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette_vae::Vae;
use crate::tasks::{Domain, Task};
use crate::toy_lm::{PolicyModel, Token};

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Prior,
    Biased(Domain),
    Explicit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// One latent per row.
    #[default]
    Independent,
    /// One latent decoded once and repeated.
    Tiled,
}

impl FromStr for PrefixMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "tiled" => Ok(Self::Tiled),
            _ => Err(Error::InvalidArgument(format!("unknown prefix mode {s:?}"))),
        }
    }
}

impl fmt::Display for PrefixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::Tiled => "tiled",
        })
    }
}

/// `L × d` prefix rows with the latent behind each row.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixEmbeddings {
    rows: Vec<Vec<f64>>,
    latents: Vec<Vec<f64>>,
    provenance: Provenance,
}

impl PrefixEmbeddings {
    pub fn empty() -> Self {
        Self { rows: Vec::new(), latents: Vec::new(), provenance: Provenance::Explicit }
    }

    /// Decode each latent into one row.
    pub fn from_latents(vae: &Vae, latents: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let rows = latents.iter().map(|z| vae.decode(z)).collect::<Result<_>>()?;
        Ok(Self { rows, latents, provenance })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Latent for each row (repeated entries in tiled mode).
    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Coordinate-wise Gaussian summary of one domain's latents.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainRegion {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub sample_count: usize,
}

impl DomainRegion {
    pub fn standard(k: usize) -> Self {
        Self { mean: vec![0.0; k], variance: vec![1.0; k], sample_count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn draw_latent<R: Rng + ?Sized>(mean: &[f64], std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter().zip(std).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_prefix<R: Rng + ?Sized>(
    vae: &Vae,
    mean: &[f64],
    std: &[f64],
    len: usize,
    mode: PrefixMode,
    provenance: Provenance,
    rng: &mut R,
) -> Result<PrefixEmbeddings> {
    let latents = match mode {
        PrefixMode::Independent => (0..len).map(|_| draw_latent(mean, std, rng)).collect(),
        PrefixMode::Tiled if len == 0 => Vec::new(),
        PrefixMode::Tiled => vec![draw_latent(mean, std, rng); len],
    };
    if mode == PrefixMode::Tiled && len > 0 {
        let row = vae.decode(&latents[0])?;
        return Ok(PrefixEmbeddings { rows: vec![row; len], latents, provenance });
    }
    PrefixEmbeddings::from_latents(vae, latents, provenance)
}

/// Decode `len` prior draws `z ~ N(0, I)`.
pub fn sample_prefix<R: Rng + ?Sized>(vae: &Vae, len: usize, mode: PrefixMode, rng: &mut R) -> Result<PrefixEmbeddings> {
    let k = vae.latent_dim();
    draw_prefix(vae, &vec![0.0; k], &vec![1.0; k], len, mode, Provenance::Prior, rng)
}

/// Decode `len` draws from `N(region.mean, diag(region.variance))`.
pub fn sample_biased<R: Rng + ?Sized>(
    region: &DomainRegion,
    domain: Domain,
    vae: &Vae,
    len: usize,
    mode: PrefixMode,
    rng: &mut R,
) -> Result<PrefixEmbeddings> {
    if region.dim() != vae.latent_dim() || region.variance.len() != region.dim() {
        return Err(Error::shape("sample_biased", format!("region width {} != latent width {}", region.dim(), vae.latent_dim())));
    }
    if region.variance.iter().chain(&region.mean).any(|v| !v.is_finite()) || region.variance.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("region has invalid moments".into()));
    }
    let std: Vec<f64> = region.variance.iter().map(|v| v.sqrt()).collect();
    draw_prefix(vae, &region.mean, &std, len, mode, Provenance::Biased(domain), rng)
}

/// Population mean and variance per coordinate, variance floored.
pub fn fit_region(latents: &[Vec<f64>]) -> Result<DomainRegion> {
    let first = latents.first().ok_or(Error::Empty("fit_region latents"))?;
    let k = first.len();
    if latents.iter().any(|z| z.len() != k) {
        return Err(Error::shape("fit_region", "latents differ in width"));
    }
    let n = latents.len() as f64;
    let mut mean = vec![0.0; k];
    for z in latents {
        mean.iter_mut().zip(z).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut variance = vec![0.0; k];
    for z in latents {
        variance.iter_mut().zip(z.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    variance.iter_mut().for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
    Ok(DomainRegion { mean, variance, sample_count: latents.len() })
}

/// `[prefix rows; ℰ(question)]`.
pub fn assemble_input(prefix: &PrefixEmbeddings, question: &[Token], model: &PolicyModel) -> Result<Vec<Vec<f64>>> {
    let len = prefix.len() + question.len();
    if len > model.config().max_len {
        return Err(Error::LengthOverflow { len, max: model.config().max_len });
    }
    if let Some(r) = prefix.rows().iter().find(|r| r.len() != model.d_model()) {
        return Err(Error::shape("assemble_input", format!("prefix width {} != d_model {}", r.len(), model.d_model())));
    }
    let vocab = model.config().vocab_size;
    if let Some(t) = question.iter().find(|t| t.index() >= vocab) {
        return Err(Error::OutOfVocab(t.index()));
    }
    Ok(model.embed_input(prefix.rows(), question))
}

/// Posterior means of the pooled embeddings of `tasks`.
pub fn encode_tasks(tasks: &[Task], model: &PolicyModel, vae: &Vae) -> Result<Vec<Vec<f64>>> {
    tasks.iter().map(|t| Ok(vae.encode(&model.mean_pool(&t.question, &t.gold_output())?)?.mu)).collect()
}

/// One region per domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionStore {
    pub regions: Vec<(Domain, DomainRegion)>,
}

impl RegionStore {
    /// Fit a region to the encoded latents of each domain present in `tasks`.
    pub fn fit(tasks: &[Task], model: &PolicyModel, vae: &Vae) -> Result<Self> {
        let latents = encode_tasks(tasks, model, vae)?;
        let mut regions = Vec::new();
        for d in Domain::ALL {
            let zs: Vec<_> = tasks.iter().zip(&latents).filter(|(t, _)| t.domain == d).map(|(_, z)| z.clone()).collect();
            if !zs.is_empty() {
                regions.push((d, fit_region(&zs)?));
            }
        }
        Ok(Self { regions })
    }

    pub fn get(&self, d: Domain) -> Option<&DomainRegion> {
        self.regions.iter().find(|(x, _)| *x == d).map(|(_, r)| r)
    }

    /// Tab-separated: domain, sample count, comma-joined means, comma-joined
    /// variances. Values use shortest round-trip formatting.
    pub fn write(&self, path: &Path) -> Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(f, "domain\tsample_count\tmean\tvariance").map_err(|e| Error::io(path, e))?;
        for (d, r) in &self.regions {
            writeln!(f, "{d}\t{}\t{}\t{}", r.sample_count, join(&r.mean), join(&r.variance)).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, msg: &str| Error::Format { what: "region store", msg: format!("line {line}: {msg}") };
        let mut regions = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(i + 1, "expected 4 fields"));
            }
            let nums = |s: &str| s.split(',').map(|x| x.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
            let mean = nums(fields[2]).map_err(|_| bad(i + 1, "bad mean"))?;
            let variance = nums(fields[3]).map_err(|_| bad(i + 1, "bad variance"))?;
            if mean.len() != variance.len() {
                return Err(bad(i + 1, "mean and variance widths differ"));
            }
            let sample_count = fields[1].parse().map_err(|_| bad(i + 1, "bad sample count"))?;
            regions.push((fields[0].parse()?, DomainRegion { mean, variance, sample_count }));
        }
        Ok(Self { regions })
    }
}
