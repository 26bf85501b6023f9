//! Synthetic verifiable-reward tasks in three domains with distinct trace
//! styles.
//!
//! - `MODADD`: `2+5+9mod7?` → `2+5=7;7+9=16;16mod7=2` `<ans>` `2`
//! - `SORTK`: `sort5381?` → bubble-sort swap log `53,83,81,51,31` `<ans>` `1358`
//! - `LOOKUP`: `a:c,b:7,c:5>a?` → hop chain `a>c>5` `<ans>` `5`
//!
//! Questions carry no domain tag token.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::toy_lm::{Token, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    ModAdd,
    SortK,
    Lookup,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::ModAdd, Domain::SortK, Domain::Lookup];

    pub fn name(self) -> &'static str {
        match self {
            Domain::ModAdd => "MODADD",
            Domain::SortK => "SORTK",
            Domain::Lookup => "LOOKUP",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Tag token for this domain (used in reports, never in questions).
    pub fn tag(self) -> Token {
        Vocabulary::standard().tok(match self {
            Domain::ModAdd => "<MODADD>",
            Domain::SortK => "<SORTK>",
            Domain::Lookup => "<LOOKUP>",
        })
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MODADD" => Ok(Domain::ModAdd),
            "SORTK" => Ok(Domain::SortK),
            "LOOKUP" => Ok(Domain::Lookup),
            other => Err(Error::UnknownDomain(other.to_string())),
        }
    }
}

/// Difficulty knobs.
pub const MODADD_TERMS: std::ops::RangeInclusive<usize> = 3..=5;
pub const MODADD_MODULI: std::ops::RangeInclusive<u32> = 3..=13;
pub const SORTK_LEN: std::ops::RangeInclusive<usize> = 4..=6;
pub const LOOKUP_HOPS: std::ops::RangeInclusive<usize> = 2..=3;
pub const LOOKUP_MAX_KEYS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub domain: Domain,
    pub question: Vec<Token>,
    pub trace: Vec<Token>,
    pub answer: Vec<Token>,
    pub seed_id: u64,
}

impl Task {
    /// `trace <ans> answer <eos>`.
    pub fn gold_output(&self) -> Vec<Token> {
        let mut out = self.trace.clone();
        out.push(Token::ANSWER);
        out.extend_from_slice(&self.answer);
        out.push(Token::EOS);
        out
    }
}

fn modadd(rng: &mut impl Rng, seed_id: u64) -> Task {
    let v = Vocabulary::standard();
    let n = rng.random_range(MODADD_TERMS);
    let m = rng.random_range(MODADD_MODULI);
    let terms: Vec<u32> = (0..n).map(|_| rng.random_range(0..10)).collect();
    build_modadd(&terms, m, seed_id, v)
}

fn build_modadd(terms: &[u32], m: u32, seed_id: u64, v: &Vocabulary) -> Task {
    let (plus, eq, semi, md, q) = (v.tok("+"), v.tok("="), v.tok(";"), v.tok("mod"), v.tok("?"));
    let mut question = Vec::new();
    for (i, t) in terms.iter().enumerate() {
        if i > 0 {
            question.push(plus);
        }
        question.extend(v.number(*t));
    }
    question.push(md);
    question.extend(v.number(m));
    question.push(q);

    let mut trace = Vec::new();
    let mut acc = terms[0];
    for t in &terms[1..] {
        trace.extend(v.number(acc));
        trace.push(plus);
        trace.extend(v.number(*t));
        trace.push(eq);
        acc += t;
        trace.extend(v.number(acc));
        trace.push(semi);
    }
    trace.extend(v.number(acc));
    trace.push(md);
    trace.extend(v.number(m));
    trace.push(eq);
    let r = acc % m;
    trace.extend(v.number(r));
    Task { domain: Domain::ModAdd, question, trace, answer: v.number(r), seed_id }
}

fn bubble_swaps(list: &[u32]) -> (Vec<(u32, u32)>, Vec<u32>) {
    let mut a = list.to_vec();
    let mut swaps = Vec::new();
    for end in (1..a.len()).rev() {
        for i in 0..end {
            if a[i] > a[i + 1] {
                swaps.push((a[i], a[i + 1]));
                a.swap(i, i + 1);
            }
        }
    }
    (swaps, a)
}

fn sortk(rng: &mut impl Rng, seed_id: u64) -> Task {
    let v = Vocabulary::standard();
    let len = rng.random_range(SORTK_LEN);
    let list: Vec<u32> = (0..len).map(|_| rng.random_range(0..10)).collect();
    let mut question = vec![v.tok("sort")];
    question.extend(list.iter().map(|&d| v.digit(d)));
    question.push(v.tok("?"));
    let (swaps, sorted) = bubble_swaps(&list);
    let mut trace = Vec::new();
    for (i, (x, y)) in swaps.iter().enumerate() {
        if i > 0 {
            trace.push(v.tok(","));
        }
        trace.push(v.digit(*x));
        trace.push(v.digit(*y));
    }
    let answer = sorted.iter().map(|&d| v.digit(d)).collect();
    Task { domain: Domain::SortK, question, trace, answer, seed_id }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Target {
    Key(u32),
    Digit(u32),
}

fn key_token(v: &Vocabulary, k: u32) -> Token {
    v.tok(["a", "b", "c", "d", "e", "f", "g", "h"][k as usize])
}

fn key_index(v: &Vocabulary, t: Token) -> Option<u32> {
    let a = v.tok("a").0;
    (a..a + LOOKUP_MAX_KEYS as u16).contains(&t.0).then(|| u32::from(t.0 - a))
}

fn lookup(rng: &mut impl Rng, seed_id: u64) -> Task {
    let v = Vocabulary::standard();
    let hops = rng.random_range(LOOKUP_HOPS);
    let n_keys = rng.random_range(hops.max(4)..=LOOKUP_MAX_KEYS);
    let mut keys: Vec<u32> = (0..LOOKUP_MAX_KEYS as u32).collect();
    keys.shuffle(rng);
    keys.truncate(n_keys);
    let chain = &keys[..hops];
    let value = rng.random_range(0..10);
    let mut pairs: Vec<(u32, Target)> = Vec::with_capacity(n_keys);
    for i in 0..hops {
        let target = if i + 1 < hops { Target::Key(chain[i + 1]) } else { Target::Digit(value) };
        pairs.push((chain[i], target));
    }
    for &k in &keys[hops..] {
        let target =
            if rng.random_bool(0.5) { Target::Digit(rng.random_range(0..10)) } else { Target::Key(keys[rng.random_range(0..n_keys)]) };
        pairs.push((k, target));
    }
    pairs.shuffle(rng);

    let mut question = Vec::new();
    for (i, (k, t)) in pairs.iter().enumerate() {
        if i > 0 {
            question.push(v.tok(","));
        }
        question.push(key_token(v, *k));
        question.push(v.tok(":"));
        question.push(match t {
            Target::Key(k2) => key_token(v, *k2),
            Target::Digit(d) => v.digit(*d),
        });
    }
    question.push(v.tok(">"));
    question.push(key_token(v, chain[0]));
    question.push(v.tok("?"));

    let mut trace = Vec::new();
    for (i, k) in chain.iter().enumerate() {
        if i > 0 {
            trace.push(v.tok(">"));
        }
        trace.push(key_token(v, *k));
    }
    trace.push(v.tok(">"));
    trace.push(v.digit(value));
    Task { domain: Domain::Lookup, question, trace, answer: vec![v.digit(value)], seed_id }
}

/// One task drawn from `rng`.
pub fn generate_task(domain: Domain, rng: &mut impl Rng, seed_id: u64) -> Task {
    match domain {
        Domain::ModAdd => modadd(rng, seed_id),
        Domain::SortK => sortk(rng, seed_id),
        Domain::Lookup => lookup(rng, seed_id),
    }
}

/// `n` tasks of one domain, deterministic in `(domain, n, seed)`.
pub fn generate_dataset(domain: Domain, n: usize, seed: u64) -> Result<Vec<Task>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| {
            let mut rng = seeding::stream(seed, &[0x7a5c, domain.index() as u64, i]);
            generate_task(domain, &mut rng, i)
        })
        .collect())
}

/// Like [`generate_dataset`] but taking the domain by name.
pub fn generate_dataset_named(domain: &str, n: usize, seed: u64) -> Result<Vec<Task>> {
    generate_dataset(domain.parse()?, n, seed)
}

/// Balanced mixture of all domains, `per_domain` each, interleaved.
pub fn generate_mixed(per_domain: usize, seed: u64) -> Result<Vec<Task>> {
    let sets: Vec<Vec<Task>> = Domain::ALL.iter().map(|d| generate_dataset(*d, per_domain, seed)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(per_domain * 3);
    for i in 0..per_domain {
        for s in &sets {
            out.push(s[i].clone());
        }
    }
    Ok(out)
}

fn read_number(toks: &[Token], pos: &mut usize, v: &Vocabulary) -> Option<u32> {
    let start = *pos;
    let mut n: u32 = 0;
    while let Some(d) = toks.get(*pos).and_then(|t| v.as_digit(*t)) {
        n = n.checked_mul(10)?.checked_add(d)?;
        *pos += 1;
    }
    (*pos > start).then_some(n)
}

/// Domain and ground-truth answer recovered from a question alone.
pub fn solve(question: &[Token]) -> Option<(Domain, Vec<Token>)> {
    let v = Vocabulary::standard();
    let (q, sort, colon) = (v.tok("?"), v.tok("sort"), v.tok(":"));
    if question.last() != Some(&q) {
        return None;
    }
    let body = &question[..question.len() - 1];
    if body.first() == Some(&sort) {
        let mut digits: Vec<u32> = body[1..].iter().map(|t| v.as_digit(*t)).collect::<Option<_>>()?;
        if digits.is_empty() {
            return None;
        }
        digits.sort_unstable();
        return Some((Domain::SortK, digits.into_iter().map(|d| v.digit(d)).collect()));
    }
    if body.contains(&colon) {
        let (gt, comma) = (v.tok(">"), v.tok(","));
        let split = body.iter().rposition(|t| *t == gt)?;
        let (pairs, query) = (&body[..split], &body[split + 1..]);
        if query.len() != 1 {
            return None;
        }
        let mut map = [None; LOOKUP_MAX_KEYS];
        for chunk in pairs.split(|t| *t == comma) {
            if chunk.len() != 3 || chunk[1] != colon {
                return None;
            }
            let k = key_index(v, chunk[0])? as usize;
            let target = match (key_index(v, chunk[2]), v.as_digit(chunk[2])) {
                (Some(k2), _) => Target::Key(k2),
                (None, Some(d)) => Target::Digit(d),
                _ => return None,
            };
            map[k] = Some(target);
        }
        let mut cur = key_index(v, query[0])?;
        for _ in 0..=LOOKUP_MAX_KEYS {
            match map[cur as usize]? {
                Target::Key(k) => cur = k,
                Target::Digit(d) => return Some((Domain::Lookup, vec![v.digit(d)])),
            }
        }
        return None;
    }
    // MODADD: n (+ n)* mod m
    let (plus, md) = (v.tok("+"), v.tok("mod"));
    let mut pos = 0;
    let mut sum = read_number(body, &mut pos, v)?;
    while body.get(pos) == Some(&plus) {
        pos += 1;
        sum = sum.checked_add(read_number(body, &mut pos, v)?)?;
    }
    if body.get(pos) != Some(&md) {
        return None;
    }
    pos += 1;
    let m = read_number(body, &mut pos, v)?;
    if pos != body.len() || m == 0 {
        return None;
    }
    Some((Domain::ModAdd, v.number(sum % m)))
}

/// Tokens after the first `<ans>` marker up to `<eos>` (or the end).
pub fn answer_span(output: &[Token]) -> Option<&[Token]> {
    let start = output.iter().position(|t| *t == Token::ANSWER)? + 1;
    let rest = &output[start..];
    let end = rest.iter().position(|t| *t == Token::EOS).unwrap_or(rest.len());
    Some(&rest[..end])
}

/// Binary outcome reward: 1 iff the answer span equals the ground truth.
/// Total: any malformed input scores 0.
pub fn verify(question: &[Token], output: &[Token]) -> f64 {
    let Some((_, truth)) = solve(question) else { return 0.0 };
    match answer_span(output) {
        Some(span) if span == truth.as_slice() => 1.0,
        _ => 0.0,
    }
}

/// Tab-separated `domain  question  trace  answer`, one task per line.
pub fn write_dataset(path: &Path, tasks: &[Task]) -> Result<()> {
    let v = Vocabulary::standard();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in tasks {
        writeln!(f, "{}\t{}\t{}\t{}", t.domain, v.render(&t.question), v.render(&t.trace), v.render(&t.answer))
            .map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Task>> {
    let v = Vocabulary::standard();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format { what: "dataset line", msg: format!("line {}: expected 4 fields", i + 1) });
        }
        out.push(Task {
            domain: fields[0].parse()?,
            question: v.parse(fields[1])?,
            trace: v.parse(fields[2])?,
            answer: v.parse(fields[3])?,
            seed_id: i as u64,
        });
    }
    Ok(out)
}
