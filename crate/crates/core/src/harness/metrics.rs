use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::tasks::Domain;
use crate::toy_lm::{Token, Vocabulary};

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Unbiased `1 − C(n−c, k) / C(n, k)` for one task.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("pass@k needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if c > n {
        return Err(Error::InvalidArgument(format!("{c} correct out of {n} samples")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    Ok(1.0 - (ln_choose(n - c, k) - ln_choose(n, k)).exp())
}

/// Mean of [`pass_at_k`] over `(n, c)` per task.
pub fn mean_pass_at_k(counts: &[(usize, usize)], k: usize) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Empty("pass@k tasks"));
    }
    let mut total = 0.0;
    for &(n, c) in counts {
        total += pass_at_k(n, c, k)?;
    }
    Ok(total / counts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceStyle {
    Domain(Domain),
    Other,
}

fn grammars() -> &'static [(Domain, Regex); 3] {
    static G: OnceLock<[(Domain, Regex); 3]> = OnceLock::new();
    G.get_or_init(|| {
        let re = |s: &str| Regex::new(s).expect("static pattern");
        [
            (Domain::ModAdd, re(r"^[0-9]+\+[0-9]+=[0-9]+(;[0-9]+\+[0-9]+=[0-9]+)*;[0-9]+mod[0-9]+=[0-9]+$")),
            (Domain::SortK, re(r"^([0-9][0-9](,[0-9][0-9])*)?$")),
            (Domain::Lookup, re(r"^[a-h](>[a-h])*>[0-9]$")),
        ]
    })
}

/// Style of the reasoning trace (tokens before `<ans>`, or the whole output
/// when there is none).
pub fn trace_style(output: &[Token]) -> TraceStyle {
    let end = output.iter().position(|t| *t == Token::ANSWER).unwrap_or(output.len());
    let trace = &output[..end];
    if trace.contains(&Token::EOS) || trace.contains(&Token::PAD) {
        return TraceStyle::Other;
    }
    let text = Vocabulary::standard().render(trace);
    grammars().iter().find(|(_, re)| re.is_match(&text)).map_or(TraceStyle::Other, |(d, _)| TraceStyle::Domain(*d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diversity {
    /// Number of distinct styles present, `Other` included.
    pub distinct_trace_styles: usize,
    /// Unique 4-grams over total 4-grams across outputs; 0 when no output
    /// has four tokens.
    pub distinct_ngram_ratio: f64,
}

pub const NGRAM: usize = 4;

pub fn strategy_diversity(outputs: &[Vec<Token>]) -> Result<Diversity> {
    if outputs.is_empty() {
        return Err(Error::Empty("diversity outputs"));
    }
    let styles: HashSet<TraceStyle> = outputs.iter().map(|o| trace_style(o)).collect();
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for o in outputs {
        for w in o.windows(NGRAM) {
            unique.insert(w.to_vec());
            total += 1;
        }
    }
    let ratio = if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 };
    Ok(Diversity { distinct_trace_styles: styles.len(), distinct_ngram_ratio: ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<Token> {
        Vocabulary::standard().parse(s).unwrap()
    }

    #[test]
    fn pass_at_k_examples() {
        assert!((pass_at_k(4, 1, 2).unwrap() - 0.5).abs() < 1e-12);
        for k in 1..=5 {
            assert_eq!(pass_at_k(5, 0, k).unwrap(), 0.0);
            assert_eq!(pass_at_k(5, 5, k).unwrap(), 1.0);
        }
        assert_eq!(pass_at_k(6, 1, 6).unwrap(), 1.0);
        assert!(pass_at_k(3, 1, 4).is_err());
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!((pass_at_k(200, 3, 100).unwrap() - (1.0 - (100.0 * 99.0 * 98.0) / (200.0 * 199.0 * 198.0))).abs() < 1e-12);
    }

    #[test]
    fn trace_styles() {
        assert_eq!(trace_style(&t("2+5=7;7mod3=1<ans>1<eos>")), TraceStyle::Domain(Domain::ModAdd));
        assert_eq!(trace_style(&t("53,31<ans>135<eos>")), TraceStyle::Domain(Domain::SortK));
        assert_eq!(trace_style(&t("<ans>12<eos>")), TraceStyle::Domain(Domain::SortK));
        assert_eq!(trace_style(&t("a>c>5<ans>5<eos>")), TraceStyle::Domain(Domain::Lookup));
        assert_eq!(trace_style(&t("a>+<ans>5<eos>")), TraceStyle::Other);
        assert_eq!(trace_style(&t("2+5=7<eos>")), TraceStyle::Other);
    }

    #[test]
    fn diversity_examples() {
        let one = t("2+5=7;7mod3=1");
        let d = strategy_diversity(&vec![one.clone(); 3]).unwrap();
        let grams = one.len() - 3;
        let uniq: HashSet<_> = one.windows(4).collect();
        assert!((d.distinct_ngram_ratio - uniq.len() as f64 / (3 * grams) as f64).abs() < 1e-12);
        assert_eq!(d.distinct_trace_styles, 1);
        let disjoint = [t("1234"), t("abcd"), t("5678")];
        assert_eq!(strategy_diversity(&disjoint).unwrap().distinct_ngram_ratio, 1.0);
        // 1234 2345 | 2345 3456 | a>b> >b>1: five distinct among six.
        let corpus = [t("12345"), t("23456"), t("a>b>1")];
        let d = strategy_diversity(&corpus).unwrap();
        assert!((d.distinct_ngram_ratio - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(d.distinct_trace_styles, 2);
        assert!(strategy_diversity(&[]).is_err());
    }
}
