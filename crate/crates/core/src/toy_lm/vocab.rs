use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the fixed [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u16);

impl Token {
    pub const PAD: Token = Token(0);
    pub const EOS: Token = Token(1);
    pub const ANSWER: Token = Token(2);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

const SYMBOLS: &[&str] = &[
    "<pad>", "<eos>", "<ans>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=", ";", "mod", "sort", ",", ">", ":", "?", "a",
    "b", "c", "d", "e", "f", "g", "h", "<MODADD>", "<SORTK>", "<LOOKUP>",
];

/// Fixed, enumerable token inventory. `<pad>` is always index 0.
#[derive(Debug)]
pub struct Vocabulary {
    symbols: &'static [&'static str],
    index: HashMap<&'static str, Token>,
    max_symbol_len: usize,
}

impl Vocabulary {
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let index = SYMBOLS.iter().enumerate().map(|(i, s)| (*s, Token(i as u16))).collect::<HashMap<_, _>>();
            assert_eq!(index.len(), SYMBOLS.len(), "vocabulary symbols must be unique");
            let max_symbol_len = SYMBOLS.iter().map(|s| s.len()).max().unwrap_or(1);
            Vocabulary { symbols: SYMBOLS, index, max_symbol_len }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, t: Token) -> &'static str {
        self.symbols[t.index()]
    }

    pub fn token(&self, symbol: &str) -> Option<Token> {
        self.index.get(symbol).copied()
    }

    /// Token for a symbol known to exist; panics otherwise.
    pub fn tok(&self, symbol: &str) -> Token {
        self.token(symbol).unwrap_or_else(|| panic!("symbol {symbol:?} not in vocabulary"))
    }

    pub fn digit(&self, d: u32) -> Token {
        assert!(d < 10);
        Token(3 + d as u16)
    }

    pub fn as_digit(&self, t: Token) -> Option<u32> {
        (3..13).contains(&t.0).then(|| u32::from(t.0 - 3))
    }

    /// Decimal digits of `n`, most significant first.
    pub fn number(&self, n: u32) -> Vec<Token> {
        n.to_string().chars().map(|c| self.digit(c.to_digit(10).expect("decimal digit"))).collect()
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.len()) {
            Some(t) => Err(Error::OutOfVocab(t.index())),
            None => Ok(()),
        }
    }

    /// Concatenated symbols, no separators.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|t| self.symbols.get(t.index()).copied().unwrap_or("<?>")).collect()
    }

    /// Greedy longest-match tokenization of a rendered string. Whitespace is
    /// ignored.
    pub fn parse(&self, text: &str) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        let mut rest = text.trim_start();
        while !rest.is_empty() {
            let mut matched = None;
            for len in (1..=self.max_symbol_len.min(rest.len())).rev() {
                if let Some(prefix) = rest.get(..len) {
                    if let Some(t) = self.token(prefix) {
                        matched = Some((t, len));
                        break;
                    }
                }
            }
            let (t, len) = matched.ok_or_else(|| Error::Format { what: "token string", msg: format!("no symbol matches at {rest:?}") })?;
            out.push(t);
            rest = rest[len..].trim_start();
        }
        Ok(out)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = Vocabulary::standard();
        match v.symbols.get(self.index()) {
            Some(s) => f.write_str(s),
            None => write!(f, "<{}>", self.0),
        }
    }
}
