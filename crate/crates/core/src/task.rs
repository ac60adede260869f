//! Modular-arithmetic trial items: `AB ≡ CD (mod E)`.
//!
//! A question is *true* when `AB - CD` is divisible by `E`. Questions are
//! encoded character by character from the canonical string `"AB=CD%E"`
//! into a fixed-length token sequence (see [`Vocabulary`]).

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const OPERAND_MIN: u8 = 10;
pub const OPERAND_MAX: u8 = 99;
pub const MODULUS_MIN: u8 = 2;
pub const MODULUS_MAX: u8 = 9;

/// Number of answer classes: signed remainders `-8..=8`.
pub const NUM_CLASSES: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MathQuestion {
    pub ab: u8,
    pub cd: u8,
    pub e: u8,
}

impl MathQuestion {
    pub fn new(ab: u8, cd: u8, e: u8) -> Result<Self> {
        if !(OPERAND_MIN..=OPERAND_MAX).contains(&ab) || !(OPERAND_MIN..=OPERAND_MAX).contains(&cd) {
            return Err(Error::InvalidInput(format!(
                "operands must be two-digit numbers, got {ab} and {cd}"
            )));
        }
        if !(MODULUS_MIN..=MODULUS_MAX).contains(&e) {
            return Err(Error::InvalidInput(format!("modulus must be in 2..=9, got {e}")));
        }
        Ok(Self { ab, cd, e })
    }

    pub fn difference(&self) -> i32 {
        i32::from(self.ab) - i32::from(self.cd)
    }

    /// Whether `ab - cd` is divisible by `e`.
    pub fn truth(&self) -> bool {
        ground_truth(self)
    }

    /// Remainder of `ab - cd` carrying the sign of the difference, in `-8..=8`.
    pub fn signed_remainder(&self) -> i32 {
        self.difference() % i32::from(self.e)
    }

    /// Answer class id in `0..17`; class 8 is remainder zero.
    pub fn label(&self) -> usize {
        (self.signed_remainder() + 8) as usize
    }

    /// Every valid question, in lexicographic `(ab, cd, e)` order.
    pub fn all() -> impl Iterator<Item = MathQuestion> {
        (OPERAND_MIN..=OPERAND_MAX).flat_map(|ab| {
            (OPERAND_MIN..=OPERAND_MAX)
                .flat_map(move |cd| (MODULUS_MIN..=MODULUS_MAX).map(move |e| MathQuestion { ab, cd, e }))
        })
    }
}

impl fmt::Display for MathQuestion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}%{}", self.ab, self.cd, self.e)
    }
}

/// `(ab - cd) mod e == 0`, using the mathematical (sign-independent) modulus.
pub fn ground_truth(q: &MathQuestion) -> bool {
    q.difference().rem_euclid(i32::from(q.e)) == 0
}

/// Class id for a signed remainder in `-8..=8`.
pub fn class_of_remainder(rem: i32) -> usize {
    debug_assert!((-8..=8).contains(&rem));
    (rem + 8) as usize
}

pub const ENCODED_LEN: usize = 8;

/// Character-level token table. Version 1 maps digits to `0..=9`,
/// `'='` to 10, `'%'` to 11 and uses 12 for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub version: u32,
    symbols: Vec<String>,
}

pub const PAD_TOKEN: u8 = 12;
pub const VOCAB_SIZE: usize = 13;

impl Default for Vocabulary {
    fn default() -> Self {
        let mut symbols: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        symbols.push("=".into());
        symbols.push("%".into());
        symbols.push("<pad>".into());
        Self { version: 1, symbols }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn token(&self, c: char) -> Option<u8> {
        let s = c.to_string();
        self.symbols.iter().position(|x| *x == s).map(|i| i as u8)
    }

    pub fn symbol(&self, token: u8) -> Option<&str> {
        self.symbols.get(token as usize).map(String::as_str)
    }

    /// Text form: a version line followed by one `id<TAB>symbol` line per token.
    pub fn to_text(&self) -> String {
        let mut out = format!("dualrl-vocabulary v{}\n", self.version);
        for (i, s) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{i}\t{s}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let version = header
            .strip_prefix("dualrl-vocabulary v")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("bad vocabulary header {header:?}")))?;
        let mut symbols = Vec::new();
        for (expected, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let (id, sym) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidInput(format!("bad vocabulary line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(Error::InvalidInput(format!("vocabulary ids must be dense, at {line:?}")));
            }
            symbols.push(sym.to_string());
        }
        Ok(Self { version, symbols })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodedQuestion {
    pub tokens: [u8; ENCODED_LEN],
}

pub fn encode_question(q: &MathQuestion) -> EncodedQuestion {
    let vocab = Vocabulary::default();
    let mut tokens = [PAD_TOKEN; ENCODED_LEN];
    for (slot, c) in tokens.iter_mut().zip(q.to_string().chars()) {
        *slot = vocab.token(c).expect("canonical string uses vocabulary symbols");
    }
    EncodedQuestion { tokens }
}

pub fn decode_question(enc: &EncodedQuestion) -> Result<MathQuestion> {
    let vocab = Vocabulary::default();
    let s: String = enc
        .tokens
        .iter()
        .filter(|&&t| t != PAD_TOKEN)
        .map(|&t| vocab.symbol(t).unwrap_or("?"))
        .collect();
    let bad = || Error::InvalidInput(format!("undecodable token string {s:?}"));
    let (ab, rest) = s.split_once('=').ok_or_else(bad)?;
    let (cd, e) = rest.split_once('%').ok_or_else(bad)?;
    MathQuestion::new(ab.parse().map_err(|_| bad())?, cd.parse().map_err(|_| bad())?, e.parse().map_err(|_| bad())?)
}

impl EncodedQuestion {
    /// Position-aware one-hot: slot `p * VOCAB_SIZE + token` is set for each position.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; ENCODED_LEN * VOCAB_SIZE];
        for (p, &t) in self.tokens.iter().enumerate() {
            v[p * VOCAB_SIZE + t as usize] = 1.0;
        }
        v
    }
}

/// Seeded question source with rejection sampling towards a true-rate target.
pub struct QuestionGenerator {
    rng: ChaCha8Rng,
    true_rate: f64,
}

impl QuestionGenerator {
    pub fn new(seed: u64) -> Self {
        Self::with_balance(seed, 0.5)
    }

    pub fn with_balance(seed: u64, true_rate: f64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), true_rate: true_rate.clamp(0.0, 1.0) }
    }

    pub fn generate(&mut self) -> MathQuestion {
        let want = self.rng.random_bool(self.true_rate);
        loop {
            let q = MathQuestion {
                ab: self.rng.random_range(OPERAND_MIN..=OPERAND_MAX),
                cd: self.rng.random_range(OPERAND_MIN..=OPERAND_MAX),
                e: self.rng.random_range(MODULUS_MIN..=MODULUS_MAX),
            };
            if q.truth() == want {
                return q;
            }
        }
    }

    pub fn take(&mut self, n: usize) -> Vec<MathQuestion> {
        (0..n).map(|_| self.generate()).collect()
    }
}

pub fn generate_question<R: Rng + ?Sized>(rng: &mut R) -> MathQuestion {
    let want = rng.random_bool(0.5);
    loop {
        let q = MathQuestion {
            ab: rng.random_range(OPERAND_MIN..=OPERAND_MAX),
            cd: rng.random_range(OPERAND_MIN..=OPERAND_MAX),
            e: rng.random_range(MODULUS_MIN..=MODULUS_MAX),
        };
        if q.truth() == want {
            return q;
        }
    }
}

/// Writes `ab,cd,e,truth` lines with a header row.
pub fn write_bank<W: Write>(mut w: W, bank: &[MathQuestion]) -> Result<()> {
    writeln!(w, "ab,cd,e,truth")?;
    for q in bank {
        writeln!(w, "{},{},{},{}", q.ab, q.cd, q.e, q.truth())?;
    }
    Ok(())
}

pub fn read_bank<R: BufRead>(r: R) -> Result<Vec<MathQuestion>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 && line.starts_with("ab,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::InvalidInput(format!("line {}: expected 4 fields", i + 1)));
        }
        let num = |s: &str| s.trim().parse::<u8>().map_err(|_| Error::InvalidInput(format!("line {}: bad number {s:?}", i + 1)));
        let q = MathQuestion::new(num(f[0])?, num(f[1])?, num(f[2])?)?;
        let truth: bool = f[3].trim().parse().map_err(|_| Error::InvalidInput(format!("line {}: bad truth", i + 1)))?;
        if truth != q.truth() {
            return Err(Error::InvalidInput(format!("line {}: truth column disagrees with {q}", i + 1)));
        }
        out.push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn q(ab: u8, cd: u8, e: u8) -> MathQuestion {
        MathQuestion::new(ab, cd, e).unwrap()
    }

    #[test]
    fn truth_examples() {
        assert!(q(83, 27, 7).truth());
        assert!(!q(84, 27, 7).truth());
        assert!(q(50, 50, 3).truth());
        assert!(q(27, 83, 7).truth());
    }

    #[test]
    fn ground_truth_matches_brute_force_divisibility() {
        let mut n = 0;
        for q in MathQuestion::all() {
            let d = q.difference();
            // divisible iff some multiple of e equals d
            let brute = (-90..=90).any(|k: i32| k * i32::from(q.e) == d);
            assert_eq!(ground_truth(&q), brute, "{q}");
            n += 1;
        }
        assert_eq!(n, 90 * 90 * 8);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(MathQuestion::new(9, 20, 3).is_err());
        assert!(MathQuestion::new(20, 100, 3).is_err());
        assert!(MathQuestion::new(20, 30, 1).is_err());
        assert!(MathQuestion::new(20, 30, 10).is_err());
    }

    #[test]
    fn signed_remainder_labels() {
        assert_eq!(q(83, 27, 7).signed_remainder(), 0);
        assert_eq!(q(84, 27, 7).signed_remainder(), 1);
        assert_eq!(q(27, 84, 7).signed_remainder(), -1);
        assert_eq!(q(99, 10, 9).signed_remainder(), 8);
        assert_eq!(q(10, 99, 9).signed_remainder(), -8);
        assert_eq!(q(10, 99, 9).label(), 0);
        assert_eq!(q(50, 50, 2).label(), 8);
    }

    #[test]
    fn encodes_canonical_string() {
        let enc = encode_question(&q(83, 27, 7));
        assert_eq!(enc.tokens, [8, 3, 10, 2, 7, 11, 7, PAD_TOKEN]);
    }

    #[test]
    fn encoding_is_injective_and_decodable() {
        let mut seen = HashSet::new();
        for q in MathQuestion::all() {
            let enc = encode_question(&q);
            assert_eq!(enc.tokens.len(), ENCODED_LEN);
            assert!(seen.insert(enc.tokens), "collision at {q}");
            assert_eq!(decode_question(&enc).unwrap(), q);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = QuestionGenerator::new(42).take(100);
        let b = QuestionGenerator::new(42).take(100);
        assert_eq!(a, b);
        assert_ne!(a, QuestionGenerator::new(43).take(100));
    }

    #[test]
    fn generator_respects_balance() {
        for target in [0.5, 0.3] {
            let bank = QuestionGenerator::with_balance(7, target).take(10_000);
            let rate = bank.iter().filter(|q| q.truth()).count() as f64 / 10_000.0;
            assert!((rate - target).abs() <= 0.03, "target {target}, got {rate}");
        }
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::default();
        let text = v.to_text();
        assert!(text.starts_with("dualrl-vocabulary v1\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn bank_csv_round_trip() {
        let bank = QuestionGenerator::new(1).take(50);
        let mut buf = Vec::new();
        write_bank(&mut buf, &bank).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("ab,cd,e,truth\n"));
        assert_eq!(read_bank(&buf[..]).unwrap(), bank);
    }
}
