//! Random binary class codes and profile-to-code distances.
//!
//! Bits are drawn from [`SplitMix64`] keyed directly by the seed: bit `j`
//! of class `k` is the most significant bit of output number `k * L + j + 1`.
//! If two rows coincide the whole book is regenerated with `seed + 1`
//! (wrapping), and the seed that produced the final book is recorded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;

/// Seeds tried before `generate` gives up on finding distinct rows. Only
/// books with `K` close to `2^L` come near this.
pub const MAX_GENERATION_ATTEMPTS: u32 = 1 << 20;

/// Tolerance under which two coordinates count as equal for L0.
pub const L0_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    L0,
    L1,
    L2,
    Linf,
    Cosine,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 5] = [
        DistanceMetric::L0,
        DistanceMetric::L1,
        DistanceMetric::L2,
        DistanceMetric::Linf,
        DistanceMetric::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::L0 => "l0",
            DistanceMetric::L1 => "l1",
            DistanceMetric::L2 => "l2",
            DistanceMetric::Linf => "linf",
            DistanceMetric::Cosine => "cosine",
        }
    }

    /// Metrics with a usable gradient almost everywhere.
    pub fn is_differentiable(self) -> bool {
        matches!(self, DistanceMetric::L1 | DistanceMetric::L2 | DistanceMetric::Cosine)
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistanceMetric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Input(format!("unknown distance metric '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CodeBookFile", into = "CodeBookFile")]
pub struct CodeBook {
    num_classes: usize,
    code_length: usize,
    bits: Vec<u8>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeBookFile {
    version: u32,
    num_classes: usize,
    code_length: usize,
    seed: u64,
    bits: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HammingStats {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl CodeBook {
    pub fn generate(num_classes: usize, code_length: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Input(format!("need at least 2 classes, got {num_classes}")));
        }
        if code_length == 0 {
            return Err(Error::Input("code length must be positive".into()));
        }
        if code_length < usize::BITS as usize && (1usize << code_length) < num_classes {
            return Err(Error::InfeasibleCodebook {
                num_classes,
                code_length,
            });
        }
        let mut s = seed;
        for _ in 0..MAX_GENERATION_ATTEMPTS {
            let mut rng = SplitMix64::new(s);
            let bits = (0..num_classes * code_length)
                .map(|_| (rng.next_u64() >> 63) as u8)
                .collect();
            let book = Self {
                num_classes,
                code_length,
                bits,
                seed: s,
            };
            if book.rows_distinct() {
                return Ok(book);
            }
            s = s.wrapping_add(1);
        }
        Err(Error::Degenerate(format!(
            "no book with distinct rows for seeds {seed}..{s} ({num_classes} classes, {code_length} bits)"
        )))
    }

    /// Builds a book from explicit bits; rows must be distinct.
    pub fn from_bits(num_classes: usize, code_length: usize, bits: Vec<u8>, seed: u64) -> Result<Self> {
        if num_classes == 0 || code_length == 0 || bits.len() != num_classes * code_length {
            return Err(Error::dim(format!(
                "{} bits for a {num_classes}x{code_length} codebook",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Input("codebook entries must be 0 or 1".into()));
        }
        let book = Self {
            num_classes,
            code_length,
            bits,
            seed,
        };
        if !book.rows_distinct() {
            return Err(Error::Input("codebook rows are not distinct".into()));
        }
        Ok(book)
    }

    fn rows_distinct(&self) -> bool {
        let mut rows: Vec<&[u8]> = (0..self.num_classes).map(|k| self.code(k)).collect();
        rows.sort_unstable();
        rows.windows(2).all(|w| w[0] != w[1])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    /// Seed that produced the stored bits.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn code(&self, class: usize) -> &[u8] {
        &self.bits[class * self.code_length..(class + 1) * self.code_length]
    }

    pub fn code_f64(&self, class: usize) -> Vec<f64> {
        self.code(class).iter().map(|&b| b as f64).collect()
    }

    /// Codes restricted to a column range. Rows of the result may coincide.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.code_length {
            return Err(Error::Spec(format!(
                "column range {range:?} invalid for code length {}",
                self.code_length
            )));
        }
        let bits = (0..self.num_classes)
            .flat_map(|k| self.code(k)[range.clone()].iter().copied())
            .collect();
        Ok(Self {
            num_classes: self.num_classes,
            code_length: range.len(),
            bits,
            seed: self.seed,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("codebook serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl From<CodeBook> for CodeBookFile {
    fn from(book: CodeBook) -> Self {
        Self {
            version: CODEBOOK_FORMAT_VERSION,
            num_classes: book.num_classes,
            code_length: book.code_length,
            seed: book.seed,
            bits: book.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect(),
        }
    }
}

impl TryFrom<CodeBookFile> for CodeBook {
    type Error = Error;

    fn try_from(file: CodeBookFile) -> Result<Self> {
        if file.version != CODEBOOK_FORMAT_VERSION {
            return Err(Error::Input(format!("unsupported codebook version {}", file.version)));
        }
        let bits = file
            .bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Input(format!("invalid codebook bit '{other}'"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(file.num_classes, file.code_length, bits, file.seed)
    }
}

pub fn distance(u: &[f64], v: &[f64], metric: DistanceMetric) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(format!("distance between lengths {} and {}", u.len(), v.len())));
    }
    let pairs = u.iter().zip(v);
    Ok(match metric {
        DistanceMetric::L0 => pairs.filter(|(a, b)| (*a - *b).abs() > L0_TOLERANCE).count() as f64,
        DistanceMetric::L1 => pairs.map(|(a, b)| (a - b).abs()).sum(),
        DistanceMetric::L2 => pairs.map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        DistanceMetric::Linf => pairs.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        DistanceMetric::Cosine => {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::Degenerate("cosine distance of a zero vector".into()));
            }
            let dot: f64 = pairs.map(|(a, b)| a * b).sum();
            // clamp rounding so that d(u, u) is exactly representable as >= 0
            (1.0 - dot / (nu * nv)).max(0.0)
        }
    })
}

/// Index of the nearest code (smallest index on ties) and its distance.
pub fn nearest_code(profile: &[f64], book: &CodeBook, metric: DistanceMetric) -> Result<(usize, f64)> {
    if profile.len() != book.code_length() {
        return Err(Error::dim(format!(
            "profile length {} vs code length {}",
            profile.len(),
            book.code_length()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..book.num_classes() {
        let d = distance(profile, &book.code_f64(k), metric)?;
        if d < best.1 {
            best = (k, d);
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Numeric("no finite distance to any code".into()));
    }
    Ok(best)
}

/// Distances from one profile to every code.
pub fn distances_to_codes(profile: &[f64], book: &CodeBook, metric: DistanceMetric) -> Result<Vec<f64>> {
    (0..book.num_classes())
        .map(|k| distance(profile, &book.code_f64(k), metric))
        .collect()
}

pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn pairwise_stats(book: &CodeBook) -> HammingStats {
    let k = book.num_classes();
    let mut min = usize::MAX;
    let mut max = 0;
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let d = hamming(book.code(i), book.code(j));
            min = min.min(d);
            max = max.max(d);
            total += d;
            pairs += 1;
        }
    }
    HammingStats {
        min,
        mean: total as f64 / pairs as f64,
        max,
    }
}
