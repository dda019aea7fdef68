//! Similarity kernels and the deterministic text embedder.
//!
//! Pseudo-labeling ranks steps by cosine similarity, while clip selection
//! thresholds the raw dot product, so both kernels are kept separate.
//! Embeddings are deliberately left unnormalized.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PivotError, Result};
use crate::util;

/// Smallest and largest norm produced by [`embed_text`].
pub const EMBED_NORM_RANGE: (f64, f64) = (0.8, 1.6);

/// A fixed-dimension real vector. Magnitude is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

/// A candidate index with its similarity score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub step_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Dot,
}

/// Deterministic stand-in for a sentence encoder.
///
/// The string is hashed into a stream seed, `dim` standard normals are drawn
/// and the result is rescaled to a norm drawn from [`EMBED_NORM_RANGE`].
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Embedding {
    assert!(dim > 0, "embedding dimension must be positive");
    let mut rng = util::stream(&[util::str_key(text), seed, dim as u64]);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let (lo, hi) = EMBED_NORM_RANGE;
    let target = lo + (hi - lo) * rng.random::<f64>();
    let n = norm(&v);
    // a zero draw has probability zero; guard anyway so the output is finite
    let scale = if n > 0.0 { target / n } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= scale);
    Embedding(v)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PivotError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = dot(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PivotError::Validation(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok(d / (na * nb))
}

/// Orders by descending score, then ascending index.
fn rank_order(a: &ScoredLabel, b: &ScoredLabel) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.step_id.cmp(&b.step_id))
}

/// The `min(k, |candidates|)` highest-scoring candidates, best first.
/// Ties go to the lower candidate index.
pub fn top_k<E: Deref<Target = [f64]>>(
    query: &[f64],
    candidates: &[E],
    k: usize,
    metric: Metric,
) -> Result<Vec<ScoredLabel>> {
    if candidates.is_empty() {
        return Err(PivotError::Validation("top_k: empty candidate list".into()));
    }
    if k == 0 {
        return Err(PivotError::Validation("top_k: k must be at least 1".into()));
    }
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let score = match metric {
                Metric::Cosine => cosine(query, c)?,
                Metric::Dot => dot(query, c)?,
            };
            Ok(ScoredLabel { step_id: i, score })
        })
        .collect::<Result<Vec<_>>>()?;
    rank_prefix(&mut scored, k);
    Ok(scored)
}

/// Keeps the best `k` entries of `scored`, sorted.
pub(crate) fn rank_prefix(scored: &mut Vec<ScoredLabel>, k: usize) {
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
}

/// Memoizes [`embed_text`] over a catalog, keyed by `(text, dim, seed)`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    map: std::collections::HashMap<(String, usize, u64), Embedding>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, text: &str, dim: usize, seed: u64) -> &Embedding {
        self.map
            .entry((text.to_string(), dim, seed))
            .or_insert_with(|| embed_text(text, dim, seed))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// --- precomputed embedding tables -------------------------------------------

pub const PEMB_MAGIC: &[u8; 4] = b"PEMB";
pub const PEMB_VERSION: u32 = 1;

/// Writes a row-major table of little-endian `f32` behind a 16-byte header
/// (`"PEMB"`, version, rows, dim).
pub fn write_pemb(path: &Path, rows: &[Embedding]) -> Result<()> {
    let dim = rows.first().map(|r| r.dim()).unwrap_or(0);
    let mut buf = Vec::with_capacity(16 + rows.len() * dim * 4);
    buf.extend_from_slice(PEMB_MAGIC);
    buf.extend_from_slice(&PEMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for (i, r) in rows.iter().enumerate() {
        if r.dim() != dim {
            return Err(PivotError::Validation(format!(
                "embedding table row {i} has dim {} (expected {dim})",
                r.dim()
            )));
        }
        for &x in r.iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| PivotError::io(path, e))?;
    f.write_all(&buf).map_err(|e| PivotError::io(path, e))
}

pub fn read_pemb(path: &Path) -> Result<Vec<Embedding>> {
    let bytes = fs::read(path).map_err(|e| PivotError::io(path, e))?;
    parse_pemb(&bytes)
}

pub fn parse_pemb(bytes: &[u8]) -> Result<Vec<Embedding>> {
    if bytes.len() < 16 || &bytes[..4] != PEMB_MAGIC {
        return Err(PivotError::Format("missing PEMB header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != PEMB_VERSION {
        return Err(PivotError::Format(format!(
            "unsupported PEMB version {version}"
        )));
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    let expected = 16 + rows * dim * 4;
    if bytes.len() != expected {
        return Err(PivotError::Format(format!(
            "PEMB body is {} bytes, header declares {rows}x{dim} ({expected} bytes total)",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = (0..dim)
            .map(|c| {
                let o = 16 + (r * dim + c) * 4;
                f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
            })
            .collect::<Vec<_>>();
        out.push(Embedding(row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_is_deterministic_and_case_sensitive() {
        let a = embed_text("boil pasta", 64, 1);
        let b = embed_text("boil pasta", 64, 1);
        let c = embed_text("Boil pasta", 64, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, embed_text("boil pasta", 64, 2));
    }

    #[test]
    fn embed_norms_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let len = rng.random_range(1..24);
            let s: String = (0..len)
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            let n = embed_text(&s, 64, 3).norm();
            assert!((0.8..=1.6).contains(&n), "norm {n} for {s:?}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[2.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(dot(&[0.0, 0.0], &[3.5, -2.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            dot(&[1.0, 2.0], &[3.0]),
            Err(PivotError::DimMismatch { .. })
        ));
    }

    #[test]
    fn top_k_self_similarity_and_exhaustive() {
        let cands: Vec<Embedding> = (0..6).map(|i| embed_text(&format!("s{i}"), 16, 0)).collect();
        let r = top_k(&cands[4], &cands, 1, Metric::Cosine).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].step_id, 4);
        assert!((r[0].score - 1.0).abs() < 1e-12);

        let all = top_k(&cands[0], &cands, 10, Metric::Dot).unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        let cands = vec![
            Embedding(vec![1.0, 0.0]),
            Embedding(vec![0.0, 1.0]),
            Embedding(vec![1.0, 0.0]),
        ];
        let r = top_k(&[1.0, 0.0], &cands, 2, Metric::Cosine).unwrap();
        assert_eq!(
            r.iter().map(|s| s.step_id).collect::<Vec<_>>(),
            vec![0, 2]
        );
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let cands: Vec<Embedding> = (0..50)
                .map(|_| Embedding((0..12).map(|_| rng.sample(StandardNormal)).collect()))
                .collect();
            let q: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
            let metric = if trial % 2 == 0 { Metric::Cosine } else { Metric::Dot };
            // oracle: score every candidate, stable sort descending
            let mut oracle: Vec<(usize, f64)> = cands
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d: f64 = q.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                    let s = match metric {
                        Metric::Dot => d,
                        Metric::Cosine => d / (norm(&q) * norm(c)),
                    };
                    (i, s)
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let got = top_k(&q, &cands, 5, metric).unwrap();
            let want: Vec<usize> = oracle.iter().take(5).map(|x| x.0).collect();
            assert_eq!(got.iter().map(|s| s.step_id).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn pemb_round_trip_and_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pemb");
        let rows = vec![Embedding(vec![0.5, -1.25, 3.0]), Embedding(vec![1.0, 2.0, 4.0])];
        write_pemb(&p, &rows).unwrap();
        assert_eq!(read_pemb(&p).unwrap(), rows);
        let bytes = fs::read(&p).unwrap();
        assert!(parse_pemb(&bytes[..bytes.len() - 4]).is_err());
        assert!(parse_pemb(b"NOPE000000000000").is_err());
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim)
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(a in vec_strategy(8), b in vec_strategy(8), alpha in 0.01f64..100.0) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            let c1 = cosine(&a, &b).unwrap();
            let c2 = cosine(&scaled, &b).unwrap();
            prop_assert!((c1 - c2).abs() <= 1e-9 * c1.abs().max(1e-12) + 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c1));
        }

        #[test]
        fn dot_is_additive(a in vec_strategy(6), b in vec_strategy(6), c in vec_strategy(6)) {
            let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = dot(&ab, &c).unwrap();
            let rhs = dot(&a, &c).unwrap() + dot(&b, &c).unwrap();
            let scale = a.iter().chain(&b).map(|x| x.abs()).sum::<f64>() * c.iter().map(|x| x.abs()).sum::<f64>();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * scale.max(1e-12));
        }

        #[test]
        fn top_k_is_prefix_of_top_k_plus_one(seed in 0u64..500, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cands: Vec<Embedding> = (0..15)
                .map(|_| Embedding((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = top_k(&q, &cands, k, Metric::Dot).unwrap();
            let b = top_k(&q, &cands, k + 1, Metric::Dot).unwrap();
            prop_assert_eq!(&a[..], &b[..a.len()]);
        }
    }
}
