//! Cross-view pseudo-pair mining over narration embeddings, similarity
//! gating, and similarity-distribution statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSample;
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_err};
use crate::numerics::cosine_slices;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub fpv_index: usize,
    pub tpv_index: usize,
    pub similarity: f64,
}

/// Mined pairs plus the alignment selection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<PseudoPair>,
    pub selected: Vec<bool>,
    /// Every selected pair has `similarity >= gate`.
    pub gate: f64,
}

impl PairBatch {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.pairs.len() as f64
        }
    }
}

/// How "relatively higher similarity" pairs are picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Selection {
    /// Keep pairs with similarity at or above the loss config's `theta`.
    Threshold,
    /// Keep the top fraction of pairs by similarity.
    TopFraction(f64),
}

/// For every FPV sample, the TPV sample whose narration is most similar.
/// Ties go to the smallest TPV index.
pub fn mine_pseudo_pairs(fpv: &[VideoSample], tpv: &[VideoSample]) -> Result<Vec<PseudoPair>> {
    let fpv_text: Vec<&[f64]> = fpv.iter().map(|s| s.narration.as_slice()).collect();
    let tpv_text: Vec<&[f64]> = tpv.iter().map(|s| s.narration.as_slice()).collect();
    mine_by_text(&fpv_text, &tpv_text)
}

pub fn mine_by_text(fpv: &[&[f64]], tpv: &[&[f64]]) -> Result<Vec<PseudoPair>> {
    if fpv.is_empty() {
        return Err(Error::EmptyCorpus("fpv"));
    }
    if tpv.is_empty() {
        return Err(Error::EmptyCorpus("tpv"));
    }
    let dim = fpv[0].len();
    for d in fpv.iter().chain(tpv) {
        if d.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: d.len(),
            });
        }
    }
    // Collect preserves FPV order.
    fpv.par_iter()
        .enumerate()
        .map(|(fi, query)| {
            let mut best = PseudoPair {
                fpv_index: fi,
                tpv_index: 0,
                similarity: cosine_slices(query, tpv[0])?,
            };
            for (ti, cand) in tpv.iter().enumerate().skip(1) {
                let s = cosine_slices(query, cand)?;
                if s > best.similarity {
                    best.tpv_index = ti;
                    best.similarity = s;
                }
            }
            Ok(best)
        })
        .collect()
}

pub fn select_pairs(pairs: &[PseudoPair], theta: f64) -> Result<PairBatch> {
    if !(-1.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta {theta} must lie in [-1, 1]")));
    }
    Ok(PairBatch {
        pairs: pairs.to_vec(),
        selected: pairs.iter().map(|p| p.similarity >= theta).collect(),
        gate: theta,
    })
}

/// Selects the `ceil(fraction · n)` most similar pairs. Pairs tied with the
/// cut-off similarity are all kept, so the mask stays a pure threshold.
pub fn select_top_fraction(pairs: &[PseudoPair], fraction: f64) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "top fraction {fraction} must lie in [0, 1]"
        )));
    }
    let k = (fraction * pairs.len() as f64).ceil() as usize;
    if k == 0 {
        return Ok(PairBatch {
            pairs: pairs.to_vec(),
            selected: vec![false; pairs.len()],
            gate: f64::INFINITY,
        });
    }
    let mut sims: Vec<f64> = pairs.iter().map(|p| p.similarity).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    let gate = sims[k - 1];
    Ok(PairBatch {
        pairs: pairs.to_vec(),
        selected: pairs.iter().map(|p| p.similarity >= gate).collect(),
        gate,
    })
}

pub fn apply_selection(pairs: &[PseudoPair], selection: Selection, theta: f64) -> Result<PairBatch> {
    match selection {
        Selection::Threshold => select_pairs(pairs, theta),
        Selection::TopFraction(f) => select_top_fraction(pairs, f),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityHistogram {
    pub bucket_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl SimilarityHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            writeln!(w, "bucket_low,bucket_high,count,fraction").map_err(write_err(path))?;
            for (i, (&c, &f)) in self.counts.iter().zip(&self.fractions).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    self.bucket_edges[i],
                    self.bucket_edges[i + 1],
                    c,
                    f
                )
                .map_err(write_err(path))?;
            }
            Ok(())
        })
    }
}

/// Default similarity buckets over [-1, 1].
pub fn default_bucket_edges() -> Vec<f64> {
    vec![-1.0, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
}

/// Buckets are half-open `[e_i, e_{i+1})` except the last, which is closed.
pub fn similarity_histogram(pairs: &[PseudoPair], bucket_edges: &[f64]) -> Result<SimilarityHistogram> {
    if bucket_edges.len() < 2 {
        return Err(Error::BadEdges("need at least two edges".into()));
    }
    if bucket_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::BadEdges("edges must be strictly ascending".into()));
    }
    let (lo, hi) = (bucket_edges[0], bucket_edges[bucket_edges.len() - 1]);
    if lo > -1.0 || hi < 1.0 {
        return Err(Error::BadEdges(format!(
            "edges [{lo}, {hi}] must cover [-1, 1]"
        )));
    }
    let buckets = bucket_edges.len() - 1;
    let mut counts = vec![0usize; buckets];
    for p in pairs {
        // First edge strictly above the value, minus one.
        let upper = bucket_edges.partition_point(|&e| e <= p.similarity);
        let idx = upper.saturating_sub(1).min(buckets - 1);
        counts[idx] += 1;
    }
    let total: usize = counts.iter().sum();
    let fractions = counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect();
    Ok(SimilarityHistogram {
        bucket_edges: bucket_edges.to_vec(),
        counts,
        fractions,
    })
}

pub fn write_pairs_csv(batch: &PairBatch, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "fpv_index,tpv_index,similarity,selected").map_err(write_err(path))?;
        for (p, s) in batch.pairs.iter().zip(&batch.selected) {
            writeln!(w, "{},{},{},{}", p.fpv_index, p.tpv_index, p.similarity, s)
                .map_err(write_err(path))?;
        }
        Ok(())
    })
}

pub fn read_pairs_csv(path: &Path) -> Result<Vec<PseudoPair>> {
    let text = std::fs::read_to_string(path).map_err(write_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: m.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(err("expected fpv_index,tpv_index,similarity"));
        }
        let pair = PseudoPair {
            fpv_index: fields[0].trim().parse().map_err(|_| err("bad fpv_index"))?,
            tpv_index: fields[1].trim().parse().map_err(|_| err("bad tpv_index"))?,
            similarity: fields[2].trim().parse().map_err(|_| err("bad similarity"))?,
        };
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&pair.similarity) {
            return Err(err("similarity outside [-1, 1]"));
        }
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(i: usize, s: f64) -> PseudoPair {
        PseudoPair {
            fpv_index: i,
            tpv_index: 0,
            similarity: s,
        }
    }

    #[test]
    fn exact_match_found() {
        let pool: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]];
        let pairs = mine_by_text(&[&[1.0, 0.0]], &pool).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].tpv_index, 0);
        assert_eq!(pairs[0].similarity, 1.0);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let pool: Vec<&[f64]> = vec![&[0.0, 1.0], &[2.0, 0.0], &[1.0, 0.0]];
        let pairs = mine_by_text(&[&[1.0, 0.0]], &pool).unwrap();
        assert_eq!(pairs[0].tpv_index, 1);
    }

    #[test]
    fn mining_errors() {
        let pool: Vec<&[f64]> = vec![&[1.0, 0.0]];
        assert!(matches!(mine_by_text(&[], &pool), Err(Error::EmptyCorpus(_))));
        assert!(matches!(
            mine_by_text(&[&[1.0, 0.0]], &[]),
            Err(Error::EmptyCorpus(_))
        ));
        assert!(matches!(
            mine_by_text(&[&[1.0, 0.0, 0.0]], &pool),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn selection_examples() {
        let pairs = vec![pair(0, 0.9), pair(1, 0.6), pair(2, 0.75)];
        assert_eq!(select_pairs(&pairs, 0.7).unwrap().selected, vec![true, false, true]);
        assert_eq!(select_pairs(&pairs, -1.0).unwrap().selected_count(), 3);
        let exact = vec![pair(0, 1.0), pair(1, 0.999)];
        assert_eq!(select_pairs(&exact, 1.0).unwrap().selected, vec![true, false]);
        assert!(select_pairs(&pairs, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn top_fraction_keeps_most_similar() {
        let pairs = vec![pair(0, 0.1), pair(1, 0.9), pair(2, 0.5), pair(3, 0.7)];
        let b = select_top_fraction(&pairs, 0.5).unwrap();
        assert_eq!(b.selected, vec![false, true, false, true]);
        assert_eq!(b.gate, 0.7);
        assert_eq!(select_top_fraction(&pairs, 0.0).unwrap().selected_count(), 0);
        assert_eq!(select_top_fraction(&pairs, 1.0).unwrap().selected_count(), 4);
    }

    #[test]
    fn histogram_examples() {
        let pairs = vec![pair(0, 1.0), pair(1, 1.0)];
        let h = similarity_histogram(&pairs, &[-1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(h.fractions, vec![0.0, 0.0, 1.0]);
        let h = similarity_histogram(&[], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(h.counts, vec![0, 0]);
        assert_eq!(h.fractions, vec![0.0, 0.0]);
        // Edge values fall in the upper bucket.
        let h = similarity_histogram(&[pair(0, 0.0), pair(1, -1.0)], &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
    }

    #[test]
    fn histogram_rejects_bad_edges() {
        assert!(matches!(similarity_histogram(&[], &[0.0]), Err(Error::BadEdges(_))));
        assert!(similarity_histogram(&[], &[-1.0, 0.5, 0.5, 1.0]).is_err());
        assert!(similarity_histogram(&[], &[0.0, 1.0]).is_err());
        assert!(similarity_histogram(&[], &[-1.0, 0.9]).is_err());
    }

    #[test]
    fn pairs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let pairs = vec![pair(0, 0.123456789012345678), pair(1, -0.5)];
        write_pairs_csv(&select_pairs(&pairs, 0.0).unwrap(), &path).unwrap();
        assert_eq!(read_pairs_csv(&path).unwrap(), pairs);
    }

    proptest! {
        #[test]
        fn selection_is_monotone(
            sims in prop::collection::vec(-1.0f64..=1.0, 0..40),
            t1 in -1.0f64..=1.0,
            t2 in -1.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let pairs: Vec<_> = sims.iter().enumerate().map(|(i, &s)| pair(i, s)).collect();
            let a = select_pairs(&pairs, lo).unwrap();
            let b = select_pairs(&pairs, hi).unwrap();
            for (sa, sb) in a.selected.iter().zip(&b.selected) {
                prop_assert!(!sb || *sa);
            }
            for (p, s) in b.pairs.iter().zip(&b.selected) {
                prop_assert!(!s || p.similarity >= b.gate);
            }
        }
    }
}
