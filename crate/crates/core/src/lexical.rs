//! Lexical certainty scoring and masking of caption words.
//!
//! Each caption word embedding is compared with the embedding of the
//! cropped target region. The cosine scores are split into two clusters by
//! an exact one-dimensional 2-means, and words in the higher cluster are
//! replaced by [`MASK_TOKEN`] while training.
//!
//! The 2-means optimum in one dimension is a split point of the sorted
//! scores, so it is found by scanning all `n - 1` split points with prefix
//! sums. Equal scores are never separated, which keeps ties in the lower
//! (unmasked) cluster.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MASK_TOKEN: &str = "***";

/// A caption with per-word embeddings and the target-region embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord<T> {
    pub sample_id: String,
    pub tokens: Vec<String>,
    /// `n_words × d_e`.
    pub word_embeddings: Tensor<T>,
    /// `d_e`.
    pub region_embedding: Tensor<T>,
}

impl<T: Scalar> CaptionRecord<T> {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Precondition(format!(
                "{}: caption has no words",
                self.sample_id
            )));
        }
        if self.word_embeddings.rows() != self.tokens.len()
            || self.word_embeddings.cols() != self.region_embedding.len()
        {
            return Err(Error::shape(
                "caption_record",
                self.word_embeddings.shape(),
                self.region_embedding.shape(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOutcome {
    Split,
    /// Fewer than two distinct scores: every word is low-certainty.
    NoSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertaintyPartition {
    pub scores: Vec<f64>,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    /// `(low, high)` cluster means; `None` without a split.
    pub centroids: Option<(f64, f64)>,
    pub outcome: SplitOutcome,
}

impl CertaintyPartition {
    /// Within-cluster sum of squared deviations.
    pub fn within_ss(&self) -> f64 {
        let ss = |idx: &[usize]| {
            if idx.is_empty() {
                return 0.0;
            }
            let mean = idx.iter().map(|&i| self.scores[i]).sum::<f64>() / idx.len() as f64;
            idx.iter()
                .map(|&i| (self.scores[i] - mean).powi(2))
                .sum::<f64>()
        };
        ss(&self.high) + ss(&self.low)
    }
}

/// `a·b / (|a| |b|)`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Exact 2-means of one-dimensional scores.
///
/// The cluster with the larger mean is labelled high. Among split points
/// with equal within-cluster error the one with the smaller high cluster
/// wins.
pub fn kmeans_1d_k2(scores: &[f64]) -> Result<CertaintyPartition> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans_1d_k2" });
    }
    let n = scores.len();
    let no_split = || CertaintyPartition {
        scores: scores.to_vec(),
        high: Vec::new(),
        low: (0..n).collect(),
        centroids: None,
        outcome: SplitOutcome::NoSplit,
    };
    if n < 2 {
        return Ok(no_split());
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();

    // Center before accumulating so the prefix sums stay well conditioned.
    let shift = sorted.iter().sum::<f64>() / n as f64;
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        let c = v - shift;
        s1[i + 1] = s1[i] + c;
        s2[i + 1] = s2[i] + c * c;
    }
    let sse = |lo: usize, hi: usize| {
        let k = (hi - lo) as f64;
        let s = s1[hi] - s1[lo];
        (s2[hi] - s2[lo]) - s * s / k
    };

    let mut best: Option<(f64, usize)> = None;
    for k in 1..n {
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let cost = sse(0, k) + sse(k, n);
        match best {
            Some((c, _)) if cost > c => {}
            _ => best = Some((cost, k)),
        }
    }
    let Some((_, k)) = best else {
        return Ok(no_split());
    };

    let mut low: Vec<usize> = order[..k].to_vec();
    let mut high: Vec<usize> = order[k..].to_vec();
    low.sort_unstable();
    high.sort_unstable();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(CertaintyPartition {
        scores: scores.to_vec(),
        high,
        low,
        centroids: Some((mean(&sorted[..k]), mean(&sorted[k..]))),
        outcome: SplitOutcome::Split,
    })
}

/// Scores every word against the region embedding and partitions them.
pub fn partition_certainty<T: Scalar>(rec: &CaptionRecord<T>) -> Result<CertaintyPartition> {
    rec.validate()?;
    let region = rec.region_embedding.data();
    let scores = (0..rec.tokens.len())
        .map(|i| {
            cosine_similarity(rec.word_embeddings.row(i), region)
                .map(|s| s.to_f64_lossy())
                .map_err(|_| {
                    Error::Degenerate(format!(
                        "{}: zero embedding at token {i} ({:?}) or zero region vector",
                        rec.sample_id, rec.tokens[i]
                    ))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    kmeans_1d_k2(&scores)
}

/// Replaces high-certainty words with [`MASK_TOKEN`].
///
/// If the partition marks every word as high, the lowest-scoring one is
/// kept so the caption never becomes all masks.
pub fn mask_caption(tokens: &[String], partition: &CertaintyPartition) -> Result<Vec<String>> {
    if let Some(&bad) = partition
        .high
        .iter()
        .chain(&partition.low)
        .find(|&&i| i >= tokens.len())
    {
        return Err(Error::Precondition(format!(
            "partition index {bad} out of range for {} tokens",
            tokens.len()
        )));
    }
    let mut high: BTreeSet<usize> = partition.high.iter().copied().collect();
    if !tokens.is_empty() && high.len() == tokens.len() {
        let keep = (0..tokens.len())
            .min_by(|&a, &b| {
                let sa = partition.scores.get(a).copied().unwrap_or(f64::INFINITY);
                let sb = partition.scores.get(b).copied().unwrap_or(f64::INFINITY);
                sa.total_cmp(&sb).then(a.cmp(&b))
            })
            .expect("non-empty");
        high.remove(&keep);
    }
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if high.contains(&i) {
                MASK_TOKEN.to_string()
            } else {
                t.clone()
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    /// Probability that a record is masked in a given epoch.
    pub probability: f64,
    pub enabled: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            probability: 1.0,
            enabled: true,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Precondition(format!(
                "mask probability {} outside [0, 1]",
                self.probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedCaption {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub masked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sample_id: String,
    pub epoch: u64,
    pub scores: Vec<f64>,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub outcome: SplitOutcome,
    pub masked: bool,
}

/// Per-record RNG derived from `(seed, epoch, sample_id)`, so results do
/// not depend on processing order.
pub fn record_rng(seed: u64, epoch: u64, sample_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Decides per record whether to mask in `epoch` and applies the mask.
pub fn lca_pipeline<T: Scalar>(
    records: &[CaptionRecord<T>],
    policy: &MaskPolicy,
    seed: u64,
    epoch: u64,
) -> Result<(Vec<MaskedCaption>, Vec<AuditEntry>)> {
    policy.validate()?;
    let mut out = Vec::with_capacity(records.len());
    let mut audit = Vec::with_capacity(records.len());
    for rec in records {
        let partition = partition_certainty(rec)?;
        let draw: f64 = record_rng(seed, epoch, &rec.sample_id).gen();
        let apply =
            policy.enabled && draw < policy.probability && partition.outcome == SplitOutcome::Split;
        let tokens = if apply {
            mask_caption(&rec.tokens, &partition)?
        } else {
            rec.tokens.clone()
        };
        audit.push(AuditEntry {
            sample_id: rec.sample_id.clone(),
            epoch,
            scores: partition.scores.clone(),
            high: partition.high.clone(),
            low: partition.low.clone(),
            outcome: partition.outcome,
            masked: apply,
        });
        out.push(MaskedCaption {
            sample_id: rec.sample_id.clone(),
            tokens,
            masked: apply,
        });
    }
    Ok((out, audit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let p = kmeans_1d_k2(&[0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!(p.high, vec![0, 1]);
        assert_eq!(p.low, vec![2, 3]);

        let p = kmeans_1d_k2(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.outcome, SplitOutcome::NoSplit);
        assert_eq!(p.low, vec![0, 1, 2]);
        assert!(p.high.is_empty());

        let p = kmeans_1d_k2(&[0.0, 1.0]).unwrap();
        assert_eq!(p.high, vec![1]);
        assert_eq!(p.low, vec![0]);

        assert_eq!(kmeans_1d_k2(&[0.3]).unwrap().outcome, SplitOutcome::NoSplit);
    }

    #[test]
    fn ties_stay_in_one_cluster() {
        let p = kmeans_1d_k2(&[0.0, 1.0, 1.0, 2.0]).unwrap();
        let hi: Vec<f64> = p.high.iter().map(|&i| p.scores[i]).collect();
        let lo: Vec<f64> = p.low.iter().map(|&i| p.scores[i]).collect();
        assert!(!(hi.contains(&1.0) && lo.contains(&1.0)));
    }

    #[test]
    fn mask_examples() {
        let tokens = toks("the red car on the right");
        let part = CertaintyPartition {
            scores: vec![0.1, 0.9, 0.8, 0.1, 0.1, 0.2],
            high: vec![1, 2],
            low: vec![0, 3, 4, 5],
            centroids: None,
            outcome: SplitOutcome::Split,
        };
        assert_eq!(
            mask_caption(&tokens, &part).unwrap(),
            toks("the *** *** on the right")
        );

        let none = kmeans_1d_k2(&[0.2; 6]).unwrap();
        assert_eq!(mask_caption(&tokens, &none).unwrap(), tokens);

        let all = CertaintyPartition {
            scores: vec![0.5, 0.9, 0.3],
            high: vec![0, 1, 2],
            low: vec![],
            centroids: None,
            outcome: SplitOutcome::Split,
        };
        let masked = mask_caption(&toks("red sports car"), &all).unwrap();
        assert_eq!(masked, toks("*** *** car"));

        let bad = CertaintyPartition {
            high: vec![7],
            ..part
        };
        assert!(mask_caption(&tokens, &bad).is_err());
    }
}
