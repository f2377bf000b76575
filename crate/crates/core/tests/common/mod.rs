//! Oracles and fixture loaders shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use g3d_core::attention::AttentionParams;
use g3d_core::eval::EvalSample;
use g3d_core::io::{
    caption_records, eval_samples, load_annotations, load_embeddings, load_predictions,
};
use g3d_core::lexical::CaptionRecord;
use g3d_core::params::ParamTree;
use g3d_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn row_major(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let mut acc = b.map_or(0.0, |b| b.data()[j]);
                    for (i, xi) in row.iter().enumerate().take(din) {
                        acc += xi * w.at(i, j);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Multi-head cross-attention written as explicit loops over heads, query
/// rows and key rows.
pub fn naive_mhca(
    q_in: &Tensor<f64>,
    kv_in: &Tensor<f64>,
    p: &AttentionParams<Tensor<f64>>,
) -> Tensor<f64> {
    let d = p.w_q.rows();
    let dh = d / p.heads;
    let q = affine(&row_major(q_in), &p.w_q, Some(&p.b_q));
    let k = affine(&row_major(kv_in), &p.w_k, None);
    let v = affine(&row_major(kv_in), &p.w_v, Some(&p.b_v));
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..p.heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum();
            }
        }
    }
    let out = affine(&concat, &p.w_o, Some(&p.b_o));
    Tensor::from_rows(&out).unwrap()
}

/// Random widths, head counts and row counts, with weights redrawn from
/// `uniform(-1, 1)` so attention maps are far from uniform.
pub fn attention_case(seed: u64) -> (Tensor<f64>, Tensor<f64>, AttentionParams<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, heads) = [(4, 1), (4, 2), (6, 3), (8, 2), (8, 4), (12, 3)][rng.gen_range(0..6)];
    let nq = rng.gen_range(1..7);
    let nk = rng.gen_range(1..7);
    let mut p = AttentionParams::<Tensor<f64>>::init(d, heads, &mut rng).unwrap();
    p.visit_mut(&mut |t| *t = Tensor::uniform(t.shape().to_vec(), 1.0, &mut rng));
    let q = Tensor::uniform(vec![nq, d], 1.5, &mut rng);
    let kv = Tensor::uniform(vec![nk, d], 1.5, &mut rng);
    (q, kv, p)
}

/// Smallest within-cluster sum of squares over every split of the scores
/// into two non-empty sets, contiguous or not, with the membership mask of
/// the set holding element 0.
pub fn brute_force_split(scores: &[f64]) -> (f64, u32) {
    let n = scores.len();
    let ss = |idx: &[f64]| {
        let m = idx.iter().sum::<f64>() / idx.len() as f64;
        idx.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    // subsets containing element 0 cover every unordered split once
    for mask in 0u32..(1 << (n - 1)) {
        let full = (mask << 1) | 1;
        if full == (1 << n) - 1 {
            continue;
        }
        a.clear();
        b.clear();
        for (i, &s) in scores.iter().enumerate() {
            if full >> i & 1 == 1 {
                a.push(s);
            } else {
                b.push(s);
            }
        }
        let v = ss(&a) + ss(&b);
        if v < best.0 {
            best = (v, full);
        }
    }
    best
}

pub fn brute_force_min_ss(scores: &[f64]) -> f64 {
    brute_force_split(scores).0
}

/// Membership mask, in the convention of [`brute_force_split`], of a
/// partition's cluster holding element 0.
pub fn split_mask(high: &[usize], low: &[usize]) -> u32 {
    let side = if high.contains(&0) { high } else { low };
    side.iter().fold(0, |m, &i| m | 1 << i)
}

/// Evaluation fixture: one sample per image, all near and easy, with IoUs
/// 0.3, 0.6 and 0.1.
pub fn eval_fixture(projected: bool) -> Vec<EvalSample<f64>> {
    let dir = fixtures().join("eval");
    let anns = load_annotations(&dir.join("annotations.jsonl")).unwrap();
    let name = if projected {
        "predictions_projected.jsonl"
    } else {
        "predictions.jsonl"
    };
    let preds = load_predictions(&dir.join(name)).unwrap();
    eval_samples(&anns, &preds, Some(&dir.join("calib"))).unwrap()
}

pub fn lca_fixture() -> Vec<CaptionRecord<f64>> {
    let dir = fixtures().join("lca");
    let anns = load_annotations(&dir.join("annotations.jsonl")).unwrap();
    let emb = load_embeddings(&dir.join("embeddings.embf")).unwrap();
    caption_records(&anns, &emb).unwrap()
}

/// High-certainty words per fixture record, as constructed.
pub fn lca_expected_high() -> BTreeMap<String, Vec<String>> {
    let text = std::fs::read_to_string(fixtures().join("lca/expected_high.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}
