//! Dimension-decoupled text features.
//!
//! Two learnable query sets pull coarse 2D and 3D features out of the
//! generalized token features:
//!
//! ```text
//! H_2D  = MHCA(Q_2D, T_t)          H_3D  = MHCA(Q_3D, T_t)
//! TC_2D = FFN(H_2D) + H_2D         TC_3D = FFN(H_3D) + H_3D
//! ```
//!
//! Each branch is then refined by reverse cross-attention, where the
//! branch's own coarse features act as queries and values and the other
//! branch's coarse features act as keys:
//!
//! ```text
//! T_2D = TC_2D + FFN(softmax_rows(1 - S(TC_2D, TC_3D)) · TC_2D)
//! T_3D = TC_3D + FFN(softmax_rows(1 - S(TC_3D, TC_2D)) · TC_3D)
//! ```
//!
//! `S(q, k)` is `q·kᵀ / sqrt(d)` by default or the cosine similarity of the
//! rows when [`SimilarityMode::Cosine`] is selected. Subtracting from one
//! before the softmax moves weight toward the least similar keys.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ffn, mhca, Activation, AttentionParams, FfnParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind_constant, fan_in_uniform, param_tree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// `q·kᵀ / sqrt(d)`.
    #[default]
    ScaledDot,
    /// Row-normalized `q·kᵀ`, bounded in `[-1, 1]`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct D2MParams<P> {
    /// Learnable 2D queries, `m × d`.
    pub query_2d: P,
    /// Learnable 3D queries, `m × d`.
    pub query_3d: P,
    pub attn_2d: AttentionParams<P>,
    pub attn_3d: AttentionParams<P>,
    pub coarse_ffn_2d: FfnParams<P>,
    pub coarse_ffn_3d: FfnParams<P>,
    pub refine_ffn_2d: FfnParams<P>,
    pub refine_ffn_3d: FfnParams<P>,
    pub similarity: SimilarityMode,
}

param_tree!(D2MParams {
    leaves: [query_2d, query_3d],
    nodes: [
        attn_2d,
        attn_3d,
        coarse_ffn_2d,
        coarse_ffn_3d,
        refine_ffn_2d,
        refine_ffn_3d
    ],
    keep: [similarity]
});

impl<P: Clone> D2MParams<P> {
    /// Exchanges every 2D parameter with its 3D counterpart.
    pub fn swap_branches(&self) -> Self {
        Self {
            query_2d: self.query_3d.clone(),
            query_3d: self.query_2d.clone(),
            attn_2d: self.attn_3d.clone(),
            attn_3d: self.attn_2d.clone(),
            coarse_ffn_2d: self.coarse_ffn_3d.clone(),
            coarse_ffn_3d: self.coarse_ffn_2d.clone(),
            refine_ffn_2d: self.refine_ffn_3d.clone(),
            refine_ffn_3d: self.refine_ffn_2d.clone(),
            similarity: self.similarity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct D2MConfig {
    /// Query rows per branch.
    pub queries: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub similarity: SimilarityMode,
}

impl Default for D2MConfig {
    fn default() -> Self {
        Self {
            queries: 4,
            width: 32,
            heads: 4,
            ffn_hidden: 64,
            similarity: SimilarityMode::ScaledDot,
        }
    }
}

impl<T: Scalar> D2MParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &D2MConfig, rng: &mut R) -> Result<Self> {
        let (m, d, hid) = (cfg.queries, cfg.width, cfg.ffn_hidden);
        if m == 0 {
            return Err(Error::Precondition("D2M needs at least one query".into()));
        }
        Ok(Self {
            query_2d: fan_in_uniform(vec![m, d], d, rng),
            query_3d: fan_in_uniform(vec![m, d], d, rng),
            attn_2d: AttentionParams::init(d, cfg.heads, rng)?,
            attn_3d: AttentionParams::init(d, cfg.heads, rng)?,
            coarse_ffn_2d: FfnParams::init(d, hid, Activation::Relu, rng),
            coarse_ffn_3d: FfnParams::init(d, hid, Activation::Relu, rng),
            refine_ffn_2d: FfnParams::init(d, hid, Activation::Relu, rng),
            refine_ffn_3d: FfnParams::init(d, hid, Activation::Relu, rng),
            similarity: cfg.similarity,
        })
    }
}

/// Coarse stage outputs, all `m × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct D2MIntermediate<P> {
    pub h_2d: P,
    pub h_3d: P,
    pub coarse_2d: P,
    pub coarse_3d: P,
}

fn normalize_rows<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let norms = tape.row_sums(sq)?;
    let norms = tape.sqrt(norms)?;
    let inv = tape.recip(norms)?;
    tape.mul_col(x, inv)
}

/// Similarity map between query and key rows, `m × m`.
pub fn similarity<T: Scalar>(
    tape: &Tape<T>,
    q_self: Var,
    k_other: Var,
    mode: SimilarityMode,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q_self), tape.shape(k_other));
    if qs != ks || qs.len() != 2 {
        return Err(Error::shape("reverse_cross_attention", &qs, &ks));
    }
    match mode {
        SimilarityMode::ScaledDot => {
            let kt = tape.transpose(k_other)?;
            let a = tape.matmul(q_self, kt)?;
            tape.scale(a, T::one() / T::lit(qs[1] as f64).sqrt())
        }
        SimilarityMode::Cosine => {
            let qn = normalize_rows(tape, q_self)?;
            let kn = normalize_rows(tape, k_other)?;
            let kt = tape.transpose(kn)?;
            tape.matmul(qn, kt)
        }
    }
}

/// `softmax_rows(1 - S(q, k))`.
pub fn inverted_attention<T: Scalar>(
    tape: &Tape<T>,
    q_self: Var,
    k_other: Var,
    mode: SimilarityMode,
) -> Result<Var> {
    let a = similarity(tape, q_self, k_other, mode)?;
    let inv = tape.rsub_scalar(T::one(), a)?;
    tape.softmax_rows(inv)
}

/// `q + FFN(softmax_rows(1 - S(q, k)) · q)`; queries double as values.
pub fn reverse_cross_attention<T: Scalar>(
    tape: &Tape<T>,
    q_self: Var,
    k_other: Var,
    refine: &FfnParams<Var>,
    mode: SimilarityMode,
) -> Result<Var> {
    let w = inverted_attention(tape, q_self, k_other, mode)?;
    let mixed = tape.matmul(w, q_self)?;
    let f = ffn(tape, mixed, refine)?;
    tape.add(q_self, f)
}

pub fn coarse_decouple<T: Scalar>(
    tape: &Tape<T>,
    t_t: Var,
    p: &D2MParams<Var>,
) -> Result<D2MIntermediate<Var>> {
    let h_2d = mhca(tape, p.query_2d, t_t, &p.attn_2d)?;
    let h_3d = mhca(tape, p.query_3d, t_t, &p.attn_3d)?;
    let f2 = ffn(tape, h_2d, &p.coarse_ffn_2d)?;
    let f3 = ffn(tape, h_3d, &p.coarse_ffn_3d)?;
    Ok(D2MIntermediate {
        h_2d,
        h_3d,
        coarse_2d: tape.add(f2, h_2d)?,
        coarse_3d: tape.add(f3, h_3d)?,
    })
}

/// Full module: `(T_2D, T_3D)`, each `m × d` regardless of the token count.
pub fn d2m_forward<T: Scalar>(tape: &Tape<T>, t_t: Var, p: &D2MParams<Var>) -> Result<(Var, Var)> {
    let c = coarse_decouple(tape, t_t, p)?;
    let t_2d = reverse_cross_attention(
        tape,
        c.coarse_2d,
        c.coarse_3d,
        &p.refine_ffn_2d,
        p.similarity,
    )?;
    let t_3d = reverse_cross_attention(
        tape,
        c.coarse_3d,
        c.coarse_2d,
        &p.refine_ffn_3d,
        p.similarity,
    )?;
    Ok((t_2d, t_3d))
}

pub fn d2m_forward_value<T: Scalar>(
    t_t: &Tensor<T>,
    p: &D2MParams<Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let t = tape.constant(t_t.clone());
    let (a, b) = d2m_forward(&tape, t, &bp)?;
    Ok((tape.value(a), tape.value(b)))
}

pub fn coarse_decouple_value<T: Scalar>(
    t_t: &Tensor<T>,
    p: &D2MParams<Tensor<T>>,
) -> Result<D2MIntermediate<Tensor<T>>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let t = tape.constant(t_t.clone());
    let c = coarse_decouple(&tape, t, &bp)?;
    Ok(D2MIntermediate {
        h_2d: tape.value(c.h_2d),
        h_3d: tape.value(c.h_3d),
        coarse_2d: tape.value(c.coarse_2d),
        coarse_3d: tape.value(c.coarse_3d),
    })
}

pub fn reverse_cross_attention_value<T: Scalar>(
    q_self: &Tensor<T>,
    k_other: &Tensor<T>,
    refine: &FfnParams<Tensor<T>>,
    mode: SimilarityMode,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let f = bind_constant(refine, &tape);
    let q = tape.constant(q_self.clone());
    let k = tape.constant(k_other.clone());
    let out = reverse_cross_attention(&tape, q, k, &f, mode)?;
    Ok(tape.value(out))
}

pub fn inverted_attention_value<T: Scalar>(
    q_self: &Tensor<T>,
    k_other: &Tensor<T>,
    mode: SimilarityMode,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let q = tape.constant(q_self.clone());
    let k = tape.constant(k_other.clone());
    let out = inverted_attention(&tape, q, k, mode)?;
    Ok(tape.value(out))
}
