//! Multi-head attention, feed-forward blocks and the two encoder layers.
//!
//! Projections use the row convention `x·W + b` with `W: [d_in × d_out]`.
//! Each head attends with `softmax(Q_h K_hᵀ / sqrt(d/h)) V_h`; head outputs
//! are concatenated before the output projection.
//!
//! The 2D visual encoder layer runs self-attention, cross-attention with the
//! 2D text stream, then the FFN. The depth encoder layer runs
//! self-attention, FFN, then cross-attention with the 3D text stream.
//! Deformable multi-scale attention is replaced by plain self-attention.
//! Every sublayer is wrapped in a residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{bind_constant, fan_in_uniform, param_tree};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub w_q: P,
    pub b_q: P,
    /// Keys carry no bias: it shifts every logit of a query row equally and
    /// cancels in the softmax.
    pub w_k: P,
    pub w_v: P,
    pub b_v: P,
    pub w_o: P,
    pub b_o: P,
    pub heads: usize,
}

param_tree!(AttentionParams {
    leaves: [w_q, b_q, w_k, w_v, b_v, w_o, b_o],
    nodes: [],
    keep: [heads]
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub activation: Activation,
}

param_tree!(FfnParams {
    leaves: [w1, b1, w2, b2],
    nodes: [],
    keep: [activation]
});

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Precondition(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let mut w = || fan_in_uniform(vec![d, d], d, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let mut b = || fan_in_uniform(vec![d], d, rng);
        let (b_q, b_v, b_o) = (b(), b(), b());
        Ok(Self {
            w_q,
            b_q,
            w_k,
            w_v,
            b_v,
            w_o,
            b_o,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    /// Sets every bias to zero.
    pub fn zero_biases(mut self) -> Self {
        for b in [&mut self.b_q, &mut self.b_v, &mut self.b_o] {
            *b = Tensor::zeros_like(b);
        }
        self
    }
}

impl<T: Scalar> FfnParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: fan_in_uniform(vec![d, hidden], d, rng),
            b1: fan_in_uniform(vec![hidden], d, rng),
            w2: fan_in_uniform(vec![hidden, d], hidden, rng),
            b2: fan_in_uniform(vec![d], hidden, rng),
            activation,
        }
    }

    /// FFN computing `x ↦ x` exactly: identity weights, zero biases.
    pub fn identity(d: usize) -> Self {
        Self {
            w1: Tensor::identity(d),
            b1: Tensor::zeros(vec![d]),
            w2: Tensor::identity(d),
            b2: Tensor::zeros(vec![d]),
            activation: Activation::Identity,
        }
    }

    pub fn zero_biases(mut self) -> Self {
        self.b1 = Tensor::zeros_like(&self.b1);
        self.b2 = Tensor::zeros_like(&self.b2);
        self
    }
}

/// `x·W + b`.
pub fn linear<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

pub fn ffn<T: Scalar>(tape: &Tape<T>, x: Var, p: &FfnParams<Var>) -> Result<Var> {
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = match p.activation {
        Activation::Relu => tape.relu(h)?,
        Activation::Identity => h,
    };
    linear(tape, h, p.w2, p.b2)
}

/// Multi-head cross-attention; also returns each head's attention map.
pub fn mhca_with_weights<T: Scalar>(
    tape: &Tape<T>,
    q_in: Var,
    kv_in: Var,
    p: &AttentionParams<Var>,
) -> Result<(Var, Vec<Var>)> {
    let wq_shape = tape.shape(p.w_q);
    let d = wq_shape[0];
    for x in [q_in, kv_in] {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape("mhca", &s, &wq_shape));
        }
    }
    if p.heads == 0 || !d.is_multiple_of(p.heads) {
        return Err(Error::Precondition(format!(
            "model width {d} is not divisible by {} heads",
            p.heads
        )));
    }
    let dh = d / p.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();

    let q = linear(tape, q_in, p.w_q, p.b_q)?;
    let k = tape.matmul(kv_in, p.w_k)?;
    let v = linear(tape, kv_in, p.w_v, p.b_v)?;

    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((linear(tape, concat, p.w_o, p.b_o)?, weights))
}

pub fn mhca<T: Scalar>(
    tape: &Tape<T>,
    q_in: Var,
    kv_in: Var,
    p: &AttentionParams<Var>,
) -> Result<Var> {
    Ok(mhca_with_weights(tape, q_in, kv_in, p)?.0)
}

pub fn mhsa<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttentionParams<Var>) -> Result<Var> {
    mhca(tape, x, x, p)
}

/// One residual sublayer of an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    SelfAttention,
    CrossAttention,
    FeedForward,
}

/// Sublayer order of the 2D visual encoder layer.
pub const VISUAL_ENCODER_ORDER: [Sublayer; 3] = [
    Sublayer::SelfAttention,
    Sublayer::CrossAttention,
    Sublayer::FeedForward,
];

/// Sublayer order of the depth encoder layer: the FFN precedes
/// cross-attention.
pub const DEPTH_ENCODER_ORDER: [Sublayer; 3] = [
    Sublayer::SelfAttention,
    Sublayer::FeedForward,
    Sublayer::CrossAttention,
];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams<P> {
    pub self_attn: AttentionParams<P>,
    pub cross_attn: AttentionParams<P>,
    pub ffn: FfnParams<P>,
}

param_tree!(EncoderLayerParams {
    leaves: [],
    nodes: [self_attn, cross_attn, ffn],
    keep: []
});

impl<T: Scalar> EncoderLayerParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::init(d, heads, rng)?,
            cross_attn: AttentionParams::init(d, heads, rng)?,
            ffn: FfnParams::init(d, hidden, Activation::Relu, rng),
        })
    }
}

/// Runs the residual sublayers of `order` over `x`, cross-attending to `text`.
pub fn encoder_layer<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    text: Var,
    p: &EncoderLayerParams<Var>,
    order: &[Sublayer],
) -> Result<Var> {
    let mut h = x;
    for sub in order {
        let delta = match sub {
            Sublayer::SelfAttention => mhsa(tape, h, &p.self_attn)?,
            Sublayer::CrossAttention => mhca(tape, h, text, &p.cross_attn)?,
            Sublayer::FeedForward => ffn(tape, h, &p.ffn)?,
        };
        h = tape.add(h, delta)?;
    }
    Ok(h)
}

pub fn visual_encoder_layer<T: Scalar>(
    tape: &Tape<T>,
    v2d: Var,
    t2d: Var,
    p: &EncoderLayerParams<Var>,
) -> Result<Var> {
    encoder_layer(tape, v2d, t2d, p, &VISUAL_ENCODER_ORDER)
}

pub fn depth_encoder_layer<T: Scalar>(
    tape: &Tape<T>,
    v3d: Var,
    t3d: Var,
    p: &EncoderLayerParams<Var>,
) -> Result<Var> {
    encoder_layer(tape, v3d, t3d, p, &DEPTH_ENCODER_ORDER)
}

/// Evaluates `mhca` on plain tensors.
pub fn mhca_value<T: Scalar>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let q = tape.constant(q_in.clone());
    let kv = tape.constant(kv_in.clone());
    let out = mhca(&tape, q, kv, &bp)?;
    Ok(tape.value(out))
}

/// Per-head attention maps of `mhca` on plain tensors.
pub fn attention_weights<T: Scalar>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    p: &AttentionParams<Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let q = tape.constant(q_in.clone());
    let kv = tape.constant(kv_in.clone());
    let (_, w) = mhca_with_weights(&tape, q, kv, &bp)?;
    Ok(w.into_iter().map(|v| tape.value(v)).collect())
}

pub fn mhsa_value<T: Scalar>(x: &Tensor<T>, p: &AttentionParams<Tensor<T>>) -> Result<Tensor<T>> {
    mhca_value(x, x, p)
}

pub fn ffn_value<T: Scalar>(x: &Tensor<T>, p: &FfnParams<Tensor<T>>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let x = tape.constant(x.clone());
    let out = ffn(&tape, x, &bp)?;
    Ok(tape.value(out))
}

pub fn encoder_layer_value<T: Scalar>(
    x: &Tensor<T>,
    text: &Tensor<T>,
    p: &EncoderLayerParams<Tensor<T>>,
    order: &[Sublayer],
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let x = tape.constant(x.clone());
    let text = tape.constant(text.clone());
    let out = encoder_layer(&tape, x, text, &bp, order)?;
    Ok(tape.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn width_not_divisible_by_heads() {
        assert!(AttentionParams::<Tensor<f64>>::init(6, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut r = rng(1);
        let p = AttentionParams::<Tensor<f64>>::init(4, 2, &mut r).unwrap();
        let q = Tensor::uniform(vec![2, 4], 1.0, &mut r);
        let kv = Tensor::uniform(vec![3, 5], 1.0, &mut r);
        assert!(matches!(mhca_value(&q, &kv, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng(2);
        let p = AttentionParams::<Tensor<f64>>::init(8, 2, &mut r).unwrap();
        let q = Tensor::uniform(vec![3, 8], 1.0, &mut r);
        let kv = Tensor::uniform(vec![5, 8], 1.0, &mut r);
        for w in attention_weights(&q, &kv, &p).unwrap() {
            assert_eq!(w.shape(), &[3, 5]);
            for i in 0..3 {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_gives_projected_value() {
        let mut r = rng(3);
        let p = AttentionParams::<Tensor<f64>>::init(4, 2, &mut r).unwrap();
        let q = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let kv = Tensor::uniform(vec![1, 4], 1.0, &mut r);
        let out = mhca_value(&q, &kv, &p).unwrap();
        // (kv·W_v + b_v)·W_o + b_o, identical for every query row
        let v = kv
            .matmul(&p.w_v)
            .unwrap()
            .add(&p.b_v.reshape(vec![1, 4]).unwrap())
            .unwrap();
        let expect = v
            .matmul(&p.w_o)
            .unwrap()
            .add(&p.b_o.reshape(vec![1, 4]).unwrap())
            .unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at(i, j) - expect.at(0, j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicated_keys_match_single_key() {
        let mut r = rng(4);
        let p = AttentionParams::<Tensor<f64>>::init(4, 2, &mut r).unwrap();
        let q = Tensor::uniform(vec![2, 4], 1.0, &mut r);
        let kv = Tensor::uniform(vec![1, 4], 1.0, &mut r);
        let kv3 = Tensor::from_rows(&[kv.row(0).to_vec(), kv.row(0).to_vec(), kv.row(0).to_vec()])
            .unwrap();
        let a = mhca_value(&q, &kv, &p).unwrap();
        let b = mhca_value(&q, &kv3, &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut r = rng(5);
        let p = AttentionParams::<Tensor<f64>>::init(4, 2, &mut r).unwrap();
        let x = Tensor::uniform(vec![3, 4], 1.0, &mut r);
        let perm = [2, 0, 1];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let y = mhsa_value(&x, &p).unwrap();
        let yp = mhsa_value(&xp, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..4 {
                assert!((yp.at(k, j) - y.at(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn encoder_orders_differ_in_ffn_position() {
        let ffn_pos = |o: &[Sublayer]| o.iter().position(|s| *s == Sublayer::FeedForward);
        let cross_pos = |o: &[Sublayer]| o.iter().position(|s| *s == Sublayer::CrossAttention);
        assert!(ffn_pos(&VISUAL_ENCODER_ORDER) > cross_pos(&VISUAL_ENCODER_ORDER));
        assert!(ffn_pos(&DEPTH_ENCODER_ORDER) < cross_pos(&DEPTH_ENCODER_ORDER));
    }

    #[test]
    fn visual_layer_shape_and_zero_text_injection() {
        let mut r = rng(6);
        let mut p = EncoderLayerParams::<Tensor<f64>>::init(32, 4, 64, &mut r).unwrap();
        p.cross_attn = p.cross_attn.zero_biases();
        let v = Tensor::uniform(vec![10, 32], 1.0, &mut r);
        let t = Tensor::<f64>::zeros(vec![6, 32]);
        let out = encoder_layer_value(&v, &t, &p, &VISUAL_ENCODER_ORDER).unwrap();
        assert_eq!(out.shape(), &[10, 32]);
        let no_cross = [Sublayer::SelfAttention, Sublayer::FeedForward];
        let reduced = encoder_layer_value(&v, &t, &p, &no_cross).unwrap();
        assert!(out.max_abs_diff(&reduced).unwrap() < 1e-13);
    }

    #[test]
    fn depth_layer_shape_and_zero_text_injection() {
        let mut r = rng(7);
        let mut p = EncoderLayerParams::<Tensor<f64>>::init(32, 4, 64, &mut r).unwrap();
        p.cross_attn = p.cross_attn.zero_biases();
        let v = Tensor::uniform(vec![8, 32], 1.0, &mut r);
        let t = Tensor::<f64>::zeros(vec![6, 32]);
        let out = encoder_layer_value(&v, &t, &p, &DEPTH_ENCODER_ORDER).unwrap();
        assert_eq!(out.shape(), &[8, 32]);
        let no_cross = [Sublayer::SelfAttention, Sublayer::FeedForward];
        let reduced = encoder_layer_value(&v, &t, &p, &no_cross).unwrap();
        assert!(out.max_abs_diff(&reduced).unwrap() < 1e-13);
    }
}
