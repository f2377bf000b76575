//! Toy grounding model.
//!
//! ```text
//! T_t ──D2M──> T_2D, T_3D
//! V2D ──visual encoder(T_2D)──> adapter(T_2D) ─┐
//! V3D ──depth encoder(T_3D)───> adapter(T_3D) ─┤
//! query ── V3D ── T_t ── V2D ── FFN ──> heads
//! ```
//!
//! The decoder query attends the 3D stream, the caption and the 2D stream in
//! that order, each step residual. Seven heads read the final query; the
//! depth-map head reads every 3D visual token instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    depth_encoder_layer, ffn, linear, mhca, visual_encoder_layer, Activation, AttentionParams,
    EncoderLayerParams, FfnParams,
};
use crate::autodiff::{Tape, Var};
use crate::d2m::{d2m_forward, D2MConfig, D2MParams};
use crate::error::{Error, Result};
use crate::losses::{
    aggregate_tape, depth_map_focal_loss, focal_loss_logits, giou_loss, l1_loss,
    laplacian_depth_loss, multibin_loss, size3d_iou_loss, LossComponents,
};
use crate::params::{bind_constant, fan_in_uniform, param_tree};
use crate::tensor::Tensor;

use super::synth::SyntheticSample;
use super::ToyConfig;

/// Depth head output is `DEPTH_SCALE · exp(o)` meters.
pub const DEPTH_SCALE: f64 = 20.0;

/// Which text features feed the two visual encoders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// `T_2D` to the 2D encoder, `T_3D` to the depth encoder.
    #[default]
    Matched,
    /// Deliberately crossed: `T_3D` to the 2D encoder and vice versa.
    Swapped,
    /// No decoupling: `T_t` to both encoders.
    Generalized,
}

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

param_tree!(HeadParams {
    leaves: [w1, b1, w2, b2],
    nodes: [],
    keep: []
});

impl HeadParams<Tensor<f64>> {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w1: fan_in_uniform(vec![d, hidden], d, rng),
            b1: fan_in_uniform(vec![hidden], d, rng),
            w2: fan_in_uniform(vec![hidden, out], hidden, rng),
            b2: fan_in_uniform(vec![out], hidden, rng),
        }
    }
}

fn head(tape: &Tape<f64>, x: Var, p: &HeadParams<Var>) -> Result<Var> {
    let h = tape.relu(linear(tape, x, p.w1, p.b1)?)?;
    linear(tape, h, p.w2, p.b2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModelParams<P> {
    pub d2m: D2MParams<P>,
    pub visual_enc: EncoderLayerParams<P>,
    pub depth_enc: EncoderLayerParams<P>,
    pub adapter_2d: AttentionParams<P>,
    pub adapter_3d: AttentionParams<P>,
    pub dec_query: P,
    pub dec_v3d: AttentionParams<P>,
    pub dec_text: AttentionParams<P>,
    pub dec_v2d: AttentionParams<P>,
    pub dec_ffn: FfnParams<P>,
    pub head_class: HeadParams<P>,
    pub head_lrtb: HeadParams<P>,
    pub head_xy3d: HeadParams<P>,
    pub head_size: HeadParams<P>,
    pub head_orient: HeadParams<P>,
    pub head_depth: HeadParams<P>,
    pub head_dmap: HeadParams<P>,
}

param_tree!(ToyModelParams {
    leaves: [dec_query],
    nodes: [
        d2m,
        visual_enc,
        depth_enc,
        adapter_2d,
        adapter_3d,
        dec_v3d,
        dec_text,
        dec_v2d,
        dec_ffn,
        head_class,
        head_lrtb,
        head_xy3d,
        head_size,
        head_orient,
        head_depth,
        head_dmap
    ],
    keep: []
});

impl ToyModelParams<Tensor<f64>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ToyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, hh) = (cfg.d, cfg.heads, cfg.head_hidden);
        let d2m_cfg = D2MConfig {
            queries: cfg.queries,
            width: d,
            heads: h,
            ffn_hidden: cfg.ffn_hidden,
            similarity: cfg.similarity,
        };
        Ok(Self {
            d2m: D2MParams::init(&d2m_cfg, rng)?,
            visual_enc: EncoderLayerParams::init(d, h, cfg.ffn_hidden, rng)?,
            depth_enc: EncoderLayerParams::init(d, h, cfg.ffn_hidden, rng)?,
            adapter_2d: AttentionParams::init(d, h, rng)?,
            adapter_3d: AttentionParams::init(d, h, rng)?,
            dec_query: fan_in_uniform(vec![1, d], d, rng),
            dec_v3d: AttentionParams::init(d, h, rng)?,
            dec_text: AttentionParams::init(d, h, rng)?,
            dec_v2d: AttentionParams::init(d, h, rng)?,
            dec_ffn: FfnParams::init(d, cfg.ffn_hidden, Activation::Relu, rng),
            head_class: HeadParams::init(d, hh, cfg.classes, rng),
            head_lrtb: HeadParams::init(d, hh, 4, rng),
            head_xy3d: HeadParams::init(d, hh, 2, rng),
            head_size: HeadParams::init(d, hh, 3, rng),
            head_orient: HeadParams::init(d, hh, 2 * cfg.orientation_bins, rng),
            head_depth: HeadParams::init(d, hh, 2, rng),
            head_dmap: HeadParams::init(d, hh, cfg.depth_bins.count, rng),
        })
    }
}

/// Decoded head outputs. Positive quantities are already exponentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<P> {
    /// `1 × classes`.
    pub class_logits: P,
    /// `1 × 4`.
    pub lrtb: P,
    /// `1 × 2`.
    pub xy3d: P,
    /// `1 × 3`.
    pub size3d: P,
    /// `1 × B` bin logits and `1 × B` residuals.
    pub orient_logits: P,
    pub orient_residuals: P,
    /// `1 × 1` each.
    pub depth: P,
    pub sigma: P,
    /// `objects × depth bins`.
    pub dmap_logits: P,
    /// Decoupled text streams, absent under [`Wiring::Generalized`].
    pub streams: Option<(P, P)>,
}

pub fn toy_forward(
    tape: &Tape<f64>,
    text: Var,
    v2d: Var,
    v3d: Var,
    p: &ToyModelParams<Var>,
    wiring: Wiring,
) -> Result<HeadOutputs<Var>> {
    let (to_2d, to_3d, streams) = match wiring {
        Wiring::Generalized => (text, text, None),
        Wiring::Matched => {
            let (a, b) = d2m_forward(tape, text, &p.d2m)?;
            (a, b, Some((a, b)))
        }
        Wiring::Swapped => {
            let (a, b) = d2m_forward(tape, text, &p.d2m)?;
            (b, a, Some((a, b)))
        }
    };
    let v2 = visual_encoder_layer(tape, v2d, to_2d, &p.visual_enc)?;
    let v3 = depth_encoder_layer(tape, v3d, to_3d, &p.depth_enc)?;
    let v2 = tape.add(v2, mhca(tape, v2, to_2d, &p.adapter_2d)?)?;
    let v3 = tape.add(v3, mhca(tape, v3, to_3d, &p.adapter_3d)?)?;

    let mut q = p.dec_query;
    q = tape.add(q, mhca(tape, q, v3, &p.dec_v3d)?)?;
    q = tape.add(q, mhca(tape, q, text, &p.dec_text)?)?;
    q = tape.add(q, mhca(tape, q, v2, &p.dec_v2d)?)?;
    q = tape.add(q, ffn(tape, q, &p.dec_ffn)?)?;

    let orient = head(tape, q, &p.head_orient)?;
    let bins = tape.shape(orient)[1] / 2;
    let depth_raw = head(tape, q, &p.head_depth)?;
    let log_depth = tape.slice_cols(depth_raw, 0, 1)?;
    let log_sigma = tape.slice_cols(depth_raw, 1, 1)?;
    Ok(HeadOutputs {
        class_logits: head(tape, q, &p.head_class)?,
        lrtb: tape.exp(head(tape, q, &p.head_lrtb)?)?,
        xy3d: head(tape, q, &p.head_xy3d)?,
        size3d: tape.exp(head(tape, q, &p.head_size)?)?,
        orient_logits: tape.slice_cols(orient, 0, bins)?,
        orient_residuals: tape.slice_cols(orient, bins, bins)?,
        depth: tape.scale(tape.exp(log_depth)?, DEPTH_SCALE)?,
        sigma: tape.exp(log_sigma)?,
        dmap_logits: head(tape, v3, &p.head_dmap)?,
        streams,
    })
}

pub fn toy_forward_value(
    text: &Tensor<f64>,
    v2d: &Tensor<f64>,
    v3d: &Tensor<f64>,
    p: &ToyModelParams<Tensor<f64>>,
    wiring: Wiring,
) -> Result<HeadOutputs<Tensor<f64>>> {
    let tape = Tape::new();
    let bp = bind_constant(p, &tape);
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let o = toy_forward(&tape, c(text), c(v2d), c(v3d), &bp, wiring)?;
    let v = |x: Var| tape.value(x);
    Ok(HeadOutputs {
        class_logits: v(o.class_logits),
        lrtb: v(o.lrtb),
        xy3d: v(o.xy3d),
        size3d: v(o.size3d),
        orient_logits: v(o.orient_logits),
        orient_residuals: v(o.orient_residuals),
        depth: v(o.depth),
        sigma: v(o.sigma),
        dmap_logits: v(o.dmap_logits),
        streams: o.streams.map(|(a, b)| (v(a), v(b))),
    })
}

/// Overall loss of one sample and its components.
///
/// `text` replaces the sample's caption features when given (masked
/// captions during training).
pub fn toy_loss(
    tape: &Tape<f64>,
    sample: &SyntheticSample,
    text: Option<&Tensor<f64>>,
    p: &ToyModelParams<Var>,
    cfg: &ToyConfig,
    wiring: Wiring,
) -> Result<(Var, LossComponents<Var>)> {
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let inputs = [
        c(text.unwrap_or(&sample.text)),
        c(&sample.v2d),
        c(&sample.v3d),
    ];
    toy_loss_on(tape, sample, inputs, p, cfg, wiring)
}

/// [`toy_loss`] with the caption, 2D and 3D features already on the tape;
/// targets still come from `sample`.
pub fn toy_loss_on(
    tape: &Tape<f64>,
    sample: &SyntheticSample,
    [text, v2d, v3d]: [Var; 3],
    p: &ToyModelParams<Var>,
    cfg: &ToyConfig,
    wiring: Wiring,
) -> Result<(Var, LossComponents<Var>)> {
    let c = |t: &Tensor<f64>| tape.constant(t.clone());
    let row = |v: &[f64]| Tensor::matrix(1, v.len(), v.to_vec());
    let o = toy_forward(tape, text, v2d, v3d, p, wiring)?;
    if tape.shape(o.class_logits)[1] != cfg.classes {
        return Err(Error::shape(
            "toy_loss",
            &tape.shape(o.class_logits),
            &[cfg.classes],
        ));
    }

    let class = focal_loss_logits(tape, o.class_logits, &[sample.class], cfg.focal)?;
    let lrtb = l1_loss(tape, o.lrtb, c(&row(&sample.lrtb)?))?;
    let xy3d = l1_loss(tape, o.xy3d, c(&row(&sample.center_2d)?))?;

    let u = tape.slice_cols(o.xy3d, 0, 1)?;
    let v = tape.slice_cols(o.xy3d, 1, 1)?;
    let side = |i: usize| tape.slice_cols(o.lrtb, i, 1);
    let pred_box = tape.concat_cols(&[
        tape.sub(u, side(0)?)?,
        tape.sub(v, side(1)?)?,
        tape.add(u, side(2)?)?,
        tape.add(v, side(3)?)?,
    ])?;
    let giou = giou_loss(tape, pred_box, c(&row(&sample.box2d.to_array())?))?;

    let size3d = size3d_iou_loss(tape, o.size3d, c(&row(&sample.box3d.dims)?))?;
    let orien = multibin_loss(
        tape,
        o.orient_logits,
        o.orient_residuals,
        &[sample.box3d.yaw],
        cfg.bins(),
    )?;
    let depth = laplacian_depth_loss(
        tape,
        o.depth,
        o.sigma,
        c(&Tensor::matrix(1, 1, vec![sample.box3d.center[2]])?),
    )?;
    let bins: Vec<usize> = sample
        .object_depths
        .iter()
        .map(|&z| cfg.depth_bins.index(z))
        .collect();
    let dmap_probs = tape.softmax_rows(o.dmap_logits)?;
    let dmap = depth_map_focal_loss(tape, dmap_probs, &bins, cfg.focal)?;

    let comps = LossComponents {
        class,
        lrtb,
        giou,
        xy3d,
        size3d,
        orien,
        depth,
        dmap,
    };
    let (_, _, overall) = aggregate_tape(tape, comps, cfg.weights)?;
    Ok((overall, comps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::count;
    use crate::toy::ToyWorld;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_shapes() {
        let cfg = ToyConfig::tiny();
        let world = ToyWorld::new(&cfg, 1).unwrap();
        let s = &world.generate(1, 2).unwrap()[0];
        let p = ToyModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(count(&p) > 0);
        let o = toy_forward_value(&s.text, &s.v2d, &s.v3d, &p, Wiring::Matched).unwrap();
        assert_eq!(o.class_logits.shape(), &[1, cfg.classes]);
        assert_eq!(o.lrtb.shape(), &[1, 4]);
        assert_eq!(o.xy3d.shape(), &[1, 2]);
        assert_eq!(o.size3d.shape(), &[1, 3]);
        assert_eq!(o.orient_logits.shape(), &[1, cfg.orientation_bins]);
        assert_eq!(o.orient_residuals.shape(), &[1, cfg.orientation_bins]);
        assert_eq!(o.depth.shape(), &[1, 1]);
        assert_eq!(o.dmap_logits.shape(), &[cfg.objects, cfg.depth_bins.count]);
        let (a, b) = o.streams.unwrap();
        assert_eq!((a.shape(), b.shape()), (&[2, 8][..], &[2, 8][..]));
    }

    #[test]
    fn swapped_wiring_changes_outputs() {
        let cfg = ToyConfig::tiny();
        let world = ToyWorld::new(&cfg, 1).unwrap();
        let s = &world.generate(1, 2).unwrap()[0];
        let p = ToyModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = toy_forward_value(&s.text, &s.v2d, &s.v3d, &p, Wiring::Matched).unwrap();
        let b = toy_forward_value(&s.text, &s.v2d, &s.v3d, &p, Wiring::Swapped).unwrap();
        assert_ne!(a.xy3d, b.xy3d);
        assert_eq!(a.streams, b.streams);
    }
}
