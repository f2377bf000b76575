//! Self-verification suites shared by the command line and the tests:
//! finite-difference gradient checks per op and the Monte Carlo IoU oracle.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    depth_encoder_layer, ffn, linear, mhca, mhsa, visual_encoder_layer, Activation,
    AttentionParams, EncoderLayerParams, FfnParams,
};
use crate::autodiff::{Tape, Var};
use crate::d2m::{
    coarse_decouple, d2m_forward, inverted_attention, reverse_cross_attention, similarity,
    D2MConfig, D2MParams, SimilarityMode,
};
use crate::error::{Error, Result};
use crate::geometry::{iou3d_monte_carlo, iou_3d, Box3D};
use crate::gradcheck::{grad_check_many, DEFAULT_STEP};
use crate::losses::{
    aggregate_tape, depth_map_focal_loss, focal_loss, focal_loss_logits, giou_loss, l1_loss,
    laplacian_depth_loss, multibin_loss, size3d_iou_loss, FocalParams, LossComponents, LossWeights,
    OrientationBins,
};
use crate::params::{bind_constant, flatten, ParamTree};
use crate::tensor::Tensor;
use crate::toy::{toy_loss_on, ToyConfig, ToyModelParams, ToyWorld, Wiring};

/// Largest accepted relative error of a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    Attention,
    D2m,
    Losses,
    Pipeline,
    All,
}

impl GradScope {
    pub const VARIANTS: [&'static str; 5] = ["attention", "d2m", "losses", "pipeline", "all"];

    fn includes(self, other: GradScope) -> bool {
        self == GradScope::All || self == other
    }
}

impl FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Self::Attention,
            "d2m" => Self::D2m,
            "losses" => Self::Losses,
            "pipeline" => Self::Pipeline,
            "all" => Self::All,
            _ => {
                return Err(Error::Precondition(format!(
                    "unknown scope {s:?}, expected one of {:?}",
                    Self::VARIANTS
                )))
            }
        })
    }
}

impl fmt::Display for GradScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(Self::VARIANTS[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub scope: GradScope,
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

/// Leaves of `tree` replaced, in visit order, by `vars`.
fn rebind<X: ParamTree<Tensor<f64>>>(tree: &X, vars: &[Var]) -> X::Mapped<Var> {
    let mut i = 0;
    tree.map(&mut |_| {
        let v = vars[i];
        i += 1;
        v
    })
}

/// Redraws every leaf of `tree` from `uniform(-0.5, 0.5)`. Initialization-scale
/// weights leave attention nearly uniform, where key-side gradients are so
/// small that finite differences only measure rounding.
fn unit_scale<X: ParamTree<Tensor<f64>> + Clone>(tree: &X, rng: &mut ChaCha8Rng) -> X {
    let mut out = tree.clone();
    out.visit_mut(&mut |t| *t = Tensor::uniform(t.shape().to_vec(), TEST_POINT_SCALE, rng));
    out
}

/// `Σ out ⊙ w`: a scalar whose gradient reaches every output entry.
fn readout(tape: &Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(w.clone());
    tape.sum(tape.mul(out, w)?)
}

struct Suite {
    scope: GradScope,
    rng: ChaCha8Rng,
    out: Vec<OpCheck>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), 1.0, &mut self.rng)
    }

    fn run<F>(&mut self, op: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    {
        let r = grad_check_many(f, &inputs, DEFAULT_STEP)?;
        log::debug!(
            "{} {op}: {:.3e} over {}",
            self.scope,
            r.max_rel_error,
            r.checked
        );
        self.out.push(OpCheck {
            scope: self.scope,
            op: op.to_owned(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
        });
        Ok(())
    }

    /// Checks `f` elementwise against the inputs `xs` with the parameters of
    /// `tree` held fixed, then against all parameters at once along a random
    /// direction `v`, as the derivative of `t ↦ f(x, θ + t·v)` at zero.
    fn run_tree<X, F>(&mut self, op: &str, xs: Vec<Tensor<f64>>, tree: &X, f: F) -> Result<()>
    where
        X: ParamTree<Tensor<f64>>,
        F: Fn(&Tape<f64>, &[Var], &X::Mapped<Var>) -> Result<Var>,
    {
        self.run(op, xs.clone(), |tape, vars| {
            f(tape, vars, &bind_constant(tree, tape))
        })?;
        let dirs: Vec<Tensor<f64>> = flatten(tree)
            .iter()
            .map(|t| self.uniform(&[t.len(), 1]))
            .collect();
        let base = flatten(tree);
        self.run(
            &format!("{op}/params"),
            vec![Tensor::zeros(vec![1, 1])],
            |tape, vars| {
                let mut moved = Vec::with_capacity(base.len());
                for (p, v) in base.iter().zip(&dirs) {
                    let step = tape.matmul(tape.constant(v.clone()), vars[0])?;
                    let step = tape.reshape(step, p.shape().to_vec())?;
                    moved.push(tape.add(tape.constant(p.clone()), step)?);
                }
                let x: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
                f(tape, &x, &rebind(tree, &moved))
            },
        )
    }
}

const D: usize = 8;
const TEST_POINT_SCALE: f64 = 0.5;
const HEADS: usize = 2;

fn attention_suite(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng.clone();
    let attn = unit_scale(&AttentionParams::init(D, HEADS, &mut rng)?, &mut rng);
    let ffn_p = unit_scale(
        &FfnParams::init(D, 12, Activation::Relu, &mut rng),
        &mut rng,
    );
    let enc = unit_scale(&EncoderLayerParams::init(D, HEADS, 12, &mut rng)?, &mut rng);
    s.rng = rng;
    let (q, kv) = (s.uniform(&[3, D]), s.uniform(&[5, D]));
    let w3 = s.uniform(&[3, D]);
    let w5 = s.uniform(&[5, D]);

    let (wl, bl) = (s.uniform(&[D, D]), s.uniform(&[D]));
    s.run("linear", vec![q.clone(), wl, bl], |t, v| {
        readout(t, linear(t, v[0], v[1], v[2])?, &w3)
    })?;
    s.run_tree("ffn", vec![q.clone()], &ffn_p, |t, v, p| {
        readout(t, ffn(t, v[0], p)?, &w3)
    })?;
    s.run_tree("mhca", vec![q.clone(), kv.clone()], &attn, |t, v, p| {
        readout(t, mhca(t, v[0], v[1], p)?, &w3)
    })?;
    s.run_tree("mhsa", vec![kv.clone()], &attn, |t, v, p| {
        readout(t, mhsa(t, v[0], p)?, &w5)
    })?;
    s.run_tree(
        "visual_encoder_layer",
        vec![kv.clone(), q.clone()],
        &enc,
        |t, v, p| readout(t, visual_encoder_layer(t, v[0], v[1], p)?, &w5),
    )?;
    s.run_tree("depth_encoder_layer", vec![kv, q], &enc, |t, v, p| {
        readout(t, depth_encoder_layer(t, v[0], v[1], p)?, &w5)
    })
}

fn d2m_suite(s: &mut Suite) -> Result<()> {
    let cfg = D2MConfig {
        queries: 3,
        width: D,
        heads: HEADS,
        ffn_hidden: 12,
        similarity: SimilarityMode::ScaledDot,
    };
    let mut rng = s.rng.clone();
    let p_dot = unit_scale(&D2MParams::init(&cfg, &mut rng)?, &mut rng);
    let p_cos = D2MParams {
        similarity: SimilarityMode::Cosine,
        ..p_dot.clone()
    };
    let refine = unit_scale(
        &FfnParams::init(D, 12, Activation::Relu, &mut rng),
        &mut rng,
    );
    s.rng = rng;
    let (qa, qb) = (s.uniform(&[3, D]), s.uniform(&[3, D]));
    let text = s.uniform(&[5, D]);
    let w33 = s.uniform(&[3, 3]);
    let w3d = s.uniform(&[3, D]);
    let w3d_b = s.uniform(&[3, D]);

    for (mode, tag) in [
        (SimilarityMode::ScaledDot, "scaled_dot"),
        (SimilarityMode::Cosine, "cosine"),
    ] {
        s.run(
            &format!("similarity/{tag}"),
            vec![qa.clone(), qb.clone()],
            |t, v| readout(t, similarity(t, v[0], v[1], mode)?, &w33),
        )?;
        s.run(
            &format!("inverted_attention/{tag}"),
            vec![qa.clone(), qb.clone()],
            |t, v| readout(t, inverted_attention(t, v[0], v[1], mode)?, &w33),
        )?;
        s.run_tree(
            &format!("reverse_cross_attention/{tag}"),
            vec![qa.clone(), qb.clone()],
            &refine,
            |t, v, p| readout(t, reverse_cross_attention(t, v[0], v[1], p, mode)?, &w3d),
        )?;
    }
    s.run_tree("coarse_decouple", vec![text.clone()], &p_dot, |t, v, p| {
        let c = coarse_decouple(t, v[0], p)?;
        t.add(
            readout(t, c.coarse_2d, &w3d)?,
            readout(t, c.coarse_3d, &w3d_b)?,
        )
    })?;
    for (p, tag) in [(&p_dot, "scaled_dot"), (&p_cos, "cosine")] {
        s.run_tree(
            &format!("d2m_forward/{tag}"),
            vec![text.clone()],
            p,
            |t, v, p| {
                let (a, b) = d2m_forward(t, v[0], p)?;
                t.add(readout(t, a, &w3d)?, readout(t, b, &w3d_b)?)
            },
        )?;
    }
    // L1 readout against targets well away from the outputs keeps |·| smooth.
    let target = Tensor::filled(vec![3, D], 10.0);
    s.run_tree("d2m_forward+l1", vec![text], &p_dot, |t, v, p| {
        let (a, b) = d2m_forward(t, v[0], p)?;
        let tgt = t.constant(target.clone());
        t.add(l1_loss(t, a, tgt)?, l1_loss(t, b, tgt)?)
    })
}

fn losses_suite(s: &mut Suite) -> Result<()> {
    let fp = FocalParams::default();
    let logits = s.uniform(&[4, 5]);
    let targets = [0usize, 3, 4, 1];
    s.run("focal_loss", vec![logits.clone()], |t, v| {
        focal_loss(t, t.softmax_rows(v[0])?, &targets, fp)
    })?;
    s.run("focal_loss_logits", vec![logits.clone()], |t, v| {
        focal_loss_logits(t, v[0], &targets, fp)
    })?;
    s.run("depth_map_focal_loss", vec![logits], |t, v| {
        depth_map_focal_loss(t, t.softmax_rows(v[0])?, &targets, fp)
    })?;

    let pred = s.uniform(&[3, 4]);
    let target = pred.map(|x| x + 0.75);
    s.run("l1_loss", vec![pred, target], |t, v| l1_loss(t, v[0], v[1]))?;

    // Overlapping boxes with no coinciding edges, so min/max are smooth.
    let pred_boxes = Tensor::from_rows(&[vec![0.0, 0.0, 2.0, 3.0], vec![1.0, -1.0, 4.0, 1.5]])?;
    let gt_boxes = Tensor::from_rows(&[vec![0.5, 1.0, 2.5, 3.5], vec![0.2, -0.4, 3.3, 2.2]])?;
    s.run("giou_loss", vec![pred_boxes, gt_boxes], |t, v| {
        giou_loss(t, v[0], v[1])
    })?;
    let disjoint = Tensor::from_rows(&[vec![3.0, 4.0, 5.0, 6.5]])?;
    let gt_far = Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 1.2]])?;
    s.run("giou_loss/disjoint", vec![disjoint, gt_far], |t, v| {
        giou_loss(t, v[0], v[1])
    })?;

    let bins = OrientationBins::new(12)?;
    let angles = [0.3, -2.0, 1.1];
    let ob = s.uniform(&[3, 12]);
    let resid = s.uniform(&[3, 12]);
    s.run("multibin_loss", vec![ob, resid], |t, v| {
        multibin_loss(t, v[0], v[1], &angles, bins)
    })?;

    let depth = Tensor::matrix(3, 1, vec![10.0, 22.0, 35.0])?;
    let sigma = Tensor::matrix(3, 1, vec![0.8, 2.5, 1.3])?;
    let gt = Tensor::matrix(3, 1, vec![12.5, 20.0, 30.0])?;
    s.run("laplacian_depth_loss", vec![depth, sigma, gt], |t, v| {
        laplacian_depth_loss(t, v[0], v[1], v[2])
    })?;

    let dims = Tensor::from_rows(&[vec![4.2, 1.5, 1.7], vec![0.9, 1.8, 0.6]])?;
    let gt_dims = Tensor::from_rows(&[vec![3.9, 1.6, 1.5], vec![1.2, 1.7, 0.8]])?;
    s.run("size3d_iou_loss", vec![dims, gt_dims], |t, v| {
        size3d_iou_loss(t, v[0], v[1])
    })?;

    let comps: Vec<Tensor<f64>> = (0..8)
        .map(|i| Tensor::scalar(0.3 + 0.2 * i as f64))
        .collect();
    s.run("aggregate", comps, |t, v| {
        let c = LossComponents {
            class: v[0],
            lrtb: v[1],
            giou: v[2],
            xy3d: v[3],
            size3d: v[4],
            orien: v[5],
            depth: v[6],
            dmap: v[7],
        };
        let (l2d, l3d, overall) = aggregate_tape(t, c, LossWeights::default())?;
        t.add(t.add(overall, t.scale(l2d, 0.5)?)?, t.scale(l3d, -0.25)?)
    })
}

/// Overall toy loss on the tiny configuration, against its three feature
/// inputs (caption, 2D and 3D visual tokens) and along a parameter direction.
fn pipeline_suite(s: &mut Suite, seed: u64) -> Result<()> {
    let cfg = ToyConfig::tiny();
    let world = ToyWorld::new(&cfg, seed)?;
    let sample = world.generate(1, seed.wrapping_add(1))?.remove(0);
    let params = ToyModelParams::init(&cfg, &mut s.rng)?;
    let inputs = vec![sample.text.clone(), sample.v2d.clone(), sample.v3d.clone()];
    for (wiring, tag) in [
        (Wiring::Matched, "matched"),
        (Wiring::Generalized, "generalized"),
    ] {
        s.run_tree(
            &format!("toy_loss/{tag}"),
            inputs.clone(),
            &params,
            |t, v, p| Ok(toy_loss_on(t, &sample, [v[0], v[1], v[2]], p, &cfg, wiring)?.0),
        )?;
    }
    Ok(())
}

/// Runs the gradient-check suites selected by `scope`.
pub fn gradcheck_suite(scope: GradScope, seed: u64) -> Result<Vec<OpCheck>> {
    let mut all = Vec::new();
    let parts = [
        GradScope::Attention,
        GradScope::D2m,
        GradScope::Losses,
        GradScope::Pipeline,
    ];
    for (i, part) in parts.into_iter().enumerate() {
        if !scope.includes(part) {
            continue;
        }
        let mut s = Suite {
            scope: part,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(i as u64)),
            out: Vec::new(),
        };
        match part {
            GradScope::Attention => attention_suite(&mut s)?,
            GradScope::D2m => d2m_suite(&mut s)?,
            GradScope::Losses => losses_suite(&mut s)?,
            GradScope::Pipeline => pipeline_suite(&mut s, seed)?,
            GradScope::All => unreachable!(),
        }
        all.extend(s.out);
    }
    Ok(all)
}

/// Random oriented box with center within a few meters of `(0, 1.5, 15)`.
pub fn random_box<R: Rng + ?Sized>(rng: &mut R) -> Box3D<f64> {
    let center = [
        rng.gen_range(-2.0..2.0),
        rng.gen_range(0.5..2.5),
        rng.gen_range(12.0..18.0),
    ];
    let dims = [
        rng.gen_range(0.5..5.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
    ];
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Box3D::new(center, dims, yaw).expect("positive dims")
}

/// Pair whose second box is a perturbed copy of the first, so most pairs
/// overlap; every fifth pair is independent.
pub fn random_box_pair<R: Rng + ?Sized>(rng: &mut R, i: usize) -> (Box3D<f64>, Box3D<f64>) {
    let a = random_box(rng);
    if i % 5 == 4 {
        return (a, random_box(rng));
    }
    let b = Box3D::new(
        [
            a.center[0] + rng.gen_range(-1.0..1.0),
            a.center[1] + rng.gen_range(-0.5..0.5),
            a.center[2] + rng.gen_range(-1.0..1.0),
        ],
        a.dims.map(|d| d * rng.gen_range(0.6..1.5)),
        a.yaw + rng.gen_range(-1.0..1.0),
    )
    .expect("positive dims");
    (a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePair {
    pub a: Box3D<f64>,
    pub b: Box3D<f64>,
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub tolerance: f64,
}

impl OraclePair {
    pub fn deviation(&self) -> f64 {
        (self.exact - self.estimate).abs()
    }

    pub fn passed(&self) -> bool {
        self.deviation() <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub samples_per_pair: usize,
    pub pairs: Vec<OraclePair>,
}

impl OracleReport {
    pub fn failures(&self) -> usize {
        self.pairs.iter().filter(|p| !p.passed()).count()
    }

    pub fn max_deviation(&self) -> f64 {
        self.pairs
            .iter()
            .map(OraclePair::deviation)
            .fold(0.0, f64::max)
    }
}

/// Compares [`iou_3d`] with a Monte Carlo estimate on `n` random pairs.
/// Tolerance per pair is `max(0.005, 4·stderr)`.
pub fn iou_oracle(n: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = random_box_pair(&mut rng, i);
        let exact = iou_3d(&a, &b);
        let mc = iou3d_monte_carlo(&a, &b, samples, seed.wrapping_add(i as u64 + 1))?;
        pairs.push(OraclePair {
            a,
            b,
            exact,
            estimate: mc.estimate,
            stderr: mc.stderr,
            tolerance: (4.0 * mc.stderr).max(0.005),
        });
    }
    Ok(OracleReport {
        samples_per_pair: samples,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for name in GradScope::VARIANTS {
            assert_eq!(name.parse::<GradScope>().unwrap().to_string(), name);
        }
        assert!("everything".parse::<GradScope>().is_err());
    }

    #[test]
    fn losses_suite_passes() {
        let r = gradcheck_suite(GradScope::Losses, 0).unwrap();
        assert!(r.len() >= 10);
        for c in &r {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn small_oracle_run() {
        let r = iou_oracle(3, 20_000, 4).unwrap();
        assert_eq!(r.pairs.len(), 3);
        assert_eq!(r.failures(), 0, "{r:?}");
    }
}
