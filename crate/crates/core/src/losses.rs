//! Grounding losses: classification, 2D regression, 3D attributes and the
//! depth map.
//!
//! Every loss has a tape form taking [`Var`] predictions and plain-slice
//! targets, and a `*_value` form on tensors that builds a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box2D};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp on the target-class probability.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_CLASSES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

fn one_hot<T: Scalar>(targets: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Precondition(format!(
                "target class {t} out of range for {classes} classes"
            )));
        }
        data[i * classes + t] = T::one();
    }
    Tensor::matrix(targets.len(), classes, data)
}

fn check_rows(tape_shape: &[usize], n: usize, op: &'static str) -> Result<()> {
    if tape_shape.len() != 2 || tape_shape[0] != n {
        return Err(Error::shape(op, tape_shape, &[n]));
    }
    Ok(())
}

/// `(1 - p_t)^γ · ln p_t` pieces shared by both focal entry points.
fn focal_from_pt<T: Scalar>(
    tape: &Tape<T>,
    p_t: Var,
    log_p_t: Var,
    fp: FocalParams,
) -> Result<Var> {
    let one_minus = tape.rsub_scalar(T::one(), p_t)?;
    let zeros = tape.constant(Tensor::zeros(tape.shape(one_minus)));
    let one_minus = tape.maximum(one_minus, zeros)?;
    let modulating = tape.powf(one_minus, T::lit(fp.gamma))?;
    let per_row = tape.mul(modulating, log_p_t)?;
    let mean = tape.mean(per_row)?;
    tape.scale(mean, -T::lit(fp.alpha))
}

/// Mean focal loss over rows of a probability matrix `[n×C]`.
pub fn focal_loss<T: Scalar>(
    tape: &Tape<T>,
    probs: Var,
    targets: &[usize],
    fp: FocalParams,
) -> Result<Var> {
    let shape = tape.shape(probs);
    check_rows(&shape, targets.len(), "focal_loss")?;
    let mask = tape.constant(one_hot(targets, shape[1])?);
    let picked = tape.mul(probs, mask)?;
    let p_t = tape.row_sums(picked)?;
    let floor = T::lit(PROB_FLOOR);
    if tape.value(p_t).data().iter().any(|&p| p < floor) {
        log::warn!("focal loss: target probability below {PROB_FLOOR:e}, clamping");
    }
    let floor_t = tape.constant(Tensor::filled(tape.shape(p_t), floor));
    let p_t = tape.maximum(p_t, floor_t)?;
    let log_p = tape.ln(p_t)?;
    focal_from_pt(tape, p_t, log_p, fp)
}

/// Focal loss on unnormalized logits, using a log-softmax for stability.
pub fn focal_loss_logits<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    targets: &[usize],
    fp: FocalParams,
) -> Result<Var> {
    let shape = tape.shape(logits);
    check_rows(&shape, targets.len(), "focal_loss_logits")?;
    let mask = tape.constant(one_hot(targets, shape[1])?);
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(logp, mask)?;
    let log_p_t = tape.row_sums(picked)?;
    let p_t = tape.exp(log_p_t)?;
    focal_from_pt(tape, p_t, log_p_t, fp)
}

fn validate_distributions<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    if probs.rank() != 2 {
        return Err(Error::Precondition("probabilities must be a matrix".into()));
    }
    for (i, row) in probs.data().chunks(probs.cols()).enumerate() {
        let s: f64 = row.iter().map(|p| p.to_f64_lossy()).sum();
        if row.iter().any(|&p| !(p >= T::zero())) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!(
                "row {i} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

pub fn focal_loss_value<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    fp: FocalParams,
) -> Result<T> {
    validate_distributions(probs)?;
    let tape = Tape::new();
    let p = tape.constant(probs.clone());
    let out = focal_loss(&tape, p, targets, fp)?;
    Ok(tape.scalar(out))
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Distances from a projected 3D center `(u, v)` to the four 2D box edges:
/// `(u - left, v - top, right - u, bottom - v)`.
pub fn lrtb_offsets<T: Scalar>(center: [T; 2], b: &Box2D<T>) -> [T; 4] {
    [
        center[0] - b.left,
        center[1] - b.top,
        b.right - center[0],
        b.bottom - center[1],
    ]
}

/// Inverse of [`lrtb_offsets`].
pub fn box_from_lrtb<T: Scalar>(center: [T; 2], lrtb: [T; 4]) -> Result<Box2D<T>> {
    Box2D::new(
        center[0] - lrtb[0],
        center[1] - lrtb[1],
        center[0] + lrtb[2],
        center[1] + lrtb[3],
    )
}

/// Mean `1 - GIoU` over rows of `[n×4]` boxes in `(left, top, right, bottom)`.
pub fn giou_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    for v in [pred, target] {
        let t = tape.value(v);
        if t.rank() != 2 || t.cols() != 4 {
            return Err(Error::shape("giou_loss", t.shape(), &[4]));
        }
        for row in t.data().chunks(4) {
            Box2D::new(row[0], row[1], row[2], row[3])?;
        }
    }
    let col = |v: Var, i: usize| tape.slice_cols(v, i, 1);
    let (pl, pt, pr, pb) = (col(pred, 0)?, col(pred, 1)?, col(pred, 2)?, col(pred, 3)?);
    let (tl, tt, tr, tb) = (
        col(target, 0)?,
        col(target, 1)?,
        col(target, 2)?,
        col(target, 3)?,
    );
    let area = |l: Var, t: Var, r: Var, b: Var| -> Result<Var> {
        let w = tape.sub(r, l)?;
        let h = tape.sub(b, t)?;
        tape.mul(w, h)
    };
    let ap = area(pl, pt, pr, pb)?;
    let at = area(tl, tt, tr, tb)?;

    let iw = tape.sub(tape.minimum(pr, tr)?, tape.maximum(pl, tl)?)?;
    let ih = tape.sub(tape.minimum(pb, tb)?, tape.maximum(pt, tt)?)?;
    let inter = tape.mul(tape.relu(iw)?, tape.relu(ih)?)?;
    let union = tape.sub(tape.add(ap, at)?, inter)?;

    let hw = tape.sub(tape.maximum(pr, tr)?, tape.minimum(pl, tl)?)?;
    let hh = tape.sub(tape.maximum(pb, tb)?, tape.minimum(pt, tt)?)?;
    let hull = tape.mul(hw, hh)?;

    let iou = tape.div(inter, union)?;
    let slack = tape.div(tape.sub(hull, union)?, hull)?;
    let giou = tape.sub(iou, slack)?;
    let loss = tape.rsub_scalar(T::one(), giou)?;
    tape.mean(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionLosses<T> {
    pub lrtb: T,
    pub xy3d: T,
    pub giou: T,
}

/// The three 2D regression terms for matched predictions and targets.
///
/// `lrtb` tensors are `[n×4]` edge offsets, `xy3d` tensors `[n×2]` projected
/// centers, and the boxes `[n×4]`.
pub fn regression_losses<T: Scalar>(
    pred_lrtb: &Tensor<T>,
    target_lrtb: &Tensor<T>,
    pred_xy3d: &Tensor<T>,
    target_xy3d: &Tensor<T>,
    pred_boxes: &Tensor<T>,
    target_boxes: &Tensor<T>,
) -> Result<RegressionLosses<T>> {
    let tape = Tape::new();
    let c = |t: &Tensor<T>| tape.constant(t.clone());
    let lrtb = l1_loss(&tape, c(pred_lrtb), c(target_lrtb))?;
    let xy3d = l1_loss(&tape, c(pred_xy3d), c(target_xy3d))?;
    let giou = giou_loss(&tape, c(pred_boxes), c(target_boxes))?;
    Ok(RegressionLosses {
        lrtb: tape.scalar(lrtb),
        xy3d: tape.scalar(xy3d),
        giou: tape.scalar(giou),
    })
}

/// Evenly spaced orientation bins with centers `-π + i·2π/B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrientationBins {
    pub count: usize,
}

impl Default for OrientationBins {
    fn default() -> Self {
        Self { count: 12 }
    }
}

impl OrientationBins {
    pub fn new(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Precondition(format!(
                "need at least two orientation bins, got {count}"
            )));
        }
        Ok(Self { count })
    }

    pub fn width<T: Scalar>(&self) -> T {
        T::TAU() / T::lit(self.count as f64)
    }

    pub fn center<T: Scalar>(&self, i: usize) -> T {
        -T::PI() + T::lit(i as f64) * self.width::<T>()
    }

    /// Bin index and residual of an angle; the residual lies in
    /// `(-π/B, π/B]`.
    pub fn encode<T: Scalar>(&self, angle: T) -> (usize, T) {
        let a = normalize_angle(angle);
        let x = (a + T::PI()) / self.width::<T>();
        let i = (x - T::lit(0.5)).ceil().to_usize().unwrap_or(0) % self.count;
        let mut r = normalize_angle(a - self.center::<T>(i));
        let half = self.width::<T>() * T::lit(0.5);
        if r <= -half {
            r = r + self.width::<T>();
            return ((i + self.count - 1) % self.count, r);
        }
        (i, r)
    }

    pub fn decode<T: Scalar>(&self, bin: usize, residual: T) -> T {
        normalize_angle(self.center::<T>(bin) + residual)
    }
}

/// Mean over samples of cross-entropy on the target bin plus the L1 error
/// of that bin's residual.
pub fn multibin_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    residuals: Var,
    target_angles: &[T],
    bins: OrientationBins,
) -> Result<Var> {
    let n = target_angles.len();
    for v in [logits, residuals] {
        let s = tape.shape(v);
        if s.len() != 2 || s[0] != n || s[1] != bins.count {
            return Err(Error::shape("multibin_loss", &s, &[n, bins.count]));
        }
    }
    let encoded: Vec<(usize, T)> = target_angles.iter().map(|&a| bins.encode(a)).collect();
    let idx: Vec<usize> = encoded.iter().map(|e| e.0).collect();
    let mask = tape.constant(one_hot(&idx, bins.count)?);

    let logp = tape.log_softmax_rows(logits)?;
    let ce_rows = tape.row_sums(tape.mul(logp, mask)?)?;
    let ce = tape.neg(tape.mean(ce_rows)?)?;

    let picked = tape.row_sums(tape.mul(residuals, mask)?)?;
    let target = tape.constant(Tensor::matrix(n, 1, encoded.iter().map(|e| e.1).collect())?);
    let l1 = l1_loss(tape, picked, target)?;
    tape.add(ce, l1)
}

pub fn multibin_loss_value<T: Scalar>(
    logits: &Tensor<T>,
    residuals: &Tensor<T>,
    target_angles: &[T],
    bins: OrientationBins,
) -> Result<T> {
    let tape = Tape::new();
    let out = multibin_loss(
        &tape,
        tape.constant(logits.clone()),
        tape.constant(residuals.clone()),
        target_angles,
        bins,
    )?;
    Ok(tape.scalar(out))
}

/// Mean of `(√2/σ)·|d - d*| + ln σ`. Can be negative when `σ < 1`.
pub fn laplacian_depth_loss<T: Scalar>(
    tape: &Tape<T>,
    depth: Var,
    sigma: Var,
    target: Var,
) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|&s| !(s > T::zero())) {
        return Err(Error::Precondition(
            "depth uncertainty must be positive".into(),
        ));
    }
    let err = tape.abs(tape.sub(depth, target)?)?;
    let weighted = tape.scale(tape.div(err, sigma)?, T::SQRT_2())?;
    let total = tape.add(weighted, tape.ln(sigma)?)?;
    tape.mean(total)
}

pub fn laplacian_depth_loss_value<T: Scalar>(depth: T, sigma: T, target: T) -> Result<T> {
    let tape = Tape::new();
    let c = |x: T| tape.constant(Tensor::scalar(x));
    let out = laplacian_depth_loss(&tape, c(depth), c(sigma), c(target))?;
    Ok(tape.scalar(out))
}

/// Mean `1 - IoU` of boxes sharing center and yaw, so only the `[n×3]`
/// dimensions matter.
pub fn size3d_iou_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    for v in [pred, target] {
        let t = tape.value(v);
        if t.rank() != 2 || t.cols() != 3 {
            return Err(Error::shape("size3d_iou_loss", t.shape(), &[3]));
        }
        if t.data().iter().any(|&d| !(d > T::zero())) {
            return Err(Error::Precondition("3D dimensions must be positive".into()));
        }
    }
    let volume = |v: Var| -> Result<Var> {
        let a = tape.mul(tape.slice_cols(v, 0, 1)?, tape.slice_cols(v, 1, 1)?)?;
        tape.mul(a, tape.slice_cols(v, 2, 1)?)
    };
    let inter = volume(tape.minimum(pred, target)?)?;
    let union = tape.sub(tape.add(volume(pred)?, volume(target)?)?, inter)?;
    let iou = tape.div(inter, union)?;
    tape.mean(tape.rsub_scalar(T::one(), iou)?)
}

pub fn size3d_iou_loss_value<T: Scalar>(pred: [T; 3], target: [T; 3]) -> Result<T> {
    let tape = Tape::new();
    let out = size3d_iou_loss(
        &tape,
        tape.constant(Tensor::matrix(1, 3, pred.to_vec())?),
        tape.constant(Tensor::matrix(1, 3, target.to_vec())?),
    )?;
    Ok(tape.scalar(out))
}

/// Linear-increasing depth discretization: bin `i` has width
/// `(i + 1)·Δ` with `Δ = 2(max - min) / (N(N + 1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthBins {
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self {
            count: 80,
            min: 1e-3,
            max: 60.0,
        }
    }
}

impl DepthBins {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.max > self.min) || !(self.min >= 0.0) {
            return Err(Error::Precondition(format!("invalid depth bins {self:?}")));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        let n = self.count as f64;
        2.0 * (self.max - self.min) / (n * (n + 1.0))
    }

    /// Lower edge of bin `i`; `edge(count) == max`.
    pub fn edge(&self, i: usize) -> f64 {
        let i = i as f64;
        self.min + self.step() * i * (i + 1.0) / 2.0
    }

    /// Bin holding `depth`, clamped into `[0, count)`.
    pub fn index(&self, depth: f64) -> usize {
        let d = (depth - self.min).max(0.0);
        let x = -0.5 + 0.5 * (1.0 + 8.0 * d / self.step()).sqrt();
        let mut i = (x.floor().max(0.0) as usize).min(self.count - 1);
        // guard the floor against roundoff at the edges
        while i + 1 < self.count && depth >= self.edge(i + 1) {
            i += 1;
        }
        while i > 0 && depth < self.edge(i) {
            i -= 1;
        }
        i
    }
}

/// Focal loss per pixel over depth bins, averaged over pixels.
pub fn depth_map_focal_loss<T: Scalar>(
    tape: &Tape<T>,
    probs: Var,
    target_bins: &[usize],
    fp: FocalParams,
) -> Result<Var> {
    focal_loss(tape, probs, target_bins, fp)
}

pub fn depth_map_focal_loss_value<T: Scalar>(
    probs: &Tensor<T>,
    target_bins: &[usize],
    fp: FocalParams,
) -> Result<T> {
    focal_loss_value(probs, target_bins, fp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub lrtb: f64,
    pub giou: f64,
    pub xy3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            lrtb: 5.0,
            giou: 2.0,
            xy3d: 10.0,
        }
    }
}

/// The eight loss components, as plain scalars or as tape nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<S> {
    pub class: S,
    pub lrtb: S,
    pub giou: S,
    pub xy3d: S,
    pub size3d: S,
    pub orien: S,
    pub depth: S,
    pub dmap: S,
}

impl<S: Copy> LossComponents<S> {
    pub fn named(&self) -> [(&'static str, S); 8] {
        [
            ("class", self.class),
            ("lrtb", self.lrtb),
            ("giou", self.giou),
            ("xy3d", self.xy3d),
            ("size3d", self.size3d),
            ("orien", self.orien),
            ("depth", self.depth),
            ("dmap", self.dmap),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub components: LossComponents<T>,
    pub l2d: T,
    pub l3d: T,
    pub overall: T,
}

/// Weighted totals; the 2D sum is accumulated left to right.
pub fn aggregate<T: Scalar>(c: LossComponents<T>, w: LossWeights) -> Result<LossBreakdown<T>> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteComponent { component: name });
        }
    }
    let l2d = T::lit(w.class) * c.class
        + T::lit(w.lrtb) * c.lrtb
        + T::lit(w.giou) * c.giou
        + T::lit(w.xy3d) * c.xy3d;
    let l3d = c.size3d + c.orien + c.depth;
    Ok(LossBreakdown {
        components: c,
        l2d,
        l3d,
        overall: l2d + l3d + c.dmap,
    })
}

/// Tape counterpart of [`aggregate`], returning `(l2d, l3d, overall)`.
pub fn aggregate_tape<T: Scalar>(
    tape: &Tape<T>,
    c: LossComponents<Var>,
    w: LossWeights,
) -> Result<(Var, Var, Var)> {
    for (name, v) in c.named() {
        if !tape.scalar(v).is_finite() {
            return Err(Error::NonFiniteComponent { component: name });
        }
    }
    let l2d = tape.add(
        tape.add(
            tape.add(
                tape.scale(c.class, T::lit(w.class))?,
                tape.scale(c.lrtb, T::lit(w.lrtb))?,
            )?,
            tape.scale(c.giou, T::lit(w.giou))?,
        )?,
        tape.scale(c.xy3d, T::lit(w.xy3d))?,
    )?;
    let l3d = tape.add(tape.add(c.size3d, c.orien)?, c.depth)?;
    let overall = tape.add(tape.add(l2d, l3d)?, c.dmap)?;
    Ok((l2d, l3d, overall))
}
