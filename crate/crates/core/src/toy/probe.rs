//! Linear probes from pooled D2M streams back to the caption factors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::d2m::d2m_forward;
use crate::error::{Error, Result};
use crate::params::bind_constant;
use crate::tensor::Tensor;

use super::model::ToyModelParams;
use super::synth::SyntheticSample;

/// Ridge used when the normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-6;

/// Least-squares map `x ↦ [x, 1]·w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    /// `(inputs + 1) × outputs`; the last row is the intercept.
    pub weights: DMatrix<f64>,
    pub ridge: bool,
}

impl ProbeFit {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let n = self.weights.nrows();
        let row = DVector::from_iterator(n, x.iter().copied().chain(std::iter::once(1.0)));
        (self.weights.transpose() * row).iter().copied().collect()
    }
}

fn design(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let p = xs[0].len();
    DMatrix::from_fn(xs.len(), p + 1, |i, j| if j < p { xs[i][j] } else { 1.0 })
}

/// Ordinary least squares with an intercept, falling back to ridge when
/// `XᵀX` cannot be factored.
pub fn fit_probe(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<ProbeFit> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Precondition(format!(
            "probe needs matching non-empty inputs, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let x = design(xs);
    let q = ys[0].len();
    let y = DMatrix::from_fn(ys.len(), q, |i, j| ys[i][j]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    // Cholesky succeeds on nearly singular systems too; guard on conditioning.
    let eig = xtx.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e))
    });
    let well_posed = lo > hi * 1e-12 && lo > 0.0;
    if well_posed {
        if let Some(ch) = xtx.clone().cholesky() {
            return Ok(ProbeFit {
                weights: ch.solve(&xty),
                ridge: false,
            });
        }
    }
    let n = xtx.nrows();
    let reg = xtx + DMatrix::identity(n, n) * RIDGE_FALLBACK;
    let ch = reg
        .cholesky()
        .ok_or_else(|| Error::Degenerate("probe system is not positive definite".into()))?;
    Ok(ProbeFit {
        weights: ch.solve(&xty),
        ridge: true,
    })
}

/// Coefficient of determination averaged over output columns. Columns with
/// no variance are skipped.
pub fn r_squared(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let q = truth.first().map_or(0, Vec::len);
    let n = truth.len() as f64;
    let mut total = 0.0;
    let mut used = 0;
    for j in 0..q {
        let mean = truth.iter().map(|t| t[j]).sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|t| (t[j] - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            continue;
        }
        let ss_res: f64 = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p[j] - t[j]).powi(2))
            .sum();
        total += 1.0 - ss_res / ss_tot;
        used += 1;
    }
    if used == 0 {
        0.0
    } else {
        total / used as f64
    }
}

/// Row means of the two D2M streams for each sample.
pub fn pooled_streams(
    params: &ToyModelParams<Tensor<f64>>,
    samples: &[SyntheticSample],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    samples
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let p = bind_constant(&params.d2m, &tape);
            let text = tape.constant(s.text.clone());
            let (a, b) = d2m_forward(&tape, text, &p)?;
            let pool =
                |v| -> Result<Vec<f64>> { Ok(tape.value(tape.mean_rows(v)?).data().to_vec()) };
            Ok((pool(a)?, pool(b)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub matched_2d: f64,
    pub matched_3d: f64,
    /// `z2d` from the 3D stream.
    pub crossed_2d: f64,
    /// `z3d` from the 2D stream.
    pub crossed_3d: f64,
    pub samples: usize,
    /// Probes that needed the ridge fallback.
    pub ridge_fallbacks: usize,
}

impl ProbeReport {
    pub fn matched(&self) -> f64 {
        0.5 * (self.matched_2d + self.matched_3d)
    }

    pub fn crossed(&self) -> f64 {
        0.5 * (self.crossed_2d + self.crossed_3d)
    }

    pub fn gap(&self) -> f64 {
        self.matched() - self.crossed()
    }
}

/// Held-out R² of one probe: fit on the first half, score on the second.
fn held_out(xs: &[Vec<f64>], ys: &[Vec<f64>], ridge: &mut usize) -> Result<f64> {
    let half = xs.len() / 2;
    let fit = fit_probe(&xs[..half], &ys[..half])?;
    *ridge += usize::from(fit.ridge);
    let pred: Vec<Vec<f64>> = xs[half..].iter().map(|x| fit.predict(x)).collect();
    Ok(r_squared(&pred, &ys[half..]))
}

/// Fits the matched and crossed probes on fresh samples.
pub fn probe_decoupling(
    params: &ToyModelParams<Tensor<f64>>,
    samples: &[SyntheticSample],
) -> Result<ProbeReport> {
    if samples.len() < 4 {
        return Err(Error::Precondition("probe needs at least 4 samples".into()));
    }
    let pooled = pooled_streams(params, samples)?;
    let (t2, t3): (Vec<_>, Vec<_>) = pooled.into_iter().unzip();
    let z2: Vec<Vec<f64>> = samples.iter().map(|s| s.z2d.clone()).collect();
    let z3: Vec<Vec<f64>> = samples.iter().map(|s| s.z3d.clone()).collect();
    let mut ridge = 0;
    Ok(ProbeReport {
        matched_2d: held_out(&t2, &z2, &mut ridge)?,
        matched_3d: held_out(&t3, &z3, &mut ridge)?,
        crossed_2d: held_out(&t3, &z2, &mut ridge)?,
        crossed_3d: held_out(&t2, &z3, &mut ridge)?,
        samples: samples.len(),
        ridge_fallbacks: ridge,
    })
}
