use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::boxes::Box3D;

/// Samples per independently seeded stream.
const CHUNK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloIou {
    pub estimate: f64,
    pub stderr: f64,
    /// Samples that fell in at least one box.
    pub in_union: u64,
}

/// Sampling estimate of the 3D IoU.
///
/// Points are drawn uniformly from the axis-aligned hull of both boxes; the
/// estimate is `#(in both) / #(in either)` with binomial standard error.
/// Chunk `i` always uses stream `i` of the seed, so the result does not
/// depend on how chunks are scheduled across threads.
pub fn iou3d_monte_carlo<T: Scalar>(
    a: &Box3D<T>,
    b: &Box3D<T>,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloIou> {
    if n_samples < 1000 {
        return Err(Error::Precondition(format!(
            "Monte Carlo IoU needs at least 1000 samples, got {n_samples}"
        )));
    }
    let to64 = |b: &Box3D<T>| Box3D::<f64> {
        center: b.center.map(Scalar::to_f64_lossy),
        dims: b.dims.map(Scalar::to_f64_lossy),
        yaw: b.yaw.to_f64_lossy(),
    };
    let (a, b) = (to64(a), to64(b));

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in a.corners().iter().chain(b.corners().iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }

    let chunks = n_samples.div_ceil(CHUNK);
    let (both, either) = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64);
            let n = CHUNK.min(n_samples - ci * CHUNK);
            let (mut both, mut either) = (0u64, 0u64);
            for _ in 0..n {
                let p = [
                    rng.gen_range(lo[0]..=hi[0]),
                    rng.gen_range(lo[1]..=hi[1]),
                    rng.gen_range(lo[2]..=hi[2]),
                ];
                let (ia, ib) = (a.contains(p), b.contains(p));
                both += (ia && ib) as u64;
                either += (ia || ib) as u64;
            }
            (both, either)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));

    if either == 0 {
        return Ok(MonteCarloIou {
            estimate: 0.0,
            stderr: 0.0,
            in_union: 0,
        });
    }
    let p = both as f64 / either as f64;
    Ok(MonteCarloIou {
        estimate: p,
        stderr: (p * (1.0 - p) / either as f64).sqrt(),
        in_union: either,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_are_exactly_one() {
        let a = Box3D::new([0.3, 1.0, 12.0], [3.9, 1.6, 1.5], 0.4).unwrap();
        let r = iou3d_monte_carlo(&a, &a, 20_000, 3).unwrap();
        assert_eq!(r.estimate, 1.0);
        assert_eq!(r.stderr, 0.0);
    }

    #[test]
    fn disjoint_boxes_are_zero() {
        let a = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([4.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(iou3d_monte_carlo(&a, &b, 10_000, 1).unwrap().estimate, 0.0);
    }

    #[test]
    fn too_few_samples() {
        let a = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(iou3d_monte_carlo(&a, &a, 999, 1).is_err());
    }

    #[test]
    fn offset_cubes_within_three_stderr() {
        let a = Box3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([0.5, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let r = iou3d_monte_carlo(&a, &b, 1_000_000, 9).unwrap();
        assert!((r.estimate - 1.0 / 3.0).abs() <= 3.0 * r.stderr, "{r:?}");
    }
}
