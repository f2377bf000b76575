//! Synthetic scenes with known 2D and 3D descriptor factors.
//!
//! A scene holds `objects` candidates seen through two visual streams. Each
//! candidate `j` has descriptor factors `a2d_j`, `a3d_j` and box factors
//! `b2d_j`, `b3d_j`; its visual tokens are
//!
//! ```text
//! V2D_j = a2d_j·C2 + b2d_j·E2 + noise      V3D_j = a3d_j·C3 + b3d_j·E3 + noise
//! ```
//!
//! The caption describes the target by `z2d = a2d_t` and `z3d = a3d_t` through
//! one 2D token `z2d·C2 + type_2d`, one 3D token `z3d·C3 + type_3d` and some
//! filler tokens. Box targets depend only on the target's `b` factors, which
//! never appear in the caption, so predicting them requires picking the
//! right visual token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D, CameraCalib};
use crate::losses::{box_from_lrtb, lrtb_offsets};
use crate::tensor::Tensor;

use super::ToyConfig;

/// Box factors per stream: lrtb for 2D; x, depth, size and yaw for 3D.
pub const B2D: usize = 4;
pub const B3D: usize = 4;

const BASE_DIMS: [f64; 3] = [3.9, 1.6, 1.5];
const CENTER_Y: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Desc2d,
    Desc3d,
    Filler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub z2d: Vec<f64>,
    pub z3d: Vec<f64>,
    /// `tokens × d` caption features.
    pub text: Tensor<f64>,
    pub token_kinds: Vec<TokenKind>,
    /// `objects × d`.
    pub v2d: Tensor<f64>,
    pub v3d: Tensor<f64>,
    pub target: usize,
    pub box3d: Box3D<f64>,
    pub box2d: Box2D<f64>,
    /// Projected 3D center.
    pub center_2d: [f64; 2],
    pub lrtb: [f64; 4],
    pub class: usize,
    /// Depth of every candidate, for the depth-map head.
    pub object_depths: Vec<f64>,
}

/// Fixed projections shared by every sample of one generator.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    d: usize,
    k2: usize,
    k3: usize,
    objects: usize,
    filler_tokens: usize,
    classes: usize,
    noise: f64,
    c2: Vec<Vec<f64>>,
    e2: Vec<Vec<f64>>,
    c3: Vec<Vec<f64>>,
    e3: Vec<Vec<f64>>,
    type_2d: Vec<f64>,
    type_3d: Vec<f64>,
    fillers: Vec<Vec<f64>>,
    class_w: Vec<Vec<f64>>,
    /// Replaces masked caption tokens.
    pub mask_vector: Vec<f64>,
    pub camera: CameraCalib<f64>,
}

fn normal_vec<R: Rng>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_rows<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows).map(|_| normal_vec(cols, scale, rng)).collect()
}

/// `Σ_i x_i · rows_i` added into `out`.
fn accumulate(out: &mut [f64], x: &[f64], rows: &[Vec<f64>]) {
    for (xi, row) in x.iter().zip(rows) {
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Depth in meters of a candidate with 3D box factors `b`.
fn depth_of(b: &[f64]) -> f64 {
    8.0 + 44.0 * sigmoid(b[1])
}

impl ToyWorld {
    /// Draws the projections. Factor directions are scaled by `1/sqrt(d)` so
    /// token features stay O(1).
    pub fn new(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let s = 1.0 / (d as f64).sqrt();
        Ok(Self {
            d,
            k2: cfg.k2,
            k3: cfg.k3,
            objects: cfg.objects,
            filler_tokens: cfg.filler_tokens,
            classes: cfg.classes,
            noise: cfg.noise,
            c2: normal_rows(cfg.k2, d, s, &mut rng),
            e2: normal_rows(B2D, d, s, &mut rng),
            c3: normal_rows(cfg.k3, d, s, &mut rng),
            e3: normal_rows(B3D, d, s, &mut rng),
            type_2d: normal_vec(d, s, &mut rng),
            type_3d: normal_vec(d, s, &mut rng),
            fillers: normal_rows(cfg.filler_tokens, d, s, &mut rng),
            class_w: normal_rows(cfg.k2, cfg.classes, 1.0, &mut rng),
            mask_vector: normal_vec(d, s, &mut rng),
            camera: CameraCalib::pinhole(10.0, 10.0, 0.0, 0.0)?,
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn tokens(&self) -> usize {
        2 + self.filler_tokens
    }

    /// `n` samples; the same `(world, seed)` always yields the same samples.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
        if n == 0 {
            return Err(Error::Precondition("need at least one sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| self.sample(format!("{seed}-{i}"), &mut rng))
            .collect()
    }

    fn noisy(&self, base: Vec<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.noise / (self.d as f64).sqrt();
        base.into_iter()
            .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn sample(&self, id: String, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
        let d = self.d;
        let z2d = normal_vec(self.k2, 1.0, rng);
        let z3d = normal_vec(self.k3, 1.0, rng);
        let target = rng.gen_range(0..self.objects);

        let mut v2d = Vec::with_capacity(self.objects * d);
        let mut v3d = Vec::with_capacity(self.objects * d);
        let mut b3ds = Vec::with_capacity(self.objects);
        let mut b2d_t = Vec::new();
        for j in 0..self.objects {
            let (a2, a3) = if j == target {
                (z2d.clone(), z3d.clone())
            } else {
                (normal_vec(self.k2, 1.0, rng), normal_vec(self.k3, 1.0, rng))
            };
            let b2 = normal_vec(B2D, 1.0, rng);
            let b3 = normal_vec(B3D, 1.0, rng);
            let mut t2 = vec![0.0; d];
            accumulate(&mut t2, &a2, &self.c2);
            accumulate(&mut t2, &b2, &self.e2);
            let mut t3 = vec![0.0; d];
            accumulate(&mut t3, &a3, &self.c3);
            accumulate(&mut t3, &b3, &self.e3);
            v2d.extend(self.noisy(t2, rng));
            v3d.extend(self.noisy(t3, rng));
            if j == target {
                b2d_t = b2;
            }
            b3ds.push(b3);
        }

        let mut text = Vec::with_capacity(self.tokens() * d);
        let mut kinds = Vec::with_capacity(self.tokens());
        let mut t = self.type_2d.clone();
        accumulate(&mut t, &z2d, &self.c2);
        text.extend(self.noisy(t, rng));
        kinds.push(TokenKind::Desc2d);
        let mut t = self.type_3d.clone();
        accumulate(&mut t, &z3d, &self.c3);
        text.extend(self.noisy(t, rng));
        kinds.push(TokenKind::Desc3d);
        for f in &self.fillers {
            text.extend(self.noisy(f.clone(), rng));
            kinds.push(TokenKind::Filler);
        }

        let b3 = &b3ds[target];
        let depth = depth_of(b3);
        let size = (0.2 * b3[2]).exp();
        let box3d = Box3D::new(
            [3.0 * b3[0], CENTER_Y, depth],
            BASE_DIMS.map(|x| x * size),
            2.0 * b3[3].atan(),
        )?;
        let center_2d = self.camera.project_center(box3d.center)?;
        let lrtb = [0, 1, 2, 3].map(|i| 0.8 * (0.4 * b2d_t[i]).exp());
        let box2d = box_from_lrtb(center_2d, lrtb)?;
        debug_assert!(lrtb_offsets(center_2d, &box2d)
            .iter()
            .zip(&lrtb)
            .all(|(a, b)| (a - b).abs() < 1e-9));

        let class = if self.k2 == 0 {
            0
        } else {
            let scores: Vec<f64> = (0..self.classes)
                .map(|c| z2d.iter().zip(&self.class_w).map(|(z, w)| z * w[c]).sum())
                .collect();
            (0..self.classes)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap_or(0)
        };

        Ok(SyntheticSample {
            id,
            z2d,
            z3d,
            text: Tensor::matrix(self.tokens(), d, text)?,
            token_kinds: kinds,
            v2d: Tensor::matrix(self.objects, d, v2d)?,
            v3d: Tensor::matrix(self.objects, d, v3d)?,
            target,
            box3d,
            box2d,
            center_2d,
            lrtb,
            class,
            object_depths: b3ds.iter().map(|b| depth_of(b)).collect(),
        })
    }
}

/// Samples from a world drawn with the default sizes except for `k2`, `k3`
/// and `d`; the world and the samples both derive from `seed`.
pub fn synth_generate(
    n: usize,
    k2: usize,
    k3: usize,
    d: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    let cfg = ToyConfig {
        k2,
        k3,
        d,
        heads: 1,
        ..ToyConfig::default()
    };
    ToyWorld::new(&cfg, seed)?.generate(n, seed.wrapping_add(1))
}
