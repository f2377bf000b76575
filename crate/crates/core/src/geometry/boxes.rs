use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle<T: Scalar>(a: T) -> T {
    let two_pi = T::TAU();
    let mut r = a % two_pi;
    if r <= -T::PI() {
        r = r + two_pi;
    } else if r > T::PI() {
        r = r - two_pi;
    }
    r
}

/// Axis-aligned image box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Box2D<T> {
    pub left: T,
    pub top: T,
    pub right: T,
    pub bottom: T,
}

impl<T: Scalar> Box2D<T> {
    pub fn new(left: T, top: T, right: T, bottom: T) -> Result<Self> {
        let b = Self {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.right <= self.left || self.bottom <= self.top {
            return Err(Error::Precondition(format!(
                "invalid 2D box [{}, {}, {}, {}]",
                self.left, self.top, self.right, self.bottom
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> T {
        self.right - self.left
    }

    pub fn height(&self) -> T {
        self.bottom - self.top
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.left, self.top, self.right, self.bottom]
    }
}

/// Oriented 3D box in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Box3D<T> {
    /// Geometric center `(x, y, z)` in meters.
    pub center: [T; 3],
    /// `(length, width, height)` in meters.
    pub dims: [T; 3],
    /// Rotation about the camera `y` axis, in `(-π, π]`.
    pub yaw: T,
}

impl<T: Scalar> Box3D<T> {
    /// Validates the dimensions and normalizes the yaw.
    pub fn new(center: [T; 3], dims: [T; 3], yaw: T) -> Result<Self> {
        let b = Self {
            center,
            dims,
            yaw: normalize_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite =
            self.center.iter().chain(&self.dims).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite {
            return Err(Error::Precondition("3D box has non-finite fields".into()));
        }
        if self.dims.iter().any(|&d| d <= T::zero()) {
            return Err(Error::Precondition(format!(
                "3D box dimensions must be positive, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> T {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Footprint corners `(x, z)` in counter-clockwise order.
    pub fn bev_corners(&self) -> [[T; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let half = T::lit(0.5);
        let (hl, hw) = (self.dims[0] * half, self.dims[1] * half);
        let local = [[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]];
        let mut out = local.map(|[lx, lz]| {
            [
                self.center[0] + c * lx + s * lz,
                self.center[2] - s * lx + c * lz,
            ]
        });
        let signed: T = (0..4)
            .map(|i| {
                let (p, q) = (out[i], out[(i + 1) % 4]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum();
        if signed < T::zero() {
            out.reverse();
        }
        out
    }

    /// Vertical extent `(y_min, y_max)`.
    pub fn y_range(&self) -> (T, T) {
        let hh = self.dims[2] * T::lit(0.5);
        (self.center[1] - hh, self.center[1] + hh)
    }

    /// The eight corners: bottom face (`y_max`) first, then top face.
    pub fn corners(&self) -> [[T; 3]; 8] {
        let bev = self.bev_corners();
        let (y0, y1) = self.y_range();
        let mut out = [[T::zero(); 3]; 8];
        for (i, [x, z]) in bev.iter().enumerate() {
            out[i] = [*x, y1, *z];
            out[i + 4] = [*x, y0, *z];
        }
        out
    }

    /// Whether `p` lies inside or on the box.
    pub fn contains(&self, p: [T; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let lx = c * d[0] - s * d[2];
        let lz = s * d[0] + c * d[2];
        let half = T::lit(0.5);
        lx.abs() <= self.dims[0] * half
            && lz.abs() <= self.dims[1] * half
            && d[1].abs() <= self.dims[2] * half
    }

    /// Applies a rotation by `angle` about the `y` axis followed by a
    /// translation to the whole box.
    pub fn rigid_transform(&self, angle: T, translation: [T; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = self.center;
        Self {
            center: [
                c * x + s * z + translation[0],
                y + translation[1],
                -s * x + c * z + translation[2],
            ],
            dims: self.dims,
            yaw: normalize_angle(self.yaw + angle),
        }
    }
}
