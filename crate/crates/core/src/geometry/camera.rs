use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pinhole intrinsics taken from a KITTI-style `P2` projection matrix.
///
/// `P2 = [[fx, 0, cx, tx], [0, fy, cy, ty], [0, 0, 1, tz]]`; the last
/// column is the stereo baseline offset and is zero for a plain pinhole.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct CameraCalib<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    #[serde(default)]
    pub tx: T,
    #[serde(default)]
    pub ty: T,
    #[serde(default)]
    pub tz: T,
}

impl<T: Scalar> CameraCalib<T> {
    pub fn pinhole(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        Self::from_projection(&[
            fx,
            T::zero(),
            cx,
            T::zero(),
            T::zero(),
            fy,
            cy,
            T::zero(),
            T::zero(),
            T::zero(),
            T::one(),
            T::zero(),
        ])
    }

    /// Extracts intrinsics and offsets from a row-major 3×4 matrix.
    pub fn from_projection(p: &[T; 12]) -> Result<Self> {
        let c = Self {
            fx: p[0],
            fy: p[5],
            cx: p[2],
            cy: p[6],
            tx: p[3],
            ty: p[7],
            tz: p[11],
        };
        if !(c.fx > T::zero() && c.fy > T::zero()) {
            return Err(Error::Precondition(format!(
                "focal lengths must be positive, got fx={} fy={}",
                c.fx, c.fy
            )));
        }
        Ok(c)
    }

    pub fn projection_matrix(&self) -> [T; 12] {
        let z = T::zero();
        [
            self.fx,
            z,
            self.cx,
            self.tx,
            z,
            self.fy,
            self.cy,
            self.ty,
            z,
            z,
            T::one(),
            self.tz,
        ]
    }

    /// Parses the `P2:` row of a KITTI calibration text file.
    pub fn from_kitti_str(text: &str) -> std::result::Result<Self, String> {
        for (lineno, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            if key.trim() != "P2" {
                continue;
            }
            let values: Vec<T> = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map(T::lit)
                        .map_err(|_| format!("line {}: non-numeric field {tok:?}", lineno + 1))
                })
                .collect::<std::result::Result<_, _>>()?;
            let arr: [T; 12] = values.try_into().map_err(|v: Vec<T>| {
                format!("line {}: P2 needs 12 values, got {}", lineno + 1, v.len())
            })?;
            return Self::from_projection(&arr).map_err(|e| format!("line {}: {e}", lineno + 1));
        }
        Err("no P2 row".into())
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project_center(&self, xyz: [T; 3]) -> Result<[T; 2]> {
        let [x, y, z] = xyz;
        let w = z + self.tz;
        if !(z > T::zero()) || !(w > T::zero()) {
            return Err(Error::Precondition(format!(
                "point at depth {z} is not in front of the camera"
            )));
        }
        Ok([
            (self.fx * x + self.cx * z + self.tx) / w,
            (self.fy * y + self.cy * z + self.ty) / w,
        ])
    }

    /// Inverse of [`Self::project_center`] for a known depth `z`.
    pub fn backproject_center(&self, u: T, v: T, depth: T) -> Result<[T; 3]> {
        let w = depth + self.tz;
        if !(depth > T::zero()) || !(w > T::zero()) {
            return Err(Error::Precondition(format!(
                "depth must be positive, got {depth}"
            )));
        }
        Ok([
            (u * w - self.cx * depth - self.tx) / self.fx,
            (v * w - self.cy * depth - self.ty) / self.fy,
            depth,
        ])
    }
}
