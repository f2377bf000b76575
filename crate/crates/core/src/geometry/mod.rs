//! Boxes, pinhole projection and box overlap measures.
//!
//! Camera frame follows KITTI: `x` right, `y` down, `z` forward. Yaw is a
//! right-handed rotation about the vertical `y` axis; the box length runs
//! along local `x` and the width along local `z`. A box's `center` is its
//! geometric center, so it spans `center.y ± h/2` vertically.

mod boxes;
mod camera;
mod iou;
mod monte_carlo;

pub use boxes::{normalize_angle, Box2D, Box3D};
pub use camera::CameraCalib;
pub use iou::{bev_intersection_area, giou_2d, iou_2d, iou_3d, iou_3d_checked, Iou3d};
pub use monte_carlo::{iou3d_monte_carlo, MonteCarloIou};
