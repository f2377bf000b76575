use crate::scalar::Scalar;

use super::boxes::{Box2D, Box3D};

pub fn iou_2d<T: Scalar>(a: &Box2D<T>, b: &Box2D<T>) -> T {
    let (inter, union) = inter_union_2d(a, b);
    inter / union
}

/// Generalized IoU: `IoU - (hull - union) / hull`, in `(-1, 1]`.
pub fn giou_2d<T: Scalar>(a: &Box2D<T>, b: &Box2D<T>) -> T {
    let (inter, union) = inter_union_2d(a, b);
    let hull =
        (a.right.max(b.right) - a.left.min(b.left)) * (a.bottom.max(b.bottom) - a.top.min(b.top));
    inter / union - (hull - union) / hull
}

fn inter_union_2d<T: Scalar>(a: &Box2D<T>, b: &Box2D<T>) -> (T, T) {
    let w = (a.right.min(b.right) - a.left.max(b.left)).max(T::zero());
    let h = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(T::zero());
    let inter = w * h;
    (inter, a.area() + b.area() - inter)
}

fn cross<T: Scalar>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area<T: Scalar>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let twice: T = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice.abs() * T::lit(0.5)
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_polygon<T: Scalar>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let eps = T::GEOM_EPS;
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let edge_len = ((e1[0] - e0[0]).powi(2) + (e1[1] - e0[1]).powi(2)).sqrt();
        let tol = eps * edge_len.max(T::one());
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let dc = cross(e0, e1, cur);
            let dp = cross(e0, e1, prev);
            let cur_in = dc >= -tol;
            let prev_in = dp >= -tol;
            if cur_in != prev_in {
                let t = dp / (dp - dc);
                if t.is_finite() {
                    output.push([
                        prev[0] + t * (cur[0] - prev[0]),
                        prev[1] + t * (cur[1] - prev[1]),
                    ]);
                }
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Ground-plane overlap area of the two footprints.
pub fn bev_intersection_area<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let poly = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&poly)
}

/// 3D IoU together with a flag for numerically degenerate inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou3d<T> {
    pub value: T,
    pub degenerate: bool,
}

pub fn iou_3d_checked<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> Iou3d<T> {
    let (a0, a1) = a.y_range();
    let (b0, b1) = b.y_range();
    let overlap_h = (a1.min(b1) - a0.max(b0)).max(T::zero());
    let area = if overlap_h > T::zero() {
        bev_intersection_area(a, b)
    } else {
        T::zero()
    };
    let inter = area * overlap_h;
    let union = a.volume() + b.volume() - inter;
    let value = inter / union;
    if !value.is_finite() || !(union > T::zero()) {
        log::warn!("degenerate 3D IoU input; returning 0");
        return Iou3d {
            value: T::zero(),
            degenerate: true,
        };
    }
    Iou3d {
        value: value.max(T::zero()).min(T::one()),
        degenerate: false,
    }
}

/// Rotated 3D IoU: footprint polygon intersection times vertical overlap,
/// over the union of volumes.
pub fn iou_3d<T: Scalar>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    iou_3d_checked(a, b).value
}
