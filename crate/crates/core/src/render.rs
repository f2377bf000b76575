//! Wireframe overlays of projected 3D boxes as SVG drawing commands.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraCalib};

/// Corner index pairs of the twelve box edges, in [`Box3D::corners`] order.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub label: String,
    pub color: String,
    pub corners: [[f64; 2]; 8],
}

/// Projects all eight corners; every corner must lie in front of the camera.
pub fn project_box(b: &Box3D<f64>, calib: &CameraCalib<f64>) -> Result<[[f64; 2]; 8]> {
    let mut out = [[0.0; 2]; 8];
    for (o, c) in out.iter_mut().zip(b.corners()) {
        *o = calib.project_center(c).map_err(|_| {
            Error::Precondition(format!(
                "box at depth {} has corners behind the camera",
                b.center[2]
            ))
        })?;
    }
    Ok(out)
}

pub fn overlay(
    b: &Box3D<f64>,
    calib: &CameraCalib<f64>,
    label: &str,
    color: &str,
) -> Result<Overlay> {
    Ok(Overlay {
        label: label.to_owned(),
        color: color.to_owned(),
        corners: project_box(b, calib)?,
    })
}

/// An SVG document of the given canvas size with one `<g>` per overlay.
pub fn render_svg(overlays: &[Overlay], width: u32, height: u32) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for o in overlays {
        let _ = writeln!(
            s,
            r#"  <g id="{}" stroke="{}" fill="none" stroke-width="2">"#,
            escape(&o.label),
            escape(&o.color)
        );
        for (a, b) in EDGES {
            let (p, q) = (o.corners[a], o.corners[b]);
            let _ = writeln!(
                s,
                r#"    <line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
                p[0], p[1], q[0], q[1]
            );
        }
        s.push_str("  </g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
