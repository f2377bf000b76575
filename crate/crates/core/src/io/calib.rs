use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::CameraCalib;

use super::read_text;

/// Reads the `P2` intrinsics from a KITTI calibration text file.
pub fn load_calib(path: &Path) -> Result<CameraCalib<f64>> {
    CameraCalib::from_kitti_str(&read_text(path)?).map_err(|message| Error::Format {
        path: path.to_owned(),
        message,
    })
}

/// Loads `<dir>/<calib_ref>.txt`.
pub fn load_calib_dir(dir: &Path, calib_ref: &str) -> Result<CameraCalib<f64>> {
    load_calib(&dir.join(format!("{calib_ref}.txt")))
}
