use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::d2m::D2MConfig;
use crate::error::{Error, Result};
use crate::lexical::MaskPolicy;
use crate::losses::LossWeights;
use crate::toy::ToyConfig;

use super::read_text;

/// Environment variable naming the default run configuration.
pub const CONFIG_ENV: &str = "G3D_CONFIG";

/// Input files a run may refer to; each must exist when the config loads.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub annotations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub calib_dir: Option<PathBuf>,
}

impl InputPaths {
    fn all(&self) -> impl Iterator<Item = (&'static str, &PathBuf)> {
        [
            ("annotations", &self.annotations),
            ("embeddings", &self.embeddings),
            ("predictions", &self.predictions),
            ("calib_dir", &self.calib_dir),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| (k, p)))
    }

    /// Resolves relative paths against `base`.
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.annotations,
            &mut self.embeddings,
            &mut self.predictions,
            &mut self.calib_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub d2m: D2MConfig,
    pub lca: MaskPolicy,
    pub weights: LossWeights,
    pub toy: ToyConfig,
    pub paths: InputPaths,
}

/// Parses a TOML run configuration. Relative input paths are taken
/// relative to the config file.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.paths.rebase(base);
    let invalid = |e: Error| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    };
    cfg.lca.validate().map_err(invalid)?;
    cfg.toy.validate().map_err(invalid)?;
    if cfg.d2m.queries == 0 || cfg.d2m.heads == 0 || !cfg.d2m.width.is_multiple_of(cfg.d2m.heads) {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("invalid d2m settings {:?}", cfg.d2m),
        });
    }
    for (field, p) in cfg.paths.all() {
        if !p.exists() {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("paths.{field}: {} does not exist", p.display()),
            });
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?, path)
}
