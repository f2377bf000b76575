//! Desk-scale grounding pipeline on synthetic latent-factor data, with the
//! probe that measures whether the two decoupled text streams specialize.

mod experiment;
mod model;
mod optim;
mod probe;
mod synth;
mod train;

use serde::{Deserialize, Serialize};

use crate::d2m::SimilarityMode;
use crate::error::{Error, Result};
use crate::lexical::MaskPolicy;
use crate::losses::{DepthBins, FocalParams, LossWeights, OrientationBins};

pub use experiment::{run_toy, ToyRun, DECOUPLING_MIN_GAP};
pub use model::{
    toy_forward, toy_forward_value, toy_loss, toy_loss_on, HeadOutputs, HeadParams, ToyModelParams,
    Wiring,
};
pub use optim::{AdamW, AdamWConfig};
pub use probe::{fit_probe, pooled_streams, probe_decoupling, r_squared, ProbeFit, ProbeReport};
pub use synth::{synth_generate, SyntheticSample, TokenKind, ToyWorld};
pub use train::{evaluate_components, evaluate_loss, train_toy, TracePoint, TrainOutcome};

/// Sizes, data and optimizer settings of a toy run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    /// D2M query rows per branch.
    pub queries: usize,
    pub similarity: SimilarityMode,
    /// 2D and 3D descriptor factors carried by the caption.
    pub k2: usize,
    pub k3: usize,
    /// Candidate objects per scene, one of which is the target.
    pub objects: usize,
    /// Caption tokens carrying no factor.
    pub filler_tokens: usize,
    pub noise: f64,
    pub classes: usize,
    pub orientation_bins: usize,
    pub depth_bins: DepthBins,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub probe_samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub log_every: usize,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub use_d2m: bool,
    pub use_lca: bool,
    pub lca: MaskPolicy,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d: 12,
            heads: 2,
            ffn_hidden: 24,
            head_hidden: 24,
            queries: 4,
            similarity: SimilarityMode::ScaledDot,
            k2: 7,
            k3: 7,
            objects: 3,
            filler_tokens: 2,
            noise: 0.1,
            classes: 9,
            orientation_bins: 12,
            depth_bins: DepthBins {
                count: 16,
                min: 1e-3,
                max: 60.0,
            },
            train_samples: 8192,
            eval_samples: 256,
            probe_samples: 1000,
            steps: 3000,
            batch: 16,
            log_every: 50,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            use_d2m: true,
            use_lca: false,
            lca: MaskPolicy::default(),
        }
    }
}

impl ToyConfig {
    /// Smallest configuration used by the full-pipeline gradient check.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            ffn_hidden: 8,
            head_hidden: 8,
            queries: 2,
            k2: 3,
            k3: 3,
            objects: 2,
            filler_tokens: 1,
            depth_bins: DepthBins {
                count: 4,
                min: 1e-3,
                max: 60.0,
            },
            orientation_bins: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            ));
        }
        if self.queries == 0 || self.objects == 0 || self.classes < 2 {
            return bad("queries, objects and classes must be positive".into());
        }
        if self.batch == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return bad("batch and sample counts must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        OrientationBins::new(self.orientation_bins)?;
        self.depth_bins.validate()?;
        self.optimizer.validate()?;
        self.lca.validate()?;
        Ok(())
    }

    pub fn bins(&self) -> OrientationBins {
        OrientationBins {
            count: self.orientation_bins,
        }
    }
}
