use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::probe::{probe_decoupling, ProbeReport};
use super::train::{sub_seed, train_toy, TracePoint, TrainOutcome};
use super::ToyConfig;

/// Smallest matched-minus-crossed probe R² that counts as decoupled.
pub const DECOUPLING_MIN_GAP: f64 = 0.2;

/// One seed of the decoupling experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub seed: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<TracePoint>,
    pub trained: ProbeReport,
    pub untrained: ProbeReport,
}

impl ToyRun {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Trains on `seed`, then probes the trained and the initial weights on a
/// fresh probe set from the same world.
pub fn run_toy(cfg: &ToyConfig, seed: u64) -> Result<(ToyRun, TrainOutcome)> {
    let out = train_toy(cfg, seed)?;
    let probe = out.world.generate(cfg.probe_samples, sub_seed(seed, 6))?;
    let run = ToyRun {
        seed,
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        trace: out.trace.clone(),
        trained: probe_decoupling(&out.trained, &probe)?,
        untrained: probe_decoupling(&out.initial, &probe)?,
    };
    Ok((run, out))
}
