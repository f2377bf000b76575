use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lexical::{partition_certainty, record_rng, CaptionRecord, SplitOutcome};
use crate::losses::LossComponents;
use crate::params::{bind, bind_constant, flatten, gradients, unflatten};
use crate::tensor::Tensor;

use super::model::{toy_loss, ToyModelParams, Wiring};
use super::optim::AdamW;
use super::synth::{SyntheticSample, ToyWorld};
use super::ToyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous point.
    pub train_loss: f64,
    pub grad_norm: f64,
    /// Share of training captions masked since the previous point.
    pub masked_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ToyModelParams<Tensor<f64>>,
    pub trained: ToyModelParams<Tensor<f64>>,
    pub world: ToyWorld,
    pub trace: Vec<TracePoint>,
    /// Mean overall loss on the held-out evaluation set.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn wiring(cfg: &ToyConfig) -> Wiring {
        if cfg.use_d2m {
            Wiring::Matched
        } else {
            Wiring::Generalized
        }
    }
}

/// Seeds derived from the run seed for the world, data and model.
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
}

/// Mean overall loss of `params` over `samples`, without masking.
pub fn evaluate_loss(
    params: &ToyModelParams<Tensor<f64>>,
    samples: &[SyntheticSample],
    cfg: &ToyConfig,
    wiring: Wiring,
) -> Result<f64> {
    Ok(evaluate_components(params, samples, cfg, wiring)?.0)
}

/// Mean overall loss and mean unweighted components.
pub fn evaluate_components(
    params: &ToyModelParams<Tensor<f64>>,
    samples: &[SyntheticSample],
    cfg: &ToyConfig,
    wiring: Wiring,
) -> Result<(f64, LossComponents<f64>)> {
    let mut total = 0.0;
    let mut parts = [0.0; 8];
    for s in samples {
        let tape = Tape::new();
        let bp = bind_constant(params, &tape);
        let (overall, comps) = toy_loss(&tape, s, None, &bp, cfg, wiring)?;
        total += tape.scalar(overall);
        for (acc, (_, v)) in parts.iter_mut().zip(comps.named()) {
            *acc += tape.scalar(v);
        }
    }
    let n = samples.len() as f64;
    let [class, lrtb, giou, xy3d, size3d, orien, depth, dmap] = parts.map(|x| x / n);
    Ok((
        total / n,
        LossComponents {
            class,
            lrtb,
            giou,
            xy3d,
            size3d,
            orien,
            depth,
            dmap,
        },
    ))
}

/// Caption rows scored against the target's 2D visual token; the high
/// cluster is what gets masked.
fn certainty_mask(s: &SyntheticSample) -> Result<Option<Vec<usize>>> {
    let rec = CaptionRecord {
        sample_id: s.id.clone(),
        tokens: s.token_kinds.iter().map(|k| format!("{k:?}")).collect(),
        word_embeddings: s.text.clone(),
        region_embedding: Tensor::vector(s.v2d.row(s.target).to_vec())?,
    };
    let part = partition_certainty(&rec)?;
    Ok(
        (part.outcome == SplitOutcome::Split && part.high.len() < s.token_kinds.len())
            .then_some(part.high),
    )
}

fn masked_text(s: &SyntheticSample, rows: &[usize], mask: &[f64]) -> Result<Tensor<f64>> {
    let d = s.text.cols();
    let mut data = s.text.data().to_vec();
    for &r in rows {
        data[r * d..(r + 1) * d].copy_from_slice(mask);
    }
    Tensor::matrix(s.text.rows(), d, data)
}

/// Trains the toy model with AdamW on minibatches of per-sample losses.
pub fn train_toy(cfg: &ToyConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let world = ToyWorld::new(cfg, sub_seed(seed, 1))?;
    let train = world.generate(cfg.train_samples, sub_seed(seed, 2))?;
    let eval = world.generate(cfg.eval_samples, sub_seed(seed, 3))?;
    let mut model_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 4));
    let initial = ToyModelParams::init(cfg, &mut model_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 5));
    let wiring = TrainOutcome::wiring(cfg);

    let masks: Vec<Option<Vec<usize>>> = if cfg.use_lca && cfg.lca.enabled {
        train.iter().map(certainty_mask).collect::<Result<_>>()?
    } else {
        vec![None; train.len()]
    };

    let initial_loss = evaluate_loss(&initial, &eval, cfg, wiring)?;
    let mut params = initial.clone();
    let mut opt = AdamW::new(cfg.optimizer, &params)?;
    let mut trace = Vec::new();
    let (mut acc_loss, mut acc_norm, mut acc_masked, mut acc_n) = (0.0, 0.0, 0usize, 0usize);

    for step in 0..cfg.steps {
        let mut grad_sum: Option<Vec<Tensor<f64>>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let i = batch_rng.gen_range(0..train.len());
            let s = &train[i];
            let text = match &masks[i] {
                Some(rows)
                    if record_rng(seed, step as u64, &s.id).gen::<f64>() < cfg.lca.probability =>
                {
                    acc_masked += 1;
                    Some(masked_text(s, rows, &world.mask_vector)?)
                }
                _ => None,
            };
            let tape = Tape::new();
            let bp = bind(&params, &tape);
            let (overall, _) =
                toy_loss(&tape, s, text.as_ref(), &bp, cfg, wiring).map_err(|e| {
                    Error::Divergence {
                        step,
                        message: e.to_string(),
                    }
                })?;
            batch_loss += tape.scalar(overall);
            let g = flatten(&gradients(&bp, &tape.backward(overall)?));
            grad_sum = Some(match grad_sum {
                None => g,
                Some(acc) => acc
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a.add(b))
                    .collect::<Result<_>>()?,
            });
        }
        let inv = 1.0 / cfg.batch as f64;
        let mut grads = params.clone();
        let mean: Vec<Tensor<f64>> = grad_sum
            .expect("batch is non-empty")
            .iter()
            .map(|g| g.scale(inv))
            .collect();
        unflatten(&mut grads, &mean)?;
        let batch_loss = batch_loss * inv;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                message: format!("loss is {batch_loss}"),
            });
        }
        let norm = opt
            .step(&mut params, &grads)
            .map_err(|e| Error::Divergence {
                step,
                message: e.to_string(),
            })?;
        acc_loss += batch_loss;
        acc_norm += norm;
        acc_n += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            trace.push(TracePoint {
                step: step + 1,
                train_loss: acc_loss / acc_n as f64,
                grad_norm: acc_norm / acc_n as f64,
                masked_fraction: acc_masked as f64 / (acc_n * cfg.batch) as f64,
            });
            log::debug!("step {} loss {:.4}", step + 1, acc_loss / acc_n as f64);
            (acc_loss, acc_norm, acc_masked, acc_n) = (0.0, 0.0, 0, 0);
        }
    }

    let final_loss = evaluate_loss(&params, &eval, cfg, wiring)?;
    Ok(TrainOutcome {
        initial,
        trained: params,
        world,
        trace,
        initial_loss,
        final_loss,
    })
}
