//! Finite-difference verification of the analytic gradients through the
//! whole encode -> MaxSim -> InfoNCE pipeline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{build_losses, CaptionItem, TripletItem};
use super::{LossMode, TrainConfig, TrainError};
use crate::autodiff::Tape;
use crate::encoder::forward::insert_params;
use crate::encoder::EncoderParams;
use crate::mat::Mat;

fn eval_loss(
    params: &EncoderParams,
    triplets: &[TripletItem],
    captions: &[CaptionItem],
    cfg: &TrainConfig,
) -> f64 {
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, params);
    let (l_t, l_c, total) =
        build_losses(&mut tape, &vars, &params.config, cfg.temperature, triplets, captions);
    let root = match cfg.loss_mode {
        LossMode::Both => total,
        LossMode::TargetOnly => l_t,
        LossMode::CaptionOnly => l_c,
    };
    tape.value(root).at(0, 0)
}

fn nudge(params: &mut EncoderParams, tensor: usize, coord: usize, delta: f64) {
    let mut idx = 0;
    params.for_each_tensor_mut(&mut |_, m| {
        if idx == tensor {
            m.as_mut_slice()[coord] += delta;
        }
        idx += 1;
    });
}

/// One verified coordinate: where it lives, both gradient estimates, and
/// their relative error under denominator `max(|analytic|, |numeric|, 1e-8)`.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares analytic parameter gradients of the batch loss against the
/// central difference `(L(w+eps) - L(w-eps)) / 2 eps` on `samples`
/// deterministically sampled coordinates, reporting each one.
pub fn grad_check_report(
    params: &EncoderParams,
    triplets: &[TripletItem],
    captions: &[CaptionItem],
    cfg: &TrainConfig,
    eps: f64,
    samples: usize,
) -> Result<Vec<CoordCheck>, TrainError> {
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(TrainError::invalid("eps must be within [1e-5, 1e-3]"));
    }
    if samples == 0 {
        return Err(TrainError::invalid("need at least one sampled coordinate"));
    }
    if triplets.len() < 2 || captions.len() < 2 {
        return Err(TrainError::invalid("batches need at least 2 items"));
    }

    // analytic gradients, one reverse pass
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, params);
    let (l_t, l_c, total) =
        build_losses(&mut tape, &vars, &params.config, cfg.temperature, triplets, captions);
    let root = match cfg.loss_mode {
        LossMode::Both => total,
        LossMode::TargetOnly => l_t,
        LossMode::CaptionOnly => l_c,
    };
    if !tape.value(root).at(0, 0).is_finite() {
        return Err(TrainError::invalid("loss is non-finite at the probe point"));
    }
    let grads = tape.backward(root);
    let analytic: Vec<Option<Mat>> = vars
        .ordered
        .iter()
        .map(|(_, id)| grads.get(*id).cloned())
        .collect();
    let names: Vec<String> = vars.ordered.iter().map(|(n, _)| n.clone()).collect();
    drop(tape);

    // deterministic coordinate sample
    let mut coords: Vec<(usize, usize)> = Vec::new();
    {
        let mut t = 0;
        params.for_each_tensor(&mut |_, m| {
            for c in 0..m.as_slice().len() {
                coords.push((t, c));
            }
            t += 1;
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    coords.shuffle(&mut rng);
    coords.truncate(samples);

    let mut work = params.clone();
    let mut report = Vec::with_capacity(coords.len());
    for &(tensor, coord) in &coords {
        nudge(&mut work, tensor, coord, eps);
        let plus = eval_loss(&work, triplets, captions, cfg);
        nudge(&mut work, tensor, coord, -2.0 * eps);
        let minus = eval_loss(&work, triplets, captions, cfg);
        nudge(&mut work, tensor, coord, eps);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TrainError::invalid("loss is non-finite at a perturbed point"));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[tensor].as_ref().map_or(0.0, |g| g.as_slice()[coord]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.push(CoordCheck {
            tensor: names[tensor].clone(),
            coord,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    Ok(report)
}

/// The maximum relative error over a [`grad_check_report`] run.
pub fn grad_check(
    params: &EncoderParams,
    triplets: &[TripletItem],
    captions: &[CaptionItem],
    cfg: &TrainConfig,
    eps: f64,
    samples: usize,
) -> Result<f64, TrainError> {
    let report = grad_check_report(params, triplets, captions, cfg, eps, samples)?;
    Ok(report.iter().fold(0.0, |m, c| m.max(c.rel_error)))
}
