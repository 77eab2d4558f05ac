//! InfoNCE losses over in-batch MaxSim similarity matrices.
//!
//! The target-text task scores every composed query in the batch against
//! every target text; the text-to-image task scores every caption against
//! every image. Positives sit on the diagonal, everything else in the
//! batch is a negative, and the overall loss is the sum of both terms.

use super::TrainError;
use crate::autodiff::{info_nce_core, Tape, TensorId};
use crate::corpus::FeatureMatrix;
use crate::encoder::forward::{forward, insert_params, ParamVars};
use crate::encoder::{tokenize, EncoderConfig, EncoderParams};
use crate::mat::Mat;
use crate::similarity::Score;

/// One target-text training example, features already resolved.
#[derive(Debug, Clone, Copy)]
pub struct TripletItem<'a> {
    pub ref_tokens: &'a FeatureMatrix,
    pub modification: &'a str,
    pub target_text: &'a str,
}

/// One text-to-image training example.
#[derive(Debug, Clone, Copy)]
pub struct CaptionItem<'a> {
    pub image_tokens: &'a FeatureMatrix,
    pub caption: &'a str,
}

/// InfoNCE with diagonal positives: the mean over rows of the negative
/// log-probability of the diagonal entry under a row softmax at
/// temperature `tau`. Computed with the log-sum-exp max shift.
pub fn info_nce(sim: &[Vec<Score>], tau: f64) -> Result<f64, TrainError> {
    let n = sim.len();
    if n < 2 {
        return Err(TrainError::invalid("InfoNCE needs at least a 2x2 matrix"));
    }
    if sim.iter().any(|row| row.len() != n) {
        return Err(TrainError::invalid("InfoNCE input must be square"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(TrainError::invalid("temperature must be > 0"));
    }
    let mut m = Mat::zeros(n, n);
    for (i, row) in sim.iter().enumerate() {
        for (j, s) in row.iter().enumerate() {
            *m.at_mut(i, j) = s.value();
        }
    }
    let (loss, _) = info_nce_core(&m, tau);
    Ok(loss)
}

/// Builds both loss terms on the tape. Returns `(l_t, l_c, l_t + l_c)`.
pub(crate) fn build_losses(
    tape: &mut Tape,
    vars: &ParamVars,
    enc_cfg: &EncoderConfig,
    tau: f64,
    triplets: &[TripletItem],
    captions: &[CaptionItem],
) -> (TensorId, TensorId, TensorId) {
    // target text retrieval: composed queries vs target texts
    let n = triplets.len();
    let composed: Vec<TensorId> = triplets
        .iter()
        .map(|t| {
            let img = tape.constant(t.ref_tokens.to_mat());
            let ids = tokenize(t.modification, enc_cfg);
            forward(tape, vars, enc_cfg, Some(img), Some(&ids.ids))
        })
        .collect();
    let targets: Vec<TensorId> = triplets
        .iter()
        .map(|t| {
            let ids = tokenize(t.target_text, enc_cfg);
            forward(tape, vars, enc_cfg, None, Some(&ids.ids))
        })
        .collect();
    let mut cells = Vec::with_capacity(n * n);
    for q in &composed {
        for t in &targets {
            cells.push(tape.maxsim(*q, *t));
        }
    }
    let s_t = tape.from_scalars(n, n, &cells);
    let l_t = tape.info_nce(s_t, tau);

    // text-to-image retrieval: captions vs images
    let m = captions.len();
    let caps: Vec<TensorId> = captions
        .iter()
        .map(|c| {
            let ids = tokenize(c.caption, enc_cfg);
            forward(tape, vars, enc_cfg, None, Some(&ids.ids))
        })
        .collect();
    let imgs: Vec<TensorId> = captions
        .iter()
        .map(|c| {
            let img = tape.constant(c.image_tokens.to_mat());
            forward(tape, vars, enc_cfg, Some(img), None)
        })
        .collect();
    let mut cells = Vec::with_capacity(m * m);
    for c in &caps {
        for i in &imgs {
            cells.push(tape.maxsim(*c, *i));
        }
    }
    let s_c = tape.from_scalars(m, m, &cells);
    let l_c = tape.info_nce(s_c, tau);

    let total = tape.add(l_t, l_c);
    (l_t, l_c, total)
}

/// Evaluates both loss terms for one pair of batches without updating
/// anything. Returns `(L_t, L_c, L_t + L_c)`.
pub fn batch_loss(
    triplets: &[TripletItem],
    captions: &[CaptionItem],
    params: &EncoderParams,
    tau: f64,
) -> Result<(f64, f64, f64), TrainError> {
    if triplets.len() < 2 || captions.len() < 2 {
        return Err(TrainError::invalid("batches need at least 2 items for in-batch negatives"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(TrainError::invalid("temperature must be > 0"));
    }
    for t in triplets {
        if t.ref_tokens.dim() != params.config.image_dim {
            return Err(TrainError::invalid(format!(
                "triplet image dim {} does not match encoder image_dim {}",
                t.ref_tokens.dim(),
                params.config.image_dim
            )));
        }
    }
    for c in captions {
        if c.image_tokens.dim() != params.config.image_dim {
            return Err(TrainError::invalid(format!(
                "caption image dim {} does not match encoder image_dim {}",
                c.image_tokens.dim(),
                params.config.image_dim
            )));
        }
    }
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, params);
    let (l_t, l_c, total) = build_losses(&mut tape, &vars, &params.config, tau, triplets, captions);
    let out = (
        tape.value(l_t).at(0, 0),
        tape.value(l_c).at(0, 0),
        tape.value(total).at(0, 0),
    );
    if !out.2.is_finite() {
        return Err(TrainError::invalid("batch loss is non-finite"));
    }
    Ok(out)
}
