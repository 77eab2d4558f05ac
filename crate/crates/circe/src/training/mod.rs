//! The two InfoNCE objectives over in-batch similarity matrices, the
//! combined loss, the optimizer loop, and finite-difference gradient
//! verification.

mod grad_check;
mod loss;
mod optimizer;

pub use grad_check::{grad_check, grad_check_report, CoordCheck};
pub use loss::{batch_loss, info_nce, CaptionItem, TripletItem};
pub use optimizer::AdamW;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{id_map, CaptionRecord, CorpusError, ImageRecord, TripletRecord};
use crate::encoder::{forward, init_params, EncoderConfig, EncoderError, EncoderParams};
use crate::similarity::SimilarityError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unresolved image id {0:?}")]
    UnresolvedId(String),
    #[error("loss diverged at epoch {epoch} step {step}: total loss {value}")]
    Diverged { epoch: usize, step: usize, value: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

impl TrainError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        TrainError::Invalid(msg.into())
    }
}

/// Which loss terms drive the parameter updates. `Both` is the full
/// objective; the single-task modes exist for ablation retraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Both,
    /// target-text retrieval only (drops the caption task)
    TargetOnly,
    /// text-to-image retrieval only (drops the target-text task)
    CaptionOnly,
}

/// Optimization hyperparameters. `desk()` is sized to train in minutes on
/// one CPU core; `paper_scale()` carries the reference settings (initial
/// learning rate 1e-5, batch size 128, decay 0.1 every 10 epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// softmax temperature of both InfoNCE losses
    pub temperature: f64,
    pub lr: f64,
    /// multiplicative factor applied every `decay_epochs`
    pub lr_decay: f64,
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub loss_mode: LossMode,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            temperature: 0.07,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_epochs: 10,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            loss_mode: LossMode::Both,
        }
    }

    pub fn paper_scale() -> Self {
        Self {
            lr: 1e-5,
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::invalid("temperature must be > 0"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::invalid("learning rate must be > 0"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(TrainError::invalid("lr_decay must be > 0"));
        }
        if self.decay_epochs == 0 {
            return Err(TrainError::invalid("decay_epochs must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(TrainError::invalid("batch_size must be >= 2 for in-batch negatives"));
        }
        if self.epochs == 0 {
            return Err(TrainError::invalid("epochs must be >= 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Per-epoch mean losses and the learning rate in effect.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub loss_t: Vec<f64>,
    pub loss_c: Vec<f64>,
    pub loss_total: Vec<f64>,
    pub lr: Vec<f64>,
}

impl LossTrace {
    pub fn epochs(&self) -> usize {
        self.loss_total.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_t,loss_c,loss_total\n");
        for e in 0..self.epochs() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e + 1,
                self.loss_t[e],
                self.loss_c[e],
                self.loss_total[e]
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Runs the full optimization: shuffled mini-batches, AdamW with the
/// stepped learning-rate schedule, both InfoNCE objectives. Deterministic
/// per seed; batches are drawn independently for the two tasks.
pub fn train(
    images: &[ImageRecord],
    triplets: &[TripletRecord],
    captions: &[CaptionRecord],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, LossTrace), TrainError> {
    cfg.validate()?;
    let map = id_map(images)?;
    let resolve = |id: &str| -> Result<&ImageRecord, TrainError> {
        map.get(id).copied().ok_or_else(|| TrainError::UnresolvedId(id.to_string()))
    };
    for t in triplets {
        let img = resolve(&t.ref_id)?;
        if img.tokens.dim() != enc_cfg.image_dim {
            return Err(TrainError::invalid(format!(
                "image {:?} has token dim {}, encoder expects {}",
                img.id,
                img.tokens.dim(),
                enc_cfg.image_dim
            )));
        }
        if t.modification.trim().is_empty() || t.target_text.trim().is_empty() {
            return Err(TrainError::invalid(format!("triplet for {:?} has empty text", t.ref_id)));
        }
    }
    for c in captions {
        resolve(&c.image_id)?;
        if c.caption.trim().is_empty() {
            return Err(TrainError::invalid(format!("caption for {:?} is empty", c.image_id)));
        }
    }
    if triplets.len() < cfg.batch_size || captions.len() < cfg.batch_size {
        return Err(TrainError::InsufficientData(format!(
            "need at least batch_size={} triplets and captions, have {} and {}",
            cfg.batch_size,
            triplets.len(),
            captions.len()
        )));
    }

    let mut params = init_params(enc_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut trace = LossTrace::default();

    let steps = (triplets.len() / cfg.batch_size).min(captions.len() / cfg.batch_size);
    let mut t_order: Vec<usize> = (0..triplets.len()).collect();
    let mut c_order: Vec<usize> = (0..captions.len()).collect();
    let mut lr = cfg.lr;

    for epoch in 1..=cfg.epochs {
        if epoch > 1 && (epoch - 1) % cfg.decay_epochs == 0 {
            lr *= cfg.lr_decay;
        }
        t_order.shuffle(&mut shuffle_rng);
        c_order.shuffle(&mut shuffle_rng);
        let (mut sum_t, mut sum_c, mut sum_total) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let t_idx = &t_order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let c_idx = &c_order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let triplet_batch: Vec<TripletItem> = t_idx
                .iter()
                .map(|&i| {
                    let t = &triplets[i];
                    Ok(TripletItem {
                        ref_tokens: &resolve(&t.ref_id)?.tokens,
                        modification: &t.modification,
                        target_text: &t.target_text,
                    })
                })
                .collect::<Result<_, TrainError>>()?;
            let caption_batch: Vec<CaptionItem> = c_idx
                .iter()
                .map(|&i| {
                    let c = &captions[i];
                    Ok(CaptionItem {
                        image_tokens: &resolve(&c.image_id)?.tokens,
                        caption: &c.caption,
                    })
                })
                .collect::<Result<_, TrainError>>()?;

            let mut tape = Tape::new();
            let vars = forward::insert_params(&mut tape, &params);
            let (l_t, l_c, l_total) = loss::build_losses(
                &mut tape,
                &vars,
                enc_cfg,
                cfg.temperature,
                &triplet_batch,
                &caption_batch,
            );
            let (vt, vc, vtot) = (
                tape.value(l_t).at(0, 0),
                tape.value(l_c).at(0, 0),
                tape.value(l_total).at(0, 0),
            );
            if !vtot.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    value: vtot,
                });
            }
            sum_t += vt;
            sum_c += vc;
            sum_total += vtot;

            let root = match cfg.loss_mode {
                LossMode::Both => l_total,
                LossMode::TargetOnly => l_t,
                LossMode::CaptionOnly => l_c,
            };
            let grads = tape.backward(root);
            let ordered: Vec<Option<&crate::mat::Mat>> =
                vars.ordered.iter().map(|(_, id)| grads.get(*id)).collect();
            opt.apply(&mut params, &ordered, lr);
        }
        trace.loss_t.push(sum_t / steps as f64);
        trace.loss_c.push(sum_c / steps as f64);
        trace.loss_total.push(sum_total / steps as f64);
        trace.lr.push(lr);
    }

    if !params.all_finite() {
        return Err(TrainError::invalid("training produced non-finite parameters"));
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::curation::{curate_dataset, CurateOptions, PromptSet, TemplateGenerator};

    pub(crate) fn tiny_setup(
        images: usize,
        seed: u64,
    ) -> (Vec<ImageRecord>, Vec<TripletRecord>, Vec<CaptionRecord>, EncoderConfig) {
        let synth = SynthConfig {
            attrs: crate::corpus::AttributeSchema::parse("color=red,blue;shape=cube,sphere").unwrap(),
            images,
            eval_cases: 0,
            rows: 2,
            dim: 8,
            noise: 0.05,
        };
        let (imgs, _) = synth_corpus(&synth, seed).unwrap();
        let gen = TemplateGenerator::new(synth.attrs.clone(), seed);
        let out = curate_dataset(&imgs, &gen, &PromptSet::default(), &CurateOptions::default())
            .unwrap();
        let enc = EncoderConfig {
            k: 2,
            d: 8,
            blocks: 1,
            heads: 2,
            vocab: 64,
            image_dim: 8,
            max_text_len: 8,
        };
        (imgs, out.triplets, out.captions, enc)
    }

    #[test]
    fn lr_schedule_decays_at_epoch_boundaries() {
        let (imgs, triplets, captions, enc) = tiny_setup(12, 3);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 25,
            decay_epochs: 10,
            lr: 1e-5,
            ..TrainConfig::desk()
        };
        let (_, trace) = train(&imgs, &triplets, &captions, &enc, &cfg).unwrap();
        assert_eq!(trace.lr.len(), 25);
        for e in 0..10 {
            assert_eq!(trace.lr[e], 1e-5);
        }
        assert_eq!(trace.lr[10], trace.lr[9] * 0.1);
        assert_eq!(trace.lr[20], trace.lr[19] * 0.1);
        assert_eq!(trace.lr[19], trace.lr[10]);
    }

    #[test]
    fn same_seed_trains_bitwise_identically() {
        let (imgs, triplets, captions, enc) = tiny_setup(12, 5);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::desk()
        };
        let (a, ta) = train(&imgs, &triplets, &captions, &enc, &cfg).unwrap();
        let (b, tb) = train(&imgs, &triplets, &captions, &enc, &cfg).unwrap();
        assert_eq!(ta, tb);
        let mut identical = true;
        let mut lhs = Vec::new();
        a.for_each_tensor(&mut |_, m| lhs.push(m.clone()));
        let mut i = 0;
        b.for_each_tensor(&mut |_, m| {
            identical &= lhs[i].as_slice() == m.as_slice();
            i += 1;
        });
        assert!(identical);
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let (imgs, triplets, captions, enc) = tiny_setup(4, 7);
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 1,
            ..TrainConfig::desk()
        };
        assert!(matches!(
            train(&imgs, &triplets, &captions, &enc, &cfg),
            Err(TrainError::InsufficientData(_))
        ));
    }

    #[test]
    fn unresolved_triplet_id_is_rejected() {
        let (imgs, mut triplets, captions, enc) = tiny_setup(8, 9);
        triplets[0].ref_id = "ghost".into();
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::desk()
        };
        assert!(matches!(
            train(&imgs, &triplets, &captions, &enc, &cfg),
            Err(TrainError::UnresolvedId(id)) if id == "ghost"
        ));
    }

    #[test]
    fn loss_trace_csv_has_pinned_columns() {
        let trace = LossTrace {
            loss_t: vec![1.5],
            loss_c: vec![2.5],
            loss_total: vec![4.0],
            lr: vec![1e-3],
        };
        assert_eq!(trace.to_csv(), "epoch,loss_t,loss_c,loss_total\n1,1.5,2.5,4\n");
    }
}
