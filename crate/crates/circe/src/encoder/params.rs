//! Trainable parameters of the composition encoder and their
//! initialization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::mat::Mat;

/// Standard deviation of the scaled-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture of the composition encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// shared learnable query token count
    pub k: usize,
    /// model dimension
    pub d: usize,
    /// attention block count
    pub blocks: usize,
    /// attention head count; must divide `d`
    pub heads: usize,
    /// hashed vocabulary size
    pub vocab: usize,
    /// input image-token dimension; projected to `d` when different
    pub image_dim: usize,
    /// text positions with learned positional embeddings; longer text is truncated
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 64,
            blocks: 2,
            heads: 4,
            vocab: 4096,
            image_dim: 64,
            max_text_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.k < 1 {
            return Err(EncoderError::invalid("k must be >= 1"));
        }
        if self.d < 8 {
            return Err(EncoderError::invalid("d must be >= 8"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(EncoderError::invalid(format!(
                "heads {} must divide d {}",
                self.heads, self.d
            )));
        }
        if self.blocks < 1 {
            return Err(EncoderError::invalid("blocks must be >= 1"));
        }
        if self.vocab < 1 {
            return Err(EncoderError::invalid("vocab must be >= 1"));
        }
        if self.image_dim < 1 {
            return Err(EncoderError::invalid("image_dim must be >= 1"));
        }
        if self.max_text_len < 1 {
            return Err(EncoderError::invalid("max_text_len must be >= 1"));
        }
        Ok(())
    }
}

/// Per-block weights: pre-norm self-attention over `[queries; text]`,
/// pre-norm cross-attention to image tokens, and a two-layer MLP.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_scale: Arc<Mat>,
    pub ln1_shift: Arc<Mat>,
    pub sa_wq: Arc<Mat>,
    pub sa_wk: Arc<Mat>,
    pub sa_wv: Arc<Mat>,
    pub sa_wo: Arc<Mat>,
    pub ln2_scale: Arc<Mat>,
    pub ln2_shift: Arc<Mat>,
    pub ca_wq: Arc<Mat>,
    pub ca_wk: Arc<Mat>,
    pub ca_wv: Arc<Mat>,
    pub ca_wo: Arc<Mat>,
    pub ln3_scale: Arc<Mat>,
    pub ln3_shift: Arc<Mat>,
    pub mlp_w1: Arc<Mat>,
    pub mlp_b1: Arc<Mat>,
    pub mlp_w2: Arc<Mat>,
    pub mlp_b2: Arc<Mat>,
}

/// All trainable parameters. The same query tokens feed composed-query,
/// text, and image encoding.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub query_tokens: Arc<Mat>,
    pub text_embed: Arc<Mat>,
    pub pos_embed: Arc<Mat>,
    /// present iff `image_dim != d`
    pub image_proj: Option<Arc<Mat>>,
    pub blocks: Vec<BlockParams>,
    pub final_scale: Arc<Mat>,
    pub final_shift: Arc<Mat>,
}

impl EncoderParams {
    /// All-zero parameters with the right shapes (norm scales included).
    pub fn zeros(config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d;
        let zero = |r, c| Arc::new(Mat::zeros(r, c));
        let block = || BlockParams {
            ln1_scale: zero(1, d),
            ln1_shift: zero(1, d),
            sa_wq: zero(d, d),
            sa_wk: zero(d, d),
            sa_wv: zero(d, d),
            sa_wo: zero(d, d),
            ln2_scale: zero(1, d),
            ln2_shift: zero(1, d),
            ca_wq: zero(d, d),
            ca_wk: zero(d, d),
            ca_wv: zero(d, d),
            ca_wo: zero(d, d),
            ln3_scale: zero(1, d),
            ln3_shift: zero(1, d),
            mlp_w1: zero(d, 4 * d),
            mlp_b1: zero(1, 4 * d),
            mlp_w2: zero(4 * d, d),
            mlp_b2: zero(1, d),
        };
        Ok(Self {
            config: config.clone(),
            query_tokens: zero(config.k, d),
            text_embed: zero(config.vocab, d),
            pos_embed: zero(config.max_text_len, d),
            image_proj: (config.image_dim != d).then(|| zero(config.image_dim, d)),
            blocks: (0..config.blocks).map(|_| block()).collect(),
            final_scale: zero(1, d),
            final_shift: zero(1, d),
        })
    }

    /// Visits every tensor with its name in a fixed order. The order also
    /// fixes the checkpoint tensor directory and the optimizer state layout.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Arc<Mat>)) {
        f("query_tokens", &self.query_tokens);
        f("text_embed", &self.text_embed);
        f("pos_embed", &self.pos_embed);
        if let Some(p) = &self.image_proj {
            f("image_proj", p);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.ln1.scale"), &b.ln1_scale);
            f(&format!("blocks.{i}.ln1.shift"), &b.ln1_shift);
            f(&format!("blocks.{i}.self_attn.wq"), &b.sa_wq);
            f(&format!("blocks.{i}.self_attn.wk"), &b.sa_wk);
            f(&format!("blocks.{i}.self_attn.wv"), &b.sa_wv);
            f(&format!("blocks.{i}.self_attn.wo"), &b.sa_wo);
            f(&format!("blocks.{i}.ln2.scale"), &b.ln2_scale);
            f(&format!("blocks.{i}.ln2.shift"), &b.ln2_shift);
            f(&format!("blocks.{i}.cross_attn.wq"), &b.ca_wq);
            f(&format!("blocks.{i}.cross_attn.wk"), &b.ca_wk);
            f(&format!("blocks.{i}.cross_attn.wv"), &b.ca_wv);
            f(&format!("blocks.{i}.cross_attn.wo"), &b.ca_wo);
            f(&format!("blocks.{i}.ln3.scale"), &b.ln3_scale);
            f(&format!("blocks.{i}.ln3.shift"), &b.ln3_shift);
            f(&format!("blocks.{i}.mlp.w1"), &b.mlp_w1);
            f(&format!("blocks.{i}.mlp.b1"), &b.mlp_b1);
            f(&format!("blocks.{i}.mlp.w2"), &b.mlp_w2);
            f(&format!("blocks.{i}.mlp.b2"), &b.mlp_b2);
        }
        f("final_norm.scale", &self.final_scale);
        f("final_norm.shift", &self.final_shift);
    }

    /// Mutable visit in the same order as [`Self::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("query_tokens", Arc::make_mut(&mut self.query_tokens));
        f("text_embed", Arc::make_mut(&mut self.text_embed));
        f("pos_embed", Arc::make_mut(&mut self.pos_embed));
        if let Some(p) = &mut self.image_proj {
            f("image_proj", Arc::make_mut(p));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.ln1.scale"), Arc::make_mut(&mut b.ln1_scale));
            f(&format!("blocks.{i}.ln1.shift"), Arc::make_mut(&mut b.ln1_shift));
            f(&format!("blocks.{i}.self_attn.wq"), Arc::make_mut(&mut b.sa_wq));
            f(&format!("blocks.{i}.self_attn.wk"), Arc::make_mut(&mut b.sa_wk));
            f(&format!("blocks.{i}.self_attn.wv"), Arc::make_mut(&mut b.sa_wv));
            f(&format!("blocks.{i}.self_attn.wo"), Arc::make_mut(&mut b.sa_wo));
            f(&format!("blocks.{i}.ln2.scale"), Arc::make_mut(&mut b.ln2_scale));
            f(&format!("blocks.{i}.ln2.shift"), Arc::make_mut(&mut b.ln2_shift));
            f(&format!("blocks.{i}.cross_attn.wq"), Arc::make_mut(&mut b.ca_wq));
            f(&format!("blocks.{i}.cross_attn.wk"), Arc::make_mut(&mut b.ca_wk));
            f(&format!("blocks.{i}.cross_attn.wv"), Arc::make_mut(&mut b.ca_wv));
            f(&format!("blocks.{i}.cross_attn.wo"), Arc::make_mut(&mut b.ca_wo));
            f(&format!("blocks.{i}.ln3.scale"), Arc::make_mut(&mut b.ln3_scale));
            f(&format!("blocks.{i}.ln3.shift"), Arc::make_mut(&mut b.ln3_shift));
            f(&format!("blocks.{i}.mlp.w1"), Arc::make_mut(&mut b.mlp_w1));
            f(&format!("blocks.{i}.mlp.b1"), Arc::make_mut(&mut b.mlp_b1));
            f(&format!("blocks.{i}.mlp.w2"), Arc::make_mut(&mut b.mlp_w2));
            f(&format!("blocks.{i}.mlp.b2"), Arc::make_mut(&mut b.mlp_b2));
        }
        f("final_norm.scale", Arc::make_mut(&mut self.final_scale));
        f("final_norm.shift", Arc::make_mut(&mut self.final_shift));
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, m| n += m.as_slice().len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(&mut |_, m| ok &= m.is_finite());
        ok
    }
}

/// Draws fresh parameters: weights from a scaled normal (std 0.02),
/// normalization scales 1, shifts and biases 0. Deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = EncoderParams::zeros(config)?;
    params.for_each_tensor_mut(&mut |name, m| {
        if name.ends_with(".scale") {
            m.fill(1.0);
        } else if name.ends_with(".shift") || name.ends_with("b1") || name.ends_with("b2") {
            // zero already
        } else {
            for v in m.as_mut_slice() {
                *v = normal.sample(&mut rng);
            }
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_equal_params() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        let mut equal = true;
        let mut names_a = Vec::new();
        a.for_each_tensor(&mut |n, m| names_a.push((n.to_string(), m.clone())));
        let mut i = 0;
        b.for_each_tensor(&mut |n, m| {
            equal &= names_a[i].0 == n && names_a[i].1.as_slice() == m.as_slice();
            i += 1;
        });
        assert!(equal);
        assert!(a.all_finite());
    }

    #[test]
    fn sampled_weight_std_is_near_init_std() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 7).unwrap();
        let w = &params.blocks[0].sa_wq;
        let n = w.as_slice().len() as f64;
        let mean = w.as_slice().iter().sum::<f64>() / n;
        let var = w.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - INIT_STD).abs() < 0.2 * INIT_STD,
            "sample std {std} too far from {INIT_STD}"
        );
    }

    #[test]
    fn norm_scales_start_at_one() {
        let cfg = EncoderConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        assert!(params.final_scale.as_slice().iter().all(|&v| v == 1.0));
        assert!(params.final_shift.as_slice().iter().all(|&v| v == 0.0));
        assert!(params.blocks[0].mlp_b1.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_proj_present_only_when_dims_differ() {
        let mut cfg = EncoderConfig::default();
        cfg.image_dim = cfg.d;
        assert!(init_params(&cfg, 0).unwrap().image_proj.is_none());
        cfg.image_dim = 16;
        assert!(init_params(&cfg, 0).unwrap().image_proj.is_some());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = EncoderConfig::default();
        cfg.heads = 5; // does not divide 64
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.d = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.blocks = 0;
        assert!(cfg.validate().is_err());
    }
}
