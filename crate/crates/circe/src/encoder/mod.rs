//! The trainable composition encoder: shared learnable query tokens plus a
//! small stack of attention blocks producing k output feature tokens for
//! composed queries, bare texts, and bare images.

mod checkpoint;
pub(crate) mod forward;
mod params;
mod tokenizer;

pub use checkpoint::{load_checkpoint, round_to_f32, save_checkpoint};
pub use params::{init_params, BlockParams, EncoderConfig, EncoderParams, INIT_STD};
pub use tokenizer::{fnv1a64, tokenize, TokenSequence};

use crate::autodiff::Tape;
use crate::corpus::{CorpusError, FeatureMatrix};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: file has {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl EncoderError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        EncoderError::Invalid(msg.into())
    }
}

fn check_image(image: &FeatureMatrix, params: &EncoderParams) -> Result<(), EncoderError> {
    if image.dim() != params.config.image_dim {
        return Err(EncoderError::ShapeMismatch(format!(
            "image token dim {} does not match configured image_dim {}",
            image.dim(),
            params.config.image_dim
        )));
    }
    Ok(())
}

fn check_text(text: &TokenSequence, params: &EncoderParams) -> Result<(), EncoderError> {
    if text.ids.is_empty() {
        return Err(EncoderError::invalid("token sequence must be nonempty"));
    }
    if let Some(&bad) = text.ids.iter().find(|&&t| t as usize >= params.config.vocab) {
        return Err(EncoderError::invalid(format!(
            "token id {bad} outside vocab {}",
            params.config.vocab
        )));
    }
    Ok(())
}

fn run(
    params: &EncoderParams,
    image: Option<&FeatureMatrix>,
    text: Option<&TokenSequence>,
) -> Result<FeatureMatrix, EncoderError> {
    let mut tape = Tape::new();
    let vars = forward::insert_params(&mut tape, params);
    let image_id = image.map(|img| tape.constant(img.to_mat()));
    let out = forward::forward(
        &mut tape,
        &vars,
        &params.config,
        image_id,
        text.map(|t| t.ids.as_slice()),
    );
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(EncoderError::invalid("encoder produced non-finite output"));
    }
    Ok(FeatureMatrix::from_mat(value)?)
}

/// Encodes a composed query (reference image tokens + modification text)
/// into k output feature tokens.
pub fn encode_composed(
    image: &FeatureMatrix,
    text: &TokenSequence,
    params: &EncoderParams,
) -> Result<FeatureMatrix, EncoderError> {
    check_image(image, params)?;
    check_text(text, params)?;
    run(params, Some(image), Some(text))
}

/// Encodes bare text; the cross-attention sublayer is skipped entirely.
pub fn encode_text(
    text: &TokenSequence,
    params: &EncoderParams,
) -> Result<FeatureMatrix, EncoderError> {
    check_text(text, params)?;
    run(params, None, Some(text))
}

/// Encodes bare image tokens; self-attention runs over the query tokens
/// only.
pub fn encode_image(
    image: &FeatureMatrix,
    params: &EncoderParams,
) -> Result<FeatureMatrix, EncoderError> {
    check_image(image, params)?;
    run(params, Some(image), None)
}
