//! Synthetic-supervision curation: produce triplet and caption records
//! from unlabeled images via a pluggable text generator.

mod prompts;
mod remote;
mod template_gen;

pub use prompts::{PromptRole, PromptSet, PromptTemplate, MODIFICATION_PLACEHOLDER};
pub use remote::{RemoteConfig, RemoteGenerator, API_KEY_ENV};
pub use template_gen::TemplateGenerator;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, ImageRecord, TripletRecord};

/// A single generation failure, independent of which role failed.
#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed reply: {0}")]
    Decode(String),
    #[error("generator returned empty text")]
    Empty,
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("generation failed for image {image_id:?}: {source}")]
    Generator {
        image_id: String,
        #[source]
        source: GeneratorError,
    },
    #[error("no images to curate")]
    EmptyInput,
    #[error("{0}")]
    Invalid(String),
}

impl CurationError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CurationError::Invalid(msg.into())
    }
}

/// The text-generation contract. Implementations receive the image, the
/// role being generated, the fully rendered prompt body, and (for target
/// texts) the raw modification as context. Deterministic implementations
/// must be pure functions of their inputs.
pub trait Generator: Send + Sync {
    fn generate(
        &self,
        image: &ImageRecord,
        role: PromptRole,
        prompt_body: &str,
        context: Option<&str>,
    ) -> Result<String, GeneratorError>;
}

fn finish(
    image: &ImageRecord,
    raw: Result<String, GeneratorError>,
) -> Result<String, CurationError> {
    let text = raw
        .map(|t| t.trim().to_string())
        .and_then(|t| if t.is_empty() { Err(GeneratorError::Empty) } else { Ok(t) });
    text.map_err(|source| CurationError::Generator {
        image_id: image.id.clone(),
        source,
    })
}

/// Generates a modification text for `image`.
pub fn generate_modification(
    image: &ImageRecord,
    gen: &dyn Generator,
    prompts: &PromptSet,
) -> Result<String, CurationError> {
    let body = prompts.modification.render(None)?;
    finish(image, gen.generate(image, PromptRole::Modification, &body, None))
}

/// Generates a target text: the description of `image` as it would look
/// after `modification`. The dispatched prompt embeds the modification
/// verbatim.
pub fn generate_target_text(
    image: &ImageRecord,
    modification: &str,
    gen: &dyn Generator,
    prompts: &PromptSet,
) -> Result<String, CurationError> {
    if modification.trim().is_empty() {
        return Err(CurationError::invalid("modification must be nonempty"));
    }
    let body = prompts.target_text.render(Some(modification))?;
    finish(
        image,
        gen.generate(image, PromptRole::TargetText, &body, Some(modification)),
    )
}

/// Generates a caption describing `image` as it is.
pub fn generate_caption(
    image: &ImageRecord,
    gen: &dyn Generator,
    prompts: &PromptSet,
) -> Result<String, CurationError> {
    let body = prompts.caption.render(None)?;
    finish(image, gen.generate(image, PromptRole::Caption, &body, None))
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    /// abort on the first failure instead of collecting it
    pub strict: bool,
    /// generator calls may run concurrently up to this many threads
    pub parallelism: usize,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            strict: false,
            parallelism: 1,
        }
    }
}

/// A per-image failure report from a lenient curation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct CurationOutput {
    pub triplets: Vec<TripletRecord>,
    pub captions: Vec<CaptionRecord>,
    pub failures: Vec<CurationFailure>,
}

fn curate_one(
    image: &ImageRecord,
    gen: &dyn Generator,
    prompts: &PromptSet,
) -> Result<(TripletRecord, CaptionRecord), CurationError> {
    let modification = generate_modification(image, gen, prompts)?;
    let target_text = generate_target_text(image, &modification, gen, prompts)?;
    let caption = generate_caption(image, gen, prompts)?;
    Ok((
        TripletRecord {
            ref_id: image.id.clone(),
            modification,
            target_text,
        },
        CaptionRecord {
            image_id: image.id.clone(),
            caption,
        },
    ))
}

/// Curates one triplet and one caption per image, in input order. In the
/// default lenient mode an image that fails any of its three generations
/// is dropped from both outputs and reported; strict mode aborts on the
/// first failure.
pub fn curate_dataset(
    images: &[ImageRecord],
    gen: &dyn Generator,
    prompts: &PromptSet,
    opts: &CurateOptions,
) -> Result<CurationOutput, CurationError> {
    if images.is_empty() {
        return Err(CurationError::EmptyInput);
    }
    let results: Vec<Result<(TripletRecord, CaptionRecord), CurationError>> =
        if opts.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.parallelism)
                .build()
                .map_err(|e| CurationError::invalid(format!("thread pool: {e}")))?;
            pool.install(|| {
                images
                    .par_iter()
                    .map(|img| curate_one(img, gen, prompts))
                    .collect()
            })
        } else {
            images.iter().map(|img| curate_one(img, gen, prompts)).collect()
        };

    let mut out = CurationOutput::default();
    for (image, result) in images.iter().zip(results) {
        match result {
            Ok((triplet, caption)) => {
                out.triplets.push(triplet);
                out.captions.push(caption);
            }
            Err(e) if opts.strict => return Err(e),
            Err(e) => out.failures.push(CurationFailure {
                image_id: image.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}
