//! circe: a desk-scale engine for zero-shot composed image retrieval.
//!
//! The pipeline: curate synthetic supervision from unlabeled image features
//! via a pluggable text generator, train a query-token composition encoder
//! with two contrastive objectives, and retrieve targets by fusing
//! composed-query similarity with generated-target-text similarity.

pub mod autodiff;
pub mod corpus;
pub mod curation;
pub mod encoder;
pub mod mat;
pub mod metrics;
pub mod retrieval;
pub mod similarity;
pub mod training;
