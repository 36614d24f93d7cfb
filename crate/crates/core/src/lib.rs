//! Label-efficient camera-trap species classification.
//!
//! The pipeline runs detector output through cropping ([`detection`]),
//! turns crops into feature vectors ([`embedding`]), trains a class-weighted
//! softmax head ([`classifier`]) inside an uncertainty-sampling loop
//! ([`active_learning`]), scores it ([`evaluation`]) and keeps everything on
//! disk ([`project`]).

pub mod active_learning;
pub mod classifier;
pub mod detection;
pub mod embedding;
pub mod evaluation;
pub mod project;
