//! Scene-element visual debiasing and content/bias text disentanglement for
//! text-video retrieval, at desk scale.
//!
//! The crate covers the synthetic bias-injected corpus, the phrase taxonomy,
//! toy transformer encoders, scene-element selection and fusion, the
//! variational text decomposition, WTI matching with InfoNCE, and the
//! training and evaluation protocols built on top of them.

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod nn;
pub mod scene_elements;
pub mod taxonomy;
pub mod textual_debias;
pub mod train;
pub mod visual_debias;

pub use error::{Error, Result};
