//! Shape-conditioned prompt embeddings for text-to-image diffusion.
//!
//! A point cloud is encoded into shape tokens, a stack of cross-attention
//! blocks turns (shape tokens, prompt embedding) into a prompt residual, and
//! the residual is blended into selected prompt rows with a strength `λ`
//! before sampling from a frozen denoiser.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backends;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod geometry;
pub mod imaging;
pub mod nn;
pub mod prompts;
pub mod seeding;
pub mod service;
pub mod shape2clip;
pub mod training;

pub use backends::{load_backend_suite, BackendConfig, BackendKind, BackendSuite};
pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use imaging::{DepthImage, Image};
pub use shape2clip::{GuidanceSpec, Shape2ClipParams, TokenStrategy};
