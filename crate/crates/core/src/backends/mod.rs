//! Contracts for the pretrained models the pipeline consumes.
//!
//! Every model sits behind a trait. [`toy`] provides small deterministic
//! implementations of each one; [`external`] talks to model servers over a
//! JSON/HTTP adapter protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3};

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SilhouetteMask};
use crate::imaging::{DepthImage, Image};

pub mod external;
pub mod toy;

/// Token slots produced by every text encoder.
pub const MAX_TOKENS: usize = 77;
/// Patch tokens plus one class token.
pub const SHAPE_TOKEN_COUNT: usize = 65;

/// `77 × D_t` prompt token embeddings.
pub type PromptEmbedding = Array2<f64>;
/// `65 × D_s` shape encoder output.
pub type ShapeTokens = Array2<f64>;
/// Diffusion latent, `(channels, height, width)`.
pub type Latent = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for LatentShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("backend.latent", format!("expected CxHxW, got `{s}`")))?;
        match parts.as_slice() {
            &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(Error::invalid("backend.latent", format!("expected CxHxW, got `{s}`"))),
        }
    }
}

/// Cumulative noise levels `α̂_t` for `t = 1..=T_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `α̂_t = Π (1 − β_i)` with β linear from `beta_start` to `beta_end`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("t_max", "must be positive"));
        }
        let mut acc = 1.0;
        let alphas_cumprod = (0..t_max)
            .map(|i| {
                let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
                let beta = beta_start + (beta_end - beta_start) * frac;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alphas_cumprod(alphas_cumprod)
    }

    /// Linear β from 1e-4 to 2e-2.
    pub fn toy_default(t_max: usize) -> Result<Self> {
        Self::linear(t_max, 1e-4, 2e-2)
    }

    /// Any schedule with every value in `(0, 1)`; monotonicity is not required.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::invalid("schedule", "empty schedule"));
        }
        if let Some(v) = alphas_cumprod.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::invalid("schedule", format!("alpha_bar {v} outside (0, 1)")));
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn t_max(&self) -> usize {
        self.alphas_cumprod.len()
    }

    /// `α̂_t` for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.t_max() {
            return Err(Error::invalid("t", format!("timestep {t} outside 1..={}", self.t_max())));
        }
        Ok(self.alphas_cumprod[t - 1])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.alphas_cumprod.windows(2).all(|w| w[1] < w[0])
    }
}

/// Output of a text encoder: embeddings plus the token strings behind slots `0..=eos_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub embedding: PromptEmbedding,
    pub tokens: Vec<String>,
    pub eos_index: usize,
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn max_tokens(&self) -> usize {
        MAX_TOKENS
    }

    /// Content tokens of `text`, without begin/end markers.
    fn tokenize(&self, text: &str) -> Result<Vec<String>>;

    fn encode(&self, text: &str) -> Result<EncodedText>;
}

pub trait ShapeEncoder: Send + Sync {
    fn token_count(&self) -> usize {
        SHAPE_TOKEN_COUNT
    }

    fn shape_dim(&self) -> usize;

    fn encode(&self, cloud: &PointCloud) -> Result<ShapeTokens>;
}

pub trait Denoiser: Send + Sync {
    fn latent_shape(&self) -> LatentShape;

    fn schedule(&self) -> &NoiseSchedule;

    /// Noise estimate `ε̂` for a noisy latent at 1-based timestep `t`.
    fn predict_noise(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> Result<Latent>;

    /// Vector-Jacobian product of [`Denoiser::predict_noise`] with respect to `cond`.
    fn conditioning_vjp(
        &self,
        _noisy: &Latent,
        _t: usize,
        _cond: &PromptEmbedding,
        _grad_out: &Latent,
    ) -> Result<PromptEmbedding> {
        Err(Error::Backend {
            name: "denoiser".into(),
            message: "backend does not expose conditioning gradients".into(),
        })
    }

    fn encode_image(&self, image: &Image) -> Result<Latent>;

    fn decode_latent(&self, latent: &Latent) -> Result<Image>;

    /// Digest of the frozen weights.
    fn fingerprint(&self) -> String;
}

/// Depth-conditioned branch used by pose-controlled sampling.
pub trait DepthController: Send + Sync {
    fn predict_noise_controlled(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, depth: &DepthImage) -> Result<Latent>;
}

pub trait ImageFeatures: Send + Sync {
    fn feature_dim(&self) -> usize;

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn aesthetic_score(&self, image: &Image) -> Result<f64>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &Image) -> Result<SilhouetteMask>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest<'a> {
    pub depth: &'a DepthImage,
    pub silhouette: &'a SilhouetteMask,
    pub prompt: &'a str,
    pub control_strength: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Depth-conditioned image generator used to build training data.
pub trait ImageSynthesizer: Send + Sync {
    fn synthesize(&self, request: &SynthesisRequest<'_>) -> Result<Image>;
}

pub trait Inpainter: Send + Sync {
    /// Repaints pixels outside `keep`, blending by `strength` in `[0, 1]`.
    fn inpaint(&self, image: &Image, keep: &SilhouetteMask, prompt: &str, strength: f64, seed: u64) -> Result<Image>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    External,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub seed: u64,
    pub text_dim: usize,
    pub shape_dim: usize,
    pub latent: LatentShape,
    pub t_max: usize,
    /// Pixels per latent cell for the toy autoencoder.
    pub image_scale: usize,
    pub segmenter_threshold: f64,
    /// `backend.model_path.<role>` entries.
    pub model_paths: BTreeMap<String, String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl BackendConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            kind: BackendKind::Toy,
            seed,
            text_dim: 16,
            shape_dim: 8,
            latent: LatentShape::new(4, 8, 8),
            t_max: 100,
            image_scale: 8,
            segmenter_threshold: 0.5,
            model_paths: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let kind = match cfg.get("backend.kind").unwrap_or("toy") {
            "toy" => BackendKind::Toy,
            "external" => BackendKind::External,
            other => return Err(Error::UnknownBackend(other.to_string())),
        };
        let base = Self::toy(0);
        let out = Self {
            kind,
            seed: cfg.get_or("backend.seed", base.seed)?,
            text_dim: cfg.get_or("backend.text_dim", base.text_dim)?,
            shape_dim: cfg.get_or("backend.shape_dim", base.shape_dim)?,
            latent: cfg.get_or("backend.latent", base.latent)?,
            t_max: cfg.get_or("backend.t_max", base.t_max)?,
            image_scale: cfg.get_or("backend.image_scale", base.image_scale)?,
            segmenter_threshold: cfg.get_or("segmenter.threshold", base.segmenter_threshold)?,
            model_paths: cfg.with_prefix("backend.model_path"),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("backend.text_dim", self.text_dim),
            ("backend.shape_dim", self.shape_dim),
            ("backend.t_max", self.t_max),
            ("backend.image_scale", self.image_scale),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Toy image resolution `(width, height)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.latent.width * self.image_scale, self.latent.height * self.image_scale)
    }
}

/// One loaded instance of every backend role.
#[derive(Clone)]
pub struct BackendSuite {
    pub kind: BackendKind,
    pub config: BackendConfig,
    pub text: Arc<dyn TextEncoder>,
    pub shape: Arc<dyn ShapeEncoder>,
    pub denoiser: Arc<dyn Denoiser>,
    pub control: Arc<dyn DepthController>,
    pub features: Arc<dyn ImageFeatures>,
    pub segmenter: Arc<dyn Segmenter>,
    pub synthesizer: Arc<dyn ImageSynthesizer>,
    pub inpainter: Arc<dyn Inpainter>,
}

impl fmt::Debug for BackendSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSuite")
            .field("kind", &self.kind)
            .field("text_dim", &self.text.embed_dim())
            .field("shape_dim", &self.shape.shape_dim())
            .field("latent", &self.denoiser.latent_shape())
            .finish()
    }
}

impl BackendSuite {
    pub fn text_dim(&self) -> usize {
        self.text.embed_dim()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape.shape_dim()
    }
}

pub fn load_backend_suite(config: &BackendConfig) -> Result<BackendSuite> {
    config.validate()?;
    match config.kind {
        BackendKind::Toy => toy::load_toy_suite(config),
        BackendKind::External => external::load_external_suite(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_schedule_is_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::toy_default(100).unwrap();
        assert_eq!(s.t_max(), 100);
        assert!(s.is_strictly_decreasing());
        assert!(s.as_slice().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(101).is_err());
    }

    #[test]
    fn latent_shape_parses() {
        assert_eq!("4x8x8".parse::<LatentShape>().unwrap(), LatentShape::new(4, 8, 8));
        assert!("4x8".parse::<LatentShape>().is_err());
        assert!("0x8x8".parse::<LatentShape>().is_err());
    }

    #[test]
    fn config_rejects_unknown_backend() {
        let cfg = ConfigFile::parse("backend.kind = quantum").unwrap();
        assert!(matches!(BackendConfig::from_config(&cfg), Err(Error::UnknownBackend(_))));
    }

    #[test]
    fn config_reads_model_paths() {
        let cfg = ConfigFile::parse("backend.kind = external\nbackend.text_dim = 1024\nbackend.model_path.text = http://h:1\n")
            .unwrap();
        let bc = BackendConfig::from_config(&cfg).unwrap();
        assert_eq!(bc.kind, BackendKind::External);
        assert_eq!(bc.text_dim, 1024);
        assert_eq!(bc.model_paths["text"], "http://h:1");
    }
}
