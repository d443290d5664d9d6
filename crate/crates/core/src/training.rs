//! Score-distillation training of the residual network against frozen backends.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSuite, Denoiser, Latent, NoiseSchedule, PromptEmbedding, ShapeTokens};
use crate::config::ConfigFile;
use crate::dataset::{read_manifest, resolve_asset};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::imaging::Image;
use crate::prompts::{encode_prompt, expand_template, TokenLayout};
use crate::seeding::{derive_rng, normal_vec};
use crate::shape2clip::{apply_residual, backward, forward_with_cache, save_params, GuidanceSpec, Shape2ClipParams};

/// Centre and width of the Gaussian factor in the timestep weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdsConfig {
    pub m: f64,
    pub s_w: f64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self { m: 500.0, s_w: 250.0 }
    }
}

/// Normalized timestep weights `W(1..=T_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamTimeWeights {
    weights: Vec<f64>,
    z: f64,
}

impl DreamTimeWeights {
    pub fn new(cfg: &SdsConfig, schedule: &NoiseSchedule) -> Result<Self> {
        if !(cfg.s_w > 0.0) || !cfg.m.is_finite() {
            return Err(Error::invalid(
                "sds",
                format!("need finite m and s_w > 0, got m={} s_w={}", cfg.m, cfg.s_w),
            ));
        }
        let raw: Vec<f64> = schedule
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &ab)| {
                let t = (i + 1) as f64;
                ((1.0 - ab) / ab).sqrt() * (-(t - cfg.m).powi(2) / (2.0 * cfg.s_w * cfg.s_w)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::invalid("sds", format!("normalizer Z = {z} is not positive")));
        }
        Ok(Self {
            weights: raw.into_iter().map(|w| w / z).collect(),
            z,
        })
    }

    pub fn t_max(&self) -> usize {
        self.weights.len()
    }

    /// Normalizer of the unweighted values.
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.weights.len() {
            return Err(Error::invalid("t", format!("{t} outside 1..={}", self.weights.len())));
        }
        Ok(self.weights[t - 1])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

pub fn dreamtime_weight(t: usize, cfg: &SdsConfig, schedule: &NoiseSchedule) -> Result<f64> {
    DreamTimeWeights::new(cfg, schedule)?.weight(t)
}

/// `z_t = √α̂_t·z₀ + √(1−α̂_t)·ε`.
pub fn noisify(z0: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    if z0.dim() != eps.dim() {
        return Err(Error::dims("noise", format!("{:?}", z0.dim()), format!("{:?}", eps.dim())));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Inputs of one score-distillation term.
#[derive(Debug, Clone, Copy)]
pub struct SdsSample<'a> {
    pub shape_tokens: &'a ShapeTokens,
    pub prompt: &'a PromptEmbedding,
    pub layout: &'a TokenLayout,
    pub z0: &'a Latent,
    pub t: usize,
    pub eps: &'a Latent,
    pub weight: f64,
}

/// `W(t)·‖ε̂ − ε‖²` and its gradient with respect to `params`.
pub fn sds_loss(denoiser: &dyn Denoiser, params: &Shape2ClipParams, s: &SdsSample<'_>) -> Result<(f64, Shape2ClipParams)> {
    let (delta, cache) = forward_with_cache(params, s.shape_tokens, s.prompt)?;
    let cond = apply_residual(s.prompt, &delta, &GuidanceSpec::training(), s.layout)?;
    let zt = noisify(s.z0, s.t, s.eps, denoiser.schedule())?;
    let eps_hat = denoiser.predict_noise(&zt, s.t, &cond)?;
    let resid = &eps_hat - s.eps;
    let loss = s.weight * resid.iter().map(|r| r * r).sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { loss, timestep: s.t });
    }
    let grad_eps_hat = resid * (2.0 * s.weight);
    // λ = 1 on every row, so ∂L/∂δT equals ∂L/∂T'
    let grad_cond = denoiser.conditioning_vjp(&zt, s.t, &cond, &grad_eps_hat)?;
    let grads = backward(params, &cache, &grad_cond)?;
    Ok((loss, grads))
}

/// Random square crop with side in `[min_scale, max_scale]·min(H, W)`, resized back.
pub fn augment_crop(image: &Image, min_scale: f64, max_scale: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    if !(0.0 < min_scale && min_scale <= max_scale && max_scale <= 1.0) {
        return Err(Error::invalid(
            "crop_scale",
            format!("need 0 < min ≤ max ≤ 1, got [{min_scale}, {max_scale}]"),
        ));
    }
    let (w, h) = (image.width(), image.height());
    let short = w.min(h) as f64;
    let lo = ((min_scale * short).round() as usize).max(1);
    let hi = ((max_scale * short).round() as usize).clamp(lo, w.min(h));
    let side = rng.random_range(lo..=hi);
    let left = rng.random_range(0..=w - side);
    let top = rng.random_range(0..=h - side);
    image.crop_resize(left, top, side, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    Uniform,
    /// Draw `t` with probability `W(t)` and drop the multiplicative weight.
    Weighted,
}

impl std::str::FromStr for TimestepSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "weighted" => Ok(Self::Weighted),
            _ => Err(Error::invalid(
                "timestep_sampling",
                format!("`{s}` is not uniform or weighted"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_min_scale: f64,
    pub crop_max_scale: f64,
    pub seed: u64,
    pub timesteps: TimestepSampling,
    pub sds: SdsConfig,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_steps: 1000,
            epochs: 55,
            batch_size: 1,
            crop_min_scale: 0.5,
            crop_max_scale: 0.8,
            seed: 0,
            timesteps: TimestepSampling::Uniform,
            sds: SdsConfig::default(),
            max_steps: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Reads `train.*` and `sds.*` keys over the defaults.
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let d = Self::default();
        let max_steps: usize = cfg.get_or("train.max_steps", 0)?;
        let out = Self {
            lr: cfg.get_or("train.lr", d.lr)?,
            warmup_steps: cfg.get_or("train.warmup_steps", d.warmup_steps)?,
            epochs: cfg.get_or("train.epochs", d.epochs)?,
            batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
            crop_min_scale: cfg.get_or("train.crop_min_scale", d.crop_min_scale)?,
            crop_max_scale: cfg.get_or("train.crop_max_scale", d.crop_max_scale)?,
            seed: cfg.get_or("train.seed", d.seed)?,
            timesteps: cfg.get_or("train.timesteps", d.timesteps)?,
            sds: SdsConfig {
                m: cfg.get_or("sds.m", d.sds.m)?,
                s_w: cfg.get_or("sds.s_w", d.sds.s_w)?,
            },
            max_steps: (max_steps > 0).then_some(max_steps),
            checkpoint_dir: None,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be positive"));
        }
        if !(0.0 < self.crop_min_scale && self.crop_min_scale <= self.crop_max_scale && self.crop_max_scale <= 1.0) {
            return Err(Error::invalid(
                "train.crop_max_scale",
                "need 0 < crop_min_scale ≤ crop_max_scale ≤ 1",
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `cfg.lr`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// Adam with bias correction and the usual moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Shape2ClipParams,
    v: Shape2ClipParams,
    steps: i32,
}

impl Adam {
    pub fn new(like: &Shape2ClipParams) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut Shape2ClipParams, grads: &Shape2ClipParams, lr: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let tensors = params
            .named_tensors_mut()
            .into_iter()
            .zip(grads.named_tensors())
            .zip(self.m.named_tensors_mut().into_iter().zip(self.v.named_tensors_mut()));
        for (((_, mut p), (_, g)), ((_, mut m), (_, mut v))) in tensors {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A resolved training example.
#[derive(Debug, Clone)]
pub struct TrainingTriplet {
    pub shape_id: String,
    pub shape_tokens: ShapeTokens,
    pub prompt: String,
    pub embedding: PromptEmbedding,
    pub layout: TokenLayout,
    pub image: Image,
    pub view_index: usize,
}

impl TrainingTriplet {
    /// Encodes the shape and the prompt template with `category` as the shape word.
    pub fn encode(
        suite: &BackendSuite,
        shape_id: &str,
        cloud: &PointCloud,
        template: &str,
        category: &str,
        image: Image,
        view_index: usize,
    ) -> Result<Self> {
        let prompt = expand_template(template, category)?;
        let (embedding, layout) = encode_prompt(suite.text.as_ref(), &prompt, category)?;
        Ok(Self {
            shape_id: shape_id.to_string(),
            shape_tokens: suite.shape.encode(cloud)?,
            prompt,
            embedding,
            layout,
            image,
            view_index,
        })
    }
}

/// Loads and encodes every manifest record; each cloud is encoded once.
pub fn load_triplets(manifest: impl AsRef<Path>, suite: &BackendSuite) -> Result<Vec<TrainingTriplet>> {
    let manifest = manifest.as_ref();
    let records = read_manifest(manifest)?;
    let mut tokens: std::collections::HashMap<String, ShapeTokens> = Default::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let shape_tokens = match tokens.get(&r.cloud_path) {
            Some(b) => b.clone(),
            None => {
                let cloud = PointCloud::load(resolve_asset(manifest, &r.cloud_path))?;
                let b = suite.shape.encode(&cloud)?;
                tokens.insert(r.cloud_path.clone(), b.clone());
                b
            }
        };
        let prompt = expand_template(&r.prompt, &r.category)?;
        let (embedding, layout) = encode_prompt(suite.text.as_ref(), &prompt, &r.category)?;
        out.push(TrainingTriplet {
            shape_id: r.shape_id,
            shape_tokens,
            prompt,
            embedding,
            layout,
            image: Image::load(resolve_asset(manifest, &r.image_path))?,
            view_index: r.view_index,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Shape2ClipParams,
    pub log: Vec<StepRecord>,
    /// Lowest mean epoch loss and the epoch (1-based) it was reached in.
    pub best: Option<(usize, f64)>,
}

/// Mean loss over the first and last `window` steps.
pub fn smoothed_loss(log: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    let w = window.min(log.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// Fixed evaluation draws for [`expected_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSpec {
    /// Seeded crops per triplet, drawn like training crops; 0 scores the uncropped image.
    pub crops: usize,
    pub crop_min_scale: f64,
    pub crop_max_scale: f64,
    pub seed: u64,
}

impl EvalSpec {
    pub fn matching(cfg: &TrainConfig, crops: usize) -> Self {
        Self {
            crops,
            crop_min_scale: cfg.crop_min_scale,
            crop_max_scale: cfg.crop_max_scale,
            seed: cfg.seed,
        }
    }
}

/// The training objective averaged over every timestep, every triplet and a
/// fixed set of crops and noise draws; a low-variance view of the loss.
pub fn expected_loss(
    denoiser: &dyn Denoiser,
    params: &Shape2ClipParams,
    triplets: &[TrainingTriplet],
    sds: &SdsConfig,
    eval: &EvalSpec,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::invalid("triplets", "nothing to evaluate"));
    }
    let weights = DreamTimeWeights::new(sds, denoiser.schedule())?;
    let per_triplet = triplets
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let (delta, _) = forward_with_cache(params, &tr.shape_tokens, &tr.embedding)?;
            let cond = apply_residual(&tr.embedding, &delta, &GuidanceSpec::training(), &tr.layout)?;
            let mut rng = derive_rng(eval.seed, &format!("eval/{i}"));
            let images = if eval.crops == 0 {
                vec![tr.image.clone()]
            } else {
                (0..eval.crops)
                    .map(|_| augment_crop(&tr.image, eval.crop_min_scale, eval.crop_max_scale, &mut rng))
                    .collect::<Result<Vec<_>>>()?
            };
            let mut total = 0.0;
            for image in &images {
                let z0 = denoiser.encode_image(image)?;
                let eps = Latent::from_shape_vec(z0.dim(), normal_vec(&mut rng, z0.len(), 1.0)).expect("sized");
                for t in 1..=weights.t_max() {
                    let zt = noisify(&z0, t, &eps, denoiser.schedule())?;
                    let r = denoiser.predict_noise(&zt, t, &cond)? - &eps;
                    total += weights.as_slice()[t - 1] * r.iter().map(|v| v * v).sum::<f64>();
                }
            }
            Ok(total / (weights.t_max() * images.len()) as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_triplet.iter().sum::<f64>() / triplets.len() as f64)
}

fn sample_timestep(rng: &mut ChaCha8Rng, weights: &DreamTimeWeights, mode: TimestepSampling) -> (usize, f64) {
    match mode {
        TimestepSampling::Uniform => {
            let t = rng.random_range(1..=weights.t_max());
            (t, weights.as_slice()[t - 1])
        }
        TimestepSampling::Weighted => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, w) in weights.as_slice().iter().enumerate() {
                acc += w;
                if u < acc {
                    return (i + 1, 1.0);
                }
            }
            (weights.t_max(), 1.0)
        }
    }
}

fn sample_term(
    suite: &BackendSuite,
    params: &Shape2ClipParams,
    triplet: &TrainingTriplet,
    cfg: &TrainConfig,
    t: usize,
    weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Shape2ClipParams)> {
    let image = augment_crop(&triplet.image, cfg.crop_min_scale, cfg.crop_max_scale, rng)?;
    let z0 = suite.denoiser.encode_image(&image)?;
    let eps = Latent::from_shape_vec(z0.dim(), normal_vec(rng, z0.len(), 1.0)).expect("sized");
    sds_loss(
        suite.denoiser.as_ref(),
        params,
        &SdsSample {
            shape_tokens: &triplet.shape_tokens,
            prompt: &triplet.embedding,
            layout: &triplet.layout,
            z0: &z0,
            t,
            eps: &eps,
            weight,
        },
    )
}

fn checkpoint(dir: &Path, name: &str, params: &Shape2ClipParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_params(params, dir.join(name))
}

/// Runs epochs of shuffled mini-batches. Each step draws one timestep for the
/// whole batch; per-example terms are computed in parallel and summed in order.
pub fn train(
    suite: &BackendSuite,
    triplets: &[TrainingTriplet],
    init: Shape2ClipParams,
    cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::invalid("manifest", "training set is empty"));
    }
    let frozen = suite.denoiser.fingerprint();
    let weights = DreamTimeWeights::new(&cfg.sds, suite.denoiser.schedule())?;
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut step = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut derive_rng(cfg.seed, &format!("epoch-{epoch}")));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if step >= budget {
                break 'epochs;
            }
            let mut rng = derive_rng(cfg.seed, &format!("step-{step}"));
            let (t, weight) = sample_timestep(&mut rng, &weights, cfg.timesteps);
            let terms: Vec<(f64, Shape2ClipParams)> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let mut rng = derive_rng(cfg.seed, &format!("step-{step}/item-{i}"));
                    sample_term(suite, &params, &triplets[idx], cfg, t, weight, &mut rng)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / terms.len() as f64;
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &terms {
                loss += l * scale;
                grads.add_scaled(g, scale);
            }
            let lr = lr_at(step, cfg);
            adam.step(&mut params, &grads, lr);
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: f64::NAN,
                    timestep: t,
                });
            }
            let record = StepRecord { step, t, loss, lr };
            if let Some(sink) = log_sink.as_deref_mut() {
                serde_json::to_writer(&mut *sink, &record)?;
                sink.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
            }
            log.push(record);
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps == 0 {
            continue;
        }
        let mean = epoch_loss / epoch_steps as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6} over {epoch_steps} steps");
        if let Some(dir) = &cfg.checkpoint_dir {
            checkpoint(dir, &format!("epoch-{epoch:04}.s2cp"), &params)?;
            if best.is_none_or(|(_, b)| mean < b) {
                checkpoint(dir, "best.s2cp", &params)?;
            }
        }
        if best.is_none_or(|(_, b)| mean < b) {
            best = Some((epoch, mean));
        }
    }

    if suite.denoiser.fingerprint() != frozen {
        return Err(Error::Backend {
            name: "denoiser".into(),
            message: "frozen weights changed during training".into(),
        });
    }
    Ok(TrainOutcome { params, log, best })
}
