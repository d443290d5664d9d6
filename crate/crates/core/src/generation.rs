//! Reverse diffusion with shape-guided prompts, λ sweeps and latent handoff
//! from the depth-conditioned branch.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSuite, Latent, LatentShape, NoiseSchedule, PromptEmbedding, ShapeTokens};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::imaging::{DepthImage, Image};
use crate::prompts::{encode_prompt, expand_template, TokenLayout};
use crate::seeding::{derive_rng, normal_vec};
use crate::shape2clip::{apply_residual, forward, validate_lambda, GuidanceSpec, ResidualDelta, Shape2ClipParams};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// DDIM with η = 0.
    Deterministic,
    /// Ancestral sampling (DDIM with η = 1), noise drawn from the request seed.
    Stochastic,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Deterministic => "deterministic",
            SamplerKind::Stochastic => "stochastic",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" | "ddim" => Ok(SamplerKind::Deterministic),
            "stochastic" | "ancestral" => Ok(SamplerKind::Stochastic),
            _ => Err(Error::invalid("sampler", format!("`{s}` is not deterministic or stochastic"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    pub seed: u64,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            kind: SamplerKind::Deterministic,
            seed: 0,
            guidance_scale: 1.0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.t_max() {
            return Err(Error::invalid(
                "steps",
                format!("{} outside 1..={}", self.steps, schedule.t_max()),
            ));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::invalid(
                "guidance_scale",
                format!("{} is not a finite non-negative scale", self.guidance_scale),
            ));
        }
        Ok(())
    }
}

/// Descending timesteps visited by a `steps`-step sampler over `1..=t_max`.
pub fn timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::invalid("steps", format!("{steps} outside 1..={t_max}")));
    }
    Ok((1..=steps).rev().map(|k| (k * t_max).div_ceil(steps)).collect())
}

pub fn initial_latent(shape: LatentShape, seed: u64) -> Latent {
    let mut rng = derive_rng(seed, "initial-latent");
    Latent::from_shape_vec(shape.dim(), normal_vec(&mut rng, shape.len(), 1.0)).expect("sized")
}

/// One reverse update from `t` to `t_prev` (`None` means the clean end point).
fn reverse_step(
    schedule: &NoiseSchedule,
    z: &Latent,
    t: usize,
    t_prev: Option<usize>,
    eps: &Latent,
    kind: SamplerKind,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Latent> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(tp) => schedule.alpha_bar(tp)?,
        None => 1.0,
    };
    let x0 = (z - &(eps * (1.0 - ab).sqrt())) / ab.sqrt();
    let sigma = match kind {
        SamplerKind::Deterministic => 0.0,
        SamplerKind::Stochastic => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt(),
    };
    let mut next = x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    if sigma > 0.0 {
        let noise = normal_vec(rng, next.len(), sigma);
        next.iter_mut().zip(noise).for_each(|(v, n)| *v += n);
    }
    Ok(next)
}

/// Runs reverse steps `ts[range]` of a full schedule, predicting noise with `predict`.
#[allow(clippy::too_many_arguments)]
fn run_steps(
    schedule: &NoiseSchedule,
    ts: &[usize],
    range: std::ops::Range<usize>,
    mut z: Latent,
    sampler: &SamplerConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    predict: &dyn Fn(&Latent, usize, &PromptEmbedding) -> Result<Latent>,
    cond: &PromptEmbedding,
    uncond: Option<&PromptEmbedding>,
) -> Result<Latent> {
    for i in range {
        let t = ts[i];
        let mut eps = predict(&z, t, cond)?;
        if let Some(u) = uncond {
            let base = predict(&z, t, u)?;
            eps = &base + &((&eps - &base) * sampler.guidance_scale);
        }
        z = reverse_step(schedule, &z, t, ts.get(i + 1).copied(), &eps, sampler.kind, rng)?;
    }
    Ok(z)
}

/// Samples a clean latent conditioned on `cond`.
pub fn sample_latent(suite: &BackendSuite, cond: &PromptEmbedding, sampler: &SamplerConfig) -> Result<Latent> {
    let schedule = suite.denoiser.schedule();
    sampler.validate(schedule)?;
    let ts = timesteps(schedule.t_max(), sampler.steps)?;
    let uncond = unconditional(suite, sampler)?;
    let mut rng = derive_rng(sampler.seed, "sampler-noise");
    let denoiser = suite.denoiser.as_ref();
    let predict = |z: &Latent, t: usize, c: &PromptEmbedding| denoiser.predict_noise(z, t, c);
    run_steps(
        schedule,
        &ts,
        0..ts.len(),
        initial_latent(denoiser.latent_shape(), sampler.seed),
        sampler,
        &mut rng,
        &predict,
        cond,
        uncond.as_ref(),
    )
}

fn unconditional(suite: &BackendSuite, sampler: &SamplerConfig) -> Result<Option<PromptEmbedding>> {
    if sampler.guidance_scale == 1.0 {
        return Ok(None);
    }
    Ok(Some(suite.text.encode("")?.embedding))
}

/// The prompt embedding and layout for `template` with `category` substituted.
pub fn encode_template(suite: &BackendSuite, template: &str, category: &str) -> Result<(PromptEmbedding, TokenLayout)> {
    let prompt = expand_template(template, category)?;
    encode_prompt(suite.text.as_ref(), &prompt, category)
}

/// Shape conditioning input: a raw cloud, or tokens already produced by the shape encoder.
#[derive(Debug, Clone, Copy)]
pub enum ShapeInput<'a> {
    Cloud(&'a PointCloud),
    Tokens(&'a ShapeTokens),
}

impl<'a> From<&'a PointCloud> for ShapeInput<'a> {
    fn from(c: &'a PointCloud) -> Self {
        ShapeInput::Cloud(c)
    }
}

impl<'a> From<&'a ShapeTokens> for ShapeInput<'a> {
    fn from(t: &'a ShapeTokens) -> Self {
        ShapeInput::Tokens(t)
    }
}

impl ShapeInput<'_> {
    pub fn tokens(&self, suite: &BackendSuite) -> Result<ShapeTokens> {
        match self {
            ShapeInput::Cloud(c) => suite.shape.encode(c),
            ShapeInput::Tokens(t) => {
                let want = (crate::backends::SHAPE_TOKEN_COUNT, suite.shape_dim());
                if t.dim() != want {
                    return Err(Error::dims(
                        "shape tokens",
                        format!("{}x{}", want.0, want.1),
                        format!("{}x{}", t.nrows(), t.ncols()),
                    ));
                }
                Ok((*t).clone())
            }
        }
    }
}

fn require_params(params: Option<&Shape2ClipParams>) -> Result<&Shape2ClipParams> {
    params.ok_or_else(|| Error::NotFound("Shape2CLIP parameters are not loaded".into()))
}

/// Prompt conditioning with the shape residual applied.
#[derive(Debug, Clone)]
pub struct GuidedPrompt {
    pub plain: PromptEmbedding,
    pub layout: TokenLayout,
    pub delta: ResidualDelta,
}

impl GuidedPrompt {
    pub fn new(
        suite: &BackendSuite,
        params: &Shape2ClipParams,
        shape_tokens: &ShapeTokens,
        template: &str,
        category: &str,
    ) -> Result<Self> {
        let (plain, layout) = encode_template(suite, template, category)?;
        let delta = forward(params, shape_tokens, &plain)?;
        Ok(Self { plain, layout, delta })
    }

    pub fn conditioning(&self, guidance: &GuidanceSpec) -> Result<PromptEmbedding> {
        apply_residual(&self.plain, &self.delta, guidance, &self.layout)
    }
}

/// Image for `template` guided by `shape`.
pub fn generate<'a>(
    suite: &BackendSuite,
    params: Option<&Shape2ClipParams>,
    shape: impl Into<ShapeInput<'a>>,
    template: &str,
    category: &str,
    guidance: &GuidanceSpec,
    sampler: &SamplerConfig,
) -> Result<Image> {
    let params = require_params(params)?;
    let tokens = shape.into().tokens(suite)?;
    let guided = GuidedPrompt::new(suite, params, &tokens, template, category)?;
    let latent = sample_latent(suite, &guided.conditioning(guidance)?, sampler)?;
    suite.denoiser.decode_latent(&latent)
}

/// Image for the unmodified prompt.
pub fn generate_plain(suite: &BackendSuite, template: &str, category: &str, sampler: &SamplerConfig) -> Result<Image> {
    let (plain, _) = encode_template(suite, template, category)?;
    let latent = sample_latent(suite, &plain, sampler)?;
    suite.denoiser.decode_latent(&latent)
}

/// One image per λ from a single cached residual and a shared initial latent.
#[allow(clippy::too_many_arguments)]
pub fn sweep_lambda<'a>(
    suite: &BackendSuite,
    params: Option<&Shape2ClipParams>,
    shape: impl Into<ShapeInput<'a>>,
    template: &str,
    category: &str,
    strategy: crate::shape2clip::TokenStrategy,
    lambdas: &[f64],
    sampler: &SamplerConfig,
) -> Result<Vec<Image>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambdas", "sweep needs at least one value"));
    }
    for &l in lambdas {
        validate_lambda(l)?;
    }
    let params = require_params(params)?;
    let tokens = shape.into().tokens(suite)?;
    let guided = GuidedPrompt::new(suite, params, &tokens, template, category)?;
    lambdas
        .par_iter()
        .map(|&lambda| {
            let cond = guided.conditioning(&GuidanceSpec::new(lambda, strategy)?)?;
            suite.denoiser.decode_latent(&sample_latent(suite, &cond, sampler)?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffMode {
    /// Phase two uses the shape-guided prompt.
    ShapeWords,
    /// Phase two uses the plain prompt.
    CNetStop,
}

impl FromStr for HandoffMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapewords" | "shape_words" => Ok(HandoffMode::ShapeWords),
            "cnet-stop" | "cnet_stop" => Ok(HandoffMode::CNetStop),
            _ => Err(Error::invalid(
                "handoff mode",
                format!("`{s}` is not shapewords or cnet-stop"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HandoffSpec {
    /// Percentage of steps run under the depth-conditioned branch.
    pub k_percent: f64,
    pub depth: Option<DepthImage>,
    pub mode: HandoffMode,
}

impl HandoffSpec {
    pub fn disabled() -> Self {
        Self {
            k_percent: 0.0,
            depth: None,
            mode: HandoffMode::ShapeWords,
        }
    }

    pub fn new(k_percent: f64, depth: DepthImage, mode: HandoffMode) -> Self {
        Self {
            k_percent,
            depth: Some(depth),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.k_percent) {
            return Err(Error::invalid("k", format!("{} outside [0, 100]", self.k_percent)));
        }
        if self.k_percent > 0.0 && self.depth.is_none() {
            return Err(Error::invalid("depth", "a depth image is required when k > 0"));
        }
        Ok(())
    }

    /// `⌈K%·steps⌉`.
    pub fn phase_one_steps(&self, steps: usize) -> usize {
        ((self.k_percent * steps as f64) / 100.0).ceil() as usize
    }
}

/// What a handoff run invoked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub phase_one_calls: usize,
    pub phase_two_calls: usize,
    pub shape2clip_calls: usize,
}

/// Depth-conditioned steps first, then the remaining steps on the guided (or plain) prompt.
#[allow(clippy::too_many_arguments)]
pub fn generate_with_handoff<'a>(
    suite: &BackendSuite,
    params: Option<&Shape2ClipParams>,
    shape: impl Into<ShapeInput<'a>>,
    template: &str,
    category: &str,
    guidance: &GuidanceSpec,
    handoff: &HandoffSpec,
    sampler: &SamplerConfig,
) -> Result<(Image, GenerationTrace)> {
    handoff.validate()?;
    let shape = shape.into();
    let schedule = suite.denoiser.schedule();
    sampler.validate(schedule)?;
    let ts = timesteps(schedule.t_max(), sampler.steps)?;
    let n1 = handoff.phase_one_steps(sampler.steps);
    let n2 = ts.len().saturating_sub(n1);
    if n1 + n2 != sampler.steps {
        return Err(Error::invalid(
            "steps",
            format!("handoff split {n1} + {n2} does not cover {} steps", sampler.steps),
        ));
    }
    let (plain, layout) = encode_template(suite, template, category)?;
    let uncond = unconditional(suite, sampler)?;
    let mut rng = derive_rng(sampler.seed, "sampler-noise");
    let mut trace = GenerationTrace::default();
    let mut z = initial_latent(suite.denoiser.latent_shape(), sampler.seed);

    if n1 > 0 {
        let depth = handoff.depth.as_ref().expect("validated");
        let control = suite.control.as_ref();
        let predict = |z: &Latent, t: usize, c: &PromptEmbedding| control.predict_noise_controlled(z, t, c, depth);
        z = run_steps(schedule, &ts, 0..n1, z, sampler, &mut rng, &predict, &plain, uncond.as_ref())?;
        trace.phase_one_calls = n1;
    }
    if n2 > 0 {
        let cond = match handoff.mode {
            HandoffMode::CNetStop => plain,
            HandoffMode::ShapeWords => {
                let params = require_params(params)?;
                let tokens = shape.tokens(suite)?;
                let delta = forward(params, &tokens, &plain)?;
                trace.shape2clip_calls += 1;
                apply_residual(&plain, &delta, guidance, &layout)?
            }
        };
        let denoiser = suite.denoiser.as_ref();
        let predict = |z: &Latent, t: usize, c: &PromptEmbedding| denoiser.predict_noise(z, t, c);
        z = run_steps(
            schedule,
            &ts,
            n1..ts.len(),
            z,
            sampler,
            &mut rng,
            &predict,
            &cond,
            uncond.as_ref(),
        )?;
        trace.phase_two_calls = n2;
    }
    Ok((suite.denoiser.decode_latent(&z)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{load_backend_suite, BackendConfig};

    #[test]
    fn timesteps_are_strided_and_descending() {
        assert_eq!(timesteps(100, 100).unwrap(), (1..=100).rev().collect::<Vec<_>>());
        assert_eq!(timesteps(100, 4).unwrap(), vec![100, 75, 50, 25]);
        assert_eq!(timesteps(10, 3).unwrap(), vec![10, 7, 4]);
        assert!(timesteps(10, 0).is_err());
        assert!(timesteps(10, 11).is_err());
    }

    #[test]
    fn deterministic_step_with_exact_noise_recovers_clean_latent() {
        let schedule = NoiseSchedule::toy_default(100).unwrap();
        let mut rng = derive_rng(0, "x");
        let x0 = Latent::from_shape_vec((1, 2, 2), normal_vec(&mut rng, 4, 1.0)).unwrap();
        let eps = Latent::from_shape_vec((1, 2, 2), normal_vec(&mut rng, 4, 1.0)).unwrap();
        let ab = schedule.alpha_bar(60).unwrap();
        let z = &x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let out = reverse_step(&schedule, &z, 60, None, &eps, SamplerKind::Deterministic, &mut rng).unwrap();
        for (a, b) in out.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn handoff_phase_counts() {
        let h = |k| HandoffSpec {
            k_percent: k,
            depth: None,
            mode: HandoffMode::ShapeWords,
        };
        assert_eq!(h(40.0).phase_one_steps(100), 40);
        assert_eq!(h(40.0).phase_one_steps(50), 20);
        assert_eq!(h(30.0).phase_one_steps(7), 3);
        assert_eq!(h(0.0).phase_one_steps(50), 0);
        assert_eq!(h(100.0).phase_one_steps(50), 50);
        assert!(h(40.0).validate().is_err());
        assert!(h(101.0).validate().is_err());
    }

    #[test]
    fn sampler_parses_and_validates() {
        assert_eq!("ddim".parse::<SamplerKind>().unwrap(), SamplerKind::Deterministic);
        assert!("euler".parse::<SamplerKind>().is_err());
        let suite = load_backend_suite(&BackendConfig::toy(1)).unwrap();
        let schedule = suite.denoiser.schedule();
        assert!(SamplerConfig::default().with_steps(0).validate(schedule).is_err());
        assert!(SamplerConfig::default().with_steps(101).validate(schedule).is_err());
        assert!(SamplerConfig::default().validate(schedule).is_ok());
    }

    #[test]
    fn stochastic_sampler_is_seeded() {
        let suite = load_backend_suite(&BackendConfig::toy(2)).unwrap();
        let (cond, _) = encode_template(&suite, "a [SHAPE-ID]", "chair").unwrap();
        let cfg = SamplerConfig {
            kind: SamplerKind::Stochastic,
            steps: 20,
            ..SamplerConfig::default()
        };
        let a = sample_latent(&suite, &cond, &cfg.with_seed(3)).unwrap();
        let b = sample_latent(&suite, &cond, &cfg.with_seed(3)).unwrap();
        assert_eq!(a, b);
    }
}
