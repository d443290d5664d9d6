//! Small deterministic stand-ins for every backend role.
//!
//! All weights derive from the suite seed, so two suites built from the same
//! [`BackendConfig`] produce bit-identical outputs.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::{
    BackendConfig, BackendKind, BackendSuite, Denoiser, DepthController, EncodedText, ImageFeatures, ImageSynthesizer, Inpainter,
    Latent, LatentShape, NoiseSchedule, PromptEmbedding, Segmenter, ShapeEncoder, ShapeTokens, SynthesisRequest, TextEncoder,
    MAX_TOKENS, SHAPE_TOKEN_COUNT,
};
use crate::error::{Error, Result};
use crate::geometry::{group_patches, normalize_cloud, PointCloud, SilhouetteMask, DEFAULT_NUM_PATCHES};
use crate::imaging::{DepthImage, Image};
use crate::seeding::{derive_rng, fingerprint_f64, hash64, normal_vec};

pub const BEGIN_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
pub const PAD_TOKEN: &str = "<|pad|>";
/// Aesthetic score reported by the toy feature backend for every image.
pub const TOY_AESTHETIC_SCORE: f64 = 5.0;
pub const TOY_FEATURE_DIM: usize = 32;
/// Cosine frequencies per axis in the toy decoder basis.
const DECODER_GAIN: f64 = 8.0;
const PATCH_GROUP_SIZE: usize = 32;
const PATCH_FEATURES: usize = 8;

/// Splits text into lowercase word tokens; punctuation characters become their own tokens.
pub fn toy_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Whitespace tokenizer with a hash-seeded embedding table.
///
/// Layout: slot 0 is the begin marker, words follow, the EOS slot comes next
/// and every remaining slot holds the padding embedding. The EOS row is its
/// base embedding plus the mean of the word rows.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = derive_rng(self.seed, &format!("text-token:{token}"));
        Array1::from(normal_vec(&mut rng, self.dim, 1.0 / (self.dim as f64).sqrt()))
    }

    /// Padding rows are zero so mean-pooled conditioning is driven by content rows.
    pub fn pad_embedding(&self) -> Array1<f64> {
        Array1::zeros(self.dim)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>> {
        Ok(toy_tokenize(text))
    }

    fn encode(&self, text: &str) -> Result<EncodedText> {
        let words = toy_tokenize(text);
        if words.len() + 2 > MAX_TOKENS {
            return Err(Error::invalid(
                "text",
                format!("{} tokens exceed the {} available slots", words.len(), MAX_TOKENS - 2),
            ));
        }
        let mut embedding = Array2::zeros((MAX_TOKENS, self.dim));
        embedding.row_mut(0).assign(&self.token_embedding(BEGIN_TOKEN));
        let mut word_sum = Array1::<f64>::zeros(self.dim);
        for (i, w) in words.iter().enumerate() {
            let e = self.token_embedding(w);
            word_sum += &e;
            embedding.row_mut(i + 1).assign(&e);
        }
        let eos_index = words.len() + 1;
        let mut eos = self.token_embedding(END_TOKEN);
        if !words.is_empty() {
            eos += &(word_sum / words.len() as f64);
        }
        embedding.row_mut(eos_index).assign(&eos);
        let pad = self.pad_embedding();
        for r in eos_index + 1..MAX_TOKENS {
            embedding.row_mut(r).assign(&pad);
        }
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(BEGIN_TOKEN.to_string());
        tokens.extend(words);
        tokens.push(END_TOKEN.to_string());
        Ok(EncodedText {
            embedding,
            tokens,
            eos_index,
        })
    }
}

/// Patch tokenizer: FPS patches, hand-made local statistics, fixed random projection.
#[derive(Debug, Clone)]
pub struct ToyShapeEncoder {
    dim: usize,
    patch_weight: Array2<f64>,
    patch_bias: Array1<f64>,
    class_weight: Array2<f64>,
    class_bias: Array1<f64>,
}

impl ToyShapeEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, "shape-encoder");
        let pw = normal_vec(&mut rng, PATCH_FEATURES * dim, 1.5 / (PATCH_FEATURES as f64).sqrt());
        let pb = normal_vec(&mut rng, dim, 0.1);
        let cw = normal_vec(&mut rng, 2 * dim * dim, 1.0 / (2.0 * dim as f64).sqrt());
        let cb = normal_vec(&mut rng, dim, 0.1);
        Self {
            dim,
            patch_weight: Array2::from_shape_vec((PATCH_FEATURES, dim), pw).expect("sized"),
            patch_bias: Array1::from(pb),
            class_weight: Array2::from_shape_vec((2 * dim, dim), cw).expect("sized"),
            class_bias: Array1::from(cb),
        }
    }
}

impl ShapeEncoder for ToyShapeEncoder {
    fn shape_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, cloud: &PointCloud) -> Result<ShapeTokens> {
        let cloud = normalize_cloud(cloud)?;
        let group_size = PATCH_GROUP_SIZE.min(cloud.len());
        let patches = group_patches(&cloud, DEFAULT_NUM_PATCHES, group_size)?;
        let pts = cloud.points();
        let mut feats = Array2::zeros((DEFAULT_NUM_PATCHES, PATCH_FEATURES));
        for (p, (center, group)) in patches.centers.iter().zip(&patches.groups).enumerate() {
            let n = group.len() as f64;
            let mut mean = [0.0; 3];
            for &i in group {
                for a in 0..3 {
                    mean[a] += (pts[i][a] - center[a]) / n;
                }
            }
            let radii: Vec<f64> = group
                .iter()
                .map(|&i| (0..3).map(|a| (pts[i][a] - center[a]).powi(2)).sum::<f64>().sqrt())
                .collect();
            let mean_r = radii.iter().sum::<f64>() / n;
            let max_r = radii.iter().cloned().fold(0.0, f64::max);
            let row = [
                center[0],
                center[1],
                center[2],
                mean[0] * 8.0,
                mean[1] * 8.0,
                mean[2] * 8.0,
                mean_r * 8.0,
                max_r * 4.0,
            ];
            for (c, v) in row.into_iter().enumerate() {
                feats[[p, c]] = v;
            }
        }
        let patch_tokens = (feats.dot(&self.patch_weight) + &self.patch_bias).mapv(f64::tanh);
        let mean_pool = patch_tokens.mean_axis(Axis(0)).expect("nonempty");
        let max_pool = patch_tokens.fold_axis(Axis(0), f64::NEG_INFINITY, |&m, &v| m.max(v));
        let pooled = ndarray::concatenate![Axis(0), mean_pool, max_pool];
        let class_token = (pooled.dot(&self.class_weight) + &self.class_bias).mapv(f64::tanh);

        let mut out = Array2::zeros((SHAPE_TOKEN_COUNT, self.dim));
        out.row_mut(0).assign(&class_token);
        out.slice_mut(ndarray::s![1.., ..]).assign(&patch_tokens);
        Ok(out)
    }
}

/// Denoiser built around an x0-predicting network on the mean-pooled prompt.
///
/// `x0 = W2·tanh(W1·mean(T') + b1) + b2`, with one hidden unit per embedding
/// dimension, and the noise estimate is
/// `ε̂ = (z_t − √α̂_t·x0) / √(1 − α̂_t)`.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    latent: LatentShape,
    schedule: NoiseSchedule,
    image_scale: usize,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl ToyDenoiser {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        let schedule = NoiseSchedule::toy_default(config.t_max)?;
        let (c, h, w) = config.latent.dim();
        let dt = config.text_dim;
        let mut rng = derive_rng(config.seed, "denoiser");
        let w1 = random_orthogonal(dt, &mut rng) * DECODER_GAIN;
        // hidden unit k drives the k-th lowest-frequency cosine pattern
        let mut patterns: Vec<(usize, usize, usize)> = (0..c)
            .flat_map(|ch| (0..h).flat_map(move |fy| (0..w).map(move |fx| (ch, fy, fx))))
            .collect();
        patterns.sort_by_key(|&(ch, fy, fx)| (fy.max(fx), fy + fx, fy, ch));
        let mut w2 = Array2::zeros((dt, c * h * w));
        for (unit, &(ch, fy, fx)) in patterns.iter().take(dt).enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let cy = (std::f64::consts::PI * (y as f64 + 0.5) * fy as f64 / h as f64).cos();
                    let cx = (std::f64::consts::PI * (x as f64 + 0.5) * fx as f64 / w as f64).cos();
                    w2[[unit, (ch * h + y) * w + x]] = cy * cx;
                }
            }
        }
        Ok(Self {
            latent: config.latent,
            schedule,
            image_scale: config.image_scale,
            w1,
            b1: Array1::zeros(dt),
            w2,
            // a neutral prompt decodes to a plain mid-background backdrop
            b2: Array1::from_elem(c * h * w, TOY_BACKGROUND_MAX as f64 - 1.0),
        })
    }

    fn check(&self, noisy: &Latent, cond: &PromptEmbedding) -> Result<()> {
        if noisy.dim() != self.latent.dim() {
            return Err(Error::dims("denoiser latent", self.latent, format!("{:?}", noisy.dim())));
        }
        if cond.ncols() != self.w1.nrows() || cond.nrows() == 0 {
            return Err(Error::dims(
                "denoiser conditioning",
                format!("Nx{}", self.w1.nrows()),
                format!("{}x{}", cond.nrows(), cond.ncols()),
            ));
        }
        Ok(())
    }

    fn hidden(&self, cond: &PromptEmbedding) -> Array1<f64> {
        let pooled = cond.mean_axis(Axis(0)).expect("nonempty");
        (pooled.dot(&self.w1) + &self.b1).mapv(f64::tanh)
    }

    /// The network's clean-latent prediction for `cond`.
    pub fn predict_x0(&self, cond: &PromptEmbedding) -> Latent {
        let x0 = self.hidden(cond).dot(&self.w2) + &self.b2;
        x0.into_shape_with_order(self.latent.dim()).expect("sized")
    }
}

impl Denoiser for ToyDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.latent
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> Result<Latent> {
        self.check(noisy, cond)?;
        let ab = self.schedule.alpha_bar(t)?;
        let x0 = self.predict_x0(cond);
        Ok((noisy - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt())
    }

    fn conditioning_vjp(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, grad_out: &Latent) -> Result<PromptEmbedding> {
        self.check(noisy, cond)?;
        if grad_out.dim() != self.latent.dim() {
            return Err(Error::dims("denoiser gradient", self.latent, format!("{:?}", grad_out.dim())));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let h = self.hidden(cond);
        let flat = grad_out.iter().copied().collect::<Array1<f64>>();
        let d_x0 = flat * (-(ab / (1.0 - ab)).sqrt());
        let d_h = self.w2.dot(&d_x0);
        let d_pre = d_h * h.mapv(|v| 1.0 - v * v);
        let d_pooled = self.w1.dot(&d_pre) / cond.nrows() as f64;
        let mut grad = Array2::zeros(cond.dim());
        for mut row in grad.axis_iter_mut(Axis(0)) {
            row.assign(&d_pooled);
        }
        Ok(grad)
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        let (w, h) = (self.latent.width * self.image_scale, self.latent.height * self.image_scale);
        let resized;
        let image = if image.width() != w || image.height() != h {
            let side = image.width().min(image.height());
            resized = image.crop_resize(0, 0, side, w, h)?;
            &resized
        } else {
            image
        };
        let small = image.downsample(self.image_scale)?;
        let mut z = Array3::zeros(self.latent.dim());
        for y in 0..self.latent.height {
            for x in 0..self.latent.width {
                let rgb = small.get(x, y);
                let lum = (rgb[0] + rgb[1] + rgb[2]) / 3.0;
                for c in 0..self.latent.channels {
                    let v = if c < 3 { rgb[c] } else { lum };
                    z[[c, y, x]] = 2.0 * v as f64 - 1.0;
                }
            }
        }
        Ok(z)
    }

    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        if latent.dim() != self.latent.dim() {
            return Err(Error::dims("decode latent", self.latent, format!("{:?}", latent.dim())));
        }
        let s = self.image_scale;
        Ok(Image::from_fn(self.latent.width * s, self.latent.height * s, |x, y| {
            let (lx, ly) = (x / s, y / s);
            let mut rgb = [0.0f32; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let ch = c.min(self.latent.channels - 1);
                *out = ((latent[[ch, ly, lx]] + 1.0) / 2.0).clamp(0.0, 1.0) as f32;
            }
            rgb
        }))
    }

    fn fingerprint(&self) -> String {
        fingerprint_f64([
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
            self.schedule.as_slice(),
        ])
    }
}

fn random_orthogonal(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::from_shape_vec((n, n), normal_vec(rng, n * n, 1.0)).expect("sized");
    for i in 0..n {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let prev = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &prev);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

/// Area-average of `depth` over a `width × height` grid.
pub fn pool_depth(depth: &DepthImage, width: usize, height: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((height, width));
    let mut counts = Array2::<f64>::zeros((height, width));
    for y in 0..depth.height() {
        let gy = (y * height / depth.height()).min(height - 1);
        for x in 0..depth.width() {
            let gx = (x * width / depth.width()).min(width - 1);
            sums[[gy, gx]] += depth.get(x, y) as f64;
            counts[[gy, gx]] += 1.0;
        }
    }
    sums / counts.mapv(|c: f64| c.max(1.0))
}

/// Depth branch: shifts every prompt row by a projection of the pooled depth map.
#[derive(Debug, Clone)]
pub struct ToyDepthController {
    denoiser: Arc<ToyDenoiser>,
    projection: Array2<f64>,
}

impl ToyDepthController {
    pub fn new(denoiser: Arc<ToyDenoiser>, text_dim: usize, seed: u64) -> Self {
        let shape = denoiser.latent_shape();
        let cells = shape.height * shape.width;
        let mut rng = derive_rng(seed, "depth-controller");
        let proj = normal_vec(&mut rng, cells * text_dim, 2.0 / (cells as f64).sqrt());
        Self {
            denoiser,
            projection: Array2::from_shape_vec((cells, text_dim), proj).expect("sized"),
        }
    }

    pub fn depth_embedding(&self, depth: &DepthImage) -> Array1<f64> {
        let shape = self.denoiser.latent_shape();
        let pooled = pool_depth(depth, shape.width, shape.height);
        let flat = pooled.iter().copied().collect::<Array1<f64>>();
        flat.dot(&self.projection)
    }
}

impl DepthController for ToyDepthController {
    fn predict_noise_controlled(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, depth: &DepthImage) -> Result<Latent> {
        if cond.ncols() != self.projection.ncols() {
            return Err(Error::dims("control conditioning", self.projection.ncols(), cond.ncols()));
        }
        let shift = self.depth_embedding(depth);
        let shifted = cond + &shift;
        self.denoiser.predict_noise(noisy, t, &shifted)
    }
}

/// Pooled color layout and color statistics under a fixed random projection.
#[derive(Debug, Clone)]
pub struct ToyImageFeatures {
    seed: u64,
    projection: Array2<f64>,
}

const FEATURE_GRID: usize = 4;
const RAW_IMAGE_FEATURES: usize = FEATURE_GRID * FEATURE_GRID * 3 + 6;

impl ToyImageFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = derive_rng(seed, "image-features");
        let proj = normal_vec(
            &mut rng,
            RAW_IMAGE_FEATURES * TOY_FEATURE_DIM,
            1.0 / (RAW_IMAGE_FEATURES as f64).sqrt(),
        );
        Self {
            seed,
            projection: Array2::from_shape_vec((RAW_IMAGE_FEATURES, TOY_FEATURE_DIM), proj).expect("sized"),
        }
    }
}

impl ImageFeatures for ToyImageFeatures {
    fn feature_dim(&self) -> usize {
        TOY_FEATURE_DIM
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::invalid("image", "empty image"));
        }
        let mut raw = Vec::with_capacity(RAW_IMAGE_FEATURES);
        let mut sums = [[0.0f64; 3]; FEATURE_GRID * FEATURE_GRID];
        let mut counts = [0.0f64; FEATURE_GRID * FEATURE_GRID];
        let mut mean = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for y in 0..image.height() {
            let gy = y * FEATURE_GRID / image.height();
            for x in 0..image.width() {
                let gx = x * FEATURE_GRID / image.width();
                let p = image.get(x, y);
                for c in 0..3 {
                    sums[gy * FEATURE_GRID + gx][c] += p[c] as f64;
                    mean[c] += p[c] as f64;
                    sq[c] += (p[c] as f64).powi(2);
                }
                counts[gy * FEATURE_GRID + gx] += 1.0;
            }
        }
        for (cell, n) in sums.iter().zip(counts) {
            raw.extend(cell.iter().map(|v| 2.0 * v / n.max(1.0) - 1.0));
        }
        let n = (image.width() * image.height()) as f64;
        raw.extend(mean.iter().map(|v| 2.0 * v / n - 1.0));
        for c in 0..3 {
            let m = mean[c] / n;
            raw.push(4.0 * (sq[c] / n - m * m).max(0.0).sqrt());
        }
        Ok(Array1::from(raw).dot(&self.projection).to_vec())
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; TOY_FEATURE_DIM];
        for tok in toy_tokenize(text) {
            let mut rng = derive_rng(self.seed, &format!("feature-token:{tok}"));
            for (a, v) in acc.iter_mut().zip(normal_vec(&mut rng, TOY_FEATURE_DIM, 1.0)) {
                *a += v;
            }
        }
        Ok(acc)
    }

    fn aesthetic_score(&self, _image: &Image) -> Result<f64> {
        Ok(TOY_AESTHETIC_SCORE)
    }
}

/// Foreground wherever some channel reaches `threshold`.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    pub threshold: f64,
}

impl Segmenter for ToySegmenter {
    fn segment(&self, image: &Image) -> Result<SilhouetteMask> {
        let t = self.threshold as f32;
        Ok(SilhouetteMask::from_fn(image.width(), image.height(), |x, y| {
            image.get(x, y).iter().any(|&v| v >= t)
        }))
    }
}

/// Background values stay below this so thresholding at 0.5 recovers the foreground.
pub const TOY_BACKGROUND_MAX: f32 = 0.4;
/// Minimum of the brightest foreground channel.
pub const TOY_FOREGROUND_MIN: f32 = 0.6;

/// Seeded background: a per-image base colour with per-pixel noise, all in `[0, 0.4]`.
pub fn toy_background(width: usize, height: usize, seed: u64, label: &str) -> Image {
    let mut rng = derive_rng(seed, label);
    let base: [f32; 3] = [
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
    ];
    Image::from_fn(width, height, |_, _| {
        let mut px = [0.0f32; 3];
        for c in 0..3 {
            let jitter: f32 = rng.random_range(-0.05..0.05);
            px[c] = (base[c] + jitter).clamp(0.0, TOY_BACKGROUND_MAX);
        }
        px
    })
}

/// Flat foreground colour derived from the prompt text.
pub fn toy_prompt_color(prompt: &str) -> [f32; 3] {
    let mut rng = derive_rng(hash64(prompt.as_bytes()), "prompt-color");
    let mut rgb: [f32; 3] = [
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ];
    let max = rgb.iter().cloned().fold(f32::MIN, f32::max).max(1e-3);
    let target: f32 = rng.random_range(TOY_FOREGROUND_MIN..1.0);
    for v in &mut rgb {
        *v = (*v / max * target).clamp(0.0, 1.0);
    }
    let brightest = rgb.iter().cloned().fold(f32::MIN, f32::max);
    if brightest < TOY_FOREGROUND_MIN {
        rgb[0] = TOY_FOREGROUND_MIN;
    }
    rgb
}

/// Composites the silhouette in a flat prompt colour over a seeded background.
#[derive(Debug, Clone)]
pub struct ToySynthesizer {
    seed: u64,
}

impl ImageSynthesizer for ToySynthesizer {
    fn synthesize(&self, req: &SynthesisRequest<'_>) -> Result<Image> {
        let (w, h) = (req.silhouette.width(), req.silhouette.height());
        if req.depth.width() != w || req.depth.height() != h {
            return Err(Error::dims(
                "synthesis depth",
                format!("{w}x{h}"),
                format!("{}x{}", req.depth.width(), req.depth.height()),
            ));
        }
        let mut img = toy_background(w, h, self.seed ^ req.seed, "synth-background");
        let color = toy_prompt_color(req.prompt);
        for y in 0..h {
            for x in 0..w {
                if req.silhouette.get(x, y) {
                    img.set(x, y, color);
                }
            }
        }
        Ok(img)
    }
}

/// Blends a fresh seeded background into every pixel outside the kept mask.
#[derive(Debug, Clone)]
pub struct ToyInpainter {
    seed: u64,
}

impl Inpainter for ToyInpainter {
    fn inpaint(&self, image: &Image, keep: &SilhouetteMask, _prompt: &str, strength: f64, seed: u64) -> Result<Image> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::invalid("inpaint_strength", format!("{strength} outside [0, 1]")));
        }
        if keep.width() != image.width() || keep.height() != image.height() {
            return Err(Error::dims(
                "inpaint mask",
                format!("{}x{}", image.width(), image.height()),
                format!("{}x{}", keep.width(), keep.height()),
            ));
        }
        if strength == 0.0 {
            return Ok(image.clone());
        }
        let fresh = toy_background(image.width(), image.height(), self.seed ^ seed, "inpaint-background");
        let s = strength as f32;
        let mut out = image.clone();
        for y in 0..image.height() {
            for x in 0..image.width() {
                if !keep.get(x, y) {
                    let (a, b) = (image.get(x, y), fresh.get(x, y));
                    out.set(x, y, [0, 1, 2].map(|c| (1.0 - s) * a[c] + s * b[c]));
                }
            }
        }
        Ok(out)
    }
}

pub fn load_toy_suite(config: &BackendConfig) -> Result<BackendSuite> {
    let denoiser = Arc::new(ToyDenoiser::new(config)?);
    let control = Arc::new(ToyDepthController::new(denoiser.clone(), config.text_dim, config.seed));
    Ok(BackendSuite {
        kind: BackendKind::Toy,
        config: config.clone(),
        text: Arc::new(ToyTextEncoder::new(config.text_dim, config.seed)),
        shape: Arc::new(ToyShapeEncoder::new(config.shape_dim, config.seed)),
        denoiser,
        control,
        features: Arc::new(ToyImageFeatures::new(config.seed)),
        segmenter: Arc::new(ToySegmenter {
            threshold: config.segmenter_threshold,
        }),
        synthesizer: Arc::new(ToySynthesizer { seed: config.seed }),
        inpainter: Arc::new(ToyInpainter { seed: config.seed }),
    })
}
