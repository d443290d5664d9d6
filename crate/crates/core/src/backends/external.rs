//! JSON-over-HTTP adapters for externally hosted models.
//!
//! Each role is configured with `backend.model_path.<role> = http://host:port`.
//! Requests are `POST <base>/<method>` with a JSON body; responses are JSON.
//!
//! | role         | method                     | request                                   | response                              |
//! |--------------|----------------------------|-------------------------------------------|---------------------------------------|
//! | `text`       | `encode`                   | `{text}`                                  | `{embedding, tokens, eos_index}`      |
//! | `text`       | `tokenize`                 | `{text}`                                  | `{tokens}`                            |
//! | `shape`      | `encode`                   | `{points}`                                | `{tokens}`                            |
//! | `denoiser`   | `info`                     | `{}`                                      | `{latent_shape, alphas_cumprod}`      |
//! | `denoiser`   | `predict_noise`            | `{latent, shape, timestep, embedding}`    | `{noise}`                             |
//! | `denoiser`   | `encode_image`             | `{width, height, pixels}`                 | `{latent}`                            |
//! | `denoiser`   | `decode_latent`            | `{latent, shape}`                         | `{width, height, pixels}`             |
//! | `control`    | `predict_noise_controlled` | predict_noise body + `{depth}`            | `{noise}`                             |
//! | `features`   | `embed_image`/`embed_text`/`aesthetic` | image or `{text}`             | `{features}` / `{score}`              |
//! | `segmenter`  | `segment`                  | image + `{threshold}`                     | `{width, height, mask}`               |
//! | `synthesizer`| `synthesize`               | `{depth, mask, prompt, control_strength, steps, seed}` | image                    |
//! | `inpainter`  | `inpaint`                  | image + `{mask, prompt, strength, seed}`  | image                                 |
//!
//! Images travel as `{width, height, pixels}` with interleaved RGB floats in `[0, 1]`.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendConfig, BackendKind, BackendSuite, Denoiser, DepthController, EncodedText, ImageFeatures, ImageSynthesizer, Inpainter,
    Latent, LatentShape, NoiseSchedule, PromptEmbedding, Segmenter, ShapeEncoder, ShapeTokens, SynthesisRequest, TextEncoder,
    MAX_TOKENS, SHAPE_TOKEN_COUNT,
};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SilhouetteMask};
use crate::imaging::{DepthImage, Image};
use crate::seeding::hash64;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

/// Blocking JSON client for one adapter endpoint.
///
/// Calls are serialized through a mutex so a non-reentrant model server only
/// ever sees one request at a time from this process.
#[derive(Debug)]
pub struct AdapterClient {
    role: String,
    base_url: String,
    http: reqwest::blocking::Client,
    gate: Mutex<()>,
}

impl AdapterClient {
    pub fn new(role: impl Into<String>, base_url: impl Into<String>) -> Result<Self> {
        let role = role.into();
        let http = reqwest::blocking::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .map_err(|e| Error::BackendUnreachable {
                name: role.clone(),
                message: e.to_string(),
            })?;
        Ok(Self {
            role,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            http,
            gate: Mutex::new(()),
        })
    }

    pub fn call<T: DeserializeOwned>(&self, method: &str, body: &Value) -> Result<T> {
        let _guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let url = format!("{}/{}", self.base_url, method);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| Error::BackendUnreachable {
                name: self.role.clone(),
                message: format!("{url}: {e}"),
            })?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Error::Backend {
                name: self.role.clone(),
                message: format!("{url} returned {status}: {text}"),
            });
        }
        resp.json::<T>().map_err(|e| Error::Backend {
            name: self.role.clone(),
            message: format!("{url}: malformed response: {e}"),
        })
    }
}

fn rows_to_array(rows: Vec<Vec<f64>>, context: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dims(context, "rectangular matrix", "ragged rows"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
        .map_err(|e| Error::dims(context, format!("{n}x{d}"), e.to_string()))
}

fn array_to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl WireImage {
    fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            pixels: img.data().to_vec(),
        }
    }

    fn into_image(self) -> Result<Image> {
        Image::from_raw(self.width, self.height, self.pixels)
    }
}

fn latent_body(latent: &Latent) -> Value {
    let (c, h, w) = latent.dim();
    json!({ "latent": latent.iter().copied().collect::<Vec<f64>>(), "shape": [c, h, w] })
}

fn latent_from(values: Vec<f64>, shape: LatentShape, context: &str) -> Result<Latent> {
    let n = values.len();
    Array3::from_shape_vec(shape.dim(), values).map_err(|_| Error::dims(context, shape.len(), n))
}

pub struct ExternalTextEncoder {
    client: AdapterClient,
    dim: usize,
}

#[derive(Deserialize)]
struct EncodeTextResponse {
    embedding: Vec<Vec<f64>>,
    tokens: Vec<String>,
    eos_index: usize,
}

#[derive(Deserialize)]
struct TokensResponse {
    tokens: Vec<String>,
}

impl TextEncoder for ExternalTextEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn tokenize(&self, text: &str) -> Result<Vec<String>> {
        Ok(self
            .client
            .call::<TokensResponse>("tokenize", &json!({ "text": text }))?
            .tokens)
    }

    fn encode(&self, text: &str) -> Result<EncodedText> {
        let r: EncodeTextResponse = self.client.call("encode", &json!({ "text": text }))?;
        let embedding = rows_to_array(r.embedding, "text embedding")?;
        if embedding.dim() != (MAX_TOKENS, self.dim) {
            return Err(Error::dims(
                "text encoder output",
                format!("{MAX_TOKENS}x{}", self.dim),
                format!("{}x{}", embedding.nrows(), embedding.ncols()),
            ));
        }
        Ok(EncodedText {
            embedding,
            tokens: r.tokens,
            eos_index: r.eos_index,
        })
    }
}

pub struct ExternalShapeEncoder {
    client: AdapterClient,
    dim: usize,
}

#[derive(Deserialize)]
struct ShapeResponse {
    tokens: Vec<Vec<f64>>,
}

impl ShapeEncoder for ExternalShapeEncoder {
    fn shape_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, cloud: &PointCloud) -> Result<ShapeTokens> {
        let r: ShapeResponse = self.client.call("encode", &json!({ "points": cloud.points() }))?;
        let tokens = rows_to_array(r.tokens, "shape tokens")?;
        if tokens.dim() != (SHAPE_TOKEN_COUNT, self.dim) {
            return Err(Error::dims(
                "shape encoder output",
                format!("{SHAPE_TOKEN_COUNT}x{}", self.dim),
                format!("{}x{}", tokens.nrows(), tokens.ncols()),
            ));
        }
        Ok(tokens)
    }
}

pub struct ExternalDenoiser {
    client: AdapterClient,
    latent: LatentShape,
    schedule: NoiseSchedule,
    fingerprint: String,
}

#[derive(Deserialize)]
struct DenoiserInfo {
    latent_shape: [usize; 3],
    alphas_cumprod: Vec<f64>,
    #[serde(default)]
    fingerprint: Option<String>,
}

#[derive(Deserialize)]
struct NoiseResponse {
    noise: Vec<f64>,
}

#[derive(Deserialize)]
struct LatentResponse {
    latent: Vec<f64>,
}

#[derive(Deserialize)]
struct GradResponse {
    grad: Vec<Vec<f64>>,
}

impl ExternalDenoiser {
    fn connect(client: AdapterClient) -> Result<Self> {
        let info: DenoiserInfo = client.call("info", &json!({}))?;
        let [c, h, w] = info.latent_shape;
        let schedule = NoiseSchedule::from_alphas_cumprod(info.alphas_cumprod)?;
        let fingerprint = info
            .fingerprint
            .unwrap_or_else(|| format!("{}@{:016x}", client.base_url, hash64(client.base_url.as_bytes())));
        Ok(Self {
            client,
            latent: LatentShape::new(c, h, w),
            schedule,
            fingerprint,
        })
    }

    fn noise_body(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> Value {
        let mut body = latent_body(noisy);
        body["timestep"] = json!(t);
        body["embedding"] = json!(array_to_rows(cond));
        body
    }
}

impl Denoiser for ExternalDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.latent
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> Result<Latent> {
        let r: NoiseResponse = self.client.call("predict_noise", &self.noise_body(noisy, t, cond))?;
        latent_from(r.noise, self.latent, "predicted noise")
    }

    fn conditioning_vjp(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, grad_out: &Latent) -> Result<PromptEmbedding> {
        let mut body = self.noise_body(noisy, t, cond);
        body["grad_out"] = json!(grad_out.iter().copied().collect::<Vec<f64>>());
        let r: GradResponse = self.client.call("conditioning_vjp", &body)?;
        rows_to_array(r.grad, "conditioning gradient")
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        let r: LatentResponse = self.client.call("encode_image", &json!(WireImage::from_image(image)))?;
        latent_from(r.latent, self.latent, "encoded latent")
    }

    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        self.client
            .call::<WireImage>("decode_latent", &latent_body(latent))?
            .into_image()
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

pub struct ExternalDepthController {
    client: AdapterClient,
    latent: LatentShape,
}

impl DepthController for ExternalDepthController {
    fn predict_noise_controlled(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, depth: &DepthImage) -> Result<Latent> {
        let mut body = latent_body(noisy);
        body["timestep"] = json!(t);
        body["embedding"] = json!(array_to_rows(cond));
        body["depth"] = json!({ "width": depth.width(), "height": depth.height(), "values": depth.data() });
        let r: NoiseResponse = self.client.call("predict_noise_controlled", &body)?;
        latent_from(r.noise, self.latent, "controlled noise")
    }
}

pub struct ExternalImageFeatures {
    client: AdapterClient,
    dim: usize,
}

#[derive(Deserialize)]
struct FeatureResponse {
    features: Vec<f64>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ExternalImageFeatures {
    fn checked(&self, f: Vec<f64>) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::dims("image features", self.dim, f.len()));
        }
        Ok(f)
    }
}

impl ImageFeatures for ExternalImageFeatures {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        let r: FeatureResponse = self.client.call("embed_image", &json!(WireImage::from_image(image)))?;
        self.checked(r.features)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let r: FeatureResponse = self.client.call("embed_text", &json!({ "text": text }))?;
        self.checked(r.features)
    }

    fn aesthetic_score(&self, image: &Image) -> Result<f64> {
        Ok(self
            .client
            .call::<ScoreResponse>("aesthetic", &json!(WireImage::from_image(image)))?
            .score)
    }
}

pub struct ExternalSegmenter {
    client: AdapterClient,
    threshold: f64,
}

#[derive(Deserialize)]
struct MaskResponse {
    width: usize,
    height: usize,
    mask: Vec<u8>,
}

impl Segmenter for ExternalSegmenter {
    fn segment(&self, image: &Image) -> Result<SilhouetteMask> {
        let mut body = json!(WireImage::from_image(image));
        body["threshold"] = json!(self.threshold);
        let r: MaskResponse = self.client.call("segment", &body)?;
        if r.mask.len() != r.width * r.height {
            return Err(Error::dims("segmenter mask", r.width * r.height, r.mask.len()));
        }
        Ok(SilhouetteMask::from_fn(r.width, r.height, |x, y| {
            r.mask[y * r.width + x] != 0
        }))
    }
}

fn mask_bits(mask: &SilhouetteMask) -> Vec<u8> {
    (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .map(|(x, y)| mask.get(x, y) as u8)
        .collect()
}

pub struct ExternalSynthesizer {
    client: AdapterClient,
}

impl ImageSynthesizer for ExternalSynthesizer {
    fn synthesize(&self, req: &SynthesisRequest<'_>) -> Result<Image> {
        let body = json!({
            "depth": { "width": req.depth.width(), "height": req.depth.height(), "values": req.depth.data() },
            "mask": mask_bits(req.silhouette),
            "prompt": req.prompt,
            "control_strength": req.control_strength,
            "steps": req.steps,
            "seed": req.seed,
        });
        self.client.call::<WireImage>("synthesize", &body)?.into_image()
    }
}

pub struct ExternalInpainter {
    client: AdapterClient,
}

impl Inpainter for ExternalInpainter {
    fn inpaint(&self, image: &Image, keep: &SilhouetteMask, prompt: &str, strength: f64, seed: u64) -> Result<Image> {
        let mut body = json!(WireImage::from_image(image));
        body["mask"] = json!(mask_bits(keep));
        body["prompt"] = json!(prompt);
        body["strength"] = json!(strength);
        body["seed"] = json!(seed);
        self.client.call::<WireImage>("inpaint", &body)?.into_image()
    }
}

/// Placeholder for optional roles the config leaves unset; every call fails.
struct Unconfigured(&'static str);

impl Unconfigured {
    fn err(&self) -> Error {
        Error::Backend {
            name: self.0.into(),
            message: format!("no `backend.model_path.{}` configured", self.0),
        }
    }
}

impl DepthController for Unconfigured {
    fn predict_noise_controlled(&self, _: &Latent, _: usize, _: &PromptEmbedding, _: &DepthImage) -> Result<Latent> {
        Err(self.err())
    }
}

impl ImageSynthesizer for Unconfigured {
    fn synthesize(&self, _: &SynthesisRequest<'_>) -> Result<Image> {
        Err(self.err())
    }
}

impl Inpainter for Unconfigured {
    fn inpaint(&self, _: &Image, _: &SilhouetteMask, _: &str, _: f64, _: u64) -> Result<Image> {
        Err(self.err())
    }
}

/// A fixed 128-point sphere used to probe shape encoders.
fn probe_cloud() -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = 128;
    PointCloud::new(
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                [r * th.cos(), y, r * th.sin()]
            })
            .collect(),
    )
    .expect("probe cloud is valid")
}

/// Connects every configured adapter and checks declared dims against a probe call.
pub fn load_external_suite(config: &BackendConfig) -> Result<BackendSuite> {
    let url = |role: &str| -> Result<String> {
        config
            .model_paths
            .get(role)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("backend.model_path.{role}"), "required for external backends"))
    };
    let client = |role: &'static str| -> Result<AdapterClient> { AdapterClient::new(role, url(role)?) };
    let optional = |role: &'static str| -> Result<Option<AdapterClient>> {
        config
            .model_paths
            .get(role)
            .map(|u| AdapterClient::new(role, u.clone()))
            .transpose()
    };

    let text = ExternalTextEncoder {
        client: client("text")?,
        dim: config.text_dim,
    };
    let probe = text
        .client
        .call::<EncodeTextResponse>("encode", &json!({ "text": "a chair" }))?;
    let got = probe.embedding.first().map_or(0, Vec::len);
    if got != config.text_dim || probe.embedding.len() != MAX_TOKENS {
        return Err(Error::dims(
            "backend.text_dim",
            format!("{MAX_TOKENS}x{}", config.text_dim),
            format!("{}x{got}", probe.embedding.len()),
        ));
    }

    let shape = ExternalShapeEncoder {
        client: client("shape")?,
        dim: config.shape_dim,
    };
    let probe = shape
        .client
        .call::<ShapeResponse>("encode", &json!({ "points": probe_cloud().points() }))?;
    let got = probe.tokens.first().map_or(0, Vec::len);
    if got != config.shape_dim || probe.tokens.len() != SHAPE_TOKEN_COUNT {
        return Err(Error::dims(
            "backend.shape_dim",
            format!("{SHAPE_TOKEN_COUNT}x{}", config.shape_dim),
            format!("{}x{got}", probe.tokens.len()),
        ));
    }

    let denoiser = ExternalDenoiser::connect(client("denoiser")?)?;
    if denoiser.latent != config.latent {
        return Err(Error::dims("backend.latent", config.latent, denoiser.latent));
    }

    let features_client = client("features")?;
    let dim = features_client
        .call::<FeatureResponse>("embed_text", &json!({ "text": "a chair" }))?
        .features
        .len();
    let features = ExternalImageFeatures {
        client: features_client,
        dim,
    };

    let control: Arc<dyn DepthController> = match optional("control")? {
        Some(client) => Arc::new(ExternalDepthController {
            client,
            latent: denoiser.latent,
        }),
        None => Arc::new(Unconfigured("control")),
    };
    let synthesizer: Arc<dyn ImageSynthesizer> = match optional("synthesizer")? {
        Some(client) => Arc::new(ExternalSynthesizer { client }),
        None => Arc::new(Unconfigured("synthesizer")),
    };
    let inpainter: Arc<dyn Inpainter> = match optional("inpainter")? {
        Some(client) => Arc::new(ExternalInpainter { client }),
        None => Arc::new(Unconfigured("inpainter")),
    };

    Ok(BackendSuite {
        kind: BackendKind::External,
        config: config.clone(),
        text: Arc::new(text),
        shape: Arc::new(shape),
        denoiser: Arc::new(denoiser),
        control,
        features: Arc::new(features),
        segmenter: Arc::new(ExternalSegmenter {
            client: client("segmenter")?,
            threshold: config.segmenter_threshold,
        }),
        synthesizer,
        inpainter,
    })
}
