//! Request handling behind the HTTP service: shape registry with a token
//! cache, request validation, generation and the on-disk run store.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{BackendSuite, ShapeTokens, SHAPE_TOKEN_COUNT};
use crate::dataset::{discover_shapes, render_depth, ShapeSource};
use crate::error::{Error, Result};
use crate::generation::{
    encode_template, generate_with_handoff, sweep_lambda, GenerationTrace, HandoffMode, HandoffSpec, SamplerConfig, DEFAULT_STEPS,
};
use crate::geometry::{normalize_cloud, PointCloud, ViewSpec};
use crate::imaging::Image;
use crate::prompts::{expand_template, TokenLayout};
use crate::seeding::hash64;
use crate::shape2clip::{validate_lambda, GuidanceSpec, Shape2ClipParams, TokenStrategy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeInfo {
    pub id: String,
    pub category: String,
    pub cached: bool,
}

/// Registered shapes plus a read-mostly cache of their encoder tokens.
#[derive(Debug, Default)]
pub struct ShapeRegistry {
    entries: BTreeMap<String, ShapeSource>,
    cache: RwLock<HashMap<String, Arc<ShapeTokens>>>,
}

impl ShapeRegistry {
    pub fn new(sources: Vec<ShapeSource>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for s in sources {
            if entries.contains_key(&s.id) {
                return Err(Error::invalid("shapes", format!("duplicate shape id `{}`", s.id)));
            }
            entries.insert(s.id.clone(), s);
        }
        Ok(Self {
            entries,
            cache: RwLock::default(),
        })
    }

    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        Self::new(discover_shapes(dir)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<&ShapeSource> {
        self.entries.get(id).ok_or_else(|| Error::NotFound(format!("shape `{id}`")))
    }

    pub fn list(&self) -> Vec<ShapeInfo> {
        let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
        self.entries
            .values()
            .map(|s| ShapeInfo {
                id: s.id.clone(),
                category: s.category.clone(),
                cached: cache.contains_key(&s.id),
            })
            .collect()
    }

    pub fn load_cloud(&self, id: &str) -> Result<PointCloud> {
        Ok(PointCloud::load(&self.get(id)?.path)?.with_id(id))
    }

    /// Cached tokens for `id`, encoding on a miss. Entries whose shape no
    /// longer matches the encoder are re-encoded. The flag reports a hit.
    pub fn tokens(&self, id: &str, suite: &BackendSuite) -> Result<(Arc<ShapeTokens>, bool)> {
        let want = (SHAPE_TOKEN_COUNT, suite.shape_dim());
        if let Some(t) = self.cache.read().unwrap_or_else(|p| p.into_inner()).get(id) {
            if t.dim() == want {
                return Ok((t.clone(), true));
            }
        }
        let tokens = Arc::new(suite.shape.encode(&self.load_cloud(id)?)?);
        if tokens.dim() != want {
            return Err(Error::dims(
                "shape tokens",
                format!("{}x{}", want.0, want.1),
                format!("{:?}", tokens.dim()),
            ));
        }
        self.cache
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(id.to_string(), tokens.clone());
        Ok((tokens, false))
    }

    pub fn clear_cache(&self) {
        self.cache.write().unwrap_or_else(|p| p.into_inner()).clear();
    }
}

/// A single out-of-contract request field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid request: {}", format_fields(.0))]
    Validation(Vec<FieldError>),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Internal(Error),
}

fn format_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument { field, message } => ServiceError::Validation(vec![FieldError { field, message }]),
            Error::NotFound(what) => ServiceError::NotFound(what),
            other => ServiceError::Internal(other),
        }
    }
}

type ServiceResult<T> = std::result::Result<T, ServiceError>;

fn default_lambda() -> f64 {
    1.0
}

fn default_strategy() -> String {
    TokenStrategy::ObjectAndEos.as_str().to_string()
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub shape_id: String,
    pub prompt_template: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Percentage of steps run under depth control.
    #[serde(default)]
    pub handoff_k: Option<f64>,
    /// Azimuth in degrees of the depth view rendered from the shape.
    #[serde(default)]
    pub depth_ref: Option<f64>,
    #[serde(default)]
    pub mode: Option<String>,
    /// Overrides the registered category as the shape word.
    #[serde(default)]
    pub category: Option<String>,
}

impl GenerateRequest {
    pub fn new(shape_id: impl Into<String>, prompt_template: impl Into<String>) -> Self {
        Self {
            shape_id: shape_id.into(),
            prompt_template: prompt_template.into(),
            lambda: default_lambda(),
            strategy: default_strategy(),
            seed: 0,
            steps: DEFAULT_STEPS,
            handoff_k: None,
            depth_ref: None,
            mode: None,
            category: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub shape_id: String,
    pub prompt_template: String,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeShapeRequest {
    pub shape_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutInfo {
    pub shape_span: [usize; 2],
    pub eos_index: usize,
}

impl From<TokenLayout> for LayoutInfo {
    fn from(l: TokenLayout) -> Self {
        Self {
            shape_span: [l.shape_start, l.shape_end],
            eos_index: l.eos_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub run_id: String,
    /// Base64 PNG.
    pub image: String,
    pub timing_ms: u64,
    pub layout: LayoutInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepImage {
    pub lambda: f64,
    pub run_id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub images: Vec<SweepImage>,
    pub timing_ms: u64,
    pub layout: LayoutInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeShapeResponse {
    pub shape_id: String,
    pub cached: bool,
    pub tokens: Vec<Vec<f64>>,
}

/// A generate request after validation, in canonical form.
#[derive(Debug, Clone)]
struct Plan {
    shape_id: String,
    template: String,
    category: String,
    guidance: GuidanceSpec,
    sampler: SamplerConfig,
    k_percent: f64,
    depth_azimuth: f64,
    mode: HandoffMode,
}

impl Plan {
    fn canonical(&self) -> Value {
        json!({
            "shape_id": self.shape_id,
            "prompt_template": self.template,
            "category": self.category,
            "lambda": self.guidance.lambda,
            "strategy": self.guidance.strategy.as_str(),
            "seed": self.sampler.seed,
            "steps": self.sampler.steps,
            "handoff_k": self.k_percent,
            "depth_ref": self.depth_azimuth,
            "mode": match self.mode { HandoffMode::ShapeWords => "shapewords", HandoffMode::CNetStop => "cnet-stop" },
        })
    }
}

#[derive(Default)]
struct Checker(Vec<FieldError>);

impl Checker {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn check<T>(&mut self, field: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(Error::InvalidArgument { message, .. }) => {
                self.fail(field, message);
                None
            }
            Err(e) => {
                self.fail(field, e.to_string());
                None
            }
        }
    }

    fn finish(self) -> ServiceResult<()> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(ServiceError::Validation(self.0))
        }
    }
}

/// Shared state behind every request handler.
pub struct ServiceState {
    pub suite: BackendSuite,
    pub params: Option<Arc<Shape2ClipParams>>,
    pub registry: ShapeRegistry,
    pub runs: Option<RunStore>,
    fingerprint: String,
}

impl ServiceState {
    pub fn new(suite: BackendSuite, params: Option<Shape2ClipParams>, registry: ShapeRegistry, runs: Option<RunStore>) -> Self {
        let params_hash = params.as_ref().map_or(0, |p| hash64(&p.to_bytes()));
        let fingerprint = format!("{}|{}|{params_hash:016x}", suite.kind, suite.denoiser.fingerprint());
        Self {
            suite,
            params: params.map(Arc::new),
            registry,
            runs,
            fingerprint,
        }
    }

    pub fn health(&self) -> Value {
        json!({ "status": "ok", "backend": self.suite.kind.to_string() })
    }

    fn check_common(
        &self,
        c: &mut Checker,
        shape_id: &str,
        template: &str,
        category: Option<&str>,
        strategy: &str,
        steps: usize,
    ) -> (Option<String>, Option<TokenStrategy>, Option<SamplerConfig>) {
        let category = if shape_id.trim().is_empty() {
            c.fail("shape_id", "must not be empty");
            None
        } else {
            match (category, self.registry.get(shape_id)) {
                (Some(cat), _) => Some(cat.to_string()),
                (None, Ok(s)) => Some(s.category.clone()),
                (None, Err(_)) => None,
            }
        };
        if let Some(cat) = &category {
            if let Err(e) = expand_template(template, cat) {
                let field = match &e {
                    Error::InvalidArgument { field, .. } if field == "category" => "category",
                    _ => "prompt_template",
                };
                c.check::<()>(field, Err(e));
            }
        }
        let strategy = c.check("strategy", strategy.parse::<TokenStrategy>());
        let sampler = SamplerConfig::default().with_steps(steps);
        let sampler = c.check("steps", sampler.validate(self.suite.denoiser.schedule()).map(|_| sampler));
        (category, strategy, sampler)
    }

    fn require_shape(&self, shape_id: &str) -> ServiceResult<()> {
        if self.registry.contains(shape_id) {
            Ok(())
        } else {
            Err(ServiceError::NotFound(format!("shape `{shape_id}`")))
        }
    }

    fn plan(&self, req: &GenerateRequest) -> ServiceResult<Plan> {
        let mut c = Checker::default();
        let (category, strategy, sampler) = self.check_common(
            &mut c,
            &req.shape_id,
            &req.prompt_template,
            req.category.as_deref(),
            &req.strategy,
            req.steps,
        );
        let lambda = c.check("lambda", validate_lambda(req.lambda).map(|_| req.lambda));
        let k_percent = req.handoff_k.unwrap_or(0.0);
        if !(0.0..=100.0).contains(&k_percent) {
            c.fail("handoff_k", format!("{k_percent} outside [0, 100]"));
        }
        let depth_azimuth = req.depth_ref.unwrap_or(0.0);
        if !depth_azimuth.is_finite() {
            c.fail("depth_ref", "must be a finite azimuth in degrees");
        }
        let mode = match &req.mode {
            None => Some(HandoffMode::ShapeWords),
            Some(m) => c.check("mode", m.parse::<HandoffMode>()),
        };
        c.finish()?;
        self.require_shape(&req.shape_id)?;
        Ok(Plan {
            shape_id: req.shape_id.clone(),
            template: req.prompt_template.clone(),
            category: category.expect("validated"),
            guidance: GuidanceSpec {
                lambda: lambda.expect("validated"),
                strategy: strategy.expect("validated"),
            },
            sampler: sampler.expect("validated").with_seed(req.seed),
            k_percent,
            depth_azimuth,
            mode: mode.expect("validated"),
        })
    }

    fn run_id(&self, plan: &Plan) -> String {
        let key = format!("{}|{}", plan.canonical(), self.fingerprint);
        format!("{:016x}", hash64(key.as_bytes()))
    }

    /// Checks every field of `req` without touching any backend.
    pub fn validate_generate(&self, req: &GenerateRequest) -> ServiceResult<()> {
        self.plan(req).map(|_| ())
    }

    pub fn validate_sweep(&self, req: &SweepRequest) -> ServiceResult<()> {
        self.sweep_plans(req).map(|_| ())
    }

    fn sweep_plans(&self, req: &SweepRequest) -> ServiceResult<Vec<Plan>> {
        let mut c = Checker::default();
        let (category, strategy, sampler) = self.check_common(
            &mut c,
            &req.shape_id,
            &req.prompt_template,
            req.category.as_deref(),
            &req.strategy,
            req.steps,
        );
        if req.lambdas.is_empty() {
            c.fail("lambdas", "sweep needs at least one value");
        }
        for (i, &l) in req.lambdas.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                c.fail(&format!("lambdas[{i}]"), format!("{l} outside [0, 1]"));
            }
        }
        c.finish()?;
        self.require_shape(&req.shape_id)?;
        let (category, strategy, sampler) = (
            category.expect("validated"),
            strategy.expect("validated"),
            sampler.expect("validated"),
        );
        Ok(req
            .lambdas
            .iter()
            .map(|&lambda| Plan {
                shape_id: req.shape_id.clone(),
                template: req.prompt_template.clone(),
                category: category.clone(),
                guidance: GuidanceSpec { lambda, strategy },
                sampler: sampler.with_seed(req.seed),
                k_percent: 0.0,
                depth_azimuth: 0.0,
                mode: HandoffMode::ShapeWords,
            })
            .collect())
    }

    pub fn generate(&self, req: &GenerateRequest) -> ServiceResult<GenerateResponse> {
        let plan = self.plan(req)?;
        let started = Instant::now();
        let (_, layout) = encode_template(&self.suite, &plan.template, &plan.category)?;
        let (tokens, _) = self.registry.tokens(&plan.shape_id, &self.suite)?;
        let handoff = if plan.k_percent > 0.0 {
            let cloud = normalize_cloud(&self.registry.load_cloud(&plan.shape_id)?)?;
            let (w, h) = self.suite.config.image_size();
            let depth = render_depth(&cloud, &ViewSpec::new(plan.depth_azimuth, w, h))?;
            HandoffSpec::new(plan.k_percent, depth, plan.mode)
        } else {
            HandoffSpec {
                mode: plan.mode,
                ..HandoffSpec::disabled()
            }
        };
        let (image, trace) = generate_with_handoff(
            &self.suite,
            self.params.as_deref(),
            tokens.as_ref(),
            &plan.template,
            &plan.category,
            &plan.guidance,
            &handoff,
            &plan.sampler,
        )
        .map_err(|e| match e {
            Error::NotFound(what) => ServiceError::Unavailable(what),
            other => other.into(),
        })?;
        let timing_ms = started.elapsed().as_millis() as u64;
        let run_id = self.run_id(&plan);
        let png = image.to_png_bytes();
        self.record(&run_id, &plan, &png, timing_ms, layout, Some(trace))?;
        Ok(GenerateResponse {
            run_id,
            image: BASE64.encode(&png),
            timing_ms,
            layout: layout.into(),
        })
    }

    pub fn sweep(&self, req: &SweepRequest) -> ServiceResult<SweepResponse> {
        let plans = self.sweep_plans(req)?;
        let first = &plans[0];
        let started = Instant::now();
        let (_, layout) = encode_template(&self.suite, &first.template, &first.category)?;
        let (tokens, _) = self.registry.tokens(&first.shape_id, &self.suite)?;
        let images = sweep_lambda(
            &self.suite,
            self.params.as_deref(),
            tokens.as_ref(),
            &first.template,
            &first.category,
            first.guidance.strategy,
            &req.lambdas,
            &first.sampler,
        )
        .map_err(|e| match e {
            Error::NotFound(what) => ServiceError::Unavailable(what),
            other => other.into(),
        })?;
        let timing_ms = started.elapsed().as_millis() as u64;
        let mut out = Vec::with_capacity(images.len());
        for (plan, image) in plans.iter().zip(&images) {
            let run_id = self.run_id(plan);
            let png = image.to_png_bytes();
            self.record(&run_id, plan, &png, timing_ms, layout, None)?;
            out.push(SweepImage {
                lambda: plan.guidance.lambda,
                run_id,
                image: BASE64.encode(&png),
            });
        }
        Ok(SweepResponse {
            images: out,
            timing_ms,
            layout: layout.into(),
        })
    }

    pub fn encode_shape(&self, req: &EncodeShapeRequest) -> ServiceResult<EncodeShapeResponse> {
        if req.shape_id.trim().is_empty() {
            return Err(ServiceError::Validation(vec![FieldError {
                field: "shape_id".into(),
                message: "must not be empty".into(),
            }]));
        }
        self.require_shape(&req.shape_id)?;
        let (tokens, cached) = self.registry.tokens(&req.shape_id, &self.suite)?;
        Ok(EncodeShapeResponse {
            shape_id: req.shape_id.clone(),
            cached,
            tokens: tokens.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    pub fn fetch_run(&self, id: &str) -> ServiceResult<StoredRun> {
        let store = self
            .runs
            .as_ref()
            .ok_or_else(|| ServiceError::NotFound("run storage is disabled".into()))?;
        Ok(store.load(id)?)
    }

    fn record(
        &self,
        run_id: &str,
        plan: &Plan,
        png: &[u8],
        timing_ms: u64,
        layout: TokenLayout,
        trace: Option<GenerationTrace>,
    ) -> ServiceResult<()> {
        if let Some(store) = &self.runs {
            let metrics = json!({
                "timing_ms": timing_ms,
                "backend": self.suite.kind.to_string(),
                "layout": LayoutInfo::from(layout),
                "trace": trace,
            });
            store.save(run_id, &plan.canonical(), png, &metrics)?;
        }
        Ok(())
    }
}

/// A run read back from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRun {
    pub run_id: String,
    pub request: Value,
    pub metrics: Value,
    pub image: String,
}

/// `root/{id}/{request.json, image.png, metrics.json}`.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::invalid("run id", format!("`{id}` is not a valid run id")));
        }
        Ok(self.root.join(id))
    }

    pub fn save(&self, id: &str, request: &Value, png: &[u8], metrics: &Value) -> Result<()> {
        let dir = self.dir(id)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("request.json", serde_json::to_string_pretty(request)?.as_bytes())?;
        write("image.png", png)?;
        write("metrics.json", serde_json::to_string_pretty(metrics)?.as_bytes())
    }

    pub fn load(&self, id: &str) -> Result<StoredRun> {
        let dir = self.dir(id).map_err(|_| Error::NotFound(format!("run `{id}`")))?;
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("run `{id}`")));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(StoredRun {
            run_id: id.to_string(),
            request: serde_json::from_slice(&read("request.json")?)?,
            metrics: serde_json::from_slice(&read("metrics.json")?)?,
            image: BASE64.encode(read("image.png")?),
        })
    }
}

/// Decodes a base64 PNG from a response.
pub fn decode_image(b64: &str) -> Result<Image> {
    let bytes = BASE64
        .decode(b64)
        .map_err(|e| Error::invalid("image", format!("bad base64: {e}")))?;
    Image::from_png_bytes(&bytes)
}
