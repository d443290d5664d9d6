use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use shapewords::config::ConfigFile;
use shapewords::dataset::{build_dataset, discover_shapes, DatasetConfig};
use shapewords::evaluation::{assemble_report, evaluate_manifest, format_table, write_report, EvaluationConfig};
use shapewords::generation::{
    generate_plain, generate_with_handoff, sweep_lambda, HandoffMode, HandoffSpec, SamplerConfig, SamplerKind,
};
use shapewords::geometry::{normalize_cloud, ViewSpec};
use shapewords::prompts::{build_prompt_bank, load_word_list, PromptBank, DEFAULT_BANK_PATTERN};
use shapewords::service::{RunStore, ServiceState, ShapeRegistry};
use shapewords::shape2clip::{init_params, load_params, save_params, ModelDims, DEFAULT_BLOCKS};
use shapewords::training::{load_triplets, smoothed_loss, train, TrainConfig};
use shapewords::{
    load_backend_suite, BackendConfig, BackendSuite, Error, GuidanceSpec, PointCloud, Shape2ClipParams, TokenStrategy,
};

use crate::server::{self, AppState, PoolConfig};

#[derive(Debug, Parser)]
#[command(name = "shapewords", version, about = "Shape-guided text-to-image generation")]
pub struct Cli {
    /// `key = value` config file shared by every subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the residual module on a dataset manifest.
    Train(TrainArgs),
    /// Generate one image for a shape and prompt template.
    Generate(GenerateArgs),
    /// Generate one image per guidance strength.
    Sweep(SweepArgs),
    /// Score a manifest and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Render shapes and synthesize a training manifest.
    BuildDataset(BuildDatasetArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Print the shape-encoder tokens of a point cloud as JSON.
    EncodeShape(EncodeShapeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the trained parameters are written.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these parameters instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Per-step JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct PromptArgs {
    /// Prompt template containing `[SHAPE-ID]`.
    #[arg(long)]
    pub prompt: String,
    /// Word substituted for `[SHAPE-ID]`.
    #[arg(long, default_value = "object")]
    pub category: String,
    #[arg(long, default_value = "object_and_eos")]
    pub strategy: TokenStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = shapewords::generation::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value = "deterministic")]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 1.0)]
    pub guidance_scale: f64,
    #[arg(long)]
    pub params: Option<PathBuf>,
}

impl PromptArgs {
    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            kind: self.sampler,
            seed: self.seed,
            guidance_scale: self.guidance_scale,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Point cloud (`.xyz` or `.ply`).
    #[arg(long, required_unless_present = "plain")]
    pub shape: Option<PathBuf>,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Ignore the shape and sample from the unmodified prompt.
    #[arg(long)]
    pub plain: bool,
    /// Percentage of steps run under depth control.
    #[arg(long, default_value_t = 0.0)]
    pub handoff_k: f64,
    /// Azimuth in degrees of the depth view used for control.
    #[arg(long, default_value_t = 0.0)]
    pub depth_azimuth: f64,
    #[arg(long, default_value = "shapewords")]
    pub mode: HandoffMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub shape: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Comma-separated guidance strengths.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Composite silhouettes instead of generating, so adherence is exact.
    #[arg(long)]
    pub closed_loop: bool,
    #[arg(long, default_value = "run")]
    pub run_id: String,
    #[arg(long, default_value_t = shapewords::evaluation::DEFAULT_VIEWS)]
    pub views: usize,
    #[arg(long, default_value_t = 0.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value = "object_and_eos")]
    pub strategy: TokenStrategy,
    #[arg(long, default_value_t = 40.0)]
    pub handoff_k: f64,
    #[arg(long, default_value = "shapewords")]
    pub mode: HandoffMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = shapewords::generation::DEFAULT_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory of point clouds; subdirectory names become categories.
    #[arg(long, alias = "shapes-dir")]
    pub shapes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// A prompt bank exported as JSON lines; replaces the word lists.
    #[arg(long, conflicts_with_all = ["mediums", "adjectives"])]
    pub bank: Option<PathBuf>,
    /// One medium per line.
    #[arg(long)]
    pub mediums: Option<PathBuf>,
    /// One adjective per line.
    #[arg(long)]
    pub adjectives: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_BANK_PATTERN)]
    pub pattern: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub shapes: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Concurrent generation jobs.
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Jobs allowed to wait for a worker before requests get 429.
    #[arg(long, default_value_t = 8)]
    pub queue: usize,
}

#[derive(Debug, Args)]
pub struct EncodeShapeArgs {
    #[arg(long)]
    pub shape: PathBuf,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const DEFAULT_MEDIUMS: [&str; 3] = ["painting", "watercolor", "sketch"];
const DEFAULT_ADJECTIVES: [&str; 3] = ["colorful", "pixelated", "fantasy"];

/// Parsed `--config` plus the backends it names.
struct Context {
    file: ConfigFile,
}

impl Context {
    fn load(path: Option<&Path>) -> shapewords::Result<Self> {
        let file = match path {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self { file })
    }

    fn backend(&self) -> shapewords::Result<BackendConfig> {
        BackendConfig::from_config(&self.file)
    }

    fn suite(&self) -> shapewords::Result<BackendSuite> {
        load_backend_suite(&self.backend()?)
    }

    fn model_dims(&self, suite: &BackendSuite) -> shapewords::Result<ModelDims> {
        let dims = ModelDims::new(
            suite.text_dim(),
            suite.shape_dim(),
            self.file.get_or("model.attn_dim", suite.text_dim())?,
            self.file.get_or("model.hidden_dim", 2 * suite.text_dim())?,
        )
        .with_heads(self.file.get_or("model.heads", 1)?)
        .with_blocks(self.file.get_or("model.blocks", DEFAULT_BLOCKS)?);
        dims.validate()?;
        Ok(dims)
    }

    fn params_path(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.file.get("params.path").map(PathBuf::from))
    }

    fn params(&self, flag: Option<&Path>, suite: &BackendSuite) -> shapewords::Result<Option<Shape2ClipParams>> {
        let Some(path) = self.params_path(flag) else {
            return Ok(None);
        };
        let params = load_params(&path, None)?;
        if params.dims.text_dim != suite.text_dim() || params.dims.shape_dim != suite.shape_dim() {
            return Err(Error::dims(
                format!("parameter file {}", path.display()),
                format!("text_dim {} shape_dim {}", suite.text_dim(), suite.shape_dim()),
                format!("text_dim {} shape_dim {}", params.dims.text_dim, params.dims.shape_dim),
            ));
        }
        Ok(Some(params))
    }
}

/// Parses `args` and runs the subcommand. Returns 0 on success, 1 on a
/// validation error (including bad usage) and 2 on a runtime failure.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let validation = e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .is_some_and(Error::is_validation);
    if validation {
        1
    } else {
        2
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let ctx = Context::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::BuildDataset(a) => cmd_build_dataset(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::EncodeShape(a) => cmd_encode_shape(&ctx, a),
    }
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::from_config(&ctx.file)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    cfg.checkpoint_dir = a.checkpoint_dir;
    cfg.validate()?;
    let suite = ctx.suite()?;
    let dims = ctx.model_dims(&suite)?;
    let init = match &a.init {
        Some(p) => load_params(p, Some(&dims))?,
        None => init_params(dims, cfg.seed)?,
    };
    let triplets = load_triplets(&a.manifest, &suite)?;
    log::info!("training on {} triplets", triplets.len());
    let outcome = match &a.log {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            train(&suite, &triplets, init, &cfg, Some(&mut w))?
        }
        None => train(&suite, &triplets, init, &cfg, None)?,
    };
    save_params(&outcome.params, &a.out)?;
    let (first, last) = smoothed_loss(&outcome.log, 50).unwrap_or((f64::NAN, f64::NAN));
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.log.len(),
            "first_loss": first,
            "last_loss": last,
            "params": a.out.display().to_string(),
        })
    );
    Ok(())
}

fn depth_for(suite: &BackendSuite, cloud: &PointCloud, azimuth: f64) -> shapewords::Result<shapewords::DepthImage> {
    let (w, h) = suite.config.image_size();
    shapewords::dataset::render_depth(&normalize_cloud(cloud)?, &ViewSpec::new(azimuth, w, h))
}

fn cmd_generate(ctx: &Context, a: GenerateArgs) -> anyhow::Result<()> {
    let guidance = GuidanceSpec::new(a.lambda, a.prompt.strategy)?;
    let sampler = a.prompt.sampler();
    let suite = ctx.suite()?;
    sampler.validate(suite.denoiser.schedule())?;
    let image = if a.plain {
        generate_plain(&suite, &a.prompt.prompt, &a.prompt.category, &sampler)?
    } else {
        let cloud = PointCloud::load(a.shape.as_deref().expect("required unless --plain"))?;
        let handoff = if a.handoff_k > 0.0 {
            HandoffSpec::new(a.handoff_k, depth_for(&suite, &cloud, a.depth_azimuth)?, a.mode)
        } else {
            HandoffSpec {
                k_percent: a.handoff_k,
                ..HandoffSpec::disabled()
            }
        };
        handoff.validate()?;
        let params = ctx.params(a.prompt.params.as_deref(), &suite)?;
        let (image, _) = generate_with_handoff(
            &suite,
            params.as_ref(),
            &cloud,
            &a.prompt.prompt,
            &a.prompt.category,
            &guidance,
            &handoff,
            &sampler,
        )?;
        image
    };
    image.save_png(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_sweep(ctx: &Context, a: SweepArgs) -> anyhow::Result<()> {
    for &l in &a.lambdas {
        shapewords::shape2clip::validate_lambda(l)?;
    }
    let suite = ctx.suite()?;
    let sampler = a.prompt.sampler();
    sampler.validate(suite.denoiser.schedule())?;
    let params = ctx.params(a.prompt.params.as_deref(), &suite)?;
    let cloud = PointCloud::load(&a.shape)?;
    let images = sweep_lambda(
        &suite,
        params.as_ref(),
        &cloud,
        &a.prompt.prompt,
        &a.prompt.category,
        a.prompt.strategy,
        &a.lambdas,
        &sampler,
    )?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (i, (image, l)) in images.iter().zip(&a.lambdas).enumerate() {
        let path = a.out_dir.join(format!("{i:02}_lambda_{l}.png"));
        image.save_png(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Context, a: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = EvaluationConfig {
        run_id: a.run_id,
        views: a.views,
        elevation_deg: a.elevation,
        guidance: GuidanceSpec::new(a.lambda, a.strategy)?,
        k_percent: a.handoff_k,
        mode: a.mode,
        sampler: SamplerConfig::default().with_steps(a.steps).with_seed(a.seed),
        closed_loop: a.closed_loop,
    };
    if cfg.views == 0 {
        return Err(Error::invalid("views", "must be positive").into());
    }
    let suite = ctx.suite()?;
    cfg.sampler.validate(suite.denoiser.schedule())?;
    let params = if cfg.closed_loop {
        None
    } else {
        ctx.params(a.params.as_deref(), &suite)?
    };
    let metrics = evaluate_manifest(&suite, params.as_ref(), &a.manifest, &cfg)?;
    let report = assemble_report(vec![metrics])?;
    write_report(&report, &a.out_dir)?;
    print!("{}", format_table(&report));
    Ok(())
}

fn cmd_build_dataset(ctx: &Context, a: BuildDatasetArgs) -> anyhow::Result<()> {
    let words = |path: &Option<PathBuf>, default: &[&str]| -> shapewords::Result<Vec<String>> {
        match path {
            Some(p) => load_word_list(p),
            None => Ok(default.iter().map(|s| s.to_string()).collect()),
        }
    };
    let bank = match &a.bank {
        Some(path) => PromptBank::load_jsonl(path)?,
        None => build_prompt_bank(
            &words(&a.mediums, &DEFAULT_MEDIUMS)?,
            &words(&a.adjectives, &DEFAULT_ADJECTIVES)?,
            &a.pattern,
        )?,
    };
    let shapes = discover_shapes(&a.shapes)?;
    let suite = ctx.suite()?;
    let mut cfg = DatasetConfig::from_config(&suite, &ctx.file, a.seed)?;
    if a.workers > 0 {
        cfg.workers = a.workers;
    }
    let records = build_dataset(&suite, &shapes, &bank, &cfg, &a.out)?;
    bank.export_jsonl(a.out.join("prompts.jsonl"))?;
    println!("{}", a.out.join("manifest.jsonl").display());
    log::info!("{} records", records.len());
    Ok(())
}

fn cmd_serve(ctx: &Context, a: ServeArgs) -> anyhow::Result<()> {
    let pool = PoolConfig {
        workers: a.workers,
        queue: a.queue,
    };
    pool.validate()?;
    let backend = ctx.backend()?;
    let params_path = ctx.params_path(a.params.as_deref());
    let registry = ShapeRegistry::from_dir(&a.shapes)?;
    let runs = RunStore::new(a.runs_dir);
    let state = AppState::loading(pool);
    let loader = state.clone();
    std::thread::spawn(move || {
        let loaded = (|| -> shapewords::Result<ServiceState> {
            let suite = load_backend_suite(&backend)?;
            let params = params_path.map(|p| load_params(p, None)).transpose()?;
            Ok(ServiceState::new(suite, params, registry, Some(runs)))
        })();
        match loaded {
            Ok(service) => {
                log::info!("backends loaded");
                loader.install(service);
            }
            Err(e) => {
                log::error!("loading backends failed: {e}");
                loader.fail(e.to_string());
            }
        }
    });
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on {}", listener.local_addr()?);
        server::serve(listener, state).await.context("server failed")
    })
}

fn cmd_encode_shape(ctx: &Context, a: EncodeShapeArgs) -> anyhow::Result<()> {
    let cloud = PointCloud::load(&a.shape)?;
    let suite = ctx.suite()?;
    let tokens = suite.shape.encode(&cloud)?;
    let rows: Vec<Vec<f64>> = tokens.rows().into_iter().map(|r| r.to_vec()).collect();
    let body = serde_json::json!({ "rows": tokens.nrows(), "cols": tokens.ncols(), "tokens": rows });
    match a.out {
        Some(p) => fs::write(&p, serde_json::to_vec(&body)?).map_err(|e| Error::io(&p, e))?,
        None => println!("{body}"),
    }
    Ok(())
}
