//! Shape/prompt/image triplet construction: multi-view renders, prompt
//! assignment, depth-conditioned synthesis with background inpainting, and
//! the line-delimited manifest that ties the assets together.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSuite, ImageSynthesizer, Inpainter, SynthesisRequest};
use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::geometry::{normalize_cloud, render_silhouette, PointCloud, SilhouetteMask, ViewSpec};
use crate::imaging::{DepthImage, Image};
use crate::prompts::{expand_template, BankPrompt, PromptBank};
use crate::seeding::{derive_rng, hash64};

pub const VIEW_COUNT: usize = 30;
pub const VIEW_STEP_DEG: f64 = 12.0;
pub const DEFAULT_CATEGORY: &str = "object";

/// Smallest foreground depth value, so a far surface never reads as background.
pub const MIN_FOREGROUND_DEPTH: f32 = 1.0 / 65535.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderView {
    pub azimuth_deg: f64,
    pub silhouette: SilhouetteMask,
    pub depth: DepthImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSet {
    pub shape_id: String,
    pub elevation_deg: f64,
    pub views: Vec<RenderView>,
}

/// Azimuths `0, 12, …, 348`.
pub fn view_azimuths() -> Vec<f64> {
    (0..VIEW_COUNT).map(|i| i as f64 * VIEW_STEP_DEG).collect()
}

/// Inverted depth from a z-buffer of point splats: nearer surfaces are brighter,
/// background is exactly 0 and every covered pixel is at least [`MIN_FOREGROUND_DEPTH`].
pub fn render_depth(cloud: &PointCloud, view: &ViewSpec) -> Result<DepthImage> {
    if view.width == 0 || view.height == 0 {
        return Err(Error::invalid("view", "image size must be nonzero"));
    }
    let mut nearest = vec![f64::NEG_INFINITY; view.width * view.height];
    for p in cloud.points() {
        let (px, py, z) = view.project(p);
        for (x, y) in view.splat_pixels(px, py) {
            let slot = &mut nearest[y * view.width + x];
            if z > *slot {
                *slot = z;
            }
        }
    }
    let mut depth = DepthImage::new(view.width, view.height);
    for y in 0..view.height {
        for x in 0..view.width {
            let z = nearest[y * view.width + x];
            if z.is_finite() {
                let v = ((1.0 + z) / 2.0).clamp(0.0, 1.0) as f32;
                depth.set(x, y, v.max(MIN_FOREGROUND_DEPTH));
            }
        }
    }
    Ok(depth)
}

/// Renders silhouette and depth for every one of the 30 turntable views.
pub fn build_render_set(
    shape_id: &str,
    cloud: &PointCloud,
    elevation_deg: f64,
    width: usize,
    height: usize,
) -> Result<RenderSet> {
    let c = cloud.centroid();
    let spread = cloud
        .points()
        .iter()
        .map(|p| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    if !(spread > 1e-24) {
        return Err(Error::invalid("cloud", format!("shape `{shape_id}` is degenerate")));
    }
    let views = view_azimuths()
        .into_iter()
        .map(|az| {
            let view = ViewSpec::new(az, width, height).with_elevation(elevation_deg);
            Ok(RenderView {
                azimuth_deg: az,
                silhouette: render_silhouette(cloud, &view)?,
                depth: render_depth(cloud, &view)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderSet {
        shape_id: shape_id.to_string(),
        elevation_deg,
        views,
    })
}

/// One uniformly drawn bank prompt per view.
pub fn assign_prompts<'a>(views: usize, bank: &'a PromptBank, seed: u64, label: &str) -> Result<Vec<&'a BankPrompt>> {
    if bank.is_empty() {
        return Err(Error::invalid("bank", "prompt bank is empty"));
    }
    let mut rng = derive_rng(seed, &format!("assign-prompts/{label}"));
    Ok((0..views).map(|_| &bank.prompts[rng.random_range(0..bank.len())]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationJob {
    pub job_id: String,
    pub depth: DepthImage,
    pub silhouette: SilhouetteMask,
    /// Prompt with the category already substituted.
    pub prompt: String,
    pub control_strength: f64,
    pub steps: usize,
    pub inpaint_strength: f64,
    /// Pixels the kept foreground is grown by before inpainting.
    pub mask_dilation: usize,
    pub seed: u64,
}

impl GenerationJob {
    pub fn new(job_id: impl Into<String>, depth: DepthImage, silhouette: SilhouetteMask, prompt: impl Into<String>) -> Self {
        Self {
            job_id: job_id.into(),
            depth,
            silhouette,
            prompt: prompt.into(),
            control_strength: 2.0,
            steps: 50,
            inpaint_strength: 0.5,
            mask_dilation: 0,
            seed: 0,
        }
    }
}

/// Square-neighbourhood dilation by `radius` pixels.
pub fn dilate(mask: &SilhouetteMask, radius: usize) -> SilhouetteMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    SilhouetteMask::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.get(xx, yy)))
    })
}

pub fn synthesize_image(job: &GenerationJob, synthesizer: &dyn ImageSynthesizer, inpainter: &dyn Inpainter) -> Result<Image> {
    let tag = |e: Error| Error::Backend {
        name: "synthesis".into(),
        message: format!("job {}: {e}", job.job_id),
    };
    let image = synthesizer
        .synthesize(&SynthesisRequest {
            depth: &job.depth,
            silhouette: &job.silhouette,
            prompt: &job.prompt,
            control_strength: job.control_strength,
            steps: job.steps,
            seed: job.seed,
        })
        .map_err(tag)?;
    let keep = dilate(&job.silhouette, job.mask_dilation);
    inpainter
        .inpaint(&image, &keep, &job.prompt, job.inpaint_strength, job.seed)
        .map_err(tag)
}

fn default_category() -> String {
    DEFAULT_CATEGORY.to_string()
}

/// One training triplet. Paths are absolute or relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub shape_id: String,
    pub cloud_path: String,
    /// Prompt template containing the shape placeholder.
    pub prompt: String,
    pub image_path: String,
    pub view_index: usize,
    #[serde(default = "default_category")]
    pub category: String,
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn parse_record(line: &str, source: &str, lineno: usize) -> Result<ManifestRecord> {
    let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        source_name: source.to_string(),
        line: lineno,
        message: e.to_string(),
    })?;
    for (field, value) in [
        ("shape_id", &rec.shape_id),
        ("cloud_path", &rec.cloud_path),
        ("prompt", &rec.prompt),
        ("image_path", &rec.image_path),
        ("category", &rec.category),
    ] {
        if value.trim().is_empty() {
            return Err(Error::Parse {
                source_name: source.to_string(),
                line: lineno,
                message: format!("field `{field}` is empty"),
            });
        }
    }
    Ok(rec)
}

/// Strict reader: the first malformed line is an error.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, &source, i + 1))
        .collect()
}

pub fn resolve_asset(manifest: &Path, asset: &str) -> PathBuf {
    let p = Path::new(asset);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestIssue {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ManifestIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Every problem found in the manifest; an empty list means it is usable.
pub fn validate_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestIssue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut issues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec = match parse_record(line, &source, lineno) {
            Ok(r) => r,
            Err(e) => {
                issues.push(ManifestIssue {
                    line: lineno,
                    message: e.to_string(),
                });
                continue;
            }
        };
        for asset in [&rec.cloud_path, &rec.image_path] {
            if !resolve_asset(path, asset).is_file() {
                issues.push(ManifestIssue {
                    line: lineno,
                    message: format!("missing asset {asset}"),
                });
            }
        }
    }
    Ok(issues)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub elevation_deg: f64,
    pub control_strength: f64,
    pub steps: usize,
    pub inpaint_strength: f64,
    pub mask_dilation: usize,
    pub seed: u64,
    /// Worker threads for synthesis jobs; 0 uses the global pool.
    pub workers: usize,
}

impl DatasetConfig {
    pub fn for_suite(suite: &BackendSuite, seed: u64) -> Self {
        let (width, height) = suite.config.image_size();
        Self {
            width,
            height,
            elevation_deg: 0.0,
            control_strength: 2.0,
            steps: 50,
            inpaint_strength: 0.5,
            mask_dilation: 0,
            seed,
            workers: 0,
        }
    }

    /// Reads `render.elevation` and `dataset.*` keys over [`DatasetConfig::for_suite`].
    pub fn from_config(suite: &BackendSuite, cfg: &ConfigFile, seed: u64) -> Result<Self> {
        let d = Self::for_suite(suite, seed);
        let out = Self {
            elevation_deg: cfg.get_or("render.elevation", d.elevation_deg)?,
            control_strength: cfg.get_or("dataset.control_strength", d.control_strength)?,
            steps: cfg.get_or("dataset.steps", d.steps)?,
            inpaint_strength: cfg.get_or("dataset.inpaint_strength", d.inpaint_strength)?,
            mask_dilation: cfg.get_or("dataset.mask_dilation", d.mask_dilation)?,
            workers: cfg.get_or("dataset.workers", d.workers)?,
            ..d
        };
        if !(0.0..=1.0).contains(&out.inpaint_strength) {
            return Err(Error::invalid("dataset.inpaint_strength", "must lie in [0, 1]"));
        }
        if out.steps == 0 {
            return Err(Error::invalid("dataset.steps", "must be positive"));
        }
        Ok(out)
    }
}

/// A source shape for dataset construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeSource {
    pub id: String,
    pub path: PathBuf,
    pub category: String,
}

/// Point-cloud files (`.xyz`, `.ply`) in `dir`, sorted by id. A file `a/b.ply`
/// in a subdirectory gets category `a`; top-level files get the default category.
pub fn discover_shapes(dir: impl AsRef<Path>) -> Result<Vec<ShapeSource>> {
    fn is_cloud(p: &Path) -> bool {
        matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "ply"))
    }
    fn entries(dir: &Path) -> Result<Vec<PathBuf>> {
        let mut out: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        out.sort();
        Ok(out)
    }
    let dir = dir.as_ref();
    let mut shapes = Vec::new();
    for entry in entries(dir)? {
        if entry.is_dir() {
            let category = entry
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or(DEFAULT_CATEGORY)
                .to_string();
            for file in entries(&entry)?.into_iter().filter(|p| p.is_file() && is_cloud(p)) {
                shapes.push((file, category.clone()));
            }
        } else if is_cloud(&entry) {
            shapes.push((entry, DEFAULT_CATEGORY.to_string()));
        }
    }
    let mut out: Vec<ShapeSource> = shapes
        .into_iter()
        .map(|(path, category)| ShapeSource {
            id: path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
            path,
            category,
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in out.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::invalid("shapes", format!("duplicate shape id `{}`", pair[0].id)));
        }
    }
    Ok(out)
}

fn write_view_assets(out_dir: &Path, shape_id: &str, index: usize, depth: &DepthImage, image: &Image) -> Result<String> {
    let depth_rel = format!("depth/{shape_id}_{index:02}.png");
    let image_rel = format!("images/{shape_id}_{index:02}.png");
    depth.save_png16(out_dir.join(&depth_rel))?;
    image.save_png(out_dir.join(&image_rel))?;
    Ok(image_rel)
}

/// Renders, synthesizes and writes `out_dir/manifest.jsonl` with 30 records per shape.
pub fn build_dataset(
    suite: &BackendSuite,
    shapes: &[ShapeSource],
    bank: &PromptBank,
    cfg: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestRecord>> {
    let out_dir = out_dir.as_ref();
    if shapes.is_empty() {
        return Err(Error::invalid("shapes", "no shapes to render"));
    }
    for sub in ["depth", "images"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut jobs = Vec::with_capacity(shapes.len() * VIEW_COUNT);
    for shape in shapes {
        let cloud = normalize_cloud(&PointCloud::load(&shape.path)?)?;
        let set = build_render_set(&shape.id, &cloud, cfg.elevation_deg, cfg.width, cfg.height)?;
        let prompts = assign_prompts(set.views.len(), bank, cfg.seed, &shape.id)?;
        for (index, (view, prompt)) in set.views.into_iter().zip(prompts).enumerate() {
            let text = expand_template(&prompt.text, &shape.category)?;
            let job_id = format!("{}/{index:02}", shape.id);
            let mut job = GenerationJob::new(job_id.clone(), view.depth, view.silhouette, text);
            job.control_strength = cfg.control_strength;
            job.steps = cfg.steps;
            job.inpaint_strength = cfg.inpaint_strength;
            job.mask_dilation = cfg.mask_dilation;
            job.seed = cfg.seed ^ hash64(job_id.as_bytes());
            let record = ManifestRecord {
                shape_id: shape.id.clone(),
                cloud_path: fs::canonicalize(&shape.path)
                    .unwrap_or_else(|_| shape.path.clone())
                    .display()
                    .to_string(),
                prompt: prompt.text.clone(),
                image_path: String::new(),
                view_index: index,
                category: shape.category.clone(),
            };
            jobs.push((job, record));
        }
    }

    let run = |jobs: Vec<(GenerationJob, ManifestRecord)>| -> Result<Vec<ManifestRecord>> {
        jobs.into_par_iter()
            .map(|(job, mut record)| {
                let image = synthesize_image(&job, suite.synthesizer.as_ref(), suite.inpainter.as_ref())?;
                record.image_path = write_view_assets(out_dir, &record.shape_id, record.view_index, &job.depth, &image)?;
                Ok(record)
            })
            .collect()
    };
    let records = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::invalid("workers", e.to_string()))?;
        pool.install(|| run(jobs))?
    } else {
        run(jobs)?
    };
    log::info!("built {} triplets from {} shapes", records.len(), shapes.len());
    write_manifest(&records, out_dir.join("manifest.jsonl"))?;
    Ok(records)
}
