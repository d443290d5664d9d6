//! Shape adherence (silhouette IoU and Chamfer over several views), prompt
//! adherence, distribution distances on image features, and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSuite, ImageFeatures, Segmenter, SynthesisRequest};
use crate::dataset::{read_manifest, render_depth, resolve_asset, VIEW_STEP_DEG};
use crate::error::{Error, Result};
use crate::generation::{generate_with_handoff, HandoffMode, HandoffSpec, SamplerConfig};
use crate::geometry::{normalize_cloud, render_silhouette, PointCloud, SilhouetteMask, ViewSpec};
use crate::imaging::{DepthImage, Image};
use crate::prompts::expand_template;
use crate::seeding::hash64;
use crate::shape2clip::{GuidanceSpec, Shape2ClipParams, TokenStrategy};

/// Diagonal regularization added to feature covariances.
pub const COVARIANCE_EPS: f64 = 1e-6;
pub const DEFAULT_VIEWS: usize = 6;

/// A reference silhouette and the mask segmented from a generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub reference: SilhouetteMask,
    pub generated: SilhouetteMask,
}

impl MaskPair {
    pub fn new(reference: SilhouetteMask, generated: SilhouetteMask) -> Result<Self> {
        if (reference.width(), reference.height()) != (generated.width(), generated.height()) {
            return Err(Error::dims(
                "mask pair",
                format!("{}x{}", reference.width(), reference.height()),
                format!("{}x{}", generated.width(), generated.height()),
            ));
        }
        Ok(Self { reference, generated })
    }
}

/// `|A∩B| / |A∪B|`.
pub fn silhouette_iou(pair: &MaskPair) -> Result<f64> {
    let (a, b) = (&pair.reference, &pair.generated);
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    if union == 0 {
        return Err(Error::invalid("masks", "IoU is undefined for two empty masks"));
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a background (or out-of-frame) pixel among their 8 neighbours.
pub fn boundary_pixels(mask: &SilhouetteMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) {
                continue;
            }
            let edge = (-1..=1).any(|dy| (-1..=1).any(|dx| (dx, dy) != (0, 0) && !inside(x + dx, y + dy)));
            if edge {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Squared distance transform of a sampled function along one line.
fn distance_transform_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    if n == 0 {
        return Vec::new();
    }
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let intersect = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
fn squared_distance_map(width: usize, height: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; width * height];
    for &(x, y) in sites {
        grid[y * width + x] = 0.0;
    }
    for x in 0..width {
        let col: Vec<f64> = (0..height).map(|y| grid[y * width + x]).collect();
        for (y, v) in distance_transform_1d(&col).into_iter().enumerate() {
            grid[y * width + x] = v;
        }
    }
    for y in 0..height {
        let row = distance_transform_1d(&grid[y * width..(y + 1) * width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&row);
    }
    grid
}

fn mean_nearest(from: &[(usize, usize)], to_map: &[f64], width: usize) -> f64 {
    from.iter().map(|&(x, y)| to_map[y * width + x].sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-boundary distance, divided by the image diagonal.
pub fn silhouette_chamfer(pair: &MaskPair) -> Result<f64> {
    let (w, h) = (pair.reference.width(), pair.reference.height());
    let a = boundary_pixels(&pair.reference);
    let b = boundary_pixels(&pair.generated);
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("masks", "Chamfer distance needs two nonempty boundaries"));
    }
    let to_a = squared_distance_map(w, h, &a);
    let to_b = squared_distance_map(w, h, &b);
    let sym = 0.5 * (mean_nearest(&a, &to_b, w) + mean_nearest(&b, &to_a, w));
    Ok(sym / ((w * w + h * h) as f64).sqrt())
}

/// `count` azimuths evenly spaced from 0°.
pub fn evaluation_azimuths(count: usize) -> Vec<f64> {
    (0..count).map(|i| i as f64 * 360.0 / count as f64).collect()
}

/// What a generator is asked to reproduce at one pose.
#[derive(Debug, Clone)]
pub struct PoseTarget {
    pub view: ViewSpec,
    pub silhouette: SilhouetteMask,
    pub depth: DepthImage,
}

pub type PoseGenerator<'a> = dyn Fn(&PoseTarget) -> Result<Image> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub azimuth_deg: f64,
    pub s_iou: f64,
    pub s_cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFailure {
    pub azimuth_deg: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeAdherence {
    pub shape_id: String,
    pub s_iou: f64,
    pub s_cd: f64,
    pub views: Vec<ViewScore>,
    pub failures: Vec<ViewFailure>,
}

impl ShapeAdherence {
    pub fn exclusions(&self) -> usize {
        self.failures.len()
    }
}

fn score_view(target: &PoseTarget, generator: &PoseGenerator<'_>, segmenter: &dyn Segmenter) -> Result<ViewScore> {
    let image = generator(target)?;
    let mask = segmenter.segment(&image)?;
    let pair = MaskPair::new(target.silhouette.clone(), mask)?;
    Ok(ViewScore {
        azimuth_deg: target.view.azimuth(),
        s_iou: silhouette_iou(&pair)?,
        s_cd: silhouette_chamfer(&pair)?,
    })
}

/// Means of S-IOU and S-CD over `azimuths`; views that fail are excluded and listed.
pub fn multiview_adherence(
    shape_id: &str,
    cloud: &PointCloud,
    azimuths: &[f64],
    elevation_deg: f64,
    size: (usize, usize),
    generator: &PoseGenerator<'_>,
    segmenter: &dyn Segmenter,
) -> Result<ShapeAdherence> {
    if azimuths.is_empty() {
        return Err(Error::invalid("views", "at least one view is required"));
    }
    let cloud = normalize_cloud(cloud)?;
    let outcomes: Vec<(f64, Result<ViewScore>)> = azimuths
        .par_iter()
        .map(|&az| {
            let view = ViewSpec::new(az, size.0, size.1).with_elevation(elevation_deg);
            let scored = render_silhouette(&cloud, &view).and_then(|silhouette| {
                let target = PoseTarget {
                    view,
                    silhouette,
                    depth: render_depth(&cloud, &view)?,
                };
                score_view(&target, generator, segmenter)
            });
            (view.azimuth(), scored)
        })
        .collect();
    let mut views = Vec::new();
    let mut failures = Vec::new();
    for (az, outcome) in outcomes {
        match outcome {
            Ok(v) => views.push(v),
            Err(e) => {
                log::warn!("shape {shape_id} view {az}°: {e}");
                failures.push(ViewFailure {
                    azimuth_deg: az,
                    message: e.to_string(),
                });
            }
        }
    }
    if views.is_empty() {
        return Err(Error::Backend {
            name: "evaluation".into(),
            message: format!("every view of shape `{shape_id}` failed"),
        });
    }
    let n = views.len() as f64;
    Ok(ShapeAdherence {
        shape_id: shape_id.to_string(),
        s_iou: views.iter().map(|v| v.s_iou).sum::<f64>() / n,
        s_cd: views.iter().map(|v| v.s_cd).sum::<f64>() / n,
        views,
        failures,
    })
}

/// `100 · cos(a, b)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("feature vectors", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) || !na.is_finite() || !nb.is_finite() {
        return Err(Error::invalid("features", "zero-norm or non-finite feature vector"));
    }
    Ok(100.0 * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Image/text agreement for `text`, the prompt with its category substituted.
pub fn clip_score(features: &dyn ImageFeatures, image: &Image, text: &str) -> Result<f64> {
    cosine_score(&features.embed_image(image)?, &features.embed_text(text)?)
}

fn check_features(name: &str, x: &Array2<f64>) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::invalid(
            name,
            format!("{} samples; at least 2 are required", x.nrows()),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(name, "features contain non-finite values"));
    }
    Ok(())
}

fn moments(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let m = DMatrix::from_row_iterator(n, d, x.iter().copied());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` with ε on the covariance diagonals.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_features("features A", a)?;
    check_features("features B", b)?;
    if a.ncols() != b.ncols() {
        return Err(Error::dims("feature sets", a.ncols(), b.ncols()));
    }
    let d = a.ncols();
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    let eps = DMatrix::<f64>::identity(d, d) * COVARIANCE_EPS;
    cov_a += &eps;
    cov_b += &eps;
    // Tr((Σ_A Σ_B)^{1/2}) = Tr((Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2})
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0))
}

/// Cubic polynomial kernel `(xᵀy/d + 1)³`.
fn poly_kernel(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    (x.dot(&y) / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² under the cubic polynomial kernel, times 100.
pub fn kernel_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_features("features A", a)?;
    check_features("features B", b)?;
    if a.ncols() != b.ncols() {
        return Err(Error::dims("feature sets", a.ncols(), b.ncols()));
    }
    let (n, m) = (a.nrows() as f64, b.nrows() as f64);
    let within = |x: &Array2<f64>| -> f64 {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                (0..x.nrows())
                    .filter(|&j| j != i)
                    .map(|j| poly_kernel(x.row(i), x.row(j)))
                    .sum::<f64>()
            })
            .sum()
    };
    let cross: f64 = (0..a.nrows())
        .into_par_iter()
        .map(|i| (0..b.nrows()).map(|j| poly_kernel(a.row(i), b.row(j))).sum::<f64>())
        .sum();
    let mmd = within(a) / (n * (n - 1.0)) + within(b) / (m * (m - 1.0)) - 2.0 * cross / (n * m);
    Ok(100.0 * mmd)
}

/// Stacks feature vectors into rows.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("features", "feature vectors differ in length"));
    }
    Ok(Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("sized"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub lambda: f64,
    pub strategy: TokenStrategy,
    pub k_percent: f64,
    pub mode: HandoffMode,
    pub seed: u64,
}

/// Metrics of one evaluation run; set metrics are absent when too few images exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub meta: RunMetadata,
    pub shapes: Vec<ShapeAdherence>,
    pub s_iou: Option<f64>,
    pub s_cd: Option<f64>,
    pub clip: Option<f64>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub aes: Option<f64>,
    pub images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub s_iou: Option<f64>,
    pub s_cd: Option<f64>,
    pub clip: Option<f64>,
    pub fid: Option<f64>,
    pub kid: Option<f64>,
    pub aes: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub summary: Summary,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn assemble_report(runs: Vec<RunMetrics>) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::invalid("runs", "no runs to report"));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &runs {
        let m = &r.meta;
        if !seen.insert(m.run_id.as_str()) {
            return Err(Error::invalid("runs", format!("run id `{}` appears twice", m.run_id)));
        }
        if !(0.0..=1.0).contains(&m.lambda) || !(0.0..=100.0).contains(&m.k_percent) {
            return Err(Error::invalid("runs", format!("run `{}` has out-of-range λ or K", m.run_id)));
        }
        let values = [r.s_iou, r.s_cd, r.clip, r.fid, r.kid, r.aes];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("runs", format!("run `{}` has a non-finite metric", m.run_id)));
        }
    }
    let summary = Summary {
        s_iou: mean_of(runs.iter().map(|r| r.s_iou)),
        s_cd: mean_of(runs.iter().map(|r| r.s_cd)),
        clip: mean_of(runs.iter().map(|r| r.clip)),
        fid: mean_of(runs.iter().map(|r| r.fid)),
        kid: mean_of(runs.iter().map(|r| r.kid)),
        aes: mean_of(runs.iter().map(|r| r.aes)),
    };
    Ok(MetricsReport { runs, summary })
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Plain-text table: one row per run plus the mean row.
pub fn format_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>16} {:>5} {:>8} {:>8} {:>8} {:>8} {:>6} {:>7}",
        "run", "lambda", "strategy", "K", "S-IOU↑", "S-CD↓", "FID↓", "KID↓", "Aes.↑", "CLIP↑"
    );
    let row = |out: &mut String, name: &str, lambda: String, strategy: String, k: String, s: [Option<f64>; 6]| {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>16} {:>5} {:>8} {:>8} {:>8} {:>8} {:>6} {:>7}",
            name,
            lambda,
            strategy,
            k,
            cell(s[0], 3),
            cell(s[1], 4),
            cell(s[2], 2),
            cell(s[3], 2),
            cell(s[4], 2),
            cell(s[5], 1)
        );
    };
    for r in &report.runs {
        let m = &r.meta;
        row(
            &mut out,
            &m.run_id,
            format!("{:.2}", m.lambda),
            m.strategy.to_string(),
            format!("{}", m.k_percent),
            [r.s_iou, r.s_cd, r.fid, r.kid, r.aes, r.clip],
        );
    }
    let s = &report.summary;
    row(
        &mut out,
        "mean",
        String::new(),
        String::new(),
        String::new(),
        [s.s_iou, s.s_cd, s.fid, s.kid, s.aes, s.clip],
    );
    out
}

/// Writes `report.jsonl` (one line per run, then `{"summary": …}`) and `report.txt` into `dir`.
pub fn write_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for r in &report.runs {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    let mut summary = BTreeMap::new();
    summary.insert("summary", &report.summary);
    lines.push_str(&serde_json::to_string(&summary)?);
    lines.push('\n');
    let jsonl = dir.join("report.jsonl");
    std::fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, format_table(report)).map_err(|e| Error::io(&txt, e))
}

/// How [`evaluate_manifest`] generates and scores images.
#[derive(Debug, Clone)]
pub struct EvaluationConfig {
    pub run_id: String,
    pub views: usize,
    pub elevation_deg: f64,
    pub guidance: GuidanceSpec,
    pub k_percent: f64,
    pub mode: HandoffMode,
    pub sampler: SamplerConfig,
    /// Replace generation with silhouette compositing so adherence is exact by construction.
    pub closed_loop: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            views: DEFAULT_VIEWS,
            elevation_deg: 0.0,
            guidance: GuidanceSpec::default(),
            k_percent: 40.0,
            mode: HandoffMode::ShapeWords,
            sampler: SamplerConfig::default(),
            closed_loop: false,
        }
    }
}

impl EvaluationConfig {
    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            run_id: self.run_id.clone(),
            lambda: self.guidance.lambda,
            strategy: self.guidance.strategy,
            k_percent: self.k_percent,
            mode: self.mode,
            seed: self.sampler.seed,
        }
    }
}

/// Composites the target silhouette with the suite's synthesizer.
pub fn compositing_generator<'a>(suite: &'a BackendSuite, prompt: &'a str, seed: u64) -> Box<PoseGenerator<'a>> {
    Box::new(move |target: &PoseTarget| {
        suite.synthesizer.synthesize(&SynthesisRequest {
            depth: &target.depth,
            silhouette: &target.silhouette,
            prompt,
            control_strength: 1.0,
            steps: 1,
            seed,
        })
    })
}

/// Pose-controlled generation through the latent handoff.
pub fn handoff_generator<'a>(
    suite: &'a BackendSuite,
    params: Option<&'a Shape2ClipParams>,
    cloud: &'a PointCloud,
    template: &'a str,
    category: &'a str,
    cfg: &'a EvaluationConfig,
) -> Box<PoseGenerator<'a>> {
    Box::new(move |target: &PoseTarget| {
        let handoff = HandoffSpec::new(cfg.k_percent, target.depth.clone(), cfg.mode);
        generate_with_handoff(
            suite,
            params,
            cloud,
            template,
            category,
            &cfg.guidance,
            &handoff,
            &cfg.sampler,
        )
        .map(|(image, _)| image)
    })
}

struct RecordImages {
    generated: Image,
    real: Image,
    prompt: String,
}

/// Scores every shape and record of a dataset manifest.
pub fn evaluate_manifest(
    suite: &BackendSuite,
    params: Option<&Shape2ClipParams>,
    manifest: impl AsRef<Path>,
    cfg: &EvaluationConfig,
) -> Result<RunMetrics> {
    let manifest = manifest.as_ref();
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(Error::invalid("manifest", "manifest has no records"));
    }
    let size = suite.config.image_size();
    let azimuths = evaluation_azimuths(cfg.views);

    let mut clouds: BTreeMap<String, (PointCloud, String, String)> = BTreeMap::new();
    for r in &records {
        if !clouds.contains_key(&r.shape_id) {
            let cloud = PointCloud::load(resolve_asset(manifest, &r.cloud_path))?;
            clouds.insert(r.shape_id.clone(), (cloud, r.prompt.clone(), r.category.clone()));
        }
    }
    let shapes = clouds
        .par_iter()
        .map(|(id, (cloud, template, category))| {
            let prompt = expand_template(template, category)?;
            let generator = if cfg.closed_loop {
                compositing_generator(suite, &prompt, cfg.sampler.seed)
            } else {
                handoff_generator(suite, params, cloud, template, category, cfg)
            };
            multiview_adherence(
                id,
                cloud,
                &azimuths,
                cfg.elevation_deg,
                size,
                generator.as_ref(),
                suite.segmenter.as_ref(),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let images = records
        .par_iter()
        .map(|r| {
            let (cloud, _, _) = &clouds[&r.shape_id];
            let normalized = normalize_cloud(cloud)?;
            let view = ViewSpec::new(r.view_index as f64 * VIEW_STEP_DEG, size.0, size.1).with_elevation(cfg.elevation_deg);
            let target = PoseTarget {
                view,
                silhouette: render_silhouette(&normalized, &view)?,
                depth: render_depth(&normalized, &view)?,
            };
            let prompt = expand_template(&r.prompt, &r.category)?;
            let seed = cfg.sampler.seed ^ hash64(format!("{}/{}", r.shape_id, r.view_index).as_bytes());
            let generated = if cfg.closed_loop {
                compositing_generator(suite, &prompt, seed)(&target)?
            } else {
                let mut local = cfg.clone();
                local.sampler.seed = seed;
                let generator = handoff_generator(suite, params, cloud, &r.prompt, &r.category, &local);
                generator(&target)?
            };
            Ok(RecordImages {
                generated,
                real: Image::load(resolve_asset(manifest, &r.image_path))?,
                prompt,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let features = suite.features.as_ref();
    let clip = images
        .iter()
        .map(|i| clip_score(features, &i.generated, &i.prompt))
        .collect::<Result<Vec<_>>>()?;
    let aes = images
        .iter()
        .map(|i| features.aesthetic_score(&i.generated))
        .collect::<Result<Vec<_>>>()?;
    let gen_feats = feature_matrix(
        &images
            .iter()
            .map(|i| features.embed_image(&i.generated))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let real_feats = feature_matrix(
        &images
            .iter()
            .map(|i| features.embed_image(&i.real))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let (fid, kid) = if images.len() >= 2 {
        (
            Some(frechet_distance(&gen_feats, &real_feats)?),
            Some(kernel_distance(&gen_feats, &real_feats)?),
        )
    } else {
        (None, None)
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let iou: Vec<f64> = shapes.iter().map(|s| s.s_iou).collect();
    let cd: Vec<f64> = shapes.iter().map(|s| s.s_cd).collect();
    Ok(RunMetrics {
        meta: cfg.metadata(),
        s_iou: Some(mean(&iou)),
        s_cd: Some(mean(&cd)),
        shapes,
        clip: Some(mean(&clip)),
        fid,
        kid,
        aes: Some(mean(&aes)),
        images: images.len(),
    })
}
