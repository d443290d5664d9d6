//! Point-cloud preprocessing and silhouette rendering.

use std::path::Path;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Default patch count of the shape tokenizer.
pub const DEFAULT_NUM_PATCHES: usize = 64;
/// Half-extent of the orthographic frame in normalized object units.
pub const FRAME_EXTENT: f64 = 1.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub source_id: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cloud", "point cloud is empty"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cloud", "point cloud has non-finite coordinates"));
        }
        Ok(Self { points, source_id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = Some(id.into());
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_radius(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Subset of points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid("indices", format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(points)?;
        out.source_id = self.source_id.clone();
        Ok(out)
    }

    /// Loads either an ASCII/binary PLY vertex list or a plain `x y z` per line file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        let points = if bytes.starts_with(b"ply") {
            parse_ply(&bytes, &name)?
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
                source_name: name.clone(),
                line: 0,
                message: "not valid UTF-8".into(),
            })?;
            parse_xyz(&text, &name)?
        };
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        let mut cloud = Self::new(points)?;
        cloud.source_id = id;
        Ok(cloud)
    }

    pub fn save_xyz(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::with_capacity(self.points.len() * 32);
        for p in &self.points {
            text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn parse_xyz(text: &str, source_name: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                source_name: source_name.into(),
                line: idx + 1,
                message: format!("{e}"),
            })?;
        if vals.len() < 3 {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line: idx + 1,
                message: format!("expected `x y z`, got {} values", vals.len()),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(points)
}

fn parse_ply(bytes: &[u8], source_name: &str) -> Result<Vec<Point>> {
    let perr = |line: usize, message: String| Error::Parse {
        source_name: source_name.into(),
        line,
        message,
    };
    let header_end = bytes
        .windows(b"end_header".len())
        .position(|w| w == b"end_header")
        .ok_or_else(|| perr(0, "missing end_header".into()))?;
    let mut body_start = header_end + b"end_header".len();
    while body_start < bytes.len() && (bytes[body_start] == b'\r' || bytes[body_start] == b'\n') {
        body_start += 1;
        if bytes[body_start - 1] == b'\n' {
            break;
        }
    }
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| perr(0, "header not UTF-8".into()))?;

    let mut format = "";
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, String)> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, ..] => format = f,
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|e| perr(i + 1, e.to_string()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(perr(i + 1, "list properties on vertices are unsupported".into()));
                }
            }
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            _ => {}
        }
    }
    let n = vertex_count.ok_or_else(|| perr(0, "no vertex element".into()))?;
    let index_of = |axis: &str| {
        props
            .iter()
            .position(|(_, name)| name == axis)
            .ok_or_else(|| perr(0, format!("vertex property `{axis}` missing")))
    };
    let (ix, iy, iz) = (index_of("x")?, index_of("y")?, index_of("z")?);

    let body = &bytes[body_start..];
    let mut points = Vec::with_capacity(n);
    match format {
        "ascii" => {
            let text = std::str::from_utf8(body).map_err(|_| perr(0, "body not UTF-8".into()))?;
            let header_lines = header.lines().count() + 1;
            for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).take(n).enumerate() {
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(header_lines + i + 1, format!("{e}")))?;
                if vals.len() < props.len() {
                    return Err(perr(header_lines + i + 1, "too few vertex values".into()));
                }
                points.push([vals[ix], vals[iy], vals[iz]]);
            }
        }
        "binary_little_endian" => {
            let sizes = props
                .iter()
                .map(|(ty, _)| match ty.as_str() {
                    "char" | "uchar" | "int8" | "uint8" => Ok(1),
                    "short" | "ushort" | "int16" | "uint16" => Ok(2),
                    "int" | "uint" | "int32" | "uint32" | "float" | "float32" => Ok(4),
                    "double" | "float64" => Ok(8),
                    other => Err(perr(0, format!("unsupported property type `{other}`"))),
                })
                .collect::<Result<Vec<usize>>>()?;
            let stride: usize = sizes.iter().sum();
            if body.len() < stride * n {
                return Err(perr(0, "binary body truncated".into()));
            }
            let read = |rec: &[u8], p: usize| -> Result<f64> {
                let off: usize = sizes[..p].iter().sum();
                let b = &rec[off..off + sizes[p]];
                match props[p].0.as_str() {
                    "float" | "float32" => Ok(f32::from_le_bytes(b.try_into().unwrap()) as f64),
                    "double" | "float64" => Ok(f64::from_le_bytes(b.try_into().unwrap())),
                    other => Err(perr(0, format!("coordinate type `{other}` unsupported"))),
                }
            };
            for rec in body.chunks_exact(stride).take(n) {
                points.push([read(rec, ix)?, read(rec, iy)?, read(rec, iz)?]);
            }
        }
        other => return Err(perr(0, format!("unsupported PLY format `{other}`"))),
    }
    if points.len() != n {
        return Err(perr(0, format!("expected {n} vertices, found {}", points.len())));
    }
    Ok(points)
}

/// Greedy max-min subset selection.
///
/// Each pick maximizes the squared distance to the already selected set;
/// ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start_index: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if n == 0 {
        return Err(Error::invalid("cloud", "point cloud is empty"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid("k", format!("must be in 1..={n}, got {k}")));
    }
    if start_index >= n {
        return Err(Error::invalid(
            "start_index",
            format!("{start_index} out of range for {n} points"),
        ));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Centers the cloud at the origin and scales its maximum radius to 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let centered: Vec<Point> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 1e-12) {
        return Err(Error::invalid("cloud", "degenerate cloud with zero extent"));
    }
    let mut out = PointCloud::new(centered.iter().map(|p| p.map(|v| v / radius)).collect())?;
    out.source_id = cloud.source_id.clone();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// Indices of the patch centers into the source cloud.
    pub center_indices: Vec<usize>,
    pub centers: Vec<Point>,
    /// Member point indices per patch, nearest first.
    pub groups: Vec<Vec<usize>>,
}

/// FPS centers, each grouped with its `group_size` nearest neighbours (ties by index).
pub fn group_patches(cloud: &PointCloud, num_patches: usize, group_size: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if n < num_patches {
        return Err(Error::invalid(
            "num_patches",
            format!("cloud has {n} points, fewer than {num_patches} patches"),
        ));
    }
    if group_size == 0 || group_size > n {
        return Err(Error::invalid("group_size", format!("must be in 1..={n}, got {group_size}")));
    }
    let center_indices = farthest_point_sample(cloud, num_patches, 0)?;
    let pts = cloud.points();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(num_patches);
    for &ci in &center_indices {
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| (dist2(p, &pts[ci]), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if group_size < n {
            order.select_nth_unstable_by(group_size - 1, cmp);
        }
        let mut members = order[..group_size].to_vec();
        members.sort_by(cmp);
        groups.push(members.into_iter().map(|(_, i)| i).collect());
    }
    Ok(PatchSet {
        centers: center_indices.iter().map(|&i| pts[i]).collect(),
        center_indices,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Splat disc radius in pixels.
    pub splat_radius: f64,
}

impl ViewSpec {
    pub fn new(azimuth_deg: f64, width: usize, height: usize) -> Self {
        Self {
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            elevation_deg: 0.0,
            width,
            height,
            splat_radius: 2.0,
        }
    }

    pub fn with_elevation(mut self, elevation_deg: f64) -> Self {
        self.elevation_deg = elevation_deg;
        self
    }

    pub fn with_splat_radius(mut self, radius: f64) -> Self {
        self.splat_radius = radius;
        self
    }

    /// Azimuth wrapped into `[0, 360)`.
    pub fn azimuth(&self) -> f64 {
        self.azimuth_deg.rem_euclid(360.0)
    }

    /// Projects a point to continuous pixel coordinates plus view depth
    /// (larger is nearer the camera).
    pub fn project(&self, p: &Point) -> (f64, f64, f64) {
        let az = self.azimuth().to_radians();
        let el = self.elevation_deg.to_radians();
        let (sa, ca) = az.sin_cos();
        let (se, ce) = el.sin_cos();
        let x1 = p[0] * ca + p[2] * sa;
        let z1 = -p[0] * sa + p[2] * ca;
        let y2 = p[1] * ce - z1 * se;
        let z2 = p[1] * se + z1 * ce;
        let half_w = self.width as f64 / 2.0;
        let half_h = self.height as f64 / 2.0;
        let scale = half_w.min(half_h) / FRAME_EXTENT;
        (half_w + x1 * scale, half_h - y2 * scale, z2)
    }

    /// Pixels whose centers lie inside a splat disc around `(px, py)`.
    pub fn splat_pixels(&self, px: f64, py: f64) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.splat_radius;
        let x_lo = (px - r - 0.5).floor().max(0.0) as usize;
        let y_lo = (py - r - 0.5).floor().max(0.0) as usize;
        let x_hi = ((px + r).ceil().max(0.0) as usize).min(self.width);
        let y_hi = ((py + r).ceil().max(0.0) as usize).min(self.height);
        (y_lo..y_hi)
            .flat_map(move |y| (x_lo..x_hi).map(move |x| (x, y)))
            .filter(move |&(x, y)| {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                dx * dx + dy * dy <= r * r
            })
    }
}

/// Binary `H × W` mask, foreground = 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SilhouetteMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SilhouetteMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches")
            .save(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
        })
    }
}

/// Orthographic point-splat silhouette.
pub fn render_silhouette(cloud: &PointCloud, view: &ViewSpec) -> Result<SilhouetteMask> {
    if view.width == 0 || view.height == 0 {
        return Err(Error::invalid("view", "image size must be nonzero"));
    }
    let mut mask = SilhouetteMask::new(view.width, view.height);
    for p in cloud.points() {
        let (px, py, _) = view.project(p);
        for (x, y) in view.splat_pixels(px, py) {
            mask.set(x, y, true);
        }
    }
    Ok(mask)
}
