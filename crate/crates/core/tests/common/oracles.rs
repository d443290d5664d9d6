//! Slow reference implementations the fast paths are checked against.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::Array2;
use shapewords::backends::{Denoiser, DepthController, Latent, LatentShape, NoiseSchedule, PromptEmbedding};
use shapewords::geometry::{PointCloud, SilhouetteMask};
use shapewords::imaging::{DepthImage, Image};
use shapewords::seeding::{derive_rng, normal_vec};
use shapewords::Result;

pub fn gaussian(n: usize, d: usize, seed: u64, label: &str, shift: f64) -> Array2<f64> {
    let mut rng = derive_rng(seed, label);
    Array2::from_shape_vec((n, d), normal_vec(&mut rng, n * d, 1.0)).unwrap() + shift
}

pub fn blob(w: usize, h: usize, seed: u64) -> SilhouetteMask {
    let mut rng = derive_rng(seed, "blob");
    let c = normal_vec(&mut rng, 6, 1.0);
    let (cx, cy) = (w as f64 * (0.5 + 0.15 * c[0]), h as f64 * (0.5 + 0.15 * c[1]));
    let (rx, ry) = (w as f64 * (0.2 + 0.05 * c[2].abs()), h as f64 * (0.2 + 0.05 * c[3].abs()));
    SilhouetteMask::from_fn(w, h, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
        let wobble = 0.15 * (5.0 * dy.atan2(dx) + c[4]).sin();
        dx * dx + dy * dy <= (1.0 + wobble).powi(2)
    })
}

/// Exhaustive nearest-neighbour Chamfer on 8-connected boundaries.
pub fn brute_chamfer(a: &SilhouetteMask, b: &SilhouetteMask) -> f64 {
    let edge = |m: &SilhouetteMask| -> Vec<(f64, f64)> {
        let (w, h) = (m.width() as i64, m.height() as i64);
        let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
        let mut out = vec![];
        for y in 0..h {
            for x in 0..w {
                if fg(x, y)
                    && [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
                        .iter()
                        .any(|(dx, dy)| !fg(x + dx, y + dy))
                {
                    out.push((x as f64, y as f64));
                }
            }
        }
        out
    };
    let (pa, pb) = (edge(a), edge(b));
    let one_way = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    let diag = ((a.width().pow(2) + a.height().pow(2)) as f64).sqrt();
    0.5 * (one_way(&pa, &pb) + one_way(&pb, &pa)) / diag
}

/// Mean and (n-1)-normalized covariance by explicit loops.
pub fn loop_moments(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x[[i, j]]).sum::<f64>() / n as f64).collect();
    let cov = DMatrix::from_fn(d, d, |p, q| {
        (0..n).map(|i| (x[[i, p]] - mean[p]) * (x[[i, q]] - mean[q])).sum::<f64>() / (n as f64 - 1.0)
    });
    (mean, cov)
}

/// Principal square root by Denman–Beavers iteration.
pub fn denman_beavers(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::identity(d, d);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-15 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

/// Fréchet distance from loop moments and an iterative square root, both covariances regularized by 1e-6·I.
pub fn frechet_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a.ncols();
    let eps = DMatrix::<f64>::identity(d, d) * 1e-6;
    let (ma, ca) = loop_moments(a);
    let (mb, cb) = loop_moments(b);
    let (ca, cb) = (ca + &eps, cb + &eps);
    let cross = denman_beavers(&(&ca * &cb));
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace()
}

pub fn kernel(x: &[f64], y: &[f64]) -> f64 {
    (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / x.len() as f64 + 1.0).powi(3)
}

/// Greedy farthest-point selection recomputed from scratch at every step.
pub fn brute_fps(cloud: &PointCloud, k: usize, start: usize) -> Vec<usize> {
    let pts = cloud.points();
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut sel = vec![start];
    while sel.len() < k {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| dist2(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.unwrap());
    }
    sel
}

pub struct CountingDenoiser {
    pub inner: Arc<dyn Denoiser>,
    pub calls: AtomicUsize,
}

impl CountingDenoiser {
    pub fn wrap(inner: Arc<dyn Denoiser>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Denoiser for CountingDenoiser {
    fn latent_shape(&self) -> LatentShape {
        self.inner.latent_shape()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn predict_noise(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding) -> Result<Latent> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(noisy, t, cond)
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        self.inner.encode_image(image)
    }

    fn decode_latent(&self, latent: &Latent) -> Result<Image> {
        self.inner.decode_latent(latent)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

pub struct CountingControl {
    pub inner: Arc<dyn DepthController>,
    pub calls: AtomicUsize,
}

impl CountingControl {
    pub fn wrap(inner: Arc<dyn DepthController>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl DepthController for CountingControl {
    fn predict_noise_controlled(&self, noisy: &Latent, t: usize, cond: &PromptEmbedding, depth: &DepthImage) -> Result<Latent> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise_controlled(noisy, t, cond, depth)
    }
}
