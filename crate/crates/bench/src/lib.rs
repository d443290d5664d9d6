//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use shapewords::evaluation::feature_matrix;
use shapewords::geometry::PointCloud;
use shapewords::seeding::{derive_rng, normal_vec};
use shapewords::shape2clip::{init_params, ModelDims, Shape2ClipParams};

pub fn gaussian_cloud(n: usize, seed: u64) -> PointCloud {
    let v = normal_vec(&mut derive_rng(seed, "bench-cloud"), 3 * n, 1.0);
    PointCloud::new(v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).expect("finite points")
}

/// `n × dim` feature rows; `shift` moves the mean of every column.
pub fn features(n: usize, dim: usize, shift: f64, seed: u64) -> Array2<f64> {
    let v = normal_vec(&mut derive_rng(seed, "bench-features"), n * dim, 1.0);
    let rows: Vec<Vec<f64>> = v.chunks(dim).map(|r| r.iter().map(|x| x + shift).collect()).collect();
    feature_matrix(&rows).expect("rectangular rows")
}

/// Parameters with every tensor perturbed so the residual is nonzero.
pub fn perturbed_params(dims: ModelDims, seed: u64) -> Shape2ClipParams {
    let mut p = init_params(dims, seed).expect("valid dims");
    let mut rng = derive_rng(seed, "bench-params");
    for (_, mut t) in p.named_tensors_mut() {
        let noise = normal_vec(&mut rng, t.len(), 0.1);
        for (v, n) in t.iter_mut().zip(noise) {
            *v += n;
        }
    }
    p
}
