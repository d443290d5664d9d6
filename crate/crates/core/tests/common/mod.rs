#![allow(dead_code)]

pub mod oracles;

use shapewords::backends::{load_backend_suite, BackendConfig, BackendSuite};
use shapewords::geometry::PointCloud;
use shapewords::seeding::{derive_rng, normal_vec};
use shapewords::shape2clip::{init_params, ModelDims, Shape2ClipParams};

pub fn toy_suite(seed: u64) -> BackendSuite {
    load_backend_suite(&BackendConfig::toy(seed)).unwrap()
}

pub fn sphere(n: usize) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
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
    .unwrap()
}

/// A flat rectangular slab, wide in x and thin in z.
pub fn slab(n: usize) -> PointCloud {
    let cols = 32;
    let rows = n.div_ceil(cols);
    PointCloud::new(
        (0..n)
            .map(|i| {
                let a = (i % cols) as f64 / (cols - 1) as f64;
                let b = (i / cols) as f64 / rows.max(2) as f64;
                [a * 2.0 - 1.0, (b * 2.0 - 1.0) * 0.3, 0.1 * (i % 3) as f64]
            })
            .collect(),
    )
    .unwrap()
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = derive_rng(seed, "cloud");
    let v = normal_vec(&mut rng, 3 * n, 1.0);
    PointCloud::new(v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap()
}

pub fn model_dims(suite: &BackendSuite) -> ModelDims {
    ModelDims::new(suite.text_dim(), suite.shape_dim(), 16, 32)
}

/// Initialized parameters with noise added everywhere, so the residual is nonzero.
pub fn trained_like(suite: &BackendSuite, seed: u64) -> Shape2ClipParams {
    let mut p = init_params(model_dims(suite), seed).unwrap();
    let mut rng = derive_rng(seed, "trained-like");
    for (_, mut t) in p.named_tensors_mut() {
        let noise = normal_vec(&mut rng, t.len(), 0.2);
        for (v, n) in t.iter_mut().zip(noise) {
            *v += n;
        }
    }
    p
}

/// A directory with `chair/sphere.xyz` and `table/slab.xyz`.
pub fn shape_library() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (cat, id, cloud) in [("chair", "sphere", sphere(400)), ("table", "slab", slab(400))] {
        std::fs::create_dir_all(dir.path().join(cat)).unwrap();
        cloud.save_xyz(dir.path().join(cat).join(format!("{id}.xyz"))).unwrap();
    }
    dir
}
