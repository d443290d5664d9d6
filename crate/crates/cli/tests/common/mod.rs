#![allow(dead_code)]

use std::path::Path;

use shapewords::geometry::PointCloud;
use shapewords::seeding::{derive_rng, normal_vec};
use shapewords::shape2clip::{init_params, save_params, ModelDims, Shape2ClipParams};

pub const TEMPLATE: &str = "a wooden [SHAPE-ID] in a garden";

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

pub fn box_cloud(n: usize) -> PointCloud {
    let mut rng = derive_rng(4, "box");
    let v = normal_vec(&mut rng, 3 * n, 1.0);
    PointCloud::new(
        v.chunks(3)
            .map(|c| [c[0].tanh(), 0.4 * c[1].tanh(), 0.2 * c[2].tanh()])
            .collect(),
    )
    .unwrap()
}

/// `chair/sphere.xyz` and `table/box.xyz` under `dir`.
pub fn write_shapes(dir: &Path) {
    for (cat, id, cloud) in [("chair", "sphere", sphere(400)), ("table", "box", box_cloud(400))] {
        std::fs::create_dir_all(dir.join(cat)).unwrap();
        cloud.save_xyz(dir.join(cat).join(format!("{id}.xyz"))).unwrap();
    }
}

/// Parameters for the default toy suite with a nonzero residual.
pub fn noisy_params(seed: u64) -> Shape2ClipParams {
    let mut p = init_params(ModelDims::new(16, 8, 16, 32), seed).unwrap();
    let mut rng = derive_rng(seed, "noisy");
    for (_, mut t) in p.named_tensors_mut() {
        let noise = normal_vec(&mut rng, t.len(), 0.2);
        for (v, n) in t.iter_mut().zip(noise) {
            *v += n;
        }
    }
    p
}

pub fn write_params(path: &Path, seed: u64) {
    save_params(&noisy_params(seed), path).unwrap();
}
