mod common;

use common::oracles::{blob, brute_chamfer, frechet_oracle, gaussian, kernel};
use common::{random_cloud, slab, sphere, toy_suite};
use ndarray::Array2;
use proptest::prelude::*;
use shapewords::dataset::{build_dataset, DatasetConfig, ShapeSource};
use shapewords::evaluation::*;
use shapewords::generation::HandoffMode;
use shapewords::geometry::SilhouetteMask;
use shapewords::prompts::build_prompt_bank;
use shapewords::seeding::derive_rng;
use shapewords::shape2clip::{GuidanceSpec, TokenStrategy};

#[test]
fn chamfer_matches_exhaustive_oracle_on_random_blobs() {
    for seed in 0..12 {
        let (w, h) = (48 + seed as usize, 40);
        let a = blob(w, h, seed);
        let b = blob(w, h, seed + 100);
        let fast = silhouette_chamfer(&MaskPair::new(a.clone(), b.clone()).unwrap()).unwrap();
        let slow = brute_chamfer(&a, &b);
        assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
    }
}

fn random_mask(w: usize, h: usize, bits: &[bool]) -> SilhouetteMask {
    SilhouetteMask::from_fn(w, h, |x, y| bits[y * w + x])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let (ma, mb) = (random_mask(8, 8, &a), random_mask(8, 8, &b));
        if let Ok(ab) = silhouette_iou(&MaskPair::new(ma.clone(), mb.clone()).unwrap()) {
            let ba = silhouette_iou(&MaskPair::new(mb, ma).unwrap()).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_itself(a in prop::collection::vec(any::<bool>(), 80), b in prop::collection::vec(any::<bool>(), 80)) {
        let (ma, mb) = (random_mask(10, 8, &a), random_mask(10, 8, &b));
        if let Ok(ab) = silhouette_chamfer(&MaskPair::new(ma.clone(), mb.clone()).unwrap()) {
            let ba = silhouette_chamfer(&MaskPair::new(mb, ma.clone()).unwrap()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(silhouette_chamfer(&MaskPair::new(ma.clone(), ma).unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn cosine_score_ignores_positive_scale(v in prop::collection::vec(-5.0f64..5.0, 6), w in prop::collection::vec(-5.0f64..5.0, 6), s in 0.01f64..100.0) {
        if let Ok(base) = cosine_score(&v, &w) {
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            prop_assert!((cosine_score(&scaled, &w).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn frechet_is_nonnegative(seed in 0u64..500) {
        let a = gaussian(12, 3, seed, "a", 0.0);
        let b = gaussian(9, 3, seed, "b", 0.3);
        prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn frechet_of_a_set_with_itself_is_zero() {
    let a = gaussian(40, 5, 1, "a", 0.0);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
}

#[test]
fn frechet_one_dimensional_unit_shift() {
    // empirical mean 0 and variance 1 (n-1 normalization) vs mean 1 and variance 1
    let r = 0.5f64.sqrt();
    let a = Array2::from_shape_vec((2, 1), vec![-r, r]).unwrap();
    let b = Array2::from_shape_vec((2, 1), vec![1.0 - r, 1.0 + r]).unwrap();
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn frechet_matches_direct_closed_form() {
    for seed in 0..4 {
        let a = gaussian(50, 4, seed, "a", 0.0);
        let mut b = gaussian(60, 4, seed, "b", 0.5);
        b.column_mut(1).mapv_inplace(|v| v * 2.0);
        let oracle = frechet_oracle(&a, &b);
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-6, "seed {seed}: {got} vs {oracle}");
    }
}

#[test]
fn frechet_rejects_bad_inputs() {
    let a = gaussian(1, 3, 0, "a", 0.0);
    let b = gaussian(5, 3, 0, "b", 0.0);
    assert!(frechet_distance(&a, &b).is_err());
    let mut c = gaussian(5, 3, 0, "c", 0.0);
    c[[0, 0]] = f64::NAN;
    assert!(frechet_distance(&c, &b).is_err());
    assert!(frechet_distance(&gaussian(5, 2, 0, "d", 0.0), &b).is_err());
}

#[test]
fn kernel_distance_on_identical_five_point_sets_matches_direct_sum() {
    let a = gaussian(5, 3, 7, "a", 0.0);
    let rows: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    let n = 5.0;
    let (mut within, mut cross) = (0.0, 0.0);
    for i in 0..5 {
        for j in 0..5 {
            let k = kernel(&rows[i], &rows[j]);
            cross += k;
            if i != j {
                within += k;
            }
        }
    }
    // identical sets: 2·within/(n(n-1)) − 2·all/n²
    let oracle = 100.0 * (2.0 * within / (n * (n - 1.0)) - 2.0 * cross / (n * n));
    let got = kernel_distance(&a, &a).unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    assert!(got <= 1e-12);
}

#[test]
fn kernel_distance_between_samples_of_one_distribution_is_within_bootstrap_noise() {
    let a = gaussian(500, 8, 11, "a", 0.0);
    let b = gaussian(500, 8, 11, "b", 0.0);
    let kid = kernel_distance(&a, &b).unwrap();
    let mut rng = derive_rng(11, "bootstrap");
    let resample = |x: &Array2<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let idx: Vec<usize> = (0..x.nrows()).map(|_| rng.random_range(0..x.nrows())).collect();
        x.select(ndarray::Axis(0), &idx)
    };
    let draws: Vec<f64> = (0..40)
        .map(|_| {
            let (ra, rb) = (resample(&a, &mut rng), resample(&b, &mut rng));
            kernel_distance(&ra, &rb).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
    assert!(kid.abs() < 3.0 * sd, "kid {kid}, bootstrap sd {sd}");
}

#[test]
fn kernel_distance_grows_with_separation() {
    let a = gaussian(60, 4, 3, "a", 0.0);
    let b = gaussian(60, 4, 3, "b", 0.0);
    let shifted = &a + 3.0;
    assert!(kernel_distance(&shifted, &b).unwrap() > kernel_distance(&a, &b).unwrap());
    assert!(kernel_distance(&gaussian(1, 4, 0, "x", 0.0), &b).is_err());
}

#[test]
fn closed_loop_adherence_is_exact_on_six_views() {
    let suite = toy_suite(7);
    let size = suite.config.image_size();
    for cloud in [sphere(800), slab(800), random_cloud(600, 3)] {
        let generator = compositing_generator(&suite, "a red chair", 1);
        let azimuths = evaluation_azimuths(DEFAULT_VIEWS);
        let a = multiview_adherence(
            "s",
            &cloud,
            &azimuths,
            0.0,
            size,
            generator.as_ref(),
            suite.segmenter.as_ref(),
        )
        .unwrap();
        assert_eq!(a.views.len(), 6);
        assert_eq!(a.exclusions(), 0);
        assert!(a.views.iter().all(|v| v.s_iou == 1.0 && v.s_cd == 0.0));
        assert_eq!((a.s_iou, a.s_cd), (1.0, 0.0));
    }
}

#[test]
fn failing_view_is_excluded_and_counted() {
    let suite = toy_suite(7);
    let size = suite.config.image_size();
    let inner = compositing_generator(&suite, "a red chair", 1);
    let generator = move |t: &PoseTarget| {
        if t.view.azimuth() == 120.0 {
            Err(shapewords::Error::Backend {
                name: "test".into(),
                message: "no image".into(),
            })
        } else {
            inner(t)
        }
    };
    let a = multiview_adherence(
        "s",
        &sphere(500),
        &evaluation_azimuths(6),
        0.0,
        size,
        &generator,
        suite.segmenter.as_ref(),
    )
    .unwrap();
    assert_eq!(a.views.len(), 5);
    assert_eq!(a.exclusions(), 1);
    assert_eq!(a.failures[0].azimuth_deg, 120.0);
    assert_eq!(a.s_iou, 1.0);
}

fn run(id: &str, lambda: f64, s_iou: f64, fid: Option<f64>) -> RunMetrics {
    RunMetrics {
        meta: RunMetadata {
            run_id: id.into(),
            lambda,
            strategy: TokenStrategy::ObjectAndEos,
            k_percent: 40.0,
            mode: HandoffMode::ShapeWords,
            seed: 0,
        },
        shapes: vec![],
        s_iou: Some(s_iou),
        s_cd: Some(0.1),
        clip: Some(20.0),
        fid,
        kid: None,
        aes: Some(5.0),
        images: 3,
    }
}

#[test]
fn report_assembly() {
    assert!(assemble_report(vec![]).is_err());
    let single = assemble_report(vec![run("a", 1.0, 0.8, Some(3.0))]).unwrap();
    assert_eq!(single.summary.s_iou, Some(0.8));
    assert_eq!(single.summary.fid, Some(3.0));
    assert_eq!(single.summary.kid, None);
    let two = assemble_report(vec![run("a", 1.0, 0.8, Some(3.0)), run("b", 0.5, 0.6, None)]).unwrap();
    assert_eq!(two.runs.len(), 2);
    assert!((two.summary.s_iou.unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(two.summary.fid, Some(3.0));
    assert_eq!(two.runs[1].meta.run_id, "b");
    assert!(assemble_report(vec![run("a", 1.0, 0.8, None), run("a", 1.0, 0.8, None)]).is_err());
    assert!(assemble_report(vec![run("a", 1.5, 0.8, None)]).is_err());

    let dir = tempfile::tempdir().unwrap();
    write_report(&two, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let summary: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    for key in ["s_iou", "s_cd", "clip", "fid", "kid", "aes"] {
        assert!(summary["summary"].get(key).is_some(), "{key}");
    }
    let table = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(table.contains("FID") && table.contains("CLIP") && table.lines().count() == 4);
}

#[test]
fn closed_loop_manifest_evaluation() {
    let suite = toy_suite(5);
    let dir = tempfile::tempdir().unwrap();
    let mut shapes = vec![];
    for (id, cloud) in [("ball", sphere(600)), ("board", slab(600))] {
        let path = dir.path().join(format!("{id}.xyz"));
        cloud.save_xyz(&path).unwrap();
        shapes.push(ShapeSource {
            id: id.into(),
            path,
            category: "chair".into(),
        });
    }
    let bank = build_prompt_bank(
        &["photo".into()],
        &["red".into(), "blue".into()],
        "a {adjective} {medium} of a [SHAPE-ID]",
    )
    .unwrap();
    let out = dir.path().join("data");
    build_dataset(&suite, &shapes, &bank, &DatasetConfig::for_suite(&suite, 3), &out).unwrap();
    let cfg = EvaluationConfig {
        closed_loop: true,
        guidance: GuidanceSpec::default(),
        ..EvaluationConfig::default()
    };
    let metrics = evaluate_manifest(&suite, None, out.join("manifest.jsonl"), &cfg).unwrap();
    assert_eq!(metrics.shapes.len(), 2);
    assert_eq!(metrics.s_iou, Some(1.0));
    assert_eq!(metrics.s_cd, Some(0.0));
    assert!(metrics.fid.unwrap() >= 0.0);
    assert!(metrics.kid.is_some() && metrics.clip.is_some());
    assert_eq!(metrics.images, 60);
}
