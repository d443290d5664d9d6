mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{write_params, write_shapes, TEMPLATE};

fn shapewords(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapewords"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(code(&shapewords(&["--help"])), 0);
    for sub in [
        "train",
        "generate",
        "sweep",
        "evaluate",
        "build-dataset",
        "serve",
        "encode-shape",
    ] {
        let out = shapewords(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--config"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = shapewords(&["paint"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));
    let out = shapewords(&["generate", "--prompt", TEMPLATE, "--plain"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--out"), "{}", stderr(&out));
    assert_eq!(code(&shapewords(&[])), 1);
}

#[test]
fn out_of_range_lambda_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes(dir.path());
    let out_png = dir.path().join("x.png");
    let out = shapewords(&[
        "generate",
        "--shape",
        p(&dir.path().join("chair/sphere.xyz")),
        "--prompt",
        TEMPLATE,
        "--lambda",
        "1.5",
        "--out",
        p(&out_png),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lambda"));
    assert!(!out_png.exists());
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = shapewords(&[
        "generate",
        "--shape",
        p(&dir.path().join("missing.xyz")),
        "--prompt",
        TEMPLATE,
        "--params",
        p(&dir.path().join("missing.bin")),
        "--out",
        p(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "backend.kind = quantum\n").unwrap();
    write_shapes(dir.path());
    let out = shapewords(&[
        "--config",
        p(&cfg),
        "encode-shape",
        "--shape",
        p(&dir.path().join("chair/sphere.xyz")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("quantum"));
}

#[test]
fn zero_lambda_generation_matches_plain_prompt_bytes() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes(dir.path());
    let params = dir.path().join("params.bin");
    write_params(&params, 3);
    let guided = dir.path().join("guided.png");
    let plain = dir.path().join("plain.png");
    let full = dir.path().join("full.png");
    let shape = dir.path().join("chair/sphere.xyz");
    let base = ["--prompt", TEMPLATE, "--category", "chair", "--seed", "9", "--steps", "20"];
    let run = |extra: &[&str]| {
        let mut args = vec!["generate"];
        args.extend(base);
        args.extend(extra);
        let out = shapewords(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    };
    run(&[
        "--shape",
        p(&shape),
        "--params",
        p(&params),
        "--lambda",
        "0",
        "--out",
        p(&guided),
    ]);
    run(&["--plain", "--out", p(&plain)]);
    run(&[
        "--shape",
        p(&shape),
        "--params",
        p(&params),
        "--lambda",
        "1",
        "--out",
        p(&full),
    ]);
    assert_eq!(std::fs::read(&guided).unwrap(), std::fs::read(&plain).unwrap());
    assert_ne!(std::fs::read(&full).unwrap(), std::fs::read(&plain).unwrap());
}

#[test]
fn sweep_writes_one_image_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes(dir.path());
    let params = dir.path().join("params.bin");
    write_params(&params, 3);
    let out_dir = dir.path().join("sweep");
    let out = shapewords(&[
        "sweep",
        "--shape",
        p(&dir.path().join("table/box.xyz")),
        "--prompt",
        TEMPLATE,
        "--params",
        p(&params),
        "--steps",
        "10",
        "--lambdas",
        "0,0.5,1",
        "--out-dir",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 3);
    let out = shapewords(&[
        "sweep",
        "--shape",
        "x.xyz",
        "--prompt",
        TEMPLATE,
        "--lambdas",
        "0,2",
        "--out-dir",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn encode_shape_prints_token_matrix() {
    let dir = tempfile::tempdir().unwrap();
    write_shapes(dir.path());
    let out = shapewords(&["encode-shape", "--shape", p(&dir.path().join("chair/sphere.xyz"))]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"], 65);
    assert_eq!(v["cols"], 8);
    let cfg = dir.path().join("wide.conf");
    std::fs::write(&cfg, "[backend]\nshape_dim = 12\n").unwrap();
    let out = shapewords(&[
        "--config",
        p(&cfg),
        "encode-shape",
        "--shape",
        p(&dir.path().join("chair/sphere.xyz")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cols"], 12);
}

#[test]
fn dataset_train_and_closed_loop_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes");
    write_shapes(&shapes);
    let data = dir.path().join("data");
    let out = shapewords(&["build-dataset", "--shapes", p(&shapes), "--out", p(&data), "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = data.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 60);

    // the exported bank reproduces the same prompt assignment
    let again = dir.path().join("again");
    let bank = data.join("prompts.jsonl");
    let out = shapewords(&[
        "build-dataset",
        "--shapes-dir",
        p(&shapes),
        "--bank",
        p(&bank),
        "--out",
        p(&again),
        "--seed",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let prompts = |m: &Path| -> Vec<String> {
        std::fs::read_to_string(m)
            .unwrap()
            .lines()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["prompt"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(prompts(&manifest), prompts(&again.join("manifest.jsonl")));
    let clash = shapewords(&[
        "build-dataset",
        "--shapes",
        p(&shapes),
        "--bank",
        p(&bank),
        "--mediums",
        p(&bank),
        "--out",
        p(&again),
    ]);
    assert_eq!(code(&clash), 1);

    let report_dir = dir.path().join("report");
    let out = shapewords(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&report_dir),
        "--closed-loop",
        "--run-id",
        "closed",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let jsonl = std::fs::read_to_string(report_dir.join("report.jsonl")).unwrap();
    let run: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(run["meta"]["run_id"], "closed");
    assert_eq!(run["s_iou"], 1.0);
    assert_eq!(run["s_cd"], 0.0);
    assert!(std::fs::read_to_string(report_dir.join("report.txt"))
        .unwrap()
        .contains("closed"));

    let cfg = dir.path().join("train.conf");
    std::fs::write(&cfg, "[train]\nlr = 0.0001\nwarmup_steps = 2\nbatch_size = 2\n").unwrap();
    let params = dir.path().join("trained.bin");
    let log = dir.path().join("train.jsonl");
    let out = shapewords(&[
        "--config",
        p(&cfg),
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&params),
        "--max-steps",
        "4",
        "--log",
        p(&log),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 4);
    let png = dir.path().join("trained.png");
    let out = shapewords(&[
        "generate",
        "--shape",
        p(&shapes.join("chair/sphere.xyz")),
        "--prompt",
        TEMPLATE,
        "--params",
        p(&params),
        "--steps",
        "10",
        "--out",
        p(&png),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(png.is_file());
}
