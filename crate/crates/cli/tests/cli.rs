use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clim::eval::palette;
use clim::image::Image;
use serde_json::Value;

const TINY: &str = r#"
precision = "f64"
canvas_size = 32
n_plain = 2
n_mosaic = 1
composed_groups = 2
similarity_pool = 16
steps = 4
eval_every = 2
log_every = 1
eval_limit = 8

[grid]
random = [2]

[data]
image_size = 32
train_size = 24
eval_size = 8

[vision]
depth = 1
width = 16
heads = 2
embed_dim = 8

[text]
depth = 1
width = 16
heads = 2
"#;

fn clim(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clim"))
        .args(args)
        .env("CLIM_RUN_ROOT", root.join("runs"))
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(clim(&["--help"], tmp.path()).status.code(), Some(0));
    assert_eq!(clim(&["frobnicate"], tmp.path()).status.code(), Some(1));
    assert_eq!(
        clim(&["validate-config", "--set", "no_such_key=1"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        clim(&["validate-config", "--set", "steps=-3"], tmp.path())
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing.toml");
    assert_eq!(
        clim(&["validate-config", "-c", s(&missing)], tmp.path()).status.code(),
        Some(1)
    );
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[vision]\ncolour = 3\n").unwrap();
    assert_eq!(
        clim(&["validate-config", "-c", s(&bad)], tmp.path()).status.code(),
        Some(1)
    );
    let nodata = tmp.path().join("nodata");
    assert_eq!(
        clim(&["train", "--data", s(&nodata)], tmp.path()).status.code(),
        Some(1)
    );
    assert!(
        !tmp.path().join("runs").exists(),
        "nothing is written before paths are validated"
    );
}

#[test]
fn validate_config_output_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = ok(&clim(
        &["validate-config", "-c", s(&cfg), "--set", "optim.lr=1e-3"],
        tmp.path(),
    ));
    assert!(first.contains("lr = 0.001"));
    let again = tmp.path().join("again.toml");
    fs::write(&again, &first).unwrap();
    let second = ok(&clim(&["validate-config", "-c", s(&again)], tmp.path()));
    assert_eq!(first, second);
}

#[test]
fn generate_data_is_deterministic_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&clim(&["generate-data", "-c", s(&cfg), "--out", s(&a)], tmp.path()));
    ok(&clim(&["generate-data", "-c", s(&cfg), "--out", s(&b)], tmp.path()));
    let manifest = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.json")).unwrap());

    let m: Value = serde_json::from_slice(&manifest).unwrap();
    for (split, key) in [("train", "train_count"), ("eval", "eval_count")] {
        let pngs = fs::read_dir(a.join(split))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(pngs as u64, m[key].as_u64().unwrap(), "{split}");
    }

    let sample0 = a.join("train").join("000000.png");
    let before = fs::read(&sample0).unwrap();
    fs::remove_dir_all(&a).unwrap();
    ok(&clim(&["generate-data", "-c", s(&cfg), "--out", s(&a)], tmp.path()));
    assert_eq!(before, fs::read(&sample0).unwrap());

    let other = clim(
        &["generate-data", "-c", s(&cfg), "--out", s(&a), "--set", "data_seed=9"],
        tmp.path(),
    );
    assert_eq!(other.status.code(), Some(1), "incompatible manifest is refused");
    ok(&clim(
        &[
            "generate-data",
            "-c",
            s(&cfg),
            "--out",
            s(&a),
            "--set",
            "data_seed=9",
            "--force",
        ],
        tmp.path(),
    ));
    assert_ne!(manifest, fs::read(a.join("manifest.json")).unwrap());
}

fn data_rows(csv: &str) -> Vec<u64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_resume_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&clim(&["generate-data", "-c", s(&cfg), "--out", s(&data)], tmp.path()));

    let zero = tmp.path().join("zero");
    ok(&clim(
        &[
            "train",
            "-c",
            s(&cfg),
            "--data",
            s(&data),
            "--steps",
            "0",
            "--run-dir",
            s(&zero),
        ],
        tmp.path(),
    ));
    assert!(zero.join("checkpoint.bin").is_file());
    assert!(!zero.join("metrics.csv").exists());

    let full = tmp.path().join("full");
    let summary = ok(&clim(
        &["train", "-c", s(&cfg), "--data", s(&data), "--run-dir", s(&full)],
        tmp.path(),
    ));
    let summary: Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["step"], 4);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    let again = tmp.path().join("again");
    ok(&clim(
        &["train", "-c", s(&cfg), "--data", s(&data), "--run-dir", s(&again)],
        tmp.path(),
    ));
    let metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
    assert_eq!(data_rows(&metrics), vec![1, 2, 3, 4]);

    let occupied = clim(
        &["train", "-c", s(&cfg), "--data", s(&data), "--run-dir", s(&full)],
        tmp.path(),
    );
    assert_eq!(occupied.status.code(), Some(1));

    let split = tmp.path().join("split");
    ok(&clim(
        &[
            "train",
            "-c",
            s(&cfg),
            "--data",
            s(&data),
            "--steps",
            "2",
            "--run-dir",
            s(&split),
        ],
        tmp.path(),
    ));
    ok(&clim(
        &["train", "--resume", s(&split), "--data", s(&data), "--steps", "4"],
        tmp.path(),
    ));
    let resumed = fs::read_to_string(split.join("metrics.csv")).unwrap();
    assert_eq!(data_rows(&resumed), vec![1, 2, 3, 4]);
    let ck_step = |dir: &Path| -> u64 {
        let summary = ok(&clim(
            &[
                "eval",
                "--checkpoint",
                s(&dir.join("checkpoint.bin")),
                "--mosaics",
                "0",
                "--limit",
                "2",
            ],
            dir,
        ));
        serde_json::from_str::<Value>(&summary).unwrap()["step"]
            .as_u64()
            .unwrap()
    };
    assert_eq!(ck_step(&split), 4);
    let back = clim(&["train", "--resume", s(&split), "--steps", "1"], tmp.path());
    assert_eq!(back.status.code(), Some(1));
}

#[test]
fn eval_heatmap_and_per_pixel_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&clim(
        &["train", "-c", s(&cfg), "--steps", "2", "--run-dir", s(&run)],
        tmp.path(),
    ));
    let ckpt = run.join("checkpoint.bin");

    let report: Value = serde_json::from_str(&ok(&clim(
        &["eval", "--checkpoint", s(&ckpt), "--mosaics", "10"],
        tmp.path(),
    )))
    .unwrap();
    assert_eq!(report["step"], 2);
    let all = &report["zero_shot"]["all"];
    assert!(all["top5"].as_f64().unwrap() >= all["top1"].as_f64().unwrap());
    assert!(run.join("eval-2.json").is_file());

    ok(&clim(
        &[
            "heatmap",
            "--checkpoint",
            s(&ckpt),
            "--sample",
            "0",
            "--text",
            "a red circle",
        ],
        tmp.path(),
    ));
    let hm: Value =
        serde_json::from_str(&fs::read_to_string(run.join("heatmap-sample0-a-red-circle.json")).unwrap()).unwrap();
    let (h, w) = (hm["h"].as_u64().unwrap(), hm["w"].as_u64().unwrap());
    assert_eq!((h, w), (4, 4));
    let values: Vec<f64> = hm["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let best = values.iter().cloned().fold(f64::MIN, f64::max);
    let (r, c) = (
        hm["argmax"]["row"].as_u64().unwrap(),
        hm["argmax"]["col"].as_u64().unwrap(),
    );
    assert_eq!(values[(r * w + c) as usize], best);
    let png = Image::load_png(run.join("heatmap-sample0-a-red-circle.png")).unwrap();
    assert_eq!((png.width(), png.height()), (32, 32));

    let unknown = clim(
        &[
            "heatmap",
            "--checkpoint",
            s(&ckpt),
            "--sample",
            "0",
            "--text",
            "a mauve blob",
        ],
        tmp.path(),
    );
    assert_eq!(unknown.status.code(), Some(1));
    let range = clim(
        &[
            "heatmap",
            "--checkpoint",
            s(&ckpt),
            "--sample",
            "99",
            "--text",
            "a red circle",
        ],
        tmp.path(),
    );
    assert_eq!(range.status.code(), Some(1));

    ok(&clim(
        &[
            "per-pixel",
            "--checkpoint",
            s(&ckpt),
            "--sample",
            "1",
            "--prompt",
            "a red circle",
        ],
        tmp.path(),
    ));
    let pp: Value = serde_json::from_str(&fs::read_to_string(run.join("per-pixel-sample1.json")).unwrap()).unwrap();
    assert!(pp["labels"].as_array().unwrap().iter().all(|l| l == 0));
    ok(&clim(
        &[
            "per-pixel",
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&run.join("heatmap-sample0-a-red-circle.png")),
        ],
        tmp.path(),
    ));
    let pp: Value =
        serde_json::from_str(&fs::read_to_string(run.join("per-pixel-heatmap-sample0-a-red-circle.json")).unwrap())
            .unwrap();
    assert!(pp["labels"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l.as_u64().unwrap() < 40));
}

#[test]
fn inspect_mosaic_geometry_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    for grid in ["2", "3", "4"] {
        let out = tmp.path().join(format!("m{grid}"));
        ok(&clim(
            &[
                "inspect-mosaic",
                "-c",
                s(&cfg),
                "--seed",
                "5",
                "--grid",
                grid,
                "--out-dir",
                s(&out),
                "--set",
                "composed_groups=3",
            ],
            tmp.path(),
        ));
        let png = Image::load_png(out.join("mosaic-seed5.png")).unwrap();
        assert_eq!((png.width(), png.height()), (32, 32));
        let boxes_path = out.join("mosaic-seed5.json");
        let stdout = ok(&clim(&["validate-boxes", s(&boxes_path)], tmp.path()));
        assert!(stdout.starts_with("ok"));

        let boxes: Value = serde_json::from_str(&fs::read_to_string(&boxes_path).unwrap()).unwrap();
        let regions = boxes["regions"].as_array().unwrap();
        let composed = boxes["composed"].as_array().unwrap();
        assert_eq!(composed.len(), 3);
        let coord = |b: &Value, k: &str| b[k].as_f64().unwrap();
        for c in composed {
            let mut union = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
            for m in c["regions"].as_array().unwrap() {
                let b = &regions[m.as_u64().unwrap() as usize]["bbox"];
                union = [
                    union[0].min(coord(b, "x0")),
                    union[1].min(coord(b, "y0")),
                    union[2].max(coord(b, "x1")),
                    union[3].max(coord(b, "y1")),
                ];
            }
            let b = &c["bbox"];
            assert_eq!(union, [coord(b, "x0"), coord(b, "y0"), coord(b, "x1"), coord(b, "y1")]);
        }
        // The last composed rectangle is drawn on top: its outline carries its color.
        let last = &composed[composed.len() - 1]["bbox"];
        let color = palette(composed.len())[composed.len() - 1];
        let (x0, y0) = (coord(last, "x0") as usize, coord(last, "y0") as usize);
        let (x1, y1) = (coord(last, "x1") as usize - 1, coord(last, "y1") as usize - 1);
        for (x, y) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1), ((x0 + x1) / 2, y0)] {
            let px = png.pixel(x, y);
            for ch in 0..3 {
                assert!((px[ch] - color[ch]).abs() <= 1.0 / 255.0 + 1e-9, "pixel ({x},{y})");
            }
        }

        let mut tampered = boxes.clone();
        tampered["regions"][0]["bbox"]["x1"] = Value::from(coord(&regions[0]["bbox"], "x1") + 1.0);
        let bad = out.join("tampered.json");
        fs::write(&bad, serde_json::to_string(&tampered).unwrap()).unwrap();
        assert_eq!(clim(&["validate-boxes", s(&bad)], tmp.path()).status.code(), Some(2));
    }
}

#[test]
fn run_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    ok(&clim(&["inspect-mosaic", "-c", s(&cfg)], tmp.path()));
    let runs: Vec<_> = fs::read_dir(tmp.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name().into_string().unwrap();
    let (hash, secs) = name.split_once('-').unwrap();
    assert_eq!(hash.len(), 12);
    assert!(secs.parse::<u64>().is_ok());
}
