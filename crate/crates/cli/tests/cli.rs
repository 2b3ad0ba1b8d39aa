use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fundus-guide"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "count = 48\ntest_count = 24\nmax_epochs = 2\nbatch_size = 16\n";

#[test]
fn every_subcommand_has_help_listing_its_flags() {
    let expect: &[(&str, &[&str])] = &[
        ("generate", &["--config", "--seed", "--set", "--out"]),
        ("regions", &["--od", "--fovea", "--size", "--height", "--out", "--overlay", "--image"]),
        ("masks", &["--od", "--fovea", "--regions", "--feature-size", "--out"]),
        ("train", &["--config", "--seed", "--set", "--data", "--out", "--history"]),
        ("eval", &["--data", "--checkpoint", "--split", "--out"]),
        ("compare", &["--config", "--seed", "--set", "--data", "--out"]),
        ("viz", &["--checkpoint", "--image", "--out", "--display-size"]),
        ("serve", &["--data", "--annotations", "--addr", "--assets"]),
        ("merge-annotations", &["--annotations", "--finding", "--min-marks", "--keep-partial", "--out"]),
    ];
    for (cmd, flags) in expect {
        let o = run(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd} --help failed");
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help does not list {f}:\n{text}");
        }
    }
    let top = stdout(&run(&["--help"]));
    for (cmd, _) in expect {
        assert!(top.contains(cmd), "top-level help lacks {cmd}");
    }
}

#[test]
fn regions_counts_cover_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("labels.png");
    let overlay = dir.path().join("overlay.png");
    let o = run(&[
        "regions", "--od", "200,256", "--fovea", "400,256", "--size", "512",
        "--out", out.to_str().unwrap(), "--overlay", overlay.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let total: u64 = v["counts"].as_object().unwrap().values().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(total, 512 * 512);
    let img = image::open(&out).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (512, 512));
    assert!(img.pixels().all(|p| (1..=8).contains(&p.0[0])));
    assert!(overlay.exists());
}

#[test]
fn coincident_landmarks_are_a_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l.png");
    let o = run(&["regions", "--od", "100,100", "--fovea", "100,100", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[contract]:"), "{}", stderr(&o));
}

#[test]
fn masks_prints_feature_grid() {
    let o = run(&[
        "masks", "--od", "20,32", "--fovea", "44,32", "--size", "64",
        "--regions", "3", "--feature-size", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["width"], 8);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().any(|r| r.as_str().unwrap().contains('1')));
    assert!(rows.iter().any(|r| r.as_str().unwrap().contains('0')));
}

#[test]
fn inadmissible_model_config_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    // 64 / 16 leaves a 4x4 grid, too small for dilation 4
    std::fs::write(&cfg, "downscale_factor = 16\nstage_count = 4\n").unwrap();
    let o = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", dir.path().to_str().unwrap(),
        "--out", dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("rate-fit invariant"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--set", "colour=blue", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "merge-annotations", "--annotations", dir.path().join("none.jsonl").to_str().unwrap(),
        "--finding", "hemorrhage",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
}

#[test]
fn bad_flag_is_a_contract_error() {
    let o = run(&["regions", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[contract]:"));
}

fn generate(dir: &Path, cfg: &Path) {
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn pipeline_generate_train_eval_viz_merge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    generate(&data, &cfg);
    let manifest = std::fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 72);

    let ckpt = dir.path().join("m.ckpt");
    let hist = dir.path().join("h.jsonl");
    let o = run(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(), "--history", hist.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("# effective config"));
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 2);

    let o = run(&[
        "eval", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["auroc", "sensitivity", "specificity", "threshold", "air_tp", "air_fn", "counts"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }

    let first = manifest.lines().next().unwrap();
    let entry: serde_json::Value = serde_json::from_str(first).unwrap();
    let img = data.join(entry["image"].as_str().unwrap());
    let overlay = dir.path().join("viz.png");
    let o = run(&[
        "viz", "--checkpoint", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap(),
        "--out", overlay.to_str().unwrap(), "--display-size", "128",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(image::open(&overlay).unwrap().to_rgb8().dimensions(), (128, 128));

    let o = run(&[
        "merge-annotations", "--annotations", data.join("annotations.jsonl").to_str().unwrap(),
        "--finding", "hemorrhage",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 72);
}

#[test]
fn compare_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(&[
                "compare", "--config", cfg.to_str().unwrap(), "--seed", "7",
                "--out", out.to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
            assert!(stdout(&o).contains("AIR (TP)"));
            out
        })
        .collect();
    for f in [
        "report.json", "report.txt", "guided.ckpt", "unguided.ckpt",
        "guided.history.jsonl", "unguided.history.jsonl", "config.toml",
    ] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let cfg_text = std::fs::read_to_string(outs[0].join("config.toml")).unwrap();
    assert!(cfg_text.contains("seed = 7"));
}
