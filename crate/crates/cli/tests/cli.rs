use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn disth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disth"))
        .args(args)
        .env("DISTH_NUM_WORKERS", "1")
        .output()
        .expect("spawn disth")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, v: serde_json::Value) {
    fs::write(path, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(disth(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(disth(&[]).status.code(), Some(2));
    let both = disth(&[
        "harmonize", "--checkpoint", "k", "--input", "a.png", "--target", "b.png", "--metadata", "m.json", "--out", "o.png",
    ]);
    assert_eq!(both.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&both.stderr).contains("cannot be used with"));
    let neither = disth(&["harmonize", "--checkpoint", "k", "--input", "a.png", "--out", "o.png"]);
    assert_eq!(neither.status.code(), Some(2));
    assert_eq!(disth(&["eval-matrix", "--checkpoint", "k", "--data", "d", "--guidance", "audio", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let out = disth(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "pretrain-clip", "train", "harmonize", "eval-matrix", "ablate", "export-beta", "clip-eval"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let h = String::from_utf8_lossy(&disth(&["harmonize", "--help"]).stdout).into_owned();
    for flag in ["--checkpoint", "--input", "--target", "--metadata", "--out"] {
        assert!(h.contains(flag), "{flag} missing from harmonize help");
    }
}

#[test]
fn missing_inputs_exit_1_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = disth(&["clip-eval", "--clip", s(&missing.join("enc.ckpt")), "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
    let bad_workers = Command::new(env!("CARGO_BIN_EXE_disth"))
        .args(["gen-data", "--out", s(&dir.path().join("d"))])
        .env("DISTH_NUM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_workers.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.json");
    write_json(&cfg, serde_json::json!({ "n_anatomies": 4, "height": 16, "width": 16 }));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = disth(&["gen-data", "--config", s(&cfg), "--out", s(out), "--seed", "3"]);
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
    let c = dir.path().join("c");
    disth(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]);
    assert_ne!(ma, fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write_json(&p("data.json"), serde_json::json!({ "n_anatomies": 6, "height": 32, "width": 32 }));
    write_json(
        &p("clip.json"),
        serde_json::json!({ "image_height": 32, "image_width": 32, "steps": 3, "batch_size": 8 }),
    );
    write_json(
        &p("train.json"),
        serde_json::json!({
            "batch_size": 2,
            "max_steps": 2,
            "checkpoint_every": 1,
            "model": { "mapper": { "base_channels": 4 }, "decoder": { "base_channels": 4 } }
        }),
    );
    let ok = |args: &[&str]| {
        let r = disth(args);
        assert_eq!(r.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        String::from_utf8_lossy(&r.stdout).into_owned()
    };
    ok(&["gen-data", "--config", s(&p("data.json")), "--out", s(&p("data"))]);
    ok(&["pretrain-clip", "--data", s(&p("data")), "--config", s(&p("clip.json")), "--out", s(&p("clip"))]);
    assert!(p("clip/encoders.ckpt").exists() && p("clip/config.json").exists());
    let report = ok(&["clip-eval", "--clip", s(&p("clip")), "--data", s(&p("data"))]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(report["top1_accuracy"].as_f64().unwrap() >= 0.0);
    ok(&[
        "train", "--data", s(&p("data")), "--clip", s(&p("clip")), "--config", s(&p("train.json")), "--out", s(&p("run")),
    ]);
    for f in ["model.ckpt", "last.ckpt", "losses.csv", "config.json"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(p("run/losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(p("data/manifest.json")).unwrap()).unwrap();
    let samples = manifest["samples"].as_array().unwrap();
    let src = p("data").join(samples[0]["image"].as_str().unwrap());
    let tgt = p("data").join(samples[1]["image"].as_str().unwrap());
    let meta = p("data").join(samples[1]["metadata"].as_str().unwrap());
    ok(&["harmonize", "--checkpoint", s(&p("run")), "--input", s(&src), "--metadata", s(&meta), "--out", s(&p("out/text.png"))]);
    ok(&["harmonize", "--checkpoint", s(&p("run/model.ckpt")), "--input", s(&src), "--target", s(&tgt), "--out", s(&p("out/img.png"))]);
    assert!(p("out/text.png").exists() && p("out/img.png").exists());

    ok(&["eval-matrix", "--checkpoint", s(&p("run")), "--data", s(&p("data")), "--guidance", "text", "--out", s(&p("eval"))]);
    for f in ["matrix_psnr.csv", "matrix_ssim.csv", "metrics.csv", "matrix_psnr.png", "matrix_ssim.png", "config.json"] {
        assert!(p("eval").join(f).exists(), "{f}");
    }
    assert!(p("eval/baseline/matrix_psnr.csv").exists());

    ok(&["export-beta", "--checkpoint", s(&p("run")), "--input", s(&src), "--out", s(&p("beta"))]);
    for f in ["beta.f32", "beta.json", "beta.png"] {
        assert!(p("beta").join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(p("beta/beta.json")).unwrap()).unwrap();
    let shape: Vec<usize> = serde_json::from_value(meta["shape"].clone()).unwrap();
    let n: usize = shape.iter().product();
    assert_eq!(fs::metadata(p("beta/beta.f32")).unwrap().len() as usize, 4 * n);

    // wrong-size input is a runtime error, not a crash
    let small = p("data.json");
    let r = disth(&["harmonize", "--checkpoint", s(&p("run")), "--input", s(&small), "--target", s(&tgt), "--out", s(&p("x.png"))]);
    assert_eq!(r.status.code(), Some(1));
}
