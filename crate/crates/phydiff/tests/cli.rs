use std::fs;
use std::path::Path;

use phydiff::cli::main_with;
use phydiff::dry_run::dry_run;
use phydiff_core::config::{Config, Preset};

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("phydiff").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn dry_run_reports_shapes_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diag.json");
    let (code, out, err) = run(&["dry-run", "--preset", "toy", "--prompt", "ball drops", "--out", p(&diag)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("config fingerprint "), "{out}");
    assert!(out.contains("p_hat    [64, 32]") && out.contains("eps_hat  [12, 8, 8, 8]"), "{out}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    let r = dry_run("ball drops", &Config::preset(Preset::Toy), 0).unwrap();
    assert!(r.ok() && r.wall_time_s > 0.0 && r.t == 49);
    assert_eq!(r.shape("p_hat"), Some(&[64, 32][..]));
}

#[test]
fn validation_errors_exit_1() {
    let (code, _, err) = run(&["train", "--steps", "-5", "--out", "/nonexistent/never"]);
    assert_eq!(code, 1);
    assert!(err.contains("--steps"), "{err}");

    let (code, _, err) = run(&["generate", "--prompt", "x", "--out", "/nonexistent/never"]);
    assert_eq!(code, 1);
    assert!(err.contains("--checkpoint") && err.contains("train"), "{err}");

    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["dry-run", "--prompt", "x", "--preset", "huge"]).0, 1);
    assert_eq!(run(&["dry-run", "--prompt", "x", "--bogus-flag"]).0, 1);
    assert_eq!(run(&["--help"]).0, 0);
}

#[test]
fn bad_config_file_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"preset": "toy", "diffusion": {"beta_start": 0.0}}"#).unwrap();
    let (code, _, err) = run(&["dry-run", "--prompt", "x", "--config", p(&cfg)]);
    assert_eq!(code, 1);
    assert!(err.contains("beta_start"), "{err}");
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pvgk");
    let (code, _, _) = run(&["generate", "--checkpoint", p(&missing), "--prompt", "x", "--out", p(dir.path())]);
    assert_eq!(code, 2);
}

#[test]
fn precompute_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    let (code, out, err) = run(&["precompute", "--seeds", "0..4", "--out", p(&pre)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("wrote 4 samples"));
    assert_eq!(fs::read_dir(&pre).unwrap().count(), 1);

    let tr = dir.path().join("train");
    let shard = pre.join(phydiff::cli::SHARD_FILE);
    let (code, _, err) = run(&["train", "--steps", "2", "--data", p(&shard), "--out", p(&tr)]);
    assert_eq!(code, 0, "{err}");
    let ck = tr.join(phydiff::training::FINAL_CHECKPOINT);

    let vids = dir.path().join("videos");
    for (name, seed) in [("a", "1"), ("b", "1")] {
        let (code, _, err) = run(&[
            "generate", "--checkpoint", p(&ck), "--prompt", "slide scene", "--steps", "5", "--seed", seed, "--out",
            p(&vids.join(name)),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    // same argv -> same bytes
    for f in 0..8 {
        let a = fs::read(phydiff::video::frame_path(&vids.join("a"), f)).unwrap();
        let b = fs::read(phydiff::video::frame_path(&vids.join("b"), f)).unwrap();
        assert_eq!(a, b);
    }

    let report = dir.path().join("r.jsonl");
    let (code, _, err) = run(&["eval", "--videos", p(&vids), "--metrics", "flow,tlpips", "--report", p(&report)]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["embed_consistency"].is_null() && rows[0]["flow_mean_magnitude"].is_number());
    assert!(rows[0].get("videophy_sa").is_some());
    assert_eq!(rows[2]["summary"], true);

    let ab = dir.path().join("ab.jsonl");
    let (code, _, err) = run(&[
        "eval", "--checkpoint", p(&ck), "--prompt", "slide scene", "--ab-seeds", "3..5", "--steps", "4", "--report", p(&ab),
    ]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<serde_json::Value> =
        fs::read_to_string(&ab).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for pair in rows[..4].chunks(2) {
        assert_eq!(pair[0]["seed"], pair[1]["seed"]);
        assert_eq!((pair[0]["physics"].as_str(), pair[1]["physics"].as_str()), (Some("on"), Some("off")));
    }
}

#[test]
fn eval_of_empty_and_static_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let report = dir.path().join("r.jsonl");
    let (code, _, _) = run(&["eval", "--videos", p(&empty), "--report", p(&report)]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 1);

    let still = dir.path().join("still");
    let pixels: Vec<u8> = (0..3 * 4 * 16 * 16).map(|i| ((i * 37) % 251) as u8).collect();
    let mut frames = pixels.clone();
    // same picture in every frame
    let plane = 16 * 16;
    for c in 0..3 {
        for f in 0..4 {
            for k in 0..plane {
                frames[(c * 4 + f) * plane + k] = pixels[c * plane + k];
            }
        }
    }
    let v = phydiff::video::Video::new(frames, [3, 4, 16, 16]).unwrap();
    phydiff::video::write_video(&v, &still.join("v0")).unwrap();
    let (code, _, err) = run(&["eval", "--videos", p(&still), "--report", p(&report)]);
    assert_eq!(code, 0, "{err}");
    let row: serde_json::Value = serde_json::from_str(fs::read_to_string(&report).unwrap().lines().next().unwrap()).unwrap();
    assert!(row["flow_mean_magnitude"].as_f64().unwrap() < 1e-3);
    assert!(row["tlpips_mean"].as_f64().unwrap() < 1e-9);
}
