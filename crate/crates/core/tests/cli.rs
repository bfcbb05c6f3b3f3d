use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stagan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagan")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_synthesize() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    ok(&stagan(&["gen-data", "--out", p(&data), "--clips", "2", "--test-clips", "1", "--frames", "3", "--image-size", "32", "--seed", "4"]));
    assert!(data.join("manifest.json").is_file());

    let config = tmp.path().join("config.json");
    let mut cfg = stagan::trainkit::TrainConfig { clip_length: 3, ..stagan::trainkit::TrainConfig::desk() };
    cfg.set_image_size(32);
    cfg.write(&config).unwrap();
    let stdout = ok(&stagan(&[
        "train", "--config", p(&config), "--data", p(&data), "--steps", "2", "--batch-size", "1", "--out", p(&ckpt), "--checkpoint-every", "1",
        "--seed", "4",
    ]));
    assert!(stdout.contains("trained 2 steps"), "{stdout}");
    for dir in ["step_000001", "final"] {
        assert!(ckpt.join(dir).join("manifest.json").is_file(), "missing {dir}");
    }
    // the last step is only written as `final`
    assert!(!ckpt.join("step_000002").exists());
    let log = fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["step"], 2);
    assert!(lines[0]["reconstruction"].as_f64().unwrap() > 0.0);

    let report = tmp.path().join("report.json");
    let final_dir = ckpt.join("final");
    let stdout = ok(&stagan(&["eval", "--checkpoint", p(&final_dir), "--data", p(&data), "--json", p(&report)]));
    assert!(stdout.contains("SSIM"), "{stdout}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["frames"], 3);
    assert!(r["ssim"].as_f64().unwrap().is_finite());

    let clip = fs::read_dir(data.join("test")).unwrap().next().unwrap().unwrap().path();
    let out = tmp.path().join("synth");
    ok(&stagan(&["synth", "--checkpoint", p(&final_dir), "--input", p(&clip), "--out", p(&out), "--attention"]));
    assert!(out.join("frame_0002.png").is_file());
    assert_eq!(fs::read_dir(out.join("attention")).unwrap().count(), 12);

    // the full checkpoint holds parameters a spatial-only model does not have
    let spatial = stagan(&["synth", "--checkpoint", p(&final_dir), "--input", p(&clip), "--out", p(&out), "--ablation", "A"]);
    assert_eq!(spatial.status.code(), Some(2), "{}", String::from_utf8_lossy(&spatial.stderr));
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_ablation = stagan(&["gen-data", "--out", p(tmp.path()), "--ablation", "Q"]);
    assert_eq!(bad_ablation.status.code(), Some(1));
    assert_eq!(stagan(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(stagan(&["gen-data", "--out", p(tmp.path()), "--image-size", "8"]).status.code(), Some(1));
    assert_eq!(stagan(&["--help"]).status.code(), Some(0));

    let missing = stagan(&["train", "--data", p(&tmp.path().join("nothing")), "--steps", "1", "--out", p(&tmp.path().join("c"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());
    let no_ckpt = stagan(&["eval", "--checkpoint", p(&tmp.path().join("none")), "--data", p(tmp.path())]);
    assert_eq!(no_ckpt.status.code(), Some(2));
}
