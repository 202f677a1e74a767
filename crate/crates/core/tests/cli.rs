use std::path::Path;
use std::process::{Command, Output};

fn svq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(path: &Path) {
    let out = svq(&["init-config", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(path).unwrap();
    let mut patched = String::new();
    for line in text.lines() {
        let key = line.split('=').next().unwrap().trim();
        let v = match key {
            "image_size" => Some("8"),
            "latent_size" => Some("2"),
            "channels" => Some("4"),
            "code_dim" => Some("4"),
            "k_image" => Some("8"),
            "k_semantic" => Some("4"),
            "disc_channels" => Some("4"),
            "width" => Some("8"),
            "layers" => Some("1"),
            "heads" => Some("2"),
            "ae_steps" => Some("4"),
            "ar_steps" => Some("3"),
            "batch_size" => Some("2"),
            "n_samples" => Some("6"),
            "n_eval" => Some("2"),
            _ => None,
        };
        match v {
            Some(v) => patched.push_str(&format!("{key} = {v}\n")),
            None => patched.push_str(&format!("{line}\n")),
        }
    }
    std::fs::write(path, patched).unwrap();
}

#[test]
fn usage_errors_exit_1_and_runtime_errors_exit_2() {
    assert_eq!(svq(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(svq(&["train-ae", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(svq(&["eval", "--run", "/nonexistent"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nlambda = -1\n").unwrap();
    let out = svq(&["train-ae", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    assert!(svq(&["--help"]).status.success());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    tiny_config(&cfg);
    let c = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();

    let ok = |args: &[&str]| {
        let out = svq(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["gen-data", "--config", c, "--out", d]);
    assert!(data.join("manifest.tsv").exists());
    ok(&["train-ae", "--config", c, "--data", d, "--out", r, "--variant", "svqgan"]);
    assert!(run.join("stage1.svqc").exists());
    ok(&["train-ar", "--run", r, "--data", d]);
    let tsv = ok(&["sample", "--run", r, "--data", d, "--top-k", "4"]);
    assert!(tsv.contains("FD-r"), "{tsv}");
    assert!(run.join("synthesis.ppm").exists());
    let eval = ok(&["eval", "--run", r, "--data", d]);
    assert!(eval.contains("mIOU") && eval.contains("NLL"), "{eval}");

    // a baseline run has two stage-1 checkpoints
    let base = dir.path().join("base");
    ok(&["train-ae", "--config", c, "--data", d, "--out", base.to_str().unwrap(), "--variant", "baseline-vqvae"]);
    assert!(base.join("stage1_image.svqc").exists() && base.join("stage1_semantic.svqc").exists());

    let cmp = dir.path().join("cmp");
    let out = ok(&["compare", "--config", c, "--data", d, "--seeds", "0,1", "--out", cmp.to_str().unwrap()]);
    assert!(out.contains("sVQGAN-T"), "{out}");
    assert!(cmp.join("compare.tsv").exists());
}
