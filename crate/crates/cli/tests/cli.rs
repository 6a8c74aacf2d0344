use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use corridiff::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_corridiff"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn write_tiny_config(dir: &Path) {
    let mut c = RunConfig::default();
    c.grid.height = 32;
    c.grid.width = 32;
    c.grid.cell_size = 2.0;
    c.grid.ego_row = 24;
    c.grid.ego_col = 16;
    c.data.train_samples = 8;
    c.data.test_samples = 5;
    c.model.width = 4;
    c.diffusion.steps = 3;
    c.train.epochs = 2;
    c.train.batch_size = 4;
    fs::write(dir.join("tiny.toml"), c.to_toml()).unwrap();
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data", "--config", "tiny.toml", "--out", "data"],
    &["train", "--config", "tiny.toml", "--data", "data", "--out", "run"],
    &["eval", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/checkpoint_final.ckpt", "--out", "eval"],
    &["predict", "--config", "tiny.toml", "--data", "data", "--checkpoint", "run/checkpoint_final.ckpt", "--out", "pred", "--item", "2"],
    &["ablate", "--config", "tiny.toml", "--data", "data", "--axis", "samples", "--out", "ablate"],
    &["plot", "--input", "ablate/sweep_samples.csv", "--out", "plots"],
    &["plot", "--input", "pred/predictions.csv", "--item", "2", "--out", "plots"],
];

const ARTIFACTS: &[&str] = &[
    "data/train.bin",
    "data/test.bin",
    "data/manifest.toml",
    "run/checkpoint_final.ckpt",
    "run/checkpoint_best.ckpt",
    "run/train_log.csv",
    "run/manifest.toml",
    "eval/report.csv",
    "eval/summary.txt",
    "pred/predictions.csv",
    "ablate/sweep_samples.csv",
    "plots/samples_min_ade.svg",
    "plots/scene_2.svg",
];

#[test]
fn whole_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        write_tiny_config(d);
        for args in PIPELINE {
            ok(d, args);
        }
    }
    for f in ARTIFACTS {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
    let timing = fs::read_to_string(a.path().join("eval/timing.csv")).unwrap();
    let secs: Vec<f64> = timing.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(secs.len(), 5);
    assert!(secs.iter().all(|&s| s > 0.0));
    let scene = fs::read_to_string(a.path().join("plots/scene_2.svg")).unwrap();
    assert_eq!(scene.matches(r#"class="candidate""#).count(), 5);
}

#[test]
fn existing_outputs_need_force() {
    let d = tempfile::tempdir().unwrap();
    write_tiny_config(d.path());
    ok(d.path(), PIPELINE[0]);
    let first = fs::read(d.path().join("data/train.bin")).unwrap();
    let o = run(d.path(), PIPELINE[0]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let mut forced = PIPELINE[0].to_vec();
    forced.push("--force");
    ok(d.path(), &forced);
    assert_eq!(fs::read(d.path().join("data/train.bin")).unwrap(), first);
    forced.extend(["--seed", "99"]);
    ok(d.path(), &forced);
    assert_ne!(fs::read(d.path().join("data/train.bin")).unwrap(), first);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let text = ok(d.path(), &["default-config"]);
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
    fs::write(d.path().join("bad.toml"), text.replacen("seed = 7", "seed = 7\nseeds = 3", 1)).unwrap();
    let o = run(d.path(), &["gen-data", "--config", "bad.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds"));
}

#[test]
fn malformed_sweep_reports_line() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("s.csv"),
        "axis,value,config_hash,status,fde,min_ade,hit_rate,hausdorff\nsteps,5,x,ok,1,1,1,1\nsteps,10,x,ok,1,oops,1,1\n",
    )
    .unwrap();
    let o = run(d.path(), &["plot", "--input", "s.csv"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("s.csv:3:"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_sweep_checkpoints_are_listed() {
    let d = tempfile::tempdir().unwrap();
    write_tiny_config(d.path());
    ok(d.path(), PIPELINE[0]);
    let out = ok(d.path(), &["ablate", "--config", "tiny.toml", "--data", "data", "--axis", "steps", "--no-train", "--out", "ab"]);
    assert_eq!(out.matches("missing checkpoint").count(), 3);
    let o = run(d.path(), &["ablate", "--config", "tiny.toml", "--data", "data", "--axis", "width"]);
    assert!(!o.status.success());
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    write_tiny_config(d.path());
    ok(d.path(), PIPELINE[0]);
    ok(d.path(), PIPELINE[1]);
    let text = fs::read_to_string(d.path().join("tiny.toml")).unwrap();
    fs::write(d.path().join("wide.toml"), text.replace("width = 4", "width = 6")).unwrap();
    let o = run(
        d.path(),
        &["eval", "--config", "wide.toml", "--data", "data", "--checkpoint", "run/checkpoint_final.ckpt"],
    );
    assert!(!o.status.success());
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("den.down1.w: expected [6, 2, 3], found [4, 2, 3]"), "{msg}");
}
