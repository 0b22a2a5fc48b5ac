use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdnet::config::{ExperimentConfig, RunManifest};

const TOY: &str = "\
[model]
arch = mlp
channels = 24,24
blocks = 1,1
downsample = false,false
dtype = f64

[data]
source = synthetic
n_samples = 150
num_classes = 3
noise = 0.5
shape = 4

[train]
epochs = 6
batch_size = 16
lr = 0.05
augment = none
checkpoint_every = 3
";

fn sdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdnet")).args(args).output().unwrap()
}

fn toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.cfg");
    std::fs::write(&path, TOY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_agrees_with_final_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = dir.path().join("run");
    let out = sdnet(&["train", "--config", s(&cfg), "--out", s(&run), "--set", "train.seed=4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.cfg", "metrics.csv", "final.sdck", "epoch_0003.sdck"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest = RunManifest::parse(&std::fs::read_to_string(run.join("manifest.cfg")).unwrap()).unwrap();
    assert_eq!(manifest.config.train.seed, 4);
    assert!(manifest.finished.is_some());

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_test: Vec<&str> = metrics
        .lines()
        .filter(|l| l.starts_with("6,2,test,"))
        .collect();
    assert_eq!(last_test.len(), 1);
    let recorded: f64 = last_test[0].split(',').nth(3).unwrap().parse().unwrap();

    let eval = sdnet(&["eval", "--run", s(&run), "--exit", "2"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let text = String::from_utf8(eval.stdout).unwrap();
    let line = text.lines().find(|l| l.starts_with("2,test,")).unwrap();
    let evaluated: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(evaluated, recorded);

    // An existing run directory is never overwritten.
    let again = sdnet(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn manifest_rerun_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    let out = sdnet(&["train", "--config", s(&cfg), "--out", s(&first), "--set", "train.regime=dsn"]);
    assert!(out.status.success());
    let out = sdnet(&["train", "--config", s(&first.join("manifest.cfg")), "--out", s(&second)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(first.join("metrics.csv")).unwrap();
    let b = std::fs::read(second.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(first.join("final.sdck")).unwrap(),
        std::fs::read(second.join("final.sdck")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let out = sdnet(&["train", "--config", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));

    let cfg = toy_config(dir.path());
    let out = sdnet(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("r")),
        "--set",
        "foo.bar=1",
        "--set",
        "distill.alpha=2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("foo.bar") && err.contains("distill.alpha"), "{err}");
    assert!(!dir.path().join("r").exists());

    let out = sdnet(&["eval", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let out = sdnet(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let ck = dir.path().join("broken.sdck");
    std::fs::write(&ck, b"SDCK\x01\x00\x00\x00").unwrap();
    let out = sdnet(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analysis_commands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = dir.path().join("run");
    assert!(sdnet(&["train", "--config", s(&cfg), "--out", s(&run)]).status.success());
    let out_dir = dir.path().join("analysis");
    let cases: [(&[&str], &str, &str); 5] = [
        (&["flops"], "flops.csv", "exit,macs,params,ratio"),
        (&["probe-noise"], "noise_probe.csv", "sigma,trial,accuracy,loss"),
        (&["grad-stats"], "grad_stats.csv", "layer,depth_index,mean_abs_grad"),
        (&["separability"], "separability.csv", "exit,sse,ssb,ratio,accuracy"),
        (&["pca-export", "--exit", "1"], "pca_exit1.csv", "sample,label,pc1,pc2"),
    ];
    for (cmd, file, header) in cases {
        let mut args = cmd.to_vec();
        args.extend(["--run", s(&run), "--out", s(&out_dir)]);
        if cmd[0] == "flops" {
            args = vec!["flops", "--config", s(&cfg), "--out", s(&out_dir)];
        }
        let out = sdnet(&args);
        assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(out_dir.join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
    let again = sdnet(&["flops", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn config_round_trips_through_text() {
    let cfg = ExperimentConfig::parse(TOY).unwrap();
    assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
}
