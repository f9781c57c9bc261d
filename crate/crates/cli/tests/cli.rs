use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn mspred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mspred")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mspred(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny training run with `steps` steps, shared flags first.
fn train(dir: &Path, steps: u32, extra: &[&str]) -> Output {
    let (cfg, steps) = (smoke_config(), format!("optim.steps={steps}"));
    let mut args = vec!["train", "--quiet", "--config", s(&cfg), "--out", s(dir)];
    args.extend(["--set", &steps, "--set", "train.checkpoint_every=5", "--set", "train.validate_every=0"]);
    args.extend(extra);
    mspred(&args)
}

#[test]
fn generate_is_deterministic_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let out_a = ok(&["generate", "--seed", "3", "--n", "4", "--out", s(&a)]);
    let out_b = ok(&["generate", "--seed", "3", "--n", "4", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let digest = |o: &Output| String::from_utf8_lossy(&o.stdout).lines().find(|l| l.starts_with("sha256")).map(str::to_owned);
    assert!(digest(&out_a).is_some());
    assert_eq!(digest(&out_a), digest(&out_b));

    let again = mspred(&["generate", "--seed", "3", "--n", "4", "--out", s(&a)]);
    assert_eq!(code(&again), 2);
    ok(&["generate", "--seed", "3", "--n", "4", "--out", s(&a), "--force"]);
}

#[test]
fn short_sequences_name_the_required_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = mspred(&["generate", "--n", "1", "--length", "40", "--out", s(&dir.path().join("x.bin"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("57"));
}

#[test]
fn run_directory_layout_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (straight, split) = (dir.path().join("straight"), dir.path().join("split"));
    assert!(train(&straight, 10, &[]).status.success());
    for name in ["config.resolved", "loss.csv", "checkpoints/last.ckpt", "checkpoints/step_000005.ckpt", "plots/loss.svg"] {
        assert!(straight.join(name).exists(), "missing {name}");
    }
    assert!(straight.join("samples").is_dir());
    let log = fs::read_to_string(straight.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 11);

    assert!(train(&split, 5, &[]).status.success());
    assert!(train(&split, 10, &["--resume"]).status.success());
    assert_eq!(fs::read(straight.join("loss.csv")).unwrap(), fs::read(split.join("loss.csv")).unwrap());
    assert_eq!(
        fs::read(straight.join("checkpoints/last.ckpt")).unwrap(),
        fs::read(split.join("checkpoints/last.ckpt")).unwrap()
    );

    let changed = train(&split, 12, &["--resume", "--set", "model.hidden=4"]);
    assert_eq!(code(&changed), 2);
}

#[test]
fn eval_predict_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let data = dir.path().join("test.bin");
    assert!(train(&run, 3, &[]).status.success());
    let cfg = smoke_config();
    ok(&["generate", "--config", s(&cfg), "--n", "3", "--out", s(&data)]);

    let ckpt = run.join("checkpoints/last.ckpt");
    ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data)]);
    let report = fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("metric,horizon,value,n"));
    assert!(report.lines().any(|l| l.starts_with("mse,mean,")));

    let (b1, b2) = (dir.path().join("b1"), dir.path().join("b2"));
    for out in [&b1, &b2] {
        ok(&["eval", "--baseline", "copylast", "--dataset", s(&data), "--out", s(out)]);
    }
    assert_eq!(fs::read(b1.join("report.csv")).unwrap(), fs::read(b2.join("report.csv")).unwrap());

    let samples = dir.path().join("samples");
    ok(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--index", "2", "--out", s(&samples)]);
    assert!(samples.join("seq0002_grid.png").exists());
    assert!(samples.join("seq0002.gif").exists());
    let out = mspred(&["predict", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--index", "3", "--out", s(&samples)]);
    assert_eq!(code(&out), 2);

    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint at all, just some bytes padding it out past the header").unwrap();
    assert_eq!(code(&mspred(&["eval", "--checkpoint", s(&bogus), "--dataset", s(&data)])), 3);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(code(&mspred(&["eval", "--checkpoint", s(&missing), "--dataset", s(&data)])), 3);

    let mut corrupt = fs::read(&ckpt).unwrap();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    fs::write(&bogus, corrupt).unwrap();
    assert_eq!(code(&mspred(&["eval", "--checkpoint", s(&bogus), "--dataset", s(&data)])), 3);
}

#[test]
fn non_finite_loss_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir.path().join("run"), 3, &["--set", "optim.lr=1e300"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablation_tables_keep_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablate");
    let cfg = smoke_config();
    ok(&[
        "ablate", "--quiet", "--config", s(&cfg), "--set", "optim.steps=2", "--set", "data.test_n=2",
        "--set", "train.validate_every=0", "--rows", "5,1", "--out", s(&out),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["5", "1"]);
    assert!(out.join("ablation.md").exists());
    assert!(out.join("row5/report.csv").exists());

    let bad = mspred(&["ablate", "--config", s(&cfg), "--rows", "7", "--out", s(&out)]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn config_errors_exit_with_2() {
    let out = mspred(&["train", "--set", "model.no_such_key=3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.no_such_key"));
    assert_eq!(code(&mspred(&["train", "--set", "optim.lr=fast"])), 2);
}

#[test]
fn help_lists_configuration_keys() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["model.hidden", "optim.lr", "loss.lambda1", "data.sequence_length"] {
        assert!(text.contains(key), "help lacks {key}");
    }
}
