use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use earseg_core::dataio::save_generic;
use earseg_core::nn::{Module, Slot};
use earseg_core::{init_params, synth_vessels, Checkpoint, TrainConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn earseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earseg"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("EARSEG_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_data(dir: &Path, n: usize) {
    let o = earseg(dir, &["synth", "--out", "data", "--count", &n.to_string(), "--size", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const FAST: &[&str] = &["--epochs", "1"];

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--data", "data", "--out", "run"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn bad_dataset_path_exits_2_and_names_it() {
    let tmp = TempDir::new().unwrap();
    let o = earseg(tmp.path(), &["train", "--data", "no/such/dir", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/dir"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_keeps_initial_weights() {
    let tmp = TempDir::new().unwrap();
    synth_data(tmp.path(), 4);
    let o = earseg(tmp.path(), &[&["train"][..], &train_args(&["--epochs", "0", "--seed", "5"])].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = Checkpoint::load(&tmp.path().join("run/checkpoints/stage1/0.ckpt")).unwrap();
    let mut init = init_params(5, TrainConfig::default().backbone).unwrap();
    let saved = ckpt.tensors_with_prefix("backbone");
    let mut compared = 0;
    init.visit("backbone", &mut |name, slot| {
        let value = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.clone(),
        };
        assert_eq!(saved[name], value, "{name}");
        compared += 1;
    });
    assert_eq!(compared, saved.len());
}

#[test]
fn train_refine_evaluate_pipeline() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_data(dir, 4);

    let o = earseg(dir, &[&["train"][..], &train_args(FAST)].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("run/checkpoints/stage1/1.ckpt").is_file());
    assert!(dir.join("run/config.toml").is_file());
    let log = fs::read_to_string(dir.join("run/logs/train.csv")).unwrap();
    assert!(log.starts_with("step,lce,lhm,lea,total\n"));

    let o = earseg(dir, &[&["refine"][..], &train_args(FAST)].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mask generation: 4 forward passes"), "{}", stdout(&o));
    let ems = fs::read_dir(dir.join("run/cache/errormaps")).unwrap().count();
    assert_eq!(ems, 5, "four maps plus the index");
    assert!(dir.join("run/checkpoints/stage2/1.ckpt").is_file());

    let o = earseg(dir, &[&["refine"][..], &train_args(FAST)].concat());
    assert!(o.status.success());
    assert!(stdout(&o).contains("mask generation: 0 forward passes (cache hit)"), "{}", stdout(&o));

    let o = earseg(dir, &[&["evaluate"][..], &train_args(&[])].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ACC"), "{}", stdout(&o));
    let o = earseg(
        dir,
        &[&["evaluate"][..], &train_args(&["--checkpoint", "run/checkpoints/stage1/1.ckpt"])].concat(),
    );
    assert!(o.status.success());
    let s1: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/reports/stage1.json")).unwrap()).unwrap();
    let s2: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/reports/stage2.json")).unwrap()).unwrap();
    assert_eq!(s1["fused"], false);
    assert_eq!(s2["fused"], true);
    assert_eq!(fs::read_dir(dir.join("run/reports/overlays/stage2")).unwrap().count(), 4);
    let csv = fs::read_to_string(dir.join("run/reports/stage1.csv")).unwrap();
    assert!(csv.starts_with("id,tp,tn,fp,fn,acc,sp,se,miou,miou_percent\n"));

    let o = earseg(dir, &[&["predict"][..], &train_args(&[])].concat());
    assert!(o.status.success());
    assert_eq!(fs::read_dir(dir.join("run/predictions")).unwrap().count(), 4);
}

#[test]
fn cache_dir_can_be_overridden() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_data(dir, 2);
    assert!(earseg(dir, &[&["train"][..], &train_args(FAST)].concat()).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_earseg"))
        .current_dir(dir)
        .args([&["refine"][..], &train_args(FAST)].concat())
        .env("RUST_LOG", "warn")
        .env("EARSEG_CACHE_DIR", dir.join("shared_cache"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("shared_cache/masks/index.json").is_file());
    assert!(!dir.join("run/cache").exists());
}

#[test]
fn refine_without_stage1_exits_2() {
    let tmp = TempDir::new().unwrap();
    synth_data(tmp.path(), 2);
    let o = earseg(tmp.path(), &[&["refine"][..], &train_args(FAST)].concat());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_exits_3() {
    let tmp = TempDir::new().unwrap();
    synth_data(tmp.path(), 2);
    fs::write(tmp.path().join("bad.ckpt"), b"EARSEGCK\x01\x00").unwrap();
    let o = earseg(tmp.path(), &[&["refine"][..], &train_args(&["--checkpoint", "bad.ckpt"])].concat());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checkpoint parse error"), "{}", stderr(&o));
}

#[test]
fn evaluate_without_attention_weights_and_fuse_is_state_error() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_data(dir, 2);
    assert!(earseg(dir, &[&["train"][..], &train_args(FAST)].concat()).status.success());
    // A stage-1 checkpoint silently evaluates unfused; the library call is the strict one.
    let ckpt = Checkpoint::load(&dir.join("run/checkpoints/stage1/1.ckpt")).unwrap();
    let data = earseg_core::load_dataset(&dir.join("data"), earseg_core::Layout::Generic).unwrap();
    let opts = earseg_core::EvalOptions {
        fuse: true,
        ..Default::default()
    };
    assert!(matches!(
        earseg_core::evaluate(&ckpt, &data, &opts),
        Err(earseg_core::Error::MissingAttentionWeights)
    ));
}

#[test]
fn no_fov_flag_is_reported() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let mut samples = synth_vessels(2, 32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for s in &mut samples {
        let mut fov = Array2::zeros((32, 32));
        fov.slice_mut(ndarray::s![4..28, 4..28]).fill(1u8);
        s.fov = Some(fov);
    }
    save_generic(&dir.join("data"), &samples).unwrap();
    assert!(earseg(dir, &[&["train"][..], &train_args(FAST)].concat()).status.success());

    let read = || -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(dir.join("run/reports/stage1.json")).unwrap()).unwrap()
    };
    assert!(earseg(dir, &[&["evaluate"][..], &train_args(&[])].concat()).status.success());
    let with_fov = read();
    assert_eq!(with_fov["fov_restricted"], true);
    let counted = |v: &serde_json::Value| {
        let c = &v["aggregate"]["counts"];
        ["tp", "tn", "fp", "fn"].iter().map(|k| c[k].as_u64().unwrap()).sum::<u64>()
    };
    assert_eq!(counted(&with_fov), 2 * 24 * 24);

    assert!(earseg(dir, &[&["evaluate"][..], &train_args(&["--no-fov"])].concat()).status.success());
    let all = read();
    assert_eq!(all["fov_restricted"], false);
    assert_eq!(counted(&all), 2 * 32 * 32);
}

#[test]
fn folds_flag_runs_cross_validation() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_data(dir, 4);
    let cfg = "stage1_epochs = 1\nstage2_epochs = 1\n[backbone]\nfeature_channels = 4\n";
    fs::write(dir.join("fast.toml"), cfg).unwrap();
    let o = earseg(dir, &[&["evaluate"][..], &train_args(&["--folds", "2", "--config", "fast.toml"])].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("run/reports/crossval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 2 * 2 + 2);
    assert!(rows[rows.len() - 1].starts_with("mean,refined,"));

    let o = earseg(dir, &[&["crossval"][..], &train_args(&["--folds", "5", "--config", "fast.toml"])].concat());
    assert_eq!(o.status.code(), Some(2), "k > n must be an input error");
}

#[test]
fn rerun_from_snapshot_is_identical() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth_data(dir, 2);
    let first = earseg(dir, &[&["train"][..], &train_args(&["--epochs", "2", "--seed", "9"])].concat());
    assert!(first.status.success());
    let a = fs::read(dir.join("run/checkpoints/stage1/2.ckpt")).unwrap();
    fs::copy(dir.join("run/run_train.toml"), dir.join("snapshot.toml")).unwrap();
    fs::remove_dir_all(dir.join("run")).unwrap();
    let second = earseg(dir, &[&["train"][..], &train_args(&["--config", "snapshot.toml"])].concat());
    assert!(second.status.success(), "{}", stderr(&second));
    let b = fs::read(dir.join("run/checkpoints/stage1/2.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_dataset_exits_2() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir_all(tmp.path().join("data/images")).unwrap();
    fs::create_dir_all(tmp.path().join("data/gt")).unwrap();
    let o = earseg(tmp.path(), &[&["train"][..], &train_args(FAST)].concat());
    assert_eq!(o.status.code(), Some(2));
}
