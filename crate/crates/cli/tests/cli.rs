use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowdistill::config::RunConfig;
use flowdistill::FeatureTaps;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.net.width = 8;
    c.net.depth = 3;
    c.teacher.iterations = 40;
    c.teacher.batch = 32;
    c.synthetic.n = 128;
    c.synthetic.steps = 4;
    c.distill.batch = 16;
    c.distill.pretrain.iterations = 3;
    c.distill.pretrain.trajectory_pool = 64;
    c.distill.dmd.iterations = 2;
    c.distill.dmd.update_ratio = 2;
    c.distill.two_step.iterations = 2;
    c.distill.split.iterations = 2;
    c.adversarial.taps = FeatureTaps::new(vec![1, 2]);
    c.adversarial.t_star_levels = vec![0.5];
    c.eval.n = 200;
    c.eval.teacher_steps = 4;
    c.seeds = vec![0];
    c
}

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let mut cfg = tiny_config();
        cfg.output_dir = root.join("runs").display().to_string();
        let config = root.join("tiny.toml");
        fs::write(&config, cfg.to_toml_string()).unwrap();
        Self { _tmp: tmp, root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_flowdistill"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs a command expected to succeed and returns its run directory.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    }

    fn dir(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn teacher(&self) -> PathBuf {
        let d = self.ok(&["train-teacher", "--run-dir", &self.dir("teacher")]);
        d.join("teacher.ckpt")
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn sample_is_byte_identical_for_the_same_seed() {
    let env = Env::new();
    let teacher = env.teacher();
    let t = teacher.to_str().unwrap();
    let a = env.ok(&["sample", "--checkpoint", t, "--n", "50", "--seed", "3"]);
    let b = env.ok(&["sample", "--checkpoint", t, "--n", "50", "--seed", "3"]);
    assert_ne!(a, b);
    assert_eq!(fs::read(a.join("samples.csv")).unwrap(), fs::read(b.join("samples.csv")).unwrap());
    let c = env.ok(&["sample", "--checkpoint", t, "--n", "50", "--seed", "4"]);
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(c.join("samples.csv")).unwrap());
}

#[test]
fn run_directory_is_self_describing() {
    let env = Env::new();
    let d = env.ok(&["gen-data", "--n", "100", "--seed", "9"]);
    let name = d.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("gen-data-") && name.ends_with("-seed9"), "{name}");
    let cfg = RunConfig::from_toml_str(&fs::read_to_string(d.join("config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.net.width, 8);
    let m = manifest(&d);
    assert_eq!(m["command"], "gen-data");
    assert!(m["outputs"]["data.csv"].as_str().unwrap().len() == 64);
    assert!(!d.join(".lock").exists());
    assert_eq!(fs::read_to_string(d.join("data.csv")).unwrap().lines().count(), 101);
}

#[test]
fn rerun_into_the_same_directory_is_bit_identical() {
    let env = Env::new();
    let first = env.ok(&["gen-data", "--n", "64", "--run-dir", &env.dir("same")]);
    let before = fs::read(first.join("manifest.json")).unwrap();
    let second = env.ok(&["gen-data", "--n", "64", "--run-dir", &env.dir("same")]);
    assert_eq!(first, second);
    assert_eq!(before, fs::read(second.join("manifest.json")).unwrap());
}

#[test]
fn locked_directory_is_refused() {
    let env = Env::new();
    let dir = env.root.join("busy");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join(".lock"), "1\n").unwrap();
    let out = env.run(&["gen-data", "--run-dir", dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[locked]"));
}

#[test]
fn distill_eval_and_staging() {
    let env = Env::new();
    let teacher = env.teacher();
    let teacher_hash = manifest(&env.root.join("teacher"))["outputs"]["teacher.ckpt"].clone();
    let t = teacher.to_str().unwrap();

    // two-step without a four-step student
    let out = env.run(&["distill", "--teacher", t, "--target-steps", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[prerequisite]"));

    // a teacher checkpoint is not a four-step student either
    let out = env.run(&["distill", "--teacher", t, "--target-steps", "2", "--from", t]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[prerequisite]"));

    let four = env.ok(&["distill", "--teacher", t, "--no-timestep-sharing", "--run-dir", &env.dir("four")]);
    for f in ["student.ckpt", "dmd_log.csv", "pretrain_curve.csv", "synthetic.csv", "config.toml"] {
        assert!(four.join(f).exists(), "{f}");
    }
    let m = manifest(&four);
    assert_eq!(m["inputs"][t], teacher_hash);

    let eval = env.ok(&["eval", "--checkpoint", four.join("student.ckpt").to_str().unwrap()]);
    let metrics = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.lines().nth(2).unwrap().starts_with("dmd_4step"));

    let student = four.join("student.ckpt");
    let two = env.ok(&["distill", "--teacher", t, "--target-steps", "2", "--from", student.to_str().unwrap()]);
    let m = manifest(&two);
    assert!(m["outputs"]["two_step_log.csv"].is_string());

    // inputs are never modified
    assert_eq!(
        serde_json::Value::String(sha256_of(&teacher)),
        teacher_hash
    );
}

#[test]
fn split_ft_writes_pre_merge_student() {
    let env = Env::new();
    let teacher = env.teacher();
    let d = env.ok(&["distill", "--teacher", teacher.to_str().unwrap(), "--split-ft", "--no-adv"]);
    assert!(d.join("pre_merge.ckpt").exists());
    assert!(d.join("split_log.csv").exists());
}

#[test]
fn quantize_writes_checkpoint_and_tradeoff_row() {
    let env = Env::new();
    let teacher = env.teacher();
    let d = env.ok(&["quantize", "--checkpoint", teacher.to_str().unwrap(), "--bits", "8"]);
    assert!(d.join("quantized_8bit.ckpt").exists());
    let rows = fs::read_to_string(d.join("tradeoff.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let out = env.run(&["quantize", "--checkpoint", teacher.to_str().unwrap(), "--bits", "7"]);
    assert!(!out.status.success());
}

#[test]
fn config_errors_name_the_offending_key() {
    let env = Env::new();
    let bad = env.root.join("bad.toml");
    fs::write(&bad, "[distill.dmd]\nupdate_ration = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flowdistill"))
        .args(["--config", bad.to_str().unwrap(), "config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("distill.dmd.update_ration"), "{err}");
}

#[test]
fn checkpoint_with_wrong_shape_is_rejected() {
    let env = Env::new();
    let teacher = env.teacher();
    let mut cfg = tiny_config();
    cfg.net.width = 16;
    let other = env.root.join("wide.toml");
    fs::write(&other, cfg.to_toml_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flowdistill"))
        .args(["--config", other.to_str().unwrap(), "eval", "--checkpoint", teacher.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn printed_config_round_trips() {
    let out = Command::new(env!("CARGO_BIN_EXE_flowdistill"))
        .args(["--profile", "desk", "config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = RunConfig::from_toml_str(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::desk());
}

fn sha256_of(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}
