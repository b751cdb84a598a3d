use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnn")).args(args).output().unwrap()
}

fn write_config(dir: &Path, method: &str, extra: &str) -> PathBuf {
    let runs = if extra.contains("n_runs") { "" } else { "n_runs = 1\n" };
    let text = format!(
        "method = {method}\nseed = 21\noutput.dir = {}\n\
         data.synthetic.n_per_class = 40\ndata.synthetic.image_size = 8\n\
         energy.sets = noise\nenergy.noise.n = 30\n{runs}{extra}",
        dir.join("out").display()
    );
    let path = dir.join(format!("{method}.cfg"));
    fs::write(&path, text).unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            found.extend(csv_files(&path));
        } else if path.extension().is_some_and(|e| e == "csv") {
            found.push(path);
        }
    }
    found
}

const VI: &str = "method.vi.epochs = 3\nmethod.vi.samples = 20\nmethod.vi.prior_std = 1\n";

#[test]
fn evaluate_writes_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "vi", VI);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = bnn(&["evaluate", "--config", cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["run_00/checkpoint.bin", "run_00/predictive.csv", "run_00/metrics.csv", "run_00/calibration.csv", "aggregate.csv"] {
        assert!(a.join(file).is_file(), "missing {file}");
    }
    let out = bnn(&["evaluate", "--config", cfg, "--out", b.to_str().unwrap(), "--workers", "2"]);
    assert!(out.status.success());
    for file in ["aggregate.csv", "run_00/metrics.csv", "run_00/predictive.csv"] {
        assert_eq!(fs::read_to_string(a.join(file)).unwrap(), fs::read_to_string(b.join(file)).unwrap(), "{file} differs");
    }

    let out = bnn(&["energy", "--config", cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let energy = fs::read_to_string(a.join("energy.csv")).unwrap();
    assert_eq!(energy.lines().filter(|l| l.contains(",noise,")).count(), 30);

    let files = csv_files(&a);
    assert!(files.len() >= 8);
    for file in files {
        let text = fs::read_to_string(&file).unwrap();
        assert!(text.starts_with("# bnn "), "{} lacks a provenance line", file.display());
        assert!(text.lines().next().unwrap().contains("seed="));
    }
}

#[test]
fn fit_then_predict_reuses_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "map", "method.map.epochs = 2\n");
    let cfg = cfg.to_str().unwrap();
    let out_dir = dir.path().join("o");
    let out_dir = out_dir.to_str().unwrap();
    let out = bnn(&["predict", "--config", cfg, "--out", out_dir]);
    assert_eq!(out.status.code(), Some(3), "predict without checkpoints");
    assert!(bnn(&["train-map", "--config", cfg, "--out", out_dir]).status.success());
    let ckpt = fs::read(Path::new(out_dir).join("run_00/checkpoint.bin")).unwrap();
    let out = bnn(&["predict", "--config", cfg, "--out", out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(out_dir).join("run_00/predictive.csv").is_file());
    assert_eq!(fs::read(Path::new(out_dir).join("run_00/checkpoint.bin")).unwrap(), ckpt);
}

#[test]
fn hmc_chains_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "n_runs = 2\nmethod.hmc.init = prior\nmethod.hmc.total_steps = 20\nmethod.hmc.thin = 2\nmethod.hmc.leapfrog_steps = 3\n\
                 method.hmc.step_size = 1e-3\nmethod.hmc.prior_std = 1\nmethod.hmc.monitor_every = 5\n";
    let cfg = write_config(dir.path(), "hmc", extra);
    let cfg = cfg.to_str().unwrap();
    let out_dir = dir.path().join("h");
    let out_dir = out_dir.to_str().unwrap();
    let out = bnn(&["run-hmc", "--config", cfg, "--out", out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bnn(&["diagnose", "--config", cfg, "--out", out_dir]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(Path::new(out_dir).join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2 + 2 * 4);
    assert!(Path::new(out_dir).join("rhat.csv").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "vi", "method.vi.epochz = 3\n");
    assert_eq!(bnn(&["evaluate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("nope.cfg");
    assert_eq!(bnn(&["evaluate", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    let map = write_config(dir.path(), "map", "");
    assert_eq!(bnn(&["run-hmc", "--config", map.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(bnn(&["evaluate", "--config", "../../configs/hmc_mirabest.cfg"]).status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}
