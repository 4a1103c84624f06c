use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvi::config::RunConfig;
use pvi::eval::MetricsReport;

fn pvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvi")).args(args).output().expect("spawn pvi")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const TOY: &str = r#"
name = "toy"
seed = 1

[target]
kind = "banana"

[kernel]
kind = "skip"
hidden = 16

[pvi]
k = 20
m = 12
l = 4
log_every = 5
free_energy_samples = 64

[eval]
n_samples = 400
n_proj = 20
mmd_samples = 60
n_perm = 99
"#;

fn run_toy(dir: &Path, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write_config(dir, "toy.toml", TOY);
    let out = dir.join("run");
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (pvi(&args), out)
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (out, run) = run_toy(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["theta.csv", "particles.csv", "trace.csv", "config.resolved"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join(".pvi.lock").exists());
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iter,elbo_est,grad_theta_norm,drift_norm_mean,wall_ms"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (oa, ra) = run_toy(a.path(), &["--deterministic"]);
    let (ob, rb) = run_toy(b.path(), &["--deterministic"]);
    assert_eq!((code(&oa), code(&ob)), (0, 0));
    for f in ["theta.csv", "particles.csv", "trace.csv"] {
        assert_eq!(
            std::fs::read(ra.join(f)).unwrap(),
            std::fs::read(rb.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_override_changes_particles() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ra) = run_toy(a.path(), &["--seed", "1"]);
    let (_, rb) = run_toy(b.path(), &["--seed", "2"]);
    assert_ne!(
        std::fs::read(ra.join("particles.csv")).unwrap(),
        std::fs::read(rb.join("particles.csv")).unwrap()
    );
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (out, run) = run_toy(dir.path(), &["--seed", "9"]);
    assert_eq!(code(&out), 0);
    let resolved = RunConfig::load(&run.join("config.resolved")).unwrap();
    assert_eq!(resolved.seed, 9);
    assert_eq!(resolved.out.as_deref(), Some(run.as_path()));
    assert_eq!(RunConfig::from_toml(&resolved.to_toml()).unwrap(), resolved);
}

#[test]
fn zero_iterations_keep_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k0.toml", &TOY.replace("k = 20", "k = 0"));
    let run = dir.path().join("run");
    let out = pvi(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert_eq!(std::fs::read_to_string(run.join("particles.csv")).unwrap().lines().count(), 13);
}

#[test]
fn eval_reads_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (out, run) = run_toy(dir.path(), &[]);
    assert_eq!(code(&out), 0);
    let out = pvi(&["eval", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("metric,value,n,seed"));
    let report = MetricsReport::read_csv(&run.join("metrics.csv")).unwrap();
    for m in [
        "sliced_w",
        "sliced_w_floor",
        "mmd_statistic",
        "mmd_p_value",
        "mmd_reject",
        "free_energy",
    ] {
        assert!(report.get(m).is_some_and(f64::is_finite), "{m}");
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "name = \"x\"\n[target]\nkind = \"nope\"\n");
    let out = pvi(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert_eq!(code(&pvi(&["run", "--config", "/nonexistent.toml"])), 2);
    assert_eq!(code(&pvi(&["frobnicate"])), 2);
}

#[test]
fn missing_dataset_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
name = "bnn"
[target]
kind = "bnn"
data = "absent.csv"
features = [0, 1]
response = 2
[kernel]
kind = "lskip_hetero"
d_z = 2
hidden = 8
"#;
    let cfg = write_config(dir.path(), "bnn.toml", body);
    let run = dir.path().join("run");
    let out = pvi(&["bnn", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
    assert!(!run.exists());
}

#[test]
fn divergence_exits_3_and_keeps_last_state() {
    let dir = tempfile::tempdir().unwrap();
    let body = TOY.replace("l = 4", "l = 4\nh_theta = 1e300\ntheta_precond = \"identity\"");
    let cfg = write_config(dir.path(), "div.toml", &body);
    let run = dir.path().join("run");
    let out = pvi(&["run", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let theta = std::fs::read_to_string(run.join("theta.csv")).unwrap();
    assert!(theta.lines().skip(1).all(|l| l.parse::<f64>().unwrap().is_finite()));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".pvi.lock"), "").unwrap();
    let (out, _) = run_toy(dir.path(), &[]);
    assert_eq!(code(&out), 2);
    assert!(!run.join("theta.csv").exists());
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = pvi(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let checks = stdout.lines().filter(|l| l.starts_with("ok")).count();
    assert!(checks >= 12, "{checks} checks");
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn corrupted_vjp_is_caught() {
    let out = pvi(&["gradcheck", "--corrupt-vjp", "lskip"]);
    assert_eq!(code(&out), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout
            .lines()
            .any(|l| l.starts_with("FAIL") && l.contains("kernel/lskip/vjp_theta")),
        "{stdout}"
    );
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            cfg.flow().unwrap();
            if cfg.target.data.is_none() {
                let ex = cfg.experiment().unwrap();
                cfg.kernel_spec(ex.target.dim()).unwrap();
            }
            n += 1;
        }
    }
    assert_eq!(n, 7);
}
