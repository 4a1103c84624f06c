//! The `pvi` command line: run, evaluate, grad-check and BNN experiments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, TargetKind};
use crate::error::{PviError, Result};
use crate::estimators::estimate_free_energy;
use crate::eval::{
    compare_moments, langevin_oracle, mmd_permutation_test, moments, predictive_rmse, sliced_wasserstein, MetricsReport, Provenance,
    SampleSet,
};
use crate::flow::{self, FlowState, MetricsTrace};
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::kernels::KernelSpec;
use crate::numerics::{Matrix, Rng};
use crate::sid::{read_matrix_csv, write_matrix_csv, ParticleCloud, SidModel};
use crate::targets::BnnRegression;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pvi", version, about = "Particle variational inference experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint directory.
    Run(RunArgs),
    /// Compare a checkpoint against ground truth and write metrics.csv.
    Eval(RunArgs),
    /// Finite-difference checks of all analytic derivatives.
    Gradcheck(GradcheckArgs),
    /// Train on a BNN regression target and report test RMSE.
    Bnn(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML). For `eval` defaults to the run's config.resolved.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write byte-identical outputs for identical inputs.
    #[arg(long)]
    pub deterministic: bool,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report as CSV into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub corrupt_vjp: Option<String>,
}

pub fn exit_code(e: &PviError) -> i32 {
    match e {
        PviError::Divergence { .. } | PviError::Estimator { .. } | PviError::NonFinite(_) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a, false),
        Command::Bnn(a) => cmd_run(&a, true),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exclusive marker file removed when dropped.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".pvi.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PviError::Config(format!(
                "{} is in use by another pvi process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(PviError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_config(a: &RunArgs, fallback_dir: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let path = match (&a.config, fallback_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("config.resolved"),
        (None, None) => return Err(PviError::Config("--config is required".into())),
    };
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

pub fn write_theta_csv(path: &Path, theta: &[f64]) -> Result<()> {
    let m = Matrix::from_vec(theta.len(), 1, theta.to_vec())?;
    write_matrix_csv(path, &["theta".to_string()], &m)
}

pub fn read_theta_csv(path: &Path) -> Result<Vec<f64>> {
    let (header, m) = read_matrix_csv(path)?;
    if header != ["theta"] {
        return Err(PviError::Data(format!("{}: expected a single `theta` column", path.display())));
    }
    Ok(m.into_vec())
}

fn write_checkpoint(dir: &Path, cfg: &RunConfig, state: &FlowState, trace: &MetricsTrace) -> Result<()> {
    write_theta_csv(&dir.join("theta.csv"), &state.theta)?;
    state.cloud.write_csv(&dir.join("particles.csv"))?;
    trace.write_csv(&dir.join("trace.csv"), cfg.deterministic)?;
    let path = dir.join("config.resolved");
    fs::write(&path, cfg.to_toml()).map_err(|e| PviError::io(&path, e))
}

/// Reads `theta.csv` and `particles.csv` from a run directory.
pub fn load_checkpoint(dir: &Path, spec: &KernelSpec) -> Result<SidModel> {
    for f in ["theta.csv", "particles.csv"] {
        if !dir.join(f).is_file() {
            return Err(PviError::Config(format!("{} has no {f}; run `pvi run` first", dir.display())));
        }
    }
    let theta = read_theta_csv(&dir.join("theta.csv"))?;
    let cloud = ParticleCloud::read_csv(&dir.join("particles.csv"))?;
    SidModel::new(spec.clone(), theta, cloud)
}

fn cmd_run(a: &RunArgs, bnn: bool) -> Result<i32> {
    let (cfg, out) = load_config(a, None)?;
    if bnn && cfg.target.kind != TargetKind::Bnn {
        return Err(PviError::Config("`pvi bnn` needs target.kind = \"bnn\"".into()));
    }
    let flow_cfg = cfg.flow()?;
    let exp = cfg.experiment()?;
    let spec = cfg.kernel_spec(exp.target.dim())?;
    fs::create_dir_all(&out).map_err(|e| PviError::io(&out, e))?;
    let _lock = RunLock::acquire(&out)?;
    let (state, trace) = match flow::run(&flow_cfg, &spec, exp.target.as_ref()) {
        Ok(r) => r,
        Err(failure) => {
            if !failure.state.theta.is_empty() {
                write_checkpoint(&out, &cfg, &failure.state, &failure.trace)?;
            }
            return Err(failure.error);
        }
    };
    write_checkpoint(&out, &cfg, &state, &trace)?;
    println!("wrote {} ({} iterations)", out.display(), state.iteration);
    if bnn {
        let train = exp.train.as_ref().expect("bnn experiments carry data");
        let test = exp.test.as_ref().expect("bnn experiments carry data");
        let prior = cfg.target.prior_var.unwrap_or(25.0);
        let model = BnnRegression::with_scales(train, cfg.target.hidden, cfg.target.noise_sd, prior)?;
        let sid = state.sid(&spec)?;
        let mut rng = Rng::new(cfg.seed).substream(0xB22);
        let samples = sid.sample(&mut rng, cfg.eval.predictive_samples);
        let rmse = predictive_rmse(&samples, |x| model.predict(x, &test.features), &test.responses)?;
        let mut report = MetricsReport::default();
        report.push("rmse", rmse, test.len(), cfg.seed);
        report.write_csv(&out.join("metrics.csv"))?;
        println!("test rmse {rmse:.4}");
    }
    Ok(EXIT_OK)
}

fn cmd_eval(a: &RunArgs) -> Result<i32> {
    let dir_hint = a.out.clone();
    let (cfg, out) = load_config(a, dir_hint.as_deref())?;
    let exp = cfg.experiment()?;
    let spec = cfg.kernel_spec(exp.target.dim())?;
    let sid = load_checkpoint(&out, &spec)?;
    let _lock = RunLock::acquire(&out)?;
    let e = &cfg.eval;
    let base = Rng::new(cfg.seed).substream(0xE7A1);
    let q = SampleSet::new(sid.sample(&mut base.substream(0), e.n_samples), Provenance::Sid)?;
    let mut report = MetricsReport::default();
    let seed = cfg.seed;
    let truth = match exp.target.exact_sample(&mut base.substream(1), e.n_samples) {
        Some(p) => {
            let truth = SampleSet::new(p, Provenance::Target)?;
            let other = exp.target.exact_sample(&mut base.substream(2), e.n_samples).expect("exact sampler");
            let other = SampleSet::new(other, Provenance::Target)?;
            let floor = sliced_wasserstein(&truth, &other, e.n_proj, &mut base.substream(3))?;
            report.push("sliced_w_floor", floor, e.n_samples, seed);
            truth
        }
        None => langevin_oracle(exp.target.as_ref(), &cfg.oracle(), &mut base.substream(1))?.samples,
    };
    let sw = sliced_wasserstein(&q, &truth, e.n_proj, &mut base.substream(3))?;
    report.push("sliced_w", sw, q.len().min(truth.len()), seed);
    let qs = q.subsample(e.mmd_samples, &mut base.substream(4));
    let ts = truth.subsample(e.mmd_samples, &mut base.substream(5));
    let mmd = mmd_permutation_test(&qs, &ts, e.n_perm, e.alpha, &mut base.substream(6))?;
    report.push("mmd_statistic", mmd.statistic, qs.len(), seed);
    report.push("mmd_p_value", mmd.p_value, qs.len(), seed);
    report.push("mmd_reject", f64::from(u8::from(mmd.reject)), qs.len(), seed);
    let cmp = compare_moments(&moments(&q)?, &moments(&truth)?)?;
    report.push("mean_max_abs_diff", cmp.max_mean_diff, q.len(), seed);
    report.push("std_max_abs_diff", cmp.max_std_diff, q.len(), seed);
    report.push("corr_mean_abs_diff", cmp.mean_corr_diff, q.len(), seed);
    let n_fe = cfg.pvi.free_energy_samples.max(1);
    let fe = estimate_free_energy(&sid, exp.target.as_ref(), n_fe, cfg.pvi.gamma, &mut base.substream(7))?;
    report.push("free_energy", fe.value, n_fe, seed);
    report.write_csv(&out.join("metrics.csv"))?;
    for r in &report.rows {
        println!("{} {:.6}", r.metric, r.value);
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let checks = run_suite(&SuiteOptions {
        seed: a.seed.unwrap_or(0),
        corrupt_vjp: a.corrupt_vjp.clone(),
    })?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<40} {:.3e} (limit {:.0e})", c.name, c.error, c.threshold);
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    println!("{} checks, {} failed", checks.len(), failed.len());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| PviError::io(dir, e))?;
        let mut report = MetricsReport::default();
        for c in &checks {
            report.push(&c.name, c.error, 1, a.seed.unwrap_or(0));
        }
        report.write_csv(&dir.join("gradcheck.csv"))?;
    }
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}
