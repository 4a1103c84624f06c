//! Run configuration files (TOML) and their translation into targets, kernels
//! and flow settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::eval::LangevinConfig;
use crate::flow::{Aggregate, NoiseFactor, ParticlePreconditioner, PviConfig, StepSchedule, ThetaPreconditioner};
use crate::kernels::KernelSpec;
use crate::numerics::{Matrix, Rng};
use crate::targets::{generate_waveform, Banana, BnnRegression, Dataset, GaussianMixture, LogisticRegression, SplitRule, Target};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Zero the wall-clock column so repeated runs write identical files.
    #[serde(default)]
    pub deterministic: bool,
    pub target: TargetConfig,
    pub kernel: KernelConfig,
    #[serde(default)]
    pub pvi: FlowConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Multimodal,
    Xshape,
    Banana,
    Bimodal,
    Gaussian,
    Logistic,
    Bnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub kind: TargetKind,
    /// Bimodal offset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    /// Gaussian mean and covariance rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    /// CSV file for the regression and classification targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Generated dataset instead of a file; only `"waveform"` is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<String>,
    #[serde(default = "default_n_synthetic")]
    pub n_synthetic: usize,
    /// Zero-based feature columns; all but the response when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<usize>>,
    /// Zero-based response column; the last one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<usize>,
    #[serde(default = "yes")]
    pub header: bool,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// 100 for logistic regression and 25 for the BNN when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_var: Option<f64>,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Constant,
    Push,
    Skip,
    Lskip,
    LskipHetero,
    LskipFullcov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Latent dimension; the target dimension when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_z: Option<usize>,
    #[serde(default = "default_hidden_kernel")]
    pub hidden: usize,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaPrecondKind {
    Identity,
    Rmsprop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParticlePrecondKind {
    Identity,
    RmspropMean,
    RmspropMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub k: usize,
    pub m: usize,
    pub l: usize,
    pub h_theta: f64,
    /// Final `h_θ` of a staircase decay; constant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_theta_end: Option<f64>,
    pub decay_every: usize,
    pub h_r: f64,
    pub lambda_r: f64,
    pub lambda_theta: f64,
    pub gamma: f64,
    pub theta_precond: ThetaPrecondKind,
    pub theta_beta: f64,
    pub theta_eps: f64,
    pub particle_precond: ParticlePrecondKind,
    pub particle_beta: f64,
    pub particle_eps: f64,
    /// `"alg1"` or `"em2"`.
    pub noise: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub p0_var: Vec<f64>,
    pub common_random_numbers: bool,
    pub log_every: usize,
    pub free_energy_samples: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            m: 100,
            l: 1,
            h_theta: 1e-4,
            h_theta_end: None,
            decay_every: 100,
            h_r: 1e-2,
            lambda_r: 1e-8,
            lambda_theta: 0.0,
            gamma: 0.0,
            theta_precond: ThetaPrecondKind::Rmsprop,
            theta_beta: 0.9,
            theta_eps: 1e-8,
            particle_precond: ParticlePrecondKind::Identity,
            particle_beta: 0.9,
            particle_eps: 1e-8,
            noise: "alg1".into(),
            p0_var: Vec::new(),
            common_random_numbers: true,
            log_every: 50,
            free_energy_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_proj: usize,
    /// Per-side subsample for the MMD test.
    pub mmd_samples: usize,
    pub n_perm: usize,
    pub alpha: f64,
    pub predictive_samples: usize,
    pub oracle_step: f64,
    pub oracle_burn: usize,
    pub oracle_keep: usize,
    pub oracle_thin: usize,
    pub oracle_chains: usize,
    pub oracle_metropolis: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_proj: 100,
            mmd_samples: 500,
            n_perm: 199,
            alpha: 0.05,
            predictive_samples: 100,
            oracle_step: 1e-3,
            oracle_burn: 5_000,
            oracle_keep: 20_000,
            oracle_thin: 5,
            oracle_chains: 4,
            oracle_metropolis: true,
        }
    }
}

fn yes() -> bool {
    true
}
fn default_n_synthetic() -> usize {
    400
}
fn default_hidden() -> usize {
    10
}
fn default_noise_sd() -> f64 {
    0.01
}
fn default_hidden_kernel() -> usize {
    512
}
fn default_c() -> f64 {
    0.5
}
fn default_eps0() -> f64 {
    1e-8
}

/// A target together with held-out data where the experiment has one.
pub struct Experiment {
    pub target: Box<dyn Target>,
    pub train: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("target", &self.target.name())
            .finish_non_exhaustive()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PviError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PviError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            PviError::Config(msg) => PviError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(data) = &cfg.target.data {
            if data.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.target.data = Some(base.join(data));
            }
        }
        Ok(cfg)
    }

    /// Every field written out, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.flow()?.validate()?;
        if self.pvi.noise != "alg1" && self.pvi.noise != "em2" {
            return Err(PviError::Config(format!(
                "pvi.noise = {:?}, expected \"alg1\" or \"em2\"",
                self.pvi.noise
            )));
        }
        let e = &self.eval;
        if e.n_samples < 2 || e.n_proj == 0 || e.mmd_samples < 2 || e.n_perm < 99 || e.predictive_samples == 0 {
            return Err(PviError::Config(
                "eval needs n_samples ≥ 2, n_proj ≥ 1, mmd_samples ≥ 2, n_perm ≥ 99, predictive_samples ≥ 1".into(),
            ));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(PviError::Config(format!("eval.alpha = {} must lie in (0, 1)", e.alpha)));
        }
        Ok(())
    }

    pub fn flow(&self) -> Result<PviConfig> {
        let p = &self.pvi;
        let schedule = match p.h_theta_end {
            None => StepSchedule::Constant,
            Some(end) => StepSchedule::Staircase { end, every: p.decay_every },
        };
        let r_precond = match p.particle_precond {
            ParticlePrecondKind::Identity => ParticlePreconditioner::Identity,
            ParticlePrecondKind::RmspropMean | ParticlePrecondKind::RmspropMax => ParticlePreconditioner::RmsPropLike {
                beta: p.particle_beta,
                eps: p.particle_eps,
                aggregate: if p.particle_precond == ParticlePrecondKind::RmspropMean {
                    Aggregate::Mean
                } else {
                    Aggregate::Max
                },
            },
        };
        let cfg = PviConfig {
            k: p.k,
            m: p.m,
            l: p.l,
            h_theta: p.h_theta,
            h_r: p.h_r,
            lambda_r: p.lambda_r,
            lambda_theta: p.lambda_theta,
            gamma: p.gamma,
            seed: self.seed,
            theta_precond: match p.theta_precond {
                ThetaPrecondKind::Identity => ThetaPreconditioner::Identity,
                ThetaPrecondKind::Rmsprop => ThetaPreconditioner::RmsProp {
                    beta: p.theta_beta,
                    eps: p.theta_eps,
                },
            },
            r_precond,
            p0_var: p.p0_var.clone(),
            noise: if p.noise == "em2" { NoiseFactor::Em2 } else { NoiseFactor::Alg1 },
            schedule,
            common_random_numbers: p.common_random_numbers,
            log_every: p.log_every,
            free_energy_samples: p.free_energy_samples,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn oracle(&self) -> LangevinConfig {
        let e = &self.eval;
        LangevinConfig {
            step: e.oracle_step,
            n_burn: e.oracle_burn,
            n_keep: e.oracle_keep,
            thin: e.oracle_thin,
            n_chains: e.oracle_chains,
            metropolis: e.oracle_metropolis,
            ..Default::default()
        }
    }

    pub fn kernel_spec(&self, d_x: usize) -> Result<KernelSpec> {
        let k = &self.kernel;
        let d_z = k.d_z.unwrap_or(d_x);
        let same = |what: &str| {
            if d_z != d_x {
                Err(PviError::Config(format!("{what} kernel needs d_z = d_x = {d_x}, got d_z = {d_z}")))
            } else {
                Ok(())
            }
        };
        match k.kind {
            KernelKind::Constant => {
                same("constant")?;
                KernelSpec::constant(d_x, k.c)
            }
            KernelKind::Push => KernelSpec::push(d_z, k.hidden, d_x),
            KernelKind::Skip => {
                same("skip")?;
                KernelSpec::skip(d_x, k.hidden)
            }
            KernelKind::Lskip => KernelSpec::lskip(d_z, k.hidden, d_x),
            KernelKind::LskipHetero => KernelSpec::lskip_hetero(d_z, k.hidden, d_x, k.eps0),
            KernelKind::LskipFullcov => KernelSpec::lskip_fullcov(d_z, k.hidden, d_x),
        }
    }

    fn dataset(&self) -> Result<Dataset> {
        let t = &self.target;
        match (&t.data, &t.synthetic) {
            (Some(_), Some(_)) => Err(PviError::Config("target.data and target.synthetic are exclusive".into())),
            (None, Some(s)) if s == "waveform" => Ok(generate_waveform(t.n_synthetic, &mut Rng::new(t.data_seed))),
            (None, Some(s)) => Err(PviError::Config(format!("unknown synthetic dataset {s:?}"))),
            (None, None) => Err(PviError::Config(format!("target kind {:?} needs target.data", t.kind))),
            (Some(path), None) => {
                if !path.is_file() {
                    return Err(PviError::Config(format!("dataset {} does not exist", path.display())));
                }
                let (features, response) = match (&t.features, t.response) {
                    (Some(f), Some(r)) => (f.clone(), r),
                    _ => {
                        let cols = count_columns(path, t.header)?;
                        let r = t.response.unwrap_or(cols - 1);
                        let f = t.features.clone().unwrap_or_else(|| (0..cols).filter(|&c| c != r).collect());
                        (f, r)
                    }
                };
                Dataset::load_csv(path, &features, response, t.header)
            }
        }
    }

    /// Builds the target; regression data is split and standardized with the
    /// training statistics.
    pub fn experiment(&self) -> Result<Experiment> {
        let t = &self.target;
        let simple = |target: Box<dyn Target>| Experiment {
            target,
            train: None,
            test: None,
        };
        Ok(match t.kind {
            TargetKind::Multimodal => simple(Box::new(GaussianMixture::multimodal())),
            TargetKind::Xshape => simple(Box::new(GaussianMixture::xshape())),
            TargetKind::Banana => simple(Box::new(Banana)),
            TargetKind::Bimodal => simple(Box::new(GaussianMixture::bimodal(
                t.mu.ok_or_else(|| PviError::Config("bimodal target needs target.mu".into()))?,
            )?)),
            TargetKind::Gaussian => {
                let mean = t
                    .mean
                    .clone()
                    .ok_or_else(|| PviError::Config("gaussian target needs target.mean".into()))?;
                let cov = match &t.cov {
                    Some(rows) => Matrix::from_rows(rows)?,
                    None => Matrix::identity(mean.len()),
                };
                simple(Box::new(GaussianMixture::gaussian("gaussian", mean, cov)?))
            }
            TargetKind::Logistic => {
                let mut data = self.dataset()?;
                if t.standardize {
                    data = data.standardization(false)?.apply(&data)?;
                }
                let prior = t.prior_var.unwrap_or(100.0);
                Experiment {
                    target: Box::new(LogisticRegression::with_prior(&data, prior)?),
                    train: Some(data),
                    test: None,
                }
            }
            TargetKind::Bnn => {
                let data = self.dataset()?;
                let rule = match (t.train_count, t.test_count, t.train_fraction) {
                    (Some(a), Some(b), None) => SplitRule::Counts(a, b),
                    (None, None, Some(f)) => SplitRule::Fraction(f),
                    (None, None, None) => SplitRule::Fraction(0.8),
                    _ => {
                        return Err(PviError::Config(
                            "give either target.train_count and target.test_count, or target.train_fraction".into(),
                        ))
                    }
                };
                let (train, test) = data.split(rule, &mut Rng::new(t.data_seed))?;
                let stats = train.standardization(true)?;
                let (train, test) = (stats.apply(&train)?, stats.apply(&test)?);
                let prior = t.prior_var.unwrap_or(25.0);
                Experiment {
                    target: Box::new(BnnRegression::with_scales(&train, t.hidden, t.noise_sd, prior)?),
                    train: Some(train),
                    test: Some(test),
                }
            }
        })
    }
}

fn count_columns(path: &Path, header: bool) -> Result<usize> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(header)
        .from_path(path)
        .map_err(|e| crate::sid::csv_error(path, e))?;
    let n = if header {
        r.headers().map_err(|e| crate::sid::csv_error(path, e))?.len()
    } else {
        match r.records().next() {
            Some(rec) => rec.map_err(|e| crate::sid::csv_error(path, e))?.len(),
            None => 0,
        }
    };
    if n < 2 {
        return Err(PviError::Data(format!("{}: need at least two columns", path.display())));
    }
    Ok(n)
}
