//! The discretized particle flow: alternating kernel-parameter updates and
//! preconditioned Langevin-type particle moves.

use std::path::Path;
use std::time::Instant;

use crate::error::{PviError, Result};
use crate::estimators::{estimate_drift, estimate_free_energy, estimate_grad_theta, mean_row_norm, EstimatorConfig, NoiseBatch};
use crate::kernels::KernelSpec;
use crate::numerics::{norm, Matrix, Rng};
use crate::sid::{csv_error, ParticleCloud, SidModel};
use crate::targets::Target;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThetaPreconditioner {
    Identity,
    RmsProp { beta: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParticlePreconditioner {
    Identity,
    RmsPropLike { beta: f64, eps: f64, aggregate: Aggregate },
}

/// Scale of the injected particle noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseFactor {
    /// `√(λ_r h_r Ψ)·η`.
    Alg1,
    /// `√(2 λ_r h_r Ψ)·η`, the Euler–Maruyama factor of the continuous flow.
    Em2,
}

/// Kernel-parameter step size over iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant,
    /// Staircase decay from `h_θ` to `end`, multiplying by a fixed factor
    /// every `every` iterations so that `end` is reached at the last stair.
    Staircase {
        end: f64,
        every: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PviConfig {
    pub k: usize,
    pub m: usize,
    pub l: usize,
    pub h_theta: f64,
    pub h_r: f64,
    pub lambda_r: f64,
    pub lambda_theta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub theta_precond: ThetaPreconditioner,
    pub r_precond: ParticlePreconditioner,
    /// Diagonal of the reference covariance of `p₀ = N(0, ·)`; empty means identity.
    pub p0_var: Vec<f64>,
    pub noise: NoiseFactor,
    pub schedule: StepSchedule,
    pub common_random_numbers: bool,
    /// Record a trace entry every this many iterations; 0 disables tracing.
    pub log_every: usize,
    pub free_energy_samples: usize,
}

impl Default for PviConfig {
    fn default() -> Self {
        Self {
            k: 1000,
            m: 100,
            l: 1,
            h_theta: 1e-4,
            h_r: 1e-2,
            lambda_r: 1e-8,
            lambda_theta: 0.0,
            gamma: 0.0,
            seed: 0,
            theta_precond: ThetaPreconditioner::RmsProp { beta: 0.9, eps: 1e-8 },
            r_precond: ParticlePreconditioner::Identity,
            p0_var: Vec::new(),
            noise: NoiseFactor::Alg1,
            schedule: StepSchedule::Constant,
            common_random_numbers: true,
            log_every: 50,
            free_energy_samples: 512,
        }
    }
}

impl PviConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PviError::Config(msg));
        if self.m == 0 || self.l == 0 {
            return bad("M and L must be at least 1".into());
        }
        for (name, v) in [
            ("h_theta", self.h_theta),
            ("h_r", self.h_r),
            ("lambda_r", self.lambda_r),
            ("lambda_theta", self.lambda_theta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        self.estimator().validate()?;
        let beta_ok = |b: f64, e: f64| b > 0.0 && b < 1.0 && e > 0.0;
        if let ThetaPreconditioner::RmsProp { beta, eps } = self.theta_precond {
            if !beta_ok(beta, eps) {
                return bad(format!("θ preconditioner needs β in (0, 1) and ε > 0, got {beta}, {eps}"));
            }
        }
        if let ParticlePreconditioner::RmsPropLike { beta, eps, .. } = self.r_precond {
            if !beta_ok(beta, eps) {
                return bad(format!("particle preconditioner needs β in (0, 1) and ε > 0, got {beta}, {eps}"));
            }
        }
        if self.p0_var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("p0 variances must be positive".into());
        }
        if let StepSchedule::Staircase { end, every } = self.schedule {
            if every == 0 || !(end > 0.0) {
                return bad("staircase schedule needs every ≥ 1 and end > 0".into());
            }
        }
        if self.log_every > 0 && self.free_energy_samples == 0 {
            return bad("free_energy_samples must be positive when tracing".into());
        }
        Ok(())
    }

    pub fn estimator(&self) -> EstimatorConfig {
        EstimatorConfig {
            l: self.l,
            gamma: self.gamma,
            common_random_numbers: self.common_random_numbers,
        }
    }

    /// `h_θ` used at iteration `k` (zero-based).
    pub fn h_theta_at(&self, k: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.h_theta,
            StepSchedule::Staircase { end, every } => {
                let stairs = (self.k.saturating_sub(1) / every).max(1);
                let rate = (end / self.h_theta).powf(1.0 / stairs as f64);
                (self.h_theta * rate.powi((k / every) as i32)).max(end.min(self.h_theta))
            }
        }
    }

    fn p0(&self, d_z: usize) -> Result<Vec<f64>> {
        if self.p0_var.is_empty() {
            Ok(vec![1.0; d_z])
        } else if self.p0_var.len() == d_z {
            Ok(self.p0_var.clone())
        } else {
            Err(PviError::Config(format!("p0_var has {} entries, d_z = {d_z}", self.p0_var.len())))
        }
    }
}

/// Kernel parameters, particles and preconditioner state after some iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub theta: Vec<f64>,
    pub cloud: ParticleCloud,
    pub v_theta: Vec<f64>,
    pub b_r: Vec<f64>,
    pub iteration: usize,
    rng: Rng,
}

impl FlowState {
    pub fn sid(&self, spec: &KernelSpec) -> Result<SidModel> {
        SidModel::new(spec.clone(), self.theta.clone(), self.cloud.clone())
    }

    /// Generator for auxiliary draws tied to the current iteration.
    pub fn rng_for(&self, stream: u64) -> Rng {
        self.rng.keyed(&[self.iteration as u64, stream])
    }
}

/// `θ₀` from the kernel initializer, `Z₀ ~ N(0, I)`, zero accumulators.
pub fn pvi_init(config: &PviConfig, spec: &KernelSpec, target: &dyn Target) -> Result<FlowState> {
    config.validate()?;
    if spec.d_x() != target.dim() {
        return Err(PviError::Config(format!(
            "kernel d_x = {} but target dimension is {}",
            spec.d_x(),
            target.dim()
        )));
    }
    config.p0(spec.d_z())?;
    let rng = Rng::new(config.seed);
    let theta = spec.init_params(&mut rng.substream(1));
    let cloud = ParticleCloud::standard_normal(config.m, spec.d_z(), &mut rng.substream(2))?;
    Ok(FlowState {
        v_theta: vec![0.0; theta.len()],
        b_r: vec![0.0; spec.d_z()],
        theta,
        cloud,
        iteration: 0,
        rng,
    })
}

/// `v ← βv + (1−β)g²`, returns `1/(√v + ε)`.
pub fn rmsprop_theta(v: &mut [f64], g: &[f64], beta: f64, eps: f64) -> Vec<f64> {
    v.iter_mut()
        .zip(g)
        .map(|(vi, gi)| {
            *vi = beta * *vi + (1.0 - beta) * gi * gi;
            1.0 / (vi.sqrt() + eps)
        })
        .collect()
}

/// `B ← βB + (1−β)·agg_m(drift²)`, returns `(B + ε)^{−1/2}`.
pub fn rmsprop_r(b: &mut [f64], drift: &Matrix, beta: f64, eps: f64, aggregate: Aggregate) -> Vec<f64> {
    let m = drift.rows() as f64;
    b.iter_mut()
        .enumerate()
        .map(|(j, bj)| {
            let sq = (0..drift.rows()).map(|i| drift[(i, j)] * drift[(i, j)]);
            let agg = match aggregate {
                Aggregate::Mean => sq.sum::<f64>() / m,
                Aggregate::Max => sq.fold(0.0, f64::max),
            };
            *bj = beta * *bj + (1.0 - beta) * agg;
            1.0 / (*bj + eps).sqrt()
        })
        .collect()
}

/// Diagnostics of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_theta_norm: f64,
    pub drift_norm_mean: f64,
}

/// One iteration. The state is left untouched if the step fails.
pub fn pvi_step(state: &mut FlowState, spec: &KernelSpec, target: &dyn Target, config: &PviConfig) -> Result<StepInfo> {
    let k = state.iteration;
    let diverged = |what: String| PviError::Divergence { iteration: k, what };
    let est = config.estimator();
    let noise = NoiseBatch::draw(&est, state.cloud.len(), spec.d_x(), &mut state.rng_for(0));

    let sid = SidModel::new(spec.clone(), state.theta.clone(), state.cloud.clone())?;
    let g = estimate_grad_theta(&sid, target, &noise, config.gamma, config.lambda_theta).map_err(|e| diverged(e.to_string()))?;
    let h = config.h_theta_at(k);
    let mut v_theta = state.v_theta.clone();
    let psi = match config.theta_precond {
        ThetaPreconditioner::Identity => vec![1.0; g.len()],
        ThetaPreconditioner::RmsProp { beta, eps } => rmsprop_theta(&mut v_theta, &g, beta, eps),
    };
    if psi.iter().any(|&p| !(p > 0.0)) {
        return Err(diverged("θ preconditioner lost positivity".into()));
    }
    let theta: Vec<f64> = state.theta.iter().zip(&g).zip(&psi).map(|((t, gi), p)| t - h * p * gi).collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(diverged("non-finite kernel parameters".into()));
    }

    let mut b_r = state.b_r.clone();
    let mut drift_norm = 0.0;
    let cloud = if config.h_r == 0.0 {
        state.cloud.clone()
    } else {
        let sid = SidModel::new(spec.clone(), theta.clone(), state.cloud.clone()).map_err(|e| diverged(e.to_string()))?;
        let p0 = config.p0(spec.d_z())?;
        let drift = estimate_drift(&sid, target, &noise, config.gamma, config.lambda_r, &p0).map_err(|e| diverged(e.to_string()))?;
        drift_norm = mean_row_norm(&drift);
        let psi_r = match config.r_precond {
            ParticlePreconditioner::Identity => vec![1.0; spec.d_z()],
            ParticlePreconditioner::RmsPropLike { beta, eps, aggregate } => rmsprop_r(&mut b_r, &drift, beta, eps, aggregate),
        };
        if psi_r.iter().any(|&p| !(p > 0.0)) {
            return Err(diverged("particle preconditioner lost positivity".into()));
        }
        let factor = match config.noise {
            NoiseFactor::Alg1 => 1.0,
            NoiseFactor::Em2 => 2.0,
        };
        let noise_scale: Vec<f64> = psi_r.iter().map(|p| (factor * config.lambda_r * config.h_r * p).sqrt()).collect();
        let mut eta_rng = state.rng_for(1);
        let mut z = state.cloud.as_matrix().clone();
        for i in 0..z.rows() {
            for (j, zv) in z.row_mut(i).iter_mut().enumerate() {
                *zv += config.h_r * psi_r[j] * drift[(i, j)] + noise_scale[j] * eta_rng.normal();
            }
        }
        ParticleCloud::new(z).map_err(|_| diverged("non-finite particles".into()))?
    };

    state.theta = theta;
    state.v_theta = v_theta;
    state.b_r = b_r;
    state.cloud = cloud;
    state.iteration += 1;
    Ok(StepInfo {
        grad_theta_norm: norm(&g),
        drift_norm_mean: drift_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub free_energy: f64,
    pub grad_theta_norm: f64,
    pub drift_norm_mean: f64,
    pub wall_ms: f64,
}

/// Append-only per-interval diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<TraceRecord>,
}

impl MetricsTrace {
    pub const HEADER: [&'static str; 5] = ["iter", "elbo_est", "grad_theta_norm", "drift_norm_mean", "wall_ms"];

    /// Writes `trace.csv`; with `deterministic` the wall-clock column is zeroed
    /// so repeated runs produce identical files.
    pub fn write_csv(&self, path: &Path, deterministic: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(Self::HEADER).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let wall = if deterministic { 0.0 } else { r.wall_ms };
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.free_energy),
                format!("{:e}", r.grad_theta_norm),
                format!("{:e}", r.drift_norm_mean),
                format!("{wall:.3}"),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| PviError::io(path, e))
    }
}

/// A run that stopped early, with the last finite state.
#[derive(Debug)]
pub struct RunFailure {
    pub error: PviError,
    pub state: FlowState,
    pub trace: MetricsTrace,
}

/// `config.k` iterations from [`pvi_init`].
pub fn run(config: &PviConfig, spec: &KernelSpec, target: &dyn Target) -> std::result::Result<(FlowState, MetricsTrace), Box<RunFailure>> {
    let state = match pvi_init(config, spec, target) {
        Ok(s) => s,
        Err(error) => {
            // nothing to preserve; report against an empty state
            return Err(Box::new(RunFailure {
                error,
                state: FlowState {
                    theta: Vec::new(),
                    cloud: ParticleCloud::new(Matrix::zeros(1, 1)).expect("1x1"),
                    v_theta: Vec::new(),
                    b_r: Vec::new(),
                    iteration: 0,
                    rng: Rng::new(config.seed),
                },
                trace: MetricsTrace::default(),
            }));
        }
    };
    run_from(state, config, spec, target, |_, _| {})
}

/// Continues `state` until `config.k` iterations, calling `observe` after each
/// step.
pub fn run_from(
    mut state: FlowState,
    config: &PviConfig,
    spec: &KernelSpec,
    target: &dyn Target,
    mut observe: impl FnMut(&FlowState, &StepInfo),
) -> std::result::Result<(FlowState, MetricsTrace), Box<RunFailure>> {
    let mut trace = MetricsTrace::default();
    let start = Instant::now();
    while state.iteration < config.k {
        let info = match pvi_step(&mut state, spec, target, config) {
            Ok(info) => info,
            Err(error) => return Err(Box::new(RunFailure { error, state, trace })),
        };
        observe(&state, &info);
        if config.log_every > 0 && state.iteration % config.log_every == 0 {
            let fe = state
                .sid(spec)
                .and_then(|sid| estimate_free_energy(&sid, target, config.free_energy_samples, config.gamma, &mut state.rng_for(2)));
            match fe {
                Ok(fe) => trace.records.push(TraceRecord {
                    iteration: state.iteration,
                    free_energy: fe.value,
                    grad_theta_norm: info.grad_theta_norm,
                    drift_norm_mean: info.drift_norm_mean,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                }),
                Err(error) => return Err(Box::new(RunFailure { error, state, trace })),
            }
        }
    }
    Ok((state, trace))
}
