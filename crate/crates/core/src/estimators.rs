//! Pathwise Monte Carlo estimators of the free-energy gradient with respect to
//! the kernel parameters and of the per-particle Wasserstein drift.
//!
//! Both estimators average `∇φ_θ(Z_m, ε_l)·d_{l,m}` where
//! `d = s^γ − s_p + Γ^γ`, with `s^γ = ∇_x log(q + γ)`, `s_p` the target score
//! and `Γ^γ = γ ∇_x q/(q + γ)²` (zero when `γ = 0`).

use crate::error::{PviError, Result};
use crate::kernels::Cotangents;
use crate::numerics::{norm, Matrix, Rng};
use crate::sid::{gamma_weight, SidModel};
use crate::targets::Target;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    /// Monte Carlo samples per particle.
    pub l: usize,
    pub gamma: f64,
    /// Share one noise batch across all particles.
    pub common_random_numbers: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            l: 1,
            gamma: 0.0,
            common_random_numbers: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 {
            return Err(PviError::Config("the number of Monte Carlo samples L must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PviError::Config(format!("γ = {} must be finite and non-negative", self.gamma)));
        }
        Ok(())
    }
}

/// Base noise for one iteration; row `m·L + l` is `ε_{l,m}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    eps: Matrix,
    l: usize,
}

impl NoiseBatch {
    /// With common random numbers every particle sees the same `L` draws;
    /// otherwise particle `m` draws from its own substream keyed by `m`.
    pub fn draw(cfg: &EstimatorConfig, m: usize, d_x: usize, rng: &mut Rng) -> Self {
        let l = cfg.l;
        let mut eps = Matrix::zeros(m * l, d_x);
        if cfg.common_random_numbers {
            let mut shared = vec![0.0; l * d_x];
            rng.fill_normal(&mut shared);
            for k in 0..m {
                eps.as_mut_slice()[k * l * d_x..(k + 1) * l * d_x].copy_from_slice(&shared);
            }
        } else {
            let base = rng.substream(u64::MAX);
            for k in 0..m {
                let mut sub = base.substream(k as u64);
                sub.fill_normal(&mut eps.as_mut_slice()[k * l * d_x..(k + 1) * l * d_x]);
            }
        }
        Self { eps, l }
    }

    pub fn from_matrix(eps: Matrix, l: usize) -> Result<Self> {
        if l == 0 || eps.rows() % l != 0 {
            return Err(PviError::dim(format!("{} noise rows is not a multiple of L = {l}", eps.rows())));
        }
        Ok(Self { eps, l })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn particles(&self) -> usize {
        self.eps.rows() / self.l
    }

    pub fn eps(&self) -> &Matrix {
        &self.eps
    }
}

/// Score difference `d` at every pushed-forward sample, accumulated into
/// per-particle cotangents (unscaled sums over `l`).
pub fn accumulate_cotangents(sid: &SidModel, target: &dyn Target, noise: &NoiseBatch, gamma: f64) -> Result<Cotangents> {
    let batch = sid.batch();
    let (m, l, d) = (sid.cloud().len(), noise.l, sid.d_x());
    if noise.particles() != m || noise.eps.cols() != d {
        return Err(PviError::dim(format!(
            "noise batch is {}x{}, expected {}x{d}",
            noise.eps.rows(),
            noise.eps.cols(),
            m * l
        )));
    }
    if target.dim() != d {
        return Err(PviError::dim(format!("target dimension {} but kernel d_x = {d}", target.dim())));
    }
    let mut x = Matrix::zeros(m * l, d);
    for k in 0..m {
        for j in 0..l {
            let r = k * l + j;
            batch.push_forward(k, noise.eps.row(r), x.row_mut(r));
        }
    }
    let eval = sid.evaluate(&x)?;
    let sp = target.grad_log_joint_batch(&x)?;
    let mut cot = batch.cotangents();
    let mut dvec = vec![0.0; d];
    for k in 0..m {
        for j in 0..l {
            let r = k * l + j;
            let w = gamma_weight(eval.log_q[r], gamma);
            // s^γ + Γ^γ = s·(w + w(1 − w))
            let f = if gamma > 0.0 { w * (2.0 - w) } else { 1.0 };
            for ((o, &s), &p) in dvec.iter_mut().zip(eval.score.row(r)).zip(sp.row(r)) {
                *o = f * s - p;
            }
            if let Some(bad) = dvec.iter().find(|v| !v.is_finite()) {
                return Err(PviError::Estimator {
                    l: j,
                    m: k,
                    what: format!("score difference is {bad}"),
                });
            }
            cot.add(k, noise.eps.row(r), &dvec);
        }
    }
    Ok(cot)
}

/// `(1/(L·M)) Σ_{l,m} ∇_θ φ·d + λ_θ θ`.
pub fn estimate_grad_theta(sid: &SidModel, target: &dyn Target, noise: &NoiseBatch, gamma: f64, lambda_theta: f64) -> Result<Vec<f64>> {
    let mut cot = accumulate_cotangents(sid, target, noise, gamma)?;
    cot.scale_by(1.0 / (noise.eps.rows() as f64));
    let theta = sid.theta();
    let mut g: Vec<f64> = theta.iter().map(|t| lambda_theta * t).collect();
    sid.batch().pullback(sid.spec(), theta, &cot, Some(&mut g), false)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(PviError::NonFinite("θ-gradient".into()));
    }
    Ok(g)
}

/// Row `m`: `−(1/L) Σ_l ∇_z φ(Z_m, ε_l)·d_{l,m} − λ_r Σ₀⁻¹ Z_m` for the
/// reference `p₀ = N(0, diag(p0_var))`.
pub fn estimate_drift(
    sid: &SidModel,
    target: &dyn Target,
    noise: &NoiseBatch,
    gamma: f64,
    lambda_r: f64,
    p0_var: &[f64],
) -> Result<Matrix> {
    let z = sid.cloud().as_matrix();
    if p0_var.len() != z.cols() {
        return Err(PviError::dim(format!("p0 has dimension {}, particles {}", p0_var.len(), z.cols())));
    }
    if p0_var.iter().any(|&v| !(v > 0.0)) {
        return Err(PviError::Config("p0 covariance must be positive definite".into()));
    }
    let mut cot = accumulate_cotangents(sid, target, noise, gamma)?;
    cot.scale_by(1.0 / noise.l as f64);
    let gz = sid
        .batch()
        .pullback(sid.spec(), sid.theta(), &cot, None, true)?
        .expect("particle gradient requested");
    let mut drift = gz.scaled(-1.0);
    for i in 0..drift.rows() {
        for ((b, &zv), &v) in drift.row_mut(i).iter_mut().zip(z.row(i)).zip(p0_var) {
            *b -= lambda_r * zv / v;
        }
    }
    Ok(drift)
}

/// Monte Carlo estimate of `E_q[log(q + γ) − log p̃]` and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeEnergy {
    pub value: f64,
    pub std_err: f64,
}

pub fn estimate_free_energy(sid: &SidModel, target: &dyn Target, n: usize, gamma: f64, rng: &mut Rng) -> Result<FreeEnergy> {
    if n == 0 {
        return Err(PviError::Empty("free-energy sample count"));
    }
    let x = sid.sample(rng, n);
    let log_q = sid.evaluate(&x)?.log_q;
    let log_p = target.log_joint_batch(&x)?;
    let terms: Vec<f64> = log_q
        .iter()
        .zip(&log_p)
        .map(|(&q, &p)| {
            let lq = if gamma > 0.0 {
                let g = gamma.ln();
                let m = q.max(g);
                m + ((q - m).exp() + (g - m).exp()).ln()
            } else {
                q
            };
            lq - p
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    if !mean.is_finite() {
        return Err(PviError::NonFinite("free-energy estimate".into()));
    }
    Ok(FreeEnergy {
        value: mean,
        std_err: (var / n as f64).sqrt(),
    })
}

/// Mean Euclidean norm of the drift rows.
pub fn mean_row_norm(m: &Matrix) -> f64 {
    m.row_iter().map(norm).sum::<f64>() / m.rows().max(1) as f64
}
