//! Semi-implicit distribution `q(x) = (1/M) Σ_m k_θ(x | Z_m)` over an
//! empirical particle cloud.

use std::path::Path;

use crate::error::{PviError, Result};
use crate::kernels::{KernelBatch, KernelSpec};
use crate::numerics::{sigmoid, softmax_in_place, Matrix, Rng};

/// `M` particles in `R^{d_z}`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    z: Matrix,
}

impl ParticleCloud {
    pub fn new(z: Matrix) -> Result<Self> {
        if z.rows() == 0 || z.cols() == 0 {
            return Err(PviError::Empty("particle cloud"));
        }
        if !z.is_finite() {
            return Err(PviError::NonFinite("particle cloud".into()));
        }
        Ok(Self { z })
    }

    /// `M` i.i.d. draws from `N(0, I)`.
    pub fn standard_normal(m: usize, d_z: usize, rng: &mut Rng) -> Result<Self> {
        let mut z = Matrix::zeros(m, d_z);
        rng.fill_normal(z.as_mut_slice());
        Self::new(z)
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn into_matrix(self) -> Matrix {
        self.z
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim()];
        for row in self.z.row_iter() {
            for (a, b) in mu.iter_mut().zip(row) {
                *a += b;
            }
        }
        let m = self.len() as f64;
        mu.iter_mut().for_each(|v| *v /= m);
        mu
    }

    /// Writes the cloud as CSV with header `z_1,…,z_d`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("z_{i}")).collect();
        write_matrix_csv(path, &header, &self.z)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (header, z) = read_matrix_csv(path)?;
        let expect: Vec<String> = (1..=z.cols()).map(|i| format!("z_{i}")).collect();
        if header != expect {
            return Err(PviError::Data(format!("{}: particle header must be z_1..z_d", path.display())));
        }
        Self::new(z)
    }
}

pub(crate) fn write_matrix_csv(path: &Path, header: &[String], m: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| PviError::io(path, e))
}

pub(crate) fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                PviError::Data(format!(
                    "{}: row {}, column {}: not a number: {cell:?}",
                    path.display(),
                    i + 1,
                    j + 1
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let m = Matrix::from_vec(rows, header.len(), data)?;
    Ok((header, m))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> PviError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PviError::io(path, io),
        other => PviError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Mixture log-density and score at a batch of points.
#[derive(Clone, Debug)]
pub struct SidEval {
    pub log_q: Vec<f64>,
    /// `∇_x log q`, one row per point.
    pub score: Matrix,
}

/// The mixture `q_{θ, r^M}` for fixed kernel parameters and particles.
#[derive(Clone, Debug)]
pub struct SidModel {
    spec: KernelSpec,
    theta: Vec<f64>,
    cloud: ParticleCloud,
    batch: KernelBatch,
}

const CHUNK: usize = 256;

impl SidModel {
    pub fn new(spec: KernelSpec, theta: Vec<f64>, cloud: ParticleCloud) -> Result<Self> {
        if spec.d_z() != cloud.dim() {
            return Err(PviError::dim(format!(
                "kernel d_z = {} but particles have dimension {}",
                spec.d_z(),
                cloud.dim()
            )));
        }
        let batch = spec.evaluate(&theta, cloud.as_matrix())?;
        Ok(Self { spec, theta, cloud, batch })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    pub fn batch(&self) -> &KernelBatch {
        &self.batch
    }

    pub fn d_x(&self) -> usize {
        self.spec.d_x()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_x() {
            return Err(PviError::dim(format!("x has length {}, expected {}", x.len(), self.d_x())));
        }
        Ok(())
    }

    /// Log-density and score at every row of `x`.
    pub fn evaluate(&self, x: &Matrix) -> Result<SidEval> {
        if x.cols() != self.d_x() {
            return Err(PviError::dim(format!("points have {} columns, expected {}", x.cols(), self.d_x())));
        }
        let n = x.rows();
        let d = self.d_x();
        let log_m = (self.cloud.len() as f64).ln();
        let mut log_q = vec![0.0; n];
        let mut score = Matrix::zeros(n, d);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let chunk = Matrix::from_vec(end - start, d, x.as_slice()[start * d..end * d].to_vec())?;
            let mut table = self.batch.component_log_densities(&chunk);
            for i in 0..chunk.rows() {
                log_q[start + i] = softmax_in_place(table.row_mut(i)) - log_m;
            }
            self.batch
                .weighted_scores(&chunk, &table, &mut score.as_mut_slice()[start * d..end * d]);
        }
        Ok(SidEval { log_q, score })
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.evaluate(&Matrix::from_vec(1, x.len(), x.to_vec())?)?.log_q[0])
    }

    /// `∇_x log q(x)` as the softmax-weighted average of component scores.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(self.evaluate(&Matrix::from_vec(1, x.len(), x.to_vec())?)?.score.into_vec())
    }

    /// `∇_x log(q(x) + γ)`.
    pub fn score_gamma(&self, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
        let (log_q, s) = self.log_density_and_score(x)?;
        let w = gamma_weight(log_q, gamma);
        Ok(s.into_iter().map(|v| w * v).collect())
    }

    /// `γ ∇_x q / (q + γ)²`, the extra term in the first variation of the
    /// γ-regularized entropy.
    pub fn gamma_correction(&self, x: &[f64], gamma: f64) -> Result<Vec<f64>> {
        let (log_q, s) = self.log_density_and_score(x)?;
        let w = gamma_weight(log_q, gamma);
        Ok(s.into_iter().map(|v| w * (1.0 - w) * v).collect())
    }

    fn log_density_and_score(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_x(x)?;
        let e = self.evaluate(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        Ok((e.log_q[0], e.score.into_vec()))
    }

    /// Hierarchical sampling: a uniform particle, then the kernel.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Matrix {
        let d = self.d_x();
        let mut out = Matrix::zeros(n, d);
        let mut eps = vec![0.0; d];
        for i in 0..n {
            let m = rng.below(self.cloud.len());
            rng.fill_normal(&mut eps);
            self.batch.push_forward(m, &eps, out.row_mut(i));
        }
        out
    }
}

/// `q / (q + γ)` from `log q`, equal to 1 when `γ = 0`.
pub fn gamma_weight(log_q: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        sigmoid(log_q - gamma.ln())
    }
}
