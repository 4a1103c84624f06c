//! Unnormalized target densities `log p(x, y)` with analytic gradients, and
//! dataset handling for the regression and classification posteriors.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{PviError, Result};
use crate::mlp::{Activation, MlpSpec, OutputTransform};
use crate::numerics::{cholesky, gemm, logsumexp, sigmoid, softmax_in_place, softplus, solve_lower, solve_upper_tr, Matrix, Rng, Trans};
use crate::sid::csv_error;

/// A differentiable log-density over `R^d`, known up to an additive constant.
pub trait Target: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn log_joint(&self, x: &[f64]) -> Result<f64>;

    fn grad_log_joint(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Gradients at every row of `x`.
    fn grad_log_joint_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.dim());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.grad_log_joint(x.row(i))?);
        }
        Ok(out)
    }

    fn log_joint_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.row_iter().map(|r| self.log_joint(r)).collect()
    }

    /// Exact i.i.d. samples when the target is a normalized closed-form density.
    fn exact_sample(&self, _rng: &mut Rng, _n: usize) -> Option<Matrix> {
        None
    }
}

fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(PviError::dim(format!("target expects dimension {d}, got {}", x.len())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    chol: Matrix,
    precision: Matrix,
    /// `log N` normalizer: `−½ d log 2π − ½ log det Σ`.
    log_norm: f64,
}

impl Component {
    /// Returns `log w + log N(x)` and writes `Σ⁻¹(x − μ)` into `prec_diff`.
    fn eval(&self, x: &[f64], diff: &mut [f64], prec_diff: &mut [f64]) -> f64 {
        for ((d, a), b) in diff.iter_mut().zip(x).zip(&self.mean) {
            *d = a - b;
        }
        let mut quad = 0.0;
        for (p, (row, d)) in prec_diff.iter_mut().zip(self.precision.row_iter().zip(diff.iter())) {
            *p = row.iter().zip(diff.iter()).map(|(a, b)| a * b).sum();
            quad += *p * d;
        }
        self.log_weight + self.log_norm - 0.5 * quad
    }
}

/// Finite Gaussian mixture with full covariances.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    name: String,
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(name: &str, weights: &[f64], means: &[Vec<f64>], covs: &[Matrix]) -> Result<Self> {
        if weights.is_empty() {
            return Err(PviError::Empty("mixture components"));
        }
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(PviError::dim("mixture weights, means and covariances differ in count"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || !total.is_finite() {
            return Err(PviError::Config("mixture weights must be positive".into()));
        }
        let dim = means[0].len();
        let components = weights
            .iter()
            .zip(means)
            .zip(covs)
            .map(|((&w, mu), cov)| {
                if mu.len() != dim || cov.rows() != dim || cov.cols() != dim {
                    return Err(PviError::dim("mixture component dimensions disagree"));
                }
                let chol = cholesky(cov)?;
                let half_logdet: f64 = (0..dim).map(|i| chol[(i, i)].ln()).sum();
                let mut precision = Matrix::zeros(dim, dim);
                let mut unit = vec![0.0; dim];
                for j in 0..dim {
                    unit[j] = 1.0;
                    let col = solve_upper_tr(&chol, &solve_lower(&chol, &unit));
                    unit[j] = 0.0;
                    for (i, v) in col.into_iter().enumerate() {
                        precision[(i, j)] = v;
                    }
                }
                Ok(Component {
                    log_weight: (w / total).ln(),
                    mean: mu.clone(),
                    chol,
                    precision,
                    log_norm: -0.5 * dim as f64 * (2.0 * PI).ln() - half_logdet,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            dim,
            components,
        })
    }

    pub fn gaussian(name: &str, mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        Self::new(name, &[1.0], &[mean], &[cov])
    }

    /// Equal mixture of `N(0, [[2, ±1.8], [±1.8, 2]])`.
    pub fn xshape() -> Self {
        let c1 = Matrix::from_rows(&[vec![2.0, 1.8], vec![1.8, 2.0]]).expect("2x2");
        let c2 = Matrix::from_rows(&[vec![2.0, -1.8], vec![-1.8, 2.0]]).expect("2x2");
        Self::new("xshape", &[0.5, 0.5], &[vec![0.0, 0.0], vec![0.0, 0.0]], &[c1, c2]).expect("valid mixture")
    }

    /// Four unit Gaussians at `(±2, ±2)`.
    pub fn multimodal() -> Self {
        let means = [vec![2.0, 2.0], vec![-2.0, -2.0], vec![2.0, -2.0], vec![-2.0, 2.0]];
        let covs = vec![Matrix::identity(2); 4];
        Self::new("multimodal", &[0.125, 0.125, 0.5, 0.25], &means, &covs).expect("valid mixture")
    }

    /// `½ N((μ, μ), I) + ½ N((−μ, −μ), I)`.
    pub fn bimodal(mu: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(PviError::Config(format!("bimodal offset {mu} must be finite")));
        }
        Self::new(
            "bimodal",
            &[0.5, 0.5],
            &[vec![mu, mu], vec![-mu, -mu]],
            &[Matrix::identity(2), Matrix::identity(2)],
        )
    }
}

impl GaussianMixture {
    fn grad_into(&self, x: &[f64], g: &mut [f64], pd: &mut Matrix, r: &mut [f64]) {
        let mut diff = [0.0; 8];
        let mut diff_heap;
        let diff: &mut [f64] = if self.dim <= 8 {
            &mut diff[..self.dim]
        } else {
            diff_heap = vec![0.0; self.dim];
            &mut diff_heap
        };
        for (k, c) in self.components.iter().enumerate() {
            r[k] = c.eval(x, diff, pd.row_mut(k));
        }
        softmax_in_place(r);
        g.iter_mut().for_each(|v| *v = 0.0);
        for (k, rk) in r.iter().enumerate() {
            for (gi, v) in g.iter_mut().zip(pd.row(k)) {
                *gi -= rk * v;
            }
        }
    }
}

impl Target for GaussianMixture {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_joint(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim)?;
        let (mut diff, mut buf) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        let terms: Vec<f64> = self.components.iter().map(|c| c.eval(x, &mut diff, &mut buf)).collect();
        logsumexp(&terms)
    }

    fn grad_log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.dim)?;
        let mut g = vec![0.0; self.dim];
        let mut pd = Matrix::zeros(self.components.len(), self.dim);
        let mut r = vec![0.0; self.components.len()];
        self.grad_into(x, &mut g, &mut pd, &mut r);
        Ok(g)
    }

    fn grad_log_joint_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(PviError::dim(format!("target expects dimension {}, got {}", self.dim, x.cols())));
        }
        let mut out = Matrix::zeros(x.rows(), self.dim);
        let mut pd = Matrix::zeros(self.components.len(), self.dim);
        let mut r = vec![0.0; self.components.len()];
        for i in 0..x.rows() {
            self.grad_into(x.row(i), out.row_mut(i), &mut pd, &mut r);
        }
        Ok(out)
    }

    fn exact_sample(&self, rng: &mut Rng, n: usize) -> Option<Matrix> {
        let weights: Vec<f64> = self.components.iter().map(|c| c.log_weight.exp()).collect();
        let mut out = Matrix::zeros(n, self.dim);
        let mut eps = vec![0.0; self.dim];
        for i in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = weights.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let c = &self.components[k];
            rng.fill_normal(&mut eps);
            let row = out.row_mut(i);
            for (a, (r, m)) in row.iter_mut().zip(c.chol.row_iter().zip(&c.mean)) {
                *a = m + r.iter().zip(&eps).map(|(l, e)| l * e).sum::<f64>();
            }
        }
        Some(out)
    }
}

/// `N(x₂; x₁²/4, 1)·N(x₁; 0, 2)`, the second argument being a variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Banana;

impl Target for Banana {
    fn name(&self) -> &str {
        "banana"
    }

    fn dim(&self) -> usize {
        2
    }

    fn log_joint(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, 2)?;
        let r = x[1] - 0.25 * x[0] * x[0];
        Ok(-0.5 * r * r - 0.25 * x[0] * x[0] - (2.0 * PI).ln() - 0.5 * 2f64.ln())
    }

    fn grad_log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, 2)?;
        let r = x[1] - 0.25 * x[0] * x[0];
        Ok(vec![0.5 * r * x[0] - 0.5 * x[0], -r])
    }

    fn exact_sample(&self, rng: &mut Rng, n: usize) -> Option<Matrix> {
        let mut out = Matrix::zeros(n, 2);
        for i in 0..n {
            let x1 = 2f64.sqrt() * rng.normal();
            out[(i, 0)] = x1;
            out[(i, 1)] = 0.25 * x1 * x1 + rng.normal();
        }
        Some(out)
    }
}

/// Bayesian logistic regression with an intercept and an isotropic Gaussian
/// prior of variance `prior_var`.
#[derive(Clone, Debug)]
pub struct LogisticRegression {
    /// Covariates with a leading column of ones, `n × d`.
    design: Matrix,
    labels: Vec<f64>,
    prior_var: f64,
}

impl LogisticRegression {
    /// Prior `N(0, 100·I)`.
    pub fn new(data: &Dataset) -> Result<Self> {
        Self::with_prior(data, 100.0)
    }

    pub fn with_prior(data: &Dataset, prior_var: f64) -> Result<Self> {
        if data.len() == 0 {
            return Err(PviError::Empty("logistic regression data"));
        }
        if let Some(bad) = data.responses.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(PviError::Data(format!("logistic regression responses must be 0 or 1, found {bad}")));
        }
        if !(prior_var > 0.0) {
            return Err(PviError::Config(format!("prior variance {prior_var} must be positive")));
        }
        let (n, d) = (data.len(), data.features.cols() + 1);
        let mut design = Matrix::zeros(n, d);
        for i in 0..n {
            let row = design.row_mut(i);
            row[0] = 1.0;
            row[1..].copy_from_slice(data.features.row(i));
        }
        Ok(Self {
            design,
            labels: data.responses.clone(),
            prior_var,
        })
    }

    pub fn design(&self) -> &Matrix {
        &self.design
    }

    /// Log-likelihood only, `Σ y·a − softplus(a)`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        let a = self.design.matvec(x)?;
        Ok(a.iter().zip(&self.labels).map(|(&a, &y)| y * a - softplus(a)).sum())
    }

    fn log_prior(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        -0.5 * x.iter().map(|v| v * v).sum::<f64>() / self.prior_var - 0.5 * d * (2.0 * PI * self.prior_var).ln()
    }
}

impl Target for LogisticRegression {
    fn name(&self) -> &str {
        "logistic_regression"
    }

    fn dim(&self) -> usize {
        self.design.cols()
    }

    fn log_joint(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood(x)? + self.log_prior(x))
    }

    fn grad_log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let a = self.design.matvec(x)?;
        let r: Vec<f64> = a.iter().zip(&self.labels).map(|(&a, &y)| y - sigmoid(a)).collect();
        let mut g = self.design.tr_matvec(&r)?;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi -= xi / self.prior_var;
        }
        Ok(g)
    }

    fn grad_log_joint_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(PviError::dim(format!("target expects dimension {}, got {}", self.dim(), x.cols())));
        }
        let (n, k) = (self.design.rows(), x.rows());
        // logits for every datum and every query point at once
        let mut a = Matrix::zeros(n, k);
        gemm(1.0, &self.design, Trans::No, x, Trans::Yes, 0.0, &mut a);
        for i in 0..n {
            let y = self.labels[i];
            for v in a.row_mut(i) {
                *v = y - sigmoid(*v);
            }
        }
        let mut g = x.scaled(-1.0 / self.prior_var);
        gemm(1.0, &a, Trans::Yes, &self.design, Trans::No, 1.0, &mut g);
        Ok(g)
    }
}

/// Bayesian neural-network regression `f_x(o) = W₂ᵀ ReLU(W₁ᵀ o + b₁) + b₂`
/// with Gaussian likelihood and isotropic Gaussian prior.
///
/// The parameter vector is `x = [vec(W₂), b₂, vec(W₁), b₁]` with column-major
/// `vec`, so `d_x = d_h + 1 + d_in·d_h + d_h`.
#[derive(Clone, Debug)]
pub struct BnnRegression {
    net: MlpSpec,
    d_in: usize,
    d_h: usize,
    inputs: Matrix,
    responses: Vec<f64>,
    noise_sd: f64,
    prior_var: f64,
}

impl BnnRegression {
    /// Noise standard deviation 0.01, prior variance 25.
    pub fn new(data: &Dataset, d_h: usize) -> Result<Self> {
        Self::with_scales(data, d_h, 0.01, 25.0)
    }

    pub fn with_scales(data: &Dataset, d_h: usize, noise_sd: f64, prior_var: f64) -> Result<Self> {
        if data.len() == 0 {
            return Err(PviError::Empty("regression data"));
        }
        if !(noise_sd > 0.0) || !(prior_var > 0.0) {
            return Err(PviError::Config("noise and prior scales must be positive".into()));
        }
        let d_in = data.features.cols();
        Ok(Self {
            net: MlpSpec::new(vec![d_in, d_h, 1], Activation::Relu, OutputTransform::Identity)?,
            d_in,
            d_h,
            inputs: data.features.clone(),
            responses: data.responses.clone(),
            noise_sd,
            prior_var,
        })
    }

    pub fn param_dim(d_in: usize, d_h: usize) -> usize {
        d_h + 1 + d_in * d_h + d_h
    }

    /// Maps `x` onto the network's layer-by-layer parameter layout.
    fn to_net(&self, x: &[f64]) -> Vec<f64> {
        let (d_in, d_h) = (self.d_in, self.d_h);
        let w1 = &x[d_h + 1..d_h + 1 + d_in * d_h];
        let b1 = &x[d_h + 1 + d_in * d_h..];
        let mut t = Vec::with_capacity(x.len());
        // column j of W₁ is the weight row of hidden unit j
        t.extend_from_slice(w1);
        t.extend_from_slice(b1);
        t.extend_from_slice(&x[..d_h]);
        t.push(x[d_h]);
        t
    }

    fn from_net(&self, t: &[f64]) -> Vec<f64> {
        let (d_in, d_h) = (self.d_in, self.d_h);
        let mut x = Vec::with_capacity(t.len());
        x.extend_from_slice(&t[d_in * d_h + d_h..d_in * d_h + 2 * d_h]);
        x.push(t[d_in * d_h + 2 * d_h]);
        x.extend_from_slice(&t[..d_in * d_h]);
        x.extend_from_slice(&t[d_in * d_h..d_in * d_h + d_h]);
        x
    }

    /// Network outputs at the given inputs.
    pub fn predict(&self, x: &[f64], inputs: &Matrix) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        Ok(self.net.forward_batch(&self.to_net(x), inputs)?.0.into_vec())
    }

    /// Smallest hidden pre-activation magnitude over the training inputs.
    pub fn min_hidden_preactivation(&self, x: &[f64]) -> Result<f64> {
        check_dim(x, self.dim())?;
        let t = self.to_net(x);
        let mut min = f64::INFINITY;
        for row in self.inputs.row_iter() {
            min = min.min(self.net.min_hidden_preactivation(&t, row)?);
        }
        Ok(min)
    }
}

impl Target for BnnRegression {
    fn name(&self) -> &str {
        "bnn_regression"
    }

    fn dim(&self) -> usize {
        Self::param_dim(self.d_in, self.d_h)
    }

    fn log_joint(&self, x: &[f64]) -> Result<f64> {
        let pred = self.predict(x, &self.inputs)?;
        let s2 = self.noise_sd * self.noise_sd;
        let n = pred.len() as f64;
        let d = x.len() as f64;
        let sse: f64 = pred.iter().zip(&self.responses).map(|(p, y)| (y - p) * (y - p)).sum();
        let loglik = -0.5 * sse / s2 - n * self.noise_sd.ln() - 0.5 * n * (2.0 * PI).ln();
        let logprior = -0.5 * x.iter().map(|v| v * v).sum::<f64>() / self.prior_var - 0.5 * d * (2.0 * PI * self.prior_var).ln();
        Ok(loglik + logprior)
    }

    fn grad_log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        let t = self.to_net(x);
        let (pred, tape) = self.net.forward_batch(&t, &self.inputs)?;
        let s2 = self.noise_sd * self.noise_sd;
        let cot: Vec<f64> = pred.as_slice().iter().zip(&self.responses).map(|(p, y)| (y - p) / s2).collect();
        let cot = Matrix::from_vec(cot.len(), 1, cot)?;
        let mut gt = vec![0.0; t.len()];
        self.net.backward_batch(&t, &tape, &cot, Some(&mut gt), false)?;
        let mut g = self.from_net(&gt);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi -= xi / self.prior_var;
        }
        Ok(g)
    }
}

/// Features and responses of a tabular dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub responses: Vec<f64>,
}

/// Per-column statistics used to standardize a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// `(mean, std)` of the response when it is standardized as well.
    pub response: Option<(f64, f64)>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardization {
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.features.cols() != self.feature_mean.len() {
            return Err(PviError::dim("standardization statistics do not match the feature count"));
        }
        let mut features = data.features.clone();
        for i in 0..features.rows() {
            for (j, v) in features.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.feature_mean[j]) / self.feature_std[j];
            }
        }
        let responses = match self.response {
            Some((m, s)) => data.responses.iter().map(|y| (y - m) / s).collect(),
            None => data.responses.clone(),
        };
        Ok(Dataset { features, responses })
    }
}

/// How [`Dataset::split`] partitions the rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitRule {
    /// Fraction of rows (rounded) assigned to the training set; the rest test.
    Fraction(f64),
    /// Exact train and test counts; rows beyond their sum are discarded.
    Counts(usize, usize),
}

impl Dataset {
    pub fn new(features: Matrix, responses: Vec<f64>) -> Result<Self> {
        if features.rows() != responses.len() {
            return Err(PviError::dim(format!(
                "{} feature rows but {} responses",
                features.rows(),
                responses.len()
            )));
        }
        if !features.is_finite() || responses.iter().any(|v| !v.is_finite()) {
            return Err(PviError::Data("dataset contains non-finite values".into()));
        }
        Ok(Self { features, responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Reads a comma-separated numeric table. Columns are zero-based.
    pub fn load_csv(path: &Path, feature_cols: &[usize], response_col: usize, has_header: bool) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut feats = Vec::new();
        let mut resp = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = i + 1 + usize::from(has_header);
            let cell = |c: usize| -> Result<f64> {
                let s = rec
                    .get(c)
                    .ok_or_else(|| PviError::Data(format!("{}: line {line}: missing column {}", path.display(), c + 1)))?;
                let v: f64 = s
                    .parse()
                    .map_err(|_| PviError::Data(format!("{}: line {line}, column {}: not a number: {s:?}", path.display(), c + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(PviError::Data(format!(
                        "{}: line {line}, column {}: non-finite value",
                        path.display(),
                        c + 1
                    )))
                }
            };
            for &c in feature_cols {
                feats.push(cell(c)?);
            }
            resp.push(cell(response_col)?);
        }
        if resp.is_empty() {
            return Err(PviError::Data(format!("{}: no data rows", path.display())));
        }
        Self::new(Matrix::from_vec(resp.len(), feature_cols.len(), feats)?, resp)
    }

    /// Writes features then response, with header `x_1,…,x_d,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = (1..=self.features.cols()).map(|i| format!("x_{i}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (row, y) in self.features.row_iter().zip(&self.responses) {
            w.write_record(row.iter().chain(std::iter::once(y)).map(|v| format!("{v:e}")))
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| PviError::io(path, e))
    }

    /// Statistics of this dataset (population standard deviation). Constant
    /// columns are rejected.
    pub fn standardization(&self, include_response: bool) -> Result<Standardization> {
        if self.len() < 2 {
            return Err(PviError::Data("standardization needs at least two rows".into()));
        }
        let mut feature_mean = Vec::new();
        let mut feature_std = Vec::new();
        for j in 0..self.features.cols() {
            let (m, s) = mean_std((0..self.len()).map(|i| self.features[(i, j)]));
            if !(s > 0.0) {
                return Err(PviError::Data(format!("feature column {} has zero variance", j + 1)));
            }
            feature_mean.push(m);
            feature_std.push(s);
        }
        let response = if include_response {
            let (m, s) = mean_std(self.responses.iter().copied());
            if !(s > 0.0) {
                return Err(PviError::Data("response has zero variance".into()));
            }
            Some((m, s))
        } else {
            None
        };
        Ok(Standardization {
            feature_mean,
            feature_std,
            response,
        })
    }

    /// Standardizes features and response with this dataset's own statistics.
    pub fn standardize(&self) -> Result<Dataset> {
        self.standardization(true)?.apply(self)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let d = self.features.cols();
        let mut f = Matrix::zeros(rows.len(), d);
        for (k, &i) in rows.iter().enumerate() {
            f.row_mut(k).copy_from_slice(self.features.row(i));
        }
        Dataset {
            features: f,
            responses: rows.iter().map(|&i| self.responses[i]).collect(),
        }
    }

    /// Seeded random train/test partition.
    pub fn split(&self, rule: SplitRule, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let (n_train, n_test) = match rule {
            SplitRule::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(PviError::Config(format!("train fraction {f} outside [0, 1]")));
                }
                let t = (f * n as f64).round() as usize;
                (t, n - t)
            }
            SplitRule::Counts(a, b) => {
                if a + b > n {
                    return Err(PviError::Config(format!("split {a}+{b} exceeds {n} rows")));
                }
                (a, b)
            }
        };
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        Ok((self.select(&idx[..n_train]), self.select(&idx[n_train..n_train + n_test])))
    }
}

/// The classical three-class waveform generator over 21 attributes: each
/// class is a random convex combination of two of three shifted triangular
/// waves plus unit Gaussian noise. Labels are binarized as class 0 versus the
/// other two.
pub fn generate_waveform(n: usize, rng: &mut Rng) -> Dataset {
    let h = |shift: i64| -> Vec<f64> { (1..=21i64).map(|i| (6 - (i - 11 - shift).abs()).max(0) as f64).collect() };
    let waves = [h(0), h(4), h(-4)];
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let mut f = Matrix::zeros(n, 21);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.below(3);
        let (a, b) = pairs[class];
        let u = rng.uniform();
        for (j, v) in f.row_mut(i).iter_mut().enumerate() {
            *v = u * waves[a][j] + (1.0 - u) * waves[b][j] + rng.normal();
        }
        y.push(if class == 0 { 1.0 } else { 0.0 });
    }
    Dataset { features: f, responses: y }
}
