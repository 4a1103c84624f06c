//! Reparameterized Gaussian kernels `k_θ(x|z)`, sampled as
//! `φ_θ(z, ε) = mean_θ(z) + scale_θ(z)·ε` with `ε ~ N(0, I)`.
//!
//! Parameter layout per variant (flat vector, blocks in this order):
//!
//! | variant        | blocks                                   |
//! |----------------|------------------------------------------|
//! | `Constant`     | none                                     |
//! | `Push`         | MLP, log-σ                               |
//! | `Skip`         | MLP, log-σ                               |
//! | `LSkip`        | MLP, `W` (`d_x × d_z`), log-σ            |
//! | `LSkipHetero`  | MLP (outputs `2·d_x`), `W`               |
//! | `LSkipFullCov` | MLP, `W`, `M` (`d_x × d_x`)              |
//!
//! The heteroscedastic variant's network has one shared trunk; the first
//! `d_x` outputs are the mean head and the last `d_x` the scale head, so the
//! two heads differ only in their last layer.

use std::f64::consts::PI;

use crate::error::{PviError, Result};
use crate::mlp::{MlpSpec, MlpTape};
use crate::numerics::{gemm, sigmoid, softplus, sym_eigen, sym_exp_frechet_adjoint, Matrix, Rng, SymEigen, Trans};

#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `N(x; z, c·I)`.
    Constant { dim: usize, c: f64 },
    /// `N(x; f(z), σ²I)`.
    Push { net: MlpSpec },
    /// `N(x; z + f(z), σ²I)`.
    Skip { net: MlpSpec },
    /// `N(x; Wz + f(z), σ²I)`.
    LSkip { net: MlpSpec },
    /// `N(x; Wz + f(z), diag(σ(z)²))` with `σ(z) = softplus(g(z)) + eps0`.
    LSkipHetero { net: MlpSpec, eps0: f64 },
    /// `N(x; Wz + f(z), exp(sym(M)))`.
    LSkipFullCov { net: MlpSpec },
}

impl KernelSpec {
    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        Self::Constant { dim, c }.validated()
    }

    pub fn push(d_z: usize, d_h: usize, d_x: usize) -> Result<Self> {
        Self::Push {
            net: MlpSpec::nn(d_z, d_h, d_x)?,
        }
        .validated()
    }

    pub fn skip(dim: usize, d_h: usize) -> Result<Self> {
        Self::Skip {
            net: MlpSpec::nn(dim, d_h, dim)?,
        }
        .validated()
    }

    pub fn lskip(d_z: usize, d_h: usize, d_x: usize) -> Result<Self> {
        Self::LSkip {
            net: MlpSpec::nn(d_z, d_h, d_x)?,
        }
        .validated()
    }

    pub fn lskip_hetero(d_z: usize, d_h: usize, d_x: usize, eps0: f64) -> Result<Self> {
        Self::LSkipHetero {
            net: MlpSpec::nn(d_z, d_h, 2 * d_x)?,
            eps0,
        }
        .validated()
    }

    pub fn lskip_fullcov(d_z: usize, d_h: usize, d_x: usize) -> Result<Self> {
        Self::LSkipFullCov {
            net: MlpSpec::nn(d_z, d_h, d_x)?,
        }
        .validated()
    }

    /// Checks the variant invariants and returns `self`.
    pub fn validated(self) -> Result<Self> {
        match &self {
            KernelSpec::Constant { dim, c } => {
                if *dim == 0 {
                    return Err(PviError::Config("kernel dimension must be positive".into()));
                }
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(PviError::Config(format!("constant kernel variance {c} must be positive")));
                }
            }
            KernelSpec::Skip { net } => {
                if net.input_dim() != net.output_dim() {
                    return Err(PviError::Config(format!(
                        "skip kernel needs d_z = d_x, got {} and {}",
                        net.input_dim(),
                        net.output_dim()
                    )));
                }
            }
            KernelSpec::LSkipHetero { net, eps0 } => {
                if net.output_dim() % 2 != 0 {
                    return Err(PviError::Config("heteroscedastic kernel network needs 2·d_x outputs".into()));
                }
                if !(*eps0 >= 0.0) {
                    return Err(PviError::Config(format!("scale floor {eps0} must be non-negative")));
                }
            }
            _ => {}
        }
        Ok(self)
    }

    /// Variant tag used in checkpoints.
    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Constant { .. } => "constant",
            KernelSpec::Push { .. } => "push",
            KernelSpec::Skip { .. } => "skip",
            KernelSpec::LSkip { .. } => "lskip",
            KernelSpec::LSkipHetero { .. } => "lskip_hetero",
            KernelSpec::LSkipFullCov { .. } => "lskip_fullcov",
        }
    }

    pub fn net(&self) -> Option<&MlpSpec> {
        match self {
            KernelSpec::Constant { .. } => None,
            KernelSpec::Push { net }
            | KernelSpec::Skip { net }
            | KernelSpec::LSkip { net }
            | KernelSpec::LSkipHetero { net, .. }
            | KernelSpec::LSkipFullCov { net } => Some(net),
        }
    }

    pub fn d_z(&self) -> usize {
        match self {
            KernelSpec::Constant { dim, .. } => *dim,
            _ => self.net().expect("non-constant").input_dim(),
        }
    }

    pub fn d_x(&self) -> usize {
        match self {
            KernelSpec::Constant { dim, .. } => *dim,
            KernelSpec::LSkipHetero { net, .. } => net.output_dim() / 2,
            _ => self.net().expect("non-constant").output_dim(),
        }
    }

    fn has_w(&self) -> bool {
        matches!(
            self,
            KernelSpec::LSkip { .. } | KernelSpec::LSkipHetero { .. } | KernelSpec::LSkipFullCov { .. }
        )
    }

    fn net_len(&self) -> usize {
        self.net().map_or(0, MlpSpec::num_params)
    }

    fn w_len(&self) -> usize {
        if self.has_w() {
            self.d_x() * self.d_z()
        } else {
            0
        }
    }

    fn tail_len(&self) -> usize {
        match self {
            KernelSpec::Push { .. } | KernelSpec::Skip { .. } | KernelSpec::LSkip { .. } => 1,
            KernelSpec::LSkipFullCov { .. } => self.d_x() * self.d_x(),
            _ => 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.net_len() + self.w_len() + self.tail_len()
    }

    /// MLP from its own initializer, `W = 0`, log-σ = 0, `M = 0`.
    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut theta = vec![0.0; self.num_params()];
        if let Some(net) = self.net() {
            theta[..self.net_len()].copy_from_slice(&net.init_params(rng));
        }
        theta
    }

    pub fn params(&self, theta: &[f64]) -> Result<KernelParams> {
        self.check_params(theta)?;
        let (n, w) = (self.net_len(), self.w_len());
        let tail = &theta[n + w..];
        Ok(KernelParams {
            net: theta[..n].to_vec(),
            w: self
                .has_w()
                .then(|| Matrix::from_vec(self.d_x(), self.d_z(), theta[n..n + w].to_vec()).expect("sized")),
            log_sigma: matches!(self, KernelSpec::Push { .. } | KernelSpec::Skip { .. } | KernelSpec::LSkip { .. }).then(|| tail[0]),
            cov_param: matches!(self, KernelSpec::LSkipFullCov { .. })
                .then(|| Matrix::from_vec(self.d_x(), self.d_x(), tail.to_vec()).expect("sized")),
        })
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(PviError::dim(format!(
                "{} kernel expects {} parameters, got {}",
                self.name(),
                self.num_params(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(PviError::NonFinite("kernel parameters".into()));
        }
        Ok(())
    }

    /// Evaluates the `z`-dependent parts of the kernel at every row of `z`.
    pub fn evaluate(&self, theta: &[f64], z: &Matrix) -> Result<KernelBatch> {
        self.check_params(theta)?;
        if z.cols() != self.d_z() {
            return Err(PviError::dim(format!(
                "particles have {} columns, kernel d_z = {}",
                z.cols(),
                self.d_z()
            )));
        }
        let (m, d_x) = (z.rows(), self.d_x());
        let p = self.params(theta)?;
        let mut means = Matrix::zeros(m, d_x);
        let mut tape = None;
        let mut scale_pre = None;
        let mut scale = Scale::Iso(p.log_sigma.map_or(0.0, f64::exp));
        match self {
            KernelSpec::Constant { c, .. } => {
                means = z.clone();
                scale = Scale::Iso(c.sqrt());
            }
            KernelSpec::LSkipHetero { net, eps0 } => {
                let (out, t) = net.forward_batch(&p.net, z)?;
                let mut sig = Matrix::zeros(m, d_x);
                let mut pre = Matrix::zeros(m, d_x);
                for i in 0..m {
                    let row = out.row(i);
                    means.row_mut(i).copy_from_slice(&row[..d_x]);
                    pre.row_mut(i).copy_from_slice(&row[d_x..]);
                    for (s, &g) in sig.row_mut(i).iter_mut().zip(&row[d_x..]) {
                        *s = softplus(g) + eps0;
                    }
                }
                tape = Some(t);
                scale_pre = Some(pre);
                scale = Scale::Diag(sig);
            }
            _ => {
                let net = self.net().expect("non-constant");
                let (out, t) = net.forward_batch(&p.net, z)?;
                means = out;
                tape = Some(t);
            }
        }
        if matches!(self, KernelSpec::Skip { .. }) {
            for (mu, zv) in means.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *mu += zv;
            }
        }
        if let Some(w) = &p.w {
            gemm(1.0, z, Trans::No, w, Trans::Yes, 1.0, &mut means);
        }
        if let Some(cov) = &p.cov_param {
            scale = Scale::Full(FullScale::new(cov)?);
        }
        if !means.is_finite() {
            return Err(PviError::NonFinite("kernel mean".into()));
        }
        Ok(KernelBatch {
            z: z.clone(),
            means,
            scale,
            tape,
            scale_pre,
        })
    }

    fn single(&self, theta: &[f64], z: &[f64]) -> Result<KernelBatch> {
        if z.len() != self.d_z() {
            return Err(PviError::dim(format!("z has length {}, kernel d_z = {}", z.len(), self.d_z())));
        }
        self.evaluate(theta, &Matrix::from_vec(1, z.len(), z.to_vec())?)
    }

    fn check_x(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.d_x() {
            return Err(PviError::dim(format!("{what} has length {}, kernel d_x = {}", x.len(), self.d_x())));
        }
        Ok(())
    }

    /// `φ_θ(z, ε)`.
    pub fn sample(&self, theta: &[f64], z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        self.check_x(eps, "noise")?;
        let batch = self.single(theta, z)?;
        let mut out = vec![0.0; self.d_x()];
        batch.push_forward(0, eps, &mut out);
        Ok(out)
    }

    pub fn log_density(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<f64> {
        self.check_x(x, "x")?;
        Ok(self.single(theta, z)?.log_density(0, x))
    }

    pub fn grad_x_log_density(&self, theta: &[f64], x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x, "x")?;
        let mut out = vec![0.0; self.d_x()];
        self.single(theta, z)?.grad_x_log_density(0, x, &mut out);
        Ok(out)
    }

    /// `(∇_θ φ_θ(z, ε))·v`.
    pub fn vjp_theta(&self, theta: &[f64], z: &[f64], eps: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let (batch, cot) = self.single_cotangent(theta, z, eps, cotangent)?;
        let mut g = vec![0.0; self.num_params()];
        batch.pullback(self, theta, &cot, Some(&mut g), false)?;
        Ok(g)
    }

    /// `(∇_z φ_θ(z, ε))·v`.
    pub fn vjp_z(&self, theta: &[f64], z: &[f64], eps: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let (batch, cot) = self.single_cotangent(theta, z, eps, cotangent)?;
        let gz = batch.pullback(self, theta, &cot, None, true)?;
        Ok(gz.expect("requested").into_vec())
    }

    fn single_cotangent(&self, theta: &[f64], z: &[f64], eps: &[f64], cotangent: &[f64]) -> Result<(KernelBatch, Cotangents)> {
        self.check_x(eps, "noise")?;
        self.check_x(cotangent, "cotangent")?;
        let batch = self.single(theta, z)?;
        let mut cot = batch.cotangents();
        cot.add(0, eps, cotangent);
        Ok((batch, cot))
    }
}

/// Structured view of a flat kernel parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub net: Vec<f64>,
    pub w: Option<Matrix>,
    pub log_sigma: Option<f64>,
    pub cov_param: Option<Matrix>,
}

impl KernelParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.net.clone();
        if let Some(w) = &self.w {
            out.extend_from_slice(w.as_slice());
        }
        out.extend(self.log_sigma);
        if let Some(m) = &self.cov_param {
            out.extend_from_slice(m.as_slice());
        }
        out
    }
}

/// Precomputed square root `S = exp(A/2)` of `Σ = exp(A)`, `A = sym(M)`.
#[derive(Clone, Debug)]
pub struct FullScale {
    half_eig: SymEigen,
    s: Matrix,
    s_inv: Matrix,
    log_det: f64,
}

impl FullScale {
    fn new(cov_param: &Matrix) -> Result<Self> {
        let half_eig = sym_eigen(&cov_param.scaled(0.5))?;
        let s = half_eig.apply_fn(f64::exp);
        let s_inv = half_eig.apply_fn(|l| (-l).exp());
        let log_det = 2.0 * half_eig.values.iter().sum::<f64>();
        Ok(Self {
            half_eig,
            s,
            s_inv,
            log_det,
        })
    }

    pub fn covariance(&self) -> Matrix {
        self.half_eig.apply_fn(|l| (2.0 * l).exp())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.half_eig.values.iter().map(|l| (2.0 * l).exp()).collect()
    }
}

#[derive(Clone, Debug)]
pub enum Scale {
    /// Shared standard deviation.
    Iso(f64),
    /// Per-particle standard deviations, `M × d_x`.
    Diag(Matrix),
    Full(FullScale),
}

/// The kernel evaluated at a fixed set of particles.
#[derive(Clone, Debug)]
pub struct KernelBatch {
    z: Matrix,
    means: Matrix,
    scale: Scale,
    tape: Option<MlpTape>,
    scale_pre: Option<Matrix>,
}

/// Per-particle aggregated cotangents of `φ`. Because the pullback is linear
/// in the cotangent, summing `Σ_l d_l` for the mean and `Σ_l d_l ⊗ ε_l` for the
/// scale before a single backward pass gives the same result as summing the
/// individual VJPs.
#[derive(Clone, Debug)]
pub struct Cotangents {
    mean: Matrix,
    scale: ScaleCotangent,
}

#[derive(Clone, Debug)]
enum ScaleCotangent {
    /// `Σ ⟨ε, d⟩` over everything.
    Iso(f64),
    /// Per particle `Σ_l d_l ∘ ε_l`.
    Diag(Matrix),
    /// `Σ d εᵀ` over everything.
    Full(Matrix),
}

impl Cotangents {
    /// Accumulates the cotangent `d` of the sample `φ(Z_m, ε)`.
    pub fn add(&mut self, m: usize, eps: &[f64], d: &[f64]) {
        for (c, v) in self.mean.row_mut(m).iter_mut().zip(d) {
            *c += v;
        }
        match &mut self.scale {
            ScaleCotangent::Iso(s) => *s += eps.iter().zip(d).map(|(e, v)| e * v).sum::<f64>(),
            ScaleCotangent::Diag(g) => {
                for ((c, e), v) in g.row_mut(m).iter_mut().zip(eps).zip(d) {
                    *c += e * v;
                }
            }
            ScaleCotangent::Full(g) => {
                let n = eps.len();
                let gs = g.as_mut_slice();
                for (i, v) in d.iter().enumerate() {
                    for (j, e) in eps.iter().enumerate() {
                        gs[i * n + j] += v * e;
                    }
                }
            }
        }
    }

    /// Multiplies every accumulated entry by `a`.
    pub fn scale_by(&mut self, a: f64) {
        for v in self.mean.as_mut_slice() {
            *v *= a;
        }
        match &mut self.scale {
            ScaleCotangent::Iso(s) => *s *= a,
            ScaleCotangent::Diag(g) | ScaleCotangent::Full(g) => {
                for v in g.as_mut_slice() {
                    *v *= a;
                }
            }
        }
    }
}

impl KernelBatch {
    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.rows() == 0
    }

    pub fn d_x(&self) -> usize {
        self.means.cols()
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn scale(&self) -> &Scale {
        &self.scale
    }

    /// Covariance of component `m`.
    pub fn covariance(&self, m: usize) -> Matrix {
        match &self.scale {
            Scale::Iso(s) => Matrix::identity(self.d_x()).scaled(s * s),
            Scale::Diag(sig) => Matrix::from_diag(&sig.row(m).iter().map(|s| s * s).collect::<Vec<_>>()),
            Scale::Full(f) => f.covariance(),
        }
    }

    /// Writes `φ(Z_m, ε)` into `out`.
    pub fn push_forward(&self, m: usize, eps: &[f64], out: &mut [f64]) {
        let mu = self.means.row(m);
        match &self.scale {
            Scale::Iso(s) => {
                for ((o, &u), &e) in out.iter_mut().zip(mu).zip(eps) {
                    *o = u + s * e;
                }
            }
            Scale::Diag(sig) => {
                for (((o, &u), &s), &e) in out.iter_mut().zip(mu).zip(sig.row(m)).zip(eps) {
                    *o = u + s * e;
                }
            }
            Scale::Full(f) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = mu[i] + f.s.row(i).iter().zip(eps).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    /// `log k(x | Z_m)`.
    pub fn log_density(&self, m: usize, x: &[f64]) -> f64 {
        let d = self.d_x() as f64;
        let mu = self.means.row(m);
        match &self.scale {
            Scale::Iso(s) => {
                let q: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * q / (s * s) - d * s.ln() - 0.5 * d * (2.0 * PI).ln()
            }
            Scale::Diag(sig) => {
                let mut acc = -0.5 * d * (2.0 * PI).ln();
                for ((&a, &b), &s) in x.iter().zip(mu).zip(sig.row(m)) {
                    let r = (a - b) / s;
                    acc -= 0.5 * r * r + s.ln();
                }
                acc
            }
            Scale::Full(f) => {
                let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                let y = f.s_inv.matvec(&diff).expect("square");
                -0.5 * y.iter().map(|v| v * v).sum::<f64>() - 0.5 * f.log_det - 0.5 * d * (2.0 * PI).ln()
            }
        }
    }

    /// `∇_x log k(x | Z_m)`.
    pub fn grad_x_log_density(&self, m: usize, x: &[f64], out: &mut [f64]) {
        let mu = self.means.row(m);
        match &self.scale {
            Scale::Iso(s) => {
                let p = 1.0 / (s * s);
                for ((o, &a), &b) in out.iter_mut().zip(x).zip(mu) {
                    *o = -(a - b) * p;
                }
            }
            Scale::Diag(sig) => {
                for (((o, &a), &b), &s) in out.iter_mut().zip(x).zip(mu).zip(sig.row(m)) {
                    *o = -(a - b) / (s * s);
                }
            }
            Scale::Full(f) => {
                let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                let y = f.s_inv.matvec(&diff).expect("square");
                let g = f.s_inv.matvec(&y).expect("square");
                for (o, v) in out.iter_mut().zip(g) {
                    *o = -v;
                }
            }
        }
    }

    /// `log k(x_i | Z_j)` for every row `x_i` and component `j`.
    pub fn component_log_densities(&self, x: &Matrix) -> Matrix {
        let (n, m, d) = (x.rows(), self.len(), self.d_x());
        let mut out = Matrix::zeros(n, m);
        let norm = -0.5 * d as f64 * (2.0 * PI).ln();
        match &self.scale {
            Scale::Iso(s) => {
                let (p, c) = (-0.5 / (s * s), norm - d as f64 * s.ln());
                for i in 0..n {
                    let xi = x.row(i);
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        let q: f64 = xi.iter().zip(self.means.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        *o = p * q + c;
                    }
                }
            }
            Scale::Diag(sig) => {
                let consts: Vec<f64> = sig.row_iter().map(|r| norm - r.iter().map(|s| s.ln()).sum::<f64>()).collect();
                let inv: Vec<f64> = sig.as_slice().iter().map(|s| 1.0 / s).collect();
                for i in 0..n {
                    let xi = x.row(i);
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        let q: f64 = xi
                            .iter()
                            .zip(self.means.row(j))
                            .zip(&inv[j * d..(j + 1) * d])
                            .map(|((a, b), w)| {
                                let r = (a - b) * w;
                                r * r
                            })
                            .sum();
                        *o = consts[j] - 0.5 * q;
                    }
                }
            }
            Scale::Full(f) => {
                // whiten both the points and the means, then use squared distances
                let mut y = Matrix::zeros(n, d);
                gemm(1.0, x, Trans::No, &f.s_inv, Trans::Yes, 0.0, &mut y);
                let mut nu = Matrix::zeros(m, d);
                gemm(1.0, &self.means, Trans::No, &f.s_inv, Trans::Yes, 0.0, &mut nu);
                let c = norm - 0.5 * f.log_det;
                for i in 0..n {
                    let yi = y.row(i);
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        let q: f64 = yi.iter().zip(nu.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        *o = c - 0.5 * q;
                    }
                }
            }
        }
        out
    }

    /// `Σ_j w_j ∇_x log k(x | Z_j)` for mixture weights `w`.
    pub fn weighted_score(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let d = self.d_x();
        match &self.scale {
            Scale::Iso(_) | Scale::Full(_) => {
                let mut bar = vec![0.0; d];
                for (j, &wj) in w.iter().enumerate() {
                    if wj != 0.0 {
                        for (b, u) in bar.iter_mut().zip(self.means.row(j)) {
                            *b += wj * u;
                        }
                    }
                }
                self.grad_x_log_density_at_mean(x, &bar, out);
            }
            Scale::Diag(sig) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, &wj) in w.iter().enumerate() {
                    if wj != 0.0 {
                        for (((o, &a), &b), &s) in out.iter_mut().zip(x).zip(self.means.row(j)).zip(sig.row(j)) {
                            *o -= wj * (a - b) / (s * s);
                        }
                    }
                }
            }
        }
    }

    /// Row-wise [`Self::weighted_score`] for a table of weights (`n × M`).
    pub fn weighted_scores(&self, x: &Matrix, w: &Matrix, out: &mut [f64]) {
        let d = self.d_x();
        match &self.scale {
            Scale::Diag(_) => {
                for i in 0..x.rows() {
                    self.weighted_score(x.row(i), w.row(i), &mut out[i * d..(i + 1) * d]);
                }
            }
            _ => {
                let mut bar = Matrix::zeros(x.rows(), d);
                gemm(1.0, w, Trans::No, &self.means, Trans::No, 0.0, &mut bar);
                for i in 0..x.rows() {
                    self.grad_x_log_density_at_mean(x.row(i), bar.row(i), &mut out[i * d..(i + 1) * d]);
                }
            }
        }
    }

    /// Score of a homoscedastic component with mean `mu`.
    fn grad_x_log_density_at_mean(&self, x: &[f64], mu: &[f64], out: &mut [f64]) {
        match &self.scale {
            Scale::Iso(s) => {
                let p = 1.0 / (s * s);
                for ((o, &a), &b) in out.iter_mut().zip(x).zip(mu) {
                    *o = -(a - b) * p;
                }
            }
            Scale::Full(f) => {
                let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                let y = f.s_inv.matvec(&diff).expect("square");
                let g = f.s_inv.matvec(&y).expect("square");
                for (o, v) in out.iter_mut().zip(g) {
                    *o = -v;
                }
            }
            Scale::Diag(_) => unreachable!("heteroscedastic scores are per component"),
        }
    }

    /// Zeroed cotangent accumulator matching this batch.
    pub fn cotangents(&self) -> Cotangents {
        let (m, d) = (self.len(), self.d_x());
        Cotangents {
            mean: Matrix::zeros(m, d),
            scale: match &self.scale {
                Scale::Iso(_) => ScaleCotangent::Iso(0.0),
                Scale::Diag(_) => ScaleCotangent::Diag(Matrix::zeros(m, d)),
                Scale::Full(_) => ScaleCotangent::Full(Matrix::zeros(d, d)),
            },
        }
    }

    /// Pulls the accumulated cotangents back to `θ` (added into `grad_theta`)
    /// and, when `want_z` is set, to the particles.
    pub fn pullback(
        &self,
        spec: &KernelSpec,
        theta: &[f64],
        cot: &Cotangents,
        mut grad_theta: Option<&mut [f64]>,
        want_z: bool,
    ) -> Result<Option<Matrix>> {
        spec.check_params(theta)?;
        if let Some(g) = grad_theta.as_deref() {
            if g.len() != theta.len() {
                return Err(PviError::dim("gradient buffer length differs from θ"));
            }
        }
        let (m, d_x, d_z) = (self.len(), self.d_x(), spec.d_z());
        let (n_net, n_w) = (spec.net_len(), spec.w_len());
        let mut gz = want_z.then(|| Matrix::zeros(m, d_z));

        if let KernelSpec::Constant { .. } = spec {
            if let Some(gz) = gz.as_mut() {
                gz.as_mut_slice().copy_from_slice(cot.mean.as_slice());
            }
            return Ok(gz);
        }

        let net = spec.net().expect("non-constant");
        let net_cot = match (spec, &cot.scale) {
            (KernelSpec::LSkipHetero { .. }, ScaleCotangent::Diag(gs)) => {
                let pre = self.scale_pre.as_ref().expect("hetero batch records pre-activations");
                let mut c = Matrix::zeros(m, 2 * d_x);
                for i in 0..m {
                    let row = c.row_mut(i);
                    row[..d_x].copy_from_slice(cot.mean.row(i));
                    for ((o, &g), &p) in row[d_x..].iter_mut().zip(gs.row(i)).zip(pre.row(i)) {
                        *o = g * sigmoid(p);
                    }
                }
                c
            }
            _ => cot.mean.clone(),
        };
        let tape = self.tape.as_ref().expect("network batch records a tape");
        let net_gz = net.backward_batch(
            &theta[..n_net],
            tape,
            &net_cot,
            grad_theta.as_deref_mut().map(|g| &mut g[..n_net]),
            want_z,
        )?;
        if let (Some(gz), Some(ng)) = (gz.as_mut(), net_gz) {
            *gz = ng;
        }
        if matches!(spec, KernelSpec::Skip { .. }) {
            if let Some(gz) = gz.as_mut() {
                for (g, c) in gz.as_mut_slice().iter_mut().zip(cot.mean.as_slice()) {
                    *g += c;
                }
            }
        }
        if spec.has_w() {
            if let Some(g) = grad_theta.as_deref_mut() {
                let mut gw = Matrix::zeros(d_x, d_z);
                gemm(1.0, &cot.mean, Trans::Yes, &self.z, Trans::No, 0.0, &mut gw);
                for (a, b) in g[n_net..n_net + n_w].iter_mut().zip(gw.as_slice()) {
                    *a += b;
                }
            }
            if let Some(gz) = gz.as_mut() {
                let w = Matrix::from_vec(d_x, d_z, theta[n_net..n_net + n_w].to_vec())?;
                gemm(1.0, &cot.mean, Trans::No, &w, Trans::No, 1.0, gz);
            }
        }
        if let Some(g) = grad_theta.as_deref_mut() {
            let tail = &mut g[n_net + n_w..];
            match (&self.scale, &cot.scale) {
                (Scale::Iso(s), ScaleCotangent::Iso(c)) if !tail.is_empty() => tail[0] += s * c,
                (Scale::Full(f), ScaleCotangent::Full(gs)) => {
                    // S = exp(A/2), A = (M + Mᵀ)/2
                    let ga = sym_exp_frechet_adjoint(&f.half_eig, gs).scaled(0.5);
                    let n = d_x;
                    for i in 0..n {
                        for j in 0..n {
                            tail[i * n + j] += 0.5 * (ga[(i, j)] + ga[(j, i)]);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(gz)
    }
}
