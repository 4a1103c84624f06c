//! Seeded randomness and the small dense linear-algebra toolkit used by the
//! rest of the crate. Everything is double precision and row-major.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{PviError, Result};

/// SplitMix64 finalizer, used to derive sub-stream seeds from keys.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic random stream.
///
/// Identical seeds and call sequences produce identical outputs. Independent
/// sub-streams are derived by key with [`Rng::substream`], so that each
/// (iteration, purpose) pair of the flow owns a fixed stream regardless of
/// evaluation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream keyed by `key`, independent of `self`'s position.
    pub fn substream(&self, key: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(key.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    /// Stream keyed by a sequence of keys (e.g. iteration and purpose).
    pub fn keyed(&self, keys: &[u64]) -> Rng {
        keys.iter().fold(self.clone(), |acc, &k| acc.substream(k))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Uniformly distributed unit vector in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let n = norm(&v);
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }
}

/// `n` i.i.d. standard normal draws.
pub fn sample_std_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    rng.fill_normal(&mut out);
    out
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PviError::dim(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(PviError::dim(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width, handle the degenerate case
        let cols = self.cols.max(1);
        let n = if self.cols == 0 { 0 } else { self.rows };
        self.data.chunks_exact(cols).take(n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(PviError::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, Trans::No, other, Trans::No, 0.0, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(PviError::dim(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(PviError::dim(format!(
                "cannot apply transpose of {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.row_iter().zip(v) {
            axpy(vi, r, &mut out);
        }
        Ok(out)
    }

    pub fn scaled(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    /// Element-wise sum; shapes must agree.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(PviError::dim("matrix sum shape mismatch"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Largest absolute difference between the matrix and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c ← alpha·op(a)·op(b) + beta·c`. Shapes are checked with debug assertions
/// only; callers inside the crate construct them consistently.
pub fn gemm(alpha: f64, a: &Matrix, ta: Trans, b: &Matrix, tb: Trans, beta: f64, c: &mut Matrix) {
    let c_cols = c.cols;
    gemm_raw(
        alpha,
        (&a.data, a.rows, a.cols),
        ta,
        (&b.data, b.rows, b.cols),
        tb,
        beta,
        (&mut c.data, c.rows, c_cols),
    );
}

/// [`gemm`] on raw row-major buffers given as `(data, rows, cols)`.
pub(crate) fn gemm_raw(
    alpha: f64,
    a: (&[f64], usize, usize),
    ta: Trans,
    b: (&[f64], usize, usize),
    tb: Trans,
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let (a, ar, ac) = a;
    let (b, br, bc) = b;
    let (c, cr, cc) = c;
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    assert_eq!(c.len(), cr * cc);
    let (m, k, rsa, csa) = match ta {
        Trans::No => (ar, ac, ac as isize, 1),
        Trans::Yes => (ac, ar, 1, ac as isize),
    };
    let (kb, n, rsb, csb) = match tb {
        Trans::No => (br, bc, bc as isize, 1),
        Trans::Yes => (bc, br, 1, bc as isize),
    };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((cr, cc), (m, n), "output shape differs");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the strides describe in-bounds row-major views of the three
    // buffers, whose lengths were asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            cc as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y ← y + a·x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Shift-stable `log Σ exp(values)`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(PviError::Empty("logsumexp of an empty vector"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !max.is_finite() {
        return Ok(max);
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// In-place softmax of log-weights; returns their logsumexp.
pub(crate) fn softmax_in_place(logw: &mut [f64]) -> f64 {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        for v in logw.iter_mut() {
            *v = (*v - max).exp();
        }
    } else {
        for v in logw.iter_mut() {
            *v = exp_nonpositive(*v - max);
        }
    }
    let s: f64 = logw.iter().sum();
    let inv = 1.0 / s;
    for v in logw.iter_mut() {
        *v *= inv;
    }
    max + s.ln()
}

/// `e^x` for `x ≤ 0`, branch-free so that slice loops vectorize. Agrees with
/// `f64::exp` to a few ulp; NaN propagates.
#[inline]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = if x < -746.0 { -746.0 } else { x };
    let n = (x * std::f64::consts::LOG2_E + SHIFT) - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // 2^n as two factors so that n down to −1076 stays representable; the
    // integer parts are read back from the shifted floats' low bits
    let h = (n * 0.5 + SHIFT) - SHIFT;
    let base = SHIFT.to_bits();
    let bits = |v: f64| ((v + SHIFT).to_bits().wrapping_sub(base).wrapping_add(1023)) << 52;
    let f1 = f64::from_bits(bits(h));
    let f2 = f64::from_bits(bits(n - h));
    p * f1 * f2
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eigendecomposition `S = V·diag(values)·Vᵀ` of a symmetric matrix; the
/// columns of `vectors` are the eigenvectors.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    /// `V·diag(f(λ))·Vᵀ`.
    pub fn apply_fn(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= fl[j];
            }
        }
        let mut out = Matrix::zeros(n, n);
        gemm(1.0, &scaled, Trans::No, &self.vectors, Trans::Yes, 0.0, &mut out);
        out
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices. Only the symmetric part
/// of the input is used.
pub fn sym_eigen(s: &Matrix) -> Result<SymEigen> {
    if !s.is_square() {
        return Err(PviError::NotSquare {
            rows: s.rows,
            cols: s.cols,
        });
    }
    if !s.is_finite() {
        return Err(PviError::NonFinite("eigendecomposition input".into()));
    }
    let n = s.rows;
    let mut a = s.symmetrized();
    let mut v = Matrix::identity(n);
    let scale: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    Ok(SymEigen {
        values: (0..n).map(|i| a[(i, i)]).collect(),
        vectors: v,
    })
}

/// `exp((S + Sᵀ)/2)` via symmetric eigendecomposition.
pub fn sym_matrix_exp(s: &Matrix) -> Result<Matrix> {
    Ok(sym_eigen(s)?.apply_fn(f64::exp))
}

/// Divided differences of `exp` on the spectrum: `(e^a − e^b)/(a − b)`.
fn exp_divided_difference(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() < 1e-8 {
        // second-order expansion around the midpoint
        let m = 0.5 * (a + b);
        m.exp() * (1.0 + d * d / 24.0)
    } else {
        (a.exp() - b.exp()) / d
    }
}

/// Adjoint of the Fréchet derivative of the matrix exponential at the
/// symmetric matrix with decomposition `eig`, applied to the cotangent `g`:
/// `V·(F ∘ (Vᵀ g V))·Vᵀ` with `F_ij = (e^λi − e^λj)/(λi − λj)`.
pub fn sym_exp_frechet_adjoint(eig: &SymEigen, g: &Matrix) -> Matrix {
    let n = eig.values.len();
    let v = &eig.vectors;
    let mut tmp = Matrix::zeros(n, n);
    let mut inner = Matrix::zeros(n, n);
    gemm(1.0, v, Trans::Yes, g, Trans::No, 0.0, &mut tmp);
    gemm(1.0, &tmp, Trans::No, v, Trans::No, 0.0, &mut inner);
    for i in 0..n {
        for j in 0..n {
            inner[(i, j)] *= exp_divided_difference(eig.values[i], eig.values[j]);
        }
    }
    gemm(1.0, v, Trans::No, &inner, Trans::No, 0.0, &mut tmp);
    let mut out = Matrix::zeros(n, n);
    gemm(1.0, &tmp, Trans::No, v, Trans::Yes, 0.0, &mut out);
    out
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(PviError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(PviError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L·x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_upper_tr(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut rng = Rng::new(3);
        for i in 0..200_000 {
            let x = if i < 1000 { -(i as f64) * 0.75 } else { -rng.uniform() * 50.0 };
            let (a, b) = (exp_nonpositive(x), x.exp());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b + f64::MIN_POSITIVE, "{x}: {a} vs {b}");
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-800.0), 0.0);
        assert_eq!(exp_nonpositive(f64::NEG_INFINITY), 0.0);
        assert!(exp_nonpositive(f64::NAN).is_nan());
    }

    /// Scaling-and-squaring Taylor series, independent of the eigen route.
    fn taylor_expm(a: &Matrix) -> Matrix {
        let n = a.rows();
        let norm: f64 = a.as_slice().iter().map(|v| v.abs()).sum();
        let mut squarings = 0;
        while norm / 2f64.powi(squarings) > 0.5 {
            squarings += 1;
        }
        let scaled = a.scaled(1.0 / 2f64.powi(squarings));
        let mut term = Matrix::identity(n);
        let mut sum = Matrix::identity(n);
        for k in 1..=20 {
            term = term.matmul(&scaled).unwrap().scaled(1.0 / k as f64);
            sum = sum.add(&term).unwrap();
        }
        for _ in 0..squarings {
            sum = sum.matmul(&sum).unwrap();
        }
        sum
    }

    fn random_symmetric(rng: &mut Rng, n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn random_pd(rng: &mut Rng, n: usize) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        rng.fill_normal(a.as_mut_slice());
        let mut out = a.transpose().matmul(&a).unwrap();
        for i in 0..n {
            out[(i, i)] += 1.0;
        }
        out
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let l2 = 2f64.ln();
        assert!((logsumexp(&[l2, l2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let v = logsumexp(&[-1000.0, 0.0]).unwrap();
        assert!(v >= 0.0 && v < 1e-300 + 1e-15);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn logsumexp_shift_equivariance() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..7).map(|_| 5.0 * rng.normal()).collect();
            let c = 10.0 * rng.normal();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&x).unwrap() + c;
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn matrix_exp_trivial_cases() {
        let e = sym_matrix_exp(&Matrix::zeros(3, 3)).unwrap();
        assert!(e.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        let d = [0.3, -1.2, 2.0];
        let e = sym_matrix_exp(&Matrix::from_diag(&d)).unwrap();
        let expect = Matrix::from_diag(&d.map(f64::exp));
        assert!(e.max_abs_diff(&expect) < 1e-12);
        assert!(sym_matrix_exp(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn matrix_exp_matches_taylor_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let s = random_symmetric(&mut rng, 3);
            let e = sym_matrix_exp(&s).unwrap();
            let t = taylor_expm(&s);
            assert!(e.max_abs_diff(&t) < 1e-8, "diff {}", e.max_abs_diff(&t));
            assert!(e.asymmetry() < 1e-12);
            cholesky(&e).expect("exp of symmetric is PD");
        }
    }

    #[test]
    fn matrix_exp_spectrum() {
        let mut rng = Rng::new(5);
        let s = random_symmetric(&mut rng, 5);
        let mut lam = sym_eigen(&s).unwrap().values;
        let mut mu = sym_eigen(&sym_matrix_exp(&s).unwrap()).unwrap().values;
        lam.sort_by(f64::total_cmp);
        mu.sort_by(f64::total_cmp);
        for (l, m) in lam.iter().zip(&mu) {
            assert!((l.exp() - m).abs() < 1e-8 * m.max(1.0));
        }
    }

    #[test]
    fn frechet_adjoint_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let n = 4;
        let a = random_symmetric(&mut rng, n);
        let mut g = Matrix::zeros(n, n);
        rng.fill_normal(g.as_mut_slice());
        let eig = sym_eigen(&a).unwrap();
        let adj = sym_exp_frechet_adjoint(&eig, &g);
        // <g, D exp(A)[E]> = <adj, E> for symmetric directions E
        for _ in 0..5 {
            let e = random_symmetric(&mut rng, n);
            let h = 1e-5;
            let plus = sym_matrix_exp(&a.add(&e.scaled(h)).unwrap()).unwrap();
            let minus = sym_matrix_exp(&a.add(&e.scaled(-h)).unwrap()).unwrap();
            let fd: f64 = plus
                .as_slice()
                .iter()
                .zip(minus.as_slice())
                .zip(g.as_slice())
                .map(|((p, m), gv)| gv * (p - m) / (2.0 * h))
                .sum();
            let an = dot(adj.as_slice(), e.as_slice());
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn cholesky_examples() {
        assert!(cholesky(&Matrix::identity(3)).unwrap().max_abs_diff(&Matrix::identity(3)) == 0.0);
        let l = cholesky(&Matrix::from_diag(&[4.0, 4.0])).unwrap();
        assert!(l.max_abs_diff(&Matrix::from_diag(&[2.0, 2.0])) < 1e-15);
        let mut rng = Rng::new(2);
        let a = random_pd(&mut rng, 4);
        let l = cholesky(&a).unwrap();
        let rec = l.matmul(&l.transpose()).unwrap();
        assert!(rec.max_abs_diff(&a) < 1e-10);
        for i in 0..4 {
            assert!(l[(i, i)] > 0.0);
            for j in (i + 1)..4 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]]).unwrap();
        match cholesky(&a) {
            Err(PviError::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstruction_up_to_50() {
        let mut rng = Rng::new(8);
        for n in [1, 2, 7, 20, 50] {
            let a = random_pd(&mut rng, n);
            let l = cholesky(&a).unwrap();
            let rec = l.matmul(&l.transpose()).unwrap();
            assert!(rec.max_abs_diff(&a) < 1e-10 * a.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
    }

    #[test]
    fn triangular_solves() {
        let mut rng = Rng::new(4);
        let a = random_pd(&mut rng, 5);
        let l = cholesky(&a).unwrap();
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let y = solve_lower(&l, &b);
        let x = solve_upper_tr(&l, &y);
        let ax = a.matvec(&x).unwrap();
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn normal_draws_are_deterministic() {
        let a = sample_std_normal(&mut Rng::new(42), 100);
        let b = sample_std_normal(&mut Rng::new(42), 100);
        assert_eq!(a, b);
        let c = sample_std_normal(&mut Rng::new(43), 100);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let n = 1_000_000;
        let x = sample_std_normal(&mut Rng::new(1), n);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn substreams_are_uncorrelated() {
        let base = Rng::new(7);
        let n = 100_000;
        let a = sample_std_normal(&mut base.substream(0), n);
        let b = sample_std_normal(&mut base.substream(1), n);
        let corr = dot(&a, &b) / (norm(&a) * norm(&b));
        assert!(corr.abs() < 0.02, "corr {corr}");
        // keyed derivation does not depend on the parent's position
        let mut used = base.clone();
        used.normal();
        assert_eq!(
            sample_std_normal(&mut used.substream(5), 3),
            sample_std_normal(&mut base.substream(5), 3)
        );
    }

    #[test]
    fn gemm_transposes() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.to_rows(), vec![vec![4.0, 5.0], vec![10.0, 11.0]]);
        let mut c = Matrix::zeros(3, 3);
        gemm(1.0, &a, Trans::Yes, &a, Trans::No, 0.0, &mut c);
        assert_eq!(c, a.transpose().matmul(&a).unwrap());
        let mut d = Matrix::zeros(2, 2);
        gemm(1.0, &a, Trans::No, &a, Trans::Yes, 0.0, &mut d);
        assert_eq!(d, a.matmul(&a.transpose()).unwrap());
    }
}
