//! Sample-based comparison against ground truth.

use std::path::Path;

use crate::error::{PviError, Result};
use crate::numerics::{sq_dist, Matrix, Rng};
use crate::sid::csv_error;
use crate::targets::Target;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Sid,
    Target,
    Oracle,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Sid => "sid",
            Provenance::Target => "target",
            Provenance::Oracle => "oracle",
        }
    }
}

/// Finite points tagged with where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Matrix,
    provenance: Provenance,
}

impl SampleSet {
    pub fn new(points: Matrix, provenance: Provenance) -> Result<Self> {
        if !points.is_finite() {
            return Err(PviError::NonFinite(format!("{} samples", provenance.as_str())));
        }
        Ok(Self { points, provenance })
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// `n` rows chosen without replacement.
    pub fn subsample(&self, n: usize, rng: &mut Rng) -> SampleSet {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let mut points = Matrix::zeros(n, self.dim());
        for (r, &i) in idx[..n].iter().enumerate() {
            points.row_mut(r).copy_from_slice(self.points.row(i));
        }
        SampleSet {
            points,
            provenance: self.provenance,
        }
    }
}

fn check_pair(x: &SampleSet, y: &SampleSet) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(PviError::dim(format!("sample dimensions {} and {}", x.dim(), y.dim())));
    }
    if x.len() < 2 || y.len() < 2 {
        return Err(PviError::Empty("at least two samples per set"));
    }
    Ok(())
}

/// Sliced 2-Wasserstein distance `√(mean_u W₂²(u·X, u·Y))` over `n_proj`
/// uniform directions. The larger set is subsampled to the smaller size.
pub fn sliced_wasserstein(x: &SampleSet, y: &SampleSet, n_proj: usize, rng: &mut Rng) -> Result<f64> {
    check_pair(x, y)?;
    if n_proj == 0 {
        return Err(PviError::Config("need at least one projection".into()));
    }
    let n = x.len().min(y.len());
    let x = x.subsample(n, &mut rng.substream(0));
    let y = y.subsample(n, &mut rng.substream(1));
    let mut dirs = rng.substream(2);
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let u = dirs.unit_vector(x.dim());
        for (p, r) in px.iter_mut().zip(x.points.row_iter()) {
            *p = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        }
        for (p, r) in py.iter_mut().zip(y.points.row_iter()) {
            *p = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        }
        px.sort_by(f64::total_cmp);
        py.sort_by(f64::total_cmp);
        total += px.iter().zip(&py).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64;
    }
    Ok((total / n_proj as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmdTest {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub bandwidth: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Biased MMD² between the points flagged in `in_x` and the rest.
fn mmd_from_gram(gram: &[f64], total: usize, in_x: &[bool], n_x: usize) -> f64 {
    let n_y = total - n_x;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..total {
        let row = &gram[i * total..(i + 1) * total];
        for (j, &k) in row.iter().enumerate() {
            match (in_x[i], in_x[j]) {
                (true, true) => sxx += k,
                (false, false) => syy += k,
                _ => sxy += k,
            }
        }
    }
    sxx / (n_x * n_x) as f64 + syy / (n_y * n_y) as f64 - sxy / (n_x * n_y) as f64
}

/// Gaussian-kernel two-sample permutation test with the median-distance
/// bandwidth. Memory grows with the square of the pooled size, so large sets
/// should be subsampled first.
pub fn mmd_permutation_test(x: &SampleSet, y: &SampleSet, n_perm: usize, alpha: f64, rng: &mut Rng) -> Result<MmdTest> {
    check_pair(x, y)?;
    if n_perm < 99 {
        return Err(PviError::Config(format!("n_perm = {n_perm}, need at least 99")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PviError::Config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let pooled: Vec<&[f64]> = x.points.row_iter().chain(y.points.row_iter()).collect();
    let total = pooled.len();
    let mut sq = vec![0.0; total * total];
    let mut upper = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            let d = sq_dist(pooled[i], pooled[j]);
            sq[i * total + j] = d;
            sq[j * total + i] = d;
            upper.push(d);
        }
    }
    let degenerate = MmdTest {
        statistic: 0.0,
        p_value: 1.0,
        reject: false,
        bandwidth: 0.0,
    };
    if upper.iter().all(|&d| d == 0.0) {
        return Ok(degenerate);
    }
    let mut h2 = median(&mut upper.iter().map(|d| d.sqrt()).collect::<Vec<_>>()).powi(2);
    if h2 == 0.0 {
        // more than half the pairs coincide; fall back to the nonzero pairs
        h2 = median(&mut upper.iter().filter(|&&d| d > 0.0).map(|d| d.sqrt()).collect::<Vec<_>>()).powi(2);
    }
    let gram: Vec<f64> = sq.iter().map(|d| (-d / (2.0 * h2)).exp()).collect();
    let mut labels: Vec<bool> = (0..total).map(|i| i < x.len()).collect();
    let statistic = mmd_from_gram(&gram, total, &labels, x.len()).max(0.0);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        rng.shuffle(&mut labels);
        if mmd_from_gram(&gram, total, &labels, x.len()) >= statistic - 1e-12 {
            exceed += 1;
        }
    }
    let p_value = (1 + exceed) as f64 / (1 + n_perm) as f64;
    Ok(MmdTest {
        statistic,
        p_value,
        reject: p_value <= alpha,
        bandwidth: h2.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinConfig {
    pub step: f64,
    pub n_burn: usize,
    /// Kept samples in total, split evenly across chains.
    pub n_keep: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub metropolis: bool,
    /// Adapt the step during burn-in toward this acceptance rate (MALA only).
    pub target_acceptance: Option<f64>,
    /// Chains start at `init + N(0, I)`; zero when empty.
    pub init: Vec<f64>,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            n_burn: 1000,
            n_keep: 10_000,
            thin: 1,
            n_chains: 4,
            metropolis: true,
            target_acceptance: Some(0.574),
            init: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleOutput {
    pub samples: SampleSet,
    /// Post-burn-in acceptance rate; 1 for unadjusted chains.
    pub acceptance_rate: f64,
    /// Final (possibly adapted) step size per chain.
    pub steps: Vec<f64>,
}

/// Langevin chains `X ← X + h∇log p(X) + √(2h)η`, optionally with a
/// Metropolis correction.
pub fn langevin_oracle(target: &dyn Target, config: &LangevinConfig, rng: &mut Rng) -> Result<OracleOutput> {
    let d = target.dim();
    if !(config.step > 0.0) || config.n_chains == 0 || config.thin == 0 || config.n_keep == 0 {
        return Err(PviError::Config(
            "Langevin oracle needs step > 0 and positive chain, thin and keep counts".into(),
        ));
    }
    if !config.init.is_empty() && config.init.len() != d {
        return Err(PviError::dim(format!(
            "oracle init has {} entries, target dimension {d}",
            config.init.len()
        )));
    }
    let per_chain = config.n_keep.div_ceil(config.n_chains);
    let mut out = Matrix::zeros(config.n_keep, d);
    let mut row = 0;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let mut steps = Vec::with_capacity(config.n_chains);
    for c in 0..config.n_chains {
        let mut crng = rng.substream(c as u64);
        let mut x: Vec<f64> = (0..d).map(|j| config.init.get(j).copied().unwrap_or(0.0) + crng.normal()).collect();
        let mut lp = target.log_joint(&x)?;
        let mut g = target.grad_log_joint(&x)?;
        let mut h = config.step;
        let total = config.n_burn + per_chain * config.thin;
        for t in 0..total {
            let burning = t < config.n_burn;
            let sd = (2.0 * h).sqrt();
            let prop: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + h * b + sd * crng.normal()).collect();
            let diverged = |h: f64| PviError::Divergence {
                iteration: t,
                what: format!("Langevin chain {c} left the finite range; use a smaller step than {h:e}"),
            };
            if prop.iter().any(|v| !v.is_finite()) {
                return Err(diverged(h));
            }
            let mut accept = true;
            let (mut lp_new, mut g_new) = (0.0, Vec::new());
            if config.metropolis {
                lp_new = target.log_joint(&prop)?;
                g_new = target.grad_log_joint(&prop)?;
                // log q(x | x') − log q(x' | x) for the Gaussian proposal
                let fwd: f64 = prop.iter().zip(&x).zip(&g).map(|((p, a), b)| (p - a - h * b).powi(2)).sum();
                let bwd: f64 = x.iter().zip(&prop).zip(&g_new).map(|((a, p), b)| (a - p - h * b).powi(2)).sum();
                let log_ratio = lp_new - lp + (fwd - bwd) / (4.0 * h);
                accept = log_ratio.is_finite() && crng.uniform().ln() < log_ratio;
                if let Some(target_rate) = config.target_acceptance {
                    if burning {
                        let a = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
                        h *= ((a - target_rate) / (1.0 + t as f64).sqrt()).exp();
                    }
                }
                if !burning {
                    proposed += 1;
                    accepted += accept as usize;
                }
            }
            if accept {
                if !config.metropolis {
                    g_new = target.grad_log_joint(&prop)?;
                    if g_new.iter().any(|v| !v.is_finite()) {
                        return Err(diverged(h));
                    }
                }
                x = prop;
                lp = lp_new;
                g = g_new;
            }
            if !burning && (t - config.n_burn + 1) % config.thin == 0 && row < config.n_keep {
                out.row_mut(row).copy_from_slice(&x);
                row += 1;
            }
        }
        steps.push(h);
    }
    Ok(OracleOutput {
        samples: SampleSet::new(out, Provenance::Oracle)?,
        acceptance_rate: if proposed == 0 { 1.0 } else { accepted as f64 / proposed as f64 },
        steps,
    })
}

/// Sample mean, unbiased covariance and correlations. Correlations involving a
/// zero-variance coordinate are undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    corr: Matrix,
    defined: Vec<bool>,
}

impl Moments {
    pub fn corr(&self, i: usize, j: usize) -> Option<f64> {
        (self.defined[i] && self.defined[j]).then(|| self.corr[(i, j)])
    }

    pub fn std(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)].sqrt()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn moments(s: &SampleSet) -> Result<Moments> {
    let (n, d) = (s.len(), s.dim());
    if n < 2 {
        return Err(PviError::Empty("at least two samples for moments"));
    }
    let mut mean = vec![0.0; d];
    for r in s.points.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in s.points.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(r).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= (n - 1) as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    let defined: Vec<bool> = (0..d).map(|i| cov[(i, i)] > 0.0).collect();
    let mut corr = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            corr[(i, j)] = if i == j {
                1.0
            } else if defined[i] && defined[j] {
                (cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(Moments { mean, cov, corr, defined })
}

/// Largest absolute differences of means and standard deviations, and the mean
/// absolute deviation of the off-diagonal correlations defined in both.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentComparison {
    pub max_mean_diff: f64,
    pub max_std_diff: f64,
    pub mean_corr_diff: f64,
}

pub fn compare_moments(a: &Moments, b: &Moments) -> Result<MomentComparison> {
    if a.dim() != b.dim() {
        return Err(PviError::dim("moment dimensions differ"));
    }
    let max_abs = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..a.dim() {
        for j in (i + 1)..a.dim() {
            if let (Some(x), Some(y)) = (a.corr(i, j), b.corr(i, j)) {
                acc += (x - y).abs();
                count += 1;
            }
        }
    }
    Ok(MomentComparison {
        max_mean_diff: max_abs(&a.mean, &b.mean),
        max_std_diff: max_abs(&a.std(), &b.std()),
        mean_corr_diff: if count == 0 { 0.0 } else { acc / count as f64 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoMeans {
    pub centers: [Vec<f64>; 2],
    pub counts: [usize; 2],
    pub inertia: f64,
}

/// Lloyd's algorithm with two clusters, best of several seeded restarts.
pub fn two_means(points: &Matrix, rng: &mut Rng) -> Result<TwoMeans> {
    let n = points.rows();
    if n < 2 {
        return Err(PviError::Empty("at least two points to cluster"));
    }
    let mut best: Option<TwoMeans> = None;
    for _ in 0..8 {
        // k-means++ seeding
        let first = points.row(rng.below(n)).to_vec();
        let d2: Vec<f64> = points.row_iter().map(|r| sq_dist(r, &first)).collect();
        let total: f64 = d2.iter().sum();
        let second = if total == 0.0 {
            first.clone()
        } else {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > u {
                    pick = i;
                    break;
                }
            }
            points.row(pick).to_vec()
        };
        let mut centers = [first, second];
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, r) in points.row_iter().enumerate() {
                let l = usize::from(sq_dist(r, &centers[1]) < sq_dist(r, &centers[0]));
                changed |= l != labels[i];
                labels[i] = l;
            }
            for (k, c) in centers.iter_mut().enumerate() {
                let members: Vec<&[f64]> = points.row_iter().zip(&labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
                if !members.is_empty() {
                    for (j, cj) in c.iter_mut().enumerate() {
                        *cj = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.row_iter().zip(&labels).map(|(r, &l)| sq_dist(r, &centers[l])).sum();
        let ones = labels.iter().sum::<usize>();
        let cand = TwoMeans {
            centers,
            counts: [n - ones, ones],
            inertia,
        };
        if best.as_ref().is_none_or(|b| cand.inertia < b.inertia) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// RMSE of the predictive mean `(1/S) Σ_s f(x_s)` over the rows of `samples`.
pub fn predictive_rmse(samples: &Matrix, predict: impl Fn(&[f64]) -> Result<Vec<f64>>, responses: &[f64]) -> Result<f64> {
    if samples.rows() == 0 || responses.is_empty() {
        return Err(PviError::Empty("predictive samples and responses"));
    }
    let mut mean = vec![0.0; responses.len()];
    for x in samples.row_iter() {
        let y = predict(x)?;
        if y.len() != responses.len() {
            return Err(PviError::dim(format!("{} predictions for {} responses", y.len(), responses.len())));
        }
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v;
        }
    }
    let s = samples.rows() as f64;
    let mse = mean.iter().zip(responses).map(|(m, y)| (m / s - y).powi(2)).sum::<f64>() / responses.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

/// Rows of `metric,value,n,seed`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub const HEADER: [&'static str; 4] = ["metric", "value", "n", "seed"];

    pub fn push(&mut self, metric: &str, value: f64, n: usize, seed: u64) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            value,
            n,
            seed,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(Self::HEADER).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record([r.metric.clone(), format!("{:e}", r.value), r.n.to_string(), r.seed.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| PviError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.iter().ne(Self::HEADER) {
            return Err(PviError::Data(format!("{}: unexpected metrics header", path.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let parse = |i: usize| rec.get(i).unwrap_or("").to_string();
            let bad = |what: &str| PviError::Data(format!("{}: bad {what} in metrics row", path.display()));
            rows.push(MetricRow {
                metric: parse(0),
                value: parse(1).parse().map_err(|_| bad("value"))?,
                n: parse(2).parse().map_err(|_| bad("n"))?,
                seed: parse(3).parse().map_err(|_| bad("seed"))?,
            });
        }
        Ok(Self { rows })
    }
}
