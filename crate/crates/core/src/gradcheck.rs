//! Finite-difference checks of every analytic derivative in the crate.

use crate::error::Result;
use crate::estimators::{estimate_grad_theta, EstimatorConfig, NoiseBatch};
use crate::kernels::KernelSpec;
use crate::mlp::MlpSpec;
use crate::numerics::{dot, Matrix, Rng};
use crate::sid::{ParticleCloud, SidModel};
use crate::targets::{generate_waveform, Banana, BnnRegression, Dataset, GaussianMixture, LogisticRegression, Target};

/// Relative-error threshold for the finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Relative error, or the standardized deviation for Monte Carlo checks.
    pub error: f64,
    pub threshold: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.threshold
    }
}

/// Options of [`run_suite`].
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Kernel name whose parameter VJP is deliberately perturbed.
    pub corrupt_vjp: Option<String>,
}

/// `(4D(h/2) − D(h))/3` on central differences along `v`.
fn directional(f: &dyn Fn(&[f64]) -> Result<f64>, x: &[f64], v: &[f64], h: f64) -> Result<f64> {
    let at = |t: f64| -> Result<f64> {
        let p: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        f(&p)
    };
    let d = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    Ok((4.0 * d(h / 2.0)? - d(h)?) / 3.0)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error of `⟨grad, v⟩` against finite differences over a few
/// random directions.
fn check_gradient(f: &dyn Fn(&[f64]) -> Result<f64>, grad: &[f64], x: &[f64], h: f64, rng: &mut Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let v = rng.unit_vector(x.len());
        worst = worst.max(rel(dot(grad, &v), directional(f, x, &v, h)?));
    }
    Ok(worst)
}

fn kernel_variants() -> Vec<KernelSpec> {
    vec![
        KernelSpec::constant(2, 0.7).expect("valid"),
        KernelSpec::push(2, 6, 3).expect("valid"),
        KernelSpec::skip(3, 6).expect("valid"),
        KernelSpec::lskip(2, 6, 3).expect("valid"),
        KernelSpec::lskip_hetero(2, 6, 3, 1e-8).expect("valid"),
        KernelSpec::lskip_fullcov(2, 6, 3).expect("valid"),
    ]
}

fn random_vec(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn kernel_checks(opts: &SuiteOptions, rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    for spec in kernel_variants() {
        let name = spec.name();
        let theta = random_vec(spec.num_params(), 0.3, rng);
        let z = random_vec(spec.d_z(), 1.0, rng);
        let eps = random_vec(spec.d_x(), 1.0, rng);
        let cot = random_vec(spec.d_x(), 1.0, rng);

        let mut g = spec.vjp_theta(&theta, &z, &eps, &cot)?;
        if opts.corrupt_vjp.as_deref() == Some(name) {
            g.iter_mut().for_each(|v| *v *= 1.01);
        }
        let err = if theta.is_empty() {
            0.0
        } else {
            let f = |t: &[f64]| -> Result<f64> { Ok(dot(&cot, &spec.sample(t, &z, &eps)?)) };
            check_gradient(&f, &g, &theta, 1e-4, rng)?
        };
        out.push(Check {
            name: format!("kernel/{name}/vjp_theta"),
            error: err,
            threshold: FD_TOLERANCE,
        });

        let g = spec.vjp_z(&theta, &z, &eps, &cot)?;
        let f = |zz: &[f64]| -> Result<f64> { Ok(dot(&cot, &spec.sample(&theta, zz, &eps)?)) };
        out.push(Check {
            name: format!("kernel/{name}/vjp_z"),
            error: check_gradient(&f, &g, &z, 1e-4, rng)?,
            threshold: FD_TOLERANCE,
        });

        let x = spec.sample(&theta, &z, &eps)?;
        let g = spec.grad_x_log_density(&theta, &x, &z)?;
        let f = |xx: &[f64]| spec.log_density(&theta, xx, &z);
        out.push(Check {
            name: format!("kernel/{name}/score"),
            error: check_gradient(&f, &g, &x, 1e-4, rng)?,
            threshold: FD_TOLERANCE,
        });
    }
    Ok(())
}

fn sid_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    for spec in [
        KernelSpec::skip(2, 6)?,
        KernelSpec::lskip_hetero(2, 6, 3, 1e-8)?,
        KernelSpec::lskip_fullcov(2, 6, 3)?,
    ] {
        let theta = random_vec(spec.num_params(), 0.3, rng);
        let mut z = Matrix::zeros(5, spec.d_z());
        rng.fill_normal(z.as_mut_slice());
        let sid = SidModel::new(spec.clone(), theta, ParticleCloud::new(z)?)?;
        let x = random_vec(spec.d_x(), 1.0, rng);
        let f = |xx: &[f64]| sid.log_density(xx);
        out.push(Check {
            name: format!("sid/{}/score", spec.name()),
            error: check_gradient(&f, &sid.score(&x)?, &x, 1e-4, rng)?,
            threshold: FD_TOLERANCE,
        });
        if spec.name() == "skip" {
            let gamma = 0.05;
            let f = |xx: &[f64]| -> Result<f64> { Ok((sid.log_density(xx)?.exp() + gamma).ln()) };
            out.push(Check {
                name: "sid/skip/score_gamma".into(),
                error: check_gradient(&f, &sid.score_gamma(&x, gamma)?, &x, 1e-4, rng)?,
                threshold: FD_TOLERANCE,
            });
        }
    }
    Ok(())
}

fn target_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let mut data_rng = rng.substream(7);
    let waveform = generate_waveform(40, &mut data_rng);
    let mut inputs = Matrix::zeros(12, 3);
    data_rng.fill_normal(inputs.as_mut_slice());
    let responses = inputs.row_iter().map(|r| r[0] - 0.5 * r[2]).collect();
    let regression = Dataset::new(inputs, responses)?;
    let targets: Vec<Box<dyn Target>> = vec![
        Box::new(GaussianMixture::multimodal()),
        Box::new(GaussianMixture::xshape()),
        Box::new(Banana),
        Box::new(GaussianMixture::bimodal(4.0)?),
        Box::new(LogisticRegression::new(&waveform)?),
        Box::new(BnnRegression::with_scales(&regression, 4, 0.5, 25.0)?),
    ];
    for t in &targets {
        let x = random_vec(t.dim(), if t.dim() > 2 { 0.1 } else { 1.0 }, rng);
        let f = |xx: &[f64]| t.log_joint(xx);
        out.push(Check {
            name: format!("target/{}/grad", t.name()),
            error: check_gradient(&f, &t.grad_log_joint(&x)?, &x, 1e-4, rng)?,
            threshold: FD_TOLERANCE,
        });
    }
    Ok(())
}

fn mlp_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let spec = MlpSpec::nn(3, 7, 2)?;
    let theta = random_vec(spec.num_params(), 0.5, rng);
    let input = random_vec(3, 1.0, rng);
    let cot = random_vec(2, 1.0, rng);
    let f = |t: &[f64]| -> Result<f64> { Ok(dot(&cot, &spec.forward(t, &input)?)) };
    out.push(Check {
        name: "mlp/vjp_params".into(),
        error: check_gradient(&f, &spec.vjp_params(&theta, &input, &cot)?, &theta, 1e-4, rng)?,
        threshold: FD_TOLERANCE,
    });
    let f = |i: &[f64]| -> Result<f64> { Ok(dot(&cot, &spec.forward(&theta, i)?)) };
    out.push(Check {
        name: "mlp/vjp_input".into(),
        error: check_gradient(&f, &spec.vjp_input(&theta, &input, &cot)?, &input, 1e-4, rng)?,
        threshold: FD_TOLERANCE,
    });
    Ok(())
}

/// Push kernel whose network is a zero-weight bias `b`, unit scale, single
/// particle, standard normal target: the bias gradient has mean `b`.
fn push_bias_checks(rng: &mut Rng, out: &mut Vec<Check>) -> Result<()> {
    let d = 2;
    let spec = KernelSpec::Push {
        net: MlpSpec::linear(d, d)?,
    };
    let target = GaussianMixture::gaussian("std", vec![0.0; d], Matrix::identity(d))?;
    let cfg = EstimatorConfig {
        l: 100,
        ..Default::default()
    };
    for b in [0.5, 1.0, 2.0] {
        let mut theta = vec![0.0; spec.num_params()];
        theta[d * d..d * d + d].iter_mut().for_each(|v| *v = b);
        let z = Matrix::from_vec(1, d, random_vec(d, 1.0, rng))?;
        let sid = SidModel::new(spec.clone(), theta, ParticleCloud::new(z)?)?;
        let reps = 200;
        let mut draws = Vec::with_capacity(reps);
        for _ in 0..reps {
            let noise = NoiseBatch::draw(&cfg, 1, d, rng);
            draws.push(estimate_grad_theta(&sid, &target, &noise, 0.0, 0.0)?[d * d]);
        }
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        out.push(Check {
            name: format!("estimator/push_bias/b={b}"),
            // deviation in standard errors, floored for the zero-variance case
            error: (mean - b).abs() / se.max(1e-12),
            threshold: 4.0,
        });
    }
    Ok(())
}

/// Runs every check; failures are reported, not raised.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let rng = Rng::new(opts.seed);
    let mut out = Vec::new();
    kernel_checks(opts, &mut rng.substream(0), &mut out)?;
    sid_checks(&mut rng.substream(1), &mut out)?;
    target_checks(&mut rng.substream(2), &mut out)?;
    mlp_checks(&mut rng.substream(3), &mut out)?;
    push_bias_checks(&mut rng.substream(4), &mut out)?;
    Ok(out)
}
