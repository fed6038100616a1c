//! Ground truths computed without the solver code paths: the Kalman-Bucy
//! filter for linear-Gaussian systems, the moment equations of the signal,
//! a finite-difference L-derivative and a classical weighted particle filter
//! for uncorrelated systems.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::calculus::{eval_g, lderiv, CylindricalFunctional, OuterFunction, Poly, TestFunction};
use crate::error::{Error, Result};
use crate::measure::{normalize, pair, pairwise_sum, WeightedCloud};
use crate::model::{Family, Field, FilterModel, System, SystemCorrelatedNoise, SystemCorrelatedSensor};
use crate::paths::{Role, StreamKey, TimeGrid};
use crate::sde::{DriverPath, DriverRole, InitialLaw, InitialSampler};
use crate::zakai::{run_particles, SolverSettings, StepView, ZakaiPath};

/// `dX = A X dt + sigma0 dB + sigma1 dW`, `dY = C X dt + sigma2 dW`, with a
/// Gaussian initial law. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub mean0: Vec<f64>,
    pub cov0: Vec<f64>,
}

fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

impl LinearGaussianSpec {
    /// Scalar system with zero-mean Gaussian start of variance `p0`.
    pub fn scalar(a: f64, c: f64, s0: f64, s1: f64, s2: f64, p0: f64) -> Self {
        Self {
            n: 1,
            m: 1,
            d: 1,
            a: vec![a],
            c: vec![c],
            sigma0: vec![s0],
            sigma1: vec![s1],
            sigma2: vec![s2],
            mean0: vec![0.0],
            cov0: vec![p0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        let sizes = [
            ("a", self.a.len(), n * n),
            ("c", self.c.len(), m * n),
            ("sigma0", self.sigma0.len(), n * d),
            ("sigma1", self.sigma1.len(), n * m),
            ("sigma2", self.sigma2.len(), m * m),
            ("mean0", self.mean0.len(), n),
            ("cov0", self.cov0.len(), n * n),
        ];
        for (name, got, want) in sizes {
            if got != want {
                return Err(Error::config(name, format!("expected {want} entries, got {got}")));
            }
        }
        if mat(m, m, &self.sigma2).try_inverse().is_none() {
            return Err(Error::SingularCoefficient { t: 0.0 });
        }
        Ok(())
    }

    /// The same system as a coefficient specification for the solvers.
    pub fn to_system(&self) -> SystemCorrelatedNoise {
        let rows = |v: &[f64], r: usize, c: usize| -> Vec<Vec<f64>> { (0..r).map(|i| v[i * c..(i + 1) * c].to_vec()).collect() };
        SystemCorrelatedNoise {
            n: self.n,
            m: self.m,
            d: self.d,
            b1: Field::linear(self.n, 1, rows(&self.a, self.n, self.n)),
            sigma0: Field::constant(self.n, self.d, self.sigma0.clone()),
            sigma1: Field::constant(self.n, self.m, self.sigma1.clone()),
            b2: Field::linear(self.m, 1, rows(&self.c, self.m, self.n)),
            sigma2: Field::constant(self.m, self.m, self.sigma2.clone()),
            max_condition: 1e8,
        }
    }

    /// Kalman form of the linear sensor system `dX = A X dt + s1c dW`,
    /// `dY = C X dt + s2c dW + s3c dB`: the observation noise `N = s2c W + s3c B`
    /// is a standard Brownian motion and `W = s2c^T N + F R` with
    /// `F = (I - s2c^T s2c)^{1/2}` and `R` independent of `N`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sensor(
        n: usize,
        m: usize,
        a: Vec<f64>,
        c: Vec<f64>,
        s1c: &[f64],
        s2c: &[f64],
        mean0: Vec<f64>,
        cov0: Vec<f64>,
    ) -> Result<Self> {
        let s1 = mat(n, m, s1c);
        let s2 = mat(m, m, s2c);
        let f = crate::model::psd_sqrt(&(DMatrix::identity(m, m) - s2.transpose() * &s2), 1e-12)?;
        let flat = |x: DMatrix<f64>| x.transpose().iter().cloned().collect::<Vec<f64>>();
        Ok(Self {
            n,
            m,
            d: m,
            a,
            c,
            sigma0: flat(&s1 * f),
            sigma1: flat(&s1 * s2.transpose()),
            sigma2: flat(DMatrix::identity(m, m)),
            mean0,
            cov0,
        })
    }

    pub fn initial_law(&self) -> InitialLaw {
        InitialLaw::Gaussian {
            mean: self.mean0.clone(),
            cov: self.cov0.clone(),
        }
    }
}

/// Conditional mean and covariance along the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanPath {
    pub n: usize,
    pub grid: TimeGrid,
    /// `(steps + 1) x n`.
    pub mean: Vec<f64>,
    /// `(steps + 1) x n x n`.
    pub cov: Vec<f64>,
}

impl KalmanPath {
    pub fn mean_at(&self, j: usize) -> &[f64] {
        &self.mean[j * self.n..(j + 1) * self.n]
    }

    pub fn cov_at(&self, j: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.cov[j * nn..(j + 1) * nn]
    }

    /// Columns `t, x0.., p00..` (state columns hold the mean).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["t".to_string()];
        head.extend((0..self.n).map(|i| format!("x{i}")));
        for i in 0..self.n {
            head.extend((0..self.n).map(|k| format!("p{i}{k}")));
        }
        wr.write_record(&head)?;
        for j in 0..=self.grid.steps() {
            let mut rec = vec![format!("{:e}", self.grid.time(j))];
            rec.extend(self.mean_at(j).iter().map(|v| format!("{v:e}")));
            rec.extend(self.cov_at(j).iter().map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Euler integration of the correlated-noise Kalman-Bucy filter driven by
/// the observation increments `dy` (`steps x m`):
///
/// ```text
/// K  = (P C^T + sigma1 sigma2^T)(sigma2 sigma2^T)^{-1}
/// dm = A m dt + K (dY - C m dt)
/// dP = (A P + P A^T + sigma0 sigma0^T + sigma1 sigma1^T - K sigma2 sigma2^T K^T) dt
/// ```
pub fn kalman_bucy(spec: &LinearGaussianSpec, dy: &[f64], grid: &TimeGrid) -> Result<KalmanPath> {
    spec.validate()?;
    let (n, m) = (spec.n, spec.m);
    if dy.len() != grid.steps() * m {
        return Err(Error::Dimension("observation increments do not match the grid".into()));
    }
    let a = mat(n, n, &spec.a);
    let c = mat(m, n, &spec.c);
    let s0 = mat(n, spec.d, &spec.sigma0);
    let s1 = mat(n, m, &spec.sigma1);
    let s2 = mat(m, m, &spec.sigma2);
    let r = &s2 * s2.transpose();
    let r_inv = r.clone().try_inverse().ok_or(Error::SingularCoefficient { t: 0.0 })?;
    let cross = &s1 * s2.transpose();
    let q = &s0 * s0.transpose() + &s1 * s1.transpose();
    let dt = grid.dt();

    let mut x = DVector::from_column_slice(&spec.mean0);
    let mut p = mat(n, n, &spec.cov0);
    let mut mean = Vec::with_capacity((grid.steps() + 1) * n);
    let mut cov = Vec::with_capacity((grid.steps() + 1) * n * n);
    let push = |x: &DVector<f64>, p: &DMatrix<f64>, mean: &mut Vec<f64>, cov: &mut Vec<f64>| {
        mean.extend(x.iter());
        for i in 0..n {
            for k in 0..n {
                cov.push(p[(i, k)]);
            }
        }
    };
    push(&x, &p, &mut mean, &mut cov);
    for j in 0..grid.steps() {
        let gain = (&p * c.transpose() + &cross) * &r_inv;
        let innov = DVector::from_column_slice(&dy[j * m..(j + 1) * m]) - &c * &x * dt;
        let x_next = &x + &a * &x * dt + &gain * innov;
        let dp = &a * &p + &p * a.transpose() + &q - &gain * &r * gain.transpose();
        let mut p_next = &p + dp * dt;
        p_next = (&p_next + p_next.transpose()) * 0.5;
        if !(x_next.iter().chain(p_next.iter()).all(|v| v.is_finite() && v.abs() < 1e12)) {
            return Err(Error::RiccatiBlowUp { step: j + 1 });
        }
        x = x_next;
        p = p_next;
        push(&x, &p, &mut mean, &mut cov);
    }
    Ok(KalmanPath {
        n,
        grid: *grid,
        mean,
        cov,
    })
}

/// Mean and covariance of the signal law when observations carry no information.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPath {
    pub n: usize,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl MomentPath {
    pub fn mean_at(&self, j: usize) -> &[f64] {
        &self.mean[j * self.n..(j + 1) * self.n]
    }

    pub fn cov_at(&self, j: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.cov[j * nn..(j + 1) * nn]
    }
}

/// Classical fourth-order integration of `dmu/dt = A mu` and
/// `dS/dt = A S + S A^T + sigma0 sigma0^T + sigma1 sigma1^T`.
pub fn moment_ode_oracle(spec: &LinearGaussianSpec, grid: &TimeGrid) -> Result<MomentPath> {
    spec.validate()?;
    let n = spec.n;
    let a = mat(n, n, &spec.a);
    let q = mat(n, spec.d, &spec.sigma0) * mat(n, spec.d, &spec.sigma0).transpose()
        + mat(n, spec.m, &spec.sigma1) * mat(n, spec.m, &spec.sigma1).transpose();
    let fm = |v: &DVector<f64>| &a * v;
    let fs = |s: &DMatrix<f64>| &a * s + s * a.transpose() + &q;
    let h = grid.dt();
    let mut mu = DVector::from_column_slice(&spec.mean0);
    let mut s = mat(n, n, &spec.cov0);
    let mut mean: Vec<f64> = mu.iter().cloned().collect();
    let mut cov: Vec<f64> = s.transpose().iter().cloned().collect();
    for _ in 0..grid.steps() {
        let k1 = fm(&mu);
        let k2 = fm(&(&mu + &k1 * (h / 2.0)));
        let k3 = fm(&(&mu + &k2 * (h / 2.0)));
        let k4 = fm(&(&mu + &k3 * h));
        mu += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let l1 = fs(&s);
        let l2 = fs(&(&s + &l1 * (h / 2.0)));
        let l3 = fs(&(&s + &l2 * (h / 2.0)));
        let l4 = fs(&(&s + &l3 * h));
        s += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
        s = (&s + s.transpose()) * 0.5;
        mean.extend(mu.iter());
        // nalgebra is column-major; the transpose yields row-major order.
        cov.extend(s.transpose().iter());
    }
    Ok(MomentPath { n, mean, cov })
}

/// Forward difference `[G(mu o (I + eps v)^{-1}) - G(mu)] / eps`; the
/// pushforward moves atoms and keeps weights.
pub fn lderiv_fd(gf: &CylindricalFunctional, mu: &WeightedCloud, v: &Field, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let n = mu.dim();
    if v.rows != n || v.cols != 1 {
        return Err(Error::Dimension(format!("vector field of shape {}x{} on R^{n}", v.rows, v.cols)));
    }
    let mut dv = vec![0.0; n];
    let moved = mu.pushforward(|x, out| {
        v.eval_into(0.0, x, &mut dv);
        for i in 0..n {
            out[i] = x[i] + eps * dv[i];
        }
    });
    Ok((eval_g(gf, &moved) - eval_g(gf, mu)) / eps)
}

/// `<mu, d_mu G(mu)(.) . v(.)>`, the quantity the difference quotient approximates.
pub fn lderiv_directional(gf: &CylindricalFunctional, mu: &WeightedCloud, v: &Field) -> Result<f64> {
    let n = mu.dim();
    let mut dv = vec![0.0; n];
    pair(mu, |y| {
        v.eval_into(0.0, y, &mut dv);
        lderiv(gf, mu, y).iter().zip(&dv).map(|(a, b)| a * b).sum()
    })
}

/// An uncorrelated system for the classical filter: the signal is driven by
/// its own noise only and the sensor function enters through the weights.
pub enum Uncorrelated<'a> {
    Noise(&'a SystemCorrelatedNoise),
    Sensor(&'a SystemCorrelatedSensor),
}

/// Classical weighted particle filter for uncorrelated systems, written
/// without the solver's shared coefficient form. Uses the same streams as
/// the solver: initial draw and signal noise below each particle key.
pub fn reference_independent_filter(
    sys: Uncorrelated<'_>,
    driver: &DriverPath,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
) -> Result<ZakaiPath> {
    let (n, m, q) = match &sys {
        Uncorrelated::Noise(s) => {
            if !s.sigma1.is_identically_zero() {
                return Err(Error::Unsupported("sigma1 must vanish for the classical filter".into()));
            }
            (s.n, s.m, s.d)
        }
        Uncorrelated::Sensor(s) => {
            if s.sigma2c.iter().any(|&v| v != 0.0) {
                return Err(Error::Unsupported("sigma2c must vanish for the classical filter".into()));
            }
            (s.n, s.m, s.m)
        }
    };
    let expected = match &sys {
        Uncorrelated::Noise(_) => DriverRole::Wtilde,
        Uncorrelated::Sensor(_) => DriverRole::Vtilde,
    };
    if driver.role != expected || driver.path.dim() != m || driver.steps() != grid.steps() {
        return Err(Error::Dimension("driver does not match the system".into()));
    }
    let np = settings.particles;
    let dt = grid.dt();
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(np);
    let mut streams = Vec::with_capacity(np);
    for i in 0..np {
        let p = run.child(Role::Particle, i as u64);
        xs.push(init.sample(&p.child(Role::Initial, 0)));
        streams.push(p.child(Role::Signal, 0).normals(settings.substeps));
    }
    let mut logw = vec![0.0f64; np];
    let mut clouds = Vec::with_capacity(grid.steps() + 1);
    let snapshot = |xs: &[Vec<f64>], logw: &[f64]| {
        WeightedCloud::new(n, xs.concat(), logw.iter().map(|l| l.exp()).collect())
    };
    clouds.push(snapshot(&xs, &logw)?);
    let mut xi = vec![0.0; q];
    for j in 0..grid.steps() {
        let t = grid.time(j);
        let dd = driver.step(j);
        let s2inv = match &sys {
            Uncorrelated::Noise(s) => Some(mat(m, m, &s.sigma2.eval(t, &[])).try_inverse().ok_or(Error::SingularCoefficient { t })?),
            Uncorrelated::Sensor(_) => None,
        };
        for i in 0..np {
            let x = &xs[i];
            streams[i].fill_step(&mut xi);
            let (drift, diff, h) = match &sys {
                Uncorrelated::Noise(s) => {
                    let h = s2inv.as_ref().unwrap() * DVector::from_vec(s.b2.eval(t, x));
                    (s.b1.eval(t, x), mat(n, q, &s.sigma0.eval(t, x)), h)
                }
                Uncorrelated::Sensor(s) => (
                    s.b1c.eval(t, x),
                    mat(n, q, &s.sigma1c.eval(t, x)),
                    DVector::from_vec(s.b2c.eval(t, x)),
                ),
            };
            let noise = diff * DVector::from_column_slice(&xi) * dt.sqrt();
            let mut inc = 0.0;
            for l in 0..m {
                inc += h[l] * dd[l] - 0.5 * h[l] * h[l] * dt;
            }
            logw[i] += inc;
            let next: Vec<f64> = (0..n).map(|k| x[k] + drift[k] * dt + noise[k]).collect();
            if !(next.iter().all(|v| v.is_finite()) && logw[i].is_finite()) {
                return Err(Error::Divergence {
                    step: j + 1,
                    particle: Some(i),
                });
            }
            xs[i] = next;
        }
        clouds.push(snapshot(&xs, &logw)?);
    }
    Ok(ZakaiPath {
        grid: *grid,
        driver: driver.clone(),
        clouds,
    })
}

/// Weighted mean and covariance of the normalized particle cloud at every grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    pub n: usize,
    /// `(steps + 1) x n`.
    pub mean: Vec<f64>,
    /// `(steps + 1) x n x n`.
    pub cov: Vec<f64>,
}

impl PosteriorMoments {
    pub fn mean_at(&self, j: usize) -> &[f64] {
        &self.mean[j * self.n..(j + 1) * self.n]
    }

    pub fn cov_at(&self, j: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.cov[j * nn..(j + 1) * nn]
    }
}

/// Run the particle solver and record the normalized posterior moments.
pub fn posterior_moments<M: FilterModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    driver: &DriverPath,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
) -> Result<PosteriorMoments> {
    let n = model.state_dim();
    let mut mean = Vec::with_capacity((grid.steps() + 1) * n);
    let mut cov = Vec::with_capacity((grid.steps() + 1) * n * n);
    run_particles(model, grid, driver, settings, run, init, &[], |v: &StepView<'_>| {
        let top = v.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = v.log_weights.iter().map(|l| (l - top).exp()).collect();
        let total = pairwise_sum(&w);
        // Accumulate deviations from the first atom to limit cancellation.
        let origin = &v.atoms[..n];
        let mut shift = vec![0.0; n];
        for (x, wi) in v.atoms.chunks_exact(n).zip(&w) {
            for k in 0..n {
                shift[k] += wi * (x[k] - origin[k]);
            }
        }
        let mu: Vec<f64> = origin.iter().zip(&shift).map(|(o, s)| o + s / total).collect();
        let mut c = vec![0.0; n * n];
        for (x, wi) in v.atoms.chunks_exact(n).zip(&w) {
            for a in 0..n {
                for b in 0..n {
                    c[a * n + b] += wi * (x[a] - mu[a]) * (x[b] - mu[b]);
                }
            }
        }
        mean.extend_from_slice(&mu);
        cov.extend(c.iter().map(|a| a / total));
        Ok(())
    })?;
    Ok(PosteriorMoments { n, mean, cov })
}

/// Time-averaged discrepancy between particle moments and the Kalman-Bucy filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanGap {
    /// Time average of `|mean - kalman mean|`.
    pub mean: f64,
    /// `|avg tr(cov) - avg tr(P)| / avg tr(P)`; the absolute gap when `P` vanishes.
    pub variance: f64,
}

pub fn kalman_gap(post: &PosteriorMoments, kb: &KalmanPath) -> Result<KalmanGap> {
    let n = post.n;
    let len = post.mean.len() / n.max(1);
    if kb.n != n || kb.mean.len() != post.mean.len() {
        return Err(Error::Dimension("posterior and Kalman paths differ in shape".into()));
    }
    let trace = |c: &[f64]| (0..n).map(|i| c[i * n + i]).sum::<f64>();
    let (mut dm, mut dv, mut pv) = (0.0, 0.0, 0.0);
    for j in 0..len {
        let d: f64 = post.mean_at(j).iter().zip(kb.mean_at(j)).map(|(a, b)| (a - b).powi(2)).sum();
        dm += d.sqrt();
        dv += trace(post.cov_at(j)) - trace(kb.cov_at(j));
        pv += trace(kb.cov_at(j));
    }
    let variance = if pv > 0.0 { dv.abs() / pv } else { dv.abs() / len as f64 };
    Ok(KalmanGap {
        mean: dm / len as f64,
        variance,
    })
}

fn constant_part(f: &Field, name: &str) -> Result<Vec<f64>> {
    match &f.family {
        Family::Affine { offset, .. } if !f.depends_on_state() && !f.depends_on_time() => {
            Ok(if offset.is_empty() { vec![0.0; f.len()] } else { offset.clone() })
        }
        _ => Err(Error::Unsupported(format!("{name} must be constant for the Kalman oracle"))),
    }
}

fn linear_part(f: &Field, n: usize, name: &str) -> Result<Vec<f64>> {
    match &f.family {
        Family::Affine { offset, time, linear }
            if f.cols == 1 && offset.iter().chain(time).all(|&v| v == 0.0) =>
        {
            if linear.is_empty() {
                return Ok(vec![0.0; f.rows * n]);
            }
            Ok(linear.iter().flatten().cloned().collect())
        }
        _ => Err(Error::Unsupported(format!("{name} must be linear in the state for the Kalman oracle"))),
    }
}

impl LinearGaussianSpec {
    /// Read a linear-Gaussian specification off a general system; fails with
    /// `Unsupported` when a coefficient is not of the required form.
    pub fn from_system(sys: &System, init: &InitialLaw) -> Result<Self> {
        let (mean0, cov0) = match init {
            InitialLaw::Uniform { .. } => {
                return Err(Error::Unsupported("the Kalman oracle needs a Gaussian or point initial law".into()))
            }
            law => (law.mean(), law.covariance()),
        };
        let spec = match sys {
            System::Cn(s) => Self {
                n: s.n,
                m: s.m,
                d: s.d,
                a: linear_part(&s.b1, s.n, "b1")?,
                c: linear_part(&s.b2, s.n, "b2")?,
                sigma0: constant_part(&s.sigma0, "sigma0")?,
                sigma1: constant_part(&s.sigma1, "sigma1")?,
                sigma2: constant_part(&s.sigma2, "sigma2")?,
                mean0,
                cov0,
            },
            System::Cs(s) => Self::from_sensor(
                s.n,
                s.m,
                linear_part(&s.b1c, s.n, "b1c")?,
                linear_part(&s.b2c, s.n, "b2c")?,
                &constant_part(&s.sigma1c, "sigma1c")?,
                &s.sigma2c,
                mean0,
                cov0,
            )?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A random `(G, mu, v)` triple for checking the L-derivative: a probability
/// cloud with atoms in `[-1, 1]^n` (`n` is 1 or 2), three smooth test
/// functions, an outer function drawn from the three forms and an affine
/// vector field with entries in `[-0.5, 0.5]`.
pub fn random_lderiv_case(key: &StreamKey) -> (CylindricalFunctional, WeightedCloud, Field) {
    let mut rng = key.rng();
    let n = rng.random_range(1..=2usize);
    let natoms = rng.random_range(3..12usize);
    let atoms: Vec<f64> = (0..natoms * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..natoms).map(|_| rng.random_range(0.2..2.0)).collect();
    let mu = normalize(&WeightedCloud::new(n, atoms, weights).expect("valid cloud")).expect("positive mass");
    let center: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let phis = vec![
        TestFunction::new(center.clone(), 3.0, Poly::One).expect("valid radius"),
        TestFunction::new(center.clone(), 2.5, Poly::Coord(n - 1)).expect("valid radius"),
        TestFunction::new(center, 3.5, Poly::Product(0, n - 1)).expect("valid radius"),
    ];
    let g = match rng.random_range(0..3) {
        0 => OuterFunction::Linear { u: 1 },
        1 => OuterFunction::Bilinear { u: 1, v: 2 },
        _ => OuterFunction::Tanh {
            weights: vec![rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0)],
            bias: rng.random_range(-0.5..0.5),
            scale: 1.0,
        },
    };
    let gf = CylindricalFunctional::new(g, phis).expect("arity 3");
    let linear: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let offset: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let v = Field {
        rows: n,
        cols: 1,
        family: Family::Affine {
            offset,
            time: vec![],
            linear,
        },
    };
    (gf, mu, v)
}

/// Finite-difference errors of one L-derivative check at `eps` and `eps / 10`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LderivTrial {
    pub analytic: f64,
    pub error: f64,
    pub error_refined: f64,
}

impl LderivTrial {
    /// Error relative to `max(|analytic|, 1)`.
    pub fn relative_error(&self) -> f64 {
        self.error / self.analytic.abs().max(1.0)
    }

    /// `error / error_refined`, or `None` when the error is at roundoff level.
    pub fn decay_ratio(&self) -> Option<f64> {
        (self.error > 1e-9).then(|| self.error / self.error_refined)
    }
}

pub fn lderiv_trial(gf: &CylindricalFunctional, mu: &WeightedCloud, v: &Field, eps: f64) -> Result<LderivTrial> {
    let analytic = lderiv_directional(gf, mu, v)?;
    Ok(LderivTrial {
        analytic,
        error: (lderiv_fd(gf, mu, v, eps)? - analytic).abs(),
        error_refined: (lderiv_fd(gf, mu, v, eps / 10.0)? - analytic).abs(),
    })
}

/// Positive root of `a P^2 + b P + c = 0` (the stable steady state of a scalar Riccati equation).
pub fn positive_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = (b * b - 4.0 * a * c).sqrt();
    let r1 = (-b + disc) / (2.0 * a);
    let r2 = (-b - disc) / (2.0 * a);
    r1.max(r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Dictionary, DictionarySpec};
    use crate::model::{scalar_cn, scalar_cs, Variant};
    use crate::sde::simulate_truth_cn;
    use crate::zakai::{sample_driver, solve_zakai_cn, solve_zakai_cs};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn noiseless_filter_has_zero_covariance() {
        let spec = LinearGaussianSpec {
            mean0: vec![2.0],
            ..LinearGaussianSpec::scalar(-0.5, 1.0, 0.0, 0.0, 1.0, 0.0)
        };
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let dy = vec![0.01; 100];
        let kb = kalman_bucy(&spec, &dy, &grid).unwrap();
        assert!(kb.cov.iter().all(|&p| p == 0.0));
        let mut x = 2.0;
        for j in 0..=100 {
            assert_eq!(kb.mean_at(j)[0], x);
            x += -0.5 * x * grid.dt();
        }
    }

    #[test]
    fn scalar_riccati_steady_state() {
        let spec = LinearGaussianSpec::scalar(-1.0, 1.0, 1.0, 0.0, 1.0, 0.0);
        let grid = TimeGrid::new(5.0, 5000).unwrap();
        let kb = kalman_bucy(&spec, &vec![0.0; 5000], &grid).unwrap();
        let star = 2f64.sqrt() - 1.0;
        assert!((kb.cov_at(5000)[0] - star).abs() < 1e-3);
        assert!((positive_root(-1.0, -2.0, 1.0) - star).abs() < 1e-15);
    }

    #[test]
    fn correlated_scalar_riccati_steady_state() {
        // 0 = -2P + 1 + 0.09 - (P + 0.3)^2  <=>  -P^2 - 2.6 P + 1 = 0
        let star = positive_root(-1.0, -2.6, 1.0);
        assert!((-2.0 * star + 1.09 - (star + 0.3).powi(2)).abs() < 1e-14);
        assert!((star - 0.340_121_946_685_672).abs() < 1e-12);
        let spec = LinearGaussianSpec::scalar(-1.0, 1.0, 1.0, 0.3, 1.0, 0.0);
        let grid = TimeGrid::new(5.0, 5000).unwrap();
        let kb = kalman_bucy(&spec, &vec![0.0; 5000], &grid).unwrap();
        assert!((kb.cov_at(5000)[0] - star).abs() < 1e-3);
    }

    #[test]
    fn riccati_blow_up_is_reported() {
        let spec = LinearGaussianSpec::scalar(50.0, 0.0, 1.0, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        assert!(matches!(
            kalman_bucy(&spec, &vec![0.0; 1000], &grid),
            Err(Error::RiccatiBlowUp { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn covariance_stays_psd(seed in 0u64..1000) {
            let mut rng = StreamKey::new(seed).rng();
            let mut r = |s: f64| rng.random_range(-s..s);
            let spec = LinearGaussianSpec {
                n: 2, m: 2, d: 2,
                a: (0..4).map(|_| r(1.0)).collect(),
                c: (0..4).map(|_| r(2.0)).collect(),
                sigma0: (0..4).map(|_| r(1.0)).collect(),
                sigma1: (0..4).map(|_| r(0.5)).collect(),
                sigma2: vec![1.0 + r(0.2), r(0.2), r(0.2), 1.0 + r(0.2)],
                mean0: vec![0.0, 0.0],
                cov0: vec![0.5, 0.1, 0.1, 0.5],
            };
            let grid = TimeGrid::new(1.0, 500).unwrap();
            let dy: Vec<f64> = (0..1000).map(|_| r(0.05)).collect();
            let kb = kalman_bucy(&spec, &dy, &grid).unwrap();
            for j in 0..=500 {
                let p = kb.cov_at(j);
                prop_assert_eq!(p[1], p[2]);
                prop_assert!(crate::calculus::min_eigenvalue(p, 2) >= -1e-10);
            }
        }
    }

    #[test]
    fn moment_equations() {
        let still = LinearGaussianSpec {
            mean0: vec![0.3],
            ..LinearGaussianSpec::scalar(0.0, 0.0, 0.0, 0.0, 1.0, 0.7)
        };
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let mp = moment_ode_oracle(&still, &grid).unwrap();
        assert!(mp.mean.iter().all(|&v| v == 0.3));
        assert!(mp.cov.iter().all(|&v| v == 0.7));

        let ou = LinearGaussianSpec::scalar(-1.0, 0.0, 1.0, 0.0, 1.0, 0.0);
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let mp = moment_ode_oracle(&ou, &grid).unwrap();
        assert!((mp.cov_at(200)[0] - (1.0 - (-4.0f64).exp()) / 2.0).abs() < 1e-9);

        let spec = LinearGaussianSpec {
            n: 2,
            m: 1,
            d: 2,
            a: vec![-1.0, 0.4, -0.3, -0.5],
            c: vec![0.0, 0.0],
            sigma0: vec![0.5, 0.1, 0.0, 0.7],
            sigma1: vec![0.2, -0.3],
            sigma2: vec![1.0],
            mean0: vec![1.0, -1.0],
            cov0: vec![0.3, 0.1, 0.1, 0.2],
        };
        let mp = moment_ode_oracle(&spec, &TimeGrid::new(1.0, 100).unwrap()).unwrap();
        for j in 0..=100 {
            let s = mp.cov_at(j);
            assert_eq!(s[1], s[2]);
        }
    }

    #[test]
    fn difference_quotient_matches_l_derivative() {
        let base = StreamKey::new(77);
        for i in 0..100 {
            let (gf, mu, v) = random_lderiv_case(&base.child(Role::Sample, i));
            let trial = lderiv_trial(&gf, &mu, &v, 1e-4).unwrap();
            assert!(trial.relative_error() <= 1e-4, "{trial:?}");
            if let Some(ratio) = trial.decay_ratio() {
                assert!(ratio > 5.0 && ratio < 20.0, "{ratio}");
            }
        }
    }

    #[test]
    fn linear_spec_round_trips_through_system() {
        let spec = LinearGaussianSpec::scalar(-1.0, 1.0, 0.5, 0.3, 1.0, 1.0);
        let back = LinearGaussianSpec::from_system(&System::Cn(spec.to_system()), &spec.initial_law()).unwrap();
        assert_eq!(back, spec);
        let cs = scalar_cs(-1.0, 0.6, 1.0, 0.6, 0.8);
        let lg = LinearGaussianSpec::from_system(&System::Cs(cs), &InitialLaw::Point { x: vec![0.0] }).unwrap();
        assert!((lg.sigma0[0] - 0.48).abs() < 1e-12 && (lg.sigma1[0] - 0.36).abs() < 1e-12);
        let mut tanh = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        tanh.b2 = Field {
            rows: 1,
            cols: 1,
            family: Family::AffineTanh {
                offset: vec![],
                time: vec![],
                linear: vec![],
                amplitude: vec![1.0],
                weights: vec![vec![1.0]],
                bias: vec![],
            },
        };
        assert!(matches!(
            LinearGaussianSpec::from_system(&System::Cn(tanh), &spec.initial_law()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn frozen_system_moments_match_kalman_exactly() {
        let spec = LinearGaussianSpec {
            mean0: vec![0.7],
            ..LinearGaussianSpec::scalar(0.0, 0.0, 0.0, 0.0, 1.0, 0.0)
        };
        let sys = spec.to_system();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let run = StreamKey::new(5);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let set = SolverSettings {
            particles: 10,
            substeps: 1,
        };
        let init = InitialLaw::Point { x: vec![0.7] }.sampler("init").unwrap();
        let post = posterior_moments(&sys, &grid, &drv, &set, &run, &init).unwrap();
        let dy: Vec<f64> = drv.path.increments().to_vec();
        let kb = kalman_bucy(&spec, &dy, &grid).unwrap();
        let gap = kalman_gap(&post, &kb).unwrap();
        assert_eq!((gap.mean, gap.variance), (0.0, 0.0));
    }

    #[test]
    fn zero_field_gives_zero_quotient() {
        let (gf, mu, _) = random_lderiv_case(&StreamKey::new(78));
        let zero = Field::zero(mu.dim(), 1);
        assert_eq!(lderiv_fd(&gf, &mu, &zero, 1e-3).unwrap(), 0.0);
    }

    fn gauss() -> InitialSampler {
        InitialLaw::Gaussian {
            mean: vec![0.0],
            cov: vec![1.0],
        }
        .sampler("init")
        .unwrap()
    }

    fn max_pairing_gap(a: &ZakaiPath, b: &ZakaiPath) -> f64 {
        let d = Dictionary::standard(
            1,
            &DictionarySpec {
                radii: vec![2.0, 4.0],
                center: None,
                count: None,
            },
        )
        .unwrap();
        let mut gap: f64 = 0.0;
        for (ca, cb) in a.clouds.iter().zip(&b.clouds) {
            gap = gap.max((ca.mass() - cb.mass()).abs());
            for phi in &d.functions {
                let pa = pair(ca, |x| phi.value(x)).unwrap();
                let pb = pair(cb, |x| phi.value(x)).unwrap();
                gap = gap.max((pa - pb).abs());
            }
        }
        gap
    }

    #[test]
    fn classical_filter_matches_solver_without_correlation() {
        let sys = scalar_cn(-1.0, 0.5, 0.0, 1.0, 1.3);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let run = StreamKey::new(21);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let set = SolverSettings {
            particles: 300,
            substeps: 1,
        };
        let a = solve_zakai_cn(&sys, &drv, &grid, &set, &run, &gauss()).unwrap();
        let b = reference_independent_filter(Uncorrelated::Noise(&sys), &drv, &grid, &set, &run, &gauss()).unwrap();
        assert!(max_pairing_gap(&a, &b) <= 1e-10);

        let cs = scalar_cs(-1.0, 0.6, 1.0, 0.0, 1.0);
        let drv = sample_driver(Variant::Cs, &grid, 1, &run, 1);
        let a = solve_zakai_cs(&cs, &drv, &grid, &set, &run, &gauss()).unwrap();
        let b = reference_independent_filter(Uncorrelated::Sensor(&cs), &drv, &grid, &set, &run, &gauss()).unwrap();
        assert!(max_pairing_gap(&a, &b) <= 1e-10);
    }

    #[test]
    fn classical_filter_rejects_correlation() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let run = StreamKey::new(22);
        let set = SolverSettings {
            particles: 3,
            substeps: 1,
        };
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        assert!(matches!(
            reference_independent_filter(Uncorrelated::Noise(&sys), &drv, &grid, &set, &run, &gauss()),
            Err(Error::Unsupported(_))
        ));
        let cs = scalar_cs(-1.0, 0.6, 1.0, 0.6, 0.8);
        let drv = sample_driver(Variant::Cs, &grid, 1, &run, 1);
        assert!(matches!(
            reference_independent_filter(Uncorrelated::Sensor(&cs), &drv, &grid, &set, &run, &gauss()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn classical_filter_without_sensor_is_plain_monte_carlo() {
        let sys = scalar_cn(-1.0, 0.5, 0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let run = StreamKey::new(23);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let set = SolverSettings {
            particles: 50,
            substeps: 1,
        };
        let p = reference_independent_filter(Uncorrelated::Noise(&sys), &drv, &grid, &set, &run, &gauss()).unwrap();
        assert!(p.clouds.iter().all(|c| c.weights().iter().all(|&w| w == 1.0)));
    }

    #[test]
    fn kalman_csv_schema() {
        let spec = LinearGaussianSpec::scalar(-1.0, 1.0, 0.5, 0.3, 1.0, 0.2);
        let grid = TimeGrid::new(0.1, 4).unwrap();
        let sys = spec.to_system();
        let truth = simulate_truth_cn(&sys, &grid, &StreamKey::new(3), &spec.initial_law().sampler("init").unwrap()).unwrap();
        let kb = kalman_bucy(&spec, &truth.dy, &grid).unwrap();
        let mut buf = Vec::new();
        kb.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x0,p00\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
