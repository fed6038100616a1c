//! Euler–Maruyama simulation of the signal–observation systems, extraction
//! of the observation-derived drivers, and the Euler particle step and
//! log-weight increment used under the reference measure.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mat_mul, FilterModel, Local, SystemCorrelatedNoise, SystemCorrelatedSensor, Variant};
use crate::paths::{sample_brownian, BrownianPath, NormalStream, Role, StreamKey, TimeGrid};

/// Law of the initial signal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InitialLaw {
    Point { x: Vec<f64> },
    /// Covariance row-major.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

/// Sampler built from an [`InitialLaw`] with its covariance factor precomputed.
#[derive(Clone, Debug)]
pub struct InitialSampler {
    law: InitialLaw,
    chol: Vec<f64>,
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point { x } => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { lo, .. } => lo.len(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            InitialLaw::Point { x } => x.clone(),
            InitialLaw::Gaussian { mean, .. } => mean.clone(),
            InitialLaw::Uniform { lo, hi } => lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        }
    }

    pub fn covariance(&self) -> Vec<f64> {
        let n = self.dim();
        match self {
            InitialLaw::Point { .. } => vec![0.0; n * n],
            InitialLaw::Gaussian { cov, .. } => cov.clone(),
            InitialLaw::Uniform { lo, hi } => {
                let mut c = vec![0.0; n * n];
                for i in 0..n {
                    c[i * n + i] = (hi[i] - lo[i]).powi(2) / 12.0;
                }
                c
            }
        }
    }

    pub fn sampler(&self, field: &str) -> Result<InitialSampler> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::config(field, "empty initial law"));
        }
        let chol = match self {
            InitialLaw::Point { x } => {
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::config(format!("{field}.x"), "entries must be finite"));
                }
                Vec::new()
            }
            InitialLaw::Gaussian { mean, cov } => {
                if cov.len() != n * n || !cov.iter().chain(mean).all(|v| v.is_finite()) {
                    return Err(Error::config(format!("{field}.cov"), format!("expected {} finite entries", n * n)));
                }
                let c = DMatrix::from_row_slice(n, n, cov);
                if (&c - c.transpose()).amax() > 1e-12 {
                    return Err(Error::config(format!("{field}.cov"), "covariance must be symmetric"));
                }
                let root = crate::model::psd_sqrt(&c, 1e-12)
                    .map_err(|_| Error::config(format!("{field}.cov"), "covariance must be positive semidefinite"))?;
                let mut out = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        out.push(root[(i, j)]);
                    }
                }
                out
            }
            InitialLaw::Uniform { lo, hi } => {
                if hi.len() != n || lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
                    return Err(Error::config(format!("{field}.hi"), "need finite lo <= hi of matching length"));
                }
                Vec::new()
            }
        };
        Ok(InitialSampler { law: self.clone(), chol })
    }
}

impl InitialSampler {
    pub fn dim(&self) -> usize {
        self.law.dim()
    }

    pub fn law(&self) -> &InitialLaw {
        &self.law
    }

    /// One draw from the stream `key`.
    pub fn sample(&self, key: &StreamKey) -> Vec<f64> {
        let mut rng = key.rng();
        self.sample_with(&mut rng)
    }

    pub fn sample_with(&self, rng: &mut impl Rng) -> Vec<f64> {
        match &self.law {
            InitialLaw::Point { x } => x.clone(),
            InitialLaw::Gaussian { mean, .. } => {
                let n = mean.len();
                let z: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let mut out = mean.clone();
                for i in 0..n {
                    for j in 0..n {
                        out[i] += self.chol[i * n + j] * z[j];
                    }
                }
                out
            }
            InitialLaw::Uniform { lo, hi } => lo.iter().zip(hi).map(|(a, b)| a + (b - a) * rng.random::<f64>()).collect(),
        }
    }
}

/// Simulated signal and observation with the Brownian paths that drove them.
///
/// For the noise system `signal_noise` is `B` and `shared_noise` is `W`; for
/// the sensor system `shared_noise` is `W` (driving the signal) and
/// `signal_noise` is `B` (entering the sensor only).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTrajectory {
    pub variant: Variant,
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    /// `(steps + 1) x n`.
    pub x: Vec<f64>,
    /// `(steps + 1) x m`, starting at zero.
    pub y: Vec<f64>,
    /// `steps x m` observation increments; `y` is their running sum.
    pub dy: Vec<f64>,
    pub shared_noise: BrownianPath,
    pub signal_noise: BrownianPath,
}

impl TruthTrajectory {
    pub fn state(&self, j: usize) -> &[f64] {
        &self.x[j * self.n..(j + 1) * self.n]
    }

    pub fn observation(&self, j: usize) -> &[f64] {
        &self.y[j * self.m..(j + 1) * self.m]
    }

    /// CSV with columns `t, x0.., y0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.n).map(|i| format!("x{i}")));
        header.extend((0..self.m).map(|i| format!("y{i}")));
        wr.write_record(&header)?;
        for j in 0..=self.grid.steps() {
            let mut row = vec![format!("{:e}", self.grid.time(j))];
            row.extend(self.state(j).iter().map(|v| format!("{v:e}")));
            row.extend(self.observation(j).iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reload the `x` and `y` columns written by [`TruthTrajectory::write_csv`].
    pub fn read_states_csv<R: std::io::Read>(r: R, n: usize, m: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut rd = csv::Reader::from_reader(r);
        let (mut t, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (j, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + n + m {
                return Err(Error::config(format!("row {j}"), "wrong column count"));
            }
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| Error::config(format!("row {j}"), "bad number"))?;
            t.push(vals[0]);
            x.extend_from_slice(&vals[1..1 + n]);
            y.extend_from_slice(&vals[1 + n..]);
        }
        Ok((t, x, y))
    }
}

fn check_finite(v: &[f64], step: usize) -> Result<()> {
    if v.iter().all(|a| a.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { step, particle: None })
    }
}

/// Keys of the truth simulation below `run`.
pub fn truth_keys(run: &StreamKey) -> (StreamKey, StreamKey, StreamKey) {
    (
        run.child(Role::Initial, 0),
        run.child(Role::Observation, 0),
        run.child(Role::Signal, 0),
    )
}

/// Euler–Maruyama for the noise system with given initial state and noises.
pub fn simulate_truth_cn_with(
    sys: &SystemCorrelatedNoise,
    grid: &TimeGrid,
    x0: Vec<f64>,
    b: BrownianPath,
    w: BrownianPath,
) -> Result<TruthTrajectory> {
    let (n, m, d) = (sys.n, sys.m, sys.d);
    if x0.len() != n || b.dim() != d || w.dim() != m || b.steps() != grid.steps() || w.steps() != grid.steps() {
        return Err(Error::Dimension("initial state or noise paths do not match the system".into()));
    }
    let dt = grid.dt();
    let steps = grid.steps();
    let mut x = Vec::with_capacity((steps + 1) * n);
    let mut y = vec![0.0; (steps + 1) * m];
    let mut dy = vec![0.0; steps * m];
    x.extend_from_slice(&x0);
    let (mut b1, mut s0, mut s1) = (vec![0.0; n], vec![0.0; n * d], vec![0.0; n * m]);
    let (mut b2, mut s2) = (vec![0.0; m], vec![0.0; m * m]);
    let (mut t0, mut t1, mut t2) = (vec![0.0; n], vec![0.0; n], vec![0.0; m]);
    for j in 0..steps {
        let t = grid.time(j);
        let xj = x[j * n..(j + 1) * n].to_vec();
        sys.b1.eval_into(t, &xj, &mut b1);
        sys.sigma0.eval_into(t, &xj, &mut s0);
        sys.sigma1.eval_into(t, &xj, &mut s1);
        sys.b2.eval_into(t, &xj, &mut b2);
        sys.sigma2.eval_into(t, &xj, &mut s2);
        mat_mul(&s0, b.step(j), n, d, 1, &mut t0);
        mat_mul(&s1, w.step(j), n, m, 1, &mut t1);
        mat_mul(&s2, w.step(j), m, m, 1, &mut t2);
        for i in 0..n {
            x.push(xj[i] + b1[i] * dt + t0[i] + t1[i]);
        }
        for l in 0..m {
            dy[j * m + l] = b2[l] * dt + t2[l];
            y[(j + 1) * m + l] = y[j * m + l] + dy[j * m + l];
        }
        check_finite(&x[(j + 1) * n..], j + 1)?;
        check_finite(&y[(j + 1) * m..(j + 2) * m], j + 1)?;
    }
    Ok(TruthTrajectory {
        variant: Variant::Cn,
        grid: *grid,
        n,
        m,
        x,
        y,
        dy,
        shared_noise: w,
        signal_noise: b,
    })
}

/// Truth for the noise system with noises and initial state drawn below `run`.
pub fn simulate_truth_cn(
    sys: &SystemCorrelatedNoise,
    grid: &TimeGrid,
    run: &StreamKey,
    x0: &InitialSampler,
) -> Result<TruthTrajectory> {
    let (ki, kw, kb) = truth_keys(run);
    let w = sample_brownian(grid, sys.m, &kw);
    let b = sample_brownian(grid, sys.d, &kb);
    simulate_truth_cn_with(sys, grid, x0.sample(&ki), b, w)
}

/// Euler–Maruyama for the sensor system with given initial state and noises.
pub fn simulate_truth_cs_with(
    sys: &SystemCorrelatedSensor,
    grid: &TimeGrid,
    x0: Vec<f64>,
    w: BrownianPath,
    b: BrownianPath,
) -> Result<TruthTrajectory> {
    let (n, m, d) = (sys.n, sys.m, sys.d);
    if x0.len() != n || b.dim() != d || w.dim() != m || b.steps() != grid.steps() || w.steps() != grid.steps() {
        return Err(Error::Dimension("initial state or noise paths do not match the system".into()));
    }
    let dt = grid.dt();
    let steps = grid.steps();
    let mut x = Vec::with_capacity((steps + 1) * n);
    let mut y = vec![0.0; (steps + 1) * m];
    let mut dy = vec![0.0; steps * m];
    x.extend_from_slice(&x0);
    let (mut b1, mut s1, mut b2) = (vec![0.0; n], vec![0.0; n * m], vec![0.0; m]);
    let (mut t1, mut u2, mut u3) = (vec![0.0; n], vec![0.0; m], vec![0.0; m]);
    for j in 0..steps {
        let t = grid.time(j);
        let xj = x[j * n..(j + 1) * n].to_vec();
        sys.b1c.eval_into(t, &xj, &mut b1);
        sys.sigma1c.eval_into(t, &xj, &mut s1);
        sys.b2c.eval_into(t, &xj, &mut b2);
        mat_mul(&s1, w.step(j), n, m, 1, &mut t1);
        mat_mul(&sys.sigma2c, w.step(j), m, m, 1, &mut u2);
        mat_mul(&sys.sigma3c, b.step(j), m, d, 1, &mut u3);
        for i in 0..n {
            x.push(xj[i] + b1[i] * dt + t1[i]);
        }
        for l in 0..m {
            dy[j * m + l] = b2[l] * dt + u2[l] + u3[l];
            y[(j + 1) * m + l] = y[j * m + l] + dy[j * m + l];
        }
        check_finite(&x[(j + 1) * n..], j + 1)?;
        check_finite(&y[(j + 1) * m..(j + 2) * m], j + 1)?;
    }
    Ok(TruthTrajectory {
        variant: Variant::Cs,
        grid: *grid,
        n,
        m,
        x,
        y,
        dy,
        shared_noise: w,
        signal_noise: b,
    })
}

pub fn simulate_truth_cs(
    sys: &SystemCorrelatedSensor,
    grid: &TimeGrid,
    run: &StreamKey,
    x0: &InitialSampler,
) -> Result<TruthTrajectory> {
    let (ki, kw, kb) = truth_keys(run);
    let w = sample_brownian(grid, sys.m, &kw);
    let b = sample_brownian(grid, sys.d, &kb);
    simulate_truth_cs_with(sys, grid, x0.sample(&ki), w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverRole {
    Wtilde,
    Vtilde,
}

/// Increments of the observation-derived Brownian motion.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverPath {
    pub role: DriverRole,
    pub path: BrownianPath,
}

impl DriverPath {
    pub fn for_variant(variant: Variant, path: BrownianPath) -> Self {
        let role = match variant {
            Variant::Cn => DriverRole::Wtilde,
            Variant::Cs => DriverRole::Vtilde,
        };
        Self { role, path }
    }

    pub fn steps(&self) -> usize {
        self.path.steps()
    }

    pub fn step(&self, j: usize) -> &[f64] {
        self.path.step(j)
    }
}

/// Increments of an observation path given at grid times (`(steps + 1) x m`).
pub fn observation_increments(y: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 || y.len() % m != 0 || y.len() < 2 * m {
        return Err(Error::Dimension(format!("observation path of length {} for dimension {m}", y.len())));
    }
    Ok((0..y.len() - m).map(|i| y[i + m] - y[i]).collect())
}

/// `dW~_j = sigma2(t_j)^{-1} dY_j`, from the observation increments `dy`.
pub fn extract_wtilde(sys: &SystemCorrelatedNoise, grid: &TimeGrid, dy: &[f64]) -> Result<DriverPath> {
    let m = sys.m;
    if dy.len() != grid.steps() * m {
        return Err(Error::Dimension("observation path does not match the grid".into()));
    }
    let mut out = vec![0.0; dy.len()];
    for j in 0..grid.steps() {
        let inv = sys.sigma2_inverse(grid.time(j))?;
        mat_mul(&inv, &dy[j * m..(j + 1) * m], m, m, 1, &mut out[j * m..(j + 1) * m]);
    }
    Ok(DriverPath {
        role: DriverRole::Wtilde,
        path: BrownianPath::from_increments(m, grid.dt(), out)?,
    })
}

/// `dV~_j = dY_j`, from the observation increments `dy`.
pub fn extract_vtilde(sys: &SystemCorrelatedSensor, grid: &TimeGrid, dy: &[f64]) -> Result<DriverPath> {
    if dy.len() != grid.steps() * sys.m {
        return Err(Error::Dimension("observation path does not match the grid".into()));
    }
    Ok(DriverPath {
        role: DriverRole::Vtilde,
        path: BrownianPath::from_increments(sys.m, grid.dt(), dy.to_vec())?,
    })
}

/// `h . dDriver - |h|^2 dt / 2`.
pub fn log_weight_increment(h: &[f64], d_driver: &[f64], dt: f64) -> f64 {
    let mut lin = 0.0;
    let mut sq = 0.0;
    for (a, b) in h.iter().zip(d_driver) {
        lin += a * b;
        sq += a * a;
    }
    lin - 0.5 * sq * dt
}

/// `x + (drift - coupling sensor) dt + coupling dDriver + noise dNoise` into `out`.
pub fn euler_step(loc: &Local, x: &[f64], d_driver: &[f64], d_noise: &[f64], dt: f64, out: &mut [f64]) {
    let n = x.len();
    let m = d_driver.len();
    let q = d_noise.len();
    for i in 0..n {
        let c = &loc.coupling[i * m..(i + 1) * m];
        let mut corr = 0.0;
        let mut drive = 0.0;
        for l in 0..m {
            corr += c[l] * loc.sensor[l];
            drive += c[l] * d_driver[l];
        }
        let mut idio = 0.0;
        for (s, z) in loc.noise[i * q..(i + 1) * q].iter().zip(d_noise) {
            idio += s * z;
        }
        out[i] = x[i] + (loc.drift[i] - corr) * dt + drive + idio;
    }
}

/// One Euler step of the noise-system signal under the reference measure:
/// `dX = (b1 - sigma1 h) dt + sigma0 dB + sigma1 dW~`.
pub fn propagate_particle_cn(
    sys: &SystemCorrelatedNoise,
    t: f64,
    x: &[f64],
    d_wtilde: &[f64],
    d_b: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let frame = sys.frame(t)?;
    let mut loc = Local::for_model(sys);
    sys.local(&frame, x, &mut loc);
    let mut out = vec![0.0; sys.n];
    euler_step(&loc, x, d_wtilde, d_b, dt, &mut out);
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence { step: 0, particle: None });
    }
    Ok(out)
}

/// One Euler step of the sensor-system signal under the reference measure:
/// `dX = (b1c - sigma1c sigma2c^T b2c) dt + sigma1c sigma2c^T dV~ + sigma1c dR`.
pub fn propagate_particle_cs(
    sys: &SystemCorrelatedSensor,
    t: f64,
    x: &[f64],
    d_vtilde: &[f64],
    d_r: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let (n, m) = (sys.n, sys.m);
    let s1 = sys.sigma1c.eval(t, x);
    let b1 = sys.b1c.eval(t, x);
    let b2 = sys.b2c.eval(t, x);
    // u = sigma2c^T (dV~ - b2c dt)
    let mut u = vec![0.0; m];
    for (k, uk) in u.iter_mut().enumerate() {
        for l in 0..m {
            *uk += sys.sigma2c[l * m + k] * (d_vtilde[l] - b2[l] * dt);
        }
    }
    let mut out = vec![0.0; n];
    for i in 0..n {
        let mut v = x[i] + b1[i] * dt;
        for k in 0..m {
            v += s1[i * m + k] * (u[k] + d_r[k]);
        }
        out[i] = v;
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence { step: 0, particle: None });
    }
    Ok(out)
}

/// Residual noise increments `dR = F xi sqrt(dt)` with `F F = I - sigma2c^T sigma2c`.
pub fn sample_residual_noise(sys: &SystemCorrelatedSensor, dt: f64, stream: &mut NormalStream) -> Result<Vec<f64>> {
    let f = sys.residual_factor()?;
    let mut xi = vec![0.0; sys.m];
    stream.fill_step(&mut xi);
    let v = f * DVector::from_vec(xi) * dt.sqrt();
    Ok(v.iter().copied().collect())
}
