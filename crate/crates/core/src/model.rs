//! Signal–observation systems, their coefficient families and assumption checks.
//!
//! Two systems are supported. In the correlated-noise system the signal and
//! the observation share the Brownian motion `W`:
//!
//! ```text
//! dX = b1(t,X) dt + sigma0(t,X) dB + sigma1(t,X) dW
//! dY = b2(t,X) dt + sigma2(t) dW
//! ```
//!
//! In the correlated-sensor system the sensor mixes both noises through
//! constant matrices with `sigma2c sigma2c^T + sigma3c sigma3c^T = I`:
//!
//! ```text
//! dX = b1c(t,X) dt + sigma1c(t,X) dW
//! dY = b2c(t,X) dt + sigma2c dW + sigma3c dB
//! ```
//!
//! Solvers and the functional calculus see both through [`FilterModel`],
//! which exposes the coefficients of the particle dynamics under the
//! reference measure (where the observation-derived driver is Brownian).

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::StreamKey;

/// Which interpolation variable a table follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Time,
    State(usize),
}

/// Closed family of coefficient functions. Matrices are row-major and empty
/// vectors stand for zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// `offset + time * t + linear * x`.
    Affine {
        #[serde(default)]
        offset: Vec<f64>,
        #[serde(default)]
        time: Vec<f64>,
        #[serde(default)]
        linear: Vec<Vec<f64>>,
    },
    /// Affine part plus `amplitude * tanh(weights * x + bias)` entrywise.
    AffineTanh {
        #[serde(default)]
        offset: Vec<f64>,
        #[serde(default)]
        time: Vec<f64>,
        #[serde(default)]
        linear: Vec<Vec<f64>>,
        amplitude: Vec<f64>,
        weights: Vec<Vec<f64>>,
        #[serde(default)]
        bias: Vec<f64>,
    },
    /// Piecewise-linear interpolation in one variable, constant outside the knots.
    Table {
        axis: Axis,
        knots: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

/// A matrix-valued coefficient `(t, x) -> R^{rows x cols}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub rows: usize,
    pub cols: usize,
    #[serde(flatten)]
    pub family: Family,
}

fn affine_into(offset: &[f64], time: &[f64], linear: &[Vec<f64>], t: f64, x: &[f64], out: &mut [f64]) {
    for (e, o) in out.iter_mut().enumerate() {
        let mut v = if offset.is_empty() { 0.0 } else { offset[e] };
        if !time.is_empty() {
            v += time[e] * t;
        }
        if !linear.is_empty() {
            for (w, xi) in linear[e].iter().zip(x) {
                v += w * xi;
            }
        }
        *o = v;
    }
}

impl Field {
    pub fn zero(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            family: Family::Affine {
                offset: Vec::new(),
                time: Vec::new(),
                linear: Vec::new(),
            },
        }
    }

    /// Constant matrix given row-major.
    pub fn constant(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self {
            rows,
            cols,
            family: Family::Affine {
                offset: values,
                time: Vec::new(),
                linear: Vec::new(),
            },
        }
    }

    /// `x -> linear * x`, one row of `linear` per matrix entry.
    pub fn linear(rows: usize, cols: usize, linear: Vec<Vec<f64>>) -> Self {
        Self {
            rows,
            cols,
            family: Family::Affine {
                offset: Vec::new(),
                time: Vec::new(),
                linear,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Evaluate at `(t, x)` into `out` (row-major, `rows * cols` entries).
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.family {
            Family::Affine { offset, time, linear } => affine_into(offset, time, linear, t, x, out),
            Family::AffineTanh {
                offset,
                time,
                linear,
                amplitude,
                weights,
                bias,
            } => {
                affine_into(offset, time, linear, t, x, out);
                for (e, o) in out.iter_mut().enumerate() {
                    let mut z = if bias.is_empty() { 0.0 } else { bias[e] };
                    for (w, xi) in weights[e].iter().zip(x) {
                        z += w * xi;
                    }
                    *o += amplitude[e] * z.tanh();
                }
            }
            Family::Table { axis, knots, values } => {
                let s = match axis {
                    Axis::Time => t,
                    Axis::State(i) => x[*i],
                };
                let last = knots.len() - 1;
                if s <= knots[0] || last == 0 {
                    out.copy_from_slice(&values[0]);
                } else if s >= knots[last] {
                    out.copy_from_slice(&values[last]);
                } else {
                    let j = knots.partition_point(|&k| k <= s) - 1;
                    let w = (s - knots[j]) / (knots[j + 1] - knots[j]);
                    for (e, o) in out.iter_mut().enumerate() {
                        *o = (1.0 - w) * values[j][e] + w * values[j + 1][e];
                    }
                }
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, x, &mut out);
        out
    }

    /// True when the field is the zero function by construction.
    pub fn is_identically_zero(&self) -> bool {
        let zero = |v: &[f64]| v.iter().all(|&a| a == 0.0);
        let zero_rows = |v: &[Vec<f64>]| v.iter().all(|r| zero(r));
        match &self.family {
            Family::Affine { offset, time, linear } => zero(offset) && zero(time) && zero_rows(linear),
            Family::AffineTanh {
                offset,
                time,
                linear,
                amplitude,
                ..
            } => zero(offset) && zero(time) && zero_rows(linear) && zero(amplitude),
            Family::Table { values, .. } => zero_rows(values),
        }
    }

    pub fn depends_on_state(&self) -> bool {
        let nz = |v: &[Vec<f64>]| v.iter().any(|r| r.iter().any(|&a| a != 0.0));
        match &self.family {
            Family::Affine { linear, .. } => nz(linear),
            Family::AffineTanh {
                linear,
                amplitude,
                weights,
                ..
            } => nz(linear) || (amplitude.iter().any(|&a| a != 0.0) && nz(weights)),
            Family::Table { axis, .. } => matches!(axis, Axis::State(_)),
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match &self.family {
            Family::Affine { time, .. } | Family::AffineTanh { time, .. } => time.iter().any(|&a| a != 0.0),
            Family::Table { axis, .. } => matches!(axis, Axis::Time),
        }
    }

    /// Check shapes and finiteness for a state space of dimension `n`.
    pub fn validate(&self, n: usize, name: &str) -> Result<()> {
        let len = self.len();
        let bad = |what: &str, msg: String| Error::config(format!("{name}.{what}"), msg);
        let check_vec = |what: &str, v: &[f64], optional: bool| -> Result<()> {
            if (optional && v.is_empty()) || v.len() == len {
                if v.iter().all(|a| a.is_finite()) {
                    Ok(())
                } else {
                    Err(bad(what, "entries must be finite".into()))
                }
            } else {
                Err(bad(what, format!("expected {len} entries, found {}", v.len())))
            }
        };
        let check_rows = |what: &str, v: &[Vec<f64>], optional: bool| -> Result<()> {
            if optional && v.is_empty() {
                return Ok(());
            }
            if v.len() != len {
                return Err(bad(what, format!("expected {len} rows, found {}", v.len())));
            }
            for (i, r) in v.iter().enumerate() {
                if r.len() != n {
                    return Err(bad(&format!("{what}[{i}]"), format!("expected {n} entries, found {}", r.len())));
                }
                if !r.iter().all(|a| a.is_finite()) {
                    return Err(bad(&format!("{what}[{i}]"), "entries must be finite".into()));
                }
            }
            Ok(())
        };
        match &self.family {
            Family::Affine { offset, time, linear } => {
                check_vec("offset", offset, true)?;
                check_vec("time", time, true)?;
                check_rows("linear", linear, true)
            }
            Family::AffineTanh {
                offset,
                time,
                linear,
                amplitude,
                weights,
                bias,
            } => {
                check_vec("offset", offset, true)?;
                check_vec("time", time, true)?;
                check_rows("linear", linear, true)?;
                check_vec("amplitude", amplitude, false)?;
                check_rows("weights", weights, false)?;
                check_vec("bias", bias, true)
            }
            Family::Table { axis, knots, values } => {
                if knots.is_empty() {
                    return Err(bad("knots", "at least one knot required".into()));
                }
                if !knots.iter().all(|k| k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad("knots", "knots must be finite and strictly increasing".into()));
                }
                if let Axis::State(i) = axis {
                    if *i >= n {
                        return Err(bad("axis", format!("state index {i} out of range for dimension {n}")));
                    }
                }
                if values.len() != knots.len() {
                    return Err(bad("values", format!("expected {} rows, found {}", knots.len(), values.len())));
                }
                for (i, v) in values.iter().enumerate() {
                    check_vec(&format!("values[{i}]"), v, false)?;
                }
                Ok(())
            }
        }
    }
}

/// Row-major `out = a * b` with `a: r x k`, `b: k x c`.
pub(crate) fn mat_mul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * c + j];
            }
            out[i * c + j] = s;
        }
    }
}

/// Row-major `out = a * b^T` with `a: r x k`, `b: c x k`.
pub(crate) fn mat_mul_bt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[j * k + l];
            }
            out[i * c + j] = s;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Symmetric PSD square root by eigendecomposition, clamping eigenvalues in
/// `[-tol, 0)` to zero.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = eig.eigenvalues.clone();
    for v in d.iter_mut() {
        if !v.is_finite() || *v < -tol {
            return Err(Error::NotPositiveSemidefinite(format!("eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

fn to_dmatrix(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn default_max_condition() -> f64 {
    1e8
}

/// The correlated-noise system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemCorrelatedNoise {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub b1: Field,
    pub sigma0: Field,
    pub sigma1: Field,
    pub b2: Field,
    pub sigma2: Field,
    /// Largest accepted condition number of `sigma2(t)`.
    #[serde(default = "default_max_condition")]
    pub max_condition: f64,
}

/// The correlated-sensor system; `sigma2c` is `m x m`, `sigma3c` is `m x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemCorrelatedSensor {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub b1c: Field,
    pub sigma1c: Field,
    pub b2c: Field,
    pub sigma2c: Vec<f64>,
    pub sigma3c: Vec<f64>,
}

fn check_shape(f: &Field, rows: usize, cols: usize, name: &str) -> Result<()> {
    if f.rows != rows || f.cols != cols {
        return Err(Error::config(
            name,
            format!("expected shape {rows}x{cols}, found {}x{}", f.rows, f.cols),
        ));
    }
    Ok(())
}

impl SystemCorrelatedNoise {
    /// Shape and finiteness checks; `sigma2` must not depend on the state.
    pub fn validate_structure(&self) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::config("system", "dimensions n, m, d must be positive"));
        }
        for (f, r, c, name) in [
            (&self.b1, n, 1, "system.b1"),
            (&self.sigma0, n, d, "system.sigma0"),
            (&self.sigma1, n, m, "system.sigma1"),
            (&self.b2, m, 1, "system.b2"),
            (&self.sigma2, m, m, "system.sigma2"),
        ] {
            check_shape(f, r, c, name)?;
            f.validate(n, name)?;
        }
        if self.sigma2.depends_on_state() {
            return Err(Error::config("system.sigma2", "must depend on time only"));
        }
        if !(self.max_condition > 1.0) {
            return Err(Error::config("system.max_condition", "must exceed 1"));
        }
        Ok(())
    }

    /// `sigma2(t)^{-1}`, row-major.
    pub fn sigma2_inverse(&self, t: f64) -> Result<Vec<f64>> {
        let m = self.m;
        let s = to_dmatrix(m, m, &self.sigma2.eval(t, &[]));
        let sv = s.clone().svd(false, false).singular_values;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for v in sv.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if !(lo > 0.0) || !(hi / lo <= self.max_condition) {
            return Err(Error::SingularCoefficient { t });
        }
        let inv = s.try_inverse().ok_or(Error::SingularCoefficient { t })?;
        Ok(from_dmatrix(&inv))
    }
}

/// `h(t, x) = sigma2(t)^{-1} b2(t, x)`.
pub fn h_map(sys: &SystemCorrelatedNoise, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let inv = sys.sigma2_inverse(t)?;
    let b2 = sys.b2.eval(t, x);
    let mut h = vec![0.0; sys.m];
    mat_mul(&inv, &b2, sys.m, sys.m, 1, &mut h);
    Ok(h)
}

impl SystemCorrelatedSensor {
    pub fn validate_structure(&self) -> Result<()> {
        let (n, m, d) = (self.n, self.m, self.d);
        if n == 0 || m == 0 || d == 0 {
            return Err(Error::config("system", "dimensions n, m, d must be positive"));
        }
        for (f, r, c, name) in [
            (&self.b1c, n, 1, "system.b1c"),
            (&self.sigma1c, n, m, "system.sigma1c"),
            (&self.b2c, m, 1, "system.b2c"),
        ] {
            check_shape(f, r, c, name)?;
            f.validate(n, name)?;
        }
        if self.sigma2c.len() != m * m {
            return Err(Error::config("system.sigma2c", format!("expected {} entries", m * m)));
        }
        if self.sigma3c.len() != m * d {
            return Err(Error::config("system.sigma3c", format!("expected {} entries", m * d)));
        }
        if !self.sigma2c.iter().chain(&self.sigma3c).all(|v| v.is_finite()) {
            return Err(Error::config("system.sigma2c", "entries must be finite"));
        }
        Ok(())
    }

    /// `sigma2c sigma2c^T + sigma3c sigma3c^T - I`.
    pub fn identity_defect(&self) -> DMatrix<f64> {
        let s2 = to_dmatrix(self.m, self.m, &self.sigma2c);
        let s3 = to_dmatrix(self.m, self.d, &self.sigma3c);
        &s2 * s2.transpose() + &s3 * s3.transpose() - DMatrix::identity(self.m, self.m)
    }

    /// PSD square root of `I - sigma2c^T sigma2c`, the covariance factor of
    /// the signal noise left after projecting out the sensor noise.
    pub fn residual_factor(&self) -> Result<DMatrix<f64>> {
        let s2 = to_dmatrix(self.m, self.m, &self.sigma2c);
        let c = DMatrix::identity(self.m, self.m) - s2.transpose() * &s2;
        psd_sqrt(&c, 1e-12)
    }
}

/// Scalar modulus `kappa` in the continuity assumptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulus {
    Constant { value: f64 },
    /// `scale * max(1, ln(1/r))`.
    Log { scale: f64 },
}

impl Default for Modulus {
    fn default() -> Self {
        Modulus::Constant { value: 1.0 }
    }
}

impl Modulus {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Modulus::Constant { value } => *value,
            Modulus::Log { scale } => scale * (1.0f64).max(-r.ln()),
        }
    }
}

/// Positive function of time, piecewise linear between knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Table { knots: Vec<f64>, values: Vec<f64> },
}

impl Schedule {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Table { knots, values } => {
                let last = knots.len() - 1;
                if t <= knots[0] || last == 0 {
                    values[0]
                } else if t >= knots[last] {
                    values[last]
                } else {
                    let j = knots.partition_point(|&k| k <= t) - 1;
                    let w = (t - knots[j]) / (knots[j + 1] - knots[j]);
                    (1.0 - w) * values[j] + w * values[j + 1]
                }
            }
        }
    }

    fn well_formed(&self) -> bool {
        match self {
            Schedule::Constant(v) => v.is_finite(),
            Schedule::Table { knots, values } => {
                !knots.is_empty()
                    && knots.len() == values.len()
                    && knots.windows(2).all(|w| w[1] > w[0])
                    && values.iter().all(|v| v.is_finite())
            }
        }
    }

    /// Positive and nondecreasing at the given times.
    pub fn admissible_on(&self, times: &[f64]) -> bool {
        let v: Vec<f64> = times.iter().map(|&t| self.eval(t)).collect();
        self.well_formed() && v.iter().all(|&a| a > 0.0) && v.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Constants of the standing assumptions on the correlated-noise system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProfile {
    pub l1: Schedule,
    pub k1: Schedule,
    pub k2: f64,
    #[serde(default)]
    pub kappa: [Modulus; 3],
}

impl AssumptionProfile {
    pub fn lipschitz(l1: f64, k1: f64, k2: f64) -> Self {
        Self {
            l1: Schedule::Constant(l1),
            k1: Schedule::Constant(k1),
            k2,
            kappa: Default::default(),
        }
    }
}

/// Outcome of one assumption check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Largest observed `lhs / rhs`; the check passes when it is at most 1.
    pub worst_ratio: f64,
    /// Sample index attaining the worst ratio.
    pub worst_sample: Option<usize>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn from_ratios(name: &str, ratios: impl Iterator<Item = (usize, f64)>) -> Self {
        let mut worst = 0.0f64;
        let mut at = None;
        let mut finite = true;
        for (i, r) in ratios {
            if !r.is_finite() {
                finite = false;
                worst = f64::INFINITY;
                at.get_or_insert(i);
                continue;
            }
            if finite && (at.is_none() || r > worst) {
                worst = r;
                at = Some(i);
            }
        }
        Self {
            name: name.to_string(),
            worst_ratio: worst,
            worst_sample: at,
            passed: finite && worst <= 1.0 + 1e-12,
            detail: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Sample pair for the continuity checks.
pub type SamplePair = (f64, Vec<f64>, Vec<f64>);

/// `count` pairs with times uniform on `[0, horizon]` and states uniform in
/// the box `[-half_width, half_width]^n`.
pub fn box_samples(n: usize, half_width: f64, horizon: f64, count: usize, key: &StreamKey) -> Vec<SamplePair> {
    let mut rng = key.rng();
    (0..count)
        .map(|_| {
            let t = horizon * rng.random::<f64>();
            let mut draw = || (0..n).map(|_| half_width * (2.0 * rng.random::<f64>() - 1.0)).collect::<Vec<_>>();
            let x1 = draw();
            let x2 = draw();
            (t, x1, x2)
        })
        .collect()
}

/// Sampled check of the continuity, growth and observation-bound assumptions.
pub fn validate_correlated_noise(
    sys: &SystemCorrelatedNoise,
    profile: &AssumptionProfile,
    samples: &[SamplePair],
) -> ValidationReport {
    let mut checks = Vec::new();

    let mut times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    times.sort_by(f64::total_cmp);
    let sched = |name: &str, s: &Schedule| Check {
        name: name.to_string(),
        worst_ratio: 0.0,
        worst_sample: None,
        passed: s.admissible_on(&times),
        detail: Some("positive and nondecreasing on sampled times".into()),
    };
    checks.push(sched("l1_schedule", &profile.l1));
    checks.push(sched("k1_schedule", &profile.k1));
    checks.push(Check {
        name: "k2_positive".into(),
        worst_ratio: 0.0,
        worst_sample: None,
        passed: profile.k2 > 0.0 && profile.k2.is_finite(),
        detail: None,
    });

    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let diff2 = |f: &Field, t: f64, a: &[f64], b: &[f64]| {
        let (u, v) = (f.eval(t, a), f.eval(t, b));
        u.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };

    let modulus = |name: &str, which: usize| {
        Check::from_ratios(
            name,
            samples.iter().enumerate().map(|(i, (t, x1, x2))| {
                let r = dist(x1, x2);
                if r == 0.0 {
                    return (i, 0.0);
                }
                let l = profile.l1.eval(*t);
                let k = profile.kappa[which].eval(r);
                let ratio = match which {
                    0 => diff2(&sys.b1, *t, x1, x2).sqrt() / (l * r * k),
                    1 => diff2(&sys.sigma0, *t, x1, x2) / (l * r * r * k),
                    _ => diff2(&sys.sigma1, *t, x1, x2) / (l * r * r * k),
                };
                (i, ratio)
            }),
        )
    };
    checks.push(modulus("modulus_b1", 0));
    checks.push(modulus("modulus_sigma0", 1));
    checks.push(modulus("modulus_sigma1", 2));

    let points = || {
        samples
            .iter()
            .enumerate()
            .flat_map(|(i, (t, x1, x2))| [(i, *t, x1), (i, *t, x2)])
    };
    checks.push(Check::from_ratios(
        "growth",
        points().map(|(i, t, x)| {
            let lhs = norm2(&sys.b1.eval(t, x)) + norm2(&sys.sigma0.eval(t, x)) + norm2(&sys.sigma1.eval(t, x));
            let nx = norm2(x).sqrt();
            (i, lhs / (profile.k1.eval(t) * (1.0 + nx) * (1.0 + nx)))
        }),
    ));

    let mut sigma_check = Check {
        name: "sigma2_invertible".into(),
        worst_ratio: 0.0,
        worst_sample: None,
        passed: true,
        detail: None,
    };
    checks.push(Check::from_ratios(
        "h_bound",
        points().map(|(i, t, x)| match h_map(sys, t, x) {
            Ok(h) => (i, norm2(&h).sqrt() / profile.k2),
            Err(_) => {
                if sigma_check.passed {
                    sigma_check.passed = false;
                    sigma_check.worst_sample = Some(i);
                    sigma_check.worst_ratio = f64::INFINITY;
                    sigma_check.detail = Some(format!("singular at t = {t}"));
                }
                (i, f64::INFINITY)
            }
        }),
    ));
    checks.push(sigma_check);
    ValidationReport { checks }
}

/// Check of the sensor identity and of the boundedness of `b2c` on samples.
pub fn validate_correlated_sensor(sys: &SystemCorrelatedSensor, samples: &[(f64, Vec<f64>)]) -> ValidationReport {
    let defect = sys.identity_defect();
    let norm = defect.norm();
    let asym = (&defect - defect.transpose()).norm();
    let identity = Check {
        name: "sensor_identity".into(),
        worst_ratio: norm / 1e-12,
        worst_sample: None,
        passed: norm <= 1e-12,
        detail: Some(format!("defect {norm:e}, asymmetry {asym:e}")),
    };
    let mut worst = 0.0f64;
    let mut at = None;
    let mut finite = true;
    for (i, (t, x)) in samples.iter().enumerate() {
        let v = norm2(&sys.b2c.eval(*t, x)).sqrt();
        if !v.is_finite() {
            finite = false;
            at = Some(i);
            break;
        }
        if at.is_none() || v > worst {
            worst = v;
            at = Some(i);
        }
    }
    let bounded = Check {
        name: "b2c_bounded".into(),
        worst_ratio: if finite { 0.0 } else { f64::INFINITY },
        worst_sample: at,
        passed: finite,
        detail: Some(format!("max |b2c| on samples {worst:e}")),
    };
    ValidationReport {
        checks: vec![identity, bounded],
    }
}

/// Identity-defect norm of the sensor system.
pub fn sensor_defect(sys: &SystemCorrelatedSensor) -> f64 {
    sys.identity_defect().norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cn,
    Cs,
}

/// Either system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum System {
    Cn(SystemCorrelatedNoise),
    Cs(SystemCorrelatedSensor),
}

impl System {
    pub fn variant(&self) -> Variant {
        match self {
            System::Cn(_) => Variant::Cn,
            System::Cs(_) => Variant::Cs,
        }
    }

    pub fn validate_structure(&self) -> Result<()> {
        match self {
            System::Cn(s) => s.validate_structure(),
            System::Cs(s) => {
                s.validate_structure()?;
                let defect = sensor_defect(s);
                if defect > 1e-12 {
                    return Err(Error::config(
                        "system.sigma3c",
                        format!("sigma2c sigma2c^T + sigma3c sigma3c^T differs from I by {defect:e}"),
                    ));
                }
                s.residual_factor().map(|_| ())
            }
        }
    }
}

/// Time-dependent data shared by all particles at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    /// `sigma2(t)^{-1}` for the noise system, the residual factor for the sensor system.
    pub mat: Vec<f64>,
    /// `sigma2c^T` for the sensor system, empty otherwise.
    pub aux: Vec<f64>,
    /// Noise coefficients, when they do not depend on the state.
    pub fixed: Option<FixedNoise>,
}

/// State-independent part of [`Local`], evaluated once per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedNoise {
    pub coupling: Vec<f64>,
    pub noise: Vec<f64>,
    pub diffusion: Vec<f64>,
    /// Noise contribution to the integrability integrand.
    pub integrand: f64,
}

/// Coefficients at one `(t, x)` in the common form used by the solvers:
///
/// * particle step `x + (drift - coupling sensor) dt + coupling dDriver + noise xi sqrt(dt)`,
/// * log-weight increment `sensor . dDriver - |sensor|^2 dt / 2`,
/// * generator `drift . grad + diffusion : hess / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Local {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub coupling: Vec<f64>,
    pub sensor: Vec<f64>,
    pub noise: Vec<f64>,
    /// Pointwise integrand of the integrability conditions.
    pub integrand: f64,
    scratch: Vec<f64>,
    scratch2: Vec<f64>,
}

impl Local {
    pub fn new(n: usize, m: usize, q: usize) -> Self {
        Self {
            drift: vec![0.0; n],
            diffusion: vec![0.0; n * n],
            coupling: vec![0.0; n * m],
            sensor: vec![0.0; m],
            noise: vec![0.0; n * q],
            integrand: 0.0,
            scratch: vec![0.0; n * m.max(q).max(n)],
            scratch2: vec![0.0; n * n.max(m)],
        }
    }

    pub fn for_model<M: FilterModel + ?Sized>(model: &M) -> Self {
        Self::new(model.state_dim(), model.driver_dim(), model.noise_dim())
    }
}

/// Common interface of the two systems as seen by the particle solver.
pub trait FilterModel: Sync {
    fn state_dim(&self) -> usize;
    /// Dimension of the observation-derived driver.
    fn driver_dim(&self) -> usize;
    /// Dimension of the idiosyncratic particle noise.
    fn noise_dim(&self) -> usize;
    fn variant(&self) -> Variant;
    fn frame(&self, t: f64) -> Result<Frame>;
    fn local(&self, frame: &Frame, x: &[f64], out: &mut Local);
}

impl SystemCorrelatedNoise {
    /// Fill coupling, noise and diffusion; returns `|sigma1|^2 + |sigma0 sigma0^T|`.
    fn noise_terms(&self, t: f64, x: &[f64], out: &mut Local) -> f64 {
        let (n, m, d) = (self.n, self.m, self.d);
        self.sigma0.eval_into(t, x, &mut out.noise);
        self.sigma1.eval_into(t, x, &mut out.coupling);
        let s00 = &mut out.scratch2[..n * n];
        mat_mul_bt(&out.noise, &out.noise, n, d, n, s00);
        mat_mul_bt(&out.coupling, &out.coupling, n, m, n, &mut out.diffusion);
        for (a, b) in out.diffusion.iter_mut().zip(s00.iter()) {
            *a += b;
        }
        norm2(&out.coupling) + norm2(s00).sqrt()
    }
}

impl FilterModel for SystemCorrelatedNoise {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn driver_dim(&self) -> usize {
        self.m
    }
    fn noise_dim(&self) -> usize {
        self.d
    }
    fn variant(&self) -> Variant {
        Variant::Cn
    }

    fn frame(&self, t: f64) -> Result<Frame> {
        let mut frame = Frame {
            t,
            mat: self.sigma2_inverse(t)?,
            aux: Vec::new(),
            fixed: None,
        };
        if !(self.sigma0.depends_on_state() || self.sigma1.depends_on_state()) {
            let mut loc = Local::for_model(self);
            let integrand = self.noise_terms(t, &vec![0.0; self.n], &mut loc);
            frame.fixed = Some(FixedNoise {
                coupling: loc.coupling,
                noise: loc.noise,
                diffusion: loc.diffusion,
                integrand,
            });
        }
        Ok(frame)
    }

    fn local(&self, frame: &Frame, x: &[f64], out: &mut Local) {
        let m = self.m;
        let t = frame.t;
        self.b1.eval_into(t, x, &mut out.drift);
        let b2 = &mut out.scratch[..m];
        self.b2.eval_into(t, x, b2);
        mat_mul(&frame.mat, b2, m, m, 1, &mut out.sensor);
        let noise_part = match &frame.fixed {
            Some(f) => {
                out.coupling.copy_from_slice(&f.coupling);
                out.noise.copy_from_slice(&f.noise);
                out.diffusion.copy_from_slice(&f.diffusion);
                f.integrand
            }
            None => self.noise_terms(t, x, out),
        };
        out.integrand = norm2(&out.drift).sqrt() + norm2(&out.sensor) + noise_part;
    }
}

impl SystemCorrelatedSensor {
    /// Fill coupling, noise and diffusion; returns `|sigma1c|^2`.
    fn noise_terms(&self, frame: &Frame, x: &[f64], out: &mut Local) -> f64 {
        let (n, m) = (self.n, self.m);
        let s1 = &mut out.scratch[..n * m];
        self.sigma1c.eval_into(frame.t, x, s1);
        mat_mul(s1, &frame.aux, n, m, m, &mut out.coupling);
        mat_mul(s1, &frame.mat, n, m, m, &mut out.noise);
        mat_mul_bt(s1, s1, n, m, n, &mut out.diffusion);
        norm2(s1)
    }
}

impl FilterModel for SystemCorrelatedSensor {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn driver_dim(&self) -> usize {
        self.m
    }
    fn noise_dim(&self) -> usize {
        self.m
    }
    fn variant(&self) -> Variant {
        Variant::Cs
    }

    fn frame(&self, t: f64) -> Result<Frame> {
        let f = self.residual_factor()?;
        let s2t = to_dmatrix(self.m, self.m, &self.sigma2c).transpose();
        let mut frame = Frame {
            t,
            mat: from_dmatrix(&f),
            aux: from_dmatrix(&s2t),
            fixed: None,
        };
        if !self.sigma1c.depends_on_state() {
            let mut loc = Local::for_model(self);
            let integrand = self.noise_terms(&frame, &vec![0.0; self.n], &mut loc);
            frame.fixed = Some(FixedNoise {
                coupling: loc.coupling,
                noise: loc.noise,
                diffusion: loc.diffusion,
                integrand,
            });
        }
        Ok(frame)
    }

    fn local(&self, frame: &Frame, x: &[f64], out: &mut Local) {
        let t = frame.t;
        self.b1c.eval_into(t, x, &mut out.drift);
        self.b2c.eval_into(t, x, &mut out.sensor);
        let noise_part = match &frame.fixed {
            Some(f) => {
                out.coupling.copy_from_slice(&f.coupling);
                out.noise.copy_from_slice(&f.noise);
                out.diffusion.copy_from_slice(&f.diffusion);
                f.integrand
            }
            None => self.noise_terms(frame, x, out),
        };
        out.integrand = norm2(&out.drift).sqrt() + noise_part + norm2(&out.sensor);
    }
}

impl FilterModel for System {
    fn state_dim(&self) -> usize {
        match self {
            System::Cn(s) => s.state_dim(),
            System::Cs(s) => s.state_dim(),
        }
    }
    fn driver_dim(&self) -> usize {
        match self {
            System::Cn(s) => s.driver_dim(),
            System::Cs(s) => s.driver_dim(),
        }
    }
    fn noise_dim(&self) -> usize {
        match self {
            System::Cn(s) => s.noise_dim(),
            System::Cs(s) => s.noise_dim(),
        }
    }
    fn variant(&self) -> Variant {
        System::variant(self)
    }
    fn frame(&self, t: f64) -> Result<Frame> {
        match self {
            System::Cn(s) => s.frame(t),
            System::Cs(s) => s.frame(t),
        }
    }
    fn local(&self, frame: &Frame, x: &[f64], out: &mut Local) {
        match self {
            System::Cn(s) => s.local(frame, x, out),
            System::Cs(s) => s.local(frame, x, out),
        }
    }
}

/// Scalar system `dX = a X dt + s0 dB + s1 dW`, `dY = c X dt + s2 dW`.
pub fn scalar_cn(a: f64, s0: f64, s1: f64, c: f64, s2: f64) -> SystemCorrelatedNoise {
    SystemCorrelatedNoise {
        n: 1,
        m: 1,
        d: 1,
        b1: Field::linear(1, 1, vec![vec![a]]),
        sigma0: Field::constant(1, 1, vec![s0]),
        sigma1: Field::constant(1, 1, vec![s1]),
        b2: Field::linear(1, 1, vec![vec![c]]),
        sigma2: Field::constant(1, 1, vec![s2]),
        max_condition: default_max_condition(),
    }
}

/// Scalar sensor system `dX = aX dt + s1 dW`, `dY = cX dt + s2 dW + s3 dB`;
/// the identity condition needs `s2^2 + s3^2 = 1`.
pub fn scalar_cs(a: f64, s1: f64, c: f64, s2: f64, s3: f64) -> SystemCorrelatedSensor {
    SystemCorrelatedSensor {
        n: 1,
        m: 1,
        d: 1,
        b1c: Field::linear(1, 1, vec![vec![a]]),
        sigma1c: Field::constant(1, 1, vec![s1]),
        b2c: Field::linear(1, 1, vec![vec![c]]),
        sigma2c: vec![s2],
        sigma3c: vec![s3],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn h_map_examples() {
        let sys = scalar_cn(0.0, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(h_map(&sys, 0.0, &[0.7]).unwrap(), vec![0.7]);

        let mut sys = scalar_cn(0.0, 0.0, 0.0, 0.0, 2.0);
        sys.b2 = Field::constant(1, 1, vec![1.0]);
        assert_eq!(h_map(&sys, 0.3, &[12.0]).unwrap(), vec![0.5]);

        let sys = SystemCorrelatedNoise {
            n: 1,
            m: 2,
            d: 1,
            b1: Field::zero(1, 1),
            sigma0: Field::zero(1, 1),
            sigma1: Field::zero(1, 2),
            b2: Field::constant(2, 1, vec![2.0, 4.0]),
            sigma2: Field::constant(2, 2, vec![2.0, 0.0, 0.0, 4.0]),
            max_condition: 1e8,
        };
        let h = h_map(&sys, 0.0, &[0.0]).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-15 && (h[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_sigma2_names_time() {
        let sys = scalar_cn(0.0, 0.0, 0.0, 1.0, 0.0);
        match h_map(&sys, 0.25, &[1.0]) {
            Err(Error::SingularCoefficient { t }) => assert_eq!(t, 0.25),
            other => panic!("unexpected {other:?}"),
        }
        let mut sys = scalar_cn(0.0, 0.0, 0.0, 1.0, 1.0);
        sys.sigma2 = Field {
            rows: 1,
            cols: 1,
            family: Family::Table {
                axis: Axis::Time,
                knots: vec![0.0, 1.0],
                values: vec![vec![1.0], vec![0.0]],
            },
        };
        assert!(h_map(&sys, 0.5, &[1.0]).is_ok());
        assert!(matches!(h_map(&sys, 1.0, &[1.0]), Err(Error::SingularCoefficient { .. })));
    }

    fn samples_on(points: &[f64]) -> Vec<SamplePair> {
        let mut out = Vec::new();
        for (i, &a) in points.iter().enumerate() {
            for &b in &points[i..] {
                out.push((0.5, vec![a], vec![b]));
            }
        }
        out
    }

    #[test]
    fn linear_signal_passes_all_checks() {
        let mut sys = scalar_cn(-1.0, 1.0, 0.0, 0.0, 1.0);
        sys.b2 = Field::constant(1, 1, vec![0.5]);
        let profile = AssumptionProfile::lipschitz(1.0, 4.0, 1.0);
        let pts: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let report = validate_correlated_noise(&sys, &profile, &samples_on(&pts));
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn quadratic_drift_fails_growth_at_three() {
        let mut sys = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        sys.b1 = Field {
            rows: 1,
            cols: 1,
            family: Family::Table {
                axis: Axis::State(0),
                knots: (0..=40).map(|i| -4.0 + 0.2 * i as f64).collect(),
                values: (0..=40).map(|i| vec![(-4.0 + 0.2 * i as f64).powi(2)]).collect(),
            },
        };
        let profile = AssumptionProfile::lipschitz(100.0, 1.0, 1.0);
        let samples = vec![(0.0, vec![0.0], vec![0.5]), (0.0, vec![3.0], vec![0.0])];
        let report = validate_correlated_noise(&sys, &profile, &samples);
        let g = report.check("growth").unwrap();
        assert!(!g.passed);
        assert_eq!(g.worst_sample, Some(1));
        assert!((g.worst_ratio - 81.0 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn constructed_observation_violation() {
        let k2 = 2.0;
        let mut sys = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.5);
        sys.b2 = Field::constant(1, 1, vec![(k2 + 1.0) * 1.5]);
        let profile = AssumptionProfile::lipschitz(1.0, 1.0, k2);
        let report = validate_correlated_noise(&sys, &profile, &samples_on(&[0.0, 0.5]));
        let h = report.check("h_bound").unwrap();
        assert!(!h.passed);
        assert!((h.worst_ratio - 1.5).abs() < 1e-12);
        assert!(report.check("growth").unwrap().passed);
    }

    #[test]
    fn validation_is_deterministic() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let profile = AssumptionProfile::lipschitz(1.0, 2.0, 3.0);
        let samples = box_samples(1, 1.0, 1.0, 200, &StreamKey::new(3));
        let a = validate_correlated_noise(&sys, &profile, &samples);
        let b = validate_correlated_noise(&sys, &profile, &samples);
        assert_eq!(a, b);
    }

    fn sensor(s2: f64, s3: f64) -> SystemCorrelatedSensor {
        SystemCorrelatedSensor {
            n: 1,
            m: 1,
            d: 1,
            b1c: Field::zero(1, 1),
            sigma1c: Field::constant(1, 1, vec![1.0]),
            b2c: Field::constant(1, 1, vec![0.3]),
            sigma2c: vec![s2],
            sigma3c: vec![s3],
        }
    }

    #[test]
    fn sensor_identity_examples() {
        let pts = vec![(0.0, vec![0.0]), (1.0, vec![2.0])];
        let th = 0.3f64;
        assert!(validate_correlated_sensor(&sensor(th.cos(), th.sin()), &pts).passed());
        let bad = sensor(1.0, 1.0);
        assert!(!validate_correlated_sensor(&bad, &pts).passed());
        assert!((sensor_defect(&bad) - 1.0).abs() < 1e-15);
        let deg = SystemCorrelatedSensor {
            n: 1,
            m: 2,
            d: 2,
            b1c: Field::zero(1, 1),
            sigma1c: Field::zero(1, 2),
            b2c: Field::zero(2, 1),
            sigma2c: vec![0.0; 4],
            sigma3c: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert!(validate_correlated_sensor(&deg, &pts).passed());
    }

    #[test]
    fn residual_factor_squares_back() {
        let th = 0.7f64;
        let s = SystemCorrelatedSensor {
            n: 1,
            m: 2,
            d: 2,
            b1c: Field::zero(1, 1),
            sigma1c: Field::zero(1, 2),
            b2c: Field::zero(2, 1),
            sigma2c: vec![th.cos() * 0.6, 0.0, 0.0, 0.8],
            sigma3c: vec![(1.0 - 0.36 * th.cos().powi(2)).sqrt(), 0.0, 0.0, 0.6],
        };
        assert!(sensor_defect(&s) < 1e-12);
        let f = s.residual_factor().unwrap();
        let s2 = DMatrix::from_row_slice(2, 2, &s.sigma2c);
        let c = DMatrix::identity(2, 2) - s2.transpose() * &s2;
        assert!((&f * &f - c).norm() < 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(psd_sqrt(&m, 1e-12).is_err());
        let z = DMatrix::from_row_slice(1, 1, &[-1e-14]);
        assert_eq!(psd_sqrt(&z, 1e-12).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn field_families_evaluate() {
        let f = Field {
            rows: 1,
            cols: 2,
            family: Family::AffineTanh {
                offset: vec![1.0, 0.0],
                time: vec![0.0, 2.0],
                linear: vec![vec![1.0], vec![0.0]],
                amplitude: vec![0.0, 0.5],
                weights: vec![vec![0.0], vec![3.0]],
                bias: vec![],
            },
        };
        f.validate(1, "f").unwrap();
        let v = f.eval(0.5, &[0.2]);
        assert!((v[0] - 1.2).abs() < 1e-15);
        assert!((v[1] - (1.0 + 0.5 * 0.6f64.tanh())).abs() < 1e-15);
        assert!(f.depends_on_state() && f.depends_on_time());
        assert!(Field::zero(2, 2).is_identically_zero());
        let tab = Field {
            rows: 1,
            cols: 1,
            family: Family::Table {
                axis: Axis::Time,
                knots: vec![0.0, 1.0, 3.0],
                values: vec![vec![0.0], vec![1.0], vec![5.0]],
            },
        };
        assert_eq!(tab.eval(-1.0, &[]), vec![0.0]);
        assert_eq!(tab.eval(2.0, &[]), vec![3.0]);
        assert_eq!(tab.eval(9.0, &[]), vec![5.0]);
        let bad = Field::linear(1, 1, vec![vec![1.0, 2.0]]);
        assert!(bad.validate(1, "system.b1").is_err());
    }

    #[test]
    fn field_json_round_trip() {
        let f = Field::linear(1, 1, vec![vec![-1.0]]);
        let s = serde_json::to_string(&f).unwrap();
        let g: Field = serde_json::from_str(&s).unwrap();
        assert_eq!(f, g);
        let h: Field = serde_json::from_str(r#"{"rows":1,"cols":1,"family":"affine","offset":[0.5]}"#).unwrap();
        assert_eq!(h.eval(0.0, &[3.0]), vec![0.5]);
    }

    #[test]
    fn local_coefficients_cn() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 2.0, 2.0);
        let fr = sys.frame(0.0).unwrap();
        let mut loc = Local::for_model(&sys);
        sys.local(&fr, &[0.4], &mut loc);
        assert!((loc.drift[0] + 0.4).abs() < 1e-15);
        assert!((loc.sensor[0] - 0.4).abs() < 1e-15);
        assert!((loc.diffusion[0] - 0.34).abs() < 1e-15);
        assert_eq!(loc.coupling, vec![0.3]);
        assert_eq!(loc.noise, vec![0.5]);
        let expect = 0.4 + 0.16 + 0.09 + 0.25;
        assert!((loc.integrand - expect).abs() < 1e-15);
    }

    #[test]
    fn local_coefficients_cs() {
        let th = 0.3f64;
        let mut s = sensor(th.cos(), th.sin());
        s.sigma1c = Field::constant(1, 1, vec![2.0]);
        let fr = s.frame(0.0).unwrap();
        let mut loc = Local::for_model(&s);
        s.local(&fr, &[0.0], &mut loc);
        assert!((loc.coupling[0] - 2.0 * th.cos()).abs() < 1e-15);
        assert!((loc.noise[0] - 2.0 * th.sin()).abs() < 1e-12);
        assert!((loc.diffusion[0] - 4.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn h_map_is_linear_in_b2(c in -5.0f64..5.0, a in -2.0f64..2.0, s2 in 0.2f64..3.0, x in -3.0f64..3.0, t in 0.0f64..1.0) {
            let base = scalar_cn(0.0, 0.0, 0.0, a, s2);
            let scaled = scalar_cn(0.0, 0.0, 0.0, c * a, s2);
            let h1 = h_map(&base, t, &[x]).unwrap()[0];
            let h2 = h_map(&scaled, t, &[x]).unwrap()[0];
            prop_assert!((h2 - c * h1).abs() <= 1e-12 * (1.0 + h2.abs()));
        }

        #[test]
        fn sensor_defect_is_symmetric(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0) {
            let s = SystemCorrelatedSensor {
                n: 1, m: 2, d: 1,
                b1c: Field::zero(1, 1), sigma1c: Field::zero(1, 2), b2c: Field::zero(2, 1),
                sigma2c: vec![a, b, c, d], sigma3c: vec![a - d, b + c],
            };
            let m = s.identity_defect();
            prop_assert_eq!(m[(0, 1)], m[(1, 0)]);
            let passed = validate_correlated_sensor(&s, &[]).passed();
            prop_assert_eq!(passed, m.norm() <= 1e-12);
        }
    }
}
