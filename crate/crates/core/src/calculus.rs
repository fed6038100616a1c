//! Test functions, cylindrical functionals on measures and their derivatives,
//! signal generators and the lifted generators acting on functionals.
//!
//! A cylindrical functional is `G(mu) = g(<mu, phi_1>, .., <mu, phi_k>)` with
//! compactly supported smooth `phi_u`. Its L-derivatives are
//!
//! ```text
//! d_mu G(mu)(y)         = dg_u  grad phi_u(y)
//! d_y d_mu G(mu)(y)     = dg_u  hess phi_u(y)
//! d2_mu G(mu)(y, y')    = dg_uv grad phi_u(y) grad phi_v(y')^T
//! ```
//!
//! and the lifted generator is
//!
//! ```text
//! L G(mu) = 1/2 dg_uv sum_l A_u^l A_v^l + dg_u B_u,
//! A_u^l = <mu, phi_u sensor^l + d_i phi_u coupling^{il}>,   B_u = <mu, L phi_u>,
//! ```
//!
//! with `sensor`, `coupling` and the signal generator taken from
//! [`FilterModel::local`]. All pairings go through [`PairingSummary`], which
//! is also what the particle solver records along its paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, WeightedCloud};
use crate::model::{FilterModel, Frame, Local, SystemCorrelatedNoise, SystemCorrelatedSensor};

fn smooth_f(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let f = (-1.0 / t).exp();
    let t2 = t * t;
    let t3 = t2 * t;
    (f, f / t2, f * (1.0 / (t3 * t) - 2.0 / t3))
}

/// Smooth step equal to 0 for `s <= 0` and 1 for `s >= 1`, with its first two derivatives.
pub fn smooth_step(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = smooth_f(s);
    let (b, b1, b2) = smooth_f(1.0 - s);
    let (b1, b2) = (-b1, b2);
    let d = a + b;
    let d1 = a1 + b1;
    let d2 = a2 + b2;
    let q = a / d;
    let q1 = (a1 - q * d1) / d;
    let q2 = (a2 - 2.0 * q1 * d1 - q * d2) / d;
    (q, q1, q2)
}

/// Polynomial factor of a test function, in coordinates relative to its center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Poly {
    One,
    Coord(usize),
    Product(usize, usize),
}

/// Value, gradient and Hessian (row-major) at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Jet {
    pub fn new(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
            hess: vec![0.0; n * n],
        }
    }

    fn clear(&mut self) {
        self.value = 0.0;
        self.grad.iter_mut().for_each(|v| *v = 0.0);
        self.hess.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `phi(x) = p(x - c) chi_R(|x - c|)` with a bump `chi_R` equal to 1 on
/// `|y| <= R/2` and 0 on `|y| >= R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
    pub poly: Poly,
}

impl TestFunction {
    pub fn new(center: Vec<f64>, radius: f64, poly: Poly) -> Result<Self> {
        let n = center.len();
        if n == 0 || !(radius.is_finite() && radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::config("test_function", "need a finite center and a positive radius"));
        }
        let ok = match poly {
            Poly::One => true,
            Poly::Coord(i) => i < n,
            Poly::Product(i, j) => i < n && j < n,
        };
        if !ok {
            return Err(Error::config("test_function.poly", format!("index out of range for dimension {n}")));
        }
        Ok(Self { center, radius, poly })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for (a, c) in x.iter().zip(&self.center) {
            r2 += (a - c) * (a - c);
        }
        let rr = self.radius;
        if r2 >= rr * rr {
            return 0.0;
        }
        let r = r2.sqrt();
        let chi = smooth_step(2.0 - 2.0 * r / rr).0;
        let y = |i: usize| x[i] - self.center[i];
        let p = match self.poly {
            Poly::One => 1.0,
            Poly::Coord(i) => y(i),
            Poly::Product(i, j) => y(i) * y(j),
        };
        p * chi
    }

    /// Fill `jet` at `x`; returns false (with a zero jet) outside the support.
    pub fn jet_into(&self, x: &[f64], jet: &mut Jet) -> bool {
        let n = self.dim();
        let mut r2 = 0.0;
        for (a, c) in x.iter().zip(&self.center) {
            r2 += (a - c) * (a - c);
        }
        let rr = self.radius;
        if r2 >= rr * rr {
            jet.clear();
            return false;
        }
        let r = r2.sqrt();
        let half = 0.5 * rr;

        // Bump and its derivatives in x.
        let (chi, s1, s2) = if r <= half {
            (1.0, 0.0, 0.0)
        } else {
            smooth_step(2.0 - 2.0 * r / rr)
        };
        jet.clear();
        let y = |i: usize| x[i] - self.center[i];

        // Polynomial factor.
        let (p, pg, ph): (f64, [(usize, f64); 2], [(usize, usize, f64); 2]) = match self.poly {
            Poly::One => (1.0, [(0, 0.0), (0, 0.0)], [(0, 0, 0.0), (0, 0, 0.0)]),
            Poly::Coord(i) => (y(i), [(i, 1.0), (0, 0.0)], [(0, 0, 0.0), (0, 0, 0.0)]),
            Poly::Product(i, j) => (y(i) * y(j), [(i, y(j)), (j, y(i))], [(i, j, 1.0), (j, i, 1.0)]),
        };

        jet.value = p * chi;
        for &(i, g) in &pg {
            jet.grad[i] += chi * g;
        }
        for &(i, j, h) in &ph {
            jet.hess[i * n + j] += chi * h;
        }
        if r > half {
            let a = -2.0 / rr;
            // grad chi = s1 a y / r
            // hess chi = s2 a^2 y y^T / r^2 + s1 a (I / r - y y^T / r^3)
            let c1 = s1 * a / r;
            let cyy = s2 * a * a / r2 - s1 * a / (r2 * r);
            for i in 0..n {
                let gi = c1 * y(i);
                jet.grad[i] += p * gi;
                for j in 0..n {
                    let mut hc = cyy * y(i) * y(j);
                    if i == j {
                        hc += c1;
                    }
                    jet.hess[i * n + j] += p * hc;
                }
            }
            // Cross terms grad p grad chi^T + grad chi grad p^T.
            for &(i, g) in &pg {
                if g == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let gj = c1 * y(j);
                    jet.hess[i * n + j] += g * gj;
                    jet.hess[j * n + i] += gj * g;
                }
            }
        }
        true
    }

    pub fn jet(&self, x: &[f64]) -> Jet {
        let mut j = Jet::new(self.dim());
        self.jet_into(x, &mut j);
        j
    }
}

/// Outer function `g` of a cylindrical functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum OuterFunction {
    /// `z_u`.
    Linear { u: usize },
    /// `z_u z_v`.
    Bilinear { u: usize, v: usize },
    /// `scale * tanh(weights . z + bias)`.
    Tanh {
        weights: Vec<f64>,
        #[serde(default)]
        bias: f64,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl OuterFunction {
    /// Smallest `k` this function can act on.
    pub fn min_arity(&self) -> usize {
        match self {
            OuterFunction::Linear { u } => u + 1,
            OuterFunction::Bilinear { u, v } => u.max(v) + 1,
            OuterFunction::Tanh { weights, .. } => weights.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, OuterFunction::Linear { .. })
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            OuterFunction::Linear { u } => z[*u],
            OuterFunction::Bilinear { u, v } => z[*u] * z[*v],
            OuterFunction::Tanh { weights, bias, scale } => {
                let a: f64 = weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + bias;
                scale * a.tanh()
            }
        }
    }

    /// Gradient into `g` (length `k`).
    pub fn grad_into(&self, z: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        match self {
            OuterFunction::Linear { u } => g[*u] = 1.0,
            OuterFunction::Bilinear { u, v } => {
                g[*u] += z[*v];
                g[*v] += z[*u];
            }
            OuterFunction::Tanh { weights, bias, scale } => {
                let a: f64 = weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + bias;
                let th = a.tanh();
                let d = scale * (1.0 - th * th);
                for (gi, w) in g.iter_mut().zip(weights) {
                    *gi = d * w;
                }
            }
        }
    }

    /// Hessian into `h` (row-major `k x k`).
    pub fn hess_into(&self, z: &[f64], h: &mut [f64]) {
        let k = z.len();
        h.iter_mut().for_each(|v| *v = 0.0);
        match self {
            OuterFunction::Linear { .. } => {}
            OuterFunction::Bilinear { u, v } => {
                h[u * k + v] += 1.0;
                h[v * k + u] += 1.0;
            }
            OuterFunction::Tanh { weights, bias, scale } => {
                let a: f64 = weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + bias;
                let th = a.tanh();
                let d2 = -2.0 * scale * th * (1.0 - th * th);
                for (i, wi) in weights.iter().enumerate() {
                    for (j, wj) in weights.iter().enumerate() {
                        h[i * k + j] = d2 * wi * wj;
                    }
                }
            }
        }
    }

    pub fn grad(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        self.grad_into(z, &mut g);
        g
    }

    pub fn hess(&self, z: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; z.len() * z.len()];
        self.hess_into(z, &mut h);
        h
    }

    /// Largest absolute first and second derivative entries over the box
    /// `[lo, hi]^k`. Gradients of the polynomial forms are affine in `z`, so
    /// the corners attain the maximum.
    pub fn derivative_bounds(&self, k: usize, lo: f64, hi: f64) -> (f64, f64) {
        match self {
            OuterFunction::Linear { .. } => (1.0, 0.0),
            OuterFunction::Bilinear { u, v } => {
                let m = lo.abs().max(hi.abs());
                (if u == v { 2.0 * m } else { m }, if u == v { 2.0 } else { 1.0 })
            }
            OuterFunction::Tanh { weights, scale, .. } => {
                let wmax = weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
                // sup |1 - tanh^2| = 1, sup |2 tanh (1 - tanh^2)| = 4 / (3 sqrt 3).
                let _ = k;
                (scale.abs() * wmax, scale.abs() * wmax * wmax * 4.0 / (3.0 * 3f64.sqrt()))
            }
        }
    }
}

/// `G(mu) = g(<mu, phi_1>, .., <mu, phi_k>)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylindricalFunctional {
    pub g: OuterFunction,
    pub phis: Vec<TestFunction>,
}

impl CylindricalFunctional {
    pub fn new(g: OuterFunction, phis: Vec<TestFunction>) -> Result<Self> {
        if phis.is_empty() {
            return Err(Error::config("functional.phis", "at least one test function required"));
        }
        if g.min_arity() > phis.len() {
            return Err(Error::config(
                "functional.g",
                format!("outer function needs {} arguments, {} given", g.min_arity(), phis.len()),
            ));
        }
        let n = phis[0].dim();
        if phis.iter().any(|p| p.dim() != n) {
            return Err(Error::config("functional.phis", "test functions of mixed dimension"));
        }
        Ok(Self { g, phis })
    }

    pub fn k(&self) -> usize {
        self.phis.len()
    }

    pub fn dim(&self) -> usize {
        self.phis[0].dim()
    }
}

/// Ordered family of test functions with stable indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub functions: Vec<TestFunction>,
}

/// Parameters of the default tensor dictionary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub radii: Vec<f64>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    /// Keep only the first `count` functions.
    #[serde(default)]
    pub count: Option<usize>,
}

impl Dictionary {
    pub fn new(functions: Vec<TestFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::config("dictionary", "empty dictionary"));
        }
        let n = functions[0].dim();
        if functions.iter().any(|f| f.dim() != n) {
            return Err(Error::config("dictionary", "test functions of mixed dimension"));
        }
        Ok(Self { functions })
    }

    /// For each radius: the plain bump, then coordinate and pairwise-product
    /// polynomial factors, in lexicographic index order.
    pub fn standard(n: usize, spec: &DictionarySpec) -> Result<Self> {
        let center = spec.center.clone().unwrap_or_else(|| vec![0.0; n]);
        if center.len() != n {
            return Err(Error::config("dictionary.center", format!("expected {n} entries")));
        }
        if spec.radii.is_empty() {
            return Err(Error::config("dictionary.radii", "at least one radius required"));
        }
        let mut out = Vec::new();
        for (ri, &r) in spec.radii.iter().enumerate() {
            let mk = |p| {
                TestFunction::new(center.clone(), r, p)
                    .map_err(|_| Error::config(format!("dictionary.radii[{ri}]"), "must be finite and positive"))
            };
            out.push(mk(Poly::One)?);
            for i in 0..n {
                out.push(mk(Poly::Coord(i))?);
            }
            for i in 0..n {
                for j in i..n {
                    out.push(mk(Poly::Product(i, j))?);
                }
            }
        }
        if let Some(c) = spec.count {
            if c == 0 || c > out.len() {
                return Err(Error::config(
                    "dictionary.count",
                    format!("must lie in 1..={}", out.len()),
                ));
            }
            out.truncate(c);
        }
        Self::new(out)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.functions[0].dim()
    }

    pub fn first(&self, k: usize) -> Result<&[TestFunction]> {
        if k > self.len() {
            return Err(Error::Dimension(format!("k = {k} exceeds dictionary size {}", self.len())));
        }
        Ok(&self.functions[..k])
    }

    /// The functional `g(<mu, phi_{i_1}>, ..)` on selected dictionary entries.
    pub fn functional(&self, g: OuterFunction, indices: &[usize]) -> Result<CylindricalFunctional> {
        let mut phis = Vec::with_capacity(indices.len());
        for &i in indices {
            phis.push(
                self.functions
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::config("functional.indices", format!("index {i} outside dictionary")))?,
            );
        }
        CylindricalFunctional::new(g, phis)
    }
}

/// `Phi(x) = base(x_1, .., x_k)` on sequences; coordinates past `k` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderFunctionRInf {
    pub k: usize,
    pub base: OuterFunction,
}

impl CylinderFunctionRInf {
    pub fn new(k: usize, base: OuterFunction) -> Result<Self> {
        if k == 0 || base.min_arity() > k {
            return Err(Error::config("phi", format!("base needs {} coordinates, k = {k}", base.min_arity())));
        }
        Ok(Self { k, base })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.base.value(&x[..self.k])
    }

    /// Gradient over all `x.len()` coordinates (zero past `k`).
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.base.grad_into(&x[..self.k], &mut g[..self.k]);
        g
    }

    /// Hessian over all coordinates (zero outside the leading `k x k` block).
    pub fn hess(&self, x: &[f64]) -> Vec<f64> {
        let (len, k) = (x.len(), self.k);
        let h = self.base.hess(&x[..k]);
        let mut out = vec![0.0; len * len];
        for i in 0..k {
            out[i * len..i * len + k].copy_from_slice(&h[i * k..(i + 1) * k]);
        }
        out
    }
}

/// `drift . grad + 1/2 diffusion : hess`.
pub fn apply_generator(loc: &Local, jet: &Jet) -> f64 {
    let mut first = 0.0;
    for (b, g) in loc.drift.iter().zip(&jet.grad) {
        first += b * g;
    }
    let mut second = 0.0;
    for (a, h) in loc.diffusion.iter().zip(&jet.hess) {
        second += a * h;
    }
    first + 0.5 * second
}

/// The signal generator of `model` at time `t` applied to `phi`.
pub fn generator<'a, M: FilterModel + ?Sized>(
    model: &'a M,
    t: f64,
    phi: &'a TestFunction,
) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    let frame = model.frame(t)?;
    Ok(move |x: &[f64]| {
        let mut loc = Local::for_model(model);
        model.local(&frame, x, &mut loc);
        apply_generator(&loc, &phi.jet(x))
    })
}

/// `x -> b1 . grad phi + 1/2 (sigma0 sigma0^T + sigma1 sigma1^T) : hess phi`.
pub fn generator_l<'a>(
    sys: &'a SystemCorrelatedNoise,
    t: f64,
    phi: &'a TestFunction,
) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    generator(sys, t, phi)
}

/// `x -> b1c . grad phi + 1/2 sigma1c sigma1c^T : hess phi`.
pub fn generator_lcheck<'a>(
    sys: &'a SystemCorrelatedSensor,
    t: f64,
    phi: &'a TestFunction,
) -> Result<impl Fn(&[f64]) -> f64 + 'a> {
    generator(sys, t, phi)
}

/// Pairings of one cloud against `k` test functions:
/// `values[u] = <mu, phi_u>`, `drift[u] = <mu, L phi_u>`,
/// `diffusion[u*m + l] = <mu, phi_u sensor^l + d_i phi_u coupling^{il}>`,
/// plus the mass and the pairing of the integrability integrand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub k: usize,
    pub m: usize,
    pub values: Vec<f64>,
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub mass: f64,
    pub integrand: f64,
}

impl PairingSummary {
    /// Number of scalar entries contributed per atom.
    pub fn width(k: usize, m: usize) -> usize {
        k * (2 + m) + 2
    }

    /// Build from per-atom rows of `width` terms (atom-major), summing each
    /// entry over atoms in a fixed tree order.
    pub fn from_rows(k: usize, m: usize, rows: &[f64]) -> Self {
        let w = Self::width(k, m);
        let natoms = rows.len() / w;
        let scale = 1.0 / natoms as f64;
        let mut col = vec![0.0; natoms];
        let sums: Vec<f64> = (0..w)
            .map(|e| {
                for (c, r) in col.iter_mut().zip(rows.chunks_exact(w)) {
                    *c = r[e];
                }
                pairwise_sum(&col) * scale
            })
            .collect();
        Self {
            k,
            m,
            values: sums[..k].to_vec(),
            drift: sums[k..2 * k].to_vec(),
            diffusion: sums[2 * k..2 * k + k * m].to_vec(),
            mass: sums[w - 2],
            integrand: sums[w - 1],
        }
    }

    /// Restrict to the listed test-function indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        let m = self.m;
        let mut diffusion = Vec::with_capacity(indices.len() * m);
        for &u in indices {
            diffusion.extend_from_slice(&self.diffusion[u * m..(u + 1) * m]);
        }
        Self {
            k: indices.len(),
            m,
            values: indices.iter().map(|&u| self.values[u]).collect(),
            drift: indices.iter().map(|&u| self.drift[u]).collect(),
            diffusion,
            mass: self.mass,
            integrand: self.integrand,
        }
    }

    /// Gram matrix `alpha[u][v] = sum_l A_u^l A_v^l`.
    pub fn gram(&self) -> Vec<f64> {
        let (k, m) = (self.k, self.m);
        let a = &self.diffusion;
        let mut g = vec![0.0; k * k];
        for u in 0..k {
            for v in 0..k {
                let mut s = 0.0;
                for l in 0..m {
                    s += a[u * m + l] * a[v * m + l];
                }
                g[u * k + v] = s;
            }
        }
        g
    }
}

/// Per-atom contributions of weight `w` at an atom with coefficients `loc`
/// and test-function jets `jets`, written into `row` (`width` entries).
pub fn write_terms(loc: &Local, jets: &[Jet], w: f64, m: usize, row: &mut [f64]) {
    let k = jets.len();
    let n = loc.drift.len();
    for (u, jet) in jets.iter().enumerate() {
        row[u] = w * jet.value;
        row[k + u] = w * apply_generator(loc, jet);
        for l in 0..m {
            let mut a = jet.value * loc.sensor[l];
            for i in 0..n {
                a += jet.grad[i] * loc.coupling[i * m + l];
            }
            row[2 * k + u * m + l] = w * a;
        }
    }
    let wd = PairingSummary::width(k, m);
    row[wd - 2] = w;
    row[wd - 1] = w * loc.integrand;
}

/// Pairings of `mu` against `phis` under the coefficients in `frame`.
pub fn summarize<M: FilterModel + ?Sized>(
    model: &M,
    frame: &Frame,
    phis: &[TestFunction],
    mu: &WeightedCloud,
) -> Result<PairingSummary> {
    let (n, m, k) = (model.state_dim(), model.driver_dim(), phis.len());
    if mu.dim() != n {
        return Err(Error::Dimension(format!("cloud dimension {} vs state dimension {n}", mu.dim())));
    }
    let natoms = mu.len();
    let wd = PairingSummary::width(k, m);
    let mut terms = vec![0.0; wd * natoms];
    let mut loc = Local::for_model(model);
    let mut jets: Vec<Jet> = (0..k).map(|_| Jet::new(n)).collect();
    for i in 0..natoms {
        let x = mu.atom(i);
        model.local(frame, x, &mut loc);
        for (phi, jet) in phis.iter().zip(jets.iter_mut()) {
            phi.jet_into(x, jet);
        }
        write_terms(&loc, &jets, mu.weights()[i], m, &mut terms[i * wd..(i + 1) * wd]);
    }
    let s = PairingSummary::from_rows(k, m, &terms);
    if s.values.iter().chain(&s.drift).chain(&s.diffusion).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pairing summary".into()));
    }
    Ok(s)
}

/// `1/2 sum_uv hess_uv alpha_uv + sum_u grad_u beta_u`.
pub fn second_order_generator(grad: &[f64], hess: &[f64], alpha: &[f64], beta: &[f64]) -> f64 {
    let mut second = 0.0;
    for (h, a) in hess.iter().zip(alpha) {
        second += h * a;
    }
    let mut first = 0.0;
    for (g, b) in grad.iter().zip(beta) {
        first += g * b;
    }
    0.5 * second + first
}

/// The lifted generator applied to `g` given the pairing summary of a cloud.
pub fn lift_from_summary(g: &OuterFunction, s: &PairingSummary) -> f64 {
    let grad = g.grad(&s.values);
    let hess = g.hess(&s.values);
    second_order_generator(&grad, &hess, &s.gram(), &s.drift)
}

/// Martingale integrand `sum_u dg_u A_u^l`, one entry per driver component.
pub fn martingale_integrand(g: &OuterFunction, s: &PairingSummary) -> Vec<f64> {
    let grad = g.grad(&s.values);
    let m = s.m;
    (0..m)
        .map(|l| {
            let mut v = 0.0;
            for (u, gu) in grad.iter().enumerate() {
                v += gu * s.diffusion[u * m + l];
            }
            v
        })
        .collect()
}

/// `(<mu, phi_1>, .., <mu, phi_k>)` without coefficient evaluation.
pub fn pairings(phis: &[TestFunction], mu: &WeightedCloud) -> Vec<f64> {
    let natoms = mu.len();
    let mut buf = vec![0.0; natoms];
    phis.iter()
        .map(|phi| {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = mu.weights()[i] * phi.value(mu.atom(i));
            }
            pairwise_sum(&buf) / natoms as f64
        })
        .collect()
}

pub fn eval_g(gf: &CylindricalFunctional, mu: &WeightedCloud) -> f64 {
    gf.g.value(&pairings(&gf.phis, mu))
}

/// `d_mu G(mu)(y)`.
pub fn lderiv(gf: &CylindricalFunctional, mu: &WeightedCloud, y: &[f64]) -> Vec<f64> {
    let z = pairings(&gf.phis, mu);
    let dg = gf.g.grad(&z);
    let mut out = vec![0.0; gf.dim()];
    for (phi, d) in gf.phis.iter().zip(&dg) {
        let jet = phi.jet(y);
        for (o, g) in out.iter_mut().zip(&jet.grad) {
            *o += d * g;
        }
    }
    out
}

/// `d_y d_mu G(mu)(y)`, row-major `n x n`.
pub fn lderiv_y(gf: &CylindricalFunctional, mu: &WeightedCloud, y: &[f64]) -> Vec<f64> {
    let z = pairings(&gf.phis, mu);
    let dg = gf.g.grad(&z);
    let n = gf.dim();
    let mut out = vec![0.0; n * n];
    for (phi, d) in gf.phis.iter().zip(&dg) {
        let jet = phi.jet(y);
        for (o, h) in out.iter_mut().zip(&jet.hess) {
            *o += d * h;
        }
    }
    out
}

/// `d2_mu G(mu)(y, y')`, row-major `n x n`.
pub fn lderiv2(gf: &CylindricalFunctional, mu: &WeightedCloud, y: &[f64], y2: &[f64]) -> Vec<f64> {
    let z = pairings(&gf.phis, mu);
    let k = gf.k();
    let h = gf.g.hess(&z);
    let n = gf.dim();
    let ga: Vec<Jet> = gf.phis.iter().map(|p| p.jet(y)).collect();
    let gb: Vec<Jet> = gf.phis.iter().map(|p| p.jet(y2)).collect();
    let mut out = vec![0.0; n * n];
    for u in 0..k {
        for v in 0..k {
            let c = h[u * k + v];
            if c == 0.0 {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] += c * ga[u].grad[i] * gb[v].grad[j];
                }
            }
        }
    }
    out
}

/// The lifted generator `L_t G(mu)` of `model`.
pub fn lift<M: FilterModel + ?Sized>(model: &M, t: f64, gf: &CylindricalFunctional, mu: &WeightedCloud) -> Result<f64> {
    let frame = model.frame(t)?;
    let s = summarize(model, &frame, &gf.phis, mu)?;
    Ok(lift_from_summary(&gf.g, &s))
}

pub fn lift_l(sys: &SystemCorrelatedNoise, t: f64, gf: &CylindricalFunctional, mu: &WeightedCloud) -> Result<f64> {
    lift(sys, t, gf, mu)
}

pub fn lift_lcheck(sys: &SystemCorrelatedSensor, t: f64, gf: &CylindricalFunctional, mu: &WeightedCloud) -> Result<f64> {
    lift(sys, t, gf, mu)
}

/// The lifted generator written through L-derivatives, valid when the
/// observation drift vanishes:
///
/// ```text
/// 1/2 ∫∫ <d2_mu G(y, y'), c(y) c(y')^T> mu(dy) mu(dy')
///   + 1/2 ∫ d_y d_mu G(y) : a(y) mu(dy) + ∫ d_mu G(y) . b(y) mu(dy)
/// ```
///
/// with `c` the coupling, `a` the diffusion and `b` the drift. Evaluated by
/// a direct double sum over atoms; it shares no arithmetic with [`lift`].
pub fn lift_lderiv_form<M: FilterModel + ?Sized>(
    model: &M,
    t: f64,
    gf: &CylindricalFunctional,
    mu: &WeightedCloud,
) -> Result<f64> {
    let frame = model.frame(t)?;
    let (n, m) = (model.state_dim(), model.driver_dim());
    let natoms = mu.len();
    let w = mu.weights();
    let mut locs = Vec::with_capacity(natoms);
    for i in 0..natoms {
        let mut loc = Local::for_model(model);
        model.local(&frame, mu.atom(i), &mut loc);
        locs.push(loc);
    }
    let scale = 1.0 / natoms as f64;

    let mut cross = 0.0;
    for i in 0..natoms {
        let yi = mu.atom(i);
        for j in 0..natoms {
            let d2 = lderiv2(gf, mu, yi, mu.atom(j));
            // <d2, c_i c_j^T>_F
            let (ci, cj) = (&locs[i].coupling, &locs[j].coupling);
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    let mut k = 0.0;
                    for l in 0..m {
                        k += ci[a * m + l] * cj[b * m + l];
                    }
                    s += d2[a * n + b] * k;
                }
            }
            cross += w[i] * w[j] * s;
        }
    }
    cross *= scale * scale;

    let mut local = 0.0;
    for (i, loc) in locs.iter().enumerate() {
        let y = mu.atom(i);
        let dy = lderiv_y(gf, mu, y);
        let d1 = lderiv(gf, mu, y);
        let mut s = 0.0;
        for (h, a) in dy.iter().zip(&loc.diffusion) {
            s += 0.5 * h * a;
        }
        for (g, b) in d1.iter().zip(&loc.drift) {
            s += g * b;
        }
        local += w[i] * s;
    }
    local *= scale;
    Ok(0.5 * cross + local)
}

/// `(<mu, phi_1>, .., <mu, phi_k>)` for the first `k` dictionary entries.
pub fn project_t(mu: &WeightedCloud, dict: &Dictionary, k: usize) -> Result<Vec<f64>> {
    Ok(pairings(dict.first(k)?, mu))
}

fn dict_summary<M: FilterModel + ?Sized>(
    model: &M,
    t: f64,
    mu: &WeightedCloud,
    dict: &Dictionary,
    idx: &[usize],
) -> Result<PairingSummary> {
    let mut phis = Vec::with_capacity(idx.len());
    for &u in idx {
        phis.push(
            dict.functions
                .get(u)
                .cloned()
                .ok_or_else(|| Error::Dimension(format!("index {u} exceeds dictionary size {}", dict.len())))?,
        );
    }
    summarize(model, &model.frame(t)?, &phis, mu)
}

/// `beta^u = <mu, L_t phi_u>`.
pub fn coeff_beta<M: FilterModel + ?Sized>(model: &M, t: f64, mu: &WeightedCloud, dict: &Dictionary, u: usize) -> Result<f64> {
    Ok(dict_summary(model, t, mu, dict, &[u])?.drift[0])
}

/// `alpha^{uv} = sum_l A_u^l A_v^l`.
pub fn coeff_alpha<M: FilterModel + ?Sized>(
    model: &M,
    t: f64,
    mu: &WeightedCloud,
    dict: &Dictionary,
    u: usize,
    v: usize,
) -> Result<f64> {
    let s = dict_summary(model, t, mu, dict, &[u, v])?;
    Ok(s.gram()[1])
}

/// `(beta, alpha)` for the first `k` dictionary entries; `alpha` row-major.
pub fn coefficients<M: FilterModel + ?Sized>(
    model: &M,
    t: f64,
    mu: &WeightedCloud,
    dict: &Dictionary,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx: Vec<usize> = (0..k).collect();
    let s = dict_summary(model, t, mu, dict, &idx)?;
    let g = s.gram();
    Ok((s.drift, g))
}

/// Smallest eigenvalue of a symmetric row-major matrix.
pub fn min_eigenvalue(a: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let m = nalgebra::DMatrix::from_row_slice(k, k, a);
    m.symmetric_eigen().eigenvalues.iter().fold(f64::INFINITY, |x, &y| x.min(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scalar_cn, Field};
    use crate::paths::StreamKey;
    use proptest::prelude::*;
    use rand::Rng;

    fn bump(r: f64, poly: Poly) -> TestFunction {
        TestFunction::new(vec![0.0], r, poly).unwrap()
    }

    fn fd_check(phi: &TestFunction, x: &[f64], h: f64) -> f64 {
        let n = x.len();
        let jet = phi.jet(x);
        assert!((jet.value - phi.value(x)).abs() < 1e-15);
        let mut worst = 0.0f64;
        let scale = |a: f64| a.abs().max(1.0);
        for i in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (phi.value(&xp) - phi.value(&xm)) / (2.0 * h);
            worst = worst.max((fd - jet.grad[i]).abs() / scale(jet.grad[i]));
            let gp = phi.jet(&xp).grad;
            let gm = phi.jet(&xm).grad;
            for j in 0..n {
                let fd2 = (gp[j] - gm[j]) / (2.0 * h);
                worst = worst.max((fd2 - jet.hess[j * n + i]).abs() / scale(jet.hess[j * n + i]));
            }
        }
        worst
    }

    #[test]
    fn smooth_step_is_smooth_and_monotone() {
        assert_eq!(smooth_step(-0.1), (0.0, 0.0, 0.0));
        assert_eq!(smooth_step(1.5), (1.0, 0.0, 0.0));
        assert!((smooth_step(0.5).0 - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 1..100 {
            let (q, q1, _) = smooth_step(i as f64 / 100.0);
            assert!(q >= prev && q1 >= 0.0);
            prev = q;
        }
    }

    #[test]
    fn bump_plateau_and_support() {
        let phi = TestFunction::new(vec![0.5, -0.5], 2.0, Poly::One).unwrap();
        assert_eq!(phi.value(&[0.5, -0.5]), 1.0);
        assert_eq!(phi.value(&[1.4, -0.5]), 1.0);
        let j = phi.jet(&[0.5, 1.6]);
        assert_eq!(j.value, 0.0);
        assert!(j.grad.iter().chain(&j.hess).all(|&v| v == 0.0));
        let j = phi.jet(&[1.3, -0.5]);
        assert_eq!(j.value, 1.0);
        assert!(j.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_functions_match_central_differences() {
        let mut rng = StreamKey::new(31).rng();
        let polys = [Poly::One, Poly::Coord(0), Poly::Coord(1), Poly::Product(0, 1), Poly::Product(1, 1)];
        for trial in 0..1000 {
            let poly = polys[trial % polys.len()];
            let phi = TestFunction::new(vec![0.2, -0.1], 1.5, poly).unwrap();
            let x = [rng.random::<f64>() * 3.6 - 1.6, rng.random::<f64>() * 3.6 - 1.9];
            let err = fd_check(&phi, &x, 1e-5);
            assert!(err <= 1e-6, "trial {trial} x {x:?} err {err}");
        }
    }

    fn linear_g(u: usize) -> OuterFunction {
        OuterFunction::Linear { u }
    }

    #[test]
    fn generator_examples() {
        // b1 = 0, sigma0 = 1, sigma1 = 0, phi = x^2 near 0.
        let sys = scalar_cn(0.0, 1.0, 0.0, 0.0, 1.0);
        let phi = bump(5.0, Poly::Product(0, 0));
        assert!((generator_l(&sys, 0.0, &phi).unwrap()(&[0.0]) - 1.0).abs() < 1e-15);
        // pure drift b1 = -x on phi = x.
        let sys = scalar_cn(-1.0, 0.0, 0.0, 0.0, 1.0);
        let phi = bump(5.0, Poly::Coord(0));
        assert!((generator_l(&sys, 0.0, &phi).unwrap()(&[0.7]) + 0.7).abs() < 1e-15);
        // sigma0 = sigma1 = 1 on x^2.
        let sys = scalar_cn(0.0, 1.0, 1.0, 0.0, 1.0);
        let phi = bump(5.0, Poly::Product(0, 0));
        assert!((generator_l(&sys, 0.0, &phi).unwrap()(&[0.0]) - 2.0).abs() < 1e-15);
    }

    fn sensor(b1: f64, s1: f64) -> SystemCorrelatedSensor {
        let th = 0.4f64;
        SystemCorrelatedSensor {
            n: 1,
            m: 1,
            d: 1,
            b1c: Field::linear(1, 1, vec![vec![b1]]),
            sigma1c: Field::constant(1, 1, vec![s1]),
            b2c: Field::zero(1, 1),
            sigma2c: vec![th.cos()],
            sigma3c: vec![th.sin()],
        }
    }

    #[test]
    fn generator_check_examples() {
        let phi2 = bump(5.0, Poly::Product(0, 0));
        let phi1 = bump(5.0, Poly::Coord(0));
        assert!((generator_lcheck(&sensor(0.0, 1.0), 0.0, &phi2).unwrap()(&[0.0]) - 1.0).abs() < 1e-15);
        assert!((generator_lcheck(&sensor(-1.0, 0.0), 0.0, &phi1).unwrap()(&[0.7]) + 0.7).abs() < 1e-15);
        let s2 = 2f64.sqrt();
        assert!((generator_lcheck(&sensor(0.0, s2), 0.0, &phi2).unwrap()(&[0.0]) - 2.0).abs() < 1e-14);
    }

    fn cloud(points: &[f64], weights: &[f64]) -> WeightedCloud {
        WeightedCloud::new(1, points.to_vec(), weights.to_vec()).unwrap()
    }

    #[test]
    fn eval_g_examples() {
        let mu = cloud(&[0.1, -0.3, 0.2], &[1.0, 2.0, 0.5]);
        let g = CylindricalFunctional::new(linear_g(0), vec![bump(4.0, Poly::One)]).unwrap();
        assert!((eval_g(&g, &mu) - mu.mass()).abs() < 1e-15);
        let half = cloud(&[0.0, 9.0], &[1.0, 1.0]);
        let sq = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![bump(4.0, Poly::One)]).unwrap();
        assert_eq!(eval_g(&sq, &half), 0.25);
        let far = cloud(&[10.0, 20.0], &[1.0, 1.0]);
        let t = OuterFunction::Tanh {
            weights: vec![1.0, 1.0],
            bias: 0.3,
            scale: 1.0,
        };
        let gt = CylindricalFunctional::new(t, vec![bump(1.0, Poly::One), bump(2.0, Poly::Coord(0))]).unwrap();
        assert_eq!(eval_g(&gt, &far), 0.3f64.tanh());
    }

    #[test]
    fn lderiv_examples() {
        let mu = cloud(&[0.1, 0.9, 1.4], &[1.0, 1.0, 2.0]);
        let phi = bump(2.0, Poly::Coord(0));
        let y = [1.3];
        let lin = CylindricalFunctional::new(linear_g(0), vec![phi.clone()]).unwrap();
        assert_eq!(lderiv(&lin, &mu, &y), phi.jet(&y).grad);
        assert!(lderiv2(&lin, &mu, &y, &[0.2]).iter().all(|&v| v == 0.0));
        let sq = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![phi.clone()]).unwrap();
        let z = pairings(&[phi.clone()], &mu)[0];
        let d = lderiv(&sq, &mu, &y)[0];
        assert!((d - 2.0 * z * phi.jet(&y).grad[0]).abs() < 1e-15);
        assert_eq!(lderiv_y(&lin, &mu, &y), phi.jet(&y).hess);
    }

    #[test]
    fn lift_examples() {
        let mu = cloud(&[0.1, -0.4, 0.6], &[1.0, 0.5, 1.5]);
        let phi = bump(3.0, Poly::Product(0, 0));
        // Linear g with b2 = 0 gives the paired generator.
        let sys = scalar_cn(-0.7, 0.5, 0.3, 0.0, 1.0);
        let g = CylindricalFunctional::new(linear_g(0), vec![phi.clone()]).unwrap();
        let l = generator_l(&sys, 0.0, &phi).unwrap();
        let expect = crate::measure::pair(&mu, &l).unwrap();
        assert!((lift_l(&sys, 0.0, &g, &mu).unwrap() - expect).abs() < 1e-14);
        // All coefficients zero.
        let zero = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        let q = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![phi.clone()]).unwrap();
        assert_eq!(lift_l(&zero, 0.0, &q, &mu).unwrap(), 0.0);
        // g = z^2, phi = 1 on the support, only h = c: result c^2 mass^2.
        let c = 0.8;
        let mut hsys = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        hsys.b2 = Field::constant(1, 1, vec![c]);
        let flat = bump(10.0, Poly::One);
        let q = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![flat]).unwrap();
        let mass = mu.mass();
        assert!((lift_l(&hsys, 0.0, &q, &mu).unwrap() - c * c * mass * mass).abs() < 1e-14);
    }

    #[test]
    fn lift_check_examples() {
        let mu = cloud(&[0.1, -0.4, 0.6], &[1.0, 0.5, 1.5]);
        let phi = bump(3.0, Poly::Coord(0));
        let mut zero = sensor(0.0, 0.0);
        let q = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![phi.clone()]).unwrap();
        assert_eq!(lift_lcheck(&zero, 0.0, &q, &mu).unwrap(), 0.0);
        let s = sensor(-1.0, 0.6);
        let g = CylindricalFunctional::new(linear_g(0), vec![phi.clone()]).unwrap();
        let expect = crate::measure::pair(&mu, generator_lcheck(&s, 0.0, &phi).unwrap()).unwrap();
        assert!((lift_lcheck(&s, 0.0, &g, &mu).unwrap() - expect).abs() < 1e-14);
        // Quadratic instance: b2c = c, sigma1c = 0 and phi = 1 on the support.
        zero.b2c = Field::constant(1, 1, vec![0.5]);
        let flat = CylindricalFunctional::new(OuterFunction::Bilinear { u: 0, v: 0 }, vec![bump(10.0, Poly::One)]).unwrap();
        let mass = mu.mass();
        assert!((lift_lcheck(&zero, 0.0, &flat, &mu).unwrap() - 0.25 * mass * mass).abs() < 1e-14);
    }

    #[test]
    fn projection_examples() {
        let dict = Dictionary::standard(1, &DictionarySpec { radii: vec![2.0], center: None, count: None }).unwrap();
        assert_eq!(dict.len(), 3);
        let single = cloud(&[1.2], &[1.0]);
        let p = project_t(&single, &dict, 3).unwrap();
        for (u, v) in p.iter().enumerate() {
            assert_eq!(*v, dict.functions[u].value(&[1.2]));
        }
        let zero = cloud(&[0.3, 0.1], &[0.0, 0.0]);
        assert!(project_t(&zero, &dict, 3).unwrap().iter().all(|&v| v == 0.0));
        let mu = cloud(&[0.3, 0.1], &[1.0, 3.0]);
        let mu3 = cloud(&[0.3, 0.1], &[3.0, 9.0]);
        let (a, b) = (project_t(&mu, &dict, 3).unwrap(), project_t(&mu3, &dict, 3).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((3.0 * x - y).abs() < 1e-15);
        }
        assert!(project_t(&mu, &dict, 4).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let dict = Dictionary::standard(1, &DictionarySpec { radii: vec![2.0, 3.0], center: None, count: None }).unwrap();
        let mu = cloud(&[0.3, -0.8, 1.1, 0.2], &[1.0, 0.7, 1.2, 0.4]);
        let mut sys = scalar_cn(-0.5, 0.4, 0.3, 0.0, 1.0);
        sys.b2 = Field {
            rows: 1,
            cols: 1,
            family: crate::model::Family::AffineTanh {
                offset: vec![],
                time: vec![],
                linear: vec![],
                amplitude: vec![0.8],
                weights: vec![vec![1.0]],
                bias: vec![],
            },
        };
        for u in 0..dict.len() {
            for v in 0..dict.len() {
                assert_eq!(
                    coeff_alpha(&sys, 0.1, &mu, &dict, u, v).unwrap(),
                    coeff_alpha(&sys, 0.1, &mu, &dict, v, u).unwrap()
                );
            }
        }
        let (_, alpha) = coefficients(&sys, 0.1, &mu, &dict, dict.len()).unwrap();
        assert!(min_eigenvalue(&alpha, dict.len()) >= -1e-10);
        let flat = scalar_cn(-0.5, 0.4, 0.0, 0.0, 1.0);
        let (_, alpha) = coefficients(&flat, 0.1, &mu, &dict, dict.len()).unwrap();
        assert!(alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn linear_lift_equals_beta() {
        let dict = Dictionary::standard(2, &DictionarySpec { radii: vec![2.5], center: None, count: None }).unwrap();
        let mut rng = StreamKey::new(8).rng();
        let sys = SystemCorrelatedNoise {
            n: 2,
            m: 1,
            d: 2,
            b1: Field::linear(2, 1, vec![vec![-1.0, 0.3], vec![0.2, -0.5]]),
            sigma0: Field::constant(2, 2, vec![0.4, 0.1, 0.0, 0.3]),
            sigma1: Field::constant(2, 1, vec![0.2, -0.3]),
            b2: Field::linear(1, 1, vec![vec![0.7, 0.1]]),
            sigma2: Field::constant(1, 1, vec![1.2]),
            max_condition: 1e8,
        };
        for _ in 0..20 {
            let atoms: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect();
            let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.1).collect();
            let mu = WeightedCloud::new(2, atoms, w).unwrap();
            let t = rng.random::<f64>();
            for u in 0..dict.len() {
                let g = dict.functional(linear_g(0), &[u]).unwrap();
                assert_eq!(lift_l(&sys, t, &g, &mu).unwrap(), coeff_beta(&sys, t, &mu, &dict, u).unwrap());
            }
        }
    }

    #[test]
    fn cylinder_function_ignores_tail() {
        let phi = CylinderFunctionRInf::new(
            2,
            OuterFunction::Tanh {
                weights: vec![0.5, -1.0],
                bias: 0.1,
                scale: 2.0,
            },
        )
        .unwrap();
        let mut rng = StreamKey::new(4).rng();
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let g = phi.grad(&x);
            assert!(g[2..].iter().all(|&v| v == 0.0));
            let h = phi.hess(&x);
            for i in 0..6 {
                for j in 0..6 {
                    if i >= 2 || j >= 2 {
                        assert_eq!(h[i * 6 + j], 0.0);
                    }
                }
            }
        }
        assert!(CylinderFunctionRInf::new(1, OuterFunction::Bilinear { u: 0, v: 1 }).is_err());
    }

    #[test]
    fn outer_functions_match_differences() {
        let forms = [
            OuterFunction::Linear { u: 1 },
            OuterFunction::Bilinear { u: 0, v: 2 },
            OuterFunction::Bilinear { u: 1, v: 1 },
            OuterFunction::Tanh {
                weights: vec![0.3, -0.8, 1.1],
                bias: -0.2,
                scale: 1.5,
            },
        ];
        let z = [0.3, -0.4, 0.9];
        let h = 1e-5;
        for g in &forms {
            let gr = g.grad(&z);
            let he = g.hess(&z);
            for i in 0..3 {
                let mut zp = z;
                let mut zm = z;
                zp[i] += h;
                zm[i] -= h;
                let fd = (g.value(&zp) - g.value(&zm)) / (2.0 * h);
                assert!((fd - gr[i]).abs() < 1e-8);
                let (gp, gm) = (g.grad(&zp), g.grad(&zm));
                for j in 0..3 {
                    assert!(((gp[j] - gm[j]) / (2.0 * h) - he[j * 3 + i]).abs() < 1e-8);
                }
            }
            let (d1, d2) = g.derivative_bounds(3, -1.0, 1.0);
            assert!(gr.iter().all(|v| v.abs() <= d1 + 1e-12));
            assert!(he.iter().all(|v| v.abs() <= d2 + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn lderiv_form_matches_display_without_observation_drift(
            pts in proptest::collection::vec(-2.0f64..2.0, 2..12),
            a in -1.0f64..1.0,
            s0 in 0.0f64..1.0,
            s1 in -1.0f64..1.0,
        ) {
            let sys = scalar_cn(a, s0, s1, 0.0, 1.0);
            let n = pts.len();
            let mu = WeightedCloud::new(1, pts, vec![1.0; n]).unwrap();
            let phis = vec![bump(2.0, Poly::One), bump(2.5, Poly::Coord(0)), bump(3.0, Poly::Product(0, 0))];
            for g in [
                OuterFunction::Bilinear { u: 0, v: 2 },
                OuterFunction::Tanh { weights: vec![0.5, -1.0, 0.7], bias: 0.1, scale: 1.0 },
            ] {
                let gf = CylindricalFunctional::new(g, phis.clone()).unwrap();
                let d = lift_l(&sys, 0.0, &gf, &mu).unwrap();
                let l = lift_lderiv_form(&sys, 0.0, &gf, &mu).unwrap();
                prop_assert!((d - l).abs() <= 1e-10, "{} vs {}", d, l);
            }
        }
    }
}
