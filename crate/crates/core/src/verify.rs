//! Ensemble-level residuals of the Fokker-Planck weak form on measures and of
//! the martingale problem on finite truncations of sequence space.
//!
//! Every run of an ensemble is an independent particle solution (own driver,
//! own particles). Runs only keep their pairing summaries against a fixed
//! list of test functions, which is all the residuals need.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    lift_from_summary, min_eigenvalue, second_order_generator, CylinderFunctionRInf, OuterFunction, PairingSummary,
    TestFunction,
};
use crate::error::{Error, Result};
use crate::measure::pairwise_sum;
use crate::model::{FilterModel, Variant};
use crate::paths::{Role, StreamKey, TimeGrid};
use crate::sde::InitialSampler;
use crate::zakai::{integrated_integrand, solve_projected, AuditReport, ProjectedPath, SolverSettings};

/// Empirical law of the filter: `M` independent projected runs.
#[derive(Clone, Debug)]
pub struct EnsembleLaw {
    pub variant: Variant,
    pub grid: TimeGrid,
    pub particles: usize,
    pub phis: Vec<TestFunction>,
    pub runs: Vec<ProjectedPath>,
}

/// Key of run `r` of an ensemble rooted at `base`.
pub fn run_key(base: &StreamKey, r: usize) -> StreamKey {
    base.child(Role::Run, r as u64)
}

impl EnsembleLaw {
    /// Simulate runs `0..runs` below `base`; runs execute in parallel and are
    /// stored in index order.
    pub fn simulate<M: FilterModel + ?Sized>(
        model: &M,
        grid: &TimeGrid,
        settings: &SolverSettings,
        base: &StreamKey,
        init: &InitialSampler,
        phis: &[TestFunction],
        runs: usize,
    ) -> Result<Self> {
        if runs < 2 {
            return Err(Error::config("runs", "an ensemble needs at least two runs"));
        }
        let paths = (0..runs)
            .into_par_iter()
            .map(|r| solve_projected(model, grid, settings, &run_key(base, r), init, phis))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variant: model.variant(),
            grid: grid.clone(),
            particles: settings.particles,
            phis: phis.to_vec(),
            runs: paths,
        })
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// The first `count` runs.
    pub fn head(&self, count: usize) -> Self {
        Self {
            runs: self.runs[..count.min(self.runs.len())].to_vec(),
            ..self.clone()
        }
    }

    fn step_of(&self, t: f64) -> Result<usize> {
        self.grid
            .index_of(t)
            .ok_or_else(|| Error::config("t", format!("{t} is not a grid time")))
    }
}

/// Residual with its Monte-Carlo error and discretization allowance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub label: String,
    pub residual: f64,
    pub stderr: f64,
    pub allowance: f64,
    pub passed: bool,
    pub s: f64,
    pub t: f64,
    pub runs: usize,
    pub particles: usize,
    pub dt: f64,
    /// Smallest eigenvalue of the Gram matrices met along the way, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gram_min_eigenvalue: Option<f64>,
}

impl ResidualReport {
    pub fn verdict(residual: f64, stderr: f64, allowance: f64) -> bool {
        residual.is_finite() && residual.abs() <= 3.0 * stderr + allowance
    }

    pub fn with_allowance(mut self, allowance: f64) -> Self {
        self.allowance = allowance;
        self.passed = Self::verdict(self.residual, self.stderr, allowance);
        self
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, (pairwise_sum(&sq) / (n - 1.0)).sqrt() / n.sqrt())
}

/// A functional `g(<mu, phi_i1>, .., <mu, phi_ik>)` over ensemble test functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub g: OuterFunction,
    pub indices: Vec<usize>,
}

impl BatteryEntry {
    pub fn label(&self) -> String {
        let form = match &self.g {
            OuterFunction::Linear { u } => format!("linear({u})"),
            OuterFunction::Bilinear { u, v } => format!("bilinear({u},{v})"),
            OuterFunction::Tanh { .. } => "tanh".to_string(),
        };
        format!("{form}@{:?}", self.indices)
    }

    pub fn validate(&self, available: usize) -> Result<()> {
        if self.indices.is_empty() || self.g.min_arity() > self.indices.len() {
            return Err(Error::config("battery.indices", format!("{} needs more test functions", self.label())));
        }
        if let Some(&u) = self.indices.iter().find(|&&u| u >= available) {
            return Err(Error::config("battery.indices", format!("index {u} beyond {available} test functions")));
        }
        Ok(())
    }
}

/// Per-run `G(mu_t) - G(mu_0) - sum_{r < t} LG(mu_r) dt`.
fn fpe_increments(ens: &EnsembleLaw, entry: &BatteryEntry, j: usize) -> Vec<f64> {
    let dt = ens.grid.dt();
    ens.runs
        .iter()
        .map(|run| {
            let sel = |r: usize| run.summaries[r].select(&entry.indices);
            let s0 = sel(0);
            let drift: Vec<f64> = (0..j).map(|r| lift_from_summary(&entry.g, &sel(r)) * dt).collect();
            entry.g.value(&sel(j).values) - entry.g.value(&s0.values) - pairwise_sum(&drift)
        })
        .collect()
}

/// Weak-form residual `E[G(mu_t)] - E[G(mu_0)] - int_0^t E[LG(mu_r)] dr` with
/// ensemble averages; the time integral is a left-point sum on the grid.
pub fn fpe_residual(ens: &EnsembleLaw, entry: &BatteryEntry, t: f64, allowance: f64) -> Result<ResidualReport> {
    entry.validate(ens.phis.len())?;
    let j = ens.step_of(t)?;
    let q = fpe_increments(ens, entry, j);
    let (residual, stderr) = mean_stderr(&q);
    Ok(ResidualReport {
        label: format!("fpe {}", entry.label()),
        residual,
        stderr,
        allowance,
        passed: ResidualReport::verdict(residual, stderr, allowance),
        s: 0.0,
        t,
        runs: ens.len(),
        particles: ens.particles,
        dt: ens.grid.dt(),
        gram_min_eigenvalue: None,
    })
}

/// Ensemble-and-time average of the integrability integrand.
pub fn fpe_integrability_audit(ens: &EnsembleLaw, ceiling: f64) -> AuditReport {
    let per_run: Vec<f64> = ens
        .runs
        .iter()
        .map(|r| integrated_integrand(&r.summaries, ens.grid.dt()))
        .collect();
    AuditReport::new(pairwise_sum(&per_run) / per_run.len() as f64, ceiling)
}

/// Bounded path functional `prod_i tanh(scale * w^{coords_i}_{times_i})` of
/// the projected path, using only the listed times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMartFunctional {
    pub times: Vec<f64>,
    pub coords: Vec<usize>,
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl TestMartFunctional {
    /// The constant 1.
    pub fn one() -> Self {
        Self {
            times: Vec::new(),
            coords: Vec::new(),
            scale: 1.0,
        }
    }

    pub fn validate(&self, s: f64, k: usize) -> Result<()> {
        if self.times.len() != self.coords.len() {
            return Err(Error::config("chi", "times and coords differ in length"));
        }
        if self.times.iter().any(|&r| !(r >= 0.0 && r <= s)) {
            return Err(Error::config("chi.times", format!("evaluation times must lie in [0, {s}]")));
        }
        if self.coords.iter().any(|&c| c >= k) {
            return Err(Error::config("chi.coords", format!("coordinates must be below {k}")));
        }
        Ok(())
    }

    /// Value on a run, given its projected coordinates at a grid step.
    pub fn value(&self, grid: &TimeGrid, w: impl Fn(usize) -> Vec<f64>) -> Result<f64> {
        let mut v = 1.0;
        for (&r, &c) in self.times.iter().zip(&self.coords) {
            let j = grid
                .index_of(r)
                .ok_or_else(|| Error::config("chi.times", format!("{r} is not a grid time")))?;
            v *= (self.scale * w(j)[c]).tanh();
        }
        Ok(v)
    }
}

/// Martingale-problem residual
/// `E[(Phi(w_t) - Phi(w_s) - sum_{s <= r < t} L(alpha, beta) Phi(w_r) dt) chi_s(w)]`
/// with `w` the projection of each run on the first `phi.k` test functions.
pub fn martingale_residual(
    ens: &EnsembleLaw,
    phi: &CylinderFunctionRInf,
    s: f64,
    t: f64,
    chi: &TestMartFunctional,
    allowance: f64,
) -> Result<ResidualReport> {
    let k = phi.k;
    if k > ens.phis.len() {
        return Err(Error::config("phi.k", format!("truncation {k} beyond {} test functions", ens.phis.len())));
    }
    if !(s < t) {
        return Err(Error::config("s", "need s < t"));
    }
    chi.validate(s, k)?;
    let (js, jt) = (ens.step_of(s)?, ens.step_of(t)?);
    let dt = ens.grid.dt();
    let idx: Vec<usize> = (0..k).collect();
    let mut min_eig = f64::INFINITY;
    let mut q = Vec::with_capacity(ens.len());
    for run in &ens.runs {
        let w = |j: usize| run.summaries[j].values[..k].to_vec();
        let c = chi.value(&ens.grid, w)?;
        let mut drift = Vec::with_capacity(jt - js);
        for r in js..jt {
            let sr = run.summaries[r].select(&idx);
            let alpha = sr.gram();
            min_eig = min_eig.min(min_eigenvalue(&alpha, k));
            let x = &sr.values;
            drift.push(second_order_generator(&phi.grad(x), &phi.hess(x), &alpha, &sr.drift) * dt);
        }
        q.push((phi.value(&w(jt)) - phi.value(&w(js)) - pairwise_sum(&drift)) * c);
    }
    let (residual, stderr) = mean_stderr(&q);
    Ok(ResidualReport {
        label: format!("martingale k={k}"),
        residual,
        stderr,
        allowance,
        passed: ResidualReport::verdict(residual, stderr, allowance),
        s,
        t,
        runs: ens.len(),
        particles: ens.particles,
        dt,
        gram_min_eigenvalue: Some(min_eig),
    })
}

/// Gram matrices `alpha` of the first `k` test functions at every step of every run.
pub fn gram_min_eigenvalue(ens: &EnsembleLaw, k: usize) -> f64 {
    let idx: Vec<usize> = (0..k).collect();
    ens.runs
        .iter()
        .flat_map(|r| r.summaries.iter())
        .map(|s| min_eigenvalue(&s.select(&idx).gram(), k))
        .fold(f64::INFINITY, f64::min)
}

/// One residual to evaluate on an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Probe {
    Fpe {
        entry: BatteryEntry,
        t: f64,
    },
    Martingale {
        phi: CylinderFunctionRInf,
        s: f64,
        t: f64,
        chi: TestMartFunctional,
    },
}

impl Probe {
    pub fn evaluate(&self, ens: &EnsembleLaw, allowance: f64) -> Result<ResidualReport> {
        match self {
            Probe::Fpe { entry, t } => fpe_residual(ens, entry, *t, allowance),
            Probe::Martingale { phi, s, t, chi } => martingale_residual(ens, phi, *s, *t, chi, allowance),
        }
    }
}

/// Discretization constant `C` with allowance `C dt`, from the same runs on
/// the grid and on a grid twice as coarse driven by the same noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub constant: f64,
    pub runs: usize,
    pub dt: f64,
}

impl Calibration {
    pub fn allowance(&self, dt: f64) -> f64 {
        self.constant * dt
    }
}

/// `C = max_probes |r_coarse - r_fine| / dt_fine`.
pub fn calibrate(fine: &EnsembleLaw, coarse: &EnsembleLaw, probes: &[Probe]) -> Result<Calibration> {
    if fine.len() != coarse.len() {
        return Err(Error::Dimension("calibration ensembles differ in size".into()));
    }
    let dt = fine.grid.dt();
    let mut c: f64 = 0.0;
    for p in probes {
        let rf = p.evaluate(fine, 0.0)?.residual;
        let rc = p.evaluate(coarse, 0.0)?.residual;
        c = c.max((rc - rf).abs() / dt);
    }
    Ok(Calibration {
        constant: c,
        runs: fine.len(),
        dt,
    })
}

/// Simulate the coarse partner of the first `runs` members of an ensemble:
/// half the steps, each coarse increment aggregating two fine draws.
pub fn coarse_partner<M: FilterModel + ?Sized>(
    model: &M,
    fine: &EnsembleLaw,
    settings: &SolverSettings,
    base: &StreamKey,
    init: &InitialSampler,
    runs: usize,
) -> Result<EnsembleLaw> {
    let steps = fine.grid.steps();
    if steps % 2 != 0 {
        return Err(Error::config("steps", "calibration needs an even step count"));
    }
    let grid = TimeGrid::new(fine.grid.horizon(), steps / 2)?;
    let coarse = SolverSettings {
        particles: settings.particles,
        substeps: settings.substeps * 2,
    };
    EnsembleLaw::simulate(model, &grid, &coarse, base, init, &fine.phis, runs)
}

/// Evaluate every probe with the calibrated allowance.
pub fn battery(ens: &EnsembleLaw, probes: &[Probe], cal: &Calibration) -> Result<Vec<ResidualReport>> {
    let allowance = cal.allowance(ens.grid.dt());
    probes.iter().map(|p| p.evaluate(ens, allowance)).collect()
}

/// Fraction of passing reports.
pub fn pass_rate(reports: &[ResidualReport]) -> f64 {
    if reports.is_empty() {
        return 1.0;
    }
    reports.iter().filter(|r| r.passed).count() as f64 / reports.len() as f64
}

/// Summary-level view used by the tests: the lifted generator of an entry at one step.
pub fn entry_generator(entry: &BatteryEntry, s: &PairingSummary) -> f64 {
    lift_from_summary(&entry.g, &s.select(&entry.indices))
}
