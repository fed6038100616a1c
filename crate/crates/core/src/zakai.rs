//! Weighted particle solutions of the Zakai equations.
//!
//! Each particle follows the signal dynamics under the reference measure:
//! the observation-derived driver is common to all particles, the remaining
//! noise is drawn independently per particle, and the log-weight collects
//! `sensor . dDriver - |sensor|^2 dt / 2`. The cloud `(1/N) sum_i w_i delta_{x_i}`
//! approximates the unnormalized filter. There is no resampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    lift_from_summary, martingale_integrand, summarize, write_terms, CylindricalFunctional, Jet, OuterFunction,
    PairingSummary, TestFunction,
};
use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, WeightedCloud};
use crate::model::{FilterModel, Local, SystemCorrelatedNoise, SystemCorrelatedSensor, Variant};
use crate::paths::{sample_brownian_refined, NormalStream, Role, StreamKey, TimeGrid};
use crate::sde::{euler_step, log_weight_increment, DriverPath, DriverRole, InitialSampler};

const CHUNK: usize = 256;

/// Stream of particle `i` below a run key, for the initial draw and the noise.
pub fn particle_keys(run: &StreamKey, i: usize) -> (StreamKey, StreamKey) {
    let p = run.child(Role::Particle, i as u64);
    (p.child(Role::Initial, 0), p.child(Role::Signal, 0))
}

/// Key of the common driver of a run simulated under the reference measure.
pub fn driver_key(run: &StreamKey) -> StreamKey {
    run.child(Role::Driver, 0)
}

/// Driver path of a run; with `substeps > 1` each increment sums finer draws
/// so that grids related by refinement see the same Brownian path.
pub fn sample_driver(variant: Variant, grid: &TimeGrid, m: usize, run: &StreamKey, substeps: usize) -> DriverPath {
    DriverPath::for_variant(variant, sample_brownian_refined(grid, m, &driver_key(run), substeps))
}

/// State of the particle system at one grid time, before the step is taken.
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub dim: usize,
    pub atoms: &'a [f64],
    pub log_weights: &'a [f64],
    /// Pairings against the solver's test functions (plus mass and integrand).
    pub summary: &'a PairingSummary,
}

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub particles: usize,
    /// Noise draws are aggregated over this many finer substeps.
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

/// Run the particle system and hand every grid time (`0..=steps`) to `observe`.
#[allow(clippy::too_many_arguments)]
pub fn run_particles<M: FilterModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    driver: &DriverPath,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
    phis: &[TestFunction],
    mut observe: impl FnMut(&StepView<'_>) -> Result<()>,
) -> Result<()> {
    let (n, m, q) = (model.state_dim(), model.driver_dim(), model.noise_dim());
    let np = settings.particles;
    if np == 0 {
        return Err(Error::config("particles", "must be positive"));
    }
    if init.dim() != n {
        return Err(Error::Dimension(format!("initial law of dimension {} for state dimension {n}", init.dim())));
    }
    if driver.path.dim() != m || driver.steps() != grid.steps() {
        return Err(Error::Dimension("driver does not match the model or grid".into()));
    }
    if phis.iter().any(|p| p.dim() != n) {
        return Err(Error::Dimension("test function dimension differs from the state dimension".into()));
    }
    let k = phis.len();
    let wd = PairingSummary::width(k, m);
    let dt = grid.dt();
    let sdt = dt.sqrt();

    let mut xs = vec![0.0f64; np * n];
    let mut streams: Vec<NormalStream> = Vec::with_capacity(np);
    for i in 0..np {
        let (ki, kn) = particle_keys(run, i);
        xs[i * n..(i + 1) * n].copy_from_slice(&init.sample(&ki));
        streams.push(kn.normals(settings.substeps));
    }
    let mut logw = vec![0.0f64; np];
    let mut terms = vec![0.0; np * wd];
    let mut prev_x = xs.clone();
    let mut prev_w = logw.clone();

    for j in 0..=grid.steps() {
        let t = grid.time(j);
        let frame = model.frame(t)?;
        let last = j == grid.steps();
        let d_driver = if last { &[][..] } else { driver.step(j) };
        prev_x.copy_from_slice(&xs);
        prev_w.copy_from_slice(&logw);
        // Terms are written at the pre-step state, then the particle moves.
        let failure = xs
            .par_chunks_mut(CHUNK * n)
            .zip(logw.par_chunks_mut(CHUNK))
            .zip(streams.par_chunks_mut(CHUNK))
            .zip(terms.par_chunks_mut(CHUNK * wd))
            .enumerate()
            .map(|(c, (((xc, lc), sc), tc))| {
                let mut loc = Local::for_model(model);
                let mut jets: Vec<Jet> = (0..k).map(|_| Jet::new(n)).collect();
                let mut xi = vec![0.0; q];
                let mut next = vec![0.0; n];
                for p in 0..lc.len() {
                    let x = &mut xc[p * n..(p + 1) * n];
                    model.local(&frame, x, &mut loc);
                    for (phi, jet) in phis.iter().zip(jets.iter_mut()) {
                        phi.jet_into(x, jet);
                    }
                    write_terms(&loc, &jets, lc[p].exp(), m, &mut tc[p * wd..(p + 1) * wd]);
                    if last {
                        continue;
                    }
                    sc[p].fill_step(&mut xi);
                    for v in xi.iter_mut() {
                        *v *= sdt;
                    }
                    euler_step(&loc, x, d_driver, &xi, dt, &mut next);
                    lc[p] += log_weight_increment(&loc.sensor, d_driver, dt);
                    if !(next.iter().all(|v| v.is_finite()) && lc[p].is_finite()) {
                        return Some(c * CHUNK + p);
                    }
                    x.copy_from_slice(&next);
                }
                None
            })
            .find_first(|f| f.is_some())
            .flatten();

        let summary = PairingSummary::from_rows(k, m, &terms);
        if !(summary.mass.is_finite() && summary.integrand.is_finite()) {
            return Err(Error::Divergence { step: j, particle: None });
        }
        observe(&StepView {
            step: j,
            t,
            dim: n,
            atoms: &prev_x,
            log_weights: &prev_w,
            summary: &summary,
        })?;
        if let Some(p) = failure {
            return Err(Error::Divergence { step: j + 1, particle: Some(p) });
        }
    }
    Ok(())
}

/// Weighted cloud of a step view.
pub fn view_cloud(view: &StepView<'_>) -> Result<WeightedCloud> {
    WeightedCloud::new(view.dim, view.atoms.to_vec(), view.log_weights.iter().map(|l| l.exp()).collect())
}

/// Unnormalized filter along the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ZakaiPath {
    pub grid: TimeGrid,
    pub driver: DriverPath,
    /// One cloud per grid time, `steps + 1` in total, each with the same atom count.
    pub clouds: Vec<WeightedCloud>,
}

impl ZakaiPath {
    pub fn particles(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn cloud(&self, j: usize) -> &WeightedCloud {
        &self.clouds[j]
    }

    pub fn final_cloud(&self) -> &WeightedCloud {
        self.clouds.last().expect("non-empty path")
    }
}

/// Particle solution of the filter equation of `model` along a given driver.
pub fn solve_zakai<M: FilterModel + ?Sized>(
    model: &M,
    driver: &DriverPath,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
) -> Result<ZakaiPath> {
    let mut clouds = Vec::with_capacity(grid.steps() + 1);
    run_particles(model, grid, driver, settings, run, init, &[], |v| {
        clouds.push(view_cloud(v)?);
        Ok(())
    })?;
    Ok(ZakaiPath {
        grid: grid.clone(),
        driver: driver.clone(),
        clouds,
    })
}

fn check_role(driver: &DriverPath, variant: Variant) -> Result<()> {
    let expected = match variant {
        Variant::Cn => DriverRole::Wtilde,
        Variant::Cs => DriverRole::Vtilde,
    };
    if driver.role != expected {
        return Err(Error::Unsupported(format!("driver {:?} for the {variant:?} system", driver.role)));
    }
    Ok(())
}

/// Correlated-noise system: common `dW~`, independent `dB` per particle.
pub fn solve_zakai_cn(
    sys: &SystemCorrelatedNoise,
    driver: &DriverPath,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
) -> Result<ZakaiPath> {
    sys.validate_structure()?;
    check_role(driver, Variant::Cn)?;
    solve_zakai(sys, driver, grid, settings, run, init)
}

/// Correlated-sensor system: common `dV~`, independent residual noise per particle.
pub fn solve_zakai_cs(
    sys: &SystemCorrelatedSensor,
    driver: &DriverPath,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
) -> Result<ZakaiPath> {
    sys.validate_structure()?;
    check_role(driver, Variant::Cs)?;
    solve_zakai(sys, driver, grid, settings, run, init)
}

/// Pairing summaries of a run along the grid, without the clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPath {
    pub grid: TimeGrid,
    pub driver: DriverPath,
    pub summaries: Vec<PairingSummary>,
    pub ess: Vec<f64>,
}

impl ProjectedPath {
    /// Coordinates `<mu_{t_j}, phi_u>` at step `j`.
    pub fn values(&self, j: usize) -> &[f64] {
        &self.summaries[j].values
    }
}

/// Run one ensemble member under the reference measure: the driver is drawn
/// from `run`'s driver stream and the particles from its particle streams.
pub fn solve_projected<M: FilterModel + ?Sized>(
    model: &M,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
    phis: &[TestFunction],
) -> Result<ProjectedPath> {
    let driver = sample_driver(model.variant(), grid, model.driver_dim(), run, settings.substeps);
    solve_projected_along(model, &driver, grid, settings, run, init, phis)
}

/// As [`solve_projected`] with a given driver.
pub fn solve_projected_along<M: FilterModel + ?Sized>(
    model: &M,
    driver: &DriverPath,
    grid: &TimeGrid,
    settings: &SolverSettings,
    run: &StreamKey,
    init: &InitialSampler,
    phis: &[TestFunction],
) -> Result<ProjectedPath> {
    let mut summaries = Vec::with_capacity(grid.steps() + 1);
    let mut ess = Vec::with_capacity(grid.steps() + 1);
    run_particles(model, grid, driver, settings, run, init, phis, |v| {
        summaries.push(v.summary.clone());
        ess.push(log_weight_ess(v.log_weights));
        Ok(())
    })?;
    Ok(ProjectedPath {
        grid: grid.clone(),
        driver: driver.clone(),
        summaries,
        ess,
    })
}

/// Effective sample size from log-weights, shifted by their maximum.
pub fn log_weight_ess(logw: &[f64]) -> f64 {
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
    let s = pairwise_sum(&w);
    s * s / pairwise_sum(&sq)
}

/// `r_j = G(mu_j) - G(mu_0) - sum_{i<j} [LG(mu_i) dt + dg . A(mu_i) dDriver_i]`
/// from per-step pairing summaries against the functional's test functions.
pub fn ito_residual_from_summaries(g: &OuterFunction, summaries: &[PairingSummary], driver: &DriverPath) -> Vec<f64> {
    let dt = driver.path.dt();
    let g0 = g.value(&summaries[0].values);
    let mut out = Vec::with_capacity(summaries.len());
    let mut acc = 0.0;
    for (j, s) in summaries.iter().enumerate() {
        out.push(g.value(&s.values) - g0 - acc);
        if j < driver.steps() {
            let mi = martingale_integrand(g, s);
            let mut mart = 0.0;
            for (a, b) in mi.iter().zip(driver.step(j)) {
                mart += a * b;
            }
            acc += lift_from_summary(g, s) * dt + mart;
        }
    }
    out
}

/// Path-wise weak-form residual of a solved path tested against `gf`.
pub fn pathwise_ito_residual<M: FilterModel + ?Sized>(
    path: &ZakaiPath,
    model: &M,
    gf: &CylindricalFunctional,
) -> Result<Vec<f64>> {
    if path.driver.path.dim() != model.driver_dim() {
        return Err(Error::Dimension("driver does not match the model".into()));
    }
    let summaries = path
        .clouds
        .iter()
        .enumerate()
        .map(|(j, mu)| summarize(model, &model.frame(path.grid.time(j))?, &gf.phis, mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(ito_residual_from_summaries(&gf.g, &summaries, &path.driver))
}

/// Time-integrated pairing of the integrability integrand, with its verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub value: f64,
    pub ceiling: f64,
    pub passed: bool,
}

impl AuditReport {
    pub fn new(value: f64, ceiling: f64) -> Self {
        Self {
            value,
            ceiling,
            passed: value.is_finite() && value < ceiling,
        }
    }
}

/// Left-point time sum of `<mu_t, integrand>` from per-step summaries.
pub fn integrated_integrand(summaries: &[PairingSummary], dt: f64) -> f64 {
    let v: Vec<f64> = summaries[..summaries.len() - 1].iter().map(|s| s.integrand * dt).collect();
    pairwise_sum(&v)
}

/// Integrability audit of a single path.
pub fn integrability_audit_path<M: FilterModel + ?Sized>(path: &ZakaiPath, model: &M, ceiling: f64) -> Result<AuditReport> {
    let summaries = path
        .clouds
        .iter()
        .enumerate()
        .map(|(j, mu)| summarize(model, &model.frame(path.grid.time(j))?, &[], mu))
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport::new(integrated_integrand(&summaries, path.grid.dt()), ceiling))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{Dictionary, DictionarySpec};
    use crate::measure::pair;
    use crate::model::{scalar_cn, scalar_cs, Field};
    use crate::sde::InitialLaw;

    fn gauss(mean: f64, var: f64) -> InitialSampler {
        InitialLaw::Gaussian {
            mean: vec![mean],
            cov: vec![var],
        }
        .sampler("init")
        .unwrap()
    }

    fn settings(particles: usize) -> SolverSettings {
        SolverSettings { particles, substeps: 1 }
    }

    fn dict1() -> Dictionary {
        Dictionary::standard(
            1,
            &DictionarySpec {
                radii: vec![4.0],
                center: None,
                count: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn no_sensor_no_coupling_keeps_unit_weights() {
        let sys = scalar_cn(-1.0, 0.7, 0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let run = StreamKey::new(1);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let path = solve_zakai_cn(&sys, &drv, &grid, &settings(300), &run, &gauss(0.0, 1.0)).unwrap();
        assert_eq!(path.clouds.len(), 51);
        for c in &path.clouds {
            assert!(c.weights().iter().all(|&w| w == 1.0));
            assert_eq!(c.mass(), 1.0);
        }
    }

    #[test]
    fn zero_sensor_drift_keeps_unit_weights() {
        let sys = scalar_cs(-1.0, 0.5, 0.0, 0.6, 0.8);
        let grid = TimeGrid::new(0.5, 20).unwrap();
        let run = StreamKey::new(2);
        let drv = sample_driver(Variant::Cs, &grid, 1, &run, 1);
        let path = solve_zakai_cs(&sys, &drv, &grid, &settings(100), &run, &gauss(0.0, 1.0)).unwrap();
        assert!(path.clouds.iter().all(|c| c.weights().iter().all(|&w| w == 1.0)));
    }

    #[test]
    fn initial_cloud_has_unit_weights_and_sampled_atoms() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.1, 10).unwrap();
        let run = StreamKey::new(3);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let init = gauss(0.5, 2.0);
        let path = solve_zakai_cn(&sys, &drv, &grid, &settings(40), &run, &init).unwrap();
        let c0 = path.cloud(0);
        for i in 0..40 {
            assert_eq!(c0.weights()[i], 1.0);
            assert_eq!(c0.atom(i), &init.sample(&particle_keys(&run, i).0)[..]);
        }
        assert!(path.clouds.iter().all(|c| c.weights().iter().all(|&w| w > 0.0)));
    }

    #[test]
    fn driver_role_must_match_variant() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.1, 10).unwrap();
        let run = StreamKey::new(3);
        let drv = sample_driver(Variant::Cs, &grid, 1, &run, 1);
        assert!(solve_zakai_cn(&sys, &drv, &grid, &settings(4), &run, &gauss(0.0, 1.0)).is_err());
    }

    #[test]
    fn summaries_equal_direct_weighted_pairings() {
        let sys = scalar_cn(-0.5, 0.4, 0.0, 1.0, 1.0);
        let grid = TimeGrid::new(0.5, 25).unwrap();
        let run = StreamKey::new(4);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let d = dict1();
        let set = settings(700);
        let init = gauss(0.0, 1.0);
        let path = solve_zakai_cn(&sys, &drv, &grid, &set, &run, &init).unwrap();
        let proj = solve_projected_along(&sys, &drv, &grid, &set, &run, &init, &d.functions).unwrap();
        for (j, c) in path.clouds.iter().enumerate() {
            for (u, phi) in d.functions.iter().enumerate() {
                assert_eq!(proj.summaries[j].values[u], pair(c, |x| phi.value(x)).unwrap());
            }
            assert_eq!(proj.summaries[j].mass, c.mass());
        }
    }

    #[test]
    fn identical_across_thread_counts() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.2, 20).unwrap();
        let run = StreamKey::new(5);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let solve = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| solve_zakai_cn(&sys, &drv, &grid, &settings(1500), &run, &gauss(0.0, 1.0)).unwrap())
        };
        let a = solve(1);
        assert_eq!(a, solve(4));
        assert_eq!(a, solve(7));
    }

    #[test]
    fn frozen_system_has_zero_ito_residual() {
        let sys = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 40).unwrap();
        let run = StreamKey::new(6);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let path = solve_zakai_cn(&sys, &drv, &grid, &settings(200), &run, &gauss(0.0, 1.0)).unwrap();
        let d = dict1();
        for g in [
            OuterFunction::Linear { u: 1 },
            OuterFunction::Bilinear { u: 0, v: 1 },
            OuterFunction::Tanh {
                weights: vec![0.3, -1.0],
                bias: 0.2,
                scale: 1.0,
            },
        ] {
            let gf = d.functional(g, &[0, 1]).unwrap();
            let r = pathwise_ito_residual(&path, &sys, &gf).unwrap();
            assert!(r.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_functional_residual_is_weak_form_residual() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(0.3, 30).unwrap();
        let run = StreamKey::new(7);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let path = solve_zakai_cn(&sys, &drv, &grid, &settings(300), &run, &gauss(0.0, 1.0)).unwrap();
        let d = dict1();
        let gf = d.functional(OuterFunction::Linear { u: 0 }, &[1]).unwrap();
        let r = pathwise_ito_residual(&path, &sys, &gf).unwrap();
        // <mu_t, phi> - <mu_0, phi> - sum <mu, L phi> dt - sum <mu, phi h + phi' sigma1> dW
        let phi = &d.functions[1];
        let dt = grid.dt();
        let mut acc = 0.0;
        let v0 = pair(path.cloud(0), |x| phi.value(x)).unwrap();
        for j in 0..=grid.steps() {
            let mu = path.cloud(j);
            let want = pair(mu, |x| phi.value(x)).unwrap() - v0 - acc;
            assert!((r[j] - want).abs() < 1e-12, "{j}: {} vs {want}", r[j]);
            if j < grid.steps() {
                let lphi = pair(mu, |x| {
                    let jet = phi.jet(x);
                    -x[0] * jet.grad[0] + 0.5 * (0.25 + 0.09) * jet.hess[0]
                })
                .unwrap();
                let a = pair(mu, |x| {
                    let jet = phi.jet(x);
                    jet.value * x[0] + jet.grad[0] * 0.3
                })
                .unwrap();
                acc += lphi * dt + a * drv.step(j)[0];
            }
        }
    }

    #[test]
    fn mass_is_a_martingale() {
        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let masses: Vec<f64> = (0..200u64)
            .map(|r| {
                let run = StreamKey::new(8).child(Role::Run, r);
                let p = solve_projected(&sys, &grid, &settings(50), &run, &gauss(0.0, 1.0), &[]).unwrap();
                p.summaries.last().unwrap().mass
            })
            .collect();
        let mean = masses.iter().sum::<f64>() / 200.0;
        let var = masses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0;
        assert!((mean - 1.0).abs() < 3.0 * (var / 200.0).sqrt(), "{mean} {var}");
    }

    #[test]
    fn ito_residual_shrinks_under_refinement() {
        let sys = scalar_cn(-1.0, 0.0, 0.6, 1.0, 1.0);
        let d = dict1();
        let gf = d
            .functional(
                OuterFunction::Tanh {
                    weights: vec![1.0, 0.5],
                    bias: 0.0,
                    scale: 1.0,
                },
                &[1, 2],
            )
            .unwrap();
        let mean_abs = |steps: usize, sub: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let mut s = 0.0;
            for r in 0..20u64 {
                let run = StreamKey::new(9).child(Role::Run, r);
                let set = SolverSettings { particles: 100, substeps: sub };
                let p = solve_projected(&sys, &grid, &set, &run, &gauss(0.0, 1.0), &gf.phis).unwrap();
                s += ito_residual_from_summaries(&gf.g, &p.summaries, &p.driver).last().unwrap().abs();
            }
            s / 20.0
        };
        let coarse = mean_abs(50, 4);
        let fine = mean_abs(200, 1);
        assert!(coarse / fine >= 1.5, "{coarse} {fine}");
    }

    #[test]
    fn audit_examples() {
        let zero = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let run = StreamKey::new(10);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let path = solve_zakai_cn(&zero, &drv, &grid, &settings(50), &run, &gauss(0.0, 1.0)).unwrap();
        let rep = integrability_audit_path(&path, &zero, 1.0).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(rep.passed);
        assert!(!integrability_audit_path(&path, &zero, 0.0).unwrap().passed);

        let sys = scalar_cn(-1.0, 0.5, 0.3, 1.0, 1.0);
        let path = solve_zakai_cn(&sys, &drv, &grid, &settings(50), &run, &gauss(0.0, 1.0)).unwrap();
        let rep = integrability_audit_path(&path, &sys, 1e6).unwrap();
        assert!(rep.passed && rep.value > 0.0);
    }

    #[test]
    fn explosive_drift_is_reported_as_divergence() {
        let mut sys = scalar_cn(0.0, 0.0, 0.0, 0.0, 1.0);
        sys.b1 = Field::linear(1, 1, vec![vec![1e200]]);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let run = StreamKey::new(11);
        let drv = sample_driver(Variant::Cn, &grid, 1, &run, 1);
        let err = solve_zakai_cn(&sys, &drv, &grid, &settings(8), &run, &gauss(1.0, 0.1)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
