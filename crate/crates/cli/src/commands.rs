//! The four subcommands.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zakai_core::calculus::pairings;
use zakai_core::measure::WeightedCloud;
use zakai_core::model::{box_samples, validate_correlated_noise, validate_correlated_sensor, Field, FilterModel, System};
use zakai_core::oracle::{
    kalman_bucy, kalman_gap, lderiv_trial, posterior_moments, random_lderiv_case, reference_independent_filter,
    LinearGaussianSpec, Uncorrelated,
};
use zakai_core::paths::{BrownianPath, Role};
use zakai_core::sde::{extract_vtilde, extract_wtilde, simulate_truth_cn, simulate_truth_cs, DriverPath, TruthTrajectory};
use zakai_core::verify::{
    battery, calibrate, coarse_partner, fpe_integrability_audit, mean_stderr, Calibration, EnsembleLaw, Probe,
    ResidualReport,
};
use zakai_core::zakai::{integrability_audit_path, run_particles, sample_driver, solve_zakai, view_cloud, ZakaiPath};
use zakai_core::{Error, Result};

use crate::report::{report_paths, write_jsonl, write_summary_csv, Report, Verdict};
use crate::scenario::{Scenario, Task};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Fpe,
    Martingale,
    Lderiv,
    Kalman,
    Audit,
    Reduction,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Fpe,
        Suite::Martingale,
        Suite::Lderiv,
        Suite::Kalman,
        Suite::Audit,
        Suite::Reduction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Fpe => "fpe",
            Suite::Martingale => "martingale",
            Suite::Lderiv => "lderiv",
            Suite::Kalman => "kalman",
            Suite::Audit => "audit",
            Suite::Reduction => "reduction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Record of a `simulate` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool_version: String,
    pub core_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub particles: usize,
    /// The scenario with its output directory cleared.
    pub scenario: Scenario,
    pub files: Vec<FileEntry>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn cloud_name(step: usize) -> String {
    format!("clouds/cloud-{step:05}.csv")
}

fn simulate_truth(sc: &Scenario, run: &zakai_core::paths::StreamKey) -> Result<(TruthTrajectory, DriverPath)> {
    let grid = sc.time_grid()?;
    let init = sc.sampler()?;
    match &sc.system {
        System::Cn(s) => {
            let truth = simulate_truth_cn(s, &grid, run, &init)?;
            let drv = extract_wtilde(s, &grid, &truth.dy)?;
            Ok((truth, drv))
        }
        System::Cs(s) => {
            let truth = simulate_truth_cs(s, &grid, run, &init)?;
            let drv = extract_vtilde(s, &grid, &truth.dy)?;
            Ok((truth, drv))
        }
    }
}

/// Truth trajectory, observation-derived driver, one cloud per grid time and,
/// for linear-Gaussian systems, the Kalman-Bucy filter; then the manifest.
pub fn simulate(sc: &Scenario) -> Result<Manifest> {
    let out = &sc.output;
    fs::create_dir_all(out.join("clouds"))?;
    let grid = sc.time_grid()?;
    let init = sc.sampler()?;
    let run = sc.root(Task::Simulate);
    let (truth, driver) = simulate_truth(sc, &run)?;

    let mut names = vec!["truth.csv".to_string(), "driver.csv".to_string()];
    truth.write_csv(BufWriter::new(File::create(out.join("truth.csv"))?))?;
    driver.path.write_csv(BufWriter::new(File::create(out.join("driver.csv"))?))?;
    if let Ok(spec) = LinearGaussianSpec::from_system(&sc.system, &sc.initial) {
        let kb = kalman_bucy(&spec, &truth.dy, &grid)?;
        kb.write_csv(BufWriter::new(File::create(out.join("kalman.csv"))?))?;
        names.push("kalman.csv".into());
    }
    run_particles(&sc.system, &grid, &driver, &sc.settings(), &run, &init, &[], |v| {
        let name = cloud_name(v.step);
        view_cloud(v)?.write_csv(BufWriter::new(File::create(out.join(&name))?))?;
        names.push(name);
        Ok(())
    })?;

    let files = names
        .into_iter()
        .map(|p| {
            let sha256 = sha256_file(&out.join(&p))?;
            Ok(FileEntry { path: p, sha256 })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stored = sc.clone();
    stored.output = PathBuf::new();
    let manifest = Manifest {
        schema: crate::scenario::SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        core_version: zakai_core::VERSION.into(),
        config_hash: sc.config_hash()?,
        seed: sc.seed,
        steps: grid.steps(),
        particles: sc.particles,
        scenario: stored,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(out.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(out: &Path) -> Result<Manifest> {
    let path = out.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(format!("{} (run `simulate` first)", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// The persisted filter path of a prior `simulate` with the same config and seed.
pub fn load_simulated_path(sc: &Scenario) -> Result<ZakaiPath> {
    let m = read_manifest(&sc.output)?;
    if m.config_hash != sc.config_hash()? || m.seed != sc.seed {
        return Err(Error::MissingArtifact(format!(
            "{} holds a run of another configuration or seed (run `simulate` first)",
            sc.output.display()
        )));
    }
    let grid = sc.time_grid()?;
    let open = |name: &str| {
        File::open(sc.output.join(name)).map_err(|_| Error::MissingArtifact(format!("{name} in {}", sc.output.display())))
    };
    let path = BrownianPath::read_csv(open("driver.csv")?, grid.dt())?;
    let driver = DriverPath::for_variant(sc.system.variant(), path);
    let clouds = (0..=grid.steps())
        .map(|j| WeightedCloud::read_csv(open(&cloud_name(j))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ZakaiPath { grid, driver, clouds })
}

/// Shared state of one `verify` invocation.
struct Session<'a> {
    sc: &'a Scenario,
    ensemble: Option<EnsembleLaw>,
    calibration: Option<Calibration>,
}

impl<'a> Session<'a> {
    fn ensemble(&mut self) -> Result<&EnsembleLaw> {
        if self.ensemble.is_none() {
            let sc = self.sc;
            let ens = EnsembleLaw::simulate(
                &sc.system,
                &sc.time_grid()?,
                &sc.settings(),
                &sc.root(Task::Ensemble),
                &sc.sampler()?,
                &sc.test_functions()?,
                sc.ensemble,
            )?;
            self.ensemble = Some(ens);
        }
        Ok(self.ensemble.as_ref().expect("just simulated"))
    }

    /// One calibration over every weak-form and martingale probe.
    fn calibration(&mut self) -> Result<Calibration> {
        if let Some(c) = &self.calibration {
            return Ok(c.clone());
        }
        let sc = self.sc;
        let dt = sc.time_grid()?.dt();
        let cal = match sc.tolerances.allowance_constant {
            Some(constant) => Calibration { constant, runs: 0, dt },
            None => {
                if sc.grid.steps % 2 != 0 {
                    return Err(Error::config("grid.steps", "calibration needs an even step count"));
                }
                let runs = ((sc.ensemble as f64 * sc.tolerances.calibration_fraction).ceil() as usize).clamp(2, sc.ensemble);
                let fine = self.ensemble()?.head(runs);
                let coarse = coarse_partner(&sc.system, &fine, &sc.settings(), &sc.root(Task::Ensemble), &sc.sampler()?, runs)?;
                let mut probes = sc.fpe_probes();
                probes.extend(sc.martingale_probes());
                calibrate(&fine, &coarse, &probes)?
            }
        };
        self.calibration = Some(cal.clone());
        Ok(cal)
    }

    fn run(&mut self, suite: Suite) -> Result<Vec<Report>> {
        match suite {
            Suite::Fpe => self.fpe(),
            Suite::Martingale => self.martingale(),
            Suite::Lderiv => lderiv(self.sc),
            Suite::Kalman => kalman(self.sc),
            Suite::Audit => self.audit(),
            Suite::Reduction => reduction(self.sc),
        }
    }

    fn probes(&mut self, suite: &str, probes: &[Probe]) -> Result<Vec<Report>> {
        if probes.is_empty() {
            return Ok(Vec::new());
        }
        let cal = self.calibration()?;
        let ens = self.ensemble()?;
        let mut chi = 0;
        battery(ens, probes, &cal)?
            .iter()
            .zip(probes)
            .map(|(r, p)| {
                let mut rep = Report::residual(suite, r)?.with_detail(&serde_json::json!({ "report": r, "calibration": cal }))?;
                if let Probe::Martingale { s, .. } = p {
                    rep.label = format!("{} s={s} t={} chi[{chi}]", r.label, r.t);
                    chi += 1;
                }
                Ok(rep)
            })
            .collect()
    }

    fn fpe(&mut self) -> Result<Vec<Report>> {
        let probes = self.sc.fpe_probes();
        let mut out = self.probes("fpe", &probes)?;
        let ens = self.ensemble()?;
        let last = ens.grid.steps();
        let masses: Vec<f64> = ens.runs.iter().map(|r| r.summaries[last].mass).collect();
        let (mean, stderr) = mean_stderr(&masses);
        out.push(Report {
            stderr,
            verdict: Verdict::from_bool(ResidualReport::verdict(mean - 1.0, stderr, 0.0)),
            ..Report::bound("fpe", format!("mass t={}", ens.grid.horizon()), mean - 1.0, 0.0)
        });
        Ok(out)
    }

    fn martingale(&mut self) -> Result<Vec<Report>> {
        let probes = self.sc.martingale_probes();
        let mut out = self.probes("martingale", &probes)?;
        let worst = out
            .iter()
            .filter_map(|r| r.detail["report"]["gram_min_eigenvalue"].as_f64())
            .fold(f64::INFINITY, f64::min);
        if worst.is_finite() {
            out.push(Report::bound("martingale", "gram psd", (-worst).max(0.0), 1e-10).with_detail(
                &serde_json::json!({ "min_eigenvalue": worst }),
            )?);
        }
        Ok(out)
    }

    fn audit(&mut self) -> Result<Vec<Report>> {
        let sc = self.sc;
        let path = load_simulated_path(sc)?;
        let ceiling = sc.tolerances.audit_ceiling;
        let mut out = vec![Report::audit(
            "audit",
            "simulated path",
            &integrability_audit_path(&path, &sc.system, ceiling)?,
        )?];
        let ens = self.ensemble()?;
        out.push(Report::audit("audit", "ensemble", &fpe_integrability_audit(ens, ceiling))?);
        Ok(out)
    }
}

fn lderiv(sc: &Scenario) -> Result<Vec<Report>> {
    let root = sc.root(Task::Lderiv);
    let trials = (0..sc.lderiv.trials)
        .map(|i| {
            let (gf, mu, v) = random_lderiv_case(&root.child(Role::Sample, i as u64));
            lderiv_trial(&gf, &mu, &v, sc.lderiv.eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = trials.iter().map(|t| t.relative_error()).fold(0.0, f64::max);
    let [lo, hi] = sc.tolerances.lderiv_order;
    let ratios: Vec<f64> = trials.iter().filter_map(|t| t.decay_ratio()).collect();
    let outside = ratios.iter().filter(|&&r| !(r >= lo && r <= hi)).count();
    let (rmin, rmax) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    Ok(vec![
        Report::bound("lderiv", "max relative error", worst, sc.tolerances.lderiv_relative)
            .with_detail(&serde_json::json!({ "trials": trials.len(), "eps": sc.lderiv.eps }))?,
        Report::bound("lderiv", "decay ratios outside range", outside as f64, 0.0).with_detail(&serde_json::json!({
            "checked": ratios.len(),
            "min_ratio": if ratios.is_empty() { None } else { Some(rmin) },
            "max_ratio": if ratios.is_empty() { None } else { Some(rmax) },
        }))?,
    ])
}

fn kalman(sc: &Scenario) -> Result<Vec<Report>> {
    let spec = LinearGaussianSpec::from_system(&sc.system, &sc.initial)?;
    let grid = sc.time_grid()?;
    let init = sc.sampler()?;
    let root = sc.root(Task::Kalman);
    let mut out = Vec::new();
    for p in 0..sc.kalman.paths {
        let run = root.child(Role::Run, p as u64);
        let (truth, driver) = simulate_truth(sc, &run)?;
        let post = posterior_moments(&sc.system, &grid, &driver, &sc.settings(), &run, &init)?;
        let kb = kalman_bucy(&spec, &truth.dy, &grid)?;
        let gap = kalman_gap(&post, &kb)?;
        out.push(Report::bound("kalman", format!("path {p} mean gap"), gap.mean, sc.tolerances.kalman_mean));
        out.push(Report::bound(
            "kalman",
            format!("path {p} variance gap"),
            gap.variance,
            sc.tolerances.kalman_variance,
        ));
    }
    Ok(out)
}

/// The scenario's system with the correlation switched off.
pub fn uncorrelated(system: &System) -> Result<System> {
    match system {
        System::Cn(s) => Ok(System::Cn(zakai_core::model::SystemCorrelatedNoise {
            sigma1: Field::zero(s.n, s.m),
            ..s.clone()
        })),
        System::Cs(s) => {
            if s.d < s.m {
                return Err(Error::config("system.d", "the classical reduction needs d >= m"));
            }
            let mut s3 = vec![0.0; s.m * s.d];
            for l in 0..s.m {
                s3[l * s.d + l] = 1.0;
            }
            Ok(System::Cs(zakai_core::model::SystemCorrelatedSensor {
                sigma2c: vec![0.0; s.m * s.m],
                sigma3c: s3,
                ..s.clone()
            }))
        }
    }
}

/// Largest gap in mass and dictionary pairings between two filter paths.
pub fn max_pairing_gap(a: &ZakaiPath, b: &ZakaiPath, phis: &[zakai_core::calculus::TestFunction]) -> f64 {
    let mut gap: f64 = 0.0;
    for (ca, cb) in a.clouds.iter().zip(&b.clouds) {
        gap = gap.max((ca.mass() - cb.mass()).abs());
        for (pa, pb) in pairings(phis, ca).iter().zip(pairings(phis, cb)) {
            gap = gap.max((pa - pb).abs());
        }
    }
    if a.clouds.len() != b.clouds.len() {
        return f64::INFINITY;
    }
    gap
}

fn reduction(sc: &Scenario) -> Result<Vec<Report>> {
    let reduced = uncorrelated(&sc.system)?;
    let grid = sc.time_grid()?;
    let init = sc.sampler()?;
    let run = sc.root(Task::Reduction).child(Role::Run, 0);
    let driver = sample_driver(reduced.variant(), &grid, reduced.driver_dim(), &run, sc.substeps);
    let solver = solve_zakai(&reduced, &driver, &grid, &sc.settings(), &run, &init)?;
    let reference = match &reduced {
        System::Cn(s) => reference_independent_filter(Uncorrelated::Noise(s), &driver, &grid, &sc.settings(), &run, &init)?,
        System::Cs(s) => reference_independent_filter(Uncorrelated::Sensor(s), &driver, &grid, &sc.settings(), &run, &init)?,
    };
    let gap = max_pairing_gap(&solver, &reference, &sc.test_functions()?);
    Ok(vec![Report::bound("reduction", "max pairing gap", gap, sc.tolerances.reduction)])
}

/// Run the requested suites in canonical order and write one JSONL and one
/// CSV file per suite under `<out>/reports`.
pub fn verify(sc: &Scenario, suites: &[Suite]) -> Result<Vec<Report>> {
    let mut wanted: Vec<Suite> = suites.to_vec();
    wanted.sort();
    wanted.dedup();
    let hash = sc.config_hash()?;
    fs::create_dir_all(sc.output.join("reports"))?;
    let mut session = Session {
        sc,
        ensemble: None,
        calibration: None,
    };
    let mut all = Vec::new();
    for suite in wanted {
        let reports = session.run(suite)?;
        let (jp, cp) = report_paths(&sc.output, suite.name(), &hash, sc.seed);
        write_jsonl(&jp, &reports)?;
        write_summary_csv(&cp, &reports)?;
        all.extend(reports);
    }
    Ok(all)
}

/// Check the structural assumptions of the system on random samples.
pub fn audit(sc: &Scenario) -> Result<Vec<Report>> {
    let n = sc.system.state_dim();
    let spec = &sc.assumptions;
    let samples = box_samples(n, spec.half_width, sc.grid.horizon, spec.samples, &sc.root(Task::Assumptions));
    let checks = match &sc.system {
        System::Cn(s) => {
            let profile = spec
                .profile
                .as_ref()
                .ok_or_else(|| Error::config("assumptions.profile", "required for the noise system"))?;
            validate_correlated_noise(s, profile, &samples)
        }
        System::Cs(s) => {
            let pts: Vec<(f64, Vec<f64>)> = samples.into_iter().map(|(t, x, _)| (t, x)).collect();
            validate_correlated_sensor(s, &pts)
        }
    };
    let reports = checks
        .checks
        .iter()
        .map(|c| {
            Ok(Report {
                verdict: Verdict::from_bool(c.passed),
                ..Report::bound("assumptions", c.name.clone(), c.worst_ratio, 1.0).with_detail(c)?
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(sc.output.join("reports"))?;
    let (jp, cp) = report_paths(&sc.output, "assumptions", &sc.config_hash()?, sc.seed);
    write_jsonl(&jp, &reports)?;
    write_summary_csv(&cp, &reports)?;
    Ok(reports)
}

/// Re-run the `simulate` recorded in `out` and compare every artifact.
pub fn replay(out: &Path) -> Result<Vec<Report>> {
    let m = read_manifest(out)?;
    let tmp = tempfile::tempdir()?;
    let mut sc = m.scenario.clone();
    sc.seed = m.seed;
    sc.output = tmp.path().to_path_buf();
    sc.validate()?;
    let again = simulate(&sc)?;
    let mut mismatched = Vec::new();
    for f in &m.files {
        let actual = sha256_file(&out.join(&f.path)).ok();
        let fresh = again.files.iter().find(|g| g.path == f.path).map(|g| g.sha256.clone());
        if actual.as_deref() != Some(f.sha256.as_str()) || fresh.as_deref() != Some(f.sha256.as_str()) {
            mismatched.push(f.path.clone());
        }
    }
    if again.files.len() != m.files.len() || again.config_hash != m.config_hash {
        mismatched.push(MANIFEST.into());
    }
    let report = Report::bound("replay", "artifacts differing from a fresh run", mismatched.len() as f64, 0.0)
        .with_detail(&serde_json::json!({
            "files": m.files.len(),
            "mismatched": mismatched.iter().take(20).collect::<Vec<_>>(),
        }))?;
    let reports = vec![report];
    fs::create_dir_all(out.join("reports"))?;
    let (jp, cp) = report_paths(out, "replay", &m.config_hash, m.seed);
    write_jsonl(&jp, &reports)?;
    write_summary_csv(&cp, &reports)?;
    Ok(reports)
}
