//! Scenario documents: parsing, validation, overrides and hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use zakai_core::calculus::{CylinderFunctionRInf, Dictionary, DictionarySpec, TestFunction};
use zakai_core::model::{AssumptionProfile, FilterModel, System};
use zakai_core::paths::{Role, StreamKey, TimeGrid};
use zakai_core::sde::{InitialLaw, InitialSampler};
use zakai_core::verify::{BatteryEntry, Probe, TestMartFunctional};
use zakai_core::zakai::SolverSettings;
use zakai_core::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleSpec {
    pub phi: CylinderFunctionRInf,
    pub s: f64,
    pub t: f64,
    pub chis: Vec<TestMartFunctional>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Fixed allowance constant `C`; calibrated by one refinement step when absent.
    pub allowance_constant: Option<f64>,
    /// Share of the ensemble used for calibration.
    pub calibration_fraction: f64,
    pub audit_ceiling: f64,
    pub kalman_mean: f64,
    pub kalman_variance: f64,
    pub lderiv_relative: f64,
    /// Accepted range of `error(eps) / error(eps / 10)`.
    pub lderiv_order: [f64; 2],
    pub reduction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            allowance_constant: None,
            calibration_fraction: 0.25,
            audit_ceiling: 1e6,
            kalman_mean: 0.02,
            kalman_variance: 0.1,
            lderiv_relative: 1e-4,
            lderiv_order: [5.0, 20.0],
            reduction: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanSuite {
    /// Independent observation paths.
    pub paths: usize,
}

impl Default for KalmanSuite {
    fn default() -> Self {
        Self { paths: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LderivSuite {
    pub trials: usize,
    pub eps: f64,
}

impl Default for LderivSuite {
    fn default() -> Self {
        Self { trials: 100, eps: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionSpec {
    /// Required for the noise system.
    #[serde(default)]
    pub profile: Option<AssumptionProfile>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

impl Default for AssumptionSpec {
    fn default() -> Self {
        Self {
            profile: None,
            samples: default_samples(),
            half_width: default_half_width(),
        }
    }
}

fn default_samples() -> usize {
    256
}

fn default_half_width() -> f64 {
    3.0
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// A complete run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    pub system: System,
    pub initial: InitialLaw,
    pub grid: GridSpec,
    pub particles: usize,
    pub ensemble: usize,
    #[serde(default = "one")]
    pub substeps: usize,
    pub dictionary: DictionarySpec,
    #[serde(default)]
    pub battery: Vec<BatteryEntry>,
    /// Check times of the weak-form battery; the horizon when empty.
    #[serde(default)]
    pub fpe_times: Vec<f64>,
    #[serde(default)]
    pub martingale: Option<MartingaleSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub kalman: KalmanSuite,
    #[serde(default)]
    pub lderiv: LderivSuite,
    #[serde(default)]
    pub assumptions: AssumptionSpec,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// Command-line adjustments applied before validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dt: Option<f64>,
    pub particles: Option<usize>,
}

/// Stream roots of the individual tasks below the scenario seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Simulate = 0,
    Ensemble = 1,
    Kalman = 2,
    Reduction = 3,
    Lderiv = 4,
    Assumptions = 5,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with(prefix) => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.output = out.clone();
        }
        if let Some(p) = ov.particles {
            self.particles = p;
        }
        if let Some(dt) = ov.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::config("dt-override", "must be positive"));
            }
            let steps = (self.grid.horizon / dt).round();
            if steps < 1.0 || ((steps * dt - self.grid.horizon) / self.grid.horizon).abs() > 1e-9 {
                return Err(Error::config("dt-override", format!("{dt} does not divide the horizon")));
            }
            self.grid.steps = steps as usize;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::config("schema", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        self.system.validate_structure().map_err(|e| prefixed("system", e))?;
        let n = self.system.state_dim();
        if self.initial.dim() != n {
            return Err(Error::config("initial", format!("dimension {} differs from the state dimension {n}", self.initial.dim())));
        }
        self.sampler()?;
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(Error::config("grid.horizon", "must be positive and finite"));
        }
        if self.grid.steps == 0 {
            return Err(Error::config("grid.steps", "must be positive"));
        }
        if self.particles == 0 {
            return Err(Error::config("particles", "must be positive"));
        }
        if self.ensemble < 2 {
            return Err(Error::config("ensemble", "must be at least 2"));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps", "must be positive"));
        }
        let grid = self.time_grid()?;
        let dict = self.dictionary()?;
        for (i, entry) in self.battery.iter().enumerate() {
            entry.validate(dict.len()).map_err(|e| match e {
                Error::Config { message, .. } => Error::config(format!("battery[{i}].indices"), message),
                other => other,
            })?;
        }
        for (i, &t) in self.fpe_times.iter().enumerate() {
            if !(t > 0.0) || grid.index_of(t).is_none() {
                return Err(Error::config(format!("fpe_times[{i}]"), format!("{t} is not a positive grid time")));
            }
        }
        if let Some(ms) = &self.martingale {
            let k = ms.phi.k;
            CylinderFunctionRInf::new(k, ms.phi.base.clone()).map_err(|e| prefixed("martingale", e))?;
            if k > dict.len() {
                return Err(Error::config("martingale.phi.k", format!("truncation beyond {} test functions", dict.len())));
            }
            if !(ms.s < ms.t) || grid.index_of(ms.s).is_none() || grid.index_of(ms.t).is_none() {
                return Err(Error::config("martingale.s", "need grid times s < t"));
            }
            if ms.chis.is_empty() {
                return Err(Error::config("martingale.chis", "at least one functional required"));
            }
            for (i, chi) in ms.chis.iter().enumerate() {
                chi.validate(ms.s, k).map_err(|e| match e {
                    Error::Config { field, message } => {
                        Error::config(format!("martingale.chis[{i}]{}", field.trim_start_matches("chi")), message)
                    }
                    other => other,
                })?;
                if chi.times.iter().any(|&r| grid.index_of(r).is_none()) {
                    return Err(Error::config(format!("martingale.chis[{i}].times"), "must be grid times"));
                }
            }
        }
        let tol = &self.tolerances;
        let nonneg = [
            ("tolerances.audit_ceiling", tol.audit_ceiling),
            ("tolerances.kalman_mean", tol.kalman_mean),
            ("tolerances.kalman_variance", tol.kalman_variance),
            ("tolerances.lderiv_relative", tol.lderiv_relative),
            ("tolerances.reduction", tol.reduction),
            ("tolerances.allowance_constant", tol.allowance_constant.unwrap_or(0.0)),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        if !(tol.calibration_fraction > 0.0 && tol.calibration_fraction <= 1.0) {
            return Err(Error::config("tolerances.calibration_fraction", "must lie in (0, 1]"));
        }
        if !(tol.lderiv_order[0] <= tol.lderiv_order[1]) {
            return Err(Error::config("tolerances.lderiv_order", "need lower <= upper"));
        }
        if self.kalman.paths == 0 {
            return Err(Error::config("kalman.paths", "must be positive"));
        }
        if self.lderiv.trials == 0 {
            return Err(Error::config("lderiv.trials", "must be positive"));
        }
        if !(self.lderiv.eps > 0.0) {
            return Err(Error::config("lderiv.eps", "must be positive"));
        }
        if self.assumptions.samples == 0 {
            return Err(Error::config("assumptions.samples", "must be positive"));
        }
        if !(self.assumptions.half_width > 0.0) {
            return Err(Error::config("assumptions.half_width", "must be positive"));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps).map_err(|e| prefixed("grid", e))
    }

    pub fn sampler(&self) -> Result<InitialSampler> {
        self.initial.sampler("initial")
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::standard(self.system.state_dim(), &self.dictionary)
    }

    pub fn test_functions(&self) -> Result<Vec<TestFunction>> {
        Ok(self.dictionary()?.functions)
    }

    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            particles: self.particles,
            substeps: self.substeps,
        }
    }

    pub fn root(&self, task: Task) -> StreamKey {
        StreamKey::new(self.seed).child(Role::Auxiliary, task as u64)
    }

    /// Check times of the weak-form battery.
    pub fn check_times(&self) -> Vec<f64> {
        if self.fpe_times.is_empty() {
            vec![self.grid.horizon]
        } else {
            self.fpe_times.clone()
        }
    }

    pub fn fpe_probes(&self) -> Vec<Probe> {
        let mut out = Vec::new();
        for entry in &self.battery {
            for &t in &self.check_times() {
                out.push(Probe::Fpe { entry: entry.clone(), t });
            }
        }
        out
    }

    pub fn martingale_probes(&self) -> Vec<Probe> {
        self.martingale
            .iter()
            .flat_map(|ms| {
                ms.chis.iter().map(|chi| Probe::Martingale {
                    phi: ms.phi.clone(),
                    s: ms.s,
                    t: ms.t,
                    chi: chi.clone(),
                })
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form, excluding seed and output directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("seed");
            map.remove("output");
        }
        let text = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

/// Read, override and validate a scenario file.
pub fn prepare(path: &Path, ov: &Overrides) -> Result<Scenario> {
    let mut sc = Scenario::load(path)?;
    sc.apply(ov)?;
    sc.validate()?;
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "schema": 1,
        "system": {
            "variant": "cn", "n": 1, "m": 1, "d": 1,
            "b1": {"rows": 1, "cols": 1, "family": "affine", "linear": [[-1.0]]},
            "sigma0": {"rows": 1, "cols": 1, "family": "affine", "offset": [0.5]},
            "sigma1": {"rows": 1, "cols": 1, "family": "affine", "offset": [0.3]},
            "b2": {"rows": 1, "cols": 1, "family": "affine", "linear": [[1.0]]},
            "sigma2": {"rows": 1, "cols": 1, "family": "affine", "offset": [1.0]}
        },
        "initial": {"law": "gaussian", "mean": [0.0], "cov": [1.0]},
        "grid": {"horizon": 0.1, "steps": 10},
        "particles": 20,
        "ensemble": 4,
        "dictionary": {"radii": [3.0]},
        "battery": [{"g": {"form": "linear", "u": 0}, "indices": [0, 1]}]
    }"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let sc = Scenario::from_json(MINIMAL).unwrap();
        sc.validate().unwrap();
        assert_eq!(sc.substeps, 1);
        assert_eq!(sc.check_times(), vec![0.1]);
        assert_eq!(sc.fpe_probes().len(), 1);
    }

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("not a configuration error: {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let mut sc = Scenario::from_json(MINIMAL).unwrap();
        sc.particles = 0;
        assert_eq!(field_of(sc.validate().unwrap_err()), "particles");

        let mut sc = Scenario::from_json(MINIMAL).unwrap();
        sc.battery[0].indices = vec![0, 7];
        assert_eq!(field_of(sc.validate().unwrap_err()), "battery[0].indices");

        let mut sc = Scenario::from_json(MINIMAL).unwrap();
        sc.fpe_times = vec![0.055];
        assert_eq!(field_of(sc.validate().unwrap_err()), "fpe_times[0]");

        let bad = MINIMAL.replace(r#""particles": 20"#, r#""particles": "many""#);
        assert_eq!(field_of(Scenario::from_json(&bad).unwrap_err()), "particles");

        let bad = MINIMAL.replace(r#""horizon": 0.1"#, r#""horizon": 0.1, "stpes": 3"#);
        assert!(field_of(Scenario::from_json(&bad).unwrap_err()).starts_with("grid"));

        let bad = MINIMAL.replace(r#""offset": [0.5]"#, r#""offset": [0.5, 1.0]"#);
        let e = field_of(Scenario::from_json(&bad).unwrap().validate().unwrap_err());
        assert!(e.starts_with("system."), "{e}");
    }

    #[test]
    fn overrides_apply_before_validation() {
        let mut sc = Scenario::from_json(MINIMAL).unwrap();
        sc.apply(&Overrides {
            seed: Some(9),
            dt: Some(0.005),
            particles: Some(7),
            out: Some("elsewhere".into()),
        })
        .unwrap();
        assert_eq!((sc.seed, sc.grid.steps, sc.particles), (9, 20, 7));
        assert_eq!(sc.output, PathBuf::from("elsewhere"));
        let e = sc.apply(&Overrides {
            dt: Some(0.03),
            ..Default::default()
        });
        assert_eq!(field_of(e.unwrap_err()), "dt-override");
    }

    #[test]
    fn hash_ignores_seed_and_output_only() {
        let a = Scenario::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.seed = 42;
        b.output = "x".into();
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.particles += 1;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 64);
    }
}
