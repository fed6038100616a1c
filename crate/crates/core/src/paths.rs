//! Uniform time grids, keyed random streams and Brownian increments.
//!
//! Every random number in the crate is drawn from a stream identified by a
//! [`StreamKey`]: a global seed plus a lineage of `(role, index)` pairs. The
//! stream state is derived by hashing the key, so the value obtained for a
//! particle never depends on which thread produced it or in which order the
//! streams were opened.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Uniform grid `t_j = j * dt` on `[0, horizon]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::config("grid.horizon", "must be finite and positive"));
        }
        if steps == 0 {
            return Err(Error::config("grid.steps", "must be positive"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.dt()
    }

    /// Grid index of `t`, if `t` lies on the grid up to rounding.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let r = t / self.dt();
        let j = r.round();
        if j < 0.0 || j > self.steps as f64 || (r - j).abs() > 1e-8 {
            return None;
        }
        Some(j as usize)
    }

    /// The grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }
}

/// Tag of one level of a stream lineage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Run,
    Particle,
    Initial,
    Observation,
    Signal,
    Sensor,
    Driver,
    Sample,
    Auxiliary,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Run => 1,
            Role::Particle => 2,
            Role::Initial => 3,
            Role::Observation => 4,
            Role::Signal => 5,
            Role::Sensor => 6,
            Role::Driver => 7,
            Role::Sample => 8,
            Role::Auxiliary => 9,
        }
    }
}

/// Identity of a random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub lineage: Vec<(Role, u64)>,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            lineage: Vec::new(),
        }
    }

    /// The key one level below `self`.
    pub fn child(&self, role: Role, index: u64) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push((role, index));
        Self {
            seed: self.seed,
            lineage,
        }
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"zakai-lab/stream/v1");
        h.update(self.seed.to_le_bytes());
        for &(role, index) in &self.lineage {
            h.update([role.tag()]);
            h.update(index.to_le_bytes());
        }
        h.finalize().into()
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest())
    }

    /// Standard-normal stream, optionally aggregated over `substeps` fine draws.
    pub fn normals(&self, substeps: usize) -> NormalStream {
        NormalStream::new(self.rng(), substeps)
    }
}

/// Standard normals for one coarse step at a time.
///
/// With `substeps = s` each returned component is `(z_1 + .. + z_s) / sqrt(s)`
/// over consecutive fine draws, so a grid with `s` times fewer steps sees the
/// same Brownian path as the fine grid driven by the same key.
#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    substeps: usize,
    scratch: Vec<f64>,
}

impl NormalStream {
    pub fn new(rng: ChaCha8Rng, substeps: usize) -> Self {
        Self {
            rng,
            substeps: substeps.max(1),
            scratch: Vec::new(),
        }
    }

    pub fn standard(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Fill `out` with the standard normals of the next coarse step.
    pub fn fill_step(&mut self, out: &mut [f64]) {
        if self.substeps == 1 {
            for v in out.iter_mut() {
                *v = self.rng.sample(StandardNormal);
            }
            return;
        }
        self.scratch.clear();
        self.scratch.resize(out.len(), 0.0);
        for _ in 0..self.substeps {
            for s in self.scratch.iter_mut() {
                let z: f64 = self.rng.sample(StandardNormal);
                *s += z;
            }
        }
        let scale = 1.0 / (self.substeps as f64).sqrt();
        for (o, s) in out.iter_mut().zip(&self.scratch) {
            *o = s * scale;
        }
    }
}

/// Brownian increments on a grid, stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianPath {
    dim: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn from_increments(dim: usize, dt: f64, increments: Vec<f64>) -> Result<Self> {
        if dim == 0 || increments.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} increments do not split into rows of {dim}",
                increments.len()
            )));
        }
        if let Some(i) = increments.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("increment {i}")));
        }
        Ok(Self { dim, dt, increments })
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            dim,
            dt: grid.dt(),
            increments: vec![0.0; grid.steps() * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim
    }

    pub fn step(&self, j: usize) -> &[f64] {
        &self.increments[j * self.dim..(j + 1) * self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Sum groups of `factor` consecutive increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(Error::Dimension(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps()
            )));
        }
        let steps = self.steps() / factor;
        let mut out = vec![0.0; steps * self.dim];
        for j in 0..steps {
            for f in 0..factor {
                let src = self.step(j * factor + f);
                for (o, s) in out[j * self.dim..(j + 1) * self.dim].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Ok(Self {
            dim: self.dim,
            dt: self.dt * factor as f64,
            increments: out,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend((0..self.dim).map(|i| format!("d{i}")));
        wr.write_record(&header)?;
        for j in 0..self.steps() {
            let mut row = vec![j.to_string()];
            row.extend(self.step(j).iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dt: f64) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(1);
        let mut increments = Vec::new();
        for (j, rec) in rd.records().enumerate() {
            let rec = rec?;
            let step: usize = rec[0]
                .parse()
                .map_err(|_| Error::config(format!("row {j}"), "bad step index"))?;
            if step != j {
                return Err(Error::config(format!("row {j}"), "steps out of order"));
            }
            for field in rec.iter().skip(1) {
                increments.push(
                    field
                        .parse()
                        .map_err(|_| Error::config(format!("row {j}"), "bad increment"))?,
                );
            }
        }
        Self::from_increments(dim, dt, increments)
    }
}

/// Brownian increments of variance `dt` drawn from the stream `key`.
pub fn sample_brownian(grid: &TimeGrid, dim: usize, key: &StreamKey) -> BrownianPath {
    sample_brownian_refined(grid, dim, key, 1)
}

/// As [`sample_brownian`], but each increment sums `substeps` finer draws.
///
/// `sample_brownian_refined(g, d, k, s)` equals, up to rounding,
/// `sample_brownian(g.refine(s), d, k).coarsen(s)`.
pub fn sample_brownian_refined(
    grid: &TimeGrid,
    dim: usize,
    key: &StreamKey,
    substeps: usize,
) -> BrownianPath {
    let dim = dim.max(1);
    let mut stream = key.normals(substeps);
    let sd = grid.dt().sqrt();
    let mut increments = vec![0.0; grid.steps() * dim];
    for row in increments.chunks_mut(dim) {
        stream.fill_step(row);
        for v in row.iter_mut() {
            *v *= sd;
        }
    }
    BrownianPath {
        dim,
        dt: grid.dt(),
        increments,
    }
}

/// Path values at grid times, starting at zero; `steps + 1` rows of `dim`.
pub fn cumulate(path: &BrownianPath) -> Vec<f64> {
    let dim = path.dim;
    let mut out = vec![0.0; (path.steps() + 1) * dim];
    for j in 0..path.steps() {
        for i in 0..dim {
            out[(j + 1) * dim + i] = out[j * dim + i] + path.increments[j * dim + i];
        }
    }
    out
}
