//! Weighted empirical measures, pairings and a Wasserstein-2 diagnostic.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sum in a fixed binary-tree order, independent of how the terms were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if v.len() <= LEAF {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        return s;
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// The measure `(1/N) sum_i w_i delta_{x_i}` on `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedCloud {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedCloud {
    /// `atoms` holds `N` rows of `dim` coordinates.
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || weights.is_empty() || atoms.len() != dim * weights.len() {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} atoms of dimension {dim}",
                atoms.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::NonFinite(format!("weight {i} = {}", weights[i])));
        }
        if let Some(i) = atoms.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("atom coordinate {i}")));
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Equal unit weights.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        let n = if dim == 0 { 0 } else { atoms.len() / dim };
        Self::new(dim, atoms, vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.weights) / self.len() as f64
    }

    /// Effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_sample_size(&self) -> f64 {
        let s = pairwise_sum(&self.weights);
        let sq: Vec<f64> = self.weights.iter().map(|w| w * w).collect();
        let s2 = pairwise_sum(&sq);
        if s2 == 0.0 {
            0.0
        } else {
            s * s / s2
        }
    }

    /// Cloud with every atom moved by `map`, weights kept.
    pub fn pushforward(&self, mut map: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut atoms = vec![0.0; self.atoms.len()];
        for (src, dst) in self.atoms.chunks(self.dim).zip(atoms.chunks_mut(self.dim)) {
            map(src, dst);
        }
        Self {
            dim: self.dim,
            atoms,
            weights: self.weights.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("weight".into());
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.atom(i).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.weights[i]));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(1);
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for (j, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| Error::config(format!("row {j}"), "bad number"))?;
            if vals.len() != dim + 1 {
                return Err(Error::config(format!("row {j}"), "wrong column count"));
            }
            atoms.extend_from_slice(&vals[..dim]);
            weights.push(vals[dim]);
        }
        Self::new(dim, atoms, weights)
    }
}

/// `<mu, f> = (1/N) sum_i w_i f(x_i)`.
pub fn pair(mu: &WeightedCloud, mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    let mut terms = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let v = f(mu.atom(i));
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("integrand at atom {i}")));
        }
        terms.push(mu.weights[i] * v);
    }
    Ok(pairwise_sum(&terms) / mu.len() as f64)
}

/// Rescale the weights to total mass one.
pub fn normalize(mu: &WeightedCloud) -> Result<WeightedCloud> {
    let mass = mu.mass();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(WeightedCloud {
        dim: mu.dim,
        atoms: mu.atoms.clone(),
        weights: mu.weights.iter().map(|w| w / mass).collect(),
    })
}

fn check_uniform_pair(mu: &WeightedCloud, nu: &WeightedCloud) -> Result<()> {
    if mu.len() != nu.len() || mu.dim != nu.dim {
        return Err(Error::Unsupported("clouds of different size or dimension".into()));
    }
    if mu.len() > 256 {
        return Err(Error::Unsupported("more than 256 atoms".into()));
    }
    if mu.weights.iter().chain(&nu.weights).any(|&w| w != 1.0) {
        return Err(Error::Unsupported("non-uniform weights".into()));
    }
    Ok(())
}

fn sq_cost(mu: &WeightedCloud, nu: &WeightedCloud) -> Vec<f64> {
    let n = mu.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = mu.atom(i).iter().zip(nu.atom(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    c
}

/// Minimum-cost perfect matching of a square cost matrix (row-major); returns
/// the column assigned to each row. Hungarian method with potentials, `O(n^3)`.
pub fn optimal_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none).
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn assignment_cost(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        s += cost[i * n + j];
    }
    s
}

/// Exhaustive search over all permutations; only for small `n`.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, n, &perm);
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let v = assignment_cost(cost, n, &perm);
            if v < best_cost {
                best_cost = v;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best, best_cost)
}

/// Matched costs summed in ascending order, so the value depends only on the
/// multiset of matched costs (and is symmetric in the two clouds).
fn canonical_cost(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    let mut v: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `W2` between equal-size uniform clouds via optimal assignment.
pub fn wasserstein2(mu: &WeightedCloud, nu: &WeightedCloud) -> Result<f64> {
    check_uniform_pair(mu, nu)?;
    let n = mu.len();
    let c = sq_cost(mu, nu);
    let perm = optimal_assignment(&c, n);
    Ok((canonical_cost(&c, n, &perm) / n as f64).sqrt())
}

/// `W2` by exhaustive permutation search; the reference for [`wasserstein2`].
pub fn wasserstein2_brute_force(mu: &WeightedCloud, nu: &WeightedCloud) -> Result<f64> {
    check_uniform_pair(mu, nu)?;
    if mu.len() > 10 {
        return Err(Error::Unsupported("brute force limited to 10 atoms".into()));
    }
    let n = mu.len();
    let c = sq_cost(mu, nu);
    let perm = brute_force_assignment(&c, n).0;
    Ok((canonical_cost(&c, n, &perm) / n as f64).sqrt())
}
