//! Finite (possibly signed) measures on R^d and the per-state containers
//! built from them.
//!
//! A [`DiscreteMeasure`] is a list of atoms with real weights. Return
//! distributions, categorical iterates and particle sets all use it.
//! Categorical measures share their atom list with a [`SupportMap`] entry
//! and keep the support order; mixtures merge duplicate atoms; particle
//! (EWP) measures keep one slot per particle even when particles coincide.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Componentwise tolerance under which two atoms are considered equal.
pub const MERGE_TOL: f64 = 1e-12;
/// Tolerance on total mass.
pub const MASS_TOL: f64 = 1e-9;
/// Weights of probability measures may dip this far below zero before
/// they are rejected (they are clamped and renormalized otherwise).
pub const NEG_WEIGHT_TOL: f64 = 1e-12;
/// Minimum Euclidean gap between atoms of one support.
pub const SUPPORT_MIN_GAP: f64 = 1e-9;

/// An ordered list of points in R^d, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomSet {
    dim: usize,
    data: Vec<f64>,
}

impl AtomSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("atom dimension must be at least 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "flat atom buffer of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("atoms must be finite"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("empty atom list"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            check_dim(dim, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// Row-major uniform grid on `[lo, hi]^dim` with `per_axis` points per
    /// axis; the first coordinate varies slowest.
    pub fn uniform_grid(dim: usize, per_axis: usize, lo: f64, hi: f64) -> Result<Self> {
        if per_axis == 0 {
            return Err(Error::invalid("grid needs at least one point per axis"));
        }
        if !(hi >= lo) {
            return Err(Error::invalid("grid bounds must satisfy lo <= hi"));
        }
        let axis: Vec<f64> = if per_axis == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            let h = (hi - lo) / (per_axis - 1) as f64;
            (0..per_axis).map(|i| lo + h * i as f64).collect()
        };
        let total = per_axis.checked_pow(dim as u32).ok_or_else(|| Error::invalid("grid too large"))?;
        let mut data = Vec::with_capacity(total * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            data.extend(idx.iter().map(|&i| axis[i]));
            for k in (0..dim).rev() {
                idx[k] += 1;
                if idx[k] < per_axis {
                    break;
                }
                idx[k] = 0;
            }
        }
        Self::new(dim, data)
    }

    /// Lattice points of the probability simplex in R^dim with spacing
    /// `1/resolution`, in lexicographic order.
    pub fn simplex_grid(dim: usize, resolution: usize) -> Result<Self> {
        if dim == 0 || resolution == 0 {
            return Err(Error::invalid("simplex grid needs dim >= 1 and resolution >= 1"));
        }
        fn rec(dim: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if prefix.len() + 1 == dim {
                prefix.push(left);
                out.push(prefix.clone());
                prefix.pop();
                return;
            }
            for k in 0..=left {
                prefix.push(k);
                rec(dim, left - k, prefix, out);
                prefix.pop();
            }
        }
        let mut pts = Vec::new();
        rec(dim, resolution, &mut Vec::new(), &mut pts);
        let data = pts
            .into_iter()
            .flat_map(|p| p.into_iter().map(|k| k as f64 / resolution as f64))
            .collect();
        Self::new(dim, data)
    }

    /// `count` points drawn uniformly on `[lo, hi]^dim`.
    pub fn random_uniform<R: Rng + ?Sized>(dim: usize, count: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("random support needs at least one atom"));
        }
        let data = (0..count * dim).map(|_| rng.random_range(lo..=hi)).collect();
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter().map(<[f64]>::to_vec).collect()
    }

    /// Smallest Euclidean distance between two distinct slots (infinity for
    /// a single atom).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.min(euclid(self.atom(i), self.atom(j)));
            }
        }
        best
    }

    /// Affine map `z -> shift + scale * z` applied to every atom.
    pub(crate) fn affine(&self, shift: &[f64], scale: f64) -> AtomSet {
        let data = self
            .iter()
            .flat_map(|z| z.iter().zip(shift).map(move |(zi, si)| si + scale * zi))
            .collect();
        AtomSet { dim: self.dim, data }
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn atoms_close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= MERGE_TOL)
}

/// Weighted atom set; weights may be signed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureJson", into = "MeasureJson")]
pub struct DiscreteMeasure {
    atoms: AtomSet,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(atoms: AtomSet, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("a measure needs at least one atom"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        Ok(Self { atoms, weights })
    }

    pub fn from_rows(rows: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        Self::new(AtomSet::from_rows(rows)?, weights)
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(AtomSet::new(point.len(), point.to_vec())?, vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.atoms.dim()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atoms(&self) -> &AtomSet {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        self.atoms.atom(i)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn into_parts(self) -> (AtomSet, Vec<f64>) {
        (self.atoms, self.weights)
    }

    /// Same atoms, new weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.atoms.clone(), weights)
    }

    pub fn check_unit_mass(&self) -> Result<()> {
        let mass = self.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!("measure has mass {mass}, expected 1")));
        }
        Ok(())
    }

    pub fn is_probability(&self) -> bool {
        self.weights.iter().all(|&w| w >= -NEG_WEIGHT_TOL) && (self.mass() - 1.0).abs() <= MASS_TOL
    }

    /// Clamp slightly negative weights to zero and renormalize. Fails when a
    /// weight is below `-NEG_WEIGHT_TOL`.
    pub fn to_probability(&self) -> Result<Self> {
        if let Some(w) = self.weights.iter().find(|&&w| w < -NEG_WEIGHT_TOL) {
            return Err(Error::invalid(format!("weight {w} is negative; project onto the simplex first")));
        }
        let mut weights: Vec<f64> = self.weights.iter().map(|&w| w.max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("measure has no positive mass"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        self.with_weights(weights)
    }

    /// Merge atoms equal within `MERGE_TOL`; output atoms sorted
    /// lexicographically.
    pub fn compact(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| lex_cmp(self.atom(i), self.atom(j)));
        let dim = self.dim();
        let mut data: Vec<f64> = Vec::with_capacity(self.atoms.data.len());
        let mut weights: Vec<f64> = Vec::with_capacity(self.len());
        for i in order {
            let a = self.atom(i);
            let n = weights.len();
            if n > 0 && atoms_close(&data[(n - 1) * dim..n * dim], a) {
                weights[n - 1] += self.weights[i];
            } else {
                data.extend_from_slice(a);
                weights.push(self.weights[i]);
            }
        }
        Self {
            atoms: AtomSet { dim, data },
            weights,
        }
    }

    /// Equality as measures: same mass on every atom after merging, up to
    /// `weight_tol` per atom.
    pub fn same_measure(&self, other: &Self, weight_tol: f64) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        let neg: Vec<f64> = other.weights.iter().map(|w| -w).collect();
        let mut data = self.atoms.data.clone();
        data.extend_from_slice(&other.atoms.data);
        let mut weights = self.weights.clone();
        weights.extend(neg);
        let diff = Self {
            atoms: AtomSet { dim: self.dim(), data },
            weights,
        }
        .compact();
        diff.weights.iter().all(|w| w.abs() <= weight_tol)
    }

    /// First moment.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (z, w) in self.atoms.iter().zip(&self.weights) {
            for (o, zi) in out.iter_mut().zip(z) {
                *o += w * zi;
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MeasureJson> for DiscreteMeasure {
    type Error = Error;

    fn try_from(j: MeasureJson) -> Result<Self> {
        let atoms = AtomSet::from_rows(&j.atoms)?;
        check_dim(j.dim, atoms.dim())?;
        DiscreteMeasure::new(atoms, j.weights)
    }
}

impl From<DiscreteMeasure> for MeasureJson {
    fn from(m: DiscreteMeasure) -> Self {
        MeasureJson {
            dim: m.dim(),
            atoms: m.atoms.to_rows(),
            weights: m.weights,
        }
    }
}

/// Image of `p` under `z -> shift + scale * z`, for `scale` in `[0, 1)`.
pub fn pushforward(p: &DiscreteMeasure, shift: &[f64], scale: f64) -> Result<DiscreteMeasure> {
    check_dim(p.dim(), shift.len())?;
    if !(0.0..1.0).contains(&scale) {
        return Err(Error::invalid(format!("pushforward scale {scale} must lie in [0, 1)")));
    }
    Ok(DiscreteMeasure {
        atoms: p.atoms.affine(shift, scale),
        weights: p.weights.clone(),
    })
}

/// Finite mixture with duplicate atoms merged. Mixture weights must sum to
/// one.
pub fn mixture(components: &[(f64, &DiscreteMeasure)]) -> Result<DiscreteMeasure> {
    let (_, first) = components.first().ok_or_else(|| Error::invalid("empty mixture"))?;
    let dim = first.dim();
    let total: f64 = components.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
    }
    let mut data = Vec::new();
    let mut weights = Vec::new();
    for (lambda, m) in components {
        check_dim(dim, m.dim())?;
        data.extend_from_slice(m.atoms.as_flat());
        weights.extend(m.weights.iter().map(|w| lambda * w));
    }
    Ok(DiscreteMeasure {
        atoms: AtomSet { dim, data },
        weights,
    }
    .compact())
}

/// Equally weighted slots, one per sample; coincident samples stay separate.
pub fn empirical(samples: &[Vec<f64>]) -> Result<DiscreteMeasure> {
    let atoms = AtomSet::from_rows(samples)?;
    empirical_atoms(atoms)
}

pub(crate) fn empirical_atoms(atoms: AtomSet) -> Result<DiscreteMeasure> {
    let m = atoms.len();
    if m == 0 {
        return Err(Error::invalid("empirical measure needs at least one sample"));
    }
    DiscreteMeasure::new(atoms, vec![1.0 / m as f64; m])
}

/// One unit-mass measure per state, all in the same dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReturnDistJson", into = "ReturnDistJson")]
pub struct ReturnDistFn {
    measures: Vec<DiscreteMeasure>,
}

impl ReturnDistFn {
    pub fn new(measures: Vec<DiscreteMeasure>) -> Result<Self> {
        let dim = measures
            .first()
            .map(DiscreteMeasure::dim)
            .ok_or_else(|| Error::invalid("return distribution function needs at least one state"))?;
        for m in &measures {
            check_dim(dim, m.dim())?;
            m.check_unit_mass()?;
        }
        Ok(Self { measures })
    }

    pub fn n_states(&self) -> usize {
        self.measures.len()
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    pub fn state(&self, x: usize) -> &DiscreteMeasure {
        &self.measures[x]
    }

    pub fn states(&self) -> &[DiscreteMeasure] {
        &self.measures
    }

    pub fn into_states(self) -> Vec<DiscreteMeasure> {
        self.measures
    }

    /// Replace the measure at one state.
    pub fn set_state(&mut self, x: usize, m: DiscreteMeasure) -> Result<()> {
        check_dim(self.dim(), m.dim())?;
        m.check_unit_mass()?;
        self.measures[x] = m;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ReturnDistJson {
    n_states: usize,
    dim: usize,
    states: Vec<DiscreteMeasure>,
}

impl TryFrom<ReturnDistJson> for ReturnDistFn {
    type Error = Error;

    fn try_from(j: ReturnDistJson) -> Result<Self> {
        if j.states.len() != j.n_states {
            return Err(Error::invalid(format!(
                "n_states = {} but {} measures given",
                j.n_states,
                j.states.len()
            )));
        }
        let f = ReturnDistFn::new(j.states)?;
        check_dim(j.dim, f.dim())?;
        Ok(f)
    }
}

impl From<ReturnDistFn> for ReturnDistJson {
    fn from(f: ReturnDistFn) -> Self {
        ReturnDistJson {
            n_states: f.n_states(),
            dim: f.dim(),
            states: f.measures,
        }
    }
}

/// Per-state categorical support ξ(x).
#[derive(Clone, Debug, PartialEq)]
pub struct SupportMap {
    sets: Vec<AtomSet>,
}

impl SupportMap {
    pub fn new(sets: Vec<AtomSet>) -> Result<Self> {
        let dim = sets
            .first()
            .map(AtomSet::dim)
            .ok_or_else(|| Error::invalid("support map needs at least one state"))?;
        for s in &sets {
            check_dim(dim, s.dim())?;
            if s.is_empty() {
                return Err(Error::invalid("every state needs at least one support atom"));
            }
            let gap = s.min_pairwise_distance();
            if gap <= SUPPORT_MIN_GAP {
                return Err(Error::invalid(format!(
                    "support atoms must be pairwise distinct (min gap {gap:e})"
                )));
            }
        }
        Ok(Self { sets })
    }

    /// The same atom list at every state.
    pub fn shared(atoms: AtomSet, n_states: usize) -> Result<Self> {
        Self::new(vec![atoms; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.sets.len()
    }

    pub fn dim(&self) -> usize {
        self.sets[0].dim()
    }

    pub fn atoms(&self, x: usize) -> &AtomSet {
        &self.sets[x]
    }

    pub fn sets(&self) -> &[AtomSet] {
        &self.sets
    }

    /// Whether every state uses the identical atom list.
    pub fn is_shared(&self) -> bool {
        self.sets.windows(2).all(|w| w[0] == w[1])
    }

    /// Categorical return distribution function with the given per-state
    /// weight vectors.
    pub fn with_weights(&self, weights: Vec<Vec<f64>>) -> Result<ReturnDistFn> {
        if weights.len() != self.n_states() {
            return Err(Error::invalid("one weight vector per state is required"));
        }
        let measures = self
            .sets
            .iter()
            .zip(weights)
            .map(|(a, w)| DiscreteMeasure::new(a.clone(), w))
            .collect::<Result<Vec<_>>>()?;
        ReturnDistFn::new(measures)
    }

    /// Weight vectors of a return distribution function whose atoms are
    /// exactly this support.
    pub fn weights_of(&self, eta: &ReturnDistFn) -> Result<Vec<Vec<f64>>> {
        if eta.n_states() != self.n_states() {
            return Err(Error::invalid("state count differs from support map"));
        }
        eta.states()
            .iter()
            .zip(&self.sets)
            .map(|(m, s)| {
                if m.atoms() != s {
                    Err(Error::invalid("estimate is not supported on the support map"))
                } else {
                    Ok(m.weights().to_vec())
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let j = SupportJson::PerState {
            dim: self.dim(),
            states: self.sets.iter().map(AtomSet::to_rows).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    /// Accepts `{dim, atoms}` (shared; needs `n_states`) or `{dim, states}`.
    pub fn from_json(s: &str, n_states: usize) -> Result<Self> {
        match serde_json::from_str::<SupportJson>(s)? {
            SupportJson::Shared { dim, atoms } => {
                let a = AtomSet::from_rows(&atoms)?;
                check_dim(dim, a.dim())?;
                Self::shared(a, n_states)
            }
            SupportJson::PerState { dim, states } => {
                let sets = states
                    .iter()
                    .map(|rows| {
                        let a = AtomSet::from_rows(rows)?;
                        check_dim(dim, a.dim())?;
                        Ok(a)
                    })
                    .collect::<Result<Vec<_>>>()?;
                if sets.len() != n_states {
                    return Err(Error::invalid(format!(
                        "support file has {} states, MDP has {n_states}",
                        sets.len()
                    )));
                }
                Self::new(sets)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SupportJson {
    Shared { dim: usize, atoms: Vec<Vec<f64>> },
    PerState { dim: usize, states: Vec<Vec<Vec<f64>>> },
}
