//! Metrics and ground truth: sup-MMD, zero-shot scalar return
//! distributions, the Cramér distance, Monte-Carlo oracles, an unbiased
//! MMD estimator and mesh-based accuracy bounds.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::kernels::{clamp_mmd, mmd_squared, squared_cdf_gap, KernelSpec};
use crate::mdp::{rollout_return, RngStream, TabularMdp};
use crate::measures::{empirical_atoms, AtomSet, DiscreteMeasure, ReturnDistFn, SupportMap, MERGE_TOL, NEG_WEIGHT_TOL};
use crate::projections::project_simplex;

/// Rollouts per oracle chunk; each chunk draws from its own stream so the
/// result does not depend on the thread count.
const ORACLE_CHUNK: usize = 1024;

/// `sup_x MMD(η₁(x), η₂(x))`.
pub fn sup_mmd(eta1: &ReturnDistFn, eta2: &ReturnDistFn, spec: &KernelSpec) -> Result<f64> {
    if eta1.n_states() != eta2.n_states() {
        return Err(Error::invalid(format!(
            "state counts differ: {} vs {}",
            eta1.n_states(),
            eta2.n_states()
        )));
    }
    check_dim(eta1.dim(), eta2.dim())?;
    eta1.states()
        .iter()
        .zip(eta2.states())
        .try_fold(0.0f64, |m, (a, b)| Ok(m.max(mmd_squared(a, b, spec)?.sqrt())))
}

/// sup-MMD to a fixed reference whose per-state self-interaction
/// `Σ qᵢqⱼρ(zᵢ, zⱼ)` is computed once. Distances from small candidates to a
/// large sample reference then cost `O(m·n)` per state instead of `O(n²)`.
pub struct ReferenceDistance<'a> {
    reference: &'a ReturnDistFn,
    spec: KernelSpec,
    /// half self-sum over `i < j` and its absolute counterpart
    self_terms: Vec<(f64, f64)>,
}

impl<'a> ReferenceDistance<'a> {
    pub fn new(reference: &'a ReturnDistFn, spec: &KernelSpec) -> Result<Self> {
        check_dim(spec.dim(), reference.dim())?;
        let rho = spec.semimetric;
        let self_terms = reference
            .states()
            .iter()
            .map(|q| {
                let (a, w) = (q.atoms(), q.weights());
                (0..w.len())
                    .into_par_iter()
                    .map(|i| {
                        let (mut s, mut t) = (0.0, 0.0);
                        for j in 0..i {
                            let v = w[i] * w[j] * rho.eval(a.atom(i), a.atom(j));
                            s += v;
                            t += v.abs();
                        }
                        (s, t)
                    })
                    .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1))
            })
            .collect();
        Ok(Self { reference, spec: spec.clone(), self_terms })
    }

    pub fn sup_mmd(&self, eta: &ReturnDistFn) -> Result<f64> {
        if eta.n_states() != self.reference.n_states() {
            return Err(Error::invalid(format!(
                "state counts differ: {} vs {}",
                eta.n_states(),
                self.reference.n_states()
            )));
        }
        check_dim(eta.dim(), self.spec.dim())?;
        let rho = self.spec.semimetric;
        let mut worst = 0.0f64;
        for (x, p) in eta.states().iter().enumerate() {
            let q = self.reference.state(x);
            let (pa, pw) = (p.atoms(), p.weights());
            let (qa, qw) = (q.atoms(), q.weights());
            let (mut own, mut own_abs) = (0.0, 0.0);
            for i in 0..pw.len() {
                for j in 0..i {
                    let v = pw[i] * pw[j] * rho.eval(pa.atom(i), pa.atom(j));
                    own += v;
                    own_abs += v.abs();
                }
            }
            let (cross, cross_abs) = (0..pw.len())
                .into_par_iter()
                .map(|i| {
                    let (mut s, mut t) = (0.0, 0.0);
                    for j in 0..qw.len() {
                        let v = pw[i] * qw[j] * rho.eval(pa.atom(i), qa.atom(j));
                        s += v;
                        t += v.abs();
                    }
                    (s, t)
                })
                .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
            let (qq, qq_abs) = self.self_terms[x];
            let value = cross - own - qq;
            worst = worst.max(clamp_mmd(value, own_abs + cross_abs + qq_abs)?.sqrt());
        }
        Ok(worst)
    }
}

/// Finite probability distribution on R, atoms strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarDist {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl ScalarDist {
    /// Sorts, merges atoms within `MERGE_TOL`, clamps tiny negative weights.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(Error::invalid("scalar distribution needs matching, non-empty atoms and weights"));
        }
        if atoms.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(Error::invalid("scalar distribution entries must be finite"));
        }
        if let Some(w) = weights.iter().find(|&&w| w < -NEG_WEIGHT_TOL) {
            return Err(Error::invalid(format!("negative weight {w} in scalar distribution")));
        }
        let mut pairs: Vec<(f64, f64)> = atoms.into_iter().zip(weights.into_iter().map(|w| w.max(0.0))).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out_a: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut out_w: Vec<f64> = Vec::with_capacity(pairs.len());
        for (a, w) in pairs {
            match out_a.last() {
                Some(&last) if (a - last).abs() <= MERGE_TOL => *out_w.last_mut().unwrap() += w,
                _ => {
                    out_a.push(a);
                    out_w.push(w);
                }
            }
        }
        let total: f64 = out_w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("scalar distribution has mass {total}")));
        }
        out_w.iter_mut().for_each(|w| *w /= total);
        Ok(Self {
            atoms: out_a,
            weights: out_w,
        })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    /// Derived from a one-dimensional measure.
    pub fn from_measure(m: &DiscreteMeasure) -> Result<Self> {
        check_dim(1, m.dim())?;
        Self::new(m.atoms().as_flat().to_vec(), m.weights().to_vec())
    }

    /// `atom,weight,cdf` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "atom,weight,cdf")?;
        let mut cdf = 0.0;
        for (a, p) in self.atoms.iter().zip(&self.weights) {
            cdf += p;
            writeln!(w, "{a:.16e},{p:.16e},{cdf:.16e}")?;
        }
        Ok(())
    }
}

/// Law of `⟨G, w⟩` for `G ~ eta_x`. Signed inputs are rejected; project
/// them onto the simplex first.
pub fn zeroshot_scalar(eta_x: &DiscreteMeasure, w: &[f64]) -> Result<ScalarDist> {
    check_dim(eta_x.dim(), w.len())?;
    if eta_x.weights().iter().any(|&v| v < -NEG_WEIGHT_TOL) {
        return Err(Error::invalid("zero-shot evaluation needs a probability measure; project signed estimates first"));
    }
    let atoms = eta_x
        .atoms()
        .iter()
        .map(|z| z.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect();
    ScalarDist::new(atoms, eta_x.weights().to_vec())
}

/// Per-state Cramér distance between the zero-shot prediction of
/// `estimate` and that of `oracle` (typically Monte-Carlo samples) for the
/// reward weights `w`. Signed estimates are first projected onto the
/// simplex over their own atoms.
pub fn zeroshot_errors(estimate: &ReturnDistFn, oracle: &ReturnDistFn, w: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    if estimate.n_states() != oracle.n_states() {
        return Err(Error::invalid("estimate and oracle must cover the same states"));
    }
    estimate
        .states()
        .iter()
        .zip(oracle.states())
        .map(|(e, o)| {
            let prediction = if e.weights().iter().any(|&v| v < 0.0) {
                zeroshot_scalar(&project_simplex(e, e.atoms(), spec)?, w)?
            } else {
                zeroshot_scalar(e, w)?
            };
            Ok(cramer_distance(&prediction, &zeroshot_scalar(o, w)?))
        })
        .collect()
}

/// L2 distance between CDFs, integrated exactly over the merged breakpoints.
pub fn cramer_distance(p: &ScalarDist, q: &ScalarDist) -> f64 {
    let mut pts: Vec<(f64, f64)> = p.atoms.iter().copied().zip(p.weights.iter().copied()).collect();
    pts.extend(q.atoms.iter().copied().zip(q.weights.iter().map(|w| -w)));
    squared_cdf_gap(pts).0.max(0.0).sqrt()
}

/// Empirical measure of `n` truncated rollouts from `state`. The horizon
/// keeps the truncation tail below `tail_tol`.
pub fn mc_oracle(mdp: &TabularMdp, state: usize, n: usize, tail_tol: f64, rng: &RngStream) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::invalid("oracle needs at least one sample"));
    }
    if !(tail_tol > 0.0) {
        return Err(Error::invalid("tail tolerance must be positive"));
    }
    let horizon = mdp.horizon_for_tail(tail_tol);
    let chunks = n.div_ceil(ORACLE_CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.derive(&[state as u64, c as u64]).rng();
            let count = ORACLE_CHUNK.min(n - c * ORACLE_CHUNK);
            let mut data = Vec::with_capacity(count * mdp.dim());
            for _ in 0..count {
                data.extend(rollout_return(mdp, state, horizon, &mut r)?);
            }
            Ok(data)
        })
        .collect::<Result<Vec<_>>>()?;
    empirical_atoms(AtomSet::new(mdp.dim(), parts.concat())?)
}

/// [`mc_oracle`] at every state.
pub fn mc_oracle_fn(mdp: &TabularMdp, n: usize, tail_tol: f64, rng: &RngStream) -> Result<ReturnDistFn> {
    let ms = (0..mdp.n_states())
        .map(|x| mc_oracle(mdp, x, n, tail_tol, rng))
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(ms)
}

/// Noise-corrected distance of `candidate` to the truth, estimated from two
/// independent oracles: per state `sqrt(max(0, MMD²(c, O₁) − ½ MMD²(O₁, O₂)))`,
/// then the supremum over states.
pub fn oracle_error(candidate: &ReturnDistFn, oracle: &ReturnDistFn, oracle_twin: &ReturnDistFn, spec: &KernelSpec) -> Result<f64> {
    if candidate.n_states() != oracle.n_states() || oracle.n_states() != oracle_twin.n_states() {
        return Err(Error::invalid("candidate and oracles must cover the same states"));
    }
    let mut worst = 0.0f64;
    for x in 0..candidate.n_states() {
        let raw = mmd_squared(candidate.state(x), oracle.state(x), spec)?;
        let floor = 0.5 * mmd_squared(oracle.state(x), oracle_twin.state(x), spec)?;
        worst = worst.max((raw - floor).max(0.0).sqrt());
    }
    Ok(worst)
}

/// Unbiased MMD² estimate between two sample sets (diagonal terms
/// excluded); can be negative.
pub fn mmd_u_statistic(samples_p: &AtomSet, samples_q: &AtomSet, spec: &KernelSpec) -> Result<f64> {
    check_dim(spec.dim(), samples_p.dim())?;
    check_dim(spec.dim(), samples_q.dim())?;
    let (n, m) = (samples_p.len(), samples_q.len());
    if n < 2 || m < 2 {
        return Err(Error::invalid("U-statistic needs at least two samples per set"));
    }
    let within = |s: &AtomSet| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                acc += spec.eval(s.atom(i), s.atom(j));
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in samples_p.iter() {
        for b in samples_q.iter() {
            cross += spec.eval(a, b);
        }
    }
    Ok(within(samples_p) + within(samples_q) - 2.0 * cross / (n * m) as f64)
}

/// Mesh of the support's cell partition and the accuracy bound it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshReport {
    /// `max_x mesh(P_x; κ)`
    pub mesh: f64,
    /// `sqrt(mesh) / (1 − γ^{α/2})`
    pub bound: f64,
    /// Closed-form bound for a shared uniform grid covering the return
    /// hypercube, when it applies.
    pub closed_form: Option<f64>,
    /// Every state's support is a product grid (mesh computed exactly);
    /// otherwise the mesh is an upper bound from a nearest-atom partition.
    pub exact: bool,
}

/// Mesh and accuracy bound of a support map on the return hypercube
/// `[0, r_max / (1 − γ)]^d`.
///
/// Product grids use their Voronoi cell partition, whose widest cell is
/// computed exactly. Other supports use the nearest-atom partition, with
/// cell radii bounded on a probe lattice plus its covering radius, so the
/// reported mesh is an upper bound.
pub fn mesh_and_bound(support: &SupportMap, mdp: &TabularMdp, spec: &KernelSpec) -> Result<MeshReport> {
    check_dim(mdp.dim(), support.dim())?;
    check_dim(mdp.dim(), spec.dim())?;
    let hi = mdp.return_bound();
    let d = mdp.dim();
    let alpha = spec.alpha();
    let mut mesh = 0.0f64;
    let mut exact = true;
    for atoms in support.sets() {
        if atoms.as_flat().iter().any(|&v| v < -1e-9 || v > hi + 1e-9) {
            return Err(Error::invalid("support atoms must lie in the return hypercube"));
        }
        let m = match product_grid_axes(atoms) {
            Some(axes) => {
                let sq: f64 = axes.iter().map(|ax| widest_cell(ax, 0.0, hi).powi(2)).sum();
                sq.sqrt().powf(alpha)
            }
            None => {
                exact = false;
                nearest_atom_mesh(atoms, hi, alpha)
            }
        };
        mesh = mesh.max(m);
    }
    let contraction = 1.0 - mdp.gamma().powf(alpha / 2.0);
    let bound = mesh.sqrt() / contraction;
    let closed_form = if support.is_shared() && covers_hypercube(support.atoms(0), hi) {
        let per_axis = (support.atoms(0).len() as f64).powf(1.0 / d as f64);
        (per_axis > 2.0).then(|| {
            (d as f64).powf(alpha / 4.0) * mdp.r_max().powf(alpha / 2.0)
                / (contraction * (1.0 - mdp.gamma()).powf(alpha / 2.0) * (per_axis - 2.0).powf(alpha / 2.0))
        })
    } else {
        None
    };
    Ok(MeshReport {
        mesh,
        bound,
        closed_form,
        exact,
    })
}

/// Per-axis sorted coordinates when `atoms` is exactly their product set.
fn product_grid_axes(atoms: &AtomSet) -> Option<Vec<Vec<f64>>> {
    let d = atoms.dim();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut v: Vec<f64> = atoms.iter().map(|a| a[k]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9);
            v
        })
        .collect();
    let product = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len()))?;
    (product == atoms.len()).then_some(axes)
}

/// Widest cell of the 1-d nearest-point partition of `[lo, hi]`.
fn widest_cell(axis: &[f64], lo: f64, hi: f64) -> f64 {
    let mut edges = vec![lo];
    edges.extend(axis.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    edges.push(hi);
    edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn covers_hypercube(atoms: &AtomSet, hi: f64) -> bool {
    let Some(axes) = product_grid_axes(atoms) else { return false };
    axes.iter().all(|ax| {
        let n = ax.len();
        if n < 2 || ax[0].abs() > 1e-9 || (ax[n - 1] - hi).abs() > 1e-9 {
            return false;
        }
        let h = hi / (n - 1) as f64;
        ax.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * hi.max(1.0))
    })
}

fn nearest_atom_mesh(atoms: &AtomSet, hi: f64, alpha: f64) -> f64 {
    let d = atoms.dim();
    let per_axis = ((1u64 << 16) as f64).powf(1.0 / d as f64).floor().max(2.0) as usize;
    let probes = AtomSet::uniform_grid(d, per_axis, 0.0, hi).expect("probe grid");
    let spacing = hi / (per_axis - 1) as f64;
    let radius = probes
        .iter()
        .map(|p| atoms.iter().map(|a| crate::measures::euclid(p, a)).fold(f64::INFINITY, f64::min))
        .fold(0.0f64, f64::max)
        + 0.5 * spacing * (d as f64).sqrt();
    (2.0 * radius).powf(alpha)
}
