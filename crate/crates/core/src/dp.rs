//! Dynamic programming for multi-return distribution functions.
//!
//! * [`exact_bellman`] applies the distributional Bellman operator exactly;
//!   supports grow multiplicatively, so an optional atom cap turns blowup
//!   into an error.
//! * [`categorical_dp_step`] / [`categorical_dp_solve`] iterate the
//!   projected operator `Π T` over a fixed support map. [`ProjectedBackup`]
//!   precomputes everything that does not change between iterations.
//! * [`ewp_random_step`] / [`ewp_random_solve`] run the randomized particle
//!   scheme: every new particle is `r(x) + γ Z` with `Z` a uniformly chosen
//!   slot of a sampled successor state.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::eval::sup_mmd;
use crate::kernels::{clamp_mmd, cross_kernel, gram, GramMatrix, KernelSpec};
use crate::mdp::{RngStream, TabularMdp};
use crate::measures::{empirical_atoms, mixture, pushforward, AtomSet, DiscreteMeasure, ReturnDistFn, SupportMap};
use crate::projections::{build_qp, Constraint, SignedProjector, SimplexSolver};

/// Which categorical class the iterates live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// probability vectors over the support
    Simplex,
    /// signed unit-mass vectors over the support
    Signed,
}

impl Projection {
    fn constraint(self) -> Constraint {
        match self {
            Projection::Simplex => Constraint::Simplex,
            Projection::Signed => Constraint::AffineSumOne,
        }
    }
}

/// Outcome of a dynamic-programming run.
#[derive(Clone, Debug)]
pub struct DpReport {
    /// sup-MMD between iterates `k` and `k+1`, one entry per iteration.
    pub distances: Vec<f64>,
    /// Cumulative wall time after each iteration, milliseconds.
    pub wall_ms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration `sup_x MMD(step output, exact backup of input)`
    /// (randomized particle DP only, when requested).
    pub diagnostics: Vec<f64>,
    /// sup-MMD of the final iterate to a supplied reference.
    pub oracle_distance: Option<f64>,
    pub estimate: ReturnDistFn,
}

impl DpReport {
    /// Ratios `distances[k+1] / distances[k]`.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.distances
            .windows(2)
            .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
            .collect()
    }

    /// `iteration,sup_mmd[,wall_ms]` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W, include_timing: bool) -> Result<()> {
        if include_timing {
            writeln!(w, "iteration,sup_mmd,wall_ms")?;
        } else {
            writeln!(w, "iteration,sup_mmd")?;
        }
        for (k, d) in self.distances.iter().enumerate() {
            if include_timing {
                writeln!(w, "{},{:.16e},{:.16e}", k + 1, d, self.wall_ms[k])?;
            } else {
                writeln!(w, "{},{:.16e}", k + 1, d)?;
            }
        }
        Ok(())
    }
}

fn check_compatible(eta: &ReturnDistFn, mdp: &TabularMdp) -> Result<()> {
    if eta.n_states() != mdp.n_states() {
        return Err(Error::invalid(format!(
            "estimate has {} states, MDP has {}",
            eta.n_states(),
            mdp.n_states()
        )));
    }
    check_dim(mdp.dim(), eta.dim())
}

/// `(Tη)(x) = Σ_{x'} P(x'|x) (b_{r(x),γ})_# η(x')`, computed exactly.
pub fn exact_bellman(eta: &ReturnDistFn, mdp: &TabularMdp, max_atoms: Option<usize>) -> Result<ReturnDistFn> {
    check_compatible(eta, mdp)?;
    let measures = (0..mdp.n_states())
        .map(|x| backup_state(eta, mdp, x, max_atoms))
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(measures)
}

fn backup_state(eta: &ReturnDistFn, mdp: &TabularMdp, x: usize, max_atoms: Option<usize>) -> Result<DiscreteMeasure> {
    let needed: usize = mdp.successors(x).map(|(y, _)| eta.state(y).len()).sum();
    if let Some(cap) = max_atoms {
        if needed > cap {
            return Err(Error::SupportCapExceeded { needed, cap });
        }
    }
    let pushed = mdp
        .successors(x)
        .map(|(y, p)| Ok((p, pushforward(eta.state(y), mdp.cumulant(x), mdp.gamma())?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(f64, &DiscreteMeasure)> = pushed.iter().map(|(p, m)| (*p, m)).collect();
    mixture(&refs)
}

/// One application of `Π T` with projection onto the simplex: exact backup,
/// then a QP per state.
pub fn categorical_dp_step(eta: &ReturnDistFn, mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec) -> Result<ReturnDistFn> {
    projected_step(eta, mdp, support, spec, Projection::Simplex)
}

/// Same as [`categorical_dp_step`] but onto signed unit-mass vectors.
pub fn signed_dp_step(eta: &ReturnDistFn, mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec) -> Result<ReturnDistFn> {
    projected_step(eta, mdp, support, spec, Projection::Signed)
}

fn projected_step(
    eta: &ReturnDistFn,
    mdp: &TabularMdp,
    support: &SupportMap,
    spec: &KernelSpec,
    projection: Projection,
) -> Result<ReturnDistFn> {
    check_compatible(eta, mdp)?;
    if support.n_states() != mdp.n_states() {
        return Err(Error::invalid("support map and MDP disagree on the state count"));
    }
    let backed = exact_bellman(eta, mdp, None)?;
    let measures = (0..mdp.n_states())
        .map(|x| {
            let qp = build_qp(backed.state(x), support.atoms(x), spec, projection.constraint())?;
            DiscreteMeasure::new(support.atoms(x).clone(), qp.solve()?.weights)
        })
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(measures)
}

enum StateSolver {
    Simplex(SimplexSolver),
    Signed(SignedProjector),
}

struct StateBackup {
    gram: GramMatrix,
    /// `(x', P(x'|x), C)` with `C[j, k] = κ(ξ(x)_j, r(x) + γ ξ(x')_k)`;
    /// for a shared support a single entry with `x' = usize::MAX` stands
    /// for the whole successor mixture.
    cross: Vec<(usize, f64, DMatrix<f64>)>,
    solver: StateSolver,
}

/// Projected Bellman operator on a fixed support map with all
/// iteration-invariant quantities precomputed.
pub struct ProjectedBackup {
    projection: Projection,
    shared: bool,
    transition: Vec<Vec<f64>>,
    states: Vec<StateBackup>,
}

impl ProjectedBackup {
    pub fn new(mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec, projection: Projection) -> Result<Self> {
        if support.n_states() != mdp.n_states() {
            return Err(Error::invalid("support map and MDP disagree on the state count"));
        }
        check_dim(mdp.dim(), support.dim())?;
        check_dim(mdp.dim(), spec.dim())?;
        let shared = support.is_shared();
        let states = (0..mdp.n_states())
            .map(|x| {
                let here = support.atoms(x);
                let gram = gram(here, spec)?;
                let cross = if shared {
                    let shifted = here.affine(mdp.cumulant(x), mdp.gamma());
                    vec![(usize::MAX, 1.0, cross_kernel(here, &shifted, spec))]
                } else {
                    mdp.successors(x)
                        .map(|(y, p)| {
                            let shifted = support.atoms(y).affine(mdp.cumulant(x), mdp.gamma());
                            (y, p, cross_kernel(here, &shifted, spec))
                        })
                        .collect()
                };
                let solver = match projection {
                    Projection::Simplex => StateSolver::Simplex(SimplexSolver::new(&gram)),
                    Projection::Signed => StateSolver::Signed(SignedProjector::new(&gram)?),
                };
                Ok(StateBackup { gram, cross, solver })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projection,
            shared,
            transition: mdp.transition().to_vec(),
            states,
        })
    }

    pub fn projection(&self) -> Projection {
        self.projection
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn gram(&self, x: usize) -> &GramMatrix {
        &self.states[x].gram
    }

    /// `q^x` for the exact backup of the categorical iterate `weights`.
    pub fn linear_term(&self, x: usize, weights: &[Vec<f64>]) -> Vec<f64> {
        let st = &self.states[x];
        if self.shared {
            let n = weights[0].len();
            let mut mixed = DVector::zeros(n);
            for (y, &p) in self.transition[x].iter().enumerate() {
                if p > 0.0 {
                    for k in 0..n {
                        mixed[k] += p * weights[y][k];
                    }
                }
            }
            (&st.cross[0].2 * mixed).as_slice().to_vec()
        } else {
            self.linear_term_successor_mix(x, weights)
        }
    }

    fn linear_term_successor_mix(&self, x: usize, weights: &[Vec<f64>]) -> Vec<f64> {
        let st = &self.states[x];
        let mut q = DVector::zeros(st.gram.n());
        for (y, p, c) in &st.cross {
            q += c * DVector::from_column_slice(&weights[*y]) * *p;
        }
        q.as_slice().to_vec()
    }

    /// `q` for a single sampled successor `y` (one stochastic backup).
    pub fn linear_term_from(&self, x: usize, y: usize, successor_weights: &[f64]) -> Vec<f64> {
        let st = &self.states[x];
        let c = if self.shared {
            &st.cross[0].2
        } else {
            match st.cross.iter().find(|(s, _, _)| *s == y) {
                Some((_, _, c)) => c,
                None => return Vec::new(),
            }
        };
        (c * DVector::from_column_slice(successor_weights)).as_slice().to_vec()
    }

    /// Project the linear term `q` at state `x`, warm-starting from `warm`.
    pub fn project(&mut self, x: usize, q: &[f64], warm: Option<&[f64]>) -> Result<Vec<f64>> {
        match &mut self.states[x].solver {
            StateSolver::Simplex(s) => Ok(s.solve(q, warm)?.weights),
            StateSolver::Signed(s) => Ok(s.solve(q)?.weights),
        }
    }

    /// One synchronous sweep of `Π T` over all states.
    pub fn step(&mut self, weights: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let qs: Vec<Vec<f64>> = (0..self.n_states()).map(|x| self.linear_term(x, weights)).collect();
        self.states
            .par_iter_mut()
            .zip(qs.par_iter())
            .zip(weights.par_iter())
            .map(|((st, q), w)| match &mut st.solver {
                StateSolver::Simplex(s) => Ok(s.solve(q, Some(w))?.weights),
                StateSolver::Signed(s) => Ok(s.solve(q)?.weights),
            })
            .collect()
    }

    /// sup-MMD between two categorical iterates on this support map.
    pub fn distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
        let mut worst = 0.0f64;
        for (x, st) in self.states.iter().enumerate() {
            let diff: Vec<f64> = a[x].iter().zip(&b[x]).map(|(u, v)| u - v).collect();
            let scale: f64 = diff.iter().map(|v| v.abs()).sum::<f64>().powi(2) * st.gram.matrix().amax();
            worst = worst.max(clamp_mmd(st.gram.quad_form(&diff), scale)?.sqrt());
        }
        Ok(worst)
    }
}

/// Projection of `δ_{r(x)/(1−γ)}` at every state.
pub fn categorical_init(mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec, projection: Projection) -> Result<ReturnDistFn> {
    let measures = (0..mdp.n_states())
        .map(|x| {
            let point: Vec<f64> = mdp.cumulant(x).iter().map(|r| r / (1.0 - mdp.gamma())).collect();
            let qp = build_qp(&DiscreteMeasure::dirac(&point)?, support.atoms(x), spec, projection.constraint())?;
            DiscreteMeasure::new(support.atoms(x).clone(), qp.solve()?.weights)
        })
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(measures)
}

/// Iterate `Π T` from [`categorical_init`] until successive iterates are
/// within `tol` in sup-MMD. A run that hits `max_iter` is returned with
/// `converged = false`.
pub fn projected_dp_solve(
    mdp: &TabularMdp,
    support: &SupportMap,
    spec: &KernelSpec,
    projection: Projection,
    tol: f64,
    max_iter: usize,
) -> Result<DpReport> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let start = Instant::now();
    let mut engine = ProjectedBackup::new(mdp, support, spec, projection)?;
    let mut weights = support.weights_of(&categorical_init(mdp, support, spec, projection)?)?;
    let mut distances = Vec::new();
    let mut wall_ms = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let next = engine.step(&weights)?;
        let d = engine.distance(&next, &weights)?;
        weights = next;
        distances.push(d);
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if d <= tol {
            converged = true;
            break;
        }
    }
    Ok(DpReport {
        iterations: distances.len(),
        distances,
        wall_ms,
        converged,
        diagnostics: Vec::new(),
        oracle_distance: None,
        estimate: support.with_weights(weights)?,
    })
}

/// Categorical DP onto the probability simplex.
pub fn categorical_dp_solve(mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec, tol: f64, max_iter: usize) -> Result<DpReport> {
    projected_dp_solve(mdp, support, spec, Projection::Simplex, tol, max_iter)
}

/// Fixed point of the signed projected operator; the limit of signed
/// categorical TD.
pub fn signed_dp_solve(mdp: &TabularMdp, support: &SupportMap, spec: &KernelSpec, tol: f64, max_iter: usize) -> Result<DpReport> {
    projected_dp_solve(mdp, support, spec, Projection::Signed, tol, max_iter)
}

/// Particle count and iteration budget for randomized particle DP.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EwpConfig {
    pub m: usize,
    /// `None` selects [`EwpConfig::default_iterations`].
    pub iterations: Option<usize>,
    pub seed: u64,
}

impl EwpConfig {
    pub fn new(m: usize, seed: u64) -> Self {
        Self { m, iterations: None, seed }
    }

    /// `K = ⌈log m / log γ^{−α}⌉`.
    pub fn default_iterations(m: usize, gamma: f64, alpha: f64) -> usize {
        if gamma == 0.0 {
            return 1;
        }
        ((m as f64).ln() / (-alpha * gamma.ln())).ceil().max(0.0) as usize
    }

    pub fn resolved_iterations(&self, gamma: f64, alpha: f64) -> usize {
        self.iterations.unwrap_or_else(|| Self::default_iterations(self.m, gamma, alpha))
    }
}

/// `m` slots of `δ_{r(x)/(1−γ)}` at every state.
pub fn ewp_init(mdp: &TabularMdp, m: usize) -> Result<ReturnDistFn> {
    if m == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let measures = (0..mdp.n_states())
        .map(|x| {
            let point: Vec<f64> = mdp.cumulant(x).iter().map(|r| r / (1.0 - mdp.gamma())).collect();
            let data = point.iter().copied().cycle().take(m * point.len()).collect();
            empirical_atoms(AtomSet::new(mdp.dim(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(measures)
}

/// One randomized particle backup. State `x` draws from `rng.child(x)`, so
/// results do not depend on evaluation order.
pub fn ewp_random_step(eta: &ReturnDistFn, mdp: &TabularMdp, m: usize, rng: &RngStream) -> Result<ReturnDistFn> {
    check_compatible(eta, mdp)?;
    if m == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let d = mdp.dim();
    let gamma = mdp.gamma();
    let measures = (0..mdp.n_states())
        .into_par_iter()
        .map(|x| {
            let mut r = rng.child(x as u64).rng();
            let shift = mdp.cumulant(x);
            let mut data = Vec::with_capacity(m * d);
            for _ in 0..m {
                let y = mdp.sample_next(x, &mut r);
                let src = eta.state(y);
                let z = src.atom(r.random_range(0..src.len()));
                data.extend(shift.iter().zip(z).map(|(s, zi)| s + gamma * zi));
            }
            empirical_atoms(AtomSet::new(d, data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ReturnDistFn::new(measures)
}

/// Run exactly `K` randomized particle backups from [`ewp_init`].
///
/// `distances` holds successive-iterate sup-MMDs; with `diagnostics` set,
/// each step also records its distance to the exact backup of its input.
pub fn ewp_random_solve(
    mdp: &TabularMdp,
    config: &EwpConfig,
    spec: &KernelSpec,
    oracle: Option<&ReturnDistFn>,
    diagnostics: bool,
) -> Result<DpReport> {
    let start = Instant::now();
    let k = config.resolved_iterations(mdp.gamma(), spec.alpha());
    let base = RngStream::new(config.seed, 0x6577_7064);
    let mut eta = ewp_init(mdp, config.m)?;
    let mut distances = Vec::with_capacity(k);
    let mut wall_ms = Vec::with_capacity(k);
    let mut diag = Vec::new();
    for it in 0..k {
        let next = ewp_random_step(&eta, mdp, config.m, &base.child(it as u64))?;
        if diagnostics {
            let exact = exact_bellman(&eta, mdp, None)?;
            diag.push(sup_mmd(&next, &exact, spec)?);
        }
        distances.push(sup_mmd(&next, &eta, spec)?);
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        eta = next;
    }
    let oracle_distance = oracle.map(|o| sup_mmd(&eta, o, spec)).transpose()?;
    Ok(DpReport {
        iterations: k,
        distances,
        wall_ms,
        converged: true,
        diagnostics: diag,
        oracle_distance,
        estimate: eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::mmd;
    use crate::mdp::{dsm_mdp, random_mdp};

    fn self_loop() -> TabularMdp {
        TabularMdp::new(vec![vec![1.0]], vec![vec![1.0, 0.0]], 0.5, 1.0).unwrap()
    }

    #[test]
    fn exact_backup_fixed_point() {
        let eta = ReturnDistFn::new(vec![DiscreteMeasure::dirac(&[2.0, 0.0]).unwrap()]).unwrap();
        let out = exact_bellman(&eta, &self_loop(), None).unwrap();
        assert_eq!(out, eta);
    }

    #[test]
    fn exact_backup_mixture_weights() {
        let mdp = TabularMdp::new(
            vec![vec![0.0, 0.3, 0.7], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            vec![vec![1.0], vec![0.0], vec![0.5]],
            0.5,
            1.0,
        )
        .unwrap();
        let eta = ReturnDistFn::new(vec![
            DiscreteMeasure::dirac(&[0.0]).unwrap(),
            DiscreteMeasure::dirac(&[2.0]).unwrap(),
            DiscreteMeasure::dirac(&[4.0]).unwrap(),
        ])
        .unwrap();
        let out = exact_bellman(&eta, &mdp, None).unwrap();
        let s0 = out.state(0);
        assert_eq!(s0.atoms().to_rows(), vec![vec![2.0], vec![3.0]]);
        assert!((s0.weights()[0] - 0.3).abs() < 1e-15 && (s0.weights()[1] - 0.7).abs() < 1e-15);
        // deterministic chain: a single pushforward
        assert_eq!(out.state(1).atoms().to_rows(), vec![vec![1.0]]);
        let err = exact_bellman(&eta, &mdp, Some(1)).unwrap_err();
        assert!(matches!(err, Error::SupportCapExceeded { needed: 2, cap: 1 }));
    }

    #[test]
    fn generic_and_precomputed_steps_agree() {
        let mut rng = RngStream::new(3, 0).rng();
        let mdp = random_mdp(3, 2, 0.8, 1.0, 1.0, &mut rng).unwrap();
        let spec = KernelSpec::energy(1.0, 2).unwrap();
        let shared = SupportMap::shared(AtomSet::uniform_grid(2, 4, 0.0, 5.0).unwrap(), 3).unwrap();
        let sets = (0..3)
            .map(|x| AtomSet::uniform_grid(2, 3 + x, 0.0, 5.0).unwrap())
            .collect();
        let varied = SupportMap::new(sets).unwrap();
        for support in [shared, varied] {
            for projection in [Projection::Simplex, Projection::Signed] {
                let eta = categorical_init(&mdp, &support, &spec, projection).unwrap();
                let generic = projected_step(&eta, &mdp, &support, &spec, projection).unwrap();
                let mut engine = ProjectedBackup::new(&mdp, &support, &spec, projection).unwrap();
                let fast = engine.step(&support.weights_of(&eta).unwrap()).unwrap();
                let fast = support.with_weights(fast).unwrap();
                assert!(sup_mmd(&generic, &fast, &spec).unwrap() < 1e-7);
            }
        }
    }

    #[test]
    fn categorical_fixed_point_is_stationary() {
        let mut rng = RngStream::new(8, 0).rng();
        let mdp = random_mdp(3, 1, 0.7, 1.0, 1.0, &mut rng).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let support = SupportMap::shared(AtomSet::uniform_grid(1, 12, 0.0, mdp.return_bound()).unwrap(), 3).unwrap();
        let rep = categorical_dp_solve(&mdp, &support, &spec, 1e-10, 2000).unwrap();
        assert!(rep.converged);
        let again = categorical_dp_step(&rep.estimate, &mdp, &support, &spec).unwrap();
        assert!(sup_mmd(&again, &rep.estimate, &spec).unwrap() < 1e-7);
    }

    #[test]
    fn on_grid_single_state_matches_exact_backup() {
        // r = 1, γ = 0.5: the fixed point δ_2 lies on the grid and T maps it to itself
        let mdp = TabularMdp::new(vec![vec![1.0]], vec![vec![1.0]], 0.5, 1.0).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let support = SupportMap::shared(AtomSet::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(), 1).unwrap();
        let eta = support.with_weights(vec![vec![0.0, 0.0, 1.0]]).unwrap();
        let projected = categorical_dp_step(&eta, &mdp, &support, &spec).unwrap();
        let exact = exact_bellman(&eta, &mdp, None).unwrap();
        assert!(sup_mmd(&projected, &exact, &spec).unwrap() < 1e-9);
        let rep = categorical_dp_solve(&mdp, &support, &spec, 1e-12, 10).unwrap();
        assert!(rep.converged && rep.iterations <= 2);
    }

    #[test]
    fn dsm_contraction_ratio() {
        let p = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3], vec![0.3, 0.3, 0.4]];
        let mdp = dsm_mdp(p, 0.9).unwrap();
        let spec = KernelSpec::energy(1.0, 3).unwrap();
        let support = SupportMap::shared(AtomSet::simplex_grid(3, 10).unwrap(), 3).unwrap();
        let rep = categorical_dp_solve(&mdp, &support, &spec, 1e-8, 400).unwrap();
        for r in rep.contraction_ratios().iter().skip(4) {
            assert!(*r <= 0.9f64.sqrt() + 1e-6, "ratio {r}");
        }
    }

    #[test]
    fn iteration_count_matches_geometric_rate() {
        // deterministic cycle: no mixing, so the worst-case rate is tight
        let p = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let mdp = TabularMdp::new(p, vec![vec![1.0], vec![0.0], vec![0.3]], 0.8, 1.0).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let support = SupportMap::shared(AtomSet::uniform_grid(1, 20, 0.0, mdp.return_bound()).unwrap(), 3).unwrap();
        let tol = 1e-8;
        let rep = categorical_dp_solve(&mdp, &support, &spec, tol, 5000).unwrap();
        assert!(rep.converged);
        let d0 = rep.distances[0];
        let predicted = (tol / d0).ln() / 0.8f64.sqrt().ln();
        let k = rep.iterations as f64;
        assert!(k <= 2.0 * predicted + 1.0 && k >= predicted / 2.0, "k={k} predicted={predicted}");
        let tail = &rep.distances[3..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let mut rng = RngStream::new(1, 0).rng();
        let mdp = random_mdp(2, 1, 0.9, 1.0, 1.0, &mut rng).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let support = SupportMap::shared(AtomSet::uniform_grid(1, 8, 0.0, 10.0).unwrap(), 2).unwrap();
        let rep = categorical_dp_solve(&mdp, &support, &spec, 1e-12, 3).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.distances.len(), 3);
        assert!(categorical_dp_solve(&mdp, &support, &spec, 0.0, 3).is_err());
    }

    #[test]
    fn ewp_step_cases() {
        let mdp = TabularMdp::new(vec![vec![1.0]], vec![vec![1.0]], 0.5, 1.0).unwrap();
        let stream = RngStream::new(0, 0);
        let eta = ReturnDistFn::new(vec![empirical_atoms(AtomSet::new(1, vec![3.0; 4]).unwrap()).unwrap()]).unwrap();
        let out = ewp_random_step(&eta, &mdp, 4, &stream).unwrap();
        assert!(out.state(0).atoms().as_flat().iter().all(|&z| z == 2.5));
        let one = ewp_random_step(&eta, &mdp, 1, &stream).unwrap();
        assert_eq!(one.state(0).len(), 1);
        let cfg = EwpConfig {
            m: 8,
            iterations: Some(0),
            seed: 1,
        };
        let rep = ewp_random_solve(&mdp, &cfg, &KernelSpec::energy(1.0, 1).unwrap(), None, false).unwrap();
        assert_eq!(rep.estimate, ewp_init(&mdp, 8).unwrap());
    }

    #[test]
    fn ewp_step_is_unbiased() {
        let mdp = TabularMdp::new(
            vec![vec![0.2, 0.8], vec![0.6, 0.4]],
            vec![vec![1.0], vec![0.2]],
            0.9,
            1.0,
        )
        .unwrap();
        let eta = ReturnDistFn::new(vec![
            empirical_atoms(AtomSet::new(1, vec![0.0, 2.0, 4.0]).unwrap()).unwrap(),
            empirical_atoms(AtomSet::new(1, vec![1.0, 5.0, 6.0]).unwrap()).unwrap(),
        ])
        .unwrap();
        let expected = 1.0 + 0.9 * (0.2 * 2.0 + 0.8 * 4.0);
        let reps = 10_000;
        let means: Vec<f64> = (0..reps)
            .map(|i| ewp_random_step(&eta, &mdp, 3, &RngStream::new(5, i)).unwrap().state(0).mean()[0])
            .collect();
        let avg = means.iter().sum::<f64>() / reps as f64;
        let var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((avg - expected).abs() <= 3.0 * (var / reps as f64).sqrt());
    }

    #[test]
    fn ewp_default_iterations_and_diagnostics() {
        assert_eq!(EwpConfig::default_iterations(16, 0.5, 1.0), 4);
        assert_eq!(EwpConfig::default_iterations(1, 0.9, 1.0), 0);
        let mut rng = RngStream::new(4, 0).rng();
        let mdp = random_mdp(3, 2, 0.6, 1.0, 1.0, &mut rng).unwrap();
        let spec = KernelSpec::energy(1.0, 2).unwrap();
        let rep = ewp_random_solve(&mdp, &EwpConfig::new(16, 3), &spec, None, true).unwrap();
        assert_eq!(rep.diagnostics.len(), rep.iterations);
        assert!(rep.diagnostics.iter().all(|d| d.is_finite() && *d >= 0.0));
        let again = ewp_random_solve(&mdp, &EwpConfig::new(16, 3), &spec, None, false).unwrap();
        assert_eq!(again.estimate, rep.estimate);
    }

    #[test]
    fn bellman_contracts_random_instances() {
        let mut rng = RngStream::new(77, 0).rng();
        let spec = KernelSpec::energy(1.0, 2).unwrap();
        for _ in 0..10 {
            let mdp = random_mdp(4, 2, 0.8, 1.0, 1.0, &mut rng).unwrap();
            let atoms = AtomSet::random_uniform(2, 5, 0.0, 5.0, &mut rng).unwrap();
            let random_fn = |rng: &mut rand_chacha::ChaCha8Rng| {
                let ms = (0..4)
                    .map(|_| {
                        let w: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                        let s: f64 = w.iter().sum();
                        DiscreteMeasure::new(atoms.clone(), w.iter().map(|v| v / s).collect()).unwrap()
                    })
                    .collect();
                ReturnDistFn::new(ms).unwrap()
            };
            let a = random_fn(&mut rng);
            let b = random_fn(&mut rng);
            let before = sup_mmd(&a, &b, &spec).unwrap();
            let after = sup_mmd(&exact_bellman(&a, &mdp, None).unwrap(), &exact_bellman(&b, &mdp, None).unwrap(), &spec).unwrap();
            assert!(after <= 0.8f64.sqrt() * before + 1e-9);
            let _ = mmd(a.state(0), b.state(0), &spec).unwrap();
        }
    }
}
