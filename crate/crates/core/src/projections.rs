//! MMD projections onto a fixed finite support.
//!
//! Both projections minimise `pᵀKp − 2pᵀq` where `K` is the Gram matrix of
//! the support and `q_j = Σ target(ξ) κ(ξ_j, ξ)`. The simplex version adds
//! `p ⪰ 0`; the signed version keeps only `Σ p = 1` and is therefore an
//! affine map of the target.
//!
//! The simplex solver runs accelerated projected gradient (FISTA with
//! restarts) to locate the active set, then polishes with a primal
//! active-set method whose equality-constrained subproblems are solved
//! exactly. The inverse of the bordered subproblem matrix is kept across
//! solves and updated one index at a time, so repeated solves with the same
//! `K` (one per state in dynamic programming) cost O(f²) per active-set
//! change.

use nalgebra::{DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{cross_kernel, gram, GramMatrix, KernelSpec};
use crate::measures::{AtomSet, DiscreteMeasure, SUPPORT_MIN_GAP};

/// Stopping tolerance on the projected-gradient KKT residual.
pub const KKT_TOL: f64 = 1e-10;
/// Iteration cap of the projected-gradient phase when run to convergence.
pub const PG_MAX_ITER: usize = 100_000;
/// Projected-gradient iterations spent locating the active set before the
/// active-set polish.
const PG_WARMUP_ITER: usize = 300;
/// Residual tolerance of the reduced signed system before falling back to a
/// least-squares solution.
pub const SIGNED_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    /// `p ⪰ 0, Σ p = 1`
    Simplex,
    /// `Σ p = 1`
    AffineSumOne,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub gram: GramMatrix,
    pub linear: Vec<f64>,
    pub constraint: Constraint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionResult {
    pub weights: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// The signed solve fell back to a least-squares pseudo-solution.
    pub degraded: bool,
}

pub fn build_qp(target: &DiscreteMeasure, support: &AtomSet, spec: &KernelSpec, constraint: Constraint) -> Result<QpProblem> {
    check_dim(spec.dim(), support.dim())?;
    check_dim(spec.dim(), target.dim())?;
    target.check_unit_mass()?;
    let gap = support.min_pairwise_distance();
    if gap <= SUPPORT_MIN_GAP {
        return Err(Error::invalid(format!("support atoms must be pairwise distinct (min gap {gap:e})")));
    }
    let gram = gram(support, spec)?;
    let cross = cross_kernel(support, target.atoms(), spec);
    let linear = (&cross * DVector::from_column_slice(target.weights())).as_slice().to_vec();
    Ok(QpProblem { gram, linear, constraint })
}

impl QpProblem {
    pub fn objective(&self, p: &[f64]) -> f64 {
        self.gram.quad_form(p) - 2.0 * dot(p, &self.linear)
    }

    pub fn kkt_residual(&self, p: &[f64]) -> f64 {
        let g = half_gradient(self.gram.matrix(), &self.linear, p);
        match self.constraint {
            Constraint::Simplex => simplex_kkt(p, &g),
            Constraint::AffineSumOne => affine_kkt(p, &g),
        }
    }

    pub fn solve(&self) -> Result<ProjectionResult> {
        match self.constraint {
            Constraint::Simplex => SimplexSolver::new(&self.gram).solve(&self.linear, None),
            Constraint::AffineSumOne => SignedProjector::new(&self.gram)?.solve(&self.linear),
        }
    }
}

/// MMD projection of `target` onto probability vectors over `support`.
pub fn project_simplex(target: &DiscreteMeasure, support: &AtomSet, spec: &KernelSpec) -> Result<DiscreteMeasure> {
    let qp = build_qp(target, support, spec, Constraint::Simplex)?;
    let res = qp.solve()?;
    DiscreteMeasure::new(support.clone(), res.weights)
}

/// MMD projection of `target` onto signed unit-mass vectors over `support`.
pub fn project_signed(target: &DiscreteMeasure, support: &AtomSet, spec: &KernelSpec) -> Result<DiscreteMeasure> {
    let qp = build_qp(target, support, spec, Constraint::AffineSumOne)?;
    let res = qp.solve()?;
    DiscreteMeasure::new(support.clone(), res.weights)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Kp − q`, half the objective gradient.
fn half_gradient(k: &DMatrix<f64>, q: &[f64], p: &[f64]) -> Vec<f64> {
    let n = q.len();
    let mut g: Vec<f64> = q.iter().map(|v| -v).collect();
    // K is symmetric: accumulate column-wise for contiguous access.
    for (j, &pj) in p.iter().enumerate() {
        if pj != 0.0 {
            let col = k.column(j);
            for i in 0..n {
                g[i] += col[i] * pj;
            }
        }
    }
    g
}

fn simplex_kkt(p: &[f64], g: &[f64]) -> f64 {
    let step: Vec<f64> = p.iter().zip(g).map(|(a, b)| a - b).collect();
    let proj = project_onto_simplex(&step);
    let infeas = (p.iter().sum::<f64>() - 1.0).abs().max(p.iter().fold(0.0f64, |m, &v| m.max(-v)));
    p.iter().zip(&proj).fold(infeas, |m, (a, b)| m.max((a - b).abs()))
}

fn affine_kkt(p: &[f64], g: &[f64]) -> f64 {
    let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    (0.5 * (hi - lo)).max((p.iter().sum::<f64>() - 1.0).abs())
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_onto_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Upper bound on the largest eigenvalue of a symmetric PSD matrix.
fn lipschitz_bound(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let gersh = (0..n)
        .map(|i| k.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    // power iteration gives a tighter estimate; inflate it for safety
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..30 {
        let w = k * &v;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        est = norm;
        v = w / norm;
    }
    let l = (1.05 * est).min(gersh);
    if l > 0.0 {
        l
    } else {
        gersh.max(1e-300)
    }
}

/// Accelerated projected gradient on the simplex with function-value
/// restarts. Stops when the KKT residual drops to `tol` or after
/// `max_iter` iterations.
pub fn solve_simplex_pg(k: &DMatrix<f64>, q: &[f64], x0: Option<&[f64]>, tol: f64, max_iter: usize) -> ProjectionResult {
    let n = q.len();
    let step = 1.0 / lipschitz_bound(k);
    let obj = |p: &[f64], g: &[f64]| {
        // pᵀKp − 2qᵀp = pᵀ(g − q) with g = Kp − q
        p.iter().zip(g).zip(q).map(|((pi, gi), qi)| pi * (gi - qi)).sum::<f64>()
    };
    let mut x = match x0 {
        Some(x0) => project_onto_simplex(x0),
        None => vec![1.0 / n as f64; n],
    };
    let mut gx = half_gradient(k, q, &x);
    let mut fx = obj(&x, &gx);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut iterations = 0;
    let mut residual = simplex_kkt(&x, &gx);
    while iterations < max_iter && residual > tol {
        iterations += 1;
        let gy = half_gradient(k, q, &y);
        let trial: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - step * b).collect();
        let xn = project_onto_simplex(&trial);
        let gn = half_gradient(k, q, &xn);
        let fnew = obj(&xn, &gn);
        if fnew > fx {
            // restart momentum from the current iterate
            t = 1.0;
            y = x.clone();
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / tn;
        y = xn.iter().zip(&x).map(|(a, b)| a + beta * (a - b)).collect();
        x = xn;
        gx = gn;
        fx = fnew;
        t = tn;
        residual = simplex_kkt(&x, &gx);
    }
    ProjectionResult {
        weights: x,
        kkt_residual: residual,
        iterations,
        degraded: false,
    }
}

/// Simplex-constrained QP solver bound to one Gram matrix.
pub struct SimplexSolver {
    k: DMatrix<f64>,
    jitter: f64,
    kkt: Option<BorderedInverse>,
}

/// Explicit inverse of `[K_FF 1; 1ᵀ 0]` for the free set `F`, kept current
/// under single-index insertions and deletions. Row/column 0 is the border;
/// slot `s` of `free` sits at row `s + 1`.
struct BorderedInverse {
    free: Vec<usize>,
    inv: DMatrix<f64>,
    updates: usize,
}

/// Rank-one updates allowed before the inverse is rebuilt from scratch.
const REBUILD_AFTER: usize = 256;

impl BorderedInverse {
    fn build(k: &DMatrix<f64>, free: &[usize], jitter: f64) -> Option<Self> {
        let f = free.len();
        let m = DMatrix::from_fn(f + 1, f + 1, |i, j| match (i, j) {
            (0, 0) => 0.0,
            (0, _) | (_, 0) => 1.0,
            _ => k[(free[i - 1], free[j - 1])] + if i == j { jitter } else { 0.0 },
        });
        let inv = m.try_inverse()?;
        inv.iter().all(|v| v.is_finite()).then(|| Self {
            free: free.to_vec(),
            inv,
            updates: 0,
        })
    }

    /// Bordered column of index `j` against the current free set.
    fn column(&self, k: &DMatrix<f64>, j: usize) -> DVector<f64> {
        DVector::from_fn(self.free.len() + 1, |i, _| if i == 0 { 1.0 } else { k[(self.free[i - 1], j)] })
    }

    fn insert(&mut self, k: &DMatrix<f64>, j: usize) -> bool {
        let u = self.column(k, j);
        let w = &self.inv * &u;
        let d = k[(j, j)];
        let s = d - u.dot(&w);
        if !(s.abs() > 1e-12 * (d.abs() + u.norm() * w.norm())) {
            return false;
        }
        let n = self.inv.nrows();
        let mut inv = DMatrix::zeros(n + 1, n + 1);
        for c in 0..n {
            for r in 0..n {
                inv[(r, c)] = self.inv[(r, c)] + w[r] * w[c] / s;
            }
            inv[(n, c)] = -w[c] / s;
            inv[(c, n)] = -w[c] / s;
        }
        inv[(n, n)] = 1.0 / s;
        self.inv = inv;
        self.free.push(j);
        self.updates += 1;
        true
    }

    fn remove(&mut self, j: usize) -> bool {
        let Some(slot) = self.free.iter().position(|&i| i == j) else { return true };
        let r = slot + 1;
        let g = self.inv[(r, r)];
        if !(g.abs() > 1e-300) || !g.is_finite() {
            return false;
        }
        let col = self.inv.column(r).clone_owned();
        let n = self.inv.nrows();
        let inv = DMatrix::from_fn(n - 1, n - 1, |a, b| {
            let (a, b) = (a + (a >= r) as usize, b + (b >= r) as usize);
            self.inv[(a, b)] - col[a] * col[b] / g
        });
        self.inv = inv;
        self.free.remove(slot);
        self.updates += 1;
        true
    }

    /// `(p_F, ν)`, refined once against the exact system.
    fn solve(&self, k: &DMatrix<f64>, q: &[f64]) -> (Vec<f64>, f64) {
        let f = self.free.len();
        let rhs = DVector::from_fn(f + 1, |i, _| if i == 0 { 1.0 } else { q[self.free[i - 1]] });
        let mut x = &self.inv * &rhs;
        let mut resid = rhs;
        for i in 0..=f {
            let mut acc = 0.0;
            for j in 0..=f {
                acc += match (i, j) {
                    (0, 0) => 0.0,
                    (0, _) | (_, 0) => x[j],
                    _ => k[(self.free[i - 1], self.free[j - 1])] * x[j],
                };
            }
            resid[i] -= acc;
        }
        x += &self.inv * resid;
        (x.as_slice()[1..].to_vec(), x[0])
    }
}

impl SimplexSolver {
    pub fn new(gram: &GramMatrix) -> Self {
        let k = gram.matrix().clone();
        let n = k.nrows();
        let jitter = 1e-12 * k.trace().abs() / n as f64;
        Self { k, jitter, kkt: None }
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    fn rebuild(&mut self, free: &[usize]) -> Result<()> {
        let built = BorderedInverse::build(&self.k, free, 0.0).or_else(|| BorderedInverse::build(&self.k, free, self.jitter.max(1e-300)));
        self.kkt = Some(built.ok_or_else(|| Error::numerical("singular KKT system in simplex projection"))?);
        Ok(())
    }

    /// Brings the cached inverse to the free set `target` by updates when
    /// the change is small, otherwise rebuilds it.
    fn sync(&mut self, target: &[usize]) -> Result<()> {
        let Some(kkt) = self.kkt.as_mut() else { return self.rebuild(target) };
        let stale: Vec<usize> = kkt.free.iter().copied().filter(|i| !target.contains(i)).collect();
        let fresh: Vec<usize> = target.iter().copied().filter(|i| !kkt.free.contains(i)).collect();
        if stale.len() + fresh.len() > 8.max(target.len() / 3) || kkt.updates + stale.len() + fresh.len() > REBUILD_AFTER {
            return self.rebuild(target);
        }
        let ok = stale.iter().all(|&i| kkt.remove(i)) && fresh.iter().all(|&j| kkt.insert(&self.k, j));
        if ok {
            Ok(())
        } else {
            self.rebuild(target)
        }
    }

    /// Solve for linear term `q`, optionally warm-started from a feasible
    /// (or nearly feasible) weight vector.
    pub fn solve(&mut self, q: &[f64], warm: Option<&[f64]>) -> Result<ProjectionResult> {
        let n = self.n();
        check_dim(n, q.len())?;
        if n == 1 {
            return Ok(ProjectionResult {
                weights: vec![1.0],
                kkt_residual: 0.0,
                iterations: 0,
                degraded: false,
            });
        }
        let mut iterations = 0;
        let mut p = match warm {
            Some(w) if w.len() == n && w.iter().all(|v| v.is_finite()) => {
                // rescale feasible warm starts so their zeros stay exact
                let s: f64 = w.iter().sum();
                if w.iter().all(|&v| v >= 0.0) && (s - 1.0).abs() < 1e-6 {
                    w.iter().map(|v| v / s).collect()
                } else {
                    project_onto_simplex(w)
                }
            }
            _ => {
                let pg = solve_simplex_pg(&self.k, q, None, KKT_TOL, PG_WARMUP_ITER);
                iterations += pg.iterations;
                if pg.kkt_residual <= KKT_TOL {
                    return Ok(pg);
                }
                pg.weights
            }
        };
        let max_rounds = 100 + 4 * n;
        let start: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
        self.sync(&start)?;
        let scale = 1.0 + q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..max_rounds {
            iterations += 1;
            let kkt = self.kkt.as_ref().expect("synced");
            let (pf, nu) = kkt.solve(&self.k, q);
            let free = kkt.free.clone();
            let mut in_free = vec![false; n];
            free.iter().for_each(|&i| in_free[i] = true);
            if pf.iter().any(|&v| v < 0.0) {
                // move from p toward the subproblem minimiser until a weight hits zero
                let mut t = 1.0;
                let mut hit = None;
                for (slot, &i) in free.iter().enumerate() {
                    if pf[slot] < 0.0 {
                        let ti = p[i] / (p[i] - pf[slot]);
                        if ti < t {
                            t = ti;
                            hit = Some(i);
                        }
                    }
                }
                for (slot, &i) in free.iter().enumerate() {
                    p[i] += t * (pf[slot] - p[i]);
                }
                if let Some(i) = hit {
                    p[i] = 0.0;
                }
                let keep: Vec<usize> = free.iter().copied().filter(|&i| p[i] > 0.0).collect();
                if keep.is_empty() {
                    return Err(Error::numerical("active-set iteration lost all free weights"));
                }
                self.sync(&keep)?;
                continue;
            }
            p.iter_mut().for_each(|v| *v = 0.0);
            for (slot, &i) in free.iter().enumerate() {
                p[i] = pf[slot];
            }
            let g = half_gradient(&self.k, q, &p);
            let mut worst = (-1e-13 * scale, None);
            for i in 0..n {
                if !in_free[i] {
                    let lambda = g[i] + nu;
                    if lambda < worst.0 {
                        worst = (lambda, Some(i));
                    }
                }
            }
            match worst.1 {
                Some(j) => {
                    let kkt = self.kkt.as_mut().expect("synced");
                    if kkt.updates >= REBUILD_AFTER || !kkt.insert(&self.k, j) {
                        let mut target = free.clone();
                        target.push(j);
                        self.rebuild(&target)?;
                    }
                }
                None => {
                    let s: f64 = p.iter().sum();
                    p.iter_mut().for_each(|v| *v = v.max(0.0) / s);
                    let kkt_residual = simplex_kkt(&p, &half_gradient(&self.k, q, &p));
                    if kkt_residual > KKT_TOL * scale {
                        // subproblem solve was inaccurate; finish with projected gradient
                        self.kkt = None;
                        let pg = solve_simplex_pg(&self.k, q, Some(&p), KKT_TOL * scale, PG_MAX_ITER);
                        return Ok(ProjectionResult {
                            iterations: iterations + pg.iterations,
                            ..pg
                        });
                    }
                    return Ok(ProjectionResult {
                        weights: p,
                        kkt_residual,
                        iterations,
                        degraded: false,
                    });
                }
            }
        }
        Err(Error::numerical(format!("active-set solver did not terminate in {max_rounds} rounds")))
    }
}

/// Signed projection bound to one Gram matrix: eliminates the last weight
/// through `Σ p = 1` and solves the reduced `(n−1) × (n−1)` system
/// `BᵀKB u = Bᵀ(q − K e_n)` with `p = e_n + Bu`.
pub struct SignedProjector {
    k: DMatrix<f64>,
    reduced: ReducedSolver,
}

enum ReducedSolver {
    Trivial,
    Cholesky(nalgebra::Cholesky<f64, Dyn>, DMatrix<f64>),
    LeastSquares(DMatrix<f64>),
}

impl SignedProjector {
    pub fn new(gram: &GramMatrix) -> Result<Self> {
        let k = gram.matrix().clone();
        let n = k.nrows();
        if n == 1 {
            return Ok(Self {
                k,
                reduced: ReducedSolver::Trivial,
            });
        }
        let last = n - 1;
        let a = DMatrix::from_fn(last, last, |i, j| k[(i, j)] - k[(i, last)] - k[(last, j)] + k[(last, last)]);
        let reduced = match a.clone().cholesky() {
            Some(c) => ReducedSolver::Cholesky(c, a),
            None => {
                let jitter = 1e-12 * a.trace().abs() / last as f64;
                let mut aj = a.clone();
                for i in 0..last {
                    aj[(i, i)] += jitter;
                }
                match aj.cholesky() {
                    Some(c) => ReducedSolver::Cholesky(c, a),
                    None => ReducedSolver::LeastSquares(a),
                }
            }
        };
        Ok(Self { k, reduced })
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn solve(&self, q: &[f64]) -> Result<ProjectionResult> {
        let n = self.n();
        check_dim(n, q.len())?;
        let last = n - 1;
        let b = |k: &DMatrix<f64>| DVector::from_fn(last, |i, _| (q[i] - k[(i, last)]) - (q[last] - k[(last, last)]));
        let (u, degraded) = match &self.reduced {
            ReducedSolver::Trivial => {
                return Ok(ProjectionResult {
                    weights: vec![1.0],
                    kkt_residual: 0.0,
                    iterations: 0,
                    degraded: false,
                })
            }
            ReducedSolver::Cholesky(c, a) => {
                let rhs = b(&self.k);
                let u = c.solve(&rhs);
                let res = (a * &u - &rhs).amax();
                if res > SIGNED_RESIDUAL_TOL * (1.0 + rhs.amax()) || !u.iter().all(|v| v.is_finite()) {
                    (least_squares(a, &rhs)?, true)
                } else {
                    (u, false)
                }
            }
            ReducedSolver::LeastSquares(a) => (least_squares(a, &b(&self.k))?, true),
        };
        let mut weights = Vec::with_capacity(n);
        weights.extend(u.iter().copied());
        weights.push(1.0 - u.sum());
        let g = half_gradient(&self.k, q, &weights);
        Ok(ProjectionResult {
            kkt_residual: affine_kkt(&weights, &g),
            weights,
            iterations: 1,
            degraded,
        })
    }
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    svd.solve(b, eps)
        .map_err(|e| Error::numerical(format!("reduced signed system is rank-deficient: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::mmd;
    use proptest::prelude::*;

    fn line(v: &[f64]) -> AtomSet {
        AtomSet::from_rows(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn build_qp_linear_term() {
        let k = KernelSpec::energy(1.0, 1).unwrap();
        let qp = build_qp(&DiscreteMeasure::dirac(&[0.5]).unwrap(), &line(&[0.0, 1.0]), &k, Constraint::Simplex).unwrap();
        assert!((qp.linear[0] - 0.0).abs() < 1e-15);
        assert!((qp.linear[1] - 0.5).abs() < 1e-15);
        assert!(build_qp(&DiscreteMeasure::dirac(&[0.5]).unwrap(), &line(&[1.0, 1.0]), &k, Constraint::Simplex).is_err());
        let far = DiscreteMeasure::dirac(&[40.0]).unwrap();
        let qp = build_qp(&far, &line(&[0.0, 1.0]), &k, Constraint::Simplex).unwrap();
        assert!(qp.linear.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn on_support_target_is_fixed() {
        let k = KernelSpec::energy(1.0, 2).unwrap();
        let support = AtomSet::uniform_grid(2, 3, 0.0, 2.0).unwrap();
        let w = vec![0.1, 0.0, 0.2, 0.05, 0.15, 0.0, 0.3, 0.1, 0.1];
        let target = DiscreteMeasure::new(support.clone(), w.clone()).unwrap();
        let p = project_simplex(&target, &support, &k).unwrap();
        for (a, b) in p.weights().iter().zip(&w) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let signed_w = vec![0.4, -0.1, 0.2, 0.05, 0.15, 0.0, 0.3, -0.1, 0.1];
        let target = DiscreteMeasure::new(support.clone(), signed_w.clone()).unwrap();
        let p = project_signed(&target, &support, &k).unwrap();
        for (a, b) in p.weights().iter().zip(&signed_w) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn signed_midpoint() {
        let k = KernelSpec::energy(1.0, 1).unwrap();
        let p = project_signed(&DiscreteMeasure::dirac(&[0.5]).unwrap(), &line(&[0.0, 1.0]), &k).unwrap();
        assert!((p.weights()[0] - 0.5).abs() < 1e-12 && (p.weights()[1] - 0.5).abs() < 1e-12);
        let s = project_simplex(&DiscreteMeasure::dirac(&[0.5]).unwrap(), &line(&[0.0, 1.0]), &k).unwrap();
        assert!((s.weights()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn simplex_projection_utility() {
        let p = project_onto_simplex(&[0.2, 0.2, 0.2]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(project_onto_simplex(&[5.0, -1.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn atom_at_reference_point() {
        // the zero row of K makes the Gram matrix singular
        let k = KernelSpec::energy(1.0, 2).unwrap();
        let support = AtomSet::uniform_grid(2, 3, 0.0, 1.0).unwrap();
        let target = DiscreteMeasure::from_rows(&[vec![0.1, 0.05], vec![0.9, 0.3]], vec![0.6, 0.4]).unwrap();
        let qp = build_qp(&target, &support, &k, Constraint::Simplex).unwrap();
        let r = qp.solve().unwrap();
        assert!(r.kkt_residual <= 1e-9);
        let s = build_qp(&target, &support, &k, Constraint::AffineSumOne).unwrap().solve().unwrap();
        assert!(!s.degraded);
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pg_and_active_set_agree() {
        let k = KernelSpec::energy(1.0, 2).unwrap();
        let support = AtomSet::uniform_grid(2, 4, 0.0, 3.0).unwrap();
        let target = DiscreteMeasure::from_rows(&[vec![1.5, 1.5], vec![2.5, 0.0]], vec![0.8, 0.2]).unwrap();
        let qp = build_qp(&target, &support, &k, Constraint::Simplex).unwrap();
        let a = qp.solve().unwrap();
        let b = solve_simplex_pg(qp.gram.matrix(), &qp.linear, None, KKT_TOL, PG_MAX_ITER);
        assert!((qp.objective(&a.weights) - qp.objective(&b.weights)).abs() < 1e-9);
        assert!(a.kkt_residual <= 1e-9);
    }

    #[test]
    fn warm_start_reuses_and_matches_cold() {
        let k = KernelSpec::energy(1.0, 2).unwrap();
        let support = AtomSet::uniform_grid(2, 5, 0.0, 4.0).unwrap();
        let g = gram(&support, &k).unwrap();
        let mut solver = SimplexSolver::new(&g);
        let t1 = DiscreteMeasure::from_rows(&[vec![1.2, 2.2], vec![3.1, 0.4]], vec![0.5, 0.5]).unwrap();
        let t2 = DiscreteMeasure::from_rows(&[vec![1.25, 2.1], vec![3.0, 0.5]], vec![0.52, 0.48]).unwrap();
        let q1 = build_qp(&t1, &support, &k, Constraint::Simplex).unwrap().linear;
        let q2 = build_qp(&t2, &support, &k, Constraint::Simplex).unwrap().linear;
        let r1 = solver.solve(&q1, None).unwrap();
        let warm = solver.solve(&q2, Some(&r1.weights)).unwrap();
        let cold = SimplexSolver::new(&g).solve(&q2, None).unwrap();
        for (a, b) in warm.weights.iter().zip(&cold.weights) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    fn instance() -> impl Strategy<Value = (DiscreteMeasure, AtomSet)> {
        (1usize..5, 1usize..5, 1usize..3).prop_flat_map(|(nt, ns, d)| {
            (
                proptest::collection::vec(0.0f64..2.0, nt * d),
                proptest::collection::vec(0.01f64..1.0, nt),
                proptest::collection::vec(0.0f64..2.0, ns * d),
            )
                .prop_map(move |(ta, tw, sa)| {
                    let s: f64 = tw.iter().sum();
                    let t = DiscreteMeasure::new(AtomSet::new(d, ta).unwrap(), tw.iter().map(|w| w / s).collect()).unwrap();
                    (t, AtomSet::new(d, sa).unwrap())
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn optimality_under_feasible_perturbation((target, support) in instance(), seed in 0u64..1000) {
            prop_assume!(support.min_pairwise_distance() > 1e-3);
            let k = KernelSpec::energy(1.0, support.dim()).unwrap();
            let qp = build_qp(&target, &support, &k, Constraint::Simplex).unwrap();
            let r = qp.solve().unwrap();
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            let base = qp.objective(&r.weights);
            let n = r.weights.len();
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                // random feasible direction: a step toward a random simplex point
                let target_pt = project_onto_simplex(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
                let dir: Vec<f64> = target_pt.iter().zip(&r.weights).map(|(a, b)| a - b).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-9 { continue; }
                let p: Vec<f64> = r.weights.iter().zip(&dir).map(|(w, d)| w + 1e-4 * d / norm).collect();
                if p.iter().any(|&v| v < 0.0) { continue; }
                prop_assert!(qp.objective(&p) >= base - 1e-12);
            }
        }

        #[test]
        fn signed_projection_is_affine((p, support) in instance(), (q, _) in instance()) {
            prop_assume!(p.dim() == support.dim() && q.dim() == support.dim());
            prop_assume!(support.min_pairwise_distance() > 1e-3);
            let k = KernelSpec::energy(1.0, support.dim()).unwrap();
            let lam = 0.3;
            let mix = crate::measures::mixture(&[(lam, &p), (1.0 - lam, &q)]).unwrap();
            let a = project_signed(&mix, &support, &k).unwrap();
            let pp = project_signed(&p, &support, &k).unwrap();
            let pq = project_signed(&q, &support, &k).unwrap();
            let comb: Vec<f64> = pp.weights().iter().zip(pq.weights()).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
            let b = DiscreteMeasure::new(support.clone(), comb).unwrap();
            prop_assert!(mmd(&a, &b, &k).unwrap() <= 1e-8);
        }
    }

    /// Dense enumeration of the simplex at resolution `1/steps`.
    fn grid_search(qp: &QpProblem, steps: usize) -> f64 {
        let n = qp.linear.len();
        let mut best = f64::INFINITY;
        let mut idx = vec![0usize; n];
        fn rec(k: usize, left: usize, idx: &mut Vec<usize>, steps: usize, qp: &QpProblem, best: &mut f64) {
            let n = idx.len();
            if k + 1 == n {
                idx[k] = left;
                let p: Vec<f64> = idx.iter().map(|&i| i as f64 / steps as f64).collect();
                *best = best.min(qp.objective(&p));
                return;
            }
            for i in 0..=left {
                idx[k] = i;
                rec(k + 1, left - i, idx, steps, qp, best);
            }
        }
        rec(0, steps, &mut idx, steps, qp, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_grid_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..12 {
            let n = 2 + trial % 2; // 2 or 3 atoms
            let d = 1 + trial % 2;
            let support = AtomSet::random_uniform(d, n, 0.0, 1.0, &mut rng).unwrap();
            if support.min_pairwise_distance() < 0.05 {
                continue;
            }
            let target = AtomSet::random_uniform(d, 3, -0.2, 1.2, &mut rng).unwrap();
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            let target = DiscreteMeasure::new(target, w.iter().map(|v| v / s).collect()).unwrap();
            let k = KernelSpec::energy(1.0, d).unwrap();
            let qp = build_qp(&target, &support, &k, Constraint::Simplex).unwrap();
            let sol = qp.objective(&qp.solve().unwrap().weights);
            let grid = grid_search(&qp, 1000);
            assert!(sol <= grid + 1e-12, "solver worse than grid point");
            assert!(grid - sol <= 1e-5, "gap {}", grid - sol);
        }
    }

    #[test]
    fn matches_brute_force_four_atoms() {
        let support = AtomSet::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let target = DiscreteMeasure::from_rows(&[vec![0.3, 0.2], vec![1.1, 0.7]], vec![0.7, 0.3]).unwrap();
        let k = KernelSpec::energy(1.0, 2).unwrap();
        let qp = build_qp(&target, &support, &k, Constraint::Simplex).unwrap();
        let sol = qp.objective(&qp.solve().unwrap().weights);
        let grid = grid_search(&qp, 1000);
        assert!(sol <= grid + 1e-12);
        assert!(grid - sol <= 1e-5);
    }
}
