//! Temporal-difference learning: asynchronous signed-categorical TD and
//! the equally-weighted-particle (EWP) TD baseline.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dp::{categorical_init, Projection, ProjectedBackup};
use crate::error::{check_dim, Error, Result};
use crate::eval::{sup_mmd, ReferenceDistance};
use crate::kernels::KernelSpec;
use crate::mdp::{sample_transition, RngStream, TabularMdp, Transition};
use crate::measures::{empirical_atoms, pushforward, AtomSet, DiscreteMeasure, ReturnDistFn, SupportMap};
use crate::projections::{build_qp, Constraint};

/// Mass drift above which signed weights are renormalized.
const MASS_DRIFT_TOL: f64 = 1e-10;

/// Per-state step sizes `α(k) = scale · k^{−exponent}`, `k` the visit count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    exponent: f64,
    scale: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { exponent: 0.6, scale: 1.0 }
    }
}

impl StepSchedule {
    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Step size at the `k`-th visit (`k ≥ 1`).
    pub fn rate(&self, k: u64) -> f64 {
        self.scale * (k.max(1) as f64).powf(-self.exponent)
    }
}

/// Robbins–Monro schedule; `exponent` must lie in `(1/2, 1]`.
pub fn make_schedule(exponent: f64, scale: f64) -> Result<StepSchedule> {
    if !(exponent > 0.5 && exponent <= 1.0) {
        return Err(Error::invalid(format!("schedule exponent {exponent} must lie in (1/2, 1]")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("schedule scale {scale} must be positive")));
    }
    Ok(StepSchedule { exponent, scale })
}

/// How `X_t` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateSampler {
    /// iid uniform over states
    Uniform,
    /// follow a single trajectory from `start`
    Trajectory { start: usize },
}

impl StateSampler {
    fn first(&self, n: usize, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            StateSampler::Uniform => rng.random_range(0..n),
            StateSampler::Trajectory { start } => start,
        }
    }

    fn next(&self, n: usize, previous: &Transition, rng: &mut ChaCha8Rng) -> usize {
        match self {
            StateSampler::Uniform => rng.random_range(0..n),
            StateSampler::Trajectory { .. } => previous.next_state,
        }
    }
}

/// Estimate plus per-state visit counts and the global step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TdState {
    pub estimate: ReturnDistFn,
    pub visits: Vec<u64>,
    pub t: u64,
}

impl TdState {
    pub fn new(estimate: ReturnDistFn) -> Self {
        let n = estimate.n_states();
        Self {
            estimate,
            visits: vec![0; n],
            t: 0,
        }
    }
}

/// `(b_{R_t,γ})_# η(X'_t)`: the backup target for state `X_t`.
pub fn stochastic_backup(eta: &ReturnDistFn, tr: &Transition, gamma: f64) -> Result<DiscreteMeasure> {
    check_transition(tr, eta.n_states())?;
    Ok(pushforward(eta.state(tr.next_state), &tr.reward, gamma)?.compact())
}

fn check_transition(tr: &Transition, n: usize) -> Result<()> {
    if tr.state >= n || tr.next_state >= n {
        return Err(Error::invalid(format!("transition {} -> {} out of range", tr.state, tr.next_state)));
    }
    Ok(())
}

/// Mixes `new` into `old` with weight `rate`, keeping the sum at one.
fn relax(old: &mut [f64], new: &[f64], rate: f64) {
    for (o, n) in old.iter_mut().zip(new) {
        *o = (1.0 - rate) * *o + rate * n;
    }
    let mass: f64 = old.iter().sum();
    if (mass - 1.0).abs() > MASS_DRIFT_TOL {
        old.iter_mut().for_each(|o| *o /= mass);
    }
}

/// One asynchronous signed-categorical update of state `X_t`:
/// `w ← (1−α) w + α Π_signed(stochastic_backup)`. Other states are untouched.
pub fn categorical_td_step(
    state: &mut TdState,
    tr: &Transition,
    gamma: f64,
    support: &SupportMap,
    spec: &KernelSpec,
    schedule: &StepSchedule,
) -> Result<()> {
    check_transition(tr, state.estimate.n_states())?;
    let x = tr.state;
    if state.estimate.state(x).atoms() != support.atoms(x) {
        return Err(Error::invalid("estimate is not categorical on the support map"));
    }
    let target = stochastic_backup(&state.estimate, tr, gamma)?;
    let projected = build_qp(&target, support.atoms(x), spec, Constraint::AffineSumOne)?.solve()?.weights;
    let rate = schedule.rate(state.visits[x] + 1);
    let mut w = state.estimate.state(x).weights().to_vec();
    relax(&mut w, &projected, rate);
    state.estimate.set_state(x, DiscreteMeasure::new(support.atoms(x).clone(), w)?)?;
    state.visits[x] += 1;
    state.t += 1;
    Ok(())
}

/// Report rows `(step, sup_mmd_to_reference, mean_step_size)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TdReport {
    pub steps: Vec<u64>,
    /// NaN when no reference was supplied.
    pub distances: Vec<f64>,
    /// Mean step size over the updates since the previous row.
    pub mean_step_sizes: Vec<f64>,
}

impl TdReport {
    fn push(&mut self, step: u64, distance: f64, mean_step: f64) {
        self.steps.push(step);
        self.distances.push(distance);
        self.mean_step_sizes.push(mean_step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `step,sup_mmd_to_reference,mean_step_size` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,sup_mmd_to_reference,mean_step_size")?;
        for i in 0..self.len() {
            writeln!(w, "{},{:.16e},{:.16e}", self.steps[i], self.distances[i], self.mean_step_sizes[i])?;
        }
        Ok(())
    }
}

/// Settings shared by the TD runners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdConfig {
    pub steps: u64,
    pub schedule: StepSchedule,
    pub sampler: StateSampler,
    /// Rows are emitted every `report_every` steps and after the last one.
    pub report_every: u64,
}

impl TdConfig {
    pub fn new(steps: u64) -> Self {
        Self {
            steps,
            schedule: StepSchedule::default(),
            sampler: StateSampler::Uniform,
            report_every: (steps / 100).max(1),
        }
    }

    fn validate(&self, n_states: usize) -> Result<()> {
        if self.report_every == 0 {
            return Err(Error::invalid("report interval must be at least 1"));
        }
        if let StateSampler::Trajectory { start } = self.sampler {
            if start >= n_states {
                return Err(Error::invalid(format!("trajectory start {start} out of range")));
            }
        }
        Ok(())
    }
}

/// Final TD state and its report.
#[derive(Clone, Debug)]
pub struct TdRun {
    pub state: TdState,
    pub report: TdReport,
}

struct Tracker {
    rate_sum: f64,
    count: u64,
}

impl Tracker {
    fn take(&mut self) -> f64 {
        let mean = if self.count > 0 { self.rate_sum / self.count as f64 } else { 0.0 };
        self.rate_sum = 0.0;
        self.count = 0;
        mean
    }
}

/// Signed-categorical TD from the projected `δ_{r(x)/(1−γ)}` initialization.
/// Distances in the report are to `reference` (typically the signed DP
/// fixed point).
pub fn categorical_td_run(
    mdp: &TabularMdp,
    support: &SupportMap,
    spec: &KernelSpec,
    config: &TdConfig,
    reference: Option<&ReturnDistFn>,
    rng: &RngStream,
) -> Result<TdRun> {
    config.validate(mdp.n_states())?;
    let mut engine = ProjectedBackup::new(mdp, support, spec, Projection::Signed)?;
    let init = categorical_init(mdp, support, spec, Projection::Signed)?;
    let mut weights = support.weights_of(&init)?;
    let ref_weights = reference.and_then(|r| support.weights_of(r).ok());
    let mut r = rng.rng();
    let n = mdp.n_states();
    let mut visits = vec![0u64; n];
    let mut report = TdReport::default();
    let mut tracker = Tracker { rate_sum: 0.0, count: 0 };
    let mut x = config.sampler.first(n, &mut r);
    for t in 1..=config.steps {
        let tr = sample_transition(mdp, x, &mut r)?;
        let q = engine.linear_term_from(x, tr.next_state, &weights[tr.next_state]);
        let projected = engine.project(x, &q, None)?;
        visits[x] += 1;
        let rate = config.schedule.rate(visits[x]);
        relax(&mut weights[x], &projected, rate);
        tracker.rate_sum += rate;
        tracker.count += 1;
        if t % config.report_every == 0 || t == config.steps {
            let d = match (reference, &ref_weights) {
                (_, Some(rw)) => engine.distance(&weights, rw)?,
                (Some(rf), None) => sup_mmd(&support.with_weights(weights.clone())?, rf, spec)?,
                (None, None) => f64::NAN,
            };
            report.push(t, d, tracker.take());
        }
        x = config.sampler.next(n, &tr, &mut r);
    }
    Ok(TdRun {
        state: TdState {
            estimate: support.with_weights(weights)?,
            visits,
            t: config.steps,
        },
        report,
    })
}

/// Gradient of the pairwise MMD² between the equally weighted slots
/// `theta` and the fixed `target`, with respect to each slot of `theta`:
/// `(1/m²) Σ_j [∇ρ(θ_i, g_j) − ∇ρ(θ_i, θ_j)]`, `∇ρ` taken as 0 at coincidence.
pub fn ewp_gradient(theta: &AtomSet, target: &AtomSet, alpha: f64) -> Result<Vec<f64>> {
    check_dim(theta.dim(), target.dim())?;
    if theta.len() != target.len() || theta.is_empty() {
        return Err(Error::invalid("particle and target slot counts must match"));
    }
    let d = theta.dim();
    let m = theta.len() as f64;
    let mut grad = vec![0.0; theta.as_flat().len()];
    for (i, ti) in theta.iter().enumerate() {
        let gi = &mut grad[i * d..(i + 1) * d];
        for g in target.iter() {
            add_rho_grad(gi, ti, g, alpha, 1.0);
        }
        for tj in theta.iter() {
            add_rho_grad(gi, ti, tj, alpha, -1.0);
        }
        gi.iter_mut().for_each(|v| *v /= m * m);
    }
    Ok(grad)
}

/// `out += sign · α‖u−v‖^{α−2}(u−v)`.
fn add_rho_grad(out: &mut [f64], u: &[f64], v: &[f64], alpha: f64, sign: f64) {
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    if sq == 0.0 {
        return;
    }
    let c = sign * alpha * sq.powf(0.5 * alpha - 1.0);
    for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
        *o += c * (a - b);
    }
}

/// MMD² between equally weighted slot sets, summed pairwise (no merging).
pub fn ewp_objective(theta: &AtomSet, target: &AtomSet, alpha: f64) -> Result<f64> {
    check_dim(theta.dim(), target.dim())?;
    let rho = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().powf(0.5 * alpha) };
    let mean_pair = |s: &AtomSet, t: &AtomSet| -> f64 {
        let mut acc = 0.0;
        for a in s.iter() {
            for b in t.iter() {
                acc += rho(a, b);
            }
        }
        acc / (s.len() * t.len()) as f64
    };
    Ok(mean_pair(theta, target) - 0.5 * mean_pair(theta, theta) - 0.5 * mean_pair(target, target))
}

/// One EWP TD update of the slots at `X_t`: a gradient step of size
/// `learn_rate` on MMD² toward `r + γ θ̄(X'_t)`, the target held fixed.
pub fn ewp_td_step(particles: &mut [AtomSet], tr: &Transition, gamma: f64, spec: &KernelSpec, learn_rate: f64) -> Result<()> {
    check_transition(tr, particles.len())?;
    check_dim(spec.dim(), tr.reward.len())?;
    let target = particles[tr.next_state].affine(&tr.reward, gamma);
    let grad = ewp_gradient(&particles[tr.state], &target, spec.alpha())?;
    let theta = &particles[tr.state];
    let moved: Vec<f64> = theta.as_flat().iter().zip(&grad).map(|(t, g)| t - learn_rate * g).collect();
    particles[tr.state] = AtomSet::new(theta.dim(), moved)?;
    Ok(())
}

/// Slot sets as a return-distribution function of empirical measures.
pub fn particles_to_fn(particles: &[AtomSet]) -> Result<ReturnDistFn> {
    ReturnDistFn::new(particles.iter().map(|p| empirical_atoms(p.clone())).collect::<Result<Vec<_>>>()?)
}

/// EWP TD with `m` slots per state, initialized uniformly at random in the
/// return hypercube (coincident slots never separate under the gradient
/// flow).
pub fn ewp_td_run(
    mdp: &TabularMdp,
    m: usize,
    spec: &KernelSpec,
    config: &TdConfig,
    reference: Option<&ReturnDistFn>,
    rng: &RngStream,
) -> Result<TdRun> {
    config.validate(mdp.n_states())?;
    check_dim(mdp.dim(), spec.dim())?;
    if m == 0 {
        return Err(Error::invalid("particle count must be at least 1"));
    }
    let n = mdp.n_states();
    let mut init_rng = rng.child(0).rng();
    let mut particles = (0..n)
        .map(|_| AtomSet::random_uniform(mdp.dim(), m, 0.0, mdp.return_bound(), &mut init_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng.child(1).rng();
    let mut visits = vec![0u64; n];
    let mut report = TdReport::default();
    let mut tracker = Tracker { rate_sum: 0.0, count: 0 };
    let distance = reference.map(|rf| ReferenceDistance::new(rf, spec)).transpose()?;
    let mut x = config.sampler.first(n, &mut r);
    for t in 1..=config.steps {
        let tr = sample_transition(mdp, x, &mut r)?;
        visits[x] += 1;
        let rate = config.schedule.rate(visits[x]);
        ewp_td_step(&mut particles, &tr, mdp.gamma(), spec, rate)?;
        tracker.rate_sum += rate;
        tracker.count += 1;
        if t % config.report_every == 0 || t == config.steps {
            let d = match &distance {
                Some(rd) => rd.sup_mmd(&particles_to_fn(&particles)?)?,
                None => f64::NAN,
            };
            report.push(t, d, tracker.take());
        }
        x = config.sampler.next(n, &tr, &mut r);
    }
    Ok(TdRun {
        state: TdState {
            estimate: particles_to_fn(&particles)?,
            visits,
            t: config.steps,
        },
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::signed_dp_solve;
    use crate::kernels::mmd;
    use crate::mdp::dsm_mdp;
    use proptest::prelude::*;

    fn point(x: f64) -> DiscreteMeasure {
        DiscreteMeasure::dirac(&[x]).unwrap()
    }

    fn tr(state: usize, reward: f64, next_state: usize) -> Transition {
        Transition {
            state,
            reward: vec![reward],
            next_state,
        }
    }

    #[test]
    fn backup_cases() {
        let eta = ReturnDistFn::new(vec![point(0.0)]).unwrap();
        assert_eq!(stochastic_backup(&eta, &tr(0, 1.0, 0), 0.5).unwrap(), point(1.0));
        let eta = ReturnDistFn::new(vec![DiscreteMeasure::from_rows(&[vec![2.0], vec![4.0]], vec![0.25, 0.75]).unwrap()]).unwrap();
        assert_eq!(stochastic_backup(&eta, &tr(0, 3.0, 0), 0.0).unwrap(), point(3.0));
        let out = stochastic_backup(&eta, &tr(0, 1.0, 0), 0.5).unwrap();
        assert_eq!(out, DiscreteMeasure::from_rows(&[vec![2.0], vec![3.0]], vec![0.25, 0.75]).unwrap());
        assert!(stochastic_backup(&eta, &tr(0, 1.0, 3), 0.5).is_err());
    }

    #[test]
    fn schedule_cases() {
        let s = make_schedule(0.6, 1.0).unwrap();
        assert_eq!(s.rate(1), 1.0);
        assert!((s.rate(32) - 0.125).abs() < 1e-4);
        assert!(make_schedule(0.4, 1.0).is_err());
        assert!(make_schedule(1.2, 1.0).is_err());
        assert!(make_schedule(1.0, 0.0).is_err());
    }

    fn two_state() -> (TabularMdp, SupportMap, KernelSpec) {
        let mdp = TabularMdp::new(vec![vec![0.5, 0.5], vec![0.3, 0.7]], vec![vec![1.0], vec![0.0]], 0.5, 1.0).unwrap();
        let support = SupportMap::shared(AtomSet::uniform_grid(1, 5, 0.0, 2.0).unwrap(), 2).unwrap();
        (mdp, support, KernelSpec::energy(1.0, 1).unwrap())
    }

    #[test]
    fn step_endpoints_and_asynchrony() {
        let (mdp, support, spec) = two_state();
        let init = categorical_init(&mdp, &support, &spec, Projection::Signed).unwrap();
        let t = tr(0, 1.0, 1);
        let target = stochastic_backup(&init, &t, 0.5).unwrap();
        let direct = crate::projections::project_signed(&target, support.atoms(0), &spec).unwrap();

        let mut full = TdState::new(init.clone());
        categorical_td_step(&mut full, &t, 0.5, &support, &spec, &StepSchedule::default()).unwrap();
        assert!(full.estimate.state(0).weights().iter().zip(direct.weights()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(full.estimate.state(1), init.state(1));
        assert!((full.estimate.state(0).mass() - 1.0).abs() <= 1e-10);
        assert_eq!((full.visits.clone(), full.t), (vec![1, 0], 1));

        // α → 0: a tiny scale leaves the estimate numerically unchanged
        let mut frozen = TdState::new(init.clone());
        let tiny = make_schedule(1.0, 1e-300).unwrap();
        categorical_td_step(&mut frozen, &t, 0.5, &support, &spec, &tiny).unwrap();
        assert!(sup_mmd(&frozen.estimate, &init, &spec).unwrap() < 1e-12);
    }

    #[test]
    fn single_state_on_grid_converges() {
        let mdp = TabularMdp::new(vec![vec![1.0]], vec![vec![1.0]], 0.5, 1.0).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let support = SupportMap::shared(AtomSet::uniform_grid(1, 5, 0.0, 2.0).unwrap(), 1).unwrap();
        let run = categorical_td_run(&mdp, &support, &spec, &TdConfig::new(10_000), None, &RngStream::new(0, 0)).unwrap();
        let w = run.state.estimate.state(0).weights();
        let expected = [0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(w.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-3), "{w:?}");
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (mdp, support, spec) = two_state();
        let run = categorical_td_run(&mdp, &support, &spec, &TdConfig::new(0), None, &RngStream::new(0, 0)).unwrap();
        assert_eq!(run.state.estimate, categorical_init(&mdp, &support, &spec, Projection::Signed).unwrap());
        assert!(run.report.is_empty());
    }

    #[test]
    fn run_matches_generic_step() {
        let (mdp, support, spec) = two_state();
        let cfg = TdConfig {
            steps: 50,
            schedule: StepSchedule::default(),
            sampler: StateSampler::Trajectory { start: 1 },
            report_every: 10,
        };
        let run = categorical_td_run(&mdp, &support, &spec, &cfg, None, &RngStream::new(4, 1)).unwrap();
        // replay the same random draws through the generic step
        let mut r = RngStream::new(4, 1).rng();
        let mut state = TdState::new(categorical_init(&mdp, &support, &spec, Projection::Signed).unwrap());
        let mut x = 1;
        for _ in 0..50 {
            let t = sample_transition(&mdp, x, &mut r).unwrap();
            categorical_td_step(&mut state, &t, mdp.gamma(), &support, &spec, &cfg.schedule).unwrap();
            x = t.next_state;
        }
        assert!(sup_mmd(&state.estimate, &run.state.estimate, &spec).unwrap() < 1e-9);
        assert_eq!(state.visits, run.state.visits);
        assert_eq!(run.report.steps, vec![10, 20, 30, 40, 50]);
    }

    #[test]
    fn dsm_run_trends_toward_signed_fixed_point() {
        let p = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3], vec![0.3, 0.3, 0.4]];
        let mdp = dsm_mdp(p, 0.5).unwrap();
        let spec = KernelSpec::energy(1.0, 3).unwrap();
        let support = SupportMap::shared(AtomSet::simplex_grid(3, 4).unwrap(), 3).unwrap();
        let fixed = signed_dp_solve(&mdp, &support, &spec, 1e-10, 500).unwrap().estimate;
        let run = categorical_td_run(&mdp, &support, &spec, &TdConfig::new(20_000), Some(&fixed), &RngStream::new(2, 0)).unwrap();
        let d = &run.report.distances;
        let median = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&d[d.len() - 10..]) <= median(&d[..10]));
        assert!(*d.last().unwrap() < 0.05);
        for x in 0..3 {
            assert!((run.state.estimate.state(x).mass() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn averaged_signed_backups_match_projected_exact_backup() {
        let (mdp, support, spec) = two_state();
        let init = categorical_init(&mdp, &support, &spec, Projection::Signed).unwrap();
        let weights = support.weights_of(&init).unwrap();
        let mut engine = ProjectedBackup::new(&mdp, &support, &spec, Projection::Signed).unwrap();
        let exact = engine.step(&weights).unwrap();
        let mut r = RngStream::new(6, 0).rng();
        let reps = 10_000;
        let samples: Vec<Vec<f64>> = (0..reps)
            .map(|_| {
                let t = sample_transition(&mdp, 0, &mut r).unwrap();
                let q = engine.linear_term_from(0, t.next_state, &weights[t.next_state]);
                engine.project(0, &q, None).unwrap()
            })
            .collect();
        let n = samples[0].len();
        let avg: Vec<f64> = (0..n).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / reps as f64).collect();
        let as_measure = |w: &[f64]| DiscreteMeasure::new(support.atoms(0).clone(), w.to_vec()).unwrap();
        let err = mmd(&as_measure(&avg), &as_measure(&exact[0]), &spec).unwrap();
        let spread: f64 = samples.iter().map(|s| mmd(&as_measure(s), &as_measure(&avg), &spec).unwrap().powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!(err <= 3.0 * (spread / reps as f64).sqrt(), "{err} vs {}", (spread / reps as f64).sqrt());
    }

    #[test]
    fn ewp_gradient_cases() {
        let a = AtomSet::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.5]]).unwrap();
        assert!(ewp_gradient(&a, &a, 1.0).unwrap().iter().all(|&g| g == 0.0));
        // single slot, α = 1: MMD² = |θ − g|, gradient sign(θ − g)
        let th = AtomSet::from_rows(&[vec![0.3]]).unwrap();
        let g = AtomSet::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(ewp_gradient(&th, &g, 1.0).unwrap(), vec![-1.0]);
        let mut particles = vec![th.clone()];
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        ewp_td_step(&mut particles, &tr(0, 1.0, 0), 0.0, &spec, 0.1).unwrap();
        assert!((particles[0].atom(0)[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ewp_step_decreases_objective() {
        let mut rng = RngStream::new(3, 3).rng();
        for _ in 0..20 {
            let th = AtomSet::random_uniform(2, 6, 0.0, 3.0, &mut rng).unwrap();
            let g = AtomSet::random_uniform(2, 6, 0.0, 3.0, &mut rng).unwrap();
            let grad = ewp_gradient(&th, &g, 1.0).unwrap();
            let moved = AtomSet::new(2, th.as_flat().iter().zip(&grad).map(|(t, d)| t - 1e-3 * d).collect()).unwrap();
            assert!(ewp_objective(&moved, &g, 1.0).unwrap() < ewp_objective(&th, &g, 1.0).unwrap());
        }
    }

    #[test]
    fn ewp_run_approaches_truth() {
        let mdp = TabularMdp::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![vec![1.0], vec![0.0]], 0.5, 1.0).unwrap();
        let spec = KernelSpec::energy(1.0, 1).unwrap();
        let oracle = crate::eval::mc_oracle_fn(&mdp, 2000, 1e-6, &RngStream::new(1, 9)).unwrap();
        let run = ewp_td_run(&mdp, 16, &spec, &TdConfig::new(20_000), Some(&oracle), &RngStream::new(8, 0)).unwrap();
        let d = &run.report.distances;
        assert!(d.last().unwrap() < &d[0]);
        assert!(run.state.estimate.states().iter().all(|m| m.len() <= 16));
    }

    proptest! {
        #[test]
        fn ewp_gradient_matches_finite_differences(
            flat in proptest::collection::vec(0.0f64..3.0, 12),
            alpha in 0.5f64..1.9,
        ) {
            let th = AtomSet::new(2, flat[..6].to_vec()).unwrap();
            let g = AtomSet::new(2, flat[6..].to_vec()).unwrap();
            prop_assume!(th.min_pairwise_distance() > 1e-2);
            prop_assume!(th.iter().all(|a| g.iter().all(|b| crate::measures::euclid(a, b) > 1e-2)));
            let grad = ewp_gradient(&th, &g, alpha).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut up = th.as_flat().to_vec();
                let mut dn = up.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (ewp_objective(&AtomSet::new(2, up).unwrap(), &g, alpha).unwrap()
                    - ewp_objective(&AtomSet::new(2, dn).unwrap(), &g, alpha).unwrap()) / (2.0 * h);
                prop_assert!((fd - grad[k]).abs() <= 1e-5, "k={} fd={} grad={}", k, fd, grad[k]);
            }
        }
    }
}
