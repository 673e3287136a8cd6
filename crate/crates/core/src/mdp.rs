//! Policy-conditioned tabular MDPs with vector-valued cumulants.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measures::MASS_TOL;

/// Seed plus stream id. Equal pairs give equal draw sequences; derived
/// streams let every `(purpose, iteration, state)` own an independent
/// generator so work can be split across threads without changing results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }

    /// Child stream identified by `tag`.
    pub fn child(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019))),
        }
    }

    pub fn derive(&self, tags: &[u64]) -> Self {
        tags.iter().fold(*self, |s, &t| s.child(t))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `P^π`, `r` and `γ` for policy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpJson", into = "MdpJson")]
pub struct TabularMdp {
    transition: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
    gamma: f64,
    r_max: f64,
}

impl TabularMdp {
    pub fn new(transition: Vec<Vec<f64>>, cumulants: Vec<Vec<f64>>, gamma: f64, r_max: f64) -> Result<Self> {
        let n = transition.len();
        if n == 0 {
            return Err(Error::invalid("MDP needs at least one state"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid(format!("discount {gamma} must lie in [0, 1)")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::invalid("r_max must be positive and finite"));
        }
        for (x, row) in transition.iter().enumerate() {
            check_dim(n, row.len())?;
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("transition row {x} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > MASS_TOL {
                return Err(Error::invalid(format!("transition row {x} sums to {s}")));
            }
        }
        if cumulants.len() != n {
            return Err(Error::invalid("one cumulant vector per state is required"));
        }
        let d = cumulants[0].len();
        if d == 0 {
            return Err(Error::invalid("cumulant dimension must be at least 1"));
        }
        for (x, r) in cumulants.iter().enumerate() {
            check_dim(d, r.len())?;
            if r.iter().any(|&v| !(v >= 0.0 && v <= r_max * (1.0 + 1e-12))) {
                return Err(Error::invalid(format!("cumulant of state {x} leaves [0, r_max]")));
            }
        }
        Ok(Self {
            transition,
            cumulants,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn dim(&self) -> usize {
        self.cumulants[0].len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.transition[x]
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn cumulant(&self, x: usize) -> &[f64] {
        &self.cumulants[x]
    }

    pub fn cumulants(&self) -> &[Vec<f64>] {
        &self.cumulants
    }

    /// Successor states with positive probability.
    pub fn successors(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.transition[x].iter().copied().enumerate().filter(|&(_, p)| p > 0.0)
    }

    /// Upper end of every return coordinate, `r_max / (1 − γ)`.
    pub fn return_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transition[x];
        let mut acc = 0.0;
        let mut last = x;
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = j;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }

    /// Analytic successor features `(I − γP)⁻¹ r`, one row per state.
    pub fn successor_features(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.n_states();
        let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - self.gamma * self.transition[i][j]);
        let lu = a.lu();
        let mut out = vec![vec![0.0; self.dim()]; n];
        for k in 0..self.dim() {
            let b = DVector::from_fn(n, |i, _| self.cumulants[i][k]);
            let sol = lu
                .solve(&b)
                .ok_or_else(|| Error::numerical("I − γP is singular"))?;
            for i in 0..n {
                out[i][k] = sol[i];
            }
        }
        Ok(out)
    }

    /// Smallest horizon whose truncation tail `γ^T √d r_max / (1 − γ)` is at
    /// most `tail_tol`.
    pub fn horizon_for_tail(&self, tail_tol: f64) -> usize {
        let lead = (self.dim() as f64).sqrt() * self.return_bound();
        if self.gamma == 0.0 {
            return 1;
        }
        if lead <= tail_tol {
            return 1;
        }
        ((tail_tol / lead).ln() / self.gamma.ln()).ceil().max(1.0) as usize
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    d: usize,
    gamma: f64,
    r_max: f64,
    transition: Vec<Vec<f64>>,
    cumulants: Vec<Vec<f64>>,
}

impl TryFrom<MdpJson> for TabularMdp {
    type Error = Error;

    fn try_from(j: MdpJson) -> Result<Self> {
        let m = TabularMdp::new(j.transition, j.cumulants, j.gamma, j.r_max)?;
        check_dim(j.n_states, m.n_states())?;
        check_dim(j.d, m.dim())?;
        Ok(m)
    }
}

impl From<TabularMdp> for MdpJson {
    fn from(m: TabularMdp) -> Self {
        MdpJson {
            n_states: m.n_states(),
            d: m.dim(),
            gamma: m.gamma,
            r_max: m.r_max,
            transition: m.transition,
            cumulants: m.cumulants,
        }
    }
}

/// One observed step `(X_t, R_t = r(X_t), X'_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub reward: Vec<f64>,
    pub next_state: usize,
}

/// Rows drawn from a symmetric Dirichlet, cumulants uniform on `[0, r_max]^d`.
pub fn random_mdp<R: Rng + ?Sized>(
    n_states: usize,
    dim: usize,
    gamma: f64,
    concentration: f64,
    r_max: f64,
    rng: &mut R,
) -> Result<TabularMdp> {
    if n_states == 0 || dim == 0 {
        return Err(Error::invalid("random MDP needs n_states >= 1 and d >= 1"));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::invalid("Dirichlet concentration must be positive"));
    }
    let g = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut transition = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut row: Vec<f64> = (0..n_states).map(|_| g.sample(rng)).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row = vec![1.0 / n_states as f64; n_states];
        }
        transition.push(row);
    }
    let cumulants = (0..n_states)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..=r_max)).collect())
        .collect();
    TabularMdp::new(transition, cumulants, gamma, r_max)
}

/// Distributional successor measure: `d = n` and `r(i) = (1 − γ) e_i`.
pub fn dsm_mdp(transition: Vec<Vec<f64>>, gamma: f64) -> Result<TabularMdp> {
    let n = transition.len();
    let c = 1.0 - gamma;
    let cumulants = (0..n)
        .map(|i| (0..n).map(|j| if i == j { c } else { 0.0 }).collect())
        .collect();
    TabularMdp::new(transition, cumulants, gamma, if c > 0.0 { c } else { 1.0 })
}

pub fn sample_transition<R: Rng + ?Sized>(mdp: &TabularMdp, state: usize, rng: &mut R) -> Result<Transition> {
    if state >= mdp.n_states() {
        return Err(Error::invalid(format!("state {state} out of range")));
    }
    Ok(Transition {
        state,
        reward: mdp.cumulant(state).to_vec(),
        next_state: mdp.sample_next(state, rng),
    })
}

/// Truncated discounted cumulant sum `Σ_{t<horizon} γᵗ r(X_t)` from `state`.
pub fn rollout_return<R: Rng + ?Sized>(mdp: &TabularMdp, state: usize, horizon: usize, rng: &mut R) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::invalid("rollout horizon must be at least 1"));
    }
    if state >= mdp.n_states() {
        return Err(Error::invalid(format!("state {state} out of range")));
    }
    let mut g = vec![0.0; mdp.dim()];
    let mut x = state;
    let mut disc = 1.0;
    for t in 0..horizon {
        for (gi, ri) in g.iter_mut().zip(mdp.cumulant(x)) {
            *gi += disc * ri;
        }
        disc *= mdp.gamma();
        if t + 1 < horizon {
            x = mdp.sample_next(x, rng);
        }
    }
    Ok(g)
}
