//! Energy-distance geometry: the semimetric `‖y1 − y2‖^α`, the kernel it
//! induces around a reference point, and MMD between finite measures.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::measures::{AtomSet, DiscreteMeasure, MASS_TOL};

/// Negative MMD² values down to `-NEG_MMD_TOL · scale` are treated as
/// round-off and clamped to zero.
pub const NEG_MMD_TOL: f64 = 1e-12;

/// `ρ_α(y1, y2) = ‖y1 − y2‖₂^α` with `α ∈ (0, 2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Semimetric {
    alpha: f64,
}

impl Semimetric {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::invalid(format!("semimetric exponent {alpha} must lie in (0, 2)")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Unchecked evaluation; callers guarantee equal lengths.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.pow_sq(sq)
    }

    /// `ρ` from a squared Euclidean distance.
    #[inline]
    pub(crate) fn pow_sq(&self, sq: f64) -> f64 {
        if sq == 0.0 {
            0.0
        } else if self.alpha == 1.0 {
            sq.sqrt()
        } else {
            sq.powf(0.5 * self.alpha)
        }
    }
}

pub fn semimetric_eval(spec: &Semimetric, y1: &[f64], y2: &[f64]) -> Result<f64> {
    check_dim(y1.len(), y2.len())?;
    if y1.is_empty() {
        return Err(Error::invalid("vectors must have dimension >= 1"));
    }
    Ok(spec.eval(y1, y2))
}

/// Kernel `κ(y1, y2) = ½(ρ(y1, y0) + ρ(y2, y0) − ρ(y1, y2))` induced by the
/// semimetric around the reference point `y0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub semimetric: Semimetric,
    pub reference: Vec<f64>,
}

impl KernelSpec {
    pub fn new(alpha: f64, reference: Vec<f64>) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::invalid("reference point must have dimension >= 1"));
        }
        Ok(Self {
            semimetric: Semimetric::new(alpha)?,
            reference,
        })
    }

    /// Energy kernel with the origin as reference point.
    pub fn energy(alpha: f64, dim: usize) -> Result<Self> {
        Self::new(alpha, vec![0.0; dim])
    }

    pub fn alpha(&self) -> f64 {
        self.semimetric.alpha
    }

    pub fn dim(&self) -> usize {
        self.reference.len()
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = |u: &[f64], v: &[f64]| self.semimetric.eval(u, v);
        0.5 * (r(a, &self.reference) + r(b, &self.reference) - r(a, b))
    }
}

pub fn kernel_eval(spec: &KernelSpec, y1: &[f64], y2: &[f64]) -> Result<f64> {
    check_dim(spec.dim(), y1.len())?;
    check_dim(spec.dim(), y2.len())?;
    Ok(spec.eval(y1, y2))
}

/// Symmetric matrix of kernel evaluations over an atom list.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(pub DMatrix<f64>);

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// `vᵀ K v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let k = &self.0;
        let n = v.len();
        let mut acc = 0.0;
        for j in 0..n {
            let col = k.column(j);
            let mut s = 0.0;
            for i in 0..n {
                s += col[i] * v[i];
            }
            acc += s * v[j];
        }
        acc
    }
}

pub fn gram(atoms: &AtomSet, spec: &KernelSpec) -> Result<GramMatrix> {
    check_dim(spec.dim(), atoms.dim())?;
    if atoms.is_empty() {
        return Err(Error::invalid("gram matrix needs at least one atom"));
    }
    let n = atoms.len();
    let to_ref: Vec<f64> = atoms.iter().map(|a| spec.semimetric.eval(a, &spec.reference)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = to_ref[i];
        for j in 0..i {
            let v = 0.5 * (to_ref[i] + to_ref[j] - spec.semimetric.eval(atoms.atom(i), atoms.atom(j)));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix(k))
}

/// Matrix `C[j, k] = κ(rows_j, cols_k)`.
pub(crate) fn cross_kernel(rows: &AtomSet, cols: &AtomSet, spec: &KernelSpec) -> DMatrix<f64> {
    let rho0_rows: Vec<f64> = rows.iter().map(|a| spec.semimetric.eval(a, &spec.reference)).collect();
    let rho0_cols: Vec<f64> = cols.iter().map(|a| spec.semimetric.eval(a, &spec.reference)).collect();
    DMatrix::from_fn(rows.len(), cols.len(), |j, k| {
        0.5 * (rho0_rows[j] + rho0_cols[k] - spec.semimetric.eval(rows.atom(j), cols.atom(k)))
    })
}

/// MMD² between two unit-mass (possibly signed) measures.
///
/// Evaluated through `−½ Σ cᵢcⱼ ρ(zᵢ, zⱼ)` on the signed difference `c`, which
/// does not involve the reference point. For `d = 1, α = 1` the equivalent
/// squared-CDF integral is used instead (`O(n log n)`).
pub fn mmd_squared(p: &DiscreteMeasure, q: &DiscreteMeasure, spec: &KernelSpec) -> Result<f64> {
    check_dim(spec.dim(), p.dim())?;
    check_dim(spec.dim(), q.dim())?;
    for m in [p, q] {
        let mass = m.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!("MMD needs unit-mass measures, got mass {mass}")));
        }
    }
    let (value, scale) = if spec.dim() == 1 && spec.alpha() == 1.0 {
        let mut pts: Vec<(f64, f64)> = p.atoms().as_flat().iter().copied().zip(p.weights().iter().copied()).collect();
        pts.extend(q.atoms().as_flat().iter().copied().zip(q.weights().iter().map(|w| -w)));
        squared_cdf_gap(pts)
    } else {
        signed_energy(p, q, &spec.semimetric)
    };
    clamp_mmd(value, scale)
}

pub fn mmd(p: &DiscreteMeasure, q: &DiscreteMeasure, spec: &KernelSpec) -> Result<f64> {
    mmd_squared(p, q, spec).map(f64::sqrt)
}

/// Classical energy statistic `2E ρ(Y, Z) − E ρ(Y, Y') − E ρ(Z, Z')`, which
/// equals `2 · MMD²` for the induced kernel.
pub fn energy_distance(p: &DiscreteMeasure, q: &DiscreteMeasure, spec: &KernelSpec) -> Result<f64> {
    mmd_squared(p, q, spec).map(|v| 2.0 * v)
}

pub(crate) fn clamp_mmd(value: f64, scale: f64) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -NEG_MMD_TOL * scale.max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::numerical(format!(
            "MMD² evaluated to {value:e}; the kernel quadratic form should be nonnegative"
        )))
    }
}

/// Returns `(−½ cᵀRc, ½Σ|cᵢcⱼ|ρᵢⱼ)` for the merged signed difference
/// `c = p − q`. Merging first makes shared atoms cancel exactly.
fn signed_energy(p: &DiscreteMeasure, q: &DiscreteMeasure, rho: &Semimetric) -> (f64, f64) {
    let diff = difference(p, q);
    let w = diff.weights();
    let (mut s, mut a) = (0.0, 0.0);
    for i in 0..diff.len() {
        if w[i] == 0.0 {
            continue;
        }
        let zi = diff.atom(i);
        for j in 0..i {
            let t = w[i] * w[j] * rho.eval(zi, diff.atom(j));
            s += t;
            a += t.abs();
        }
    }
    (-s, a)
}

/// `p − q` with coincident atoms merged.
pub(crate) fn difference(p: &DiscreteMeasure, q: &DiscreteMeasure) -> DiscreteMeasure {
    let mut data = p.atoms().as_flat().to_vec();
    data.extend_from_slice(q.atoms().as_flat());
    let mut weights = p.weights().to_vec();
    weights.extend(q.weights().iter().map(|w| -w));
    DiscreteMeasure::new(AtomSet::new(p.dim(), data).expect("atoms already validated"), weights)
        .expect("weights already validated")
        .compact()
}

/// `∫ F(y)² dy` where `F` is the CDF of a zero-mass signed measure on R.
/// Returns the integral and a magnitude scale for round-off checks.
pub(crate) fn squared_cdf_gap(mut pts: Vec<(f64, f64)>) -> (f64, f64) {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut cdf, mut acc, mut scale) = (0.0, 0.0, 0.0);
    for w in pts.windows(2) {
        cdf += w[0].1;
        let gap = w[1].0 - w[0].0;
        acc += cdf * cdf * gap;
        scale += cdf.abs() * gap;
    }
    (acc, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn semimetric_examples() {
        let r1 = Semimetric::new(1.0).unwrap();
        assert_eq!(semimetric_eval(&r1, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let r = Semimetric::new(0.7).unwrap();
        assert_eq!(semimetric_eval(&r, &[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        let r15 = Semimetric::new(1.5).unwrap();
        assert_eq!(semimetric_eval(&r15, &[0.0], &[1.0]).unwrap(), 1.0);
        assert!(semimetric_eval(&r1, &[0.0], &[1.0, 2.0]).is_err());
        assert!(Semimetric::new(2.0).is_err());
        assert!(Semimetric::new(0.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        let k = KernelSpec::new(1.3, vec![0.5, -1.0]).unwrap();
        assert_eq!(kernel_eval(&k, &[0.5, -1.0], &[4.0, 2.0]).unwrap(), 0.0);
        let y = [2.0, 1.0];
        let diag = kernel_eval(&k, &y, &y).unwrap();
        assert!((diag - k.semimetric.eval(&y, &k.reference)).abs() < 1e-15);
        let k1 = KernelSpec::energy(1.0, 1).unwrap();
        assert_eq!(kernel_eval(&k1, &[1.0], &[2.0]).unwrap(), 1.0);
        assert!(kernel_eval(&k1, &[1.0, 0.0], &[2.0]).is_err());
    }

    #[test]
    fn mmd_examples() {
        let k = KernelSpec::energy(1.0, 1).unwrap();
        let d0 = DiscreteMeasure::dirac(&[0.0]).unwrap();
        let d1 = DiscreteMeasure::dirac(&[1.0]).unwrap();
        let u = DiscreteMeasure::from_rows(&rows(&[0.0, 1.0]), vec![0.5, 0.5]).unwrap();
        let h = DiscreteMeasure::dirac(&[0.5]).unwrap();
        assert_eq!(mmd_squared(&u, &u, &k).unwrap(), 0.0);
        assert!((mmd_squared(&d0, &d1, &k).unwrap() - 1.0).abs() < 1e-15);
        assert!((mmd_squared(&u, &h, &k).unwrap() - 0.25).abs() < 1e-15);
        // the generic pairwise route agrees with the 1-d shortcut
        let k2 = KernelSpec::energy(1.0, 2).unwrap();
        let lift = |m: &DiscreteMeasure| {
            let r: Vec<Vec<f64>> = m.atoms().iter().map(|a| vec![a[0], 0.0]).collect();
            DiscreteMeasure::from_rows(&r, m.weights().to_vec()).unwrap()
        };
        assert!((mmd_squared(&lift(&u), &lift(&h), &k2).unwrap() - 0.25).abs() < 1e-15);
        let bad = DiscreteMeasure::from_rows(&rows(&[0.0]), vec![0.9]).unwrap();
        assert!(mmd_squared(&bad, &d0, &k).is_err());
    }

    #[test]
    fn gram_examples() {
        let k = KernelSpec::energy(1.0, 1).unwrap();
        let g = gram(&AtomSet::from_rows(&rows(&[0.0, 1.0, 2.0])).unwrap(), &k).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.0, expect);
        let kg = KernelSpec::new(0.6, vec![1.0, 1.0]).unwrap();
        let y = [3.0, -1.0];
        let g = gram(&AtomSet::from_rows(&[y.to_vec()]).unwrap(), &kg).unwrap();
        assert_eq!(g.0[(0, 0)], kg.semimetric.eval(&y, &kg.reference));
        let g = gram(&AtomSet::from_rows(&[vec![1.0, 1.0], y.to_vec()]).unwrap(), &kg).unwrap();
        assert_eq!(g.0[(0, 0)], 0.0);
        assert_eq!(g.0[(0, 1)], 0.0);
    }

    #[test]
    fn clamp_behaviour() {
        assert_eq!(clamp_mmd(-1e-13, 1.0).unwrap(), 0.0);
        assert!(clamp_mmd(-1e-6, 1.0).is_err());
    }

    fn signed(dim: usize, max_atoms: usize) -> impl Strategy<Value = DiscreteMeasure> {
        (1usize..=max_atoms).prop_flat_map(move |n| {
            (
                proptest::collection::vec(-2.0f64..2.0, n * dim),
                proptest::collection::vec(-1.0f64..1.0, n),
            )
                .prop_map(move |(data, mut w)| {
                    let s: f64 = w.iter().sum();
                    let k = w.len() as f64;
                    w.iter_mut().for_each(|x| *x += (1.0 - s) / k);
                    DiscreteMeasure::new(AtomSet::new(dim, data).unwrap(), w).unwrap()
                })
        })
    }

    /// Brute force `(w_p − w_q)ᵀ K (w_p − w_q)` on the stacked atom list.
    fn quad_form_oracle(p: &DiscreteMeasure, q: &DiscreteMeasure, k: &KernelSpec) -> f64 {
        let mut pts: Vec<(Vec<f64>, f64)> = p.atoms().iter().map(<[f64]>::to_vec).zip(p.weights().iter().copied()).collect();
        pts.extend(q.atoms().iter().map(<[f64]>::to_vec).zip(q.weights().iter().map(|w| -w)));
        let mut s = 0.0;
        for (a, wa) in &pts {
            for (b, wb) in &pts {
                s += wa * wb * k.eval(a, b);
            }
        }
        s
    }

    proptest! {
        #[test]
        fn reference_point_cancels(p in signed(2, 5), q in signed(2, 5),
                                   y0 in proptest::collection::vec(-3.0f64..3.0, 2), alpha in 0.2f64..1.9) {
            let a = KernelSpec::new(alpha, vec![0.0, 0.0]).unwrap();
            let b = KernelSpec::new(alpha, y0).unwrap();
            let va = quad_form_oracle(&p, &q, &a);
            let vb = quad_form_oracle(&p, &q, &b);
            prop_assert!((va - vb).abs() <= 1e-9 * (1.0 + va.abs()));
            let m = mmd_squared(&p, &q, &b).unwrap();
            prop_assert!((m - va.max(0.0)).abs() <= 1e-10 * (1.0 + va.abs()));
        }

        #[test]
        fn one_dim_shortcut_matches_pairwise(p in signed(1, 6), q in signed(1, 6)) {
            let k = KernelSpec::energy(1.0, 1).unwrap();
            let fast = mmd_squared(&p, &q, &k).unwrap();
            let (slow, _) = signed_energy(&p, &q, &k.semimetric);
            prop_assert!((fast - slow.max(0.0)).abs() <= 1e-10);
        }

        #[test]
        fn triangle_inequality(p in signed(2, 4), q in signed(2, 4), r in signed(2, 4)) {
            let k = KernelSpec::energy(1.0, 2).unwrap();
            let pq = mmd(&p, &q, &k).unwrap();
            let qr = mmd(&q, &r, &k).unwrap();
            let pr = mmd(&p, &r, &k).unwrap();
            prop_assert!(pr <= pq + qr + 1e-9);
        }
    }
}
