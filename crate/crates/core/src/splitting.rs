//! Decomposition of the multicontinuum space into implicit and explicit groups, the
//! strengthened Cauchy-Schwarz constant and explicit stability thresholds.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, Coefficient, DofMap, Region};
use crate::grid::{CoarsePartition, FineMesh};

/// Generalized symmetric eigenpairs `A v = λ M v`, ascending, `M`-orthonormal, with the
/// largest-magnitude component of each eigenvector made positive. Eigenvectors are columns.
pub fn gen_eig(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || m.nrows() != n || m.ncols() != n {
        return Err(Error::Config("gen_eig needs square matrices of equal size".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let ms = (m + m.transpose()) * 0.5;
    let chol = ms.cholesky().ok_or_else(|| Error::Singular("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::Singular("mass Cholesky factor".into()))?;
    let mut c = &linv * a * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let lt_inv = linv.transpose();
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        let mut v = &lt_inv * eig.eigenvectors.column(k);
        let big = v.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        if big < 0.0 {
            v = -v;
        }
        vecs.set_column(col, &v);
        vals.push(eig.eigenvalues[k]);
    }
    for (i, &lam) in vals.iter().enumerate() {
        let v = vecs.column(i);
        let av = a * v;
        let res = (&av - m * v * lam).norm();
        let scale = av.norm().max((m * v).norm() * lam.abs()).max(f64::MIN_POSITIVE);
        if !(res <= 1e-9 * scale) && res > 1e-12 {
            return Err(Error::Invariant(format!("generalized eigen residual {res:e} for pair {i}")));
        }
    }
    Ok((vals, vecs))
}

/// Number of small eigenvalues: the largest `i₀` whose gap `λ_{i₀+1}/λ_{i₀}` reaches
/// `threshold`, else the position of the largest gap, or 0 when no gap exceeds 1.
pub fn select_i0(lambda: &[f64], threshold: f64) -> usize {
    let ratio = |i: usize| {
        let (lo, hi) = (lambda[i], lambda[i + 1]);
        if lo > 0.0 {
            hi / lo
        } else if hi > lo {
            f64::INFINITY
        } else {
            1.0
        }
    };
    let n = lambda.len();
    if n < 2 {
        return 0;
    }
    if let Some(i) = (0..n - 1).rev().find(|&i| ratio(i) >= threshold) {
        return i + 1;
    }
    let (best, r) = (0..n - 1).map(|i| (i, ratio(i))).fold((0, 1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if r > 1.0 + 1e-12 {
        best + 1
    } else {
        0
    }
}

/// How the continua are split into explicit and implicit groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Original continua; the listed ones (0-based) are explicit.
    IndexPartition(Vec<usize>),
    /// Recombined continua from the generalized eigendecomposition of `(Ã, M)`.
    Eigendecomposition { threshold: f64 },
    /// Everything implicit.
    None,
}

/// Recombination and group sizes used by the coarse solver.
#[derive(Debug, Clone, Serialize)]
pub struct SplittingPlan {
    /// Number of explicit (leading) recombined continua.
    pub i0: usize,
    /// Row `i` holds `v_i`, so `φ̂_i = Σ_j v[(i, j)] φ_j`.
    #[serde(serialize_with = "ser_matrix")]
    pub v: DMatrix<f64>,
    /// Inverse of `v`.
    #[serde(serialize_with = "ser_matrix")]
    pub v_hat: DMatrix<f64>,
    /// Eigenvalues of `(Ã, M)` ascending (empty for index partitions).
    pub lambda: Vec<f64>,
    /// Block whose tensors defined the plan.
    pub block: usize,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        seq.serialize_element(&m.row(r).iter().copied().collect::<Vec<_>>())?;
    }
    seq.end()
}

impl SplittingPlan {
    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    /// Plan from the eigendecomposition of the reference block's `(Ã, M)`.
    pub fn from_eigen(a_tilde: &DMatrix<f64>, m: &DMatrix<f64>, threshold: f64, block: usize) -> Result<Self> {
        let (lambda, vecs) = gen_eig(a_tilde, m)?;
        let i0 = select_i0(&lambda, threshold);
        Self::from_rows(vecs.transpose(), i0, lambda, block)
    }

    /// Plan keeping the original continua, with `explicit` listing the explicit ones.
    /// The recombination then only reorders the continua (explicit first).
    pub fn index_partition(n: usize, explicit: &[usize], block: usize) -> Result<Self> {
        if explicit.iter().any(|&k| k >= n) {
            return Err(Error::Config(format!("explicit continuum index out of range 1..={n}")));
        }
        let mut order: Vec<usize> = explicit.to_vec();
        order.sort_unstable();
        order.dedup();
        let i0 = order.len();
        order.extend((0..n).filter(|k| !explicit.contains(k)));
        let v = DMatrix::from_fn(n, n, |i, j| if order[i] == j { 1.0 } else { 0.0 });
        Self::from_rows(v, i0, Vec::new(), block)
    }

    /// All continua implicit, no recombination.
    pub fn all_implicit(n: usize, block: usize) -> Self {
        Self { i0: 0, v: DMatrix::identity(n, n), v_hat: DMatrix::identity(n, n), lambda: Vec::new(), block }
    }

    fn from_rows(v: DMatrix<f64>, i0: usize, lambda: Vec<f64>, block: usize) -> Result<Self> {
        let n = v.nrows();
        let v_hat = v.clone().try_inverse().ok_or_else(|| Error::Singular("recombination matrix".into()))?;
        let err = (&v * &v_hat - DMatrix::<f64>::identity(n, n)).amax();
        if !(err <= 1e-9) {
            return Err(Error::Invariant(format!("recombination inverse error {err:e}")));
        }
        Ok(Self { i0, v, v_hat, lambda, block })
    }

    /// Original coarse variables `U_j = Σ_i v[(i, j)] Û_i` of recombined variables.
    pub fn to_original(&self, u_hat: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n).map(|j| (0..n).map(|i| self.v[(i, j)] * u_hat[i]).sum()).collect()
    }

    /// Largest `|v_iᵀ M v_j − δ_ij|`.
    pub fn orthonormality_error(&self, m: &DMatrix<f64>) -> f64 {
        let g = &self.v * m * self.v.transpose();
        (g - DMatrix::<f64>::identity(self.n(), self.n())).amax()
    }
}

/// Strengthened Cauchy-Schwarz constant of two subspaces with Gram blocks `M₁₁, M₁₂, M₂₂`:
/// the largest singular value of `L₁⁻¹ M₁₂ L₂⁻ᵀ`.
pub fn gamma_constant(m11: &DMatrix<f64>, m12: &DMatrix<f64>, m22: &DMatrix<f64>) -> Result<f64> {
    if m11.nrows() == 0 || m22.nrows() == 0 {
        return Ok(0.0);
    }
    let l1 = m11.clone().cholesky().ok_or_else(|| Error::Singular("M11 is not positive definite".into()))?;
    let l2 = m22.clone().cholesky().ok_or_else(|| Error::Singular("M22 is not positive definite".into()))?;
    // X = L₁⁻¹ M₁₂ L₂⁻ᵀ
    let y = l1.l().solve_lower_triangular(m12).ok_or_else(|| Error::Singular("M11 factor".into()))?;
    let x = l2
        .l()
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::Singular("M22 factor".into()))?
        .transpose();
    let g = x.singular_values().iter().copied().fold(0.0f64, f64::max);
    if g >= 1.0 {
        return Err(Error::Invariant(format!("γ = {g} ≥ 1: the two spaces are not independent")));
    }
    Ok(g)
}

/// Largest generalized eigenvalue of `(a, m)` for symmetric PSD `a` and SPD `m`.
pub fn max_gen_eig(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = m.clone().cholesky().ok_or_else(|| Error::Singular("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let y = l.solve_lower_triangular(a).ok_or_else(|| Error::Singular("mass factor".into()))?;
    let c = l
        .solve_lower_triangular(&y.transpose())
        .ok_or_else(|| Error::Singular("mass factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    Ok(c.symmetric_eigenvalues().iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Explicit time-step thresholds and their closed-form estimates.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub gamma: f64,
    /// `+∞` when the explicit group is empty or has no stiffness.
    pub tau_max1: f64,
    pub tau_max2: f64,
    /// `√2 C₁^{-1/2} λ_{i₀}^{-1/2} H` and its Scheme-2 analogue (NaN without a spectrum).
    pub estimate1: f64,
    pub estimate2: f64,
    pub c1: f64,
}

/// `τ_max = sqrt(2 (1 − γ²) / λ_max(M₂₂⁻¹ S))` for `S = A₂₂` and `S = A₂₂ + C₂₂`.
pub fn stability_bounds(
    m22: &DMatrix<f64>,
    a22: &DMatrix<f64>,
    c22: &DMatrix<f64>,
    gamma: f64,
) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Invariant(format!("γ = {gamma} outside [0, 1)")));
    }
    let tau = |s: &DMatrix<f64>| -> Result<f64> {
        let lmax = max_gen_eig(s, m22)?;
        Ok(if lmax > 0.0 { (2.0 * (1.0 - gamma * gamma) / lmax).sqrt() } else { f64::INFINITY })
    };
    if m22.nrows() == 0 {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    Ok((tau(a22)?, tau(&(a22 + c22))?))
}

/// Inverse-inequality constant `C₁ = H² λ_max(M_H⁻¹ (K_H + M_H))` of the coarse Q1 space
/// with zero boundary values.
pub fn inverse_constant(part: &CoarsePartition) -> Result<f64> {
    let coarse = FineMesh::new(part.n_blocks())?;
    let dofs = DofMap::dirichlet(&coarse, Region::All);
    let m = assemble_mass(&coarse, &dofs)?.to_dense();
    let k = assemble_stiffness(&dofs, Coefficient::Unit)?.to_dense();
    Ok(part.coarse_h().powi(2) * max_gen_eig(&(k + &m), &m)?)
}

/// Closed-form threshold estimates from the reference block's spectrum.
pub fn closed_form_estimates(
    plan: &SplittingPlan,
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
    c1: f64,
    coarse_h: f64,
) -> Result<(f64, f64)> {
    if plan.i0 == 0 || plan.lambda.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let lam = plan.lambda[plan.i0 - 1];
    let e1 = 2f64.sqrt() * (c1 * lam).powf(-0.5) * coarse_h;
    let v2 = plan.v.rows(0, plan.i0).into_owned();
    let m2 = &v2 * m * v2.transpose();
    let cc = &v2 * c * v2.transpose() * coarse_h.powi(2);
    let e2 = 2f64.sqrt() * (c1 * lam + max_gen_eig(&cc, &m2)?).powf(-0.5) * coarse_h;
    Ok((e1, e2))
}

/// Outcome of the brute-force tensor Rayleigh quotient search.
#[derive(Debug, Clone)]
pub struct RayleighResult {
    pub value: f64,
    /// Orthonormal basis (columns) of the minimizing subspace.
    pub subspace: DMatrix<f64>,
    /// `false` when the evaluation budget ran out before the refinement tolerance was met.
    pub converged: bool,
}

/// `max_w (Σ v_k v_l A^{kl} : w⊗w) / (vᵀMv |w|²)`.
pub fn tensor_quotient(a: &[Vec<Matrix2<f64>>], m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut s = Matrix2::zeros();
    for k in 0..n {
        for l in 0..n {
            s += a[k][l] * (v[k] * v[l]);
        }
    }
    let s = (s + s.transpose()) * 0.5;
    let vm = DVector::from_column_slice(v);
    let denom = (vm.transpose() * m * &vm)[(0, 0)];
    s.symmetric_eigenvalues().max() / denom
}

struct Budget {
    left: usize,
    exhausted: bool,
}

impl Budget {
    fn take(&mut self, k: usize) -> bool {
        if self.left < k {
            self.exhausted = true;
            return false;
        }
        self.left -= k;
        true
    }
}

/// Minimizes `f` over a box by a grid scan followed by a shrinking compass search.
/// Returns the best point and whether the step fell below `tol`.
fn box_search(
    f: &mut dyn FnMut(&[f64]) -> f64,
    lo: &[f64],
    hi: &[f64],
    grid: usize,
    tol: f64,
    budget: &mut Budget,
) -> (Vec<f64>, f64, bool) {
    let d = lo.len();
    let mut best = (lo.to_vec(), f64::INFINITY);
    let total = grid.pow(d as u32);
    for idx in 0..total {
        if !budget.take(1) {
            break;
        }
        let mut rem = idx;
        let p: Vec<f64> = (0..d)
            .map(|k| {
                let g = rem % grid;
                rem /= grid;
                lo[k] + (hi[k] - lo[k]) * (g as f64 + 0.5) / grid as f64
            })
            .collect();
        let val = f(&p);
        if val < best.1 {
            best = (p, val);
        }
    }
    let mut step: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / grid as f64).collect();
    loop {
        if step.iter().all(|&s| s < tol) {
            return (best.0, best.1, true);
        }
        let mut improved = false;
        for k in 0..d {
            for sgn in [-1.0, 1.0] {
                if !budget.take(1) {
                    return (best.0, best.1, false);
                }
                let mut p = best.0.clone();
                p[k] += sgn * step[k];
                let val = f(&p);
                if val < best.1 {
                    best = (p, val);
                    improved = true;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }
}

fn sphere_point(n: usize, p: &[f64]) -> Vec<f64> {
    match n {
        1 => vec![1.0],
        2 => vec![p[0].cos(), p[0].sin()],
        _ => vec![p[0].sin() * p[1].cos(), p[0].sin() * p[1].sin(), p[0].cos()],
    }
}

fn orthonormal_complement(normal: &[f64]) -> DMatrix<f64> {
    let n = DVector::from_column_slice(normal).normalize();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for e in 0..3 {
        let mut v = DVector::from_fn(3, |i, _| if i == e { 1.0 } else { 0.0 });
        v -= &n * n.dot(&v);
        for b in &basis {
            v -= b * b.dot(&v);
        }
        if v.norm() > 1e-8 && basis.len() < 2 {
            basis.push(v.normalize());
        }
    }
    DMatrix::from_columns(&basis)
}

/// `max_{v ∈ span(basis)} q(v)`.
fn max_over(a: &[Vec<Matrix2<f64>>], m: &DMatrix<f64>, basis: &DMatrix<f64>, budget: &mut Budget, ok: &mut bool) -> f64 {
    let k = basis.ncols();
    let n = basis.nrows();
    let eval = |c: &[f64]| {
        let v: Vec<f64> = (0..n).map(|r| (0..k).map(|j| basis[(r, j)] * c[j]).sum()).collect();
        tensor_quotient(a, m, &v)
    };
    if k == 1 {
        budget.take(1);
        return eval(&[1.0]);
    }
    let (lo, hi) = if k == 2 { (vec![0.0], vec![std::f64::consts::PI]) } else { (vec![0.0, 0.0], vec![std::f64::consts::PI; 2]) };
    let mut neg = |p: &[f64]| -eval(&sphere_point(k, p));
    let (_, val, conv) = box_search(&mut neg, &lo, &hi, if k == 2 { 64 } else { 24 }, 1e-9, budget);
    *ok &= conv;
    -val
}

/// Brute-force `min_{dim S = i} max_{v ∈ S} q(v)` for `N ≤ 3`, `d = 2`.
pub fn rayleigh_bruteforce_verify(
    a: &[Vec<Matrix2<f64>>],
    m: &DMatrix<f64>,
    i: usize,
    budget: usize,
) -> Result<RayleighResult> {
    let n = m.nrows();
    if !(1..=3).contains(&n) || a.len() != n || !(1..=n).contains(&i) {
        return Err(Error::Config(format!("tensor Rayleigh verifier needs 1 ≤ i ≤ N ≤ 3 (N={n}, i={i})")));
    }
    let mut b = Budget { left: budget, exhausted: false };
    let mut ok = true;
    if i == n {
        let id = DMatrix::identity(n, n);
        let value = max_over(a, m, &id, &mut b, &mut ok);
        return Ok(RayleighResult { value, subspace: id, converged: ok && !b.exhausted });
    }
    let pi = std::f64::consts::PI;
    let (best, value, conv) = if i == 1 {
        let (lo, hi) = if n == 2 { (vec![0.0], vec![pi]) } else { (vec![0.0, 0.0], vec![pi, pi]) };
        let mut f = |p: &[f64]| tensor_quotient(a, m, &sphere_point(n, p));
        box_search(&mut f, &lo, &hi, if n == 2 { 256 } else { 48 }, 1e-10, &mut b)
    } else {
        // N = 3, planes parameterized by their normal
        let mut inner = Budget { left: usize::MAX, exhausted: false };
        let mut f = |p: &[f64]| {
            let plane = orthonormal_complement(&sphere_point(3, p));
            max_over(a, m, &plane, &mut inner, &mut ok)
        };
        box_search(&mut f, &[0.0, 0.0], &[pi, pi], 16, 1e-7, &mut b)
    };
    let subspace = if i == 1 {
        DMatrix::from_column_slice(n, 1, &sphere_point(n, &best))
    } else {
        orthonormal_complement(&sphere_point(3, &best))
    };
    Ok(RayleighResult { value, subspace, converged: conv && ok && !b.exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_eig_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (l, _) = gen_eig(&m, &m).unwrap();
        assert!(l.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let (l, v) = gen_eig(&DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 2.0])), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(l.len(), 2);
        assert!((l[0] - 2.0).abs() < 1e-14 && (l[1] - 8.0).abs() < 1e-14);
        assert!((v[(1, 0)] - 1.0).abs() < 1e-14 && (v[(0, 1)] - 1.0).abs() < 1e-14);
        assert!(gen_eig(&m, &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn i0_selection() {
        assert_eq!(select_i0(&[3.95, 609.0], 10.0), 1);
        assert_eq!(select_i0(&[10.24, 20.31, 743.8], 10.0), 2);
        assert_eq!(select_i0(&[1.0, 1.0, 1.0], 10.0), 0);
        assert_eq!(select_i0(&[1.0, 3.0, 4.0], 10.0), 1);
    }

    #[test]
    fn gamma_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(gamma_constant(&one, &DMatrix::zeros(1, 1), &one).unwrap(), 0.0);
        let g = gamma_constant(&one, &DMatrix::from_element(1, 1, -0.3), &one).unwrap();
        assert!((g - 0.3).abs() < 1e-15);
        assert!(gamma_constant(&one, &one, &one).is_err());
    }

    #[test]
    fn stability_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let (t1, t2) = stability_bounds(&one, &DMatrix::from_element(1, 1, 4.0), &DMatrix::zeros(1, 1), 0.0).unwrap();
        assert!((t1 - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(t1, t2);
        let (t1, _) = stability_bounds(&one, &DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), 0.0).unwrap();
        assert!(t1.is_infinite());
        let (t1, t2) = stability_bounds(&one, &DMatrix::from_element(1, 1, 4.0), &DMatrix::from_element(1, 1, 1.0), 0.5).unwrap();
        assert!(t2 <= t1);
    }

    #[test]
    fn rayleigh_trivial_cases() {
        let a = vec![vec![Matrix2::new(3.0, 1.0, 1.0, 2.0)]];
        let m = DMatrix::from_element(1, 1, 2.0);
        let r = rayleigh_bruteforce_verify(&a, &m, 1, 1000).unwrap();
        let want = Matrix2::<f64>::new(3.0, 1.0, 1.0, 2.0).symmetric_eigenvalues().max() / 2.0;
        assert!((r.value - want).abs() < 1e-14);
        let id = Matrix2::identity();
        let z = Matrix2::zeros();
        let a = vec![vec![id, z], vec![z, id]];
        for i in 1..=2 {
            let r = rayleigh_bruteforce_verify(&a, &DMatrix::identity(2, 2), i, 100_000).unwrap();
            assert!((r.value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn index_partition_plan() {
        let p = SplittingPlan::index_partition(3, &[2], 0).unwrap();
        assert_eq!(p.i0, 1);
        assert_eq!(p.v[(0, 2)], 1.0);
        assert_eq!(p.to_original(&[5.0, 1.0, 2.0]), vec![1.0, 2.0, 5.0]);
    }
}
