//! Per-block effective properties of the multicontinuum expansion.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;

use crate::cell_problems::{BlockBasis, CellBasis};
use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, Coefficient, DofMap, Region, SparseMatrix};
use crate::field::CoefficientField;
use crate::grid::{oversample, BlockId, CoarsePartition, FineMesh};

/// Stiffness (with `κ`) and mass matrices on the closure nodes of a block, numbered
/// row-major like the cell basis vectors.
pub fn closure_matrices(
    mesh: &FineMesh,
    part: &CoarsePartition,
    field: &CoefficientField,
    block: BlockId,
) -> Result<(SparseMatrix, SparseMatrix)> {
    let region = oversample(part, block, 0)?;
    let dofs = DofMap::free(mesh, Region::Oversampled(&region));
    Ok((assemble_stiffness(&dofs, Coefficient::Field(field))?, assemble_mass(mesh, &dofs)?))
}

/// Effective properties of one coarse block, all normalized by `|K|`.
#[derive(Debug, Clone)]
pub struct EffectiveTensors {
    pub block: BlockId,
    /// `γ_ij = ∫ φ_j φ_i` (also the mass matrix `M`).
    pub gamma: DMatrix<f64>,
    /// `α_ij = ∫ κ ∇φ_j·∇φ_i` (also the reaction matrix `C`).
    pub alpha: DMatrix<f64>,
    /// `a[k][l][(m, n)] = A^{kl}_{mn} = ∫ κ ∇φ_k^m·∇φ_l^n`; `α_ij^{mn} = A^{ji}_{mn}`.
    pub a: Vec<Vec<Matrix2<f64>>>,
    /// `α_ij^{m*}[i][j][m] = ∫ κ ∇φ_j^m·∇φ_i`.
    pub alpha_m_star: Vec<Vec<[f64; 2]>>,
    /// `α_ij^{*m}[i][j][m] = ∫ κ ∇φ_j·∇φ_i^m`.
    pub alpha_star_m: Vec<Vec<[f64; 2]>>,
}

impl EffectiveTensors {
    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn reaction(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    /// `α_ij^{mn}`.
    pub fn alpha_mn(&self, i: usize, j: usize, m: usize, n: usize) -> f64 {
        self.a[j][i][(m, n)]
    }

    /// Largest `|A_{kmln} − A_{lnkm}|` relative to the largest entry.
    pub fn tensor_asymmetry(&self) -> f64 {
        let n = self.n();
        let scale = self.a.iter().flatten().map(|m| m.amax()).fold(f64::MIN_POSITIVE, f64::max);
        let mut worst = 0.0f64;
        for k in 0..n {
            for l in 0..n {
                worst = worst.max((self.a[k][l] - self.a[l][k].transpose()).amax());
            }
        }
        worst / scale
    }

    /// Largest `|α^{m*}|, |α^{*m}|` relative to `max |α^{mn}| / H`; the term dropped in
    /// the homogenized form is small when this ratio is.
    pub fn dropped_term_ratio(&self, coarse_h: f64) -> f64 {
        let cross = self
            .alpha_m_star
            .iter()
            .chain(&self.alpha_star_m)
            .flatten()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let main = self.a.iter().flatten().map(|m| m.amax()).fold(f64::MIN_POSITIVE, f64::max);
        cross / (main / coarse_h)
    }
}

/// Effective properties of `block` from its cell basis.
pub fn compute_effective(
    mesh: &FineMesh,
    part: &CoarsePartition,
    field: &CoefficientField,
    block: BlockId,
    basis: &BlockBasis,
) -> Result<EffectiveTensors> {
    part.check_block(block)?;
    let n = basis.phi.len();
    let nn = (part.cells_per_block() + 1).pow(2);
    if n == 0 || basis.phi.iter().chain(basis.phi_lin.iter().flatten()).any(|v| v.len() != nn) {
        return Err(Error::Config(format!("basis of block {block} does not match the partition")));
    }
    let (k, m) = closure_matrices(mesh, part, field, block)?;
    let vol = part.block_area();
    let kphi: Vec<Vec<f64>> = basis.phi.iter().map(|v| k.mul_vec(v)).collect();
    let klin: Vec<[Vec<f64>; 2]> = basis.phi_lin.iter().map(|p| [k.mul_vec(&p[0]), k.mul_vec(&p[1])]).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / vol;

    let gamma = DMatrix::from_fn(n, n, |i, j| m.bilinear(&basis.phi[i], &basis.phi[j]) / vol);
    let alpha = DMatrix::from_fn(n, n, |i, j| dot(&basis.phi[i], &kphi[j]));
    let a = (0..n)
        .map(|kk| {
            (0..n)
                .map(|l| Matrix2::from_fn(|mm, nn2| dot(&basis.phi_lin[kk][mm], &klin[l][nn2])))
                .collect()
        })
        .collect();
    let alpha_m_star = (0..n)
        .map(|i| (0..n).map(|j| [0, 1].map(|mm| dot(&klin[j][mm], &basis.phi[i]))).collect())
        .collect();
    let alpha_star_m = (0..n)
        .map(|i| (0..n).map(|j| [0, 1].map(|mm| dot(&kphi[j], &basis.phi_lin[i][mm]))).collect())
        .collect();
    let t = EffectiveTensors { block, gamma, alpha, a, alpha_m_star, alpha_star_m };
    let asym = t.tensor_asymmetry();
    if !(asym <= 1e-10) {
        return Err(Error::Invariant(format!("A tensor of block {block} is not symmetric ({asym:e})")));
    }
    Ok(t)
}

/// Effective properties of every block (in parallel over blocks).
pub fn compute_all(
    mesh: &FineMesh,
    part: &CoarsePartition,
    field: &CoefficientField,
    basis: &CellBasis,
) -> Result<Vec<EffectiveTensors>> {
    (0..part.num_blocks())
        .into_par_iter()
        .map(|b| compute_effective(mesh, part, field, b, &basis.blocks[b]))
        .collect()
}

/// Block average `f_j = ∫_K f φ_j / |K|` of a source at time `t`, using the Q1
/// interpolant of `f`.
pub fn load_average(
    mesh: &FineMesh,
    part: &CoarsePartition,
    block: BlockId,
    basis: &BlockBasis,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<f64>> {
    let region = oversample(part, block, 0)?;
    let dofs = DofMap::free(mesh, Region::Oversampled(&region));
    let m = assemble_mass(mesh, &dofs)?;
    let fh: Vec<f64> = (0..region.num_nodes())
        .map(|l| {
            let (i, j) = region.global_node(l);
            let (x, y) = mesh.node_coords(i, j);
            f(x, y)
        })
        .collect();
    let mf = m.mul_vec(&fh);
    Ok(basis
        .phi
        .iter()
        .map(|p| p.iter().zip(&mf).map(|(a, b)| a * b).sum::<f64>() / part.block_area())
        .collect())
}

/// Largest real eigenvalue of a 2×2 matrix; the common real part when the pair is complex.
pub fn max_eig2(a: &Matrix2<f64>) -> f64 {
    let tr = a.trace();
    let det = a.determinant();
    let disc = tr * tr / 4.0 - det;
    tr / 2.0 + disc.max(0.0).sqrt()
}

/// Rank-reduced tensor `Ã_kl = max eig(A^{kl})`, symmetrized after an asymmetry check.
pub fn reduce_tensor(a: &[Vec<Matrix2<f64>>]) -> Result<DMatrix<f64>> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(Error::Config("tensor blocks must form a square array".into()));
    }
    let raw = DMatrix::from_fn(n, n, |k, l| max_eig2(&a[k][l]));
    let scale = raw.amax().max(f64::MIN_POSITIVE);
    let asym = (&raw - raw.transpose()).amax() / scale;
    if !(asym <= 1e-10) {
        return Err(Error::Invariant(format!("reduced tensor is not symmetric ({asym:e})")));
    }
    Ok((&raw + raw.transpose()) * 0.5)
}

/// Entry-wise median of per-block tensors (an alternative to a single reference block).
pub fn median_tensors(all: &[EffectiveTensors]) -> Result<EffectiveTensors> {
    let first = all.first().ok_or_else(|| Error::Config("no blocks".into()))?;
    let n = first.n();
    let med = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let k = v.len();
        if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) }
    };
    let mat = |get: &dyn Fn(&EffectiveTensors, usize, usize) -> f64| {
        DMatrix::from_fn(n, n, |i, j| med(all.iter().map(|t| get(t, i, j)).collect()))
    };
    Ok(EffectiveTensors {
        block: first.block,
        gamma: mat(&|t, i, j| t.gamma[(i, j)]),
        alpha: mat(&|t, i, j| t.alpha[(i, j)]),
        a: (0..n)
            .map(|k| {
                (0..n)
                    .map(|l| Matrix2::from_fn(|m, q| med(all.iter().map(|t| t.a[k][l][(m, q)]).collect())))
                    .collect()
            })
            .collect(),
        alpha_m_star: (0..n)
            .map(|i| (0..n).map(|j| [0, 1].map(|m| med(all.iter().map(|t| t.alpha_m_star[i][j][m]).collect()))).collect())
            .collect(),
        alpha_star_m: (0..n)
            .map(|i| (0..n).map(|j| [0, 1].map(|m| med(all.iter().map(|t| t.alpha_star_m[i][j][m]).collect()))).collect())
            .collect(),
    })
}

/// CSV dump with one row per block per tensor entry:
/// `block,tensor,i,j,m,n,value` (`m`, `n` empty for matrix quantities).
pub fn tensors_csv(all: &[EffectiveTensors]) -> String {
    let mut s = String::from("block,tensor,i,j,m,n,value\n");
    for t in all {
        let n = t.n();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(s, "{},gamma,{},{},,,{:e}", t.block, i + 1, j + 1, t.gamma[(i, j)]);
                let _ = writeln!(s, "{},alpha,{},{},,,{:e}", t.block, i + 1, j + 1, t.alpha[(i, j)]);
                for m in 0..2 {
                    for q in 0..2 {
                        let _ = writeln!(s, "{},alpha_mn,{},{},{},{},{:e}", t.block, i + 1, j + 1, m + 1, q + 1, t.alpha_mn(i, j, m, q));
                    }
                    let _ = writeln!(s, "{},alpha_m_star,{},{},{},,{:e}", t.block, i + 1, j + 1, m + 1, t.alpha_m_star[i][j][m]);
                    let _ = writeln!(s, "{},alpha_star_m,{},{},{},,{:e}", t.block, i + 1, j + 1, m + 1, t.alpha_star_m[i][j][m]);
                }
            }
        }
    }
    s
}
