//! Constrained energy-minimization cell problems on oversampled regions.
//!
//! Each region is solved by static condensation: every coarse block eliminates its
//! interior nodes together with its own constraint multipliers, which leaves an SPD
//! system on the block skeleton (the fine nodes on coarse edges). The per-block
//! elimination does not depend on the region, so it is computed once per block.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{SparseMatrix, SpdSolver, Q1_STIFFNESS};
use crate::field::{CoefficientField, IndicatorSet};
use crate::grid::{oversample, BlockId, CoarsePartition, FineMesh, OversampleRegion};

/// Boundary condition of the cell problems on ∂K⁺.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BcMode {
    /// Free on ∂K⁺, zero where ∂K⁺ touches ∂Ω.
    #[default]
    Natural,
    /// Zero on all of ∂K⁺.
    Dirichlet,
}

impl std::fmt::Display for BcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BcMode::Natural => "natural",
            BcMode::Dirichlet => "dirichlet",
        })
    }
}

/// Regions with more nodes than this are not solved by the dense fallback.
const DENSE_FALLBACK_LIMIT: usize = 4000;

/// ψ-weighted centroid `x̃_m = ∫_K x_m ψ_j / ∫_K ψ_j` of continuum `j` in `block`.
pub fn centroid_shift(
    mesh: &FineMesh,
    part: &CoarsePartition,
    indicators: &IndicatorSet,
    block: BlockId,
    j: usize,
    m: usize,
) -> Result<f64> {
    part.check_block(block)?;
    let (ri, rj) = part.cell_range(block);
    let (mut sum, mut count) = (0.0, 0usize);
    for cj in rj {
        for ci in ri.clone() {
            if indicators.contains(j, ci, cj) {
                let c = mesh.cell_center(ci, cj);
                sum += if m == 0 { c.0 } else { c.1 };
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("continuum {} has zero measure in block {block}", j + 1)));
    }
    Ok(sum / count as f64)
}

/// Local index of closure node `(a, b)` of a block with `c` cells per side.
#[inline]
fn closure_index(c: usize, a: usize, b: usize) -> usize {
    b * (c + 1) + a
}

/// Condensed data of one coarse block.
#[derive(Debug, Clone)]
struct BlockLocal {
    /// Closure indices of interior and edge nodes.
    interior: Vec<usize>,
    boundary: Vec<usize>,
    /// Constraint weights `w[j][node]` with `∫_K v ψ_j = Σ w v` for Q1 `v`.
    weights: Vec<Vec<f64>>,
    /// `∫_K ψ_j` and `∫_K x_m ψ_j`.
    int_psi: Vec<f64>,
    int_x_psi: Vec<[f64; 2]>,
    /// `None` when the interior constraint rows are rank deficient.
    cond: Option<Condensed>,
}

#[derive(Debug, Clone)]
struct Condensed {
    /// `u_I = w_u g − z_u u_Γ`.
    z_u: DMatrix<f64>,
    w_u: DMatrix<f64>,
    /// Multiplier rows of the condensation operator; the load on the skeleton is `−z_λᵀ g`.
    z_lambda: DMatrix<f64>,
    /// Block Schur complement on the edge nodes.
    schur: DMatrix<f64>,
}

struct Context<'a> {
    mesh: &'a FineMesh,
    part: &'a CoarsePartition,
    field: &'a CoefficientField,
    n_cont: usize,
    bc: BcMode,
    locals: Vec<BlockLocal>,
}

fn block_local(
    mesh: &FineMesh,
    part: &CoarsePartition,
    field: &CoefficientField,
    indicators: &IndicatorSet,
    block: BlockId,
) -> Result<BlockLocal> {
    let c = part.cells_per_block();
    let nc = indicators.num_continua();
    let (ri, rj) = part.cell_range(block);
    let (i0, j0) = (ri.start, rj.start);
    let h2 = mesh.h() * mesh.h();
    let nn = (c + 1) * (c + 1);

    let mut interior = Vec::new();
    let mut boundary = Vec::new();
    // position of each closure node in its group
    let mut pos = vec![(false, 0usize); nn];
    for b in 0..=c {
        for a in 0..=c {
            let k = closure_index(c, a, b);
            if a == 0 || b == 0 || a == c || b == c {
                pos[k] = (false, boundary.len());
                boundary.push(k);
            } else {
                pos[k] = (true, interior.len());
                interior.push(k);
            }
        }
    }

    let mut weights = vec![vec![0.0; nn]; nc];
    let mut int_psi = vec![0.0; nc];
    let mut int_x_psi = vec![[0.0; 2]; nc];
    let (ni, ng) = (interior.len(), boundary.len());
    let mut a_ii = Vec::new();
    let mut a_ig = DMatrix::<f64>::zeros(ni, ng);
    let mut a_gg = DMatrix::<f64>::zeros(ng, ng);
    for b in 0..c {
        for a in 0..c {
            let (gi, gj) = (i0 + a, j0 + b);
            let corners = [
                closure_index(c, a, b),
                closure_index(c, a + 1, b),
                closure_index(c, a + 1, b + 1),
                closure_index(c, a, b + 1),
            ];
            let kappa = field.at(gi, gj);
            for (p, &rp) in corners.iter().enumerate() {
                for (q, &rq) in corners.iter().enumerate() {
                    let v = kappa * Q1_STIFFNESS[p][q];
                    match (pos[rp], pos[rq]) {
                        ((true, x), (true, y)) => a_ii.push((x, y, v)),
                        ((true, x), (false, y)) => a_ig[(x, y)] += v,
                        ((false, x), (false, y)) => a_gg[(x, y)] += v,
                        ((false, _), (true, _)) => {}
                    }
                }
            }
            let (cx, cy) = mesh.cell_center(gi, gj);
            for j in 0..nc {
                if indicators.contains(j, gi, gj) {
                    for &k in &corners {
                        weights[j][k] += h2 / 4.0;
                    }
                    int_psi[j] += h2;
                    int_x_psi[j][0] += h2 * cx;
                    int_x_psi[j][1] += h2 * cy;
                }
            }
        }
    }
    for j in 0..nc {
        if int_psi[j] == 0.0 {
            return Err(Error::Degenerate(format!("continuum {} is empty in block {block}", j + 1)));
        }
    }
    let cond = if ni == 0 {
        None
    } else {
        condense(&interior, &boundary, a_ii, &a_ig, &a_gg, &weights)?
    };
    Ok(BlockLocal { interior, boundary, weights, int_psi, int_x_psi, cond })
}

fn condense(
    interior: &[usize],
    boundary: &[usize],
    a_ii: Vec<(usize, usize, f64)>,
    a_ig: &DMatrix<f64>,
    a_gg: &DMatrix<f64>,
    weights: &[Vec<f64>],
) -> Result<Option<Condensed>> {
    let (ni, ng, nc) = (interior.len(), boundary.len(), weights.len());
    let b_i = DMatrix::from_fn(nc, ni, |j, k| weights[j][interior[k]]);
    let b_g = DMatrix::from_fn(nc, ng, |j, k| weights[j][boundary[k]]);

    let solver = SpdSolver::factor(&SparseMatrix::from_triplets(ni, a_ii))?;
    // Y = A_II⁻¹ [A_IΓ | B_Iᵀ]
    let mut y = DMatrix::<f64>::zeros(ni, ng + nc);
    y.columns_mut(0, ng).copy_from(a_ig);
    y.columns_mut(ng, nc).copy_from(&b_i.transpose());
    solver.solve_in_place(y.as_mut_slice());
    let y_g = y.columns(0, ng).into_owned();
    let y_b = y.columns(ng, nc).into_owned();

    let mut s_i = &b_i * &y_b;
    s_i = (&s_i + s_i.transpose()) * 0.5;
    let eig = s_i.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 1e-10 * hi) {
        return Ok(None);
    }
    let s_inv = s_i
        .cholesky()
        .ok_or_else(|| Error::Singular("interior constraint Gram matrix".into()))?
        .inverse();

    let z_lambda = &s_inv * (&b_i * &y_g - &b_g);
    let z_u = &y_g - &y_b * &z_lambda;
    let w_u = &y_b * &s_inv;
    let mut schur = a_gg - a_ig.transpose() * &z_u - b_g.transpose() * &z_lambda;
    schur = (&schur + schur.transpose()) * 0.5;
    Ok(Some(Condensed { z_u, w_u, z_lambda, schur }))
}

/// Solver for the cell problems of one coefficient field and continuum set.
pub struct CellSolver<'a> {
    ctx: Context<'a>,
}

impl<'a> CellSolver<'a> {
    /// Precomputes the condensed block data of every coarse block.
    pub fn new(
        mesh: &'a FineMesh,
        part: &'a CoarsePartition,
        field: &'a CoefficientField,
        indicators: &'a IndicatorSet,
        bc: BcMode,
    ) -> Result<Self> {
        if field.n() != mesh.n() {
            return Err(Error::Config("field and mesh resolutions differ".into()));
        }
        let locals = (0..part.num_blocks())
            .into_par_iter()
            .map(|b| block_local(mesh, part, field, indicators, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ctx: Context { mesh, part, field, n_cont: indicators.num_continua(), bc, locals },
        })
    }

    pub fn num_continua(&self) -> usize {
        self.ctx.n_cont
    }

    pub fn bc(&self) -> BcMode {
        self.ctx.bc
    }

    /// `∫_{K^p} v ψ_j` of a closure vector of `block`.
    pub fn block_moment(&self, block: BlockId, closure: &[f64], j: usize) -> f64 {
        self.ctx.locals[block].weights[j].iter().zip(closure).map(|(w, v)| w * v).sum()
    }

    /// `∫_{K^p} ψ_j`.
    pub fn psi_measure(&self, block: BlockId, j: usize) -> f64 {
        self.ctx.locals[block].int_psi[j]
    }

    fn is_dirichlet(&self, region: &OversampleRegion, i: usize, j: usize) -> bool {
        match self.ctx.bc {
            BcMode::Natural => self.ctx.mesh.is_boundary_node(i, j),
            BcMode::Dirichlet => {
                let local = region.local_node(i, j).expect("node in region");
                region.on_region_boundary(local) || self.ctx.mesh.is_boundary_node(i, j)
            }
        }
    }

    /// Constraint targets of the constant-type problems: `targets[i][p][j] = δ_ij ∫_{K^p} ψ_j`.
    pub fn constant_targets(&self, region: &OversampleRegion) -> Vec<Vec<Vec<f64>>> {
        let n = self.ctx.n_cont;
        (0..n)
            .map(|i| {
                region
                    .members()
                    .iter()
                    .map(|&p| (0..n).map(|j| if i == j { self.ctx.locals[p].int_psi[j] } else { 0.0 }).collect())
                    .collect()
            })
            .collect()
    }

    /// Shift constants `x̃[i][m]` on the region's centre block.
    pub fn shifts(&self, region: &OversampleRegion) -> Vec<[f64; 2]> {
        let l = &self.ctx.locals[region.center];
        (0..self.ctx.n_cont)
            .map(|i| [l.int_x_psi[i][0] / l.int_psi[i], l.int_x_psi[i][1] / l.int_psi[i]])
            .collect()
    }

    /// Constraint targets of the linear-type problems, ordered `(i, m)` with `m` fastest:
    /// `targets[2i+m][p][j] = δ_ij ∫_{K^p} (x_m − x̃_m) ψ_j`.
    pub fn linear_targets(&self, region: &OversampleRegion) -> Vec<Vec<Vec<f64>>> {
        let n = self.ctx.n_cont;
        let shift = self.shifts(region);
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            for m in 0..2 {
                out.push(
                    region
                        .members()
                        .iter()
                        .map(|&p| {
                            let l = &self.ctx.locals[p];
                            (0..n)
                                .map(|j| if i == j { l.int_x_psi[j][m] - shift[i][m] * l.int_psi[j] } else { 0.0 })
                                .collect()
                        })
                        .collect(),
                );
            }
        }
        out
    }

    /// Solves the cell problem on `region` for several sets of constraint targets
    /// (indexed `[rhs][member block][continuum]`, members in `region.members()` order)
    /// and returns the minimizers restricted to the closures of the blocks in `keep`.
    pub fn solve(
        &self,
        region: &OversampleRegion,
        targets: &[Vec<Vec<f64>>],
        keep: &[BlockId],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let members = region.members();
        for t in targets {
            if t.len() != members.len() || t.iter().any(|g| g.len() != self.ctx.n_cont) {
                return Err(Error::Config("constraint targets do not match the region".into()));
            }
        }
        if members.iter().any(|&p| self.ctx.locals[p].cond.is_none()) {
            return self.solve_dense(region, targets, keep);
        }
        let c = self.ctx.part.cells_per_block();
        let (ri0, rj0) = region.cell_origin();
        let nreg = region.num_nodes();

        // skeleton numbering over region nodes
        let mut skel = vec![usize::MAX; nreg];
        let mut nskel = 0;
        for local in 0..nreg {
            let (gi, gj) = region.global_node(local);
            let (a, b) = (gi - ri0, gj - rj0);
            if (a % c == 0 || b % c == 0) && !self.is_dirichlet(region, gi, gj) {
                skel[local] = nskel;
                nskel += 1;
            }
        }
        let edge_dofs = |p: BlockId| -> Vec<usize> {
            let (ri, rj) = self.ctx.part.cell_range(p);
            self.ctx.locals[p]
                .boundary
                .iter()
                .map(|&k| {
                    let (a, b) = (k % (c + 1), k / (c + 1));
                    skel[region.local_node(ri.start + a, rj.start + b).expect("member node")]
                })
                .collect()
        };
        let member_dofs: Vec<Vec<usize>> = members.iter().map(|&p| edge_dofs(p)).collect();

        let nrhs = targets.len();
        let mut u = vec![0.0; nskel * nrhs];
        if nskel > 0 {
            let mut trip = Vec::new();
            for (mi, &p) in members.iter().enumerate() {
                let s = &self.ctx.locals[p].cond.as_ref().unwrap().schur;
                let dofs = &member_dofs[mi];
                for (x, &dx) in dofs.iter().enumerate() {
                    if dx == usize::MAX {
                        continue;
                    }
                    for (y, &dy) in dofs.iter().enumerate() {
                        if dy != usize::MAX {
                            trip.push((dx, dy, s[(x, y)]));
                        }
                    }
                }
            }
            let solver = SpdSolver::factor(&SparseMatrix::from_triplets(nskel, trip))?;
            for (r, t) in targets.iter().enumerate() {
                let col = &mut u[r * nskel..(r + 1) * nskel];
                for (mi, &p) in members.iter().enumerate() {
                    let zl = &self.ctx.locals[p].cond.as_ref().unwrap().z_lambda;
                    let g = DVector::from_column_slice(&t[mi]);
                    let load = zl.tr_mul(&g);
                    for (x, &dx) in member_dofs[mi].iter().enumerate() {
                        if dx != usize::MAX {
                            col[dx] -= load[x];
                        }
                    }
                }
            }
            solver.solve_in_place(&mut u);
        }

        let mut out = Vec::with_capacity(keep.len());
        for &p in keep {
            let mi = members
                .iter()
                .position(|&q| q == p)
                .ok_or_else(|| Error::Config(format!("block {p} is not in the region")))?;
            let l = &self.ctx.locals[p];
            let cd = l.cond.as_ref().unwrap();
            let dofs = &member_dofs[mi];
            let mut per_rhs = Vec::with_capacity(nrhs);
            for (r, t) in targets.iter().enumerate() {
                let ug = DVector::from_iterator(
                    dofs.len(),
                    dofs.iter().map(|&d| if d == usize::MAX { 0.0 } else { u[r * nskel + d] }),
                );
                let ui = &cd.w_u * DVector::from_column_slice(&t[mi]) - &cd.z_u * &ug;
                let mut closure = vec![0.0; (c + 1) * (c + 1)];
                for (x, &k) in l.boundary.iter().enumerate() {
                    closure[k] = ug[x];
                }
                for (x, &k) in l.interior.iter().enumerate() {
                    closure[k] = ui[x];
                }
                per_rhs.push(closure);
            }
            out.push(per_rhs);
        }
        Ok(out)
    }

    /// Full saddle-point solve for regions whose blocks cannot be condensed.
    fn solve_dense(
        &self,
        region: &OversampleRegion,
        targets: &[Vec<Vec<f64>>],
        keep: &[BlockId],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let nreg = region.num_nodes();
        if nreg > DENSE_FALLBACK_LIMIT {
            return Err(Error::Degenerate(format!(
                "constraints of region around block {} are rank deficient on block interiors",
                region.center
            )));
        }
        let members = region.members();
        let nc = self.ctx.n_cont;
        let c = self.ctx.part.cells_per_block();
        let mut dof = vec![usize::MAX; nreg];
        let mut n = 0;
        for (local, d) in dof.iter_mut().enumerate() {
            let (gi, gj) = region.global_node(local);
            if !self.is_dirichlet(region, gi, gj) {
                *d = n;
                n += 1;
            }
        }
        let nb = members.len() * nc;
        let mut k = DMatrix::<f64>::zeros(n + nb, n + nb);
        let (ci0, cj0) = region.cell_origin();
        for cj in cj0..cj0 + region.cells_y() {
            for ci in ci0..ci0 + region.cells_x() {
                let kappa = self.ctx.field.at(ci, cj);
                let nodes = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
                    .map(|(i, j)| dof[region.local_node(i, j).unwrap()]);
                for p in 0..4 {
                    for q in 0..4 {
                        if nodes[p] != usize::MAX && nodes[q] != usize::MAX {
                            k[(nodes[p], nodes[q])] += kappa * Q1_STIFFNESS[p][q];
                        }
                    }
                }
            }
        }
        for (mi, &p) in members.iter().enumerate() {
            let (ri, rj) = self.ctx.part.cell_range(p);
            let l = &self.ctx.locals[p];
            for j in 0..nc {
                let row = n + mi * nc + j;
                for (idx, &w) in l.weights[j].iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let (a, b) = (idx % (c + 1), idx / (c + 1));
                    let d = dof[region.local_node(ri.start + a, rj.start + b).unwrap()];
                    if d != usize::MAX {
                        k[(row, d)] += w;
                        k[(d, row)] += w;
                    }
                }
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(n + nb, targets.len());
        for (r, t) in targets.iter().enumerate() {
            for mi in 0..members.len() {
                for j in 0..nc {
                    rhs[(n + mi * nc + j, r)] = t[mi][j];
                }
            }
        }
        let lu = k.lu();
        let x = lu.solve(&rhs).ok_or_else(|| {
            Error::Degenerate(format!("cell problem around block {} has rank-deficient constraints", region.center))
        })?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "cell problem around block {} has rank-deficient constraints",
                region.center
            )));
        }
        let mut out = Vec::with_capacity(keep.len());
        for &p in keep {
            if !members.contains(&p) {
                return Err(Error::Config(format!("block {p} is not in the region")));
            }
            let (ri, rj) = self.ctx.part.cell_range(p);
            let mut per_rhs = Vec::with_capacity(targets.len());
            for r in 0..targets.len() {
                let mut closure = vec![0.0; (c + 1) * (c + 1)];
                for b in 0..=c {
                    for a in 0..=c {
                        let d = dof[region.local_node(ri.start + a, rj.start + b).unwrap()];
                        if d != usize::MAX {
                            closure[closure_index(c, a, b)] = x[(d, r)];
                        }
                    }
                }
                per_rhs.push(closure);
            }
            out.push(per_rhs);
        }
        Ok(out)
    }

    /// Constant- and linear-type basis of `block`, restricted to its closure.
    pub fn block_basis(&self, block: BlockId, layers: usize) -> Result<BlockBasis> {
        let region = oversample(self.ctx.part, block, layers)?;
        let mut targets = self.constant_targets(&region);
        targets.extend(self.linear_targets(&region));
        let mut sol = self.solve(&region, &targets, &[block])?.pop().unwrap();
        let n = self.ctx.n_cont;
        let lin_flat = sol.split_off(n);
        let mut lin = Vec::with_capacity(n);
        let mut it = lin_flat.into_iter();
        for _ in 0..n {
            lin.push([it.next().unwrap(), it.next().unwrap()]);
        }
        Ok(BlockBasis { phi: sol, phi_lin: lin, shift: self.shifts(&region) })
    }
}

/// Minimizers of the constant-type cell problems on the closures of `keep`.
pub fn solve_cell_constant(
    solver: &CellSolver<'_>,
    region: &OversampleRegion,
    keep: &[BlockId],
) -> Result<Vec<Vec<Vec<f64>>>> {
    solver.solve(region, &solver.constant_targets(region), keep)
}

/// Minimizers of the linear-type cell problems on the closures of `keep`; the inner
/// index is `2 i + m`.
pub fn solve_cell_linear(
    solver: &CellSolver<'_>,
    region: &OversampleRegion,
    keep: &[BlockId],
) -> Result<Vec<Vec<Vec<f64>>>> {
    solver.solve(region, &solver.linear_targets(region), keep)
}

/// Multiscale basis of one coarse block, as closure vectors (`(c+1)²` nodes, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockBasis {
    pub phi: Vec<Vec<f64>>,
    pub phi_lin: Vec<[Vec<f64>; 2]>,
    pub shift: Vec<[f64; 2]>,
}

/// Multiscale basis of every coarse block.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBasis {
    pub n_continua: usize,
    pub cells_per_block: usize,
    pub layers: usize,
    pub bc: BcMode,
    pub blocks: Vec<BlockBasis>,
}

impl CellBasis {
    /// Solves the cell problems of every block (in parallel over blocks).
    pub fn compute(solver: &CellSolver<'_>, layers: usize) -> Result<Self> {
        let part = solver.ctx.part;
        let blocks = (0..part.num_blocks())
            .into_par_iter()
            .map(|b| solver.block_basis(b, layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_continua: solver.num_continua(),
            cells_per_block: part.cells_per_block(),
            layers,
            bc: solver.bc(),
            blocks,
        })
    }

    /// Basis with `φ̂_i = Σ_j v[i][j] φ_j` (same for the linear-type functions).
    pub fn recombine(&self, v: &DMatrix<f64>) -> Result<Self> {
        let n = self.n_continua;
        if v.nrows() != n || v.ncols() != n {
            return Err(Error::Config(format!("recombination matrix must be {n}x{n}")));
        }
        let combine = |src: Vec<&Vec<f64>>, i: usize| -> Vec<f64> {
            let mut out = vec![0.0; src[0].len()];
            for (j, s) in src.iter().enumerate() {
                let c = v[(i, j)];
                if c != 0.0 {
                    out.iter_mut().zip(s.iter()).for_each(|(o, s)| *o += c * s);
                }
            }
            out
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockBasis {
                phi: (0..n).map(|i| combine(b.phi.iter().collect(), i)).collect(),
                phi_lin: (0..n)
                    .map(|i| {
                        [0, 1].map(|m| combine(b.phi_lin.iter().map(|l| &l[m]).collect(), i))
                    })
                    .collect(),
                shift: b.shift.clone(),
            })
            .collect();
        Ok(Self { blocks, ..self.clone() })
    }

    /// Writes the basis to a binary cache file tagged with `key`.
    pub fn save_cache(&self, path: impl AsRef<Path>, key: &CacheKey) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        for v in key.words() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.n_continua, self.cells_per_block, self.blocks.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for b in &self.blocks {
            let arrays = b.phi.iter().chain(b.phi_lin.iter().flatten());
            for x in arrays.flatten().chain(b.shift.iter().flatten()) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Reads a cache written by [`CellBasis::save_cache`]; returns `None` if the key differs.
    pub fn load_cache(path: impl AsRef<Path>, key: &CacheKey) -> Result<Option<Self>> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = || Error::Config(format!("{} is not a valid basis cache", path.display()));
        if buf.len() < CACHE_MAGIC.len() || &buf[..CACHE_MAGIC.len()] != CACHE_MAGIC {
            return Err(bad());
        }
        let mut off = CACHE_MAGIC.len();
        let mut word = || -> Result<u64> {
            let b = buf.get(off..off + 8).ok_or_else(bad)?;
            off += 8;
            Ok(u64::from_le_bytes(b.try_into().unwrap()))
        };
        for expected in key.words() {
            if word()? != expected {
                return Ok(None);
            }
        }
        let (n, c, nblocks) = (word()? as usize, word()? as usize, word()? as usize);
        let nn = (c + 1) * (c + 1);
        let mut floats = Vec::new();
        let rest = &buf[CACHE_MAGIC.len() + 8 * (key.words().len() + 3)..];
        if rest.len() != 8 * nblocks * (3 * n * nn + 2 * n) {
            return Err(bad());
        }
        floats.extend(rest.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())));
        let mut it = floats.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let blocks = (0..nblocks)
            .map(|_| {
                let phi = (0..n).map(|_| take(nn)).collect();
                let phi_lin = (0..n).map(|_| [take(nn), take(nn)]).collect();
                let shift = (0..n).map(|_| { let s = take(2); [s[0], s[1]] }).collect();
                BlockBasis { phi, phi_lin, shift }
            })
            .collect();
        Ok(Some(Self {
            n_continua: n,
            cells_per_block: c,
            layers: key.layers as usize,
            bc: key.bc,
            blocks,
        }))
    }
}

const CACHE_MAGIC: &[u8; 8] = b"MCCBAS01";

/// Identity of a cached basis: field fingerprint, resolutions, layers and boundary mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub field_hash: u64,
    pub indicator_hash: u64,
    pub nx: u64,
    pub n_blocks: u64,
    pub layers: u64,
    pub bc: BcMode,
}

impl CacheKey {
    fn words(&self) -> [u64; 6] {
        [
            self.field_hash,
            self.indicator_hash,
            self.nx,
            self.n_blocks,
            self.layers,
            matches!(self.bc, BcMode::Dirichlet) as u64,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::layered_field;
    use crate::grid::build_meshes;

    #[test]
    fn centroid_of_full_and_half_blocks() {
        let (mesh, part) = build_meshes(16, 4).unwrap();
        let ind = IndicatorSet::single(&mesh);
        let b = part.block_id(1, 2);
        assert!((centroid_shift(&mesh, &part, &ind, b, 0, 0).unwrap() - 0.375).abs() < 1e-15);
        assert!((centroid_shift(&mesh, &part, &ind, b, 0, 1).unwrap() - 0.625).abs() < 1e-15);
        let left: Vec<bool> = (0..mesh.num_cells()).map(|k| (k % 16) % 4 < 2).collect();
        let right: Vec<bool> = left.iter().map(|v| !v).collect();
        let ind = IndicatorSet::from_masks(&mesh, &part, vec![left, right]).unwrap();
        assert!((centroid_shift(&mesh, &part, &ind, b, 0, 0).unwrap() - 0.3125).abs() < 1e-15);
    }

    #[test]
    fn uniform_single_continuum_gives_constant() {
        let (mesh, part) = build_meshes(24, 4).unwrap();
        let field = CoefficientField::uniform(&mesh, 1.0).unwrap();
        let ind = IndicatorSet::single(&mesh);
        let s = CellSolver::new(&mesh, &part, &field, &ind, BcMode::Natural).unwrap();
        // interior block whose region does not touch the domain boundary
        let region = oversample(&part, part.block_id(1, 1), 0).unwrap();
        let phi = solve_cell_constant(&s, &region, &[region.center]).unwrap();
        assert!(phi[0][0].iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn constraints_hold_on_every_member() {
        let (mesh, part) = build_meshes(24, 4).unwrap();
        let field = layered_field(&mesh, 12, &[1.0, 1000.0]).unwrap();
        let ind = crate::field::indicators_from_values(
            &field,
            &mesh,
            &part,
            &[crate::field::ValueClass::exact(1.0), crate::field::ValueClass::exact(1000.0)],
            None,
        )
        .unwrap();
        for bc in [BcMode::Natural, BcMode::Dirichlet] {
            let s = CellSolver::new(&mesh, &part, &field, &ind, bc).unwrap();
            let region = oversample(&part, part.block_id(1, 2), 1).unwrap();
            let members = region.members();
            let targets = s.constant_targets(&region);
            let sol = s.solve(&region, &targets, &members).unwrap();
            for (mi, &p) in members.iter().enumerate() {
                for i in 0..2 {
                    for j in 0..2 {
                        let got = s.block_moment(p, &sol[mi][i], j);
                        let want = targets[i][mi][j];
                        assert!((got - want).abs() <= 1e-9 * s.psi_measure(p, j), "{bc} p={p} i={i} j={j}");
                    }
                }
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let (mesh, part) = build_meshes(12, 3).unwrap();
        let field = CoefficientField::uniform(&mesh, 2.0).unwrap();
        let ind = IndicatorSet::single(&mesh);
        let s = CellSolver::new(&mesh, &part, &field, &ind, BcMode::Natural).unwrap();
        let basis = CellBasis::compute(&s, 1).unwrap();
        let key = CacheKey { field_hash: field.fingerprint(), indicator_hash: 0, nx: 12, n_blocks: 3, layers: 1, bc: BcMode::Natural };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.bin");
        basis.save_cache(&path, &key).unwrap();
        assert_eq!(CellBasis::load_cache(&path, &key).unwrap(), Some(basis));
        let other = CacheKey { layers: 2, ..key };
        assert_eq!(CellBasis::load_cache(&path, &other).unwrap(), None);
    }

    #[test]
    fn identity_recombination_is_noop() {
        let (mesh, part) = build_meshes(12, 3).unwrap();
        let field = layered_field(&mesh, 6, &[1.0, 50.0]).unwrap();
        let ind = crate::field::indicators_from_values(
            &field,
            &mesh,
            &part,
            &[crate::field::ValueClass::exact(1.0), crate::field::ValueClass::exact(50.0)],
            None,
        )
        .unwrap();
        let s = CellSolver::new(&mesh, &part, &field, &ind, BcMode::Natural).unwrap();
        let basis = CellBasis::compute(&s, 1).unwrap();
        assert_eq!(basis.recombine(&DMatrix::identity(2, 2)).unwrap(), basis);
    }
}
