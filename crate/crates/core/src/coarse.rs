//! Downscaled coarse basis, split block forms and three-layer time steppers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cell_problems::{BlockBasis, CellBasis};
use crate::effective::closure_matrices;
use crate::error::{Error, Result};
use crate::fem::SparseMatrix;
use crate::field::CoefficientField;
use crate::grid::{BlockId, CoarsePartition, FineMesh};

/// Numbering of coarse unknowns: interior coarse nodes times continua, implicit group
/// (continua `i0..N`) first, then the explicit group (continua `0..i0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarseDofs {
    pub n_blocks: usize,
    pub n_continua: usize,
    pub i0: usize,
}

impl CoarseDofs {
    /// Interior coarse nodes.
    pub fn num_nodes(&self) -> usize {
        (self.n_blocks - 1).pow(2)
    }

    pub fn n_implicit(&self) -> usize {
        (self.n_continua - self.i0) * self.num_nodes()
    }

    pub fn n_explicit(&self) -> usize {
        self.i0 * self.num_nodes()
    }

    pub fn len(&self) -> usize {
        self.n_continua * self.num_nodes()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Interior node id of coarse grid point `(I, J)`, `None` on the boundary.
    pub fn node(&self, ci: usize, cj: usize) -> Option<usize> {
        let nb = self.n_blocks;
        if ci == 0 || cj == 0 || ci >= nb || cj >= nb {
            return None;
        }
        Some((cj - 1) * (nb - 1) + (ci - 1))
    }

    /// Coarse grid point of an interior node id.
    pub fn node_point(&self, node: usize) -> (usize, usize) {
        (node % (self.n_blocks - 1) + 1, node / (self.n_blocks - 1) + 1)
    }

    pub fn index(&self, node: usize, k: usize) -> usize {
        let nn = self.num_nodes();
        if k >= self.i0 {
            (k - self.i0) * nn + node
        } else {
            self.n_implicit() + k * nn + node
        }
    }

    /// Unknowns of block `block`'s corners (BL, BR, TR, TL) for continuum `k`.
    fn corner_dofs(&self, block: BlockId, k: usize) -> [Option<usize>; 4] {
        let (bx, by) = (block % self.n_blocks, block / self.n_blocks);
        [(bx, by), (bx + 1, by), (bx + 1, by + 1), (bx, by + 1)].map(|(i, j)| self.node(i, j).map(|n| self.index(n, k)))
    }

    /// Per-continuum nodal values `[k][node]` of a coarse vector.
    pub fn split(&self, u: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_continua)
            .map(|k| (0..self.num_nodes()).map(|n| u[self.index(n, k)]).collect())
            .collect()
    }

    /// Inverse of [`CoarseDofs::split`].
    pub fn join(&self, per: &[Vec<f64>]) -> Vec<f64> {
        let mut u = vec![0.0; self.len()];
        for (k, vals) in per.iter().enumerate() {
            for (n, v) in vals.iter().enumerate() {
                u[self.index(n, k)] = *v;
            }
        }
        u
    }
}

/// Coarse Q1 hat function of corner `corner` of a block of side `hc` and its gradient,
/// at offset `(s, t)` in `[0, 1]²` from the block's lower-left corner.
fn hat(corner: usize, s: f64, t: f64, hc: f64) -> (f64, [f64; 2]) {
    match corner {
        0 => ((1.0 - s) * (1.0 - t), [-(1.0 - t) / hc, -(1.0 - s) / hc]),
        1 => (s * (1.0 - t), [(1.0 - t) / hc, -s / hc]),
        2 => (s * t, [t / hc, s / hc]),
        _ => ((1.0 - s) * t, [-t / hc, (1.0 - s) / hc]),
    }
}

/// Fine-grid realization of the downscaling operator on every block: for corner `c`
/// and continuum `k`, `t0 = φ_k χ_c` and `t1 = Σ_m φ_k^m ∂_m χ_c` as closure vectors.
#[derive(Debug, Clone)]
pub struct DownscaledBasis {
    pub cells_per_block: usize,
    pub n_continua: usize,
    /// `t0[block][c * N + k]`.
    pub t0: Vec<Vec<Vec<f64>>>,
    pub t1: Vec<Vec<Vec<f64>>>,
    /// Block bases the vectors were built from.
    pub basis: Vec<BlockBasis>,
}

impl DownscaledBasis {
    pub fn build(part: &CoarsePartition, basis: &CellBasis) -> Result<Self> {
        let c = part.cells_per_block();
        if basis.cells_per_block != c || basis.blocks.len() != part.num_blocks() {
            return Err(Error::Config("cell basis does not match the coarse partition".into()));
        }
        let n = basis.n_continua;
        let hc = part.coarse_h();
        let mut t0 = Vec::with_capacity(part.num_blocks());
        let mut t1 = Vec::with_capacity(part.num_blocks());
        for bb in &basis.blocks {
            let mut b0 = Vec::with_capacity(4 * n);
            let mut b1 = Vec::with_capacity(4 * n);
            for corner in 0..4 {
                for k in 0..n {
                    let mut v0 = vec![0.0; (c + 1) * (c + 1)];
                    let mut v1 = vec![0.0; (c + 1) * (c + 1)];
                    for b in 0..=c {
                        for a in 0..=c {
                            let idx = b * (c + 1) + a;
                            let (chi, g) = hat(corner, a as f64 / c as f64, b as f64 / c as f64, hc);
                            v0[idx] = bb.phi[k][idx] * chi;
                            v1[idx] = bb.phi_lin[k][0][idx] * g[0] + bb.phi_lin[k][1][idx] * g[1];
                        }
                    }
                    b0.push(v0);
                    b1.push(v1);
                }
            }
            t0.push(b0);
            t1.push(b1);
        }
        Ok(Self { cells_per_block: c, n_continua: n, t0, t1, basis: basis.blocks.clone() })
    }

    /// Closure values of `T U` on `block` for per-continuum coarse nodal values `u[k][node]`
    /// (returns the `T₀` and `T₁` parts).
    pub fn downscale(&self, dofs: &CoarseDofs, block: BlockId, u: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let nn = (self.cells_per_block + 1).pow(2);
        let (mut p0, mut p1) = (vec![0.0; nn], vec![0.0; nn]);
        let (bx, by) = (block % dofs.n_blocks, block / dofs.n_blocks);
        let corners = [(bx, by), (bx + 1, by), (bx + 1, by + 1), (bx, by + 1)];
        for (ci, &(i, j)) in corners.iter().enumerate() {
            let Some(node) = dofs.node(i, j) else { continue };
            for k in 0..self.n_continua {
                let w = u[k][node];
                let idx = ci * self.n_continua + k;
                p0.iter_mut().zip(&self.t0[block][idx]).for_each(|(p, t)| *p += w * t);
                p1.iter_mut().zip(&self.t1[block][idx]).for_each(|(p, t)| *p += w * t);
            }
        }
        (p0, p1)
    }
}

/// Assembled block forms `m`, `a`, `c` (and diagnostic `b`) on the coarse unknowns.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub dofs: CoarseDofs,
    pub m: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `b[(test, trial)] = a(T_{trial,1}, T_{test,0})` at the same level; never used by the steppers.
    pub b: DMatrix<f64>,
    mass_k: SparseMatrix,
    t0: Vec<Vec<Vec<f64>>>,
    mesh: FineMesh,
    part: CoarsePartition,
}

impl BlockSystem {
    /// Coarse forms of the downscaled basis with `i0` explicit continua, integrated on the
    /// fine grid at the level of the multicontinuum expansion: inside each block
    /// `∇(φ χ) ≈ χ ∇φ` and `∇(φ^m ∂_m χ) ≈ ∂_m χ ∇φ^m`, and the mass and load only see `T₀`.
    /// With κ ≡ 1 and one continuum this gives `c = 0` and `a` the coarse Q1 Laplacian.
    pub fn assemble(
        mesh: &FineMesh,
        part: &CoarsePartition,
        field: &CoefficientField,
        down: &DownscaledBasis,
        i0: usize,
    ) -> Result<Self> {
        let n = down.n_continua;
        if i0 > n {
            return Err(Error::Config(format!("i0 = {i0} exceeds the number of continua {n}")));
        }
        let dofs = CoarseDofs { n_blocks: part.n_blocks(), n_continua: n, i0 };
        let nd = dofs.len();
        let (mut m, mut a, mut c, mut b) =
            (DMatrix::zeros(nd, nd), DMatrix::zeros(nd, nd), DMatrix::zeros(nd, nd), DMatrix::zeros(nd, nd));
        let (_, mass_k) = closure_matrices(mesh, part, field, 0)?;
        let cb = part.cells_per_block();
        let hc = part.coarse_h();
        let h = mesh.h();
        let g = 0.5 / 3f64.sqrt();
        let gauss = [0.5 - g, 0.5 + g];
        let np = 4 * n;
        for block in 0..part.num_blocks() {
            let bb = &down.basis[block];
            let (ri, rj) = part.cell_range(block);
            let zero = || DMatrix::<f64>::zeros(np, np);
            let (mut bm, mut ba, mut bc, mut bbm) = (zero(), zero(), zero(), zero());
            let mut g0 = vec![[0.0; 2]; np];
            let mut g1 = vec![[0.0; 2]; np];
            for lb in 0..cb {
                for la in 0..cb {
                    let kappa = field.at(ri.start + la, rj.start + lb);
                    let w = kappa * h * h / 4.0;
                    let nodes = [lb * (cb + 1) + la, lb * (cb + 1) + la + 1, (lb + 1) * (cb + 1) + la + 1, (lb + 1) * (cb + 1) + la];
                    for &eta in &gauss {
                        for &xi in &gauss {
                            let dn = [
                                [-(1.0 - eta) / h, -(1.0 - xi) / h],
                                [(1.0 - eta) / h, -xi / h],
                                [eta / h, xi / h],
                                [-eta / h, (1.0 - xi) / h],
                            ];
                            let grad = |v: &[f64]| {
                                let mut out = [0.0; 2];
                                for (q, &nd) in nodes.iter().enumerate() {
                                    out[0] += v[nd] * dn[q][0];
                                    out[1] += v[nd] * dn[q][1];
                                }
                                out
                            };
                            let (s, t) = ((la as f64 + xi) / cb as f64, (lb as f64 + eta) / cb as f64);
                            for k in 0..n {
                                let gphi = grad(&bb.phi[k]);
                                let glin = [grad(&bb.phi_lin[k][0]), grad(&bb.phi_lin[k][1])];
                                for corner in 0..4 {
                                    let (chi, dchi) = hat(corner, s, t, hc);
                                    let p = corner * n + k;
                                    g0[p] = [chi * gphi[0], chi * gphi[1]];
                                    g1[p] = [
                                        dchi[0] * glin[0][0] + dchi[1] * glin[1][0],
                                        dchi[0] * glin[0][1] + dchi[1] * glin[1][1],
                                    ];
                                }
                            }
                            for p in 0..np {
                                for q in 0..np {
                                    bc[(p, q)] += w * (g0[p][0] * g0[q][0] + g0[p][1] * g0[q][1]);
                                    ba[(p, q)] += w * (g1[p][0] * g1[q][0] + g1[p][1] * g1[q][1]);
                                    bbm[(p, q)] += w * (g0[p][0] * g1[q][0] + g0[p][1] * g1[q][1]);
                                }
                            }
                        }
                    }
                }
            }
            let mt0: Vec<Vec<f64>> = down.t0[block].iter().map(|v| mass_k.mul_vec(v)).collect();
            for p in 0..np {
                for q in 0..np {
                    bm[(p, q)] = down.t0[block][p].iter().zip(&mt0[q]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            let ids: Vec<Option<usize>> = (0..np).map(|idx| dofs.corner_dofs(block, idx % n)[idx / n]).collect();
            for (p, ip) in ids.iter().enumerate() {
                let Some(ip) = *ip else { continue };
                for (q, iq) in ids.iter().enumerate() {
                    let Some(iq) = *iq else { continue };
                    m[(ip, iq)] += bm[(p, q)];
                    a[(ip, iq)] += ba[(p, q)];
                    c[(ip, iq)] += bc[(p, q)];
                    b[(ip, iq)] += bbm[(p, q)];
                }
            }
        }
        let sym = |x: DMatrix<f64>| (&x + x.transpose()) * 0.5;
        Ok(Self {
            dofs,
            m: sym(m),
            a: sym(a),
            c: sym(c),
            b,
            mass_k,
            t0: down.t0.clone(),
            mesh: *mesh,
            part: *part,
        })
    }

    pub fn n1(&self) -> usize {
        self.dofs.n_implicit()
    }

    pub fn n2(&self) -> usize {
        self.dofs.n_explicit()
    }

    /// Sub-block `(g, h)` of a matrix, groups numbered 1 (implicit) and 2 (explicit).
    pub fn sub(&self, mat: &DMatrix<f64>, g: usize, h: usize) -> DMatrix<f64> {
        let range = |grp: usize| if grp == 1 { (0, self.n1()) } else { (self.n1(), self.n2()) };
        let (r0, nr) = range(g);
        let (c0, nc) = range(h);
        mat.view((r0, c0), (nr, nc)).into_owned()
    }

    /// Load vector `(f(·, t), T₀ W)` with the Q1 interpolant of `f`.
    pub fn load(&self, f: &dyn Fn(f64, f64) -> f64) -> Vec<f64> {
        let c = self.part.cells_per_block();
        let n = self.dofs.n_continua;
        let mut out = vec![0.0; self.dofs.len()];
        let mut fk = vec![0.0; (c + 1) * (c + 1)];
        for block in 0..self.part.num_blocks() {
            let (ri, rj) = self.part.cell_range(block);
            for b in 0..=c {
                for a in 0..=c {
                    let (x, y) = self.mesh.node_coords(ri.start + a, rj.start + b);
                    fk[b * (c + 1) + a] = f(x, y);
                }
            }
            let mf = self.mass_k.mul_vec(&fk);
            for (idx, t) in self.t0[block].iter().enumerate() {
                if let Some(d) = self.dofs.corner_dofs(block, idx % n)[idx / n] {
                    out[d] += t.iter().zip(&mf).map(|(p, q)| p * q).sum::<f64>();
                }
            }
        }
        out
    }

    /// Largest `|b₁₂(U, W) + b₂₁(W, U)| / (‖U‖_a ‖W‖_a + ‖U‖_c ‖W‖_c)` over a few random
    /// pairs `U ∈ V₂`, `W ∈ V₁`; NaN if a group is empty.
    pub fn b_antisymmetry(&self, samples: usize, seed: u64) -> f64 {
        if self.n1() == 0 || self.n2() == 0 {
            return f64::NAN;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let nd = self.dofs.len();
        for _ in 0..samples {
            let mut u = DVector::zeros(nd);
            let mut w = DVector::zeros(nd);
            for i in 0..self.n1() {
                w[i] = rng.random_range(-1.0..1.0);
            }
            for i in self.n1()..nd {
                u[i] = rng.random_range(-1.0..1.0);
            }
            let num = (w.dot(&(&self.b * &u)) + u.dot(&(&self.b * &w))).abs();
            let na = |x: &DVector<f64>, mat: &DMatrix<f64>| x.dot(&(mat * x)).max(0.0).sqrt();
            let den = na(&u, &self.a) * na(&w, &self.a) + na(&u, &self.c) * na(&w, &self.c);
            if den > 0.0 {
                worst = worst.max(num / den);
            }
        }
        worst
    }
}

/// Time discretizations of the coarse system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Implicit,
    Explicit,
    Scheme1,
    Scheme2,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Implicit, Scheme::Explicit, Scheme::Scheme1, Scheme::Scheme2];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Implicit => "implicit",
            Scheme::Explicit => "explicit",
            Scheme::Scheme1 => "scheme1",
            Scheme::Scheme2 => "scheme2",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}' (expected implicit, explicit, scheme1 or scheme2)")))
    }
}

fn block_diag_11(sys: &BlockSystem, mat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(mat.nrows(), mat.ncols());
    let n1 = sys.n1();
    out.view_mut((0, 0), (n1, n1)).copy_from(&mat.view((0, 0), (n1, n1)));
    out
}

enum Solver {
    Coupled(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    /// Scheme 2 with `M₁₂ = 0`: explicit group from `M₂₂`, then the implicit group.
    Decoupled {
        m22: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        lhs11: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
}

/// Three-layer stepper
/// `M (U⁺ − 2U + U⁻)/τ² + ½ K_imp (U⁺ + U⁻) + K_exp U = F`
/// with `K = A + C` split according to the scheme.
pub struct Stepper {
    pub scheme: Scheme,
    pub tau: f64,
    m: DMatrix<f64>,
    k_imp: DMatrix<f64>,
    k_exp: DMatrix<f64>,
    m_solver: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    solver: Solver,
    n1: usize,
}

impl Stepper {
    pub fn new(sys: &BlockSystem, scheme: Scheme, tau: f64) -> Result<Self> {
        Self::with_options(sys, scheme, tau, true)
    }

    /// `allow_decoupling = false` forces the coupled solve for Scheme 2.
    pub fn with_options(sys: &BlockSystem, scheme: Scheme, tau: f64, allow_decoupling: bool) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {tau}")));
        }
        let nd = sys.dofs.len();
        let (a_imp, c_imp) = match scheme {
            Scheme::Implicit => (sys.a.clone(), sys.c.clone()),
            Scheme::Explicit => (DMatrix::zeros(nd, nd), DMatrix::zeros(nd, nd)),
            Scheme::Scheme1 => (block_diag_11(sys, &sys.a), sys.c.clone()),
            Scheme::Scheme2 => (block_diag_11(sys, &sys.a), block_diag_11(sys, &sys.c)),
        };
        let k_imp = a_imp + c_imp;
        let k_exp = &sys.a + &sys.c - &k_imp;
        let inv_t2 = 1.0 / (tau * tau);
        let lhs = &sys.m * inv_t2 + &k_imp * 0.5;
        let chol = |x: DMatrix<f64>, what: &str| {
            x.cholesky().ok_or_else(|| Error::Singular(format!("{what} of {scheme} is not positive definite")))
        };
        let n1 = sys.n1();
        let m12 = sys.sub(&sys.m, 1, 2);
        let decouple = allow_decoupling
            && scheme == Scheme::Scheme2
            && sys.n2() > 0
            && n1 > 0
            && m12.amax() <= 1e-14 * sys.m.amax();
        let solver = if decouple {
            Solver::Decoupled {
                m22: chol(sys.sub(&sys.m, 2, 2), "explicit mass block")?,
                lhs11: chol(lhs.view((0, 0), (n1, n1)).into_owned(), "implicit block")?,
            }
        } else {
            Solver::Coupled(chol(lhs, "time-step matrix")?)
        };
        Ok(Self {
            scheme,
            tau,
            m_solver: chol(sys.m.clone(), "mass matrix")?,
            m: sys.m.clone(),
            k_imp,
            k_exp,
            solver,
            n1,
        })
    }

    /// Layers 0 and 1 from zero initial data: `U⁰ = 0`, `U¹ = (τ²/2) M⁻¹ F⁰`.
    pub fn startup(&self, f0: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = self.m_solver.solve(&DVector::from_column_slice(f0)) * (0.5 * self.tau * self.tau);
        (vec![0.0; f0.len()], x.as_slice().to_vec())
    }

    pub fn step(&self, prev: &[f64], curr: &[f64], load: &[f64]) -> Vec<f64> {
        let inv_t2 = 1.0 / (self.tau * self.tau);
        let up = DVector::from_column_slice(prev);
        let uc = DVector::from_column_slice(curr);
        let rhs = DVector::from_column_slice(load) + &self.m * ((&uc * 2.0 - &up) * inv_t2)
            - &self.k_imp * (&up * 0.5)
            - &self.k_exp * &uc;
        let x = match &self.solver {
            Solver::Coupled(ch) => ch.solve(&rhs),
            Solver::Decoupled { m22, lhs11 } => {
                // second equation: M₂₂ (U₂⁺ − 2U₂ + U₂⁻)/τ² = r₂ − (terms already in rhs)
                let n1 = self.n1;
                let n = rhs.len();
                let r2 = rhs.rows(n1, n - n1).into_owned();
                let x2 = m22.solve(&r2) * (self.tau * self.tau);
                // first equation with U₂⁺ known: moves (M₁₂/τ² + ½K₁₂,imp) U₂⁺ to the right
                let coupling = (self.m.view((0, n1), (n1, n - n1)) * inv_t2
                    + self.k_imp.view((0, n1), (n1, n - n1)) * 0.5)
                    * &x2;
                let x1 = lhs11.solve(&(rhs.rows(0, n1) - coupling));
                let mut x = DVector::zeros(n);
                x.rows_mut(0, n1).copy_from(&x1);
                x.rows_mut(n1, n - n1).copy_from(&x2);
                x
            }
        };
        x.as_slice().to_vec()
    }

    /// Quantity conserved by this stepper without load:
    /// `(2/τ²)‖U⁺ − U‖²_M + ‖U⁺‖²_{K_imp} + ‖U‖²_{K_imp} + 2 U⁺ᵀ K_exp U`.
    pub fn energy(&self, curr: &[f64], next: &[f64]) -> f64 {
        let u = DVector::from_column_slice(curr);
        let v = DVector::from_column_slice(next);
        let d = &v - &u;
        2.0 / (self.tau * self.tau) * d.dot(&(&self.m * &d))
            + v.dot(&(&self.k_imp * &v))
            + u.dot(&(&self.k_imp * &u))
            + 2.0 * v.dot(&(&self.k_exp * &u))
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.solver, Solver::Decoupled { .. })
    }
}

fn norm2(mat: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(mat * x))
}

/// Discrete energy of Scheme 1 between layers `n` and `n+1`, written with the
/// mixed-time-level `a`-norms.
pub fn discrete_energy(sys: &BlockSystem, curr: &[f64], next: &[f64], tau: f64) -> f64 {
    let n1 = sys.n1();
    let u = DVector::from_column_slice(curr);
    let v = DVector::from_column_slice(next);
    let mix = |first: &DVector<f64>, second: &DVector<f64>| {
        let mut x = second.clone();
        x.rows_mut(0, n1).copy_from(&first.rows(0, n1));
        x
    };
    let d = &v - &u;
    let d2 = {
        let mut x = d.clone();
        x.rows_mut(0, n1).fill(0.0);
        x
    };
    2.0 / (tau * tau) * norm2(&sys.m, &d) + norm2(&sys.c, &v) + norm2(&sys.c, &u) + norm2(&sys.a, &mix(&v, &u))
        + norm2(&sys.a, &mix(&u, &v))
        - norm2(&sys.a, &d2)
}

/// Runs `steps` steps from the startup layers, calling `observe(n, Uⁿ, Uⁿ⁺¹)` for
/// `n = 0..steps`; stops early (returning the step) once a layer is not finite.
pub fn integrate(
    stepper: &Stepper,
    sys: &BlockSystem,
    source: &dyn Fn(f64, f64, f64) -> f64,
    start: Option<(Vec<f64>, Vec<f64>)>,
    steps: usize,
    observe: &mut dyn FnMut(usize, &[f64], &[f64]),
) -> Option<usize> {
    let tau = stepper.tau;
    let (mut prev, mut curr) = start.unwrap_or_else(|| stepper.startup(&sys.load(&|x, y| source(x, y, 0.0))));
    if steps == 0 {
        return None;
    }
    observe(0, &prev, &curr);
    for n in 1..steps {
        let t = n as f64 * tau;
        let f = sys.load(&|x, y| source(x, y, t));
        let next = stepper.step(&prev, &curr, &f);
        if next.iter().any(|v| !v.is_finite()) {
            return Some(n + 1);
        }
        observe(n, &curr, &next);
        prev = curr;
        curr = next;
    }
    None
}

/// Mass lumping is recognized but not available.
pub fn mass_lumping() -> Result<()> {
    Err(Error::Unsupported("mass lumping".into()))
}
