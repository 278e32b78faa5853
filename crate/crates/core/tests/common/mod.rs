//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use mcwave::field::{CoefficientField, IndicatorSet};
use mcwave::grid::{CoarsePartition, FineMesh, OversampleRegion};
use nalgebra::DMatrix;

const GAUSS2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Bilinear shape functions and reference gradients at (s, t) ∈ [0,1]², corners BL, BR, TR, TL.
pub fn shape(s: f64, t: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    (
        [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t],
        [[-(1.0 - t), -(1.0 - s)], [1.0 - t, -s], [t, s], [-t, 1.0 - s]],
    )
}

/// Element stiffness and mass by 2x2 Gauss quadrature on a cell of side `h`.
pub fn element(h: f64, kappa: f64) -> ([[f64; 4]; 4], [[f64; 4]; 4], [f64; 4]) {
    let mut k = [[0.0; 4]; 4];
    let mut m = [[0.0; 4]; 4];
    let mut int = [0.0; 4];
    for gx in GAUSS2 {
        for gy in GAUSS2 {
            let (s, t) = ((gx + 1.0) / 2.0, (gy + 1.0) / 2.0);
            let (n, g) = shape(s, t);
            let w = h * h / 4.0;
            for a in 0..4 {
                int[a] += w * n[a];
                for b in 0..4 {
                    k[a][b] += w * kappa * (g[a][0] * g[b][0] + g[a][1] * g[b][1]) / (h * h);
                    m[a][b] += w * n[a] * n[b];
                }
            }
        }
    }
    (k, m, int)
}

/// Dense saddle-point solve of the cell problem on `region` with nodes numbered by
/// `perm` (a permutation of the region's row-major node order).
pub fn dense_cell_oracle(
    mesh: &FineMesh,
    part: &CoarsePartition,
    field: &CoefficientField,
    ind: &IndicatorSet,
    region: &OversampleRegion,
    dirichlet_all: bool,
    targets: &[Vec<Vec<f64>>],
    perm: &[usize],
) -> Vec<Vec<f64>> {
    let nreg = region.num_nodes();
    let fixed = |local: usize| {
        let (i, j) = region.global_node(local);
        mesh.is_boundary_node(i, j) || (dirichlet_all && region.on_region_boundary(local))
    };
    let mut dof = vec![usize::MAX; nreg];
    let mut n = 0;
    for &local in perm {
        if !fixed(local) {
            dof[local] = n;
            n += 1;
        }
    }
    let members = region.members();
    let nc = ind.num_continua();
    let nb = members.len() * nc;
    let mut kkt = DMatrix::<f64>::zeros(n + nb, n + nb);
    let (ci0, cj0) = region.cell_origin();
    for cj in cj0..cj0 + region.cells_y() {
        for ci in ci0..ci0 + region.cells_x() {
            let (ke, _, int) = element(mesh.h(), field.at(ci, cj));
            let nodes = [(ci, cj), (ci + 1, cj), (ci + 1, cj + 1), (ci, cj + 1)]
                .map(|(i, j)| dof[region.local_node(i, j).unwrap()]);
            for a in 0..4 {
                for b in 0..4 {
                    if nodes[a] != usize::MAX && nodes[b] != usize::MAX {
                        kkt[(nodes[a], nodes[b])] += ke[a][b];
                    }
                }
            }
            let p = part.block_of_cell(ci, cj);
            let mi = members.iter().position(|&q| q == p).unwrap();
            for k in 0..nc {
                if ind.contains(k, ci, cj) {
                    let row = n + mi * nc + k;
                    for a in 0..4 {
                        if nodes[a] != usize::MAX {
                            kkt[(row, nodes[a])] += int[a];
                            kkt[(nodes[a], row)] += int[a];
                        }
                    }
                }
            }
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(n + nb, targets.len());
    for (r, t) in targets.iter().enumerate() {
        for mi in 0..members.len() {
            for k in 0..nc {
                rhs[(n + mi * nc + k, r)] = t[mi][k];
            }
        }
    }
    let x = kkt.lu().solve(&rhs).expect("oracle KKT is singular");
    (0..targets.len())
        .map(|r| (0..nreg).map(|l| if dof[l] == usize::MAX { 0.0 } else { x[(dof[l], r)] }).collect())
        .collect()
}

/// Values of a region node vector on the closure of `block`, row-major.
pub fn closure_of(region: &OversampleRegion, part: &CoarsePartition, block: usize, full: &[f64]) -> Vec<f64> {
    let (ri, rj) = part.cell_range(block);
    let mut out = Vec::new();
    for j in rj.start..=rj.end {
        for i in ri.start..=ri.end {
            out.push(full[region.local_node(i, j).unwrap()]);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
