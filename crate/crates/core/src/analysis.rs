//! Continuum averages, relative errors against the fine reference, blowup detection.

use std::fmt::Write as _;

use crate::coarse::CoarseDofs;
use crate::error::{Error, Result};
use crate::field::IndicatorSet;
use crate::grid::{BlockId, CoarsePartition, FineMesh};

/// ψ-weighted average `∫_K u ψ_i / ∫_K ψ_i` of a full nodal vector over a block.
pub fn continuum_average(
    mesh: &FineMesh,
    part: &CoarsePartition,
    ind: &IndicatorSet,
    u: &[f64],
    block: BlockId,
    i: usize,
) -> Result<f64> {
    let (ri, rj) = part.cell_range(block);
    let (mut sum, mut count) = (0.0, 0usize);
    for j in rj {
        for ii in ri.clone() {
            if ind.contains(i, ii, j) {
                // exact cell mean of a bilinear function
                sum += mesh.cell_nodes(ii, j).iter().map(|&n| u[n]).sum::<f64>() / 4.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("continuum {} has zero measure in block {block}", i + 1)));
    }
    Ok(sum / count as f64)
}

/// `[i][block]` continuum averages of a fine nodal vector.
pub fn continuum_averages(mesh: &FineMesh, part: &CoarsePartition, ind: &IndicatorSet, u: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..ind.num_continua())
        .map(|i| (0..part.num_blocks()).map(|b| continuum_average(mesh, part, ind, u, b, i)).collect())
        .collect()
}

/// `[k][block]` block means of coarse Q1 functions given by interior nodal values
/// `per[k][node]` (the corner average, exact for Q1).
pub fn block_means(dofs: &CoarseDofs, per: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let nb = dofs.n_blocks;
    per.iter()
        .map(|vals| {
            (0..nb * nb)
                .map(|blk| {
                    let (bx, by) = (blk % nb, blk / nb);
                    [(bx, by), (bx + 1, by), (bx + 1, by + 1), (bx, by + 1)]
                        .iter()
                        .map(|&(i, j)| dofs.node(i, j).map_or(0.0, |n| vals[n]))
                        .sum::<f64>()
                        / 4.0
                })
                .collect()
        })
        .collect()
}

/// Relative error per continuum from block means of the coarse solution and ψ-averages
/// of the reference; `None` where the reference norm is below `1e-14`.
pub fn relative_error_at(coarse: &[Vec<f64>], reference: &[Vec<f64>]) -> Vec<Option<f64>> {
    coarse
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            let num: f64 = c.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = r.iter().map(|b| b * b).sum();
            (den.sqrt() >= 1e-14).then(|| (num / den).sqrt())
        })
        .collect()
}

/// Error curves `e^{(i)}(t_n)` of one scheme.
#[derive(Debug, Clone)]
pub struct ErrorSeries {
    pub scheme: String,
    pub coarse_h: f64,
    pub layers: usize,
    pub times: Vec<f64>,
    /// `errors[n][i]`.
    pub errors: Vec<Vec<Option<f64>>>,
}

impl ErrorSeries {
    /// Errors at the last time.
    pub fn last(&self) -> Option<&[Option<f64>]> {
        self.errors.last().map(|v| v.as_slice())
    }

    /// Columns `t,e_1,…,e_N,scheme,H,l`; undefined values are written as `nan`.
    pub fn to_csv(&self) -> String {
        let n = self.errors.first().map_or(0, |e| e.len());
        let mut s = String::from("t");
        for i in 1..=n {
            let _ = write!(s, ",e_{i}");
        }
        s.push_str(",scheme,H,l\n");
        for (t, row) in self.times.iter().zip(&self.errors) {
            let _ = write!(s, "{t}");
            for e in row {
                match e {
                    Some(v) => {
                        let _ = write!(s, ",{v:e}");
                    }
                    None => s.push_str(",nan"),
                }
            }
            let _ = writeln!(s, ",{},{},{}", self.scheme, self.coarse_h, self.layers);
        }
        s
    }
}

/// Relative errors of a coarse trajectory against the fine reference on the same time grid.
/// `coarse[n][k][node]` holds the original (not recombined) coarse variables,
/// `fine[n]` full nodal vectors.
#[allow(clippy::too_many_arguments)]
pub fn relative_error(
    dofs: &CoarseDofs,
    coarse: &[Vec<Vec<f64>>],
    fine: &[Vec<f64>],
    mesh: &FineMesh,
    part: &CoarsePartition,
    ind: &IndicatorSet,
    tau: f64,
    scheme: &str,
    layers: usize,
) -> Result<ErrorSeries> {
    if coarse.len() != fine.len() {
        return Err(Error::Config(format!(
            "time grids differ: {} coarse layers vs {} fine layers",
            coarse.len(),
            fine.len()
        )));
    }
    let mut errors = Vec::with_capacity(coarse.len());
    for (c, f) in coarse.iter().zip(fine) {
        let reference = continuum_averages(mesh, part, ind, f)?;
        errors.push(relative_error_at(&block_means(dofs, c), &reference));
    }
    Ok(ErrorSeries {
        scheme: scheme.to_string(),
        coarse_h: part.coarse_h(),
        layers,
        times: (0..coarse.len()).map(|n| n as f64 * tau).collect(),
        errors,
    })
}

/// First index whose value is not finite or exceeds `10⁶` times the largest of the first
/// ten values.
pub fn blowup_detect(norms: &[f64]) -> Option<usize> {
    let base = norms.iter().take(10).copied().fold(0.0f64, f64::max);
    norms.iter().position(|&v| !v.is_finite() || (base > 0.0 && v > 1e6 * base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_meshes;

    #[test]
    fn constant_and_indicator_averages() {
        let (mesh, part) = build_meshes(8, 2).unwrap();
        let masks: Vec<Vec<bool>> = vec![
            (0..64).map(|c| c % 2 == 0).collect(),
            (0..64).map(|c| c % 2 == 1).collect(),
        ];
        let ind = IndicatorSet::from_masks(&mesh, &part, masks).unwrap();
        let u = vec![2.5; mesh.num_nodes()];
        for b in 0..4 {
            assert!((continuum_average(&mesh, &part, &ind, &u, b, 1).unwrap() - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn homogeneous_quotient() {
        let r = vec![vec![1.0, -2.0, 3.0], vec![0.5, 0.1, 0.0]];
        let c: Vec<Vec<f64>> = r.iter().map(|v| v.iter().map(|x| 1.1 * x).collect()).collect();
        let e = relative_error_at(&c, &r);
        assert!(e.iter().all(|x| (x.unwrap() - 0.1).abs() < 1e-14));
        assert!(relative_error_at(&r, &r).iter().all(|x| x.unwrap() == 0.0));
        assert_eq!(relative_error_at(&r, &[vec![0.0; 3], vec![0.0; 3]])[0], None);
        // scale invariance
        let s = |v: &Vec<Vec<f64>>| v.iter().map(|x| x.iter().map(|y| -3.0 * y).collect()).collect::<Vec<Vec<f64>>>();
        let e2 = relative_error_at(&s(&c), &s(&r));
        assert!(e.iter().zip(&e2).all(|(a, b)| (a.unwrap() - b.unwrap()).abs() < 1e-14));
    }

    #[test]
    fn blowup_cases() {
        let bounded: Vec<f64> = (0..1000).map(|n| (n as f64 * 0.3).sin()).collect();
        assert_eq!(blowup_detect(&bounded), None);
        let growth: Vec<f64> = (0..40).map(|n| 2f64.powi(n)).collect();
        let at = blowup_detect(&growth).unwrap();
        assert!(at <= 30, "{at}");
        assert_eq!(blowup_detect(&[1.0, f64::NAN]), Some(1));
    }

    #[test]
    fn block_means_of_constant() {
        let dofs = CoarseDofs { n_blocks: 3, n_continua: 1, i0: 0 };
        let m = block_means(&dofs, &[vec![1.0; 4]]);
        // corner blocks touch one interior node, the centre block four
        assert_eq!(m[0][0], 0.25);
        assert_eq!(m[0][4], 1.0);
    }
}
