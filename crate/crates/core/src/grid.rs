//! Structured fine and coarse meshes on the unit square.
//!
//! Fine cells are indexed row-major from the bottom-left corner: cell `(i, j)`
//! has id `j * n + i` and covers `[i h, (i+1) h] x [j h, (j+1) h]`. Fine nodes
//! use the same convention with `n + 1` nodes per row. Coarse blocks are
//! congruent squares made of `cells_per_block^2` fine cells.

use crate::error::{Error, Result};

/// Uniform square fine grid on (0,1)^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineMesh {
    n: usize,
}

impl FineMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("fine resolution {n} must be at least 2")));
        }
        Ok(Self { n })
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn num_cells(&self) -> usize {
        self.n * self.n
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n + 1
    }

    pub fn num_nodes(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    #[inline]
    pub fn cell_id(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn node_coords(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.h(), j as f64 * self.h())
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.h(), (j as f64 + 0.5) * self.h())
    }

    pub fn is_boundary_node(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Global ids of the four corners of cell `(i, j)` in counter-clockwise
    /// order starting at the bottom-left one.
    #[inline]
    pub fn cell_nodes(&self, i: usize, j: usize) -> [usize; 4] {
        [
            self.node_id(i, j),
            self.node_id(i + 1, j),
            self.node_id(i + 1, j + 1),
            self.node_id(i, j + 1),
        ]
    }
}

/// Identifier of a coarse block, `by * n_blocks + bx`.
pub type BlockId = usize;

/// Partition of the fine grid into `n_blocks x n_blocks` congruent coarse blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoarsePartition {
    n_blocks: usize,
    cells_per_block: usize,
}

impl CoarsePartition {
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.n_blocks * self.n_blocks
    }

    pub fn cells_per_block(&self) -> usize {
        self.cells_per_block
    }

    pub fn coarse_h(&self) -> f64 {
        1.0 / self.n_blocks as f64
    }

    pub fn block_area(&self) -> f64 {
        self.coarse_h() * self.coarse_h()
    }

    pub fn block_id(&self, bx: usize, by: usize) -> BlockId {
        by * self.n_blocks + bx
    }

    pub fn block_coords(&self, id: BlockId) -> (usize, usize) {
        (id % self.n_blocks, id / self.n_blocks)
    }

    pub fn check_block(&self, id: BlockId) -> Result<()> {
        if id >= self.num_blocks() {
            return Err(Error::Config(format!(
                "block id {id} out of range (partition has {} blocks)",
                self.num_blocks()
            )));
        }
        Ok(())
    }

    /// Half-open fine-cell index ranges `(i0..i1, j0..j1)` covered by a block.
    pub fn cell_range(&self, id: BlockId) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (bx, by) = self.block_coords(id);
        let c = self.cells_per_block;
        (bx * c..(bx + 1) * c, by * c..(by + 1) * c)
    }

    /// Block containing fine cell `(i, j)`.
    pub fn block_of_cell(&self, i: usize, j: usize) -> BlockId {
        self.block_id(i / self.cells_per_block, j / self.cells_per_block)
    }

    /// Lower-left corner of a block.
    pub fn block_origin(&self, id: BlockId) -> (f64, f64) {
        let (bx, by) = self.block_coords(id);
        (bx as f64 * self.coarse_h(), by as f64 * self.coarse_h())
    }

    /// Interior blocks are those whose four coarse corners are all interior nodes
    /// of the coarse grid (i.e. the block does not touch the domain boundary).
    pub fn is_interior_block(&self, id: BlockId) -> bool {
        let (bx, by) = self.block_coords(id);
        bx > 0 && by > 0 && bx + 1 < self.n_blocks && by + 1 < self.n_blocks
    }

    /// The block closest to the centre of the domain.
    pub fn central_block(&self) -> BlockId {
        let m = self.n_blocks / 2;
        self.block_id(m, m)
    }
}

/// Builds a fine mesh with `nx` cells per axis and a coarse partition with `n_h` blocks per axis.
pub fn build_meshes(nx: usize, n_h: usize) -> Result<(FineMesh, CoarsePartition)> {
    if nx < 2 || n_h < 2 {
        return Err(Error::Config(format!(
            "resolutions must be at least 2 (got nx={nx}, nH={n_h})"
        )));
    }
    if nx % n_h != 0 {
        return Err(Error::Config(format!(
            "fine resolution {nx} is not divisible by the coarse resolution {n_h}"
        )));
    }
    let mesh = FineMesh::new(nx)?;
    let part = CoarsePartition {
        n_blocks: n_h,
        cells_per_block: nx / n_h,
    };
    Ok((mesh, part))
}

/// Default number of oversampling layers, `ceil(-2 ln H)`.
pub fn default_layers(coarse_h: f64) -> usize {
    (-2.0 * coarse_h.ln()).ceil().max(0.0) as usize
}

/// A coarse block extended by `layers` rings of neighbouring blocks, clipped to the domain.
///
/// Member blocks always form the axis-aligned rectangle
/// `bx_range x by_range` (inclusive ranges of block coordinates).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OversampleRegion {
    pub center: BlockId,
    pub layers: usize,
    pub bx: (usize, usize),
    pub by: (usize, usize),
    cells_per_block: usize,
    n_blocks: usize,
}

impl OversampleRegion {
    /// Member blocks in row-major order.
    pub fn members(&self) -> Vec<BlockId> {
        let mut out = Vec::with_capacity(self.num_members());
        for by in self.by.0..=self.by.1 {
            for bx in self.bx.0..=self.bx.1 {
                out.push(by * self.n_blocks + bx);
            }
        }
        out
    }

    pub fn num_members(&self) -> usize {
        (self.bx.1 - self.bx.0 + 1) * (self.by.1 - self.by.0 + 1)
    }

    pub fn contains_block(&self, id: BlockId) -> bool {
        let (bx, by) = (id % self.n_blocks, id / self.n_blocks);
        (self.bx.0..=self.bx.1).contains(&bx) && (self.by.0..=self.by.1).contains(&by)
    }

    /// Fine cells per axis covered by the region.
    pub fn cells_x(&self) -> usize {
        (self.bx.1 - self.bx.0 + 1) * self.cells_per_block
    }

    pub fn cells_y(&self) -> usize {
        (self.by.1 - self.by.0 + 1) * self.cells_per_block
    }

    /// Global fine-cell index of the region's lower-left cell.
    pub fn cell_origin(&self) -> (usize, usize) {
        (self.bx.0 * self.cells_per_block, self.by.0 * self.cells_per_block)
    }

    pub fn num_nodes(&self) -> usize {
        (self.cells_x() + 1) * (self.cells_y() + 1)
    }

    /// Local index of the global fine node `(i, j)`, if it lies in the region.
    pub fn local_node(&self, i: usize, j: usize) -> Option<usize> {
        let (i0, j0) = self.cell_origin();
        if i < i0 || j < j0 || i > i0 + self.cells_x() || j > j0 + self.cells_y() {
            return None;
        }
        Some((j - j0) * (self.cells_x() + 1) + (i - i0))
    }

    /// Global node coordinates `(i, j)` of a local node index.
    pub fn global_node(&self, local: usize) -> (usize, usize) {
        let (i0, j0) = self.cell_origin();
        let w = self.cells_x() + 1;
        (i0 + local % w, j0 + local / w)
    }

    /// Whether a local node lies on the region boundary.
    pub fn on_region_boundary(&self, local: usize) -> bool {
        let w = self.cells_x() + 1;
        let (a, b) = (local % w, local / w);
        a == 0 || b == 0 || a == self.cells_x() || b == self.cells_y()
    }
}

/// All blocks within Chebyshev distance `layers` of `block`, clipped to the domain.
pub fn oversample(part: &CoarsePartition, block: BlockId, layers: usize) -> Result<OversampleRegion> {
    part.check_block(block)?;
    let (bx, by) = part.block_coords(block);
    let last = part.n_blocks - 1;
    Ok(OversampleRegion {
        center: block,
        layers,
        bx: (bx.saturating_sub(layers), (bx + layers).min(last)),
        by: (by.saturating_sub(layers), (by + layers).min(last)),
        cells_per_block: part.cells_per_block,
        n_blocks: part.n_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_resolution() {
        let (mesh, part) = build_meshes(400, 10).unwrap();
        assert_eq!(mesh.h(), 1.0 / 400.0);
        assert_eq!(part.coarse_h(), 0.1);
        assert_eq!(part.cells_per_block(), 40);
    }

    #[test]
    fn smallest_legal_case() {
        let (_, part) = build_meshes(4, 2).unwrap();
        assert_eq!(part.cells_per_block(), 2);
        assert_eq!(part.num_blocks(), 4);
    }

    #[test]
    fn indivisible_resolution_rejected() {
        assert!(matches!(build_meshes(400, 7), Err(Error::Config(_))));
        assert!(build_meshes(1, 1).is_err());
    }

    #[test]
    fn blocks_partition_cells() {
        let (mesh, part) = build_meshes(12, 3).unwrap();
        let mut owner = vec![usize::MAX; mesh.num_cells()];
        for b in 0..part.num_blocks() {
            let (ri, rj) = part.cell_range(b);
            for j in rj.clone() {
                for i in ri.clone() {
                    let c = mesh.cell_id(i, j);
                    assert_eq!(owner[c], usize::MAX, "cell {c} owned twice");
                    owner[c] = b;
                    assert_eq!(part.block_of_cell(i, j), b);
                }
            }
        }
        assert!(owner.iter().all(|&o| o != usize::MAX));
    }

    #[test]
    fn oversample_counts() {
        let (_, part) = build_meshes(50, 5).unwrap();
        let interior = oversample(&part, part.block_id(2, 2), 1).unwrap();
        assert_eq!(interior.num_members(), 9);
        let corner = oversample(&part, part.block_id(0, 0), 1).unwrap();
        assert_eq!(corner.num_members(), 4);
        let zero = oversample(&part, part.block_id(3, 1), 0).unwrap();
        assert_eq!(zero.members(), vec![part.block_id(3, 1)]);
        assert!(oversample(&part, 25, 1).is_err());
    }

    #[test]
    fn default_layer_counts() {
        assert_eq!(default_layers(0.1), 5);
        assert_eq!(default_layers(0.05), 6);
    }

    #[test]
    fn region_node_maps_roundtrip() {
        let (_, part) = build_meshes(20, 5).unwrap();
        let r = oversample(&part, part.block_id(1, 3), 1).unwrap();
        for local in 0..r.num_nodes() {
            let (i, j) = r.global_node(local);
            assert_eq!(r.local_node(i, j), Some(local));
        }
        assert_eq!(r.local_node(0, 0), None);
    }
}
