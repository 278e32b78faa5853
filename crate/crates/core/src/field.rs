//! High-contrast coefficient fields and continuum indicator functions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CoarsePartition, FineMesh};

/// Piecewise-constant positive coefficient, one value per fine cell (row-major, row 0 at the bottom).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    n: usize,
    values: Vec<f64>,
}

impl CoefficientField {
    pub fn new(mesh: &FineMesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.num_cells() {
            return Err(Error::Domain(format!(
                "field has {} values, mesh has {} cells",
                values.len(),
                mesh.num_cells()
            )));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Domain(format!(
                "coefficient must be positive and finite, cell {k} has {v}"
            )));
        }
        Ok(Self { n: mesh.n(), values })
    }

    pub fn uniform(mesh: &FineMesh, value: f64) -> Result<Self> {
        Self::new(mesh, vec![value; mesh.num_cells()])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    /// Multiplies every value above `threshold` by `factor`; used to raise the contrast of a
    /// two-value field while keeping its geometry.
    pub fn scale_above(&self, threshold: f64, factor: f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|&v| if v > threshold { v * factor } else { v })
            .collect();
        Ok(Self { n: self.n, values }).and_then(|f| {
            if f.values.iter().all(|v| *v > 0.0) {
                Ok(f)
            } else {
                Err(Error::Domain("scaled field is not positive".into()))
            }
        })
    }

    /// 64-bit FNV-1a hash of the raw values, used to key cached cell bases.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Writes the field as a whitespace-separated matrix, one line per cell row, bottom row first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 8);
        for row in self.values.chunks(self.n) {
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    s.push(' ');
                }
                // `{}` on f64 prints the shortest representation that round-trips exactly
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Reads a field written by [`CoefficientField::save`] (or any conforming text matrix).
pub fn load_field(path: impl AsRef<Path>, mesh: &FineMesh) -> Result<CoefficientField> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_field(&text, mesh)
}

pub fn parse_field(text: &str, mesh: &FineMesh) -> Result<CoefficientField> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != mesh.n() {
        return Err(Error::Domain(format!(
            "field file has {} rows, expected {}",
            rows.len(),
            mesh.n()
        )));
    }
    let mut values = Vec::with_capacity(mesh.num_cells());
    for (r, line) in rows.iter().enumerate() {
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Domain(format!("row {}: cannot parse {tok:?}", r + 1)))?;
            values.push(v);
        }
        if values.len() - before != mesh.n() {
            return Err(Error::Domain(format!(
                "row {} has {} entries, expected {}",
                r + 1,
                values.len() - before,
                mesh.n()
            )));
        }
    }
    CoefficientField::new(mesh, values)
}

/// Horizontal stripes of equal height cycling through `values` from the bottom up.
pub fn layered_field(mesh: &FineMesh, n_layers: usize, values: &[f64]) -> Result<CoefficientField> {
    if n_layers == 0 || values.is_empty() {
        return Err(Error::Domain("layered field needs at least one layer and one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("layer value {v} is not positive")));
    }
    let n = mesh.n();
    let mut out = Vec::with_capacity(mesh.num_cells());
    for j in 0..n {
        let (_, y) = mesh.cell_center(0, j);
        let layer = ((y * n_layers as f64).floor() as usize).min(n_layers - 1);
        let v = values[layer % values.len()];
        out.extend(std::iter::repeat_n(v, n));
    }
    CoefficientField::new(mesh, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned rectangle given by centre and half-widths.
    Rect { cx: f64, cy: f64, hx: f64, hy: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hx, hy } => (x - cx).abs() <= hx && (y - cy).abs() <= hy,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { cx, cy, hx, hy } => (cx - hx, cx + hx, cy - hy, cy + hy),
            Shape::Circle { cx, cy, r } => (cx - r, cx + r, cy - r, cy + r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    #[serde(flatten)]
    pub shape: Shape,
    pub value: f64,
}

impl Inclusion {
    /// Square inclusions of half-width `half` placed on the lattice
    /// `offset + period * (a, b)` for every lattice point inside the domain.
    pub fn square_lattice(period: f64, offset: (f64, f64), half: f64, value: f64) -> Vec<Inclusion> {
        let mut out = Vec::new();
        let count = (1.0 / period).round() as usize + 1;
        for b in 0..count {
            for a in 0..count {
                let cx = offset.0 + a as f64 * period;
                let cy = offset.1 + b as f64 * period;
                if cx - half >= 0.0 && cx + half <= 1.0 && cy - half >= 0.0 && cy + half <= 1.0 {
                    out.push(Inclusion {
                        shape: Shape::Rect { cx, cy, hx: half, hy: half },
                        value,
                    });
                }
            }
        }
        out
    }
}

/// Background value with rectangular or circular inclusions, sampled at fine-cell centres.
pub fn point_field(mesh: &FineMesh, background: f64, inclusions: &[Inclusion]) -> Result<CoefficientField> {
    if !(background > 0.0) {
        return Err(Error::Domain(format!("background value {background} is not positive")));
    }
    for inc in inclusions {
        if !(inc.value > 0.0) {
            return Err(Error::Domain(format!("inclusion value {} is not positive", inc.value)));
        }
        let (x0, x1, y0, y1) = inc.shape.bbox();
        if x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 {
            return Err(Error::Domain(format!("inclusion {:?} leaves the unit square", inc.shape)));
        }
    }
    let n = mesh.n();
    let mut out = Vec::with_capacity(mesh.num_cells());
    for j in 0..n {
        for i in 0..n {
            let (x, y) = mesh.cell_center(i, j);
            let mut v: Option<f64> = None;
            for inc in inclusions.iter().filter(|inc| inc.shape.contains(x, y)) {
                match v {
                    Some(prev) if prev != inc.value => {
                        return Err(Error::Domain(format!(
                            "overlapping inclusions with values {prev} and {} at ({x}, {y})",
                            inc.value
                        )))
                    }
                    _ => v = Some(inc.value),
                }
            }
            out.push(v.unwrap_or(background));
        }
    }
    CoefficientField::new(mesh, out)
}

/// Closed value interval selecting the cells of one coefficient class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueClass {
    pub min: f64,
    pub max: f64,
}

impl ValueClass {
    /// Class matching a single value up to a relative tolerance of 1e-9.
    pub fn exact(v: f64) -> Self {
        let tol = 1e-9 * v.abs();
        Self { min: v - tol, max: v + tol }
    }

    pub fn matches(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Per-continuum fine-cell masks ψ_i.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSet {
    n: usize,
    masks: Vec<Vec<bool>>,
}

impl IndicatorSet {
    /// Builds an indicator set from explicit masks and checks that every continuum has
    /// positive measure in every coarse block.
    pub fn from_masks(mesh: &FineMesh, part: &CoarsePartition, masks: Vec<Vec<bool>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Config("at least one continuum is required".into()));
        }
        if let Some(m) = masks.iter().find(|m| m.len() != mesh.num_cells()) {
            return Err(Error::Config(format!(
                "mask has {} cells, mesh has {}",
                m.len(),
                mesh.num_cells()
            )));
        }
        let set = Self { n: mesh.n(), masks };
        for b in 0..part.num_blocks() {
            for k in 0..set.num_continua() {
                if set.block_count(part, b, k) == 0 {
                    let (bx, by) = part.block_coords(b);
                    return Err(Error::Degenerate(format!(
                        "continuum {} is empty in coarse block {b} (bx={bx}, by={by})",
                        k + 1
                    )));
                }
            }
        }
        Ok(set)
    }

    /// Single continuum covering the whole domain.
    pub fn single(mesh: &FineMesh) -> Self {
        Self {
            n: mesh.n(),
            masks: vec![vec![true; mesh.num_cells()]],
        }
    }

    pub fn num_continua(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, k: usize) -> &[bool] {
        &self.masks[k]
    }

    #[inline]
    pub fn contains(&self, k: usize, i: usize, j: usize) -> bool {
        self.masks[k][j * self.n + i]
    }

    /// Number of fine cells of continuum `k` in a block.
    pub fn block_count(&self, part: &CoarsePartition, block: usize, k: usize) -> usize {
        let (ri, rj) = part.cell_range(block);
        rj.flat_map(|j| ri.clone().map(move |i| (i, j)))
            .filter(|&(i, j)| self.contains(k, i, j))
            .count()
    }

    /// Whether the masks partition the domain (Σ_k ψ_k = 1 on every cell).
    pub fn is_partition(&self) -> bool {
        (0..self.n * self.n).all(|c| self.masks.iter().filter(|m| m[c]).count() == 1)
    }
}

/// Builds continua from coefficient value classes, optionally as unions of classes.
///
/// Without `mixing`, continuum `k` is class `k`. With `mixing`, continuum `k` is the union
/// of the classes listed in `mixing[k]`.
pub fn indicators_from_values(
    field: &CoefficientField,
    mesh: &FineMesh,
    part: &CoarsePartition,
    classes: &[ValueClass],
    mixing: Option<&[Vec<usize>]>,
) -> Result<IndicatorSet> {
    if classes.is_empty() {
        return Err(Error::Config("no value classes given".into()));
    }
    let default_mix: Vec<Vec<usize>> = (0..classes.len()).map(|k| vec![k]).collect();
    let mix = mixing.unwrap_or(&default_mix);
    for (k, members) in mix.iter().enumerate() {
        if members.is_empty() || members.iter().any(|&c| c >= classes.len()) {
            return Err(Error::Config(format!("continuum {} has an invalid class list {members:?}", k + 1)));
        }
    }
    let class_of: Vec<Vec<bool>> = classes
        .iter()
        .map(|c| field.values().iter().map(|&v| c.matches(v)).collect())
        .collect();
    let masks: Vec<Vec<bool>> = mix
        .iter()
        .map(|members| {
            (0..mesh.num_cells())
                .map(|cell| members.iter().any(|&c| class_of[c][cell]))
                .collect()
        })
        .collect();
    if let Some(cell) = (0..mesh.num_cells()).find(|&c| masks.iter().all(|m| !m[c])) {
        return Err(Error::Domain(format!(
            "cell {cell} with value {} belongs to no continuum",
            field.values()[cell]
        )));
    }
    IndicatorSet::from_masks(mesh, part, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_meshes;

    #[test]
    fn single_value_layers_are_constant() {
        let (mesh, _) = build_meshes(16, 4).unwrap();
        let f = layered_field(&mesh, 5, &[1.0]).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
        assert_eq!(f.contrast(), 1.0);
    }

    #[test]
    fn two_value_stripes() {
        let (mesh, _) = build_meshes(16, 4).unwrap();
        let f = layered_field(&mesh, 8, &[1.0, 1000.0]).unwrap();
        assert_eq!(f.contrast(), 1000.0);
        // each stripe is two cells high
        assert_eq!(f.at(3, 0), 1.0);
        assert_eq!(f.at(3, 1), 1.0);
        assert_eq!(f.at(3, 2), 1000.0);
        assert_eq!(f.at(0, 15), 1000.0);
    }

    #[test]
    fn three_value_layers() {
        let (mesh, _) = build_meshes(18, 3).unwrap();
        let f = layered_field(&mesh, 9, &[1.0, 1000.0, 10.0]).unwrap();
        let mut seen: Vec<f64> = f.values().to_vec();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen, vec![1.0, 10.0, 1000.0]);
    }

    #[test]
    fn non_positive_values_rejected() {
        let (mesh, _) = build_meshes(8, 2).unwrap();
        assert!(matches!(layered_field(&mesh, 2, &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(point_field(&mesh, -1.0, &[]).is_err());
    }

    #[test]
    fn point_fields() {
        let (mesh, _) = build_meshes(20, 2).unwrap();
        let plain = point_field(&mesh, 1.0, &[]).unwrap();
        assert!(plain.values().iter().all(|&v| v == 1.0));

        let inc = Inclusion::square_lattice(0.5, (0.25, 0.25), 0.06, 1000.0);
        assert_eq!(inc.len(), 4);
        let f = point_field(&mesh, 1.0, &inc).unwrap();
        assert_eq!(f.at(5, 5), 1000.0);
        assert_eq!(f.at(0, 0), 1.0);

        let mut mixed = inc.clone();
        mixed.extend(Inclusion::square_lattice(0.5, (0.1, 0.1), 0.03, 4.0));
        let f = point_field(&mesh, 1.0, &mixed).unwrap();
        assert_eq!(f.at(2, 2), 4.0);

        let clash = [
            Inclusion { shape: Shape::Circle { cx: 0.5, cy: 0.5, r: 0.1 }, value: 10.0 },
            Inclusion { shape: Shape::Circle { cx: 0.52, cy: 0.5, r: 0.1 }, value: 20.0 },
        ];
        assert!(matches!(point_field(&mesh, 1.0, &clash), Err(Error::Domain(_))));
        let outside = [Inclusion { shape: Shape::Circle { cx: 0.95, cy: 0.5, r: 0.1 }, value: 10.0 }];
        assert!(point_field(&mesh, 1.0, &outside).is_err());
    }

    #[test]
    fn two_value_indicators_partition() {
        let (mesh, part) = build_meshes(16, 4).unwrap();
        let f = layered_field(&mesh, 8, &[1.0, 1000.0]).unwrap();
        let set = indicators_from_values(&f, &mesh, &part, &[ValueClass::exact(1.0), ValueClass::exact(1000.0)], None)
            .unwrap();
        assert_eq!(set.num_continua(), 2);
        assert!(set.is_partition());
    }

    #[test]
    fn uniform_single_class() {
        let (mesh, part) = build_meshes(8, 2).unwrap();
        let f = CoefficientField::uniform(&mesh, 1.0).unwrap();
        let set = indicators_from_values(&f, &mesh, &part, &[ValueClass::exact(1.0)], None).unwrap();
        assert_eq!(set.num_continua(), 1);
        assert!(set.mask(0).iter().all(|&b| b));
    }

    #[test]
    fn pairwise_unions_overlap() {
        let (mesh, part) = build_meshes(18, 3).unwrap();
        let f = layered_field(&mesh, 9, &[1.0, 1000.0, 4.0]).unwrap();
        let classes = [ValueClass::exact(1.0), ValueClass::exact(1000.0), ValueClass::exact(4.0)];
        let mix = vec![vec![0, 1], vec![0, 2], vec![2, 1]];
        let set = indicators_from_values(&f, &mesh, &part, &classes, Some(&mix)).unwrap();
        assert_eq!(set.num_continua(), 3);
        assert!(!set.is_partition());
        // every cell sits in exactly two of the three masks
        for c in 0..mesh.num_cells() {
            assert_eq!((0..3).filter(|&k| set.mask(k)[c]).count(), 2);
        }
    }

    #[test]
    fn empty_continuum_names_block() {
        let (mesh, part) = build_meshes(16, 4).unwrap();
        // one stripe per half of the domain: the top blocks have no low-value cells
        let f = layered_field(&mesh, 2, &[1.0, 1000.0]).unwrap();
        let err = indicators_from_values(&f, &mesh, &part, &[ValueClass::exact(1.0), ValueClass::exact(1000.0)], None)
            .unwrap_err();
        match err {
            Error::Degenerate(msg) => assert!(msg.contains("block"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_files() {
        let (mesh, _) = build_meshes(2, 2).unwrap();
        assert!(parse_field("1.0 1.0\n1.0 -3\n", &mesh).is_err());
        assert!(parse_field("1.0 1.0\n1.0\n", &mesh).is_err());
        assert!(parse_field("1.0 1.0\n", &mesh).is_err());
        let f = parse_field("1.0 2.0\n3.0 4.0\n", &mesh).unwrap();
        // first line is the bottom row
        assert_eq!(f.at(1, 0), 2.0);
        assert_eq!(f.at(0, 1), 3.0);
    }

    #[test]
    fn file_roundtrip_is_bitwise() {
        let (mesh, _) = build_meshes(20, 2).unwrap();
        let vals: Vec<f64> = (0..mesh.num_cells()).map(|k| 1.0 + (k as f64 * 0.7371).sin().abs() * 1e3 / 7.0).collect();
        let f = CoefficientField::new(&mesh, vals).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.txt");
        f.save(&path).unwrap();
        let g = load_field(&path, &mesh).unwrap();
        assert!(f.values().iter().zip(g.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn uniform_file_of_ones() {
        let (mesh, _) = build_meshes(400, 10).unwrap();
        let row = vec!["1.0"; 400].join(" ");
        let text = std::iter::repeat_n(row, 400).collect::<Vec<_>>().join("\n");
        let f = parse_field(&text, &mesh).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
    }
}
