//! Rectangular spatial grids, resolution ladders and the normalized
//! distance geometry the RBF kernel is built on.
//!
//! Cells are indexed row-major within a grid, and that ordering is fixed
//! globally: kernel matrices, weight tensors and exports all agree on it.

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

/// One rectangular discretization: per-axis cell counts over a fixed
/// physical extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Per-axis cell counts, e.g. `[4, 5]`.
    pub dims: Vec<usize>,
    /// Per-axis physical range as `(min, max)`.
    pub extent: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn new(dims: Vec<usize>, extent: Vec<(f64, f64)>) -> Result<Self> {
        if dims.is_empty() || dims.len() != extent.len() {
            return Err(Error::InvalidArg(format!(
                "grid dims {:?} and extent {:?} must be non-empty and the same length",
                dims, extent
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg("grid dims must be >= 1 per axis".into()));
        }
        if extent.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidArg("grid extent must satisfy min < max per axis".into()));
        }
        Ok(GridSpec { dims, extent })
    }

    /// Unit square/cube helper: every axis spans [0, 1].
    pub fn unit(dims: Vec<usize>) -> Result<Self> {
        let extent = vec![(0.0, 1.0); dims.len()];
        GridSpec::new(dims, extent)
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_axes(&self) -> usize {
        self.dims.len()
    }

    /// Corner-to-corner diameter of the extent.
    pub fn diameter(&self) -> f64 {
        self.extent
            .iter()
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    /// Per-axis integer refinement ratios from `self` (coarse) to `fine`,
    /// or an error if `fine` does not refine this grid.
    pub fn refinement_ratios(&self, fine: &GridSpec) -> Result<Vec<usize>> {
        if self.dims.len() != fine.dims.len() || self.extent != fine.extent {
            return Err(Error::InvalidArg(format!(
                "grids {:?} and {:?} do not share axes/extent",
                self.dims, fine.dims
            )));
        }
        self.dims
            .iter()
            .zip(&fine.dims)
            .enumerate()
            .map(|(axis, (&c, &f))| {
                if f % c == 0 && f >= c {
                    Ok(f / c)
                } else {
                    Err(Error::InvalidArg(format!(
                        "axis {axis}: {f} cells do not refine {c} by an integer ratio"
                    )))
                }
            })
            .collect()
    }

    /// Decomposes a row-major cell index into per-axis coordinates.
    pub fn cell_coords(&self, cell: usize) -> Vec<usize> {
        let mut rem = cell;
        let mut coords = vec![0usize; self.dims.len()];
        for axis in (0..self.dims.len()).rev() {
            coords[axis] = rem % self.dims[axis];
            rem /= self.dims[axis];
        }
        coords
    }

    /// Row-major cell index from per-axis coordinates.
    pub fn cell_index(&self, coords: &[usize]) -> usize {
        let mut idx = 0usize;
        for (axis, &c) in coords.iter().enumerate() {
            idx = idx * self.dims[axis] + c;
        }
        idx
    }
}

/// Physical center of every cell, row-major; centers lie strictly inside
/// the extent.
pub fn cell_centers(g: &GridSpec) -> Vec<Vec<f64>> {
    let n = g.cell_count();
    let mut centers = Vec::with_capacity(n);
    for cell in 0..n {
        let coords = g.cell_coords(cell);
        let center: Vec<f64> = coords
            .iter()
            .zip(g.dims.iter().zip(&g.extent))
            .map(|(&c, (&d, (lo, hi)))| {
                let width = (hi - lo) / d as f64;
                lo + (c as f64 + 0.5) * width
            })
            .collect();
        centers.push(center);
    }
    centers
}

/// Pairwise center distances divided by the extent diameter, so the scale
/// is resolution independent and every entry lies in [0, 1]. A single-cell
/// grid yields the 1x1 zero matrix.
pub fn normalized_distances(g: &GridSpec) -> Matrix {
    let centers = cell_centers(g);
    let n = centers.len();
    let diam = g.diameter();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d2.sqrt() / diam;
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Ordered grid refinements over one shared extent. `r0` is the 1-based
/// count of levels trained full rank; the low-rank stage starts at level
/// `r0 - 1` (the resolution the full-rank stage ended on) and runs to the
/// last level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionLadder {
    pub levels: Vec<GridSpec>,
    pub r0: usize,
}

impl ResolutionLadder {
    pub fn new(levels: Vec<GridSpec>, r0: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArg("ladder needs at least one level".into()));
        }
        if r0 < 1 || r0 > levels.len() {
            return Err(Error::InvalidArg(format!(
                "r0 = {} must lie in 1..={}",
                r0,
                levels.len()
            )));
        }
        for w in levels.windows(2) {
            let ratios = w[0].refinement_ratios(&w[1])?;
            if w[1].cell_count() <= w[0].cell_count() {
                return Err(Error::InvalidArg(
                    "ladder cell counts must be strictly increasing".into(),
                ));
            }
            debug_assert!(ratios.iter().all(|&r| r >= 1));
        }
        Ok(ResolutionLadder { levels, r0 })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Levels trained with the full-rank model: indices `0..r0`.
    pub fn full_rank_levels(&self) -> &[GridSpec] {
        &self.levels[..self.r0]
    }

    /// Levels trained with the low-rank model: indices `r0-1..`.
    pub fn low_rank_levels(&self) -> &[GridSpec] {
        &self.levels[self.r0 - 1..]
    }

    pub fn finest(&self) -> &GridSpec {
        self.levels.last().expect("ladder is non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_center_is_midpoint() {
        let g = GridSpec::unit(vec![1]).unwrap();
        let centers = cell_centers(&g);
        assert_eq!(centers, vec![vec![0.5]]);
    }

    #[test]
    fn two_cell_centers() {
        let g = GridSpec::unit(vec![2]).unwrap();
        let centers = cell_centers(&g);
        assert_eq!(centers, vec![vec![0.25], vec![0.75]]);
    }

    #[test]
    fn two_by_two_centers_match_enumeration() {
        let g = GridSpec::unit(vec![2, 2]).unwrap();
        let centers = cell_centers(&g);
        // Row-major: (row, col) with col fastest.
        let want = vec![
            vec![0.25, 0.25],
            vec![0.25, 0.75],
            vec![0.75, 0.25],
            vec![0.75, 0.75],
        ];
        for (c, w) in centers.iter().zip(&want) {
            for (a, b) in c.iter().zip(w) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_cell_distances_degenerate() {
        let g = GridSpec::unit(vec![1]).unwrap();
        let d = normalized_distances(&g);
        assert_eq!((d.rows(), d.cols()), (1, 1));
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn two_cell_distance_half() {
        let g = GridSpec::unit(vec![2]).unwrap();
        let d = normalized_distances(&g);
        assert!((d.get(0, 1) - 0.5).abs() < 1e-15);
        assert!((d.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distances_symmetric_zero_diagonal_in_unit_range() {
        let g = GridSpec::unit(vec![3, 4]).unwrap();
        let d = normalized_distances(&g);
        for i in 0..12 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..12 {
                assert_eq!(d.get(i, j), d.get(j, i));
                assert!(d.get(i, j) >= 0.0 && d.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn colocated_centers_agree_across_levels() {
        // Coarse cell centers vs the fine centers of the cells they contain:
        // distance between physically co-located pairs stays within one fine
        // cell width after normalization changes are accounted for.
        let coarse = GridSpec::unit(vec![2, 2]).unwrap();
        let fine = GridSpec::unit(vec![4, 4]).unwrap();
        let cc = cell_centers(&coarse);
        let fc = cell_centers(&fine);
        let fine_width = 0.25f64;
        for (ci, c) in cc.iter().enumerate() {
            // Nearest fine center to each coarse center.
            let best = fc
                .iter()
                .map(|f| {
                    f.iter()
                        .zip(c)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best <= fine_width * 1.5_f64.sqrt() + 1e-12, "cell {ci}: {best}");
        }
    }

    #[test]
    fn ladder_validates_refinement() {
        let l1 = GridSpec::unit(vec![2, 2]).unwrap();
        let l2 = GridSpec::unit(vec![4, 4]).unwrap();
        let l3 = GridSpec::unit(vec![3, 4]).unwrap();
        assert!(ResolutionLadder::new(vec![l1.clone(), l2.clone()], 1).is_ok());
        assert!(ResolutionLadder::new(vec![l1.clone(), l3], 1).is_err());
        assert!(ResolutionLadder::new(vec![l1, l2], 3).is_err());
    }

    #[test]
    fn ladder_stage_slices() {
        let levels: Vec<GridSpec> = [[2usize, 2], [4, 4], [8, 8]]
            .iter()
            .map(|d| GridSpec::unit(d.to_vec()).unwrap())
            .collect();
        let ladder = ResolutionLadder::new(levels, 2).unwrap();
        assert_eq!(ladder.full_rank_levels().len(), 2);
        let low = ladder.low_rank_levels();
        assert_eq!(low.len(), 2);
        assert_eq!(low[0].dims, vec![4, 4]);
    }
}
