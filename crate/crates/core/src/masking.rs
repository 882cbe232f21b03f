//! Tube masking: one random spatial keep-set shared by every temporal slice.

use ndarray::{Array2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Token layout of a tokenized clip: `temporal_slices x (grid_h * grid_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub temporal_slices: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn new(frames: usize, tubelet: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tubelet == 0 || frames == 0 || frames % tubelet != 0 {
            return Err(Error::config(
                "tubelet",
                format!("{frames} frames are not divisible into tubelets of {tubelet}"),
            ));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::config("grid", "empty spatial grid"));
        }
        Ok(TokenGrid {
            temporal_slices: frames / tubelet,
            grid_h,
            grid_w,
        })
    }

    pub fn spatial(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Total token count I.
    pub fn total(&self) -> usize {
        self.temporal_slices * self.spatial()
    }
}

/// Number of spatial positions kept at mask ratio `ratio`.
pub fn kept_count(spatial: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * spatial as f64).round() as usize).clamp(1, spatial)
}

pub fn check_ratio(key: &str, ratio: f64) -> Result<()> {
    if (0.0..1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("mask ratio must be in [0, 1), got {ratio}"),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TubeMask {
    pub grid: TokenGrid,
    /// Sorted kept spatial positions in `0..S`.
    pub kept_spatial: Vec<usize>,
    pub ratio: f64,
}

impl TubeMask {
    /// Keeps every token.
    pub fn full(grid: TokenGrid) -> Self {
        TubeMask {
            grid,
            kept_spatial: (0..grid.spatial()).collect(),
            ratio: 0.0,
        }
    }

    pub fn from_kept(grid: TokenGrid, mut kept_spatial: Vec<usize>, ratio: f64) -> Result<Self> {
        kept_spatial.sort_unstable();
        kept_spatial.dedup();
        if kept_spatial.is_empty() || kept_spatial.last().is_some_and(|&s| s >= grid.spatial()) {
            return Err(Error::contract(
                "kept positions must be a non-empty subset of 0..S",
            ));
        }
        Ok(TubeMask {
            grid,
            kept_spatial,
            ratio,
        })
    }

    pub fn is_full(&self) -> bool {
        self.kept_spatial.len() == self.grid.spatial()
    }

    pub fn visible_count(&self) -> usize {
        self.grid.temporal_slices * self.kept_spatial.len()
    }

    /// Visible token indices, slice-major then spatial-ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        let s = self.grid.spatial();
        (0..self.grid.temporal_slices)
            .flat_map(|t| self.kept_spatial.iter().map(move |&p| t * s + p))
            .collect()
    }

    /// Complement of [`visible_indices`](Self::visible_indices), in ascending order.
    pub fn masked_indices(&self) -> Vec<usize> {
        let s = self.grid.spatial();
        let mut keep = vec![false; s];
        for &p in &self.kept_spatial {
            keep[p] = true;
        }
        (0..self.grid.total()).filter(|i| !keep[i % s]).collect()
    }
}

/// Draws a tube mask; the kept set is uniform without replacement given `seed`.
pub fn tube_mask(grid: TokenGrid, ratio: f64, seed: u64) -> Result<TubeMask> {
    check_ratio("mask_ratio", ratio)?;
    let s = grid.spatial();
    let k = kept_count(s, ratio);
    if k == s {
        return Ok(TubeMask {
            ratio,
            ..TubeMask::full(grid)
        });
    }
    let mut rng = seed::rng(seed);
    let mut kept = index::sample(&mut rng, s, k).into_vec();
    kept.sort_unstable();
    Ok(TubeMask {
        grid,
        kept_spatial: kept,
        ratio,
    })
}

/// Selects the visible rows of an `I x dim` token matrix.
pub fn apply_mask(tokens: &Array2<f64>, mask: &TubeMask) -> Result<(Array2<f64>, Vec<usize>)> {
    if tokens.nrows() != mask.grid.total() {
        return Err(Error::contract(format!(
            "token matrix has {} rows, mask grid has {}",
            tokens.nrows(),
            mask.grid.total()
        )));
    }
    let idx = mask.visible_indices();
    Ok((tokens.select(Axis(0), &idx), idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_075_on_64_positions() {
        let grid = TokenGrid::new(8, 2, 8, 8).unwrap();
        let m = tube_mask(grid, 0.75, 11).unwrap();
        assert_eq!(m.kept_spatial.len(), 16);
        let vis = m.visible_indices();
        assert_eq!(vis.len(), 64);
        for t in 0..4 {
            let slice: Vec<usize> = vis
                .iter()
                .filter(|&&i| i / 64 == t)
                .map(|i| i % 64)
                .collect();
            assert_eq!(slice, m.kept_spatial);
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let grid = TokenGrid::new(4, 2, 2, 2).unwrap();
        let m = tube_mask(grid, 0.0, 5).unwrap();
        assert!(m.is_full());
        let tokens = Array2::from_shape_fn((8, 3), |(i, j)| (i * 3 + j) as f64);
        let (vis, idx) = apply_mask(&tokens, &m).unwrap();
        assert_eq!(vis, tokens);
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        assert!(m.masked_indices().is_empty());
    }

    #[test]
    fn vit_s_pretrain_ratio_keeps_twenty() {
        let grid = TokenGrid::new(16, 2, 14, 14).unwrap();
        assert_eq!(tube_mask(grid, 0.9, 0).unwrap().kept_spatial.len(), 20);
    }

    #[test]
    fn canonical_order_and_complement() {
        let grid = TokenGrid::new(4, 2, 2, 2).unwrap();
        let m = TubeMask::from_kept(grid, vec![3, 1], 0.5).unwrap();
        assert_eq!(m.visible_indices(), vec![1, 3, 5, 7]);
        assert_eq!(m.masked_indices(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let grid = TokenGrid::new(4, 2, 2, 2).unwrap();
        assert!(tube_mask(grid, 1.0, 0).is_err());
        assert!(tube_mask(grid, -0.1, 0).is_err());
        assert!(TokenGrid::new(7, 2, 2, 2).is_err());
        let m = TubeMask::full(grid);
        assert!(apply_mask(&Array2::zeros((7, 2)), &m).is_err());
    }
}
