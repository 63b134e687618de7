//! Analysis-operator layouts built from blocks of local and global filters.
//!
//! A block `fFsSnC` places `C` filters of footprint `F x F` on a grid of
//! positions with stride `S` inside a square patch. Each (filter, position)
//! pair is one row of `L`, nonzero only on its footprint. A block whose
//! footprint equals the patch side is a set of dense global rows.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub filter: usize,
    pub stride: usize,
    pub count: usize,
}

impl FeatureBlock {
    /// Positions per axis inside a patch of side `side`.
    pub fn positions_per_axis(&self, side: usize) -> usize {
        (side - self.filter) / self.stride + 1
    }

    pub fn rows(&self, side: usize) -> usize {
        let m = self.positions_per_axis(side);
        self.count * m * m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDesign {
    pub blocks: Vec<FeatureBlock>,
    pub patch_side: usize,
}

impl FeatureDesign {
    pub fn new(blocks: Vec<FeatureBlock>, patch_side: usize) -> Result<Self> {
        let design = Self { blocks, patch_side };
        design.validate()?;
        Ok(design)
    }

    /// Parses `"f5s2n30+f7s3n30+f10s10n30"`.
    pub fn parse(spec: &str, patch_side: usize) -> Result<Self> {
        let blocks = spec
            .split('+')
            .map(|b| b.trim().parse())
            .collect::<Result<Vec<FeatureBlock>>>()?;
        Self::new(blocks, patch_side)
    }

    /// The 420 x 100 layout used for 10 x 10 patches.
    pub fn standard() -> Self {
        Self::parse("f5s2n30+f7s3n30+f10s10n30", 10).expect("valid built-in design")
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(Error::FeatureDesign("patch side must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::FeatureDesign("design has no blocks".into()));
        }
        for b in &self.blocks {
            if b.filter == 0 || b.stride == 0 || b.count == 0 {
                return Err(Error::FeatureDesign(format!("degenerate block {b}")));
            }
            if b.filter > self.patch_side {
                return Err(Error::FeatureDesign(format!(
                    "filter of block {b} exceeds patch side {}",
                    self.patch_side
                )));
            }
        }
        Ok(())
    }

    /// Row count `P`.
    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows(self.patch_side)).sum()
    }

    /// Pixel count `N`.
    pub fn cols(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Support mask, rows ordered by block, then filter, then position
    /// (row-major over the position grid).
    pub fn support_mask(&self) -> Array2<bool> {
        let side = self.patch_side;
        let mut mask = Array2::from_elem((self.rows(), self.cols()), false);
        let mut row = 0;
        for b in &self.blocks {
            let m = b.positions_per_axis(side);
            for _ in 0..b.count {
                for pi in 0..m {
                    for pj in 0..m {
                        let (r0, c0) = (pi * b.stride, pj * b.stride);
                        for r in r0..r0 + b.filter {
                            for c in c0..c0 + b.filter {
                                mask[[row, r * side + c]] = true;
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        mask
    }
}

impl fmt::Display for FeatureBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}s{}n{}", self.filter, self.stride, self.count)
    }
}

impl fmt::Display for FeatureDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for FeatureBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::FeatureDesign(s.to_string());
        let rest = s.strip_prefix('f').ok_or_else(bad)?;
        let (filter, rest) = rest.split_once('s').ok_or_else(bad)?;
        let (stride, count) = rest.split_once('n').ok_or_else(bad)?;
        Ok(FeatureBlock {
            filter: filter.parse().map_err(|_| bad())?,
            stride: stride.parse().map_err(|_| bad())?,
            count: count.parse().map_err(|_| bad())?,
        })
    }
}

/// Draws `L` with i.i.d. `N(0, std^2)` entries on the design's support and
/// zeros elsewhere. Returns `(L, mask)`.
pub fn build_feature_operator(design: &FeatureDesign, seed: u64, std: f64) -> Result<(Array2<f64>, Array2<bool>)> {
    design.validate()?;
    crate::error::check_positive("std", std)?;
    let mask = design.support_mask();
    let normal = Normal::new(0.0, std).map_err(|e| Error::param("std", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Array2::zeros(mask.dim());
    for (v, &m) in l.iter_mut().zip(mask.iter()) {
        if m {
            *v = normal.sample(&mut rng);
        }
    }
    Ok((l, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_design_is_420_by_100() {
        let d = FeatureDesign::standard();
        assert_eq!((d.rows(), d.cols()), (420, 100));
        assert_eq!(d.to_string(), "f5s2n30+f7s3n30+f10s10n30");
    }

    #[test]
    fn single_global_row_is_dense() {
        let d = FeatureDesign::parse("f10s10n1", 10).unwrap();
        let (l, mask) = build_feature_operator(&d, 1, 1e-2).unwrap();
        assert_eq!(l.dim(), (1, 100));
        assert!(mask.iter().all(|&m| m));
        assert!(l.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_designs() {
        assert!(FeatureDesign::parse("f11s1n1", 10).is_err());
        assert!(FeatureDesign::parse("f3s0n1", 10).is_err());
        assert!(FeatureDesign::parse("g3s1n1", 10).is_err());
        assert!(FeatureDesign::parse("f3s1", 10).is_err());
        assert!(FeatureDesign::parse("f3s1n0", 10).is_err());
    }

    #[test]
    fn same_seed_same_operator() {
        let d = FeatureDesign::standard();
        let a = build_feature_operator(&d, 9, 1e-2).unwrap();
        let b = build_feature_operator(&d, 9, 1e-2).unwrap();
        assert_eq!(a, b);
        let c = build_feature_operator(&d, 10, 1e-2).unwrap();
        assert_ne!(a.0, c.0);
    }
}
