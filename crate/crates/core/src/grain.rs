//! Granularity sets and the geometry tying regions, per-granularity cell
//! grids, and the finest grid together.
//!
//! A granularity is a downsampling factor f; the ordered set
//! f₁ < f₂ < … < f_K fixes the region size S = f_K (granularity is
//! assigned per S×S image region) and, per granularity, a cell grid of
//! (H/f)×(W/f) positions. Index k is 0-based throughout; k = K−1 is the
//! coarsest granularity.

use crate::error::{Error, Result};

pub const RATIO_SUM_TOL: f64 = 1e-9;

/// Ordered downsampling factors with target assignment ratios and the
/// budget-loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GrainSpec {
    factors: Vec<usize>,
    ratios: Vec<f64>,
    pub lambda: f64,
}

impl GrainSpec {
    pub fn new(factors: Vec<usize>, ratios: Vec<f64>, lambda: f64) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Config("granularity set is empty".into()));
        }
        if factors[0] == 0 {
            return Err(Error::Config("granularity factor 0 is not meaningful".into()));
        }
        if !factors.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config(format!(
                "granularity factors must be strictly increasing, got {factors:?}"
            )));
        }
        let s = *factors.last().unwrap();
        for &f in &factors {
            if s % f != 0 || !(s / f).is_power_of_two() {
                return Err(Error::Config(format!(
                    "region size {s} over factor {f} must be an integer power of 2"
                )));
            }
        }
        if ratios.len() != factors.len() {
            return Err(Error::Config(format!(
                "{} ratios for {} factors",
                ratios.len(),
                factors.len()
            )));
        }
        if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config(format!(
                "ratios must lie in [0,1], got {ratios:?}"
            )));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > RATIO_SUM_TOL {
            return Err(Error::Config(format!(
                "ratios must sum to 1 (±{RATIO_SUM_TOL}), got {sum}"
            )));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!("budget weight must be ≥ 0, got {lambda}")));
        }
        Ok(GrainSpec {
            factors,
            ratios,
            lambda,
        })
    }

    /// Single-granularity spec (the fixed-length baseline).
    pub fn fixed(factor: usize, lambda: f64) -> Result<Self> {
        GrainSpec::new(vec![factor], vec![1.0], lambda)
    }

    pub fn k_g(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, k: usize) -> usize {
        self.factors[k]
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// Region size S: the coarsest factor.
    pub fn region_size(&self) -> usize {
        *self.factors.last().unwrap()
    }

    pub fn finest(&self) -> usize {
        self.factors[0]
    }

    /// Codes a region emits when assigned granularity k: (S/f_k)².
    pub fn codes_per_region(&self, k: usize) -> usize {
        let r = self.region_size() / self.factors[k];
        r * r
    }

    pub fn validate_image(&self, h: usize, w: usize) -> Result<()> {
        for &f in &self.factors {
            if h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "image {h}x{w} not divisible by granularity factor {f}"
                )));
            }
        }
        Ok(())
    }

    /// Mean code count per image implied by the target ratios:
    /// (H/S)·(W/S) · Σ_k r_k·(S/f_k)².
    pub fn expected_code_length(&self, h: usize, w: usize) -> f64 {
        let s = self.region_size();
        let regions = (h / s) * (w / s);
        let per_region: f64 = self
            .ratios
            .iter()
            .enumerate()
            .map(|(k, &r)| r * self.codes_per_region(k) as f64)
            .sum();
        regions as f64 * per_region
    }
}

/// Spec bound to one image size; all index conversions live here.
#[derive(Debug, Clone)]
pub struct GrainGeometry {
    pub spec: GrainSpec,
    pub h: usize,
    pub w: usize,
}

impl GrainGeometry {
    pub fn new(spec: GrainSpec, h: usize, w: usize) -> Result<Self> {
        spec.validate_image(h, w)?;
        Ok(GrainGeometry { spec, h, w })
    }

    pub fn regions_h(&self) -> usize {
        self.h / self.spec.region_size()
    }

    pub fn regions_w(&self) -> usize {
        self.w / self.spec.region_size()
    }

    pub fn regions(&self) -> usize {
        self.regions_h() * self.regions_w()
    }

    pub fn grid_h(&self, k: usize) -> usize {
        self.h / self.spec.factor(k)
    }

    pub fn grid_w(&self, k: usize) -> usize {
        self.w / self.spec.factor(k)
    }

    /// Cell count of granularity k's position map.
    pub fn cells(&self, k: usize) -> usize {
        self.grid_h(k) * self.grid_w(k)
    }

    pub fn finest_cells(&self) -> usize {
        self.cells(0)
    }

    /// Side length of a region in grid-k cells.
    pub fn region_side(&self, k: usize) -> usize {
        self.spec.region_size() / self.spec.factor(k)
    }

    /// Grid-k cells covered by a region, raster order within the block.
    pub fn region_cells(&self, k: usize, region: usize) -> Vec<usize> {
        let side = self.region_side(k);
        let (ry, rx) = (region / self.regions_w(), region % self.regions_w());
        let gw = self.grid_w(k);
        let mut out = Vec::with_capacity(side * side);
        for dy in 0..side {
            for dx in 0..side {
                out.push((ry * side + dy) * gw + (rx * side + dx));
            }
        }
        out
    }

    /// Region containing a grid-k cell.
    pub fn cell_region(&self, k: usize, cell: usize) -> usize {
        let side = self.region_side(k);
        let gw = self.grid_w(k);
        let (cy, cx) = (cell / gw, cell % gw);
        (cy / side) * self.regions_w() + cx / side
    }

    /// Finest-grid cells covered by one grid-k cell, raster order.
    pub fn finest_cells_of(&self, k: usize, cell: usize) -> Vec<usize> {
        let rep = self.spec.factor(k) / self.spec.finest();
        let gw = self.grid_w(k);
        let fw = self.grid_w(0);
        let (cy, cx) = (cell / gw, cell % gw);
        let mut out = Vec::with_capacity(rep * rep);
        for dy in 0..rep {
            for dx in 0..rep {
                out.push((cy * rep + dy) * fw + (cx * rep + dx));
            }
        }
        out
    }

    /// Total codes emitted for an assignment of one granularity per region.
    pub fn dynamic_length(&self, assignments: &[usize]) -> Result<usize> {
        if assignments.len() != self.regions() {
            return Err(Error::Shape {
                op: "dynamic_length",
                lhs: vec![assignments.len()],
                rhs: vec![self.regions()],
            });
        }
        let mut total = 0;
        for (region, &k) in assignments.iter().enumerate() {
            if k >= self.spec.k_g() {
                return Err(Error::Index {
                    what: "granularity",
                    index: k,
                    len: self.spec.k_g(),
                    cell: region,
                });
            }
            total += self.spec.codes_per_region(k);
        }
        Ok(total)
    }
}
