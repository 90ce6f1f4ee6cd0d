use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::Vec3;

/// Control displacements must stay below this fraction of the grid step for the grid to be
/// guaranteed invertible.
pub const DIFFEO_BOUND: f64 = 0.4;

#[inline]
pub fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

#[inline]
pub fn cubic_derivatives(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        -0.5 * s * s,
        0.5 * (3.0 * t * t - 4.0 * t),
        0.5 * (-3.0 * t * t + 2.0 * t + 1.0),
        0.5 * t * t,
    ]
}

/// The 4×4×4 block of nonzero basis values at a point: tensor product of the per-axis
/// weights, anchored at control point `first`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisRow {
    /// Flat index of the lowest control point of the block.
    pub first: u32,
    pub weights: [[f64; 4]; 3],
}

impl BasisRow {
    /// Visits the 64 `(control index, basis value)` pairs.
    #[inline]
    pub fn for_each(&self, dims: [usize; 3], mut f: impl FnMut(usize, f64)) {
        let first = self.first as usize;
        let [wx, wy, wz] = &self.weights;
        for (c, &z) in wz.iter().enumerate() {
            for (b, &y) in wy.iter().enumerate() {
                let yz = y * z;
                let row = first + dims[0] * (b + dims[1] * c);
                for (a, &x) in wx.iter().enumerate() {
                    f(row + a, x * yz);
                }
            }
        }
    }

    /// `Σ_j b_j x_j` over the block.
    #[inline]
    pub fn combine(&self, dims: [usize; 3], coeffs: &[Vec3]) -> Vec3 {
        let first = self.first as usize;
        let [wx, wy, wz] = &self.weights;
        let mut out = Vec3::zeros();
        for (c, &z) in wz.iter().enumerate() {
            for (b, &y) in wy.iter().enumerate() {
                let row = first + dims[0] * (b + dims[1] * c);
                let mut acc = Vec3::zeros();
                for (a, &x) in wx.iter().enumerate() {
                    acc += x * coeffs[row + a];
                }
                out += (y * z) * acc;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|w| w.iter().sum::<f64>()).product()
    }
}

/// Uniform cubic B-spline displacement field on an isotropic control lattice.
///
/// Control point `(i, j, k)` sits at `origin + (i - 1, j - 1, k - 1) g`; the field is
/// defined on `origin .. origin + (dims - 3) g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    origin: Vec3,
    spacing: f64,
    dims: [usize; 3],
    coeffs: Vec<Vec3>,
    frozen: bool,
}

impl SplineGrid {
    pub fn new(origin: Vec3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be > 0, got {spacing}")));
        }
        if dims.iter().any(|&d| d < 4) {
            return Err(Error::invalid(format!("grid needs >= 4 control points per axis, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if n > u32::MAX as usize {
            return Err(Error::invalid("grid too large"));
        }
        Ok(Self {
            origin,
            spacing,
            dims,
            coeffs: vec![Vec3::zeros(); n],
            frozen: false,
        })
    }

    /// Grid whose support covers the box `[lo, hi]` plus `pad_cells` cells on every side.
    pub fn covering(lo: Vec3, hi: Vec3, spacing: f64, pad_cells: usize) -> Result<Self> {
        let pad = pad_cells as f64 * spacing;
        let origin = lo - Vec3::repeat(pad);
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let cells = ((hi[a] - lo[a]).max(0.0) / spacing).ceil() as usize + 2 * pad_cells;
            dims[a] = cells.max(1) + 3;
        }
        Self::new(origin, spacing, dims)
    }

    pub fn from_parts(origin: Vec3, spacing: f64, dims: [usize; 3], coeffs: Vec<Vec3>, frozen: bool) -> Result<Self> {
        let mut g = Self::new(origin, spacing, dims)?;
        if coeffs.len() != g.coeffs.len() {
            return Err(Error::DimensionMismatch {
                expected: g.coeffs.len(),
                actual: coeffs.len(),
            });
        }
        g.coeffs = coeffs;
        g.frozen = frozen;
        Ok(g)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_controls(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Vec3] {
        &self.coeffs
    }

    /// Mutable coefficients; fails once the grid is frozen.
    pub fn coeffs_mut(&mut self) -> Result<&mut [Vec3]> {
        if self.frozen {
            return Err(Error::invalid("grid is frozen"));
        }
        Ok(&mut self.coeffs)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Upper corner of the support.
    pub fn support_max(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.dims[0] - 3) as f64,
                (self.dims[1] - 3) as f64,
                (self.dims[2] - 3) as f64,
            ) * self.spacing
    }

    /// Cell index and in-cell parameter per axis, or `None` outside the support.
    #[inline]
    fn locate(&self, p: &Vec3) -> Option<([usize; 3], [f64; 3])> {
        let mut cell = [0usize; 3];
        let mut t = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.spacing;
            let cells = (self.dims[a] - 3) as f64;
            if !(u >= 0.0 && u <= cells) {
                return None;
            }
            let mut i = u.floor();
            if i >= cells {
                // upper boundary belongs to the last cell
                i = cells - 1.0;
            }
            cell[a] = i as usize;
            t[a] = u - i;
        }
        Some((cell, t))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.locate(p).is_some()
    }

    /// Sparse basis row `b(p)`.
    pub fn basis_row(&self, p: &Vec3) -> Result<BasisRow> {
        let (cell, t) = self.locate(p).ok_or(Error::OutsideSupport)?;
        Ok(BasisRow {
            first: (cell[0] + self.dims[0] * (cell[1] + self.dims[1] * cell[2])) as u32,
            weights: [cubic_weights(t[0]), cubic_weights(t[1]), cubic_weights(t[2])],
        })
    }

    /// Displacement at `p`, zero (and `false`) outside the support.
    #[inline]
    pub fn displacement(&self, p: &Vec3) -> (Vec3, bool) {
        match self.basis_row(p) {
            Ok(row) => (row.combine(self.dims, &self.coeffs), true),
            Err(_) => (Vec3::zeros(), false),
        }
    }

    /// Spatial derivative of `p ↦ p + u(p)`.
    pub fn jacobian(&self, p: &Vec3) -> Result<Matrix3<f64>> {
        let (cell, t) = self.locate(p).ok_or(Error::OutsideSupport)?;
        let w = [cubic_weights(t[0]), cubic_weights(t[1]), cubic_weights(t[2])];
        let dw = [cubic_derivatives(t[0]), cubic_derivatives(t[1]), cubic_derivatives(t[2])];
        let inv_g = 1.0 / self.spacing;
        let mut j = Matrix3::identity();
        for c in 0..4 {
            for b in 0..4 {
                for a in 0..4 {
                    let idx = (cell[0] + a) + self.dims[0] * ((cell[1] + b) + self.dims[1] * (cell[2] + c));
                    let x = self.coeffs[idx];
                    let grad = Vec3::new(
                        dw[0][a] * w[1][b] * w[2][c],
                        w[0][a] * dw[1][b] * w[2][c],
                        w[0][a] * w[1][b] * dw[2][c],
                    ) * inv_g;
                    j += x * grad.transpose();
                }
            }
        }
        Ok(j)
    }

    /// Largest absolute control displacement component.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|c| c.abs().max())
            .fold(0.0, f64::max)
    }

    /// Minimum Jacobian determinant over `n³` samples per cell of the support.
    pub fn min_jacobian(&self, samples_per_cell: usize) -> f64 {
        let n = samples_per_cell.max(1);
        let cells = [self.dims[0] - 3, self.dims[1] - 3, self.dims[2] - 3];
        let mut worst = f64::INFINITY;
        let step = self.spacing / n as f64;
        for z in 0..cells[2] * n {
            for y in 0..cells[1] * n {
                for x in 0..cells[0] * n {
                    let p = self.origin + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * step;
                    if let Ok(j) = self.jacobian(&p) {
                        worst = worst.min(j.determinant());
                    }
                }
            }
        }
        worst
    }
}

/// True iff every control displacement component is below `0.4 g`.
pub fn diffeo_ok(grid: &SplineGrid) -> bool {
    grid.max_abs_coeff() < DIFFEO_BOUND * grid.spacing()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_grid(seed: u64, bound: f64) -> SplineGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SplineGrid::new(Vec3::new(-20.0, 5.0, 0.0), 10.0, [6, 5, 7]).unwrap();
        for c in g.coeffs_mut().unwrap() {
            *c = Vec3::new(
                rng.random_range(-bound..bound),
                rng.random_range(-bound..bound),
                rng.random_range(-bound..bound),
            );
        }
        g
    }

    #[test]
    fn knot_and_midpoint_values() {
        let w = cubic_weights(0.0);
        assert_eq!(w, [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0]);
        let m = cubic_weights(0.5);
        for (a, b) in m.iter().zip([1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn knot_row_is_tensor_product() {
        let g = SplineGrid::new(Vec3::zeros(), 10.0, [6, 6, 6]).unwrap();
        let row = g.basis_row(&Vec3::new(10.0, 20.0, 10.0)).unwrap();
        let k = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0];
        assert_eq!(row.weights, [k, k, k]);
        assert_eq!(row.first, (1 + 6 * (2 + 6)) as u32);
        let mut total = 0.0;
        row.for_each(g.dims(), |_, w| total += w);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outside_support() {
        let g = SplineGrid::new(Vec3::zeros(), 10.0, [5, 5, 5]).unwrap();
        assert!(g.basis_row(&Vec3::new(-0.1, 5.0, 5.0)).is_err());
        assert!(g.basis_row(&Vec3::new(20.0, 20.0, 20.0)).is_ok());
        assert!(g.basis_row(&Vec3::new(20.01, 5.0, 5.0)).is_err());
        assert_eq!(g.displacement(&Vec3::new(50.0, 0.0, 0.0)), (Vec3::zeros(), false));
    }

    #[test]
    fn invalid_grids() {
        assert!(SplineGrid::new(Vec3::zeros(), 0.0, [4, 4, 4]).is_err());
        assert!(SplineGrid::new(Vec3::zeros(), 1.0, [3, 4, 4]).is_err());
        let mut g = SplineGrid::new(Vec3::zeros(), 1.0, [4, 4, 4]).unwrap();
        g.freeze();
        assert!(g.coeffs_mut().is_err());
    }

    #[test]
    fn diffeo_threshold() {
        let mut g = SplineGrid::new(Vec3::zeros(), 50.0, [6, 6, 6]).unwrap();
        assert!(diffeo_ok(&g));
        g.coeffs_mut().unwrap()[40] = Vec3::new(0.41 * 50.0, 0.0, 0.0);
        assert!(!diffeo_ok(&g));
        g.coeffs_mut().unwrap()[40] = Vec3::new(0.0, 0.0, -0.4 * 50.0);
        assert!(!diffeo_ok(&g));
    }

    #[test]
    fn bounded_grid_has_positive_jacobian() {
        for seed in 0..5 {
            let mut g = random_grid(seed, 1.0);
            // push every component to ±0.39 g
            for c in g.coeffs_mut().unwrap() {
                *c = c.map(|v| 0.39 * 10.0 * v.signum());
            }
            assert!(diffeo_ok(&g));
            // finite-difference Jacobian on 5 samples per cell
            let n = 5;
            let step = 10.0 / n as f64;
            let h = 1e-4;
            let cells = [3usize, 2, 4];
            for z in 0..cells[2] * n {
                for y in 0..cells[1] * n {
                    for x in 0..cells[0] * n {
                        let p = g.origin() + Vec3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5) * step;
                        let f = |q: Vec3| q + g.displacement(&q).0;
                        let mut j = Matrix3::zeros();
                        for a in 0..3 {
                            let mut e = Vec3::zeros();
                            e[a] = h;
                            j.set_column(a, &((f(p + e) - f(p - e)) / (2.0 * h)));
                        }
                        assert!(j.determinant() > 0.0);
                    }
                }
            }
            assert!(g.min_jacobian(5) > 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn partition_of_unity(x in -20.0f64..10.0, y in 5.0f64..25.0, z in 0.0f64..40.0) {
            let g = random_grid(1, 1.0);
            let row = g.basis_row(&Vec3::new(x, y, z)).unwrap();
            proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            let mut total = 0.0;
            row.for_each(g.dims(), |_, w| total += w);
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constants_are_reproduced(x in -20.0f64..10.0, y in 5.0f64..25.0, z in 0.0f64..40.0) {
            let mut g = random_grid(1, 1.0);
            let v = Vec3::new(1.5, -2.25, 0.75);
            for c in g.coeffs_mut().unwrap() {
                *c = v;
            }
            let (d, inside) = g.displacement(&Vec3::new(x, y, z));
            proptest::prop_assert!(inside);
            proptest::prop_assert!((d - v).norm() < 1e-12);
        }
    }
}
