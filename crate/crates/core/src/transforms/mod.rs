//! Per-image half-transforms into the common space: `p ↦ s ∘ p + t`, followed by an ordered
//! stack of cubic B-spline displacement grids evaluated at the already displaced position.

mod bspline;
mod io;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

pub use bspline::{cubic_derivatives, cubic_weights, diffeo_ok, BasisRow, SplineGrid, DIFFEO_BOUND};
pub use io::{load_transform, read_transform, save_transform, write_transform, TRANSFORM_VERSION};

pub const INVERT_TOLERANCE: f64 = 1e-4;
pub const INVERT_MAX_ITERATIONS: usize = 100;

/// Anisotropic scale and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTransform {
    pub s: [f64; 3],
    pub t: [f64; 3],
}

impl Default for LinearTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl LinearTransform {
    pub fn identity() -> Self {
        Self {
            s: [1.0; 3],
            t: [0.0; 3],
        }
    }

    pub fn new(s: [f64; 3], t: [f64; 3]) -> Result<Self> {
        let l = Self { s, t };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.iter().any(|&x| !(x > 0.0 && x.is_finite())) || self.t.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("invalid linear transform {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            self.s[0] * p[0] + self.t[0],
            self.s[1] * p[1] + self.t[1],
            self.s[2] * p[2] + self.t[2],
        )
    }

    #[inline]
    pub fn invert(&self, q: &Vec3) -> Vec3 {
        Vec3::new(
            (q[0] - self.t[0]) / self.s[0],
            (q[1] - self.t[1]) / self.s[1],
            (q[2] - self.t[2]) / self.s[2],
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vec3::from(self.s))
    }
}

/// Result of [`HalfTransform::invert_point`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub point: Vec3,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HalfTransform {
    pub linear: LinearTransform,
    pub grids: Vec<SplineGrid>,
}

impl HalfTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_linear(linear: LinearTransform) -> Self {
        Self {
            linear,
            grids: Vec::new(),
        }
    }

    /// Checks the stack invariants: valid linear part, only the last grid may be active,
    /// every grid within the displacement bound.
    pub fn validate(&self) -> Result<()> {
        self.linear.validate()?;
        let n = self.grids.len();
        for (i, g) in self.grids.iter().enumerate() {
            if i + 1 < n && !g.is_frozen() {
                return Err(Error::invalid(format!("grid {i} of {n} is not frozen")));
            }
            if !diffeo_ok(g) {
                return Err(Error::invalid(format!(
                    "grid {i} exceeds the displacement bound ({} >= {})",
                    g.max_abs_coeff(),
                    DIFFEO_BOUND * g.spacing()
                )));
            }
        }
        Ok(())
    }

    /// The active grid, if the last grid is not frozen.
    pub fn active_grid(&self) -> Option<&SplineGrid> {
        self.grids.last().filter(|g| !g.is_frozen())
    }

    pub fn active_grid_mut(&mut self) -> Option<&mut SplineGrid> {
        self.grids.last_mut().filter(|g| !g.is_frozen())
    }

    /// Maps `p` into the common space.
    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.apply_flagged(p).0
    }

    /// Like [`apply`](Self::apply); the flag is false when some grid was evaluated outside its
    /// support (that grid then contributes no displacement).
    pub fn apply_flagged(&self, p: &Vec3) -> (Vec3, bool) {
        self.apply_upto(p, self.grids.len())
    }

    /// Applies the linear part and the first `n_grids` grids.
    pub fn apply_upto(&self, p: &Vec3, n_grids: usize) -> (Vec3, bool) {
        let mut q = self.linear.apply(p);
        let mut inside = true;
        for g in &self.grids[..n_grids] {
            let (d, ok) = g.displacement(&q);
            q += d;
            inside &= ok;
        }
        (q, inside)
    }

    /// Spatial derivative of [`apply`](Self::apply) at `p`.
    pub fn jacobian(&self, p: &Vec3) -> Result<Matrix3<f64>> {
        let mut q = self.linear.apply(p);
        let mut j = self.linear.matrix();
        for g in &self.grids {
            let jg = g.jacobian(&q)?;
            q += g.displacement(&q).0;
            j = jg * j;
        }
        Ok(j)
    }

    pub fn jacobian_determinant(&self, p: &Vec3) -> Result<f64> {
        Ok(self.jacobian(p)?.determinant())
    }

    /// Solves `apply(p) = q` by Newton iteration from `linear⁻¹(q)`.
    pub fn invert_point(&self, q: &Vec3) -> Inversion {
        let mut p = self.linear.invert(q);
        let mut residual = (self.apply(&p) - q).norm();
        let mut iterations = 0;
        while residual >= INVERT_TOLERANCE && iterations < INVERT_MAX_ITERATIONS {
            iterations += 1;
            let r = self.apply(&p) - q;
            let step = match self.jacobian(&p).ok().and_then(|j| j.lu().solve(&r)) {
                Some(s) => s,
                // outside some support: the map is locally linear there
                None => self.linear.invert(&(r + Vec3::from(self.linear.t))),
            };
            p -= step;
            residual = (self.apply(&p) - q).norm();
        }
        Inversion {
            point: p,
            residual,
            iterations,
            converged: residual < INVERT_TOLERANCE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(g: &mut SplineGrid, rng: &mut ChaCha8Rng, frac: f64) {
        let b = frac * g.spacing();
        for c in g.coeffs_mut().unwrap() {
            *c = Vec3::new(rng.random_range(-b..b), rng.random_range(-b..b), rng.random_range(-b..b));
        }
    }

    /// Linear part plus two frozen grids and one active grid, all near the bound.
    pub(crate) fn random_stack(seed: u64) -> HalfTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let linear = LinearTransform::new([1.1, 0.9, 1.05], [3.0, -2.0, 5.0]).unwrap();
        let mut grids = Vec::new();
        for (g, frozen) in [(40.0, true), (20.0, true), (10.0, false)] {
            let mut grid = SplineGrid::covering(Vec3::repeat(-60.0), Vec3::repeat(60.0), g, 2).unwrap();
            random_coeffs(&mut grid, &mut rng, 0.35);
            if frozen {
                grid.freeze();
            }
            grids.push(grid);
        }
        let t = HalfTransform { linear, grids };
        t.validate().unwrap();
        t
    }

    fn random_point(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
        Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    #[test]
    fn identity_and_constant() {
        let mut t = HalfTransform::identity();
        let p = Vec3::new(1.0, -2.0, 3.5);
        assert_eq!(t.apply(&p), p);
        let mut g = SplineGrid::new(Vec3::repeat(-50.0), 10.0, [14, 14, 14]).unwrap();
        let v = Vec3::new(0.5, -1.0, 2.0);
        for c in g.coeffs_mut().unwrap() {
            *c = v;
        }
        t.grids.push(g);
        assert!((t.apply(&p) - (p + v)).norm() < 1e-12);
        assert!((t.jacobian_determinant(&p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_jacobian() {
        let t = HalfTransform::from_linear(LinearTransform::new([2.0, 1.0, 1.0], [1.0, 2.0, 3.0]).unwrap());
        assert_eq!(t.jacobian_determinant(&Vec3::new(4.0, 5.0, 6.0)).unwrap(), 2.0);
        assert!(LinearTransform::new([0.0, 1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn matches_dense_sum() {
        let t = random_stack(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p = random_point(&mut rng, 50.0);
            // naive oracle: every control point, closed-form basis on the unbounded knot line
            let mut q = t.linear.apply(&p);
            for g in &t.grids {
                let dims = g.dims();
                let mut d = Vec3::zeros();
                for k in 0..dims[2] {
                    for j in 0..dims[1] {
                        for i in 0..dims[0] {
                            let u = (q - g.origin()) / g.spacing();
                            let w = naive_basis(u[0] - i as f64 + 1.0)
                                * naive_basis(u[1] - j as f64 + 1.0)
                                * naive_basis(u[2] - k as f64 + 1.0);
                            d += w * g.coeffs()[i + dims[0] * (j + dims[1] * k)];
                        }
                    }
                }
                q += d;
            }
            assert!((t.apply(&p) - q).norm() < 1e-10);
        }
    }

    /// Centered cubic B-spline with support (-2, 2).
    fn naive_basis(x: f64) -> f64 {
        let a = x.abs();
        if a < 1.0 {
            (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
        } else if a < 2.0 {
            (2.0 - a).powi(3) / 6.0
        } else {
            0.0
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let t = random_stack(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 0.01;
        for _ in 0..200 {
            let p = random_point(&mut rng, 45.0);
            let mut fd = Matrix3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                fd.set_column(a, &((t.apply(&(p + e)) - t.apply(&(p - e))) / (2.0 * h)));
            }
            let exact = t.jacobian_determinant(&p).unwrap();
            assert!(exact > 0.0);
            assert!(((fd.determinant() - exact) / exact).abs() < 1e-5);
        }
    }

    #[test]
    fn jacobian_outside_support_errors() {
        let t = random_stack(1);
        assert!(t.jacobian(&Vec3::repeat(500.0)).is_err());
        let (_, inside) = t.apply_flagged(&Vec3::repeat(500.0));
        assert!(!inside);
    }

    #[test]
    fn inversion() {
        let p = Vec3::new(3.0, 4.0, 5.0);
        let inv = HalfTransform::identity().invert_point(&p);
        assert_eq!(inv.point, p);
        assert!(inv.converged);

        let shift = HalfTransform::from_linear(LinearTransform::new([1.0; 3], [1.0, -2.0, 0.5]).unwrap());
        let inv = shift.invert_point(&p);
        assert!((inv.point - Vec3::new(2.0, 6.0, 4.5)).norm() < 1e-12);

        let t = random_stack(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let q = random_point(&mut rng, 45.0);
            let inv = t.invert_point(&q);
            assert!(inv.converged, "{inv:?}");
            assert!((t.apply(&inv.point) - q).norm() < INVERT_TOLERANCE);
        }
    }

    #[test]
    fn sampled_composition_agrees() {
        // pre-sample the composed map on a 1 mm lattice and interpolate trilinearly
        let t = random_stack(5);
        let n = 41;
        let lo = -20.0;
        let samples: Vec<Vec3> = (0..n * n * n)
            .map(|i| {
                let p = Vec3::new((i % n) as f64, ((i / n) % n) as f64, (i / (n * n)) as f64) + Vec3::repeat(lo);
                t.apply(&p)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let p = random_point(&mut rng, 19.0);
            let u = p - Vec3::repeat(lo);
            let i = u.map(|x| x.floor());
            let f = u - i;
            let mut acc = Vec3::zeros();
            for c in 0..8 {
                let o = [c & 1, (c >> 1) & 1, c >> 2];
                let idx = (i[0] as usize + o[0]) + n * ((i[1] as usize + o[1]) + n * (i[2] as usize + o[2]));
                let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
                acc += w * samples[idx];
            }
            // 1 mm lattice against a 10 mm finest grid: curvature error well below 0.1 mm
            assert!((acc - t.apply(&p)).norm() < 0.1);
        }
    }

    #[test]
    fn stack_positive_jacobian_on_cells() {
        let t = random_stack(9);
        for g in &t.grids {
            assert!(diffeo_ok(g));
            assert!(g.min_jacobian(5) > 0.0);
        }
    }

    #[test]
    fn validate_rejects_active_middle_grid() {
        let mut t = random_stack(2);
        let g = SplineGrid::new(Vec3::zeros(), 10.0, [4, 4, 4]).unwrap();
        t.grids.push(g);
        assert!(t.validate().is_err());
    }
}
