//! Groupwise registration by minimizing weighted match distances in the common space.
//!
//! Linear initialization matches weighted means and variances of each image's matched
//! keypoints to those of their partners. Deformable registration then runs fixed-step
//! gradient descent on one B-spline grid per image and level, keeping the sum of all
//! images' coefficients at zero. A grid that would exceed the displacement bound is frozen
//! and a fresh grid is composed on top of it.

mod energy;

use std::fmt::Write as _;

use log::{debug, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::keypoints::Keypoint;
use crate::matching::MatchGraph;
use crate::robust::{update_all_weights, MixtureParams, ThetaHistory};
use crate::transforms::{diffeo_ok, BasisRow, HalfTransform, SplineGrid, DIFFEO_BOUND};
use crate::Vec3;


/// Fresh grids cover the common-space bounding box plus this many cells per side.
pub const GRID_PADDING_CELLS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Grid spacings in mm, coarse to fine.
    pub levels: Vec<f64>,
    pub iterations_per_level: usize,
    pub alpha: f64,
    pub init_iterations: usize,
    pub gamma: f64,
    pub theta_refresh_period: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            levels: vec![200.0, 100.0, 50.0],
            iterations_per_level: 200,
            alpha: 0.02,
            init_iterations: 50,
            gamma: 0.5,
            theta_refresh_period: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!("grid spacings must be > 0: {:?}", self.levels)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.theta_refresh_period == 0 {
            return Err(Error::invalid("theta_refresh_period must be > 0"));
        }
        Ok(())
    }
}

/// One deformable iteration of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub level: usize,
    pub energy: f64,
    pub mean_weighted_distance: f64,
    /// Weights were refit at the start of this iteration.
    pub refreshed: bool,
    /// The step was cancelled and the grids composed.
    pub composed: bool,
    /// Largest component of `Σᵢ xⁱ` after the iteration.
    pub constraint: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iter,level,energy,sqrt_energy,mean_weighted_distance\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iter,
            r.level,
            r.energy,
            r.energy.sqrt(),
            r.mean_weighted_distance
        );
    }
    s
}

/// Everything the optimizer mutates: transforms, weights and the per-keypoint caches.
#[derive(Debug, Clone)]
pub struct BundleState {
    points: Vec<Vec3>,
    graph: MatchGraph,
    transforms: Vec<HalfTransform>,
    thetas: Vec<Option<MixtureParams>>,
    /// Position after the linear part and the frozen grids.
    base: Vec<Vec3>,
    /// Basis row of `base` in the active grid.
    rows: Vec<Option<BasisRow>>,
    positions: Vec<Vec3>,
    /// Shared per-control step normalization for the active grids.
    precond: Vec<f64>,
    /// `s_m²` per match, refreshed with the weights.
    scale_sq: Vec<f64>,
    trace: Vec<TraceRow>,
    compositions: Vec<usize>,
    theta_history: ThetaHistory,
    iterations_done: usize,
}

impl BundleState {
    /// `points[i]` holds image `i`'s keypoint positions in mm, in the order the graph uses.
    pub fn new(points: Vec<Vec<Vec3>>, graph: MatchGraph) -> Result<Self> {
        if points.len() != graph.n_images() {
            return Err(Error::DimensionMismatch {
                expected: graph.n_images(),
                actual: points.len(),
            });
        }
        for (i, (p, &c)) in points.iter().zip(graph.counts()).enumerate() {
            if p.len() != c {
                return Err(Error::invalid(format!("image {i}: {} points but graph expects {c}", p.len())));
            }
        }
        let n = points.len();
        let flat: Vec<Vec3> = points.into_iter().flatten().collect();
        let mut state = Self {
            base: flat.clone(),
            rows: vec![None; flat.len()],
            positions: flat.clone(),
            points: flat,
            graph,
            transforms: vec![HalfTransform::identity(); n],
            thetas: vec![None; n],
            precond: Vec::new(),
            scale_sq: Vec::new(),
            trace: Vec::new(),
            compositions: Vec::new(),
            theta_history: ThetaHistory::default(),
            iterations_done: 0,
        };
        state.update_scales();
        state.refresh_positions();
        Ok(state)
    }

    pub fn from_keypoints(sets: &[Vec<Keypoint>], graph: MatchGraph) -> Result<Self> {
        Self::new(
            sets.iter().map(|s| s.iter().map(Keypoint::position).collect()).collect(),
            graph,
        )
    }

    pub fn n_images(&self) -> usize {
        self.transforms.len()
    }

    pub fn graph(&self) -> &MatchGraph {
        &self.graph
    }

    pub fn transforms(&self) -> &[HalfTransform] {
        &self.transforms
    }

    pub fn into_transforms(self) -> Vec<HalfTransform> {
        self.transforms
    }

    pub fn thetas(&self) -> &[Option<MixtureParams>] {
        &self.thetas
    }

    pub fn theta_history(&self) -> &ThetaHistory {
        &self.theta_history
    }

    /// Common-space position of every keypoint, indexed globally.
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    /// Image-space keypoint positions, indexed globally.
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    /// Number of freeze-and-compose events per level.
    pub fn compositions(&self) -> &[usize] {
        &self.compositions
    }

    /// Replaces all transforms and rebuilds the caches.
    pub fn set_transforms(&mut self, t: Vec<HalfTransform>) -> Result<()> {
        if t.len() != self.n_images() {
            return Err(Error::DimensionMismatch {
                expected: self.n_images(),
                actual: t.len(),
            });
        }
        self.transforms = t;
        self.refresh_positions();
        Ok(())
    }

    /// Overwrites the match weights (all in `[0, 1]`).
    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        self.graph.set_weights(w)?;
        self.update_scales();
        Ok(())
    }

    /// Active grid coefficients of image `i`.
    pub fn active_coeffs(&self, i: usize) -> Option<&[Vec3]> {
        self.transforms[i].active_grid().map(|g| g.coeffs())
    }

    pub fn set_active_coeffs(&mut self, i: usize, c: &[Vec3]) -> Result<()> {
        let g = self.transforms[i]
            .active_grid_mut()
            .ok_or_else(|| Error::invalid(format!("image {i} has no active grid")))?;
        let dst = g.coeffs_mut()?;
        if dst.len() != c.len() {
            return Err(Error::DimensionMismatch {
                expected: dst.len(),
                actual: c.len(),
            });
        }
        dst.copy_from_slice(c);
        self.update_positions();
        Ok(())
    }

    /// Largest component of `Σᵢ xⁱ` over the active grids.
    pub fn constraint_residual(&self) -> f64 {
        let grids: Vec<&SplineGrid> = self.transforms.iter().filter_map(|t| t.active_grid()).collect();
        let Some(first) = grids.first() else {
            return 0.0;
        };
        (0..first.n_controls())
            .map(|j| grids.iter().map(|g| g.coeffs()[j]).sum::<Vec3>().abs().max())
            .fold(0.0, f64::max)
    }

    /// Recomputes `base`, the basis rows and the common-space positions from the transforms.
    pub fn refresh_positions(&mut self) {
        let Self {
            points,
            graph,
            transforms,
            base,
            rows,
            ..
        } = self;
        for (i, t) in transforms.iter().enumerate() {
            let range = graph.image_range(i);
            let n_fixed = t.grids.len() - usize::from(t.active_grid().is_some());
            let active = t.active_grid();
            base[range.clone()]
                .par_iter_mut()
                .zip(rows[range.clone()].par_iter_mut())
                .zip(points[range].par_iter())
                .for_each(|((b, row), p)| {
                    *b = t.apply_upto(p, n_fixed).0;
                    *row = active.and_then(|g| g.basis_row(b).ok());
                });
        }
        self.update_positions();
    }

    /// `positions = base + B X` for the current active coefficients.
    fn update_positions(&mut self) {
        let Self {
            graph,
            transforms,
            base,
            rows,
            positions,
            ..
        } = self;
        for (i, t) in transforms.iter().enumerate() {
            let range = graph.image_range(i);
            match t.active_grid() {
                Some(g) => {
                    let dims = g.dims();
                    let coeffs = g.coeffs();
                    positions[range.clone()]
                        .par_iter_mut()
                        .zip(base[range.clone()].par_iter())
                        .zip(rows[range].par_iter())
                        .for_each(|((q, b), row)| {
                            *q = match row {
                                Some(r) => b + r.combine(dims, coeffs),
                                None => *b,
                            };
                        });
                }
                None => positions[range.clone()].copy_from_slice(&base[range]),
            }
        }
    }

    /// Refits the per-image mixtures on the current distances and rewrites the weights.
    pub fn refresh_weights(&mut self) {
        self.thetas = update_all_weights(&mut self.graph, &self.positions, &self.thetas);
        self.update_scales();
        self.theta_history.record(self.iterations_done, &self.thetas);
    }

    /// Pushes a fresh zero grid of spacing `g` onto every image, covering the current
    /// common-space extent, and freezes the previous active grids.
    pub fn push_grids(&mut self, spacing: f64) -> Result<()> {
        let (lo, hi) = bounding_box(&self.positions);
        let grid = SplineGrid::covering(lo, hi, spacing, GRID_PADDING_CELLS)?;
        for t in &mut self.transforms {
            if let Some(g) = t.grids.last_mut() {
                g.freeze();
            }
            t.grids.push(grid.clone());
        }
        self.refresh_positions();
        self.update_preconditioner();
        Ok(())
    }

    /// Per control point, the largest over images of `Σ_p b_j(p) L_pp` with `L_pp` the
    /// weighted degree. Dividing the gradient by it bounds the step's curvature, and sharing
    /// it across images keeps the zero-sum projection a descent direction.
    fn update_preconditioner(&mut self) {
        let Some(grid) = self.transforms.first().and_then(|t| t.active_grid()) else {
            self.precond.clear();
            return;
        };
        let dims = grid.dims();
        let nc = grid.n_controls();
        let stiffness = self.point_stiffness();
        let per_image: Vec<Vec<f64>> = (0..self.n_images())
            .into_par_iter()
            .map(|i| {
                let mut mass = vec![0.0; nc];
                for p in self.graph.image_range(i) {
                    if let Some(row) = &self.rows[p] {
                        let l = stiffness[p];
                        row.for_each(dims, |j, b| mass[j] += b * l);
                    }
                }
                mass
            })
            .collect();
        self.precond = (0..nc)
            .map(|j| per_image.iter().map(|m| m[j]).fold(0.0, f64::max))
            .collect();
    }
}

fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    if points.is_empty() {
        return (Vec3::zeros(), Vec3::zeros());
    }
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Weighted mean and variance of the common-space positions on both sides of each image's
/// matches, then the scale-and-shift update, for `cfg.init_iterations` rounds.
pub fn init_linear(state: &mut BundleState, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    if state.transforms.iter().any(|t| !t.grids.is_empty()) {
        return Err(Error::invalid("linear initialization must precede the deformable levels"));
    }
    let n = state.n_images();
    let mut warned = vec![false; n];
    for k in 0..cfg.init_iterations {
        if k.is_multiple_of(cfg.theta_refresh_period) {
            state.refresh_weights();
        }
        let stats: Vec<Option<MatchMoments>> = (0..n).into_par_iter().map(|i| moments(state, i)).collect();
        for (i, s) in stats.into_iter().enumerate() {
            let Some(s) = s else {
                if !warned[i] {
                    warn!("image {i} has no weighted matches; keeping the identity");
                    warned[i] = true;
                }
                continue;
            };
            let lin = &mut state.transforms[i].linear;
            for a in 0..3 {
                let rho = if s.var_a[a] > 0.0 && s.var_b[a] > 0.0 {
                    (s.var_b[a] / s.var_a[a]).powf(cfg.gamma / 2.0)
                } else {
                    1.0
                };
                lin.s[a] *= rho;
                lin.t[a] = rho * lin.t[a] + cfg.gamma * (s.mean_b[a] - s.mean_a[a]) + s.mean_a[a] * (1.0 - rho);
            }
        }
        state.refresh_positions();
    }
    Ok(())
}

struct MatchMoments {
    mean_a: Vec3,
    var_a: Vec3,
    mean_b: Vec3,
    var_b: Vec3,
}

fn moments(state: &BundleState, i: usize) -> Option<MatchMoments> {
    let g = &state.graph;
    let pos = &state.positions;
    let mut w_sum = 0.0;
    let mut sa = Vec3::zeros();
    let mut sb = Vec3::zeros();
    for p in g.image_range(i) {
        for &mi in g.incident(p) {
            let m = &g.matches()[mi as usize];
            let other = if g.global(m.a) == p { m.b } else { m.a };
            w_sum += m.weight;
            sa += m.weight * pos[p];
            sb += m.weight * pos[g.global(other)];
        }
    }
    if !(w_sum > 0.0) {
        return None;
    }
    let mean_a = sa / w_sum;
    let mean_b = sb / w_sum;
    let mut va = Vec3::zeros();
    let mut vb = Vec3::zeros();
    for p in g.image_range(i) {
        for &mi in g.incident(p) {
            let m = &g.matches()[mi as usize];
            let other = if g.global(m.a) == p { m.b } else { m.a };
            va += m.weight * (pos[p] - mean_a).component_mul(&(pos[p] - mean_a));
            let q = pos[g.global(other)] - mean_b;
            vb += m.weight * q.component_mul(&q);
        }
    }
    Some(MatchMoments {
        mean_a,
        var_a: va / w_sum,
        mean_b,
        var_b: vb / w_sum,
    })
}

/// One level of fixed-step descent at grid spacing `spacing`.
pub fn descend_level(state: &mut BundleState, level: usize, spacing: f64, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    state.push_grids(spacing)?;
    if state.compositions.len() <= level {
        state.compositions.resize(level + 1, 0);
    }
    let n = state.n_images();
    let bound = DIFFEO_BOUND * spacing;
    let mut period_start = state.energy();
    for k in 0..cfg.iterations_per_level {
        let refreshed = k.is_multiple_of(cfg.theta_refresh_period);
        if refreshed {
            if let Some(e) = state.trace.last().filter(|_| k > 0).map(|r| r.energy) {
                if e >= period_start {
                    warn!("level {level}, iteration {k}: energy did not decrease over the last period");
                }
            }
            state.refresh_positions();
            state.refresh_weights();
            state.update_preconditioner();
            period_start = state.energy();
        }

        let grad = state.gradient();
        let nc = state.precond.len();
        let mut step = vec![Vec3::zeros(); n * nc];
        for (i, g) in grad.iter().enumerate() {
            for j in 0..nc {
                let beta = state.precond[j];
                if beta > 0.0 {
                    step[i * nc + j] = -cfg.alpha * g[j] / beta;
                }
            }
        }
        // project onto Σᵢ xⁱ = 0
        for j in 0..nc {
            let mean = (0..n).map(|i| step[i * nc + j]).sum::<Vec3>() / n as f64;
            for i in 0..n {
                step[i * nc + j] -= mean;
            }
        }

        let fresh = state
            .transforms
            .iter()
            .all(|t| t.active_grid().is_some_and(|g| g.max_abs_coeff() == 0.0));
        let mut backup = Vec::with_capacity(n);
        for (i, t) in state.transforms.iter_mut().enumerate() {
            let g = t.active_grid_mut().expect("active grid");
            let c = g.coeffs_mut()?;
            backup.push(c.to_vec());
            for (x, s) in c.iter_mut().zip(&step[i * nc..(i + 1) * nc]) {
                *x += s;
            }
        }
        // the projected coefficients sum to zero up to rounding; remove the remainder
        recenter(&mut state.transforms, nc)?;

        let violated = state.transforms.iter().any(|t| !diffeo_ok(t.active_grid().unwrap()));
        let mut composed = false;
        if violated {
            for (t, b) in state.transforms.iter_mut().zip(&backup) {
                t.active_grid_mut().unwrap().coeffs_mut()?.copy_from_slice(b);
            }
            if fresh {
                // a single step from zero already crosses the bound: take the largest
                // admissible fraction of it instead of composing an empty grid
                let max_step = step.iter().map(|s| s.abs().max()).fold(0.0, f64::max);
                let scale = 0.95 * bound / max_step;
                for (i, t) in state.transforms.iter_mut().enumerate() {
                    let c = t.active_grid_mut().unwrap().coeffs_mut()?;
                    for (x, s) in c.iter_mut().zip(&step[i * nc..(i + 1) * nc]) {
                        *x += scale * s;
                    }
                }
                recenter(&mut state.transforms, nc)?;
                state.update_positions();
            } else {
                state.update_positions();
                debug!("level {level}, iteration {k}: displacement bound reached, composing a new grid");
                state.push_grids(spacing)?;
                state.compositions[level] += 1;
                composed = true;
            }
        } else {
            state.update_positions();
        }

        state.iterations_done += 1;
        let (energy, mean_weighted_distance) = state.energy_and_distance();
        let row = TraceRow {
            iter: state.iterations_done,
            level,
            energy,
            mean_weighted_distance,
            refreshed,
            composed,
            constraint: state.constraint_residual(),
        };
        state.trace.push(row);
    }
    Ok(())
}

/// Subtracts the per-control mean over images from the active coefficients.
fn recenter(transforms: &mut [HalfTransform], nc: usize) -> Result<()> {
    let n = transforms.len() as f64;
    let mut mean = vec![Vec3::zeros(); nc];
    for t in transforms.iter() {
        for (m, c) in mean.iter_mut().zip(t.active_grid().unwrap().coeffs()) {
            *m += c;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for t in transforms.iter_mut() {
        for (c, m) in t.active_grid_mut().unwrap().coeffs_mut()?.iter_mut().zip(&mean) {
            *c -= m;
        }
    }
    Ok(())
}

/// Linear initialization followed by every deformable level.
pub fn register(state: &mut BundleState, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    if state.n_images() < 2 {
        return Ok(());
    }
    if state.graph.is_empty() {
        return Err(Error::invalid("empty match graph: nothing to register"));
    }
    init_linear(state, cfg)?;
    register_deformable(state, cfg)
}

/// Every deformable level, then freezes the final grids and refits the weights on the
/// final positions.
pub fn register_deformable(state: &mut BundleState, cfg: &OptimizerConfig) -> Result<()> {
    cfg.validate()?;
    for (level, &g) in cfg.levels.iter().enumerate() {
        descend_level(state, level, g, cfg)?;
    }
    // leave every grid frozen and the weights consistent with the final positions
    for t in &mut state.transforms {
        if let Some(g) = t.grids.last_mut() {
            g.freeze();
        }
    }
    state.refresh_positions();
    state.refresh_weights();
    for (i, t) in state.transforms.iter().enumerate() {
        t.validate()
            .map_err(|e| Error::invalid(format!("image {i}: final transform invalid: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
