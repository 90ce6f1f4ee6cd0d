//! Per-image two-Maxwell mixture over common-space match distances, fitted by EM, and the
//! symmetric inlier weight derived from it.
//!
//! Inlier distances are norms of isotropic Gaussian 3D errors, i.e. Maxwell distributed.
//! Outlier distances are modelled by a second, wider Maxwell component. The mixture is
//! estimated per image, and a match between images `i` and `j` gets the smaller of the two
//! inlier posteriors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchGraph;
use crate::Vec3;

/// Lower bound on any Maxwell scale, in mm.
pub const MIN_SCALE: f64 = 1e-6;
/// EM stops when the relative change of the log-likelihood falls below this.
pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITERATIONS: usize = 200;

/// Mixture parameters of one image: inlier scale `s1`, outlier scale `s2` (both mm) and
/// inlier ratio `r`. `s1 <= s2` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub s1: f64,
    pub s2: f64,
    pub r: f64,
}

impl MixtureParams {
    pub fn new(s1: f64, s2: f64, r: f64) -> Result<Self> {
        if !(s1 > 0.0 && s2 > 0.0) || !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("mixture params out of range: s1={s1} s2={s2} r={r}")));
        }
        Ok(Self { s1, s2, r }.canonical())
    }

    /// A single-component model (every distance is an inlier).
    pub fn single(s: f64) -> Self {
        let s = s.max(MIN_SCALE);
        Self { s1: s, s2: s, r: 1.0 }
    }

    pub fn is_single(&self) -> bool {
        self.r >= 1.0 || self.s1 == self.s2
    }

    /// Swaps labels so the inlier component is the narrower one.
    fn canonical(self) -> Self {
        if self.s1 > self.s2 {
            Self {
                s1: self.s2,
                s2: self.s1,
                r: 1.0 - self.r,
            }
        } else {
            self
        }
    }
}

/// Maxwell density `√(2/π) d²/s³ exp(−d²/2s²)`.
pub fn maxwell_pdf(d: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::invalid(format!("Maxwell scale must be > 0, got {s}")));
    }
    if d < 0.0 {
        return Err(Error::invalid(format!("distance must be >= 0, got {d}")));
    }
    Ok((2.0 / std::f64::consts::PI).sqrt() * d * d / (s * s * s) * (-d * d / (2.0 * s * s)).exp())
}

/// `ln(weight · f(d, s))` without the `ln √(2/π) + 2 ln d` terms, which are shared by
/// both components and cancel in posteriors and likelihood differences.
#[inline]
fn reduced_log_density(d2: f64, s: f64, weight: f64) -> f64 {
    weight.ln() - 3.0 * s.ln() - d2 / (2.0 * s * s)
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// The inlier posterior as a logistic in `d²`: `1 / (1 + exp(a + b d²))`.
#[derive(Debug, Clone, Copy)]
struct Posterior {
    a: f64,
    b: f64,
    fixed: Option<f64>,
}

impl Posterior {
    fn new(theta: &MixtureParams) -> Self {
        if theta.r >= 1.0 || theta.r <= 0.0 {
            let fixed = if theta.r >= 1.0 { 1.0 } else { 0.0 };
            return Self { a: 0.0, b: 0.0, fixed: Some(fixed) };
        }
        // the d² factor of the density cancels, so d = 0 is the analytic limit
        // r/s1³ / (r/s1³ + (1-r)/s2³)
        let l1 = reduced_log_density(0.0, theta.s1, theta.r);
        let l2 = reduced_log_density(0.0, theta.s2, 1.0 - theta.r);
        let b = 0.5 / (theta.s1 * theta.s1) - 0.5 / (theta.s2 * theta.s2);
        Self { a: l2 - l1, b, fixed: None }
    }

    #[inline]
    fn at(&self, d2: f64) -> f64 {
        if let Some(g) = self.fixed {
            return g;
        }
        let z = self.a + self.b * d2;
        if z > 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

/// Probability that a match at distance `d` belongs to the inlier component.
pub fn inlier_posterior(d: f64, theta: &MixtureParams) -> f64 {
    Posterior::new(theta).at(d * d)
}

/// Symmetric match weight: the minimum of the two images' inlier posteriors. An image
/// without a fitted mixture (`None`) does not constrain the weight.
pub fn match_weight(d: f64, theta_i: Option<&MixtureParams>, theta_j: Option<&MixtureParams>) -> f64 {
    let pi = theta_i.map_or(1.0, |t| inlier_posterior(d, t));
    let pj = theta_j.map_or(1.0, |t| inlier_posterior(d, t));
    pi.min(pj)
}

/// Result of [`em_fit`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: MixtureParams,
    /// All distances (nearly) identical: a single component was fitted.
    pub degenerate: bool,
    /// The two-component fit did not beat a single Maxwell by the BIC margin.
    pub single_component: bool,
    pub iterations: usize,
    /// Log-likelihood per iteration, up to an additive constant.
    pub log_likelihood: Vec<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Data-driven starting point: scales from the 25th and 90th distance percentiles.
pub fn default_init(distances: &[f64]) -> MixtureParams {
    let mut sorted: Vec<f64> = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let s1 = (percentile(&sorted, 0.25) / std::f64::consts::SQRT_2).max(MIN_SCALE);
    let mut s2 = (percentile(&sorted, 0.90) / std::f64::consts::SQRT_2).max(MIN_SCALE);
    if s2 <= s1 {
        s2 = 2.0 * s1;
    }
    MixtureParams { s1, s2, r: 0.5 }
}

fn single_scale(d2: &[f64]) -> f64 {
    (d2.iter().sum::<f64>() / (3.0 * d2.len() as f64)).sqrt().max(MIN_SCALE)
}

fn single_log_likelihood(d2: &[f64], s: f64) -> f64 {
    d2.iter().map(|&x| reduced_log_density(x, s, 1.0)).sum()
}

fn mixture_log_likelihood(d2: &[f64], t: &MixtureParams) -> f64 {
    d2.iter()
        .map(|&x| log_add(reduced_log_density(x, t.s1, t.r), reduced_log_density(x, t.s2, 1.0 - t.r)))
        .sum()
}

struct EStep {
    g_sum: f64,
    g_d2: f64,
    h_d2: f64,
    /// Log-likelihood of the parameters the step was computed with.
    ll: f64,
}

/// Posterior sums and log-likelihood in one pass.
fn e_step(d2: &[f64], t: &MixtureParams) -> EStep {
    if t.r <= 0.0 || t.r >= 1.0 {
        let g = if t.r >= 1.0 { 1.0 } else { 0.0 };
        let g_sum = g * d2.len() as f64;
        let total: f64 = d2.iter().sum();
        return EStep {
            g_sum,
            g_d2: g * total,
            h_d2: (1.0 - g) * total,
            ll: mixture_log_likelihood(d2, t),
        };
    }
    let (c1, c2) = (t.r.ln() - 3.0 * t.s1.ln(), (1.0 - t.r).ln() - 3.0 * t.s2.ln());
    let (k1, k2) = (0.5 / (t.s1 * t.s1), 0.5 / (t.s2 * t.s2));
    let mut e = EStep {
        g_sum: 0.0,
        g_d2: 0.0,
        h_d2: 0.0,
        ll: 0.0,
    };
    for &x in d2 {
        let l1 = c1 - k1 * x;
        let l2 = c2 - k2 * x;
        let z = l2 - l1;
        let (g, term) = if z > 0.0 {
            let q = (-z).exp();
            (q / (1.0 + q), l2 + q.ln_1p())
        } else {
            let q = z.exp();
            (1.0 / (1.0 + q), l1 + q.ln_1p())
        };
        e.g_sum += g;
        e.g_d2 += g * x;
        e.h_d2 += (1.0 - g) * x;
        e.ll += term;
    }
    e
}

/// Fits the two-Maxwell mixture to `distances` by EM.
///
/// Starts from `init` when it is a genuine two-component model, otherwise from
/// [`default_init`]. Needs at least two distances.
pub fn em_fit(distances: &[f64], init: Option<MixtureParams>) -> Result<EmFit> {
    if distances.len() < 2 {
        return Err(Error::invalid(format!("EM needs at least 2 distances, got {}", distances.len())));
    }
    if distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::invalid("distances must be finite and non-negative"));
    }
    let d2: Vec<f64> = distances.iter().map(|d| d * d).collect();
    let n = d2.len() as f64;

    let (lo, hi) = distances
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if hi - lo <= 1e-12 * hi.max(1.0) {
        let s = single_scale(&d2);
        return Ok(EmFit {
            params: MixtureParams::single(s),
            degenerate: true,
            single_component: true,
            iterations: 0,
            log_likelihood: vec![single_log_likelihood(&d2, s)],
        });
    }

    let mut theta = match init {
        Some(t) if !t.is_single() && t.r > 0.0 => t.canonical(),
        _ => default_init(distances),
    };
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let ll = loop {
        let e = e_step(&d2, &theta);
        let converged = trace
            .last()
            .is_some_and(|&prev| (e.ll - prev).abs() <= EM_TOLERANCE * e.ll.abs().max(1e-300));
        trace.push(e.ll);
        if converged || iterations == EM_MAX_ITERATIONS || theta.r <= 0.0 || theta.r >= 1.0 {
            break e.ll;
        }
        iterations += 1;
        let h_sum = n - e.g_sum;
        let s1 = if e.g_sum > 0.0 {
            (e.g_d2 / (3.0 * e.g_sum)).sqrt().max(MIN_SCALE)
        } else {
            theta.s1
        };
        let s2 = if h_sum > 0.0 {
            (e.h_d2 / (3.0 * h_sum)).sqrt().max(MIN_SCALE)
        } else {
            theta.s2
        };
        theta = MixtureParams { s1, s2, r: e.g_sum / n }.canonical();
    };

    // two extra parameters must pay for themselves (BIC), otherwise keep one component
    let s = single_scale(&d2);
    let single_ll = single_log_likelihood(&d2, s);
    if ll - single_ll <= n.ln() || theta.r >= 1.0 {
        return Ok(EmFit {
            params: MixtureParams::single(s),
            degenerate: false,
            single_component: true,
            iterations,
            log_likelihood: trace,
        });
    }
    Ok(EmFit {
        params: theta,
        degenerate: false,
        single_component: false,
        iterations,
        log_likelihood: trace,
    })
}

/// Distances of every match, grouped by each of the two images it touches.
fn distances_per_image(graph: &MatchGraph, positions: &[Vec3]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dist: Vec<f64> = graph
        .matches()
        .par_iter()
        .map(|m| (positions[graph.global(m.a)] - positions[graph.global(m.b)]).norm())
        .collect();
    let mut per_image = vec![Vec::new(); graph.n_images()];
    for (m, &d) in graph.matches().iter().zip(&dist) {
        per_image[m.a.image as usize].push(d);
        per_image[m.b.image as usize].push(d);
    }
    (dist, per_image)
}

/// Refits every image's mixture on the current common-space match distances, warm-started
/// from `prior`, and rewrites all match weights. `positions` holds the common-space
/// position of every keypoint, indexed globally. Images with fewer than two incident
/// matches get `None`.
pub fn update_all_weights(
    graph: &mut MatchGraph,
    positions: &[Vec3],
    prior: &[Option<MixtureParams>],
) -> Vec<Option<MixtureParams>> {
    let (dist, per_image) = distances_per_image(graph, positions);
    let thetas: Vec<Option<MixtureParams>> = per_image
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let warm = prior.get(i).copied().flatten();
            em_fit(d, warm).ok().map(|f| f.params)
        })
        .collect();
    let post: Vec<Option<Posterior>> = thetas.iter().map(|t| t.as_ref().map(Posterior::new)).collect();
    graph.matches_mut().par_iter_mut().zip(dist.par_iter()).for_each(|(m, &d)| {
        let d2 = d * d;
        let pa = post[m.a.image as usize].map_or(1.0, |p| p.at(d2));
        let pb = post[m.b.image as usize].map_or(1.0, |p| p.at(d2));
        m.weight = pa.min(pb);
    });
    thetas
}

/// CSV writer for per-image mixture histories: `iter,image,s1,s2,r`.
#[derive(Debug, Default, Clone)]
pub struct ThetaHistory {
    rows: Vec<(usize, usize, MixtureParams)>,
}

impl ThetaHistory {
    pub fn record(&mut self, iter: usize, thetas: &[Option<MixtureParams>]) {
        for (i, t) in thetas.iter().enumerate() {
            if let Some(t) = t {
                self.rows.push((iter, i, *t));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,image,s1,s2,r\n");
        for (it, img, t) in &self.rows {
            s.push_str(&format!("{it},{img},{},{},{}\n", t.s1, t.s2, t.r));
        }
        s
    }
}
