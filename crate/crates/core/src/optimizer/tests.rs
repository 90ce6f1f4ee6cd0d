use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::matching::{Match, PointRef};

/// `n_images` images of `n_points` random points in the 10 mm cube, random cross-image
/// matches with random weights, each image carrying one active 4×4×4 grid with random
/// coefficients.
pub(crate) fn random_instance(seed: u64, n_images: usize, n_points: usize) -> BundleState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<Vec3>> = (0..n_images)
        .map(|_| {
            (0..n_points)
                .map(|_| Vec3::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)))
                .collect()
        })
        .collect();
    let mut matches = Vec::new();
    for _ in 0..n_points * n_images {
        let a = rng.random_range(0..n_images);
        let mut b = rng.random_range(0..n_images - 1);
        if b >= a {
            b += 1;
        }
        let mut m = Match::new(
            PointRef::new(a as u32, rng.random_range(0..n_points) as u32),
            PointRef::new(b as u32, rng.random_range(0..n_points) as u32),
            0.1,
        );
        m.weight = rng.random_range(0.1..1.0);
        matches.push(m);
    }
    let graph = MatchGraph::new(vec![n_points; n_images], matches).unwrap();
    let mut state = BundleState::new(points, graph).unwrap();
    let transforms = (0..n_images)
        .map(|_| {
            let mut g = SplineGrid::new(Vec3::zeros(), 10.0, [4, 4, 4]).unwrap();
            for c in g.coeffs_mut().unwrap() {
                *c = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            HalfTransform {
                linear: LinearTransform::new(
                    [rng.random_range(0.9..1.0), rng.random_range(0.9..1.0), rng.random_range(0.9..1.0)],
                    [0.0; 3],
                )
                .unwrap(),
                grids: vec![g],
            }
        })
        .collect();
    state.set_transforms(transforms).unwrap();
    state
}

use crate::transforms::LinearTransform;

fn matched_copies(n_images: usize, pts: &[Vec3]) -> BundleState {
    let mut matches = Vec::new();
    for a in 0..n_images {
        for b in a + 1..n_images {
            for k in 0..pts.len() {
                matches.push(Match::new(PointRef::new(a as u32, k as u32), PointRef::new(b as u32, k as u32), 0.0));
            }
        }
    }
    let graph = MatchGraph::new(vec![pts.len(); n_images], matches).unwrap();
    BundleState::new(vec![pts.to_vec(); n_images], graph).unwrap()
}

fn cloud(seed: u64, n: usize, r: f64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)))
        .collect()
}

#[test]
fn single_match_energy() {
    let d = 3.5;
    let graph = MatchGraph::new(
        vec![1, 1],
        vec![Match::new(PointRef::new(0, 0), PointRef::new(1, 0), 0.0)],
    )
    .unwrap();
    let state = BundleState::new(vec![vec![Vec3::zeros()], vec![Vec3::new(0.0, d, 0.0)]], graph).unwrap();
    assert!((state.energy() - 2.0 * d * d).abs() < 1e-12);
    assert!((state.energy_grouped() - 2.0 * d * d).abs() < 1e-12);
    assert!((state.mean_weighted_distance() - d).abs() < 1e-12);
}

#[test]
fn traversal_equals_grouped() {
    for seed in 0..10 {
        let s = random_instance(seed, 4, 30);
        let (a, b) = (s.energy(), s.energy_grouped());
        assert!(((a - b) / a).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn aligned_state_has_zero_energy_and_gradient() {
    let mut s = matched_copies(3, &cloud(1, 40, 50.0));
    assert_eq!(s.energy(), 0.0);
    s.push_grids(50.0).unwrap();
    for g in s.gradient() {
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }
}

/// Central differences of the energy in every active coefficient.
pub(crate) fn finite_difference_gradient(s: &mut BundleState, h: f64) -> Vec<Vec<Vec3>> {
    (0..s.n_images())
        .map(|i| {
            let x0 = s.active_coeffs(i).unwrap().to_vec();
            let mut out = vec![Vec3::zeros(); x0.len()];
            for j in 0..x0.len() {
                for a in 0..3 {
                    let mut x = x0.clone();
                    x[j][a] += h;
                    s.set_active_coeffs(i, &x).unwrap();
                    let ep = s.energy();
                    x[j][a] -= 2.0 * h;
                    s.set_active_coeffs(i, &x).unwrap();
                    let em = s.energy();
                    out[j][a] = (ep - em) / (2.0 * h);
                }
            }
            s.set_active_coeffs(i, &x0).unwrap();
            out
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..3 {
        let mut s = random_instance(seed, 3, 20);
        let g = s.gradient();
        let fd = finite_difference_gradient(&mut s, 1e-4);
        let scale = g.iter().flatten().map(|v| v.abs().max()).fold(0.0, f64::max);
        for (gi, fi) in g.iter().zip(&fd) {
            for (a, b) in gi.iter().zip(fi) {
                assert!((a - b).abs().max() <= 1e-5 * a.abs().max().max(1e-3 * scale), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn common_shift_leaves_gradient_unchanged() {
    let mut s = random_instance(4, 3, 25);
    let g0 = s.gradient();
    let v = Vec3::new(0.3, -0.2, 0.1);
    for i in 0..3 {
        let x: Vec<Vec3> = s.active_coeffs(i).unwrap().iter().map(|c| c + v).collect();
        s.set_active_coeffs(i, &x).unwrap();
    }
    for (a, b) in g0.iter().flatten().zip(s.gradient().iter().flatten()) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn init_keeps_aligned_sets() {
    let mut s = matched_copies(2, &cloud(2, 100, 80.0));
    init_linear(&mut s, &OptimizerConfig::default()).unwrap();
    for (p, q) in s.positions()[..100].iter().zip(&s.positions()[100..]) {
        assert!((p - q).norm() < 1e-6);
    }
}

fn similarity_pair(outlier_fraction: f64) -> (BundleState, f64) {
    let a = cloud(3, 300, 100.0);
    let b: Vec<Vec3> = a.iter().map(|p| 2.0 * p + Vec3::new(10.0, 0.0, 0.0)).collect();
    let mut matches: Vec<Match> = (0..a.len())
        .map(|k| Match::new(PointRef::new(0, k as u32), PointRef::new(1, k as u32), 0.0))
        .collect();
    let n_out = (outlier_fraction / (1.0 - outlier_fraction) * a.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    while matches.len() < a.len() + n_out {
        let i = rng.random_range(0..a.len() as u32);
        let j = rng.random_range(0..a.len() as u32);
        if i != j {
            matches.push(Match::new(PointRef::new(0, i), PointRef::new(1, j), 0.0));
        }
    }
    let graph = MatchGraph::new(vec![a.len(); 2], matches).unwrap();
    let diameter = (0..a.len())
        .flat_map(|i| (0..a.len()).map(move |j| (i, j)))
        .map(|(i, j)| (a[i] - a[j]).norm())
        .fold(0.0, f64::max);
    (BundleState::new(vec![a, b], graph).unwrap(), diameter)
}

#[test]
fn init_recovers_similarity() {
    for outliers in [0.0, 0.3] {
        let (mut s, diameter) = similarity_pair(outliers);
        init_linear(&mut s, &OptimizerConfig::default()).unwrap();
        let n = s.graph().counts()[0];
        let worst = (0..n)
            .map(|k| (s.positions()[k] - s.positions()[n + k]).norm())
            .fold(0.0, f64::max);
        assert!(worst < 0.01 * diameter, "outliers {outliers}: {worst} vs diameter {diameter}");
    }
}

#[test]
fn aligned_group_stays_at_zero() {
    let mut s = matched_copies(3, &cloud(6, 60, 100.0));
    let cfg = OptimizerConfig {
        iterations_per_level: 30,
        ..Default::default()
    };
    init_linear(&mut s, &cfg).unwrap();
    descend_level(&mut s, 0, 100.0, &cfg).unwrap();
    for i in 0..3 {
        assert!(s.active_coeffs(i).unwrap().iter().all(|c| c.abs().max() < 1e-9));
    }
}

#[test]
fn descent_is_monotone_between_refreshes() {
    let mut s = random_instance(8, 4, 50);
    // start from a fresh grid on top of the random one
    let cfg = OptimizerConfig {
        iterations_per_level: 40,
        ..Default::default()
    };
    descend_level(&mut s, 0, 5.0, &cfg).unwrap();
    let trace = s.trace();
    for w in trace.windows(2) {
        if !w[1].refreshed && !w[1].composed {
            assert!(w[1].energy <= w[0].energy * (1.0 + 1e-12), "{:?} -> {:?}", w[0], w[1]);
        }
        assert!(w[1].constraint < 1e-9);
    }
    assert!(trace.last().unwrap().energy < trace[0].energy);
}

#[test]
fn single_image_and_empty_graph() {
    let graph = MatchGraph::new(vec![5], vec![]).unwrap();
    let mut s = BundleState::new(vec![cloud(1, 5, 10.0)], graph).unwrap();
    register(&mut s, &OptimizerConfig::default()).unwrap();
    assert_eq!(s.transforms()[0], HalfTransform::identity());

    let graph = MatchGraph::new(vec![5, 5], vec![]).unwrap();
    let mut s = BundleState::new(vec![cloud(1, 5, 10.0), cloud(2, 5, 10.0)], graph).unwrap();
    assert!(register(&mut s, &OptimizerConfig::default()).is_err());
}

#[test]
fn rejects_bad_config() {
    let bad = [
        OptimizerConfig { alpha: 0.0, ..Default::default() },
        OptimizerConfig { gamma: 1.5, ..Default::default() },
        OptimizerConfig { levels: vec![100.0, -1.0], ..Default::default() },
        OptimizerConfig { theta_refresh_period: 0, ..Default::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err());
    }
}

#[test]
fn trace_csv_header() {
    let csv = trace_csv(&[TraceRow {
        iter: 1,
        level: 0,
        energy: 4.0,
        mean_weighted_distance: 1.5,
        refreshed: true,
        composed: false,
        constraint: 0.0,
    }]);
    assert_eq!(csv, "iter,level,energy,sqrt_energy,mean_weighted_distance\n1,0,4,2,1.5\n");
}
