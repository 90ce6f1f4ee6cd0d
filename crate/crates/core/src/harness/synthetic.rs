use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::landmarks::LandmarkSet;
use crate::error::{Error, Result};
use crate::keypoints::{Keypoint, DESCRIPTOR_LENGTH};
use crate::matching::{Match, MatchGraph, PointRef};
use crate::transforms::{HalfTransform, LinearTransform, SplineGrid, DIFFEO_BOUND};
use crate::Vec3;

/// Recipe for a synthetic group: a shared template cloud, warped independently per image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_images: usize,
    pub n_points: usize,
    /// Per-axis Gaussian position noise, mm.
    pub noise_sigma: f64,
    /// Fraction of planted outliers among all matches.
    pub outlier_rate: f64,
    pub warp_spacing: f64,
    /// Control displacements are uniform in `±max_displacement` per axis.
    pub max_displacement: f64,
    /// Per-axis scale jitter: scales are uniform in `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Translations are uniform in `±max_translation` per axis.
    pub max_translation: f64,
    pub domain_min: Vec3,
    pub domain_max: Vec3,
    pub n_landmarks: usize,
    pub descriptor_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 5,
            n_points: 2000,
            noise_sigma: 1.0,
            outlier_rate: 0.0,
            warp_spacing: 100.0,
            max_displacement: 35.0,
            scale_jitter: 0.05,
            max_translation: 10.0,
            domain_min: Vec3::zeros(),
            domain_max: Vec3::repeat(300.0),
            n_landmarks: 20,
            descriptor_noise: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::invalid(format!("outlier rate must be in [0, 1), got {}", self.outlier_rate)));
        }
        if self.n_images < 2 || self.n_points == 0 {
            return Err(Error::invalid("need at least 2 images and 1 point"));
        }
        if !(self.warp_spacing > 0.0) || !(self.max_displacement >= 0.0) {
            return Err(Error::invalid("warp spacing must be > 0 and max displacement >= 0"));
        }
        if self.max_displacement >= DIFFEO_BOUND * self.warp_spacing {
            return Err(Error::invalid(format!(
                "max displacement {} must stay below {} x warp spacing {}",
                self.max_displacement, DIFFEO_BOUND, self.warp_spacing
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.descriptor_noise >= 0.0) {
            return Err(Error::invalid("noise levels must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(self.max_translation >= 0.0) {
            return Err(Error::invalid("scale jitter must be in [0, 1) and max translation >= 0"));
        }
        if (0..3).any(|a| !(self.domain_max[a] > self.domain_min[a])) {
            return Err(Error::invalid("empty domain"));
        }
        if self.n_landmarks > self.n_points {
            return Err(Error::invalid("more landmarks than points"));
        }
        Ok(())
    }
}

/// A generated group with its planted truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub keypoints: Vec<Vec<Keypoint>>,
    pub graph: MatchGraph,
    /// Per image, the map from template space into that image.
    pub ground_truth: Vec<HalfTransform>,
    pub landmarks: Vec<LandmarkSet>,
    /// `template_index[i][k]` is the template point behind keypoint `k` of image `i`.
    pub template_index: Vec<Vec<u32>>,
    pub template: Vec<Vec3>,
}

impl SyntheticData {
    pub fn is_inlier(&self, m: &Match) -> bool {
        self.template_index[m.a.image as usize][m.a.index as usize]
            == self.template_index[m.b.image as usize][m.b.index as usize]
    }

    pub fn outlier_fraction(&self) -> f64 {
        let out = self.graph.matches().iter().filter(|m| !self.is_inlier(m)).count();
        out as f64 / self.graph.len().max(1) as f64
    }
}

fn random_unit(rng: &mut ChaCha8Rng, normal: &Normal<f64>, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.n_points;

    let template: Vec<Vec3> = (0..n)
        .map(|_| {
            Vec3::from_fn(|a, _| rng.random_range(spec.domain_min[a]..spec.domain_max[a]))
        })
        .collect();
    let template_desc: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, &unit, DESCRIPTOR_LENGTH)).collect();
    let template_scale: Vec<f32> = (0..n).map(|_| rng.random_range(2.0..8.0)).collect();
    let template_sign: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();

    let mut ground_truth = Vec::with_capacity(spec.n_images);
    let mut keypoints = Vec::with_capacity(spec.n_images);
    let mut template_index = Vec::with_capacity(spec.n_images);
    let mut landmarks = Vec::with_capacity(spec.n_images);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let desc_noise = Normal::new(0.0, spec.descriptor_noise).map_err(|e| Error::invalid(e.to_string()))?;

    for i in 0..spec.n_images {
        let j = spec.scale_jitter;
        let linear = LinearTransform::new(
            [0, 1, 2].map(|_| if j > 0.0 { rng.random_range(1.0 - j..1.0 + j) } else { 1.0 }),
            [0, 1, 2].map(|_| {
                if spec.max_translation > 0.0 {
                    rng.random_range(-spec.max_translation..spec.max_translation)
                } else {
                    0.0
                }
            }),
        )?;
        let lo = linear.apply(&spec.domain_min);
        let hi = linear.apply(&spec.domain_max);
        let mut grid = SplineGrid::covering(lo, hi, spec.warp_spacing, 2)?;
        if spec.max_displacement > 0.0 {
            let m = spec.max_displacement;
            for c in grid.coeffs_mut()? {
                *c = Vec3::from_fn(|_, _| rng.random_range(-m..m));
            }
        }
        grid.freeze();
        let gt = HalfTransform {
            linear,
            grids: vec![grid],
        };

        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);
        let kps: Vec<Keypoint> = order
            .iter()
            .map(|&t| {
                let t = t as usize;
                let p = gt.apply(&template[t]) + Vec3::from_fn(|_, _| noise.sample(&mut rng));
                let d: Vec<f64> = template_desc[t].iter().map(|x| x + desc_noise.sample(&mut rng)).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                Keypoint {
                    position: [p[0] as f32, p[1] as f32, p[2] as f32],
                    scale: template_scale[t],
                    laplacian_sign: template_sign[t],
                    response: 1.0,
                    descriptor: d.iter().map(|x| (x / norm) as f32).collect(),
                    image_id: i as u32,
                }
            })
            .collect();
        let entries = (0..spec.n_landmarks)
            .map(|t| (format!("L{t:03}"), gt.apply(&template[t])))
            .collect();
        landmarks.push(LandmarkSet {
            image_id: i as u32,
            entries,
        });
        ground_truth.push(gt);
        keypoints.push(kps);
        template_index.push(order);
    }

    // where each template point landed in every image
    let mut slot = vec![vec![0u32; n]; spec.n_images];
    for (i, order) in template_index.iter().enumerate() {
        for (k, &t) in order.iter().enumerate() {
            slot[i][t as usize] = k as u32;
        }
    }
    let mut matches = Vec::new();
    for a in 0..spec.n_images {
        for b in a + 1..spec.n_images {
            for t in 0..n {
                let d = descriptor_gap(&keypoints[a][slot[a][t] as usize], &keypoints[b][slot[b][t] as usize]);
                matches.push(Match::new(PointRef::new(a as u32, slot[a][t]), PointRef::new(b as u32, slot[b][t]), d));
            }
        }
    }
    let n_in = matches.len();
    let n_out = (spec.outlier_rate / (1.0 - spec.outlier_rate) * n_in as f64).round() as usize;
    if n_out > 0 && n < 2 {
        return Err(Error::invalid("outliers need at least 2 points per image"));
    }
    let mut outliers: Vec<Match> = Vec::with_capacity(n_out);
    while outliers.len() < n_out {
        while outliers.len() < n_out {
            let a = rng.random_range(0..spec.n_images);
            let mut b = rng.random_range(0..spec.n_images - 1);
            if b >= a {
                b += 1;
            }
            let (a, b) = (a.min(b), a.max(b));
            let ka = rng.random_range(0..n as u32);
            let kb = rng.random_range(0..n as u32);
            if template_index[a][ka as usize] == template_index[b][kb as usize] {
                continue;
            }
            let d = descriptor_gap(&keypoints[a][ka as usize], &keypoints[b][kb as usize]);
            outliers.push(Match::new(PointRef::new(a as u32, ka), PointRef::new(b as u32, kb), d));
        }
        outliers.sort_by_key(|m| (m.a, m.b));
        outliers.dedup_by_key(|m| (m.a, m.b));
    }
    matches.extend(outliers);
    let graph = MatchGraph::new(vec![n; spec.n_images], matches)?;

    Ok(SyntheticData {
        keypoints,
        graph,
        ground_truth,
        landmarks,
        template_index,
        template,
    })
}

fn descriptor_gap(a: &Keypoint, b: &Keypoint) -> f32 {
    crate::matching::index::descriptor_distance(&a.descriptor, &b.descriptor) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::write_keypoints;
    use crate::matching::{build_graph, MatchCriteria};

    fn small(outlier_rate: f64, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_images: 3,
            n_points: 200,
            noise_sigma: noise,
            outlier_rate,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_truth_aligns_matches() {
        let d = generate_synthetic(&small(0.0, 0.0)).unwrap();
        for m in d.graph.matches() {
            let pa = d.keypoints[m.a.image as usize][m.a.index as usize].position();
            let pb = d.keypoints[m.b.image as usize][m.b.index as usize].position();
            let ta = d.ground_truth[m.a.image as usize].invert_point(&pa);
            let tb = d.ground_truth[m.b.image as usize].invert_point(&pb);
            assert!(ta.converged && tb.converged);
            // f32 keypoint storage limits agreement to ~1e-4 mm
            assert!((ta.point - tb.point).norm() < 1e-3);
        }
    }

    #[test]
    fn planted_outlier_rate() {
        let d = generate_synthetic(&small(0.7, 1.0)).unwrap();
        assert!((d.outlier_fraction() - 0.7).abs() < 0.01, "{}", d.outlier_fraction());
        assert_eq!(d.graph.matches().iter().filter(|m| d.is_inlier(m)).count(), 3 * 200);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let bytes = |d: &SyntheticData| {
            let mut b = Vec::new();
            for k in &d.keypoints {
                write_keypoints(&mut b, k).unwrap();
            }
            crate::matching::write_matches(&mut b, &d.graph).unwrap();
            b
        };
        let spec = small(0.5, 1.0);
        assert_eq!(bytes(&generate_synthetic(&spec).unwrap()), bytes(&generate_synthetic(&spec).unwrap()));
    }

    #[test]
    fn descriptors_reproduce_inliers() {
        let d = generate_synthetic(&small(0.0, 1.0)).unwrap();
        let g = build_graph(&d.keypoints, &MatchCriteria::default()).unwrap();
        let inliers = g.matches().iter().filter(|m| d.is_inlier(m)).count();
        assert!(inliers as f64 >= 0.95 * d.graph.len() as f64, "{inliers} of {}", d.graph.len());
    }

    #[test]
    fn infeasible_specs() {
        assert!(generate_synthetic(&small(1.0, 0.0)).is_err());
        let s = SyntheticSpec {
            max_displacement: 50.0,
            ..small(0.0, 0.0)
        };
        assert!(generate_synthetic(&s).is_err());
    }
}
