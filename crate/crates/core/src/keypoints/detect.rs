//! Box-filter approximation of the scale-normalized Hessian determinant.
//!
//! Filter side lengths follow the usual progression `9, 15, 21, 27` for the first octave,
//! with the increment and the sampling stride doubling at each octave. A filter of side
//! `L` corresponds to a Gaussian scale of `1.2 L / 9` voxels.

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;

use super::{DetectorParams, Keypoint};
use crate::error::{Error, Result};
use crate::volume::{IntegralVolume, Volume};

/// Relative weight of mixed-derivative responses in the determinant.
const MIXED_WEIGHT: f64 = 0.9;
/// Power of the filter scale applied to |det H| of the gain-normalized box responses.
/// Box filters attenuate faster with size than Gaussian derivatives, so the exponent is
/// calibrated on Gaussian blobs rather than taken from the continuous theory: with it a
/// blob of standard deviation `σ` (3 to 8 voxels) peaks at the layer nearest `σ`.
const SCALE_POWER: f64 = 10.5;
const INVALID: f32 = -1.0;

/// Filter side lengths (voxels) of octave `o`.
pub fn filter_sizes(octave: usize, scales: usize) -> Vec<usize> {
    (0..scales).map(|k| 3 * ((1usize << (octave + 1)) * (k + 1) + 1)).collect()
}

fn sigma_of(filter: f64) -> f64 {
    1.2 * filter / 9.0
}

/// Response of a second-derivative filter to `x²/2`, i.e. its gain on a unit curvature.
fn second_derivative_gain(l: i64) -> f64 {
    let outer = (3 * l - 1) / 2;
    let inner = (l - 1) / 2;
    let sq = |a: i64, b: i64| (a..=b).map(|x| (x * x) as f64 / 2.0).sum::<f64>();
    let lobes = sq(-outer, -(inner + 1)) + sq(inner + 1, outer);
    let center = sq(-inner, inner);
    ((2 * l - 1) * (2 * l - 1)) as f64 * (lobes - 2.0 * center)
}

/// Response of a mixed-derivative filter to `xy`.
fn mixed_derivative_gain(l: i64) -> f64 {
    let s = (l * (l + 1) / 2) as f64;
    4.0 * l as f64 * s * s
}

/// One scale of the response pyramid, sampled every `stride` voxels.
#[derive(Debug, Clone)]
pub struct ResponseLayer {
    pub filter: usize,
    pub stride: usize,
    /// Scale in voxels.
    pub sigma: f64,
    pub samples: [usize; 3],
    /// Blob strength; `< 0` where the filter does not fit, `0` where the Hessian is not definite.
    pub response: Vec<f32>,
    /// Sign of the Hessian trace.
    pub sign: Vec<i8>,
}

impl ResponseLayer {
    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.samples[0] * (y + self.samples[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.response[self.idx(x, y, z)]
    }

    fn compute(iv: &IntegralVolume, filter: usize, stride: usize) -> Self {
        let dims = iv.volume_dims();
        let samples = [
            dims[0].div_ceil(stride),
            dims[1].div_ceil(stride),
            dims[2].div_ceil(stride),
        ];
        let l = (filter / 3) as i64;
        let border = ((filter - 1) / 2) as i64;
        let sigma = sigma_of(filter as f64);
        let g2 = second_derivative_gain(l);
        let gm = mixed_derivative_gain(l);
        let norm = sigma.powf(SCALE_POWER);
        let plane = samples[0] * samples[1];
        let mut response = vec![INVALID; plane * samples[2]];
        let mut sign = vec![0i8; plane * samples[2]];
        response
            .par_chunks_mut(plane)
            .zip(sign.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(sz, (resp, sgn))| {
                let z = (sz * stride) as i64;
                if z < border || z + border >= dims[2] as i64 {
                    return;
                }
                for sy in 0..samples[1] {
                    let y = (sy * stride) as i64;
                    if y < border || y + border >= dims[1] as i64 {
                        continue;
                    }
                    for sx in 0..samples[0] {
                        let x = (sx * stride) as i64;
                        if x < border || x + border >= dims[0] as i64 {
                            continue;
                        }
                        let h = hessian_at(iv, [x, y, z], l);
                        let dxx = h[0] / g2;
                        let dyy = h[1] / g2;
                        let dzz = h[2] / g2;
                        let dxy = MIXED_WEIGHT * h[3] / gm;
                        let dxz = MIXED_WEIGHT * h[4] / gm;
                        let dyz = MIXED_WEIGHT * h[5] / gm;
                        let minor = dxx * dyy - dxy * dxy;
                        let det = dxx * (dyy * dzz - dyz * dyz) - dxy * (dxy * dzz - dyz * dxz)
                            + dxz * (dxy * dyz - dyy * dxz);
                        let trace = dxx + dyy + dzz;
                        // blob-like only: all three eigenvalues share a sign
                        let definite = minor > 0.0 && ((dxx > 0.0 && det > 0.0) || (dxx < 0.0 && det < 0.0));
                        let i = sx + samples[0] * sy;
                        resp[i] = if definite { (det.abs() * norm) as f32 } else { 0.0 };
                        sgn[i] = if trace >= 0.0 { 1 } else { -1 };
                    }
                }
            });
        Self {
            filter,
            stride,
            sigma,
            samples,
            response,
            sign,
        }
    }
}

/// Raw box-filter responses `[xx, yy, zz, xy, xz, yz]` at voxel `c` for lobe size `l`.
fn hessian_at(iv: &IntegralVolume, c: [i64; 3], l: i64) -> [f64; 6] {
    let outer = (3 * l - 1) / 2;
    let inner = (l - 1) / 2;
    let perp = l - 1;
    let second = |axis: usize| {
        let mut lo = [c[0] - perp, c[1] - perp, c[2] - perp];
        let mut hi = [c[0] + perp, c[1] + perp, c[2] + perp];
        lo[axis] = c[axis] - outer;
        hi[axis] = c[axis] + outer;
        let total = iv.box_sum_i(lo, hi);
        lo[axis] = c[axis] - inner;
        hi[axis] = c[axis] + inner;
        let center = iv.box_sum_i(lo, hi);
        total - 3.0 * center
    };
    let mixed = |a: usize, b: usize| {
        let other = 3 - a - b;
        let quad = |sa: i64, sb: i64| {
            let mut lo = [0i64; 3];
            let mut hi = [0i64; 3];
            lo[other] = c[other] - inner;
            hi[other] = c[other] + inner;
            if sa > 0 {
                lo[a] = c[a] + 1;
                hi[a] = c[a] + l;
            } else {
                lo[a] = c[a] - l;
                hi[a] = c[a] - 1;
            }
            if sb > 0 {
                lo[b] = c[b] + 1;
                hi[b] = c[b] + l;
            } else {
                lo[b] = c[b] - l;
                hi[b] = c[b] - 1;
            }
            iv.box_sum_i(lo, hi)
        };
        quad(1, 1) + quad(-1, -1) - quad(1, -1) - quad(-1, 1)
    };
    [second(0), second(1), second(2), mixed(0, 1), mixed(0, 2), mixed(1, 2)]
}

/// Detects blob keypoints; descriptors are left empty.
pub fn detect(volume: &Volume, params: &DetectorParams) -> Result<Vec<Keypoint>> {
    let iv = IntegralVolume::build(volume);
    detect_with_integral(volume, &iv, params)
}

pub(crate) fn detect_with_integral(volume: &Volume, iv: &IntegralVolume, params: &DetectorParams) -> Result<Vec<Keypoint>> {
    params.validate()?;
    let smallest = filter_sizes(0, 1)[0];
    let dims = volume.dims();
    if dims.iter().any(|&d| d < smallest) {
        return Err(Error::invalid(format!(
            "volume {dims:?} is smaller than the smallest filter ({smallest} voxels)"
        )));
    }
    let spacing = volume.spacing();
    let mm_per_voxel = (spacing[0] * spacing[1] * spacing[2]).cbrt();

    let mut found = Vec::new();
    for octave in 0..params.octaves {
        let stride = 1usize << octave;
        let sizes = filter_sizes(octave, params.scales_per_octave);
        // octaves whose middle scales cannot fit anywhere contribute nothing
        if dims.iter().any(|&d| d < sizes[1]) {
            break;
        }
        let layers: Vec<ResponseLayer> = sizes
            .par_iter()
            .map(|&f| ResponseLayer::compute(iv, f, stride))
            .collect();
        for k in 1..layers.len() - 1 {
            found.extend(suppress(&layers, k, params.response_threshold));
        }
    }

    let mut kps: Vec<Keypoint> = found
        .into_iter()
        .map(|c| {
            let position = volume.to_physical(c.voxel);
            Keypoint {
                position: [position.x as f32, position.y as f32, position.z as f32],
                scale: (c.sigma * mm_per_voxel) as f32,
                laplacian_sign: c.sign,
                response: c.response as f32,
                descriptor: Vec::new(),
                image_id: 0,
            }
        })
        .collect();
    sort_and_truncate(&mut kps, params.max_keypoints);
    Ok(kps)
}

/// Descending response, ties by (z, y, x).
pub(crate) fn sort_and_truncate(kps: &mut Vec<Keypoint>, max: usize) {
    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.position[2].total_cmp(&b.position[2]))
            .then(a.position[1].total_cmp(&b.position[1]))
            .then(a.position[0].total_cmp(&b.position[0]))
    });
    kps.truncate(max);
}

struct Candidate {
    voxel: [f64; 3],
    sigma: f64,
    response: f64,
    sign: i8,
}

/// 3×3×3×3 non-maximum suppression at layer `k` plus quadratic sub-sample refinement.
fn suppress(layers: &[ResponseLayer], k: usize, threshold: f64) -> Vec<Candidate> {
    let mid = &layers[k];
    let [nx, ny, nz] = mid.samples;
    if nx < 3 || ny < 3 || nz < 3 {
        return Vec::new();
    }
    (1..nz - 1)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut out = Vec::new();
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let v = mid.at(x, y, z);
                    if v <= 0.0 || (v as f64) <= threshold {
                        continue;
                    }
                    if is_local_max(layers, k, x, y, z, v) {
                        out.push(refine(layers, k, x, y, z));
                    }
                }
            }
            out.into_iter()
        })
        .collect()
}

fn is_local_max(layers: &[ResponseLayer], k: usize, x: usize, y: usize, z: usize, v: f32) -> bool {
    for layer in &layers[k - 1..=k + 1] {
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let w = layer.at(x + dx - 1, y + dy - 1, z + dz - 1);
                    if w < 0.0 {
                        return false;
                    }
                    let centre = std::ptr::eq(layer, &layers[k]) && dx == 1 && dy == 1 && dz == 1;
                    if !centre && w >= v {
                        return false;
                    }
                }
            }
        }
    }
    true
}

fn refine(layers: &[ResponseLayer], k: usize, x: usize, y: usize, z: usize) -> Candidate {
    let val = |dk: isize, dx: isize, dy: isize, dz: isize| -> f64 {
        layers[(k as isize + dk) as usize].at(
            (x as isize + dx) as usize,
            (y as isize + dy) as usize,
            (z as isize + dz) as usize,
        ) as f64
    };
    // axes: 0..3 spatial, 3 scale
    let shift = |axis: usize, s: isize| -> [isize; 4] {
        let mut d = [0isize; 4];
        d[axis] = s;
        d
    };
    let at = |d: [isize; 4]| val(d[3], d[0], d[1], d[2]);
    let c = at([0; 4]);
    let mut g = Vector4::zeros();
    let mut h = Matrix4::zeros();
    for a in 0..4 {
        let p = at(shift(a, 1));
        let m = at(shift(a, -1));
        g[a] = 0.5 * (p - m);
        h[(a, a)] = p - 2.0 * c + m;
        for b in a + 1..4 {
            let mut pp = [0isize; 4];
            pp[a] = 1;
            pp[b] = 1;
            let mut mm = [0isize; 4];
            mm[a] = -1;
            mm[b] = -1;
            let mut pm = [0isize; 4];
            pm[a] = 1;
            pm[b] = -1;
            let mut mp = [0isize; 4];
            mp[a] = -1;
            mp[b] = 1;
            let v = 0.25 * (at(pp) - at(pm) - at(mp) + at(mm));
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    let mut offset = h.lu().solve(&(-g)).unwrap_or_else(Vector4::zeros);
    if offset.iter().any(|o| !o.is_finite()) {
        offset = Vector4::zeros();
    }
    for o in offset.iter_mut() {
        *o = o.clamp(-0.5, 0.5);
    }
    let mid = &layers[k];
    let stride = mid.stride as f64;
    let voxel = [
        (x as f64 + offset[0]) * stride,
        (y as f64 + offset[1]) * stride,
        (z as f64 + offset[2]) * stride,
    ];
    // filter size grows linearly with the in-octave scale index
    let df = if offset[3] >= 0.0 {
        (layers[k + 1].filter - mid.filter) as f64
    } else {
        (mid.filter - layers[k - 1].filter) as f64
    };
    let sigma = sigma_of(mid.filter as f64 + offset[3] * df);
    let response = (c + 0.5 * g.dot(&offset)).max(c);
    Candidate {
        voxel,
        sigma,
        response,
        sign: mid.sign[mid.idx(x, y, z)],
    }
}
