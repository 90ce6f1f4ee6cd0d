//! Upright local descriptors.
//!
//! The cube of side `12σ` around a keypoint is split into 2×2×2 sub-cubes. Each sub-cube
//! sums Haar-like first-derivative box responses over a 4×4×4 sample lattice and
//! contributes `(Σdx, Σdy, Σdz, Σ|dx|, Σ|dy|, Σ|dz|)`, giving 48 values normalized to unit
//! length.

use rayon::prelude::*;

use super::Keypoint;
use crate::volume::{IntegralVolume, Volume};

pub const DESCRIPTOR_LENGTH: usize = 48;

const HALF_WINDOW: f64 = 6.0;
const SAMPLES_PER_SUBREGION: usize = 4;
const GAUSSIAN_SIGMA: f64 = 4.0;

/// Computes descriptors for `kps`. Keypoints whose support leaves the volume are dropped.
pub fn describe(volume: &Volume, iv: &IntegralVolume, kps: Vec<Keypoint>) -> Vec<Keypoint> {
    describe_in(volume, iv, kps)
}

pub(crate) fn describe_in(volume: &Volume, iv: &IntegralVolume, kps: Vec<Keypoint>) -> Vec<Keypoint> {
    let spacing = volume.spacing();
    let mm_per_voxel = (spacing[0] * spacing[1] * spacing[2]).cbrt();
    kps.into_par_iter()
        .filter_map(|mut k| {
            let center = volume.to_index(&k.position());
            let sigma = k.scale as f64 / mm_per_voxel;
            let d = descriptor_at(iv, center, sigma)?;
            k.descriptor = d;
            Some(k)
        })
        .collect()
}

fn descriptor_at(iv: &IntegralVolume, center: [f64; 3], sigma: f64) -> Option<Vec<f32>> {
    let dims = iv.volume_dims();
    let half_haar = ((sigma).round() as i64).max(1);
    let extent = HALF_WINDOW * sigma;
    for a in 0..3 {
        let lo = (center[a] - extent).round() as i64 - half_haar;
        let hi = (center[a] + extent).round() as i64 + half_haar;
        if lo < 0 || hi >= dims[a] as i64 {
            return None;
        }
    }
    let step = 2.0 * extent / (2 * SAMPLES_PER_SUBREGION) as f64;
    let n = 2 * SAMPLES_PER_SUBREGION;
    let mut out = vec![0f64; DESCRIPTOR_LENGTH];
    let gs = GAUSSIAN_SIGMA * sigma;
    for w in 0..n {
        for v in 0..n {
            for u in 0..n {
                let off = [
                    -extent + (u as f64 + 0.5) * step,
                    -extent + (v as f64 + 0.5) * step,
                    -extent + (w as f64 + 0.5) * step,
                ];
                let p = [
                    (center[0] + off[0]).round() as i64,
                    (center[1] + off[1]).round() as i64,
                    (center[2] + off[2]).round() as i64,
                ];
                let r2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                let g = (-r2 / (2.0 * gs * gs)).exp();
                let sub = (u / SAMPLES_PER_SUBREGION)
                    + 2 * (v / SAMPLES_PER_SUBREGION)
                    + 4 * (w / SAMPLES_PER_SUBREGION);
                let base = sub * 6;
                for axis in 0..3 {
                    let r = g * haar(iv, p, axis, half_haar);
                    out[base + axis] += r;
                    out[base + 3 + axis] += r.abs();
                }
            }
        }
    }
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        // flat neighbourhood: any unit vector would be arbitrary, use a fixed one
        let mut d = vec![0f32; DESCRIPTOR_LENGTH];
        d[0] = 1.0;
        return Some(d);
    }
    Some(out.iter().map(|x| (x / norm) as f32).collect())
}

/// Difference of the two half-boxes of side `2h` split along `axis`.
fn haar(iv: &IntegralVolume, p: [i64; 3], axis: usize, h: i64) -> f64 {
    let mut lo = [p[0] - h, p[1] - h, p[2] - h];
    let mut hi = [p[0] + h - 1, p[1] + h - 1, p[2] + h - 1];
    lo[axis] = p[axis];
    hi[axis] = p[axis] + h - 1;
    let plus = iv.box_sum_i(lo, hi);
    lo[axis] = p[axis] - h;
    hi[axis] = p[axis] - 1;
    let minus = iv.box_sum_i(lo, hi);
    plus - minus
}
