use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::transforms::HalfTransform;
use crate::volume::Volume;
use crate::Vec3;

pub const DEFAULT_RENDER_SPACING: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    /// Box spanned by the mapped volume domains, sampled on a 9³ lattice per volume.
    pub fn covering(volumes: &[Volume], transforms: &[HalfTransform], spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::invalid("render spacing must be > 0"));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for (v, t) in volumes.iter().zip(transforms) {
            let (a, b) = v.bounds();
            for k in 0..9 * 9 * 9 {
                let f = Vec3::new((k % 9) as f64, ((k / 9) % 9) as f64, (k / 81) as f64) / 8.0;
                let q = t.apply(&(a + (b - a).component_mul(&f)));
                lo = lo.inf(&q);
                hi = hi.sup(&q);
            }
        }
        if !lo.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("no volumes to render"));
        }
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / spacing).floor() as usize + 1);
        Ok(Self {
            origin: lo,
            spacing,
            dims,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Rendering {
    pub volume: Volume,
    /// Output voxels where some inversion failed; they are set to 0.
    pub masked: usize,
}

/// Average of all volumes resampled into the common space. Images whose sample falls
/// outside their volume do not contribute to that voxel.
pub fn render_average(volumes: &[Volume], transforms: &[HalfTransform], grid: &GridSpec) -> Result<Rendering> {
    if volumes.len() != transforms.len() {
        return Err(Error::DimensionMismatch {
            expected: volumes.len(),
            actual: transforms.len(),
        });
    }
    if volumes.is_empty() {
        return Err(Error::invalid("no volumes to render"));
    }
    let [nx, ny, nz] = grid.dims;
    let slices: Vec<(Vec<f32>, usize)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut out = vec![0f32; nx * ny];
            let mut masked = 0;
            for y in 0..ny {
                for x in 0..nx {
                    let q = grid.origin + Vec3::new(x as f64, y as f64, z as f64) * grid.spacing;
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    let mut failed = false;
                    for (v, t) in volumes.iter().zip(transforms) {
                        let inv = t.invert_point(&q);
                        if !inv.converged {
                            failed = true;
                            break;
                        }
                        if let Some(s) = v.sample_trilinear(&inv.point) {
                            sum += s;
                            n += 1;
                        }
                    }
                    if failed {
                        masked += 1;
                    } else if n > 0 {
                        out[x + nx * y] = (sum / n as f64) as f32;
                    }
                }
            }
            (out, masked)
        })
        .collect();
    let masked = slices.iter().map(|s| s.1).sum::<usize>();
    let total = nx * ny * nz;
    if masked * 100 > total {
        warn!("{masked} of {total} voxels masked: inversion did not converge");
    }
    let voxels = slices.into_iter().flat_map(|s| s.0).collect();
    let volume = Volume::new(grid.dims, [grid.spacing; 3], grid.origin.into(), voxels)?;
    Ok(Rendering { volume, masked })
}
