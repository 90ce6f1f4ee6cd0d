//! Scale-space blob keypoints: detection by box-filter Hessian determinant on the integral
//! volume, upright 48-D descriptors, and the binary keypoint file.

mod describe;
mod detect;
mod io;

pub use describe::{describe, DESCRIPTOR_LENGTH};
pub use detect::{detect, filter_sizes, ResponseLayer};
pub use io::{load_keypoints, read_keypoints, save_keypoints, write_keypoints, KEYPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::volume::{IntegralVolume, Volume};
use crate::Vec3;

/// A detected interest point in physical coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Position in mm.
    pub position: [f32; 3],
    /// Characteristic blob scale in mm.
    pub scale: f32,
    /// Sign of the Hessian trace: `-1` for bright blobs, `+1` for dark ones.
    pub laplacian_sign: i8,
    pub response: f32,
    /// Unit-norm descriptor; empty until [`describe`] runs.
    pub descriptor: Vec<f32>,
    pub image_id: u32,
}

impl Keypoint {
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Minimum |det H| (after scale normalization) for a candidate.
    pub response_threshold: f64,
    pub max_keypoints: usize,
    pub descriptor_length: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 4,
            response_threshold: 0.0,
            max_keypoints: 20_000,
            descriptor_length: DESCRIPTOR_LENGTH,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.octaves < 1 {
            return Err(Error::invalid("octaves must be >= 1"));
        }
        if self.scales_per_octave < 3 {
            return Err(Error::invalid("scales_per_octave must be >= 3 for scale-space suppression"));
        }
        if self.max_keypoints < 1 {
            return Err(Error::invalid("max_keypoints must be >= 1"));
        }
        if self.descriptor_length != DESCRIPTOR_LENGTH {
            return Err(Error::Unsupported(format!(
                "built-in descriptor has length {DESCRIPTOR_LENGTH}, got {}",
                self.descriptor_length
            )));
        }
        if !(self.response_threshold >= 0.0) {
            return Err(Error::invalid("response_threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Detects and describes keypoints of one volume: the `max_keypoints` strongest candidates
/// whose descriptor window fits inside the volume.
pub fn extract(volume: &Volume, params: &DetectorParams, image_id: u32) -> Result<Vec<Keypoint>> {
    let integral = IntegralVolume::build(volume);
    let all = DetectorParams {
        max_keypoints: usize::MAX,
        ..params.clone()
    };
    let mut candidates = detect::detect_with_integral(volume, &integral, &all)?;
    for k in candidates.iter_mut() {
        k.image_id = image_id;
    }
    let max = params.max_keypoints;
    let mut out = Vec::with_capacity(max.min(candidates.len()));
    for batch in candidates.chunks(max.max(1024)) {
        out.extend(describe::describe_in(volume, &integral, batch.to_vec()));
        if out.len() >= max {
            break;
        }
    }
    out.truncate(max);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_skips_undescribable_candidates() {
        // the strong blob sits too close to the border for a descriptor window
        let strong = Vec3::new(30.0, 48.0, 48.0);
        let weak = Vec3::new(60.0, 48.0, 48.0);
        let v = Volume::from_fn([96, 96, 96], [1.0; 3], [0.0; 3], |p| {
            let g = |c: Vec3, s: f64| (-(p - c).norm_squared() / (2.0 * s * s)).exp();
            (200.0 * g(strong, 5.0) + 60.0 * g(weak, 3.0)) as f32
        })
        .unwrap();
        let params = DetectorParams {
            max_keypoints: 1,
            ..Default::default()
        };
        let top = detect::detect(&v, &params).unwrap();
        assert!((top[0].position() - strong).norm() < 2.0);
        let kps = extract(&v, &params, 3).unwrap();
        assert_eq!(kps.len(), 1);
        assert!((kps[0].position() - weak).norm() < 2.0, "{:?}", kps[0].position());
        assert_eq!(kps[0].descriptor.len(), DESCRIPTOR_LENGTH);
        assert_eq!(kps[0].image_id, 3);
    }
}
