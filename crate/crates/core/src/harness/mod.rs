//! Synthetic groups with planted truth, landmark scoring and average-volume rendering.

mod landmarks;
mod render;
mod synthetic;

use std::fs;
use std::path::Path;

pub use landmarks::{
    evaluate_landmarks, parse_landmarks, read_landmarks, write_landmarks, CategoryStats, LandmarkReport, LandmarkSet,
};
pub use render::{render_average, GridSpec, Rendering, DEFAULT_RENDER_SPACING};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use crate::error::{Error, Result};
use crate::keypoints::save_keypoints;
use crate::matching::save_matches;
use crate::transforms::save_transform;

/// Writes `kp_XXX.bin`, `matches.txt`, `landmarks.csv` and `truth_XXX.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &SyntheticData) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, kps) in data.keypoints.iter().enumerate() {
        save_keypoints(dir.join(format!("kp_{i:03}.bin")), kps)?;
        save_transform(dir.join(format!("truth_{i:03}.json")), i as u32, &data.ground_truth[i])?;
    }
    save_matches(dir.join("matches.txt"), &data.graph)?;
    write_landmarks(dir.join("landmarks.csv"), &data.landmarks)
}
