//! JSON transform file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HalfTransform, LinearTransform, SplineGrid};
use crate::error::{Error, Result};
use crate::Vec3;

pub const TRANSFORM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TransformFile {
    version: u32,
    image_id: u32,
    linear: LinearTransform,
    grids: Vec<GridRecord>,
}

#[derive(Serialize, Deserialize)]
struct GridRecord {
    origin: [f64; 3],
    spacing: f64,
    dims: [usize; 3],
    frozen: bool,
    /// Control points in x-fastest order, three values each.
    coeffs: Vec<f64>,
}

pub fn write_transform<W: Write>(mut w: W, image_id: u32, t: &HalfTransform) -> Result<()> {
    let file = TransformFile {
        version: TRANSFORM_VERSION,
        image_id,
        linear: t.linear,
        grids: t
            .grids
            .iter()
            .map(|g| GridRecord {
                origin: g.origin().into(),
                spacing: g.spacing(),
                dims: g.dims(),
                frozen: g.is_frozen(),
                coeffs: g.coeffs().iter().flat_map(|c| [c[0], c[1], c[2]]).collect(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Returns the stored image id and transform.
pub fn read_transform<R: Read>(r: R) -> Result<(u32, HalfTransform)> {
    let file: TransformFile = serde_json::from_reader(r)?;
    if file.version != TRANSFORM_VERSION {
        return Err(Error::format(format!(
            "transform version {} (expected {TRANSFORM_VERSION})",
            file.version
        )));
    }
    file.linear.validate()?;
    let grids = file
        .grids
        .into_iter()
        .map(|g| {
            let n = g.dims.iter().product::<usize>();
            if g.coeffs.len() != 3 * n {
                return Err(Error::DimensionMismatch {
                    expected: 3 * n,
                    actual: g.coeffs.len(),
                });
            }
            let coeffs = g.coeffs.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            SplineGrid::from_parts(g.origin.into(), g.spacing, g.dims, coeffs, g.frozen)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        file.image_id,
        HalfTransform {
            linear: file.linear,
            grids,
        },
    ))
}

pub fn save_transform(path: impl AsRef<Path>, image_id: u32, t: &HalfTransform) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_transform(std::io::BufWriter::new(f), image_id, t)
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<(u32, HalfTransform)> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_transform(std::io::BufReader::new(f))
}
