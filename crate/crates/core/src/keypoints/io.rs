//! Binary keypoint file, little-endian:
//!
//! ```text
//! "HBLKP001"  u32 count  u32 D
//! count × { f32 x, f32 y, f32 z, f32 scale, f32 response, i8 sign, D × f32 descriptor }
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Keypoint;
use crate::error::{Error, Result};

pub const KEYPOINT_MAGIC: &[u8; 8] = b"HBLKP001";

pub fn write_keypoints<W: Write>(mut w: W, kps: &[Keypoint]) -> Result<()> {
    let d = kps.first().map_or(0, |k| k.descriptor.len());
    if let Some(bad) = kps.iter().find(|k| k.descriptor.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.descriptor.len(),
        });
    }
    w.write_all(KEYPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(kps.len() as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    for k in kps {
        for x in k.position {
            w.write_f32::<LittleEndian>(x)?;
        }
        w.write_f32::<LittleEndian>(k.scale)?;
        w.write_f32::<LittleEndian>(k.response)?;
        w.write_i8(k.laplacian_sign)?;
        for &x in &k.descriptor {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a keypoint stream. When `expected_dim` is given the header's D must agree.
pub fn read_keypoints<R: Read>(mut r: R, image_id: u32, expected_dim: Option<usize>) -> Result<Vec<Keypoint>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::format("truncated keypoint header"))?;
    if &magic != KEYPOINT_MAGIC {
        return Err(Error::format(format!("bad keypoint magic {magic:?}")));
    }
    let truncated = |_| Error::format("truncated keypoint file");
    let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if let Some(e) = expected_dim {
        if e != d {
            return Err(Error::DimensionMismatch { expected: e, actual: d });
        }
    }
    let mut out = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut position = [0f32; 3];
        for p in position.iter_mut() {
            *p = r.read_f32::<LittleEndian>().map_err(truncated)?;
        }
        let scale = r.read_f32::<LittleEndian>().map_err(truncated)?;
        let response = r.read_f32::<LittleEndian>().map_err(truncated)?;
        let laplacian_sign = r.read_i8().map_err(truncated)?;
        let mut descriptor = vec![0f32; d];
        r.read_f32_into::<LittleEndian>(&mut descriptor).map_err(truncated)?;
        out.push(Keypoint {
            position,
            scale,
            laplacian_sign,
            response,
            descriptor,
            image_id,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after keypoint records"));
    }
    Ok(out)
}

pub fn save_keypoints(path: impl AsRef<Path>, kps: &[Keypoint]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_keypoints(BufWriter::new(f), kps)
}

pub fn load_keypoints(path: impl AsRef<Path>, image_id: u32) -> Result<Vec<Keypoint>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_keypoints(BufReader::new(f), image_id, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_keypoints(n: usize, d: usize) -> Vec<Keypoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..n)
            .map(|_| Keypoint {
                position: [rng.random(), rng.random_range(-300.0..300.0), rng.random()],
                scale: rng.random_range(0.5..30.0),
                laplacian_sign: if rng.random() { 1 } else { -1 },
                response: rng.random(),
                descriptor: (0..d).map(|_| rng.random()).collect(),
                image_id: 4,
            })
            .collect()
    }

    #[test]
    fn roundtrip() {
        let kps = random_keypoints(1000, 48);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        save_keypoints(&p, &kps).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, 16 + 1000 * (21 + 48 * 4));
        assert_eq!(load_keypoints(&p, 4).unwrap(), kps);
    }

    #[test]
    fn empty_roundtrip() {
        let mut buf = Vec::new();
        write_keypoints(&mut buf, &[]).unwrap();
        assert!(read_keypoints(&buf[..], 0, None).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_files() {
        let kps = random_keypoints(3, 8);
        let mut buf = Vec::new();
        write_keypoints(&mut buf, &kps).unwrap();

        let mut wrong = buf.clone();
        wrong[7] = b'2';
        assert!(matches!(read_keypoints(&wrong[..], 0, None), Err(Error::Format(_))));

        assert!(matches!(read_keypoints(&buf[..buf.len() - 1], 0, None), Err(Error::Format(_))));
        assert!(matches!(
            read_keypoints(&buf[..], 0, Some(48)),
            Err(Error::DimensionMismatch { expected: 48, actual: 8 })
        ));

        let mut mixed = kps.clone();
        mixed[1].descriptor.pop();
        assert!(write_keypoints(Vec::new(), &mixed).is_err());
    }
}
