//! Text match file:
//!
//! ```text
//! # matches
//! images 3
//! counts 120 98 133
//! 0 4 1 17 0.2113
//! ```
//!
//! One `imgA idxA imgB idxB descDist` line per match after the header.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Match, MatchGraph, PointRef};
use crate::error::{Error, Result};

pub fn write_matches<W: Write>(mut w: W, g: &MatchGraph) -> Result<()> {
    let mut s = String::with_capacity(64 + g.len() * 24);
    s.push_str("# matches\n");
    let _ = writeln!(s, "images {}", g.n_images());
    s.push_str("counts");
    for c in g.counts() {
        let _ = write!(s, " {c}");
    }
    s.push('\n');
    for m in g.matches() {
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            m.a.image, m.a.index, m.b.image, m.b.index, m.descriptor_distance
        );
    }
    w.write_all(s.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_matches<R: Read>(r: R) -> Result<MatchGraph> {
    let mut n_images = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut matches = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::format(format!("match file line {}: {what}", lineno + 1));
        let mut fields = line.split_whitespace();
        match fields.clone().next() {
            Some("images") => {
                fields.next();
                n_images = Some(
                    fields
                        .next()
                        .and_then(|x| x.parse::<usize>().ok())
                        .ok_or_else(|| bad("bad image count"))?,
                );
            }
            Some("counts") => {
                fields.next();
                counts = Some(
                    fields
                        .map(|x| x.parse::<usize>().map_err(|_| bad("bad keypoint count")))
                        .collect::<Result<_>>()?,
                );
            }
            _ => {
                if counts.is_none() {
                    return Err(bad("match before header"));
                }
                let v: Vec<&str> = fields.collect();
                if v.len() != 5 {
                    return Err(bad("expected 5 fields"));
                }
                let int = |s: &str| s.parse::<u32>().map_err(|_| bad("bad index"));
                let d = v[4].parse::<f32>().map_err(|_| bad("bad distance"))?;
                matches.push(Match::new(
                    PointRef::new(int(v[0])?, int(v[1])?),
                    PointRef::new(int(v[2])?, int(v[3])?),
                    d,
                ));
            }
        }
    }
    let counts = counts.ok_or_else(|| Error::format("match file has no counts line"))?;
    if let Some(n) = n_images {
        if n != counts.len() {
            return Err(Error::format(format!("images {n} but {} counts", counts.len())));
        }
    }
    MatchGraph::new(counts, matches)
}

pub fn save_matches(path: impl AsRef<Path>, g: &MatchGraph) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_matches(std::io::BufWriter::new(f), g)
}

pub fn load_matches(path: impl AsRef<Path>) -> Result<MatchGraph> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_matches(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let m = |ia, ka, ib, kb, d| Match::new(PointRef::new(ia, ka), PointRef::new(ib, kb), d);
        let g = MatchGraph::new(
            vec![3, 2, 4],
            vec![m(0, 2, 1, 1, 0.125), m(2, 3, 0, 0, 0.333_333_34), m(1, 0, 2, 1, 1e-7)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_matches(&mut buf, &g).unwrap();
        let back = read_matches(&buf[..]).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_matches("0 1 1 1 0.5\n".as_bytes()).is_err());
        assert!(read_matches("images 2\ncounts 1 1\n0 0 1 0\n".as_bytes()).is_err());
        assert!(read_matches("images 3\ncounts 1 1\n".as_bytes()).is_err());
        assert!(read_matches("images 2\ncounts 1 1\n0 0 1 3 0.1\n".as_bytes()).is_err());
    }
}
