//! Cross-image descriptor matching and the global match graph.
//!
//! The graph's incidence matrix has one row per match `(a, b)` with `+1` in column `a` and
//! `-1` in column `b`; [`MatchGraph::incidence_apply`] and
//! [`MatchGraph::transpose_apply`] are its sparse products.

pub mod index;
mod io;

pub use io::{load_matches, read_matches, save_matches, write_matches};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::keypoints::Keypoint;
use crate::Vec3;
use index::DescriptorIndex;

/// A keypoint addressed by image and position in that image's list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PointRef {
    pub image: u32,
    pub index: u32,
}

impl PointRef {
    pub fn new(image: u32, index: u32) -> Self {
        Self { image, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: PointRef,
    pub b: PointRef,
    pub descriptor_distance: f32,
    /// Inlier weight in `[0, 1]`, rewritten by the robust module.
    pub weight: f64,
}

impl Match {
    pub fn new(a: PointRef, b: PointRef, descriptor_distance: f32) -> Self {
        Self {
            a,
            b,
            descriptor_distance,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchCriteria {
    pub max_descriptor_distance: f64,
    pub nn_ratio: f64,
    pub max_scale_log_ratio: f64,
    pub require_same_sign: bool,
}

impl Default for MatchCriteria {
    fn default() -> Self {
        Self {
            max_descriptor_distance: 1.0,
            nn_ratio: 0.9,
            max_scale_log_ratio: std::f64::consts::LN_2,
            require_same_sign: true,
        }
    }
}

impl MatchCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_descriptor_distance > 0.0) {
            return Err(Error::invalid("max_descriptor_distance must be > 0"));
        }
        if !(self.nn_ratio > 0.0 && self.nn_ratio <= 1.0) {
            return Err(Error::invalid("nn_ratio must be in (0, 1]"));
        }
        if !(self.max_scale_log_ratio > 0.0) {
            return Err(Error::invalid("max_scale_log_ratio must be > 0"));
        }
        Ok(())
    }
}

/// A match between two keypoint lists: `(index in A, index in B, descriptor distance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMatch {
    pub a: u32,
    pub b: u32,
    pub distance: f32,
}

fn one_direction(query: &[Keypoint], target: &[Keypoint], c: &MatchCriteria) -> Vec<(u32, u32, f64)> {
    let signs: &[i8] = if c.require_same_sign { &[-1, 1] } else { &[0] };
    let mut out = Vec::new();
    for &sign in signs {
        let items: Vec<u32> = (0..target.len() as u32)
            .filter(|&i| sign == 0 || target[i as usize].laplacian_sign == sign)
            .collect();
        if items.is_empty() {
            continue;
        }
        let tree = DescriptorIndex::build(items, |i| &target[i as usize].descriptor);
        let hits: Vec<(u32, u32, f64)> = query
            .par_iter()
            .enumerate()
            .filter(|(_, q)| sign == 0 || q.laplacian_sign == sign)
            .filter_map(|(qi, q)| {
                let qs = q.scale as f64;
                let best = tree.two_nearest(&q.descriptor, |t| {
                    (qs / target[t as usize].scale as f64).ln().abs() <= c.max_scale_log_ratio
                });
                let (d1, t) = best.first?;
                if d1 > c.max_descriptor_distance {
                    return None;
                }
                let ratio = match best.second {
                    None => 0.0,
                    Some((d2, _)) if d2 > 0.0 => d1 / d2,
                    Some(_) => 1.0,
                };
                (ratio <= c.nn_ratio).then_some((qi as u32, t, d1))
            })
            .collect();
        out.extend(hits);
    }
    out
}

/// Matches two keypoint lists in both directions with the ratio test and returns the
/// union, one entry per `(a, b)` pair, sorted.
pub fn match_pair(set_a: &[Keypoint], set_b: &[Keypoint], c: &MatchCriteria) -> Result<Vec<PairMatch>> {
    c.validate()?;
    let dim = set_a
        .first()
        .or(set_b.first())
        .map_or(0, |k| k.descriptor.len());
    if let Some(bad) = set_a.iter().chain(set_b).find(|k| k.descriptor.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.descriptor.len(),
        });
    }
    if dim == 0 && !(set_a.is_empty() || set_b.is_empty()) {
        return Err(Error::invalid("keypoints have no descriptors"));
    }
    let mut all: Vec<PairMatch> = one_direction(set_a, set_b, c)
        .into_iter()
        .map(|(a, b, d)| PairMatch { a, b, distance: d as f32 })
        .chain(
            one_direction(set_b, set_a, c)
                .into_iter()
                .map(|(b, a, d)| PairMatch { a, b, distance: d as f32 }),
        )
        .collect();
    all.sort_by_key(|m| (m.a, m.b));
    all.dedup_by_key(|m| (m.a, m.b));
    Ok(all)
}

/// Matches with per-keypoint adjacency, stored in CSR form, and global point numbering
/// (image offsets) for the incidence products.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchGraph {
    counts: Vec<usize>,
    offsets: Vec<usize>,
    matches: Vec<Match>,
    adj_start: Vec<usize>,
    adj: Vec<u32>,
}

impl MatchGraph {
    /// Builds a graph over images with `counts[i]` keypoints each. Matches are put into
    /// canonical orientation (`a.image < b.image`), sorted and deduplicated.
    pub fn new(counts: Vec<usize>, mut matches: Vec<Match>) -> Result<Self> {
        for m in matches.iter_mut() {
            if m.a.image > m.b.image {
                std::mem::swap(&mut m.a, &mut m.b);
            }
            if m.a.image == m.b.image {
                return Err(Error::invalid(format!("match within one image: {m:?}")));
            }
            for p in [m.a, m.b] {
                let n = *counts
                    .get(p.image as usize)
                    .ok_or_else(|| Error::invalid(format!("match references unknown image {}", p.image)))?;
                if p.index as usize >= n {
                    return Err(Error::invalid(format!("keypoint {p:?} out of range ({n} points)")));
                }
            }
            if !(0.0..=1.0).contains(&m.weight) {
                return Err(Error::invalid(format!("match weight {} outside [0, 1]", m.weight)));
            }
        }
        matches.par_sort_by_key(|m| (m.a, m.b));
        matches.dedup_by_key(|m| (m.a, m.b));

        let mut offsets = Vec::with_capacity(counts.len() + 1);
        offsets.push(0);
        for &c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let n_points = *offsets.last().unwrap();
        let global = |p: PointRef| offsets[p.image as usize] + p.index as usize;
        let mut degree = vec![0usize; n_points + 1];
        for m in &matches {
            degree[global(m.a) + 1] += 1;
            degree[global(m.b) + 1] += 1;
        }
        for i in 0..n_points {
            degree[i + 1] += degree[i];
        }
        let adj_start = degree;
        let mut fill = adj_start.clone();
        let mut adj = vec![0u32; 2 * matches.len()];
        for (mi, m) in matches.iter().enumerate() {
            for p in [global(m.a), global(m.b)] {
                adj[fill[p]] = mi as u32;
                fill[p] += 1;
            }
        }
        Ok(Self {
            counts,
            offsets,
            matches,
            adj_start,
            adj,
        })
    }

    pub fn n_images(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_points(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Global index range of image `i`'s keypoints.
    pub fn image_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    #[inline]
    pub fn global(&self, p: PointRef) -> usize {
        self.offsets[p.image as usize] + p.index as usize
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn matches_mut(&mut self) -> &mut [Match] {
        &mut self.matches
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Indices of the matches incident to global point `p`.
    #[inline]
    pub fn incident(&self, p: usize) -> &[u32] {
        &self.adj[self.adj_start[p]..self.adj_start[p + 1]]
    }

    /// `|N(p)|`, the number of matches touching global point `p`.
    #[inline]
    pub fn degree(&self, p: usize) -> usize {
        self.adj_start[p + 1] - self.adj_start[p]
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.matches.len() {
            return Err(Error::DimensionMismatch {
                expected: self.matches.len(),
                actual: w.len(),
            });
        }
        for (m, &x) in self.matches.iter_mut().zip(w) {
            m.weight = x.clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// `M x`: for each match `(a, b)`, `x[a] - x[b]`.
    pub fn incidence_apply(&self, x: &[Vec3]) -> Result<Vec<Vec3>> {
        if x.len() != self.n_points() {
            return Err(Error::DimensionMismatch {
                expected: self.n_points(),
                actual: x.len(),
            });
        }
        Ok(self
            .matches
            .par_iter()
            .map(|m| x[self.global(m.a)] - x[self.global(m.b)])
            .collect())
    }

    /// `Mᵀ y`: each match row scattered with `+` to `a` and `-` to `b`.
    pub fn transpose_apply(&self, y: &[Vec3]) -> Result<Vec<Vec3>> {
        if y.len() != self.matches.len() {
            return Err(Error::DimensionMismatch {
                expected: self.matches.len(),
                actual: y.len(),
            });
        }
        // gather per point through the adjacency so the result is order-deterministic
        Ok((0..self.n_points())
            .into_par_iter()
            .map(|p| {
                self.incident(p).iter().fold(Vec3::zeros(), |acc, &mi| {
                    let m = &self.matches[mi as usize];
                    if self.global(m.a) == p {
                        acc + y[mi as usize]
                    } else {
                        acc - y[mi as usize]
                    }
                })
            })
            .collect())
    }
}

/// Matches every unordered image pair and assembles the graph.
pub fn build_graph(all_sets: &[Vec<Keypoint>], c: &MatchCriteria) -> Result<MatchGraph> {
    if all_sets.len() < 2 {
        return Err(Error::invalid("need at least 2 images"));
    }
    c.validate()?;
    let pairs: Vec<(usize, usize)> = (0..all_sets.len())
        .flat_map(|i| (i + 1..all_sets.len()).map(move |j| (i, j)))
        .collect();
    let per_pair: Vec<Vec<Match>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            match_pair(&all_sets[i], &all_sets[j], c).map(|ms| {
                ms.into_iter()
                    .map(|m| Match::new(PointRef::new(i as u32, m.a), PointRef::new(j as u32, m.b), m.distance))
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    let counts = all_sets.iter().map(Vec::len).collect();
    MatchGraph::new(counts, per_pair.into_iter().flatten().collect())
}
