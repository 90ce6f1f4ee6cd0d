use rayon::prelude::*;

use super::BundleState;
use crate::Vec3;

const CHUNK: usize = 4096;

/// Sums over fixed-size chunks merged in order, so the result does not depend on the thread
/// count or on work stealing.
fn chunked_sums<T: Sync, const K: usize>(items: &[T], f: impl Fn(usize, &T) -> [f64; K] + Sync) -> [f64; K] {
    items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            chunk.iter().enumerate().fold([0.0; K], |mut acc, (k, x)| {
                let v = f(c * CHUNK + k, x);
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
                acc
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0; K], |mut acc, v| {
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b;
            }
            acc
        })
}

fn chunked_sum<T: Sync>(items: &[T], f: impl Fn(usize, &T) -> f64 + Sync) -> f64 {
    chunked_sums(items, |i, x| [f(i, x)])[0]
}

impl BundleState {
    /// Recomputes `s(a, b)² = w (1/|N(a)| + 1/|N(b)|)` for every match.
    pub(crate) fn update_scales(&mut self) {
        let g = &self.graph;
        self.scale_sq = g
            .matches()
            .par_iter()
            .map(|m| {
                let da = g.degree(g.global(m.a)) as f64;
                let db = g.degree(g.global(m.b)) as f64;
                m.weight * (1.0 / da + 1.0 / db)
            })
            .collect();
    }

    /// `s(a, b)²` for match `mi`.
    #[inline]
    pub fn match_scale_sq(&self, mi: usize) -> f64 {
        self.scale_sq[mi]
    }

    #[inline]
    fn match_delta(&self, mi: usize) -> Vec3 {
        let m = &self.graph.matches()[mi];
        self.positions[self.graph.global(m.a)] - self.positions[self.graph.global(m.b)]
    }

    /// Weighted energy summed over matches.
    pub fn energy(&self) -> f64 {
        chunked_sum(self.graph.matches(), |mi, _| {
            self.match_scale_sq(mi) * self.match_delta(mi).norm_squared()
        })
    }

    /// The same energy summed per keypoint as the weighted mean squared distance to its
    /// matches.
    pub fn energy_grouped(&self) -> f64 {
        chunked_sum(&self.positions, |p, pos| {
            let inc = self.graph.incident(p);
            if inc.is_empty() {
                return 0.0;
            }
            let s: f64 = inc
                .iter()
                .map(|&mi| {
                    let m = &self.graph.matches()[mi as usize];
                    let other = if self.graph.global(m.a) == p { m.b } else { m.a };
                    m.weight * (pos - self.positions[self.graph.global(other)]).norm_squared()
                })
                .sum();
            s / inc.len() as f64
        })
    }

    /// `Σ w d / Σ w` over all matches.
    pub fn mean_weighted_distance(&self) -> f64 {
        self.energy_and_distance().1
    }

    /// [`energy`](Self::energy) and [`mean_weighted_distance`](Self::mean_weighted_distance)
    /// from one pass over the matches.
    pub fn energy_and_distance(&self) -> (f64, f64) {
        let [e, wd, w] = chunked_sums(self.graph.matches(), |mi, m| {
            let d2 = self.match_delta(mi).norm_squared();
            [self.match_scale_sq(mi) * d2, m.weight * d2.sqrt(), m.weight]
        });
        (e, if w > 0.0 { wd / w } else { 0.0 })
    }

    /// Per keypoint, `Σ_{m ∋ p} s_m² (pos_p − pos_other)`: the rows of `Mᵀ S² M (P + B X)`.
    pub(crate) fn point_residuals(&self) -> Vec<Vec3> {
        (0..self.positions.len())
            .into_par_iter()
            .map(|p| {
                let pos = self.positions[p];
                self.graph.incident(p).iter().fold(Vec3::zeros(), |acc, &mi| {
                    let m = &self.graph.matches()[mi as usize];
                    let other = if self.graph.global(m.a) == p { m.b } else { m.a };
                    acc + self.match_scale_sq(mi as usize) * (pos - self.positions[self.graph.global(other)])
                })
            })
            .collect()
    }

    /// Per keypoint `Σ_{m ∋ p} s_m²`, the diagonal of `Mᵀ S² M`.
    pub(crate) fn point_stiffness(&self) -> Vec<f64> {
        (0..self.positions.len())
            .into_par_iter()
            .map(|p| {
                self.graph
                    .incident(p)
                    .iter()
                    .map(|&mi| self.match_scale_sq(mi as usize))
                    .sum()
            })
            .collect()
    }

    /// Gradient of [`energy`](Self::energy) with respect to each image's active grid
    /// coefficients: `2 Bᵀ Mᵀ S² M (P + B X)`. Images without an active grid get an empty
    /// vector.
    pub fn gradient(&self) -> Vec<Vec<Vec3>> {
        let r = self.point_residuals();
        (0..self.n_images())
            .into_par_iter()
            .map(|i| {
                let Some(grid) = self.transforms[i].active_grid() else {
                    return Vec::new();
                };
                let dims = grid.dims();
                let mut g = vec![Vec3::zeros(); grid.n_controls()];
                for p in self.graph.image_range(i) {
                    if let Some(row) = &self.rows[p] {
                        let rp = 2.0 * r[p];
                        row.for_each(dims, |j, b| g[j] += b * rp);
                    }
                }
                g
            })
            .collect()
    }
}
