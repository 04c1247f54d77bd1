//! Uniform spatial hash for nearest-neighbor and fixed-radius queries.

use super::Point;

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub(crate) struct SpatialHash<'a> {
    points: &'a [Point],
    lo: Point,
    cell: f64,
    dims: [i64; 3],
    start: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Point], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut cell = cell;
        let cells_for = |c: f64| -> [i64; 3] { std::array::from_fn(|a| ((hi[a] - lo[a]) / c).floor() as i64 + 1) };
        let mut dims = cells_for(cell);
        while dims.iter().map(|&d| d as f64).product::<f64>() > 8.0 * points.len() as f64 + 64.0 {
            cell *= 1.5;
            dims = cells_for(cell);
        }
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; n_cells + 1];
        let mut cell_of = Vec::with_capacity(points.len());
        let tmp = Self {
            points,
            lo,
            cell,
            dims,
            start: Vec::new(),
            items: Vec::new(),
        };
        for p in points {
            let c = tmp.flat(tmp.coord(p));
            counts[c + 1] += 1;
            cell_of.push(c);
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            start: counts,
            items,
            ..tmp
        }
    }

    /// A cell size giving a few points per occupied cell.
    pub fn auto(points: &'a [Point]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: f64 = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let cell = if ext > 0.0 {
            ext / (points.len() as f64).sqrt().max(1.0)
        } else {
            1.0
        };
        Self::new(points, cell)
    }

    fn coord(&self, p: &Point) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.lo[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize
    }

    fn in_range(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && c[a] < self.dims[a])
    }

    fn cell_items(&self, c: [i64; 3]) -> &[usize] {
        let f = self.flat(c);
        &self.items[self.start[f]..self.start[f + 1]]
    }

    /// Visits every point in cells at Chebyshev cell distance exactly `r` from `qc`.
    fn visit_ring(&self, qc: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let lo: [i64; 3] = std::array::from_fn(|a| (qc[a] - r).max(0));
        let hi: [i64; 3] = std::array::from_fn(|a| (qc[a] + r).min(self.dims[a] - 1));
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let c = [i, j, k];
                    let cheb = (0..3).map(|a| (c[a] - qc[a]).abs()).max().unwrap();
                    if cheb != r {
                        continue;
                    }
                    for &idx in self.cell_items(c) {
                        f(idx);
                    }
                }
            }
        }
    }

    fn ring_bounds(&self, qc: [i64; 3]) -> (i64, i64) {
        let mut rmin = 0;
        let mut rmax = 0;
        for a in 0..3 {
            let below = -qc[a];
            let above = qc[a] - (self.dims[a] - 1);
            rmin = rmin.max(below).max(above);
            rmax = rmax.max(qc[a].abs()).max((self.dims[a] - 1 - qc[a]).abs());
        }
        (rmin, rmax)
    }

    /// The `k` nearest points to `q` as `(squared distance, index)`, ascending,
    /// skipping `exclude`.
    pub fn knn(&self, q: &Point, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let qc = self.coord(q);
        let (rmin, rmax) = self.ring_bounds(qc);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for r in rmin..=rmax {
            self.visit_ring(qc, r, |i| {
                if Some(i) == exclude {
                    return;
                }
                let d = dist2(q, &self.points[i]);
                if best.len() < k || d < best[best.len() - 1].0 {
                    let pos = best.partition_point(|&(bd, bi)| (bd, bi) < (d, i));
                    best.insert(pos, (d, i));
                    best.truncate(k);
                }
            });
            if best.len() == k {
                let reach = r as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        best
    }

    /// Indices of all points with `‖p − q‖ ≤ radius`, ascending. `radius`
    /// must not exceed the cell size.
    pub fn within(&self, q: &Point, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let r2 = radius * radius;
        let qc = self.coord(q);
        for i in qc[0] - 1..=qc[0] + 1 {
            for j in qc[1] - 1..=qc[1] + 1 {
                for k in qc[2] - 1..=qc[2] + 1 {
                    let c = [i, j, k];
                    if !self.in_range(c) {
                        continue;
                    }
                    out.extend(
                        self.cell_items(c)
                            .iter()
                            .copied()
                            .filter(|&t| dist2(q, &self.points[t]) <= r2),
                    );
                }
            }
        }
        out.sort_unstable();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.2)])
            .collect()
    }

    #[test]
    fn knn_matches_sorting_all_distances() {
        let pts = cloud(400, 1);
        let hash = SpatialHash::auto(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = [rng.gen_range(-1.0..4.0), rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..1.0)];
            let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (dist2(&q, p), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(hash.knn(&q, 5, None), all[..5].to_vec());
        }
    }

    #[test]
    fn within_matches_brute_force() {
        let pts = cloud(300, 3);
        let r = 0.25;
        let hash = SpatialHash::new(&pts, r);
        let mut out = Vec::new();
        for q in &pts {
            hash.within(q, r, &mut out);
            let brute: Vec<usize> = (0..pts.len()).filter(|&t| dist2(q, &pts[t]) <= r * r).collect();
            assert_eq!(out, brute);
        }
    }
}
