//! Uniform grid hashing for radius and nearest-neighbor queries.
//!
//! Only occupied cells are stored, so memory and build time are linear in
//! the number of points regardless of the extent of the cloud.

use std::collections::HashMap;

/// Integer cell coordinate `floor(p / cell_size)`, componentwise.
pub type CellKey = [i64; 3];

pub fn cell_key(p: &[f64; 3], cell_size: f64) -> CellKey {
    p.map(|c| (c / cell_size).floor() as i64)
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[derive(Debug, Clone)]
pub struct HashGrid<'a> {
    positions: &'a [[f64; 3]],
    cell_size: f64,
    /// Point indices grouped by cell; ascending within each cell.
    order: Vec<u32>,
    /// Cell key -> range in `order`.
    cells: HashMap<CellKey, (u32, u32)>,
    key_min: CellKey,
    key_max: CellKey,
}

impl<'a> HashGrid<'a> {
    /// Hash every point into its cell.
    ///
    /// # Panics
    ///
    /// On a non-positive cell size or a non-finite coordinate; clouds reject
    /// those at construction.
    pub fn build(positions: &'a [[f64; 3]], cell_size: f64) -> Self {
        assert!(cell_size > 0.0 && cell_size.is_finite(), "cell size must be positive");
        assert!(positions.len() < u32::MAX as usize, "too many points");
        let keys: Vec<CellKey> = positions
            .iter()
            .map(|p| {
                assert!(p.iter().all(|c| c.is_finite()), "non-finite coordinate");
                cell_key(p, cell_size)
            })
            .collect();
        // counting sort by cell id: linear, and ascending index within each cell
        let mut ids: HashMap<CellKey, u32> = HashMap::new();
        let mut counts: Vec<u32> = Vec::new();
        let cell_of: Vec<u32> = keys
            .iter()
            .map(|key| {
                let next = counts.len() as u32;
                let id = *ids.entry(*key).or_insert(next);
                if id == next {
                    counts.push(0);
                }
                counts[id as usize] += 1;
                id
            })
            .collect();
        let mut starts = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u32;
        for &c in &counts {
            starts.push(acc);
            acc += c;
        }
        starts.push(acc);
        let mut fill = starts.clone();
        let mut order = vec![0u32; positions.len()];
        for (i, &id) in cell_of.iter().enumerate() {
            order[fill[id as usize] as usize] = i as u32;
            fill[id as usize] += 1;
        }
        let mut key_min = [i64::MAX; 3];
        let mut key_max = [i64::MIN; 3];
        let cells: HashMap<CellKey, (u32, u32)> = ids
            .into_iter()
            .map(|(key, id)| {
                for k in 0..3 {
                    key_min[k] = key_min[k].min(key[k]);
                    key_max[k] = key_max[k].max(key[k]);
                }
                (key, (starts[id as usize], starts[id as usize + 1]))
            })
            .collect();
        Self {
            positions,
            cell_size,
            order,
            cells,
            key_min,
            key_max,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn positions(&self) -> &'a [[f64; 3]] {
        self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Points of one cell, ascending.
    pub fn cell(&self, key: &CellKey) -> &[u32] {
        match self.cells.get(key) {
            Some(&(s, e)) => &self.order[s as usize..e as usize],
            None => &[],
        }
    }

    /// Occupied cells in lexicographic key order, with their members.
    pub fn sorted_cells(&self) -> Vec<(CellKey, &[u32])> {
        let mut cells: Vec<(CellKey, &[u32])> = self
            .cells
            .iter()
            .map(|(k, &(s, e))| (*k, &self.order[s as usize..e as usize]))
            .collect();
        cells.sort_unstable_by_key(|c| c.0);
        cells
    }

    /// All occupied cells with their members, in unspecified order.
    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &[u32])> {
        self.cells
            .iter()
            .map(|(k, &(s, e))| (k, &self.order[s as usize..e as usize]))
    }

    /// Indices `q` with `|q - center| < radius`, ascending.
    pub fn within(&self, center: &[f64; 3], radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        self.within_into(center, radius, &mut out);
        out
    }

    pub fn within_into(&self, center: &[f64; 3], radius: f64, out: &mut Vec<u32>) {
        out.clear();
        let r2 = radius * radius;
        let lo = center.map(|c| ((c - radius) / self.cell_size).floor() as i64);
        let hi = center.map(|c| ((c + radius) / self.cell_size).floor() as i64);
        for x in lo[0].max(self.key_min[0])..=hi[0].min(self.key_max[0]) {
            for y in lo[1].max(self.key_min[1])..=hi[1].min(self.key_max[1]) {
                for z in lo[2].max(self.key_min[2])..=hi[2].min(self.key_max[2]) {
                    for &q in self.cell(&[x, y, z]) {
                        if dist2(&self.positions[q as usize], center) < r2 {
                            out.push(q);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
    }

    /// Neighbors of point `index` within `radius`, itself included.
    pub fn radius_neighbors(&self, index: usize, radius: f64) -> Vec<u32> {
        self.within(&self.positions[index], radius)
    }

    /// Index of the point closest to `query`; ties go to the smaller index.
    ///
    /// Searches rings of cells outward until no unvisited ring can hold a
    /// point at least as close as the current best.
    ///
    /// # Panics
    ///
    /// If the grid is empty.
    pub fn nearest(&self, query: &[f64; 3]) -> usize {
        assert!(!self.is_empty(), "nearest neighbor in an empty grid");
        let center = cell_key(query, self.cell_size);
        let mut best = (f64::INFINITY, u32::MAX);
        let consider = |best: &mut (f64, u32), q: u32| {
            let d = dist2(&self.positions[q as usize], query);
            if d < best.0 || (d == best.0 && q < best.1) {
                *best = (d, q);
            }
        };
        // ring count needed to cover every occupied cell
        let max_ring = (0..3)
            .map(|k| (center[k] - self.key_min[k]).abs().max((self.key_max[k] - center[k]).abs()))
            .max()
            .unwrap_or(0);
        let mut ring: i64 = 0;
        loop {
            let side = (2 * ring + 1) as usize;
            let ring_cells = side.pow(3) - (side.saturating_sub(2)).pow(3);
            if ring_cells > self.cells.len() {
                // cheaper to scan what is left than to probe empty cells
                for (key, members) in self.cells() {
                    let cheb = (0..3).map(|k| (key[k] - center[k]).abs()).max().unwrap();
                    if cheb >= ring {
                        members.iter().for_each(|&q| consider(&mut best, q));
                    }
                }
                break;
            }
            for_each_ring_cell(center, ring, |key| {
                for &q in self.cell(&key) {
                    consider(&mut best, q);
                }
            });
            // every point beyond this ring is at least ring * cell_size away
            let bound = ring as f64 * self.cell_size;
            if best.0 < bound * bound || ring >= max_ring {
                break;
            }
            ring += 1;
        }
        best.1 as usize
    }
}

/// Visit the cells at Chebyshev distance exactly `ring` from `center`.
fn for_each_ring_cell(center: CellKey, ring: i64, mut f: impl FnMut(CellKey)) {
    if ring == 0 {
        f(center);
        return;
    }
    for dx in -ring..=ring {
        for dy in -ring..=ring {
            let edge = dx.abs() == ring || dy.abs() == ring;
            if edge {
                for dz in -ring..=ring {
                    f([center[0] + dx, center[1] + dy, center[2] + dz]);
                }
            } else {
                f([center[0] + dx, center[1] + dy, center[2] - ring]);
                f([center[0] + dx, center[1] + dy, center[2] + ring]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64, extent: f64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-extent..extent)))
            .collect()
    }

    #[test]
    fn cube_corners_share_a_cell() {
        let cell = 1.0;
        let s = 0.9 * cell;
        let pts: Vec<[f64; 3]> = (0..8)
            .map(|i| {
                [
                    0.05 + s * (i & 1) as f64,
                    0.05 + s * ((i >> 1) & 1) as f64,
                    0.05 + s * ((i >> 2) & 1) as f64,
                ]
            })
            .collect();
        let grid = HashGrid::build(&pts, cell);
        assert_eq!(grid.cell_count(), 1);
        assert_eq!(grid.cell(&[0, 0, 0]).len(), 8);
    }

    #[test]
    fn far_points_in_different_cells() {
        let pts = vec![[0.1, 0.0, 0.0], [2.1, 0.0, 0.0]];
        let grid = HashGrid::build(&pts, 1.0);
        assert_eq!(grid.cell_count(), 2);
    }

    #[test]
    fn cells_partition_the_points() {
        let pts = random_cloud(2000, 1, 3.0);
        let grid = HashGrid::build(&pts, 0.37);
        let mut all: Vec<u32> = grid.cells().flat_map(|(_, m)| m.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<u32>>());
        for (key, members) in grid.cells() {
            for &i in members {
                assert_eq!(cell_key(&pts[i as usize], 0.37), *key);
            }
        }
    }

    #[test]
    fn isolated_point_is_its_own_neighbor() {
        let pts = vec![[0.0; 3], [5.0, 5.0, 5.0]];
        let grid = HashGrid::build(&pts, 0.5);
        assert_eq!(grid.radius_neighbors(0, 1.0), vec![0]);
    }

    #[test]
    fn collinear_middle_sees_all() {
        let pts = vec![[0.0; 3], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let grid = HashGrid::build(&pts, 0.25);
        assert_eq!(grid.radius_neighbors(1, 0.6), vec![0, 1, 2]);
        assert_eq!(grid.radius_neighbors(0, 0.6), vec![0, 1]);
        // boundary excluded
        assert_eq!(grid.radius_neighbors(0, 0.5), vec![0]);
    }

    #[test]
    fn radius_matches_brute_force() {
        let pts = random_cloud(1000, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cell in [0.05, 0.2, 0.7] {
            let grid = HashGrid::build(&pts, cell);
            for _ in 0..100 {
                let i = rng.gen_range(0..pts.len());
                let radius = rng.gen_range(0.01..0.6);
                let brute: Vec<u32> = (0..pts.len() as u32)
                    .filter(|&q| dist2(&pts[q as usize], &pts[i]) < radius * radius)
                    .collect();
                assert_eq!(grid.radius_neighbors(i, radius), brute);
            }
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = random_cloud(1000, 4, 1.0);
        let grid = HashGrid::build(&pts, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 0..100 {
            let extent = if t % 10 == 0 { 30.0 } else { 1.2 };
            let q: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-extent..extent));
            let brute = (0..pts.len())
                .min_by(|&a, &b| dist2(&pts[a], &q).total_cmp(&dist2(&pts[b], &q)).then(a.cmp(&b)))
                .unwrap();
            assert_eq!(grid.nearest(&q), brute);
        }
    }

    #[test]
    fn nearest_exact_and_ties() {
        let pts = vec![
            [5.0, 5.0, 5.0],
            [3.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [9.0, 9.0, 9.0],
            [0.0, 4.0, 0.0],
            [7.0, 0.0, 1.0],
            [2.0, 2.0, 2.0],
            [-1.0, 0.0, 0.0],
        ];
        let grid = HashGrid::build(&pts, 0.3);
        assert_eq!(grid.nearest(&[0.0, 4.0, 0.0]), 4);
        // equidistant from #2 and #7
        assert_eq!(grid.nearest(&[0.0, 0.0, 0.0]), 2);
    }
}
