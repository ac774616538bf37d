//! Signal-independent precomputation: grid quantization, pooling plans and
//! tangent-image selection plans for every level of the hierarchy.
//!
//! Everything here depends on point positions only. A [`Hierarchy`] is built
//! once per scan (and per augmented copy) and then reused by every forward
//! and backward pass.

mod cache;

use thiserror::Error;

use crate::geometry::{self, TangentFrame};
use crate::io::{PointCloud, UNLABELED};
use crate::par;
use crate::spatial::{CellKey, HashGrid};

pub use cache::{
    decode_hierarchy, encode_hierarchy, read_hierarchy, read_hierarchy_for, source_hash,
    write_hierarchy, CacheError,
};

/// Most points a pooling row can hold when the grid step doubles.
pub const POOL_WIDTH: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("pooling cell {row} holds {count} points, more than {POOL_WIDTH}; was the cloud base-quantized?")]
    PoolOverflow { row: usize, count: usize },
    #[error("cannot build a hierarchy from an empty cloud")]
    EmptyCloud,
    #[error("invalid hierarchy configuration: {0}")]
    Config(String),
}

/// How tangent-image pixels take their value from projected neighbors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interpolation {
    /// Each pixel copies the neighbor projecting closest to it.
    Nearest,
    /// Normalized Gaussian mixture over the `k` neighbors closest to the
    /// pixel, with bandwidth `sigma_factor * r`.
    Gaussian { k: usize, sigma_factor: f64 },
}

impl Interpolation {
    pub fn k(&self) -> usize {
        match self {
            Self::Nearest => 1,
            Self::Gaussian { k, .. } => *k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyConfig {
    /// Cell size of the initial quantization, meters.
    pub base_cell: f64,
    /// Pixel size at level 0, meters. Doubles at every level.
    pub r0: f64,
    pub levels: usize,
    /// Tangent image side in pixels (odd).
    pub image_size: usize,
    pub interpolation: Interpolation,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            base_cell: 0.05,
            r0: 0.05,
            levels: 3,
            image_size: 3,
            interpolation: Interpolation::Nearest,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.to_string()));
        if !(self.base_cell > 0.0 && self.base_cell.is_finite()) {
            return bad("base_cell must be positive");
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return bad("r0 must be positive");
        }
        if self.levels == 0 {
            return bad("at least one level is required");
        }
        if self.image_size % 2 == 0 {
            return bad("image size must be odd");
        }
        if let Interpolation::Gaussian { k, sigma_factor } = self.interpolation {
            if k == 0 {
                return bad("k must be at least 1");
            }
            if !(sigma_factor > 0.0 && sigma_factor.is_finite()) {
                return bad("sigma_factor must be positive");
            }
        }
        Ok(())
    }

    /// Pixel size at `level`.
    pub fn pixel_size(&self, level: usize) -> f64 {
        self.r0 * (1u64 << level) as f64
    }

    /// Neighborhood radius `R = 2r` at `level`.
    pub fn radius(&self, level: usize) -> f64 {
        2.0 * self.pixel_size(level)
    }

    /// Grid step at `level`.
    pub fn cell_size(&self, level: usize) -> f64 {
        self.base_cell * (1u64 << level) as f64
    }
}

/// Pixel centers of an `l x l` tangent image with pixel size `r`, row-major.
///
/// Pixel `a * l + b` sits at `((a - h) r, (b - h) r)` with `h = (l - 1) / 2`,
/// so the middle pixel is the origin.
pub fn pixel_centers(l: usize, r: f64) -> Vec<[f64; 2]> {
    assert!(l % 2 == 1, "image size must be odd");
    let h = (l / 2) as f64;
    (0..l * l)
        .map(|p| [((p / l) as f64 - h) * r, ((p % l) as f64 - h) * r])
        .collect()
}

/// Points and frames of one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    pub level: usize,
    pub positions: Vec<[f64; 3]>,
    pub frames: Vec<TangentFrame>,
    /// Pixel size `r`.
    pub pixel_size: f64,
    /// Neighborhood radius `R = 2r`.
    pub radius: f64,
    /// Tangent image side `l`.
    pub image_size: usize,
}

impl LevelGeometry {
    /// Estimate frames with neighborhoods of radius `2 * pixel_size`.
    pub fn new(level: usize, positions: Vec<[f64; 3]>, pixel_size: f64, image_size: usize) -> Self {
        let radius = 2.0 * pixel_size;
        let frames = {
            let grid = HashGrid::build(&positions, radius);
            geometry::estimate_frames(&grid, radius)
        };
        Self {
            level,
            positions,
            frames,
            pixel_size,
            radius,
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Pixel count `L = l²`.
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Selection plan of one level: `k` index matrices with matching weights,
/// plus the interpolated distance image of every point.
///
/// Matrices are stored slot-major: entry `(slot, n, pixel)` lives at
/// `(slot * N + n) * L + pixel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPlan {
    pub points: usize,
    pub pixels: usize,
    pub k: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    /// Signed distance to the center's tangent plane, meters, `N x L`.
    pub distances: Vec<f64>,
    /// Whether the nearest projection lies within `r·√2` of the pixel, `N x L`.
    pub valid: Vec<bool>,
}

impl ConvPlan {
    /// Index matrix of slot `i`, `N x L`.
    pub fn index_matrix(&self, slot: usize) -> &[u32] {
        let n = self.points * self.pixels;
        &self.indices[slot * n..(slot + 1) * n]
    }

    /// Weight matrix of slot `i`, `N x L`.
    pub fn weight_matrix(&self, slot: usize) -> &[f64] {
        let n = self.points * self.pixels;
        &self.weights[slot * n..(slot + 1) * n]
    }

    /// Distance image scaled by `1 / radius`, clamped to `[-1, 1]` and shifted to `[0, 1]`.
    pub fn normalized_distances(&self, radius: f64) -> Vec<f64> {
        self.distances
            .iter()
            .map(|d| 0.5 * (d / radius).clamp(-1.0, 1.0) + 0.5)
            .collect()
    }
}

struct PlanRow {
    indices: Vec<u32>,
    weights: Vec<f64>,
    distances: Vec<f64>,
    valid: Vec<bool>,
}

/// Per-point plan rows: slot-major within the row.
fn plan_row(
    level: &LevelGeometry,
    grid: &HashGrid<'_>,
    centers: &[[f64; 2]],
    n: usize,
    k: usize,
    sigma: Option<f64>,
) -> PlanRow {
    let neighbors = grid.radius_neighbors(n, level.radius);
    let proj = geometry::project_neighbors(&level.positions, &level.frames[n], n, &neighbors);
    let pixels = centers.len();
    let mut row = PlanRow {
        indices: vec![n as u32; k * pixels],
        weights: vec![0.0; k * pixels],
        distances: vec![0.0; pixels],
        valid: vec![false; pixels],
    };
    let valid_r2 = 2.0 * level.pixel_size * level.pixel_size;
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(proj.indices.len());
    for (pix, u) in centers.iter().enumerate() {
        ranked.clear();
        ranked.extend(proj.coords.iter().enumerate().map(|(m, v)| {
            let d = [u[0] - v[0], u[1] - v[1]];
            (d[0] * d[0] + d[1] * d[1], m)
        }));
        // neighbors are ascending by index, so ranking by position breaks ties
        let take = k.min(ranked.len());
        if take == 1 {
            let best = ranked
                .iter()
                .copied()
                .fold((f64::INFINITY, usize::MAX), |b, x| if x.0 < b.0 { x } else { b });
            ranked[0] = best;
        } else {
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let nearest = ranked[0].0;
        row.valid[pix] = nearest <= valid_r2;
        let weights: Vec<f64> = match sigma {
            None => vec![1.0],
            Some(s) => {
                let s2 = s * s;
                let raw: Vec<f64> = ranked[..take]
                    .iter()
                    .map(|(d2, _)| (-(d2 - nearest) / s2).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            }
        };
        let mut distance = 0.0;
        for (slot, (&(_, m), &w)) in ranked[..take].iter().zip(&weights).enumerate() {
            row.indices[slot * pixels + pix] = proj.indices[m];
            row.weights[slot * pixels + pix] = w;
            distance += w * proj.distances[m];
        }
        row.distances[pix] = distance;
    }
    row
}

fn assemble_plan(level: &LevelGeometry, interpolation: Interpolation) -> ConvPlan {
    let n_points = level.len();
    let centers = pixel_centers(level.image_size, level.pixel_size);
    let pixels = centers.len();
    let (k, sigma) = match interpolation {
        Interpolation::Nearest => (1, None),
        Interpolation::Gaussian { k, sigma_factor } => (k, Some(sigma_factor * level.pixel_size)),
    };
    let grid = HashGrid::build(&level.positions, level.radius);
    let rows = par::map_range(n_points, |n| plan_row(level, &grid, &centers, n, k, sigma));
    let mut plan = ConvPlan {
        points: n_points,
        pixels,
        k,
        indices: vec![0; k * n_points * pixels],
        weights: vec![0.0; k * n_points * pixels],
        distances: Vec::with_capacity(n_points * pixels),
        valid: Vec::with_capacity(n_points * pixels),
    };
    for (n, row) in rows.into_iter().enumerate() {
        for slot in 0..k {
            let dst = (slot * n_points + n) * pixels;
            plan.indices[dst..dst + pixels]
                .copy_from_slice(&row.indices[slot * pixels..(slot + 1) * pixels]);
            plan.weights[dst..dst + pixels]
                .copy_from_slice(&row.weights[slot * pixels..(slot + 1) * pixels]);
        }
        plan.distances.extend_from_slice(&row.distances);
        plan.valid.extend_from_slice(&row.valid);
    }
    plan
}

/// Nearest-neighbor selection plan of a level.
pub fn build_conv_plan_nn(level: &LevelGeometry) -> ConvPlan {
    assemble_plan(level, Interpolation::Nearest)
}

/// Gaussian-mixture selection plan over the top `k` neighbors of each pixel,
/// with bandwidth `sigma` in meters.
pub fn build_conv_plan_gaussian(level: &LevelGeometry, k: usize, sigma: f64) -> ConvPlan {
    assert!(k >= 1 && sigma > 0.0, "k >= 1 and sigma > 0 required");
    assemble_plan(
        level,
        Interpolation::Gaussian {
            k,
            sigma_factor: sigma / level.pixel_size,
        },
    )
}

pub fn build_conv_plan(level: &LevelGeometry, interpolation: Interpolation) -> ConvPlan {
    assemble_plan(level, interpolation)
}

/// Grouping of fine points into coarse points, stored as compressed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPlan {
    /// Row `r` holds `members[offsets[r]..offsets[r + 1]]`, ascending.
    pub offsets: Vec<u32>,
    pub members: Vec<u32>,
    /// Coarse row of every fine point.
    pub parent: Vec<u32>,
    /// Mean position of every row.
    pub positions: Vec<[f64; 3]>,
}

impl PoolPlan {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn fine_len(&self) -> usize {
        self.parent.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.members[self.offsets[r] as usize..self.offsets[r + 1] as usize]
    }

    pub fn max_occupancy(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| (w[1] - w[0]) as usize)
            .max()
            .unwrap_or(0)
    }

    /// Fixed-width `rows x width` index matrix; short rows are padded with
    /// their first member. Returns `None` if a row is wider than `width`.
    pub fn padded(&self, width: usize) -> Option<(Vec<u32>, Vec<u8>)> {
        let mut index = Vec::with_capacity(self.rows() * width);
        let mut counts = Vec::with_capacity(self.rows());
        for r in 0..self.rows() {
            let row = self.row(r);
            if row.len() > width {
                return None;
            }
            index.extend_from_slice(row);
            index.extend(std::iter::repeat(row[0]).take(width - row.len()));
            counts.push(row.len() as u8);
        }
        Some((index, counts))
    }
}

/// Clamp a mean that rounded out of its cell back inside it.
fn clamp_into_cell(mut p: [f64; 3], key: &CellKey, cell: f64) -> [f64; 3] {
    for k in 0..3 {
        let lo = key[k] as f64 * cell;
        while (p[k] / cell).floor() as i64 > key[k] {
            p[k] = next_down(p[k]);
        }
        while ((p[k] / cell).floor() as i64) < key[k] {
            p[k] = next_up(p[k].max(lo));
        }
    }
    p
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let b = x.to_bits();
    f64::from_bits(if x > 0.0 { b + 1 } else { b - 1 })
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

fn group_by_cell(positions: &[[f64; 3]], cell: f64) -> (PoolPlan, Vec<CellKey>) {
    let grid = HashGrid::build(positions, cell);
    let cells = grid.sorted_cells();
    let mut plan = PoolPlan {
        offsets: Vec::with_capacity(cells.len() + 1),
        members: Vec::with_capacity(positions.len()),
        parent: vec![0; positions.len()],
        positions: Vec::with_capacity(cells.len()),
    };
    let mut keys = Vec::with_capacity(cells.len());
    plan.offsets.push(0);
    for (r, (key, members)) in cells.iter().enumerate() {
        let mut mean = [0.0; 3];
        for &m in members.iter() {
            plan.parent[m as usize] = r as u32;
            for k in 0..3 {
                mean[k] += positions[m as usize][k];
            }
        }
        let count = members.len() as f64;
        plan.positions
            .push(clamp_into_cell(mean.map(|v| v / count), key, cell));
        plan.members.extend_from_slice(members);
        plan.offsets.push(plan.members.len() as u32);
        keys.push(*key);
    }
    (plan, keys)
}

/// Pool a level onto the grid of step `coarser_cell`: one row per occupied
/// cell in lexicographic key order, positioned at the mean of its members.
///
/// Fails if a cell receives more than [`POOL_WIDTH`] points.
pub fn build_pool_plan(positions: &[[f64; 3]], coarser_cell: f64) -> Result<PoolPlan, PlanError> {
    let (plan, _) = group_by_cell(positions, coarser_cell);
    for r in 0..plan.rows() {
        let count = plan.row(r).len();
        if count > POOL_WIDTH {
            return Err(PlanError::PoolOverflow { row: r, count });
        }
    }
    Ok(plan)
}

/// Most frequent label among `members`, ignoring unlabeled points; ties go
/// to the smaller class.
fn majority_label(labels: &[u32], members: &[u32]) -> u32 {
    let mut votes: Vec<(u32, u32)> = Vec::new();
    for &m in members {
        let l = labels[m as usize];
        if l == UNLABELED {
            continue;
        }
        match votes.iter_mut().find(|v| v.0 == l) {
            Some(v) => v.1 += 1,
            None => votes.push((l, 1)),
        }
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(UNLABELED, |v| v.0)
}

/// Collapse the raw cloud to one point per occupied `base_cell` cell.
///
/// Positions, colors and intensity are averaged; labels take the majority
/// vote of the cell. Rows of the returned plan may hold any number of points.
pub fn base_quantize(cloud: &PointCloud, base_cell: f64) -> (PointCloud, PoolPlan) {
    let (plan, _) = group_by_cell(cloud.positions(), base_cell);
    let rows = plan.rows();
    let mean_of = |values: &[f64], r: usize| {
        let row = plan.row(r);
        row.iter().map(|&m| values[m as usize]).sum::<f64>() / row.len() as f64
    };
    let mut out = PointCloud::new(plan.positions.clone()).expect("means of finite points");
    if let Some(colors) = cloud.colors() {
        let averaged = (0..rows)
            .map(|r| {
                let row = plan.row(r);
                let mut c = [0.0; 3];
                for &m in row {
                    for k in 0..3 {
                        c[k] += colors[m as usize][k];
                    }
                }
                c.map(|v| (v / row.len() as f64).clamp(0.0, 1.0))
            })
            .collect();
        out = out.with_colors(averaged).expect("lengths match");
    }
    if let Some(intensity) = cloud.intensity() {
        out = out
            .with_intensity((0..rows).map(|r| mean_of(intensity, r)).collect())
            .expect("lengths match");
    }
    if let Some(labels) = cloud.labels() {
        out = out
            .with_labels((0..rows).map(|r| majority_label(labels, plan.row(r))).collect())
            .expect("lengths match");
    }
    (out, plan)
}

/// One level of a hierarchy: geometry and its selection plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub geometry: LevelGeometry,
    pub conv: ConvPlan,
}

/// Everything precomputed for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    pub config: HierarchyConfig,
    /// Digest of the source cloud positions and configuration.
    pub source_hash: [u8; 32],
    /// Raw points grouped onto level-0 points.
    pub base: PoolPlan,
    /// Level-0 cloud with averaged signals and majority labels.
    pub base_cloud: PointCloud,
    pub levels: Vec<Level>,
    /// `pools[i]` maps level `i` onto level `i + 1`.
    pub pools: Vec<PoolPlan>,
}

impl Hierarchy {
    pub fn point_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.geometry.len()).collect()
    }
}

/// Quantize `cloud`, then pool, estimate frames and build selection plans
/// level by level with the pixel size doubling each time.
pub fn build_hierarchy(cloud: &PointCloud, config: &HierarchyConfig) -> Result<Hierarchy, PlanError> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(PlanError::EmptyCloud);
    }
    let (base_cloud, base) = base_quantize(cloud, config.base_cell);
    let mut levels = Vec::with_capacity(config.levels);
    let mut pools = Vec::with_capacity(config.levels.saturating_sub(1));
    let mut positions = base_cloud.positions().to_vec();
    for level in 0..config.levels {
        if level > 0 {
            let pool = build_pool_plan(&positions, config.cell_size(level))?;
            positions = pool.positions.clone();
            pools.push(pool);
        }
        let geometry = LevelGeometry::new(
            level,
            std::mem::take(&mut positions),
            config.pixel_size(level),
            config.image_size,
        );
        let conv = build_conv_plan(&geometry, config.interpolation);
        positions = geometry.positions.clone();
        levels.push(Level { geometry, conv });
    }
    Ok(Hierarchy {
        config: *config,
        source_hash: source_hash(cloud, config),
        base,
        base_cloud,
        levels,
        pools,
    })
}
