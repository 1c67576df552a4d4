//! Stage-0 structural prior: Gaussian KNN jittering plus BEV morphological
//! expansion. The union supplies candidate ray directions for diffusion.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::PriorError;
use crate::geometry::{decompose, Point3, PointCloud, RayDecomposition, ScanlineAttr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeightStat {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage0Config {
    pub k_neighbors: usize,
    /// Standard deviation of the jitter kernel, meters.
    pub jitter_sigma: f64,
    /// BEV cell edge, meters.
    pub bev_cell: f64,
    /// Dilation radius in cells (Chebyshev ball).
    pub dilation_radius: usize,
    pub height_stat: HeightStat,
    /// Half-width of the BEV grid, meters.
    pub grid_extent: f64,
    /// Density ratio |P_coarse| / |P_in| to trim or repeat to; `None` keeps the union.
    pub target_multiplier: Option<f64>,
}

impl Default for Stage0Config {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            jitter_sigma: 0.10,
            bev_cell: 0.20,
            dilation_radius: 2,
            height_stat: HeightStat::Mean,
            grid_extent: 60.0,
            target_multiplier: None,
        }
    }
}

impl Stage0Config {
    pub fn validate(&self) -> Result<(), PriorError> {
        if self.k_neighbors < 1 {
            return Err(PriorError::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        if !(self.jitter_sigma > 0.0) {
            return Err(PriorError::InvalidConfig("jitter_sigma must be > 0".into()));
        }
        if !(self.bev_cell > 0.0) {
            return Err(PriorError::InvalidConfig("bev_cell must be > 0".into()));
        }
        if !(self.grid_extent > 0.0) {
            return Err(PriorError::InvalidConfig("grid_extent must be > 0".into()));
        }
        if let Some(m) = self.target_multiplier {
            if !(m > 0.0) {
                return Err(PriorError::InvalidConfig("target_multiplier must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Per-point RNG stream so results do not depend on scheduling.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `k` samples from `N(p_i, sigma^2 I)` per input point, grouped by source point.
pub fn knn_jitter(input: &PointCloud, cfg: &Stage0Config, seed: u64) -> Result<PointCloud, PriorError> {
    if input.is_empty() {
        return Err(PriorError::EmptyInput);
    }
    cfg.validate()?;
    let k = cfg.k_neighbors;
    let normal = Normal::new(0.0, cfg.jitter_sigma).expect("positive sigma");
    let points: Vec<Point3> = input
        .points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, p)| {
            let mut rng = stream_rng(seed, i as u64);
            (0..k)
                .map(|_| {
                    let dx = normal.sample(&mut rng);
                    let dy = normal.sample(&mut rng);
                    let dz = normal.sample(&mut rng);
                    *p + Point3::new(dx, dy, dz)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let attrs = input
        .attrs
        .as_ref()
        .map(|a| a.iter().flat_map(|attr| std::iter::repeat_n(*attr, k)).collect::<Vec<ScanlineAttr>>());
    Ok(PointCloud { points, attrs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevExpansion {
    pub cloud: PointCloud,
    /// Input points outside the grid, skipped.
    pub clipped: usize,
    /// Grid cells occupied before dilation.
    pub source_cells: usize,
}

struct BevGrid {
    side: usize,
    cell: f64,
    extent: f64,
}

impl BevGrid {
    fn index(&self, p: &Point3) -> Option<(usize, usize)> {
        let fx = ((p.x + self.extent) / self.cell).floor();
        let fy = ((p.y + self.extent) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.side as f64 || fy >= self.side as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            -self.extent + (ix as f64 + 0.5) * self.cell,
            -self.extent + (iy as f64 + 0.5) * self.cell,
        )
    }
}

fn height_statistic(values: &mut [f64], stat: HeightStat) -> f64 {
    match stat {
        HeightStat::Mean => values.iter().sum::<f64>() / values.len() as f64,
        HeightStat::Median => {
            values.sort_by(|a, b| a.total_cmp(b));
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                0.5 * (values[n / 2 - 1] + values[n / 2])
            }
        }
    }
}

/// Dilates the BEV occupancy of `input` and back-projects every newly
/// activated cell to one point at the cell center, with z taken from the
/// heights of input points in occupied cells within the dilation radius.
pub fn bev_expand(input: &PointCloud, cfg: &Stage0Config) -> Result<BevExpansion, PriorError> {
    if input.is_empty() {
        return Err(PriorError::EmptyInput);
    }
    cfg.validate()?;
    let side = (2.0 * cfg.grid_extent / cfg.bev_cell).ceil() as usize;
    let grid = BevGrid {
        side,
        cell: cfg.bev_cell,
        extent: cfg.grid_extent,
    };
    let mut heights: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut clipped = 0usize;
    for p in &input.points {
        match grid.index(p) {
            Some((ix, iy)) => heights.entry(iy * side + ix).or_default().push(p.z),
            None => clipped += 1,
        }
    }
    if clipped > 0 {
        log::warn!("bev_expand: {clipped} points outside the +/-{} m grid were skipped", cfg.grid_extent);
    }
    let mut occupied: Vec<usize> = heights.keys().copied().collect();
    occupied.sort_unstable();
    let r = cfg.dilation_radius as isize;
    let mut fresh: Vec<usize> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for &c in &occupied {
            let (cx, cy) = ((c % side) as isize, (c / side) as isize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (cx + dx, cy + dy);
                    if nx < 0 || ny < 0 || nx >= side as isize || ny >= side as isize {
                        continue;
                    }
                    let n = ny as usize * side + nx as usize;
                    if !heights.contains_key(&n) && seen.insert(n) {
                        fresh.push(n);
                    }
                }
            }
        }
    }
    fresh.sort_unstable();
    let points: Vec<Point3> = fresh
        .par_iter()
        .map(|&n| {
            let (ix, iy) = ((n % side) as isize, (n / side) as isize);
            let mut zs = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (ix + dx, iy + dy);
                    if sx < 0 || sy < 0 || sx >= side as isize || sy >= side as isize {
                        continue;
                    }
                    if let Some(h) = heights.get(&(sy as usize * side + sx as usize)) {
                        zs.extend_from_slice(h);
                    }
                }
            }
            let (x, y) = grid.center(ix as usize, iy as usize);
            Point3::new(x, y, height_statistic(&mut zs, cfg.height_stat))
        })
        .collect();
    Ok(BevExpansion {
        cloud: PointCloud::new(points),
        clipped,
        source_cells: occupied.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorSource {
    /// Jittered copy of the input point with this index.
    Jitter(usize),
    /// Back-projected BEV cell.
    Expansion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePrior {
    pub cloud: PointCloud,
    pub rays: Vec<RayDecomposition>,
    pub sources: Vec<PriorSource>,
}

impl CoarsePrior {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn select(&self, order: &[usize]) -> CoarsePrior {
        CoarsePrior {
            cloud: PointCloud::new(order.iter().map(|&i| self.cloud.points[i]).collect()),
            rays: order.iter().map(|&i| self.rays[i]).collect(),
            sources: order.iter().map(|&i| self.sources[i]).collect(),
        }
    }
}

/// `P_coarse = knn_jitter ∪ bev_expand`, with the ray decomposition of every point.
pub fn build_prior(input: &PointCloud, cfg: &Stage0Config, seed: u64) -> Result<CoarsePrior, PriorError> {
    let jitter = knn_jitter(input, cfg, seed)?;
    let expansion = bev_expand(input, cfg)?;
    let k = cfg.k_neighbors;
    let mut sources: Vec<PriorSource> = (0..jitter.len()).map(|j| PriorSource::Jitter(j / k)).collect();
    sources.extend(std::iter::repeat_n(PriorSource::Expansion, expansion.cloud.len()));
    let mut points = jitter.points;
    points.extend_from_slice(&expansion.cloud.points);
    let rays = points
        .iter()
        .map(|p| decompose(*p))
        .collect::<Result<Vec<_>, _>>()?;
    let prior = CoarsePrior {
        cloud: PointCloud::new(points),
        rays,
        sources,
    };
    Ok(match cfg.target_multiplier {
        Some(m) => apply_density_target(&prior, (m * input.len() as f64).round() as usize, seed),
        None => prior,
    })
}

/// Trims (or cyclically repeats) the prior to `target` points using a
/// spatially stratified order: one point per 3D voxel per round, so any
/// prefix of the order is spread evenly over the occupied space.
pub fn apply_density_target(prior: &CoarsePrior, target: usize, seed: u64) -> CoarsePrior {
    if prior.is_empty() || target == prior.len() {
        return prior.clone();
    }
    prior.select(&density_target_indices(&prior.cloud.points, target, seed))
}

/// Indices kept by [`apply_density_target`], ascending when trimming.
pub fn density_target_indices(points: &[Point3], target: usize, seed: u64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    if target >= points.len() {
        return (0..target).map(|i| i % points.len()).collect();
    }
    let order = stratified_order(points, STRATIFY_VOXEL, seed);
    let mut p = order[..target].to_vec();
    p.sort_unstable();
    p
}

/// Voxel edge used for density trimming, meters.
pub const STRATIFY_VOXEL: f64 = 0.3;

pub fn stratified_order(points: &[Point3], voxel: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_57a7);
    let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        buckets.entry(key).or_default().push(i);
    }
    let mut keys: Vec<_> = buckets.keys().copied().collect();
    keys.sort_unstable();
    // random but seeded voxel visiting order and per-voxel member order
    let mut ranked: Vec<(usize, u64, usize)> = Vec::with_capacity(points.len());
    for key in keys {
        let members = buckets.get_mut(&key).expect("present");
        let voxel_tag: u64 = rng.random();
        for j in (1..members.len()).rev() {
            let s = rng.random_range(0..=j);
            members.swap(j, s);
        }
        for (rank, &m) in members.iter().enumerate() {
            ranked.push((rank, voxel_tag, m));
        }
    }
    ranked.sort_unstable();
    ranked.into_iter().map(|(_, _, m)| m).collect()
}
