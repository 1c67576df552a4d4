//! Synthetic LiDAR scenes: a ground plane plus axis-aligned boxes, an
//! occlusion-correct raycaster, sparse/dense sweep pairs and free-space
//! (negative) ray sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SceneError;
use crate::geometry::{Point3, PointCloud, Ray, ScanlineAttr};

/// Duration of one simulated revolution, seconds.
pub const SWEEP_PERIOD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    /// Full edge lengths along x, y, z.
    pub extents: [f64; 3],
}

impl SceneBox {
    pub fn min(&self) -> Point3 {
        Point3::new(
            self.center[0] - 0.5 * self.extents[0],
            self.center[1] - 0.5 * self.extents[1],
            self.center[2] - 0.5 * self.extents[2],
        )
    }

    pub fn max(&self) -> Point3 {
        Point3::new(
            self.center[0] + 0.5 * self.extents[0],
            self.center[1] + 0.5 * self.extents[1],
            self.center[2] + 0.5 * self.extents[2],
        )
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    }

    /// Entry distance of a ray from the origin (slab method). `None` on a miss.
    pub fn intersect(&self, dir: &Point3) -> Option<f64> {
        let lo = self.min().to_array();
        let hi = self.max().to_array();
        let d = dir.to_array();
        let mut t_near = 0.0f64;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            if d[axis] == 0.0 {
                if lo[axis] > 0.0 || hi[axis] < 0.0 {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let (a, b) = (lo[axis] * inv, hi[axis] * inv);
            let (t0, t1) = if a <= b { (a, b) } else { (b, a) };
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        Some(t_near)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Height of the ground plane, meters (below the sensor, so negative).
    pub ground_z: f64,
    #[serde(default)]
    pub boxes: Vec<SceneBox>,
    #[serde(default = "default_max_range")]
    pub max_range: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_range() -> f64 {
    60.0
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        toml::from_str(text).map_err(|e| SceneError::InvalidSpec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }
}

/// Validated scene geometry shared read-only by the raycaster.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub ground_z: f64,
    pub boxes: Vec<SceneBox>,
    pub max_range: f64,
    pub seed: u64,
}

impl SceneGeometry {
    /// Nearest surface hit along `dir` within `max_range`.
    pub fn cast(&self, dir: &Point3, max_range: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        if dir.z < 0.0 {
            let t = self.ground_z / dir.z;
            if t > 0.0 {
                best = t;
            }
        }
        for b in &self.boxes {
            if let Some(t) = b.intersect(dir) {
                if t < best {
                    best = t;
                }
            }
        }
        (best <= max_range.min(self.max_range)).then_some(best)
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneGeometry, SceneError> {
    if !(spec.max_range > 0.0) || !spec.max_range.is_finite() {
        return Err(SceneError::InvalidSpec(format!("max_range {} must be positive", spec.max_range)));
    }
    if !spec.ground_z.is_finite() || spec.ground_z >= 0.0 {
        return Err(SceneError::InvalidSpec(format!(
            "ground plane z {} must lie below the sensor",
            spec.ground_z
        )));
    }
    let origin = Point3::default();
    for (i, b) in spec.boxes.iter().enumerate() {
        if b.extents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(SceneError::InvalidSpec(format!("box {i} has non-positive extents {:?}", b.extents)));
        }
        if b.center.iter().any(|c| !c.is_finite()) {
            return Err(SceneError::InvalidSpec(format!("box {i} center is not finite")));
        }
        if b.contains(&origin) {
            return Err(SceneError::InvalidSpec(format!("box {i} contains the sensor origin")));
        }
        let far = b.max().to_array().iter().chain(b.min().to_array().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        if far > spec.max_range {
            return Err(SceneError::InvalidSpec(format!("box {i} extends beyond max range {}", spec.max_range)));
        }
    }
    Ok(SceneGeometry {
        ground_z: spec.ground_z,
        boxes: spec.boxes.clone(),
        max_range: spec.max_range,
        seed: spec.seed,
    })
}

/// Parameters for [`random_scene_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub ground_z: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    pub max_range: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            ground_z: -1.7,
            min_boxes: 4,
            max_boxes: 8,
            min_distance: 5.0,
            max_distance: 25.0,
            max_range: 40.0,
        }
    }
}

/// Street-like random layout: cars, walls and poles standing on the ground.
pub fn random_scene_spec(seed: u64, cfg: &SceneGenConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = rng.random_range(0..3u8);
        let extents = match kind {
            0 => [rng.random_range(3.5..5.0), rng.random_range(1.6..2.1), rng.random_range(1.3..1.9)],
            1 => [rng.random_range(4.0..12.0), rng.random_range(0.3..0.8), rng.random_range(2.0..4.0)],
            _ => [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(2.5..5.0)],
        };
        let yaw_swap = rng.random_bool(0.5);
        let extents = if yaw_swap { [extents[1], extents[0], extents[2]] } else { extents };
        let dist = rng.random_range(cfg.min_distance..cfg.max_distance);
        let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        boxes.push(SceneBox {
            center: [dist * az.cos(), dist * az.sin(), cfg.ground_z + 0.5 * extents[2]],
            extents,
        });
    }
    SceneSpec {
        ground_z: cfg.ground_z,
        boxes,
        max_range: cfg.max_range,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub beam_count: usize,
    pub azimuth_steps: usize,
    /// [min, max] elevation in radians.
    pub vertical_fov: [f64; 2],
    pub max_range: f64,
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.beam_count < 1 {
            return Err(SceneError::InvalidSensor("beam_count must be >= 1".into()));
        }
        if self.azimuth_steps < 8 {
            return Err(SceneError::InvalidSensor("azimuth_steps must be >= 8".into()));
        }
        if !(self.vertical_fov[0] < self.vertical_fov[1]) {
            return Err(SceneError::InvalidSensor("vertical_fov min must be below max".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SceneError::InvalidSensor("max_range must be positive".into()));
        }
        Ok(())
    }

    /// Desk-scale sparse sensor: 16 beams.
    pub fn desk_sparse() -> Self {
        Self {
            beam_count: 16,
            azimuth_steps: 360,
            vertical_fov: [(-15f64).to_radians(), 3f64.to_radians()],
            max_range: 40.0,
        }
    }

    /// Dense ground-truth counterpart of [`SensorModel::desk_sparse`].
    pub fn desk_dense() -> Self {
        Self {
            beam_count: 32,
            azimuth_steps: 720,
            ..Self::desk_sparse()
        }
    }

    /// HDL-64E-like preset.
    pub fn hdl64() -> Self {
        Self {
            beam_count: 64,
            azimuth_steps: 2048,
            vertical_fov: [(-24.9f64).to_radians(), 2f64.to_radians()],
            max_range: 120.0,
        }
    }

    /// HDL-32E-like preset.
    pub fn hdl32() -> Self {
        Self {
            beam_count: 32,
            azimuth_steps: 1080,
            vertical_fov: [(-30.67f64).to_radians(), 10.67f64.to_radians()],
            max_range: 100.0,
        }
    }

    pub fn elevation(&self, ring: usize) -> f64 {
        if self.beam_count == 1 {
            return 0.5 * (self.vertical_fov[0] + self.vertical_fov[1]);
        }
        let f = ring as f64 / (self.beam_count - 1) as f64;
        self.vertical_fov[0] + f * (self.vertical_fov[1] - self.vertical_fov[0])
    }

    pub fn azimuth(&self, step: usize) -> f64 {
        -std::f64::consts::PI + step as f64 * std::f64::consts::TAU / self.azimuth_steps as f64
    }

    pub fn ray_count(&self) -> usize {
        self.beam_count * self.azimuth_steps
    }
}

/// One fired beam: its direction, the first return range (`+inf` on a miss)
/// and the scanline attributes of the beam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRecord {
    pub ray: Ray,
    pub range: f64,
    pub attr: ScanlineAttr,
}

impl RayRecord {
    pub fn is_hit(&self) -> bool {
        self.range.is_finite()
    }

    pub fn point(&self) -> Option<Point3> {
        self.is_hit().then(|| self.ray.direction() * self.range)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub cloud: PointCloud,
    /// Every fired ray in (ring, azimuth) order, misses included.
    pub rays: Vec<RayRecord>,
}

/// Casts every beam of `sensor` into the scene. Output order is ring-major
/// and independent of the worker count.
pub fn raycast_sweep(geom: &SceneGeometry, sensor: &SensorModel) -> Result<Sweep, SceneError> {
    sensor.validate()?;
    let rays: Vec<RayRecord> = (0..sensor.ray_count())
        .into_par_iter()
        .map(|idx| {
            let ring = idx / sensor.azimuth_steps;
            let step = idx % sensor.azimuth_steps;
            let az = sensor.azimuth(step);
            let ray = Ray::from_angles(az, sensor.elevation(ring));
            let range = geom.cast(&ray.direction(), sensor.max_range).unwrap_or(f64::INFINITY);
            RayRecord {
                ray,
                range,
                attr: ScanlineAttr {
                    ring_id: ring as u16,
                    azimuth: az as f32,
                    timestamp: (step as f64 / sensor.azimuth_steps as f64 * SWEEP_PERIOD) as f32,
                },
            }
        })
        .collect();
    let (points, attrs): (Vec<_>, Vec<_>) = rays
        .iter()
        .filter_map(|r| r.point().map(|p| (p, r.attr)))
        .unzip();
    Ok(Sweep {
        cloud: PointCloud::with_attrs(points, attrs),
        rays,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPair {
    pub sparse: PointCloud,
    pub sparse_rays: Vec<RayRecord>,
    pub dense_gt: PointCloud,
    /// Fired rays of the dense sensor, misses carry `+inf`.
    pub gt_rays: Vec<RayRecord>,
}

impl SweepPair {
    pub fn density_ratio(&self) -> f64 {
        self.dense_gt.len() as f64 / self.sparse.len().max(1) as f64
    }
}

pub fn make_sweep_pair(
    geom: &SceneGeometry,
    sparse_sensor: &SensorModel,
    dense_sensor: &SensorModel,
) -> Result<SweepPair, SceneError> {
    let mismatch = || SceneError::ResolutionMismatch {
        sparse_beams: sparse_sensor.beam_count,
        sparse_steps: sparse_sensor.azimuth_steps,
        dense_beams: dense_sensor.beam_count,
        dense_steps: dense_sensor.azimuth_steps,
    };
    if dense_sensor.beam_count < sparse_sensor.beam_count
        || dense_sensor.azimuth_steps < sparse_sensor.azimuth_steps
        || dense_sensor.ray_count() < 2 * sparse_sensor.ray_count()
    {
        return Err(mismatch());
    }
    let sparse = raycast_sweep(geom, sparse_sensor)?;
    let dense = raycast_sweep(geom, dense_sensor)?;
    Ok(SweepPair {
        sparse: sparse.cloud,
        sparse_rays: sparse.rays,
        dense_gt: dense.cloud,
        gt_rays: dense.rays,
    })
}

/// A ray segment known to traverse free space from the origin up to `range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativeRay {
    pub ray: Ray,
    pub range: f64,
    pub attr: ScanlineAttr,
    /// Index into `gt_rays` this negative was drawn from.
    pub source: usize,
}

pub const NEGATIVE_MARGIN: f64 = 0.5;

/// Negative rays amounting to `round(fraction * hit count)`.
pub fn sample_negative_rays(pair: &SweepPair, fraction: f64, seed: u64) -> Result<Vec<NegativeRay>, SceneError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SceneError::InvalidFraction(fraction));
    }
    let hits = pair.gt_rays.iter().filter(|r| r.is_hit()).count();
    let count = (fraction * hits as f64).round() as usize;
    sample_negative_rays_n(&pair.gt_rays, count, NEGATIVE_MARGIN, seed)
}

/// Draws `count` free-space segments. Recorded misses are used first (without
/// replacement); the remainder are copies of hit rays whose sampled range stays
/// at least `margin` short of the return.
pub fn sample_negative_rays_n(
    gt_rays: &[RayRecord],
    count: usize,
    margin: f64,
    seed: u64,
) -> Result<Vec<NegativeRay>, SceneError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let misses: Vec<usize> = (0..gt_rays.len()).filter(|&i| !gt_rays[i].is_hit()).collect();
    let usable_hits: Vec<usize> = (0..gt_rays.len())
        .filter(|&i| gt_rays[i].is_hit() && gt_rays[i].range > margin + MIN_NEGATIVE_RANGE)
        .collect();
    if misses.is_empty() && usable_hits.is_empty() {
        return Err(SceneError::NoFreeSpace);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_range = gt_rays
        .iter()
        .filter(|r| r.is_hit())
        .map(|r| r.range)
        .fold(0.0f64, f64::max)
        .max(2.0 * MIN_NEGATIVE_RANGE);
    let mut out = Vec::with_capacity(count);
    // partial Fisher-Yates over the misses
    let mut pool = misses;
    let take = count.min(pool.len());
    for k in 0..take {
        let j = rng.random_range(k..pool.len());
        pool.swap(k, j);
        let r = &gt_rays[pool[k]];
        out.push(NegativeRay {
            ray: r.ray,
            range: rng.random_range(MIN_NEGATIVE_RANGE..max_range),
            attr: r.attr,
            source: pool[k],
        });
    }
    while out.len() < count {
        if usable_hits.is_empty() {
            // only misses exist; reuse them
            let i = pool[rng.random_range(0..pool.len())];
            let r = &gt_rays[i];
            out.push(NegativeRay {
                ray: r.ray,
                range: rng.random_range(MIN_NEGATIVE_RANGE..max_range),
                attr: r.attr,
                source: i,
            });
            continue;
        }
        let i = usable_hits[rng.random_range(0..usable_hits.len())];
        let r = &gt_rays[i];
        let hi = r.range - margin;
        let range = rng.random_range(MIN_NEGATIVE_RANGE..hi);
        out.push(NegativeRay {
            ray: r.ray,
            range,
            attr: r.attr,
            source: i,
        });
    }
    Ok(out)
}

/// Closest range at which negatives are placed.
pub const MIN_NEGATIVE_RANGE: f64 = 1.0;
