//! Per-ray conditioning and the end-to-end densification pass:
//! Stage-0 prior, partial forward noising, DDIM reverse with the network,
//! occupancy filtering and back-projection.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    build_cosine_schedule, ddim_reverse, forward_diffuse, DenoiserOutput, NoiseSchedule, RangeNormalizer,
    RangeState, SDEditConfig,
};
use crate::error::{DiffusionError, Error, PriorError, Result};
use crate::geometry::{Point3, PointCloud, Ray, ScanlineAttr};
use crate::network::{Network, PointFeatureBatch, RayCondition, COND_WIDTH};
use crate::prior::{build_prior, Stage0Config};
use crate::scene::SWEEP_PERIOD;
use crate::spatial::GridIndex;

/// Input neighbors consulted for the range spread features.
const INPUT_NEIGHBORS: usize = 4;
/// Radius for the local prior density feature, meters.
const DENSITY_RADIUS: f64 = 0.5;
const DENSITY_SCALE: f64 = 16.0;

/// Sparse input sweep prepared for angular lookups.
#[derive(Debug, Clone)]
pub struct InputContext {
    pub cloud: PointCloud,
    pub ranges: Vec<f64>,
    pub normalizer: RangeNormalizer,
    pub dirs: GridIndex,
    max_ring: f64,
    elevation_span: (f64, f64),
}

impl InputContext {
    /// Points at the sensor origin are dropped.
    pub fn new(input: &PointCloud) -> std::result::Result<Self, PriorError> {
        let keep: Vec<usize> = (0..input.len()).filter(|&i| input.points[i].norm() > 1e-9).collect();
        if keep.is_empty() {
            return Err(PriorError::EmptyInput);
        }
        let points: Vec<Point3> = keep.iter().map(|&i| input.points[i]).collect();
        let attrs = input.attrs.as_ref().map(|a| keep.iter().map(|&i| a[i]).collect::<Vec<_>>());
        let ranges: Vec<f64> = points.iter().map(Point3::norm).collect();
        let units: Vec<Point3> = points.iter().zip(&ranges).map(|(p, r)| *p * (1.0 / r)).collect();
        let max_ring = attrs
            .as_ref()
            .map(|a| a.iter().map(|x| x.ring_id).max().unwrap_or(0) as f64)
            .unwrap_or(0.0);
        let mut span = (f64::INFINITY, f64::NEG_INFINITY);
        for u in &units {
            let e = u.z.clamp(-1.0, 1.0).asin();
            span = (span.0.min(e), span.1.max(e));
        }
        Ok(Self {
            normalizer: RangeNormalizer::fit(&ranges),
            cloud: PointCloud { points, attrs },
            ranges,
            dirs: GridIndex::new(&units, 0.02),
            max_ring,
            elevation_span: span,
        })
    }

    /// `[ring in [0, 1], time in [0, 1]]` for input point `i`; falls back to
    /// the elevation of `dir` when the input carries no scanline attributes.
    fn scan_of(&self, i: usize, dir: &Point3) -> [f64; 2] {
        match &self.cloud.attrs {
            Some(a) => {
                let attr: ScanlineAttr = a[i];
                let ring = if self.max_ring > 0.0 { attr.ring_id as f64 / self.max_ring } else { 0.0 };
                [ring, (attr.timestamp as f64 / SWEEP_PERIOD).clamp(0.0, 1.0)]
            }
            None => {
                let (lo, hi) = self.elevation_span;
                let e = dir.z.clamp(-1.0, 1.0).asin();
                let ring = if hi > lo { ((e - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
                let az = dir.y.atan2(dir.x);
                [ring, (az + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)]
            }
        }
    }

    pub fn scan_attr(&self, i: usize) -> Option<ScanlineAttr> {
        self.cloud.attrs.as_ref().map(|a| a[i])
    }
}

/// Network-ready description of a set of candidate rays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoarseRays {
    pub rays: Vec<Ray>,
    pub prior_range: Vec<f64>,
    pub anchor: Vec<f64>,
    pub scan: Vec<[f64; 3]>,
    pub cond: Vec<RayCondition>,
    pub positions: Vec<[f64; 2]>,
    /// Index of the angularly nearest input point.
    pub nearest_input: Vec<usize>,
}

impl CoarseRays {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Network batch for noisy ranges `r_t` at per-ray `timesteps`.
    pub fn batch(&self, r_t: Vec<f64>, timesteps: Vec<usize>, self_cond: Vec<f64>) -> PointFeatureBatch {
        PointFeatureBatch {
            r_t,
            timesteps,
            directions: self.rays.iter().map(Ray::direction).collect(),
            scan: self.scan.clone(),
            self_cond,
            anchor: self.anchor.clone(),
            cond: self.cond.clone(),
            positions: self.positions.clone(),
        }
    }
}

/// Conditioning for candidate points. With `withhold_prior` the network sees
/// no prior range: the anchor and prior-range feature are zero and BEV
/// positions come from the nearest input range instead. Local density is
/// counted among `density_ref`, normally the full candidate set.
pub fn condition_rays(ctx: &InputContext, points: &[Point3], density_ref: &[Point3], withhold_prior: bool) -> CoarseRays {
    let density_index = GridIndex::new(density_ref, DENSITY_RADIUS);
    let norm = ctx.normalizer;
    let rows: Vec<_> = points
        .par_iter()
        .map(|p| {
            let r = p.norm().max(1e-9);
            let u = *p * (1.0 / r);
            let nbrs = ctx.dirs.k_nearest(&u, INPUT_NEIGHBORS);
            let (nn, chord) = nbrs[0];
            let angle = 2.0 * (chord / 2.0).min(1.0).asin();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            // inverse range interpolates ground returns far better than range
            let (mut inv, mut wsum) = (0.0, 0.0);
            for (j, ch) in &nbrs {
                lo = lo.min(ctx.ranges[*j]);
                hi = hi.max(ctx.ranges[*j]);
                let w = 1.0 / (ch + 1e-4);
                inv += w / ctx.ranges[*j];
                wsum += w;
            }
            let density = density_index.within(p, DENSITY_RADIUS).len() as f64 / DENSITY_SCALE;
            let [ring, time] = ctx.scan_of(nn, &u);
            let r_nn = ctx.ranges[nn];
            let mut c: RayCondition = [0.0; COND_WIDTH];
            c[0] = if withhold_prior { 0.0 } else { norm.normalize(r) };
            c[1] = norm.normalize(r_nn);
            c[2] = angle.to_degrees();
            c[3] = density;
            c[4] = norm.normalize(lo);
            c[5] = norm.normalize(hi);
            c[6] = norm.normalize(wsum / inv);
            c[7] = if withhold_prior { 0.0 } else { 1.0 };
            let anchor = if withhold_prior { 0.0 } else { norm.normalize(r) };
            let pos_r = if withhold_prior { r_nn } else { r };
            (Ray::from_unit(u), r, anchor, [u.y.atan2(u.x), ring, time], c, [u.x * pos_r, u.y * pos_r], nn)
        })
        .collect();
    let mut out = CoarseRays::default();
    for (ray, r, a, s, c, pos, nn) in rows {
        out.rays.push(ray);
        out.prior_range.push(r);
        out.anchor.push(a);
        out.scan.push(s);
        out.cond.push(c);
        out.positions.push(pos);
        out.nearest_input.push(nn);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub diffusion_steps: usize,
    /// Points kept have `sigmoid(logit) >= occ_threshold`.
    pub occ_threshold: f64,
    /// Output density relative to the input, applied to the prior.
    pub target_ratio: f64,
    /// Ablation: start from pure noise without prior ranges.
    pub withhold_prior: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            occ_threshold: 0.5,
            target_ratio: 8.0,
            withhold_prior: false,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.occ_threshold) {
            return Err(Error::Config(format!("occ_threshold {} outside [0, 1]", self.occ_threshold)));
        }
        if !(self.target_ratio > 0.0) {
            return Err(Error::Config(format!("target_ratio {} must be > 0", self.target_ratio)));
        }
        if self.diffusion_steps < 10 {
            return Err(Error::Config(format!("diffusion_steps {} < 10", self.diffusion_steps)));
        }
        Ok(())
    }

    /// Logit cut equivalent to the probability threshold.
    pub fn logit_threshold(&self) -> f64 {
        let t = self.occ_threshold;
        (t / (1.0 - t)).ln()
    }
}

/// Wall-clock per stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub prior_ms: f64,
    pub conditioning_ms: f64,
    pub noising_ms: f64,
    pub reverse_ms: f64,
    pub filter_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.prior_ms + self.conditioning_ms + self.noising_ms + self.reverse_ms + self.filter_ms
    }
}

#[derive(Debug, Clone)]
pub struct DensifyResult {
    /// Kept points with scanline attributes of their nearest input point.
    pub cloud: PointCloud,
    pub b_hat: Vec<f64>,
    pub occupancy: Vec<f64>,
    /// The Stage-0 candidates the pass started from.
    pub prior: PointCloud,
    pub candidates: usize,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn densify(
    input: &PointCloud,
    net: &Network,
    stage0: &Stage0Config,
    sdedit: &SDEditConfig,
    cfg: &DensifyConfig,
    seed: u64,
) -> Result<DensifyResult> {
    cfg.validate()?;
    sdedit.validate()?;
    let schedule = build_cosine_schedule(cfg.diffusion_steps)?;
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let ctx = InputContext::new(input)?;
    let mut s0 = *stage0;
    s0.target_multiplier = Some(cfg.target_ratio);
    let prior = build_prior(&ctx.cloud, &s0, seed)?;
    timings.prior_ms = ms_since(t0);

    let t0 = Instant::now();
    let rays = condition_rays(&ctx, &prior.cloud.points, &prior.cloud.points, cfg.withhold_prior);
    timings.conditioning_ms = ms_since(t0);

    let result = refine_rays(&rays, net, &schedule, sdedit, seed)?;
    timings.noising_ms = result.noising_ms;
    timings.reverse_ms = result.reverse_ms;

    let t0 = Instant::now();
    let cut = cfg.logit_threshold();
    let mut points = Vec::new();
    let mut attrs = Vec::new();
    let mut b_hat = Vec::new();
    let mut occupancy = Vec::new();
    for i in 0..rays.len() {
        let o = result.occ_logit[i];
        if !(o >= cut) {
            continue;
        }
        let (r, ok) = ctx.normalizer.denormalize_clamped(result.ranges[i]);
        if !ok || r <= 0.0 {
            continue;
        }
        points.push(rays.rays[i].direction() * r);
        if let Some(a) = ctx.scan_attr(rays.nearest_input[i]) {
            let d = rays.rays[i].direction();
            attrs.push(ScanlineAttr {
                azimuth: d.y.atan2(d.x) as f32,
                ..a
            });
        }
        b_hat.push(result.b_hat[i] * ctx.normalizer.std);
        occupancy.push(crate::losses::sigmoid(o));
    }
    let cloud = if attrs.len() == points.len() && !attrs.is_empty() {
        PointCloud::with_attrs(points, attrs)
    } else {
        PointCloud::new(points)
    };
    timings.filter_ms = ms_since(t0);
    Ok(DensifyResult {
        cloud,
        b_hat,
        occupancy,
        prior: prior.cloud,
        candidates: rays.len(),
        timings,
    })
}

/// Normalized clean ranges and head outputs after the reverse pass.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub ranges: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub occ_logit: Vec<f64>,
    pub calls: usize,
    pub noising_ms: f64,
    pub reverse_ms: f64,
}

/// Noises the anchors to `T'` and runs DDIM back to 0 with the network.
pub fn refine_rays(
    rays: &CoarseRays,
    net: &Network,
    schedule: &NoiseSchedule,
    sdedit: &SDEditConfig,
    seed: u64,
) -> Result<Refinement> {
    let t0 = Instant::now();
    let t_prime = sdedit.t_prime(schedule.steps());
    let start = forward_diffuse(&RangeState::clean(rays.anchor.clone()), t_prime, schedule, seed)?;
    let noising_ms = ms_since(t0);

    let t0 = Instant::now();
    let n = rays.len();
    let template = rays.batch(vec![0.0; n], vec![0; n], vec![0.0; n]);
    let mut net_err: Option<Error> = None;
    let denoiser = |r: &[f64], t: usize, x0_prev: &[f64]| -> std::result::Result<DenoiserOutput, DiffusionError> {
        let mut batch = template.clone();
        batch.r_t = r.to_vec();
        batch.timesteps = vec![t; n];
        batch.self_cond = x0_prev.to_vec();
        match net.forward(&batch, schedule, false) {
            Ok(pass) => Ok(DenoiserOutput {
                eps_hat: pass.output.eps_hat,
                b_hat: pass.output.b_hat,
                occ_logit: pass.output.occ_logit,
            }),
            Err(e) => {
                let msg = e.to_string();
                net_err = Some(e.into());
                Err(DiffusionError::CallbackFailure(msg))
            }
        }
    };
    let reversed = if n == 0 {
        None
    } else {
        Some(ddim_reverse(&start, denoiser, sdedit, schedule, seed.wrapping_add(0x9e37)))
    };
    let reversed = match (reversed, net_err) {
        (_, Some(e)) => return Err(e),
        (None, None) => {
            return Ok(Refinement {
                ranges: Vec::new(),
                b_hat: Vec::new(),
                occ_logit: Vec::new(),
                calls: 0,
                noising_ms,
                reverse_ms: 0.0,
            })
        }
        (Some(r), None) => r?,
    };
    Ok(Refinement {
        ranges: reversed.state.ranges,
        b_hat: reversed.b_hat,
        occ_logit: reversed.occ_logit,
        calls: reversed.calls,
        noising_ms,
        reverse_ms: ms_since(t0),
    })
}
