//! Training: supervision pairing, negative ray augmentation, the density
//! curriculum and an AdamW loop over the composite objective.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_cosine_schedule, gaussian_noise, NoiseSchedule, SDEditConfig};
use crate::error::{Error, NetworkError, Result};
use crate::geometry::{Point3, Ray};
use crate::losses::{
    composite_loss, loss_diff, loss_diff_grad, loss_free, loss_free_grad, loss_occ, loss_occ_grad, LossBreakdown,
    NeighborRay,
};
use crate::metrics::{chamfer, fsvr, FsvrConfig};
use crate::network::{Network, NetworkConfig, OutputGrads};
use crate::pipeline::{condition_rays, densify, DensifyConfig, InputContext};
use crate::prior::{build_prior, density_target_indices, CoarsePrior, Stage0Config};
use crate::error::SceneError;
use crate::scene::{sample_negative_rays_n, NegativeRay, SweepPair, NEGATIVE_MARGIN};
use crate::spatial::GridIndex;
use crate::tape::ParamGrads;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_occ: f64,
    pub lambda_free: f64,
    /// Weight of `ln b` inside the free-space term.
    pub lambda_logb: f64,
    pub neg_ray_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_occ: 1.0,
            lambda_free: 0.5,
            lambda_logb: 1.0,
            neg_ray_fraction: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_occ, self.lambda_free, self.lambda_logb, self.neg_ray_fraction];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        if self.neg_ray_fraction >= 1.0 {
            return Err(Error::Config("neg_ray_fraction must be < 1".into()));
        }
        Ok(())
    }
}

/// Linear ramp of the target density ratio over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSchedule {
    pub start_ratio: f64,
    pub end_ratio: f64,
    pub total_epochs: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            start_ratio: 2.0,
            end_ratio: 8.0,
            total_epochs: 30,
        }
    }
}

impl CurriculumSchedule {
    pub fn ratio(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.end_ratio;
        }
        let f = epoch.min(self.total_epochs) as f64 / self.total_epochs as f64;
        self.start_ratio + (self.end_ratio - self.start_ratio) * f
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_ratio > 0.0 && self.start_ratio <= self.end_ratio) {
            return Err(Error::Config(format!(
                "curriculum needs 0 < start ({}) <= end ({})",
                self.start_ratio, self.end_ratio
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Global gradient norm cap.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Candidate rays drawn per scene per step.
    pub rays_per_scene: usize,
    pub self_cond_prob: f64,
    /// Probability of hiding prior ranges for a scene-step, so the model also
    /// supports starting from pure noise.
    pub prior_dropout: f64,
    /// Validate every this many epochs (0: only after the last epoch).
    pub val_every: usize,
    /// Decay of the weight moving average that is validated and returned
    /// (0 disables it).
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            grad_clip: 1.0,
            warmup_steps: 0,
            rays_per_scene: 4096,
            self_cond_prob: 0.5,
            prior_dropout: 0.15,
            val_every: 1,
            ema_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.rays_per_scene == 0 || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr, grad_clip, batch_size and rays_per_scene must be positive".into()));
        }
        for p in [self.self_cond_prob, self.prior_dropout, self.ema_decay] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ParamGrads,
    pub v: ParamGrads,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        Self {
            m: net.params.zeros_like(),
            v: net.params.zeros_like(),
            step: 0,
        }
    }

    pub fn apply(&mut self, net: &mut Network, grads: &ParamGrads, cfg: &OptimizerConfig) {
        self.step += 1;
        let warm = if cfg.warmup_steps > 0 {
            (self.step as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = cfg.lr * warm;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (k, p) in net.params.tensors.iter_mut().enumerate() {
            let g = &grads.tensors[k].data;
            let m = &mut self.m.tensors[k].data;
            let v = &mut self.v.tensors[k].data;
            for j in 0..p.data.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                p.data[j] -= lr * (update + cfg.weight_decay * p.data[j]);
            }
        }
    }
}

/// Maximum angle between a candidate ray and its supervising GT ray.
pub const MATCH_ANGLE: f64 = 1.0 * std::f64::consts::PI / 180.0;
/// GT hit rays each predicted point is checked against in the free-space loss.
pub const FREE_NEIGHBORS: usize = 4;

/// One training sweep with everything that does not change across epochs.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub pair: SweepPair,
    pub ctx: InputContext,
    /// Full Stage-0 union; epochs trim it to the curriculum ratio.
    pub prior: CoarsePrior,
    /// Normalized GT range for supervised candidates, `None` for
    /// occupancy-negative ones.
    pub target: Vec<Option<f64>>,
    pub neighbors: Vec<Vec<NeighborRay>>,
}

/// Unit-direction index over a set of rays; chord distance is monotone in angle.
fn direction_index(rays: impl Iterator<Item = Ray>) -> GridIndex {
    let dirs: Vec<Point3> = rays.map(|r| r.direction()).collect();
    GridIndex::new(&dirs, 0.02)
}

fn chord_to_angle(chord: f64) -> f64 {
    2.0 * (chord / 2.0).min(1.0).asin()
}

impl TrainingScene {
    pub fn new(pair: SweepPair, stage0: &Stage0Config, seed: u64) -> Result<Self> {
        let ctx = InputContext::new(&pair.sparse)?;
        let mut s0 = *stage0;
        s0.target_multiplier = None;
        let prior = build_prior(&ctx.cloud, &s0, seed)?;
        let all = direction_index(pair.gt_rays.iter().map(|r| r.ray));
        let hit_ids: Vec<usize> = (0..pair.gt_rays.len()).filter(|&i| pair.gt_rays[i].is_hit()).collect();
        let hits = direction_index(hit_ids.iter().map(|&i| pair.gt_rays[i].ray));
        let mut target = Vec::with_capacity(prior.len());
        let mut neighbors = Vec::with_capacity(prior.len());
        for dec in &prior.rays {
            let u = dec.ray.direction();
            let m = all.nearest(&u).map(|(j, chord)| (j, chord_to_angle(chord)));
            target.push(match m {
                Some((j, ang)) if ang <= MATCH_ANGLE && pair.gt_rays[j].is_hit() => {
                    Some(ctx.normalizer.normalize(pair.gt_rays[j].range))
                }
                _ => None,
            });
            neighbors.push(
                hits.k_nearest(&u, FREE_NEIGHBORS)
                    .into_iter()
                    .map(|(j, _)| {
                        let r = &pair.gt_rays[hit_ids[j]];
                        NeighborRay {
                            ray: r.ray,
                            gt_range: r.range,
                        }
                    })
                    .collect(),
            );
        }
        Ok(Self {
            pair,
            ctx,
            prior,
            target,
            neighbors,
        })
    }
}

/// A training ray: either a Stage-0 candidate or an injected negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchRay {
    Candidate(usize),
    Negative(NegativeRay),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
}

impl RayBatch {
    pub fn negatives(&self) -> usize {
        self.rays.iter().filter(|r| matches!(r, BatchRay::Negative(_))).count()
    }
}

/// Replaces `round(fraction * len)` rays, chosen at random, with free-space
/// segments drawn from the GT sweep.
pub fn augment_negative_rays(
    batch: &RayBatch,
    fraction: f64,
    pair: &SweepPair,
    seed: u64,
) -> std::result::Result<RayBatch, SceneError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SceneError::InvalidFraction(fraction));
    }
    let count = (fraction * batch.rays.len() as f64).round() as usize;
    if count == 0 {
        return Ok(batch.clone());
    }
    let negatives = sample_negative_rays_n(&pair.gt_rays, count, NEGATIVE_MARGIN, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a);
    let mut slots = sample(&mut rng, batch.rays.len(), count).into_vec();
    slots.sort_unstable();
    let mut out = batch.clone();
    for (slot, neg) in slots.into_iter().zip(negatives) {
        out.rays[slot] = BatchRay::Negative(neg);
    }
    Ok(out)
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ratio: f64,
    pub loss_total: f64,
    pub loss_diff: f64,
    pub loss_occ: f64,
    pub loss_free: f64,
    pub grad_norm: f64,
    /// NaN when validation was skipped this epoch.
    pub val_cd: f64,
    pub val_fsvr: f64,
    pub seconds: f64,
}

pub fn trace_to_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,ratio,loss_total,loss_diff,loss_occ,loss_free,grad_norm,val_cd,val_fsvr,seconds\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.ratio, r.loss_total, r.loss_diff, r.loss_occ, r.loss_free, r.grad_norm, r.val_cd, r.val_fsvr, r.seconds
        ));
    }
    s
}

/// Everything [`train`] needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub stage0: Stage0Config,
    pub sdedit: SDEditConfig,
    pub densify: DensifyConfig,
    pub fsvr: FsvrConfig,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub network: Network,
    pub trace: Vec<EpochRecord>,
}

/// Hook called with the last finite network when training diverges.
pub type DivergenceHook<'a> = &'a mut dyn FnMut(&Network);

/// Derives an independent seed for stream `(a, b)`.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene-step losses and gradients.
struct StepOutcome {
    loss: LossBreakdown,
    grads: ParamGrads,
}

fn scene_step(
    net: &Network,
    scene: &TrainingScene,
    subset: &[usize],
    settings: &TrainSettings,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<StepOutcome> {
    let opt = &settings.optimizer;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = if subset.len() > opt.rays_per_scene {
        let mut idx = sample(&mut rng, subset.len(), opt.rays_per_scene).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| subset[i]).collect()
    } else {
        subset.to_vec()
    };
    let batch = RayBatch {
        rays: picked.iter().map(|&i| BatchRay::Candidate(i)).collect(),
    };
    let batch = augment_negative_rays(&batch, settings.loss.neg_ray_fraction, &scene.pair, rng.random())?;
    let points: Vec<Point3> = batch
        .rays
        .iter()
        .map(|r| match r {
            BatchRay::Candidate(i) => scene.prior.cloud.points[*i],
            BatchRay::Negative(n) => n.ray.direction() * n.range,
        })
        .collect();
    let density_ref: Vec<Point3> = subset.iter().map(|&i| scene.prior.cloud.points[i]).collect();
    let withhold = rng.random::<f64>() < opt.prior_dropout;
    let rays = condition_rays(&scene.ctx, &points, &density_ref, withhold);
    let n = rays.len();
    let norm = scene.ctx.normalizer;

    let mut valid = vec![false; n];
    let mut x0 = vec![0.0; n];
    let empty: Vec<NeighborRay> = Vec::new();
    let mut nbrs: Vec<&Vec<NeighborRay>> = vec![&empty; n];
    for (k, r) in batch.rays.iter().enumerate() {
        x0[k] = norm.normalize(rays.prior_range[k]);
        if let BatchRay::Candidate(i) = r {
            if let Some(t) = scene.target[*i] {
                valid[k] = true;
                x0[k] = t;
                nbrs[k] = &scene.neighbors[*i];
            }
        }
    }
    let steps = schedule.steps();
    let timesteps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=steps)).collect();
    let eps = gaussian_noise(n, rng.random());
    let r_t: Vec<f64> = (0..n)
        .map(|i| {
            let ab = schedule.alpha_bar(timesteps[i]);
            ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i]
        })
        .collect();
    let mut fbatch = rays.batch(r_t, timesteps, vec![0.0; n]);
    if rng.random::<f64>() < opt.self_cond_prob {
        let first = net.forward(&fbatch, schedule, false)?;
        fbatch.self_cond = first.output.x0_hat;
    }
    let pass = net.forward(&fbatch, schedule, true)?;
    let out = &pass.output;

    // free-space term over supervised rays only
    let sup: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    let pts: Vec<Point3> = sup
        .iter()
        .map(|&i| rays.rays[i].direction() * norm.denormalize(out.x0_hat[i]))
        .collect();
    let b_m: Vec<f64> = sup.iter().map(|&i| out.b_hat[i] * norm.std).collect();
    let nb: Vec<Vec<NeighborRay>> = sup.iter().map(|&i| nbrs[i].clone()).collect();
    let lam = settings.loss.lambda_logb;
    let l_diff = loss_diff(&eps, &out.eps_hat, &valid);
    let l_occ = loss_occ(&out.occ_logit, &valid);
    let l_free = loss_free(&pts, &b_m, &nb, lam);
    let loss = composite_loss(l_diff, l_occ, l_free, &settings.loss);

    let mut g = OutputGrads {
        eps_hat: loss_diff_grad(&eps, &out.eps_hat, &valid),
        occ_logit: loss_occ_grad(&out.occ_logit, &valid)
            .into_iter()
            .map(|v| v * settings.loss.lambda_occ)
            .collect(),
        b_hat: vec![0.0; n],
        x0_hat: vec![0.0; n],
    };
    if settings.loss.lambda_free > 0.0 && !sup.is_empty() {
        let (gp, gb) = loss_free_grad(&pts, &b_m, &nb, lam);
        let w = settings.loss.lambda_free;
        for (k, &i) in sup.iter().enumerate() {
            // point = dir * (x0 * std + mean); b in meters = b_hat * std
            g.x0_hat[i] = w * gp[k].dot(&rays.rays[i].direction()) * norm.std;
            g.b_hat[i] = w * gb[k] * norm.std;
        }
    }
    let grads = net.backward(&pass, &g)?;
    Ok(StepOutcome { loss, grads })
}

/// Moving average with the usual warm start, so early steps are not
/// dominated by the initialization.
fn update_ema(ema: &mut Network, net: &Network, decay: f64, step: u64) {
    let d = decay.min((1 + step) as f64 / (10 + step) as f64);
    for (e, p) in ema.params.tensors.iter_mut().zip(&net.params.tensors) {
        for (a, b) in e.data.iter_mut().zip(&p.data) {
            *a = d * *a + (1.0 - d) * b;
        }
    }
}

fn diverged(epoch: usize, step: usize, reason: String) -> Error {
    Error::DivergenceDetected { epoch, step, reason }
}

/// Mean CD and FSVR of the current model on held-out pairs.
pub fn validate_on(net: &Network, val: &[SweepPair], settings: &TrainSettings, seed: u64) -> Result<(f64, f64)> {
    let (mut cd, mut fs) = (0.0, 0.0);
    for (k, pair) in val.iter().enumerate() {
        let out = densify(&pair.sparse, net, &settings.stage0, &settings.sdedit, &settings.densify, mix(seed, 7, k as u64))?;
        if out.cloud.is_empty() {
            // nothing survived the occupancy filter: every GT point is unmatched
            return Ok((f64::INFINITY, 0.0));
        }
        cd += chamfer(&out.cloud, &pair.dense_gt)?;
        fs += fsvr(&out.cloud, &pair.gt_rays, &settings.fsvr).fsvr;
    }
    let n = val.len().max(1) as f64;
    Ok((cd / n, fs / n))
}

/// Trains a fresh network. Deterministic for fixed inputs, seed and thread count.
pub fn train(
    scenes: &[TrainingScene],
    val: &[SweepPair],
    settings: &TrainSettings,
    seed: u64,
    mut on_divergence: Option<DivergenceHook<'_>>,
) -> Result<TrainResult> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one sweep pair".into()));
    }
    settings.optimizer.validate()?;
    settings.loss.validate()?;
    settings.curriculum.validate()?;
    let schedule = build_cosine_schedule(settings.densify.diffusion_steps)?;
    let mut net = Network::new(settings.network.clone(), mix(seed, 1, 0))?;
    let mut opt_state = OptimizerState::new(&net);
    let mut ema = net.clone();
    let opt = &settings.optimizer;
    let mut trace = Vec::new();
    let mut global_step = 0usize;
    let epochs = settings.curriculum.total_epochs;
    for epoch in 0..epochs {
        let started = Instant::now();
        let ratio = settings.curriculum.ratio(epoch);
        let subsets: Vec<Vec<usize>> = scenes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let target = (ratio * s.ctx.cloud.len() as f64).round() as usize;
                if target >= s.prior.len() {
                    (0..s.prior.len()).collect()
                } else {
                    density_target_indices(&s.prior.cloud.points, target, mix(seed, 2, (epoch * scenes.len() + k) as u64))
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(mix(seed, 3, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = erng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = LossBreakdown::default();
        let mut gnorm_sum = 0.0;
        let mut n_steps = 0usize;
        for (step, chunk) in order.chunks(opt.batch_size).enumerate() {
            let mut acc = net.params.zeros_like();
            let mut loss = LossBreakdown::default();
            for &k in chunk {
                let out = scene_step(
                    &net,
                    &scenes[k],
                    &subsets[k],
                    settings,
                    &schedule,
                    mix(seed, 4, (global_step * scenes.len() + k) as u64),
                );
                let out = match out {
                    Ok(o) => o,
                    Err(Error::Network(NetworkError::NonFiniteActivation { stage })) => {
                        if let Some(h) = on_divergence.as_mut() {
                            h(&net);
                        }
                        return Err(diverged(epoch, step, format!("non-finite activation in {stage}")));
                    }
                    Err(e) => return Err(e),
                };
                acc.add(&out.grads);
                loss.diff += out.loss.diff;
                loss.occ += out.loss.occ;
                loss.free += out.loss.free;
                loss.total += out.loss.total;
            }
            let inv = 1.0 / chunk.len() as f64;
            acc.scale(inv);
            if !loss.total.is_finite() || !acc.is_finite() {
                if let Some(h) = on_divergence.as_mut() {
                    h(&net);
                }
                return Err(diverged(epoch, step, format!("loss {}", loss.total * inv)));
            }
            let norm = acc.global_norm();
            if norm > opt.grad_clip {
                acc.scale(opt.grad_clip / norm);
            }
            opt_state.apply(&mut net, &acc, opt);
            update_ema(&mut ema, &net, opt.ema_decay, opt_state.step);
            log::debug!(
                "epoch {epoch} step {step}: total {:.5} diff {:.5} occ {:.5} free {:.5} |g| {norm:.4}",
                loss.total * inv,
                loss.diff * inv,
                loss.occ * inv,
                loss.free * inv
            );
            sums.diff += loss.diff * inv;
            sums.occ += loss.occ * inv;
            sums.free += loss.free * inv;
            sums.total += loss.total * inv;
            gnorm_sum += norm;
            n_steps += 1;
            global_step += 1;
        }
        let last = epoch + 1 == epochs;
        let do_val = !val.is_empty() && (last || (opt.val_every > 0 && (epoch + 1) % opt.val_every == 0));
        let (val_cd, val_fsvr) = if do_val {
            validate_on(&ema, val, settings, seed)?
        } else {
            (f64::NAN, f64::NAN)
        };
        let ns = n_steps.max(1) as f64;
        let rec = EpochRecord {
            epoch,
            ratio,
            loss_total: sums.total / ns,
            loss_diff: sums.diff / ns,
            loss_occ: sums.occ / ns,
            loss_free: sums.free / ns,
            grad_norm: gnorm_sum / ns,
            val_cd,
            val_fsvr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: ratio {ratio:.2} loss {:.5} (diff {:.5} occ {:.5} free {:.5}) val cd {val_cd:.4} fsvr {val_fsvr:.2}",
            rec.loss_total,
            rec.loss_diff,
            rec.loss_occ,
            rec.loss_free
        );
        trace.push(rec);
    }
    Ok(TrainResult { network: ema, trace })
}
