//! Point-BEV denoiser: point MLP, scatter-max into a BEV grid, two 3x3 convs,
//! bilinear gather back to the rays, residual merge, then three heads.
//!
//! The range head predicts a refined clean-range mean `m = a + s F` around an
//! anchor `a` (the normalized prior range) with residual scale `s`. The clean
//! estimate is the linear posterior mean given the noisy input,
//!
//! `x0_hat = m + sqrt(ab) s^2 / D * (r_t - sqrt(ab) m)`, `D = ab s^2 + 1 - ab`,
//!
//! and `eps_hat` is the noise it implies. The target of `F` does not depend
//! on the timestep, both outputs stay bounded for every `t`, and an untrained
//! model already lands near the prior.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::NetworkError;
use crate::geometry::Point3;
use crate::tape::{GatherTaps, NodeId, ParamGrads, ParamId, ParamStore, Tape, Tensor};

pub const TIME_EMBED_DIM: usize = 16;
/// Conditioning features per ray, see [`RayCondition`].
pub const COND_WIDTH: usize = 8;
/// r_t, direction (3), sin/cos azimuth, ring, time, time embedding, self-cond.
pub const INPUT_WIDTH: usize = 1 + 3 + 4 + TIME_EMBED_DIM + 1 + COND_WIDTH;
/// Activation used everywhere in the network.
pub const ACTIVATION: &str = "silu";
/// Residual scale around a prior anchor, normalized units.
pub const ANCHOR_SIGMA: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub layers: usize,
    pub bev_res: usize,
    /// Half-width of the square BEV grid in meters.
    pub bev_extent: f64,
    pub bev_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self {
            hidden: 64,
            layers: 4,
            bev_res: 64,
            bev_extent: 60.0,
            bev_channels: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden: 256,
            layers: 6,
            bev_res: 64,
            bev_extent: 60.0,
            bev_channels: 128,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.hidden < 8 {
            return Err(NetworkError::InvalidConfig(format!("hidden {} < 8", self.hidden)));
        }
        if self.layers < 2 {
            return Err(NetworkError::InvalidConfig(format!("layers {} < 2", self.layers)));
        }
        if !self.bev_res.is_power_of_two() {
            return Err(NetworkError::InvalidConfig(format!("bev_res {} is not a power of two", self.bev_res)));
        }
        if !(self.bev_extent > 0.0 && self.bev_extent.is_finite()) {
            return Err(NetworkError::InvalidConfig(format!("bev_extent {}", self.bev_extent)));
        }
        if self.bev_channels < 1 {
            return Err(NetworkError::InvalidConfig("bev_channels must be positive".into()));
        }
        Ok(())
    }

    /// Blocks before the BEV branch; the rest follow the merge.
    fn pre_layers(&self) -> usize {
        (self.layers / 2).max(1)
    }

    pub fn layout(&self) -> BevLayout {
        BevLayout {
            res: self.bev_res,
            extent: self.bev_extent,
        }
    }

    /// Stable digest of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("network config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Square BEV grid centered on the sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevLayout {
    pub res: usize,
    pub extent: f64,
}

impl BevLayout {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.extent / self.res as f64
    }

    pub fn n_cells(&self) -> usize {
        self.res * self.res
    }

    /// Cell by the floor rule on `[-extent, extent)`; `None` outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<u32> {
        let c = self.cell_size();
        let ix = ((x + self.extent) / c).floor();
        let iy = ((y + self.extent) / c).floor();
        let r = self.res as f64;
        if !(ix >= 0.0 && iy >= 0.0 && ix < r && iy < r) {
            return None;
        }
        Some((iy as usize * self.res + ix as usize) as u32)
    }

    /// Bilinear taps over the four surrounding cell centers. Taps falling off
    /// the grid are dropped (zero padding); out-of-extent queries get none.
    pub fn taps(&self, x: f64, y: f64) -> GatherTaps {
        if !(x >= -self.extent && x < self.extent && y >= -self.extent && y < self.extent) {
            return Vec::new();
        }
        let c = self.cell_size();
        let u = (x + self.extent) / c - 0.5;
        let v = (y + self.extent) / c - 0.5;
        let (i0, j0) = (u.floor(), v.floor());
        let (fu, fv) = (u - i0, v - j0);
        let mut taps = Vec::with_capacity(4);
        for (dj, wv) in [(0i64, 1.0 - fv), (1, fv)] {
            for (di, wu) in [(0i64, 1.0 - fu), (1, fu)] {
                let (i, j) = (i0 as i64 + di, j0 as i64 + dj);
                let w = wu * wv;
                if w == 0.0 || i < 0 || j < 0 || i >= self.res as i64 || j >= self.res as i64 {
                    continue;
                }
                taps.push(((j as usize * self.res + i as usize) as u32, w));
            }
        }
        taps
    }
}

/// Max-pools per-point features into the grid. Returns the grid
/// (`n_cells x channels`) and the number of out-of-extent points dropped.
pub fn scatter_bev(features: &Tensor, positions: &[[f64; 2]], layout: &BevLayout) -> (Tensor, usize) {
    let cells: Vec<Option<u32>> = positions.iter().map(|p| layout.cell_of(p[0], p[1])).collect();
    let dropped = cells.iter().filter(|c| c.is_none()).count();
    let mut tape = Tape::new();
    let x = tape.input(features.clone());
    let g = tape.scatter_max(x, &cells, layout.n_cells());
    (tape.value(g).clone(), dropped)
}

/// Bilinearly samples grid features at each position.
pub fn gather_bev(grid: &Tensor, positions: &[[f64; 2]], layout: &BevLayout) -> Tensor {
    let taps: Vec<GatherTaps> = positions.iter().map(|p| layout.taps(p[0], p[1])).collect();
    let mut tape = Tape::new();
    let g = tape.input(grid.clone());
    let out = tape.gather(g, Arc::new(taps));
    tape.value(out).clone()
}

/// Per-ray conditioning from the coarse prior and the sparse input:
/// `[prior range, nearest input range, angular offset to it (deg),
/// local prior density, min and max range of nearby inputs, inverse-range
/// interpolation of nearby inputs, prior flag]`, ranges normalized.
pub type RayCondition = [f64; COND_WIDTH];

/// Everything the network reads for one batch of rays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointFeatureBatch {
    pub r_t: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub directions: Vec<Point3>,
    /// `[azimuth (rad), ring in [0, 1], time in [0, 1]]`.
    pub scan: Vec<[f64; 3]>,
    pub self_cond: Vec<f64>,
    /// Normalized range the clean estimate is expressed around.
    pub anchor: Vec<f64>,
    pub cond: Vec<RayCondition>,
    /// BEV x, y in meters.
    pub positions: Vec<[f64; 2]>,
}

impl PointFeatureBatch {
    pub fn len(&self) -> usize {
        self.r_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_t.is_empty()
    }

    fn check(&self) -> Result<(), NetworkError> {
        let n = self.r_t.len();
        let lens = [
            self.timesteps.len(),
            self.directions.len(),
            self.scan.len(),
            self.self_cond.len(),
            self.anchor.len(),
            self.cond.len(),
            self.positions.len(),
        ];
        if n == 0 {
            return Err(NetworkError::Shape("empty batch".into()));
        }
        if lens.iter().any(|&l| l != n) {
            return Err(NetworkError::Shape(format!("field lengths {lens:?} for {n} rays")));
        }
        Ok(())
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            r_t: idx.iter().map(|&i| self.r_t[i]).collect(),
            timesteps: idx.iter().map(|&i| self.timesteps[i]).collect(),
            directions: idx.iter().map(|&i| self.directions[i]).collect(),
            scan: idx.iter().map(|&i| self.scan[i]).collect(),
            self_cond: idx.iter().map(|&i| self.self_cond[i]).collect(),
            anchor: idx.iter().map(|&i| self.anchor[i]).collect(),
            cond: idx.iter().map(|&i| self.cond[i]).collect(),
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
        }
    }

    fn input_tensor(&self) -> Tensor {
        let n = self.len();
        let mut t = Tensor::zeros(n, INPUT_WIDTH);
        for i in 0..n {
            let row = &mut t.data[i * INPUT_WIDTH..(i + 1) * INPUT_WIDTH];
            let d = self.directions[i];
            let [az, ring, time] = self.scan[i];
            row[0] = self.r_t[i];
            row[1..4].copy_from_slice(&[d.x, d.y, d.z]);
            row[4..8].copy_from_slice(&[az.sin(), az.cos(), ring, time]);
            time_embedding(self.timesteps[i], &mut row[8..8 + TIME_EMBED_DIM]);
            row[8 + TIME_EMBED_DIM] = self.self_cond[i];
            row[9 + TIME_EMBED_DIM..].copy_from_slice(&self.cond[i]);
        }
        t
    }
}

/// Sinusoidal embedding, first half sines, second half cosines.
pub fn time_embedding(t: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkOutput {
    pub eps_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub occ_logit: Vec<f64>,
    /// Clean normalized range estimate implied by `eps_hat`.
    pub x0_hat: Vec<f64>,
}

/// Forward result; holds the tape when recorded for training.
#[derive(Debug)]
pub struct ForwardPass {
    pub output: NetworkOutput,
    /// Points outside the BEV extent (they skip the grid branch).
    pub dropped: usize,
    tape: Option<Tape>,
    head: Option<NodeId>,
    /// d x0_hat / dF and d eps_hat / dF per ray.
    coefs: Vec<(f64, f64)>,
}

/// Upstream gradients of the loss with respect to the outputs. Empty
/// vectors mean zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputGrads {
    pub eps_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub occ_logit: Vec<f64>,
    pub x0_hat: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ParamLayout {
    pre: Vec<Block>,
    conv1: Block,
    conv2: Block,
    merge: Block,
    post: Vec<Block>,
    head: Block,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    layout: ParamLayout,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden;
        let c = config.bev_channels;
        let dense = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, rows: usize, cols: usize| Block {
            w: params.push(format!("{name}.w"), he_uniform(rng, fan_in, rows, cols)),
            b: params.push(format!("{name}.b"), Tensor::zeros(1, cols)),
        };
        let mut pre = Vec::new();
        for i in 0..config.pre_layers() {
            let fan = if i == 0 { INPUT_WIDTH } else { h };
            pre.push(dense(&mut params, &mut rng, &format!("pre{i}"), fan, fan, h));
        }
        let conv1 = dense(&mut params, &mut rng, "conv1", 9 * h, 9 * h, c);
        let conv2 = dense(&mut params, &mut rng, "conv2", 9 * c, 9 * c, c);
        let merge = dense(&mut params, &mut rng, "merge", c, c, h);
        let mut post = Vec::new();
        for i in 0..config.layers - config.pre_layers() {
            post.push(dense(&mut params, &mut rng, &format!("post{i}"), h, h, h));
        }
        let head = Block {
            w: params.push("head.w", Tensor::zeros(h, 3)),
            b: params.push("head.b", Tensor::zeros(1, 3)),
        };
        Ok(Self {
            config,
            params,
            layout: ParamLayout {
                pre,
                conv1,
                conv2,
                merge,
                post,
                head,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Runs the network. With `record`, the tape is kept for [`Self::backward`].
    pub fn forward(&self, batch: &PointFeatureBatch, schedule: &NoiseSchedule, record: bool) -> Result<ForwardPass, NetworkError> {
        batch.check()?;
        let n = batch.len();
        let layout = self.config.layout();
        let mut tape = Tape::new();
        let p = &self.params;

        let x = tape.input(batch.input_tensor());
        finite(&tape, x, "input")?;
        let l = &self.layout;
        let mut h = tape.linear(p, x, l.pre[0].w, l.pre[0].b);
        h = tape.silu(h);
        for blk in &l.pre[1..] {
            let z = tape.linear(p, h, blk.w, blk.b);
            let z = tape.silu(z);
            h = tape.add(h, z);
        }
        finite(&tape, h, "point_mlp")?;

        let cells: Vec<Option<u32>> = batch.positions.iter().map(|q| layout.cell_of(q[0], q[1])).collect();
        let dropped = cells.iter().filter(|c| c.is_none()).count();
        let grid = tape.scatter_max(h, &cells, layout.n_cells());
        let g = tape.conv3x3(p, grid, l.conv1.w, l.conv1.b, layout.res);
        let g = tape.silu(g);
        let g = tape.conv3x3(p, g, l.conv2.w, l.conv2.b, layout.res);
        let g = tape.silu(g);
        finite(&tape, g, "bev_conv")?;
        let taps: Vec<GatherTaps> = batch.positions.iter().map(|q| layout.taps(q[0], q[1])).collect();
        let back = tape.gather(g, Arc::new(taps));
        let m = tape.linear(p, back, l.merge.w, l.merge.b);
        let m = tape.silu(m);
        h = tape.add(h, m);
        for blk in &l.post {
            let z = tape.linear(p, h, blk.w, blk.b);
            let z = tape.silu(z);
            h = tape.add(h, z);
        }
        finite(&tape, h, "merge")?;
        let head = tape.linear(p, h, l.head.w, l.head.b);
        finite(&tape, head, "heads")?;

        let hv = tape.value(head);
        let mut out = NetworkOutput {
            eps_hat: Vec::with_capacity(n),
            b_hat: Vec::with_capacity(n),
            occ_logit: Vec::with_capacity(n),
            x0_hat: Vec::with_capacity(n),
        };
        let mut coefs = Vec::with_capacity(n);
        for i in 0..n {
            let ab = schedule.alpha_bar(batch.timesteps[i].min(schedule.steps()));
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let sigma = if batch.cond[i][COND_WIDTH - 1] > 0.5 { ANCHOR_SIGMA } else { 1.0 };
            let d = ab * sigma * sigma + (1.0 - ab);
            let r = batch.r_t[i] - sa * batch.anchor[i];
            let f = hv.get(i, 0);
            let (dx, de) = (sigma * (1.0 - ab) / d, -sa * sigma * sn / d);
            out.x0_hat.push(batch.anchor[i] + sa * sigma * sigma / d * r + dx * f);
            out.eps_hat.push(sn / d * r + de * f);
            out.b_hat.push(hv.get(i, 1).exp());
            out.occ_logit.push(hv.get(i, 2));
            coefs.push((dx, de));
        }
        if !out.b_hat.iter().chain(&out.eps_hat).all(|v| v.is_finite()) {
            return Err(NetworkError::NonFiniteActivation { stage: "outputs" });
        }
        Ok(ForwardPass {
            output: out,
            dropped,
            tape: record.then_some(tape),
            head: record.then_some(head),
            coefs,
        })
    }

    pub fn backward(&self, pass: &ForwardPass, grads: &OutputGrads) -> Result<ParamGrads, NetworkError> {
        let (Some(tape), Some(head)) = (&pass.tape, pass.head) else {
            return Err(NetworkError::TapeMissing);
        };
        let n = pass.output.eps_hat.len();
        let pick = |v: &[f64], i: usize| if v.is_empty() { 0.0 } else { v[i] };
        for (name, v) in [
            ("eps_hat", &grads.eps_hat),
            ("b_hat", &grads.b_hat),
            ("occ_logit", &grads.occ_logit),
            ("x0_hat", &grads.x0_hat),
        ] {
            if !v.is_empty() && v.len() != n {
                return Err(NetworkError::Shape(format!("{name} gradient has {} entries for {n} rays", v.len())));
            }
        }
        let mut seed = Tensor::zeros(n, 3);
        for i in 0..n {
            let (dx, de) = pass.coefs[i];
            seed.data[i * 3] = pick(&grads.x0_hat, i) * dx + pick(&grads.eps_hat, i) * de;
            seed.data[i * 3 + 1] = pick(&grads.b_hat, i) * pass.output.b_hat[i];
            seed.data[i * 3 + 2] = pick(&grads.occ_logit, i);
        }
        Ok(tape.backward(&self.params, vec![(head, seed)]))
    }

    /// Overwrites all tensors, checking shapes against this architecture.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<(), NetworkError> {
        if tensors.len() != self.params.tensors.len() {
            return Err(NetworkError::Shape(format!(
                "{} tensors, expected {}",
                tensors.len(),
                self.params.tensors.len()
            )));
        }
        for (i, (have, want)) in tensors.iter().zip(&self.params.tensors).enumerate() {
            if (have.rows, have.cols) != (want.rows, want.cols) {
                return Err(NetworkError::Shape(format!(
                    "tensor {} is {}x{}, expected {}x{}",
                    self.params.names[i], have.rows, have.cols, want.rows, want.cols
                )));
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }
}

fn finite(tape: &Tape, id: NodeId, stage: &'static str) -> Result<(), NetworkError> {
    if tape.value(id).is_finite() {
        Ok(())
    } else {
        Err(NetworkError::NonFiniteActivation { stage })
    }
}

/// Random, well-formed inputs within a few meters of the sensor, for
/// gradient checks and benchmarks.
pub fn random_batch(n: usize, seed: u64) -> PointFeatureBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = PointFeatureBatch::default();
    for _ in 0..n {
        let d = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.1));
        let d = d * (1.0 / d.norm());
        let r: f64 = rng.random_range(1.0..3.5);
        b.r_t.push(rng.random_range(-1.0..1.0));
        b.timesteps.push(rng.random_range(1..=1000));
        b.directions.push(d);
        b.scan.push([d.y.atan2(d.x), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
        b.self_cond.push(rng.random_range(-1.0..1.0));
        b.anchor.push(rng.random_range(-1.0..1.0));
        let mut c = [0.0; COND_WIDTH];
        for v in &mut c {
            *v = rng.random_range(-1.0..1.0);
        }
        b.cond.push(c);
        b.positions.push([d.x * r, d.y * r]);
    }
    b
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter tensor and entry with the largest error.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares backprop against central differences for every parameter, on the
/// scalar `sum(w . outputs)` with random fixed weights `w`.
pub fn gradient_check(
    net: &Network,
    batch: &PointFeatureBatch,
    schedule: &NoiseSchedule,
    h: f64,
    seed: u64,
) -> Result<GradCheck, NetworkError> {
    let n = batch.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = || (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let g = OutputGrads {
        eps_hat: w(),
        b_hat: w(),
        occ_logit: w(),
        x0_hat: w(),
    };
    let objective = |o: &NetworkOutput| -> f64 {
        (0..n)
            .map(|i| {
                g.eps_hat[i] * o.eps_hat[i] + g.b_hat[i] * o.b_hat[i] + g.occ_logit[i] * o.occ_logit[i] + g.x0_hat[i] * o.x0_hat[i]
            })
            .sum()
    };
    let pass = net.forward(batch, schedule, true)?;
    let analytic = net.backward(&pass, &g)?;
    let mut probe = net.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for k in 0..net.params.tensors.len() {
        for j in 0..net.params.tensors[k].data.len() {
            let orig = net.params.tensors[k].data[j];
            probe.params.tensors[k].data[j] = orig + h;
            let up = objective(&probe.forward(batch, schedule, false)?.output);
            probe.params.tensors[k].data[j] = orig - h;
            let down = objective(&probe.forward(batch, schedule, false)?.output);
            probe.params.tensors[k].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors[k].data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (net.params.names[k].clone(), j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
