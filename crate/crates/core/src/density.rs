//! Autoregressive Gaussian trajectory density `q(y | x; θ)`.
//!
//! A context encoder (one tanh layer over past positions, range scan and
//! goal) feeds a gated recurrent cell that is stepped once per future
//! state. Two linear heads read the hidden state: a residual offset added
//! to the previous position (the mean) and a lower Cholesky factor whose
//! diagonal passes through `softplus + min_scale`. The log-likelihood of a
//! plan is the sum of the per-step 2D Gaussian log-densities.
//!
//! All coordinates are in the ego frame at decision time: the current
//! position is the origin and the current heading is +x.

use crate::diffmath::{self, AdamConfig, AdamState, Direction, ParamVars, ParamVector, Segment, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::{par, seeds};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

pub type Point = [f64; 2];

/// Fixed-horizon sequence of planar positions `(s₁, …, s_T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Point>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<Point>, dt: f64) -> Self {
        Self { states, dt }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Point {
        *self.states.last().expect("non-empty trajectory")
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.states.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Self {
        Self { states: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), dt }
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// Observation `x`: ego-frame past positions, a range scan and the goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    /// `P` positions, oldest first; the last entry is the current position.
    pub past: Vec<Point>,
    /// `R` ranges at evenly spaced bearings starting straight ahead.
    pub scan: Vec<f64>,
    pub goal: Point,
}

/// One conditional `N(μ, L Lᵀ)` of the autoregression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianStep {
    pub mean: Point,
    pub scale_lower: [[f64; 2]; 2],
}

impl GaussianStep {
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let l = self.scale_lower;
        [
            [l[0][0] * l[0][0], l[0][0] * l[1][0]],
            [l[1][0] * l[0][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
        ]
    }

    pub fn log_density(&self, x: Point) -> f64 {
        let l = self.scale_lower;
        diffmath::gauss_log_density(x, self.mean, l[0][0], l[1][1], l[1][0])
    }
}

/// Architecture descriptor; determines the parameter layout completely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub horizon: usize,
    pub past_len: usize,
    pub scan_beams: usize,
    pub hidden: usize,
    pub dt: f64,
    pub max_range: f64,
    pub min_scale: f64,
    /// Positions are divided by this before entering the network.
    pub position_scale: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            horizon: 16,
            past_len: 8,
            scan_beams: 30,
            hidden: 64,
            dt: 0.25,
            max_range: 20.0,
            min_scale: 1e-2,
            position_scale: 10.0,
        }
    }
}

const ENC_W: usize = 0;
const ENC_B: usize = 1;
const GRU_WX: usize = 2;
const GRU_WS: usize = 3;
const GRU_B: usize = 4;
const GRU_UZR: usize = 5;
const GRU_UN: usize = 6;
const MEAN_W: usize = 7;
const MEAN_B: usize = 8;
const SCALE_W: usize = 9;
const SCALE_B: usize = 10;

/// Width of the per-step state input `[previous position ‖ previous displacement]`.
const STATE_IN: usize = 4;

impl Arch {
    pub fn context_dim(&self) -> usize {
        2 * self.past_len + self.scan_beams + 2
    }

    /// `(name, len, fan_in)` for each parameter segment, in layout order.
    fn segments(&self) -> [(&'static str, usize, usize); 11] {
        let h = self.hidden;
        let d = self.context_dim();
        [
            ("enc_w", h * d, d),
            ("enc_b", h, 0),
            ("gru_wx", 3 * h * h, h),
            ("gru_ws", 3 * h * STATE_IN, STATE_IN),
            ("gru_b", 3 * h, 0),
            ("gru_u_zr", 2 * h * h, h),
            ("gru_u_n", h * h, h),
            ("mean_w", 2 * h, h),
            ("mean_b", 2, 0),
            ("scale_w", 3 * h, h),
            ("scale_b", 3, 0),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(|s| s.1).sum()
    }

    fn layout(&self) -> Vec<(&'static str, usize)> {
        self.segments().iter().map(|s| (s.0, s.1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.past_len < 2 || self.hidden == 0 {
            return contract("arch needs horizon ≥ 1, past_len ≥ 2, hidden ≥ 1");
        }
        if !(self.dt > 0.0 && self.max_range > 0.0 && self.min_scale > 0.0 && self.position_scale > 0.0) {
            return contract("arch scales must be positive");
        }
        Ok(())
    }

    pub fn check_context(&self, ctx: &SceneContext) -> Result<()> {
        if ctx.past.len() != self.past_len {
            return contract(format!("context has {} past states, arch expects {}", ctx.past.len(), self.past_len));
        }
        if ctx.scan.len() != self.scan_beams {
            return contract(format!("context has {} scan beams, arch expects {}", ctx.scan.len(), self.scan_beams));
        }
        let finite = ctx.past.iter().chain(std::iter::once(&ctx.goal)).all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite || ctx.scan.iter().any(|r| !(0.0..=self.max_range).contains(r)) {
            return contract("context values out of range");
        }
        Ok(())
    }

    pub fn check_trajectory(&self, y: &Trajectory) -> Result<()> {
        if y.len() != self.horizon {
            return contract(format!("trajectory has {} states, arch expects {}", y.len(), self.horizon));
        }
        if !y.is_finite() {
            return contract("trajectory has non-finite coordinates");
        }
        Ok(())
    }
}

/// Context/plan pair; one decision point of an expert demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub scene_id: String,
    pub step: usize,
    pub ctx: SceneContext,
    pub plan: Trajectory,
}

impl Demonstration {
    /// Content hash over every coordinate; independent of record order.
    pub fn fingerprint(&self) -> u64 {
        let words = self
            .ctx
            .past
            .iter()
            .flat_map(|p| [p[0], p[1]])
            .chain(self.ctx.scan.iter().copied())
            .chain(self.ctx.goal)
            .chain(self.plan.flatten())
            .map(f64::to_bits);
        seeds::fingerprint(words)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_nll: Option<f64>,
}

/// Parameterised density model.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityModel {
    arch: Arch,
    params: ParamVector,
    meta: TrainMeta,
}

/// Per-trajectory recurrent state living on a tape.
struct Unroll {
    arch: Arch,
    p: ParamVars,
    inv_pos: Var,
    min_scale: Var,
    pre_x: Var,
    h: Var,
}

impl Unroll {
    fn new(model: &DensityModel, tape: &mut Tape, ctx: &SceneContext, track_params: bool) -> (Self, Var) {
        let arch = model.arch;
        let p = model.params.to_tape(tape, track_params);
        let mut x = Vec::with_capacity(arch.context_dim());
        for q in &ctx.past {
            x.extend([q[0] / arch.position_scale, q[1] / arch.position_scale]);
        }
        x.extend(ctx.scan.iter().map(|r| r / arch.max_range));
        x.extend([ctx.goal[0] / arch.position_scale, ctx.goal[1] / arch.position_scale]);
        let x = tape.constant(x);
        let h = arch.hidden;
        let pre = tape.matvec(p.get(ENC_W), x, h);
        let pre = tape.add(pre, p.get(ENC_B));
        let emb = tape.tanh(pre);
        let px = tape.matvec(p.get(GRU_WX), emb, 3 * h);
        let pre_x = tape.add(px, p.get(GRU_B));
        let inv_pos = tape.constant(vec![1.0 / arch.position_scale]);
        let min_scale = tape.constant(vec![arch.min_scale]);
        let h0 = tape.constant(vec![0.0; h]);
        (Self { arch, p, inv_pos, min_scale, pre_x, h: h0 }, emb)
    }

    /// Advances the recurrence with the previous two positions and returns
    /// the `(mean, [l11, l22, l21])` nodes of the next state's Gaussian.
    fn step(&mut self, tape: &mut Tape, prev: Var, prevprev: Var) -> (Var, Var) {
        let h = self.arch.hidden;
        let p = &self.p;
        let pos = tape.mul(prev, self.inv_pos);
        let disp = tape.sub(prev, prevprev);
        let s_in = tape.concat(&[pos, disp]);
        let a = tape.matvec(p.get(GRU_WS), s_in, 3 * h);
        let a = tape.add(a, self.pre_x);
        let a_zr = tape.slice(a, 0, 2 * h);
        let a_n = tape.slice(a, 2 * h, h);
        let u_zr = tape.matvec(p.get(GRU_UZR), self.h, 2 * h);
        let zr_pre = tape.add(a_zr, u_zr);
        let zr = tape.sigmoid(zr_pre);
        let z = tape.slice(zr, 0, h);
        let r = tape.slice(zr, h, h);
        let rh = tape.mul(r, self.h);
        let u_n = tape.matvec(p.get(GRU_UN), rh, h);
        let n_pre = tape.add(a_n, u_n);
        let n = tape.tanh(n_pre);
        let keep = tape.sub(self.h, n);
        let keep = tape.mul(z, keep);
        self.h = tape.add(n, keep);

        let off = tape.matvec(p.get(MEAN_W), self.h, 2);
        let off = tape.add(off, p.get(MEAN_B));
        let mean = tape.add(prev, off);
        let sc = tape.matvec(p.get(SCALE_W), self.h, 3);
        let sc = tape.add(sc, p.get(SCALE_B));
        let diag = tape.slice(sc, 0, 2);
        let diag = tape.softplus(diag);
        let diag = tape.add(diag, self.min_scale);
        let cross = tape.slice(sc, 2, 1);
        let scale = tape.concat(&[diag, cross]);
        (mean, scale)
    }
}

fn gaussian_from(tape: &Tape, mean: Var, scale: Var) -> GaussianStep {
    let m = tape.value(mean);
    let s = tape.value(scale);
    GaussianStep { mean: [m[0], m[1]], scale_lower: [[s[0], 0.0], [s[2], s[1]]] }
}

impl DensityModel {
    /// Randomly initialised model (Glorot-uniform weights, zero biases).
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::zeros(&arch.layout());
        let mut rng = seeds::rng(seed);
        let h = arch.hidden;
        for (i, (name, len, fan_in)) in arch.segments().into_iter().enumerate() {
            if fan_in == 0 {
                continue;
            }
            let fan_out = len / fan_in;
            let gain = if i == MEAN_W || i == SCALE_W { 0.1 } else { 1.0 };
            let bound = gain * (6.0 / (fan_in + fan_out.min(h)) as f64).sqrt();
            for w in params.segment_mut(name).expect("segment") {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { arch, params, meta: TrainMeta { seed, epochs: 0, final_nll: None } })
    }

    /// Model with every parameter zero.
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let params = ParamVector::zeros(&arch.layout());
        Ok(Self { arch, params, meta: TrainMeta { seed: 0, epochs: 0, final_nll: None } })
    }

    pub fn from_parts(arch: Arch, values: Vec<f64>, meta: TrainMeta) -> Result<Self> {
        arch.validate()?;
        let zero = ParamVector::zeros(&arch.layout());
        let layout: Vec<Segment> = zero.layout().to_vec();
        let params = ParamVector::from_parts(values, layout)?;
        Ok(Self { arch, params, meta })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    /// Context embedding, `hidden` wide.
    pub fn encode_context(&self, ctx: &SceneContext) -> Result<Vec<f64>> {
        self.arch.check_context(ctx)?;
        let mut tape = Tape::new();
        let (_, emb) = Unroll::new(self, &mut tape, ctx, false);
        tape.check()?;
        Ok(tape.value(emb).to_vec())
    }

    /// Gaussian over the state that follows `prefix` (`y_{<t}`, may be empty).
    pub fn step_distribution(&self, ctx: &SceneContext, prefix: &[Point]) -> Result<GaussianStep> {
        self.arch.check_context(ctx)?;
        if prefix.len() >= self.arch.horizon {
            return contract("prefix must be shorter than the horizon");
        }
        let mut tape = Tape::new();
        let (mut un, _) = Unroll::new(self, &mut tape, ctx, false);
        let p = self.arch.past_len;
        let mut prevprev = tape.constant(ctx.past[p - 2].to_vec());
        let mut prev = tape.constant(ctx.past[p - 1].to_vec());
        let mut out = un.step(&mut tape, prev, prevprev);
        for s in prefix {
            let next = tape.constant(s.to_vec());
            prevprev = prev;
            prev = next;
            out = un.step(&mut tape, prev, prevprev);
        }
        tape.check()?;
        Ok(gaussian_from(&tape, out.0, out.1))
    }

    /// Builds `Σₜ log N(sₜ; μₜ, Σₜ)` on `tape` with each state as a node.
    fn log_prob_nodes(&self, tape: &mut Tape, un: &mut Unroll, ctx: &SceneContext, states: &[Var]) -> Var {
        let p = self.arch.past_len;
        let mut prevprev = tape.constant(ctx.past[p - 2].to_vec());
        let mut prev = tape.constant(ctx.past[p - 1].to_vec());
        let mut terms = Vec::with_capacity(states.len());
        for &s in states {
            let (mean, scale) = un.step(tape, prev, prevprev);
            terms.push(tape.gauss_log_density(s, mean, scale));
            prevprev = prev;
            prev = s;
        }
        let all = tape.concat(&terms);
        tape.sum(all)
    }

    fn check(&self, y: &Trajectory, ctx: &SceneContext) -> Result<()> {
        self.arch.check_context(ctx)?;
        self.arch.check_trajectory(y)
    }

    /// Imitation prior `log q(y | x; θ)`.
    pub fn log_prob(&self, y: &Trajectory, ctx: &SceneContext) -> Result<f64> {
        self.check(y, ctx)?;
        let mut tape = Tape::with_capacity(32 * self.arch.horizon + 32);
        let (mut un, _) = Unroll::new(self, &mut tape, ctx, false);
        let states: Vec<Var> = y.states.iter().map(|s| tape.constant(s.to_vec())).collect();
        let lp = self.log_prob_nodes(&mut tape, &mut un, ctx, &states);
        tape.check()?;
        Ok(tape.scalar(lp))
    }

    /// `log q` and its gradient with respect to the flattened plan.
    pub fn log_prob_grad_y(&self, y: &Trajectory, ctx: &SceneContext) -> Result<(f64, Vec<f64>)> {
        self.check(y, ctx)?;
        let mut tape = Tape::with_capacity(32 * self.arch.horizon + 32);
        let (mut un, _) = Unroll::new(self, &mut tape, ctx, false);
        let flat = tape.input(y.flatten());
        let states: Vec<Var> = (0..y.len()).map(|t| tape.slice(flat, 2 * t, 2)).collect();
        let lp = self.log_prob_nodes(&mut tape, &mut un, ctx, &states);
        let grads = tape.backward(lp)?;
        let g = grads.wrt(flat).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; 2 * y.len()]);
        Ok((tape.scalar(lp), g))
    }

    /// `log q` and its gradient with respect to every parameter.
    pub fn log_prob_grad_params(&self, y: &Trajectory, ctx: &SceneContext) -> Result<(f64, Vec<f64>)> {
        self.check(y, ctx)?;
        let mut tape = Tape::with_capacity(32 * self.arch.horizon + 32);
        let (mut un, _) = Unroll::new(self, &mut tape, ctx, true);
        let states: Vec<Var> = y.states.iter().map(|s| tape.constant(s.to_vec())).collect();
        let lp = self.log_prob_nodes(&mut tape, &mut un, ctx, &states);
        let grads = tape.backward(lp)?;
        Ok((tape.scalar(lp), self.params.gather(&un.p, &grads)))
    }

    fn rollout(&self, ctx: &SceneContext, mut noise: impl FnMut() -> [f64; 2]) -> Result<Trajectory> {
        self.arch.check_context(ctx)?;
        let mut tape = Tape::new();
        let (mut un, _) = Unroll::new(self, &mut tape, ctx, false);
        let p = self.arch.past_len;
        let mut prevprev = tape.constant(ctx.past[p - 2].to_vec());
        let mut prev = tape.constant(ctx.past[p - 1].to_vec());
        let mut states = Vec::with_capacity(self.arch.horizon);
        for _ in 0..self.arch.horizon {
            let (mean, scale) = un.step(&mut tape, prev, prevprev);
            let g = gaussian_from(&tape, mean, scale);
            let [e1, e2] = noise();
            let l = g.scale_lower;
            let s = [g.mean[0] + l[0][0] * e1, g.mean[1] + l[1][0] * e1 + l[1][1] * e2];
            states.push(s);
            prevprev = prev;
            prev = tape.constant(s.to_vec());
        }
        tape.check()?;
        Ok(Trajectory::new(states, self.arch.dt))
    }

    /// Draws `s₁ … s_T` autoregressively; deterministic in `seed`.
    pub fn sample(&self, ctx: &SceneContext, seed: u64) -> Result<Trajectory> {
        let mut rng = seeds::rng(seed);
        self.rollout(ctx, || [rng.sample(StandardNormal), rng.sample(StandardNormal)])
    }

    /// Trajectory obtained by feeding back each step's mean.
    pub fn mean_rollout(&self, ctx: &SceneContext) -> Result<Trajectory> {
        self.rollout(ctx, || [0.0, 0.0])
    }

    /// Serialises to the model file JSON document.
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: 1,
            arch: self.arch,
            params: self.params.values().iter().map(|v| format!("{v:?}")).collect(),
            train_meta: self.meta,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format_version != 1 {
            return Err(Error::Format(format!("unsupported model format_version {}", file.format_version)));
        }
        let values = file
            .params
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("parameter `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != file.arch.param_count() {
            return Err(Error::Format(format!(
                "model has {} parameters, arch implies {}",
                values.len(),
                file.arch.param_count()
            )));
        }
        Self::from_parts(file.arch, values, file.train_meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    arch: Arch,
    params: Vec<String>,
    train_meta: TrainMeta,
}

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_FINAL_LR_FRACTION: f64 = 0.01;
pub const DEFAULT_GRAD_CLIP: f64 = 1000.0;

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Drives minibatch assignment.
    pub seed: u64,
    /// Drives parameter initialisation.
    pub init_seed: u64,
    /// Learning rate at the last step as a fraction of the initial one;
    /// the rate follows a cosine from 1 down to this value.
    pub final_lr_fraction: f64,
    /// Minibatch gradients are rescaled to at most this global norm.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::TRAINING,
            seed: 0,
            init_seed: 0,
            final_lr_fraction: DEFAULT_FINAL_LR_FRACTION,
            grad_clip: DEFAULT_GRAD_CLIP,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-record NLL seen during each epoch.
    pub epoch_nll: Vec<f64>,
}

/// Mean negative log-likelihood over `batch` and its parameter gradient.
pub fn nll_and_grad(model: &DensityModel, batch: &[&Demonstration]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    let parts = par::map(batch, |d| model.log_prob_grad_params(&d.plan, &d.ctx));
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut nll = 0.0;
    for part in parts {
        let (lp, g) = part?;
        nll -= lp * scale;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc -= gi * scale;
        }
    }
    Ok((nll, grad))
}

/// Mean negative log-likelihood over `data`.
pub fn mean_nll(model: &DensityModel, data: &[Demonstration]) -> Result<f64> {
    if data.is_empty() {
        return contract("empty dataset");
    }
    let lps = par::map(data, |d| model.log_prob(&d.plan, &d.ctx));
    let mut total = 0.0;
    for lp in lps {
        total -= lp?;
    }
    Ok(total / data.len() as f64)
}

/// Indices of `data` sorted by record content, so training does not
/// depend on the order records arrive in.
fn canonical_order(data: &[Demonstration]) -> Vec<usize> {
    let mut keyed: Vec<(u64, usize)> = data.iter().enumerate().map(|(i, d)| (d.fingerprint(), i)).collect();
    keyed.sort_by_key(|&(f, _)| f);
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn check_dataset(data: &[Demonstration], arch: &Arch) -> Result<()> {
    if data.is_empty() {
        return contract("training data is empty");
    }
    for d in data {
        arch.check_context(&d.ctx)?;
        arch.check_trajectory(&d.plan)?;
    }
    Ok(())
}

/// Maximum-likelihood fit by minibatch Adam.
pub fn train_mle(data: &[Demonstration], arch: Arch, cfg: &TrainConfig) -> Result<(DensityModel, TrainReport)> {
    check_dataset(data, &arch)?;
    if cfg.batch_size == 0 {
        return contract("batch_size must be positive");
    }
    let mut model = DensityModel::init(arch, cfg.init_seed)?;
    let mut adam = AdamState::new(model.params.len(), cfg.adam);
    let mut order = canonical_order(data);
    let mut rng = seeds::rng(cfg.seed);
    let mut report = TrainReport::default();
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Demonstration> = chunk.iter().map(|&i| &data[i]).collect();
            let (nll, mut grad) = match nll_and_grad(&model, &batch) {
                Ok(v) => v,
                Err(Error::Numerical { .. }) => return Err(Error::TrainingFailure { epoch, member: None }),
                Err(e) => return Err(e),
            };
            if !nll.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure { epoch, member: None });
            }
            epoch_nll += nll * chunk.len() as f64;
            clip_grad_norm(&mut grad, cfg.grad_clip);
            let progress = step as f64 / total_steps as f64;
            let f = cfg.final_lr_fraction;
            adam.config.learning_rate = cfg.adam.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (PI * progress).cos()));
            step += 1;
            adam.update(model.params.values_mut(), &grad, Direction::Minimize)?;
        }
        report.epoch_nll.push(epoch_nll / data.len() as f64);
    }
    model.meta = TrainMeta { seed: cfg.seed, epochs: cfg.epochs, final_nll: report.epoch_nll.last().copied() };
    Ok((model, report))
}

/// Continues maximum-likelihood training on `data` for `steps` full-batch
/// Adam steps with gradient-norm clipping, reusing `adam` across calls.
pub fn fine_tune(
    model: &mut DensityModel,
    data: &[&Demonstration],
    steps: usize,
    adam: &mut AdamState,
    grad_clip: f64,
) -> Result<()> {
    for _ in 0..steps {
        let (nll, mut grad) = nll_and_grad(model, data)?;
        clip_grad_norm(&mut grad, grad_clip);
        if !nll.is_finite() {
            return Err(Error::TrainingFailure { epoch: 0, member: None });
        }
        adam.update(model.params.values_mut(), &grad, Direction::Minimize)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch { horizon: 4, past_len: 3, scan_beams: 5, hidden: 6, ..Arch::default() }
    }

    fn ctx(arch: &Arch, seed: u64) -> SceneContext {
        let mut rng = seeds::rng(seed);
        let past = (0..arch.past_len)
            .map(|i| {
                let back = (arch.past_len - 1 - i) as f64;
                [-1.2 * back + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]
            })
            .collect::<Vec<_>>();
        let mut past = past;
        *past.last_mut().unwrap() = [0.0, 0.0];
        SceneContext {
            past,
            scan: (0..arch.scan_beams).map(|_| rng.random_range(1.0..arch.max_range)).collect(),
            goal: [rng.random_range(5.0..20.0), rng.random_range(-5.0..5.0)],
        }
    }

    /// Model whose scale bias makes every step N(prev, I).
    fn unit_model(arch: Arch) -> DensityModel {
        let mut m = DensityModel::zeros(arch).unwrap();
        let b = ((1.0 - arch.min_scale).exp() - 1.0).ln();
        let sb = m.params_mut().segment_mut("scale_b").unwrap();
        sb[0] = b;
        sb[1] = b;
        m
    }

    #[test]
    fn embedding_is_deterministic_and_hidden_wide() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 3).unwrap();
        let c = ctx(&arch, 1);
        let e1 = m.encode_context(&c).unwrap();
        assert_eq!(e1, m.encode_context(&c).unwrap());
        assert_eq!(e1.len(), arch.hidden);
        let mut c2 = c.clone();
        c2.scan[2] = (c2.scan[2] + 3.0).min(arch.max_range - 0.1);
        assert_ne!(e1, m.encode_context(&c2).unwrap());
    }

    #[test]
    fn context_shape_mismatch_is_contract_error() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 3).unwrap();
        let mut c = ctx(&arch, 1);
        c.scan.pop();
        assert!(matches!(m.encode_context(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_give_zero_offset_and_isotropic_scale() {
        let arch = small_arch();
        let m = DensityModel::zeros(arch).unwrap();
        let c = ctx(&arch, 2);
        let g = m.step_distribution(&c, &[[1.0, 0.5]]).unwrap();
        assert_eq!(g.mean, [1.0, 0.5]);
        let d = arch.min_scale + 2f64.ln();
        let cov = g.covariance();
        assert!((cov[0][0] - d * d).abs() < 1e-15 && (cov[1][1] - d * d).abs() < 1e-15);
        assert_eq!(cov[0][1], 0.0);
    }

    #[test]
    fn random_models_give_positive_definite_steps() {
        let arch = small_arch();
        for seed in 0..20 {
            let m = DensityModel::init(arch, seed).unwrap();
            let g = m.step_distribution(&ctx(&arch, seed), &[[1.0, 0.0], [2.0, 0.3]]).unwrap();
            let c = g.covariance();
            let l11 = c[0][0].sqrt();
            let l21 = c[1][0] / l11;
            let rem = c[1][1] - l21 * l21;
            assert!(l11 >= arch.min_scale && rem > 0.0);
            assert!((c[0][1] - c[1][0]).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_is_continuous_in_prefix() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 9).unwrap();
        let c = ctx(&arch, 9);
        let base = m.step_distribution(&c, &[[1.0, 0.1], [2.1, 0.2]]).unwrap().mean;
        for delta in [1e-3, 1e-4, 1e-5] {
            let moved = m.step_distribution(&c, &[[1.0, 0.1], [2.1 + delta, 0.2]]).unwrap().mean;
            let dist = ((moved[0] - base[0]).powi(2) + (moved[1] - base[1]).powi(2)).sqrt();
            assert!(dist < 5.0 * delta, "{dist} for δ={delta}");
        }
    }

    #[test]
    fn standard_normal_single_step() {
        let arch = Arch { horizon: 1, ..small_arch() };
        let m = unit_model(arch);
        let c = ctx(&arch, 4);
        let y = Trajectory::new(vec![[0.0, 0.0]], arch.dt);
        let lp = m.log_prob(&y, &c).unwrap();
        assert!((lp - -(2.0 * PI).ln()).abs() < 1e-9, "{lp}");
        assert!((lp - -1.837_877_066).abs() < 1e-9);
    }

    #[test]
    fn steps_at_the_mean_are_additive() {
        let arch = small_arch();
        let m = unit_model(arch);
        let c = ctx(&arch, 4);
        let y = Trajectory::new(vec![[0.0, 0.0]; arch.horizon], arch.dt);
        let lp = m.log_prob(&y, &c).unwrap();
        assert!((lp - -(arch.horizon as f64) * (2.0 * PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 5).unwrap();
        let c = ctx(&arch, 5);
        let y = m.sample(&c, 7).unwrap();
        let (_, gy) = m.log_prob_grad_y(&y, &c).unwrap();
        let flat = y.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let mut q = flat.clone();
            q[i] -= h;
            let fd = (m.log_prob(&Trajectory::from_flat(&p, y.dt), &c).unwrap()
                - m.log_prob(&Trajectory::from_flat(&q, y.dt), &c).unwrap())
                / (2.0 * h);
            assert!((gy[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "y[{i}]: {} vs {fd}", gy[i]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 5).unwrap();
        let c = ctx(&arch, 5);
        assert_eq!(m.sample(&c, 11).unwrap(), m.sample(&c, 11).unwrap());
        assert_ne!(m.sample(&c, 11).unwrap(), m.sample(&c, 12).unwrap());
    }

    #[test]
    fn zero_model_samples_centre_on_previous_position() {
        let arch = Arch { horizon: 1, ..small_arch() };
        let m = DensityModel::zeros(arch).unwrap();
        let c = ctx(&arch, 1);
        let n = 1000;
        let mut mean = [0.0, 0.0];
        for s in 0..n {
            let y = m.sample(&c, s).unwrap();
            mean[0] += y.states[0][0] / n as f64;
            mean[1] += y.states[0][1] / n as f64;
        }
        let sd = arch.min_scale + 2f64.ln();
        let se = sd / (n as f64).sqrt();
        assert!(mean[0].abs() < 3.0 * se && mean[1].abs() < 3.0 * se, "{mean:?}");
    }

    #[test]
    fn empirical_variance_matches_min_scale() {
        for min_scale in [0.5, 2.0] {
            let arch = Arch { horizon: 1, min_scale, ..small_arch() };
            let m = DensityModel::zeros(arch).unwrap();
            let c = ctx(&arch, 1);
            let xs: Vec<f64> = (0..1000).map(|s| m.sample(&c, s).unwrap().states[0][0]).collect();
            let mu = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64;
            let expected = (min_scale + 2f64.ln()).powi(2);
            assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
        }
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 21).unwrap();
        let back = DensityModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let c = ctx(&arch, 3);
        let y = m.sample(&c, 1).unwrap();
        assert_eq!(m.log_prob(&y, &c).unwrap().to_bits(), back.log_prob(&y, &c).unwrap().to_bits());
    }

    #[test]
    fn truncated_parameter_list_is_rejected() {
        let arch = small_arch();
        let m = DensityModel::init(arch, 21).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["params"].as_array_mut().unwrap().pop();
        assert!(matches!(DensityModel::from_json(&v.to_string()), Err(Error::Format(_))));
    }

    fn constant_offset_data(arch: &Arch, n: usize) -> Vec<Demonstration> {
        (0..n)
            .map(|i| {
                let c = ctx(arch, 100 + i as u64);
                let plan = Trajectory::new((1..=arch.horizon).map(|t| [t as f64, 0.0]).collect(), arch.dt);
                Demonstration { scene_id: format!("s{i}"), step: 0, ctx: c, plan }
            })
            .collect()
    }

    #[test]
    fn training_rejects_empty_data() {
        let arch = small_arch();
        assert!(matches!(train_mle(&[], arch, &TrainConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn training_learns_constant_offset() {
        let arch = Arch { horizon: 3, ..small_arch() };
        let data = constant_offset_data(&arch, 32);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 16,
            adam: AdamConfig::TRAINING.with_learning_rate(1e-2),
            seed: 1,
            init_seed: 2,
            final_lr_fraction: 1.0,
            grad_clip: f64::INFINITY,
        };
        let (m, report) = train_mle(&data, arch, &cfg).unwrap();
        let first10 = &report.epoch_nll[..10];
        assert!(first10.windows(2).filter(|w| w[1] < w[0]).count() >= 8, "{first10:?}");
        let g = m.step_distribution(&data[0].ctx, &[]).unwrap();
        assert!((g.mean[0] - 1.0).abs() < 0.05 && g.mean[1].abs() < 0.05, "{:?}", g.mean);
        assert_eq!(m.meta().final_nll, report.epoch_nll.last().copied());
    }

    #[test]
    fn training_ignores_record_order() {
        let arch = Arch { horizon: 2, ..small_arch() };
        let data = constant_offset_data(&arch, 10);
        let mut shuffled = data.clone();
        shuffled.reverse();
        shuffled.swap(1, 7);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let (a, _) = train_mle(&data, arch, &cfg).unwrap();
        let (b, _) = train_mle(&shuffled, arch, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
