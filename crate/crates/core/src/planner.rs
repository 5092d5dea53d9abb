//! Plan selection under epistemic uncertainty.
//!
//! The objective of a plan `y` is an aggregate over ensemble members of the
//! imitation prior `log q_k(y | x)` plus the goal log-likelihood
//! `log N(y_T; goal, ε² I)`. Plans are found either by Adam ascent on the
//! flattened plan coordinates or by exhaustive scoring of a fixed library of
//! k-means centroids of expert plans.

use crate::density::{Point, SceneContext, Trajectory};
use crate::diffmath::{AdamConfig, AdamState, Direction};
use crate::ensemble::{weighted_variance, EnsemblePosterior};
use crate::error::{contract, Error, Result};
use crate::world::{PlanStep, Policy, Tick};
use crate::{par, seeds};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// How member log-likelihoods are combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Aggregator {
    /// Worst-case member (`min_k`).
    Wcm,
    /// Weighted model average (`Σ_k w_k log q_k`).
    Ma,
    /// Best-case member (`max_k`).
    Bcm,
    /// A single member, as a point-estimate planner would use.
    SampleK(usize),
    /// Mean of the lowest `⌈αK⌉` members.
    Cvar(f64),
    /// Weighted mean minus `λ` times weighted variance.
    MeanVariance(f64),
}

impl Aggregator {
    pub fn validate(&self, k: usize) -> Result<()> {
        match *self {
            Aggregator::SampleK(i) if i >= k => contract(format!("SampleK index {i} out of range for K={k}")),
            Aggregator::Cvar(a) if !(a > 0.0 && a <= 1.0) => contract(format!("CVaR alpha {a} not in (0, 1]")),
            Aggregator::MeanVariance(l) if !(l >= 0.0) => contract(format!("mean-variance lambda {l} is negative")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Wcm => write!(f, "rip-wcm"),
            Aggregator::Ma => write!(f, "rip-ma"),
            Aggregator::Bcm => write!(f, "rip-bcm"),
            Aggregator::SampleK(0) => write!(f, "dim"),
            Aggregator::SampleK(i) => write!(f, "sample-{i}"),
            Aggregator::Cvar(a) => write!(f, "rip-cvar-{a}"),
            Aggregator::MeanVariance(l) => write!(f, "rip-mv-{l}"),
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("unknown method `{s}`"));
        Ok(match s {
            "rip-wcm" | "wcm" => Aggregator::Wcm,
            "rip-ma" | "ma" => Aggregator::Ma,
            "rip-bcm" | "bcm" => Aggregator::Bcm,
            "dim" => Aggregator::SampleK(0),
            _ => {
                if let Some(i) = s.strip_prefix("sample-") {
                    Aggregator::SampleK(i.parse().map_err(|_| bad())?)
                } else if let Some(a) = s.strip_prefix("rip-cvar-") {
                    Aggregator::Cvar(a.parse().map_err(|_| bad())?)
                } else if let Some(l) = s.strip_prefix("rip-mv-") {
                    Aggregator::MeanVariance(l.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `⌈αK⌉` smallest values, ties to the lower index.
fn cvar_tail(v: &[f64], alpha: f64) -> Vec<usize> {
    let m = ((alpha * v.len() as f64).ceil() as usize).clamp(1, v.len());
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn check_lengths(lps: &[f64], weights: &[f64], agg: Aggregator) -> Result<()> {
    if lps.is_empty() || lps.len() != weights.len() {
        return contract(format!("{} scores vs {} weights", lps.len(), weights.len()));
    }
    agg.validate(lps.len())
}

/// Combines member log-likelihoods with `agg`.
pub fn aggregate(lps: &[f64], weights: &[f64], agg: Aggregator) -> Result<f64> {
    check_lengths(lps, weights, agg)?;
    let lo = lps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weighted_mean = || lps.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>().clamp(lo, hi);
    Ok(match agg {
        Aggregator::Wcm => lo,
        Aggregator::Bcm => hi,
        Aggregator::Ma => weighted_mean(),
        Aggregator::SampleK(i) => lps[i],
        Aggregator::Cvar(alpha) => {
            let tail = cvar_tail(lps, alpha);
            (tail.iter().map(|&i| lps[i]).sum::<f64>() / tail.len() as f64).clamp(lo, hi)
        }
        Aggregator::MeanVariance(lambda) => weighted_mean() - lambda * weighted_variance(lps, weights),
    })
}

/// `∂ aggregate / ∂ lps[k]`; a subgradient for the min/max/tail operators.
pub fn aggregate_coefficients(lps: &[f64], weights: &[f64], agg: Aggregator) -> Result<Vec<f64>> {
    check_lengths(lps, weights, agg)?;
    let k = lps.len();
    let mut c = vec![0.0; k];
    match agg {
        Aggregator::Wcm => c[argmin(lps)] = 1.0,
        Aggregator::Bcm => c[argmax(lps)] = 1.0,
        Aggregator::SampleK(i) => c[i] = 1.0,
        Aggregator::Ma => c.copy_from_slice(weights),
        Aggregator::Cvar(alpha) => {
            let tail = cvar_tail(lps, alpha);
            for &i in &tail {
                c[i] = 1.0 / tail.len() as f64;
            }
        }
        Aggregator::MeanVariance(lambda) => {
            let mean: f64 = lps.iter().zip(weights).map(|(l, w)| l * w).sum();
            for i in 0..k {
                c[i] = weights[i] - 2.0 * lambda * weights[i] * (lps[i] - mean);
            }
        }
    }
    Ok(c)
}

/// Goal likelihood `N(y_T; position, tolerance² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub position: Point,
    pub tolerance: f64,
}

impl GoalSpec {
    pub fn new(position: Point, tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0) {
            return contract("goal tolerance must be positive");
        }
        Ok(Self { position, tolerance })
    }

    pub fn log_prob(&self, end: Point) -> f64 {
        let e2 = self.tolerance * self.tolerance;
        let d2 = (end[0] - self.position[0]).powi(2) + (end[1] - self.position[1]).powi(2);
        -(2.0 * PI * e2).ln() - d2 / (2.0 * e2)
    }

    fn grad(&self, end: Point) -> [f64; 2] {
        let e2 = self.tolerance * self.tolerance;
        [-(end[0] - self.position[0]) / e2, -(end[1] - self.position[1]) / e2]
    }
}

/// Decomposition of the objective at one plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub plan: Trajectory,
    pub member_log_probs: Vec<f64>,
    pub aggregate_value: f64,
    pub goal_log_prob: f64,
    pub epistemic_variance: f64,
    pub iterations_used: usize,
}

impl PlanDiagnostics {
    pub fn objective_value(&self) -> f64 {
        self.aggregate_value + self.goal_log_prob
    }
}

/// Everything the objective depends on besides the plan itself.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub ctx: &'a SceneContext,
    pub posterior: &'a EnsemblePosterior,
    pub goal: Option<GoalSpec>,
    pub agg: Aggregator,
}

impl<'a> Problem<'a> {
    pub fn new(ctx: &'a SceneContext, posterior: &'a EnsemblePosterior, goal: GoalSpec, agg: Aggregator) -> Self {
        Self { ctx, posterior, goal: Some(goal), agg }
    }

    /// Objective with the imitation prior only (no goal term).
    pub fn prior_only(ctx: &'a SceneContext, posterior: &'a EnsemblePosterior, agg: Aggregator) -> Self {
        Self { ctx, posterior, goal: None, agg }
    }

    fn goal_log_prob(&self, y: &Trajectory) -> f64 {
        self.goal.map_or(0.0, |g| g.log_prob(y.last()))
    }

    /// Objective value without gradients.
    pub fn value(&self, y: &Trajectory) -> Result<f64> {
        let lps = self.posterior.member_log_probs(y, self.ctx)?;
        let v = aggregate(&lps, self.posterior.weights(), self.agg)? + self.goal_log_prob(y);
        finite(v)
    }

    /// Objective value and gradient over the flattened plan.
    pub fn value_and_grad(&self, y: &Trajectory) -> Result<(f64, Vec<f64>)> {
        let members = self.posterior.members();
        let weights = self.posterior.weights();
        // Min/max/tail operators only need gradients of the active members.
        let selective = matches!(self.agg, Aggregator::Wcm | Aggregator::Bcm | Aggregator::SampleK(_) | Aggregator::Cvar(_));
        let (lps, grads): (Vec<f64>, Vec<Option<Vec<f64>>>) = if selective {
            let lps = self.posterior.member_log_probs(y, self.ctx)?;
            let coef = aggregate_coefficients(&lps, weights, self.agg)?;
            let active: Vec<usize> = (0..members.len()).filter(|&k| coef[k] != 0.0).collect();
            let results = par::map(&active, |&k| members[k].log_prob_grad_y(y, self.ctx));
            let mut grads = vec![None; members.len()];
            for (k, r) in active.into_iter().zip(results) {
                grads[k] = Some(r?.1);
            }
            (lps, grads)
        } else {
            let results = par::map(members, |m| m.log_prob_grad_y(y, self.ctx));
            let mut lps = Vec::with_capacity(members.len());
            let mut grads = Vec::with_capacity(members.len());
            for r in results {
                let (lp, g) = r?;
                lps.push(lp);
                grads.push(Some(g));
            }
            (lps, grads)
        };
        let coef = aggregate_coefficients(&lps, weights, self.agg)?;
        let mut grad = vec![0.0; 2 * y.len()];
        for (c, g) in coef.iter().zip(&grads) {
            if let Some(g) = g {
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += c * gi;
                }
            }
        }
        if let Some(goal) = self.goal {
            let gg = goal.grad(y.last());
            let n = grad.len();
            grad[n - 2] += gg[0];
            grad[n - 1] += gg[1];
        }
        let v = aggregate(&lps, weights, self.agg)? + self.goal_log_prob(y);
        Ok((finite(v)?, grad))
    }

    pub fn diagnose(&self, y: &Trajectory, iterations_used: usize) -> Result<PlanDiagnostics> {
        let lps = self.posterior.member_log_probs(y, self.ctx)?;
        let weights = self.posterior.weights();
        Ok(PlanDiagnostics {
            plan: y.clone(),
            aggregate_value: aggregate(&lps, weights, self.agg)?,
            goal_log_prob: self.goal_log_prob(y),
            epistemic_variance: weighted_variance(&lps, weights),
            member_log_probs: lps,
            iterations_used,
        })
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical { op: "objective", node: 0 })
    }
}

/// Aggregated objective and its plan gradient.
pub fn objective(
    y: &Trajectory,
    ctx: &SceneContext,
    posterior: &EnsemblePosterior,
    goal: GoalSpec,
    agg: Aggregator,
) -> Result<(f64, Vec<f64>)> {
    Problem::new(ctx, posterior, goal, agg).value_and_grad(y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanConfig {
    pub max_iters: usize,
    pub adam: AdamConfig,
    /// Independent ascents; restart 0 starts at the given init, the rest
    /// at seeded Gaussian perturbations of it.
    pub restarts: usize,
    pub restart_jitter: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { max_iters: 100, adam: AdamConfig::PLANNING, restarts: 1, restart_jitter: 0.5 }
    }
}

fn ascend(problem: &Problem, init: Vec<f64>, dt: f64, cfg: &PlanConfig) -> Option<(f64, Vec<f64>, usize)> {
    let mut y = init;
    let mut adam = AdamState::new(y.len(), cfg.adam);
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for it in 0..=cfg.max_iters {
        let traj = Trajectory::from_flat(&y, dt);
        if it == cfg.max_iters {
            if let Ok(v) = problem.value(&traj) {
                if best.as_ref().is_none_or(|b| v > b.0) {
                    best = Some((v, y.clone(), it));
                }
            }
            break;
        }
        let Ok((v, g)) = problem.value_and_grad(&traj) else { break };
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, y.clone(), it));
        }
        if adam.update(&mut y, &g, Direction::Maximize).is_err() {
            break;
        }
    }
    best
}

/// Adam ascent on the objective; returns the best iterate seen.
pub fn plan_gradient(problem: &Problem, init: &Trajectory, cfg: &PlanConfig, seed: u64) -> Result<PlanDiagnostics> {
    problem.agg.validate(problem.posterior.len())?;
    problem.posterior.arch().check_trajectory(init)?;
    let restarts = cfg.restarts.max(1);
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|r| {
            let mut y = init.flatten();
            if r > 0 {
                let mut rng = seeds::rng(seeds::derive(seed, seeds::PLAN, r as u64));
                for v in &mut y {
                    *v += cfg.restart_jitter * rng.sample::<f64, _>(StandardNormal);
                }
            }
            y
        })
        .collect();
    let results = par::map(&starts, |s| ascend(problem, s.clone(), init.dt, cfg));
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for r in results.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| r.0 > b.0) {
            best = Some(r);
        }
    }
    let (_, y, iters) = best.ok_or_else(|| Error::PlanningFailure("every iterate was non-finite".into()))?;
    problem.diagnose(&Trajectory::from_flat(&y, init.dt), iters)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryMeta {
    pub num_source_plans: usize,
    pub rng_seed: u64,
    pub requested: usize,
    pub distinct_plans: usize,
    pub rounds: usize,
}

/// Fixed plan set searched exhaustively.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLibrary {
    pub centroids: Vec<Trajectory>,
    pub meta: LibraryMeta,
}

pub const DEFAULT_LIBRARY_SIZE: usize = 64;
const MAX_ROUNDS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means (k-means++ seeding, Lloyd iterations) over flattened plans.
pub fn build_library(plans: &[Trajectory], l: usize, seed: u64) -> Result<TrajectoryLibrary> {
    if plans.is_empty() || l == 0 {
        return contract("library needs plans and l ≥ 1");
    }
    let t = plans[0].len();
    let dt = plans[0].dt;
    if plans.iter().any(|p| p.len() != t) {
        return contract("library plans must share a horizon");
    }
    let points: Vec<Vec<f64>> = plans.iter().map(Trajectory::flatten).collect();
    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..points.len())
        .filter(|&i| seen.insert(points[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    let mut meta = LibraryMeta {
        num_source_plans: plans.len(),
        rng_seed: seed,
        requested: l,
        distinct_plans: distinct.len(),
        rounds: 0,
    };
    if l >= distinct.len() {
        let centroids = distinct.iter().map(|&i| plans[i].clone()).collect();
        return Ok(TrajectoryLibrary { centroids, meta });
    }

    let mut rng = seeds::rng(seed);
    let mut centroids: Vec<Vec<f64>> = vec![points[distinct[rng.random_range(0..distinct.len())]].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < l {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] == 0.0 {
            pick = d2.iter().enumerate().filter(|(_, d)| **d > 0.0).map(|(i, _)| i).next().expect("distinct point left");
        }
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, centroids.last().expect("pushed")));
        }
    }

    let mut assignment: Vec<usize> = vec![usize::MAX; points.len()];
    for round in 0..MAX_ROUNDS {
        let next: Vec<usize> = par::map(&points, |p| nearest(p, &centroids).0);
        meta.rounds = round + 1;
        if next == assignment {
            break;
        }
        assignment = next;
        let dim = 2 * t;
        let mut sums = vec![vec![0.0; dim]; l];
        let mut counts = vec![0usize; l];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..l {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let centroids = centroids.iter().map(|c| Trajectory::from_flat(c, dt)).collect();
    Ok(TrajectoryLibrary { centroids, meta })
}

impl TrajectoryLibrary {
    pub fn horizon(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LibraryFile {
            format_version: 1,
            t: self.horizon(),
            dt: self.centroids[0].dt,
            centroids: self.centroids.iter().map(|c| c.states.clone()).collect(),
            source_meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: LibraryFile = serde_json::from_str(s)?;
        if file.format_version != 1 {
            return Err(Error::Format(format!("unsupported library format_version {}", file.format_version)));
        }
        if file.centroids.is_empty() || file.centroids.iter().any(|c| c.len() != file.t) {
            return Err(Error::Format("library centroids must be non-empty and length T".into()));
        }
        let centroids = file.centroids.into_iter().map(|c| Trajectory::new(c, file.dt)).collect();
        Ok(Self { centroids, meta: file.source_meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Index of the highest-objective centroid; ties go to the lower index.
    pub fn best_index(&self, problem: &Problem) -> Result<(usize, f64)> {
        let values = par::map(&self.centroids, |c| problem.value(c).unwrap_or(f64::NEG_INFINITY));
        let i = argmax(&values);
        if !values[i].is_finite() {
            return Err(Error::PlanningFailure("no library centroid has a finite objective".into()));
        }
        Ok((i, values[i]))
    }
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    format_version: u32,
    #[serde(rename = "T")]
    t: usize,
    dt: f64,
    centroids: Vec<Vec<Point>>,
    source_meta: LibraryMeta,
}

/// Exhaustive search over library centroids.
pub fn plan_library(problem: &Problem, library: &TrajectoryLibrary) -> Result<PlanDiagnostics> {
    problem.agg.validate(problem.posterior.len())?;
    if library.centroids.is_empty() {
        return contract("library is empty");
    }
    let (i, _) = library.best_index(problem)?;
    problem.diagnose(&library.centroids[i], 0)
}

/// Starting plan: the best library centroid when a library is given,
/// otherwise member 0's mean rollout.
pub fn initial_plan(problem: &Problem, library: Option<&TrajectoryLibrary>) -> Result<Trajectory> {
    match library {
        Some(lib) => Ok(lib.centroids[lib.best_index(problem)?.0].clone()),
        None => problem.posterior.members()[0].mean_rollout(problem.ctx),
    }
}

/// Closed-loop planner settings shared by RIP-style policies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RipConfig {
    pub agg: Aggregator,
    pub plan: PlanConfig,
    pub goal_tolerance: f64,
    pub seed: u64,
}

impl RipConfig {
    pub fn new(agg: Aggregator, seed: u64) -> Self {
        Self { agg, plan: PlanConfig::default(), goal_tolerance: 1.0, seed }
    }
}

/// Plans for `ctx`, aiming at `ctx.goal`; `t` decorrelates restart seeds
/// across ticks.
pub fn rip_plan(
    posterior: &EnsemblePosterior,
    library: Option<&TrajectoryLibrary>,
    cfg: &RipConfig,
    ctx: &SceneContext,
    t: usize,
) -> Result<PlanDiagnostics> {
    let problem = Problem::new(ctx, posterior, GoalSpec::new(ctx.goal, cfg.goal_tolerance)?, cfg.agg);
    let init = initial_plan(&problem, library)?;
    plan_gradient(&problem, &init, &cfg.plan, seeds::derive(cfg.seed, seeds::PLAN, t as u64))
}

/// Receding-horizon RIP driver for `world::run_episode`.
pub struct RipPolicy<'a> {
    pub posterior: &'a EnsemblePosterior,
    pub library: Option<&'a TrajectoryLibrary>,
    pub cfg: RipConfig,
}

impl Policy for RipPolicy<'_> {
    fn plan(&mut self, tick: &Tick) -> Result<PlanStep> {
        let d = rip_plan(self.posterior, self.library, &self.cfg, tick.ctx, tick.t)?;
        Ok(PlanStep { plan: d.plan, uncertainty: d.epistemic_variance, expert_query: false })
    }
}
