//! Uncertainty-triggered expert querying with online ensemble fine-tuning.

use crate::bench::{labelled_windows, mean_se};
use crate::density::{fine_tune, mean_nll, Demonstration, DEFAULT_GRAD_CLIP};
use crate::diffmath::{AdamConfig, AdamState};
use crate::ensemble::EnsemblePosterior;
use crate::error::{contract, Error, Result};
use crate::planner::{rip_plan, RipConfig, TrajectoryLibrary};
use crate::world::{run_episode, EpisodeConfig, EpisodeLog, ExpertPolicy, PlanStep, Policy, Scenario, Tick};
use crate::{par, seeds};
use rand::Rng;
use std::collections::VecDeque;

pub const DEFAULT_UPDATE_STEPS: usize = 20;
pub const DEFAULT_UPDATE_LR: f64 = 1e-3;
pub const DEFAULT_BUFFER_CAPACITY: usize = 256;
pub const DEFAULT_TARGET_FNR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationConfig {
    /// The expert is queried when the plan's epistemic variance exceeds this.
    pub tau: f64,
    pub buffer_capacity: usize,
    pub update_steps: usize,
    pub update_lr: f64,
    /// Total queries allowed; `None` is unlimited.
    pub query_budget: Option<usize>,
}

impl AdaptationConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            update_steps: DEFAULT_UPDATE_STEPS,
            update_lr: DEFAULT_UPDATE_LR,
            query_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return contract(format!("tau must be non-negative, got {}", self.tau));
        }
        if self.update_steps == 0 {
            return contract("update_steps must be at least 1");
        }
        if self.buffer_capacity == 0 {
            return contract("buffer_capacity must be at least 1");
        }
        if !(self.update_lr > 0.0) {
            return contract("update_lr must be positive");
        }
        Ok(())
    }
}

/// Bounded first-in first-out store of queried demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackBuffer {
    records: VecDeque<Demonstration>,
    capacity: usize,
}

impl FeedbackBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { records: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, d: Demonstration) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(d);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn records(&self) -> impl Iterator<Item = &Demonstration> {
        self.records.iter()
    }
}

/// Largest threshold `τ` such that at most `target_fnr` of positive windows
/// have a feature below `τ` (a window is flagged when its feature is at
/// least `τ`).
pub fn calibrate_tau(logs: &[EpisodeLog], target_fnr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_fnr) {
        return contract(format!("target false-negative rate {target_fnr} outside [0, 1]"));
    }
    let mut positives: Vec<f64> = labelled_windows(logs).iter().filter(|w| w.positive).map(|w| w.feature).collect();
    tau_from_positives(&mut positives, target_fnr)
}

pub(crate) fn tau_from_positives(positives: &mut [f64], target_fnr: f64) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::Calibration("no windows precede an infraction".into()));
    }
    positives.sort_by(f64::total_cmp);
    let n = positives.len();
    let misses = ((target_fnr * n as f64).floor() as usize).min(n - 1);
    Ok(positives[misses])
}

/// An ensemble being adapted online, with everything that persists across
/// episodes of one run.
#[derive(Clone, Debug)]
pub struct AdaRip {
    pub posterior: EnsemblePosterior,
    pub buffer: FeedbackBuffer,
    pub config: AdaptationConfig,
    adam: Vec<AdamState>,
    queries: usize,
    updates: usize,
    seed: u64,
}

impl AdaRip {
    pub fn new(posterior: EnsemblePosterior, config: AdaptationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam_cfg = AdamConfig { learning_rate: config.update_lr, ..AdamConfig::TRAINING };
        let adam = posterior.members().iter().map(|m| AdamState::new(m.params().len(), adam_cfg)).collect();
        Ok(Self { buffer: FeedbackBuffer::new(config.buffer_capacity), posterior, config, adam, queries: 0, updates: 0, seed })
    }

    /// Queries made so far in this run.
    pub fn queries(&self) -> usize {
        self.queries
    }

    fn budget_left(&self) -> bool {
        self.config.query_budget.is_none_or(|b| self.queries < b)
    }

    /// `update_steps` Adam steps of every member on its own bootstrap
    /// resample of the buffer.
    pub fn update(&mut self) -> Result<()> {
        let data: Vec<&Demonstration> = self.buffer.records().collect();
        if data.is_empty() {
            return Ok(());
        }
        let event = self.updates as u64;
        self.updates += 1;
        let steps = self.config.update_steps;
        let seed = self.seed;
        let members = self.posterior.members_mut();
        for (k, (model, adam)) in members.iter_mut().zip(self.adam.iter_mut()).enumerate() {
            let mut rng = seeds::rng(seeds::derive(seeds::derive(seed, seeds::ADAPT, event), seeds::MEMBER, k as u64));
            let sample: Vec<&Demonstration> = (0..data.len()).map(|_| data[rng.random_range(0..data.len())]).collect();
            fine_tune(model, &sample, steps, adam, DEFAULT_GRAD_CLIP)
                .map_err(|_| Error::TrainingFailure { epoch: event as usize, member: Some(k) })?;
        }
        Ok(())
    }
}

struct AdaRipPolicy<'a> {
    state: &'a mut AdaRip,
    library: Option<&'a TrajectoryLibrary>,
    cfg: RipConfig,
    expert: ExpertPolicy,
}

impl Policy for AdaRipPolicy<'_> {
    fn plan(&mut self, tick: &Tick) -> Result<PlanStep> {
        let d = rip_plan(&self.state.posterior, self.library, &self.cfg, tick.ctx, tick.t)?;
        let u = d.epistemic_variance;
        if !(u > self.state.config.tau && self.state.budget_left()) {
            return Ok(PlanStep { plan: d.plan, uncertainty: u, expert_query: false });
        }
        let plan = self.expert.ego_plan(tick.scenario, tick.state).map_err(|e| match e {
            e @ Error::ExpertFailure(_) => e,
            other => Error::ExpertFailure(other.to_string()),
        })?;
        self.state.queries += 1;
        self.state.buffer.push(Demonstration {
            scene_id: tick.scenario.id.clone(),
            step: tick.t,
            ctx: tick.ctx.clone(),
            plan: plan.clone(),
        });
        self.state.update()?;
        Ok(PlanStep { plan, uncertainty: u, expert_query: true })
    }
}

/// One closed-loop episode that defers to the expert on uncertain ticks
/// and fine-tunes `ada`'s ensemble on the growing buffer.
pub fn adarip_episode(
    scenario: &Scenario,
    ada: &mut AdaRip,
    library: Option<&TrajectoryLibrary>,
    cfg: &RipConfig,
    episode: &EpisodeConfig,
) -> Result<EpisodeLog> {
    let expert = ExpertPolicy::from_arch(ada.posterior.arch());
    let mut policy = AdaRipPolicy { state: ada, library, cfg: *cfg, expert };
    run_episode(scenario, &mut policy, episode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub budget: usize,
    pub success_rate: f64,
    pub success_se: f64,
    pub queries: usize,
    /// Mean member NLL on the in-distribution check set, before and after.
    pub id_nll: Option<(f64, f64)>,
}

/// Settings for an adaptation sweep.
#[derive(Clone, Copy, Debug)]
pub struct CurveSettings<'a> {
    pub library: Option<&'a TrajectoryLibrary>,
    pub rip: RipConfig,
    pub episode: EpisodeConfig,
    pub trials: usize,
    pub seed: u64,
    pub id_check: Option<&'a [Demonstration]>,
}

fn mean_member_nll(p: &EnsemblePosterior, data: &[Demonstration]) -> Result<f64> {
    let mut total = 0.0;
    for m in p.members() {
        total += mean_nll(m, data)?;
    }
    Ok(total / p.len() as f64)
}

/// Success rate of AdaRIP for each query budget. Every budget starts from
/// its own copy of `posterior` and runs the same episodes in the same
/// order; the buffer persists across the episodes of one budget.
pub fn adaptation_curve(
    scenarios: &[Scenario],
    posterior: &EnsemblePosterior,
    config: &AdaptationConfig,
    budgets: &[usize],
    s: &CurveSettings,
) -> Result<Vec<CurvePoint>> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return contract("budgets must be sorted ascending");
    }
    config.validate()?;
    let results = par::map(budgets, |&budget| -> Result<CurvePoint> {
        let cfg = AdaptationConfig { query_budget: Some(budget), ..*config };
        let mut ada = AdaRip::new(posterior.clone(), cfg, s.seed)?;
        let mut success = Vec::with_capacity(scenarios.len() * s.trials);
        for (i, scn) in scenarios.iter().enumerate() {
            for j in 0..s.trials {
                let trial = scn.perturbed(s.seed, j as u64);
                let rip = RipConfig { seed: seeds::derive(s.seed, seeds::TRIAL, (i * s.trials + j) as u64), ..s.rip };
                let log = adarip_episode(&trial, &mut ada, s.library, &rip, &s.episode)?;
                success.push(if log.success { 1.0 } else { 0.0 });
            }
        }
        let id_nll = match s.id_check {
            Some(data) if !data.is_empty() => Some((mean_member_nll(posterior, data)?, mean_member_nll(&ada.posterior, data)?)),
            _ => None,
        };
        let n = success.len().max(1) as f64;
        Ok(CurvePoint {
            budget,
            success_rate: success.iter().sum::<f64>() / n,
            success_se: mean_se(&success, seeds::derive(s.seed, seeds::SAMPLE, budget as u64)),
            queries: ada.queries(),
            id_nll,
        })
    });
    results.into_iter().collect()
}

/// Least-squares slope of `y` against `x`; 0 when `x` is constant.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::WINDOW;
    use crate::world::{Infraction, InfractionKind};

    fn demo(i: usize) -> Demonstration {
        Demonstration {
            scene_id: format!("s{i}"),
            step: i,
            ctx: crate::density::SceneContext { past: vec![[0.0, 0.0]], scan: vec![1.0], goal: [1.0, 0.0] },
            plan: crate::density::Trajectory::new(vec![[i as f64, 0.0]], 0.25),
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = FeedbackBuffer::new(3);
        for i in 0..5 {
            b.push(demo(i));
            assert!(b.len() <= 3);
        }
        let steps: Vec<usize> = b.records().map(|d| d.step).collect();
        assert_eq!(steps, vec![2, 3, 4]);
    }

    fn episode_with_window(feature: f64, positive: bool) -> EpisodeLog {
        let infractions = if positive { vec![Infraction { t: WINDOW, kind: InfractionKind::Collision }] } else { vec![] };
        EpisodeLog {
            scene_id: "x".into(),
            states: vec![],
            infractions,
            uncertainty_trace: vec![feature; WINDOW],
            success: !positive,
            distance_driven: 10.0,
            expert_queries: 0,
        }
    }

    #[test]
    fn six_window_case() {
        let logs: Vec<EpisodeLog> = [(0.5, true), (0.8, true), (0.1, false), (0.2, false), (0.3, false), (0.4, false)]
            .iter()
            .map(|&(f, p)| episode_with_window(f, p))
            .collect();
        assert_eq!(calibrate_tau(&logs, 0.0).unwrap(), 0.5);
        assert_eq!(calibrate_tau(&logs, 0.5).unwrap(), 0.8);
        let none: Vec<EpisodeLog> = logs.into_iter().filter(|l| l.success).collect();
        assert!(matches!(calibrate_tau(&none, 0.1), Err(Error::Calibration(_))));
    }

    #[test]
    fn tau_respects_miss_rate() {
        let mut p: Vec<f64> = (1..=10).map(f64::from).collect();
        let tau = tau_from_positives(&mut p, 0.1).unwrap();
        let missed = p.iter().filter(|&&v| v < tau).count();
        assert_eq!(tau, 2.0);
        assert!(missed as f64 <= 0.1 * 10.0);
    }

    #[test]
    fn config_checks() {
        assert!(AdaptationConfig::new(f64::INFINITY).validate().is_ok());
        assert!(AdaptationConfig::new(-1.0).validate().is_err());
        assert!(AdaptationConfig { update_steps: 0, ..AdaptationConfig::new(1.0) }.validate().is_err());
    }

    #[test]
    fn slope() {
        assert_eq!(least_squares_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]), 2.0);
        assert_eq!(least_squares_slope(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }
}
