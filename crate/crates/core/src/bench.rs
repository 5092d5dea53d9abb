//! Metrics and experiment orchestration.

use crate::density::{Demonstration, SceneContext, Trajectory};
use crate::ensemble::EnsemblePosterior;
use crate::error::{contract, Error, Result};
use crate::planner::{aggregate, Aggregator, RipConfig, RipPolicy, TrajectoryLibrary};
use crate::world::{run_episode, EpisodeConfig, EpisodeLog, Infraction, InfractionKind, Scenario};
use crate::{par, seeds};
use rand::Rng;
use std::fmt::Write as _;

fn check_same_len(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return contract(format!("trajectory lengths {} and {} differ or are zero", a.len(), b.len()));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Average displacement error.
pub fn ade(y: &Trajectory, y_star: &Trajectory) -> Result<f64> {
    check_same_len(y, y_star)?;
    Ok(y.states.iter().zip(&y_star.states).map(|(a, b)| dist(*a, *b)).sum::<f64>() / y.len() as f64)
}

/// Smallest ADE over the first `k` candidates.
pub fn min_ade_k(candidates: &[Trajectory], y_star: &Trajectory, k: usize) -> Result<f64> {
    if k == 0 || k > candidates.len() {
        return contract(format!("k={k} with {} candidates", candidates.len()));
    }
    let mut best = f64::INFINITY;
    for c in &candidates[..k] {
        best = best.min(ade(c, y_star)?);
    }
    Ok(best)
}

/// Final displacement error.
pub fn min_fde(y: &Trajectory, y_star: &Trajectory) -> Result<f64> {
    check_same_len(y, y_star)?;
    Ok(dist(y.last(), y_star.last()))
}

pub const WINDOW: usize = 16;
pub const STRIDE: usize = 4;

/// A labelled span of an episode's uncertainty trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    /// Maximum epistemic variance over the span.
    pub feature: f64,
    /// The span ends at an off-lane or collision infraction.
    pub positive: bool,
}

fn window_max(trace: &[f64]) -> f64 {
    trace.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Windows of one episode: the `WINDOW` steps up to an accident (if any)
/// are positive; full windows on a `STRIDE` grid that end before the
/// positive one starts are negative.
pub fn episode_windows(log: &EpisodeLog) -> Vec<Window> {
    let trace = &log.uncertainty_trace;
    let accident = log
        .infractions
        .iter()
        .find(|i| matches!(i.kind, InfractionKind::OffLane | InfractionKind::Collision))
        .map(|i| i.t.min(trace.len()));
    let mut out = Vec::new();
    let negative_end = match accident {
        Some(t) if t > 0 => {
            let start = t.saturating_sub(WINDOW);
            out.push(Window { feature: window_max(&trace[start..t]), positive: true });
            start
        }
        Some(_) => 0,
        None => trace.len(),
    };
    let mut a = 0;
    while a + WINDOW <= negative_end {
        out.push(Window { feature: window_max(&trace[a..a + WINDOW]), positive: false });
        a += STRIDE;
    }
    out
}

pub fn labelled_windows(logs: &[EpisodeLog]) -> Vec<Window> {
    logs.iter().flat_map(episode_windows).collect()
}

/// Area under the ROC curve of `scores` for `labels`; ties count half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedScore("AUROC needs both classes".into()));
    }
    let mut sorted_neg = neg.clone();
    sorted_neg.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for p in &pos {
        let below = sorted_neg.partition_point(|n| n < p);
        let tied = sorted_neg.partition_point(|n| n <= p) - below;
        total += below as f64 + 0.5 * tied as f64;
    }
    Ok(total / (pos.len() * neg.len()) as f64)
}

/// Pearson correlation of `scores` with the 0/1 labels; 0 when either is
/// constant.
pub fn point_biserial(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len() as f64;
    let ys: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mx = scores.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in scores.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// `(AUROC, point-biserial correlation)` of pre-accident window variance.
pub fn detection_score(logs: &[EpisodeLog]) -> Result<(f64, f64)> {
    let windows = labelled_windows(logs);
    let scores: Vec<f64> = windows.iter().map(|w| w.feature).collect();
    let labels: Vec<bool> = windows.iter().map(|w| w.positive).collect();
    Ok((auroc(&scores, &labels)?, point_biserial(&scores, &labels)))
}

/// Share of baseline failures the method completed; `None` when the
/// baseline never failed.
pub fn recovery_score(method_logs: &[EpisodeLog], baseline_logs: &[EpisodeLog]) -> Result<Option<f64>> {
    if method_logs.len() != baseline_logs.len() {
        return contract("method and baseline logs are not aligned");
    }
    let mut failed = 0;
    let mut recovered = 0;
    for (m, b) in method_logs.iter().zip(baseline_logs) {
        if m.scene_id != b.scene_id {
            return contract(format!("scene {} paired with {}", m.scene_id, b.scene_id));
        }
        if !b.success {
            failed += 1;
            if m.success {
                recovered += 1;
            }
        }
    }
    Ok((failed > 0).then(|| recovered as f64 / failed as f64))
}

/// Pooled infraction count per driven kilometre.
pub fn infractions_per_km(logs: &[EpisodeLog]) -> Result<f64> {
    let count: usize = logs.iter().map(|l| l.infractions.len()).sum();
    let km: f64 = logs.iter().map(|l| l.distance_driven).sum::<f64>() / 1000.0;
    if !(km > 0.0) {
        return contract("no distance driven");
    }
    Ok(count as f64 / km)
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Bootstrap standard error of `stat` over resamples of `n` items.
pub fn bootstrap_se(n: usize, resamples: usize, seed: u64, stat: impl Fn(&[usize]) -> Option<f64>) -> f64 {
    if n == 0 || resamples < 2 {
        return 0.0;
    }
    let mut rng = seeds::rng(seed);
    let mut idx = vec![0; n];
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        if let Some(v) = stat(&idx) {
            values.push(v);
        }
    }
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Bootstrap standard error of the mean of `values`.
pub fn mean_se(values: &[f64], seed: u64) -> f64 {
    bootstrap_se(values.len(), BOOTSTRAP_RESAMPLES, seed, |idx| {
        Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
}

/// A planner under evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Method {
    pub name: String,
    pub agg: Aggregator,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self { name: name.to_string(), agg: name.parse()? })
    }

    /// Uncertainty-unaware baseline: member 0 alone.
    pub fn baseline() -> Self {
        Self { name: "dim".into(), agg: Aggregator::SampleK(0) }
    }
}

/// One `(method, suite)` cell of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub suite: String,
    pub trials: usize,
    pub success_rate: Option<f64>,
    pub success_se: Option<f64>,
    pub infractions_per_km: Option<f64>,
    pub infra_se: Option<f64>,
    pub detection_auroc: Option<f64>,
    pub detection_corr: Option<f64>,
    pub recovery_score: Option<f64>,
    pub mean_min_ade1: Option<f64>,
    pub mean_min_ade5: Option<f64>,
    pub mean_min_fde1: Option<f64>,
}

impl ResultRow {
    fn empty(method: &str, suite: &str, trials: usize) -> Self {
        Self {
            method: method.into(),
            suite: suite.into(),
            trials,
            success_rate: None,
            success_se: None,
            infractions_per_km: None,
            infra_se: None,
            detection_auroc: None,
            detection_corr: None,
            recovery_score: None,
            mean_min_ade1: None,
            mean_min_ade5: None,
            mean_min_fde1: None,
        }
    }
}

pub const CSV_HEADER: &str = "method,suite,trials,success_rate,success_se,infractions_per_km,infra_se,detection_auroc,detection_corr,recovery_score,mean_min_ade1,mean_min_ade5,mean_min_fde1";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.suite,
            r.trials,
            cell(r.success_rate),
            cell(r.success_se),
            cell(r.infractions_per_km),
            cell(r.infra_se),
            cell(r.detection_auroc),
            cell(r.detection_corr),
            cell(r.recovery_score),
            cell(r.mean_min_ade1),
            cell(r.mean_min_ade5),
            cell(r.mean_min_fde1),
        );
    }
    out
}

/// A named list of scenarios.
#[derive(Clone, Debug)]
pub struct SuiteRun {
    pub name: String,
    pub scenarios: Vec<Scenario>,
}

/// Shared settings for closed-loop evaluation.
#[derive(Clone, Copy, Debug)]
pub struct EvalSettings<'a> {
    pub posterior: &'a EnsemblePosterior,
    pub library: Option<&'a TrajectoryLibrary>,
    pub episode: EpisodeConfig,
    pub plan: crate::planner::PlanConfig,
    pub goal_tolerance: f64,
    pub trials: usize,
    pub seed: u64,
}

/// Episode that failed to run is scored as a timeout at step 0.
fn failed_log(scene_id: &str) -> EpisodeLog {
    EpisodeLog {
        scene_id: scene_id.to_string(),
        states: Vec::new(),
        infractions: vec![Infraction { t: 0, kind: InfractionKind::Timeout }],
        uncertainty_trace: Vec::new(),
        success: false,
        distance_driven: 0.0,
        expert_queries: 0,
    }
}

/// Runs `method` on every `(scenario, trial)` pair; trial `j` of a scenario
/// uses the same perturbed start for every method.
pub fn evaluate(method: &Method, suite: &SuiteRun, s: &EvalSettings) -> Vec<EpisodeLog> {
    let cells: Vec<(usize, usize)> =
        (0..suite.scenarios.len()).flat_map(|i| (0..s.trials).map(move |j| (i, j))).collect();
    par::map(&cells, |&(i, j)| {
        let scn = suite.scenarios[i].perturbed(s.seed, j as u64);
        let cfg = RipConfig {
            agg: method.agg,
            plan: s.plan,
            goal_tolerance: s.goal_tolerance,
            seed: seeds::derive(s.seed, seeds::TRIAL, (i * s.trials + j) as u64),
        };
        let mut policy = RipPolicy { posterior: s.posterior, library: s.library, cfg };
        run_episode(&scn, &mut policy, &s.episode).unwrap_or_else(|_| failed_log(&scn.id))
    })
}

/// Summary row for one method's logs on one suite.
pub fn summarize(method: &str, suite: &str, logs: &[EpisodeLog], baseline: &[EpisodeLog], seed: u64) -> ResultRow {
    let mut row = ResultRow::empty(method, suite, logs.len());
    if logs.is_empty() {
        return row;
    }
    let success: Vec<f64> = logs.iter().map(|l| if l.success { 1.0 } else { 0.0 }).collect();
    row.success_rate = Some(success.iter().sum::<f64>() / success.len() as f64);
    row.success_se = Some(mean_se(&success, seeds::derive(seed, seeds::SAMPLE, 0)));
    row.infractions_per_km = infractions_per_km(logs).ok();
    if row.infractions_per_km.is_some() {
        row.infra_se = Some(bootstrap_se(logs.len(), BOOTSTRAP_RESAMPLES, seeds::derive(seed, seeds::SAMPLE, 1), |idx| {
            let picked: Vec<EpisodeLog> = idx.iter().map(|&i| logs[i].clone()).collect();
            infractions_per_km(&picked).ok()
        }));
    }
    if let Ok((a, c)) = detection_score(logs) {
        row.detection_auroc = Some(a);
        row.detection_corr = Some(c);
    }
    row.recovery_score = recovery_score(logs, baseline).ok().flatten();
    row
}

/// Every method on every suite with paired trial seeds, plus the
/// baseline needed for the recovery score. Rows are ordered by method,
/// then suite.
pub fn run_matrix(methods: &[Method], suites: &[SuiteRun], s: &EvalSettings) -> (Vec<ResultRow>, Vec<EpisodeLog>) {
    let baseline = Method::baseline();
    let mut rows = Vec::new();
    let mut all_logs = Vec::new();
    let baseline_logs: Vec<Vec<EpisodeLog>> = suites
        .iter()
        .map(|suite| if methods.contains(&baseline) { Vec::new() } else { evaluate(&baseline, suite, s) })
        .collect();
    let mut per_method: Vec<Vec<Vec<EpisodeLog>>> = Vec::new();
    for m in methods {
        per_method.push(suites.iter().map(|suite| evaluate(m, suite, s)).collect());
    }
    let base_index = methods.iter().position(|m| *m == baseline);
    for (mi, m) in methods.iter().enumerate() {
        for (si, suite) in suites.iter().enumerate() {
            let logs = &per_method[mi][si];
            let base = match base_index {
                Some(b) => &per_method[b][si],
                None => &baseline_logs[si],
            };
            let seed = seeds::derive(s.seed, seeds::SAMPLE, (mi * suites.len() + si) as u64);
            rows.push(summarize(&m.name, &suite.name, logs, base, seed));
            all_logs.extend(logs.iter().cloned());
        }
    }
    (rows, all_logs)
}

/// Ground truth and ranked candidate plans for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRecord {
    pub ctx: SceneContext,
    pub ground_truth: Trajectory,
    pub candidates: Vec<Trajectory>,
}

pub const DEFAULT_SAMPLES: usize = 50;

/// Draws `samples` trajectories round-robin from the members and orders
/// them by aggregated prior log-likelihood, best first (stable).
pub fn forecast_candidates(
    ctx: &SceneContext,
    posterior: &EnsemblePosterior,
    agg: Aggregator,
    samples: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if samples == 0 {
        return contract("samples must be at least 1");
    }
    let k = posterior.len();
    let mut scored = Vec::with_capacity(samples);
    for i in 0..samples {
        let y = posterior.members()[i % k].sample(ctx, seeds::derive(seed, seeds::SAMPLE, i as u64))?;
        let lps = posterior.member_log_probs(&y, ctx)?;
        scored.push((aggregate(&lps, posterior.weights(), agg)?, y));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, y)| y).collect())
}

/// Forecast records for `data`; record `i` uses seed stream `i`.
pub fn forecast(
    data: &[Demonstration],
    posterior: &EnsemblePosterior,
    agg: Aggregator,
    samples: usize,
    seed: u64,
) -> Result<Vec<ForecastRecord>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    par::map(&idx, |&i| {
        let d = &data[i];
        Ok(ForecastRecord {
            ctx: d.ctx.clone(),
            ground_truth: d.plan.clone(),
            candidates: forecast_candidates(&d.ctx, posterior, agg, samples, seeds::derive(seed, seeds::MEMBER, i as u64))?,
        })
    })
    .into_iter()
    .collect()
}

/// Row with only the forecasting columns filled.
pub fn forecast_row(method: &str, suite: &str, records: &[ForecastRecord]) -> Result<ResultRow> {
    let mut row = ResultRow::empty(method, suite, records.len());
    if records.is_empty() {
        return Ok(row);
    }
    let n = records.len() as f64;
    let (mut a1, mut a5, mut f1) = (0.0, 0.0, 0.0);
    for r in records {
        a1 += min_ade_k(&r.candidates, &r.ground_truth, 1)?;
        a5 += min_ade_k(&r.candidates, &r.ground_truth, 5.min(r.candidates.len()))?;
        f1 += min_fde(&r.candidates[0], &r.ground_truth)?;
    }
    row.mean_min_ade1 = Some(a1 / n);
    row.mean_min_ade5 = Some(a5 / n);
    row.mean_min_fde1 = Some(f1 / n);
    Ok(row)
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(states: Vec<[f64; 2]>) -> Trajectory {
        Trajectory::new(states, 0.25)
    }

    #[test]
    fn displacement_errors() {
        let a = traj(vec![[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b = traj(vec![[1.0, 0.0], [2.0, 1.0]]);
        assert_eq!(ade(&a, &b).unwrap(), 1.0);
        let c = traj(vec![[3.0, 4.0], [1.0, 1.0]]);
        assert_eq!(ade(&c, &a).unwrap(), 2.5);
        assert!(ade(&a, &traj(vec![[0.0, 0.0]])).is_err());
        assert_eq!(min_fde(&a, &a).unwrap(), 0.0);
        let d = traj(vec![[9.0, 9.0], [4.0, 5.0]]);
        assert_eq!(min_fde(&d, &a).unwrap(), 5.0);
    }

    #[test]
    fn min_ade_enumerates() {
        let gt = traj(vec![[0.0, 0.0]; 2]);
        let c = vec![traj(vec![[2.0, 0.0]; 2]), traj(vec![[0.0, 0.5]; 2])];
        assert_eq!(min_ade_k(&c, &gt, 2).unwrap(), 0.5);
        assert_eq!(min_ade_k(&c, &gt, 1).unwrap(), ade(&c[0], &gt).unwrap());
        assert!(min_ade_k(&c, &gt, 0).is_err());
        assert!(min_ade_k(&c, &gt, 3).is_err());
    }

    fn log(id: &str, trace: Vec<f64>, infraction: Option<(usize, InfractionKind)>, success: bool, dist: f64) -> EpisodeLog {
        EpisodeLog {
            scene_id: id.into(),
            states: Vec::new(),
            infractions: infraction.map(|(t, kind)| vec![Infraction { t, kind }]).unwrap_or_default(),
            uncertainty_trace: trace,
            success,
            distance_driven: dist,
            expert_queries: 0,
        }
    }

    #[test]
    fn windows_anchor_at_accidents() {
        let mut trace = vec![0.1; 40];
        trace[39] = 5.0;
        let w = episode_windows(&log("a", trace, Some((40, InfractionKind::OffLane)), false, 100.0));
        assert_eq!(w[0], Window { feature: 5.0, positive: true });
        // Negatives must end by step 24: starts 0, 4, 8.
        assert_eq!(w.len(), 4);
        assert!(w[1..].iter().all(|x| !x.positive && x.feature == 0.1));
        let w = episode_windows(&log("b", vec![0.2; 20], None, true, 10.0));
        assert_eq!(w.len(), 2);
        let w = episode_windows(&log("c", vec![0.2; 20], Some((20, InfractionKind::Timeout)), false, 10.0));
        assert!(w.iter().all(|x| !x.positive));
    }

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.8, 0.1, 0.3], &[true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(point_biserial(&[1.0; 4], &[true, false, true, false]), 0.0);
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
        assert!((point_biserial(&[1.0, 0.0], &[true, false]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_cases() {
        let mk = |ok: [bool; 4]| -> Vec<EpisodeLog> {
            ["A", "B", "C", "D"].iter().zip(ok).map(|(id, s)| log(id, vec![], None, s, 1.0)).collect()
        };
        let base = mk([false, false, false, true]);
        assert_eq!(recovery_score(&mk([true, false, true, true]), &base).unwrap(), Some(2.0 / 3.0));
        assert_eq!(recovery_score(&base, &base).unwrap(), Some(0.0));
        assert_eq!(recovery_score(&mk([true; 4]), &base).unwrap(), Some(1.0));
        assert_eq!(recovery_score(&base, &mk([true; 4])).unwrap(), None);
        assert!(recovery_score(&base[..2], &base).is_err());
    }

    #[test]
    fn infraction_rates_pool() {
        let a = log("a", vec![], Some((3, InfractionKind::OffLane)), false, 100.0);
        let b = log("b", vec![], Some((3, InfractionKind::Collision)), false, 400.0);
        assert_eq!(infractions_per_km(&[a.clone(), b.clone()]).unwrap(), 4.0);
        let c = log("c", vec![], None, true, 900.0);
        // Pooled: 1 / 1.0 km, not the mean of 10/km and 0/km.
        assert_eq!(infractions_per_km(&[a.clone(), c.clone()]).unwrap(), 1.0);
        assert_eq!(infractions_per_km(&[c]).unwrap(), 0.0);
        assert!(infractions_per_km(&[log("z", vec![], None, true, 0.0)]).is_err());
    }

    #[test]
    fn bootstrap_of_constant_is_zero() {
        assert!(mean_se(&[0.7; 25], 3) < 1e-12);
        assert!(mean_se(&[0.0, 1.0, 0.0, 1.0, 1.0], 3) > 0.0);
    }

    #[test]
    fn csv_layout() {
        let mut r = ResultRow::empty("rip-wcm", "roundabout", 10);
        r.success_rate = Some(0.5);
        let csv = to_csv(&[r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "rip-wcm,roundabout,10,0.500000,NA,NA,NA,NA,NA,NA,NA,NA,NA");
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(0, 0), 1.0);
        assert!((sign_test_p(4, 0) - 0.0625).abs() < 1e-15);
        assert!((sign_test_p(5, 1) - 7.0 / 64.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 3), 1.0);
    }
}
