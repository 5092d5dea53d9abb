use rip_core::adaptation::{adarip_episode, AdaRip, AdaptationConfig};
use rip_core::bench::{evaluate, forecast, forecast_row, run_matrix, EvalSettings, Method, SuiteRun};
use rip_core::density::{mean_nll, Arch, Demonstration};
use rip_core::ensemble::{train_ensemble, EnsembleConfig, EnsemblePosterior};
use rip_core::planner::{build_library, Aggregator, PlanConfig, RipConfig};
use rip_core::world::{
    generate_demonstrations, generate_suite, run_episode, EpisodeConfig, ExpertPolicy, Suite,
};
use std::sync::OnceLock;

fn arch() -> Arch {
    Arch { hidden: 12, ..Arch::default() }
}

fn fixture() -> &'static (EnsemblePosterior, Vec<Demonstration>) {
    static F: OnceLock<(EnsemblePosterior, Vec<Demonstration>)> = OnceLock::new();
    F.get_or_init(|| {
        let data = generate_demonstrations(Suite::Train, 12, 21, &arch()).unwrap();
        let cfg = EnsembleConfig { k: 3, epochs: 6, seed: 21, ..EnsembleConfig::default() };
        (train_ensemble(&data, arch(), &cfg).unwrap().0, data)
    })
}

fn quick_plan() -> PlanConfig {
    PlanConfig { max_iters: 5, ..PlanConfig::default() }
}

fn rip_cfg() -> RipConfig {
    RipConfig { plan: quick_plan(), ..RipConfig::new(Aggregator::Wcm, 3) }
}

#[test]
fn training_reduces_nll_for_every_member() {
    let (post, data) = fixture();
    let held = generate_demonstrations(Suite::Train, 3, 99, &arch()).unwrap();
    for (k, m) in post.members().iter().enumerate() {
        let fresh = rip_core::density::DensityModel::init(arch(), k as u64).unwrap();
        assert!(mean_nll(m, data).unwrap() < mean_nll(&fresh, data).unwrap());
        assert!(mean_nll(m, &held).unwrap().is_finite());
    }
}

#[test]
fn disabled_adaptation_matches_plain_rip() {
    let (post, _) = fixture();
    let scn = generate_suite(Suite::Roundabout, 1, 5).unwrap().remove(0);
    let episode = EpisodeConfig::from_arch(post.arch());
    let mut ada = AdaRip::new(post.clone(), AdaptationConfig::new(f64::INFINITY), 1).unwrap();
    let log = adarip_episode(&scn, &mut ada, None, &rip_cfg(), &episode).unwrap();
    assert_eq!(log.expert_queries, 0);
    assert_eq!(&ada.posterior, post);
    assert!(ada.buffer.is_empty());
    let mut plain = rip_core::planner::RipPolicy { posterior: post, library: None, cfg: rip_cfg() };
    let reference = run_episode(&scn, &mut plain, &episode).unwrap();
    assert_eq!(log, reference);
}

#[test]
fn always_deferring_drives_like_the_expert() {
    let (post, _) = fixture();
    let scn = generate_suite(Suite::Abnormal, 1, 6).unwrap().remove(0);
    let episode = EpisodeConfig::from_arch(post.arch());
    let cfg = AdaptationConfig { update_steps: 1, ..AdaptationConfig::new(0.0) };
    let mut ada = AdaRip::new(post.clone(), cfg, 1).unwrap();
    let log = adarip_episode(&scn, &mut ada, None, &rip_cfg(), &episode).unwrap();
    let ticks = log.uncertainty_trace.len().div_ceil(episode.replan_every);
    let over_tau = log.uncertainty_trace.iter().step_by(episode.replan_every).filter(|&&u| u > 0.0).count();
    assert_eq!(log.expert_queries, over_tau);
    assert_eq!(log.expert_queries, ticks);
    let expert = run_episode(&scn, &mut ExpertPolicy::from_arch(post.arch()), &episode).unwrap();
    assert!(log.success && expert.success);
    assert_eq!(log.states.len(), expert.states.len());
    for (a, b) in log.states.iter().zip(&expert.states) {
        assert!((a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]) < 1e-9);
    }
    assert_eq!(ada.posterior.len(), post.len());
    assert_eq!(ada.posterior.arch(), post.arch());
    assert_ne!(&ada.posterior, post);
}

#[test]
fn an_update_raises_buffer_likelihood() {
    let (post, _) = fixture();
    let ood = generate_demonstrations(Suite::Roundabout, 1, 8, &arch()).unwrap();
    let mut ada = AdaRip::new(post.clone(), AdaptationConfig::new(0.0), 2).unwrap();
    for d in ood.iter().take(4) {
        ada.buffer.push(d.clone());
    }
    let buffered: Vec<Demonstration> = ada.buffer.records().cloned().collect();
    let mean_lp = |p: &EnsemblePosterior| -p.members().iter().map(|m| mean_nll(m, &buffered).unwrap()).sum::<f64>();
    let before = mean_lp(&ada.posterior);
    ada.update().unwrap();
    assert!(mean_lp(&ada.posterior) > before);
}

#[test]
fn query_budget_caps_queries() {
    let (post, _) = fixture();
    let scn = generate_suite(Suite::Abnormal, 1, 6).unwrap().remove(0);
    let episode = EpisodeConfig::from_arch(post.arch());
    let cfg = AdaptationConfig { query_budget: Some(2), update_steps: 1, ..AdaptationConfig::new(0.0) };
    let mut ada = AdaRip::new(post.clone(), cfg, 1).unwrap();
    let log = adarip_episode(&scn, &mut ada, None, &rip_cfg(), &episode).unwrap();
    assert_eq!(log.expert_queries, 2);
    assert_eq!(ada.queries(), 2);
    assert_eq!(ada.buffer.len(), 2);
}

#[test]
fn evaluation_is_reproducible_and_paired() {
    let (post, data) = fixture();
    let plans: Vec<_> = data.iter().map(|d| d.plan.clone()).collect();
    let library = build_library(&plans, 8, 1).unwrap();
    let suite = SuiteRun { name: "abnormal".into(), scenarios: generate_suite(Suite::Abnormal, 2, 3).unwrap() };
    let s = EvalSettings {
        posterior: post,
        library: Some(&library),
        episode: EpisodeConfig::from_arch(post.arch()),
        plan: quick_plan(),
        goal_tolerance: 1.0,
        trials: 2,
        seed: 3,
    };
    let methods = [Method::parse("rip-wcm").unwrap(), Method::baseline()];
    let (rows, logs) = run_matrix(&methods, std::slice::from_ref(&suite), &s);
    let (rows2, logs2) = run_matrix(&methods, std::slice::from_ref(&suite), &s);
    assert_eq!(rows, rows2);
    assert_eq!(logs, logs2);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.trials == 4));
    let wcm = evaluate(&methods[0], &suite, &s);
    let dim = evaluate(&methods[1], &suite, &s);
    for (a, b) in wcm.iter().zip(&dim) {
        assert_eq!(a.scene_id, b.scene_id);
        assert_eq!(a.states[0], b.states[0]);
    }
    // The baseline compared with itself recovers nothing.
    assert!(rows[1].recovery_score.is_none_or(|r| r == 0.0));
}

#[test]
fn forecasts_rank_candidates() {
    let (post, _) = fixture();
    let held = generate_demonstrations(Suite::Train, 1, 40, &arch()).unwrap();
    let recs = forecast(&held[..3], post, Aggregator::Ma, 7, 4).unwrap();
    assert_eq!(recs, forecast(&held[..3], post, Aggregator::Ma, 7, 4).unwrap());
    for r in &recs {
        assert_eq!(r.candidates.len(), 7);
        let agg: Vec<f64> = r
            .candidates
            .iter()
            .map(|c| {
                let lps = post.member_log_probs(c, &r.ctx).unwrap();
                rip_core::planner::aggregate(&lps, post.weights(), Aggregator::Ma).unwrap()
            })
            .collect();
        assert!(agg.windows(2).all(|w| w[0] >= w[1]));
    }
    let row = forecast_row("rip-ma", "train", &recs).unwrap();
    assert!(row.mean_min_ade5.unwrap() <= row.mean_min_ade1.unwrap());
    assert!(row.success_rate.is_none());
}
