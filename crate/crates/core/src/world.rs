//! Planar driving world.
//!
//! Roads are tubes of constant half-width around a polyline centerline,
//! built from straight and circular-arc pieces. The vehicle is a unicycle
//! whose heading rate and acceleration are clipped; a pure-pursuit expert
//! follows the centerline at cruise speed. Policies return ego-frame plans
//! that are executed open loop for a few steps through the inverse-dynamics
//! controller before the next replan.

use crate::density::{Arch, Demonstration, Point, SceneContext, Trajectory};
use crate::error::{contract, Error, Result};
use crate::seeds;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub const V_MAX: f64 = 8.0;
pub const OMEGA_MAX: f64 = 1.5;
pub const A_MAX: f64 = 4.0;
pub const LOOKAHEAD: f64 = 4.0;
pub const CRUISE: f64 = 5.0;
pub const VEHICLE_RADIUS: f64 = 1.0;
/// Arc length from the ego's projection to the local goal waypoint; the
/// distance the expert covers over one planning horizon.
pub const GOAL_LOOKAHEAD: f64 = 20.0;
pub const DEFAULT_REPLAN_EVERY: usize = 4;
pub const DEFAULT_GOAL_TOLERANCE: f64 = 1.0;

const LEAD_IN: f64 = 15.0;
const RUN_OUT: f64 = 30.0;
const ARC_CHORD: f64 = 0.5;
const RAY_STEP: f64 = 0.25;

fn wrap(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Point,
    pub heading: f64,
    pub speed: f64,
}

impl EgoState {
    /// World point expressed in this state's frame (+x along heading).
    pub fn to_ego(&self, p: Point) -> Point {
        let d = sub(p, self.position);
        let (s, c) = self.heading.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
    }

    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.heading.sin_cos();
        [self.position[0] + c * p[0] - s * p[1], self.position[1] + s * p[0] + c * p[1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub target_speed: f64,
    pub target_heading: f64,
}

/// Controller action that drives `s` to `next` over `dt`.
pub fn inverse_dynamics(s: &EgoState, next: Point, dt: f64) -> Action {
    let d = sub(next, s.position);
    let dist = norm(d);
    if dist == 0.0 {
        return Action { target_speed: 0.0, target_heading: s.heading };
    }
    Action { target_speed: (dist / dt).clamp(0.0, V_MAX), target_heading: d[1].atan2(d[0]) }
}

/// Clipped unicycle transition.
pub fn step(s: &EgoState, a: &Action, dt: f64) -> EgoState {
    let max_turn = OMEGA_MAX * dt;
    let heading = wrap(s.heading + wrap(a.target_heading - s.heading).clamp(-max_turn, max_turn));
    let max_dv = A_MAX * dt;
    let speed = (s.speed + (a.target_speed.clamp(0.0, V_MAX) - s.speed).clamp(-max_dv, max_dv)).clamp(0.0, V_MAX);
    let (sn, cs) = heading.sin_cos();
    EgoState { position: [s.position[0] + speed * dt * cs, s.position[1] + speed * dt * sn], heading, speed }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SuiteTag {
    Straight,
    RightAngle,
    /// Heading change at the corner, degrees.
    AbnormalTurn(f64),
    /// Ring radius, metres.
    Roundabout(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest centerline point.
    pub s: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoadMapFile", into = "RoadMapFile")]
pub struct RoadMap {
    centerline: Vec<Point>,
    cumulative: Vec<f64>,
    pub lane_half_width: f64,
    pub obstacles: Vec<Obstacle>,
    pub suite_tag: SuiteTag,
}

#[derive(Clone, Serialize, Deserialize)]
struct RoadMapFile {
    centerline: Vec<Point>,
    lane_half_width: f64,
    obstacles: Vec<Obstacle>,
    suite_tag: SuiteTag,
}

impl TryFrom<RoadMapFile> for RoadMap {
    type Error = Error;

    fn try_from(f: RoadMapFile) -> Result<Self> {
        RoadMap::new(f.centerline, f.lane_half_width, f.obstacles, f.suite_tag)
    }
}

impl From<RoadMap> for RoadMapFile {
    fn from(m: RoadMap) -> Self {
        RoadMapFile { centerline: m.centerline, lane_half_width: m.lane_half_width, obstacles: m.obstacles, suite_tag: m.suite_tag }
    }
}

impl RoadMap {
    pub fn new(centerline: Vec<Point>, lane_half_width: f64, obstacles: Vec<Obstacle>, suite_tag: SuiteTag) -> Result<Self> {
        if centerline.len() < 2 {
            return contract("centerline needs at least two points");
        }
        if !(lane_half_width > 0.0) {
            return contract("lane_half_width must be positive");
        }
        let mut cumulative = vec![0.0];
        for w in centerline.windows(2) {
            let d = norm(sub(w[1], w[0]));
            if d == 0.0 {
                return contract("consecutive centerline points coincide");
            }
            cumulative.push(cumulative.last().expect("non-empty") + d);
        }
        Ok(Self { centerline, cumulative, lane_half_width, obstacles, suite_tag })
    }

    pub fn centerline(&self) -> &[Point] {
        &self.centerline
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    /// Closest centerline point; ties go to the earlier segment.
    pub fn project(&self, p: Point) -> Projection {
        let mut best = Projection { s: 0.0, distance: f64::INFINITY };
        for (i, w) in self.centerline.windows(2).enumerate() {
            let seg = sub(w[1], w[0]);
            let len2 = seg[0] * seg[0] + seg[1] * seg[1];
            let rel = sub(p, w[0]);
            let u = ((rel[0] * seg[0] + rel[1] * seg[1]) / len2).clamp(0.0, 1.0);
            let d = norm([rel[0] - u * seg[0], rel[1] - u * seg[1]]);
            if d < best.distance {
                best = Projection { s: self.cumulative[i] + u * (self.cumulative[i + 1] - self.cumulative[i]), distance: d };
            }
        }
        best
    }

    pub fn lateral_deviation(&self, p: Point) -> f64 {
        self.project(p).distance
    }

    /// Centerline point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.centerline.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.centerline.len() - 2),
        };
        let (a, b) = (self.centerline[i], self.centerline[i + 1]);
        let u = (s - self.cumulative[i]) / (self.cumulative[i + 1] - self.cumulative[i]);
        [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
    }

    fn in_lane(&self, p: Point) -> bool {
        self.lateral_deviation(p) <= self.lane_half_width
    }

    pub fn collides(&self, p: Point) -> bool {
        self.obstacles.iter().any(|o| norm(sub(p, o.center)) < o.radius + VEHICLE_RADIUS)
    }

    /// Distance along a ray to the first lane boundary or obstacle, capped
    /// at `max_range`.
    pub fn raycast(&self, origin: Point, bearing: f64, max_range: f64) -> f64 {
        let dir = [bearing.cos(), bearing.sin()];
        let at = |t: f64| [origin[0] + t * dir[0], origin[1] + t * dir[1]];
        let mut hit = max_range;
        for o in &self.obstacles {
            let rel = sub(origin, o.center);
            let b = rel[0] * dir[0] + rel[1] * dir[1];
            let c = rel[0] * rel[0] + rel[1] * rel[1] - o.radius * o.radius;
            if c <= 0.0 {
                return 0.0;
            }
            let disc = b * b - c;
            if disc >= 0.0 {
                let t = -b - disc.sqrt();
                if t >= 0.0 && t < hit {
                    hit = t;
                }
            }
        }
        if !self.in_lane(origin) {
            return 0.0;
        }
        let mut inside = 0.0;
        let mut t = RAY_STEP;
        while inside < hit {
            let probe = t.min(hit);
            if !self.in_lane(at(probe)) {
                let mut outside = probe;
                for _ in 0..40 {
                    let mid = 0.5 * (inside + outside);
                    if self.in_lane(at(mid)) {
                        inside = mid;
                    } else {
                        outside = mid;
                    }
                }
                return inside.min(hit);
            }
            inside = probe;
            t += RAY_STEP;
        }
        hit
    }

    /// Same scene under the rigid motion `p ↦ R(angle) p + shift`.
    pub fn transformed(&self, angle: f64, shift: Point) -> RoadMap {
        let f = |p: Point| rigid(p, angle, shift);
        RoadMap {
            centerline: self.centerline.iter().map(|&p| f(p)).collect(),
            cumulative: self.cumulative.clone(),
            lane_half_width: self.lane_half_width,
            obstacles: self.obstacles.iter().map(|o| Obstacle { center: f(o.center), radius: o.radius }).collect(),
            suite_tag: self.suite_tag,
        }
    }
}

pub fn rigid(p: Point, angle: f64, shift: Point) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]]
}

/// Centerline construction by straight and arc pieces.
struct PathBuilder {
    points: Vec<Point>,
    heading: f64,
    centers: Vec<Point>,
}

impl PathBuilder {
    fn new() -> Self {
        Self { points: vec![[0.0, 0.0]], heading: PI / 2.0, centers: Vec::new() }
    }

    fn pos(&self) -> Point {
        *self.points.last().expect("non-empty")
    }

    fn line(&mut self, len: f64) -> &mut Self {
        let p = self.pos();
        self.points.push([p[0] + len * self.heading.cos(), p[1] + len * self.heading.sin()]);
        self
    }

    /// Positive `angle` turns left.
    fn arc(&mut self, radius: f64, angle: f64) -> &mut Self {
        let side = angle.signum();
        let p = self.pos();
        let center = [p[0] - side * radius * self.heading.sin(), p[1] + side * radius * self.heading.cos()];
        self.centers.push(center);
        let start = (p[1] - center[1]).atan2(p[0] - center[0]);
        let n = ((angle.abs() * radius) / ARC_CHORD).ceil().max(1.0) as usize;
        for i in 1..=n {
            let a = start + angle * i as f64 / n as f64;
            self.points.push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
        }
        self.heading = wrap(self.heading + angle);
        self
    }
}

/// One episode's map, start and destination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub map: RoadMap,
    pub start: EgoState,
    pub destination: Point,
    /// Arc length of the destination along the centerline.
    pub destination_s: f64,
}

impl Scenario {
    /// World-frame goal waypoint a fixed arc length ahead of `p`.
    pub fn local_goal(&self, p: Point) -> Point {
        let s = self.map.project(p).s;
        self.map.point_at(s + GOAL_LOOKAHEAD)
    }

    /// Step budget: twice the cruise-speed travel time plus slack.
    pub fn default_max_steps(&self, dt: f64) -> usize {
        let route = self.destination_s - self.map.project(self.start.position).s;
        (2.0 * route / (CRUISE * dt)).ceil() as usize + 16
    }

    /// Randomised initial state for trial `trial`: small lateral and
    /// heading offsets from the nominal start.
    pub fn perturbed(&self, seed: u64, trial: u64) -> Scenario {
        let mut rng = seeds::rng(seeds::derive(seed, seeds::TRIAL, trial));
        let lateral = rng.random_range(-0.5..0.5);
        let dh = rng.random_range(-0.1..0.1);
        let mut out = self.clone();
        let h = self.start.heading;
        out.start.position = [self.start.position[0] - lateral * h.sin(), self.start.position[1] + lateral * h.cos()];
        out.start.heading = wrap(h + dh);
        out.id = format!("{}#{trial}", self.id);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Suite {
    Train,
    Abnormal,
    Roundabout,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Train => "train",
            Suite::Abnormal => "abnormal",
            Suite::Roundabout => "roundabout",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Suite::Train),
            "abnormal" => Ok(Suite::Abnormal),
            "roundabout" => Ok(Suite::Roundabout),
            _ => Err(Error::Contract(format!("unknown suite `{s}`"))),
        }
    }
}

pub const ABNORMAL_ANGLES: [f64; 5] = [30.0, 45.0, 60.0, 120.0, 135.0];

/// Points farther apart than this along the route must not share road.
const SELF_CLEARANCE_ARC: f64 = 40.0;

fn self_clear(points: &[Point], hw: f64) -> bool {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().expect("non-empty") + norm(sub(w[1], w[0])));
    }
    // Long straight pieces are only two points; densify before checking.
    let mut dense: Vec<(Point, f64)> = Vec::new();
    for (i, w) in points.windows(2).enumerate() {
        let n = ((cum[i + 1] - cum[i]) / 1.0).ceil().max(1.0) as usize;
        for j in 0..n {
            let u = j as f64 / n as f64;
            dense.push(([w[0][0] + u * (w[1][0] - w[0][0]), w[0][1] + u * (w[1][1] - w[0][1])], cum[i] + u * (cum[i + 1] - cum[i])));
        }
    }
    for (i, (p, s)) in dense.iter().enumerate() {
        for (q, t) in &dense[i + 1..] {
            if t - s > SELF_CLEARANCE_ARC && norm(sub(*p, *q)) < 2.0 * hw + 1.0 {
                return false;
            }
        }
    }
    true
}

fn build_scenario(suite: Suite, id: String, rng: &mut impl Rng) -> Scenario {
    loop {
        let hw = rng.random_range(2.5..3.5);
        let mut b = PathBuilder::new();
        b.line(LEAD_IN);
        let mut obstacles = Vec::new();
        let tag = match suite {
            Suite::Train => {
                if rng.random_range(0..3) == 0 {
                    b.line(rng.random_range(35.0..55.0));
                    SuiteTag::Straight
                } else {
                    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    b.line(rng.random_range(10.0..25.0)).arc(rng.random_range(5.0..8.0), side * PI / 2.0);
                    b.line(rng.random_range(12.0..25.0));
                    SuiteTag::RightAngle
                }
            }
            Suite::Abnormal => {
                let angle = *ABNORMAL_ANGLES.choose(rng).expect("non-empty");
                let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
                b.line(rng.random_range(8.0..15.0)).arc(rng.random_range(5.0..8.0), side * angle.to_radians());
                b.line(rng.random_range(12.0..20.0));
                SuiteTag::AbnormalTurn(angle)
            }
            Suite::Roundabout => {
                let radius = rng.random_range(8.0..15.0);
                let sweep: f64 = *[135.0f64, 180.0, 225.0].choose(rng).expect("non-empty");
                let entry = rng.random_range(15.0f64..40.0).to_radians();
                b.line(rng.random_range(8.0..12.0)).arc(6.0, -entry).arc(radius, sweep.to_radians() + 2.0 * entry);
                let center = *b.centers.last().expect("ring arc");
                b.arc(6.0, -entry).line(rng.random_range(10.0..15.0));
                obstacles.push(Obstacle { center, radius: radius - hw - 0.5 });
                SuiteTag::Roundabout(radius)
            }
        };
        b.line(RUN_OUT);
        if !self_clear(&b.points, hw) {
            continue;
        }
        let map = RoadMap::new(b.points, hw, obstacles, tag).expect("builder emits valid maps");
        let destination_s = map.length() - RUN_OUT;
        return Scenario {
            id,
            start: EgoState { position: map.point_at(LEAD_IN), heading: PI / 2.0, speed: CRUISE },
            destination: map.point_at(destination_s),
            destination_s,
            map,
        };
    }
}

/// `episodes` scenarios of `suite`; deterministic in `seed`.
pub fn generate_suite(suite: Suite, episodes: usize, seed: u64) -> Result<Vec<Scenario>> {
    if episodes == 0 {
        return contract("episodes must be at least 1");
    }
    Ok((0..episodes)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive(seed, seeds::SUITE, i as u64));
            build_scenario(suite, format!("{suite}-{seed}-{i:04}"), &mut rng)
        })
        .collect())
}

/// Pursuit expert: moves `CRUISE · dt` straight toward the centerline
/// point `LOOKAHEAD` metres of arc ahead of its projection.
pub fn expert_policy(s: &EgoState, map: &RoadMap, dt: f64) -> Result<Point> {
    if map.centerline.is_empty() {
        return contract("empty centerline");
    }
    let target = map.point_at(map.project(s.position).s + LOOKAHEAD);
    let d = sub(target, s.position);
    let dist = norm(d);
    let bearing = if dist > 1e-12 { d[1].atan2(d[0]) } else { s.heading };
    let step_len = CRUISE * dt;
    Ok([s.position[0] + step_len * bearing.cos(), s.position[1] + step_len * bearing.sin()])
}

/// Expert's next `horizon` states from `s`, executed through the controller.
pub fn expert_rollout(s: &EgoState, map: &RoadMap, horizon: usize, dt: f64) -> Result<Vec<EgoState>> {
    let mut out = Vec::with_capacity(horizon);
    let mut cur = *s;
    for _ in 0..horizon {
        let next = expert_policy(&cur, map, dt)?;
        cur = step(&cur, &inverse_dynamics(&cur, next, dt), dt);
        out.push(cur);
    }
    Ok(out)
}

/// Sensor geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sensor {
    pub past_len: usize,
    pub beams: usize,
    pub max_range: f64,
}

impl Sensor {
    pub fn from_arch(arch: &Arch) -> Self {
        Self { past_len: arch.past_len, beams: arch.scan_beams, max_range: arch.max_range }
    }
}

/// Ego-frame observation. `history` holds world positions, oldest first,
/// ending at the current one; it is padded by repeating its first entry.
pub fn observe(s: &EgoState, map: &RoadMap, history: &[Point], goal: Point, sensor: &Sensor) -> SceneContext {
    let hist: Vec<Point> = if history.is_empty() { vec![s.position] } else { history.to_vec() };
    let n = hist.len();
    let past = (0..sensor.past_len)
        .map(|i| {
            let back = sensor.past_len - 1 - i;
            s.to_ego(hist[(n - 1).saturating_sub(back)])
        })
        .collect();
    let scan = (0..sensor.beams)
        .map(|i| map.raycast(s.position, s.heading + 2.0 * PI * i as f64 / sensor.beams as f64, sensor.max_range))
        .collect();
    SceneContext { past, scan, goal: s.to_ego(goal) }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfractionKind {
    OffLane,
    Collision,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infraction {
    pub t: usize,
    pub kind: InfractionKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scene_id: String,
    pub states: Vec<EgoState>,
    pub infractions: Vec<Infraction>,
    /// Epistemic variance of the plan each executed step came from.
    pub uncertainty_trace: Vec<f64>,
    pub success: bool,
    pub distance_driven: f64,
    pub expert_queries: usize,
}

/// What a policy sees at a replan tick.
pub struct Tick<'a> {
    pub scenario: &'a Scenario,
    pub state: &'a EgoState,
    pub ctx: &'a SceneContext,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanStep {
    /// Ego-frame plan relative to the tick state.
    pub plan: Trajectory,
    pub uncertainty: f64,
    pub expert_query: bool,
}

pub trait Policy {
    fn plan(&mut self, tick: &Tick) -> Result<PlanStep>;
}

/// The pure-pursuit expert as a plan-producing policy.
#[derive(Clone, Copy, Debug)]
pub struct ExpertPolicy {
    pub horizon: usize,
    pub dt: f64,
}

impl ExpertPolicy {
    pub fn from_arch(arch: &Arch) -> Self {
        Self { horizon: arch.horizon, dt: arch.dt }
    }

    pub fn ego_plan(&self, scenario: &Scenario, state: &EgoState) -> Result<Trajectory> {
        let states = expert_rollout(state, &scenario.map, self.horizon, self.dt)?;
        Ok(Trajectory::new(states.iter().map(|s| state.to_ego(s.position)).collect(), self.dt))
    }
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, tick: &Tick) -> Result<PlanStep> {
        Ok(PlanStep { plan: self.ego_plan(tick.scenario, tick.state)?, uncertainty: 0.0, expert_query: false })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub replan_every: usize,
    /// `None` uses the scenario's default budget.
    pub max_steps: Option<usize>,
    pub goal_tolerance: f64,
    pub dt: f64,
    pub sensor: Sensor,
}

impl EpisodeConfig {
    pub fn from_arch(arch: &Arch) -> Self {
        Self {
            replan_every: DEFAULT_REPLAN_EVERY,
            max_steps: None,
            goal_tolerance: DEFAULT_GOAL_TOLERANCE,
            dt: arch.dt,
            sensor: Sensor::from_arch(arch),
        }
    }
}

/// Closed-loop rollout of `policy` on `scenario`.
///
/// The destination counts as reached once the ego's projection is within
/// `goal_tolerance` of it along the route while in lane. The first
/// infraction ends the episode.
pub fn run_episode(scenario: &Scenario, policy: &mut dyn Policy, cfg: &EpisodeConfig) -> Result<EpisodeLog> {
    run_episode_observed(scenario, policy, cfg, |_, _| {})
}

/// As `run_episode`, calling `on_tick(ctx, plan)` at every replan tick.
pub fn run_episode_observed(
    scenario: &Scenario,
    policy: &mut dyn Policy,
    cfg: &EpisodeConfig,
    mut on_tick: impl FnMut(&SceneContext, &PlanStep),
) -> Result<EpisodeLog> {
    if cfg.replan_every == 0 {
        return contract("replan_every must be at least 1");
    }
    let max_steps = cfg.max_steps.unwrap_or_else(|| scenario.default_max_steps(cfg.dt));
    let map = &scenario.map;
    let mut state = scenario.start;
    let mut log = EpisodeLog {
        scene_id: scenario.id.clone(),
        states: vec![state],
        infractions: Vec::new(),
        uncertainty_trace: Vec::new(),
        success: false,
        distance_driven: 0.0,
        expert_queries: 0,
    };
    let mut history = vec![state.position];
    let mut t = 0;
    'episode: loop {
        if t >= max_steps {
            log.infractions.push(Infraction { t, kind: InfractionKind::Timeout });
            break;
        }
        let ctx = observe(&state, map, &history, scenario.local_goal(state.position), &cfg.sensor);
        let tick_state = state;
        let planned = policy.plan(&Tick { scenario, state: &tick_state, ctx: &ctx, t });
        let step_plan = match planned {
            Ok(p) if !p.plan.is_empty() && p.plan.is_finite() => p,
            Err(e @ Error::ExpertFailure(_)) => return Err(e),
            _ => {
                log.infractions.push(Infraction { t, kind: InfractionKind::Timeout });
                break;
            }
        };
        on_tick(&ctx, &step_plan);
        if step_plan.expert_query {
            log.expert_queries += 1;
        }
        for target in step_plan.plan.states.iter().take(cfg.replan_every) {
            let next = step(&state, &inverse_dynamics(&state, tick_state.to_world(*target), cfg.dt), cfg.dt);
            log.distance_driven += norm(sub(next.position, state.position));
            state = next;
            t += 1;
            log.states.push(state);
            history.push(state.position);
            log.uncertainty_trace.push(step_plan.uncertainty);
            let proj = map.project(state.position);
            if map.collides(state.position) {
                log.infractions.push(Infraction { t, kind: InfractionKind::Collision });
                break 'episode;
            }
            if proj.distance > map.lane_half_width {
                log.infractions.push(Infraction { t, kind: InfractionKind::OffLane });
                break 'episode;
            }
            if proj.s >= scenario.destination_s - cfg.goal_tolerance {
                log.success = true;
                break 'episode;
            }
            if t >= max_steps {
                log.infractions.push(Infraction { t, kind: InfractionKind::Timeout });
                break 'episode;
            }
        }
    }
    Ok(log)
}

/// Expert demonstrations: one record per replan tick of an expert episode.
pub fn collect_demonstrations(scenarios: &[Scenario], arch: &Arch) -> Result<Vec<Demonstration>> {
    let cfg = EpisodeConfig::from_arch(arch);
    let per_scene = crate::par::map(scenarios, |scn| -> Result<Vec<Demonstration>> {
        let mut out = Vec::new();
        let mut expert = ExpertPolicy::from_arch(arch);
        let mut step_no = 0;
        run_episode_observed(scn, &mut expert, &cfg, |ctx, p| {
            out.push(Demonstration { scene_id: scn.id.clone(), step: step_no, ctx: ctx.clone(), plan: p.plan.clone() });
            step_no += cfg.replan_every;
        })?;
        Ok(out)
    });
    let mut all = Vec::new();
    for part in per_scene {
        all.extend(part?);
    }
    Ok(all)
}

/// Expert demonstrations over a freshly generated suite, each episode
/// starting from its trial-0 perturbed state.
pub fn generate_demonstrations(suite: Suite, episodes: usize, seed: u64, arch: &Arch) -> Result<Vec<Demonstration>> {
    let scenarios: Vec<Scenario> = generate_suite(suite, episodes, seed)?.iter().map(|s| s.perturbed(seed, 0)).collect();
    collect_demonstrations(&scenarios, arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_map(hw: f64) -> RoadMap {
        RoadMap::new(vec![[0.0, 0.0], [200.0, 0.0]], hw, vec![], SuiteTag::Straight).unwrap()
    }

    #[test]
    fn inverse_dynamics_definitions() {
        let s = EgoState { position: [0.0, 0.0], heading: 0.3, speed: 0.0 };
        let a = inverse_dynamics(&s, [1.0, 0.0], 0.25);
        assert_eq!((a.target_speed, a.target_heading), (4.0, 0.0));
        assert_eq!(inverse_dynamics(&s, [0.0, 1.0], 0.25).target_heading, PI / 2.0);
        let a = inverse_dynamics(&s, [0.0, 0.0], 0.25);
        assert_eq!((a.target_speed, a.target_heading), (0.0, 0.3));
        assert_eq!(inverse_dynamics(&s, [100.0, 0.0], 0.25).target_speed, V_MAX);
    }

    #[test]
    fn step_kinematics_and_clipping() {
        let s = EgoState { position: [2.0, 3.0], heading: 0.0, speed: 0.0 };
        assert_eq!(step(&s, &Action { target_speed: 0.0, target_heading: 0.0 }, 0.25), s);
        let s = EgoState { position: [0.0, 0.0], heading: 0.0, speed: 4.0 };
        let n = step(&s, &Action { target_speed: 4.0, target_heading: 0.0 }, 0.25);
        assert_eq!(n.position, [1.0, 0.0]);
        let n = step(&s, &Action { target_speed: 4.0, target_heading: PI }, 0.2);
        assert!((n.heading.abs() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn step_converges_in_dt() {
        let run = |dt: f64, n: usize| {
            let mut s = EgoState { position: [0.0, 0.0], heading: 0.0, speed: 3.0 };
            for i in 0..n {
                let time = i as f64 * dt;
                s = step(&s, &Action { target_speed: 5.0, target_heading: 0.4 * (0.5 * time).sin() }, dt);
            }
            s.position
        };
        let a = run(0.25, 40);
        let b = run(0.125, 80);
        assert!(norm(sub(a, b)) / norm(b) < 0.01);
    }

    #[test]
    fn expert_tracks_straight_road() {
        let map = straight_map(3.0);
        let mut s = EgoState { position: [5.0, 0.0], heading: 0.0, speed: CRUISE };
        for _ in 0..20 {
            let next = expert_policy(&s, &map, 0.25).unwrap();
            assert!(next[1].abs() < 1e-9);
            s = step(&s, &inverse_dynamics(&s, next, 0.25), 0.25);
        }
    }

    #[test]
    fn expert_reduces_lateral_offset() {
        let map = straight_map(3.0);
        let mut s = EgoState { position: [5.0, 1.5], heading: 0.0, speed: CRUISE };
        let mut devs = Vec::new();
        for _ in 0..50 {
            s = step(&s, &inverse_dynamics(&s, expert_policy(&s, &map, 0.25).unwrap(), 0.25), 0.25);
            devs.push(s.position[1].abs());
        }
        let settled: Vec<f64> = devs.iter().copied().skip(1).take_while(|d| *d > 1e-9).collect();
        assert!(settled.len() > 5);
        assert!(settled.windows(2).all(|w| w[1] < w[0]), "{devs:?}");
    }

    #[test]
    fn expert_holds_circle_radius() {
        let r = 20.0;
        let pts: Vec<Point> = (0..=720).map(|i| {
            let a = -PI / 2.0 + 4.0 * PI * i as f64 / 720.0;
            [r * a.cos(), r * a.sin()]
        }).collect();
        let map = RoadMap::new(pts, 3.0, vec![], SuiteTag::Roundabout(r)).unwrap();
        let mut s = EgoState { position: [0.0, -r], heading: 0.0, speed: CRUISE };
        let lap = (2.0 * PI * r / (CRUISE * 0.25)) as usize;
        for _ in 0..lap {
            s = step(&s, &inverse_dynamics(&s, expert_policy(&s, &map, 0.25).unwrap(), 0.25), 0.25);
        }
        let mut radii = Vec::new();
        for _ in 0..lap {
            s = step(&s, &inverse_dynamics(&s, expert_policy(&s, &map, 0.25).unwrap(), 0.25), 0.25);
            radii.push(norm(s.position));
        }
        let mean = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean - r).abs() / r < 0.05, "{mean}");
    }

    #[test]
    fn empty_lane_scan_reads_max_range() {
        let map = RoadMap::new(vec![[-100.0, 0.0], [100.0, 0.0]], 50.0, vec![], SuiteTag::Straight).unwrap();
        let s = EgoState { position: [0.0, 0.0], heading: 0.0, speed: 0.0 };
        let ctx = observe(&s, &map, &[s.position], [10.0, 0.0], &Sensor { past_len: 3, beams: 30, max_range: 20.0 });
        assert!(ctx.scan.iter().all(|r| *r == 20.0));
        assert_eq!(ctx.past, vec![[0.0, 0.0]; 3]);
    }

    #[test]
    fn obstacle_dead_ahead() {
        let obstacle = Obstacle { center: [6.0, 0.0], radius: 1.0 };
        let map = RoadMap::new(vec![[-100.0, 0.0], [100.0, 0.0]], 50.0, vec![obstacle], SuiteTag::Straight).unwrap();
        let s = EgoState { position: [0.0, 0.0], heading: 0.0, speed: 0.0 };
        let ctx = observe(&s, &map, &[], [0.0, 0.0], &Sensor { past_len: 2, beams: 30, max_range: 20.0 });
        assert!((ctx.scan[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn lane_boundary_range() {
        let map = straight_map(3.0);
        let s = EgoState { position: [50.0, 1.0], heading: 0.0, speed: 0.0 };
        assert!((map.raycast(s.position, PI / 2.0, 20.0) - 2.0).abs() < 1e-9);
        assert!((map.raycast(s.position, -PI / 2.0, 20.0) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn observation_is_frame_invariant() {
        let scn = &generate_suite(Suite::Roundabout, 1, 4).unwrap()[0];
        let sensor = Sensor { past_len: 4, beams: 30, max_range: 20.0 };
        let states = expert_rollout(&scn.start, &scn.map, 30, 0.25).unwrap();
        let hist: Vec<Point> = states[..20].iter().map(|s| s.position).collect();
        let s = states[19];
        let a = observe(&s, &scn.map, &hist, scn.local_goal(s.position), &sensor);
        let (angle, shift) = (1.1, [-37.0, 12.5]);
        let map2 = scn.map.transformed(angle, shift);
        let s2 = EgoState { position: rigid(s.position, angle, shift), heading: s.heading + angle, speed: s.speed };
        let hist2: Vec<Point> = hist.iter().map(|&p| rigid(p, angle, shift)).collect();
        let b = observe(&s2, &map2, &hist2, rigid(scn.local_goal(s.position), angle, shift), &sensor);
        for (x, y) in a.past.iter().flatten().chain(a.scan.iter()).chain(&a.goal).zip(b.past.iter().flatten().chain(b.scan.iter()).chain(&b.goal)) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn suites_are_deterministic_and_well_tagged() {
        let a = generate_suite(Suite::Train, 30, 7).unwrap();
        assert_eq!(a, generate_suite(Suite::Train, 30, 7).unwrap());
        assert!(a.iter().all(|s| matches!(s.map.suite_tag, SuiteTag::Straight | SuiteTag::RightAngle)));
        let b = generate_suite(Suite::Abnormal, 30, 7).unwrap();
        assert!(b.iter().all(|s| matches!(s.map.suite_tag, SuiteTag::AbnormalTurn(a) if a != 90.0 && ABNORMAL_ANGLES.contains(&a))));
        let c = generate_suite(Suite::Roundabout, 30, 7).unwrap();
        assert!(c.iter().all(|s| matches!(s.map.suite_tag, SuiteTag::Roundabout(r) if (8.0..=15.0).contains(&r))));
        assert!(generate_suite(Suite::Train, 0, 7).is_err());
    }

    #[test]
    fn expert_completes_every_suite() {
        for suite in [Suite::Train, Suite::Abnormal, Suite::Roundabout] {
            for scn in generate_suite(suite, 20, 11).unwrap() {
                let cfg = EpisodeConfig::from_arch(&Arch::default());
                let log = run_episode(&scn, &mut ExpertPolicy::from_arch(&Arch::default()), &cfg).unwrap();
                assert!(log.success, "{} {:?}", scn.id, log.infractions);
            }
        }
    }

    struct Veer;

    impl Policy for Veer {
        fn plan(&mut self, _: &Tick) -> Result<PlanStep> {
            let states = (1..=16).map(|i| [1.25 * i as f64, 0.5 * i as f64]).collect();
            Ok(PlanStep { plan: Trajectory::new(states, 0.25), uncertainty: 0.7, expert_query: false })
        }
    }

    #[test]
    fn leaving_the_lane_is_an_infraction() {
        let scn = &generate_suite(Suite::Train, 1, 0).unwrap()[0];
        let cfg = EpisodeConfig::from_arch(&Arch::default());
        let log = run_episode(scn, &mut Veer, &cfg).unwrap();
        let inf = log.infractions[0];
        assert_eq!(inf.kind, InfractionKind::OffLane);
        assert!(!log.success);
        let devs: Vec<f64> = log.states.iter().map(|s| scn.map.lateral_deviation(s.position)).collect();
        let first = devs.iter().position(|d| *d > scn.map.lane_half_width).unwrap();
        assert_eq!(first, inf.t);
        assert_eq!(log.uncertainty_trace.len(), inf.t);
    }

    #[test]
    fn zero_step_budget_times_out() {
        let scn = &generate_suite(Suite::Train, 1, 0).unwrap()[0];
        let cfg = EpisodeConfig { max_steps: Some(0), ..EpisodeConfig::from_arch(&Arch::default()) };
        let log = run_episode(scn, &mut Veer, &cfg).unwrap();
        assert_eq!(log.infractions, vec![Infraction { t: 0, kind: InfractionKind::Timeout }]);
        assert_eq!(log.distance_driven, 0.0);
    }

    #[test]
    fn demonstrations_satisfy_model_contracts() {
        let arch = Arch::default();
        let scns = generate_suite(Suite::Train, 3, 2).unwrap();
        let demos = collect_demonstrations(&scns, &arch).unwrap();
        assert!(demos.len() > 10);
        for d in &demos {
            arch.check_context(&d.ctx).unwrap();
            arch.check_trajectory(&d.plan).unwrap();
        }
        assert_eq!(demos, collect_demonstrations(&scns, &arch).unwrap());
    }
}
