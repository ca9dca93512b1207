//! The conflict-aware takeover controller and the per-agent mode machine.
//!
//! A taken-over agent receives the conflicting cross point as its goal,
//! a lane-graph route smoothed into a Bezier path, and a longitudinal
//! profile that delays (or tracks) its arrival so the conflict dissolves.
//! Once the goal is reached and no conflict names the agent, control is
//! handed back to log replay.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::conflict::Conflict;
use crate::geometry::{
    bezier_fit, normalize_angle, point_at_arclength, project_to_lane, BezierPath, GeometryError,
    LaneProjection, Vec2,
};
use crate::map::HDMap;
use crate::scenario::{AgentId, AgentState, TICK_SECONDS};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no lane-graph route from {from:?} to {to:?}")]
    NoRoute { from: String, to: String },
    #[error("agent is off the map: {0}")]
    OffMap(GeometryError),
    #[error("route goal is more than 20 m from every lane")]
    GoalOffMap,
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

/// Per-agent policy state: replay or conflict-aware takeover.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentMode {
    /// Following the recorded trajectory.
    ReplayL,
    /// Taken over to resolve one conflict.
    ConflictAwareC {
        goal: Vec2,
        yielding: bool,
        takeover_tick: usize,
        conflict: Conflict,
    },
}

impl AgentMode {
    pub fn tag(&self) -> &'static str {
        match self {
            AgentMode::ReplayL => "L",
            AgentMode::ConflictAwareC { .. } => "C",
        }
    }

    pub fn is_takeover(&self) -> bool {
        matches!(self, AgentMode::ConflictAwareC { .. })
    }
}

/// Conflict context for one agent at one tick, as seen by the transition
/// function.
#[derive(Debug, Clone, Default)]
pub struct ConflictContext {
    /// A new conflict whose yield decision names this agent as executor.
    pub new_assignment: Option<(Conflict, bool)>,
    /// Whether any currently active conflict involves this agent.
    pub any_active: bool,
}

/// The mode state machine. Transitions are exactly:
/// L -> C on a new conflict assignment, C -> L when the goal is reached and
/// no active conflict names the agent, otherwise the mode persists.
pub fn mode_transition(
    mode: &AgentMode,
    tick: usize,
    ctx: &ConflictContext,
    goal_reached: bool,
) -> AgentMode {
    match mode {
        AgentMode::ReplayL => match &ctx.new_assignment {
            Some((conflict, yielding)) => AgentMode::ConflictAwareC {
                goal: conflict.cross_point,
                yielding: *yielding,
                takeover_tick: tick,
                conflict: conflict.clone(),
            },
            None => AgentMode::ReplayL,
        },
        AgentMode::ConflictAwareC { .. } => {
            if goal_reached && !ctx.any_active {
                AgentMode::ReplayL
            } else {
                mode.clone()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Number of neighbor slots in the feature vector.
pub const NEIGHBOR_SLOTS: usize = 6;
/// Distance reported for an empty neighbor slot.
pub const NEIGHBOR_SENTINEL: f64 = 100.0;

#[derive(Debug, Clone, Copy, Default)]
pub struct NeighborFeatures {
    /// Bumper gap: center distance minus both half lengths, floored at 0.
    pub distance: f64,
    pub velocity: f64,
    /// Bearing of the neighbor in the subject's frame, [-pi, pi).
    pub relative_angle: f64,
    /// Heading difference, [-pi, pi).
    pub relative_heading: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CoreFeatures {
    pub length: f64,
    pub height: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RoadFeatures {
    pub marker_dist_l: f64,
    pub marker_dist_r: f64,
    pub road_dist_l: f64,
    pub road_dist_r: f64,
    pub lane_offset: f64,
    pub lane_curvature: f64,
    pub lane_rel_heading: f64,
}

/// Control-policy input features: the subject agent, its surroundings, and
/// the road geometry.
#[derive(Debug, Clone)]
pub struct PolicyFeatures {
    pub core: CoreFeatures,
    pub surrounding: [NeighborFeatures; NEIGHBOR_SLOTS],
    pub road: RoadFeatures,
}

impl PolicyFeatures {
    /// Flatten into the network input layout.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 + 4 * NEIGHBOR_SLOTS + 7);
        v.extend([
            self.core.length,
            self.core.height,
            self.core.velocity,
            self.core.acceleration,
        ]);
        for n in &self.surrounding {
            v.extend([n.distance, n.velocity, n.relative_angle, n.relative_heading]);
        }
        v.extend([
            self.road.marker_dist_l,
            self.road.marker_dist_r,
            self.road.road_dist_l,
            self.road.road_dist_r,
            self.road.lane_offset,
            self.road.lane_curvature,
            self.road.lane_rel_heading,
        ]);
        v
    }

    pub const FLAT_LEN: usize = 4 + 4 * NEIGHBOR_SLOTS + 7;
}

/// Extract policy features for `agent` from the current joint states.
/// `prev_speeds` supplies the previous tick's speeds for the acceleration
/// feature (0 when absent). Neighbors are the up-to-6 nearest agents within
/// `roi_radius`.
pub fn extract_features(
    map: &HDMap,
    states: &BTreeMap<AgentId, AgentState>,
    prev_speeds: &BTreeMap<AgentId, f64>,
    agent: AgentId,
    roi_radius: f64,
) -> Result<PolicyFeatures, PolicyError> {
    let me = states.get(&agent).expect("agent present in states");
    let proj = project_to_lane(map, me.pos(), me.yaw).map_err(PolicyError::OffMap)?;

    let accel = prev_speeds
        .get(&agent)
        .map(|prev| (me.speed - prev) / TICK_SECONDS)
        .unwrap_or(0.0);

    let mut neighbors: Vec<(f64, AgentId, &AgentState)> = states
        .iter()
        .filter(|(id, _)| **id != agent)
        .map(|(id, s)| (me.pos().dist(s.pos()), *id, s))
        .filter(|(d, _, _)| *d <= roi_radius)
        .collect();
    neighbors.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut surrounding = [NeighborFeatures {
        distance: NEIGHBOR_SENTINEL,
        velocity: 0.0,
        relative_angle: 0.0,
        relative_heading: 0.0,
    }; NEIGHBOR_SLOTS];
    for (slot, (center_dist, _, other)) in neighbors.iter().take(NEIGHBOR_SLOTS).enumerate() {
        let rel = (other.pos() - me.pos()).rotate(-me.yaw);
        surrounding[slot] = NeighborFeatures {
            distance: (center_dist - (me.length + other.length) / 2.0).max(0.0),
            velocity: other.speed,
            relative_angle: normalize_angle(rel.y.atan2(rel.x)),
            relative_heading: normalize_angle(other.yaw - me.yaw),
        };
    }

    Ok(PolicyFeatures {
        core: CoreFeatures {
            length: me.length,
            height: me.width,
            velocity: me.speed,
            acceleration: accel,
        },
        surrounding,
        road: RoadFeatures {
            marker_dist_l: proj.marker_dist_l,
            marker_dist_r: proj.marker_dist_r,
            road_dist_l: proj.road_dist_l,
            road_dist_r: proj.road_dist_r,
            lane_offset: proj.frame.d,
            lane_curvature: proj.frame.curvature,
            lane_rel_heading: proj.frame.heading_err,
        },
    })
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

pub const MAX_YAW_RATE: f64 = 0.5;
pub const MIN_ACCEL_LONG: f64 = -8.0;
pub const MAX_ACCEL_LONG: f64 = 4.0;
pub const MAX_ACCEL_LAT: f64 = 4.0;

/// Clamped control command for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlAction {
    pub yaw_rate: f64,
    pub accel_long: f64,
    pub accel_lat: f64,
}

impl ControlAction {
    pub fn clamped(yaw_rate: f64, accel_long: f64, accel_lat: f64) -> ControlAction {
        ControlAction {
            yaw_rate: yaw_rate.clamp(-MAX_YAW_RATE, MAX_YAW_RATE),
            accel_long: accel_long.clamp(MIN_ACCEL_LONG, MAX_ACCEL_LONG),
            accel_lat: accel_lat.clamp(-MAX_ACCEL_LAT, MAX_ACCEL_LAT),
        }
    }

    pub fn within_limits(&self) -> bool {
        self.yaw_rate.abs() <= MAX_YAW_RATE
            && (MIN_ACCEL_LONG..=MAX_ACCEL_LONG).contains(&self.accel_long)
            && self.accel_lat.abs() <= MAX_ACCEL_LAT
    }
}

/// Integrate one clamped action over a tick: speed, then heading, then
/// position along the new heading. This exact order is part of the
/// engine's determinism contract.
pub fn integrate_action(state: &AgentState, action: &ControlAction) -> AgentState {
    let speed = (state.speed + action.accel_long * TICK_SECONDS).max(0.0);
    let yaw = normalize_angle(state.yaw + action.yaw_rate * TICK_SECONDS);
    let pos = state.pos() + Vec2::new(yaw.cos(), yaw.sin()).scale(speed * TICK_SECONDS);
    AgentState {
        x: pos.x,
        y: pos.y,
        yaw,
        speed,
        ..*state
    }
}

// ---------------------------------------------------------------------------
// Route planning
// ---------------------------------------------------------------------------

/// Spacing of centerline waypoints fed to the Bezier fit.
pub const ROUTE_SAMPLE_SPACING: f64 = 2.0;
/// Longitudinal distance over which a neighbor-lane transition happens.
const LANE_CHANGE_RUN: f64 = 15.0;

/// Shortest lane-graph route from a start pose to a goal point, smoothed
/// into a Bezier path through centerline samples every 2 m plus the exact
/// goal. Uniform-cost search over the connectivity graph with edge cost
/// equal to the entered lane's centerline length.
pub fn plan_route(
    map: &HDMap,
    start: &LaneProjection,
    start_pos: Vec2,
    goal: Vec2,
) -> Result<BezierPath, PolicyError> {
    let goal_proj = project_to_lane(map, goal, 0.0).map_err(|_| PolicyError::GoalOffMap)?;
    let start_lane = start.frame.lane_id.clone();
    let goal_lane = goal_proj.frame.lane_id.clone();

    let lane_seq = search_lane_path(map, &start_lane, &goal_lane).ok_or(PolicyError::NoRoute {
        from: start_lane.clone(),
        to: goal_lane.clone(),
    })?;

    // geometric waypoints: walk the lane sequence, sampling centerlines
    let mut waypoints = vec![start_pos];
    let mut s = start.frame.s;
    for (i, lane_id) in lane_seq.iter().enumerate() {
        let lane = map.lane(lane_id).unwrap();
        let is_last = i + 1 == lane_seq.len();
        let end_s = if is_last {
            goal_proj.frame.s
        } else {
            // neighbor transitions leave partway; successor transitions at
            // the end of the lane
            let next = &lane_seq[i + 1];
            if map.successors(lane_id).contains(&next.as_str()) {
                lane.length()
            } else {
                (s + LANE_CHANGE_RUN).min(lane.length())
            }
        };
        let mut cursor = s + ROUTE_SAMPLE_SPACING;
        while cursor < end_s {
            waypoints.push(point_at_arclength(&lane.centerline, cursor));
            cursor += ROUTE_SAMPLE_SPACING;
        }
        if !is_last {
            let next = &lane_seq[i + 1];
            if map.successors(lane_id).contains(&next.as_str()) {
                s = 0.0;
            } else {
                // parallel neighbor: resume at the matching arc length
                s = end_s;
            }
        } else {
            waypoints.push(goal);
        }
    }
    bezier_fit(&waypoints).map_err(PolicyError::OffMap)
}

/// Uniform-cost search over the lane graph; cost of entering a lane is its
/// centerline length. Deterministic: ties resolve by lane id.
fn search_lane_path(map: &HDMap, from: &str, to: &str) -> Option<Vec<String>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    if from == to {
        return Some(vec![from.to_string()]);
    }
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    let mut prev: BTreeMap<String, String> = BTreeMap::new();
    let mut heap: BinaryHeap<Reverse<(ordered_float_bits, String)>> = BinaryHeap::new();
    best.insert(from.to_string(), 0.0);
    heap.push(Reverse((ordered_float_bits::from(0.0), from.to_string())));
    while let Some(Reverse((cost_bits, lane))) = heap.pop() {
        let cost = cost_bits.to_f64();
        if lane == to {
            let mut path = vec![lane.clone()];
            let mut cur = lane;
            while let Some(p) = prev.get(&cur) {
                path.push(p.clone());
                cur = p.clone();
            }
            path.reverse();
            return Some(path);
        }
        if cost > *best.get(&lane).unwrap_or(&f64::INFINITY) {
            continue;
        }
        for adj in map.edges_from(&lane) {
            let next_lane = map.lane(&adj.to)?;
            let next_cost = cost + next_lane.length();
            if next_cost < *best.get(&adj.to).unwrap_or(&f64::INFINITY) {
                best.insert(adj.to.clone(), next_cost);
                prev.insert(adj.to.clone(), lane.clone());
                heap.push(Reverse((ordered_float_bits::from(next_cost), adj.to.clone())));
            }
        }
    }
    None
}

/// Total-ordered f64 for the search heap (all costs are non-negative).
#[allow(non_camel_case_types)]
#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct ordered_float_bits(u64);

impl ordered_float_bits {
    fn from(v: f64) -> Self {
        ordered_float_bits(v.to_bits())
    }
    fn to_f64(&self) -> f64 {
        f64::from_bits(self.0)
    }
}

// ---------------------------------------------------------------------------
// Yield decision
// ---------------------------------------------------------------------------

/// Horizon step at which a trajectory gets closest to a point (1-based;
/// earliest step within a half-length of the minimum).
pub fn arrival_step(traj: &crate::predict::PredictedTrajectory, point: Vec2) -> usize {
    let est = traj.point_estimate();
    if est.is_empty() {
        return 1;
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, p) in est.iter().enumerate() {
        let d = p.dist(point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0 + 1
}

/// Which agent of a conflicting pair yields: the background agent when the
/// other party is the ego, else the later arrival at the cross point; exact
/// ties go to the larger id.
pub fn decide_yield(
    conflict: &Conflict,
    pred_a: &crate::predict::PredictedTrajectory,
    pred_b: &crate::predict::PredictedTrajectory,
    ego: AgentId,
) -> AgentId {
    let (a, b) = conflict.pair;
    if a == ego {
        return b;
    }
    if b == ego {
        return a;
    }
    let (ta, tb) = if pred_a.agent_id == a {
        (
            arrival_step(pred_a, conflict.cross_point),
            arrival_step(pred_b, conflict.cross_point),
        )
    } else {
        (
            arrival_step(pred_b, conflict.cross_point),
            arrival_step(pred_a, conflict.cross_point),
        )
    };
    match ta.cmp(&tb) {
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Equal => a.max(b),
    }
}

// ---------------------------------------------------------------------------
// Takeover controller
// ---------------------------------------------------------------------------

/// Goal tolerance for the handback condition, meters.
pub const GOAL_TOLERANCE: f64 = 1.5;
/// The yielder aims to arrive this much after the opposing agent, seconds.
pub const YIELD_MARGIN_SECONDS: f64 = 1.0;

/// Per-takeover controller context, fixed at takeover time.
#[derive(Debug, Clone)]
pub struct TakeoverPlan {
    pub path: BezierPath,
    pub goal: Vec2,
    pub yielding: bool,
    /// Absolute tick before which the yielder must not reach the cross
    /// point (opposing arrival plus the margin).
    pub required_arrival_tick: usize,
    /// Speed profile to track when proceeding: the agent's logged speed.
    pub reference_speed: f64,
}

/// Outcome flags of one controller step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TakeoverStepInfo {
    /// Even maximum braking reaches the cross point too early.
    pub infeasible_yield: bool,
}

/// Pure-pursuit lookahead: at least 3 m, one second of travel otherwise.
fn lookahead_distance(speed: f64) -> f64 {
    (speed * 1.0).max(3.0)
}

/// Neighbors inside this bearing cone count as leaders for the
/// follow-safety cap.
const FOLLOW_CONE: f64 = 0.5;

/// Car-following ceiling from the surrounding features: the takeover
/// profile may never accelerate harder than following the nearest agent
/// ahead would allow.
fn follow_cap(features: &PolicyFeatures, speed: f64) -> f64 {
    let idm = crate::metrics::IDMParams::default();
    let mut cap = MAX_ACCEL_LONG;
    for n in &features.surrounding {
        if n.distance >= NEIGHBOR_SENTINEL || n.relative_angle.abs() > FOLLOW_CONE {
            continue;
        }
        cap = cap.min(crate::metrics::idm_accel(
            speed,
            n.distance.max(1e-3),
            n.velocity,
            &idm,
        ));
    }
    cap
}

/// One control step of the takeover policy.
///
/// Lateral: pure pursuit on the planned path (heading held once the path
/// is exhausted). Longitudinal: a yielding agent solves for the constant
/// deceleration that delays its arrival at the goal past
/// `required_arrival_tick` (emergency braking when no deceleration
/// suffices); a proceeding agent tracks its reference speed. Either way
/// the command is capped by car-following safety against the nearest
/// agent ahead, taken from the surrounding features.
pub fn takeover_step(
    plan: &TakeoverPlan,
    state: &AgentState,
    features: &PolicyFeatures,
    tick: usize,
) -> (ControlAction, TakeoverStepInfo) {
    let mut info = TakeoverStepInfo::default();
    let v = state.speed;

    // lateral: pure pursuit toward a lookahead point on the path
    let s_here = plan.path.project(state.pos());
    let at_path_end = s_here >= plan.path.total_length() - 1e-6;
    let lookahead = lookahead_distance(v);
    let target = plan
        .path
        .point_at_arclength((s_here + lookahead).min(plan.path.total_length()));
    let to_target = target - state.pos();
    let yaw_rate = if at_path_end || to_target.norm() < 1e-6 || v < 1e-3 {
        0.0
    } else {
        let alpha = normalize_angle(to_target.angle() - state.yaw);
        let curvature = 2.0 * alpha.sin() / lookahead;
        v * curvature
    };

    // longitudinal
    let dist_to_goal = (plan.path.total_length() - s_here).max(0.0);
    let profile = if plan.yielding && tick < plan.required_arrival_tick {
        let t_rem = (plan.required_arrival_tick - tick) as f64 * TICK_SECONDS;
        let coast_arrival = if v > 1e-6 {
            dist_to_goal / v
        } else {
            f64::INFINITY
        };
        if coast_arrival >= t_rem {
            0.0 // already late enough; a stopped yielder stays put
        } else {
            // constant deceleration meeting the goal exactly at t_rem
            let a = 2.0 * (dist_to_goal - v * t_rem) / (t_rem * t_rem);
            // feasibility: does max braking still cross the goal early?
            let cross_early = {
                let disc = v * v + 2.0 * MIN_ACCEL_LONG * dist_to_goal;
                if disc >= 0.0 {
                    // reaches the goal while braking at the limit
                    let t_cross = (v - disc.sqrt()) / (-MIN_ACCEL_LONG);
                    t_cross < t_rem
                } else {
                    false // stops before the goal: can wait arbitrarily long
                }
            };
            if cross_early {
                info.infeasible_yield = true;
                MIN_ACCEL_LONG
            } else {
                a.min(0.0) // the yield profile never speeds the agent up
            }
        }
    } else {
        // proceed: track the reference speed
        2.0 * (plan.reference_speed - v)
    };
    let accel_long = profile.min(follow_cap(features, v));

    let action = ControlAction::clamped(yaw_rate, accel_long, v * yaw_rate);
    (action, info)
}

/// Whether the takeover goal counts as reached: inside the goal ring, or
/// the planned path is fully traversed.
pub fn goal_reached(plan: &TakeoverPlan, pos: Vec2, tolerance: f64) -> bool {
    pos.dist(plan.goal) <= tolerance
        || plan.path.project(pos) >= plan.path.total_length() - tolerance
}

/// Features with every neighbor slot empty; used when extraction fails
/// and for profile-only rollouts.
pub fn sentinel_features(state: &AgentState) -> PolicyFeatures {
    PolicyFeatures {
        core: CoreFeatures {
            length: state.length,
            height: state.width,
            velocity: state.speed,
            acceleration: 0.0,
        },
        surrounding: [NeighborFeatures {
            distance: NEIGHBOR_SENTINEL,
            velocity: 0.0,
            relative_angle: 0.0,
            relative_heading: 0.0,
        }; NEIGHBOR_SLOTS],
        road: RoadFeatures::default(),
    }
}

/// Roll the takeover controller forward as a prediction: the trajectory the
/// engine advertises for a taken-over agent. Starting from the live
/// features, neighbor gaps are propagated at constant velocity so the
/// rollout reflects the follow-safety cap the controller will actually
/// apply.
pub fn rollout_takeover(
    agent: AgentId,
    plan: &TakeoverPlan,
    state: &AgentState,
    features: &PolicyFeatures,
    start_tick: usize,
    horizon: usize,
) -> crate::predict::PredictedTrajectory {
    let mut s = *state;
    let mut feats = features.clone();
    let mut mean = Vec::with_capacity(horizon);
    for i in 0..horizon {
        feats.core.velocity = s.speed;
        let (action, _) = takeover_step(plan, &s, &feats, start_tick + i);
        s = integrate_action(&s, &action);
        for n in &mut feats.surrounding {
            if n.distance < NEIGHBOR_SENTINEL {
                n.distance = (n.distance
                    + (n.velocity - s.speed) * crate::scenario::TICK_SECONDS)
                    .max(1e-3);
            }
        }
        mean.push(s.pos());
    }
    crate::predict::PredictedTrajectory::single_mode(agent, mean, 0.1, false)
}
