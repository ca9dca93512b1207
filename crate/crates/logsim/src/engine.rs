//! The closed-loop simulation: per-tick replay, region-of-interest
//! selection, joint prediction, conflict detection, takeover assignment
//! (iterated until no new conflicts appear), stepping, and handback with
//! log re-synchronization.
//!
//! Tick order of operations is fixed and all agent iteration is in
//! ascending id, so a run is bit-reproducible given its seed.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conflict::{detect_all, Conflict};
use crate::control::{
    arrival_step, decide_yield, integrate_action, mode_transition, rollout_takeover,
    takeover_step, AgentMode, ConflictContext, TakeoverPlan, GOAL_TOLERANCE,
    YIELD_MARGIN_SECONDS,
};
use crate::geometry::{
    bezier_fit, heading_at_arclength, normalize_angle, point_at_arclength, project_to_lane,
    project_to_polyline, Vec2,
};
use crate::metrics::{idm_accel, IDMParams};
use crate::predict::{
    predict_kinematic, predict_learned, predict_replay, ModelParams, PredictedTrajectory,
    PredictorConfig,
};
use crate::scenario::{AgentId, AgentState, Segment, TrackHistory, TICK_SECONDS};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("ego agent {0} is not present at the simulation start")]
    EgoMissing(AgentId),
    #[error("segment has no agents to pick an ego from")]
    EmptySegment,
    #[error("learned predictor selected but no checkpoint supplied")]
    NoPredictorModel,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Sensing range for control features, independent of the prediction ROI
/// so the ablation radius gates takeover scope, not controller perception.
pub const FEATURE_SENSING_RADIUS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgoSelection {
    Agent(AgentId),
    /// Uniformly among agents present at sim start, from the run seed.
    Random,
}

/// How the ego agent moves (its conflict gating always comes from the
/// configured predictor, not from these scripts).
#[derive(Debug, Clone)]
pub enum EgoPolicy {
    /// Follow the ego's own log (no deviation).
    Replay,
    /// Scripted merge into the adjacent lane followed by a brief slowdown.
    LaneChange(LaneChangeScript),
    /// Scripted unprotected left turn on the intersection map.
    LeftTurn(LeftTurnScript),
    /// Car-following along the current lane.
    IdmFollow,
}

#[derive(Debug, Clone, Copy)]
pub struct LaneChangeScript {
    /// Tick at which the merge begins.
    pub at_tick: usize,
    /// Lateral travel of the merge; negative moves right.
    pub offset: f64,
    /// Merge duration in ticks (~3 s).
    pub duration: usize,
    /// Speed dipped to after the merge, and how long it is held.
    pub dip_speed: f64,
    pub dip_hold_ticks: usize,
}

impl Default for LaneChangeScript {
    fn default() -> Self {
        LaneChangeScript {
            at_tick: 80,
            offset: -crate::synth::LANE_WIDTH,
            duration: 30,
            dip_speed: 7.0,
            dip_hold_ticks: 30,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeftTurnScript {
    /// Tick at which the ego leaves its log and enters the turn.
    pub at_tick: usize,
    /// Speed through the turn.
    pub turn_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorChoice {
    Replay,
    Kinematic,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundPolicy {
    Replay,
    /// Baseline: every background agent is driven by the intelligent
    /// driver model along its lane (takeover machinery disabled).
    Idm,
}

/// Handles to trained models, when configured.
#[derive(Default)]
pub struct Models {
    pub predictor: Option<(ModelParams, PredictorConfig)>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub roi_radius: f64,
    pub horizon_steps: usize,
    pub history_steps: usize,
    pub max_conflict_iterations: usize,
    pub seed: u64,
    pub ego: EgoSelection,
    pub ego_policy: EgoPolicy,
    pub predictor: PredictorChoice,
    pub background: BackgroundPolicy,
    pub disable_takeover: bool,
    /// Extra margin added to each box side during conflict checks.
    pub box_inflation: f64,
    pub yield_margin_s: f64,
    pub goal_tolerance: f64,
    pub handback_blend_ticks: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            roi_radius: 30.0,
            horizon_steps: 50,
            history_steps: 30,
            max_conflict_iterations: 10,
            seed: 0,
            ego: EgoSelection::Random,
            ego_policy: EgoPolicy::Replay,
            predictor: PredictorChoice::Kinematic,
            background: BackgroundPolicy::Replay,
            disable_takeover: false,
            box_inflation: 0.0,
            yield_margin_s: YIELD_MARGIN_SECONDS,
            goal_tolerance: GOAL_TOLERANCE,
            handback_blend_ticks: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeTag {
    L,
    C,
}

impl std::fmt::Display for ModeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeTag::L => write!(f, "L"),
            ModeTag::C => write!(f, "C"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Takeover,
    HandbackStart,
    HandbackEnd,
    InfeasibleYield,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EventKind::Takeover => "takeover",
            EventKind::HandbackStart => "handback_start",
            EventKind::HandbackEnd => "handback_end",
            EventKind::InfeasibleYield => "infeasible_yield",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
pub struct TakeoverEvent {
    pub tick: usize,
    pub agent: AgentId,
    pub kind: EventKind,
    pub pair: (AgentId, AgentId),
    pub goal: Vec2,
}

#[derive(Debug, Clone)]
pub struct ConflictRecord {
    pub tick: usize,
    pub conflict: Conflict,
}

#[derive(Debug, Clone)]
pub struct TickSnapshot {
    pub tick: usize,
    pub agents: BTreeMap<AgentId, (AgentState, ModeTag)>,
    /// Distance between the ego's one-step prediction and where the ego
    /// policy actually put it.
    pub ego_divergence: f64,
}

/// Immutable record of one simulated segment.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub ego: AgentId,
    /// First simulated tick (everything before is initialization).
    pub sim_start: usize,
    pub ticks: Vec<TickSnapshot>,
    pub takeover_events: Vec<TakeoverEvent>,
    pub conflict_log: Vec<ConflictRecord>,
    /// Ticks at which the conflict-resolution iteration cap was hit.
    pub cap_hits: Vec<usize>,
    /// (width, length) per agent, for collision re-checks.
    pub agent_dims: BTreeMap<AgentId, (f64, f64)>,
    /// Agents ever taken over.
    pub taken_over: BTreeSet<AgentId>,
}

impl SimTrace {
    pub fn takeover_count(&self) -> usize {
        self.takeover_events
            .iter()
            .filter(|e| e.kind == EventKind::Takeover)
            .count()
    }

    /// Line-delimited trace export: one record per (tick, agent), with the
    /// mode tag and any events of that agent at that tick. Floats use the
    /// shortest exact representation, so a read reproduces them bit-for-bit.
    pub fn write_csv<W: std::io::Write>(&self, sink: &mut W) -> std::io::Result<()> {
        writeln!(sink, "# logsim-trace v1")?;
        writeln!(sink, "# ego {}", self.ego)?;
        writeln!(sink, "# sim_start {}", self.sim_start)?;
        writeln!(sink, "tick,agent_id,x,y,yaw,speed,mode,event")?;
        for snap in &self.ticks {
            for (id, (s, mode)) in &snap.agents {
                let events: Vec<String> = self
                    .takeover_events
                    .iter()
                    .filter(|e| e.tick == snap.tick && e.agent == *id)
                    .map(|e| e.kind.to_string())
                    .collect();
                writeln!(
                    sink,
                    "{},{},{},{},{},{},{},{}",
                    snap.tick,
                    id,
                    s.x,
                    s.y,
                    s.yaw,
                    s.speed,
                    mode,
                    events.join(";")
                )?;
            }
        }
        Ok(())
    }

    /// Read a trace written by [`SimTrace::write_csv`]. Agent extents are
    /// not part of the record format, so they are joined back in from
    /// `dims` (typically the source log).
    pub fn read_csv<R: std::io::BufRead>(
        reader: R,
        dims: &BTreeMap<AgentId, (f64, f64)>,
    ) -> std::io::Result<SimTrace> {
        use std::io::{Error, ErrorKind};
        let bad = |msg: String| Error::new(ErrorKind::InvalidData, msg);
        let mut ego = None;
        let mut sim_start = 0usize;
        let mut by_tick: BTreeMap<usize, BTreeMap<AgentId, (AgentState, ModeTag)>> =
            BTreeMap::new();
        let mut takeover_events = Vec::new();
        let mut taken_over = BTreeSet::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with("tick,") {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("ego ") {
                    ego = Some(AgentId(v.trim().parse().map_err(|e| bad(format!("ego: {e}")))?));
                } else if let Some(v) = rest.strip_prefix("sim_start ") {
                    sim_start = v.trim().parse().map_err(|e| bad(format!("sim_start: {e}")))?;
                }
                continue;
            }
            let f: Vec<&str> = t.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("line {}: expected 8 fields", line_no + 1)));
            }
            let tick: usize = f[0].parse().map_err(|e| bad(format!("tick: {e}")))?;
            let id = AgentId(f[1].parse().map_err(|e| bad(format!("agent: {e}")))?);
            let parse = |s: &str, name: &str| -> std::io::Result<f64> {
                s.parse().map_err(|e| bad(format!("{name}: {e}")))
            };
            let (width, length) = dims.get(&id).copied().unwrap_or((1.8, 4.4));
            let state = AgentState {
                x: parse(f[2], "x")?,
                y: parse(f[3], "y")?,
                yaw: parse(f[4], "yaw")?,
                speed: parse(f[5], "speed")?,
                width,
                length,
            };
            let mode = match f[6] {
                "C" => ModeTag::C,
                _ => ModeTag::L,
            };
            for ev in f[7].split(';').filter(|e| !e.is_empty()) {
                let kind = match ev {
                    "takeover" => EventKind::Takeover,
                    "handback_start" => EventKind::HandbackStart,
                    "handback_end" => EventKind::HandbackEnd,
                    "infeasible_yield" => EventKind::InfeasibleYield,
                    other => return Err(bad(format!("unknown event {other:?}"))),
                };
                if kind == EventKind::Takeover {
                    taken_over.insert(id);
                }
                takeover_events.push(TakeoverEvent {
                    tick,
                    agent: id,
                    kind,
                    pair: (id, id),
                    goal: state.pos(),
                });
            }
            if mode == ModeTag::C {
                taken_over.insert(id);
            }
            by_tick.entry(tick).or_default().insert(id, (state, mode));
        }
        let agent_dims = dims.clone();
        Ok(SimTrace {
            ego: ego.ok_or_else(|| bad("missing ego header".into()))?,
            sim_start,
            ticks: by_tick
                .into_iter()
                .map(|(tick, agents)| TickSnapshot {
                    tick,
                    agents,
                    ego_divergence: 0.0,
                })
                .collect(),
            takeover_events,
            conflict_log: Vec::new(),
            cap_hits: Vec::new(),
            agent_dims,
            taken_over,
        })
    }

    /// Conflict audit export: one record per detected conflict per tick.
    pub fn write_conflicts_csv<W: std::io::Write>(&self, sink: &mut W) -> std::io::Result<()> {
        writeln!(sink, "tick,agent_a,agent_b,first_step,cross_x,cross_y,penetration")?;
        for r in &self.conflict_log {
            writeln!(
                sink,
                "{},{},{},{},{},{},{}",
                r.tick,
                r.conflict.pair.0,
                r.conflict.pair.1,
                r.conflict.first_step,
                r.conflict.cross_point.x,
                r.conflict.cross_point.y,
                r.conflict.penetration
            )?;
        }
        Ok(())
    }

    /// Takeover audit export: one record per mode event.
    pub fn write_takeovers_csv<W: std::io::Write>(&self, sink: &mut W) -> std::io::Result<()> {
        writeln!(sink, "tick,agent,event,pair_a,pair_b,goal_x,goal_y")?;
        for e in &self.takeover_events {
            writeln!(
                sink,
                "{},{},{},{},{},{},{}",
                e.tick, e.agent, e.kind, e.pair.0, e.pair.1, e.goal.x, e.goal.y
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Runtime state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum RtMode {
    /// Replaying; `idx` is the log step of the current state.
    Replay { idx: usize },
    Takeover(Box<TakeoverRt>),
    /// Re-synchronizing onto the log after a takeover.
    Handback {
        idx: usize,
        offset: Vec2,
        done: usize,
        total: usize,
    },
}

#[derive(Debug, Clone)]
struct TakeoverRt {
    plan: TakeoverPlan,
    yielding: bool,
    takeover_tick: usize,
    conflict: Conflict,
    infeasible_flagged: bool,
    /// Log step the agent was at when taken over; resync searches near it.
    entry_idx: usize,
}

struct AgentRt {
    current: AgentState,
    mode: RtMode,
    history: VecDeque<AgentState>,
    prev_speed: f64,
    /// IDM baseline state, when the background policy is IDM.
    idm: Option<IdmRt>,
    /// Set after a live collision: the agent is stopped for good.
    wrecked: bool,
}

#[derive(Debug, Clone)]
struct IdmRt {
    lane_id: String,
    s: f64,
    d: f64,
    desired_speed: f64,
}

impl AgentRt {
    fn mode_tag(&self) -> ModeTag {
        match self.mode {
            RtMode::Takeover(_) => ModeTag::C,
            _ => ModeTag::L,
        }
    }

    fn push_history(&mut self, cap: usize) {
        self.history.push_back(self.current);
        while self.history.len() > cap {
            self.history.pop_front();
        }
    }

    fn history_track(&self, id: AgentId) -> TrackHistory {
        TrackHistory {
            agent_id: id,
            first_step: 0,
            states: self.history.iter().copied().collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Ego scripts
// ---------------------------------------------------------------------------

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Precompute the ego's full state sequence for a scripted policy.
/// `Replay` returns the log itself; the two deviation scripts reproduce a
/// highway cut-in and an unprotected left turn.
pub fn scripted_ego(
    policy: &EgoPolicy,
    seg: &Segment,
    ego: AgentId,
) -> Result<Vec<AgentState>, EngineError> {
    let track = &seg
        .tracks
        .get(&ego)
        .ok_or(EngineError::EgoMissing(ego))?
        .history;
    let total = seg.total_steps();
    let log_state = |t: usize| -> AgentState {
        *track
            .state_at(t.min(track.last_step()).max(track.first_step))
            .expect("clamped into range")
    };

    let states = match policy {
        EgoPolicy::Replay | EgoPolicy::IdmFollow => (0..total).map(log_state).collect(),
        EgoPolicy::LaneChange(script) => {
            let mut out: Vec<AgentState> = Vec::with_capacity(total);
            let t0 = script.at_tick;
            let t1 = t0 + script.duration;
            let base_speed = log_state(t0).speed;
            // speed profile after the merge: dip, hold, recover
            let dip_ramp = 10usize;
            let recover = 25usize;
            let speed_at = |t: usize| -> f64 {
                if t < t1 {
                    base_speed
                } else if t < t1 + dip_ramp {
                    let w = (t - t1) as f64 / dip_ramp as f64;
                    base_speed + (script.dip_speed - base_speed) * w
                } else if t < t1 + dip_ramp + script.dip_hold_ticks {
                    script.dip_speed
                } else if t < t1 + dip_ramp + script.dip_hold_ticks + recover {
                    let w = (t - t1 - dip_ramp - script.dip_hold_ticks) as f64 / recover as f64;
                    script.dip_speed + (base_speed - script.dip_speed) * w
                } else {
                    base_speed
                }
            };
            let mut x = log_state(0).x;
            for t in 0..total {
                let log = log_state(t);
                if t <= t0 {
                    x = log.x;
                    out.push(log);
                    continue;
                }
                let v = speed_at(t);
                x += v * TICK_SECONDS;
                let w = smoothstep((t - t0) as f64 / script.duration as f64);
                let y = log.y + script.offset * w;
                let prev = out.last().unwrap();
                let yaw = {
                    let d = Vec2::new(x - prev.x, y - prev.y);
                    if d.norm() > 1e-3 {
                        d.angle()
                    } else {
                        prev.yaw
                    }
                };
                out.push(AgentState {
                    x,
                    y,
                    yaw: normalize_angle(yaw),
                    speed: v,
                    ..log
                });
            }
            out
        }
        EgoPolicy::LeftTurn(script) => {
            let turn_lane = seg
                .map
                .lane("turn")
                .expect("left-turn script needs the intersection map");
            let north = seg.map.lane("north_out").expect("intersection map");
            let turn_len = turn_lane.length();
            let mut out: Vec<AgentState> = Vec::with_capacity(total);
            let t0 = script.at_tick;
            let brake_lead = 12usize; // ticks of pre-turn deceleration
            let mut s_on_path = 0.0; // arc length along turn + north lanes
            for t in 0..total {
                let log = log_state(t);
                if t + brake_lead < t0 {
                    out.push(log);
                    continue;
                }
                if t < t0 {
                    // decelerate toward the turn speed while still on the log path
                    let w = 1.0 - (t0 - t) as f64 / brake_lead as f64;
                    let v = log.speed + (script.turn_speed - log.speed) * w;
                    let prev = out.last().unwrap();
                    let x = prev.x + v * TICK_SECONDS;
                    out.push(AgentState {
                        x,
                        speed: v,
                        ..log
                    });
                    continue;
                }
                // on the turn path, then the northbound exit
                let v = script.turn_speed;
                s_on_path += v * TICK_SECONDS;
                let (pos, yaw) = if s_on_path <= turn_len {
                    (
                        point_at_arclength(&turn_lane.centerline, s_on_path),
                        heading_at_arclength(&turn_lane.centerline, s_on_path),
                    )
                } else {
                    let s2 = s_on_path - turn_len;
                    (
                        point_at_arclength(&north.centerline, s2),
                        heading_at_arclength(&north.centerline, s2),
                    )
                };
                out.push(AgentState {
                    x: pos.x,
                    y: pos.y,
                    yaw: normalize_angle(yaw),
                    speed: v,
                    ..log
                });
            }
            out
        }
    };
    Ok(states)
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Run one segment through the closed loop.
pub fn run_segment(
    seg: &Segment,
    cfg: &SimConfig,
    models: &Models,
) -> Result<SimTrace, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sim_start = seg.init_steps;
    let total = seg.total_steps();

    // --- ego selection ---
    let present = seg.agents_at_sim_start();
    if present.is_empty() {
        return Err(EngineError::EmptySegment);
    }
    let ego = match cfg.ego {
        EgoSelection::Agent(id) => id,
        EgoSelection::Random => present[rng.gen_range(0..present.len())],
    };
    if !seg
        .tracks
        .get(&ego)
        .map(|t| t.history.covers(sim_start))
        .unwrap_or(false)
    {
        return Err(EngineError::EgoMissing(ego));
    }
    if cfg.predictor == PredictorChoice::Learned && models.predictor.is_none() {
        return Err(EngineError::NoPredictorModel);
    }

    let ego_script = scripted_ego(&cfg.ego_policy, seg, ego)?;
    let idm_params = IDMParams::default();

    let mut dims = BTreeMap::new();
    for (id, st) in &seg.tracks {
        let s0 = &st.history.states[0];
        dims.insert(*id, (s0.width, s0.length));
    }

    // --- initialize runtime state at the sim boundary ---
    let mut agents: BTreeMap<AgentId, AgentRt> = BTreeMap::new();
    let spawn = |id: AgentId,
                     st: &crate::scenario::SegmentTrack,
                     at: usize,
                     agents: &mut BTreeMap<AgentId, AgentRt>| {
        let state = *st.history.state_at(at).unwrap();
        let lo = st.history.first_step.max(at + 1 - cfg.history_steps.min(at + 1));
        let history: VecDeque<AgentState> =
            (lo..=at).map(|k| *st.history.state_at(k).unwrap()).collect();
        let idm = if cfg.background == BackgroundPolicy::Idm && id != ego {
            project_to_lane(&seg.map, state.pos(), state.yaw)
                .ok()
                .map(|proj| IdmRt {
                    lane_id: proj.frame.lane_id,
                    s: proj.frame.s,
                    d: proj.frame.d,
                    desired_speed: mean_speed(&st.history),
                })
        } else {
            None
        };
        agents.insert(
            id,
            AgentRt {
                current: state,
                mode: RtMode::Replay { idx: at },
                history,
                prev_speed: state.speed,
                idm,
                wrecked: false,
            },
        );
    };
    for (id, st) in &seg.tracks {
        if st.history.covers(sim_start) {
            spawn(*id, st, sim_start, &mut agents);
        }
    }

    // --- trace setup: initialization ticks come straight from the log ---
    let mut ticks: Vec<TickSnapshot> = Vec::with_capacity(total);
    for t in 0..=sim_start {
        let mut snapshot = BTreeMap::new();
        for (id, st) in &seg.tracks {
            if let Some(s) = st.history.state_at(t) {
                snapshot.insert(*id, (*s, ModeTag::L));
            }
        }
        ticks.push(TickSnapshot {
            tick: t,
            agents: snapshot,
            ego_divergence: 0.0,
        });
    }

    let mut takeover_events = Vec::new();
    let mut conflict_log = Vec::new();
    let mut cap_hits = Vec::new();
    let mut taken_over = BTreeSet::new();
    // pair -> yielder, while the yielder remains taken over
    let mut assignments: BTreeMap<(AgentId, AgentId), AgentId> = BTreeMap::new();

    // --- main loop: states at tick t produce states at t+1 ---
    for t in sim_start..total - 1 {
        // (1) region of interest around the ego
        let ego_pos = agents[&ego].current.pos();
        let roi: BTreeSet<AgentId> = agents
            .iter()
            .filter(|(id, rt)| **id == ego || rt.current.pos().dist(ego_pos) <= cfg.roi_radius)
            .map(|(id, _)| *id)
            .collect();

        let states_now: BTreeMap<AgentId, AgentState> =
            agents.iter().map(|(id, rt)| (*id, rt.current)).collect();
        let prev_speeds: BTreeMap<AgentId, f64> =
            agents.iter().map(|(id, rt)| (*id, rt.prev_speed)).collect();

        // (2)-(5) predict, detect, assign; iterate until stable
        let mut ego_one_step: Option<Vec2> = None;
        let mut final_preds: BTreeMap<AgentId, PredictedTrajectory> = BTreeMap::new();
        if cfg.background == BackgroundPolicy::Replay {
            let mut iterations = 0;
            loop {
                iterations += 1;
                let mut preds: BTreeMap<AgentId, PredictedTrajectory> = BTreeMap::new();
                for id in &roi {
                    let rt = &agents[id];
                    let pred = if rt.wrecked {
                        Some(PredictedTrajectory::single_mode(
                            *id,
                            vec![rt.current.pos(); cfg.horizon_steps],
                            0.1,
                            false,
                        ))
                    } else if *id == ego {
                        predict_ego(cfg, models, seg, rt, ego, &states_now, &roi)
                    } else {
                        match &rt.mode {
                            RtMode::Takeover(tk) => {
                                let features = crate::control::extract_features(
                                    &seg.map,
                                    &states_now,
                                    &prev_speeds,
                                    *id,
                                    FEATURE_SENSING_RADIUS,
                                )
                                .unwrap_or_else(|_| {
                                    crate::control::sentinel_features(&rt.current)
                                });
                                Some(rollout_takeover(
                                    *id,
                                    &tk.plan,
                                    &rt.current,
                                    &features,
                                    t,
                                    cfg.horizon_steps,
                                ))
                            }
                            RtMode::Replay { idx } | RtMode::Handback { idx, .. } => {
                                let track = &seg.tracks[id].history;
                                predict_replay(track, *idx, cfg.horizon_steps).ok()
                            }
                        }
                    };
                    if let Some(p) = pred {
                        if *id == ego {
                            ego_one_step = p.point_estimate().first().copied();
                        }
                        preds.insert(*id, p);
                    }
                }

                let conflicts = detect_all(&preds, &dims, cfg.box_inflation);
                final_preds = preds;
                if iterations == 1 {
                    for c in &conflicts {
                        conflict_log.push(ConflictRecord {
                            tick: t,
                            conflict: c.clone(),
                        });
                    }
                }

                if cfg.disable_takeover {
                    break;
                }

                let mut new_assignment = false;
                for conflict in &conflicts {
                    if assignments.contains_key(&conflict.pair) {
                        continue;
                    }
                    let (a, b) = conflict.pair;
                    let (Some(pa), Some(pb)) = (final_preds.get(&a), final_preds.get(&b)) else {
                        continue;
                    };
                    let yielder = decide_yield(conflict, pa, pb, ego);
                    assignments.insert(conflict.pair, yielder);
                    if agents[&yielder].mode_tag() == ModeTag::C || agents[&yielder].wrecked {
                        // already executing a takeover, or unable to move
                        continue;
                    }
                    let opposing = conflict.other(yielder);
                    let opp_arrival = final_preds
                        .get(&opposing)
                        .map(|p| arrival_step(p, conflict.cross_point))
                        .unwrap_or(conflict.first_step);
                    let margin_ticks = (cfg.yield_margin_s / TICK_SECONDS).round() as usize;
                    let rt = agents.get_mut(&yielder).unwrap();
                    let entry_idx = match rt.mode {
                        RtMode::Replay { idx } | RtMode::Handback { idx, .. } => idx,
                        RtMode::Takeover(_) => unreachable!("filtered above"),
                    };
                    let reference_speed = seg.tracks[&yielder]
                        .history
                        .state_at(entry_idx)
                        .map(|s| s.speed)
                        .unwrap_or(rt.current.speed);
                    let path = plan_or_straight(seg, &rt.current, conflict.cross_point);
                    let ctx = ConflictContext {
                        new_assignment: Some((conflict.clone(), true)),
                        any_active: true,
                    };
                    let mode = mode_transition(&AgentMode::ReplayL, t, &ctx, false);
                    debug_assert!(mode.is_takeover());
                    rt.mode = RtMode::Takeover(Box::new(TakeoverRt {
                        plan: TakeoverPlan {
                            path,
                            goal: conflict.cross_point,
                            yielding: true,
                            required_arrival_tick: t + opp_arrival + margin_ticks,
                            reference_speed,
                        },
                        yielding: true,
                        takeover_tick: t,
                        conflict: conflict.clone(),
                        infeasible_flagged: false,
                        entry_idx,
                    }));
                    taken_over.insert(yielder);
                    takeover_events.push(TakeoverEvent {
                        tick: t,
                        agent: yielder,
                        kind: EventKind::Takeover,
                        pair: conflict.pair,
                        goal: conflict.cross_point,
                    });
                    new_assignment = true;
                }

                if !new_assignment {
                    break;
                }
                if iterations >= cfg.max_conflict_iterations {
                    cap_hits.push(t);
                    break;
                }
            }
        }

        // conflicts still active at this tick, for handback decisions
        let active_pairs: BTreeSet<(AgentId, AgentId)> = conflict_log
            .iter()
            .filter(|r| r.tick == t)
            .map(|r| r.conflict.pair)
            .collect();

        // (6) step every agent one tick, ascending id
        let ids: Vec<AgentId> = agents.keys().copied().collect();
        let mut departed = Vec::new();
        for id in &ids {
            let rt = agents.get_mut(id).unwrap();
            rt.prev_speed = rt.current.speed;
            if rt.wrecked {
                rt.push_history(cfg.history_steps);
                continue;
            }
            if *id == ego {
                rt.current = ego_script[(t + 1).min(ego_script.len() - 1)];
                if let RtMode::Replay { idx } = &mut rt.mode {
                    *idx += 1; // the ego's nominal log position advances
                }
                rt.push_history(cfg.history_steps);
                continue;
            }
            if let Some(idm) = rt.idm.clone() {
                let next = idm_step(&seg.map, &idm_params, &idm, &states_now, *id, rt);
                rt.idm = Some(next);
                rt.push_history(cfg.history_steps);
                continue;
            }
            match &mut rt.mode {
                RtMode::Replay { idx } => {
                    let track = &seg.tracks[id].history;
                    if *idx < track.last_step() {
                        *idx += 1;
                        rt.current = *track.state_at(*idx).unwrap();
                    } else {
                        departed.push(*id);
                    }
                }
                RtMode::Takeover(tk) => {
                    let features = crate::control::extract_features(
                        &seg.map,
                        &states_now,
                        &prev_speeds,
                        *id,
                        FEATURE_SENSING_RADIUS,
                    )
                    .unwrap_or_else(|_| crate::control::sentinel_features(&rt.current));
                    let (action, info) = takeover_step(&tk.plan, &rt.current, &features, t);
                    if info.infeasible_yield && !tk.infeasible_flagged {
                        tk.infeasible_flagged = true;
                        takeover_events.push(TakeoverEvent {
                            tick: t,
                            agent: *id,
                            kind: EventKind::InfeasibleYield,
                            pair: tk.conflict.pair,
                            goal: tk.plan.goal,
                        });
                    }
                    rt.current = integrate_action(&rt.current, &action);
                }
                RtMode::Handback {
                    idx,
                    offset,
                    done,
                    total: blend_total,
                } => {
                    let track = &seg.tracks[id].history;
                    if *idx < track.last_step() {
                        *idx += 1;
                        *done += 1;
                        let log = *track.state_at(*idx).unwrap();
                        let w = 1.0 - *done as f64 / *blend_total as f64;
                        let pos = log.pos() + offset.scale(w.max(0.0));
                        rt.current = AgentState {
                            x: pos.x,
                            y: pos.y,
                            ..log
                        };
                        if done >= blend_total {
                            rt.current = log; // exact from here on
                            rt.mode = RtMode::Replay { idx: *idx };
                            takeover_events.push(TakeoverEvent {
                                tick: t + 1,
                                agent: *id,
                                kind: EventKind::HandbackEnd,
                                pair: (*id, *id),
                                goal: log.pos(),
                            });
                        }
                    } else {
                        departed.push(*id);
                    }
                }
            }
            rt.push_history(cfg.history_steps);
        }
        for id in departed {
            agents.remove(&id);
        }

        // (7) handback checks for taken-over agents
        let takeover_ids: Vec<AgentId> = agents
            .iter()
            .filter(|(_, rt)| matches!(rt.mode, RtMode::Takeover(_)))
            .map(|(id, _)| *id)
            .collect();
        for id in takeover_ids {
            let any_active = active_pairs.iter().any(|p| p.0 == id || p.1 == id);
            let rt = agents.get_mut(&id).unwrap();
            if rt.wrecked {
                continue;
            }
            let RtMode::Takeover(tk) = &rt.mode else { continue };
            let goal_reached =
                crate::control::goal_reached(&tk.plan, rt.current.pos(), cfg.goal_tolerance);
            let facade = AgentMode::ConflictAwareC {
                goal: tk.plan.goal,
                yielding: tk.yielding,
                takeover_tick: tk.takeover_tick,
                conflict: tk.conflict.clone(),
            };
            let ctx = ConflictContext {
                new_assignment: None,
                any_active,
            };
            if mode_transition(&facade, t, &ctx, goal_reached) == AgentMode::ReplayL {
                let track = &seg.tracks[&id].history;
                let resume = resync_index(track, rt.current.pos(), tk.entry_idx);
                // resuming replay must not re-create the conflict right away
                let replay_reconflicts = predict_replay(track, resume, cfg.horizon_steps)
                    .ok()
                    .map(|rp| {
                        final_preds.iter().any(|(oid, op)| {
                            *oid != id
                                && crate::conflict::detect_pair(
                                    &rp,
                                    op,
                                    dims[&id],
                                    dims[oid],
                                    cfg.box_inflation,
                                )
                                .is_some()
                        })
                    })
                    .unwrap_or(false);
                if replay_reconflicts {
                    continue;
                }
                let offset = rt.current.pos() - track.state_at(resume).unwrap().pos();
                let blend = cfg
                    .handback_blend_ticks
                    .max((offset.norm() / 0.45).ceil() as usize);
                assignments.retain(|pair, _| pair.0 != id && pair.1 != id);
                takeover_events.push(TakeoverEvent {
                    tick: t + 1,
                    agent: id,
                    kind: EventKind::HandbackStart,
                    pair: tk.conflict.pair,
                    goal: tk.plan.goal,
                });
                rt.mode = RtMode::Handback {
                    idx: resume,
                    offset,
                    done: 0,
                    total: blend.max(1),
                };
            }
        }

        // (7b) live collisions wreck the involved agents: they stop and
        // stay stopped, so an unresolved conflict leaves lasting damage
        {
            let ids: Vec<AgentId> = agents.keys().copied().collect();
            let mut hit: Vec<AgentId> = Vec::new();
            for i in 0..ids.len() {
                for j in i + 1..ids.len() {
                    let a = &agents[&ids[i]].current;
                    let b = &agents[&ids[j]].current;
                    if a.pos().dist(b.pos()) <= a.length + b.length
                        && crate::geometry::obb_overlap(&a.obb(), &b.obb())
                    {
                        hit.push(ids[i]);
                        hit.push(ids[j]);
                    }
                }
            }
            for id in hit {
                let rt = agents.get_mut(&id).unwrap();
                rt.wrecked = true;
                rt.current.speed = 0.0;
            }
        }

        // (8) record the snapshot at t+1
        let ego_divergence = match (ego_one_step, agents.get(&ego)) {
            (Some(p), Some(rt)) => p.dist(rt.current.pos()),
            _ => 0.0,
        };
        ticks.push(TickSnapshot {
            tick: t + 1,
            agents: agents
                .iter()
                .map(|(id, rt)| (*id, (rt.current, rt.mode_tag())))
                .collect(),
            ego_divergence,
        });
    }

    Ok(SimTrace {
        ego,
        sim_start,
        ticks,
        takeover_events,
        conflict_log,
        cap_hits,
        agent_dims: dims,
        taken_over,
    })
}

fn mean_speed(track: &TrackHistory) -> f64 {
    track.states.iter().map(|s| s.speed).sum::<f64>() / track.states.len() as f64
}

/// Ego prediction for conflict gating: the simulator does not assume the
/// ego's plan is known, so it predicts the ego like any other agent.
fn predict_ego(
    cfg: &SimConfig,
    models: &Models,
    seg: &Segment,
    rt: &AgentRt,
    ego: AgentId,
    states_now: &BTreeMap<AgentId, AgentState>,
    roi: &BTreeSet<AgentId>,
) -> Option<PredictedTrajectory> {
    match cfg.predictor {
        PredictorChoice::Replay => {
            let track = &seg.tracks[&ego].history;
            let idx = match rt.mode {
                RtMode::Replay { idx } => idx,
                _ => track.last_step(),
            };
            predict_replay(track, idx.min(track.last_step()), cfg.horizon_steps).ok()
        }
        PredictorChoice::Kinematic => predict_kinematic(&rt.history_track(ego), cfg.horizon_steps).ok(),
        PredictorChoice::Learned => {
            let (params, pcfg) = models.predictor.as_ref()?;
            let mut histories = BTreeMap::new();
            let mut current = BTreeMap::new();
            for id in roi {
                current.insert(*id, states_now[id]);
                histories.insert(*id, rt_history_for(seg, id, states_now));
            }
            histories.insert(ego, rt.history_track(ego));
            predict_learned(params, pcfg, &histories, &current, &seg.map, ego).ok()
        }
    }
}

/// Histories for the learned predictor: logged states by default.
fn rt_history_for(
    seg: &Segment,
    id: &AgentId,
    states_now: &BTreeMap<AgentId, AgentState>,
) -> TrackHistory {
    let _ = states_now;
    seg.tracks[id].history.clone()
}

/// Route to the cross point, falling back to a straight two-point path on
/// lane-graph failures (off-map agents still need a usable plan).
fn plan_or_straight(seg: &Segment, state: &AgentState, goal: Vec2) -> crate::geometry::BezierPath {
    if let Ok(start) = project_to_lane(&seg.map, state.pos(), state.yaw) {
        if let Ok(path) = crate::control::plan_route(&seg.map, &start, state.pos(), goal) {
            return path;
        }
    }
    let ahead = state.pos() + Vec2::new(state.yaw.cos(), state.yaw.sin()).scale(1.0);
    bezier_fit(&[state.pos(), ahead, goal]).unwrap_or_else(|_| {
        bezier_fit(&[state.pos(), goal + Vec2::new(1e-3, 0.0)]).expect("two distinct points")
    })
}

/// Log step whose position is closest to `pos` along the logged path,
/// searched from the takeover entry onward (arc-length resynchronization).
fn resync_index(track: &TrackHistory, pos: Vec2, entry_idx: usize) -> usize {
    let positions = track.positions();
    let proj = project_to_polyline(&positions, pos);
    // cumulative arc length per log step
    let mut acc = 0.0;
    let mut best = track.first_step;
    let mut best_err = f64::INFINITY;
    for (i, w) in positions.windows(2).enumerate() {
        let err = (acc - proj.s).abs();
        if err < best_err {
            best_err = err;
            best = track.first_step + i;
        }
        acc += w[0].dist(w[1]);
    }
    if (acc - proj.s).abs() < best_err {
        best = track.last_step();
    }
    best.max(entry_idx.saturating_sub(1))
}

/// One IDM baseline step: car-following along the agent's lane, holding its
/// initial lateral offset. Only same-lane leaders are considered, which is
/// exactly the blindness the baseline is known for.
fn idm_step(
    map: &crate::map::HDMap,
    params: &IDMParams,
    idm: &IdmRt,
    states_now: &BTreeMap<AgentId, AgentState>,
    id: AgentId,
    rt: &mut AgentRt,
) -> IdmRt {
    let lane = map.lane(&idm.lane_id).expect("idm lane exists");
    let me = rt.current;
    // nearest leader in my lane
    let mut best_gap = f64::INFINITY;
    let mut lead_speed = 0.0;
    for (oid, other) in states_now {
        if *oid == id {
            continue;
        }
        let proj = project_to_polyline(&lane.centerline, other.pos());
        if proj.d.abs() > lane.width / 2.0 {
            continue;
        }
        if proj.s <= idm.s {
            continue;
        }
        let gap = proj.s - idm.s - (me.length + other.length) / 2.0;
        if gap < best_gap {
            best_gap = gap;
            lead_speed = other.speed;
        }
    }
    let p = params.with_desired_speed(idm.desired_speed);
    let accel = if best_gap.is_finite() {
        idm_accel(me.speed, best_gap, lead_speed, &p)
    } else {
        // free road: the interaction term vanishes at a huge gap
        idm_accel(me.speed, 1e9, me.speed, &p)
    };
    let speed = (me.speed + accel * TICK_SECONDS).max(0.0);
    let s = idm.s + speed * TICK_SECONDS;
    let base = point_at_arclength(&lane.centerline, s);
    let heading = heading_at_arclength(&lane.centerline, s);
    let normal = Vec2::new(-heading.sin(), heading.cos());
    let pos = base + normal.scale(idm.d);
    rt.current = AgentState {
        x: pos.x,
        y: pos.y,
        yaw: normalize_angle(heading),
        speed,
        ..me
    };
    IdmRt {
        lane_id: idm.lane_id.clone(),
        s,
        d: idm.d,
        desired_speed: idm.desired_speed,
    }
}
