//! Evaluation metrics over simulated traces — displacement error, collision
//! and reactivity rates, takeover ratio, progress — plus the intelligent
//! driver model used as a baseline and expert-data generator.
//!
//! Collision checking here deliberately shares no code with the conflict
//! detector: it walks box edges and containment instead of separating axes,
//! so the measurement cannot confirm its own subject.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTrace;
use crate::geometry::Vec2;
use crate::scenario::{AgentId, Segment, TICK_SECONDS};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("horizon {requested:.1}s exceeds the simulated length {available:.1}s")]
    HorizonExceedsTrace { requested: f64, available: f64 },
}

// ---------------------------------------------------------------------------
// Independent collision check
// ---------------------------------------------------------------------------

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b - a).cross(c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

fn segments_intersect(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d1 = orient(b0, b1, a0);
    let d2 = orient(b0, b1, a1);
    let d3 = orient(a0, a1, b0);
    let d4 = orient(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b0, b1, a0))
        || (d2 == 0.0 && on_segment(b0, b1, a1))
        || (d3 == 0.0 && on_segment(a0, a1, b0))
        || (d4 == 0.0 && on_segment(a0, a1, b1))
}

fn point_in_quad(p: Vec2, quad: &[Vec2; 4]) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let o = orient(quad[i], quad[(i + 1) % 4], p);
        if o > 0.0 {
            pos = true;
        }
        if o < 0.0 {
            neg = true;
        }
    }
    !(pos && neg)
}

/// Convex quad overlap by edge intersection plus mutual containment.
pub fn quads_overlap(a: &[Vec2; 4], b: &[Vec2; 4]) -> bool {
    for i in 0..4 {
        for j in 0..4 {
            if segments_intersect(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]) {
                return true;
            }
        }
    }
    point_in_quad(a[0], b) || point_in_quad(b[0], a)
}

fn state_quad(state: &crate::scenario::AgentState) -> [Vec2; 4] {
    state.obb().corners()
}

/// Agents that ever overlap another agent's live box, each counted once
/// no matter how many frames or partners the contact spans.
pub fn colliding_agents(trace: &SimTrace) -> BTreeSet<AgentId> {
    let mut hit = BTreeSet::new();
    for snap in &trace.ticks {
        let ids: Vec<&AgentId> = snap.agents.keys().collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let (sa, _) = &snap.agents[ids[i]];
                let (sb, _) = &snap.agents[ids[j]];
                if sa.pos().dist(sb.pos()) > (sa.length + sb.length) {
                    continue; // cheap reject, boxes cannot reach
                }
                if quads_overlap(&state_quad(sa), &state_quad(sb)) {
                    hit.insert(*ids[i]);
                    hit.insert(*ids[j]);
                }
            }
        }
    }
    hit
}

/// First tick with a live box overlap, if any.
pub fn first_collision_tick(trace: &SimTrace) -> Option<usize> {
    for snap in &trace.ticks {
        let ids: Vec<&AgentId> = snap.agents.keys().collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let (sa, _) = &snap.agents[ids[i]];
                let (sb, _) = &snap.agents[ids[j]];
                if sa.pos().dist(sb.pos()) > (sa.length + sb.length) {
                    continue;
                }
                if quads_overlap(&state_quad(sa), &state_quad(sb)) {
                    return Some(snap.tick);
                }
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Average displacement error against the ground-truth log, up to
/// `horizon_s` seconds of simulated time. Agents absent from the log at a
/// tick are excluded from that tick's mean.
pub fn ade(trace: &SimTrace, seg: &Segment, horizon_s: f64) -> Result<f64, MetricsError> {
    let sim_len_s = (seg.sim_steps as f64) * TICK_SECONDS;
    if horizon_s > sim_len_s + 1e-9 {
        return Err(MetricsError::HorizonExceedsTrace {
            requested: horizon_s,
            available: sim_len_s,
        });
    }
    let horizon_ticks = (horizon_s / TICK_SECONDS).round() as usize;
    let lo = trace.sim_start;
    let hi = trace.sim_start + horizon_ticks;
    let mut total = 0.0;
    let mut count = 0usize;
    for snap in &trace.ticks {
        if snap.tick <= lo || snap.tick > hi {
            continue;
        }
        for (id, (state, _)) in &snap.agents {
            if let Some(st) = seg.tracks.get(id) {
                if let Some(logged) = st.history.state_at(snap.tick) {
                    total += state.pos().dist(logged.pos());
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn agents_in_trace(trace: &SimTrace) -> BTreeSet<AgentId> {
    trace
        .ticks
        .iter()
        .flat_map(|s| s.agents.keys().copied())
        .collect()
}

/// Collision rate (colliding agents over all agents, multi-frame contacts
/// counted once) and reactivity rate (collision-free scenarios over all
/// scenarios).
pub fn collision_and_reactivity(traces: &[SimTrace]) -> (f64, f64) {
    let mut colliding = 0usize;
    let mut total_agents = 0usize;
    let mut clean_scenarios = 0usize;
    for trace in traces {
        let hit = colliding_agents(trace);
        colliding += hit.len();
        total_agents += agents_in_trace(trace).len();
        if hit.is_empty() {
            clean_scenarios += 1;
        }
    }
    let collision_rate = if total_agents == 0 {
        0.0
    } else {
        colliding as f64 / total_agents as f64
    };
    let reactivity = if traces.is_empty() {
        0.0
    } else {
        clean_scenarios as f64 / traces.len() as f64
    };
    (collision_rate, reactivity)
}

/// Relevant ratio (distinct taken-over agents over all agents) and progress
/// (mean per-agent path length over the simulated window).
pub fn relevant_and_progress(traces: &[SimTrace]) -> (f64, f64) {
    let mut taken = 0usize;
    let mut total_agents = 0usize;
    let mut path_total = 0.0;
    let mut agents_counted = 0usize;
    for trace in traces {
        taken += trace.taken_over.len();
        let ids = agents_in_trace(trace);
        total_agents += ids.len();
        for id in &ids {
            let mut prev: Option<Vec2> = None;
            let mut dist = 0.0;
            for snap in &trace.ticks {
                if snap.tick < trace.sim_start {
                    continue;
                }
                if let Some((state, _)) = snap.agents.get(id) {
                    if let Some(p) = prev {
                        dist += state.pos().dist(p);
                    }
                    prev = Some(state.pos());
                }
            }
            path_total += dist;
            agents_counted += 1;
        }
    }
    let relevant = if total_agents == 0 {
        0.0
    } else {
        taken as f64 / total_agents as f64
    };
    let progress = if agents_counted == 0 {
        0.0
    } else {
        path_total / agents_counted as f64
    };
    (relevant, progress)
}

/// Aggregate counts behind the rates, so unions of trace sets combine
/// additively.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MetricCounts {
    pub agents: usize,
    pub scenarios: usize,
    pub colliding_agents: usize,
    pub collision_free_scenarios: usize,
    pub taken_over_agents: usize,
    pub takeover_events: usize,
}

/// The evaluation report: displacement errors at standard horizons plus
/// the rate metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// horizon seconds -> mean displacement error (m)
    pub ade_at: BTreeMap<u32, f64>,
    pub collision_rate: f64,
    pub reactivity_rate: f64,
    pub relevant_ratio: f64,
    pub progress: f64,
    pub counts: MetricCounts,
}

pub const ADE_HORIZONS: [u32; 5] = [5, 10, 15, 20, 25];

impl MetricsReport {
    pub fn compute(pairs: &[(&SimTrace, &Segment)]) -> Result<MetricsReport, MetricsError> {
        let traces: Vec<SimTrace> = pairs.iter().map(|(t, _)| (*t).clone()).collect();
        let mut ade_at = BTreeMap::new();
        for h in ADE_HORIZONS {
            let mut total = 0.0;
            for (trace, seg) in pairs {
                total += ade(trace, seg, h as f64)?;
            }
            let mean = if pairs.is_empty() {
                0.0
            } else {
                total / pairs.len() as f64
            };
            ade_at.insert(h, mean);
        }
        let (collision_rate, reactivity_rate) = collision_and_reactivity(&traces);
        let (relevant_ratio, progress) = relevant_and_progress(&traces);
        let counts = MetricCounts {
            agents: traces.iter().map(|t| agents_in_trace(t).len()).sum(),
            scenarios: traces.len(),
            colliding_agents: traces.iter().map(|t| colliding_agents(t).len()).sum(),
            collision_free_scenarios: traces
                .iter()
                .filter(|t| colliding_agents(t).is_empty())
                .count(),
            taken_over_agents: traces.iter().map(|t| t.taken_over.len()).sum(),
            takeover_events: traces.iter().map(|t| t.takeover_count()).sum(),
        };
        Ok(MetricsReport {
            ade_at,
            collision_rate,
            reactivity_rate,
            relevant_ratio,
            progress,
            counts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Intelligent driver model
// ---------------------------------------------------------------------------

/// Car-following parameters. The values are the standard literature
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IDMParams {
    /// Desired free-flow speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub t_headway: f64,
    /// Maximum acceleration, m/s^2.
    pub a_max: f64,
    /// Comfortable braking deceleration, m/s^2.
    pub b_comf: f64,
    /// Jam gap, m.
    pub s0: f64,
    /// Free-flow exponent.
    pub delta: u32,
}

impl Default for IDMParams {
    fn default() -> Self {
        IDMParams {
            v0: 15.0,
            t_headway: 1.5,
            a_max: 1.4,
            b_comf: 2.0,
            s0: 2.0,
            delta: 4,
        }
    }
}

impl IDMParams {
    pub fn with_desired_speed(&self, v0: f64) -> IDMParams {
        IDMParams {
            v0: v0.max(0.1),
            ..self.clone()
        }
    }
}

/// Acceleration limits shared with the takeover controller.
pub const IDM_ACCEL_MIN: f64 = -8.0;
pub const IDM_ACCEL_MAX: f64 = 4.0;

/// Intelligent-driver-model acceleration:
/// a_max [1 - (v/v0)^delta - (s*/gap)^2] with
/// s* = s0 + v T + v (v - v_lead) / (2 sqrt(a_max b)),
/// clamped to [-8, 4]. A non-positive gap is an emergency brake.
pub fn idm_accel(self_speed: f64, gap: f64, lead_speed: f64, p: &IDMParams) -> f64 {
    if gap <= 0.0 {
        return IDM_ACCEL_MIN;
    }
    let v = self_speed;
    let s_star =
        p.s0 + v * p.t_headway + v * (v - lead_speed) / (2.0 * (p.a_max * p.b_comf).sqrt());
    let accel = p.a_max * (1.0 - (v / p.v0).powi(p.delta as i32) - (s_star / gap).powi(2));
    accel.clamp(IDM_ACCEL_MIN, IDM_ACCEL_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ModeTag, TickSnapshot};
    use crate::scenario::AgentState;

    fn state(x: f64, y: f64, speed: f64) -> AgentState {
        AgentState {
            x,
            y,
            width: 1.8,
            length: 4.4,
            yaw: 0.0,
            speed,
        }
    }

    /// Hand-rolled trace: one agent per entry of `paths`, positions given
    /// per tick starting at sim_start.
    fn toy_trace(paths: &[Vec<Vec2>], taken_over: &[u64]) -> SimTrace {
        let n_ticks = paths[0].len();
        let mut ticks = Vec::new();
        for t in 0..n_ticks {
            let mut agents = BTreeMap::new();
            for (i, path) in paths.iter().enumerate() {
                agents.insert(
                    AgentId(i as u64 + 1),
                    (state(path[t].x, path[t].y, 5.0), ModeTag::L),
                );
            }
            ticks.push(TickSnapshot {
                tick: t,
                agents,
                ego_divergence: 0.0,
            });
        }
        SimTrace {
            ego: AgentId(1),
            sim_start: 0,
            ticks,
            takeover_events: vec![],
            conflict_log: vec![],
            cap_hits: vec![],
            agent_dims: BTreeMap::new(),
            taken_over: taken_over.iter().map(|i| AgentId(*i)).collect(),
        }
    }

    fn toy_segment(paths: &[Vec<Vec2>]) -> Segment {
        let tracks = paths
            .iter()
            .enumerate()
            .map(|(i, path)| crate::scenario::TrackHistory {
                agent_id: AgentId(i as u64 + 1),
                first_step: 0,
                states: path.iter().map(|p| state(p.x, p.y, 5.0)).collect(),
            })
            .collect::<Vec<_>>();
        let mut map = BTreeMap::new();
        for t in tracks {
            map.insert(
                t.agent_id,
                crate::scenario::SegmentTrack {
                    history: t,
                    late_entrant: false,
                },
            );
        }
        Segment {
            map: std::sync::Arc::new(crate::map::HDMap::default()),
            tracks: map,
            init_steps: 0,
            sim_steps: paths[0].len() - 1,
            source_start: 0,
        }
    }

    #[test]
    fn ade_zero_on_identical_trace() {
        let path: Vec<Vec2> = (0..51).map(|i| Vec2::new(i as f64 * 0.5, 0.0)).collect();
        let trace = toy_trace(std::slice::from_ref(&path), &[]);
        let seg = toy_segment(&[path]);
        for h in [1.0, 3.0, 5.0] {
            assert_eq!(ade(&trace, &seg, h).unwrap(), 0.0);
        }
    }

    #[test]
    fn ade_constant_offset_is_pythagorean() {
        let logged: Vec<Vec2> = (0..51).map(|i| Vec2::new(i as f64 * 0.5, 0.0)).collect();
        let offset: Vec<Vec2> = logged.iter().map(|p| *p + Vec2::new(3.0, 4.0)).collect();
        let trace = toy_trace(&[offset], &[]);
        let seg = toy_segment(&[logged]);
        let e = ade(&trace, &seg, 5.0).unwrap();
        assert!((e - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ade_matches_naive_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 41;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec2> {
            let mut p = Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            (0..n)
                .map(|_| {
                    p = p + Vec2::new(rng.gen_range(0.0..0.4), rng.gen_range(-0.2..0.2));
                    p
                })
                .collect()
        };
        let logged = vec![mk(&mut rng), mk(&mut rng)];
        let simmed = vec![mk(&mut rng), mk(&mut rng)];
        let trace = toy_trace(&simmed, &[]);
        let seg = toy_segment(&logged);
        let horizon = 4.0;

        // naive oracle: explicit double loop
        let ticks = (horizon / TICK_SECONDS).round() as usize;
        let mut total = 0.0;
        let mut count = 0;
        for t in 1..=ticks {
            for a in 0..2 {
                total += simmed[a][t].dist(logged[a][t]);
                count += 1;
            }
        }
        let oracle = total / count as f64;
        let got = ade(&trace, &seg, horizon).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn ade_monotone_in_horizon() {
        let logged: Vec<Vec2> = (0..101).map(|i| Vec2::new(i as f64 * 0.5, 0.0)).collect();
        // drifts away over time
        let simmed: Vec<Vec2> = logged
            .iter()
            .enumerate()
            .map(|(i, p)| *p + Vec2::new(0.0, 0.01 * i as f64))
            .collect();
        let trace = toy_trace(&[simmed], &[]);
        let seg = toy_segment(&[logged]);
        let mut prev = 0.0;
        for h in [1.0, 2.0, 4.0, 8.0, 10.0] {
            let e = ade(&trace, &seg, h).unwrap();
            assert!(e >= prev - 1e-12);
            prev = e;
        }
    }

    #[test]
    fn horizon_beyond_trace_rejected() {
        let path: Vec<Vec2> = (0..11).map(|i| Vec2::new(i as f64, 0.0)).collect();
        let trace = toy_trace(std::slice::from_ref(&path), &[]);
        let seg = toy_segment(&[path]);
        assert!(matches!(
            ade(&trace, &seg, 100.0),
            Err(MetricsError::HorizonExceedsTrace { .. })
        ));
    }

    #[test]
    fn collision_rate_definition_arithmetic() {
        // 10 agents, agents 1 and 2 overlap for many frames: rate 0.20
        let mut paths: Vec<Vec<Vec2>> = Vec::new();
        paths.push((0..20).map(|_| Vec2::new(0.0, 0.0)).collect());
        paths.push((0..20).map(|_| Vec2::new(1.0, 0.0)).collect()); // overlapping
        for k in 2..10 {
            paths.push((0..20).map(|_| Vec2::new(k as f64 * 30.0, 50.0)).collect());
        }
        let trace = toy_trace(&paths, &[]);
        let (rate, reactivity) = collision_and_reactivity(&[trace]);
        assert!((rate - 0.2).abs() < 1e-12);
        assert_eq!(reactivity, 0.0);
    }

    #[test]
    fn reactivity_counts_clean_scenarios() {
        let clean: Vec<Vec<Vec2>> = vec![
            (0..20).map(|i| Vec2::new(i as f64, 0.0)).collect(),
            (0..20).map(|i| Vec2::new(i as f64, 50.0)).collect(),
        ];
        let dirty: Vec<Vec<Vec2>> = vec![
            (0..20).map(|_| Vec2::new(0.0, 0.0)).collect(),
            (0..20).map(|_| Vec2::new(1.0, 0.0)).collect(),
        ];
        let traces = vec![
            toy_trace(&clean, &[]),
            toy_trace(&clean, &[]),
            toy_trace(&clean, &[]),
            toy_trace(&dirty, &[]),
        ];
        let (_, reactivity) = collision_and_reactivity(&traces);
        assert!((reactivity - 0.75).abs() < 1e-12);
    }

    #[test]
    fn multi_frame_collision_counts_once() {
        // the same pair overlaps at every one of 20 frames
        let paths: Vec<Vec<Vec2>> = vec![
            (0..20).map(|_| Vec2::new(0.0, 0.0)).collect(),
            (0..20).map(|_| Vec2::new(1.0, 0.0)).collect(),
        ];
        let trace = toy_trace(&paths, &[]);
        let hit = colliding_agents(&trace);
        assert_eq!(hit.len(), 2); // two agents, one contact each
        let (rate, _) = collision_and_reactivity(&[trace]);
        assert!((rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relevant_ratio_and_progress() {
        let paths: Vec<Vec<Vec2>> = vec![
            // 2 m/s for 25 s: progress contribution 50 m
            (0..251).map(|i| Vec2::new(i as f64 * 0.2, 0.0)).collect(),
            (0..251).map(|i| Vec2::new(i as f64 * 0.2, 100.0)).collect(),
        ];
        let trace = toy_trace(&paths, &[]);
        let (relevant, progress) = relevant_and_progress(&[trace]);
        assert_eq!(relevant, 0.0);
        assert!((progress - 50.0).abs() < 1e-9);

        let trace2 = toy_trace(&paths, &[1]);
        let (relevant2, _) = relevant_and_progress(&[trace2]);
        assert!((relevant2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_additivity_over_trace_unions() {
        let clean: Vec<Vec<Vec2>> = vec![
            (0..20).map(|i| Vec2::new(i as f64, 0.0)).collect(),
            (0..20).map(|i| Vec2::new(i as f64, 60.0)).collect(),
        ];
        let dirty: Vec<Vec<Vec2>> = vec![
            (0..20).map(|_| Vec2::new(0.0, 0.0)).collect(),
            (0..20).map(|_| Vec2::new(1.0, 0.0)).collect(),
        ];
        let a = vec![toy_trace(&clean, &[1])];
        let b = vec![toy_trace(&dirty, &[])];
        let union: Vec<SimTrace> = a.iter().chain(b.iter()).cloned().collect();

        let (ca, _) = collision_and_reactivity(&a);
        let (cb, _) = collision_and_reactivity(&b);
        let (cu, ru) = collision_and_reactivity(&union);
        // weighted combination of counts
        let na = 2.0;
        let nb = 2.0;
        assert!((cu - (ca * na + cb * nb) / (na + nb)).abs() < 1e-12);
        assert!((ru - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idm_equilibrium_at_desired_speed_free_road() {
        let p = IDMParams::default();
        let a = idm_accel(p.v0, 1e9, p.v0, &p);
        assert!(a.abs() < 1e-6);
    }

    #[test]
    fn idm_standstill_at_jam_gap() {
        let p = IDMParams::default();
        // v = 0, gap = s0: s* = s0, interaction term = 1, free term = 1
        let a = idm_accel(0.0, p.s0, 0.0, &p);
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn idm_matches_direct_formula_oracle() {
        let p = IDMParams::default();
        // direct formula evaluation, computed independently
        let (v, gap, lead) = (10.0, 20.0, 8.0);
        let s_star = p.s0 + v * p.t_headway + v * (v - lead) / (2.0 * (p.a_max * p.b_comf).sqrt());
        let expect = p.a_max * (1.0 - (v / p.v0).powi(4) - (s_star / gap).powi(2));
        assert!((expect - (-0.7242042324305071)).abs() < 1e-9, "frozen oracle value");
        let got = idm_accel(v, gap, lead, &p);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn idm_non_positive_gap_is_emergency() {
        let p = IDMParams::default();
        assert_eq!(idm_accel(5.0, 0.0, 5.0, &p), IDM_ACCEL_MIN);
        assert_eq!(idm_accel(5.0, -1.0, 5.0, &p), IDM_ACCEL_MIN);
    }

    #[test]
    fn idm_respects_bounds_randomized() {
        use rand::{Rng, SeedableRng};
        let p = IDMParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = idm_accel(
                rng.gen_range(0.0..40.0),
                rng.gen_range(0.1..200.0),
                rng.gen_range(0.0..40.0),
                &p,
            );
            assert!((IDM_ACCEL_MIN..=IDM_ACCEL_MAX).contains(&a));
            assert!(a <= p.a_max + 1e-12 || a <= IDM_ACCEL_MAX);
        }
    }

    #[test]
    fn idm_platoon_converges_to_equilibrium() {
        let p = IDMParams::default();
        // leader at constant 10 m/s, 5 followers
        let mut xs = [100.0, 80.0, 60.0, 40.0, 20.0, 0.0];
        let mut vs = [10.0; 6];
        let car_len = 4.4;
        let total_ticks = 900; // 90 s
        let mut last_gaps: Vec<f64> = vec![];
        for tick in 0..total_ticks {
            let mut accels = [0.0; 6];
            for i in 1..6 {
                let gap = xs[i - 1] - xs[i] - car_len;
                accels[i] = idm_accel(vs[i], gap, vs[i - 1], &p);
            }
            for i in 0..6 {
                vs[i] = (vs[i] + accels[i] * TICK_SECONDS).max(0.0);
                xs[i] += vs[i] * TICK_SECONDS;
            }
            if tick >= 600 {
                let gaps: Vec<f64> = (1..6).map(|i| xs[i - 1] - xs[i]).collect();
                if !last_gaps.is_empty() {
                    for (g, lg) in gaps.iter().zip(&last_gaps) {
                        assert!(
                            (g - lg).abs() < 1e-3,
                            "gap still changing by {} after 60 s",
                            (g - lg).abs()
                        );
                    }
                }
                last_gaps = gaps;
            }
        }
    }
}
