//! Deterministic synthetic maps and logs: straight multi-lane roads, a toy
//! intersection, cut-in and unprotected-left conflict scenarios, benign
//! traffic, and constant-velocity tracks for predictor training. Everything
//! here is seeded and reproducible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec2;
use crate::map::{Adjacency, AdjacencyRelation, HDMap, Lane};
use crate::scenario::{
    AgentId, AgentState, LogScenario, TrackHistory, SEGMENT_TOTAL_STEPS, TICK_SECONDS,
};

pub const LANE_WIDTH: f64 = 3.6;

/// Straight road with `n_lanes` parallel lanes along +x, lane 0 at y = 0,
/// markings, outer road edges, and left/right adjacency.
pub fn straight_map(n_lanes: usize, length: f64) -> HDMap {
    let samples = (length / 10.0).ceil() as usize;
    let line = |y: f64| -> Vec<Vec2> {
        (0..=samples)
            .map(|i| Vec2::new(i as f64 * length / samples as f64, y))
            .collect()
    };
    let mut lanes = Vec::new();
    let mut adjacency = Vec::new();
    for i in 0..n_lanes {
        let y = i as f64 * LANE_WIDTH;
        lanes.push(Lane {
            id: format!("l{i}"),
            centerline: line(y),
            left: line(y + LANE_WIDTH / 2.0),
            right: line(y - LANE_WIDTH / 2.0),
            width: LANE_WIDTH,
        });
        if i + 1 < n_lanes {
            adjacency.push(Adjacency {
                from: format!("l{i}"),
                to: format!("l{}", i + 1),
                relation: AdjacencyRelation::LeftNeighbor,
            });
            adjacency.push(Adjacency {
                from: format!("l{}", i + 1),
                to: format!("l{i}"),
                relation: AdjacencyRelation::RightNeighbor,
            });
        }
    }
    let top = (n_lanes as f64 - 0.5) * LANE_WIDTH;
    HDMap {
        lanes,
        road_edges: vec![line(-LANE_WIDTH / 2.0), line(top)],
        adjacency,
    }
}

/// Toy intersection: an eastbound approach that either continues straight
/// or turns left across an opposing westbound lane into a northbound exit.
///
/// Lanes: `east_in` (y=0, x in [-160,-10]), `east_out` (y=0, x in
/// [-10,160]), `west` (y=3.6, running from +x to -x), `turn` (connector
/// from the end of east_in curving north), `north_out` (x=2, y in
/// [12,160]). The connector crosses `west` near (0.9, 3.6).
pub fn intersection_map() -> HDMap {
    let xline = |y: f64, x0: f64, x1: f64| -> Vec<Vec2> {
        let n = ((x1 - x0).abs() / 10.0).ceil() as usize;
        (0..=n)
            .map(|i| Vec2::new(x0 + (x1 - x0) * i as f64 / n as f64, y))
            .collect()
    };
    let turn: Vec<Vec2> = vec![
        Vec2::new(-10.0, 0.0),
        Vec2::new(-6.0, 0.2),
        Vec2::new(-2.5, 0.9),
        Vec2::new(0.0, 2.0),
        Vec2::new(1.3, 4.4),
        Vec2::new(1.9, 7.5),
        Vec2::new(2.0, 12.0),
    ];
    let north: Vec<Vec2> = (0..=15)
        .map(|i| Vec2::new(2.0, 12.0 + i as f64 * 10.0))
        .collect();
    HDMap {
        lanes: vec![
            Lane {
                id: "east_in".into(),
                centerline: xline(0.0, -160.0, -10.0),
                left: xline(LANE_WIDTH / 2.0, -160.0, -10.0),
                right: xline(-LANE_WIDTH / 2.0, -160.0, -10.0),
                width: LANE_WIDTH,
            },
            Lane {
                id: "east_out".into(),
                centerline: xline(0.0, -10.0, 160.0),
                left: xline(LANE_WIDTH / 2.0, -10.0, 160.0),
                right: xline(-LANE_WIDTH / 2.0, -10.0, 160.0),
                width: LANE_WIDTH,
            },
            Lane {
                id: "west".into(),
                centerline: xline(LANE_WIDTH, 160.0, -160.0),
                left: xline(LANE_WIDTH / 2.0, 160.0, -160.0),
                right: xline(LANE_WIDTH * 1.5, 160.0, -160.0),
                width: LANE_WIDTH,
            },
            Lane {
                id: "turn".into(),
                centerline: turn,
                left: vec![],
                right: vec![],
                width: LANE_WIDTH,
            },
            Lane {
                id: "north_out".into(),
                centerline: north,
                left: vec![],
                right: vec![],
                width: LANE_WIDTH,
            },
        ],
        road_edges: vec![
            xline(-LANE_WIDTH / 2.0, -160.0, 160.0),
            xline(LANE_WIDTH * 1.5, 160.0, -160.0),
        ],
        adjacency: vec![
            Adjacency {
                from: "east_in".into(),
                to: "east_out".into(),
                relation: AdjacencyRelation::Successor,
            },
            Adjacency {
                from: "east_in".into(),
                to: "turn".into(),
                relation: AdjacencyRelation::Successor,
            },
            Adjacency {
                from: "turn".into(),
                to: "north_out".into(),
                relation: AdjacencyRelation::Successor,
            },
        ],
    }
}

/// Constant-speed straight track along +x at a given lateral position.
pub fn constant_track(id: u64, x0: f64, y: f64, speed: f64, steps: usize) -> TrackHistory {
    TrackHistory {
        agent_id: AgentId(id),
        first_step: 0,
        states: (0..steps)
            .map(|i| AgentState {
                x: x0 + speed * i as f64 * TICK_SECONDS,
                y,
                width: 1.8,
                length: 4.4,
                yaw: 0.0,
                speed,
            })
            .collect(),
    }
}

/// Constant-speed straight track in the -x direction (westbound).
pub fn constant_track_west(id: u64, x0: f64, y: f64, speed: f64, steps: usize) -> TrackHistory {
    TrackHistory {
        agent_id: AgentId(id),
        first_step: 0,
        states: (0..steps)
            .map(|i| AgentState {
                x: x0 - speed * i as f64 * TICK_SECONDS,
                y,
                width: 1.8,
                length: 4.4,
                yaw: crate::geometry::normalize_angle(std::f64::consts::PI),
                speed,
            })
            .collect(),
    }
}

/// Benign traffic: platoons with large constant gaps on a 3-lane road.
/// Nothing closes on anything, so replay is already conflict-free.
pub fn no_conflict_log(seed: u64) -> LogScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = straight_map(3, 600.0);
    let mut tracks = Vec::new();
    let mut id = 1u64;
    for lane in 0..3 {
        let speed = rng.gen_range(6.0..11.0);
        let mut x = rng.gen_range(0.0..20.0);
        for _ in 0..4 {
            tracks.push(constant_track(
                id,
                x,
                lane as f64 * LANE_WIDTH,
                speed,
                SEGMENT_TOTAL_STEPS,
            ));
            id += 1;
            x += rng.gen_range(60.0..90.0);
        }
    }
    LogScenario::new(HDMap::default(), tracks)
        .expect("synthetic tracks are valid")
        .with_map(map)
}

/// Roles of the agents in a crafted conflict scenario.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioRoles {
    pub ego: AgentId,
    /// The background agent expected to be taken over.
    pub victim: AgentId,
    /// Tick at which the ego's scripted deviation begins.
    pub script_tick: usize,
}

/// Cut-in scenario: the ego is logged in the left lane at constant speed;
/// a follower runs in the right lane slightly behind. The ego script (not
/// the log) merges right in front of the follower and briefly slows, so
/// blind replay rear-ends it.
///
/// `jitter` perturbs speeds and gaps deterministically.
pub fn cut_in_log(seed: u64) -> (LogScenario, ScenarioRoles) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = straight_map(2, 520.0);
    let speed = 12.0 + rng.gen_range(-1.0..1.0);
    let ego_x0 = 10.0 + rng.gen_range(0.0..6.0);
    let follower_gap = 8.0 + rng.gen_range(0.0..3.0);
    let script_tick = 70 + rng.gen_range(0..15) as usize;

    let mut tracks = vec![
        // ego: left lane, constant speed, logged straight
        constant_track(1, ego_x0, LANE_WIDTH, speed, SEGMENT_TOTAL_STEPS),
        // follower: right lane, same speed, slightly behind the ego
        constant_track(2, ego_x0 - follower_gap, 0.0, speed, SEGMENT_TOTAL_STEPS),
    ];
    // fillers far from the action, same-speed chains with big gaps
    let mut id = 3u64;
    for lane in 0..2 {
        let mut x = ego_x0 + 120.0 + rng.gen_range(0.0..20.0);
        for _ in 0..5 {
            tracks.push(constant_track(
                id,
                x,
                lane as f64 * LANE_WIDTH,
                speed,
                SEGMENT_TOTAL_STEPS,
            ));
            id += 1;
            x += rng.gen_range(55.0..75.0);
        }
    }
    let mut x = ego_x0 - 90.0 - rng.gen_range(0.0..20.0);
    for lane in 0..2 {
        tracks.push(constant_track(
            id,
            x,
            lane as f64 * LANE_WIDTH,
            speed,
            SEGMENT_TOTAL_STEPS,
        ));
        id += 1;
        x -= rng.gen_range(60.0..80.0);
    }

    let log = LogScenario::new(HDMap::default(), tracks)
        .expect("synthetic tracks are valid")
        .with_map(map);
    (
        log,
        ScenarioRoles {
            ego: AgentId(1),
            victim: AgentId(2),
            script_tick,
        },
    )
}

/// Unprotected-left scenario on the toy intersection: the ego is logged
/// driving straight east through the junction; an opposing westbound car is
/// timed to pass the turn path just as the scripted left turn crosses it.
pub fn left_turn_log(seed: u64) -> (LogScenario, ScenarioRoles) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = intersection_map();
    let ego_speed = 10.0;
    let ego_x0 = -90.0 - rng.gen_range(0.0..8.0);
    // entry tick: ego reaches x = -10 (turn entry) at this tick in the log
    let entry_tick = ((-10.0 - ego_x0) / (ego_speed * TICK_SECONDS)).round() as usize;
    // the scripted turn reaches the crossing (~12 m of path at ~6 m/s)
    // about 20 ticks after entry
    let cross_tick = entry_tick + 18 + rng.gen_range(0..4) as usize;
    let opp_speed = 11.5 + rng.gen_range(-0.5..0.5);
    // westbound agent that reaches x ~ 0.9 exactly at cross_tick
    let opp_x0 = 0.9 + opp_speed * cross_tick as f64 * TICK_SECONDS;

    let mut tracks = vec![
        constant_track(1, ego_x0, 0.0, ego_speed, SEGMENT_TOTAL_STEPS),
        constant_track_west(2, opp_x0, LANE_WIDTH, opp_speed, SEGMENT_TOTAL_STEPS),
    ];
    // fillers: eastbound traffic far ahead, westbound far behind the
    // opposing car, all constant speed
    let mut id = 3u64;
    let mut x = 60.0 + rng.gen_range(0.0..15.0);
    for _ in 0..5 {
        tracks.push(constant_track(id, x, 0.0, ego_speed, SEGMENT_TOTAL_STEPS));
        id += 1;
        x += rng.gen_range(55.0..70.0);
    }
    // far enough back that even a junction wreck cannot reach them within
    // the segment
    let mut xw = opp_x0 + 230.0 + rng.gen_range(0.0..15.0);
    for _ in 0..5 {
        tracks.push(constant_track_west(
            id,
            xw,
            LANE_WIDTH,
            opp_speed,
            SEGMENT_TOTAL_STEPS,
        ));
        id += 1;
        xw += rng.gen_range(70.0..90.0);
    }

    let log = LogScenario::new(HDMap::default(), tracks)
        .expect("synthetic tracks are valid")
        .with_map(map);
    (
        log,
        ScenarioRoles {
            ego: AgentId(1),
            victim: AgentId(2),
            script_tick: entry_tick,
        },
    )
}

/// A corpus entry: the log, its roles, and which scripted deviation the
/// ego performs.
pub struct CorpusEntry {
    pub log: LogScenario,
    pub roles: ScenarioRoles,
    pub kind: CorpusKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    CutIn,
    LeftTurn,
    Benign,
}

/// The 20-segment synthetic conflict corpus: cut-ins, unprotected lefts,
/// and benign filler scenarios.
pub fn conflict_corpus(seed: u64) -> Vec<CorpusEntry> {
    let mut entries = Vec::new();
    for k in 0..8u64 {
        let (log, roles) = cut_in_log(seed.wrapping_add(100 + k));
        entries.push(CorpusEntry {
            log,
            roles,
            kind: CorpusKind::CutIn,
        });
    }
    for k in 0..6u64 {
        let (log, roles) = left_turn_log(seed.wrapping_add(200 + k));
        entries.push(CorpusEntry {
            log,
            roles,
            kind: CorpusKind::LeftTurn,
        });
    }
    for k in 0..6u64 {
        let log = no_conflict_log(seed.wrapping_add(300 + k));
        let ego = *log.tracks.keys().next().expect("non-empty log");
        entries.push(CorpusEntry {
            log,
            roles: ScenarioRoles {
                ego,
                victim: ego,
                script_tick: 0,
            },
            kind: CorpusKind::Benign,
        });
    }
    entries
}

/// Constant-velocity single-agent logs for predictor training: random
/// start, heading along +x with a small lateral drift, random speed.
pub fn constant_velocity_logs(n_tracks: usize, seed: u64) -> Vec<LogScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::with_capacity(n_tracks);
    for k in 0..n_tracks {
        let speed = rng.gen_range(2.0..14.0);
        let heading: f64 = rng.gen_range(-0.5..0.5);
        let x0 = rng.gen_range(-20.0..20.0);
        let y0 = rng.gen_range(-20.0..20.0);
        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        let states: Vec<AgentState> = (0..SEGMENT_TOTAL_STEPS)
            .map(|i| AgentState {
                x: x0 + vx * i as f64 * TICK_SECONDS,
                y: y0 + vy * i as f64 * TICK_SECONDS,
                width: 1.8,
                length: 4.4,
                yaw: heading,
                speed,
            })
            .collect();
        let track = TrackHistory {
            agent_id: AgentId(k as u64 + 1),
            first_step: 0,
            states,
        };
        logs.push(LogScenario::new(HDMap::default(), vec![track]).expect("valid"));
    }
    logs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::segment_log;

    #[test]
    fn straight_map_is_valid() {
        let map = straight_map(3, 600.0);
        map.validate().unwrap();
        assert_eq!(map.lanes.len(), 3);
        assert_eq!(map.left_neighbor("l0"), Some("l1"));
        assert_eq!(map.right_neighbor("l2"), Some("l1"));
    }

    #[test]
    fn intersection_map_is_valid_and_connected() {
        let map = intersection_map();
        map.validate().unwrap();
        assert!(map.successors("east_in").contains(&"turn"));
        assert!(map.successors("turn").contains(&"north_out"));
    }

    #[test]
    fn synthetic_logs_segment_cleanly() {
        for log in [
            no_conflict_log(1),
            cut_in_log(2).0,
            left_turn_log(3).0,
        ] {
            let segs = segment_log(&log).unwrap();
            assert_eq!(segs.len(), 1);
            assert!(segs[0].tracks.len() >= 10);
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = conflict_corpus(7);
        let b = conflict_corpus(7);
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.roles.ego, y.roles.ego);
            for (id, t) in &x.log.tracks {
                assert_eq!(t.states, y.log.tracks[id].states);
            }
        }
    }
}
