//! Canonical data model for recorded driving logs: agent states, per-agent
//! track histories, whole scenarios, and 28-second evaluation segments.
//! Also the two file formats this crate ingests and emits: NGSIM-style CSV
//! (import only) and the line-delimited canonical log (lossless round-trip).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{normalize_angle, OrientedBox, Vec2};
use crate::map::HDMap;

/// Simulation tick length in seconds. Every horizon constant in this
/// crate assumes a 10 Hz log.
pub const TICK_SECONDS: f64 = 0.1;
/// Required log frequency.
pub const TICK_HZ: u32 = 10;
/// History window in ticks (3 s).
pub const HISTORY_STEPS: usize = 30;
/// Simulated horizon of one evaluation segment in ticks (25 s).
pub const SEGMENT_SIM_STEPS: usize = 250;
/// Total segment length in ticks (28 s).
pub const SEGMENT_TOTAL_STEPS: usize = HISTORY_STEPS + SEGMENT_SIM_STEPS;
/// Feet-to-meters conversion applied to NGSIM inputs.
pub const FEET_TO_METERS: f64 = 0.3048;
/// Speeds beyond this after unit conversion indicate a unit mistake.
pub const SPEED_SANITY_LIMIT: f64 = 70.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("missing required column {0:?} in header")]
    MissingColumn(String),
    #[error("frames not increasing for vehicle {vehicle} near line {line}")]
    NonMonotonicFrames { vehicle: u64, line: usize },
    #[error("speed {speed:.1} m/s after conversion exceeds {SPEED_SANITY_LIMIT} m/s; check the input units (NGSIM uses feet)")]
    UnitRange { speed: f64 },
    #[error("log too short to segment: {duration} < {SEGMENT_TOTAL_STEPS} steps")]
    TooShort { duration: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque identifier for one agent of a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u64);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for AgentId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(AgentId(s.parse()?))
    }
}

/// One agent's pose, extent and speed at one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Bounding-box width (lateral extent), m.
    pub width: f64,
    /// Bounding-box length (longitudinal extent), m.
    pub length: f64,
    /// Heading in [-pi, pi).
    pub yaw: f64,
    /// Speed, m/s, non-negative.
    pub speed: f64,
}

impl AgentState {
    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn obb(&self) -> OrientedBox {
        OrientedBox::new(
            self.pos(),
            Vec2::new(self.length / 2.0, self.width / 2.0),
            self.yaw,
        )
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.width > 0.0 && self.length > 0.0) {
            return Err(ScenarioError::Invalid(format!(
                "non-positive extent {}x{}",
                self.width, self.length
            )));
        }
        if self.speed < 0.0 {
            return Err(ScenarioError::Invalid(format!("negative speed {}", self.speed)));
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.yaw) {
            return Err(ScenarioError::Invalid(format!("yaw {} not normalized", self.yaw)));
        }
        Ok(())
    }
}

/// Contiguous recorded states of one agent at the fixed tick rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackHistory {
    pub agent_id: AgentId,
    /// Tick index of `states[0]` in the owning log.
    pub first_step: usize,
    pub states: Vec<AgentState>,
}

/// Slack allowed between per-tick displacement and the recorded speed.
pub const DISPLACEMENT_SLACK: f64 = 0.5;

impl TrackHistory {
    /// Last tick index covered by this track.
    pub fn last_step(&self) -> usize {
        self.first_step + self.states.len() - 1
    }

    pub fn covers(&self, step: usize) -> bool {
        step >= self.first_step && step <= self.last_step()
    }

    pub fn state_at(&self, step: usize) -> Option<&AgentState> {
        if self.covers(step) {
            Some(&self.states[step - self.first_step])
        } else {
            None
        }
    }

    /// Logged positions in order, for arc-length resynchronization.
    pub fn positions(&self) -> Vec<Vec2> {
        self.states.iter().map(|s| s.pos()).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.states.is_empty() {
            return Err(ScenarioError::Invalid(format!(
                "agent {}: empty track",
                self.agent_id
            )));
        }
        for s in &self.states {
            s.validate()?;
        }
        for (i, w) in self.states.windows(2).enumerate() {
            let moved = w[0].pos().dist(w[1].pos());
            let allowed = w[0].speed.max(w[1].speed) * TICK_SECONDS + DISPLACEMENT_SLACK;
            if moved > allowed {
                return Err(ScenarioError::Invalid(format!(
                    "agent {} step {}: displacement {moved:.2} m exceeds {allowed:.2} m",
                    self.agent_id,
                    self.first_step + i
                )));
            }
        }
        Ok(())
    }
}

/// Immutable recorded scenario: a map plus every agent's track.
#[derive(Debug, Clone)]
pub struct LogScenario {
    pub map: Arc<HDMap>,
    pub tracks: BTreeMap<AgentId, TrackHistory>,
    pub tick_hz: u32,
    pub duration_steps: usize,
}

impl LogScenario {
    pub fn new(map: HDMap, tracks: Vec<TrackHistory>) -> Result<Self, ScenarioError> {
        let duration = tracks
            .iter()
            .map(|t| t.last_step() + 1)
            .max()
            .unwrap_or(0);
        let mut by_id = BTreeMap::new();
        for t in tracks {
            t.validate()?;
            if by_id.insert(t.agent_id, t).is_some() {
                return Err(ScenarioError::Invalid("duplicate agent id".into()));
            }
        }
        Ok(LogScenario {
            map: Arc::new(map),
            tracks: by_id,
            tick_hz: TICK_HZ,
            duration_steps: duration,
        })
    }

    pub fn with_map(mut self, map: HDMap) -> Self {
        self.map = Arc::new(map);
        self
    }

    /// Agents whose track covers the given step.
    pub fn agents_at(&self, step: usize) -> impl Iterator<Item = &TrackHistory> {
        self.tracks.values().filter(move |t| t.covers(step))
    }
}

/// A 28-second evaluation slice of a log: 3 s of initialization history
/// followed by 25 s of simulated scenario. Steps are re-indexed to start
/// at 0.
#[derive(Debug, Clone)]
pub struct Segment {
    pub map: Arc<HDMap>,
    pub tracks: BTreeMap<AgentId, SegmentTrack>,
    pub init_steps: usize,
    pub sim_steps: usize,
    /// First step of this segment in the source log.
    pub source_start: usize,
}

#[derive(Debug, Clone)]
pub struct SegmentTrack {
    pub history: TrackHistory,
    /// True when the agent appears after segment start and therefore has
    /// less than a full history window; predictors mask the padding.
    pub late_entrant: bool,
}

impl Segment {
    pub fn total_steps(&self) -> usize {
        self.init_steps + self.sim_steps
    }

    /// Agents present at the simulation start boundary.
    pub fn agents_at_sim_start(&self) -> Vec<AgentId> {
        self.tracks
            .iter()
            .filter(|(_, t)| t.history.covers(self.init_steps))
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Split a log into consecutive non-overlapping 280-step segments; the
/// trailing remainder is dropped.
pub fn segment_log(log: &LogScenario) -> Result<Vec<Segment>, ScenarioError> {
    if log.duration_steps < SEGMENT_TOTAL_STEPS {
        return Err(ScenarioError::TooShort {
            duration: log.duration_steps,
        });
    }
    let n = log.duration_steps / SEGMENT_TOTAL_STEPS;
    let mut segments = Vec::with_capacity(n);
    for k in 0..n {
        let start = k * SEGMENT_TOTAL_STEPS;
        let end = start + SEGMENT_TOTAL_STEPS; // exclusive
        let mut tracks = BTreeMap::new();
        for (id, track) in &log.tracks {
            let lo = track.first_step.max(start);
            let hi = (track.last_step() + 1).min(end);
            if lo >= hi {
                continue;
            }
            let states = track.states[(lo - track.first_step)..(hi - track.first_step)].to_vec();
            let local_first = lo - start;
            tracks.insert(
                *id,
                SegmentTrack {
                    history: TrackHistory {
                        agent_id: *id,
                        first_step: local_first,
                        states,
                    },
                    late_entrant: local_first > 0,
                },
            );
        }
        segments.push(Segment {
            map: Arc::clone(&log.map),
            tracks,
            init_steps: HISTORY_STEPS,
            sim_steps: SEGMENT_SIM_STEPS,
            source_start: start,
        });
    }
    Ok(segments)
}

// ---------------------------------------------------------------------------
// NGSIM-style CSV import
// ---------------------------------------------------------------------------

/// Maps the required logical columns to indices in the CSV.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub vehicle_id: usize,
    pub frame: usize,
    pub local_x: usize,
    pub local_y: usize,
    pub length: usize,
    pub width: usize,
    pub velocity: usize,
    pub lane_id: usize,
}

impl Default for ColumnMap {
    /// Standard NGSIM column order (Vehicle_ID, Frame_ID, Total_Frames,
    /// Global_Time, Local_X, Local_Y, Global_X, Global_Y, v_Length,
    /// v_Width, v_Class, v_Vel, v_Acc, Lane_ID).
    fn default() -> Self {
        ColumnMap {
            vehicle_id: 0,
            frame: 1,
            local_x: 4,
            local_y: 5,
            length: 8,
            width: 9,
            velocity: 11,
            lane_id: 13,
        }
    }
}

impl ColumnMap {
    /// Resolve a column map from a header row, requiring the standard NGSIM
    /// column names (case-insensitive). Returns `MissingColumn` naming the
    /// first absent one.
    pub fn from_header(header: &[&str]) -> Result<Self, ScenarioError> {
        let find = |name: &str| -> Result<usize, ScenarioError> {
            header
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .ok_or_else(|| ScenarioError::MissingColumn(name.to_string()))
        };
        Ok(ColumnMap {
            vehicle_id: find("Vehicle_ID")?,
            frame: find("Frame_ID")?,
            local_x: find("Local_X")?,
            local_y: find("Local_Y")?,
            length: find("v_Length")?,
            width: find("v_Width")?,
            velocity: find("v_Vel")?,
            lane_id: find("Lane_ID")?,
        })
    }
}

/// Input length/velocity units of the CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputUnits {
    Feet,
    Meters,
}

/// Yaw changes are held when the smoothed displacement is below this.
pub const YAW_HOLD_THRESHOLD: f64 = 0.05;

/// Parse an NGSIM-style CSV stream into a scenario (map attached later).
///
/// Length-like columns are converted to meters when `units` is feet; yaw is
/// derived from smoothed 3-tick displacements since NGSIM does not record
/// heading; frame gaps are filled by linear interpolation to keep tracks at
/// a contiguous 10 Hz.
pub fn parse_ngsim_csv<R: BufRead>(
    reader: R,
    columns: &ColumnMap,
    units: InputUnits,
) -> Result<LogScenario, ScenarioError> {
    let unit_factor = match units {
        InputUnits::Feet => FEET_TO_METERS,
        InputUnits::Meters => 1.0,
    };
    let max_idx = [
        columns.vehicle_id,
        columns.frame,
        columns.local_x,
        columns.local_y,
        columns.length,
        columns.width,
        columns.velocity,
        columns.lane_id,
    ]
    .into_iter()
    .max()
    .unwrap();

    struct Row {
        frame: u64,
        pos: Vec2,
        length: f64,
        width: f64,
        speed: f64,
    }
    let mut per_vehicle: BTreeMap<u64, Vec<Row>> = BTreeMap::new();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line_no == 0 || line.trim().is_empty() {
            continue; // header row
        }
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() <= max_idx {
            return Err(ScenarioError::Parse {
                line: line_no + 1,
                msg: format!("expected at least {} columns, got {}", max_idx + 1, fields.len()),
            });
        }
        let parse_f = |idx: usize| -> Result<f64, ScenarioError> {
            fields[idx].parse::<f64>().map_err(|e| ScenarioError::Parse {
                line: line_no + 1,
                msg: format!("column {idx}: {e}"),
            })
        };
        let vid = fields[columns.vehicle_id]
            .parse::<u64>()
            .map_err(|e| ScenarioError::Parse {
                line: line_no + 1,
                msg: format!("vehicle id: {e}"),
            })?;
        let frame = parse_f(columns.frame)? as u64;
        let speed = parse_f(columns.velocity)? * unit_factor;
        if speed > SPEED_SANITY_LIMIT {
            return Err(ScenarioError::UnitRange { speed });
        }
        let rows = per_vehicle.entry(vid).or_default();
        if let Some(last) = rows.last() {
            if frame <= last.frame {
                return Err(ScenarioError::NonMonotonicFrames {
                    vehicle: vid,
                    line: line_no + 1,
                });
            }
        }
        rows.push(Row {
            frame,
            pos: Vec2::new(
                parse_f(columns.local_x)? * unit_factor,
                parse_f(columns.local_y)? * unit_factor,
            ),
            length: parse_f(columns.length)? * unit_factor,
            width: parse_f(columns.width)? * unit_factor,
            speed,
        });
    }

    let frame_base = per_vehicle
        .values()
        .filter_map(|rows| rows.first().map(|r| r.frame))
        .min()
        .unwrap_or(0);

    let mut tracks = Vec::new();
    for (vid, rows) in per_vehicle {
        // fill frame gaps by linear interpolation (resample to 10 Hz)
        let mut dense: Vec<Row> = Vec::with_capacity(rows.len());
        for row in rows {
            if let Some(prev) = dense.last() {
                let gap = row.frame - prev.frame;
                if gap > 1 {
                    let (pf, pp, ps) = (prev.frame, prev.pos, prev.speed);
                    let (plen, pw) = (prev.length, prev.width);
                    for k in 1..gap {
                        let w = k as f64 / gap as f64;
                        dense.push(Row {
                            frame: pf + k,
                            pos: pp + (row.pos - pp).scale(w),
                            length: plen,
                            width: pw,
                            speed: ps + (row.speed - ps) * w,
                        });
                    }
                }
            }
            dense.push(row);
        }

        // derive yaw from smoothed 3-tick displacement, holding the previous
        // value when the displacement is too small to be trustworthy
        let smoothed_disp = |i: usize| -> Vec2 {
            let a = i.saturating_sub(3);
            let b = (a + 3).min(dense.len() - 1);
            dense[b].pos - dense[a].pos
        };
        // initial heading: first displacement that clears the threshold
        let mut yaw_prev = (0..dense.len())
            .map(smoothed_disp)
            .find(|d| d.norm() >= YAW_HOLD_THRESHOLD)
            .map(|d| normalize_angle(d.angle()))
            .unwrap_or(0.0);
        let mut states = Vec::with_capacity(dense.len());
        for i in 0..dense.len() {
            let disp = smoothed_disp(i);
            let yaw = if disp.norm() < YAW_HOLD_THRESHOLD {
                yaw_prev
            } else {
                normalize_angle(disp.angle())
            };
            yaw_prev = yaw;
            let r = &dense[i];
            states.push(AgentState {
                x: r.pos.x,
                y: r.pos.y,
                width: r.width.max(0.1),
                length: r.length.max(0.1),
                yaw,
                speed: r.speed.max(0.0),
            });
        }
        tracks.push(TrackHistory {
            agent_id: AgentId(vid),
            first_step: (dense[0].frame - frame_base) as usize,
            states,
        });
    }
    LogScenario::new(HDMap::default(), tracks)
}

// ---------------------------------------------------------------------------
// Canonical log format
// ---------------------------------------------------------------------------

const LOG_MAGIC: &str = "# logsim-log v1";

/// Write the canonical line-delimited log. Floats use the shortest exact
/// decimal representation, so a read of this output reproduces every field
/// bit-for-bit.
pub fn write_canonical_log<W: Write>(log: &LogScenario, sink: &mut W) -> Result<(), ScenarioError> {
    writeln!(sink, "{LOG_MAGIC}")?;
    writeln!(sink, "# tick_hz {}", log.tick_hz)?;
    writeln!(sink, "# duration {}", log.duration_steps)?;
    writeln!(sink, "step,agent_id,x,y,yaw,speed,width,length")?;
    for step in 0..log.duration_steps {
        for track in log.tracks.values() {
            if let Some(s) = track.state_at(step) {
                writeln!(
                    sink,
                    "{},{},{},{},{},{},{},{}",
                    step, track.agent_id, s.x, s.y, s.yaw, s.speed, s.width, s.length
                )?;
            }
        }
    }
    Ok(())
}

/// Read a canonical log produced by [`write_canonical_log`].
pub fn read_canonical_log<R: BufRead>(reader: R) -> Result<LogScenario, ScenarioError> {
    let mut duration: Option<usize> = None;
    let mut per_agent: BTreeMap<AgentId, Vec<(usize, AgentState)>> = BTreeMap::new();
    let mut saw_header = false;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("duration ") {
                duration = Some(v.trim().parse().map_err(|e| ScenarioError::Parse {
                    line: line_no + 1,
                    msg: format!("duration: {e}"),
                })?);
            }
            continue;
        }
        if trimmed.starts_with("step,") {
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 8 {
            return Err(ScenarioError::Parse {
                line: line_no + 1,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut it = fields.iter();
        let mut next_f = |name: &str| -> Result<f64, ScenarioError> {
            it.next()
                .unwrap()
                .parse::<f64>()
                .map_err(|e| ScenarioError::Parse {
                    line: line_no + 1,
                    msg: format!("{name}: {e}"),
                })
        };
        let step = next_f("step")? as usize;
        let agent = AgentId(next_f("agent_id")? as u64);
        let x = next_f("x")?;
        let y = next_f("y")?;
        let yaw = next_f("yaw")?;
        let speed = next_f("speed")?;
        let width = next_f("width")?;
        let length = next_f("length")?;
        per_agent.entry(agent).or_default().push((
            step,
            AgentState {
                x,
                y,
                width,
                length,
                yaw,
                speed,
            },
        ));
    }
    if !saw_header {
        return Err(ScenarioError::Parse {
            line: 0,
            msg: "missing column header".into(),
        });
    }
    let mut tracks = Vec::new();
    for (agent_id, mut rows) in per_agent {
        rows.sort_by_key(|(s, _)| *s);
        for w in rows.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(ScenarioError::Invalid(format!(
                    "agent {agent_id}: non-contiguous steps {} -> {}",
                    w[0].0, w[1].0
                )));
            }
        }
        tracks.push(TrackHistory {
            agent_id,
            first_step: rows[0].0,
            states: rows.into_iter().map(|(_, s)| s).collect(),
        });
    }
    let mut log = LogScenario::new(HDMap::default(), tracks)?;
    if let Some(d) = duration {
        if log.duration_steps > d {
            return Err(ScenarioError::Invalid(format!(
                "records extend to step {} beyond declared duration {d}",
                log.duration_steps - 1
            )));
        }
        log.duration_steps = d;
    }
    Ok(log)
}

pub fn write_log_file(log: &LogScenario, path: &std::path::Path) -> Result<(), ScenarioError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_canonical_log(log, &mut file)
}

pub fn read_log_file(path: &std::path::Path) -> Result<LogScenario, ScenarioError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_canonical_log(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn straight_track(id: u64, first_step: usize, n: usize, speed: f64) -> TrackHistory {
        let states = (0..n)
            .map(|i| AgentState {
                x: (first_step + i) as f64 * speed * TICK_SECONDS,
                y: 0.0,
                width: 1.8,
                length: 4.4,
                yaw: 0.0,
                speed,
            })
            .collect();
        TrackHistory {
            agent_id: AgentId(id),
            first_step,
            states,
        }
    }

    fn ngsim_csv(rows: &[(u64, u64, f64, f64, f64)]) -> String {
        // (vehicle, frame, x_ft, y_ft, v_ft_s)
        let mut s = String::from(
            "Vehicle_ID,Frame_ID,Total_Frames,Global_Time,Local_X,Local_Y,Global_X,Global_Y,v_Length,v_Width,v_Class,v_Vel,v_Acc,Lane_ID\n",
        );
        for (vid, frame, x, y, v) in rows {
            s.push_str(&format!(
                "{vid},{frame},0,0,{x},{y},0,0,14.4,6.0,2,{v},0,1\n"
            ));
        }
        s
    }

    #[test]
    fn single_vehicle_identity() {
        let rows: Vec<_> = (0..280u64).map(|f| (1u64, f, f as f64, 0.0, 10.0)).collect();
        let log = parse_ngsim_csv(
            Cursor::new(ngsim_csv(&rows)),
            &ColumnMap::default(),
            InputUnits::Feet,
        )
        .unwrap();
        assert_eq!(log.tracks.len(), 1);
        assert_eq!(log.duration_steps, 280);
    }

    #[test]
    fn feet_converted_to_meters() {
        // x = 32.8084 ft must land on 10.0 m (factor 0.3048)
        let rows = vec![(1u64, 0u64, 32.8084, 0.0, 10.0), (1, 1, 33.0, 0.0, 10.0)];
        let log = parse_ngsim_csv(
            Cursor::new(ngsim_csv(&rows)),
            &ColumnMap::default(),
            InputUnits::Feet,
        )
        .unwrap();
        let track = log.tracks.get(&AgentId(1)).unwrap();
        let expected = 32.8084 * FEET_TO_METERS; // oracle: multiply by 0.3048
        assert!((expected - 10.0).abs() < 1e-4);
        assert!((track.states[0].x - expected).abs() < 1e-12);
    }

    #[test]
    fn two_vehicles_share_frames() {
        let mut rows = Vec::new();
        for f in 0..100u64 {
            rows.push((1u64, f, f as f64, 0.0, 5.0));
            rows.push((2u64, f, f as f64, 12.0, 5.0));
        }
        let log = parse_ngsim_csv(
            Cursor::new(ngsim_csv(&rows)),
            &ColumnMap::default(),
            InputUnits::Feet,
        )
        .unwrap();
        assert_eq!(log.tracks.len(), 2);
        assert_eq!(log.duration_steps, 100);
    }

    #[test]
    fn missing_column_is_reported_by_name() {
        let header = vec!["Vehicle_ID", "Frame_ID", "Local_X"];
        match ColumnMap::from_header(&header) {
            Err(ScenarioError::MissingColumn(name)) => assert_eq!(name, "Local_Y"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn decreasing_frames_rejected() {
        let rows = vec![(1u64, 5u64, 0.0, 0.0, 1.0), (1, 4, 1.0, 0.0, 1.0)];
        let err = parse_ngsim_csv(
            Cursor::new(ngsim_csv(&rows)),
            &ColumnMap::default(),
            InputUnits::Feet,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::NonMonotonicFrames { vehicle: 1, .. }));
    }

    #[test]
    fn unit_mistake_tripped_by_speed() {
        // 300 ft/s is fine, 300 "feet" that are actually meters is not:
        // feed 300 in a meters file
        let rows = vec![(1u64, 0u64, 0.0, 0.0, 300.0)];
        let err = parse_ngsim_csv(
            Cursor::new(ngsim_csv(&rows)),
            &ColumnMap::default(),
            InputUnits::Meters,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::UnitRange { .. }));
    }

    #[test]
    fn segment_counts() {
        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 280, 5.0)],
        )
        .unwrap();
        assert_eq!(segment_log(&log).unwrap().len(), 1);

        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 560, 5.0)],
        )
        .unwrap();
        assert_eq!(segment_log(&log).unwrap().len(), 2);

        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 300, 5.0)],
        )
        .unwrap();
        let segs = segment_log(&log).unwrap();
        assert_eq!(segs.len(), 1); // 20 trailing steps dropped
        assert_eq!(segs[0].total_steps(), SEGMENT_TOTAL_STEPS);
    }

    #[test]
    fn segment_too_short() {
        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 100, 5.0)],
        )
        .unwrap();
        assert!(matches!(
            segment_log(&log),
            Err(ScenarioError::TooShort { duration: 100 })
        ));
    }

    #[test]
    fn segmentation_partitions_step_axis() {
        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 840, 5.0)],
        )
        .unwrap();
        let segs = segment_log(&log).unwrap();
        assert_eq!(segs.len(), 3);
        for (k, seg) in segs.iter().enumerate() {
            assert_eq!(seg.source_start, k * SEGMENT_TOTAL_STEPS);
        }
    }

    #[test]
    fn late_entrant_flagged() {
        let log = LogScenario::new(
            HDMap::default(),
            vec![
                straight_track(1, 0, 280, 5.0),
                straight_track(2, 10, 270, 5.0),
            ],
        )
        .unwrap();
        let segs = segment_log(&log).unwrap();
        assert!(!segs[0].tracks[&AgentId(1)].late_entrant);
        assert!(segs[0].tracks[&AgentId(2)].late_entrant);
    }

    #[test]
    fn canonical_round_trip_is_bit_exact() {
        let mut tracks = vec![straight_track(1, 0, 50, 7.3)];
        // awkward floats on purpose
        tracks.push(TrackHistory {
            agent_id: AgentId(2),
            first_step: 3,
            states: (0..40)
                .map(|i| AgentState {
                    x: 0.1 * i as f64 + 1.0 / 3.0,
                    y: -2.0 / 7.0,
                    width: 1.9,
                    length: 4.7,
                    yaw: -0.1234567890123,
                    speed: std::f64::consts::PI,
                })
                .collect(),
        });
        let log = LogScenario::new(HDMap::default(), tracks).unwrap();
        let mut buf = Vec::new();
        write_canonical_log(&log, &mut buf).unwrap();
        let restored = read_canonical_log(Cursor::new(&buf)).unwrap();
        assert_eq!(restored.duration_steps, log.duration_steps);
        assert_eq!(restored.tracks.len(), log.tracks.len());
        for (id, track) in &log.tracks {
            let rt = &restored.tracks[id];
            assert_eq!(rt.first_step, track.first_step);
            assert_eq!(rt.states, track.states); // bit-exact f64 equality
        }
    }

    #[test]
    fn empty_log_writes_header_only() {
        let log = LogScenario::new(HDMap::default(), vec![]).unwrap();
        let mut buf = Vec::new();
        write_canonical_log(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let data_lines: Vec<_> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("step,"))
            .collect();
        assert!(data_lines.is_empty());
    }

    #[test]
    fn record_cardinality() {
        let log = LogScenario::new(
            HDMap::default(),
            vec![straight_track(1, 0, 3, 1.0), straight_track(2, 0, 3, 1.0)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_canonical_log(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let n = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("step,"))
            .count();
        assert_eq!(n, 6);
    }

    #[test]
    fn displacement_plausibility_enforced() {
        let mut track = straight_track(1, 0, 5, 1.0);
        track.states[3].x += 10.0; // teleport
        assert!(track.validate().is_err());
    }
}
