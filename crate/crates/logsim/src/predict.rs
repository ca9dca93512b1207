//! Joint future-motion prediction for agents in the region of interest.
//!
//! Three interchangeable predictors: replay lookahead (log agents), a
//! constant-turn-rate-and-velocity fallback, and a learned model with a
//! recurrent history encoder, dot-product interaction attention over the
//! current states, a lane polyline encoder, a categorical maneuver head,
//! and a recurrent decoder emitting per-step Gaussian means and spreads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_angle, point_at_arclength, project_to_lane, Vec2};
use crate::map::HDMap;
use crate::nn::{Adam, Mat, NodeId, ParamStore, Tape};
use crate::scenario::{AgentId, AgentState, Segment, TrackHistory, TICK_SECONDS};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("query step {step} is past the end of the track (last {last})")]
    PastEnd { step: usize, last: usize },
    #[error("kinematic prediction needs at least 2 history states, got {0}")]
    InsufficientHistory(usize),
    #[error("target agent {0} not present in the current states")]
    TargetMissing(AgentId),
    #[error(transparent)]
    Shape(#[from] crate::nn::NnError),
    #[error("prediction and truth have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },
}

/// Configuration of the learned predictor and the shared horizon constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// History window in ticks (3 s at 10 Hz).
    pub history_steps: usize,
    /// Prediction horizon in ticks (5 s at 10 Hz).
    pub horizon_steps: usize,
    /// Tick length in seconds.
    pub dt: f64,
    /// Number of maneuver modes.
    pub modes: usize,
    /// Recurrent hidden width.
    pub hidden: usize,
    /// Interaction/lane embedding width.
    pub embed: usize,
    /// Attention head count (embed must divide evenly).
    pub attention_heads: usize,
    /// Lane centerline sample count ahead of the target.
    pub lane_points: usize,
    /// Spacing of lane samples in meters.
    pub lane_spacing: f64,
    /// Neighbors attended to, nearest first.
    pub max_neighbors: usize,
    /// Initial learning rate, divided by 10 every `lr_decay_epochs`.
    pub learning_rate: f64,
    pub lr_decay_epochs: usize,
    pub epochs: usize,
    /// Feed ground-truth displacements to the decoder during training.
    pub teacher_forcing: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            history_steps: 30,
            horizon_steps: 50,
            dt: TICK_SECONDS,
            modes: 3,
            hidden: 64,
            embed: 32,
            attention_heads: 1,
            lane_points: 10,
            lane_spacing: 2.0,
            max_neighbors: 8,
            learning_rate: 1e-3,
            lr_decay_epochs: 10,
            epochs: 30,
            teacher_forcing: true,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.history_steps < 1
            || self.horizon_steps < 1
            || self.modes < 1
            || (self.dt - TICK_SECONDS).abs() > 1e-12
        {
            return Err(crate::nn::NnError::ShapeMismatch(
                "history, horizon and modes must be >= 1 and dt must be 0.1 s".into(),
            )
            .into());
        }
        if !self.embed.is_multiple_of(self.attention_heads) {
            return Err(crate::nn::NnError::ShapeMismatch(format!(
                "embed {} not divisible by {} attention heads",
                self.embed, self.attention_heads
            ))
            .into());
        }
        Ok(())
    }
}

/// One predicted mode: means and isotropic spreads for steps t+1..t+T.
#[derive(Debug, Clone)]
pub struct TrajectoryMode {
    pub mean: Vec<Vec2>,
    pub sigma: Vec<f64>,
}

/// Per-agent future with per-step Gaussian uncertainty and mode weights.
#[derive(Debug, Clone)]
pub struct PredictedTrajectory {
    pub agent_id: AgentId,
    pub modes: Vec<TrajectoryMode>,
    pub mode_probs: Vec<f64>,
    /// Set when the horizon had to be truncated at the log end.
    pub truncated: bool,
}

impl PredictedTrajectory {
    pub fn len(&self) -> usize {
        self.modes.first().map_or(0, |m| m.mean.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the most likely mode.
    pub fn argmax_mode(&self) -> usize {
        self.mode_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Mean sequence of the most likely mode.
    pub fn point_estimate(&self) -> &[Vec2] {
        &self.modes[self.argmax_mode()].mean
    }

    pub fn single_mode(agent_id: AgentId, mean: Vec<Vec2>, sigma: f64, truncated: bool) -> Self {
        let n = mean.len();
        PredictedTrajectory {
            agent_id,
            modes: vec![TrajectoryMode {
                mean,
                sigma: vec![sigma; n],
            }],
            mode_probs: vec![1.0],
            truncated,
        }
    }
}

/// Fixed spread reported for replay lookahead.
pub const REPLAY_SIGMA: f64 = 0.1;
/// Spread growth rate of the kinematic fallback, meters per second.
pub const KINEMATIC_SIGMA_RATE: f64 = 0.2;

/// Future trajectory read directly from the log: exact means, fixed spread,
/// single mode. Truncates (and flags) when the log ends inside the horizon.
pub fn predict_replay(
    track: &TrackHistory,
    step: usize,
    horizon: usize,
) -> Result<PredictedTrajectory, PredictorError> {
    let last = track.last_step();
    if step > last {
        return Err(PredictorError::PastEnd { step, last });
    }
    let end = (step + horizon).min(last);
    let mean: Vec<Vec2> = (step + 1..=end)
        .map(|s| track.state_at(s).unwrap().pos())
        .collect();
    let truncated = mean.len() < horizon;
    Ok(PredictedTrajectory::single_mode(
        track.agent_id,
        mean,
        REPLAY_SIGMA,
        truncated,
    ))
}

/// Number of trailing yaw deltas averaged into the turn-rate estimate.
const YAW_RATE_WINDOW: usize = 5;

/// Constant-turn-rate-and-velocity rollout from the last history state.
/// Each tick advances along the same circular arc, so the composition over
/// the horizon matches the closed-form arc solution.
pub fn predict_kinematic(
    history: &TrackHistory,
    horizon: usize,
) -> Result<PredictedTrajectory, PredictorError> {
    let n = history.states.len();
    if n < 2 {
        return Err(PredictorError::InsufficientHistory(n));
    }
    let window = YAW_RATE_WINDOW.min(n - 1);
    let mut yaw_rate = 0.0;
    for i in n - window..n {
        yaw_rate += normalize_angle(history.states[i].yaw - history.states[i - 1].yaw);
    }
    yaw_rate /= window as f64 * TICK_SECONDS;

    let last = history.states[n - 1];
    let v = last.speed;
    let mut pos = last.pos();
    let mut yaw = last.yaw;
    let mut mean = Vec::with_capacity(horizon);
    let mut sigma = Vec::with_capacity(horizon);
    for i in 1..=horizon {
        if yaw_rate.abs() < 1e-9 {
            pos = pos + Vec2::new(yaw.cos(), yaw.sin()).scale(v * TICK_SECONDS);
        } else {
            let r = v / yaw_rate;
            let next_yaw = yaw + yaw_rate * TICK_SECONDS;
            pos = pos + Vec2::new(r * (next_yaw.sin() - yaw.sin()), r * (yaw.cos() - next_yaw.cos()));
            yaw = next_yaw;
        }
        mean.push(pos);
        sigma.push(KINEMATIC_SIGMA_RATE * i as f64 * TICK_SECONDS);
    }
    Ok(PredictedTrajectory {
        agent_id: history.agent_id,
        modes: vec![TrajectoryMode { mean, sigma }],
        mode_probs: vec![1.0],
        truncated: false,
    })
}

// ---------------------------------------------------------------------------
// Learned predictor
// ---------------------------------------------------------------------------

/// Trained parameters of the learned predictor: one flat vector with named
/// slices per layer.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub store: ParamStore,
}

const SELF_FEATURES: usize = 7;
const DELTA_FEATURES: usize = 2;
const OUT_FEATURES: usize = 3; // dx, dy, sigma_raw
const SIGMA_FLOOR: f64 = 1e-3;

impl ModelParams {
    /// Parameter layout for a configuration: registration order is stable
    /// and defines the flat vector.
    pub fn layout(cfg: &PredictorConfig) -> ParamStore {
        let h = cfg.hidden;
        let e = cfg.embed;
        let ctx = h + 2 * e;
        let dec_in = DELTA_FEATURES + cfg.modes;
        let mut s = ParamStore::new();
        for (gate, win, wrec) in [("z", DELTA_FEATURES, h), ("r", DELTA_FEATURES, h), ("h", DELTA_FEATURES, h)] {
            s.register(&format!("hist.w{gate}"), win, wrec);
            s.register(&format!("hist.u{gate}"), h, h);
            s.register(&format!("hist.b{gate}"), 1, h);
        }
        s.register("attn.embed_w", SELF_FEATURES, e);
        s.register("attn.embed_b", 1, e);
        s.register("attn.wq", e, e);
        s.register("attn.wk", e, e);
        s.register("attn.wv", e, e);
        s.register("lane.w", 3 * cfg.lane_points, e);
        s.register("lane.b", 1, e);
        s.register("mode.w", ctx, cfg.modes);
        s.register("mode.b", 1, cfg.modes);
        s.register("dec.init_w", ctx, h);
        s.register("dec.init_b", 1, h);
        for gate in ["z", "r", "h"] {
            s.register(&format!("dec.w{gate}"), dec_in, h);
            s.register(&format!("dec.u{gate}"), h, h);
            s.register(&format!("dec.b{gate}"), 1, h);
        }
        s.register("out.w", h, OUT_FEATURES);
        s.register("out.b", 1, OUT_FEATURES);
        s
    }

    pub fn zeros(cfg: &PredictorConfig) -> ModelParams {
        ModelParams {
            store: Self::layout(cfg),
        }
    }

    pub fn random<R: rand::Rng>(cfg: &PredictorConfig, rng: &mut R) -> ModelParams {
        let mut store = Self::layout(cfg);
        store.init_random(rng, 1.0);
        ModelParams { store }
    }

    /// Verify the store matches the layout implied by `cfg`.
    pub fn check_shape(&self, cfg: &PredictorConfig) -> Result<(), PredictorError> {
        let expected = Self::layout(cfg);
        if expected.len() != self.store.len() {
            return Err(crate::nn::NnError::ShapeMismatch(format!(
                "expected {} parameters for this config, found {}",
                expected.len(),
                self.store.len()
            ))
            .into());
        }
        for name in expected.slice_names() {
            if self.store.slice_range(name) != expected.slice_range(name) {
                return Err(crate::nn::NnError::ShapeMismatch(format!(
                    "slice {name} missing or misplaced"
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// Everything the network consumes for one target agent, already projected
/// into the target's body frame at prediction time.
#[derive(Debug, Clone)]
pub struct SceneInput {
    /// Body-frame displacement per history tick, oldest first; entries with
    /// `false` are padding for late entrants and must not influence the
    /// output.
    pub target_deltas: Vec<(Vec2, bool)>,
    /// Relative features of the target itself.
    pub self_feat: [f64; SELF_FEATURES],
    /// Relative features of up to `max_neighbors` nearest agents.
    pub neighbors: Vec<[f64; SELF_FEATURES]>,
    /// Flattened (dx, dy, curvature) triples of lane samples ahead.
    pub lane_feats: Vec<f64>,
    /// World position the rollout starts from (last observed position).
    pub origin: Vec2,
    /// World heading used to rotate decoder displacements.
    pub origin_yaw: f64,
}

fn relative_features(target: &AgentState, other: &AgentState) -> [f64; SELF_FEATURES] {
    let rel = (other.pos() - target.pos()).rotate(-target.yaw);
    let dyaw = normalize_angle(other.yaw - target.yaw);
    [
        rel.x,
        rel.y,
        dyaw.cos(),
        dyaw.sin(),
        other.speed,
        other.width,
        other.length,
    ]
}

/// Assemble the network input for `target` from track histories, the
/// current joint states, and the map.
pub fn build_scene_input(
    cfg: &PredictorConfig,
    histories: &BTreeMap<AgentId, TrackHistory>,
    current: &BTreeMap<AgentId, AgentState>,
    map: &HDMap,
    target: AgentId,
) -> Result<SceneInput, PredictorError> {
    let target_state = *current
        .get(&target)
        .ok_or(PredictorError::TargetMissing(target))?;

    // history displacements in the target's body frame, padded at the front
    let mut target_deltas = vec![(Vec2::ZERO, false); cfg.history_steps.saturating_sub(1)];
    if let Some(track) = histories.get(&target) {
        let states = &track.states;
        let n = states.len();
        let take = (cfg.history_steps - 1).min(n.saturating_sub(1));
        for k in 0..take {
            // delta ending at states[n-1-k], stored newest-last
            let idx = target_deltas.len() - 1 - k;
            let to = states[n - 1 - k].pos();
            let from = states[n - 2 - k].pos();
            target_deltas[idx] = ((to - from).rotate(-target_state.yaw), true);
        }
    }

    // nearest neighbors by center distance, ties by id
    let mut others: Vec<(&AgentId, &AgentState)> =
        current.iter().filter(|(id, _)| **id != target).collect();
    others.sort_by(|a, b| {
        let da = a.1.pos().dist(target_state.pos());
        let db = b.1.pos().dist(target_state.pos());
        da.partial_cmp(&db).unwrap().then(a.0.cmp(b.0))
    });
    let neighbors: Vec<[f64; SELF_FEATURES]> = others
        .iter()
        .take(cfg.max_neighbors)
        .map(|(_, s)| relative_features(&target_state, s))
        .collect();

    // lane samples ahead of the target, following successor lanes
    let mut lane_feats = vec![0.0; 3 * cfg.lane_points];
    if let Ok(proj) = project_to_lane(map, target_state.pos(), target_state.yaw) {
        let mut lane = map.lane(&proj.frame.lane_id).unwrap();
        let mut s = proj.frame.s;
        for i in 0..cfg.lane_points {
            s += cfg.lane_spacing;
            let mut remaining = s;
            // walk successor lanes when the sample runs off the end
            let mut guard = 0;
            while remaining > lane.length() && guard < 8 {
                let successors = map.successors(&lane.id);
                match successors.first() {
                    Some(next) => {
                        remaining -= lane.length();
                        lane = map.lane(next).unwrap();
                        s = remaining;
                    }
                    None => break,
                }
                guard += 1;
            }
            let p = point_at_arclength(&lane.centerline, remaining.min(lane.length()));
            let rel = (p - target_state.pos()).rotate(-target_state.yaw);
            let k = crate::geometry::curvature_at_arclength(&lane.centerline, remaining);
            lane_feats[3 * i] = rel.x;
            lane_feats[3 * i + 1] = rel.y;
            lane_feats[3 * i + 2] = k;
        }
    }

    Ok(SceneInput {
        target_deltas,
        self_feat: relative_features(&target_state, &target_state),
        neighbors,
        lane_feats,
        origin: target_state.pos(),
        origin_yaw: target_state.yaw,
    })
}

struct GruWeights {
    wz: NodeId,
    uz: NodeId,
    bz: NodeId,
    wr: NodeId,
    ur: NodeId,
    br: NodeId,
    wh: NodeId,
    uh: NodeId,
    bh: NodeId,
}

impl GruWeights {
    fn mount(tape_leaves: &crate::nn::ParamLeaves, store: &ParamStore, prefix: &str) -> Self {
        let g = |n: &str| tape_leaves.by_name(store, &format!("{prefix}.{n}"));
        GruWeights {
            wz: g("wz"),
            uz: g("uz"),
            bz: g("bz"),
            wr: g("wr"),
            ur: g("ur"),
            br: g("br"),
            wh: g("wh"),
            uh: g("uh"),
            bh: g("bh"),
        }
    }

    /// Standard gated update: z and r gates, candidate state, interpolation.
    fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> NodeId {
        let z = {
            let a = tape.matmul(x, self.wz);
            let b = tape.matmul(h, self.uz);
            let s = tape.add(a, b);
            let s = tape.add(s, self.bz);
            tape.sigmoid(s)
        };
        let r = {
            let a = tape.matmul(x, self.wr);
            let b = tape.matmul(h, self.ur);
            let s = tape.add(a, b);
            let s = tape.add(s, self.br);
            tape.sigmoid(s)
        };
        let cand = {
            let a = tape.matmul(x, self.wh);
            let rh = tape.mul(r, h);
            let b = tape.matmul(rh, self.uh);
            let s = tape.add(a, b);
            let s = tape.add(s, self.bh);
            tape.tanh(s)
        };
        // h' = (1 - z) * h + z * cand
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let keep = tape.mul(one_minus_z, h);
        let take = tape.mul(z, cand);
        tape.add(keep, take)
    }
}

/// Tape nodes of interest from a forward pass.
pub struct ForwardNodes {
    /// 1 x K mode log-probabilities.
    pub mode_log_probs: NodeId,
    /// Per mode, per step: world-frame mean (1x2) and sigma (1x1).
    pub step_outputs: Vec<Vec<(NodeId, NodeId)>>,
    /// Parameter leaves mounted at the start of the pass.
    pub leaves: crate::nn::ParamLeaves,
}

/// Run the network forward on a tape. When `teacher_deltas` is given the
/// decoder consumes those body-frame displacements as its inputs
/// (teacher forcing); otherwise it feeds back its own outputs.
pub fn forward_scene(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PredictorConfig,
    input: &SceneInput,
    teacher_deltas: Option<&[Vec2]>,
) -> ForwardNodes {
    let leaves = store.leaves(tape);
    let h_width = cfg.hidden;

    // --- history encoder ---
    let hist = GruWeights::mount(&leaves, store, "hist");
    let mut h = tape.constant(Mat::zeros(1, h_width));
    for (delta, valid) in &input.target_deltas {
        if !*valid {
            continue; // padding is skipped outright, not fed as zeros
        }
        let x = tape.constant(Mat::row_vec(vec![delta.x, delta.y]));
        h = hist.step(tape, x, h);
    }

    // --- interaction encoder: attention over current states ---
    let embed_w = leaves.by_name(store, "attn.embed_w");
    let embed_b = leaves.by_name(store, "attn.embed_b");
    let wq = leaves.by_name(store, "attn.wq");
    let wk = leaves.by_name(store, "attn.wk");
    let wv = leaves.by_name(store, "attn.wv");
    let embed_one = |tape: &mut Tape, feat: &[f64; SELF_FEATURES]| -> NodeId {
        let x = tape.constant(Mat::row_vec(feat.to_vec()));
        let e = tape.linear(x, embed_w, embed_b);
        tape.relu(e)
    };
    let self_embed = embed_one(tape, &input.self_feat);
    let mut all_embeds = vec![self_embed];
    for nb in &input.neighbors {
        all_embeds.push(embed_one(tape, nb));
    }
    let q = tape.matmul(self_embed, wq);
    let keys: Vec<NodeId> = all_embeds.iter().map(|&e| tape.matmul(e, wk)).collect();
    let vals: Vec<NodeId> = all_embeds.iter().map(|&e| tape.matmul(e, wv)).collect();

    let head_dim = cfg.embed / cfg.attention_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(cfg.attention_heads);
    for head in 0..cfg.attention_heads {
        let start = head * head_dim;
        let qh = tape.slice_cols(q, start, head_dim);
        let mut scores = Vec::with_capacity(keys.len());
        for &k in &keys {
            let kh = tape.slice_cols(k, start, head_dim);
            let prod = tape.mul(qh, kh);
            let dot = tape.sum_all(prod);
            scores.push(tape.scale(dot, scale));
        }
        let score_row = tape.concat_cols(&scores);
        let weights = tape.softmax_row(score_row);
        // weighted sum of value heads
        let mut acc: Option<NodeId> = None;
        for (j, &v) in vals.iter().enumerate() {
            let vh = tape.slice_cols(v, start, head_dim);
            let wj = tape.slice_cols(weights, j, 1);
            // broadcast the scalar weight over the head dim
            let wj_row = {
                let parts = vec![wj; head_dim];
                tape.concat_cols(&parts)
            };
            let term = tape.mul(wj_row, vh);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        head_outputs.push(acc.unwrap());
    }
    let attn = tape.concat_cols(&head_outputs);

    // --- lane feature encoder ---
    let lane_w = leaves.by_name(store, "lane.w");
    let lane_b = leaves.by_name(store, "lane.b");
    let lane_x = tape.constant(Mat::row_vec(input.lane_feats.clone()));
    let lane_feat = {
        let l = tape.linear(lane_x, lane_w, lane_b);
        tape.relu(l)
    };

    // --- context and maneuver head ---
    let ctx = tape.concat_cols(&[h, attn, lane_feat]);
    let mode_w = leaves.by_name(store, "mode.w");
    let mode_b = leaves.by_name(store, "mode.b");
    let mode_logits = tape.linear(ctx, mode_w, mode_b);
    let mode_log_probs = tape.log_softmax_row(mode_logits);

    // --- decoder, rolled per mode ---
    let init_w = leaves.by_name(store, "dec.init_w");
    let init_b = leaves.by_name(store, "dec.init_b");
    let dec = GruWeights::mount(&leaves, store, "dec");
    let out_w = leaves.by_name(store, "out.w");
    let out_b = leaves.by_name(store, "out.b");

    // rotation from body frame to world
    let (sy, cy) = input.origin_yaw.sin_cos();
    let rot = tape.constant(Mat::from_vec(2, 2, vec![cy, sy, -sy, cy]));

    let last_delta = input
        .target_deltas
        .iter()
        .rev()
        .find(|(_, v)| *v)
        .map(|(d, _)| *d)
        .unwrap_or(Vec2::ZERO);

    let mut step_outputs = Vec::with_capacity(cfg.modes);
    for mode in 0..cfg.modes {
        let mut dh = {
            let i = tape.linear(ctx, init_w, init_b);
            tape.tanh(i)
        };
        let mut onehot = vec![0.0; cfg.modes];
        onehot[mode] = 1.0;
        let mut prev_delta_node: Option<NodeId> = None;
        let origin = tape.constant(Mat::row_vec(vec![input.origin.x, input.origin.y]));
        let mut pos = origin;
        let mut outputs = Vec::with_capacity(cfg.horizon_steps);
        for step in 0..cfg.horizon_steps {
            let x = match (&prev_delta_node, teacher_deltas) {
                (None, _) => {
                    let mut v = vec![last_delta.x, last_delta.y];
                    v.extend_from_slice(&onehot);
                    tape.constant(Mat::row_vec(v))
                }
                (Some(_), Some(truth)) => {
                    let d = truth[step - 1];
                    let mut v = vec![d.x, d.y];
                    v.extend_from_slice(&onehot);
                    tape.constant(Mat::row_vec(v))
                }
                (Some(node), None) => {
                    let oh = tape.constant(Mat::row_vec(onehot.clone()));
                    tape.concat_cols(&[*node, oh])
                }
            };
            dh = dec.step(tape, x, dh);
            let out = tape.linear(dh, out_w, out_b);
            let delta_body = tape.slice_cols(out, 0, 2);
            let sigma_raw = tape.slice_cols(out, 2, 1);
            let sp = tape.softplus(sigma_raw);
            let sigma = tape.affine(sp, 1.0, SIGMA_FLOOR);
            let delta_world = tape.matmul(delta_body, rot);
            pos = tape.add(pos, delta_world);
            outputs.push((pos, sigma));
            prev_delta_node = Some(delta_body);
        }
        step_outputs.push(outputs);
    }

    ForwardNodes {
        mode_log_probs,
        step_outputs,
        leaves,
    }
}

/// Learned joint prediction for one target agent. Deterministic given
/// parameters and inputs.
pub fn predict_learned(
    params: &ModelParams,
    cfg: &PredictorConfig,
    histories: &BTreeMap<AgentId, TrackHistory>,
    current: &BTreeMap<AgentId, AgentState>,
    map: &HDMap,
    target: AgentId,
) -> Result<PredictedTrajectory, PredictorError> {
    cfg.validate()?;
    params.check_shape(cfg)?;
    let input = build_scene_input(cfg, histories, current, map, target)?;
    let mut tape = Tape::new();
    let nodes = forward_scene(&mut tape, &params.store, cfg, &input, None);

    let probs_row = tape.value(nodes.mode_log_probs);
    let mode_probs: Vec<f64> = probs_row.data.iter().map(|lp| lp.exp()).collect();
    let modes = nodes
        .step_outputs
        .iter()
        .map(|steps| TrajectoryMode {
            mean: steps
                .iter()
                .map(|(p, _)| {
                    let v = tape.value(*p);
                    Vec2::new(v.data[0], v.data[1])
                })
                .collect(),
            sigma: steps.iter().map(|(_, s)| tape.scalar_value(*s)).collect(),
        })
        .collect();
    Ok(PredictedTrajectory {
        agent_id: target,
        modes,
        mode_probs,
        truncated: false,
    })
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mixture negative log-likelihood of the truth under the prediction,
/// computed in log space. Each step contributes an isotropic bivariate
/// Gaussian.
pub fn nll_loss(pred: &PredictedTrajectory, truth: &[Vec2]) -> Result<f64, PredictorError> {
    if pred.len() != truth.len() {
        return Err(PredictorError::LengthMismatch(pred.len(), truth.len()));
    }
    const LN_2PI: f64 = 1.8378770664093453;
    let mut per_mode = Vec::with_capacity(pred.modes.len());
    for (k, mode) in pred.modes.iter().enumerate() {
        let mut loglik = pred.mode_probs[k].max(1e-300).ln();
        for (t, truth_p) in truth.iter().enumerate() {
            let mu = mode.mean[t];
            let sigma = mode.sigma[t];
            let d2 = truth_p.dist(mu).powi(2);
            loglik += -LN_2PI - 2.0 * sigma.ln() - d2 / (2.0 * sigma * sigma);
        }
        per_mode.push(loglik);
    }
    let mx = per_mode.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + per_mode.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(-lse)
}

/// Tape version of the mixture NLL for training; agrees with [`nll_loss`].
pub fn nll_loss_on_tape(
    tape: &mut Tape,
    nodes: &ForwardNodes,
    truth: &[Vec2],
) -> NodeId {
    const LN_2PI: f64 = 1.8378770664093453;
    let mut mode_logliks = Vec::with_capacity(nodes.step_outputs.len());
    for (k, steps) in nodes.step_outputs.iter().enumerate() {
        let mut acc = tape.slice_cols(nodes.mode_log_probs, k, 1);
        for (t, (pos, sigma)) in steps.iter().enumerate() {
            let truth_node = tape.constant(Mat::row_vec(vec![truth[t].x, truth[t].y]));
            let err = tape.sub(truth_node, *pos);
            let err2 = tape.mul(err, err);
            let d2 = tape.sum_all(err2);
            let ln_sigma = tape.ln(*sigma);
            let sigma2 = tape.mul(*sigma, *sigma);
            let ln_s2 = tape.ln(sigma2);
            let neg_half_d2_over_s2 = {
                let neg_ln_s2 = tape.scale(ln_s2, -1.0);
                let inv = tape.exp(neg_ln_s2);
                let q = tape.mul(d2, inv);
                tape.scale(q, -0.5)
            };
            let two_ln_sigma = tape.scale(ln_sigma, 2.0);
            let step_ll = {
                let a = tape.affine(two_ln_sigma, -1.0, -LN_2PI);
                tape.add(a, neg_half_d2_over_s2)
            };
            acc = tape.add(acc, step_ll);
        }
        mode_logliks.push(acc);
    }
    let row = tape.concat_cols(&mode_logliks);
    let lse = tape.logsumexp_rows(row);
    tape.scale(lse, -1.0)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One training sample: a target agent inside a segment at the standard
/// prediction boundary.
pub struct TrainingSample {
    pub input: SceneInput,
    /// World-frame truth positions for t+1..t+T.
    pub truth: Vec<Vec2>,
    /// Body-frame truth displacements for teacher forcing.
    pub truth_deltas: Vec<Vec2>,
}

/// Collect samples from segments: every agent whose track covers the full
/// horizon beyond the initialization boundary.
pub fn collect_training_samples(
    data: &[Segment],
    cfg: &PredictorConfig,
) -> Vec<TrainingSample> {
    let mut samples = Vec::new();
    for seg in data {
        let t = seg.init_steps;
        let mut current = BTreeMap::new();
        let mut histories = BTreeMap::new();
        for (id, st) in &seg.tracks {
            if let Some(s) = st.history.state_at(t) {
                current.insert(*id, *s);
                let lo = st.history.first_step.max(t + 1 - cfg.history_steps.min(t + 1));
                let states: Vec<AgentState> = (lo..=t)
                    .map(|k| *st.history.state_at(k).unwrap())
                    .collect();
                histories.insert(
                    *id,
                    TrackHistory {
                        agent_id: *id,
                        first_step: lo,
                        states,
                    },
                );
            }
        }
        for (id, st) in &seg.tracks {
            if !st.history.covers(t) || !st.history.covers(t + cfg.horizon_steps) {
                continue;
            }
            let Ok(input) = build_scene_input(cfg, &histories, &current, &seg.map, *id) else {
                continue;
            };
            let truth: Vec<Vec2> = (t + 1..=t + cfg.horizon_steps)
                .map(|k| st.history.state_at(k).unwrap().pos())
                .collect();
            let yaw = current[id].yaw;
            let mut prev = current[id].pos();
            let truth_deltas: Vec<Vec2> = truth
                .iter()
                .map(|p| {
                    let d = (*p - prev).rotate(-yaw);
                    prev = *p;
                    d
                })
                .collect();
            samples.push(TrainingSample {
                input,
                truth,
                truth_deltas,
            });
        }
    }
    samples
}

/// Train the predictor with Adam on the mixture NLL. The learning rate is
/// divided by 10 every `lr_decay_epochs`. Deterministic given the seed.
/// Returns the parameters and the per-epoch mean loss curve.
pub fn train_predictor(
    data: &[Segment],
    cfg: &PredictorConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>), PredictorError> {
    cfg.validate()?;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::random(cfg, &mut rng);
    let samples = collect_training_samples(data, cfg);
    assert!(!samples.is_empty(), "no training samples in the data");

    let mut adam = Adam::new(cfg.learning_rate, params.store.len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.learning_rate / 10f64.powi((epoch / cfg.lr_decay_epochs) as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (si, &idx) in order.iter().enumerate() {
            let sample = &samples[idx];
            let mut tape = Tape::new();
            let nodes = forward_scene(
                &mut tape,
                &params.store,
                cfg,
                &sample.input,
                cfg.teacher_forcing.then_some(sample.truth_deltas.as_slice()),
            );
            let loss = nll_loss_on_tape(&mut tape, &nodes, &sample.truth);
            let loss_v = tape.scalar_value(loss);
            if !loss_v.is_finite() {
                return Err(PredictorError::NonFiniteLoss {
                    epoch,
                    sample: si,
                });
            }
            epoch_loss += loss_v;
            let grads = tape.backward(loss);
            let flat = params.store.flat_gradient(&nodes.leaves, &grads);
            adam.apply(params.store.flat_mut(), &flat)
                .map_err(|_| PredictorError::NonFiniteLoss { epoch, sample: si })?;
            if !params.store.is_finite() {
                return Err(PredictorError::NonFiniteLoss { epoch, sample: si });
            }
        }
        curve.push(epoch_loss / samples.len() as f64);
    }
    Ok((params, curve))
}

/// Mean L2 error of the point estimate against the truth.
pub fn prediction_ade(pred: &PredictedTrajectory, truth: &[Vec2]) -> f64 {
    let est = pred.point_estimate();
    let n = est.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| est[i].dist(truth[i])).sum::<f64>() / n as f64
}
