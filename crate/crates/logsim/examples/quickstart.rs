//! Minimal end-to-end run: build a synthetic cut-in scenario, run blind
//! replay and the closed-loop engine on it, and compare the outcomes.

use logsim::engine::{
    run_segment, EgoPolicy, EgoSelection, LaneChangeScript, Models, SimConfig,
};
use logsim::metrics::colliding_agents;
use logsim::scenario::segment_log;
use logsim::synth::cut_in_log;

fn main() {
    let (log, roles) = cut_in_log(1);
    let segment = segment_log(&log).unwrap().into_iter().next().unwrap();

    let engine_cfg = SimConfig {
        ego: EgoSelection::Agent(roles.ego),
        ego_policy: EgoPolicy::LaneChange(LaneChangeScript {
            at_tick: roles.script_tick,
            ..LaneChangeScript::default()
        }),
        ..SimConfig::default()
    };
    let replay_cfg = SimConfig {
        disable_takeover: true,
        ..engine_cfg.clone()
    };

    let replay = run_segment(&segment, &replay_cfg, &Models::default()).unwrap();
    let resolved = run_segment(&segment, &engine_cfg, &Models::default()).unwrap();

    println!(
        "blind replay: {} colliding agents",
        colliding_agents(&replay).len()
    );
    println!(
        "with takeover: {} colliding agents, {} takeover(s) of agent {:?}",
        colliding_agents(&resolved).len(),
        resolved.takeover_count(),
        resolved.taken_over
    );
}
