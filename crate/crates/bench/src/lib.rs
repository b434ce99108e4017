//! Shared fixtures for the criterion benches.

use crowdfm_core::config::RunConfig;
use crowdfm_core::scene::{make_scenario, sample_world, Difficulty, Scenario};
use crowdfm_core::sim::AgentState;

/// The ego-frame scenario at the start of a seeded dense world.
pub fn dense_scenario(seed: u64) -> Scenario {
    let cfg = RunConfig::default();
    let world = sample_world(seed, Difficulty::Dense).expect("dense world");
    let agents: Vec<AgentState> = world.agent_specs.iter().map(AgentState::from).collect();
    make_scenario(&world.static_shapes, &agents, &world.robot_start, world.robot_goal, &cfg.scene)
}
