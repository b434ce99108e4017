//! Synthetic expert: multi-seed refined trajectories standing in for
//! recorded demonstrations, and the dataset generator built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::{eval_trajectory, fit_coeffs, BasisMatrix, Trajectory, TrajectoryCoeffs};
use crate::error::{Error, Result};
use crate::geom::{Pose2, Shape};
use crate::guidance::{refine_against, Obstacles, RefineConfig};
use crate::scene::{make_scenario, sample_world, DatasetRecord, Difficulty, Scenario, SceneConfig};
use crate::sim::{step_agents_with, AgentState, SocialForce};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Cruise speed of the reference line, m/s.
    pub speed: f64,
    /// Peak lateral offsets of the detour seeds, meters (each used left and right).
    pub lateral_offsets: Vec<f64>,
    /// Speed factors of the slow-down seeds.
    pub slow_factors: Vec<f64>,
    /// Weight of mean squared acceleration in the oracle cost.
    pub accel_weight: f64,
    /// Alternatives costing more than best + slack are dropped.
    pub slack: f64,
    pub max_modes: usize,
    /// Extra cost per meter of mean leftward offset. Positive values model a
    /// walker who prefers to keep right.
    pub side_bias: f64,
    pub refine: RefineConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            speed: 0.85,
            lateral_offsets: vec![0.75, 1.5, 2.5],
            slow_factors: vec![0.5],
            accel_weight: 0.1,
            slack: 1.0,
            max_modes: 3,
            side_bias: 0.0,
            refine: RefineConfig {
                max_iters: 100,
                ..RefineConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Homotopy {
    Left,
    Right,
    Straight,
    Slow,
}

impl Homotopy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Homotopy::Left => "left",
            Homotopy::Right => "right",
            Homotopy::Straight => "straight",
            Homotopy::Slow => "slow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMode {
    pub coeffs: TrajectoryCoeffs,
    pub trajectory: Trajectory,
    pub cost: f64,
    pub class: Homotopy,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutput {
    /// Best first; at most one per homotopy class.
    pub modes: Vec<OracleMode>,
    /// False when no seed refined to a feasible trajectory and `modes[0]` is
    /// only the cheapest fallback.
    pub feasible: bool,
}

impl OracleOutput {
    pub fn best(&self) -> &OracleMode {
        &self.modes[0]
    }
}

fn reference_line(heading: [f64; 2], speed: f64, basis: &BasisMatrix) -> Vec<[f64; 2]> {
    basis
        .times()
        .iter()
        .map(|t| [heading[0] * speed * t, heading[1] * speed * t])
        .collect()
}

fn seeds(heading: [f64; 2], basis: &BasisMatrix, cfg: &OracleConfig) -> Vec<Vec<[f64; 2]>> {
    let t_end = *basis.times().last().expect("non-empty grid");
    let normal = [-heading[1], heading[0]];
    let line = reference_line(heading, cfg.speed, basis);
    let mut out = vec![line.clone()];
    for &o in &cfg.lateral_offsets {
        for side in [1.0, -1.0] {
            out.push(
                line.iter()
                    .zip(basis.times())
                    .map(|(p, t)| {
                        // rise fast, then hold most of the offset
                        let s = (std::f64::consts::PI * t / t_end).sin().max(0.0);
                        let bump = side * o * s.sqrt();
                        [p[0] + normal[0] * bump, p[1] + normal[1] * bump]
                    })
                    .collect(),
            );
        }
    }
    for &f in &cfg.slow_factors {
        out.push(reference_line(heading, cfg.speed * f, basis));
    }
    out
}

fn classify(xy: &[[f64; 2]], heading: [f64; 2], speed: f64, t_end: f64) -> Homotopy {
    let normal = [-heading[1], heading[0]];
    let lateral = xy.iter().map(|p| p[0] * normal[0] + p[1] * normal[1]).sum::<f64>() / xy.len() as f64;
    let last = xy[xy.len() - 1];
    let progress = last[0] * heading[0] + last[1] * heading[1];
    if lateral > 0.25 {
        Homotopy::Left
    } else if lateral < -0.25 {
        Homotopy::Right
    } else if progress < 0.75 * speed * t_end {
        Homotopy::Slow
    } else {
        Homotopy::Straight
    }
}

fn oracle_cost(xy: &[[f64; 2]], acc: &[[f64; 2]], line: &[[f64; 2]], heading: [f64; 2], cfg: &OracleConfig) -> f64 {
    let n = xy.len() as f64;
    let dev = xy
        .iter()
        .zip(line)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum::<f64>()
        / n;
    let a2 = acc.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>() / n;
    let normal = [-heading[1], heading[0]];
    let left = xy.iter().map(|p| p[0] * normal[0] + p[1] * normal[1]).sum::<f64>() / n;
    dev + cfg.accel_weight * a2 + cfg.side_bias * left.max(0.0)
}

/// Refines every seed against the scenario and returns the cheapest result
/// per homotopy class.
pub fn expert_oracle(scenario: &Scenario, basis: &BasisMatrix, cfg: &OracleConfig) -> Result<OracleOutput> {
    let heading = [scenario.goal_heading[0] as f64, scenario.goal_heading[1] as f64];
    let obs = Obstacles::from_scenario(scenario, cfg.refine.include_dynamic);
    let line = reference_line(heading, cfg.speed, basis);
    let t_end = *basis.times().last().expect("non-empty grid");

    let mut results = Vec::new();
    for seed in seeds(heading, basis, cfg) {
        let fit = match fit_coeffs(&seed, basis) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let mut c = fit.coeffs;
        // seeds start at the origin by construction; remove fit round-off
        c.cx[0] = 0.0;
        c.cy[0] = 0.0;
        let r = match refine_against(&c, &obs, basis, &cfg.refine) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let traj = eval_trajectory(&r.coeffs, basis, true)?;
        let acc = traj.acc.as_ref().expect("derivatives requested");
        let cost = oracle_cost(&traj.xy, acc, &line, heading, cfg);
        let class = classify(&traj.xy, heading, cfg.speed, t_end);
        results.push(OracleMode {
            coeffs: r.coeffs,
            trajectory: traj,
            cost,
            class,
            feasible: r.feasible,
        });
    }
    if results.is_empty() {
        return Err(Error::Oracle("every seed diverged".into()));
    }
    let any_feasible = results.iter().any(|m| m.feasible);
    let mut pool: Vec<OracleMode> = results.into_iter().filter(|m| m.feasible || !any_feasible).collect();
    // stable sort keeps seed order among equal costs
    pool.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    if !any_feasible {
        pool.truncate(1);
        return Ok(OracleOutput {
            modes: pool,
            feasible: false,
        });
    }
    let best = pool[0].cost;
    let mut modes: Vec<OracleMode> = Vec::new();
    for m in pool {
        if modes.len() >= cfg.max_modes || m.cost > best + cfg.slack {
            break;
        }
        if modes.iter().all(|k| k.class != m.class) {
            modes.push(m);
        }
    }
    Ok(OracleOutput { modes, feasible: true })
}

// ---- dataset generation -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Relative frequency of sparse, dense and corridor worlds.
    pub mix: [f64; 3],
    /// Crowd warm-up before the snapshot, in steps.
    pub max_warmup_steps: usize,
    /// Crowd warm-up step; taken from the simulator settings in a run config.
    #[serde(skip)]
    pub dt: f64,
    #[serde(skip)]
    pub robot_radius: f64,
    /// Taken from the top-level scene settings in a run config.
    #[serde(skip)]
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    /// Side preference of the expert used for scorer records.
    pub scorer_side_bias: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mix: [0.25, 0.5, 0.25],
            max_warmup_steps: 60,
            dt: 0.1,
            robot_radius: 0.3,
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
            scorer_side_bias: 2.0,
        }
    }
}

/// One robot snapshot inside a freshly sampled world.
pub fn snapshot_scenario(scene_seed: u64, cfg: &GenConfig) -> Result<(Scenario, Difficulty)> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x5eed_0f_5ce7e);
    let total: f64 = cfg.mix.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("world mix must have positive total weight".into()));
    }
    let u = rng.random_range(0.0..total);
    let difficulty = if u < cfg.mix[0] {
        Difficulty::Sparse
    } else if u < cfg.mix[0] + cfg.mix[1] {
        Difficulty::Dense
    } else {
        Difficulty::Corridor
    };
    let world = sample_world(scene_seed, difficulty)?;
    let start = world.robot_start.position();
    let goal = world.robot_goal;
    let mut agents: Vec<AgentState> = world.agent_specs.iter().map(AgentState::from).collect();

    // place the robot somewhere along its route, clear of shapes and agents
    let warmup = rng.random_range(0..=cfg.max_warmup_steps);
    for _ in 0..warmup {
        agents = step_agents_with(&agents, &world.static_shapes, &[], &SocialForce::default(), cfg.dt)?;
    }
    for _ in 0..100 {
        let f = rng.random_range(0.0..0.6);
        let p = [start[0] + f * (goal[0] - start[0]), start[1] + f * (goal[1] - start[1]) + rng.random_range(-0.5..0.5)];
        let clear_static = world.static_shapes.iter().all(|s: &Shape| s.signed_distance(p) > cfg.robot_radius + 0.3);
        let clear_agents = agents
            .iter()
            .all(|a| crate::geom::dist(a.pos, p) > cfg.robot_radius + a.radius + 0.4);
        if clear_static && clear_agents {
            let heading = (goal[1] - p[1]).atan2(goal[0] - p[0]) + rng.random_range(-0.4..0.4);
            let pose = Pose2::new(p[0], p[1], heading);
            return Ok((make_scenario(&world.static_shapes, &agents, &pose, goal, &cfg.scene), difficulty));
        }
    }
    Err(Error::Generation(format!("no clear robot placement in scene {scene_seed}")))
}

/// Records for scene `scene_seed`: one per oracle mode for flow training,
/// or one carrying the side-biased expert's waypoints for scorer training.
pub fn records_for_scene(scene_seed: u64, for_scorer: bool, basis: &BasisMatrix, cfg: &GenConfig) -> Result<Vec<DatasetRecord>> {
    let (scenario, difficulty) = snapshot_scenario(scene_seed, cfg)?;
    let mut ocfg = cfg.oracle.clone();
    if for_scorer {
        ocfg.side_bias = cfg.scorer_side_bias;
    }
    let out = expert_oracle(&scenario, basis, &ocfg)?;
    if !out.feasible {
        return Ok(Vec::new());
    }
    let tag = difficulty.as_str();
    if for_scorer {
        let best = out.best();
        return Ok(vec![DatasetRecord::new(
            scenario,
            &best.coeffs,
            Some(&best.trajectory.xy),
            scene_seed,
            scene_seed,
            &format!("{tag}/expert/{}", best.class.as_str()),
        )]);
    }
    Ok(out
        .modes
        .iter()
        .map(|m| {
            DatasetRecord::new(
                scenario.clone(),
                &m.coeffs,
                None,
                scene_seed,
                scene_seed,
                &format!("{tag}/{}", m.class.as_str()),
            )
        })
        .collect())
}

/// Generates at least `count` records (then truncates to exactly `count`)
/// from consecutive scene seeds derived from `seed`. Scenes are processed
/// in parallel batches; output order depends only on the seeds.
pub fn generate_records(
    seed: u64,
    count: usize,
    for_scorer: bool,
    basis: &BasisMatrix,
    cfg: &GenConfig,
) -> Result<(Vec<DatasetRecord>, GenStats)> {
    let base = seed.wrapping_mul(1_000_003).wrapping_add(if for_scorer { 1 << 40 } else { 0 });
    let mut records = Vec::with_capacity(count);
    let mut stats = GenStats::default();
    let mut next = 0u64;
    while records.len() < count {
        // scenes yield about two records each; batch size only depends on progress
        let batch = ((count - records.len()) as u64).div_ceil(2).clamp(1, 64);
        if stats.scenes_tried > 20 * count as u64 + 100 {
            return Err(Error::Generation(format!(
                "only {} of {count} records after {} scenes",
                records.len(),
                stats.scenes_tried
            )));
        }
        let ids: Vec<u64> = (next..next + batch).map(|i| base.wrapping_add(i)).collect();
        next += batch;
        let outs: Vec<Result<Vec<DatasetRecord>>> =
            ids.par_iter().map(|&s| records_for_scene(s, for_scorer, basis, cfg)).collect();
        for o in outs {
            stats.scenes_tried += 1;
            match o {
                Ok(r) if !r.is_empty() => {
                    stats.scenes_used += 1;
                    records.extend(r);
                }
                _ => stats.scenes_skipped += 1,
            }
            if records.len() >= count {
                break;
            }
        }
    }
    records.truncate(count);
    stats.records = records.len();
    Ok((records, stats))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenStats {
    pub scenes_tried: u64,
    pub scenes_used: u64,
    pub scenes_skipped: u64,
    pub records: usize,
}
