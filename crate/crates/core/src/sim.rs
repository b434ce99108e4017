//! Closed-loop 2D crowd simulation: social-force agents, a unicycle robot,
//! collision checks and planner-in-the-loop episodes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bernstein::Trajectory;
use crate::error::{Error, Result};
use crate::geom::{dist, norm, wrap_angle, Pose2, Shape};
use crate::scene::{make_scenario, AgentSpec, Scenario, SceneConfig, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub pref_speed: f64,
    pub radius: f64,
}

impl From<&AgentSpec> for AgentState {
    fn from(s: &AgentSpec) -> Self {
        Self {
            pos: s.start,
            vel: [0.0, 0.0],
            goal: s.goal,
            pref_speed: s.pref_speed,
            radius: s.radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2,
    /// Linear speed, m/s.
    pub v: f64,
    /// Turn rate, rad/s.
    pub omega: f64,
    pub radius: f64,
    pub v_max: f64,
    pub a_max: f64,
}

impl RobotState {
    pub fn at_rest(pose: Pose2, cfg: &SimConfig) -> Self {
        Self {
            pose,
            v: 0.0,
            omega: 0.0,
            radius: cfg.robot_radius,
            v_max: cfg.v_max,
            a_max: cfg.a_max,
        }
    }
}

/// Social-force parameters. Repulsion magnitude is `strength·exp((r − d)/range)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialForce {
    pub agent_strength: f64,
    pub agent_range: f64,
    pub wall_strength: f64,
    pub wall_range: f64,
    /// Share of the repulsion turned sideways (to the agent's right) when
    /// the other party is ahead.
    pub sidestep: f64,
    /// Agents closer than this to their goal stop.
    pub arrive_tolerance: f64,
}

impl Default for SocialForce {
    fn default() -> Self {
        Self {
            agent_strength: 2.5,
            agent_range: 0.25,
            wall_strength: 2.0,
            wall_range: 0.15,
            sidestep: 1.0,
            arrive_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Simulation step and replan period, seconds.
    pub dt: f64,
    pub goal_tolerance: f64,
    pub timeout: f64,
    pub lookahead: f64,
    pub max_omega: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub robot_radius: f64,
    pub social: SocialForce,
    /// Taken from the top-level scene settings in a run config.
    #[serde(skip)]
    pub scene: SceneConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            goal_tolerance: 0.5,
            timeout: 120.0,
            lookahead: 0.6,
            max_omega: 2.0,
            v_max: 1.0,
            a_max: 1.5,
            robot_radius: 0.3,
            social: SocialForce::default(),
            scene: SceneConfig::default(),
        }
    }
}

/// A repelling disc that is not itself an agent (the robot, for the crowd).
#[derive(Debug, Clone, Copy)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 0.2) {
        return Err(Error::invalid(format!("agent step dt must be in (0, 0.2], got {dt}")));
    }
    Ok(())
}

/// Advances the crowd one step with mutual repulsion only.
pub fn step_agents(agents: &[AgentState], shapes: &[Shape], dt: f64) -> Result<Vec<AgentState>> {
    step_agents_with(agents, shapes, &[], &SocialForce::default(), dt)
}

/// Advances the crowd one step; `others` also repel every agent.
pub fn step_agents_with(
    agents: &[AgentState],
    shapes: &[Shape],
    others: &[Disc],
    sf: &SocialForce,
    dt: f64,
) -> Result<Vec<AgentState>> {
    check_dt(dt)?;
    let mut out = Vec::with_capacity(agents.len());
    for (i, a) in agents.iter().enumerate() {
        let to_goal = [a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]];
        let gd = norm(to_goal);
        if gd <= sf.arrive_tolerance {
            out.push(AgentState { vel: [0.0, 0.0], ..*a });
            continue;
        }
        let dir = [to_goal[0] / gd, to_goal[1] / gd];
        let speed = a.pref_speed.min(gd / dt);
        let mut v = [dir[0] * speed, dir[1] * speed];
        let right = [dir[1], -dir[0]];

        let mut push = |center: [f64; 2], radius: f64, strength: f64, range: f64| {
            let d = dist(a.pos, center);
            if d < 1e-9 {
                return;
            }
            let n = [(a.pos[0] - center[0]) / d, (a.pos[1] - center[1]) / d];
            let mag = strength * ((radius + a.radius - d) / range).exp();
            v[0] += mag * n[0];
            v[1] += mag * n[1];
            // step aside to the right of an oncoming obstacle
            if -(n[0] * dir[0] + n[1] * dir[1]) > 0.0 {
                v[0] += sf.sidestep * mag * right[0];
                v[1] += sf.sidestep * mag * right[1];
            }
        };
        for (j, b) in agents.iter().enumerate() {
            if j != i {
                push(b.pos, b.radius, sf.agent_strength, sf.agent_range);
            }
        }
        for o in others {
            push(o.center, o.radius, sf.agent_strength, sf.agent_range);
        }
        for s in shapes {
            let c = s.closest_point(a.pos);
            let d = s.signed_distance(a.pos);
            let dd = dist(a.pos, c);
            if dd < 1e-9 {
                continue;
            }
            let n = [(a.pos[0] - c[0]) / dd, (a.pos[1] - c[1]) / dd];
            let mag = sf.wall_strength * ((a.radius - d) / sf.wall_range).exp();
            v[0] += mag * n[0];
            v[1] += mag * n[1];
        }

        let s = norm(v);
        if s > a.pref_speed {
            v = [v[0] * a.pref_speed / s, v[1] * a.pref_speed / s];
        }
        out.push(AgentState {
            pos: [a.pos[0] + v[0] * dt, a.pos[1] + v[1] * dt],
            vel: v,
            ..*a
        });
    }
    Ok(out)
}

/// Unicycle step: speed clamped to `±v_max` and to `a_max·dt` of change,
/// turn rate passed through, pose advanced along the exact arc.
pub fn step_robot(robot: &RobotState, cmd: (f64, f64), dt: f64) -> Result<RobotState> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("robot step dt must be positive, got {dt}")));
    }
    let dv = robot.a_max * dt;
    let v = cmd
        .0
        .clamp(-robot.v_max, robot.v_max)
        .clamp(robot.v - dv, robot.v + dv);
    let w = cmd.1;
    let p = robot.pose;
    let th1 = p.theta + w * dt;
    let (x, y) = if w.abs() < 1e-9 {
        (p.x + v * dt * p.theta.cos(), p.y + v * dt * p.theta.sin())
    } else {
        let r = v / w;
        (p.x + r * (th1.sin() - p.theta.sin()), p.y - r * (th1.cos() - p.theta.cos()))
    };
    Ok(RobotState {
        pose: Pose2::new(x, y, wrap_angle(th1)),
        v,
        omega: w,
        ..*robot
    })
}

/// `(collided, min_clearance)`; collision is a strictly negative surface gap.
pub fn check_collision(robot: &RobotState, agents: &[AgentState], shapes: &[Shape]) -> (bool, f64) {
    let p = robot.pose.position();
    let mut clearance = f64::INFINITY;
    for a in agents {
        clearance = clearance.min(dist(p, a.pos) - robot.radius - a.radius);
    }
    for s in shapes {
        clearance = clearance.min(s.signed_distance(p) - robot.radius);
    }
    (clearance < 0.0, clearance)
}

/// What a planner hands back: the ego-frame trajectory to track and the
/// index of the chosen candidate, if it chose among several.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub trajectory: Trajectory,
    pub cand_idx: Option<usize>,
    /// Ego-frame waypoints of every candidate considered; may be empty.
    pub candidates: Vec<Vec<[f64; 2]>>,
}

/// State handed to an episode observer after each replan, before the robot
/// moves.
pub struct Frame<'a> {
    pub step: usize,
    pub time: f64,
    pub robot: &'a RobotState,
    pub agents: &'a [AgentState],
    pub plan: &'a PlanOutput,
}

pub trait Planner {
    /// `step` is the replan index within the episode, for per-step seeding.
    fn plan(&mut self, scenario: &Scenario, step: usize) -> Result<PlanOutput>;
}

impl<F> Planner for F
where
    F: FnMut(&Scenario, usize) -> Result<PlanOutput>,
{
    fn plan(&mut self, scenario: &Scenario, step: usize) -> Result<PlanOutput> {
        self(scenario, step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
    /// The planner returned an error.
    Aborted,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
            Outcome::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub pose: Pose2,
    pub v: f64,
    pub omega: f64,
    pub cand_idx: Option<usize>,
    pub min_clearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub path_length: f64,
    pub duration: f64,
    pub mean_speed: f64,
    pub step_log: Vec<StepRecord>,
    /// Planner error message for aborted episodes.
    pub diagnostic: Option<String>,
}

/// Pure-pursuit command toward the lookahead point of a world-frame path.
///
/// Speed follows the path's average speed over its first half second, so a
/// plan that stands still stops the robot.
pub fn pure_pursuit(robot: &RobotState, path: &[[f64; 2]], cfg: &SimConfig) -> (f64, f64) {
    if path.len() < 2 {
        return (0.0, 0.0);
    }
    let probe = path.len().min(6) - 1;
    let v_ref = dist(path[0], path[probe]) / (probe as f64 * cfg.dt);
    if v_ref < 1e-3 {
        return (0.0, 0.0);
    }
    let p = robot.pose.position();
    let target = path
        .iter()
        .find(|q| dist(**q, p) >= cfg.lookahead)
        .unwrap_or(path.last().expect("non-empty"));
    let local = robot.pose.to_local(*target);
    let l = norm(local);
    if l < 1e-6 {
        return (0.0, 0.0);
    }
    let alpha = local[1].atan2(local[0]);
    if alpha.abs() > std::f64::consts::FRAC_PI_2 {
        // target behind: turn in place
        return (0.0, (2.0 * alpha).clamp(-cfg.max_omega, cfg.max_omega));
    }
    let v = v_ref.min(cfg.v_max);
    let kappa = 2.0 * alpha.sin() / l;
    let w = (v * kappa).clamp(-cfg.max_omega, cfg.max_omega);
    (v, w)
}

/// Runs one closed-loop episode.
pub fn run_episode(world: &WorldSpec, planner: &mut dyn Planner, cfg: &SimConfig) -> EpisodeResult {
    run_episode_observed(world, planner, cfg, &mut |_| {})
}

/// [`run_episode`] with a callback invoked after every replan.
pub fn run_episode_observed(
    world: &WorldSpec,
    planner: &mut dyn Planner,
    cfg: &SimConfig,
    observer: &mut dyn FnMut(&Frame),
) -> EpisodeResult {
    let mut agents: Vec<AgentState> = world.agent_specs.iter().map(AgentState::from).collect();
    let mut robot = RobotState::at_rest(world.robot_start, cfg);
    robot.radius = world.robot_radius;
    let shapes = &world.static_shapes;
    let max_steps = (cfg.timeout / cfg.dt).round() as usize;
    let mut log = Vec::new();
    let mut path_length = 0.0;
    let mut outcome = Outcome::Timeout;
    let mut diagnostic = None;
    let mut steps_run = 0;

    for step in 0..max_steps {
        if dist(robot.pose.position(), world.robot_goal) <= cfg.goal_tolerance {
            outcome = Outcome::Success;
            break;
        }
        let scenario = make_scenario(shapes, &agents, &robot.pose, world.robot_goal, &cfg.scene);
        let plan = match planner.plan(&scenario, step) {
            Ok(p) => p,
            Err(e) => {
                outcome = Outcome::Aborted;
                diagnostic = Some(e.to_string());
                break;
            }
        };
        observer(&Frame {
            step,
            time: step as f64 * cfg.dt,
            robot: &robot,
            agents: &agents,
            plan: &plan,
        });
        let path: Vec<[f64; 2]> = plan.trajectory.xy.iter().map(|q| robot.pose.to_world(*q)).collect();
        let cmd = pure_pursuit(&robot, &path, cfg);
        let next = step_robot(&robot, cmd, cfg.dt).expect("dt validated by config");
        let robot_disc = [Disc {
            center: robot.pose.position(),
            radius: robot.radius,
        }];
        agents = step_agents_with(&agents, shapes, &robot_disc, &cfg.social, cfg.dt)
            .expect("dt validated by config");
        path_length += dist(robot.pose.position(), next.pose.position());
        robot = next;
        steps_run = step + 1;
        let (collided, clearance) = check_collision(&robot, &agents, shapes);
        log.push(StepRecord {
            step,
            time: steps_run as f64 * cfg.dt,
            pose: robot.pose,
            v: robot.v,
            omega: robot.omega,
            cand_idx: plan.cand_idx,
            min_clearance: clearance,
        });
        if collided {
            outcome = Outcome::Collision;
            break;
        }
    }
    if outcome == Outcome::Timeout && dist(robot.pose.position(), world.robot_goal) <= cfg.goal_tolerance {
        outcome = Outcome::Success;
    }
    let duration = steps_run as f64 * cfg.dt;
    EpisodeResult {
        outcome,
        path_length,
        duration,
        mean_speed: if duration > 0.0 { path_length / duration } else { 0.0 },
        step_log: log,
        diagnostic,
    }
}

pub fn write_episode_csv(result: &EpisodeResult, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,time,x,y,theta,v,omega,cand_idx,min_clearance")?;
    for r in &result.step_log {
        let idx = r.cand_idx.map(|i| i.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.time, r.pose.x, r.pose.y, r.pose.theta, r.v, r.omega, idx, r.min_clearance
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bernstein::{eval_trajectory, BasisMatrix, TrajectoryCoeffs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agent(pos: [f64; 2], goal: [f64; 2]) -> AgentState {
        AgentState {
            pos,
            vel: [0.0, 0.0],
            goal,
            pref_speed: 1.0,
            radius: 0.25,
        }
    }

    #[test]
    fn lone_agent_walks_at_pref_speed() {
        let mut a = vec![AgentState {
            pref_speed: 0.8,
            ..agent([0.0, 0.0], [10.0, 0.0])
        }];
        for _ in 0..10 {
            a = step_agents(&a, &[], 0.1).unwrap();
        }
        assert!((a[0].pos[0] - 0.8).abs() < 1e-9);
        assert!(a[0].pos[1].abs() < 1e-12);
    }

    #[test]
    fn agent_stops_at_goal() {
        let mut a = vec![agent([0.0, 0.0], [0.35, 0.0])];
        for _ in 0..10 {
            a = step_agents(&a, &[], 0.1).unwrap();
        }
        assert!(norm(a[0].vel) < 0.05);
        assert!(dist(a[0].pos, [0.35, 0.0]) <= SocialForce::default().arrive_tolerance + 1e-9);
    }

    #[test]
    fn head_on_agents_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ok = 0;
        for _ in 0..100 {
            let y = rng.random_range(-0.1..0.1);
            let mut a = vec![
                AgentState {
                    pref_speed: rng.random_range(0.6..1.2),
                    ..agent([-4.0, y], [4.0, y])
                },
                AgentState {
                    pref_speed: rng.random_range(0.6..1.2),
                    ..agent([4.0, 0.0], [-4.0, 0.0])
                },
            ];
            let mut closest = f64::INFINITY;
            for _ in 0..200 {
                a = step_agents(&a, &[], 0.1).unwrap();
                closest = closest.min(dist(a[0].pos, a[1].pos));
            }
            if closest >= a[0].radius + a[1].radius {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100 head-on passes kept apart");
    }

    #[test]
    fn bad_dt_rejected() {
        assert!(step_agents(&[], &[], 0.0).is_err());
        assert!(step_agents(&[], &[], 0.3).is_err());
    }

    fn robot() -> RobotState {
        RobotState::at_rest(Pose2::new(0.0, 0.0, 0.0), &SimConfig::default())
    }

    #[test]
    fn robot_straight_step() {
        let r = RobotState { v: 1.0, ..robot() };
        let n = step_robot(&r, (1.0, 0.0), 0.1).unwrap();
        assert!((n.pose.x - 0.1).abs() < 1e-12 && n.pose.y.abs() < 1e-12 && n.pose.theta == 0.0);
    }

    #[test]
    fn robot_turns_in_place() {
        let n = step_robot(&robot(), (0.0, std::f64::consts::PI), 0.5).unwrap();
        assert!((n.pose.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn robot_acceleration_clamp() {
        let n = step_robot(&robot(), (5.0, 0.0), 0.1).unwrap();
        assert!((n.v - 0.15).abs() < 1e-12);
    }

    #[test]
    fn collision_cases() {
        let r = robot();
        let (c, cl) = check_collision(&r, &[agent([5.0, 0.0], [5.0, 0.0])], &[]);
        assert!(!c && (cl - 4.45).abs() < 1e-12);
        let (c, _) = check_collision(&r, &[agent([0.0, 0.0], [1.0, 0.0])], &[]);
        assert!(c);
        let wall = Shape::Rect {
            min: [0.3, -1.0],
            max: [1.0, 1.0],
        };
        let (c, cl) = check_collision(&r, &[], &[wall]);
        assert!(!c && cl.abs() < 1e-9);
    }

    fn line_planner(speed: f64) -> impl FnMut(&Scenario, usize) -> Result<PlanOutput> {
        let basis = BasisMatrix::canonical();
        move |s: &Scenario, _| {
            let h = s.goal_heading;
            let end = [h[0] as f64 * speed * 4.9, h[1] as f64 * speed * 4.9];
            let c = TrajectoryCoeffs::line(basis.order(), [0.0, 0.0], end);
            Ok(PlanOutput {
                trajectory: eval_trajectory(&c, &basis, false)?,
                cand_idx: None,
                candidates: Vec::new(),
            })
        }
    }

    #[test]
    fn empty_world_straight_line_succeeds() {
        let world = WorldSpec::empty(Pose2::new(0.0, 0.0, 0.3), [10.0, 0.0]);
        let res = run_episode(&world, &mut line_planner(0.9), &SimConfig::default());
        assert_eq!(res.outcome, Outcome::Success);
        let straight = 10.0 - 0.5;
        assert!((res.path_length - straight).abs() / straight < 0.05, "{}", res.path_length);
        assert!((res.mean_speed - res.path_length / res.duration).abs() < 1e-12);
        for r in &res.step_log {
            assert!(r.v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn wall_causes_collision() {
        let mut world = WorldSpec::empty(Pose2::new(0.0, 0.0, 0.0), [10.0, 0.0]);
        world.static_shapes.push(Shape::Rect {
            min: [3.0, -3.0],
            max: [3.5, 3.0],
        });
        let res = run_episode(&world, &mut line_planner(0.9), &SimConfig::default());
        assert_eq!(res.outcome, Outcome::Collision);
    }

    #[test]
    fn standing_still_times_out() {
        let world = WorldSpec::empty(Pose2::new(0.0, 0.0, 0.0), [10.0, 0.0]);
        let cfg = SimConfig {
            timeout: 5.0,
            ..Default::default()
        };
        let res = run_episode(&world, &mut line_planner(0.0), &cfg);
        assert_eq!(res.outcome, Outcome::Timeout);
        assert!((res.duration - 5.0).abs() < 1e-9);
        assert!(res.path_length < 1e-12);
    }

    #[test]
    fn planner_error_aborts() {
        let world = WorldSpec::empty(Pose2::new(0.0, 0.0, 0.0), [10.0, 0.0]);
        let mut p = |_: &Scenario, _: usize| -> Result<PlanOutput> { Err(Error::Planner("boom".into())) };
        let res = run_episode(&world, &mut p, &SimConfig::default());
        assert_eq!(res.outcome, Outcome::Aborted);
        assert!(res.diagnostic.unwrap().contains("boom"));
    }
}
