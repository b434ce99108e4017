//! Ego-frame scenarios, synthetic worlds and the dataset file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bernstein::TrajectoryCoeffs;
use crate::error::{Error, Result};
use crate::geom::{dist, Pose2, Shape};
use crate::sim::AgentState;

pub const DATASET_VERSION: u32 = 1;

/// Padding value for unused point-cloud rows.
pub const PCD_SENTINEL: [f32; 2] = [1e3, 1e3];
/// Padding value for unused dynamic-obstacle rows.
pub const DYN_SENTINEL: [f32; 4] = [1e3, 1e3, 0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Point-cloud capacity.
    pub n_pts: usize,
    /// Dynamic-obstacle capacity.
    pub n_obs: usize,
    /// Rays in the 360° scan.
    pub n_rays: usize,
    /// Scan range, meters.
    pub max_range: f64,
    /// Agents farther than this are not reported, meters.
    pub sensing_radius: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_pts: 128,
            n_obs: 10,
            n_rays: 128,
            max_range: 8.0,
            sensing_radius: 8.0,
        }
    }
}

/// What the planner sees: a static scan, nearby agents and the goal
/// direction, all in the robot's frame (x forward, y left).
///
/// `pointcloud` and `dyn_obstacles` are padded with sentinels past
/// `pointcloud_len` / `dyn_len`; consumers must mask by length.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub pointcloud: Vec<[f32; 2]>,
    pub pointcloud_len: usize,
    pub dyn_obstacles: Vec<[f32; 4]>,
    pub dyn_len: usize,
    pub goal_heading: [f32; 2],
}

impl Scenario {
    /// Builds a padded scenario from the valid rows.
    pub fn from_parts(
        points: &[[f32; 2]],
        dyn_obstacles: &[[f32; 4]],
        goal_heading: [f32; 2],
        n_pts: usize,
        n_obs: usize,
    ) -> Result<Self> {
        if points.len() > n_pts || dyn_obstacles.len() > n_obs {
            return Err(Error::invalid(format!(
                "{} points / {} obstacles exceed capacity {n_pts} / {n_obs}",
                points.len(),
                dyn_obstacles.len()
            )));
        }
        let n = (goal_heading[0] as f64).hypot(goal_heading[1] as f64);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("goal heading has norm {n}, expected 1")));
        }
        let mut pointcloud = points.to_vec();
        pointcloud.resize(n_pts, PCD_SENTINEL);
        let mut dyn_rows = dyn_obstacles.to_vec();
        dyn_rows.resize(n_obs, DYN_SENTINEL);
        Ok(Self {
            pointcloud,
            pointcloud_len: points.len(),
            dyn_obstacles: dyn_rows,
            dyn_len: dyn_obstacles.len(),
            goal_heading,
        })
    }

    /// Obstacle-free scenario heading along `goal_heading`.
    pub fn empty(goal_heading: [f32; 2], cfg: &SceneConfig) -> Self {
        Self::from_parts(&[], &[], goal_heading, cfg.n_pts, cfg.n_obs).expect("empty scenario")
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.pointcloud[..self.pointcloud_len]
    }

    pub fn dynamics(&self) -> &[[f32; 4]] {
        &self.dyn_obstacles[..self.dyn_len]
    }

    /// Reflection across the ego x axis.
    pub fn mirrored(&self) -> Self {
        let mut s = self.clone();
        for p in &mut s.pointcloud[..self.pointcloud_len] {
            p[1] = -p[1];
        }
        for o in &mut s.dyn_obstacles[..self.dyn_len] {
            o[1] = -o[1];
            o[3] = -o[3];
        }
        s.goal_heading[1] = -s.goal_heading[1];
        s
    }
}

/// Builds the robot's view of the world.
///
/// The scan only sees static shapes; agents are reported separately,
/// nearest first, up to `cfg.n_obs` within `cfg.sensing_radius`.
pub fn make_scenario(
    shapes: &[Shape],
    agents: &[AgentState],
    robot: &Pose2,
    goal: [f64; 2],
    cfg: &SceneConfig,
) -> Scenario {
    let origin = robot.position();
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for i in 0..cfg.n_rays {
        let a = std::f64::consts::TAU * i as f64 / cfg.n_rays as f64;
        let dir = [(robot.theta + a).cos(), (robot.theta + a).sin()];
        let best = shapes
            .iter()
            .filter_map(|s| s.ray_hit(origin, dir))
            .fold(f64::INFINITY, f64::min);
        if best <= cfg.max_range {
            hits.push((i, best));
        }
    }
    if hits.len() > cfg.n_pts {
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        hits.truncate(cfg.n_pts);
        hits.sort_by_key(|h| h.0);
    }
    let points: Vec<[f32; 2]> = hits
        .iter()
        .map(|&(i, r)| {
            let a = std::f64::consts::TAU * i as f64 / cfg.n_rays as f64;
            [(r * a.cos()) as f32, (r * a.sin()) as f32]
        })
        .collect();

    let mut near: Vec<(f64, usize)> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| (dist(a.pos, origin), i))
        .filter(|(d, _)| *d <= cfg.sensing_radius)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    near.truncate(cfg.n_obs);
    let dyn_rows: Vec<[f32; 4]> = near
        .iter()
        .map(|&(_, i)| {
            let p = robot.to_local(agents[i].pos);
            let v = robot.rotate_to_local(agents[i].vel);
            [p[0] as f32, p[1] as f32, v[0] as f32, v[1] as f32]
        })
        .collect();

    let g = robot.to_local(goal);
    let gn = g[0].hypot(g[1]);
    let heading = if gn > 1e-9 {
        [(g[0] / gn) as f32, (g[1] / gn) as f32]
    } else {
        [1.0, 0.0]
    };
    // renormalize after the f32 cast so the unit-norm invariant holds tightly
    let hn = (heading[0] as f64).hypot(heading[1] as f64);
    let heading = [(heading[0] as f64 / hn) as f32, (heading[1] as f64 / hn) as f32];

    Scenario::from_parts(&points, &dyn_rows, heading, cfg.n_pts, cfg.n_obs)
        .expect("scan and agent rows are capped by config")
}

// ---- worlds ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Sparse,
    Dense,
    Corridor,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Sparse => "sparse",
            Difficulty::Dense => "dense",
            Difficulty::Corridor => "corridor",
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Difficulty::Sparse),
            "dense" => Ok(Difficulty::Dense),
            "corridor" => Ok(Difficulty::Corridor),
            other => Err(Error::Config(format!("unknown difficulty `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub pref_speed: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// `[x_min, y_min, x_max, y_max]`
    pub bounds: [f64; 4],
    pub static_shapes: Vec<Shape>,
    pub agent_specs: Vec<AgentSpec>,
    pub robot_start: Pose2,
    pub robot_goal: [f64; 2],
    pub robot_radius: f64,
    pub difficulty: Difficulty,
    pub seed: u64,
}

impl WorldSpec {
    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= self.bounds[0] && p[0] <= self.bounds[2] && p[1] >= self.bounds[1] && p[1] <= self.bounds[3]
    }

    /// Checks the world invariants.
    pub fn validate(&self) -> Result<()> {
        let start = self.robot_start.position();
        for (name, p) in [("robot start", start), ("robot goal", self.robot_goal)] {
            if !self.in_bounds(p) {
                return Err(Error::Generation(format!("{name} {p:?} outside bounds")));
            }
            if self.static_shapes.iter().any(|s| s.contains(p)) {
                return Err(Error::Generation(format!("{name} {p:?} inside a static shape")));
            }
        }
        for a in &self.agent_specs {
            if !(a.pref_speed > 0.0 && a.pref_speed <= 2.0) {
                return Err(Error::Generation(format!("agent speed {} outside (0, 2]", a.pref_speed)));
            }
            if a.radius <= 0.0 {
                return Err(Error::Generation("agent radius must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn empty(start: Pose2, goal: [f64; 2]) -> Self {
        Self {
            bounds: [-20.0, -20.0, 20.0, 20.0],
            static_shapes: Vec::new(),
            agent_specs: Vec::new(),
            robot_start: start,
            robot_goal: goal,
            robot_radius: 0.3,
            difficulty: Difficulty::Sparse,
            seed: 0,
        }
    }
}

const MAX_WORLD_ATTEMPTS: usize = 1000;

fn clear_of(shapes: &[Shape], p: [f64; 2], margin: f64) -> bool {
    shapes.iter().all(|s| s.signed_distance(p) > margin)
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])]
}

/// Deterministic synthetic world for a seed.
pub fn sample_world(seed: u64, difficulty: Difficulty) -> Result<WorldSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ difficulty as u64);
    for _ in 0..MAX_WORLD_ATTEMPTS {
        let w = match difficulty {
            Difficulty::Sparse => try_sparse(&mut rng),
            Difficulty::Dense => try_dense(&mut rng),
            Difficulty::Corridor => try_corridor(&mut rng),
        };
        if let Some(mut w) = w {
            w.seed = seed;
            w.difficulty = difficulty;
            if w.validate().is_ok() {
                return Ok(w);
            }
        }
    }
    Err(Error::Generation(format!(
        "no valid {} world for seed {seed} after {MAX_WORLD_ATTEMPTS} attempts",
        difficulty.as_str()
    )))
}

fn place_agents(
    rng: &mut ChaCha8Rng,
    n: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    shapes: &[Shape],
    keep_clear: &[[f64; 2]],
    min_travel: f64,
) -> Option<Vec<AgentSpec>> {
    let mut agents: Vec<AgentSpec> = Vec::with_capacity(n);
    let mut tries = 0;
    while agents.len() < n {
        tries += 1;
        if tries > 200 * n {
            return None;
        }
        let start = uniform_in(rng, lo, hi);
        let goal = uniform_in(rng, lo, hi);
        if dist(start, goal) < min_travel
            || !clear_of(shapes, start, 0.4)
            || !clear_of(shapes, goal, 0.4)
            || keep_clear.iter().any(|&k| dist(k, start) < 1.5)
            || agents.iter().any(|a| dist(a.start, start) < 0.8)
        {
            continue;
        }
        agents.push(AgentSpec {
            start,
            goal,
            pref_speed: rng.random_range(0.5..1.2),
            radius: rng.random_range(0.2..0.3),
        });
    }
    Some(agents)
}

fn random_pillars(rng: &mut ChaCha8Rng, n: usize, lo: [f64; 2], hi: [f64; 2], keep_clear: &[[f64; 2]]) -> Vec<Shape> {
    let mut shapes = Vec::new();
    let mut tries = 0;
    while shapes.len() < n && tries < 100 {
        tries += 1;
        let c = uniform_in(rng, lo, hi);
        let s = if rng.random_bool(0.5) {
            Shape::Circle {
                center: c,
                radius: rng.random_range(0.25..0.7),
            }
        } else {
            let hx = rng.random_range(0.2..0.9);
            let hy = rng.random_range(0.2..0.9);
            Shape::Rect {
                min: [c[0] - hx, c[1] - hy],
                max: [c[0] + hx, c[1] + hy],
            }
        };
        if keep_clear.iter().all(|&k| s.signed_distance(k) > 1.5) {
            shapes.push(s);
        }
    }
    shapes
}

fn start_goal_pair(rng: &mut ChaCha8Rng, half_span: f64, lateral: f64) -> (Pose2, [f64; 2]) {
    let sy = rng.random_range(-lateral..lateral);
    let gy = rng.random_range(-lateral..lateral);
    let start = [-half_span, sy];
    let goal = [half_span, gy];
    let heading = (goal[1] - start[1]).atan2(goal[0] - start[0]);
    (Pose2::new(start[0], start[1], heading), goal)
}

fn try_sparse(rng: &mut ChaCha8Rng) -> Option<WorldSpec> {
    let half_span = rng.random_range(4.5..6.0);
    let (start, goal) = start_goal_pair(rng, half_span, 2.0);
    let keep = [start.position(), goal];
    let n_shapes = rng.random_range(2..=4);
    let shapes = random_pillars(rng, n_shapes, [-4.0, -4.0], [4.0, 4.0], &keep);
    let n_agents = rng.random_range(3..=6);
    let agents = place_agents(rng, n_agents, [-8.0, -8.0], [8.0, 8.0], &shapes, &keep, 4.0)?;
    build(start, goal, shapes, agents, [-10.0, -10.0, 10.0, 10.0])
}

fn try_dense(rng: &mut ChaCha8Rng) -> Option<WorldSpec> {
    let (start, goal) = start_goal_pair(rng, 5.0, 1.5);
    let keep = [start.position(), goal];
    let n_shapes = rng.random_range(0..=2);
    let shapes = random_pillars(rng, n_shapes, [-3.0, -3.0], [3.0, 3.0], &keep);
    let n_agents = rng.random_range(15..=20);
    let agents = place_agents(rng, n_agents, [-6.0, -6.0], [6.0, 6.0], &shapes, &keep, 5.0)?;
    build(start, goal, shapes, agents, [-8.0, -8.0, 8.0, 8.0])
}

fn try_corridor(rng: &mut ChaCha8Rng) -> Option<WorldSpec> {
    let gap = rng.random_range(2.4..3.0);
    let len = rng.random_range(3.0..4.5);
    let shapes = vec![
        Shape::Rect {
            min: [-len, gap / 2.0],
            max: [len, gap / 2.0 + 1.0],
        },
        Shape::Rect {
            min: [-len, -gap / 2.0 - 1.0],
            max: [len, -gap / 2.0],
        },
    ];
    let start = Pose2::new(-len - 2.0, rng.random_range(-0.5..0.5), 0.0);
    let goal = [len + 2.0, rng.random_range(-0.5..0.5)];
    let n_each = rng.random_range(3..=5);
    let lane = gap / 2.0 - 0.4;
    let mut agents = Vec::new();
    for k in 0..2 * n_each {
        let dir = if k % 2 == 0 { -1.0 } else { 1.0 };
        let mut placed = false;
        for _ in 0..200 {
            let sx = dir * -rng.random_range(0.0..len + 3.0) + dir * -0.5;
            let start_p = [sx, rng.random_range(-lane..lane)];
            let goal_p = [dir * (len + rng.random_range(2.0..4.0)), rng.random_range(-lane..lane)];
            let spec = AgentSpec {
                start: start_p,
                goal: goal_p,
                pref_speed: rng.random_range(0.5..1.1),
                radius: rng.random_range(0.2..0.3),
            };
            if clear_of(&shapes, start_p, 0.35)
                && dist(start_p, start.position()) > 1.5
                && agents.iter().all(|a: &AgentSpec| dist(a.start, start_p) > 0.8)
            {
                agents.push(spec);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    // agents entering from the robot's side walk with it, the rest walk against
    build(start, goal, shapes, agents, [-len - 4.0, -gap / 2.0 - 1.0, len + 4.0, gap / 2.0 + 1.0])
}

fn build(start: Pose2, goal: [f64; 2], shapes: Vec<Shape>, agents: Vec<AgentSpec>, bounds: [f64; 4]) -> Option<WorldSpec> {
    if dist(start.position(), goal) < 8.0 {
        return None;
    }
    if !clear_of(&shapes, start.position(), 0.6) || !clear_of(&shapes, goal, 0.6) {
        return None;
    }
    Some(WorldSpec {
        bounds,
        static_shapes: shapes,
        agent_specs: agents,
        robot_start: start,
        robot_goal: goal,
        robot_radius: 0.3,
        difficulty: Difficulty::Sparse,
        seed: 0,
    })
}

// ---- dataset --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub scenario: Scenario,
    /// Control points, exactly representable in `f32`.
    pub target_coeffs: TrajectoryCoeffs,
    /// Expert waypoints on the canonical grid (scorer-training records only).
    pub expert_waypoints: Option<Vec<[f64; 2]>>,
    pub seed: u64,
    pub scene_id: u64,
    pub tag: String,
}

impl DatasetRecord {
    /// Rounds coefficients and waypoints to `f32` so the record survives a
    /// file round trip unchanged.
    pub fn new(
        scenario: Scenario,
        target_coeffs: &TrajectoryCoeffs,
        expert_waypoints: Option<&[[f64; 2]]>,
        seed: u64,
        scene_id: u64,
        tag: &str,
    ) -> Self {
        let r = |v: &f64| *v as f32 as f64;
        Self {
            scenario,
            target_coeffs: TrajectoryCoeffs {
                cx: target_coeffs.cx.iter().map(r).collect(),
                cy: target_coeffs.cy.iter().map(r).collect(),
            },
            expert_waypoints: expert_waypoints.map(|w| w.iter().map(|p| [r(&p[0]), r(&p[1])]).collect()),
            seed,
            scene_id,
            tag: tag.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    version: u32,
    seed: u64,
    #[serde(default)]
    scene_id: u64,
    #[serde(default)]
    tag: String,
    pcd: Vec<[f32; 2]>,
    #[serde(rename = "dyn")]
    dyn_: Vec<[f32; 4]>,
    goal: [f32; 2],
    coeffs_x: Vec<f32>,
    coeffs_y: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert_xy: Option<Vec<[f32; 2]>>,
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = RecordLine {
            version: DATASET_VERSION,
            seed: r.seed,
            scene_id: r.scene_id,
            tag: r.tag.clone(),
            pcd: r.scenario.points().to_vec(),
            dyn_: r.scenario.dynamics().to_vec(),
            goal: r.scenario.goal_heading,
            coeffs_x: r.target_coeffs.cx.iter().map(|&v| v as f32).collect(),
            coeffs_y: r.target_coeffs.cy.iter().map(|&v| v as f32).collect(),
            expert_xy: r
                .expert_waypoints
                .as_ref()
                .map(|e| e.iter().map(|p| [p[0] as f32, p[1] as f32]).collect()),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records, padding scenarios to the default capacities (or the
/// record's own row count, if larger).
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let cfg = SceneConfig::default();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.version != DATASET_VERSION {
            return Err(Error::Version {
                expected: DATASET_VERSION,
                found: rec.version,
            });
        }
        let parse = |msg: String| Error::Parse { line: lineno, msg };
        let scenario = Scenario::from_parts(
            &rec.pcd,
            &rec.dyn_,
            rec.goal,
            cfg.n_pts.max(rec.pcd.len()),
            cfg.n_obs.max(rec.dyn_.len()),
        )
        .map_err(|e| parse(e.to_string()))?;
        let coeffs = TrajectoryCoeffs::new(
            rec.coeffs_x.iter().map(|&v| v as f64).collect(),
            rec.coeffs_y.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| parse(e.to_string()))?;
        out.push(DatasetRecord {
            scenario,
            target_coeffs: coeffs,
            expert_waypoints: rec
                .expert_xy
                .map(|e| e.iter().map(|p| [p[0] as f64, p[1] as f64]).collect()),
            seed: rec.seed,
            scene_id: rec.scene_id,
            tag: rec.tag,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worlds_are_deterministic() {
        for d in [Difficulty::Sparse, Difficulty::Dense, Difficulty::Corridor] {
            assert_eq!(sample_world(7, d).unwrap(), sample_world(7, d).unwrap());
        }
        let a = sample_world(7, Difficulty::Dense).unwrap();
        let b = sample_world(8, Difficulty::Dense).unwrap();
        assert_ne!(a.agent_specs, b.agent_specs);
    }

    #[test]
    fn dense_world_audit() {
        for seed in 0..100 {
            let w = sample_world(seed, Difficulty::Dense).unwrap();
            let inside = w
                .agent_specs
                .iter()
                .filter(|a| a.start[0].abs() <= 6.0 && a.start[1].abs() <= 6.0)
                .count();
            assert!(inside >= 15, "seed {seed}: {inside} agents in the 12x12 area");
            assert!(dist(w.robot_start.position(), w.robot_goal) >= 8.0);
            w.validate().unwrap();
        }
    }

    #[test]
    fn corridor_world_audit() {
        for seed in 0..30 {
            let w = sample_world(seed, Difficulty::Corridor).unwrap();
            let (lo, hi) = match (w.static_shapes[0], w.static_shapes[1]) {
                (Shape::Rect { min, .. }, Shape::Rect { max, .. }) => (max[1], min[1]),
                _ => unreachable!(),
            };
            assert!(lo - hi <= 3.0 + 1e-12, "gap {}", lo - hi);
            let right = w.agent_specs.iter().filter(|a| a.goal[0] > a.start[0]).count();
            let left = w.agent_specs.len() - right;
            assert!(right > 0 && left > 0, "flow must be bidirectional");
            assert!(dist(w.robot_start.position(), w.robot_goal) >= 8.0);
        }
    }

    #[test]
    fn facing_goal_gives_unit_x() {
        let s = make_scenario(&[], &[], &Pose2::new(1.0, 1.0, 0.0), [5.0, 1.0], &SceneConfig::default());
        assert_eq!(s.goal_heading, [1.0, 0.0]);
        assert_eq!(s.pointcloud_len, 0);
        assert_eq!(s.dyn_len, 0);
        assert!(s.pointcloud.iter().all(|p| *p == PCD_SENTINEL));
        assert!(s.dyn_obstacles.iter().all(|p| *p == DYN_SENTINEL));
    }

    #[test]
    fn wall_ahead() {
        let wall = Shape::Rect {
            min: [2.0, -5.0],
            max: [3.0, 5.0],
        };
        let cfg = SceneConfig {
            n_rays: 360,
            n_pts: 360,
            ..Default::default()
        };
        let s = make_scenario(&[wall], &[], &Pose2::new(0.0, 0.0, 0.0), [10.0, 0.0], &cfg);
        let nearest = s
            .points()
            .iter()
            .min_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])))
            .unwrap();
        assert!((nearest[0] - 2.0).abs() < 1e-6 && nearest[1].abs() < 1e-6);
    }

    #[test]
    fn rejects_non_unit_goal() {
        assert!(Scenario::from_parts(&[], &[], [1.0, 1.0], 4, 2).is_err());
    }
}
