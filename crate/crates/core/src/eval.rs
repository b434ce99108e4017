//! Metrics, the hand-tuned selection baseline, planner variants and the
//! benchmark harness.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::{eval_trajectory, BasisMatrix, TrajectoryCoeffs};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::guidance::{collision_cost, CostConfig, Obstacles};
use crate::scene::{sample_world, DatasetRecord, Difficulty, Scenario, WorldSpec};
use crate::scorer::{generate_candidates, select_best, CandidateGen, CandidateSet, Scorer};
use crate::sim::{run_episode, EpisodeResult, Outcome, PlanOutput, Planner, SimConfig};

/// Mean Euclidean deviation between two equally sampled paths.
pub fn hlp(candidate: &[[f64; 2]], expert: &[[f64; 2]]) -> Result<f64> {
    if candidate.len() != expert.len() || candidate.is_empty() {
        return Err(Error::invalid(format!(
            "paths of length {} and {} cannot be compared",
            candidate.len(),
            expert.len()
        )));
    }
    let s: f64 = candidate
        .iter()
        .zip(expert)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(s / candidate.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub collision: f64,
    pub accel: f64,
    pub progress: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            collision: 10.0,
            accel: 1.0,
            progress: 2.0,
        }
    }
}

/// Hand-tuned selection cost of one candidate: collision cost, mean squared
/// acceleration and negated terminal progress along the goal heading.
pub fn selection_cost(
    coeffs: &TrajectoryCoeffs,
    scenario: &Scenario,
    obs: &Obstacles,
    weights: &CostWeights,
    cost: &CostConfig,
    basis: &BasisMatrix,
) -> f64 {
    let acc = basis.accelerations(coeffs);
    let mean_acc = acc.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>() / acc.len() as f64;
    let end = basis.positions(coeffs).last().copied().unwrap_or([0.0, 0.0]);
    let g = scenario.goal_heading;
    let progress = end[0] * g[0] as f64 + end[1] * g[1] as f64;
    weights.collision * collision_cost(coeffs, basis, obs, cost) + weights.accel * mean_acc - weights.progress * progress
}

/// Argmin of [`selection_cost`] with lowest-index tie-break.
pub fn cost_select(
    cands: &[TrajectoryCoeffs],
    scenario: &Scenario,
    weights: &CostWeights,
    cost: &CostConfig,
    basis: &BasisMatrix,
) -> Result<usize> {
    if cands.is_empty() {
        return Err(Error::EmptyInput("no candidates to select from".into()));
    }
    let obs = Obstacles::from_scenario(scenario, cost.include_dynamic);
    let mut best = (0, f64::INFINITY);
    for (i, c) in cands.iter().enumerate() {
        let v = selection_cost(c, scenario, &obs, weights, cost, basis);
        if v < best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Table-II style per-episode metrics. `velocity` is `None` for a
/// zero-duration episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub length: f64,
    pub time: f64,
    pub velocity: Option<f64>,
}

pub fn episode_metrics(r: &EpisodeResult) -> EpisodeMetrics {
    EpisodeMetrics {
        length: r.path_length,
        time: r.duration,
        velocity: (r.duration > 0.0).then(|| r.path_length / r.duration),
    }
}

// ---- planners ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Flow samples without guidance, cost-selected.
    Vanilla,
    /// Guided flow samples, cost-selected.
    Guided,
    /// Guided, refined, cost-selected.
    RefineCost,
    /// Guided, refined, scorer-selected.
    RefineScorer,
    /// Baseline that never moves.
    Idle,
    /// Baseline driving straight along the goal heading.
    Straight,
}

impl Variant {
    /// The learned pipeline variants, in ablation order.
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::Guided, Variant::RefineCost, Variant::RefineScorer];
    pub const BASELINES: [Variant; 2] = [Variant::Idle, Variant::Straight];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Guided => "guided",
            Variant::RefineCost => "refine_cost",
            Variant::RefineScorer => "refine_scorer",
            Variant::Idle => "idle",
            Variant::Straight => "straight",
        }
    }

    pub fn is_baseline(&self) -> bool {
        Self::BASELINES.contains(self)
    }

    pub fn needs_scorer(&self) -> bool {
        matches!(self, Variant::RefineScorer)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .chain(Variant::BASELINES)
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown planner variant `{s}`")))
    }
}

/// Everything a learned planner needs, shared read-only across episodes.
pub struct PlannerKit<'a> {
    pub flow: &'a FlowModel,
    pub scorer: Option<&'a Scorer>,
    pub gen: CandidateGen,
    pub weights: CostWeights,
    pub basis: &'a BasisMatrix,
}

/// The full pipeline for one variant, with its own RNG and latency log.
pub struct LearnedPlanner<'a> {
    kit: &'a PlannerKit<'a>,
    variant: Variant,
    rng: ChaCha8Rng,
    pub latencies_ms: Vec<f64>,
}

impl<'a> LearnedPlanner<'a> {
    pub fn new(kit: &'a PlannerKit<'a>, variant: Variant, seed: u64) -> Result<Self> {
        if variant.is_baseline() {
            return Err(Error::Config(format!("`{}` is a baseline, use BaselineFactory", variant.as_str())));
        }
        if variant.needs_scorer() && kit.scorer.is_none() {
            return Err(Error::Config(format!("variant `{}` needs a scorer checkpoint", variant.as_str())));
        }
        Ok(Self {
            kit,
            variant,
            rng: ChaCha8Rng::seed_from_u64(seed),
            latencies_ms: Vec::new(),
        })
    }

    /// Candidates and the chosen index for one scenario.
    pub fn choose(&mut self, scenario: &Scenario) -> Result<(Vec<TrajectoryCoeffs>, usize)> {
        let kit = self.kit;
        let cost = kit.gen.refine.cost_config();
        match self.variant {
            Variant::Vanilla | Variant::Guided => {
                let lambda = if self.variant == Variant::Vanilla { 0.0 } else { kit.gen.lambda };
                let c = kit
                    .flow
                    .sample_candidates(scenario, kit.gen.k, kit.gen.steps, lambda, &cost, kit.basis, &mut self.rng)?;
                let i = cost_select(&c, scenario, &kit.weights, &cost, kit.basis)?;
                Ok((c, i))
            }
            Variant::RefineCost | Variant::RefineScorer => {
                let set = generate_candidates(kit.flow, scenario, &kit.gen, kit.basis, &mut self.rng)?;
                let i = match (self.variant, kit.scorer) {
                    (Variant::RefineScorer, Some(s)) if set.len() >= 2 => select_best(&s.score_candidates(&set, scenario)?)?,
                    (Variant::RefineScorer, Some(_)) => 0,
                    _ => cost_select(&set.coeffs, scenario, &kit.weights, &cost, kit.basis)?,
                };
                Ok((set.coeffs, i))
            }
            Variant::Idle | Variant::Straight => Err(Error::Config(format!(
                "`{}` is a baseline, not a learned variant",
                self.variant.as_str()
            ))),
        }
    }
}

impl Planner for LearnedPlanner<'_> {
    fn plan(&mut self, scenario: &Scenario, _step: usize) -> Result<PlanOutput> {
        let t = Instant::now();
        let (cands, i) = self.choose(scenario)?;
        let trajectory = eval_trajectory(&cands[i], self.kit.basis, false)?;
        self.latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let candidates = cands.iter().map(|c| self.kit.basis.positions(c)).collect();
        Ok(PlanOutput {
            trajectory,
            cand_idx: Some(i),
            candidates,
        })
    }
}

// ---- benchmark -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub variant: Variant,
    pub world_idx: usize,
    pub world: String,
    pub run: usize,
    pub outcome: Outcome,
    pub length: f64,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub variant: String,
    pub world: String,
    pub runs: usize,
    pub successes: usize,
    pub rate: f64,
    /// Means over successful runs only.
    pub mean_len_m: Option<f64>,
    pub mean_time_s: Option<f64>,
    pub mean_vel_mps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HlpPair {
    pub scene_id: u64,
    pub hlp_scorer: f64,
    pub hlp_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let idx = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1;
        Some(Self {
            n: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p95_ms: s[idx],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
    pub episodes: Vec<EpisodeSummary>,
    pub hlp: Vec<HlpPair>,
    pub fingerprint: String,
    pub seed: u64,
}

/// Aggregates episodes into one row per (variant, world tag), in first-seen
/// order.
pub fn aggregate(episodes: &[EpisodeSummary]) -> Vec<ReportRow> {
    let mut keys: Vec<(Variant, String)> = Vec::new();
    for e in episodes {
        let k = (e.variant, e.world.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(v, w)| {
            let eps: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.variant == v && e.world == w).collect();
            let ok: Vec<&&EpisodeSummary> = eps.iter().filter(|e| e.outcome == Outcome::Success).collect();
            let mean = |f: &dyn Fn(&EpisodeSummary) -> Option<f64>| -> Option<f64> {
                let vals: Vec<f64> = ok.iter().filter_map(|e| f(e)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            ReportRow {
                variant: v.as_str().to_string(),
                world: w,
                runs: eps.len(),
                successes: ok.len(),
                rate: ok.len() as f64 / eps.len() as f64,
                mean_len_m: mean(&|e| Some(e.length)),
                mean_time_s: mean(&|e| Some(e.time)),
                mean_vel_mps: mean(&|e| (e.time > 0.0).then(|| e.length / e.time)),
            }
        })
        .collect()
}

/// A planner variant as the harness sees it: a factory of fresh planners.
pub trait PlannerFactory: Sync {
    fn name(&self) -> String;
    fn make(&self, seed: u64) -> Result<Box<dyn LatencyPlanner + '_>>;
}

/// Planner that can report its per-plan wall times.
pub trait LatencyPlanner: Planner {
    fn latencies(&self) -> &[f64];
}

impl LatencyPlanner for LearnedPlanner<'_> {
    fn latencies(&self) -> &[f64] {
        &self.latencies_ms
    }
}

pub struct VariantFactory<'a> {
    pub kit: &'a PlannerKit<'a>,
    pub variant: Variant,
}

impl PlannerFactory for VariantFactory<'_> {
    fn name(&self) -> String {
        self.variant.as_str().into()
    }
    fn make(&self, seed: u64) -> Result<Box<dyn LatencyPlanner + '_>> {
        Ok(Box::new(LearnedPlanner::new(self.kit, self.variant, seed)?))
    }
}

/// Checkpoint-free planners: [`Variant::Idle`] or [`Variant::Straight`].
pub struct BaselinePlanner {
    variant: Variant,
    basis: BasisMatrix,
    speed: f64,
}

impl Planner for BaselinePlanner {
    fn plan(&mut self, scenario: &Scenario, _step: usize) -> Result<PlanOutput> {
        let h = scenario.goal_heading;
        let reach = match self.variant {
            Variant::Straight => self.speed * self.basis.times().last().copied().unwrap_or(0.0),
            _ => 0.0,
        };
        let c = TrajectoryCoeffs::line(self.basis.order(), [0.0, 0.0], [h[0] as f64 * reach, h[1] as f64 * reach]);
        Ok(PlanOutput {
            trajectory: eval_trajectory(&c, &self.basis, false)?,
            cand_idx: None,
            candidates: Vec::new(),
        })
    }
}

impl LatencyPlanner for BaselinePlanner {
    fn latencies(&self) -> &[f64] {
        &[]
    }
}

pub struct BaselineFactory {
    pub variant: Variant,
    pub basis: BasisMatrix,
    /// Straight-line speed, m/s.
    pub speed: f64,
}

impl PlannerFactory for BaselineFactory {
    fn name(&self) -> String {
        self.variant.as_str().into()
    }
    fn make(&self, _seed: u64) -> Result<Box<dyn LatencyPlanner + '_>> {
        if !self.variant.is_baseline() {
            return Err(Error::Config(format!("`{}` needs checkpoints", self.variant.as_str())));
        }
        Ok(Box::new(BaselinePlanner {
            variant: self.variant,
            basis: self.basis.clone(),
            speed: self.speed,
        }))
    }
}

/// A named world suite: `sparse`, `dense`, `corridor`, or `mixed` (cycling
/// through all three).
pub fn suite_worlds(suite: &str, n: usize, seed: u64) -> Result<Vec<WorldSpec>> {
    let kinds: Vec<Difficulty> = match suite {
        "mixed" => vec![Difficulty::Sparse, Difficulty::Dense, Difficulty::Corridor],
        other => vec![other.parse()?],
    };
    (0..n)
        .map(|i| {
            let world_seed = seed.wrapping_mul(1_000_033).wrapping_add(0x5eed_0000_0000 + i as u64);
            sample_world(world_seed, kinds[i % kinds.len()])
        })
        .collect()
}

/// Per-episode planner seed.
pub fn episode_seed(seed: u64, world: usize, run: usize, variant: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [world as u64, run as u64, variant as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

/// Output of [`run_benchmark`]: the report plus wall-clock latencies per
/// variant (kept out of the report so it stays reproducible).
pub struct BenchOutput {
    pub report: BenchmarkReport,
    pub latencies: Vec<(String, Option<LatencyStats>)>,
}

/// Runs every (world, run, variant) episode in parallel and aggregates.
pub fn run_benchmark(
    worlds: &[WorldSpec],
    variants: &[(Variant, &dyn PlannerFactory)],
    runs: usize,
    seed: u64,
    sim: &SimConfig,
    fingerprint: &str,
) -> Result<BenchOutput> {
    let jobs: Vec<(usize, usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..worlds.len()).flat_map(move |w| (0..runs).map(move |r| (v, w, r))))
        .collect();
    let results: Vec<Result<(EpisodeSummary, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(v, w, r)| {
            let (variant, factory) = variants[v];
            let mut planner = factory.make(episode_seed(seed, w, r, v))?;
            let res = run_episode(&worlds[w], planner.as_mut(), sim);
            let m = episode_metrics(&res);
            Ok((
                EpisodeSummary {
                    variant,
                    world_idx: w,
                    world: worlds[w].difficulty.as_str().to_string(),
                    run: r,
                    outcome: res.outcome,
                    length: m.length,
                    time: m.time,
                },
                planner.latencies().to_vec(),
            ))
        })
        .collect();
    let mut episodes = Vec::with_capacity(results.len());
    let mut lat: Vec<Vec<f64>> = vec![Vec::new(); variants.len()];
    for (res, &(v, _, _)) in results.into_iter().zip(&jobs) {
        let (e, l) = res?;
        episodes.push(e);
        lat[v].extend(l);
    }
    let rows = aggregate(&episodes);
    Ok(BenchOutput {
        report: BenchmarkReport {
            rows,
            episodes,
            hlp: Vec::new(),
            fingerprint: fingerprint.to_string(),
            seed,
        },
        latencies: variants
            .iter()
            .zip(&lat)
            .map(|((_, f), l)| (f.name(), LatencyStats::from_samples(l)))
            .collect(),
    })
}

/// Open-loop HLP comparison: each record's scenario gets one candidate set;
/// the scorer and the cost baseline pick from the same set.
pub fn hlp_suite(records: &[DatasetRecord], kit: &PlannerKit<'_>, seed: u64) -> Result<Vec<HlpPair>> {
    let scorer = kit
        .scorer
        .ok_or_else(|| Error::Config("the HLP comparison needs a scorer".into()))?;
    let cost = kit.gen.refine.cost_config();
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let expert = rec
                .expert_waypoints
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("record {i} has no expert waypoints")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, i, 0, 99));
            let set = generate_candidates(kit.flow, &rec.scenario, &kit.gen, kit.basis, &mut rng)?;
            let (s, c) = pick_both(&set, &rec.scenario, scorer, kit, &cost)?;
            Ok(HlpPair {
                scene_id: rec.scene_id,
                hlp_scorer: hlp(&set.trajectories[s], expert)?,
                hlp_cost: hlp(&set.trajectories[c], expert)?,
            })
        })
        .collect()
}

fn pick_both(
    set: &CandidateSet,
    scenario: &Scenario,
    scorer: &Scorer,
    kit: &PlannerKit<'_>,
    cost: &CostConfig,
) -> Result<(usize, usize)> {
    let s = if set.len() >= 2 {
        select_best(&scorer.score_candidates(set, scenario)?)?
    } else {
        0
    };
    let c = cost_select(&set.coeffs, scenario, &kit.weights, cost, kit.basis)?;
    Ok((s, c))
}

// ---- output --------------------------------------------------------------------

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("variant,world,runs,successes,rate,mean_len_m,mean_time_s,mean_vel_mps\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{},{}",
            r.variant,
            r.world,
            r.runs,
            r.successes,
            r.rate,
            opt(r.mean_len_m),
            opt(r.mean_time_s),
            opt(r.mean_vel_mps)
        );
    }
    s
}

pub fn episodes_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("variant,world_idx,world,run,outcome,length_m,time_s\n");
    for e in &report.episodes {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            e.variant.as_str(),
            e.world_idx,
            e.world,
            e.run,
            e.outcome.as_str(),
            e.length,
            e.time
        );
    }
    s
}

pub fn hlp_csv(pairs: &[HlpPair]) -> String {
    let mut s = String::from("scene_id,hlp_scorer,hlp_cost\n");
    for p in pairs {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.scene_id, p.hlp_scorer, p.hlp_cost);
    }
    s
}

/// Grouped bar chart of paired HLP values, one group per scene.
pub fn hlp_svg(pairs: &[HlpPair]) -> String {
    let (w, h, pad) = (40.0 + 28.0 * pairs.len().max(1) as f64, 260.0, 30.0);
    let top = pairs
        .iter()
        .flat_map(|p| [p.hlp_scorer, p.hlp_cost])
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let scale = (h - 2.0 * pad) / top;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"18\" font-size=\"12\" font-family=\"sans-serif\">HLP per scene (m): scorer (blue) vs cost (orange), max {top:.3}</text>\n"
    );
    for (i, p) in pairs.iter().enumerate() {
        let x = pad + 28.0 * i as f64;
        for (j, (v, color)) in [(p.hlp_scorer, "#3b6fb6"), (p.hlp_cost, "#e08a2c")].into_iter().enumerate() {
            let bh = v * scale;
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"11\" height=\"{:.1}\" fill=\"{color}\"/>",
                x + 12.0 * j as f64,
                h - pad - bh,
                bh
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"8\" font-family=\"sans-serif\">{}</text>",
            x,
            h - pad + 12.0,
            p.scene_id
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"black\"/>\n</svg>",
        h - pad,
        w - 10.0
    );
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// FNV-1a digest, used to fingerprint configurations in reports.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bernstein::DEFAULT_DT;
    use crate::geom::Pose2;
    use crate::scene::SceneConfig;

    #[test]
    fn hlp_examples() {
        let a: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 0.5 * i as f64]).collect();
        assert_eq!(hlp(&a, &a).unwrap(), 0.0);
        let b: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 0.3, p[1]]).collect();
        assert!((hlp(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(hlp(&a, &b).unwrap(), hlp(&b, &a).unwrap());
        let c: Vec<[f64; 2]> = a.iter().map(|p| [p[0] - 1.0, p[1] + 2.0]).collect();
        let d: Vec<[f64; 2]> = b.iter().map(|p| [p[0] - 1.0, p[1] + 2.0]).collect();
        assert!((hlp(&c, &d).unwrap() - 0.3).abs() < 1e-12);
        assert!(hlp(&a, &b[..5]).is_err());
    }

    fn straight(order: usize, speed: f64) -> TrajectoryCoeffs {
        TrajectoryCoeffs::line(order, [0.0, 0.0], [speed * 4.9, 0.0])
    }

    #[test]
    fn cost_select_examples() {
        let b = BasisMatrix::canonical();
        let cost = CostConfig::default();
        let blocked = Scenario::from_parts(&[[2.0, 0.0], [3.0, 0.0]], &[], [1.0, 0.0], 8, 4).unwrap();
        let free = TrajectoryCoeffs::line(10, [0.0, 0.0], [3.0, 2.5]);
        let cands = vec![straight(10, 1.0), free.clone(), straight(10, 0.9)];
        let w = CostWeights {
            collision: 1e3,
            ..Default::default()
        };
        assert_eq!(cost_select(&cands, &blocked, &w, &cost, &b).unwrap(), 1);
        let same = vec![free.clone(), free.clone(), free];
        assert_eq!(cost_select(&same, &blocked, &w, &cost, &b).unwrap(), 0);
        // smoothness only: a straight constant-speed path beats a wiggle
        let mut wiggle = straight(10, 1.0);
        for (i, v) in wiggle.cy.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.0 } else { 0.5 };
        }
        let acc_only = CostWeights {
            collision: 0.0,
            accel: 1.0,
            progress: 0.0,
        };
        let empty = Scenario::empty([1.0, 0.0], &SceneConfig::default());
        assert_eq!(cost_select(&[wiggle, straight(10, 1.0)], &empty, &acc_only, &cost, &b).unwrap(), 1);
        assert!(cost_select(&[], &empty, &acc_only, &cost, &b).is_err());
    }

    #[test]
    fn metrics_identity() {
        let r = EpisodeResult {
            outcome: Outcome::Success,
            path_length: 10.0,
            duration: 10.0,
            mean_speed: 1.0,
            step_log: vec![],
            diagnostic: None,
        };
        let m = episode_metrics(&r);
        assert_eq!((m.length, m.time, m.velocity), (10.0, 10.0, Some(1.0)));
        let z = EpisodeResult {
            duration: 0.0,
            path_length: 0.0,
            ..r
        };
        assert_eq!(episode_metrics(&z).velocity, None);
    }

    struct Fixed<F: Fn() -> Vec<[f64; 2]> + Sync>(F);

    struct FixedPlanner(Vec<[f64; 2]>);

    impl Planner for FixedPlanner {
        fn plan(&mut self, _: &Scenario, _: usize) -> Result<PlanOutput> {
            let times = (0..self.0.len()).map(|i| i as f64 * DEFAULT_DT).collect();
            Ok(PlanOutput {
                trajectory: crate::bernstein::Trajectory::from_waypoints(times, self.0.clone())?,
                cand_idx: None,
                candidates: Vec::new(),
            })
        }
    }

    impl LatencyPlanner for FixedPlanner {
        fn latencies(&self) -> &[f64] {
            &[]
        }
    }

    impl<F: Fn() -> Vec<[f64; 2]> + Sync> PlannerFactory for Fixed<F> {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn make(&self, _: u64) -> Result<Box<dyn LatencyPlanner + '_>> {
            Ok(Box::new(FixedPlanner((self.0)())))
        }
    }

    fn empty_world(i: usize) -> WorldSpec {
        WorldSpec::empty(Pose2::new(0.0, i as f64, 0.0), [10.0, i as f64])
    }

    #[test]
    fn straight_planner_succeeds_and_stationary_times_out() {
        let sim = SimConfig {
            timeout: 20.0,
            ..Default::default()
        };
        let worlds: Vec<WorldSpec> = (0..2).map(empty_world).collect();
        let go = Fixed(|| (0..50).map(|i| [i as f64 * 0.1, 0.0]).collect());
        let stay = Fixed(|| vec![[0.0, 0.0]; 50]);
        let out = run_benchmark(
            &worlds,
            &[(Variant::Guided, &go), (Variant::Vanilla, &stay)],
            2,
            1,
            &sim,
            "x",
        )
        .unwrap();
        let rows = &out.report.rows;
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].rate, 1.0);
        assert!((rows[0].mean_len_m.unwrap() - 9.5).abs() < 0.5);
        assert_eq!(rows[1].rate, 0.0);
        assert_eq!(rows[1].mean_len_m, None);
        assert!(out.report.episodes.iter().filter(|e| e.variant == Variant::Vanilla).all(|e| e.length < 1e-9));
        // aggregation is reproducible from the raw episodes
        assert_eq!(aggregate(&out.report.episodes), *rows);
        let again = run_benchmark(&worlds, &[(Variant::Guided, &go), (Variant::Vanilla, &stay)], 2, 1, &sim, "x").unwrap();
        assert_eq!(report_csv(&again.report), report_csv(&out.report));
        assert!(report_csv(&out.report).contains("vanilla,sparse,4,0,0.000000,,,"));
    }

    #[test]
    fn baselines_behave() {
        let sim = SimConfig {
            timeout: 15.0,
            ..Default::default()
        };
        let worlds: Vec<WorldSpec> = (0..2).map(empty_world).collect();
        let mk = |variant| BaselineFactory {
            variant,
            basis: BasisMatrix::canonical(),
            speed: 1.0,
        };
        let (idle, straight) = (mk(Variant::Idle), mk(Variant::Straight));
        let out = run_benchmark(&worlds, &[(Variant::Idle, &idle), (Variant::Straight, &straight)], 1, 0, &sim, "b").unwrap();
        assert!(out.report.episodes[..2].iter().all(|e| e.outcome == Outcome::Timeout));
        assert_eq!(out.report.rows[0].rate, 0.0);
        assert_eq!(out.report.rows[1].rate, 1.0);
        assert!(mk(Variant::Guided).make(0).is_err());
        assert_eq!("idle".parse::<Variant>().unwrap(), Variant::Idle);
    }

    #[test]
    fn latency_percentile() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let l = LatencyStats::from_samples(&s).unwrap();
        assert_eq!(l.p95_ms, 95.0);
        assert!((l.mean_ms - 50.5).abs() < 1e-12);
        assert!(LatencyStats::from_samples(&[]).is_none());
    }

    #[test]
    fn csv_and_svg_shapes() {
        let pairs = [
            HlpPair {
                scene_id: 3,
                hlp_scorer: 0.2,
                hlp_cost: 0.5,
            },
            HlpPair {
                scene_id: 4,
                hlp_scorer: 0.1,
                hlp_cost: 0.05,
            },
        ];
        let c = hlp_csv(&pairs);
        assert_eq!(c.lines().count(), 3);
        assert!(c.starts_with("scene_id,hlp_scorer,hlp_cost\n3,0.200000,0.500000"));
        let svg = hlp_svg(&pairs);
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!("sparse".parse::<Difficulty>().is_ok());
        assert_eq!("refine_scorer".parse::<Variant>().unwrap(), Variant::RefineScorer);
        assert_ne!(fingerprint("a"), fingerprint("b"));
    }
}
