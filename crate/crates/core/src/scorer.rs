//! Learned candidate scorer.
//!
//! Each candidate's control points become one token; the scene contributes
//! static, dynamic and goal tokens. A transformer without positional
//! information mixes them and a head maps every candidate token to a logit,
//! so scores permute exactly with the candidates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::{Conv1d, Mlp, TransformerEncoder};
use crate::autodiff::{AdamConfig, Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::bernstein::{BasisMatrix, TrajectoryCoeffs};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::{step_rng, ContextEncoder, FlowModel, FlowNetConfig};
use crate::guidance::{refine_all, RefineConfig};
use crate::scene::{DatasetRecord, Scenario};

const POSITION_SCALE: f32 = 0.25;

/// `K` candidates with their refinement costs and cached waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub coeffs: Vec<TrajectoryCoeffs>,
    pub refine_costs: Vec<f64>,
    pub trajectories: Vec<Vec<[f64; 2]>>,
}

impl CandidateSet {
    pub fn new(coeffs: Vec<TrajectoryCoeffs>, refine_costs: Vec<f64>, basis: &BasisMatrix) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::EmptyInput("candidate set is empty".into()));
        }
        if refine_costs.len() != coeffs.len() {
            return Err(Error::invalid(format!(
                "{} candidates but {} refinement costs",
                coeffs.len(),
                refine_costs.len()
            )));
        }
        if refine_costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::invalid("refinement costs must be non-negative"));
        }
        if let Some(c) = coeffs.iter().find(|c| c.order() != basis.order()) {
            return Err(Error::invalid(format!(
                "candidate of order {} against a basis of order {}",
                c.order(),
                basis.order()
            )));
        }
        let trajectories = coeffs.iter().map(|c| basis.positions(c)).collect();
        Ok(Self {
            coeffs,
            refine_costs,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Candidate `perm[i]` moves to position `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coeffs: perm.iter().map(|&i| self.coeffs[i].clone()).collect(),
            refine_costs: perm.iter().map(|&i| self.refine_costs[i]).collect(),
            trajectories: perm.iter().map(|&i| self.trajectories[i].clone()).collect(),
        }
    }
}

/// Index of the candidate with the smallest summed waypoint distance to the
/// expert; the lowest index wins ties.
pub fn label_closest(cands: &CandidateSet, expert: &[[f64; 2]]) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (k, traj) in cands.trajectories.iter().enumerate() {
        if traj.len() != expert.len() {
            return Err(Error::invalid(format!(
                "expert has {} waypoints, candidates have {}",
                expert.len(),
                traj.len()
            )));
        }
        let d: f64 = traj
            .iter()
            .zip(expert)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Softmax cross-entropy against class `j` plus `λ_s` times the mean
/// refinement cost.
pub fn scorer_loss(scores: &[f64], j: usize, refine_costs: &[f64], reg_weight: f64) -> Result<f64> {
    if j >= scores.len() {
        return Err(Error::invalid(format!("label {j} out of range for {} scores", scores.len())));
    }
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + scores.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
    Ok(lse - scores[j] + reg_weight * mean_cost(refine_costs))
}

fn mean_cost(costs: &[f64]) -> f64 {
    if costs.is_empty() {
        0.0
    } else {
        costs.iter().sum::<f64>() / costs.len() as f64
    }
}

/// Argmax with lowest-index tie-break.
pub fn select_best(scores: &[f32]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to select from".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub d_model: usize,
    pub trans_heads: usize,
    pub trans_layers: usize,
    pub dyn_heads: usize,
    pub dyn_layers: usize,
    pub point_hidden: usize,
    pub traj_hidden: usize,
    pub max_obstacles: usize,
    /// `λ_s`, weight of the mean refinement cost in the reported loss.
    pub reg_weight: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            trans_heads: 8,
            trans_layers: 4,
            dyn_heads: 4,
            dyn_layers: 2,
            point_hidden: 32,
            traj_hidden: 32,
            max_obstacles: 10,
            reg_weight: 0.01,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, h) in [("scorer", self.trans_heads), ("dynamic", self.dyn_heads)] {
            if h == 0 || self.d_model % h != 0 {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by {what} heads {h}",
                    self.d_model
                )));
            }
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::Config("reg_weight must be non-negative".into()));
        }
        Ok(())
    }

    fn encoder_config(&self) -> FlowNetConfig {
        FlowNetConfig {
            d_model: self.d_model,
            dyn_heads: self.dyn_heads,
            dyn_layers: self.dyn_layers,
            point_hidden: self.point_hidden,
            max_obstacles: self.max_obstacles,
            ..Default::default()
        }
    }
}

pub const SCORER_KIND: &str = "scorer";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScorerMeta {
    #[serde(rename = "K")]
    k: usize,
    d_model: usize,
    lambda_s: f64,
    config: ScorerConfig,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct Scorer {
    pub cfg: ScorerConfig,
    pub store: ParamStore,
    pub seed: u64,
    /// Candidate count the scorer was trained for (informational).
    pub k: usize,
    encoder: ContextEncoder,
    traj_conv1: Conv1d,
    traj_conv2: Conv1d,
    traj_mlp: Mlp,
    e_traj: String,
    e_ctx: String,
    mixer: TransformerEncoder,
    head: Mlp,
}

impl Scorer {
    pub fn new(cfg: ScorerConfig, k: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(&mut store, "scorer_enc", &cfg.encoder_config(), false, &mut rng)?;
        let traj_conv1 = Conv1d::new(&mut store, "traj.conv1", 2, cfg.traj_hidden, 3, 1, 1, &mut rng)?;
        let traj_conv2 = Conv1d::new(&mut store, "traj.conv2", cfg.traj_hidden, d, 3, 1, 1, &mut rng)?;
        let traj_mlp = Mlp::new(&mut store, "traj.mlp", &[d, d, d], &mut rng)?;
        store.init_uniform("e_traj", &[d], d, &mut rng)?;
        store.init_uniform("e_ctx", &[3, d], d, &mut rng)?;
        let mixer = TransformerEncoder::new(&mut store, "mixer", d, cfg.trans_heads, cfg.trans_layers, &mut rng)?;
        let head = Mlp::new(&mut store, "head", &[d, d, 1], &mut rng)?;
        Ok(Self {
            cfg,
            store,
            seed,
            k,
            encoder,
            traj_conv1,
            traj_conv2,
            traj_mlp,
            e_traj: "e_traj".into(),
            e_ctx: "e_ctx".into(),
            mixer,
            head,
        })
    }

    /// Logits `[1 × K]`.
    fn logits(&self, g: &mut Graph<'_>, cands: &CandidateSet, scenario: &Scenario) -> Result<Var> {
        let k = cands.len();
        if k < 2 {
            return Err(Error::invalid(format!("scoring needs at least 2 candidates, got {k}")));
        }
        let l = cands.coeffs[0].cx.len();
        // [2 × K·L], one segment per candidate
        let mut data = Vec::with_capacity(2 * k * l);
        for axis in [0, 1] {
            for c in &cands.coeffs {
                let row = if axis == 0 { &c.cx } else { &c.cy };
                if row.len() != l {
                    return Err(Error::invalid("candidates differ in order"));
                }
                data.extend(row.iter().map(|v| *v as f32 * POSITION_SCALE));
            }
        }
        let x = g.input(Tensor::new(&[2, k * l], data)?);
        let h = self.traj_conv1.forward_seg(g, x, k)?;
        let h = g.relu(h);
        let h = self.traj_conv2.forward_seg(g, h, k)?;
        let h = g.relu(h);
        // per-segment mean as a product with a fixed pooling matrix
        let pool = Tensor::from_fn(&[k * l, k], |i| if (i / k) / l == i % k { 1.0 / l as f32 } else { 0.0 });
        let pool = g.input(pool);
        let pooled = g.matmul(h, pool)?;
        let pooled = g.transpose(pooled);
        let traj = self.traj_mlp.forward(g, pooled)?;
        let e_traj = g.param(&self.e_traj)?;
        let traj = g.add_row_bias(traj, e_traj)?;
        let ctx = self.encoder.branches(g, scenario)?;
        let e_ctx = g.param(&self.e_ctx)?;
        let ctx = g.add(ctx, e_ctx)?;
        let seq = g.concat_rows(&[traj, ctx])?;
        let out = self.mixer.forward(g, seq, None)?;
        let toks = g.slice_rows(out, 0, k)?;
        let s = self.head.forward(g, toks)?;
        g.reshape(s, &[1, k])
    }

    /// Raw scores, one per candidate.
    pub fn score_candidates(&self, cands: &CandidateSet, scenario: &Scenario) -> Result<Vec<f32>> {
        let mut g = Graph::inference(&self.store);
        let s = self.logits(&mut g, cands, scenario)?;
        Ok(g.data(s).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ScorerMeta {
            k: self.k,
            d_model: self.cfg.d_model,
            lambda_s: self.cfg.reg_weight,
            config: self.cfg.clone(),
            seed: self.seed,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, SCORER_KIND, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h = checkpoint::read_header(path)?;
        let meta: ScorerMeta =
            serde_json::from_value(h.meta).map_err(|e| Error::Checkpoint(format!("bad scorer header: {e}")))?;
        let mut s = Self::new(meta.config, meta.k, meta.seed)?;
        checkpoint::load_into(path, SCORER_KIND, &mut s.store)?;
        Ok(s)
    }
}

/// Candidate generation settings shared by scorer training, evaluation and
/// the planners.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGen {
    pub k: usize,
    pub steps: usize,
    pub lambda: f64,
    pub refine: RefineConfig,
}

/// Samples `k` candidates from the frozen flow, refines each and packs the
/// results. Candidates that fail to sample are dropped.
pub fn generate_candidates(
    flow: &FlowModel,
    scenario: &Scenario,
    gen: &CandidateGen,
    basis: &BasisMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateSet> {
    let raw = flow.sample_candidates(scenario, gen.k, gen.steps, gen.lambda, &gen.refine.cost_config(), basis, rng)?;
    let refined = refine_all(&raw, scenario, basis, &gen.refine)?;
    let costs = refined.iter().map(|r| r.cost).collect();
    CandidateSet::new(refined.into_iter().map(|r| r.coeffs).collect(), costs, basis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTrainConfig {
    pub steps: u64,
    pub batch_records: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_records: 4,
            lr: 5e-4,
            seed: 0,
        }
    }
}

/// One logged scorer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerStep {
    pub step: u64,
    pub loss: f64,
    /// Mean cross-entropy part of `loss`.
    pub ce: f64,
    /// Fraction of batch items whose argmax matched the label.
    pub accuracy: f64,
    pub skipped: usize,
}

struct Item {
    ce: f64,
    reg: f64,
    hit: bool,
    grads: ParamGrads,
}

/// Trains from the scorer's current step up to `cfg.steps`. Candidates are
/// regenerated from the frozen flow for every batch item and labelled
/// against that record's expert waypoints.
pub fn train_scorer<F>(
    scorer: &mut Scorer,
    flow: &FlowModel,
    records: &[DatasetRecord],
    gen: &CandidateGen,
    basis: &BasisMatrix,
    cfg: &ScorerTrainConfig,
    mut on_step: F,
) -> Result<Vec<ScorerStep>>
where
    F: FnMut(&ScorerStep, &Scorer) -> Result<()>,
{
    if records.is_empty() {
        return Err(Error::EmptyInput("scorer training needs at least one record".into()));
    }
    if let Some(r) = records.iter().find(|r| r.expert_waypoints.is_none()) {
        return Err(Error::invalid(format!(
            "record (seed {}, scene {}) has no expert waypoints",
            r.seed, r.scene_id
        )));
    }
    let mut log = Vec::new();
    while scorer.store.step() < cfg.steps {
        let step = scorer.store.step();
        let mut pick = step_rng(cfg.seed, step, 0);
        let picks: Vec<(usize, u64)> = (0..cfg.batch_records)
            .map(|b| (pick.random_range(0..records.len()), b as u64))
            .collect();
        let model = &*scorer;
        let items: Vec<Result<Option<Item>>> = picks
            .par_iter()
            .map(|&(i, b)| {
                let rec = &records[i];
                let mut rng = step_rng(cfg.seed ^ 0x5c0e, step, 1 + b);
                let cands = match generate_candidates(flow, &rec.scenario, gen, basis, &mut rng) {
                    Ok(c) if c.len() >= 2 => c,
                    Ok(_) | Err(Error::Numerical(_)) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let expert = rec.expert_waypoints.as_deref().unwrap_or_default();
                let j = label_closest(&cands, expert)?;
                let mut g = Graph::new(&model.store);
                let logits = model.logits(&mut g, &cands, &rec.scenario)?;
                let hit = select_best(g.data(logits))? == j;
                let ce = g.cross_entropy(logits, j)?;
                let grads = g.backward(ce)?;
                Ok(Some(Item {
                    ce: g.data(ce)[0] as f64,
                    reg: mean_cost(&cands.refine_costs),
                    hit,
                    grads: g.param_grads(&grads),
                }))
            })
            .collect();
        let mut acc = ParamGrads::new(scorer.store.len());
        let (mut ce, mut reg, mut hits, mut n, mut skipped) = (0.0, 0.0, 0, 0, 0);
        for it in items {
            match it? {
                Some(it) => {
                    ce += it.ce;
                    reg += it.reg;
                    hits += it.hit as usize;
                    n += 1;
                    acc.merge(&it.grads);
                }
                None => skipped += 1,
            }
        }
        if n == 0 {
            // nothing usable this step; advance so training cannot stall
            scorer.store.set_step(step + 1);
            continue;
        }
        let nf = n as f64;
        let entry = ScorerStep {
            step,
            loss: ce / nf + scorer.cfg.reg_weight * reg / nf,
            ce: ce / nf,
            accuracy: hits as f64 / nf,
            skipped,
        };
        if !entry.loss.is_finite() {
            return Err(Error::Training(format!("non-finite scorer loss at step {step}")));
        }
        scorer.store.zero_grad();
        scorer.store.accumulate(&acc);
        scorer.store.scale_grads(1.0 / n as f32);
        scorer.store.adam_step(AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        })?;
        on_step(&entry, scorer)?;
        log.push(entry);
    }
    Ok(log)
}

/// Top-1 agreement with the closest-to-expert label on held-out records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerEval {
    pub n: usize,
    pub accuracy: f64,
    /// Expected accuracy of a uniform random pick, `mean(1/K)`.
    pub chance: f64,
}

pub fn evaluate_scorer(
    scorer: &Scorer,
    flow: &FlowModel,
    records: &[DatasetRecord],
    gen: &CandidateGen,
    basis: &BasisMatrix,
    seed: u64,
) -> Result<ScorerEval> {
    let rows: Vec<Result<Option<(bool, f64)>>> = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let Some(expert) = rec.expert_waypoints.as_deref() else {
                return Err(Error::invalid(format!("held-out record {i} has no expert waypoints")));
            };
            let mut rng = step_rng(seed, i as u64, 7);
            let cands = match generate_candidates(flow, &rec.scenario, gen, basis, &mut rng) {
                Ok(c) if c.len() >= 2 => c,
                Ok(_) | Err(Error::Numerical(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let j = label_closest(&cands, expert)?;
            let pick = select_best(&scorer.score_candidates(&cands, &rec.scenario)?)?;
            Ok(Some((pick == j, 1.0 / cands.len() as f64)))
        })
        .collect();
    let (mut hits, mut chance, mut n) = (0usize, 0.0, 0usize);
    for r in rows {
        if let Some((hit, c)) = r? {
            hits += hit as usize;
            chance += c;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no held-out record produced a candidate set".into()));
    }
    Ok(ScorerEval {
        n,
        accuracy: hits as f64 / n as f64,
        chance: chance / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scorer {
        let cfg = ScorerConfig {
            d_model: 16,
            trans_layers: 2,
            dyn_layers: 1,
            point_hidden: 8,
            traj_hidden: 8,
            ..Default::default()
        };
        Scorer::new(cfg, 5, 1).unwrap()
    }

    fn cands(k: usize, basis: &BasisMatrix) -> CandidateSet {
        let coeffs: Vec<_> = (0..k)
            .map(|i| {
                let flat: Vec<f64> = (0..22)
                    .map(|j| if j % 11 == 0 { 0.0 } else { ((i * 13 + j) as f64 * 0.37).sin() * 2.0 + j as f64 * 0.1 })
                    .collect();
                TrajectoryCoeffs::from_flat(&flat).unwrap()
            })
            .collect();
        CandidateSet::new(coeffs, (0..k).map(|i| i as f64 * 0.1).collect(), basis).unwrap()
    }

    fn scenario() -> Scenario {
        Scenario::from_parts(&[[2.0, 1.0], [2.5, -0.5]], &[[1.5, 1.0, -0.2, 0.1]], [1.0, 0.0], 8, 4).unwrap()
    }

    #[test]
    fn scores_permute_exactly() {
        let b = BasisMatrix::canonical();
        let s = small();
        let c = cands(6, &b);
        let base = s.score_candidates(&c, &scenario()).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let p = s.score_candidates(&c.permuted(&perm), &scenario()).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(p[i].to_bits(), base[src].to_bits());
        }
        let best = select_best(&base).unwrap();
        let pb = select_best(&p).unwrap();
        assert_eq!(perm[pb], best);
    }

    #[test]
    fn duplicates_score_equally() {
        let b = BasisMatrix::canonical();
        let c = cands(3, &b);
        let d = c.permuted(&[0, 1, 0, 2]);
        let s = small().score_candidates(&d, &scenario()).unwrap();
        assert_eq!(s[0].to_bits(), s[2].to_bits());
    }

    #[test]
    fn needs_two_candidates() {
        let b = BasisMatrix::canonical();
        assert!(small().score_candidates(&cands(1, &b), &scenario()).is_err());
    }

    #[test]
    fn scores_are_finite_on_random_inputs() {
        let b = BasisMatrix::canonical();
        let s = small();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<_> = (0..4)
                .map(|_| {
                    let flat: Vec<f64> = (0..22).map(|_| rng.random_range(-6.0..6.0)).collect();
                    TrajectoryCoeffs::from_flat(&flat).unwrap()
                })
                .collect();
            let c = CandidateSet::new(coeffs, vec![0.0; 4], &b).unwrap();
            let pts: Vec<[f32; 2]> = (0..rng.random_range(0..8)).map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)]).collect();
            let sc = Scenario::from_parts(&pts, &[], [0.0, 1.0], 8, 4).unwrap();
            assert!(s.score_candidates(&c, &sc).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn label_examples() {
        let b = BasisMatrix::canonical();
        let base = cands(1, &b);
        let expert = base.trajectories[0].clone();
        let shift = |d: f64| {
            let mut c = base.coeffs[0].clone();
            c.cy.iter_mut().for_each(|v| *v += d);
            c
        };
        let set = CandidateSet::new(vec![shift(0.3), shift(0.1), shift(0.2)], vec![0.0; 3], &b).unwrap();
        assert_eq!(label_closest(&set, &expert).unwrap(), 1);
        let set = CandidateSet::new(vec![shift(0.5), shift(0.0), shift(0.2)], vec![0.0; 3], &b).unwrap();
        assert_eq!(label_closest(&set, &expert).unwrap(), 1);
        let tie = CandidateSet::new(vec![shift(0.4), shift(0.2), shift(-0.2)], vec![0.0; 3], &b).unwrap();
        assert_eq!(label_closest(&tie, &expert).unwrap(), 1);
        assert!(label_closest(&set, &expert[..10]).is_err());
    }

    #[test]
    fn label_is_translation_invariant() {
        let b = BasisMatrix::canonical();
        let c = cands(5, &b);
        let expert: Vec<[f64; 2]> = c.trajectories[3].iter().map(|p| [p[0] + 0.2, p[1] - 0.1]).collect();
        let j = label_closest(&c, &expert).unwrap();
        let mut moved = c.clone();
        for t in &mut moved.trajectories {
            t.iter_mut().for_each(|p| {
                p[0] += 3.0;
                p[1] -= 7.0;
            });
        }
        let e2: Vec<[f64; 2]> = expert.iter().map(|p| [p[0] + 3.0, p[1] - 7.0]).collect();
        assert_eq!(label_closest(&moved, &e2).unwrap(), j);
    }

    #[test]
    fn loss_examples() {
        let ln5 = scorer_loss(&[0.0; 5], 2, &[0.0; 5], 0.3).unwrap();
        assert!((ln5 - 5f64.ln()).abs() < 1e-12);
        let sharp = scorer_loss(&[0.0, 200.0, 0.0], 1, &[0.0; 3], 1.0).unwrap();
        assert!(sharp < 1e-12);
        let a = scorer_loss(&[0.3, -1.0, 2.0], 0, &[1.0, 2.0, 3.0], 0.0).unwrap();
        let b = scorer_loss(&[5.3, 4.0, 7.0], 0, &[1.0, 2.0, 3.0], 0.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        let c = scorer_loss(&[0.3, -1.0, 2.0], 0, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert!((c - a - 1.0).abs() < 1e-12);
        assert!(scorer_loss(&[0.0; 2], 2, &[], 0.0).is_err());
    }

    #[test]
    fn graph_ce_matches_reference() {
        let b = BasisMatrix::canonical();
        let s = small();
        let c = cands(5, &b);
        let scores: Vec<f64> = s.score_candidates(&c, &scenario()).unwrap().iter().map(|v| *v as f64).collect();
        let mut g = Graph::inference(&s.store);
        let l = s.logits(&mut g, &c, &scenario()).unwrap();
        let ce = g.cross_entropy(l, 3).unwrap();
        let want = scorer_loss(&scores, 3, &[], 0.0).unwrap();
        assert!((g.data(ce)[0] as f64 - want).abs() < 1e-5);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_best(&[0.1, 3.0, -1.0]).unwrap(), 1);
        assert_eq!(select_best(&[2.0, 2.0, 2.0]).unwrap(), 0);
        let x = [0.1f32, 3.0, -1.0, 2.9];
        let y: Vec<f32> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        assert_eq!(select_best(&y).unwrap(), select_best(&x).unwrap());
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        let s = small();
        s.save(&p).unwrap();
        let h = checkpoint::read_header(&p).unwrap();
        assert_eq!(h.meta["K"], 5);
        assert_eq!(h.meta["d_model"], 16);
        let l = Scorer::load(&p).unwrap();
        let b = BasisMatrix::canonical();
        let c = cands(4, &b);
        assert_eq!(s.score_candidates(&c, &scenario()).unwrap(), l.score_candidates(&c, &scenario()).unwrap());
    }
}
