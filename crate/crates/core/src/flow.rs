//! Conditional flow matching over Bernstein coefficient vectors.
//!
//! A context encoder turns a [`Scenario`] into three fused tokens (static,
//! dynamic, goal). A small 1D U-Net, conditioned on those tokens and on the
//! flow time, predicts the velocity field in standardized coefficient space.
//! Training regresses onto the straight-line displacement `ξ₁ − ξ₀`;
//! sampling integrates the field with forward Euler, optionally pushed down
//! the collision-cost gradient.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::{Conv1d, Linear, Mlp, TransformerEncoder};
use crate::autodiff::{sinusoidal_embed, AdamConfig, Graph, ParamGrads, ParamStore, Tensor, Var};
use crate::bernstein::{BasisMatrix, TrajectoryCoeffs};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::guidance::{collision_cost_and_grad, CostConfig, Obstacles};
use crate::scene::{DatasetRecord, Scenario, SceneConfig};

/// Positions are fed to the encoders in units of this many meters.
const POSITION_SCALE: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowNetConfig {
    pub d_model: usize,
    pub unet_channels: Vec<usize>,
    pub fusion_heads: usize,
    pub fusion_layers: usize,
    pub dyn_heads: usize,
    pub dyn_layers: usize,
    /// Width of the per-point layers before pooling.
    pub point_hidden: usize,
    pub time_dim: usize,
    /// Trajectory order; the field acts on `2·(order + 1)` numbers.
    pub order: usize,
    /// Capacity of the dynamic-obstacle positional embedding.
    pub max_obstacles: usize,
    pub euler_steps: usize,
    pub guidance_scale: f64,
    pub num_candidates: usize,
    /// Lower bound on per-dimension standard deviations.
    pub std_floor: f64,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            unet_channels: vec![32, 64],
            fusion_heads: 8,
            fusion_layers: 3,
            dyn_heads: 4,
            dyn_layers: 2,
            point_hidden: 32,
            time_dim: 32,
            order: 10,
            max_obstacles: 10,
            euler_steps: 5,
            guidance_scale: 20.0,
            num_candidates: 10,
            std_floor: 0.05,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, h) in [("fusion", self.fusion_heads), ("dynamic", self.dyn_heads)] {
            if h == 0 || self.d_model % h != 0 {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by {what} heads {h}",
                    self.d_model
                )));
            }
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return Err(Error::Config("unet_channels must be a non-empty list of positive widths".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim must be positive and even, got {}", self.time_dim)));
        }
        if self.euler_steps == 0 {
            return Err(Error::Config("euler_steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config("guidance_scale must be non-negative".into()));
        }
        if self.num_candidates == 0 {
            return Err(Error::Config("num_candidates must be at least 1".into()));
        }
        if self.order < 2 {
            return Err(Error::Config("order must be at least 2".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 * (self.order + 1)
    }
}

// ---- context encoder ------------------------------------------------------

/// Point-cloud, dynamic-obstacle and goal branches plus a fusion
/// transformer. The scorer builds its own instance under a different prefix.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    d_model: usize,
    max_obstacles: usize,
    point: Mlp,
    point_head: Mlp,
    point_empty: String,
    dyn_in: Mlp,
    dyn_pos: String,
    dyn_tf: TransformerEncoder,
    dyn_head: Mlp,
    dyn_empty: String,
    goal: Mlp,
    /// Type embeddings and fusion transformer; absent for branch-only use.
    fusion: Option<(String, TransformerEncoder)>,
}

impl ContextEncoder {
    /// With `fused = false` only the three branches are built and
    /// [`ContextEncoder::encode`] is unavailable.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &FlowNetConfig,
        fused: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let point_empty = format!("{name}.point_empty");
        let dyn_empty = format!("{name}.dyn_empty");
        let dyn_pos = format!("{name}.dyn_pos");
        let enc = Self {
            d_model: d,
            max_obstacles: cfg.max_obstacles,
            point: Mlp::new(store, &format!("{name}.point"), &[2, cfg.point_hidden, d], rng)?,
            point_head: Mlp::new(store, &format!("{name}.point_head"), &[d, d, d], rng)?,
            point_empty: point_empty.clone(),
            dyn_in: Mlp::new(store, &format!("{name}.dyn_in"), &[4, d, d], rng)?,
            dyn_pos: dyn_pos.clone(),
            dyn_tf: TransformerEncoder::new(store, &format!("{name}.dyn_tf"), d, cfg.dyn_heads, cfg.dyn_layers, rng)?,
            dyn_head: Mlp::new(store, &format!("{name}.dyn_head"), &[d, d], rng)?,
            dyn_empty: dyn_empty.clone(),
            goal: Mlp::new(store, &format!("{name}.goal"), &[2, d, d], rng)?,
            fusion: None,
        };
        store.init_uniform(&point_empty, &[1, d], d, rng)?;
        store.init_uniform(&dyn_empty, &[1, d], d, rng)?;
        store.init_uniform(&dyn_pos, &[cfg.max_obstacles, d], d, rng)?;
        if !fused {
            return Ok(enc);
        }
        let type_emb = format!("{name}.type_emb");
        let tf = TransformerEncoder::new(store, &format!("{name}.fusion"), d, cfg.fusion_heads, cfg.fusion_layers, rng)?;
        store.init_uniform(&type_emb, &[3, d], d, rng)?;
        Ok(Self {
            fusion: Some((type_emb, tf)),
            ..enc
        })
    }

    pub fn static_token(&self, g: &mut Graph<'_>, s: &Scenario) -> Result<Var> {
        let pts = s.points();
        if pts.is_empty() {
            return g.param(&self.point_empty);
        }
        let rows: Vec<[f32; 2]> = pts.iter().map(|p| [p[0] * POSITION_SCALE, p[1] * POSITION_SCALE]).collect();
        let x = g.input(Tensor::from_rows(&rows)?);
        let h = self.point.forward(g, x)?;
        let h = g.relu(h);
        let pooled = g.max_pool_global(h, pts.len())?;
        self.point_head.forward(g, pooled)
    }

    pub fn dynamic_token(&self, g: &mut Graph<'_>, s: &Scenario) -> Result<Var> {
        let obs = s.dynamics();
        if obs.is_empty() {
            return g.param(&self.dyn_empty);
        }
        if obs.len() > self.max_obstacles {
            return Err(Error::invalid(format!(
                "{} dynamic obstacles exceed the encoder capacity {}",
                obs.len(),
                self.max_obstacles
            )));
        }
        let rows: Vec<[f32; 4]> = obs
            .iter()
            .map(|o| [o[0] * POSITION_SCALE, o[1] * POSITION_SCALE, o[2], o[3]])
            .collect();
        let x = g.input(Tensor::from_rows(&rows)?);
        let h = self.dyn_in.forward(g, x)?;
        let pos = g.param(&self.dyn_pos)?;
        let pos = g.slice_rows(pos, 0, obs.len())?;
        let h = g.add(h, pos)?;
        let h = self.dyn_tf.forward(g, h, None)?;
        let pooled = g.max_pool_global(h, obs.len())?;
        self.dyn_head.forward(g, pooled)
    }

    pub fn goal_token(&self, g: &mut Graph<'_>, s: &Scenario) -> Result<Var> {
        let x = g.input(Tensor::row_vector(s.goal_heading.to_vec()));
        self.goal.forward(g, x)
    }

    /// Branch outputs before fusion, `[3 × d]` in (static, dynamic, goal) order.
    pub fn branches(&self, g: &mut Graph<'_>, s: &Scenario) -> Result<Var> {
        let a = self.static_token(g, s)?;
        let b = self.dynamic_token(g, s)?;
        let c = self.goal_token(g, s)?;
        g.concat_rows(&[a, b, c])
    }

    /// Fused context tokens, `[3 × d]`.
    pub fn encode(&self, g: &mut Graph<'_>, s: &Scenario) -> Result<Var> {
        let (type_emb, fusion) = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Config("context encoder was built without fusion".into()))?;
        let x = self.branches(g, s)?;
        let t = g.param(type_emb)?;
        let x = g.add(x, t)?;
        fusion.forward(g, x, None)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

// ---- U-Net ------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    time: Linear,
    film: Linear,
    conv2: Conv1d,
    skip: Option<Conv1d>,
    c_out: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        ctx_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, c_out, rng)?,
            // zero FiLM start: identity modulation until the context is learned
            film: Linear::zeros(store, &format!("{name}.film"), ctx_dim, 2 * c_out)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng)?,
            skip: if c_in != c_out {
                Some(Conv1d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng)?)
            } else {
                None
            },
            c_out,
        })
    }

    /// `x[c_in × S·L]` holds `S` sequences; `temb[S × e]` and `ctx[S × 3d]`
    /// carry one conditioning row per sequence.
    fn forward(&self, g: &mut Graph<'_>, x: Var, temb: Var, ctx: Var, segs: usize) -> Result<Var> {
        let c = self.c_out;
        let h = self.conv1.forward_seg(g, x, segs)?;
        let tb = self.time.forward(g, temb)?;
        let h = g.add_seg_bias(h, tb, segs)?;
        let f = self.film.forward(g, ctx)?;
        let scale = g.slice_cols(f, 0, c)?;
        let shift = g.slice_cols(f, c, 2 * c)?;
        let hs = g.mul_seg(h, scale, segs)?;
        let h = g.add(h, hs)?;
        let h = g.add_seg_bias(h, shift, segs)?;
        let h = g.relu(h);
        let h = self.conv2.forward_seg(g, h, segs)?;
        let s = match &self.skip {
            Some(k) => k.forward_seg(g, x, segs)?,
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Debug, Clone)]
struct UNet {
    time_mlp: Mlp,
    time_dim: usize,
    input: Conv1d,
    down_blocks: Vec<ResBlock>,
    downsample: Vec<Conv1d>,
    mid: ResBlock,
    up_blocks: Vec<ResBlock>,
    output: Conv1d,
}

impl UNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &FlowNetConfig, rng: &mut R) -> Result<Self> {
        let ch = &cfg.unet_channels;
        let levels = ch.len();
        let emb = cfg.d_model;
        let ctx_dim = 3 * cfg.d_model;
        let time_mlp = Mlp::new(store, &format!("{name}.time_mlp"), &[cfg.time_dim, emb, emb], rng)?;
        let input = Conv1d::new(store, &format!("{name}.input"), 2, ch[0], 3, 1, 1, rng)?;
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for i in 0..levels {
            let c_in = if i == 0 { ch[0] } else { ch[i - 1] };
            down_blocks.push(ResBlock::new(store, &format!("{name}.down{i}"), c_in, ch[i], emb, ctx_dim, rng)?);
            downsample.push(Conv1d::new(store, &format!("{name}.downsample{i}"), ch[i], ch[i], 3, 2, 1, rng)?);
        }
        let mid = ResBlock::new(store, &format!("{name}.mid"), ch[levels - 1], ch[levels - 1], emb, ctx_dim, rng)?;
        let mut up_blocks = Vec::new();
        for i in 0..levels {
            let c_h = if i == levels - 1 { ch[levels - 1] } else { ch[i + 1] };
            up_blocks.push(ResBlock::new(store, &format!("{name}.up{i}"), c_h + ch[i], ch[i], emb, ctx_dim, rng)?);
        }
        let output = Conv1d::zeros(store, &format!("{name}.output"), ch[0], 2, 3, 1)?;
        Ok(Self {
            time_mlp,
            time_dim: cfg.time_dim,
            input,
            down_blocks,
            downsample,
            mid,
            up_blocks,
            output,
        })
    }

    /// Velocity for `S = taus.len()` sequences packed as `z[2 × S·L]`;
    /// `ctx[S × 3d]` has one context row per sequence.
    fn forward(&self, g: &mut Graph<'_>, z: Var, taus: &[f32], ctx: Var) -> Result<Var> {
        let segs = taus.len();
        let mut te = Vec::with_capacity(segs * self.time_dim);
        for &t in taus {
            te.extend(sinusoidal_embed(t, self.time_dim)?);
        }
        let te = g.input(Tensor::new(&[segs, self.time_dim], te)?);
        let temb = self.time_mlp.forward(g, te)?;
        let mut h = self.input.forward_seg(g, z, segs)?;
        let mut skips = Vec::new();
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(g, h, temb, ctx, segs)?;
            skips.push(h);
            h = down.forward_seg(g, h, segs)?;
        }
        h = self.mid.forward(g, h, temb, ctx, segs)?;
        for (i, block) in self.up_blocks.iter().enumerate().rev() {
            let skip = skips[i];
            let len = g.shape(skip)[1] / segs;
            h = g.upsample_nearest_seg(h, len, segs)?;
            h = g.concat_rows(&[h, skip])?;
            h = block.forward(g, h, temb, ctx, segs)?;
        }
        self.output.forward_seg(g, h, segs)
    }
}

// ---- model --------------------------------------------------------------------

/// Per-dimension affine map between coefficient space and the space the
/// network works in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(targets: &[Vec<f64>], floor: f64) -> Result<Self> {
        let Some(first) = targets.first() else {
            return Err(Error::EmptyInput("no targets to standardize".into()));
        };
        let dim = first.len();
        let n = targets.len() as f64;
        let mut mean = vec![0.0; dim];
        for t in targets {
            for (m, v) in mean.iter_mut().zip(t) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for t in targets {
            for ((s, v), m) in var.iter_mut().zip(t).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Ok(Self {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(floor)).collect(),
        })
    }

    pub fn to_model(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn to_coeffs(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| m + s * v).collect()
    }
}

pub const FLOW_KIND: &str = "flow";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowMeta {
    config: FlowNetConfig,
    standardization: Standardization,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: FlowNetConfig,
    pub store: ParamStore,
    pub stats: Standardization,
    /// Seed the weights were initialized from.
    pub seed: u64,
    encoder: ContextEncoder,
    unet: UNet,
}

impl FlowModel {
    pub fn new(cfg: FlowNetConfig, stats: Standardization, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if stats.mean.len() != cfg.dim() || stats.std.len() != cfg.dim() {
            return Err(Error::Config(format!(
                "standardization has {} dims, model expects {}",
                stats.mean.len(),
                cfg.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = ContextEncoder::new(&mut store, "enc", &cfg, true, &mut rng)?;
        let unet = UNet::new(&mut store, "unet", &cfg, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            stats,
            seed,
            encoder,
            unet,
        })
    }

    /// A fresh model standardized on `records`' targets.
    pub fn for_dataset(cfg: FlowNetConfig, records: &[DatasetRecord], seed: u64) -> Result<Self> {
        let targets: Vec<Vec<f64>> = records.iter().map(|r| r.target_coeffs.to_flat()).collect();
        let stats = Standardization::fit(&targets, cfg.std_floor)?;
        Self::new(cfg, stats, seed)
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    /// Fused context, flattened to `[1 × 3d]`.
    pub fn encode_context(&self, scenario: &Scenario) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let c = self.encoder.encode(&mut g, scenario)?;
        let flat = g.reshape(c, &[1, 3 * self.cfg.d_model])?;
        Ok(g.value(flat).clone())
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    /// Packs `S` flat `[cx; cy]` vectors into one `[2 × S·L]` tensor.
    fn pack(&self, zs: &[&[f32]]) -> Result<Tensor> {
        let l = self.cfg.order + 1;
        let mut data = Vec::with_capacity(zs.len() * 2 * l);
        for ch in 0..2 {
            for z in zs {
                if z.len() != 2 * l {
                    return Err(Error::shape("flow state", &[2 * l], &[z.len()]));
                }
                data.extend_from_slice(&z[ch * l..(ch + 1) * l]);
            }
        }
        Tensor::new(&[2, zs.len() * l], data)
    }

    fn unpack(&self, data: &[f32], segs: usize) -> Vec<Vec<f32>> {
        let l = self.cfg.order + 1;
        let n = segs * l;
        (0..segs)
            .map(|s| {
                let mut v = Vec::with_capacity(2 * l);
                for ch in 0..2 {
                    v.extend_from_slice(&data[ch * n + s * l..ch * n + (s + 1) * l]);
                }
                v
            })
            .collect()
    }

    /// Field in standardized space for a batch of states sharing one flow
    /// time and one context.
    pub fn field_batch(&self, zs: &[Vec<f32>], tau: f32, ctx: &Tensor) -> Result<Vec<Vec<f32>>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        if zs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite flow state".into()));
        }
        let segs = zs.len();
        let mut g = Graph::inference(&self.store);
        let refs: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        let zv = g.input(self.pack(&refs)?);
        let rows: Vec<f32> = (0..segs).flat_map(|_| ctx.data().iter().copied()).collect();
        let cv = g.input(Tensor::new(&[segs, ctx.len()], rows)?);
        let out = self.unet.forward(&mut g, zv, &vec![tau; segs], cv)?;
        Ok(self.unpack(g.data(out), segs))
    }

    /// Field for a single state.
    pub fn field(&self, z: &[f32], tau: f32, ctx: &Tensor) -> Result<Vec<f32>> {
        let mut v = self.field_batch(&[z.to_vec()], tau, ctx)?;
        Ok(v.remove(0))
    }

    /// Squared-error CFM loss for `draws` (τ, ξ₀) pairs on one record,
    /// scaled by `weight`; returns the loss node.
    fn record_loss(&self, g: &mut Graph<'_>, rec: &DatasetRecord, draws: &[(f32, Vec<f32>)], weight: f32) -> Result<Var> {
        if draws.is_empty() {
            return Err(Error::EmptyInput("no draws".into()));
        }
        let ctx = self.encoder.encode(g, &rec.scenario)?;
        let ctx = g.reshape(ctx, &[1, 3 * self.cfg.d_model])?;
        let ctx = g.concat_rows(&vec![ctx; draws.len()])?;
        let x1: Vec<f32> = self.stats.to_model(&rec.target_coeffs.to_flat()).iter().map(|v| *v as f32).collect();
        let mut zt = Vec::with_capacity(draws.len());
        let mut u = Vec::with_capacity(draws.len());
        for (tau, x0) in draws {
            zt.push(x0.iter().zip(&x1).map(|(a, b)| (1.0 - tau) * a + tau * b).collect::<Vec<f32>>());
            u.push(x0.iter().zip(&x1).map(|(a, b)| b - a).collect::<Vec<f32>>());
        }
        let taus: Vec<f32> = draws.iter().map(|d| d.0).collect();
        let zt: Vec<&[f32]> = zt.iter().map(|z| z.as_slice()).collect();
        let u: Vec<&[f32]> = u.iter().map(|z| z.as_slice()).collect();
        let zv = g.input(self.pack(&zt)?);
        let v = self.unet.forward(g, zv, &taus, ctx)?;
        let uv = g.input(self.pack(&u)?);
        let d = g.sub(v, uv)?;
        let l = g.sum_squares(d);
        Ok(g.scale(l, weight))
    }

    /// Loss and parameter gradients over a batch of (record, draws).
    pub fn loss_and_grads(&self, batch: &[(&DatasetRecord, Vec<(f32, Vec<f32>)>)]) -> Result<(f64, ParamGrads)> {
        let n_draws: usize = batch.iter().map(|(_, d)| d.len()).sum();
        if n_draws == 0 {
            return Err(Error::EmptyInput("empty training batch".into()));
        }
        let w = 1.0 / n_draws as f32;
        let parts: Vec<Result<(f64, ParamGrads)>> = batch
            .par_iter()
            .map(|(rec, draws)| {
                let mut g = Graph::new(&self.store);
                let l = self.record_loss(&mut g, rec, draws, w)?;
                let grads = g.backward(l)?;
                Ok((g.data(l)[0] as f64, g.param_grads(&grads)))
            })
            .collect();
        let mut loss = 0.0;
        let mut acc = ParamGrads::new(self.store.len());
        for p in parts {
            let (l, gr) = p?;
            loss += l;
            acc.merge(&gr);
        }
        Ok((loss, acc))
    }

    /// Mean CFM loss over the records, without gradients.
    pub fn eval_loss(&self, records: &[DatasetRecord], draws: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut n = 0;
        for rec in records {
            let d = self.draws(draws, &mut rng);
            let mut g = Graph::inference(&self.store);
            let l = self.record_loss(&mut g, rec, &d, 1.0)?;
            total += g.data(l)[0] as f64;
            n += d.len();
        }
        if n == 0 {
            return Err(Error::EmptyInput("no records".into()));
        }
        Ok(total / n as f64)
    }

    fn draws(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<(f32, Vec<f32>)> {
        (0..n)
            .map(|_| {
                let tau: f32 = rng.random_range(0.0..1.0);
                let x0: Vec<f32> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
                (tau, x0)
            })
            .collect()
    }

    /// Draws `k` candidates for `scenario`. Guidance with scale `lambda`
    /// pushes each Euler step down the collision-cost gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_candidates(
        &self,
        scenario: &Scenario,
        k: usize,
        steps: usize,
        lambda: f64,
        cost: &CostConfig,
        basis: &BasisMatrix,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TrajectoryCoeffs>> {
        let ctx = self.encode_context(scenario)?;
        let obs = Obstacles::from_scenario(scenario, cost.include_dynamic);
        let field = |zs: &[Vec<f32>], tau: f32| self.field_batch(zs, tau, &ctx);
        let guide = Guidance {
            lambda,
            obstacles: &obs,
            cost,
            basis,
        };
        let z0: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let out: Vec<TrajectoryCoeffs> = integrate(&field, &z0, steps, &self.stats, Some(&guide))?
            .into_iter()
            .flatten()
            .collect();
        if out.is_empty() {
            return Err(Error::Numerical("every candidate became non-finite".into()));
        }
        Ok(out)
    }

    fn meta(&self) -> FlowMeta {
        FlowMeta {
            config: self.cfg.clone(),
            standardization: self.stats.clone(),
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, FLOW_KIND, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h = checkpoint::read_header(path)?;
        let meta: FlowMeta =
            serde_json::from_value(h.meta).map_err(|e| Error::Checkpoint(format!("bad flow header: {e}")))?;
        let mut m = Self::new(meta.config, meta.standardization, meta.seed)?;
        checkpoint::load_into(path, FLOW_KIND, &mut m.store)?;
        Ok(m)
    }
}

/// Mean CFM regression loss `‖v(z_τ, τ) − (x₁ − x₀)‖²` of an arbitrary field
/// over `(τ, x₀, x₁)` triples in standardized space.
pub fn cfm_loss<F>(field: &F, triples: &[(f32, Vec<f32>, Vec<f32>)]) -> Result<f64>
where
    F: Fn(&[f32], f32) -> Result<Vec<f32>>,
{
    if triples.is_empty() {
        return Err(Error::EmptyInput("no samples for the flow loss".into()));
    }
    let mut total = 0.0;
    for (tau, x0, x1) in triples {
        let zt: Vec<f32> = x0.iter().zip(x1).map(|(a, b)| (1.0 - tau) * a + tau * b).collect();
        let v = field(&zt, *tau)?;
        total += v
            .iter()
            .zip(x0.iter().zip(x1))
            .map(|(v, (a, b))| ((v - (b - a)) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total / triples.len() as f64)
}

/// Collision guidance for [`integrate`].
pub struct Guidance<'a> {
    pub lambda: f64,
    pub obstacles: &'a Obstacles,
    pub cost: &'a CostConfig,
    pub basis: &'a BasisMatrix,
}

/// Forward Euler over τ ∈ [0, 1] for a batch of standardized starting
/// states; returns de-standardized coefficients, `None` for any state that
/// went non-finite (it is dropped from later steps). The guidance term is
/// `λ·σ⊙∇ξ L`, the coefficient-space gradient carried into standardized
/// space.
pub fn integrate<F>(
    field: &F,
    z0: &[Vec<f64>],
    steps: usize,
    stats: &Standardization,
    guide: Option<&Guidance<'_>>,
) -> Result<Vec<Option<TrajectoryCoeffs>>>
where
    F: Fn(&[Vec<f32>], f32) -> Result<Vec<Vec<f32>>>,
{
    if steps == 0 {
        return Err(Error::invalid("at least one integration step is required"));
    }
    let guide = guide.filter(|g| g.lambda > 0.0 && !g.obstacles.is_empty());
    let h = 1.0 / steps as f64;
    let mut z: Vec<Vec<f64>> = z0.to_vec();
    let mut alive: Vec<bool> = z.iter().map(|v| v.iter().all(|x| x.is_finite())).collect();
    for s in 0..steps {
        let tau = s as f64 * h;
        let idx: Vec<usize> = (0..z.len()).filter(|&i| alive[i]).collect();
        if idx.is_empty() {
            break;
        }
        let zf: Vec<Vec<f32>> = idx.iter().map(|&i| z[i].iter().map(|v| *v as f32).collect()).collect();
        let vs = field(&zf, tau as f32)?;
        if vs.len() != idx.len() {
            return Err(Error::shape("integrate", &[idx.len()], &[vs.len()]));
        }
        for (&i, v) in idx.iter().zip(&vs) {
            let zi = &mut z[i];
            if v.len() != zi.len() {
                return Err(Error::shape("integrate", &[zi.len()], &[v.len()]));
            }
            let mut dz: Vec<f64> = v.iter().map(|x| *x as f64).collect();
            if let Some(gd) = guide {
                let xi = TrajectoryCoeffs::from_flat(&stats.to_coeffs(zi))?;
                let (_, grad) = collision_cost_and_grad(&xi, gd.basis, gd.obstacles, gd.cost);
                for ((d, g), s) in dz.iter_mut().zip(&grad).zip(&stats.std) {
                    *d -= gd.lambda * s * g;
                }
            }
            for (a, d) in zi.iter_mut().zip(&dz) {
                *a += h * d;
            }
            if zi.iter().any(|v| !v.is_finite()) {
                alive[i] = false;
            }
        }
    }
    z.iter()
        .zip(&alive)
        .map(|(zi, &ok)| if ok { TrajectoryCoeffs::from_flat(&stats.to_coeffs(zi)).map(Some) } else { Ok(None) })
        .collect()
}

// ---- training -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: u64,
    pub batch_records: usize,
    pub draws_per_record: usize,
    pub lr: f32,
    /// Linear warm-up length in steps.
    pub warmup: u64,
    /// Cosine decay from `lr` down to `lr · final_lr_ratio` at `steps`.
    pub final_lr_ratio: f32,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_records: 8,
            draws_per_record: 4,
            lr: 2e-3,
            warmup: 50,
            final_lr_ratio: 0.05,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn lr_at(&self, step: u64) -> f32 {
        let warm = ((step + 1) as f32 / self.warmup.max(1) as f32).min(1.0);
        let progress = (step as f32 / self.steps.max(1) as f32).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.lr * warm * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
    }
}

/// Deterministic per-step RNG.
pub fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step.wrapping_mul(4).wrapping_add(stream));
    r
}

/// Trains from the model's current step up to `cfg.steps`, calling
/// `on_step(step, loss, model)` after every update. The step count lives in
/// the parameter store, so a reloaded checkpoint resumes exactly.
pub fn train_flow<F>(model: &mut FlowModel, records: &[DatasetRecord], cfg: &FlowTrainConfig, on_step: F) -> Result<Vec<(u64, f64)>>
where
    F: FnMut(u64, f64, &FlowModel) -> Result<()>,
{
    train_flow_until(model, records, cfg, cfg.steps, on_step)
}

/// Like [`train_flow`] but stops at step `until`. The learning-rate schedule
/// still spans `cfg.steps`, so stopping early and resuming later matches one
/// uninterrupted run.
pub fn train_flow_until<F>(
    model: &mut FlowModel,
    records: &[DatasetRecord],
    cfg: &FlowTrainConfig,
    until: u64,
    mut on_step: F,
) -> Result<Vec<(u64, f64)>>
where
    F: FnMut(u64, f64, &FlowModel) -> Result<()>,
{
    if records.is_empty() {
        return Err(Error::EmptyInput("flow training needs at least one record".into()));
    }
    let mut log = Vec::new();
    while model.store.step() < until {
        let step = model.store.step();
        let mut rng = step_rng(cfg.seed, step, 0);
        let picks: Vec<usize> = (0..cfg.batch_records).map(|_| rng.random_range(0..records.len())).collect();
        let batch: Vec<(&DatasetRecord, Vec<(f32, Vec<f32>)>)> = picks
            .iter()
            .map(|&i| (&records[i], model.draws(cfg.draws_per_record, &mut rng)))
            .collect();
        let (loss, grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        model.store.zero_grad();
        model.store.accumulate(&grads);
        model.store.adam_step(AdamConfig {
            lr: cfg.lr_at(step),
            ..Default::default()
        })?;
        log.push((step, loss));
        on_step(step, loss, model)?;
    }
    Ok(log)
}

/// A two-cluster dataset for checking that sampling keeps both modes: every
/// record shares one empty scene and its target swerves left or right by
/// `offset` metres (alternating), with small coefficient jitter.
pub fn bimodal_toy(n: usize, offset: f64, scene: &SceneConfig, order: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.05).expect("valid std");
    let scenario = Scenario::empty([1.0, 0.0], scene);
    (0..n)
        .map(|i| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            let mut c = TrajectoryCoeffs::line(order, [0.0, 0.0], [4.0, 0.0]);
            for (j, y) in c.cy.iter_mut().enumerate().skip(1) {
                // rise then hold: a lane change to one side
                let s = (j as f64 / order as f64).min(0.5) * 2.0;
                *y = side * offset * s + jitter.sample(&mut rng);
            }
            for x in c.cx.iter_mut().skip(1) {
                *x += jitter.sample(&mut rng);
            }
            DatasetRecord::new(scenario.clone(), &c, None, seed, i as u64, if side > 0.0 { "left" } else { "right" })
        })
        .collect()
}

/// Which side of the start heading a trajectory ends on: `true` for left.
pub fn toy_mode(c: &TrajectoryCoeffs) -> bool {
    c.cy.last().copied().unwrap_or(0.0) > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneConfig;

    fn small_cfg() -> FlowNetConfig {
        FlowNetConfig {
            d_model: 16,
            unet_channels: vec![8, 16],
            fusion_layers: 1,
            dyn_layers: 1,
            point_hidden: 8,
            time_dim: 8,
            ..Default::default()
        }
    }

    fn scenario() -> Scenario {
        Scenario::from_parts(
            &[[2.0, 1.0], [2.5, -0.5], [3.0, 0.2]],
            &[[1.5, 1.0, -0.2, 0.1], [4.0, -1.0, 0.0, 0.5]],
            [0.6, 0.8],
            8,
            4,
        )
        .unwrap()
    }

    fn model() -> FlowModel {
        FlowModel::new(small_cfg(), Standardization::identity(22), 3).unwrap()
    }

    /// Fresh weights with the zero-initialized layers filled in.
    fn perturbed() -> FlowModel {
        let mut m = model();
        for id in 0..m.store.len() {
            let p = m.store.by_id_mut(id);
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = 0.1 * ((i * 7 + id) as f32).sin();
                }
            }
        }
        m
    }

    #[test]
    fn fresh_field_is_zero_with_right_shape() {
        let m = model();
        let ctx = m.encode_context(&scenario()).unwrap();
        let v = m.field(&[0.3; 22], 0.4, &ctx).unwrap();
        assert_eq!(v.len(), 22);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn point_order_and_padding_do_not_matter() {
        let m = model();
        let s = scenario();
        let mut p = s.clone();
        p.pointcloud.swap(0, 2);
        let mut q = s.clone();
        q.pointcloud[5] = [-3.0, 7.0];
        q.dyn_obstacles[3] = [0.1, 0.1, 5.0, 5.0];
        let a = m.encode_context(&s).unwrap();
        assert_eq!(a, m.encode_context(&p).unwrap());
        assert_eq!(a, m.encode_context(&q).unwrap());
    }

    #[test]
    fn goal_branch_is_isolated() {
        let m = model();
        let s = scenario();
        let mut r = s.clone();
        r.goal_heading = [-0.6, -0.8];
        let tok = |s: &Scenario| {
            let mut g = Graph::inference(&m.store);
            let b = m.encoder().branches(&mut g, s).unwrap();
            g.value(b).clone()
        };
        let (a, b) = (tok(&s), tok(&r));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn empty_scenario_uses_learned_tokens() {
        let m = model();
        let e = Scenario::empty([1.0, 0.0], &SceneConfig::default());
        assert!(m.encode_context(&e).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn euler_of_zero_and_constant_fields() {
        let stats = Standardization {
            mean: vec![1.0; 22],
            std: vec![2.0; 22],
        };
        let z0: Vec<f64> = (0..22).map(|i| (i as f64 * 0.3).sin()).collect();
        let c: Vec<f32> = (0..22).map(|i| (i as f32 * 0.7).cos()).collect();
        let zero = |zs: &[Vec<f32>], _: f32| Ok(zs.iter().map(|z| vec![0.0; z.len()]).collect());
        let cst = |zs: &[Vec<f32>], _: f32| Ok(zs.iter().map(|_| c.clone()).collect());
        for steps in [1, 3, 5] {
            let out = integrate(&zero, &[z0.clone()], steps, &stats, None).unwrap();
            assert_eq!(out[0].as_ref().unwrap().to_flat(), stats.to_coeffs(&z0));
            let out = integrate(&cst, &[z0.clone()], steps, &stats, None).unwrap();
            let want: Vec<f64> = z0.iter().zip(&c).map(|(a, b)| a + *b as f64).collect();
            for (a, b) in out[0].as_ref().unwrap().to_flat().iter().zip(stats.to_coeffs(&want)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_field_matches_single() {
        let m = perturbed();
        let ctx = m.encode_context(&scenario()).unwrap();
        let zs: Vec<Vec<f32>> = (0..3).map(|k| (0..22).map(|i| ((i + 7 * k) as f32 * 0.4).sin()).collect()).collect();
        let b = m.field_batch(&zs, 0.3, &ctx).unwrap();
        for (z, v) in zs.iter().zip(&b) {
            let single = m.field(z, 0.3, &ctx).unwrap();
            assert!(v.iter().any(|x| *x != 0.0));
            for (a, b) in single.iter().zip(v) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn non_finite_states_are_dropped() {
        let stats = Standardization::identity(22);
        let f = |zs: &[Vec<f32>], _: f32| Ok(zs.iter().map(|z| vec![z[0] * 1e38; z.len()]).collect());
        let mut big = vec![0.0; 22];
        big[0] = 1e3;
        let out = integrate(&f, &[vec![0.0; 22], big], 2, &stats, None).unwrap();
        assert!(out[0].is_some());
        assert!(out[1].is_none());
    }

    #[test]
    fn tiny_guidance_is_continuous() {
        let m = model();
        let b = BasisMatrix::canonical();
        let s = scenario();
        let cost = CostConfig::default();
        let run = |lambda| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            m.sample_candidates(&s, 3, 5, lambda, &cost, &b, &mut rng).unwrap()
        };
        for (a, c) in run(0.0).iter().zip(run(1e-12)) {
            for (x, y) in a.to_flat().iter().zip(c.to_flat()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    fn triples(n: usize, seed: u64) -> Vec<(f32, Vec<f32>, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let tau = rng.random_range(0.0..0.9f32);
                let x0 = (0..22).map(|_| rng.sample(StandardNormal)).collect();
                let x1 = (0..22).map(|_| rng.random_range(-2.0..2.0f32)).collect();
                (tau, x0, x1)
            })
            .collect()
    }

    #[test]
    fn oracle_field_has_zero_loss() {
        // one target: the field (x₁ − z)/(1 − τ) equals x₁ − x₀ along every path
        for (tau, x0, x1) in triples(20, 1) {
            let oracle = |z: &[f32], t: f32| Ok(z.iter().zip(&x1).map(|(z, b)| (b - z) / (1.0 - t)).collect());
            let l = cfm_loss(&oracle, &[(tau, x0, x1.clone())]).unwrap();
            assert!(l < 1e-9, "{l}");
        }
    }

    #[test]
    fn graph_loss_matches_reference_loss() {
        let m = perturbed();
        let s = scenario();
        let target = TrajectoryCoeffs::from_flat(&(0..22).map(|i| (i as f64 * 0.2).sin()).collect::<Vec<_>>()).unwrap();
        let rec = DatasetRecord::new(s.clone(), &target, None, 0, 0, "t");
        let x1: Vec<f32> = target.to_flat().iter().map(|v| *v as f32).collect();
        let t: Vec<_> = triples(3, 2).into_iter().map(|(tau, x0, _)| (tau, x0, x1.clone())).collect();
        let ctx = m.encode_context(&s).unwrap();
        let reference = cfm_loss(&|z: &[f32], tau| m.field(z, tau, &ctx), &t).unwrap();
        let draws: Vec<(f32, Vec<f32>)> = t.iter().map(|(tau, x0, _)| (*tau, x0.clone())).collect();
        let (graph, _) = m.loss_and_grads(&[(&rec, draws)]).unwrap();
        assert!((graph - reference).abs() < 1e-4 * reference.max(1.0), "{graph} vs {reference}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ckpt");
        let m = model();
        m.save(&p).unwrap();
        let l = FlowModel::load(&p).unwrap();
        assert_eq!(l.cfg, m.cfg);
        assert_eq!(l.stats, m.stats);
        for (a, b) in m.store.iter().zip(l.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn config_validation() {
        let bad = FlowNetConfig {
            d_model: 30,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
