//! Collision cost in coefficient space and the projection refiner.
//!
//! The cost is the mean over waypoints of `max(0, d² − ‖p_k − o*‖²)`, where
//! `o*` is the obstacle that violates its safety radius the most. Static
//! points use `d_safe`; dynamic agents, propagated at constant velocity to
//! each waypoint time, use `d_safe + dynamic_margin`. With no dynamic
//! obstacles this is exactly `max(0, d_safe² − min_m ‖p_k − o_m‖²)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::{BasisMatrix, TrajectoryCoeffs};
use crate::error::{Error, Result};
use crate::scene::Scenario;

/// Obstacles in the ego frame, in `f64`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Obstacles {
    pub points: Vec<[f64; 2]>,
    /// `(x, y, vx, vy)` at time 0.
    pub dynamic: Vec<[f64; 4]>,
}

impl Obstacles {
    pub fn from_scenario(s: &Scenario, include_dynamic: bool) -> Self {
        Self {
            points: s.points().iter().map(|p| [p[0] as f64, p[1] as f64]).collect(),
            dynamic: if include_dynamic {
                s.dynamics()
                    .iter()
                    .map(|o| [o[0] as f64, o[1] as f64, o[2] as f64, o[3] as f64])
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.dynamic.is_empty()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            dynamic: self.dynamic.iter().map(|o| [o[0] + dx, o[1] + dy, o[2], o[3]]).collect(),
        }
    }

    /// Obstacles as seen at time `t`, each with its safety radius, static
    /// points first.
    fn at_time(&self, t: f64, d_static: f64, d_dynamic: f64) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        self.points
            .iter()
            .map(move |p| (*p, d_static))
            .chain(self.dynamic.iter().map(move |o| ([o[0] + o[2] * t, o[1] + o[3] * t], d_dynamic)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub d_safe: f64,
    /// Extra clearance required from agents, on top of `d_safe`.
    pub dynamic_margin: f64,
    pub include_dynamic: bool,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            d_safe: 0.5,
            dynamic_margin: 0.3,
            include_dynamic: true,
        }
    }
}

/// Hinge value at one waypoint and the obstacle that set it.
fn waypoint_hinge(p: [f64; 2], t: f64, obs: &Obstacles, cfg: &CostConfig) -> (f64, Option<[f64; 2]>) {
    let mut best = 0.0;
    let mut arg = None;
    for (o, d) in obs.at_time(t, cfg.d_safe, cfg.d_safe + cfg.dynamic_margin) {
        let dx = p[0] - o[0];
        let dy = p[1] - o[1];
        let h = d * d - (dx * dx + dy * dy);
        // strict comparison: the lowest index wins ties
        if h > best {
            best = h;
            arg = Some(o);
        }
    }
    (best, arg)
}

/// Collision cost of explicit waypoints at explicit times.
pub fn waypoint_cost(waypoints: &[[f64; 2]], times: &[f64], obs: &Obstacles, cfg: &CostConfig) -> Result<f64> {
    if waypoints.len() != times.len() || waypoints.is_empty() {
        return Err(Error::invalid(format!(
            "{} waypoints but {} times",
            waypoints.len(),
            times.len()
        )));
    }
    let s: f64 = waypoints
        .iter()
        .zip(times)
        .map(|(p, t)| waypoint_hinge(*p, *t, obs, cfg).0)
        .sum();
    Ok(s / waypoints.len() as f64)
}

pub fn collision_cost(coeffs: &TrajectoryCoeffs, basis: &BasisMatrix, obs: &Obstacles, cfg: &CostConfig) -> f64 {
    collision_cost_and_grad(coeffs, basis, obs, cfg).0
}

/// Gradient of [`collision_cost`] with respect to `[cx; cy]`.
pub fn collision_cost_grad(coeffs: &TrajectoryCoeffs, basis: &BasisMatrix, obs: &Obstacles, cfg: &CostConfig) -> Vec<f64> {
    collision_cost_and_grad(coeffs, basis, obs, cfg).1
}

pub fn collision_cost_and_grad(
    coeffs: &TrajectoryCoeffs,
    basis: &BasisMatrix,
    obs: &Obstacles,
    cfg: &CostConfig,
) -> (f64, Vec<f64>) {
    let c = basis.n_coeffs();
    let mut grad = vec![0.0; 2 * c];
    if obs.is_empty() {
        return (0.0, grad);
    }
    let n = basis.n_waypoints() as f64;
    let mut cost = 0.0;
    for (k, p) in basis.positions(coeffs).iter().enumerate() {
        let (h, arg) = waypoint_hinge(*p, basis.times()[k], obs, cfg);
        if let Some(o) = arg {
            cost += h;
            let gx = -2.0 * (p[0] - o[0]) / n;
            let gy = -2.0 * (p[1] - o[1]) / n;
            for (j, b) in basis.p_row(k).iter().enumerate() {
                grad[j] += gx * b;
                grad[c + j] += gy * b;
            }
        }
    }
    (cost / n, grad)
}

// ---- refinement ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub d_safe: f64,
    pub dynamic_margin: f64,
    pub include_dynamic: bool,
    pub v_max: f64,
    pub a_max: f64,
    pub max_iters: usize,
    /// Initial step length along the preconditioned descent direction.
    pub step_size: f64,
    pub proximity_weight: f64,
    pub collision_weight: f64,
    pub limit_weight: f64,
    /// Softplus sharpness of the penalty hinges.
    pub sharpness: f64,
    /// Penalties activate this far inside the audited limits.
    pub margin: f64,
    pub convergence_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            d_safe: 0.5,
            dynamic_margin: 0.3,
            include_dynamic: true,
            v_max: 1.0,
            a_max: 1.5,
            max_iters: 50,
            step_size: 1.0,
            proximity_weight: 1.0,
            collision_weight: 1e5,
            limit_weight: 1e5,
            sharpness: 10.0,
            margin: 0.05,
            convergence_tol: 1e-6,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_safe > 0.0) {
            return Err(Error::Config(format!("d_safe must be positive, got {}", self.d_safe)));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.v_max > 0.0 && self.a_max > 0.0 && self.step_size > 0.0 && self.proximity_weight > 0.0) {
            return Err(Error::Config("refine limits, step size and weights must be positive".into()));
        }
        Ok(())
    }

    pub fn cost_config(&self) -> CostConfig {
        CostConfig {
            d_safe: self.d_safe,
            dynamic_margin: self.dynamic_margin,
            include_dynamic: self.include_dynamic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub coeffs: TrajectoryCoeffs,
    /// Exact (unsmoothed) objective at the output: proximity plus squared
    /// hinge violations of clearance and limits.
    pub cost: f64,
    pub feasible: bool,
    pub iters_used: usize,
    /// Smoothed objective after each accepted step, starting with the input.
    pub objective_log: Vec<f64>,
}

/// Exact post-hoc check on the waypoint grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Audit {
    pub static_clearance: f64,
    pub dynamic_clearance: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub feasible: bool,
}

pub const AUDIT_TOL: f64 = 1e-3;

pub fn audit(coeffs: &TrajectoryCoeffs, basis: &BasisMatrix, obs: &Obstacles, cfg: &RefineConfig) -> Audit {
    let pos = basis.positions(coeffs);
    let mut st = f64::INFINITY;
    let mut dy = f64::INFINITY;
    for (k, p) in pos.iter().enumerate() {
        let t = basis.times()[k];
        for o in &obs.points {
            st = st.min((p[0] - o[0]).hypot(p[1] - o[1]));
        }
        for o in &obs.dynamic {
            dy = dy.min((p[0] - o[0] - o[2] * t).hypot(p[1] - o[1] - o[3] * t));
        }
    }
    let max_speed = basis
        .velocities(coeffs)
        .iter()
        .map(|v| v[0].hypot(v[1]))
        .fold(0.0, f64::max);
    let max_accel = basis
        .accelerations(coeffs)
        .iter()
        .map(|a| a[0].hypot(a[1]))
        .fold(0.0, f64::max);
    let feasible = st >= cfg.d_safe - 1e-6
        && dy >= cfg.d_safe + cfg.dynamic_margin - 1e-6
        && max_speed <= cfg.v_max + AUDIT_TOL
        && max_accel <= cfg.a_max + AUDIT_TOL;
    Audit {
        static_clearance: st,
        dynamic_clearance: dy,
        max_speed,
        max_accel,
        feasible,
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 30.0 {
        x
    } else {
        z.exp().ln_1p() / beta
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const STALL_WINDOW: usize = 5;

/// Penalty pairs whose softplus is below this (in meters) are dropped.
const PENALTY_CUTOFF: f64 = 1e-4;

/// Residual vector and Jacobian of the smoothed objective `J = ‖r‖²`.
struct Residuals {
    r: Vec<f64>,
    /// Row-major, `2c` columns.
    jac: Vec<f64>,
}

struct Problem<'a> {
    basis: &'a BasisMatrix,
    obs: &'a Obstacles,
    cfg: &'a RefineConfig,
    x_in: Vec<f64>,
    free: Vec<bool>,
}

impl Problem<'_> {
    fn n_vars(&self) -> usize {
        self.x_in.len()
    }

    /// Smoothed objective only.
    fn objective(&self, x: &[f64]) -> f64 {
        self.residuals(x, false).r.iter().map(|v| v * v).sum()
    }

    fn residuals(&self, x: &[f64], with_jac: bool) -> Residuals {
        let cfg = self.cfg;
        let c = self.basis.n_coeffs();
        let nv = self.n_vars();
        let n = self.basis.n_waypoints() as f64;
        let beta = cfg.sharpness;
        // below this hinge argument the squared softplus is negligible
        let cut = (PENALTY_CUTOFF * beta).exp_m1().ln() / beta;
        let coeffs = TrajectoryCoeffs {
            cx: x[..c].to_vec(),
            cy: x[c..].to_vec(),
        };
        let mut r = Vec::new();
        let mut jac = Vec::new();
        let mut push_row = |val: f64, row: Option<Vec<f64>>| {
            r.push(val);
            if with_jac {
                jac.extend(row.unwrap_or_else(|| vec![0.0; nv]));
            }
        };

        let wp = cfg.proximity_weight.sqrt();
        for i in 0..nv {
            if self.free[i] {
                let row = with_jac.then(|| {
                    let mut row = vec![0.0; nv];
                    row[i] = wp;
                    row
                });
                push_row(wp * (x[i] - self.x_in[i]), row);
            }
        }

        // g is d(hinge argument)/d(point), mapped through basis row `b`
        let chain = |g: [f64; 2], scale: f64, b: &[f64]| {
            let mut row = vec![0.0; nv];
            for j in 0..c {
                row[j] = scale * g[0] * b[j];
                row[c + j] = scale * g[1] * b[j];
            }
            row
        };

        let wc = (cfg.collision_weight / n).sqrt();
        let d_st = cfg.d_safe + cfg.margin;
        let d_dy = cfg.d_safe + cfg.dynamic_margin + cfg.margin;
        for (k, p) in self.basis.positions(&coeffs).iter().enumerate() {
            let t = self.basis.times()[k];
            for (o, d) in self.obs.at_time(t, d_st, d_dy) {
                let dx = p[0] - o[0];
                let dy = p[1] - o[1];
                let dist = dx.hypot(dy).max(1e-9);
                let arg = d - dist;
                if arg < cut {
                    continue;
                }
                let row = with_jac.then(|| {
                    let s = wc * sigmoid(beta * arg);
                    chain([-dx / dist, -dy / dist], s, self.basis.p_row(k))
                });
                push_row(wc * softplus(arg, beta), row);
            }
        }

        let wl = (cfg.limit_weight / n).sqrt();
        for (vals, limit, deriv) in [
            (self.basis.velocities(&coeffs), cfg.v_max - cfg.margin * 0.1, 1usize),
            (self.basis.accelerations(&coeffs), cfg.a_max - cfg.margin * 0.1, 2usize),
        ] {
            for (k, v) in vals.iter().enumerate() {
                let m = v[0].hypot(v[1]).max(1e-9);
                let arg = m - limit;
                if arg < cut {
                    continue;
                }
                let row = with_jac.then(|| {
                    let b = if deriv == 1 {
                        self.basis.dp_row(k)
                    } else {
                        self.basis.ddp_row(k)
                    };
                    chain([v[0] / m, v[1] / m], wl * sigmoid(beta * arg), b)
                });
                push_row(wl * softplus(arg, beta), row);
            }
        }
        Residuals { r, jac }
    }

    /// Exact objective: proximity plus squared plain hinges at the audited
    /// limits. Zero for an unchanged feasible input.
    fn exact_cost(&self, x: &[f64]) -> f64 {
        let cfg = self.cfg;
        let c = self.basis.n_coeffs();
        let n = self.basis.n_waypoints() as f64;
        let coeffs = TrajectoryCoeffs {
            cx: x[..c].to_vec(),
            cy: x[c..].to_vec(),
        };
        let mut j: f64 = x
            .iter()
            .zip(&self.x_in)
            .map(|(a, b)| cfg.proximity_weight * (a - b) * (a - b))
            .sum();
        let hinge2 = |v: f64| v.max(0.0).powi(2);
        let d_dy = cfg.d_safe + cfg.dynamic_margin;
        for (k, p) in self.basis.positions(&coeffs).iter().enumerate() {
            let t = self.basis.times()[k];
            for (o, d) in self.obs.at_time(t, cfg.d_safe, d_dy) {
                j += cfg.collision_weight / n * hinge2(d - (p[0] - o[0]).hypot(p[1] - o[1]));
            }
        }
        for v in self.basis.velocities(&coeffs) {
            j += cfg.limit_weight / n * hinge2(v[0].hypot(v[1]) - cfg.v_max);
        }
        for a in self.basis.accelerations(&coeffs) {
            j += cfg.limit_weight / n * hinge2(a[0].hypot(a[1]) - cfg.a_max);
        }
        j
    }
}

/// Pulls `coeffs_in` to the nearest (in coefficient space) trajectory that
/// clears obstacles and respects the speed and acceleration limits.
///
/// The first control point is pinned to the ego origin. Descent directions
/// are Gauss-Newton preconditioned gradients of the smoothed objective,
/// accepted by Armijo backtracking, so the objective log never increases.
/// Iteration stops once the exact audit passes, on a step below
/// `convergence_tol`, when progress stalls, or at `max_iters`.
pub fn project_refine(
    coeffs_in: &TrajectoryCoeffs,
    scenario: &Scenario,
    basis: &BasisMatrix,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    let obs = Obstacles::from_scenario(scenario, cfg.include_dynamic);
    refine_against(coeffs_in, &obs, basis, cfg)
}

pub fn refine_against(
    coeffs_in: &TrajectoryCoeffs,
    obs: &Obstacles,
    basis: &BasisMatrix,
    cfg: &RefineConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    if coeffs_in.cx.len() != basis.n_coeffs() {
        return Err(Error::invalid(format!(
            "trajectory has {} control points per axis, basis expects {}",
            coeffs_in.cx.len(),
            basis.n_coeffs()
        )));
    }
    if !coeffs_in.is_finite() {
        return Err(Error::Numerical("non-finite input trajectory".into()));
    }
    let c = basis.n_coeffs();
    let x_in = coeffs_in.to_flat();
    let mut free = vec![true; 2 * c];
    free[0] = false;
    free[c] = false;
    let problem = Problem {
        basis,
        obs,
        cfg,
        x_in: x_in.clone(),
        free,
    };

    let pinned = x_in[0].abs() <= cfg.convergence_tol && x_in[c].abs() <= cfg.convergence_tol;
    if pinned && audit(coeffs_in, basis, obs, cfg).feasible {
        return Ok(RefineResult {
            coeffs: coeffs_in.clone(),
            cost: problem.exact_cost(&x_in),
            feasible: true,
            iters_used: 0,
            objective_log: vec![problem.objective(&x_in)],
        });
    }

    let nv = 2 * c;
    let mut x = x_in.clone();
    x[0] = 0.0;
    x[c] = 0.0;
    let mut f = problem.objective(&x);
    let mut log = vec![f];
    let mut iters = 0;
    let mut damping = 1e-6;
    while iters < cfg.max_iters {
        iters += 1;
        let res = problem.residuals(&x, true);
        let rows = res.r.len();
        let jm = DMatrix::from_row_slice(rows, nv, &res.jac);
        let rv = DVector::from_vec(res.r);
        let grad = 2.0 * jm.transpose() * &rv;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite refinement gradient".into()));
        }
        let mut h = 2.0 * jm.transpose() * &jm;
        let scale = (0..nv).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1.0);
        for i in 0..nv {
            h[(i, i)] += damping * scale;
        }
        for (i, free) in problem.free.iter().enumerate() {
            if !free {
                // pinned coordinate: identity row, zero gradient
                h.row_mut(i).fill(0.0);
                h.column_mut(i).fill(0.0);
                h[(i, i)] = 1.0;
            }
        }
        let mut g = grad.clone();
        g[0] = 0.0;
        g[c] = 0.0;
        let dir = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -g.clone(),
        };
        let slope = g.dot(&dir);
        if slope >= 0.0 || !slope.is_finite() {
            break;
        }

        let mut alpha = cfg.step_size;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + alpha * d).collect();
            let ft = problem.objective(&trial);
            if !ft.is_finite() {
                return Err(Error::Numerical("non-finite refinement objective".into()));
            }
            if ft <= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            damping *= 10.0;
            if damping > 1e6 {
                break;
            }
            continue;
        };
        let step: f64 = x
            .iter()
            .zip(&trial)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x = trial;
        f = ft;
        log.push(f);
        if alpha == cfg.step_size {
            damping = (damping * 0.3).max(1e-9);
        } else {
            damping *= 2.0;
        }
        let coeffs = TrajectoryCoeffs::from_flat(&x)?;
        if step < cfg.convergence_tol || audit(&coeffs, basis, obs, cfg).feasible {
            break;
        }
        // stalled: under 0.1% total decrease across the last few steps
        if log.len() > STALL_WINDOW && log[log.len() - 1 - STALL_WINDOW] - f < 1e-3 * f {
            break;
        }
    }

    let coeffs = TrajectoryCoeffs::from_flat(&x).map_err(|e| Error::Numerical(e.to_string()))?;
    let feasible = audit(&coeffs, basis, obs, cfg).feasible;
    Ok(RefineResult {
        cost: problem.exact_cost(&x),
        coeffs,
        feasible,
        iters_used: iters,
        objective_log: log,
    })
}

/// Refines every candidate independently, in parallel, preserving order.
pub fn refine_all(
    cands: &[TrajectoryCoeffs],
    scenario: &Scenario,
    basis: &BasisMatrix,
    cfg: &RefineConfig,
) -> Result<Vec<RefineResult>> {
    let obs = Obstacles::from_scenario(scenario, cfg.include_dynamic);
    cands
        .par_iter()
        .map(|c| refine_against(c, &obs, basis, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(p: &[[f64; 2]]) -> Obstacles {
        Obstacles {
            points: p.to_vec(),
            dynamic: vec![],
        }
    }

    #[test]
    fn single_coincident_waypoint() {
        let c = waypoint_cost(&[[0.0, 0.0]], &[0.0], &pts(&[[0.0, 0.0]]), &CostConfig::default()).unwrap();
        assert_eq!(c, 0.25);
    }

    #[test]
    fn far_obstacles_cost_nothing() {
        let b = BasisMatrix::canonical();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [4.0, 0.0]);
        let obs = pts(&[[2.0, 3.0], [-2.0, -1.0]]);
        let (c, g) = collision_cost_and_grad(&line, &b, &obs, &CostConfig::default());
        assert_eq!(c, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(collision_cost(&line, &b, &Obstacles::default(), &CostConfig::default()), 0.0);
    }

    #[test]
    fn cost_grows_with_d_safe() {
        let b = BasisMatrix::canonical();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [4.0, 0.0]);
        let obs = pts(&[[2.0, 0.8]]);
        let mut prev = 0.0;
        let mut d = 0.5;
        let mut active = false;
        for _ in 0..6 {
            let cfg = CostConfig {
                d_safe: d,
                ..Default::default()
            };
            let c = collision_cost(&line, &b, &obs, &cfg);
            if active {
                assert!(c > prev, "d_safe {d}: {c} <= {prev}");
            }
            active |= c > 0.0;
            prev = c;
            d *= 1.5;
        }
        assert!(active);
    }

    #[test]
    fn dynamic_obstacles_move() {
        // agent crossing the path later than the trajectory passes
        let obs = Obstacles {
            points: vec![],
            dynamic: vec![[2.0, -3.0, 0.0, 1.0]],
        };
        let cfg = CostConfig::default();
        assert_eq!(waypoint_cost(&[[2.0, 0.0]], &[0.0], &obs, &cfg).unwrap(), 0.0);
        let hit = waypoint_cost(&[[2.0, 0.0]], &[3.0], &obs, &cfg).unwrap();
        assert!((hit - 0.8f64.powi(2)).abs() < 1e-12);
        let off = CostConfig {
            include_dynamic: false,
            ..cfg
        };
        let s = Scenario::from_parts(&[], &[[2.0, -3.0, 0.0, 1.0]], [1.0, 0.0], 4, 4).unwrap();
        assert!(Obstacles::from_scenario(&s, off.include_dynamic).is_empty());
    }

    #[test]
    fn translation_leaves_gradient_unchanged() {
        let b = BasisMatrix::canonical();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [4.0, 0.3]);
        let obs = Obstacles {
            points: vec![[2.0, 0.2], [1.0, -0.1]],
            dynamic: vec![[3.0, -0.5, -0.2, 0.1]],
        };
        let cfg = CostConfig::default();
        let (c0, g0) = collision_cost_and_grad(&line, &b, &obs, &cfg);
        let (c1, g1) = collision_cost_and_grad(&line.translated(3.0, -2.0), &b, &obs.translated(3.0, -2.0), &cfg);
        assert!(c0 > 0.0 && (c0 - c1).abs() < 1e-9);
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = BasisMatrix::canonical();
        let cfg = CostConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 20 {
            let end = [rng.random_range(2.0..4.0), rng.random_range(-1.0..1.0)];
            let mut coeffs = TrajectoryCoeffs::line(10, [0.0, 0.0], end);
            for v in coeffs.cx.iter_mut().chain(coeffs.cy.iter_mut()).skip(1) {
                *v += rng.random_range(-0.2..0.2);
            }
            let obs = Obstacles {
                points: (0..5)
                    .map(|_| [rng.random_range(0.5..3.5), rng.random_range(-0.8..0.8)])
                    .collect(),
                dynamic: vec![[rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0), 0.1, -0.1]],
            };
            let (c, g) = collision_cost_and_grad(&coeffs, &b, &obs, &cfg);
            if c == 0.0 {
                continue;
            }
            let x = coeffs.to_flat();
            let h = 1e-6;
            let num: Vec<f64> = (0..x.len())
                .map(|i| {
                    let mut p = x.clone();
                    p[i] += h;
                    let mut m = x.clone();
                    m[i] -= h;
                    let fp = collision_cost(&TrajectoryCoeffs::from_flat(&p).unwrap(), &b, &obs, &cfg);
                    let fm = collision_cost(&TrajectoryCoeffs::from_flat(&m).unwrap(), &b, &obs, &cfg);
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            let err: f64 = g.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(err / scale < 1e-4, "rel err {}", err / scale);
            checked += 1;
        }
    }

    fn scenario_with_points(p: &[[f64; 2]]) -> Scenario {
        let p32: Vec<[f32; 2]> = p.iter().map(|q| [q[0] as f32, q[1] as f32]).collect();
        Scenario::from_parts(&p32, &[], [1.0, 0.0], 128, 10).unwrap()
    }

    #[test]
    fn feasible_input_is_returned_unchanged() {
        let b = BasisMatrix::canonical();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [3.9, 0.0]);
        let s = scenario_with_points(&[[2.0, 2.0]]);
        let r = project_refine(&line, &s, &b, &RefineConfig::default()).unwrap();
        assert!(r.feasible);
        assert_eq!(r.iters_used, 0);
        assert_eq!(r.coeffs, line);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn pushes_around_a_disc() {
        let b = BasisMatrix::canonical();
        let cfg = RefineConfig::default();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [3.9, 0.0]);
        let disc: Vec<[f64; 2]> = (0..16)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 16.0;
                [2.0 + 0.2 * a.cos(), 0.05 + 0.2 * a.sin()]
            })
            .collect();
        let s = scenario_with_points(&disc);
        let r = project_refine(&line, &s, &b, &cfg).unwrap();
        let a = audit(&r.coeffs, &b, &Obstacles::from_scenario(&s, true), &cfg);
        assert!(r.feasible, "{a:?} after {} iters", r.iters_used);
        assert!(a.static_clearance >= cfg.d_safe - 1e-3);
        for w in r.objective_log.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let moved: f64 = r
            .coeffs
            .to_flat()
            .iter()
            .zip(line.to_flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let shove = 2.0 * cfg.d_safe * (b.n_coeffs() as f64).sqrt();
        assert!(moved < shove, "{moved} vs rigid shove {shove}");
    }

    #[test]
    fn slows_a_fast_line() {
        let b = BasisMatrix::canonical();
        let cfg = RefineConfig::default();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [2.0 * 4.9, 0.0]);
        let r = project_refine(&line, &Scenario::empty([1.0, 0.0], &Default::default()), &b, &cfg).unwrap();
        let a = audit(&r.coeffs, &b, &Obstacles::default(), &cfg);
        assert!(a.max_speed <= cfg.v_max + 1e-3, "{a:?}");
        assert!(r.feasible);
    }

    #[test]
    fn rejects_bad_config() {
        let b = BasisMatrix::canonical();
        let line = TrajectoryCoeffs::line(10, [0.0, 0.0], [1.0, 0.0]);
        let cfg = RefineConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(project_refine(&line, &Scenario::empty([1.0, 0.0], &Default::default()), &b, &cfg).is_err());
    }
}
