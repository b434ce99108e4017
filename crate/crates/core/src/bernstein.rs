//! Bernstein-basis trajectory algebra.
//!
//! A planar trajectory of order `n` is described by `n + 1` control points per
//! axis. Sampling it on a fixed time grid is a matrix product: the basis
//! matrix `P` (one row per waypoint, one column per basis function) maps the
//! control points `cx`, `cy` to waypoint coordinates. `dP` and `ddP` do the
//! same for velocity and acceleration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 10;
pub const DEFAULT_WAYPOINTS: usize = 50;
pub const DEFAULT_DT: f64 = 0.1;

const RANK_TOLERANCE: f64 = 1e-9;

/// Basis functions and their time derivatives sampled on a time grid.
///
/// Matrices are stored row-major with `order + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    order: usize,
    times: Vec<f64>,
    p: Vec<f64>,
    dp: Vec<f64>,
    ddp: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// `B_j^m(s)`, zero outside `0..=m` (and for negative degrees).
fn bernstein(m: isize, j: isize, s: f64) -> f64 {
    if m < 0 || j < 0 || j > m {
        return 0.0;
    }
    let (m, j) = (m as usize, j as usize);
    binomial(m, j) * s.powi(j as i32) * (1.0 - s).powi((m - j) as i32)
}

impl BasisMatrix {
    pub fn new(order: usize, times: &[f64]) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("basis order must be at least 1"));
        }
        if times.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 time samples, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time samples must be finite"));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "times must be strictly increasing (t[{}]={} >= t[{}]={})",
                i,
                times[i],
                i + 1,
                times[i + 1]
            )));
        }

        let t0 = times[0];
        let span = times[times.len() - 1] - t0;
        let n = order as isize;
        let cols = order + 1;
        let rows = times.len();
        let mut p = vec![0.0; rows * cols];
        let mut dp = vec![0.0; rows * cols];
        let mut ddp = vec![0.0; rows * cols];
        let d1 = n as f64 / span;
        let d2 = (n * (n - 1)) as f64 / (span * span);

        for (i, &t) in times.iter().enumerate() {
            // clamp guards the last row against rounding just past 1
            let s = ((t - t0) / span).clamp(0.0, 1.0);
            for j in 0..cols {
                let ji = j as isize;
                p[i * cols + j] = bernstein(n, ji, s);
                dp[i * cols + j] = d1 * (bernstein(n - 1, ji - 1, s) - bernstein(n - 1, ji, s));
                ddp[i * cols + j] = d2
                    * (bernstein(n - 2, ji - 2, s) - 2.0 * bernstein(n - 2, ji - 1, s)
                        + bernstein(n - 2, ji, s));
            }
        }

        Ok(Self {
            order,
            times: times.to_vec(),
            p,
            dp,
            ddp,
        })
    }

    /// Uniform grid `t_i = i * dt` for `i in 0..n_waypoints`.
    pub fn uniform(order: usize, n_waypoints: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        let times: Vec<f64> = (0..n_waypoints).map(|i| i as f64 * dt).collect();
        Self::new(order, &times)
    }

    /// The grid used throughout the planner: order 10, 50 waypoints, 0.1 s apart.
    pub fn canonical() -> Self {
        Self::uniform(DEFAULT_ORDER, DEFAULT_WAYPOINTS, DEFAULT_DT)
            .expect("canonical basis parameters are valid")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_coeffs(&self) -> usize {
        self.order + 1
    }

    pub fn n_waypoints(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn p_row(&self, i: usize) -> &[f64] {
        let c = self.n_coeffs();
        &self.p[i * c..(i + 1) * c]
    }

    pub fn dp_row(&self, i: usize) -> &[f64] {
        let c = self.n_coeffs();
        &self.dp[i * c..(i + 1) * c]
    }

    pub fn ddp_row(&self, i: usize) -> &[f64] {
        let c = self.n_coeffs();
        &self.ddp[i * c..(i + 1) * c]
    }

    fn apply(&self, m: &[f64], coeffs: &TrajectoryCoeffs) -> Vec<[f64; 2]> {
        let c = self.n_coeffs();
        m.chunks_exact(c)
            .map(|row| [dot(row, &coeffs.cx), dot(row, &coeffs.cy)])
            .collect()
    }

    /// Waypoints only, no derivative bookkeeping.
    pub fn positions(&self, coeffs: &TrajectoryCoeffs) -> Vec<[f64; 2]> {
        self.apply(&self.p, coeffs)
    }

    pub fn velocities(&self, coeffs: &TrajectoryCoeffs) -> Vec<[f64; 2]> {
        self.apply(&self.dp, coeffs)
    }

    pub fn accelerations(&self, coeffs: &TrajectoryCoeffs) -> Vec<[f64; 2]> {
        self.apply(&self.ddp, coeffs)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Control points of a planar Bernstein trajectory, in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCoeffs {
    pub cx: Vec<f64>,
    pub cy: Vec<f64>,
}

impl TrajectoryCoeffs {
    pub fn new(cx: Vec<f64>, cy: Vec<f64>) -> Result<Self> {
        if cx.len() != cy.len() {
            return Err(Error::invalid(format!(
                "cx has {} entries but cy has {}",
                cx.len(),
                cy.len()
            )));
        }
        if cx.len() < 2 {
            return Err(Error::invalid("trajectory needs at least 2 control points"));
        }
        if cx.iter().chain(&cy).any(|v| !v.is_finite()) {
            return Err(Error::invalid("control points must be finite"));
        }
        Ok(Self { cx, cy })
    }

    /// All control points at `(x, y)`.
    pub fn constant(order: usize, x: f64, y: f64) -> Self {
        Self {
            cx: vec![x; order + 1],
            cy: vec![y; order + 1],
        }
    }

    /// Control points evenly spaced from `start` to `end`: a straight line
    /// traversed at constant speed.
    pub fn line(order: usize, start: [f64; 2], end: [f64; 2]) -> Self {
        let f = |a: f64, b: f64| {
            (0..=order)
                .map(|j| a + (b - a) * j as f64 / order as f64)
                .collect()
        };
        Self {
            cx: f(start[0], end[0]),
            cy: f(start[1], end[1]),
        }
    }

    pub fn order(&self) -> usize {
        self.cx.len() - 1
    }

    /// `[cx; cy]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.cx.clone();
        v.extend_from_slice(&self.cy);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::invalid(format!(
                "flat coefficient vector has odd length {}",
                flat.len()
            )));
        }
        let h = flat.len() / 2;
        Self::new(flat[..h].to_vec(), flat[h..].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.cx.iter().chain(&self.cy).all(|v| v.is_finite())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx.iter().map(|v| v + dx).collect(),
            cy: self.cy.iter().map(|v| v + dy).collect(),
        }
    }
}

/// Sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub xy: Vec<[f64; 2]>,
    pub vel: Option<Vec<[f64; 2]>>,
    pub acc: Option<Vec<[f64; 2]>>,
}

impl Trajectory {
    /// Trajectory from raw waypoints without derivative information.
    pub fn from_waypoints(times: Vec<f64>, xy: Vec<[f64; 2]>) -> Result<Self> {
        if times.len() != xy.len() {
            return Err(Error::invalid(format!(
                "{} times but {} waypoints",
                times.len(),
                xy.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        if xy.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waypoints must be finite"));
        }
        Ok(Self {
            times,
            xy,
            vel: None,
            acc: None,
        })
    }

    pub fn len(&self) -> usize {
        self.xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy.is_empty()
    }
}

pub fn eval_trajectory(
    coeffs: &TrajectoryCoeffs,
    basis: &BasisMatrix,
    with_derivatives: bool,
) -> Result<Trajectory> {
    if coeffs.cx.len() != basis.n_coeffs() || coeffs.cy.len() != basis.n_coeffs() {
        return Err(Error::invalid(format!(
            "coefficient order {} does not match basis order {}",
            coeffs.cx.len().saturating_sub(1),
            basis.order()
        )));
    }
    let xy = basis.positions(coeffs);
    let (vel, acc) = if with_derivatives {
        (
            Some(basis.velocities(coeffs)),
            Some(basis.accelerations(coeffs)),
        )
    } else {
        (None, None)
    };
    Ok(Trajectory {
        times: basis.times.clone(),
        xy,
        vel,
        acc,
    })
}

/// Least-squares fit result.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coeffs: TrajectoryCoeffs,
    /// Euclidean norm of the stacked residual `P c - w` over both axes.
    pub residual: f64,
}

/// Per-axis least-squares fit of control points to waypoints sampled on
/// `basis`'s grid, via the SVD.
pub fn fit_coeffs(waypoints: &[[f64; 2]], basis: &BasisMatrix) -> Result<FitResult> {
    let rows = basis.n_waypoints();
    let cols = basis.n_coeffs();
    if waypoints.len() != rows {
        return Err(Error::invalid(format!(
            "{} waypoints for a basis with {} rows",
            waypoints.len(),
            rows
        )));
    }
    if rows < cols {
        return Err(Error::invalid(format!(
            "need at least {cols} waypoints to fit order {}, got {rows}",
            basis.order()
        )));
    }
    if waypoints.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("waypoints must be finite"));
    }

    // least squares through the SVD; normal equations lose half the digits
    let p = DMatrix::from_row_slice(rows, cols, &basis.p);
    let svd = p.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if (min / max).powi(2) < RANK_TOLERANCE {
        return Err(Error::Numerical(format!(
            "basis matrix is rank deficient on this time grid \
             (singular value ratio {:.3e}, times {:?}..{:?})",
            min / max,
            basis.times.first(),
            basis.times.last()
        )));
    }

    let w = DMatrix::from_fn(rows, 2, |i, j| waypoints[i][j]);
    let c = svd.solve(&w, 0.0).map_err(|e| Error::Numerical(e.to_string()))?;
    let (cx, cy) = (c.column(0), c.column(1));
    let rx = &p * cx - w.column(0);
    let ry = &p * cy - w.column(1);
    let residual = (rx.norm_squared() + ry.norm_squared()).sqrt();

    Ok(FitResult {
        coeffs: TrajectoryCoeffs::new(cx.iter().copied().collect(), cy.iter().copied().collect())?,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_one_is_linear_interpolation() {
        let b = BasisMatrix::new(1, &[0.0, 0.5, 1.0]).unwrap();
        let expect = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]];
        for (i, row) in expect.iter().enumerate() {
            for j in 0..2 {
                assert!((b.p_row(i)[j] - row[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn order_two_first_derivative_at_start() {
        // B0 = (1-s)^2, B1 = 2s(1-s), B2 = s^2 -> d/ds at 0 = [-2, 2, 0]
        let b = BasisMatrix::new(2, &[0.0, 2.0]).unwrap();
        let expect = [-2.0 / 2.0, 2.0 / 2.0, 0.0];
        for j in 0..3 {
            assert!((b.dp_row(0)[j] - expect[j]).abs() < 1e-14);
        }
        // B'' = [2, -4, 2] / span^2 everywhere
        for j in 0..3 {
            assert!((b.ddp_row(1)[j] - [2.0, -4.0, 2.0][j] / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn canonical_rows_sum_to_one() {
        let b = BasisMatrix::uniform(10, 51, 0.1).unwrap();
        for i in 0..b.n_waypoints() {
            let s: f64 = b.p_row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            let ds: f64 = b.dp_row(i).iter().sum();
            assert!(ds.abs() < 1e-9);
            assert!(b.p_row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(b.p_row(0)[0], 1.0);
        assert_eq!(b.p_row(50)[10], 1.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            BasisMatrix::new(0, &[0.0, 1.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(BasisMatrix::new(3, &[0.0, 1.0, 1.0]).is_err());
        assert!(BasisMatrix::new(3, &[0.0, 2.0, 1.0]).is_err());
        assert!(BasisMatrix::new(3, &[0.0]).is_err());
    }

    #[test]
    fn constant_curve_has_zero_velocity() {
        let b = BasisMatrix::canonical();
        let c = TrajectoryCoeffs::constant(10, 3.0, -2.0);
        let tr = eval_trajectory(&c, &b, true).unwrap();
        for (p, v) in tr.xy.iter().zip(tr.vel.as_ref().unwrap()) {
            assert!((p[0] - 3.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
            assert!(v[0].abs() < 1e-9 && v[1].abs() < 1e-9);
        }
    }

    #[test]
    fn linear_midpoint() {
        let b = BasisMatrix::new(1, &[0.0, 0.5, 1.0]).unwrap();
        let c = TrajectoryCoeffs::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let tr = eval_trajectory(&c, &b, false).unwrap();
        assert_eq!(tr.xy[1], [0.5, 0.0]);
        assert!(tr.vel.is_none());
    }

    #[test]
    fn order_mismatch_rejected() {
        let b = BasisMatrix::canonical();
        let c = TrajectoryCoeffs::constant(5, 0.0, 0.0);
        assert!(matches!(
            eval_trajectory(&c, &b, false),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fit_origin() {
        let b = BasisMatrix::canonical();
        let fit = fit_coeffs(&vec![[0.0, 0.0]; 50], &b).unwrap();
        assert!(fit.coeffs.to_flat().iter().all(|v| v.abs() < 1e-12));
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn fit_polynomial_exactly() {
        let b = BasisMatrix::canonical();
        let wps: Vec<[f64; 2]> = b
            .times()
            .iter()
            .map(|&t| [1.0 + 0.5 * t - 0.1 * t * t * t, (0.3 * t).powi(4) - t])
            .collect();
        let fit = fit_coeffs(&wps, &b).unwrap();
        let tr = eval_trajectory(&fit.coeffs, &b, false).unwrap();
        for (a, w) in tr.xy.iter().zip(&wps) {
            assert!((a[0] - w[0]).abs() < 1e-9 && (a[1] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_needs_enough_waypoints() {
        let b = BasisMatrix::uniform(10, 8, 0.1).unwrap();
        assert!(matches!(
            fit_coeffs(&vec![[0.0, 0.0]; 8], &b),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fit_reports_clustered_grid() {
        // distinct but numerically collapsed samples
        let mut times = vec![0.0];
        for i in 1..20 {
            times.push(1e-9 * i as f64);
        }
        times.push(1.0);
        let b = BasisMatrix::new(10, &times).unwrap();
        let err = fit_coeffs(&vec![[0.0, 0.0]; 21], &b).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn flat_round_trip() {
        let c = TrajectoryCoeffs::line(3, [0.0, 0.0], [3.0, 1.5]);
        assert_eq!(c.cx, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(TrajectoryCoeffs::from_flat(&c.to_flat()).unwrap(), c);
        assert!(TrajectoryCoeffs::from_flat(&[1.0, 2.0, 3.0]).is_err());
    }
}
