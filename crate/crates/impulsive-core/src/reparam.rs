//! Conversions between strict-sense and extended (space-time) processes.
//!
//! A strict-sense process lives on a real time window `[t1, t2]` and
//! carries an absolutely continuous control `u` with derivative `du` in
//! the cone. Its extended representative is parameterized by a pseudo-time
//! `s` in `[0, S]`, carries time itself as the state `y0`, and uses the
//! canonical controls `(w0, w)` with `w0 + |w| = 1`, which allows `y0` to
//! stall while `w` keeps acting: an impulse. This module implements the
//! embedding, its inverse on embedded processes, arc-length normalization
//! of non-canonical controls, the process metric, and the strictification
//! construction available for driftless problems.

use crate::dynamics::{self, IntegrateOptions};
use crate::linalg;
use crate::model::{ControlCone, ProblemSpec};
use thiserror::Error;

/// Tolerance used by the process invariant checks.
pub const INVARIANT_TOL: f64 = 1e-9;

/// Error from process construction or conversion.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReparamError {
    /// Field lengths are mutually inconsistent.
    #[error("process shape error: {0}")]
    Shape(String),
    /// A grid that is not strictly increasing at the given node.
    #[error("grid is not strictly increasing at node {0}")]
    GridOrder(usize),
    /// An invariant of the process class fails beyond tolerance.
    #[error("process invariant violated: {0}")]
    Invariant(String),
    /// Inversion applied to a process with a stalled time component.
    #[error("interval {interval} has w0 = {w0:.3e}; not an embedded strict-sense process")]
    NotEmbedded { interval: usize, w0: f64 },
    /// Normalization applied to an interval with no movement at all.
    #[error("interval {0} has w0 + |w| = 0")]
    ZeroSpeed(usize),
    /// Strictification requires a structurally vanishing drift.
    #[error("strictification requires f identically zero")]
    DriftNotZero,
    /// Strictification requires a non-degenerate time window.
    #[error("degenerate time interval: y0(S) - y0(0) = {0:.3e}")]
    DegenerateTime(f64),
    /// Re-integration during strictification failed.
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
}

/// A strict-sense process: trajectory, variation and control of the
/// original problem sampled on a time grid, with piecewise-constant
/// control derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct StrictProcess {
    /// `M + 1` strictly increasing times from `t1` to `t2`.
    pub grid: Vec<f64>,
    /// `(M + 1) x n` state samples.
    pub x: Vec<Vec<f64>>,
    /// `M + 1` variation samples, starting at zero.
    pub v: Vec<f64>,
    /// `(M + 1) x m` control samples.
    pub u: Vec<Vec<f64>>,
    /// `M x m` per-interval control derivatives.
    pub du: Vec<Vec<f64>>,
}

impl StrictProcess {
    pub fn t1(&self) -> f64 {
        self.grid[0]
    }

    pub fn t2(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Number of intervals.
    pub fn intervals(&self) -> usize {
        self.du.len()
    }

    /// Endpoint tuple `(t1, x(t1), t2, x(t2))`.
    pub fn endpoint(&self) -> Vec<f64> {
        let mut z = vec![self.t1()];
        z.extend_from_slice(&self.x[0]);
        z.push(self.t2());
        z.extend_from_slice(self.x.last().unwrap());
        z
    }

    /// Final variation `v(t2)`.
    pub fn variation(&self) -> f64 {
        *self.v.last().unwrap()
    }

    fn check_shape(&self) -> Result<(), ReparamError> {
        let nodes = self.grid.len();
        if nodes < 2 {
            return Err(ReparamError::Shape("grid needs at least two nodes".into()));
        }
        if self.x.len() != nodes || self.v.len() != nodes || self.u.len() != nodes {
            return Err(ReparamError::Shape(format!(
                "{} nodes but x/v/u have {}/{}/{} entries",
                nodes,
                self.x.len(),
                self.v.len(),
                self.u.len()
            )));
        }
        if self.du.len() + 1 != nodes {
            return Err(ReparamError::Shape(format!(
                "{} intervals for {} nodes",
                self.du.len(),
                nodes
            )));
        }
        for k in 0..nodes - 1 {
            if !(self.grid[k + 1] > self.grid[k]) {
                return Err(ReparamError::GridOrder(k + 1));
            }
        }
        Ok(())
    }

    /// Verifies the class invariants: cone membership of every `du_k`,
    /// `v(t1) = 0`, and consistency of `v` and `u` with `du`.
    pub fn check_invariants(&self, cone: &ControlCone) -> Result<(), ReparamError> {
        self.check_shape()?;
        if self.v[0].abs() > INVARIANT_TOL {
            return Err(ReparamError::Invariant(format!("v(t1) = {:.3e}", self.v[0])));
        }
        for (k, du) in self.du.iter().enumerate() {
            let dt = self.grid[k + 1] - self.grid[k];
            if !cone.contains(du, INVARIANT_TOL) {
                return Err(ReparamError::Invariant(format!(
                    "du on interval {k} lies outside the cone"
                )));
            }
            let dv = self.v[k + 1] - self.v[k] - linalg::norm2(du) * dt;
            if dv.abs() > INVARIANT_TOL {
                return Err(ReparamError::Invariant(format!(
                    "variation step {k} off by {dv:.3e}"
                )));
            }
            for j in 0..du.len() {
                let step = self.u[k + 1][j] - self.u[k][j] - du[j] * dt;
                if step.abs() > INVARIANT_TOL {
                    return Err(ReparamError::Invariant(format!(
                        "control integral step {k} component {j} off by {step:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An extended process: space-time trajectory with canonical per-interval
/// controls `(w0, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedProcess {
    /// `N + 1` strictly increasing pseudo-times from `0` to `S`.
    pub grid: Vec<f64>,
    /// Time component, `N + 1` values.
    pub y0: Vec<f64>,
    /// `(N + 1) x n` state samples.
    pub y: Vec<Vec<f64>>,
    /// Variation component, `N + 1` values starting at zero.
    pub nu: Vec<f64>,
    /// `N` per-interval time speeds.
    pub w0: Vec<f64>,
    /// `N x m` per-interval control values.
    pub w: Vec<Vec<f64>>,
}

impl ExtendedProcess {
    pub fn s_final(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn intervals(&self) -> usize {
        self.w0.len()
    }

    /// Endpoint tuple `(y0(0), y(0), y0(S), y(S))`.
    pub fn endpoint(&self) -> Vec<f64> {
        let mut z = vec![self.y0[0]];
        z.extend_from_slice(&self.y[0]);
        z.push(*self.y0.last().unwrap());
        z.extend_from_slice(self.y.last().unwrap());
        z
    }

    /// Final variation `nu(S)`.
    pub fn variation(&self) -> f64 {
        *self.nu.last().unwrap()
    }

    /// Cumulative control integral `phi` with `phi(0) = 0`.
    pub fn control_integral(&self) -> Vec<Vec<f64>> {
        let m = self.w.first().map_or(0, |w| w.len());
        let mut phi = vec![vec![0.0; m]];
        for k in 0..self.w0.len() {
            let ds = self.grid[k + 1] - self.grid[k];
            let prev = phi[k].clone();
            phi.push(
                prev.iter()
                    .zip(&self.w[k])
                    .map(|(a, b)| a + b * ds)
                    .collect(),
            );
        }
        phi
    }

    fn check_shape(&self) -> Result<(), ReparamError> {
        let nodes = self.grid.len();
        if nodes < 2 {
            return Err(ReparamError::Shape("grid needs at least two nodes".into()));
        }
        if self.y0.len() != nodes || self.y.len() != nodes || self.nu.len() != nodes {
            return Err(ReparamError::Shape(format!(
                "{} nodes but y0/y/nu have {}/{}/{} entries",
                nodes,
                self.y0.len(),
                self.y.len(),
                self.nu.len()
            )));
        }
        if self.w0.len() + 1 != nodes || self.w.len() + 1 != nodes {
            return Err(ReparamError::Shape(format!(
                "{}/{} control intervals for {} nodes",
                self.w0.len(),
                self.w.len(),
                nodes
            )));
        }
        for k in 0..nodes - 1 {
            if !(self.grid[k + 1] > self.grid[k]) {
                return Err(ReparamError::GridOrder(k + 1));
            }
        }
        Ok(())
    }

    /// Verifies canonical form, cone membership, monotone variation
    /// starting at zero, consistency of `y0` with `w0`, and the identity
    /// `S = y0(S) - y0(0) + nu(S)`.
    pub fn check_invariants(&self, cone: &ControlCone) -> Result<(), ReparamError> {
        self.check_shape()?;
        if self.grid[0].abs() > INVARIANT_TOL {
            return Err(ReparamError::Invariant(format!(
                "grid starts at {:.3e}, expected 0",
                self.grid[0]
            )));
        }
        if self.nu[0].abs() > INVARIANT_TOL {
            return Err(ReparamError::Invariant(format!("nu(0) = {:.3e}", self.nu[0])));
        }
        for k in 0..self.w0.len() {
            let wnorm = linalg::norm2(&self.w[k]);
            if self.w0[k] < -INVARIANT_TOL {
                return Err(ReparamError::Invariant(format!(
                    "w0 on interval {k} is {:.3e}",
                    self.w0[k]
                )));
            }
            if (self.w0[k] + wnorm - 1.0).abs() > INVARIANT_TOL {
                return Err(ReparamError::Invariant(format!(
                    "interval {k} violates canonical form by {:.3e}",
                    self.w0[k] + wnorm - 1.0
                )));
            }
            if !cone.contains(&self.w[k], INVARIANT_TOL) {
                return Err(ReparamError::Invariant(format!(
                    "w on interval {k} lies outside the cone"
                )));
            }
            if self.nu[k + 1] < self.nu[k] - INVARIANT_TOL {
                return Err(ReparamError::Invariant(format!(
                    "nu decreases on interval {k}"
                )));
            }
            let ds = self.grid[k + 1] - self.grid[k];
            let dy0 = self.y0[k + 1] - self.y0[k] - self.w0[k] * ds;
            if dy0.abs() > INVARIANT_TOL {
                return Err(ReparamError::Invariant(format!(
                    "y0 step {k} off by {dy0:.3e}"
                )));
            }
        }
        let s = self.s_final();
        let identity = s - (self.y0.last().unwrap() - self.y0[0] + self.variation());
        if identity.abs() > INVARIANT_TOL {
            return Err(ReparamError::Invariant(format!(
                "S-identity off by {identity:.3e}"
            )));
        }
        Ok(())
    }
}

/// Embeds a strict-sense process into its extended representative.
///
/// The pseudo-time increments are `(1 + |du_k|) dt_k` and the canonical
/// controls are `(1, du_k) / (1 + |du_k|)`; node states carry over, with
/// `y0` the original time and `nu` the original variation. The output has
/// `w0 > 0` on every interval.
pub fn embed(sp: &StrictProcess) -> Result<ExtendedProcess, ReparamError> {
    sp.check_shape()?;
    let nodes = sp.grid.len();
    let mut grid = Vec::with_capacity(nodes);
    grid.push(0.0);
    let mut w0 = Vec::with_capacity(nodes - 1);
    let mut w = Vec::with_capacity(nodes - 1);
    for (k, du) in sp.du.iter().enumerate() {
        let dt = sp.grid[k + 1] - sp.grid[k];
        let speed = 1.0 + linalg::norm2(du);
        grid.push(grid[k] + speed * dt);
        w0.push(1.0 / speed);
        w.push(du.iter().map(|d| d / speed).collect());
    }
    Ok(ExtendedProcess {
        grid,
        y0: sp.grid.clone(),
        y: sp.x.clone(),
        nu: sp.v.clone(),
        w0,
        w,
    })
}

/// Inverts the embedding on its image.
///
/// Requires `w0 > 0` on every interval; the strict grid is `y0` itself and
/// the control derivative is `w / w0` per interval. The control sample `u`
/// is normalized to start at zero, which fixes the translation freedom of
/// the embedding.
pub fn invert_embedding(ep: &ExtendedProcess) -> Result<StrictProcess, ReparamError> {
    ep.check_shape()?;
    for (k, w0) in ep.w0.iter().enumerate() {
        if *w0 <= 0.0 {
            return Err(ReparamError::NotEmbedded {
                interval: k,
                w0: *w0,
            });
        }
    }
    let m = ep.w.first().map_or(0, |w| w.len());
    let mut du = Vec::with_capacity(ep.w.len());
    let mut u = vec![vec![0.0; m]];
    for k in 0..ep.w.len() {
        let dk: Vec<f64> = ep.w[k].iter().map(|wj| wj / ep.w0[k]).collect();
        let dt = ep.y0[k + 1] - ep.y0[k];
        let next: Vec<f64> = u[k].iter().zip(&dk).map(|(a, b)| a + b * dt).collect();
        u.push(next);
        du.push(dk);
    }
    Ok(StrictProcess {
        grid: ep.y0.clone(),
        x: ep.y.clone(),
        v: ep.nu.clone(),
        u,
        du,
    })
}

/// Rescales a process with non-canonical controls into canonical form.
///
/// Each interval's duration is multiplied by `lambda_k = w0_k + |w_k|` and
/// its controls divided by `lambda_k`; trajectory values at the nodes are
/// unchanged. Canonical input passes through unchanged up to rounding.
pub fn arc_normalize(ep: &ExtendedProcess) -> Result<ExtendedProcess, ReparamError> {
    ep.check_shape()?;
    let nodes = ep.grid.len();
    let mut grid = Vec::with_capacity(nodes);
    grid.push(ep.grid[0]);
    let mut w0 = Vec::with_capacity(nodes - 1);
    let mut w = Vec::with_capacity(nodes - 1);
    for k in 0..nodes - 1 {
        let lambda = ep.w0[k] + linalg::norm2(&ep.w[k]);
        if lambda <= 0.0 {
            return Err(ReparamError::ZeroSpeed(k));
        }
        let ds = ep.grid[k + 1] - ep.grid[k];
        grid.push(grid[k] + lambda * ds);
        w0.push(ep.w0[k] / lambda);
        w.push(ep.w[k].iter().map(|v| v / lambda).collect());
    }
    Ok(ExtendedProcess {
        grid,
        y0: ep.y0.clone(),
        y: ep.y.clone(),
        nu: ep.nu.clone(),
        w0,
        w,
    })
}

/// Samples a piecewise-linear path at `s`, extending constantly outside
/// the grid.
fn sample(grid: &[f64], values: &[f64], s: f64) -> f64 {
    if s <= grid[0] {
        return values[0];
    }
    if s >= *grid.last().unwrap() {
        return *values.last().unwrap();
    }
    let mut lo = 0usize;
    let mut hi = grid.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if grid[mid] <= s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = (s - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] + t * (values[hi] - values[lo])
}

fn merged_nodes(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut nodes: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    nodes.sort_by(|x, y| x.partial_cmp(y).unwrap());
    nodes.dedup();
    nodes
}

/// Distance between two extended processes: time-endpoint gaps plus the
/// sup over a merged grid, with constant extension, of the sum of
/// componentwise gaps of `(y, nu)`.
pub fn d_infty(a: &ExtendedProcess, b: &ExtendedProcess) -> f64 {
    let endpoints = (a.y0[0] - b.y0[0]).abs()
        + (a.y0.last().unwrap() - b.y0.last().unwrap()).abs();
    let n = a.y[0].len();
    let mut sup = 0.0f64;
    for s in merged_nodes(&a.grid, &b.grid) {
        let mut gap = 0.0;
        for i in 0..n {
            let ai: Vec<f64> = a.y.iter().map(|row| row[i]).collect();
            let bi: Vec<f64> = b.y.iter().map(|row| row[i]).collect();
            gap += (sample(&a.grid, &ai, s) - sample(&b.grid, &bi, s)).abs();
        }
        gap += (sample(&a.grid, &a.nu, s) - sample(&b.grid, &b.nu, s)).abs();
        sup = sup.max(gap);
    }
    endpoints + sup
}

/// Distance between two strict processes: time-endpoint gaps plus the sup
/// over a merged time grid, with constant extension, of the sum of
/// componentwise gaps of `(x, v)`.
pub fn d_infty_strict(a: &StrictProcess, b: &StrictProcess) -> f64 {
    let endpoints = (a.t1() - b.t1()).abs() + (a.t2() - b.t2()).abs();
    let n = a.x[0].len();
    let mut sup = 0.0f64;
    for t in merged_nodes(&a.grid, &b.grid) {
        let mut gap = 0.0;
        for i in 0..n {
            let ai: Vec<f64> = a.x.iter().map(|row| row[i]).collect();
            let bi: Vec<f64> = b.x.iter().map(|row| row[i]).collect();
            gap += (sample(&a.grid, &ai, t) - sample(&b.grid, &bi, t)).abs();
        }
        gap += (sample(&a.grid, &a.v, t) - sample(&b.grid, &b.v, t)).abs();
        sup = sup.max(gap);
    }
    endpoints + sup
}

/// Converts an extended process of a driftless problem into a strict-sense
/// process with the same endpoints.
///
/// The time component is replaced by the affine map from `[0, S]` onto
/// `[t1, t2]`, pseudo-time is rescaled so the result is canonical, states
/// are re-integrated (admissible because the drift vanishes, so states
/// depend on time only through the controls), and the embedding is
/// inverted; the resulting time speed is strictly positive everywhere.
pub fn no_drift_strictify(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
) -> Result<StrictProcess, ReparamError> {
    ep.check_shape()?;
    if !p.fields.drift_is_zero() {
        return Err(ReparamError::DriftNotZero);
    }
    let t1 = ep.y0[0];
    let t2 = *ep.y0.last().unwrap();
    let s_total = ep.s_final() - ep.grid[0];
    if !(t2 - t1 > 0.0) {
        return Err(ReparamError::DegenerateTime(t2 - t1));
    }
    let c0 = (t2 - t1) / s_total;
    let nodes = ep.grid.len();
    let mut grid = Vec::with_capacity(nodes);
    grid.push(0.0);
    let mut w0 = Vec::with_capacity(nodes - 1);
    let mut w = Vec::with_capacity(nodes - 1);
    for k in 0..nodes - 1 {
        let speed = c0 + linalg::norm2(&ep.w[k]);
        let ds = ep.grid[k + 1] - ep.grid[k];
        grid.push(grid[k] + speed * ds);
        w0.push(c0 / speed);
        w.push(ep.w[k].iter().map(|v| v / speed).collect());
    }
    let strict_ep = dynamics::integrate_extended(
        p,
        &grid,
        &w0,
        &w,
        t1,
        &ep.y[0],
        &IntegrateOptions::default(),
    )?;
    invert_embedding(&strict_ep)
}
