//! Numerical integration of the extended and strict-sense dynamics,
//! adjoint (covector) propagation, and the linear transition map of the
//! adjoint flow.
//!
//! All integrators use fixed-step classical Runge-Kutta within each grid
//! interval; the controls are piecewise constant, so the only integration
//! error comes from state dependence of the fields. The variation
//! component is advanced exactly, since its rate is the constant `|w_k|`
//! on each interval.

use crate::expr::{Compiled, EvalError};
use crate::model::{ProblemSpec, VectorFieldSet};
use crate::reparam::{ExtendedProcess, StrictProcess};
use thiserror::Error;

/// Error from an integration routine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    /// Mutually inconsistent input lengths.
    #[error("dynamics shape error: {0}")]
    Shape(String),
    /// The state left the safety box; the trajectory is diverging.
    #[error("state norm {norm:.3e} exceeded the safety bound {bound:.1e} at s = {s:.6}")]
    SafetyBox { s: f64, norm: f64, bound: f64 },
    /// A field expression failed to evaluate.
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Options shared by the integrators.
#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    /// Runge-Kutta substeps per grid interval.
    pub substeps: usize,
    /// Abort when any state component exceeds this magnitude.
    pub safety_box: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            substeps: 8,
            safety_box: 1e6,
        }
    }
}

/// Compiled right-hand side of a vector field set, reusable across many
/// evaluations without re-walking expression trees.
pub struct CompiledFields {
    n: usize,
    m: usize,
    f: Vec<Compiled>,
    g: Vec<Vec<Compiled>>,
    stack_depth: usize,
}

impl CompiledFields {
    pub fn new(fields: &VectorFieldSet) -> Self {
        let f: Vec<Compiled> = fields.f.iter().map(Compiled::new).collect();
        let g: Vec<Vec<Compiled>> = fields
            .g
            .iter()
            .map(|col| col.iter().map(Compiled::new).collect())
            .collect();
        let stack_depth = f
            .iter()
            .chain(g.iter().flatten())
            .map(|c| c.stack_depth())
            .max()
            .unwrap_or(0);
        CompiledFields {
            n: fields.n,
            m: fields.m,
            f,
            g,
            stack_depth,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Fresh scratch stack large enough for any field in the set.
    pub fn scratch_stack(&self) -> Vec<f64> {
        vec![0.0; self.stack_depth]
    }

    /// Writes `f(t, x) * w0 + sum_j g_j(t, x) * w_j` into `out`.
    ///
    /// `env` must have length `1 + n` and `stack` is scratch space; both
    /// are reused across calls to avoid allocation.
    pub fn rhs(
        &self,
        t: f64,
        x: &[f64],
        w0: f64,
        w: &[f64],
        out: &mut [f64],
        env: &mut [f64],
        stack: &mut [f64],
    ) -> Result<(), EvalError> {
        env[0] = t;
        env[1..1 + self.n].copy_from_slice(x);
        for i in 0..self.n {
            let mut acc = if w0 != 0.0 {
                w0 * self.f[i].eval_with(env, stack)?
            } else {
                0.0
            };
            for j in 0..self.m {
                if w[j] != 0.0 {
                    acc += w[j] * self.g[j][i].eval_with(env, stack)?;
                }
            }
            out[i] = acc;
        }
        Ok(())
    }

    /// Evaluates the drift `f(t, x)` into `out`.
    pub fn drift(
        &self,
        t: f64,
        x: &[f64],
        out: &mut [f64],
        env: &mut [f64],
        stack: &mut [f64],
    ) -> Result<(), EvalError> {
        env[0] = t;
        env[1..1 + self.n].copy_from_slice(x);
        for i in 0..self.n {
            out[i] = self.f[i].eval_with(env, stack)?;
        }
        Ok(())
    }

    /// Evaluates the control column `g_j(t, x)` into `out`.
    pub fn gate(
        &self,
        j: usize,
        t: f64,
        x: &[f64],
        out: &mut [f64],
        env: &mut [f64],
        stack: &mut [f64],
    ) -> Result<(), EvalError> {
        env[0] = t;
        env[1..1 + self.n].copy_from_slice(x);
        for i in 0..self.n {
            out[i] = self.g[j][i].eval_with(env, stack)?;
        }
        Ok(())
    }
}

/// Evaluates the drift and all control columns of a field set at a point,
/// returning `(f, [g_1, ..., g_m])`.
pub fn eval_fields(
    fields: &VectorFieldSet,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), EvalError> {
    let mut env = vec![t];
    env.extend_from_slice(x);
    let f = fields
        .f
        .iter()
        .map(|e| e.eval(&env))
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let g = fields
        .g
        .iter()
        .map(|col| col.iter().map(|e| e.eval(&env)).collect())
        .collect::<Result<Vec<Vec<f64>>, EvalError>>()?;
    Ok((f, g))
}

fn check_box(s: f64, x: &[f64], bound: f64) -> Result<(), DynamicsError> {
    for v in x {
        if !v.is_finite() || v.abs() > bound {
            let norm = x.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            return Err(DynamicsError::SafetyBox { s, norm, bound });
        }
    }
    Ok(())
}

/// One classical Runge-Kutta step of the coupled `(y0, y)` system with
/// constant controls over the step.
#[allow(clippy::too_many_arguments)]
fn rk4_step(
    cf: &CompiledFields,
    t: f64,
    x: &mut Vec<f64>,
    w0: f64,
    w: &[f64],
    h: f64,
    env: &mut [f64],
    stack: &mut [f64],
    scratch: &mut RkScratch,
) -> Result<f64, EvalError> {
    let n = x.len();
    cf.rhs(t, x, w0, w, &mut scratch.k1, env, stack)?;
    for i in 0..n {
        scratch.tmp[i] = x[i] + 0.5 * h * scratch.k1[i];
    }
    cf.rhs(t + 0.5 * h * w0, &scratch.tmp, w0, w, &mut scratch.k2, env, stack)?;
    for i in 0..n {
        scratch.tmp[i] = x[i] + 0.5 * h * scratch.k2[i];
    }
    cf.rhs(t + 0.5 * h * w0, &scratch.tmp, w0, w, &mut scratch.k3, env, stack)?;
    for i in 0..n {
        scratch.tmp[i] = x[i] + h * scratch.k3[i];
    }
    cf.rhs(t + h * w0, &scratch.tmp, w0, w, &mut scratch.k4, env, stack)?;
    for i in 0..n {
        x[i] += h / 6.0
            * (scratch.k1[i] + 2.0 * scratch.k2[i] + 2.0 * scratch.k3[i] + scratch.k4[i]);
    }
    Ok(t + h * w0)
}

struct RkScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl RkScratch {
    fn new(n: usize) -> Self {
        RkScratch {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// Integrates the extended dynamics over a pseudo-time grid with
/// piecewise-constant controls, using a precompiled field set.
#[allow(clippy::too_many_arguments)]
pub fn integrate_extended_compiled(
    cf: &CompiledFields,
    grid: &[f64],
    w0: &[f64],
    w: &[Vec<f64>],
    y0_init: f64,
    y_init: &[f64],
    opts: &IntegrateOptions,
) -> Result<ExtendedProcess, DynamicsError> {
    let n = cf.n();
    let m = cf.m();
    if grid.len() < 2 {
        return Err(DynamicsError::Shape("grid needs at least two nodes".into()));
    }
    let intervals = grid.len() - 1;
    if w0.len() != intervals || w.len() != intervals {
        return Err(DynamicsError::Shape(format!(
            "{} intervals but {}/{} control entries",
            intervals,
            w0.len(),
            w.len()
        )));
    }
    if y_init.len() != n {
        return Err(DynamicsError::Shape(format!(
            "initial state has {} entries, expected {}",
            y_init.len(),
            n
        )));
    }
    for (k, wk) in w.iter().enumerate() {
        if wk.len() != m {
            return Err(DynamicsError::Shape(format!(
                "control on interval {k} has {} entries, expected {m}",
                wk.len()
            )));
        }
    }
    let substeps = opts.substeps.max(1);
    let mut env = vec![0.0; 1 + n];
    let mut stack = cf.scratch_stack();
    let mut scratch = RkScratch::new(n);
    let mut y0 = vec![y0_init];
    let mut y = vec![y_init.to_vec()];
    let mut nu = vec![0.0];
    let mut t = y0_init;
    let mut x = y_init.to_vec();
    check_box(grid[0], &x, opts.safety_box)?;
    for k in 0..intervals {
        let ds = grid[k + 1] - grid[k];
        if !(ds > 0.0) {
            return Err(DynamicsError::Shape(format!(
                "grid not increasing at node {}",
                k + 1
            )));
        }
        let h = ds / substeps as f64;
        for i in 0..substeps {
            t = rk4_step(cf, t, &mut x, w0[k], &w[k], h, &mut env, &mut stack, &mut scratch)?;
            check_box(grid[k] + (i + 1) as f64 * h, &x, opts.safety_box)?;
        }
        // Force the exactly integrable time component to its exact value.
        t = y0[k] + w0[k] * ds;
        y0.push(t);
        y.push(x.clone());
        nu.push(nu[k] + crate::linalg::norm2(&w[k]) * ds);
    }
    Ok(ExtendedProcess {
        grid: grid.to_vec(),
        y0,
        y,
        nu,
        w0: w0.to_vec(),
        w: w.to_vec(),
    })
}

/// Integrates the extended dynamics, compiling the fields on the fly.
pub fn integrate_extended(
    p: &ProblemSpec,
    grid: &[f64],
    w0: &[f64],
    w: &[Vec<f64>],
    y0_init: f64,
    y_init: &[f64],
    opts: &IntegrateOptions,
) -> Result<ExtendedProcess, DynamicsError> {
    let cf = CompiledFields::new(&p.fields);
    integrate_extended_compiled(&cf, grid, w0, w, y0_init, y_init, opts)
}

/// Integrates the strict-sense dynamics over a time grid with
/// piecewise-constant control derivative.
pub fn integrate_strict(
    p: &ProblemSpec,
    grid: &[f64],
    du: &[Vec<f64>],
    x_init: &[f64],
    opts: &IntegrateOptions,
) -> Result<StrictProcess, DynamicsError> {
    let cf = CompiledFields::new(&p.fields);
    let n = cf.n();
    let m = cf.m();
    if grid.len() < 2 || du.len() + 1 != grid.len() {
        return Err(DynamicsError::Shape(format!(
            "{} intervals for {} nodes",
            du.len(),
            grid.len()
        )));
    }
    if x_init.len() != n {
        return Err(DynamicsError::Shape(format!(
            "initial state has {} entries, expected {}",
            x_init.len(),
            n
        )));
    }
    let substeps = opts.substeps.max(1);
    let mut env = vec![0.0; 1 + n];
    let mut stack = cf.scratch_stack();
    let mut scratch = RkScratch::new(n);
    let mut x_nodes = vec![x_init.to_vec()];
    let mut v = vec![0.0];
    let mut u = vec![vec![0.0; m]];
    let mut x = x_init.to_vec();
    check_box(grid[0], &x, opts.safety_box)?;
    for k in 0..du.len() {
        if du[k].len() != m {
            return Err(DynamicsError::Shape(format!(
                "control derivative on interval {k} has {} entries, expected {m}",
                du[k].len()
            )));
        }
        let dt = grid[k + 1] - grid[k];
        if !(dt > 0.0) {
            return Err(DynamicsError::Shape(format!(
                "grid not increasing at node {}",
                k + 1
            )));
        }
        let h = dt / substeps as f64;
        let mut t = grid[k];
        for _ in 0..substeps {
            t = rk4_step(&cf, t, &mut x, 1.0, &du[k], h, &mut env, &mut stack, &mut scratch)?;
            check_box(t, &x, opts.safety_box)?;
        }
        x_nodes.push(x.clone());
        v.push(v[k] + crate::linalg::norm2(&du[k]) * dt);
        u.push(u[k].iter().zip(&du[k]).map(|(a, b)| a + b * dt).collect());
    }
    Ok(StrictProcess {
        grid: grid.to_vec(),
        x: x_nodes,
        v,
        u,
        du: du.to_vec(),
    })
}

/// Reusable endpoint integrator for optimization loops: integrates the
/// extended dynamics over a uniform pseudo-time grid and returns only
/// the terminal values, reusing internal buffers across calls.
pub struct EndpointIntegrator {
    cf: CompiledFields,
    env: Vec<f64>,
    stack: Vec<f64>,
    scratch: RkScratch,
    x: Vec<f64>,
}

impl EndpointIntegrator {
    pub fn new(fields: &VectorFieldSet) -> Self {
        let cf = CompiledFields::new(fields);
        let n = cf.n();
        let env = vec![0.0; 1 + n];
        let stack = cf.scratch_stack();
        EndpointIntegrator {
            cf,
            env,
            stack,
            scratch: RkScratch::new(n),
            x: vec![0.0; n],
        }
    }

    pub fn fields(&self) -> &CompiledFields {
        &self.cf
    }

    /// Terminal state left behind by the last `run_uniform` call.
    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Mutable access to the terminal-state buffer, letting callers that
    /// integrated through another route stage a state for `state`.
    pub fn state_mut(&mut self) -> &mut [f64] {
        &mut self.x
    }

    /// Integrates over `w0.len()` equal intervals spanning `[0, s_total]`
    /// and returns `(y0_end, nu_end)`; the terminal state is available
    /// through `state`.
    pub fn run_uniform(
        &mut self,
        s_total: f64,
        w0: &[f64],
        w: &[Vec<f64>],
        y0_init: f64,
        y_init: &[f64],
        substeps: usize,
        safety_box: f64,
    ) -> Result<(f64, f64), DynamicsError> {
        let intervals = w0.len();
        if intervals == 0 || w.len() != intervals {
            return Err(DynamicsError::Shape(format!(
                "{} drift weights but {} control rows",
                intervals,
                w.len()
            )));
        }
        if !(s_total > 0.0) {
            return Err(DynamicsError::Shape(format!(
                "pseudo-time horizon {s_total} is not positive"
            )));
        }
        if y_init.len() != self.x.len() {
            return Err(DynamicsError::Shape(format!(
                "initial state has {} entries, expected {}",
                y_init.len(),
                self.x.len()
            )));
        }
        let substeps = substeps.max(1);
        let ds = s_total / intervals as f64;
        let h = ds / substeps as f64;
        self.x.copy_from_slice(y_init);
        let mut t = y0_init;
        let mut y0 = y0_init;
        let mut nu = 0.0;
        check_box(0.0, &self.x, safety_box)?;
        for k in 0..intervals {
            for i in 0..substeps {
                t = rk4_step(
                    &self.cf,
                    t,
                    &mut self.x,
                    w0[k],
                    &w[k],
                    h,
                    &mut self.env,
                    &mut self.stack,
                    &mut self.scratch,
                )?;
                check_box(k as f64 * ds + (i + 1) as f64 * h, &self.x, safety_box)?;
            }
            y0 += w0[k] * ds;
            t = y0;
            nu += crate::linalg::norm2(&w[k]) * ds;
        }
        Ok((y0, nu))
    }
}

/// Compiled partial derivatives of a field set with respect to time and
/// state, used by the adjoint integrator.
pub struct CompiledJacobians {
    n: usize,
    m: usize,
    /// `df[i][l]` is the partial of `f_i` with respect to variable `l`
    /// (0 is time, `1 + l` is state `l`).
    df: Vec<Vec<Compiled>>,
    /// `dg[j][i][l]` likewise for column `g_j`.
    dg: Vec<Vec<Vec<Compiled>>>,
    stack_depth: usize,
}

impl CompiledJacobians {
    pub fn new(fields: &VectorFieldSet) -> Self {
        let vars = 1 + fields.n;
        let df: Vec<Vec<Compiled>> = fields
            .f
            .iter()
            .map(|e| (0..vars).map(|l| Compiled::new(&e.differentiate(l))).collect())
            .collect();
        let dg: Vec<Vec<Vec<Compiled>>> = fields
            .g
            .iter()
            .map(|col| {
                col.iter()
                    .map(|e| {
                        (0..vars)
                            .map(|l| Compiled::new(&e.differentiate(l)))
                            .collect::<Vec<Compiled>>()
                    })
                    .collect()
            })
            .collect();
        let stack_depth = df
            .iter()
            .flatten()
            .chain(dg.iter().flatten().flatten())
            .map(|c| c.stack_depth())
            .max()
            .unwrap_or(0);
        CompiledJacobians {
            n: fields.n,
            m: fields.m,
            df,
            dg,
            stack_depth,
        }
    }

    /// Fresh scratch stack large enough for any partial in the set.
    pub fn scratch_stack(&self) -> Vec<f64> {
        vec![0.0; self.stack_depth]
    }

    /// Writes the matrix `A` with `A[i][l] = d(f_i w0 + sum_j g_{ji} w_j) / d var_l`
    /// at `(t, x)`, where variable 0 is time; `A` is `n x (1 + n)` row-major.
    fn combined(
        &self,
        t: f64,
        x: &[f64],
        w0: f64,
        w: &[f64],
        a: &mut [f64],
        env: &mut [f64],
        stack: &mut [f64],
    ) -> Result<(), EvalError> {
        env[0] = t;
        env[1..1 + self.n].copy_from_slice(x);
        let cols = 1 + self.n;
        for i in 0..self.n {
            for l in 0..cols {
                let mut acc = if w0 != 0.0 {
                    w0 * self.df[i][l].eval_with(env, stack)?
                } else {
                    0.0
                };
                for j in 0..self.m {
                    if w[j] != 0.0 {
                        acc += w[j] * self.dg[j][i][l].eval_with(env, stack)?;
                    }
                }
                a[i * cols + l] = acc;
            }
        }
        Ok(())
    }
}

/// Adjoint trajectory: node samples of the time covector `p0` and the
/// state covector `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub p0: Vec<f64>,
    pub p: Vec<Vec<f64>>,
}

/// Cubic Hermite interpolant of the state inside one grid interval, built
/// from endpoint values and endpoint derivatives.
struct Hermite {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    s_lo: f64,
    ds: f64,
}

impl Hermite {
    fn new(s_lo: f64, ds: f64, y0: &[f64], d0: &[f64], y1: &[f64], d1: &[f64]) -> Self {
        let n = y0.len();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            // Coefficients in the local coordinate q = (s - s_lo) / ds.
            a[i] = y0[i];
            b[i] = d0[i] * ds;
            c[i] = 3.0 * (y1[i] - y0[i]) - (2.0 * d0[i] + d1[i]) * ds;
            d[i] = 2.0 * (y0[i] - y1[i]) + (d0[i] + d1[i]) * ds;
        }
        Hermite { a, b, c, d, s_lo, ds }
    }

    fn eval(&self, s: f64, out: &mut [f64]) {
        let q = (s - self.s_lo) / self.ds;
        for i in 0..out.len() {
            out[i] = self.a[i] + q * (self.b[i] + q * (self.c[i] + q * self.d[i]));
        }
    }
}

fn build_hermites(
    cf: &CompiledFields,
    ep: &ExtendedProcess,
) -> Result<Vec<Hermite>, DynamicsError> {
    let n = cf.n();
    if ep.y[0].len() != n {
        return Err(DynamicsError::Shape(format!(
            "process state has {} entries, expected {}",
            ep.y[0].len(),
            n
        )));
    }
    let mut env = vec![0.0; 1 + n];
    let mut stack = cf.scratch_stack();
    let mut d_lo = vec![0.0; n];
    let mut d_hi = vec![0.0; n];
    let mut hermites = Vec::with_capacity(ep.intervals());
    for k in 0..ep.intervals() {
        let ds = ep.grid[k + 1] - ep.grid[k];
        cf.rhs(ep.y0[k], &ep.y[k], ep.w0[k], &ep.w[k], &mut d_lo, &mut env, &mut stack)?;
        cf.rhs(
            ep.y0[k + 1],
            &ep.y[k + 1],
            ep.w0[k],
            &ep.w[k],
            &mut d_hi,
            &mut env,
            &mut stack,
        )?;
        hermites.push(Hermite::new(
            ep.grid[k],
            ds,
            &ep.y[k],
            &d_lo,
            &ep.y[k + 1],
            &d_hi,
        ));
    }
    Ok(hermites)
}

/// Interpolated `(time, state)` at the midpoint of every grid interval,
/// using the same cubic Hermite reconstruction as the adjoint integrator.
pub fn midpoint_states(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
) -> Result<Vec<(f64, Vec<f64>)>, DynamicsError> {
    let cf = CompiledFields::new(&p.fields);
    let hermites = build_hermites(&cf, ep)?;
    let n = cf.n();
    let mut out = Vec::with_capacity(ep.intervals());
    for (k, h) in hermites.iter().enumerate() {
        let ds = ep.grid[k + 1] - ep.grid[k];
        let s_mid = ep.grid[k] + 0.5 * ds;
        let t_mid = ep.y0[k] + ep.w0[k] * 0.5 * ds;
        let mut x = vec![0.0; n];
        h.eval(s_mid, &mut x);
        out.push((t_mid, x));
    }
    Ok(out)
}

/// Backward integrator for the adjoint system along a fixed extended
/// process; shared by [`integrate_adjoint`] and [`transition_map`].
struct AdjointSweep<'a> {
    jac: &'a CompiledJacobians,
    ep: &'a ExtendedProcess,
    hermites: Vec<Hermite>,
    substeps: usize,
}

impl<'a> AdjointSweep<'a> {
    fn new(
        cf: &CompiledFields,
        jac: &'a CompiledJacobians,
        ep: &'a ExtendedProcess,
        opts: &IntegrateOptions,
    ) -> Result<Self, DynamicsError> {
        Ok(AdjointSweep {
            jac,
            ep,
            hermites: build_hermites(cf, ep)?,
            substeps: opts.substeps.max(1),
        })
    }

    /// Derivative of `q = (p0, p)`: `dq0 = -p . dA/dt`-style pairing with
    /// the combined Jacobian; `q` has length `1 + n`.
    fn rhs(
        &self,
        k: usize,
        s: f64,
        q: &[f64],
        out: &mut [f64],
        x: &mut [f64],
        a: &mut [f64],
        env: &mut [f64],
        stack: &mut [f64],
    ) -> Result<(), EvalError> {
        let n = self.jac.n;
        let cols = 1 + n;
        self.hermites[k].eval(s, x);
        let t = self.ep.y0[k] + self.ep.w0[k] * (s - self.ep.grid[k]);
        self.jac
            .combined(t, x, self.ep.w0[k], &self.ep.w[k], a, env, stack)?;
        for l in 0..cols {
            let mut acc = 0.0;
            for i in 0..n {
                acc += q[1 + i] * a[i * cols + l];
            }
            out[l] = -acc;
        }
        Ok(())
    }

    /// Integrates backward from the final node, recording `q` at every
    /// node and at every interval midpoint. Returns `(nodes, midpoints)`
    /// where `nodes` has `N + 1` entries indexed like the grid.
    fn sweep(&self, terminal: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), DynamicsError> {
        let n = self.jac.n;
        let cols = 1 + n;
        let intervals = self.ep.intervals();
        let mut nodes = vec![vec![0.0; cols]; intervals + 1];
        let mut mids = vec![vec![0.0; cols]; intervals];
        nodes[intervals] = terminal.to_vec();
        let mut q = terminal.to_vec();
        let mut x = vec![0.0; n];
        let mut a = vec![0.0; n * cols];
        let mut env = vec![0.0; 1 + n];
        let mut stack = self.jac.scratch_stack();
        let mut k1 = vec![0.0; cols];
        let mut k2 = vec![0.0; cols];
        let mut k3 = vec![0.0; cols];
        let mut k4 = vec![0.0; cols];
        let mut tmp = vec![0.0; cols];
        let half = self.substeps.div_ceil(2);
        for k in (0..intervals).rev() {
            let s_hi = self.ep.grid[k + 1];
            let s_lo = self.ep.grid[k];
            let s_mid = 0.5 * (s_lo + s_hi);
            for (target, steps) in [(s_mid, half), (s_lo, half)] {
                let from = if target == s_mid { s_hi } else { s_mid };
                let h = (target - from) / steps as f64;
                let mut s = from;
                for _ in 0..steps {
                    self.rhs(k, s, &q, &mut k1, &mut x, &mut a, &mut env, &mut stack)?;
                    for i in 0..cols {
                        tmp[i] = q[i] + 0.5 * h * k1[i];
                    }
                    self.rhs(k, s + 0.5 * h, &tmp, &mut k2, &mut x, &mut a, &mut env, &mut stack)?;
                    for i in 0..cols {
                        tmp[i] = q[i] + 0.5 * h * k2[i];
                    }
                    self.rhs(k, s + 0.5 * h, &tmp, &mut k3, &mut x, &mut a, &mut env, &mut stack)?;
                    for i in 0..cols {
                        tmp[i] = q[i] + h * k3[i];
                    }
                    self.rhs(k, s + h, &tmp, &mut k4, &mut x, &mut a, &mut env, &mut stack)?;
                    for i in 0..cols {
                        q[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    s += h;
                }
                if target == s_mid {
                    mids[k] = q.clone();
                }
            }
            nodes[k] = q.clone();
        }
        Ok((nodes, mids))
    }
}

/// Integrates the adjoint system backward from a terminal covector
/// `(p0(S), p(S))` along the given process.
pub fn integrate_adjoint(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    terminal_p0: f64,
    terminal_p: &[f64],
    opts: &IntegrateOptions,
) -> Result<AdjointPath, DynamicsError> {
    let cf = CompiledFields::new(&p.fields);
    let jac = CompiledJacobians::new(&p.fields);
    let sweep = AdjointSweep::new(&cf, &jac, ep, opts)?;
    let mut terminal = vec![terminal_p0];
    terminal.extend_from_slice(terminal_p);
    let (nodes, _mids) = sweep.sweep(&terminal)?;
    Ok(AdjointPath {
        p0: nodes.iter().map(|q| q[0]).collect(),
        p: nodes.iter().map(|q| q[1..].to_vec()).collect(),
    })
}

/// Linear map from the terminal covector `(p0(S), p(S))` to its value at
/// every grid node and interval midpoint of a fixed process.
///
/// `at_nodes[k]` is the `(1 + n) x (1 + n)` row-major matrix with
/// `(p0(s_k), p(s_k)) = at_nodes[k] * (p0(S), p(S))`; the final entry is
/// the identity. Midpoint matrices serve pointwise Hamiltonian
/// constraints between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMap {
    pub grid: Vec<f64>,
    pub dim: usize,
    pub at_nodes: Vec<Vec<f64>>,
    pub at_midpoints: Vec<Vec<f64>>,
}

impl TransitionMap {
    /// Applies the node-`k` matrix to a terminal covector.
    pub fn apply_node(&self, k: usize, z: &[f64]) -> Vec<f64> {
        mat_apply(&self.at_nodes[k], self.dim, z)
    }

    /// Applies the midpoint matrix of interval `k` to a terminal covector.
    pub fn apply_midpoint(&self, k: usize, z: &[f64]) -> Vec<f64> {
        mat_apply(&self.at_midpoints[k], self.dim, z)
    }
}

fn mat_apply(m: &[f64], dim: usize, z: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|i| (0..dim).map(|j| m[i * dim + j] * z[j]).sum())
        .collect()
}

/// Builds the adjoint transition map by integrating one backward sweep
/// per unit terminal covector.
pub fn transition_map(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    opts: &IntegrateOptions,
) -> Result<TransitionMap, DynamicsError> {
    let cf = CompiledFields::new(&p.fields);
    let jac = CompiledJacobians::new(&p.fields);
    let sweep = AdjointSweep::new(&cf, &jac, ep, opts)?;
    let dim = 1 + p.fields.n;
    let intervals = ep.intervals();
    let mut at_nodes = vec![vec![0.0; dim * dim]; intervals + 1];
    let mut at_midpoints = vec![vec![0.0; dim * dim]; intervals];
    for j in 0..dim {
        let mut terminal = vec![0.0; dim];
        terminal[j] = 1.0;
        let (nodes, mids) = sweep.sweep(&terminal)?;
        for k in 0..=intervals {
            for i in 0..dim {
                at_nodes[k][i * dim + j] = nodes[k][i];
            }
        }
        for k in 0..intervals {
            for i in 0..dim {
                at_midpoints[k][i * dim + j] = mids[k][i];
            }
        }
    }
    Ok(TransitionMap {
        grid: ep.grid.clone(),
        dim,
        at_nodes,
        at_midpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::linalg;
    use crate::model::{
        AxisTag, ControlCone, CoordBound, CostSpec, ProblemSpec, TargetSpec, VectorFieldSet,
    };

    fn parse_fields(n: usize, m: usize, f: &[&str], g: &[&[&str]]) -> VectorFieldSet {
        let names = crate::model::field_var_names(n);
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        VectorFieldSet {
            n,
            m,
            f: f.iter().map(|s| Expr::parse(s, &refs).unwrap()).collect(),
            g: g.iter()
                .map(|col| col.iter().map(|s| Expr::parse(s, &refs).unwrap()).collect())
                .collect(),
        }
    }

    /// Impulse example: two states, one nonnegative control channel,
    /// drift `(0, x1)`, gate `(1, 0)`.
    fn impulse_problem() -> ProblemSpec {
        let fields = parse_fields(2, 1, &["0", "x1"], &[&["1", "0"]]);
        let cost_names = crate::model::cost_var_names(2);
        let cost_refs: Vec<&str> = cost_names.iter().map(|s| s.as_str()).collect();
        ProblemSpec {
            fields,
            cone: ControlCone::Orthant {
                tags: vec![AxisTag::NonNeg],
            },
            target: TargetSpec {
                coords: vec![
                    CoordBound::Fixed(0.0),
                    CoordBound::Fixed(0.0),
                    CoordBound::Fixed(0.0),
                    CoordBound::Fixed(1.0),
                    CoordBound::Free,
                    CoordBound::Interval {
                        lo: f64::NEG_INFINITY,
                        hi: 0.0,
                    },
                ],
                halfspaces: vec![],
                epigraph_declared: false,
            },
            cost: CostSpec {
                h: Expr::parse("-x2_1", &cost_refs).unwrap(),
            },
            k: 1.0,
        }
    }

    #[test]
    fn integrates_linear_drift_exactly() {
        // dy1 = w, dy2 = y1 w0 with w0 = 1, w = 0 from (0, 0): stays zero.
        let p = impulse_problem();
        let grid = vec![0.0, 0.5, 1.0];
        let ep = integrate_extended(
            &p,
            &grid,
            &[1.0, 1.0],
            &[vec![0.0], vec![0.0]],
            0.0,
            &[0.0, 0.0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!(ep.y.iter().all(|row| row.iter().all(|v| v.abs() < 1e-14)));
        assert!((ep.y0[2] - 1.0).abs() < 1e-14);
        assert_eq!(ep.nu[2], 0.0);
    }

    #[test]
    fn integrates_impulse_leg() {
        // Pure impulse: w0 = 0, w = 1 for one unit of pseudo-time moves
        // y1 by one and freezes time; then a drift leg integrates y2.
        let p = impulse_problem();
        let grid = vec![0.0, 1.0, 2.0];
        let ep = integrate_extended(
            &p,
            &grid,
            &[0.0, 1.0],
            &[vec![1.0], vec![0.0]],
            0.0,
            &[0.0, 0.0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!((ep.y0[1] - 0.0).abs() < 1e-14);
        assert!((ep.y[1][0] - 1.0).abs() < 1e-12);
        assert!((ep.y0[2] - 1.0).abs() < 1e-14);
        // Drift leg: dy2 = y1 = 1, so y2(end) = 1.
        assert!((ep.y[2][1] - 1.0).abs() < 1e-10);
        assert!((ep.variation() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn strict_integration_matches_embedding_route() {
        let p = impulse_problem();
        let grid = vec![0.0, 0.25, 0.75, 1.0];
        let du = vec![vec![0.4], vec![1.6], vec![0.2]];
        let sp = integrate_strict(&p, &grid, &du, &[0.0, 0.0], &IntegrateOptions::default())
            .unwrap();
        sp.check_invariants(&p.cone).unwrap();
        let ep = crate::reparam::embed(&sp).unwrap();
        let re = integrate_extended(
            &p,
            &ep.grid,
            &ep.w0,
            &ep.w,
            ep.y0[0],
            &ep.y[0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        for k in 0..ep.grid.len() {
            assert!((re.y0[k] - ep.y0[k]).abs() < 1e-10);
            for i in 0..2 {
                assert!((re.y[k][i] - ep.y[k][i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn safety_box_aborts_divergence() {
        // dx = x^2 from 1 blows up at t = 1; the box must trip.
        let fields = parse_fields(1, 1, &["x1^2"], &[&["0"]]);
        let cost_names = crate::model::cost_var_names(1);
        let cost_refs: Vec<&str> = cost_names.iter().map(|s| s.as_str()).collect();
        let p = ProblemSpec {
            fields,
            cone: ControlCone::Full { dim: 1 },
            target: TargetSpec {
                coords: vec![CoordBound::Free; 4],
                halfspaces: vec![],
                epigraph_declared: false,
            },
            cost: CostSpec {
                h: Expr::parse("v", &cost_refs).unwrap(),
            },
            k: f64::INFINITY,
        };
        let grid: Vec<f64> = (0..=400).map(|k| k as f64 * 1.1 / 400.0).collect();
        let w0 = vec![1.0; 400];
        let w = vec![vec![0.0]; 400];
        let err = integrate_extended(&p, &grid, &w0, &w, 0.0, &[1.0], &IntegrateOptions::default());
        assert!(matches!(err, Err(DynamicsError::SafetyBox { .. })));
    }

    #[test]
    fn adjoint_matches_closed_form_on_impulse_example() {
        // Along the minimizer (drift on [0,1], impulse on [1,2]) with
        // terminal (p0, p) = (0, 0, -1): on the impulse leg the combined
        // Jacobian vanishes, so p is constant; on the drift leg
        // dp1 = -p2 d(x1)/dx1 = 1, giving p1(s) = -(1 - s).
        let p = impulse_problem();
        let grid = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let ep = integrate_extended(
            &p,
            &grid,
            &[1.0, 1.0, 0.0, 0.0],
            &[vec![0.0], vec![0.0], vec![1.0], vec![1.0]],
            0.0,
            &[0.0, 0.0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        let path = integrate_adjoint(&p, &ep, 0.0, &[0.0, -1.0], &IntegrateOptions::default())
            .unwrap();
        let expect_p1 = [-1.0, -0.5, 0.0, 0.0, 0.0];
        for k in 0..=4 {
            assert!((path.p0[k]).abs() < 1e-10, "p0 node {k}");
            assert!(
                (path.p[k][0] - expect_p1[k]).abs() < 1e-10,
                "p1 node {k}: {}",
                path.p[k][0]
            );
            assert!((path.p[k][1] + 1.0).abs() < 1e-10, "p2 node {k}");
        }
    }

    #[test]
    fn adjoint_pairs_with_forward_variations() {
        // The pairing (p0, p) . (delta y0, delta y) of an adjoint solution
        // with a finite-difference variation of the initial state must be
        // constant along the trajectory.
        let fields = parse_fields(
            2,
            1,
            &["sin(x2)", "x1 * x2 + 0.3 * t"],
            &[&["cos(x1)", "x1"]],
        );
        let cost_names = crate::model::cost_var_names(2);
        let cost_refs: Vec<&str> = cost_names.iter().map(|s| s.as_str()).collect();
        let p = ProblemSpec {
            fields,
            cone: ControlCone::Full { dim: 1 },
            target: TargetSpec {
                coords: vec![CoordBound::Free; 6],
                halfspaces: vec![],
                epigraph_declared: false,
            },
            cost: CostSpec {
                h: Expr::parse("v", &cost_refs).unwrap(),
            },
            k: f64::INFINITY,
        };
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();
        let w0: Vec<f64> = (0..20).map(|k| 0.3 + 0.5 * ((k as f64 * 0.37).sin().abs())).collect();
        let w: Vec<Vec<f64>> = (0..20)
            .map(|k| {
                let w0k: f64 = 0.3 + 0.5 * ((k as f64 * 0.37).sin().abs());
                vec![(1.0 - w0k) * if k % 2 == 0 { 1.0 } else { -1.0 }]
            })
            .collect();
        let opts = IntegrateOptions {
            substeps: 16,
            ..IntegrateOptions::default()
        };
        let base = integrate_extended(&p, &grid, &w0, &w, 0.1, &[0.2, -0.3], &opts).unwrap();
        let path = integrate_adjoint(&p, &base, 0.4, &[0.8, -0.6], &opts).unwrap();
        let eps = 1e-6;
        // Variations in each initial coordinate of (y0, y).
        for coord in 0..3 {
            let mut y0_init = 0.1;
            let mut y_init = vec![0.2, -0.3];
            if coord == 0 {
                y0_init += eps;
            } else {
                y_init[coord - 1] += eps;
            }
            let bumped = integrate_extended(&p, &grid, &w0, &w, y0_init, &y_init, &opts).unwrap();
            let mut pairings = Vec::new();
            for k in 0..=20 {
                let mut acc = path.p0[k] * (bumped.y0[k] - base.y0[k]) / eps;
                for i in 0..2 {
                    acc += path.p[k][i] * (bumped.y[k][i] - base.y[k][i]) / eps;
                }
                pairings.push(acc);
            }
            let drift = pairings
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(*v), hi.max(*v))
                });
            assert!(
                drift.1 - drift.0 <= 1e-4,
                "pairing drift {} for coordinate {coord}",
                drift.1 - drift.0
            );
        }
    }

    #[test]
    fn adjoint_refinement_is_high_order() {
        let fields = parse_fields(1, 1, &["sin(x1) + t"], &[&["cos(x1)"]]);
        let cost_names = crate::model::cost_var_names(1);
        let cost_refs: Vec<&str> = cost_names.iter().map(|s| s.as_str()).collect();
        let p = ProblemSpec {
            fields,
            cone: ControlCone::Full { dim: 1 },
            target: TargetSpec {
                coords: vec![CoordBound::Free; 4],
                halfspaces: vec![],
                epigraph_declared: false,
            },
            cost: CostSpec {
                h: Expr::parse("v", &cost_refs).unwrap(),
            },
            k: f64::INFINITY,
        };
        let grid: Vec<f64> = (0..=5).map(|k| k as f64 / 5.0).collect();
        let w0 = vec![0.6; 5];
        let w = vec![vec![0.4]; 5];
        let run = |substeps: usize| {
            let opts = IntegrateOptions {
                substeps,
                ..IntegrateOptions::default()
            };
            let ep = integrate_extended(&p, &grid, &w0, &w, 0.0, &[0.7], &opts).unwrap();
            integrate_adjoint(&p, &ep, 0.3, &[1.0], &opts).unwrap().p[0][0]
        };
        let coarse = run(2);
        let fine = run(4);
        let finest = run(8);
        let err_coarse = (coarse - finest).abs();
        let err_fine = (fine - finest).abs();
        assert!(
            err_coarse / err_fine.max(1e-16) >= 8.0,
            "refinement ratio {} / {}",
            err_coarse,
            err_fine
        );
    }

    #[test]
    fn transition_map_is_linear_and_identity_at_end() {
        let p = impulse_problem();
        let grid = vec![0.0, 1.0, 2.0];
        let ep = integrate_extended(
            &p,
            &grid,
            &[1.0, 0.0],
            &[vec![0.0], vec![1.0]],
            0.0,
            &[0.0, 0.0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        let map = transition_map(&p, &ep, &IntegrateOptions::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((map.at_nodes[2][i * 3 + j] - expect).abs() < 1e-14);
            }
        }
        // Linearity: applying the map to a combined terminal covector
        // matches a direct adjoint integration with that terminal value.
        let z = vec![0.37, -1.2, 0.85];
        let direct = integrate_adjoint(&p, &ep, z[0], &z[1..], &IntegrateOptions::default())
            .unwrap();
        for k in 0..=2 {
            let via_map = map.apply_node(k, &z);
            assert!((via_map[0] - direct.p0[k]).abs() < 1e-8);
            for i in 0..2 {
                assert!((via_map[1 + i] - direct.p[k][i]).abs() < 1e-8);
            }
        }
        // Midpoint on the drift leg for terminal (0, 0, -1):
        // p1(0.5) = -(1 - 0.5) = -0.5.
        let mid = map.apply_midpoint(0, &[0.0, 0.0, -1.0]);
        assert!((mid[1] + 0.5).abs() < 1e-10);
        assert!((mid[2] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn strictify_preserves_endpoints_without_drift() {
        // Driftless bilinear system: re-integration along the rescaled
        // controls must reproduce the endpoint state.
        let fields = parse_fields(
            3,
            2,
            &["0", "0", "0"],
            &[&["1", "0", "x2"], &["0", "1", "0 - x1"]],
        );
        let cost_names = crate::model::cost_var_names(3);
        let cost_refs: Vec<&str> = cost_names.iter().map(|s| s.as_str()).collect();
        let p = ProblemSpec {
            fields,
            cone: ControlCone::Full { dim: 2 },
            target: TargetSpec {
                coords: vec![CoordBound::Free; 8],
                halfspaces: vec![],
                epigraph_declared: false,
            },
            cost: CostSpec {
                h: Expr::parse("v", &cost_refs).unwrap(),
            },
            k: f64::INFINITY,
        };
        let grid = vec![0.0, 0.5, 1.0, 1.5, 2.0];
        let w0 = vec![1.0, 0.0, 0.5, 0.5];
        let w = vec![
            vec![0.0, 0.0],
            vec![0.6, -0.8],
            vec![0.5, 0.0],
            vec![0.0, 0.5],
        ];
        let opts = IntegrateOptions {
            substeps: 64,
            ..IntegrateOptions::default()
        };
        let ep = integrate_extended(&p, &grid, &w0, &w, 0.0, &[1.0, 0.0, 0.0], &opts).unwrap();
        let sp = crate::reparam::no_drift_strictify(&p, &ep).unwrap();
        sp.check_invariants(&p.cone).unwrap();
        assert!((sp.t1() - 0.0).abs() < 1e-12);
        assert!((sp.t2() - 1.0).abs() < 1e-12);
        let end_old = ep.endpoint();
        let end_new = sp.endpoint();
        for i in 0..end_old.len() {
            assert!(
                (end_old[i] - end_new[i]).abs() < 1e-6,
                "endpoint {i}: {} vs {}",
                end_old[i],
                end_new[i]
            );
        }
        assert!((sp.variation() - ep.variation()).abs() < 1e-9);
        let errs: f64 = linalg::norm2(&[sp.t1(), sp.t2() - 1.0]);
        assert!(errs < 1e-9);
    }

    #[test]
    fn strictify_rejects_problems_with_drift() {
        let p = impulse_problem();
        let grid = vec![0.0, 1.0];
        let ep = integrate_extended(
            &p,
            &grid,
            &[1.0],
            &[vec![0.0]],
            0.0,
            &[0.0, 0.0],
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            crate::reparam::no_drift_strictify(&p, &ep),
            Err(crate::reparam::ReparamError::DriftNotZero)
        ));
    }
}
