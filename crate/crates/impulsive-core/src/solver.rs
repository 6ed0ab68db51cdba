//! Direct-transcription solver for the extended problem and its
//! strict-sense restrictions.
//!
//! The decision vector holds the pseudo-time horizon, one drift weight
//! per interval, raw direction parameters per interval, and the initial
//! endpoint coordinates. The canonical-form equality `w0 + |w| = 1` is
//! eliminated exactly by writing `w = (1 - w0) d` with a unit direction
//! `d` produced by a per-cone parameterization. Target and variation
//! constraints are handled by an augmented-Lagrangian outer loop around
//! a projected-gradient inner loop with backtracking; gradients are
//! central finite differences over the decision vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    integrate_extended_compiled, DynamicsError, EndpointIntegrator, IntegrateOptions,
};
use crate::linalg::norm2;
use crate::model::{validate, AxisTag, ControlCone, CoordBound, ProblemSpec};
use crate::reparam::{d_infty, ExtendedProcess};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error("enumeration budget exceeded: {required:.3e} combinations over limit {limit:.3e}")]
    Budget { required: f64, limit: f64 },
    #[error("the brute-force oracle requires fixed initial and final times")]
    UnpinnedTimes,
    #[error("dynamics evaluation failed: {0}")]
    Dynamics(#[from] DynamicsError),
}

/// Knobs for the transcription and the optimization loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Number of equal pseudo-time intervals in the transcription.
    pub n_intervals: usize,
    /// Number of multistart runs.
    pub multistarts: usize,
    /// Factor applied to the penalty parameter when feasibility stalls.
    pub penalty_growth: f64,
    /// Augmented-Lagrangian outer iterations.
    pub outer_iters: usize,
    /// Projected-gradient inner iterations per outer iteration.
    pub inner_iters: usize,
    /// Feasibility tolerance on constraint violations.
    pub tol_feas: f64,
    /// Stationarity tolerance on the projected step.
    pub tol_stat: f64,
    /// Seed for the multistart generator.
    pub seed: u64,
    /// Runge-Kutta substeps per interval during optimization.
    pub substeps: usize,
    /// Runge-Kutta substeps per interval for the reported candidate.
    pub report_substeps: usize,
    /// State norm bound aborting a runaway integration.
    pub safety_box: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            n_intervals: 80,
            multistarts: 16,
            penalty_growth: 10.0,
            outer_iters: 12,
            inner_iters: 400,
            tol_feas: 1e-6,
            tol_stat: 1e-5,
            seed: 0,
            substeps: 4,
            report_substeps: 8,
            safety_box: 1e6,
        }
    }
}

impl SolveConfig {
    /// A reduced-effort configuration for small interactive problems and
    /// test suites.
    pub fn light(seed: u64) -> SolveConfig {
        SolveConfig {
            n_intervals: 24,
            multistarts: 6,
            outer_iters: 8,
            inner_iters: 150,
            substeps: 2,
            seed,
            ..SolveConfig::default()
        }
    }

    fn check(&self) -> Result<(), SolverError> {
        if self.n_intervals == 0
            || self.multistarts == 0
            || self.outer_iters == 0
            || self.inner_iters == 0
            || !(self.penalty_growth > 1.0)
            || !(self.tol_feas > 0.0)
            || !(self.tol_stat > 0.0)
        {
            return Err(SolverError::Invalid(
                "solver configuration entries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What the inner loops minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The problem cost at the integrated endpoints.
    Cost,
    /// Distance to feasibility: max of the endpoint's target distance and
    /// the variation excess. Used by localized feasibility probes.
    TargetGap,
}

/// Keeps iterates inside a metric ball around a reference process by an
/// augmented-Lagrangian inequality on the process distance.
#[derive(Debug, Clone)]
pub struct BallPenalty {
    pub reference: ExtendedProcess,
    pub delta: f64,
    pub weight: f64,
}

/// Result of one solve: the best process over all multistarts with its
/// cost, feasibility residual, and diagnostics.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub process: ExtendedProcess,
    /// Value of the requested objective on the reported process.
    pub cost: f64,
    /// Feasibility residual of the reported process.
    pub feasibility: f64,
    pub converged: bool,
    /// Index of the multistart run that produced the candidate.
    pub run: usize,
    /// Distance overshoot beyond the ball radius, when a ball was active.
    pub ball_gap: Option<f64>,
    pub config: SolveConfig,
    /// One line per outer iteration per run.
    pub log: Vec<String>,
}

/// Max of the endpoint's distance to the target and the variation excess
/// over the bound.
pub fn feasibility_residual(p: &ProblemSpec, ep: &ExtendedProcess) -> f64 {
    let mut r = p.target.distance(&ep.endpoint());
    if p.k.is_finite() {
        r = r.max(ep.variation() - p.k);
    }
    r.max(0.0)
}

/// Minimizes the extended problem by multistart transcription.
pub fn solve_extended(p: &ProblemSpec, cfg: &SolveConfig) -> Result<Candidate, SolverError> {
    solve_with(p, cfg, 0.0, Objective::Cost, None)
}

/// Same transcription with the additional bound `w0 >= eps`, so every
/// returned process is an embedded strict-sense process.
pub fn solve_strict_restricted(
    p: &ProblemSpec,
    eps: f64,
    cfg: &SolveConfig,
) -> Result<Candidate, SolverError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SolverError::Invalid(format!(
            "restriction level {eps} outside (0, 1)"
        )));
    }
    solve_with(p, cfg, eps, Objective::Cost, None)
}

/// General entry point: objective selection, drift-weight lower bound,
/// and an optional ball constraint around a reference process.
pub fn solve_with(
    p: &ProblemSpec,
    cfg: &SolveConfig,
    theta_lo: f64,
    objective: Objective,
    ball: Option<&BallPenalty>,
) -> Result<Candidate, SolverError> {
    cfg.check()?;
    let report = validate(p);
    if !report.is_valid() {
        return Err(SolverError::Invalid(format!("problem invalid: {report}")));
    }
    if !(0.0..1.0).contains(&theta_lo) {
        return Err(SolverError::Invalid(format!(
            "drift weight lower bound {theta_lo} outside [0, 1)"
        )));
    }
    let mut nlp = Nlp::new(p, cfg, theta_lo, objective, ball)?;
    let mut log: Vec<String> = Vec::new();
    let mut best: Option<RunOutcome> = None;
    for run in 0..cfg.multistarts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut x = nlp.init_run(run, &mut rng);
        nlp.project(&mut x);
        nlp.set_fallback_directions(&x);
        let mut lam = vec![0.0; nlp.eq_len()];
        let mut mu = vec![0.0; nlp.ub_len()];
        let mut rho = 10.0f64;
        let mut feas_prev = f64::INFINITY;
        let mut inner_converged = false;
        let mut stall = 0usize;
        // Incumbent: the best iterate seen during the run, preferring
        // feasible points and lower objective among them.
        let mut snap: Option<(Vec<f64>, f64, f64)> = None;
        let remember = |snap: &mut Option<(Vec<f64>, f64, f64)>, x: &[f64], ev: &EvalOut| {
            let better = match snap {
                None => true,
                Some((_, obj, feas)) => {
                    let nf = ev.feas <= cfg.tol_feas;
                    let sf = *feas <= cfg.tol_feas;
                    (nf && !sf)
                        || (nf == sf && if nf { ev.obj < *obj } else { ev.feas < *feas })
                }
            };
            if better {
                *snap = Some((x.to_vec(), ev.obj, ev.feas));
            }
        };
        if let Some(ev) = nlp.evaluate(&x) {
            remember(&mut snap, &x, &ev);
        }
        for outer in 0..cfg.outer_iters {
            let (_, _, conv) = nlp.inner_minimize(&mut x, &lam, &mu, rho, cfg.inner_iters);
            inner_converged = conv;
            match nlp.evaluate(&x) {
                Some(ev) => {
                    let feas = ev.feas;
                    log.push(format!(
                        "run {run} outer {outer}: rho {rho:.1e} feas {feas:.3e} obj {:.6e}",
                        ev.obj
                    ));
                    remember(&mut snap, &x, &ev);
                    if feas <= cfg.tol_feas && inner_converged && outer >= 1 {
                        break;
                    }
                    for (l, c) in lam.iter_mut().zip(&ev.eq) {
                        *l += rho * c;
                    }
                    for (m, c) in mu.iter_mut().zip(&ev.ub) {
                        *m = (*m + rho * c).max(0.0);
                    }
                    if feas > 0.25 * feas_prev {
                        rho = (rho * cfg.penalty_growth).min(1e10);
                    }
                    if (feas - feas_prev).abs() <= 0.02 * feas_prev {
                        stall += 1;
                        if stall >= 3 {
                            break;
                        }
                    } else {
                        stall = 0;
                    }
                    feas_prev = feas;
                }
                None => {
                    log.push(format!(
                        "run {run} outer {outer}: rho {rho:.1e} evaluation failed"
                    ));
                    rho = (rho * cfg.penalty_growth).min(1e10);
                }
            }
        }
        let needs_restore = match &snap {
            Some((_, _, feas)) => *feas > cfg.tol_feas,
            None => true,
        };
        if needs_restore {
            let mut xr = match &snap {
                Some((xs, _, _)) => xs.clone(),
                None => x.clone(),
            };
            nlp.gn_restore(&mut xr, 30);
            if let Some(ev) = nlp.evaluate(&xr) {
                log.push(format!(
                    "run {run} restore: feas {:.3e} obj {:.6e}",
                    ev.feas, ev.obj
                ));
                remember(&mut snap, &xr, &ev);
            }
        }
        let (x_best, snap_feas) = match snap {
            Some((xs, _, feas)) => (xs, feas),
            None => (x, f64::INFINITY),
        };
        match nlp.finish_run(&x_best, run, inner_converged && snap_feas <= cfg.tol_feas) {
            Ok(outcome) => {
                log.push(format!(
                    "run {run}: cost {:.6e} feas {:.3e} converged {}",
                    outcome.cost, outcome.feasibility, outcome.converged
                ));
                let better = match &best {
                    None => true,
                    Some(b) => {
                        let of = outcome.feasibility <= cfg.tol_feas;
                        let bf = b.feasibility <= cfg.tol_feas;
                        (of && !bf)
                            || (of == bf
                                && if of {
                                    outcome.cost < b.cost
                                } else {
                                    outcome.feasibility < b.feasibility
                                })
                    }
                };
                if better {
                    best = Some(outcome);
                }
            }
            Err(e) => log.push(format!("run {run}: discarded ({e})")),
        }
    }
    let best = best.ok_or_else(|| {
        SolverError::Invalid("every multistart run failed to produce a process".into())
    })?;
    Ok(Candidate {
        process: best.process,
        cost: best.cost,
        feasibility: best.feasibility,
        converged: best.converged && best.feasibility <= cfg.tol_feas,
        run: best.run,
        ball_gap: best.ball_gap,
        config: cfg.clone(),
        log,
    })
}

struct RunOutcome {
    process: ExtendedProcess,
    cost: f64,
    feasibility: f64,
    converged: bool,
    run: usize,
    ball_gap: Option<f64>,
}

struct EvalOut {
    obj: f64,
    eq: Vec<f64>,
    ub: Vec<f64>,
    feas: f64,
}

enum UbRow {
    CoordLo { idx: usize, lo: f64 },
    CoordHi { idx: usize, hi: f64 },
    Halfspace(usize),
    Variation,
    Ball,
}

struct Nlp<'a> {
    p: &'a ProblemSpec,
    cfg: &'a SolveConfig,
    objective: Objective,
    ball: Option<&'a BallPenalty>,
    nn: usize,
    dpar: usize,
    dim: usize,
    theta_lo: f64,
    s_lo: f64,
    s_hi: f64,
    dt_guess: f64,
    eq_rows: Vec<(usize, f64)>,
    ub_rows: Vec<UbRow>,
    fallback: Vec<Vec<f64>>,
    integ: EndpointIntegrator,
    w0buf: Vec<f64>,
    wbuf: Vec<Vec<f64>>,
}

impl<'a> Nlp<'a> {
    fn new(
        p: &'a ProblemSpec,
        cfg: &'a SolveConfig,
        theta_lo: f64,
        objective: Objective,
        ball: Option<&'a BallPenalty>,
    ) -> Result<Nlp<'a>, SolverError> {
        let n = p.fields.n;
        let m = p.fields.m;
        let nn = cfg.n_intervals;
        let dpar = if m == 0 { 0 } else { dir_params(&p.cone) };
        let dim = 1 + nn + nn * dpar + 1 + n;
        let theta_lo = if m == 0 || p.cone.is_zero() {
            1.0
        } else {
            theta_lo
        };
        let (s_lo, s_hi, dt_guess) = horizon_bounds(p)?;
        let mut eq_rows = Vec::new();
        let mut ub_rows = Vec::new();
        for (i, c) in p.target.coords.iter().enumerate().skip(1 + n) {
            match c {
                CoordBound::Fixed(v) => eq_rows.push((i, *v)),
                CoordBound::Interval { lo, hi } => {
                    if lo.is_finite() {
                        ub_rows.push(UbRow::CoordLo { idx: i, lo: *lo });
                    }
                    if hi.is_finite() {
                        ub_rows.push(UbRow::CoordHi { idx: i, hi: *hi });
                    }
                }
                CoordBound::Free => {}
            }
        }
        for h in 0..p.target.halfspaces.len() {
            ub_rows.push(UbRow::Halfspace(h));
        }
        if p.k.is_finite() {
            ub_rows.push(UbRow::Variation);
        }
        if ball.is_some() {
            ub_rows.push(UbRow::Ball);
        }
        let fallback = vec![default_direction(&p.cone); nn];
        Ok(Nlp {
            p,
            cfg,
            objective,
            ball,
            nn,
            dpar,
            dim,
            theta_lo,
            s_lo,
            s_hi,
            dt_guess,
            eq_rows,
            ub_rows,
            fallback,
            integ: EndpointIntegrator::new(&p.fields),
            w0buf: vec![0.0; nn],
            wbuf: vec![vec![0.0; m]; nn],
        })
    }

    fn eq_len(&self) -> usize {
        self.eq_rows.len()
    }

    fn ub_len(&self) -> usize {
        self.ub_rows.len()
    }

    fn raw_offset(&self) -> usize {
        1 + self.nn
    }

    fn z0_offset(&self) -> usize {
        1 + self.nn + self.nn * self.dpar
    }

    /// Box bounds of one decision variable.
    fn var_bounds(&self, i: usize) -> (f64, f64) {
        if i == 0 {
            (self.s_lo, self.s_hi)
        } else if i < 1 + self.nn {
            (self.theta_lo, 1.0)
        } else if i < self.z0_offset() {
            (-10.0, 10.0)
        } else {
            match self.p.target.coords[i - self.z0_offset()] {
                CoordBound::Fixed(v) => (v, v),
                CoordBound::Interval { lo, hi } => (lo.max(-1e6), hi.min(1e6)),
                CoordBound::Free => (-1e6, 1e6),
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..self.dim {
            let (lo, hi) = self.var_bounds(i);
            x[i] = x[i].clamp(lo, hi);
        }
    }

    /// Fills the control buffers from a decision vector.
    fn decode(&mut self, x: &[f64]) {
        let r0 = self.raw_offset();
        for k in 0..self.nn {
            let theta = x[1 + k];
            self.w0buf[k] = theta;
            if self.dpar > 0 {
                let raw = &x[r0 + k * self.dpar..r0 + (k + 1) * self.dpar];
                let d = map_direction(&self.p.cone, raw, &self.fallback[k]);
                for (slot, dj) in self.wbuf[k].iter_mut().zip(&d) {
                    *slot = (1.0 - theta) * dj;
                }
            }
        }
    }

    /// Pins the zero-raw fallback directions for this run from the
    /// initial decision vector.
    fn set_fallback_directions(&mut self, x: &[f64]) {
        let r0 = self.raw_offset();
        let base = default_direction(&self.p.cone);
        for k in 0..self.nn {
            if self.dpar == 0 {
                continue;
            }
            let raw = &x[r0 + k * self.dpar..r0 + (k + 1) * self.dpar];
            self.fallback[k] = map_direction(&self.p.cone, raw, &base);
        }
    }

    fn evaluate(&mut self, x: &[f64]) -> Option<EvalOut> {
        let n = self.p.fields.n;
        let s = x[0];
        self.decode(x);
        let z0 = self.z0_offset();
        let t1 = x[z0];
        let x1 = &x[z0 + 1..z0 + 1 + n];
        let (y0_end, nu_end, ball_d) = if self.ball.is_some() {
            let grid: Vec<f64> = (0..=self.nn)
                .map(|k| s * k as f64 / self.nn as f64)
                .collect();
            let opts = IntegrateOptions {
                substeps: self.cfg.substeps,
                safety_box: self.cfg.safety_box,
            };
            let ep = integrate_extended_compiled(
                self.integ.fields(),
                &grid,
                &self.w0buf,
                &self.wbuf,
                t1,
                x1,
                &opts,
            )
            .ok()?;
            let d = d_infty(&ep, &self.ball.unwrap().reference);
            let last = ep.grid.len() - 1;
            // Terminal state needed below; copy out before dropping.
            let (y0e, nue) = (ep.y0[last], ep.nu[last]);
            for (slot, v) in self.integ_state_buf().iter_mut().zip(&ep.y[last]) {
                *slot = *v;
            }
            (y0e, nue, Some(d))
        } else {
            let (y0e, nue) = self
                .integ
                .run_uniform(
                    s,
                    &self.w0buf,
                    &self.wbuf,
                    t1,
                    x1,
                    self.cfg.substeps,
                    self.cfg.safety_box,
                )
                .ok()?;
            (y0e, nue, None)
        };
        let mut e = Vec::with_capacity(2 + 2 * n);
        e.push(x[z0]);
        e.extend_from_slice(&x[z0 + 1..z0 + 1 + n]);
        e.push(y0_end);
        e.extend_from_slice(self.integ.state());
        let obj = match self.objective {
            Objective::Cost => self.p.cost.eval(&e, nu_end).ok()?,
            Objective::TargetGap => {
                let mut v = self.p.target.distance(&e);
                if self.p.k.is_finite() {
                    v = v.max(nu_end - self.p.k);
                }
                v.max(0.0)
            }
        };
        if !obj.is_finite() {
            return None;
        }
        let eq: Vec<f64> = self.eq_rows.iter().map(|(i, v)| e[*i] - v).collect();
        let mut ub = Vec::with_capacity(self.ub_rows.len());
        for row in &self.ub_rows {
            let c = match row {
                UbRow::CoordLo { idx, lo } => lo - e[*idx],
                UbRow::CoordHi { idx, hi } => e[*idx] - hi,
                UbRow::Halfspace(h) => {
                    let hs = &self.p.target.halfspaces[*h];
                    crate::linalg::dot(&hs.a, &e) - hs.b
                }
                UbRow::Variation => nu_end - self.p.k,
                UbRow::Ball => {
                    let b = self.ball.unwrap();
                    b.weight * (ball_d.unwrap_or(f64::INFINITY) - b.delta)
                }
            };
            if !c.is_finite() {
                return None;
            }
            ub.push(c);
        }
        let mut feas = 0.0f64;
        for c in &eq {
            feas = feas.max(c.abs());
        }
        for c in &ub {
            feas = feas.max(*c);
        }
        Some(EvalOut { obj, eq, ub, feas })
    }

    /// Mutable view of the endpoint integrator's state buffer, used when
    /// the ball path integrates through the allocating route instead.
    fn integ_state_buf(&mut self) -> &mut [f64] {
        self.integ.state_mut()
    }

    fn al_value(&mut self, x: &[f64], lam: &[f64], mu: &[f64], rho: f64) -> f64 {
        let ev = match self.evaluate(x) {
            None => return 1e12,
            Some(ev) => ev,
        };
        // In violation-minimization mode the target rows themselves are the
        // quantity being driven down, so the smooth merit carries no extra
        // objective term.
        let mut l = match self.objective {
            Objective::Cost => ev.obj,
            Objective::TargetGap => 0.0,
        };
        for (li, ci) in lam.iter().zip(&ev.eq) {
            l += li * ci + 0.5 * rho * ci * ci;
        }
        for (mi, ci) in mu.iter().zip(&ev.ub) {
            let t = (mi + rho * ci).max(0.0);
            l += (t * t - mi * mi) / (2.0 * rho);
        }
        if l.is_finite() {
            l
        } else {
            1e12
        }
    }

    /// Residual vector for restoration: equality values and clipped
    /// inequality violations.
    fn residuals(&mut self, x: &[f64], out: &mut Vec<f64>) -> bool {
        match self.evaluate(x) {
            None => false,
            Some(ev) => {
                out.clear();
                out.extend(ev.eq.iter().copied());
                out.extend(ev.ub.iter().map(|c| c.max(0.0)));
                true
            }
        }
    }

    /// Damped Gauss-Newton descent on the squared constraint violation,
    /// polishing a near-feasible iterate onto the feasible set.
    fn gn_restore(&mut self, x: &mut [f64], iters: usize) {
        let dim = self.dim;
        let rows = self.eq_len() + self.ub_len();
        if rows == 0 {
            return;
        }
        let mut r0 = Vec::with_capacity(rows);
        let mut ri = Vec::with_capacity(rows);
        let mut jac = vec![0.0; rows * dim];
        let mut probe = vec![0.0; dim];
        let mut cand = vec![0.0; dim];
        let mut damping = 1e-3f64;
        let target = (0.1 * self.cfg.tol_feas).powi(2);
        for _ in 0..iters {
            if !self.residuals(x, &mut r0) {
                return;
            }
            let f0: f64 = r0.iter().map(|c| c * c).sum();
            if f0 <= target {
                return;
            }
            for i in 0..dim {
                let h = 1e-6 * (1.0 + x[i].abs());
                probe.copy_from_slice(x);
                probe[i] = x[i] + h;
                if !self.residuals(&probe, &mut ri) {
                    for row in 0..rows {
                        jac[row * dim + i] = 0.0;
                    }
                    continue;
                }
                for row in 0..rows {
                    jac[row * dim + i] = (ri[row] - r0[row]) / h;
                }
            }
            // Minimum-norm Gauss-Newton step from the normal equations
            // (J J^T + damping I) a = r, step = -J^T a. Variables at a
            // bound whose step points outward would be clipped away, so
            // they are pinned and the step re-solved: an active-set loop
            // that keeps inward-moving bound variables live.
            let mut improved = false;
            'attempts: for _ in 0..8 {
                let mut live = vec![true; dim];
                cand.copy_from_slice(x);
                for _pass in 0..6 {
                    let mut gram = vec![0.0; rows * rows];
                    for a in 0..rows {
                        for b in 0..rows {
                            let mut acc = 0.0;
                            for i in 0..dim {
                                if live[i] {
                                    acc += jac[a * dim + i] * jac[b * dim + i];
                                }
                            }
                            gram[a * rows + b] = acc;
                        }
                        gram[a * rows + a] += damping;
                    }
                    let coeff = match crate::linalg::lstsq(&gram, rows, rows, &r0) {
                        Ok(c) => c,
                        Err(_) => break,
                    };
                    for i in 0..dim {
                        let mut step = 0.0;
                        if live[i] {
                            for row in 0..rows {
                                step += jac[row * dim + i] * coeff[row];
                            }
                        }
                        cand[i] = x[i] - step;
                    }
                    let mut changed = false;
                    for i in 0..dim {
                        if !live[i] {
                            continue;
                        }
                        let (lo, hi) = self.var_bounds(i);
                        let outward_lo = x[i] <= lo + 1e-12 && cand[i] < lo;
                        let outward_hi = x[i] >= hi - 1e-12 && cand[i] > hi;
                        if outward_lo || outward_hi {
                            live[i] = false;
                            changed = true;
                        }
                    }
                    if !changed {
                        break;
                    }
                }
                self.project(&mut cand);
                if self.residuals(&cand, &mut ri) {
                    let f_new: f64 = ri.iter().map(|c| c * c).sum();
                    if f_new < f0 {
                        x.copy_from_slice(&cand);
                        damping = (damping * 0.5).max(1e-12);
                        improved = true;
                        break 'attempts;
                    }
                }
                damping *= 10.0;
            }
            if !improved {
                return;
            }
        }
    }

    /// Projected gradient descent with backtracking; returns the final
    /// value, the last step size, and a stationarity flag.
    fn inner_minimize(
        &mut self,
        x: &mut [f64],
        lam: &[f64],
        mu: &[f64],
        rho: f64,
        iters: usize,
    ) -> (f64, f64, bool) {
        let dim = self.dim;
        let mut g = vec![0.0; dim];
        let mut probe = vec![0.0; dim];
        let mut cand = vec![0.0; dim];
        let mut alpha = 1.0f64;
        let mut l0 = self.al_value(x, lam, mu, rho);
        let mut last_step = f64::INFINITY;
        let mut converged = false;
        for _ in 0..iters {
            for i in 0..dim {
                let h = 1e-6 * (1.0 + x[i].abs());
                probe.copy_from_slice(x);
                probe[i] = x[i] + h;
                let fp = self.al_value(&probe, lam, mu, rho);
                probe[i] = x[i] - h;
                let fm = self.al_value(&probe, lam, mu, rho);
                g[i] = (fp - fm) / (2.0 * h);
            }
            let mut accepted = None;
            let mut a = alpha;
            for _ in 0..40 {
                for i in 0..dim {
                    cand[i] = x[i] - a * g[i];
                }
                self.project(&mut cand);
                let decr: f64 = g
                    .iter()
                    .zip(x.iter().zip(cand.iter()))
                    .map(|(gi, (xi, ci))| gi * (xi - ci))
                    .sum();
                if decr <= 1e-18 {
                    break;
                }
                let lc = self.al_value(&cand, lam, mu, rho);
                if lc <= l0 - 1e-4 * decr {
                    accepted = Some(lc);
                    break;
                }
                a *= 0.5;
                if a < 1e-14 {
                    break;
                }
            }
            match accepted {
                None => {
                    converged = true;
                    break;
                }
                Some(lc) => {
                    last_step = x
                        .iter()
                        .zip(cand.iter())
                        .map(|(xi, ci)| (xi - ci).abs())
                        .fold(0.0f64, f64::max);
                    x.copy_from_slice(&cand);
                    l0 = lc;
                    alpha = (a * 4.0).min(1e4);
                    let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    if last_step <= self.cfg.tol_stat * scale {
                        converged = true;
                        break;
                    }
                }
            }
        }
        (l0, last_step, converged)
    }

    fn init_run(&self, run: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        let r0 = self.raw_offset();
        // Live direction parameters everywhere so the descent can open
        // impulse intervals that start at full drift weight.
        for k in 0..self.nn {
            for j in 0..self.dpar {
                x[r0 + k * self.dpar + j] = rng.gen_range(-1.0..1.0);
            }
        }
        if let Some(b) = self.ball {
            // Ball-constrained searches start on the reference process; later
            // runs jitter around it to cover the neighborhood.
            self.encode_reference(&b.reference, &mut x);
            if run > 0 {
                x[0] *= 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
                for k in 0..self.nn {
                    x[1 + k] += 0.25 * rng.gen_range(-1.0..1.0);
                    for j in 0..self.dpar {
                        x[r0 + k * self.dpar + j] += 0.4 * rng.gen_range(-1.0..1.0);
                    }
                }
            }
            return x;
        }
        if run == 0 {
            x[0] = self.dt_guess.max(0.1);
            for k in 0..self.nn {
                x[1 + k] = 1.0;
            }
        } else if run % 2 == 1 {
            let len = (self.nn / 8).max(1);
            let start = if run == 1 {
                self.nn - len
            } else {
                rng.gen_range(0..self.nn)
            };
            x[0] = self.dt_guess + rng.gen::<f64>() * (self.s_hi - self.dt_guess).max(0.0);
            for k in 0..self.nn {
                let in_burst = k >= start && k < start + len;
                x[1 + k] = if in_burst { self.theta_lo } else { 1.0 };
            }
        } else {
            x[0] = self.s_lo + rng.gen::<f64>() * (self.s_hi - self.s_lo);
            for k in 0..self.nn {
                x[1 + k] = self.theta_lo + rng.gen::<f64>() * (1.0 - self.theta_lo);
            }
            let z0 = self.z0_offset();
            for i in 0..=self.p.fields.n {
                x[z0 + i] = 0.1 * rng.gen_range(-1.0..1.0);
            }
        }
        x
    }

    /// Writes the decision-vector image of a reference process into `x`:
    /// horizon length, per-interval drift weights and direction parameters
    /// sampled at interval midpoints, and the initial point.
    fn encode_reference(&self, r: &ExtendedProcess, x: &mut [f64]) {
        let s_ref = r.s_final().max(1e-9);
        x[0] = s_ref.clamp(self.s_lo, self.s_hi);
        let r0 = self.raw_offset();
        let last = r.w0.len().saturating_sub(1);
        for k in 0..self.nn {
            let smid = s_ref * (k as f64 + 0.5) / self.nn as f64;
            let mut j = last;
            for (i, win) in r.grid.windows(2).enumerate() {
                if smid >= win[0] && smid < win[1] {
                    j = i;
                    break;
                }
            }
            x[1 + k] = r.w0[j].clamp(self.theta_lo.max(0.0), 1.0);
            if self.dpar > 0 {
                let w = &r.w[j];
                let mag = norm2(w);
                let raw = if mag > 1e-12 {
                    let dir: Vec<f64> = w.iter().map(|v| v / mag).collect();
                    invert_direction(&self.p.cone, &dir)
                } else {
                    vec![0.0; self.dpar]
                };
                x[r0 + k * self.dpar..r0 + (k + 1) * self.dpar].copy_from_slice(&raw);
            }
        }
        let z0 = self.z0_offset();
        x[z0] = r.y0[0];
        for (i, v) in r.y[0].iter().enumerate() {
            x[z0 + 1 + i] = *v;
        }
    }

    /// Integrates the final iterate at reporting fidelity and packages it.
    fn finish_run(
        &mut self,
        x: &[f64],
        run: usize,
        converged: bool,
    ) -> Result<RunOutcome, SolverError> {
        let n = self.p.fields.n;
        let s = x[0];
        self.decode(x);
        let z0 = self.z0_offset();
        let grid: Vec<f64> = (0..=self.nn)
            .map(|k| s * k as f64 / self.nn as f64)
            .collect();
        let opts = IntegrateOptions {
            substeps: self.cfg.report_substeps,
            safety_box: self.cfg.safety_box,
        };
        let process = integrate_extended_compiled(
            self.integ.fields(),
            &grid,
            &self.w0buf,
            &self.wbuf,
            x[z0],
            &x[z0 + 1..z0 + 1 + n],
            &opts,
        )?;
        let e = process.endpoint();
        let nu_end = process.variation();
        let cost = match self.objective {
            Objective::Cost => self
                .p
                .cost
                .eval(&e, nu_end)
                .map_err(|err| SolverError::Invalid(format!("cost evaluation failed: {err}")))?,
            Objective::TargetGap => {
                let mut v = self.p.target.distance(&e);
                if self.p.k.is_finite() {
                    v = v.max(nu_end - self.p.k);
                }
                v.max(0.0)
            }
        };
        let mut feasibility = match self.objective {
            Objective::Cost => feasibility_residual(self.p, &process),
            Objective::TargetGap => 0.0,
        };
        let ball_gap = self.ball.map(|b| d_infty(&process, &b.reference) - b.delta);
        if let Some(gap) = ball_gap {
            feasibility = feasibility.max(gap);
        }
        Ok(RunOutcome {
            process,
            cost,
            feasibility,
            converged,
            run,
            ball_gap,
        })
    }
}

/// Number of raw direction parameters per interval for a cone.
fn dir_params(cone: &ControlCone) -> usize {
    match cone {
        ControlCone::Full { dim } => *dim,
        ControlCone::Orthant { tags } => tags.len(),
        ControlCone::Generated { generators, .. } => generators.len(),
    }
}

/// Maps raw parameters to a unit direction in the cone; near-zero raws
/// fall back to a pinned direction so the map stays well defined.
fn map_direction(cone: &ControlCone, raw: &[f64], fallback: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = match cone {
        ControlCone::Full { .. } => raw.to_vec(),
        ControlCone::Orthant { tags } => raw
            .iter()
            .zip(tags)
            .map(|(r, t)| match t {
                AxisTag::Free => *r,
                AxisTag::NonNeg => r * r,
                AxisTag::NonPos => -(r * r),
                AxisTag::Zero => 0.0,
            })
            .collect(),
        ControlCone::Generated { dim, generators } => {
            let mut v = vec![0.0; *dim];
            for (r, gen) in raw.iter().zip(generators) {
                let weight = r * r;
                for (slot, gi) in v.iter_mut().zip(gen) {
                    *slot += weight * gi;
                }
            }
            v
        }
    };
    let nrm = norm2(&d);
    if nrm <= 1e-12 {
        return fallback.to_vec();
    }
    for v in &mut d {
        *v /= nrm;
    }
    d
}

/// Approximate inverse of `map_direction`: raw parameters whose image is
/// close to the given unit direction. Exact for full cones and orthants.
fn invert_direction(cone: &ControlCone, dir: &[f64]) -> Vec<f64> {
    match cone {
        ControlCone::Full { .. } => dir.to_vec(),
        ControlCone::Orthant { tags } => dir
            .iter()
            .zip(tags)
            .map(|(d, t)| match t {
                AxisTag::Free => *d,
                AxisTag::NonNeg => d.max(0.0).sqrt(),
                AxisTag::NonPos => (-d).max(0.0).sqrt(),
                AxisTag::Zero => 0.0,
            })
            .collect(),
        ControlCone::Generated { generators, .. } => generators
            .iter()
            .map(|g| crate::linalg::dot(g, dir).max(0.0).sqrt())
            .collect(),
    }
}

/// A deterministic unit direction inside the cone, or zeros for the
/// degenerate cone `{0}`.
fn default_direction(cone: &ControlCone) -> Vec<f64> {
    match cone {
        ControlCone::Full { dim } => {
            let mut d = vec![0.0; *dim];
            if *dim > 0 {
                d[0] = 1.0;
            }
            d
        }
        ControlCone::Orthant { tags } => {
            let mut d = vec![0.0; tags.len()];
            for (slot, t) in d.iter_mut().zip(tags) {
                match t {
                    AxisTag::Free | AxisTag::NonNeg => {
                        *slot = 1.0;
                        return normalize_or_zero(d);
                    }
                    AxisTag::NonPos => {
                        *slot = -1.0;
                        return normalize_or_zero(d);
                    }
                    AxisTag::Zero => {}
                }
            }
            d
        }
        ControlCone::Generated { dim, generators } => match generators.first() {
            Some(g) => normalize_or_zero(g.clone()),
            None => vec![0.0; *dim],
        },
    }
}

fn normalize_or_zero(mut d: Vec<f64>) -> Vec<f64> {
    let nrm = norm2(&d);
    if nrm > 1e-12 {
        for v in &mut d {
            *v /= nrm;
        }
    }
    d
}

fn coord_range(c: &CoordBound) -> (f64, f64) {
    match c {
        CoordBound::Fixed(v) => (*v, *v),
        CoordBound::Interval { lo, hi } => (*lo, *hi),
        CoordBound::Free => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

fn coord_guess(c: &CoordBound) -> f64 {
    match c {
        CoordBound::Fixed(v) => *v,
        CoordBound::Interval { lo, hi } => {
            if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                *lo
            } else if hi.is_finite() {
                *hi
            } else {
                0.0
            }
        }
        CoordBound::Free => 0.0,
    }
}

/// Bounds and an initial guess for the pseudo-time horizon, derived from
/// the target's time rows and the variation bound.
fn horizon_bounds(p: &ProblemSpec) -> Result<(f64, f64, f64), SolverError> {
    let n = p.fields.n;
    let (t1_lo, t1_hi) = coord_range(&p.target.coords[0]);
    let (t2_lo, t2_hi) = coord_range(&p.target.coords[1 + n]);
    let dt_guess = (coord_guess(&p.target.coords[1 + n]) - coord_guess(&p.target.coords[0]))
        .max(0.01);
    let dt_lo = (t2_lo - t1_hi).max(0.0);
    let dt_lo = if dt_lo.is_finite() { dt_lo } else { 0.0 };
    let mut dt_hi = t2_hi - t1_lo;
    if !dt_hi.is_finite() {
        dt_hi = dt_guess + 10.0;
    }
    let k_eff = if p.k.is_finite() {
        p.k
    } else {
        10.0 * (1.0 + dt_hi)
    };
    let s_lo = dt_lo.max(1e-3);
    let s_hi = dt_hi + k_eff;
    if !(s_hi > s_lo) {
        return Err(SolverError::Invalid(format!(
            "no admissible pseudo-time horizon: [{s_lo}, {s_hi}]"
        )));
    }
    Ok((s_lo, s_hi, dt_guess))
}

/// Best feasible enumeration entry of the brute-force oracle.
#[derive(Debug, Clone)]
pub struct OracleBest {
    pub cost: f64,
    pub feasibility: f64,
    pub process: ExtendedProcess,
}

/// Outcome of a brute-force enumeration.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub best: Option<OracleBest>,
    pub evaluated: u64,
    pub feasible: u64,
}

/// Knobs for the brute-force oracle.
#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Number of equal intervals; at most 6.
    pub n_intervals: usize,
    /// Lower bound on the drift weight, 0 for the extended problem.
    pub min_w0: f64,
    pub substeps: usize,
    pub feas_tol: f64,
    /// Maximum number of control sequences to enumerate.
    pub budget: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            n_intervals: 4,
            min_w0: 0.0,
            substeps: 8,
            feas_tol: 1e-4,
            budget: 1e7,
        }
    }
}

/// Exhaustively enumerates piecewise-constant canonical controls built
/// from per-coordinate level sets, solving the horizon from the fixed
/// time rows, and returns the best feasible cost.
pub fn brute_force_oracle(
    p: &ProblemSpec,
    levels: &[Vec<f64>],
    opts: &OracleOptions,
) -> Result<OracleResult, SolverError> {
    let n = p.fields.n;
    let m = p.fields.m;
    if levels.len() != m {
        return Err(SolverError::Invalid(format!(
            "{} level sets for {m} control coordinates",
            levels.len()
        )));
    }
    if opts.n_intervals == 0 || opts.n_intervals > 6 {
        return Err(SolverError::Invalid(format!(
            "oracle interval count {} outside 1..=6",
            opts.n_intervals
        )));
    }
    let per_interval: f64 = levels.iter().map(|l| l.len() as f64).product();
    let required = per_interval.powi(opts.n_intervals as i32);
    if required > opts.budget {
        return Err(SolverError::Budget {
            required,
            limit: opts.budget,
        });
    }
    let t1 = match p.target.coords[0] {
        CoordBound::Fixed(v) => v,
        _ => return Err(SolverError::UnpinnedTimes),
    };
    let t2 = match p.target.coords[1 + n] {
        CoordBound::Fixed(v) => v,
        _ => return Err(SolverError::UnpinnedTimes),
    };
    let dt = t2 - t1;
    if !(dt > 0.0) {
        return Err(SolverError::Invalid(format!(
            "oracle requires a positive time span, got {dt}"
        )));
    }
    let x1: Vec<f64> = (1..=n)
        .map(|i| match p.target.coords[i] {
            CoordBound::Fixed(v) => v,
            CoordBound::Interval { lo, hi } => 0.0f64.clamp(lo.min(hi), hi.max(lo)),
            CoordBound::Free => 0.0,
        })
        .collect();
    // Admissible per-interval canonical controls from the level grid.
    let mut options: Vec<(f64, Vec<f64>)> = Vec::new();
    if m == 0 {
        options.push((1.0, Vec::new()));
    } else if levels.iter().all(|l| !l.is_empty()) {
        let mut idx = vec![0usize; m];
        loop {
            let w: Vec<f64> = idx.iter().zip(levels).map(|(i, l)| l[*i]).collect();
            let mag = norm2(&w);
            if mag <= 1.0 + 1e-12 && p.cone.contains(&w, 1e-9) {
                let w0 = (1.0 - mag).max(0.0);
                if w0 >= opts.min_w0 - 1e-12 {
                    options.push((w0, w));
                }
            }
            let mut carry = true;
            for j in 0..m {
                if !carry {
                    break;
                }
                idx[j] += 1;
                if idx[j] < levels[j].len() {
                    carry = false;
                } else {
                    idx[j] = 0;
                }
            }
            if carry {
                break;
            }
        }
    }
    let mut integ = EndpointIntegrator::new(&p.fields);
    let nbf = opts.n_intervals;
    let mut counter = vec![0usize; nbf];
    let mut evaluated = 0u64;
    let mut feasible = 0u64;
    let mut best: Option<(f64, f64, Vec<usize>, f64)> = None;
    let mut w0 = vec![0.0; nbf];
    let mut w: Vec<Vec<f64>> = vec![vec![0.0; m]; nbf];
    let mut e = vec![0.0; 2 + 2 * n];
    e[0] = t1;
    e[1..1 + n].copy_from_slice(&x1);
    if !options.is_empty() {
        loop {
            evaluated += 1;
            let mut sum_w0 = 0.0;
            for (k, c) in counter.iter().enumerate() {
                let (o0, ow) = &options[*c];
                w0[k] = *o0;
                w[k].copy_from_slice(ow);
                sum_w0 += *o0;
            }
            if sum_w0 > 1e-12 {
                let s = dt * nbf as f64 / sum_w0;
                if let Ok((y0e, nue)) =
                    integ.run_uniform(s, &w0, &w, t1, &x1, opts.substeps, 1e6)
                {
                    e[1 + n] = y0e;
                    e[2 + n..].copy_from_slice(integ.state());
                    let mut feas = p.target.distance(&e);
                    if p.k.is_finite() {
                        feas = feas.max(nue - p.k);
                    }
                    let feas = feas.max(0.0);
                    if feas <= opts.feas_tol {
                        feasible += 1;
                        if let Ok(cost) = p.cost.eval(&e, nue) {
                            let replace = match &best {
                                None => true,
                                Some((bc, _, _, _)) => cost < *bc,
                            };
                            if replace {
                                best = Some((cost, feas, counter.clone(), s));
                            }
                        }
                    }
                }
            }
            let mut carry = true;
            for slot in counter.iter_mut() {
                if !carry {
                    break;
                }
                *slot += 1;
                if *slot < options.len() {
                    carry = false;
                } else {
                    *slot = 0;
                }
            }
            if carry {
                break;
            }
        }
    }
    let best = match best {
        None => None,
        Some((cost, feas, choice, s)) => {
            for (k, c) in choice.iter().enumerate() {
                let (o0, ow) = &options[*c];
                w0[k] = *o0;
                w[k].copy_from_slice(ow);
            }
            let grid: Vec<f64> = (0..=nbf).map(|k| s * k as f64 / nbf as f64).collect();
            let process = integrate_extended_compiled(
                integ.fields(),
                &grid,
                &w0,
                &w,
                t1,
                &x1,
                &IntegrateOptions {
                    substeps: opts.substeps,
                    safety_box: 1e6,
                },
            )?;
            Some(OracleBest {
                cost,
                feasibility: feas,
                process,
            })
        }
    };
    Ok(OracleResult {
        best,
        evaluated,
        feasible,
    })
}
