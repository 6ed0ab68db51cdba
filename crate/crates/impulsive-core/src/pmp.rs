//! Evaluation of the extended maximum principle: Hamiltonian
//! maximization over the canonical control set, residual reports for a
//! candidate multiplier set, and normality classification through a
//! linear feasibility program.
//!
//! A multiplier set consists of an adjoint arc `(p0, p)`, a variation
//! multiplier `pi <= 0`, and a cost multiplier `lambda >= 0`. The process
//! is an extremal when the adjoint equation holds, the Hamiltonian is
//! maximized and vanishes along the process, and the endpoint covector
//! satisfies the transversality inclusion. An extremal is abnormal when
//! some multiplier set with `lambda = 0` exists; the classifier searches
//! for one over the discretized conditions.

use crate::dynamics::{self, AdjointPath, DynamicsError, IntegrateOptions, TransitionMap};
use crate::expr::EvalError;
use crate::linalg::{self, LinalgError, LpProblem, LpStatus};
use crate::model::{ModelError, ProblemSpec};
use crate::reparam::ExtendedProcess;
use std::fmt;
use thiserror::Error;

/// Error from a maximum-principle routine.
#[derive(Debug, Error)]
pub enum PmpError {
    /// Mutually inconsistent input shapes, such as grid mismatches.
    #[error("multiplier shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A candidate multiplier set for the extended maximum principle.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierSet {
    /// Adjoint arc `(p0, p)` sampled at the process grid nodes.
    pub path: AdjointPath,
    /// Variation multiplier, required nonpositive.
    pub pi: f64,
    /// Cost multiplier, required nonnegative.
    pub lambda: f64,
}

impl MultiplierSet {
    /// Terminal covector `(p0(S), p(S))`.
    pub fn terminal(&self) -> Vec<f64> {
        let mut z = vec![*self.path.p0.last().unwrap()];
        z.extend_from_slice(self.path.p.last().unwrap());
        z
    }
}

/// Result of maximizing the Hamiltonian over the canonical control set.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianMax {
    /// The maximum value.
    pub value: f64,
    /// Maximizing time speed (1 for the drift branch, 0 for an impulse).
    pub w0: f64,
    /// Maximizing control direction (zero for the drift branch).
    pub w: Vec<f64>,
    /// Value of the drift branch.
    pub drift_value: f64,
    /// Value of the impulse branch, absent when the cone is `{0}`.
    pub impulse_value: Option<f64>,
    /// Whether the two branches tie within `1e-9`; the drift branch is
    /// reported as argmax on ties.
    pub tie: bool,
}

/// Maximizes `q0 w0 + q . w + pi |w|` over the canonical control set at
/// one point, where `q0 = p . f + p0` and `q_j = p . g_j`.
///
/// Since the objective is affine along each segment `w = rho d` with
/// `w0 = 1 - rho`, the maximum is attained either at the pure drift
/// control `(1, 0)` or at a pure impulse direction `(0, d)` with `d`
/// maximizing `q . d` over the unit directions of the cone.
pub fn hamiltonian_max(
    p: &ProblemSpec,
    t: f64,
    x: &[f64],
    p0: f64,
    pvec: &[f64],
    pi: f64,
) -> Result<HamiltonianMax, PmpError> {
    let (f, g) = dynamics::eval_fields(&p.fields, t, x)?;
    let q0 = p0 + linalg::dot(pvec, &f);
    let q: Vec<f64> = g.iter().map(|col| linalg::dot(pvec, col)).collect();
    Ok(hamiltonian_max_from(p, q0, &q, pi))
}

/// Branch comparison given the reduced coefficients directly.
pub fn hamiltonian_max_from(p: &ProblemSpec, q0: f64, q: &[f64], pi: f64) -> HamiltonianMax {
    let m = p.fields.m;
    match p.cone.sphere_support(q) {
        None => HamiltonianMax {
            value: q0,
            w0: 1.0,
            w: vec![0.0; m],
            drift_value: q0,
            impulse_value: None,
            tie: false,
        },
        Some((support, dir)) => {
            let impulse = support + pi;
            let tie = (q0 - impulse).abs() <= 1e-9;
            if q0 >= impulse {
                HamiltonianMax {
                    value: q0,
                    w0: 1.0,
                    w: vec![0.0; m],
                    drift_value: q0,
                    impulse_value: Some(impulse),
                    tie,
                }
            } else {
                HamiltonianMax {
                    value: impulse,
                    w0: 0.0,
                    w: dir,
                    drift_value: q0,
                    impulse_value: Some(impulse),
                    tie,
                }
            }
        }
    }
}

/// Hamiltonian value at given controls from already evaluated fields.
fn hamiltonian_at(
    p0: f64,
    pvec: &[f64],
    pi: f64,
    f: &[f64],
    g: &[Vec<f64>],
    w0: f64,
    w: &[f64],
) -> f64 {
    let mut h = p0 * w0 + pi * linalg::norm2(w);
    for i in 0..pvec.len() {
        let mut vel = f[i] * w0;
        for (j, col) in g.iter().enumerate() {
            vel += col[i] * w[j];
        }
        h += pvec[i] * vel;
    }
    h
}

/// Residuals of the maximum-principle conditions for one multiplier set
/// along one process. All entries are nonnegative; the case fields are
/// present only when the corresponding hypothesis applies.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// Max node deviation of the given adjoint arc from a re-integration
    /// started at its own terminal values.
    pub adjoint: f64,
    /// Max `|H|` at interval midpoints using the process's own controls.
    pub hamiltonian_value: f64,
    /// Max shortfall of the process Hamiltonian from its maximum.
    pub hamiltonian_gap: f64,
    /// Distance of the endpoint covector from `lambda grad h` plus the
    /// target normal cone, including any endpoint-off-target distance.
    pub transversality: f64,
    /// Violation of the sign requirements `pi <= 0`, `lambda >= 0`.
    pub sign_violation: f64,
    /// Size of the multiplier triple `(p0, p, lambda)`; an extremal
    /// requires this to be bounded away from zero.
    pub nontriviality: f64,
    /// `|pi|` when `lambda dh/dv = 0` and the variation bound is slack,
    /// which forces `pi = 0`.
    pub case_interior: Option<f64>,
    /// Size of `(p, lambda)` when the time window is non-degenerate,
    /// which forces that pair away from zero.
    pub case_nondegenerate: Option<f64>,
}

impl ResidualReport {
    /// Largest residual that must vanish for an extremal.
    pub fn max_residual(&self) -> f64 {
        let mut worst = self
            .adjoint
            .max(self.hamiltonian_value)
            .max(self.hamiltonian_gap)
            .max(self.transversality)
            .max(self.sign_violation);
        if let Some(v) = self.case_interior {
            worst = worst.max(v);
        }
        worst
    }

    /// Whether the set certifies an extremal at tolerance `tol`: all
    /// residuals within `tol` and the required nonzero quantities above
    /// `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual() <= tol
            && self.nontriviality > tol
            && self.case_nondegenerate.map_or(true, |v| v > tol)
    }

    /// Structured text report with a verdict at tolerance `tol`.
    pub fn render(&self, tol: f64) -> String {
        let mut out = String::new();
        out.push_str("adjoint\n");
        out.push_str(&format!("  max node deviation: {:.3e}\n", self.adjoint));
        out.push_str("hamiltonian\n");
        out.push_str(&format!(
            "  max |H| at midpoints: {:.3e}\n",
            self.hamiltonian_value
        ));
        out.push_str(&format!(
            "  max attainment gap:   {:.3e}\n",
            self.hamiltonian_gap
        ));
        out.push_str("transversality\n");
        out.push_str(&format!(
            "  decomposition residual: {:.3e}\n",
            self.transversality
        ));
        out.push_str("signs\n");
        out.push_str(&format!("  sign violation: {:.3e}\n", self.sign_violation));
        out.push_str(&format!("  nontriviality:  {:.3e}\n", self.nontriviality));
        match self.case_interior {
            Some(v) => out.push_str(&format!("  slack-variation case: |pi| = {v:.3e}\n")),
            None => out.push_str("  slack-variation case: not applicable\n"),
        }
        match self.case_nondegenerate {
            Some(v) => out.push_str(&format!(
                "  nondegenerate-time case: |(p, lambda)| = {v:.3e}\n"
            )),
            None => out.push_str("  nondegenerate-time case: not applicable\n"),
        }
        out.push_str("verdict\n");
        out.push_str(&format!(
            "  extremal within {tol:.1e}: {}\n",
            if self.passes(tol) { "yes" } else { "no" }
        ));
        out
    }
}

impl fmt::Display for ResidualReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(1e-5))
    }
}

/// Options for residual evaluation.
#[derive(Debug, Clone)]
pub struct ResidualOptions {
    pub integrate: IntegrateOptions,
    /// Tolerance for deciding endpoint constraint activity and the case
    /// hypotheses.
    pub activity_tol: f64,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        ResidualOptions {
            integrate: IntegrateOptions::default(),
            activity_tol: 1e-7,
        }
    }
}

/// Evaluates all extremality residuals with default options.
pub fn extremal_residuals(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    ms: &MultiplierSet,
) -> Result<ResidualReport, PmpError> {
    extremal_residuals_with(p, ep, ms, &ResidualOptions::default())
}

/// Evaluates all extremality residuals.
pub fn extremal_residuals_with(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    ms: &MultiplierSet,
    opts: &ResidualOptions,
) -> Result<ResidualReport, PmpError> {
    let n = p.fields.n;
    let nodes = ep.grid.len();
    if ms.path.p0.len() != nodes || ms.path.p.len() != nodes {
        return Err(PmpError::Shape(format!(
            "multiplier path has {}/{} nodes for a {}-node grid",
            ms.path.p0.len(),
            ms.path.p.len(),
            nodes
        )));
    }
    for (k, pk) in ms.path.p.iter().enumerate() {
        if pk.len() != n {
            return Err(PmpError::Shape(format!(
                "adjoint state at node {k} has {} entries, expected {n}",
                pk.len()
            )));
        }
    }
    let tm = dynamics::transition_map(p, ep, &opts.integrate)?;
    let z = ms.terminal();
    residuals_from_map(p, ep, ms, &tm, &z, opts)
}

fn residuals_from_map(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    ms: &MultiplierSet,
    tm: &TransitionMap,
    z: &[f64],
    opts: &ResidualOptions,
) -> Result<ResidualReport, PmpError> {
    let n = p.fields.n;
    let nodes = ep.grid.len();
    let mut adjoint = 0.0f64;
    for k in 0..nodes {
        let q = tm.apply_node(k, z);
        adjoint = adjoint.max((q[0] - ms.path.p0[k]).abs());
        for i in 0..n {
            adjoint = adjoint.max((q[1 + i] - ms.path.p[k][i]).abs());
        }
    }
    let mids = dynamics::midpoint_states(p, ep)?;
    let mut h_value = 0.0f64;
    let mut h_gap = 0.0f64;
    for (k, (t_mid, x_mid)) in mids.iter().enumerate() {
        let q = tm.apply_midpoint(k, z);
        let (f, g) = dynamics::eval_fields(&p.fields, *t_mid, x_mid)?;
        let h_proc = hamiltonian_at(q[0], &q[1..], ms.pi, &f, &g, ep.w0[k], &ep.w[k]);
        let hm = hamiltonian_max(p, *t_mid, x_mid, q[0], &q[1..], ms.pi)?;
        h_value = h_value.max(h_proc.abs());
        h_gap = h_gap.max((hm.value - h_proc).max(0.0));
    }
    let transversality = transversality_residual(p, ep, ms, opts)?;
    let sign_violation = ms.pi.max(0.0).max((-ms.lambda).max(0.0));
    let mut sup_p = 0.0f64;
    let mut sup_full = 0.0f64;
    for k in 0..nodes {
        sup_full = sup_full.max(ms.path.p0[k].abs());
        for i in 0..n {
            sup_p = sup_p.max(ms.path.p[k][i].abs());
        }
    }
    sup_full = sup_full.max(sup_p);
    let nontriviality = sup_full.max(ms.lambda);
    let endpoint = ep.endpoint();
    let v_final = ep.variation();
    let grads = p.cost.gradient(n);
    let mut env = endpoint.clone();
    env.push(v_final);
    let dh_dv = grads.last().unwrap().eval(&env)?;
    let interior_applicable = (ms.lambda * dh_dv).abs() <= opts.activity_tol
        && (p.k.is_infinite() || v_final < p.k - opts.activity_tol);
    let case_interior = interior_applicable.then(|| ms.pi.abs());
    let nondegenerate = ep.y0[0] < ep.y0.last().unwrap() - opts.activity_tol;
    let case_nondegenerate = nondegenerate.then(|| sup_p.max(ms.lambda));
    Ok(ResidualReport {
        adjoint,
        hamiltonian_value: h_value,
        hamiltonian_gap: h_gap,
        transversality,
        sign_violation,
        nontriviality,
        case_interior,
        case_nondegenerate,
    })
}

/// Distance of the endpoint covector from `lambda grad h + N`, where `N`
/// collects the target normal cone generators and the variation-bound
/// factor.
fn transversality_residual(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    ms: &MultiplierSet,
    opts: &ResidualOptions,
) -> Result<f64, PmpError> {
    let n = p.fields.n;
    let dim = 2 + 2 * n;
    let endpoint = ep.endpoint();
    let v_final = ep.variation();
    let grads = p.cost.gradient(n);
    let mut env = endpoint.clone();
    env.push(v_final);
    let grad: Vec<f64> = grads
        .iter()
        .map(|e| e.eval(&env))
        .collect::<Result<Vec<f64>, EvalError>>()?;
    let mut cov = Vec::with_capacity(dim);
    cov.push(ms.path.p0[0]);
    cov.extend_from_slice(&ms.path.p[0]);
    cov.push(-ms.path.p0.last().unwrap());
    for i in 0..n {
        cov.push(-ms.path.p.last().unwrap()[i]);
    }
    let r: Vec<f64> = (0..dim).map(|i| cov[i] - ms.lambda * grad[i]).collect();
    let dist_target = p.target.distance(&endpoint);
    let projected = p.target.project(&endpoint);
    let cone = p.target.normal_cone(&projected, opts.activity_tol)?;
    let cols = cone.rays.len() + 2 * cone.linealities.len();
    let decomposition = if cols == 0 {
        linalg::norm2(&r)
    } else {
        let mut a = vec![0.0; dim * cols];
        for (j, ray) in cone.rays.iter().enumerate() {
            for i in 0..dim {
                a[i * cols + j] = ray[i];
            }
        }
        for (l, lin) in cone.linealities.iter().enumerate() {
            let j_pos = cone.rays.len() + 2 * l;
            for i in 0..dim {
                a[i * cols + j_pos] = lin[i];
                a[i * cols + j_pos + 1] = -lin[i];
            }
        }
        let c = linalg::nnls(&a, dim, cols, &r)?;
        let mut resid = 0.0f64;
        for i in 0..dim {
            let mut acc = -r[i];
            for j in 0..cols {
                acc += a[i * cols + j] * c[j];
            }
            resid += acc * acc;
        }
        resid.sqrt()
    };
    let rv = -ms.pi - ms.lambda * grad[dim];
    let v_violation = if p.k.is_finite() && v_final >= p.k - opts.activity_tol {
        (-rv).max(0.0)
    } else if v_final <= opts.activity_tol {
        rv.max(0.0)
    } else {
        rv.abs()
    };
    Ok(decomposition + v_violation + dist_target)
}

/// Max `|H|` at each grid node, evaluating against the controls of every
/// adjacent interval; the Hamiltonian of an extremal vanishes there.
pub fn hamiltonian_at_nodes(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    ms: &MultiplierSet,
) -> Result<Vec<f64>, PmpError> {
    let nodes = ep.grid.len();
    if ms.path.p0.len() != nodes {
        return Err(PmpError::Shape("grid mismatch".into()));
    }
    let mut out = vec![0.0f64; nodes];
    for k in 0..nodes {
        let (f, g) = dynamics::eval_fields(&p.fields, ep.y0[k], &ep.y[k])?;
        let mut worst = 0.0f64;
        if k > 0 {
            worst = worst.max(
                hamiltonian_at(
                    ms.path.p0[k],
                    &ms.path.p[k],
                    ms.pi,
                    &f,
                    &g,
                    ep.w0[k - 1],
                    &ep.w[k - 1],
                )
                .abs(),
            );
        }
        if k < nodes - 1 {
            worst = worst.max(
                hamiltonian_at(
                    ms.path.p0[k],
                    &ms.path.p[k],
                    ms.pi,
                    &f,
                    &g,
                    ep.w0[k],
                    &ep.w[k],
                )
                .abs(),
            );
        }
        out[k] = worst;
    }
    Ok(out)
}

/// Outcome of the abnormality search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normality {
    /// No multiplier set with `lambda = 0` exists; every multiplier set
    /// is normal.
    Normal,
    /// A verified multiplier set with `lambda = 0` exists.
    Abnormal,
    /// The feasibility program was numerically marginal.
    Undetermined,
}

impl fmt::Display for Normality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Normality::Normal => "Normal",
            Normality::Abnormal => "Abnormal",
            Normality::Undetermined => "Undetermined",
        };
        f.write_str(s)
    }
}

/// Classification result with diagnostics.
#[derive(Debug, Clone)]
pub struct NormalityReport {
    pub verdict: Normality,
    /// Verified abnormal witness when the verdict is Abnormal.
    pub witness: Option<MultiplierSet>,
    /// For Normal: smallest infeasibility over all normalization
    /// patterns; for Abnormal: largest witness residual.
    pub margin: f64,
    pub lp_solves: usize,
    pub refine_rounds: usize,
    pub diagnostic: String,
}

struct LpSkeleton {
    dim: usize,
    total: usize,
    pi_index: Option<usize>,
    eq: Vec<(Vec<f64>, f64)>,
    ub: Vec<(Vec<f64>, f64)>,
    bounds: Vec<(f64, f64)>,
}

/// Searches for a multiplier set with `lambda = 0` by linear feasibility
/// over the terminal covector, the variation multiplier, and the normal
/// cone coefficients; the adjoint equation holds by construction through
/// the transition map.
///
/// Scale is fixed by pinning one terminal covector component to plus or
/// minus one; every valid witness admits such a scaling, so enumerating
/// the pinned programs loses nothing. When the time window is
/// non-degenerate only the state components need pinning, since the
/// endpoint condition then forces a nonzero state covector.
pub fn classify_normality(
    p: &ProblemSpec,
    ep: &ExtendedProcess,
    tol: f64,
) -> Result<NormalityReport, PmpError> {
    let opts = ResidualOptions::default();
    let n = p.fields.n;
    let dim = 1 + n;
    let tm = dynamics::transition_map(p, ep, &opts.integrate)?;
    let mids = dynamics::midpoint_states(p, ep)?;
    let endpoint = ep.endpoint();
    let projected = p.target.project(&endpoint);
    let cone = p.target.normal_cone(&projected, opts.activity_tol)?;
    let v_final = ep.variation();
    let nu_active = p.k.is_finite() && v_final >= p.k - opts.activity_tol;
    let num_rays = cone.rays.len();
    let num_lin = cone.linealities.len();
    let pi_index = nu_active.then_some(dim);
    let total = dim + usize::from(nu_active) + num_rays + num_lin;
    let mu_base = dim + usize::from(nu_active);
    let alpha_base = mu_base + num_rays;

    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); total];
    if let Some(pi) = pi_index {
        bounds[pi] = (f64::NEG_INFINITY, 0.0);
    }
    for r in 0..num_rays {
        bounds[mu_base + r] = (0.0, f64::INFINITY);
    }

    let mut eq: Vec<(Vec<f64>, f64)> = Vec::new();
    // Transversality with lambda = 0: the initial covector block equals
    // the cone combination on the (t1, x1) coordinates and the negated
    // terminal covector equals it on the (t2, x2) coordinates.
    for i in 0..dim {
        let mut row = vec![0.0; total];
        for j in 0..dim {
            row[j] = tm.at_nodes[0][i * dim + j];
        }
        for r in 0..num_rays {
            row[mu_base + r] = -cone.rays[r][i];
        }
        for l in 0..num_lin {
            row[alpha_base + l] = -cone.linealities[l][i];
        }
        eq.push((row, 0.0));
    }
    for i in 0..dim {
        let mut row = vec![0.0; total];
        row[i] = -1.0;
        for r in 0..num_rays {
            row[mu_base + r] = -cone.rays[r][dim + i];
        }
        for l in 0..num_lin {
            row[alpha_base + l] = -cone.linealities[l][dim + i];
        }
        eq.push((row, 0.0));
    }
    // Pointwise Hamiltonian conditions at interval midpoints: the value
    // along the process vanishes, the drift branch is nonpositive, and
    // every probe direction of the impulse branch is nonpositive.
    let mut ub: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut mid_fields = Vec::with_capacity(mids.len());
    for (k, (t_mid, x_mid)) in mids.iter().enumerate() {
        let (f, g) = dynamics::eval_fields(&p.fields, *t_mid, x_mid)?;
        let mut b_proc = vec![ep.w0[k]];
        for i in 0..n {
            let mut vel = f[i] * ep.w0[k];
            for (j, col) in g.iter().enumerate() {
                vel += col[i] * ep.w[k][j];
            }
            b_proc.push(vel);
        }
        let mut row = vec![0.0; total];
        for j in 0..dim {
            for (i, b) in b_proc.iter().enumerate() {
                row[j] += b * tm.at_midpoints[k][i * dim + j];
            }
        }
        if let Some(pi) = pi_index {
            row[pi] = linalg::norm2(&ep.w[k]);
        }
        eq.push((row, 0.0));

        let mut drift_row = vec![0.0; total];
        let b_drift: Vec<f64> = std::iter::once(1.0).chain(f.iter().copied()).collect();
        for j in 0..dim {
            for (i, b) in b_drift.iter().enumerate() {
                drift_row[j] += b * tm.at_midpoints[k][i * dim + j];
            }
        }
        ub.push((drift_row, 0.0));
        mid_fields.push(g);
    }
    let base_probes = p.cone.probe_directions();
    let probe_row = |k: usize, d: &[f64], total: usize| -> Vec<f64> {
        let g = &mid_fields[k];
        let mut gd = vec![0.0; n];
        for (j, col) in g.iter().enumerate() {
            for i in 0..n {
                gd[i] += d[j] * col[i];
            }
        }
        let mut row = vec![0.0; total];
        for jz in 0..dim {
            for i in 0..n {
                row[jz] += gd[i] * tm.at_midpoints[k][(1 + i) * dim + jz];
            }
        }
        if let Some(pi) = pi_index {
            row[pi] = linalg::norm2(d);
        }
        row
    };
    for k in 0..mids.len() {
        for d in &base_probes {
            ub.push((probe_row(k, d, total), 0.0));
        }
    }
    let skeleton = LpSkeleton {
        dim,
        total,
        pi_index,
        eq,
        ub,
        bounds,
    };

    let nondegenerate = ep.y0[0] < ep.y0.last().unwrap() - opts.activity_tol;
    let mut patterns: Vec<(usize, f64)> = Vec::new();
    for i in 1..dim {
        patterns.push((i, 1.0));
        patterns.push((i, -1.0));
    }
    if !nondegenerate {
        patterns.push((0, 1.0));
        patterns.push((0, -1.0));
    }

    let mut cuts: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut lp_solves = 0usize;
    let mut diagnostic = String::new();
    let max_rounds = 5usize;
    for round in 0..=max_rounds {
        let mut min_residual = f64::INFINITY;
        let mut saw_feasible = false;
        let mut new_cuts: Vec<(usize, Vec<f64>)> = Vec::new();
        for &(idx, sign) in &patterns {
            let mut lp = LpProblem {
                num_vars: skeleton.total,
                eq: skeleton.eq.clone(),
                ub: skeleton.ub.clone(),
                bounds: skeleton.bounds.clone(),
            };
            for (k, d) in &cuts {
                lp.ub.push((probe_row(*k, d, skeleton.total), 0.0));
            }
            let mut pin = vec![0.0; skeleton.total];
            pin[idx] = 1.0;
            lp.eq.push((pin, sign));
            lp_solves += 1;
            match linalg::lp_feasible(&lp, tol)? {
                LpStatus::Infeasible { residual } => {
                    min_residual = min_residual.min(residual);
                }
                LpStatus::Feasible(sol) => {
                    saw_feasible = true;
                    let z = &sol[..skeleton.dim];
                    let pi = skeleton.pi_index.map_or(0.0, |i| sol[i].min(0.0));
                    let witness = witness_from_terminal(&tm, z, pi);
                    let rr = residuals_from_map(p, ep, &witness, &tm, z, &opts)?;
                    if rr.passes(10.0 * tol) {
                        return Ok(NormalityReport {
                            verdict: Normality::Abnormal,
                            margin: rr.max_residual(),
                            witness: Some(witness),
                            lp_solves,
                            refine_rounds: round,
                            diagnostic: format!(
                                "witness found with component {idx} pinned to {sign}"
                            ),
                        });
                    }
                    // The witness failed exact verification; harvest the
                    // violated impulse directions as new probes.
                    for (k, (t_mid, x_mid)) in mids.iter().enumerate() {
                        let q = tm.apply_midpoint(k, z);
                        let hm = hamiltonian_max(p, *t_mid, x_mid, q[0], &q[1..], pi)?;
                        if hm.value > 10.0 * tol && hm.w0 == 0.0 {
                            let fresh = cuts
                                .iter()
                                .chain(new_cuts.iter())
                                .filter(|(kc, _)| *kc == k)
                                .all(|(_, dc)| {
                                    linalg::dot(dc, &hm.w)
                                        < 1.0 - 1e-9 * linalg::norm2(&hm.w).max(1.0)
                                });
                            if fresh {
                                new_cuts.push((k, hm.w.clone()));
                            }
                        }
                    }
                    diagnostic = format!(
                        "round {round}: witness with component {idx} pinned failed \
                         verification at residual {:.3e}",
                        rr.max_residual()
                    );
                }
            }
        }
        if !saw_feasible {
            let verdict = if min_residual > 10.0 * tol {
                Normality::Normal
            } else {
                Normality::Undetermined
            };
            return Ok(NormalityReport {
                verdict,
                witness: None,
                margin: min_residual,
                lp_solves,
                refine_rounds: round,
                diagnostic: format!(
                    "all {} normalization patterns infeasible, min residual {:.3e}",
                    patterns.len(),
                    min_residual
                ),
            });
        }
        if new_cuts.is_empty() {
            return Ok(NormalityReport {
                verdict: Normality::Undetermined,
                witness: None,
                margin: 0.0,
                lp_solves,
                refine_rounds: round,
                diagnostic: if diagnostic.is_empty() {
                    "feasible program but no verifiable witness and no refinement available"
                        .to_string()
                } else {
                    diagnostic
                },
            });
        }
        cuts.extend(new_cuts);
    }
    Ok(NormalityReport {
        verdict: Normality::Undetermined,
        witness: None,
        margin: 0.0,
        lp_solves,
        refine_rounds: max_rounds,
        diagnostic: "probe refinement budget exhausted".to_string(),
    })
}

/// Builds the full multiplier set determined by a terminal covector
/// through the transition map, with `lambda = 0`.
fn witness_from_terminal(tm: &TransitionMap, z: &[f64], pi: f64) -> MultiplierSet {
    let nodes = tm.at_nodes.len();
    let mut p0 = Vec::with_capacity(nodes);
    let mut p = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let q = tm.apply_node(k, z);
        p0.push(q[0]);
        p.push(q[1..].to_vec());
    }
    MultiplierSet {
        path: AdjointPath { p0, p },
        pi,
        lambda: 0.0,
    }
}
