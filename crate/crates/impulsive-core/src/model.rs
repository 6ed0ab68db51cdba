//! Problem data: vector fields, control cone, target set, cost and the
//! variation bound, with validation, normal-cone computation and cone
//! projection.
//!
//! A problem couples the control-affine fields `dx/dt = f + sum_j g_j du^j`
//! with a closed convex cone constraint on `du`, a closed target for the
//! endpoint tuple `(t1, x1, t2, x2)`, a scalar cost over endpoints plus the
//! total variation `v`, and the bound `v(t2) <= K`. Targets are boxes
//! combined with halfspaces, which keeps every normal cone finitely
//! generated.

use crate::expr::Expr;
use crate::linalg::{self, lp_feasible, LpProblem, LpStatus};
use thiserror::Error;

/// Error from model-level queries.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    /// A point handed to a target query is too far from the target.
    #[error("point is not on the target: distance {distance:.3e} exceeds tolerance {tol:.3e}")]
    NotOnTarget { distance: f64, tol: f64 },
    /// Operand dimensions do not match the problem's.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Names of the dynamics variables `(t, x1, .., xn)`.
pub fn field_var_names(n: usize) -> Vec<String> {
    let mut v = vec!["t".to_string()];
    for i in 1..=n {
        v.push(format!("x{i}"));
    }
    v
}

/// Names of the cost variables `(t1, x1_1, .., x1_n, t2, x2_1, .., x2_n, v)`.
pub fn cost_var_names(n: usize) -> Vec<String> {
    let mut v = vec!["t1".to_string()];
    for i in 1..=n {
        v.push(format!("x1_{i}"));
    }
    v.push("t2".to_string());
    for i in 1..=n {
        v.push(format!("x2_{i}"));
    }
    v.push("v".to_string());
    v
}

/// The drift field `f` and control columns `g_1..g_m` of one problem.
#[derive(Debug, Clone)]
pub struct VectorFieldSet {
    pub n: usize,
    pub m: usize,
    /// `n` expressions in `(t, x1..xn)`.
    pub f: Vec<Expr>,
    /// `m` columns of `n` expressions each, in the same variables.
    pub g: Vec<Vec<Expr>>,
}

impl VectorFieldSet {
    /// True if every drift entry is the literal constant zero. Used by the
    /// no-drift certificate, which is structural rather than numerical.
    pub fn drift_is_zero(&self) -> bool {
        self.f.iter().all(|e| e.is_const(0.0))
    }
}

/// Per-coordinate tag of an orthant-product cone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisTag {
    Free,
    NonNeg,
    NonPos,
    Zero,
}

/// A closed convex cone `C` of admissible control derivatives.
#[derive(Debug, Clone)]
pub enum ControlCone {
    /// All of `R^m`.
    Full { dim: usize },
    /// Product of per-coordinate halflines/lines/zeros.
    Orthant { tags: Vec<AxisTag> },
    /// Conic hull of finitely many unit generator vectors.
    Generated { dim: usize, generators: Vec<Vec<f64>> },
}

impl ControlCone {
    /// Ambient dimension `m`.
    pub fn dim(&self) -> usize {
        match self {
            ControlCone::Full { dim } => *dim,
            ControlCone::Orthant { tags } => tags.len(),
            ControlCone::Generated { dim, .. } => *dim,
        }
    }

    /// True if the cone is the single point `{0}`.
    pub fn is_zero(&self) -> bool {
        match self {
            ControlCone::Full { dim } => *dim == 0,
            ControlCone::Orthant { tags } => tags.iter().all(|t| *t == AxisTag::Zero),
            ControlCone::Generated { generators, .. } => generators.is_empty(),
        }
    }

    /// Membership test with tolerance: distance of `w` to the cone is at
    /// most `tol`.
    pub fn contains(&self, w: &[f64], tol: f64) -> bool {
        let p = self.project(w);
        let d2: f64 = w.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
        d2.sqrt() <= tol
    }

    /// Euclidean projection onto the cone.
    pub fn project(&self, q: &[f64]) -> Vec<f64> {
        assert_eq!(q.len(), self.dim(), "cone projection dimension mismatch");
        match self {
            ControlCone::Full { .. } => q.to_vec(),
            ControlCone::Orthant { tags } => q
                .iter()
                .zip(tags)
                .map(|(v, t)| match t {
                    AxisTag::Free => *v,
                    AxisTag::NonNeg => v.max(0.0),
                    AxisTag::NonPos => v.min(0.0),
                    AxisTag::Zero => 0.0,
                })
                .collect(),
            ControlCone::Generated { dim, generators } => {
                if generators.is_empty() {
                    return vec![0.0; *dim];
                }
                // The projection is G*lambda for the nonnegative
                // least-squares conic coefficients; Lawson-Hanson explores
                // the active generator subsets exactly.
                let rows = *dim;
                let cols = generators.len();
                let mut mat = vec![0.0; rows * cols];
                for (j, gen) in generators.iter().enumerate() {
                    for i in 0..rows {
                        mat[i * cols + j] = gen[i];
                    }
                }
                let lam = linalg::nnls(&mat, rows, cols, q)
                    .expect("nnls on a conic projection cannot stall");
                let mut out = vec![0.0; rows];
                for (j, gen) in generators.iter().enumerate() {
                    for i in 0..rows {
                        out[i] += lam[j] * gen[i];
                    }
                }
                out
            }
        }
    }

    /// Exact value and a maximizer of `sup { q . d : d in C, |d| = 1 }`.
    ///
    /// Returns `None` when `C = {0}`, where the supremum runs over an empty
    /// set. When the projection of `q` is nonzero the supremum equals
    /// `|proj(q)|` at the normalized projection; when it vanishes the
    /// supremum is nonpositive and attained on an extreme direction, which
    /// is found per cone kind.
    pub fn sphere_support(&self, q: &[f64]) -> Option<(f64, Vec<f64>)> {
        if self.is_zero() {
            return None;
        }
        let proj = self.project(q);
        let norm = linalg::norm2(&proj);
        if norm > 0.0 {
            let dir = proj.iter().map(|v| v / norm).collect();
            return Some((norm, dir));
        }
        match self {
            ControlCone::Full { dim } => {
                // Projection zero on the full space means q = 0.
                let mut d = vec![0.0; *dim];
                d[0] = 1.0;
                Some((0.0, d))
            }
            ControlCone::Orthant { tags } => {
                let mut best: Option<(f64, usize, f64)> = None;
                for (j, t) in tags.iter().enumerate() {
                    let cand = match t {
                        AxisTag::Free => Some((q[j].abs(), if q[j] >= 0.0 { 1.0 } else { -1.0 })),
                        AxisTag::NonNeg => Some((q[j], 1.0)),
                        AxisTag::NonPos => Some((-q[j], -1.0)),
                        AxisTag::Zero => None,
                    };
                    if let Some((val, sign)) = cand {
                        if best.map_or(true, |(bv, _, _)| val > bv) {
                            best = Some((val, j, sign));
                        }
                    }
                }
                best.map(|(val, j, sign)| {
                    let mut d = vec![0.0; tags.len()];
                    d[j] = sign;
                    (val, d)
                })
            }
            ControlCone::Generated { generators, .. } => {
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, gen) in generators.iter().enumerate() {
                    let val = linalg::dot(q, gen);
                    if val > best.0 {
                        best = (val, i);
                    }
                }
                Some((best.0, generators[best.1].clone()))
            }
        }
    }

    /// A finite set of unit directions spanning the cone's extreme
    /// structure: signed axes for orthants, generators for generated
    /// cones, signed coordinate axes for the full space. Used as initial
    /// probe directions by the multiplier feasibility program and for
    /// sampling.
    pub fn probe_directions(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let axis = |j: usize, sign: f64| {
            let mut d = vec![0.0; m];
            d[j] = sign;
            d
        };
        match self {
            ControlCone::Full { dim } => {
                let mut out = Vec::with_capacity(2 * dim);
                for j in 0..*dim {
                    out.push(axis(j, 1.0));
                    out.push(axis(j, -1.0));
                }
                out
            }
            ControlCone::Orthant { tags } => {
                let mut out = Vec::new();
                for (j, t) in tags.iter().enumerate() {
                    match t {
                        AxisTag::Free => {
                            out.push(axis(j, 1.0));
                            out.push(axis(j, -1.0));
                        }
                        AxisTag::NonNeg => out.push(axis(j, 1.0)),
                        AxisTag::NonPos => out.push(axis(j, -1.0)),
                        AxisTag::Zero => {}
                    }
                }
                out
            }
            ControlCone::Generated { generators, .. } => generators.clone(),
        }
    }
}

/// Constraint on one coordinate of the endpoint tuple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoordBound {
    Fixed(f64),
    Interval { lo: f64, hi: f64 },
    Free,
}

/// A halfspace `a . z <= b` over the endpoint tuple.
#[derive(Debug, Clone)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

/// The endpoint target `T` for `z = (t1, x1, t2, x2)`, a box intersected
/// with halfspaces. `epigraph_declared` asserts externally that `T` is
/// locally an epigraph in the sense used by the epigraph no-gap test; it is
/// never derived from the data.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    /// Length `2 + 2n` in the order `t1, x1_1.., t2, x2_1..`.
    pub coords: Vec<CoordBound>,
    pub halfspaces: Vec<Halfspace>,
    pub epigraph_declared: bool,
}

/// Equality and inequality rows describing a target as linear constraints.
#[derive(Debug, Clone, Default)]
pub struct TargetRows {
    /// Rows `a . z = b`.
    pub eq: Vec<(Vec<f64>, f64)>,
    /// Rows `a . z <= b`.
    pub ub: Vec<(Vec<f64>, f64)>,
}

/// Generator description of a normal cone `N_T(z)`: nonnegative rays plus
/// lineality directions that may carry any sign.
#[derive(Debug, Clone)]
pub struct NormalConeGenerators {
    pub rays: Vec<Vec<f64>>,
    pub linealities: Vec<Vec<f64>>,
}

/// A covector of the target's normal cone, split into its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalCovector {
    pub zeta: Vec<f64>,
    n: usize,
}

impl NormalCovector {
    pub fn new(zeta: Vec<f64>, n: usize) -> NormalCovector {
        assert_eq!(zeta.len(), 2 + 2 * n);
        NormalCovector { zeta, n }
    }

    pub fn zeta_t1(&self) -> f64 {
        self.zeta[0]
    }

    pub fn zeta_x1(&self) -> &[f64] {
        &self.zeta[1..1 + self.n]
    }

    pub fn zeta_t2(&self) -> f64 {
        self.zeta[1 + self.n]
    }

    pub fn zeta_x2(&self) -> &[f64] {
        &self.zeta[2 + self.n..]
    }
}

impl TargetSpec {
    /// Dimension of the endpoint tuple this target constrains.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Box target with every coordinate free.
    pub fn all_free(len: usize) -> TargetSpec {
        TargetSpec {
            coords: vec![CoordBound::Free; len],
            halfspaces: Vec::new(),
            epigraph_declared: false,
        }
    }

    /// Linear-constraint view used by the solver and the feasibility LP.
    pub fn rows(&self) -> TargetRows {
        let d = self.len();
        let unit = |i: usize| {
            let mut a = vec![0.0; d];
            a[i] = 1.0;
            a
        };
        let mut rows = TargetRows::default();
        for (i, c) in self.coords.iter().enumerate() {
            match c {
                CoordBound::Fixed(v) => rows.eq.push((unit(i), *v)),
                CoordBound::Interval { lo, hi } => {
                    if lo == hi {
                        rows.eq.push((unit(i), *lo));
                    } else {
                        if lo.is_finite() {
                            let mut a = unit(i);
                            a[i] = -1.0;
                            rows.ub.push((a, -lo));
                        }
                        if hi.is_finite() {
                            rows.ub.push((unit(i), *hi));
                        }
                    }
                }
                CoordBound::Free => {}
            }
        }
        for hs in &self.halfspaces {
            rows.ub.push((hs.a.clone(), hs.b));
        }
        rows
    }

    fn clamp_box(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.coords)
            .map(|(v, c)| match c {
                CoordBound::Fixed(w) => *w,
                CoordBound::Interval { lo, hi } => v.max(*lo).min(*hi),
                CoordBound::Free => *v,
            })
            .collect()
    }

    /// Euclidean projection of `z` onto the target. Exact for pure boxes;
    /// with halfspaces present, Dykstra's alternating projections are run
    /// to convergence.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.len(), "target projection dimension mismatch");
        if self.halfspaces.is_empty() {
            return self.clamp_box(z);
        }
        let sets = 1 + self.halfspaces.len();
        let d = self.len();
        let mut x = z.to_vec();
        let mut corrections = vec![vec![0.0; d]; sets];
        for _ in 0..2000 {
            let mut shift = 0.0f64;
            for (si, corr) in corrections.iter_mut().enumerate() {
                let mut y: Vec<f64> = x.iter().zip(corr.iter()).map(|(a, b)| a + b).collect();
                let projected = if si == 0 {
                    self.clamp_box(&y)
                } else {
                    let hs = &self.halfspaces[si - 1];
                    let viol = linalg::dot(&hs.a, &y) - hs.b;
                    if viol > 0.0 {
                        let nn = linalg::dot(&hs.a, &hs.a);
                        if nn > 0.0 {
                            for (yi, ai) in y.iter_mut().zip(&hs.a) {
                                *yi -= viol * ai / nn;
                            }
                        }
                    }
                    y.clone()
                };
                for i in 0..d {
                    corr[i] = y[i] - projected[i];
                    shift = shift.max((projected[i] - x[i]).abs());
                }
                x = projected;
            }
            if shift < 1e-13 {
                break;
            }
        }
        x
    }

    /// Euclidean distance of `z` to the target.
    pub fn distance(&self, z: &[f64]) -> f64 {
        let p = self.project(z);
        z.iter()
            .zip(&p)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Generator description of the normal cone at a point within `tol` of
    /// the target: linealities for fixed coordinates, signed rays for
    /// active interval ends, the outward normals of active halfspaces.
    pub fn normal_cone(&self, z: &[f64], tol: f64) -> Result<NormalConeGenerators, ModelError> {
        let dist = self.distance(z);
        if dist > tol {
            return Err(ModelError::NotOnTarget {
                distance: dist,
                tol,
            });
        }
        let d = self.len();
        let unit = |i: usize, sign: f64| {
            let mut a = vec![0.0; d];
            a[i] = sign;
            a
        };
        let mut out = NormalConeGenerators {
            rays: Vec::new(),
            linealities: Vec::new(),
        };
        for (i, c) in self.coords.iter().enumerate() {
            match c {
                CoordBound::Fixed(_) => out.linealities.push(unit(i, 1.0)),
                CoordBound::Interval { lo, hi } => {
                    if lo == hi {
                        out.linealities.push(unit(i, 1.0));
                    } else {
                        if lo.is_finite() && z[i] <= lo + tol {
                            out.rays.push(unit(i, -1.0));
                        }
                        if hi.is_finite() && z[i] >= hi - tol {
                            out.rays.push(unit(i, 1.0));
                        }
                    }
                }
                CoordBound::Free => {}
            }
        }
        for hs in &self.halfspaces {
            let scale = linalg::norm2(&hs.a).max(1.0);
            if linalg::dot(&hs.a, z) >= hs.b - tol * scale {
                out.rays.push(hs.a.clone());
            }
        }
        Ok(out)
    }
}

/// The endpoint cost `h`.
#[derive(Debug, Clone)]
pub struct CostSpec {
    /// Expression in `(t1, x1_1.., t2, x2_1.., v)`.
    pub h: Expr,
}

impl CostSpec {
    /// Evaluates `h` at an endpoint tuple plus variation value.
    pub fn eval(&self, endpoint: &[f64], v: f64) -> Result<f64, crate::expr::EvalError> {
        let mut env = endpoint.to_vec();
        env.push(v);
        self.h.eval(&env)
    }

    /// Symbolic gradient of `h` in all `2 + 2n + 1` variables.
    pub fn gradient(&self, n: usize) -> Vec<Expr> {
        (0..2 + 2 * n + 1).map(|i| self.h.differentiate(i)).collect()
    }
}

/// A complete problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub fields: VectorFieldSet,
    pub cone: ControlCone,
    pub target: TargetSpec,
    pub cost: CostSpec,
    /// Variation bound; `f64::INFINITY` disables the constraint.
    pub k: f64,
}

/// Outcome of [`validate`]: a list of human-readable violations, empty for
/// a valid problem.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "valid")
        } else {
            for v in &self.violations {
                writeln!(f, "- {v}")?;
            }
            Ok(())
        }
    }
}

/// Structural validation of a problem: dimensions, cone well-formedness,
/// target consistency and non-emptiness, positivity of `K`, and a sampled
/// monotonicity check of `h` in the variation argument.
pub fn validate(p: &ProblemSpec) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = p.fields.n;
    let m = p.fields.m;
    let mut push = |msg: String| rep.violations.push(msg);

    if p.fields.f.len() != n {
        push(format!("drift has {} entries, expected n={n}", p.fields.f.len()));
    }
    if p.fields.g.len() != m {
        push(format!("{} control columns, expected m={m}", p.fields.g.len()));
    }
    for (j, col) in p.fields.g.iter().enumerate() {
        if col.len() != n {
            push(format!("control column {} has {} entries, expected n={n}", j + 1, col.len()));
        }
    }
    for e in p.fields.f.iter().chain(p.fields.g.iter().flatten()) {
        if let Some(idx) = e.max_var_index() {
            if idx > n {
                push(format!("field expression `{e}` references variable index {idx} beyond (t, x1..x{n})"));
            }
        }
    }
    if p.cone.dim() != m {
        push(format!("cone dimension {} does not match m={m}", p.cone.dim()));
    }
    if let ControlCone::Generated { generators, dim } = &p.cone {
        if m > 6 {
            push(format!("generated cones support m <= 6, got m={m}"));
        }
        if generators.is_empty() {
            push("generated cone has no generators".to_string());
        }
        for (i, g) in generators.iter().enumerate() {
            if g.len() != *dim {
                push(format!("generator {} has length {}, expected {dim}", i + 1, g.len()));
            } else {
                let norm = linalg::norm2(g);
                if (norm - 1.0).abs() > 1e-9 {
                    push(format!("generator {} has norm {norm:.12}, expected 1", i + 1));
                }
            }
        }
    }
    if p.target.len() != 2 + 2 * n {
        push(format!("target constrains {} coordinates, expected {}", p.target.len(), 2 + 2 * n));
    }
    let mut box_ok = true;
    for (i, c) in p.target.coords.iter().enumerate() {
        if let CoordBound::Interval { lo, hi } = c {
            if lo > hi {
                push(format!("target coordinate {i} has lo {lo} > hi {hi}"));
                box_ok = false;
            }
        }
    }
    for (i, hs) in p.target.halfspaces.iter().enumerate() {
        if hs.a.len() != p.target.len() {
            push(format!("halfspace {} has {} coefficients, expected {}", i + 1, hs.a.len(), p.target.len()));
            box_ok = false;
        }
    }
    if box_ok && p.target.len() == 2 + 2 * n {
        let rows = p.target.rows();
        let lp = LpProblem {
            num_vars: p.target.len(),
            eq: rows.eq,
            ub: rows.ub,
            bounds: vec![],
        };
        match lp_feasible(&lp, 1e-9) {
            Ok(LpStatus::Feasible(_)) => {}
            Ok(LpStatus::Infeasible { .. }) => push("target set is empty".to_string()),
            Err(e) => push(format!("target feasibility check failed: {e}")),
        }
    }
    if !(p.k > 0.0) {
        push("K must be positive".to_string());
    }
    if let Some(idx) = p.cost.h.max_var_index() {
        if idx > 2 + 2 * n {
            push(format!("cost references variable index {idx} beyond (t1, x1, t2, x2, v)"));
        }
    }
    // Sampled monotonicity of h in v on a deterministic low-discrepancy
    // point set; domain errors are skipped.
    let dv = p.cost.h.differentiate(2 + 2 * n);
    let dim = 2 + 2 * n + 1;
    let mut worst: Option<f64> = None;
    for k in 0..200usize {
        let mut env = vec![0.0; dim];
        for (i, e) in env.iter_mut().enumerate() {
            let golden = 0.618_033_988_749_894_9_f64;
            let val = ((k as f64 + 1.0) * golden * (i as f64 + 1.7)).fract();
            *e = 6.0 * val - 3.0;
        }
        env[dim - 1] = env[dim - 1].abs();
        if let Ok(val) = dv.eval(&env) {
            if val < -1e-9 && worst.map_or(true, |w| val < w) {
                worst = Some(val);
            }
        }
    }
    if let Some(w) = worst {
        push(format!("cost is decreasing in v at a sampled point (dh/dv = {w:.3e})"));
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;

    fn parse_field(src: &str, n: usize) -> Expr {
        let names = field_var_names(n);
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        Expr::parse(src, &refs).unwrap()
    }

    fn parse_cost(src: &str, n: usize) -> Expr {
        let names = cost_var_names(n);
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        Expr::parse(src, &refs).unwrap()
    }

    fn sample_problem() -> ProblemSpec {
        ProblemSpec {
            fields: VectorFieldSet {
                n: 2,
                m: 1,
                f: vec![parse_field("0", 2), parse_field("x1", 2)],
                g: vec![vec![parse_field("1", 2), parse_field("0", 2)]],
            },
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
                h: parse_cost("-x2_1", 2),
            },
            k: 1.0,
        }
    }

    #[test]
    fn validate_accepts_sample() {
        let rep = validate(&sample_problem());
        assert!(rep.is_valid(), "{rep}");
    }

    #[test]
    fn validate_rejects_nonpositive_k() {
        let mut p = sample_problem();
        p.k = 0.0;
        let rep = validate(&p);
        assert!(rep.violations.iter().any(|v| v.contains("K must be positive")), "{rep}");
    }

    #[test]
    fn validate_reports_decreasing_cost_in_v() {
        let mut p = sample_problem();
        p.cost.h = parse_cost("-v", 2);
        let rep = validate(&p);
        assert!(rep.violations.iter().any(|v| v.contains("decreasing in v")), "{rep}");
    }

    #[test]
    fn validate_reports_empty_target() {
        let mut p = sample_problem();
        p.target.halfspaces = vec![
            Halfspace {
                a: vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                b: -2.0,
            },
        ];
        // Coordinate 3 is fixed at 1 but the halfspace demands it <= -2.
        let rep = validate(&p);
        assert!(rep.violations.iter().any(|v| v.contains("empty")), "{rep}");
    }

    #[test]
    fn orthant_projection_clamps() {
        let cone = ControlCone::Orthant {
            tags: vec![AxisTag::Free, AxisTag::NonNeg, AxisTag::NonPos, AxisTag::Zero],
        };
        assert_eq!(
            cone.project(&[1.5, -3.0, 2.0, 7.0]),
            vec![1.5, 0.0, 0.0, 0.0]
        );
        let half = ControlCone::Orthant {
            tags: vec![AxisTag::NonNeg],
        };
        assert_eq!(half.project(&[-2.0]), vec![0.0]);
    }

    #[test]
    fn generated_projection_matches_hand_value() {
        let cone = ControlCone::Generated {
            dim: 2,
            generators: vec![
                vec![1.0, 0.0],
                vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
            ],
        };
        let p = cone.project(&[0.0, 1.0]);
        assert!((p[0] - 0.5).abs() < 1e-10, "{p:?}");
        assert!((p[1] - 0.5).abs() < 1e-10, "{p:?}");
    }

    #[test]
    fn projection_orthogonality_invariants() {
        let cones = [
            ControlCone::Full { dim: 3 },
            ControlCone::Orthant {
                tags: vec![AxisTag::NonNeg, AxisTag::Free, AxisTag::NonPos],
            },
            ControlCone::Generated {
                dim: 3,
                generators: vec![
                    vec![1.0, 0.0, 0.0],
                    vec![0.0, 1.0, 0.0],
                    vec![0.0, std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
                ],
            },
        ];
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
        };
        for cone in &cones {
            for _ in 0..50 {
                let q: Vec<f64> = (0..3).map(|_| next()).collect();
                let p = cone.project(&q);
                let resid: Vec<f64> = q.iter().zip(&p).map(|(a, b)| a - b).collect();
                assert!(linalg::dot(&resid, &p).abs() <= 1e-10, "{cone:?} {q:?}");
                for d in cone.probe_directions() {
                    assert!(linalg::dot(&resid, &d) <= 1e-10, "{cone:?} {q:?} {d:?}");
                }
            }
        }
    }

    #[test]
    fn sphere_support_matches_projection_norm() {
        let cone = ControlCone::Orthant {
            tags: vec![AxisTag::NonNeg, AxisTag::NonNeg],
        };
        let (val, dir) = cone.sphere_support(&[3.0, 4.0]).unwrap();
        assert!((val - 5.0).abs() < 1e-12);
        assert!((dir[0] - 0.6).abs() < 1e-12 && (dir[1] - 0.8).abs() < 1e-12);
        // Polar-side query: projection vanishes, best axis is reported.
        let (val, dir) = cone.sphere_support(&[-1.0, -4.0]).unwrap();
        assert!((val + 1.0).abs() < 1e-12);
        assert_eq!(dir, vec![1.0, 0.0]);
        assert!(ControlCone::Orthant {
            tags: vec![AxisTag::Zero]
        }
        .sphere_support(&[5.0])
        .is_none());
    }

    #[test]
    fn normal_cone_of_sample_target() {
        let p = sample_problem();
        let z = [0.0, 0.0, 0.0, 1.0, 7.0, 0.0];
        let nc = p.target.normal_cone(&z, 1e-7).unwrap();
        // Four fixed coordinates, one free, one active upper bound.
        assert_eq!(nc.linealities.len(), 4);
        assert_eq!(nc.rays.len(), 1);
        assert_eq!(nc.rays[0], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        // Inactive upper bound contributes nothing.
        let z2 = [0.0, 0.0, 0.0, 1.0, 7.0, -0.5];
        let nc2 = p.target.normal_cone(&z2, 1e-7).unwrap();
        assert!(nc2.rays.is_empty());
        // Off-target point errors.
        let bad = [0.0, 0.0, 0.0, 1.0, 7.0, 0.5];
        assert!(matches!(
            p.target.normal_cone(&bad, 1e-7),
            Err(ModelError::NotOnTarget { .. })
        ));
    }

    #[test]
    fn normal_cone_inequality_on_samples() {
        let p = sample_problem();
        let z = [0.0, 0.0, 0.0, 1.0, 7.0, 0.0];
        let nc = p.target.normal_cone(&z, 1e-7).unwrap();
        // For any ray zeta and nearby z' in T, <zeta, z' - z> <= 0 up to
        // tolerance.
        for k in 0..50 {
            let shift = -(k as f64) * 0.01;
            let zp = [0.0, 0.0, 0.0, 1.0, 7.0 + (k as f64) * 0.13 - 0.3, shift];
            for ray in &nc.rays {
                let diff: Vec<f64> = zp.iter().zip(&z).map(|(a, b)| a - b).collect();
                let gap = linalg::dot(ray, &diff);
                let scale = linalg::norm2(&diff);
                assert!(gap <= 1e-7 * scale.max(1.0), "{gap}");
            }
        }
    }

    #[test]
    fn target_projection_with_halfspace() {
        let t = TargetSpec {
            coords: vec![
                CoordBound::Interval { lo: 0.0, hi: 2.0 },
                CoordBound::Interval { lo: 0.0, hi: 2.0 },
            ],
            halfspaces: vec![Halfspace {
                a: vec![1.0, 1.0],
                b: 1.0,
            }],
            epigraph_declared: false,
        };
        let p = t.project(&[1.0, 1.0]);
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6, "{p:?}");
        assert!((t.distance(&[1.0, 1.0]) - 0.5f64.hypot(0.5)).abs() < 1e-6);
    }

    #[test]
    fn target_rows_shapes() {
        let p = sample_problem();
        let rows = p.target.rows();
        assert_eq!(rows.eq.len(), 4);
        assert_eq!(rows.ub.len(), 1);
        assert_eq!(rows.ub[0].0[5], 1.0);
        assert_eq!(rows.ub[0].1, 0.0);
    }
}
