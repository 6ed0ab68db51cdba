//! Built-in example problems with reference minimizers, multiplier sets,
//! and known optimal values, used by the command line and the test
//! suites.

use crate::dynamics::AdjointPath;
use crate::expr::Expr;
use crate::model::{
    AxisTag, ControlCone, CoordBound, CostSpec, ProblemSpec, TargetSpec, VectorFieldSet,
};
use crate::pmp::MultiplierSet;
use crate::reparam::ExtendedProcess;

/// One bundled example: problem data, a reference extended minimizer on a
/// uniform grid, a verified multiplier set for it, and reference values.
pub struct BundledExample {
    pub id: &'static str,
    pub title: &'static str,
    pub summary: &'static str,
    pub problem: ProblemSpec,
    pub minimizer: ExtendedProcess,
    pub multipliers: MultiplierSet,
    /// Optimal cost of the extended problem.
    pub extended_cost: f64,
    /// Infimum over strict-sense processes, when known.
    pub strict_infimum: Option<f64>,
}

/// All bundled examples in display order.
pub fn examples() -> Vec<BundledExample> {
    vec![ex1(), ex2(), ex3()]
}

/// Looks up one example by its id.
pub fn by_id(id: &str) -> Option<BundledExample> {
    match id {
        "ex1" => Some(ex1()),
        "ex2" => Some(ex2()),
        "ex3" => Some(ex3()),
        _ => None,
    }
}

/// Ids of all bundled examples.
pub fn ids() -> Vec<&'static str> {
    vec!["ex1", "ex2", "ex3"]
}

fn parse_field(src: &str, n: usize) -> Expr {
    let names = crate::model::field_var_names(n);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    Expr::parse(src, &refs).expect("bundled field expression parses")
}

fn parse_cost(src: &str, n: usize) -> Expr {
    let names = crate::model::cost_var_names(n);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    Expr::parse(src, &refs).expect("bundled cost expression parses")
}

const HALF_INTERVALS: usize = 20;

/// Uniform grid on `[0, 2]` with the leg boundary at `s = 1` on a node.
fn two_leg_grid() -> Vec<f64> {
    (0..=2 * HALF_INTERVALS)
        .map(|k| k as f64 / HALF_INTERVALS as f64)
        .collect()
}

/// Two-state problem with one nonnegative impulse channel and a
/// variation bound that the minimizer saturates: the impulse moves the
/// first state, the drift feeds it into the second, and the cost rewards
/// the first state at the fixed final time. The extended optimum -1 is
/// unreachable by strict-sense processes, whose infimum is 0.
pub fn ex1() -> BundledExample {
    let n = 2;
    let fields = VectorFieldSet {
        n,
        m: 1,
        f: vec![parse_field("0", n), parse_field("x1", n)],
        g: vec![vec![parse_field("1", n), parse_field("0", n)]],
    };
    let problem = ProblemSpec {
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
            h: parse_cost("-x2_1", n),
        },
        k: 1.0,
    };
    let grid = two_leg_grid();
    let nodes = grid.len();
    let mut y0 = Vec::with_capacity(nodes);
    let mut y = Vec::with_capacity(nodes);
    let mut nu = Vec::with_capacity(nodes);
    let mut p0 = Vec::with_capacity(nodes);
    let mut p = Vec::with_capacity(nodes);
    for &s in &grid {
        y0.push(s.min(1.0));
        y.push(vec![(s - 1.0).max(0.0), 0.0]);
        nu.push((s - 1.0).max(0.0));
        p0.push(0.0);
        p.push(vec![(s - 1.0).min(0.0), -1.0]);
    }
    let w0: Vec<f64> = (0..nodes - 1)
        .map(|k| if k < HALF_INTERVALS { 1.0 } else { 0.0 })
        .collect();
    let w: Vec<Vec<f64>> = (0..nodes - 1)
        .map(|k| vec![if k < HALF_INTERVALS { 0.0 } else { 1.0 }])
        .collect();
    BundledExample {
        id: "ex1",
        title: "terminal impulse with saturated variation bound",
        summary: "scalar impulse channel feeding a drift; extended optimum -1, \
                  strict-sense infimum 0 (an infimum gap)",
        problem,
        minimizer: ExtendedProcess {
            grid,
            y0,
            y,
            nu,
            w0,
            w,
        },
        multipliers: MultiplierSet {
            path: AdjointPath { p0, p },
            pi: 0.0,
            lambda: 0.0,
        },
        extended_cost: -1.0,
        strict_infimum: Some(0.0),
    }
}

fn integrator_target() -> TargetSpec {
    TargetSpec {
        coords: vec![
            CoordBound::Fixed(0.0),
            CoordBound::Fixed(1.0),
            CoordBound::Fixed(0.0),
            CoordBound::Fixed(0.0),
            CoordBound::Fixed(1.0),
            CoordBound::Interval {
                lo: f64::NEG_INFINITY,
                hi: 0.0,
            },
            CoordBound::Interval {
                lo: f64::NEG_INFINITY,
                hi: 0.0,
            },
            CoordBound::Interval {
                lo: f64::NEG_INFINITY,
                hi: 0.0,
            },
        ],
        halfspaces: vec![],
        epigraph_declared: false,
    }
}

fn integrator_gates(n: usize) -> Vec<Vec<Expr>> {
    vec![
        vec![
            parse_field("1", n),
            parse_field("0", n),
            parse_field("x2", n),
        ],
        vec![
            parse_field("0", n),
            parse_field("1", n),
            parse_field("-x1", n),
        ],
    ]
}

/// Shared minimizer of the two integrator examples: drift for one unit
/// of pseudo-time, then a unit impulse along the negative first channel.
fn integrator_minimizer() -> ExtendedProcess {
    let grid = two_leg_grid();
    let nodes = grid.len();
    let mut y0 = Vec::with_capacity(nodes);
    let mut y = Vec::with_capacity(nodes);
    let mut nu = Vec::with_capacity(nodes);
    for &s in &grid {
        y0.push(s.min(1.0));
        y.push(vec![if s <= 1.0 { 1.0 } else { 2.0 - s }, 0.0, 0.0]);
        nu.push((s - 1.0).max(0.0));
    }
    let w0: Vec<f64> = (0..nodes - 1)
        .map(|k| if k < HALF_INTERVALS { 1.0 } else { 0.0 })
        .collect();
    let w: Vec<Vec<f64>> = (0..nodes - 1)
        .map(|k| {
            if k < HALF_INTERVALS {
                vec![0.0, 0.0]
            } else {
                vec![-1.0, 0.0]
            }
        })
        .collect();
    ExtendedProcess {
        grid,
        y0,
        y,
        nu,
        w0,
        w,
    }
}

/// Three-state nonholonomic integrator with a drift term and a free
/// two-channel cone. The unique minimizer is a normal extremal, so there
/// is no infimum gap.
pub fn ex2() -> BundledExample {
    let n = 3;
    let fields = VectorFieldSet {
        n,
        m: 2,
        f: vec![
            parse_field("0", n),
            parse_field("x2", n),
            parse_field("0", n),
        ],
        g: integrator_gates(n),
    };
    let problem = ProblemSpec {
        fields,
        cone: ControlCone::Full { dim: 2 },
        target: integrator_target(),
        cost: CostSpec {
            h: parse_cost("-x2_1", n),
        },
        k: 2.0,
    };
    let minimizer = integrator_minimizer();
    let nodes = minimizer.grid.len();
    BundledExample {
        id: "ex2",
        title: "nonholonomic integrator with drift",
        summary: "three-state integrator with drift; the minimizer is a normal \
                  extremal and no infimum gap occurs",
        problem,
        minimizer,
        multipliers: MultiplierSet {
            path: AdjointPath {
                p0: vec![0.0; nodes],
                p: vec![vec![0.0, 0.0, 0.0]; nodes],
            },
            pi: 0.0,
            lambda: 1.0,
        },
        extended_cost: 0.0,
        strict_infimum: Some(0.0),
    }
}

/// Driftless variant of the integrator with a one-sided second channel.
/// The minimizer is an abnormal extremal, but the vanishing drift makes
/// every extended process strictifiable, so there is still no gap.
pub fn ex3() -> BundledExample {
    let n = 3;
    let fields = VectorFieldSet {
        n,
        m: 2,
        f: vec![
            parse_field("0", n),
            parse_field("0", n),
            parse_field("0", n),
        ],
        g: integrator_gates(n),
    };
    let problem = ProblemSpec {
        fields,
        cone: ControlCone::Orthant {
            tags: vec![AxisTag::Free, AxisTag::NonNeg],
        },
        target: integrator_target(),
        cost: CostSpec {
            h: parse_cost("-x2_1", n),
        },
        k: 2.0,
    };
    let minimizer = integrator_minimizer();
    let grid = minimizer.grid.clone();
    let nodes = grid.len();
    let mut p = Vec::with_capacity(nodes);
    for &s in &grid {
        let p2 = if s <= 1.0 { -2.0 } else { -(1.0 + s) };
        p.push(vec![0.0, p2, -1.0]);
    }
    BundledExample {
        id: "ex3",
        title: "driftless integrator with one-sided channel",
        summary: "driftless three-state integrator; the minimizer is abnormal, \
                  yet strictification certifies the absence of a gap",
        problem,
        minimizer,
        multipliers: MultiplierSet {
            path: AdjointPath {
                p0: vec![0.0; nodes],
                p,
            },
            pi: 0.0,
            lambda: 0.0,
        },
        extended_cost: 0.0,
        strict_infimum: Some(0.0),
    }
}
