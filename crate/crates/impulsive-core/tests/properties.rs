//! Randomized invariant checks over the expression layer, the embedding,
//! cone geometry, the Hamiltonian maximization, and the integrators.

use proptest::prelude::*;

use impulsive_core::expr::Expr;
use impulsive_core::model::{
    field_var_names, AxisTag, ControlCone, CoordBound, CostSpec, ProblemSpec, TargetSpec,
    VectorFieldSet,
};
use impulsive_core::dynamics::{integrate_extended, IntegrateOptions};
use impulsive_core::pmp::hamiltonian_max_from;
use impulsive_core::reparam::{d_infty, embed, invert_embedding, d_infty_strict, StrictProcess};
use impulsive_core::solver::{solve_extended, SolveConfig};

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// A three-variable expression with a fixed shape and random coefficients:
/// `a + b*x1 + c*x2^2 + d*x1*x2 + e*sin(x1) + f*exp(0.3*x2)`.
fn shaped_expr(coef: &[f64; 6]) -> Expr {
    let src = format!(
        "({}) + ({})*x1 + ({})*x2^2 + ({})*x1*x2 + ({})*sin(x1) + ({})*exp(0.3*x2)",
        coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    );
    Expr::parse(&src, &["t", "x1", "x2"]).expect("shaped expression parses")
}

fn coef_strategy() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(-2.0f64..2.0)
}

fn point_strategy() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.5f64..1.5)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn symbolic_derivative_matches_finite_differences(
        coef in coef_strategy(),
        point in point_strategy(),
        var in 0usize..3,
    ) {
        let e = shaped_expr(&coef);
        let d = e.differentiate(var);
        let h = 1e-6;
        let mut hi = point;
        let mut lo = point;
        hi[var] += h;
        lo[var] -= h;
        let fd = (e.eval(&hi).unwrap() - e.eval(&lo).unwrap()) / (2.0 * h);
        let sym = d.eval(&point).unwrap();
        let scale = 1.0 + fd.abs().max(sym.abs());
        prop_assert!((fd - sym).abs() <= 1e-5 * scale,
            "fd {fd} vs symbolic {sym}");
    }

    #[test]
    fn display_round_trips_through_the_parser(
        coef in coef_strategy(),
        point in point_strategy(),
    ) {
        let e = shaped_expr(&coef);
        let printed = e.to_string();
        let back = Expr::parse(&printed, &["t", "x1", "x2"]).expect("printed form parses");
        let a = e.eval(&point).unwrap();
        let b = back.eval(&point).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()),
            "{printed}: {a} vs {b}");
    }
}

/// Strategy for a structurally valid strict process with the given state
/// and control dimensions, on a random grid.
fn strict_process_with(n: usize, m: usize) -> impl Strategy<Value = StrictProcess> {
    (2usize..=6).prop_flat_map(move |intervals| {
        (
            prop::collection::vec(0.05f64..0.8, intervals),
            prop::collection::vec(
                prop::collection::vec(-2.0f64..2.0, m),
                intervals,
            ),
            prop::collection::vec(
                prop::collection::vec(-3.0f64..3.0, n),
                intervals + 1,
            ),
            -1.0f64..1.0,
        )
            .prop_map(move |(steps, du, x, t0)| {
                let mut grid = vec![t0];
                for (k, dt) in steps.iter().enumerate() {
                    grid.push(grid[k] + dt);
                }
                let mut u = vec![vec![0.0; m]];
                let mut v = vec![0.0];
                for k in 0..du.len() {
                    let dt = grid[k + 1] - grid[k];
                    let prev = u[k].clone();
                    u.push(prev.iter().zip(&du[k]).map(|(a, b)| a + b * dt).collect());
                    v.push(v[k] + norm2(&du[k]) * dt);
                }
                StrictProcess { grid, x, v, u, du }
            })
    })
}

/// Strategy for a strict process with random dimensions.
fn strict_process_strategy() -> impl Strategy<Value = StrictProcess> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(n, m)| strict_process_with(n, m))
}

/// Strategy for two strict processes sharing one problem's dimensions.
fn strict_process_pair() -> impl Strategy<Value = (StrictProcess, StrictProcess)> {
    (1usize..=3, 1usize..=3)
        .prop_flat_map(|(n, m)| (strict_process_with(n, m), strict_process_with(n, m)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn embedding_image_is_canonical_and_invertible(sp in strict_process_strategy()) {
        let ep = embed(&sp).expect("embed");
        for k in 0..ep.w0.len() {
            let speed = ep.w0[k] + norm2(&ep.w[k]);
            prop_assert!(ep.w0[k] > 0.0);
            prop_assert!((speed - 1.0).abs() <= 1e-12, "interval {k}: speed {speed}");
        }
        let span = ep.s_final() - ep.grid[0];
        let identity = span - (ep.y0.last().unwrap() - ep.y0[0] + ep.nu.last().unwrap());
        prop_assert!(identity.abs() <= 1e-9);

        let back = invert_embedding(&ep).expect("invert");
        prop_assert!(d_infty_strict(&back, &sp) <= 1e-9);
    }

    #[test]
    fn process_distance_is_symmetric_and_reflexive(
        (a, b) in strict_process_pair(),
    ) {
        let ea = embed(&a).expect("embed");
        let eb = embed(&b).expect("embed");
        prop_assert!(d_infty(&ea, &ea) == 0.0);
        let ab = d_infty(&ea, &eb);
        let ba = d_infty(&eb, &ea);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(ab >= 0.0);
    }
}

/// Strategy over the three cone families in two dimensions or fewer.
fn cone_strategy() -> impl Strategy<Value = ControlCone> {
    prop_oneof![
        (1usize..=3).prop_map(|dim| ControlCone::Full { dim }),
        prop::collection::vec(0u8..4, 1..=3).prop_map(|codes| {
            let mut tags: Vec<AxisTag> = codes
                .iter()
                .map(|c| match c {
                    0 => AxisTag::Free,
                    1 => AxisTag::NonNeg,
                    2 => AxisTag::NonPos,
                    _ => AxisTag::Zero,
                })
                .collect();
            if tags.iter().all(|t| *t == AxisTag::Zero) {
                tags[0] = AxisTag::Free;
            }
            ControlCone::Orthant { tags }
        }),
        (1usize..=3, 1usize..=3).prop_flat_map(|(dim, count)| {
            prop::collection::vec(
                prop::collection::vec(-1.0f64..1.0, dim),
                count,
            )
            .prop_map(move |mut gens| {
                gens.retain(|g| norm2(g) > 1e-3);
                if gens.is_empty() {
                    let mut g = vec![0.0; dim];
                    g[0] = 1.0;
                    gens.push(g);
                }
                for g in &mut gens {
                    let n = norm2(g);
                    for v in g.iter_mut() {
                        *v /= n;
                    }
                }
                ControlCone::Generated {
                    dim,
                    generators: gens,
                }
            })
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cone_projection_is_idempotent_and_a_member(
        cone in cone_strategy(),
        raw in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let q = &raw[..cone.dim()];
        let p1 = cone.project(q);
        prop_assert!(cone.contains(&p1, 1e-7));
        let p2 = cone.project(&p1);
        let drift: f64 = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(drift <= 1e-9, "projection moved a fixed point by {drift}");
        // A projection never increases distance to the origin.
        prop_assert!(norm2(&p1) <= norm2(q) + 1e-12);
    }

    #[test]
    fn sphere_support_returns_an_attaining_unit_direction(
        cone in cone_strategy(),
        raw in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let q = &raw[..cone.dim()];
        if let Some((value, dir)) = cone.sphere_support(q) {
            prop_assert!((norm2(&dir) - 1.0).abs() <= 1e-9);
            prop_assert!(cone.contains(&dir, 1e-7));
            let attained: f64 = dir.iter().zip(q).map(|(a, b)| a * b).sum();
            prop_assert!((attained - value).abs() <= 1e-9,
                "support {value} not attained: {attained}");
            // No projected probe direction does better.
            for probe in [
                vec![1.0, 0.4, -0.2],
                vec![-0.3, 1.0, 0.7],
                vec![0.2, -0.8, 1.0],
            ] {
                let pr = cone.project(&probe[..cone.dim()]);
                let n = norm2(&pr);
                if n > 1e-9 {
                    let v: f64 = pr.iter().zip(q).map(|(a, b)| a * b / n).sum();
                    prop_assert!(v <= value + 1e-9);
                }
            }
        }
    }

    #[test]
    fn hamiltonian_max_dominates_both_branches(
        cone in cone_strategy(),
        raw in prop::collection::vec(-3.0f64..3.0, 3),
        q0 in -3.0f64..3.0,
        pi in -2.0f64..0.0,
    ) {
        let m = cone.dim();
        let q = &raw[..m];
        let p = ProblemSpec {
            fields: VectorFieldSet {
                n: 1,
                m,
                f: vec![Expr::constant(0.0)],
                g: vec![vec![Expr::constant(0.0)]; m],
            },
            cone,
            target: TargetSpec {
                coords: vec![CoordBound::Free; 4],
                halfspaces: Vec::new(),
                epigraph_declared: false,
            },
            cost: CostSpec { h: Expr::constant(0.0) },
            k: f64::INFINITY,
        };
        let hm = hamiltonian_max_from(&p, q0, q, pi);
        prop_assert!(hm.value + 1e-12 >= hm.drift_value);
        if let Some(iv) = hm.impulse_value {
            prop_assert!(hm.value + 1e-12 >= iv);
        }
        // The reported maximizer lies in the canonical control set and
        // attains the value.
        prop_assert!(hm.w0 >= -1e-12);
        let speed = hm.w0 + norm2(&hm.w);
        prop_assert!((speed - 1.0).abs() <= 1e-9);
        prop_assert!(p.cone.contains(&hm.w, 1e-7));
        let attained = q0 * hm.w0
            + hm.w.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
            + pi * norm2(&hm.w);
        prop_assert!((attained - hm.value).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn integration_keeps_time_and_variation_monotone(
        thetas in prop::collection::vec(0.0f64..1.0, 6),
        dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 6),
    ) {
        let n = 2;
        let names = field_var_names(n);
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let p = ProblemSpec {
            fields: VectorFieldSet {
                n,
                m: 2,
                f: vec![
                    Expr::parse("0.2*x2", &refs).unwrap(),
                    Expr::parse("(0-0.2)*x1", &refs).unwrap(),
                ],
                g: vec![
                    vec![Expr::constant(1.0), Expr::constant(0.0)],
                    vec![Expr::constant(0.0), Expr::constant(1.0)],
                ],
            },
            cone: ControlCone::Full { dim: 2 },
            target: TargetSpec {
                coords: vec![CoordBound::Free; 2 + 2 * n],
                halfspaces: Vec::new(),
                epigraph_declared: false,
            },
            cost: CostSpec { h: Expr::constant(0.0) },
            k: f64::INFINITY,
        };
        let intervals = thetas.len();
        let grid: Vec<f64> = (0..=intervals).map(|k| 0.4 * k as f64).collect();
        let mut w0 = Vec::new();
        let mut w = Vec::new();
        for k in 0..intervals {
            let theta = thetas[k];
            let mut d = dirs[k].clone();
            let nrm = norm2(&d).max(1e-9);
            for v in &mut d {
                *v *= (1.0 - theta) / nrm;
            }
            w0.push(theta);
            w.push(d);
        }
        let opts = IntegrateOptions::default();
        let ep = integrate_extended(&p, &grid, &w0, &w, 0.0, &[1.0, 0.0], &opts).unwrap();
        for k in 0..intervals {
            prop_assert!(ep.y0[k + 1] >= ep.y0[k] - 1e-12, "time reversed at {k}");
            prop_assert!(ep.nu[k + 1] >= ep.nu[k] - 1e-12, "variation dropped at {k}");
        }
        let span = ep.s_final() - ep.grid[0];
        let identity = span - (ep.y0.last().unwrap() - ep.y0[0] + ep.nu.last().unwrap());
        prop_assert!(identity.abs() <= 1e-9, "pseudo-time identity broke: {identity}");
    }
}

#[test]
fn solves_are_deterministic_for_a_fixed_seed() {
    let ex = impulsive_core::bundled::by_id("ex1").unwrap();
    let cfg = SolveConfig {
        n_intervals: 16,
        multistarts: 3,
        seed: 99,
        ..SolveConfig::light(99)
    };
    let a = solve_extended(&ex.problem, &cfg).expect("first solve");
    let b = solve_extended(&ex.problem, &cfg).expect("second solve");
    assert_eq!(a.cost.to_bits(), b.cost.to_bits(), "costs differ across runs");
    assert_eq!(a.run, b.run);
    assert_eq!(a.process.grid.len(), b.process.grid.len());
    for (x, y) in a.process.y.iter().flatten().zip(b.process.y.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits(), "states differ across runs");
    }
}
