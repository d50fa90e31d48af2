//! Property tests over random feeders, small conic programs and synthetic
//! hosting-capacity series.

use chrono::{DateTime, Duration, FixedOffset};
use dhc_core::conic::ConicProblem;
use dhc_core::economics::{
    asymptote, base_profile, carbon_and_profit, curtailment_curves, pv_shape, static_limits,
    DhcProfile, Prices,
};
use dhc_core::fairness::{epsilon_constraint, jfi, jfi_lower_bound, FairnessMode, FairnessSpec};
use dhc_core::hc::{
    envelope_at, linearize, solve_hc, BoundVariant, DhcSeries, DhcStep, HcOptions,
    Hyperrectangle, Scenario, StepOutcome,
};
use dhc_core::loadflow::{distflow_residual, solve_loadflow};
use dhc_core::matrices::{compact_matrices, sign_split};
use dhc_core::network::{
    build_network, load_network, BranchSpec, BusSpec, Network, NetworkSpec, VoltageLimitsSpec,
};
use dhc_core::series::{DaytimeWindow, HeldSeries, ScalarSeries};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

/// Bus 0 is the substation; bus `k + 1` hangs off `parents[k]`.
fn feeder(parents: &[u32], rx: &[(f64, f64)], demand_kw: &[f64]) -> Network {
    let spec = NetworkSpec {
        s_base_mva: 1.0,
        v_base_kv: 4.16,
        v0_pu: 1.0,
        substation: None,
        buses: (0..=parents.len() as u32)
            .map(|id| BusSpec {
                id,
                name: None,
                p_demand_kw: if id == 0 { 0.0 } else { demand_kw[id as usize - 1] },
                q_demand_kvar: if id == 0 { 0.0 } else { 0.4 * demand_kw[id as usize - 1] },
                is_generator: id != 0,
            })
            .collect(),
        branches: parents
            .iter()
            .zip(rx)
            .enumerate()
            .map(|(k, (&p, &(r, x)))| BranchSpec {
                from: p,
                to: k as u32 + 1,
                r_pu: r,
                x_pu: x,
                l_max_pu: None,
                p_max_pu: None,
                q_max_pu: None,
            })
            .collect(),
        limits: VoltageLimitsSpec::default(),
    };
    build_network(&spec).unwrap()
}

prop_compose! {
    fn tree(max_n: u32)(n in 1..=max_n)(
        parents in (1..=n).map(|k| 0..k).collect::<Vec<_>>(),
        rx in prop::collection::vec((0.001..0.05f64, 0.001..0.05f64), n as usize),
        demand in prop::collection::vec(0.0..100.0f64, n as usize),
    ) -> (Vec<u32>, Vec<(f64, f64)>, Vec<f64>) {
        (parents, rx, demand)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compact_matrix_identities((parents, rx, demand) in tree(50)) {
        let net = feeder(&parents, &rx, &demand);
        let m = compact_matrices(&net).unwrap();
        let n = m.n();
        let id = DMatrix::<f64>::identity(n, n);
        prop_assert!((&m.c * (&id - &m.a) - &id).amax() < 1e-12);
        let mut pow = id.clone();
        for _ in 0..n {
            pow = &pow * &m.a;
        }
        prop_assert_eq!(pow.amax(), 0.0);
        prop_assert!(min_eigenvalue(&m.m_p) >= -1e-9);
        prop_assert!(min_eigenvalue(&m.m_q) >= -1e-9);
        for (whole, pos, neg) in [(&m.d_x, &m.d_x_pos, &m.d_x_neg), (&m.h, &m.h_pos, &m.h_neg)] {
            prop_assert_eq!(&(pos + neg), whole);
            prop_assert!(pos.iter().all(|v| *v >= 0.0) && neg.iter().all(|v| *v <= 0.0));
        }
        let (pos, neg) = sign_split(&m.m_p);
        prop_assert_eq!(pos + neg, m.m_p.clone());
    }

    #[test]
    fn exact_point_satisfies_compact_model((parents, rx, demand) in tree(30)) {
        let net = feeder(&parents, &rx, &demand);
        let m = compact_matrices(&net).unwrap();
        let n = net.n();
        let (p_d, q_d) = net.nominal_demand();
        let op = solve_loadflow(&net, &vec![0.0; n], &vec![0.0; n], &p_d, &q_d).unwrap();
        prop_assert!(distflow_residual(&net, &op) < 1e-10);
        let p = DVector::from_column_slice(&op.p);
        let q = DVector::from_column_slice(&op.q);
        let l = DVector::from_column_slice(&op.l);
        let (pf, qf) = m.flows(&p, &q, &l);
        let v = m.voltages(net.v0, &p, &q, &l);
        for k in 0..n {
            prop_assert!((pf[k] - op.p_flow[k]).abs() < 1e-9);
            prop_assert!((qf[k] - op.q_flow[k]).abs() < 1e-9);
            prop_assert!((v[k] - op.v[k]).abs() < 1e-9);
        }
        // power leaving the substation covers demand plus losses
        let inflow: f64 = net
            .children(0)
            .iter()
            .map(|&c| -(op.p_flow[c] - net.branches()[c].r * op.l[c]))
            .sum();
        let total: f64 = p_d.iter().sum();
        prop_assert!(inflow >= total - 1e-12);
    }

    #[test]
    fn jfi_in_unit_range(x in prop::collection::vec(0.0..10.0f64, 1..40)) {
        let n = x.len() as f64;
        let j = jfi(&x).unwrap();
        if x.iter().any(|v| *v > 0.0) {
            prop_assert!(j >= 1.0 / n - 1e-12 && j <= 1.0 + 1e-12);
        } else {
            prop_assert_eq!(j, 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn redundant_constraint_keeps_optimum(
        c in prop::collection::vec(0.1..2.0f64, 2..6),
        cap in 0.5..5.0f64,
        slack in 0.0..3.0f64,
        seed_ub in prop::collection::vec(0.2..2.0f64, 6),
    ) {
        let n = c.len();
        let build = |extra: bool| {
            let mut pb = ConicProblem::new();
            let x = pb.add_vars("x", n);
            let mut total = dhc_core::conic::Affine::zero();
            let mut obj = dhc_core::conic::Affine::zero();
            for i in 0..n {
                pb.set_lower(x.get(i), 0.0);
                pb.set_upper(x.get(i), seed_ub[i]);
                total.add_term(x.get(i), 1.0);
                obj.add_term(x.get(i), c[i]);
            }
            pb.add_le(total.clone(), cap);
            if extra {
                pb.add_le(total, cap + slack);
            }
            pb.maximize(obj);
            pb.solve(1e-9).unwrap()
        };
        let (a, b) = (build(false), build(true));
        prop_assert!(a.is_optimal() && b.is_optimal());
        prop_assert!((a.objective - b.objective).abs() <= 1e-6 * (1.0 + a.objective.abs()));
    }

    #[test]
    fn fairness_constraint_bounds_jfi(
        ub in prop::collection::vec(0.01..3.0f64, 2..8),
        eps in 0.0..=1.0f64,
        proportional in any::<bool>(),
        raw_alpha in prop::collection::vec(0.1..1.0f64, 8),
    ) {
        let n = ub.len();
        let alpha: Vec<f64> = {
            let s: f64 = raw_alpha[..n].iter().sum();
            raw_alpha[..n].iter().map(|a| a / s).collect()
        };
        let mode = if proportional { FairnessMode::Proportional } else { FairnessMode::Uniform };
        let spec = FairnessSpec::new(eps, mode).unwrap();
        let mut pb = ConicProblem::new();
        let x = pb.add_vars("x", n);
        let mut obj = dhc_core::conic::Affine::zero();
        for i in 0..n {
            pb.set_lower(x.get(i), 0.0);
            pb.set_upper(x.get(i), ub[i]);
            obj.add_term(x.get(i), 1.0);
        }
        let vars: Vec<_> = x.vars().collect();
        epsilon_constraint(&mut pb, &spec, &vars, proportional.then_some(&alpha[..])).unwrap();
        pb.maximize(obj);
        let sol = pb.solve(1e-9).unwrap();
        prop_assert!(sol.is_optimal());
        let w: Vec<f64> = sol
            .values(&x)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let v = v.max(0.0);
                if proportional { v / alpha[i] } else { v }
            })
            .collect();
        if w.iter().sum::<f64>() > 1e-6 {
            prop_assert!(jfi(&w).unwrap() >= jfi_lower_bound(eps, n) - 1e-6);
        }
    }
}

fn four_bus() -> Network {
    load_network(fixture("fourbus.json")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn envelopes_bracket_exact_currents(scale in 0.5..1.5f64, inj in -0.01..0.02f64) {
        let net = four_bus();
        let m = compact_matrices(&net).unwrap();
        let (p_d, q_d) = net.nominal_demand();
        let p_d: Vec<f64> = p_d.iter().map(|v| v * scale).collect();
        let q_d: Vec<f64> = q_d.iter().map(|v| v * scale).collect();
        let lin = linearize(&net, &p_d, &q_d).unwrap();
        let n = net.n();
        let mut pg = lin.p_g.clone();
        pg[net.generator_slots()[0]] += inj;
        let op = solve_loadflow(&net, &pg, &vec![0.0; n], &p_d, &q_d).unwrap();
        for variant in [BoundVariant::Soc, BoundVariant::Conservative] {
            let env = envelope_at(&m, &lin, net.v0, &op.p, &op.q, &op.l, variant);
            prop_assert!(env.converged);
            for k in 0..n {
                prop_assert!(env.l_minus[k] <= op.l[k] + 1e-12);
                prop_assert!(op.l[k] <= env.l_plus[k] + 1e-12);
                prop_assert!(env.minus[k][0] <= env.plus[k][0] + 1e-12);
                prop_assert!(env.minus[k][2] <= env.plus[k][2] + 1e-12);
            }
        }
    }

    #[test]
    fn soc_box_contains_conservative_box(scale in 0.5..1.5f64) {
        let net = four_bus();
        let m = compact_matrices(&net).unwrap();
        let (p_d, q_d) = net.nominal_demand();
        let p_d: Vec<f64> = p_d.iter().map(|v| v * scale).collect();
        let q_d: Vec<f64> = q_d.iter().map(|v| v * scale).collect();
        let s3 = Scenario::preset("s3").unwrap();
        let solve = |v| solve_hc(&net, &m, &p_d, &q_d, &s3, v, HcOptions::default()).unwrap();
        let soc = solve(BoundVariant::Soc);
        let cons = solve(BoundVariant::Conservative);
        prop_assert!(soc.contains(&cons, 1e-5), "soc {:?}/{:?} cons {:?}/{:?}",
            soc.lower_mw, soc.upper_mw, cons.lower_mw, cons.upper_mw);
    }

    #[test]
    fn more_fairness_never_raises_total(e1 in 0.0..=1.0f64, e2 in 0.0..=1.0f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let net = four_bus();
        let m = compact_matrices(&net).unwrap();
        let (p_d, q_d) = net.nominal_demand();
        let total = |eps: f64| {
            let s = Scenario::preset("s1f1").unwrap().with_epsilon(eps).unwrap();
            solve_hc(&net, &m, &p_d, &q_d, &s, BoundVariant::Soc, HcOptions::default())
                .unwrap()
                .aggregate()
                .1
        };
        prop_assert!(total(hi) <= total(lo) + 1e-5);
    }
}

fn at(minutes: i64) -> DateTime<FixedOffset> {
    DateTime::parse_from_rfc3339("2023-06-01T00:00:00-05:00").unwrap() + Duration::minutes(minutes)
}

/// One day of 30-minute steps with the given per-node upper capacities.
fn synthetic_series(upper: &[Vec<f64>]) -> DhcSeries {
    let nodes = upper[0].len();
    DhcSeries {
        scenario: "s1".into(),
        variant: BoundVariant::Soc,
        step_minutes: 30.0,
        node_ids: (1..=nodes as u32).collect(),
        generator_slots: (0..nodes).collect(),
        mw_per_pu: 1.0,
        steps: upper
            .iter()
            .enumerate()
            .map(|(k, u)| DhcStep {
                timestamp: at(30 * k as i64),
                p_demand: vec![0.0; nodes],
                outcome: StepOutcome::Solved(Hyperrectangle {
                    node_ids: (1..=nodes as u32).collect(),
                    lower_mw: vec![-1.0; nodes],
                    upper_mw: u.clone(),
                    scenario: "s1".into(),
                    variant: BoundVariant::Soc,
                    iterations: 1,
                    upper_objective: 0.0,
                    lower_objective: 0.0,
                    solver_iterations: 0,
                }),
            })
            .collect(),
    }
}

prop_compose! {
    fn synthetic_day()(nodes in 1..5usize)(
        upper in prop::collection::vec(prop::collection::vec(0.0..5.0f64, nodes), 48),
        pv in prop::collection::vec(0.0..1.0f64, 48),
        moer in prop::collection::vec(200.0..900.0f64, 48),
    ) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        (upper, pv, moer)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn economics_curves_are_monotone_and_bounded(
        (upper, mut pv, moer) in synthetic_day(),
        lambda_curt in 0.0..0.2f64,
        lambda_co2 in 0.0..300.0f64,
    ) {
        pv[24] = 1.0;
        let dhc = synthetic_series(&upper);
        let profile = DhcProfile::from_series(&dhc).unwrap();
        let stamps: Vec<_> = (0..48).map(|k| at(30 * k)).collect();
        let shape = pv_shape(
            &ScalarSeries::new(stamps.clone(), pv).unwrap(),
            DaytimeWindow::default(),
        )
        .unwrap();
        let base = base_profile(&static_limits(&dhc).unwrap(), &shape);
        let grid: Vec<f64> = (0..=30).map(|k| k as f64 * 0.1).collect();
        let curves = curtailment_curves(&profile, &shape, &base, &grid, None).unwrap();
        let lim = asymptote(&profile, &shape, &base).unwrap();
        for w in curves.windows(2) {
            prop_assert!(w[1].e_add_total_mwh >= w[0].e_add_total_mwh - 1e-12);
            prop_assert!(w[1].e_curt_total_mwh >= w[0].e_curt_total_mwh - 1e-12);
        }
        for c in &curves {
            for (a, l) in c.e_add_mwh.iter().zip(&lim) {
                prop_assert!(*a <= l + 1e-9);
            }
        }
        let held = HeldSeries::new(stamps, moer, Duration::hours(1)).unwrap();
        let prices = Prices { lambda_curt, lambda_co2, ..Prices::default() };
        let report =
            carbon_and_profit("s1", &profile, &shape, &base, &held, &grid, prices, None).unwrap();
        for c in &report.curves {
            prop_assert_eq!(c.np.unwrap(), c.c_rev.unwrap() - c.c_curt.unwrap());
        }
    }
}
