mod common;

use evshare::{
    analytic_solutions, best_response_dynamics, discretize_population, solve_myopic, solve_ne,
    solve_sw, verify_equilibrium, CostDistribution, PopulationKind, SolverOptions, TwoBusParams,
};
use proptest::prelude::*;

fn params(a: f64, b: f64, margin: f64, kappa: f64, hi: f64, mass: f64) -> TwoBusParams {
    TwoBusParams {
        a,
        b,
        c: b + margin,
        kappa,
        dist: CostDistribution::uniform(0.0, hi, mass).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn two_bus_family_matches_the_closed_form(
        a in 0.5f64..3.0,
        b in 2.0f64..15.0,
        margin in 5.0f64..40.0,
        kappa in 0.0f64..4.0,
        hi in 5.0f64..40.0,
        mass in 0.3f64..=1.0,
    ) {
        let p = params(a, b, margin, kappa, hi, mass);
        let (net, pop) = (p.network(), p.population());
        let opts = SolverOptions::default();
        let myop = solve_myopic(&net, &pop, PopulationKind::Commuter).unwrap();
        let sw = solve_sw(&net, &pop, PopulationKind::Commuter, &opts).unwrap();
        let ne = solve_ne(&net, &pop, PopulationKind::Commuter, &opts).unwrap();
        let (m, s, _) = analytic_solutions(&p);
        prop_assert!((myop.total_storage() - m).abs() <= 1e-9);
        prop_assert!((sw.total_storage() - s).abs() <= 1e-6);
        prop_assert!((ne.total_storage() - s).abs() <= 1e-6);
        prop_assert!(myop.total_storage() >= ne.total_storage() - 1e-9);
        prop_assert!(ne.deviation.as_ref().unwrap().passed);
    }

    #[test]
    fn capacity_scaling_scales_storage(alpha in 0.3f64..=1.0, which in 0usize..3) {
        let sc = match which {
            0 => common::twobus(),
            1 => common::corpus().into_iter().find(|s| s.name == "h2_hybrid").unwrap(),
            _ => common::corpus().into_iter().find(|s| s.name == "o2_ondemand").unwrap(),
        };
        let kind = sc.pop.kind();
        let opts = SolverOptions::default();
        let base = solve_ne(&sc.net, &sc.pop, kind, &opts).unwrap();
        let scaled = solve_ne(&sc.net.scaled(alpha), &sc.pop.scaled(alpha), kind, &opts).unwrap();
        prop_assert!((scaled.total_storage() - alpha * base.total_storage()).abs() <= 1e-6);
        prop_assert!((scaled.objective - alpha * base.objective).abs() <= 1e-6 * base.objective.abs());
        for (x, y) in base.lambda2.iter().zip(&scaled.lambda2) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
        if let (Some(x), Some(y)) = (base.threshold_flex, scaled.threshold_flex) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }
}

#[test]
fn perturbed_equilibria_are_rejected() {
    for sc in common::corpus() {
        let kind = sc.pop.kind();
        let pop = sc.pop.restricted(kind);
        let ne = solve_ne(&sc.net, &sc.pop, kind, &SolverOptions::default()).unwrap();
        let mut off = ne.clone();
        let r = (0..off.s_fix.len())
            .max_by(|&a, &b| {
                (off.s_fix[a] + off.s_flex[a]).total_cmp(&(off.s_fix[b] + off.s_flex[b]))
            })
            .unwrap();
        if off.s_flex[r] > 0.0 {
            off.s_flex[r] *= 0.9;
        } else {
            off.s_fix[r] *= 0.9;
        }
        assert!(!verify_equilibrium(&sc.net, &pop, &off, 1e-5).passed, "{}", sc.name);
    }
}

#[test]
fn myopic_never_provides_less_than_equilibrium() {
    for sc in common::corpus() {
        let kind = sc.pop.kind();
        let myop = solve_myopic(&sc.net, &sc.pop, kind).unwrap();
        let ne = solve_ne(&sc.net, &sc.pop, kind, &SolverOptions::default()).unwrap();
        assert!(myop.total_storage() >= ne.total_storage() - 1e-9, "{}", sc.name);
    }
}

#[test]
fn on_demand_atoms_approach_the_continuum() {
    let sc = common::corpus().into_iter().find(|s| s.name == "o2_ondemand").unwrap();
    let ne = solve_ne(&sc.net, &sc.pop, PopulationKind::OnDemand, &SolverOptions::default())
        .unwrap();
    for n in [50, 200] {
        let atoms = discretize_population(&sc.pop, n).unwrap();
        let brd = best_response_dynamics(&sc.net, &atoms, 1000).unwrap();
        assert!(brd.converged);
        let gap = (brd.storage.total() - ne.total_storage()).abs();
        assert!(gap <= 3.0 / n as f64, "N = {n}: gap {gap}");
    }
}
