mod common;

use evshare::{
    build_shift_factors, kkt_report, solve_dispatch, Branch, GenCost, Line, PowerNetwork,
    RouteStorage, Utility,
};
use proptest::prelude::*;

/// A connected network on `n` buses: a random spanning tree plus one extra
/// line, cheap generation at bus 0, dearer generation at the last bus and
/// peak demand everywhere else.
fn network(n: usize, parents: &[usize], reactances: &[f64], limit: f64, slack: usize) -> PowerNetwork {
    let mut lines: Vec<Line> = (1..n)
        .map(|k| Line {
            branch: Branch {
                from: parents[k - 1] % k,
                to: k,
                reactance: reactances[k - 1],
            },
            capacity: if k == 1 { limit } else { 100.0 },
            both_directions: true,
        })
        .collect();
    if n > 2 {
        lines.push(Line {
            branch: Branch {
                from: 0,
                to: n - 1,
                reactance: reactances[n - 1],
            },
            capacity: 100.0,
            both_directions: true,
        });
    }
    let mut net = PowerNetwork::from_lines(n, &lines, slack).unwrap();
    for t in 0..2 {
        net.set_cost(0, t, Some(GenCost::quadratic(0.8, 8.0)));
        net.set_cost(n - 1, t, Some(GenCost::quadratic(1.7, 12.0)));
    }
    for i in 1..n {
        net.set_utility(i, 1, Some(Utility::quadratic(40.0 + i as f64, 1.0 + 0.1 * i as f64)));
    }
    net
}

fn storage(n: usize, values: &[f64]) -> RouteStorage {
    RouteStorage::from_vec(n, values[..n * n].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prices_do_not_depend_on_the_slack_bus(
        n in 2usize..=5,
        parents in prop::collection::vec(0usize..5, 4),
        reactances in prop::collection::vec(0.05f64..0.3, 5),
        limit in 1.0f64..20.0,
        slack in 0usize..5,
        s in prop::collection::vec(0.0f64..1.0, 25),
    ) {
        let a = network(n, &parents, &reactances, limit, 0);
        let b = network(n, &parents, &reactances, limit, slack % n);
        let st = storage(n, &s);
        let sa = solve_dispatch(&a, &st).unwrap();
        let sb = solve_dispatch(&b, &st).unwrap();
        prop_assert!((sa.objective - sb.objective).abs() <= 1e-7 * (1.0 + sa.objective.abs()));
        for i in 0..n {
            prop_assert!((sa.lambda1[i] - sb.lambda1[i]).abs() <= 1e-6);
            prop_assert!((sa.lambda2[i] - sb.lambda2[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn tree_shift_factors_follow_the_cut(
        n in 2usize..=6,
        parents in prop::collection::vec(0usize..6, 5),
        reactances in prop::collection::vec(0.05f64..0.3, 5),
        slack in 0usize..6,
    ) {
        let slack = slack % n;
        let branches: Vec<Branch> = (1..n)
            .map(|k| Branch { from: parents[k - 1] % k, to: k, reactance: reactances[k - 1] })
            .collect();
        let h = build_shift_factors(n, &branches, slack).unwrap();
        for (l, br) in branches.iter().enumerate() {
            // Buses on the `from` side of the cut: everything not under `to`.
            let under_to = |mut k: usize| loop {
                if k == br.to {
                    return true;
                }
                if k == 0 {
                    return false;
                }
                k = parents[k - 1] % k;
            };
            let in_a = |k: usize| !under_to(k);
            for k in 0..n {
                let expected = in_a(k) as i32 as f64 - in_a(slack) as i32 as f64;
                prop_assert!((h[(l, k)] - expected).abs() < 1e-9, "line {l} bus {k}");
            }
        }
    }

    #[test]
    fn cost_is_nonincreasing_and_convex_along_a_route(
        n in 2usize..=4,
        parents in prop::collection::vec(0usize..4, 3),
        reactances in prop::collection::vec(0.05f64..0.3, 4),
        limit in 1.0f64..10.0,
        route in 0usize..16,
        s in prop::collection::vec(0.0f64..0.5, 16),
    ) {
        let net = network(n, &parents, &reactances, limit, 0);
        let r = route % (n * n);
        let base = s[..n * n].to_vec();
        let j: Vec<f64> = (0..=12)
            .map(|k| {
                let mut v = base.clone();
                v[r] = k as f64 * 0.5;
                solve_dispatch(&net, &RouteStorage::from_vec(n, v).unwrap()).unwrap().objective
            })
            .collect();
        for w in j.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()), "{j:?}");
        }
        for w in j.windows(3) {
            prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8 * (1.0 + w[1].abs()), "{j:?}");
        }
    }

    #[test]
    fn capacity_scaling_keeps_prices(
        n in 2usize..=4,
        parents in prop::collection::vec(0usize..4, 3),
        reactances in prop::collection::vec(0.05f64..0.3, 4),
        limit in 1.0f64..10.0,
        alpha in 0.2f64..5.0,
        s in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let net = network(n, &parents, &reactances, limit, 0);
        let st = storage(n, &s);
        let scaled_st =
            RouteStorage::from_vec(n, st.as_slice().iter().map(|v| v * alpha).collect()).unwrap();
        let a = solve_dispatch(&net, &st).unwrap();
        let b = solve_dispatch(&net.scaled(alpha), &scaled_st).unwrap();
        prop_assert!((b.objective - alpha * a.objective).abs() <= 1e-6 * (1.0 + b.objective.abs()));
        for i in 0..n {
            prop_assert!((a.lambda1[i] - b.lambda1[i]).abs() <= 1e-6);
            prop_assert!((a.lambda2[i] - b.lambda2[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn every_dispatch_is_certified(
        n in 2usize..=5,
        parents in prop::collection::vec(0usize..5, 4),
        reactances in prop::collection::vec(0.05f64..0.3, 5),
        limit in 0.5f64..20.0,
        s in prop::collection::vec(0.0f64..2.0, 25),
    ) {
        let net = network(n, &parents, &reactances, limit, 0);
        let sol = solve_dispatch(&net, &storage(n, &s)).unwrap();
        let k = kkt_report(&net, &sol);
        prop_assert!(k.passes(1e-7, 1e-6), "{k:?}");
    }
}

#[test]
fn corpus_dispatch_at_zero_storage_is_certified() {
    // Off-peak prices may go negative behind a congested line; the storage
    // value formula only needs peak prices to stay nonnegative.
    for sc in common::corpus() {
        let n = sc.net.buses();
        let sol = solve_dispatch(&sc.net, &RouteStorage::zeros(n)).unwrap();
        let k = kkt_report(&sc.net, &sol);
        assert!(k.passes(1e-7, 1e-6), "{}: {k:?}", sc.name);
        assert!(sol.lambda2.iter().all(|&l| l > 0.0), "{}", sc.name);
    }
}
