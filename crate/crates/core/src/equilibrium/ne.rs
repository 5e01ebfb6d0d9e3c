//! Nash equilibrium by damped best-response iteration.
//!
//! Commuter thresholds move toward the current net route value,
//! `theta <- (1 - alpha) theta + alpha (spread - kappa)`. Routes whose cost
//! distribution has point masses are iterated in quantity space instead,
//! since a threshold cannot express partial participation of an atom.
//! On-demand flows take a projected step along the payoff of the marginal
//! driver on each route, `x <- P(x + beta (w - theta*))`, onto
//! `{x >= 0, sum x <= finite mass}`. Both steps are halved whenever the
//! residual grows and cautiously regrown after a run of improvements.

use super::{
    finish, fixed_point_residual, split_is_degenerate, Concept, EquilibriumError,
    EquilibriumResult, RouteValues, SolverOptions, Telemetry,
};
use crate::dispatch::{solve_dispatch, RouteStorage};
use crate::drivers::{CostDistribution, DriverPopulation, PopulationKind};
use crate::network::PowerNetwork;

const GROW_AFTER: usize = 10;
const MIN_STEP_RATIO: f64 = 1e-6;

pub(super) fn solve(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    kind: PopulationKind,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    let n = net.buses();
    let routes = n * n;
    let dists = &pop.commuter.routes;
    let flex_dist = &pop.ondemand.dist;
    let mut telemetry = Telemetry::default();

    let base = solve_dispatch(net, &RouteStorage::zeros(n))?;
    telemetry.dispatch_solves += 1;
    let v0 = RouteValues::new(pop, &base);

    // Myopic starting point for thresholds, empty flexible fleet.
    let atom_route: Vec<bool> = dists.iter().map(|d| d.has_atoms()).collect();
    let mut theta = v0.fix.clone();
    let mut q: Vec<f64> = dists.iter().zip(&theta).map(|(d, &t)| d.cdf(t)).collect();
    let mut x = vec![0.0; routes];

    let beta0 = initial_quantity_step(net, pop, &v0, &mut telemetry)?;
    let mut beta = beta0;
    let mut alpha = opts.damping;
    let mut prev = f64::INFINITY;
    let mut streak = 0;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;

    for iter in 0..opts.max_iter {
        let s_fix: Vec<f64> = (0..routes)
            .map(|r| if atom_route[r] { q[r] } else { dists[r].cdf(theta[r]) })
            .collect();
        let total = s_fix.iter().zip(&x).map(|(a, b)| a + b).collect();
        let sol = solve_dispatch(net, &RouteStorage::from_vec(n, total)?)?;
        telemetry.dispatch_solves += 1;
        telemetry.iterations = iter + 1;
        telemetry.residual_history += 1;
        let values = RouteValues::new(pop, &sol);
        let res = fixed_point_residual(pop, &values, &s_fix, &x);
        if best.as_ref().is_none_or(|b| res < b.0) {
            best = Some((res, s_fix.clone(), x.clone()));
        }
        if res <= opts.tol {
            break;
        }

        if res > prev {
            alpha = (alpha * 0.5).max(opts.damping * MIN_STEP_RATIO);
            beta = (beta * 0.5).max(beta0 * MIN_STEP_RATIO);
            streak = 0;
        } else {
            streak += 1;
            if streak >= GROW_AFTER {
                alpha = (alpha * 1.5).min(opts.damping);
                beta = (beta * 1.5).min(beta0);
                streak = 0;
            }
        }
        prev = res;

        for r in 0..routes {
            if dists[r].is_empty() {
                continue;
            }
            let v = values.fix[r];
            if atom_route[r] {
                q[r] = quantity_step(&dists[r], q[r], v, beta);
            } else {
                theta[r] += alpha * (v - theta[r]);
            }
        }

        if pop.has_ondemand() {
            let mass = flex_dist.finite_mass();
            let (lo, hi) = flex_dist.inverse_interval(x.iter().sum());
            let marginal = values.flex_max.clamp(lo, hi);
            let y: Vec<f64> = (0..routes)
                .map(|r| {
                    if values.flex[r].is_finite() {
                        x[r] + beta * (values.flex[r] - marginal)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            x = project_capped_simplex(&y, mass);
        }
    }

    let (_, s_fix, s_flex) = best.expect("at least one iteration");
    let (mut result, dispatch) = finish(
        net,
        pop,
        Concept::Nash,
        kind,
        s_fix,
        s_flex,
        None,
        telemetry,
        opts,
    )?;
    let mut telemetry = result.telemetry;
    if pop.has_ondemand() {
        let values = RouteValues::new(pop, &dispatch);
        result.flags.degenerate_split = split_is_degenerate(
            net,
            pop,
            &result.s_fix,
            &result.s_flex,
            &values,
            &mut telemetry,
        )?;
    }
    result.telemetry = telemetry;
    Ok(result)
}

/// Moves supply `q` toward consistency with route value `v`.
fn quantity_step(dist: &CostDistribution, q: f64, v: f64, beta: f64) -> f64 {
    let (lo, hi) = dist.inverse_interval(q);
    let push = if v > hi {
        v - hi
    } else if v < lo {
        v - lo
    } else {
        0.0
    };
    (q + beta * push).clamp(0.0, dist.finite_mass())
}

/// Step size in mass per unit of cost: the inverse of the combined slope of
/// the marginal driver's cost and of the route value, the latter measured by
/// one probe dispatch on the most valuable route.
fn initial_quantity_step(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    v0: &RouteValues,
    telemetry: &mut Telemetry,
) -> Result<f64, EquilibriumError> {
    let n = net.buses();
    let spread_of = |d: &CostDistribution| match (d.theta_min(), d.theta_max()) {
        (Some(a), Some(b)) if d.finite_mass() > 0.0 => (b - a) / d.finite_mass(),
        _ => 0.0,
    };
    let mut mass: f64 = pop.ondemand.dist.finite_mass();
    let mut slope: f64 = spread_of(&pop.ondemand.dist);
    for d in &pop.commuter.routes {
        if d.has_atoms() {
            mass = mass.max(d.finite_mass());
            slope = slope.max(spread_of(d));
        }
    }
    if mass == 0.0 {
        return Ok(1.0);
    }

    let probe = match v0.best_flex_route(0.0) {
        Some(r) => r,
        None => (0..n * n)
            .max_by(|&a, &b| v0.fix[a].total_cmp(&v0.fix[b]))
            .unwrap_or(0),
    };
    let delta = 0.05 * mass;
    let mut s = RouteStorage::zeros(n);
    s.set(probe / n, probe % n, delta);
    let sol = solve_dispatch(net, &s)?;
    telemetry.dispatch_solves += 1;
    let after = RouteValues::new(pop, &sol);
    let impact = ((v0.fix[probe] - after.fix[probe]) / delta).max(0.0);
    let curvature = slope + impact;
    Ok(if curvature > 0.0 {
        (0.5 / curvature).min(1e3 * mass)
    } else {
        mass
    })
}

/// Euclidean projection onto `{x >= 0, sum x <= cap}`; `-inf` entries stay at 0.
pub(crate) fn project_capped_simplex(y: &[f64], cap: f64) -> Vec<f64> {
    let pos: f64 = y.iter().map(|v| v.max(0.0)).sum();
    if pos <= cap {
        return y.iter().map(|v| v.max(0.0)).collect();
    }
    let mut sorted: Vec<f64> = y.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - cap) / (k + 1) as f64;
        if v - t > 0.0 {
            tau = t;
        }
    }
    y.iter().map(|v| (v - tau).max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_onto_capped_simplex() {
        assert_eq!(project_capped_simplex(&[0.2, -1.0, 0.3], 1.0), vec![0.2, 0.0, 0.3]);
        let p = project_capped_simplex(&[1.0, 1.0, f64::NEG_INFINITY], 1.0);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15 && p[2] == 0.0);
        let p = project_capped_simplex(&[2.0, 0.5], 1.0);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] == 0.0);
    }

    #[test]
    fn quantity_step_respects_atoms() {
        let d = CostDistribution::atom(5.0, 0.4).unwrap();
        assert_eq!(quantity_step(&d, 0.2, 5.0, 1.0), 0.2);
        assert!((quantity_step(&d, 0.2, 5.1, 1.0) - 0.3).abs() < 1e-12);
        assert_eq!(quantity_step(&d, 0.2, 9.0, 1.0), 0.4);
        assert_eq!(quantity_step(&d, 0.2, 1.0, 1.0), 0.0);
    }
}
