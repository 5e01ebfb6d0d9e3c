//! Social optimum as one convex program.
//!
//! The route capacities become variables of the dispatch program and the
//! driver cost `int_0^S (F^-1(x) + kappa) dx` enters the objective. Because
//! `F^-1` is piecewise linear and nondecreasing, that integral is a sum of
//! bounded variables with linear-plus-quadratic costs filled cheapest first.
//! On-demand drivers add one flow variable per available route, tied to the
//! pieces of the network-wide quantile function through a single equality.

use super::{
    finish, split_is_degenerate, Concept, EquilibriumError, EquilibriumResult, RouteValues,
    SolverOptions, Telemetry,
};
use crate::dispatch::{solve_qp, Capacity, DispatchModel};
use crate::drivers::{DriverPopulation, PopulationKind};
use crate::network::PowerNetwork;
use crate::qp::QpBuilder;

pub(super) fn solve(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    kind: PopulationKind,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    let n = net.buses();
    let routes = n * n;
    let mut b = QpBuilder::new();

    // Commuter pieces per route.
    let mut fix_pieces: Vec<Vec<usize>> = vec![Vec::new(); routes];
    for (r, dist) in pop.commuter.routes.iter().enumerate() {
        for seg in dist.segments() {
            let v = b.var(seg.slope, seg.theta + pop.commuter.kappa);
            b.le(&[(v, -1.0)], 0.0);
            b.le(&[(v, 1.0)], seg.width);
            fix_pieces[r].push(v);
        }
    }

    // On-demand flows and the pieces of the common quantile function.
    let mut flows: Vec<Option<usize>> = vec![None; routes];
    if pop.has_ondemand() {
        let mut link = Vec::new();
        for (r, k) in pop.ondemand.kappa.iter().enumerate() {
            if k.is_finite() {
                let v = b.var(0.0, *k);
                b.le(&[(v, -1.0)], 0.0);
                flows[r] = Some(v);
                link.push((v, 1.0));
            }
        }
        for seg in pop.ondemand.dist.segments() {
            let v = b.var(seg.slope, seg.theta);
            b.le(&[(v, -1.0)], 0.0);
            b.le(&[(v, 1.0)], seg.width);
            link.push((v, -1.0));
        }
        b.eq(&link, 0.0);
    }

    let mut caps = Vec::with_capacity(routes);
    for r in 0..routes {
        if fix_pieces[r].is_empty() && flows[r].is_none() {
            caps.push(Capacity::Fixed(0.0));
            continue;
        }
        let s = b.var(0.0, 0.0);
        let mut terms = vec![(s, 1.0)];
        terms.extend(fix_pieces[r].iter().map(|&v| (v, -1.0)));
        terms.extend(flows[r].map(|v| (v, -1.0)));
        b.eq(&terms, 0.0);
        caps.push(Capacity::Var(s));
    }
    let _model = DispatchModel::build(&mut b, net, &caps);
    let sol = solve_qp(&b.build()).map_err(crate::dispatch::DispatchError::from)?;

    let clean = |x: f64| if x < 1e-11 { 0.0 } else { x };
    let s_fix: Vec<f64> = fix_pieces
        .iter()
        .map(|vs| clean(vs.iter().map(|&v| sol.x[v]).sum()))
        .collect();
    let s_flex: Vec<f64> = flows.iter().map(|v| v.map_or(0.0, |v| clean(sol.x[v]))).collect();

    let mut telemetry = Telemetry {
        iterations: sol.iterations,
        residual_history: 0,
        dispatch_solves: 0,
    };
    let (mut result, dispatch) = finish(
        net,
        pop,
        Concept::SocialWelfare,
        kind,
        s_fix,
        s_flex,
        None,
        telemetry,
        opts,
    )?;
    telemetry = result.telemetry;
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
