//! Unilateral-deviation check for a candidate storage profile.
//!
//! Drivers are price takers, so a single driver's payoff on route `r` is
//! `value_r - theta` at the prices of the candidate. With threshold
//! participation, the participant with the highest cost on a route is the one
//! at the lower end of the inverse-CDF interval of its supply, and the
//! cheapest outsider sits at the upper end. The largest gains from stopping,
//! starting and switching are therefore attained at those two points, which
//! makes the check exact rather than sampled.

use super::{interval_gap, EquilibriumResult, RouteValues, ACTIVE_MASS};
use crate::dispatch::solve_dispatch;
use crate::drivers::DriverPopulation;
use crate::network::PowerNetwork;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub epsilon: f64,
    /// A participating commuter drops out.
    pub commuter_stop: f64,
    /// An idle commuter starts providing.
    pub commuter_start: f64,
    pub flex_stop: f64,
    pub flex_start: f64,
    /// An on-demand driver changes route.
    pub flex_switch: f64,
    /// Distance of the reported thresholds from the supply they claim.
    pub consistency: f64,
    pub max_gain: f64,
    /// Description of the worst deviation, one-based routes.
    pub worst: String,
    pub passed: bool,
}

pub fn verify_equilibrium(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    candidate: &EquilibriumResult,
    epsilon: f64,
) -> DeviationReport {
    let n = net.buses();
    let mut report = DeviationReport {
        epsilon,
        commuter_stop: 0.0,
        commuter_start: 0.0,
        flex_stop: 0.0,
        flex_start: 0.0,
        flex_switch: 0.0,
        consistency: 0.0,
        max_gain: 0.0,
        worst: String::new(),
        passed: false,
    };
    let sol = match solve_dispatch(net, &candidate.storage()) {
        Ok(sol) => sol,
        Err(e) => {
            report.max_gain = f64::INFINITY;
            report.worst = format!("dispatch failed: {e}");
            return report;
        }
    };
    let values = RouteValues::new(pop, &sol);
    let label = |r: usize| format!("{}->{}", r / n + 1, r % n + 1);
    let mut worst = (0.0, String::new());
    let mut note = |gain: f64, what: String| {
        if gain > worst.0 {
            worst = (gain, what);
        }
    };

    for (r, dist) in pop.commuter.routes.iter().enumerate() {
        if dist.is_empty() {
            continue;
        }
        let s = candidate.s_fix[r];
        let (lo, hi) = dist.inverse_interval(s);
        let v = values.fix[r];
        if s > 0.0 {
            let gain = lo - v;
            report.commuter_stop = report.commuter_stop.max(gain);
            note(gain, format!("commuter on {} stops (cost {lo:.6}, value {v:.6})", label(r)));
        }
        if s < dist.finite_mass() {
            let gain = v - hi;
            report.commuter_start = report.commuter_start.max(gain);
            note(gain, format!("commuter on {} starts (cost {hi:.6}, value {v:.6})", label(r)));
        }
        if let Some(&t) = candidate.thresholds_fix.get(r) {
            report.consistency = report.consistency.max(interval_gap(t, (lo, hi)));
        }
    }

    let total: f64 = candidate.s_flex.iter().sum();
    let dist = &pop.ondemand.dist;
    let (lo, hi) = dist.inverse_interval(total);
    let active: Vec<usize> = (0..n * n).filter(|&r| candidate.s_flex[r] > ACTIVE_MASS).collect();
    let best = values.best_flex_route(0.0);
    if let Some(&worst_route) = active
        .iter()
        .min_by(|&&a, &&b| values.flex[a].total_cmp(&values.flex[b]))
    {
        let w = values.flex[worst_route];
        report.flex_stop = lo - w;
        note(lo - w, format!("on-demand driver on {} stops", label(worst_route)));
        if let Some(b) = best {
            report.flex_switch = values.flex_max - w;
            note(
                values.flex_max - w,
                format!("on-demand driver switches {} -> {}", label(worst_route), label(b)),
            );
        }
    }
    if let Some(b) = best {
        if total < dist.finite_mass() {
            report.flex_start = values.flex_max - hi;
            note(values.flex_max - hi, format!("idle on-demand driver starts on {}", label(b)));
        }
    }
    if let Some(t) = candidate.threshold_flex {
        if !dist.is_empty() {
            report.consistency = report.consistency.max(interval_gap(t, (lo, hi)));
        }
    }

    report.commuter_stop = report.commuter_stop.max(0.0);
    report.commuter_start = report.commuter_start.max(0.0);
    report.flex_stop = report.flex_stop.max(0.0);
    report.flex_start = report.flex_start.max(0.0);
    report.flex_switch = report.flex_switch.max(0.0);
    report.max_gain = [
        report.commuter_stop,
        report.commuter_start,
        report.flex_stop,
        report.flex_start,
        report.flex_switch,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    report.worst = worst.1;
    report.passed = report.max_gain <= epsilon && report.consistency <= epsilon;
    report
}
