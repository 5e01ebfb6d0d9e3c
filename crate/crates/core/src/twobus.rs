//! Closed-form two-bus reference: a generator with cost `a g^2 + b g` at bus 1
//! in both periods, a peak load with linear utility `c d` at bus 2, and
//! commuters on route 1 -> 2.

use crate::drivers::{CostDistribution, DriverPopulation};
use crate::network::{Branch, GenCost, Line, PowerNetwork, Utility};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBusParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub kappa: f64,
    pub dist: CostDistribution,
}

impl TwoBusParams {
    /// `a = 1, b = 10, c = 30, kappa = 2`, costs uniform on `[0, 20]`.
    pub fn reference() -> Self {
        TwoBusParams {
            a: 1.0,
            b: 10.0,
            c: 30.0,
            kappa: 2.0,
            dist: CostDistribution::uniform(0.0, 20.0, 1.0).expect("valid uniform"),
        }
    }

    /// The line is rated far above any flow the example can produce.
    pub fn network(&self) -> PowerNetwork {
        let line = Line {
            branch: Branch {
                from: 0,
                to: 1,
                reactance: 1.0,
            },
            capacity: 1000.0,
            both_directions: true,
        };
        PowerNetwork::from_lines(2, &[line], 0)
            .expect("two-bus topology is valid")
            .with_cost(0, 0, GenCost::quadratic(self.a, self.b))
            .with_cost(0, 1, GenCost::quadratic(self.a, self.b))
            .with_utility(1, 1, Utility::linear(self.c))
    }

    pub fn population(&self) -> DriverPopulation {
        let mut routes = vec![CostDistribution::none(); 4];
        routes[1] = self.dist.clone();
        DriverPopulation::commuters(2, self.kappa, routes)
    }

    /// Storage level at which the off-peak price reaches `c`.
    pub fn saturation(&self) -> f64 {
        (self.c - self.b) / (2.0 * self.a)
    }
}

/// `(lambda_1 in period 1, lambda_2 in period 2)` as functions of `S_12`.
pub fn analytic_lmps(params: &TwoBusParams, s12: f64) -> (f64, f64) {
    let l1 = 2.0 * params.a * s12.min(params.saturation()) + params.b;
    (l1, params.c)
}

/// `(S_myop, S_sw, S_ne)`.
pub fn analytic_solutions(params: &TwoBusParams) -> (f64, f64, f64) {
    let f = |theta: f64| params.dist.cdf(theta);
    let myop = f(params.c - params.b - params.kappa);
    // S - F(c - lambda_1(S) - kappa) is increasing in S.
    let excess = |s: f64| {
        let (l1, l2) = analytic_lmps(params, s);
        s - f(l2 - l1 - params.kappa)
    };
    let (mut lo, mut hi) = (0.0, params.dist.finite_mass());
    if excess(lo) >= 0.0 {
        hi = lo;
    }
    for _ in 0..128 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let sw = 0.5 * (lo + hi);
    (myop, sw, sw)
}
