//! Myopic, social-welfare and Nash-equilibrium storage provision.
//!
//! Every solver reports the storage decomposition `S = S_fix + S_flex`,
//! thresholds, the prices and dispatch objective at the returned `S`, and a
//! fixed-point residual measured in cost units. Thresholds are always the net
//! route values at the final prices: `spread - kappa` per route for commuters
//! and the best available `spread - kappa_ij` for on-demand drivers. The myopic
//! solution is the exception: its thresholds use the zero-storage prices.
//!
//! The social optimum is computed from a single convex program in which the
//! storage capacities are decision variables (see [`sw`]). The Nash
//! equilibrium is computed by damped best-response iteration on thresholds and
//! flexible flows (see [`ne`]). The two share nothing but the dispatch model,
//! so their agreement is a genuine check.

mod ne;
mod sw;
mod verify;

pub use verify::{verify_equilibrium, DeviationReport};

use crate::dispatch::{solve_dispatch, DispatchError, DispatchSolution, RouteStorage};
use crate::drivers::{DriverPopulation, PopulationKind};
use crate::network::PowerNetwork;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Flexible mass below this is treated as absent when classifying routes.
pub(crate) const ACTIVE_MASS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("population has {got} buses but the network has {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Concept {
    Myopic,
    SocialWelfare,
    Nash,
}

impl Concept {
    pub const ALL: [Concept; 3] = [Concept::Myopic, Concept::SocialWelfare, Concept::Nash];

    pub fn short(&self) -> &'static str {
        match self {
            Concept::Myopic => "myopic",
            Concept::SocialWelfare => "sw",
            Concept::Nash => "ne",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Concept {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "myopic" | "myop" => Ok(Concept::Myopic),
            "sw" | "social-welfare" => Ok(Concept::SocialWelfare),
            "ne" | "nash" => Ok(Concept::Nash),
            other => Err(format!("unknown concept `{other}` (myopic, sw, ne)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Internal fixed-point tolerance, cost units.
    pub tol: f64,
    /// Residual above which a result is reported as not converged.
    pub accept_tol: f64,
    pub max_iter: usize,
    /// Initial threshold damping for the equilibrium iteration.
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            accept_tol: 1e-6,
            max_iter: 10_000,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Flags {
    /// Several routes tie for flexible mass and the split does not affect prices.
    pub degenerate_split: bool,
    /// A threshold sits on a point mass that is only partly participating.
    pub degenerate_atom: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub iterations: usize,
    pub residual_history: usize,
    pub dispatch_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub concept: Concept,
    pub population: PopulationKind,
    pub n: usize,
    /// Per-route commuter thresholds, `i * n + j`.
    pub thresholds_fix: Vec<f64>,
    /// Network-wide on-demand threshold; absent without on-demand drivers.
    pub threshold_flex: Option<f64>,
    pub s_fix: Vec<f64>,
    pub s_flex: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub converged: bool,
    pub deviation: Option<DeviationReport>,
    pub flags: Flags,
    pub telemetry: Telemetry,
}

impl EquilibriumResult {
    /// Aggregate storage `S_fix + S_flex`.
    pub fn storage(&self) -> RouteStorage {
        let s = self.s_fix.iter().zip(&self.s_flex).map(|(a, b)| (a + b).max(0.0)).collect();
        RouteStorage::from_vec(self.n, s).expect("nonnegative storage")
    }

    pub fn total_storage(&self) -> f64 {
        self.s_fix.iter().sum::<f64>() + self.s_flex.iter().sum::<f64>()
    }

    pub fn spread(&self, from: usize, to: usize) -> f64 {
        self.lambda2[to] - self.lambda1[from]
    }
}

/// Route values at given prices.
#[derive(Debug, Clone)]
pub(crate) struct RouteValues {
    /// `spread - kappa` per route.
    pub fix: Vec<f64>,
    /// `spread - kappa_ij`, `-inf` on unavailable routes.
    pub flex: Vec<f64>,
    /// Best on-demand route value, `-inf` when no route is available.
    pub flex_max: f64,
}

impl RouteValues {
    pub fn new(pop: &DriverPopulation, sol: &DispatchSolution) -> Self {
        let spreads = sol.spreads();
        let fix: Vec<f64> = spreads.iter().map(|s| s - pop.commuter.kappa).collect();
        let flex: Vec<f64> = spreads
            .iter()
            .zip(&pop.ondemand.kappa)
            .map(|(s, k)| if k.is_finite() { s - k } else { f64::NEG_INFINITY })
            .collect();
        let flex_max = flex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        RouteValues { fix, flex, flex_max }
    }

    /// First route attaining the best on-demand value within `tol`.
    pub fn best_flex_route(&self, tol: f64) -> Option<usize> {
        if self.flex_max == f64::NEG_INFINITY {
            return None;
        }
        self.flex.iter().position(|&w| w >= self.flex_max - tol)
    }
}

/// Distance from `x` to `[lo, hi]`.
pub(crate) fn interval_gap(x: f64, (lo, hi): (f64, f64)) -> f64 {
    (lo - x).max(x - hi).max(0.0)
}

/// Largest violation of the equilibrium conditions at `(s_fix, s_flex)` given
/// the route values at the aggregate storage.
pub(crate) fn fixed_point_residual(
    pop: &DriverPopulation,
    values: &RouteValues,
    s_fix: &[f64],
    s_flex: &[f64],
) -> f64 {
    let mut res = 0.0f64;
    for (r, dist) in pop.commuter.routes.iter().enumerate() {
        if dist.is_empty() {
            continue;
        }
        res = res.max(interval_gap(values.fix[r], dist.inverse_interval(s_fix[r])));
    }
    let total: f64 = s_flex.iter().sum();
    if pop.has_ondemand() {
        let interval = pop.ondemand.dist.inverse_interval(total);
        res = res.max(interval_gap(values.flex_max, interval));
        for (r, &x) in s_flex.iter().enumerate() {
            if x > ACTIVE_MASS {
                res = res.max(values.flex_max - values.flex[r]);
            }
        }
    } else if total > ACTIVE_MASS {
        res = f64::INFINITY;
    }
    res
}

pub(crate) fn atom_flag(pop: &DriverPopulation, s_fix: &[f64], s_flex: &[f64]) -> bool {
    let partial = |d: &crate::drivers::CostDistribution, q: f64| {
        let (lo, hi) = d.inverse_interval(q);
        q > ACTIVE_MASS && q < d.finite_mass() - ACTIVE_MASS && lo == hi && d.cdf(lo) > q
    };
    pop.commuter
        .routes
        .iter()
        .zip(s_fix)
        .any(|(d, &q)| !d.is_empty() && partial(d, q))
        || (pop.has_ondemand() && partial(&pop.ondemand.dist, s_flex.iter().sum()))
}

/// Assembles a result from final storage, solving the dispatch once at it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    concept: Concept,
    kind: PopulationKind,
    s_fix: Vec<f64>,
    s_flex: Vec<f64>,
    thresholds: Option<(Vec<f64>, Option<f64>)>,
    mut telemetry: Telemetry,
    opts: &SolverOptions,
) -> Result<(EquilibriumResult, DispatchSolution), EquilibriumError> {
    let n = net.buses();
    let total = s_fix.iter().zip(&s_flex).map(|(a, b)| (a + b).max(0.0)).collect();
    let storage = RouteStorage::from_vec(n, total)?;
    let sol = solve_dispatch(net, &storage)?;
    telemetry.dispatch_solves += 1;
    let values = RouteValues::new(pop, &sol);
    let residual = fixed_point_residual(pop, &values, &s_fix, &s_flex);
    let (thresholds_fix, threshold_flex) = thresholds.unwrap_or_else(|| {
        let flex = pop.has_ondemand().then_some(values.flex_max);
        (values.fix.clone(), flex)
    });
    let flags = Flags {
        degenerate_split: false,
        degenerate_atom: atom_flag(pop, &s_fix, &s_flex),
    };
    let converged = concept == Concept::Myopic || residual <= opts.accept_tol;
    let result = EquilibriumResult {
        concept,
        population: kind,
        n,
        thresholds_fix,
        threshold_flex,
        s_fix,
        s_flex,
        lambda1: sol.lambda1.clone(),
        lambda2: sol.lambda2.clone(),
        objective: sol.objective,
        residual,
        converged,
        deviation: None,
        flags,
        telemetry,
    };
    Ok((result, sol))
}

fn check_dims(net: &PowerNetwork, pop: &DriverPopulation) -> Result<(), EquilibriumError> {
    if pop.n != net.buses() {
        return Err(EquilibriumError::Dimension {
            got: pop.n,
            expected: net.buses(),
        });
    }
    Ok(())
}

/// Myopic participation: every driver decides at the zero-storage prices.
/// On-demand drivers all pick the first route with the best net value.
pub fn solve_myopic(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    kind: PopulationKind,
) -> Result<EquilibriumResult, EquilibriumError> {
    check_dims(net, pop)?;
    let pop = pop.restricted(kind);
    let n = net.buses();
    let base = solve_dispatch(net, &RouteStorage::zeros(n))?;
    let values = RouteValues::new(&pop, &base);
    let s_fix: Vec<f64> = pop
        .commuter
        .routes
        .iter()
        .zip(&values.fix)
        .map(|(d, &t)| d.cdf(t))
        .collect();
    let mut s_flex = vec![0.0; n * n];
    let mut theta_flex = None;
    if pop.has_ondemand() {
        if let Some(r) = values.best_flex_route(1e-9) {
            s_flex[r] = pop.ondemand.dist.cdf(values.flex[r]);
        }
        theta_flex = Some(values.flex_max);
    }
    let telemetry = Telemetry {
        iterations: 1,
        residual_history: 0,
        dispatch_solves: 1,
    };
    let (mut result, _) = finish(
        net,
        &pop,
        Concept::Myopic,
        kind,
        s_fix,
        s_flex,
        Some((values.fix, theta_flex)),
        telemetry,
        &SolverOptions::default(),
    )?;
    result.flags.degenerate_split = pop.has_ondemand()
        && values.flex.iter().filter(|&&w| w >= values.flex_max - 1e-9).count() > 1;
    Ok(result)
}

pub fn solve_myopic_commuter(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_myopic(net, pop, PopulationKind::Commuter)
}

pub fn solve_myopic_ondemand(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_myopic(net, pop, PopulationKind::OnDemand)
}

pub fn solve_myopic_hybrid(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_myopic(net, pop, PopulationKind::Hybrid)
}

pub fn solve_sw(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    kind: PopulationKind,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    check_dims(net, pop)?;
    sw::solve(net, &pop.restricted(kind), kind, opts)
}

pub fn solve_sw_commuter(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_sw(net, pop, PopulationKind::Commuter, &SolverOptions::default())
}

pub fn solve_sw_ondemand(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_sw(net, pop, PopulationKind::OnDemand, &SolverOptions::default())
}

pub fn solve_sw_hybrid(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_sw(net, pop, PopulationKind::Hybrid, &SolverOptions::default())
}

/// Nash equilibrium with its deviation report attached.
pub fn solve_ne(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    kind: PopulationKind,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    check_dims(net, pop)?;
    let pop = pop.restricted(kind);
    let mut result = ne::solve(net, &pop, kind, opts)?;
    result.deviation = Some(verify_equilibrium(net, &pop, &result, 1e-5));
    Ok(result)
}

pub fn solve_ne_commuter(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_ne(net, pop, PopulationKind::Commuter, &SolverOptions::default())
}

pub fn solve_ne_ondemand(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_ne(net, pop, PopulationKind::OnDemand, &SolverOptions::default())
}

pub fn solve_ne_hybrid(
    net: &PowerNetwork,
    pop: &DriverPopulation,
) -> Result<EquilibriumResult, EquilibriumError> {
    solve_ne(net, pop, PopulationKind::Hybrid, &SolverOptions::default())
}

/// Runs one concept for one population class.
pub fn solve(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    concept: Concept,
    kind: PopulationKind,
    opts: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    match concept {
        Concept::Myopic => solve_myopic(net, pop, kind),
        Concept::SocialWelfare => solve_sw(net, pop, kind, opts),
        Concept::Nash => solve_ne(net, pop, kind, opts),
    }
}

/// Checks whether moving a little flexible mass between two routes tied at the
/// best value leaves their value difference unchanged, which means the split
/// between them is not pinned down by the equilibrium conditions.
pub(crate) fn split_is_degenerate(
    net: &PowerNetwork,
    pop: &DriverPopulation,
    s_fix: &[f64],
    s_flex: &[f64],
    values: &RouteValues,
    telemetry: &mut Telemetry,
) -> Result<bool, EquilibriumError> {
    let tied: Vec<usize> = (0..s_flex.len())
        .filter(|&r| values.flex[r] >= values.flex_max - 1e-7)
        .collect();
    let Some(&from) = tied.iter().find(|&&r| s_flex[r] > ACTIVE_MASS) else {
        return Ok(false);
    };
    let total: f64 = s_flex.iter().sum();
    let delta = (1e-3 * total).min(s_flex[from]);
    for &to in tied.iter().filter(|&&r| r != from) {
        let mut moved = s_flex.to_vec();
        moved[from] -= delta;
        moved[to] += delta;
        let s = s_fix.iter().zip(&moved).map(|(a, b)| (a + b).max(0.0)).collect();
        let sol = solve_dispatch(net, &RouteStorage::from_vec(net.buses(), s)?)?;
        telemetry.dispatch_solves += 1;
        let after = RouteValues::new(pop, &sol);
        let before_gap = values.flex[from] - values.flex[to];
        let after_gap = after.flex[from] - after.flex[to];
        if (after_gap - before_gap).abs() <= 1e-9 * (1.0 + values.flex_max.abs()) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::CostDistribution;
    use crate::twobus::{analytic_solutions, TwoBusParams};

    #[test]
    fn concept_parsing() {
        assert_eq!("ne".parse::<Concept>().unwrap(), Concept::Nash);
        assert_eq!("social-welfare".parse::<Concept>().unwrap(), Concept::SocialWelfare);
        assert!("best".parse::<Concept>().is_err());
    }

    #[test]
    fn two_bus_anchor() {
        let p = TwoBusParams::reference();
        let (net, pop) = (p.network(), p.population());
        let myop = solve_myopic_commuter(&net, &pop).unwrap();
        assert!((myop.s_fix[1] - 0.9).abs() < 1e-9);
        assert!((myop.thresholds_fix[1] - 18.0).abs() < 1e-9);
        let sw = solve_sw_commuter(&net, &pop).unwrap();
        let ne = solve_ne_commuter(&net, &pop).unwrap();
        let (_, s_sw, _) = analytic_solutions(&p);
        assert!((sw.s_fix[1] - s_sw).abs() < 1e-7, "{}", sw.s_fix[1]);
        assert!((ne.s_fix[1] - s_sw).abs() < 1e-7, "{}", ne.s_fix[1]);
        assert!((ne.thresholds_fix[1] - 180.0 / 11.0).abs() < 1e-6);
        assert!(ne.converged && sw.converged);
        assert!(ne.deviation.as_ref().unwrap().passed);
        assert!(!verify_equilibrium(&net, &pop, &myop, 1e-5).passed);
    }

    #[test]
    fn prohibitive_kappa_means_no_participation() {
        let mut p = TwoBusParams::reference();
        p.kappa = 25.0;
        let (net, pop) = (p.network(), p.population());
        for concept in Concept::ALL {
            let r = solve(&net, &pop, concept, PopulationKind::Commuter, &SolverOptions::default())
                .unwrap();
            assert!(r.total_storage() < 1e-9, "{concept}: {}", r.total_storage());
        }
    }

    #[test]
    fn empty_population_gives_base_prices() {
        let p = TwoBusParams::reference();
        let net = p.network();
        let pop = DriverPopulation::empty(2);
        let ne = solve_ne_commuter(&net, &pop).unwrap();
        assert_eq!(ne.total_storage(), 0.0);
        assert!((ne.lambda1[0] - 10.0).abs() < 1e-8);
        assert!((ne.lambda2[1] - 30.0).abs() < 1e-8);
    }

    fn on_demand_two_bus(kappa: Vec<f64>) -> (PowerNetwork, DriverPopulation) {
        let p = TwoBusParams::reference();
        let pop = DriverPopulation::on_demand(
            2,
            CostDistribution::uniform(0.0, 20.0, 1.0).unwrap(),
            kappa,
        );
        (p.network(), pop)
    }

    #[test]
    fn on_demand_single_route_reduces_to_commuter() {
        let inf = f64::INFINITY;
        let (net, pop) = on_demand_two_bus(vec![inf, 2.0, inf, inf]);
        let sw = solve_sw_ondemand(&net, &pop).unwrap();
        let ne = solve_ne_ondemand(&net, &pop).unwrap();
        assert!((sw.s_flex[1] - 9.0 / 11.0).abs() < 1e-7);
        assert!((ne.s_flex[1] - 9.0 / 11.0).abs() < 1e-7);
        assert!((ne.threshold_flex.unwrap() - 180.0 / 11.0).abs() < 1e-6);
        let myop = solve_myopic_ondemand(&net, &pop).unwrap();
        assert!((myop.s_flex[1] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn myopic_tie_break_is_lexicographic() {
        // Routes 1->1 and 1->2 have the same spread in the uncongested two-bus network.
        let inf = f64::INFINITY;
        let (net, pop) = on_demand_two_bus(vec![2.0, 2.0, inf, inf]);
        let myop = solve_myopic_ondemand(&net, &pop).unwrap();
        assert!((myop.s_flex[0] - 0.9).abs() < 1e-9);
        assert_eq!(myop.s_flex[1], 0.0);
        assert!(myop.flags.degenerate_split);
        let (net, pop) = on_demand_two_bus(vec![inf, 2.0, inf, inf]);
        let other = solve_myopic_ondemand(&net, &pop).unwrap();
        assert_eq!(other.threshold_flex, myop.threshold_flex);
    }

    #[test]
    fn parallel_routes_split_is_flagged() {
        let inf = f64::INFINITY;
        let (net, pop) = on_demand_two_bus(vec![2.0, 2.0, inf, inf]);
        let sw = solve_sw_ondemand(&net, &pop).unwrap();
        let ne = solve_ne_ondemand(&net, &pop).unwrap();
        let total = |r: &EquilibriumResult| r.s_flex.iter().sum::<f64>();
        assert!((total(&sw) - 9.0 / 11.0).abs() < 1e-7);
        assert!((total(&ne) - 9.0 / 11.0).abs() < 1e-7);
        assert!(sw.flags.degenerate_split && ne.flags.degenerate_split);
        assert!((sw.threshold_flex.unwrap() - ne.threshold_flex.unwrap()).abs() < 1e-6);
    }

    #[test]
    fn hybrid_shares_the_spread() {
        let p = TwoBusParams::reference();
        let inf = f64::INFINITY;
        let od = DriverPopulation::on_demand(
            2,
            CostDistribution::uniform(0.0, 20.0, 0.5).unwrap(),
            vec![inf, 3.0, inf, inf],
        );
        let pop = DriverPopulation::hybrid(&p.population(), &od);
        let net = p.network();
        let sw = solve_sw_hybrid(&net, &pop).unwrap();
        let ne = solve_ne_hybrid(&net, &pop).unwrap();
        for r in [&sw, &ne] {
            let spread = r.spread(0, 1);
            assert!((r.thresholds_fix[1] - (spread - 2.0)).abs() < 1e-12);
            assert!((r.threshold_flex.unwrap() - (spread - 3.0)).abs() < 1e-12);
            assert!(r.residual < 1e-6, "{:?}", r.residual);
        }
        assert!((sw.thresholds_fix[1] - ne.thresholds_fix[1]).abs() < 1e-6);
        // Closed form: S = theta/20 + theta'/40 with theta = 18 - 2 S, theta' = theta - 1.
        let s = sw.total_storage();
        let theta = 18.0 - 2.0 * s;
        assert!((s - (theta / 20.0 + (theta - 1.0) / 40.0)).abs() < 1e-7);
    }
}
