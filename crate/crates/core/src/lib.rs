//! Market equilibria for electric-vehicle batteries acting as mobile energy
//! storage in a transmission-constrained grid.
//!
//! The crate solves a two-period DC economic dispatch with route-indexed
//! mobile storage and reads locational marginal prices off its duals. On top
//! of that it computes myopic, socially optimal and Nash-equilibrium storage
//! provision for commuter, on-demand and hybrid driver populations. Brute-force
//! oracles on finite driver atoms are provided for cross-checking.

pub mod cli;
pub mod dispatch;
pub mod drivers;
pub mod equilibrium;
pub mod network;
pub mod oracle;
mod qp;
pub mod scenario;
pub mod twobus;

pub use dispatch::{
    kkt_report, lmp_spread, solve_dispatch, storage_value_gradient, DispatchError,
    DispatchSolution, KktReport, RouteStorage,
};
pub use drivers::{
    cdf_eval, cdf_inverse, supply_from_threshold, CommuterPopulation, CostDistribution,
    DriverPopulation, OnDemandPopulation, PopulationKind,
};
pub use equilibrium::{
    solve, solve_myopic, solve_myopic_commuter, solve_myopic_hybrid, solve_myopic_ondemand,
    solve_ne, solve_ne_commuter, solve_ne_hybrid, solve_ne_ondemand, solve_sw, solve_sw_commuter,
    solve_sw_hybrid, solve_sw_ondemand, verify_equilibrium, Concept, DeviationReport,
    EquilibriumError, EquilibriumResult, SolverOptions,
};
pub use network::{
    build_shift_factors, Branch, GenCost, Line, NetworkError, PowerNetwork, Utility,
    ValidationReport,
};
pub use oracle::{
    best_response_dynamics, brute_force_sw, discretize_population, finite_difference_gradient,
    is_smooth_point, AtomizedPopulation,
};
pub use scenario::{parse_scenario, Scenario, ScenarioError};
pub use twobus::{analytic_lmps, analytic_solutions, TwoBusParams};
