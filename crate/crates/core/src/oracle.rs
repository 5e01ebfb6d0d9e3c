//! Brute-force cross-checks on finite driver atoms and finite differences.

use crate::dispatch::{solve_dispatch, DispatchError, RouteStorage};
use crate::drivers::DriverPopulation;
use crate::network::PowerNetwork;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("atom count must be positive")]
    NoAtoms,
    #[error("{0} assignments exceed the exhaustive limit and greedy search is disabled")]
    TooLarge(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AtomClass {
    Commuter { route: usize },
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub theta: f64,
    pub mass: f64,
    pub class: AtomClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomizedPopulation {
    pub n: usize,
    /// Atoms per class and route.
    pub per_class: usize,
    /// Sorted by cost, then class, then route.
    pub atoms: Vec<Atom>,
    pub commuter_kappa: f64,
    pub ondemand_kappa: Vec<f64>,
}

impl AtomizedPopulation {
    /// Actions available to an atom: `None` abstains.
    pub fn actions(&self, atom: &Atom) -> Vec<Option<usize>> {
        let mut out = vec![None];
        match atom.class {
            AtomClass::Commuter { route } => out.push(Some(route)),
            AtomClass::OnDemand => out.extend(
                (0..self.n * self.n)
                    .filter(|&r| self.ondemand_kappa[r].is_finite())
                    .map(Some),
            ),
        }
        out
    }

    fn kappa(&self, atom: &Atom, route: usize) -> f64 {
        match atom.class {
            AtomClass::Commuter { .. } => self.commuter_kappa,
            AtomClass::OnDemand => self.ondemand_kappa[route],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }
}

/// Quantile-midpoint atoms: `theta_q = F^-1((q - 1/2) / N * mass)`, each of
/// mass `mass / N`, for every commuter route and for the on-demand class.
pub fn discretize_population(
    pop: &DriverPopulation,
    count: usize,
) -> Result<AtomizedPopulation, OracleError> {
    if count == 0 {
        return Err(OracleError::NoAtoms);
    }
    let mut atoms = Vec::new();
    let mut push = |dist: &crate::drivers::CostDistribution, class: AtomClass| {
        let mass = dist.finite_mass();
        if mass <= 0.0 {
            return;
        }
        for q in 1..=count {
            let level = (q as f64 - 0.5) / count as f64 * mass;
            atoms.push(Atom {
                theta: dist.inverse(level).expect("level below finite mass"),
                mass: mass / count as f64,
                class,
            });
        }
    };
    for (route, dist) in pop.commuter.routes.iter().enumerate() {
        push(dist, AtomClass::Commuter { route });
    }
    if pop.has_ondemand() {
        push(&pop.ondemand.dist, AtomClass::OnDemand);
    }
    atoms.sort_by(|a, b| a.theta.total_cmp(&b.theta).then(a.class.cmp(&b.class)));
    Ok(AtomizedPopulation {
        n: pop.n,
        per_class: count,
        atoms,
        commuter_kappa: pop.commuter.kappa,
        ondemand_kappa: pop.ondemand.kappa.clone(),
    })
}

/// Dispatch results memoized by aggregate storage.
struct SpreadCache<'a> {
    net: &'a PowerNetwork,
    atoms: &'a AtomizedPopulation,
    cache: HashMap<Vec<u64>, (Vec<f64>, f64)>,
    solves: usize,
}

impl<'a> SpreadCache<'a> {
    fn new(net: &'a PowerNetwork, atoms: &'a AtomizedPopulation) -> Self {
        SpreadCache {
            net,
            atoms,
            cache: HashMap::new(),
            solves: 0,
        }
    }

    /// `(spreads, J)` for an assignment.
    fn eval(&mut self, actions: &[Option<usize>]) -> Result<&(Vec<f64>, f64), OracleError> {
        let storage = storage_of(self.atoms, actions);
        let key: Vec<u64> = storage.as_slice().iter().map(|v| v.to_bits()).collect();
        if !self.cache.contains_key(&key) {
            let sol = solve_dispatch(self.net, &storage)?;
            self.solves += 1;
            self.cache.insert(key.clone(), (sol.spreads(), sol.objective));
        }
        Ok(&self.cache[&key])
    }
}

/// Aggregate storage of an assignment.
pub fn storage_of(atoms: &AtomizedPopulation, actions: &[Option<usize>]) -> RouteStorage {
    let mut s = vec![0.0; atoms.n * atoms.n];
    for (atom, action) in atoms.atoms.iter().zip(actions) {
        if let Some(r) = action {
            s[*r] += atom.mass;
        }
    }
    RouteStorage::from_vec(atoms.n, s).expect("atom masses are nonnegative")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsResult {
    pub actions: Vec<Option<usize>>,
    pub storage: RouteStorage,
    pub rounds: usize,
    pub converged: bool,
    pub dispatch_solves: usize,
}

/// Round-robin best responses with each atom's own price impact included.
///
/// Atoms are visited in cost order; an atom moves only when another action
/// pays strictly more than its current one. Stops after a round without moves.
pub fn best_response_dynamics(
    net: &PowerNetwork,
    atoms: &AtomizedPopulation,
    max_rounds: usize,
) -> Result<DynamicsResult, OracleError> {
    let mut actions: Vec<Option<usize>> = vec![None; atoms.atoms.len()];
    let mut cache = SpreadCache::new(net, atoms);
    let mut rounds = 0;
    let mut converged = false;
    while rounds < max_rounds {
        rounds += 1;
        let mut moved = false;
        for k in 0..atoms.atoms.len() {
            let atom = atoms.atoms[k];
            let current = actions[k];
            let mut best = (payoff(&mut cache, &mut actions, k, current)?, current);
            for action in atoms.actions(&atom) {
                if action == current {
                    continue;
                }
                let value = payoff(&mut cache, &mut actions, k, action)?;
                if value > best.0 + 1e-12 {
                    best = (value, action);
                }
            }
            actions[k] = current;
            if best.1 != current {
                actions[k] = best.1;
                moved = true;
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }
    Ok(DynamicsResult {
        storage: storage_of(atoms, &actions),
        actions,
        rounds,
        converged,
        dispatch_solves: cache.solves,
    })
}

/// Payoff of atom `k` taking `action`, at the prices after it does so.
fn payoff(
    cache: &mut SpreadCache,
    actions: &mut [Option<usize>],
    k: usize,
    action: Option<usize>,
) -> Result<f64, OracleError> {
    let Some(route) = action else {
        return Ok(0.0);
    };
    actions[k] = action;
    let atom = cache.atoms.atoms[k];
    let kappa = cache.atoms.kappa(&atom, route);
    let (spreads, _) = cache.eval(actions)?;
    Ok(spreads[route] - kappa - atom.theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialSearch {
    pub actions: Vec<Option<usize>>,
    pub storage: RouteStorage,
    /// Dispatch objective plus participants' costs.
    pub social_cost: f64,
    pub exhaustive: bool,
    /// No single-atom reassignment lowers the social cost.
    pub locally_optimal: bool,
    pub evaluated: usize,
}

/// Exhaustive enumeration up to this many assignments.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

/// Minimizes `J(S) + sum over participants of mass * (theta + kappa)`.
///
/// Small instances are enumerated exhaustively. Larger ones fall back to
/// greedy single-atom improvement from the empty assignment, which ends in a
/// local optimum, unless `allow_greedy` is false.
pub fn brute_force_sw(
    net: &PowerNetwork,
    atoms: &AtomizedPopulation,
    allow_greedy: bool,
) -> Result<SocialSearch, OracleError> {
    let choices: Vec<Vec<Option<usize>>> = atoms.atoms.iter().map(|a| atoms.actions(a)).collect();
    let size: f64 = choices.iter().map(|c| c.len() as f64).product();
    let mut cache = SpreadCache::new(net, atoms);
    let cost = |cache: &mut SpreadCache, actions: &[Option<usize>]| -> Result<f64, OracleError> {
        let driver: f64 = atoms
            .atoms
            .iter()
            .zip(actions)
            .filter_map(|(a, act)| act.map(|r| a.mass * (a.theta + atoms.kappa(a, r))))
            .sum();
        Ok(cache.eval(actions)?.1 + driver)
    };

    if size <= EXHAUSTIVE_LIMIT {
        let mut digits = vec![0usize; choices.len()];
        let mut actions: Vec<Option<usize>> = vec![None; choices.len()];
        let mut best = (f64::INFINITY, actions.clone());
        loop {
            for (k, &d) in digits.iter().enumerate() {
                actions[k] = choices[k][d];
            }
            let c = cost(&mut cache, &actions)?;
            if c < best.0 - 1e-12 * (1.0 + c.abs()) {
                best = (c, actions.clone());
            }
            // Mixed-radix increment.
            let mut k = 0;
            while k < digits.len() {
                digits[k] += 1;
                if digits[k] < choices[k].len() {
                    break;
                }
                digits[k] = 0;
                k += 1;
            }
            if k == digits.len() {
                break;
            }
        }
        return Ok(SocialSearch {
            storage: storage_of(atoms, &best.1),
            actions: best.1,
            social_cost: best.0,
            exhaustive: true,
            locally_optimal: true,
            evaluated: cache.solves,
        });
    }
    if !allow_greedy {
        return Err(OracleError::TooLarge(size));
    }

    let mut actions: Vec<Option<usize>> = vec![None; choices.len()];
    let mut current = cost(&mut cache, &actions)?;
    let mut improved = true;
    let mut passes = 0;
    while improved && passes < 100 * choices.len().max(1) {
        improved = false;
        passes += 1;
        for k in 0..choices.len() {
            for &a in &choices[k] {
                if a == actions[k] {
                    continue;
                }
                let before = actions[k];
                actions[k] = a;
                let c = cost(&mut cache, &actions)?;
                if c < current - 1e-12 * (1.0 + current.abs()) {
                    current = c;
                    improved = true;
                } else {
                    actions[k] = before;
                }
            }
        }
    }
    Ok(SocialSearch {
        storage: storage_of(atoms, &actions),
        actions,
        social_cost: current,
        exhaustive: false,
        locally_optimal: !improved,
        evaluated: cache.solves,
    })
}

/// Finite-difference `dJ/dS_r` per route: central where `S_r >= h`, forward
/// otherwise.
pub fn finite_difference_gradient(
    net: &PowerNetwork,
    storage: &RouteStorage,
    h: f64,
) -> Result<Vec<f64>, DispatchError> {
    let j = |s: &[f64]| -> Result<f64, DispatchError> {
        let st = RouteStorage::from_vec(storage.buses(), s.to_vec())?;
        Ok(solve_dispatch(net, &st)?.objective)
    };
    let base = storage.as_slice().to_vec();
    let mut center = None;
    let mut grad = Vec::with_capacity(base.len());
    for r in 0..base.len() {
        let mut up = base.clone();
        up[r] += h;
        let jp = j(&up)?;
        if base[r] >= h {
            let mut down = base.clone();
            down[r] -= h;
            grad.push((jp - j(&down)?) / (2.0 * h));
        } else {
            let j0 = match center {
                Some(v) => v,
                None => *center.insert(j(&base)?),
            };
            grad.push((jp - j0) / h);
        }
    }
    Ok(grad)
}

/// True when `J` restricted to every coordinate line through `S` is a single
/// quadratic piece on `[S - h, S + h]`, detected by central differences at
/// steps `h` and `h / 2` agreeing. Routes with `S_r < h` are checked one-sided.
pub fn is_smooth_point(
    net: &PowerNetwork,
    storage: &RouteStorage,
    h: f64,
) -> Result<bool, DispatchError> {
    let coarse = finite_difference_gradient(net, storage, h)?;
    let fine = finite_difference_gradient(net, storage, h / 2.0)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .zip(storage.as_slice())
        .all(|((c, f), &s)| {
            // A forward difference carries an O(h) curvature term.
            let tol = if s >= h { 1e-6 } else { 1e-3 };
            (c - f).abs() <= tol * (1.0 + c.abs())
        }))
}
