//! Two-period economic dispatch with route-indexed mobile storage.
//!
//! For each period `t` and bus `i` the program has generation `g`, served load
//! `d` and net injection `p`. Storage on route `i -> j` charges `u1 >= 0` at
//! the origin in the off-peak period and discharges `u2` at the destination in
//! the peak period, with state of charge `u1` and `u1 + u2` kept in
//! `[0, S_ij]`. The nodal balance rows
//!
//! ```text
//!     p_i - g_i + d_i + (storage operations located at i) = 0
//! ```
//!
//! carry the locational marginal prices as their duals, so that a bus with an
//! interior generator has `lambda = C'(g)`.

use crate::network::{PowerNetwork, PERIODS};
use crate::qp::{QpBuilder, QpError, QpOptions, QpProblem, QpSolution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("storage vector has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("storage on route {route} is {value}, must be finite and nonnegative")]
    NegativeStorage { route: usize, value: f64 },
    #[error("dispatch is unbounded: {0}")]
    Unbounded(QpError),
    #[error("dispatch solver failed: {0}")]
    Solver(QpError),
}

impl From<QpError> for DispatchError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Unbounded { .. } => DispatchError::Unbounded(e),
            other => DispatchError::Solver(other),
        }
    }
}

/// Aggregate mobile-storage capacity per route, `S[i * n + j]` for `i -> j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteStorage {
    n: usize,
    s: Vec<f64>,
}

impl RouteStorage {
    pub fn zeros(n: usize) -> Self {
        RouteStorage {
            n,
            s: vec![0.0; n * n],
        }
    }

    pub fn from_vec(n: usize, s: Vec<f64>) -> Result<Self, DispatchError> {
        if s.len() != n * n {
            return Err(DispatchError::Dimension {
                got: s.len(),
                expected: n * n,
            });
        }
        if let Some(route) = s.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DispatchError::NegativeStorage {
                route,
                value: s[route],
            });
        }
        Ok(RouteStorage { n, s })
    }

    pub fn single(n: usize, from: usize, to: usize, value: f64) -> Self {
        let mut s = Self::zeros(n);
        s.set(from, to, value);
        s
    }

    pub fn buses(&self) -> usize {
        self.n
    }

    pub fn index(&self, from: usize, to: usize) -> usize {
        from * self.n + to
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.s[from * self.n + to]
    }

    /// Panics on negative or non-finite values.
    pub fn set(&mut self, from: usize, to: usize, value: f64) {
        assert!(value.is_finite() && value >= 0.0, "invalid storage {value}");
        self.s[from * self.n + to] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.s
    }

    pub fn total(&self) -> f64 {
        self.s.iter().sum()
    }

    pub fn add(&self, other: &RouteStorage) -> RouteStorage {
        RouteStorage {
            n: self.n,
            s: self.s.iter().zip(&other.s).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Optimal dispatch with its dual certificate.
///
/// Per-bus and per-route arrays are indexed `[period]` inside each entry.
/// Bound duals are zero where the corresponding bound is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub n: usize,
    pub storage: Vec<f64>,
    pub g: Vec<[f64; 2]>,
    pub d: Vec<[f64; 2]>,
    pub u: Vec<[f64; 2]>,
    pub p: Vec<[f64; 2]>,
    /// Generation cost minus load utility.
    pub objective: f64,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// Line-limit duals, one per monitored constraint row.
    pub mu: Vec<[f64; 2]>,
    /// System energy price; `lambda = energy - H'mu` bus by bus.
    pub energy: [f64; 2],
    pub gen_lower: Vec<[f64; 2]>,
    pub gen_upper: Vec<[f64; 2]>,
    pub load_lower: Vec<[f64; 2]>,
    pub load_upper: Vec<[f64; 2]>,
    /// State-of-charge duals per route after each period.
    pub soc_lower: Vec<[f64; 2]>,
    pub soc_upper: Vec<[f64; 2]>,
    pub iterations: usize,
}

impl DispatchSolution {
    pub fn lambda(&self, period: usize) -> &[f64] {
        if period == 0 {
            &self.lambda1
        } else {
            &self.lambda2
        }
    }

    /// `lambda2[to] - lambda1[from]`.
    pub fn spread(&self, from: usize, to: usize) -> f64 {
        self.lambda2[to] - self.lambda1[from]
    }

    /// Spreads for every route in `i * n + j` order.
    pub fn spreads(&self) -> Vec<f64> {
        let n = self.n;
        (0..n * n).map(|r| self.spread(r / n, r % n)).collect()
    }

    /// Line flows `H p` per constraint row and period.
    pub fn flows(&self, net: &PowerNetwork) -> Vec<[f64; 2]> {
        let h = net.shift_factors();
        (0..h.nrows())
            .map(|k| {
                let mut f = [0.0; 2];
                for (t, ft) in f.iter_mut().enumerate() {
                    *ft = (0..self.n).map(|i| h[(k, i)] * self.p[i][t]).sum();
                }
                f
            })
            .collect()
    }
}

/// Storage capacity of a route inside a dispatch program.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Capacity {
    Fixed(f64),
    Var(usize),
}

/// Variable and row indices of the dispatch program inside a [`QpBuilder`].
#[derive(Debug, Clone)]
pub(crate) struct DispatchModel {
    n: usize,
    g: [Vec<Option<usize>>; PERIODS],
    d: [Vec<Option<usize>>; PERIODS],
    p: [Vec<usize>; PERIODS],
    u: Vec<Option<[usize; 2]>>,
    nodal: [Vec<usize>; PERIODS],
    sum: [usize; PERIODS],
    lines: [Vec<usize>; PERIODS],
    gen_lo: [Vec<Option<usize>>; PERIODS],
    gen_hi: [Vec<Option<usize>>; PERIODS],
    load_lo: [Vec<Option<usize>>; PERIODS],
    load_hi: [Vec<Option<usize>>; PERIODS],
    /// `[lo1, hi1, lo2, hi2]`
    soc: Vec<Option<[usize; 4]>>,
}

impl DispatchModel {
    pub fn build(b: &mut QpBuilder, net: &PowerNetwork, caps: &[Capacity]) -> Self {
        let n = net.buses();
        let h = net.shift_factors();
        let mut g: [Vec<Option<usize>>; 2] = [vec![None; n], vec![None; n]];
        let mut d: [Vec<Option<usize>>; 2] = [vec![None; n], vec![None; n]];
        let mut gen_lo = g.clone();
        let mut gen_hi = g.clone();
        let mut load_lo = g.clone();
        let mut load_hi = g.clone();
        let mut p: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for t in 0..PERIODS {
            for i in 0..n {
                if let Some(c) = net.cost(i, t) {
                    let v = b.var(2.0 * c.a, c.b);
                    g[t][i] = Some(v);
                    gen_lo[t][i] = c.g_min.map(|lo| b.le(&[(v, -1.0)], -lo));
                    gen_hi[t][i] = c.g_max.map(|hi| b.le(&[(v, 1.0)], hi));
                }
                if let Some(u) = net.utility(i, t) {
                    let (c, e) = u.coefficients();
                    let v = b.var(2.0 * e, -c);
                    d[t][i] = Some(v);
                    load_lo[t][i] = Some(b.le(&[(v, -1.0)], 0.0));
                    load_hi[t][i] = u.cap.map(|cap| b.le(&[(v, 1.0)], cap));
                }
                p[t].push(b.var(0.0, 0.0));
            }
        }

        let mut u = vec![None; n * n];
        let mut soc = vec![None; n * n];
        for (r, cap) in caps.iter().enumerate() {
            let (rhs, terms): (f64, Vec<(usize, f64)>) = match *cap {
                Capacity::Fixed(s) if s > 0.0 => (s, Vec::new()),
                Capacity::Fixed(_) => continue,
                Capacity::Var(v) => (0.0, vec![(v, -1.0)]),
            };
            let u1 = b.var(0.0, 0.0);
            let u2 = b.var(0.0, 0.0);
            let lo1 = b.le(&[(u1, -1.0)], 0.0);
            let hi1 = b.le(&[&[(u1, 1.0)], terms.as_slice()].concat(), rhs);
            let lo2 = b.le(&[(u1, -1.0), (u2, -1.0)], 0.0);
            let hi2 = b.le(&[&[(u1, 1.0), (u2, 1.0)], terms.as_slice()].concat(), rhs);
            u[r] = Some([u1, u2]);
            soc[r] = Some([lo1, hi1, lo2, hi2]);
        }

        let mut nodal: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        let mut sum = [0; 2];
        let mut lines: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for t in 0..PERIODS {
            for i in 0..n {
                let mut terms = vec![(p[t][i], 1.0)];
                if let Some(v) = g[t][i] {
                    terms.push((v, -1.0));
                }
                if let Some(v) = d[t][i] {
                    terms.push((v, 1.0));
                }
                // Off-peak operations sit at the origin, peak ones at the destination.
                for (r, ur) in u.iter().enumerate() {
                    if let Some(ur) = ur {
                        let at = if t == 0 { r / n } else { r % n };
                        if at == i {
                            terms.push((ur[t], 1.0));
                        }
                    }
                }
                nodal[t].push(b.eq(&terms, 0.0));
            }
            let all: Vec<(usize, f64)> = p[t].iter().map(|&v| (v, 1.0)).collect();
            sum[t] = b.eq(&all, 0.0);
            for (k, f) in net.line_limits().iter().enumerate() {
                let terms: Vec<(usize, f64)> = (0..n).map(|i| (p[t][i], h[(k, i)])).collect();
                lines[t].push(b.le(&terms, *f));
            }
        }

        DispatchModel {
            n,
            g,
            d,
            p,
            u,
            nodal,
            sum,
            lines,
            gen_lo,
            gen_hi,
            load_lo,
            load_hi,
            soc,
        }
    }

    pub fn extract(&self, net: &PowerNetwork, storage: &[f64], sol: &QpSolution) -> DispatchSolution {
        let n = self.n;
        let val = |v: Option<usize>| v.map_or(0.0, |v| sol.x[v]);
        let zval = |k: Option<usize>| k.map_or(0.0, |k| sol.z[k]);
        let pair = |f: &dyn Fn(usize, usize) -> f64| -> Vec<[f64; 2]> {
            (0..n).map(|i| [f(i, 0), f(i, 1)]).collect()
        };
        let g = pair(&|i, t| val(self.g[t][i]));
        let d = pair(&|i, t| val(self.d[t][i]));
        let p = pair(&|i, t| sol.x[self.p[t][i]]);
        let lambda1: Vec<f64> = self.nodal[0].iter().map(|&k| sol.y[k]).collect();
        let lambda2: Vec<f64> = self.nodal[1].iter().map(|&k| sol.y[k]).collect();

        let mut u = vec![[0.0; 2]; n * n];
        let mut soc_lower = vec![[0.0; 2]; n * n];
        let mut soc_upper = vec![[0.0; 2]; n * n];
        for r in 0..n * n {
            match (self.u[r], self.soc[r]) {
                (Some(ur), Some(rows)) => {
                    u[r] = [sol.x[ur[0]], sol.x[ur[1]]];
                    soc_lower[r] = [sol.z[rows[0]], sol.z[rows[2]]];
                    soc_upper[r] = [sol.z[rows[1]], sol.z[rows[3]]];
                }
                _ => {
                    // Eliminated route: both bounds coincide at zero, so any
                    // duals closing stationarity are valid. Pick the minimal ones.
                    let l1 = lambda1[r / n];
                    let l2 = lambda2[r % n];
                    let (lo2, hi2) = (l2.max(0.0), (-l2).max(0.0));
                    let rest = l1 - lo2 + hi2;
                    soc_lower[r] = [rest.max(0.0), lo2];
                    soc_upper[r] = [(-rest).max(0.0), hi2];
                }
            }
        }

        let objective: f64 = (0..PERIODS)
            .flat_map(|t| (0..n).map(move |i| (i, t)))
            .map(|(i, t)| {
                net.cost(i, t).map_or(0.0, |c| c.cost(g[i][t]))
                    - net.utility(i, t).map_or(0.0, |u| u.value(d[i][t]))
            })
            .sum();

        DispatchSolution {
            n,
            storage: storage.to_vec(),
            g,
            d,
            u,
            p,
            objective,
            lambda1,
            lambda2,
            mu: (0..net.constraints())
                .map(|k| [sol.z[self.lines[0][k]], sol.z[self.lines[1][k]]])
                .collect(),
            energy: [-sol.y[self.sum[0]], -sol.y[self.sum[1]]],
            gen_lower: pair(&|i, t| zval(self.gen_lo[t][i])),
            gen_upper: pair(&|i, t| zval(self.gen_hi[t][i])),
            load_lower: pair(&|i, t| zval(self.load_lo[t][i])),
            load_upper: pair(&|i, t| zval(self.load_hi[t][i])),
            soc_lower,
            soc_upper,
            iterations: sol.iterations,
        }
    }
}

pub(crate) fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    problem.solve(&QpOptions::default())
}

/// Solves the dispatch program for fixed route storage.
pub fn solve_dispatch(
    net: &PowerNetwork,
    storage: &RouteStorage,
) -> Result<DispatchSolution, DispatchError> {
    let n = net.buses();
    if storage.as_slice().len() != n * n {
        return Err(DispatchError::Dimension {
            got: storage.as_slice().len(),
            expected: n * n,
        });
    }
    let caps: Vec<Capacity> = storage.as_slice().iter().map(|&s| Capacity::Fixed(s)).collect();
    let mut b = QpBuilder::new();
    let model = DispatchModel::build(&mut b, net, &caps);
    let sol = solve_qp(&b.build())?;
    Ok(model.extract(net, storage.as_slice(), &sol))
}

/// `lambda2[to] - lambda1[from]`.
pub fn lmp_spread(sol: &DispatchSolution, route: (usize, usize)) -> f64 {
    sol.spread(route.0, route.1)
}

/// Marginal value of storage per route, `(lambda2[j] - lambda1[i])_+`.
///
/// This equals `-dJ/dS_ij` whenever peak prices are nonnegative; with a
/// negative peak price a full battery would also profit from not discharging.
pub fn storage_value_gradient(
    net: &PowerNetwork,
    storage: &RouteStorage,
) -> Result<Vec<f64>, DispatchError> {
    let sol = solve_dispatch(net, storage)?;
    Ok(sol.spreads().into_iter().map(|s| s.max(0.0)).collect())
}

/// Optimality residuals recomputed from the network data and a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub primal: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    /// Most negative inequality dual, reported as a positive violation.
    pub dual_sign: f64,
}

impl KktReport {
    pub fn passes(&self, primal_tol: f64, dual_tol: f64) -> bool {
        self.primal <= primal_tol
            && self.stationarity <= dual_tol
            && self.complementarity <= dual_tol
            && self.dual_sign <= dual_tol
    }
}

/// Checks primal feasibility, stationarity and complementary slackness of a
/// dispatch solution against the program it claims to solve.
pub fn kkt_report(net: &PowerNetwork, sol: &DispatchSolution) -> KktReport {
    let n = net.buses();
    let h = net.shift_factors();
    let s = &sol.storage;
    let mut primal = 0.0f64;
    let mut stat = 0.0f64;
    let mut comp = 0.0f64;
    let mut sign = 0.0f64;
    // Records an inequality `slack >= 0` with dual `z`.
    let mut ineq = |slack: f64, z: f64, primal: &mut f64| {
        *primal = primal.max(-slack);
        sign = sign.max(-z);
        comp = comp.max((slack * z).abs());
    };

    for t in 0..PERIODS {
        let lambda = sol.lambda(t);
        let mut total = 0.0;
        for i in 0..n {
            let mut inj = sol.p[i][t] - sol.g[i][t] + sol.d[i][t];
            for (r, ur) in sol.u.iter().enumerate() {
                let at = if t == 0 { r / n } else { r % n };
                if at == i {
                    inj += ur[t];
                }
            }
            primal = primal.max(inj.abs());
            total += sol.p[i][t];

            let (lo, hi) = (sol.gen_lower[i][t], sol.gen_upper[i][t]);
            match net.cost(i, t) {
                Some(c) => {
                    let g = sol.g[i][t];
                    stat = stat.max((c.marginal(g) - lambda[i] - lo + hi).abs());
                    ineq(c.g_min.map_or(f64::INFINITY, |m| g - m), lo, &mut primal);
                    ineq(c.g_max.map_or(f64::INFINITY, |m| m - g), hi, &mut primal);
                }
                None => primal = primal.max(sol.g[i][t].abs()),
            }
            let (lo, hi) = (sol.load_lower[i][t], sol.load_upper[i][t]);
            match net.utility(i, t) {
                Some(u) => {
                    let d = sol.d[i][t];
                    stat = stat.max((-u.marginal(d) + lambda[i] - lo + hi).abs());
                    ineq(d, lo, &mut primal);
                    ineq(u.cap.map_or(f64::INFINITY, |m| m - d), hi, &mut primal);
                }
                None => primal = primal.max(sol.d[i][t].abs()),
            }

            let flow_term: f64 = (0..h.nrows()).map(|k| h[(k, i)] * sol.mu[k][t]).sum();
            stat = stat.max((lambda[i] - sol.energy[t] + flow_term).abs());
        }
        primal = primal.max(total.abs());
        for k in 0..h.nrows() {
            let flow: f64 = (0..n).map(|i| h[(k, i)] * sol.p[i][t]).sum();
            ineq(net.line_limits()[k] - flow, sol.mu[k][t], &mut primal);
        }
    }

    for (r, ur) in sol.u.iter().enumerate() {
        let (l1, l2) = (sol.lambda1[r / n], sol.lambda2[r % n]);
        let (lo, hi) = (sol.soc_lower[r], sol.soc_upper[r]);
        stat = stat.max((l1 - lo[0] + hi[0] - lo[1] + hi[1]).abs());
        stat = stat.max((l2 - lo[1] + hi[1]).abs());
        let e = [ur[0], ur[0] + ur[1]];
        for t in 0..PERIODS {
            ineq(e[t], lo[t], &mut primal);
            ineq(s[r] - e[t], hi[t], &mut primal);
        }
    }

    KktReport {
        primal,
        stationarity: stat,
        complementarity: comp,
        dual_sign: sign,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Branch, GenCost, Line, Utility};

    fn two_bus(a: f64, b: f64, c: f64) -> PowerNetwork {
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
            .unwrap()
            .with_cost(0, 0, GenCost::quadratic(a, b))
            .with_cost(0, 1, GenCost::quadratic(a, b))
            .with_utility(1, 1, Utility::linear(c))
    }

    #[test]
    fn single_bus_price_is_marginal_cost() {
        let net = PowerNetwork::new(1, nalgebra::DMatrix::zeros(0, 1), vec![])
            .unwrap()
            .with_cost(0, 0, GenCost::quadratic(0.5, 2.0))
            .with_utility(0, 0, Utility::linear(10.0));
        let sol = solve_dispatch(&net, &RouteStorage::zeros(1)).unwrap();
        // 2 * 0.5 * g + 2 = 10 -> g = 8
        assert!((sol.g[0][0] - 8.0).abs() < 1e-8);
        assert!((sol.lambda1[0] - 10.0).abs() < 1e-8);
        assert!((sol.objective - (0.5 * 64.0 + 16.0 - 80.0)).abs() < 1e-8);
    }

    #[test]
    fn two_bus_prices() {
        let net = two_bus(1.0, 10.0, 30.0);
        let sol = solve_dispatch(&net, &RouteStorage::zeros(2)).unwrap();
        assert!((sol.lambda1[0] - 10.0).abs() < 1e-8);
        assert!((sol.lambda2[1] - 30.0).abs() < 1e-8);
        let sol = solve_dispatch(&net, &RouteStorage::single(2, 0, 1, 0.5)).unwrap();
        assert!((lmp_spread(&sol, (0, 1)) - 19.0).abs() < 1e-8);
        assert!((sol.u[1][0] - 0.5).abs() < 1e-8);
        assert!((sol.u[1][1] + 0.5).abs() < 1e-8);
        assert!(kkt_report(&net, &sol).passes(1e-9, 1e-8));
    }

    #[test]
    fn storage_beyond_saturation_flattens_prices() {
        let net = two_bus(1.0, 10.0, 30.0);
        let sol = solve_dispatch(&net, &RouteStorage::single(2, 0, 1, 25.0)).unwrap();
        assert!((sol.lambda1[0] - 30.0).abs() < 1e-7);
        let grad = storage_value_gradient(&net, &RouteStorage::single(2, 0, 1, 0.0)).unwrap();
        // Uncongested: every route sees the same spread.
        assert!(grad.iter().all(|g| (g - 20.0).abs() < 1e-8), "{grad:?}");
        let k = kkt_report(&net, &sol);
        assert!(k.passes(1e-7, 1e-6), "{k:?}");
    }

    #[test]
    fn storage_rejects_bad_input() {
        assert!(matches!(
            RouteStorage::from_vec(2, vec![0.0; 3]),
            Err(DispatchError::Dimension { .. })
        ));
        assert!(matches!(
            RouteStorage::from_vec(1, vec![-1.0]),
            Err(DispatchError::NegativeStorage { .. })
        ));
    }

    #[test]
    fn congestion_separates_prices() {
        // Cheap generator at bus 1, expensive at bus 2, load at bus 2.
        let line = Line {
            branch: Branch {
                from: 0,
                to: 1,
                reactance: 1.0,
            },
            capacity: 2.0,
            both_directions: true,
        };
        let net = PowerNetwork::from_lines(2, &[line], 0)
            .unwrap()
            .with_cost(0, 0, GenCost::quadratic(0.5, 5.0))
            .with_cost(1, 0, GenCost::quadratic(0.5, 20.0))
            .with_utility(1, 0, Utility::linear(40.0).with_cap(10.0));
        let sol = solve_dispatch(&net, &RouteStorage::zeros(2)).unwrap();
        assert!((sol.g[0][0] - 2.0).abs() < 1e-8);
        assert!((sol.lambda1[0] - 7.0).abs() < 1e-8);
        assert!((sol.lambda1[1] - 28.0).abs() < 1e-8);
        assert!(sol.mu.iter().any(|m| (m[0] - 21.0).abs() < 1e-7));
        assert!(kkt_report(&net, &sol).passes(1e-9, 1e-7));
    }
}
