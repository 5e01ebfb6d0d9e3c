//! Transmission network model: buses, shift factors, line limits, and the
//! per-bus, per-period generation cost and load utility functions.
//!
//! Bus indices are zero-based in the library. Scenario files and reports use
//! one-based labels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;
use thiserror::Error;

/// Number of dispatch periods: off-peak then peak.
pub const PERIODS: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("bus index {0} out of range for {1} buses")]
    InvalidBus(usize, usize),
    #[error("line {line} has nonpositive reactance {reactance}")]
    NonPositiveReactance { line: usize, reactance: f64 },
    #[error("network is disconnected: bus {0} is unreachable from the slack bus")]
    Disconnected(usize),
    #[error("shift-factor matrix is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Dimension {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
}

/// A branch of the DC network model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub reactance: f64,
}

/// A branch with a thermal limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub branch: Branch,
    pub capacity: f64,
    /// Monitor the reverse direction as well (two constraint rows).
    pub both_directions: bool,
}

/// Builds the DC shift-factor matrix, one row per branch in edge-list order.
///
/// Row `k` maps a nodal injection vector to the flow on branch `k`, measured
/// positive from `from` to `to`. The slack bus absorbs the imbalance, so its
/// column is identically zero; for balanced injections (`1'p = 0`) the product
/// `Hp` does not depend on the slack choice.
pub fn build_shift_factors(
    n: usize,
    branches: &[Branch],
    slack: usize,
) -> Result<DMatrix<f64>, NetworkError> {
    if slack >= n {
        return Err(NetworkError::InvalidBus(slack, n));
    }
    for (k, br) in branches.iter().enumerate() {
        if br.from >= n {
            return Err(NetworkError::InvalidBus(br.from, n));
        }
        if br.to >= n {
            return Err(NetworkError::InvalidBus(br.to, n));
        }
        if br.reactance <= 0.0 || !br.reactance.is_finite() {
            return Err(NetworkError::NonPositiveReactance {
                line: k,
                reactance: br.reactance,
            });
        }
    }
    check_connected(n, branches, slack)?;

    let mut bbus = DMatrix::<f64>::zeros(n, n);
    for br in branches {
        let b = 1.0 / br.reactance;
        bbus[(br.from, br.from)] += b;
        bbus[(br.to, br.to)] += b;
        bbus[(br.from, br.to)] -= b;
        bbus[(br.to, br.from)] -= b;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let reduced = DMatrix::from_fn(n - 1, n - 1, |r, c| bbus[(keep[r], keep[c])]);
    // Angle sensitivities with the slack angle pinned at zero.
    let mut x = DMatrix::<f64>::zeros(n, n);
    if n > 1 {
        let inv = reduced
            .lu()
            .try_inverse()
            .ok_or(NetworkError::Disconnected(keep[0]))?;
        for (r, &i) in keep.iter().enumerate() {
            for (c, &j) in keep.iter().enumerate() {
                x[(i, j)] = inv[(r, c)];
            }
        }
    }
    Ok(DMatrix::from_fn(branches.len(), n, |k, j| {
        let br = &branches[k];
        (x[(br.from, j)] - x[(br.to, j)]) / br.reactance
    }))
}

fn check_connected(n: usize, branches: &[Branch], slack: usize) -> Result<(), NetworkError> {
    let mut adj = vec![Vec::new(); n];
    for br in branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    seen[slack] = true;
    let mut queue = VecDeque::from([slack]);
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(NetworkError::Disconnected(i)),
        None => Ok(()),
    }
}

/// Generation cost `a g^2 + b g` with optional output limits.
///
/// Output is unbounded below unless `g_min` is given: a negative output is
/// price-responsive absorption at marginal cost, which keeps the zero-output
/// price well defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenCost {
    pub a: f64,
    pub b: f64,
    pub g_min: Option<f64>,
    pub g_max: Option<f64>,
}

impl GenCost {
    pub fn quadratic(a: f64, b: f64) -> Self {
        GenCost {
            a,
            b,
            g_min: None,
            g_max: None,
        }
    }

    pub fn cost(&self, g: f64) -> f64 {
        self.a * g * g + self.b * g
    }

    pub fn marginal(&self, g: f64) -> f64 {
        2.0 * self.a * g + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UtilityShape {
    /// `B(d) = c d`
    Linear { c: f64 },
    /// `B(d) = c d - e d^2`
    Quadratic { c: f64, e: f64 },
}

/// Load utility with served demand `0 <= d <= cap`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub shape: UtilityShape,
    pub cap: Option<f64>,
}

impl Utility {
    pub fn linear(c: f64) -> Self {
        Utility {
            shape: UtilityShape::Linear { c },
            cap: None,
        }
    }

    pub fn quadratic(c: f64, e: f64) -> Self {
        Utility {
            shape: UtilityShape::Quadratic { c, e },
            cap: None,
        }
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self
    }

    /// `(c, e)` with `B(d) = c d - e d^2`.
    pub fn coefficients(&self) -> (f64, f64) {
        match self.shape {
            UtilityShape::Linear { c } => (c, 0.0),
            UtilityShape::Quadratic { c, e } => (c, e),
        }
    }

    pub fn value(&self, d: f64) -> f64 {
        let (c, e) = self.coefficients();
        c * d - e * d * d
    }

    pub fn marginal(&self, d: f64) -> f64 {
        let (c, e) = self.coefficients();
        c - 2.0 * e * d
    }
}

/// Transmission network with shift factors `H` (m x n) and limits `Hp <= f_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerNetwork {
    n: usize,
    h: DMatrix<f64>,
    f_bar: Vec<f64>,
    costs: [Vec<Option<GenCost>>; PERIODS],
    utilities: [Vec<Option<Utility>>; PERIODS],
}

impl PowerNetwork {
    /// Network with explicit shift factors and no generators or loads.
    pub fn new(n: usize, h: DMatrix<f64>, f_bar: Vec<f64>) -> Result<Self, NetworkError> {
        if h.ncols() != n || h.nrows() != f_bar.len() {
            return Err(NetworkError::Dimension {
                rows: h.nrows(),
                cols: h.ncols(),
                expected_rows: f_bar.len(),
                expected_cols: n,
            });
        }
        Ok(PowerNetwork {
            n,
            h,
            f_bar,
            costs: [vec![None; n], vec![None; n]],
            utilities: [vec![None; n], vec![None; n]],
        })
    }

    /// Network whose constraint rows come from line topology, in line order
    /// (forward row, then reverse row when both directions are monitored).
    pub fn from_lines(n: usize, lines: &[Line], slack: usize) -> Result<Self, NetworkError> {
        let branches: Vec<Branch> = lines.iter().map(|l| l.branch).collect();
        let ptdf = build_shift_factors(n, &branches, slack)?;
        let mut rows = Vec::new();
        let mut f_bar = Vec::new();
        for (k, line) in lines.iter().enumerate() {
            rows.push(ptdf.row(k).into_owned());
            f_bar.push(line.capacity);
            if line.both_directions {
                rows.push(-ptdf.row(k).into_owned());
                f_bar.push(line.capacity);
            }
        }
        let h = if rows.is_empty() {
            DMatrix::zeros(0, n)
        } else {
            DMatrix::from_rows(&rows)
        };
        Self::new(n, h, f_bar)
    }

    pub fn with_cost(mut self, bus: usize, period: usize, cost: GenCost) -> Self {
        self.costs[period][bus] = Some(cost);
        self
    }

    pub fn with_utility(mut self, bus: usize, period: usize, utility: Utility) -> Self {
        self.utilities[period][bus] = Some(utility);
        self
    }

    pub fn set_cost(&mut self, bus: usize, period: usize, cost: Option<GenCost>) {
        self.costs[period][bus] = cost;
    }

    pub fn set_utility(&mut self, bus: usize, period: usize, utility: Option<Utility>) {
        self.utilities[period][bus] = utility;
    }

    pub fn buses(&self) -> usize {
        self.n
    }

    pub fn routes(&self) -> usize {
        self.n * self.n
    }

    pub fn constraints(&self) -> usize {
        self.f_bar.len()
    }

    pub fn shift_factors(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn line_limits(&self) -> &[f64] {
        &self.f_bar
    }

    pub fn cost(&self, bus: usize, period: usize) -> Option<&GenCost> {
        self.costs[period][bus].as_ref()
    }

    pub fn utility(&self, bus: usize, period: usize) -> Option<&Utility> {
        self.utilities[period][bus].as_ref()
    }

    /// Applies the capacity normalization: energies, caps and line limits are
    /// multiplied by `alpha`, quadratic coefficients divided by it. Prices are
    /// unchanged and the dispatch objective scales by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.f_bar.iter_mut().for_each(|f| *f *= alpha);
        for t in 0..PERIODS {
            for c in out.costs[t].iter_mut().flatten() {
                c.a /= alpha;
                c.g_min = c.g_min.map(|g| g * alpha);
                c.g_max = c.g_max.map(|g| g * alpha);
            }
            for u in out.utilities[t].iter_mut().flatten() {
                if let UtilityShape::Quadratic { e, .. } = &mut u.shape {
                    *e /= alpha;
                }
                u.cap = u.cap.map(|d| d * alpha);
            }
        }
        out
    }

    /// Checks the model invariants. An empty report means the network is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.h.ncols() != self.n || self.h.nrows() != self.f_bar.len() {
            report.error(
                IssueKind::Dimension,
                format!(
                    "shift factors are {}x{} but there are {} buses and {} limits",
                    self.h.nrows(),
                    self.h.ncols(),
                    self.n,
                    self.f_bar.len()
                ),
            );
        }
        if self.h.iter().any(|v| !v.is_finite()) {
            report.error(IssueKind::NonFinite, "shift factors contain non-finite entries".into());
        }
        for (k, f) in self.f_bar.iter().enumerate() {
            if f.is_nan() || *f <= 0.0 {
                report.error(
                    IssueKind::LineCapacity,
                    format!("constraint {} has nonpositive capacity {f}", k + 1),
                );
            }
        }
        for t in 0..PERIODS {
            for i in 0..self.n {
                let at = format!("bus {} period {}", i + 1, t + 1);
                if let Some(c) = &self.costs[t][i] {
                    if !(c.a.is_finite() && c.b.is_finite()) {
                        report.error(IssueKind::NonFinite, format!("{at}: non-finite cost"));
                    }
                    if c.a < 0.0 {
                        report.error(
                            IssueKind::NonConvexCost,
                            format!("{at}: cost coefficient a = {} is negative", c.a),
                        );
                    }
                    if let (Some(lo), Some(hi)) = (c.g_min, c.g_max) {
                        if lo > hi {
                            report.error(
                                IssueKind::Bounds,
                                format!("{at}: g_min {lo} exceeds g_max {hi}"),
                            );
                        }
                    }
                    if c.g_max.is_some_and(|g| g < 0.0) {
                        report.error(IssueKind::Bounds, format!("{at}: negative generation cap"));
                    }
                    if c.a == 0.0 && c.g_min.is_none() {
                        report.error(
                            IssueKind::Unbounded,
                            format!("{at}: linear cost without g_min absorbs unlimited energy"),
                        );
                    }
                }
                if let Some(u) = &self.utilities[t][i] {
                    let (c, e) = u.coefficients();
                    if !(c.is_finite() && e.is_finite()) {
                        report.error(IssueKind::NonFinite, format!("{at}: non-finite utility"));
                    }
                    if e < 0.0 {
                        report.error(
                            IssueKind::NonConcaveUtility,
                            format!("{at}: utility coefficient e = {e} makes B convex"),
                        );
                    }
                    if u.cap.is_some_and(|d| d < 0.0) {
                        report.error(IssueKind::Bounds, format!("{at}: negative demand cap"));
                    }
                    if u.cap.is_none() && e == 0.0 {
                        if let Some(j) = self.unlimited_supply_below(t, c) {
                            report.error(
                                IssueKind::Unbounded,
                                format!(
                                    "{at}: uncapped linear utility {c} exceeds the flat marginal \
                                     cost of uncapped generator at bus {}",
                                    j + 1
                                ),
                            );
                        }
                    }
                }
            }
        }
        report
    }

    /// A generator that can supply without limit at marginal cost below `c`.
    fn unlimited_supply_below(&self, period: usize, c: f64) -> Option<usize> {
        self.costs[period].iter().position(|g| {
            g.is_some_and(|g| g.a == 0.0 && g.b < c && g.g_max.is_none())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IssueKind {
    Dimension,
    NonFinite,
    LineCapacity,
    NonConvexCost,
    NonConcaveUtility,
    Bounds,
    Unbounded,
    Consistency,
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub kind: IssueKind,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag} [{:?}]: {}", self.kind, self.message)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "  {issue}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn error(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Error,
            kind,
            message,
        });
    }

    pub fn warning(&mut self, kind: IssueKind, message: String) {
        self.issues.push(Issue {
            severity: Severity::Warning,
            kind,
            message,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.issues.iter().all(|i| i.severity != Severity::Error)
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.issues.extend(other.issues);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn br(from: usize, to: usize, reactance: f64) -> Branch {
        Branch { from, to, reactance }
    }

    #[test]
    fn two_bus_shift_factors() {
        let h = build_shift_factors(2, &[br(0, 1, 0.3)], 0).unwrap();
        assert_eq!(h.shape(), (1, 2));
        assert_eq!(h[(0, 0)], 0.0);
        assert!((h[(0, 1)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangle_splits_two_thirds() {
        let lines = [br(0, 1, 1.0), br(1, 2, 1.0), br(0, 2, 1.0)];
        let h = build_shift_factors(3, &lines, 2).unwrap();
        // Inject at bus 1, withdraw at bus 2.
        let flow = h[(0, 0)] - h[(0, 1)];
        assert!((flow - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(
            build_shift_factors(2, &[br(0, 1, 1.0)], 2),
            Err(NetworkError::InvalidBus(2, 2))
        );
        assert!(matches!(
            build_shift_factors(2, &[br(0, 1, 0.0)], 0),
            Err(NetworkError::NonPositiveReactance { .. })
        ));
        assert_eq!(
            build_shift_factors(3, &[br(0, 1, 1.0)], 0),
            Err(NetworkError::Disconnected(2))
        );
    }

    #[test]
    fn validation_flags_convexity_and_unboundedness() {
        let line = Line {
            branch: br(0, 1, 1.0),
            capacity: 10.0,
            both_directions: true,
        };
        let base = PowerNetwork::from_lines(2, &[line], 0).unwrap();
        let bad = base
            .clone()
            .with_cost(0, 0, GenCost::quadratic(-1.0, 10.0));
        assert!(bad.validate().has(IssueKind::NonConvexCost));

        let mut flat = GenCost::quadratic(0.0, 10.0);
        flat.g_min = Some(0.0);
        let unbounded = base
            .clone()
            .with_cost(0, 1, flat)
            .with_utility(1, 1, Utility::linear(100.0));
        let report = unbounded.validate();
        assert!(report.has(IssueKind::Unbounded), "{report:?}");

        let capped = base
            .with_cost(0, 1, flat)
            .with_utility(1, 1, Utility::linear(100.0).with_cap(5.0));
        assert!(capped.validate().is_empty());
    }
}
