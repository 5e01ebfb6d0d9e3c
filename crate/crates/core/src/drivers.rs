//! Driver populations and their inconvenience-cost distributions.
//!
//! Distributions are piecewise-linear CDFs given by breakpoints `(theta, F)`.
//! Repeated `theta` values encode point masses. Mass not covered by the
//! breakpoints (`1 - finite_mass`) belongs to drivers who never participate.

use crate::dispatch::RouteStorage;
use crate::network::{IssueKind, ValidationReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("breakpoint {0} is not finite")]
    NonFinite(usize),
    #[error("breakpoint {0} has negative cost")]
    NegativeCost(usize),
    #[error("breakpoints decrease at index {0}")]
    Decreasing(usize),
    #[error("total mass {0} is outside [0, 1]")]
    Mass(f64),
    #[error("quantile {q} exceeds finite mass {mass}")]
    Quantile { q: f64, mass: f64 },
}

/// Piecewise-linear inconvenience-cost CDF, right-continuous, starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDistribution {
    points: Vec<(f64, f64)>,
}

/// A linear piece of the quantile function: `F^-1(x) = theta + slope * (x - start)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub theta: f64,
    pub width: f64,
    pub slope: f64,
}

impl CostDistribution {
    /// Everybody has infinite cost.
    pub fn none() -> Self {
        CostDistribution { points: Vec::new() }
    }

    pub fn uniform(lo: f64, hi: f64, mass: f64) -> Result<Self, DistributionError> {
        Self::piecewise(vec![(lo, 0.0), (hi, mass)])
    }

    pub fn atom(theta: f64, mass: f64) -> Result<Self, DistributionError> {
        Self::piecewise(vec![(theta, 0.0), (theta, mass)])
    }

    /// Validates and normalizes breakpoints. A first point with positive mass
    /// is read as an atom at that cost.
    pub fn piecewise(mut points: Vec<(f64, f64)>) -> Result<Self, DistributionError> {
        for (k, &(t, f)) in points.iter().enumerate() {
            if !(t.is_finite() && f.is_finite()) {
                return Err(DistributionError::NonFinite(k));
            }
            if t < 0.0 {
                return Err(DistributionError::NegativeCost(k));
            }
            if k > 0 && (t < points[k - 1].0 || f < points[k - 1].1) {
                return Err(DistributionError::Decreasing(k));
            }
        }
        if let Some(&(t0, f0)) = points.first() {
            if f0 < 0.0 {
                return Err(DistributionError::Mass(f0));
            }
            if f0 > 0.0 {
                points.insert(0, (t0, 0.0));
            }
        }
        let mass = points.last().map_or(0.0, |p| p.1);
        if mass > 1.0 + 1e-12 {
            return Err(DistributionError::Mass(mass));
        }
        if mass == 0.0 {
            points.clear();
        }
        Ok(CostDistribution { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn finite_mass(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lowest cost carrying mass, `None` for an empty population.
    pub fn theta_min(&self) -> Option<f64> {
        self.points.first().map(|p| p.0)
    }

    pub fn theta_max(&self) -> Option<f64> {
        self.points.last().map(|p| p.0)
    }

    /// `F(theta)`.
    pub fn cdf(&self, theta: f64) -> f64 {
        let pts = &self.points;
        if pts.is_empty() || theta.is_nan() || theta < pts[0].0 {
            return 0.0;
        }
        let k = pts.partition_point(|p| p.0 <= theta) - 1;
        if k + 1 == pts.len() {
            return pts[k].1;
        }
        let (t0, f0) = pts[k];
        let (t1, f1) = pts[k + 1];
        f0 + (f1 - f0) * (theta - t0) / (t1 - t0)
    }

    /// Smallest `theta` with `F(theta) >= q`.
    pub fn inverse(&self, q: f64) -> Result<f64, DistributionError> {
        let mass = self.finite_mass();
        if q > mass * (1.0 + 1e-12) + 1e-15 {
            return Err(DistributionError::Quantile { q, mass });
        }
        let pts = &self.points;
        if pts.is_empty() {
            return Ok(0.0);
        }
        let q = q.min(mass);
        let k = pts.partition_point(|p| p.1 < q);
        if k == 0 {
            return Ok(pts[0].0);
        }
        let (t0, f0) = pts[k - 1];
        let (t1, f1) = pts[k];
        Ok(t0 + (q - f0) / (f1 - f0) * (t1 - t0))
    }

    /// The set of thresholds consistent with supply `q`:
    /// `[inf {theta : F(theta) >= q}, sup {theta : F(theta) <= q}]`.
    /// Zero supply is consistent with any threshold below the support and
    /// full supply with any threshold above it.
    pub fn inverse_interval(&self, q: f64) -> (f64, f64) {
        let mass = self.finite_mass();
        let lo = if q <= 0.0 {
            f64::NEG_INFINITY
        } else {
            self.inverse(q.min(mass)).unwrap_or(f64::INFINITY)
        };
        let hi = if q >= mass {
            f64::INFINITY
        } else if q < 0.0 {
            f64::NEG_INFINITY
        } else {
            let pts = &self.points;
            let k = pts.partition_point(|p| p.1 <= q);
            let (t0, f0) = pts[k - 1];
            let (t1, f1) = pts[k];
            t0 + (q - f0) / (f1 - f0) * (t1 - t0)
        };
        (lo, hi)
    }

    /// Linear pieces of the quantile function in increasing order.
    pub fn segments(&self) -> Vec<Segment> {
        self.points
            .windows(2)
            .filter(|w| w[1].1 > w[0].1)
            .map(|w| {
                let width = w[1].1 - w[0].1;
                Segment {
                    theta: w[0].0,
                    width,
                    slope: (w[1].0 - w[0].0) / width,
                }
            })
            .collect()
    }

    pub fn has_atoms(&self) -> bool {
        self.segments().iter().any(|s| s.slope == 0.0)
    }

    /// `int_0^q F^-1(x) dx`.
    pub fn integrated_inverse(&self, q: f64) -> f64 {
        let mut left = q;
        let mut total = 0.0;
        for s in self.segments() {
            if left <= 0.0 {
                break;
            }
            let w = left.min(s.width);
            total += s.theta * w + 0.5 * s.slope * w * w;
            left -= w;
        }
        total
    }

    /// Applies the capacity normalization: mass scales by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        CostDistribution {
            points: self.points.iter().map(|&(t, f)| (t, f * alpha)).collect(),
        }
    }
}

pub fn cdf_eval(dist: &CostDistribution, theta: f64) -> f64 {
    dist.cdf(theta)
}

pub fn cdf_inverse(dist: &CostDistribution, q: f64) -> Result<f64, DistributionError> {
    dist.inverse(q)
}

/// Commuters with fixed routes and a common degradation cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommuterPopulation {
    pub kappa: f64,
    /// One distribution per route, `i * n + j`.
    pub routes: Vec<CostDistribution>,
}

/// On-demand drivers who pick any route or abstain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnDemandPopulation {
    pub dist: CostDistribution,
    /// Route costs, `i * n + j`. Infinite entries mark unavailable routes.
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationKind {
    Commuter,
    #[serde(rename = "ondemand")]
    OnDemand,
    Hybrid,
}

impl PopulationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PopulationKind::Commuter => "commuter",
            PopulationKind::OnDemand => "ondemand",
            PopulationKind::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverPopulation {
    pub n: usize,
    pub commuter: CommuterPopulation,
    pub ondemand: OnDemandPopulation,
}

impl DriverPopulation {
    pub fn empty(n: usize) -> Self {
        DriverPopulation {
            n,
            commuter: CommuterPopulation {
                kappa: 0.0,
                routes: vec![CostDistribution::none(); n * n],
            },
            ondemand: OnDemandPopulation {
                dist: CostDistribution::none(),
                kappa: vec![f64::INFINITY; n * n],
            },
        }
    }

    pub fn commuters(n: usize, kappa: f64, routes: Vec<CostDistribution>) -> Self {
        let mut pop = Self::empty(n);
        pop.commuter = CommuterPopulation { kappa, routes };
        pop
    }

    pub fn on_demand(n: usize, dist: CostDistribution, kappa: Vec<f64>) -> Self {
        let mut pop = Self::empty(n);
        pop.ondemand = OnDemandPopulation { dist, kappa };
        pop
    }

    pub fn hybrid(commuter: &DriverPopulation, ondemand: &DriverPopulation) -> Self {
        DriverPopulation {
            n: commuter.n,
            commuter: commuter.commuter.clone(),
            ondemand: ondemand.ondemand.clone(),
        }
    }

    pub fn has_commuters(&self) -> bool {
        self.commuter.routes.iter().any(|d| !d.is_empty())
    }

    pub fn has_ondemand(&self) -> bool {
        !self.ondemand.dist.is_empty() && self.ondemand.kappa.iter().any(|k| k.is_finite())
    }

    /// Classes present; an entirely empty population counts as commuter.
    pub fn kind(&self) -> PopulationKind {
        match (self.has_commuters(), self.has_ondemand()) {
            (true, true) => PopulationKind::Hybrid,
            (false, true) => PopulationKind::OnDemand,
            _ => PopulationKind::Commuter,
        }
    }

    /// Keeps only the requested classes.
    pub fn restricted(&self, kind: PopulationKind) -> Self {
        let mut out = self.clone();
        let empty = Self::empty(self.n);
        match kind {
            PopulationKind::Commuter => out.ondemand = empty.ondemand,
            PopulationKind::OnDemand => out.commuter = empty.commuter,
            PopulationKind::Hybrid => {}
        }
        out
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n2 = self.n * self.n;
        if self.commuter.routes.len() != n2 || self.ondemand.kappa.len() != n2 {
            report.error(
                IssueKind::Dimension,
                format!("population arrays must have {n2} route entries"),
            );
        }
        if !(self.commuter.kappa >= 0.0 && self.commuter.kappa.is_finite()) {
            report.error(
                IssueKind::Population,
                format!("commuter kappa {} must be finite and nonnegative", self.commuter.kappa),
            );
        }
        for (r, k) in self.ondemand.kappa.iter().enumerate() {
            if k.is_nan() || *k < 0.0 {
                report.error(
                    IssueKind::Population,
                    format!(
                        "on-demand kappa on route {}->{} is {k}, must be nonnegative",
                        r / self.n.max(1) + 1,
                        r % self.n.max(1) + 1
                    ),
                );
            }
        }
        if !self.ondemand.dist.is_empty() && self.ondemand.kappa.iter().all(|k| k.is_infinite()) {
            report.warning(
                IssueKind::Population,
                "on-demand drivers have no available route".into(),
            );
        }
        report
    }

    /// Applies the capacity normalization to both classes.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for d in out.commuter.routes.iter_mut() {
            *d = d.scaled(alpha);
        }
        out.ondemand.dist = out.ondemand.dist.scaled(alpha);
        out
    }
}

/// Supply implied by thresholds: `S_fix[r] = F_r(theta_r)` and total flexible
/// supply `F(theta_flex)`.
pub fn supply_from_threshold(
    pop: &DriverPopulation,
    thresholds_fix: &[f64],
    theta_flex: f64,
) -> (RouteStorage, f64) {
    let s = pop
        .commuter
        .routes
        .iter()
        .zip(thresholds_fix)
        .map(|(d, &t)| d.cdf(t))
        .collect();
    let fix = RouteStorage::from_vec(pop.n, s).expect("cdf values are nonnegative");
    (fix, pop.ondemand.dist.cdf(theta_flex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u20() -> CostDistribution {
        CostDistribution::uniform(0.0, 20.0, 1.0).unwrap()
    }

    #[test]
    fn uniform_cdf_and_inverse() {
        let d = u20();
        assert!((d.cdf(18.0) - 0.9).abs() < 1e-15);
        assert_eq!(d.cdf(-1.0), 0.0);
        assert!((d.inverse(0.9).unwrap() - 18.0).abs() < 1e-12);
        assert_eq!(d.inverse(0.0).unwrap(), 0.0);
        let half = CostDistribution::uniform(0.0, 20.0, 0.5).unwrap();
        assert_eq!(half.cdf(20.0), 0.5);
        assert_eq!(half.cdf(1e9), 0.5);
        assert!(matches!(half.inverse(0.6), Err(DistributionError::Quantile { .. })));
    }

    #[test]
    fn flat_segment_inverse_is_left_endpoint() {
        let d = CostDistribution::piecewise(vec![(0.0, 0.0), (2.0, 0.4), (5.0, 0.4), (6.0, 1.0)])
            .unwrap();
        assert_eq!(d.inverse(0.4).unwrap(), 2.0);
        assert_eq!(d.inverse_interval(0.4), (2.0, 5.0));
    }

    #[test]
    fn atoms() {
        let d = CostDistribution::atom(3.0, 0.5).unwrap();
        assert_eq!(d.cdf(2.999), 0.0);
        assert_eq!(d.cdf(3.0), 0.5);
        assert_eq!(d.inverse(0.25).unwrap(), 3.0);
        assert_eq!(d.inverse_interval(0.25), (3.0, 3.0));
        assert_eq!(d.inverse_interval(0.0), (f64::NEG_INFINITY, 3.0));
        assert_eq!(d.inverse_interval(0.5), (3.0, f64::INFINITY));
        assert!(d.has_atoms());
        let leading = CostDistribution::piecewise(vec![(1.0, 0.2), (2.0, 1.0)]).unwrap();
        assert_eq!(leading.cdf(1.0), 0.2);
        assert_eq!(leading.inverse(0.1).unwrap(), 1.0);
    }

    #[test]
    fn rejects_invalid() {
        assert!(CostDistribution::uniform(-1.0, 2.0, 1.0).is_err());
        assert!(CostDistribution::uniform(3.0, 2.0, 1.0).is_err());
        assert!(CostDistribution::uniform(0.0, 2.0, 1.5).is_err());
        assert!(CostDistribution::piecewise(vec![(0.0, 0.0), (1.0, 0.5), (2.0, 0.4)]).is_err());
    }

    #[test]
    fn integrated_inverse_matches_closed_form() {
        // int_0^q 20 x dx = 10 q^2
        assert!((u20().integrated_inverse(0.5) - 2.5).abs() < 1e-12);
        let d = CostDistribution::piecewise(vec![(1.0, 0.3), (3.0, 0.5)]).unwrap();
        // atom of 0.3 at 1, then linear from 1 to 3 over 0.2 mass
        assert!((d.integrated_inverse(0.5) - (0.3 + 0.2 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn supply_examples() {
        let pop = DriverPopulation::commuters(
            2,
            2.0,
            vec![CostDistribution::none(), u20(), CostDistribution::none(), CostDistribution::none()],
        );
        let (fix, _) = supply_from_threshold(&pop, &[-1.0; 4], -1.0);
        assert_eq!(fix.total(), 0.0);
        let (fix, _) = supply_from_threshold(&pop, &[18.0; 4], 0.0);
        assert!((fix.get(0, 1) - 0.9).abs() < 1e-15);
        let od = DriverPopulation::on_demand(
            2,
            CostDistribution::uniform(0.0, 10.0, 1.0).unwrap(),
            vec![0.0; 4],
        );
        assert_eq!(supply_from_threshold(&od, &[0.0; 4], 25.0).1, 1.0);
        assert_eq!(pop.kind(), PopulationKind::Commuter);
        assert_eq!(od.kind(), PopulationKind::OnDemand);
        assert_eq!(DriverPopulation::hybrid(&pop, &od).kind(), PopulationKind::Hybrid);
    }

    fn arb_dist() -> impl Strategy<Value = CostDistribution> {
        prop::collection::vec((0.0f64..5.0, 0.0f64..0.3), 1..6).prop_map(|steps| {
            let mut t = 0.0;
            let mut f = 0.0;
            let mut pts = vec![(0.0, 0.0)];
            for (dt, df) in steps {
                t += dt;
                f = (f + df).min(1.0);
                pts.push((t, f));
            }
            CostDistribution::piecewise(pts).unwrap()
        })
    }

    proptest! {
        #[test]
        fn inverse_is_a_left_inverse(d in arb_dist(), u in 0.0f64..1.0) {
            let q = u * d.finite_mass();
            let theta = d.inverse(q).unwrap();
            prop_assert!(d.cdf(theta) >= q - 1e-12);
            if theta > 1e-9 {
                prop_assert!(d.cdf(theta - 1e-9) <= q + 1e-12);
            }
            let (lo, hi) = d.inverse_interval(q);
            prop_assert!(lo <= hi);
        }

        #[test]
        fn cdf_is_monotone(d in arb_dist(), a in 0.0f64..30.0, b in 0.0f64..30.0) {
            let (a, b) = (a.min(b), a.max(b));
            prop_assert!(d.cdf(a) <= d.cdf(b));
            prop_assert!(d.cdf(b) <= d.finite_mass());
        }

        #[test]
        fn inverse_of_cdf_on_increasing_pieces(lo in 0.0f64..10.0, w in 0.1f64..10.0, x in 0.01f64..0.99) {
            let d = CostDistribution::uniform(lo, lo + w, 1.0).unwrap();
            let theta = lo + x * w;
            prop_assert!((d.inverse(d.cdf(theta)).unwrap() - theta).abs() < 1e-9);
        }
    }
}
