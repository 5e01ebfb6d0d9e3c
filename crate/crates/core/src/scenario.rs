//! Scenario files: TOML documents describing a network and its drivers.
//!
//! Bus numbers and routes are one-based in files. Unknown keys are rejected.
//!
//! ```toml
//! [meta]
//! name = "twobus"
//! base = 100.0                 # optional, for reporting only
//!
//! [buses]
//! count = 2
//! slack = 1                    # default 1
//!
//! [[lines]]                    # or a [shift_factors] table
//! from = 1
//! to = 2
//! reactance = 0.1
//! capacity = 100.0
//! monitor = "both"             # "both" (default) or "forward"
//!
//! [[costs]]                    # a g^2 + b g
//! bus = 1
//! period = [1, 2]              # 1, 2, a list, or omitted for both
//! a = 1.0
//! b = 10.0
//! g_min = 0.0                  # optional
//! g_max = 50.0                 # optional
//!
//! [[utilities]]
//! bus = 2
//! period = 2
//! kind = "linear"              # c d, or "quadratic": c d - e d^2
//! c = 30.0
//! cap = 5.0                    # optional demand cap
//!
//! [commuters]
//! kappa = 2.0
//! default = { kind = "none" }  # applied to routes not listed
//! [[commuters.routes]]
//! from = 1
//! to = 2
//! dist = { kind = "uniform", lo = 0.0, hi = 20.0, mass = 1.0 }
//!
//! [ondemand]
//! dist = { kind = "piecewise", points = [[0.0, 0.0], [10.0, 0.6], [30.0, 1.0]] }
//! kappa = [[inf, 2.0], [3.0, inf]]   # row = origin; inf = unavailable
//! ```
//!
//! Distributions: `uniform` (`lo`, `hi`, `mass` default 1), `atom` (`theta`,
//! `mass`), `piecewise` (`points` as `[theta, F]` pairs) and `none`.

use crate::drivers::{CostDistribution, DistributionError, DriverPopulation};
use crate::network::{
    build_shift_factors, Branch, GenCost, IssueKind, Line, NetworkError, PowerNetwork, Utility,
    ValidationReport, PERIODS,
};
use nalgebra::DMatrix;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("network error: {0}")]
    Network(#[from] NetworkError),
    #[error("distribution error in {context}: {source}")]
    Distribution {
        context: String,
        source: DistributionError,
    },
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub base: Option<f64>,
    pub net: PowerNetwork,
    pub pop: DriverPopulation,
    /// Warnings found while loading; errors abort loading instead.
    pub report: ValidationReport,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    meta: RawMeta,
    buses: RawBuses,
    lines: Option<Vec<RawLine>>,
    shift_factors: Option<RawShiftFactors>,
    #[serde(default)]
    costs: Vec<RawCost>,
    #[serde(default)]
    utilities: Vec<RawUtility>,
    commuters: Option<RawCommuters>,
    ondemand: Option<RawOnDemand>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    name: Option<String>,
    base: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBuses {
    count: usize,
    #[serde(default = "one")]
    slack: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Monitor {
    Both,
    Forward,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    from: usize,
    to: usize,
    reactance: f64,
    capacity: f64,
    monitor: Option<Monitor>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShiftFactors {
    matrix: Vec<Vec<f64>>,
    capacity: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Periods {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    bus: usize,
    period: Option<Periods>,
    a: f64,
    b: f64,
    g_min: Option<f64>,
    g_max: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum UtilityKind {
    Linear,
    Quadratic,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtility {
    bus: usize,
    period: Option<Periods>,
    kind: UtilityKind,
    c: f64,
    e: Option<f64>,
    cap: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawDist {
    Uniform {
        lo: f64,
        hi: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    Atom {
        theta: f64,
        #[serde(default = "unit")]
        mass: f64,
    },
    Piecewise {
        points: Vec<(f64, f64)>,
    },
    None,
}

fn unit() -> f64 {
    1.0
}

impl RawDist {
    fn build(&self, context: &str) -> Result<CostDistribution, ScenarioError> {
        let d = match self {
            RawDist::Uniform { lo, hi, mass } => CostDistribution::uniform(*lo, *hi, *mass),
            RawDist::Atom { theta, mass } => CostDistribution::atom(*theta, *mass),
            RawDist::Piecewise { points } => CostDistribution::piecewise(points.clone()),
            RawDist::None => Ok(CostDistribution::none()),
        };
        d.map_err(|source| ScenarioError::Distribution {
            context: context.to_string(),
            source,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCommuters {
    kappa: f64,
    default: Option<RawDist>,
    #[serde(default)]
    routes: Vec<RawRoute>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoute {
    from: usize,
    to: usize,
    dist: RawDist,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOnDemand {
    dist: RawDist,
    kappa: Vec<Vec<f64>>,
}

fn bus_index(bus: usize, n: usize, what: &str) -> Result<usize, ScenarioError> {
    if bus == 0 || bus > n {
        return Err(ScenarioError::Schema(format!(
            "{what}: bus {bus} outside 1..={n}"
        )));
    }
    Ok(bus - 1)
}

fn periods(p: &Option<Periods>, what: &str) -> Result<Vec<usize>, ScenarioError> {
    let list = match p {
        None => vec![1, 2],
        Some(Periods::One(t)) => vec![*t],
        Some(Periods::Many(ts)) => ts.clone(),
    };
    list.into_iter()
        .map(|t| {
            if (1..=PERIODS).contains(&t) {
                Ok(t - 1)
            } else {
                Err(ScenarioError::Schema(format!("{what}: period {t} is not 1 or 2")))
            }
        })
        .collect()
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let mut report = ValidationReport::default();
        let n = raw.buses.count;
        if n == 0 {
            return Err(ScenarioError::Schema("buses.count must be positive".into()));
        }
        let slack = bus_index(raw.buses.slack, n, "buses.slack")?;

        let lines = match &raw.lines {
            Some(lines) => Some(
                lines
                    .iter()
                    .enumerate()
                    .map(|(k, l)| {
                        let what = format!("lines[{}]", k + 1);
                        Ok(Line {
                            branch: Branch {
                                from: bus_index(l.from, n, &what)?,
                                to: bus_index(l.to, n, &what)?,
                                reactance: l.reactance,
                            },
                            capacity: l.capacity,
                            both_directions: !matches!(l.monitor, Some(Monitor::Forward)),
                        })
                    })
                    .collect::<Result<Vec<_>, ScenarioError>>()?,
            ),
            None => None,
        };
        let mut net = match (&raw.shift_factors, &lines) {
            (Some(sf), lines) => {
                let m = sf.matrix.len();
                if sf.matrix.iter().any(|row| row.len() != n) {
                    return Err(ScenarioError::Schema(format!(
                        "shift_factors.matrix rows must have {n} entries"
                    )));
                }
                if sf.capacity.len() != m {
                    return Err(ScenarioError::Schema(format!(
                        "shift_factors.capacity has {} entries for {m} rows",
                        sf.capacity.len()
                    )));
                }
                let h = DMatrix::from_fn(m, n, |r, c| sf.matrix[r][c]);
                if let Some(lines) = lines {
                    let from_lines = PowerNetwork::from_lines(n, lines, slack)?;
                    let agrees = from_lines.shift_factors().shape() == h.shape()
                        && (from_lines.shift_factors() - &h).abs().max() <= 1e-9;
                    report.warning(
                        IssueKind::Consistency,
                        if agrees {
                            "both shift_factors and lines given; using shift_factors".into()
                        } else {
                            "both shift_factors and lines given and they disagree; using \
                             shift_factors"
                                .into()
                        },
                    );
                }
                PowerNetwork::new(n, h, sf.capacity.clone())?
            }
            (None, Some(lines)) => {
                // Surface topology errors with file numbering.
                let branches: Vec<Branch> = lines.iter().map(|l| l.branch).collect();
                build_shift_factors(n, &branches, slack)?;
                PowerNetwork::from_lines(n, lines, slack)?
            }
            (None, None) => {
                return Err(ScenarioError::Schema(
                    "scenario needs either [[lines]] or [shift_factors]".into(),
                ))
            }
        };

        let mut seen_cost = vec![[false; PERIODS]; n];
        for (k, c) in raw.costs.iter().enumerate() {
            let what = format!("costs[{}]", k + 1);
            let i = bus_index(c.bus, n, &what)?;
            for t in periods(&c.period, &what)? {
                if std::mem::replace(&mut seen_cost[i][t], true) {
                    return Err(ScenarioError::Schema(format!(
                        "{what}: duplicate cost for bus {} period {}",
                        i + 1,
                        t + 1
                    )));
                }
                net.set_cost(
                    i,
                    t,
                    Some(GenCost {
                        a: c.a,
                        b: c.b,
                        g_min: c.g_min,
                        g_max: c.g_max,
                    }),
                );
            }
        }
        let mut seen_util = vec![[false; PERIODS]; n];
        for (k, u) in raw.utilities.iter().enumerate() {
            let what = format!("utilities[{}]", k + 1);
            let i = bus_index(u.bus, n, &what)?;
            let mut utility = match (&u.kind, u.e) {
                (UtilityKind::Linear, None) => Utility::linear(u.c),
                (UtilityKind::Linear, Some(_)) => {
                    return Err(ScenarioError::Schema(format!(
                        "{what}: linear utility takes no `e`"
                    )))
                }
                (UtilityKind::Quadratic, Some(e)) => Utility::quadratic(u.c, e),
                (UtilityKind::Quadratic, None) => {
                    return Err(ScenarioError::Schema(format!(
                        "{what}: quadratic utility needs `e`"
                    )))
                }
            };
            utility.cap = u.cap;
            for t in periods(&u.period, &what)? {
                if std::mem::replace(&mut seen_util[i][t], true) {
                    return Err(ScenarioError::Schema(format!(
                        "{what}: duplicate utility for bus {} period {}",
                        i + 1,
                        t + 1
                    )));
                }
                net.set_utility(i, t, Some(utility));
            }
        }

        let mut pop = DriverPopulation::empty(n);
        if let Some(c) = &raw.commuters {
            let default = match &c.default {
                Some(d) => d.build("commuters.default")?,
                None => CostDistribution::none(),
            };
            let mut routes = vec![default; n * n];
            let mut listed = vec![false; n * n];
            for (k, r) in c.routes.iter().enumerate() {
                let what = format!("commuters.routes[{}]", k + 1);
                let i = bus_index(r.from, n, &what)?;
                let j = bus_index(r.to, n, &what)?;
                if std::mem::replace(&mut listed[i * n + j], true) {
                    return Err(ScenarioError::Schema(format!(
                        "{what}: route {}->{} listed twice",
                        i + 1,
                        j + 1
                    )));
                }
                routes[i * n + j] = r.dist.build(&what)?;
            }
            pop.commuter.kappa = c.kappa;
            pop.commuter.routes = routes;
        }
        if let Some(o) = &raw.ondemand {
            if o.kappa.len() != n || o.kappa.iter().any(|row| row.len() != n) {
                return Err(ScenarioError::Schema(format!(
                    "ondemand.kappa must be a {n}x{n} matrix"
                )));
            }
            pop.ondemand.dist = o.dist.build("ondemand.dist")?;
            pop.ondemand.kappa = o.kappa.iter().flatten().copied().collect();
        }

        report.extend(net.validate());
        report.extend(pop.validate());
        if !report.is_valid() {
            return Err(ScenarioError::Invalid(report));
        }
        Ok(Scenario {
            name: raw.meta.name.unwrap_or_else(|| "scenario".into()),
            base: raw.meta.base,
            net,
            pop,
            report,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut scenario = Self::from_toml(&text)?;
        if scenario.name == "scenario" {
            if let Some(stem) = path.file_stem() {
                scenario.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(scenario)
    }
}

/// Reads and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<(PowerNetwork, DriverPopulation), ScenarioError> {
    let s = Scenario::load(path)?;
    Ok((s.net, s.pop))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"
        [buses]
        count = 2

        [[lines]]
        from = 1
        to = 2
        reactance = 0.1
        capacity = 100.0

        [[costs]]
        bus = 1
        a = 1.0
        b = 10.0

        [[utilities]]
        bus = 2
        period = 2
        kind = "linear"
        c = 30.0

        [commuters]
        kappa = 2.0
        [[commuters.routes]]
        from = 1
        to = 2
        dist = { kind = "uniform", lo = 0.0, hi = 20.0 }
    "#;

    #[test]
    fn parses_two_bus() {
        let s = Scenario::from_toml(TWO_BUS).unwrap();
        assert_eq!(s.net.buses(), 2);
        assert_eq!(s.net.constraints(), 2);
        assert!((s.net.shift_factors()[(0, 1)] + 1.0).abs() < 1e-12);
        assert!(s.net.cost(0, 0).is_some() && s.net.cost(0, 1).is_some());
        assert!(s.net.utility(1, 0).is_none() && s.net.utility(1, 1).is_some());
        assert_eq!(s.pop.commuter.routes[1].cdf(18.0), 0.9);
        assert!(s.report.is_empty());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = TWO_BUS.replace("count = 2", "count = 2\ncolour = \"red\"");
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn network_section_is_required() {
        let start = TWO_BUS.find("[[lines]]").unwrap();
        let end = TWO_BUS.find("[[costs]]").unwrap();
        let text = format!("{}{}", &TWO_BUS[..start], &TWO_BUS[end..]);
        assert!(matches!(Scenario::from_toml(&text), Err(ScenarioError::Schema(_))));
    }

    #[test]
    fn shift_factors_take_precedence() {
        let text = format!(
            "{TWO_BUS}\n[shift_factors]\nmatrix = [[0.0, -1.0]]\ncapacity = [50.0]\n"
        );
        let s = Scenario::from_toml(&text).unwrap();
        assert_eq!(s.net.constraints(), 1);
        assert_eq!(s.net.line_limits(), &[50.0]);
        assert!(s.report.has(IssueKind::Consistency));
    }

    #[test]
    fn invalid_network_names_the_invariant() {
        let text = TWO_BUS.replace("a = 1.0", "a = -1.0");
        match Scenario::from_toml(&text) {
            Err(ScenarioError::Invalid(report)) => assert!(report.has(IssueKind::NonConvexCost)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ondemand_kappa_accepts_inf() {
        let text = format!(
            "{TWO_BUS}\n[ondemand]\ndist = {{ kind = \"atom\", theta = 3.0, mass = 0.5 }}\n\
             kappa = [[inf, 2.0], [inf, inf]]\n"
        );
        let s = Scenario::from_toml(&text).unwrap();
        assert_eq!(s.pop.ondemand.kappa[1], 2.0);
        assert!(s.pop.ondemand.kappa[0].is_infinite());
        assert!(s.pop.has_ondemand());
    }
}
