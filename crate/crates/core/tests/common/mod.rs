#![allow(dead_code)]

use evshare::Scenario;
use std::path::PathBuf;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

pub fn twobus() -> Scenario {
    Scenario::load(&scenario_dir().join("twobus.scn")).expect("twobus.scn loads")
}

/// Corpus scenarios in file-name order.
pub fn corpus() -> Vec<Scenario> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(scenario_dir().join("corpus"))
        .expect("corpus directory")
        .map(|e| e.expect("directory entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Scenario::load(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .collect()
}
