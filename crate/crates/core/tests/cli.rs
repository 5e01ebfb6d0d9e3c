mod common;

use clap::Parser;
use evshare::cli::{execute, Comparison, RunConfig, EXIT_INVALID, EXIT_OK, SCENARIO_DIR_VAR};
use evshare::{analytic_lmps, EquilibriumResult, TwoBusParams};
use std::path::PathBuf;
use std::process::Command;

fn twobus_path() -> String {
    common::scenario_dir().join("twobus.scn").display().to_string()
}

fn run(args: &[&str]) -> evshare::cli::Outcome {
    let mut argv = vec!["evshare"];
    argv.extend_from_slice(args);
    execute(&RunConfig::try_parse_from(argv).expect("valid command line"))
}

fn scratch(name: &str, text: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("evshare-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn compare_shows_the_two_bus_ordering() {
    let out = run(&["compare", &twobus_path()]);
    assert_eq!(out.status, EXIT_OK, "{:?}", out.diagnostics);
    assert!(out.output.contains("0.900000"));
    assert!(out.output.contains("0.818182"));
    assert!(out.output.contains("myopic 0.900000 >= ne 0.818182"));

    let json = run(&["compare", &twobus_path(), "--format", "json"]);
    let cmp: Comparison = serde_json::from_str(&json.output).unwrap();
    assert!(cmp.myopic_at_least_ne);
    assert!(cmp.sw_ne_gap < 1e-6);
}

#[test]
fn equilibrium_json_round_trips() {
    let out = run(&[
        "equilibrium", "--concept", "ne", "--population", "commuter", &twobus_path(), "--format",
        "json",
    ]);
    assert_eq!(out.status, EXIT_OK);
    let parsed: EquilibriumResult = serde_json::from_str(&out.output).unwrap();
    assert!((parsed.total_storage() - 9.0 / 11.0).abs() < 1e-6);
    let again = serde_json::to_string_pretty(&parsed).unwrap() + "\n";
    assert_eq!(again, out.output);
    let reparsed: EquilibriumResult = serde_json::from_str(&again).unwrap();
    assert_eq!(reparsed, parsed);
}

#[test]
fn output_is_deterministic() {
    for format in ["csv", "json"] {
        for cmd in [
            vec!["compare", "--format", format],
            vec!["dispatch", "--storage", "1-2=0.4", "--format", format],
            vec!["gradient-check", "--format", format],
        ] {
            let path = common::scenario_dir().join("corpus/h3_congested.scn");
            let path = path.display().to_string();
            let mut args = cmd.clone();
            args.push(&path);
            let a = run(&args);
            let b = run(&args);
            assert_eq!(a.status, EXIT_OK, "{cmd:?} {:?}", a.diagnostics);
            assert_eq!(a.output, b.output, "{cmd:?}");
        }
    }
}

#[test]
fn dispatch_csv_has_the_documented_columns() {
    let out = run(&["dispatch", &twobus_path(), "--storage", "1-2=0.5", "--format", "csv"]);
    assert_eq!(out.status, EXIT_OK);
    let mut lines = out.output.lines();
    assert_eq!(
        lines.next().unwrap(),
        "record,bus,from,to,period,generation,load,injection,lmp,storage,operation"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 + 4 * 2);
    let (l1, l2) = analytic_lmps(&TwoBusParams::reference(), 0.5);
    let lmp = |bus: &str, period: &str| -> f64 {
        rows.iter()
            .find(|r| r[0] == "bus" && r[1] == bus && r[4] == period)
            .unwrap()[8]
            .parse()
            .unwrap()
    };
    assert!((lmp("1", "1") - l1).abs() < 1e-9);
    assert!((lmp("2", "2") - l2).abs() < 1e-9);
    assert!(rows.iter().any(|r| r[0] == "route" && r[2] == "1" && r[3] == "2" && r[9] == "0.5"));
}

#[test]
fn equilibrium_csv_header_is_frozen() {
    let out = run(&["equilibrium", "--concept", "sw", &twobus_path(), "--format", "csv"]);
    assert_eq!(
        out.output.lines().next().unwrap(),
        "concept,population,from,to,s_fix,s_flex,threshold_fix,threshold_flex,spread,objective,\
         residual,converged,verified"
    );
    assert_eq!(out.output.lines().count(), 1 + 4);
}

#[test]
fn invalid_scenarios_exit_with_one() {
    let text = std::fs::read_to_string(common::scenario_dir().join("twobus.scn")).unwrap();
    let bad = scratch("concave.scn", &text.replace("a = 1.0", "a = -1.0"));
    let out = run(&["compare", &bad.display().to_string()]);
    assert_eq!(out.status, EXIT_INVALID);
    assert!(out.diagnostics.join("\n").contains("NonConvexCost"));

    let out = run(&["validate", &bad.display().to_string()]);
    assert_eq!(out.status, EXIT_INVALID);
    assert!(out.output.contains("INVALID"));

    let start = text.find("[[lines]]").unwrap();
    let end = text.find("[[costs]]").unwrap();
    let no_network = scratch("nonet.scn", &format!("{}{}", &text[..start], &text[end..]));
    let out = run(&["validate", &no_network.display().to_string()]);
    assert_eq!(out.status, EXIT_INVALID);
    assert!(out.diagnostics.join("\n").contains("schema error"));

    let typo = scratch("typo.scn", &text.replace("reactance", "reactence"));
    let out = run(&["validate", &typo.display().to_string()]);
    assert_eq!(out.status, EXIT_INVALID);
    let msg = out.diagnostics.join("\n");
    assert!(msg.contains("line") && msg.contains("column"), "{msg}");
}

#[test]
fn checks_pass_on_the_two_bus_scenario() {
    let out = run(&["gradient-check", &twobus_path()]);
    assert_eq!(out.status, EXIT_OK, "{}", out.output);
    let out = run(&["oracle-check", &twobus_path(), "--atoms", "100", "--format", "json"]);
    assert_eq!(out.status, EXIT_OK, "{}", out.output);
    assert!(out.output.contains("\"method\": \"oracle\""));
}

#[test]
fn binary_reports_exit_codes_and_uses_the_scenario_directory() {
    let exe = env!("CARGO_BIN_EXE_evshare");
    let ok = Command::new(exe)
        .args(["equilibrium", "--concept", "ne", "twobus.scn"])
        .env(SCENARIO_DIR_VAR, common::scenario_dir())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("0.818182"));

    let missing = Command::new(exe)
        .args(["validate", "no-such-file.scn"])
        .env_remove(SCENARIO_DIR_VAR)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let out_path = std::env::temp_dir().join(format!("evshare-out-{}.csv", std::process::id()));
    let written = Command::new(exe)
        .args(["compare", &twobus_path(), "--format", "csv", "--output"])
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(written.status.code(), Some(0));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    let _ = std::fs::remove_file(out_path);
}
