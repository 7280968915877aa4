use std::path::PathBuf;
use std::process::{Command, Output};

fn cdw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdw")).args(args).env_remove("CDW_MAX_STAGE").output().unwrap()
}

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn tower_heights() {
    let o = cdw(&["tower", "odometer:2", "[0]"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["heights"], serde_json::json!([2]));
    let o = cdw(&["tower", "odometer:2", "[e]"]);
    assert_eq!(json(&o)["heights"], serde_json::json!([1]));
    let o = cdw(&["tower", "odometer:2", "[0]", "--compatible=[01]", "--export=dot"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("digraph tower"));
}

#[test]
fn parse_errors_exit_two() {
    assert_eq!(code(&cdw(&["tower", "odometer:2", "[0,00]"])), 2);
    assert_eq!(code(&cdw(&["measure", "odometer:2", "[2]"])), 2);
    assert_eq!(code(&cdw(&["measure", "rotation:2", "[0]"])), 2);
    assert_eq!(code(&cdw(&["conjugate", "nonsense(1)", "dyadic_perm", "--depth=2"])), 2);
    assert_eq!(code(&cdw(&["frobnicate"])), 2);
}

#[test]
fn measure_prints_a_rational() {
    let o = cdw(&["measure", "odometer:2", "[01,1]"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "3/4");
}

#[test]
fn conjugate_outcomes() {
    let o = cdw(&["conjugate", "gamma_x(odometer:2,0())", "gamma_x(odometer:2,0())", "--depth=3"]);
    assert_eq!(code(&o), 0);
    let o = cdw(&["conjugate", "gamma_x(odometer:2,0())", "intersection(odometer:2,0(),(01))", "--depth=3"]);
    assert_eq!(code(&o), 3);
    let v = json(&o);
    assert!(v["hypothesis_failed"]["u"].is_string() && v["hypothesis_failed"]["v"].is_string());
    let o = cdw(&["conjugate", "gamma_x(odometer:2,0())", "dyadic_perm", "--K=(01),1(0)", "--depth=2"]);
    assert_eq!(code(&o), 3, "K and L of different sizes");
}

#[test]
fn horizon_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_cdw"))
        .args(["conjugate", "gamma_x(odometer:2,0())", "dyadic_perm", "--depth=6"])
        .env("CDW_MAX_STAGE", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
    let o = cdw(&["--horizon=3", "conjugate", "gamma_x(odometer:2,0())", "dyadic_perm", "--depth=6"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn balance_report() {
    let o = cdw(&["balance", "intersection(odometer:2,0(),(01))", "--pairs=depth2", "--depth=1"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["pairs"], 27);
    assert!(v["exceptional_pairs"].as_u64().unwrap() >= 1);
    assert!(v["report"]["checks"].as_array().unwrap().iter().all(|c| c["ok"] == true));
}

#[test]
fn saturate_and_absorb() {
    let o = cdw(&["saturate", "split_orbit(odometer:2,(0),(01))", "--pairs=depth2", "--depth=2", "--witnesses"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["witnesses"].as_array().unwrap().len(), 27);
    let o = cdw(&["absorb", "gamma_x(odometer:2,0())", "--depth=3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["singular_tree"][0].as_array().unwrap().len(), 2);
}

#[test]
fn verify_fixtures() {
    assert_eq!(code(&cdw(&["verify", "tower", "odometer:2", &fixture("tower_00.json")])), 0);
    assert_eq!(code(&cdw(&["verify", "tower", "odometer:2", &fixture("broken_tower.json")])), 1);
    assert_eq!(code(&cdw(&["verify", "units", &fixture("units_00.json")])), 0);
    assert_eq!(code(&cdw(&["verify", "units", &fixture("unfaithful_units.json")])), 1);
    assert_eq!(code(&cdw(&["verify", "clopen", "odometer:2", "[0,00]"])), 2);
    assert_eq!(code(&cdw(&["verify", "stages", "dyadic_perm", "--depth=3"])), 0);
    assert_eq!(code(&cdw(&["verify", "tower", "odometer:2", "missing.json"])), 2);
}

#[test]
fn output_is_deterministic() {
    let args = ["saturate", "intersection(odometer:2,0(),(01))", "--pairs=depth2", "--depth=2"];
    assert_eq!(cdw(&args).stdout, cdw(&args).stdout);
}
