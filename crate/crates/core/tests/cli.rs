use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use liouville::cli::{parse_config, ConfigDocument};
use proptest::prelude::*;

fn liouville(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liouville"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn last_number(row: &[String], col: usize) -> f64 {
    row[col].parse().unwrap()
}

#[test]
fn verify_oscillator_brackets_vanish() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", "[system]\nname = harmonic_oscillator\n");
    let out = liouville(dir.path(), &["verify", "--config", "c.ini", "--out", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv(&dir.path().join("o/verify.csv"));
    let brackets: Vec<_> = rows.iter().filter(|r| r[0].starts_with("bracket")).collect();
    assert!(!brackets.is_empty());
    for r in brackets {
        assert!(last_number(r, r.len() - 3) <= 1e-10, "{r:?}");
    }
}

#[test]
fn orbit_recovers_both_periods() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", "[system]\nname = uncoupled_oscillators\n[output]\ndir = res\n");
    let out = liouville(dir.path(), &["orbit", "--config", "c.ini"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv(&dir.path().join("res/orbit.csv"));
    let mut periods: Vec<f64> = rows
        .iter()
        .map(|r| r[1..r.len() - 1].iter().map(|s| s.parse::<f64>().unwrap()).fold(0.0, f64::max))
        .collect();
    periods.sort_by(f64::total_cmp);
    assert_eq!(periods.len(), 2);
    assert!((periods[0] - 2.0 * PI / 2f64.sqrt()).abs() <= 1e-6, "{periods:?}");
    assert!((periods[1] - 2.0 * PI).abs() <= 1e-6, "{periods:?}");
}

#[test]
fn darboux_on_inline_nonstandard_form() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[system]\nn = 1\nhalf_width = 2\n[omega]\nomega_12 = \"1 + q^2\"\n[task]\npoint = [0, 0]\n";
    write(dir.path(), "c.ini", text);
    let out = liouville(dir.path(), &["darboux", "--config", "c.ini", "--out", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv(&dir.path().join("o/darboux.csv"));
    assert!(rows.len() >= 100);
    assert!(rows.iter().all(|r| last_number(r, r.len() - 1) <= 1e-6));
}

#[test]
fn residual_violation_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // {q1 p1, q1} = -q1 is not zero.
    let text = "[system]\nn = 2\nhalf_width = 1\n[hamiltonians]\nh1 = \"q1*p1\"\nh2 = \"q1\"\n";
    write(dir.path(), "d.ini", text);
    let out = liouville(dir.path(), &["verify", "--config", "d.ini", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_to_string(dir.path().join("o/verify.txt")).unwrap().contains("status: FAIL"));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", "[system]\nn = 1\nhalf_width = 2\n[hamiltonians]\nh1 = (q^2 + \n");
    let out = liouville(dir.path(), &["verify", "--config", "c.ini"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("c.ini") && err.contains("line 5, column"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(liouville(dir.path(), &["fly", "--config", "c.ini"]).status.code(), Some(1));
    assert_eq!(liouville(dir.path(), &["verify", "--config", "missing.ini"]).status.code(), Some(1));
    assert_eq!(liouville(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn report_requires_summaries() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", "[system]\nname = pendulum\n");
    assert_eq!(liouville(dir.path(), &["report", "--config", "c.ini", "--out", "o"]).status.code(), Some(1));
    assert_eq!(liouville(dir.path(), &["linearize", "--config", "c.ini", "--out", "o"]).status.code(), Some(0));
    assert_eq!(liouville(dir.path(), &["report", "--config", "c.ini", "--out", "o"]).status.code(), Some(0));
    let report = fs::read_to_string(dir.path().join("o/report.txt")).unwrap();
    assert!(report.contains("command: linearize"));
}

#[test]
fn runs_are_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.ini", "[system]\nname = harmonic_oscillator\n");
    for (out, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        assert_eq!(liouville(dir.path(), &["linearize", "--config", "c.ini", "--out", out, "--seed", seed]).status.code(), Some(0));
    }
    let read = |d: &str| fs::read(dir.path().join(d).join("linearize.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

fn arb_document() -> impl Strategy<Value = ConfigDocument> {
    let names = prop::sample::select(vec!["harmonic_oscillator", "uncoupled_oscillators", "pendulum", "free_translation"]);
    (names, 2usize..7, 1usize..400, 1.0f64..50.0, 0u64..1000, 0.05f64..0.5, prop::option::of(-0.9f64..0.9))
        .prop_map(|(name, grid, samples, horizon, seed, radius, shift)| {
            let mut text = format!(
                "[system]\nname = {name}\n[task]\ngrid = {grid}\nsamples = {samples}\nhorizon = {horizon}\nseed = {seed}\nradius = {radius}\n"
            );
            if let Some(s) = shift {
                let n = if name == "uncoupled_oscillators" { 2 } else { 1 };
                let point: Vec<String> = (0..2 * n).map(|i| format!("{}", 0.5 + s * (i as f64 + 1.0) / 4.0)).collect();
                text.push_str(&format!("point = [{}]\n", point.join(", ")));
            }
            parse_config(&text).unwrap()
        })
}

fn arb_inline() -> impl Strategy<Value = ConfigDocument> {
    (1.0f64..3.0, 0.1f64..2.0, "[a-z]{1,8}").prop_map(|(w, c, dir)| {
        let text = format!(
            "[system]\nn = 1\nhalf_width = {w}\n[omega]\nomega_12 = \"{c} + q^2\"\n[hamiltonians]\nh1 = \"sin(q) * p + {c}\"\n[output]\ndir = \"{dir}\"\n"
        );
        parse_config(&text).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn named_configs_round_trip(doc in arb_document()) {
        prop_assert_eq!(parse_config(&doc.to_config_string()).unwrap(), doc);
    }

    #[test]
    fn inline_configs_round_trip(doc in arb_inline()) {
        prop_assert_eq!(parse_config(&doc.to_config_string()).unwrap(), doc);
    }
}
