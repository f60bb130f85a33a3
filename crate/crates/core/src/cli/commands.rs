//! The `verify`, `orbit`, `linearize`, `darboux` and `report` commands.
//!
//! Each command writes `<command>.csv` and a plain-text `<command>.txt`
//! summary into the output directory. CSV schemas:
//!
//! | command | columns |
//! |---|---|
//! | verify | `check, z1..z2n, value, threshold, pass` |
//! | orbit | `generator_index, t_1..t_n, return_residual` |
//! | linearize, darboux | `z1..z2n, residual_kind, value` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ConfigDocument, ResolvedSystem};
use super::CliError;
use crate::darboux::{darboux_chart, DarbouxParams};
use crate::flows::{commutation_report_with, detect_period_lattice, BracketClass, FlowParams, LatticeSearch};
use crate::foliation::{canonical_coordinates, CanonicalParams};
use crate::geometry::check_closed;
use crate::tolerances::NONDEGENERACY_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Verify,
    Orbit,
    Linearize,
    Darboux,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Orbit => "orbit",
            Command::Linearize => "linearize",
            Command::Darboux => "darboux",
            Command::Report => "report",
        }
    }
}

/// Files written by a command and whether every residual met its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

/// Runs `command` and writes its artifacts into `out`.
pub fn run(command: Command, doc: &ConfigDocument, out: &Path) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    if command == Command::Report {
        return report(out);
    }
    let sys = doc.resolve()?;
    let (csv, summary, passed) = match command {
        Command::Verify => verify(&sys, doc)?,
        Command::Orbit => orbit(&sys, doc)?,
        Command::Linearize => linearize(&sys, doc)?,
        Command::Darboux => darboux(&sys, doc)?,
        Command::Report => unreachable!("handled above"),
    };
    let mut text = format!("command: {}\nsystem: {}\npoint: {}\nseed: {}\n", command.name(), sys.label, join(&sys.point), doc.task.seed);
    text.push_str(&summary);
    writeln!(text, "status: {}", if passed { "PASS" } else { "FAIL" }).unwrap();
    let files = vec![out.join(format!("{}.csv", command.name())), out.join(format!("{}.txt", command.name()))];
    write(&files[0], &csv)?;
    write(&files[1], &text)?;
    Ok(Outcome { passed, files })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn point_header(dim: usize) -> String {
    (1..=dim).map(|i| format!("z{i}")).collect::<Vec<_>>().join(",")
}

fn flow_params(doc: &ConfigDocument) -> FlowParams {
    FlowParams::with_tolerance(doc.task.rtol)
}

fn pipeline(command: Command) -> impl Fn(crate::Error) -> CliError {
    move |e| CliError::Pipeline {
        command: command.name(),
        source: e,
    }
}

type Artifacts = (String, String, bool);

fn verify(sys: &ResolvedSystem, doc: &ConfigDocument) -> Result<Artifacts, CliError> {
    let grid = sys.omega.chart().grid(doc.task.grid);
    let form = sys.omega.form();
    let tol_commute = doc.task.tol_commute;
    let spec = if sys.hamiltonians.is_empty() { None } else { Some(sys.spec()?) };
    let n = sys.n();
    let rows: Vec<Vec<(String, f64, f64, bool)>> = grid
        .par_iter()
        .map(|z| {
            let closed = check_closed(form, std::slice::from_ref(z));
            let det = form.matrix(z).map(|m| m.determinant().abs()).unwrap_or(0.0);
            let mut out = vec![
                ("closed".to_string(), closed.residual, closed.tolerance, closed.passed()),
                ("nondegenerate".to_string(), det, NONDEGENERACY_FLOOR, det >= NONDEGENERACY_FLOOR),
            ];
            if let Some(spec) = &spec {
                for j in 0..n {
                    for k in j..n {
                        let h = spec.hamiltonians();
                        let b = sys.omega.poisson_bracket(&h[j], &h[k], z).map(f64::abs).unwrap_or(f64::INFINITY);
                        out.push((format!("bracket_{}_{}", j + 1, k + 1), b, tol_commute, b <= tol_commute));
                    }
                }
            }
            out
        })
        .collect();
    let mut csv = format!("check,{},value,threshold,pass\n", point_header(sys.omega.dim()));
    let mut worst: Vec<(String, f64, f64, bool)> = Vec::new();
    for (z, checks) in grid.iter().zip(&rows) {
        for (name, value, threshold, pass) in checks {
            writeln!(csv, "{name},{},{value:e},{threshold:e},{pass}", join(z)).unwrap();
            match worst.iter_mut().find(|w| &w.0 == name) {
                Some(w) => {
                    // Keep the least favourable value: the maximum, or the minimum for determinants.
                    let worse = if name == "nondegenerate" { *value < w.1 } else { *value > w.1 };
                    if worse {
                        w.1 = *value;
                    }
                    w.3 &= *pass;
                }
                None => worst.push((name.clone(), *value, *threshold, *pass)),
            }
        }
    }
    let mut summary = format!("grid points: {}\n", grid.len());
    for (name, value, threshold, pass) in &worst {
        let label = if name == "nondegenerate" { "min |det|" } else { "max" };
        writeln!(summary, "{name}: {label} {value:e} (threshold {threshold:e}) {}", if *pass { "PASS" } else { "FAIL" }).unwrap();
    }
    if let Some(spec) = &spec {
        let report = commutation_report_with(spec, &grid, tol_commute);
        for p in &report.pairs {
            let class = match p.class {
                BracketClass::Commuting => "commuting".to_string(),
                BracketClass::ConstantCocycle(c) => format!("constant bracket {c:e} (2-cocycle)"),
                BracketClass::NonConstant => "non-constant bracket".to_string(),
            };
            writeln!(summary, "pair ({}, {}): {class}", p.j + 1, p.k + 1).unwrap();
        }
    } else {
        summary.push_str("no Hamiltonians: commutation skipped\n");
    }
    let passed = worst.iter().all(|w| w.3);
    Ok((csv, summary, passed))
}

fn lattice_search(doc: &ConfigDocument) -> LatticeSearch {
    LatticeSearch {
        tol_return: doc.task.tol_return,
        ..LatticeSearch::with_horizon(doc.task.horizon)
    }
}

fn orbit(sys: &ResolvedSystem, doc: &ConfigDocument) -> Result<Artifacts, CliError> {
    let spec = sys.spec()?;
    let n = sys.n();
    let topo = detect_period_lattice(&spec, &sys.point, &flow_params(doc), &lattice_search(doc)).map_err(pipeline(Command::Orbit))?;
    let header: Vec<String> = (1..=n).map(|i| format!("t_{i}")).collect();
    let mut csv = format!("generator_index,{},return_residual\n", header.join(","));
    for (i, (b, r)) in topo.lattice_basis.iter().zip(&topo.residuals).enumerate() {
        writeln!(csv, "{},{},{r:e}", i + 1, join(b.as_slice())).unwrap();
    }
    let mut summary = format!("m: {}\norbit: R^{} x T^{}\n", topo.m, n - topo.m, topo.m);
    writeln!(summary, "sigma_min(dF): {:e}", topo.sigma_min).unwrap();
    writeln!(summary, "search exhausted: {}", topo.search_exhausted).unwrap();
    for note in &topo.notes {
        writeln!(summary, "note: {note}").unwrap();
    }
    let passed = topo.residuals.iter().all(|r| *r <= doc.task.tol_return);
    Ok((csv, summary, passed))
}

fn random_times(rng: &mut ChaCha8Rng, count: usize, n: usize, w: f64) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..n).map(|_| rng.random_range(-w..=w)).collect()).collect()
}

fn linearize(sys: &ResolvedSystem, doc: &ConfigDocument) -> Result<Artifacts, CliError> {
    let spec = sys.spec()?;
    let n = sys.n();
    let params = CanonicalParams {
        flow: flow_params(doc),
        lattice: Some(lattice_search(doc)),
        ..CanonicalParams::default()
    };
    let chart = canonical_coordinates(&spec, &sys.point, &params).map_err(pipeline(Command::Linearize))?;
    let mut rng = ChaCha8Rng::seed_from_u64(doc.task.seed);
    let samples = chart.sample_coordinates(&mut rng, doc.task.samples, 0.9);
    let times = random_times(&mut rng, samples.len(), n, doc.task.time_width);
    let rows = samples
        .par_iter()
        .zip(&times)
        .map(|(x, t)| {
            let z = chart.point(x)?;
            let delta = chart.delta_at(z.as_slice())?;
            let darboux = chart.darboux_at(x)?;
            let linear = chart.linear_at(z.as_slice(), t, &params.flow)?;
            Ok((z, [delta, darboux, linear]))
        })
        .collect::<crate::Result<Vec<_>>>()
        .map_err(pipeline(Command::Linearize))?;
    let kinds = ["delta", "darboux", "linear"];
    let mut csv = format!("{},residual_kind,value\n", point_header(2 * n));
    let mut worst = [0.0_f64; 3];
    for (z, values) in &rows {
        for (k, v) in values.iter().enumerate() {
            writeln!(csv, "{},{},{v:e}", join(z.as_slice()), kinds[k]).unwrap();
            worst[k] = worst[k].max(*v);
        }
    }
    let tol = doc.task.tol_residual;
    let mut summary = format!("samples: {}\n", rows.len());
    if let Some(l) = chart.lattice() {
        writeln!(summary, "m: {}", l.m).unwrap();
    }
    writeln!(summary, "angle shift: {}", if chart.shift().is_zero() { "none" } else { "homotopy primitive" }).unwrap();
    for (k, w) in kinds.iter().zip(worst) {
        writeln!(summary, "{k}: max {w:e} (threshold {tol:e}) {}", if w <= tol { "PASS" } else { "FAIL" }).unwrap();
    }
    Ok((csv, summary, worst.iter().all(|w| *w <= tol)))
}

fn darboux(sys: &ResolvedSystem, doc: &ConfigDocument) -> Result<Artifacts, CliError> {
    let params = DarbouxParams {
        radius: doc.task.radius,
        seed: doc.task.seed,
        flow: flow_params(doc),
        ..DarbouxParams::default()
    };
    let chart = darboux_chart(&sys.omega, &sys.point, &params).map_err(pipeline(Command::Darboux))?;
    let mut rng = ChaCha8Rng::seed_from_u64(doc.task.seed);
    let samples = chart.sample_coordinates(&mut rng, doc.task.samples, 1.0);
    let rows = samples
        .par_iter()
        .map(|x| Ok((chart.point(x)?, chart.darboux_at(x)?)))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(pipeline(Command::Darboux))?;
    let mut csv = format!("{},residual_kind,value\n", point_header(sys.omega.dim()));
    let mut worst = 0.0_f64;
    for (z, v) in &rows {
        writeln!(csv, "{},darboux,{v:e}", join(z.as_slice())).unwrap();
        worst = worst.max(*v);
    }
    let tol = doc.task.tol_residual;
    let cert = chart.family().certificate();
    let mut summary = format!("samples: {}\nflow boxes: {}\n", rows.len(), chart.flow_boxes().len());
    for (i, b) in chart.flow_boxes().iter().enumerate() {
        writeln!(summary, "box {}: k = {}, rectification {:e}", i + 1, b.k(), b.rectification()).unwrap();
    }
    for (i, f) in chart.family().functions().iter().enumerate() {
        let name = f.label().map(str::to_string).unwrap_or_else(|| "transversal coordinate".into());
        writeln!(summary, "f{}: {name}", i + 1).unwrap();
    }
    writeln!(summary, "family: max bracket {:e} over {} points, sigma_min {:e}", cert.max_bracket, cert.samples, cert.sigma_min).unwrap();
    writeln!(summary, "radius: {}", chart.radius()).unwrap();
    let (lo, hi) = chart.coordinate_box();
    for i in 0..lo.len() {
        let name = if i < sys.n() { format!("f{}", i + 1) } else { format!("theta{}", i + 1 - sys.n()) };
        writeln!(summary, "{name}: [{}, {}]", lo[i], hi[i]).unwrap();
    }
    writeln!(summary, "darboux: max {worst:e} (threshold {tol:e}) {}", if worst <= tol { "PASS" } else { "FAIL" }).unwrap();
    Ok((csv, summary, worst <= tol))
}

fn report(out: &Path) -> Result<Outcome, CliError> {
    let mut text = String::from("liouville report\n");
    let mut found = 0;
    let mut passed = true;
    for command in [Command::Verify, Command::Orbit, Command::Linearize, Command::Darboux] {
        let path = out.join(format!("{}.txt", command.name()));
        let Ok(summary) = fs::read_to_string(&path) else { continue };
        found += 1;
        passed &= summary.lines().any(|l| l == "status: PASS");
        let csv = out.join(format!("{}.csv", command.name()));
        let rows = fs::read_to_string(&csv).map(|c| c.lines().count().saturating_sub(1)).unwrap_or(0);
        writeln!(text, "\n== {} ({} csv rows) ==", command.name(), rows).unwrap();
        text.push_str(&summary);
    }
    if found == 0 {
        return Err(CliError::Missing(out.to_path_buf()));
    }
    writeln!(text, "\noverall: {}", if passed { "PASS" } else { "FAIL" }).unwrap();
    let path = out.join("report.txt");
    write(&path, &text)?;
    Ok(Outcome { passed, files: vec![path] })
}
