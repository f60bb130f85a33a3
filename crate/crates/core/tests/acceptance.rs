//! Acceptance run: one line per criterion, nonzero exit if any fails.

mod common;

use std::error::Error;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{canonical_basis, random_polynomial, random_times, symplectic_defect, SkewedSection};
use liouville::darboux::{darboux_chart, DarbouxParams};
use liouville::expr::Expression;
use liouville::flows::{
    commutation_report, conservation_drift, detect_period_lattice, order_permutation_residual, BracketClass, FlowParams,
    IntegrableSystemSpec, LatticeSearch,
};
use liouville::foliation::{
    canonical_coordinates, corrected_obstruction, homotopy_primitive, lagrangianize_section, pilot_steps, AdaptedChart,
    BaseBox, CanonicalParams, HomotopyPrimitive,
};
use liouville::geometry::{check_closed, poisson_bracket, tensor_grid, ChartDomain, ScalarField, SymplecticStructure, TwoForm};
use liouville::linalg::max_abs;
use liouville::systems::{self, lookup, skew_form_matrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<Check, Box<dyn Error>>;
type Criterion = (&'static str, fn() -> Outcome);

struct Check {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: String) -> Outcome {
    Ok(Check { passed, detail })
}

fn bracket_convention() -> Outcome {
    let omega = SymplecticStructure::standard(ChartDomain::cube(1, 10.0));
    let (q, p) = (ScalarField::parse("q", 1)?, ScalarField::parse("p", 1)?);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for z in omega.chart().sample(&mut rng, 100) {
        worst = worst.max((poisson_bracket(&omega, &q, &p, &z)? - 1.0).abs());
    }
    check(worst <= 1e-12, format!("max |{{q,p}} - 1| = {worst:.2e} over 100 points"))
}

/// Gaussian elimination with partial pivoting.
fn dense_solve(mut a: DMatrix<f64>, mut b: DVector<f64>) -> DVector<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
        a.swap_rows(c, piv);
        b.swap_rows(c, piv);
        for r in c + 1..n {
            let m = a[(r, c)] / a[(c, c)];
            for k in c..n {
                a[(r, k)] -= m * a[(c, k)];
            }
            b[r] -= m * b[c];
        }
    }
    let mut x = DVector::zeros(n);
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[(r, k)] * x[k]).sum();
        x[r] = (b[r] - s) / a[(r, r)];
    }
    x
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for trial in 0..50 {
        let n = 2 + trial % 2;
        let dim = 2 * n;
        let m = loop {
            let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            let m = &a - a.transpose();
            if m.determinant().abs() > 1e-2 {
                break m;
            }
        };
        let omega = SymplecticStructure::constant(ChartDomain::cube(n, 2.0), &m)?;
        // f = Σ a_i z_i + b_i z_i², with gradient a_i + 2 b_i z_i.
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = Expression::constant(n, 0.0);
        for i in 0..dim {
            let z = Expression::variable(n, i);
            f = f + Expression::constant(n, a[i]) * z.clone() + Expression::constant(n, b[i]) * z.clone() * z;
        }
        let f = ScalarField::from_expression(f);
        let z: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad = DVector::from_fn(dim, |i, _| a[i] + 2.0 * b[i] * z[i]);
        let oracle = dense_solve(m.clone(), grad);
        let x = omega.hamiltonian_vector_field(&f, &z)?;
        worst = worst.max((x - &oracle).amax() / oracle.amax().max(1.0));
    }
    check(worst <= 1e-12, format!("max relative deviation {worst:.2e} over 50 forms on R^4/R^6"))
}

fn conservation_and_commutation() -> Outcome {
    let params = FlowParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut drift, mut perm) = (0.0_f64, 0.0_f64);
    for sys in systems::catalog() {
        let n = sys.spec.n();
        for j in 0..n {
            drift = drift.max(conservation_drift(&sys.spec, j, &sys.sample_point, 20.0, 40, &params)?);
        }
        for _ in 0..5 {
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
            perm = perm.max(order_permutation_residual(&sys.spec, &t, &sys.sample_point, &params)?);
        }
    }
    check(
        drift <= 1e-8 && perm <= 1e-7,
        format!("catalog drift {drift:.2e} on [0,20], permutation residual {perm:.2e}"),
    )
}

fn orbit_topology() -> Outcome {
    let params = FlowParams::default();
    let search = LatticeSearch::default();
    let osc = lookup("harmonic_oscillator")?;
    let t = detect_period_lattice(&osc.spec, &osc.sample_point, &params, &search)?;
    let osc_err = if t.m == 1 { (t.lattice_basis[0][0].abs() - 2.0 * PI).abs() } else { f64::INFINITY };
    let free = lookup("free_translation")?;
    let tf = detect_period_lattice(&free.spec, &free.sample_point, &params, &search)?;
    let unc = lookup("uncoupled_oscillators")?;
    let tu = detect_period_lattice(&unc.spec, &unc.sample_point, &params, &search)?;
    let unc_err = if tu.m == 2 {
        let mut basis: Vec<Vec<f64>> = tu.lattice_basis.iter().map(|b| b.iter().map(|v| v.abs()).collect()).collect();
        basis.sort_by(|a, b| b[0].total_cmp(&a[0]));
        let expected = [[2.0 * PI, 0.0], [0.0, 2.0 * PI / 2f64.sqrt()]];
        basis
            .iter()
            .zip(expected)
            .flat_map(|(b, e)| [(b[0] - e[0]).abs(), (b[1] - e[1]).abs()])
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    check(
        t.m == 1 && osc_err <= 1e-8 && tf.m == 0 && tu.m == 2 && unc_err <= 1e-6,
        format!(
            "oscillator m={} period err {osc_err:.2e}; free m={}; uncoupled m={} basis err {unc_err:.2e}",
            t.m, tf.m, tu.m
        ),
    )
}

fn pendulum_period() -> Outcome {
    let sys = lookup("pendulum")?;
    let (q0, p0) = (sys.sample_point[0], sys.sample_point[1]);
    let e = 0.5 * p0 * p0 - q0.cos();
    // T = ∮ dq / q̇ on the level set, q̇ = √(2(E + cos q)); the trapezoid rule is spectral here.
    let k = 4096;
    let h = 2.0 * PI / k as f64;
    let oracle: f64 = (0..k).map(|i| h / (2.0 * (e + (i as f64 * h).cos())).sqrt()).sum();
    let topo = detect_period_lattice(&sys.spec, &sys.sample_point, &FlowParams::default(), &LatticeSearch::default())?;
    let err = if topo.m == 1 { (topo.lattice_basis[0][0].abs() - oracle).abs() } else { f64::INFINITY };
    check(err <= 1e-6, format!("m={}, period error {err:.2e} against level-set quadrature {oracle:.12}", topo.m))
}

fn homotopy_operator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = tensor_grid(&[-1.0; 4], &[1.0; 4], 5);
    let center = [0.0; 4];
    let (mut resid, mut lin, mut at_center) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut previous: Option<TwoForm> = None;
    for _ in 0..20 {
        let beta: Vec<Expression> = (0..4).map(|_| random_polynomial(&mut rng, 2)).collect();
        let alpha = TwoForm::exterior_derivative(&beta)?;
        let k = homotopy_primitive(&alpha, &center, &grid)?;
        resid = resid.max(k.primitive_residual(&grid)?);
        at_center = at_center.max(k.eval(&center)?.amax());
        if let Some(prev) = &previous {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let combo = HomotopyPrimitive::new(&TwoForm::linear_combination(a, &alpha, b, prev), &center);
            let kp = HomotopyPrimitive::new(prev, &center);
            for x in grid.iter().step_by(37) {
                let lhs = combo.eval(x)?;
                let rhs = k.eval(x)? * a + kp.eval(x)? * b;
                lin = lin.max((&lhs - rhs).amax() / (1.0 + lhs.amax()));
            }
        }
        previous = Some(alpha);
    }
    check(
        resid <= 1e-6 && lin <= 1e-13 && at_center == 0.0,
        format!("max |d(Ka) - a| {resid:.2e} on 5^4 grid, linearity {lin:.2e}, max |Ka(c)| {at_center:e}"),
    )
}

fn linearization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut parts = Vec::new();
    let mut passed = true;
    for id in ["harmonic_oscillator", "uncoupled_oscillators"] {
        let sys = lookup(id)?;
        let chart = canonical_coordinates(&sys.spec, &sys.sample_point, &CanonicalParams::default())?;
        let samples = chart.sample_coordinates(&mut rng, 1000, 0.9);
        let times = random_times(&mut rng, 1000, sys.spec.n(), 0.3);
        let r = chart.residuals(&samples, &times, &FlowParams::default())?;
        passed &= r.samples >= 1000 && r.delta <= 1e-6 && r.darboux <= 1e-6 && r.linear <= 1e-6;
        parts.push(format!(
            "{id}: delta {:.2e}, darboux {:.2e}, linear {:.2e} ({} samples)",
            r.delta, r.darboux, r.linear, r.samples
        ));
    }
    check(passed, parts.join("; "))
}

fn skew_section() -> Outcome {
    let sys = lookup("uncoupled_oscillators")?;
    let p0 = [1.0, 1.0, 0.0, 0.0];
    let base = BaseBox::around(sys.spec.values(&p0)?.as_slice());
    let steps = pilot_steps(&sys.spec, &p0, 1.0)?;
    let kappa = 0.3;
    let chart = AdaptedChart::new(&sys.spec, &p0, std::sync::Arc::new(SkewedSection { kappa }), base.clone(), steps);
    let (mut before, mut after) = (0.0_f64, 0.0_f64);
    let shift = lagrangianize_section(&chart)?;
    for f in base.grid(3) {
        before = before.max(chart.obstruction(&f)?.amax());
        after = after.max(corrected_obstruction(&chart, &shift, &f, 1e-3)?.amax());
    }
    check(after <= 1e-7, format!("injected skew {kappa}: obstruction {before:.2e} -> {after:.2e}"))
}

fn darboux() -> Outcome {
    let params = DarbouxParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let sys = lookup("nonstandard_form_2d")?;
    let chart = darboux_chart(sys.spec.omega(), &[0.0, 0.0], &params)?;
    let samples = chart.sample_coordinates(&mut rng, 200, 1.0);
    let residual = chart.residual().max(chart.residual_on(&samples)?);
    // Transition x ↦ A(M(x)) with A(q, p) = (q + q³/3, p).
    let map = chart.map();
    let analytic = |z: &DVector<f64>| DVector::from_vec(vec![z[0] + z[0].powi(3) / 3.0, z[1]]);
    let mut transition_defect = 0.0_f64;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for x in &samples {
        let z = chart.point(x)?;
        let da = DMatrix::from_row_slice(2, 2, &[1.0 + z[0] * z[0], 0.0, 0.0, 1.0]);
        transition_defect = transition_defect.max(symplectic_defect(&(da * map.jacobian(x)?)));
        rows.push([1.0, x[0], x[1]]);
        targets.push(analytic(&z));
    }
    let design = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let mut affine_dev = 0.0_f64;
    for c in 0..2 {
        let y = DVector::from_fn(targets.len(), |i, _| targets[i][c]);
        let coef = liouville::linalg::least_squares(&design, &y);
        affine_dev = affine_dev.max((&design * coef - y).amax());
    }

    let eps = 0.1;
    let m = skew_form_matrix(eps);
    let l = canonical_basis(&m);
    let linv = l.clone().try_inverse().ok_or("singular canonical basis")?;
    let omega = SymplecticStructure::constant(ChartDomain::cube(2, 2.0), &m)?;
    let skew = darboux_chart(&omega, &[0.0; 4], &params)?;
    let skew_samples = skew.sample_coordinates(&mut rng, 100, 1.0);
    let skew_residual = skew.residual().max(skew.residual_on(&skew_samples)?);
    let map = skew.map();
    let mut oracle_defect = 0.0_f64;
    for x in &skew_samples {
        oracle_defect = oracle_defect.max(symplectic_defect(&(&linv * map.jacobian(x)?)));
    }
    let basis_defect = max_abs(&(l.transpose() * &m * &l - liouville::linalg::standard_block(2)));

    check(
        residual <= 1e-6 && transition_defect <= 1e-6 && skew_residual <= 1e-8 && oracle_defect <= 1e-8 && basis_defect <= 1e-14,
        format!(
            "(1+q^2) form: residual {residual:.2e}, transition to (q+q^3/3, p) symplectic to {transition_defect:.2e} \
             (global affine fit deviation {affine_dev:.2e}); eps={eps} form: residual {skew_residual:.2e}, \
             canonical-basis oracle {oracle_defect:.2e}"
        ),
    )
}

fn negative_controls() -> Outcome {
    let one = || Expression::constant(2, 1.0);
    let form = TwoForm::from_expressions(2, &[((0, 2), one()), ((1, 3), one()), ((0, 1), Expression::parse("p2", 2)?)])?;
    let grid = ChartDomain::cube(2, 1.0).grid(3);
    let closed = check_closed(&form, &grid);
    let omega = SymplecticStructure::standard(ChartDomain::cube(2, 1.0));
    let pair = |a: &str, b: &str| -> Result<BracketClass, Box<dyn Error>> {
        let hs = vec![ScalarField::parse(a, 2)?, ScalarField::parse(b, 2)?];
        let spec = IntegrableSystemSpec::new(omega.clone(), hs)?;
        Ok(commutation_report(&spec, &grid).pairs[0].class)
    };
    let cocycle = pair("q1", "p1")?;
    let nonconstant = pair("q1*p1", "q1")?;
    let passed = !closed.passed()
        && (closed.residual - 1.0).abs() <= 1e-9
        && matches!(cocycle, BracketClass::ConstantCocycle(c) if (c - 1.0).abs() <= 1e-12)
        && nonconstant == BracketClass::NonConstant;
    check(
        passed,
        format!(
            "closedness residual {:.6} (passed={}); (q1, p1) -> {cocycle:?}; (q1 p1, q1) -> {nonconstant:?}",
            closed.residual,
            closed.passed()
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<std::process::Output, Box<dyn Error>> {
    Ok(Command::new(env!("CARGO_BIN_EXE_liouville")).current_dir(dir).args(args).output()?)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let configs = [
        ("named.ini", "[system]\nname = uncoupled_oscillators\n[task]\nsamples = 50\n"),
        ("inline.ini", "[system]\nn = 1\nhalf_width = 2\n[omega]\nomega_12 = \"1 + q^2\"\n[hamiltonians]\nh1 = \"(q^2 + p^2)/2\"\n[task]\npoint = [1, 0]\n"),
    ];
    let commands = ["verify", "orbit", "linearize", "darboux", "report"];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (name, text) in configs {
        fs::write(dir.path().join(name), text)?;
        for run in ["a", "b"] {
            let out = format!("{name}.{run}");
            for cmd in commands {
                let o = run_cli(dir.path(), &[cmd, "--config", name, "--out", &out, "--seed", "11"])?;
                if o.status.code() != Some(0) {
                    mismatches.push(format!("{name} {cmd} exited {:?}", o.status.code()));
                }
            }
        }
        for cmd in commands {
            let file = if cmd == "report" { "report.txt".to_string() } else { format!("{cmd}.csv") };
            let a = fs::read(dir.path().join(format!("{name}.a")).join(&file))?;
            let b = fs::read(dir.path().join(format!("{name}.b")).join(&file))?;
            compared += 1;
            if a != b {
                mismatches.push(format!("{name} {file} differs"));
            }
        }
    }
    let malformed = [
        ("[system\nname = pendulum\n", (1, 8)),
        ("[system]\nname = pendulum\n[task]\nseed = 4 +\n", (4, 11)),
        ("[system]\nn = 1\nhalf_width = 2\n[hamiltonians]\nh1 = \"sin(q\"\n", (5, 10)),
        ("[system]\nname = pendulum\n[task]\npoint = [0, 3\n", (4, 14)),
    ];
    for (i, (text, (line, column))) in malformed.iter().enumerate() {
        let name = format!("bad{i}.ini");
        fs::write(dir.path().join(&name), text)?;
        let o = run_cli(dir.path(), &["verify", "--config", &name])?;
        let err = String::from_utf8_lossy(&o.stderr);
        if o.status.code() != Some(1) || !err.contains(&format!("line {line}, column {column}")) {
            mismatches.push(format!("{name}: exit {:?}, stderr {}", o.status.code(), err.trim()));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{compared} artifact pairs byte-identical; {} malformed configs positioned, exit 1", malformed.len())
    } else {
        mismatches.join("; ")
    };
    check(mismatches.is_empty(), detail)
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("bracket convention", bracket_convention),
        ("oracle equivalence", oracle_equivalence),
        ("conservation and commutation", conservation_and_commutation),
        ("orbit topology", orbit_topology),
        ("pendulum period", pendulum_period),
        ("homotopy operator", homotopy_operator),
        ("linearization", linearization),
        ("skew-section recovery", skew_section),
        ("darboux", darboux),
        ("negative controls", negative_controls),
        ("cli determinism", cli_determinism),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(c) => (c.passed, c.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!(
            "criterion {:>2} {} [{name}] {detail} ({:.1}s)",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
