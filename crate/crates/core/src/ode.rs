//! Explicit Runge–Kutta integration with the Dormand–Prince 8(5,3) pair.
//!
//! The tableau and the error norm follow Hairer's DOP853. Besides the adaptive
//! driver there is a fixed-step mode using the same eighth-order weights: a
//! fixed step count makes the flow map a smooth function of its initial data,
//! which finite-difference Jacobians of chart maps rely on.

#![allow(clippy::excessive_precision)]

use nalgebra::DVector;

use crate::error::{Error, Result};

const STAGES: usize = 12;

const A: [&[f64]; STAGES] = [
    &[],
    &[5.260_015_195_876_773E-2],
    &[1.972_505_698_453_79E-2, 5.917_517_095_361_37E-2],
    &[2.958_758_547_680_685E-2, 0.0, 8.876_275_643_042_054E-2],
    &[
        2.413_651_341_592_667E-1,
        0.0,
        -8.845_494_793_282_861E-1,
        9.248_340_032_617_92E-1,
    ],
    &[
        3.703_703_703_703_703_5E-2,
        0.0,
        0.0,
        1.708_286_087_294_738_6E-1,
        1.254_676_875_668_224_2E-1,
    ],
    &[
        3.7109375E-2,
        0.0,
        0.0,
        1.702_522_110_195_440_5E-1,
        6.021_653_898_045_596E-2,
        -1.7578125E-2,
    ],
    &[
        3.709_200_011_850_479E-2,
        0.0,
        0.0,
        1.703_839_257_122_399_8E-1,
        1.072_620_304_463_732_8E-1,
        -1.531_943_774_862_440_2E-2,
        8.273_789_163_814_023E-3,
    ],
    &[
        6.241_109_587_160_757E-1,
        0.0,
        0.0,
        -3.360_892_629_446_941_4,
        -8.682_193_468_417_26E-1,
        2.759_209_969_944_671E1,
        2.015_406_755_047_789_4E1,
        -4.348_988_418_106_996E1,
    ],
    &[
        4.776_625_364_382_643_4E-1,
        0.0,
        0.0,
        -2.488_114_619_971_667_7,
        -5.902_908_268_368_43E-1,
        2.123_005_144_818_119_3E1,
        1.527_923_363_288_242_3E1,
        -3.328_821_096_898_486E1,
        -2.033_120_170_850_862_7E-2,
    ],
    &[
        -9.371_424_300_859_873E-1,
        0.0,
        0.0,
        5.186_372_428_844_064,
        1.091_437_348_996_729_5,
        -8.149_787_010_746_927,
        -1.852_006_565_999_696E1,
        2.273_948_709_935_050_5E1,
        2.493_605_552_679_652_3,
        -3.046_764_471_898_219_6,
    ],
    &[
        2.273_310_147_516_538,
        0.0,
        0.0,
        -1.053_449_546_673_725E1,
        -2.000_872_058_224_862_5,
        -1.795_893_186_311_88E1,
        2.794_888_452_941_996E1,
        -2.858_998_277_135_023_5,
        -8.872_856_933_530_63,
        1.236_056_717_579_430_3E1,
        6.433_927_460_157_636E-1,
    ],
];

const B: [f64; STAGES] = [
    5.429_373_411_656_876_5E-2,
    0.0,
    0.0,
    0.0,
    0.0,
    4.450_312_892_752_409,
    1.891_517_899_314_500_3,
    -5.801_203_960_010_585,
    3.111_643_669_578_199E-1,
    -1.521_609_496_625_161E-1,
    2.013_654_008_040_303_4E-1,
    4.471_061_572_777_259E-2,
];

const BHH: [f64; 3] = [
    2.440_944_881_889_764E-1,
    7.338_466_882_816_118E-1,
    2.205_882_352_941_176_6E-2,
];

const E: [f64; STAGES] = [
    1.312_004_499_419_488E-2,
    0.0,
    0.0,
    0.0,
    0.0,
    -1.225_156_446_376_204_4,
    -4.957_589_496_572_502E-1,
    1.664_377_182_454_986_4,
    -3.503_288_487_499_736_6E-1,
    3.341_791_187_130_175E-1,
    8.192_320_648_511_571E-2,
    -2.235_530_786_388_629_4E-2,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 1.0 / 3.0;
const FAC_MAX: f64 = 6.0;

/// Tolerances and limits of the adaptive driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest step magnitude.
    pub h_max: f64,
    /// Accepted plus rejected steps allowed per call to [`Dop853::advance_to`].
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-12,
            atol: 1e-12,
            h_max: f64::INFINITY,
            max_steps: 200_000,
        }
    }
}

/// Right-hand side of an autonomous system `ẏ = f(y)`.
pub trait Rhs {
    fn eval(&self, y: &[f64]) -> Result<DVector<f64>>;
}

impl<F: Fn(&[f64]) -> Result<DVector<f64>>> Rhs for F {
    fn eval(&self, y: &[f64]) -> Result<DVector<f64>> {
        self(y)
    }
}

fn stages<F: Rhs>(f: &F, y: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Result<Vec<DVector<f64>>> {
    let mut k = Vec::with_capacity(STAGES);
    k.push(k1.clone());
    let mut w = y.clone();
    for row in A.iter().skip(1) {
        w.copy_from(y);
        for (a, kj) in row.iter().zip(&k) {
            if *a != 0.0 {
                w.axpy(h * a, kj, 1.0);
            }
        }
        let v = f.eval(w.as_slice())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::StepFailure { t: f64::NAN });
        }
        k.push(v);
    }
    Ok(k)
}

fn weighted(k: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut s = DVector::zeros(k[0].len());
    for (c, ki) in w.iter().zip(k) {
        if *c != 0.0 {
            s.axpy(*c, ki, 1.0);
        }
    }
    s
}

/// Stateful adaptive integrator. Successive calls to [`Dop853::advance_to`]
/// continue from the current state and reuse the step-size estimate.
pub struct Dop853<F> {
    f: F,
    t: f64,
    y: DVector<f64>,
    k1: DVector<f64>,
    h: f64,
    opts: OdeOptions,
    accepted: usize,
    rejected: usize,
}

impl<F: Rhs> Dop853<F> {
    pub fn new(f: F, y0: DVector<f64>, opts: OdeOptions) -> Result<Dop853<F>> {
        let k1 = f.eval(y0.as_slice())?;
        Ok(Dop853 {
            f,
            t: 0.0,
            y: y0,
            k1,
            h: 0.0,
            opts,
            accepted: 0,
            rejected: 0,
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn accepted_steps(&self) -> usize {
        self.accepted
    }

    pub fn rejected_steps(&self) -> usize {
        self.rejected
    }

    fn scale(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        a.zip_map(b, |x, y| self.opts.atol + x.abs().max(y.abs()) * self.opts.rtol)
    }

    fn initial_step(&self, direction: f64) -> Result<f64> {
        let sc = self.scale(&self.y, &self.y);
        let dim = self.y.len() as f64;
        let rms = |v: &DVector<f64>| (v.component_div(&sc).norm_squared() / dim).sqrt();
        let d0 = rms(&self.y);
        let d1 = rms(&self.k1);
        let mut h0 = if d0 <= 1e-10 || d1 <= 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.opts.h_max);
        let y1 = &self.y + &self.k1 * (direction * h0);
        let f1 = self.f.eval(y1.as_slice())?;
        let d2 = rms(&(f1 - &self.k1)) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (1e-6_f64).max(h0 * 1e-3)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 8.0)
        };
        Ok((100.0 * h0).min(h1).min(self.opts.h_max))
    }

    /// Attempts one step of size `h`; returns the candidate state, `k1` there and the error norm.
    fn attempt(&self, h: f64) -> Result<(DVector<f64>, f64)> {
        let k = stages(&self.f, &self.y, &self.k1, h)?;
        let incr = weighted(&k, &B);
        let y_new = &self.y + &incr * h;
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepFailure { t: self.t });
        }
        let err_est = weighted(&k, &E);
        let err_bhh = &incr - &k[0] * BHH[0] - &k[8] * BHH[1] - &k[11] * BHH[2];
        let sc = self.scale(&self.y, &y_new);
        let err = err_est.component_div(&sc).norm_squared();
        let err2 = err_bhh.component_div(&sc).norm_squared();
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let norm = h.abs() * err * (1.0 / (deno * self.y.len() as f64)).sqrt();
        Ok((y_new, norm))
    }

    /// Integrates to `t_end` (forwards or backwards). `inside` is checked after
    /// every accepted step; a `false` stops with `LeftDomain`.
    pub fn advance_to(&mut self, t_end: f64, inside: &dyn Fn(&[f64]) -> bool) -> Result<()> {
        let span = t_end - self.t;
        if span == 0.0 {
            return Ok(());
        }
        let direction = span.signum();
        if self.h == 0.0 {
            self.h = self.initial_step(direction).map_err(|e| match e {
                Error::OutOfDomain { .. } => Error::LeftDomain { t_exit: self.t },
                e => e,
            })?;
        }
        let mut steps = 0;
        let mut last_rejected = false;
        loop {
            let remaining = t_end - self.t;
            if remaining * direction <= 0.0 {
                return Ok(());
            }
            steps += 1;
            if steps > self.opts.max_steps {
                return Err(Error::StepFailure { t: self.t });
            }
            let mut h = self.h.abs().min(self.opts.h_max);
            let ends = 1.01 * h >= remaining.abs();
            if ends {
                h = remaining.abs();
            }
            if h <= 1e-14 * self.t.abs().max(1.0) {
                return Err(Error::StepFailure { t: self.t });
            }
            let attempt = self.attempt(direction * h);
            let (y_new, err) = match attempt {
                Ok(v) => v,
                // A stage left the chart: retry with a smaller step before
                // declaring that the trajectory itself has left.
                Err(Error::OutOfDomain { .. }) => {
                    if h <= 1e-10 * self.t.abs().max(1.0) {
                        return Err(Error::LeftDomain { t_exit: self.t });
                    }
                    self.h = 0.25 * h;
                    self.rejected += 1;
                    last_rejected = true;
                    continue;
                }
                Err(Error::StepFailure { .. }) => {
                    self.h = 0.25 * h;
                    self.rejected += 1;
                    last_rejected = true;
                    if self.h <= 1e-14 * self.t.abs().max(1.0) {
                        return Err(Error::StepFailure { t: self.t });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let fac11 = err.powf(1.0 / 8.0);
            let fac = (fac11 / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            if err <= 1.0 {
                if !inside(y_new.as_slice()) {
                    return Err(Error::LeftDomain { t_exit: self.t + direction * h });
                }
                let k1 = match self.f.eval(y_new.as_slice()) {
                    Ok(k) => k,
                    Err(Error::OutOfDomain { .. }) => {
                        return Err(Error::LeftDomain { t_exit: self.t + direction * h })
                    }
                    Err(e) => return Err(e),
                };
                self.t = if ends { t_end } else { self.t + direction * h };
                self.y = y_new;
                self.k1 = k1;
                self.accepted += 1;
                let mut h_new = h / fac;
                if last_rejected {
                    h_new = h_new.min(h);
                }
                // Keep the unclipped estimate when the last step was shortened to land on t_end.
                if !ends || h_new > self.h.abs() {
                    self.h = h_new;
                }
                last_rejected = false;
            } else {
                self.h = h / (fac11 / SAFETY).min(1.0 / FAC_MIN);
                self.rejected += 1;
                last_rejected = true;
            }
        }
    }
}

/// Adaptive solution of `ẏ = f(y)`, `y(0) = y0`, at time `t`.
pub fn integrate<F: Rhs>(f: F, y0: &[f64], t: f64, opts: OdeOptions, inside: &dyn Fn(&[f64]) -> bool) -> Result<DVector<f64>> {
    let mut solver = Dop853::new(f, DVector::from_column_slice(y0), opts)?;
    solver.advance_to(t, inside)?;
    Ok(solver.y)
}

/// `steps` equal eighth-order steps from `y0` over time `t`.
pub fn integrate_fixed<F: Rhs>(f: F, y0: &[f64], t: f64, steps: usize) -> Result<DVector<f64>> {
    let mut y = DVector::from_column_slice(y0);
    if t == 0.0 || steps == 0 {
        return Ok(y);
    }
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = f.eval(y.as_slice())?;
        let k = stages(&f, &y, &k1, h)?;
        y += weighted(&k, &B) * h;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::StepFailure { t: f64::NAN });
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation(y: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![-y[1], y[0]]))
    }

    fn everywhere(_: &[f64]) -> bool {
        true
    }

    #[test]
    fn tableau_rows_are_consistent() {
        // Row sums give the nodes c_i; the B weights sum to one.
        let c: Vec<f64> = A.iter().map(|r| r.iter().sum()).collect();
        assert!((c[1] - 5.260_015_195_876_773E-2).abs() < 1e-15);
        assert!((c[11] - 1.0).abs() < 1e-12);
        assert!((B.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(E.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn rotation_quarter_and_full_turn() {
        let opts = OdeOptions::default();
        let y = integrate(rotation, &[1.0, 0.0], std::f64::consts::FRAC_PI_2, opts, &everywhere).unwrap();
        assert!((y[0]).abs() < 1e-11 && (y[1] - 1.0).abs() < 1e-11);
        let y = integrate(rotation, &[1.0, 0.0], 2.0 * std::f64::consts::PI, opts, &everywhere).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-10 && y[1].abs() < 1e-10);
    }

    #[test]
    fn backward_time_inverts_forward_time() {
        let opts = OdeOptions::default();
        let f = |y: &[f64]| Ok(DVector::from_vec(vec![y[1], -(y[0]).sin()]));
        let y = integrate(f, &[0.3, 0.1], 3.0, opts, &everywhere).unwrap();
        let back = integrate(f, y.as_slice(), -3.0, opts, &everywhere).unwrap();
        assert!((back[0] - 0.3).abs() < 1e-10 && (back[1] - 0.1).abs() < 1e-10);
    }

    #[test]
    fn eighth_order_convergence_of_fixed_steps() {
        let t: f64 = 2.0;
        let exact = [t.cos(), t.sin()];
        let err = |steps| {
            let y = integrate_fixed(rotation, &[1.0, 0.0], t, steps).unwrap();
            ((y[0] - exact[0]).powi(2) + (y[1] - exact[1]).powi(2)).sqrt()
        };
        let (e1, e2) = (err(4), err(8));
        let order = (e1 / e2).log2();
        assert!(order > 7.5, "observed order {order}");
    }

    #[test]
    fn leaving_the_domain_is_reported() {
        let drift = |_: &[f64]| Ok(DVector::from_vec(vec![1.0]));
        let err = integrate(drift, &[0.0], 5.0, OdeOptions::default(), &|y| y[0] <= 1.0).unwrap_err();
        match err {
            Error::LeftDomain { t_exit } => assert!(t_exit > 1.0 && t_exit <= 5.0),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn resumed_integration_matches_single_run() {
        let opts = OdeOptions::default();
        let mut s = Dop853::new(rotation, DVector::from_vec(vec![1.0, 0.0]), opts).unwrap();
        for i in 1..=10 {
            s.advance_to(0.3 * i as f64, &everywhere).unwrap();
        }
        assert!((s.y()[0] - 3.0_f64.cos()).abs() < 1e-11);
    }
}
