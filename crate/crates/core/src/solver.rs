//! Explicit integrators for `dh/dt = f(t, h)`: Euler, classical RK4 and
//! Dormand–Prince 5(4) with PI step-size control.
//!
//! Every solve walks a *grid* of knot times. Fixed-step methods take
//! `fixed_steps_per_knot` uniform steps per unit of knot spacing inside each
//! grid interval, and adaptive steps are truncated at grid points, so no step
//! ever straddles a knot. The field is told which grid interval (segment) a
//! step belongs to; piecewise controls use that instead of guessing from `t`
//! at the boundaries.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Evaluation point handed to a vector field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct At {
    pub t: f64,
    /// Index of the ascending knot interval that contains the current step.
    pub segment: usize,
}

impl At {
    pub fn new(t: f64, segment: usize) -> Self {
        Self { t, segment }
    }
}

pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, at: At, state: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            other => Err(Error::Config(format!("unknown solver method `{other}` (euler|rk4|dopri5)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub fixed_steps_per_knot: usize,
    /// Bound on attempted adaptive steps over one solve.
    pub max_steps: usize,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self { method: Method::Rk4, rtol: 1e-7, atol: 1e-9, fixed_steps_per_knot: 1, max_steps: 1_000_000 }
    }
}

impl SolveConfig {
    pub fn fixed(method: Method, steps_per_knot: usize) -> Self {
        Self { method, fixed_steps_per_knot: steps_per_knot, ..Self::default() }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { method: Method::Dopri5, rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config(format!(
                "solver tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        if self.fixed_steps_per_knot == 0 {
            return Err(Error::Config("fixed_steps_per_knot must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evals: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// State at every grid point (first entry is the initial state); empty
    /// unless recording was requested.
    pub at_grid: Vec<Vec<f64>>,
    pub final_state: Vec<f64>,
    pub stats: SolveStats,
}

/// Integrates from `t0` to `t1` (either direction) over a single segment.
pub fn ode_solve(field: &dyn VectorField, h0: &Tensor, t0: f64, t1: f64, cfg: &SolveConfig) -> Result<Tensor> {
    if h0.len() != field.dim() {
        return Err(Error::dim("ode_solve", format!("state has {} values, field expects {}", h0.len(), field.dim())));
    }
    h0.ensure_finite("ode_solve initial state")?;
    let sol = ode_solve_grid(field, h0.data(), &[t0, t1], cfg, false)?;
    Tensor::new(h0.shape().to_vec(), sol.final_state)
}

/// Integrates through every point of a strictly monotone grid.
///
/// A descending grid is read as an ascending knot grid traversed backward:
/// its interval `k` is labeled segment `len - 2 - k`.
pub fn ode_solve_grid(
    field: &dyn VectorField,
    h0: &[f64],
    grid: &[f64],
    cfg: &SolveConfig,
    record: bool,
) -> Result<Solution> {
    cfg.validate()?;
    if h0.len() != field.dim() {
        return Err(Error::dim("ode_solve", format!("state has {} values, field expects {}", h0.len(), field.dim())));
    }
    if grid.is_empty() {
        return Err(Error::Ordering("empty integration grid".into()));
    }
    let ascending = grid.len() < 2 || grid[1] > grid[0];
    for w in grid.windows(2) {
        let ok = if ascending { w[1] > w[0] } else { w[1] < w[0] };
        if !ok && w[1] != w[0] {
            return Err(Error::Ordering(format!("integration grid is not monotone at {} -> {}", w[0], w[1])));
        }
    }
    let n_seg = grid.len().saturating_sub(1);
    let mut stepper = Stepper::new(field, *cfg);
    let mut state = h0.to_vec();
    let mut at_grid = Vec::new();
    if record {
        at_grid.push(state.clone());
    }
    for k in 0..n_seg {
        let segment = if ascending { k } else { n_seg - 1 - k };
        let (a, b) = (grid[k], grid[k + 1]);
        if a != b {
            stepper.advance(&mut state, a, b, segment)?;
        }
        if record {
            at_grid.push(state.clone());
        }
    }
    Ok(Solution { at_grid, final_state: state, stats: stepper.stats })
}

/// One classical Runge–Kutta step.
pub fn rk4_step(field: &dyn VectorField, at: At, h: &[f64], dt: f64) -> Vec<f64> {
    let n = h.len();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    let mut out = h.to_vec();
    rk4_into(field, at, &mut out, dt, &mut k, &mut tmp);
    out
}

fn rk4_into(field: &dyn VectorField, at: At, h: &mut [f64], dt: f64, k: &mut [Vec<f64>; 4], tmp: &mut [f64]) {
    let half = At { t: at.t + 0.5 * dt, ..at };
    let end = At { t: at.t + dt, ..at };
    field.eval(at, h, &mut k[0]);
    axpy_into(tmp, h, 0.5 * dt, &k[0]);
    field.eval(half, tmp, &mut k[1]);
    axpy_into(tmp, h, 0.5 * dt, &k[1]);
    field.eval(half, tmp, &mut k[2]);
    axpy_into(tmp, h, dt, &k[2]);
    field.eval(end, tmp, &mut k[3]);
    let w = dt / 6.0;
    for i in 0..h.len() {
        h[i] += w * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

#[inline]
fn axpy_into(out: &mut [f64], h: &[f64], a: f64, k: &[f64]) {
    for ((o, hi), ki) in out.iter_mut().zip(h).zip(k) {
        *o = hi + a * ki;
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

struct Stepper<'a> {
    field: &'a dyn VectorField,
    cfg: SolveConfig,
    stats: SolveStats,
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    next_dt: Option<f64>,
    err_prev: f64,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a dyn VectorField, cfg: SolveConfig) -> Self {
        let n = field.dim();
        let stages = if cfg.method == Method::Dopri5 { 7 } else { 4 };
        Self {
            field,
            cfg,
            stats: SolveStats::default(),
            k: vec![vec![0.0; n]; stages],
            tmp: vec![0.0; n],
            next_dt: None,
            err_prev: 1e-4,
        }
    }

    fn advance(&mut self, h: &mut [f64], a: f64, b: f64, segment: usize) -> Result<()> {
        match self.cfg.method {
            Method::Euler | Method::Rk4 => self.fixed(h, a, b, segment),
            Method::Dopri5 => self.adaptive(h, a, b, segment),
        }
    }

    fn fixed(&mut self, h: &mut [f64], a: f64, b: f64, segment: usize) -> Result<()> {
        let span = (b - a).abs();
        let n = ((span * self.cfg.fixed_steps_per_knot as f64) - 1e-9).ceil().max(1.0) as usize;
        let dt = (b - a) / n as f64;
        for j in 0..n {
            let t = a + j as f64 * dt;
            let at = At::new(t, segment);
            match self.cfg.method {
                Method::Euler => {
                    self.field.eval(at, h, &mut self.k[0]);
                    self.stats.evals += 1;
                    for (hi, ki) in h.iter_mut().zip(&self.k[0]) {
                        *hi += dt * ki;
                    }
                }
                _ => {
                    let (k4, _) = self.k.split_at_mut(4);
                    let k4: &mut [Vec<f64>; 4] = k4.try_into().expect("four stages");
                    rk4_into(self.field, at, h, dt, k4, &mut self.tmp);
                    self.stats.evals += 4;
                }
            }
            self.stats.accepted += 1;
            if !all_finite(h) {
                return Err(Error::Instability { t: t + dt, hint: "reduce the step size or learning rate" });
            }
        }
        Ok(())
    }

    fn scaled_norm(&self, v: &[f64], y: &[f64]) -> f64 {
        let n = v.len().max(1) as f64;
        (v.iter()
            .zip(y)
            .map(|(vi, yi)| {
                let sc = self.cfg.atol + self.cfg.rtol * yi.abs();
                (vi / sc) * (vi / sc)
            })
            .sum::<f64>()
            / n)
            .sqrt()
    }

    /// Hairer–Nørsett–Wanner starting step.
    fn initial_dt(&mut self, h: &[f64], t: f64, dir: f64, segment: usize) -> f64 {
        let n = h.len();
        let mut f0 = vec![0.0; n];
        self.field.eval(At::new(t, segment), h, &mut f0);
        let d0 = self.scaled_norm(h, h);
        let d1 = self.scaled_norm(&f0, h);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1: Vec<f64> = h.iter().zip(&f0).map(|(a, b)| a + dir * h0 * b).collect();
        let mut f1 = vec![0.0; n];
        self.field.eval(At::new(t + dir * h0, segment), &y1, &mut f1);
        self.stats.evals += 2;
        let diff: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
        let d2 = self.scaled_norm(&diff, h) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1)
    }

    fn adaptive(&mut self, h: &mut [f64], a: f64, b: f64, segment: usize) -> Result<()> {
        let dir = if b > a { 1.0 } else { -1.0 };
        let n = h.len();
        let mut t = a;
        let mut mag = match self.next_dt {
            Some(d) => d,
            None => self.initial_dt(h, t, dir, segment),
        };
        let mut y_new = vec![0.0; n];
        let mut err = vec![0.0; n];
        loop {
            let remaining = (b - t) * dir;
            if remaining <= 1e-14 * b.abs().max(1.0) {
                break;
            }
            if self.stats.accepted + self.stats.rejected >= self.cfg.max_steps {
                return Err(Error::Divergence { t, max_steps: self.cfg.max_steps });
            }
            let last = mag >= remaining;
            let dt = if last { remaining } else { mag } * dir;

            self.field.eval(At::new(t, segment), h, &mut self.k[0]);
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = h[i];
                    for (j, aij) in A[s].iter().enumerate().take(s) {
                        acc += dt * aij * self.k[j][i];
                    }
                    self.tmp[i] = acc;
                }
                let (head, tail) = self.k.split_at_mut(s);
                let _ = head;
                self.field.eval(At::new(t + C[s] * dt, segment), &self.tmp, &mut tail[0]);
            }
            self.stats.evals += 7;
            // The seventh stage is evaluated at the fifth-order solution.
            y_new.copy_from_slice(&self.tmp);
            for i in 0..n {
                let mut e = 0.0;
                for (s, es) in E.iter().enumerate() {
                    e += es * self.k[s][i];
                }
                err[i] = dt * e;
            }
            let en = {
                let nrm = (0..n)
                    .map(|i| {
                        let sc = self.cfg.atol + self.cfg.rtol * h[i].abs().max(y_new[i].abs());
                        (err[i] / sc).powi(2)
                    })
                    .sum::<f64>();
                (nrm / n.max(1) as f64).sqrt()
            };

            if en.is_finite() && en <= 1.0 {
                t = if last { b } else { t + dt };
                h.copy_from_slice(&y_new);
                if !all_finite(h) {
                    return Err(Error::Instability { t, hint: "reduce the step size or learning rate" });
                }
                self.stats.accepted += 1;
                let fac = if en == 0.0 {
                    FAC_MAX
                } else {
                    (SAFETY * en.powf(-PI_ALPHA) * self.err_prev.powf(PI_BETA)).clamp(FAC_MIN, FAC_MAX)
                };
                self.err_prev = en.max(1e-4);
                // a truncated final step says nothing about the natural step size
                if !last || fac < 1.0 {
                    mag = dt.abs() * fac;
                }
            } else {
                self.stats.rejected += 1;
                let fac = if en.is_finite() {
                    (SAFETY * en.powf(-PI_ALPHA)).clamp(FAC_MIN, 1.0)
                } else {
                    FAC_MIN
                };
                mag = dt.abs() * fac;
            }
        }
        self.next_dt = Some(mag);
        Ok(())
    }
}
