//! Control paths `x(t)` built from discrete observations.

use crate::data::SequenceRecord;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::solver::At;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    NaturalCubic,
    Linear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" | "natural_cubic" => Ok(Self::NaturalCubic),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown interpolation `{other}` (cubic|linear)"))),
        }
    }
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NaturalCubic => "cubic",
            Self::Linear => "linear",
        })
    }
}

/// Observation-intensity channels appended after the filled values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObservationChannels {
    #[default]
    None,
    /// 1 where the cell was observed, else 0.
    Mask,
    /// Running number of observations of each channel so far.
    Count,
}

impl std::str::FromStr for ObservationChannels {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mask" => Ok(Self::Mask),
            "count" => Ok(Self::Count),
            other => Err(Error::Config(format!("unknown observation channels `{other}` (none|mask|count)"))),
        }
    }
}

impl std::fmt::Display for ObservationChannels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mask => "mask",
            Self::Count => "count",
        })
    }
}

/// Dense knot matrix `[len × (1 + channels + oi)]`: raw timestamps in
/// channel 0, forward/back-filled values, then any observation channels.
pub fn preprocess_missing(record: &SequenceRecord, oi: ObservationChannels) -> Result<Tensor> {
    let n = record.len();
    let c = record.channels();
    let extra = if oi == ObservationChannels::None { 0 } else { c };
    let width = 1 + c + extra;
    let mut out = vec![0.0; n * width];
    for (i, t) in record.times.iter().enumerate() {
        out[i * width] = *t;
    }
    for ch in 0..c {
        let first = (0..n).find_map(|i| record.value(i, ch));
        let Some(mut last) = first else {
            return Err(Error::UnusableChannel { channel: record.channel_names[ch].clone() });
        };
        let mut count = 0.0;
        for i in 0..n {
            let obs = record.value(i, ch);
            if let Some(v) = obs {
                last = v;
                count += 1.0;
            }
            out[i * width + 1 + ch] = last;
            match oi {
                ObservationChannels::None => {}
                ObservationChannels::Mask => out[i * width + 1 + c + ch] = if obs.is_some() { 1.0 } else { 0.0 },
                ObservationChannels::Count => out[i * width + 1 + c + ch] = count,
            }
        }
    }
    Tensor::new(vec![n, width], out)
}

/// Piecewise cubic path; segment `i` is `a + bτ + cτ² + dτ³` with
/// `τ = t − knot_times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    kind: Interpolation,
    knot_times: Vec<f64>,
    channels: usize,
    /// `[segment][channel] -> [a, b, c, d]`, flattened.
    coeffs: Vec<[f64; 4]>,
    last_values: Vec<f64>,
}

/// Fits a path through knots given as `times` and a `[len × channels]` matrix.
pub fn fit_path(times: &[f64], values: &Tensor, kind: Interpolation) -> Result<ControlPath> {
    let (n, c) = values.dims2()?;
    if n != times.len() {
        return Err(Error::dim("fit_path", format!("{} times for {n} knot rows", times.len())));
    }
    if n < 2 {
        return Err(Error::dim("fit_path", format!("need at least 2 knots, got {n}")));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Ordering(format!("knot time {} is followed by {}", w[0], w[1])));
        }
    }
    values.ensure_finite("fit_path knots")?;
    let v = values.data();
    let y = |k: usize, ch: usize| v[k * c + ch];
    let mut coeffs = vec![[0.0; 4]; (n - 1) * c];
    match kind {
        Interpolation::Linear => {
            for k in 0..n - 1 {
                let h = times[k + 1] - times[k];
                for ch in 0..c {
                    coeffs[k * c + ch] = [y(k, ch), (y(k + 1, ch) - y(k, ch)) / h, 0.0, 0.0];
                }
            }
        }
        Interpolation::NaturalCubic => {
            let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
            let mut m = vec![0.0; n];
            let mut col: Vec<f64> = Vec::with_capacity(n);
            for ch in 0..c {
                col.clear();
                col.extend((0..n).map(|k| y(k, ch)));
                natural_second_derivatives(&h, &col, &mut m);
                for k in 0..n - 1 {
                    let hk = h[k];
                    let b = (col[k + 1] - col[k]) / hk - hk * (2.0 * m[k] + m[k + 1]) / 6.0;
                    coeffs[k * c + ch] = [col[k], b, m[k] / 2.0, (m[k + 1] - m[k]) / (6.0 * hk)];
                }
            }
        }
    }
    Ok(ControlPath { kind, knot_times: times.to_vec(), channels: c, coeffs, last_values: v[(n - 1) * c..].to_vec() })
}

/// Solves the natural-spline tridiagonal system by the Thomas algorithm.
fn natural_second_derivatives(h: &[f64], y: &[f64], m: &mut [f64]) {
    let n = y.len();
    m.fill(0.0);
    if n < 3 {
        return;
    }
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        diag[i] = 2.0 * (h[i] + h[i + 1]);
        rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
    }
    // sub- and super-diagonal entry between unknowns i and i+1 is h[i+1]
    for i in 1..k {
        let w = h[i] / diag[i - 1];
        diag[i] -= w * h[i];
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
    }
}

impl ControlPath {
    /// Path that stays at `values` over `[t0, t1]`.
    pub fn constant(values: &[f64], t0: f64, t1: f64) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::Ordering(format!("constant path needs t1 > t0, got [{t0}, {t1}]")));
        }
        let rows = Tensor::new(vec![2, values.len()], [values, values].concat())?;
        fit_path(&[t0, t1], &rows, Interpolation::Linear)
    }

    pub fn kind(&self) -> Interpolation {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn knot_times(&self) -> &[f64] {
        &self.knot_times
    }

    pub fn n_segments(&self) -> usize {
        self.knot_times.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.knot_times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knot_times.last().expect("non-empty")
    }

    /// Coefficients `[a, b, c, d]` of one channel on one segment.
    pub fn segment_coeffs(&self, segment: usize, channel: usize) -> [f64; 4] {
        self.coeffs[segment * self.channels + channel]
    }

    /// Segment containing `t`; knots belong to the segment on their right
    /// except the final one.
    pub fn segment_of(&self, t: f64) -> usize {
        let idx = self.knot_times.partition_point(|k| *k <= t);
        idx.saturating_sub(1).min(self.n_segments() - 1)
    }

    fn clamp(&self, t: f64) -> (f64, bool) {
        let (a, b) = (self.t0(), self.t_end());
        if t < a {
            (a, true)
        } else if t > b {
            (b, true)
        } else {
            (t, false)
        }
    }

    /// `x(t)`, clamped to the knot range. The flag is set when `t` was outside it.
    pub fn eval_checked(&self, t: f64) -> (Tensor, bool) {
        let (tc, clamped) = self.clamp(t);
        let mut out = vec![0.0; self.channels];
        self.eval_into(At::new(tc, self.segment_of(tc)), &mut out);
        (Tensor::vector(out), clamped)
    }

    pub fn eval(&self, t: f64) -> Tensor {
        self.eval_checked(t).0
    }

    pub fn derivative_checked(&self, t: f64) -> (Tensor, bool) {
        let (tc, clamped) = self.clamp(t);
        let mut out = vec![0.0; self.channels];
        self.derivative_into(At::new(tc, self.segment_of(tc)), &mut out);
        (Tensor::vector(out), clamped)
    }

    pub fn derivative(&self, t: f64) -> Tensor {
        self.derivative_checked(t).0
    }

    /// Evaluates on the segment named by `at` (the solver's hint), which
    /// decides one-sided values at knots.
    pub fn eval_into(&self, at: At, out: &mut [f64]) {
        let s = at.segment.min(self.n_segments() - 1);
        if s == self.n_segments() - 1 && at.t >= self.t_end() {
            out.copy_from_slice(&self.last_values);
            return;
        }
        let tau = at.t - self.knot_times[s];
        let row = &self.coeffs[s * self.channels..(s + 1) * self.channels];
        for (o, [a, b, c, d]) in out.iter_mut().zip(row) {
            *o = a + tau * (b + tau * (c + tau * d));
        }
    }

    pub fn derivative_into(&self, at: At, out: &mut [f64]) {
        let s = at.segment.min(self.n_segments() - 1);
        let tau = at.t - self.knot_times[s];
        let row = &self.coeffs[s * self.channels..(s + 1) * self.channels];
        for (o, [_, b, c, d]) in out.iter_mut().zip(row) {
            *o = b + tau * (2.0 * c + 3.0 * tau * d);
        }
    }

    pub fn second_derivative_into(&self, at: At, out: &mut [f64]) {
        let s = at.segment.min(self.n_segments() - 1);
        let tau = at.t - self.knot_times[s];
        let row = &self.coeffs[s * self.channels..(s + 1) * self.channels];
        for (o, [_, _, c, d]) in out.iter_mut().zip(row) {
            *o = 2.0 * c + 6.0 * tau * d;
        }
    }
}

/// Knot matrix for a record and its path on unit spacing `0..len-1`.
///
/// Single-observation sequences get a constant path over `[0, 1]`.
pub fn record_path(record: &SequenceRecord, oi: ObservationChannels, kind: Interpolation) -> Result<ControlPath> {
    let knots = preprocess_missing(record, oi)?;
    let n = record.len();
    match n {
        0 => Err(Error::dim("record_path", format!("sequence {} is empty", record.id))),
        1 => ControlPath::constant(knots.data(), 0.0, 1.0),
        _ => {
            let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
            fit_path(&times, &knots, kind)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_knot() -> ControlPath {
        let v = Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap();
        fit_path(&[0.0, 1.0, 2.0], &v, Interpolation::NaturalCubic).unwrap()
    }

    #[test]
    fn linear_examples() {
        let v = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let p = fit_path(&[0.0, 1.0], &v, Interpolation::Linear).unwrap();
        assert_eq!(p.eval(0.5).data(), &[0.5]);
        assert_eq!(p.derivative(0.5).data(), &[1.0]);

        let v = Tensor::new(vec![2, 1], vec![0.0, 4.0]).unwrap();
        let p = fit_path(&[0.0, 2.0], &v, Interpolation::Linear).unwrap();
        assert_eq!(p.eval(1.0).data(), &[2.0]);
        assert_eq!(p.derivative(1.0).data(), &[2.0]);
    }

    #[test]
    fn three_knot_cubic() {
        let p = three_knot();
        assert!((p.eval(0.5).data()[0] - 0.6875).abs() < 1e-15);
        assert_eq!(p.eval(1.0).data(), &[1.0]);
        // slope at the left end: 1 − h·M1/6 with M1 = −3
        assert!((p.derivative(0.0).data()[0] - 1.5).abs() < 1e-15);
        let mut m = [0.0];
        p.second_derivative_into(At::new(1.0, 1), &mut m);
        assert!((m[0] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn clamping_is_flagged() {
        let p = three_knot();
        let (v, flag) = p.eval_checked(-1.0);
        assert!(flag);
        assert_eq!(v.data(), &[0.0]);
        assert!(!p.eval_checked(2.0).1);
        assert!(p.derivative_checked(3.0).1);
    }

    #[test]
    fn ordering_errors() {
        let v = Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(fit_path(&[0.0, 1.0, 1.0], &v, Interpolation::Linear), Err(Error::Ordering(_))));
        assert!(matches!(fit_path(&[0.0, 2.0, 1.0], &v, Interpolation::NaturalCubic), Err(Error::Ordering(_))));
        let one = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert!(fit_path(&[0.0], &one, Interpolation::Linear).is_err());
    }

    fn record(rows: Vec<Vec<f64>>) -> SequenceRecord {
        let n = rows.len();
        let c = rows[0].len();
        let names = (0..c).map(|i| format!("c{i}")).collect();
        SequenceRecord::from_rows("r", (0..n).map(|i| 0.5 * i as f64).collect(), rows, names, 0).unwrap()
    }

    #[test]
    fn fill_rules() {
        let nan = f64::NAN;
        let r = record(vec![vec![1.0, nan], vec![nan, 2.0], vec![nan, nan], vec![4.0, nan]]);
        let k = preprocess_missing(&r, ObservationChannels::None).unwrap();
        assert_eq!(k.shape(), &[4, 3]);
        let col = |c: usize| (0..4).map(|i| k.data()[i * 3 + c]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 0.5, 1.0, 1.5]);
        assert_eq!(col(1), vec![1.0, 1.0, 1.0, 4.0]);
        assert_eq!(col(2), vec![2.0, 2.0, 2.0, 2.0]);

        let k = preprocess_missing(&r, ObservationChannels::Mask).unwrap();
        assert_eq!(k.row(0), &[0.0, 1.0, 2.0, 1.0, 0.0]);
        let k = preprocess_missing(&r, ObservationChannels::Count).unwrap();
        assert_eq!(k.row(3), &[1.5, 4.0, 2.0, 2.0, 1.0]);

        let full = record(vec![vec![3.0], vec![5.0]]);
        let k = preprocess_missing(&full, ObservationChannels::None).unwrap();
        assert_eq!(k.data(), &[0.0, 3.0, 0.5, 5.0]);
    }

    #[test]
    fn unobserved_channel_is_named() {
        let nan = f64::NAN;
        let r = record(vec![vec![1.0, nan], vec![2.0, nan]]);
        match preprocess_missing(&r, ObservationChannels::None) {
            Err(Error::UnusableChannel { channel }) => assert_eq!(channel, "c1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn straight_lines_stay_straight() {
        let v = Tensor::new(vec![4, 2], vec![0.0, 1.0, 1.0, 3.0, 2.0, 5.0, 3.0, 7.0]).unwrap();
        let p = fit_path(&[0.0, 1.0, 2.0, 3.0], &v, Interpolation::NaturalCubic).unwrap();
        for s in 0..3 {
            for c in 0..2 {
                let [_, _, c2, c3] = p.segment_coeffs(s, c);
                assert!(c2.abs() <= 1e-10 && c3.abs() <= 1e-10);
            }
        }
        let two = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let p = fit_path(&[0.0, 3.0], &two, Interpolation::NaturalCubic).unwrap();
        assert_eq!(p.segment_coeffs(0, 0)[2..], [0.0, 0.0]);
    }

    #[test]
    fn single_observation_record_is_constant() {
        let r = record(vec![vec![2.5]]);
        let p = record_path(&r, ObservationChannels::None, Interpolation::NaturalCubic).unwrap();
        assert_eq!(p.eval(0.3).data(), &[0.0, 2.5]);
        assert_eq!(p.derivative(0.3).data(), &[0.0, 0.0]);
    }

    fn knots_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..9).prop_flat_map(|n| {
            (proptest::collection::vec(0.2f64..2.0, n - 1), proptest::collection::vec(-3.0f64..3.0, n))
        })
    }

    proptest! {
        #[test]
        fn cubic_spline_invariants((gaps, ys) in knots_strategy()) {
            let mut times = vec![0.0];
            for g in &gaps {
                times.push(times.last().unwrap() + g);
            }
            let n = ys.len();
            let v = Tensor::new(vec![n, 1], ys.clone()).unwrap();
            let p = fit_path(&times, &v, Interpolation::NaturalCubic).unwrap();
            for (k, y) in ys.iter().enumerate() {
                prop_assert!((p.eval(times[k]).data()[0] - y).abs() <= 1e-12);
            }
            let mut m = [0.0];
            p.second_derivative_into(At::new(times[0], 0), &mut m);
            prop_assert!(m[0].abs() <= 1e-9);
            p.second_derivative_into(At::new(times[n - 1], n - 2), &mut m);
            prop_assert!(m[0].abs() <= 1e-9);
            for k in 1..n - 1 {
                let (l, r) = (At::new(times[k], k - 1), At::new(times[k], k));
                let (mut a, mut b) = ([0.0], [0.0]);
                p.eval_into(l, &mut a);
                p.eval_into(r, &mut b);
                prop_assert!((a[0] - b[0]).abs() <= 1e-9);
                p.derivative_into(l, &mut a);
                p.derivative_into(r, &mut b);
                prop_assert!((a[0] - b[0]).abs() <= 1e-9);
                p.second_derivative_into(l, &mut a);
                p.second_derivative_into(r, &mut b);
                prop_assert!((a[0] - b[0]).abs() <= 1e-9);
            }
            // analytic derivative against central differences away from knots
            for k in 0..n - 1 {
                let t = times[k] + 0.37 * (times[k + 1] - times[k]);
                let fd = (p.eval(t + 1e-6).data()[0] - p.eval(t - 1e-6).data()[0]) / 2e-6;
                prop_assert!((fd - p.derivative(t).data()[0]).abs() <= 1e-5);
            }
        }
    }
}
