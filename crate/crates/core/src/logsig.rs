//! Depth-1 and depth-2 log-signatures of piecewise-linear paths over windows.
//!
//! Depth-2 features are laid out as the `d` increments followed by the Lévy
//! areas `A_ij` for `i < j` in lexicographic order.

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::par;

/// Feature width for `d` channels.
pub fn logsig_dim(d: usize, depth: usize) -> usize {
    match depth {
        1 => d,
        _ => d + d * d.saturating_sub(1) / 2,
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 1 || depth == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("log-signature depth must be 1 or 2, got {depth}")))
    }
}

/// Log-signature of the path through the rows of `points` (`[m × d]`).
pub fn logsig_window(points: &Tensor, depth: usize) -> Result<Tensor> {
    check_depth(depth)?;
    let (m, d) = points.dims2()?;
    if m < 2 {
        return Err(Error::Window(m));
    }
    let mut out = vec![0.0; logsig_dim(d, depth)];
    logsig_rows(points.data(), d, 0, m - 1, depth, &mut out);
    Ok(Tensor::vector(out))
}

/// Log-signature of rows `first..=last` of a row-major `[_, d]` matrix.
fn logsig_rows(data: &[f64], d: usize, first: usize, last: usize, depth: usize, out: &mut [f64]) {
    let row = |k: usize| &data[k * d..(k + 1) * d];
    let x0 = row(first);
    for (i, o) in out[..d].iter_mut().enumerate() {
        *o = row(last)[i] - x0[i];
    }
    if depth < 2 {
        return;
    }
    let areas = &mut out[d..];
    areas.fill(0.0);
    for k in first..last {
        let (a, b) = (row(k), row(k + 1));
        let mut idx = 0;
        for i in 0..d {
            let xi = a[i] - x0[i];
            let dxi = b[i] - a[i];
            for j in i + 1..d {
                let xj = a[j] - x0[j];
                let dxj = b[j] - a[j];
                areas[idx] += 0.5 * (xi * dxj - xj * dxi);
                idx += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogSignatureStream {
    /// Right boundary of each window.
    pub window_times: Vec<f64>,
    /// `[windows × logsig_dim]`.
    pub features: Tensor,
    pub depth: usize,
    pub step: usize,
}

impl LogSignatureStream {
    pub fn n_windows(&self) -> usize {
        self.window_times.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn window(&self, k: usize) -> &[f64] {
        self.features.row(k)
    }
}

/// Splits the path into consecutive windows of `step` intervals (the last
/// one may be shorter).
pub fn windowize(points: &Tensor, times: &[f64], step: usize, depth: usize) -> Result<LogSignatureStream> {
    check_depth(depth)?;
    if step == 0 {
        return Err(Error::Config("log-signature step must be at least 1".into()));
    }
    let (n, d) = points.dims2()?;
    if times.len() != n {
        return Err(Error::dim("windowize", format!("{} times for {n} points", times.len())));
    }
    if n < 2 {
        return Err(Error::Window(n));
    }
    let n_win = (n - 1).div_ceil(step);
    let width = logsig_dim(d, depth);
    let data = points.data();
    let rows = par::map_range(n_win, |k| {
        let first = k * step;
        let last = ((k + 1) * step).min(n - 1);
        let mut f = vec![0.0; width];
        logsig_rows(data, d, first, last, depth, &mut f);
        f
    });
    let window_times = (0..n_win).map(|k| times[((k + 1) * step).min(n - 1)]).collect();
    Ok(LogSignatureStream {
        window_times,
        features: Tensor::new(vec![n_win, width], rows.concat())?,
        depth,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn l_path_area() {
        let p = path(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
        assert_eq!(logsig_window(&p, 2).unwrap().data(), &[1.0, 1.0, 0.5]);
        let rev = path(&[[1.0, 1.0], [1.0, 0.0], [0.0, 0.0]]);
        assert_eq!(logsig_window(&rev, 2).unwrap().data(), &[-1.0, -1.0, -0.5]);
    }

    #[test]
    fn straight_line_has_no_area() {
        let p = path(&[[0.0, 0.0], [2.0, 3.0]]);
        assert_eq!(logsig_window(&p, 2).unwrap().data(), &[2.0, 3.0, 0.0]);
        let p = path(&[[0.0, 0.0], [1.0, 1.5], [2.0, 3.0]]);
        assert_eq!(logsig_window(&p, 2).unwrap().data()[2], 0.0);
    }

    #[test]
    fn short_window_is_an_error() {
        assert!(matches!(logsig_window(&path(&[[0.0, 0.0]]), 1), Err(Error::Window(1))));
        assert!(logsig_window(&path(&[[0.0, 0.0], [1.0, 1.0]]), 3).is_err());
    }

    #[test]
    fn window_counts_and_boundaries() {
        let n = 17000;
        let pts = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let s = windowize(&pts, &times, 4, 1).unwrap();
        assert_eq!(s.n_windows(), 4250);
        assert_eq!(*s.window_times.last().unwrap(), 16999.0);
        assert_eq!(s.window(4249), &[3.0]);

        let small = path(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [3.0, 1.0]]);
        let t = [0.0, 1.0, 2.0, 3.0];
        let s = windowize(&small, &t, 1, 1).unwrap();
        assert_eq!(s.features.data(), &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
        let whole = windowize(&small, &t, 10, 2).unwrap();
        assert_eq!(whole.n_windows(), 1);
        assert_eq!(whole.window(0), logsig_window(&small, 2).unwrap().data());
        assert_eq!(logsig_dim(6, 2), 21);
    }

    /// Truncated level-2 signature `(1, s1, s2)`; `s2` is row-major `d × d`.
    #[derive(Clone)]
    struct Sig2 {
        d: usize,
        s1: Vec<f64>,
        s2: Vec<f64>,
    }

    impl Sig2 {
        fn segment(delta: &[f64]) -> Self {
            let d = delta.len();
            let mut s2 = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    s2[i * d + j] = 0.5 * delta[i] * delta[j];
                }
            }
            Self { d, s1: delta.to_vec(), s2 }
        }

        /// Chen product in the truncated tensor algebra.
        fn mul(&self, o: &Self) -> Self {
            let d = self.d;
            let s1 = self.s1.iter().zip(&o.s1).map(|(a, b)| a + b).collect();
            let mut s2 = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    s2[i * d + j] = self.s2[i * d + j] + o.s2[i * d + j] + self.s1[i] * o.s1[j];
                }
            }
            Self { d, s1, s2 }
        }

        /// Truncated logarithm, flattened to the crate's depth-2 layout.
        fn log_flat(&self) -> Vec<f64> {
            let d = self.d;
            let mut out = self.s1.clone();
            for i in 0..d {
                for j in i + 1..d {
                    out.push(self.s2[i * d + j] - 0.5 * self.s1[i] * self.s1[j]);
                }
            }
            out
        }
    }

    fn oracle(rows: &[Vec<f64>]) -> Vec<f64> {
        let d = rows[0].len();
        let mut sig = Sig2 { d, s1: vec![0.0; d], s2: vec![0.0; d * d] };
        for w in rows.windows(2) {
            let delta: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
            sig = sig.mul(&Sig2::segment(&delta));
        }
        sig.log_flat()
    }

    proptest! {
        #[test]
        fn matches_chen_product(rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 3), 2..8)) {
            let m = rows.len();
            let t = Tensor::new(vec![m, 3], rows.concat()).unwrap();
            let got = logsig_window(&t, 2).unwrap();
            for (a, b) in got.data().iter().zip(oracle(&rows)) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn increments_telescope_and_area_ignores_offsets(
            rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 2), 2..20),
            step in 1usize..5,
            shift in -10.0f64..10.0,
        ) {
            let m = rows.len();
            let t = Tensor::new(vec![m, 2], rows.concat()).unwrap();
            let times: Vec<f64> = (0..m).map(|i| i as f64).collect();
            let s = windowize(&t, &times, step, 1).unwrap();
            for c in 0..2 {
                let total: f64 = (0..s.n_windows()).map(|k| s.window(k)[c]).sum();
                prop_assert!((total - (rows[m - 1][c] - rows[0][c])).abs() <= 1e-12);
            }
            let shifted = Tensor::new(vec![m, 2], rows.concat().iter().map(|v| v + shift).collect()).unwrap();
            let a = logsig_window(&t, 2).unwrap().data()[2];
            let b = logsig_window(&shifted, 2).unwrap().data()[2];
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
