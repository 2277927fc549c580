//! Continuous adjoint sensitivities.
//!
//! The backward pass integrates the augmented state `[h, a, g]` from the
//! terminal time down to the start, with
//! `h' = f(h)`, `a' = -aᵀ ∂f/∂h`, `g' = -aᵀ ∂f/∂θ`.
//! The forward trajectory is reconstructed by running `h` backward rather
//! than stored, so live memory is one augmented state regardless of the
//! number of solver steps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};
use crate::solver::{ode_solve_grid, At, SolveConfig, SolveStats, VectorField};

/// A vector field that also supplies vector–Jacobian products.
pub trait DiffField: VectorField {
    /// Length of the field's local parameter vector.
    fn n_params(&self) -> usize;

    /// Accumulates `cotᵀ ∂f/∂h` into `d_state` and `cotᵀ ∂f/∂θ` into `d_params`.
    fn vjp(&self, at: At, state: &[f64], cot: &[f64], d_state: &mut [f64], d_params: &mut [f64]);
}

/// Augmented backward state; `h` is the reconstructed forward state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub h: Tensor,
    pub a: Tensor,
    pub gtheta: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdjointOutput {
    pub dl_dh0: Vec<f64>,
    pub dl_dtheta: Vec<f64>,
    /// `h` at the start of the grid as recovered by the backward solve.
    pub h0_reconstructed: Vec<f64>,
    pub stats: SolveStats,
    /// Number of augmented state buffers held during the solve.
    pub augmented_states: usize,
}

struct Augmented<'a> {
    inner: &'a dyn DiffField,
    n: usize,
    p: usize,
}

impl VectorField for Augmented<'_> {
    fn dim(&self) -> usize {
        2 * self.n + self.p
    }

    fn eval(&self, at: At, state: &[f64], out: &mut [f64]) {
        let (h, rest) = state.split_at(self.n);
        let a = &rest[..self.n];
        let (out_h, out_rest) = out.split_at_mut(self.n);
        let (out_a, out_g) = out_rest.split_at_mut(self.n);
        self.inner.eval(at, h, out_h);
        out_a.fill(0.0);
        out_g.fill(0.0);
        self.inner.vjp(at, h, a, out_a, out_g);
        out_a.iter_mut().for_each(|v| *v = -*v);
        out_g.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Adjoint over a single interval `[t0, t1]`.
pub fn backward_adjoint(
    field: &dyn DiffField,
    h_t: &Tensor,
    dl_dht: &Tensor,
    t0: f64,
    t1: f64,
    cfg: &SolveConfig,
) -> Result<(Tensor, Tensor)> {
    if h_t.shape() != dl_dht.shape() {
        return Err(Error::dim(
            "backward_adjoint",
            format!("state {:?} vs loss gradient {:?}", h_t.shape(), dl_dht.shape()),
        ));
    }
    let out = backward_adjoint_grid(field, h_t.data(), dl_dht.data(), &[t0, t1], cfg)?;
    let n_p = out.dl_dtheta.len();
    Ok((Tensor::new(h_t.shape().to_vec(), out.dl_dh0)?, Tensor::new(vec![n_p], out.dl_dtheta)?))
}

/// Adjoint over the ascending forward grid used for the forward solve; the
/// backward pass walks the same grid in reverse.
pub fn backward_adjoint_grid(
    field: &dyn DiffField,
    h_t: &[f64],
    dl_dht: &[f64],
    grid: &[f64],
    cfg: &SolveConfig,
) -> Result<AdjointOutput> {
    let n = field.dim();
    let p = field.n_params();
    if h_t.len() != n || dl_dht.len() != n {
        return Err(Error::dim(
            "backward_adjoint",
            format!("field dim {n}, terminal state {}, loss gradient {}", h_t.len(), dl_dht.len()),
        ));
    }
    if !dl_dht.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("terminal loss gradient".into()));
    }
    let aug = Augmented { inner: field, n, p };
    let mut z = Vec::with_capacity(2 * n + p);
    z.extend_from_slice(h_t);
    z.extend_from_slice(dl_dht);
    z.resize(2 * n + p, 0.0);
    let reversed: Vec<f64> = grid.iter().rev().copied().collect();
    let sol = ode_solve_grid(&aug, &z, &reversed, cfg, false).map_err(|e| match e {
        Error::Divergence { t, .. } | Error::Instability { t, .. } => Error::Instability {
            t,
            hint: "backward reconstruction failed; use smaller solver steps",
        },
        other => other,
    })?;
    let mut zf = sol.final_state;
    let dl_dtheta = zf.split_off(2 * n);
    let dl_dh0 = zf.split_off(n);
    Ok(AdjointOutput { dl_dh0, dl_dtheta, h0_reconstructed: zf, stats: sol.stats, augmented_states: 1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub max_rel: f64,
    pub mean_rel: f64,
}

impl GradCheckReport {
    pub fn failing(&self, tol: f64) -> Vec<&str> {
        self.rows.iter().filter(|r| !(r.rel_error < tol)).map(|r| r.name.as_str()).collect()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failing(tol).is_empty()
    }

    /// Text table: name, analytic norm, numeric norm, relative error.
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<w$}  {:>12}  {:>12}  {:>10}\n", "name", "analytic", "numeric", "rel_err");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>12.5e}  {:>12.5e}  {:>10.3e}", r.name, r.analytic_norm, r.numeric_norm, r.rel_error);
        }
        let _ = writeln!(s, "max {:.3e}  mean {:.3e}", self.max_rel, self.mean_rel);
        s
    }
}

/// Magnitudes below which the relative error falls back to an absolute one.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Compares `analytic` against central differences of `loss_fn`.
///
/// The error for each parameter tensor is `‖ga − gn‖ / max(‖ga‖, ‖gn‖)`,
/// or `‖ga − gn‖` when both norms are below [`FD_ABS_FLOOR`].
pub fn grad_check_fd<F>(loss_fn: F, params: &ParamStore, analytic: &ParamStore, perturbation: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    params.ensure_aligned(analytic)?;
    if !(perturbation > 0.0) {
        return Err(Error::Config(format!("finite-difference perturbation must be positive, got {perturbation}")));
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut work = params.clone();
    let mut rows = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let ga = analytic.slice(&name).to_vec();
        let mut gn = vec![0.0; ga.len()];
        for (i, g) in gn.iter_mut().enumerate() {
            let orig = work.slice(&name)[i];
            work.slice_mut(&name)[i] = orig + perturbation;
            let up = loss_fn(&work)?;
            work.slice_mut(&name)[i] = orig - perturbation;
            let down = loss_fn(&work)?;
            work.slice_mut(&name)[i] = orig;
            *g = (up - down) / (2.0 * perturbation);
        }
        let na = norm(&ga);
        let nn = norm(&gn);
        let diff = ga.iter().zip(&gn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rel_error = if na < FD_ABS_FLOOR && nn < FD_ABS_FLOOR { diff } else { diff / na.max(nn) };
        rows.push(GradCheckRow { name, analytic_norm: na, numeric_norm: nn, rel_error });
    }
    let max_rel = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let mean_rel = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.rel_error).sum::<f64>() / rows.len() as f64 };
    Ok(GradCheckReport { rows, max_rel, mean_rel })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{ode_solve_grid, Method};

    /// h' = θ h.
    struct Scalar(f64);
    impl VectorField for Scalar {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _at: At, s: &[f64], out: &mut [f64]) {
            out[0] = self.0 * s[0];
        }
    }
    impl DiffField for Scalar {
        fn n_params(&self) -> usize {
            1
        }
        fn vjp(&self, _at: At, s: &[f64], cot: &[f64], ds: &mut [f64], dp: &mut [f64]) {
            ds[0] += cot[0] * self.0;
            dp[0] += cot[0] * s[0];
        }
    }

    struct Zero;
    impl VectorField for Zero {
        fn dim(&self) -> usize {
            3
        }
        fn eval(&self, _at: At, _s: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }
    impl DiffField for Zero {
        fn n_params(&self) -> usize {
            2
        }
        fn vjp(&self, _: At, _: &[f64], _: &[f64], _: &mut [f64], _: &mut [f64]) {}
    }

    /// h' = A h with a fixed matrix; θ is A itself.
    struct LinearField {
        a: [[f64; 2]; 2],
    }
    impl VectorField for LinearField {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _at: At, s: &[f64], out: &mut [f64]) {
            for i in 0..2 {
                out[i] = self.a[i][0] * s[0] + self.a[i][1] * s[1];
            }
        }
    }
    impl DiffField for LinearField {
        fn n_params(&self) -> usize {
            4
        }
        fn vjp(&self, _at: At, s: &[f64], cot: &[f64], ds: &mut [f64], dp: &mut [f64]) {
            for i in 0..2 {
                for j in 0..2 {
                    ds[j] += cot[i] * self.a[i][j];
                    dp[2 * i + j] += cot[i] * s[j];
                }
            }
        }
    }

    #[test]
    fn zero_field_passes_gradient_through() {
        let h = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let g = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let (d0, dth) = backward_adjoint(&Zero, &h, &g, 0.0, 4.0, &SolveConfig::default()).unwrap();
        assert_eq!(d0.data(), g.data());
        assert_eq!(dth.data(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_growth_at_zero_rate() {
        // L = h(1) with h' = θh, h(0) = 1: dL/dh0 = e^θ, dL/dθ = e^θ.
        let cfg = SolveConfig::fixed(Method::Rk4, 8);
        let out = backward_adjoint_grid(&Scalar(0.0), &[1.0], &[1.0], &[0.0, 1.0], &cfg).unwrap();
        assert!((out.dl_dh0[0] - 1.0).abs() < 1e-12);
        assert!((out.dl_dtheta[0] - 1.0).abs() < 1e-12);
        assert_eq!(out.augmented_states, 1);

        let theta = 0.7f64;
        let cfg = SolveConfig::dopri5(1e-10, 1e-12);
        let h_t = theta.exp();
        let out = backward_adjoint_grid(&Scalar(theta), &[h_t], &[1.0], &[0.0, 1.0], &cfg).unwrap();
        assert!((out.dl_dh0[0] - theta.exp()).abs() < 1e-8);
        assert!((out.dl_dtheta[0] - theta.exp()).abs() < 1e-8);
        assert!((out.h0_reconstructed[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_field_matches_transposed_jacobian() {
        let f = LinearField { a: [[-0.3, 0.8], [-0.5, 0.1]] };
        let cfg = SolveConfig::fixed(Method::Rk4, 32);
        let grid = [0.0, 1.0, 2.0];
        let h0 = [0.4, -1.0];
        let fwd = ode_solve_grid(&f, &h0, &grid, &cfg, false).unwrap();
        let c = [1.0, 2.0];
        let out = backward_adjoint_grid(&f, &fwd.final_state, &c, &grid, &cfg).unwrap();
        // Jacobian of the flow map by columns.
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut e = [0.0; 2];
            e[j] = 1.0;
            let col = ode_solve_grid(&f, &e, &grid, &cfg, false).unwrap().final_state;
            for i in 0..2 {
                jac[i][j] = col[i];
            }
        }
        for j in 0..2 {
            let expect = c[0] * jac[0][j] + c[1] * jac[1][j];
            assert!((out.dl_dh0[j] - expect).abs() < 1e-6, "{j}: {} vs {expect}", out.dl_dh0[j]);
        }
    }

    #[test]
    fn backward_failure_is_an_instability() {
        let cfg = SolveConfig { max_steps: 3, ..SolveConfig::dopri5(1e-12, 1e-14) };
        let err = backward_adjoint_grid(&Scalar(5.0), &[1.0], &[1.0], &[0.0, 10.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Instability { .. }), "{err}");
    }

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::vector(values.to_vec())).unwrap();
        s.insert("tiny", Tensor::vector(vec![0.0])).unwrap();
        s
    }

    #[test]
    fn fd_on_quadratic_and_linear() {
        let p = store(&[0.3, -1.2, 2.0]);
        let quad = |s: &ParamStore| Ok(0.5 * s.flatten().iter().map(|v| v * v).sum::<f64>());
        let rep = grad_check_fd(quad, &p, &p.clone(), 1e-4).unwrap();
        assert!(rep.max_rel < 1e-6, "{}", rep.table());

        let c = [1.5, -0.5, 0.25, 0.0];
        let lin = move |s: &ParamStore| Ok(s.flatten().iter().zip(c).map(|(a, b)| a * b).sum::<f64>());
        let mut g = p.zeros_like();
        g.unflatten(&c).unwrap();
        let rep = grad_check_fd(lin, &p, &g, 1e-4).unwrap();
        assert!(rep.max_rel < 1e-9, "{}", rep.table());
        assert!(rep.table().contains("tiny"));
    }

    #[test]
    fn fd_flags_wrong_gradient_and_nondeterminism() {
        let p = store(&[1.0, 2.0, 3.0]);
        let quad = |s: &ParamStore| Ok(0.5 * s.flatten().iter().map(|v| v * v).sum::<f64>());
        let mut wrong = p.clone();
        wrong.slice_mut("p")[1] *= 1.5;
        let rep = grad_check_fd(quad, &p, &wrong, 1e-4).unwrap();
        assert_eq!(rep.failing(1e-3), vec!["p"]);

        let counter = std::sync::atomic::AtomicUsize::new(0);
        let noisy = |_: &ParamStore| Ok(counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed) as f64);
        let err = grad_check_fd(noisy, &p, &p.clone(), 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
