//! ODE-RFWP: an autonomous ODE evolves the recurrent state between
//! observations, and each observation applies one discrete fast weight
//! update to `[x_n, u_n]`.

use super::discrete::{CellCache, DiscreteCell, DiscreteSpec};
use super::head::Head;
use super::Rule;
use crate::adjoint::{backward_adjoint_grid, DiffField};
use crate::error::{Error, Result};
use crate::numcore::ops::{cross_entropy, matvec_acc, matvec_t_acc, outer_acc};
use crate::numcore::{ParamInit, ParamStore, Tensor};
use crate::solver::{ode_solve_grid, At, SolveConfig, VectorField};

/// `f(h) = W2 tanh(W1 h + b1) + b2` over a flat `[W1, b1, W2, b2]` buffer.
pub struct MlpField<'a> {
    pub d: usize,
    pub d_hidden: usize,
    pub params: &'a [f64],
}

impl MlpField<'_> {
    pub fn n_params_for(d: usize, d_hidden: usize) -> usize {
        2 * d * d_hidden + d_hidden + d
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.d * self.d_hidden);
        let (b1, rest) = rest.split_at(self.d_hidden);
        let (w2, b2) = rest.split_at(self.d * self.d_hidden);
        (w1, b1, w2, b2)
    }

    fn hidden(&self, h: &[f64]) -> Vec<f64> {
        let (w1, b1, _, _) = self.split();
        let mut a = b1.to_vec();
        matvec_acc(w1, self.d_hidden, self.d, h, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }
}

impl VectorField for MlpField<'_> {
    fn dim(&self) -> usize {
        self.d
    }

    fn eval(&self, _at: At, state: &[f64], out: &mut [f64]) {
        let (_, _, w2, b2) = self.split();
        let a = self.hidden(state);
        out.copy_from_slice(b2);
        matvec_acc(w2, self.d, self.d_hidden, &a, out);
    }
}

impl DiffField for MlpField<'_> {
    fn n_params(&self) -> usize {
        Self::n_params_for(self.d, self.d_hidden)
    }

    fn vjp(&self, _at: At, state: &[f64], cot: &[f64], d_state: &mut [f64], d_params: &mut [f64]) {
        let (d, m) = (self.d, self.d_hidden);
        let (w1, _, w2, _) = self.split();
        let a = self.hidden(state);
        let (dw1, rest) = d_params.split_at_mut(d * m);
        let (db1, rest) = rest.split_at_mut(m);
        let (dw2, db2) = rest.split_at_mut(d * m);
        outer_acc(1.0, cot, &a, dw2);
        db2.iter_mut().zip(cot).for_each(|(x, g)| *x += g);
        let mut g_a = vec![0.0; m];
        matvec_t_acc(w2, d, m, cot, &mut g_a);
        g_a.iter_mut().zip(&a).for_each(|(g, v)| *g *= 1.0 - v * v);
        outer_acc(1.0, &g_a, state, dw1);
        db1.iter_mut().zip(&g_a).for_each(|(x, g)| *x += g);
        matvec_t_acc(w1, m, d, &g_a, d_state);
    }
}

/// `u = ODESolve(f, h_prev, t_prev, t_n)`; a zero-length gap returns `h_prev`.
pub fn evolve_gap(field: &dyn VectorField, h_prev: &[f64], t_prev: f64, t_n: f64, solver: &SolveConfig) -> Result<Vec<f64>> {
    if t_n < t_prev {
        return Err(Error::Ordering(format!("observation time {t_n} precedes {t_prev}")));
    }
    if t_n == t_prev {
        return Ok(h_prev.to_vec());
    }
    Ok(ode_solve_grid(field, h_prev, &[t_prev, t_n], solver, false)?.final_state)
}

/// One ODE-RFWP step; returns `(h_n, W_n)`.
#[allow(clippy::too_many_arguments)]
pub fn ode_rfwp_step(
    field: &MlpField,
    cell: &DiscreteCell,
    params: &ParamStore,
    h_prev: &[f64],
    w_prev: &[f64],
    x_n: &[f64],
    t_prev: f64,
    t_n: f64,
    solver: &SolveConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = evolve_gap(field, h_prev, t_prev, t_n, solver)?;
    let input = [x_n, &u].concat();
    let (y, c) = cell.step(params, &input, w_prev)?;
    Ok((y, c.w_new().to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfwpConfig {
    pub rule: Rule,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ode: usize,
    pub n_classes: usize,
    pub d_static: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfwpModel {
    pub cfg: RfwpConfig,
    cell: DiscreteCell,
    head: Head,
}

const ODE_PARAMS: [&str; 4] = ["ode.w1", "ode.b1", "ode.w2", "ode.b2"];

struct Trace {
    caches: Vec<CellCache>,
    us: Vec<Vec<f64>>,
    logits: Vec<f64>,
    head: super::head::HeadCache,
}

impl RfwpModel {
    pub fn new(cfg: RfwpConfig) -> Result<Self> {
        let spec = DiscreteSpec::new(cfg.rule, cfg.heads, cfg.d_in + cfg.d_model, cfg.d_model)?;
        Ok(Self {
            cfg,
            cell: DiscreteCell::new(spec, "cell"),
            head: Head { d_feat: cfg.d_model, d_static: cfg.d_static, n_classes: cfg.n_classes },
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        let mut init = ParamInit::new(seed);
        let (d, m) = (self.cfg.d_model, self.cfg.d_ode);
        init.linear(&mut store, "ode.w1", m, d)?;
        init.zeros(&mut store, "ode.b1", m)?;
        init.linear(&mut store, "ode.w2", d, m)?;
        init.zeros(&mut store, "ode.b2", d)?;
        self.cell.init_params(&mut init, &mut store)?;
        self.head.init_params(&mut init, &mut store)?;
        Ok(store)
    }

    fn ode_flat(params: &ParamStore) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for n in ODE_PARAMS {
            flat.extend_from_slice(params.get(n)?.data());
        }
        Ok(flat)
    }

    fn run(&self, params: &ParamStore, rows: &Tensor, times: &[f64], statics: Option<&[f64]>, solver: &SolveConfig) -> Result<Trace> {
        let (n, _) = rows.dims2()?;
        if n == 0 || times.len() != n {
            return Err(Error::dim("ode_rfwp", format!("{n} observations, {} times", times.len())));
        }
        let flat = Self::ode_flat(params)?;
        let field = MlpField { d: self.cfg.d_model, d_hidden: self.cfg.d_ode, params: &flat };
        let mut h = vec![0.0; self.cfg.d_model];
        let mut w = vec![0.0; self.cell.spec.state_len()];
        let mut caches = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        for i in 0..n {
            let t_prev = if i == 0 { times[0] } else { times[i - 1] };
            let u = evolve_gap(&field, &h, t_prev, times[i], solver)?;
            let input = [rows.row(i), &u].concat();
            let (y, c) = self.cell.step(params, &input, &w)?;
            w = c.w_new().to_vec();
            h = y;
            caches.push(c);
            us.push(u);
        }
        let (logits, head) = self.head.forward(params, &h, statics)?;
        Ok(Trace { caches, us, logits, head })
    }

    pub fn forward(&self, params: &ParamStore, rows: &Tensor, times: &[f64], statics: Option<&[f64]>, solver: &SolveConfig) -> Result<Vec<f64>> {
        Ok(self.run(params, rows, times, statics, solver)?.logits)
    }

    /// Backpropagation through the discrete updates, with a continuous adjoint
    /// over every gap.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        rows: &Tensor,
        times: &[f64],
        statics: Option<&[f64]>,
        label: usize,
        solver: &SolveConfig,
    ) -> Result<(f64, ParamStore, Vec<f64>)> {
        let tr = self.run(params, rows, times, statics, solver)?;
        let (loss, g_logits) = cross_entropy(&tr.logits, label);
        let mut grads = params.zeros_like();
        let mut g_h = self.head.vjp(params, &tr.head, &g_logits, &mut grads);
        let flat = Self::ode_flat(params)?;
        let field = MlpField { d: self.cfg.d_model, d_hidden: self.cfg.d_ode, params: &flat };
        let mut g_ode = vec![0.0; flat.len()];
        let mut g_w = vec![0.0; self.cell.spec.state_len()];
        let d_in = self.cfg.d_in;
        for i in (0..tr.caches.len()).rev() {
            let (gw, g_in) = self.cell.step_vjp(params, &tr.caches[i], &g_h, &g_w, &mut grads);
            g_w = gw;
            let g_u = &g_in[d_in..];
            let t_prev = if i == 0 { times[0] } else { times[i - 1] };
            if times[i] > t_prev {
                let adj = backward_adjoint_grid(&field, &tr.us[i], g_u, &[t_prev, times[i]], solver)?;
                g_ode.iter_mut().zip(&adj.dl_dtheta).for_each(|(a, b)| *a += b);
                g_h = adj.dl_dh0;
            } else {
                g_h = g_u.to_vec();
            }
        }
        let mut off = 0;
        for n in ODE_PARAMS {
            let g = grads.slice_mut(n);
            let len = g.len();
            g.iter_mut().zip(&g_ode[off..off + len]).for_each(|(a, b)| *a += b);
            off += len;
        }
        Ok((loss, grads, tr.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Method;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Decay;
    impl VectorField for Decay {
        fn dim(&self) -> usize {
            2
        }
        fn eval(&self, _at: At, s: &[f64], out: &mut [f64]) {
            out.iter_mut().zip(s).for_each(|(o, v)| *o = -v);
        }
    }

    #[test]
    fn zero_gap_returns_previous_state() {
        let p = vec![0.0; MlpField::n_params_for(2, 1)];
        let f = MlpField { d: 2, d_hidden: 1, params: &p };
        assert_eq!(evolve_gap(&f, &[0.3, 0.4], 1.0, 1.0, &SolveConfig::default()).unwrap(), vec![0.3, 0.4]);
        assert!(matches!(evolve_gap(&f, &[0.3, 0.4], 1.0, 0.5, &SolveConfig::default()), Err(Error::Ordering(_))));
    }

    #[test]
    fn linear_decay_over_a_unit_gap() {
        let u = evolve_gap(&Decay, &[1.0, -2.0], 2.0, 3.0, &SolveConfig::dopri5(1e-9, 1e-12)).unwrap();
        let e = (-1.0f64).exp();
        assert!((u[0] - e).abs() < 1e-6);
        assert!((u[1] + 2.0 * e).abs() < 1e-6);
    }

    #[test]
    fn zero_field_reduces_to_the_discrete_cell() {
        let cfg = RfwpConfig { rule: Rule::Delta, d_in: 2, d_model: 4, heads: 2, d_ode: 3, n_classes: 2, d_static: 0 };
        let m = RfwpModel::new(cfg).unwrap();
        let mut p = m.init_params(1).unwrap();
        for n in ODE_PARAMS {
            p.slice_mut(n).fill(0.0);
        }
        let rows = Tensor::new(vec![3, 2], vec![0.1, 0.5, -0.3, 0.2, 0.9, -0.7]).unwrap();
        let times = [0.0, 0.4, 1.1];
        let got = m.forward(&p, &rows, &times, None, &SolveConfig::default()).unwrap();

        let mut h = vec![0.0; 4];
        let mut w = vec![0.0; m.cell.spec.state_len()];
        for i in 0..3 {
            let (y, c) = m.cell.step(&p, &[rows.row(i), &h].concat(), &w).unwrap();
            w = c.w_new().to_vec();
            h = y;
        }
        let want = m.head.forward(&p, &h, None).unwrap().0;
        assert_eq!(got, want);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = RfwpConfig { rule: Rule::Delta, d_in: 2, d_model: 4, heads: 2, d_ode: 3, n_classes: 3, d_static: 0 };
        let m = RfwpModel::new(cfg).unwrap();
        let p = m.init_params(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = Tensor::new(vec![4, 2], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let times = [0.0, 0.3, 0.3, 1.2];
        let solver = SolveConfig::fixed(Method::Rk4, 20);
        let (_, g, _) = m.loss_and_grad(&p, &rows, &times, None, 2, &solver).unwrap();
        let rep = crate::adjoint::grad_check_fd(|q| m.loss_and_grad(q, &rows, &times, None, 2, &solver).map(|r| r.0), &p, &g, 1e-5).unwrap();
        assert!(rep.max_rel < 1e-5, "{}", rep.table());
    }
}
