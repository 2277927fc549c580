//! Baseline neural CDE `dh = F_θ(h) dx`, where a one-hidden-layer tanh MLP
//! maps the state to a `d × d_in` matrix with a final `tanh`.

use super::head::Head;
use super::stack::Drive;
use crate::adjoint::{backward_adjoint_grid, DiffField};
use crate::error::Result;
use crate::numcore::ops::{cross_entropy, matvec_acc, matvec_t_acc, outer_acc};
use crate::numcore::{ParamInit, ParamStore};
use crate::solver::{ode_solve_grid, At, SolveConfig, SolveStats, VectorField};

/// `out = F · dx` for a row-major `d × d_in` matrix `F`.
pub fn vanilla_ncde_field(f: &[f64], d: usize, d_in: usize, dx: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    matvec_acc(f, d, d_in, dx, out);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NcdeMlp {
    pub d: usize,
    pub d_in: usize,
    pub d_mlp: usize,
}

const FIELD_PARAMS: [&str; 4] = ["f.w1", "f.b1", "f.w2", "f.b2"];

impl NcdeMlp {
    /// Entries of `f.w1, f.b1, f.w2, f.b2`.
    pub fn sizes(&self) -> [usize; 4] {
        let out = self.d * self.d_in;
        [self.d_mlp * self.d, self.d_mlp, out * self.d_mlp, out]
    }

    pub fn n_params(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Returns `(F(h), hidden activations)`.
    pub fn matrix(&self, params: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [s1, s2, s3, _] = self.sizes();
        let (w1, rest) = params.split_at(s1);
        let (b1, rest) = rest.split_at(s2);
        let (w2, b2) = rest.split_at(s3);
        let mut a = b1.to_vec();
        matvec_acc(w1, self.d_mlp, self.d, h, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        let mut f = b2.to_vec();
        matvec_acc(w2, self.d * self.d_in, self.d_mlp, &a, &mut f);
        f.iter_mut().for_each(|v| *v = v.tanh());
        (f, a)
    }
}

pub struct VanillaField<'a> {
    pub mlp: NcdeMlp,
    pub params: &'a [f64],
    pub drive: &'a dyn Drive,
}

impl VectorField for VanillaField<'_> {
    fn dim(&self) -> usize {
        self.mlp.d
    }

    fn eval(&self, at: At, state: &[f64], out: &mut [f64]) {
        let mut dx = vec![0.0; self.mlp.d_in];
        self.drive.dx_into(at, &mut dx);
        let (f, _) = self.mlp.matrix(self.params, state);
        vanilla_ncde_field(&f, self.mlp.d, self.mlp.d_in, &dx, out);
    }
}

impl DiffField for VanillaField<'_> {
    fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    fn vjp(&self, at: At, state: &[f64], cot: &[f64], d_state: &mut [f64], d_params: &mut [f64]) {
        let NcdeMlp { d, d_in, d_mlp } = self.mlp;
        let [s1, s2, s3, _] = self.mlp.sizes();
        let mut dx = vec![0.0; d_in];
        self.drive.dx_into(at, &mut dx);
        let (f, a) = self.mlp.matrix(self.params, state);
        let mut g_s2 = vec![0.0; d * d_in];
        outer_acc(1.0, cot, &dx, &mut g_s2);
        g_s2.iter_mut().zip(&f).for_each(|(g, v)| *g *= 1.0 - v * v);
        let (dw1, rest) = d_params.split_at_mut(s1);
        let (db1, rest) = rest.split_at_mut(s2);
        let (dw2, db2) = rest.split_at_mut(s3);
        outer_acc(1.0, &g_s2, &a, dw2);
        db2.iter_mut().zip(&g_s2).for_each(|(x, g)| *x += g);
        let w2 = &self.params[s1 + s2..s1 + s2 + s3];
        let mut g_a = vec![0.0; d_mlp];
        matvec_t_acc(w2, d * d_in, d_mlp, &g_s2, &mut g_a);
        g_a.iter_mut().zip(&a).for_each(|(g, v)| *g *= 1.0 - v * v);
        outer_acc(1.0, &g_a, state, dw1);
        db1.iter_mut().zip(&g_a).for_each(|(x, g)| *x += g);
        matvec_t_acc(&self.params[..s1], d_mlp, d, &g_a, d_state);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VanillaConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_mlp: usize,
    pub n_classes: usize,
    pub d_static: usize,
}

/// Classifier on `h(T)` with `h(t0) = W_init x(t0) + b_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaModel {
    pub cfg: VanillaConfig,
    mlp: NcdeMlp,
    head: Head,
}

impl VanillaModel {
    pub fn new(cfg: VanillaConfig) -> Self {
        Self {
            cfg,
            mlp: NcdeMlp { d: cfg.d_hidden, d_in: cfg.d_in, d_mlp: cfg.d_mlp },
            head: Head { d_feat: cfg.d_hidden, d_static: cfg.d_static, n_classes: cfg.n_classes },
        }
    }

    pub fn mlp(&self) -> NcdeMlp {
        self.mlp
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        let mut init = ParamInit::new(seed);
        let c = self.cfg;
        init.linear(&mut store, "init.w", c.d_hidden, c.d_in)?;
        init.zeros(&mut store, "init.b", c.d_hidden)?;
        init.linear(&mut store, "f.w1", c.d_mlp, c.d_hidden)?;
        init.zeros(&mut store, "f.b1", c.d_mlp)?;
        init.linear(&mut store, "f.w2", c.d_hidden * c.d_in, c.d_mlp)?;
        init.zeros(&mut store, "f.b2", c.d_hidden * c.d_in)?;
        self.head.init_params(&mut init, &mut store)?;
        Ok(store)
    }

    fn field_params(params: &ParamStore) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for n in FIELD_PARAMS {
            flat.extend_from_slice(params.get(n)?.data());
        }
        Ok(flat)
    }

    fn initial(&self, params: &ParamStore, drive: &dyn Drive) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x0 = vec![0.0; self.cfg.d_in];
        drive.x_into(At::new(drive.grid()[0], 0), &mut x0);
        let mut h0 = params.get("init.b")?.data().to_vec();
        matvec_acc(params.get("init.w")?.data(), self.cfg.d_hidden, self.cfg.d_in, &x0, &mut h0);
        Ok((h0, x0))
    }

    pub fn forward(&self, params: &ParamStore, drive: &dyn Drive, statics: Option<&[f64]>, solver: &SolveConfig) -> Result<(Vec<f64>, SolveStats)> {
        let flat = Self::field_params(params)?;
        let field = VanillaField { mlp: self.mlp, params: &flat, drive };
        let (h0, _) = self.initial(params, drive)?;
        let sol = ode_solve_grid(&field, &h0, drive.grid(), solver, false)?;
        Ok((self.head.forward(params, &sol.final_state, statics)?.0, sol.stats))
    }

    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        drive: &dyn Drive,
        statics: Option<&[f64]>,
        label: usize,
        solver: &SolveConfig,
    ) -> Result<(f64, ParamStore, Vec<f64>)> {
        let flat = Self::field_params(params)?;
        let field = VanillaField { mlp: self.mlp, params: &flat, drive };
        let (h0, x0) = self.initial(params, drive)?;
        let sol = ode_solve_grid(&field, &h0, drive.grid(), solver, false)?;
        let (logits, hc) = self.head.forward(params, &sol.final_state, statics)?;
        let (loss, g_logits) = cross_entropy(&logits, label);
        let mut grads = params.zeros_like();
        let g_h = self.head.vjp(params, &hc, &g_logits, &mut grads);
        let adj = backward_adjoint_grid(&field, &sol.final_state, &g_h, drive.grid(), solver)?;
        let mut off = 0;
        for n in FIELD_PARAMS {
            let g = grads.slice_mut(n);
            let len = g.len();
            g.iter_mut().zip(&adj.dl_dtheta[off..off + len]).for_each(|(a, b)| *a += b);
            off += len;
        }
        outer_acc(1.0, &adj.dl_dh0, &x0, grads.slice_mut("init.w"));
        grads.slice_mut("init.b").iter_mut().zip(&adj.dl_dh0).for_each(|(a, b)| *a += b);
        Ok((loss, grads, logits))
    }
}
