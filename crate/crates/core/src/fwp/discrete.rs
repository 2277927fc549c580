//! Discrete-time fast weight programmers: the DeltaNet update and its
//! linear Transformer (pure Hebb) special case.
//!
//! Per head, with `φ = softmax`:
//! delta `W_n = W + σ(β)(v − Wφ(k)) ⊗ φ(k)`, hebb `W_n = W + v ⊗ φ(k)`,
//! and the output is `y_n = W_n φ(q)`.

use super::head::{Head, HeadCache};
use super::kernels::{head_write, head_write_vjp, HeadWrite};
use super::Rule;
use crate::error::{Error, Result};
use crate::numcore::ops::{
    cross_entropy, layer_norm, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, softmax_vjp_acc,
    LayerNormCache,
};
use crate::numcore::{ParamInit, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteSpec {
    pub rule: Rule,
    pub heads: usize,
    pub d_in: usize,
    pub d_model: usize,
    /// Squash values with `tanh` (the continuous fields do).
    pub value_tanh: bool,
}

impl DiscreteSpec {
    pub fn new(rule: Rule, heads: usize, d_in: usize, d_model: usize) -> Result<Self> {
        if rule == Rule::Oja {
            return Err(Error::Config("discrete cells support hebb and delta only".into()));
        }
        if heads == 0 || d_model == 0 || d_model % heads != 0 || d_in == 0 {
            return Err(Error::Config(format!("d_model {d_model} must be a positive multiple of heads {heads}")));
        }
        Ok(Self { rule, heads, d_in, d_model, value_tanh: false })
    }

    pub fn with_value_tanh(mut self, on: bool) -> Self {
        self.value_tanh = on;
        self
    }

    pub fn dh(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.dh() * self.dh()
    }

    /// Rows of `W_slow`: `β` per head, then `q`, `k`, `v`.
    pub fn rows(&self) -> usize {
        self.heads + 3 * self.d_model
    }

    fn kernel(&self) -> HeadWrite {
        match self.rule {
            Rule::Delta => HeadWrite::Delta { post: false },
            _ => HeadWrite::Outer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepCache {
    u: Vec<f64>,
    beta: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    w_prev: Vec<f64>,
    w_new: Vec<f64>,
}

fn per_head_softmax(x: &mut [f64], dh: usize) {
    for h in x.chunks_mut(dh) {
        softmax_in_place(h);
    }
}

/// One recursion step from raw input `x`; returns `(y, W_n, cache)`.
pub fn discrete_fwp_step_cached(spec: &DiscreteSpec, w_slow: &[f64], x: &[f64], w_prev: &[f64]) -> (Vec<f64>, StepCache) {
    let (h, d, dh) = (spec.heads, spec.d_model, spec.dh());
    let mut z = vec![0.0; spec.rows()];
    matvec_acc(w_slow, spec.rows(), spec.d_in, x, &mut z);
    let beta: Vec<f64> = match spec.rule {
        Rule::Delta => z[..h].iter().map(|v| sigmoid(*v)).collect(),
        _ => vec![1.0; h],
    };
    let mut q = z[h..h + d].to_vec();
    let mut k = z[h + d..h + 2 * d].to_vec();
    let mut v = z[h + 2 * d..].to_vec();
    per_head_softmax(&mut q, dh);
    per_head_softmax(&mut k, dh);
    if spec.value_tanh {
        v.iter_mut().for_each(|e| *e = e.tanh());
    }
    let mut w_new = w_prev.to_vec();
    let mut dw = vec![0.0; dh * dh];
    let mut y = vec![0.0; d];
    for hd in 0..h {
        let r = hd * dh..(hd + 1) * dh;
        let m = hd * dh * dh..(hd + 1) * dh * dh;
        head_write(spec.kernel(), beta[hd], &v[r.clone()], &k[r.clone()], &w_prev[m.clone()], &mut dw);
        w_new[m.clone()].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        matvec_acc(&w_new[m], dh, dh, &q[r.clone()], &mut y[r]);
    }
    let cache = StepCache { u: x.to_vec(), beta, q, k, v, w_prev: w_prev.to_vec(), w_new };
    (y, cache)
}

/// One recursion step: `(y_n, W_n)` from `x_n` and `W_{n−1}`.
pub fn discrete_fwp_step(spec: &DiscreteSpec, w_slow: &[f64], x: &[f64], w_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (y, c) = discrete_fwp_step_cached(spec, w_slow, x, w_prev);
    (y, c.w_new)
}

impl StepCache {
    pub fn w_new(&self) -> &[f64] {
        &self.w_new
    }
}

/// Backward through one step. Returns `∂L/∂W_{n−1}`; accumulates into
/// `d_w_slow` and (if given) `d_x`.
pub fn discrete_fwp_step_vjp(
    spec: &DiscreteSpec,
    w_slow: &[f64],
    cache: &StepCache,
    g_y: &[f64],
    g_w_new: &[f64],
    d_w_slow: &mut [f64],
    d_x: Option<&mut [f64]>,
) -> Vec<f64> {
    let (h, d, dh) = (spec.heads, spec.d_model, spec.dh());
    let mut g_z = vec![0.0; spec.rows()];
    let mut g_w_prev = g_w_new.to_vec();
    for hd in 0..h {
        let r = hd * dh..(hd + 1) * dh;
        let m = hd * dh * dh..(hd + 1) * dh * dh;
        let mut g_wn = g_w_new[m.clone()].to_vec();
        outer_acc(1.0, &g_y[r.clone()], &cache.q[r.clone()], &mut g_wn);
        let mut g_q = vec![0.0; dh];
        matvec_t_acc(&cache.w_new[m.clone()], dh, dh, &g_y[r.clone()], &mut g_q);
        // W_n = W + write(W)
        let mut acc = vec![0.0; dh * dh];
        let wv = head_write_vjp(
            spec.kernel(),
            cache.beta[hd],
            &cache.v[r.clone()],
            &cache.k[r.clone()],
            &cache.w_prev[m.clone()],
            &g_wn,
            &mut acc,
        );
        for ((gp, gn), a) in g_w_prev[m].iter_mut().zip(&g_wn).zip(&acc) {
            *gp = gn + a;
        }
        if spec.rule == Rule::Delta {
            let b = cache.beta[hd];
            g_z[hd] += wv.g_beta * b * (1.0 - b);
        }
        softmax_vjp_acc(&cache.q[r.clone()], &g_q, &mut g_z[h + r.start..h + r.end]);
        softmax_vjp_acc(&cache.k[r.clone()], &wv.g_q, &mut g_z[h + d + r.start..h + d + r.end]);
        let gv = &mut g_z[h + 2 * d + r.start..h + 2 * d + r.end];
        for ((o, g), v) in gv.iter_mut().zip(&wv.g_p).zip(&cache.v[r]) {
            *o += if spec.value_tanh { g * (1.0 - v * v) } else { *g };
        }
    }
    outer_acc(1.0, &g_z, &cache.u, d_w_slow);
    if let Some(dx) = d_x {
        matvec_t_acc(w_slow, spec.rows(), spec.d_in, &g_z, dx);
    }
    g_w_prev
}

/// A discrete cell with an input layer norm, stored under `{prefix}.*`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCell {
    pub spec: DiscreteSpec,
    prefix: String,
}

#[derive(Debug, Clone)]
pub struct CellCache {
    ln: LayerNormCache,
    step: StepCache,
}

impl CellCache {
    pub fn w_new(&self) -> &[f64] {
        &self.step.w_new
    }
}

impl DiscreteCell {
    pub fn new(spec: DiscreteSpec, prefix: &str) -> Self {
        Self { spec, prefix: prefix.to_string() }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init_params(&self, init: &mut ParamInit, store: &mut ParamStore) -> Result<()> {
        init.ones(store, &self.name("ln.gain"), self.spec.d_in)?;
        init.zeros(store, &self.name("ln.shift"), self.spec.d_in)?;
        init.linear(store, &self.name("w_slow"), self.spec.rows(), self.spec.d_in)
    }

    pub fn step(&self, params: &ParamStore, x: &[f64], w_prev: &[f64]) -> Result<(Vec<f64>, CellCache)> {
        if x.len() != self.spec.d_in {
            return Err(Error::dim("discrete cell", format!("input has {} channels, cell expects {}", x.len(), self.spec.d_in)));
        }
        let mut u = vec![0.0; x.len()];
        let ln = layer_norm(x, params.get(&self.name("ln.gain"))?.data(), params.get(&self.name("ln.shift"))?.data(), &mut u);
        let (y, step) = discrete_fwp_step_cached(&self.spec, params.get(&self.name("w_slow"))?.data(), &u, w_prev);
        Ok((y, CellCache { ln, step }))
    }

    /// Returns `(∂L/∂W_{n−1}, ∂L/∂x)`.
    pub fn step_vjp(&self, params: &ParamStore, cache: &CellCache, g_y: &[f64], g_w_new: &[f64], grads: &mut ParamStore) -> (Vec<f64>, Vec<f64>) {
        let mut g_u = vec![0.0; self.spec.d_in];
        let ws = self.name("w_slow");
        let g_w = discrete_fwp_step_vjp(&self.spec, params.slice(&ws), &cache.step, g_y, g_w_new, grads.slice_mut(&ws), Some(&mut g_u));
        let mut g_x = vec![0.0; self.spec.d_in];
        let mut dgain = vec![0.0; self.spec.d_in];
        let mut dshift = vec![0.0; self.spec.d_in];
        cache.ln.backward(params.slice(&self.name("ln.gain")), &g_u, Some(&mut g_x), &mut dgain, &mut dshift);
        add(grads.slice_mut(&self.name("ln.gain")), &dgain);
        add(grads.slice_mut(&self.name("ln.shift")), &dshift);
        (g_w, g_x)
    }
}

pub(crate) fn add(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteConfig {
    pub rule: Rule,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub d_static: usize,
}

/// Sequence classifier: the cell runs over the observation rows from empty
/// fast weights and the last output feeds the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    cell: DiscreteCell,
    head: Head,
}

impl DiscreteModel {
    pub fn new(cfg: DiscreteConfig) -> Result<Self> {
        let spec = DiscreteSpec::new(cfg.rule, cfg.heads, cfg.d_in, cfg.d_model)?;
        Ok(Self {
            cell: DiscreteCell::new(spec, "cell"),
            head: Head { d_feat: cfg.d_model, d_static: cfg.d_static, n_classes: cfg.n_classes },
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        let mut init = ParamInit::new(seed);
        self.cell.init_params(&mut init, &mut store)?;
        self.head.init_params(&mut init, &mut store)?;
        Ok(store)
    }

    fn run(&self, params: &ParamStore, rows: &Tensor, statics: Option<&[f64]>) -> Result<(Vec<CellCache>, Vec<f64>, HeadCache)> {
        let (n, _) = rows.dims2()?;
        if n == 0 {
            return Err(Error::dim("discrete model", "empty sequence".to_string()));
        }
        let mut w = vec![0.0; self.cell.spec.state_len()];
        let mut caches = Vec::with_capacity(n);
        let mut y = Vec::new();
        for i in 0..n {
            let (yi, c) = self.cell.step(params, rows.row(i), &w)?;
            w = c.step.w_new.clone();
            y = yi;
            caches.push(c);
        }
        let (logits, hc) = self.head.forward(params, &y, statics)?;
        Ok((caches, logits, hc))
    }

    pub fn forward(&self, params: &ParamStore, rows: &Tensor, statics: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.run(params, rows, statics)?.1)
    }

    /// Cross-entropy and its gradient by backpropagation through time.
    pub fn loss_and_grad(&self, params: &ParamStore, rows: &Tensor, statics: Option<&[f64]>, label: usize) -> Result<(f64, ParamStore, Vec<f64>)> {
        let (caches, logits, hc) = self.run(params, rows, statics)?;
        let (loss, g_logits) = cross_entropy(&logits, label);
        let mut grads = params.zeros_like();
        let mut g_y = self.head.vjp(params, &hc, &g_logits, &mut grads);
        let mut g_w = vec![0.0; self.cell.spec.state_len()];
        for c in caches.iter().rev() {
            g_w = self.cell.step_vjp(params, c, &g_y, &g_w, &mut grads).0;
            g_y.fill(0.0);
        }
        Ok((loss, grads, logits))
    }
}
