//! One FWP layer: parameter layout, slow projections, the learning-rule
//! field, the query readout and the feed-forward block.
//!
//! A layer's parameters live in one flat slice laid out by [`Slot`] order.

use std::ops::Range;

use super::kernels::{head_write, head_write_vjp, HeadWrite};
use super::{CdeInput, DeltaVariant, Family, Rule, RuleKind};
use crate::error::{Error, Result};
use crate::numcore::ops::{layer_norm, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, softmax_vjp_acc, LayerNormCache};
use crate::numcore::{ParamInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    FieldLnGain,
    FieldLnShift,
    /// Rows: `H` learning-rate logits, then `D` key rows, then `D` value rows.
    WSlow,
    QueryLnGain,
    QueryLnShift,
    Wq,
    FfnLnGain,
    FfnLnShift,
    W1,
    B1,
    W2,
    B2,
}

impl Slot {
    pub const ALL: [Slot; 12] = [
        Slot::FieldLnGain,
        Slot::FieldLnShift,
        Slot::WSlow,
        Slot::QueryLnGain,
        Slot::QueryLnShift,
        Slot::Wq,
        Slot::FfnLnGain,
        Slot::FfnLnShift,
        Slot::W1,
        Slot::B1,
        Slot::W2,
        Slot::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::FieldLnGain => "field_ln.gain",
            Slot::FieldLnShift => "field_ln.shift",
            Slot::WSlow => "w_slow",
            Slot::QueryLnGain => "query_ln.gain",
            Slot::QueryLnShift => "query_ln.shift",
            Slot::Wq => "w_q",
            Slot::FfnLnGain => "ffn_ln.gain",
            Slot::FfnLnShift => "ffn_ln.shift",
            Slot::W1 => "ffn.w1",
            Slot::B1 => "ffn.b1",
            Slot::W2 => "ffn.w2",
            Slot::B2 => "ffn.b2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub family: Family,
    pub rule: RuleKind,
    offsets: [usize; 13],
}

impl LayerSpec {
    pub fn new(index: usize, d_in: usize, d_model: usize, heads: usize, d_ff: usize, family: Family, rule: RuleKind) -> Result<Self> {
        if heads == 0 || d_model == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("d_model {d_model} must be a positive multiple of heads {heads}")));
        }
        if d_in < 2 || d_model < 2 {
            return Err(Error::Config(format!(
                "layer {index}: layer norm needs at least 2 features (d_in {d_in}, d_model {d_model})"
            )));
        }
        if d_ff == 0 {
            return Err(Error::Config("d_ff must be at least 1".into()));
        }
        rule.validate(family)?;
        let mut spec = Self { index, d_in, d_model, heads, d_ff, family, rule, offsets: [0; 13] };
        for (i, s) in Slot::ALL.iter().enumerate() {
            spec.offsets[i + 1] = spec.offsets[i] + spec.slot_shape(*s).iter().product::<usize>();
        }
        Ok(spec)
    }

    pub fn dh(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.dh() * self.dh()
    }

    pub fn n_params(&self) -> usize {
        self.offsets[12]
    }

    /// Entries of `W_slow` and `W_q` for the given widths, without building a
    /// layer (so degenerate widths can still be counted).
    pub fn slow_weight_count(d_in: usize, d_model: usize, heads: usize) -> usize {
        (heads + 2 * d_model) * d_in + d_model * d_in
    }

    pub fn slot_shape(&self, s: Slot) -> Vec<usize> {
        let (d, i) = (self.d_model, self.d_in);
        match s {
            Slot::FieldLnGain | Slot::FieldLnShift | Slot::QueryLnGain | Slot::QueryLnShift => vec![i],
            Slot::WSlow => vec![self.heads + 2 * d, i],
            Slot::Wq => vec![d, i],
            Slot::FfnLnGain | Slot::FfnLnShift | Slot::B2 => vec![d],
            Slot::W1 => vec![self.d_ff, d],
            Slot::B1 => vec![self.d_ff],
            Slot::W2 => vec![d, self.d_ff],
        }
    }

    pub fn range(&self, s: Slot) -> Range<usize> {
        let i = Slot::ALL.iter().position(|x| *x == s).expect("slot");
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn param_name(&self, s: Slot) -> String {
        format!("l{}.{}", self.index, s.name())
    }

    /// Adds this layer's parameters to `store` in slot order.
    pub fn init_params(&self, init: &mut ParamInit, store: &mut ParamStore) -> Result<()> {
        for s in Slot::ALL {
            let name = self.param_name(s);
            let shape = self.slot_shape(s);
            match s {
                Slot::FieldLnGain | Slot::QueryLnGain | Slot::FfnLnGain => init.ones(store, &name, shape[0])?,
                Slot::FieldLnShift | Slot::QueryLnShift | Slot::FfnLnShift | Slot::B1 | Slot::B2 => init.zeros(store, &name, shape[0])?,
                Slot::WSlow | Slot::Wq | Slot::W1 | Slot::W2 => init.linear(store, &name, shape[0], shape[1])?,
            }
        }
        Ok(())
    }

    /// Copies this layer's parameters out of `store` in slot order.
    pub fn gather(&self, store: &ParamStore, out: &mut Vec<f64>) -> Result<()> {
        for s in Slot::ALL {
            let t = store.get(&self.param_name(s))?;
            if t.shape() != self.slot_shape(s).as_slice() {
                return Err(Error::Misaligned(format!(
                    "{} has shape {:?}, expected {:?}",
                    self.param_name(s),
                    t.shape(),
                    self.slot_shape(s)
                )));
            }
            out.extend_from_slice(t.data());
        }
        Ok(())
    }

    /// Adds a flat gradient laid out like [`LayerSpec::gather`] into a store.
    pub fn scatter_add(&self, flat: &[f64], grads: &mut ParamStore) {
        for s in Slot::ALL {
            let dst = grads.slice_mut(&self.param_name(s));
            for (d, v) in dst.iter_mut().zip(&flat[self.range(s)]) {
                *d += v;
            }
        }
    }

    fn p<'a>(&self, params: &'a [f64], s: Slot) -> &'a [f64] {
        &params[self.range(s)]
    }

    fn value_tanh(&self) -> bool {
        !(self.rule.rule == Rule::Delta && self.rule.delta_variant == DeltaVariant::Post)
    }

    fn dx_only(&self) -> bool {
        self.family == Family::Cde && self.rule.cde_input == CdeInput::DxOnly
    }

    pub fn write_kind(&self) -> HeadWrite {
        let post = self.rule.delta_variant == DeltaVariant::Post;
        match (self.family, self.rule.rule) {
            (Family::Direct, Rule::Hebb) | (Family::Cde, Rule::Hebb) => HeadWrite::Outer,
            (Family::Direct, Rule::Oja) => HeadWrite::OjaRight,
            (Family::Cde, Rule::Oja) => HeadWrite::OjaLeft,
            (_, Rule::Delta) => HeadWrite::Delta { post },
        }
    }

    /// Whether keys index the rows of `W`, so reads go through `Wᵀ`.
    pub fn read_transposed(&self) -> bool {
        match self.rule.rule {
            Rule::Hebb => !(self.family == Family::Cde && self.rule.hebb_kv_swap),
            Rule::Oja => self.family == Family::Cde,
            Rule::Delta => false,
        }
    }

    /// Whether the query is generated from `x′` rather than `x`.
    pub fn query_from_dx(&self) -> bool {
        self.family == Family::Cde && (self.dx_only() || !self.read_transposed())
    }

    /// Input feeding the LN-side projections (β, softmax keys, tanh values).
    pub fn x_side<'a>(&self, x: &'a [f64], dx: &'a [f64]) -> &'a [f64] {
        if self.dx_only() {
            dx
        } else {
            x
        }
    }

    pub fn query_input<'a>(&self, x: &'a [f64], dx: &'a [f64]) -> &'a [f64] {
        if self.query_from_dx() {
            dx
        } else {
            x
        }
    }
}

/// Slow-network outputs for one evaluation.
#[derive(Debug, Clone)]
pub struct Projections {
    /// `σ(β)` per head.
    pub beta: Vec<f64>,
    /// Keys from the LN side, softmax within each head.
    pub kx: Vec<f64>,
    /// Values from the LN side: `tanh`, or raw for post-delta.
    pub vx: Vec<f64>,
    /// Linear projections of `x′` (CDE only, otherwise empty).
    pub kd: Vec<f64>,
    pub vd: Vec<f64>,
    z: Vec<f64>,
    ln: LayerNormCache,
    dx: Vec<f64>,
}

/// Generates `σ(β)`, keys and values from `u = x_side` (and `x′` for CDE layers).
pub fn slow_projections(spec: &LayerSpec, params: &[f64], u: &[f64], dx: Option<&[f64]>) -> Projections {
    let (h, d, i) = (spec.heads, spec.d_model, spec.d_in);
    let mut z = vec![0.0; i];
    let ln = layer_norm(u, spec.p(params, Slot::FieldLnGain), spec.p(params, Slot::FieldLnShift), &mut z);
    let w = spec.p(params, Slot::WSlow);
    let mut logits = vec![0.0; h + 2 * d];
    matvec_acc(w, h + 2 * d, i, &z, &mut logits);
    let beta = logits[..h].iter().map(|v| sigmoid(*v)).collect();
    let mut kx = logits[h..h + d].to_vec();
    for head in kx.chunks_mut(spec.dh()) {
        softmax_in_place(head);
    }
    let mut vx = logits[h + d..].to_vec();
    if spec.value_tanh() {
        vx.iter_mut().for_each(|v| *v = v.tanh());
    }
    let (mut kd, mut vd) = (Vec::new(), Vec::new());
    let mut dx_copy = Vec::new();
    if spec.family == Family::Cde {
        let dx = dx.expect("CDE layer needs x′");
        kd = vec![0.0; d];
        vd = vec![0.0; d];
        matvec_acc(&w[h * i..(h + d) * i], d, i, dx, &mut kd);
        matvec_acc(&w[(h + d) * i..], d, i, dx, &mut vd);
        dx_copy = dx.to_vec();
    }
    Projections { beta, kx, vx, kd, vd, z, ln, dx: dx_copy }
}

/// Which projection plays `p` and which plays `q` in the head kernel.
#[derive(Clone, Copy)]
enum Src {
    Kx,
    Vx,
    Kd,
    Vd,
}

fn roles(spec: &LayerSpec) -> (Src, Src) {
    match (spec.family, spec.rule.rule) {
        (Family::Direct, Rule::Hebb) => (Src::Kx, Src::Vx),
        (Family::Direct, Rule::Oja) | (Family::Direct, Rule::Delta) => (Src::Vx, Src::Kx),
        (Family::Cde, Rule::Hebb) if spec.rule.hebb_kv_swap => (Src::Vx, Src::Kd),
        (Family::Cde, Rule::Hebb) | (Family::Cde, Rule::Oja) => (Src::Kx, Src::Vd),
        (Family::Cde, Rule::Delta) => (Src::Vx, Src::Kd),
    }
}

impl Projections {
    fn get(&self, s: Src) -> &[f64] {
        match s {
            Src::Kx => &self.kx,
            Src::Vx => &self.vx,
            Src::Kd => &self.kd,
            Src::Vd => &self.vd,
        }
    }
}

/// `dW/dt` for all heads of a layer.
pub fn layer_field(spec: &LayerSpec, proj: &Projections, w: &[f64], out: &mut [f64]) {
    let dh = spec.dh();
    let (ps, qs) = roles(spec);
    let kind = spec.write_kind();
    let (p, q) = (proj.get(ps), proj.get(qs));
    for hd in 0..spec.heads {
        let v = hd * dh..(hd + 1) * dh;
        let m = hd * dh * dh..(hd + 1) * dh * dh;
        head_write(kind, proj.beta[hd], &p[v.clone()], &q[v], &w[m.clone()], &mut out[m]);
    }
}

/// Pulls a cotangent of `dW/dt` back to the state, the layer parameters and
/// (when requested) the LN-side input.
#[allow(clippy::too_many_arguments)]
pub fn layer_field_vjp(
    spec: &LayerSpec,
    params: &[f64],
    proj: &Projections,
    w: &[f64],
    g: &[f64],
    d_w: &mut [f64],
    d_params: &mut [f64],
    d_u: Option<&mut [f64]>,
) {
    let (h, d, i, dh) = (spec.heads, spec.d_model, spec.d_in, spec.dh());
    let (ps, qs) = roles(spec);
    let kind = spec.write_kind();
    let (p, q) = (proj.get(ps), proj.get(qs));
    let mut g_src = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut g_logits = vec![0.0; h + 2 * d];
    for hd in 0..h {
        let v = hd * dh..(hd + 1) * dh;
        let m = hd * dh * dh..(hd + 1) * dh * dh;
        let r = head_write_vjp(kind, proj.beta[hd], &p[v.clone()], &q[v.clone()], &w[m.clone()], &g[m.clone()], &mut d_w[m]);
        let b = proj.beta[hd];
        g_logits[hd] = r.g_beta * b * (1.0 - b);
        for (a, x) in g_src[ps as usize][v.clone()].iter_mut().zip(&r.g_p) {
            *a += x;
        }
        for (a, x) in g_src[qs as usize][v].iter_mut().zip(&r.g_q) {
            *a += x;
        }
    }
    let [g_kx, g_vx, g_kd, g_vd] = &g_src;
    for hd in 0..h {
        let v = hd * dh..(hd + 1) * dh;
        softmax_vjp_acc(&proj.kx[v.clone()], &g_kx[v.clone()], &mut g_logits[h + v.start..h + v.end]);
    }
    for j in 0..d {
        let gv = g_vx[j];
        g_logits[h + d + j] = if spec.value_tanh() { gv * (1.0 - proj.vx[j] * proj.vx[j]) } else { gv };
    }
    let wr = spec.range(Slot::WSlow);
    {
        let dws = &mut d_params[wr.clone()];
        outer_acc(1.0, &g_logits, &proj.z, dws);
        if spec.family == Family::Cde {
            outer_acc(1.0, g_kd, &proj.dx, &mut dws[h * i..(h + d) * i]);
            outer_acc(1.0, g_vd, &proj.dx, &mut dws[(h + d) * i..]);
        }
    }
    let mut g_z = vec![0.0; i];
    matvec_t_acc(&params[wr], h + 2 * d, i, &g_logits, &mut g_z);
    let gain = spec.p(params, Slot::FieldLnGain);
    let lr = spec.range(Slot::FieldLnGain).start..spec.range(Slot::FieldLnShift).end;
    let (dg, ds) = d_params[lr].split_at_mut(i);
    proj.ln.backward(gain, &g_z, d_u, dg, ds);
}

#[derive(Debug, Clone)]
pub struct ReadCache {
    ln: LayerNormCache,
    zq: Vec<f64>,
    q: Vec<f64>,
}

/// `y = W q` or `Wᵀ q` per head with `q = softmax(W_q LN(r))`.
pub fn query_readout(spec: &LayerSpec, params: &[f64], w: &[f64], r: &[f64]) -> (Vec<f64>, ReadCache) {
    let (d, i, dh) = (spec.d_model, spec.d_in, spec.dh());
    let mut zq = vec![0.0; i];
    let ln = layer_norm(r, spec.p(params, Slot::QueryLnGain), spec.p(params, Slot::QueryLnShift), &mut zq);
    let mut q = vec![0.0; d];
    matvec_acc(spec.p(params, Slot::Wq), d, i, &zq, &mut q);
    for head in q.chunks_mut(dh) {
        softmax_in_place(head);
    }
    let mut y = vec![0.0; d];
    for hd in 0..spec.heads {
        let v = hd * dh..(hd + 1) * dh;
        let m = &w[hd * dh * dh..(hd + 1) * dh * dh];
        if spec.read_transposed() {
            matvec_t_acc(m, dh, dh, &q[v.clone()], &mut y[v]);
        } else {
            matvec_acc(m, dh, dh, &q[v.clone()], &mut y[v]);
        }
    }
    (y, ReadCache { ln, zq, q })
}

pub fn query_readout_vjp(
    spec: &LayerSpec,
    params: &[f64],
    w: &[f64],
    cache: &ReadCache,
    gy: &[f64],
    d_w: &mut [f64],
    d_params: &mut [f64],
    d_r: Option<&mut [f64]>,
) {
    let (d, i, dh) = (spec.d_model, spec.d_in, spec.dh());
    let mut g_ql = vec![0.0; d];
    for hd in 0..spec.heads {
        let v = hd * dh..(hd + 1) * dh;
        let mr = hd * dh * dh..(hd + 1) * dh * dh;
        let mut g_q = vec![0.0; dh];
        if spec.read_transposed() {
            outer_acc(1.0, &cache.q[v.clone()], &gy[v.clone()], &mut d_w[mr.clone()]);
            matvec_acc(&w[mr], dh, dh, &gy[v.clone()], &mut g_q);
        } else {
            outer_acc(1.0, &gy[v.clone()], &cache.q[v.clone()], &mut d_w[mr.clone()]);
            matvec_t_acc(&w[mr], dh, dh, &gy[v.clone()], &mut g_q);
        }
        softmax_vjp_acc(&cache.q[v.clone()], &g_q, &mut g_ql[v]);
    }
    outer_acc(1.0, &g_ql, &cache.zq, &mut d_params[spec.range(Slot::Wq)]);
    let mut g_z = vec![0.0; i];
    matvec_t_acc(spec.p(params, Slot::Wq), d, i, &g_ql, &mut g_z);
    let lr = spec.range(Slot::QueryLnGain).start..spec.range(Slot::QueryLnShift).end;
    let (dg, ds) = d_params[lr].split_at_mut(i);
    cache.ln.backward(spec.p(params, Slot::QueryLnGain), &g_z, d_r, dg, ds);
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    ln: LayerNormCache,
    z: Vec<f64>,
    a: Vec<f64>,
}

/// `y + W2 tanh(W1 LN(y) + b1) + b2`.
pub fn ffn_block(spec: &LayerSpec, params: &[f64], y: &[f64]) -> (Vec<f64>, FfnCache) {
    let (d, f) = (spec.d_model, spec.d_ff);
    let mut z = vec![0.0; d];
    let ln = layer_norm(y, spec.p(params, Slot::FfnLnGain), spec.p(params, Slot::FfnLnShift), &mut z);
    let mut a = spec.p(params, Slot::B1).to_vec();
    matvec_acc(spec.p(params, Slot::W1), f, d, &z, &mut a);
    a.iter_mut().for_each(|v| *v = v.tanh());
    let mut out: Vec<f64> = y.iter().zip(spec.p(params, Slot::B2)).map(|(a, b)| a + b).collect();
    matvec_acc(spec.p(params, Slot::W2), d, f, &a, &mut out);
    (out, FfnCache { ln, z, a })
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the input.
pub fn ffn_block_vjp(spec: &LayerSpec, params: &[f64], cache: &FfnCache, g_out: &[f64], d_params: &mut [f64]) -> Vec<f64> {
    let (d, f) = (spec.d_model, spec.d_ff);
    for (a, b) in d_params[spec.range(Slot::B2)].iter_mut().zip(g_out) {
        *a += b;
    }
    outer_acc(1.0, g_out, &cache.a, &mut d_params[spec.range(Slot::W2)]);
    let mut g_a = vec![0.0; f];
    matvec_t_acc(spec.p(params, Slot::W2), d, f, g_out, &mut g_a);
    for (g, a) in g_a.iter_mut().zip(&cache.a) {
        *g *= 1.0 - a * a;
    }
    for (a, b) in d_params[spec.range(Slot::B1)].iter_mut().zip(&g_a) {
        *a += b;
    }
    outer_acc(1.0, &g_a, &cache.z, &mut d_params[spec.range(Slot::W1)]);
    let mut g_z = vec![0.0; d];
    matvec_t_acc(spec.p(params, Slot::W1), f, d, &g_a, &mut g_z);
    let mut g_y = g_out.to_vec();
    let lr = spec.range(Slot::FfnLnGain).start..spec.range(Slot::FfnLnShift).end;
    let (dg, ds) = d_params[lr].split_at_mut(d);
    cache.ln.backward(spec.p(params, Slot::FfnLnGain), &g_z, Some(&mut g_y), dg, ds);
    g_y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(family: Family, rule: RuleKind) -> LayerSpec {
        LayerSpec::new(0, 3, 4, 2, 5, family, rule).unwrap()
    }

    fn rand_params(spec: &LayerSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: Vec<f64> = (0..spec.n_params()).map(|_| rng.gen_range(-0.8..0.8)).collect();
        for s in [Slot::FieldLnGain, Slot::QueryLnGain, Slot::FfnLnGain] {
            p[spec.range(s)].iter_mut().for_each(|v| *v += 1.0);
        }
        p
    }

    fn all_kinds() -> Vec<(Family, RuleKind)> {
        let mut v = Vec::new();
        for fam in [Family::Direct, Family::Cde] {
            for rule in [Rule::Hebb, Rule::Oja, Rule::Delta] {
                v.push((fam, RuleKind::new(rule)));
            }
            v.push((fam, RuleKind::new(Rule::Delta).with_delta(DeltaVariant::Post)));
        }
        v.push((Family::Cde, RuleKind::new(Rule::Hebb).with_swap(true)));
        for rule in [Rule::Hebb, Rule::Oja, Rule::Delta] {
            v.push((Family::Cde, RuleKind::new(rule).with_cde_input(CdeInput::DxOnly)));
        }
        v
    }

    fn field_out(spec: &LayerSpec, params: &[f64], w: &[f64], x: &[f64], dx: &[f64]) -> Vec<f64> {
        let proj = slow_projections(spec, params, spec.x_side(x, dx), Some(dx));
        let mut out = vec![0.0; spec.state_len()];
        layer_field(spec, &proj, w, &mut out);
        out
    }

    #[test]
    fn slow_weight_count_matches_layout() {
        for (d_in, d, h) in [(3, 4, 2), (7, 16, 4), (32, 8, 1)] {
            let s = LayerSpec::new(0, d_in, d, h, 5, Family::Cde, RuleKind::new(Rule::Delta)).unwrap();
            assert_eq!(LayerSpec::slow_weight_count(d_in, d, h), s.range(Slot::WSlow).len() + s.range(Slot::Wq).len());
        }
    }

    #[test]
    fn zero_slow_weights() {
        let s = spec(Family::Direct, RuleKind::new(Rule::Hebb));
        let mut p = rand_params(&s, 1);
        p[s.range(Slot::WSlow)].fill(0.0);
        let proj = slow_projections(&s, &p, &[0.3, -1.0, 2.0], None);
        assert!(proj.beta.iter().all(|b| *b == 0.5));
        assert!(proj.kx.iter().all(|k| *k == 0.5));
        assert!(proj.vx.iter().all(|v| *v == 0.0));
        let out = field_out(&s, &p, &vec![0.3; s.state_len()], &[0.3, -1.0, 2.0], &[0.0; 3]);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn keys_normalize_per_head() {
        let s = spec(Family::Direct, RuleKind::new(Rule::Delta));
        let p = rand_params(&s, 2);
        let proj = slow_projections(&s, &p, &[1.0, 5.0, -3.0], None);
        for head in proj.kx.chunks(2) {
            assert!((head.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_control_writes_nothing() {
        for (fam, rule) in all_kinds().into_iter().filter(|(f, _)| *f == Family::Cde) {
            let s = spec(fam, rule);
            let p = rand_params(&s, 3);
            let w: Vec<f64> = (0..s.state_len()).map(|i| 0.1 * i as f64).collect();
            let out = field_out(&s, &p, &w, &[0.2, 0.7, -0.4], &[0.0; 3]);
            assert!(out.iter().all(|v| *v == 0.0), "{rule:?}");
        }
    }

    #[test]
    fn cde_hebb_is_linear_in_dx() {
        let s = spec(Family::Cde, RuleKind::new(Rule::Hebb));
        let p = rand_params(&s, 4);
        let w = vec![0.2; s.state_len()];
        let x = [0.2, 0.7, -0.4];
        let dx = [0.5, -1.5, 0.25];
        let base = field_out(&s, &p, &w, &x, &dx);
        let scaled = field_out(&s, &p, &w, &x, &dx.map(|v| -2.5 * v));
        for (a, b) in base.iter().zip(&scaled) {
            assert!((-2.5 * a - b).abs() < 1e-12);
        }
    }

    /// Central-difference oracle for every vjp in the layer.
    #[test]
    fn vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (fam, rule) in all_kinds() {
            let s = spec(fam, rule);
            let p = rand_params(&s, 5);
            let w: Vec<f64> = (0..s.state_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dx: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..s.state_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gy: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

            // L = ⟨g, field⟩ + ⟨gy, ffn(readout(W, r))⟩, r = x (only x is differentiated)
            let loss = |p: &[f64], w: &[f64], x: &[f64]| {
                let f = field_out(&s, p, w, x, &dx);
                let r = s.query_input(x, &dx).to_vec();
                let (y, _) = query_readout(&s, p, w, &r);
                let (o, _) = ffn_block(&s, p, &y);
                f.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() + o.iter().zip(&gy).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut d_w = vec![0.0; s.state_len()];
            let mut d_p = vec![0.0; s.n_params()];
            let mut d_x = vec![0.0; 3];
            let proj = slow_projections(&s, &p, s.x_side(&x, &dx), Some(&dx));
            let x_diff = !s.dx_only();
            layer_field_vjp(&s, &p, &proj, &w, &g, &mut d_w, &mut d_p, if x_diff { Some(&mut d_x) } else { None });
            let r_is_x = !s.query_from_dx();
            let r = s.query_input(&x, &dx).to_vec();
            let (y, rc) = query_readout(&s, &p, &w, &r);
            let (_, fc) = ffn_block(&s, &p, &y);
            let g_y = ffn_block_vjp(&s, &p, &fc, &gy, &mut d_p);
            query_readout_vjp(&s, &p, &w, &rc, &g_y, &mut d_w, &mut d_p, if r_is_x { Some(&mut d_x) } else { None });

            let h = 1e-6;
            let check = |name: &str, i: usize, analytic: f64, f: &dyn Fn(f64) -> f64| {
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "{fam:?} {rule:?} {name}[{i}]: fd {fd} vs {analytic}");
            };
            for i in 0..p.len() {
                check("param", i, d_p[i], &|e| {
                    let mut pp = p.clone();
                    pp[i] += e;
                    loss(&pp, &w, &x)
                });
            }
            for i in 0..w.len() {
                check("state", i, d_w[i], &|e| {
                    let mut ww = w.clone();
                    ww[i] += e;
                    loss(&p, &ww, &x)
                });
            }
            for i in 0..3 {
                check("x", i, d_x[i], &|e| {
                    let mut xx = x.clone();
                    xx[i] += e;
                    loss(&p, &w, &xx)
                });
            }
        }
    }

    #[test]
    fn ffn_identity_and_shape() {
        let s = spec(Family::Direct, RuleKind::new(Rule::Hebb));
        let mut p = rand_params(&s, 6);
        p[s.range(Slot::W2)].fill(0.0);
        p[s.range(Slot::B2)].fill(0.0);
        let y = [0.3, -0.2, 1.0, 0.5];
        let (o, _) = ffn_block(&s, &p, &y);
        assert_eq!(o, y);

        // linear regime: out(2y) − out(0) ≈ 2 (out(y) − out(0))
        let mut p = rand_params(&s, 7);
        p[s.range(Slot::W1)].iter_mut().for_each(|v| *v *= 1e-4);
        p[s.range(Slot::B1)].fill(0.0);
        p[s.range(Slot::FfnLnShift)].fill(0.0);
        let small = [0.01, -0.02, 0.005, 0.0];
        let (o0, _) = ffn_block(&s, &p, &[0.0; 4]);
        let (o1, _) = ffn_block(&s, &p, &small);
        let (o2, _) = ffn_block(&s, &p, &small.map(|v| 2.0 * v));
        for j in 0..4 {
            let (d1, d2) = (o1[j] - o0[j], o2[j] - o0[j]);
            assert!((d2 - 2.0 * d1).abs() <= 0.05 * (2.0 * d1).abs().max(1e-3), "{j}: {d1} {d2}");
        }
        assert_eq!(o2.len(), 4);
    }

    #[test]
    fn readout_examples() {
        let s = spec(Family::Direct, RuleKind::new(Rule::Hebb));
        let p = rand_params(&s, 8);
        let (y, _) = query_readout(&s, &p, &vec![0.0; s.state_len()], &[0.1, 0.2, 0.3]);
        assert!(y.iter().all(|v| *v == 0.0));
    }
}
