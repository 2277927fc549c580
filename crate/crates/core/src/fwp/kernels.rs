//! Per-head fast weight writes `dW = β · a ⊗ b` and their vjps.
//!
//! `W` is a row-major `n × n` matrix; `p` and `q` are the two generated
//! vectors whose roles depend on the rule.

use crate::numcore::ops::{matvec_acc, matvec_t_acc, outer_acc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadWrite {
    /// `β p ⊗ q`
    Outer,
    /// `β p ⊗ (q − Wᵀp)`
    OjaRight,
    /// `β (p − Wᵀq) ⊗ q`
    OjaLeft,
    /// `β act(p − Wq) ⊗ q`, with `act = tanh` when `post`.
    Delta { post: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WriteVjp {
    pub g_beta: f64,
    pub g_p: Vec<f64>,
    pub g_q: Vec<f64>,
}

/// Residual vector and its outer-product partner for the current kernel.
fn residual(kind: HeadWrite, p: &[f64], q: &[f64], w: &[f64]) -> Vec<f64> {
    let n = p.len();
    match kind {
        HeadWrite::Outer => Vec::new(),
        HeadWrite::OjaRight => {
            let mut r = q.to_vec();
            let mut wtp = vec![0.0; n];
            matvec_t_acc(w, n, n, p, &mut wtp);
            r.iter_mut().zip(&wtp).for_each(|(a, b)| *a -= b);
            r
        }
        HeadWrite::OjaLeft => {
            let mut r = p.to_vec();
            let mut wtq = vec![0.0; n];
            matvec_t_acc(w, n, n, q, &mut wtq);
            r.iter_mut().zip(&wtq).for_each(|(a, b)| *a -= b);
            r
        }
        HeadWrite::Delta { post } => {
            let mut r = p.to_vec();
            let mut wq = vec![0.0; n];
            matvec_acc(w, n, n, q, &mut wq);
            r.iter_mut().zip(&wq).for_each(|(a, b)| *a -= b);
            if post {
                r.iter_mut().for_each(|v| *v = v.tanh());
            }
            r
        }
    }
}

/// Writes `dW` for one head into `out` (overwritten).
pub fn head_write(kind: HeadWrite, beta: f64, p: &[f64], q: &[f64], w: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    match kind {
        HeadWrite::Outer => outer_acc(beta, p, q, out),
        HeadWrite::OjaRight => outer_acc(beta, p, &residual(kind, p, q, w), out),
        HeadWrite::OjaLeft | HeadWrite::Delta { .. } => outer_acc(beta, &residual(kind, p, q, w), q, out),
    }
}

/// Pulls the cotangent `g` (shaped like `dW`) back to `β`, `p`, `q`, and
/// accumulates the state part into `d_w`.
pub fn head_write_vjp(kind: HeadWrite, beta: f64, p: &[f64], q: &[f64], w: &[f64], g: &[f64], d_w: &mut [f64]) -> WriteVjp {
    let n = p.len();
    // g·b and gᵀ·a for the outer product a ⊗ b
    let gb = |b: &[f64]| {
        let mut out = vec![0.0; n];
        matvec_acc(g, n, n, b, &mut out);
        out
    };
    let gta = |a: &[f64]| {
        let mut out = vec![0.0; n];
        matvec_t_acc(g, n, n, a, &mut out);
        out
    };
    match kind {
        HeadWrite::Outer => {
            let g_q_raw = gb(q);
            let g_beta = p.iter().zip(&g_q_raw).map(|(a, b)| a * b).sum();
            let g_p = g_q_raw.iter().map(|v| beta * v).collect();
            let g_q = gta(p).iter().map(|v| beta * v).collect();
            WriteVjp { g_beta, g_p, g_q }
        }
        HeadWrite::OjaRight => {
            let r = residual(kind, p, q, w);
            let gr_raw = gb(&r);
            let g_beta = p.iter().zip(&gr_raw).map(|(a, b)| a * b).sum();
            let mut g_p: Vec<f64> = gr_raw.iter().map(|v| beta * v).collect();
            let g_r: Vec<f64> = gta(p).iter().map(|v| beta * v).collect();
            // r = q − Wᵀp
            let mut wgr = vec![0.0; n];
            matvec_acc(w, n, n, &g_r, &mut wgr);
            g_p.iter_mut().zip(&wgr).for_each(|(a, b)| *a -= b);
            outer_acc(-1.0, p, &g_r, d_w);
            WriteVjp { g_beta, g_p, g_q: g_r }
        }
        HeadWrite::OjaLeft => {
            let r = residual(kind, p, q, w);
            let g_r_raw = gb(q);
            let g_beta = r.iter().zip(&g_r_raw).map(|(a, b)| a * b).sum();
            let g_r: Vec<f64> = g_r_raw.iter().map(|v| beta * v).collect();
            let mut g_q: Vec<f64> = gta(&r).iter().map(|v| beta * v).collect();
            // r = p − Wᵀq
            let mut wgr = vec![0.0; n];
            matvec_acc(w, n, n, &g_r, &mut wgr);
            g_q.iter_mut().zip(&wgr).for_each(|(a, b)| *a -= b);
            outer_acc(-1.0, q, &g_r, d_w);
            WriteVjp { g_beta, g_p: g_r, g_q }
        }
        HeadWrite::Delta { post } => {
            let e = residual(kind, p, q, w);
            let g_e_raw = gb(q);
            let g_beta = e.iter().zip(&g_e_raw).map(|(a, b)| a * b).sum();
            let g_a: Vec<f64> = g_e_raw
                .iter()
                .zip(&e)
                .map(|(g, ei)| beta * g * if post { 1.0 - ei * ei } else { 1.0 })
                .collect();
            let mut g_q: Vec<f64> = gta(&e).iter().map(|v| beta * v).collect();
            // a = p − Wq
            let mut wtga = vec![0.0; n];
            matvec_t_acc(w, n, n, &g_a, &mut wtga);
            g_q.iter_mut().zip(&wtga).for_each(|(a, b)| *a -= b);
            outer_acc(-1.0, &g_a, q, d_w);
            WriteVjp { g_beta, g_p: g_a, g_q }
        }
    }
}
