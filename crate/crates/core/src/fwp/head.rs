//! Linear classifier over the final features, with an optional tanh encoder
//! of static (per-sequence) features concatenated to its input.

use crate::error::{Error, Result};
use crate::numcore::ops::{matvec_acc, matvec_t_acc, outer_acc};
use crate::numcore::{ParamInit, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Head {
    pub d_feat: usize,
    pub d_static: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    statics: Vec<f64>,
}

impl Head {
    fn d_cls_in(&self) -> usize {
        if self.d_static > 0 {
            2 * self.d_feat
        } else {
            self.d_feat
        }
    }

    pub fn init_params(&self, init: &mut ParamInit, store: &mut ParamStore) -> Result<()> {
        if self.d_static > 0 {
            init.linear(store, "static.w", self.d_feat, self.d_static)?;
            init.zeros(store, "static.b", self.d_feat)?;
        }
        init.linear(store, "cls.w", self.n_classes, self.d_cls_in())?;
        init.zeros(store, "cls.b", self.n_classes)
    }

    pub fn forward(&self, params: &ParamStore, feat: &[f64], statics: Option<&[f64]>) -> Result<(Vec<f64>, HeadCache)> {
        let mut input = feat.to_vec();
        let mut st = Vec::new();
        match (self.d_static, statics) {
            (0, None) => {}
            (0, Some(s)) if s.is_empty() => {}
            (d, Some(s)) if s.len() == d && d > 0 => {
                let mut enc = params.get("static.b")?.data().to_vec();
                matvec_acc(params.get("static.w")?.data(), self.d_feat, d, s, &mut enc);
                enc.iter_mut().for_each(|v| *v = v.tanh());
                input.extend_from_slice(&enc);
                st = s.to_vec();
            }
            (d, s) => {
                return Err(Error::dim(
                    "classifier",
                    format!("model expects {d} static features, sequence has {}", s.map_or(0, <[f64]>::len)),
                ))
            }
        }
        let mut logits = params.get("cls.b")?.data().to_vec();
        matvec_acc(params.get("cls.w")?.data(), self.n_classes, self.d_cls_in(), &input, &mut logits);
        Ok((logits, HeadCache { input, statics: st }))
    }

    /// Accumulates head gradients into `grads` and returns `∂L/∂feat`.
    pub fn vjp(&self, params: &ParamStore, cache: &HeadCache, g_logits: &[f64], grads: &mut ParamStore) -> Vec<f64> {
        let k = self.d_cls_in();
        outer_acc(1.0, g_logits, &cache.input, grads.slice_mut("cls.w"));
        for (a, b) in grads.slice_mut("cls.b").iter_mut().zip(g_logits) {
            *a += b;
        }
        let mut g_in = vec![0.0; k];
        matvec_t_acc(params.slice("cls.w"), self.n_classes, k, g_logits, &mut g_in);
        if self.d_static > 0 {
            let enc = &cache.input[self.d_feat..];
            let g_pre: Vec<f64> = g_in[self.d_feat..].iter().zip(enc).map(|(g, e)| g * (1.0 - e * e)).collect();
            outer_acc(1.0, &g_pre, &cache.statics, grads.slice_mut("static.w"));
            for (a, b) in grads.slice_mut("static.b").iter_mut().zip(&g_pre) {
                *a += b;
            }
        }
        g_in.truncate(self.d_feat);
        g_in
    }
}
