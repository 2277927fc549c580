//! Sequence classifier built on a continuous-time FWP stack.

use super::head::{Head, HeadCache};
use super::layer::LayerSpec;
use super::stack::{Drive, StackField};
use super::{Family, RuleKind};
use crate::adjoint::backward_adjoint_grid;
use crate::error::{Error, Result};
use crate::numcore::ops::cross_entropy;
use crate::numcore::{ParamInit, ParamStore};
use crate::solver::{ode_solve_grid, SolveConfig, SolveStats};

#[derive(Debug, Clone, PartialEq)]
pub struct FwpConfig {
    /// Field family of the bottom layer; upper layers are always direct.
    pub family: Family,
    pub rule: RuleKind,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub n_classes: usize,
    pub d_static: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FwpModel {
    cfg: FwpConfig,
    specs: Vec<LayerSpec>,
    head: Head,
}

/// Everything a forward pass leaves behind for the backward pass.
pub struct FwpForward {
    pub logits: Vec<f64>,
    pub final_state: Vec<f64>,
    pub stats: SolveStats,
    field_params: Vec<f64>,
    head_cache: HeadCache,
}

impl FwpModel {
    pub fn new(cfg: FwpConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        if cfg.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.n_classes)));
        }
        let mut specs = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (d_in, fam) = if l == 0 { (cfg.d_in, cfg.family) } else { (cfg.d_model, Family::Direct) };
            let rule = if l == 0 { cfg.rule } else { cfg.rule.with_swap(false).with_cde_input(super::CdeInput::XAndDx) };
            specs.push(LayerSpec::new(l, d_in, cfg.d_model, cfg.heads, cfg.d_ff, fam, rule)?);
        }
        let head = Head { d_feat: cfg.d_model, d_static: cfg.d_static, n_classes: cfg.n_classes };
        Ok(Self { cfg, specs, head })
    }

    pub fn config(&self) -> &FwpConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new(seed);
        let mut init = ParamInit::new(seed);
        for s in &self.specs {
            s.init_params(&mut init, &mut store)?;
        }
        self.head.init_params(&mut init, &mut store)?;
        Ok(store)
    }

    fn field_params(&self, params: &ParamStore) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for s in &self.specs {
            s.gather(params, &mut flat)?;
        }
        Ok(flat)
    }

    /// Integrates the stack from empty fast weights and classifies at `T`.
    pub fn forward(&self, params: &ParamStore, drive: &dyn Drive, statics: Option<&[f64]>, solver: &SolveConfig) -> Result<FwpForward> {
        let field_params = self.field_params(params)?;
        let field = StackField::new(&self.specs, &field_params, drive)?;
        let w0 = vec![0.0; field.state_len()];
        let sol = ode_solve_grid(&field, &w0, drive.grid(), solver, false)?;
        let top = field.readout(drive.terminal(), &sol.final_state);
        let (logits, head_cache) = self.head.forward(params, &top.y, statics)?;
        Ok(FwpForward { logits, final_state: sol.final_state, stats: sol.stats, field_params, head_cache })
    }

    /// Cross-entropy loss and its gradient via the continuous adjoint.
    pub fn loss_and_grad(
        &self,
        params: &ParamStore,
        drive: &dyn Drive,
        statics: Option<&[f64]>,
        label: usize,
        solver: &SolveConfig,
    ) -> Result<(f64, ParamStore, Vec<f64>)> {
        if label >= self.cfg.n_classes {
            return Err(Error::Config(format!("label {label} outside {} classes", self.cfg.n_classes)));
        }
        let fwd = self.forward(params, drive, statics, solver)?;
        let (loss, g_logits) = cross_entropy(&fwd.logits, label);
        let mut grads = params.zeros_like();
        let g_top = self.head.vjp(params, &fwd.head_cache, &g_logits, &mut grads);

        let field = StackField::new(&self.specs, &fwd.field_params, drive)?;
        let n = field.state_len();
        let mut g_state = vec![0.0; n];
        let mut g_flat = vec![0.0; fwd.field_params.len()];
        let top = field.readout(drive.terminal(), &fwd.final_state);
        field.readout_vjp(&fwd.final_state, &top, &g_top, &mut g_state, &mut g_flat);

        let adj = backward_adjoint_grid(&field, &fwd.final_state, &g_state, drive.grid(), solver)?;
        for (a, b) in g_flat.iter_mut().zip(&adj.dl_dtheta) {
            *a += b;
        }
        let mut off = 0;
        for s in &self.specs {
            s.scatter_add(&g_flat[off..off + s.n_params()], &mut grads);
            off += s.n_params();
        }
        Ok((loss, grads, fwd.logits))
    }
}
