//! Continuous-time fast weight programmers.
//!
//! A layer's ODE state is its fast weight memory: `H` square `d_head × d_head`
//! matrices, one per head, flattened row-major and concatenated. Slow weights
//! generate a learning rate, keys and values from the layer input; the learning
//! rule turns those into `dW/dt`, and the layer output is read from `W` with a
//! softmax query.

mod discrete;
mod head;
mod kernels;
mod layer;
mod model;
mod oja;
mod rfwp;
mod stack;
mod vanilla;

pub use discrete::{
    discrete_fwp_step, discrete_fwp_step_cached, discrete_fwp_step_vjp, CellCache, DiscreteCell, DiscreteConfig, DiscreteModel,
    DiscreteSpec, StepCache,
};
pub use head::{Head, HeadCache};
pub use kernels::{head_write, head_write_vjp, HeadWrite, WriteVjp};
pub use model::{FwpConfig, FwpForward, FwpModel};
pub use layer::{
    ffn_block, ffn_block_vjp, layer_field, layer_field_vjp, query_readout, query_readout_vjp, slow_projections, FfnCache,
    LayerSpec, Projections, ReadCache, Slot,
};
pub use oja::{oja_classic_field, OjaField};
pub use rfwp::{evolve_gap, ode_rfwp_step, MlpField, RfwpConfig, RfwpModel};
pub use stack::{Drive, Readout, StackField, StepDrive};
pub use vanilla::{vanilla_ncde_field, NcdeMlp, VanillaConfig, VanillaField, VanillaModel};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Hebb,
    Oja,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaVariant {
    /// `σ(β)(tanh(x_v) − Wk) ⊗ k`
    Pre,
    /// `σ(β) tanh(x_v − Wk) ⊗ k`
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdeInput {
    XAndDx,
    /// Every occurrence of `x` is replaced by `x′`.
    DxOnly,
}

/// How the control enters the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// `dW/dt = f(W, x(t))`.
    Direct,
    /// Every term of `dW/dt` carries a factor of `x′(t)`.
    Cde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleKind {
    pub rule: Rule,
    pub delta_variant: DeltaVariant,
    pub cde_input: CdeInput,
    /// Hebb under a CDE only: values from `x`, keys from `x′`.
    pub hebb_kv_swap: bool,
}

impl RuleKind {
    pub fn new(rule: Rule) -> Self {
        Self { rule, delta_variant: DeltaVariant::Pre, cde_input: CdeInput::XAndDx, hebb_kv_swap: false }
    }

    pub fn with_delta(mut self, v: DeltaVariant) -> Self {
        self.delta_variant = v;
        self
    }

    pub fn with_cde_input(mut self, c: CdeInput) -> Self {
        self.cde_input = c;
        self
    }

    pub fn with_swap(mut self, swap: bool) -> Self {
        self.hebb_kv_swap = swap;
        self
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        if self.hebb_kv_swap && (self.rule != Rule::Hebb || family != Family::Cde) {
            return Err(Error::Config("hebb_kv_swap applies only to the hebb rule under a CDE".into()));
        }
        Ok(())
    }
}

impl std::str::FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hebb" => Ok(Rule::Hebb),
            "oja" => Ok(Rule::Oja),
            "delta" => Ok(Rule::Delta),
            other => Err(Error::Config(format!("unknown rule `{other}` (hebb|oja|delta)"))),
        }
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rule::Hebb => "hebb",
            Rule::Oja => "oja",
            Rule::Delta => "delta",
        })
    }
}
