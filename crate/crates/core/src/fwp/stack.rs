//! Deep FWP stacks as one coupled ODE.
//!
//! The joint state is the concatenation of every layer's fast weights. At each
//! evaluation the layers are visited bottom-up: layer 0 reads the control,
//! and layer `l > 0` is a direct field driven by `ffn(readout(W_{l-1}))`.

use std::ops::Range;

use super::layer::{
    ffn_block, ffn_block_vjp, layer_field, layer_field_vjp, query_readout, query_readout_vjp, slow_projections, FfnCache,
    LayerSpec, Projections, ReadCache,
};
use super::Family;
use crate::adjoint::DiffField;
use crate::control::ControlPath;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::solver::{At, VectorField};

/// Source of the layer-0 input `x(t)` and its derivative.
pub trait Drive: Sync {
    fn channels(&self) -> usize;
    /// Ascending integration knots.
    fn grid(&self) -> &[f64];
    fn x_into(&self, at: At, out: &mut [f64]);
    fn dx_into(&self, at: At, out: &mut [f64]);

    fn terminal(&self) -> At {
        let g = self.grid();
        At::new(*g.last().expect("non-empty grid"), g.len().saturating_sub(2))
    }
}

impl Drive for ControlPath {
    fn channels(&self) -> usize {
        ControlPath::channels(self)
    }
    fn grid(&self) -> &[f64] {
        self.knot_times()
    }
    fn x_into(&self, at: At, out: &mut [f64]) {
        self.eval_into(at, out)
    }
    fn dx_into(&self, at: At, out: &mut [f64]) {
        self.derivative_into(at, out)
    }
}

/// Piecewise-constant input: row `k` of `features` holds over `[k, k+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDrive {
    features: Tensor,
    grid: Vec<f64>,
}

impl StepDrive {
    pub fn new(features: Tensor) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n == 0 {
            return Err(Error::dim("StepDrive", "no feature rows".to_string()));
        }
        features.ensure_finite("StepDrive features")?;
        Ok(Self { grid: (0..=n).map(|k| k as f64).collect(), features })
    }
}

impl Drive for StepDrive {
    fn channels(&self) -> usize {
        self.features.shape()[1]
    }
    fn grid(&self) -> &[f64] {
        &self.grid
    }
    fn x_into(&self, at: At, out: &mut [f64]) {
        let k = at.segment.min(self.features.shape()[0] - 1);
        out.copy_from_slice(self.features.row(k));
    }
    fn dx_into(&self, _at: At, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub struct StackField<'a> {
    layers: &'a [LayerSpec],
    params: &'a [f64],
    drive: &'a dyn Drive,
    p_ranges: Vec<Range<usize>>,
    s_ranges: Vec<Range<usize>>,
}

struct Pass {
    x: Vec<f64>,
    dx: Vec<f64>,
    /// Input of layer `l > 0` (index 0 is unused).
    inputs: Vec<Vec<f64>>,
    projs: Vec<Projections>,
    reads: Vec<ReadCache>,
    ffns: Vec<FfnCache>,
    top: Vec<f64>,
}

/// Cache of the terminal readout for [`StackField::readout_vjp`].
pub struct Readout {
    pass: Pass,
    pub y: Vec<f64>,
}

impl<'a> StackField<'a> {
    pub fn new(layers: &'a [LayerSpec], params: &'a [f64], drive: &'a dyn Drive) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an FWP stack needs at least one layer".into()));
        }
        if layers[0].d_in != drive.channels() {
            return Err(Error::dim(
                "StackField",
                format!("layer 0 expects {} input channels, input has {}", layers[0].d_in, drive.channels()),
            ));
        }
        for w in layers.windows(2) {
            if w[1].family != Family::Direct || w[1].d_in != w[0].d_model {
                return Err(Error::Config(format!("layer {} must be a direct field over d_model inputs", w[1].index)));
            }
        }
        let mut p_ranges = Vec::new();
        let mut s_ranges = Vec::new();
        let (mut po, mut so) = (0, 0);
        for l in layers {
            p_ranges.push(po..po + l.n_params());
            s_ranges.push(so..so + l.state_len());
            po += l.n_params();
            so += l.state_len();
        }
        if params.len() != po {
            return Err(Error::dim("StackField", format!("{} parameters for a stack expecting {po}", params.len())));
        }
        Ok(Self { layers, params, drive, p_ranges, s_ranges })
    }

    pub fn state_len(&self) -> usize {
        self.s_ranges.last().map_or(0, |r| r.end)
    }

    fn lp(&self, l: usize) -> &[f64] {
        &self.params[self.p_ranges[l].clone()]
    }

    /// Bottom-up pass; `fields` computes projections, `top` the last readout.
    fn pass(&self, at: At, state: &[f64], fields: bool, top: bool) -> Pass {
        let n = self.layers.len();
        let mut x = vec![0.0; self.drive.channels()];
        let mut dx = vec![0.0; self.drive.channels()];
        self.drive.x_into(at, &mut x);
        self.drive.dx_into(at, &mut dx);
        let mut pass = Pass { x, dx, inputs: vec![Vec::new(); n], projs: Vec::new(), reads: Vec::new(), ffns: Vec::new(), top: Vec::new() };
        let reads_needed = if top { n } else { n - 1 };
        for l in 0..n {
            let spec = &self.layers[l];
            let ps = self.lp(l);
            let w = &state[self.s_ranges[l].clone()];
            if fields {
                let proj = if l == 0 {
                    slow_projections(spec, ps, spec.x_side(&pass.x, &pass.dx), Some(&pass.dx))
                } else {
                    slow_projections(spec, ps, &pass.inputs[l], None)
                };
                pass.projs.push(proj);
            }
            if l < reads_needed {
                let r = if l == 0 { spec.query_input(&pass.x, &pass.dx).to_vec() } else { pass.inputs[l].clone() };
                let (y, rc) = query_readout(spec, ps, w, &r);
                let (o, fc) = ffn_block(spec, ps, &y);
                pass.reads.push(rc);
                pass.ffns.push(fc);
                if l + 1 < n {
                    pass.inputs[l + 1] = o;
                } else {
                    pass.top = o;
                }
            }
        }
        pass
    }

    /// Output of the top layer's readout and feed-forward block.
    pub fn readout(&self, at: At, state: &[f64]) -> Readout {
        let pass = self.pass(at, state, false, true);
        Readout { y: pass.top.clone(), pass }
    }

    /// Pulls `g_top` back through every layer's readout and FFN.
    pub fn readout_vjp(&self, state: &[f64], cache: &Readout, g_top: &[f64], d_state: &mut [f64], d_params: &mut [f64]) {
        let mut g = g_top.to_vec();
        for l in (0..self.layers.len()).rev() {
            let (spec, ps) = (&self.layers[l], self.lp(l));
            let dp = &mut d_params[self.p_ranges[l].clone()];
            let g_y = ffn_block_vjp(spec, ps, &cache.pass.ffns[l], &g, dp);
            let mut g_r = vec![0.0; spec.d_in];
            let w = &state[self.s_ranges[l].clone()];
            let ds = &mut d_state[self.s_ranges[l].clone()];
            query_readout_vjp(spec, ps, w, &cache.pass.reads[l], &g_y, ds, dp, (l > 0).then_some(&mut g_r[..]));
            g = g_r;
        }
    }
}

impl VectorField for StackField<'_> {
    fn dim(&self) -> usize {
        self.state_len()
    }

    fn eval(&self, at: At, state: &[f64], out: &mut [f64]) {
        let pass = self.pass(at, state, true, false);
        for (l, spec) in self.layers.iter().enumerate() {
            let r = self.s_ranges[l].clone();
            layer_field(spec, &pass.projs[l], &state[r.clone()], &mut out[r]);
        }
    }
}

impl DiffField for StackField<'_> {
    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&self, at: At, state: &[f64], cot: &[f64], d_state: &mut [f64], d_params: &mut [f64]) {
        let pass = self.pass(at, state, true, false);
        let n = self.layers.len();
        let mut g_u: Vec<Vec<f64>> = self.layers.iter().map(|s| vec![0.0; s.d_in]).collect();
        for l in (0..n).rev() {
            let spec = &self.layers[l];
            let ps = self.lp(l);
            let sr = self.s_ranges[l].clone();
            {
                let d_u = if l > 0 { Some(&mut g_u[l][..]) } else { None };
                layer_field_vjp(spec, ps, &pass.projs[l], &state[sr.clone()], &cot[sr], &mut d_state[self.s_ranges[l].clone()], &mut d_params[self.p_ranges[l].clone()], d_u);
            }
            if l > 0 {
                let below = l - 1;
                let (bspec, bps) = (&self.layers[below], self.lp(below));
                let dp = &mut d_params[self.p_ranges[below].clone()];
                let g_y = ffn_block_vjp(bspec, bps, &pass.ffns[below], &g_u[l], dp);
                let bw = &state[self.s_ranges[below].clone()];
                let ds = &mut d_state[self.s_ranges[below].clone()];
                let (lo, _) = g_u.split_at_mut(l);
                let d_r = if below > 0 { Some(&mut lo[below][..]) } else { None };
                query_readout_vjp(bspec, bps, bw, &pass.reads[below], &g_y, ds, dp, d_r);
            }
        }
    }
}
