use ctfwp::control::{fit_path, ControlPath, Interpolation};
use ctfwp::fwp::{
    discrete_fwp_step, vanilla_ncde_field, DiscreteSpec, Drive, Family, LayerSpec, NcdeMlp, Rule, RuleKind, Slot,
    StackField, VanillaField,
};
use ctfwp::numcore::ops::layer_norm;
use ctfwp::numcore::Tensor;
use ctfwp::solver::{ode_solve_grid, Method, SolveConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HEADS: usize = 2;
const D: usize = 4;
const D_IN: usize = 3;
const N: usize = 7;

fn knots(seed: u64) -> (Vec<Vec<f64>>, ControlPath) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..N).map(|_| (0..D_IN).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let t: Vec<f64> = (0..N).map(|i| i as f64).collect();
    let path = fit_path(&t, &Tensor::new(vec![N, D_IN], rows.concat()).unwrap(), Interpolation::Linear).unwrap();
    (rows, path)
}

/// Euler with unit steps on a single direct layer, plus the matching
/// discrete recursion fed the same layer-normed inputs.
fn run_pair(rule: Rule, zero_beta: bool, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let spec = LayerSpec::new(0, D_IN, D, HEADS, 3, Family::Direct, RuleKind::new(rule)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<f64> = (0..spec.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ws = spec.range(Slot::WSlow);
    if zero_beta {
        params[ws.start..ws.start + HEADS * D_IN].fill(0.0);
    }
    let (rows, path) = knots(seed + 1);
    let field = StackField::new(std::slice::from_ref(&spec), &params, &path).unwrap();
    let cont = ode_solve_grid(&field, &vec![0.0; spec.state_len()], path.grid(), &SolveConfig::fixed(Method::Euler, 1), false)
        .unwrap()
        .final_state;

    let slow = &params[ws];
    let mut disc_slow = slow[..HEADS * D_IN].to_vec();
    disc_slow.extend(std::iter::repeat(0.0).take(D * D_IN));
    disc_slow.extend_from_slice(&slow[HEADS * D_IN..]);
    let dspec = DiscreteSpec::new(rule, HEADS, D_IN, D).unwrap().with_value_tanh(true);
    let gain = &params[spec.range(Slot::FieldLnGain)];
    let shift = &params[spec.range(Slot::FieldLnShift)];
    let mut w = vec![0.0; dspec.state_len()];
    // Euler over [n, n+1] uses the knot at n; the last knot is never read
    for x in &rows[..N - 1] {
        let mut u = vec![0.0; D_IN];
        layer_norm(x, gain, shift, &mut u);
        w = discrete_fwp_step(&dspec, &disc_slow, &u, &w).1;
    }
    (cont, w)
}

#[test]
fn hebb_euler_is_the_linear_transformer() {
    for seed in 0..5 {
        let (cont, disc) = run_pair(Rule::Hebb, true, seed);
        let dh = D / HEADS;
        for h in 0..HEADS {
            for i in 0..dh {
                for j in 0..dh {
                    let c = cont[h * dh * dh + i * dh + j];
                    // σ(0) = 1/2 and the continuous memory is written key-by-value
                    let dv = 0.5 * disc[h * dh * dh + j * dh + i];
                    assert!((c - dv).abs() <= 1e-12, "head {h} ({i},{j}): {c} vs {dv}");
                }
            }
        }
    }
}

#[test]
fn pre_delta_euler_is_deltanet() {
    for seed in 10..15 {
        let (cont, disc) = run_pair(Rule::Delta, false, seed);
        for (c, d) in cont.iter().zip(&disc) {
            assert!((c - d).abs() <= 1e-12, "{c} vs {d}");
        }
    }
}

#[test]
fn vanilla_ncde_euler_is_the_discrete_recursion() {
    let mlp = NcdeMlp { d: 3, d_in: D_IN, d_mlp: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let p: Vec<f64> = (0..mlp.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (rows, path) = knots(78);
    let field = VanillaField { mlp, params: &p, drive: &path };
    let h0 = vec![0.2, -0.1, 0.4];
    let got = ode_solve_grid(&field, &h0, path.grid(), &SolveConfig::fixed(Method::Euler, 1), false).unwrap();

    let mut h = h0;
    for n in 1..N {
        let dx: Vec<f64> = rows[n].iter().zip(&rows[n - 1]).map(|(a, b)| a - b).collect();
        let (w, _) = mlp.matrix(&p, &h);
        let mut step = vec![0.0; 3];
        vanilla_ncde_field(&w, 3, D_IN, &dx, &mut step);
        h.iter_mut().zip(&step).for_each(|(a, b)| *a += b);
    }
    for (a, b) in got.final_state.iter().zip(&h) {
        assert!((a - b).abs() <= 1e-12);
    }
}
