//! Differentiable primitives. Each forward op has a matching vector–Jacobian
//! product; the slice-level kernels at the bottom are what the model code calls
//! in its inner loops, the `Tensor` functions are the checked public surface.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Variance stabilizer inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Normalized exponential over the last axis.
    Softmax,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dw: Tensor,
    pub dx: Tensor,
    pub dbias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgain: Tensor,
    pub dshift: Tensor,
}

fn check_linear(w: &Tensor, x: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let (m, n) = w.dims2()?;
    if x.shape() != [n] {
        return Err(Error::dim(
            "apply_linear",
            format!("weight {:?} cannot multiply input {:?}", w.shape(), x.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::dim(
                "apply_linear",
                format!("weight {:?} with bias {:?}", w.shape(), b.shape()),
            ));
        }
    }
    Ok((m, n))
}

/// `y = W x (+ b)`.
pub fn apply_linear(w: &Tensor, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (m, n) = check_linear(w, x, bias)?;
    let mut y = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; m],
    };
    matvec_acc(w.data(), m, n, x.data(), &mut y);
    Ok(Tensor::vector(y))
}

/// Gradients of `apply_linear` given the upstream cotangent of `y`.
pub fn apply_linear_vjp(
    w: &Tensor,
    x: &Tensor,
    has_bias: bool,
    upstream: &Tensor,
) -> Result<LinearGrads> {
    let (m, n) = check_linear(w, x, None)?;
    if upstream.shape() != [m] {
        return Err(Error::dim(
            "apply_linear_vjp",
            format!("weight {:?} with upstream {:?}", w.shape(), upstream.shape()),
        ));
    }
    let mut dw = vec![0.0; m * n];
    outer_acc(1.0, upstream.data(), x.data(), &mut dw);
    let mut dx = vec![0.0; n];
    matvec_t_acc(w.data(), m, n, upstream.data(), &mut dx);
    Ok(LinearGrads {
        dw: Tensor::new(vec![m, n], dw)?,
        dx: Tensor::vector(dx),
        dbias: has_bias.then(|| upstream.clone()),
    })
}

fn check_layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<usize> {
    let n = x.len();
    if x.shape() != [n] {
        return Err(Error::dim("apply_layer_norm", format!("expected a vector, got {:?}", x.shape())));
    }
    if n < 2 {
        return Err(Error::Degenerate {
            op: "apply_layer_norm",
            detail: format!("needs at least 2 features, got {n}"),
        });
    }
    if gain.shape() != [n] || shift.shape() != [n] {
        return Err(Error::dim(
            "apply_layer_norm",
            format!("input {:?}, gain {:?}, shift {:?}", x.shape(), gain.shape(), shift.shape()),
        ));
    }
    Ok(n)
}

pub fn apply_layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let n = check_layer_norm(x, gain, shift)?;
    let mut y = vec![0.0; n];
    layer_norm(x.data(), gain.data(), shift.data(), &mut y);
    let y = Tensor::vector(y);
    y.ensure_finite("apply_layer_norm")?;
    Ok(y)
}

pub fn apply_layer_norm_vjp(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    upstream: &Tensor,
) -> Result<LayerNormGrads> {
    let n = check_layer_norm(x, gain, shift)?;
    if upstream.shape() != [n] {
        return Err(Error::dim("apply_layer_norm_vjp", format!("upstream {:?}", upstream.shape())));
    }
    let mut y = vec![0.0; n];
    let cache = layer_norm(x.data(), gain.data(), shift.data(), &mut y);
    let mut dx = vec![0.0; n];
    let mut dgain = vec![0.0; n];
    let mut dshift = vec![0.0; n];
    cache.backward(gain.data(), upstream.data(), Some(&mut dx), &mut dgain, &mut dshift);
    Ok(LayerNormGrads {
        dx: Tensor::vector(dx),
        dgain: Tensor::vector(dgain),
        dshift: Tensor::vector(dshift),
    })
}

pub fn apply_activation(kind: Activation, x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("apply_activation input")?;
    let mut y = x.data().to_vec();
    match kind {
        Activation::Softmax => {
            let width = x.last_dim();
            if width == 0 {
                return Ok(x.clone());
            }
            for chunk in y.chunks_mut(width) {
                softmax_in_place(chunk);
            }
        }
        Activation::Tanh => y.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Sigmoid => y.iter_mut().for_each(|v| *v = sigmoid(*v)),
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// VJP expressed through the forward output `y`.
pub fn apply_activation_vjp(kind: Activation, y: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if y.shape() != upstream.shape() {
        return Err(Error::dim(
            "apply_activation_vjp",
            format!("output {:?}, upstream {:?}", y.shape(), upstream.shape()),
        ));
    }
    let mut dx = vec![0.0; y.len()];
    match kind {
        Activation::Softmax => {
            let width = y.last_dim().max(1);
            for ((yc, gc), dc) in y
                .data()
                .chunks(width)
                .zip(upstream.data().chunks(width))
                .zip(dx.chunks_mut(width))
            {
                softmax_vjp_acc(yc, gc, dc);
            }
        }
        Activation::Tanh => {
            for ((d, yv), g) in dx.iter_mut().zip(y.data()).zip(upstream.data()) {
                *d = g * (1.0 - yv * yv);
            }
        }
        Activation::Sigmoid => {
            for ((d, yv), g) in dx.iter_mut().zip(y.data()).zip(upstream.data()) {
                *d = g * yv * (1.0 - yv);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Slice kernels. Matrices are row-major `rows × cols`.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y += W x`.
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `y += Wᵀ x`.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// `M += scale · a ⊗ b` with `M` of shape `len(a) × len(b)`.
pub fn outer_acc(scale: f64, a: &[f64], b: &[f64], m: &mut [f64]) {
    debug_assert_eq!(m.len(), a.len() * b.len());
    for (ai, row) in a.iter().zip(m.chunks_exact_mut(b.len())) {
        let s = scale * ai;
        for (mij, bj) in row.iter_mut().zip(b) {
            *mij += s * bj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// `dx += y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_vjp_acc(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let inner = dot(g, y);
    for ((d, yi), gi) in dx.iter_mut().zip(y).zip(g) {
        *d += yi * (gi - inner);
    }
}

/// Softmax cross-entropy of `logits` against class `label`, with its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    p[label] -= 1.0;
    (loss, p)
}

/// Forward pass cache for [`layer_norm`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

/// Normalizes `x` with a `1/n` variance, then applies gain and shift.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64], out: &mut [f64]) -> LayerNormCache {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    for (((o, xh), g), s) in out.iter_mut().zip(&xhat).zip(gain).zip(shift) {
        *o = g * xh + s;
    }
    LayerNormCache { xhat, inv_std }
}

impl LayerNormCache {
    /// Accumulates parameter gradients; `dx` (if requested) is accumulated as well.
    pub fn backward(
        &self,
        gain: &[f64],
        upstream: &[f64],
        dx: Option<&mut [f64]>,
        dgain: &mut [f64],
        dshift: &mut [f64],
    ) {
        for i in 0..upstream.len() {
            dgain[i] += upstream[i] * self.xhat[i];
            dshift[i] += upstream[i];
        }
        if let Some(dx) = dx {
            let n = upstream.len() as f64;
            let dxhat: Vec<f64> = upstream.iter().zip(gain).map(|(u, g)| u * g).collect();
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dot(&dxhat, &self.xhat) / n;
            for i in 0..upstream.len() {
                dx[i] += self.inv_std * (dxhat[i] - mean_d - self.xhat[i] * mean_dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Relative error used for the finite-difference comparisons below.
    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let eye = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = apply_linear(&eye, &t(&[3.0, -1.0]), None).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);

        let w = Tensor::matrix(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let y = apply_linear(&w, &t(&[1.0, 1.0]), None).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0]);

        let g = apply_linear_vjp(&w, &t(&[1.0, 1.0]), false, &t(&[1.0, 0.0])).unwrap();
        assert_eq!(g.dw.row(0), &[1.0, 1.0]);
        assert_eq!(g.dw.row(1), &[0.0, 0.0]);
        assert_eq!(g.dx.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_shape_error_reports_both_shapes() {
        let w = Tensor::zeros(&[2, 3]);
        let err = apply_linear(&w, &t(&[1.0, 2.0]), None).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[1.0, 1.0]);
        let zero = t(&[0.0, 0.0]);
        let y = apply_layer_norm(&t(&[1.0, -1.0]), &one, &zero).unwrap();
        assert!(close(y.data(), &[1.0, -1.0], 1e-4));
        let y = apply_layer_norm(&t(&[2.0, 2.0]), &one, &zero).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = apply_layer_norm(&t(&[0.0, 2.0]), &one, &zero).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-4));
        // the stabilizer keeps it strictly inside |1|
        assert!(y.data()[1] < 1.0);
    }

    #[test]
    fn layer_norm_needs_two_features() {
        let err = apply_layer_norm(&t(&[1.0]), &t(&[1.0]), &t(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }

    #[test]
    fn activation_examples() {
        let y = apply_activation(Activation::Softmax, &t(&[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = apply_activation(Activation::Sigmoid, &t(&[0.0])).unwrap();
        assert_eq!(y.data(), &[0.5]);
        let y = apply_activation(Activation::Softmax, &t(&[1f64.ln(), 3f64.ln()])).unwrap();
        assert!(close(y.data(), &[0.25, 0.75], 1e-15));
    }

    #[test]
    fn activation_rejects_non_finite() {
        assert!(apply_activation(Activation::Tanh, &t(&[f64::INFINITY])).is_err());
    }

    #[test]
    fn softmax_rows_over_last_axis() {
        let x = Tensor::matrix(&[vec![0.0, 0.0], vec![0.0, 2f64.ln()]]).unwrap();
        let y = apply_activation(Activation::Softmax, &x).unwrap();
        assert!(close(y.row(0), &[0.5, 0.5], 1e-15));
        assert!(close(y.row(1), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
    }

    #[test]
    fn vjps_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..20 {
            let (m, n) = (3, 4);
            let w = Tensor::new(vec![m, n], random_vec(&mut rng, m * n)).unwrap();
            let x = t(&random_vec(&mut rng, n));
            let b = t(&random_vec(&mut rng, m));
            let up = t(&random_vec(&mut rng, m));
            let g = apply_linear_vjp(&w, &x, true, &up).unwrap();
            let scalar = |w: &Tensor, x: &Tensor, b: &Tensor| {
                dot(apply_linear(w, x, Some(b)).unwrap().data(), up.data())
            };
            for i in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.data_mut()[i] += h;
                wm.data_mut()[i] -= h;
                let fd = (scalar(&wp, &x, &b) - scalar(&wm, &x, &b)) / (2.0 * h);
                assert!(rel(fd, g.dw.data()[i]) < 1e-4);
            }
            for i in 0..n {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (scalar(&w, &xp, &b) - scalar(&w, &xm, &b)) / (2.0 * h);
                assert!(rel(fd, g.dx.data()[i]) < 1e-4);
            }
            for i in 0..m {
                let (mut bp, mut bm) = (b.clone(), b.clone());
                bp.data_mut()[i] += h;
                bm.data_mut()[i] -= h;
                let fd = (scalar(&w, &x, &bp) - scalar(&w, &x, &bm)) / (2.0 * h);
                assert!(rel(fd, g.dbias.as_ref().unwrap().data()[i]) < 1e-4);
            }

            // layer norm
            let n = 5;
            let x = t(&random_vec(&mut rng, n));
            let gain = t(&random_vec(&mut rng, n));
            let shift = t(&random_vec(&mut rng, n));
            let up = t(&random_vec(&mut rng, n));
            let g = apply_layer_norm_vjp(&x, &gain, &shift, &up).unwrap();
            let scalar = |x: &Tensor, gain: &Tensor, shift: &Tensor| {
                dot(apply_layer_norm(x, gain, shift).unwrap().data(), up.data())
            };
            for i in 0..n {
                let perturb = |v: &Tensor, s: f64| {
                    let mut v = v.clone();
                    v.data_mut()[i] += s;
                    v
                };
                let fd = (scalar(&perturb(&x, h), &gain, &shift)
                    - scalar(&perturb(&x, -h), &gain, &shift))
                    / (2.0 * h);
                assert!(rel(fd, g.dx.data()[i]) < 1e-4, "ln dx {fd} {}", g.dx.data()[i]);
                let fd = (scalar(&x, &perturb(&gain, h), &shift)
                    - scalar(&x, &perturb(&gain, -h), &shift))
                    / (2.0 * h);
                assert!(rel(fd, g.dgain.data()[i]) < 1e-4);
                let fd = (scalar(&x, &gain, &perturb(&shift, h))
                    - scalar(&x, &gain, &perturb(&shift, -h)))
                    / (2.0 * h);
                assert!(rel(fd, g.dshift.data()[i]) < 1e-4);
            }

            for kind in [Activation::Softmax, Activation::Tanh, Activation::Sigmoid] {
                let x = t(&random_vec(&mut rng, n));
                let up = t(&random_vec(&mut rng, n));
                let y = apply_activation(kind, &x).unwrap();
                let g = apply_activation_vjp(kind, &y, &up).unwrap();
                for i in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data_mut()[i] += h;
                    xm.data_mut()[i] -= h;
                    let fp = dot(apply_activation(kind, &xp).unwrap().data(), up.data());
                    let fm = dot(apply_activation(kind, &xm).unwrap().data(), up.data());
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(rel(fd, g.data()[i]) < 1e-4, "{kind:?}: {fd} vs {}", g.data()[i]);
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            xs in proptest::collection::vec(-30.0f64..30.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let y = apply_activation(Activation::Softmax, &t(&xs)).unwrap();
            let total: f64 = y.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(y.data().iter().all(|v| *v > 0.0));
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let ys = apply_activation(Activation::Softmax, &t(&shifted)).unwrap();
            for (a, b) in y.data().iter().zip(ys.data()) {
                proptest::prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = [0.2, -1.0, 0.7];
        let (l, g) = cross_entropy(&logits, 2);
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        assert!((l - (z.ln() - 0.7)).abs() < 1e-14);
        for i in 0..3 {
            let mut a = logits;
            let mut b = logits;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (cross_entropy(&a, 2).0 - cross_entropy(&b, 2).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
