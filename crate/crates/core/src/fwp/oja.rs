//! The classic single-output Oja ODE `dW = η y (x − Wᵀ y)`, `y = W x`.

use crate::numcore::ops::dot;
use crate::solver::{At, VectorField};

pub fn oja_classic_field(w: &[f64], x: &[f64], eta: f64, out: &mut [f64]) {
    let y = dot(w, x);
    for ((o, wi), xi) in out.iter_mut().zip(w).zip(x) {
        *o = eta * y * (xi - y * wi);
    }
}

/// The field averaged over a fixed sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct OjaField {
    pub samples: Vec<Vec<f64>>,
    pub eta: f64,
}

impl VectorField for OjaField {
    fn dim(&self) -> usize {
        self.samples[0].len()
    }

    fn eval(&self, _at: At, state: &[f64], out: &mut [f64]) {
        let mut tmp = vec![0.0; state.len()];
        out.fill(0.0);
        for x in &self.samples {
            oja_classic_field(state, x, self.eta, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
        let n = self.samples.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_weights_do_not_move() {
        let mut out = [1.0; 2];
        oja_classic_field(&[0.0, 1.0], &[3.0, 0.0], 0.5, &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn unit_weight_parallel_input_has_no_radial_motion() {
        let w = [0.6, 0.8];
        let x = [1.5, 2.0];
        let mut out = [0.0; 2];
        oja_classic_field(&w, &x, 1.0, &mut out);
        assert!(dot(&w, &out).abs() < 1e-12);
    }

    #[test]
    fn principal_eigenvector_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)])
            .map(|v: Vec<f64>| vec![v[0] + 0.3 * v[1], v[1] - 0.2 * v[2], v[2]])
            .collect();
        let n = samples.len() as f64;
        let cov = DMatrix::from_fn(3, 3, |i, j| samples.iter().map(|s| s[i] * s[j]).sum::<f64>() / n);
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iamax();
        let w: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
        let field = OjaField { samples, eta: 1.0 };
        let mut out = vec![0.0; 3];
        field.eval(At::new(0.0, 0), &w, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-12), "{out:?}");
    }
}
