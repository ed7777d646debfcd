//! Adaptive-moment optimizer.

use crate::real::Real;
use crate::tensor::Params;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let tensors = params.tensors_mut().zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, m), v), (_, g)) in tensors.zip(grads.iter()) {
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(&[3], vec![0.5f32, -1.0, 2.0]).unwrap());
        let before = p.clone();
        let mut g = p.zeros_like();
        g.flat_set(1, 3.0);
        let mut opt = Adam::new(&p, 0.0);
        opt.step(&mut p, &g);
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Params::new();
        p.push("w", Tensor::from_vec(&[2], vec![1.0f64, 1.0]).unwrap());
        let mut g = p.zeros_like();
        g.flat_set(0, 4.0);
        g.flat_set(1, -0.01);
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &g);
        assert!((p.flat_get(0) - 0.9).abs() < 1e-6);
        assert!((p.flat_get(1) - 1.1).abs() < 1e-4);
    }
}
