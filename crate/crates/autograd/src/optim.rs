use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` follows the order of `params`; entries
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "gradient list does not match parameter set");
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "optimizer bound to a different parameter set");
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powf(t));
        let c2 = T::of(1.0 - self.beta2.powf(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for ((id, _, value), grad) in params.iter_mut().zip(grads) {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for (((p, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
