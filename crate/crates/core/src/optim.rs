//! First-order optimiser with bias-corrected moment estimates.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` against `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut opt = Adam::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[3.0, -0.01, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-4);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_lr_is_inert_and_quadratic_is_minimised() {
        let mut frozen = Adam::new(1, 0.0);
        let mut p = vec![4.0];
        frozen.step(&mut p, &[1.0]);
        assert_eq!(p[0], 4.0);

        let mut opt = Adam::new(1, 0.05);
        let mut x = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * (x[0] - 1.0);
            opt.step(&mut x, &[g]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
