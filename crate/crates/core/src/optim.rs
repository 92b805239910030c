//! Adam step rule shared by every learned component.

use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step to `params` using `grads` (same shapes).
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "adam: gradient shape mismatch");
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            for (((w, &gw), mw), vw) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *mw = self.beta1 * *mw + (1.0 - self.beta1) * gw;
                *vw = self.beta2 * *vw + (1.0 - self.beta2) * gw * gw;
                let mhat = *mw / bc1;
                let vhat = *vw / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut adam = Adam::new(0.01);
        let mut p = vec![Matrix::row_vector(&[1.0, 1.0])];
        adam.step(&mut p, &[Matrix::row_vector(&[3.0, -0.5])]);
        assert!((p[0].as_slice()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].as_slice()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut adam = Adam::new(0.05);
        let mut p = vec![Matrix::scalar(4.0)];
        for _ in 0..2000 {
            let g = Matrix::scalar(2.0 * (p[0].item() - 1.5));
            adam.step(&mut p, &[g]);
        }
        assert!((p[0].item() - 1.5).abs() < 1e-3);
    }
}
