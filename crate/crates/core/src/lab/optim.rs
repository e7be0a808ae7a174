use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, Real};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, t): (Vec<Matrix>, Vec<u64>) = shapes.into_iter().map(|(r, c)| (Matrix::zeros(r, c), 0)).unzip();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, v: m.clone(), m, t }
    }

    /// One update of `param` (slot `i`) along `grad`. Step counts are kept
    /// per slot so parameters frozen in earlier phases start fresh.
    pub fn step(&mut self, i: usize, param: &mut Matrix, grad: &Matrix, lr: Real) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = Adam::new([(1, 3)]);
        let mut p = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.5, -4.0, 0.0]]).unwrap();
        opt.step(0, &mut p, &g, 0.1);
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 2.1).abs() < 1e-7);
        assert_eq!(d[2], 3.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = Adam::new([(1, 1)]);
        let mut p = Matrix::scalar(5.0);
        for _ in 0..2000 {
            let g = Matrix::scalar(2.0 * (p.item() - 1.5));
            opt.step(0, &mut p, &g, 0.05);
        }
        assert!((p.item() - 1.5).abs() < 1e-3);
    }
}
