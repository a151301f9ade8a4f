//! Adam with bias correction over named parameter blocks.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates of a block, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One update of every `(name, param, grad)` triple.
    pub fn step<'a, I>(&mut self, blocks: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Array2<f64>, &'a Array2<f64>)>,
    {
        let blocks: Vec<_> = blocks.into_iter().collect();
        for (name, p, g) in &blocks {
            if p.dim() != g.dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("block {name}: param {:?}, grad {:?}", p.dim(), g.dim()),
                });
            }
            if let Some((m, _)) = self.moments.get(*name) {
                if m.dim() != p.dim() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        detail: format!("block {name}: state {:?}, param {:?}", m.dim(), p.dim()),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        for (name, p, g) in blocks {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Array2::zeros(p.dim()), Array2::zeros(p.dim())));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(0.005);
        let mut p = array![[1.0, -2.0]];
        let g = Array2::zeros((1, 2));
        s.step([("w", &mut p, &g)]).unwrap();
        assert_eq!(p, array![[1.0, -2.0]]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(0.005);
        let mut p = array![[1.0, 1.0, 1.0]];
        let g = array![[3.0, -0.2, 1e-3]];
        s.step([("w", &mut p, &g)]).unwrap();
        for (x, gi) in p.iter().zip(g.iter()) {
            let expected = 1.0 - 0.005 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Scalar oracle: Adam on ‖w‖² from w = 1.
        let mut s = AdamState::new(0.005);
        let mut w = array![[1.0]];
        let mut prev = 1.0;
        for _ in 0..100 {
            let g = &w * 2.0;
            s.step([("w", &mut w, &g)]).unwrap();
            assert!(w[[0, 0]].abs() < prev);
            prev = w[[0, 0]].abs();
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(0.1);
        let mut p = Array2::zeros((2, 2));
        let g = Array2::zeros((2, 1));
        assert!(matches!(s.step([("w", &mut p, &g)]), Err(Error::Shape { .. })));
        assert_eq!(s.step_count(), 0);
    }
}
