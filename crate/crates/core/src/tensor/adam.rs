use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::NdArray;
use super::nn::ParamStore;
use super::TensorError;

/// Adam optimizer with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, NdArray>,
    pub second_moment: BTreeMap<String, NdArray>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update over every parameter that has a gradient. Parameters with
    /// no gradient entry are left untouched. All gradients are validated
    /// before any parameter is written.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, NdArray>,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| TensorError::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!("gradient of parameter `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| NdArray::zeros(g.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| NdArray::zeros(g.shape()));
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut ps = ParamStore::default();
        ps.insert("w", NdArray::scalar(value));
        ps
    }

    fn grad(value: f64) -> BTreeMap<String, NdArray> {
        BTreeMap::from([("w".to_string(), NdArray::scalar(value))])
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut ps = single(1.5);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut ps, &grad(0.0)).unwrap();
        assert_eq!(ps.get("w").unwrap().item(), 1.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut ps = single(0.0);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut ps, &grad(1.0)).unwrap();
        let m1 = adam.first_moment["w"].item();
        adam.step(&mut ps, &grad(0.0)).unwrap();
        assert!((adam.first_moment["w"].item() - 0.9 * m1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut ps = single(0.0);
        let mut adam = Adam::new(1e-3);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = ps.get("w").unwrap().item();
            adam.step(&mut ps, &grad(-3.0)).unwrap();
            last = ps.get("w").unwrap().item() - before;
        }
        assert!((last - 1e-3).abs() < 1e-6, "step {last}");
    }

    #[test]
    fn matches_hand_recursion() {
        // three steps with gradients 1, -2, 0.5 computed by hand from the Adam recursion
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let gs = [1.0, -2.0, 0.5];
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 2.0f64);
        let mut expected = Vec::new();
        for (i, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (i + 1) as i32;
            p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            expected.push(p);
        }
        // first step of Adam moves by exactly lr * sign(g) (up to eps)
        assert!((expected[0] - 1.9).abs() < 1e-8);

        let mut ps = single(2.0);
        let mut adam = Adam::with_betas(lr, b1, b2, eps);
        for (g, want) in gs.iter().zip(&expected) {
            adam.step(&mut ps, &grad(*g)).unwrap();
            assert_eq!(ps.get("w").unwrap().item(), *want);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut ps = single(0.0);
        let mut adam = Adam::new(1e-3);
        let err = adam.step(&mut ps, &grad(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(adam.step, 0);
    }
}
