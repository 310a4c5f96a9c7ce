use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numkit::{NumError, ParamSet, Tensor};

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter named in `grads`. Names must be
    /// adaptable in `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<(), NumError> {
        for (name, g) in grads {
            let shape = params
                .shape_of(name)
                .ok_or_else(|| NumError::UnknownParameter(name.clone()))?;
            if shape != g.shape() {
                return Err(NumError::ParameterShape {
                    name: name.clone(),
                    expected: shape,
                    found: g.shape(),
                });
            }
            params.adaptable_mut(name)?;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = params.adaptable_mut(name)?.data_mut();
            for (i, gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ParamRole;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, -1.0, 0.0]), ParamRole::Adaptable);
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::vector(vec![3.0, -0.5, 0.0]))].into();
        let mut adam = Adam::new(0.1);
        adam.step(&mut ps, &grads).unwrap();
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
        assert_eq!(w[2], 0.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![2.0, -3.0]), ParamRole::Adaptable);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let w = ps.get("w").unwrap().data().to_vec();
            let g = Tensor::vector(w.iter().map(|x| 2.0 * (x - 0.5)).collect());
            adam.step(&mut ps, &[("w".to_string(), g)].into()).unwrap();
        }
        for x in ps.get("w").unwrap().data() {
            assert!((x - 0.5).abs() < 1e-3, "{x}");
        }
    }

    #[test]
    fn rejects_frozen_and_unknown() {
        let mut ps = ParamSet::new();
        ps.insert("f", Tensor::vector(vec![1.0]), ParamRole::Frozen);
        let mut adam = Adam::new(0.1);
        let g: BTreeMap<_, _> = [("f".to_string(), Tensor::vector(vec![1.0]))].into();
        assert!(matches!(adam.step(&mut ps, &g), Err(NumError::FrozenParameter(_))));
        let g: BTreeMap<_, _> = [("x".to_string(), Tensor::vector(vec![1.0]))].into();
        assert!(matches!(adam.step(&mut ps, &g), Err(NumError::UnknownParameter(_))));
        assert_eq!(ps.get("f").unwrap().data(), &[1.0]);
        assert_eq!(adam.steps(), 0);
    }
}
