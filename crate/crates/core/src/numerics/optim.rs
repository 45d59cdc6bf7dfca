use serde::{Deserialize, Serialize};

use super::tensor::{HasParams, Parameter, Real};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments and step counter for one parameter set.
///
/// Entries whose gradient is exactly zero in a step are left untouched
/// (value and both moments), so a step with an all-zero gradient never moves
/// the parameters regardless of the accumulated moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &impl HasParams<T>, config: AdamConfig) -> Self {
        let mut names = Vec::new();
        let mut first_moment = Vec::new();
        params.visit(&mut |p| {
            names.push(p.name().to_string());
            first_moment.push(vec![T::zero(); p.len()]);
        });
        let second_moment = first_moment.clone();
        Self {
            config,
            step: 0,
            names,
            first_moment,
            second_moment,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.names
            .iter()
            .zip(&self.first_moment)
            .zip(&self.second_moment)
            .map(|((n, m), v)| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Rebuilds state from stored parts; used by checkpoint loading.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        names: Vec<String>,
        first_moment: Vec<Vec<T>>,
        second_moment: Vec<Vec<T>>,
    ) -> Result<Self> {
        if names.len() != first_moment.len() || names.len() != second_moment.len() {
            return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
        }
        for ((n, m), v) in names.iter().zip(&first_moment).zip(&second_moment) {
            if m.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "moment length mismatch for `{n}`"
                )));
            }
        }
        Ok(Self {
            config,
            step,
            names,
            first_moment,
            second_moment,
        })
    }

    fn check_matches(&self, params: &impl HasParams<T>) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        params.visit(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.names.get(idx) {
                Some(n) if n == p.name() && self.first_moment[idx].len() == p.len() => {}
                _ => {
                    err = Some(format!(
                        "optimizer state does not match parameter `{}`",
                        p.name()
                    ))
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(invalid(e));
        }
        if idx != self.names.len() {
            return Err(invalid("optimizer state has extra parameters"));
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn adam_step(&mut self, params: &mut impl HasParams<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.check_matches(params)?;
        let mut bad = None;
        params.visit(&mut |p: &Parameter<T>| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name().to_string());
            }
        });
        if let Some(param) = bad {
            return Err(Error::TrainingDiverged { param });
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(epsilon));
        let bc1 = T::lit(1.0 - beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - beta2.powi(self.step as i32));
        let lr = T::lit(lr);
        let one = T::one();
        let mut idx = 0;
        let (first, second) = (&mut self.first_moment, &mut self.second_moment);
        params.visit_mut(&mut |p| {
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for k in 0..p.value.len() {
                let g = p.grad[k];
                if g == T::zero() {
                    continue;
                }
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p.value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, model_dim: usize, warmup: u64, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(invalid("noam schedule is defined for step >= 1"));
    }
    if model_dim == 0 || warmup == 0 {
        return Err(invalid("model_dim and warmup must be positive"));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok(scale * (model_dim as f64).powf(-0.5) * decay.min(ramp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noam_first_step_and_crossover() {
        // 1/16 * 4000^-1.5 computed directly
        let expected = (1.0 / 16.0) * 4000f64.powf(-1.5);
        assert_relative_eq!(
            noam_lr(1, 256, 4000, 1.0).unwrap(),
            expected,
            max_relative = 1e-12
        );
        assert_relative_eq!(expected, 2.4705e-7, max_relative = 1e-4);

        let at = noam_lr(4000, 256, 4000, 2.0).unwrap();
        assert_relative_eq!(at, 2.0 / 16.0 * 4000f64.powf(-0.5), max_relative = 1e-12);
        assert!(noam_lr(8000, 256, 4000, 1.0).unwrap() < noam_lr(4000, 256, 4000, 1.0).unwrap());
    }

    #[test]
    fn noam_monotone_around_warmup() {
        let w = 50;
        let lrs: Vec<f64> = (1..=200).map(|s| noam_lr(s, 32, w, 1.0).unwrap()).collect();
        for s in 1..(w as usize - 1) {
            assert!(lrs[s] > lrs[s - 1]);
        }
        for s in w as usize..lrs.len() {
            assert!(lrs[s] < lrs[s - 1]);
        }
    }

    #[test]
    fn noam_rejects_step_zero() {
        assert!(matches!(
            noam_lr(0, 4, 4, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_scalar_adam_step() {
        let mut p = Parameter::<f64>::new("x", vec![1], vec![0.5]);
        p.grad[0] = 1.0;
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        st.adam_step(&mut p, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction, so the update is
        // 0.1 * 1 / (1 + 1e-8).
        assert_relative_eq!(p.value[0], 0.5 - 0.1 / (1.0 + 1e-8), max_relative = 1e-12);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_is_noop_on_values() {
        let mut p = Parameter::<f64>::new("x", vec![3], vec![0.5, -1.0, 2.0]);
        p.grad = vec![0.3, -0.2, 0.1];
        let mut st = OptimizerState::new(&p, AdamConfig::default());
        st.adam_step(&mut p, 0.1).unwrap();
        let before = p.value.clone();
        p.zero_grad();
        st.adam_step(&mut p, 0.1).unwrap();
        assert_eq!(p.value, before);
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut ps = vec![
            Parameter::<f32>::new("a", vec![2], vec![0.1, 0.2]),
            Parameter::<f32>::new("b", vec![2], vec![0.1, 0.2]),
        ];
        for p in &mut ps {
            p.grad = vec![0.7, -0.4];
        }
        let mut st = OptimizerState::new(&ps, AdamConfig::default());
        st.adam_step(&mut ps, 0.01).unwrap();
        assert_eq!(ps[0].value, ps[1].value);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = vec![
            Parameter::<f32>::new("ok", vec![1], vec![0.0]),
            Parameter::<f32>::new("broken", vec![1], vec![0.0]),
        ];
        ps[1].grad[0] = f32::NAN;
        ps[0].grad[0] = 1.0;
        let mut st = OptimizerState::new(&ps, AdamConfig::default());
        match st.adam_step(&mut ps, 0.1) {
            Err(Error::TrainingDiverged { param }) => assert_eq!(param, "broken"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(ps[0].value[0], 0.0);
        assert_eq!(st.step(), 0);
    }
}
