//! Central finite-difference gradient checking in double precision.

use super::tensor::HasParams;
use crate::error::{invalid, Error, Result};

/// Denominator floor for the relative error so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn set_entry<M: HasParams<f64>>(model: &mut M, param: usize, index: usize, value: f64) -> f64 {
    let mut j = 0;
    let mut old = f64::NAN;
    model.visit_mut(&mut |p| {
        if j == param {
            old = p.value[index];
            p.value[index] = value;
        }
        j += 1;
    });
    old
}

/// Compares `backward`'s analytic gradients with central differences of
/// `loss` for every parameter entry of `model`.
///
/// `backward` must leave the full gradient of `loss` in the parameters
/// (it is called after a `zero_grad`).
pub fn grad_check<M, L, B>(
    model: &mut M,
    loss: L,
    backward: B,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    M: HasParams<f64>,
    L: Fn(&M) -> f64,
    B: Fn(&mut M),
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(invalid(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let base = loss(model);
    let again = loss(model);
    if base.to_bits() != again.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "forward is not deterministic ({base} vs {again})"
        )));
    }
    if !base.is_finite() {
        return Err(Error::CheckInvalid(format!("loss is not finite: {base}")));
    }

    model.zero_grad();
    backward(model);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit(&mut |p| analytic.push((p.name().to_string(), p.grad.clone())));

    let mut params = Vec::with_capacity(analytic.len());
    for (j, (name, grads)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for (k, &a) in grads.iter().enumerate() {
            let orig = set_entry(model, j, k, f64::NAN);
            set_entry(model, j, k, orig + eps);
            let plus = loss(model);
            set_entry(model, j, k, orig - eps);
            let minus = loss(model);
            set_entry(model, j, k, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = relative_error(a, numeric);
            if rel > worst || rel.is_nan() {
                worst = if rel.is_nan() { f64::INFINITY } else { rel };
                worst_index = k;
            }
        }
        params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
            worst_index,
            passed: worst <= tol,
        });
    }
    Ok(GradCheckReport { tol, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::Linear;
    use crate::numerics::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn linear_setup() -> (Linear<f64>, Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new("lin", 4, 3, &mut rng);
        let x = Matrix::from_vec(1, 4, vec![0.3, -1.2, 0.7, 2.0]);
        (lin, x)
    }

    #[test]
    fn linear_sum_loss_gradient_is_input_broadcast() {
        let (mut lin, x) = linear_setup();
        let report = grad_check(
            &mut lin,
            |m| m.forward(&x).data().iter().sum(),
            |m| {
                let ones = Matrix::from_vec(1, 3, vec![1.0; 3]);
                m.backward(&x, &ones);
            },
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        for row in lin.weight.grad.chunks(4) {
            assert_eq!(row, x.row(0));
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (mut lin, x) = linear_setup();
        let report = grad_check(
            &mut lin,
            |m| m.forward(&x).data().iter().map(|v| v * v).sum(),
            |m| {
                let y = m.forward(&x);
                let dy = y.map(|v| 4.0 * v); // twice the true gradient
                m.backward(&x, &dy);
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_forward_is_rejected() {
        let (mut lin, x) = linear_setup();
        let calls = Cell::new(0u32);
        let err = grad_check(
            &mut lin,
            |m| {
                calls.set(calls.get() + 1);
                m.forward(&x).data()[0] + calls.get() as f64
            },
            |_| {},
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CheckInvalid(_)));
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let (mut lin, _) = linear_setup();
        assert!(grad_check(&mut lin, |_| 0.0, |_| {}, 1e-2, 1e-4).is_err());
    }
}
