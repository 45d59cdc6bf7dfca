use crate::error::{invalid, Result};
use crate::features::RepresentationStack;
use crate::numerics::layers::{softmax_backward, softmax_unchecked};
use crate::numerics::{HasParams, Matrix, Parameter, Real};

/// Learnable per-layer logits; the mixing weights are their softmax.
#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub logits: Parameter<T>,
}

impl<T: Real> LayerWeights<T> {
    /// Uniform weights (all logits zero).
    pub fn uniform(name: &str, layers: usize) -> Self {
        Self {
            logits: Parameter::zeros(format!("{name}.layer_logits"), vec![layers]),
        }
    }

    pub fn from_logits(name: &str, logits: Vec<T>) -> Self {
        let n = logits.len();
        Self {
            logits: Parameter::new(format!("{name}.layer_logits"), vec![n], logits),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn weights(&self) -> Vec<T> {
        softmax_unchecked(&self.logits.value)
    }

    /// `out[f] = Σ_l w[l] · stack[l][f]`.
    pub fn weighted_sum(&self, stack: &RepresentationStack) -> Result<Matrix<T>> {
        if stack.layers() != self.len() {
            return Err(invalid(format!(
                "layer weights have {} entries but the stack has {} layers",
                self.len(),
                stack.layers()
            )));
        }
        let w = self.weights();
        let (frames, dims) = (stack.frames(), stack.dims());
        let mut out = Matrix::zeros(frames, dims);
        for (l, &wl) in w.iter().enumerate() {
            for (o, &x) in out.data_mut().iter_mut().zip(stack.layer(l)) {
                *o += wl * T::of_f32(x);
            }
        }
        Ok(out)
    }

    /// Accumulates the logit gradient given the gradient of the weighted sum.
    pub fn backward(&mut self, stack: &RepresentationStack, d_out: &Matrix<T>) {
        let w = self.weights();
        let dw: Vec<T> = (0..self.len())
            .map(|l| {
                stack
                    .layer(l)
                    .iter()
                    .zip(d_out.data())
                    .map(|(&x, &g)| T::of_f32(x) * g)
                    .sum()
            })
            .collect();
        for (g, d) in self.logits.grad.iter_mut().zip(softmax_backward(&w, &dw)) {
            *g += d;
        }
    }
}

impl<T: Real> HasParams<T> for LayerWeights<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.logits)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::StackSource;
    use approx::assert_abs_diff_eq;

    fn stack(layers: Vec<Vec<f32>>, frames: usize, dims: usize) -> RepresentationStack {
        let n = layers.len();
        RepresentationStack::new(n, frames, dims, layers.concat(), 0.02, StackSource::Pseudo)
            .unwrap()
    }

    #[test]
    fn hand_computed_mix() {
        // softmax([0, ln2, ln4]) = [1, 2, 4] / 7
        let lw = LayerWeights::<f64>::from_logits("e", vec![0.0, 2f64.ln(), 4f64.ln()]);
        let w = lw.weights();
        assert_abs_diff_eq!(w[0], 1.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 2.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[2], 4.0 / 7.0, epsilon = 1e-12);
        let s = stack(vec![vec![2.0], vec![4.0], vec![6.0]], 1, 1);
        let out = lw.weighted_sum(&s).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 34.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn large_margin_selects_one_layer() {
        let lw = LayerWeights::<f64>::from_logits("e", vec![0.0, 50.0, 0.0]);
        let s = stack(
            vec![
                vec![1.0, -2.0, 0.5, 9.0],
                vec![3.0, 4.0, -1.0, 0.25],
                vec![7.0; 4],
            ],
            2,
            2,
        );
        let out = lw.weighted_sum(&s).unwrap();
        for (o, &x) in out.data().iter().zip(s.layer(1)) {
            assert_abs_diff_eq!(*o, x as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn uniform_logits_average_layers() {
        let lw = LayerWeights::<f64>::uniform("e", 2);
        let s = stack(vec![vec![1.0, 3.0], vec![5.0, -3.0]], 2, 1);
        let out = lw.weighted_sum(&s).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.get(1, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let lw = LayerWeights::<f64>::uniform("e", 4);
        let s = stack(vec![vec![1.0], vec![2.0]], 1, 1);
        assert!(lw.weighted_sum(&s).is_err());
    }
}
