//! Parameterized layers with hand-derived backward passes.
//!
//! Every layer follows the same shape: `forward` is pure and returns whatever
//! the backward pass needs, `backward` accumulates into the parameter
//! gradients and returns the gradient with respect to the layer input.

use rand::Rng;

use super::tensor::{HasParams, Matrix, Parameter, Real};
use crate::error::{invalid, Result};

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform_init<T: Real>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("softmax input contains a non-finite entry"));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Given `a = softmax(z)` and `da`, returns `dz`.
pub fn softmax_backward<T: Real>(a: &[T], da: &[T]) -> Vec<T> {
    let dot: T = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
    a.iter().zip(da).map(|(&x, &y)| x * (y - dot)).collect()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored `[out][in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                uniform_init(rng, inputs * outputs, bound),
            ),
            bias: Parameter::zeros(format!("{name}.bias"), vec![outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let n_in = self.inputs();
        debug_assert_eq!(x.len(), n_in);
        self.weight
            .value
            .chunks(n_in.max(1))
            .zip(&self.bias.value)
            .map(|(w, &b)| b + w.iter().zip(x).map(|(&a, &c)| a * c).sum::<T>())
            .collect()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), self.outputs());
        for r in 0..x.rows() {
            let y = self.forward_vec(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }

    pub fn backward_vec(&mut self, x: &[T], dy: &[T]) -> Vec<T> {
        let n_in = self.inputs();
        let mut dx = vec![T::zero(); n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            self.bias.grad[o] += g;
            let w = &self.weight.value[o * n_in..(o + 1) * n_in];
            let gw = &mut self.weight.grad[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gw[i] += g * x[i];
                dx[i] += g * w[i];
            }
        }
        dx
    }

    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
        let mut dx = Matrix::zeros(x.rows(), self.inputs());
        for r in 0..x.rows() {
            let d = self.backward_vec(x.row(r), dy.row(r));
            dx.row_mut(r).copy_from_slice(&d);
        }
        dx
    }
}

impl<T: Real> HasParams<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 1-D convolution over time with odd kernel width and zero "same" padding.
/// Weight layout is `[out][k][in]`.
#[derive(Clone, Debug)]
pub struct Conv1d<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    kernel: usize,
}

impl<T: Real> Conv1d<T> {
    pub fn new(name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(invalid(format!("conv kernel must be odd, got {kernel}")));
        }
        let fan_in = channels * kernel;
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Ok(Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                vec![channels, kernel, channels],
                uniform_init(rng, channels * kernel * channels, bound),
            ),
            bias: Parameter::zeros(format!("{name}.bias"), vec![channels]),
            kernel,
        })
    }

    fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let (t_len, c) = (x.rows(), self.channels());
        let half = self.kernel / 2;
        let mut out = Matrix::zeros(t_len, c);
        for t in 0..t_len {
            let y = out.row_mut(t);
            y.copy_from_slice(&self.bias.value);
            for j in 0..self.kernel {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xin = x.row(src as usize);
                for (o, yo) in y.iter_mut().enumerate() {
                    let w = &self.weight.value
                        [(o * self.kernel + j) * c..(o * self.kernel + j + 1) * c];
                    *yo += w.iter().zip(xin).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
        let (t_len, c) = (x.rows(), self.channels());
        let half = self.kernel / 2;
        let mut dx = Matrix::zeros(t_len, c);
        for t in 0..t_len {
            let g = dy.row(t);
            for (o, &go) in g.iter().enumerate() {
                self.bias.grad[o] += go;
            }
            for j in 0..self.kernel {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                let xin = x.row(src).to_vec();
                let dxr = dx.row_mut(src);
                for (o, &go) in g.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    let base = (o * self.kernel + j) * c;
                    for i in 0..c {
                        self.weight.grad[base + i] += go * xin[i];
                        dxr[i] += go * self.weight.value[base + i];
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> HasParams<T> for Conv1d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Residual feed-forward block: `y = x + relu(conv(x))`.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv1d<T>,
}

/// Pre-activation kept for the ReLU mask.
pub struct ConvBlockCache<T> {
    pre: Matrix<T>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(&format!("{name}.conv"), channels, kernel, rng)?,
        })
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, ConvBlockCache<T>) {
        let pre = self.conv.forward(x);
        let mut y = x.clone();
        for (a, &p) in y.data_mut().iter_mut().zip(pre.data()) {
            *a += p.max(T::zero());
        }
        (y, ConvBlockCache { pre })
    }

    pub fn backward(
        &mut self,
        x: &Matrix<T>,
        cache: &ConvBlockCache<T>,
        dy: &Matrix<T>,
    ) -> Matrix<T> {
        let mut dpre = dy.clone();
        for (d, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            if p <= T::zero() {
                *d = T::zero();
            }
        }
        let mut dx = self.conv.backward(x, &dpre);
        dx.add_assign(dy);
        dx
    }
}

impl<T: Real> HasParams<T> for ConvBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv.visit_mut(f)
    }
}

/// A stack of [`ConvBlock`]s applied in sequence.
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

pub struct ConvStackCache<T> {
    inputs: Vec<Matrix<T>>,
    caches: Vec<ConvBlockCache<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn new(
        name: &str,
        n: usize,
        channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let blocks = (0..n)
            .map(|i| ConvBlock::new(&format!("{name}.{i}"), channels, kernel, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, ConvStackCache<T>) {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(&h);
            inputs.push(h);
            caches.push(c);
            h = y;
        }
        (h, ConvStackCache { inputs, caches })
    }

    pub fn backward(&mut self, cache: &ConvStackCache<T>, dy: &Matrix<T>) -> Matrix<T> {
        let mut d = dy.clone();
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            d = b.backward(&cache.inputs[i], &cache.caches[i], &d);
        }
        d
    }
}

impl<T: Real> HasParams<T> for ConvStack<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.blocks.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.blocks.visit_mut(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]).unwrap(), vec![0.5, 0.5]);
        let s = softmax(&[1000.0f64, 1000.0, 1000.0]).unwrap();
        for v in s {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        // e^1 / (e^1 + e^2) and e^2 / (e^1 + e^2), evaluated by hand.
        let s = softmax(&[1.0f64, 2.0]).unwrap();
        assert_abs_diff_eq!(s[0], 0.26894, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.73106, epsilon = 1e-4);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax::<f64>(&[]).is_err());
        assert!(softmax(&[1.0f64, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut rng = rand::thread_rng();
        assert!(Conv1d::<f64>::new("c", 2, 2, &mut rng).is_err());
    }
}
