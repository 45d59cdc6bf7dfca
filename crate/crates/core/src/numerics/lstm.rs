use rand::Rng;

use super::layers::{sigmoid, uniform_init};
use super::tensor::{HasParams, Matrix, Parameter, Real};

/// Single-direction LSTM. Gate order in the stacked weights is
/// input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm<T> {
    pub w_input: Parameter<T>,
    pub w_hidden: Parameter<T>,
    pub bias: Parameter<T>,
    hidden: usize,
}

/// Per-step activations kept for backpropagation through time.
pub struct LstmCache<T> {
    gates: Matrix<T>,
    cells: Matrix<T>,
    hidden: Matrix<T>,
}

impl<T: Real> LstmCache<T> {
    pub fn hidden_states(&self) -> &Matrix<T> {
        &self.hidden
    }
}

impl<T: Real> Lstm<T> {
    pub fn new(name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut bias = vec![T::zero(); 4 * hidden];
        // forget gate starts open
        for b in &mut bias[hidden..2 * hidden] {
            *b = T::one();
        }
        Self {
            w_input: Parameter::new(
                format!("{name}.w_input"),
                vec![4 * hidden, inputs],
                uniform_init(rng, 4 * hidden * inputs, bound),
            ),
            w_hidden: Parameter::new(
                format!("{name}.w_hidden"),
                vec![4 * hidden, hidden],
                uniform_init(rng, 4 * hidden * hidden, bound),
            ),
            bias: Parameter::new(format!("{name}.bias"), vec![4 * hidden], bias),
            hidden,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[1]
    }

    /// Runs over all rows of `x` from a zero state. Returns hidden states `[F][H]`.
    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, LstmCache<T>) {
        let (steps, h_len, d_in) = (x.rows(), self.hidden, self.input_size());
        let mut gates = Matrix::zeros(steps, 4 * h_len);
        let mut cells = Matrix::zeros(steps, h_len);
        let mut hs = Matrix::zeros(steps, h_len);
        let mut h_prev = vec![T::zero(); h_len];
        let mut c_prev = vec![T::zero(); h_len];
        for t in 0..steps {
            let xt = x.row(t);
            let z = gates.row_mut(t);
            for (g, zg) in z.iter_mut().enumerate() {
                let wi = &self.w_input.value[g * d_in..(g + 1) * d_in];
                let wh = &self.w_hidden.value[g * h_len..(g + 1) * h_len];
                *zg = self.bias.value[g]
                    + wi.iter().zip(xt).map(|(&a, &b)| a * b).sum::<T>()
                    + wh.iter().zip(&h_prev).map(|(&a, &b)| a * b).sum::<T>();
            }
            for k in 0..h_len {
                z[k] = sigmoid(z[k]);
                z[h_len + k] = sigmoid(z[h_len + k]);
                z[2 * h_len + k] = z[2 * h_len + k].tanh();
                z[3 * h_len + k] = sigmoid(z[3 * h_len + k]);
            }
            let z = gates.row(t).to_vec();
            for k in 0..h_len {
                let c = z[h_len + k] * c_prev[k] + z[k] * z[2 * h_len + k];
                cells.set(t, k, c);
                hs.set(t, k, z[3 * h_len + k] * c.tanh());
            }
            h_prev.copy_from_slice(hs.row(t));
            c_prev.copy_from_slice(cells.row(t));
        }
        let out = hs.clone();
        (
            out,
            LstmCache {
                gates,
                cells,
                hidden: hs,
            },
        )
    }

    /// `dh` is the loss gradient on each hidden state. Returns `dx`.
    pub fn backward(&mut self, x: &Matrix<T>, cache: &LstmCache<T>, dh: &Matrix<T>) -> Matrix<T> {
        let (steps, h_len, d_in) = (x.rows(), self.hidden, self.input_size());
        let mut dx = Matrix::zeros(steps, d_in);
        let mut dh_next = vec![T::zero(); h_len];
        let mut dc_next = vec![T::zero(); h_len];
        let mut dz = vec![T::zero(); 4 * h_len];
        let one = T::one();
        for t in (0..steps).rev() {
            let z = cache.gates.row(t);
            let c = cache.cells.row(t);
            for k in 0..h_len {
                let (i, f, g, o) = (z[k], z[h_len + k], z[2 * h_len + k], z[3 * h_len + k]);
                let tc = c[k].tanh();
                let dht = dh.get(t, k) + dh_next[k];
                let dct = dc_next[k] + dht * o * (one - tc * tc);
                let c_prev = if t > 0 {
                    cache.cells.get(t - 1, k)
                } else {
                    T::zero()
                };
                dz[k] = dct * g * i * (one - i);
                dz[h_len + k] = dct * c_prev * f * (one - f);
                dz[2 * h_len + k] = dct * i * (one - g * g);
                dz[3 * h_len + k] = dht * tc * o * (one - o);
                dc_next[k] = dct * f;
            }
            let xt = x.row(t);
            dh_next.iter_mut().for_each(|v| *v = T::zero());
            for (gi, &d) in dz.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                self.bias.grad[gi] += d;
                let wi = &self.w_input.value[gi * d_in..(gi + 1) * d_in];
                let gwi = &mut self.w_input.grad[gi * d_in..(gi + 1) * d_in];
                let dxt = dx.row_mut(t);
                for j in 0..d_in {
                    gwi[j] += d * xt[j];
                    dxt[j] += d * wi[j];
                }
                if t > 0 {
                    let hp = cache.hidden.row(t - 1);
                    let wh = &self.w_hidden.value[gi * h_len..(gi + 1) * h_len];
                    let gwh = &mut self.w_hidden.grad[gi * h_len..(gi + 1) * h_len];
                    for j in 0..h_len {
                        gwh[j] += d * hp[j];
                        dh_next[j] += d * wh[j];
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> HasParams<T> for Lstm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.w_input);
        f(&self.w_hidden);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.w_input);
        f(&mut self.w_hidden);
        f(&mut self.bias);
    }
}
