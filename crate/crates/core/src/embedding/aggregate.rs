//! Frame-sequence aggregators: average pooling and soft attention over
//! LSTM hidden states. Both finish with a learnable projection to the
//! embedding width so downstream conditioning does not depend on which one
//! is used.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::layers::{softmax_backward, softmax_unchecked, uniform_init};
use crate::numerics::lstm::LstmCache;
use crate::numerics::{HasParams, Linear, Lstm, Matrix, Parameter, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Average,
    Attentive,
}

impl std::str::FromStr for AggregatorKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "attentive" => Ok(Self::Attentive),
            other => Err(invalid(format!(
                "unknown aggregator `{other}` (expected average or attentive)"
            ))),
        }
    }
}

/// Mean over frames followed by a projection.
#[derive(Clone, Debug)]
pub struct AveragePool<T> {
    pub proj: Linear<T>,
}

/// Recurrent soft-attention pooling.
///
/// Score per frame `s_f = v · tanh(h_f) + b`, attention `a = softmax(s)`,
/// pooled vector `Σ_f a_f h_f`, then the projection.
#[derive(Clone, Debug)]
pub struct AttentivePool<T> {
    pub lstm: Lstm<T>,
    pub score: Parameter<T>,
    pub score_bias: Parameter<T>,
    pub proj: Linear<T>,
}

#[derive(Clone, Debug)]
pub enum Aggregator<T> {
    Average(AveragePool<T>),
    Attentive(AttentivePool<T>),
}

pub enum AggregateCache<T> {
    Average {
        mean: Vec<T>,
        frames: usize,
    },
    Attentive {
        lstm: LstmCache<T>,
        attention: Vec<T>,
        pooled: Vec<T>,
    },
}

impl<T: Real> AggregateCache<T> {
    /// Attention weights, if the aggregator has any.
    pub fn attention(&self) -> Option<&[T]> {
        match self {
            AggregateCache::Attentive { attention, .. } => Some(attention),
            AggregateCache::Average { .. } => None,
        }
    }
}

/// Column sums taken over sorted values, so any reordering of the rows
/// gives bit-identical results.
fn order_free_col_sums<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let mut col = Vec::with_capacity(m.rows());
    (0..m.cols())
        .map(|c| {
            col.clear();
            col.extend(m.iter_rows().map(|r| r[c]));
            col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            col.iter().fold(T::zero(), |acc, &v| acc + v)
        })
        .collect()
}

impl<T: Real> Aggregator<T> {
    pub fn new(
        kind: AggregatorKind,
        name: &str,
        dims: usize,
        hidden: usize,
        embed: usize,
        rng: &mut impl Rng,
    ) -> Self {
        match kind {
            AggregatorKind::Average => Aggregator::Average(AveragePool {
                proj: Linear::new(&format!("{name}.proj"), dims, embed, rng),
            }),
            AggregatorKind::Attentive => {
                let lstm = Lstm::new(&format!("{name}.lstm"), dims, hidden, rng);
                let bound = 1.0 / (hidden as f64).sqrt();
                Aggregator::Attentive(AttentivePool {
                    lstm,
                    score: Parameter::new(
                        format!("{name}.score"),
                        vec![hidden],
                        uniform_init(rng, hidden, bound),
                    ),
                    score_bias: Parameter::zeros(format!("{name}.score_bias"), vec![1]),
                    proj: Linear::new(&format!("{name}.proj"), hidden, embed, rng),
                })
            }
        }
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::Average(_) => AggregatorKind::Average,
            Aggregator::Attentive(_) => AggregatorKind::Attentive,
        }
    }

    pub fn forward(&self, frames: &Matrix<T>) -> Result<(Vec<T>, AggregateCache<T>)> {
        let f_len = frames.rows();
        if f_len == 0 {
            return Err(invalid("cannot aggregate an empty frame sequence"));
        }
        match self {
            Aggregator::Average(p) => {
                let scale = T::one() / T::lit(f_len as f64);
                let mean: Vec<T> = order_free_col_sums(frames)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                let e = p.proj.forward_vec(&mean);
                Ok((
                    e,
                    AggregateCache::Average {
                        mean,
                        frames: f_len,
                    },
                ))
            }
            Aggregator::Attentive(p) => {
                let (hs, lstm) = p.lstm.forward(frames);
                let scores: Vec<T> = hs
                    .iter_rows()
                    .map(|h| {
                        p.score_bias.value[0]
                            + h.iter()
                                .zip(&p.score.value)
                                .map(|(&x, &v)| x.tanh() * v)
                                .sum::<T>()
                    })
                    .collect();
                let attention = softmax_unchecked(&scores);
                let mut pooled = vec![T::zero(); hs.cols()];
                for (h, &a) in hs.iter_rows().zip(&attention) {
                    for (o, &x) in pooled.iter_mut().zip(h) {
                        *o += a * x;
                    }
                }
                let e = p.proj.forward_vec(&pooled);
                Ok((
                    e,
                    AggregateCache::Attentive {
                        lstm,
                        attention,
                        pooled,
                    },
                ))
            }
        }
    }

    /// Returns the gradient with respect to the input frames.
    pub fn backward(
        &mut self,
        frames: &Matrix<T>,
        cache: &AggregateCache<T>,
        d_embed: &[T],
    ) -> Matrix<T> {
        match (self, cache) {
            (
                Aggregator::Average(p),
                AggregateCache::Average {
                    mean,
                    frames: f_len,
                },
            ) => {
                let d_mean = p.proj.backward_vec(mean, d_embed);
                let scale = T::one() / T::lit(*f_len as f64);
                let row: Vec<T> = d_mean.iter().map(|&g| g * scale).collect();
                let mut dx = Matrix::zeros(*f_len, row.len());
                dx.add_row_broadcast(&row);
                dx
            }
            (
                Aggregator::Attentive(p),
                AggregateCache::Attentive {
                    lstm,
                    attention,
                    pooled,
                },
            ) => {
                let d_pooled = p.proj.backward_vec(pooled, d_embed);
                let hs = lstm.hidden_states();
                let (f_len, h_len) = (hs.rows(), hs.cols());
                let mut dh = Matrix::zeros(f_len, h_len);
                let mut d_att = vec![T::zero(); f_len];
                for f in 0..f_len {
                    let h = hs.row(f);
                    d_att[f] = h.iter().zip(&d_pooled).map(|(&x, &g)| x * g).sum();
                    for (d, &g) in dh.row_mut(f).iter_mut().zip(&d_pooled) {
                        *d = attention[f] * g;
                    }
                }
                let d_scores = softmax_backward(attention, &d_att);
                let one = T::one();
                for f in 0..f_len {
                    let ds = d_scores[f];
                    p.score_bias.grad[0] += ds;
                    let h = hs.row(f).to_vec();
                    let dhf = dh.row_mut(f);
                    for k in 0..h_len {
                        let th = h[k].tanh();
                        p.score.grad[k] += ds * th;
                        dhf[k] += ds * p.score.value[k] * (one - th * th);
                    }
                }
                p.lstm.backward(frames, lstm, &dh)
            }
            _ => panic!("aggregator cache does not match aggregator kind"),
        }
    }
}

impl<T: Real> HasParams<T> for Aggregator<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        match self {
            Aggregator::Average(p) => p.proj.visit(f),
            Aggregator::Attentive(p) => {
                p.lstm.visit(f);
                f(&p.score);
                f(&p.score_bias);
                p.proj.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match self {
            Aggregator::Average(p) => p.proj.visit_mut(f),
            Aggregator::Attentive(p) => {
                p.lstm.visit_mut(f);
                f(&mut p.score);
                f(&mut p.score_bias);
                p.proj.visit_mut(f);
            }
        }
    }
}
