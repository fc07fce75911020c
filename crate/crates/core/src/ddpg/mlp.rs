//! Fully connected networks over row-major mini-batches, with manual reverse mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// ReLU hidden layers followed by an output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(x: &DMatrix<f64>, layer: &Dense) -> DMatrix<f64> {
    let mut z = x * layer.weight.transpose();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(layer.bias[j]);
    }
    z
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`. Hidden layers use fan-in uniform init;
    /// the last layer is drawn from `±final_scale`.
    pub fn new(
        sizes: &[usize],
        output: OutputActivation,
        final_scale: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let a = if k + 1 == n {
                    final_scale
                } else {
                    1.0 / (w[0] as f64).sqrt()
                };
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-a..=a)),
                    bias: DVector::from_fn(w[1], |_, _| rng.random_range(-a..=a)),
                }
            })
            .collect();
        Ok(Self { layers, output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).output
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> MlpCache {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer);
            inputs.push(h);
            h = if k + 1 < n {
                z.map(|v| v.max(0.0))
            } else {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Sigmoid => z.map(sigmoid),
                }
            };
            pre.push(z);
        }
        MlpCache {
            inputs,
            pre,
            output: h,
        }
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, d_out: &DMatrix<f64>) -> (Mlp, DMatrix<f64>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut d = match self.output {
            OutputActivation::Identity => d_out.clone(),
            OutputActivation::Sigmoid => d_out.zip_map(&cache.output, |g, y| g * y * (1.0 - y)),
        };
        for k in (0..n).rev() {
            if k + 1 < n {
                d.zip_apply(&cache.pre[k], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let weight = d.transpose() * &cache.inputs[k];
            let bias = DVector::from_iterator(d.ncols(), d.column_iter().map(|c| c.sum()));
            grads.push(Dense { weight, bias });
            d = &d * &self.layers[k].weight;
        }
        grads.reverse();
        (
            Mlp {
                layers: grads,
                output: self.output,
            },
            d,
        )
    }

    /// Per layer: weight (column-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = flat[at];
                at += 1;
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }

    /// `self = xi * online + (1 - xi) * self`.
    pub fn soft_update_from(&mut self, online: &Mlp, xi: f64) {
        debug_assert!(self.same_shape(online));
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weight
                .zip_apply(&o.weight, |a, b| *a = xi * b + (1.0 - xi) * *a);
            t.bias
                .zip_apply(&o.bias, |a, b| *a = xi * b + (1.0 - xi) * *a);
        }
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Mlp) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn identity_single_layer_is_affine() {
        let net = Mlp {
            layers: vec![Dense {
                weight: DMatrix::from_row_slice(1, 2, &[2.0, -1.0]),
                bias: DVector::from_vec(vec![0.5]),
            }],
            output: OutputActivation::Identity,
        };
        let y = net.forward(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 0.0]));
        assert_eq!(y.as_slice(), &[1.5, 6.5]);
    }

    #[test]
    fn soft_update_with_unit_coefficient_copies() {
        let mut rng = seeded(3);
        let a = Mlp::new(&[3, 4, 2], OutputActivation::Sigmoid, 0.1, &mut rng).unwrap();
        let mut b = Mlp::new(&[3, 4, 2], OutputActivation::Sigmoid, 0.1, &mut rng).unwrap();
        b.soft_update_from(&a, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = seeded(4);
        let a = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 0.1, &mut rng).unwrap();
        let mut b = Mlp::new(&[2, 3, 1], OutputActivation::Identity, 0.1, &mut rng).unwrap();
        b.set_flat(&a.flatten()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 13);
    }
}
