use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layer::{Cache, Layer, LayerSpec, Mode};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Serializable architecture: per-item input shape plus the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// A feed-forward stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations cached by [`Network::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
}

/// Parameter gradients, one flat vector per parameter tensor in
/// [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self(net.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Network {
    pub fn new<R: Rng>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut shape = arch.input_shape.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let layer = Layer::new(spec.clone(), &shape, rng)?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        Ok(Self {
            input_shape: arch.input_shape.clone(),
            layers,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec().clone()).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.output_shape())
            .unwrap_or(&self.input_shape)
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward(&cur, mode)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, Trace { caches }))
    }

    /// Eval-mode forward pass without keeping a trace.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, Mode::Eval)?.0;
        }
        Ok(cur)
    }

    /// Gradient of a scalar objective with respect to the network input,
    /// given the gradient with respect to the output.
    pub fn backward(&self, trace: &Trace, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            g = layer.backward(cache, &g, false)?.0;
        }
        Ok(g)
    }

    /// Like [`Network::backward`] but also returns parameter gradients.
    pub fn backward_full(&self, trace: &Trace, grad: &Tensor) -> Result<(Tensor, Gradients)> {
        let mut g = grad.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, cache) in self.layers.iter().zip(&trace.caches).rev() {
            let (dx, dp) = layer.backward(cache, &g, true)?;
            per_layer.push(dp.unwrap_or_default());
            g = dx;
        }
        per_layer.reverse();
        Ok((g, Gradients(per_layer.into_iter().flatten().collect())))
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, trace: &Trace, momentum: f64) {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            if let Cache::BatchNorm(bn) = cache {
                if let Some((mean, var, count)) = bn.take_stats() {
                    let unbias = *count as f64 / (*count as f64 - 1.0);
                    for (r, m) in layer.buffers[0].iter_mut().zip(mean) {
                        *r = (1.0 - momentum) * *r + momentum * m;
                    }
                    for (r, v) in layer.buffers[1].iter_mut().zip(var) {
                        *r = (1.0 - momentum) * *r + momentum * v * unbias;
                    }
                }
            }
        }
    }

    /// The first `n` layers as a standalone network (shared weights copied).
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.layers.len() {
            return Err(NnError::Shape(format!(
                "cannot keep {n} of {} layers",
                self.layers.len()
            )));
        }
        Ok(Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..n].to_vec(),
        })
    }

    /// Mutable access to one layer's parameter tensors.
    pub fn layer_params_mut(&mut self, index: usize) -> Option<&mut Vec<Vec<f64>>> {
        self.layers.get_mut(index).map(|l| &mut l.params)
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(|p| p.as_slice()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut().map(|p| p.as_mut_slice()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameters followed by buffers, little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for v in layer.params.iter().chain(&layer.buffers).flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(arch: &Architecture, bytes: &[u8]) -> Result<Self> {
        // Initialization values are overwritten below; any rng works.
        let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(arch, &mut rng)?;
        let expected: usize = net
            .layers
            .iter()
            .map(|l| l.params.iter().chain(&l.buffers).map(|p| p.len()).sum::<usize>())
            .sum::<usize>()
            * 8;
        if bytes.len() != expected {
            return Err(NnError::Format(format!(
                "weight blob has {} bytes, architecture needs {expected}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(8);
        for layer in &mut net.layers {
            for v in layer.params.iter_mut().chain(layer.buffers.iter_mut()).flatten() {
                let c = chunks.next().expect("length checked");
                *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            }
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            input_shape: vec![2, 6, 6],
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::BatchNorm { channels: 3 },
                LayerSpec::LeakyRelu { slope: 0.2 },
                LayerSpec::ConvTranspose2d {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Tanh,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: 72,
                    outputs: 4,
                },
                LayerSpec::Sigmoid,
            ],
        }
    }

    #[test]
    fn byte_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(&small_arch(), &mut rng).unwrap();
        let back = Network::from_bytes(&net.architecture(), &net.to_bytes()).unwrap();
        assert_eq!(net, back);
        assert!(Network::from_bytes(&net.architecture(), &net.to_bytes()[1..]).is_err());
    }

    #[test]
    fn truncation_keeps_prefix_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::new(&small_arch(), &mut rng).unwrap();
        let head = net.truncated(3).unwrap();
        assert_eq!(head.output_shape(), &[3, 3, 3]);
        assert!(net.truncated(0).is_err());
        assert!(net.truncated(9).is_err());
    }

    #[test]
    fn rejects_mismatched_architecture() {
        let arch = Architecture {
            input_shape: vec![5],
            layers: vec![LayerSpec::Linear {
                inputs: 4,
                outputs: 2,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Network::new(&arch, &mut rng).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture {
            input_shape: vec![1, 2, 2],
            layers: vec![LayerSpec::BatchNorm { channels: 1 }],
        };
        let mut net = Network::new(&arch, &mut rng).unwrap();
        let x = Tensor::new(vec![2, 1, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let (_, trace) = net.forward(&x, Mode::Train).unwrap();
        net.commit_batch_stats(&trace, 1.0);
        let running_mean = net.layers[0].buffers[0][0];
        assert!((running_mean - 4.5).abs() < 1e-12);
    }
}
