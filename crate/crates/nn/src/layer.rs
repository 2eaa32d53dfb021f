use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::im2col::{col2im, from_channel_major, im2col, to_channel_major, ConvGeometry};
use crate::tensor::{gemm, Tensor};
use crate::{NnError, Result};

const BN_EPS: f64 = 1e-5;

/// Architecture description of one layer. Shapes exclude the batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel batch normalization over `[C, ...]` items.
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    /// `(tanh(x) + 1) / 2`, a tanh head remapped onto `[0, 1]`.
    UnitTanh,
    /// Clamp onto `[0, 1]`; the gradient passes where the input is inside.
    ClampUnit,
    Reshape {
        shape: Vec<usize>,
    },
    Flatten,
    GlobalAvgPool,
}

impl LayerSpec {
    /// Per-item output shape for a per-item input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(NnError::Shape(format!("{self:?}: {msg}")));
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                if input != [inputs] {
                    return bad(format!("expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return bad(format!("expects [C, H, W], got {input:?}"));
                };
                if *c != in_channels || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("incompatible input {input:?}"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return bad(format!("expects [C, H, W], got {input:?}"));
                };
                let oh = (h - 1) * stride + kernel;
                let ow = (w - 1) * stride + kernel;
                if *c != in_channels || oh < 2 * padding + 1 || ow < 2 * padding + 1 {
                    return bad(format!("incompatible input {input:?}"));
                }
                let (oh, ow) = (oh - 2 * padding, ow - 2 * padding);
                // Only exact inverses of a strided conv are supported.
                if (oh + 2 * padding - kernel) % stride != 0 || (ow + 2 * padding - kernel) % stride != 0
                {
                    return bad("output size not an exact conv inverse".into());
                }
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return bad(format!("expects {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu
            | LayerSpec::LeakyRelu { .. }
            | LayerSpec::Tanh
            | LayerSpec::Sigmoid
            | LayerSpec::UnitTanh
            | LayerSpec::ClampUnit => Ok(input.to_vec()),
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(format!("cannot reshape {input:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => bad(format!("expects [C, H, W], got {input:?}")),
            },
        }
    }

    fn param_sizes(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => vec![inputs * outputs, outputs],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![in_channels * out_channels * kernel * kernel, out_channels],
            LayerSpec::BatchNorm { channels } => vec![channels, channels],
            _ => Vec::new(),
        }
    }

    fn buffer_sizes(&self) -> Vec<usize> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![channels, channels],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; outputs are per-item independent.
    Eval,
}

/// A layer with its trainable parameters and (for batch norm) running
/// statistics stored as buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Vec<Vec<f64>>,
    pub(crate) buffers: Vec<Vec<f64>>,
    pub(crate) input_shape: Vec<usize>,
    pub(crate) output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum Cache {
    Linear { input: Vec<f64>, batch: usize },
    Conv { cols: Vec<f64>, geometry: ConvGeometry },
    ConvTranspose { input_cm: Vec<f64>, batch: usize },
    BatchNorm(BnCache),
    Saved(Vec<f64>),
    None,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pub(crate) batch_stats: Option<(Vec<f64>, Vec<f64>, usize)>,
}

impl Layer {
    pub(crate) fn new<R: Rng>(spec: LayerSpec, input_shape: &[usize], rng: &mut R) -> Result<Self> {
        let output_shape = spec.output_shape(input_shape)?;
        let mut params: Vec<Vec<f64>> = spec.param_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let mut buffers: Vec<Vec<f64>> =
            spec.buffer_sizes().into_iter().map(|n| vec![0.0; n]).collect();
        let fan_in = match spec {
            LayerSpec::Linear { inputs, .. } => Some(inputs as f64),
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => Some((in_channels * kernel * kernel) as f64),
            LayerSpec::ConvTranspose2d {
                in_channels,
                kernel,
                stride,
                ..
            } => Some((in_channels * kernel * kernel) as f64 / (stride * stride) as f64),
            _ => None,
        };
        if let Some(fan_in) = fan_in {
            let std = (2.0 / fan_in.max(1.0)).sqrt();
            for w in params[0].iter_mut() {
                let v: f64 = StandardNormal.sample(rng);
                *w = v * std;
            }
        }
        if let LayerSpec::BatchNorm { .. } = spec {
            params[0].fill(1.0);
            buffers[1].fill(1.0);
        }
        Ok(Self {
            spec,
            params,
            buffers,
            input_shape: input_shape.to_vec(),
            output_shape,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub(crate) fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        if x.item_len() != self.input_shape.iter().product::<usize>() {
            return Err(NnError::Shape(format!(
                "{:?}: input item of {} values, expected {:?}",
                self.spec,
                x.item_len(),
                self.input_shape
            )));
        }
        let batch = x.batch();
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(&self.output_shape);
        let xd = x.data();
        let (out, cache) = match self.spec {
            LayerSpec::Linear { inputs, outputs } => {
                let mut y = vec![0.0; batch * outputs];
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(&self.params[1]);
                }
                gemm(batch, inputs, outputs, xd, false, &self.params[0], true, &mut y, true);
                (
                    y,
                    Cache::Linear {
                        input: xd.to_vec(),
                        batch,
                    },
                )
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeometry {
                    batch,
                    channels: in_channels,
                    height: self.input_shape[1],
                    width: self.input_shape[2],
                    kernel,
                    stride,
                    padding,
                };
                let cols = im2col(xd, &g);
                let ncols = g.cols();
                let mut y_cm = vec![0.0; out_channels * ncols];
                gemm(out_channels, g.rows(), ncols, &self.params[0], false, &cols, false, &mut y_cm, false);
                let plane = ncols / batch.max(1);
                let mut y = from_channel_major(&y_cm, batch, out_channels, plane);
                add_channel_bias(&mut y, &self.params[1], plane);
                (y, Cache::Conv { cols, geometry: g })
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let in_plane = self.input_shape[1] * self.input_shape[2];
                let x_cm = to_channel_major(xd, batch, in_channels, in_plane);
                let rows = out_channels * kernel * kernel;
                let ncols = batch * in_plane;
                let mut cols = vec![0.0; rows * ncols];
                gemm(rows, in_channels, ncols, &self.params[0], true, &x_cm, false, &mut cols, false);
                let g = ConvGeometry {
                    batch,
                    channels: out_channels,
                    height: self.output_shape[1],
                    width: self.output_shape[2],
                    kernel,
                    stride,
                    padding,
                };
                let mut y = col2im(&cols, &g);
                add_channel_bias(&mut y, &self.params[1], self.output_shape[1] * self.output_shape[2]);
                (y, Cache::ConvTranspose { input_cm: x_cm, batch })
            }
            LayerSpec::BatchNorm { channels } => {
                let plane: usize = self.input_shape[1..].iter().product();
                let count = batch * plane;
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        if count < 2 {
                            return Err(NnError::Shape(
                                "batch norm in train mode needs at least 2 values per channel".into(),
                            ));
                        }
                        let (m, v) = channel_stats(xd, batch, channels, plane);
                        (m.clone(), v.clone(), Some((m, v, count)))
                    }
                    Mode::Eval => (self.buffers[0].clone(), self.buffers[1].clone(), None),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; xd.len()];
                let mut y = vec![0.0; xd.len()];
                for n in 0..batch {
                    for c in 0..channels {
                        let off = (n * channels + c) * plane;
                        for i in off..off + plane {
                            let h = (xd[i] - mean[c]) * inv_std[c];
                            xhat[i] = h;
                            y[i] = self.params[0][c] * h + self.params[1][c];
                        }
                    }
                }
                (
                    y,
                    Cache::BatchNorm(BnCache {
                        xhat,
                        inv_std,
                        batch_stats,
                    }),
                )
            }
            LayerSpec::Relu => (xd.iter().map(|&v| v.max(0.0)).collect(), Cache::Saved(xd.to_vec())),
            LayerSpec::LeakyRelu { slope } => (
                xd.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
                Cache::Saved(xd.to_vec()),
            ),
            LayerSpec::Tanh => {
                let y: Vec<f64> = xd.iter().map(|v| v.tanh()).collect();
                (y.clone(), Cache::Saved(y))
            }
            LayerSpec::Sigmoid => {
                let y: Vec<f64> = xd.iter().map(|&v| sigmoid(v)).collect();
                (y.clone(), Cache::Saved(y))
            }
            LayerSpec::UnitTanh => {
                let y: Vec<f64> = xd.iter().map(|v| 0.5 * (v.tanh() + 1.0)).collect();
                (y.clone(), Cache::Saved(y))
            }
            LayerSpec::ClampUnit => (
                xd.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                Cache::Saved(xd.to_vec()),
            ),
            LayerSpec::Reshape { .. } | LayerSpec::Flatten => (xd.to_vec(), Cache::None),
            LayerSpec::GlobalAvgPool => {
                let c = self.input_shape[0];
                let plane = self.input_shape[1] * self.input_shape[2];
                let y = xd
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect::<Vec<_>>();
                debug_assert_eq!(y.len(), batch * c);
                (y, Cache::None)
            }
        };
        Ok((Tensor::new(out_shape, out)?, cache))
    }

    /// Returns the input gradient and, when requested, parameter gradients in
    /// the same order as `params`.
    pub(crate) fn backward(
        &self,
        cache: &Cache,
        grad: &Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Option<Vec<Vec<f64>>>)> {
        let batch = grad.batch();
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(&self.input_shape);
        let gd = grad.data();
        let (dx, dparams) = match (&self.spec, cache) {
            (&LayerSpec::Linear { inputs, outputs }, Cache::Linear { input, batch }) => {
                let batch = *batch;
                let mut dx = vec![0.0; batch * inputs];
                gemm(batch, outputs, inputs, gd, false, &self.params[0], false, &mut dx, false);
                let dp = want_params.then(|| {
                    let mut dw = vec![0.0; outputs * inputs];
                    gemm(outputs, batch, inputs, gd, true, input, false, &mut dw, false);
                    let mut db = vec![0.0; outputs];
                    for row in gd.chunks(outputs) {
                        for (b, g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    vec![dw, db]
                });
                (dx, dp)
            }
            (&LayerSpec::Conv2d { out_channels, .. }, Cache::Conv { cols, geometry }) => {
                let ncols = geometry.cols();
                let plane = ncols / batch.max(1);
                let g_cm = to_channel_major(gd, batch, out_channels, plane);
                let rows = geometry.rows();
                let mut dcols = vec![0.0; rows * ncols];
                gemm(rows, out_channels, ncols, &self.params[0], true, &g_cm, false, &mut dcols, false);
                let dx = col2im(&dcols, geometry);
                let dp = want_params.then(|| {
                    let mut dw = vec![0.0; out_channels * rows];
                    gemm(out_channels, ncols, rows, &g_cm, false, cols, true, &mut dw, false);
                    let db = g_cm.chunks(ncols).map(|c| c.iter().sum()).collect();
                    vec![dw, db]
                });
                (dx, dp)
            }
            (
                &LayerSpec::ConvTranspose2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                Cache::ConvTranspose { input_cm, batch },
            ) => {
                let batch = *batch;
                let g = ConvGeometry {
                    batch,
                    channels: out_channels,
                    height: self.output_shape[1],
                    width: self.output_shape[2],
                    kernel,
                    stride,
                    padding,
                };
                let dcols = im2col(gd, &g);
                let rows = g.rows();
                let ncols = g.cols();
                let mut dx_cm = vec![0.0; in_channels * ncols];
                gemm(in_channels, rows, ncols, &self.params[0], false, &dcols, false, &mut dx_cm, false);
                let in_plane = self.input_shape[1] * self.input_shape[2];
                let dx = from_channel_major(&dx_cm, batch, in_channels, in_plane);
                let dp = want_params.then(|| {
                    let mut dw = vec![0.0; in_channels * rows];
                    gemm(in_channels, ncols, rows, input_cm, false, &dcols, true, &mut dw, false);
                    let out_plane = self.output_shape[1] * self.output_shape[2];
                    let mut db = vec![0.0; out_channels];
                    for (i, chunk) in gd.chunks(out_plane).enumerate() {
                        db[i % out_channels] += chunk.iter().sum::<f64>();
                    }
                    vec![dw, db]
                });
                (dx, dp)
            }
            (&LayerSpec::BatchNorm { channels }, Cache::BatchNorm(bn)) => {
                let plane: usize = self.input_shape[1..].iter().product();
                let gamma = &self.params[0];
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let off = (n * channels + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] += gd[i] * bn.xhat[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                match &bn.batch_stats {
                    Some((_, _, count)) => {
                        let m = *count as f64;
                        for n in 0..batch {
                            for c in 0..channels {
                                let off = (n * channels + c) * plane;
                                let k = gamma[c] * bn.inv_std[c] / m;
                                for i in off..off + plane {
                                    dx[i] = k * (m * gd[i] - dbeta[c] - bn.xhat[i] * dgamma[c]);
                                }
                            }
                        }
                    }
                    None => {
                        for n in 0..batch {
                            for c in 0..channels {
                                let off = (n * channels + c) * plane;
                                let k = gamma[c] * bn.inv_std[c];
                                for i in off..off + plane {
                                    dx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                }
                (dx, want_params.then(|| vec![dgamma, dbeta]))
            }
            (LayerSpec::Relu, Cache::Saved(x)) => (
                gd.iter().zip(x).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect(),
                want_params.then(Vec::new),
            ),
            (&LayerSpec::LeakyRelu { slope }, Cache::Saved(x)) => (
                gd.iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                    .collect(),
                want_params.then(Vec::new),
            ),
            (LayerSpec::Tanh, Cache::Saved(y)) => (
                gd.iter().zip(y).map(|(&g, &v)| g * (1.0 - v * v)).collect(),
                want_params.then(Vec::new),
            ),
            (LayerSpec::Sigmoid, Cache::Saved(y)) => (
                gd.iter().zip(y).map(|(&g, &v)| g * v * (1.0 - v)).collect(),
                want_params.then(Vec::new),
            ),
            // y = (t + 1) / 2 with t = tanh(x): dy/dx = (1 - t^2) / 2 = 2 y (1 - y)
            (LayerSpec::UnitTanh, Cache::Saved(y)) => (
                gd.iter().zip(y).map(|(&g, &v)| g * 2.0 * v * (1.0 - v)).collect(),
                want_params.then(Vec::new),
            ),
            (LayerSpec::ClampUnit, Cache::Saved(x)) => (
                gd.iter()
                    .zip(x)
                    .map(|(&g, &v)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
                    .collect(),
                want_params.then(Vec::new),
            ),
            (LayerSpec::Reshape { .. } | LayerSpec::Flatten, Cache::None) => {
                (gd.to_vec(), want_params.then(Vec::new))
            }
            (LayerSpec::GlobalAvgPool, Cache::None) => {
                let plane = self.input_shape[1] * self.input_shape[2];
                let mut dx = Vec::with_capacity(gd.len() * plane);
                for &g in gd {
                    dx.extend(std::iter::repeat(g / plane as f64).take(plane));
                }
                (dx, want_params.then(Vec::new))
            }
            (spec, _) => {
                return Err(NnError::Shape(format!("cache does not belong to {spec:?}")));
            }
        };
        Ok((Tensor::new(in_shape, dx)?, dparams))
    }
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    let channels = bias.len();
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_stats(x: &[f64], batch: usize, channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut mean = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            mean[c] += x[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * plane;
            var[c] += x[off..off + plane]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl BnCache {
    pub(crate) fn take_stats(&self) -> Option<&(Vec<f64>, Vec<f64>, usize)> {
        self.batch_stats.as_ref()
    }
}
