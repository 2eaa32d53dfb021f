//! Layer stacks for the desk-scale model families.

use invguard_nn::{Architecture, LayerSpec};

use crate::image::ImageShape;
use crate::{Error, Result};

const LEAK: f64 = 0.2;

fn down_steps(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "resolution {resolution} must be a power of two >= 4"
        )));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

fn check_square(shape: ImageShape) -> Result<usize> {
    let (h, w, _) = shape;
    if h != w {
        return Err(Error::InvalidArgument(format!("non-square image {h}x{w}")));
    }
    Ok(h)
}

/// Strided conv trunk down to 4x4, then flatten. Returns layers and the
/// flattened width.
fn conv_trunk(shape: ImageShape, base: usize) -> Result<(Vec<LayerSpec>, usize)> {
    let res = check_square(shape)?;
    let steps = down_steps(res)?;
    let mut layers = Vec::new();
    let mut c = shape.2;
    if steps == 0 {
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: base,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        layers.push(LayerSpec::LeakyRelu { slope: LEAK });
        c = base;
    }
    for i in 0..steps {
        let out = base << i;
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        layers.push(LayerSpec::LeakyRelu { slope: LEAK });
        c = out;
    }
    layers.push(LayerSpec::Flatten);
    Ok((layers, c * 16))
}

fn input_of(shape: ImageShape) -> Vec<usize> {
    vec![shape.2, shape.0, shape.1]
}

/// Linear stem to `c0 x 4 x 4`, transposed convs doubling resolution, tanh
/// head remapped onto `[0, 1]`.
pub fn dcgan_generator(latent_dim: usize, output: ImageShape, base: usize) -> Result<Architecture> {
    let res = check_square(output)?;
    let ups = down_steps(res)?;
    let c0 = base << ups.saturating_sub(1);
    let mut layers = vec![
        LayerSpec::Linear {
            inputs: latent_dim,
            outputs: c0 * 16,
        },
        LayerSpec::Reshape { shape: vec![c0, 4, 4] },
        LayerSpec::BatchNorm { channels: c0 },
        LayerSpec::Relu,
    ];
    let mut c = c0;
    for i in 0..ups {
        let last = i + 1 == ups;
        let out = if last { output.2 } else { c / 2 };
        layers.push(LayerSpec::ConvTranspose2d {
            in_channels: c,
            out_channels: out,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        if !last {
            layers.push(LayerSpec::BatchNorm { channels: out });
            layers.push(LayerSpec::Relu);
        }
        c = out;
    }
    if ups == 0 {
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: output.2,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
    }
    layers.push(LayerSpec::UnitTanh);
    Ok(Architecture {
        input_shape: vec![latent_dim],
        layers,
    })
}

/// One linear layer, five convolutions (transposed then regular) and five
/// batch-norm layers.
pub fn shadow_generator(latent_dim: usize, output: ImageShape, base: usize) -> Result<Architecture> {
    let res = check_square(output)?;
    let ups = down_steps(res)?;
    if ups > 4 {
        return Err(Error::InvalidArgument(format!(
            "shadow generator supports resolutions up to 64, got {res}"
        )));
    }
    let c0 = base << ups.saturating_sub(1);
    let mut layers = vec![
        LayerSpec::Linear {
            inputs: latent_dim,
            outputs: c0 * 16,
        },
        LayerSpec::Reshape { shape: vec![c0, 4, 4] },
        LayerSpec::BatchNorm { channels: c0 },
        LayerSpec::Relu,
    ];
    let mut c = c0;
    for _ in 0..ups {
        let out = (c / 2).max(base);
        layers.push(LayerSpec::ConvTranspose2d {
            in_channels: c,
            out_channels: out,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        layers.push(LayerSpec::BatchNorm { channels: out });
        layers.push(LayerSpec::Relu);
        c = out;
    }
    for i in ups..5 {
        let last = i == 4;
        let out = if last { output.2 } else { c };
        layers.push(LayerSpec::Conv2d {
            in_channels: c,
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        if !last {
            layers.push(LayerSpec::BatchNorm { channels: out });
            layers.push(LayerSpec::Relu);
        }
        c = out;
    }
    layers.push(LayerSpec::UnitTanh);
    Ok(Architecture {
        input_shape: vec![latent_dim],
        layers,
    })
}

pub fn discriminator(input: ImageShape, base: usize) -> Result<Architecture> {
    let (mut layers, flat) = conv_trunk(input, base)?;
    layers.push(LayerSpec::Linear {
        inputs: flat,
        outputs: 1,
    });
    Ok(Architecture {
        input_shape: input_of(input),
        layers,
    })
}

pub fn encoder(input: ImageShape, latent_dim: usize, base: usize) -> Result<Architecture> {
    let (mut layers, flat) = conv_trunk(input, base)?;
    layers.push(LayerSpec::Linear {
        inputs: flat,
        outputs: latent_dim,
    });
    Ok(Architecture {
        input_shape: input_of(input),
        layers,
    })
}

/// Identity classifier; dropping the last layer leaves a `feature_dim`
/// embedding trunk.
pub fn classifier(input: ImageShape, feature_dim: usize, classes: usize, base: usize) -> Result<Architecture> {
    let (mut layers, flat) = conv_trunk(input, base)?;
    layers.push(LayerSpec::Linear {
        inputs: flat,
        outputs: feature_dim,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Linear {
        inputs: feature_dim,
        outputs: classes,
    });
    Ok(Architecture {
        input_shape: input_of(input),
        layers,
    })
}

/// Fully connected generator for low-dimensional point data stored as
/// `1 x 1 x C` images.
pub fn mlp_generator(latent_dim: usize, output: ImageShape, hidden: usize) -> Architecture {
    let out = output.0 * output.1 * output.2;
    Architecture {
        input_shape: vec![latent_dim],
        layers: vec![
            LayerSpec::Linear {
                inputs: latent_dim,
                outputs: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                inputs: hidden,
                outputs: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                inputs: hidden,
                outputs: out,
            },
            LayerSpec::UnitTanh,
            LayerSpec::Reshape {
                shape: input_of(output),
            },
        ],
    }
}

pub fn mlp_discriminator(input: ImageShape, hidden: usize) -> Architecture {
    let n = input.0 * input.1 * input.2;
    Architecture {
        input_shape: input_of(input),
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear {
                inputs: n,
                outputs: hidden,
            },
            LayerSpec::LeakyRelu { slope: LEAK },
            LayerSpec::Linear {
                inputs: hidden,
                outputs: hidden,
            },
            LayerSpec::LeakyRelu { slope: LEAK },
            LayerSpec::Linear {
                inputs: hidden,
                outputs: 1,
            },
        ],
    }
}

/// `G(z) = clip(0.5 + 0.1 z)` broadcast over a 4x4 grayscale image.
pub fn toy_generator() -> Architecture {
    Architecture {
        input_shape: vec![1],
        layers: vec![
            LayerSpec::Linear { inputs: 1, outputs: 16 },
            LayerSpec::ClampUnit,
            LayerSpec::Reshape { shape: vec![1, 4, 4] },
        ],
    }
}
