//! Model handles (generator, encoder, feature extractor, identity embedder,
//! discriminator), training loops and checkpoints.

pub mod arch;
mod checkpoint;
mod encoder_training;
pub(crate) mod training;

use invguard_nn::{Mode, Network, Tensor, Trace};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::{ImageShape, ImageTensor};
use crate::latent::{LatentCode, LatentSpec};
use crate::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, Checkpointable, ModelKind, FORMAT_VERSION,
};
pub use encoder_training::{
    train_target_encoder, EncoderLossWeights, EncoderTrace, EncoderTrainingConfig, TrainedEncoder,
};
pub use training::{
    recalibrate_batch_norm, train_classifier, train_gan, ClassifierConfig, GanArchitecture, GanConfig,
    GanTrace, TrainedClassifier,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTag {
    DcganLike,
    WganLike,
    StyleganLike,
    Toy,
}

impl FamilyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyTag::DcganLike => "dcgan_like",
            FamilyTag::WganLike => "wgan_like",
            FamilyTag::StyleganLike => "stylegan_like",
            FamilyTag::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dcgan_like" => Ok(FamilyTag::DcganLike),
            "wgan_like" => Ok(FamilyTag::WganLike),
            "stylegan_like" => Ok(FamilyTag::StyleganLike),
            "toy" => Ok(FamilyTag::Toy),
            other => Err(Error::InvalidArgument(format!("unknown model family {other:?}"))),
        }
    }
}

pub(crate) fn image_input(shape: ImageShape) -> Vec<usize> {
    vec![shape.2, shape.0, shape.1]
}

fn check_input(net: &Network, shape: ImageShape, what: &str) -> Result<()> {
    if net.input_shape() != image_input(shape).as_slice() {
        return Err(Error::Shape(format!(
            "{what} network takes {:?}, handle declares {shape:?}",
            net.input_shape()
        )));
    }
    Ok(())
}

pub(crate) fn latents_to_tensor(z: &[LatentCode], dim: usize) -> Result<Tensor> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("empty latent batch".into()));
    }
    let mut data = Vec::with_capacity(z.len() * dim);
    for code in z {
        if code.dim() != dim {
            return Err(Error::Shape(format!(
                "latent of dimension {}, expected {dim}",
                code.dim()
            )));
        }
        data.extend_from_slice(code.as_slice());
    }
    Ok(Tensor::new(vec![z.len(), dim], data)?)
}

pub(crate) fn tensor_to_latents(t: &Tensor) -> Vec<LatentCode> {
    (0..t.batch()).map(|i| LatentCode(t.item(i).to_vec())).collect()
}

/// sha256 over the network's parameters and buffers.
pub fn network_hash(net: &Network) -> String {
    hex::encode(Sha256::digest(net.to_bytes()))
}

/// Maps latent codes to images in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorHandle {
    latent_spec: LatentSpec,
    output_shape: ImageShape,
    family: FamilyTag,
    net: Network,
}

impl GeneratorHandle {
    pub fn new(net: Network, latent_spec: LatentSpec, output_shape: ImageShape, family: FamilyTag) -> Result<Self> {
        if net.input_shape() != [latent_spec.dim] {
            return Err(Error::Shape(format!(
                "generator input {:?} does not match latent dim {}",
                net.input_shape(),
                latent_spec.dim
            )));
        }
        if net.output_shape() != image_input(output_shape).as_slice() {
            return Err(Error::Shape(format!(
                "generator output {:?} does not match {output_shape:?}",
                net.output_shape()
            )));
        }
        Ok(Self {
            latent_spec,
            output_shape,
            family,
            net,
        })
    }

    /// `G(z) = clip(0.5 + 0.1 z)` on a 4x4 grayscale image.
    pub fn toy() -> Self {
        let arch = arch::toy_generator();
        let mut net = Network::new(&arch, &mut crate::rng::seeded(0)).expect("static architecture");
        let p = net.layer_params_mut(0).expect("linear layer");
        p[0].fill(0.1);
        p[1].fill(0.5);
        Self {
            latent_spec: LatentSpec::gaussian(1).expect("positive dim"),
            output_shape: (4, 4, 1),
            family: FamilyTag::Toy,
            net,
        }
    }

    pub fn latent_spec(&self) -> &LatentSpec {
        &self.latent_spec
    }

    pub fn output_shape(&self) -> ImageShape {
        self.output_shape
    }

    pub fn family(&self) -> FamilyTag {
        self.family
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn generate(&self, z: &LatentCode) -> Result<ImageTensor> {
        Ok(self.generate_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn generate_batch(&self, z: &[LatentCode]) -> Result<Vec<ImageTensor>> {
        let t = latents_to_tensor(z, self.latent_spec.dim)?;
        let out = self.net.infer(&t)?;
        ImageTensor::from_batch(&out, self.output_shape)
    }

    /// Eval-mode forward on an `[N, dim]` latent batch, keeping the trace.
    pub(crate) fn forward(&self, z: &Tensor) -> Result<(Tensor, Trace)> {
        Ok(self.net.forward(z, Mode::Eval)?)
    }

    pub(crate) fn backward(&self, trace: &Trace, grad: &Tensor) -> Result<Tensor> {
        Ok(self.net.backward(trace, grad)?)
    }
}

/// Maps images to latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHandle {
    input_shape: ImageShape,
    latent_spec: LatentSpec,
    net: Network,
}

impl EncoderHandle {
    pub fn new(net: Network, input_shape: ImageShape, latent_spec: LatentSpec) -> Result<Self> {
        check_input(&net, input_shape, "encoder")?;
        if net.output_shape() != [latent_spec.dim] {
            return Err(Error::Shape(format!(
                "encoder output {:?} does not match latent dim {}",
                net.output_shape(),
                latent_spec.dim
            )));
        }
        Ok(Self {
            input_shape,
            latent_spec,
            net,
        })
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn latent_spec(&self) -> &LatentSpec {
        &self.latent_spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn encode_batch(&self, x: &[ImageTensor]) -> Result<Vec<LatentCode>> {
        let t = self.batch(x)?;
        Ok(tensor_to_latents(&self.net.infer(&t)?))
    }

    fn batch(&self, x: &[ImageTensor]) -> Result<Tensor> {
        for img in x {
            if img.shape() != self.input_shape {
                return Err(Error::Shape(format!(
                    "encoder takes {:?}, got {:?}",
                    self.input_shape,
                    img.shape()
                )));
            }
        }
        ImageTensor::to_batch(x)
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        Ok(self.net.forward(x, Mode::Eval)?)
    }

    pub(crate) fn backward(&self, trace: &Trace, grad: &Tensor) -> Result<Tensor> {
        Ok(self.net.backward(trace, grad)?)
    }
}

/// A frozen image-to-vector network. Nothing in the cloak or inversion code
/// paths can mutate it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractorHandle {
    input_shape: ImageShape,
    net: Network,
}

impl FeatureExtractorHandle {
    pub fn new(net: Network, input_shape: ImageShape) -> Result<Self> {
        check_input(&net, input_shape, "feature extractor")?;
        if net.output_shape().len() != 1 {
            return Err(Error::Shape(format!(
                "feature extractor must output a vector, got {:?}",
                net.output_shape()
            )));
        }
        Ok(Self { input_shape, net })
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_len()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn param_hash(&self) -> String {
        network_hash(&self.net)
    }

    pub fn extract(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.extract_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn extract_batch(&self, x: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        for img in x {
            if img.shape() != self.input_shape {
                return Err(Error::Shape(format!(
                    "feature extractor takes {:?}, got {:?}",
                    self.input_shape,
                    img.shape()
                )));
            }
        }
        let out = self.net.infer(&ImageTensor::to_batch(x)?)?;
        Ok((0..out.batch()).map(|i| out.item(i).to_vec()).collect())
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, Trace)> {
        Ok(self.net.forward(x, Mode::Eval)?)
    }

    pub(crate) fn backward(&self, trace: &Trace, grad: &Tensor) -> Result<Tensor> {
        Ok(self.net.backward(trace, grad)?)
    }
}

/// Identity embedder used for face verification; embeddings are
/// unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHandle {
    inner: FeatureExtractorHandle,
}

impl EmbeddingHandle {
    pub fn new(net: Network, input_shape: ImageShape) -> Result<Self> {
        Ok(Self {
            inner: FeatureExtractorHandle::new(net, input_shape)?,
        })
    }

    pub fn input_shape(&self) -> ImageShape {
        self.inner.input_shape
    }

    pub fn dim(&self) -> usize {
        self.inner.feature_dim()
    }

    pub fn network(&self) -> &Network {
        &self.inner.net
    }

    pub fn embed(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.embed_batch(std::slice::from_ref(x))?.remove(0))
    }

    pub fn embed_batch(&self, x: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.inner.extract_batch(x)?;
        for v in &mut out {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|a| *a /= n);
            }
        }
        Ok(out)
    }
}

/// Scores images with one logit each (positive means "real").
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHandle {
    input_shape: ImageShape,
    net: Network,
}

impl DiscriminatorHandle {
    pub fn new(net: Network, input_shape: ImageShape) -> Result<Self> {
        check_input(&net, input_shape, "discriminator")?;
        if net.output_len() != 1 {
            return Err(Error::Shape(format!(
                "discriminator must output one logit, got {:?}",
                net.output_shape()
            )));
        }
        Ok(Self { input_shape, net })
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input_shape
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn score(&self, x: &ImageTensor) -> Result<f64> {
        Ok(self.score_batch(std::slice::from_ref(x))?[0])
    }

    pub fn score_batch(&self, x: &[ImageTensor]) -> Result<Vec<f64>> {
        Ok(self.net.infer(&ImageTensor::to_batch(x)?)?.into_data())
    }
}
