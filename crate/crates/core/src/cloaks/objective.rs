use invguard_nn::Tensor;

use crate::image::ImageTensor;
use crate::latent::LatentCode;
use crate::losses::{similarity_grad_into, similarity_unchecked};
use crate::models::{latents_to_tensor, EncoderHandle, FeatureExtractorHandle};
use crate::{Error, Result};

/// Latent-space part of a cloak objective.
#[derive(Debug, Clone)]
pub enum LatentTerm<'a> {
    /// Feature deviation only.
    None,
    /// Push `E(x̂)` away from a frozen per-image anchor code.
    Anchor {
        encoder: &'a EncoderHandle,
        anchors: Vec<LatentCode>,
    },
    /// Push `E(x̂)` toward the zero code. The cosine against zero counts as
    /// 0, so the term is `-mean(E(x̂)^2)`.
    Zero { encoder: &'a EncoderHandle },
}

/// The quantity each cloak search ascends:
/// `κ * latent + (1 - κ) * sim(F(x̂), F(x))`, where `sim = -cos + mse`.
#[derive(Debug, Clone)]
pub struct CloakObjective<'a> {
    pub features: &'a FeatureExtractorHandle,
    pub latent: LatentTerm<'a>,
    pub kappa: f64,
}

impl<'a> CloakObjective<'a> {
    pub fn feature_only(features: &'a FeatureExtractorHandle) -> Self {
        Self {
            features,
            latent: LatentTerm::None,
            kappa: 0.0,
        }
    }

    fn weights(&self) -> (f64, f64) {
        match self.latent {
            LatentTerm::None => (0.0, 1.0),
            _ => (self.kappa, 1.0 - self.kappa),
        }
    }

    /// Features of the unperturbed images, computed once per search.
    pub(crate) fn reference_features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.features.network().infer(x)?)
    }

    /// Per-image objective values at `xhat` and, optionally, the gradient
    /// with respect to `xhat`.
    pub(crate) fn evaluate(
        &self,
        xhat: &Tensor,
        f_ref: &Tensor,
        offset: usize,
        want_grad: bool,
    ) -> Result<(Vec<f64>, Option<Tensor>)> {
        let n = xhat.batch();
        let (w_lat, w_feat) = self.weights();
        let mut values = vec![0.0; n];
        let mut grad = want_grad.then(|| vec![0.0; xhat.len()]);

        if w_feat > 0.0 {
            let (f, trace) = self.features.forward(xhat)?;
            let d = f.item_len();
            let mut gf = vec![0.0; f.len()];
            for i in 0..n {
                values[i] += w_feat * similarity_unchecked(f.item(i), f_ref.item(i));
                if want_grad {
                    similarity_grad_into(f.item(i), f_ref.item(i), w_feat, &mut gf[i * d..(i + 1) * d]);
                }
            }
            if let Some(g) = grad.as_mut() {
                let dx = self.features.backward(&trace, &Tensor::new(f.shape().to_vec(), gf)?)?;
                g.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
            }
        }

        if w_lat > 0.0 {
            let (encoder, anchors) = match &self.latent {
                LatentTerm::Anchor { encoder, anchors } => {
                    if anchors.len() < offset + n {
                        return Err(Error::InvalidArgument(format!(
                            "{} anchors for images {offset}..{}",
                            anchors.len(),
                            offset + n
                        )));
                    }
                    let t = latents_to_tensor(&anchors[offset..offset + n], encoder.latent_spec().dim)?;
                    (*encoder, Some(t))
                }
                LatentTerm::Zero { encoder } => (*encoder, None),
                LatentTerm::None => unreachable!("latent weight is zero without a latent term"),
            };
            let (z, trace) = encoder.forward(xhat)?;
            let d = z.item_len();
            let mut gz = vec![0.0; z.len()];
            for i in 0..n {
                let zi = z.item(i);
                match &anchors {
                    Some(a) => {
                        values[i] += w_lat * similarity_unchecked(zi, a.item(i));
                        if want_grad {
                            similarity_grad_into(zi, a.item(i), w_lat, &mut gz[i * d..(i + 1) * d]);
                        }
                    }
                    None => {
                        values[i] -= w_lat * zi.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        for (g, v) in gz[i * d..(i + 1) * d].iter_mut().zip(zi) {
                            *g -= w_lat * 2.0 * v / d as f64;
                        }
                    }
                }
            }
            if let Some(g) = grad.as_mut() {
                let dx = encoder.backward(&trace, &Tensor::new(z.shape().to_vec(), gz)?)?;
                g.iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
            }
        }
        let grad = match grad {
            Some(g) => Some(Tensor::new(xhat.shape().to_vec(), g)?),
            None => None,
        };
        Ok((values, grad))
    }

    /// Objective at `xhat` for the single original image `x` (anchor 0).
    pub fn value(&self, x: &ImageTensor, xhat: &ImageTensor) -> Result<f64> {
        x.ensure_same_shape(xhat)?;
        let xb = ImageTensor::to_batch(std::slice::from_ref(x))?;
        let f_ref = self.reference_features(&xb)?;
        let hb = ImageTensor::to_batch(std::slice::from_ref(xhat))?;
        Ok(self.evaluate(&hb, &f_ref, 0, false)?.0[0])
    }

    /// Objective and its gradient with respect to `xhat`.
    pub fn value_and_gradient(&self, x: &ImageTensor, xhat: &ImageTensor) -> Result<(f64, ImageTensor)> {
        x.ensure_same_shape(xhat)?;
        let xb = ImageTensor::to_batch(std::slice::from_ref(x))?;
        let f_ref = self.reference_features(&xb)?;
        let hb = ImageTensor::to_batch(std::slice::from_ref(xhat))?;
        let (v, g) = self.evaluate(&hb, &f_ref, 0, true)?;
        let g = g.expect("gradient requested");
        Ok((v[0], ImageTensor::new(xhat.shape(), g.into_data())?))
    }
}
