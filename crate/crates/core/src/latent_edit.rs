//! Linear semantic boundaries in z-space and edits along them.

use serde::{Deserialize, Serialize};

use crate::latent::LatentCode;
use crate::{Error, Result};

/// Boundaries fit below this training accuracy are flagged.
pub const RELIABLE_ACCURACY: f64 = 0.6;
const STEPS: usize = 400;
const STEP_SIZE: f64 = 0.5;
const L2: f64 = 1e-3;

/// Unit normal `n` and bias `b` of the hyperplane `n·z + b = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDirection {
    pub normal: Vec<f64>,
    pub attribute_tag: String,
    pub separator_bias: f64,
    pub training_accuracy: f64,
    pub reliable: bool,
}

impl SemanticDirection {
    /// Signed distance of `z` from the separator; positive on the label-1
    /// side.
    pub fn signed_distance(&self, z: &LatentCode) -> Result<f64> {
        check_dim(self.normal.len(), z.dim())?;
        Ok(dot(&self.normal, z.as_slice()) + self.separator_bias)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("latent dimension {b} does not match direction dimension {a}")));
    }
    Ok(())
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// L2-regularized logistic regression from a zero start, full-batch
/// gradient descent. Label 1 ends up on the positive side of the normal.
pub fn fit_boundary(latents: &[LatentCode], labels: &[u8], attribute_tag: &str) -> Result<SemanticDirection> {
    if latents.len() != labels.len() || latents.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} latents for {} labels",
            latents.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidArgument(format!("attribute {attribute_tag:?} has a single class")));
    }
    let d = latents[0].dim();
    if latents.iter().any(|z| z.dim() != d) {
        return Err(Error::Shape("latents differ in dimension".into()));
    }
    let n = latents.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..STEPS {
        let mut gw: Vec<f64> = w.iter().map(|v| L2 * v).collect();
        let mut gb = 0.0;
        for (z, &y) in latents.iter().zip(labels) {
            let r = (sigmoid(dot(&w, z.as_slice()) + b) - y as f64) / n;
            for (g, v) in gw.iter_mut().zip(z.as_slice()) {
                *g += r * v;
            }
            gb += r;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= STEP_SIZE * g;
        }
        b -= STEP_SIZE * gb;
    }
    let len = norm(&w);
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::NonFinite {
            stage: "fit_boundary".into(),
            detail: format!("degenerate normal of length {len}"),
        });
    }
    let normal: Vec<f64> = w.iter().map(|v| v / len).collect();
    let separator_bias = b / len;
    let correct = latents
        .iter()
        .zip(labels)
        .filter(|(z, &y)| (dot(&normal, z.as_slice()) + separator_bias > 0.0) == (y == 1))
        .count();
    let training_accuracy = correct as f64 / n;
    Ok(SemanticDirection {
        normal,
        attribute_tag: attribute_tag.to_string(),
        separator_bias,
        training_accuracy,
        reliable: training_accuracy >= RELIABLE_ACCURACY,
    })
}

/// `z + alpha * normal`.
pub fn edit_latent(z: &LatentCode, direction: &SemanticDirection, alpha: f64) -> Result<LatentCode> {
    edit_along(z, &direction.normal, alpha)
}

pub fn edit_along(z: &LatentCode, direction: &[f64], alpha: f64) -> Result<LatentCode> {
    check_dim(direction.len(), z.dim())?;
    Ok(LatentCode(z.as_slice().iter().zip(direction).map(|(v, n)| v + alpha * n).collect()))
}

/// `n1 - (n1·n2) n2`: the part of `n1` that leaves attribute 2 untouched.
/// `n2` is normalized first.
pub fn conditional_direction(n1: &[f64], n2: &[f64]) -> Result<Vec<f64>> {
    check_dim(n1.len(), n2.len())?;
    let len = norm(n2);
    if !(len > 0.0 && len.is_finite()) {
        return Err(Error::InvalidArgument("conditioning direction must be non-zero".into()));
    }
    let u: Vec<f64> = n2.iter().map(|v| v / len).collect();
    let p = dot(n1, &u);
    Ok(n1.iter().zip(&u).map(|(a, b)| a - p * b).collect())
}

/// Unit-length conditional direction of `primary` given `condition`, as an
/// editable direction for the primary attribute.
pub fn conditional_semantic(primary: &SemanticDirection, condition: &SemanticDirection) -> Result<SemanticDirection> {
    let v = conditional_direction(&primary.normal, &condition.normal)?;
    let len = norm(&v);
    if len < 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "{:?} is parallel to {:?}",
            primary.attribute_tag, condition.attribute_tag
        )));
    }
    Ok(SemanticDirection {
        normal: v.iter().map(|x| x / len).collect(),
        attribute_tag: format!("{}|{}", primary.attribute_tag, condition.attribute_tag),
        separator_bias: primary.separator_bias,
        training_accuracy: primary.training_accuracy,
        reliable: primary.reliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_latent, LatentSpec};
    use crate::rng::seeded;
    use rand::Rng;

    fn planted(n: usize) -> (Vec<LatentCode>, Vec<u8>) {
        let z = sample_latent(&LatentSpec::gaussian(8).unwrap(), n, 4).unwrap();
        let z: Vec<LatentCode> = z
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.0[0] = if i % 2 == 0 { 2.0 + c.0[0].abs() } else { -2.0 - c.0[0].abs() };
                c
            })
            .collect();
        let labels = (0..n).map(|i| u8::from(i % 2 == 0)).collect();
        (z, labels)
    }

    #[test]
    fn recovers_planted_axis() {
        let (z, y) = planted(200);
        let d = fit_boundary(&z, &y, "axis0").unwrap();
        assert!((norm(&d.normal) - 1.0).abs() < 1e-9);
        assert!(d.normal[0].acos().to_degrees() < 5.0, "{:?}", d.normal);
        assert_eq!(d.training_accuracy, 1.0);
        assert!(d.reliable);
    }

    #[test]
    fn flipped_labels_negate_the_normal() {
        let (z, y) = planted(100);
        let a = fit_boundary(&z, &y, "a").unwrap();
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        let b = fit_boundary(&z, &flipped, "a").unwrap();
        for (p, q) in a.normal.iter().zip(&b.normal) {
            assert!((p + q).abs() < 1e-9);
        }
        assert!((a.separator_bias + b.separator_bias).abs() < 1e-9);
    }

    #[test]
    fn random_labels_are_flagged() {
        let z = sample_latent(&LatentSpec::gaussian(16).unwrap(), 400, 2).unwrap();
        let mut rng = seeded(3);
        let y: Vec<u8> = (0..400).map(|_| rng.gen_range(0..2)).collect();
        let d = fit_boundary(&z, &y, "noise").unwrap();
        assert!(d.training_accuracy < 0.65, "{}", d.training_accuracy);
    }

    #[test]
    fn single_class_and_shape_errors() {
        let (z, _) = planted(10);
        assert!(fit_boundary(&z, &[1; 10], "x").is_err());
        assert!(fit_boundary(&z, &[1; 9], "x").is_err());
        assert!(conditional_direction(&[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(conditional_direction(&[1.0, 0.0], &[0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn edit_algebra() {
        let (z, y) = planted(60);
        let d = fit_boundary(&z, &y, "a").unwrap();
        let z0 = &z[3];
        assert_eq!(edit_latent(z0, &d, 0.0).unwrap(), *z0);
        let moved = edit_latent(z0, &d, 1.7).unwrap();
        let back = edit_latent(&moved, &d, -1.7).unwrap();
        for (a, b) in back.as_slice().iter().zip(z0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let delta = d.signed_distance(&moved).unwrap() - d.signed_distance(z0).unwrap();
        assert!((delta - 1.7).abs() < 1e-9);
    }

    #[test]
    fn conditional_edge_cases() {
        assert_eq!(conditional_direction(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        let v = conditional_direction(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert!(norm(&v) < 1e-12);
    }
}
