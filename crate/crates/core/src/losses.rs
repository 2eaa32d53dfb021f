//! Vector similarity terms and their gradients.

use crate::{Error, Result};

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(mse_unchecked(a, b))
}

pub(crate) fn mse_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// d mse(a, b) / d a, accumulated into `out` with weight `scale`.
pub(crate) fn mse_grad_into(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let k = 2.0 * scale / a.len() as f64;
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += k * (x - y);
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity; defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// d cos(a, b) / d a, accumulated into `out` with weight `scale`.
pub(crate) fn cosine_grad_into(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return;
    }
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (y / (na * nb) - cos * x / (na * na));
    }
}

/// `-cos(a, b) + mse(a, b)`: small when `a` and `b` agree element-wise.
/// The cosine term contributes 0 when either side is the zero vector.
pub fn latent_similarity_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(similarity_unchecked(a, b))
}

pub(crate) fn similarity_unchecked(a: &[f64], b: &[f64]) -> f64 {
    -cosine_unchecked(a, b) + mse_unchecked(a, b)
}

/// Gradient of [`latent_similarity_loss`] with respect to `a`, scaled.
pub(crate) fn similarity_grad_into(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    cosine_grad_into(a, b, -scale, out);
    mse_grad_into(a, b, scale, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((latent_similarity_loss(&[s, s], &[s, s]).unwrap() + 1.0).abs() < 1e-12);
        assert!((latent_similarity_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_cosine_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        let a = [0.5, -1.5];
        let l = latent_similarity_loss(&a, &[0.0, 0.0]).unwrap();
        assert!((l - (0.25 + 2.25) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(latent_similarity_loss(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn similarity_gradient_matches_central_differences(
            a in prop::collection::vec(-2.0f64..2.0, 6),
            b in prop::collection::vec(-2.0f64..2.0, 6),
        ) {
            prop_assume!(norm(&a) > 0.1 && norm(&b) > 0.1);
            let mut g = vec![0.0; 6];
            similarity_grad_into(&a, &b, 1.0, &mut g);
            let h = 1e-6;
            for i in 0..6 {
                let mut p = a.clone();
                p[i] += h;
                let mut m = a.clone();
                m[i] -= h;
                let fd = (similarity_unchecked(&p, &b) - similarity_unchecked(&m, &b)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
