//! Image utility metrics, identity distances, threshold calibration and
//! matching rates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::models::EmbeddingHandle;
use crate::rng::seeded;
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Calibrations with a higher equal-error estimate are flagged.
pub const RELIABLE_EER: f64 = 0.3;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / mse)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            w[y * SSIM_WINDOW + x] = g[y] * g[x];
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over every fully contained 7x7 Gaussian window, averaged over
/// channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut sum = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let row = (oy + ky) * w + ox;
                    for kx in 0..SSIM_WINDOW {
                        let wt = win[ky * SSIM_WINDOW + kx];
                        let (x, y) = (pa[row + kx], pb[row + kx]);
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

pub fn utility(a: &ImageTensor, b: &ImageTensor) -> Result<UtilityReport> {
    let m = mse(a, b)?;
    Ok(UtilityReport {
        mse: m,
        ssim: ssim(a, b)?,
        psnr: psnr_from_mse(m),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySummary {
    pub mse: Stat,
    pub ssim: Stat,
    pub psnr: Stat,
}

/// Per-pair utility over aligned lists, summarized.
pub fn utility_summary(originals: &[ImageTensor], modified: &[ImageTensor]) -> Result<UtilitySummary> {
    check_aligned(originals.len(), modified.len())?;
    let reports = originals
        .iter()
        .zip(modified)
        .map(|(a, b)| utility(a, b))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&UtilityReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(UtilitySummary {
        mse: col(|r| r.mse),
        ssim: col(|r| r.ssim),
        psnr: col(|r| r.psnr),
    })
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("lists of length {a} and {b} are not aligned")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("empty image list".into()));
    }
    Ok(())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// L2 distance between unit-normalized identity embeddings.
pub fn face_distance(embedder: &EmbeddingHandle, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(l2(&embedder.embed(a)?, &embedder.embed(b)?))
}

/// Pairwise distances over aligned lists, embedded in batches.
pub fn face_distances(embedder: &EmbeddingHandle, a: &[ImageTensor], b: &[ImageTensor]) -> Result<Vec<f64>> {
    check_aligned(a.len(), b.len())?;
    let ea = embedder.embed_batch(a)?;
    let eb = embedder.embed_batch(b)?;
    Ok(ea.iter().zip(&eb).map(|(x, y)| l2(x, y)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistance {
    pub distance: f64,
    pub same_identity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub threshold: f64,
    pub pairs_used: usize,
    pub method_tag: String,
    /// `max(FAR, FRR)` at the threshold.
    pub equal_error_rate: f64,
    pub false_accept_rate: f64,
    pub false_reject_rate: f64,
    pub reliable: bool,
    /// The labeled distances the threshold was fit on.
    pub pairs: Vec<LabeledDistance>,
}

impl ThresholdCalibration {
    pub fn verdict(&self, distance: f64) -> MatchVerdict {
        MatchVerdict {
            distance,
            same_identity: distance < self.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub distance: f64,
    pub same_identity: bool,
}

/// `(FAR, FRR)` when "same" means `distance < threshold`.
pub fn error_rates(pairs: &[LabeledDistance], threshold: f64) -> (f64, f64) {
    let (mut fa, mut fr, mut n_same, mut n_diff) = (0usize, 0usize, 0usize, 0usize);
    for p in pairs {
        let accept = p.distance < threshold;
        if p.same_identity {
            n_same += 1;
            fr += usize::from(!accept);
        } else {
            n_diff += 1;
            fa += usize::from(accept);
        }
    }
    (fa as f64 / n_diff.max(1) as f64, fr as f64 / n_same.max(1) as f64)
}

/// Midpoints between consecutive distinct sorted distances.
pub fn candidate_thresholds(pairs: &[LabeledDistance]) -> Vec<f64> {
    let mut d: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    d.sort_by(f64::total_cmp);
    d.dedup();
    d.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Sorts the distances and picks the midpoint minimizing `max(FAR, FRR)`;
/// the first (smallest) minimizer wins.
pub fn calibrate_threshold(pairs: &[LabeledDistance]) -> Result<ThresholdCalibration> {
    if pairs.iter().any(|p| !p.distance.is_finite() || p.distance < 0.0) {
        return Err(Error::InvalidArgument("pair distances must be finite and non-negative".into()));
    }
    let same = pairs.iter().filter(|p| p.same_identity).count();
    if same == 0 || same == pairs.len() {
        return Err(Error::InvalidArgument("calibration needs both same- and different-identity pairs".into()));
    }
    let candidates = candidate_thresholds(pairs);
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("all pair distances are equal".into()));
    }
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for t in candidates {
        let (far, frr) = error_rates(pairs, t);
        let eer = far.max(frr);
        if eer < best.0 {
            best = (eer, t, far, frr);
        }
    }
    let (eer, threshold, far, frr) = best;
    Ok(ThresholdCalibration {
        threshold,
        pairs_used: pairs.len(),
        method_tag: "eer_midpoint".into(),
        equal_error_rate: eer,
        false_accept_rate: far,
        false_reject_rate: frr,
        reliable: eer <= RELIABLE_EER,
        pairs: pairs.to_vec(),
    })
}

/// `n` index pairs over a labeled set, half same-identity and half
/// different-identity, drawn without repeating an unordered pair where
/// possible.
pub fn sample_identity_pairs(identities: &[usize], n: usize, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_id.values().filter(|v| v.len() > 1).collect();
    if multi.is_empty() || by_id.len() < 2 {
        return Err(Error::InvalidArgument(
            "pair sampling needs two identities and one identity with two images".into(),
        ));
    }
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0usize;
    while out.len() < n {
        let want_same = out.len() % 2 == 0;
        let (a, b) = if want_same {
            let group = multi[rng.gen_range(0..multi.len())];
            let mut two: Vec<usize> = group.choose_multiple(&mut rng, 2).copied().collect();
            two.sort_unstable();
            (two[0], two[1])
        } else {
            let a = rng.gen_range(0..identities.len());
            let b = rng.gen_range(0..identities.len());
            if identities[a] == identities[b] {
                continue;
            }
            (a.min(b), a.max(b))
        };
        attempts += 1;
        if seen.insert((a, b)) || attempts > 20 * n {
            out.push((a, b, want_same));
        }
    }
    Ok(out)
}

/// Embeds the sampled pairs from a labeled image set and calibrates.
pub fn calibrate_on_images(
    embedder: &EmbeddingHandle,
    images: &[ImageTensor],
    identities: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<ThresholdCalibration> {
    check_aligned(images.len(), identities.len())?;
    let emb = embedder.embed_batch(images)?;
    let pairs: Vec<LabeledDistance> = sample_identity_pairs(identities, n_pairs, seed)?
        .into_iter()
        .map(|(a, b, same)| LabeledDistance {
            distance: l2(&emb[a], &emb[b]),
            same_identity: same,
        })
        .collect();
    calibrate_threshold(&pairs)
}

/// Fraction of `distances` judged same-identity.
pub fn matching_rate_from_distances(distances: &[f64], calibration: &ThresholdCalibration) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("empty distance list".into()));
    }
    let hits = distances.iter().filter(|&&d| calibration.verdict(d).same_identity).count();
    Ok(hits as f64 / distances.len() as f64)
}

/// Fraction of aligned (target, reconstruction) pairs judged the same
/// identity.
pub fn matching_rate(
    embedder: &EmbeddingHandle,
    targets: &[ImageTensor],
    reconstructions: &[ImageTensor],
    calibration: &ThresholdCalibration,
) -> Result<f64> {
    matching_rate_from_distances(&face_distances(embedder, targets, reconstructions)?, calibration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(shape: (usize, usize, usize), f: impl Fn(usize) -> f64) -> ImageTensor {
        ImageTensor::new(shape, (0..shape.0 * shape.1 * shape.2).map(f).collect()).unwrap()
    }

    fn labeled(same: &[f64], diff: &[f64]) -> Vec<LabeledDistance> {
        same.iter()
            .map(|&d| LabeledDistance { distance: d, same_identity: true })
            .chain(diff.iter().map(|&d| LabeledDistance { distance: d, same_identity: false }))
            .collect()
    }

    #[test]
    fn closed_forms() {
        let a = img((8, 8, 3), |i| (i % 17) as f64 / 40.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let u = utility(&a, &a).unwrap();
        assert_eq!((u.mse, u.ssim, u.psnr), (0.0, 1.0, PSNR_CAP));
    }

    #[test]
    fn ssim_is_symmetric_and_needs_a_window() {
        let a = img((9, 9, 2), |i| ((i * 13) % 7) as f64 / 7.0);
        let b = img((9, 9, 2), |i| ((i * 5) % 11) as f64 / 11.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!(ssim(&a, &b).unwrap() <= 1.0);
        let small = ImageTensor::filled((6, 9, 1), 0.5);
        assert!(ssim(&small, &small).is_err());
        assert!(mse(&a, &small).is_err());
    }

    #[test]
    fn negative_image_scores_low() {
        let a = img((12, 12, 1), |i| if (i / 3) % 2 == 0 { 0.1 } else { 0.9 });
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.5);
    }

    #[test]
    fn separable_calibration() {
        let c = calibrate_threshold(&labeled(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        assert!(c.threshold > 0.2 && c.threshold < 0.8);
        assert_eq!(c.equal_error_rate, 0.0);
        assert!(c.reliable);
        assert_eq!(c.method_tag, "eer_midpoint");
        assert!(c.verdict(0.15).same_identity);
        assert!(!c.verdict(0.85).same_identity);
    }

    #[test]
    fn calibration_errors() {
        assert!(calibrate_threshold(&labeled(&[0.1, 0.2], &[])).is_err());
        assert!(calibrate_threshold(&labeled(&[], &[0.1])).is_err());
        assert!(calibrate_threshold(&labeled(&[0.3], &[0.3])).is_err());
        assert!(calibrate_threshold(&labeled(&[f64::NAN], &[0.3])).is_err());
    }

    #[test]
    fn random_labels_are_flagged() {
        let mut rng = seeded(17);
        let pairs: Vec<LabeledDistance> = (0..200)
            .map(|_| LabeledDistance {
                distance: rng.gen::<f64>(),
                same_identity: rng.gen::<bool>(),
            })
            .collect();
        let c = calibrate_threshold(&pairs).unwrap();
        assert!(c.equal_error_rate > RELIABLE_EER && c.equal_error_rate < 0.6, "{}", c.equal_error_rate);
        assert!(!c.reliable);
    }

    #[test]
    fn matching_rate_edges() {
        let c = calibrate_threshold(&labeled(&[0.1, 0.2], &[0.8, 0.9])).unwrap();
        assert_eq!(matching_rate_from_distances(&[0.0, 0.1, 0.9, 1.0], &c).unwrap(), 0.5);
        assert!(matching_rate_from_distances(&[], &c).is_err());
    }

    #[test]
    fn pair_sampling_is_balanced_and_correct() {
        let ids: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let pairs = sample_identity_pairs(&ids, 50, 3).unwrap();
        assert_eq!(pairs.len(), 50);
        assert_eq!(pairs.iter().filter(|p| p.2).count(), 25);
        for &(a, b, same) in &pairs {
            assert_eq!(ids[a] == ids[b], same);
            assert_ne!(a, b);
        }
        assert_eq!(pairs, sample_identity_pairs(&ids, 50, 3).unwrap());
        assert!(sample_identity_pairs(&[0, 1, 2], 4, 0).is_err());
    }

    #[test]
    fn stat_is_population_moments() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
