//! Baseline image distortions: geometric warps, photometric enhancements,
//! blur, noise and JPEG round trips.
//!
//! Magnitude units and ranges:
//!
//! | kind | magnitude | range | identity |
//! |------|-----------|-------|----------|
//! | shear_x, shear_y | shear factor | [0, 0.3] | 0 |
//! | translate_x, translate_y | pixels | [0, 8] | 0 |
//! | rotate | degrees | [0, 30] | 0 |
//! | brightness, color, contrast | enhancement factor | [0, 2] | 1 |
//! | solarize | threshold | [0, 1] | none |
//! | center_crop | kept side ratio | [0.6, 1] | 1 |
//! | gaussian_blur | odd kernel width | {1, 3, 5, 7, 9} | 1 |
//! | gaussian_noise | σ | [0, 0.1] | 0 |
//! | jpeg_compression | quality | [10, 90] | none |
//!
//! Geometric kinds sample bilinearly and fill exposed regions with zeros.

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{clip_unit, ImageTensor};
use crate::metrics::{utility_summary, UtilitySummary};
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Color,
    Contrast,
    Solarize,
    CenterCrop,
    GaussianBlur,
    GaussianNoise,
    JpegCompression,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 13] = [
        DistortionKind::ShearX,
        DistortionKind::ShearY,
        DistortionKind::TranslateX,
        DistortionKind::TranslateY,
        DistortionKind::Rotate,
        DistortionKind::Brightness,
        DistortionKind::Color,
        DistortionKind::Contrast,
        DistortionKind::Solarize,
        DistortionKind::CenterCrop,
        DistortionKind::GaussianBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::JpegCompression,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistortionKind::ShearX => "shear_x",
            DistortionKind::ShearY => "shear_y",
            DistortionKind::TranslateX => "translate_x",
            DistortionKind::TranslateY => "translate_y",
            DistortionKind::Rotate => "rotate",
            DistortionKind::Brightness => "brightness",
            DistortionKind::Color => "color",
            DistortionKind::Contrast => "contrast",
            DistortionKind::Solarize => "solarize",
            DistortionKind::CenterCrop => "center_crop",
            DistortionKind::GaussianBlur => "gaussian_blur",
            DistortionKind::GaussianNoise => "gaussian_noise",
            DistortionKind::JpegCompression => "jpeg_compression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion kind {s:?}")))
    }

    /// Inclusive magnitude range.
    pub fn range(self) -> (f64, f64) {
        match self {
            DistortionKind::ShearX | DistortionKind::ShearY => (0.0, 0.3),
            DistortionKind::TranslateX | DistortionKind::TranslateY => (0.0, 8.0),
            DistortionKind::Rotate => (0.0, 30.0),
            DistortionKind::Brightness | DistortionKind::Color | DistortionKind::Contrast => (0.0, 2.0),
            DistortionKind::Solarize => (0.0, 1.0),
            DistortionKind::CenterCrop => (0.6, 1.0),
            DistortionKind::GaussianBlur => (1.0, 9.0),
            DistortionKind::GaussianNoise => (0.0, 0.1),
            DistortionKind::JpegCompression => (10.0, 90.0),
        }
    }

    /// Magnitude that returns the input unchanged, for kinds that have one.
    pub fn identity_magnitude(self) -> Option<f64> {
        match self {
            DistortionKind::ShearX
            | DistortionKind::ShearY
            | DistortionKind::TranslateX
            | DistortionKind::TranslateY
            | DistortionKind::Rotate
            | DistortionKind::GaussianNoise => Some(0.0),
            DistortionKind::Brightness | DistortionKind::Color | DistortionKind::Contrast => Some(1.0),
            DistortionKind::CenterCrop | DistortionKind::GaussianBlur => Some(1.0),
            DistortionKind::Solarize | DistortionKind::JpegCompression => None,
        }
    }

    pub fn is_stochastic(self) -> bool {
        self == DistortionKind::GaussianNoise
    }

    /// Monotone strength of a magnitude: distance from the identity for
    /// enhancements, lost area or quality for crop, solarize and JPEG.
    pub fn strength(self, magnitude: f64) -> f64 {
        match self {
            DistortionKind::Brightness | DistortionKind::Color | DistortionKind::Contrast => (magnitude - 1.0).abs(),
            DistortionKind::Solarize | DistortionKind::CenterCrop => 1.0 - magnitude,
            DistortionKind::JpegCompression => 100.0 - magnitude,
            _ => magnitude,
        }
    }

    /// A ten-point grid in increasing distortion strength.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            DistortionKind::GaussianBlur => vec![1.0, 3.0, 5.0, 7.0, 9.0],
            DistortionKind::JpegCompression => (0..9).map(|i| 90.0 - 10.0 * i as f64).collect(),
            DistortionKind::Brightness | DistortionKind::Color | DistortionKind::Contrast => {
                (0..10).map(|i| 1.0 - 0.08 * i as f64).collect()
            }
            DistortionKind::Solarize => (0..10).map(|i| 1.0 - 0.05 * i as f64).collect(),
            DistortionKind::CenterCrop => (0..10).map(|i| 1.0 - 0.04 * i as f64).collect(),
            _ => {
                let (lo, hi) = self.range();
                (0..10).map(|i| lo + (hi - lo) * i as f64 / 9.0).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub magnitude: f64,
    /// Only read by stochastic kinds.
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, magnitude: f64) -> Self {
        Self { kind, magnitude, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.range();
        let m = self.magnitude;
        if !(m.is_finite() && m >= lo && m <= hi) {
            return Err(Error::InvalidArgument(format!(
                "{} magnitude {m} outside [{lo}, {hi}]",
                self.kind.as_str()
            )));
        }
        if self.kind == DistortionKind::GaussianBlur && (m.fract() != 0.0 || m as usize % 2 == 0) {
            return Err(Error::InvalidArgument(format!("blur kernel width {m} must be an odd integer")));
        }
        if self.kind == DistortionKind::JpegCompression && m.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("JPEG quality {m} must be an integer")));
        }
        Ok(())
    }
}

pub fn apply_distortion(x: &ImageTensor, spec: &DistortionSpec) -> Result<ImageTensor> {
    spec.validate()?;
    let m = spec.magnitude;
    let (h, w, _) = x.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let out = match spec.kind {
        DistortionKind::ShearX => warp(x, |y, xx| (y, xx + m * (y - cy))),
        DistortionKind::ShearY => warp(x, |y, xx| (y + m * (xx - cx), xx)),
        DistortionKind::TranslateX => warp(x, |y, xx| (y, xx - m)),
        DistortionKind::TranslateY => warp(x, |y, xx| (y - m, xx)),
        DistortionKind::Rotate => {
            let (s, c) = m.to_radians().sin_cos();
            warp(x, |y, xx| {
                let (dy, dx) = (y - cy, xx - cx);
                (cy + c * dy - s * dx, cx + s * dy + c * dx)
            })
        }
        DistortionKind::Brightness => x.map(|v| v * m),
        DistortionKind::Color => blend_with(x, &grayscale(x), m),
        DistortionKind::Contrast => {
            let g = grayscale(x);
            let mean = g.data().iter().sum::<f64>() / g.len() as f64;
            blend_with(x, &ImageTensor::filled(x.shape(), mean), m)
        }
        DistortionKind::Solarize => x.map(|v| if v >= m { 1.0 - v } else { v }),
        DistortionKind::CenterCrop => center_crop(x, m),
        DistortionKind::GaussianBlur => gaussian_blur(x, m as usize),
        DistortionKind::GaussianNoise => {
            if m == 0.0 {
                x.clone()
            } else {
                let normal = Normal::new(0.0, m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let mut rng = seeded(spec.seed);
                let mut out = x.clone();
                for v in out.data_mut() {
                    *v += normal.sample(&mut rng);
                }
                out
            }
        }
        DistortionKind::JpegCompression => jpeg_round_trip(x, m as u8)?,
    };
    Ok(out.clip_unit())
}

fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Inverse warp: `map(y, x)` gives the source coordinate of output pixel
/// `(y, x)`.
fn warp(x: &ImageTensor, map: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor {
    let (h, w, c) = x.shape();
    let mut out = ImageTensor::filled(x.shape(), 0.0);
    for yy in 0..h {
        for xx in 0..w {
            let (sy, sx) = map(yy as f64, xx as f64);
            for ch in 0..c {
                out.set(yy, xx, ch, sample_bilinear(x.plane(ch), h, w, sy, sx));
            }
        }
    }
    out
}

/// ITU-R 601 luma, replicated across channels.
fn grayscale(x: &ImageTensor) -> ImageTensor {
    let (h, w, c) = x.shape();
    if c != 3 {
        return x.clone();
    }
    let mut out = x.clone();
    for i in 0..h * w {
        let l = 0.299 * x.data()[i] + 0.587 * x.data()[h * w + i] + 0.114 * x.data()[2 * h * w + i];
        for ch in 0..3 {
            out.data_mut()[ch * h * w + i] = l;
        }
    }
    out
}

/// `base + factor * (x - base)`.
fn blend_with(x: &ImageTensor, base: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 1.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for (o, b) in out.data_mut().iter_mut().zip(base.data()) {
        *o = b + factor * (*o - b);
    }
    out
}

fn center_crop(x: &ImageTensor, ratio: f64) -> ImageTensor {
    if ratio == 1.0 {
        return x.clone();
    }
    let (h, w, _) = x.shape();
    let (ch, cw) = (h as f64 * ratio, w as f64 * ratio);
    let (oy, ox) = ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0);
    // Pixel-center aligned resize of the crop window back to h x w.
    warp(x, |y, xx| {
        (
            oy + (y + 0.5) * ch / h as f64 - 0.5,
            ox + (xx + 0.5) * cw / w as f64 - 0.5,
        )
    })
}

/// σ from the kernel width, as OpenCV derives it when σ is unspecified.
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_blur(x: &ImageTensor, kernel: usize) -> ImageTensor {
    if kernel == 1 {
        return x.clone();
    }
    let sigma = blur_sigma(kernel);
    let r = (kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w, c) = x.shape();
    let mut tmp = x.clone();
    let mut out = x.clone();
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v: f64 = (-r..=r)
                    .map(|d| k[(d + r) as usize] * x.get(y, reflect101(xx as isize + d, w), ch))
                    .sum();
                tmp.set(y, xx, ch, v);
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let v: f64 = (-r..=r)
                    .map(|d| k[(d + r) as usize] * tmp.get(reflect101(y as isize + d, h), xx, ch))
                    .sum();
                out.set(y, xx, ch, v);
            }
        }
    }
    out
}

fn jpeg_round_trip(x: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let (h, w, c) = x.shape();
    let (raw, color) = if c == 1 {
        (
            x.data().iter().map(|&v| (clip_unit(v) * 255.0).round() as u8).collect(),
            ExtendedColorType::L8,
        )
    } else {
        (x.to_rgb8(), ExtendedColorType::Rgb8)
    };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality).encode(&raw, w as u32, h as u32, color)?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?;
    if c == 1 {
        let l = decoded.to_luma8();
        ImageTensor::new((h, w, 1), l.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
    } else {
        let rgb = decoded.to_rgb8();
        let full = ImageTensor::from_rgb8(h, w, rgb.as_raw());
        if c == 3 {
            Ok(full)
        } else {
            Err(Error::Shape(format!("JPEG supports 1 or 3 channels, got {c}")))
        }
    }
}

/// Utility of each magnitude over an image set. Magnitudes must be ordered
/// by increasing [`DistortionKind::strength`], so JPEG runs from high to low
/// quality. Image `i` of a stochastic kind uses seed `seed + i`.
pub fn sweep_distortion(
    xs: &[ImageTensor],
    kind: DistortionKind,
    magnitudes: &[f64],
    seed: u64,
) -> Result<Vec<(f64, UtilitySummary)>> {
    if xs.is_empty() || magnitudes.is_empty() {
        return Err(Error::InvalidArgument("distortion sweep needs images and magnitudes".into()));
    }
    let ordered = magnitudes.windows(2).all(|p| kind.strength(p[0]) <= kind.strength(p[1]));
    if !ordered {
        return Err(Error::InvalidArgument(format!(
            "{} magnitudes must be sorted by increasing strength",
            kind.as_str()
        )));
    }
    magnitudes
        .iter()
        .map(|&m| {
            let out = xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    apply_distortion(
                        x,
                        &DistortionSpec {
                            kind,
                            magnitude: m,
                            seed: seed.wrapping_add(i as u64),
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((m, utility_summary(xs, &out)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mse;

    fn sample() -> ImageTensor {
        let (h, w) = (16, 16);
        let mut x = ImageTensor::filled((h, w, 3), 0.0);
        for y in 0..h {
            for xx in 0..w {
                x.set(y, xx, 0, (y as f64 / 15.0).min(1.0));
                x.set(y, xx, 1, if (y / 4 + xx / 4) % 2 == 0 { 0.8 } else { 0.2 });
                x.set(y, xx, 2, ((xx * 7 + y * 3) % 13) as f64 / 13.0);
            }
        }
        x
    }

    #[test]
    fn identities_are_bit_exact() {
        let x = sample();
        for kind in DistortionKind::ALL {
            if let Some(m) = kind.identity_magnitude() {
                let out = apply_distortion(&x, &DistortionSpec { kind, magnitude: m, seed: 5 }).unwrap();
                assert_eq!(out, x, "{}", kind.as_str());
            }
        }
    }

    #[test]
    fn closed_form_photometrics() {
        let x = sample();
        let half = apply_distortion(&x, &DistortionSpec::new(DistortionKind::Brightness, 0.5)).unwrap();
        for (a, b) in half.data().iter().zip(x.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        let sol = apply_distortion(&x, &DistortionSpec::new(DistortionKind::Solarize, 0.5)).unwrap();
        for (a, b) in sol.data().iter().zip(x.data()) {
            assert_eq!(*a, if *b >= 0.5 { 1.0 - b } else { *b });
        }
        let flat = apply_distortion(&x, &DistortionSpec::new(DistortionKind::Contrast, 0.0)).unwrap();
        assert!(flat.data().iter().all(|v| (v - flat.data()[0]).abs() < 1e-12));
        let gray = apply_distortion(&x, &DistortionSpec::new(DistortionKind::Color, 0.0)).unwrap();
        assert_eq!(gray.plane(0), gray.plane(2));
    }

    #[test]
    fn integer_translation_shifts_and_fills_zero() {
        let x = sample();
        let t = apply_distortion(&x, &DistortionSpec::new(DistortionKind::TranslateX, 3.0)).unwrap();
        for y in 0..16 {
            for xx in 0..16 {
                let expected = if xx < 3 { 0.0 } else { x.get(y, xx - 3, 1) };
                assert_eq!(t.get(y, xx, 1), expected);
            }
        }
    }

    #[test]
    fn blur_sigma_follows_kernel_rule() {
        assert!((blur_sigma(3) - 0.8).abs() < 1e-12);
        assert!((blur_sigma(5) - 1.1).abs() < 1e-12);
        assert!((blur_sigma(9) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_constants() {
        let x = ImageTensor::filled((9, 9, 3), 0.37);
        let out = apply_distortion(&x, &DistortionSpec::new(DistortionKind::GaussianBlur, 7.0)).unwrap();
        assert!(out.linf_distance(&x).unwrap() < 1e-12);
    }

    #[test]
    fn noise_is_seeded_and_has_expected_power() {
        let x = ImageTensor::filled((32, 32, 3), 0.5);
        let spec = |seed| DistortionSpec {
            kind: DistortionKind::GaussianNoise,
            magnitude: 0.05,
            seed,
        };
        assert_eq!(apply_distortion(&x, &spec(1)).unwrap(), apply_distortion(&x, &spec(1)).unwrap());
        assert_ne!(apply_distortion(&x, &spec(1)).unwrap(), apply_distortion(&x, &spec(2)).unwrap());
        let mean: f64 = (0..20).map(|s| mse(&x, &apply_distortion(&x, &spec(s)).unwrap()).unwrap()).sum::<f64>() / 20.0;
        assert!((mean - 0.0025).abs() < 0.2 * 0.0025, "{mean}");
    }

    #[test]
    fn out_of_range_and_malformed_specs_fail() {
        let x = sample();
        for (kind, m) in [
            (DistortionKind::Rotate, 45.0),
            (DistortionKind::CenterCrop, 0.5),
            (DistortionKind::GaussianBlur, 4.0),
            (DistortionKind::JpegCompression, 95.0),
            (DistortionKind::GaussianNoise, -0.01),
            (DistortionKind::ShearX, f64::NAN),
        ] {
            assert!(apply_distortion(&x, &DistortionSpec::new(kind, m)).is_err());
        }
    }

    #[test]
    fn default_grids_are_valid_strength_orders() {
        let x = sample();
        for kind in DistortionKind::ALL {
            let grid = kind.default_grid();
            assert!(sweep_distortion(std::slice::from_ref(&x), kind, &grid, 0).is_ok(), "{}", kind.as_str());
        }
        assert!(sweep_distortion(&[x.clone()], DistortionKind::JpegCompression, &[10.0, 90.0], 0).is_err());
        assert!(sweep_distortion(&[x], DistortionKind::Rotate, &[10.0, 5.0], 0).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in DistortionKind::ALL {
            assert_eq!(DistortionKind::parse(kind.as_str()).unwrap(), kind);
        }
    }
}
