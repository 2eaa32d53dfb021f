//! Face datasets: procedurally rendered identity sprites for desk runs, and
//! directory ingestion (PNG files plus an optional attribute CSV).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageShape, ImageTensor};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result};

/// One binary attribute label for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub filename: String,
    pub attribute: String,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct FaceDataset {
    pub images: Vec<ImageTensor>,
    /// Identity index per image, when known.
    pub identities: Option<Vec<usize>>,
    pub filenames: Vec<String>,
    pub attributes: Vec<AttributeRecord>,
}

impl FaceDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<ImageShape> {
        self.images.first().map(|i| i.shape())
    }

    pub fn identity_count(&self) -> usize {
        self.identities
            .as_ref()
            .and_then(|ids| ids.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    /// Labels of `attribute` keyed by image index.
    pub fn attribute_labels(&self, attribute: &str) -> BTreeMap<usize, u8> {
        let index: BTreeMap<&str, usize> = self
            .filenames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        self.attributes
            .iter()
            .filter(|r| r.attribute == attribute)
            .filter_map(|r| index.get(r.filename.as_str()).map(|&i| (i, r.label)))
            .collect()
    }

    /// Writes `NNNN.png` files plus `attributes.csv` and `identities.csv`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (img, name) in self.images.iter().zip(&self.filenames) {
            img.save_png(&dir.join(name))?;
        }
        let path = dir.join("attributes.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.attributes {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        if let Some(ids) = &self.identities {
            let path = dir.join("identities.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
            w.write_record(["filename", "identity"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for (name, id) in self.filenames.iter().zip(ids) {
                w.write_record([name.as_str(), &id.to_string()])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads every `*.png` in `dir` (sorted by name). `attributes.csv`
    /// (`filename,attribute,label`) and `identities.csv` are optional.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no PNG images in {}",
                dir.display()
            )));
        }
        let images = names
            .iter()
            .map(|n| ImageTensor::load_png(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().position(|i| i.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "{} is {:?}, expected {:?}",
                    names[bad],
                    images[bad].shape(),
                    first.shape()
                )));
            }
        }
        let mut attributes = Vec::new();
        let attr_path = dir.join("attributes.csv");
        if attr_path.exists() {
            let mut r = csv::Reader::from_path(&attr_path).map_err(|e| Error::Format(e.to_string()))?;
            for rec in r.deserialize() {
                let rec: AttributeRecord = rec.map_err(|e| Error::Format(e.to_string()))?;
                if rec.label > 1 {
                    return Err(Error::Format(format!(
                        "attribute label for {} must be 0 or 1",
                        rec.filename
                    )));
                }
                attributes.push(rec);
            }
        }
        let id_path = dir.join("identities.csv");
        let identities = if id_path.exists() {
            let mut r = csv::Reader::from_path(&id_path).map_err(|e| Error::Format(e.to_string()))?;
            let mut map = BTreeMap::new();
            for rec in r.records() {
                let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
                let id: usize = rec
                    .get(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format("bad identities.csv row".into()))?;
                map.insert(rec.get(0).unwrap_or_default().to_string(), id);
            }
            names.iter().map(|n| map.get(n).copied()).collect::<Option<Vec<_>>>()
        } else {
            None
        };
        Ok(Self {
            images,
            identities,
            filenames: names,
            attributes,
        })
    }
}

/// Parameters of the procedural sprite renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub resolution: usize,
    pub identities: usize,
    pub images_per_identity: usize,
    pub seed: u64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            identities: 40,
            images_per_identity: 20,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone)]
struct Identity {
    background: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    eye: [f64; 3],
    lips: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    fringe: f64,
    side_hair: f64,
    eye_gap: f64,
    eye_r: f64,
    eye_y: f64,
    mouth_w: f64,
    glasses: bool,
    beard: bool,
}

#[derive(Debug, Clone)]
struct Pose {
    dx: f64,
    dy: f64,
    scale: f64,
    brightness: f64,
    shade: f64,
    smile: f64,
}

fn jitter(rng: &mut impl Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

impl Identity {
    fn sample(rng: &mut impl Rng) -> Self {
        let hair_palette = [
            [0.08, 0.06, 0.05],
            [0.35, 0.2, 0.1],
            [0.85, 0.7, 0.35],
            [0.7, 0.3, 0.1],
            [0.6, 0.6, 0.62],
            [0.2, 0.12, 0.08],
        ];
        let eye_palette = [[0.1, 0.08, 0.06], [0.15, 0.35, 0.7], [0.2, 0.5, 0.25], [0.4, 0.25, 0.1]];
        let tone: f64 = rng.gen_range(0.0..1.0);
        let skin = [
            0.95 - 0.5 * tone,
            0.8 - 0.5 * tone,
            0.7 - 0.5 * tone,
        ];
        Self {
            background: [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)],
            skin: jitter(rng, skin, 0.04),
            hair: {
                let base = hair_palette[rng.gen_range(0..hair_palette.len())];
                jitter(rng, base, 0.05)
            },
            eye: {
                let base = eye_palette[rng.gen_range(0..eye_palette.len())];
                jitter(rng, base, 0.04)
            },
            lips: jitter(rng, [0.75, 0.3, 0.3], 0.1),
            face_rx: rng.gen_range(0.25..0.34),
            face_ry: rng.gen_range(0.31..0.39),
            fringe: rng.gen_range(0.06..0.2),
            side_hair: rng.gen_range(0.0..0.35),
            eye_gap: rng.gen_range(0.09..0.14),
            eye_r: rng.gen_range(0.03..0.05),
            eye_y: rng.gen_range(-0.1..0.0),
            mouth_w: rng.gen_range(0.07..0.15),
            glasses: rng.gen_bool(0.3),
            beard: rng.gen_bool(0.25),
        }
    }

    fn dark_hair(&self) -> bool {
        self.hair.iter().sum::<f64>() / 3.0 < 0.3
    }
}

fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)
}

fn shade_at(id: &Identity, pose: &Pose, u: f64, v: f64) -> [f64; 3] {
    // Undo the pose so features are drawn in canonical face coordinates.
    let u = (u - 0.5 - pose.dx) / pose.scale + 0.5;
    let v = (v - 0.5 - pose.dy) / pose.scale + 0.5;
    let (cx, cy) = (0.5, 0.56);
    let face = ellipse(u, v, cx, cy, id.face_rx, id.face_ry);
    let head = ellipse(u, v, cx, cy - 0.04, id.face_rx + 0.06, id.face_ry + 0.06);
    let hairline = cy - id.face_ry + id.fringe;

    let mut color = id.background;
    let in_hair_cap = head <= 1.0 && v < hairline;
    let in_side_hair = head <= 1.0 && face > 1.0 && v < cy + id.side_hair;
    if in_hair_cap || in_side_hair {
        color = id.hair;
    }
    if face <= 1.0 && !in_hair_cap {
        color = id.skin;
        let mouth_y = cy + id.face_ry * 0.5;
        if id.beard && v > cy + id.face_ry * 0.3 {
            color = id.hair;
        }
        // Eyes and brows.
        for side in [-1.0, 1.0] {
            let ex = cx + side * id.eye_gap;
            let ey = cy + id.eye_y;
            if ellipse(u, v, ex, ey, id.eye_r * 1.3, id.eye_r) <= 1.0 {
                color = id.eye;
            }
            if ellipse(u, v, ex, ey - id.eye_r * 2.2, id.eye_r * 1.6, id.eye_r * 0.45) <= 1.0 {
                color = id.hair.map(|c| c * 0.8);
            }
            if id.glasses {
                let r = ellipse(u, v, ex, ey, id.eye_r * 2.2, id.eye_r * 1.8);
                if (0.75..=1.15).contains(&r) {
                    color = [0.1, 0.1, 0.12];
                }
            }
        }
        // Mouth: a curved band; `smile` bends the corners upward.
        let t = (u - cx) / id.mouth_w;
        if t.abs() <= 1.0 {
            let centre = mouth_y - pose.smile * 0.04 * (1.0 - t * t) + 0.02 * pose.smile;
            if (v - centre).abs() < 0.018 + 0.01 * (1.0 - t * t) {
                color = id.lips;
            }
        }
    }
    let light = pose.brightness * (1.0 + pose.shade * (u - 0.5));
    color.map(|c| (c * light).clamp(0.0, 1.0))
}

/// Renders anti-aliased face sprites. Identity parameters are fixed per
/// identity; pose, lighting and expression vary per image.
pub fn render_sprites(cfg: &SpriteConfig) -> Result<FaceDataset> {
    if cfg.resolution < 8 || cfg.identities == 0 || cfg.images_per_identity == 0 {
        return Err(Error::InvalidArgument(format!("degenerate sprite config {cfg:?}")));
    }
    let res = cfg.resolution;
    let ss = 3usize;
    let mut images = Vec::new();
    let mut identities = Vec::new();
    let mut filenames = Vec::new();
    let mut attributes = Vec::new();
    for id_index in 0..cfg.identities {
        let mut id_rng = seeded(derive_seed(cfg.seed, id_index as u64));
        let id = Identity::sample(&mut id_rng);
        for k in 0..cfg.images_per_identity {
            let mut rng = seeded(derive_seed(cfg.seed ^ 0xFACE, (id_index * 10_000 + k) as u64));
            let pose = Pose {
                dx: rng.gen_range(-0.04..0.04),
                dy: rng.gen_range(-0.03..0.03),
                scale: rng.gen_range(0.95..1.05),
                brightness: rng.gen_range(0.9..1.1),
                shade: rng.gen_range(-0.15..0.15),
                smile: if rng.gen_bool(0.5) { rng.gen_range(0.5..1.0) } else { rng.gen_range(-0.2..0.1) },
            };
            let mut img = ImageTensor::filled((res, res, 3), 0.0);
            for y in 0..res {
                for x in 0..res {
                    let mut acc = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let u = (x as f64 + (sx as f64 + 0.5) / ss as f64) / res as f64;
                            let v = (y as f64 + (sy as f64 + 0.5) / ss as f64) / res as f64;
                            let c = shade_at(&id, &pose, u, v);
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                        }
                    }
                    for ch in 0..3 {
                        let noise: f64 = rng.gen_range(-0.01..0.01);
                        let v = acc[ch] / (ss * ss) as f64 + noise;
                        img.set(y, x, ch, v.clamp(0.0, 1.0));
                    }
                }
            }
            let name = format!("{:04}_{:03}.png", id_index, k);
            attributes.push(AttributeRecord {
                filename: name.clone(),
                attribute: "smiling".into(),
                label: u8::from(pose.smile > 0.3),
            });
            attributes.push(AttributeRecord {
                filename: name.clone(),
                attribute: "eyeglasses".into(),
                label: u8::from(id.glasses),
            });
            attributes.push(AttributeRecord {
                filename: name.clone(),
                attribute: "dark_hair".into(),
                label: u8::from(id.dark_hair()),
            });
            images.push(img.quantized());
            identities.push(id_index);
            filenames.push(name);
        }
    }
    Ok(FaceDataset {
        images,
        identities: Some(identities),
        filenames,
        attributes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SpriteConfig {
        SpriteConfig {
            resolution: 16,
            identities: 3,
            images_per_identity: 2,
            seed: 1,
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let a = render_sprites(&tiny()).unwrap();
        let b = render_sprites(&tiny()).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 6);
        assert!(a.images.iter().all(|i| i.in_unit_range() && i.shape() == (16, 16, 3)));
        assert_eq!(a.identity_count(), 3);
    }

    #[test]
    fn same_identity_images_are_closer_than_other_identities() {
        let ds = render_sprites(&SpriteConfig {
            identities: 6,
            images_per_identity: 4,
            ..tiny()
        })
        .unwrap();
        let ids = ds.identities.as_ref().unwrap();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let d = crate::losses::mse(ds.images[i].data(), ds.images[j].data()).unwrap();
                if ids[i] == ids[j] {
                    same += d;
                    ns += 1;
                } else {
                    diff += d;
                    nd += 1;
                }
            }
        }
        assert!(same / (ns as f64) < diff / (nd as f64));
    }

    #[test]
    fn directory_round_trip_keeps_labels() {
        let ds = render_sprites(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = FaceDataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.identities, ds.identities);
        assert_eq!(back.attributes, ds.attributes);
        assert_eq!(back.attribute_labels("smiling").len(), 6);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(FaceDataset::load_dir(dir.path()).is_err());
    }
}
