//! Synthetic base-to-novel dataset.
//!
//! Each class is a coarse procedural shape (contour and pose carry the label).
//! A small high-contrast texture patch — the confound — co-occurs with base
//! labels at rate `rho` during base training, while held-out and novel images
//! draw it uniformly at random. A student that latches onto the texture
//! instead of the shape collapses on the decorrelated splits.

use crate::model::Image;
use crate::tensor::Data;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total coarse classes; must be even and at least 4. Half become base,
    /// half novel.
    pub n_classes: usize,
    /// Base-training samples per base class (confounded at rate `rho`).
    pub train_per_class: usize,
    /// Held-out samples per class with uniformly random confounds.
    pub test_per_class: usize,
    /// Confound-free samples per class for teacher pretraining.
    pub pretrain_per_class: usize,
    /// Probability that a base-training image carries its class's paired
    /// confound texture.
    pub rho: f64,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_classes: 8,
            train_per_class: 16,
            test_per_class: 16,
            pretrain_per_class: 24,
            rho: 0.95,
            image_size: 32,
        }
    }
}

/// Token ids: 0 is reserved, 1 is the shared template token, class `i` maps
/// to token `2 + i`. The two-token sequence is the desk analogue of
/// "a photo of [CLASSNAME]".
pub const TEMPLATE_TOKEN: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassDef {
    pub name: String,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub confound: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct B2NDataset {
    pub config: DataConfig,
    pub seed: u64,
    pub classes: Vec<ClassDef>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    /// Base-class training samples, confounded at rate rho.
    pub train_base: Vec<Sample>,
    /// Held-out base-class samples with decorrelated confounds.
    pub test_base: Vec<Sample>,
    /// Novel-class samples with decorrelated confounds.
    pub test_novel: Vec<Sample>,
    /// Confound-free samples over all classes, for teacher pretraining.
    pub pretrain: Vec<Sample>,
}

impl B2NDataset {
    pub fn class_tokens(&self, class: usize) -> &[usize] {
        &self.classes[class].tokens
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: String,
    label: usize,
    class_name: String,
    confound: Option<usize>,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: DataConfig,
    seed: u64,
    classes: Vec<String>,
    base_classes: Vec<usize>,
    novel_classes: Vec<usize>,
    samples: Vec<ManifestEntry>,
}

/// Dump every split as raw little-endian f64 arrays plus a JSON manifest
/// describing file names, labels, confounds, and shapes.
pub fn dump_snapshot(dataset: &B2NDataset, dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::new();
    let splits: [(&str, &[Sample]); 4] = [
        ("train_base", &dataset.train_base),
        ("test_base", &dataset.test_base),
        ("test_novel", &dataset.test_novel),
        ("pretrain", &dataset.pretrain),
    ];
    for (split, set) in splits {
        for (i, sample) in set.iter().enumerate() {
            let file = format!("{split}_{i:04}.bin");
            let mut bytes = Vec::with_capacity(sample.image.pixels.values.len() * 8);
            for v in &sample.image.pixels.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(dir.join(&file), bytes)?;
            samples.push(ManifestEntry {
                file,
                split: split.to_string(),
                label: sample.label,
                class_name: dataset.classes[sample.label].name.clone(),
                confound: sample.confound,
                shape: sample.image.pixels.shape.clone(),
            });
        }
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        seed: dataset.seed,
        classes: dataset.classes.iter().map(|c| c.name.clone()).collect(),
        base_classes: dataset.base_classes.clone(),
        novel_classes: dataset.novel_classes.clone(),
        samples,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

const SHAPE_NAMES: [&str; 8] = [
    "disc", "frame", "triangle", "cross", "hbars", "vbars", "ring", "diamond",
];

pub fn generate_b2n(config: &DataConfig, seed: u64) -> Result<B2NDataset, DataError> {
    if config.n_classes < 4 || config.n_classes % 2 != 0 {
        return Err(DataError::InvalidParameter(format!(
            "n_classes must be even and >= 4, got {}",
            config.n_classes
        )));
    }
    if !(0.0..=1.0).contains(&config.rho) {
        return Err(DataError::InvalidParameter(format!(
            "rho must be in [0, 1], got {}",
            config.rho
        )));
    }
    if config.image_size < 16 {
        return Err(DataError::InvalidParameter(
            "image_size must be at least 16".into(),
        ));
    }

    let c = config.n_classes;
    let classes: Vec<ClassDef> = (0..c)
        .map(|i| ClassDef {
            name: format!("{}-{}", SHAPE_NAMES[i % SHAPE_NAMES.len()], i),
            tokens: vec![TEMPLATE_TOKEN, 2 + i],
        })
        .collect();
    let base_classes: Vec<usize> = (0..c / 2).collect();
    let novel_classes: Vec<usize> = (c / 2..c).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut train_base = Vec::new();
    for &class in &base_classes {
        for _ in 0..config.train_per_class {
            let confound = if rng.gen_range(0.0..1.0) < config.rho {
                class % c
            } else {
                rng.gen_range(0..c)
            };
            train_base.push(render_sample(config, class, Some(confound), &mut rng));
        }
    }

    let mut test_base = Vec::new();
    for &class in &base_classes {
        for _ in 0..config.test_per_class {
            let confound = rng.gen_range(0..c);
            test_base.push(render_sample(config, class, Some(confound), &mut rng));
        }
    }

    let mut test_novel = Vec::new();
    for &class in &novel_classes {
        for _ in 0..config.test_per_class {
            let confound = rng.gen_range(0..c);
            test_novel.push(render_sample(config, class, Some(confound), &mut rng));
        }
    }

    let mut pretrain = Vec::new();
    for class in 0..c {
        for _ in 0..config.pretrain_per_class {
            pretrain.push(render_sample(config, class, None, &mut rng));
        }
    }

    Ok(B2NDataset {
        config: config.clone(),
        seed,
        classes,
        base_classes,
        novel_classes,
        train_base,
        test_base,
        test_novel,
        pretrain,
    })
}

fn render_sample(
    config: &DataConfig,
    class: usize,
    confound: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let s = config.image_size;
    let mut pixels = vec![0.0_f64; 3 * s * s];

    // strong background noise keeps the shape contour from being trivial
    for v in pixels.iter_mut() {
        *v = rng.gen_range(0.0..0.25);
    }

    // pose jitter: center offset and radius scale
    let cx = s as f64 / 2.0 + rng.gen_range(-4.0..4.0);
    let cy = s as f64 / 2.0 + rng.gen_range(-4.0..4.0);
    let r = s as f64 * rng.gen_range(0.26..0.38);
    let ink = 0.55 + rng.gen_range(-0.1..0.1);

    let shape = class % SHAPE_NAMES.len();
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let on = match shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => {
                    let m = dx.abs().max(dy.abs());
                    m <= r && m >= r * 0.6
                }
                2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                3 => (dx.abs() <= r * 0.25 && dy.abs() <= r)
                    || (dy.abs() <= r * 0.25 && dx.abs() <= r),
                4 => dy.abs() <= r && dx.abs() <= r && ((y / 3) % 2 == 0),
                5 => dy.abs() <= r && dx.abs() <= r && ((x / 3) % 2 == 0),
                6 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
                }
                _ => dx.abs() + dy.abs() <= r,
            };
            if on {
                for ch in 0..3 {
                    // per-channel tint keeps shapes grayscale-ish but not flat
                    let tint = 1.0 - 0.1 * ch as f64;
                    pixels[(ch * s + y) * s + x] = ink * tint;
                }
            }
        }
    }

    if let Some(cid) = confound {
        stamp_confound(&mut pixels, s, cid);
    }

    Sample {
        image: Image::new(Data::new(vec![3, s, s], pixels)),
        label: class,
        confound,
    }
}

/// Stamp an 8x8 maximum-contrast texture tile. The confound id selects both
/// the border position and the checker pattern, so ids are visually distinct
/// and the tile dominates the patches it covers.
fn stamp_confound(pixels: &mut [f64], s: usize, cid: usize) {
    const T: usize = 8;
    let spots = [
        (0, 0),
        (0, s - T),
        (s - T, 0),
        (s - T, s - T),
        (0, s / 2 - T / 2),
        (s - T, s / 2 - T / 2),
        (s / 2 - T / 2, 0),
        (s / 2 - T / 2, s - T),
    ];
    let (oy, ox) = spots[cid % spots.len()];
    let phase = cid / spots.len();
    for y in 0..T {
        for x in 0..T {
            let checker = (y / 2 + x / 2 + phase) % 2 == 0;
            let v = if checker { 1.0 } else { 0.0 };
            for ch in 0..3 {
                // alternate channel inversion across ids for extra contrast
                let val = if (cid + ch) % 2 == 0 { v } else { 1.0 - v };
                pixels[(ch * s + oy + y) * s + ox + x] = val;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let cfg = DataConfig { train_per_class: 4, test_per_class: 4, pretrain_per_class: 4, ..DataConfig::default() };
        let a = generate_b2n(&cfg, 42).unwrap();
        let b = generate_b2n(&cfg, 42).unwrap();
        assert_eq!(a.train_base, b.train_base);
        assert_eq!(a.test_novel, b.test_novel);
        assert_eq!(a.pretrain, b.pretrain);
    }

    #[test]
    fn split_is_even_and_disjoint() {
        let ds = generate_b2n(&DataConfig::default(), 0).unwrap();
        assert_eq!(ds.base_classes.len(), 4);
        assert_eq!(ds.novel_classes.len(), 4);
        assert!(ds.base_classes.iter().all(|c| !ds.novel_classes.contains(c)));
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut cfg = DataConfig::default();
        cfg.rho = 1.5;
        assert!(generate_b2n(&cfg, 0).is_err());
        let mut cfg = DataConfig::default();
        cfg.n_classes = 5;
        assert!(generate_b2n(&cfg, 0).is_err());
        let mut cfg = DataConfig::default();
        cfg.n_classes = 2;
        assert!(generate_b2n(&cfg, 0).is_err());
    }

    #[test]
    fn snapshot_dump_writes_arrays_and_manifest() {
        let cfg = DataConfig {
            train_per_class: 1,
            test_per_class: 1,
            pretrain_per_class: 1,
            ..DataConfig::default()
        };
        let ds = generate_b2n(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_snapshot(&ds, dir.path()).unwrap();

        let manifest: Manifest = serde_json::from_slice(
            &std::fs::read(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        let total = ds.train_base.len() + ds.test_base.len() + ds.test_novel.len()
            + ds.pretrain.len();
        assert_eq!(manifest.samples.len(), total);

        let entry = &manifest.samples[0];
        let bytes = std::fs::read(dir.path().join(&entry.file)).unwrap();
        assert_eq!(bytes.len(), entry.shape.iter().product::<usize>() * 8);
        let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(first, ds.train_base[0].image.pixels.values[0]);
    }

    #[test]
    fn pretrain_split_is_confound_free() {
        let ds = generate_b2n(&DataConfig::default(), 1).unwrap();
        assert!(ds.pretrain.iter().all(|s| s.confound.is_none()));
        assert!(ds.train_base.iter().all(|s| s.confound.is_some()));
    }
}
