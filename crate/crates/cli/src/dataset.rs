//! Dataset materialization and the JSON manifest.
//!
//! Synthetic scenes are reloaded by regenerating them and checking every
//! digest against the manifest; paired data is read back from the exported
//! PGM files.

use std::fs;
use std::path::{Path, PathBuf};

use fgrm_core::scenes::{self, Provenance, SceneSample, Splits};
use fgrm_core::CoreError;
use image::{DynamicImage, GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Result, RunError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: SplitName,
    /// Paths relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    /// SHA-256 of the image values (little-endian f64) and mask labels.
    pub digest: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hash of the config fields that determine the data.
    pub data_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub source: Source,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SceneSample>,
    pub splits: Splits,
    pub source: Source,
}

/// Hash of everything the samples and their split depend on.
pub fn data_hash(cfg: &ExperimentConfig) -> String {
    let key = serde_json::json!({
        "scene": cfg.scene,
        "dataset_size": cfg.dataset_size,
        "seed": cfg.seed,
        "paired_data": cfg.paired_data,
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

pub fn sample_digest(sample: &SceneSample) -> String {
    let mut h = Sha256::new();
    for v in &sample.image {
        h.update(v.to_le_bytes());
    }
    for &l in &sample.mask {
        h.update((l as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Dataset {
    /// Generates the synthetic scenes, or reads `cfg.paired_data`.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.paired_data {
            None => Self::synthetic(cfg),
            Some(root) => Self::paired(cfg, root),
        }
    }

    fn synthetic(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            samples: scenes::generate_dataset(&cfg.scene, cfg.dataset_size),
            splits: scenes::split(cfg.dataset_size, cfg.seed)?,
            source: Source::Synthetic,
        })
    }

    /// Reads `root/images/*.pgm` with labels in the same-named
    /// `root/masks/*.pgm`. Image files are in name order.
    fn paired(cfg: &ExperimentConfig, root: &Path) -> Result<Self> {
        let images = root.join("images");
        let mut names: Vec<PathBuf> = fs::read_dir(&images)
            .map_err(|e| RunError::io(&images, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        names.sort();
        let samples = names
            .iter()
            .enumerate()
            .map(|(index, path)| {
                let mask = root.join("masks").join(path.file_name().expect("listed file"));
                read_pair(cfg, path, &mask, index)
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = scenes::split(samples.len(), cfg.seed)?;
        Ok(Self {
            samples,
            splits,
            source: Source::Paired,
        })
    }

    pub fn split(&self, which: SplitName) -> Vec<&SceneSample> {
        let idx = match which {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }

    fn split_of(&self, index: usize) -> SplitName {
        if self.splits.train.contains(&index) {
            SplitName::Train
        } else if self.splits.val.contains(&index) {
            SplitName::Val
        } else {
            SplitName::Test
        }
    }

    /// Writes PGM copies of every image and mask plus the manifest into `dir`.
    pub fn export(&self, dir: &Path, cfg: &ExperimentConfig, config_hash: &str) -> Result<Manifest> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| RunError::io(&d, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for (index, s) in self.samples.iter().enumerate() {
            let image = PathBuf::from(format!("images/{index:05}.pgm"));
            let mask = PathBuf::from(format!("masks/{index:05}.pgm"));
            let pixels: Vec<u8> = s.image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            write_pgm(&dir.join(&image), s.width, s.height * s.channels, pixels)?;
            write_pgm(&dir.join(&mask), s.width, s.height, s.mask.iter().map(|&l| l as u8).collect())?;
            entries.push(ManifestEntry {
                index,
                split: self.split_of(index),
                image,
                mask,
                digest: sample_digest(s),
                provenance: s.provenance.clone(),
            });
        }
        let manifest = Manifest {
            data_hash: data_hash(cfg),
            config_hash: config_hash.to_string(),
            seed: cfg.seed,
            source: self.source.clone(),
            height: cfg.model.height,
            width: cfg.model.width,
            channels: cfg.model.in_channels,
            classes: cfg.model.classes,
            entries,
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest is plain data");
        fs::write(&path, text).map_err(|e| RunError::io(&path, e))?;
        Ok(manifest)
    }

    /// Reloads the dataset described by `dir/manifest.json`, checking that
    /// it belongs to `cfg` and that every sample matches its digest.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let fail = |reason: String| RunError::Manifest {
            path: path.clone(),
            reason,
        };
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => fail("not found; run `fgrm pretrain` first".into()),
            _ => RunError::io(&path, e),
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if manifest.data_hash != data_hash(cfg) {
            return Err(fail("dataset was built from a different scene/seed configuration".into()));
        }
        let data = match manifest.source {
            Source::Synthetic => Self::synthetic(cfg)?,
            Source::Paired => {
                let samples = manifest
                    .entries
                    .iter()
                    .map(|e| read_pair(cfg, &dir.join(&e.image), &dir.join(&e.mask), e.index))
                    .collect::<Result<Vec<_>>>()?;
                let splits = scenes::split(samples.len(), cfg.seed)?;
                Self {
                    samples,
                    splits,
                    source: Source::Paired,
                }
            }
        };
        if data.samples.len() != manifest.entries.len() {
            return Err(fail(format!(
                "lists {} samples, configuration yields {}",
                manifest.entries.len(),
                data.samples.len()
            )));
        }
        for (e, s) in manifest.entries.iter().zip(&data.samples) {
            if e.digest != sample_digest(s) || e.split != data.split_of(e.index) {
                return Err(fail(format!("sample {} does not match its digest or split", e.index)));
            }
        }
        Ok(data)
    }
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).expect("buffer matches dimensions");
    img.save_with_format(path, ImageFormat::Pnm).map_err(|source| RunError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_gray(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| RunError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_pair(cfg: &ExperimentConfig, image: &Path, mask: &Path, index: usize) -> Result<SceneSample> {
    let (h, w) = (cfg.model.height, cfg.model.width);
    let img = read_gray(image)?;
    let m = read_gray(mask)?.to_luma8();
    let shape_err = |p: &Path, got: (u32, u32)| RunError::Manifest {
        path: p.to_path_buf(),
        reason: format!("expected a {w}x{h} image, found {}x{}", got.0, got.1),
    };
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(shape_err(image, (img.width(), img.height())));
    }
    if m.dimensions() != (w as u32, h as u32) {
        return Err(shape_err(mask, m.dimensions()));
    }
    let values: Vec<f64> = match &img {
        DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        other => other.to_luma8().as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    };
    let labels: Vec<usize> = m.as_raw().iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.model.classes) {
        return Err(CoreError::LabelOutOfRange {
            label: bad,
            classes: cfg.model.classes,
        }
        .into());
    }
    Ok(SceneSample {
        height: h,
        width: w,
        channels: 1,
        image: values,
        band: vec![false; labels.len()],
        mask: labels,
        provenance: Provenance {
            seed: cfg.seed,
            index,
            corruption: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy(1);
        cfg.dataset_size = 12;
        cfg
    }

    #[test]
    fn export_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = Dataset::build(&cfg).unwrap();
        let manifest = data.export(dir.path(), &cfg, &cfg.hash()).unwrap();
        assert_eq!(manifest.entries.len(), 12);
        assert!(dir.path().join("images/00003.pgm").exists());
        let back = Dataset::load(dir.path(), &cfg).unwrap();
        assert_eq!(back.samples, data.samples);
        assert_eq!(back.splits, data.splits);
    }

    #[test]
    fn missing_manifest_is_an_io_class_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = Dataset::load(dir.path(), &small()).unwrap_err();
        assert!(matches!(err, RunError::Manifest { .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn manifest_from_other_seed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        Dataset::build(&cfg).unwrap().export(dir.path(), &cfg, "x").unwrap();
        let other = ExperimentConfig {
            seed: 2,
            ..cfg
        };
        assert!(Dataset::load(dir.path(), &other).is_err());
    }

    #[test]
    fn paired_layout_loads_and_survives_export() {
        let src = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.model.height = 8;
        cfg.model.width = 8;
        cfg.paired_data = Some(src.path().to_path_buf());
        for sub in ["images", "masks"] {
            fs::create_dir_all(src.path().join(sub)).unwrap();
        }
        for i in 0..10u8 {
            let img: Vec<u8> = (0..64).map(|p| p * 3 + i).collect();
            let mask: Vec<u8> = (0..64).map(|p| (p / 22) as u8).collect();
            write_pgm(&src.path().join(format!("images/s{i}.pgm")), 8, 8, img).unwrap();
            write_pgm(&src.path().join(format!("masks/s{i}.pgm")), 8, 8, mask).unwrap();
        }
        let data = Dataset::build(&cfg).unwrap();
        assert_eq!(data.samples.len(), 10);
        assert_eq!(data.samples[2].image[1], 5.0 / 255.0);
        assert_eq!(data.samples[0].mask[63], 2);
        let out = tempfile::tempdir().unwrap();
        data.export(out.path(), &cfg, "x").unwrap();
        let back = Dataset::load(out.path(), &cfg).unwrap();
        assert_eq!(back.samples, data.samples);
    }
}
