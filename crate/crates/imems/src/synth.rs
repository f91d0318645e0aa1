//! Deterministic synthetic segmentation datasets.
//!
//! Each image is a Voronoi partition of the plane: random cell sites get
//! random labels, every pixel takes the label of its nearest site, and each
//! label renders as a distinct texture (base intensity plus an oriented
//! sinusoidal grating plus uniform noise). Masks are regenerated until every
//! label is present. All randomness derives from one seed, so a config
//! reproduces byte-identical files.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, ManifestItem, Protocol};
use crate::embedding::{RgbImage, SegMap};
use crate::error::{Error, Result};
use crate::io;

/// Texture of one label: grating frequency (cycles per pixel), grating
/// orientation (radians), and uniform noise amplitude (gray levels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureParams {
    pub frequency: f64,
    pub orientation: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_labels: usize,
    pub width: u32,
    pub height: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Number of Voronoi sites per image. Must be >= num_labels.
    pub region_seeds: usize,
    pub seed: u64,
    /// Per-label textures; defaults are derived from the label index.
    pub textures: Option<Vec<TextureParams>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_labels: 3,
            width: 128,
            height: 128,
            train: 40,
            val: 10,
            test: 10,
            region_seeds: 8,
            seed: 0,
            textures: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=crate::embedding::MAX_LABELS).contains(&self.num_labels) {
            return Err(Error::config(format!(
                "num_labels must be in 2..=256, got {}",
                self.num_labels
            )));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::config("synthetic images must be at least 4x4"));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::config("train and test counts must be nonzero"));
        }
        if self.region_seeds < self.num_labels {
            return Err(Error::config(format!(
                "region_seeds ({}) must be >= num_labels ({})",
                self.region_seeds, self.num_labels
            )));
        }
        if let Some(t) = &self.textures {
            if t.len() != self.num_labels {
                return Err(Error::config(format!(
                    "{} textures given for {} labels",
                    t.len(),
                    self.num_labels
                )));
            }
        }
        Ok(())
    }

    fn texture(&self, label: usize) -> TextureParams {
        match &self.textures {
            Some(t) => t[label].clone(),
            None => TextureParams {
                frequency: 0.04 + 0.015 * label as f64,
                orientation: 0.7 * label as f64,
                noise: 12.0,
            },
        }
    }

    /// Base intensity per label, spread evenly over 40..=215 so classes stay
    /// separable after noise.
    fn base_intensity(&self, label: usize) -> f64 {
        40.0 + 175.0 * label as f64 / (self.num_labels - 1) as f64
    }
}

/// splitmix64 of (seed, stream): decorrelated per-image seeds from one root.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rasterize_sites(
    width: u32,
    height: u32,
    sites: &[(u32, u32, u8)],
) -> Vec<u8> {
    let (w, h) = (width as usize, height as usize);
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut best = i64::MAX;
            let mut arg = 0u8;
            for &(sx, sy, l) in sites {
                let dx = x as i64 - sx as i64;
                let dy = y as i64 - sy as i64;
                let d = dx * dx + dy * dy;
                if d < best {
                    best = d;
                    arg = l;
                }
            }
            labels[y * w + x] = arg;
        }
    }
    labels
}

/// Generate one image/mask pair from an already-positioned RNG.
pub fn generate_pair(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<(RgbImage, SegMap)> {
    let k = config.num_labels;
    let mut labels = None;
    for _ in 0..100 {
        let sites: Vec<(u32, u32, u8)> = (0..config.region_seeds)
            .map(|_| {
                (
                    rng.random_range(0..config.width),
                    rng.random_range(0..config.height),
                    rng.random_range(0..k as u8),
                )
            })
            .collect();
        let raster = rasterize_sites(config.width, config.height, &sites);
        let mut present = vec![false; k];
        for &l in &raster {
            present[l as usize] = true;
        }
        if present.iter().all(|&p| p) {
            labels = Some(raster);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::config("failed to cover every label in 100 attempts; raise region_seeds")
    })?;

    let (w, h) = (config.width as usize, config.height as usize);
    let mut rgb = Vec::with_capacity(3 * w * h);
    let textures: Vec<TextureParams> = (0..k).map(|l| config.texture(l)).collect();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x] as usize;
            let t = &textures[l];
            let phase = x as f64 * t.orientation.cos() + y as f64 * t.orientation.sin();
            let grating = 30.0 * (std::f64::consts::TAU * t.frequency * phase).sin();
            let noise = rng.random_range(-t.noise..=t.noise);
            let v = config.base_intensity(l) + grating + noise;
            for offset in [10.0, 0.0, -10.0] {
                rgb.push((v + offset).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let image = RgbImage::new(config.width, config.height, rgb)?;
    let mask = SegMap::new(config.width, config.height, k, labels)?;
    Ok((image, mask))
}

/// Write a full dataset (PNGs plus fixed-split manifest) under `out_dir` and
/// return the manifest path.
pub fn write_dataset(config: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let total = config.train + config.val + config.test;
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(out_dir, e))?;

    let mut items = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, i as u64));
        let (image, mask) = generate_pair(config, &mut rng)?;
        let image_rel = format!("images/img_{i:03}.png");
        let mask_rel = format!("masks/mask_{i:03}.png");
        io::save_rgb(&out_dir.join(&image_rel), &image)?;
        io::save_mask(&out_dir.join(&mask_rel), &mask)?;
        items.push(ManifestItem {
            image: image_rel,
            mask: mask_rel,
        });
    }

    let train: Vec<usize> = (0..config.train).collect();
    let val: Vec<usize> = (config.train..config.train + config.val).collect();
    let test: Vec<usize> = (config.train + config.val..total).collect();
    let manifest = Manifest {
        name: format!(
            "synthetic-k{}-{}x{}",
            config.num_labels, config.width, config.height
        ),
        num_labels: config.num_labels,
        protocol: Protocol::FixedSplit,
        items,
        train: Some(train),
        val: if val.is_empty() { None } else { Some(val) },
        test: Some(test),
        num_folds: None,
        groups: None,
        label_names: None,
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
