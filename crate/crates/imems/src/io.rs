//! PNG and bundle file I/O.
//!
//! An embedded image is stored on disk as a bundle: one 8-bit grayscale PNG
//! per channel named `<stem>.chNN.png` plus a `<stem>.meta.json` describing
//! dimensions, channel count, and optional label names.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddedImage, GrayImage, RgbImage, SegMap};
use crate::error::{Error, Result};

pub const META_SUFFIX: &str = ".meta.json";

fn open_image(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = open_image(path)?.to_rgb8();
    RgbImage::new(img.width(), img.height(), img.into_raw())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = open_image(path)?;
    match img {
        DynamicImage::ImageLuma8(g) => GrayImage::new(g.width(), g.height(), g.into_raw()),
        other => Err(Error::parse(
            format!("grayscale png {}", path.display()),
            format!("expected 8-bit grayscale, found {:?}", other.color()),
        )),
    }
}

/// Load a label mask stored as an 8-bit grayscale PNG whose pixel values are
/// label indices. When `num_labels` is absent it is inferred as max + 1 (and
/// raised to 2 for an all-zero mask).
pub fn load_mask(path: &Path, num_labels: Option<usize>) -> Result<SegMap> {
    let g = load_gray(path)?;
    let k = match num_labels {
        Some(k) => k,
        None => {
            let max = g.data().iter().copied().max().unwrap_or(0);
            (max as usize + 1).max(2)
        }
    };
    SegMap::new(g.width(), g.height(), k, g.data().to_vec()).map_err(|e| match e {
        Error::LabelRange(detail) => {
            Error::LabelRange(format!("{}: {detail}", path.display()))
        }
        other => other,
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn save_buffer(path: &Path, data: &[u8], w: u32, h: u32, color: ColorType) -> Result<()> {
    ensure_parent(path)?;
    image::save_buffer(path, data, w, h, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    save_buffer(path, image.data(), image.width(), image.height(), ColorType::Rgb8)
}

pub fn save_gray(path: &Path, image: &GrayImage) -> Result<()> {
    save_buffer(path, image.data(), image.width(), image.height(), ColorType::L8)
}

pub fn save_mask(path: &Path, seg: &SegMap) -> Result<()> {
    save_buffer(path, seg.labels(), seg.width(), seg.height(), ColorType::L8)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BundleMeta {
    pub num_labels: usize,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
}

/// Strip a trailing `.meta.json` so callers can pass either the stem or the
/// metadata file itself.
pub fn bundle_stem(path: &Path) -> PathBuf {
    let s = path.as_os_str().to_string_lossy();
    match s.strip_suffix(META_SUFFIX) {
        Some(stripped) => PathBuf::from(stripped),
        None => path.to_path_buf(),
    }
}

fn channel_path(stem: &Path, k: usize) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(format!(".ch{k:02}.png"));
    PathBuf::from(s)
}

fn meta_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(META_SUFFIX);
    PathBuf::from(s)
}

pub fn write_bundle(
    stem: &Path,
    embedded: &EmbeddedImage,
    label_names: Option<&[String]>,
) -> Result<()> {
    if let Some(names) = label_names {
        if names.len() != embedded.num_labels() {
            return Err(Error::config(format!(
                "{} label names given for {} channels",
                names.len(),
                embedded.num_labels()
            )));
        }
    }
    let meta = BundleMeta {
        num_labels: embedded.num_labels(),
        width: embedded.width(),
        height: embedded.height(),
        label_names: label_names.map(<[String]>::to_vec),
    };
    let mp = meta_path(stem);
    ensure_parent(&mp)?;
    let json = serde_json::to_string_pretty(&meta).expect("bundle meta serializes");
    fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    for k in 0..embedded.num_labels() {
        let g = GrayImage::new(embedded.width(), embedded.height(), embedded.channel(k).to_vec())?;
        save_gray(&channel_path(stem, k), &g)?;
    }
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<(EmbeddedImage, BundleMeta)> {
    let stem = bundle_stem(path);
    let mp = meta_path(&stem);
    if !mp.exists() {
        return Err(Error::MissingInput(mp));
    }
    let raw = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: BundleMeta = serde_json::from_str(&raw)
        .map_err(|e| Error::parse(format!("bundle meta {}", mp.display()), e.to_string()))?;
    let n = meta.width as usize * meta.height as usize;
    let mut planes = Vec::with_capacity(meta.num_labels * n);
    for k in 0..meta.num_labels {
        let cp = channel_path(&stem, k);
        let g = load_gray(&cp)?;
        if g.width() != meta.width || g.height() != meta.height {
            return Err(Error::shape(format!(
                "{} is {}x{} but bundle meta says {}x{}",
                cp.display(),
                g.width(),
                g.height(),
                meta.width,
                meta.height
            )));
        }
        planes.extend_from_slice(g.data());
    }
    let embedded = EmbeddedImage::new(meta.width, meta.height, meta.num_labels, planes)?;
    Ok((embedded, meta))
}
