//! Dataset manifests, split protocols, and geometric preprocessing.
//!
//! A dataset is a directory with a `manifest.json` listing image/mask pairs
//! and an evaluation protocol: either a fixed train/test split (with an
//! optional explicit validation set) or k-fold cross-validation. Fold
//! assignment respects item groups so that pieces cut from the same source
//! image never straddle a fold boundary.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{RgbImage, SegMap};
use crate::error::{Error, Result};
use crate::{io, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    FixedSplit,
    Kfold,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub mask: String,
}

/// On-disk description of a dataset. Paths are relative to the manifest's
/// directory. `train`/`val`/`test` index into `items` and apply to the
/// fixed-split protocol; `num_folds` applies to kfold. `groups` (one id per
/// item) keeps related items in the same fold; it defaults to one group per
/// item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_labels: usize,
    pub protocol: Protocol,
    pub items: Vec<ManifestItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_folds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_names: Option<Vec<String>>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)
            .map_err(|e| Error::parse(format!("manifest {}", path.display()), e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::config("manifest lists no items"));
        }
        if self.num_labels < 2 {
            return Err(Error::config(format!(
                "manifest num_labels must be >= 2, got {}",
                self.num_labels
            )));
        }
        let n = self.items.len();
        let check_indices = |name: &str, idx: &[usize]| -> Result<()> {
            for &i in idx {
                if i >= n {
                    return Err(Error::config(format!(
                        "{name} index {i} out of range for {n} items"
                    )));
                }
            }
            Ok(())
        };
        match self.protocol {
            Protocol::FixedSplit => {
                let train = self
                    .train
                    .as_deref()
                    .ok_or_else(|| Error::config("fixed-split manifest needs a train list"))?;
                let test = self
                    .test
                    .as_deref()
                    .ok_or_else(|| Error::config("fixed-split manifest needs a test list"))?;
                check_indices("train", train)?;
                check_indices("test", test)?;
                if let Some(val) = self.val.as_deref() {
                    check_indices("val", val)?;
                }
                if train.is_empty() || test.is_empty() {
                    return Err(Error::config("train and test lists must be nonempty"));
                }
                let mut seen = vec![0u8; n];
                for &i in train.iter().chain(test).chain(self.val.iter().flatten()) {
                    seen[i] += 1;
                    if seen[i] > 1 {
                        return Err(Error::config(format!(
                            "item {i} appears in more than one split"
                        )));
                    }
                }
            }
            Protocol::Kfold => {
                let folds = self
                    .num_folds
                    .ok_or_else(|| Error::config("kfold manifest needs num_folds"))?;
                if folds < 2 {
                    return Err(Error::config(format!(
                        "num_folds must be >= 2, got {folds}"
                    )));
                }
            }
        }
        if let Some(groups) = self.groups.as_deref() {
            if groups.len() != n {
                return Err(Error::config(format!(
                    "groups list has {} entries for {n} items",
                    groups.len()
                )));
            }
        }
        if let Some(names) = self.label_names.as_deref() {
            if names.len() != self.num_labels {
                return Err(Error::config(format!(
                    "{} label names given for {} labels",
                    names.len(),
                    self.num_labels
                )));
            }
        }
        Ok(())
    }

    /// Group id per item; identity when the manifest omits groups.
    pub fn item_groups(&self) -> Vec<usize> {
        match &self.groups {
            Some(g) => g.clone(),
            None => (0..self.items.len()).collect(),
        }
    }
}

/// One loaded image/mask pair. `index` is the item's position in the
/// manifest.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub index: usize,
    pub image: RgbImage,
    pub mask: SegMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn num_labels(&self) -> usize {
        self.manifest.num_labels
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&DatasetItem> {
        indices.iter().map(|&i| &self.items[i]).collect()
    }
}

/// Load every item listed in a manifest, validating that each image and mask
/// exist, share dimensions, and use only labels below `num_labels`. Errors
/// name the offending item.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut items = Vec::with_capacity(manifest.items.len());
    for (index, entry) in manifest.items.iter().enumerate() {
        let image = io::load_rgb(&root.join(&entry.image))?;
        let mask = io::load_mask(&root.join(&entry.mask), Some(manifest.num_labels))?;
        if image.width() != mask.width() || image.height() != mask.height() {
            return Err(Error::shape(format!(
                "item {index} ({}): image is {}x{} but mask is {}x{}",
                entry.image,
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        items.push(DatasetItem { index, image, mask });
    }
    Ok(Dataset {
        manifest,
        root,
        items,
    })
}

/// Assignment of items to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub num_folds: usize,
    /// Fold index per item.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn test_items(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_items(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Deterministically split items into `num_folds` balanced folds without
/// separating items that share a group id. Groups are shuffled by a ChaCha
/// stream seeded from `seed` and dealt round-robin, so fold sizes (in
/// groups) differ by at most one.
pub fn make_folds(groups: &[usize], num_folds: usize, seed: u64) -> Result<FoldPlan> {
    if groups.is_empty() {
        return Err(Error::config("cannot fold an empty item list"));
    }
    if num_folds < 2 {
        return Err(Error::config(format!(
            "num_folds must be >= 2, got {num_folds}"
        )));
    }
    // Unique group ids in first-appearance order, so the plan does not depend
    // on hash iteration order.
    let mut unique: Vec<usize> = Vec::new();
    for &g in groups {
        if !unique.contains(&g) {
            unique.push(g);
        }
    }
    if unique.len() < num_folds {
        return Err(Error::config(format!(
            "{} groups cannot fill {num_folds} folds",
            unique.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let fold_of_group = |g: usize| -> usize {
        let pos = unique.iter().position(|&u| u == g).expect("group present");
        pos % num_folds
    };
    let assignment = groups.iter().map(|&g| fold_of_group(g)).collect();
    Ok(FoldPlan {
        num_folds,
        assignment,
    })
}

/// Cut an image/mask pair into four equal quadrants (top-left, top-right,
/// bottom-left, bottom-right). Odd trailing rows/columns are dropped first.
pub fn quarter_image(image: &RgbImage, mask: &SegMap) -> Result<Vec<(RgbImage, SegMap)>> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    if image.width() < 2 || image.height() < 2 {
        return Err(Error::shape("image must be at least 2x2 to quarter"));
    }
    let hw = image.width() / 2;
    let hh = image.height() / 2;
    let mut out = Vec::with_capacity(4);
    for (oy, ox) in [(0, 0), (0, hw), (hh, 0), (hh, hw)] {
        let mut rgb = Vec::with_capacity(3 * (hw * hh) as usize);
        let mut labels = Vec::with_capacity((hw * hh) as usize);
        for y in 0..hh {
            for x in 0..hw {
                rgb.extend_from_slice(&image.pixel(ox + x, oy + y));
                labels.push(mask.get(ox + x, oy + y));
            }
        }
        out.push((
            RgbImage::new(hw, hh, rgb)?,
            SegMap::new(hw, hh, mask.num_labels(), labels)?,
        ));
    }
    Ok(out)
}

/// Nearest source index for destination pixel `d` when resizing a length
/// `src` axis to length `dst`: the source pixel whose center is nearest the
/// destination pixel's center.
fn nearest_index(d: u32, dst: u32, src: u32) -> u32 {
    let v = ((f64::from(d) + 0.5) * f64::from(src) / f64::from(dst)) as u32;
    v.min(src - 1)
}

/// Resize a pair to `width` x `height`: bilinear for the image, nearest
/// neighbor for the mask so no new label values appear.
pub fn rescale(
    image: &RgbImage,
    mask: &SegMap,
    width: u32,
    height: u32,
) -> Result<(RgbImage, SegMap)> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::shape("target dimensions must be nonzero"));
    }
    let buf = image::RgbImage::from_raw(image.width(), image.height(), image.data().to_vec())
        .expect("buffer length already validated");
    let resized = image::imageops::resize(&buf, width, height, image::imageops::FilterType::Triangle);
    let out_image = RgbImage::new(width, height, resized.into_raw())?;

    let mut labels = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        let sy = nearest_index(y, height, mask.height());
        for x in 0..width {
            let sx = nearest_index(x, width, mask.width());
            labels.push(mask.get(sx, sy));
        }
    }
    let out_mask = SegMap::new(width, height, mask.num_labels(), labels)?;
    Ok((out_image, out_mask))
}

/// Scale 8-bit RGB into a float (3, H, W) array in [0, 1].
pub fn normalize<F: Scalar>(image: &RgbImage) -> Array3<F> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let scale = F::from_f64(1.0 / 255.0);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        F::from_f64(f64::from(image.data()[3 * (y * w + x) + c])) * scale
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest_json(extra: &str) -> String {
        format!(
            r#"{{
  "name": "t",
  "num_labels": 3,
  "protocol": "fixed-split",
  "items": [
    {{"image": "i0.png", "mask": "m0.png"}},
    {{"image": "i1.png", "mask": "m1.png"}}
  ],
  "train": [0],
  "test": [1]{extra}
}}"#
        )
    }

    #[test]
    fn manifest_parses_and_validates() {
        let m: Manifest = serde_json::from_str(&manifest_json("")).unwrap();
        m.validate().unwrap();
        assert_eq!(m.protocol, Protocol::FixedSplit);
        assert_eq!(m.item_groups(), vec![0, 1]);
    }

    #[test]
    fn manifest_rejects_overlapping_splits() {
        let mut m: Manifest = serde_json::from_str(&manifest_json("")).unwrap();
        m.test = Some(vec![0]);
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("more than one split"));
    }

    #[test]
    fn manifest_rejects_out_of_range_index() {
        let mut m: Manifest = serde_json::from_str(&manifest_json("")).unwrap();
        m.train = Some(vec![5]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn kfold_manifest_requires_num_folds() {
        let mut m: Manifest = serde_json::from_str(&manifest_json("")).unwrap();
        m.protocol = Protocol::Kfold;
        m.train = None;
        m.test = None;
        assert!(m.validate().is_err());
        m.num_folds = Some(5);
        m.validate().unwrap();
    }

    #[test]
    fn load_dataset_names_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest_json("")).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
        assert!(err.to_string().contains("i0.png"));
    }

    #[test]
    fn load_dataset_names_item_on_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, manifest_json("")).unwrap();
        for (i, (w, h)) in [(4u32, 4u32), (4, 4)].iter().enumerate() {
            let img = RgbImage::new(*w, *h, vec![0; (3 * w * h) as usize]).unwrap();
            io::save_rgb(&dir.path().join(format!("i{i}.png")), &img).unwrap();
        }
        let m0 = SegMap::new(4, 4, 3, vec![0; 16]).unwrap();
        io::save_mask(&dir.path().join("m0.png"), &m0).unwrap();
        let m1 = SegMap::new(2, 2, 3, vec![0; 4]).unwrap();
        io::save_mask(&dir.path().join("m1.png"), &m1).unwrap();
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("item 1"));
    }

    #[test]
    fn folds_balance_42_groups_into_5() {
        // 42 single-item groups into 5 folds: sizes {9, 9, 8, 8, 8}.
        let groups: Vec<usize> = (0..42).collect();
        let plan = make_folds(&groups, 5, 0).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|f| plan.test_items(f).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![8, 8, 8, 9, 9]);
        // Same seed, same plan.
        assert_eq!(plan, make_folds(&groups, 5, 0).unwrap());
        // Different seed, different plan (with 42 groups this is certain to
        // differ for any reasonable shuffle).
        assert_ne!(plan, make_folds(&groups, 5, 1).unwrap());
    }

    #[test]
    fn folds_keep_groups_together() {
        // 8 groups of 4 items each (quartered source images).
        let groups: Vec<usize> = (0..32).map(|i| i / 4).collect();
        let plan = make_folds(&groups, 4, 7).unwrap();
        for i in 0..32 {
            assert_eq!(plan.assignment[i], plan.assignment[4 * (i / 4)]);
        }
        let total: usize = (0..4).map(|f| plan.test_items(f).len()).sum();
        assert_eq!(total, 32);
    }

    #[test]
    fn folds_reject_fewer_groups_than_folds() {
        assert!(make_folds(&[0, 0, 1, 1], 3, 0).is_err());
    }

    #[test]
    fn quartering_splits_at_pixel_boundaries() {
        // 4x4 image whose pixel value encodes its coordinate.
        let mut rgb = Vec::new();
        let mut labels = Vec::new();
        for y in 0..4u8 {
            for x in 0..4u8 {
                rgb.extend_from_slice(&[x, y, 0]);
                labels.push((y / 2) * 2 + x / 2);
            }
        }
        let img = RgbImage::new(4, 4, rgb).unwrap();
        let mask = SegMap::new(4, 4, 4, labels).unwrap();
        let quads = quarter_image(&img, &mask).unwrap();
        assert_eq!(quads.len(), 4);
        for (q, (qi, qm)) in quads.iter().enumerate() {
            assert_eq!((qi.width(), qi.height()), (2, 2));
            assert!(qm.labels().iter().all(|&l| l as usize == q));
        }
        assert_eq!(quads[1].0.pixel(0, 0), [2, 0, 0]);
        assert_eq!(quads[2].0.pixel(0, 0), [0, 2, 0]);
    }

    #[test]
    fn quartering_drops_odd_edges() {
        let img = RgbImage::new(5, 3, vec![0; 45]).unwrap();
        let mask = SegMap::new(5, 3, 2, vec![0; 15]).unwrap();
        let quads = quarter_image(&img, &mask).unwrap();
        assert_eq!((quads[0].0.width(), quads[0].0.height()), (2, 1));
    }

    #[test]
    fn mask_rescale_matches_center_rule() {
        // 2x2 mask upscaled to 4x4: each source pixel covers a 2x2 block.
        let mask = SegMap::new(2, 2, 4, vec![0, 1, 2, 3]).unwrap();
        let img = RgbImage::new(2, 2, vec![0; 12]).unwrap();
        let (_, up) = rescale(&img, &mask, 4, 4).unwrap();
        assert_eq!(
            up.labels(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        // Downscale back: centers land on the originals.
        let img4 = RgbImage::new(4, 4, vec![0; 48]).unwrap();
        let (_, down) = rescale(&img4, &up, 2, 2).unwrap();
        assert_eq!(down.labels(), mask.labels());
    }

    #[test]
    fn normalize_scales_into_unit_range() {
        let img = RgbImage::new(2, 1, vec![0, 51, 102, 153, 204, 255]).unwrap();
        let a = normalize::<f64>(&img);
        assert_eq!(a.dim(), (3, 1, 2));
        assert!((a[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((a[[2, 0, 0]] - 0.4).abs() < 1e-12);
        assert!((a[[2, 0, 1]] - 1.0).abs() < 1e-12);
    }

    proptest! {
        /// Quarters tile the (evenly cropped) original exactly.
        #[test]
        fn quarters_tile_the_original(
            (w, h, rgb, labels) in (2u32..11, 2u32..11).prop_flat_map(|(w, h)| {
                let n = (w * h) as usize;
                (
                    Just(w),
                    Just(h),
                    proptest::collection::vec(any::<u8>(), 3 * n),
                    proptest::collection::vec(0u8..4, n),
                )
            })
        ) {
            let img = RgbImage::new(w, h, rgb).unwrap();
            let mask = SegMap::new(w, h, 4, labels).unwrap();
            let quads = quarter_image(&img, &mask).unwrap();
            let (hw, hh) = (w / 2, h / 2);
            for y in 0..hh * 2 {
                for x in 0..hw * 2 {
                    let q = (usize::from(y >= hh) * 2 + usize::from(x >= hw)).min(3);
                    let (qi, qm) = &quads[q];
                    let (qx, qy) = (x % hw, y % hh);
                    prop_assert_eq!(qi.pixel(qx, qy), img.pixel(x, y));
                    prop_assert_eq!(qm.get(qx, qy), mask.get(x, y));
                }
            }
        }

        /// Every fold plan is a partition: each item lands in exactly one
        /// fold and every fold is nonempty.
        #[test]
        fn fold_plans_partition_items(
            n_groups in 5usize..20,
            num_folds in 2usize..5,
            seed in any::<u64>(),
        ) {
            let groups: Vec<usize> = (0..n_groups).collect();
            let plan = make_folds(&groups, num_folds, seed).unwrap();
            let mut seen = vec![false; n_groups];
            for f in 0..num_folds {
                let test = plan.test_items(f);
                prop_assert!(!test.is_empty());
                for i in test {
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
