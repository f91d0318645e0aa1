//! Label embedding codec.
//!
//! A K-label segmentation of a grayscale image is stored as K single-channel
//! images. In channel k a pixel carrying label k keeps a compressed copy of
//! the intensity shifted into the upper half of the value range, while every
//! other pixel gets the complement in the lower half:
//!
//! foreground: floor(g / 2) + 128      (always in 128..=255)
//! background: 127 - floor(g / 2)      (always in 0..=127)
//!
//! Foreground and background values at the same pixel sum to 255, so each
//! channel is simultaneously a binary mask (threshold at 128) and a lossy
//! store of the intensity (recoverable to within 1 gray level).

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::Scalar;

/// Labels are stored as bytes, so a segmentation can address at most this
/// many classes.
pub const MAX_LABELS: usize = 256;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = 3 * width as usize * height as usize;
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be nonzero"));
        }
        if data.len() != expected {
            return Err(Error::shape(format!(
                "rgb buffer holds {} bytes, {}x{} needs {expected}",
                data.len(),
                width,
                height
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image dimensions must be nonzero"));
        }
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "gray buffer holds {} bytes, {}x{} needs {expected}",
                data.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Dense per-pixel label map. Invariant: every stored label is `< num_labels`
/// and `2 <= num_labels <= MAX_LABELS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMap {
    width: u32,
    height: u32,
    num_labels: usize,
    labels: Vec<u8>,
}

impl SegMap {
    pub fn new(width: u32, height: u32, num_labels: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("segmentation dimensions must be nonzero"));
        }
        if !(2..=MAX_LABELS).contains(&num_labels) {
            return Err(Error::LabelRange(format!(
                "num_labels must be in 2..={MAX_LABELS}, got {num_labels}"
            )));
        }
        let expected = width as usize * height as usize;
        if labels.len() != expected {
            return Err(Error::shape(format!(
                "label buffer holds {} entries, {}x{} needs {expected}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::LabelRange(format!(
                "label {bad} out of range for {num_labels} classes"
            )));
        }
        Ok(SegMap {
            width,
            height,
            num_labels,
            labels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    /// One-hot encoding as a (K, H, W) array.
    pub fn to_onehot<F: Scalar>(&self) -> Array3<F> {
        let (w, h, k) = (self.width as usize, self.height as usize, self.num_labels);
        let mut out = Array3::zeros((k, h, w));
        for y in 0..h {
            for x in 0..w {
                let l = self.labels[y * w + x] as usize;
                out[[l, y, x]] = F::one();
            }
        }
        out
    }
}

/// A grayscale image with an embedded K-label segmentation: K planes of
/// width x height bytes, plane k laid out row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddedImage {
    width: u32,
    height: u32,
    num_labels: usize,
    planes: Vec<u8>,
}

impl EmbeddedImage {
    pub fn new(width: u32, height: u32, num_labels: usize, planes: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("embedded image dimensions must be nonzero"));
        }
        if !(2..=MAX_LABELS).contains(&num_labels) {
            return Err(Error::LabelRange(format!(
                "num_labels must be in 2..={MAX_LABELS}, got {num_labels}"
            )));
        }
        let expected = num_labels * width as usize * height as usize;
        if planes.len() != expected {
            return Err(Error::shape(format!(
                "plane buffer holds {} bytes, {} planes of {}x{} need {expected}",
                planes.len(),
                num_labels,
                width,
                height
            )));
        }
        Ok(EmbeddedImage {
            width,
            height,
            num_labels,
            planes,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Plane k as a row-major byte slice.
    pub fn channel(&self, k: usize) -> &[u8] {
        let n = self.width as usize * self.height as usize;
        &self.planes[k * n..(k + 1) * n]
    }

    /// All planes as a (K, H, W) array scaled into [0, 1].
    pub fn to_normalized<F: Scalar>(&self) -> Array3<F> {
        let (w, h, k) = (self.width as usize, self.height as usize, self.num_labels);
        let scale = F::from_f64(1.0 / 255.0);
        Array3::from_shape_fn((k, h, w), |(c, y, x)| {
            F::from_f64(f64::from(self.planes[c * h * w + y * w + x])) * scale
        })
    }
}

/// BT.601 luma with round-half-up, computed in integer arithmetic so the
/// result is exact: round(0.299 R + 0.587 G + 0.114 B).
pub fn to_grayscale(image: &RgbImage) -> GrayImage {
    let data = image
        .data
        .chunks_exact(3)
        .map(|p| {
            let weighted =
                299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]);
            ((weighted + 500) / 1000) as u8
        })
        .collect();
    GrayImage {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Embed a segmentation into a grayscale image, producing one channel per
/// label. Requires matching dimensions.
pub fn encode(gray: &GrayImage, seg: &SegMap) -> Result<EmbeddedImage> {
    if gray.width != seg.width || gray.height != seg.height {
        return Err(Error::shape(format!(
            "gray image is {}x{} but segmentation is {}x{}",
            gray.width, gray.height, seg.width, seg.height
        )));
    }
    let n = gray.width as usize * gray.height as usize;
    let k = seg.num_labels;
    let mut planes = vec![0u8; k * n];
    for (i, (&g, &l)) in gray.data.iter().zip(&seg.labels).enumerate() {
        let half = g / 2;
        let fg = half + 128;
        let bg = 127 - half;
        for c in 0..k {
            planes[c * n + i] = if c == l as usize { fg } else { bg };
        }
    }
    Ok(EmbeddedImage {
        width: gray.width,
        height: gray.height,
        num_labels: k,
        planes,
    })
}

/// Recover the label map from an embedded image: per-pixel argmax over
/// channels, ties resolved to the lowest label index.
pub fn decode(embedded: &EmbeddedImage) -> SegMap {
    let n = embedded.width as usize * embedded.height as usize;
    let k = embedded.num_labels;
    let mut labels = vec![0u8; n];
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = embedded.planes[i];
        for c in 1..k {
            let v = embedded.planes[c * n + i];
            if v > best {
                best = v;
                *label = c as u8;
            }
        }
    }
    SegMap {
        width: embedded.width,
        height: embedded.height,
        num_labels: k,
        labels,
    }
}

/// Argmax decode over continuous channel estimates laid out (K, H, W), as
/// produced by a network. Ties resolve to the lowest label index; NaN never
/// beats a finite value.
pub fn decode_channels<F: Scalar>(channels: ArrayView3<F>) -> Result<SegMap> {
    let (k, h, w) = channels.dim();
    if !(2..=MAX_LABELS).contains(&k) {
        return Err(Error::LabelRange(format!(
            "channel count must be in 2..={MAX_LABELS}, got {k}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("channel planes must be nonempty"));
    }
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = channels[[0, y, x]];
            let mut arg = 0u8;
            for c in 1..k {
                let v = channels[[c, y, x]];
                // A number always displaces NaN; ties keep the lowest label.
                if v > best || (best.is_nan() && !v.is_nan()) {
                    best = v;
                    arg = c as u8;
                }
            }
            labels[y * w + x] = arg;
        }
    }
    Ok(SegMap {
        width: w as u32,
        height: h as u32,
        num_labels: k,
        labels,
    })
}

/// Reconstruct the grayscale image from an embedded one. Each pixel must hold
/// exactly one foreground value (>= 128); the intensity comes back as
/// 2 * (v - 128), which drops at most the lowest bit of the original.
pub fn recover_grayscale(embedded: &EmbeddedImage) -> Result<GrayImage> {
    let n = embedded.width as usize * embedded.height as usize;
    let k = embedded.num_labels;
    let mut data = vec![0u8; n];
    for (i, out) in data.iter_mut().enumerate() {
        let mut fg = None;
        for c in 0..k {
            let v = embedded.planes[c * n + i];
            if v >= 128 {
                if fg.is_some() {
                    return Err(Error::Integrity(format!(
                        "pixel {i} has multiple foreground channels"
                    )));
                }
                fg = Some(v);
            }
        }
        match fg {
            Some(v) => *out = (v - 128) * 2,
            None => {
                return Err(Error::Integrity(format!(
                    "pixel {i} has no foreground channel"
                )))
            }
        }
    }
    Ok(GrayImage {
        width: embedded.width,
        height: embedded.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use proptest::prelude::*;

    fn gray(w: u32, h: u32, data: Vec<u8>) -> GrayImage {
        GrayImage::new(w, h, data).unwrap()
    }

    fn seg(w: u32, h: u32, k: usize, labels: Vec<u8>) -> SegMap {
        SegMap::new(w, h, k, labels).unwrap()
    }

    #[test]
    fn grayscale_matches_hand_computed_luma() {
        let img = RgbImage::new(
            7,
            1,
            vec![
                0, 0, 0, // 0
                255, 255, 255, // 255
                255, 0, 0, // round(76.245) = 76
                0, 255, 0, // round(149.685) = 150
                0, 0, 255, // round(29.07) = 29
                100, 150, 200, // round(140.75) = 141
                1, 1, 251, // exactly 29.5, rounds half up to 30
            ],
        )
        .unwrap();
        assert_eq!(to_grayscale(&img).data(), &[0, 255, 76, 150, 29, 141, 30]);
    }

    #[test]
    fn encode_matches_hand_computed_channels() {
        let g = gray(2, 1, vec![200, 9]);
        let s = seg(2, 1, 2, vec![0, 1]);
        let e = encode(&g, &s).unwrap();
        assert_eq!(e.channel(0), &[228, 123]);
        assert_eq!(e.channel(1), &[27, 132]);
    }

    #[test]
    fn encode_rejects_dimension_mismatch() {
        let g = gray(2, 2, vec![0; 4]);
        let s = seg(2, 1, 2, vec![0, 1]);
        assert!(matches!(encode(&g, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn segmap_rejects_out_of_range_label() {
        let err = SegMap::new(2, 1, 2, vec![0, 2]).unwrap_err();
        assert!(matches!(err, Error::LabelRange(_)));
    }

    #[test]
    fn segmap_rejects_bad_num_labels() {
        assert!(SegMap::new(1, 1, 1, vec![0]).is_err());
        assert!(SegMap::new(1, 1, 257, vec![0]).is_err());
    }

    #[test]
    fn decode_breaks_ties_toward_lowest_label() {
        let flat = arr3(&[[[0.5f32, 0.2]], [[0.5, 0.7]], [[0.4, 0.7]]]);
        let s = decode_channels(flat.view()).unwrap();
        assert_eq!(s.labels(), &[0, 1]);
    }

    #[test]
    fn decode_never_picks_nan_over_a_number() {
        let flat = arr3(&[[[f32::NAN]], [[0.1]], [[0.3]]]);
        let s = decode_channels(flat.view()).unwrap();
        assert_eq!(s.labels(), &[2]);
    }

    #[test]
    fn decode_channels_rejects_single_channel() {
        let flat = Array3::<f32>::zeros((1, 2, 2));
        assert!(decode_channels(flat.view()).is_err());
    }

    #[test]
    fn recover_detects_missing_and_duplicate_foreground() {
        let all_bg = EmbeddedImage::new(1, 1, 2, vec![10, 20]).unwrap();
        assert!(matches!(
            recover_grayscale(&all_bg),
            Err(Error::Integrity(_))
        ));
        let two_fg = EmbeddedImage::new(1, 1, 2, vec![200, 130]).unwrap();
        assert!(matches!(
            recover_grayscale(&two_fg),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn onehot_places_single_one_per_pixel() {
        let s = seg(2, 1, 3, vec![2, 0]);
        let oh = s.to_onehot::<f64>();
        assert_eq!(oh.dim(), (3, 1, 2));
        assert_eq!(oh[[2, 0, 0]], 1.0);
        assert_eq!(oh[[0, 0, 1]], 1.0);
        assert_eq!(oh.sum(), 2.0);
    }

    proptest! {
        /// Encoding then decoding returns the exact segmentation, and the
        /// recovered grayscale drops at most the lowest intensity bit.
        #[test]
        fn round_trip_is_exact(
            (w, h, k, gray_data, labels) in (1u32..9, 1u32..9, 2usize..7).prop_flat_map(|(w, h, k)| {
                let n = (w * h) as usize;
                (
                    Just(w),
                    Just(h),
                    Just(k),
                    proptest::collection::vec(any::<u8>(), n),
                    proptest::collection::vec(0u8..k as u8, n),
                )
            })
        ) {
            let g = gray(w, h, gray_data);
            let s = seg(w, h, k, labels);
            let e = encode(&g, &s).unwrap();
            prop_assert_eq!(decode(&e), s);
            let r = recover_grayscale(&e).unwrap();
            for (rv, gv) in r.data().iter().zip(g.data()) {
                prop_assert_eq!(*rv, gv & !1);
                prop_assert!(gv.abs_diff(*rv) <= 1);
            }
        }

        /// Channel values partition by role: foreground in 128..=255,
        /// background in 0..=127, and the two sum to 255 at every pixel. All
        /// background channels of a pixel carry the same value.
        #[test]
        fn channels_complement_and_partition(
            (w, h, k, gray_data, labels) in (1u32..9, 1u32..9, 2usize..7).prop_flat_map(|(w, h, k)| {
                let n = (w * h) as usize;
                (
                    Just(w),
                    Just(h),
                    Just(k),
                    proptest::collection::vec(any::<u8>(), n),
                    proptest::collection::vec(0u8..k as u8, n),
                )
            })
        ) {
            let g = gray(w, h, gray_data);
            let s = seg(w, h, k, labels);
            let e = encode(&g, &s).unwrap();
            let n = (w * h) as usize;
            for i in 0..n {
                let label = s.labels()[i] as usize;
                let fg = e.channel(label)[i];
                prop_assert!(fg >= 128);
                for c in 0..k {
                    if c == label {
                        continue;
                    }
                    let bg = e.channel(c)[i];
                    prop_assert!(bg <= 127);
                    prop_assert_eq!(fg as u16 + bg as u16, 255);
                    prop_assert_eq!(bg, e.channel((label + 1) % k)[i]);
                }
            }
        }

        /// Argmax decoding is invariant under positive affine rescaling of
        /// the channel estimates.
        #[test]
        fn decode_is_scale_invariant(
            vals in proptest::collection::vec(0.0f64..1.0, 3 * 4 * 4),
            scale in 0.05f64..20.0,
            shift in -3.0f64..3.0,
        ) {
            let a = Array3::from_shape_vec((3, 4, 4), vals).unwrap();
            let b = a.mapv(|v| v * scale + shift);
            prop_assert_eq!(
                decode_channels(a.view()).unwrap(),
                decode_channels(b.view()).unwrap()
            );
        }
    }
}
