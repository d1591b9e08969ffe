//! Image preprocessing, training-time augmentation and minority balancing.
//!
//! Pixel data is held as `C×H×W` arrays of `f64`. Raw images carry
//! intensities in `[0, 1]`; augmentation operates on raw images, and
//! normalization to the ImageNet statistics is always the last step.

use std::path::Path;

use image::{ColorType, DynamicImage};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{ImageRecord, Label};
use crate::splitter::{Split, SplitRecords};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Decoded RGB image with intensities in `[0, 1]`, shape `3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage(pub Array3<f64>);

/// Preprocessed model input: resized and normalized, shape `3×S×S`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(pub Array3<f64>);

impl RawImage {
    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn from_dynamic(img: &DynamicImage, path: &Path) -> Result<RawImage> {
        match img.color() {
            ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16 => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    message: "grayscale image; stained color images are required".into(),
                })
            }
            _ => {}
        }
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut out = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
        Ok(RawImage(out))
    }

    /// Back to 8-bit RGB, clamping to the displayable range.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.0[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    RawImage::from_dynamic(&img, path)
}

/// Bilinear resize with half-pixel centers; samples beyond the border are
/// clamped to the edge.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, in_h, in_w) = img.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return img.clone();
    }
    let axis = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(out_h, in_h);
    let xs = axis(out_w, in_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bottom = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn normalize(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Inverse of [`normalize`], for display.
pub fn denormalize(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        plane.mapv_inplace(|v| v * s + m);
    }
    out
}

/// Resize to `size×size` and normalize.
pub fn preprocess_raw(raw: &RawImage, size: usize) -> ImageTensor {
    ImageTensor(normalize(&resize_bilinear(&raw.0, size, size)))
}

pub fn preprocess(path: &Path, size: usize) -> Result<ImageTensor> {
    Ok(preprocess_raw(&load_image(path)?, size))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    /// Rotation drawn uniformly from `[-rotation_deg, +rotation_deg]`.
    #[serde(default = "default_rotation")]
    pub rotation_deg: f64,
    /// Brightness factor drawn uniformly from `[1 - b, 1 + b]`.
    #[serde(default = "default_jitter")]
    pub brightness: f64,
    /// Contrast factor drawn uniformly from `[1 - c, 1 + c]`.
    #[serde(default = "default_jitter")]
    pub contrast: f64,
    /// Global augmentation seed, mixed into every per-record stream.
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_hflip() -> f64 {
    0.5
}

fn default_rotation() -> f64 {
    10.0
}

fn default_jitter() -> f64 {
    0.1
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_prob: default_hflip(),
            rotation_deg: default_rotation(),
            brightness: default_jitter(),
            contrast: default_jitter(),
            rng_seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            hflip_prob: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.brightness >= 1.0 || self.contrast >= 1.0 {
            return Err(Error::Config("jitter magnitudes must be below 1".into()));
        }
        Ok(())
    }
}

/// Which training records receive stochastic augmentation at load time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentTarget {
    /// Only minority replicas; originals are loaded as-is.
    #[default]
    ReplicasOnly,
    /// Every training record.
    AllTraining,
    /// Nothing is augmented.
    None,
}

/// Random stream for one record, keyed by the global seed, the image id and
/// the replica index so that results do not depend on load order.
pub fn record_rng(global_seed: u64, image_id: &str, replica_index: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update((image_id.len() as u64).to_le_bytes());
    h.update(image_id.as_bytes());
    h.update(replica_index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Whether a record is augmented when loaded. Validation and test records
/// never are.
pub fn should_augment(record: &ImageRecord, split: Split, target: AugmentTarget) -> bool {
    if split != Split::Training {
        return false;
    }
    match target {
        AugmentTarget::ReplicasOnly => !record.source.is_original(),
        AugmentTarget::AllTraining => true,
        AugmentTarget::None => false,
    }
}

pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    let mut out = img.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

/// Rotation about the image center by `degrees` (counter-clockwise), bilinear
/// sampling, with exposed pixels filled black.
pub fn rotate(img: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the output coordinate back by -theta.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bottom = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn adjust_brightness(img: &mut Array3<f64>, factor: f64) {
    img.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
}

fn adjust_contrast(img: &mut Array3<f64>, factor: f64) {
    let (_, h, w) = img.dim();
    let mut gray = 0.0;
    for y in 0..h {
        for x in 0..w {
            gray += 0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
        }
    }
    let mean = gray / (h * w) as f64;
    img.mapv_inplace(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0));
}

/// Horizontal flip, then rotation, then brightness and contrast jitter. The
/// four random draws happen in that order regardless of the policy, so the
/// stream position after a call is always the same.
pub fn augment(img: &RawImage, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> RawImage {
    let flip = rng.random::<f64>() < policy.hflip_prob;
    let angle = uniform(rng, -policy.rotation_deg, policy.rotation_deg);
    let brightness = uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness);
    let contrast = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast);

    let mut out = if flip { hflip(&img.0) } else { img.0.clone() };
    if angle != 0.0 {
        out = rotate(&out, angle);
    }
    if brightness != 1.0 {
        adjust_brightness(&mut out, brightness);
    }
    if contrast != 1.0 {
        adjust_contrast(&mut out, contrast);
    }
    RawImage(out)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

/// Replicates minority-class training records round-robin until both classes
/// have the same count. Majority records are untouched; originals keep their
/// place and replicas are appended with indices 1, 2, ... per image.
pub fn balance_minority(train: &SplitRecords) -> Result<SplitRecords> {
    if train.split != Split::Training {
        return Err(Error::InvalidInput(format!(
            "balancing applies to training records only, got {}",
            train.split
        )));
    }
    let count = |l: Label| train.records.iter().filter(|r| r.label == l).count();
    let (n_hem, n_all) = (count(Label::Hem), count(Label::All));
    if n_hem == 0 || n_all == 0 {
        return Err(Error::InvalidInput(
            "balancing needs both classes in the training records".into(),
        ));
    }
    let (minority, n_min, n_maj) = if n_hem < n_all {
        (Label::Hem, n_hem, n_all)
    } else {
        (Label::All, n_all, n_hem)
    };
    let mut records = train.records.clone();
    if n_min == n_maj {
        return Ok(SplitRecords::new(Split::Training, records));
    }

    let mut sources: Vec<&ImageRecord> = train
        .records
        .iter()
        .filter(|r| r.label == minority && r.source.is_original())
        .collect();
    if sources.is_empty() {
        return Err(Error::InvalidInput("minority class has no original records".into()));
    }
    sources.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut next_index = vec![1u32; sources.len()];
    for k in 0..(n_maj - n_min) {
        let i = k % sources.len();
        records.push(sources[i].replica(next_index[i]));
        next_index[i] += 1;
    }
    Ok(SplitRecords::new(Split::Training, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Source;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;

    #[test]
    fn bilinear_upsample_matches_hand_oracle() {
        // 2x2 checkerboard [[0,1],[1,0]] to 4x4. With half-pixel centers the
        // source coordinates of output columns are -0.25, 0.25, 0.75, 1.25,
        // clamped to 0, 0.25, 0.75, 1.
        let mut img = Array3::zeros((1, 2, 2));
        img[[0, 0, 1]] = 1.0;
        img[[0, 1, 0]] = 1.0;
        let out = resize_bilinear(&img, 4, 4);
        let expected = [
            [0.0, 0.25, 0.75, 1.0],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.0, 0.75, 0.25, 0.0],
        ];
        for y in 0..4 {
            for x in 0..4 {
                assert_abs_diff_eq!(out[[0, y, x]], expected[y][x], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn resize_450_to_384() {
        let img = RawImage(Array3::from_elem((3, 450, 450), 0.3));
        let t = preprocess_raw(&img, 384);
        assert_eq!(t.0.dim(), (3, 384, 384));
        let again = resize_bilinear(&resize_bilinear(&img.0, 384, 384), 384, 384);
        assert_eq!(again.dim(), (3, 384, 384));
    }

    #[test]
    fn mean_colored_image_normalizes_to_zero() {
        let mut img = Array3::zeros((3, 5, 5));
        for c in 0..3 {
            img.index_axis_mut(Axis(0), c).fill(IMAGENET_MEAN[c]);
        }
        let t = preprocess_raw(&RawImage(img), 5);
        assert!(t.0.iter().all(|v| v.abs() < 1e-15));
    }

    fn random_image(seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawImage(Array::from_shape_fn((3, 9, 7), |_| rng.random::<f64>()))
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = random_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&img, &AugmentPolicy::identity(), &mut rng), img);
    }

    #[test]
    fn augment_is_deterministic() {
        let img = random_image(2);
        let p = AugmentPolicy::default();
        let a = augment(&img, &p, &mut record_rng(9, "x", 1));
        let b = augment(&img, &p, &mut record_rng(9, "x", 1));
        assert_eq!(a, b);
        let c = augment(&img, &p, &mut record_rng(9, "x", 2));
        assert_ne!(a, c);
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let img = random_image(4);
        let p = AugmentPolicy {
            hflip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = augment(&img, &p, &mut rng);
        assert_ne!(once, img);
        let twice = augment(&once, &p, &mut rng);
        assert_eq!(twice, img);
    }

    #[test]
    fn rotation_fills_black_and_zero_angle_is_identity() {
        let img = RawImage(Array3::from_elem((3, 8, 8), 1.0));
        let r = rotate(&img.0, 45.0);
        assert_eq!(r[[0, 0, 0]], 0.0);
        assert_abs_diff_eq!(r[[0, 4, 4]], 1.0, epsilon = 1e-12);
        assert_eq!(rotate(&img.0, 0.0), img.0);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            hflip_prob: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    fn records(n_all: usize, n_hem: usize) -> SplitRecords {
        let mut v = Vec::new();
        for (label, n, p) in [(Label::All, n_all, "A"), (Label::Hem, n_hem, "H")] {
            for i in 0..n {
                v.push(ImageRecord {
                    image_id: format!("{p}{i:05}"),
                    path: format!("/d/{p}{i}.bmp").into(),
                    patient_id: format!("{p}{}", i % 3),
                    label,
                    source: Source::Original,
                });
            }
        }
        SplitRecords::new(Split::Training, v)
    }

    fn appearances(out: &SplitRecords, label: Label) -> std::collections::BTreeMap<String, usize> {
        let mut m = std::collections::BTreeMap::new();
        for r in out.records.iter().filter(|r| r.label == label) {
            *m.entry(r.image_id.clone()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn balance_small_case() {
        let out = balance_minority(&records(7, 3)).unwrap();
        assert_eq!(out.count(Label::Hem), 7);
        assert_eq!(out.count(Label::All), 7);
        let per = appearances(&out, Label::Hem);
        let mut counts: Vec<_> = per.values().copied().collect();
        counts.sort();
        assert_eq!(counts, vec![2, 2, 3]);
    }

    #[test]
    fn balanced_input_unchanged() {
        let input = records(4, 4);
        assert_eq!(balance_minority(&input).unwrap(), input);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(balance_minority(&records(4, 0)).is_err());
    }

    #[test]
    fn replicas_have_distinct_streams() {
        let out = balance_minority(&records(10, 3)).unwrap();
        let mut keys = std::collections::HashSet::new();
        for r in &out.records {
            assert!(keys.insert((r.image_id.clone(), r.source.replica_index())));
        }
    }

    #[test]
    fn validation_records_are_never_augmented() {
        let r = records(1, 1).records[0].replica(1);
        for t in [AugmentTarget::ReplicasOnly, AugmentTarget::AllTraining] {
            assert!(!should_augment(&r, Split::Validation, t));
            assert!(!should_augment(&r, Split::Test, t));
        }
        assert!(should_augment(&r, Split::Training, AugmentTarget::ReplicasOnly));
    }
}
