//! Generated two-class cell images for smoke runs and tests.
//!
//! Each image is a single round "cell" on a black background, like the
//! segmented crops of the real dataset. ALL cells are large and dark violet,
//! HEM cells small and pale pink, so the classes are separable by colour and
//! area alone.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub all_patients: usize,
    pub hem_patients: usize,
    pub images_per_patient: usize,
    pub size: u32,
    /// Per-pixel noise amplitude in 0..=255 units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 600 images at 64×64 over 40 patients, ALL in the majority.
    fn default() -> Self {
        SyntheticSpec {
            all_patients: 24,
            hem_patients: 16,
            images_per_patient: 15,
            size: 64,
            noise: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn total_images(&self) -> usize {
        (self.all_patients + self.hem_patients) * self.images_per_patient
    }
}

/// File name following the challenge convention, e.g. `UID_H3_2_1_hem.png`.
pub fn file_name(label: Label, patient: usize, image: usize) -> String {
    match label {
        Label::All => format!("UID_{}_{}_1_all.png", patient + 1, image + 1),
        Label::Hem => format!("UID_H{}_{}_1_hem.png", patient + 1, image + 1),
    }
}

pub fn render_cell(label: Label, size: u32, noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let (radius, base) = match label {
        Label::All => (rng.random_range(0.30..0.38) * s, [95.0, 45.0, 150.0]),
        Label::Hem => (rng.random_range(0.16..0.22) * s, [215.0, 160.0, 190.0]),
    };
    let cx = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let cy = s / 2.0 + rng.random_range(-0.06..0.06) * s;
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
        if d <= radius {
            let shade = 1.0 - 0.25 * d / radius;
            *px = Rgb(base.map(|c| (c * shade + rng.random_range(-noise..=noise)).clamp(0.0, 255.0) as u8));
        }
    }
    img
}

/// Writes the dataset under `root` and returns the number of files.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec) -> Result<usize> {
    if spec.size < 8 || spec.images_per_patient == 0 {
        return Err(Error::Config(
            "synthetic images need size >= 8 and at least one per patient".into(),
        ));
    }
    let mut written = 0;
    for (label, patients) in [(Label::All, spec.all_patients), (Label::Hem, spec.hem_patients)] {
        let dir = root.join(label.as_str().to_lowercase());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for p in 0..patients {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((label.index() as u64) << 32) | p as u64);
            for i in 0..spec.images_per_patient {
                let path = dir.join(file_name(label, p, i));
                render_cell(label, spec.size, spec.noise, &mut rng)
                    .save(&path)
                    .map_err(|e| Error::Decode {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                written += 1;
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{scan_dataset, NamingRule};

    #[test]
    fn names_parse_with_the_default_rule() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            all_patients: 3,
            hem_patients: 2,
            images_per_patient: 2,
            size: 16,
            ..Default::default()
        };
        assert_eq!(write_dataset(dir.path(), &spec).unwrap(), 10);
        let m = scan_dataset(dir.path(), &NamingRule::default()).unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(m.patients_of(Label::All).len(), 3);
        assert_eq!(m.patients_of(Label::Hem).len(), 2);
    }

    #[test]
    fn cell_areas_do_not_overlap_between_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let area = |img: &RgbImage| img.pixels().filter(|p| p.0 != [0, 0, 0]).count();
        let (mut min_all, mut max_hem) = (usize::MAX, 0);
        for _ in 0..50 {
            min_all = min_all.min(area(&render_cell(Label::All, 32, 12.0, &mut rng)));
            max_hem = max_hem.max(area(&render_cell(Label::Hem, 32, 12.0, &mut rng)));
        }
        // disc areas: at least pi*(0.30*32)^2 vs at most pi*(0.22*32)^2, up to edge pixels
        assert!(min_all > 260 && max_hem < 175, "{min_all} vs {max_hem}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            all_patients: 1,
            hem_patients: 1,
            images_per_patient: 1,
            size: 16,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &spec).unwrap();
        write_dataset(b.path(), &spec).unwrap();
        let name = file_name(Label::Hem, 0, 0);
        let read = |d: &Path| fs::read(d.join("hem").join(&name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
}
