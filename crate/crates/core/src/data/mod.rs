//! Synthetic pseudo-volumes of ring-like anatomy, volume-level splits,
//! augmentation and the volumetric Dice score.
//!
//! Each volume is a stack of slices through nested ellipses: class 1 is the
//! outer ring, higher classes are nested inside it. Shape, position and
//! contrast are drawn per volume and drift smoothly from slice to slice.

mod augment;
mod cache;
mod dice;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::ndcore::Tensor;
use crate::rng::{derived, Rng};

pub use augment::{augment, rotate_nearest, AugmentPool, IntensityNoise};
pub use cache::{read_split_file, write_split_file, SplitFileHeader, DATASET_VERSION};
pub use dice::{dice_3d, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Height and width of every slice.
    pub extent: usize,
    /// Classes including background.
    pub classes: usize,
    /// Number of generated volumes (all splits together).
    pub volumes: usize,
    pub slices_per_volume: usize,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise_std: f64,
    /// Per-volume spread of class intensities around their nominal levels.
    pub contrast_spread: f64,
    /// Background blobs per slice that mimic foreground intensity.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            extent: 64,
            classes: 3,
            volumes: 30,
            slices_per_volume: 8,
            noise_std: 0.08,
            contrast_spread: 0.12,
            distractors: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config_err("data.classes", "need at least 2 classes"));
        }
        if self.classes > 8 {
            return Err(config_err("data.classes", "at most 8 nested classes are supported"));
        }
        if self.extent < 8 {
            return Err(config_err("data.extent", "must be at least 8"));
        }
        if self.volumes == 0 || self.slices_per_volume == 0 {
            return Err(config_err("data.volumes", "need at least one volume and slice"));
        }
        if !(self.noise_std >= 0.0) || !(self.contrast_spread >= 0.0) {
            return Err(config_err("data.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// One 2-D slice with its (optional) label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[1, H, W]` intensities in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H * W` class indices.
    pub label: Option<Vec<u8>>,
    pub volume: usize,
    pub slice: usize,
}

impl SegSample {
    pub fn extent(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// Slices grouped by volume, in volume then slice order.
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn volume_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.volume).collect();
        ids.dedup();
        ids
    }
}

/// Nominal per-class intensity, background first.
fn nominal_level(class: usize, classes: usize) -> f64 {
    0.15 + 0.75 * class as f64 / (classes - 1) as f64
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalised radius: `< 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }
}

fn render_volume(spec: &SyntheticSpec, volume: usize) -> Vec<SegSample> {
    let mut rng = derived(spec.seed, &[0x766f_6c, volume as u64]);
    let e = spec.extent as f64;
    let u = |rng: &mut Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();

    let (cx0, cy0) = (u(&mut rng, 0.35, 0.65) * e, u(&mut rng, 0.35, 0.65) * e);
    let (drift_x, drift_y) = (u(&mut rng, -0.08, 0.08) * e, u(&mut rng, -0.08, 0.08) * e);
    let a0 = u(&mut rng, 0.16, 0.28) * e;
    let b0 = a0 * u(&mut rng, 0.6, 1.0);
    let theta0 = u(&mut rng, 0.0, std::f64::consts::PI);
    let spin = u(&mut rng, -0.3, 0.3);
    // inner boundaries as fractions of the outer radius, strictly decreasing
    let mut ratios = Vec::with_capacity(spec.classes - 1);
    let mut r = 1.0;
    for _ in 1..spec.classes {
        ratios.push(r);
        r *= u(&mut rng, 0.5, 0.7);
    }
    let levels: Vec<f64> = (0..spec.classes)
        .map(|c| {
            let jitter = u(&mut rng, -spec.contrast_spread, spec.contrast_spread);
            (nominal_level(c, spec.classes) + jitter).clamp(0.0, 1.0)
        })
        .collect();
    let distractors: Vec<(f64, f64, f64, f64)> = (0..spec.distractors)
        .map(|_| {
            (
                u(&mut rng, 0.05, 0.95) * e,
                u(&mut rng, 0.05, 0.95) * e,
                u(&mut rng, 0.04, 0.09) * e,
                levels[1 + rng.random_range(0..spec.classes - 1)],
            )
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let slices = spec.slices_per_volume;
    (0..slices)
        .map(|z| {
            let t = if slices > 1 { z as f64 / (slices - 1) as f64 } else { 0.0 };
            let shrink = 1.0 - 0.45 * t.powf(1.5);
            let outer = Ellipse {
                cx: cx0 + drift_x * t,
                cy: cy0 + drift_y * t,
                a: a0 * shrink,
                b: b0 * shrink,
                theta: theta0 + spin * t,
            };
            let n = spec.extent * spec.extent;
            let mut label = vec![0u8; n];
            let mut image = vec![0.0; n];
            for y in 0..spec.extent {
                for x in 0..spec.extent {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let rad = outer.radius(px, py);
                    let class = ratios.iter().take_while(|&&r| rad < r).count();
                    let mut value = levels[class];
                    if class == 0 {
                        for &(dx, dy, dr, level) in &distractors {
                            let (ox, oy) = (dx + drift_x * t * 0.5, dy - drift_y * t * 0.5);
                            if (px - ox).powi(2) + (py - oy).powi(2) < dr * dr {
                                value = level;
                            }
                        }
                    }
                    let i = y * spec.extent + x;
                    label[i] = class as u8;
                    image[i] = value;
                }
            }
            if spec.noise_std > 0.0 {
                for v in &mut image {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            SegSample {
                image: Tensor::new(&[1, spec.extent, spec.extent], image).expect("extent"),
                label: Some(label),
                volume,
                slice: z,
            }
        })
        .collect()
}

/// Renders every volume of `spec`. Deterministic in `spec.seed`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.volumes).flat_map(|v| render_volume(spec, v)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Fraction of training volumes that keep their labels.
    pub labeled_ratio: f64,
    /// Volumes held out for validation.
    pub validation_volumes: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_ratio: 0.05,
            validation_volumes: 10,
        }
    }
}

/// Volume-disjoint partition of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub labeled: Vec<SegSample>,
    /// Samples with `label == None`.
    pub unlabeled: Vec<SegSample>,
    /// Hidden labels of `unlabeled`, index-aligned, for diagnostics and
    /// the fully supervised reference.
    pub unlabeled_truth: Vec<Vec<u8>>,
    pub validation: Vec<SegSample>,
}

impl Splits {
    pub fn volumes_of(samples: &[SegSample]) -> Vec<usize> {
        let mut ids: Vec<usize> = samples.iter().map(|s| s.volume).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Shuffles volume ids with `seed`, holds out `validation_volumes`, and keeps
/// labels on `ceil(labeled_ratio * training volumes)` of the rest.
pub fn split(dataset: &Dataset, s: &SplitSpec, seed: u64) -> Result<Splits> {
    if !(s.labeled_ratio > 0.0 && s.labeled_ratio <= 1.0) {
        return Err(config_err("split.labeled_ratio", "must be in (0, 1]"));
    }
    let mut ids = dataset.volume_ids();
    if ids.len() <= s.validation_volumes {
        return Err(config_err(
            "split.validation_volumes",
            format!("{} volumes cannot hold out {}", ids.len(), s.validation_volumes),
        ));
    }
    let mut rng = derived(seed, &[0x73_706c_6974]);
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    let (val_ids, train_ids) = ids.split_at(s.validation_volumes);
    // guard against 0.05 * 20 landing just above 1.0
    let labeled_count = ((s.labeled_ratio * train_ids.len() as f64) - 1e-9).ceil() as usize;
    if labeled_count == 0 {
        return Err(invalid("labeled ratio yields no labeled volume"));
    }
    let labeled_ids = &train_ids[..labeled_count.min(train_ids.len())];

    let mut out = Splits {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        unlabeled_truth: Vec::new(),
        validation: Vec::new(),
    };
    for sample in &dataset.samples {
        if val_ids.contains(&sample.volume) {
            out.validation.push(sample.clone());
        } else if labeled_ids.contains(&sample.volume) {
            out.labeled.push(sample.clone());
        } else {
            let mut hidden = sample.clone();
            let truth = hidden.label.take().ok_or_else(|| invalid("dataset sample without label"))?;
            out.unlabeled.push(hidden);
            out.unlabeled_truth.push(truth);
        }
    }
    Ok(out)
}

/// Average fraction of pixels that belong to `class` in `dataset`.
pub fn class_fraction(dataset: &Dataset, class: u8) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in &dataset.samples {
        if let Some(l) = &s.label {
            hits += l.iter().filter(|&&c| c == class).count();
            total += l.len();
        }
    }
    hits as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            extent: 32,
            volumes: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&spec()).unwrap();
        let b = generate_dataset(&spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SyntheticSpec { seed: 1, ..spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_free_images_match_labels() {
        let s = SyntheticSpec {
            noise_std: 0.0,
            distractors: 0,
            ..spec()
        };
        let d = generate_dataset(&s).unwrap();
        for sample in &d.samples {
            let label = sample.label.as_ref().unwrap();
            let mut level = [None::<f64>; 8];
            for (&c, &v) in label.iter().zip(sample.image.data()) {
                let slot = &mut level[c as usize];
                match slot {
                    Some(prev) => assert_eq!(*prev, v),
                    None => *slot = Some(v),
                }
            }
            let distinct: Vec<f64> = level.iter().flatten().copied().collect();
            for (i, a) in distinct.iter().enumerate() {
                for b in &distinct[i + 1..] {
                    assert_ne!(a, b, "two classes share an intensity");
                }
            }
        }
    }

    #[test]
    fn degenerate_spec_rejected() {
        assert!(generate_dataset(&SyntheticSpec { classes: 1, ..spec() }).is_err());
    }

    #[test]
    fn every_slice_has_foreground() {
        let d = generate_dataset(&spec()).unwrap();
        let with_fg = d
            .samples
            .iter()
            .filter(|s| s.label.as_ref().unwrap().iter().any(|&c| c > 0))
            .count();
        assert!(with_fg * 2 >= d.samples.len());
    }

    #[test]
    fn foreground_fraction_in_range() {
        let d = generate_dataset(&SyntheticSpec {
            volumes: 100,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for c in 1..3 {
            let f = class_fraction(&d, c);
            assert!(f > 0.02 && f < 0.5, "class {c}: {f}");
        }
    }

    #[test]
    fn split_cases() {
        let d = generate_dataset(&SyntheticSpec {
            volumes: 30,
            slices_per_volume: 2,
            ..spec()
        })
        .unwrap();
        let s = split(&d, &SplitSpec { labeled_ratio: 0.05, validation_volumes: 10 }, 3).unwrap();
        assert_eq!(Splits::volumes_of(&s.labeled).len(), 1);
        assert_eq!(Splits::volumes_of(&s.unlabeled).len(), 19);
        assert!(s.unlabeled.iter().all(|x| x.label.is_none()));
        assert_eq!(s.unlabeled_truth.len(), s.unlabeled.len());

        let all = split(&d, &SplitSpec { labeled_ratio: 1.0, validation_volumes: 10 }, 3).unwrap();
        assert!(all.unlabeled.is_empty());

        assert_eq!(s, split(&d, &SplitSpec { labeled_ratio: 0.05, validation_volumes: 10 }, 3).unwrap());
        assert!(split(&d, &SplitSpec { labeled_ratio: 0.0, validation_volumes: 10 }, 3).is_err());
        assert!(split(&d, &SplitSpec { labeled_ratio: 0.5, validation_volumes: 30 }, 3).is_err());
    }

    #[test]
    fn splits_are_volume_disjoint() {
        let d = generate_dataset(&SyntheticSpec { volumes: 12, slices_per_volume: 3, ..spec() }).unwrap();
        for seed in 0..20 {
            let s = split(&d, &SplitSpec { labeled_ratio: 0.3, validation_volumes: 4 }, seed).unwrap();
            let l = Splits::volumes_of(&s.labeled);
            let u = Splits::volumes_of(&s.unlabeled);
            let v = Splits::volumes_of(&s.validation);
            assert!(l.iter().all(|id| !u.contains(id) && !v.contains(id)));
            assert!(u.iter().all(|id| !v.contains(id)));
            assert_eq!(l.len() + u.len() + v.len(), 12);
        }
    }
}
