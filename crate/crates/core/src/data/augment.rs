use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::ndcore::Tensor;
use crate::rng::Rng;

/// Random augmentation settings. Geometry is shared by image and label;
/// brightness/contrast jitter touches the image only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPool {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    /// Rotations are drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Additive intensity offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast gain drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentPool {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rot90: false,
            max_rotation_deg: 45.0,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentPool {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            rot90: false,
            max_rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = f(y, x);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Intensity-only perturbation: per-image gain and offset as in
/// [`AugmentPool`], then i.i.d. Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityNoise {
    pub brightness: f64,
    pub contrast: f64,
    pub noise_std: f64,
}

impl Default for IntensityNoise {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
        }
    }
}

impl IntensityNoise {
    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.noise_std == 0.0
    }

    /// Perturbs every image of a `[N,1,H,W]` (or any) tensor independently,
    /// treating the leading axis as the image index. Values are clamped to
    /// `[0, 1]`.
    pub fn apply(&self, images: &Tensor, rng: &mut Rng) -> Tensor {
        let n = images.shape().first().copied().unwrap_or(1).max(1);
        let per = images.numel() / n;
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut data = images.data().to_vec();
        for img in data.chunks_mut(per.max(1)) {
            let gain = 1.0 + self.contrast * (2.0 * rng.random::<f64>() - 1.0);
            let offset = self.brightness * (2.0 * rng.random::<f64>() - 1.0);
            for v in img {
                let mut x = (*v - 0.5) * gain + 0.5 + offset;
                if self.noise_std > 0.0 {
                    x += noise.sample(rng);
                }
                *v = x.clamp(0.0, 1.0);
            }
        }
        Tensor::new(images.shape(), data).expect("shape preserved")
    }
}

/// Rotates a row-major `h x w` grid by `degrees` counter-clockwise about its
/// centre with nearest-neighbour sampling; uncovered pixels get `fill`.
pub fn rotate_nearest<T: Copy>(src: &[T], h: usize, w: usize, degrees: f64, fill: T) -> Vec<T> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            // inverse rotation, with y pointing down on screen
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && (rx as usize) < w && (ry as usize) < h {
                out.push(src[ry as usize * w + rx as usize]);
            } else {
                out.push(fill);
            }
        }
    }
    out
}

/// Applies one random draw from `pool` to `sample`.
pub fn augment(sample: &SegSample, rng: &mut Rng, pool: &AugmentPool) -> SegSample {
    if pool.is_identity() {
        return sample.clone();
    }
    let (mut h, mut w) = sample.extent();
    let mut image = sample.image.data().to_vec();
    let mut label = sample.label.clone();

    let mut geom = |f: &dyn Fn(&[f64]) -> Vec<f64>, g: &dyn Fn(&[u8]) -> Vec<u8>| {
        image = f(&image);
        if let Some(l) = label.as_mut() {
            *l = g(l);
        }
    };
    if pool.hflip && rng.random::<bool>() {
        geom(&|a| remap(a, h, w, |y, x| (y, w - 1 - x)), &|a| remap(a, h, w, |y, x| (y, w - 1 - x)));
    }
    if pool.vflip && rng.random::<bool>() {
        geom(&|a| remap(a, h, w, |y, x| (h - 1 - y, x)), &|a| remap(a, h, w, |y, x| (h - 1 - y, x)));
    }
    if pool.rot90 {
        for _ in 0..rng.random_range(0..4) {
            // out[i][j] = in[j][W-1-i]; output is W x H
            let (oh, ow) = (w, h);
            geom(
                &|a| remap(a, oh, ow, |i, j| (j, w - 1 - i)),
                &|a| remap(a, oh, ow, |i, j| (j, w - 1 - i)),
            );
            (h, w) = (oh, ow);
        }
    }
    if pool.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-pool.max_rotation_deg..=pool.max_rotation_deg);
        geom(&|a| rotate_nearest(a, h, w, deg, 0.0), &|a| rotate_nearest(a, h, w, deg, 0u8));
    }
    if pool.brightness > 0.0 || pool.contrast > 0.0 {
        let gain = 1.0 + pool.contrast * (2.0 * rng.random::<f64>() - 1.0);
        let offset = pool.brightness * (2.0 * rng.random::<f64>() - 1.0);
        for v in &mut image {
            *v = ((*v - 0.5) * gain + 0.5 + offset).clamp(0.0, 1.0);
        }
    }
    SegSample {
        image: Tensor::new(&[1, h, w], image).expect("extent preserved"),
        label,
        volume: sample.volume,
        slice: sample.slice,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::rng::seeded;

    fn sample() -> SegSample {
        let spec = SyntheticSpec {
            extent: 16,
            volumes: 1,
            slices_per_volume: 1,
            ..SyntheticSpec::default()
        };
        generate_dataset(&spec).unwrap().samples.remove(0)
    }

    #[test]
    fn identity_pool_is_noop() {
        let s = sample();
        let mut rng = seeded(1);
        assert_eq!(augment(&s, &mut rng, &AugmentPool::identity()), s);
    }

    #[test]
    fn flip_moves_label_with_image() {
        let s = sample();
        let pool = AugmentPool {
            hflip: true,
            ..AugmentPool::identity()
        };
        let mut flipped = 0;
        for seed in 0..16 {
            let out = augment(&s, &mut seeded(seed), &pool);
            let label = out.label.as_ref().unwrap();
            let src = s.label.as_ref().unwrap();
            let same = out.image == s.image;
            for y in 0..16 {
                for x in 0..16 {
                    let (sx, sy) = if same { (x, y) } else { (15 - x, y) };
                    assert_eq!(label[y * 16 + x], src[sy * 16 + sx]);
                    assert_eq!(out.image.data()[y * 16 + x], s.image.data()[sy * 16 + sx]);
                }
            }
            flipped += usize::from(!same);
        }
        assert!(flipped > 0 && flipped < 16);
    }

    #[test]
    fn jitter_leaves_labels_alone() {
        let s = sample();
        let pool = AugmentPool {
            brightness: 0.3,
            contrast: 0.3,
            ..AugmentPool::identity()
        };
        let out = augment(&s, &mut seeded(4), &pool);
        assert_eq!(out.label, s.label);
        assert_ne!(out.image, s.image);
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rot45_round_trip_restores_most_pixels() {
        let n = 64;
        let grid: Vec<u32> = (0..(n * n) as u32).collect();
        let there = rotate_nearest(&grid, n, n, 45.0, u32::MAX);
        let back = rotate_nearest(&there, n, n, -45.0, u32::MAX);
        let kept = back.iter().zip(&grid).filter(|(a, b)| a == b).count();
        // corners leave the frame; everything inside the inscribed disc returns
        assert!(kept as f64 / (n * n) as f64 >= 0.5, "kept {kept}");

        let spec = SyntheticSpec {
            extent: 64,
            volumes: 1,
            slices_per_volume: 1,
            ..SyntheticSpec::default()
        };
        let label = generate_dataset(&spec).unwrap().samples.remove(0).label.unwrap();
        let back = rotate_nearest(&rotate_nearest(&label, n, n, 45.0, 0), n, n, -45.0, 0);
        let same = back.iter().zip(&label).filter(|(a, b)| a == b).count();
        assert!(same as f64 / (n * n) as f64 >= 0.9, "restored {same}");
    }

    #[test]
    fn rotation_direction_matches_quarter_turn() {
        let (h, w) = (5, 5);
        let grid: Vec<usize> = (0..h * w).collect();
        let r = rotate_nearest(&grid, h, w, 90.0, usize::MAX);
        let q = remap(&grid, w, h, |i, j| (j, w - 1 - i));
        assert_eq!(r, q);
    }
}
