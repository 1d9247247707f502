//! Invertible geometric transformations on `[.., H, W]` grids.
//!
//! Every transform is a pure index permutation of the spatial grid, so it
//! applies identically to images, label maps, probability maps and feature
//! maps, commutes with anything acting only on channels, and has an exact
//! inverse. Coordinates are `(x, y)` = (column, row) with the origin at the
//! top-left pixel. Quarter turns rotate counter-clockwise as displayed, and
//! translations shift cyclically so that no pixel is lost.

use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ndcore::{Tensor, Var};
use crate::rng::Rng;

/// One elementary transformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Hflip,
    Vflip,
    /// Counter-clockwise quarter turns, `k` in `1..=3`.
    Rot90 { k: u8 },
    /// Cyclic shift by `dx` columns and `dy` rows.
    Translate { dx: i32, dy: i32 },
}

impl TransformKind {
    fn inverse(self) -> Self {
        match self {
            Self::Rot90 { k } => Self::Rot90 { k: (4 - k % 4) % 4 },
            Self::Translate { dx, dy } => Self::Translate { dx: -dx, dy: -dy },
            other => other,
        }
    }

    /// Output `(h, w)` and, for every output pixel, the input pixel it reads.
    fn source_map(self, h: usize, w: usize) -> Result<(usize, usize, Vec<usize>)> {
        let (hi, wi) = (h as i64, w as i64);
        let (oh, ow) = match self {
            Self::Rot90 { k } if k % 2 == 1 => (w, h),
            _ => (h, w),
        };
        if let Self::Translate { dx, dy } = self {
            if i64::from(dx).abs() >= wi || i64::from(dy).abs() >= hi {
                return Err(invalid(format!(
                    "translate({dx},{dy}) exceeds a {h}x{w} grid"
                )));
            }
        }
        if let Self::Rot90 { k } = self {
            if k == 0 || k > 3 {
                return Err(invalid(format!("rot90 expects k in 1..=3, got {k}")));
            }
        }
        let mut map = Vec::with_capacity(oh * ow);
        for i in 0..oh as i64 {
            for j in 0..ow as i64 {
                let (si, sj) = match self {
                    Self::Identity => (i, j),
                    Self::Hflip => (i, wi - 1 - j),
                    Self::Vflip => (hi - 1 - i, j),
                    Self::Rot90 { k: 1 } => (j, wi - 1 - i),
                    Self::Rot90 { k: 2 } => (hi - 1 - i, wi - 1 - j),
                    Self::Rot90 { .. } => (hi - 1 - j, i),
                    Self::Translate { dx, dy } => (
                        (i - i64::from(dy)).rem_euclid(hi),
                        (j - i64::from(dx)).rem_euclid(wi),
                    ),
                };
                map.push((si * wi + sj) as usize);
            }
        }
        Ok((oh, ow, map))
    }
}

/// Composition of elementary transformations, applied first to last.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<TransformKind>,
}

impl From<TransformKind> for TransformSpec {
    fn from(kind: TransformKind) -> Self {
        Self { steps: vec![kind] }
    }
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn then(mut self, kind: TransformKind) -> Self {
        self.steps.push(kind);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.steps.iter().all(|k| *k == TransformKind::Identity)
    }

    /// Output spatial extent and source index of every output pixel.
    pub fn spatial_map(&self, h: usize, w: usize) -> Result<(usize, usize, Vec<usize>)> {
        let mut cur: Vec<usize> = (0..h * w).collect();
        let (mut ch, mut cw) = (h, w);
        for kind in &self.steps {
            let (nh, nw, step) = kind.source_map(ch, cw)?;
            cur = step.iter().map(|&s| cur[s]).collect();
            (ch, cw) = (nh, nw);
        }
        Ok((ch, cw, cur))
    }

    /// Gather indices for a `[lead.., H, W]` array flattened row-major.
    fn full_map(&self, shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if shape.len() < 2 {
            return Err(invalid(format!("transform needs a spatial grid, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (oh, ow, map) = self.spatial_map(h, w)?;
        let mut index = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            index.extend(map.iter().map(|&s| p * h * w + s));
        }
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        Ok((index, out_shape))
    }

    /// Transforms the trailing two axes of a plain array.
    pub fn apply_tensor(&self, a: &Tensor) -> Result<Tensor> {
        let (index, shape) = self.full_map(a.shape())?;
        Tensor::new(&shape, index.iter().map(|&i| a.data()[i]).collect())
    }

    /// Transforms a row-major `h x w` grid of arbitrary cells (e.g. labels).
    pub fn apply_grid<T: Copy>(&self, grid: &[T], h: usize, w: usize) -> Result<(usize, usize, Vec<T>)> {
        if grid.len() != h * w {
            return Err(invalid("grid length does not match extent"));
        }
        let (oh, ow, map) = self.spatial_map(h, w)?;
        Ok((oh, ow, map.iter().map(|&s| grid[s]).collect()))
    }

    pub fn invert(&self) -> Self {
        Self {
            steps: self.steps.iter().rev().map(|k| k.inverse()).collect(),
        }
    }

    /// Whether the transform can act on a map downsampled by `scale`.
    pub fn is_alignment_safe(&self, scale: usize) -> bool {
        self.steps.iter().all(|k| match *k {
            TransformKind::Translate { dx, dy } => {
                let s = scale as i32;
                s > 0 && dx % s == 0 && dy % s == 0
            }
            _ => true,
        })
    }

    /// The same permutation expressed on a grid downsampled by `scale`.
    pub fn at_scale(&self, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(invalid("scale must be positive"));
        }
        if !self.is_alignment_safe(scale) {
            return Err(invalid(format!(
                "transform {self:?} is not alignment-safe at scale {scale}"
            )));
        }
        let s = scale as i32;
        Ok(Self {
            steps: self
                .steps
                .iter()
                .map(|k| match *k {
                    TransformKind::Translate { dx, dy } => TransformKind::Translate {
                        dx: dx / s,
                        dy: dy / s,
                    },
                    other => other,
                })
                .collect(),
        })
    }
}

/// Applies `t` to the trailing two axes of `a` (e.g. `[C,H,W]`); differentiable.
pub fn apply<'t>(t: &TransformSpec, a: &Var<'t>) -> Result<Var<'t>> {
    let (index, shape) = t.full_map(&a.shape())?;
    a.gather(Rc::new(index), &shape)
}

/// Inverse transform in the same family.
pub fn invert(t: &TransformSpec) -> TransformSpec {
    t.invert()
}

/// Applies a full-resolution transform to a feature map whose spatial extent
/// is the image extent divided by `scale`.
pub fn apply_to_featuremap<'t>(t: &TransformSpec, f: &Var<'t>, scale: usize) -> Result<Var<'t>> {
    apply(&t.at_scale(scale)?, f)
}

/// Applies one transform per sample to a `[N, ..., H, W]` batch.
pub fn apply_batch<'t>(ts: &[TransformSpec], a: &Var<'t>, scale: usize) -> Result<Var<'t>> {
    let shape = a.shape();
    if shape.len() < 3 || shape[0] != ts.len() {
        return Err(invalid(format!(
            "apply_batch: {} transforms for batch shape {shape:?}",
            ts.len()
        )));
    }
    let per: usize = shape[1..].iter().product();
    let mut index = Vec::with_capacity(shape.iter().product());
    let mut out_shape: Option<Vec<usize>> = None;
    for (n, t) in ts.iter().enumerate() {
        let (map, s) = t.at_scale(scale)?.full_map(&shape[1..])?;
        match &out_shape {
            Some(prev) if *prev != s => {
                return Err(invalid("apply_batch: transforms produce different extents"))
            }
            _ => out_shape = Some(s),
        }
        index.extend(map.iter().map(|&i| n * per + i));
    }
    let mut full = vec![shape[0]];
    full.extend(out_shape.expect("non-empty batch"));
    a.gather(Rc::new(index), &full)
}

/// Entry of a transformation pool. Parameterised entries are sampled
/// uniformly within their range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PoolEntry {
    Identity,
    Hflip,
    Vflip,
    /// Quarter turn with `k` drawn from `{1,2,3}`.
    Rot90,
    /// Shift with each of `dx`, `dy` drawn from multiples of `step` in
    /// `[-max_shift, max_shift]`.
    Translate { max_shift: i32, step: i32 },
}

/// Set of transformations sampled uniformly, one entry per draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformPool {
    pub entries: Vec<PoolEntry>,
}

impl TransformPool {
    pub fn new(entries: Vec<PoolEntry>) -> Self {
        Self { entries }
    }

    /// Horizontal and vertical flips plus identity, used by the MI and
    /// consistency losses.
    pub fn flips() -> Self {
        Self::new(vec![PoolEntry::Identity, PoolEntry::Hflip, PoolEntry::Vflip])
    }

    pub fn identity_only() -> Self {
        Self::new(vec![PoolEntry::Identity])
    }

    /// True when every member can be applied to maps downsampled by `scale`.
    pub fn is_alignment_safe(&self, scale: usize) -> bool {
        self.entries.iter().all(|e| match *e {
            PoolEntry::Translate { step, .. } => scale > 0 && step > 0 && step % scale as i32 == 0,
            _ => true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(invalid("transform pool is empty"));
        }
        for e in &self.entries {
            if let PoolEntry::Translate { max_shift, step } = *e {
                if step <= 0 || max_shift < 0 {
                    return Err(invalid(format!("bad translate entry {e:?}")));
                }
            }
        }
        Ok(())
    }

    /// Every concrete transform the pool can produce.
    pub fn members(&self) -> Vec<TransformSpec> {
        let mut out = Vec::new();
        for e in &self.entries {
            match *e {
                PoolEntry::Identity => out.push(TransformSpec::identity()),
                PoolEntry::Hflip => out.push(TransformKind::Hflip.into()),
                PoolEntry::Vflip => out.push(TransformKind::Vflip.into()),
                PoolEntry::Rot90 => {
                    out.extend((1..=3).map(|k| TransformKind::Rot90 { k }.into()));
                }
                PoolEntry::Translate { max_shift, step } => {
                    let range: Vec<i32> = (-max_shift..=max_shift).filter(|v| v % step == 0).collect();
                    for &dy in &range {
                        for &dx in &range {
                            out.push(TransformKind::Translate { dx, dy }.into());
                        }
                    }
                }
            }
        }
        out
    }
}

/// Draws one transform: a uniformly chosen entry, then uniform parameters.
pub fn sample_transform(rng: &mut Rng, pool: &TransformPool) -> Result<TransformSpec> {
    pool.validate()?;
    let entry = pool.entries[rng.random_range(0..pool.entries.len())];
    Ok(match entry {
        PoolEntry::Identity => TransformSpec::identity(),
        PoolEntry::Hflip => TransformKind::Hflip.into(),
        PoolEntry::Vflip => TransformKind::Vflip.into(),
        PoolEntry::Rot90 => TransformKind::Rot90 {
            k: rng.random_range(1..=3),
        }
        .into(),
        PoolEntry::Translate { max_shift, step } => {
            let steps = max_shift / step;
            let dx = rng.random_range(-steps..=steps) * step;
            let dy = rng.random_range(-steps..=steps) * step;
            TransformKind::Translate { dx, dy }.into()
        }
    })
}
