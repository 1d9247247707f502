use crate::error::{invalid, Error, Result};

/// Stack of label slices belonging to one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Slice-major, row-major class indices.
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(slices: usize, height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != slices * height * width {
            return Err(invalid(format!(
                "label volume expects {} voxels, got {}",
                slices * height * width,
                data.len()
            )));
        }
        if let Some(&c) = data.iter().find(|&&c| c as usize >= classes) {
            return Err(invalid(format!("label {c} outside {classes} classes")));
        }
        Ok(Self {
            slices,
            height,
            width,
            classes,
            data,
        })
    }

    /// Stacks equally sized 2-D label maps.
    pub fn stack(maps: &[&[u8]], height: usize, width: usize, classes: usize) -> Result<Self> {
        let data = maps.iter().flat_map(|m| m.iter().copied()).collect();
        Self::new(maps.len(), height, width, classes, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.slices, self.height, self.width]
    }
}

/// Volumetric Dice score of class `c`: `2|S ∩ G| / (|S| + |G|)`.
/// Two empty masks score 1.
pub fn dice_3d(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "dice_3d",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if class >= pred.classes.min(gt.classes) {
        return Err(invalid(format!("class {class} is not a known class")));
    }
    let c = class as u8;
    let (mut s, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&gt.data) {
        let (ip, it) = (p == c, t == c);
        s += usize::from(ip);
        g += usize::from(it);
        both += usize::from(ip && it);
    }
    if s + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (s + g) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(data: Vec<u8>) -> LabelVolume {
        LabelVolume::new(1, 1, data.len(), 3, data).unwrap()
    }

    #[test]
    fn examples() {
        let a = vol(vec![0, 1, 1, 0, 2]);
        assert_eq!(dice_3d(&a, &a, 1).unwrap(), 1.0);
        let b = vol(vec![1, 1, 0, 0, 0, 0]);
        let c = vol(vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(dice_3d(&b, &c, 1).unwrap(), 0.0);
        let s = vol(vec![1, 1, 0, 0, 0, 0]);
        let g = vol(vec![1, 1, 1, 1, 0, 0]);
        assert!((dice_3d(&s, &g, 1).unwrap() - 2.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let empty = vol(vec![0, 0, 0]);
        let one = vol(vec![0, 2, 0]);
        assert_eq!(dice_3d(&empty, &empty, 2).unwrap(), 1.0);
        assert_eq!(dice_3d(&empty, &one, 2).unwrap(), 0.0);
        assert_eq!(dice_3d(&one, &empty, 2).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let a = vol(vec![0, 1]);
        assert!(dice_3d(&a, &a, 3).is_err());
        assert!(dice_3d(&a, &vol(vec![0, 1, 2]), 1).is_err());
        assert!(LabelVolume::new(1, 1, 2, 2, vec![0, 2]).is_err());
    }
}
