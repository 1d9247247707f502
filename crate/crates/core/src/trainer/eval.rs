use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{dice_3d, LabelVolume, SegSample};
use crate::error::{invalid, Result};
use crate::ndcore::{Tape, Tensor};
use crate::network::{forward, NetworkParams, SegNetConfig};

/// Foreground Dice scores of one volume, classes `1..C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume: usize,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub volumes: Vec<VolumeScore>,
    /// Mean over volumes, per foreground class.
    pub class_mean: Vec<f64>,
    /// Mean of `class_mean`.
    pub mean: f64,
}

/// Arg-max labels for slices of one volume, stacked in the given order.
pub fn predict_volume(params: &NetworkParams, net: &SegNetConfig, slices: &[&SegSample]) -> Result<LabelVolume> {
    let first = slices.first().ok_or_else(|| invalid("cannot predict an empty volume"))?;
    let (h, w) = first.extent();
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.extent() != (h, w) {
            return Err(invalid("slices of one volume differ in extent"));
        }
        data.extend_from_slice(s.image.data());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false)?;
    let x = tape.constant(Tensor::new(&[slices.len(), 1, h, w], data)?)?;
    let probs = forward(&bound, net, &x)?.probs.value();
    let c = net.classes;
    let mut labels = Vec::with_capacity(slices.len() * h * w);
    for n in 0..slices.len() {
        for pix in 0..h * w {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for k in 0..c {
                let p = probs.data()[(n * c + k) * h * w + pix];
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelVolume::new(slices.len(), h, w, c, labels)
}

/// Groups samples by volume (slices sorted) and scores each volume in 3-D.
/// `truth` overrides the samples' own labels, index-aligned.
pub fn evaluate(
    params: &NetworkParams,
    net: &SegNetConfig,
    samples: &[SegSample],
    truth: Option<&[Vec<u8>]>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.volume).or_default().push(i);
    }
    let mut volumes = Vec::with_capacity(groups.len());
    for (volume, mut idx) in groups {
        idx.sort_by_key(|&i| samples[i].slice);
        let slices: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
        let pred = predict_volume(params, net, &slices)?;
        let mut gt = Vec::with_capacity(pred.data.len());
        for &i in &idx {
            let label = match truth {
                Some(t) => t.get(i),
                None => samples[i].label.as_ref(),
            };
            gt.extend_from_slice(label.ok_or_else(|| invalid(format!("volume {volume} lacks labels")))?);
        }
        let gt = LabelVolume::new(pred.slices, pred.height, pred.width, net.classes, gt)?;
        let dice = (1..net.classes)
            .map(|c| dice_3d(&pred, &gt, c))
            .collect::<Result<Vec<_>>>()?;
        volumes.push(VolumeScore { volume, dice });
    }
    let n = volumes.len() as f64;
    let class_mean: Vec<f64> = (0..net.classes - 1)
        .map(|c| volumes.iter().map(|v| v.dice[c]).sum::<f64>() / n)
        .collect();
    let mean = class_mean.iter().sum::<f64>() / class_mean.len() as f64;
    Ok(EvalReport {
        volumes,
        class_mean,
        mean,
    })
}
