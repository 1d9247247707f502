use std::collections::BTreeMap;
use std::rc::Rc;

use super::{Objective, Term};
use crate::error::{invalid, Result};
use crate::infomax::{
    consistency_loss, entropy_min_loss, global_mi_loss, local_mi_loss, ClusterAssignment, LocalBlock,
};
use crate::network::{forward, project, BoundParams, ForwardOutput, HeadKind, SegNetConfig};
use crate::ndcore::{Tape, Tensor, Var};
use crate::transforms::{apply_batch, TransformSpec};

/// Cross-entropy `-mean log p[label]` over every pixel of a `[N,C,H,W]` map.
/// `labels` holds `N*H*W` class indices.
pub fn supervised_loss<'t>(probs: &Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(invalid(format!("supervised_loss expects [N,C,H,W], got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != n * hw || labels.is_empty() {
        return Err(invalid(format!("{} labels for {} pixels", labels.len(), n * hw)));
    }
    let mut index = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= c {
            return Err(invalid(format!("label {l} out of range for {c} classes")));
        }
        let (img, pix) = (i / hw, i % hw);
        index.push((img * c + l) * hw + pix);
    }
    probs.gather(Rc::new(index), &[labels.len()])?.log()?.mean_all()?.neg()
}

/// Inputs of one optimisation step.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    /// `[N,1,H,W]` images and their `N*H*W` labels.
    pub labeled: Option<(Tensor, Vec<u8>)>,
    /// `[M,1,H,W]` images without labels.
    pub unlabeled: Option<Tensor>,
    /// Separately perturbed copy of `unlabeled` fed to the student before
    /// the transforms. `unlabeled` itself when absent.
    pub student_view: Option<Tensor>,
    /// One transform per unlabeled image.
    pub transforms: Vec<TransformSpec>,
}

/// Unweighted value and weight of every active term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub values: BTreeMap<Term, f64>,
    pub weights: BTreeMap<Term, f64>,
    pub total: f64,
}

impl Breakdown {
    /// `sum weight * value` in accumulation order.
    pub fn recombined(&self) -> f64 {
        let mut order: Vec<(&Term, &f64)> = self.values.iter().collect();
        order.sort_by_key(|(t, _)| ORDER.iter().position(|o| o == *t));
        order.iter().map(|(t, v)| self.weights[t] * **v).sum()
    }
}

const ORDER: [Term; 5] = [Term::Spv, Term::MiGlobal, Term::MiLocal, Term::Cons, Term::Entropy];

struct Accumulator<'t> {
    total: Option<Var<'t>>,
    breakdown: Breakdown,
}

impl<'t> Accumulator<'t> {
    fn push(&mut self, term: Term, weight: f64, value: Var<'t>) -> Result<()> {
        self.breakdown.values.insert(term, value.item());
        self.breakdown.weights.insert(term, weight);
        let weighted = value.scale(weight)?;
        self.total = Some(match self.total {
            Some(t) => t.add(&weighted)?,
            None => weighted,
        });
        Ok(())
    }
}

/// Assembles the weighted objective of `obj` for one batch.
///
/// The MI pairs and consistency target compare the student on `T(x)` with the
/// reference network on `x`: the student itself, or the teacher when
/// `obj.teacher` is set.
pub fn total_loss<'t>(
    tape: &'t Tape,
    student: &BoundParams<'t>,
    teacher: Option<&BoundParams<'t>>,
    net: &SegNetConfig,
    obj: &Objective,
    batch: &Batch,
) -> Result<(Var<'t>, Breakdown)> {
    let mut acc = Accumulator {
        total: None,
        breakdown: Breakdown::default(),
    };

    if obj.spv > 0.0 {
        let (x, y) = batch
            .labeled
            .as_ref()
            .ok_or_else(|| invalid("supervised term needs a labeled batch"))?;
        let out = forward(student, net, &tape.constant(x.clone())?)?;
        acc.push(Term::Spv, obj.spv, supervised_loss(&out.probs, y)?)?;
    }

    if obj.needs_unlabeled() {
        let xu = batch
            .unlabeled
            .as_ref()
            .ok_or_else(|| invalid("unsupervised terms need an unlabeled batch"))?;
        let xu = tape.constant(xu.clone())?;
        let mut plain: Option<ForwardOutput<'t>> = None;

        if obj.global > 0.0 || obj.local > 0.0 || obj.cons > 0.0 {
            let ts = &batch.transforms;
            if ts.len() != xu.shape()[0] {
                return Err(invalid(format!("{} transforms for {} unlabeled images", ts.len(), xu.shape()[0])));
            }
            let (ref_params, reference) = match (obj.teacher, teacher) {
                (true, Some(t)) => (t, forward(t, net, &xu)?),
                (true, None) => return Err(invalid("objective needs a teacher network")),
                (false, _) => (student, forward(student, net, &xu)?),
            };
            let xs = match &batch.student_view {
                Some(v) if v.shape() != xu.shape().as_slice() => {
                    return Err(invalid("student view and unlabeled batch differ in shape"))
                }
                Some(v) => tape.constant(v.clone())?,
                None => xu,
            };
            let moved = forward(student, net, &apply_batch(ts, &xs, 1)?)?;
            let heads = net.heads_for();

            if obj.global > 0.0 {
                let mut pairs = Vec::new();
                for h in heads.iter().filter(|h| h.kind == HeadKind::Global) {
                    let a = project(h, ref_params, h.site, &reference.embeddings[&h.site])?;
                    let b = project(h, student, h.site, &moved.embeddings[&h.site])?;
                    pairs.push((a, b));
                }
                acc.push(Term::MiGlobal, obj.global, global_mi_loss(&pairs, obj.symmetrize)?)?;
            }
            if obj.local > 0.0 {
                let mut blocks = Vec::new();
                for h in heads.iter().filter(|h| h.kind == HeadKind::Local) {
                    let scale = net.site_scale(h.site);
                    let a = project(h, ref_params, h.site, &reference.embeddings[&h.site])?;
                    let aligned = apply_batch(ts, &a.probs(), scale)?;
                    let b = project(h, student, h.site, &moved.embeddings[&h.site])?;
                    let displacements = obj
                        .displacements
                        .get(&h.site)
                        .cloned()
                        .ok_or_else(|| invalid(format!("no displacements for site {}", h.site)))?;
                    blocks.push(LocalBlock {
                        fa: ClusterAssignment::trusted(aligned),
                        fb: b,
                        displacements,
                    });
                }
                acc.push(Term::MiLocal, obj.local, local_mi_loss(&blocks)?)?;
            }
            if obj.cons > 0.0 {
                let target = apply_batch(ts, &reference.probs, 1)?;
                acc.push(Term::Cons, obj.cons, consistency_loss(&moved.probs, &target)?)?;
            }
            if !obj.teacher {
                plain = Some(reference);
            }
        }
        if obj.entropy > 0.0 {
            let out = match plain {
                Some(o) => o,
                None => forward(student, net, &xu)?,
            };
            acc.push(Term::Entropy, obj.entropy, entropy_min_loss(&out.probs)?)?;
        }
    }

    let total = acc.total.ok_or_else(|| invalid("objective has no active term"))?;
    acc.breakdown.total = total.item();
    Ok((total, acc.breakdown))
}
