//! Mutual information between categorical cluster assignments.
//!
//! Two assignments of the same inputs (for example an image and a flipped
//! copy) are combined into a `K x K` joint distribution by averaging outer
//! products. Maximizing the mutual information of that joint pushes the
//! assignments to be confident, balanced and mutually predictive. The local
//! variant pairs each position of one map with a displaced position of the
//! other, which rewards spatially coherent cluster maps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ndcore::{Tensor, Var};

/// Tolerance on simplex constraints for assignments and joints.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Per-sample (`[N,K]`) or per-pixel (`[N,K,h,w]`) categorical distributions.
#[derive(Clone, Copy, Debug)]
pub struct ClusterAssignment<'t> {
    probs: Var<'t>,
}

impl<'t> ClusterAssignment<'t> {
    /// Checks non-negativity and that every distribution over axis 1 sums to 1.
    pub fn new(probs: Var<'t>) -> Result<Self> {
        let v = probs.value();
        let s = v.shape();
        if !(s.len() == 2 || s.len() == 4) || s[1] < 1 {
            return Err(invalid(format!("cluster assignment must be [N,K] or [N,K,h,w], got {s:?}")));
        }
        if v.data().iter().any(|&p| p < 0.0) {
            return Err(invalid("cluster assignment has negative entries"));
        }
        let (n, k) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        for a in 0..n {
            for i in 0..inner {
                let total: f64 = (0..k).map(|c| v.data()[(a * k + c) * inner + i]).sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(invalid(format!("cluster distribution sums to {total}")));
                }
            }
        }
        Ok(Self { probs })
    }

    /// Wraps values whose producer already guarantees the simplex constraint
    /// (softmax outputs), or deliberately off-simplex probes.
    pub fn trusted(probs: Var<'t>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> Var<'t> {
        self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.probs.shape()
    }
}

/// `K x K` joint distribution of two cluster variables.
#[derive(Clone, Copy, Debug)]
pub struct JointDistribution<'t> {
    p: Var<'t>,
}

impl<'t> JointDistribution<'t> {
    pub fn new(p: Var<'t>) -> Result<Self> {
        let v = p.value();
        let s = v.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
            return Err(invalid(format!("joint must be square, got {s:?}")));
        }
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(invalid("joint has negative entries"));
        }
        let total = v.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("joint sums to {total}")));
        }
        Ok(Self { p })
    }

    fn trusted(p: Var<'t>) -> Self {
        Self { p }
    }

    pub fn var(&self) -> Var<'t> {
        self.p
    }

    pub fn matrix(&self) -> Tensor {
        (*self.p.value()).clone()
    }

    pub fn k(&self) -> usize {
        self.p.shape()[0]
    }
}

fn symmetrized<'t>(p: Var<'t>) -> Result<Var<'t>> {
    p.add(&p.transpose()?)?.scale(0.5)
}

/// `P = (1/N) sum_n a_n b_n^T`, optionally replaced by `(P + P^T)/2`.
pub fn estimate_joint<'t>(
    a: &ClusterAssignment<'t>,
    b: &ClusterAssignment<'t>,
    symmetrize: bool,
) -> Result<JointDistribution<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Shape {
            op: "estimate_joint",
            lhs: sa,
            rhs: sb,
        });
    }
    if sa[1] != sb[1] {
        return Err(invalid(format!("estimate_joint: K mismatch {} vs {}", sa[1], sb[1])));
    }
    if sa[0] != sb[0] {
        return Err(Error::Shape {
            op: "estimate_joint",
            lhs: sa,
            rhs: sb,
        });
    }
    if sa[0] == 0 {
        return Err(invalid("estimate_joint: empty batch"));
    }
    let p = a
        .probs()
        .transpose()?
        .matmul(&b.probs())?
        .scale(1.0 / sa[0] as f64)?;
    let p = if symmetrize { symmetrized(p)? } else { p };
    Ok(JointDistribution::trusted(p))
}

/// `sum_{c,c'} P log(P / (P_c. * P_.c'))` with the floored logarithm.
pub fn mutual_information<'t>(joint: &JointDistribution<'t>) -> Result<Var<'t>> {
    let p = joint.var();
    let rows = p.sum_axis(1)?;
    let cols = p.sum_axis(0)?;
    let independent = rows.outer(&cols)?;
    p.mul(&p.log()?.sub(&independent.log()?)?)?.sum_all()
}

/// Validates a plain matrix as a joint distribution.
fn check_joint(p: &Tensor) -> Result<(usize, usize)> {
    let s = p.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(invalid(format!("joint must be a matrix, got {s:?}")));
    }
    if p.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(invalid("joint has negative or non-finite entries"));
    }
    if (p.sum() - 1.0).abs() > SIMPLEX_TOL {
        return Err(invalid(format!("joint sums to {}", p.sum())));
    }
    Ok((s[0], s[1]))
}

fn entropy_of(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Mutual information as `H(col) - H(col | row)`, evaluated with plain loops.
///
/// Shares no code with [`mutual_information`] and serves as its oracle.
pub fn mi_by_entropy(p: &Tensor) -> Result<f64> {
    let (r, c) = check_joint(p)?;
    let at = |i: usize, j: usize| p.data()[i * c + j];
    let col_marginal = (0..c).map(|j| (0..r).map(|i| at(i, j)).sum::<f64>());
    let h_col = entropy_of(col_marginal);
    let mut h_col_given_row = 0.0;
    for i in 0..r {
        let row_mass: f64 = (0..c).map(|j| at(i, j)).sum();
        if row_mass <= 0.0 {
            continue;
        }
        let conditional = (0..c).map(|j| at(i, j) / row_mass);
        h_col_given_row += row_mass * entropy_of(conditional);
    }
    Ok(h_col - h_col_given_row)
}

/// Entropies of the row and column marginals of a joint.
pub fn marginal_entropies(p: &Tensor) -> Result<(f64, f64)> {
    let (r, c) = check_joint(p)?;
    let rows = (0..r).map(|i| p.data()[i * c..(i + 1) * c].iter().sum::<f64>());
    let cols = (0..c).map(|j| (0..r).map(|i| p.data()[i * c + j]).sum::<f64>());
    Ok((entropy_of(rows), entropy_of(cols)))
}

/// `-(1/heads) sum_heads MI(estimate_joint(a, b))`.
pub fn global_mi_loss<'t>(
    pairs: &[(ClusterAssignment<'t>, ClusterAssignment<'t>)],
    symmetrize: bool,
) -> Result<Var<'t>> {
    let heads = pairs.len();
    if heads == 0 {
        return Err(invalid("global_mi_loss needs at least one head"));
    }
    let mut total: Option<Var<'t>> = None;
    for (a, b) in pairs {
        let mi = mutual_information(&estimate_joint(a, b, symmetrize)?)?;
        total = Some(match total {
            Some(t) => t.add(&mi)?,
            None => mi,
        });
    }
    total.expect("non-empty").scale(-1.0 / heads as f64)
}

/// Spatial offsets `(p, q)` (rows, columns) for the local joint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisplacementSet {
    offsets: Vec<(i32, i32)>,
    radius: u32,
}

impl DisplacementSet {
    pub fn new(offsets: Vec<(i32, i32)>, radius: u32) -> Result<Self> {
        if offsets.is_empty() {
            return Err(invalid("displacement set is empty"));
        }
        let r = radius as i32;
        for (i, &(p, q)) in offsets.iter().enumerate() {
            if p.abs() > r || q.abs() > r {
                return Err(invalid(format!("offset ({p},{q}) exceeds radius {radius}")));
            }
            if offsets[..i].contains(&(p, q)) {
                return Err(invalid(format!("duplicate offset ({p},{q})")));
            }
        }
        Ok(Self { offsets, radius })
    }

    /// All offsets of a `(2r+1) x (2r+1)` neighbourhood.
    pub fn square(radius: u32) -> Self {
        let r = radius as i32;
        let offsets = (-r..=r).flat_map(|p| (-r..=r).map(move |q| (p, q))).collect();
        Self { offsets, radius }
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Valid index range `[lo, hi)` of `i` such that `i + d` stays in `0..n`.
fn valid_range(n: usize, d: i32) -> Option<(usize, usize)> {
    let n = n as i64;
    let d = i64::from(d);
    let lo = (-d).max(0);
    let hi = (n - d).min(n);
    (hi > lo).then_some((lo as usize, hi as usize))
}

/// Local joints for one pair of maps, sharing the channel-last layout across
/// displacements.
struct LocalPair<'t> {
    a: Var<'t>,
    b: Var<'t>,
    n: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl<'t> LocalPair<'t> {
    fn new(fa: &ClusterAssignment<'t>, fb: &ClusterAssignment<'t>) -> Result<Self> {
        let (sa, sb) = (fa.shape(), fb.shape());
        if sa.len() != 4 || sa != sb {
            return Err(Error::Shape {
                op: "local_joint",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(Self {
            a: fa.probs().permute(&[0, 2, 3, 1])?,
            b: fb.probs().permute(&[0, 2, 3, 1])?,
            n: sa[0],
            k: sa[1],
            h: sa[2],
            w: sa[3],
        })
    }

    fn joint(&self, (p, q): (i32, i32)) -> Result<JointDistribution<'t>> {
        let rows = valid_range(self.h, p);
        let cols = valid_range(self.w, q);
        let (Some((r0, r1)), Some((c0, c1))) = (rows, cols) else {
            return Err(invalid(format!(
                "offset ({p},{q}) leaves no valid positions on a {}x{} map",
                self.h, self.w
            )));
        };
        if self.n == 0 {
            return Err(invalid("local_joint: empty batch"));
        }
        let (dr, dc) = ((r0 as i64 + i64::from(p)) as usize, (c0 as i64 + i64::from(q)) as usize);
        let count = self.n * (r1 - r0) * (c1 - c0);
        let a = self
            .a
            .slice(1, r0, r1)?
            .slice(2, c0, c1)?
            .reshape(&[count, self.k])?;
        let b = self
            .b
            .slice(1, dr, dr + (r1 - r0))?
            .slice(2, dc, dc + (c1 - c0))?
            .reshape(&[count, self.k])?;
        let p = a.transpose()?.matmul(&b)?.scale(1.0 / count as f64)?;
        Ok(JointDistribution::trusted(p))
    }
}

/// Joint of `fa` at `(i,j)` with `fb` at `(i+p, j+q)` over all valid
/// positions, normalised by the number of valid `(n,i,j)` triples.
pub fn local_joint<'t>(
    fa: &ClusterAssignment<'t>,
    fb: &ClusterAssignment<'t>,
    offset: (i32, i32),
) -> Result<JointDistribution<'t>> {
    LocalPair::new(fa, fb)?.joint(offset)
}

/// One decoder block's contribution to the local loss.
#[derive(Clone, Debug)]
pub struct LocalBlock<'t> {
    pub fa: ClusterAssignment<'t>,
    pub fb: ClusterAssignment<'t>,
    pub displacements: DisplacementSet,
}

/// Mean MI over the displacements of one block. All displacement joints come
/// from one fused co-occurrence op; [`local_joint`] computes the same joints
/// one at a time.
pub fn block_mi<'t>(block: &LocalBlock<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (block.fa.shape(), block.fb.shape());
    if sa.len() != 4 || sa != sb {
        return Err(Error::Shape {
            op: "block_mi",
            lhs: sa,
            rhs: sb,
        });
    }
    let k = sa[1];
    let offsets = block.displacements.offsets();
    let stack = block.fa.probs().displaced_cooccurrence(&block.fb.probs(), offsets)?;
    let mut total: Option<Var<'t>> = None;
    for d in 0..offsets.len() {
        let joint = JointDistribution::trusted(stack.slice(0, d, d + 1)?.reshape(&[k, k])?);
        let mi = mutual_information(&joint)?;
        total = Some(match total {
            Some(t) => t.add(&mi)?,
            None => mi,
        });
    }
    total
        .ok_or_else(|| invalid("empty displacement set"))?
        .scale(1.0 / block.displacements.len() as f64)
}

/// `-(1/B) sum_b (1/|D_b|) sum_{(p,q) in D_b} MI(local_joint(fa_b, fb_b, (p,q)))`.
pub fn local_mi_loss<'t>(blocks: &[LocalBlock<'t>]) -> Result<Var<'t>> {
    if blocks.is_empty() {
        return Err(invalid("local_mi_loss needs at least one block"));
    }
    let mut total: Option<Var<'t>> = None;
    for block in blocks {
        let mi = block_mi(block)?;
        total = Some(match total {
            Some(t) => t.add(&mi)?,
            None => mi,
        });
    }
    total.expect("non-empty").scale(-1.0 / blocks.len() as f64)
}

/// Mean over `N*H*W` positions of the squared L2 distance between the class
/// vectors of two `[N,C,H,W]` maps.
pub fn consistency_loss<'t>(out_t: &Var<'t>, out_aligned: &Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (out_t.shape(), out_aligned.shape());
    if sa.len() != 4 || sa != sb {
        return Err(Error::Shape {
            op: "consistency_loss",
            lhs: sa,
            rhs: sb,
        });
    }
    let positions = sa[0] * sa[2] * sa[3];
    if positions == 0 {
        return Err(invalid("consistency_loss on an empty map"));
    }
    out_t
        .sq_diff(out_aligned)?
        .sum_all()?
        .scale(1.0 / positions as f64)
}

/// Mean pixel-wise Shannon entropy of a `[N,C,H,W]` probability map.
pub fn entropy_min_loss<'t>(out: &Var<'t>) -> Result<Var<'t>> {
    let s = out.shape();
    if s.len() != 4 {
        return Err(invalid(format!("entropy_min_loss expects [N,C,H,W], got {s:?}")));
    }
    let positions = s[0] * s[2] * s[3];
    if positions == 0 {
        return Err(invalid("entropy_min_loss on an empty map"));
    }
    out.mul(&out.log()?)?
        .sum_all()?
        .scale(-1.0 / positions as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Tape;

    fn joint_of(tape: &Tape, rows: &[Vec<f64>]) -> f64 {
        let p = tape.constant(Tensor::from_rows(rows).unwrap()).unwrap();
        mutual_information(&JointDistribution::new(p).unwrap()).unwrap().item()
    }

    fn assign<'t>(tape: &'t Tape, shape: &[usize], data: Vec<f64>) -> ClusterAssignment<'t> {
        ClusterAssignment::new(tape.constant(Tensor::new(shape, data).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn fused_block_matches_per_displacement_joints() {
        use crate::rng::seeded;
        use rand::Rng as _;
        let mut rng = seeded(11);
        let tape = Tape::new();
        let mut map = || {
            let logits: Vec<f64> = (0..2 * 3 * 5 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v = tape.constant(Tensor::new(&[2, 3, 5, 6], logits).unwrap()).unwrap();
            ClusterAssignment::trusted(v.softmax(1).unwrap())
        };
        let (fa, fb) = (map(), map());
        let displacements = DisplacementSet::square(2);
        let fused = block_mi(&LocalBlock {
            fa: fa.clone(),
            fb: fb.clone(),
            displacements: displacements.clone(),
        })
        .unwrap()
        .item();
        let mut reference = 0.0;
        for &off in displacements.offsets() {
            reference += mutual_information(&local_joint(&fa, &fb, off).unwrap()).unwrap().item();
        }
        reference /= displacements.len() as f64;
        assert!((fused - reference).abs() < 1e-12, "{fused} vs {reference}");
    }

    #[test]
    fn joint_of_identical_one_hots() {
        let tape = Tape::new();
        let a = assign(&tape, &[1, 2], vec![1.0, 0.0]);
        let p = estimate_joint(&a, &a, false).unwrap();
        assert_eq!(p.matrix().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetrized_joint_of_distinct_one_hots() {
        let tape = Tape::new();
        let a = assign(&tape, &[1, 2], vec![1.0, 0.0]);
        let b = assign(&tape, &[1, 2], vec![0.0, 1.0]);
        let p = estimate_joint(&a, &b, true).unwrap();
        assert_eq!(p.matrix().data(), &[0.0, 0.5, 0.5, 0.0]);
        let asym = estimate_joint(&a, &b, false).unwrap();
        assert_eq!(asym.matrix().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn joint_averages_over_batch() {
        let tape = Tape::new();
        let a = assign(&tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let p = estimate_joint(&a, &a, false).unwrap();
        assert_eq!(p.matrix().data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn joint_rejects_bad_inputs() {
        let tape = Tape::new();
        let a = assign(&tape, &[1, 2], vec![1.0, 0.0]);
        let b = assign(&tape, &[1, 3], vec![1.0, 0.0, 0.0]);
        assert!(estimate_joint(&a, &b, false).is_err());
        let empty = ClusterAssignment::trusted(tape.constant(Tensor::zeros(&[0, 2])).unwrap());
        assert!(estimate_joint(&empty, &empty, false).is_err());
        assert!(ClusterAssignment::new(tape.constant(Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap()).unwrap()).is_err());
    }

    #[test]
    fn mi_reference_values() {
        let tape = Tape::new();
        let diag = joint_of(&tape, &[vec![0.5, 0.0], vec![0.0, 0.5]]);
        assert!((diag - 2f64.ln()).abs() < 1e-12);
        let uniform = joint_of(&tape, &[vec![0.25, 0.25], vec![0.25, 0.25]]);
        assert!(uniform.abs() < 1e-15);
        // 0.8 ln 1.6 + 0.2 ln 0.4, the closed form of the entropy decomposition
        let skew = joint_of(&tape, &[vec![0.4, 0.1], vec![0.1, 0.4]]);
        assert!((skew - 0.192745).abs() < 1e-6, "{skew}");
        let oracle = mi_by_entropy(&Tensor::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap()).unwrap();
        assert!((skew - oracle).abs() < 1e-12);
    }

    #[test]
    fn entropy_decomposition_reference_values() {
        let diag = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((mi_by_entropy(&diag).unwrap() - 2f64.ln()).abs() < 1e-12);
        let uni = Tensor::full(&[3, 3], 1.0 / 9.0);
        assert!(mi_by_entropy(&uni).unwrap().abs() < 1e-12);
        assert!(mi_by_entropy(&Tensor::from_rows(&[vec![0.5, -0.1], vec![0.1, 0.5]]).unwrap()).is_err());
        assert!(mi_by_entropy(&Tensor::full(&[2, 2], 0.3)).is_err());
    }

    #[test]
    fn invalid_joint_rejected() {
        let tape = Tape::new();
        let neg = tape.constant(Tensor::from_rows(&[vec![0.6, -0.1], vec![0.0, 0.5]]).unwrap()).unwrap();
        assert!(JointDistribution::new(neg).is_err());
        let heavy = tape.constant(Tensor::full(&[2, 2], 0.3)).unwrap();
        assert!(JointDistribution::new(heavy).is_err());
    }

    #[test]
    fn global_loss_cases() {
        let tape = Tape::new();
        let onehot = assign(&tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let uniform = assign(&tape, &[2, 2], vec![0.5; 4]);
        let single = global_mi_loss(&[(onehot, onehot)], false).unwrap().item();
        assert!((single + 2f64.ln()).abs() < 1e-12);
        let indep = global_mi_loss(&[(uniform, uniform)], false).unwrap().item();
        assert!(indep.abs() < 1e-15);
        let two = global_mi_loss(&[(onehot, onehot), (uniform, uniform)], false).unwrap().item();
        assert!((two + 0.346574).abs() < 1e-6, "{two}");
        assert!(global_mi_loss(&[], false).is_err());
    }

    #[test]
    fn local_joint_cases() {
        let tape = Tape::new();
        // every pixel one-hot class 1 (index 0), K=2
        let ones = assign(&tape, &[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(local_joint(&ones, &ones, (0, 0)).unwrap().matrix().data(), &[1.0, 0.0, 0.0, 0.0]);

        let tiny = assign(&tape, &[1, 2, 1, 1], vec![1.0, 0.0]);
        assert!(local_joint(&tiny, &tiny, (0, 1)).is_err());

        // 2x2 checkerboard: class0 at (0,0),(1,1); class1 at (0,1),(1,0).
        // Offset (0,1) pairs (0,0)->(0,1) and (1,0)->(1,1): one (0,1) and one (1,0).
        let checker = assign(&tape, &[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let p = local_joint(&checker, &checker, (0, 1)).unwrap();
        assert_eq!(p.matrix().data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn local_loss_averages_blocks() {
        let tape = Tape::new();
        let balanced = assign(&tape, &[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let uniform = assign(&tape, &[1, 2, 1, 2], vec![0.5; 4]);
        let at_origin = DisplacementSet::new(vec![(0, 0)], 0).unwrap();
        let blocks = [
            LocalBlock { fa: balanced, fb: balanced, displacements: at_origin.clone() },
            LocalBlock { fa: uniform, fb: uniform, displacements: at_origin.clone() },
        ];
        let loss = local_mi_loss(&blocks).unwrap().item();
        assert!((loss + 0.346574).abs() < 1e-6);
        let only_uniform = local_mi_loss(&blocks[1..]).unwrap().item();
        assert!(only_uniform.abs() < 1e-15);
        assert!(local_mi_loss(&[]).is_err());
    }

    #[test]
    fn displacement_validation() {
        assert!(DisplacementSet::new(vec![(0, 0), (0, 0)], 1).is_err());
        assert!(DisplacementSet::new(vec![(2, 0)], 1).is_err());
        assert_eq!(DisplacementSet::square(1).len(), 9);
    }

    #[test]
    fn consistency_cases() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(consistency_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap().item(), 2.0);
        let c = tape.constant(Tensor::zeros(&[1, 2, 1, 2])).unwrap();
        assert!(consistency_loss(&a, &c).is_err());
    }

    #[test]
    fn entropy_cases() {
        let tape = Tape::new();
        let onehot = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(entropy_min_loss(&onehot).unwrap().item(), 0.0);
        let uniform = tape.constant(Tensor::full(&[2, 4, 2, 2], 0.25)).unwrap();
        assert!((entropy_min_loss(&uniform).unwrap().item() - 4f64.ln()).abs() < 1e-12);
    }
}
