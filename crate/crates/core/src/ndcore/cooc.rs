use super::ops::{gemm, permute_tensor};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Valid source range along an axis of length `n` for offset `d`.
fn valid(n: usize, d: i32) -> Option<(usize, usize)> {
    let (n, d) = (n as i64, i64::from(d));
    let lo = (-d).max(0);
    let hi = (n - d).min(n);
    (hi > lo).then_some((lo as usize, hi as usize))
}

struct Layout {
    n: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl Layout {
    fn m(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Copies `src[l, n, i+p, j+q]` to `dst[l, n, i, j]` over valid positions
    /// (`forward`), or scatters back adding (`!forward`). Both are `[K, N*H*W]`.
    fn shift(&self, src: &[f64], dst: &mut [f64], (p, q): (i32, i32), rows: (usize, usize), cols: (usize, usize), forward: bool) {
        let plane = self.h * self.w;
        for l in 0..self.k {
            for n in 0..self.n {
                let base = (l * self.n + n) * plane;
                for i in rows.0..rows.1 {
                    let si = (i as i64 + i64::from(p)) as usize;
                    let a = base + i * self.w;
                    let b = base + si * self.w;
                    for j in cols.0..cols.1 {
                        let sj = (j as i64 + i64::from(q)) as usize;
                        if forward {
                            dst[a + j] = src[b + sj];
                        } else {
                            dst[b + sj] += src[a + j];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// For `[N,K,H,W]` maps `self` (a) and `other` (b), returns the `[D,K,K]`
    /// stack of
    /// `P_d[k,l] = (1/|V_d|) sum_{(n,i,j) in V_d} a[n,k,i,j] * b[n,l,i+p,j+q]`,
    /// where `V_d` holds the positions whose partner `(i+p, j+q)` lies inside
    /// the map.
    pub fn displaced_cooccurrence(&self, other: &Var<'t>, offsets: &[(i32, i32)]) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let s = a.shape().to_vec();
        if s.len() != 4 || b.shape() != s.as_slice() {
            return Err(Error::Shape {
                op: "displaced_cooccurrence",
                lhs: s,
                rhs: b.shape().to_vec(),
            });
        }
        if offsets.is_empty() || s[0] == 0 {
            return Err(invalid("displaced_cooccurrence: empty batch or offset list"));
        }
        let lay = Layout {
            n: s[0],
            k: s[1],
            h: s[2],
            w: s[3],
        };
        let (k, m) = (lay.k, lay.m());
        let mut ranges = Vec::with_capacity(offsets.len());
        for &(p, q) in offsets {
            match (valid(lay.h, p), valid(lay.w, q)) {
                (Some(r), Some(c)) => ranges.push((r, c, (lay.n * (r.1 - r.0) * (c.1 - c.0)) as f64)),
                _ => {
                    return Err(invalid(format!(
                        "offset ({p},{q}) leaves no valid positions on a {}x{} map",
                        lay.h, lay.w
                    )))
                }
            }
        }
        // [K, N*H*W] layouts
        let ac = permute_tensor(&a, &[1, 0, 2, 3]).into_data();
        let bc = permute_tensor(&b, &[1, 0, 2, 3]).into_data();
        let mut out = vec![0.0; offsets.len() * k * k];
        let mut shifted = vec![0.0; k * m];
        for (d, &off) in offsets.iter().enumerate() {
            let (rows, cols, count) = ranges[d];
            shifted.fill(0.0);
            lay.shift(&bc, &mut shifted, off, rows, cols, true);
            let block = &mut out[d * k * k..(d + 1) * k * k];
            gemm(k, m, k, &ac, false, &shifted, true, 0.0, block);
            block.iter_mut().for_each(|v| *v /= count);
        }
        let offsets = offsets.to_vec();
        self.tape.push_op(
            "displaced_cooccurrence",
            Tensor::new(&[offsets.len(), k, k], out)?,
            &[*self, *other],
            Box::new(move |g| {
                let mut ga = vec![0.0; k * m];
                let mut gb = vec![0.0; k * m];
                let mut shifted = vec![0.0; k * m];
                let mut gd = vec![0.0; k * k];
                for (d, &off) in offsets.iter().enumerate() {
                    let (rows, cols, count) = ranges[d];
                    gd.copy_from_slice(&g.data()[d * k * k..(d + 1) * k * k]);
                    gd.iter_mut().for_each(|v| *v /= count);
                    shifted.fill(0.0);
                    lay.shift(&bc, &mut shifted, off, rows, cols, true);
                    gemm(k, k, m, &gd, false, &shifted, false, 1.0, &mut ga);
                    gemm(k, k, m, &gd, true, &ac, false, 0.0, &mut shifted);
                    lay.shift(&shifted, &mut gb, off, rows, cols, false);
                }
                let back = |v: Vec<f64>| {
                    let t = Tensor::new(&[lay.k, lay.n, lay.h, lay.w], v).expect("shape");
                    permute_tensor(&t, &[1, 0, 2, 3])
                };
                vec![back(ga), back(gb)]
            }),
        )
    }
}
