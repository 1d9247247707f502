//! Spatial operators on `[N, C, H, W]` values.

use super::ops::gemm;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOpts {
    /// Stride 1 with "same" zero padding for an odd kernel extent.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `oj*stride + kj - pad`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let hi = if self.w + self.pad > kj {
            (self.w + self.pad - kj).div_ceil(self.stride).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let area = self.out_area();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let first = lo * self.stride + kj - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (n, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[first + n * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters columns back into an image gradient.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let area = self.out_area();
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * area..(row + 1) * area];
                    let (lo, hi) = self.valid_cols(kj);
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        let line = &src[oi * self.wo + lo..oi * self.wo + hi];
                        let first = lo * self.stride + kj - self.pad;
                        for (n, &v) in line.iter().enumerate() {
                            dst[first + n * self.stride] += v;
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation. `self` is `[N,Cin,H,W]`, `weight` is
    /// `[Cout,Cin,kh,kw]`, `bias` is `[Cout]`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, opts: Conv2dOpts) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let (xs, ws) = (x.shape(), wt.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if opts.stride == 0 {
            return Err(invalid("conv2d: stride must be positive"));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * opts.padding < kh || w + 2 * opts.padding < kw {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * opts.padding - kh) / opts.stride + 1,
            wo: (w + 2 * opts.padding - kw) / opts.stride + 1,
            stride: opts.stride,
            pad: opts.padding,
        };
        let b = match bias {
            Some(bv) => {
                let bt = bv.value();
                if bt.shape() != [cout] {
                    return Err(Error::Shape {
                        op: "conv2d bias",
                        lhs: bt.shape().to_vec(),
                        rhs: vec![cout],
                    });
                }
                Some(bt)
            }
            None => None,
        };

        let (patch, area) = (geom.patch(), geom.out_area());
        let mut out = vec![0.0; n * cout * area];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { patch * area }];
        for s in 0..n {
            let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
            let dst = &mut out[s * cout * area..(s + 1) * cout * area];
            if let Some(bt) = &b {
                for (co, chunk) in dst.chunks_mut(area).enumerate() {
                    chunk.fill(bt.data()[co]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            let src = if geom.is_pointwise() {
                img
            } else {
                geom.im2col(img, &mut cols);
                &cols
            };
            gemm(cout, patch, area, wt.data(), false, src, false, beta, dst);
        }

        let out_shape = [n, cout, geom.ho, geom.wo];
        let mut parents = vec![*self, *weight];
        if let Some(bv) = bias {
            parents.push(*bv);
        }
        let has_bias = bias.is_some();
        let (xs, ws) = (xs.to_vec(), ws.to_vec());
        self.tape.push_op(
            "conv2d",
            Tensor::new(&out_shape, out)?,
            &parents,
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; wt.numel()];
                let mut gb = vec![0.0; cout];
                let mut cols = vec![0.0; patch * area];
                let mut gcols = vec![0.0; patch * area];
                for s in 0..n {
                    let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                    let gs = &gd[s * cout * area..(s + 1) * cout * area];
                    if has_bias {
                        for (co, chunk) in gs.chunks(area).enumerate() {
                            gb[co] += chunk.iter().sum::<f64>();
                        }
                    }
                    let gxs = &mut gx[s * cin * h * w..(s + 1) * cin * h * w];
                    if geom.is_pointwise() {
                        gemm(cout, area, patch, gs, false, img, true, 1.0, &mut gw);
                        gemm(patch, cout, area, wt.data(), true, gs, false, 0.0, gxs);
                    } else {
                        geom.im2col(img, &mut cols);
                        gemm(cout, area, patch, gs, false, &cols, true, 1.0, &mut gw);
                        gemm(patch, cout, area, wt.data(), true, gs, false, 0.0, &mut gcols);
                        geom.col2im(&gcols, gxs);
                    }
                }
                let mut grads = vec![
                    Tensor::new(&xs, gx).expect("shape"),
                    Tensor::new(&ws, gw).expect("shape"),
                ];
                if has_bias {
                    grads.push(Tensor::from_vec(gb));
                }
                grads
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(invalid(format!("upsample: bad input {s:?} / factor {factor}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / factor) * w + j / factor];
                }
            }
        }
        self.tape.push_op(
            "upsample_nearest",
            Tensor::new(&[s[0], s[1], ho, wo], out)?,
            &[*self],
            Box::new(move |g| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            dst[(i / factor) * w + j / factor] += src[i * wo + j];
                        }
                    }
                }
                vec![Tensor::new(&s, gx).expect("shape")]
            }),
        )
    }

    /// Non-overlapping max pooling with square window `size`.
    pub fn max_pool2d(&self, size: usize) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(invalid(format!("max_pool2d: {s:?} not divisible by {size}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + (i * size) * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let at = base + (i * size + di) * w + j * size + dj;
                            if x.data()[at] > x.data()[best] {
                                best = at;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        self.tape.push_op(
            "max_pool2d",
            Tensor::new(&[s[0], s[1], ho, wo], out)?,
            &[*self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&s);
                let d = gx.data_mut();
                for (&at, gv) in argmax.iter().zip(g.data()) {
                    d[at] += gv;
                }
                vec![gx]
            }),
        )
    }

    /// Maximum over the spatial extent: `[N,C,H,W] -> [N,C]`.
    pub fn global_max_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(invalid(format!("global_max_pool: bad input {s:?}")));
        }
        let area = s[2] * s[3];
        let argmax: Vec<usize> = x
            .data()
            .chunks(area)
            .enumerate()
            .map(|(p, plane)| {
                let mut best = 0;
                for (i, v) in plane.iter().enumerate() {
                    if *v > plane[best] {
                        best = i;
                    }
                }
                p * area + best
            })
            .collect();
        let out = argmax.iter().map(|&i| x.data()[i]).collect();
        self.tape.push_op(
            "global_max_pool",
            Tensor::new(&[s[0], s[1]], out)?,
            &[*self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&s);
                let d = gx.data_mut();
                for (&at, gv) in argmax.iter().zip(g.data()) {
                    d[at] += gv;
                }
                vec![gx]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::tape::Tape;
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for s in 0..n {
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[co];
                        for c in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x.get(&[s, c, ii as usize, jj as usize])
                                            * w.get(&[co, c, ki, kj]);
                                    }
                                }
                            }
                        }
                        out.set(&[s, co, i, j], acc);
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3), (1, 2, 3)] {
            let tape = Tape::new();
            let x = ramp(&[2, 3, 6, 6], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let out = tape
                .constant(x.clone())
                .unwrap()
                .conv2d(
                    &tape.constant(w.clone()).unwrap(),
                    Some(&tape.constant(Tensor::from_vec(b.clone())).unwrap()),
                    Conv2dOpts { stride, padding: pad },
                )
                .unwrap();
            let reference = naive_conv(&x, &w, &b, stride, pad);
            assert!(out.value().max_abs_diff(&reference) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap();
        let p = tape.constant(x).unwrap().max_pool2d(2).unwrap();
        assert_eq!(p.value().data(), &[5.0, 7.0]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let u = tape.constant(x).unwrap().upsample_nearest(2).unwrap();
        assert_eq!(u.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let w = tape.constant(Tensor::zeros(&[3, 1, 3, 3])).unwrap();
        assert!(x.conv2d(&w, None, Conv2dOpts::same(3)).is_err());
    }
}
