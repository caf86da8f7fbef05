//! Differentiable primitives recorded on a [`Graph`].

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `c = a·b (+ beta·c)` with explicit strides, row-major friendly.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: bounds checked above; c is a dense m×n row-major block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

impl ConvCfg {
    /// Stride 1 with padding that preserves spatial size for odd kernels.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn out_len(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - self.dilation * (k - 1) - 1) / self.stride + 1
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: ConvCfg,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn trivial(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (s, p, d) = (
        g.cfg.stride as isize,
        g.cfg.pad as isize,
        g.cfg.dilation as isize,
    );
    let ncols = g.cols();
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize * d;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize * d;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (s, p, d) = (
        g.cfg.stride as isize,
        g.cfg.pad as isize,
        g.cfg.dilation as isize,
    );
    let ncols = g.cols();
    for c in 0..g.c {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = oy as isize * s - p + ki as isize * d;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s - p + kj as isize * d;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape into `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.op(&[x], out, move |g, p, y| {
            let mut gx = g.clone();
            for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(p[0].data()).zip(y.data()) {
                *gv *= df(xv, yv);
            }
            vec![gx]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, |_, y| y)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |xv, _| sigmoid(xv))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |xv, _| 2.0 * xv)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f32) -> Var {
        self.unary(x, move |v| (v + eps).sqrt(), |_, y| 0.5 / y)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, move |v| v + s, |_, _| 1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.op(&[a, b], out, |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.op(&[a, b], out, |g, _, _| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.op(&[a, b], out, |g, p, _| {
            vec![
                g.zip_map(p[1], |gv, bv| gv * bv),
                g.zip_map(p[0], |gv, av| gv * av),
            ]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let old = self.value(x).shape().to_vec();
        let out = self.value(x).clone().reshape(shape);
        self.op(&[x], out, move |g, _, _| vec![g.clone().reshape(&old)])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.op(&[x], out, move |g, _, _| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis: `[.., K] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = xv.dim(-1);
        let mut shape = xv.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let data: Vec<f32> = xv.data().chunks(k).map(|c| c.iter().sum()).collect();
        let in_shape = xv.shape().to_vec();
        self.op(&[x], Tensor::new(&shape, data), move |g, _, _| {
            let mut gx = Vec::with_capacity(g.numel() * k);
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv, k));
            }
            vec![Tensor::new(&in_shape, gx)]
        })
    }

    pub fn mean_last(&mut self, x: Var) -> Var {
        let k = self.value(x).dim(-1) as f32;
        let s = self.sum_last(x);
        self.scale(s, 1.0 / k)
    }

    /// `[N, C, H, W] -> [N, C]` by summation over space.
    pub fn sum_spatial(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        self.sum_last(flat)
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.dim(0), av.dim(1));
        let m = bv.dim(1);
        assert_eq!(bv.dim(0), k, "matmul inner dimension");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), k, 1, bv.data(), m, 1, &mut out, 0.0);
        self.op(&[a, b], Tensor::new(&[n, m], out), move |g, p, _| {
            let mut ga = vec![0.0; n * k];
            gemm(n, m, k, g.data(), m, 1, p[1].data(), 1, m, &mut ga, 0.0);
            let mut gb = vec![0.0; k * m];
            gemm(k, n, m, p[0].data(), 1, k, g.data(), m, 1, &mut gb, 0.0);
            vec![Tensor::new(&[n, k], ga), Tensor::new(&[k, m], gb)]
        })
    }

    /// Affine map `x·wᵀ + b` with `x: [N, K]`, `w: [M, K]`, `b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = (xv.dim(0), xv.dim(1));
        let m = wv.dim(0);
        assert_eq!(wv.dim(1), k, "linear input width");
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        gemm(n, k, m, xv.data(), k, 1, wv.data(), 1, k, &mut out, 1.0);
        self.op(&[x, w, b], Tensor::new(&[n, m], out), move |g, p, _| {
            let mut gx = vec![0.0; n * k];
            gemm(n, m, k, g.data(), m, 1, p[1].data(), k, 1, &mut gx, 0.0);
            let mut gw = vec![0.0; m * k];
            gemm(m, n, k, g.data(), 1, m, p[0].data(), k, 1, &mut gw, 0.0);
            let mut gb = vec![0.0; m];
            for row in g.data().chunks(m) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                Tensor::new(&[n, k], gx),
                Tensor::new(&[m, k], gw),
                Tensor::new(&[m], gb),
            ]
        })
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, cfg: ConvCfg) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, o) = (xs[0], ws[0]);
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ho: cfg.out_len(xs[2], ws[2]),
            wo: cfg.out_len(xs[3], ws[3]),
            cfg,
        };
        let (rows, cols) = (geom.rows(), geom.cols());
        let in_sz = geom.c * geom.h * geom.w;
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o * cols];
        let mut col = if geom.trivial() {
            Vec::new()
        } else {
            vec![0.0; rows * cols]
        };
        for i in 0..n {
            let dst = &mut out[i * o * cols..(i + 1) * o * cols];
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bv[oc]);
            }
            let xin = &xv.data()[i * in_sz..(i + 1) * in_sz];
            let src: &[f32] = if geom.trivial() {
                xin
            } else {
                im2col(xin, &geom, &mut col);
                &col
            };
            gemm(o, rows, cols, wv.data(), rows, 1, src, cols, 1, dst, 1.0);
        }
        let out_shape = [n, o, geom.ho, geom.wo];
        self.op(&[x, w, b], Tensor::new(&out_shape, out), move |g, p, _| {
            let (xv, wv) = (p[0], p[1]);
            let mut gx = vec![0.0; n * in_sz];
            let mut gw = vec![0.0; o * rows];
            let mut gb = vec![0.0; o];
            let mut col = vec![0.0; rows * cols];
            let mut gcol = vec![0.0; rows * cols];
            for i in 0..n {
                let go = &g.data()[i * o * cols..(i + 1) * o * cols];
                for (oc, chunk) in go.chunks(cols).enumerate() {
                    gb[oc] += chunk.iter().sum::<f32>();
                }
                let xin = &xv.data()[i * in_sz..(i + 1) * in_sz];
                if geom.trivial() {
                    gemm(o, cols, rows, go, cols, 1, xin, 1, cols, &mut gw, 1.0);
                    let gxi = &mut gx[i * in_sz..(i + 1) * in_sz];
                    gemm(rows, o, cols, wv.data(), 1, rows, go, cols, 1, gxi, 1.0);
                } else {
                    im2col(xin, &geom, &mut col);
                    gemm(o, cols, rows, go, cols, 1, &col, 1, cols, &mut gw, 1.0);
                    gemm(
                        rows,
                        o,
                        cols,
                        wv.data(),
                        1,
                        rows,
                        go,
                        cols,
                        1,
                        &mut gcol,
                        0.0,
                    );
                    col2im(&gcol, &geom, &mut gx[i * in_sz..(i + 1) * in_sz]);
                }
            }
            vec![
                Tensor::new(xv.shape(), gx),
                Tensor::new(wv.shape(), gw),
                Tensor::new(&[o], gb),
            ]
        })
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn maxpool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; nc * ho * wo];
        let mut arg = vec![0usize; nc * ho * wo];
        let d = xv.data();
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = p * h * w;
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = d[best];
                    arg[o] = best;
                }
            }
        }
        self.op(
            &[x],
            Tensor::new(&[s[0], s[1], ho, wo], out),
            move |g, _, _| {
                let mut gx = Tensor::zeros(&s);
                let gd = gx.data_mut();
                for (o, &src) in arg.iter().enumerate() {
                    gd[src] += g.data()[o];
                }
                vec![gx]
            },
        )
    }

    /// 2×2 average pooling with stride 2.
    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; nc * ho * wo];
        for p in 0..nc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = p * h * w + 2 * oy * w + 2 * ox;
                    out[(p * ho + oy) * wo + ox] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        self.op(
            &[x],
            Tensor::new(&[s[0], s[1], ho, wo], out),
            move |g, _, _| {
                let mut gx = Tensor::zeros(&s);
                let gd = gx.data_mut();
                for p in 0..nc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = 0.25 * g.data()[(p * ho + oy) * wo + ox];
                            let base = p * h * w + 2 * oy * w + 2 * ox;
                            gd[base] += v;
                            gd[base + 1] += v;
                            gd[base + w] += v;
                            gd[base + w + 1] += v;
                        }
                    }
                }
                vec![gx]
            },
        )
    }

    /// Nearest-neighbour upsampling by 2 into an `h × w` grid (the extra
    /// row/column for odd targets repeats the last source cell).
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (nc, hi, wi) = (s[0] * s[1], s[2], s[3]);
        let src_of = move |oy: usize, ox: usize| ((oy / 2).min(hi - 1), (ox / 2).min(wi - 1));
        let d = xv.data();
        let mut out = vec![0.0; nc * h * w];
        for p in 0..nc {
            for oy in 0..h {
                for ox in 0..w {
                    let (sy, sx) = src_of(oy, ox);
                    out[(p * h + oy) * w + ox] = d[(p * hi + sy) * wi + sx];
                }
            }
        }
        self.op(
            &[x],
            Tensor::new(&[s[0], s[1], h, w], out),
            move |g, _, _| {
                let mut gx = Tensor::zeros(&s);
                let gd = gx.data_mut();
                for p in 0..nc {
                    for oy in 0..h {
                        for ox in 0..w {
                            let (sy, sx) = src_of(oy, ox);
                            gd[(p * hi + sy) * wi + sx] += g.data()[(p * h + oy) * w + ox];
                        }
                    }
                }
                vec![gx]
            },
        )
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let shapes: Vec<Vec<usize>> = xs.iter().map(|v| self.value(*v).shape().to_vec()).collect();
        let (outer, _, inner) = split_axis(&shapes[0], axis);
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        for s in &shapes {
            let (o, _, i) = split_axis(s, axis);
            assert!(o == outer && i == inner, "concat shape mismatch");
        }
        let total: usize = lens.iter().sum();
        let mut shape = shapes[0].clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in xs.iter().zip(&lens) {
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.op(xs, Tensor::new(&shape, out), move |g, _, _| {
            let mut grads: Vec<Vec<f32>> = lens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gv, &len) in grads.iter_mut().zip(&lens) {
                    gv.extend_from_slice(&gd[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s, d))
                .collect()
        })
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(start + len <= n, "slice out of range");
        let mut shape = in_shape.clone();
        shape[axis] = len;
        let d = xv.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        self.op(&[x], Tensor::new(&shape, out), move |g, _, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gd[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gx]
        })
    }

    /// Spatial crop of an NCHW tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let rows = self.slice(x, 2, top, h);
        self.slice(rows, 3, left, w)
    }

    /// Gathers rows of the leading axis (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let row = xv.numel() / in_shape[0];
        let mut shape = in_shape.clone();
        shape[0] = idx.len();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let idx = idx.to_vec();
        self.op(&[x], Tensor::new(&shape, out), move |g, _, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                for (a, b) in gd[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&g.data()[k * row..(k + 1) * row])
                {
                    *a += b;
                }
            }
            vec![gx]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = xv.dim(-1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let shape = xv.shape().to_vec();
        self.op(&[x], Tensor::new(&shape, out), move |g, _, y| {
            let mut gx = g.data().to_vec();
            for (grow, yrow) in gx.chunks_mut(k).zip(y.data().chunks(k)) {
                let gs: f32 = grow.iter().sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv -= yv.exp() * gs;
                }
            }
            vec![Tensor::new(&shape, gx)]
        })
    }

    /// Picks `x[i, idx[i]]` from a `[N, K]` tensor.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let (n, k) = (xv.dim(0), xv.dim(1));
        assert_eq!(idx.len(), n);
        let out: Vec<f32> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| xv.data()[i * k + j])
            .collect();
        let idx = idx.to_vec();
        self.op(&[x], Tensor::new(&[n], out), move |g, _, _| {
            let mut gx = Tensor::zeros(&[n, k]);
            for (i, &j) in idx.iter().enumerate() {
                gx.data_mut()[i * k + j] = g.data()[i];
            }
            vec![gx]
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Var {
        let out = self.value(x).zip_map(c, |a, b| a * b);
        let c = c.clone();
        self.op(&[x], out, move |g, _, _| vec![g.zip_map(&c, |a, b| a * b)])
    }

    /// Adds a `[M]` vector to every row of an `[N, M]` (or `[N, M, ...]` with
    /// `M` the last axis) tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let m = self.value(row).numel();
        let mut out = self.value(x).clone();
        assert_eq!(out.dim(-1), m, "add_row width");
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(m) {
            for (a, b) in chunk.iter_mut().zip(&r) {
                *a += b;
            }
        }
        let rshape = self.value(row).shape().to_vec();
        self.op(&[x, row], out, move |g, _, _| {
            let mut gr = vec![0.0; m];
            for chunk in g.data().chunks(m) {
                for (a, b) in gr.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            vec![g.clone(), Tensor::new(&rshape, gr)]
        })
    }

    /// Repeats an `[N, 1]` column into `[N, M]`.
    pub fn broadcast_cols(&mut self, x: Var, m: usize) -> Var {
        let xv = self.value(x);
        let n = xv.dim(0);
        assert_eq!(xv.numel(), n, "broadcast_cols expects [N, 1]");
        let mut out = Vec::with_capacity(n * m);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, m));
        }
        let in_shape = xv.shape().to_vec();
        self.op(&[x], Tensor::new(&[n, m], out), move |g, _, _| {
            let d: Vec<f32> = g.data().chunks(m).map(|c| c.iter().sum()).collect();
            vec![Tensor::new(&in_shape, d)]
        })
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f32) -> f32 {
    if v > 20.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}
