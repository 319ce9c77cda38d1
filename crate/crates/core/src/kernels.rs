//! Forward kernels and their adjoints.
//!
//! Every reduction accumulates in a fixed sequential order so that results
//! are bit-identical from run to run. Matrix products, convolutions, softmax,
//! layer normalization and axis sums accumulate in `f64` whatever the storage
//! type and round once on store. Images are channels-last (`h×w×c`),
//! optionally with leading batch axes.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{strides, Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn split_last2(shape: &[usize]) -> Result<(&[usize], usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("expected at least 2 dims, got {:?}", shape));
    }
    let n = shape.len();
    Ok((&shape[..n - 2], shape[n - 2], shape[n - 1]))
}

/// Batched product over the last two axes: `(…,m,p) × (…,p,q) → (…,m,q)`.
///
/// Leading axes must match exactly, or `b` may be a plain matrix shared by
/// every batch entry.
pub fn matmul_last2<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (lead_a, m, p) = split_last2(a.shape())?;
    let (lead_b, p2, q) = split_last2(b.shape())?;
    if p != p2 || !(lead_a == lead_b || lead_b.is_empty()) {
        return Err(shape_err!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let batch: usize = lead_a.iter().product();
    let shared_b = lead_b.is_empty() && !lead_a.is_empty();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); batch * m * q];
    let mut acc = vec![0.0f64; q];
    for bi in 0..batch {
        let a0 = bi * m * p;
        let b0 = if shared_b { 0 } else { bi * p * q };
        let c0 = bi * m * q;
        for i in 0..m {
            acc.fill(0.0);
            for k in 0..p {
                let aik = ad[a0 + i * p + k].f64();
                let brow = &bd[b0 + k * q..b0 + (k + 1) * q];
                for (c, &bv) in acc.iter_mut().zip(brow) {
                    *c += aik * bv.f64();
                }
            }
            for (c, &v) in out[c0 + i * q..c0 + (i + 1) * q].iter_mut().zip(&acc) {
                *c = T::lit(v);
            }
        }
    }
    let mut shape = lead_a.to_vec();
    shape.extend([m, q]);
    Tensor::new(&shape, out)
}

/// MAC count of [`matmul_last2`].
pub fn matmul_macs(a: &[usize], b: &[usize]) -> u64 {
    let n = a.len();
    let batch: usize = a[..n - 2].iter().product();
    (batch * a[n - 2] * a[n - 1] * b[b.len() - 1]) as u64
}

pub fn transpose_last2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.ndim();
    if n < 2 {
        return Err(shape_err!("transpose needs 2 dims, got {:?}", x.shape()));
    }
    let mut axes: Vec<usize> = (0..n).collect();
    axes.swap(n - 2, n - 1);
    permute(x, &axes)
}

/// General axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let n = x.ndim();
    let mut seen = vec![false; n];
    if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
        return Err(shape_err!("invalid permutation {:?} for {:?}", axes, x.shape()));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let data = x.data();
    let mut idx = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(data[src]);
        // odometer increment over the output index
        for ax in (0..n).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Max-subtracted softmax over the last axis.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.dim(-1);
    let mut out = x.data().to_vec();
    let mut ex = vec![0.0f64; c];
    for row in out.chunks_mut(c) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
        let mut s = 0.0;
        for (e, &v) in ex.iter_mut().zip(row.iter()) {
            *e = (v.f64() - mx).exp();
            s += *e;
        }
        for (v, &e) in row.iter_mut().zip(&ex) {
            *v = T::lit(e / s);
        }
    }
    Tensor::new(x.shape(), out)
}

/// Adjoint of softmax given its output `y` and upstream gradient `g`.
pub fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let c = y.dim(-1);
    let mut out = vec![T::zero(); y.len()];
    for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
        let mut dot = T::zero();
        for (&a, &b) in yr.iter().zip(gr) {
            dot += a * b;
        }
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps `ceil(h/stride)` rows.
    Same,
    Valid,
}

/// Geometry of a 2-D cross-correlation over channels-last input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        groups: usize,
        pad: Padding,
    ) -> Result<Self> {
        if x.len() < 3 || w.len() != 4 {
            return Err(shape_err!("conv2d input {:?} with kernel {:?}", x, w));
        }
        let n = x.len();
        let (h, wd, cin) = (x[n - 3], x[n - 2], x[n - 1]);
        let (kh, kw, cin_g, cout) = (w[0], w[1], w[2], w[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err!(
                "conv2d channels: input {:?}, kernel {:?}, groups {}",
                x,
                w,
                groups
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (oh, ow, pad_top, pad_left) = match pad {
            Padding::Valid => {
                if h < kh || wd < kw {
                    return Err(shape_err!("valid conv kernel {:?} larger than {:?}", w, x));
                }
                ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = wd.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(wd);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(Self {
            batch: x[..n - 3].iter().product(),
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            groups,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.oh * self.ow * self.kh * self.kw * (self.cin / self.groups) * self.cout)
            as u64
    }

    fn out_shape(&self, x: &[usize]) -> Vec<usize> {
        let mut s = x[..x.len() - 3].to_vec();
        s.extend([self.oh, self.ow, self.cout]);
        s
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation with kernel layout `kh×kw×(cin/groups)×cout`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    groups: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, groups, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(shape_err!("conv bias {:?} for {} outputs", b.shape(), g.cout));
        }
    }
    let (cin_g, cout_g) = (g.cin / groups, g.cout / groups);
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); g.batch * g.oh * g.ow * g.cout];
    let mut opx = vec![0.0f64; g.cout];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                match bias {
                    Some(bias) => opx.iter_mut().zip(bias.data()).for_each(|(o, &v)| *o = v.f64()),
                    None => opx.fill(0.0),
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let ipx = &xd[i0..i0 + g.cin];
                        let tap = (ky * g.kw + kx) * cin_g;
                        for gi in 0..groups {
                            let oslice = &mut opx[gi * cout_g..(gi + 1) * cout_g];
                            for ci in 0..cin_g {
                                let v = ipx[gi * cin_g + ci].f64();
                                let w0 = (tap + ci) * g.cout + gi * cout_g;
                                for (o, &wv) in oslice.iter_mut().zip(&wd[w0..w0 + cout_g]) {
                                    *o += v * wv.f64();
                                }
                            }
                        }
                    }
                }
                for (o, &v) in out[o0..o0 + g.cout].iter_mut().zip(&opx) {
                    *o = T::lit(v);
                }
            }
        }
    }
    Tensor::new(&g.out_shape(x.shape()), out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Real>(
    x_shape: &[usize],
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    groups: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x_shape, w.shape(), stride, groups, pad)?;
    let (cin_g, cout_g) = (g.cin / groups, g.cout / groups);
    let (wd, gd) = (w.data(), gy.data());
    let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.cin];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let gpx = &gd[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let tap = (ky * g.kw + kx) * cin_g;
                        for gi in 0..groups {
                            let gs = &gpx[gi * cout_g..(gi + 1) * cout_g];
                            for ci in 0..cin_g {
                                let w0 = (tap + ci) * g.cout + gi * cout_g;
                                let mut acc = T::zero();
                                for (&gv, &wv) in gs.iter().zip(&wd[w0..w0 + cout_g]) {
                                    acc += gv * wv;
                                }
                                dx[i0 + gi * cin_g + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, dx)
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_backward_weight<T: Real>(
    x: &Tensor<T>,
    w_shape: &[usize],
    gy: &Tensor<T>,
    stride: usize,
    groups: usize,
    pad: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), w_shape, stride, groups, pad)?;
    let (cin_g, cout_g) = (g.cin / groups, g.cout / groups);
    let (xd, gd) = (x.data(), gy.data());
    let mut dw = vec![T::zero(); g.kh * g.kw * cin_g * g.cout];
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let gpx = &gd[o0..o0 + g.cout];
                for (d, &gv) in db.iter_mut().zip(gpx) {
                    *d += gv;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let tap = (ky * g.kw + kx) * cin_g;
                        for gi in 0..groups {
                            let gs = &gpx[gi * cout_g..(gi + 1) * cout_g];
                            for ci in 0..cin_g {
                                let v = xd[i0 + gi * cin_g + ci];
                                let w0 = (tap + ci) * g.cout + gi * cout_g;
                                for (d, &gv) in dw[w0..w0 + cout_g].iter_mut().zip(gs) {
                                    *d += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(w_shape, dw)?, Tensor::new(&[g.cout], db)?))
}

/// Depth-to-space: `h×w×(r²c) → rh×rw×c`, input channel `c·r² + i·r + j`
/// landing at row offset `i`, column offset `j`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c_in) = hwc(x)?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(shape_err!("pixel_shuffle: {} channels not divisible by {}²", c_in, r));
    }
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let src = (y * w + xx) * c_in + ch * r * r + i * r + j;
                        let dst = ((y * r + i) * ow + xx * r + j) * c + ch;
                        out[dst] = xd[src];
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = hwc(x)?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(shape_err!("pixel_unshuffle: {}x{} not divisible by {}", oh, ow, r));
    }
    let (h, w, c_in) = (oh / r, ow / r, c * r * r);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let dst = (y * w + xx) * c_in + ch * r * r + i * r + j;
                        let src = ((y * r + i) * ow + xx * r + j) * c + ch;
                        out[dst] = xd[src];
                    }
                }
            }
        }
    }
    Tensor::new(&[h, w, c_in], out)
}

fn hwc<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(shape_err!("expected h×w×c, got {:?}", x.shape())),
    }
}

/// Half-resolution bilinear resize with half-pixel centers, which for an
/// exact factor of two is the mean of each 2×2 block.
pub fn downsample_half<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("downsample_half needs even extents, got {}x{}", h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let at = |dy: usize, dx: usize| xd[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                out[(y * ow + xx) * c + ch] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub fn downsample_half_backward<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (oh, ow, c) = hwc(g)?;
    let (h, w) = (oh * 2, ow * 2);
    let gd = g.data();
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                out[(y * w + xx) * c + ch] = gd[((y / 2) * ow + xx / 2) * c + ch] * quarter;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// `h×w×d → n×k²×d` with blocks and in-block pixels both row-major.
pub fn block_partition<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, d) = hwc(x)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err!("block_partition: {}x{} not divisible by k={}", h, w, k));
    }
    let (gh, gw) = (h / k, w / k);
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for by in 0..gh {
        for bx in 0..gw {
            for py in 0..k {
                let row = ((by * k + py) * w + bx * k) * d;
                out.extend_from_slice(&xd[row..row + k * d]);
            }
        }
    }
    Tensor::new(&[gh * gw, k * k, d], out)
}

/// Inverse of [`block_partition`].
pub fn block_merge<T: Real>(x: &Tensor<T>, k: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let d = x.dim(-1);
    if k == 0 || h % k != 0 || w % k != 0 || x.shape() != [(h / k) * (w / k), k * k, d] {
        return Err(shape_err!("block_merge {:?} into {}x{} with k={}", x.shape(), h, w, k));
    }
    let (gh, gw) = (h / k, w / k);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for by in 0..gh {
        for bx in 0..gw {
            let b = by * gw + bx;
            for py in 0..k {
                let src = (b * k * k + py * k) * d;
                let dst = ((by * k + py) * w + bx * k) * d;
                out[dst..dst + k * d].copy_from_slice(&xd[src..src + k * d]);
            }
        }
    }
    Tensor::new(&[h, w, d], out)
}

fn twiddles(n: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    (0..n)
        .map(|j| {
            let th = sign * 2.0 * PI * j as f64 / n as f64;
            (th.cos(), th.sin())
        })
        .unzip()
}

/// Separable complex 2-D DFT over the spatial axes of `h×w×c` planes with
/// kernel `exp(sign·2πi·(uy/h + vx/w))`. Unnormalized; both passes run in
/// `f64`.
fn dft2_complex<T: Real>(
    re: &[T],
    im: &[T],
    h: usize,
    w: usize,
    c: usize,
    sign: f64,
) -> (Vec<T>, Vec<T>) {
    let (cw, sw) = twiddles(w, sign);
    let (ch, sh) = twiddles(h, sign);
    let n = h * w * c;
    let (mut r1, mut i1) = (vec![0.0f64; n], vec![0.0f64; n]);
    // rows
    for y in 0..h {
        for v in 0..w {
            for x in 0..w {
                let t = (v * x) % w;
                let (cs, sn) = (cw[t], sw[t]);
                for ch_ in 0..c {
                    let s = (y * w + x) * c + ch_;
                    let d = (y * w + v) * c + ch_;
                    let (a, b) = (re[s].f64(), im[s].f64());
                    r1[d] += a * cs - b * sn;
                    i1[d] += a * sn + b * cs;
                }
            }
        }
    }
    let (mut r2, mut i2) = (vec![0.0f64; n], vec![0.0f64; n]);
    // columns
    for u in 0..h {
        for y in 0..h {
            let t = (u * y) % h;
            let (cs, sn) = (ch[t], sh[t]);
            for v in 0..w {
                for ch_ in 0..c {
                    let s = (y * w + v) * c + ch_;
                    let d = (u * w + v) * c + ch_;
                    r2[d] += r1[s] * cs - i1[s] * sn;
                    i2[d] += r1[s] * sn + i1[s] * cs;
                }
            }
        }
    }
    (r2.into_iter().map(T::lit).collect(), i2.into_iter().map(T::lit).collect())
}

/// Forward 2-D DFT per channel of a real `h×w×c` image. The result has
/// shape `h×w×c×2` holding (real, imaginary) pairs.
pub fn dft2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    let zeros = vec![T::zero(); x.len()];
    let (re, im) = dft2_complex(x.data(), &zeros, h, w, c, -1.0);
    Ok(interleave(&re, &im, &[h, w, c, 2]))
}

/// Adjoint of [`dft2`]: the real part of the unnormalized inverse transform
/// of the incoming complex gradient.
pub fn dft2_backward<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c, 2] = *g.shape() else {
        return Err(shape_err!("dft2 gradient must be h×w×c×2, got {:?}", g.shape()));
    };
    let re: Vec<T> = g.data().iter().step_by(2).copied().collect();
    let im: Vec<T> = g.data().iter().skip(1).step_by(2).copied().collect();
    let (out, _) = dft2_complex(&re, &im, h, w, c, 1.0);
    Tensor::new(&[h, w, c], out)
}

fn interleave<T: Real>(re: &[T], im: &[T], shape: &[usize]) -> Tensor<T> {
    let data = re.iter().zip(im).flat_map(|(&r, &i)| [r, i]).collect();
    Tensor::new(shape, data).expect("interleave shape")
}

/// Layer normalization over the last axis with affine weight and bias.
/// Returns the output and the per-row `(normalized, 1/σ)` needed by the
/// backward pass.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let c = x.dim(-1);
    if weight.shape() != [c] || bias.shape() != [c] {
        return Err(shape_err!(
            "layer_norm over {} channels with weight {:?}, bias {:?}",
            c,
            weight.shape(),
            bias.shape()
        ));
    }
    let inv_c = 1.0 / c as f64;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / c);
    for ((row, xh), o) in x.data().chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
        let mut mean = 0.0;
        for &v in row {
            mean += v.f64();
        }
        mean *= inv_c;
        let mut var = 0.0;
        for &v in row {
            var += (v.f64() - mean) * (v.f64() - mean);
        }
        var *= inv_c;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(T::lit(r));
        for i in 0..c {
            let xn = (row[i].f64() - mean) * r;
            xh[i] = T::lit(xn);
            o[i] = T::lit(xn * weight.data()[i].f64() + bias.data()[i].f64());
        }
    }
    Ok((Tensor::new(x.shape(), out)?, Tensor::new(x.shape(), xhat)?, rstd))
}

/// Returns `(dx, dweight, dbias)`.
pub fn layer_norm_backward<T: Real>(
    xhat: &Tensor<T>,
    rstd: &[T],
    weight: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = xhat.dim(-1);
    let inv_c = T::one() / T::lit(c as f64);
    let wd = weight.data();
    let mut dx = vec![T::zero(); xhat.len()];
    let mut dw = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for (((xh, gr), d), &r) in
        xhat.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)).zip(rstd)
    {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for i in 0..c {
            let dxh = gr[i] * wd[i];
            m1 += dxh;
            m2 += dxh * xh[i];
            dw[i] += gr[i] * xh[i];
            db[i] += gr[i];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for i in 0..c {
            d[i] = r * (gr[i] * wd[i] - m1 - xh[i] * m2);
        }
    }
    Ok((Tensor::new(xhat.shape(), dx)?, Tensor::new(&[c], dw)?, Tensor::new(&[c], db)?))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(v: T) -> T {
    let (k, c) = (T::lit(GELU_K), T::lit(GELU_C));
    T::lit(0.5) * v * (T::one() + (k * (v + c * v * v * v)).tanh())
}

pub fn gelu_grad<T: Real>(v: T) -> T {
    let (k, c) = (T::lit(GELU_K), T::lit(GELU_C));
    let t = (k * (v + c * v * v * v)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * v * v)
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { s[i - off] })
        .collect()
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let (sa, sb) = (broadcast_strides(a.shape(), &out_shape), broadcast_strides(b.shape(), &out_shape));
    let total: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let n = out_shape.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        out.push(f(ad[ia], bd[ib]));
        for ax in (0..n).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            ia -= sa[ax] * out_shape[ax];
            ib -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

/// Sums a broadcast gradient back down to `shape`.
pub fn reduce_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let out_shape = g.shape().to_vec();
    let st = broadcast_strides(shape, &out_shape);
    let n = out_shape.len();
    let mut out = vec![0.0f64; shape.iter().product()];
    let mut idx = vec![0usize; n];
    let mut io = 0usize;
    for &v in g.data() {
        out[io] += v.f64();
        for ax in (0..n).rev() {
            idx[ax] += 1;
            io += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            io -= st[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out.into_iter().map(T::lit).collect())
}

/// Mean over the listed axes, keeping them as extent 1.
pub fn mean_axes<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut shape = x.shape().to_vec();
    let mut count = 1usize;
    for &a in axes {
        if a >= shape.len() {
            return Err(shape_err!("axis {} out of range for {:?}", a, x.shape()));
        }
        count *= shape[a];
        shape[a] = 1;
    }
    let s = reduce_to_shape(x, &shape)?;
    Ok(s.scale(T::one() / T::lit(count as f64)))
}

/// Reflect-pads the bottom and right edges of an `h×w×c` image
/// (edge sample not repeated).
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    if pad_h >= h || pad_w >= w {
        return Err(shape_err!("reflect pad ({}, {}) needs extents above {}x{}", pad_h, pad_w, h, w));
    }
    let (oh, ow) = (h + pad_h, w + pad_w);
    let refl = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let xd = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = refl(y, h);
        for xx in 0..ow {
            let s = (sy * w + refl(xx, w)) * c;
            out.extend_from_slice(&xd[s..s + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Top-left `h×w` window of an image.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    crop_at(x, 0, 0, h, w)
}

pub fn crop_at<T: Real>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ih, iw, c) = hwc(x)?;
    if y0 + h > ih || x0 + w > iw {
        return Err(shape_err!("crop {}x{} at ({}, {}) outside {}x{}", h, w, y0, x0, ih, iw));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let s = ((y0 + y) * iw + x0) * c;
        out.extend_from_slice(&xd[s..s + w * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// Writes `tile` into `dst` with its top-left corner at `(y0, x0)`.
pub fn paste<T: Real>(dst: &mut Tensor<T>, tile: &Tensor<T>, y0: usize, x0: usize) -> Result<()> {
    let (h, w, c) = hwc(tile)?;
    let (dh, dw, dc) = hwc(dst)?;
    if c != dc || y0 + h > dh || x0 + w > dw {
        return Err(shape_err!("paste {:?} at ({}, {}) into {:?}", tile.shape(), y0, x0, dst.shape()));
    }
    let td = tile.data().to_vec();
    let dd = dst.data_mut();
    for y in 0..h {
        let s = y * w * c;
        let d = ((y0 + y) * dw + x0) * c;
        dd[d..d + w * c].copy_from_slice(&td[s..s + w * c]);
    }
    Ok(())
}

/// Slice `[start, start+len)` of the last axis.
pub fn slice_last<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = x.dim(-1);
    if start + len > c || len == 0 {
        return Err(shape_err!("slice [{}, {}) of last axis {}", start, start + len, c));
    }
    let mut out = Vec::with_capacity(x.len() / c * len);
    for row in x.data().chunks(c) {
        out.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(&shape, out)
}

/// Concatenation along the last axis.
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
    let lead = &first.shape()[..first.ndim() - 1];
    for p in parts {
        if &p.shape()[..p.ndim() - 1] != lead {
            return Err(shape_err!("concat {:?} with {:?}", first.shape(), p.shape()));
        }
    }
    let rows: usize = lead.iter().product();
    let total_c: usize = parts.iter().map(|p| p.dim(-1)).sum();
    let mut out = Vec::with_capacity(rows * total_c);
    for r in 0..rows {
        for p in parts {
            let c = p.dim(-1);
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total_c);
    Tensor::new(&shape, out)
}
