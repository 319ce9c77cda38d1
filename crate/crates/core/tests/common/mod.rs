//! Scalar-loop oracles shared by the integration tests. Everything here works
//! on plain `f64` slices so it shares no code path with the library kernels
//! beyond reading weights.

#![allow(dead_code)]

use concertormer::concerto::{Branch, CsaConfig, CsaMode};
use concertormer::params::{rescale_to_fan_in, Init, Params, WeightStore};
use concertormer::zoo::{csa_prototype, ProjWeights};
use concertormer::{kernels, Dist, Prng, Real, Tape, Tensor};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for l in 0..self.cols {
                    s += self.at(i, l) * other.at(l, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.at(i, j));
            }
        }
        out
    }

    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for r in out.data.chunks_mut(self.cols) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in r.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            r.iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    pub fn block_diag(blocks: &[Mat]) -> Mat {
        let rows = blocks.iter().map(|b| b.rows).sum();
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let (mut r0, mut c0) = (0, 0);
        for b in blocks {
            for i in 0..b.rows {
                for j in 0..b.cols {
                    out.set(r0 + i, c0 + j, b.at(i, j));
                }
            }
            r0 += b.rows;
            c0 += b.cols;
        }
        out
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

/// `x·W + b` per pixel with a `1×1×cin×cout` kernel.
pub fn conv1x1(x: &[f64], cin: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let cout = w.dim(-1);
    assert_eq!(w.shape(), [1, 1, cin, cout]);
    let mut out = Vec::with_capacity(x.len() / cin * cout);
    for px in x.chunks(cin) {
        for o in 0..cout {
            let mut s = b.data()[o];
            for (c, &v) in px.iter().enumerate() {
                s += v * w.data()[c * cout + o];
            }
            out.push(s);
        }
    }
    out
}

pub fn layer_norm(x: &[f64], c: usize, g: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks(c) {
        let mean = px.iter().sum::<f64>() / c as f64;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + kernels::LAYER_NORM_EPS).sqrt();
        for (i, &v) in px.iter().enumerate() {
            out.push((v - mean) * r * g.data()[i] + b.data()[i]);
        }
    }
    out
}

/// Direct grouped cross-correlation, six nested loops. With `same` the
/// output keeps `ceil(extent/stride)` samples and the zero padding is split
/// with the smaller half on top and left; otherwise no padding.
pub fn conv2d_direct(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    kern: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    stride: usize,
    groups: usize,
    same: bool,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow, pt, pl) = if same {
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..cout {
                let g = o / cout_g;
                let mut s = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..cin_g {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(iy as usize * w + ix as usize) * cin + g * cin_g + ci];
                            s += xv * kern[((ky * kw + kx) * cin_g + ci) * cout + o];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + o] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Naive unnormalised 2-D DFT of one channel: `(re, im)` per bin.
pub fn dft2_naive(x: &[f64], h: usize, w: usize, c: usize, ch: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let a = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    let s = x[(y * w + xx) * c + ch];
                    re += s * a.cos();
                    im += s * a.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

/// Pixel index of in-block position `p` of block `i` (row-major blocks and
/// row-major positions inside a block).
pub fn pixel_of(i: usize, p: usize, w: usize, k: usize) -> usize {
    let gw = w / k;
    let (by, bx) = (i / gw, i % gw);
    (by * k + p / k) * w + bx * k + p % k
}

/// Prototype concerto attention straight from its definition: for every
/// output pixel, loop over the pixels of its block and over all blocks for
/// the mean.
pub fn prototype_triple_loop(x: &[f64], h: usize, w: usize, d: usize, k: usize, alpha: f64, beta: f64, p: &ProjWeights<f64>) -> Vec<f64> {
    let proj = |wt: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; h * w * d];
        for px in 0..h * w {
            for o in 0..d {
                let mut s = b.data()[o];
                for c in 0..d {
                    s += x[px * d + c] * wt.at(&[c, o]);
                }
                out[px * d + o] = s;
            }
        }
        out
    };
    let (q, kk, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
    let (n, pp) = ((h / k) * (w / k), k * k);
    let dot = |i: usize, a: usize, b: usize| -> f64 {
        let (pa, pb) = (pixel_of(i, a, w, k), pixel_of(i, b, w, k));
        (0..d).map(|c| q[pa * d + c] * kk[pb * d + c]).sum()
    };
    let mean = |a: usize, b: usize| -> f64 { (0..n).map(|i| dot(i, a, b)).sum::<f64>() / n as f64 };
    let mut out = vec![0.0; h * w * d];
    for i in 0..n {
        for a in 0..pp {
            let rl: Vec<f64> = (0..pp).map(|b| (dot(i, a, b) - mean(a, b)) / alpha).collect();
            let cl: Vec<f64> = (0..pp).map(|b| mean(a, b) / beta).collect();
            let soft = |l: &[f64]| -> Vec<f64> {
                let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            };
            let (r, c) = (soft(&rl), soft(&cl));
            let pa = pixel_of(i, a, w, k);
            for ch in 0..d {
                out[pa * d + ch] = (0..pp).map(|b| (r[b] + c[b]) * v[pixel_of(i, b, w, k) * d + ch]).sum();
            }
        }
    }
    out
}

/// Reference options for [`csa_oracle`].
#[derive(Debug, Clone, Copy)]
pub struct OracleMode {
    /// Subtract the across-block mean from Ripieno logits.
    pub centre: bool,
    /// Read `alpha`/`beta` from the store; otherwise divide by one.
    pub scalars: bool,
}

impl OracleMode {
    pub const SPLIT: OracleMode = OracleMode { centre: true, scalars: true };
    pub const MEAN_FREE: OracleMode = OracleMode { centre: false, scalars: false };
}

pub struct OracleOut {
    /// Per branch, values in `n×P×t×e` order.
    pub branches: Vec<Vec<f64>>,
    /// Module output `h×w×2d`.
    pub output: Vec<f64>,
}

/// Concerto attention by its block-diagonal definition. For each head the
/// Ripieno operator is `diag(R_1, …, R_n)` and the Concertino operator is
/// `diag(C, …, C)`; both are materialised and applied to the stacked values.
/// Concertino heads are single channels (spatial) or single pixels
/// (channel), with the logits summed over blocks.
pub fn csa_oracle(
    cfg: &CsaConfig,
    store: &WeightStore<f64>,
    x: &[f64],
    y: Option<&[f64]>,
    h: usize,
    w: usize,
    mode: OracleMode,
) -> OracleOut {
    let g = |name: &str| store.get(name).unwrap();
    let (d, dd, k) = (cfg.dim, cfg.internal(), cfg.k);
    let (n, pp, bw, t, e) = ((h / k) * (w / k), k * k, cfg.branch_width(), cfg.heads, cfg.head_width());
    let q = conv1x1(x, d, g("q.w"), g("q.b"));
    let kv = match (y, cfg.cross) {
        (Some(y), Some(dy)) => conv1x1(&layer_norm(y, dy, g("norm_y.w"), g("norm_y.b")), dy, g("kv.w"), g("kv.b")),
        _ => conv1x1(x, d, g("kv.w"), g("kv.b")),
    };
    // Element (i, p, head, j) of branch `b` in Q, K or V.
    let qe = |b: usize, i: usize, p: usize, hd: usize, j: usize| q[pixel_of(i, p, w, k) * dd + b * bw + hd * e + j];
    let ke = |b: usize, i: usize, p: usize, hd: usize, j: usize| kv[pixel_of(i, p, w, k) * 2 * dd + b * bw + hd * e + j];
    let ve = |b: usize, i: usize, p: usize, hd: usize, j: usize| {
        kv[pixel_of(i, p, w, k) * 2 * dd + dd + b * bw + hd * e + j]
    };
    let scalar = |b: Branch, s: &str| if mode.scalars { g(&format!("{}.{s}", b.tag())).data()[0] } else { 1.0 };
    let idx = |i: usize, p: usize, hd: usize, j: usize| ((i * pp + p) * t + hd) * e + j;

    let mut branches = Vec::new();
    for (bi, &br) in cfg.branches.iter().enumerate() {
        let mut out = vec![0.0; n * pp * t * e];
        for hd in 0..t {
            match br {
                Branch::SpatialRipieno => {
                    let alpha = scalar(br, "alpha");
                    let s: Vec<Mat> = (0..n)
                        .map(|i| {
                            let mut m = Mat::zeros(pp, pp);
                            for a in 0..pp {
                                for b in 0..pp {
                                    m.set(a, b, (0..e).map(|j| qe(bi, i, a, hd, j) * ke(bi, i, b, hd, j)).sum());
                                }
                            }
                            m
                        })
                        .collect();
                    let r = Mat::block_diag(&centred(&s, mode.centre, alpha));
                    let mut v = Mat::zeros(n * pp, e);
                    for i in 0..n {
                        for p in 0..pp {
                            for j in 0..e {
                                v.set(i * pp + p, j, ve(bi, i, p, hd, j));
                            }
                        }
                    }
                    let o = r.matmul(&v);
                    for i in 0..n {
                        for p in 0..pp {
                            for j in 0..e {
                                out[idx(i, p, hd, j)] = o.at(i * pp + p, j);
                            }
                        }
                    }
                }
                Branch::SpatialConcertino => {
                    let beta = scalar(br, "beta");
                    for j in 0..e {
                        let mut sum = Mat::zeros(pp, pp);
                        for i in 0..n {
                            for a in 0..pp {
                                for b in 0..pp {
                                    let v = sum.at(a, b) + qe(bi, i, a, hd, j) * ke(bi, i, b, hd, j);
                                    sum.set(a, b, v);
                                }
                            }
                        }
                        let c = scaled(&sum, beta).softmax_rows();
                        let op = Mat::block_diag(&vec![c; n]);
                        let mut v = Mat::zeros(n * pp, 1);
                        for i in 0..n {
                            for p in 0..pp {
                                v.set(i * pp + p, 0, ve(bi, i, p, hd, j));
                            }
                        }
                        let o = op.matmul(&v);
                        for i in 0..n {
                            for p in 0..pp {
                                out[idx(i, p, hd, j)] = o.at(i * pp + p, 0);
                            }
                        }
                    }
                }
                Branch::ChannelRipieno => {
                    let alpha = scalar(br, "alpha");
                    let s: Vec<Mat> = (0..n)
                        .map(|i| {
                            let mut m = Mat::zeros(e, e);
                            for a in 0..e {
                                for b in 0..e {
                                    m.set(a, b, (0..pp).map(|p| qe(bi, i, p, hd, a) * ke(bi, i, p, hd, b)).sum());
                                }
                            }
                            m
                        })
                        .collect();
                    let r = Mat::block_diag(&centred(&s, mode.centre, alpha));
                    let mut v = Mat::zeros(n * e, pp);
                    for i in 0..n {
                        for p in 0..pp {
                            for j in 0..e {
                                v.set(i * e + j, p, ve(bi, i, p, hd, j));
                            }
                        }
                    }
                    let o = r.matmul(&v);
                    for i in 0..n {
                        for p in 0..pp {
                            for j in 0..e {
                                out[idx(i, p, hd, j)] = o.at(i * e + j, p);
                            }
                        }
                    }
                }
                Branch::ChannelConcertino => {
                    let beta = scalar(br, "beta");
                    for p in 0..pp {
                        let mut sum = Mat::zeros(e, e);
                        for i in 0..n {
                            for a in 0..e {
                                for b in 0..e {
                                    let v = sum.at(a, b) + qe(bi, i, p, hd, a) * ke(bi, i, p, hd, b);
                                    sum.set(a, b, v);
                                }
                            }
                        }
                        let c = scaled(&sum, beta).softmax_rows();
                        let op = Mat::block_diag(&vec![c; n]);
                        let mut v = Mat::zeros(n * e, 1);
                        for i in 0..n {
                            for j in 0..e {
                                v.set(i * e + j, 0, ve(bi, i, p, hd, j));
                            }
                        }
                        let o = op.matmul(&v);
                        for i in 0..n {
                            for j in 0..e {
                                out[idx(i, p, hd, j)] = o.at(i * e + j, 0);
                            }
                        }
                    }
                }
            }
        }
        branches.push(out);
    }

    // Concatenate in branch order, channel `b·B + head·e + j`.
    let mut xa = vec![0.0; h * w * dd];
    for (bi, vals) in branches.iter().enumerate() {
        for i in 0..n {
            for p in 0..pp {
                for hd in 0..t {
                    for j in 0..e {
                        xa[pixel_of(i, p, w, k) * dd + bi * bw + hd * e + j] = vals[idx(i, p, hd, j)];
                    }
                }
            }
        }
    }
    if cfg.sca {
        let mut pooled = vec![0.0; dd];
        for px in xa.chunks(dd) {
            for (m, &v) in pooled.iter_mut().zip(px) {
                *m += v;
            }
        }
        pooled.iter_mut().for_each(|m| *m /= (h * w) as f64);
        let gate = conv1x1(&pooled, dd, g("sca.w"), g("sca.b"));
        for px in xa.chunks_mut(dd) {
            for (v, &gv) in px.iter_mut().zip(&gate) {
                *v *= gv;
            }
        }
    }
    let output = conv1x1(&xa, dd, g("proj.w"), g("proj.b"));
    OracleOut { branches, output }
}

fn scaled(m: &Mat, s: f64) -> Mat {
    Mat { data: m.data.iter().map(|v| v / s).collect(), ..m.clone() }
}

/// Row softmax of `(S_i − mean_i S_i)/α` for every block.
fn centred(s: &[Mat], centre: bool, alpha: f64) -> Vec<Mat> {
    let n = s.len() as f64;
    let mut mean = Mat::zeros(s[0].rows, s[0].cols);
    if centre {
        for m in s {
            for (a, &b) in mean.data.iter_mut().zip(&m.data) {
                *a += b / n;
            }
        }
    }
    s.iter()
        .map(|m| {
            let data = m.data.iter().zip(&mean.data).map(|(v, mu)| (v - mu) / alpha).collect();
            Mat { data, ..m.clone() }.softmax_rows()
        })
        .collect()
}

/// Weights for `cfg` at unit activation scale, with every learnable scalar
/// scaled by a factor from `[0.75, 1.5)` of its initial value and biases
/// drawn with standard deviation 0.1, so the oracle sees values other than
/// the initial ones.
pub fn csa_weights(cfg: &CsaConfig, rng: &mut Prng) -> WeightStore<f64> {
    let mut store = WeightStore::new();
    let mut init_rng = Prng::new(rng.next_u64());
    cfg.init(&mut Init::new(&mut store, &mut init_rng)).unwrap();
    rescale_to_fan_in(&mut store);
    for (name, t) in store.iter_mut() {
        if name.ends_with("alpha") || name.ends_with("beta") {
            t.data_mut()[0] *= 0.75 + 0.75 * rng.uniform();
        } else if name.ends_with(".b") && !name.starts_with("norm_y") && !name.contains("cdc") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.gaussian());
        }
    }
    store
}

/// Module forward through the library, returning `(output, branch values)`.
pub fn csa_forward<T: Real>(cfg: &CsaConfig, store: &WeightStore<T>, x: &Tensor<T>, y: Option<&Tensor<T>>) -> (Tensor<T>, Vec<Tensor<T>>) {
    let tape = Tape::inference();
    let params = Params::constants(&tape, store);
    let scope = params.scope("");
    let xv = tape.constant(x.clone());
    let yv = y.map(|y| tape.constant(y.clone()));
    let branches = cfg.branch_outputs(&tape, &scope, &xv, yv.as_ref()).unwrap();
    let out = cfg.forward(&tape, &scope, &xv, yv.as_ref()).unwrap();
    (out.into_value(), branches.into_iter().map(|b| b.values.into_value()).collect())
}

/// One random split-mode instance.
pub struct Instance {
    pub cfg: CsaConfig,
    pub h: usize,
    pub w: usize,
    pub x: Tensor<f64>,
    pub y: Option<Tensor<f64>>,
    pub store: WeightStore<f64>,
}

/// Samples `h, w ≤ 8`, `d ≤ 8`, `t ∈ {1, 2}`, `k ∈ {1, 2, 4}`, a random
/// non-empty branch subset in a quarter of the draws, cross-attention in a
/// quarter and the channel gate in half. Inputs and weights are rounded to
/// `f32` so both precisions see identical values.
pub fn random_instance(rng: &mut Prng) -> Instance {
    loop {
        let k = [1, 2, 4][rng.below(3)];
        let h = k * (1 + rng.below(8 / k));
        let w = k * (1 + rng.below(8 / k));
        let d = 1 + rng.below(8);
        let t = 1 + rng.below(2);
        let branches: Vec<Branch> = if rng.below(4) == 0 {
            Branch::ALL.into_iter().filter(|_| rng.below(2) == 0).collect()
        } else {
            Branch::ALL.to_vec()
        };
        let cross = (rng.below(4) == 0).then(|| 1 + rng.below(6));
        let cfg = CsaConfig { mode: CsaMode::Split, branches, sca: rng.below(2) == 0, cross, ..CsaConfig::new(d, t, k) };
        if cfg.validate().is_err() {
            continue;
        }
        let round = |t: Tensor<f64>| t.cast::<f32>().cast::<f64>();
        let x = round(Tensor::sample(rng, &[h, w, d], Dist::Gaussian).unwrap());
        let y = cross.map(|dy| round(Tensor::sample(rng, &[h, w, dy], Dist::Gaussian).unwrap()));
        let store = csa_weights(&cfg, rng).cast::<f32>().cast::<f64>();
        return Instance { cfg, h, w, x, y, store };
    }
}

/// Deviation of `got` from `want` in units of the reference scale
/// `max(1, ‖want‖∞)`: absolute for values of order one, relative beyond.
pub fn scaled_diff(got: &[f64], want: &[f64]) -> f64 {
    max_diff(got, want) / want.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Worst deviations over a sweep. The 64-bit figures are absolute; the
/// 32-bit figures are [`scaled_diff`], with the plain absolute maximum kept
/// alongside for reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct SweepReport {
    pub instances: usize,
    /// Module output and per-branch weighted values against the
    /// block-diagonal oracle.
    pub split_f32: f64,
    pub split_f32_abs: f64,
    pub split_f64: f64,
    /// Prototype against the triple-loop oracle.
    pub prototype_f32: f64,
    pub prototype_f32_abs: f64,
    pub prototype_f64: f64,
    /// Largest gap between blockwise summed and single concatenated
    /// Concertino logits.
    pub concat_identity: f64,
}

/// `Σ_i Q_i K_iᵀ` against `[Q_1 … Q_n][K_1 … K_n]ᵀ`, both through the
/// library matmul, on the spatial Concertino slices of `q` and `k`
/// (`n×P×e`).
pub fn concat_identity_gap(q: &Tensor<f64>, k: &Tensor<f64>) -> f64 {
    let (n, pp, e) = (q.dim(0), q.dim(1), q.dim(2));
    let mut blockwise = Tensor::<f64>::zeros(&[pp, pp]);
    for i in 0..n {
        let qi = Tensor::new(&[pp, e], q.data()[i * pp * e..(i + 1) * pp * e].to_vec()).unwrap();
        let ki = Tensor::new(&[pp, e], k.data()[i * pp * e..(i + 1) * pp * e].to_vec()).unwrap();
        blockwise.add_assign(&kernels::matmul_last2(&qi, &kernels::transpose_last2(&ki).unwrap()).unwrap()).unwrap();
    }
    // P × (n·e): row p holds block 1's channels, then block 2's, and so on.
    let cat = |t: &Tensor<f64>| kernels::permute(t, &[1, 0, 2]).unwrap().into_reshape(&[pp, n * e]).unwrap();
    let single = kernels::matmul_last2(&cat(q), &kernels::transpose_last2(&cat(k)).unwrap()).unwrap();
    blockwise.max_abs_diff(&single).unwrap()
}

/// Runs `count` random instances through the efficient module, the
/// prototype and the concatenation identity, in both precisions.
pub fn oracle_sweep(count: usize, seed: u64) -> SweepReport {
    let mut rng = Prng::new(seed);
    let mut rep = SweepReport { instances: count, ..SweepReport::default() };
    for _ in 0..count {
        let inst = random_instance(&mut rng);
        let (cfg, h, w) = (&inst.cfg, inst.h, inst.w);
        let xs = to_f64(&inst.x);
        let ys = inst.y.as_ref().map(to_f64);
        let oracle = csa_oracle(cfg, &inst.store, &xs, ys.as_deref(), h, w, OracleMode::SPLIT);

        let (out64, br64) = csa_forward(cfg, &inst.store, &inst.x, inst.y.as_ref());
        let store32 = inst.store.cast::<f32>();
        let y32 = inst.y.as_ref().map(|y| y.cast::<f32>());
        let (out32, br32) = csa_forward(cfg, &store32, &inst.x.cast(), y32.as_ref());
        let pairs64 = std::iter::once((to_f64(&out64), &oracle.output)).chain(br64.iter().map(to_f64).zip(&oracle.branches));
        for (got, want) in pairs64 {
            rep.split_f64 = rep.split_f64.max(max_diff(&got, want));
        }
        let pairs32 = std::iter::once((to_f64(&out32), &oracle.output)).chain(br32.iter().map(to_f64).zip(&oracle.branches));
        for (got, want) in pairs32 {
            rep.split_f32 = rep.split_f32.max(scaled_diff(&got, want));
            rep.split_f32_abs = rep.split_f32_abs.max(max_diff(&got, want));
        }

        // The prototype runs at the block width on the same input.
        let d = cfg.dim;
        let proj = ProjWeights::<f64>::random(d, rng.next_u64()).unwrap();
        let proj = ProjWeights {
            wq: proj.wq.cast::<f32>().cast(),
            wk: proj.wk.cast::<f32>().cast(),
            wv: proj.wv.cast::<f32>().cast(),
            ..proj
        };
        let (alpha, beta) = (0.5 + 2.5 * rng.uniform() as f32, 0.5 + 2.5 * rng.uniform() as f32);
        let lit = prototype_triple_loop(&xs, h, w, d, cfg.k, alpha as f64, beta as f64, &proj);
        let p64 = csa_prototype(&inst.x, cfg.k, alpha as f64, beta as f64, &proj).unwrap();
        let proj32 = ProjWeights::<f32> {
            wq: proj.wq.cast(),
            bq: proj.bq.cast(),
            wk: proj.wk.cast(),
            bk: proj.bk.cast(),
            wv: proj.wv.cast(),
            bv: proj.bv.cast(),
        };
        let p32 = csa_prototype(&inst.x.cast::<f32>(), cfg.k, alpha, beta, &proj32).unwrap();
        rep.prototype_f64 = rep.prototype_f64.max(max_diff(&to_f64(&p64), &lit));
        rep.prototype_f32 = rep.prototype_f32.max(scaled_diff(&to_f64(&p32), &lit));
        rep.prototype_f32_abs = rep.prototype_f32_abs.max(max_diff(&to_f64(&p32), &lit));

        // Concatenation identity on every head and channel of the query and
        // key projections, taken as `n×P×e` slices.
        let store = &inst.store;
        let qf = conv1x1(&xs, d, store.get("q.w").unwrap(), store.get("q.b").unwrap());
        let kf = match (&ys, cfg.cross) {
            (Some(y), Some(dy)) => {
                let yn = layer_norm(y, dy, store.get("norm_y.w").unwrap(), store.get("norm_y.b").unwrap());
                conv1x1(&yn, dy, store.get("kv.w").unwrap(), store.get("kv.b").unwrap())
            }
            _ => conv1x1(&xs, d, store.get("kv.w").unwrap(), store.get("kv.b").unwrap()),
        };
        let dd = cfg.internal();
        let (n, pp) = ((h / cfg.k) * (w / cfg.k), cfg.k * cfg.k);
        let e = cfg.head_width();
        for c0 in (0..dd).step_by(e) {
            let slice = |src: &[f64], width: usize| {
                let mut v = Vec::with_capacity(n * pp * e);
                for i in 0..n {
                    for p in 0..pp {
                        let px = pixel_of(i, p, w, cfg.k);
                        v.extend_from_slice(&src[px * width + c0..px * width + c0 + e]);
                    }
                }
                Tensor::new(&[n, pp, e], v).unwrap()
            };
            rep.concat_identity = rep.concat_identity.max(concat_identity_gap(&slice(&qf, dd), &slice(&kf, 2 * dd)));
        }
    }
    rep
}
