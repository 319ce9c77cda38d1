//! Reference attention schemes over plain tensors: full self-attention,
//! windowed multi-head self-attention, transposed (channel) attention and the
//! direct concerto prototype. They serve as oracles and as subjects of the
//! permutation experiments, so they favour clarity over speed.

use crate::cost::Cost;
use crate::error::{shape_err, Error, Result};
use crate::kernels::{block_merge, block_partition, matmul_last2, softmax_lastdim, transpose_last2};
use crate::prng::Prng;
use crate::tensor::{Dist, Real, Tensor};

/// Query, key and value projections `x·W + b`, each `d×d`.
#[derive(Debug, Clone)]
pub struct ProjWeights<T: Real = f32> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
}

impl<T: Real> ProjWeights<T> {
    /// Gaussian weights with standard deviation `1/√d`, zero biases.
    pub fn random(d: usize, seed: u64) -> Result<Self> {
        let mut rng = Prng::new(seed);
        let std = 1.0 / (d as f64).sqrt();
        let mut w = || -> Result<Tensor<T>> {
            Ok(Tensor::<f64>::sample(&mut rng, &[d, d], Dist::Gaussian)?.scale(std).cast())
        };
        let (wq, wk, wv) = (w()?, w()?, w()?);
        Ok(Self { wq, wk, wv, bq: Tensor::zeros(&[d]), bk: Tensor::zeros(&[d]), bv: Tensor::zeros(&[d]) })
    }

    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.set(&[i, i], T::one());
        }
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye,
            bq: Tensor::zeros(&[d]),
            bk: Tensor::zeros(&[d]),
            bv: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.dim(0)
    }

    /// Projects rows of `x` (any leading shape, last axis `d`) to `Q, K, V`
    /// of shape `N×d`.
    pub fn project(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let d = self.dim();
        if x.dim(-1) != d {
            return Err(shape_err!("input {:?} does not match projection width {}", x.shape(), d));
        }
        let x2 = x.reshape(&[x.len() / d, d])?;
        let lin = |w: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
            let mut y = matmul_last2(&x2, w)?;
            for row in y.data_mut().chunks_mut(d) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Ok(y)
        };
        Ok((lin(&self.wq, &self.bq)?, lin(&self.wk, &self.bk)?, lin(&self.wv, &self.bv)?))
    }
}

/// `softmax(QKᵀ/√d)·V` over all positions. Rows are processed one at a time
/// so memory stays linear in the number of positions.
pub fn self_attention<T: Real>(x: &Tensor<T>, p: &ProjWeights<T>) -> Result<Tensor<T>> {
    let (q, k, v) = p.project(x)?;
    let out = attend_rows(&q, &k, &v, T::one() / T::lit((p.dim() as f64).sqrt()));
    Tensor::new(x.shape(), out)
}

fn attend_rows<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T) -> Vec<T> {
    let (n, d) = (q.dim(0), q.dim(1));
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); n * d];
    let mut logits = vec![T::zero(); n];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let mut mx = T::neg_infinity();
        for (j, l) in logits.iter_mut().enumerate() {
            let mut s = T::zero();
            for (&a, &b) in qi.iter().zip(&kd[j * d..(j + 1) * d]) {
                s += a * b;
            }
            *l = s * scale;
            mx = mx.max(*l);
        }
        let mut z = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &l) in logits.iter().enumerate() {
            let p = l / z;
            for (o, &vv) in oi.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                *o += p * vv;
            }
        }
    }
    out
}

/// Self-attention restricted to each non-overlapping `k×k` block.
pub fn window_msa<T: Real>(x: &Tensor<T>, k: usize, p: &ProjWeights<T>) -> Result<Tensor<T>> {
    let [h, w, d] = *x.shape() else {
        return Err(shape_err!("window attention expects h×w×d, got {:?}", x.shape()));
    };
    let blocks = block_partition(x, k)?;
    let (q, kk, v) = p.project(&blocks)?;
    let kk2 = k * k;
    let scale = T::one() / T::lit((d as f64).sqrt());
    let mut out = Vec::with_capacity(x.len());
    for b in 0..blocks.dim(0) {
        let sl = |t: &Tensor<T>| Tensor::new(&[kk2, d], t.data()[b * kk2 * d..(b + 1) * kk2 * d].to_vec());
        out.extend(attend_rows(&sl(&q)?, &sl(&kk)?, &sl(&v)?, scale));
    }
    block_merge(&Tensor::new(blocks.shape(), out)?, k, h, w)
}

/// Channel attention: the `d×d` map `softmax(QᵀK)` and the output whose row
/// `i` is `map · V_i`.
pub fn transposed_sa<T: Real>(x: &Tensor<T>, p: &ProjWeights<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (q, k, v) = p.project(x)?;
    let map = softmax_lastdim(&matmul_last2(&transpose_last2(&q)?, &k)?)?;
    let out = matmul_last2(&v, &transpose_last2(&map)?)?;
    Ok((map, out.into_reshape(x.shape())?))
}

/// Ripieno maps `R_i` (`n×k²×k²`) and the shared Concertino map `C`
/// (`k²×k²`) of the prototype.
pub fn csa_prototype_maps<T: Real>(
    x: &Tensor<T>,
    k: usize,
    alpha: T,
    beta: T,
    p: &ProjWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if !(alpha > T::zero() && beta > T::zero()) {
        return Err(Error::InvalidArgument(format!("alpha ({alpha}) and beta ({beta}) must be positive")));
    }
    if x.ndim() != 3 {
        return Err(shape_err!("prototype expects h×w×d, got {:?}", x.shape()));
    }
    let blocks = block_partition(x, k)?;
    let (n, kk2) = (blocks.dim(0), k * k);
    let (q, kmat, v) = p.project(&blocks)?;
    let d = p.dim();
    let q = q.into_reshape(&[n, kk2, d])?;
    let kmat = kmat.into_reshape(&[n, kk2, d])?;
    let s = matmul_last2(&q, &transpose_last2(&kmat)?)?;
    let mut mean = vec![T::zero(); kk2 * kk2];
    for blk in s.data().chunks(kk2 * kk2) {
        for (m, &v) in mean.iter_mut().zip(blk) {
            *m += v;
        }
    }
    let inv_n = T::one() / T::lit(n as f64);
    mean.iter_mut().for_each(|m| *m *= inv_n);
    let mut centred = s.into_data();
    for blk in centred.chunks_mut(kk2 * kk2) {
        for (c, &m) in blk.iter_mut().zip(&mean) {
            *c = (*c - m) / alpha;
        }
    }
    let r = softmax_lastdim(&Tensor::new(&[n, kk2, kk2], centred)?)?;
    let c = softmax_lastdim(&Tensor::new(&[kk2, kk2], mean.iter().map(|&m| m / beta).collect())?)?;
    Ok((r, c, v.into_reshape(&[n, kk2, d])?))
}

/// Prototype concerto attention: block `i` output is `(R_i + C)·V_i`.
pub fn csa_prototype<T: Real>(
    x: &Tensor<T>,
    k: usize,
    alpha: T,
    beta: T,
    p: &ProjWeights<T>,
) -> Result<Tensor<T>> {
    let (r, c, v) = csa_prototype_maps(x, k, alpha, beta, p)?;
    let kk2 = k * k;
    let mut a = r.into_data();
    for blk in a.chunks_mut(kk2 * kk2) {
        for (x, &cv) in blk.iter_mut().zip(c.data()) {
            *x += cv;
        }
    }
    let a = Tensor::new(&[v.dim(0), kk2, kk2], a)?;
    block_merge(&matmul_last2(&a, &v)?, k, x.dim(0), x.dim(1))
}

fn qkv_cost(hw: usize, d: usize) -> Cost {
    Cost { linear: (3 * hw * d * d) as u64, params: (3 * (d * d + d)) as u64, ..Cost::default() }
}

pub fn self_attention_cost(h: usize, w: usize, d: usize) -> Cost {
    let hw = h * w;
    qkv_cost(hw, d) + Cost { attention: (2 * hw * hw * d) as u64, ..Cost::default() }
}

pub fn window_msa_cost(h: usize, w: usize, d: usize, k: usize) -> Cost {
    let hw = h * w;
    qkv_cost(hw, d) + Cost { attention: (2 * hw * k * k * d) as u64, ..Cost::default() }
}

pub fn transposed_sa_cost(h: usize, w: usize, d: usize) -> Cost {
    let hw = h * w;
    qkv_cost(hw, d) + Cost { attention: (2 * hw * d * d) as u64, ..Cost::default() }
}
