//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so reverse insertion order is a
//! valid reverse topological order. Operations whose inputs do not depend on
//! any gradient-tracked leaf are not recorded at all, which also makes the
//! same model code usable for plain inference via [`Tape::inference`].

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::kernels::{self as k, Padding};
use crate::tensor::{Real, Tensor};

const UNTRACKED: usize = usize::MAX;

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
}

/// A value on the tape. Cloning is cheap.
#[derive(Clone)]
pub struct Var<T: Real = f32> {
    id: usize,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id != UNTRACKED
    }

    pub fn into_value(self) -> Tensor<T> {
        Rc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value)
    }
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    macs: Cell<u64>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: &Var<T>) -> Tensor<T> {
        self.grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true, macs: Cell::new(0) }
    }

    /// A tape that never records; every op is evaluated eagerly.
    pub fn inference() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Multiply-accumulates spent in convolutions and matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A gradient-tracked input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(t);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: vec![], backward: None });
        Var { id: nodes.len() - 1, value: Rc::new(t) }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { id: UNTRACKED, value: Rc::new(t) }
    }

    fn push(&self, value: Tensor<T>, parents: &[&Var<T>], backward: Backward<T>) -> Var<T> {
        if !self.recording || parents.iter().all(|p| !p.is_tracked()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(backward),
        });
        Var { id: nodes.len() - 1, value: Rc::new(value) }
    }

    fn count(&self, macs: u64) {
        self.macs.set(self.macs.get() + macs);
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Grads<T>> {
        if loss.value.len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", loss.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !loss.is_tracked() {
            return Ok(Grads { grads });
        }
        let mut live = vec![false; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            live[i] = n.backward.is_none() || n.parents.iter().any(|&p| p != UNTRACKED && live[p]);
        }
        grads[loss.id] = Some(Tensor::ones(loss.shape()));
        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| p != UNTRACKED && live[p]).collect();
            for (slot, (&p, pg)) in node.parents.iter().zip(bw(&g, &needs)?).enumerate() {
                let Some(pg) = pg else { continue };
                if !needs[slot] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    empty => *empty = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = k::broadcast_binary(&a.value, &b.value, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.push(out, &[a, b], Box::new(move |g, need| {
            Ok(vec![
                need[0].then(|| k::reduce_to_shape(g, &sa)).transpose()?,
                need[1].then(|| k::reduce_to_shape(g, &sb)).transpose()?,
            ])
        })))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = k::broadcast_binary(&a.value, &b.value, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.push(out, &[a, b], Box::new(move |g, need| {
            Ok(vec![
                need[0].then(|| k::reduce_to_shape(g, &sa)).transpose()?,
                need[1].then(|| k::reduce_to_shape(g, &sb).map(|r| r.scale(-T::one()))).transpose()?,
            ])
        })))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = k::broadcast_binary(&a.value, &b.value, |x, y| x * y)?;
        let (va, vb) = (a.value.clone(), b.value.clone());
        Ok(self.push(out, &[a, b], Box::new(move |g, need| {
            let side = |other: &Tensor<T>, own: &[usize]| -> Result<Tensor<T>> {
                k::reduce_to_shape(&k::broadcast_binary(g, other, |x, y| x * y)?, own)
            };
            Ok(vec![
                need[0].then(|| side(&vb, va.shape())).transpose()?,
                need[1].then(|| side(&va, vb.shape())).transpose()?,
            ])
        })))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = k::broadcast_binary(&a.value, &b.value, |x, y| x / y)?;
        let (va, vb) = (a.value.clone(), b.value.clone());
        let y = Rc::new(out.clone());
        Ok(self.push(out, &[a, b], Box::new(move |g, need| {
            let ga = need[0]
                .then(|| k::reduce_to_shape(&k::broadcast_binary(g, &vb, |x, d| x / d)?, va.shape()))
                .transpose()?;
            let gb = need[1]
                .then(|| {
                    let gy = g.zip_map(&y, |x, q| -x * q)?;
                    k::reduce_to_shape(&k::broadcast_binary(&gy, &vb, |x, d| x / d)?, vb.shape())
                })
                .transpose()?;
            Ok(vec![ga, gb])
        })))
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Var<T> {
        self.push(a.value.scale(s), &[a], Box::new(move |g, _| Ok(vec![Some(g.scale(s))])))
    }

    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        let x = a.value.clone();
        self.push(a.value.map(|v| v.abs()), &[a], Box::new(move |g, _| {
            let sign = |v: T| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() };
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * sign(xv))?)])
        }))
    }

    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let x = a.value.clone();
        self.push(a.value.map(k::gelu), &[a], Box::new(move |g, _| {
            Ok(vec![Some(g.zip_map(&x, |gv, xv| gv * k::gelu_grad(xv))?)])
        }))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = k::matmul_last2(&a.value, &b.value)?;
        self.count(k::matmul_macs(a.shape(), b.shape()));
        let (va, vb) = (a.value.clone(), b.value.clone());
        Ok(self.push(out, &[a, b], Box::new(move |g, need| {
            let ga = need[0]
                .then(|| k::matmul_last2(g, &k::transpose_last2(&vb)?))
                .transpose()?;
            let gb = need[1]
                .then(|| {
                    if vb.ndim() == 2 && va.ndim() > 2 {
                        let (p, q) = (vb.dim(0), vb.dim(1));
                        let a2 = va.reshape(&[va.len() / p, p])?;
                        let g2 = g.reshape(&[g.len() / q, q])?;
                        k::matmul_last2(&k::transpose_last2(&a2)?, &g2)
                    } else {
                        k::matmul_last2(&k::transpose_last2(&va)?, g)
                    }
                })
                .transpose()?;
            Ok(vec![ga, gb])
        })))
    }

    pub fn permute(&self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = k::permute(&a.value, axes)?;
        let inv = k::inverse_permutation(axes);
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(k::permute(g, &inv)?)]))))
    }

    pub fn reshape(&self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(g.reshape(&orig)?)]))))
    }

    pub fn softmax(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = k::softmax_lastdim(&a.value)?;
        let y = Rc::new(out.clone());
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(k::softmax_backward(&y, g)?)]))))
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        groups: usize,
        pad: Padding,
    ) -> Result<Var<T>> {
        let out = k::conv2d(&x.value, &w.value, b.map(|b| b.value()), stride, groups, pad)?;
        self.count(k::ConvGeom::new(x.shape(), w.shape(), stride, groups, pad)?.macs());
        let (vx, vw) = (x.value.clone(), w.value.clone());
        let bw: Backward<T> = Box::new(move |g, need| {
            let gx = need[0]
                .then(|| k::conv2d_backward_input(vx.shape(), &vw, g, stride, groups, pad))
                .transpose()?;
            let (gw, gb) = if need.iter().skip(1).any(|&n| n) {
                let (gw, gb) = k::conv2d_backward_weight(&vx, vw.shape(), g, stride, groups, pad)?;
                (Some(gw), Some(gb))
            } else {
                (None, None)
            };
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(gb);
            }
            Ok(v)
        });
        Ok(match b {
            Some(b) => self.push(out, &[x, w, b], bw),
            None => self.push(out, &[x, w], bw),
        })
    }

    pub fn pixel_shuffle(&self, a: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = k::pixel_shuffle(&a.value, r)?;
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(k::pixel_unshuffle(g, r)?)]))))
    }

    pub fn downsample_half(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = k::downsample_half(&a.value)?;
        Ok(self.push(out, &[a], Box::new(|g, _| Ok(vec![Some(k::downsample_half_backward(g)?)]))))
    }

    pub fn block_partition(&self, a: &Var<T>, kk: usize) -> Result<Var<T>> {
        let out = k::block_partition(&a.value, kk)?;
        let (h, w) = (a.shape()[0], a.shape()[1]);
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(k::block_merge(g, kk, h, w)?)]))))
    }

    pub fn block_merge(&self, a: &Var<T>, kk: usize, h: usize, w: usize) -> Result<Var<T>> {
        let out = k::block_merge(&a.value, kk, h, w)?;
        Ok(self.push(out, &[a], Box::new(move |g, _| Ok(vec![Some(k::block_partition(g, kk)?)]))))
    }

    pub fn dft2(&self, a: &Var<T>) -> Result<Var<T>> {
        let out = k::dft2(&a.value)?;
        Ok(self.push(out, &[a], Box::new(|g, _| Ok(vec![Some(k::dft2_backward(g)?)]))))
    }

    pub fn slice_last(&self, a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let out = k::slice_last(&a.value, start, len)?;
        let shape = a.shape().to_vec();
        Ok(self.push(out, &[a], Box::new(move |g, _| {
            let c = *shape.last().unwrap();
            let mut gx = Tensor::zeros(&shape);
            for (row, grow) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                row[start..start + len].copy_from_slice(grow);
            }
            Ok(vec![Some(gx)])
        })))
    }

    pub fn concat_last(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = k::concat_last(&values)?;
        let widths: Vec<usize> = parts.iter().map(|p| p.value.dim(-1)).collect();
        Ok(self.push(out, parts, Box::new(move |g, need| {
            let mut start = 0;
            let mut v = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                v.push(need[i].then(|| k::slice_last(g, start, w)).transpose()?);
                start += w;
            }
            Ok(v)
        })))
    }

    /// Mean over `axes`, keeping them as extent 1.
    pub fn mean_axes(&self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = k::mean_axes(&a.value, axes)?;
        let shape = a.shape().to_vec();
        let inv = T::one() / T::lit((a.value.len() / out.len()) as f64);
        Ok(self.push(out, &[a], Box::new(move |g, _| {
            let gx = k::broadcast_binary(&Tensor::zeros(&shape), g, |_, y| y * inv)?;
            Ok(vec![Some(gx)])
        })))
    }

    pub fn sum_all(&self, a: &Var<T>) -> Var<T> {
        let shape = a.shape().to_vec();
        self.push(Tensor::scalar(a.value.sum()), &[a], Box::new(move |g, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        }))
    }

    pub fn mean_all(&self, a: &Var<T>) -> Var<T> {
        let s = self.sum_all(a);
        self.scale(&s, T::one() / T::lit(a.value.len() as f64))
    }

    pub fn layer_norm(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (out, xhat, rstd) = k::layer_norm(&x.value, &w.value, &b.value)?;
        let vw = w.value.clone();
        Ok(self.push(out, &[x, w, b], Box::new(move |g, _| {
            let (gx, gw, gb) = k::layer_norm_backward(&xhat, &rstd, &vw, g)?;
            Ok(vec![Some(gx), Some(gw), Some(gb)])
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Dist;

    fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_seed(seed, shape, Dist::Gaussian).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(rand(1, &[5]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert_eq!(g, x.value().scale(2.0));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(rand(2, &[3, 4]));
        let s = tape.softmax(&x).unwrap();
        let loss = tape.sum_all(&s);
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert!(g.max_abs() < 1e-8);
    }

    #[test]
    fn disconnected_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(rand(1, &[3]));
        let y = tape.leaf(rand(2, &[2, 2]));
        let loss = tape.sum_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(rand(3, &[4]));
        let a = tape.scale(&x, 3.0);
        let b = tape.add(&a, &x).unwrap();
        let loss = tape.sum_all(&b);
        let g = tape.backward(&loss).unwrap().wrt(&x);
        assert!(g.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(rand(1, &[2, 2]));
        let y = tape.matmul(&x, &x).unwrap();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
        assert_eq!(tape.macs(), 8);
    }

    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) {
        let r = check_gradients(&inputs, None, 0, f).unwrap();
        assert!(r.max_rel_error() <= 1e-4, "{r}");
    }

    /// Weighted sum so that every output element gets a distinct cotangent.
    fn project(t: &Tape<f64>, y: Var<f64>) -> Result<Var<f64>> {
        let w = t.constant(Tensor::from_seed(99, y.shape(), Dist::Gaussian)?);
        let p = t.mul(&y, &w)?;
        Ok(t.sum_all(&p))
    }

    #[test]
    fn elementwise_grads() {
        check(vec![rand(1, &[2, 3, 4]), rand(2, &[3, 1])], |t, v| {
            let a = t.add(&v[0], &v[1])?;
            let b = t.mul(&a, &v[1])?;
            let c = t.sub(&b, &v[0])?;
            let d = t.gelu(&c);
            project(t, d)
        });
        let mut den = rand(4, &[4]);
        den.data_mut().iter_mut().for_each(|v| *v = 1.5 + v.abs());
        check(vec![rand(3, &[2, 4]), den], |t, v| {
            let q = t.div(&v[0], &v[1])?;
            project(t, q)
        });
        // Keep clear of the kink at zero.
        let mut x = rand(5, &[6]);
        x.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.1);
        check(vec![x], |t, v| project(t, t.abs(&v[0])));
    }

    #[test]
    fn matmul_grads() {
        check(vec![rand(1, &[2, 3, 4]), rand(2, &[2, 4, 2])], |t, v| {
            project(t, t.matmul(&v[0], &v[1])?)
        });
        check(vec![rand(3, &[2, 3, 4]), rand(4, &[4, 2])], |t, v| {
            project(t, t.matmul(&v[0], &v[1])?)
        });
    }

    #[test]
    fn layout_grads() {
        check(vec![rand(1, &[2, 3, 4])], |t, v| {
            let p = t.permute(&v[0], &[2, 0, 1])?;
            let r = t.reshape(&p, &[4, 6])?;
            project(t, t.softmax(&r)?)
        });
        check(vec![rand(2, &[4, 4, 2])], |t, v| {
            let b = t.block_partition(&v[0], 2)?;
            let s = t.softmax(&b)?;
            project(t, t.block_merge(&s, 2, 4, 4)?)
        });
        check(vec![rand(3, &[2, 2, 8])], |t, v| project(t, t.pixel_shuffle(&v[0], 2)?));
        check(vec![rand(4, &[4, 4, 2])], |t, v| project(t, t.downsample_half(&v[0])?));
        check(vec![rand(5, &[2, 2, 5]), rand(6, &[2, 2, 3])], |t, v| {
            let s = t.slice_last(&v[0], 1, 3)?;
            let c = t.concat_last(&[&s, &v[1], &v[0]])?;
            project(t, c)
        });
        check(vec![rand(7, &[3, 4, 2])], |t, v| {
            let m = t.mean_axes(&v[0], &[0, 1])?;
            let p = t.mul(&m, &v[0])?;
            project(t, p)
        });
    }

    #[test]
    fn conv_grads() {
        for (groups, stride, pad, cin, cout) in [
            (1, 1, Padding::Same, 2, 3),
            (2, 1, Padding::Same, 2, 2),
            (1, 2, Padding::Valid, 2, 4),
        ] {
            let ks = if stride == 2 { 2 } else { 3 };
            check(
                vec![rand(1, &[4, 4, cin]), rand(2, &[ks, ks, cin / groups, cout]), rand(3, &[cout])],
                |t, v| project(t, t.conv2d(&v[0], &v[1], Some(&v[2]), stride, groups, pad)?),
            );
        }
    }

    #[test]
    fn dft_and_norm_grads() {
        check(vec![rand(1, &[4, 2, 2])], |t, v| project(t, t.dft2(&v[0])?));
        check(vec![rand(2, &[3, 6]), rand(3, &[6]), rand(4, &[6])], |t, v| {
            project(t, t.layer_norm(&v[0], &v[1], &v[2])?)
        });
        check(vec![rand(5, &[3, 3, 2])], |t, v| {
            let a = t.abs(&t.scale(&v[0], 0.5));
            Ok(t.mean_all(&a))
        });
    }
}
