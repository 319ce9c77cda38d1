//! Single-pair overfitting run on a synthetic blur pair.
//!
//! The target is a seeded noise image; the input is its 5×5 box blur (edge
//! samples repeated). The network is trained on the multi-scale loss with a
//! chosen optimizer and learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{build_model, forward_vars, input_pyramid, loss_multiscale, ModelConfig};
use crate::params::{Params, WeightStore};
use crate::prng::Prng;
use crate::tape::Tape;
use crate::tensor::{Dist, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, weight_decay: f64 },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW { beta1: 0.9, beta2: 0.9, weight_decay: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone)]
pub struct OverfitConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub size: usize,
    /// Side of the random grid the target noise is interpolated from; the
    /// target is white noise when this equals `size`.
    pub noise_cells: usize,
    pub lambda: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            steps: 200,
            lr: 1e-3,
            optimizer: Optimizer::adamw(),
            schedule: Schedule::Constant,
            size: 64,
            noise_cells: 64,
            lambda: crate::model::DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OverfitReport {
    /// Loss before each step, then after the last one.
    pub trace: Vec<f64>,
}

impl OverfitReport {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn last(&self) -> f64 {
        *self.trace.last().unwrap()
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.last() / self.initial()
    }

    /// `None` when no step was taken.
    pub fn succeeded(&self) -> Option<bool> {
        (self.trace.len() > 1).then(|| self.last() <= 0.5 * self.initial())
    }
}

/// Seeded noise in `[0, 1)`: a `cells×cells×3` uniform grid bilinearly
/// interpolated (half-pixel centres, edges clamped) to `size×size`.
pub fn noise_image(seed: u64, size: usize, cells: usize) -> Result<Tensor<f32>> {
    let grid = Tensor::<f64>::from_seed(seed, &[cells, cells, 3], Dist::Uniform)?;
    if cells == size {
        return Ok(grid.cast());
    }
    let scale = cells as f64 / size as f64;
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(cells - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            for c in 0..3 {
                let g = |yy: usize, xx: usize| grid.at(&[yy, xx, c]);
                let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
                let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(&[size, size, 3], out)
}

/// `r×r` box average with edge samples repeated.
pub fn box_blur<T: Real>(img: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::Shape(format!("expected h×w×c, got {:?}", img.shape())));
    };
    let half = (r / 2) as isize;
    let inv = T::one() / T::lit((r * r) as f64);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![T::zero(); img.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = T::zero();
                for dy in -half..=half {
                    for dx in -half..=half {
                        s += img.at(&[clamp(y as isize + dy, h), clamp(x as isize + dx, w), ch]);
                    }
                }
                out[(y * w + x) * c + ch] = s * inv;
            }
        }
    }
    Tensor::new(img.shape(), out)
}

struct AdamState<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

/// Runs the demo in precision `T`, calling `on_step(step, loss)` after each
/// evaluation.
pub fn run_overfit<T: Real>(cfg: &OverfitConfig, mut on_step: impl FnMut(usize, f64)) -> Result<OverfitReport> {
    if cfg.size % cfg.model.tile_multiple() != 0 {
        return Err(Error::InvalidArgument(format!(
            "size {} is not a multiple of {}",
            cfg.size,
            cfg.model.tile_multiple()
        )));
    }
    let mut store: WeightStore<T> = build_model(&cfg.model, cfg.seed)?;
    let mut rng = Prng::new(cfg.seed ^ 0x5eed);
    let gt: Tensor<T> = noise_image(rng.next_u64(), cfg.size, cfg.noise_cells)?.cast();
    let blurred = box_blur(&gt, 5)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut adam = AdamState {
        m: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        v: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let tape = Tape::<T>::new();
        let params = Params::leaves(&tape, &store);
        let x = tape.constant(blurred.clone());
        let g = tape.constant(gt.clone());
        let outs = forward_vars(&cfg.model, &tape, &params, &x)?;
        let gts = input_pyramid(&tape, &g)?;
        let loss = loss_multiscale(&tape, &outs, &gts, T::lit(cfg.lambda))?;
        let value = loss.value().data()[0].f64();
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("loss diverged at step {step}")));
        }
        trace.push(value);
        on_step(step, value);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(&loss)?;
        let lr = match cfg.schedule {
            Schedule::Constant => cfg.lr,
            Schedule::Cosine => 0.5 * cfg.lr * (1.0 + (PI * step as f64 / cfg.steps as f64).cos()),
        };
        let scope = params.scope("");
        for (i, name) in names.iter().enumerate() {
            let grad = grads.wrt(scope.get(name)?);
            let w = store.get_mut(name)?;
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, &gv) in w.data_mut().iter_mut().zip(grad.data()) {
                        *p -= T::lit(lr) * gv;
                    }
                }
                Optimizer::AdamW { beta1, beta2, weight_decay } => {
                    let t = (step + 1) as i32;
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let m = adam.m[i].data_mut();
                    let v = adam.v[i].data_mut();
                    for (j, (p, &gv)) in w.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * gv;
                        v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
                        let mh = m[j].f64() / c1;
                        let vh = v[j].f64() / c2;
                        let upd = mh / (vh.sqrt() + 1e-8) + weight_decay * p.f64();
                        *p -= T::lit(lr * upd);
                    }
                }
            }
        }
    }
    Ok(OverfitReport { trace })
}
