//! Spatial-permutation experiments.
//!
//! Transposed attention builds its `d×d` map from inner products over all
//! pixels, so shuffling pixels leaves the map unchanged. Concerto attention
//! keeps the in-block position in its maps: swapping two pixels inside one
//! block changes the output by more than the same swap applied afterwards.

use std::fmt;

use crate::concerto::CsaConfig;
use crate::error::Result;
use crate::params::{rescale_to_fan_in, Init, Params, WeightStore};
use crate::prng::Prng;
use crate::tape::Tape;
use crate::tensor::{Dist, Tensor};
use crate::zoo::{csa_prototype, transposed_sa, ProjWeights};

pub const MAP_TOLERANCE: f64 = 1e-6;
pub const MIN_CHANGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct PermtestConfig {
    pub trials: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for PermtestConfig {
    fn default() -> Self {
        Self { trials: 100, h: 8, w: 8, dim: 8, k: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PermtestReport {
    pub trials: usize,
    /// Largest transposed-map deviation under a random pixel shuffle.
    pub transposed_map_dev: f64,
    /// Largest deviation of the shuffled transposed output from the shuffled
    /// original output.
    pub transposed_equivariance_dev: f64,
    /// Smallest `‖f(PX) − P·f(X)‖∞` over the in-block swaps, for the
    /// prototype and for the full module.
    pub prototype_min_change: f64,
    pub module_min_change: f64,
}

impl PermtestReport {
    pub fn transposed_invariant(&self) -> bool {
        self.transposed_map_dev <= MAP_TOLERANCE
    }

    pub fn csa_sensitive(&self) -> bool {
        self.prototype_min_change >= MIN_CHANGE && self.module_min_change >= MIN_CHANGE
    }

    pub fn passed(&self) -> bool {
        self.transposed_invariant() && self.csa_sensitive()
    }
}

impl fmt::Display for PermtestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        writeln!(
            f,
            "transposed map deviation     {:.3e}  (≤ {MAP_TOLERANCE:e})  {}",
            self.transposed_map_dev,
            verdict(self.transposed_invariant())
        )?;
        writeln!(f, "transposed output deviation  {:.3e}", self.transposed_equivariance_dev)?;
        writeln!(
            f,
            "CSA prototype min change     {:.3e}  (≥ {MIN_CHANGE:e})  {}",
            self.prototype_min_change,
            verdict(self.prototype_min_change >= MIN_CHANGE)
        )?;
        write!(
            f,
            "CSA module min change        {:.3e}  (≥ {MIN_CHANGE:e})  {}  [{} trials]",
            self.module_min_change,
            verdict(self.module_min_change >= MIN_CHANGE),
            self.trials
        )
    }
}

/// Row `i` of the result is pixel `perm[i]` of `x`.
pub fn permute_pixels(x: &Tensor<f64>, perm: &[usize]) -> Result<Tensor<f64>> {
    let c = x.dim(-1);
    let mut out = Vec::with_capacity(x.len());
    for &p in perm {
        out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(x.shape(), out)
}

/// Pixel order that swaps two distinct positions of one `k×k` block.
pub fn in_block_swap(rng: &mut Prng, h: usize, w: usize, k: usize) -> Vec<usize> {
    let (by, bx) = (rng.below(h / k), rng.below(w / k));
    let a = rng.below(k * k);
    let b = (a + 1 + rng.below(k * k - 1)) % (k * k);
    let flat = |i: usize| (by * k + i / k) * w + bx * k + i % k;
    let mut perm: Vec<usize> = (0..h * w).collect();
    perm.swap(flat(a), flat(b));
    perm
}

/// Full attention module weights at unit scale: every projection is drawn
/// with standard deviation `1/√fan_in`.
fn module_weights(cfg: &CsaConfig, seed: u64) -> Result<WeightStore<f64>> {
    let mut store = WeightStore::new();
    let mut rng = Prng::new(seed);
    cfg.init(&mut Init::new(&mut store, &mut rng))?;
    rescale_to_fan_in(&mut store);
    Ok(store)
}

fn max_change(f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>, x: &Tensor<f64>, perm: &[usize]) -> Result<f64> {
    let moved_after = permute_pixels(&f(x)?, perm)?;
    let moved_before = f(&permute_pixels(x, perm)?)?;
    moved_before.max_abs_diff(&moved_after)
}

pub fn run_permtest(cfg: &PermtestConfig) -> Result<PermtestReport> {
    let mut rng = Prng::new(cfg.seed);
    let (h, w, d, k) = (cfg.h, cfg.w, cfg.dim, cfg.k);
    let csa = CsaConfig::new(d, 1, k);
    let mut report = PermtestReport {
        trials: cfg.trials,
        prototype_min_change: f64::INFINITY,
        module_min_change: f64::INFINITY,
        ..PermtestReport::default()
    };
    for _ in 0..cfg.trials {
        let x = Tensor::<f64>::sample(&mut rng, &[h, w, d], Dist::Gaussian)?;
        let proj = ProjWeights::<f64>::random(d, rng.next_u64())?;

        let shuffle = rng.permutation(h * w);
        let (map, out) = transposed_sa(&x, &proj)?;
        let (map_p, out_p) = transposed_sa(&permute_pixels(&x, &shuffle)?, &proj)?;
        report.transposed_map_dev = report.transposed_map_dev.max(map.max_abs_diff(&map_p)?);
        let eq = out_p.max_abs_diff(&permute_pixels(&out, &shuffle)?)?;
        report.transposed_equivariance_dev = report.transposed_equivariance_dev.max(eq);

        let swap = in_block_swap(&mut rng, h, w, k);
        let proto = max_change(|x| csa_prototype(x, k, 1.0, 1.0, &proj), &x, &swap)?;
        report.prototype_min_change = report.prototype_min_change.min(proto);

        let store = module_weights(&csa, rng.next_u64())?;
        let module = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let tape = Tape::inference();
            let params = Params::constants(&tape, &store);
            let y = csa.forward(&tape, &params.scope(""), &tape.constant(x.clone()), None)?;
            Ok(y.into_value())
        };
        report.module_min_change = report.module_min_change.min(max_change(module, &x, &swap)?);
    }
    Ok(report)
}
