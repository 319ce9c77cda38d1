//! Gated-dconv MLP and the fused attention block.
//!
//! With attention the block computes
//! `X + W_g((A + U) ⊙ Z)` where `X̂ = LN(X)`, `U = dw3x3(W_u X̂)`,
//! `Z = W_z X̂` and `A` is the concerto module applied to `X̂`. Without it,
//! `A` is dropped. The feed-forward variant `X + W_2 GELU(W_1 X̂)` exists for
//! the cost ablations. Blocks without attention that sit at a
//! cross-attention position add a `1×1` embedding of the auxiliary input to
//! `X` first.

use serde::{Deserialize, Serialize};

use crate::concerto::{conv1x1, CsaConfig};
use crate::cost::Cost;
use crate::error::{shape_err, Error, Result};
use crate::kernels::Padding;
use crate::params::{Init, Scope, WeightStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Hidden width multiplier of the feed-forward variant.
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    Gdmlp,
    Ffn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub expansion: usize,
    pub mlp: MlpKind,
    pub attention: Option<CsaConfig>,
    /// Auxiliary input width for attention-free blocks at a cross position.
    pub fuse: Option<usize>,
}

impl BlockConfig {
    pub fn gdmlp(dim: usize, attention: Option<CsaConfig>) -> Self {
        Self { dim, expansion: 2, mlp: MlpKind::Gdmlp, attention, fuse: None }
    }

    pub fn hidden(&self) -> usize {
        match self.mlp {
            MlpKind::Gdmlp => self.dim * self.expansion,
            MlpKind::Ffn => self.dim * FFN_EXPANSION,
        }
    }

    /// Width of the auxiliary input this block expects, if any.
    pub fn cross_width(&self) -> Option<usize> {
        self.fuse.or_else(|| self.attention.as_ref().and_then(|a| a.cross))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.expansion == 0 {
            return Err(Error::Config("block width and expansion must be positive".into()));
        }
        if let Some(a) = &self.attention {
            a.validate()?;
            if self.mlp == MlpKind::Ffn {
                return Err(Error::Config("attention is only supported with the gated-dconv MLP".into()));
            }
            if a.dim != self.dim || a.internal() != self.hidden() {
                return Err(Error::Config(format!(
                    "attention width {} does not match MLP hidden width {}",
                    a.internal(),
                    self.hidden()
                )));
            }
            if self.fuse.is_some() {
                return Err(Error::Config("attention blocks take their auxiliary input directly".into()));
            }
        }
        Ok(())
    }

    pub fn init<T: Real>(&self, init: &mut Init<'_, T>) -> Result<()> {
        self.validate()?;
        let (d, e) = (self.dim, self.hidden());
        if let Some(dy) = self.fuse {
            init.conv1x1("fuse", dy, d)?;
        }
        init.layer_norm("norm", d)?;
        match self.mlp {
            MlpKind::Gdmlp => {
                init.conv1x1("u", d, e)?;
                init.gaussian("dw.w", &[3, 3, 1, e], crate::params::INIT_STD)?;
                init.zeros("dw.b", &[e])?;
                init.conv1x1("z", d, e)?;
                if let Some(a) = &self.attention {
                    a.init(&mut init.sub("csa"))?;
                }
                init.conv1x1("g", e, d)
            }
            MlpKind::Ffn => {
                init.conv1x1("fc1", d, e)?;
                init.conv1x1("fc2", e, d)
            }
        }
    }

    /// Names (relative to the block) of the output projection.
    pub fn final_projection(&self) -> [&'static str; 2] {
        match self.mlp {
            MlpKind::Gdmlp => ["g.w", "g.b"],
            MlpKind::Ffn => ["fc2.w", "fc2.b"],
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Scope<'_, T>,
        x: &Var<T>,
        y: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        if x.shape().len() != 3 || x.shape()[2] != self.dim {
            return Err(shape_err!("block of width {} got input {:?}", self.dim, x.shape()));
        }
        if y.is_some() != self.cross_width().is_some() {
            return Err(Error::InvalidArgument(format!(
                "block expects {} auxiliary input",
                if y.is_some() { "no" } else { "an" }
            )));
        }
        let x = match (self.fuse, y) {
            (Some(_), Some(y)) => tape.add(x, &conv1x1(tape, p, "fuse", y)?)?,
            _ => x.clone(),
        };
        let xn = tape.layer_norm(&x, p.get("norm.w")?, p.get("norm.b")?)?;
        let delta = match self.mlp {
            MlpKind::Gdmlp => {
                let a = match &self.attention {
                    Some(a) => Some(a.forward(tape, &p.sub("csa"), &xn, y)?),
                    None => None,
                };
                self.gated_mlp(tape, p, &xn, a.as_ref())?
            }
            MlpKind::Ffn => {
                let hidden = tape.gelu(&conv1x1(tape, p, "fc1", &xn)?);
                conv1x1(tape, p, "fc2", &hidden)?
            }
        };
        tape.add(&x, &delta)
    }

    /// `W_g((A + U) ⊙ Z)` on an already normalized input; `a` is the
    /// attention output, if any. No normalization or residual.
    pub fn gated_mlp<T: Real>(&self, tape: &Tape<T>, p: &Scope<'_, T>, xn: &Var<T>, a: Option<&Var<T>>) -> Result<Var<T>> {
        let pre_u = conv1x1(tape, p, "u", xn)?;
        let u = tape.conv2d(&pre_u, p.get("dw.w")?, Some(p.get("dw.b")?), 1, self.hidden(), Padding::Same)?;
        let z = conv1x1(tape, p, "z", xn)?;
        let mixed = match a {
            Some(a) => tape.add(a, &u)?,
            None => u,
        };
        conv1x1(tape, p, "g", &tape.mul(&mixed, &z)?)
    }

    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let (hw, d, e) = (h * w, self.dim, self.hidden());
        let mut c = Cost::layer_norm(d);
        if let Some(dy) = self.fuse {
            c += Cost::conv(hw, 1, dy, d, 1);
        }
        match self.mlp {
            MlpKind::Gdmlp => {
                c += Cost::conv(hw, 1, d, e, 1) * 2 + Cost::conv(hw, 3, e, e, e) + Cost::conv(hw, 1, e, d, 1);
                if let Some(a) = &self.attention {
                    c += a.cost(h, w);
                }
            }
            MlpKind::Ffn => c += Cost::conv(hw, 1, d, e, 1) + Cost::conv(hw, 1, e, d, 1),
        }
        c
    }
}

/// Zeroes the named tensors in place.
pub fn zero_params<T: Real>(store: &mut WeightStore<T>, names: &[String]) -> Result<()> {
    for n in names {
        let t = store.get_mut(n)?;
        *t = Tensor::zeros(t.shape());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use crate::prng::Prng;
    use crate::tensor::Dist;

    fn store_for(cfg: &BlockConfig, seed: u64) -> WeightStore<f64> {
        let mut store = WeightStore::new();
        let mut rng = Prng::new(seed);
        cfg.init(&mut Init::new(&mut store, &mut rng)).unwrap();
        store
    }

    fn eval(cfg: &BlockConfig, store: &WeightStore<f64>, x: &Tensor<f64>, y: Option<&Tensor<f64>>) -> (u64, Tensor<f64>) {
        let tape = Tape::inference();
        let p = Params::constants(&tape, store);
        let xv = tape.constant(x.clone());
        let yv = y.map(|y| tape.constant(y.clone()));
        let out = cfg.forward(&tape, &p.scope(""), &xv, yv.as_ref()).unwrap();
        (tape.macs(), out.into_value())
    }

    #[test]
    fn channel_trace_and_cost() {
        let variants = [
            BlockConfig::gdmlp(4, None),
            BlockConfig::gdmlp(4, Some(CsaConfig::new(4, 1, 2))),
            BlockConfig { fuse: Some(3), ..BlockConfig::gdmlp(4, None) },
            BlockConfig::gdmlp(4, Some(CsaConfig { cross: Some(6), ..CsaConfig::new(4, 2, 2) })),
            BlockConfig { mlp: MlpKind::Ffn, ..BlockConfig::gdmlp(4, None) },
        ];
        for cfg in variants {
            let store = store_for(&cfg, 1);
            let x = Tensor::from_seed(2, &[4, 4, 4], Dist::Gaussian).unwrap();
            let y = cfg.cross_width().map(|c| Tensor::from_seed(3, &[4, 4, c], Dist::Gaussian).unwrap());
            let (macs, out) = eval(&cfg, &store, &x, y.as_ref());
            assert_eq!(out.shape(), &[4, 4, 4]);
            let c = cfg.cost(4, 4);
            assert_eq!(macs, c.macs(), "{cfg:?}");
            assert_eq!(c.params as usize, store.num_params(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_final_projection_is_identity() {
        let cfg = BlockConfig::gdmlp(4, Some(CsaConfig::new(4, 1, 2)));
        let mut store = store_for(&cfg, 5);
        zero_params(&mut store, &cfg.final_projection().map(String::from)).unwrap();
        let x = Tensor::from_seed(6, &[4, 4, 4], Dist::Gaussian).unwrap();
        assert!(eval(&cfg, &store, &x, None).1.bit_eq(&x));
    }

    #[test]
    fn mismatched_attention_width_rejected() {
        let cfg = BlockConfig { expansion: 3, ..BlockConfig::gdmlp(4, Some(CsaConfig::new(4, 1, 2))) };
        assert!(cfg.validate().is_err());
    }
}
