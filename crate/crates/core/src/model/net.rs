//! The multi-scale U-Net: parameter construction and the forward pass.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, Padding};
use crate::params::{Init, Params, Scope, WeightStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

use super::config::{ModelConfig, STAGE_LEVEL, STAGE_NAME};

/// Restored images, full resolution first.
#[derive(Debug, Clone)]
pub struct MultiScaleOutput<T: Real = f32> {
    pub scales: [Tensor<T>; 4],
}

/// Deterministic parameters for `cfg`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<WeightStore<T>> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    let mut rng = Prng::new(seed);
    let mut init = Init::new(&mut store, &mut rng);
    for l in 0..4 {
        init.conv(&format!("embed{l}"), 3, 3, cfg.embed_width(l))?;
    }
    for stage in 0..7 {
        let level = STAGE_LEVEL[stage];
        for i in 0..cfg.blocks[stage] {
            cfg.block(stage, i).init(&mut init.sub(&format!("{}.blk{i}", STAGE_NAME[stage])))?;
        }
        match stage {
            0..=2 => init.conv(&format!("down{}", level + 1), 2, cfg.level_width(level), cfg.level_width(level + 1))?,
            _ => {
                init.conv(&format!("out{level}"), 3, cfg.level_width(level), 3)?;
                if level > 0 {
                    init.conv1x1(&format!("up{level}"), cfg.level_width(level), 2 * cfg.level_width(level))?;
                }
            }
        }
    }
    Ok(store)
}

/// Checks that `store` holds exactly the tensors `cfg` needs, with matching
/// shapes.
pub fn check_weights<T: Real>(cfg: &ModelConfig, store: &WeightStore<T>) -> Result<()> {
    let want = build_model::<f32>(cfg, 0)?;
    for (name, t) in want.iter() {
        let got = store.get(name)?;
        if got.shape() != t.shape() {
            return Err(Error::Config(format!("weight `{name}` is {:?}, config needs {:?}", got.shape(), t.shape())));
        }
    }
    if let Some(extra) = store.names().find(|n| !want.contains(n)) {
        return Err(Error::Config(format!("weight `{extra}` is not part of this config")));
    }
    Ok(())
}

/// Names of every block's output projection and of the output heads.
pub fn final_projection_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for stage in 0..7 {
        for i in 0..cfg.blocks[stage] {
            for n in cfg.block(stage, i).final_projection() {
                names.push(format!("{}.blk{i}.{n}", STAGE_NAME[stage]));
            }
        }
    }
    for l in 0..4 {
        names.push(format!("out{l}.w"));
        names.push(format!("out{l}.b"));
    }
    names
}

/// With these zeroed every block is the identity and each output equals its
/// input image exactly.
pub fn zero_final_projections<T: Real>(cfg: &ModelConfig, store: &mut WeightStore<T>) -> Result<()> {
    crate::block::zero_params(store, &final_projection_names(cfg))
}

/// `I_0` and its three successive halvings.
pub fn input_pyramid<T: Real>(tape: &Tape<T>, i0: &Var<T>) -> Result<[Var<T>; 4]> {
    let i1 = tape.downsample_half(i0)?;
    let i2 = tape.downsample_half(&i1)?;
    let i3 = tape.downsample_half(&i2)?;
    Ok([i0.clone(), i1, i2, i3])
}

fn conv<T: Real>(tape: &Tape<T>, p: &Scope<'_, T>, name: &str, x: &Var<T>, stride: usize, pad: Padding) -> Result<Var<T>> {
    let s = p.sub(name);
    tape.conv2d(x, s.get("w")?, Some(s.get("b")?), stride, 1, pad)
}

fn stage<T: Real>(
    cfg: &ModelConfig,
    tape: &Tape<T>,
    p: &Scope<'_, T>,
    idx: usize,
    x: Var<T>,
    y: Option<&Var<T>>,
) -> Result<Var<T>> {
    let mut x = x;
    for i in 0..cfg.blocks[idx] {
        let blk = cfg.block(idx, i);
        let aux = if i == 0 { y } else { None };
        x = blk.forward(tape, &p.sub(&format!("{}.blk{i}", STAGE_NAME[idx])), &x, aux)?;
    }
    Ok(x)
}

/// Forward pass on an `h×w×3` image whose extents are multiples of
/// [`ModelConfig::tile_multiple`]. Returns `O_0..O_3`.
pub fn forward_vars<T: Real>(cfg: &ModelConfig, tape: &Tape<T>, params: &Params<T>, i0: &Var<T>) -> Result<[Var<T>; 4]> {
    let m = cfg.tile_multiple();
    match *i0.shape() {
        [h, w, 3] if h % m == 0 && w % m == 0 => {}
        _ => return Err(shape_err!("model input must be h×w×3 with h, w multiples of {}, got {:?}", m, i0.shape())),
    }
    let p = params.scope("");
    let inputs = input_pyramid(tape, i0)?;
    let emb: Vec<Var<T>> = (0..4)
        .map(|l| conv(tape, &p, &format!("embed{l}"), &inputs[l], 1, Padding::Same))
        .collect::<Result<_>>()?;

    let e1 = stage(cfg, tape, &p, 0, emb[0].clone(), None)?;
    let e2 = stage(cfg, tape, &p, 1, conv(tape, &p, "down1", &e1, 2, Padding::Valid)?, Some(&emb[1]))?;
    let e3 = stage(cfg, tape, &p, 2, conv(tape, &p, "down2", &e2, 2, Padding::Valid)?, Some(&emb[2]))?;
    let lat = stage(cfg, tape, &p, 3, conv(tape, &p, "down3", &e3, 2, Padding::Valid)?, Some(&emb[3]))?;

    let head = |l: usize, x: &Var<T>| -> Result<Var<T>> {
        tape.add(&conv(tape, &p, &format!("out{l}"), x, 1, Padding::Same)?, &inputs[l])
    };
    let up = |l: usize, x: &Var<T>| -> Result<Var<T>> {
        tape.pixel_shuffle(&conv(tape, &p, &format!("up{l}"), x, 1, Padding::Same)?, 2)
    };
    let o3 = head(3, &lat)?;
    let d3 = stage(cfg, tape, &p, 4, up(3, &lat)?, Some(&e3))?;
    let o2 = head(2, &d3)?;
    let d2 = stage(cfg, tape, &p, 5, up(2, &d3)?, Some(&e2))?;
    let o1 = head(1, &d2)?;
    let d1 = stage(cfg, tape, &p, 6, up(1, &d2)?, Some(&e1))?;
    let o0 = head(0, &d1)?;
    Ok([o0, o1, o2, o3])
}

/// Inference on an arbitrary `h×w×3` image: reflect-pads to the tile
/// multiple, runs the network and crops every scale back.
pub fn forward_multiscale<T: Real>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>) -> Result<MultiScaleOutput<T>> {
    let m = cfg.tile_multiple();
    let [h, w, 3] = *img.shape() else {
        return Err(shape_err!("expected an h×w×3 image, got {:?}", img.shape()));
    };
    if h < m || w < m {
        return Err(shape_err!("image {}x{} is smaller than one {}x{} tile", h, w, m, m));
    }
    let (ph, pw) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
    let padded = if ph + pw > 0 { kernels::reflect_pad(img, ph, pw)? } else { img.clone() };
    let tape = Tape::inference();
    let params = Params::constants(&tape, store);
    let outs = forward_vars(cfg, &tape, &params, &tape.constant(padded))?;
    let crop = |s: usize| -> Result<Tensor<T>> {
        let o = outs[s].value();
        if ph + pw == 0 {
            return Ok(o.clone());
        }
        kernels::crop(o, h.div_ceil(1 << s), w.div_ceil(1 << s))
    };
    Ok(MultiScaleOutput { scales: [crop(0)?, crop(1)?, crop(2)?, crop(3)?] })
}
