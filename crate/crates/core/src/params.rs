//! Named parameter storage, deterministic initialisation and tape binding.
//!
//! Weight file layout: `b"CCRT"`, `u32` version, `u64` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name and a CCT1 tensor record.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::{Dist, Real, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CCRT";
pub const WEIGHTS_VERSION: u32 = 1;

/// Standard deviation of gaussian-initialised projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, PartialEq, Default)]
pub struct WeightStore<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> WeightStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
        out.write_all(&(self.map.len() as u64).to_le_bytes())?;
        for (name, t) in &self.map {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(bytes)?;
            write_tensor(out, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

impl WeightStore<f32> {
    pub fn read<R: Read>(inp: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic).map_err(|_| Error::Format("truncated weight header".into()))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format(format!("bad weight magic {:?}", magic)));
        }
        let mut b4 = [0u8; 4];
        inp.read_exact(&mut b4).map_err(|_| Error::Format("truncated weight header".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let mut b8 = [0u8; 8];
        inp.read_exact(&mut b8).map_err(|_| Error::Format("truncated weight header".into()))?;
        let count = u64::from_le_bytes(b8);
        let mut store = Self::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            inp.read_exact(&mut b2).map_err(|_| Error::Format("truncated name length".into()))?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            inp.read_exact(&mut name).map_err(|_| Error::Format("truncated name".into()))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let t = read_tensor(inp)?;
            store.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut cur = bytes.as_slice();
        let store = Self::read(&mut cur)?;
        if !cur.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after weights", cur.len())));
        }
        Ok(store)
    }
}

impl<T: Real> std::fmt::Debug for WeightStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.map.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

/// Writes parameters under a name prefix, one forked PRNG stream each, so
/// that a name's initial value depends only on the seed and its position in
/// the initialisation order.
pub struct Init<'a, T: Real> {
    store: &'a mut WeightStore<T>,
    rng: &'a mut Prng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut WeightStore<T>, rng: &'a mut Prng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        Init { store: self.store, rng: self.rng, prefix: join(&self.prefix, name) }
    }

    fn put(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.store.insert(join(&self.prefix, name), t)
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let mut rng = self.rng.fork();
        let t = Tensor::<f64>::sample(&mut rng, shape, Dist::Gaussian)?.scale(std).cast();
        self.put(name, t)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.rng.fork();
        self.put(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.full(name, shape, 0.0)
    }

    /// `1×1` convolution `cin → cout`: gaussian weight, zero bias.
    pub fn conv1x1(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        self.conv(name, 1, cin, cout)
    }

    pub fn conv(&mut self, name: &str, ks: usize, cin: usize, cout: usize) -> Result<()> {
        self.gaussian(&format!("{name}.w"), &[ks, ks, cin, cout], INIT_STD)?;
        self.zeros(&format!("{name}.b"), &[cout])
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.full(&format!("{name}.w"), &[c], 1.0)?;
        self.zeros(&format!("{name}.b"), &[c])
    }

    /// Bias-free `3×3` dense convolution `c → c` that passes its input
    /// through.
    pub fn delta_conv(&mut self, name: &str, c: usize) -> Result<()> {
        self.rng.fork();
        let mut w = Tensor::zeros(&[3, 3, c, c]);
        for i in 0..c {
            w.set(&[1, 1, i, i], T::one());
        }
        self.put(&format!("{name}.w"), w)
    }

    /// Bias-free `n×n` identity matrix.
    pub fn identity(&mut self, name: &str, n: usize) -> Result<()> {
        self.rng.fork();
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.set(&[i, i], T::one());
        }
        self.put(&format!("{name}.w"), w)
    }
}

/// Rescales every gaussian convolution weight from [`INIT_STD`] to
/// `1/√fan_in`, giving unit-scale activations. Communication weights keep
/// their pass-through initialisation.
pub fn rescale_to_fan_in<T: Real>(store: &mut WeightStore<T>) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".w") && t.ndim() == 4 && !name.contains("cdc") {
            let fan_in = t.dim(0) * t.dim(1) * t.dim(2);
            *t = t.scale(T::lit(1.0 / (INIT_STD * (fan_in as f64).sqrt())));
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A weight store placed on a tape.
pub struct Params<T: Real> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Real> Params<T> {
    /// Every tensor becomes a gradient-tracked leaf.
    pub fn leaves(tape: &Tape<T>, store: &WeightStore<T>) -> Self {
        Self { vars: store.iter().map(|(k, v)| (k.to_string(), tape.leaf(v.clone()))).collect() }
    }

    pub fn constants(tape: &Tape<T>, store: &WeightStore<T>) -> Self {
        Self {
            vars: store.iter().map(|(k, v)| (k.to_string(), tape.constant(v.clone()))).collect(),
        }
    }

    /// Pairs existing tape variables with parameter names.
    pub fn from_vars(names: &[String], vars: &[Var<T>]) -> Self {
        Self { vars: names.iter().cloned().zip(vars.iter().cloned()).collect() }
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, T> {
        Scope { params: self, prefix: prefix.to_string() }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Prefix view into [`Params`].
#[derive(Clone)]
pub struct Scope<'a, T: Real> {
    params: &'a Params<T>,
    prefix: String,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn sub(&self, name: &str) -> Scope<'a, T> {
        Scope { params: self.params, prefix: join(&self.prefix, name) }
    }

    pub fn get(&self, name: &str) -> Result<&'a Var<T>> {
        let full = join(&self.prefix, name);
        self.params.vars.get(&full).ok_or(Error::MissingParam(full))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.vars.contains_key(&join(&self.prefix, name))
    }
}
