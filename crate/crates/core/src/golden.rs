//! Golden vectors: stored inputs and expected outputs that every build must
//! reproduce.
//!
//! A suite directory holds `manifest.json` plus two CCT1 tensors per case.
//! Weights are not stored; they are regenerated from the case seed, and so
//! is the input, which is compared against its stored copy before use.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, MlpKind};
use crate::concerto::{Branch, CsaConfig, CsaMode};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::model::{build_model, forward_vars, ModelConfig};
use crate::params::{rescale_to_fan_in, Init, Params, WeightStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::{Dist, Real, Tensor};
use crate::zoo::{csa_prototype, self_attention, transposed_sa, window_msa, ProjWeights};

pub const MANIFEST: &str = "manifest.json";

/// What a case computes. Cross-attention inputs are stored as `X` and `Y`
/// concatenated along channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseSpec {
    SelfAttention { h: usize, w: usize, d: usize },
    WindowMsa { h: usize, w: usize, d: usize, k: usize },
    TransposedSa { h: usize, w: usize, d: usize },
    CsaPrototype { h: usize, w: usize, d: usize, k: usize },
    Csa { h: usize, w: usize, config: CsaConfig },
    Block { h: usize, w: usize, config: BlockConfig },
    /// Full-resolution output of the network; `config` is model JSON.
    Model { h: usize, w: usize, config: serde_json::Value },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCase {
    pub id: String,
    pub spec: CaseSpec,
    pub seed: u64,
    pub precision: Precision,
    pub input: String,
    pub expected: String,
    /// Largest allowed absolute difference; `None` demands identical bits.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub cases: Vec<GoldenCase>,
}

impl GoldenCase {
    pub fn new(id: &str, spec: CaseSpec, seed: u64, precision: Precision) -> Self {
        Self {
            id: id.to_string(),
            spec,
            seed,
            precision,
            input: format!("{id}.input.cct"),
            expected: format!("{id}.expected.cct"),
            tolerance: None,
        }
    }

    fn seeds(&self) -> (u64, u64) {
        let mut rng = Prng::new(self.seed);
        (rng.next_u64(), rng.next_u64())
    }

    pub fn input_shape(&self) -> Result<Vec<usize>> {
        Ok(match &self.spec {
            CaseSpec::SelfAttention { h, w, d }
            | CaseSpec::WindowMsa { h, w, d, .. }
            | CaseSpec::TransposedSa { h, w, d }
            | CaseSpec::CsaPrototype { h, w, d, .. } => vec![*h, *w, *d],
            CaseSpec::Csa { h, w, config } => vec![*h, *w, config.dim + config.cross.unwrap_or(0)],
            CaseSpec::Block { h, w, config } => vec![*h, *w, config.dim + config.cross_width().unwrap_or(0)],
            CaseSpec::Model { h, w, .. } => vec![*h, *w, 3],
        })
    }

    /// The case input as regenerated from its seed.
    pub fn generate_input(&self) -> Result<Tensor<f32>> {
        let dist = match self.spec {
            CaseSpec::Model { .. } => Dist::Uniform,
            _ => Dist::Gaussian,
        };
        Tensor::from_seed(self.seeds().0, &self.input_shape()?, dist)
    }

    /// Output for `input`, rounded to 32 bits.
    pub fn compute(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self.precision {
            Precision::F32 => self.compute_as::<f32>(&input.cast()).map(|t| t.cast()),
            Precision::F64 => self.compute_as::<f64>(&input.cast()).map(|t| t.cast()),
        }
    }

    fn compute_as<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let wseed = self.seeds().1;
        let proj = |d: usize| ProjWeights::<T>::random(d, wseed);
        match &self.spec {
            CaseSpec::SelfAttention { d, .. } => self_attention(x, &proj(*d)?),
            CaseSpec::WindowMsa { d, k, .. } => window_msa(x, *k, &proj(*d)?),
            CaseSpec::TransposedSa { d, .. } => Ok(transposed_sa(x, &proj(*d)?)?.1),
            CaseSpec::CsaPrototype { d, k, .. } => csa_prototype(x, *k, T::lit(1.5), T::lit(2.0), &proj(*d)?),
            CaseSpec::Csa { config, .. } => {
                let store = seeded_store(wseed, |init| config.init(init))?;
                run_tape(&store, x, config.dim, |tape, p, xs, y| config.forward(tape, &p.scope(""), xs, y))
            }
            CaseSpec::Block { config, .. } => {
                let store = seeded_store(wseed, |init| config.init(init))?;
                run_tape(&store, x, config.dim, |tape, p, xs, y| config.forward(tape, &p.scope(""), xs, y))
            }
            CaseSpec::Model { config, .. } => {
                let cfg = ModelConfig::from_json(&config.to_string())?;
                let store = build_model::<T>(&cfg, wseed)?;
                let tape = Tape::inference();
                let params = Params::constants(&tape, &store);
                let [o0, ..] = forward_vars(&cfg, &tape, &params, &tape.constant(x.clone()))?;
                Ok(o0.into_value())
            }
        }
    }
}

fn seeded_store<T: Real>(seed: u64, f: impl FnOnce(&mut Init<'_, T>) -> Result<()>) -> Result<WeightStore<T>> {
    let mut store = WeightStore::new();
    let mut rng = Prng::new(seed);
    f(&mut Init::new(&mut store, &mut rng))?;
    rescale_to_fan_in(&mut store);
    Ok(store)
}

/// Runs `f` on `x`, split into the module input and the auxiliary input
/// when it has more than `dim` channels.
fn run_tape<T: Real>(
    store: &WeightStore<T>,
    x: &Tensor<T>,
    dim: usize,
    f: impl Fn(&Tape<T>, &Params<T>, &Var<T>, Option<&Var<T>>) -> Result<Var<T>>,
) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let params = Params::constants(&tape, store);
    let xv = tape.constant(x.clone());
    let c = x.dim(-1);
    let (xs, y) = if c > dim {
        (tape.slice_last(&xv, 0, dim)?, Some(tape.slice_last(&xv, dim, c - dim)?))
    } else {
        (xv, None)
    };
    Ok(f(&tape, &params, &xs, y.as_ref())?.into_value())
}

/// Twelve cases covering every attention scheme, each concerto mode and
/// branch layout, both block kinds, cross-attention, 64-bit evaluation and
/// the tiny network.
pub fn default_suite(seed: u64) -> Vec<GoldenCase> {
    let csa = |mode, branches: &[Branch], heads, sca, cross| CsaConfig {
        dim: 8,
        heads,
        k: 2,
        mode,
        branches: branches.to_vec(),
        sca,
        cross,
    };
    let all = &Branch::ALL[..];
    let block = |attention, mlp, fuse| BlockConfig { dim: 8, expansion: 2, mlp, attention, fuse };
    let tiny = serde_json::to_value(ModelConfig::tiny()).expect("config serialises");
    let specs = vec![
        ("self_attention", CaseSpec::SelfAttention { h: 6, w: 6, d: 4 }, Precision::F32),
        ("window_msa", CaseSpec::WindowMsa { h: 8, w: 8, d: 4, k: 4 }, Precision::F32),
        ("transposed_sa", CaseSpec::TransposedSa { h: 6, w: 4, d: 5 }, Precision::F32),
        ("csa_prototype", CaseSpec::CsaPrototype { h: 8, w: 8, d: 4, k: 4 }, Precision::F32),
        ("csa_split", CaseSpec::Csa { h: 4, w: 8, config: csa(CsaMode::Split, all, 1, false, None) }, Precision::F32),
        ("csa_cdc", CaseSpec::Csa { h: 4, w: 8, config: csa(CsaMode::Cdc, all, 2, true, None) }, Precision::F32),
        (
            "csa_spatial_cross",
            CaseSpec::Csa { h: 4, w: 4, config: csa(CsaMode::Cdc, &all[..2], 2, false, Some(6)) },
            Precision::F32,
        ),
        (
            "csa_channel_f64",
            CaseSpec::Csa { h: 4, w: 4, config: csa(CsaMode::Split, &all[2..], 1, true, None) },
            Precision::F64,
        ),
        (
            "block_gdmlp",
            CaseSpec::Block { h: 4, w: 4, config: block(Some(csa(CsaMode::Cdc, all, 1, true, Some(4))), MlpKind::Gdmlp, None) },
            Precision::F32,
        ),
        (
            "block_ffn_fuse",
            CaseSpec::Block { h: 4, w: 4, config: block(None, MlpKind::Ffn, Some(3)) },
            Precision::F32,
        ),
        ("model_tiny", CaseSpec::Model { h: 16, w: 16, config: tiny.clone() }, Precision::F32),
        ("model_tiny_f64", CaseSpec::Model { h: 16, w: 32, config: tiny }, Precision::F64),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (id, spec, prec))| GoldenCase::new(id, spec, seed.wrapping_add(i as u64), prec))
        .collect()
}

/// Writes `cases` with freshly computed expectations into `dir`.
pub fn generate(dir: impl AsRef<Path>, cases: &[GoldenCase]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for case in cases {
        let input = case.generate_input()?;
        let out = case.compute(&input)?;
        save_tensor(dir.join(&case.input), &input)?;
        save_tensor(dir.join(&case.expected), &out)?;
    }
    let manifest = Manifest { version: 1, cases: cases.to_vec() };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != 1 {
        return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    Fail(String),
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub id: String,
    pub verdict: Verdict,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.verdict {
            Verdict::Pass => write!(f, "PASS  {}", self.id),
            Verdict::Fail(why) => write!(f, "FAIL  {}: {}", self.id, why),
        }
    }
}

fn compare(got: &Tensor<f32>, want: &Tensor<f32>, tol: Option<f64>) -> std::result::Result<(), String> {
    if got.shape() != want.shape() {
        return Err(format!("shape {:?}, expected {:?}", got.shape(), want.shape()));
    }
    match tol {
        None if got.bit_eq(want) => Ok(()),
        None => {
            let diff = got.data().iter().zip(want.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            Err(format!("{diff} of {} values differ bitwise", got.len()))
        }
        Some(t) => {
            let d = got.max_abs_diff(want).map_err(|e| e.to_string())? as f64;
            if d <= t {
                Ok(())
            } else {
                Err(format!("max deviation {d:e} exceeds {t:e}"))
            }
        }
    }
}

fn check_case(dir: &Path, case: &GoldenCase) -> std::result::Result<(), String> {
    let stored_in = load_tensor(dir.join(&case.input)).map_err(|e| format!("input: {e}"))?;
    let expected = load_tensor(dir.join(&case.expected)).map_err(|e| format!("expected: {e}"))?;
    let regen = case.generate_input().map_err(|e| e.to_string())?;
    compare(&stored_in, &regen, None).map_err(|e| format!("stored input does not match its seed: {e}"))?;
    let got = case.compute(&stored_in).map_err(|e| e.to_string())?;
    compare(&got, &expected, case.tolerance)
}

/// Recomputes every case of the suite in `dir`. A case that cannot be read
/// fails on its own; the rest are still checked.
pub fn check(dir: impl AsRef<Path>) -> Result<Vec<CaseResult>> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    Ok(manifest
        .cases
        .iter()
        .map(|case| CaseResult {
            id: case.id.clone(),
            verdict: match check_case(dir, case) {
                Ok(()) => Verdict::Pass,
                Err(e) => Verdict::Fail(e),
            },
        })
        .collect())
}
