//! Concerto self-attention with optional cross-dimensional communication.
//!
//! The module consumes a layer-normalised `h×w×d` map and returns `h×w×2d`.
//! Queries come from a `1×1` projection to `D = 2d` channels; keys and values
//! from a joint `1×1` projection of the same map or, for cross-attention, of
//! a normalised auxiliary map `Y`. The `D` channels are dealt out to the
//! active branches in the fixed order spatial Ripieno, spatial Concertino,
//! channel Ripieno, channel Concertino; inside a branch of width `B`,
//! channel `h·e + j` belongs to head `h` (`e = B/t`).
//!
//! With `n` blocks of `P = k²` pixels the four branches compute
//!
//! | branch | logits | contracted axis |
//! |--------|--------|-----------------|
//! | spatial Ripieno    | `t×n×P×P` | head channels `e` |
//! | spatial Concertino | `t×e×P×P` | blocks `n` |
//! | channel Ripieno    | `t×n×e×e` | pixels `P` |
//! | channel Concertino | `t×P×e×e` | blocks `n` |
//!
//! In split mode Ripieno logits are centred over `n` and divided by a
//! learnable `α`, Concertino logits divided by a learnable `β`. In
//! communication mode Ripieno logits are laid out on the `(h/k)×(w/k)` block
//! grid and mixed across heads by a `3×3` convolution, while Concertino logits
//! are mixed across their two leading axes by a square linear map.

use serde::{Deserialize, Serialize};

use crate::cost::Cost;
use crate::error::{shape_err, Error, Result};
use crate::kernels::Padding;
use crate::params::{Init, Scope};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsaMode {
    Split,
    Cdc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "rs")]
    SpatialRipieno,
    #[serde(rename = "cs")]
    SpatialConcertino,
    #[serde(rename = "rc")]
    ChannelRipieno,
    #[serde(rename = "cc")]
    ChannelConcertino,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::SpatialRipieno,
        Branch::SpatialConcertino,
        Branch::ChannelRipieno,
        Branch::ChannelConcertino,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::SpatialRipieno => "rs",
            Branch::SpatialConcertino => "cs",
            Branch::ChannelRipieno => "rc",
            Branch::ChannelConcertino => "cc",
        }
    }

    pub fn is_ripieno(self) -> bool {
        matches!(self, Branch::SpatialRipieno | Branch::ChannelRipieno)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, Branch::SpatialRipieno | Branch::SpatialConcertino)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsaConfig {
    /// Block width `d`; attention runs at `2d`.
    pub dim: usize,
    pub heads: usize,
    pub k: usize,
    pub mode: CsaMode,
    /// Active branches in canonical order.
    pub branches: Vec<Branch>,
    pub sca: bool,
    /// Channel count of the auxiliary input for cross-attention.
    pub cross: Option<usize>,
}

/// Per-branch intermediate results, exposed for inspection and tests.
pub struct BranchOutput<T: Real> {
    pub branch: Branch,
    /// Attention maps after softmax, shaped as in the module table.
    pub attention: Var<T>,
    /// Weighted values rearranged to `n×P×t×e`.
    pub values: Var<T>,
}

impl CsaConfig {
    /// All four branches with communication and the channel gate.
    pub fn new(dim: usize, heads: usize, k: usize) -> Self {
        Self { dim, heads, k, mode: CsaMode::Cdc, branches: Branch::ALL.to_vec(), sca: true, cross: None }
    }

    pub fn internal(&self) -> usize {
        2 * self.dim
    }

    pub fn branch_width(&self) -> usize {
        self.internal() / self.branches.len()
    }

    /// Channels per head inside one branch.
    pub fn head_width(&self) -> usize {
        self.branch_width() / self.heads
    }

    fn kv_width(&self) -> usize {
        self.cross.unwrap_or(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.k == 0 {
            return bad(format!("dim {}, heads {}, k {} must be positive", self.dim, self.heads, self.k));
        }
        if self.branches.is_empty() {
            return bad("at least one attention branch is required".into());
        }
        if self.branches.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("branches {:?} must be distinct and in canonical order", self.branches));
        }
        let m = self.branches.len();
        if self.internal() % m != 0 || self.branch_width() % self.heads != 0 {
            return bad(format!(
                "{} channels cannot be split into {} branches of {} heads",
                self.internal(),
                m,
                self.heads
            ));
        }
        Ok(())
    }

    fn scalar_init(&self, b: Branch) -> f64 {
        if b.is_spatial() {
            (self.head_width() as f64).sqrt()
        } else {
            self.k as f64
        }
    }

    pub fn init<T: Real>(&self, init: &mut Init<'_, T>) -> Result<()> {
        self.validate()?;
        let (d, dd, t, e, p) = (self.dim, self.internal(), self.heads, self.head_width(), self.k * self.k);
        if let Some(dy) = self.cross {
            init.layer_norm("norm_y", dy)?;
        }
        init.conv1x1("q", d, dd)?;
        init.conv1x1("kv", self.kv_width(), 2 * dd)?;
        for &b in &self.branches {
            let tag = b.tag();
            match (self.mode, b) {
                (CsaMode::Split, b) if b.is_ripieno() => init.full(&format!("{tag}.alpha"), &[1], self.scalar_init(b))?,
                (CsaMode::Split, b) => init.full(&format!("{tag}.beta"), &[1], self.scalar_init(b))?,
                (CsaMode::Cdc, b) if b.is_ripieno() => init.delta_conv(&format!("{tag}.cdc"), t)?,
                (CsaMode::Cdc, Branch::SpatialConcertino) => init.identity(&format!("{tag}.cdc"), t * e)?,
                (CsaMode::Cdc, _) => init.identity(&format!("{tag}.cdc"), t * p)?,
            }
        }
        if self.sca {
            init.conv1x1("sca", dd, dd)?;
        }
        init.conv1x1("proj", dd, dd)
    }

    /// Full module: branches, concatenation, optional channel gate and the
    /// output projection.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Scope<'_, T>,
        xn: &Var<T>,
        y: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let outs = self.branch_outputs(tape, p, xn, y)?;
        let (h, w) = (xn.shape()[0], xn.shape()[1]);
        let (n, pp) = ((h / self.k) * (w / self.k), self.k * self.k);
        let flat: Vec<Var<T>> = outs
            .iter()
            .map(|o| tape.reshape(&o.values, &[n, pp, self.branch_width()]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Var<T>> = flat.iter().collect();
        let xa = tape.block_merge(&tape.concat_last(&refs)?, self.k, h, w)?;
        let xa = if self.sca {
            let pooled = tape.mean_axes(&xa, &[0, 1])?;
            let gate = conv1x1(tape, p, "sca", &pooled)?;
            tape.mul(&xa, &gate)?
        } else {
            xa
        };
        conv1x1(tape, p, "proj", &xa)
    }

    pub fn branch_outputs<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Scope<'_, T>,
        xn: &Var<T>,
        y: Option<&Var<T>>,
    ) -> Result<Vec<BranchOutput<T>>> {
        self.validate()?;
        let [h, w, c] = *xn.shape() else {
            return Err(shape_err!("attention input must be h×w×c, got {:?}", xn.shape()));
        };
        if c != self.dim {
            return Err(shape_err!("attention input has {} channels, expected {}", c, self.dim));
        }
        let k = self.k;
        if h % k != 0 || w % k != 0 {
            return Err(shape_err!("{}x{} map is not divisible into {}x{} blocks", h, w, k, k));
        }
        let src = match (y, self.cross) {
            (Some(y), Some(dy)) => {
                if y.shape() != [h, w, dy] {
                    return Err(shape_err!(
                        "cross-attention input {:?} does not match {:?}",
                        y.shape(),
                        [h, w, dy]
                    ));
                }
                tape.layer_norm(y, p.get("norm_y.w")?, p.get("norm_y.b")?)?
            }
            (None, None) => xn.clone(),
            (Some(_), None) => return Err(Error::InvalidArgument("module has no cross-attention input".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("cross-attention input missing".into())),
        };
        let dd = self.internal();
        let q = tape.block_partition(&conv1x1(tape, p, "q", xn)?, k)?;
        let kv = tape.block_partition(&conv1x1(tape, p, "kv", &src)?, k)?;
        let (gh, gw) = (h / k, w / k);
        let (n, pp, bw, t, e) = (gh * gw, k * k, self.branch_width(), self.heads, self.head_width());
        let split = |v: &Var<T>, off: usize| -> Result<Var<T>> {
            tape.reshape(&tape.slice_last(v, off, bw)?, &[n, pp, t, e])
        };
        let mut outs = Vec::with_capacity(self.branches.len());
        for (i, &b) in self.branches.iter().enumerate() {
            let qb = split(&q, i * bw)?;
            let kb = split(&kv, i * bw)?;
            let vb = split(&kv, dd + i * bw)?;
            let bp = p.sub(b.tag());
            // Per branch: layouts of Q, Kᵀ and V, and the permutation taking
            // the weighted values back to n×P×t×e.
            let (qa, ka, back): ([usize; 4], [usize; 4], [usize; 4]) = match b {
                Branch::SpatialRipieno => ([2, 0, 1, 3], [2, 0, 3, 1], [1, 2, 0, 3]),
                Branch::SpatialConcertino => ([2, 3, 1, 0], [2, 3, 0, 1], [3, 2, 0, 1]),
                Branch::ChannelRipieno => ([2, 0, 3, 1], [2, 0, 1, 3], [1, 3, 0, 2]),
                Branch::ChannelConcertino => ([2, 1, 3, 0], [2, 1, 0, 3], [3, 1, 0, 2]),
            };
            let qm = tape.permute(&qb, &qa)?;
            let kt = tape.permute(&kb, &ka)?;
            let vm = tape.permute(&vb, &qa)?;
            let logits = tape.matmul(&qm, &kt)?;
            let logits = match self.mode {
                CsaMode::Split if b.is_ripieno() => {
                    let centred = tape.sub(&logits, &tape.mean_axes(&logits, &[1])?)?;
                    tape.div(&centred, bp.get("alpha")?)?
                }
                CsaMode::Split => tape.div(&logits, bp.get("beta")?)?,
                CsaMode::Cdc if b.is_ripieno() => ripieno_cdc(tape, &bp, &logits, gh, gw)?,
                CsaMode::Cdc => concertino_cdc(tape, &bp, &logits)?,
            };
            let attn = tape.softmax(&logits)?;
            let weighted = tape.matmul(&attn, &vm)?;
            outs.push(BranchOutput { branch: b, attention: attn, values: tape.permute(&weighted, &back)? });
        }
        Ok(outs)
    }

    /// Analytic multiply-accumulate and parameter count at `h×w`.
    pub fn cost(&self, h: usize, w: usize) -> Cost {
        let (d, dd, dy, t, e) = (self.dim, self.internal(), self.kv_width(), self.heads, self.head_width());
        let hw = h * w;
        let pp = self.k * self.k;
        let n = hw / pp;
        let mut c = Cost::conv(hw, 1, d, dd, 1) + Cost::conv(hw, 1, dy, 2 * dd, 1) + Cost::conv(hw, 1, dd, dd, 1);
        if self.cross.is_some() {
            c += Cost::layer_norm(dy);
        }
        if self.sca {
            let g = Cost::conv(1, 1, dd, dd, 1);
            c += Cost { fixed: g.linear, params: g.params, ..Cost::default() };
        }
        let tt = t * t;
        for &b in &self.branches {
            let (inner, extra) = match b {
                Branch::SpatialRipieno => (t * n * pp * pp * e, pp * pp),
                Branch::SpatialConcertino => (t * e * pp * pp * n, t * e),
                Branch::ChannelRipieno => (t * n * e * e * pp, e * e),
                Branch::ChannelConcertino => (t * pp * e * e * n, t * pp),
            };
            c.attention += 2 * inner as u64;
            match (self.mode, b.is_ripieno()) {
                (CsaMode::Split, _) => c.params += 1,
                (CsaMode::Cdc, true) => {
                    // `extra` logit planes, each convolved 3×3 over the block grid.
                    c.attention += (extra * n * 9 * tt) as u64;
                    c.params += (9 * tt) as u64;
                }
                (CsaMode::Cdc, false) => {
                    let m = extra;
                    let planes = if b.is_spatial() { pp * pp } else { e * e };
                    c.fixed += (planes * m * m) as u64;
                    c.params += (m * m) as u64;
                }
            }
        }
        c
    }
}

pub(crate) fn conv1x1<T: Real>(tape: &Tape<T>, p: &Scope<'_, T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let s = p.sub(name);
    tape.conv2d(x, s.get("w")?, Some(s.get("b")?), 1, 1, Padding::Same)
}

/// `t×n×a×a` logits → `a²` planes of `t` channels on the block grid, `3×3`
/// convolution, and back. The communication maps carry no bias: it would be
/// constant along the softmax axis and cancel.
fn ripieno_cdc<T: Real>(tape: &Tape<T>, p: &Scope<'_, T>, l: &Var<T>, gh: usize, gw: usize) -> Result<Var<T>> {
    let shape = l.shape().to_vec();
    let (t, a2) = (shape[0], shape[2] * shape[3]);
    let grid = tape.reshape(l, &[t, gh, gw, a2])?;
    let planes = tape.permute(&grid, &[3, 1, 2, 0])?;
    let mixed = tape.conv2d(&planes, p.get("cdc.w")?, None, 1, 1, Padding::Same)?;
    let grid = tape.permute(&mixed, &[3, 1, 2, 0])?;
    tape.reshape(&grid, &shape)
}

/// `t×m×a×a` logits mixed across the `t·m` leading entries.
fn concertino_cdc<T: Real>(tape: &Tape<T>, p: &Scope<'_, T>, l: &Var<T>) -> Result<Var<T>> {
    let shape = l.shape().to_vec();
    let (tm, a2) = (shape[0] * shape[1], shape[2] * shape[3]);
    let rows = tape.permute(&tape.reshape(l, &[tm, a2])?, &[1, 0])?;
    let mixed = tape.matmul(&rows, p.get("cdc.w")?)?;
    tape.reshape(&tape.permute(&mixed, &[1, 0])?, &shape)
}
