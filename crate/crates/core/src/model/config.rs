//! Architecture description, presets and the JSON config format.
//!
//! A config file may set any of `width`, `blocks`, `k`, `expansion`,
//! `heads`, `preset`, `mlp` and `attention`; fields it omits come from the
//! preset (default `lite`). `attention` is either `null` (no attention) or an
//! object `{"branches": ["rs", "cs", "rc", "cc"], "mode": "split"|"cdc",
//! "sca": bool}`.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::block::{BlockConfig, MlpKind};
use crate::concerto::{Branch, CsaConfig, CsaMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lite,
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub branches: Vec<Branch>,
    pub mode: CsaMode,
    pub sca: bool,
}

impl AttentionSpec {
    pub fn complete() -> Self {
        Self { branches: Branch::ALL.to_vec(), mode: CsaMode::Cdc, sca: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub width: usize,
    /// Blocks in the three encoder levels, the latent level and the three
    /// decoder levels, top to bottom to top.
    pub blocks: [usize; 7],
    pub k: usize,
    pub expansion: usize,
    /// Attention heads per level, top to bottom.
    pub heads: [usize; 4],
    pub preset: Preset,
    pub mlp: MlpKind,
    pub attention: Option<AttentionSpec>,
}

/// Level (0 = full resolution) of each of the seven stages.
pub const STAGE_LEVEL: [usize; 7] = [0, 1, 2, 3, 2, 1, 0];

/// Parameter-name prefix of each stage.
pub const STAGE_NAME: [&str; 7] = ["enc1", "enc2", "enc3", "latent", "dec3", "dec2", "dec1"];

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (width, blocks, k) = match p {
            Preset::Lite => (48, [4, 4, 12, 2, 12, 4, 4], 8),
            Preset::Full => (48, [6, 8, 24, 2, 24, 8, 8], 8),
            Preset::Tiny => (16, [1; 7], 2),
        };
        Self {
            width,
            blocks,
            k,
            expansion: 2,
            heads: [1, 2, 4, 8],
            preset: p,
            mlp: MlpKind::Gdmlp,
            attention: Some(AttentionSpec::complete()),
        }
    }

    pub fn lite() -> Self {
        Self::preset(Preset::Lite)
    }

    pub fn full() -> Self {
        Self::preset(Preset::Full)
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    /// Ablation variants of the lite model, numbered 0 to 8:
    /// feed-forward MLP only, gated-dconv MLP only, then attention branches
    /// `rs`, `rs+cs`, `rc`, `rc+cc`, all four, all four with the channel
    /// gate, and the complete model with communication.
    pub fn ablation(i: usize) -> Result<Self> {
        use Branch::*;
        let lite = Self::lite();
        let split = |branches: Vec<Branch>, sca: bool| Some(AttentionSpec { branches, mode: CsaMode::Split, sca });
        let cfg = match i {
            0 => Self { mlp: MlpKind::Ffn, attention: None, ..lite },
            1 => Self { attention: None, ..lite },
            2 => Self { attention: split(vec![SpatialRipieno], false), ..lite },
            3 => Self { attention: split(vec![SpatialRipieno, SpatialConcertino], false), ..lite },
            // Channel-only variants run a single head at every level.
            4 => Self { attention: split(vec![ChannelRipieno], false), heads: [1; 4], ..lite },
            5 => Self {
                attention: split(vec![ChannelRipieno, ChannelConcertino], false),
                heads: [1; 4],
                ..lite
            },
            6 => Self { attention: split(Branch::ALL.to_vec(), false), ..lite },
            7 => Self { attention: split(Branch::ALL.to_vec(), true), ..lite },
            8 => lite,
            _ => return Err(Error::InvalidArgument(format!("no ablation model {i}; expected 0-8"))),
        };
        Ok(cfg)
    }

    /// Channel width at a level.
    pub fn level_width(&self, level: usize) -> usize {
        self.width << level
    }

    /// Channel width of the embedded input at a level (1×-4× the base).
    pub fn embed_width(&self, level: usize) -> usize {
        self.width * (level + 1)
    }

    /// Spatial extents must be multiples of this.
    pub fn tile_multiple(&self) -> usize {
        8 * self.k
    }

    /// Auxiliary input width for the first block of a stage.
    pub fn cross_width(&self, stage: usize) -> Option<usize> {
        match stage {
            0 => None,
            1..=3 => Some(self.embed_width(stage)),
            _ => Some(self.level_width(STAGE_LEVEL[stage])),
        }
    }

    pub fn block(&self, stage: usize, index: usize) -> BlockConfig {
        let level = STAGE_LEVEL[stage];
        let dim = self.level_width(level);
        let cross = if index == 0 { self.cross_width(stage) } else { None };
        let attention = self.attention.as_ref().map(|a| CsaConfig {
            dim,
            heads: self.heads[level],
            k: self.k,
            mode: a.mode,
            branches: a.branches.clone(),
            sca: a.sca,
            cross,
        });
        let fuse = if attention.is_none() { cross } else { None };
        BlockConfig { dim, expansion: self.expansion, mlp: self.mlp, attention, fuse }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.k == 0 {
            return Err(Error::Config("width and k must be positive".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!("every stage needs at least one block: {:?}", self.blocks)));
        }
        if let Some(a) = &self.attention {
            let mut sorted = a.branches.clone();
            sorted.sort();
            sorted.dedup();
            if sorted != a.branches {
                return Err(Error::Config(format!("attention branches {:?} must be listed once each, in the order rs, cs, rc, cc", a.branches)));
            }
        }
        for stage in 0..7 {
            self.block(stage, 0).validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::preset(raw.preset.unwrap_or(Preset::Lite));
        if let Some(v) = raw.width {
            cfg.width = v;
        }
        if let Some(v) = raw.blocks {
            cfg.blocks = v;
        }
        if let Some(v) = raw.k {
            cfg.k = v;
        }
        if let Some(v) = raw.expansion {
            cfg.expansion = v;
        }
        if let Some(v) = raw.heads {
            cfg.heads = v;
        }
        if let Some(v) = raw.mlp {
            cfg.mlp = v;
        }
        if let Some(v) = raw.attention {
            cfg.attention = serde_json::from_value(v).map_err(|e| Error::Config(format!("attention: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Loads a JSON file, or resolves a bare preset name (`lite`, `full`,
    /// `tiny`) or ablation ladder entry (`ablation0` … `ablation8`).
    pub fn load(path_or_preset: &str) -> Result<Self> {
        match path_or_preset {
            "lite" => return Ok(Self::lite()),
            "full" => return Ok(Self::full()),
            "tiny" => return Ok(Self::tiny()),
            _ => {}
        }
        if let Some(i) = path_or_preset.strip_prefix("ablation").and_then(|i| i.parse().ok()) {
            return Self::ablation(i);
        }
        let text = std::fs::read_to_string(Path::new(path_or_preset))?;
        Self::from_json(&text)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    width: Option<usize>,
    blocks: Option<[usize; 7]>,
    k: Option<usize>,
    expansion: Option<usize>,
    heads: Option<[usize; 4]>,
    preset: Option<Preset>,
    mlp: Option<MlpKind>,
    /// Present-but-null is distinct from absent.
    #[serde(default, deserialize_with = "present")]
    attention: Option<Value>,
}

fn present<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}
