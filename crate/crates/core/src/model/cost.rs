//! Whole-model analytic cost.

use crate::cost::Cost;
use crate::error::{shape_err, Result};

use super::config::{ModelConfig, STAGE_LEVEL};

/// Multiply-accumulates and parameters of one forward pass at `h×w`.
/// The extents are rounded up to the tile multiple, as inference pads them.
pub fn count_cost(cfg: &ModelConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("extents must be positive, got {}x{}", h, w));
    }
    let m = cfg.tile_multiple();
    let (h, w) = (h.next_multiple_of(m), w.next_multiple_of(m));
    let at = |l: usize| (h >> l, w >> l);
    let mut c = Cost::default();
    for l in 0..4 {
        let (hl, wl) = at(l);
        c += Cost::conv(hl * wl, 3, 3, cfg.embed_width(l), 1);
    }
    for stage in 0..7 {
        let level = STAGE_LEVEL[stage];
        let (hl, wl) = at(level);
        for i in 0..cfg.blocks[stage] {
            c += cfg.block(stage, i).cost(hl, wl);
        }
        let width = cfg.level_width(level);
        match stage {
            0..=2 => {
                let (hn, wn) = at(level + 1);
                c += Cost::conv(hn * wn, 2, width, cfg.level_width(level + 1), 1);
            }
            _ => {
                c += Cost::conv(hl * wl, 3, width, 3, 1);
                if level > 0 {
                    c += Cost::conv(hl * wl, 1, width, 2 * width, 1);
                }
            }
        }
    }
    Ok(c)
}
