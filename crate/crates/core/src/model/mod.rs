//! The Concertormer U-Net.
//!
//! Four input scales `I_0..I_3` (successive halvings) are embedded by `3×3`
//! convolutions at 1×–4× the base width. Three encoder stages, a latent stage
//! and three decoder stages run at widths `w, 2w, 4w, 8w, 4w, 2w, w`; `2×2`
//! stride-2 convolutions go down, `1×1` convolutions plus pixel-shuffle go
//! up. The first block of every stage but the top encoder cross-attends to an
//! auxiliary map: the embedded input of its scale in the encoder, the
//! matching encoder output in the decoder. A `3×3` head plus the scale's
//! input produces `O_3` after the latent stage and `O_2..O_0` after each
//! decoder stage.

pub mod config;
pub mod cost;
pub mod loss;
pub mod net;

pub use config::{AttentionSpec, ModelConfig, Preset};
pub use cost::count_cost;
pub use loss::{loss_multiscale, DEFAULT_LAMBDA};
pub use net::{
    build_model, check_weights, final_projection_names, forward_multiscale, forward_vars, input_pyramid, zero_final_projections,
    MultiScaleOutput,
};
