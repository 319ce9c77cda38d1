//! Writes a synthetic PNG and tiny-model weights, then restores the image
//! twice: with zeroed output projections (an exact identity) and with
//! random unit-scale weights.
//!
//! `cargo run --example infer_png -- <dir>` leaves `input.png`,
//! `identity.ccrt`, `random.ccrt` and both outputs in `<dir>`.

use std::path::PathBuf;

use concertormer::infer::{infer_image, write_png};
use concertormer::model::{build_model, zero_final_projections, ModelConfig};
use concertormer::overfit::{box_blur, noise_image};
use concertormer::params::rescale_to_fan_in;

fn main() -> concertormer::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "infer_demo".into()));
    std::fs::create_dir_all(&dir)?;
    let cfg = ModelConfig::tiny();

    let img = box_blur(&noise_image(7, 100, 20)?, 5)?;
    write_png(dir.join("input.png"), &img)?;

    let mut store = build_model::<f32>(&cfg, 0)?;
    let mut random = store.clone();
    rescale_to_fan_in(&mut random);
    random.save(dir.join("random.ccrt"))?;
    zero_final_projections(&cfg, &mut store)?;
    store.save(dir.join("identity.ccrt"))?;

    for name in ["identity", "random"] {
        let out = dir.join(format!("{name}.png"));
        infer_image(&cfg, dir.join(format!("{name}.ccrt")), dir.join("input.png"), &out, 64, false)?;
        let same = std::fs::read(&out)? == std::fs::read(dir.join("input.png"))?;
        println!("{name:<9} -> {}  byte-identical to input: {same}", out.display());
    }
    Ok(())
}
