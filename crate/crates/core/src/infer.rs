//! PNG restoration with tiled inference.

use std::path::Path;

use image::{ColorType, ImageError, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::kernels::{crop, crop_at, paste, reflect_pad};
use crate::model::{check_weights, forward_multiscale, ModelConfig};
use crate::params::WeightStore;
use crate::tensor::{Real, Tensor};

fn image_err(e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Image(other.to_string()),
    }
}

/// Reads an 8-bit RGB PNG as an `h×w×3` tensor in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let reader = ImageReader::open(path.as_ref())?.with_guessed_format()?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::Image(format!("{} is not a PNG file", path.as_ref().display())));
    }
    let img = reader.decode().map_err(image_err)?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::Image(format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Writes an `h×w×3` tensor as an 8-bit RGB PNG, clamping to `[0, 1]` and
/// rounding to the nearest level.
pub fn write_png(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let [h, w, 3] = *img.shape() else {
        return Err(Error::Shape(format!("expected h×w×3, got {:?}", img.shape())));
    };
    let bytes = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let rgb = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    rgb.save_with_format(path, ImageFormat::Png).map_err(image_err)
}

/// Restores `img` tile by tile. The image is reflect-padded to whole tiles
/// first; an axis shorter than `tile` uses a single tile rounded up to the
/// model's multiple.
pub fn infer_tiled<T: Real>(cfg: &ModelConfig, store: &WeightStore<T>, img: &Tensor<T>, tile: usize) -> Result<Tensor<T>> {
    let m = cfg.tile_multiple();
    if tile == 0 || tile % m != 0 {
        return Err(Error::InvalidArgument(format!("tile {tile} is not a positive multiple of {m}")));
    }
    let [h, w, 3] = *img.shape() else {
        return Err(Error::Shape(format!("expected h×w×3, got {:?}", img.shape())));
    };
    let axis = |n: usize| if n <= tile { (n.next_multiple_of(m), n.next_multiple_of(m)) } else { (n.next_multiple_of(tile), tile) };
    let ((ph, th), (pw, tw)) = (axis(h), axis(w));
    let padded = if (ph, pw) == (h, w) { img.clone() } else { reflect_pad(img, ph - h, pw - w)? };
    let mut out = Tensor::zeros(&[ph, pw, 3]);
    for y in (0..ph).step_by(th) {
        for x in (0..pw).step_by(tw) {
            let piece = crop_at(&padded, y, x, th, tw)?;
            let [o0, ..] = forward_multiscale(cfg, store, &piece)?.scales;
            paste(&mut out, &o0, y, x)?;
        }
    }
    crop(&out, h, w)
}

/// Reads `input`, restores it with the weights at `weights` and writes
/// `output`. With `f64` the network runs in 64-bit arithmetic.
pub fn infer_image(
    cfg: &ModelConfig,
    weights: impl AsRef<Path>,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    tile: usize,
    f64: bool,
) -> Result<()> {
    let store = WeightStore::load(weights)?;
    check_weights(cfg, &store)?;
    let img = read_png(input)?;
    let restored = if f64 {
        infer_tiled(cfg, &store.cast::<f64>(), &img.cast(), tile)?.cast()
    } else {
        infer_tiled(cfg, &store, &img, tile)?
    };
    write_png(output, &restored)
}
