//! Multi-scale spatial and frequency ℓ1 loss.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Weight of the frequency term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// `Σ_s mean|O_s − G_s| + λ·mean|F(O_s) − F(G_s)|`, where `F` is the
/// unnormalised 2-D DFT and the frequency mean runs over real and imaginary
/// parts.
pub fn loss_multiscale<T: Real>(tape: &Tape<T>, out: &[Var<T>], gt: &[Var<T>], lambda: T) -> Result<Var<T>> {
    if out.len() != gt.len() || out.is_empty() {
        return Err(shape_err!("{} outputs against {} targets", out.len(), gt.len()));
    }
    let mut total: Option<Var<T>> = None;
    for (o, g) in out.iter().zip(gt) {
        if o.shape() != g.shape() {
            return Err(shape_err!("output {:?} against target {:?}", o.shape(), g.shape()));
        }
        let spatial = tape.mean_all(&tape.abs(&tape.sub(o, g)?));
        let fo = tape.dft2(o)?;
        let fg = tape.dft2(g)?;
        let freq = tape.mean_all(&tape.abs(&tape.sub(&fo, &fg)?));
        let term = tape.add(&spatial, &tape.scale(&freq, lambda))?;
        total = Some(match total {
            Some(t) => tape.add(&t, &term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}
