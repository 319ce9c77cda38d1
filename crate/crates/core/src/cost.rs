//! Analytic cost records. One FLOP unit is one multiply-accumulate.

use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    /// Convolutions and projections applied at every pixel.
    pub linear: u64,
    /// Attention logits and weighted sums, including the Ripieno
    /// communication convolution; proportional to the pixel count.
    pub attention: u64,
    /// Work independent of resolution (Concertino communication and the
    /// channel-attention gate).
    pub fixed: u64,
    pub params: u64,
}

impl Cost {
    pub fn macs(&self) -> u64 {
        self.linear + self.attention + self.fixed
    }

    pub fn gflops(&self) -> f64 {
        self.macs() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// `k×k` convolution over `pixels` outputs.
    pub fn conv(pixels: usize, ks: usize, cin: usize, cout: usize, groups: usize) -> Self {
        Self {
            linear: (pixels * ks * ks * (cin / groups) * cout) as u64,
            params: (ks * ks * (cin / groups) * cout + cout) as u64,
            ..Self::default()
        }
    }

    pub fn layer_norm(c: usize) -> Self {
        Self { params: 2 * c as u64, ..Self::default() }
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            linear: self.linear + o.linear,
            attention: self.attention + o.attention,
            fixed: self.fixed + o.fixed,
            params: self.params + o.params,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Mul<usize> for Cost {
    type Output = Cost;

    fn mul(self, n: usize) -> Cost {
        let n = n as u64;
        Cost {
            linear: self.linear * n,
            attention: self.attention * n,
            fixed: self.fixed * n,
            params: self.params * n,
        }
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}
