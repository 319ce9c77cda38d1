//! Attention scaling benchmark: analytic cost and measured wall time of each
//! attention scheme over a list of image sizes.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::concerto::{CsaConfig, CsaMode};
use crate::cost::Cost;
use crate::error::{Error, Result};
use crate::params::{rescale_to_fan_in, Init, Params, WeightStore};
use crate::prng::Prng;
use crate::tape::Tape;
use crate::tensor::{Dist, Tensor};
use crate::zoo::{self, ProjWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    SelfAttention,
    WindowMsa,
    Transposed,
    CsaSplit,
    CsaCdc,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::SelfAttention, Variant::WindowMsa, Variant::Transposed, Variant::CsaSplit, Variant::CsaCdc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SelfAttention => "sa",
            Variant::WindowMsa => "wmsa",
            Variant::Transposed => "transposed",
            Variant::CsaSplit => "csa-split",
            Variant::CsaCdc => "csa-cdc",
        }
    }

    fn csa(self, d: usize, k: usize) -> Option<CsaConfig> {
        let mode = match self {
            Variant::CsaSplit => CsaMode::Split,
            Variant::CsaCdc => CsaMode::Cdc,
            _ => return None,
        };
        Some(CsaConfig { mode, sca: false, ..CsaConfig::new(d, 1, k) })
    }

    /// Analytic cost at `h×w`, or why the size is unsupported.
    pub fn cost(self, h: usize, w: usize, d: usize, k: usize) -> Result<Cost> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty size {h}x{w}")));
        }
        let windowed = !matches!(self, Variant::SelfAttention | Variant::Transposed);
        if windowed && (h % k != 0 || w % k != 0) {
            return Err(Error::InvalidArgument(format!("{h}x{w} is not divisible into {k}x{k} blocks")));
        }
        Ok(match self {
            Variant::SelfAttention => zoo::self_attention_cost(h, w, d),
            Variant::WindowMsa => zoo::window_msa_cost(h, w, d, k),
            Variant::Transposed => zoo::transposed_sa_cost(h, w, d),
            Variant::CsaSplit | Variant::CsaCdc => self.csa(d, k).expect("concerto variant").cost(h, w),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}` (sa, wmsa, transposed, csa-split, csa-cdc)")))
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub sizes: Vec<(usize, usize)>,
    pub dim: usize,
    pub k: usize,
    pub seed: u64,
    pub trials: usize,
    /// Rows above this many multiply-accumulates are not timed.
    pub max_timed_macs: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            sizes: vec![(32, 32), (64, 64), (128, 128)],
            dim: 32,
            k: 8,
            seed: 0,
            trials: 5,
            max_timed_macs: 2_000_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Measurement {
    pub cost: Cost,
    /// Median wall time in milliseconds; `None` when timing was skipped.
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub variant: Variant,
    pub h: usize,
    pub w: usize,
    pub result: std::result::Result<Measurement, String>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn time_forward(v: Variant, h: usize, w: usize, cfg: &BenchConfig) -> Result<f64> {
    let x = Tensor::<f32>::from_seed(cfg.seed, &[h, w, cfg.dim], Dist::Gaussian)?;
    let proj = ProjWeights::<f32>::random(cfg.dim, cfg.seed ^ 1)?;
    let store = match v.csa(cfg.dim, cfg.k) {
        Some(c) => {
            let mut store = WeightStore::<f32>::new();
            let mut rng = Prng::new(cfg.seed ^ 2);
            c.init(&mut Init::new(&mut store, &mut rng))?;
            rescale_to_fan_in(&mut store);
            Some((c, store))
        }
        None => None,
    };
    let run = || -> Result<()> {
        match (v, &store) {
            (Variant::SelfAttention, _) => drop(zoo::self_attention(&x, &proj)?),
            (Variant::WindowMsa, _) => drop(zoo::window_msa(&x, cfg.k, &proj)?),
            (Variant::Transposed, _) => drop(zoo::transposed_sa(&x, &proj)?),
            (_, Some((c, store))) => {
                let tape = Tape::inference();
                let params = Params::constants(&tape, store);
                drop(c.forward(&tape, &params.scope(""), &tape.constant(x.clone()), None)?);
            }
            (_, None) => unreachable!("concerto variants carry weights"),
        }
        Ok(())
    };
    let mut times = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials.max(1) {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

pub fn run_bench(cfg: &BenchConfig) -> BenchReport {
    let mut rows = Vec::new();
    for &v in &cfg.variants {
        for &(h, w) in &cfg.sizes {
            let result = v.cost(h, w, cfg.dim, cfg.k).and_then(|cost| {
                let wall_ms = if cost.macs() <= cfg.max_timed_macs { Some(time_forward(v, h, w, cfg)?) } else { None };
                Ok(Measurement { cost, wall_ms })
            });
            rows.push(BenchRow { variant: v, h, w, result: result.map_err(|e| e.to_string()) });
        }
    }
    BenchReport { rows }
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,h,w,flops,params,wall_ms\n");
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let wall = m.wall_ms.map(|t| format!("{t:.3}")).unwrap_or_default();
                    s += &format!("{},{},{},{},{},{}\n", r.variant, r.h, r.w, m.cost.macs(), m.cost.params, wall);
                }
                Err(_) => s += &format!("{},{},{},,,\n", r.variant, r.h, r.w),
            }
        }
        s
    }

    /// Growth exponent of analytic cost against pixel count between the
    /// smallest and largest measured sizes of `v`: 1 for linear schemes, 2
    /// for quadratic ones.
    pub fn cost_exponent(&self, v: Variant) -> Option<f64> {
        let ok: Vec<(usize, u64)> = self
            .rows
            .iter()
            .filter(|r| r.variant == v)
            .filter_map(|r| r.result.as_ref().ok().map(|m| (r.h * r.w, m.cost.macs())))
            .collect();
        let lo = ok.iter().min_by_key(|p| p.0)?;
        let hi = ok.iter().max_by_key(|p| p.0)?;
        (hi.0 > lo.0).then(|| (hi.1 as f64 / lo.1 as f64).ln() / (hi.0 as f64 / lo.0 as f64).ln())
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<11} {:>5} {:>5} {:>15} {:>9} {:>11}", "variant", "h", "w", "flops", "params", "wall_ms")?;
        for r in &self.rows {
            match &r.result {
                Ok(m) => {
                    let wall = m.wall_ms.map(|t| format!("{t:.3}")).unwrap_or_else(|| "skipped".into());
                    writeln!(
                        f,
                        "{:<11} {:>5} {:>5} {:>15} {:>9} {:>11}",
                        r.variant,
                        r.h,
                        r.w,
                        m.cost.macs(),
                        m.cost.params,
                        wall
                    )?;
                }
                Err(e) => writeln!(f, "{:<11} {:>5} {:>5}  error: {e}", r.variant, r.h, r.w)?,
            }
        }
        let mut seen = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.variant) {
                continue;
            }
            seen.push(r.variant);
            if let Some(p) = self.cost_exponent(r.variant) {
                let kind = if p > 1.5 { "super-linear" } else { "linear" };
                writeln!(f, "{:<11} cost ∝ pixels^{p:.2}  {kind}", r.variant)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_bad_rows() {
        let empty = run_bench(&BenchConfig { variants: vec![], ..BenchConfig::default() });
        assert!(empty.rows.is_empty());
        assert_eq!(empty.to_csv(), "variant,h,w,flops,params,wall_ms\n");
        let cfg = BenchConfig {
            variants: vec![Variant::WindowMsa, Variant::Transposed],
            sizes: vec![(12, 16)],
            dim: 4,
            trials: 1,
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg);
        assert!(r.rows[0].result.is_err());
        assert!(r.rows[1].result.as_ref().unwrap().wall_ms.is_some());
    }

    #[test]
    fn quadratic_and_linear_ratios() {
        let sa = |s| Variant::SelfAttention.cost(s, s, 32, 8).unwrap().macs() as f64;
        let r = sa(128) / sa(64);
        assert!((r / 16.0 - 1.0).abs() < 0.2, "{r}");
        for v in [Variant::CsaSplit, Variant::CsaCdc] {
            let a = |s| v.cost(s, s, 32, 8).unwrap().attention;
            assert_eq!(a(128), 4 * a(64));
        }
    }

    #[test]
    fn names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("csa".parse::<Variant>().is_err());
    }
}
