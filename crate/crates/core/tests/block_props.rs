use concertormer::block::{zero_params, BlockConfig};
use concertormer::concerto::{CsaConfig, CsaMode};
use concertormer::gradcheck::check_params;
use concertormer::params::{rescale_to_fan_in, Init, Params, WeightStore};
use concertormer::zoo::{window_msa, ProjWeights};
use concertormer::{Dist, Prng, Tape, Tensor};
use proptest::prelude::*;

fn store_for(cfg: &BlockConfig, seed: u64) -> WeightStore<f64> {
    let mut store = WeightStore::new();
    cfg.init(&mut Init::new(&mut store, &mut Prng::new(seed))).unwrap();
    rescale_to_fan_in(&mut store);
    store
}

fn run(cfg: &BlockConfig, store: &WeightStore<f64>, x: &Tensor<f64>, y: Option<&Tensor<f64>>) -> Tensor<f64> {
    let tape = Tape::inference();
    let p = Params::constants(&tape, store);
    let yv = y.map(|y| tape.constant(y.clone()));
    cfg.forward(&tape, &p.scope(""), &tape.constant(x.clone()), yv.as_ref()).unwrap().into_value()
}

fn gdmlp_only(cfg: &BlockConfig, store: &WeightStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    let p = Params::constants(&tape, store);
    cfg.gated_mlp(&tape, &p.scope(""), &tape.constant(x.clone()), None).unwrap().into_value()
}

fn set(store: &mut WeightStore<f64>, name: &str, data: &[f64]) {
    let t = store.get_mut(name).unwrap();
    *t = Tensor::new(t.shape(), data.to_vec()).unwrap();
}

fn csa_block(d: usize, heads: usize, k: usize) -> BlockConfig {
    BlockConfig::gdmlp(d, Some(CsaConfig::new(d, heads, k)))
}

/// Width-1 gdMLP with a centre-tap depth-wise kernel: every map is a scalar
/// per hidden channel, so the output is `gb + x² Σ_j u_j s_j z_j g_j`.
fn scalar_gdmlp(u: [f64; 2], s: [f64; 2], z: [f64; 2], g: [f64; 2], gb: f64) -> (BlockConfig, WeightStore<f64>) {
    let cfg = BlockConfig::gdmlp(1, None);
    let mut store = store_for(&cfg, 0);
    let mut dw = vec![0.0; 18];
    dw[8] = s[0];
    dw[9] = s[1];
    set(&mut store, "u.w", &u);
    set(&mut store, "u.b", &[0.0, 0.0]);
    set(&mut store, "dw.w", &dw);
    set(&mut store, "dw.b", &[0.0, 0.0]);
    set(&mut store, "z.w", &z);
    set(&mut store, "z.b", &[0.0, 0.0]);
    set(&mut store, "g.w", &g);
    set(&mut store, "g.b", &[gb]);
    (cfg, store)
}

#[test]
fn identity_maps_give_doubled_square() {
    let (cfg, store) = scalar_gdmlp([1.0; 2], [1.0; 2], [1.0; 2], [1.0; 2], 0.0);
    let x = Tensor::new(&[2, 2, 1], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
    let out = gdmlp_only(&cfg, &store, &x);
    assert_eq!(out.data(), &[0.5, 4.5, 8.0, 18.0]);
}

#[test]
fn scalar_gdmlp_matches_hand_composition() {
    let (u, s, z, g, gb) = ([0.7, -1.2], [1.5, 0.25], [-0.4, 2.0], [0.9, 1.1], 0.3);
    let (cfg, store) = scalar_gdmlp(u, s, z, g, gb);
    let x = Tensor::new(&[2, 2, 1], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
    let coef: f64 = (0..2).map(|j| u[j] * s[j] * z[j] * g[j]).sum();
    let out = gdmlp_only(&cfg, &store, &x);
    for (o, xi) in out.data().iter().zip(x.data()) {
        assert!((o - (gb + coef * xi * xi)).abs() <= 1e-12);
    }
}

#[test]
fn gdmlp_widths_double_then_halve() {
    let cfg = BlockConfig::gdmlp(4, None);
    assert_eq!(cfg.hidden(), 8);
    let store = store_for(&cfg, 1);
    assert_eq!(store.get("u.w").unwrap().shape(), &[1, 1, 4, 8]);
    assert_eq!(store.get("z.w").unwrap().shape(), &[1, 1, 4, 8]);
    assert_eq!(store.get("dw.w").unwrap().shape(), &[3, 3, 1, 8]);
    assert_eq!(store.get("g.w").unwrap().shape(), &[1, 1, 8, 4]);
    let x = Tensor::from_seed(2, &[4, 4, 4], Dist::Gaussian).unwrap();
    assert_eq!(run(&cfg, &store, &x, None).shape(), &[4, 4, 4]);
}

#[test]
fn zero_gate_leaves_output_bias() {
    let cfg = csa_block(4, 1, 2);
    let mut store = store_for(&cfg, 3);
    zero_params(&mut store, &["z.w".into(), "z.b".into()]).unwrap();
    let x = Tensor::from_seed(4, &[4, 4, 4], Dist::Gaussian).unwrap();
    let gb = store.get("g.b").unwrap().clone();
    let delta = run(&cfg, &store, &x, None).zip_map(&x, |a, b| a - b).unwrap();
    for px in delta.data().chunks(4) {
        assert!(px.iter().zip(gb.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

#[test]
fn silenced_attention_reduces_to_residual_gdmlp() {
    let cfg = csa_block(4, 1, 2);
    let mut store = store_for(&cfg, 5);
    zero_params(&mut store, &["csa.proj.w".into(), "csa.proj.b".into()]).unwrap();
    let x = Tensor::from_seed(6, &[8, 8, 4], Dist::Gaussian).unwrap();
    let plain = BlockConfig::gdmlp(4, None);
    assert!(run(&cfg, &store, &x, None).bit_eq(&run(&plain, &store, &x, None)));
}

#[test]
fn zeroed_final_projection_is_exact_identity() {
    for cfg in [csa_block(4, 1, 2), BlockConfig::gdmlp(4, Some(CsaConfig { cross: Some(3), ..CsaConfig::new(4, 2, 2) }))] {
        let mut store = store_for(&cfg, 7);
        zero_params(&mut store, &cfg.final_projection().map(String::from)).unwrap();
        let x = Tensor::from_seed(8, &[8, 8, 4], Dist::Gaussian).unwrap();
        let y = cfg.cross_width().map(|c| Tensor::from_seed(9, &[8, 8, c], Dist::Gaussian).unwrap());
        assert!(run(&cfg, &store, &x, y.as_ref()).bit_eq(&x));
    }
}

#[test]
fn every_block_weight_matches_finite_differences() {
    for mode in [CsaMode::Split, CsaMode::Cdc] {
        let cfg = BlockConfig::gdmlp(4, Some(CsaConfig { mode, ..CsaConfig::new(4, 1, 2) }));
        let store = store_for(&cfg, 10);
        let x = Tensor::from_seed(11, &[8, 8, 4], Dist::Gaussian).unwrap();
        let probe = Tensor::from_seed(12, &[8, 8, 4], Dist::Gaussian).unwrap();
        let report = check_params(&store, &[("x".into(), x)], None, 0, |tape, p, v| {
            let out = cfg.forward(tape, &p.scope(""), &v[0], None)?;
            Ok(tape.sum_all(&tape.mul(&tape.sub(&out, &v[0])?, &tape.constant(probe.clone()))?))
        })
        .unwrap();
        assert_eq!(report.inputs.len(), store.len() + 1);
        assert!(report.max_rel_error() <= 1e-4, "{mode:?}\n{report}");
    }
}

/// Output change at pixel `(oy, ox)` after nudging channel 0 of input pixel
/// `(iy, ix)`. A shift of all channels would vanish in the layer norm.
fn response(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, (iy, ix): (usize, usize), (oy, ox): (usize, usize)) -> f64 {
    let mut moved = x.clone();
    let c = x.shape()[2];
    moved.set(&[iy, ix, 0], x.at(&[iy, ix, 0]) + 0.5);
    let (a, b) = (f(x), f(&moved));
    (0..c).map(|ch| (a.at(&[oy, ox, ch]) - b.at(&[oy, ox, ch])).abs()).fold(0.0, f64::max)
}

#[test]
fn depthwise_branch_crosses_block_borders() {
    let cfg = csa_block(4, 1, 2);
    let mut store = store_for(&cfg, 13);
    let x = Tensor::from_seed(14, &[8, 8, 4], Dist::Gaussian).unwrap();
    let (inside, across) = ((3, 3), (3, 4));
    assert!(response(|x| run(&cfg, &store, x, None), &x, inside, across) > 1e-6);
    zero_params(&mut store, &["csa.proj.w".into(), "csa.proj.b".into()]).unwrap();
    assert!(response(|x| run(&cfg, &store, x, None), &x, inside, across) > 1e-6);
    let p = ProjWeights::<f64>::random(4, 15).unwrap();
    assert_eq!(response(|x| window_msa(x, 2, &p).unwrap(), &x, inside, across), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_preserves_shape_and_is_deterministic(
        d in 1usize..4, heads in 1usize..3, k in 1usize..3, gh in 1usize..4, gw in 1usize..4, seed in any::<u64>(),
    ) {
        let cfg = csa_block(2 * d * heads, heads, k);
        let store = store_for(&cfg, seed);
        let x = Tensor::from_seed(seed ^ 1, &[gh * k, gw * k, cfg.dim], Dist::Gaussian).unwrap();
        let a = run(&cfg, &store, &x, None);
        prop_assert_eq!(a.shape(), x.shape());
        prop_assert!(a.all_finite());
        prop_assert!(a.bit_eq(&run(&cfg, &store, &x, None)));
    }
}
