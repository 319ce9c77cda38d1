//! Concerto attention two ways: the Concertino logits averaged block by
//! block against one product of the concatenated blocks, and the attention
//! maps of the efficient module.

use concertormer::concerto::{CsaConfig, CsaMode};
use concertormer::kernels::{block_partition, matmul_last2, permute, transpose_last2};
use concertormer::params::{rescale_to_fan_in, Init, Params, WeightStore};
use concertormer::zoo::ProjWeights;
use concertormer::{Dist, Prng, Tape, Tensor};

fn main() -> concertormer::Result<()> {
    let (h, w, d, k) = (8, 8, 4, 2);
    let (n, pp) = ((h / k) * (w / k), k * k);
    let x = Tensor::<f64>::from_seed(1, &[h, w, d], Dist::Gaussian)?;
    let (q, kk, _) = ProjWeights::random(d, 2)?.project(&block_partition(&x, k)?)?;
    let (q, kk) = (q.reshape(&[n, pp, d])?, kk.reshape(&[n, pp, d])?);

    let per_block = matmul_last2(&q, &transpose_last2(&kk)?)?;
    let mut summed = vec![0.0; pp * pp];
    for blk in per_block.data().chunks(pp * pp) {
        summed.iter_mut().zip(blk).for_each(|(s, v)| *s += v);
    }
    let qc = permute(&q, &[1, 0, 2])?.reshape(&[pp, n * d])?;
    let kc = permute(&kk, &[1, 0, 2])?.reshape(&[pp, n * d])?;
    let joint = matmul_last2(&qc, &transpose_last2(&kc)?)?;
    let gap = summed.iter().zip(joint.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("Σ_i Q_i K_iᵀ vs [Q_1..Q_n][K_1..K_n]ᵀ: max gap {gap:.2e} over {n} blocks");

    for mode in [CsaMode::Split, CsaMode::Cdc] {
        let cfg = CsaConfig { mode, ..CsaConfig::new(d, 1, k) };
        let mut store = WeightStore::<f64>::new();
        cfg.init(&mut Init::new(&mut store, &mut Prng::new(3)))?;
        rescale_to_fan_in(&mut store);
        let tape = Tape::inference();
        let p = Params::constants(&tape, &store);
        let outs = cfg.branch_outputs(&tape, &p.scope(""), &tape.constant(x.clone()), None)?;
        for o in &outs {
            let a = o.attention.value();
            let last = a.dim(-1);
            let dev = a.data().chunks(last).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            println!("{mode:?} {:<2} map {:?}, row-sum deviation {dev:.1e}", o.branch.tag(), a.shape());
        }
    }
    Ok(())
}
