//! Finite-difference check of every parameter of one tiny block and of the
//! tiny network, in 64-bit arithmetic.

use concertormer::block::BlockConfig;
use concertormer::concerto::CsaConfig;
use concertormer::gradcheck::check_params;
use concertormer::model::{build_model, forward_vars, input_pyramid, ModelConfig};
use concertormer::params::{Init, WeightStore};
use concertormer::{Dist, Prng, Tensor};

fn main() -> concertormer::Result<()> {
    let block = BlockConfig::gdmlp(4, Some(CsaConfig { cross: Some(3), ..CsaConfig::new(4, 1, 2) }));
    let mut store = WeightStore::<f64>::new();
    block.init(&mut Init::new(&mut store, &mut Prng::new(1)))?;
    let x = Tensor::from_seed(2, &[4, 4, 4], Dist::Gaussian)?;
    let y = Tensor::from_seed(3, &[4, 4, 3], Dist::Gaussian)?;
    let probe = Tensor::from_seed(4, &[4, 4, 4], Dist::Gaussian)?;
    let extra = [("x".to_string(), x), ("y".to_string(), y)];
    let report = check_params(&store, &extra, None, 0, |tape, p, v| {
        let out = block.forward(tape, &p.scope(""), &v[0], Some(&v[1]))?;
        Ok(tape.sum_all(&tape.mul(&out, &tape.constant(probe.clone()))?))
    })?;
    print!("{report}");
    println!("block: {} tensors, max relative error {:.3e}\n", report.inputs.len(), report.max_rel_error());

    let cfg = ModelConfig::tiny();
    let store = build_model::<f64>(&cfg, 5)?;
    let img = Tensor::from_seed(6, &[16, 16, 3], Dist::Uniform)?;
    let probes: Vec<Tensor<f64>> =
        (0..4).map(|s| Tensor::from_seed(7 + s, &[16 >> s, 16 >> s, 3], Dist::Gaussian)).collect::<Result<_, _>>()?;
    // The probe reads O_s − I_s: the skip term has no parameters and would
    // only add round-off to the difference quotients.
    let report = check_params(&store, &[("image".into(), img)], Some(6), 8, |tape, p, v| {
        let outs = forward_vars(&cfg, tape, p, &v[0])?;
        let inputs = input_pyramid(tape, &v[0])?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for ((o, i), w) in outs.iter().zip(&inputs).zip(&probes) {
            let residual = tape.sub(o, i)?;
            total = tape.add(&total, &tape.sum_all(&tape.mul(&residual, &tape.constant(w.clone()))?))?;
        }
        Ok(total)
    })?;
    let worst = report.worst().expect("non-empty");
    println!(
        "tiny model: {} tensors, max relative error {:.3e} ({})",
        report.inputs.len(),
        report.max_rel_error(),
        worst.name
    );
    Ok(())
}
