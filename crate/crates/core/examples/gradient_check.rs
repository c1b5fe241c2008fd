//! Central finite differences against the reverse-mode gradients of a few
//! composite blocks. The numeric side only runs forward passes.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use avsr::gradcheck::{check_inputs, check_params, DEFAULT_STEP};
use avsr::gru::EleAttGruCell;
use avsr::nn::{seeded, Builder};
use avsr::temporal::{ResNet1dBlock, Resample, TcnBlock};
use avsr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> avsr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[4, 6], 1.0, &mut rng);
    let w = Tensor::uniform(&[6, 3], 1.0, &mut rng);
    let r = check_inputs(&[x, w], None, DEFAULT_STEP, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.tanh(y);
        Ok(g.sum(y))
    })?;
    println!(
        "tanh(x W)          max rel err {:.2e} over {} entries",
        r.max_rel_err, r.checked
    );

    let (mut store, mut prng) = seeded(1);
    let tcn = TcnBlock::new(&mut Builder::new(&mut store, &mut prng, "tcn"), 3, 3, 2)?;
    let input = Tensor::uniform(&[3, 10], 1.0, &mut rng);
    let r = check_params(&store, Some(5), DEFAULT_STEP, |g| {
        let x = g.constant(input.clone());
        let y = tcn.forward(g, x)?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    })?;
    println!(
        "TCN block          max rel err {:.2e} over {} entries",
        r.max_rel_err, r.checked
    );

    let (mut store, mut prng) = seeded(2);
    let res = ResNet1dBlock::new(
        &mut Builder::new(&mut store, &mut prng, "res"),
        3,
        3,
        Resample::Down,
    )?;
    let r = check_params(&store, Some(5), DEFAULT_STEP, |g| {
        let x = g.constant(input.clone());
        let y = res.forward(g, x)?;
        let y = g.mul(y, y)?;
        Ok(g.sum(y))
    })?;
    println!(
        "1D-ResNet block    max rel err {:.2e} over {} entries",
        r.max_rel_err, r.checked
    );

    let (mut store, mut prng) = seeded(3);
    let cell = EleAttGruCell::new(&mut Builder::new(&mut store, &mut prng, "gru"), 4, 3)?;
    let seq = Tensor::uniform(&[5, 4], 1.0, &mut rng);
    let r = check_params(&store, None, DEFAULT_STEP, |g| {
        let xs = g.constant(seq.clone());
        let h = cell.run_layer(g, xs, None)?;
        Ok(g.sum(h))
    })?;
    println!(
        "EleAtt-GRU layer   max rel err {:.2e} over {} entries",
        r.max_rel_err, r.checked
    );
    Ok(())
}
