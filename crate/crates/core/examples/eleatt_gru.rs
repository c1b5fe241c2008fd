//! An EleAtt-GRU cell scales its input element-wise by an attention vector
//! before the usual GRU update. With the attention bias driven high the
//! gate saturates at one and the cell is an ordinary GRU.
//!
//! ```bash
//! cargo run --release --example eleatt_gru
//! ```

use avsr::gru::EleAttGruCell;
use avsr::nn::{seeded, Builder};
use avsr::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> avsr::Result<()> {
    let (mut store, mut rng) = seeded(0);
    let cell = EleAttGruCell::new(&mut Builder::new(&mut store, &mut rng, "cell"), 6, 4)?;
    let xs = Tensor::uniform(&[8, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(1));

    let run = |store: &avsr::ParamStore| -> avsr::Result<Tensor> {
        let mut g = Graph::with_params(store);
        let x = g.constant(xs.clone());
        let h = cell.run_layer(&mut g, x, None)?;
        Ok(g.value(h).clone())
    };
    let attended = run(&store)?;

    let mut g = Graph::with_params(&store);
    let x = g.constant(xs.clone());
    let w = g.param(cell.w_xa);
    let b = g.param(cell.b_a);
    let a = g.matmul(x, w)?;
    let a = g.add_row(a, b)?;
    let a = g.sigmoid(a);
    println!(
        "input attention at h = 0, first step: {:.3?}",
        g.value(a).row(0)
    );

    store.value_mut(cell.b_a).data_mut().fill(800.0);
    let plain = run(&store)?;
    println!("final state, learned attention: {:.4?}", attended.row(7));
    println!("final state, attention forced to 1: {:.4?}", plain.row(7));
    Ok(())
}
