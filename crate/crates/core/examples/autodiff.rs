//! Fits a one-hidden-layer network to a noisy sine with the tape autodiff and
//! Adam, then saves and reloads the parameters.
//!
//! cargo run --release --example autodiff -- [steps]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscr::diff::{AdamConfig, Graph, ParameterStore, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(2000);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 64;
    let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x.sin() + rng.gen_range(-0.05..0.05)).collect();
    let x = Tensor::new(&[n, 1], xs)?;
    let y = Tensor::new(&[n, 1], ys)?;

    let mut store = ParameterStore::new();
    store.init_weight("w1", 1, 16, &mut rng)?;
    store.init_bias("b1", 16)?;
    store.init_weight("w2", 16, 1, &mut rng)?;
    store.init_bias("b2", 1)?;
    let adam = AdamConfig::with_lr(1e-2);

    for step in 0..=steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, p.get("w1"))?;
        let h = g.add_bias(h, p.get("b1"))?;
        let h = g.tanh(h);
        let out = g.matmul(h, p.get("w2"))?;
        let out = g.add_bias(out, p.get("b2"))?;
        let target = g.constant(y.clone());
        let err = g.sub(out, target)?;
        let sq = g.mul(err, err)?;
        let loss = g.mean(sq);
        if step % (steps / 5).max(1) == 0 {
            println!("step {step:5}: mse {:.5}", g.value(loss).item());
        }
        store.zero_grad();
        g.backward_into(loss, &mut [&mut store])?;
        store.adam_step(&adam)?;
    }

    let path = std::env::temp_dir().join("sscr-sine.ckpt");
    store.save(&path)?;
    let loaded = ParameterStore::load(&path)?;
    println!("checkpoint round trip: {}", loaded.checksum() == store.checksum());
    Ok(())
}
