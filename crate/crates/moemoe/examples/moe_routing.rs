//! Sparse expert routing in isolation: noisy top-k gating, per-batch routing
//! statistics, and the load-balancing auxiliary loss.
//!
//! ```bash
//! cargo run --release -p moemoe --example moe_routing
//! ```

use moemoe::moe::{ForwardCtx, MoeConfig, MoeLayer, RoutingStats};
use moemoe::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let d = 16;
    let cfg = MoeConfig::default(); // 4 experts, top-2, unit gate noise
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = MoeLayer::new("demo.moe", d, 32, &cfg, &mut rng).unwrap();

    // One token through the gate, with and without training noise.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(vec![1, d], 1.0, &mut rng));
    let quiet = layer.gate(&mut tape, x, false, None).unwrap();
    println!("eval-mode gate: top {:?}", quiet.top);
    println!("  weights {:?}", rounded(tape.value(quiet.weights)));
    let mut noise = ChaCha8Rng::seed_from_u64(9);
    let noisy = layer.gate(&mut tape, x, true, Some(&mut noise)).unwrap();
    println!("training gate (noise resampled): top {:?}", noisy.top);

    // A batch of tokens through the full layer, collecting routing stats.
    let mut batch_tape = Tape::new();
    let tokens = batch_tape.constant(Tensor::randn(vec![64, d], 1.0, &mut rng));
    let mut ctx = ForwardCtx::training(&mut noise);
    layer.forward(&mut batch_tape, tokens, &mut ctx).unwrap();
    let stats = &ctx.routing[0].stats;
    println!("\nbatch of {} tokens:", stats.tokens);
    let f = stats.top_rank_fractions();
    let p = stats.mean_weights();
    for e in 0..cfg.n_experts {
        println!("  expert {e}: top-rank fraction {:.3}, mean weight {:.3}", f[e], p[e]);
    }
    println!("auxiliary loss: {:.4}", stats.aux_loss().unwrap());

    // The law on synthetic stats: uniform routing sits exactly at 1, full
    // collapse onto one expert at n.
    let mut uniform = RoutingStats::new(4);
    uniform.top1_counts = vec![4, 4, 4, 4];
    uniform.weight_sums = vec![4.0, 4.0, 4.0, 4.0];
    uniform.tokens = 16;
    let mut collapsed = RoutingStats::new(4);
    collapsed.top1_counts = vec![16, 0, 0, 0];
    collapsed.weight_sums = vec![16.0, 0.0, 0.0, 0.0];
    collapsed.tokens = 16;
    println!(
        "\nlaw: uniform -> {}, collapsed -> {}",
        uniform.aux_loss().unwrap(),
        collapsed.aux_loss().unwrap()
    );
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
