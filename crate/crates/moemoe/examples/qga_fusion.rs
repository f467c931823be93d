//! Question-guided source weighting in isolation: per-token weights over the
//! image and context streams, the fused memory, and the cosine alignment
//! losses.
//!
//! ```bash
//! cargo run --release -p moemoe --example qga_fusion
//! ```

use moemoe::fusion::{alignment_loss, fuse, AlignmentHead, FusionMode, QgaHead};
use moemoe::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (k, d) = (6, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let head = QgaHead::new("qga", d, &mut rng);

    let mut tape = Tape::new();
    let question = tape.constant(Tensor::randn(vec![k, d], 1.0, &mut rng));
    let image = tape.constant(Tensor::randn(vec![k, d], 1.0, &mut rng));
    let context = tape.constant(Tensor::randn(vec![k, d], 1.0, &mut rng));

    let w = head.weights(&mut tape, question, FusionMode::QgaSoftmax).unwrap();
    println!("per-token image weight:   {:?}", rounded(tape.value(w.image)));
    println!("per-token context weight: {:?}", rounded(tape.value(w.context)));
    let sums: Vec<f64> = tape
        .value(w.image)
        .iter()
        .zip(tape.value(w.context))
        .map(|(a, b)| a + b)
        .collect();
    println!("weights sum to one per token: {:?}", rounded(&sums));

    let fused = fuse(&mut tape, image, context, &w).unwrap();
    println!("fused memory shape: {:?}", tape.shape(fused));

    // Alignment: project each stream to a length-k vector, pull the
    // question toward each source by maximizing cosine similarity.
    let ha = AlignmentHead::new("align.question", d, &mut rng);
    let hc = AlignmentHead::new("align.context", d, &mut rng);
    let hi = AlignmentHead::new("align.image", d, &mut rng);
    let qp = ha.project(&mut tape, question).unwrap();
    let cp = hc.project(&mut tape, context).unwrap();
    let ip = hi.project(&mut tape, image).unwrap();
    let qca = alignment_loss(&mut tape, qp, cp).unwrap();
    let qia = alignment_loss(&mut tape, qp, ip).unwrap();
    println!(
        "alignment losses at init: question-context {:.4}, question-image {:.4}",
        tape.item(qca),
        tape.item(qia)
    );

    // Analytic sanity points.
    let mut t2 = Tape::new();
    let a = t2.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let b = t2.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let c = t2.constant(Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap());
    let orth = alignment_loss(&mut t2, a, b).unwrap();
    let anti = alignment_loss(&mut t2, a, c).unwrap();
    let same = alignment_loss(&mut t2, a, a).unwrap();
    println!(
        "analytic cases: parallel {} / orthogonal {} / anti-parallel {}",
        t2.item(same),
        t2.item(orth),
        t2.item(anti)
    );
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
