//! Question-guided source weighting and the question-source alignment
//! losses.
//!
//! A learned linear head maps each question token embedding to one logit per
//! source (image, context). Softmax over the two logits gives per-token
//! convex weights; the fused memory is the row-wise weighted sum of the two
//! source streams. Alignment projects each stream to a length-k vector and
//! penalizes `|1 - cos|` between question and source projections.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::Linear;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Parameter, Result, Tensor, TensorError};

pub const COSINE_EPS: f64 = 1e-8;

/// How per-token source weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Learned logits, softmax-normalized per token (the default).
    QgaSoftmax,
    /// Learned logits used raw, without normalization.
    QgaRaw,
    /// Question guidance disabled: both sources weighted 0.5 everywhere.
    FixedHalf,
}

/// Per-token weights over the two sources, plus the raw head output.
#[derive(Debug, Clone, Copy)]
pub struct SourceWeights {
    /// `[k]` weight on the image stream per token.
    pub image: NodeId,
    /// `[k]` weight on the context stream per token.
    pub context: NodeId,
    /// `[k, 2]` head output before any normalization.
    pub raw: NodeId,
}

/// The learned question-to-source-weights head.
#[derive(Debug, Clone)]
pub struct QgaHead {
    pub fc: Linear,
}

impl QgaHead {
    pub fn new(prefix: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        QgaHead {
            fc: Linear::new(
                &format!("{prefix}.fc"),
                d_model,
                2,
                true,
                1.0 / (d_model as f64).sqrt(),
                rng,
            ),
        }
    }

    /// Map the question embedding `[k, d]` to per-token source weights.
    pub fn weights(
        &self,
        tape: &mut Tape,
        question: NodeId,
        mode: FusionMode,
    ) -> Result<SourceWeights> {
        let k = tape.shape(question)[0];
        let raw = self.fc.forward(tape, question)?;
        let normalized = match mode {
            FusionMode::QgaSoftmax => tape.softmax(raw, 1)?,
            FusionMode::QgaRaw => raw,
            FusionMode::FixedHalf => return Ok(fixed_half_weights(tape, k)),
        };
        let image = tape.slice_cols(normalized, 0, 1)?;
        let image = tape.reshape(image, vec![k])?;
        let context = tape.slice_cols(normalized, 1, 1)?;
        let context = tape.reshape(context, vec![k])?;
        Ok(SourceWeights {
            image,
            context,
            raw,
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.fc.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.fc.visit_mut(f);
    }
}

/// Constant half-half weights for ablations that disable question guidance.
pub fn fixed_half_weights(tape: &mut Tape, k: usize) -> SourceWeights {
    let image = tape.constant(Tensor::full(vec![k], 0.5));
    let context = tape.constant(Tensor::full(vec![k], 0.5));
    let raw = tape.constant(Tensor::zeros(vec![k, 2]));
    SourceWeights {
        image,
        context,
        raw,
    }
}

/// Row-wise weighted combination of the two source streams.
pub fn fuse(
    tape: &mut Tape,
    image: NodeId,
    context: NodeId,
    w: &SourceWeights,
) -> Result<NodeId> {
    if tape.shape(image) != tape.shape(context) {
        return Err(TensorError::ShapeMismatch {
            op: "fuse",
            left: tape.shape(image).to_vec(),
            right: tape.shape(context).to_vec(),
        });
    }
    let wi = tape.scale_rows(image, w.image)?;
    let wc = tape.scale_rows(context, w.context)?;
    tape.add(wi, wc)
}

/// Stream-specific projection of `[k, d]` down to a length-k vector.
#[derive(Debug, Clone)]
pub struct AlignmentHead {
    pub proj: Linear,
}

impl AlignmentHead {
    pub fn new(prefix: &str, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        AlignmentHead {
            proj: Linear::new(
                &format!("{prefix}.proj"),
                d_model,
                1,
                true,
                1.0 / (d_model as f64).sqrt(),
                rng,
            ),
        }
    }

    pub fn project(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let k = tape.shape(x)[0];
        let y = self.proj.forward(tape, x)?;
        tape.reshape(y, vec![k])
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj.visit_mut(f);
    }
}

/// `|1 - cos(a, b)|` with an epsilon-guarded denominator, so zero vectors
/// stay finite and the loss stays differentiable in training.
///
/// The guard is `max(|a||b|, eps)` rather than `|a||b| + eps`: the additive
/// form biases the cosine of unit-scale vectors by ~1e-8, which is above the
/// 1e-9 tolerance the analytic anti-parallel case must meet.
pub fn alignment_loss(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "alignment_loss",
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab);
    let aa = tape.mul(a, a)?;
    let na = tape.sum(aa);
    let na = tape.sqrt(na);
    let bb = tape.mul(b, b)?;
    let nb = tape.sum(bb);
    let nb = tape.sqrt(nb);
    let norms = tape.mul(na, nb)?;
    // max(norms, eps) = relu(norms - eps) + eps
    let above = tape.add_scalar(norms, -COSINE_EPS);
    let above = tape.relu(above);
    let denom = tape.add_scalar(above, COSINE_EPS);
    let cos = tape.div(dot, denom)?;
    let neg = tape.scale(cos, -1.0);
    let shifted = tape.add_scalar(neg, 1.0);
    Ok(tape.abs(shifted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn loss_of(a: &[f64], b: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let an = tape.constant(Tensor::new(vec![a.len()], a.to_vec()).unwrap());
        let bn = tape.constant(Tensor::new(vec![b.len()], b.to_vec()).unwrap());
        let l = alignment_loss(&mut tape, an, bn).unwrap();
        tape.item(l)
    }

    #[test]
    fn zero_head_gives_even_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = QgaHead::new("qga", 4, &mut rng);
        head.fc.w.value.data_mut().fill(0.0);
        head.fc.b.as_mut().unwrap().value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let w = head.weights(&mut tape, q, FusionMode::QgaSoftmax).unwrap();
        for &v in tape.value(w.image).iter().chain(tape.value(w.context)) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn saturated_logits_pin_the_image_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = QgaHead::new("qga", 1, &mut rng);
        // One-dimensional input of 1.0 with weights [20, -20]: logits (20, -20).
        head.fc.w.value = Tensor::new(vec![1, 2], vec![20.0, -20.0]).unwrap();
        head.fc.b.as_mut().unwrap().value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let w = head.weights(&mut tape, q, FusionMode::QgaSoftmax).unwrap();
        assert!((tape.value(w.image)[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn weights_match_an_independent_per_token_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = QgaHead::new("qga", 6, &mut rng);
        let q = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let qn = tape.constant(q.clone());
        let w = head.weights(&mut tape, qn, FusionMode::QgaSoftmax).unwrap();
        // Oracle: recompute each token's two logits and softmax by hand.
        let wm = head.fc.w.value.data();
        let bias = head.fc.b.as_ref().unwrap().value.data();
        for t in 0..5 {
            let row = &q.data()[t * 6..(t + 1) * 6];
            let l0: f64 = row.iter().zip(wm.iter().step_by(2)).map(|(a, b)| a * b).sum::<f64>() + bias[0];
            let l1: f64 = row.iter().zip(wm.iter().skip(1).step_by(2)).map(|(a, b)| a * b).sum::<f64>() + bias[1];
            let m = l0.max(l1);
            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
            assert!((tape.value(w.image)[t] - e0 / (e0 + e1)).abs() < 1e-12);
            assert!((tape.value(w.context)[t] - e1 / (e0 + e1)).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_head_columns_swaps_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = QgaHead::new("qga", 6, &mut rng);
        let mut swapped = head.clone();
        let d = 6;
        for r in 0..d {
            swapped.head_swap(r);
        }
        let bsrc = head.fc.b.as_ref().unwrap().value.data().to_vec();
        swapped.fc.b.as_mut().unwrap().value = Tensor::new(vec![2], vec![bsrc[1], bsrc[0]]).unwrap();

        let q = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let qn = tape.constant(q);
        let w1 = head.weights(&mut tape, qn, FusionMode::QgaSoftmax).unwrap();
        let w2 = swapped.weights(&mut tape, qn, FusionMode::QgaSoftmax).unwrap();
        assert_eq!(tape.value(w1.image), tape.value(w2.context));
        assert_eq!(tape.value(w1.context), tape.value(w2.image));
    }

    #[test]
    fn degenerate_gate_passes_one_source_through() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let ctx = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let w = SourceWeights {
            image: tape.constant(Tensor::full(vec![3], 1.0)),
            context: tape.constant(Tensor::zeros(vec![3])),
            raw: tape.constant(Tensor::zeros(vec![3, 2])),
        };
        let e = fuse(&mut tape, img, ctx, &w).unwrap();
        assert_eq!(tape.value(e), tape.value(img));
    }

    #[test]
    fn identical_sources_are_a_fixed_point() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let alpha = 0.3;
        let w = SourceWeights {
            image: tape.constant(Tensor::full(vec![3], alpha)),
            context: tape.constant(Tensor::full(vec![3], 1.0 - alpha)),
            raw: tape.constant(Tensor::zeros(vec![3, 2])),
        };
        let e = fuse(&mut tape, x, x, &w).unwrap();
        for (a, b) in tape.value(e).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_hand_computed_rows() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ctx = tape.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let w = SourceWeights {
            image: tape.constant(Tensor::new(vec![2], vec![0.25, 0.75]).unwrap()),
            context: tape.constant(Tensor::new(vec![2], vec![0.75, 0.25]).unwrap()),
            raw: tape.constant(Tensor::zeros(vec![2, 2])),
        };
        let e = fuse(&mut tape, img, ctx, &w).unwrap();
        // Row 0: 0.25*[1,2] + 0.75*[5,6] = [4, 5]; row 1: 0.75*[3,4]+0.25*[7,8] = [4, 5].
        assert_eq!(tape.value(e), &[4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn fuse_gradient_reaches_both_sources_and_the_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = QgaHead::new("qga", 4, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let img = tape.leaf(Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad());
        let ctx = tape.leaf(Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad());
        let w = head.weights(&mut tape, q, FusionMode::QgaSoftmax).unwrap();
        let e = fuse(&mut tape, img, ctx, &w).unwrap();
        let sq = tape.mul(e, e).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(img).unwrap().iter().any(|&g| g != 0.0));
        assert!(tape.grad(ctx).unwrap().iter().any(|&g| g != 0.0));
        let grads = tape.collect_param_grads();
        assert!(grads["qga.fc.w"].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn sensitivity_of_fused_rows_equals_the_image_weight() {
        // Finite difference on one image row must move the fused row by
        // exactly alpha_t times the perturbation.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = QgaHead::new("qga", 4, &mut rng);
        for _ in 0..20 {
            let q = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let img = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let ctxv = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let h = 1e-6;
            let run = |img: &Tensor| {
                let mut tape = Tape::new();
                let qn = tape.constant(q.clone());
                let im = tape.constant(img.clone());
                let cx = tape.constant(ctxv.clone());
                let w = head.weights(&mut tape, qn, FusionMode::QgaSoftmax).unwrap();
                let e = fuse(&mut tape, im, cx, &w).unwrap();
                (tape.value(e).to_vec(), tape.value(w.image).to_vec())
            };
            let (base, alpha) = run(&img);
            let mut bumped = img.clone();
            bumped.data_mut()[1 * 4 + 2] += h;
            let (moved, _) = run(&bumped);
            let sensitivity = (moved[1 * 4 + 2] - base[1 * 4 + 2]) / h;
            assert!((sensitivity - alpha[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_projection_matches_a_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let headp = AlignmentHead::new("align.question", 5, &mut rng);
        let x = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let p = headp.project(&mut tape, xn).unwrap();
        assert_eq!(tape.shape(p), &[4]);
        let w = headp.proj.w.value.data();
        let b = headp.proj.b.as_ref().unwrap().value.data()[0];
        for t in 0..4 {
            let dot: f64 = x.data()[t * 5..(t + 1) * 5]
                .iter()
                .zip(w)
                .map(|(a, b)| a * b)
                .sum();
            assert!((tape.value(p)[t] - (dot + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_projection_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut headp = AlignmentHead::new("align.context", 3, &mut rng);
        headp.proj.w.value.data_mut().fill(0.0);
        headp.proj.b.as_mut().unwrap().value = Tensor::new(vec![1], vec![2.5]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![4, 3], 1.0, &mut rng));
        let p = headp.project(&mut tape, x).unwrap();
        assert_eq!(tape.value(p), &[2.5, 2.5, 2.5, 2.5]);

        let mut unit = AlignmentHead::new("align.image", 1, &mut rng);
        unit.proj.w.value = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        unit.proj.b.as_mut().unwrap().value = Tensor::zeros(vec![1]);
        let col = tape.constant(Tensor::new(vec![3, 1], vec![7.0, -1.0, 0.5]).unwrap());
        let p = unit.project(&mut tape, col).unwrap();
        assert_eq!(tape.value(p), &[7.0, -1.0, 0.5]);
    }

    #[test]
    fn alignment_loss_analytic_cases() {
        assert!(loss_of(&[1.0, 2.0, -0.5], &[1.0, 2.0, -0.5]) < 1e-7);
        assert!((loss_of(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-9);
        assert!((loss_of(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn alignment_loss_ignores_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Tensor::randn(vec![6], 1.0, &mut rng);
            let c = 10.0f64.powf((rng_f(&mut rng) - 0.5) * 4.0);
            let scaled: Vec<f64> = a.data().iter().map(|&v| v * c).collect();
            assert!(loss_of(&scaled, a.data()) < 1e-6);
        }
    }

    #[test]
    fn alignment_loss_stays_in_range_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..2000 {
            let a = Tensor::randn(vec![5], 2.0, &mut rng);
            let b = Tensor::randn(vec![5], 2.0, &mut rng);
            let l = loss_of(a.data(), b.data());
            assert!((0.0..=2.0 + 1e-9).contains(&l));
        }
        // Matches a high-precision cosine oracle.
        for _ in 0..200 {
            let a = Tensor::randn(vec![7], 1.0, &mut rng);
            let b = Tensor::randn(vec![7], 1.0, &mut rng);
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let expected = (1.0 - dot / (na * nb).max(COSINE_EPS)).abs();
            assert!((loss_of(a.data(), b.data()) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vectors_stay_finite() {
        let l = loss_of(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        assert!(l.is_finite());
        assert!((l - 1.0).abs() < 1e-9);
    }

    fn rng_f(rng: &mut ChaCha8Rng) -> f64 {
        use rand::Rng;
        rng.gen::<f64>()
    }

    impl QgaHead {
        /// Test helper: swap the two output columns of the head in place,
        /// one input row at a time.
        fn head_swap(&mut self, row: usize) {
            let d = self.fc.w.value.shape()[0];
            assert!(row < d);
            let data = self.fc.w.value.data_mut();
            data.swap(row * 2, row * 2 + 1);
        }
    }
}
