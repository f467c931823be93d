//! Sparse mixture-of-experts layers: expert feed-forward networks behind a
//! noisy top-k gate, per-batch routing statistics, the load-balancing
//! auxiliary loss, and the placement / training-mode machinery that swaps
//! experts into an existing model.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::FeedForward;
use crate::model::Model;
use crate::tape::{NodeId, Tape, MASK_OFF};
use crate::tensor::{Parameter, Result, Tensor, TensorError};

/// Sizing and noise settings for one expert layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub k_top: usize,
    /// Std of the Gaussian added to gate logits while training.
    pub noise_std: f64,
    /// Std of the perturbation applied when experts are cloned from a dense
    /// feed-forward layer at placement time.
    pub expert_init_noise: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 4,
            k_top: 2,
            noise_std: 1.0,
            expert_init_noise: 0.01,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.k_top == 0 || self.k_top > self.n_experts {
            return Err(TensorError::InvalidConfig(format!(
                "need 1 <= k_top ({}) <= n_experts ({})",
                self.k_top, self.n_experts
            )));
        }
        if self.noise_std < 0.0 {
            return Err(TensorError::InvalidConfig("negative noise std".into()));
        }
        Ok(())
    }
}

/// Per-layer accumulators for the load-balancing loss: how often each expert
/// ranked first and how much gate weight it received.
#[derive(Debug, Clone)]
pub struct RoutingStats {
    pub n_experts: usize,
    pub top1_counts: Vec<u64>,
    pub weight_sums: Vec<f64>,
    pub tokens: u64,
    /// Running in-graph sum of gate weight vectors, kept so the auxiliary
    /// loss stays differentiable through the gate.
    weight_sum_node: Option<NodeId>,
}

impl RoutingStats {
    pub fn new(n_experts: usize) -> Self {
        RoutingStats {
            n_experts,
            top1_counts: vec![0; n_experts],
            weight_sums: vec![0.0; n_experts],
            tokens: 0,
            weight_sum_node: None,
        }
    }

    /// Record one token's gate weight vector (shape `[1, n]`).
    pub fn record(&mut self, tape: &mut Tape, weights: NodeId) -> Result<()> {
        let v = tape.value(weights).to_vec();
        debug_assert_eq!(v.len(), self.n_experts);
        let mut best = 0;
        for (i, &w) in v.iter().enumerate() {
            if w > v[best] {
                best = i;
            }
        }
        self.top1_counts[best] += 1;
        for (s, w) in self.weight_sums.iter_mut().zip(&v) {
            *s += w;
        }
        self.tokens += 1;
        self.weight_sum_node = Some(match self.weight_sum_node {
            Some(prev) => tape.add(prev, weights)?,
            None => weights,
        });
        Ok(())
    }

    /// Fraction of tokens on which each expert ranked highest.
    pub fn top_rank_fractions(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.top1_counts.iter().map(|&c| c as f64 / t).collect()
    }

    /// Mean gate weight per expert.
    pub fn mean_weights(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.weight_sums.iter().map(|&s| s / t).collect()
    }

    /// Load-balancing loss `n * sum_i f_i * P_i` as a plain number.
    pub fn aux_loss(&self) -> Result<f64> {
        if self.tokens == 0 {
            return Err(TensorError::NoRoutedTokens);
        }
        let f = self.top_rank_fractions();
        let p = self.mean_weights();
        let n = self.n_experts as f64;
        Ok(n * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
    }

    /// The same loss as a graph node, differentiable through the mean gate
    /// weights; the rank fractions enter as constants.
    pub fn aux_loss_node(&self, tape: &mut Tape) -> Result<NodeId> {
        if self.tokens == 0 {
            return Err(TensorError::NoRoutedTokens);
        }
        let sums = self
            .weight_sum_node
            .ok_or(TensorError::NoRoutedTokens)?;
        let t = self.tokens as f64;
        let f = Tensor::new(vec![1, self.n_experts], self.top_rank_fractions())?;
        let f_const = tape.constant(f);
        let weighted = tape.mul(sums, f_const)?;
        let total = tape.sum(weighted);
        Ok(tape.scale(total, self.n_experts as f64 / t))
    }

    /// Fold another batch's counters into this accumulator (plain parts only).
    pub fn merge(&mut self, other: &RoutingStats) {
        assert_eq!(self.n_experts, other.n_experts);
        for (a, b) in self.top1_counts.iter_mut().zip(&other.top1_counts) {
            *a += b;
        }
        for (a, b) in self.weight_sums.iter_mut().zip(&other.weight_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
        self.weight_sum_node = None;
    }

    /// Merge that also chains the in-graph weight sums, so the auxiliary
    /// loss can be taken over a whole batch.
    pub fn merge_with_nodes(&mut self, other: &RoutingStats, tape: &mut Tape) -> Result<()> {
        assert_eq!(self.n_experts, other.n_experts);
        for (a, b) in self.top1_counts.iter_mut().zip(&other.top1_counts) {
            *a += b;
        }
        for (a, b) in self.weight_sums.iter_mut().zip(&other.weight_sums) {
            *a += b;
        }
        self.tokens += other.tokens;
        self.weight_sum_node = match (self.weight_sum_node, other.weight_sum_node) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        };
        Ok(())
    }
}

/// Routing record for one MoE layer within one forward pass.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer: String,
    pub stats: RoutingStats,
}

/// Mutable context threaded through a forward pass: training mode, the noise
/// stream, and the routing statistics collected from every MoE layer hit.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
    pub routing: Vec<LayerRouting>,
}

impl ForwardCtx<'_> {
    /// Evaluation context: noise off regardless of the layer's noise std.
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            training: false,
            rng: None,
            routing: Vec::new(),
        }
    }

    pub fn training(rng: &mut ChaCha8Rng) -> ForwardCtx<'_> {
        ForwardCtx {
            training: true,
            rng: Some(rng),
            routing: Vec::new(),
        }
    }
}

/// Gate decision for a single token.
pub struct GateOutcome {
    /// Shape `[1, n]`: exactly `k_top` strictly positive entries summing to 1.
    pub weights: NodeId,
    /// Selected expert indices in ascending order.
    pub top: Vec<usize>,
}

/// A set of expert feed-forward networks routed by a noisy top-k softmax gate.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub label: String,
    pub gate: Parameter,
    pub experts: Vec<FeedForward>,
    pub k_top: usize,
    pub noise_std: f64,
}

impl MoeLayer {
    pub fn new(
        label: &str,
        d_model: usize,
        d_ff: usize,
        cfg: &MoeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.n_experts)
            .map(|i| FeedForward::new(&format!("{label}.expert{i}"), d_model, d_ff, rng))
            .collect();
        Ok(MoeLayer {
            label: label.to_string(),
            gate: Parameter::new(
                format!("{label}.gate.w"),
                Tensor::randn(vec![d_model, cfg.n_experts], 0.02, rng),
            ),
            experts,
            k_top: cfg.k_top,
            noise_std: cfg.noise_std,
        })
    }

    /// Clone a dense feed-forward layer into every expert (small perturbation
    /// per expert) so the layer computes roughly the same function it
    /// replaces at placement time.
    pub fn from_dense(
        label: &str,
        dense: &FeedForward,
        d_model: usize,
        cfg: &MoeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.n_experts)
            .map(|i| {
                dense.renamed_noisy(&format!("{label}.expert{i}"), cfg.expert_init_noise, rng)
            })
            .collect();
        Ok(MoeLayer {
            label: label.to_string(),
            gate: Parameter::new(
                format!("{label}.gate.w"),
                Tensor::randn(vec![d_model, cfg.n_experts], 0.02, rng),
            ),
            experts,
            k_top: cfg.k_top,
            noise_std: cfg.noise_std,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate one token: noisy logits, top-k mask to -inf, softmax over the
    /// survivors. Ties rank the lower expert index first.
    pub fn gate(
        &self,
        tape: &mut Tape,
        x_row: NodeId,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GateOutcome> {
        let gate_w = tape.param(&self.gate);
        self.gate_with(tape, gate_w, x_row, training, rng)
    }

    fn gate_with(
        &self,
        tape: &mut Tape,
        gate_w: NodeId,
        x_row: NodeId,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GateOutcome> {
        let n = self.n_experts();
        let logits = tape.matmul(x_row, gate_w)?;
        let noisy = match (training && self.noise_std > 0.0, rng) {
            (true, Some(r)) => {
                let noise = tape.constant(Tensor::randn(vec![1, n], self.noise_std, r));
                tape.add(logits, noise)?
            }
            _ => logits,
        };
        let vals = tape.value(noisy).to_vec();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
        let mut top = order[..self.k_top].to_vec();
        top.sort_unstable();
        let mut mask = vec![MASK_OFF; n];
        for &i in &top {
            mask[i] = 0.0;
        }
        let mask = tape.constant(Tensor::new(vec![1, n], mask)?);
        let masked = tape.add(noisy, mask)?;
        let weights = tape.softmax(masked, 1)?;
        Ok(GateOutcome { weights, top })
    }

    /// Route every row of `[rows, d]` through its top-k experts and combine
    /// the selected outputs by gate weight. Only selected experts run.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, ctx: &mut ForwardCtx) -> Result<NodeId> {
        let rows = tape.shape(x)[0];
        let gate_w = tape.param(&self.gate);
        let mut stats = RoutingStats::new(self.n_experts());
        let mut out_rows = Vec::with_capacity(rows);
        for t in 0..rows {
            let xt = tape.slice_rows(x, t, 1)?;
            let gate = self.gate_with(tape, gate_w, xt, ctx.training, ctx.rng.as_deref_mut())?;
            stats.record(tape, gate.weights)?;
            let mut acc: Option<NodeId> = None;
            for &i in &gate.top {
                let w_i = tape.slice_cols(gate.weights, i, 1)?;
                let y = self.experts[i].forward(tape, xt)?;
                let wy = tape.scale_by_scalar(y, w_i)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, wy)?,
                    None => wy,
                });
            }
            out_rows.push(acc.expect("k_top >= 1"));
        }
        ctx.routing.push(LayerRouting {
            layer: self.label.clone(),
            stats,
        });
        tape.concat_rows(&out_rows)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gate);
        for e in &self.experts {
            e.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gate);
        for e in &mut self.experts {
            e.visit_mut(f);
        }
    }
}

/// Which stacks receive expert layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeSite {
    Encoder,
    Decoder,
    Both,
}

/// Which block indices within a stack are converted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSelector {
    All,
    Even,
    Odd,
    Last,
    Last2,
}

impl LayerSelector {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let picked: Vec<usize> = match self {
            LayerSelector::All => (0..depth).collect(),
            LayerSelector::Even => (0..depth).filter(|i| i % 2 == 0).collect(),
            LayerSelector::Odd => (0..depth).filter(|i| i % 2 == 1).collect(),
            LayerSelector::Last => {
                if depth == 0 {
                    vec![]
                } else {
                    vec![depth - 1]
                }
            }
            LayerSelector::Last2 => {
                if depth < 2 {
                    vec![]
                } else {
                    vec![depth - 2, depth - 1]
                }
            }
        };
        if picked.is_empty() {
            return Err(TensorError::InvalidLayerSelector {
                selector: format!("{self:?}").to_lowercase(),
                depth,
            });
        }
        Ok(picked)
    }
}

/// Which parameters stay trainable once experts are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Full,
    ExpertsOnly,
    BackboneOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoePlacement {
    pub site: MoeSite,
    pub layers: LayerSelector,
    pub train_mode: TrainMode,
}

/// Substring that marks the expert-and-gate parameter subtree.
pub const MOE_PARAM_MARKER: &str = ".moe.";

/// Swap dense feed-forward sublayers for expert layers at the selected sites.
/// Expert weights clone the replaced dense layer plus a small perturbation.
pub fn apply_placement(
    model: &mut Model,
    placement: &MoePlacement,
    cfg: &MoeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let d_model = model.config.block.d_model;
    let encoder = matches!(placement.site, MoeSite::Encoder | MoeSite::Both);
    let decoder = matches!(placement.site, MoeSite::Decoder | MoeSite::Both);
    if encoder {
        let picked = placement.layers.resolve(model.config.block.n_enc_layers)?;
        for (prefix, blocks) in model.encoder_stacks_mut() {
            for &i in &picked {
                convert_ffn(&mut blocks[i].ffn, &prefix, i, d_model, cfg, rng)?;
            }
        }
    }
    if decoder {
        let picked = placement.layers.resolve(model.config.block.n_dec_layers)?;
        for &i in &picked {
            convert_ffn(
                &mut model.decoder.blocks[i].ffn,
                "decoder",
                i,
                d_model,
                cfg,
                rng,
            )?;
        }
    }
    set_train_mode(model, placement.train_mode);
    Ok(())
}

fn convert_ffn(
    slot: &mut crate::blocks::FfnSublayer,
    prefix: &str,
    index: usize,
    d_model: usize,
    cfg: &MoeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let label = format!("{prefix}.block{index}.moe");
    match slot {
        crate::blocks::FfnSublayer::Dense(ff) => {
            *slot = crate::blocks::FfnSublayer::Moe(MoeLayer::from_dense(
                &label, ff, d_model, cfg, rng,
            )?);
            Ok(())
        }
        crate::blocks::FfnSublayer::Moe(_) => Err(TensorError::InvalidConfig(format!(
            "{label}: block already holds an expert layer"
        ))),
    }
}

/// Flip trainable flags: experts-only trains the expert+gate subtree,
/// backbone-only the complement, full everything.
pub fn set_train_mode(model: &mut Model, mode: TrainMode) {
    model.visit_params_mut(&mut |p: &mut Parameter| {
        p.trainable = match mode {
            TrainMode::Full => true,
            TrainMode::ExpertsOnly => p.name.contains(MOE_PARAM_MARKER),
            TrainMode::BackboneOnly => !p.name.contains(MOE_PARAM_MARKER),
        };
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(n: usize, k_top: usize, noise_std: f64, seed: u64) -> MoeLayer {
        let cfg = MoeConfig {
            n_experts: n,
            k_top,
            noise_std,
            expert_init_noise: 0.01,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MoeLayer::new("t.moe", 4, 6, &cfg, &mut rng).unwrap()
    }

    /// Gate with a hand-set weight matrix so logits equal `x`.
    fn identity_gate(n: usize, k_top: usize) -> MoeLayer {
        let mut l = layer(n, k_top, 0.0, 0);
        l.gate.value = Tensor::zeros(vec![4, n]);
        l
    }

    fn gate_logits(l: &MoeLayer, logits: &[f64]) -> (Vec<f64>, Vec<usize>) {
        // Route the desired logits through a [1,n] identity-ish input: use
        // gate W = I on an n-wide input instead of the 4-wide default.
        let n = logits.len();
        let mut lay = l.clone();
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        lay.gate = Parameter::new("t.moe.gate.w", Tensor::new(vec![n, n], eye).unwrap());
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![1, n], logits.to_vec()).unwrap());
        let out = lay.gate(&mut tape, x, false, None).unwrap();
        (tape.value(out.weights).to_vec(), out.top)
    }

    #[test]
    fn dense_gate_is_plain_softmax() {
        let l = layer(2, 2, 0.0, 1);
        let (w, top) = gate_logits(&l, &[0.4, -0.3]);
        assert_eq!(top, vec![0, 1]);
        let z = (0.4f64).exp() + (-0.3f64).exp();
        assert!((w[0] - (0.4f64).exp() / z).abs() < 1e-12);
        assert!((w[1] - (-0.3f64).exp() / z).abs() < 1e-12);
    }

    #[test]
    fn top1_gate_is_one_hot() {
        let l = layer(4, 1, 0.0, 2);
        let (w, top) = gate_logits(&l, &[2.0, 1.0, 0.0, -1.0]);
        assert_eq!(top, vec![0]);
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn top2_gate_matches_hand_softmax_over_the_masked_pair() {
        let l = layer(4, 2, 0.0, 3);
        let (w, top) = gate_logits(&l, &[2.0, 1.0, 0.0, -1.0]);
        assert_eq!(top, vec![0, 1]);
        let e = 1.0f64.exp();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn ties_break_toward_lower_indices() {
        let l = layer(4, 2, 0.0, 4);
        let (_, top) = gate_logits(&l, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(top, vec![0, 1]);
    }

    #[test]
    fn gate_contract_over_randomized_calls() {
        let l = layer(5, 3, 0.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(vec![1, 4], 2.0, &mut rng));
            let out = l.gate(&mut tape, x, false, None).unwrap();
            let w = tape.value(out.weights);
            let positive = w.iter().filter(|&&v| v > 0.0).count();
            assert_eq!(positive, 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for &i in &out.top {
                assert!(w[i] > 0.0);
            }
        }
    }

    #[test]
    fn noise_is_off_in_eval_mode_and_gate_is_deterministic() {
        let l = layer(4, 2, 5.0, 7);
        let x = Tensor::randn(vec![1, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let run = |training: bool, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let out = l.gate(&mut tape, xn, training, Some(&mut rng)).unwrap();
            tape.value(out.weights).to_vec()
        };
        // Evaluation ignores the noise std completely.
        assert_eq!(run(false, 1), run(false, 2));
        // Training with different noise draws differs.
        assert_ne!(run(true, 1), run(true, 2));
        // Training with the same stream is reproducible.
        assert_eq!(run(true, 3), run(true, 3));
    }

    #[test]
    fn single_expert_layer_is_that_expert() {
        let l = layer(1, 1, 0.0, 9);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let y = l.forward(&mut tape, xn, &mut ctx).unwrap();
        let mut t2 = Tape::new();
        let xn2 = t2.constant(x);
        let direct = l.experts[0].forward(&mut t2, xn2).unwrap();
        assert_eq!(tape.value(y), t2.value(direct));
        assert_eq!(ctx.routing[0].stats.tokens, 3);
        assert_eq!(ctx.routing[0].stats.mean_weights(), vec![1.0]);
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let mut l = layer(3, 2, 0.0, 11);
        let proto = l.experts[0].clone();
        for (i, e) in l.experts.iter_mut().enumerate() {
            *e = proto.renamed_noisy(&format!("t.moe.expert{i}"), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        }
        let x = Tensor::randn(vec![4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let y = l.forward(&mut tape, xn, &mut ctx).unwrap();
        let mut t2 = Tape::new();
        let xn2 = t2.constant(x);
        let one = proto.forward(&mut t2, xn2).unwrap();
        for (a, b) in tape.value(y).iter().zip(t2.value(one)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_forward_equals_dense_weighted_sum() {
        let l = layer(4, 2, 0.0, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let x = Tensor::randn(vec![1, 4], 1.5, &mut rng);
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let mut ctx = ForwardCtx::eval();
            let sparse_id = l.forward(&mut tape, xn, &mut ctx).unwrap();
            let sparse = tape.value(sparse_id).to_vec();

            // Dense oracle: evaluate every expert and sum by gate weight in
            // ascending index order; zero-weight experts contribute zero.
            let mut t2 = Tape::new();
            let xn2 = t2.constant(x);
            let gate = l.gate(&mut t2, xn2, false, None).unwrap();
            let w = t2.value(gate.weights).to_vec();
            let mut dense = vec![0.0; 4];
            for (i, expert) in l.experts.iter().enumerate() {
                let y = expert.forward(&mut t2, xn2).unwrap();
                for (acc, &v) in dense.iter_mut().zip(t2.value(y)) {
                    *acc += w[i] * v;
                }
            }
            for (a, b) in sparse.iter().zip(&dense) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aux_loss_law_on_synthetic_stats() {
        // Perfectly uniform routing.
        let mut s = RoutingStats::new(4);
        s.top1_counts = vec![2, 2, 2, 2];
        s.weight_sums = vec![2.0, 2.0, 2.0, 2.0];
        s.tokens = 8;
        assert_eq!(s.aux_loss().unwrap(), 1.0);

        // All tokens to expert 0 with full weight.
        let mut s = RoutingStats::new(4);
        s.top1_counts = vec![8, 0, 0, 0];
        s.weight_sums = vec![8.0, 0.0, 0.0, 0.0];
        s.tokens = 8;
        assert_eq!(s.aux_loss().unwrap(), 4.0);

        // Mixed batch, n = 2: f = (0.75, 0.25), P = (0.6, 0.4).
        let mut s = RoutingStats::new(2);
        s.top1_counts = vec![3, 1];
        s.weight_sums = vec![2.4, 1.6];
        s.tokens = 4;
        assert!((s.aux_loss().unwrap() - 1.10).abs() < 1e-12);

        let empty = RoutingStats::new(2);
        assert!(matches!(empty.aux_loss(), Err(TensorError::NoRoutedTokens)));
    }

    #[test]
    fn aux_loss_node_matches_the_plain_value_and_is_differentiable() {
        let l = layer(4, 2, 0.0, 15);
        let x = Tensor::randn(vec![6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(16));
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let mut ctx = ForwardCtx::eval();
        l.forward(&mut tape, xn, &mut ctx).unwrap();
        let stats = &ctx.routing[0].stats;
        let node = stats.aux_loss_node(&mut tape).unwrap();
        assert!((tape.item(node) - stats.aux_loss().unwrap()).abs() < 1e-12);
        tape.backward(node).unwrap();
        let grads = tape.collect_param_grads();
        let gate_grad = &grads["t.moe.gate.w"];
        assert!(gate_grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn routing_fractions_are_conserved() {
        let l = layer(4, 2, 1.0, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::randn(vec![32, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.constant(x);
        let mut noise = ChaCha8Rng::seed_from_u64(19);
        let mut ctx = ForwardCtx::training(&mut noise);
        l.forward(&mut tape, xn, &mut ctx).unwrap();
        let stats = &ctx.routing[0].stats;
        assert!((stats.top_rank_fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((stats.mean_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_routing_aux_loss_floor_under_aligned_stats() {
        // The Chebyshev-sum bound aux >= 1 needs the rank fractions and mean
        // weights to be similarly ordered; that is the hypothesis, not a
        // free fact (f can favor a low-mean-weight expert on contrived
        // batches). Check the bound exactly where it applies, and positivity
        // everywhere.
        let l = layer(4, 4, 0.0, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut aligned_batches = 0;
        for _ in 0..40 {
            let x = Tensor::randn(vec![16, 4], 1.5, &mut rng);
            let mut tape = Tape::new();
            let xn = tape.constant(x);
            let mut ctx = ForwardCtx::eval();
            l.forward(&mut tape, xn, &mut ctx).unwrap();
            let stats = &ctx.routing[0].stats;
            let aux = stats.aux_loss().unwrap();
            assert!(aux > 0.0);
            let f = stats.top_rank_fractions();
            let p = stats.mean_weights();
            let similarly_ordered = (0..4).all(|i| {
                (0..4).all(|j| (f[i] - f[j]) * (p[i] - p[j]) >= 0.0)
            });
            if similarly_ordered {
                aligned_batches += 1;
                assert!(aux >= 1.0 - 1e-9, "aligned batch with aux {aux}");
            }
        }
        assert!(aligned_batches > 0, "no batch exercised the bound");
    }

    #[test]
    fn layer_selectors_resolve_to_expected_indices() {
        assert_eq!(LayerSelector::Odd.resolve(4).unwrap(), vec![1, 3]);
        assert_eq!(LayerSelector::Even.resolve(4).unwrap(), vec![0, 2]);
        assert_eq!(LayerSelector::Last.resolve(3).unwrap(), vec![2]);
        assert_eq!(LayerSelector::Last2.resolve(4).unwrap(), vec![2, 3]);
        assert_eq!(LayerSelector::All.resolve(2).unwrap(), vec![0, 1]);
        assert!(LayerSelector::Odd.resolve(1).is_err());
        assert!(LayerSelector::Last2.resolve(1).is_err());
    }
}
