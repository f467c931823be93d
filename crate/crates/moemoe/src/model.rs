//! End-to-end model assembly: three source encoders, question-guided fusion,
//! alignment heads, the answer decoder, the joint objective, and greedy
//! generation with confidence scores.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{AttnMask, BlockConfig, DecoderBlock, Linear};
use crate::data::{Sample, SourceLabel, BOS_ID, EOS_ID, PAD_ID};
use crate::encoders::{ImageEncoder, ImageGrid, ImageShape, TextEncoder};
use crate::fusion::{alignment_loss, fixed_half_weights, fuse, AlignmentHead, FusionMode, QgaHead};
use crate::moe::{ForwardCtx, LayerRouting, RoutingStats};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Parameter, Result, Tensor, TensorError};

/// Everything needed to rebuild the network structure.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub image: ImageShape,
    /// Answer tokens before the end marker; decoder length is this plus one.
    pub max_answer_len: usize,
    pub fusion: FusionMode,
    /// Question-context and question-image alignment losses on or off.
    pub alignment: bool,
    /// Route question and context through one shared text encoder; disables
    /// question-guided fusion and alignment.
    pub single_encoder: bool,
    /// Weight on the expert load-balancing loss.
    pub lambda_aux: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.image.validate()?;
        if self.max_answer_len == 0 {
            return Err(TensorError::InvalidConfig(
                "max_answer_len must be at least 1".into(),
            ));
        }
        if self.lambda_aux < 0.0 {
            return Err(TensorError::InvalidConfig(
                "lambda_aux must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn decoder_len(&self) -> usize {
        self.max_answer_len + 1
    }

    /// Whether per-token source weights come from the learned head.
    pub fn uses_qga_head(&self) -> bool {
        !self.single_encoder && self.fusion != FusionMode::FixedHalf
    }

    pub fn uses_alignment(&self) -> bool {
        self.alignment && !self.single_encoder
    }
}

/// Components of the joint objective, as plain numbers for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dec: f64,
    pub qca: f64,
    pub qia: f64,
    pub aux: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum `dec + qca + qia + lambda * aux`.
    pub fn compose(dec: f64, qca: f64, qia: f64, aux: f64, lambda: f64) -> Self {
        LossBreakdown {
            dec,
            qca,
            qia,
            aux,
            lambda,
            total: dec + qca + qia + lambda * aux,
        }
    }

    pub fn mean_of(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut acc = LossBreakdown::compose(0.0, 0.0, 0.0, 0.0, parts.first().map(|p| p.lambda).unwrap_or(0.0));
        for p in parts {
            acc.dec += p.dec / n;
            acc.qca += p.qca / n;
            acc.qia += p.qia / n;
            acc.aux += p.aux / n;
            acc.total += p.total / n;
        }
        acc
    }
}

/// Answer decoder: its own embeddings, causal blocks with cross-attention
/// over the fused memory, and the vocabulary projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub tok_embed: Parameter,
    pub pos_embed: Parameter,
    pub blocks: Vec<DecoderBlock>,
    pub final_gain: Parameter,
    pub out_proj: Linear,
}

impl Decoder {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let b = &cfg.block;
        let blocks = (0..b.n_dec_layers)
            .map(|i| DecoderBlock::new(&format!("decoder.block{i}"), b, rng))
            .collect();
        Decoder {
            tok_embed: Parameter::new(
                "decoder.embed.tok",
                Tensor::randn(vec![b.vocab_size, b.d_model], 0.5, rng),
            ),
            pos_embed: Parameter::new(
                "decoder.embed.pos",
                Tensor::randn(vec![cfg.decoder_len(), b.d_model], 0.5, rng),
            ),
            blocks,
            final_gain: Parameter::new(
                "decoder.final_ln.gain",
                Tensor::full(vec![b.d_model], 1.0),
            ),
            out_proj: Linear::new(
                "decoder.out_proj",
                b.d_model,
                b.vocab_size,
                true,
                1.0 / (b.d_model as f64).sqrt(),
                rng,
            ),
        }
    }

    /// Teacher-forced decode of `ids` over the fused memory; `[T, V]` logits.
    fn forward(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        memory: NodeId,
        ctx: &mut ForwardCtx,
    ) -> Result<NodeId> {
        let table = tape.param(&self.tok_embed);
        let mut x = tape.gather_rows(table, ids)?;
        let pos_full = tape.param(&self.pos_embed);
        let pos = tape.slice_rows(pos_full, 0, ids.len())?;
        x = tape.add(x, pos)?;
        let mask = AttnMask::causal(ids.len());
        for block in &self.blocks {
            x = block.forward(tape, x, memory, &mask, None, ctx)?;
        }
        let gain = tape.param(&self.final_gain);
        let x = tape.layer_norm(x, gain)?;
        self.out_proj.forward(tape, x)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.tok_embed);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.final_gain);
        self.out_proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.tok_embed);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.final_gain);
        self.out_proj.visit_mut(f);
    }
}

/// Alignment projections, one per stream.
#[derive(Debug, Clone)]
pub struct AlignmentHeads {
    pub question: AlignmentHead,
    pub context: AlignmentHead,
    pub image: AlignmentHead,
}

/// The assembled network. Parameter groups map onto name prefixes:
/// `encoder.question`, `encoder.context`, `encoder.image`, `qga`, `align`,
/// and `decoder`; expert layers insert `.moe.` segments under their block.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub question_encoder: Option<TextEncoder>,
    pub context_encoder: TextEncoder,
    pub image_encoder: ImageEncoder,
    pub qga: Option<QgaHead>,
    pub align: Option<AlignmentHeads>,
    pub decoder: Decoder,
}

/// A sample tokenized and padded for one forward pass.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub id: u64,
    pub question: Vec<usize>,
    pub context: Vec<usize>,
    pub image: ImageGrid,
    pub dec_input: Vec<usize>,
    pub targets: Vec<usize>,
    pub attribute_id: usize,
    pub source_label: SourceLabel,
}

/// Result of a batched teacher-forced pass.
pub struct BatchOutput {
    /// Per-sample `[T, V]` logits nodes.
    pub logits: Vec<NodeId>,
    /// Scalar joint-loss node, ready for `backward`.
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// Batch-level routing statistics, one entry per expert layer.
    pub routing: Vec<LayerRouting>,
}

struct EncodedSources {
    question: Option<NodeId>,
    context: NodeId,
    image_tiled: NodeId,
    #[allow(dead_code)]
    raw_patches: NodeId,
}

fn pad_to(ids: &[usize], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ids.iter().take(k).copied().collect();
    out.resize(k, PAD_ID);
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = &config.block;
        let question_encoder = if config.single_encoder {
            None
        } else {
            Some(TextEncoder::new("encoder.question", b, PAD_ID, &mut rng))
        };
        let context_encoder = TextEncoder::new("encoder.context", b, PAD_ID, &mut rng);
        let image_encoder = ImageEncoder::new("encoder.image", b, config.image, &mut rng)?;
        let qga = config
            .uses_qga_head()
            .then(|| QgaHead::new("qga", b.d_model, &mut rng));
        let align = config.uses_alignment().then(|| AlignmentHeads {
            question: AlignmentHead::new("align.question", b.d_model, &mut rng),
            context: AlignmentHead::new("align.context", b.d_model, &mut rng),
            image: AlignmentHead::new("align.image", b.d_model, &mut rng),
        });
        let decoder = Decoder::new(&config, &mut rng);
        let model = Model {
            config,
            question_encoder,
            context_encoder,
            image_encoder,
            qga,
            align,
            decoder,
        };
        model.assert_unique_names()?;
        Ok(model)
    }

    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        if let Some(q) = &self.question_encoder {
            q.visit(f);
        }
        self.context_encoder.visit(f);
        self.image_encoder.visit(f);
        if let Some(qga) = &self.qga {
            qga.visit(f);
        }
        if let Some(a) = &self.align {
            a.question.visit(f);
            a.context.visit(f);
            a.image.visit(f);
        }
        self.decoder.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(q) = &mut self.question_encoder {
            q.visit_mut(f);
        }
        self.context_encoder.visit_mut(f);
        self.image_encoder.visit_mut(f);
        if let Some(qga) = &mut self.qga {
            qga.visit_mut(f);
        }
        if let Some(a) = &mut self.align {
            a.question.visit_mut(f);
            a.context.visit_mut(f);
            a.image.visit_mut(f);
        }
        self.decoder.visit_mut(f);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.numel();
            }
        });
        n
    }

    fn assert_unique_names(&self) -> Result<()> {
        let mut names = self.param_names();
        let before = names.len();
        names.sort();
        names.dedup();
        if names.len() != before {
            return Err(TensorError::InvalidConfig(
                "duplicate parameter names in model".into(),
            ));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Add the tape's accumulated parameter gradients into the model.
    pub fn apply_tape_grads(&mut self, tape: &Tape) {
        let grads = tape.collect_param_grads();
        self.visit_params_mut(&mut |p| {
            if let Some(g) = grads.get(&p.name) {
                p.accumulate_grad(g);
            }
        });
    }

    /// One optimizer update over every parameter; trainable parameters must
    /// carry gradients.
    pub fn optimizer_step(
        &mut self,
        opt: &mut crate::optim::AdamState,
        epoch: usize,
    ) -> Result<()> {
        let scale = opt.begin_step(epoch);
        let mut outcome = Ok(());
        self.visit_params_mut(&mut |p| {
            if outcome.is_ok() {
                outcome = opt.update_param(p, &scale);
            }
        });
        outcome
    }

    pub fn encoder_stacks_mut(&mut self) -> Vec<(String, &mut Vec<crate::blocks::EncoderBlock>)> {
        let mut v: Vec<(String, &mut Vec<crate::blocks::EncoderBlock>)> = Vec::new();
        if let Some(q) = &mut self.question_encoder {
            v.push(("encoder.question".into(), &mut q.blocks));
        }
        v.push(("encoder.context".into(), &mut self.context_encoder.blocks));
        v.push(("encoder.image".into(), &mut self.image_encoder.blocks));
        v
    }

    /// Tokenize, pad, and shift a raw sample for teacher forcing.
    pub fn prepare(&self, s: &Sample) -> EncodedSample {
        let k = self.config.block.k;
        let t = self.config.decoder_len();
        let context = if self.config.single_encoder {
            let mut joined = s.question.clone();
            joined.extend_from_slice(&s.context);
            pad_to(&joined, k)
        } else {
            pad_to(&s.context, k)
        };
        let mut dec_input = vec![BOS_ID];
        dec_input.extend(s.answer.iter().take(self.config.max_answer_len));
        let mut targets: Vec<usize> = s.answer.iter().take(self.config.max_answer_len).copied().collect();
        targets.push(EOS_ID);
        EncodedSample {
            id: s.id,
            question: pad_to(&s.question, k),
            context,
            image: s.image.clone(),
            dec_input: pad_to(&dec_input, t),
            targets: pad_to(&targets, t),
            attribute_id: s.attribute_id,
            source_label: s.source_label,
        }
    }

    fn encode_sources(
        &self,
        tape: &mut Tape,
        s: &EncodedSample,
        ctx: &mut ForwardCtx,
    ) -> Result<EncodedSources> {
        let question = match &self.question_encoder {
            Some(enc) => Some(enc.encode(tape, &s.question, ctx)?),
            None => None,
        };
        let context = self.context_encoder.encode(tape, &s.context, ctx)?;
        let raw_patches = self.image_encoder.encode(tape, &s.image, ctx)?;
        let image_tiled = tape.tile_rows(raw_patches, self.config.block.k)?;
        Ok(EncodedSources {
            question,
            context,
            image_tiled,
            raw_patches,
        })
    }

    fn source_weights(
        &self,
        tape: &mut Tape,
        sources: &EncodedSources,
    ) -> Result<crate::fusion::SourceWeights> {
        match (&self.qga, sources.question) {
            (Some(head), Some(q)) => head.weights(tape, q, self.config.fusion),
            _ => Ok(fixed_half_weights(tape, self.config.block.k)),
        }
    }

    /// One teacher-forced sample inside a larger graph; returns logits and
    /// the per-sample loss components.
    fn forward_one(
        &self,
        tape: &mut Tape,
        s: &EncodedSample,
        ctx: &mut ForwardCtx,
    ) -> Result<(NodeId, NodeId, Option<(NodeId, NodeId)>)> {
        let sources = self.encode_sources(tape, s, ctx)?;
        let weights = self.source_weights(tape, &sources)?;
        let memory = fuse(tape, sources.image_tiled, sources.context, &weights)?;
        let logits = self.decoder.forward(tape, &s.dec_input, memory, ctx)?;
        let dec_loss = tape.cross_entropy(logits, &s.targets, PAD_ID)?;
        let align = match (&self.align, sources.question) {
            (Some(heads), Some(q)) => {
                let qp = heads.question.project(tape, q)?;
                let cp = heads.context.project(tape, sources.context)?;
                let ip = heads.image.project(tape, sources.image_tiled)?;
                let qca = alignment_loss(tape, qp, cp)?;
                let qia = alignment_loss(tape, qp, ip)?;
                Some((qca, qia))
            }
            _ => None,
        };
        Ok((logits, dec_loss, align))
    }

    /// Teacher-forced forward over a batch: mean losses, batch-level routing
    /// stats, and the composed joint objective.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        samples: &[EncodedSample],
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchOutput> {
        if samples.is_empty() {
            return Err(TensorError::EmptyInput("forward_batch"));
        }
        let mut ctx = ForwardCtx {
            training,
            rng,
            routing: Vec::new(),
        };
        let mut logits = Vec::with_capacity(samples.len());
        let mut dec_parts = Vec::with_capacity(samples.len());
        let mut qca_parts = Vec::new();
        let mut qia_parts = Vec::new();
        for s in samples {
            let (l, dec, align) = self.forward_one(tape, s, &mut ctx)?;
            logits.push(l);
            dec_parts.push(dec);
            if let Some((qca, qia)) = align {
                qca_parts.push(qca);
                qia_parts.push(qia);
            }
        }
        let dec = tape.mean_scalars(&dec_parts)?;
        let zero = tape.constant(Tensor::scalar(0.0));
        let qca = if qca_parts.is_empty() {
            zero
        } else {
            tape.mean_scalars(&qca_parts)?
        };
        let qia = if qia_parts.is_empty() {
            zero
        } else {
            tape.mean_scalars(&qia_parts)?
        };

        // Merge the per-sample routing records into per-layer batch stats.
        let mut routing: Vec<LayerRouting> = Vec::new();
        for rec in ctx.routing.drain(..) {
            match routing.iter_mut().find(|r| r.layer == rec.layer) {
                Some(existing) => existing
                    .stats
                    .merge_with_nodes(&rec.stats, tape)?,
                None => routing.push(rec),
            }
        }
        let aux = if routing.is_empty() {
            zero
        } else {
            let parts: Vec<NodeId> = routing
                .iter()
                .map(|r| r.stats.aux_loss_node(tape))
                .collect::<Result<_>>()?;
            tape.mean_scalars(&parts)?
        };

        let lambda = self.config.lambda_aux;
        let scaled_aux = tape.scale(aux, lambda);
        let dq = tape.add(dec, qca)?;
        let dqq = tape.add(dq, qia)?;
        let total = tape.add(dqq, scaled_aux)?;

        let breakdown = LossBreakdown::compose(
            tape.item(dec),
            tape.item(qca),
            tape.item(qia),
            tape.item(aux),
            lambda,
        );
        Ok(BatchOutput {
            logits,
            total,
            breakdown,
            routing,
        })
    }

    /// Single-sample convenience wrapper: logits as a tensor, the loss
    /// breakdown, and the routing statistics.
    pub fn forward_single(
        &self,
        sample: &Sample,
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, LossBreakdown, Vec<RoutingStats>)> {
        let enc = self.prepare(sample);
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, &[enc], training, rng)?;
        let logits = Tensor::new(
            tape.shape(out.logits[0]).to_vec(),
            tape.value(out.logits[0]).to_vec(),
        )?;
        let routing = out.routing.into_iter().map(|r| r.stats).collect();
        Ok((logits, out.breakdown, routing))
    }

    /// Greedy decode until the end marker or `max_len` tokens. Confidence is
    /// the geometric mean of the chosen tokens' probabilities.
    pub fn generate(&self, sample: &Sample, max_len: usize) -> Result<(Vec<usize>, f64)> {
        let enc = self.prepare(sample);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let sources = self.encode_sources(&mut tape, &enc, &mut ctx)?;
        let weights = self.source_weights(&mut tape, &sources)?;
        let memory = fuse(&mut tape, sources.image_tiled, sources.context, &weights)?;

        let vocab = self.config.block.vocab_size;
        let limit = max_len.min(self.config.max_answer_len);
        let mut seq = vec![BOS_ID];
        let mut log_prob_sum = 0.0;
        let mut emitted = 0usize;
        let mut answer = Vec::new();
        for _ in 0..limit + 1 {
            if seq.len() > self.config.decoder_len() {
                break;
            }
            let logits = self.decoder.forward(&mut tape, &seq, memory, &mut ctx)?;
            let t = seq.len() - 1;
            let last = tape.slice_rows(logits, t, 1)?;
            let probs = tape.softmax(last, 1)?;
            let row = tape.value(probs);
            let mut best = 0;
            for v in 0..vocab {
                if row[v] > row[best] {
                    best = v;
                }
            }
            log_prob_sum += row[best].ln();
            emitted += 1;
            if best == EOS_ID {
                break;
            }
            answer.push(best);
            if answer.len() >= limit {
                break;
            }
            seq.push(best);
        }
        let confidence = if emitted == 0 {
            1.0
        } else {
            (log_prob_sum / emitted as f64).exp()
        };
        Ok((answer, confidence))
    }

    /// Per-token source weights for a sample in evaluation mode:
    /// (image weight, context weight), each of length k.
    pub fn fusion_weights(&self, sample: &Sample) -> Result<(Vec<f64>, Vec<f64>)> {
        let enc = self.prepare(sample);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let sources = self.encode_sources(&mut tape, &enc, &mut ctx)?;
        let weights = self.source_weights(&mut tape, &sources)?;
        Ok((
            tape.value(weights.image).to_vec(),
            tape.value(weights.context).to_vec(),
        ))
    }
}
