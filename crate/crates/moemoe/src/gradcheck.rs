//! Finite-difference verification of the joint objective's gradients.
//!
//! The check reruns the full forward pass with an identically reseeded noise
//! stream for every evaluation, so gate noise and routing stay fixed while
//! one parameter element moves by plus/minus h.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{stream_rng, streams};
use crate::model::{EncodedSample, Model};
use crate::tape::Tape;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub autograd: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub h: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst_rel_err < tolerance
    }
}

fn loss_with_fixed_noise(
    model: &Model,
    samples: &[EncodedSample],
    noise_seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(noise_seed, streams::GRADCHECK);
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, samples, true, Some(&mut rng))?;
    Ok(tape.item(out.total))
}

/// Compare autograd against central differences on `n_params` uniformly
/// sampled trainable parameter elements. `corrupt` deliberately offsets one
/// parameter's autograd gradient (a fault-injection hook for tests).
pub fn joint_gradient_check(
    model: &mut Model,
    samples: &[EncodedSample],
    n_params: usize,
    h: f64,
    sample_seed: u64,
    noise_seed: u64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    // Autograd pass under the same fixed noise the probes will see.
    let mut rng = stream_rng(noise_seed, streams::GRADCHECK);
    let mut tape = Tape::new();
    let out = model.forward_batch(&mut tape, samples, true, Some(&mut rng))?;
    tape.backward(out.total)?;
    let mut grads = tape.collect_param_grads();
    if let Some(name) = corrupt {
        if let Some(g) = grads.get_mut(name) {
            for v in g.iter_mut() {
                *v += 1.0;
            }
        }
    }

    // Uniform sample over all trainable elements.
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit_params(&mut |p| {
        if p.trainable {
            layout.push((p.name.clone(), p.numel()));
        }
    });
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(TensorError::EmptyInput("no trainable parameters"));
    }
    let mut pick_rng = ChaCha8Rng::seed_from_u64(sample_seed);
    use rand::SeedableRng;
    let mut picks: Vec<(String, usize)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let mut flat = pick_rng.gen_range(0..total);
        for (name, n) in &layout {
            if flat < *n {
                picks.push((name.clone(), flat));
                break;
            }
            flat -= n;
        }
    }

    let mut entries = Vec::with_capacity(picks.len());
    for (name, index) in picks {
        let autograd = grads
            .get(&name)
            .map(|g| g[index])
            .ok_or_else(|| TensorError::MissingGrad { name: name.clone() })?;
        let mut probe = |delta: f64| -> Result<f64> {
            set_param_offset(model, &name, index, delta);
            let loss = loss_with_fixed_noise(model, samples, noise_seed);
            set_param_offset(model, &name, index, -delta);
            loss
        };
        let plus = probe(h)?;
        let minus = probe(-h)?;
        let finite_diff = (plus - minus) / (2.0 * h);
        // Relative error with an absolute floor so near-zero gradients are
        // judged against the finite-difference noise floor, not themselves.
        let denom = autograd.abs().max(finite_diff.abs()).max(1e-6);
        let rel_err = (autograd - finite_diff).abs() / denom;
        entries.push(GradCheckEntry {
            param: name,
            index,
            autograd,
            finite_diff,
            rel_err,
        });
    }

    let worst = entries
        .iter()
        .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
        .expect("n_params >= 1");
    Ok(GradCheckReport {
        worst_rel_err: worst.rel_err,
        worst_param: worst.param.clone(),
        h,
        entries,
    })
}

fn set_param_offset(model: &mut Model, name: &str, index: usize, delta: f64) {
    model.visit_params_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[index] += delta;
        }
    });
}
