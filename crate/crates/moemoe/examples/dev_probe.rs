//! Scratch diagnostics (not part of the showcase set).

use moemoe::config::{OptimizerSection, RunConfig};
use moemoe::data::{generate_splits, Dataset, SourceLabel, SynthConfig};
use moemoe::fusion::FusionMode;
use moemoe::metrics::{accuracy, PredictionRecord};
use moemoe::model::Model;
use moemoe::optim::AdamState;
use moemoe::train;

fn mean_alpha(model: &Model, ds: &Dataset, label: SourceLabel) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in ds.samples.iter().filter(|s| s.source_label == label).take(60) {
        let (alpha, _) = model.fusion_weights(s).unwrap();
        total += alpha.iter().sum::<f64>() / alpha.len() as f64;
        n += 1;
    }
    total / n as f64
}

fn label_acc(records: &[PredictionRecord], label: SourceLabel) -> f64 {
    let filtered: Vec<_> = records
        .iter()
        .filter(|r| r.source_label == label)
        .cloned()
        .collect();
    accuracy(&filtered).unwrap_or(f64::NAN)
}

thread_local! {
    static BIAS: std::cell::RefCell<Option<(f64, f64)>> = const { std::cell::RefCell::new(None) };
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "softmax".into());
    let fusion = match mode.as_str() {
        "raw" => FusionMode::QgaRaw,
        "half" => FusionMode::FixedHalf,
        _ => FusionMode::QgaSoftmax,
    };
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let n_train: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3000);
    let alignment: bool = std::env::args()
        .nth(4)
        .map(|s| s != "noalign")
        .unwrap_or(true);

    let mut synth = SynthConfig {
        n_train,
        n_val: 400,
        n_test: 400,
        ..SynthConfig::default()
    };
    if std::env::args().nth(5).as_deref() == Some("ctxonly") {
        synth.mix = moemoe::data::SourceMix { context: 1.0, image: 0.0, both: 0.0 };
    }
    let mut run = RunConfig {
        optimizer: OptimizerSection {
            epochs: 1,
            ..OptimizerSection::default()
        },
        ..RunConfig::default()
    };
    run.data.synth = synth.clone();
    run.model.fusion = fusion;
    run.model.alignment = alignment;
    if let Ok(d) = std::env::var("MM_D") {
        run.model.d_model = d.parse().unwrap();
    }
    if let Ok(dff) = std::env::var("MM_DFF") {
        run.model.d_ff = dff.parse().unwrap();
    }
    if let Ok(d) = std::env::var("MM_DISTR") {
        synth.n_distractors = d.parse().unwrap();
        run.data.synth = synth.clone();
    }
    if let Ok(bias) = std::env::var("MM_QGA_BIAS") {
        let parts: Vec<f64> = bias.split(',').map(|x| x.parse().unwrap()).collect();
        std::env::set_var("MM_QGA_BIAS_APPLIED", "1");
        BIAS.with(|b| *b.borrow_mut() = Some((parts[0], parts[1])));
    }
    if let Ok(mix) = std::env::var("MM_MIX") {
        let parts: Vec<f64> = mix.split(',').map(|x| x.parse().unwrap()).collect();
        synth.mix = moemoe::data::SourceMix { context: parts[0], image: parts[1], both: parts[2] };
        run.data.synth = synth.clone();
    }
    let splits = generate_splits(&run.data.synth).unwrap();

    println!("mode {mode}, epochs {epochs}, n_train {n_train}, alignment {alignment}");
    let mut model = run.build_model().unwrap();
    BIAS.with(|b| {
        if let Some((b0, b1)) = *b.borrow() {
            if let Some(qga) = &mut model.qga {
                let bias = qga.fc.b.as_mut().unwrap();
                bias.value.data_mut()[0] = b0;
                bias.value.data_mut()[1] = b1;
            }
        }
    });
    let mut opt = run.optimizer.adam_state();
    // Drive the epoch loop manually so we can probe between epochs, while
    // keeping the exact (seed, epoch)-derived streams of train().
    let full = OptimizerSection::default();
    for e in 0..epochs {
        run.optimizer.epochs = e + 1;
        run.optimizer.lr = full.lr;
        let mut opt2 = AdamState {
            step: opt.step,
            moments: opt.moments.clone(),
            ..run.optimizer.adam_state()
        };
        train::train(
            &mut model, &mut opt2, &splits.train, &splits.val, &run, None, e, true,
        )
        .unwrap();
        opt = opt2;
        let records = train::evaluate(&model, &splits.test).unwrap();
        let a_img = mean_alpha(&model, &splits.test, SourceLabel::Image);
        let a_ctx = mean_alpha(&model, &splits.test, SourceLabel::Context);
        let a_both = mean_alpha(&model, &splits.test, SourceLabel::Both);
        println!(
            "epoch {e}: acc {:.3} (ctx {:.3} img {:.3} both {:.3})  alpha img-q {:.3} ctx-q {:.3} both-q {:.3} gap {:+.3}",
            accuracy(&records).unwrap(),
            label_acc(&records, SourceLabel::Context),
            label_acc(&records, SourceLabel::Image),
            label_acc(&records, SourceLabel::Both),
            a_img,
            a_ctx,
            a_both,
            a_img - a_ctx,
        );
        if e + 1 == epochs {
            // Per-attribute mean alpha on the test split.
            let n_attr = run.data.synth.n_attributes;
            let mut sums = vec![0.0; n_attr];
            let mut counts = vec![0usize; n_attr];
            for s in &splits.test.samples {
                let (alpha, _) = model.fusion_weights(s).unwrap();
                sums[s.attribute_id] += alpha.iter().sum::<f64>() / alpha.len() as f64;
                counts[s.attribute_id] += 1;
            }
            for a in 0..n_attr {
                let label = run.data.synth.label_of_attribute(a);
                println!(
                    "  attr {a} [{label:?}]: mean alpha {:.3} over {} samples",
                    sums[a] / counts[a].max(1) as f64,
                    counts[a]
                );
            }
        }
    }
}
// (dev) pure-context run: cargo run --example dev_probe -- ctxonly
