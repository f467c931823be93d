//! Finite-difference verification of the joint objective, including the
//! expert layers: the same check the `gradcheck` subcommand runs.
//!
//! ```bash
//! cargo run --release -p moemoe --example gradient_check
//! ```

use moemoe::config::RunConfig;
use moemoe::data::generate_splits;
use moemoe::gradcheck::joint_gradient_check;

fn main() {
    let run = RunConfig::gradcheck_default();
    let mut model = run.build_model().unwrap();
    println!(
        "model: d={} k={} experts in decoder block 1, {} parameters",
        run.model.d_model,
        run.model.k,
        model.param_count()
    );
    let splits = generate_splits(&run.data.synth).unwrap();
    let samples: Vec<_> = splits.train.samples[..2]
        .iter()
        .map(|s| model.prepare(s))
        .collect();

    let report =
        joint_gradient_check(&mut model, &samples, 25, 1e-4, 7, 13, None).unwrap();
    for e in report.entries.iter().take(8) {
        println!(
            "{:<44} [{:>4}]  autograd {:>12.5e}  fd {:>12.5e}  rel {:.2e}",
            e.param, e.index, e.autograd, e.finite_diff, e.rel_err
        );
    }
    println!("...");
    println!(
        "worst relative error {:.3e} at {}",
        report.worst_rel_err, report.worst_param
    );
    assert!(report.passed(1e-3));
    println!("check passed at tolerance 1e-3");
}
