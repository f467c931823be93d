//! The evaluation metrics on their own: exact-match accuracy and the
//! precision-thresholded recall sweep.
//!
//! ```bash
//! cargo run --release -p moemoe --example evaluate_metrics
//! ```

use moemoe::data::SourceLabel;
use moemoe::metrics::{accuracy, per_attribute_report, recall_at_precision, PredictionRecord};

fn rec(correct: bool, confidence: f64, attribute_id: usize) -> PredictionRecord {
    PredictionRecord {
        predicted: if correct { vec![10] } else { vec![11] },
        confidence,
        gold: vec![10],
        attribute_id,
        source_label: SourceLabel::Context,
    }
}

fn main() {
    // The textbook sweep: four predictions, one wrong at confidence 0.7.
    let records = vec![
        rec(true, 0.9, 0),
        rec(true, 0.8, 0),
        rec(false, 0.7, 1),
        rec(true, 0.6, 1),
    ];
    println!("accuracy: {}", accuracy(&records).unwrap());
    for p_min in [0.5, 0.75, 0.9, 1.0] {
        let (recall, tau) = recall_at_precision(&records, p_min).unwrap();
        println!(
            "precision floor {p_min:.2}: recall {recall:.2} at threshold {}",
            if tau.is_finite() {
                format!("{tau:.2}")
            } else {
                "none".into()
            }
        );
    }

    // Grouped reporting with the macro average.
    println!("\nper-attribute report:");
    print!(
        "{}",
        per_attribute_report(&records, 0.9).unwrap().to_table("attribute")
    );
    println!("\nsame report as CSV:");
    print!(
        "{}",
        per_attribute_report(&records, 0.9).unwrap().to_csv("attribute")
    );
}
