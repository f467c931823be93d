//! Checkpoint persistence: save a model with expert layers, reload it, and
//! verify bit-identical behavior plus tamper detection.
//!
//! ```bash
//! cargo run --release -p moemoe --example checkpoint_roundtrip
//! ```

use moemoe::checkpoint;
use moemoe::config::RunConfig;
use moemoe::data::generate_splits;

fn main() {
    let mut run = RunConfig::gradcheck_default();
    run.moe.enabled = true;
    let model = run.build_model().unwrap();
    let opt = run.optimizer.adam_state();

    let dir = std::env::temp_dir().join("moemoe_ckpt_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.moemoe");
    checkpoint::save(&model, &opt, &run, 0, &path).unwrap();
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path).unwrap().len());

    let (loaded, _, _, _) = checkpoint::load(&path).unwrap();
    let sample = &generate_splits(&run.data.synth).unwrap().val.samples[0];
    let (a, ca) = model.generate(sample, 2).unwrap();
    let (b, cb) = loaded.generate(sample, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca.to_bits(), cb.to_bits());
    println!("reloaded model generates bit-identically (confidence {ca:.6})");

    println!("\nmanifest:");
    let text = checkpoint::inspect(&path).unwrap();
    for line in text.lines().take(10) {
        println!("{line}");
    }
    println!("...");

    // Flip one byte; the trailing checksum must catch it.
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let tampered = dir.join("tampered.moemoe");
    std::fs::write(&tampered, bytes).unwrap();
    match checkpoint::load(&tampered) {
        Err(e) => println!("\ntampered byte detected: {e}"),
        Ok(_) => panic!("tampering went unnoticed"),
    }
}
