//! Overfit pilot: trains the desk model on 16 synthetic images for a fixed
//! step budget under several learning rates and batch sizes, and prints the
//! train-set IoU of each run.
//!
//! ```text
//! cargo run --release -p rsrnet --example pilot -- [steps] [lr,lr,...] [batch,batch,...]
//! ```

use std::time::Instant;

use rsrnet::data::{make_dataset, DataConfig};
use rsrnet::metrics::ApMode;
use rsrnet::pipeline::{evaluate_samples, train_samples};
use rsrnet::ModelConfig;

fn list<T: std::str::FromStr>(arg: Option<String>, default: &str) -> Vec<T> {
    arg.as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|s| s.parse().ok().expect("bad list entry"))
        .collect()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(300, |s| s.parse().expect("steps"));
    let lrs: Vec<f64> = list(args.next(), "1e-4,3e-4,1e-3");
    let batches: Vec<usize> = list(args.next(), "4,8");
    let data = make_dataset(42, 16, &DataConfig::default()).expect("dataset");
    println!("steps\tlr\tbatch\tfinal_loss\ttrain_iou\tseconds");
    for &batch_size in &batches {
        for &lr in &lrs {
            let cfg = ModelConfig {
                lr,
                batch_size,
                max_steps: steps,
                epochs: (steps * batch_size).div_ceil(16),
                seed: 42,
                ..ModelConfig::desk()
            };
            let t = Instant::now();
            let run = train_samples(&cfg, &data, None).expect("training");
            let report = evaluate_samples(&run.model, &data, ApMode::PerImage).expect("eval");
            println!(
                "{steps}\t{lr:e}\t{batch_size}\t{:.5}\t{:.4}\t{:.1}",
                run.final_loss().unwrap_or(f64::NAN),
                report.fnl.iou_percent / 100.0,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
