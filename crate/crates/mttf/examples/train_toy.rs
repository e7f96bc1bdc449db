//! Short training run on a synthetic moving-disc clip with the
//! random-weight feature backend and luminance matting; logs scalars to CSV
//! and saves a checkpoint.
//!
//! ```bash
//! cargo run --example train_toy
//! ```

use mttf::model::{Model, ModelConfig};
use mttf::train::{train, Dataset, LuminanceMatting, RandomFeatureBackend, TrainConfig};
use mttf::video::{synthetic_disc_clip, Fps};

fn main() -> mttf::Result<()> {
    let out_dir = std::env::temp_dir().join("mttf-example-train");
    std::fs::create_dir_all(&out_dir)?;

    let mut model = Model::new(ModelConfig::toy())?;
    let dataset = Dataset::from_clips(vec![synthetic_disc_clip(64, 8, 0.7, Fps::new(25, 1))])?;
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 60,
        seed: 3,
        log_path: Some(out_dir.join("train.csv")),
        checkpoint_dir: Some(out_dir.clone()),
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    println!(
        "training toy model ({} parameters) for {} steps...",
        model.param_count(),
        cfg.epochs * cfg.steps_per_epoch
    );
    let backend = RandomFeatureBackend::new(7);
    let matting = LuminanceMatting::default();
    let report = train(&mut model, &dataset, &cfg, &backend, &matting)?;

    let first = &report.step_losses[0];
    let last = report.step_losses.last().unwrap();
    println!(
        "total loss {:.4} -> {:.4} (perceptual {:.4} -> {:.4}, l1 {:.4} -> {:.4}, mask {:.4} -> {:.4})",
        first.total, last.total, first.perceptual, last.perceptual, first.l1, last.l1,
        first.background, last.background
    );
    println!("scalar log: {}", out_dir.join("train.csv").display());
    if let Some(ckpt) = report.final_checkpoint {
        println!("checkpoint:  {}", ckpt.display());
        let reloaded = Model::load_checkpoint(&ckpt)?;
        println!("checkpoint reloads into a {}-parameter model", reloaded.param_count());
    }
    Ok(())
}
