//! Rate-distortion sweep over key-frame QPs and vector quantization steps,
//! producing a CSV table and one SVG plot per metric.
//!
//! ```bash
//! cargo run --example rd_sweep
//! ```

use mttf::bitstream::LosslessCodec;
use mttf::eval::{rd_sweep, MetricAdapter};
use mttf::model::{Model, ModelConfig};
use mttf::video::{synthetic_disc_clip, Fps};

fn main() -> mttf::Result<()> {
    let out_dir = std::env::temp_dir().join("mttf-example-sweep");
    let model = Model::new(ModelConfig::toy())?;
    let codec = LosslessCodec;
    let sequences = vec![
        ("slow_disc".to_string(), synthetic_disc_clip(64, 6, 0.3, Fps::new(25, 1))),
        ("fast_disc".to_string(), synthetic_disc_clip(64, 6, 1.1, Fps::new(25, 1))),
    ];
    // With the lossless key-frame adapter the rate axis is driven by the
    // feature quantization step.
    let result = rd_sweep(
        &sequences,
        &model,
        &codec,
        &[32],
        &[(1, 10), (1, 25), (1, 50), (1, 200)],
        &[MetricAdapter::builtin_psnr()],
        &out_dir,
    )?;
    println!("{} operating points:", result.rows.len());
    for row in &result.rows {
        println!(
            "  {} qp{} step {}/{}: {:.2} kbps, {} {:?}",
            row.sequence,
            row.qp,
            row.step_num,
            row.step_den,
            row.rate_kbps,
            result.metric_labels[0],
            row.scores[0]
        );
    }
    println!("table: {}", out_dir.join("rd_table.csv").display());
    println!("plot:  {}", out_dir.join("rd_psnr.svg").display());
    Ok(())
}
