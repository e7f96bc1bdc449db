//! Predictive quantization and arithmetic coding of a simulated compact
//! motion vector sequence, swept over quantization steps.
//!
//! ```bash
//! cargo run --example entropy_coding
//! ```

use mttf::factorizer::CompactMotionVector;
use mttf::feature_codec::{code_sequence, decode_sequence, CodecConfig};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() -> mttf::Result<()> {
    let channels = 20;
    let frames = 125;
    let fps = 25.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let key = CompactMotionVector::new(
        Array1::from_shape_fn(channels, |_| rng.gen_range(-0.5..0.5)),
        Array1::from_shape_fn(channels, |_| rng.gen_range(-0.5..0.5)),
    )?;
    // Random-walk vectors emulate a smoothly moving subject.
    let mut walk = key.to_flat();
    let vectors: Vec<CompactMotionVector> = (0..frames)
        .map(|_| {
            for v in walk.iter_mut() {
                *v += rng.gen_range(-0.03..0.03);
            }
            CompactMotionVector::from_flat(&walk).unwrap()
        })
        .collect();

    println!("{frames} frames x {} symbols, feature stream only:", 2 * channels);
    for (num, den) in [(1u16, 10u16), (1, 50), (1, 200)] {
        let cfg = CodecConfig::new(num as f64 / den as f64, channels)?;
        let coded = code_sequence(&vectors, &key, &cfg)?;
        let decoded = decode_sequence(&coded.payload, frames, &key, &cfg)?;
        assert_eq!(decoded.len(), frames);
        let max_err = vectors
            .iter()
            .zip(&decoded)
            .flat_map(|(a, b)| {
                a.to_flat()
                    .into_iter()
                    .zip(b.to_flat())
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        let kbps = 8.0 * coded.payload.len() as f64 * fps / frames as f64 / 1000.0;
        println!(
            "  step {num}/{den}: {:5} bytes = {kbps:6.2} kbps, max reconstruction error {max_err:.5} (bound {:.5})",
            coded.payload.len(),
            cfg.step / 2.0
        );
    }

    // A static sequence collapses to a few bytes of adapted zero flags.
    let static_vectors = vec![key.clone(); frames];
    let cfg = CodecConfig::new(1.0 / 50.0, channels)?;
    let coded = code_sequence(&static_vectors, &key, &cfg)?;
    println!("  static sequence at step 1/50: {} bytes", coded.payload.len());
    Ok(())
}
