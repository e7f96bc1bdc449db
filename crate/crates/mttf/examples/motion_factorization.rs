//! Factorizes a frame pair into compact motion vectors and expands them back
//! into fine-grained motion fields on the key latent.
//!
//! ```bash
//! cargo run --example motion_factorization
//! ```

use mttf::factorizer::{motion_transform, CompactMotionVector};
use mttf::model::{Model, ModelConfig};
use mttf::video::synthetic_disc_frame;

fn main() -> mttf::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let cfg = &model.cfg;
    println!(
        "model: {} channels, {}px input, {}x{} analysis grid",
        cfg.channels,
        cfg.largest_resolution,
        cfg.grid_size(),
        cfg.grid_size()
    );

    let key = synthetic_disc_frame(64, 0.0);
    let inter = synthetic_disc_frame(64, 1.1);

    // The decoder derives the key latent and key vector from the key frame
    // alone; only the inter-frame vector is ever transmitted.
    let key_latent = model.factorizer.extract_latent(&key, cfg)?;
    let key_vector = model.factorizer.predict_motion_vectors(&key_latent)?;
    let inter_latent = model.factorizer.extract_latent(&inter, cfg)?;
    let inter_vector = model.factorizer.predict_motion_vectors(&inter_latent)?;

    println!("key latent:   {:?}", key_latent.data.shape());
    println!(
        "inter vector: {} weights + {} biases = {} scalars per frame",
        inter_vector.weights.len(),
        inter_vector.biases.len(),
        inter_vector.to_flat().len()
    );

    let f_key = motion_transform(&key_latent, &key_vector)?;
    let f_inter = motion_transform(&key_latent, &inter_vector)?;
    println!("motion fields: {:?} (key) / {:?} (inter)", f_key.data.shape(), f_inter.data.shape());

    // Identity vectors reproduce the latent exactly.
    let identity = motion_transform(&key_latent, &CompactMotionVector::identity(cfg.channels))?;
    assert_eq!(identity.data, key_latent.data);
    println!("identity vectors reproduce the key latent exactly");

    let delta: f64 = f_key
        .data
        .iter()
        .zip(f_inter.data.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / f_key.data.len() as f64;
    println!("mean |key field - inter field| = {delta:.6}");
    Ok(())
}
