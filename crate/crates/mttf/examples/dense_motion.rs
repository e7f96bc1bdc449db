//! Coarse-to-fine motion estimation: predicts flow components from the two
//! motion fields, deforms the key frame by each, and composes separate dense
//! motions for foreground and background.
//!
//! ```bash
//! cargo run --example dense_motion
//! ```

use mttf::factorizer::motion_transform;
use mttf::model::{Model, ModelConfig};
use mttf::video::{resize_frame, synthetic_disc_frame};

fn main() -> mttf::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let cfg = model.cfg.clone();
    let grid = cfg.grid_size();

    let key = synthetic_disc_frame(64, 0.0);
    let inter = synthetic_disc_frame(64, 1.3);
    let key_latent = model.factorizer.extract_latent(&key, &cfg)?;
    let f_key = motion_transform(&key_latent, &model.factorizer.predict_motion_vectors(&key_latent)?)?;
    let inter_latent = model.factorizer.extract_latent(&inter, &cfg)?;
    let f_inter =
        motion_transform(&key_latent, &model.factorizer.predict_motion_vectors(&inter_latent)?)?;

    let flows = model.motion.predict_coarse_flows(&f_key, &f_inter)?;
    println!(
        "coarse flows: {} components of {}x{} grids",
        flows.components(),
        flows.grid(),
        flows.grid()
    );

    let key_small = resize_frame(&key, grid);
    let deformed = model.motion.deform_keyframe(&key_small, &flows)?;
    println!("deformed key stack: {:?}", deformed.images.shape());

    let (weights, occlusion) = model
        .motion
        .predict_weights_and_occlusion(&f_key, &f_inter, &deformed)?;
    println!("combination logits: {:?}", weights.logits.shape());
    let occ_mean = occlusion.map.iter().sum::<f64>() / occlusion.map.len() as f64;
    println!("occlusion map: {:?}, mean {:.4}", occlusion.map.shape(), occ_mean);

    let (fg, bg) = model.motion.compose_dense_motion(
        &flows,
        &weights,
        cfg.foreground_components,
        cfg.background_components,
    )?;
    // How far each dense motion deviates from the identity grid, in pixels.
    let id = mttf::motion::DenseMotion::identity(grid, mttf::motion::MotionRole::Foreground);
    let mean_px = |m: &mttf::motion::DenseMotion| {
        m.grid
            .iter()
            .zip(id.grid.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / m.grid.len() as f64
            * grid as f64
            / 2.0
    };
    println!(
        "dense motion ({} fg + {} bg components): mean |displacement| fg {:.3}px, bg {:.3}px",
        cfg.foreground_components,
        cfg.background_components,
        mean_px(&fg),
        mean_px(&bg)
    );
    println!("(an untrained model starts at identity motion: the flow head is zero-initialized)");
    Ok(())
}
