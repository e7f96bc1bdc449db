//! One multi-resolution model decoding the same inter frame at three output
//! resolutions through shared generator blocks.
//!
//! ```bash
//! cargo run --example multires_generation
//! ```

use mttf::model::{Model, ModelConfig};
use mttf::video::synthetic_disc_frame;

fn main() -> mttf::Result<()> {
    // Thin widths keep this quick; the routing logic is width-independent.
    let cfg = ModelConfig {
        channels: 4,
        largest_resolution: 256,
        depth: 3,
        resolution_count: 3,
        foreground_components: 6,
        background_components: 2,
        extractor_width: 4,
        generator_width: 4,
        motion_margin: 0.2,
        seed: 12,
    };
    let model = Model::new(cfg)?;
    println!(
        "supported resolutions: {:?}, analysis grid {}x{}, {} parameters",
        model.cfg.supported_resolutions(),
        model.cfg.grid_size(),
        model.cfg.grid_size(),
        model.param_count()
    );

    for plan in model.route_plans() {
        println!(
            "route {}px: {} upsample + {} same-size blocks, decoder ids {:?}",
            plan.resolution, plan.upsample_blocks, plan.same_blocks, plan.block_ids
        );
    }

    let key = synthetic_disc_frame(256, 0.0);
    let state = model.analyze_key(&key)?;
    let vector = model.predict_frame_vector(&synthetic_disc_frame(256, 0.9))?;
    let params_before = model.param_count();
    for index in 0..model.cfg.resolution_count {
        let out = model.synthesize(&state, &vector, index)?;
        println!(
            "decoded route {index}: fused {:?}, mask mean {:.4}",
            out.fused.shape(),
            out.mask.iter().sum::<f64>() / out.mask.len() as f64
        );
    }
    assert_eq!(model.param_count(), params_before);
    println!("distinct parameter count unchanged by running any route");

    // Different routes may run concurrently from one model instance.
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..model.cfg.resolution_count)
            .map(|i| {
                let (m, s, v) = (&model, &state, &vector);
                scope.spawn(move || m.synthesize(s, v, i).map(|o| o.fused.shape().to_vec()))
            })
            .collect();
        for (i, h) in handles.into_iter().enumerate() {
            println!("parallel route {i}: {:?}", h.join().unwrap().unwrap());
        }
    });
    Ok(())
}
