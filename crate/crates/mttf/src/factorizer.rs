//! Trajectory factorization: spatial latents, compact per-frame motion
//! vectors, and the channel-wise transform that expands vectors back into
//! fine-grained motion fields on the key latent.

use crate::autodiff::{Arr, Graph, Param, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::{Conv2d, Gdn, Init, UNet};
use crate::video::{frame_to_arr, FrameImage};
use ndarray::{Array1, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Spatial latent of one frame: `(channels, G, G)` on the analysis grid.
#[derive(Debug, Clone)]
pub struct Latent {
    pub data: Arr,
}

impl Latent {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.data.shape()[1]
    }
}

/// The only transmitted inter-frame payload: one weight and one bias per
/// latent channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactMotionVector {
    pub weights: Array1<f64>,
    pub biases: Array1<f64>,
}

impl CompactMotionVector {
    pub fn new(weights: Array1<f64>, biases: Array1<f64>) -> Result<Self> {
        if weights.len() != biases.len() {
            return Err(Error::input("weights/biases length mismatch"));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::input("motion vector contains non-finite values"));
        }
        Ok(CompactMotionVector { weights, biases })
    }

    pub fn channels(&self) -> usize {
        self.weights.len()
    }

    /// Flat layout used by the feature codec: all weights, then all biases.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::input("flat motion vector must have even length"));
        }
        let n = flat.len() / 2;
        CompactMotionVector::new(
            Array1::from_vec(flat[..n].to_vec()),
            Array1::from_vec(flat[n..].to_vec()),
        )
    }

    /// Identity transform: unit weights, zero biases.
    pub fn identity(channels: usize) -> Self {
        CompactMotionVector {
            weights: Array1::ones(channels),
            biases: Array1::zeros(channels),
        }
    }
}

/// Decoder-side motion field: same shape as the latent it modulates.
#[derive(Debug, Clone)]
pub struct FineGrainedMotionField {
    pub data: Arr,
}

impl FineGrainedMotionField {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Cascade of stride-2 convolutions with divisive normalization, global
/// average pooling and a linear head; maps a latent to one vector.
#[derive(Debug, Clone)]
pub struct VectorPredictor {
    stages: Vec<(Conv2d, Gdn)>,
    head: Conv2d,
}

impl VectorPredictor {
    fn new(name: &str, in_ch: usize, out_ch: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut ch = in_ch;
        for s in 0..3 {
            let conv = Conv2d::new(&format!("{name}.stage{s}.conv"), ch, width, 3, 2, 1, Init::Kaiming, rng);
            let gdn = Gdn::new(&format!("{name}.stage{s}.gdn"), width);
            stages.push((conv, gdn));
            ch = width;
        }
        let head = Conv2d::new(&format!("{name}.head"), width, out_ch, 1, 1, 0, Init::Kaiming, rng);
        VectorPredictor { stages, head }
    }

    /// Output shape `(out_ch, 1, 1)`, ready for channel-wise broadcasting.
    pub fn forward(&self, g: &Graph, latent: &Var) -> Var {
        let mut x = latent.clone();
        for (conv, gdn) in &self.stages {
            x = gdn.forward(g, &conv.forward(g, &x));
        }
        self.head.forward(g, &x.mean_axes_keep(&[1, 2]))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for (conv, gdn) in &self.stages {
            p.extend(conv.params());
            p.extend(gdn.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for (conv, gdn) in &mut self.stages {
            p.extend(conv.params_mut());
            p.extend(gdn.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }
}

/// Latent extractor plus the two vector predictors. The extractor is shared
/// between key and inter frames.
#[derive(Debug, Clone)]
pub struct Factorizer {
    pub latent_extractor: UNet,
    pub weight_predictor: VectorPredictor,
    pub bias_predictor: VectorPredictor,
}

impl Factorizer {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Factorizer {
            latent_extractor: UNet::new(
                "factorizer.extractor",
                3,
                cfg.channels,
                cfg.extractor_width,
                Init::Kaiming,
                rng,
            ),
            weight_predictor: VectorPredictor::new(
                "factorizer.weights",
                cfg.channels,
                cfg.channels,
                cfg.extractor_width,
                rng,
            ),
            bias_predictor: VectorPredictor::new(
                "factorizer.biases",
                cfg.channels,
                cfg.channels,
                cfg.extractor_width,
                rng,
            ),
        }
    }

    /// Differentiable latent from a frame tensor already on the graph; the
    /// frame is resampled to the analysis grid before extraction.
    pub fn latent_var(&self, g: &Graph, frame: &Var, grid: usize) -> Var {
        let small = frame.resize_bilinear(grid, grid);
        self.latent_extractor.forward(g, &small)
    }

    /// Differentiable weight/bias vectors, each `(channels, 1, 1)`.
    pub fn vectors_var(&self, g: &Graph, latent: &Var) -> (Var, Var) {
        (
            self.weight_predictor.forward(g, latent),
            self.bias_predictor.forward(g, latent),
        )
    }

    /// Extracts the spatial latent of a frame at one of the supported
    /// resolutions.
    pub fn extract_latent(&self, frame: &FrameImage, cfg: &ModelConfig) -> Result<Latent> {
        frame.validate()?;
        frame.resolution_index(cfg.largest_resolution, cfg.resolution_count)?;
        let g = Graph::inference();
        let v = self.latent_var(&g, &g.constant(frame_to_arr(frame)), cfg.grid_size());
        Ok(Latent { data: v.array() })
    }

    /// Predicts the compact motion vector of a latent. Deterministic: the
    /// same latent always yields bit-identical vectors.
    pub fn predict_motion_vectors(&self, latent: &Latent) -> Result<CompactMotionVector> {
        if latent.data.ndim() != 3 {
            return Err(Error::input("latent must be (channels, G, G)"));
        }
        let g = Graph::inference();
        let lv = g.constant(latent.data.clone());
        let (w, b) = self.vectors_var(&g, &lv);
        CompactMotionVector::new(
            Array1::from_iter(w.data().iter().copied()),
            Array1::from_iter(b.data().iter().copied()),
        )
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.latent_extractor.params();
        p.extend(self.weight_predictor.params());
        p.extend(self.bias_predictor.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.latent_extractor.params_mut();
        p.extend(self.weight_predictor.params_mut());
        p.extend(self.bias_predictor.params_mut());
        p
    }
}

/// Differentiable channel-wise transform `out[c] = w[c] * latent[c] + b[c]`.
/// `weights` and `biases` are `(channels, 1, 1)`.
pub fn transform_var(latent: &Var, weights: &Var, biases: &Var) -> Var {
    latent.mul(weights).add(biases)
}

/// Expands a compact motion vector into a fine-grained motion field by
/// modulating the key latent. Used identically for key-frame and inter-frame
/// vectors; both operate on the key latent.
pub fn motion_transform(
    key_latent: &Latent,
    mv: &CompactMotionVector,
) -> Result<FineGrainedMotionField> {
    let channels = key_latent.channels();
    if mv.channels() != channels {
        return Err(Error::input(format!(
            "vector has {} channels, latent has {channels}",
            mv.channels()
        )));
    }
    let g = Graph::inference();
    let w = g.constant(
        Arr::from_shape_vec(IxDyn(&[channels, 1, 1]), mv.weights.to_vec()).unwrap(),
    );
    let b = g.constant(
        Arr::from_shape_vec(IxDyn(&[channels, 1, 1]), mv.biases.to_vec()).unwrap(),
    );
    let out = transform_var(&g.constant(key_latent.data.clone()), &w, &b);
    Ok(FineGrainedMotionField { data: out.array() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand::SeedableRng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::toy()
    }

    #[test]
    fn latent_shape_follows_grid_for_all_resolutions() {
        let cfg = ModelConfig {
            channels: 4,
            largest_resolution: 64,
            depth: 3,
            resolution_count: 3,
            foreground_components: 6,
            background_components: 2,
            extractor_width: 4,
            generator_width: 4,
            motion_margin: 0.2,
            seed: 3,
        };
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = Factorizer::new(&cfg, &mut rng);
        for res in [64, 32, 16] {
            let frame = FrameImage::constant(res, 0.4);
            let latent = f.extract_latent(&frame, &cfg).unwrap();
            assert_eq!(latent.data.shape(), &[4, 8, 8]);
        }
    }

    #[test]
    fn toy_shapes_and_determinism() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let f = Factorizer::new(&cfg, &mut rng);
        let frame = crate::video::synthetic_disc_frame(64, 0.3);
        let latent = f.extract_latent(&frame, &cfg).unwrap();
        assert_eq!(latent.data.shape(), &[4, 16, 16]);
        assert!(latent.data.iter().all(|v| v.is_finite()));

        let v1 = f.predict_motion_vectors(&latent).unwrap();
        let v2 = f.predict_motion_vectors(&latent).unwrap();
        assert_eq!(v1.weights.len(), 4);
        assert_eq!(v1, v2, "inference must be bit-identical");

        // Zero frame: still finite and deterministic.
        let zero = FrameImage::constant(64, 0.0);
        let lz = f.extract_latent(&zero, &cfg).unwrap();
        let lz2 = f.extract_latent(&zero, &cfg).unwrap();
        assert_eq!(lz.data, lz2.data);
        assert!(lz.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unsupported_resolution_is_config_error() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Factorizer::new(&cfg, &mut rng);
        let err = f.extract_latent(&FrameImage::constant(48, 0.5), &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
        // Toy config supports only one resolution.
        let err = f.extract_latent(&FrameImage::constant(32, 0.5), &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn transform_identity_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let latent = Latent {
            data: Arr::from_shape_fn(IxDyn(&[3, 4, 4]), |_| rng.gen_range(-1.0..1.0)),
        };
        let id = CompactMotionVector::identity(3);
        let out = motion_transform(&latent, &id).unwrap();
        assert_eq!(out.data, latent.data, "identity vectors must reproduce the latent exactly");

        let constant = CompactMotionVector::new(
            Array1::zeros(3),
            Array1::from_vec(vec![0.5, -1.0, 2.0]),
        )
        .unwrap();
        let out = motion_transform(&latent, &constant).unwrap();
        for c in 0..3 {
            let b = constant.biases[c];
            assert!(out.data.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn transform_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let latent = Latent {
                data: Arr::from_shape_fn(IxDyn(&[5, 6, 6]), |_| rng.gen_range(-2.0..2.0)),
            };
            let mv = CompactMotionVector::new(
                Array1::from_shape_fn(5, |_| rng.gen_range(-2.0..2.0)),
                Array1::from_shape_fn(5, |_| rng.gen_range(-2.0..2.0)),
            )
            .unwrap();
            let out = motion_transform(&latent, &mv).unwrap();
            for c in 0..5 {
                for y in 0..6 {
                    for x in 0..6 {
                        let expect = mv.weights[c] * latent.data[IxDyn(&[c, y, x])] + mv.biases[c];
                        let got = out.data[IxDyn(&[c, y, x])];
                        assert!((got - expect).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn transform_is_jointly_linear_in_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let latent = Latent {
            data: Arr::from_shape_fn(IxDyn(&[2, 3, 3]), |_| rng.gen_range(-1.0..1.0)),
        };
        let w = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let alpha = 0.37;
        let base = motion_transform(&latent, &CompactMotionVector::new(w.clone(), b.clone()).unwrap()).unwrap();
        let scaled = motion_transform(
            &latent,
            &CompactMotionVector::new(w.mapv(|v| v * alpha), b.mapv(|v| v * alpha)).unwrap(),
        )
        .unwrap();
        for (s, bse) in scaled.data.iter().zip(base.data.iter()) {
            assert!((s - alpha * bse).abs() < 1e-12);
        }
    }
}
