//! Optimization objective and training loop: perceptual, pixel and
//! background-mask losses, multi-resolution loss aggregation, Adam with a
//! multi-step learning-rate schedule, CSV scalar logs and periodic
//! checkpoints.

use crate::autodiff::{Arr, Graph, Param, Var};
use crate::error::{Error, Result};
use crate::generator::RoutePlan;
use crate::model::Model;
use crate::video::Video;
use ndarray::IxDyn;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loss term weights; all default to 10.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub perceptual: f64,
    pub l1: f64,
    pub background: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 10.0,
            l1: 10.0,
            background: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.perceptual < 0.0 || self.l1 < 0.0 || self.background < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Extracts five feature maps from an image; the same instance must be used
/// for both images of a comparison. Implementations must be deterministic.
pub trait FeatureBackend {
    fn features(&self, g: &Graph, image: &Var) -> Vec<Var>;
}

/// Deterministic random-weight conv stack standing in for a pretrained
/// perceptual network; five taps at decreasing resolution.
pub struct RandomFeatureBackend {
    weights: Vec<Arr>,
    biases: Vec<Arr>,
}

impl RandomFeatureBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut in_ch = 3usize;
        for _ in 0..5 {
            let out_ch = 8usize;
            let bound = (1.0 / (in_ch * 9) as f64).sqrt();
            weights.push(Arr::from_shape_fn(IxDyn(&[out_ch, in_ch, 3, 3]), |_| {
                rng.gen_range(-bound..bound)
            }));
            biases.push(Arr::from_shape_fn(IxDyn(&[out_ch]), |_| rng.gen_range(-0.1..0.1)));
            in_ch = out_ch;
        }
        RandomFeatureBackend { weights, biases }
    }
}

impl FeatureBackend for RandomFeatureBackend {
    fn features(&self, g: &Graph, image: &Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(5);
        let mut x = image.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            x = x.conv2d(&g.constant(w.clone()), &g.constant(b.clone()), stride, 1).relu();
            taps.push(x.clone());
        }
        taps
    }
}

/// A tiny linear backend with known weights; lets tests compute the
/// perceptual loss in closed form.
pub struct LinearFeatureBackend {
    pub scales: Vec<f64>,
}

impl FeatureBackend for LinearFeatureBackend {
    fn features(&self, g: &Graph, image: &Var) -> Vec<Var> {
        let _ = g;
        self.scales.iter().map(|&s| image.scale(s)).collect()
    }
}

/// Maps a frame `(3, H, W)` to a soft foreground mask `(1, H, W)` in `[0, 1]`.
pub trait MattingAdapter {
    fn mask(&self, frame: &Arr) -> Result<Arr>;
}

/// Threshold on luminance; the default adapter for synthetic data.
pub struct LuminanceMatting {
    pub threshold: f64,
}

impl Default for LuminanceMatting {
    fn default() -> Self {
        LuminanceMatting { threshold: 0.5 }
    }
}

impl MattingAdapter for LuminanceMatting {
    fn mask(&self, frame: &Arr) -> Result<Arr> {
        let (h, w) = (frame.shape()[1], frame.shape()[2]);
        let mut mask = Arr::zeros(IxDyn(&[1, h, w]));
        for y in 0..h {
            for x in 0..w {
                let lum = 0.299 * frame[IxDyn(&[0, y, x])]
                    + 0.587 * frame[IxDyn(&[1, y, x])]
                    + 0.114 * frame[IxDyn(&[2, y, x])];
                mask[IxDyn(&[0, y, x])] = if lum > self.threshold { 1.0 } else { 0.0 };
            }
        }
        Ok(mask)
    }
}

/// External matting tool driven by a shell command template with `{input}`
/// and `{output}` placeholders; input is the single-frame interchange format,
/// output is `u16 size` followed by `size * size` mask bytes.
pub struct CommandMatting {
    pub command: String,
}

impl MattingAdapter for CommandMatting {
    fn mask(&self, frame: &Arr) -> Result<Arr> {
        let fr = crate::video::arr_to_frame(frame);
        let input = std::env::temp_dir().join(format!("mttf-matting-{}-in", std::process::id()));
        let output = std::env::temp_dir().join(format!("mttf-matting-{}-out", std::process::id()));
        std::fs::write(&input, crate::bitstream::serialize_frame(&fr))?;
        let cmd = self
            .command
            .replace("{input}", &input.display().to_string())
            .replace("{output}", &output.display().to_string());
        let result = std::process::Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::Train(format!("matting command failed to start: {e}")))?;
        if !result.status.success() {
            return Err(Error::Train(format!(
                "matting command `{cmd}` exited with {}: {}",
                result.status,
                String::from_utf8_lossy(&result.stderr)
            )));
        }
        let bytes = std::fs::read(&output)?;
        let _ = std::fs::remove_file(&input);
        let _ = std::fs::remove_file(&output);
        if bytes.len() < 2 {
            return Err(Error::Train("matting output too short".into()));
        }
        let size = u16::from_be_bytes(bytes[..2].try_into().unwrap()) as usize;
        if bytes.len() < 2 + size * size {
            return Err(Error::Train("matting output truncated".into()));
        }
        Ok(Arr::from_shape_fn(IxDyn(&[1, size, size]), |ix| {
            bytes[2 + ix[1] * size + ix[2]] as f64 / 255.0
        }))
    }
}

fn check_mask(mask: &Arr) -> Result<()> {
    if mask.ndim() != 3 || mask.shape()[0] != 1 {
        return Err(Error::Train("matting mask must be (1, H, W)".into()));
    }
    if mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Train("matting mask outside [0, 1]".into()));
    }
    Ok(())
}

// ---- losses --------------------------------------------------------------------

/// Differentiable perceptual loss: mean absolute feature difference over four
/// dyadic downscales and the backend's five taps. The target branch is
/// evaluated without gradients.
pub fn perceptual_loss_var(
    g: &Graph,
    backend: &dyn FeatureBackend,
    pred: &Var,
    target: &Arr,
) -> Var {
    let (h, w) = (pred.shape()[1], pred.shape()[2]);
    let mut total = g.scalar(0.0);
    for j in 1..=4 {
        let (sh, sw) = ((h >> j).max(1), (w >> j).max(1));
        let p = pred.resize_bilinear(sh, sw);
        let t_feats: Vec<Arr> = {
            let gi = Graph::inference();
            let t = gi.constant(target.clone()).resize_bilinear(sh, sw);
            backend.features(&gi, &t).into_iter().map(|v| v.array()).collect()
        };
        for (fp, ft) in backend.features(g, &p).into_iter().zip(t_feats) {
            total = total.add(&fp.sub(&g.constant(ft)).abs().mean_all());
        }
    }
    total
}

/// Perceptual loss on plain arrays.
pub fn perceptual_loss(pred: &Arr, target: &Arr, backend: &dyn FeatureBackend) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::input("perceptual loss: shape mismatch"));
    }
    let g = Graph::inference();
    Ok(perceptual_loss_var(&g, backend, &g.constant(pred.clone()), target).value())
}

pub fn l1_loss_var(pred: &Var, target: &Var) -> Var {
    pred.sub(target).abs().mean_all()
}

/// Mean absolute pixel difference.
pub fn l1_loss(pred: &Arr, target: &Arr) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::input("l1 loss: shape mismatch"));
    }
    let g = Graph::inference();
    Ok(l1_loss_var(&g.constant(pred.clone()), &g.constant(target.clone())).value())
}

/// Mean absolute difference between the predicted foreground mask and the
/// matting adapter's mask for the frame.
pub fn background_loss(mask: &Arr, frame: &Arr, matting: &dyn MattingAdapter) -> Result<f64> {
    let target = matting.mask(frame)?;
    check_mask(&target)?;
    if mask.shape() != target.shape() {
        return Err(Error::input("background loss: mask shape mismatch"));
    }
    let g = Graph::inference();
    Ok(l1_loss_var(&g.constant(mask.clone()), &g.constant(target)).value())
}

/// Weighted total objective.
pub fn total_loss(perceptual: f64, l1: f64, background: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.perceptual * perceptual + weights.l1 * l1 + weights.background * background)
}

/// Multi-step decay: the base rate is multiplied by `gamma` at every
/// milestone the epoch has reached.
pub fn learning_rate(base: f64, gamma: f64, milestones: &[usize], epoch: usize) -> f64 {
    let mut lr = base;
    for &m in milestones {
        if epoch >= m {
            lr *= gamma;
        }
    }
    lr
}

// ---- Adam ------------------------------------------------------------------------

/// Adam optimizer keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: HashMap<String, Arr>,
    second: HashMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &crate::autodiff::Gradients) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for p in params {
            let Some(grad) = grads.param(&p.name) else {
                continue;
            };
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| Arr::zeros(p.value.raw_dim()));
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| Arr::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

// ---- training loop ------------------------------------------------------------------

/// Hyperparameters of one training run; `from_file` reads the same fields
/// from `key=value` lines.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: 100,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            gamma: 0.1,
            milestones: vec![60, 90],
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            log_path: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::config(format!("bad training config line: {line:?}")));
            };
            let v = v.trim();
            let parse_err = |k: &str| Error::config(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "epochs" => cfg.epochs = v.parse().map_err(|_| parse_err("epochs"))?,
                "steps_per_epoch" => {
                    cfg.steps_per_epoch = v.parse().map_err(|_| parse_err("steps_per_epoch"))?
                }
                "learning_rate" => {
                    cfg.learning_rate = v.parse().map_err(|_| parse_err("learning_rate"))?
                }
                "beta1" => cfg.beta1 = v.parse().map_err(|_| parse_err("beta1"))?,
                "beta2" => cfg.beta2 = v.parse().map_err(|_| parse_err("beta2"))?,
                "gamma" => cfg.gamma = v.parse().map_err(|_| parse_err("gamma"))?,
                "milestones" => {
                    cfg.milestones = v
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| parse_err("milestones")))
                        .collect::<Result<_>>()?
                }
                "weight_perceptual" => {
                    cfg.weights.perceptual = v.parse().map_err(|_| parse_err("weight_perceptual"))?
                }
                "weight_l1" => cfg.weights.l1 = v.parse().map_err(|_| parse_err("weight_l1"))?,
                "weight_background" => {
                    cfg.weights.background = v.parse().map_err(|_| parse_err("weight_background"))?
                }
                "seed" => cfg.seed = v.parse().map_err(|_| parse_err("seed"))?,
                "checkpoint_every" => {
                    cfg.checkpoint_every = v.parse().map_err(|_| parse_err("checkpoint_every"))?
                }
                other => return Err(Error::config(format!("unknown training key {other}"))),
            }
        }
        cfg.weights.validate()?;
        Ok(cfg)
    }
}

/// Frame-pair training corpus.
pub struct Dataset {
    pub clips: Vec<Video>,
}

impl Dataset {
    pub fn from_clips(clips: Vec<Video>) -> Result<Self> {
        if clips.is_empty() || clips.iter().any(|c| c.frame_count() < 2) {
            return Err(Error::config("dataset needs at least one clip of two or more frames"));
        }
        Ok(Dataset { clips })
    }

    /// Loads every raw/Y4M video found directly in a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut clips = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext.eq_ignore_ascii_case("rgb") || ext.eq_ignore_ascii_case("y4m") {
                clips.push(Video::load(&path)?);
            }
        }
        Self::from_clips(clips)
    }

    /// Uniform (key, inter) pair from a uniform clip; frames are distinct.
    fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (Arr, Arr) {
        let clip = &self.clips[rng.gen_range(0..self.clips.len())];
        let a = rng.gen_range(0..clip.frame_count());
        let mut b = rng.gen_range(0..clip.frame_count() - 1);
        if b >= a {
            b += 1;
        }
        (
            crate::video::frame_to_arr(&clip.frames[a]),
            crate::video::frame_to_arr(&clip.frames[b]),
        )
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub perceptual: f64,
    pub l1: f64,
    pub background: f64,
    pub total: f64,
}

/// Differentiable total loss of one (key, inter) pair over the given routes:
/// per generated resolution, perceptual + pixel losses against the resized
/// target and the mask loss against the resized matting mask, all summed.
pub fn pair_loss_var(
    g: &Graph,
    model: &Model,
    key: &Arr,
    inter: &Arr,
    routes: &[RoutePlan],
    backend: &dyn FeatureBackend,
    matting: &dyn MattingAdapter,
    weights: &LossWeights,
) -> Result<(Var, StepLosses)> {
    weights.validate()?;
    let forward = model.forward_pair(g, key, inter, routes);
    let matting_mask = matting.mask(inter)?;
    check_mask(&matting_mask)?;
    let gi = Graph::inference();
    let inter_c = gi.constant(inter.clone());
    let mask_c = gi.constant(matting_mask);

    let mut total = g.scalar(0.0);
    let (mut acc_p, mut acc_l1, mut acc_bg) = (0.0, 0.0, 0.0);
    for out in &forward.synthesis.outputs {
        let r = out.plan.resolution;
        let target = inter_c.resize_bilinear(r, r).array();
        let mask_target = mask_c.resize_bilinear(r, r).array();
        let per = perceptual_loss_var(g, backend, &out.fused, &target);
        let l1 = l1_loss_var(&out.fused, &g.constant(target));
        let bg = l1_loss_var(&out.mask, &g.constant(mask_target));
        acc_p += per.value();
        acc_l1 += l1.value();
        acc_bg += bg.value();
        let term = per
            .scale(weights.perceptual)
            .add(&l1.scale(weights.l1))
            .add(&bg.scale(weights.background));
        total = total.add(&term);
    }
    let losses = StepLosses {
        perceptual: acc_p,
        l1: acc_l1,
        background: acc_bg,
        total: total.value(),
    };
    Ok((total, losses))
}

/// Result of a training run.
pub struct TrainReport {
    pub step_losses: Vec<StepLosses>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains the model in place. Every step samples an input resolution
/// uniformly from the supported set and sums the loss over all generated
/// routes; single-resolution models reduce to the plain total loss.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    backend: &dyn FeatureBackend,
    matting: &dyn MattingAdapter,
) -> Result<TrainReport> {
    cfg.weights.validate()?;
    if cfg.epochs == 0 || cfg.steps_per_epoch == 0 {
        return Err(Error::config("epochs and steps_per_epoch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let routes = model.route_plans();
    let resolutions = model.cfg.supported_resolutions();
    let mut log: Option<std::io::BufWriter<std::fs::File>> = match &cfg.log_path {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "step,epoch,perceptual,l1,background,total,lr")?;
            Some(f)
        }
        None => None,
    };

    let mut report = TrainReport {
        step_losses: Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch),
        final_checkpoint: None,
    };
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        adam.lr = learning_rate(cfg.learning_rate, cfg.gamma, &cfg.milestones, epoch);
        for _ in 0..cfg.steps_per_epoch {
            let (key_full, inter_full) = dataset.sample_pair(&mut rng);
            let input_res = *resolutions.choose(&mut rng).expect("nonempty resolutions");
            let gi = Graph::inference();
            let key = gi.constant(key_full).resize_bilinear(input_res, input_res).array();
            let inter = gi
                .constant(inter_full)
                .resize_bilinear(input_res, input_res)
                .array();

            let g = Graph::recording();
            let (loss, losses) =
                pair_loss_var(&g, model, &key, &inter, &routes, backend, matting, &cfg.weights)
                    .map_err(|e| Error::Train(format!("step {global_step}: {e}")))?;
            let grads = g.backward(&loss);
            adam.step(model.params_mut(), &grads);

            if let Some(f) = log.as_mut() {
                writeln!(
                    f,
                    "{},{},{:.8},{:.8},{:.8},{:.8},{:.8}",
                    global_step, epoch, losses.perceptual, losses.l1, losses.background,
                    losses.total, adam.lr
                )?;
            }
            report.step_losses.push(losses);
            global_step += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("epoch{:04}.ckpt", epoch + 1));
                model.save_checkpoint(&path)?;
                report.final_checkpoint = Some(path);
            }
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    Ok(report)
}
