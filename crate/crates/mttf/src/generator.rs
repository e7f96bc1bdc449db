//! Foreground-and-background parallel generation with resolution-expandable
//! decoders.
//!
//! Both branches decode from the analysis grid `G` up to the requested output
//! resolution `r_i` through `n_u` upsample blocks followed by `depth - n_u`
//! size-preserving blocks. Blocks are pooled: an up/down block is keyed by
//! the scale it operates at and is shared by every route that passes through
//! that scale, so the model's distinct-parameter count does not depend on
//! which route runs. The background branch warps the key frame first and
//! then generates; the foreground branch warps bottleneck and skip features
//! while generating, gated per stage by the occlusion map.

use crate::autodiff::{Arr, Graph, Param, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::motion::{grid_to_channels, DenseMotion, MotionRole, OcclusionMap};
use crate::nn::{Conv2d, ConvBlock, Init, ResBlock, UNet, UpBlock};
use crate::video::{frame_to_arr, FrameImage};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// The decoder route serving one output resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutePlan {
    /// Target output resolution `r_i`.
    pub resolution: usize,
    /// Index `i` with `resolution == largest >> i`.
    pub resolution_index: usize,
    /// Number of upsample blocks on this route.
    pub upsample_blocks: usize,
    /// Number of size-preserving blocks after the upsampling.
    pub same_blocks: usize,
    /// Decoder block identifiers in execution order; blocks whose identifier
    /// repeats across routes are the same parameter object in each branch.
    pub block_ids: Vec<String>,
}

/// Computes the route for `target` resolution under a generator of the given
/// `depth` supporting `resolutions` dyadic sizes below `largest`.
pub fn plan_route(
    largest: usize,
    target: usize,
    depth: usize,
    resolutions: usize,
) -> Result<RoutePlan> {
    let index = (0..resolutions)
        .find(|&i| largest >> i == target)
        .ok_or_else(|| {
            Error::config(format!(
                "resolution {target} not supported (largest {largest}, {resolutions} routes)"
            ))
        })?;
    if index >= depth {
        return Err(Error::config(format!(
            "route {index} needs at least one upsample block (depth {depth})"
        )));
    }
    let upsample_blocks = depth - index;
    let grid = largest >> depth;
    let mut block_ids = Vec::with_capacity(depth);
    for slot in 1..=depth {
        if slot <= upsample_blocks {
            block_ids.push(format!("up.s{}", grid << (slot - 1)));
        } else {
            block_ids.push(format!("same{slot}.s{target}"));
        }
    }
    Ok(RoutePlan {
        resolution: target,
        resolution_index: index,
        upsample_blocks,
        same_blocks: depth - upsample_blocks,
        block_ids,
    })
}

/// Pool of decoder blocks shared across routes.
#[derive(Debug, Clone)]
struct DecoderTower {
    ups: BTreeMap<usize, UpBlock>,
    sames: BTreeMap<(usize, usize), ResBlock>,
}

impl DecoderTower {
    fn new(name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let grid = cfg.grid_size();
        let mut ups = BTreeMap::new();
        let mut sames = BTreeMap::new();
        for index in 0..cfg.resolution_count {
            let target = cfg.largest_resolution >> index;
            let n_up = cfg.depth - index;
            for slot in 1..=cfg.depth {
                if slot <= n_up {
                    let scale = grid << (slot - 1);
                    ups.entry(scale).or_insert_with(|| {
                        UpBlock::new(&format!("{name}.up.s{scale}"), cfg.generator_width, cfg.generator_width, rng)
                    });
                } else {
                    sames.entry((slot, target)).or_insert_with(|| {
                        ResBlock::new(&format!("{name}.same{slot}.s{target}"), cfg.generator_width, rng)
                    });
                }
            }
        }
        DecoderTower { ups, sames }
    }

    fn block(&self, plan: &RoutePlan, stage: usize, grid: usize) -> &dyn DecoderBlock {
        if stage <= plan.upsample_blocks {
            &self.ups[&(grid << (stage - 1))]
        } else {
            &self.sames[&(stage, plan.resolution)]
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = Vec::new();
        for b in self.ups.values() {
            p.extend(b.params());
        }
        for b in self.sames.values() {
            p.extend(b.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = Vec::new();
        for b in self.ups.values_mut() {
            p.extend(b.params_mut());
        }
        for b in self.sames.values_mut() {
            p.extend(b.params_mut());
        }
        p
    }
}

trait DecoderBlock {
    fn apply(&self, g: &Graph, x: &Var) -> Var;
}

impl DecoderBlock for UpBlock {
    fn apply(&self, g: &Graph, x: &Var) -> Var {
        self.forward(g, x)
    }
}

impl DecoderBlock for ResBlock {
    fn apply(&self, g: &Graph, x: &Var) -> Var {
        self.forward(g, x)
    }
}

/// "Warp-then-generate" branch: the downsampled key frame is warped by the
/// background motion, refined by a U-Net, and decoded up to `r_i`.
#[derive(Debug, Clone)]
pub struct BackgroundGenerator {
    refiner: UNet,
    decoder: DecoderTower,
    head: Conv2d,
    cfg: ModelConfig,
}

impl BackgroundGenerator {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        BackgroundGenerator {
            refiner: UNet::new("background.refiner", 3, cfg.generator_width, cfg.generator_width, Init::Kaiming, rng),
            decoder: DecoderTower::new("background.decoder", cfg, rng),
            head: Conv2d::new("background.head", cfg.generator_width, 3, 1, 1, 0, Init::Kaiming, rng),
            cfg: cfg.clone(),
        }
    }

    /// Differentiable branch forward; `key` is `(3, r_i, r_i)`, `motion` is a
    /// `(2, G, G)` sampling grid. Output `(3, r_i, r_i)` in `[0, 1]`.
    pub fn forward_var(&self, g: &Graph, key: &Var, motion: &Var, plan: &RoutePlan) -> Var {
        let grid = self.cfg.grid_size();
        let key_small = key.resize_bilinear(grid, grid);
        let warped = key_small.grid_sample(motion);
        let mut x = self.refiner.forward(g, &warped);
        for stage in 1..=self.cfg.depth {
            x = self.decoder.block(plan, stage, grid).apply(g, &x);
        }
        self.head.forward(g, &x).sigmoid()
    }

    /// Plain-array background synthesis.
    pub fn generate(&self, key: &FrameImage, motion: &DenseMotion, plan: &RoutePlan) -> Result<Arr> {
        if motion.role != MotionRole::Background {
            return Err(Error::input("background generator requires the background motion"));
        }
        validate_route_inputs(&self.cfg, key, &motion.grid, plan)?;
        let g = Graph::inference();
        let out = self.forward_var(
            &g,
            &g.constant(frame_to_arr(key)),
            &g.constant(grid_to_channels(&motion.grid)),
            plan,
        );
        Ok(out.array())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.refiner.params();
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.refiner.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// Per-stage record of the foreground decode, exposed for tests and
/// diagnostics.
pub struct ForegroundForward {
    pub image: Var,
    pub mask: Var,
    /// Combined output of every decoder stage (after occlusion gating).
    pub stage_outputs: Vec<Var>,
    /// The warped skip feature each stage was gated against.
    pub warped_skips: Vec<Var>,
}

/// "Warp-while-generate" branch: shared encoder down to the analysis grid,
/// bottleneck warped by the foreground motion, and a decoder whose stages
/// blend generated features with warped encoder skips under the occlusion
/// map.
#[derive(Debug, Clone)]
pub struct ForegroundGenerator {
    stem: ConvBlock,
    enc_sames: BTreeMap<(usize, usize), ResBlock>,
    enc_downs: BTreeMap<usize, ConvBlock>,
    decoder: DecoderTower,
    head: Conv2d,
    cfg: ModelConfig,
}

impl ForegroundGenerator {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = cfg.generator_width;
        let stem = ConvBlock::new("foreground.stem", 3, w, 1, rng);
        let mut enc_sames = BTreeMap::new();
        let mut enc_downs = BTreeMap::new();
        for index in 0..cfg.resolution_count {
            let target = cfg.largest_resolution >> index;
            let n_same = index;
            for slot in 1..=cfg.depth {
                if slot <= n_same {
                    enc_sames.entry((slot, target)).or_insert_with(|| {
                        ResBlock::new(&format!("foreground.enc_same{slot}.s{target}"), w, rng)
                    });
                } else {
                    let scale = target >> (slot - 1 - n_same);
                    enc_downs.entry(scale).or_insert_with(|| {
                        ConvBlock::new(&format!("foreground.down.s{scale}"), w, w, 2, rng)
                    });
                }
            }
        }
        let decoder = DecoderTower::new("foreground.decoder", cfg, rng);
        let head = Conv2d::new("foreground.head", w, 4, 1, 1, 0, Init::Kaiming, rng);
        ForegroundGenerator {
            stem,
            enc_sames,
            enc_downs,
            decoder,
            head,
            cfg: cfg.clone(),
        }
    }

    /// Differentiable branch forward. `skip_perturb`, when given, is added to
    /// each skip feature at gating time only; it exists so tests can verify
    /// that a fully-generated decode (occlusion = 0) ignores the skips.
    pub fn forward_var(
        &self,
        g: &Graph,
        key: &Var,
        motion: &Var,
        occlusion: &Var,
        plan: &RoutePlan,
        skip_perturb: Option<&[Arr]>,
    ) -> ForegroundForward {
        let depth = self.cfg.depth;
        let grid = self.cfg.grid_size();
        let n_same = plan.same_blocks;

        // Encoder: stem, same-size blocks at r_i, then downs to the grid.
        // enc_feats[slot] is the input to encoder slot `slot + 1`.
        let mut enc_feats = Vec::with_capacity(depth + 1);
        let mut x = self.stem.forward(g, key);
        enc_feats.push(x.clone());
        for slot in 1..=depth {
            x = if slot <= n_same {
                self.enc_sames[&(slot, plan.resolution)].forward(g, &x)
            } else {
                let scale = plan.resolution >> (slot - 1 - n_same);
                self.enc_downs[&scale].forward(g, &x)
            };
            enc_feats.push(x.clone());
        }

        // Bottleneck feature warped by the foreground motion.
        let mut feat = enc_feats[depth].grid_sample(motion);

        let mut stage_outputs = Vec::with_capacity(depth);
        let mut warped_skips = Vec::with_capacity(depth);
        let one = g.scalar(1.0);
        for stage in 1..=depth {
            let generated = self.decoder.block(plan, stage, grid).apply(g, &feat);
            let scale = if stage <= plan.upsample_blocks {
                grid << stage
            } else {
                plan.resolution
            };
            let mut skip = enc_feats[depth - stage].clone();
            if let Some(noise) = skip_perturb {
                skip = skip.add(&g.constant(noise[stage - 1].clone()));
            }
            let stage_motion = motion.resize_bilinear(scale, scale);
            let stage_occ = occlusion.resize_bilinear(scale, scale);
            let warped_skip = skip.grid_sample(&stage_motion);
            let inv = one.sub(&stage_occ);
            feat = generated.mul(&inv).add(&warped_skip.mul(&stage_occ));
            stage_outputs.push(feat.clone());
            warped_skips.push(warped_skip);
        }

        let out = self.head.forward(g, &feat).sigmoid();
        ForegroundForward {
            image: out.narrow0(0, 3),
            mask: out.narrow0(3, 1),
            stage_outputs,
            warped_skips,
        }
    }

    /// Plain-array foreground synthesis: `(image, mask)`.
    pub fn generate(
        &self,
        key: &FrameImage,
        motion: &DenseMotion,
        occlusion: &OcclusionMap,
        plan: &RoutePlan,
    ) -> Result<(Arr, Arr)> {
        if motion.role != MotionRole::Foreground {
            return Err(Error::input("foreground generator requires the foreground motion"));
        }
        validate_route_inputs(&self.cfg, key, &motion.grid, plan)?;
        let grid = self.cfg.grid_size();
        if occlusion.map.shape() != [1, grid, grid] {
            return Err(Error::input("occlusion map must be (1, G, G)"));
        }
        let g = Graph::inference();
        let fwd = self.forward_var(
            &g,
            &g.constant(frame_to_arr(key)),
            &g.constant(grid_to_channels(&motion.grid)),
            &g.constant(occlusion.map.clone().into_dyn()),
            plan,
            None,
        );
        Ok((fwd.image.array(), fwd.mask.array()))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        for b in self.enc_sames.values() {
            p.extend(b.params());
        }
        for b in self.enc_downs.values() {
            p.extend(b.params());
        }
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        for b in self.enc_sames.values_mut() {
            p.extend(b.params_mut());
        }
        for b in self.enc_downs.values_mut() {
            p.extend(b.params_mut());
        }
        p.extend(self.decoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

fn validate_route_inputs(
    cfg: &ModelConfig,
    key: &FrameImage,
    motion: &ndarray::Array3<f64>,
    plan: &RoutePlan,
) -> Result<()> {
    let grid = cfg.grid_size();
    if plan.resolution != cfg.largest_resolution >> plan.resolution_index
        || plan.upsample_blocks + plan.same_blocks != cfg.depth
    {
        return Err(Error::input("route plan does not match this generator"));
    }
    if key.resolution() != plan.resolution {
        return Err(Error::input(format!(
            "key frame is {}px, route expects {}px",
            key.resolution(),
            plan.resolution
        )));
    }
    if motion.shape() != [grid, grid, 2] {
        return Err(Error::input("dense motion must live on the analysis grid"));
    }
    Ok(())
}

/// Final synthesis products of one inter frame.
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub foreground: Arr,
    pub background: Arr,
    pub mask: Arr,
    pub fused: Arr,
}

/// Differentiable mask fusion: `mask * fg + (1 - mask) * bg`.
pub fn fuse_var(g: &Graph, fg: &Var, bg: &Var, mask: &Var) -> Var {
    let one = g.scalar(1.0);
    mask.mul(fg).add(&one.sub(mask).mul(bg))
}

/// Blends foreground and background with the predicted mask. `fg` and `bg`
/// must have identical shapes; the single-channel mask broadcasts over the
/// color channels and must lie in `[0, 1]`.
pub fn fuse(fg: &Arr, bg: &Arr, mask: &Arr) -> Result<Arr> {
    if fg.shape() != bg.shape() {
        return Err(Error::input("fuse: foreground/background shape mismatch"));
    }
    if mask.shape()[1..] != fg.shape()[1..] {
        return Err(Error::input("fuse: mask spatial size mismatch"));
    }
    if mask.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::input("fuse: mask outside [0, 1]"));
    }
    let g = Graph::inference();
    Ok(fuse_var(&g, &g.constant(fg.clone()), &g.constant(bg.clone()), &g.constant(mask.clone())).array())
}
