//! Coarse-to-fine motion estimation: per-component flow prediction from the
//! two fine-grained motion fields, key-frame deformation, combination-weight
//! and occlusion prediction, and softmax composition of separate dense
//! motions for foreground and background.
//!
//! Flow components are absolute sampling grids in normalized `[-1, 1]`
//! coordinates (identity grid plus a predicted displacement), clamped to a
//! configurable out-of-frame margin so all downstream sampling stays bounded.

use crate::autodiff::{concat0, identity_grid, Arr, Graph, Param, Var};
use crate::error::{Error, Result};
use crate::factorizer::FineGrainedMotionField;
use crate::model::ModelConfig;
use crate::nn::{Init, UNet};
use crate::video::{frame_to_arr, FrameImage};
use ndarray::{Array3, Array4, IxDyn};
use rand_chacha::ChaCha8Rng;

/// All `2 * channels` candidate sampling grids, `(components, G, G, 2)` with
/// the last axis holding `(x, y)` normalized coordinates.
#[derive(Debug, Clone)]
pub struct CoarseFlowSet {
    pub flows: Array4<f64>,
}

impl CoarseFlowSet {
    pub fn components(&self) -> usize {
        self.flows.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.flows.shape()[1]
    }
}

/// Key frame warped by every coarse flow component: `(3, components, G, G)`.
#[derive(Debug, Clone)]
pub struct DeformedStack {
    pub images: Array4<f64>,
}

impl DeformedStack {
    pub fn components(&self) -> usize {
        self.images.shape()[1]
    }
}

/// Pre-softmax combination logits, `(components, G, G)`.
#[derive(Debug, Clone)]
pub struct MotionWeights {
    pub logits: Array3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionRole {
    Foreground,
    Background,
}

/// Final dense motion of one group: `(G, G, 2)` absolute sampling grid.
#[derive(Debug, Clone)]
pub struct DenseMotion {
    pub grid: Array3<f64>,
    pub role: MotionRole,
}

impl DenseMotion {
    pub fn identity(grid: usize, role: MotionRole) -> Self {
        DenseMotion {
            grid: grid_to_last_axis(&identity_grid(grid, grid)),
            role,
        }
    }
}

/// Sigmoid occlusion map for the foreground decoder, `(1, G, G)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct OcclusionMap {
    pub map: Array3<f64>,
}

/// `(2, h, w)` channel grid -> `(h, w, 2)` last-axis grid.
pub fn grid_to_last_axis(grid: &Arr) -> Array3<f64> {
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    Array3::from_shape_fn((h, w, 2), |(y, x, c)| grid[IxDyn(&[c, y, x])])
}

/// `(h, w, 2)` last-axis grid -> `(2, h, w)` channel grid.
pub fn grid_to_channels(grid: &Array3<f64>) -> Arr {
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    Arr::from_shape_fn(IxDyn(&[2, h, w]), |ix| grid[(ix[1], ix[2], ix[0])])
}

/// Bilinear grid sampling with border clamping, on plain arrays.
/// `image` is `(C, H, W)`; `grid` is `(h, w, 2)` normalized coordinates.
pub fn warp_image(image: &Arr, grid: &Array3<f64>) -> Arr {
    let g = Graph::inference();
    g.constant(image.clone())
        .grid_sample(&g.constant(grid_to_channels(grid)))
        .array()
}

/// Flow predictor and combination-weight/occlusion predictor.
#[derive(Debug, Clone)]
pub struct MotionEstimator {
    /// Maps the concatenated motion fields to per-component displacements.
    pub flow_net: UNet,
    /// Maps fields + deformed stack to combination logits and occlusion.
    pub weight_net: UNet,
    pub channels: usize,
    pub margin: f64,
}

impl MotionEstimator {
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.channels;
        MotionEstimator {
            // Zero-initialized head: the initial flows are identity grids.
            flow_net: UNet::new("motion.flow", 2 * n, 4 * n, cfg.generator_width, Init::Zero, rng),
            weight_net: UNet::new(
                "motion.weight",
                2 * n + 6 * n,
                2 * n + 1,
                cfg.generator_width,
                Init::Kaiming,
                rng,
            ),
            channels: n,
            margin: cfg.motion_margin,
        }
    }

    /// Differentiable coarse flows: `(4 * channels, G, G)` where channels
    /// `2k`/`2k+1` are the x/y coordinate planes of component `k`.
    pub fn coarse_flows_var(&self, g: &Graph, f_key: &Var, f_inter: &Var) -> Var {
        let grid = f_key.shape()[1];
        let disp = self.flow_net.forward(g, &concat0(&[f_key.clone(), f_inter.clone()]));
        let id = identity_grid(grid, grid);
        let mut tiled = Arr::zeros(IxDyn(&[4 * self.channels, grid, grid]));
        for k in 0..2 * self.channels {
            for c in 0..2 {
                for y in 0..grid {
                    for x in 0..grid {
                        tiled[IxDyn(&[2 * k + c, y, x])] = id[IxDyn(&[c, y, x])];
                    }
                }
            }
        }
        let bound = 1.0 + self.margin;
        disp.add(&g.constant(tiled)).clamp(-bound, bound)
    }

    /// Warps `key_small` (`(3, G, G)`) by every component; output stacks the
    /// warped images channel-wise as `(6 * channels, G, G)`.
    pub fn deform_var(&self, key_small: &Var, flows: &Var) -> Var {
        let parts: Vec<Var> = (0..2 * self.channels)
            .map(|k| key_small.grid_sample(&flows.narrow0(2 * k, 2)))
            .collect();
        concat0(&parts)
    }

    /// Combination logits `(2 * channels, G, G)` and occlusion `(1, G, G)`.
    pub fn weights_occ_var(
        &self,
        g: &Graph,
        f_key: &Var,
        f_inter: &Var,
        deformed: &Var,
    ) -> (Var, Var) {
        let input = concat0(&[f_key.clone(), f_inter.clone(), deformed.clone()]);
        let out = self.weight_net.forward(g, &input);
        let logits = out.narrow0(0, 2 * self.channels);
        let occ = out.narrow0(2 * self.channels, 1).sigmoid();
        (logits, occ)
    }

    /// Per-group softmax combination of flow components into two dense
    /// motions, `(2, G, G)` each; foreground components come first.
    pub fn dense_motion_var(
        &self,
        flows: &Var,
        logits: &Var,
        fg_components: usize,
        bg_components: usize,
    ) -> (Var, Var) {
        let fg = weighted_group(flows, logits, 0, fg_components);
        let bg = weighted_group(flows, logits, fg_components, bg_components);
        (fg, bg)
    }

    // ---- plain-array entry points -----------------------------------------

    pub fn predict_coarse_flows(
        &self,
        f_key: &FineGrainedMotionField,
        f_inter: &FineGrainedMotionField,
    ) -> Result<CoarseFlowSet> {
        if f_key.data.shape() != f_inter.data.shape() {
            return Err(Error::input("motion field shape mismatch"));
        }
        if f_key.channels() != self.channels {
            return Err(Error::input(format!(
                "motion fields have {} channels, estimator expects {}",
                f_key.channels(),
                self.channels
            )));
        }
        let g = Graph::inference();
        let flows = self.coarse_flows_var(
            &g,
            &g.constant(f_key.data.clone()),
            &g.constant(f_inter.data.clone()),
        );
        Ok(CoarseFlowSet {
            flows: flows_to_last_axis(flows.data(), 2 * self.channels),
        })
    }

    pub fn deform_keyframe(
        &self,
        key_small: &FrameImage,
        flows: &CoarseFlowSet,
    ) -> Result<DeformedStack> {
        if key_small.resolution() != flows.grid() {
            return Err(Error::input("key frame must already be on the analysis grid"));
        }
        let g = Graph::inference();
        let stacked = self.deform_var(
            &g.constant(frame_to_arr(key_small)),
            &g.constant(flows_to_channels(&flows.flows)),
        );
        // (3 * components, G, G) -> (3, components, G, G)
        let n = flows.components();
        let grid = flows.grid();
        let data = stacked.data();
        let images = Array4::from_shape_fn((3, n, grid, grid), |(c, k, y, x)| {
            data[IxDyn(&[3 * k + c, y, x])]
        });
        Ok(DeformedStack { images })
    }

    pub fn predict_weights_and_occlusion(
        &self,
        f_key: &FineGrainedMotionField,
        f_inter: &FineGrainedMotionField,
        deformed: &DeformedStack,
    ) -> Result<(MotionWeights, OcclusionMap)> {
        let grid = f_key.grid();
        if f_inter.grid() != grid || deformed.images.shape()[2] != grid {
            return Err(Error::input("inconsistent grid sizes"));
        }
        if deformed.components() != 2 * self.channels {
            return Err(Error::input("deformed stack component count mismatch"));
        }
        let g = Graph::inference();
        let n = deformed.components();
        let flat = Arr::from_shape_fn(IxDyn(&[3 * n, grid, grid]), |ix| {
            deformed.images[(ix[0] % 3, ix[0] / 3, ix[1], ix[2])]
        });
        let (logits, occ) = self.weights_occ_var(
            &g,
            &g.constant(f_key.data.clone()),
            &g.constant(f_inter.data.clone()),
            &g.constant(flat),
        );
        let logits3 = logits
            .array()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("logits are 3-d");
        let occ3 = occ
            .array()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("occlusion is 3-d");
        Ok((MotionWeights { logits: logits3 }, OcclusionMap { map: occ3 }))
    }

    pub fn compose_dense_motion(
        &self,
        flows: &CoarseFlowSet,
        weights: &MotionWeights,
        fg_components: usize,
        bg_components: usize,
    ) -> Result<(DenseMotion, DenseMotion)> {
        let total = flows.components();
        if fg_components + bg_components != total {
            return Err(Error::config(format!(
                "split {fg_components}+{bg_components} != {total} components"
            )));
        }
        if fg_components == 0 || bg_components == 0 {
            return Err(Error::config("each motion group needs at least one component"));
        }
        if weights.logits.shape()[0] != total {
            return Err(Error::input("weight logits do not match flow components"));
        }
        let g = Graph::inference();
        let fv = g.constant(flows_to_channels(&flows.flows));
        let lv = g.constant(weights.logits.clone().into_dyn());
        let (fg, bg) = self.dense_motion_var(&fv, &lv, fg_components, bg_components);
        Ok((
            DenseMotion {
                grid: grid_to_last_axis(fg.data()),
                role: MotionRole::Foreground,
            },
            DenseMotion {
                grid: grid_to_last_axis(bg.data()),
                role: MotionRole::Background,
            },
        ))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.flow_net.params();
        p.extend(self.weight_net.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.flow_net.params_mut();
        p.extend(self.weight_net.params_mut());
        p
    }
}

/// Softmax-weighted sum of one component group; `flows` is the channel
/// layout `(2 * total, G, G)`, logits `(total, G, G)`.
fn weighted_group(flows: &Var, logits: &Var, start: usize, count: usize) -> Var {
    let group_logits = logits.narrow0(start, count);
    let weights = group_logits.softmax0();
    let mut acc: Option<Var> = None;
    for k in 0..count {
        let component = flows.narrow0(2 * (start + k), 2);
        let term = component.mul(&weights.narrow0(k, 1));
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.expect("at least one component")
}

/// `(2n, G, G)` channel planes -> `(n, G, G, 2)` component grids.
pub fn flows_to_last_axis(flows: &Arr, components: usize) -> Array4<f64> {
    let grid = flows.shape()[1];
    Array4::from_shape_fn((components, grid, grid, 2), |(k, y, x, c)| {
        flows[IxDyn(&[2 * k + c, y, x])]
    })
}

/// `(n, G, G, 2)` component grids -> `(2n, G, G)` channel planes.
pub fn flows_to_channels(flows: &Array4<f64>) -> Arr {
    let (n, grid) = (flows.shape()[0], flows.shape()[1]);
    Arr::from_shape_fn(IxDyn(&[2 * n, grid, grid]), |ix| {
        flows[(ix[0] / 2, ix[1], ix[2], ix[0] % 2)]
    })
}
