//! Joint fitting of the radiance field and the two boundary poses to one
//! coded measurement.
//!
//! Every iteration renders the same set of windows at all `N` interpolated
//! poses, re-encodes them with the masks, and compares the result with the
//! captured measurement on those pixels. A total-variation term on each
//! rendered window is added. Network gradients are exact; pose gradients
//! come from central differences of the same batch loss.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_archive, ArchiveEntry, DType, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{
    interpolate_pose, sample_patches_train, sample_rays_random, se3_exp, tile_patches_inference,
    CameraIntrinsics, PatchBatch, PatchGrid, Pose,
};
use crate::metrics::{mean_frame_psnr, psnr};
use crate::rayformer::{
    backward, FieldInput, FieldOutput, ForwardCache, GradientBundle, NetworkConfig, NetworkParams,
    RayFormer, SceneBounds,
};
use crate::renderer::{
    composite, composite_backward, render_batch, render_frame, RadianceField, RenderOutput,
    RenderSettings,
};
use crate::sci::{compress, FrameStack, MaskStack, Measurement};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the anisotropic total-variation term.
    pub lambda_tv: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_tv: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tv.is_finite() && self.lambda_tv >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_tv must be finite and >= 0, got {}",
                self.lambda_tv
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Windows drawn per iteration; each is rendered at every pose.
    pub batch_windows: usize,
    /// Window height and width in pixels.
    pub window: [usize; 2],
    /// When false, each "window" is a set of independently drawn pixels.
    pub patch_sampling: bool,
    pub l_samples: usize,
    pub stratified: bool,
    pub lr_hash: f64,
    pub lr_network: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Standard deviation of the initial pose tangent vectors.
    pub pose_init_scale: f64,
    /// Pose gradients are re-estimated every this many iterations and the latest
    /// estimate drives the pose update on every iteration (0 disables pose updates).
    pub pose_every: usize,
    /// Central-difference step for pose gradients.
    pub pose_step: f64,
    /// Frame PSNR against ground truth is logged every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Checkpoints are written every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Learning-rate multiplier reached at the last iteration by exponential decay (1 = constant).
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_windows: 1,
            window: [8, 8],
            patch_sampling: true,
            l_samples: 32,
            stratified: true,
            lr_hash: 1e-2,
            lr_network: 1e-3,
            lr_pose: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            pose_init_scale: 0.01,
            pose_every: 50,
            pose_step: 1e-4,
            eval_every: 500,
            checkpoint_every: 1000,
            lr_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_hash", self.lr_hash),
            ("lr_network", self.lr_network),
            ("lr_pose", self.lr_pose),
            ("epsilon", self.epsilon),
            ("pose_step", self.pose_step),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.pose_init_scale >= 0.0) {
            return Err(Error::Config("pose_init_scale must be >= 0".into()));
        }
        if self.batch_windows == 0 || self.window[0] == 0 || self.window[1] == 0 {
            return Err(Error::Config(
                "batch and window sizes must be non-zero".into(),
            ));
        }
        if self.l_samples == 0 {
            return Err(Error::Config("l_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Learning rates for a 1-based iteration under the exponential decay schedule.
    pub fn learning_rates(&self, iteration: usize) -> LearningRates {
        let progress =
            iteration.saturating_sub(1) as f64 / self.iterations.saturating_sub(1).max(1) as f64;
        let scale = self.lr_decay.powf(progress.min(1.0));
        LearningRates {
            hash: self.lr_hash * scale,
            network: self.lr_network * scale,
            pose: self.lr_pose * scale,
        }
    }
}

/// Everything the optimizer sees: the measurement, its masks and the camera.
#[derive(Debug, Clone)]
pub struct Problem {
    pub measurement: Measurement,
    pub masks: MaskStack,
    pub intrinsics: CameraIntrinsics,
    pub near_far: (f64, f64),
    /// Held-out frames, used only for monitoring.
    pub ground_truth: Option<FrameStack>,
}

impl Problem {
    pub fn n_frames(&self) -> usize {
        self.masks.n_frames
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        if (self.masks.height, self.masks.width) != (h, w)
            || (self.measurement.height, self.measurement.width) != (h, w)
        {
            return Err(Error::Dimension(format!(
                "camera is {h}x{w}, masks {}x{}, measurement {}x{}",
                self.masks.height,
                self.masks.width,
                self.measurement.height,
                self.measurement.width
            )));
        }
        if self.measurement.channels != 3 {
            return Err(Error::Dimension("measurement must have 3 channels".into()));
        }
        if let Some(gt) = &self.ground_truth {
            if (gt.n_frames, gt.height, gt.width, gt.channels) != (self.n_frames(), h, w, 3) {
                return Err(Error::Dimension(
                    "ground truth does not match the masks".into(),
                ));
            }
        }
        let (near, far) = self.near_far;
        if !(near > 0.0 && far > near) {
            return Err(Error::Config(format!(
                "need 0 < near < far, got {near}, {far}"
            )));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream and an index into an independent seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_WINDOWS: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_INIT: u64 = 3;

/// Poses of the `n` virtual frames between the two boundary tangent vectors.
pub fn frame_poses(first: &[f64; 6], last: &[f64; 6], n: usize) -> Result<Vec<Pose>> {
    let a = se3_exp(&Vector6::from_column_slice(first));
    let b = se3_exp(&Vector6::from_column_slice(last));
    (1..=n).map(|i| interpolate_pose(&a, &b, i, n)).collect()
}

/// Per-frame mask values at the given pixels, `(N, pixels)`.
pub fn restrict_masks(masks: &MaskStack, pixels: &[(usize, usize)]) -> Vec<Vec<f64>> {
    (0..masks.n_frames)
        .map(|f| pixels.iter().map(|&(r, c)| masks.get(f, r, c)).collect())
        .collect()
}

/// `Y'(r) = sum_i M(r, i) C(r, i)` for every pixel of a batch.
pub fn synthesize_patch_measurement(
    renders: &[Vec<[f64; 3]>],
    masks: &[Vec<f64>],
) -> Result<Vec<[f64; 3]>> {
    if renders.len() != masks.len() || renders.is_empty() {
        return Err(Error::Dimension(format!(
            "{} rendered frames but {} mask frames",
            renders.len(),
            masks.len()
        )));
    }
    let n_pix = renders[0].len();
    if renders.iter().any(|r| r.len() != n_pix) || masks.iter().any(|m| m.len() != n_pix) {
        return Err(Error::Dimension(
            "frames cover different pixel counts".into(),
        ));
    }
    let mut out = vec![[0.0; 3]; n_pix];
    for (render, mask) in renders.iter().zip(masks) {
        for ((acc, rgb), &m) in out.iter_mut().zip(render).zip(mask) {
            for c in 0..3 {
                acc[c] += m * rgb[c];
            }
        }
    }
    Ok(out)
}

/// Sum of squared differences within each patch, averaged over `n_patches`.
pub fn measurement_loss(y: &[f64], y_hat: &[f64], n_patches: usize) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "measurement has {} values, synthesis {}",
            y.len(),
            y_hat.len()
        )));
    }
    if n_patches == 0 {
        return Err(Error::Config("at least one patch is required".into()));
    }
    let sum: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n_patches as f64)
}

/// Anisotropic L1 total variation of one `(h, w, channels)` patch.
pub fn tv_loss(patch: &[f64], h: usize, w: usize, channels: usize) -> f64 {
    debug_assert_eq!(patch.len(), h * w * channels);
    let at = |r: usize, c: usize, ch: usize| patch[(r * w + c) * channels + ch];
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            for ch in 0..channels {
                if c + 1 < w {
                    total += (at(r, c + 1, ch) - at(r, c, ch)).abs();
                }
                if r + 1 < h {
                    total += (at(r + 1, c, ch) - at(r, c, ch)).abs();
                }
            }
        }
    }
    total
}

/// Adds `scale * d tv / d patch` into `grad`; the sign of a zero difference is taken as zero.
pub fn tv_backward(
    patch: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    scale: f64,
    grad: &mut [f64],
) {
    let idx = |r: usize, c: usize, ch: usize| (r * w + c) * channels + ch;
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for r in 0..h {
        for c in 0..w {
            for ch in 0..channels {
                let here = idx(r, c, ch);
                if c + 1 < w {
                    let s = scale * sign(patch[idx(r, c + 1, ch)] - patch[here]);
                    grad[idx(r, c + 1, ch)] += s;
                    grad[here] -= s;
                }
                if r + 1 < h {
                    let s = scale * sign(patch[idx(r + 1, c, ch)] - patch[here]);
                    grad[idx(r + 1, c, ch)] += s;
                    grad[here] -= s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// `measurement + lambda_tv * tv`.
    pub total: f64,
    pub measurement: f64,
    /// Unweighted TV, averaged over windows and frames.
    pub tv: f64,
    /// Mean squared measurement error per value.
    pub mse: f64,
}

/// Windows and per-frame jitter seeds shared by every loss evaluation of one iteration.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub grid: PatchGrid,
    pub jitter_seeds: Vec<u64>,
    /// Whether neighbouring entries of a window are neighbouring pixels.
    pub spatial: bool,
}

pub fn plan_batch(
    config: &TrainConfig,
    problem: &Problem,
    seed: u64,
    iteration: u64,
) -> Result<BatchPlan> {
    let image = (problem.intrinsics.height, problem.intrinsics.width);
    let window = (config.window[0], config.window[1]);
    let window_seed = derive_seed(seed, STREAM_WINDOWS, iteration);
    let grid = if config.patch_sampling {
        sample_patches_train(window_seed, image, window, config.batch_windows)?
    } else {
        sample_rays_random(window_seed, image, window, config.batch_windows)?
    };
    let jitter_seeds = (0..problem.n_frames() as u64)
        .map(|f| derive_seed(seed, STREAM_JITTER, iteration * 1024 + f))
        .collect();
    Ok(BatchPlan {
        grid,
        jitter_seeds,
        spatial: config.patch_sampling,
    })
}

/// Renders of one frame for one batch plan.
struct FrameForward {
    input: FieldInput,
    output: FieldOutput,
    cache: Option<ForwardCache>,
    deltas: Vec<f64>,
    composites: Vec<RenderOutput>,
}

impl FrameForward {
    fn rgb(&self) -> Vec<[f64; 3]> {
        self.composites.iter().map(|c| c.rgb).collect()
    }
}

fn forward_frame(
    model: &RayFormer,
    problem: &Problem,
    config: &TrainConfig,
    plan: &BatchPlan,
    frame: usize,
    pose: &Pose,
    keep_cache: bool,
) -> Result<FrameForward> {
    let batch = PatchBatch::build(
        plan.grid.clone(),
        pose,
        &problem.intrinsics,
        problem.near_far,
        config.l_samples,
        config.stratified,
        plan.jitter_seeds[frame],
    )?;
    let input = FieldInput::from_batch(&batch, &model.bounds);
    let (output, cache) = model.forward(&input)?;
    let l = config.l_samples;
    let composites = (0..batch.rays.len())
        .map(|r| {
            let span = r * l..(r + 1) * l;
            composite(
                &output.sigma[span.clone()],
                &output.color[span.clone()],
                &batch.deltas[span],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameForward {
        input,
        output,
        cache: keep_cache.then_some(cache),
        deltas: batch.deltas,
        composites,
    })
}

/// Loss of one batch plus, optionally, its gradient with respect to every rendered pixel.
fn batch_loss(
    renders: &[Vec<[f64; 3]>],
    problem: &Problem,
    plan: &BatchPlan,
    loss: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<[f64; 3]>>)> {
    let pixels = &plan.grid.pixels;
    let masks = restrict_masks(&problem.masks, pixels);
    let synth = synthesize_patch_measurement(renders, &masks)?;
    let observed: Vec<f64> = pixels
        .iter()
        .flat_map(|&(r, c)| (0..3).map(move |ch| (r, c, ch)))
        .map(|(r, c, ch)| problem.measurement.get(r, c, ch))
        .collect();
    let synth_flat: Vec<f64> = synth.iter().flatten().copied().collect();
    let n_windows = plan.grid.n_windows();
    let n_frames = renders.len();
    let measurement = measurement_loss(&observed, &synth_flat, n_windows)?;
    let (wh, ww) = (plan.grid.window_h, plan.grid.window_w);
    let per_window = wh * ww;
    let use_tv = plan.spatial && loss.lambda_tv > 0.0;
    let mut tv = 0.0;
    if plan.spatial {
        for render in renders {
            for w in 0..n_windows {
                let patch: Vec<f64> = render[w * per_window..(w + 1) * per_window]
                    .iter()
                    .flatten()
                    .copied()
                    .collect();
                tv += tv_loss(&patch, wh, ww, 3);
            }
        }
        tv /= (n_windows * n_frames) as f64;
    }
    let total = measurement + if use_tv { loss.lambda_tv * tv } else { 0.0 };
    let breakdown = LossBreakdown {
        total,
        measurement,
        tv,
        mse: measurement * n_windows as f64 / observed.len() as f64,
    };
    if !want_grad {
        return Ok((breakdown, Vec::new()));
    }
    let data_scale = 2.0 / n_windows as f64;
    let tv_scale = loss.lambda_tv / (n_windows * n_frames) as f64;
    let upstream = renders
        .iter()
        .zip(&masks)
        .map(|(render, mask)| {
            let mut g: Vec<[f64; 3]> = synth
                .iter()
                .zip(&mask[..])
                .enumerate()
                .map(|(k, (y_hat, &m))| {
                    let mut out = [0.0; 3];
                    for ch in 0..3 {
                        out[ch] = data_scale * (y_hat[ch] - observed[k * 3 + ch]) * m;
                    }
                    out
                })
                .collect();
            if use_tv {
                for w in 0..n_windows {
                    let span = w * per_window..(w + 1) * per_window;
                    let patch: Vec<f64> = render[span.clone()].iter().flatten().copied().collect();
                    let mut d = vec![0.0; patch.len()];
                    tv_backward(&patch, wh, ww, 3, tv_scale, &mut d);
                    for (dst, src) in g[span].iter_mut().zip(d.chunks_exact(3)) {
                        for ch in 0..3 {
                            dst[ch] += src[ch];
                        }
                    }
                }
            }
            g
        })
        .collect();
    Ok((breakdown, upstream))
}

/// Loss of a batch at the given boundary poses, without gradients.
///
/// Frames whose pose equals the corresponding entry of `reuse` keep the supplied renders.
#[allow(clippy::too_many_arguments)]
pub fn loss_at_poses<F: RadianceField + Sync + ?Sized>(
    field: &F,
    problem: &Problem,
    config: &TrainConfig,
    loss: &LossConfig,
    plan: &BatchPlan,
    first: &[f64; 6],
    last: &[f64; 6],
    reuse: Option<(&[Pose], &[Vec<[f64; 3]>])>,
) -> Result<f64> {
    let poses = frame_poses(first, last, problem.n_frames())?;
    let renders = poses
        .par_iter()
        .enumerate()
        .map(|(f, pose)| {
            if let Some((base_poses, base_renders)) = reuse {
                if base_poses[f] == *pose {
                    return Ok(base_renders[f].clone());
                }
            }
            let batch = PatchBatch::build(
                plan.grid.clone(),
                pose,
                &problem.intrinsics,
                problem.near_far,
                config.l_samples,
                config.stratified,
                plan.jitter_seeds[f],
            )?;
            render_batch(field, &batch, [0.0; 3])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_loss(&renders, problem, plan, loss, false)?.0.total)
}

/// Central-difference gradients of `loss` with respect to both pose 6-vectors.
pub fn pose_gradients<F>(
    mut loss: F,
    first: &[f64; 6],
    last: &[f64; 6],
    step: f64,
) -> Result<([f64; 6], [f64; 6])>
where
    F: FnMut(&[f64; 6], &[f64; 6]) -> Result<f64>,
{
    let mut g_first = [0.0; 6];
    let mut g_last = [0.0; 6];
    for k in 0..6 {
        let (mut plus, mut minus) = (*first, *first);
        plus[k] += step;
        minus[k] -= step;
        g_first[k] = (loss(&plus, last)? - loss(&minus, last)?) / (2.0 * step);
    }
    for k in 0..6 {
        let (mut plus, mut minus) = (*last, *last);
        plus[k] += step;
        minus[k] -= step;
        g_last[k] = (loss(first, &plus)? - loss(first, &minus)?) / (2.0 * step);
    }
    Ok((g_first, g_last))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub hash: f64,
    pub network: f64,
    pub pose: f64,
}

impl LearningRates {
    pub fn for_tensor(&self, name: &str) -> f64 {
        if name.starts_with("hash.") {
            self.hash
        } else if name.starts_with("pose.") {
            self.pose
        } else {
            self.network
        }
    }
}

/// First and second moments plus a step counter per tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first: NetworkParams,
    pub second: NetworkParams,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros = params.zeros_like();
        AdamState {
            steps: vec![0; zeros.tensors().len()],
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Bias-corrected adaptive-moment update. Pose tensors are only touched when `update_poses` is set.
pub fn optimizer_step(
    params: &mut NetworkParams,
    grads: &GradientBundle,
    state: &mut AdamState,
    adam: &AdamConfig,
    lrs: &LearningRates,
    update_poses: bool,
) {
    let grads = grads.tensors();
    let mut first = state.first.tensors_mut();
    let mut second = state.second.tensors_mut();
    for (i, (name, p)) in params.tensors_mut().into_iter().enumerate() {
        if name.starts_with("pose.") && !update_poses {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let lr = lrs.for_tensor(&name);
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        let g = grads[i].2;
        let m = &mut *first[i].1;
        let v = &mut *second[i].1;
        for j in 0..p.len() {
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * g[j];
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + adam.epsilon);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub psnr_frames: Option<f64>,
}

impl IterationLog {
    pub const HEADER: &'static str = "iter loss mse tv psnr_frames";

    pub fn line(&self) -> String {
        let psnr = self
            .psnr_frames
            .map_or_else(|| "-".to_string(), |p| format!("{p:.6}"));
        format!(
            "{} {:.9e} {:.9e} {:.9e} {}",
            self.iteration, self.loss.total, self.loss.mse, self.loss.tv, psnr
        )
    }
}

/// Gradients of one batch: network parameters exactly, poses if requested.
pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub grads: GradientBundle,
    pub poses_updated: bool,
}

/// Loss and gradients of one iteration's batch.
pub fn batch_gradients(
    model: &RayFormer,
    problem: &Problem,
    config: &TrainConfig,
    loss: &LossConfig,
    plan: &BatchPlan,
    with_poses: bool,
) -> Result<BatchGradients> {
    let params = &model.params;
    let poses = frame_poses(&params.pose_first, &params.pose_last, problem.n_frames())?;
    let frames = poses
        .par_iter()
        .enumerate()
        .map(|(f, pose)| forward_frame(model, problem, config, plan, f, pose, true))
        .collect::<Result<Vec<_>>>()?;
    let renders: Vec<Vec<[f64; 3]>> = frames.iter().map(FrameForward::rgb).collect();
    let (breakdown, upstream) = batch_loss(&renders, problem, plan, loss, true)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite batch loss (measurement {}, tv {})",
            breakdown.measurement, breakdown.tv
        )));
    }
    let l = config.l_samples;
    let per_frame = frames
        .par_iter()
        .zip(&upstream)
        .map(|(frame, up)| {
            let n = frame.output.sigma.len();
            let mut d_sigma = vec![0.0; n];
            let mut d_color = vec![[0.0; 3]; n];
            for (r, comp) in frame.composites.iter().enumerate() {
                let span = r * l..(r + 1) * l;
                let (ds, dc) = composite_backward(
                    &frame.output.sigma[span.clone()],
                    &frame.output.color[span.clone()],
                    &frame.deltas[span.clone()],
                    comp,
                    up[r],
                );
                d_sigma[span.clone()].copy_from_slice(&ds);
                d_color[span].copy_from_slice(&dc);
            }
            let mut g = params.zeros_like();
            let cache = frame.cache.as_ref().expect("training forward keeps caches");
            backward(
                params,
                &model.config,
                &frame.input,
                cache,
                &d_sigma,
                &d_color,
                &mut g,
            );
            g
        })
        .collect::<Vec<_>>();
    let mut grads = params.zeros_like();
    for g in &per_frame {
        for ((_, dst), (_, _, src)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    if with_poses {
        let (gf, gl) = pose_gradients(
            |a, b| {
                loss_at_poses(
                    model,
                    problem,
                    config,
                    loss,
                    plan,
                    a,
                    b,
                    Some((&poses, &renders)),
                )
            },
            &params.pose_first,
            &params.pose_last,
            config.pose_step,
        )?;
        grads.pose_first = gf;
        grads.pose_last = gl;
    }
    Ok(BatchGradients {
        loss: breakdown,
        grads,
        poses_updated: with_poses,
    })
}

/// Renders all `N` frames at the model's current poses with non-overlapping windows.
pub fn render_reconstruction(
    model: &RayFormer,
    intrinsics: &CameraIntrinsics,
    n_frames: usize,
    near_far: (f64, f64),
    l_samples: usize,
    window: [usize; 2],
) -> Result<FrameStack> {
    let poses = frame_poses(&model.params.pose_first, &model.params.pose_last, n_frames)?;
    let tiling = tile_patches_inference(
        (intrinsics.height, intrinsics.width),
        (window[0], window[1]),
    );
    let mut settings = RenderSettings::new(near_far, l_samples);
    settings.tiles_per_call = 4;
    let frames = poses
        .par_iter()
        .map(|pose| render_frame(model, pose, intrinsics, &tiling, &settings))
        .collect::<Result<Vec<_>>>()?;
    FrameStack::new(
        n_frames,
        intrinsics.height,
        intrinsics.width,
        3,
        frames.into_iter().flatten().collect(),
    )
}

/// PSNR between the captured measurement and the re-encoded reconstruction,
/// both divided by the number of frames so that values lie in `[0, 1]`.
pub fn measurement_psnr(
    recon: &FrameStack,
    masks: &MaskStack,
    measurement: &Measurement,
) -> Result<f64> {
    let synth = compress(recon, masks, 0.0, 0)?;
    let n = masks.n_frames as f64;
    let a: Vec<f64> = measurement.values.iter().map(|v| v / n).collect();
    let b: Vec<f64> = synth.values.iter().map(|v| v / n).collect();
    psnr(&a, &b)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: RayFormer,
    pub log: Vec<IterationLog>,
    pub reconstruction: FrameStack,
    pub measurement_psnr: f64,
    pub frame_psnr: Option<f64>,
}

/// Where a run writes its log, checkpoints and failure dumps.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train.log")
    }

    pub fn checkpoint_path(&self, iteration: Option<usize>) -> PathBuf {
        match iteration {
            Some(i) => self
                .dir
                .join("checkpoints")
                .join(format!("iter_{i:06}.raya")),
            None => self.dir.join("checkpoint.raya"),
        }
    }
}

/// Checkpoint entries: every parameter tensor plus the iteration count.
pub fn checkpoint_entries(params: &NetworkParams, iteration: usize) -> Vec<ArchiveEntry> {
    let mut entries = params.to_archive();
    entries.push(ArchiveEntry {
        name: "meta.iteration".into(),
        dtype: DType::F64,
        tensor: Tensor {
            dims: vec![1],
            data: vec![iteration as f64],
        },
    });
    entries
}

fn write_checkpoint(path: &Path, params: &NetworkParams, iteration: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_archive(path, &checkpoint_entries(params, iteration))
}

fn nan_dump(
    out: Option<&RunOutput>,
    iteration: usize,
    plan: &BatchPlan,
    params: &NetworkParams,
    err: &Error,
) -> Error {
    let dump = serde_json::json!({
        "iteration": iteration,
        "error": err.to_string(),
        "pixels": plan.grid.pixels,
        "jitter_seeds": plan.jitter_seeds,
        "pose_first": params.pose_first,
        "pose_last": params.pose_last,
        "non_finite_parameters": params
            .tensors()
            .iter()
            .filter(|(_, _, d)| d.iter().any(|v| !v.is_finite()))
            .map(|(n, _, _)| n.clone())
            .collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&dump).unwrap_or_default();
    let location = match out {
        Some(o) => {
            let path = o.dir.join("nan_dump.json");
            match fs::write(&path, &text) {
                Ok(()) => format!("dump written to {}", path.display()),
                Err(e) => format!("dump could not be written ({e}): {text}"),
            }
        }
        None => text,
    };
    Error::Numeric(format!(
        "training aborted at iteration {iteration}: {err}; {location}"
    ))
}

/// Fits a fresh model to `problem`. Deterministic for a given seed and configuration.
pub fn train(
    network: &NetworkConfig,
    bounds: &SceneBounds,
    config: &TrainConfig,
    loss: &LossConfig,
    problem: &Problem,
    seed: u64,
    out: Option<&RunOutput>,
) -> Result<TrainReport> {
    config.validate()?;
    loss.validate()?;
    problem.validate()?;
    let mut model = RayFormer::new(*network, *bounds, derive_seed(seed, STREAM_INIT, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 1));
    if config.pose_init_scale > 0.0 {
        let normal = Normal::new(0.0, config.pose_init_scale)
            .map_err(|e| Error::Config(format!("pose perturbation: {e}")))?;
        for v in model
            .params
            .pose_first
            .iter_mut()
            .chain(model.params.pose_last.iter_mut())
        {
            *v = normal.sample(&mut rng);
        }
    }
    let mut state = AdamState::new(&model.params);
    let adam = config.adam();
    let n_frames = problem.n_frames();

    let mut log_file = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            let mut f = fs::File::create(o.log_path())?;
            writeln!(f, "{}", IterationLog::HEADER)?;
            Some(f)
        }
        None => None,
    };
    let evaluate = |model: &RayFormer| -> Result<(FrameStack, Option<f64>)> {
        let recon = render_reconstruction(
            model,
            &problem.intrinsics,
            n_frames,
            problem.near_far,
            config.l_samples,
            config.window,
        )?;
        let score = match &problem.ground_truth {
            Some(gt) => Some(mean_frame_psnr(&recon, gt)?),
            None => None,
        };
        Ok((recon, score))
    };

    let mut log = Vec::with_capacity(config.iterations);
    let mut last_eval: Option<(usize, FrameStack, Option<f64>)> = None;
    let mut held_pose_grads: Option<([f64; 6], [f64; 6])> = None;
    for iteration in 1..=config.iterations {
        let plan = plan_batch(config, problem, seed, iteration as u64)?;
        let with_poses = config.pose_every > 0 && (iteration - 1) % config.pose_every == 0;
        let mut result = batch_gradients(&model, problem, config, loss, &plan, with_poses)
            .map_err(|e| {
                if e.is_numeric() {
                    nan_dump(out, iteration, &plan, &model.params, &e)
                } else {
                    e
                }
            })?;
        if result.poses_updated {
            held_pose_grads = Some((result.grads.pose_first, result.grads.pose_last));
        } else if let Some((first, last)) = held_pose_grads {
            result.grads.pose_first = first;
            result.grads.pose_last = last;
        }
        let lrs = config.learning_rates(iteration);
        optimizer_step(
            &mut model.params,
            &result.grads,
            &mut state,
            &adam,
            &lrs,
            held_pose_grads.is_some(),
        );
        if !model.params.is_finite() {
            let err = Error::Numeric("parameters became non-finite".into());
            return Err(nan_dump(out, iteration, &plan, &model.params, &err));
        }
        let eval_now = iteration == config.iterations
            || (config.eval_every > 0 && iteration % config.eval_every == 0);
        let psnr_frames = if eval_now {
            let (recon, score) = evaluate(&model)?;
            last_eval = Some((iteration, recon, score));
            score
        } else {
            None
        };
        let entry = IterationLog {
            iteration,
            loss: result.loss,
            psnr_frames,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", entry.line())?;
        }
        log.push(entry);
        if let Some(o) = out {
            if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 {
                write_checkpoint(
                    &o.checkpoint_path(Some(iteration)),
                    &model.params,
                    iteration,
                )?;
            }
        }
    }
    if let Some(o) = out {
        write_checkpoint(&o.checkpoint_path(None), &model.params, config.iterations)?;
    }
    let (reconstruction, frame_psnr) = match last_eval {
        Some((i, recon, score)) if i == config.iterations => (recon, score),
        _ => evaluate(&model)?,
    };
    let measurement_psnr = measurement_psnr(&reconstruction, &problem.masks, &problem.measurement)?;
    Ok(TrainReport {
        model,
        log,
        reconstruction,
        measurement_psnr,
        frame_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{HashGridConfig, ShConfig};
    use crate::rayformer::I2rConfig;
    use crate::sci::{generate_masks, render_ground_truth, SceneSpec};
    use proptest::prelude::*;
    use rand::Rng;

    pub(super) fn tiny_network() -> NetworkConfig {
        NetworkConfig {
            hash: HashGridConfig {
                n_levels: 4,
                base_resolution: 4,
                per_level_scale: 1.5,
                features_per_level: 2,
                table_size_log2: 10,
            },
            sh: ShConfig { max_degree: 1 },
            network: I2rConfig {
                channels: 8,
                heads_per_path: 1,
                n_blocks: 1,
                geo_dim: 3,
                color_hidden: 8,
                ..Default::default()
            },
        }
    }

    pub(super) fn tiny_problem(n_frames: usize, size: usize, seed: u64) -> Problem {
        let intr = CameraIntrinsics::centered(size as f64, size, size).unwrap();
        let scene = SceneSpec::default();
        let gt = render_ground_truth(&scene, &intr, n_frames, 64, (0.5, 4.0)).unwrap();
        let masks = generate_masks(seed, n_frames, size, size, 0.5).unwrap();
        let measurement = compress(&gt, &masks, 0.0, 0).unwrap();
        Problem {
            measurement,
            masks,
            intrinsics: intr,
            near_far: (0.5, 4.0),
            ground_truth: Some(gt),
        }
    }

    pub(super) fn tiny_train() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            window: [4, 4],
            l_samples: 8,
            pose_every: 2,
            eval_every: 2,
            checkpoint_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn single_frame_synthesis_is_identity() {
        let render = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]];
        let out = synthesize_patch_measurement(&[render.clone()], &[vec![1.0, 1.0]]).unwrap();
        assert_eq!(out, render);
        let zero =
            synthesize_patch_measurement(&[render.clone(), render], &[vec![0.0; 2], vec![0.0; 2]])
                .unwrap();
        assert!(zero.iter().flatten().all(|&v| v == 0.0));
        assert!(synthesize_patch_measurement(&[vec![[0.0; 3]]], &[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn synthesis_matches_compress_on_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = FrameStack::new(2, 2, 2, 3, (0..24).map(|_| rng.random()).collect()).unwrap();
        let masks = generate_masks(5, 2, 2, 2, 0.5).unwrap();
        let full = compress(&frames, &masks, 0.0, 0).unwrap();
        let pixels = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        let renders: Vec<Vec<[f64; 3]>> = (0..2)
            .map(|f| {
                let x = frames.frame(f);
                (0..4)
                    .map(|p| [x[p * 3], x[p * 3 + 1], x[p * 3 + 2]])
                    .collect()
            })
            .collect();
        let out = synthesize_patch_measurement(&renders, &restrict_masks(&masks, &pixels)).unwrap();
        let flat: Vec<f64> = out.iter().flatten().copied().collect();
        assert_eq!(flat, full.values);
    }

    #[test]
    fn measurement_loss_examples() {
        let y = [0.2, 0.4, 0.6, 0.8];
        assert_eq!(measurement_loss(&y, &y, 1).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
        assert!((measurement_loss(&y, &shifted, 1).unwrap() - 4.0).abs() < 1e-12);
        assert!((measurement_loss(&y, &shifted, 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1), 6.0);
        assert_eq!(tv_loss(&[0.7; 12], 2, 2, 3), 0.0);
        assert_eq!(tv_loss(&[0.3], 1, 1, 1), 0.0);
    }

    #[test]
    fn tv_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patch: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.random()).collect();
        let mut grad = vec![0.0; patch.len()];
        tv_backward(&patch, 3, 4, 2, 1.0, &mut grad);
        let h = 1e-7;
        for k in 0..patch.len() {
            let (mut p, mut m) = (patch.clone(), patch.clone());
            p[k] += h;
            m[k] -= h;
            let fd = (tv_loss(&p, 3, 4, 2) - tv_loss(&m, 3, 4, 2)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn tv_nonnegative_and_transpose_invariant(v in prop::collection::vec(-1.0f64..1.0, 9)) {
            let t: Vec<f64> = (0..9).map(|i| v[(i % 3) * 3 + i / 3]).collect();
            prop_assert!(tv_loss(&v, 3, 3, 1) >= 0.0);
            prop_assert!((tv_loss(&v, 3, 3, 1) - tv_loss(&t, 3, 3, 1)).abs() < 1e-12);
        }

        #[test]
        fn measurement_loss_ignores_patch_order(v in prop::collection::vec(-1.0f64..1.0, 16), w in prop::collection::vec(-1.0f64..1.0, 16)) {
            let swap = |x: &[f64]| [&x[8..], &x[..8]].concat();
            let a = measurement_loss(&v, &w, 2).unwrap();
            let b = measurement_loss(&swap(&v), &swap(&w), 2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let config = tiny_network();
        let mut params = NetworkParams::init(&config, 1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        let lrs = LearningRates {
            hash: 1e-2,
            network: 1e-3,
            pose: 1e-4,
        };
        optimizer_step(
            &mut params,
            &grads,
            &mut state,
            &AdamConfig::default(),
            &lrs,
            true,
        );
        assert_eq!(params, before);
        for (_, g) in grads.tensors_mut() {
            g.fill(1.0);
        }
        let mut state = AdamState::new(&params);
        optimizer_step(
            &mut params,
            &grads,
            &mut state,
            &AdamConfig::default(),
            &lrs,
            false,
        );
        optimizer_step(
            &mut params,
            &grads.zeros_like(),
            &mut state,
            &AdamConfig::default(),
            &lrs,
            false,
        );
        let mut once = before.clone();
        optimizer_step(
            &mut once,
            &grads,
            &mut AdamState::new(&before),
            &AdamConfig::default(),
            &lrs,
            false,
        );
        let params_two = params.clone();
        let params = once;
        let moved = |a: &NetworkParams, b: &NetworkParams, name: &str| -> f64 {
            let ta = a.tensors();
            let tb = b.tensors();
            let i = ta.iter().position(|(n, _, _)| n == name).unwrap();
            ta[i].2[0] - tb[i].2[0]
        };
        assert!((moved(&before, &params, "hash.tables") - 1e-2).abs() < 1e-9);
        assert!((moved(&before, &params, "input.weight") - 1e-3).abs() < 1e-9);
        assert_eq!(params.pose_first, before.pose_first);
        assert_ne!(params_two, params);
        assert_eq!(state.steps[0], 2);
        assert_eq!(*state.steps.last().unwrap(), 0);
    }

    #[test]
    fn pose_gradient_of_quadratic() {
        let target = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        let loss = |a: &[f64; 6], b: &[f64; 6]| -> Result<f64> {
            Ok((0..6)
                .map(|k| (a[k] - target[k]).powi(2) + 2.0 * b[k] * b[k])
                .sum())
        };
        let (gf, gl) = pose_gradients(loss, &[0.0; 6], &[0.5; 6], 1e-4).unwrap();
        for k in 0..6 {
            assert!((gf[k] + 2.0 * target[k]).abs() < 1e-8);
            assert!((gl[k] - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
    }

    #[test]
    fn network_gradients_of_batch_loss_match_differences() {
        let network = tiny_network();
        let problem = tiny_problem(2, 8, 3);
        let config = TrainConfig {
            batch_windows: 2,
            window: [2, 2],
            l_samples: 6,
            ..tiny_train()
        };
        let loss = LossConfig { lambda_tv: 0.05 };
        let mut model = RayFormer::new(network, SceneBounds::default(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, t) in model.params.tensors_mut() {
            let scale = if name == "hash.tables" { 0.5 } else { 0.1 };
            t.iter_mut()
                .for_each(|v| *v += rng.random_range(-scale..scale));
        }
        model.params.density.bias[0] = 1.0;
        let plan = plan_batch(&config, &problem, 5, 1).unwrap();
        let result = batch_gradients(&model, &problem, &config, &loss, &plan, false).unwrap();
        let eval = |m: &RayFormer| {
            loss_at_poses(
                m,
                &problem,
                &config,
                &loss,
                &plan,
                &m.params.pose_first,
                &m.params.pose_last,
                None,
            )
            .unwrap()
        };
        assert!((eval(&model) - result.loss.total).abs() < 1e-12);
        let grads: Vec<Vec<f64>> = result
            .grads
            .tensors()
            .iter()
            .map(|(_, _, d)| d.to_vec())
            .collect();
        let h = 1e-6;
        let names: Vec<String> = model
            .params
            .tensors()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        for (ti, name) in names.iter().enumerate() {
            if name.starts_with("pose.") {
                continue;
            }
            let len = grads[ti].len();
            let picks: Vec<usize> = if name == "hash.tables" {
                // only entries touched by the batch carry signal
                (0..len).filter(|&k| grads[ti][k] != 0.0).take(6).collect()
            } else {
                (0..4).map(|_| rng.random_range(0..len)).collect()
            };
            assert!(!picks.is_empty(), "{name} received no gradient");
            for k in picks {
                let mut m = model.clone();
                m.params.tensors_mut()[ti].1[k] += h;
                let lp = eval(&m);
                m.params.tensors_mut()[ti].1[k] -= 2.0 * h;
                let lm = eval(&m);
                let fd = (lp - lm) / (2.0 * h);
                let g = grads[ti][k];
                assert!(
                    (fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()) + 1e-9,
                    "{name}[{k}]: finite difference {fd}, analytic {g}"
                );
            }
        }
    }

    #[test]
    fn pose_differences_converge_quadratically() {
        let problem = tiny_problem(3, 8, 2);
        let config = TrainConfig {
            window: [4, 4],
            l_samples: 16,
            stratified: false,
            ..tiny_train()
        };
        let loss = LossConfig { lambda_tv: 0.0 };
        let mut scene = SceneSpec::default();
        scene.blobs.iter_mut().for_each(|b| b.center[0] += 0.05);
        let first = [0.0; 6];
        let last = [0.01, 0.02, -0.01, 0.05, 0.0, 0.02];
        let plan = plan_batch(&config, &problem, 1, 1).unwrap();
        let f = |a: &[f64; 6], b: &[f64; 6]| {
            loss_at_poses(&scene, &problem, &config, &loss, &plan, a, b, None)
        };
        let at = |h: f64| pose_gradients(f, &first, &last, h).unwrap();
        let (g1, g2, g4) = (at(4e-3), at(2e-3), at(1e-3));
        let mut checked = 0;
        for k in 0..6 {
            for (a, b, c) in [(g1.0[k], g2.0[k], g4.0[k]), (g1.1[k], g2.1[k], g4.1[k])] {
                let coarse = (a - b).abs();
                let fine = (b - c).abs();
                if coarse > 1e-9 {
                    let ratio = coarse / fine;
                    assert!((3.0..5.0).contains(&ratio), "component {k}: ratio {ratio}");
                    checked += 1;
                }
            }
        }
        assert!(checked >= 6);
    }

    #[test]
    fn zero_iterations_keep_initialization_and_runs_repeat() {
        let network = tiny_network();
        let problem = tiny_problem(2, 8, 1);
        let zero = TrainConfig {
            iterations: 0,
            ..tiny_train()
        };
        let report = train(
            &network,
            &SceneBounds::default(),
            &zero,
            &LossConfig::default(),
            &problem,
            7,
            None,
        )
        .unwrap();
        assert!(report.log.is_empty());
        let mut init = RayFormer::new(
            network,
            SceneBounds::default(),
            derive_seed(7, STREAM_INIT, 0),
        )
        .unwrap();
        init.params.pose_first = report.model.params.pose_first;
        init.params.pose_last = report.model.params.pose_last;
        assert_eq!(init.params, report.model.params);

        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let out = RunOutput {
                dir: dir.path().join(sub),
            };
            let r = train(
                &network,
                &SceneBounds::default(),
                &tiny_train(),
                &LossConfig::default(),
                &problem,
                7,
                Some(&out),
            )
            .unwrap();
            (r, out)
        };
        let (a, out_a) = run("a");
        let (b, out_b) = run("b");
        assert_eq!(a.model.params, b.model.params);
        assert!(a.log[0].loss.total > 0.0);
        assert_eq!(a.log.len(), 3);
        assert!(a.log[1].psnr_frames.is_some() && a.log[0].psnr_frames.is_none());
        let read = |p: PathBuf| fs::read(p).unwrap();
        assert_eq!(read(out_a.log_path()), read(out_b.log_path()));
        assert_eq!(
            read(out_a.checkpoint_path(None)),
            read(out_b.checkpoint_path(None))
        );
        assert!(out_a.checkpoint_path(Some(2)).exists());
        let text = String::from_utf8(read(out_a.log_path())).unwrap();
        assert_eq!(text.lines().next().unwrap(), IterationLog::HEADER);
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn single_open_frame_fits_constant_scene() {
        let size = 8;
        let intr = CameraIntrinsics::centered(size as f64, size, size).unwrap();
        let color = [0.2, 0.5, 0.8];
        let values: Vec<f64> = (0..size * size).flat_map(|_| color).collect();
        let frame = FrameStack::new(1, size, size, 3, values).unwrap();
        let masks = MaskStack::ones(1, size, size);
        let measurement = compress(&frame, &masks, 0.0, 0).unwrap();
        let problem = Problem {
            measurement,
            masks,
            intrinsics: intr,
            near_far: (0.5, 4.0),
            ground_truth: Some(frame),
        };
        let config = TrainConfig {
            iterations: 500,
            window: [4, 4],
            l_samples: 8,
            pose_every: 0,
            eval_every: 0,
            checkpoint_every: 0,
            ..Default::default()
        };
        let loss = LossConfig { lambda_tv: 0.0 };
        let report = train(
            &tiny_network(),
            &SceneBounds::default(),
            &config,
            &loss,
            &problem,
            3,
            None,
        )
        .unwrap();
        let last = report.log.last().unwrap().loss.total;
        assert!(last < 1e-3, "final loss {last}");
    }

    #[test]
    fn non_finite_parameters_abort_with_dump() {
        let network = tiny_network();
        let problem = tiny_problem(2, 8, 1);
        let config = tiny_train();
        let mut model = RayFormer::new(network, SceneBounds::default(), 1).unwrap();
        model.params.input.bias[0] = f64::NAN;
        let plan = plan_batch(&config, &problem, 1, 1).unwrap();
        let err = batch_gradients(
            &model,
            &problem,
            &config,
            &LossConfig::default(),
            &plan,
            false,
        )
        .err()
        .expect("NaN parameters must fail");
        assert!(err.is_numeric());
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput {
            dir: dir.path().to_path_buf(),
        };
        let wrapped = nan_dump(Some(&out), 1, &plan, &model.params, &err);
        assert!(matches!(wrapped, Error::Numeric(_)));
        let dump = fs::read_to_string(dir.path().join("nan_dump.json")).unwrap();
        assert!(dump.contains("input.bias"));
    }
}
