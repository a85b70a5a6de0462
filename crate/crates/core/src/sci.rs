//! Video snapshot compressive imaging acquisition: coded masks, the
//! single-exposure measurement and the procedural blob scene used as ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{
    interpolate_pose, tile_patches_inference, CameraIntrinsics, PatchBatch, Pose,
};
use crate::renderer::{render_frame, RadianceField, RenderSettings};

/// Per-frame modulation patterns, shape `(n_frames, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl MaskStack {
    pub fn new(n_frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_frames * height * width {
            return Err(Error::Dimension(format!(
                "mask stack {n_frames}x{height}x{width} needs {} values, got {}",
                n_frames * height * width,
                values.len()
            )));
        }
        Ok(MaskStack {
            n_frames,
            height,
            width,
            values,
        })
    }

    pub fn ones(n_frames: usize, height: usize, width: usize) -> Self {
        MaskStack {
            n_frames,
            height,
            width,
            values: vec![1.0; n_frames * height * width],
        }
    }

    #[inline]
    pub fn get(&self, frame: usize, row: usize, col: usize) -> f64 {
        self.values[(frame * self.height + row) * self.width + col]
    }

    /// Smallest per-pixel sum over frames.
    pub fn min_coverage(&self) -> f64 {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                (0..self.n_frames)
                    .map(|f| self.values[f * hw + p])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.n_frames, self.height, self.width],
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[n, h, w] => MaskStack::new(n, h, w, t.data),
            dims => Err(Error::Dimension(format!(
                "mask tensor must be rank 3, got {dims:?}"
            ))),
        }
    }
}

/// Latent frames, shape `(n_frames, height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FrameStack {
    pub fn new(
        n_frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != n_frames * height * width * channels {
            return Err(Error::Dimension(format!(
                "frame stack {n_frames}x{height}x{width}x{channels} needs {} values, got {}",
                n_frames * height * width * channels,
                values.len()
            )));
        }
        Ok(FrameStack {
            n_frames,
            height,
            width,
            channels,
            values,
        })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.height * self.width * self.channels;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.n_frames, self.height, self.width, self.channels],
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[n, h, w, c] => FrameStack::new(n, h, w, c, t.data),
            dims => Err(Error::Dimension(format!(
                "frame tensor must be rank 4, got {dims:?}"
            ))),
        }
    }
}

/// Single coded snapshot, shape `(height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub noise_sigma: f64,
}

impl Measurement {
    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + ch]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height, self.width, self.channels],
            data: self.values.clone(),
        }
    }

    pub fn from_tensor(t: Tensor, noise_sigma: f64) -> Result<Self> {
        match t.dims.as_slice() {
            &[h, w, c] => Ok(Measurement {
                height: h,
                width: w,
                channels: c,
                values: t.data,
                noise_sigma,
            }),
            dims => Err(Error::Dimension(format!(
                "measurement tensor must be rank 3, got {dims:?}"
            ))),
        }
    }
}

/// Bernoulli(`density`) binary masks; pixels never exposed by any frame get
/// one randomly chosen frame switched on.
pub fn generate_masks(
    seed: u64,
    n_frames: usize,
    height: usize,
    width: usize,
    density: f64,
) -> Result<MaskStack> {
    if n_frames == 0 || height == 0 || width == 0 {
        return Err(Error::Config("mask dimensions must be non-zero".into()));
    }
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::Config(format!(
            "mask density must be in (0, 1), got {density}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = height * width;
    let mut values: Vec<f64> = (0..n_frames * hw)
        .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
        .collect();
    for p in 0..hw {
        if (0..n_frames).all(|f| values[f * hw + p] == 0.0) {
            let f = rng.random_range(0..n_frames);
            values[f * hw + p] = 1.0;
        }
    }
    MaskStack::new(n_frames, height, width, values)
}

/// `Y = sum_i X_i * M_i + Z`, with Gaussian `Z` drawn from `seed` in row-major order.
pub fn compress(
    frames: &FrameStack,
    masks: &MaskStack,
    noise_sigma: f64,
    seed: u64,
) -> Result<Measurement> {
    if frames.n_frames != masks.n_frames
        || frames.height != masks.height
        || frames.width != masks.width
    {
        return Err(Error::Dimension(format!(
            "frames {}x{}x{} vs masks {}x{}x{}",
            frames.n_frames, frames.height, frames.width, masks.n_frames, masks.height, masks.width
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let (h, w, c) = (frames.height, frames.width, frames.channels);
    let plane = h * w * c;
    let mut values = vec![0.0; plane];
    for f in 0..frames.n_frames {
        let x = frames.frame(f);
        let m = &masks.values[f * h * w..(f + 1) * h * w];
        for (p, &mv) in m.iter().enumerate() {
            for ch in 0..c {
                values[p * c + ch] += x[p * c + ch] * mv;
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sigma * z;
        }
    }
    Ok(Measurement {
        height: h,
        width: w,
        channels: c,
        values,
        noise_sigma,
    })
}

/// One isotropic Gaussian density blob with a constant color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub peak_density: f64,
    pub rgb: [f64; 3],
}

/// Camera motion during the exposure as `[omega; rho]` tangent vectors of
/// the first and last frame poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub start: [f64; 6],
    pub end: [f64; 6],
}

impl Trajectory {
    pub fn poses(&self) -> (Pose, Pose) {
        let exp = |v: &[f64; 6]| crate::geometry::se3_exp(&nalgebra::Vector6::from_column_slice(v));
        (exp(&self.start), exp(&self.end))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub blobs: Vec<Blob>,
    pub background_rgb: [f64; 3],
    pub trajectory: Trajectory,
}

impl Default for SceneSpec {
    /// Five overlapping blobs between depth 1.8 and 3.2 in front of a camera
    /// drifting sideways by 0.08 units with a slight yaw.
    fn default() -> Self {
        let blob = |center: [f64; 3], radius: f64, peak_density: f64, rgb: [f64; 3]| Blob {
            center,
            radius,
            peak_density,
            rgb,
        };
        SceneSpec {
            blobs: vec![
                blob([-0.35, -0.25, 2.6], 0.32, 12.0, [0.9, 0.25, 0.15]),
                blob([0.4, -0.1, 2.2], 0.26, 15.0, [0.2, 0.75, 0.3]),
                blob([0.05, 0.35, 2.9], 0.4, 8.0, [0.2, 0.35, 0.9]),
                blob([0.55, 0.45, 1.9], 0.16, 25.0, [0.95, 0.85, 0.2]),
                blob([-0.6, 0.5, 3.2], 0.3, 10.0, [0.8, 0.8, 0.85]),
            ],
            background_rgb: [0.0; 3],
            trajectory: Trajectory {
                start: [0.0; 6],
                end: [0.0, 0.02, 0.0, 0.08, 0.0, 0.0],
            },
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() {
            return Err(Error::Config("scene needs at least one blob".into()));
        }
        for (k, b) in self.blobs.iter().enumerate() {
            if !(b.radius > 0.0) || !(b.peak_density >= 0.0) {
                return Err(Error::Config(format!(
                    "blob {k}: radius must be > 0 and peak density >= 0"
                )));
            }
        }
        Ok(())
    }

    /// Density and density-weighted color at a world point.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut rgb = [0.0; 3];
        for b in &self.blobs {
            let d2 = (p - Vector3::from(b.center)).norm_squared();
            let s = b.peak_density * (-d2 / (2.0 * b.radius * b.radius)).exp();
            sigma += s;
            for c in 0..3 {
                rgb[c] += s * b.rgb[c];
            }
        }
        if sigma > 0.0 {
            rgb.iter_mut().for_each(|v| *v /= sigma);
        }
        (sigma, rgb)
    }
}

impl RadianceField for SceneSpec {
    fn evaluate(&self, batch: &PatchBatch) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        Ok(batch.positions.iter().map(|p| self.query(p)).unzip())
    }
}

/// Renders `n_frames` oracle frames along the scene trajectory with
/// `oversample` midpoint samples per ray, clamped to `[0, 1]`.
pub fn render_ground_truth(
    scene: &SceneSpec,
    intr: &CameraIntrinsics,
    n_frames: usize,
    oversample: usize,
    near_far: (f64, f64),
) -> Result<FrameStack> {
    if n_frames == 0 || oversample == 0 {
        return Err(Error::Config("n_frames and oversample must be >= 1".into()));
    }
    let (first, last) = scene.trajectory.poses();
    if !first.is_valid(1e-9) || !last.is_valid(1e-9) {
        return Err(Error::Geometry(
            "trajectory endpoint is not a rigid pose".into(),
        ));
    }
    let tiling = tile_patches_inference((intr.height, intr.width), (8, 8));
    let mut settings = RenderSettings::new(near_far, oversample);
    settings.background = scene.background_rgb;
    let mut values = Vec::with_capacity(n_frames * intr.height * intr.width * 3);
    for i in 1..=n_frames {
        let pose = interpolate_pose(&first, &last, i, n_frames)?;
        let frame = render_frame(scene, &pose, intr, &tiling, &settings)?;
        values.extend(frame.into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    FrameStack::new(n_frames, intr.height, intr.width, 3, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(frames: &FrameStack, masks: &MaskStack) -> Vec<f64> {
        let (n, h, w, c) = (
            frames.n_frames,
            frames.height,
            frames.width,
            frames.channels,
        );
        let mut y = vec![0.0; h * w * c];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for f in 0..n {
                        acc += frames.values[((f * h + row) * w + col) * c + ch]
                            * masks.values[(f * h + row) * w + col];
                    }
                    y[(row * w + col) * c + ch] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn single_frame_masks_cover_everything() {
        let m = generate_masks(0, 1, 2, 2, 0.3).unwrap();
        assert_eq!(m.values, vec![1.0; 4]);
    }

    #[test]
    fn masks_are_deterministic_binary_and_balanced() {
        let a = generate_masks(7, 4, 8, 8, 0.5).unwrap();
        let b = generate_masks(7, 4, 8, 8, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.min_coverage() >= 1.0);
        let mean = a.values.iter().sum::<f64>() / a.values.len() as f64;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn mask_config_errors() {
        assert!(matches!(
            generate_masks(0, 4, 8, 8, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_masks(0, 4, 8, 8, 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_masks(0, 0, 8, 8, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compress_worked_example() {
        let frames =
            FrameStack::new(2, 2, 2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let masks = MaskStack::new(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = compress(&frames, &masks, 0.0, 0).unwrap();
        assert_eq!(y.values, vec![1.0, 6.0, 10.0, 8.0]);
    }

    #[test]
    fn compress_special_cases() {
        let frames =
            FrameStack::new(3, 2, 3, 3, (0..54).map(|v| v as f64 / 54.0).collect()).unwrap();
        let zero = MaskStack::new(3, 2, 3, vec![0.0; 18]).unwrap();
        assert!(compress(&frames, &zero, 0.0, 0)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 0.0));

        let single = FrameStack::new(1, 2, 3, 3, frames.frame(0).to_vec()).unwrap();
        let y = compress(&single, &MaskStack::ones(1, 2, 3), 0.0, 0).unwrap();
        assert_eq!(y.values, single.values);

        let bad = MaskStack::ones(2, 2, 3);
        assert!(matches!(
            compress(&frames, &bad, 0.0, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn noise_has_requested_spread() {
        let frames = FrameStack::new(2, 64, 64, 3, vec![0.5; 2 * 64 * 64 * 3]).unwrap();
        let masks = generate_masks(1, 2, 64, 64, 0.5).unwrap();
        let clean = compress(&frames, &masks, 0.0, 3).unwrap();
        let noisy = compress(&frames, &masks, 0.01, 3).unwrap();
        let diffs: Vec<f64> = noisy
            .values
            .iter()
            .zip(&clean.values)
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let std =
            (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((std - 0.01).abs() < 5e-4, "std {std}");
        assert_eq!(noisy, compress(&frames, &masks, 0.01, 3).unwrap());
    }

    fn stack_strategy() -> impl Strategy<Value = (FrameStack, MaskStack)> {
        (1usize..=4, 1usize..=8, 1usize..=8, 1usize..=3).prop_flat_map(|(n, h, w, c)| {
            (
                prop::collection::vec(0.0f64..1.0, n * h * w * c),
                prop::collection::vec(prop::bool::ANY, n * h * w),
            )
                .prop_map(move |(x, m)| {
                    (
                        FrameStack::new(n, h, w, c, x).unwrap(),
                        MaskStack::new(n, h, w, m.into_iter().map(|b| b as u8 as f64).collect())
                            .unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn compress_equals_brute_force((frames, masks) in stack_strategy()) {
            let y = compress(&frames, &masks, 0.0, 0).unwrap();
            prop_assert_eq!(y.values, brute_force(&frames, &masks));
        }

        #[test]
        fn compress_is_linear((x, masks) in stack_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x2 = FrameStack { values: x.values.iter().map(|_| rand::Rng::random::<f64>(&mut rng)).collect(), ..x.clone() };
            let mix = FrameStack {
                values: x.values.iter().zip(&x2.values).map(|(u, v)| a * u + b * v).collect(),
                ..x.clone()
            };
            let lhs = compress(&mix, &masks, 0.0, 0).unwrap();
            let y1 = compress(&x, &masks, 0.0, 0).unwrap();
            let y2 = compress(&x2, &masks, 0.0, 0).unwrap();
            for (k, v) in lhs.values.iter().enumerate() {
                prop_assert!((v - (a * y1.values[k] + b * y2.values[k])).abs() < 1e-12);
            }
        }

        #[test]
        fn coverage_holds_for_any_seed(seed in 0u64..10_000, n in 1usize..6, density in 0.05f64..0.95) {
            let m = generate_masks(seed, n, 6, 5, density).unwrap();
            prop_assert!(m.min_coverage() >= 1.0);
        }
    }

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::centered(16.0, 12, 12).unwrap()
    }

    #[test]
    fn black_scene_renders_black() {
        let scene = SceneSpec {
            blobs: vec![],
            background_rgb: [0.0; 3],
            trajectory: SceneSpec::default().trajectory,
        };
        let frames = render_ground_truth(&scene, &small_intrinsics(), 3, 16, (0.5, 4.0)).unwrap();
        assert!(frames.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transparent_blob_shows_background() {
        let scene = SceneSpec {
            blobs: vec![Blob {
                center: [0.0, 0.0, 2.0],
                radius: 0.5,
                peak_density: 0.0,
                rgb: [1.0, 0.0, 0.0],
            }],
            background_rgb: [0.2, 0.4, 0.6],
            trajectory: SceneSpec::default().trajectory,
        };
        let frames = render_ground_truth(&scene, &small_intrinsics(), 2, 16, (0.5, 4.0)).unwrap();
        for px in frames.values.chunks(3) {
            assert_eq!(px, &[0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn default_scene_has_content_and_motion() {
        let scene = SceneSpec::default();
        scene.validate().unwrap();
        let intr = CameraIntrinsics::centered(32.0, 32, 32).unwrap();
        let frames = render_ground_truth(&scene, &intr, 4, 128, (0.5, 4.0)).unwrap();
        assert!(frames.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = frames.values.iter().sum::<f64>() / frames.values.len() as f64;
        assert!(mean > 0.05 && mean < 0.8, "mean {mean}");
        let diff: f64 = frames
            .frame(0)
            .iter()
            .zip(frames.frame(3))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1.0, "first and last frames should differ");
    }
}
