//! Rigid poses, camera rays and patch-level ray sampling.
//!
//! Tangent vectors on SE(3) are ordered `[omega; rho]`: the first three
//! components are the rotation (axis-angle), the last three the translation
//! part before the left Jacobian is applied.
//!
//! Camera convention: x right, y down, z forward. A pose maps camera
//! coordinates to world coordinates, so its translation is the camera center.

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rotation angles at or beyond `PI - BRANCH_MARGIN` are rejected by the log map.
pub const BRANCH_MARGIN: f64 = 1e-6;

/// Tolerance on `R^T R - I` before a composed rotation is projected back onto SO(3).
pub const ORTHONORMAL_TOL: f64 = 1e-9;

const SMALL_ANGLE: f64 = 1e-5;

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Matrix3::identity(), t)
    }

    /// Largest absolute entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// True when the rotation is orthonormal with determinant +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Projects the rotation onto SO(3) (polar decomposition via SVD).
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose::new(r, self.translation)
    }

    /// `self * other`, re-projected when rotation drift exceeds [`ORTHONORMAL_TOL`].
    pub fn compose(&self, other: &Pose) -> Pose {
        let out = Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        );
        if out.orthonormality_error() > ORTHONORMAL_TOL {
            out.orthonormalized()
        } else {
            out
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.translation[r];
        }
        out
    }

    pub fn from_array(a: &[f64; 12]) -> Pose {
        Pose::new(
            Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            Vector3::new(a[9], a[10], a[11]),
        )
    }
}

/// Rodrigues rotation together with the SE(3) left Jacobian `V`.
fn so3_exp_with_jacobian(w: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let k2 = k * k;
    let (a, b, c) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0,
            0.5 - theta2 / 24.0,
            1.0 / 6.0 - theta2 / 120.0,
        )
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let r = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    (r, v)
}

/// Exponential map from a `[omega; rho]` tangent vector to a pose.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let rho = Vector3::new(xi[3], xi[4], xi[5]);
    let (r, v) = so3_exp_with_jacobian(&w);
    Pose::new(r, v * rho)
}

/// Logarithm map on the principal branch (rotation angle below pi).
pub fn se3_log(pose: &Pose) -> Result<Vector6<f64>> {
    let r = &pose.rotation;
    let axis2 = vee(&(r - r.transpose()));
    let sin_theta = 0.5 * axis2.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if theta >= std::f64::consts::PI - BRANCH_MARGIN {
        return Err(Error::Branch { angle: theta });
    }
    let theta2 = theta * theta;
    let w = if theta < SMALL_ANGLE {
        axis2 * (0.5 * (1.0 + theta2 / 6.0))
    } else {
        axis2 * (0.5 * theta / theta.sin())
    };
    let k = hat(&w);
    let coeff = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let v_inv = Matrix3::identity() - k * 0.5 + (k * k) * coeff;
    let rho = v_inv * pose.translation;
    Ok(Vector6::new(w.x, w.y, w.z, rho.x, rho.y, rho.z))
}

/// Pose of frame `i` (1-based) of `n` on the geodesic from `first` to `last`.
///
/// Uses the fraction `(i - 1) / (n - 1)`, so `i = 1` yields `first` and `i = n`
/// yields `last` exactly. With `n = 1` the only frame sits at `first`.
pub fn interpolate_pose(first: &Pose, last: &Pose, i: usize, n: usize) -> Result<Pose> {
    if n == 0 || i == 0 || i > n {
        return Err(Error::Index(format!("frame {i} outside 1..={n}")));
    }
    let delta = se3_log(&first.inverse().compose(last))?;
    if i == 1 {
        return Ok(*first);
    }
    if i == n {
        return Ok(*last);
    }
    let alpha = (i - 1) as f64 / (n - 1) as f64;
    Ok(first.compose(&se3_exp(&(delta * alpha))))
}

/// Pinhole camera with a single focal length and pixel-center sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let intr = CameraIntrinsics {
            focal,
            cx,
            cy,
            height,
            width,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Principal point at the image center.
    pub fn centered(focal: f64, height: usize, width: usize) -> Result<Self> {
        Self::new(
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            height,
            width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::Config(format!(
                "focal must be > 0, got {}",
                self.focal
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be non-zero".into()));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.height, self.width
            )));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction through the center of pixel `(row, col)`.
    pub fn camera_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            (col as f64 + 0.5 - self.cx) / self.focal,
            (row as f64 + 0.5 - self.cy) / self.focal,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Back-projects pixels through a posed pinhole camera.
pub fn generate_rays(
    pose: &Pose,
    intr: &CameraIntrinsics,
    pixels: &[(usize, usize)],
    t_near: f64,
    t_far: f64,
) -> Result<Vec<Ray>> {
    if !(t_near < t_far) {
        return Err(Error::Config(format!(
            "t_near ({t_near}) must be below t_far ({t_far})"
        )));
    }
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= intr.height || col >= intr.width {
                return Err(Error::Index(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    intr.height, intr.width
                )));
            }
            let d = pose.rotation * intr.camera_direction(row, col);
            Ok(Ray {
                origin: pose.translation,
                direction: d.normalize(),
                t_near,
                t_far,
            })
        })
        .collect()
}

/// Pixel layout of a batch of windows, in canonical `[window][pixel]` order.
///
/// `owned[k]` marks whether pixel `k` writes to the output image; training
/// windows own every pixel, inference tiles clamped against the border only
/// own pixels not already covered earlier in scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub window_h: usize,
    pub window_w: usize,
    pub pixels: Vec<(usize, usize)>,
    pub owned: Vec<bool>,
}

impl PatchGrid {
    pub fn pixels_per_window(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn n_windows(&self) -> usize {
        self.pixels.len() / self.pixels_per_window()
    }

    pub fn window_pixels(&self, w: usize) -> &[(usize, usize)] {
        let p = self.pixels_per_window();
        &self.pixels[w * p..(w + 1) * p]
    }

    /// Top-left corner of every window (for contiguous windows).
    pub fn corners(&self) -> Vec<(usize, usize)> {
        (0..self.n_windows())
            .map(|w| self.window_pixels(w)[0])
            .collect()
    }

    fn from_corners(corners: &[(usize, usize)], wh: usize, ww: usize) -> PatchGrid {
        let mut pixels = Vec::with_capacity(corners.len() * wh * ww);
        for &(top, left) in corners {
            for r in 0..wh {
                for c in 0..ww {
                    pixels.push((top + r, left + c));
                }
            }
        }
        let owned = vec![true; pixels.len()];
        PatchGrid {
            window_h: wh,
            window_w: ww,
            pixels,
            owned,
        }
    }
}

/// Draws `count` windows with uniformly random top-left corners; overlap is allowed.
pub fn sample_patches_train(
    seed: u64,
    image: (usize, usize),
    window: (usize, usize),
    count: usize,
) -> Result<PatchGrid> {
    let (h, w) = image;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || wh > h || ww > w {
        return Err(Error::Config(format!(
            "window {wh}x{ww} does not fit image {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners: Vec<_> = (0..count)
        .map(|_| (rng.random_range(0..=h - wh), rng.random_range(0..=w - ww)))
        .collect();
    Ok(PatchGrid::from_corners(&corners, wh, ww))
}

/// Groups `count * wh * ww` independently drawn pixels into pseudo-windows.
///
/// This is the point-wise sampling baseline: neighbouring entries of a
/// "window" carry no spatial relationship.
pub fn sample_rays_random(
    seed: u64,
    image: (usize, usize),
    window: (usize, usize),
    count: usize,
) -> Result<PatchGrid> {
    let (h, w) = image;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || h == 0 || w == 0 {
        return Err(Error::Config("zero-sized window or image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<_> = (0..count * wh * ww)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();
    let owned = vec![true; pixels.len()];
    Ok(PatchGrid {
        window_h: wh,
        window_w: ww,
        pixels,
        owned,
    })
}

fn tile_starts(extent: usize, size: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s < extent {
        starts.push(s.min(extent - size));
        s += size;
    }
    starts
}

/// Non-overlapping tiling of the full image; edge tiles are clamped inward.
///
/// Windows larger than the image are shrunk to the image size.
pub fn tile_patches_inference(image: (usize, usize), window: (usize, usize)) -> PatchGrid {
    let (h, w) = image;
    let wh = window.0.clamp(1, h.max(1));
    let ww = window.1.clamp(1, w.max(1));
    let mut corners = Vec::new();
    for top in tile_starts(h, wh) {
        for left in tile_starts(w, ww) {
            corners.push((top, left));
        }
    }
    let mut grid = PatchGrid::from_corners(&corners, wh, ww);
    let mut seen = vec![false; h * w];
    for (k, &(r, c)) in grid.pixels.iter().enumerate() {
        let idx = r * w + c;
        grid.owned[k] = !seen[idx];
        seen[idx] = true;
    }
    grid
}

/// Sample depths, positions and interval lengths along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Splits `[t_near, t_far]` into `l_samples` equal bins and takes one sample per
/// bin: the midpoint, or a uniform jitter within the bin when `stratified`.
/// The last interval runs to `t_far`.
pub fn sample_along_ray<R: Rng + ?Sized>(
    ray: &Ray,
    l_samples: usize,
    stratified: bool,
    rng: &mut R,
) -> RaySamples {
    let l = l_samples.max(1);
    let width = (ray.t_far - ray.t_near) / l as f64;
    let depths: Vec<f64> = (0..l)
        .map(|j| {
            let u = if stratified { rng.random::<f64>() } else { 0.5 };
            ray.t_near + (j as f64 + u) * width
        })
        .collect();
    let deltas = (0..l)
        .map(|j| {
            if j + 1 < l {
                depths[j + 1] - depths[j]
            } else {
                ray.t_far - depths[j]
            }
        })
        .collect();
    let positions = depths.iter().map(|&t| ray.at(t)).collect();
    RaySamples {
        positions,
        depths,
        deltas,
    }
}

/// Rays plus per-ray samples for a patch grid, in canonical
/// `[window][pixel][depth]` layout.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub grid: PatchGrid,
    pub rays: Vec<Ray>,
    pub l_samples: usize,
    pub positions: Vec<Vector3<f64>>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl PatchBatch {
    pub fn build(
        grid: PatchGrid,
        pose: &Pose,
        intr: &CameraIntrinsics,
        near_far: (f64, f64),
        l_samples: usize,
        stratified: bool,
        seed: u64,
    ) -> Result<PatchBatch> {
        if l_samples == 0 {
            return Err(Error::Config("l_samples must be >= 1".into()));
        }
        let rays = generate_rays(pose, intr, &grid.pixels, near_far.0, near_far.1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rays.len() * l_samples;
        let mut positions = Vec::with_capacity(n);
        let mut depths = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for ray in &rays {
            let s = sample_along_ray(ray, l_samples, stratified, &mut rng);
            positions.extend(s.positions);
            depths.extend(s.depths);
            deltas.extend(s.deltas);
        }
        Ok(PatchBatch {
            grid,
            rays,
            l_samples,
            positions,
            depths,
            deltas,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.grid.n_windows()
    }

    pub fn pixels_per_window(&self) -> usize {
        self.grid.pixels_per_window()
    }

    pub fn n_points(&self) -> usize {
        self.positions.len()
    }
}
