//! Discrete volume rendering along sampled rays.
//!
//! Each sample contributes `w_j = T_j * alpha_j` with `alpha_j = 1 - exp(-sigma_j * delta_j)`
//! and `T_j = prod_{k<j} (1 - alpha_k)`. The background is black unless a
//! caller composites one explicitly.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PatchBatch, PatchGrid, Pose};

/// Composited color of one ray plus the per-sample weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_j` before each sample, followed by the residual transmittance after the last one.
    pub transmittance: Vec<f64>,
    pub opacity: f64,
}

fn check_inputs(sigma: &[f64], color: &[[f64; 3]], deltas: &[f64]) -> Result<()> {
    if sigma.len() != color.len() || sigma.len() != deltas.len() {
        return Err(Error::Dimension(format!(
            "composite lengths differ: sigma {}, color {}, deltas {}",
            sigma.len(),
            color.len(),
            deltas.len()
        )));
    }
    if let Some(j) = sigma.iter().position(|&s| !(s >= 0.0)) {
        return Err(Error::Contract(format!(
            "density must be non-negative, sample {j} has {}",
            sigma[j]
        )));
    }
    if let Some(j) = deltas.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Contract(format!(
            "interval lengths must be positive, sample {j} has {}",
            deltas[j]
        )));
    }
    Ok(())
}

/// Alpha-composites samples ordered front to back.
pub fn composite(sigma: &[f64], color: &[[f64; 3]], deltas: &[f64]) -> Result<RenderOutput> {
    check_inputs(sigma, color, deltas)?;
    let l = sigma.len();
    let mut weights = Vec::with_capacity(l);
    let mut transmittance = Vec::with_capacity(l + 1);
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    for j in 0..l {
        transmittance.push(t);
        let survive = (-sigma[j] * deltas[j]).exp();
        let w = t * (1.0 - survive);
        weights.push(w);
        for c in 0..3 {
            rgb[c] += w * color[j][c];
        }
        t *= survive;
    }
    transmittance.push(t);
    Ok(RenderOutput {
        rgb,
        weights,
        transmittance,
        opacity: 1.0 - t,
    })
}

/// Gradients of `upstream . rgb` with respect to densities and colors.
pub fn composite_backward(
    sigma: &[f64],
    color: &[[f64; 3]],
    deltas: &[f64],
    out: &RenderOutput,
    upstream: [f64; 3],
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let l = sigma.len();
    let mut d_sigma = vec![0.0; l];
    let mut d_color = vec![[0.0; 3]; l];
    let dot = |c: &[f64; 3]| upstream[0] * c[0] + upstream[1] * c[1] + upstream[2] * c[2];
    // running sum of w_i (g . c_i) over samples behind j
    let mut behind = 0.0;
    for j in (0..l).rev() {
        let gc = dot(&color[j]);
        d_sigma[j] = deltas[j] * (out.transmittance[j + 1] * gc - behind);
        behind += out.weights[j] * gc;
        for c in 0..3 {
            d_color[j][c] = out.weights[j] * upstream[c];
        }
    }
    (d_sigma, d_color)
}

/// Anything that can report density and color for the points of a patch batch.
pub trait RadianceField {
    /// Returns per-point `(sigma, rgb)` in the batch's canonical point order.
    fn evaluate(&self, batch: &PatchBatch) -> Result<(Vec<f64>, Vec<[f64; 3]>)>;
}

/// Rendering controls shared by training-time and inference-time frame renders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub near_far: (f64, f64),
    pub l_samples: usize,
    pub background: [f64; 3],
    /// Number of tiles evaluated per field call.
    pub tiles_per_call: usize,
}

impl RenderSettings {
    pub fn new(near_far: (f64, f64), l_samples: usize) -> Self {
        RenderSettings {
            near_far,
            l_samples,
            background: [0.0; 3],
            tiles_per_call: 16,
        }
    }
}

/// Composites every ray of a batch; returns one rgb triple per ray.
pub fn render_batch<F: RadianceField + ?Sized>(
    field: &F,
    batch: &PatchBatch,
    background: [f64; 3],
) -> Result<Vec<[f64; 3]>> {
    let (sigma, color) = field.evaluate(batch)?;
    let l = batch.l_samples;
    (0..batch.rays.len())
        .map(|r| {
            let span = r * l..(r + 1) * l;
            let out = composite(
                &sigma[span.clone()],
                &color[span.clone()],
                &batch.deltas[span],
            )?;
            let rest = 1.0 - out.opacity;
            Ok([
                out.rgb[0] + rest * background[0],
                out.rgb[1] + rest * background[1],
                out.rgb[2] + rest * background[2],
            ])
        })
        .collect()
}

/// Renders a full `(H, W, 3)` frame window by window, writing each owned pixel once.
pub fn render_frame<F: RadianceField + ?Sized>(
    field: &F,
    pose: &Pose,
    intr: &CameraIntrinsics,
    tiling: &PatchGrid,
    settings: &RenderSettings,
) -> Result<Vec<f64>> {
    let (h, w) = (intr.height, intr.width);
    let mut image = vec![0.0; h * w * 3];
    let mut written = vec![false; h * w];
    let per_window = tiling.pixels_per_window();
    let chunk = settings.tiles_per_call.max(1);
    let n_windows = tiling.n_windows();
    let mut start = 0;
    while start < n_windows {
        let end = (start + chunk).min(n_windows);
        let span = start * per_window..end * per_window;
        let grid = PatchGrid {
            window_h: tiling.window_h,
            window_w: tiling.window_w,
            pixels: tiling.pixels[span.clone()].to_vec(),
            owned: tiling.owned[span].to_vec(),
        };
        let batch = PatchBatch::build(
            grid,
            pose,
            intr,
            settings.near_far,
            settings.l_samples,
            false,
            0,
        )?;
        let rgb = render_batch(field, &batch, settings.background)?;
        for (k, &(r, c)) in batch.grid.pixels.iter().enumerate() {
            if !batch.grid.owned[k] {
                continue;
            }
            let idx = r * w + c;
            if written[idx] {
                return Err(Error::Layout(format!("pixel ({r}, {c}) owned twice")));
            }
            written[idx] = true;
            image[idx * 3..idx * 3 + 3].copy_from_slice(&rgb[k]);
        }
        start = end;
    }
    if let Some(idx) = written.iter().position(|&w| !w) {
        return Err(Error::Layout(format!(
            "tiling leaves pixel ({}, {}) uncovered",
            idx / w,
            idx % w
        )));
    }
    Ok(image)
}
