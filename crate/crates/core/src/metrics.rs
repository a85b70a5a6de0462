//! Image quality metrics for reconstructed frames.
//!
//! Images are interleaved `(H, W, C)` buffers with values in `[0, 1]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sci::FrameStack;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "images hold {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dimension("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)` for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable Gaussian filter over the valid region of one `(h, w)` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW)
                .map(|k| kernel[k] * plane[r * w + c + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW)
                .map(|k| kernel[k] * rows[(r + k) * ow + c])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5), averaged over the
/// valid window positions and then over channels.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, channels: usize) -> Result<f64> {
    check_same(a, b)?;
    if a.len() != height * width * channels {
        return Err(Error::Dimension(format!(
            "{} values do not form a {height}x{width}x{channels} image",
            a.len()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}"
        )));
    }
    let kernel = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..channels {
        let plane =
            |img: &[f64]| -> Vec<f64> { img.iter().skip(ch).step_by(channels).copied().collect() };
        let (pa, pb) = (plane(a), plane(b));
        let prod =
            |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
        let mu_a = filter_valid(&pa, height, width, &kernel);
        let mu_b = filter_valid(&pb, height, width, &kernel);
        let aa = filter_valid(&prod(&pa, &pa), height, width, &kernel);
        let bb = filter_valid(&prod(&pb, &pb), height, width, &kernel);
        let ab = filter_valid(&prod(&pa, &pb), height, width, &kernel);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6}  {:>9}  {:>7}\n", "frame", "psnr_db", "ssim");
        for f in &self.frames {
            let _ = writeln!(s, "{:>6}  {:>9.3}  {:>7.4}", f.frame, f.psnr, f.ssim);
        }
        let _ = writeln!(
            s,
            "{:>6}  {:>9.3}  {:>7.4}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr_db,ssim\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{:.6},{:.6}", f.frame, f.psnr, f.ssim);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

/// Per-frame PSNR and SSIM of a reconstruction against ground truth.
pub fn evaluate_frames(recon: &FrameStack, truth: &FrameStack) -> Result<MetricReport> {
    if (recon.n_frames, recon.height, recon.width, recon.channels)
        != (truth.n_frames, truth.height, truth.width, truth.channels)
    {
        return Err(Error::Dimension(
            "reconstruction and ground truth differ in shape".into(),
        ));
    }
    let frames = (0..recon.n_frames)
        .map(|i| {
            let (a, b) = (recon.frame(i), truth.frame(i));
            Ok(FrameMetrics {
                frame: i,
                psnr: psnr(a, b)?,
                ssim: ssim(a, b, recon.height, recon.width, recon.channels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { frames })
}

/// Mean per-frame PSNR without SSIM, for periodic monitoring.
pub fn mean_frame_psnr(recon: &FrameStack, truth: &FrameStack) -> Result<f64> {
    if recon.values.len() != truth.values.len() || recon.n_frames != truth.n_frames {
        return Err(Error::Dimension(
            "reconstruction and ground truth differ in shape".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..recon.n_frames {
        total += psnr(recon.frame(i), truth.frame(i))?;
    }
    Ok(total / recon.n_frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn checkerboard(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| ((i / w + i % w) % 2) as f64).collect()
    }

    /// Direct double loop over every window position with a 2-D kernel.
    fn scalar_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let mut k2 = [[0.0; 11]; 11];
        let mut z = 0.0;
        for (i, row) in k2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (x, y) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(x * x + y * y) / 4.5).exp();
                z += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0.0;
        for r in 0..=h - 11 {
            for c in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = k2[i][j] / z;
                        let (x, y) = (a[(r + i) * w + c + j], b[(r + i) * w + c + j]);
                        ma += g * x;
                        mb += g * y;
                        saa += g * x * x;
                        sbb += g * y * y;
                        sab += g * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn psnr_reference_values() {
        let a = vec![0.3; 48];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&vec![0.0; 12], &vec![1.0; 12]).unwrap(), 0.0);
        assert!(psnr(&a, &a[..10]).is_err());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a: Vec<f64> = (0..16 * 13 * 3)
            .map(|i| ((i * 37) % 101) as f64 / 100.0)
            .collect();
        assert_eq!(ssim(&a, &a, 16, 13, 3).unwrap(), 1.0);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let a = checkerboard(16, 16);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&a, &b, 16, 16, 1).unwrap() < 0.0);
    }

    #[test]
    fn ssim_luminance_shift_matches_scalar_reference() {
        let (h, w) = (14, 17);
        let a: Vec<f64> = (0..h * w)
            .map(|i| 0.5 + 0.05 * ((i as f64) * 0.7).sin())
            .collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let fast = ssim(&a, &b, h, w, 1).unwrap();
        assert!((fast - scalar_ssim(&a, &b, h, w)).abs() < 1e-9);
        assert!(fast < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = vec![0.0; 10 * 10];
        assert!(matches!(ssim(&a, &a, 10, 10, 1), Err(Error::Config(_))));
    }

    #[test]
    fn report_formats() {
        let report = MetricReport {
            frames: vec![
                FrameMetrics {
                    frame: 0,
                    psnr: 30.0,
                    ssim: 0.9,
                },
                FrameMetrics {
                    frame: 1,
                    psnr: 32.0,
                    ssim: 0.8,
                },
            ],
        };
        assert!((report.mean_psnr() - 31.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,31.0"));
        assert!(report.to_table().contains("mean"));
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..1.0, 12 * 12),
            b in prop::collection::vec(0.0f64..1.0, 12 * 12),
        ) {
            let s = ssim(&a, &b, 12, 12, 1).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - ssim(&b, &a, 12, 12, 1).unwrap()).abs() < 1e-12);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
