//! Input encodings: a multiresolution hash grid for sample positions and
//! real spherical harmonics for view directions.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub base_resolution: usize,
    pub per_level_scale: f64,
    pub features_per_level: usize,
    pub table_size_log2: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            n_levels: 8,
            base_resolution: 16,
            per_level_scale: 1.5,
            features_per_level: 2,
            table_size_log2: 14,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::Config("hash grid sizes must be non-zero".into()));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(Error::Config("per_level_scale must exceed 1".into()));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 24 {
            return Err(Error::Config("table_size_log2 must be in 1..=24".into()));
        }
        Ok(())
    }

    /// Width of the concatenated feature vector.
    pub fn output_dim(&self) -> usize {
        self.n_levels * self.features_per_level
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_size_log2
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as usize
    }
}

/// Spatial hash of an integer grid vertex into a table of `table_size` (power of two) rows.
#[inline]
pub fn spatial_hash(x: u32, y: u32, z: u32, table_size: usize) -> usize {
    let h = x.wrapping_mul(PRIMES[0]) ^ y.wrapping_mul(PRIMES[1]) ^ z.wrapping_mul(PRIMES[2]);
    (h as usize) & (table_size - 1)
}

/// Trainable hash tables, laid out `[level][row][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridParams {
    pub config: HashGridConfig,
    pub tables: Vec<f64>,
}

impl HashGridParams {
    pub fn zeros(config: HashGridConfig) -> Self {
        let n = config.n_levels * config.table_size() * config.features_per_level;
        HashGridParams {
            config,
            tables: vec![0.0; n],
        }
    }

    /// Uniform initialization in `[-1e-4, 1e-4]`.
    pub fn init(config: HashGridConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(config);
        p.tables
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1e-4..=1e-4));
        p
    }

    pub fn seeded(config: HashGridConfig, seed: u64) -> Self {
        Self::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// The eight corners of the cell containing `p` at one level with their trilinear weights.
#[inline]
fn cell_corners(p: &[f64; 3], resolution: usize, table_size: usize) -> [(usize, f64); 8] {
    let mut base = [0u32; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, 1.0) * resolution as f64;
        let i = (x.floor() as usize).min(resolution - 1);
        base[a] = i as u32;
        frac[a] = x - i as f64;
    }
    let mut out = [(0usize, 0.0); 8];
    for (k, slot) in out.iter_mut().enumerate() {
        let d = [(k & 1) as u32, ((k >> 1) & 1) as u32, ((k >> 2) & 1) as u32];
        let mut w = 1.0;
        for a in 0..3 {
            w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        let row = spatial_hash(base[0] + d[0], base[1] + d[1], base[2] + d[2], table_size);
        *slot = (row, w);
    }
    out
}

/// Encodes one point of the unit cube (coordinates are clamped) into `out`
/// of width `n_levels * features_per_level`.
pub fn hash_encode_into(p: &[f64; 3], params: &HashGridParams, out: &mut [f64]) {
    let cfg = &params.config;
    let (t, f) = (cfg.table_size(), cfg.features_per_level);
    out.fill(0.0);
    for level in 0..cfg.n_levels {
        let table = &params.tables[level * t * f..(level + 1) * t * f];
        let dst = &mut out[level * f..(level + 1) * f];
        for (row, w) in cell_corners(p, cfg.resolution(level), t) {
            for (o, v) in dst.iter_mut().zip(&table[row * f..(row + 1) * f]) {
                *o += w * v;
            }
        }
    }
}

pub fn hash_encode(p: &[f64; 3], params: &HashGridParams) -> Vec<f64> {
    let mut out = vec![0.0; params.config.output_dim()];
    hash_encode_into(p, params, &mut out);
    out
}

/// Scatter-adds `upstream` (gradient of the loss w.r.t. this point's features)
/// into `grad_tables` with the forward trilinear weights.
pub fn hash_encode_backward(
    p: &[f64; 3],
    config: &HashGridConfig,
    upstream: &[f64],
    grad_tables: &mut [f64],
) {
    let (t, f) = (config.table_size(), config.features_per_level);
    for level in 0..config.n_levels {
        let g = &upstream[level * f..(level + 1) * f];
        let table = &mut grad_tables[level * t * f..(level + 1) * t * f];
        for (row, w) in cell_corners(p, config.resolution(level), t) {
            for (dst, gv) in table[row * f..(row + 1) * f].iter_mut().zip(g) {
                *dst += w * gv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShConfig {
    pub max_degree: usize,
}

impl Default for ShConfig {
    fn default() -> Self {
        ShConfig { max_degree: 3 }
    }
}

impl ShConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_degree > 3 {
            return Err(Error::Config(format!(
                "spherical harmonics degree {} > 3 is not supported",
                self.max_degree
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        (self.max_degree + 1) * (self.max_degree + 1)
    }
}

/// Real spherical harmonics encoder that counts how many inputs needed renormalizing.
#[derive(Debug, Default)]
pub struct ShEncoder {
    pub config: ShConfig,
    renormalized: AtomicUsize,
}

impl Clone for ShEncoder {
    fn clone(&self) -> Self {
        ShEncoder {
            config: self.config,
            renormalized: AtomicUsize::new(self.renormalized.load(Ordering::Relaxed)),
        }
    }
}

impl ShEncoder {
    pub fn new(config: ShConfig) -> Self {
        ShEncoder {
            config,
            renormalized: AtomicUsize::new(0),
        }
    }

    /// Number of directions that were off the unit sphere by more than 1e-6.
    pub fn renormalized_count(&self) -> usize {
        self.renormalized.load(Ordering::Relaxed)
    }

    pub fn encode(&self, d: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.config.output_dim()];
        self.encode_into(d, &mut out);
        out
    }

    pub fn encode_into(&self, d: &[f64; 3], out: &mut [f64]) {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let d = if (norm - 1.0).abs() > 1e-6 {
            self.renormalized.fetch_add(1, Ordering::Relaxed);
            if norm > 0.0 {
                [d[0] / norm, d[1] / norm, d[2] / norm]
            } else {
                [0.0, 0.0, 1.0]
            }
        } else {
            *d
        };
        sh_basis(self.config.max_degree, &d, out);
    }
}

/// Real SH basis through `degree`, ordered by degree then `m = -l..=l`.
pub fn sh_basis(degree: usize, d: &[f64; 3], out: &mut [f64]) {
    let [x, y, z] = *d;
    out[0] = 0.282_094_791_773_878_14;
    if degree == 0 {
        return;
    }
    out[1] = -0.488_602_511_902_919_9 * y;
    out[2] = 0.488_602_511_902_919_9 * z;
    out[3] = -0.488_602_511_902_919_9 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = 1.092_548_430_592_079_2 * xy;
    out[5] = -1.092_548_430_592_079_2 * yz;
    out[6] = 0.315_391_565_252_520_05 * (2.0 * zz - xx - yy);
    out[7] = -1.092_548_430_592_079_2 * xz;
    out[8] = 0.546_274_215_296_039_6 * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = -0.590_043_589_926_643_5 * y * (3.0 * xx - yy);
    out[10] = 2.890_611_442_640_554 * xy * z;
    out[11] = -0.457_045_799_464_465_8 * y * (4.0 * zz - xx - yy);
    out[12] = 0.373_176_332_590_115_4 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = -0.457_045_799_464_465_8 * x * (4.0 * zz - xx - yy);
    out[14] = 1.445_305_721_320_277 * z * (xx - yy);
    out[15] = -0.590_043_589_926_643_5 * x * (xx - 3.0 * yy);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_level(resolution: usize) -> HashGridConfig {
        HashGridConfig {
            n_levels: 1,
            base_resolution: resolution,
            per_level_scale: 1.5,
            features_per_level: 2,
            table_size_log2: 6,
        }
    }

    #[test]
    fn default_widths() {
        let cfg = HashGridConfig::default();
        assert_eq!(cfg.output_dim(), 16);
        assert_eq!(cfg.resolution(0), 16);
        assert_eq!(cfg.resolution(1), 24);
        assert_eq!(ShConfig::default().output_dim(), 16);
        for degree in 0..=3 {
            let enc = ShEncoder::new(ShConfig { max_degree: degree });
            assert_eq!(
                enc.encode(&[0.0, 0.0, 1.0]).len(),
                (degree + 1) * (degree + 1)
            );
        }
    }

    #[test]
    fn grid_corner_returns_table_entry() {
        let cfg = HashGridConfig::default();
        let params = HashGridParams::seeded(cfg, 3);
        // (0.5, 0.25, 0.75) lands on a vertex at every level whose resolution is a multiple of 4
        let p = [0.5, 0.25, 0.75];
        let out = hash_encode(&p, &params);
        let (t, f) = (cfg.table_size(), cfg.features_per_level);
        for level in 0..cfg.n_levels {
            let res = cfg.resolution(level);
            if res % 4 != 0 {
                continue;
            }
            let v = [res as u32 / 2, res as u32 / 4, 3 * res as u32 / 4];
            let row = spatial_hash(v[0], v[1], v[2], t);
            for k in 0..f {
                let expected = params.tables[(level * t + row) * f + k];
                assert!((out[level * f + k] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let params = HashGridParams::zeros(HashGridConfig::default());
        assert!(hash_encode(&[0.3, 0.6, 0.9], &params)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn matches_explicit_corner_enumeration() {
        let cfg = one_level(2);
        let params = HashGridParams::seeded(cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let mut expected = [0.0; 2];
            let (ix, iy, iz) = (
                ((p[0] * 2.0) as usize).min(1),
                ((p[1] * 2.0) as usize).min(1),
                ((p[2] * 2.0) as usize).min(1),
            );
            let (fx, fy, fz) = (
                p[0] * 2.0 - ix as f64,
                p[1] * 2.0 - iy as f64,
                p[2] * 2.0 - iz as f64,
            );
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let w = (if dx == 1 { fx } else { 1.0 - fx })
                            * (if dy == 1 { fy } else { 1.0 - fy })
                            * (if dz == 1 { fz } else { 1.0 - fz });
                        let h = ((ix + dx) as u32)
                            ^ ((iy + dy) as u32).wrapping_mul(2_654_435_761)
                            ^ ((iz + dz) as u32).wrapping_mul(805_459_861);
                        let row = (h % 64) as usize;
                        for k in 0..2 {
                            expected[k] += w * params.tables[row * 2 + k];
                        }
                    }
                }
            }
            let out = hash_encode(&p, &params);
            for k in 0..2 {
                assert!((out[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuous_within_a_cell() {
        let cfg = HashGridConfig::default();
        let mut params = HashGridParams::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        params
            .tables
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        // trilinear interpolation of values in [-1, 1] is Lipschitz with constant
        // at most sqrt(3) * 2 * resolution per level
        let k: f64 = (0..cfg.n_levels)
            .map(|l| 2.0 * 3f64.sqrt() * cfg.resolution(l) as f64)
            .sum();
        let finest = cfg.resolution(cfg.n_levels - 1) as f64;
        for _ in 0..200 {
            let p = [
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            ];
            let eps = 1e-7;
            let q = [p[0] + eps, p[1] - eps, p[2] + eps];
            let same_cell = (0..cfg.n_levels).all(|l| {
                let r = cfg.resolution(l) as f64;
                (0..3).all(|a| (p[a] * r).floor() == (q[a] * r).floor())
            });
            if !same_cell || q.iter().any(|v| !(0.0..=1.0).contains(v)) {
                continue;
            }
            let (a, b) = (hash_encode(&p, &params), hash_encode(&q, &params));
            let diff = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff <= k * eps * 3f64.sqrt() + 1e-12,
                "jump {diff} at finest res {finest}"
            );
        }
    }

    #[test]
    fn backward_corner_aligned_hits_one_row() {
        let cfg = one_level(4);
        let p = [0.25, 0.5, 0.75];
        let mut grad = vec![0.0; cfg.table_size() * 2];
        hash_encode_backward(&p, &cfg, &[1.5, -2.0], &mut grad);
        let nonzero: Vec<_> = grad
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .collect();
        assert_eq!(nonzero.len(), 2);
        let row = spatial_hash(1, 2, 3, cfg.table_size());
        assert_eq!(grad[row * 2], 1.5);
        assert_eq!(grad[row * 2 + 1], -2.0);

        let mut grad = vec![0.0; cfg.table_size() * 2];
        hash_encode_backward(&[0.1, 0.2, 0.3], &cfg, &[0.0, 0.0], &mut grad);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_central_differences() {
        let cfg = HashGridConfig {
            table_size_log2: 8,
            n_levels: 3,
            ..HashGridConfig::default()
        };
        let mut params = HashGridParams::seeded(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points: Vec<[f64; 3]> = (0..5)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let weights: Vec<f64> = (0..cfg.output_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let loss = |params: &HashGridParams| -> f64 {
            points
                .iter()
                .map(|p| {
                    hash_encode(p, params)
                        .iter()
                        .zip(&weights)
                        .map(|(a, w)| (a * w).sin())
                        .sum::<f64>()
                })
                .sum()
        };
        let mut grad = vec![0.0; params.tables.len()];
        for p in &points {
            let feats = hash_encode(p, &params);
            let up: Vec<f64> = feats
                .iter()
                .zip(&weights)
                .map(|(a, w)| w * (a * w).cos())
                .collect();
            hash_encode_backward(p, &cfg, &up, &mut grad);
        }
        let h = 1e-5;
        let mut checked = 0;
        for i in 0..params.tables.len() {
            if grad[i] == 0.0 {
                continue;
            }
            let orig = params.tables[i];
            params.tables[i] = orig + h;
            let lp = loss(&params);
            params.tables[i] = orig - h;
            let lm = loss(&params);
            params.tables[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "row {i}: analytic {} fd {fd}", grad[i]);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn sh_reference_values() {
        let enc = ShEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let d = [v[0] / n, v[1] / n, v[2] / n];
            assert!((enc.encode(&d)[0] - 0.28209479177).abs() < 1e-11);
        }
        let up = enc.encode(&[0.0, 0.0, 1.0]);
        assert_eq!(up[1], 0.0);
        assert_eq!(up[3], 0.0);
        assert!((up[2] - 0.48860251190).abs() < 1e-11);
    }

    #[test]
    fn unsold_identity_degree_one() {
        let enc = ShEncoder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sums = Vec::new();
        for _ in 0..100 {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let y = enc.encode(&[v[0] / n, v[1] / n, v[2] / n]);
            sums.push(y[1] * y[1] + y[2] * y[2] + y[3] * y[3]);
            let s2: f64 = y[4..9].iter().map(|v| v * v).sum();
            assert!((s2 - 5.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-12);
            let s3: f64 = y[9..16].iter().map(|v| v * v).sum();
            assert!((s3 - 7.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-12);
        }
        let expected = 3.0 / (4.0 * std::f64::consts::PI);
        assert!(sums.iter().all(|s| (s - expected).abs() < 1e-12));
    }

    #[test]
    fn non_unit_direction_is_normalized_and_counted() {
        let enc = ShEncoder::default();
        let a = enc.encode(&[0.0, 0.0, 2.0]);
        assert_eq!(enc.renormalized_count(), 1);
        assert_eq!(a, enc.encode(&[0.0, 0.0, 1.0]));
        assert_eq!(enc.renormalized_count(), 1);
    }
}
