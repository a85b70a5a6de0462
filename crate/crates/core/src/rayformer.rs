//! The RayFormer radiance field.
//!
//! Points arrive in the canonical `[window][pixel][depth]` order. After the
//! hash-grid features are projected to `C` channels, each block applies
//! pre-norm inter/intra-ray attention and a feed-forward layer, both with
//! residual connections. Inside the attention, Q/K/V are split in half along
//! channels: the first half attends among the `L` samples of one ray, the
//! second half among the `P` rays of one window at a shared depth index.
//! A density head emits `sigma` plus geometry features, which are joined
//! with the per-ray direction encoding to predict color.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ArchiveEntry, DType, Tensor};
use crate::encoding::{
    hash_encode_backward, hash_encode_into, HashGridConfig, HashGridParams, ShConfig, ShEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::PatchBatch;
use crate::nn::{fast_exp, gelu_forward, sigmoid, softplus, LayerNorm, LayerNormCache, Linear};
use crate::renderer::RadianceField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct I2rConfig {
    pub channels: usize,
    pub heads_per_path: usize,
    pub n_blocks: usize,
    pub geo_dim: usize,
    pub color_hidden: usize,
    /// Attention along each ray; when off, that half of the channels passes `V` through.
    pub intra: bool,
    /// Attention across the rays of a window; when off, that half passes `V` through.
    pub inter: bool,
    /// Initial bias of the density logit.
    pub density_bias: f64,
}

impl Default for I2rConfig {
    fn default() -> Self {
        I2rConfig {
            channels: 32,
            heads_per_path: 2,
            n_blocks: 2,
            geo_dim: 15,
            color_hidden: 32,
            intra: true,
            inter: true,
            density_bias: 0.0,
        }
    }
}

impl I2rConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "channel count must be even and non-zero, got {}",
                self.channels
            )));
        }
        if self.heads_per_path == 0 || (self.channels / 2) % self.heads_per_path != 0 {
            return Err(Error::Config(format!(
                "half width {} is not divisible by {} heads",
                self.channels / 2,
                self.heads_per_path
            )));
        }
        if self.color_hidden == 0 {
            return Err(Error::Config("color_hidden must be non-zero".into()));
        }
        Ok(())
    }

    pub fn paths(&self) -> Paths {
        Paths {
            intra: self.intra,
            inter: self.inter,
        }
    }
}

/// Which attention paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub intra: bool,
    pub inter: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths {
        intra: true,
        inter: true,
    };
}

/// Dimensions of the canonical point layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub windows: usize,
    pub pixels: usize,
    pub samples: usize,
}

impl BatchShape {
    pub fn new(windows: usize, pixels: usize, samples: usize) -> Self {
        BatchShape {
            windows,
            pixels,
            samples,
        }
    }

    pub fn tokens(&self) -> usize {
        self.windows * self.pixels * self.samples
    }

    pub fn rays(&self) -> usize {
        self.windows * self.pixels
    }

    #[inline]
    pub fn index(&self, window: usize, pixel: usize, depth: usize) -> usize {
        (window * self.pixels + pixel) * self.samples + depth
    }
}

/// Token groups for attention, stored `(groups, tokens, channels)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouped {
    pub groups: usize,
    pub tokens: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grouped {
    pub fn zeros(groups: usize, tokens: usize, channels: usize) -> Self {
        Grouped {
            groups,
            tokens,
            channels,
            data: vec![0.0; groups * tokens * channels],
        }
    }

    #[inline]
    pub fn row(&self, group: usize, token: usize) -> &[f64] {
        let o = (group * self.tokens + token) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, group: usize, token: usize) -> &mut [f64] {
        let o = (group * self.tokens + token) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Channels `[h * d, (h + 1) * d)` of every token in one group.
    fn head(&self, group: usize, h: usize, d: usize) -> ArrayView2<'_, f64> {
        let n = self.tokens * self.channels;
        ArrayView2::from_shape(
            (self.tokens, self.channels),
            &self.data[group * n..(group + 1) * n],
        )
        .expect("group size")
        .slice_move(s![.., h * d..(h + 1) * d])
    }

    fn head_mut(&mut self, group: usize, h: usize, d: usize) -> ArrayViewMut2<'_, f64> {
        let n = self.tokens * self.channels;
        ArrayViewMut2::from_shape(
            (self.tokens, self.channels),
            &mut self.data[group * n..(group + 1) * n],
        )
        .expect("group size")
        .slice_move(s![.., h * d..(h + 1) * d])
    }

    fn same_shape(&self, other: &Grouped) -> bool {
        self.groups == other.groups
            && self.tokens == other.tokens
            && self.channels == other.channels
    }
}

/// Splits channels into the first and second halves.
pub fn half_split(x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let c = x.ncols();
    if c % 2 != 0 {
        return Err(Error::Config(format!("cannot half-split {c} channels")));
    }
    Ok((
        x.slice(s![.., ..c / 2]).to_owned(),
        x.slice(s![.., c / 2..]).to_owned(),
    ))
}

pub fn concat_halves(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("halves have matching rows")
}

fn check_layout(x: &Array2<f64>, shape: &BatchShape) -> Result<()> {
    if x.nrows() != shape.tokens() || !x.is_standard_layout() {
        return Err(Error::Layout(format!(
            "expected {} contiguous rows for shape {:?}, got {}",
            shape.tokens(),
            shape,
            x.nrows()
        )));
    }
    Ok(())
}

/// Groups the `L` samples of each ray: `(B * P, L, c)`.
pub fn regroup_intra(x: &Array2<f64>, shape: &BatchShape) -> Result<Grouped> {
    check_layout(x, shape)?;
    Ok(Grouped {
        groups: shape.rays(),
        tokens: shape.samples,
        channels: x.ncols(),
        data: x.as_slice().expect("standard layout").to_vec(),
    })
}

pub fn ungroup_intra(g: &Grouped, shape: &BatchShape) -> Array2<f64> {
    debug_assert_eq!(g.groups * g.tokens, shape.tokens());
    Array2::from_shape_vec((shape.tokens(), g.channels), g.data.clone()).expect("shape checked")
}

/// Groups the `P` rays of each window at one depth index: `(B * L, P, c)`.
pub fn regroup_inter(x: &Array2<f64>, shape: &BatchShape) -> Result<Grouped> {
    check_layout(x, shape)?;
    let c = x.ncols();
    let src = x.as_slice().expect("standard layout");
    let mut out = Grouped::zeros(shape.windows * shape.samples, shape.pixels, c);
    for b in 0..shape.windows {
        for p in 0..shape.pixels {
            for l in 0..shape.samples {
                let from = shape.index(b, p, l) * c;
                out.row_mut(b * shape.samples + l, p)
                    .copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Ok(out)
}

pub fn ungroup_inter(g: &Grouped, shape: &BatchShape) -> Array2<f64> {
    let c = g.channels;
    let mut out = Array2::zeros((shape.tokens(), c));
    let dst = out.as_slice_mut().expect("fresh array");
    for b in 0..shape.windows {
        for p in 0..shape.pixels {
            for l in 0..shape.samples {
                let to = shape.index(b, p, l) * c;
                dst[to..to + c].copy_from_slice(g.row(b * shape.samples + l, p));
            }
        }
    }
    out
}

/// Multi-head scaled dot-product self-attention within each group.
///
/// Returns the concatenated head outputs and the attention probabilities,
/// laid out `(groups, heads, tokens, tokens)`.
pub fn msa(q: &Grouped, k: &Grouped, v: &Grouped, heads: usize) -> Result<(Grouped, Vec<f64>)> {
    if !q.same_shape(k) || !q.same_shape(v) {
        return Err(Error::Dimension(
            "query, key and value groups differ in shape".into(),
        ));
    }
    if heads == 0 || q.channels % heads != 0 {
        return Err(Error::Config(format!(
            "{} channels not divisible by {heads} heads",
            q.channels
        )));
    }
    let (g_n, t_n, d) = (q.groups, q.tokens, q.channels / heads);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Grouped::zeros(g_n, t_n, q.channels);
    let mut probs = vec![0.0; g_n * heads * t_n * t_n];
    for (gh, block) in probs.chunks_exact_mut(t_n * t_n).enumerate() {
        let (g, h) = (gh / heads, gh % heads);
        let mut p = ArrayViewMut2::from_shape((t_n, t_n), block).expect("block size");
        general_mat_mul(scale, &q.head(g, h, d), &k.head(g, h, d).t(), 0.0, &mut p);
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if !max.is_finite() || row.iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric(format!(
                    "non-finite attention logit in group {g}, head {h}, token {i}"
                )));
            }
            row.mapv_inplace(|v| fast_exp(v - max));
            let total = row.sum();
            row /= total;
        }
        general_mat_mul(1.0, &p, &v.head(g, h, d), 0.0, &mut out.head_mut(g, h, d));
    }
    Ok((out, probs))
}

/// Gradients of [`msa`] with respect to its query, key and value inputs.
pub fn msa_backward(
    q: &Grouped,
    k: &Grouped,
    v: &Grouped,
    probs: &[f64],
    d_out: &Grouped,
    heads: usize,
) -> (Grouped, Grouped, Grouped) {
    let (g_n, t_n, d) = (q.groups, q.tokens, q.channels / heads);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Grouped::zeros(g_n, t_n, q.channels);
    let mut dk = Grouped::zeros(g_n, t_n, q.channels);
    let mut dv = Grouped::zeros(g_n, t_n, q.channels);
    let mut ds = Array2::<f64>::zeros((t_n, t_n));
    for (gh, block) in probs.chunks_exact(t_n * t_n).enumerate() {
        let (g, h) = (gh / heads, gh % heads);
        let p = ArrayView2::from_shape((t_n, t_n), block).expect("block size");
        let d_o = d_out.head(g, h, d);
        general_mat_mul(1.0, &p.t(), &d_o, 0.0, &mut dv.head_mut(g, h, d));
        general_mat_mul(1.0, &d_o, &v.head(g, h, d).t(), 0.0, &mut ds);
        for (mut row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let weighted = row.dot(&p_row);
            Zip::from(&mut row)
                .and(&p_row)
                .for_each(|s, &pv| *s = pv * (*s - weighted) * scale);
        }
        general_mat_mul(1.0, &ds, &k.head(g, h, d), 0.0, &mut dq.head_mut(g, h, d));
        general_mat_mul(
            1.0,
            &ds.t(),
            &q.head(g, h, d),
            0.0,
            &mut dk.head_mut(g, h, d),
        );
    }
    (dq, dk, dv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            query: Linear::init(channels, channels, rng),
            key: Linear::init(channels, channels, rng),
            value: Linear::init(channels, channels, rng),
            output: Linear::init(channels, channels, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        AttentionParams {
            query: Linear::zeros(channels, channels),
            key: Linear::zeros(channels, channels),
            value: Linear::zeros(channels, channels),
            output: Linear::zeros(channels, channels),
        }
    }
}

#[derive(Debug, Clone)]
struct PathCache {
    q: Grouped,
    k: Grouped,
    v: Grouped,
    probs: Vec<f64>,
}

/// Intermediates of one [`i2r_msa_forward`] call.
#[derive(Debug, Clone)]
pub struct I2rCache {
    intra: Option<PathCache>,
    inter: Option<PathCache>,
    concat: Array2<f64>,
}

fn run_path(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    shape: &BatchShape,
    heads: usize,
    regroup: fn(&Array2<f64>, &BatchShape) -> Result<Grouped>,
    ungroup: fn(&Grouped, &BatchShape) -> Array2<f64>,
) -> Result<(Array2<f64>, PathCache)> {
    let (q, k, v) = (regroup(q, shape)?, regroup(k, shape)?, regroup(v, shape)?);
    let (out, probs) = msa(&q, &k, &v, heads)?;
    Ok((ungroup(&out, shape), PathCache { q, k, v, probs }))
}

/// Inter- and intra-ray multi-head self-attention with cached intermediates.
pub fn i2r_msa_forward(
    x: &Array2<f64>,
    params: &AttentionParams,
    shape: &BatchShape,
    heads: usize,
    paths: Paths,
) -> Result<(Array2<f64>, I2rCache)> {
    check_layout(x, shape)?;
    let q = params.query.forward(x);
    let k = params.key.forward(x);
    let v = params.value.forward(x);
    let (qa, qb) = half_split(&q)?;
    let (ka, kb) = half_split(&k)?;
    let (va, vb) = half_split(&v)?;
    let (out_a, intra) = if paths.intra {
        let (o, c) = run_path(&qa, &ka, &va, shape, heads, regroup_intra, ungroup_intra)?;
        (o, Some(c))
    } else {
        (va, None)
    };
    let (out_b, inter) = if paths.inter {
        let (o, c) = run_path(&qb, &kb, &vb, shape, heads, regroup_inter, ungroup_inter)?;
        (o, Some(c))
    } else {
        (vb, None)
    };
    let concat = concat_halves(&out_a, &out_b);
    let y = params.output.forward(&concat);
    Ok((
        y,
        I2rCache {
            intra,
            inter,
            concat,
        },
    ))
}

pub fn i2r_msa(
    x: &Array2<f64>,
    params: &AttentionParams,
    shape: &BatchShape,
    heads: usize,
    paths: Paths,
) -> Result<Array2<f64>> {
    Ok(i2r_msa_forward(x, params, shape, heads, paths)?.0)
}

fn path_backward(
    cache: &Option<PathCache>,
    d_out: Array2<f64>,
    shape: &BatchShape,
    heads: usize,
    regroup: fn(&Array2<f64>, &BatchShape) -> Result<Grouped>,
    ungroup: fn(&Grouped, &BatchShape) -> Array2<f64>,
) -> (Option<Array2<f64>>, Option<Array2<f64>>, Array2<f64>) {
    match cache {
        None => (None, None, d_out),
        Some(c) => {
            let d_grouped = regroup(&d_out, shape).expect("gradient shares the forward layout");
            let (dq, dk, dv) = msa_backward(&c.q, &c.k, &c.v, &c.probs, &d_grouped, heads);
            (
                Some(ungroup(&dq, shape)),
                Some(ungroup(&dk, shape)),
                ungroup(&dv, shape),
            )
        }
    }
}

/// Backward pass of [`i2r_msa_forward`]; returns the gradient w.r.t. `x`.
pub fn i2r_msa_backward(
    x: &Array2<f64>,
    params: &AttentionParams,
    cache: &I2rCache,
    shape: &BatchShape,
    heads: usize,
    dy: &Array2<f64>,
    grad: &mut AttentionParams,
) -> Array2<f64> {
    let d_concat = params.output.backward(&cache.concat, dy, &mut grad.output);
    let (da, db) = half_split(&d_concat).expect("even channels");
    let half = da.ncols();
    let (dqa, dka, dva) =
        path_backward(&cache.intra, da, shape, heads, regroup_intra, ungroup_intra);
    let (dqb, dkb, dvb) =
        path_backward(&cache.inter, db, shape, heads, regroup_inter, ungroup_inter);
    let zeros = || Array2::zeros((shape.tokens(), half));
    let dq = concat_halves(&dqa.unwrap_or_else(zeros), &dqb.unwrap_or_else(zeros));
    let dk = concat_halves(&dka.unwrap_or_else(zeros), &dkb.unwrap_or_else(zeros));
    let dv = concat_halves(&dva, &dvb);
    let mut dx = params.value.backward(x, &dv, &mut grad.value);
    if cache.intra.is_some() || cache.inter.is_some() {
        dx += &params.query.backward(x, &dq, &mut grad.query);
        dx += &params.key.backward(x, &dk, &mut grad.key);
    }
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attention: AttentionParams,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl BlockParams {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            norm1: LayerNorm::new(channels),
            attention: AttentionParams::init(channels, rng),
            norm2: LayerNorm::new(channels),
            ffn_in: Linear::init(channels, 2 * channels, rng),
            ffn_out: Linear::init(2 * channels, channels, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        BlockParams {
            norm1: LayerNorm::zeros(channels),
            attention: AttentionParams::zeros(channels),
            norm2: LayerNorm::zeros(channels),
            ffn_in: Linear::zeros(channels, 2 * channels),
            ffn_out: Linear::zeros(2 * channels, channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    xn1: Array2<f64>,
    attention: I2rCache,
    ln2: LayerNormCache,
    xn2: Array2<f64>,
    ffn_slope: Array2<f64>,
    ffn_act: Array2<f64>,
}

/// Pre-norm residual block: attention sub-layer, then a 2x feed-forward sub-layer.
pub fn block_forward(
    x: &Array2<f64>,
    params: &BlockParams,
    shape: &BatchShape,
    heads: usize,
    paths: Paths,
) -> Result<(Array2<f64>, BlockCache)> {
    let (xn1, ln1) = params.norm1.forward(x);
    let (attn, attention) = i2r_msa_forward(&xn1, &params.attention, shape, heads, paths)?;
    let mid = x + &attn;
    let (xn2, ln2) = params.norm2.forward(&mid);
    let ffn_pre = params.ffn_in.forward(&xn2);
    let (ffn_act, ffn_slope) = gelu_forward(&ffn_pre);
    let out = mid + params.ffn_out.forward(&ffn_act);
    Ok((
        out,
        BlockCache {
            ln1,
            xn1,
            attention,
            ln2,
            xn2,
            ffn_slope,
            ffn_act,
        },
    ))
}

pub fn block_backward(
    params: &BlockParams,
    cache: &BlockCache,
    shape: &BatchShape,
    heads: usize,
    dy: &Array2<f64>,
    grad: &mut BlockParams,
) -> Array2<f64> {
    let d_act = params
        .ffn_out
        .backward(&cache.ffn_act, dy, &mut grad.ffn_out);
    let mut d_pre = d_act;
    d_pre *= &cache.ffn_slope;
    let d_xn2 = params.ffn_in.backward(&cache.xn2, &d_pre, &mut grad.ffn_in);
    let d_mid = dy + &params.norm2.backward(&cache.ln2, &d_xn2, &mut grad.norm2);
    let d_xn1 = i2r_msa_backward(
        &cache.xn1,
        &params.attention,
        &cache.attention,
        shape,
        heads,
        &d_mid,
        &mut grad.attention,
    );
    &d_mid + &params.norm1.backward(&cache.ln1, &d_xn1, &mut grad.norm1)
}

/// Full model configuration: encoders plus the attention network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hash: HashGridConfig,
    pub sh: ShConfig,
    pub network: I2rConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        self.sh.validate()?;
        self.network.validate()
    }
}

/// Every trainable tensor, including the two boundary-pose tangent vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub hash: HashGridParams,
    pub input: Linear,
    pub blocks: Vec<BlockParams>,
    pub density: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
    pub pose_first: [f64; 6],
    pub pose_last: [f64; 6],
}

/// Gradients share the parameter layout.
pub type GradientBundle = NetworkParams;

impl NetworkParams {
    /// Glorot weights with zero biases; the density-logit column and the color
    /// output weights start at zero, so σ and color are spatially constant at init.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = &config.network;
        let c = net.channels;
        let hash = HashGridParams::init(config.hash, &mut rng);
        let input = Linear::init(config.hash.output_dim(), c, &mut rng);
        let blocks = (0..net.n_blocks)
            .map(|_| BlockParams::init(c, &mut rng))
            .collect();
        let mut density = Linear::init(c, 1 + net.geo_dim, &mut rng);
        density.weight.column_mut(0).fill(0.0);
        density.bias[0] = net.density_bias;
        let color_hidden = Linear::init(
            net.geo_dim + config.sh.output_dim(),
            net.color_hidden,
            &mut rng,
        );
        let mut color_out = Linear::init(net.color_hidden, 3, &mut rng);
        color_out.weight.fill(0.0);
        NetworkParams {
            hash,
            input,
            blocks,
            density,
            color_hidden,
            color_out,
            pose_first: [0.0; 6],
            pose_last: [0.0; 6],
        }
    }

    pub fn zeros(config: &NetworkConfig) -> Self {
        let net = &config.network;
        let c = net.channels;
        NetworkParams {
            hash: HashGridParams::zeros(config.hash),
            input: Linear::zeros(config.hash.output_dim(), c),
            blocks: (0..net.n_blocks).map(|_| BlockParams::zeros(c)).collect(),
            density: Linear::zeros(c, 1 + net.geo_dim),
            color_hidden: Linear::zeros(net.geo_dim + config.sh.output_dim(), net.color_hidden),
            color_out: Linear::zeros(net.color_hidden, 3),
            pose_first: [0.0; 6],
            pose_last: [0.0; 6],
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named views of every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let cfg = &self.hash.config;
        out.push((
            "hash.tables".into(),
            vec![cfg.n_levels, cfg.table_size(), cfg.features_per_level],
            &self.hash.tables,
        ));
        fn linear<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, l: &'a Linear) {
            out.push((
                format!("{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                l.bias.shape().to_vec(),
                l.bias.as_slice().expect("standard layout"),
            ));
        }
        fn norm<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, name: &str, n: &'a LayerNorm) {
            out.push((
                format!("{name}.gain"),
                n.gain.shape().to_vec(),
                n.gain.as_slice().unwrap(),
            ));
            out.push((
                format!("{name}.bias"),
                n.bias.shape().to_vec(),
                n.bias.as_slice().unwrap(),
            ));
        }
        linear(&mut out, "input", &self.input);
        for (i, b) in self.blocks.iter().enumerate() {
            norm(&mut out, &format!("blocks.{i}.norm1"), &b.norm1);
            linear(
                &mut out,
                &format!("blocks.{i}.attn.query"),
                &b.attention.query,
            );
            linear(&mut out, &format!("blocks.{i}.attn.key"), &b.attention.key);
            linear(
                &mut out,
                &format!("blocks.{i}.attn.value"),
                &b.attention.value,
            );
            linear(
                &mut out,
                &format!("blocks.{i}.attn.output"),
                &b.attention.output,
            );
            norm(&mut out, &format!("blocks.{i}.norm2"), &b.norm2);
            linear(&mut out, &format!("blocks.{i}.ffn.in"), &b.ffn_in);
            linear(&mut out, &format!("blocks.{i}.ffn.out"), &b.ffn_out);
        }
        linear(&mut out, "density", &self.density);
        linear(&mut out, "color.hidden", &self.color_hidden);
        linear(&mut out, "color.out", &self.color_out);
        out.push(("pose.first".into(), vec![6], &self.pose_first));
        out.push(("pose.last".into(), vec![6], &self.pose_last));
        out
    }

    /// Mutable views in the same order as [`NetworkParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _, _)| n).collect();
        let mut slices: Vec<&mut [f64]> = vec![&mut self.hash.tables];
        fn linear<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        fn norm<'a>(out: &mut Vec<&'a mut [f64]>, n: &'a mut LayerNorm) {
            out.push(n.gain.as_slice_mut().unwrap());
            out.push(n.bias.as_slice_mut().unwrap());
        }
        linear(&mut slices, &mut self.input);
        for b in self.blocks.iter_mut() {
            norm(&mut slices, &mut b.norm1);
            linear(&mut slices, &mut b.attention.query);
            linear(&mut slices, &mut b.attention.key);
            linear(&mut slices, &mut b.attention.value);
            linear(&mut slices, &mut b.attention.output);
            norm(&mut slices, &mut b.norm2);
            linear(&mut slices, &mut b.ffn_in);
            linear(&mut slices, &mut b.ffn_out);
        }
        linear(&mut slices, &mut self.density);
        linear(&mut slices, &mut self.color_hidden);
        linear(&mut slices, &mut self.color_out);
        slices.push(&mut self.pose_first);
        slices.push(&mut self.pose_last);
        names.into_iter().zip(slices).collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn to_archive(&self) -> Vec<ArchiveEntry> {
        self.tensors()
            .into_iter()
            .map(|(name, dims, data)| ArchiveEntry {
                name,
                dtype: DType::F64,
                tensor: Tensor {
                    dims,
                    data: data.to_vec(),
                },
            })
            .collect()
    }

    /// Loads tensors by name; every tensor of `self` must be present with a matching shape.
    pub fn load_archive(&mut self, entries: &[ArchiveEntry]) -> Result<()> {
        let shapes: Vec<(String, Vec<usize>)> =
            self.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, dst), (_, dims)) in self.tensors_mut().into_iter().zip(shapes) {
            let entry = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if entry.tensor.dims != dims {
                return Err(Error::Dimension(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {dims:?}",
                    entry.tensor.dims
                )));
            }
            dst.copy_from_slice(&entry.tensor.data);
        }
        Ok(())
    }
}

/// Axis-aligned box mapped onto the unit cube before hash encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for SceneBounds {
    fn default() -> Self {
        SceneBounds {
            min: [-2.0, -2.0, 0.0],
            max: [2.0, 2.0, 4.5],
        }
    }
}

impl SceneBounds {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| !(self.max[a] > self.min[a])) {
            return Err(Error::Config(
                "scene bounds must have max > min on every axis".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = ((p[a] - self.min[a]) / (self.max[a] - self.min[a])).clamp(0.0, 1.0);
        }
        out
    }
}

/// Network inputs for one batch: unit-cube points in canonical order and one direction per ray.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldInput {
    pub shape: BatchShape,
    pub points: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
}

impl FieldInput {
    pub fn from_batch(batch: &PatchBatch, bounds: &SceneBounds) -> Self {
        FieldInput {
            shape: BatchShape::new(
                batch.n_windows(),
                batch.pixels_per_window(),
                batch.l_samples,
            ),
            points: batch
                .positions
                .iter()
                .map(|p| bounds.normalize(&[p.x, p.y, p.z]))
                .collect(),
            directions: batch
                .rays
                .iter()
                .map(|r| [r.direction.x, r.direction.y, r.direction.z])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Intermediates of [`forward`] needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    features: Array2<f64>,
    block_inputs: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    trunk: Array2<f64>,
    density_logit: Vec<f64>,
    color_in: Array2<f64>,
    color_slope: Array2<f64>,
    color_act: Array2<f64>,
    color: Vec<[f64; 3]>,
}

fn validate_input(config: &NetworkConfig, input: &FieldInput) -> Result<()> {
    let s = &input.shape;
    if input.points.len() != s.tokens() || input.directions.len() != s.rays() {
        return Err(Error::Layout(format!(
            "field input holds {} points / {} directions, shape {:?} needs {} / {}",
            input.points.len(),
            input.directions.len(),
            s,
            s.tokens(),
            s.rays()
        )));
    }
    config.validate()
}

/// Evaluates density and color for every point of the batch.
pub fn forward(
    params: &NetworkParams,
    config: &NetworkConfig,
    sh: &ShEncoder,
    input: &FieldInput,
) -> Result<(FieldOutput, ForwardCache)> {
    validate_input(config, input)?;
    let net = &config.network;
    let shape = input.shape;
    let n = shape.tokens();
    let cp = config.hash.output_dim();

    let mut features = Array2::zeros((n, cp));
    for (row, p) in features
        .as_slice_mut()
        .expect("fresh array")
        .chunks_exact_mut(cp)
        .zip(&input.points)
    {
        hash_encode_into(p, &params.hash, row);
    }

    let mut x = params.input.forward(&features);
    let mut block_inputs = Vec::with_capacity(params.blocks.len());
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (y, cache) = block_forward(&x, b, &shape, net.heads_per_path, net.paths())?;
        block_inputs.push(x);
        blocks.push(cache);
        x = y;
    }
    let trunk = x;

    let head = params.density.forward(&trunk);
    let density_logit: Vec<f64> = head.column(0).to_vec();
    let sigma: Vec<f64> = density_logit.iter().map(|&v| softplus(v)).collect();

    let cd = config.sh.output_dim();
    let mut color_in = Array2::zeros((n, net.geo_dim + cd));
    color_in
        .slice_mut(s![.., ..net.geo_dim])
        .assign(&head.slice(s![.., 1..]));
    let mut dir_feat = vec![0.0; cd];
    for (r, d) in input.directions.iter().enumerate() {
        sh.encode_into(d, &mut dir_feat);
        for l in 0..shape.samples {
            let mut row = color_in.row_mut(r * shape.samples + l);
            for (k, v) in dir_feat.iter().enumerate() {
                row[net.geo_dim + k] = *v;
            }
        }
    }
    let color_pre = params.color_hidden.forward(&color_in);
    let (color_act, color_slope) = gelu_forward(&color_pre);
    let logits = params.color_out.forward(&color_act);
    let color: Vec<[f64; 3]> = logits
        .rows()
        .into_iter()
        .map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])])
        .collect();

    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite density in network output".into(),
        ));
    }
    Ok((
        FieldOutput {
            sigma,
            color: color.clone(),
        },
        ForwardCache {
            features,
            block_inputs,
            blocks,
            trunk,
            density_logit,
            color_in,
            color_slope,
            color_act,
            color,
        },
    ))
}

/// Accumulates parameter gradients for upstream gradients on `sigma` and `color`.
/// Pose entries of `grads` are left untouched.
pub fn backward(
    params: &NetworkParams,
    config: &NetworkConfig,
    input: &FieldInput,
    cache: &ForwardCache,
    d_sigma: &[f64],
    d_color: &[[f64; 3]],
    grads: &mut GradientBundle,
) {
    let net = &config.network;
    let shape = input.shape;
    let n = shape.tokens();

    let mut d_logits = Array2::zeros((n, 3));
    for (i, (c, g)) in cache.color.iter().zip(d_color).enumerate() {
        for k in 0..3 {
            d_logits[(i, k)] = g[k] * c[k] * (1.0 - c[k]);
        }
    }
    let mut d_act = params
        .color_out
        .backward(&cache.color_act, &d_logits, &mut grads.color_out);
    d_act *= &cache.color_slope;
    let d_color_in = params
        .color_hidden
        .backward(&cache.color_in, &d_act, &mut grads.color_hidden);

    let mut d_head = Array2::zeros((n, 1 + net.geo_dim));
    for i in 0..n {
        d_head[(i, 0)] = d_sigma[i] * sigmoid(cache.density_logit[i]);
    }
    d_head
        .slice_mut(s![.., 1..])
        .assign(&d_color_in.slice(s![.., ..net.geo_dim]));
    let mut dx = params
        .density
        .backward(&cache.trunk, &d_head, &mut grads.density);

    for (i, b) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(
            b,
            &cache.blocks[i],
            &shape,
            net.heads_per_path,
            &dx,
            &mut grads.blocks[i],
        );
    }
    let _ = &cache.block_inputs;
    let d_features = params
        .input
        .backward(&cache.features, &dx, &mut grads.input);
    let cp = config.hash.output_dim();
    for (row, p) in d_features
        .as_slice()
        .expect("standard layout")
        .chunks_exact(cp)
        .zip(&input.points)
    {
        hash_encode_backward(p, &config.hash, row, &mut grads.hash.tables);
    }
}

/// A configured network together with its parameters and scene normalization.
#[derive(Debug, Clone)]
pub struct RayFormer {
    pub config: NetworkConfig,
    pub bounds: SceneBounds,
    pub params: NetworkParams,
    pub sh: ShEncoder,
}

impl RayFormer {
    pub fn new(config: NetworkConfig, bounds: SceneBounds, seed: u64) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        Ok(RayFormer {
            config,
            bounds,
            params: NetworkParams::init(&config, seed),
            sh: ShEncoder::new(config.sh),
        })
    }

    pub fn forward(&self, input: &FieldInput) -> Result<(FieldOutput, ForwardCache)> {
        forward(&self.params, &self.config, &self.sh, input)
    }
}

impl RadianceField for RayFormer {
    fn evaluate(&self, batch: &PatchBatch) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
        let input = FieldInput::from_batch(batch, &self.bounds);
        let (out, _) = self.forward(&input)?;
        Ok((out.sigma, out.color))
    }
}
