//! Dense layers and activations with explicit backward passes.
//!
//! Activations are `(tokens, channels)` matrices. Every `backward` accumulates
//! parameter gradients into a caller-owned buffer of the same shape as the
//! layer and returns the gradient with respect to the layer input.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(in, out)`, so that `y = x W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((input, output), || rng.random_range(-a..a)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only (the input gradient is not needed).
    pub fn backward_params(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(channels),
            bias: Array1::zeros(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        LayerNorm {
            gain: Array1::zeros(channels),
            bias: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, istd) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / c;
            *istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *istd;
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut LayerNorm,
    ) -> Array2<f64> {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let c = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &istd) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let sum = row.sum();
            let dot = row.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>();
            Zip::from(&mut row).and(&xhat).for_each(|g, &xh| {
                *g = istd * (*g - sum / c - xh * dot / c);
            });
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Branch-free `exp` accurate to a few ulp on [-708, 709]; inputs outside are clamped.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 709.0);
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let n = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = INV_FACTORIALS[12];
    for k in (1..12).rev() {
        p = p * r + INV_FACTORIALS[k];
    }
    let scale = f64::from_bits(((n as i64 + 1023) as u64) << 52);
    (p * r + 1.0) * scale
}

const INV_FACTORIALS: [f64; 13] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
];

/// Branch-free `tanh`: a Taylor polynomial near zero, the exponential form elsewhere.
#[inline]
fn tanh(u: f64) -> f64 {
    let a = u.abs().min(20.0);
    let a2 = a * a;
    let mut p = 6_404_582.0 / 10_854_718_875.0;
    for c in [
        -929_569.0 / 638_512_875.0,
        21_844.0 / 6_081_075.0,
        -1382.0 / 155_925.0,
        62.0 / 2835.0,
        -17.0 / 315.0,
        2.0 / 15.0,
        -1.0 / 3.0,
    ] {
        p = p * a2 + c;
    }
    let series = a + a * a2 * p;
    let e = fast_exp(2.0 * a);
    let t = if a < 0.125 {
        series
    } else {
        (e - 1.0) / (e + 1.0)
    };
    t.copysign(u)
}

#[inline]
fn gelu_tanh(x: f64) -> f64 {
    tanh(GELU_K * (x + GELU_C * x * x * x))
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = gelu_tanh(x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Element-wise GELU returning the activations and their slopes.
pub fn gelu_forward(x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut y = Array2::zeros(x.raw_dim());
    let mut slope = Array2::zeros(x.raw_dim());
    Zip::from(&mut y)
        .and(&mut slope)
        .and(x)
        .for_each(|y, s, &x| {
            let t = gelu_tanh(x);
            *y = 0.5 * x * (1.0 + t);
            *s = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x);
        });
    (y, slope)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_exp_matches_std() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            worst = worst.max(((fast_exp(x) - x.exp()) / x.exp()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(fast_exp(0.0), 1.0);
        assert!((fast_exp(-1e4) / (-708.0f64).exp() - 1.0).abs() < 1e-14);
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn activations_at_zero() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        for &u in &[
            -30.0, -2.0, -0.124, -1e-9, 0.0, 1e-9, 0.1, 0.126, 0.3, 5.0, 30.0,
        ] {
            assert!(
                (tanh(u) - u.tanh()).abs() <= 1e-14 * u.tanh().abs(),
                "{u} {} {}",
                tanh(u),
                u.tanh()
            );
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn activation_derivatives() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.1, 1.4, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(rel_err(fd, gelu_grad(x)) < 1e-7);
            let (y, slope) = gelu_forward(&Array2::from_elem((1, 1), x));
            assert_eq!((y[(0, 0)], slope[(0, 0)]), (gelu(x), gelu_grad(x)));
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!(rel_err(fd, sigmoid(x)) < 1e-7);
        }
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(5, 6, &mut rng);
        let weights = random(5, 6, &mut rng);
        let mut ln = LayerNorm::new(6);
        ln.gain = Array1::from_shape_simple_fn(6, || rng.random_range(0.5..1.5));
        ln.bias = Array1::from_shape_simple_fn(6, || rng.random_range(-0.5..0.5));
        let loss = |ln: &LayerNorm, x: &Array2<f64>| (ln.forward(x).0 * &weights).sum();
        let (_, cache) = ln.forward(&x);
        let mut grad = LayerNorm::zeros(6);
        let dx = ln.backward(&cache, &weights, &mut grad);
        let h = 1e-6;
        for idx in [(0, 0), (2, 3), (4, 5)] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * h);
            assert!(rel_err(fd, dx[idx]) < 1e-6);
        }
        for j in 0..6 {
            let (mut p, mut m) = (ln.clone(), ln.clone());
            p.gain[j] += h;
            m.gain[j] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!(rel_err(fd, grad.gain[j]) < 1e-6);
        }
    }

    #[test]
    fn linear_backward_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(4, 3, &mut rng);
        let up = random(4, 5, &mut rng);
        let mut layer = Linear::init(3, 5, &mut rng);
        layer.bias = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let loss = |l: &Linear, x: &Array2<f64>| (l.forward(x) * &up).sum();
        let mut grad = Linear::zeros(3, 5);
        let dx = layer.backward(&x, &up, &mut grad);
        let h = 1e-6;
        let (mut p, mut m) = (layer.clone(), layer.clone());
        p.weight[(1, 2)] += h;
        m.weight[(1, 2)] -= h;
        let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
        assert!(rel_err(fd, grad.weight[(1, 2)]) < 1e-7);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[(3, 0)] += h;
        xm[(3, 0)] -= h;
        let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
        assert!(rel_err(fd, dx[(3, 0)]) < 1e-7);
        assert!(rel_err(up.column(4).sum(), grad.bias[4]) < 1e-12);
    }
}
