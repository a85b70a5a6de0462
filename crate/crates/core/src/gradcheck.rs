//! Finite-difference verification of every analytic gradient in the pipeline.
//!
//! Each suite compares analytic derivatives with a fourth-order central
//! difference at a randomly perturbed parameter point. The pose suite
//! instead checks that the central-difference pose gradient itself
//! converges at second order as the step shrinks.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::CameraIntrinsics;
use crate::rayformer::{
    i2r_msa_backward, i2r_msa_forward, AttentionParams, BatchShape, NetworkConfig, Paths,
    RayFormer, SceneBounds,
};
use crate::renderer::{composite, composite_backward};
use crate::sci::{compress, generate_masks, render_ground_truth, SceneSpec};
use crate::training::{
    batch_gradients, loss_at_poses, plan_batch, pose_gradients, LossConfig, Problem, TrainConfig,
};

/// Relative error allowed between analytic and numerical derivatives.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Allowed band for the error ratio when the pose step is halved (ideal value 4).
pub const RICHARDSON_BAND: (f64, f64) = (3.0, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub suite: &'static str,
    pub tensor: String,
    pub checked: usize,
    /// Largest relative error, or for the pose suite the worst distance of the
    /// step-halving ratio from the allowed band.
    pub max_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.tensor.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = format!(
            "{:<10}  {:<width$}  {:>7}  {:>10}  result\n",
            "suite", "tensor", "checked", "max_err"
        );
        for r in &self.rows {
            let verdict = if r.pass {
                match r.suite {
                    "pose" => "pass, O(h^2)".to_string(),
                    _ => format!("pass, rel_err < {GRADIENT_TOLERANCE:e}"),
                }
            } else {
                "FAIL".to_string()
            };
            let _ = writeln!(
                s,
                "{:<10}  {:<width$}  {:>7}  {:>10.3e}  {verdict}",
                r.suite, r.tensor, r.checked, r.max_error
            );
        }
        s
    }
}

fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// Fourth-order central difference of `f` around zero offset.
fn derivative<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h))
}

fn row(suite: &'static str, tensor: impl Into<String>, errors: &[f64]) -> GradcheckRow {
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    GradcheckRow {
        suite,
        tensor: tensor.into(),
        checked: errors.len(),
        max_error,
        pass: !errors.is_empty() && max_error < GRADIENT_TOLERANCE,
    }
}

/// Volume compositing: densities and colors of a random ray.
pub fn check_composite(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = 8;
    let sigma: Vec<f64> = (0..l).map(|_| rng.random_range(0.1..3.0)).collect();
    let color: Vec<[f64; 3]> = (0..l)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let deltas: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..0.3)).collect();
    let up = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let out = composite(&sigma, &color, &deltas)?;
    let (ds, dc) = composite_backward(&sigma, &color, &deltas, &out, up);
    let value = |s: &[f64], c: &[[f64; 3]]| -> Result<f64> {
        let o = composite(s, c, &deltas)?;
        Ok(o.rgb[0] * up[0] + o.rgb[1] * up[1] + o.rgb[2] * up[2])
    };
    let h = 1e-4;
    let mut sigma_err = Vec::new();
    let mut color_err = Vec::new();
    for j in 0..l {
        let fd = derivative(
            |e| {
                let mut s = sigma.clone();
                s[j] += e;
                value(&s, &color)
            },
            h,
        )?;
        sigma_err.push(relative_error(fd, ds[j]));
        for c in 0..3 {
            let fd = derivative(
                |e| {
                    let mut col = color.clone();
                    col[j][c] += e;
                    value(&sigma, &col)
                },
                h,
            )?;
            color_err.push(relative_error(fd, dc[j][c]));
        }
    }
    Ok(vec![
        row("composite", "sigma", &sigma_err),
        row("composite", "color", &color_err),
    ])
}

fn projection(p: &mut AttentionParams, which: usize) -> &mut crate::nn::Linear {
    match which {
        0 => &mut p.query,
        1 => &mut p.key,
        2 => &mut p.value,
        _ => &mut p.output,
    }
}

/// Inter/intra-ray attention with respect to its input and all four projections.
pub fn check_attention(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, heads) = (8, 2);
    let shape = BatchShape::new(2, 4, 3);
    let params = AttentionParams::init(c, &mut rng);
    let x = Array2::from_shape_simple_fn((shape.tokens(), c), || rng.random_range(-1.0..1.0));
    let w = Array2::from_shape_simple_fn((shape.tokens(), c), || rng.random_range(-1.0..1.0));
    let value = |p: &AttentionParams, x: &Array2<f64>| -> Result<f64> {
        Ok((i2r_msa_forward(x, p, &shape, heads, Paths::BOTH)?.0 * &w).sum())
    };
    let (_, cache) = i2r_msa_forward(&x, &params, &shape, heads, Paths::BOTH)?;
    let mut grad = AttentionParams::zeros(c);
    let dx = i2r_msa_backward(&x, &params, &cache, &shape, heads, &w, &mut grad);
    let h = 1e-4;
    let mut rows = Vec::new();
    let mut errs = Vec::new();
    for _ in 0..8 {
        let idx = (rng.random_range(0..shape.tokens()), rng.random_range(0..c));
        let fd = derivative(
            |e| {
                let mut xe = x.clone();
                xe[idx] += e;
                value(&params, &xe)
            },
            h,
        )?;
        errs.push(relative_error(fd, dx[idx]));
    }
    rows.push(row("attention", "input", &errs));
    for (which, name) in ["query", "key", "value", "output"].iter().enumerate() {
        let mut errs = Vec::new();
        let analytic = projection(&mut grad.clone(), which).weight.clone();
        for _ in 0..6 {
            let idx = (rng.random_range(0..c), rng.random_range(0..c));
            let fd = derivative(
                |e| {
                    let mut p = params.clone();
                    projection(&mut p, which).weight[idx] += e;
                    value(&p, &x)
                },
                h,
            )?;
            errs.push(relative_error(fd, analytic[idx]));
        }
        rows.push(row("attention", format!("{name}.weight"), &errs));
    }
    Ok(rows)
}

/// Small two-frame capture of the default blob scene.
pub fn micro_problem(seed: u64) -> Result<Problem> {
    let intr = CameraIntrinsics::centered(8.0, 8, 8)?;
    let scene = SceneSpec::default();
    let frames = render_ground_truth(&scene, &intr, 2, 32, (0.5, 4.0))?;
    let masks = generate_masks(seed, 2, 8, 8, 0.5)?;
    let measurement = compress(&frames, &masks, 0.0, 0)?;
    Ok(Problem {
        measurement,
        masks,
        intrinsics: intr,
        near_far: (0.5, 4.0),
        ground_truth: Some(frames),
    })
}

fn micro_train() -> TrainConfig {
    TrainConfig {
        batch_windows: 2,
        window: [2, 2],
        l_samples: 4,
        ..Default::default()
    }
}

/// Every trainable network tensor through the full batch loss (measurement + TV).
pub fn check_network(
    network: &NetworkConfig,
    seed: u64,
    per_tensor: usize,
) -> Result<Vec<GradcheckRow>> {
    let problem = micro_problem(seed)?;
    let config = micro_train();
    let loss = LossConfig { lambda_tv: 0.05 };
    let mut model = RayFormer::new(*network, SceneBounds::default(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.params.tensors_mut() {
        if name.starts_with("pose.") {
            continue;
        }
        let scale = if name == "hash.tables" { 0.5 } else { 0.1 };
        t.iter_mut()
            .for_each(|v| *v += rng.random_range(-scale..scale));
    }
    let plan = plan_batch(&config, &problem, seed, 1)?;
    let grads = batch_gradients(&model, &problem, &config, &loss, &plan, false)?.grads;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, _, d)| (n, d.to_vec()))
        .collect();
    let h = 1e-4;
    let floor = 1e-6
        * analytic
            .iter()
            .filter(|(n, _)| !n.starts_with("pose."))
            .flat_map(|(_, g)| g.iter())
            .fold(1e-8f64, |m, v| m.max(v.abs()));
    let mut rows = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        if name.starts_with("pose.") {
            continue;
        }
        let mut significant: Vec<usize> = (0..g.len()).filter(|&k| g[k].abs() > floor).collect();
        if significant.is_empty() {
            significant = (0..g.len()).collect();
        }
        let mut picks: Vec<usize> = Vec::new();
        if let Some(&top) = significant
            .iter()
            .max_by(|&&a, &&b| g[a].abs().total_cmp(&g[b].abs()))
        {
            picks.push(top);
        }
        while picks.len() < per_tensor.min(significant.len()) {
            let k = significant[rng.random_range(0..significant.len())];
            if !picks.contains(&k) {
                picks.push(k);
            }
        }
        let mut errs = Vec::with_capacity(picks.len());
        for k in picks {
            let fd = derivative(
                |e| {
                    let mut m = model.clone();
                    m.params.tensors_mut()[ti].1[k] += e;
                    loss_at_poses(
                        &m,
                        &problem,
                        &config,
                        &loss,
                        &plan,
                        &m.params.pose_first,
                        &m.params.pose_last,
                        None,
                    )
                },
                h,
            )?;
            errs.push((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(floor));
        }
        rows.push(row("network", name.clone(), &errs));
    }
    Ok(rows)
}

/// Step-halving check of the central-difference pose gradient on the analytic blob scene.
pub fn check_pose_convergence(seed: u64) -> Result<GradcheckRow> {
    let problem = micro_problem(seed)?;
    let config = TrainConfig {
        window: [4, 4],
        l_samples: 16,
        stratified: false,
        ..micro_train()
    };
    let loss = LossConfig { lambda_tv: 0.0 };
    let mut scene = SceneSpec::default();
    scene.blobs.iter_mut().for_each(|b| b.center[0] += 0.05);
    let first = [0.0; 6];
    let last = [0.01, 0.02, -0.01, 0.05, 0.0, 0.02];
    let plan = plan_batch(&config, &problem, seed, 1)?;
    let f = |a: &[f64; 6], b: &[f64; 6]| {
        loss_at_poses(&scene, &problem, &config, &loss, &plan, a, b, None)
    };
    let g1 = pose_gradients(f, &first, &last, 4e-3)?;
    let g2 = pose_gradients(f, &first, &last, 2e-3)?;
    let g4 = pose_gradients(f, &first, &last, 1e-3)?;
    let (lo, hi) = RICHARDSON_BAND;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..6 {
        for (a, b, c) in [(g1.0[k], g2.0[k], g4.0[k]), (g1.1[k], g2.1[k], g4.1[k])] {
            let coarse = (a - b).abs();
            let fine = (b - c).abs();
            if coarse < 1e-9 {
                continue;
            }
            let ratio = coarse / fine.max(1e-300);
            worst = worst.max((lo - ratio).max(ratio - hi).max(0.0));
            checked += 1;
        }
    }
    Ok(GradcheckRow {
        suite: "pose",
        tensor: "pose.first+pose.last".into(),
        checked,
        max_error: worst,
        pass: checked > 0 && worst == 0.0,
    })
}

/// Runs every suite.
pub fn run_all(network: &NetworkConfig, seed: u64) -> Result<GradcheckReport> {
    let mut rows = check_composite(seed)?;
    rows.extend(check_attention(seed)?);
    rows.extend(check_network(network, seed, 4)?);
    rows.push(check_pose_convergence(seed)?);
    Ok(GradcheckReport { rows })
}
