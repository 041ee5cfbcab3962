//! Finite-difference verification of every differentiable op, the NCE loss
//! and a small encoder-decoder, all on the f64 tape.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::contrast::nce_loss_graph;
use crate::encoder::{self, EncoderDecoderConfig};
use crate::error::{bail, Result};
use crate::tensor::{Bound, Graph, Padding, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients below this magnitude (analytic and numeric) count as agreeing.
pub const ABS_FLOOR: f64 = 1e-8;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub coordinates: usize,
    /// Coordinates dropped because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub ops: Vec<OpCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Scalar objective `Σ out ⊙ r` for a fixed random `r` (or `out` itself when
/// the op already yields a scalar).
fn objective(g: &mut Graph<f64>, inputs: &[Tensor<f64>], build: &Build, mix_seed: u64) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(g, &vars)?;
    if g.value(out).len() == 1 {
        return Ok((g.reshape(out, &[])?, vars));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed);
    let r = randn(&mut rng, g.shape(out));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok((g.sum(prod)?, vars))
}

fn eval(inputs: &[Tensor<f64>], build: &Build, mix_seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let (l, _) = objective(&mut g, inputs, build, mix_seed)?;
    Ok((g.value(l)[0], g.kink_pattern()))
}

/// Compares analytic gradients with central differences on `n_coords`
/// random input coordinates. Coordinates whose perturbation crosses a kink
/// are replaced by fresh ones while any remain.
pub fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build, n_coords: usize, rng: &mut ChaCha8Rng) -> Result<OpCheck> {
    let mix_seed = rng.random();
    let mut g = Graph::new();
    let (loss, vars) = objective(&mut g, &inputs, build, mix_seed)?;
    let grads = g.backward(loss)?;
    let base_kinks = g.kink_pattern();
    let analytic: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| {
            grads
                .get(vars[i])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    if total < n_coords {
        bail!(Usage, "{name}: only {total} input coordinates for {n_coords} checks");
    }
    let mut max_err = 0.0f64;
    let mut skipped = 0;
    let mut checked = 0;
    let mut work = inputs.clone();
    for flat in index::sample(rng, total, total) {
        if checked == n_coords {
            break;
        }
        let (mut i, mut j) = (0, flat);
        while j >= sizes[i] {
            j -= sizes[i];
            i += 1;
        }
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + STEP;
        let (lp, kp) = eval(&work, build, mix_seed)?;
        work[i].data_mut()[j] = orig - STEP;
        let (lm, km) = eval(&work, build, mix_seed)?;
        work[i].data_mut()[j] = orig;
        if kp != base_kinks || km != base_kinks {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        max_err = max_err.max(rel_error(analytic[i][j], numeric));
        checked += 1;
    }
    Ok(OpCheck {
        name: name.into(),
        coordinates: checked,
        skipped,
        max_rel_error: max_err,
    })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Small network used for the end-to-end check.
pub fn tiny_network() -> EncoderDecoderConfig {
    EncoderDecoderConfig {
        stage_channels: vec![4, 4],
        stage_depth: 1,
        fpn_dim: 4,
        decoder_dim: 4,
        emb_dim: 4,
        out_stride: 2,
        groups: 2,
        padding: Default::default(),
    }
}

/// Runs the whole suite.
pub fn run(seed: u64, coords_per_op: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coords_per_op;
    let mut ops = Vec::new();
    let mut go = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        ops.push(check(name, inputs, build, n, rng)?);
        Ok(())
    };

    let m = [12, 10];
    go("add", vec![randn(&mut rng, &m), randn(&mut rng, &m)], &|g, v| g.add(v[0], v[1]), &mut rng)?;
    go("sub", vec![randn(&mut rng, &m), randn(&mut rng, &m)], &|g, v| g.sub(v[0], v[1]), &mut rng)?;
    go("mul", vec![randn(&mut rng, &m), randn(&mut rng, &m)], &|g, v| g.mul(v[0], v[1]), &mut rng)?;
    go("scalar_mul", vec![randn(&mut rng, &m)], &|g, v| g.scalar_mul(v[0], -1.7), &mut rng)?;
    go("relu", vec![randn(&mut rng, &m)], &|g, v| g.relu(v[0]), &mut rng)?;
    go("log", vec![positive(&mut rng, &m)], &|g, v| g.log(v[0]), &mut rng)?;
    go("exp", vec![randn(&mut rng, &m)], &|g, v| g.exp(v[0]), &mut rng)?;
    go("sum", vec![randn(&mut rng, &m)], &|g, v| {
        let s = g.sum(v[0])?;
        g.mul(s, s)
    }, &mut rng)?;
    go("mean", vec![randn(&mut rng, &m)], &|g, v| {
        let s = g.mean(v[0])?;
        g.exp(s)
    }, &mut rng)?;
    go("sum_axis", vec![randn(&mut rng, &[4, 5, 6])], &|g, v| g.sum_axis(v[0], 1), &mut rng)?;
    go("matmul", vec![randn(&mut rng, &[8, 9]), randn(&mut rng, &[9, 7])], &|g, v| g.matmul(v[0], v[1]), &mut rng)?;
    go("transpose", vec![randn(&mut rng, &m)], &|g, v| g.transpose(v[0]), &mut rng)?;
    go("reshape", vec![randn(&mut rng, &m)], &|g, v| g.reshape(v[0], &[4, 30]), &mut rng)?;
    go("l2_normalize", vec![randn(&mut rng, &m)], &|g, v| g.l2_normalize(v[0], 1, 1e-12), &mut rng)?;
    go("softmax", vec![randn(&mut rng, &m)], &|g, v| g.softmax(v[0], 1), &mut rng)?;
    go("log_softmax", vec![randn(&mut rng, &m)], &|g, v| g.log_softmax(v[0], 1), &mut rng)?;
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        go(
            &format!("conv2d_s{stride}_p{pad}"),
            vec![randn(&mut rng, &[3, 7, 7]), randn(&mut rng, &[4, 3, 3, 3]), randn(&mut rng, &[4])],
            &move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
            &mut rng,
        )?;
    }
    for (stride, side) in [(1, 6), (2, 7)] {
        go(
            &format!("conv2d_reflect_s{stride}"),
            vec![randn(&mut rng, &[3, side, side]), randn(&mut rng, &[4, 3, 3, 3]), randn(&mut rng, &[4])],
            &move |g, v| g.conv2d_padded(v[0], v[1], v[2], stride, 1, Padding::Reflect),
            &mut rng,
        )?;
    }
    go(
        "group_norm",
        vec![randn(&mut rng, &[6, 5, 4]), randn(&mut rng, &[6]), randn(&mut rng, &[6])],
        &|g, v| g.group_norm(v[0], 3, v[1], v[2], 1e-5),
        &mut rng,
    )?;
    go("upsample2x", vec![randn(&mut rng, &[3, 6, 7])], &|g, v| g.upsample2x(v[0]), &mut rng)?;
    go(
        "gather_pixels",
        vec![randn(&mut rng, &[5, 6, 6])],
        &|g, v| {
            let coords: Vec<(usize, usize)> = (0..30).map(|i| (i % 6, (i * 5) % 6)).collect();
            g.gather_pixels(v[0], &coords)
        },
        &mut rng,
    )?;
    go("concat_cols", vec![randn(&mut rng, &[10, 6]), randn(&mut rng, &[10, 5])], &|g, v| g.concat_cols(v[0], v[1]), &mut rng)?;
    go(
        "pick",
        vec![randn(&mut rng, &[20, 6])],
        &|g, v| {
            let idx: Vec<usize> = (0..20).map(|i| (i * 7) % 6).collect();
            g.pick(v[0], &idx)
        },
        &mut rng,
    )?;
    go("add_row_bias", vec![randn(&mut rng, &[15, 8]), randn(&mut rng, &[8])], &|g, v| g.add_row_bias(v[0], v[1]), &mut rng)?;
    let target: Vec<f64> = randn(&mut rng, &m).into_data();
    let t2 = target.clone();
    go(
        "huber_loss",
        vec![randn(&mut rng, &m)],
        &move |g, v| g.huber_loss(v[0], &target, 0.5),
        &mut rng,
    )?;
    go("l1_loss", vec![randn(&mut rng, &m)], &move |g, v| g.l1_loss(v[0], &t2), &mut rng)?;

    let (p, d, k) = (16, 8, 64);
    let pos: Vec<f32> = (0..p * d).map(|_| rng.sample(StandardNormal)).collect();
    let neg: Vec<f32> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
    go(
        "nce_loss",
        vec![randn(&mut rng, &[p, d])],
        &move |g, v| nce_loss_graph(g, v[0], &pos, &neg, 0.2, 10.0),
        &mut rng,
    )?;

    let cfg = tiny_network();
    let params = encoder::build(&cfg, &mut rng)?.cast::<f64>();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")).collect();
    inputs.push(Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0)));
    let pos: Vec<f32> = (0..6 * cfg.emb_dim).map(|_| rng.sample(StandardNormal)).collect();
    let neg: Vec<f32> = (0..32 * cfg.emb_dim).map(|_| rng.sample(StandardNormal)).collect();
    go(
        "encoder_decoder+nce",
        inputs,
        &move |g, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            let out = encoder::forward(g, &bound, &cfg, v[names.len()])?;
            let coords: Vec<(usize, usize)> = (0..6).map(|i| (i % 4, (i * 3) % 4)).collect();
            let anchors = g.gather_pixels(out, &coords)?;
            nce_loss_graph(g, anchors, &pos, &neg, 0.5, 1.0)
        },
        &mut rng,
    )?;

    let max_rel_error = ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        seed,
        passed: max_rel_error < TOLERANCE && ops.iter().all(|o| o.coordinates == coords_per_op),
        ops,
        max_rel_error,
    })
}
