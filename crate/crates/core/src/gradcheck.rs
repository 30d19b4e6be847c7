//! Finite-difference verification of analytic gradients.
//!
//! The checker evaluates a scalar-valued builder twice per input element
//! (central differences, 64-bit) and compares against the gradient from one
//! backward pass. It only ever drives forward passes for the numeric side,
//! so it stays independent of the backward implementation it audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{AgeModel, BackboneConfig, SliceSeqAgeNet, Volumetric3DNet};
use crate::nn::{
    bilstm, lstm_step, lstm_zero_state, seq_avg_pool, BasicBlock2d, BasicBlock3d, Conv2dLayer,
    Conv3dLayer, LinearLayer, LstmParams, LstmState, Param,
};
use crate::tensor::{Graph, ReduceKind, Tensor, TensorError, TensorResult, Var};

/// Perturbation used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Largest acceptable relative error between analytic and numeric gradients.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Result of checking one operation, layer, or model instance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> TensorResult<Vec<f64>>
where
    F: FnMut(&[f64]) -> TensorResult<f64>,
{
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let plus = f(&xp)?;
        xp[i] = x[i] - h;
        let minus = f(&xp)?;
        xp[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares a provided analytic gradient against central differences of `f`.
/// Tests use this entry point to confirm that a deliberately wrong gradient
/// is flagged.
pub fn check_against<F>(
    name: &str,
    analytic: &[f64],
    f: F,
    x: &[f64],
    h: f64,
    tol: f64,
) -> TensorResult<CheckOutcome>
where
    F: FnMut(&[f64]) -> TensorResult<f64>,
{
    let numeric = central_difference(f, x, h)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: max_rel_error(analytic, &numeric),
        tol,
    })
}

/// Checks a scalar-valued graph builder. `build` receives the flat input
/// vector, records leaves on the graph, and returns the loss together with
/// the leaves in the order their elements appear in the input vector.
pub fn check_fn<F>(name: &str, x0: &[f64], build: F) -> TensorResult<CheckOutcome>
where
    F: for<'g> Fn(&'g Graph<f64>, &[f64]) -> TensorResult<(Var<'g, f64>, Vec<Var<'g, f64>>)>,
{
    let graph = Graph::new();
    let (loss, leaves) = build(&graph, x0)?;
    graph.backward(loss)?;
    let mut analytic = Vec::with_capacity(x0.len());
    for leaf in leaves {
        match graph.grad(leaf) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(leaf.value().numel())),
        }
    }
    if analytic.len() != x0.len() {
        return Err(TensorError::InvalidArg {
            arg: "build",
            detail: format!(
                "leaves cover {} elements but input has {}",
                analytic.len(),
                x0.len()
            ),
        });
    }
    check_against(
        name,
        &analytic,
        |x| {
            let g = Graph::new();
            let (loss, _) = build(&g, x)?;
            loss.value().item()
        },
        x0,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

/// One gradient to read back after the checked builder runs: either a plain
/// leaf var or the name of a bound parameter with its element count.
pub enum CheckHandle<'g> {
    Var(Var<'g, f64>),
    Bound(String, usize),
}

/// Like [`check_fn`], for builders whose trainable values enter the graph
/// as named bound leaves (layer and model parameters). Handles must cover
/// the input vector in order.
pub fn check_fn_mixed<F>(name: &str, x0: &[f64], build: F) -> TensorResult<CheckOutcome>
where
    F: for<'g> Fn(&'g Graph<f64>, &[f64]) -> TensorResult<(Var<'g, f64>, Vec<CheckHandle<'g>>)>,
{
    let graph = Graph::new();
    let (loss, handles) = build(&graph, x0)?;
    graph.backward(loss)?;
    let mut analytic = Vec::with_capacity(x0.len());
    for handle in handles {
        match handle {
            CheckHandle::Var(v) => match graph.grad(v) {
                Some(t) => analytic.extend_from_slice(t.data()),
                None => analytic.extend(std::iter::repeat(0.0).take(v.value().numel())),
            },
            CheckHandle::Bound(bound, numel) => match graph.binding_grad(&bound) {
                Some(t) => analytic.extend_from_slice(t.data()),
                None => analytic.extend(std::iter::repeat(0.0).take(numel)),
            },
        }
    }
    if analytic.len() != x0.len() {
        return Err(TensorError::InvalidArg {
            arg: "build",
            detail: format!(
                "handles cover {} elements but input has {}",
                analytic.len(),
                x0.len()
            ),
        });
    }
    check_against(
        name,
        &analytic,
        |x| {
            let g = Graph::new();
            let (loss, _) = build(&g, x)?;
            loss.value().item()
        },
        x0,
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

/// Overwrites a parameter's value from the front of `x` and returns the
/// element count consumed.
pub(crate) fn load_param(p: &mut Param<f64>, x: &[f64]) -> TensorResult<usize> {
    let n = p.numel();
    let shape = p.value().shape().to_vec();
    p.set_value(Tensor::from_vec(&shape, x[..n].to_vec())?)?;
    Ok(n)
}

/// Loads every parameter in order from `x`, returning the consumed length
/// and one bound handle per parameter.
pub(crate) fn load_params<'g>(
    params: Vec<&mut Param<f64>>,
    x: &[f64],
) -> TensorResult<(usize, Vec<CheckHandle<'g>>)> {
    let mut off = 0;
    let mut handles = Vec::new();
    for p in params {
        off += load_param(p, &x[off..])?;
        handles.push(CheckHandle::Bound(p.name().to_string(), p.numel()));
    }
    Ok((off, handles))
}

/// Initial parameter values flattened in declaration order.
pub(crate) fn flat_params(params: Vec<&Param<f64>>) -> Vec<f64> {
    params
        .iter()
        .flat_map(|p| p.value().data().iter().copied())
        .collect()
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform samples kept away from zero, for kinked ops (ReLU, abs, MAE).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Projects a tensor-valued output to a scalar with fixed random weights so
/// every output element influences the loss.
fn project<'g>(
    g: &'g Graph<f64>,
    out: Var<'g, f64>,
    rng: &mut ChaCha8Rng,
) -> TensorResult<Var<'g, f64>> {
    let shape = out.shape();
    let n: usize = shape.iter().product::<usize>().max(1);
    let weights = uniform(rng, n, -1.0, 1.0);
    let r = g.constant(Tensor::from_vec(&shape, weights)?)?;
    out.mul(r)?.sum_all()
}

fn leaf<'g>(g: &'g Graph<f64>, shape: &[usize], data: &[f64]) -> TensorResult<Var<'g, f64>> {
    g.leaf(Tensor::from_vec(shape, data.to_vec())?, true)
}

/// Gradient checks for every differentiable graph operation, five random
/// instances each. Stride and padding combinations cover {1,2} x {0,1}.
pub fn op_checks() -> TensorResult<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        for (op, kinked) in [
            ("sigmoid", false),
            ("tanh", false),
            ("relu", true),
            ("abs", true),
            ("neg", false),
            ("scale", false),
        ] {
            let x0 = if kinked {
                away_from_zero(&mut rng, 12)
            } else {
                uniform(&mut rng, 12, -2.0, 2.0)
            };
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.{op} #{seed}"), &x0, |g, x| {
                let v = leaf(g, &[3, 4], x)?;
                let y = match op {
                    "sigmoid" => v.sigmoid()?,
                    "tanh" => v.tanh()?,
                    "relu" => v.relu()?,
                    "abs" => v.abs()?,
                    "neg" => v.neg()?,
                    _ => v.scale(1.7)?,
                };
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![v]))
            })?);
        }

        for op in ["add", "sub", "mul"] {
            let mut x0 = uniform(&mut rng, 8, -2.0, 2.0);
            x0.extend(uniform(&mut rng, 8, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.{op} #{seed}"), &x0, |g, x| {
                let a = leaf(g, &[2, 4], &x[..8])?;
                let b = leaf(g, &[2, 4], &x[8..])?;
                let y = match op {
                    "add" => a.add(b)?,
                    "sub" => a.sub(b)?,
                    _ => a.mul(b)?,
                };
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![a, b]))
            })?);
        }

        {
            let mut x0 = uniform(&mut rng, 12, -2.0, 2.0);
            x0.extend(uniform(&mut rng, 4, -1.0, 1.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.bias_add #{seed}"), &x0, |g, x| {
                let a = leaf(g, &[3, 4], &x[..12])?;
                let b = leaf(g, &[4], &x[12..])?;
                let y = a.add(b)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![a, b]))
            })?);
        }

        {
            let mut x0 = uniform(&mut rng, 6, -2.0, 2.0);
            x0.extend(uniform(&mut rng, 12, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.matmul #{seed}"), &x0, |g, x| {
                let a = leaf(g, &[2, 3], &x[..6])?;
                let b = leaf(g, &[3, 4], &x[6..])?;
                let y = a.matmul(b)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![a, b]))
            })?);
        }

        {
            let mut x0 = uniform(&mut rng, 12, -2.0, 2.0);
            x0.extend(uniform(&mut rng, 4, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.matvec #{seed}"), &x0, |g, x| {
                let a = leaf(g, &[3, 4], &x[..12])?;
                let v = leaf(g, &[4], &x[12..])?;
                let y = a.matvec(v)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![a, v]))
            })?);
        }

        for stride in [1usize, 2] {
            for pad in [0usize, 1] {
                let nx = 2 * 5 * 5;
                let nw = 3 * 2 * 3 * 3;
                let mut x0 = uniform(&mut rng, nx, -2.0, 2.0);
                x0.extend(uniform(&mut rng, nw, -1.0, 1.0));
                let proj_seed = rng.gen::<u64>();
                results.push(check_fn(
                    &format!("op.conv2d s{stride} p{pad} #{seed}"),
                    &x0,
                    |g, x| {
                        let xin = leaf(g, &[2, 5, 5], &x[..nx])?;
                        let w = leaf(g, &[3, 2, 3, 3], &x[nx..])?;
                        let y = xin.conv2d(w, stride, pad)?;
                        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                        Ok((project(g, y, &mut prng)?, vec![xin, w]))
                    },
                )?);

                let nx3 = 2 * 4 * 4 * 4;
                let nw3 = 2 * 2 * 3 * 3 * 3;
                let mut x1 = uniform(&mut rng, nx3, -2.0, 2.0);
                x1.extend(uniform(&mut rng, nw3, -1.0, 1.0));
                let proj_seed = rng.gen::<u64>();
                results.push(check_fn(
                    &format!("op.conv3d s{stride} p{pad} #{seed}"),
                    &x1,
                    |g, x| {
                        let xin = leaf(g, &[2, 4, 4, 4], &x[..nx3])?;
                        let w = leaf(g, &[2, 2, 3, 3, 3], &x[nx3..])?;
                        let y = xin.conv3d(w, stride, pad)?;
                        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                        Ok((project(g, y, &mut prng)?, vec![xin, w]))
                    },
                )?);
            }
        }

        {
            // Distinct values spaced well apart keep the argmax stable
            // under the finite-difference perturbation.
            let n = 2 * 4 * 4;
            let mut vals: Vec<f64> = (0..n).map(|i| (i as f64) * 0.11 - 1.7).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.max_pool2d #{seed}"), &vals, |g, x| {
                let xin = leaf(g, &[2, 4, 4], x)?;
                let y = xin.max_pool2d(3, 2, 1)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![xin]))
            })?);

            let n3 = 1 * 4 * 4 * 4;
            let mut vals3: Vec<f64> = (0..n3).map(|i| (i as f64) * 0.07 - 2.1).collect();
            for i in (1..n3).rev() {
                let j = rng.gen_range(0..=i);
                vals3.swap(i, j);
            }
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.max_pool3d #{seed}"), &vals3, |g, x| {
                let xin = leaf(g, &[1, 4, 4, 4], x)?;
                let y = xin.max_pool3d(3, 2, 1)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![xin]))
            })?);
        }

        for (kind, label) in [
            (ReduceKind::Sum, "sum"),
            (ReduceKind::Mean, "mean"),
            (ReduceKind::Max, "max"),
        ] {
            let n = 2 * 3 * 4;
            let x0 = if kind == ReduceKind::Max {
                let mut vals: Vec<f64> = (0..n).map(|i| (i as f64) * 0.13 - 1.5).collect();
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    vals.swap(i, j);
                }
                vals
            } else {
                uniform(&mut rng, n, -2.0, 2.0)
            };
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(
                &format!("op.reduce_{label} #{seed}"),
                &x0,
                |g, x| {
                    let xin = leaf(g, &[2, 3, 4], x)?;
                    let y = xin.reduce(kind, &[1])?;
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, y, &mut prng)?, vec![xin]))
                },
            )?);
        }

        {
            let x0 = uniform(&mut rng, 3 * 8, -2.0, 2.0);
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(
                &format!("op.instance_norm #{seed}"),
                &x0,
                |g, x| {
                    let xin = leaf(g, &[3, 8], x)?;
                    let y = xin.instance_norm(1e-5)?;
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, y, &mut prng)?, vec![xin]))
                },
            )?);
        }

        {
            let mut x0 = uniform(&mut rng, 5, -2.0, 2.0);
            x0.extend(uniform(&mut rng, 3, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.concat #{seed}"), &x0, |g, x| {
                let a = leaf(g, &[5], &x[..5])?;
                let b = leaf(g, &[3], &x[5..])?;
                let y = g.concat(&[a, b])?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![a, b]))
            })?);
        }

        {
            let x0 = uniform(&mut rng, 12, -2.0, 2.0);
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("op.reshape #{seed}"), &x0, |g, x| {
                let xin = leaf(g, &[3, 4], x)?;
                let y = xin.reshape(&[2, 6])?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, vec![xin]))
            })?);
        }
    }
    Ok(results)
}

/// Gradient checks through each layer's full forward path, parameters and
/// inputs both perturbed. Layers are rebuilt from the flat vector on every
/// evaluation so the numeric side never reuses analytic state.
pub fn layer_checks() -> TensorResult<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);

        {
            let init = LinearLayer::<f64>::new("lin", 5, 3, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 5, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(&format!("layer.linear #{seed}"), &x0, |g, x| {
                let mut layer = LinearLayer::new("lin", 5, 3, &mut ChaCha8Rng::seed_from_u64(0));
                let (off, mut handles) = load_params(layer.params_mut(), x)?;
                let xin = leaf(g, &[5], &x[off..])?;
                handles.push(CheckHandle::Var(xin));
                let y = layer.forward(g, xin)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, handles))
            })?);
        }

        {
            let init = Conv2dLayer::<f64>::new("conv", 2, 3, 3, 2, 1, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 2 * 5 * 5, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(&format!("layer.conv2d #{seed}"), &x0, |g, x| {
                let mut layer =
                    Conv2dLayer::new("conv", 2, 3, 3, 2, 1, &mut ChaCha8Rng::seed_from_u64(0));
                let (off, mut handles) = load_params(layer.params_mut(), x)?;
                let xin = leaf(g, &[2, 5, 5], &x[off..])?;
                handles.push(CheckHandle::Var(xin));
                let y = layer.forward(g, xin)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, handles))
            })?);
        }

        {
            let init = Conv3dLayer::<f64>::new("conv", 2, 2, 3, 1, 1, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 2 * 4 * 4 * 4, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(&format!("layer.conv3d #{seed}"), &x0, |g, x| {
                let mut layer =
                    Conv3dLayer::new("conv", 2, 2, 3, 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
                let (off, mut handles) = load_params(layer.params_mut(), x)?;
                let xin = leaf(g, &[2, 4, 4, 4], &x[off..])?;
                handles.push(CheckHandle::Var(xin));
                let y = layer.forward(g, xin)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, y, &mut prng)?, handles))
            })?);
        }

        {
            let init = BasicBlock2d::<f64>::new("blk", 3, 3, 1, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 3 * 6 * 6, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(
                &format!("layer.basic_block2d identity #{seed}"),
                &x0,
                |g, x| {
                    let mut block =
                        BasicBlock2d::new("blk", 3, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
                    let (off, mut handles) = load_params(block.params_mut(), x)?;
                    let xin = leaf(g, &[3, 6, 6], &x[off..])?;
                    handles.push(CheckHandle::Var(xin));
                    let y = block.forward(g, xin)?;
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, y, &mut prng)?, handles))
                },
            )?);
        }

        {
            let init = BasicBlock2d::<f64>::new("blk", 2, 4, 2, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 2 * 6 * 6, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(
                &format!("layer.basic_block2d strided #{seed}"),
                &x0,
                |g, x| {
                    let mut block =
                        BasicBlock2d::new("blk", 2, 4, 2, &mut ChaCha8Rng::seed_from_u64(0));
                    let (off, mut handles) = load_params(block.params_mut(), x)?;
                    let xin = leaf(g, &[2, 6, 6], &x[off..])?;
                    handles.push(CheckHandle::Var(xin));
                    let y = block.forward(g, xin)?;
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, y, &mut prng)?, handles))
                },
            )?);
        }

        {
            let init = BasicBlock3d::<f64>::new("blk", 2, 3, 2, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 2 * 5 * 5 * 5, -2.0, 2.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(
                &format!("layer.basic_block3d strided #{seed}"),
                &x0,
                |g, x| {
                    let mut block =
                        BasicBlock3d::new("blk", 2, 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
                    let (off, mut handles) = load_params(block.params_mut(), x)?;
                    let xin = leaf(g, &[2, 5, 5, 5], &x[off..])?;
                    handles.push(CheckHandle::Var(xin));
                    let y = block.forward(g, xin)?;
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, y, &mut prng)?, handles))
                },
            )?);
        }

        {
            let init = LstmParams::<f64>::new("cell", 3, 4, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 3, -1.0, 1.0));
            x0.extend(uniform(&mut rng, 4, -0.5, 0.5));
            x0.extend(uniform(&mut rng, 4, -0.5, 0.5));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(&format!("layer.lstm_step #{seed}"), &x0, |g, x| {
                let mut cell = LstmParams::new("cell", 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
                let (off, mut handles) = load_params(cell.params_mut(), x)?;
                let xin = leaf(g, &[3], &x[off..off + 3])?;
                let h0 = leaf(g, &[4], &x[off + 3..off + 7])?;
                let c0 = leaf(g, &[4], &x[off + 7..])?;
                handles.push(CheckHandle::Var(xin));
                handles.push(CheckHandle::Var(h0));
                handles.push(CheckHandle::Var(c0));
                let state = lstm_step(g, &cell, xin, LstmState { h: h0, c: c0 })?;
                let out = g.concat(&[state.h, state.c])?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, out, &mut prng)?, handles))
            })?);
        }

        {
            let fwd0 = LstmParams::<f64>::new("fwd", 2, 3, &mut rng);
            let bwd0 = LstmParams::<f64>::new("bwd", 2, 3, &mut rng);
            let mut x0 = flat_params(fwd0.params());
            x0.extend(flat_params(bwd0.params()));
            x0.extend(uniform(&mut rng, 3 * 2, -1.0, 1.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(&format!("layer.bilstm #{seed}"), &x0, |g, x| {
                let mut fwd = LstmParams::new("fwd", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
                let mut bwd = LstmParams::new("bwd", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
                let (off_f, mut handles) = load_params(fwd.params_mut(), x)?;
                let (off_b, more) = load_params(bwd.params_mut(), &x[off_f..])?;
                handles.extend(more);
                let mut off = off_f + off_b;
                let mut inputs = Vec::new();
                for _ in 0..3 {
                    let v = leaf(g, &[2], &x[off..off + 2])?;
                    handles.push(CheckHandle::Var(v));
                    inputs.push(v);
                    off += 2;
                }
                let outs = bilstm(g, &inputs, &fwd, &bwd)?;
                let all = g.concat(&outs)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, all, &mut prng)?, handles))
            })?);
        }

        {
            let x0 = uniform(&mut rng, 5 * 3, -2.0, 2.0);
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn(&format!("layer.seq_avg_pool #{seed}"), &x0, |g, x| {
                let feats: Vec<Var<'_, f64>> = (0..5)
                    .map(|i| leaf(g, &[3], &x[i * 3..(i + 1) * 3]))
                    .collect::<TensorResult<_>>()?;
                let pooled = seq_avg_pool(g, &feats, 2)?;
                let all = g.concat(&pooled)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                Ok((project(g, all, &mut prng)?, feats))
            })?);
        }

        // Hidden-state chain over several steps, checking gradient flow
        // through time rather than a single cell application.
        {
            let init = LstmParams::<f64>::new("chain", 2, 2, &mut rng);
            let mut x0 = flat_params(init.params());
            x0.extend(uniform(&mut rng, 4 * 2, -1.0, 1.0));
            let proj_seed = rng.gen::<u64>();
            results.push(check_fn_mixed(
                &format!("layer.lstm_through_time #{seed}"),
                &x0,
                |g, x| {
                    let mut cell =
                        LstmParams::new("chain", 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
                    let (mut off, mut handles) = load_params(cell.params_mut(), x)?;
                    let mut state = lstm_zero_state(g, 2)?;
                    for _ in 0..4 {
                        let v = leaf(g, &[2], &x[off..off + 2])?;
                        handles.push(CheckHandle::Var(v));
                        state = lstm_step(g, &cell, v, state)?;
                        off += 2;
                    }
                    let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
                    Ok((project(g, state.h, &mut prng)?, handles))
                },
            )?);
        }
    }
    Ok(results)
}

fn model_err(e: crate::models::ModelError) -> TensorError {
    TensorError::InvalidArg {
        arg: "model",
        detail: e.to_string(),
    }
}

/// Gradient checks through both full architectures on miniature
/// configurations: every parameter perturbed, inputs held fixed.
pub fn model_checks() -> TensorResult<Vec<CheckOutcome>> {
    let mini = |stem_pool: bool| BackboneConfig {
        in_channels: 1,
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: if stem_pool { 1 } else { 2 },
        stem_pool,
        stage_widths: vec![4],
        blocks_per_stage: 1,
    };
    let fixed_slices = |n: usize, hw: usize, seed: u64| -> Vec<Tensor<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(&[1, hw, hw], |_| r.gen_range(-1.0..1.0)))
            .collect()
    };

    let mut results = Vec::new();
    for seed in 0..2u64 {
        {
            let init =
                SliceSeqAgeNet::<f64>::new(&mini(false), 4, 2, 3, &mut ChaCha8Rng::seed_from_u64(200 + seed))
                    .map_err(model_err)?;
            let x0 = flat_params(init.params());
            results.push(check_fn_mixed(
                &format!("model.sliceseq #{seed}"),
                &x0,
                |g, x| {
                    let mut net = SliceSeqAgeNet::<f64>::new(
                        &mini(false),
                        4,
                        2,
                        3,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    )
                    .map_err(model_err)?;
                    let (_, handles) = load_params(net.params_mut(), x)?;
                    let out = net.predict(g, &fixed_slices(4, 6, 77 + seed)).map_err(model_err)?;
                    Ok((out.sum_all()?, handles))
                },
            )?);
        }

        {
            let init =
                SliceSeqAgeNet::<f64>::new(&mini(true), 4, 2, 3, &mut ChaCha8Rng::seed_from_u64(210 + seed))
                    .map_err(model_err)?;
            let x0 = flat_params(init.params());
            results.push(check_fn_mixed(
                &format!("model.sliceseq pooled stem #{seed}"),
                &x0,
                |g, x| {
                    let mut net = SliceSeqAgeNet::<f64>::new(
                        &mini(true),
                        4,
                        2,
                        3,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    )
                    .map_err(model_err)?;
                    let (_, handles) = load_params(net.params_mut(), x)?;
                    let out = net.predict(g, &fixed_slices(4, 6, 87 + seed)).map_err(model_err)?;
                    Ok((out.sum_all()?, handles))
                },
            )?);
        }

        {
            let init =
                Volumetric3DNet::<f64>::new(&mini(false), 4, &mut ChaCha8Rng::seed_from_u64(220 + seed))
                    .map_err(model_err)?;
            let x0 = flat_params(init.params());
            results.push(check_fn_mixed(&format!("model.vol3d #{seed}"), &x0, |g, x| {
                let mut net =
                    Volumetric3DNet::<f64>::new(&mini(false), 4, &mut ChaCha8Rng::seed_from_u64(0))
                        .map_err(model_err)?;
                let (_, handles) = load_params(net.params_mut(), x)?;
                let out = net.predict(g, &fixed_slices(4, 6, 97 + seed)).map_err(model_err)?;
                Ok((out.sum_all()?, handles))
            })?);
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        let results = op_checks().unwrap();
        assert!(results.len() >= 5 * 20);
        for r in &results {
            assert!(
                r.passed(),
                "{} failed: max rel err {:.3e}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn every_layer_gradient_matches_finite_differences() {
        let results = layer_checks().unwrap();
        assert!(results.len() >= 3 * 10);
        for r in &results {
            assert!(
                r.passed(),
                "{} failed: max rel err {:.3e}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn every_model_gradient_matches_finite_differences() {
        let results = model_checks().unwrap();
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(
                r.passed(),
                "{} failed: max rel err {:.3e}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x0 = vec![0.7, -1.3, 0.4];
        let f = |x: &[f64]| -> TensorResult<f64> {
            Ok(x.iter().map(|v| v * v).sum())
        };
        let good: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let mut bad = good.clone();
        bad[1] *= 1.1;
        let ok = check_against("control.good", &good, f, &x0, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(ok.passed());
        let flagged =
            check_against("control.bad", &bad, f, &x0, DEFAULT_STEP, DEFAULT_TOL).unwrap();
        assert!(!flagged.passed());
    }

    #[test]
    fn check_fn_rejects_leaves_that_do_not_cover_the_input() {
        let err = check_fn("bad", &[1.0, 2.0], |g, x| {
            let v = g
                .leaf(Tensor::from_vec(&[1], vec![x[0]]).unwrap(), true)
                .unwrap();
            Ok((v.sum_all()?, vec![v]))
        })
        .unwrap_err();
        assert!(matches!(err, TensorError::InvalidArg { .. }));
    }
}
