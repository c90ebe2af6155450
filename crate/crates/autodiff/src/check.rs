//! Finite-difference oracles for gradient testing.
//!
//! These evaluate the objective itself — never the tape — so they give an
//! independent reference for analytic gradients. Central differences with a
//! small step keep truncation error around `eps^2`.

use crate::error::Result;
use crate::ops;
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tape::{grad_tensors, Tape};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x0`, one objective evaluation pair
/// per coordinate.
pub fn fd_grad<F>(x0: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut g = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x.len() {
        let saved = x[i];
        x[i] = saved + eps;
        let hi = f(&x)?;
        x[i] = saved - eps;
        let lo = f(&x)?;
        x[i] = saved;
        g.push((hi - lo) / (2.0 * eps));
    }
    Ok(g)
}

/// Central-difference gradient over a parameter set, returned with the same
/// names and shapes.
pub fn fd_grad_params<F>(params: &ParamSet, eps: f64, mut f: F) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let flat = params.to_flat();
    let g = fd_grad(&flat, eps, |x| f(&params.from_flat(x)?))?;
    params.from_flat(&g)
}

/// Normwise relative error `|a - b| / max(|a|, |b|, floor)` — the usual
/// gradient-check statistic, robust when both sides are near zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err needs equal lengths");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// How a gradcheck case should sample raw input values.
#[derive(Clone, Copy)]
enum Draw {
    /// Uniform in `[-1, 1]`.
    Signed,
    /// Uniform in `[-1, 1]` pushed at least 0.15 away from zero (keeps finite
    /// differences away from the relu kink).
    AwayFromZero,
    /// Uniform in `[0.4, 2.4]` (safe for log and recip).
    Positive,
}

fn draw_tensor(rng: &mut Rng, dims: &[usize], draw: Draw) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| match draw {
            Draw::Signed => rng.uniform_in(-1.0, 1.0),
            Draw::AwayFromZero => {
                let x = rng.uniform_in(-1.0, 1.0);
                x + 0.15 * if x >= 0.0 { 1.0 } else { -1.0 }
            }
            Draw::Positive => rng.uniform_in(0.4, 2.4),
        })
        .collect();
    Tensor::from_vec(dims, data).expect("finite draws")
}

/// Checks one operation against central differences on the given inputs: the
/// probe-weighted sum of the output is differentiated analytically through the
/// tape and numerically by perturbing every input element.
///
/// Fails (with the case name and offending input) when the normwise relative
/// error exceeds `1e-4`.
pub fn gradcheck_case<F>(name: &str, inputs: &[Tensor], f: F) -> std::result::Result<(), String>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eps = 1e-5;
    let out0 = f(inputs).map_err(|e| format!("{name}: forward failed: {e}"))?;
    let mut rng = Rng::new(0x9C0D_E5EE_D000 ^ out0.numel() as u64);
    let probe = draw_tensor(&mut rng, out0.dims(), Draw::Positive);

    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let out = f(&watched).map_err(|e| format!("{name}: watched forward failed: {e}"))?;
    let loss = ops::sum_all(&ops::mul(&out, &probe).map_err(|e| format!("{name}: {e}"))?)
        .map_err(|e| format!("{name}: {e}"))?;
    let refs: Vec<&Tensor> = watched.iter().collect();
    let analytic =
        grad_tensors(&loss, &refs, false).map_err(|e| format!("{name}: backward failed: {e}"))?;

    for (k, input) in inputs.iter().enumerate() {
        let fd = fd_grad(input.data(), eps, |x| {
            let mut ins: Vec<Tensor> = inputs.to_vec();
            ins[k] = Tensor::from_vec(input.dims(), x.to_vec())?;
            ops::sum_all(&ops::mul(&f(&ins)?, &probe)?)?.item()
        })
        .map_err(|e| format!("{name}: fd eval failed: {e}"))?;
        let err = rel_err(analytic[k].data(), &fd);
        if err > 1e-4 {
            return Err(format!("{name}: input {k}: rel err {err:.3e} > 1e-4"));
        }
    }
    Ok(())
}

fn random_cells(rng: &mut Rng, n: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..n).map(|_| (rng.below(h), rng.below(w))).collect()
}

fn one_hot_target(rng: &mut Rng, n: usize, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; n * h * w];
    for ch in 0..n {
        let (r, c) = (rng.below(h), rng.below(w));
        data[(ch * h + r) * w + c] = 1.0;
    }
    Tensor::from_vec(&[n, h, w], data).expect("one-hot is finite")
}

/// Central-difference audit of every tensor operation (eps 1e-5, normwise
/// relative error at most 1e-4), each on several randomized shapes. Returns
/// the number of (operation, shape) cases checked, or the first failure.
pub fn run_primitive_gradchecks(seed: u64) -> std::result::Result<usize, String> {
    let mut rng = Rng::new(seed);
    let mut cases = 0usize;
    let mut run = |name: &str,
                   inputs: &[Tensor],
                   f: &dyn Fn(&[Tensor]) -> Result<Tensor>|
     -> std::result::Result<(), String> {
        gradcheck_case(name, inputs, f)?;
        cases += 1;
        Ok(())
    };

    for round in 0..3u64 {
        let r = &mut rng;
        let d1 = 1 + r.below(5);
        let d2 = 1 + r.below(4);
        let d3 = 1 + r.below(3);
        let tag = |op: &str| format!("{op}#{round}");

        let a = draw_tensor(r, &[d1, d2], Draw::Signed);
        let b = draw_tensor(r, &[d1, d2], Draw::Signed);
        run(&tag("add"), &[a.clone(), b.clone()], &|t| ops::add(&t[0], &t[1]))?;
        run(&tag("sub"), &[a.clone(), b.clone()], &|t| ops::sub(&t[0], &t[1]))?;
        run(&tag("mul"), &[a.clone(), b.clone()], &|t| ops::mul(&t[0], &t[1]))?;
        run(&tag("scale"), &[a.clone()], &|t| ops::scale(&t[0], -1.73))?;
        let s = draw_tensor(r, &[], Draw::Signed);
        run(&tag("mul_scalar"), &[a.clone(), s], &|t| {
            ops::mul_scalar(&t[0], &t[1])
        })?;

        let m = draw_tensor(r, &[d1, d2], Draw::Signed);
        let n = draw_tensor(r, &[d2, d3], Draw::Signed);
        run(&tag("matmul"), &[m.clone(), n], &|t| ops::matmul(&t[0], &t[1]))?;
        run(&tag("transpose"), &[m.clone()], &|t| ops::transpose(&t[0]))?;
        let flat = d1 * d2;
        run(&tag("reshape"), &[m], &move |t| ops::reshape(&t[0], &[flat]))?;

        run(
            &tag("relu"),
            &[draw_tensor(r, &[d1, d2], Draw::AwayFromZero)],
            &|t| ops::relu(&t[0]),
        )?;
        run(
            &tag("log"),
            &[draw_tensor(r, &[d2, d3], Draw::Positive)],
            &|t| ops::log(&t[0]),
        )?;
        run(
            &tag("recip"),
            &[draw_tensor(r, &[d1], Draw::Positive)],
            &|t| ops::recip(&t[0]),
        )?;

        let (ci, co) = (1 + r.below(3), 1 + r.below(3));
        let (h, w) = (3 + r.below(3), 3 + r.below(3));
        let x = draw_tensor(r, &[ci, h, w], Draw::Signed);
        let k = draw_tensor(r, &[co, ci, 3, 3], Draw::Signed);
        let g = draw_tensor(r, &[co, h, w], Draw::Signed);
        run(&tag("conv2d_same"), &[x.clone(), k.clone()], &|t| {
            ops::conv2d_same(&t[0], &t[1])
        })?;
        run(&tag("kernel_grad"), &[x.clone(), g], &|t| {
            ops::kernel_grad(&t[0], &t[1])
        })?;
        run(&tag("kernel_flip_swap"), &[k], &|t| ops::kernel_flip_swap(&t[0]))?;

        let (ph, pw) = (2 * (1 + r.below(2)), 2 * (1 + r.below(2)));
        run(
            &tag("avg_pool2"),
            &[draw_tensor(r, &[d3, ph, pw], Draw::Signed)],
            &|t| ops::avg_pool2(&t[0]),
        )?;
        run(
            &tag("avg_unpool2"),
            &[draw_tensor(r, &[d3, ph / 2 + 1, pw / 2], Draw::Signed)],
            &|t| ops::avg_unpool2(&t[0]),
        )?;

        let (bh, bw) = (1 + r.below(3), 1 + r.below(3));
        run(
            &tag("broadcast_spatial"),
            &[draw_tensor(r, &[d1], Draw::Signed)],
            &move |t| ops::broadcast_spatial(&t[0], bh, bw),
        )?;
        run(
            &tag("sum_spatial"),
            &[draw_tensor(r, &[d2, bh, bw], Draw::Signed)],
            &|t| ops::sum_spatial(&t[0]),
        )?;
        let rows = 1 + r.below(4);
        run(
            &tag("broadcast_rows"),
            &[draw_tensor(r, &[d2], Draw::Signed)],
            &move |t| ops::broadcast_rows(&t[0], rows),
        )?;
        run(
            &tag("sum_over_rows"),
            &[draw_tensor(r, &[rows, d1], Draw::Signed)],
            &|t| ops::sum_over_rows(&t[0]),
        )?;
        let dims_bc = [d1, d3];
        run(
            &tag("broadcast_scalar"),
            &[draw_tensor(r, &[], Draw::Signed)],
            &move |t| ops::broadcast_scalar(&t[0], &dims_bc),
        )?;
        run(
            &tag("sum_all"),
            &[draw_tensor(r, &[d1, d2, d3], Draw::Signed)],
            &|t| ops::sum_all(&t[0]),
        )?;
        run(
            &tag("mean"),
            &[draw_tensor(r, &[d2, d3], Draw::Signed)],
            &|t| ops::mean(&t[0]),
        )?;

        let src_rows = 2 + r.below(4);
        let picks: Vec<usize> = (0..(1 + r.below(4))).map(|_| r.below(src_rows)).collect();
        let gather_idx = picks.clone();
        run(
            &tag("gather_rows"),
            &[draw_tensor(r, &[src_rows, d2], Draw::Signed)],
            &move |t| ops::gather_rows(&t[0], &gather_idx),
        )?;
        let scatter_idx = picks.clone();
        let n_scatter = picks.len();
        run(
            &tag("scatter_rows"),
            &[draw_tensor(r, &[n_scatter, d3], Draw::Signed)],
            &move |t| ops::scatter_rows(&t[0], &scatter_idx, src_rows),
        )?;

        let cells = random_cells(r, d1, bh, bw);
        let gcells = cells.clone();
        run(
            &tag("gather_cells"),
            &[draw_tensor(r, &[d1, bh, bw], Draw::Signed)],
            &move |t| ops::gather_cells(&t[0], &gcells),
        )?;
        let scells = cells.clone();
        run(
            &tag("scatter_cells"),
            &[draw_tensor(r, &[d1], Draw::Signed)],
            &move |t| ops::scatter_cells(&t[0], &scells, bh, bw),
        )?;

        let (sh, sw) = (1 + r.below(3), 1 + r.below(3));
        run(
            &tag("spatial_softmax"),
            &[draw_tensor(r, &[d2, sh, sw], Draw::Signed)],
            &|t| ops::spatial_softmax(&t[0]),
        )?;

        let (th, tw) = (2 + r.below(2), 2 + r.below(2));
        let target = one_hot_target(r, d1, th, tw);
        let pred = draw_tensor(r, &[d1, th, tw], Draw::Positive);
        run(&tag("xent_heatmap"), &[pred], &move |t| {
            ops::xent_heatmap(&t[0], &target)
        })?;

        let p = draw_tensor(r, &[d2, d3], Draw::Signed);
        let q = draw_tensor(r, &[d2, d3], Draw::Signed);
        run(&tag("mse"), &[p, q], &|t| ops::mse(&t[0], &t[1]))?;
    }
    Ok(cases)
}
