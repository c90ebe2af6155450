//! Differentiating the backward pass: gradients of gradients and gradients
//! through optimization steps, validated against finite differences of
//! first-order gradients.

use fewmark_autodiff::check::{fd_grad, rel_err};
use fewmark_autodiff::{grad, grad_tensors, ops, sgd_step, ParamSet, Rng, Tape, Tensor};

fn smooth_scalar(x: &Tensor) -> Tensor {
    // Softmax over each channel, log-probability of fixed cells, averaged.
    // Smooth everywhere, so finite differences of its gradient are reliable.
    let y = ops::spatial_softmax(x).unwrap();
    let cells: Vec<(usize, usize)> = (0..x.dims()[0]).map(|c| (c % x.dims()[1], 0)).collect();
    let picked = ops::gather_cells(&y, &cells).unwrap();
    ops::mean(&ops::log(&picked).unwrap()).unwrap()
}

fn first_grad_at(x0: &[f64], dims: &[usize]) -> Vec<f64> {
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(dims, x0.to_vec()).unwrap());
    let loss = smooth_scalar(&x);
    grad_tensors(&loss, &[&x], false).unwrap()[0].data().to_vec()
}

#[test]
fn hessian_vector_product_matches_fd_of_gradient() {
    let dims = [2, 3, 3];
    let mut rng = Rng::new(77);
    let x0: Vec<f64> = (0..18).map(|_| rng.uniform_in(-1.5, 1.5)).collect();
    let dir: Vec<f64> = (0..18).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

    // Analytic: differentiate (grad . dir) a second time.
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(&dims, x0.clone()).unwrap());
    let loss = smooth_scalar(&x);
    let g = grad_tensors(&loss, &[&x], true).unwrap();
    let d = Tensor::from_vec(&dims, dir.clone()).unwrap();
    let gdot = ops::sum_all(&ops::mul(&g[0], &d).unwrap()).unwrap();
    let hvp = grad_tensors(&gdot, &[&x], false).unwrap();

    // Reference: central difference of the first-order gradient along dir.
    let eps = 1e-5;
    let shift = |sign: f64| -> Vec<f64> {
        let moved: Vec<f64> = x0.iter().zip(&dir).map(|(v, d)| v + sign * eps * d).collect();
        first_grad_at(&moved, &dims)
    };
    let (hi, lo) = (shift(1.0), shift(-1.0));
    let fd: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| (h - l) / (2.0 * eps)).collect();

    let err = rel_err(hvp[0].data(), &fd);
    assert!(err <= 1e-3, "hvp rel err {err:.3e}");
}

#[test]
fn full_second_derivative_matrix_matches_fd() {
    // Small enough to check the whole Hessian column by column.
    let dims = [1, 2, 2];
    let mut rng = Rng::new(3131);
    let x0: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    for col in 0..4 {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(&dims, x0.clone()).unwrap());
        let loss = smooth_scalar(&x);
        let g = grad_tensors(&loss, &[&x], true).unwrap();
        let mut e = vec![0.0; 4];
        e[col] = 1.0;
        let pick = ops::sum_all(&ops::mul(&g[0], &Tensor::from_vec(&dims, e).unwrap()).unwrap())
            .unwrap();
        let hcol = grad_tensors(&pick, &[&x], false).unwrap();

        let eps = 1e-5;
        let fd = fd_grad(&x0, eps, |x| {
            Ok(first_grad_at(x, &dims)[col])
        })
        .unwrap();
        let err = rel_err(hcol[0].data(), &fd);
        assert!(err <= 1e-3, "hessian column {col} rel err {err:.3e}");
    }
}

fn inner_loss(params: &ParamSet, anchor: &Tensor) -> Tensor {
    let w = params.get("w").unwrap();
    let wa = ops::mul(w, anchor).unwrap();
    let soft = ops::spatial_softmax(&ops::reshape(&wa, &[1, 2, 2]).unwrap()).unwrap();
    let picked = ops::gather_cells(&soft, &[(0, 1)]).unwrap();
    ops::scale(&ops::mean(&ops::log(&picked).unwrap()).unwrap(), -1.0).unwrap()
}

fn adapted_objective(theta: &ParamSet, anchor: &Tensor, probe: &Tensor, lr: f64) -> f64 {
    let tape = Tape::new();
    let watched = tape.watch_params(theta);
    let l1 = inner_loss(&watched, anchor);
    let g = grad(&l1, &watched, true).unwrap();
    let stepped = sgd_step(&watched, &g, lr).unwrap();
    let w1 = stepped.get("w").unwrap();
    ops::mean(&ops::mul(&ops::mul(w1, w1).unwrap(), probe).unwrap())
        .unwrap()
        .item()
        .unwrap()
}

#[test]
fn gradient_through_sgd_step_matches_fd() {
    // Objective: take one recorded descent step on an inner loss, then score
    // the stepped parameters; differentiate the whole thing with respect to
    // the starting parameters.
    let mut rng = Rng::new(99);
    let w0: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let anchor = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform_in(0.5, 1.5)).collect())
        .unwrap();
    let probe = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform_in(0.5, 1.5)).collect())
        .unwrap();
    let lr = 0.1;

    let mut theta = ParamSet::new();
    theta
        .insert("w", Tensor::from_vec(&[4], w0.clone()).unwrap())
        .unwrap();

    let tape = Tape::new();
    let watched = tape.watch_params(&theta);
    let l1 = inner_loss(&watched, &anchor);
    let g = grad(&l1, &watched, true).unwrap();
    let stepped = sgd_step(&watched, &g, lr).unwrap();
    let w1 = stepped.get("w").unwrap();
    let outer = ops::mean(&ops::mul(&ops::mul(w1, w1).unwrap(), &probe).unwrap()).unwrap();
    let analytic = grad(&outer, &watched, false).unwrap();

    let fd = fd_grad(&w0, 1e-5, |x| {
        let t = theta.from_flat(x)?;
        Ok(adapted_objective(&t, &anchor, &probe, lr))
    })
    .unwrap();

    let err = rel_err(analytic.get("w").unwrap().data(), &fd);
    assert!(err <= 1e-3, "sgd-step gradient rel err {err:.3e}");
}

#[test]
fn two_unrolled_steps_still_match_fd() {
    let mut rng = Rng::new(123);
    let w0: Vec<f64> = (0..4).map(|_| rng.uniform_in(-0.8, 0.8)).collect();
    let anchor = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform_in(0.5, 1.5)).collect())
        .unwrap();
    let probe = Tensor::from_vec(&[4], (0..4).map(|_| rng.uniform_in(0.5, 1.5)).collect())
        .unwrap();
    let lr = 0.2;
    let mut theta = ParamSet::new();
    theta
        .insert("w", Tensor::from_vec(&[4], w0.clone()).unwrap())
        .unwrap();

    let unrolled = |t: &ParamSet, outer: Option<&Tape>| -> (ParamSet, ParamSet) {
        let local;
        let tape = match outer {
            Some(t) => t,
            None => {
                local = Tape::new();
                &local
            }
        };
        let watched = tape.watch_params(t);
        let mut cur = watched.clone();
        for _ in 0..2 {
            let l = inner_loss(&cur, &anchor);
            let g = grad(&l, &cur, true).unwrap();
            cur = sgd_step(&cur, &g, lr).unwrap();
        }
        (cur, watched)
    };

    let outer_tape = Tape::new();
    let (adapted, watched) = unrolled(&theta, Some(&outer_tape));
    let w1 = adapted.get("w").unwrap();
    let outer = ops::mean(&ops::mul(&ops::mul(w1, w1).unwrap(), &probe).unwrap()).unwrap();
    let analytic = grad(&outer, &watched, false).unwrap();

    let fd = fd_grad(&w0, 1e-5, |x| {
        let t = theta.from_flat(x)?;
        let (adapted, _) = unrolled(&t, None);
        let w1 = adapted.get("w").unwrap();
        ops::mean(&ops::mul(&ops::mul(w1, w1)?, &probe)?)?.item()
    })
    .unwrap();

    let err = rel_err(analytic.get("w").unwrap().data(), &fd);
    assert!(err <= 1e-3, "two-step unroll rel err {err:.3e}");
}
