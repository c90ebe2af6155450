//! Tensor operations. Every public function validates shapes, computes the
//! forward value, checks it for non-finite entries, and — when an input is on
//! an active tape — records a node so the backward sweep can reach it.
//!
//! Backward rules are expressed in terms of these same public operations, so a
//! sweep running with `create_graph` records ordinary nodes and higher-order
//! gradients come out of the one code path.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::{Node, Saved, Tape};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    MulScalar,
    Matmul,
    Transpose,
    Reshape,
    Relu,
    Log,
    Recip,
    Conv2dSame,
    KernelGrad,
    KernelFlipSwap,
    AvgPool2,
    AvgUnpool2,
    BroadcastSpatial,
    SumSpatial,
    BroadcastRows,
    SumOverRows,
    BroadcastScalar,
    SumAll,
    Mean,
    GatherRows(Rc<Vec<usize>>),
    ScatterRows(Rc<Vec<usize>>),
    GatherCells(Rc<Vec<(usize, usize)>>),
    ScatterCells(Rc<Vec<(usize, usize)>>),
    SpatialSoftmax,
}

fn name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Scale(_) => "scale",
        Op::MulScalar => "mul_scalar",
        Op::Matmul => "matmul",
        Op::Transpose => "transpose",
        Op::Reshape => "reshape",
        Op::Relu => "relu",
        Op::Log => "log",
        Op::Recip => "recip",
        Op::Conv2dSame => "conv2d_same",
        Op::KernelGrad => "kernel_grad",
        Op::KernelFlipSwap => "kernel_flip_swap",
        Op::AvgPool2 => "avg_pool2",
        Op::AvgUnpool2 => "avg_unpool2",
        Op::BroadcastSpatial => "broadcast_spatial",
        Op::SumSpatial => "sum_spatial",
        Op::BroadcastRows => "broadcast_rows",
        Op::SumOverRows => "sum_over_rows",
        Op::BroadcastScalar => "broadcast_scalar",
        Op::SumAll => "sum_all",
        Op::Mean => "mean",
        Op::GatherRows(_) => "gather_rows",
        Op::ScatterRows(_) => "scatter_rows",
        Op::GatherCells(_) => "gather_cells",
        Op::ScatterCells(_) => "scatter_cells",
        Op::SpatialSoftmax => "spatial_softmax",
    }
}

/// Finishes an operation: finiteness check, tape agreement check, and node
/// recording when some input is on an active tape.
fn finish(op: Op, inputs: &[&Tensor], dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
    let op_name = name(&op);
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: op_name });
    }
    let shape = Shape::new(dims)?;
    let data: Rc<[f64]> = data.into();

    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some(r) = &t.node {
            match &tape {
                None => tape = Some(r.tape.clone()),
                Some(existing) if !existing.same_tape(&r.tape) => {
                    return Err(Error::TapeMismatch { op: op_name });
                }
                Some(_) => {}
            }
        }
    }
    let recording = tape.as_ref().map_or(false, |t| t.is_recording());
    if !recording {
        return Ok(Tensor::from_parts(shape, data, None));
    }
    let tape = tape.expect("recording implies a tape");
    let saved = inputs
        .iter()
        .map(|t| Saved {
            shape: t.shape().clone(),
            data: t.data_rc(),
            node: t.node.as_ref().map(|r| r.id),
        })
        .collect();
    let id = tape.push_node(Node {
        op,
        inputs: saved,
        out_shape: shape.clone(),
        out_data: Rc::clone(&data),
    });
    Ok(Tensor::from_parts(
        shape,
        data,
        Some(crate::tape::NodeRef { tape, id }),
    ))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    Ok(())
}

fn want(op: &'static str, cond: bool, expected: &str, got: &Tensor) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::BadShape {
            op,
            expected: expected.to_string(),
            got: got.shape().clone(),
        })
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    finish(Op::Add, &[a, b], a.dims(), data)
}

/// Elementwise difference of two same-shape tensors.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    finish(Op::Sub, &[a, b], a.dims(), data)
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    finish(Op::Mul, &[a, b], a.dims(), data)
}

/// Multiplies every element by the plain constant `c`.
pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    if !c.is_finite() {
        return Err(Error::NonFinite { op: "scale" });
    }
    let data = a.data().iter().map(|x| x * c).collect();
    finish(Op::Scale(c), &[a], a.dims(), data)
}

/// Multiplies every element of `a` by the scalar tensor `s` (differentiable in
/// both operands).
pub fn mul_scalar(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    want("mul_scalar", s.rank() == 0, "scalar multiplier", s)?;
    let sv = s.data()[0];
    let data = a.data().iter().map(|x| x * sv).collect();
    finish(Op::MulScalar, &[a, s], a.dims(), data)
}

/// Matrix product of an `m x k` and a `k x n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    want("matmul", a.rank() == 2, "rank-2 left operand", a)?;
    want("matmul", b.rank() == 2, "rank-2 right operand", b)?;
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let out_row = i * n;
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let b_row = kk * n;
            for j in 0..n {
                data[out_row + j] += aik * bd[b_row + j];
            }
        }
    }
    finish(Op::Matmul, &[a, b], &[m, n], data)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    want("transpose", a.rank() == 2, "rank-2 operand", a)?;
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let ad = a.data();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = ad[i * n + j];
        }
    }
    finish(Op::Transpose, &[a], &[n, m], data)
}

/// Same elements viewed under a different shape with equal element count.
pub fn reshape(a: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let target = Shape::new(dims)?;
    if target.numel() != a.numel() {
        return Err(Error::ShapeMismatch {
            op: "reshape",
            left: a.shape().clone(),
            right: target,
        });
    }
    finish(Op::Reshape, &[a], dims, a.data().to_vec())
}

/// Elementwise `max(0, x)`.
pub fn relu(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    finish(Op::Relu, &[a], a.dims(), data)
}

/// Elementwise natural logarithm. Non-positive inputs surface as a
/// non-finite-result error.
pub fn log(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x.ln()).collect();
    finish(Op::Log, &[a], a.dims(), data)
}

/// Elementwise reciprocal. Zero inputs surface as a non-finite-result error.
pub fn recip(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| 1.0 / x).collect();
    finish(Op::Recip, &[a], a.dims(), data)
}

fn conv_dims(op: &'static str, x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    want(op, x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    want(
        op,
        k.rank() == 4 && k.dims()[2] == 3 && k.dims()[3] == 3,
        "rank-4 kernel (out, in, 3, 3)",
        k,
    )?;
    let (ci, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, kci) = (k.dims()[0], k.dims()[1]);
    if kci != ci {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().clone(),
            right: k.shape().clone(),
        });
    }
    Ok((co, ci, h, w))
}

/// 3x3 convolution with stride 1 and zero padding, preserving spatial size.
/// Input is `(c_in, h, w)`, kernel `(c_out, c_in, 3, 3)`, output
/// `(c_out, h, w)`.
pub fn conv2d_same(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (co, ci, h, w) = conv_dims("conv2d_same", x, k)?;
    let (xd, kd) = (x.data(), k.data());
    let mut data = vec![0.0; co * h * w];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..3 {
                let i_lo = if u == 0 { 1 } else { 0 };
                let i_hi = if u == 2 { h.saturating_sub(1) } else { h };
                for v in 0..3 {
                    let kv = kd[((o * ci + c) * 3 + u) * 3 + v];
                    let j_lo = if v == 0 { 1 } else { 0 };
                    let j_hi = if v == 2 { w.saturating_sub(1) } else { w };
                    for i in i_lo..i_hi {
                        let ii = i + u - 1;
                        let x_row = (c * h + ii) * w;
                        let o_row = (o * h + i) * w;
                        for j in j_lo..j_hi {
                            let jj = j + v - 1;
                            data[o_row + j] += kv * xd[x_row + jj];
                        }
                    }
                }
            }
        }
    }
    finish(Op::Conv2dSame, &[x, k], &[co, h, w], data)
}

/// Correlation of an input `(c_in, h, w)` with an upstream map `(c_out, h, w)`
/// into kernel shape `(c_out, c_in, 3, 3)` — the adjoint of `conv2d_same`
/// with respect to its kernel.
pub fn kernel_grad(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    want("kernel_grad", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    want("kernel_grad", g.rank() == 3, "rank-3 upstream (channels, h, w)", g)?;
    let (ci, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (co, gh, gw) = (g.dims()[0], g.dims()[1], g.dims()[2]);
    if (gh, gw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "kernel_grad",
            left: x.shape().clone(),
            right: g.shape().clone(),
        });
    }
    let (xd, gd) = (x.data(), g.data());
    let mut data = vec![0.0; co * ci * 9];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..3 {
                let i_lo = if u == 0 { 1 } else { 0 };
                let i_hi = if u == 2 { h.saturating_sub(1) } else { h };
                for v in 0..3 {
                    let j_lo = if v == 0 { 1 } else { 0 };
                    let j_hi = if v == 2 { w.saturating_sub(1) } else { w };
                    let mut acc = 0.0;
                    for i in i_lo..i_hi {
                        let ii = i + u - 1;
                        let g_row = (o * h + i) * w;
                        let x_row = (c * h + ii) * w;
                        for j in j_lo..j_hi {
                            acc += gd[g_row + j] * xd[x_row + j + v - 1];
                        }
                    }
                    data[((o * ci + c) * 3 + u) * 3 + v] = acc;
                }
            }
        }
    }
    finish(Op::KernelGrad, &[x, g], &[co, ci, 3, 3], data)
}

/// Swaps the channel axes of a 3x3 kernel and rotates each 3x3 slice by 180
/// degrees: `out[c, o, u, v] = k[o, c, 2-u, 2-v]`. Applying it twice returns
/// the original kernel.
pub fn kernel_flip_swap(k: &Tensor) -> Result<Tensor> {
    want(
        "kernel_flip_swap",
        k.rank() == 4 && k.dims()[2] == 3 && k.dims()[3] == 3,
        "rank-4 kernel (out, in, 3, 3)",
        k,
    )?;
    let (co, ci) = (k.dims()[0], k.dims()[1]);
    let kd = k.data();
    let mut data = vec![0.0; co * ci * 9];
    for o in 0..co {
        for c in 0..ci {
            for u in 0..3 {
                for v in 0..3 {
                    data[((c * co + o) * 3 + u) * 3 + v] =
                        kd[((o * ci + c) * 3 + (2 - u)) * 3 + (2 - v)];
                }
            }
        }
    }
    finish(Op::KernelFlipSwap, &[k], &[ci, co, 3, 3], data)
}

/// 2x2 average pooling with stride 2. Spatial dimensions must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    want("avg_pool2", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    want("avg_pool2", h % 2 == 0 && w % 2 == 0, "even spatial dims", x)?;
    let (hh, ww) = (h / 2, w / 2);
    let xd = x.data();
    let mut data = vec![0.0; c * hh * ww];
    for ch in 0..c {
        for i in 0..hh {
            let r0 = (ch * h + 2 * i) * w;
            let r1 = r0 + w;
            let out_row = (ch * hh + i) * ww;
            for j in 0..ww {
                let col = 2 * j;
                data[out_row + j] = 0.25 * (xd[r0 + col] + xd[r0 + col + 1] + xd[r1 + col] + xd[r1 + col + 1]);
            }
        }
    }
    finish(Op::AvgPool2, &[x], &[c, hh, ww], data)
}

/// Adjoint of `avg_pool2`: each input cell is spread over its 2x2 block with
/// weight 1/4.
pub fn avg_unpool2(x: &Tensor) -> Result<Tensor> {
    want("avg_unpool2", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    let (c, hh, ww) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (h, w) = (hh * 2, ww * 2);
    let xd = x.data();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..hh {
            let in_row = (ch * hh + i) * ww;
            let r0 = (ch * h + 2 * i) * w;
            let r1 = r0 + w;
            for j in 0..ww {
                let v = 0.25 * xd[in_row + j];
                let col = 2 * j;
                data[r0 + col] = v;
                data[r0 + col + 1] = v;
                data[r1 + col] = v;
                data[r1 + col + 1] = v;
            }
        }
    }
    finish(Op::AvgUnpool2, &[x], &[c, h, w], data)
}

/// Repeats a length-`c` vector over an `h x w` grid, giving `(c, h, w)`.
pub fn broadcast_spatial(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    want("broadcast_spatial", v.rank() == 1, "rank-1 input", v)?;
    let c = v.dims()[0];
    let vd = v.data();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        data[ch * h * w..(ch + 1) * h * w].fill(vd[ch]);
    }
    finish(Op::BroadcastSpatial, &[v], &[c, h, w], data)
}

/// Sums a `(c, h, w)` tensor over its spatial grid, giving a length-`c`
/// vector.
pub fn sum_spatial(x: &Tensor) -> Result<Tensor> {
    want("sum_spatial", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let xd = x.data();
    let data = (0..c)
        .map(|ch| xd[ch * h * w..(ch + 1) * h * w].iter().sum())
        .collect();
    finish(Op::SumSpatial, &[x], &[c], data)
}

/// Stacks `rows` copies of a length-`d` vector into a `rows x d` matrix.
pub fn broadcast_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    want("broadcast_rows", v.rank() == 1, "rank-1 input", v)?;
    let d = v.dims()[0];
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        data.extend_from_slice(v.data());
    }
    finish(Op::BroadcastRows, &[v], &[rows, d], data)
}

/// Sums an `n x d` matrix over its rows, giving a length-`d` vector.
pub fn sum_over_rows(x: &Tensor) -> Result<Tensor> {
    want("sum_over_rows", x.rank() == 2, "rank-2 input", x)?;
    let (n, d) = (x.dims()[0], x.dims()[1]);
    let xd = x.data();
    let mut data = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            data[j] += xd[i * d + j];
        }
    }
    finish(Op::SumOverRows, &[x], &[d], data)
}

/// Fills a tensor of shape `dims` with the value of the scalar `s`.
pub fn broadcast_scalar(s: &Tensor, dims: &[usize]) -> Result<Tensor> {
    want("broadcast_scalar", s.rank() == 0, "scalar input", s)?;
    let shape = Shape::new(dims)?;
    let data = vec![s.data()[0]; shape.numel()];
    finish(Op::BroadcastScalar, &[s], dims, data)
}

/// Sum of all elements, as a scalar.
pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let data = vec![x.data().iter().sum()];
    finish(Op::SumAll, &[x], &[], data)
}

/// Arithmetic mean of all elements, as a scalar.
pub fn mean(x: &Tensor) -> Result<Tensor> {
    want("mean", x.numel() > 0, "non-empty input", x)?;
    let n = x.numel() as f64;
    let data = vec![x.data().iter().sum::<f64>() / n];
    finish(Op::Mean, &[x], &[], data)
}

/// Selects slices along the first axis: `out[i] = x[indices[i]]`.
pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    want("gather_rows", x.rank() >= 1, "rank >= 1 input", x)?;
    let n = x.dims()[0];
    let slice = x.numel() / n.max(1);
    for &i in indices {
        if i >= n {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: i,
                size: n,
            });
        }
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(indices.len() * slice);
    for &i in indices {
        data.extend_from_slice(&xd[i * slice..(i + 1) * slice]);
    }
    let mut dims = x.dims().to_vec();
    dims[0] = indices.len();
    finish(Op::GatherRows(Rc::new(indices.to_vec())), &[x], &dims, data)
}

/// Adjoint of `gather_rows`: scatters slices of `x` into a zero tensor with
/// `rows` slices along the first axis, accumulating on duplicate indices.
pub fn scatter_rows(x: &Tensor, indices: &[usize], rows: usize) -> Result<Tensor> {
    want("scatter_rows", x.rank() >= 1, "rank >= 1 input", x)?;
    let n = x.dims()[0];
    if n != indices.len() {
        return Err(Error::BadShape {
            op: "scatter_rows",
            expected: format!("first dim {} to match index count", indices.len()),
            got: x.shape().clone(),
        });
    }
    let slice = x.numel() / n.max(1);
    for &i in indices {
        if i >= rows {
            return Err(Error::IndexOutOfRange {
                op: "scatter_rows",
                index: i,
                size: rows,
            });
        }
    }
    let xd = x.data();
    let mut data = vec![0.0; rows * slice];
    for (src, &dst) in indices.iter().enumerate() {
        let from = &xd[src * slice..(src + 1) * slice];
        let to = &mut data[dst * slice..(dst + 1) * slice];
        for (t, f) in to.iter_mut().zip(from) {
            *t += f;
        }
    }
    let mut dims = x.dims().to_vec();
    dims[0] = rows;
    finish(Op::ScatterRows(Rc::new(indices.to_vec())), &[x], &dims, data)
}

/// Picks one grid cell per channel: `out[n] = x[n, cells[n].0, cells[n].1]`.
pub fn gather_cells(x: &Tensor, cells: &[(usize, usize)]) -> Result<Tensor> {
    want("gather_cells", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    let (n, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if cells.len() != n {
        return Err(Error::BadShape {
            op: "gather_cells",
            expected: format!("{} channels to match cell count", cells.len()),
            got: x.shape().clone(),
        });
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    for (ch, &(r, c)) in cells.iter().enumerate() {
        if r >= h {
            return Err(Error::IndexOutOfRange {
                op: "gather_cells",
                index: r,
                size: h,
            });
        }
        if c >= w {
            return Err(Error::IndexOutOfRange {
                op: "gather_cells",
                index: c,
                size: w,
            });
        }
        data.push(xd[(ch * h + r) * w + c]);
    }
    finish(Op::GatherCells(Rc::new(cells.to_vec())), &[x], &[n], data)
}

/// Adjoint of `gather_cells`: writes `v[n]` into cell `cells[n]` of channel
/// `n` of an otherwise-zero `(n, h, w)` tensor.
pub fn scatter_cells(v: &Tensor, cells: &[(usize, usize)], h: usize, w: usize) -> Result<Tensor> {
    want("scatter_cells", v.rank() == 1, "rank-1 input", v)?;
    let n = v.dims()[0];
    if cells.len() != n {
        return Err(Error::BadShape {
            op: "scatter_cells",
            expected: format!("{} elements to match cell count", cells.len()),
            got: v.shape().clone(),
        });
    }
    let vd = v.data();
    let mut data = vec![0.0; n * h * w];
    for (ch, &(r, c)) in cells.iter().enumerate() {
        if r >= h {
            return Err(Error::IndexOutOfRange {
                op: "scatter_cells",
                index: r,
                size: h,
            });
        }
        if c >= w {
            return Err(Error::IndexOutOfRange {
                op: "scatter_cells",
                index: c,
                size: w,
            });
        }
        data[(ch * h + r) * w + c] = vd[ch];
    }
    finish(Op::ScatterCells(Rc::new(cells.to_vec())), &[v], &[n, h, w], data)
}

/// Softmax over the `h x w` grid of each channel independently. Every channel
/// of the output sums to 1.
pub fn spatial_softmax(x: &Tensor) -> Result<Tensor> {
    want("spatial_softmax", x.rank() == 3, "rank-3 input (channels, h, w)", x)?;
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    want("spatial_softmax", h * w > 0, "non-empty grid", x)?;
    let xd = x.data();
    let mut data = vec![0.0; c * h * w];
    let grid = h * w;
    for ch in 0..c {
        let src = &xd[ch * grid..(ch + 1) * grid];
        let out = &mut data[ch * grid..(ch + 1) * grid];
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &s) in out.iter_mut().zip(src) {
            let e = (s - m).exp();
            *o = e;
            total += e;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    finish(Op::SpatialSoftmax, &[x], &[c, h, w], data)
}

/// Extracts the hot cell of each channel of an exactly-one-hot `(n, h, w)`
/// tensor (entries 0.0 or 1.0, one 1 per channel).
pub fn one_hot_cells(target: &Tensor) -> Result<Vec<(usize, usize)>> {
    want("one_hot_cells", target.rank() == 3, "rank-3 target (channels, h, w)", target)?;
    let (n, h, w) = (target.dims()[0], target.dims()[1], target.dims()[2]);
    let td = target.data();
    let mut cells = Vec::with_capacity(n);
    for ch in 0..n {
        let mut hot: Option<(usize, usize)> = None;
        for r in 0..h {
            for c in 0..w {
                let v = td[(ch * h + r) * w + c];
                if v == 1.0 {
                    if hot.is_some() {
                        return Err(Error::NotOneHot {
                            op: "one_hot_cells",
                            channel: ch,
                        });
                    }
                    hot = Some((r, c));
                } else if v != 0.0 {
                    return Err(Error::NotOneHot {
                        op: "one_hot_cells",
                        channel: ch,
                    });
                }
            }
        }
        match hot {
            Some(cell) => cells.push(cell),
            None => {
                return Err(Error::NotOneHot {
                    op: "one_hot_cells",
                    channel: ch,
                })
            }
        }
    }
    Ok(cells)
}

/// Cross-entropy between per-channel spatial distributions and a one-hot
/// target: `-(1/n) * sum_n log pred[n, hot_n]`. The target acts as a
/// constant; gradients flow only into `pred`.
pub fn xent_heatmap(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("xent_heatmap", pred, target)?;
    let cells = one_hot_cells(target)?;
    let picked = gather_cells(pred, &cells)?;
    scale(&mean(&log(&picked)?)?, -1.0)
}

/// Mean squared error between two same-shape tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let d = sub(pred, target)?;
    mean(&mul(&d, &d)?)
}

/// One vector-Jacobian product step: upstream cotangent in, one optional
/// cotangent per input out (`None` marks an input the node never
/// differentiates through).
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    upstream: &Tensor,
) -> Result<Vec<Option<Tensor>>> {
    match op {
        Op::Leaf => Ok(Vec::new()),
        Op::Add => Ok(vec![Some(upstream.clone()), Some(upstream.clone())]),
        Op::Sub => Ok(vec![
            Some(upstream.clone()),
            Some(scale(upstream, -1.0)?),
        ]),
        Op::Mul => Ok(vec![
            Some(mul(upstream, &inputs[1])?),
            Some(mul(upstream, &inputs[0])?),
        ]),
        Op::Scale(c) => Ok(vec![Some(scale(upstream, *c)?)]),
        Op::MulScalar => Ok(vec![
            Some(mul_scalar(upstream, &inputs[1])?),
            Some(sum_all(&mul(upstream, &inputs[0])?)?),
        ]),
        Op::Matmul => Ok(vec![
            Some(matmul(upstream, &transpose(&inputs[1])?)?),
            Some(matmul(&transpose(&inputs[0])?, upstream)?),
        ]),
        Op::Transpose => Ok(vec![Some(transpose(upstream)?)]),
        Op::Reshape => Ok(vec![Some(reshape(upstream, inputs[0].dims())?)]),
        Op::Relu => {
            let mask: Vec<f64> = inputs[0]
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(inputs[0].dims(), mask)?;
            Ok(vec![Some(mul(upstream, &mask)?)])
        }
        Op::Log => Ok(vec![Some(mul(upstream, &recip(&inputs[0])?)?)]),
        Op::Recip => {
            let y2 = mul(output, output)?;
            Ok(vec![Some(scale(&mul(upstream, &y2)?, -1.0)?)])
        }
        Op::Conv2dSame => Ok(vec![
            Some(conv2d_same(upstream, &kernel_flip_swap(&inputs[1])?)?),
            Some(kernel_grad(&inputs[0], upstream)?),
        ]),
        Op::KernelGrad => Ok(vec![
            Some(conv2d_same(&inputs[1], &kernel_flip_swap(upstream)?)?),
            Some(conv2d_same(&inputs[0], upstream)?),
        ]),
        Op::KernelFlipSwap => Ok(vec![Some(kernel_flip_swap(upstream)?)]),
        Op::AvgPool2 => Ok(vec![Some(avg_unpool2(upstream)?)]),
        Op::AvgUnpool2 => Ok(vec![Some(avg_pool2(upstream)?)]),
        Op::BroadcastSpatial => Ok(vec![Some(sum_spatial(upstream)?)]),
        Op::SumSpatial => {
            let (h, w) = (inputs[0].dims()[1], inputs[0].dims()[2]);
            Ok(vec![Some(broadcast_spatial(upstream, h, w)?)])
        }
        Op::BroadcastRows => Ok(vec![Some(sum_over_rows(upstream)?)]),
        Op::SumOverRows => {
            let rows = inputs[0].dims()[0];
            Ok(vec![Some(broadcast_rows(upstream, rows)?)])
        }
        Op::BroadcastScalar => Ok(vec![Some(sum_all(upstream)?)]),
        Op::SumAll => Ok(vec![Some(broadcast_scalar(upstream, inputs[0].dims())?)]),
        Op::Mean => {
            let n = inputs[0].numel() as f64;
            Ok(vec![Some(broadcast_scalar(
                &scale(upstream, 1.0 / n)?,
                inputs[0].dims(),
            )?)])
        }
        Op::GatherRows(indices) => {
            let rows = inputs[0].dims()[0];
            Ok(vec![Some(scatter_rows(upstream, indices, rows)?)])
        }
        Op::ScatterRows(indices) => Ok(vec![Some(gather_rows(upstream, indices)?)]),
        Op::GatherCells(cells) => {
            let (h, w) = (inputs[0].dims()[1], inputs[0].dims()[2]);
            Ok(vec![Some(scatter_cells(upstream, cells, h, w)?)])
        }
        Op::ScatterCells(cells) => Ok(vec![Some(gather_cells(upstream, cells)?)]),
        Op::SpatialSoftmax => {
            let (h, w) = (output.dims()[1], output.dims()[2]);
            let gy = mul(upstream, output)?;
            let per_channel = sum_spatial(&gy)?;
            let shifted = sub(upstream, &broadcast_spatial(&per_channel, h, w)?)?;
            Ok(vec![Some(mul(output, &shifted)?)])
        }
    }
}
