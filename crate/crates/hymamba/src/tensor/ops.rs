//! Differentiable primitives.
//!
//! Every operation computes its value eagerly and, when any input lives on a
//! tape, records a backward closure. Operations on untaped tensors are plain
//! math. Shapes are validated up front and mismatches produce `Error::Dim`
//! naming both shapes.

use super::tape::{BackwardFn, Tape};
use super::{same_shape, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

/// The unique tape reachable from `inputs`, if any. Two distinct tapes in one
/// operation is a contract error.
fn live_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for t in inputs {
        if let Some(node) = t.node() {
            match &found {
                None => found = Some(node.tape.clone()),
                Some(tape) => {
                    if !tape.same_tape(&node.tape) {
                        return Err(Error::Contract(
                            "operation mixes tensors from different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

/// Record a single-output operation. The backward factory is only invoked
/// when a tape is live, so closures capture saved values lazily.
fn record1(
    inputs: &[&Tensor],
    out: Tensor,
    mk_backward: impl FnOnce() -> BackwardFn,
) -> Result<Tensor> {
    match live_tape(inputs)? {
        None => Ok(out),
        Some(tape) => {
            let mut outs = tape.record(inputs, vec![out], mk_backward());
            Ok(outs.pop().unwrap())
        }
    }
}

fn backward1(
    f: impl Fn(&[f64], &mut dyn FnMut(usize, &[f64])) + 'static,
) -> BackwardFn {
    Box::new(move |grad_outs, sink| {
        if let Some(g) = grad_outs[0] {
            f(g, sink);
        }
    })
}

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, |x, y| x + y))?;
    record1(&[a, b], out, || {
        backward1(move |g, sink| {
            sink(0, g);
            sink(1, g);
        })
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, |x, y| x - y))?;
    record1(&[a, b], out, || {
        backward1(move |g, sink| {
            sink(0, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            sink(1, &neg);
        })
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, |x, y| x * y))?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
            let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("div", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, |x, y| x / y))?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(g, y)| g / y).collect();
            let gb: Vec<f64> = g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(g, (x, y))| -g * x / (y * y))
                .collect();
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

/// Elementwise maximum; subgradient routes to `a` on ties.
pub fn max2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("max2", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, f64::max))?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                if ad[i] >= bd[i] {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

/// Elementwise minimum; subgradient routes to `a` on ties.
pub fn min2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("min2", a, b)?;
    let out = Tensor::new(a.shape().to_vec(), zip_map(a, b, f64::min))?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                if ad[i] <= bd[i] {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

/// `df` receives (input value, output value) and returns dy/dx.
fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Tensor> {
    let out_data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out = Tensor::new(x.shape().to_vec(), out_data.clone())?;
    let xd = x.data_rc();
    let yd = Rc::new(out_data);
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            let gx: Vec<f64> = g
                .iter()
                .zip(xd.iter().zip(yd.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            sink(0, &gx);
        })
    })
}

pub fn neg(x: &Tensor) -> Result<Tensor> {
    unary(x, |v| -v, |_, _| -1.0)
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    unary(x, f64::exp, |_, y| y)
}

pub fn ln(x: &Tensor) -> Result<Tensor> {
    unary(x, f64::ln, |x, _| 1.0 / x)
}

pub fn sqrt(x: &Tensor) -> Result<Tensor> {
    unary(x, f64::sqrt, |_, y| 0.5 / y)
}

pub fn abs(x: &Tensor) -> Result<Tensor> {
    unary(x, f64::abs, |x, _| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

pub(crate) fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary(x, logistic, |_, y| y * (1.0 - y))
}

/// x * sigmoid(x).
pub fn silu(x: &Tensor) -> Result<Tensor> {
    unary(
        x,
        |v| v * logistic(v),
        |x, _| {
            let s = logistic(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    unary(
        x,
        |v| {
            if v > 30.0 {
                v
            } else {
                v.exp().ln_1p()
            }
        },
        |x, _| logistic(x),
    )
}

pub fn powi(x: &Tensor, n: i32) -> Result<Tensor> {
    unary(x, move |v| v.powi(n), move |x, _| f64::from(n) * x.powi(n - 1))
}

pub fn scale(x: &Tensor, s: f64) -> Result<Tensor> {
    unary(x, move |v| v * s, move |_, _| s)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Result<Tensor> {
    unary(x, move |v| v + c, |_, _| 1.0)
}

/// Clamp into [lo, hi]; gradient passes where lo <= x <= hi.
pub fn clamp(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    unary(
        x,
        move |v| v.clamp(lo, hi),
        move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
    )
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dim {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = a[i * k + j];
        }
    }
    out
}

/// Standard matrix product [m×k]·[k×p] -> [m×p].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, p) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::Dim {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out = Tensor::new([m, p], matmul_raw(a.data(), b.data(), m, k, p))?;
    let (ad, bd) = (a.data_rc(), b.data_rc());
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            // dA = G · B^T, dB = A^T · G
            let bt = transpose_raw(&bd, k, p);
            let ga = matmul_raw(g, &bt, m, p, k);
            let at = transpose_raw(&ad, m, k);
            let gb = matmul_raw(&at, g, k, m, p);
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("transpose", x)?;
    let out = Tensor::new([k, m], transpose_raw(x.data(), m, k))?;
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            sink(0, &transpose_raw(g, k, m));
        })
    })
}

/// Add a row vector to every row of a matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("add_row", x)?;
    if bias.shape() != [k] {
        return Err(Error::Dim {
            op: "add_row",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut data = x.data().to_vec();
    for r in 0..m {
        for c in 0..k {
            data[r * k + c] += bias.data()[c];
        }
    }
    let out = Tensor::new([m, k], data)?;
    record1(&[x, bias], out, move || {
        backward1(move |g, sink| {
            sink(0, g);
            let mut gb = vec![0.0; k];
            for r in 0..m {
                for c in 0..k {
                    gb[c] += g[r * k + c];
                }
            }
            sink(1, &gb);
        })
    })
}

/// x·W + b broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row(&matmul(x, w)?, b)
}

// ---------------------------------------------------------------------------
// Row / column rearrangement
// ---------------------------------------------------------------------------

pub fn slice_rows(x: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let (m, k) = require_2d("slice_rows", x)?;
    if r0 > r1 || r1 > m {
        return Err(Error::Contract(format!(
            "slice_rows {r0}..{r1} out of bounds for {m} rows"
        )));
    }
    let out = Tensor::new([r1 - r0, k], x.data()[r0 * k..r1 * k].to_vec())?;
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; m * k];
            gx[r0 * k..r1 * k].copy_from_slice(g);
            sink(0, &gx);
        })
    })
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_rows: empty input".into()));
    }
    let (_, k) = require_2d("concat_rows", parts[0])?;
    let mut data = Vec::new();
    let mut row_counts = Vec::new();
    for p in parts {
        let (m_p, k_p) = require_2d("concat_rows", p)?;
        if k_p != k {
            return Err(Error::Dim {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        row_counts.push(m_p);
        data.extend_from_slice(p.data());
    }
    let total: usize = row_counts.iter().sum();
    let out = Tensor::new([total, k], data)?;
    record1(parts, out, move || {
        backward1(move |g, sink| {
            let mut off = 0;
            for (slot, &m_p) in row_counts.iter().enumerate() {
                sink(slot, &g[off * k..(off + m_p) * k]);
                off += m_p;
            }
        })
    })
}

pub fn reverse_rows(x: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("reverse_rows", x)?;
    let mut data = vec![0.0; m * k];
    for r in 0..m {
        data[(m - 1 - r) * k..(m - r) * k].copy_from_slice(&x.data()[r * k..(r + 1) * k]);
    }
    let out = Tensor::new([m, k], data)?;
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; m * k];
            for r in 0..m {
                gx[(m - 1 - r) * k..(m - r) * k].copy_from_slice(&g[r * k..(r + 1) * k]);
            }
            sink(0, &gx);
        })
    })
}

pub fn slice_cols(x: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
    let (m, k) = require_2d("slice_cols", x)?;
    if c0 > c1 || c1 > k {
        return Err(Error::Contract(format!(
            "slice_cols {c0}..{c1} out of bounds for {k} cols"
        )));
    }
    let w = c1 - c0;
    let mut data = vec![0.0; m * w];
    for r in 0..m {
        data[r * w..(r + 1) * w].copy_from_slice(&x.data()[r * k + c0..r * k + c1]);
    }
    let out = Tensor::new([m, w], data)?;
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; m * k];
            for r in 0..m {
                gx[r * k + c0..r * k + c1].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            sink(0, &gx);
        })
    })
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols: empty input".into()));
    }
    let (m, _) = require_2d("concat_cols", parts[0])?;
    let mut widths = Vec::new();
    for p in parts {
        let (m_p, k_p) = require_2d("concat_cols", p)?;
        if m_p != m {
            return Err(Error::Dim {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(k_p);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for r in 0..m {
            data[r * total + off..r * total + off + w]
                .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let out = Tensor::new([m, total], data)?;
    record1(parts, out, move || {
        backward1(move |g, sink| {
            let mut off = 0;
            for (slot, &w) in widths.iter().enumerate() {
                let mut gp = vec![0.0; m * w];
                for r in 0..m {
                    gp[r * w..(r + 1) * w]
                        .copy_from_slice(&g[r * total + off..r * total + off + w]);
                }
                sink(slot, &gp);
                off += w;
            }
        })
    })
}

/// Repeat a length-k vector as m identical rows.
pub fn tile_rows(v: &Tensor, m: usize) -> Result<Tensor> {
    if v.shape().len() != 1 {
        return Err(Error::Dim {
            op: "tile_rows",
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    let k = v.shape()[0];
    let mut data = Vec::with_capacity(m * k);
    for _ in 0..m {
        data.extend_from_slice(v.data());
    }
    let out = Tensor::new([m, k], data)?;
    record1(&[v], out, move || {
        backward1(move |g, sink| {
            let mut gv = vec![0.0; k];
            for r in 0..m {
                for c in 0..k {
                    gv[c] += g[r * k + c];
                }
            }
            sink(0, &gv);
        })
    })
}

// ---------------------------------------------------------------------------
// Normalization / softmax
// ---------------------------------------------------------------------------

/// Per row: x / sqrt(mean(x^2) + eps), scaled elementwise by `weight`.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, k) = require_2d("rms_norm", x)?;
    if weight.shape() != [k] {
        return Err(Error::Dim {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::Contract(format!("rms_norm: eps must be > 0, got {eps}")));
    }
    let mut data = vec![0.0; m * k];
    let mut inv_rms = vec![0.0; m];
    for r in 0..m {
        let row = &x.data()[r * k..(r + 1) * k];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / k as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for c in 0..k {
            data[r * k + c] = row[c] * inv * weight.data()[c];
        }
    }
    let out = Tensor::new([m, k], data)?;
    let xd = x.data_rc();
    let wd = weight.data_rc();
    let inv_rms = Rc::new(inv_rms);
    record1(&[x, weight], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; m * k];
            let mut gw = vec![0.0; k];
            for r in 0..m {
                let row = &xd[r * k..(r + 1) * k];
                let grow = &g[r * k..(r + 1) * k];
                let inv = inv_rms[r];
                // s = 1/inv; dx_c = inv*w_c*g_c - x_c*inv^3/k * sum_j g_j w_j x_j
                let dot: f64 = (0..k).map(|j| grow[j] * wd[j] * row[j]).sum();
                for c in 0..k {
                    gx[r * k + c] =
                        inv * wd[c] * grow[c] - row[c] * inv.powi(3) / k as f64 * dot;
                    gw[c] += grow[c] * row[c] * inv;
                }
            }
            sink(0, &gx);
            sink(1, &gw);
        })
    })
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("softmax_rows", x)?;
    let mut data = vec![0.0; m * k];
    for r in 0..m {
        let row = &x.data()[r * k..(r + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (row[c] - mx).exp();
            data[r * k + c] = e;
            sum += e;
        }
        for c in 0..k {
            data[r * k + c] /= sum;
        }
    }
    let out = Tensor::new([m, k], data.clone())?;
    let yd = Rc::new(data);
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; m * k];
            for r in 0..m {
                let yrow = &yd[r * k..(r + 1) * k];
                let grow = &g[r * k..(r + 1) * k];
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for c in 0..k {
                    gx[r * k + c] = yrow[c] * (grow[c] - dot);
                }
            }
            sink(0, &gx);
        })
    })
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum(x: &Tensor) -> Result<Tensor> {
    let total: f64 = x.data().iter().sum();
    let n = x.numel();
    let out = Tensor::scalar(total);
    record1(&[x], out, move || {
        backward1(move |g, sink| {
            sink(0, &vec![g[0]; n]);
        })
    })
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    scale(&sum(x)?, 1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// Depthwise causal 1-D convolution over the row (token) axis
// ---------------------------------------------------------------------------

/// y[t][c] = bias[c] + sum_j kernel[c][j] * x[t-j][c], zero-padded on the left.
pub fn conv1d_causal(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (l, ch) = require_2d("conv1d_causal", x)?;
    let (ch_k, ksize) = require_2d("conv1d_causal", kernel)?;
    if ch_k != ch || bias.shape() != [ch] {
        return Err(Error::Dim {
            op: "conv1d_causal",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; l * ch];
    for t in 0..l {
        for c in 0..ch {
            let mut acc = bias.data()[c];
            for j in 0..ksize.min(t + 1) {
                acc += kernel.data()[c * ksize + j] * x.data()[(t - j) * ch + c];
            }
            data[t * ch + c] = acc;
        }
    }
    let out = Tensor::new([l, ch], data)?;
    let xd = x.data_rc();
    let kd = kernel.data_rc();
    record1(&[x, kernel, bias], out, move || {
        backward1(move |g, sink| {
            let mut gx = vec![0.0; l * ch];
            let mut gk = vec![0.0; ch * ksize];
            let mut gb = vec![0.0; ch];
            for t in 0..l {
                for c in 0..ch {
                    let gv = g[t * ch + c];
                    gb[c] += gv;
                    for j in 0..ksize.min(t + 1) {
                        gx[(t - j) * ch + c] += gv * kd[c * ksize + j];
                        gk[c * ksize + j] += gv * xd[(t - j) * ch + c];
                    }
                }
            }
            sink(0, &gx);
            sink(1, &gk);
            sink(2, &gb);
        })
    })
}

// ---------------------------------------------------------------------------
// Image-layout helpers ([H, W, C] tensors)
// ---------------------------------------------------------------------------

fn require_3d(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::Dim {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Concatenate two images along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = require_3d("concat_channels", a)?;
    let (hb, wb, cb) = require_3d("concat_channels", b)?;
    if h != hb || w != wb {
        return Err(Error::Dim {
            op: "concat_channels",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ct = ca + cb;
    let mut data = vec![0.0; h * w * ct];
    for p in 0..h * w {
        data[p * ct..p * ct + ca].copy_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        data[p * ct + ca..(p + 1) * ct].copy_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    let out = Tensor::new([h, w, ct], data)?;
    record1(&[a, b], out, move || {
        backward1(move |g, sink| {
            let mut ga = vec![0.0; h * w * ca];
            let mut gb = vec![0.0; h * w * cb];
            for p in 0..h * w {
                ga[p * ca..(p + 1) * ca].copy_from_slice(&g[p * ct..p * ct + ca]);
                gb[p * cb..(p + 1) * cb].copy_from_slice(&g[p * ct + ca..(p + 1) * ct]);
            }
            sink(0, &ga);
            sink(1, &gb);
        })
    })
}

/// Cut an [S, S, C] image into non-overlapping patches of side `patch` and
/// flatten each in (dy, dx, channel) order. Rows are in raster order, giving
/// a [(S/patch)^2, patch*patch*C] matrix.
pub fn extract_patches(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = require_3d("extract_patches", img)?;
    if h != w {
        return Err(Error::Contract(format!(
            "extract_patches: image must be square, got {h}x{w}"
        )));
    }
    if patch == 0 || h % patch != 0 {
        return Err(Error::Config(format!(
            "extract_patches: size {h} not divisible by patch {patch}"
        )));
    }
    let g = h / patch;
    let plen = patch * patch * c;
    let mut data = vec![0.0; g * g * plen];
    for py in 0..g {
        for px in 0..g {
            let row = py * g + px;
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let src = ((py * patch + dy) * w + px * patch + dx) * c;
                    data[row * plen + k..row * plen + k + c]
                        .copy_from_slice(&img.data()[src..src + c]);
                    k += c;
                }
            }
        }
    }
    let out = Tensor::new([g * g, plen], data)?;
    record1(&[img], out, move || {
        backward1(move |grad, sink| {
            let mut gi = vec![0.0; h * w * c];
            for py in 0..g {
                for px in 0..g {
                    let row = py * g + px;
                    let mut k = 0;
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let dst = ((py * patch + dy) * w + px * patch + dx) * c;
                            gi[dst..dst + c]
                                .copy_from_slice(&grad[row * plen + k..row * plen + k + c]);
                            k += c;
                        }
                    }
                }
            }
            sink(0, &gi);
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let prod = matmul(&Tensor::eye(2), &a).unwrap();
        assert_eq!(prod.data(), a.data());

        let z = matmul(&Tensor::zeros([2, 3]), &Tensor::full([3, 4], 5.0)).unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity_small() {
        let mut rng = crate::rng(11);
        let a = Tensor::rand_uniform([3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform([4, 2], -1.0, 1.0, &mut rng);
        let c = Tensor::rand_uniform([2, 5], -1.0, 1.0, &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn silu_values() {
        let x = Tensor::new([3], vec![0.0, 30.0, 1.0]).unwrap();
        let y = silu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 30.0).abs() < 1e-9);
        assert!((y.data()[2] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_constant_row_and_zero_row() {
        let c = 3.7;
        let x = Tensor::full([1, 4], c);
        let w = Tensor::full([4], 1.0);
        let y = rms_norm(&x, &w, 1e-12).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let z = rms_norm(&Tensor::zeros([2, 4]), &w, 1e-6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rms_norm_matches_formula_on_random_row() {
        let mut rng = crate::rng(5);
        let x = Tensor::rand_uniform([1, 4], -2.0, 2.0, &mut rng);
        let w = Tensor::rand_uniform([4], 0.5, 1.5, &mut rng);
        let eps = 1e-6;
        let y = rms_norm(&x, &w, eps).unwrap();
        let ms = x.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        for c in 0..4 {
            let want = x.data()[c] / (ms + eps).sqrt() * w.data()[c];
            assert!((y.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_stability_and_hand_case() {
        let y = softmax_rows(&Tensor::full([1, 4], 2.5)).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let big = softmax_rows(&t2(&[&[1000.0, 0.0]])).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1].abs() < 1e-12);
        let h = softmax_rows(&t2(&[&[0.0, 3.0_f64.ln()]])).unwrap();
        assert!((h.data()[0] - 0.25).abs() < 1e-12);
        assert!((h.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng(3);
        let x = Tensor::rand_uniform([5, 7], -1e6, 1e6, &mut rng);
        let y = softmax_rows(&x).unwrap();
        for r in 0..5 {
            let s: f64 = y.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn linear_identity_zero_and_hand_case() {
        let x = t2(&[&[1.0, 2.0]]);
        let same = linear(&x, &Tensor::eye(2), &Tensor::zeros([2])).unwrap();
        assert_eq!(same.data(), x.data());

        let b = Tensor::new([2], vec![3.0, -1.0]).unwrap();
        let from_zero = linear(&Tensor::zeros([2, 2]), &Tensor::eye(2), &b).unwrap();
        assert_eq!(from_zero.data(), &[3.0, -1.0, 3.0, -1.0]);

        let w = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let bias = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let y = linear(&x, &w, &bias).unwrap();
        assert_eq!(y.data(), &[2.0, 5.0]);
    }

    #[test]
    fn row_col_ops_roundtrip() {
        let x = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let top = slice_rows(&x, 0, 1).unwrap();
        let bottom = slice_rows(&x, 1, 2).unwrap();
        let back = concat_rows(&[&top, &bottom]).unwrap();
        assert_eq!(back.data(), x.data());

        let left = slice_cols(&x, 0, 1).unwrap();
        let right = slice_cols(&x, 1, 3).unwrap();
        let back2 = concat_cols(&[&left, &right]).unwrap();
        assert_eq!(back2.data(), x.data());

        let rev = reverse_rows(&x).unwrap();
        assert_eq!(rev.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let rr = reverse_rows(&rev).unwrap();
        assert_eq!(rr.data(), x.data());
    }

    #[test]
    fn conv1d_causal_left_pad() {
        // kernel picks x[t-1]: y[0] = 0, y[t] = x[t-1]
        let x = Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::zeros([1]);
        let y = conv1d_causal(&x, &k, &b).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn extract_patches_hand_case() {
        // 4x4x1 image, patch 2 -> 4 tokens of length 4, raster order
        let img = Tensor::new(
            [4, 4, 1],
            (0..16).map(|v| v as f64).collect(),
        )
        .unwrap();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn extract_patches_divisibility_error() {
        let img = Tensor::zeros([4, 4, 1]);
        assert!(matches!(
            extract_patches(&img, 3).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(&Tensor::scalar(1.0));
        let b = t2.var(&Tensor::scalar(2.0));
        assert!(matches!(add(&a, &b).unwrap_err(), Error::Contract(_)));
    }
}
