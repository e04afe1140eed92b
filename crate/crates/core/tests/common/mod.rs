//! Hand-written plain-`Vec` forecasting math shared by the integration
//! tests. Everything here is written directly from the layer definitions,
//! without the tape, so it can serve as an independent reference for the
//! autodiff implementation.

#![allow(dead_code)]

use tsnas::nnops::ForecastModel;
use tsnas::searchspace::WidthFactor;

/// Row-major [m, k] x [k, n] -> [m, n].
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Add a length-n row vector to every row of [m, n].
pub fn add_row(x: &[f64], m: usize, n: usize, b: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += b[j];
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Per-row standardization with learned gain and bias (population variance,
/// epsilon inside the square root).
pub fn layer_norm(x: &[f64], m: usize, n: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Row-wise max-subtracted softmax on [m, n].
pub fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..n {
            out[i * n + j] = exps[j] / denom;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Columns [start, start+width) of [m, n].
pub fn slice_cols(x: &[f64], m: usize, n: usize, start: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * width];
    for i in 0..m {
        out[i * width..(i + 1) * width]
            .copy_from_slice(&x[i * n + start..i * n + start + width]);
    }
    out
}

/// Concatenate equally-tall matrices along columns.
pub fn concat_cols(parts: &[(Vec<f64>, usize)], m: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, w)| w).sum();
    let mut out = vec![0.0; m * total];
    let mut offset = 0;
    for (data, width) in parts {
        for i in 0..m {
            out[i * total + offset..i * total + offset + width]
                .copy_from_slice(&data[i * width..(i + 1) * width]);
        }
        offset += width;
    }
    out
}

/// The standard pre-norm Transformer encoder block with residual
/// connections, written out longhand:
///
///   X1 = W_o . MultiHead(LN(X)) + X            (scaled dot-product)
///   X' = ReLU(LN(X1) . W_up) . W_down + X1     (4x hidden width)
///
/// reading its weights from `model`'s parameter set. `x` is the [l, d_m]
/// input stream of block `block`.
pub fn reference_vanilla_block(model: &ForecastModel, block: usize, x: &[f64], l: usize) -> Vec<f64> {
    const EPS: f64 = 1e-5;
    let cfg = &model.cfg;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let bp = &model.ids.blocks[block];
    let p = |id| model.params.get(id).data.as_slice();

    let ln1 = layer_norm(x, l, d, p(bp.ln_attn.0), p(bp.ln_attn.1), EPS);
    let q = add_row(&matmul(&ln1, l, d, p(bp.w_q), d), l, d, p(bp.b_q));
    let k = add_row(&matmul(&ln1, l, d, p(bp.w_k), d), l, d, p(bp.b_k));
    let v = add_row(&matmul(&ln1, l, d, p(bp.w_v), d), l, d, p(bp.b_v));

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = slice_cols(&q, l, d, h * dh, dh);
        let kh = slice_cols(&k, l, d, h * dh, dh);
        let vh = slice_cols(&v, l, d, h * dh, dh);
        let mut scores = vec![0.0; l * l];
        let scale = 1.0 / (dh as f64).sqrt();
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0;
                for t in 0..dh {
                    acc += qh[i * dh + t] * kh[j * dh + t];
                }
                scores[i * l + j] = acc * scale;
            }
        }
        let attn = softmax_rows(&scores, l, l);
        heads.push((matmul(&attn, l, l, &vh, dh), dh));
    }
    let concat = concat_cols(&heads, l);
    let attn_out = add_row(&matmul(&concat, l, d, p(bp.w_o), d), l, d, p(bp.b_o));
    let x1 = add(&attn_out, x);

    let ln2 = layer_norm(&x1, l, d, p(bp.ln_ffn.0), p(bp.ln_ffn.1), EPS);
    let ffn = &bp.ffn[&WidthFactor::Four];
    let d_ffn = 4 * d;
    let hidden = relu(&matmul(&ln2, l, d, p(ffn.up), d_ffn));
    let ffn_out = matmul(&hidden, l, d_ffn, p(ffn.down), d);
    add(&ffn_out, &x1)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
