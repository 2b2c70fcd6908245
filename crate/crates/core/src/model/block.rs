//! One pre-norm decoder block over an arbitrary set of query rows.
//!
//! Every query row carries its own list of visible key columns. Columns
//! `0..ctx_len` address committed cache rows, columns `ctx_len..` address the
//! rows of the current call. Plain causal attention, tree attention and
//! multi-stream attention are all expressed this way, so one forward and one
//! backward cover every layer type.

use super::weights::LayerWeights;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, row_moments, Precision};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Rotates consecutive coordinate pairs of `v` by `angle`.
pub fn rotate_pairs(v: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    for pair in v.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * c - y * s;
        pair[1] = x * s + y * c;
    }
}

pub(crate) struct BlockArgs<'a> {
    pub x: &'a [f64],
    pub rows: usize,
    pub ctx_k: &'a [f64],
    pub ctx_v: &'a [f64],
    pub ctx_len: usize,
    pub cols: &'a [Vec<usize>],
    /// Value rotation angle per row (0 for main-stream rows).
    pub rot: &'a [f64],
}

/// Activations kept for the backward pass.
pub(crate) struct BlockTape {
    rows: usize,
    x: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<Vec<f64>>,
    attn: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    b: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
    cols: Vec<Vec<usize>>,
    rot: Vec<f64>,
}

pub(crate) struct BlockOut {
    pub out: Vec<f64>,
    /// Keys of every input row.
    pub k: Vec<f64>,
    /// Values of every input row, after rotation.
    pub v: Vec<f64>,
    pub tape: Option<BlockTape>,
}

fn norm_rows(
    x: &[f64],
    rows: usize,
    h: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    prec: Precision,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * h];
    let mut out = vec![0.0; rows * h];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let (mean, rs) = row_moments(row, eps);
        rstd[r] = rs;
        for i in 0..h {
            let xh = (row[i] - mean) * rs;
            xhat[r * h + i] = xh;
            out[r * h + i] = prec.round(xh * gain[i] + bias[i]);
        }
    }
    (xhat, rstd, out)
}

fn project(a: &[f64], w: &[f64], rows: usize, k: usize, n: usize, prec: Precision) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    matmul_into(a, w, &mut out, rows, k, n);
    prec.round_slice(&mut out);
    out
}

pub(crate) fn block_forward(
    w: &LayerWeights,
    heads: usize,
    eps: f64,
    prec: Precision,
    args: &BlockArgs<'_>,
    keep_tape: bool,
) -> BlockOut {
    let h = w.wq.shape()[0];
    let f = w.w1.shape()[1];
    let rows = args.rows;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (xhat1, rstd1, a) = norm_rows(args.x, rows, h, w.attn_norm_gain.data(), w.attn_norm_bias.data(), eps, prec);
    let q = project(&a, w.wq.data(), rows, h, h, prec);
    let k = project(&a, w.wk.data(), rows, h, h, prec);
    let mut v = project(&a, w.wv.data(), rows, h, h, prec);
    for r in 0..rows {
        if args.rot[r] != 0.0 {
            let row = &mut v[r * h..(r + 1) * h];
            rotate_pairs(row, args.rot[r]);
            prec.round_slice(row);
        }
    }

    let key = |c: usize| -> &[f64] {
        if c < args.ctx_len {
            &args.ctx_k[c * h..(c + 1) * h]
        } else {
            let c = c - args.ctx_len;
            &k[c * h..(c + 1) * h]
        }
    };
    let value = |c: usize| -> &[f64] {
        if c < args.ctx_len {
            &args.ctx_v[c * h..(c + 1) * h]
        } else {
            let c = c - args.ctx_len;
            &v[c * h..(c + 1) * h]
        }
    };

    let mut attn = vec![0.0; rows * h];
    let mut probs = Vec::with_capacity(if keep_tape { rows } else { 0 });
    for r in 0..rows {
        let cols = &args.cols[r];
        let n = cols.len();
        let mut p = vec![0.0; heads * n];
        let qr = &q[r * h..(r + 1) * h];
        for hd in 0..heads {
            let lo = hd * dh;
            let ph = &mut p[hd * n..(hd + 1) * n];
            for (s, &c) in ph.iter_mut().zip(cols) {
                let kc = &key(c)[lo..lo + dh];
                let mut acc = 0.0;
                for (x, y) in qr[lo..lo + dh].iter().zip(kc) {
                    acc += x * y;
                }
                *s = acc * scale;
            }
            crate::tensor::softmax_in_place(ph);
            let out = &mut attn[r * h + lo..r * h + lo + dh];
            for (&pc, &c) in ph.iter().zip(cols) {
                for (o, &vv) in out.iter_mut().zip(&value(c)[lo..lo + dh]) {
                    *o += pc * vv;
                }
            }
        }
        if keep_tape {
            probs.push(p);
        }
    }
    prec.round_slice(&mut attn);

    let mut x1 = project(&attn, w.wo.data(), rows, h, h, prec);
    for (o, &xi) in x1.iter_mut().zip(args.x) {
        *o = prec.round(*o + xi);
    }

    let (xhat2, rstd2, b) = norm_rows(&x1, rows, h, w.ffn_norm_gain.data(), w.ffn_norm_bias.data(), eps, prec);
    let mut hpre = vec![0.0; rows * f];
    matmul_into(&b, w.w1.data(), &mut hpre, rows, h, f);
    for r in 0..rows {
        for (x, &bb) in hpre[r * f..(r + 1) * f].iter_mut().zip(w.b1.data()) {
            *x = prec.round(*x + bb);
        }
    }
    let hact: Vec<f64> = hpre.iter().map(|&x| prec.round(gelu(x))).collect();
    let mut out = vec![0.0; rows * h];
    matmul_into(&hact, w.w2.data(), &mut out, rows, f, h);
    for r in 0..rows {
        for ((o, &bb), &res) in out[r * h..(r + 1) * h].iter_mut().zip(w.b2.data()).zip(&x1[r * h..(r + 1) * h]) {
            *o = prec.round(prec.round(*o + bb) + res);
        }
    }

    let tape = keep_tape.then(|| BlockTape {
        rows,
        x: args.x.to_vec(),
        xhat1,
        rstd1,
        a,
        q,
        k: k.clone(),
        v: v.clone(),
        probs,
        attn,
        xhat2,
        rstd2,
        b,
        hpre,
        hact,
        cols: args.cols.to_vec(),
        rot: args.rot.to_vec(),
    });
    BlockOut { out, k, v, tape }
}

#[allow(clippy::too_many_arguments)]
fn norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
    rows: usize,
    h: usize,
) {
    for r in 0..rows {
        let dyr = &dy[r * h..(r + 1) * h];
        let xr = &xhat[r * h..(r + 1) * h];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..h {
            dgain[i] += dyr[i] * xr[i];
            dbias[i] += dyr[i];
            let d = dyr[i] * gain[i];
            mean_d += d;
            mean_dx += d * xr[i];
        }
        mean_d /= h as f64;
        mean_dx /= h as f64;
        for i in 0..h {
            let d = dyr[i] * gain[i];
            dx[r * h + i] += rstd[r] * (d - mean_d - xr[i] * mean_dx);
        }
    }
}

/// Back-propagates `dout` through a block run without cache context.
/// Accumulates parameter gradients into `grad` and returns the input gradient.
pub(crate) fn block_backward(
    w: &LayerWeights,
    heads: usize,
    tape: &BlockTape,
    dout: &[f64],
    grad: &mut LayerWeights,
) -> Vec<f64> {
    let h = w.wq.shape()[0];
    let f = w.w1.shape()[1];
    let rows = tape.rows;
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward branch.
    let df = dout;
    for r in 0..rows {
        for (g, &d) in grad.b2.data_mut().iter_mut().zip(&df[r * h..(r + 1) * h]) {
            *g += d;
        }
    }
    matmul_tn_into(&tape.hact, df, grad.w2.data_mut(), rows, f, h);
    let mut dhpre = vec![0.0; rows * f];
    matmul_nt_into(df, w.w2.data(), &mut dhpre, rows, h, f);
    for (d, &x) in dhpre.iter_mut().zip(&tape.hpre) {
        *d *= gelu_grad(x);
    }
    for r in 0..rows {
        for (g, &d) in grad.b1.data_mut().iter_mut().zip(&dhpre[r * f..(r + 1) * f]) {
            *g += d;
        }
    }
    matmul_tn_into(&tape.b, &dhpre, grad.w1.data_mut(), rows, h, f);
    let mut db = vec![0.0; rows * h];
    matmul_nt_into(&dhpre, w.w1.data(), &mut db, rows, f, h);

    let mut dx1 = dout.to_vec();
    norm_backward(
        &db,
        &tape.xhat2,
        &tape.rstd2,
        w.ffn_norm_gain.data(),
        grad.ffn_norm_gain.data_mut(),
        grad.ffn_norm_bias.data_mut(),
        &mut dx1,
        rows,
        h,
    );

    // Attention branch.
    matmul_tn_into(&tape.attn, &dx1, grad.wo.data_mut(), rows, h, h);
    let mut dattn = vec![0.0; rows * h];
    matmul_nt_into(&dx1, w.wo.data(), &mut dattn, rows, h, h);

    let mut dq = vec![0.0; rows * h];
    let mut dk = vec![0.0; rows * h];
    let mut dv = vec![0.0; rows * h];
    for r in 0..rows {
        let cols = &tape.cols[r];
        let n = cols.len();
        let p = &tape.probs[r];
        for hd in 0..heads {
            let lo = hd * dh;
            let ph = &p[hd * n..(hd + 1) * n];
            let dor = &dattn[r * h + lo..r * h + lo + dh];
            let mut dp = vec![0.0; n];
            for (j, &c) in cols.iter().enumerate() {
                let vc = &tape.v[c * h + lo..c * h + lo + dh];
                dp[j] = dor.iter().zip(vc).map(|(a, b)| a * b).sum();
                for (g, &d) in dv[c * h + lo..c * h + lo + dh].iter_mut().zip(dor) {
                    *g += ph[j] * d;
                }
            }
            let dot: f64 = ph.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (j, &c) in cols.iter().enumerate() {
                let ds = ph[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for i in 0..dh {
                    dq[r * h + lo + i] += ds * tape.k[c * h + lo + i];
                    dk[c * h + lo + i] += ds * tape.q[r * h + lo + i];
                }
            }
        }
    }
    for r in 0..rows {
        if tape.rot[r] != 0.0 {
            rotate_pairs(&mut dv[r * h..(r + 1) * h], -tape.rot[r]);
        }
    }

    matmul_tn_into(&tape.a, &dq, grad.wq.data_mut(), rows, h, h);
    matmul_tn_into(&tape.a, &dk, grad.wk.data_mut(), rows, h, h);
    matmul_tn_into(&tape.a, &dv, grad.wv.data_mut(), rows, h, h);
    let mut da = vec![0.0; rows * h];
    matmul_nt_into(&dq, w.wq.data(), &mut da, rows, h, h);
    matmul_nt_into(&dk, w.wk.data(), &mut da, rows, h, h);
    matmul_nt_into(&dv, w.wv.data(), &mut da, rows, h, h);

    let mut dx = dx1;
    norm_backward(
        &da,
        &tape.xhat1,
        &tape.rstd1,
        w.attn_norm_gain.data(),
        grad.attn_norm_gain.data_mut(),
        grad.attn_norm_bias.data_mut(),
        &mut dx,
        rows,
        h,
    );
    debug_assert_eq!(tape.x.len(), dx.len());
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rotation_examples() {
        let mut v = vec![1.0, 2.0, -3.0, 0.5];
        let orig = v.clone();
        rotate_pairs(&mut v, 0.0);
        assert_eq!(v, orig);

        let mut p = vec![1.0, 0.0];
        rotate_pairs(&mut p, std::f64::consts::FRAC_PI_2);
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn rotation_is_an_isometry(v in prop::collection::vec(-10.0f64..10.0, 1..8), angle in -7.0f64..7.0) {
            let mut v: Vec<f64> = v.into_iter().flat_map(|x| [x, -0.5 * x + 1.0]).collect();
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rotate_pairs(&mut v, angle);
            let n1: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-9);
        }
    }
}
