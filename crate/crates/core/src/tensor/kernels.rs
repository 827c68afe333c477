//! Hot numeric paths shared by the tape ops: a polynomial `exp`, row softmax,
//! and a row-blocked attention kernel that never materializes the full
//! attention matrix unless asked to.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Zip};

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_70e-10;

/// exp(x) via range reduction to exp(r)·2^k with a degree-9 polynomial.
/// Relative error stays below 1e-11 on finite inputs; used in softmax where
/// the std `exp` dominates runtime.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    if x < -708.0 {
        return 0.0;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    let k = (x * LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Horner form of 1 + r + r^2/2! + ... + r^9/9!.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0 + r * (1.0 / 362880.0)))))))));
    let ki = k as i64;
    if ki < -1022 {
        // Subnormal range; accuracy no longer matters, magnitude does.
        return p * f64::from_bits(1u64 << 52) * pow2(ki + 52);
    }
    p * pow2(ki)
}

#[inline]
fn pow2(k: i64) -> f64 {
    f64::from_bits(((k + 1023) as u64) << 52)
}

pub fn exp_slice_inplace(xs: &mut [f64]) {
    for x in xs {
        *x = fast_exp(*x);
    }
}

const GELU_C: f64 = 0.044715;

#[inline]
pub fn gelu_scalar(v: f64) -> f64 {
    let s2p = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (s2p * (v + GELU_C * v * v * v)).tanh())
}

#[inline]
pub fn gelu_prime(v: f64) -> f64 {
    let s2p = (2.0 / std::f64::consts::PI).sqrt();
    let u = s2p * (v + GELU_C * v * v * v);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * s2p * (1.0 + 3.0 * GELU_C * v * v)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-v))
}

/// In-place softmax of one row: max-shift, exp, normalize.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = fast_exp(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn softmax_rows_inplace(m: &mut ArrayViewMut2<f64>) {
    for mut row in m.rows_mut() {
        softmax_row_inplace(row.as_slice_mut().expect("row-major storage"));
    }
}

/// Rows of Q processed per block. Large enough to amortize GEMM setup, small
/// enough that a block of attention weights stays cache-resident.
const BLOCK: usize = 128;

/// O = softmax(scale * Q K^T) V for one head, streamed over row blocks.
pub fn attn_forward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    scale: f64,
    out: &mut Array2<f64>,
) {
    let n = q.nrows();
    let mut s_blk = Array2::<f64>::zeros((BLOCK.min(n), k.nrows()));
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let rows = end - start;
        let mut s = s_blk.slice_mut(s![..rows, ..]);
        general_mat_mul(scale, &q.slice(s![start..end, ..]), &k.t(), 0.0, &mut s);
        softmax_rows_inplace(&mut s);
        let mut o = out.slice_mut(s![start..end, ..]);
        general_mat_mul(1.0, &s.view(), v, 0.0, &mut o);
    }
}

/// Same computation, but returns the full attention matrix. Only sensible at
/// probe scale; training uses the streamed path above.
pub fn attn_weights(q: &ArrayView2<f64>, k: &ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut s = Array2::<f64>::zeros((q.nrows(), k.nrows()));
    general_mat_mul(scale, q, &k.t(), 0.0, &mut s);
    softmax_rows_inplace(&mut s.view_mut());
    s
}

pub struct AttnGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
}

/// Backward for `attn_forward`. Recomputes each attention block from Q and K
/// unless the caller kept the full matrix (`weights`), trading FLOPs for not
/// holding N x N values on the tape.
pub fn attn_backward(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    scale: f64,
    dout: &ArrayView2<f64>,
    weights: Option<&ArrayView2<f64>>,
) -> AttnGrads {
    let (n, d) = (q.nrows(), q.ncols());
    let mut g = AttnGrads {
        dq: Array2::zeros((n, d)),
        dk: Array2::zeros((n, d)),
        dv: Array2::zeros((n, v.ncols())),
    };
    let mut a_blk = Array2::<f64>::zeros((BLOCK.min(n), n));
    let mut da_blk = Array2::<f64>::zeros((BLOCK.min(n), n));
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        let rows = end - start;
        let q_i = q.slice(s![start..end, ..]);
        let dout_i = dout.slice(s![start..end, ..]);

        let mut a = a_blk.slice_mut(s![..rows, ..]);
        match weights {
            Some(w) => a.assign(&w.slice(s![start..end, ..])),
            None => {
                general_mat_mul(scale, &q_i, &k.t(), 0.0, &mut a);
                softmax_rows_inplace(&mut a);
            }
        }

        // dV += A^T dO
        general_mat_mul(1.0, &a.t(), &dout_i, 1.0, &mut g.dv.view_mut());

        // dA = dO V^T, then the softmax jacobian folds it into dP in place:
        // dP_ij = scale * A_ij * (dA_ij - sum_j dA_ij A_ij).
        let mut da = da_blk.slice_mut(s![..rows, ..]);
        general_mat_mul(1.0, &dout_i, &v.t(), 0.0, &mut da);
        Zip::from(da.rows_mut()).and(a.rows()).for_each(|mut da_r, a_r| {
            let rowdot: f64 = da_r.iter().zip(a_r.iter()).map(|(x, y)| x * y).sum();
            Zip::from(&mut da_r).and(&a_r).for_each(|dp, &aw| {
                *dp = scale * aw * (*dp - rowdot);
            });
        });

        // dQ rows are disjoint per block; dK accumulates across blocks.
        let mut dq_i = g.dq.slice_mut(s![start..end, ..]);
        general_mat_mul(1.0, &da.view(), k, 0.0, &mut dq_i);
        general_mat_mul(1.0, &da.t(), &q_i, 1.0, &mut g.dk.view_mut());
    }
    g
}
