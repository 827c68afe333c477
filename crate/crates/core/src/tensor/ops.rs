//! Differentiable operations. Every op records a closure returning gradients
//! for its parents in declaration order; values captured by closures are Arc
//! clones, so recording is cheap and memory is shared with the tape.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, IxDyn};

use super::kernels;
use super::tape::{Tape, Var};
use super::{as_scalar, Data};

fn shared(a: ArrayD<f64>) -> Data {
    a.into_shared()
}

fn view2(v: &Data) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn view3(v: &Data) -> ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3-d tensor")
}

fn grad2(g: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    g.view().into_dimensionality::<Ix2>().expect("2-d gradient")
}

/// Rows-times-cols view of a tensor whose last axis has length `c`.
fn as_rows(v: &Data, c: usize) -> ArrayView2<'_, f64> {
    let rows = v.len() / c;
    v.view()
        .into_shape_with_order((rows, c))
        .expect("standard layout tensor")
}

pub fn add(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
    let out = (&av + &bv).into_dyn();
    t.push(
        shared(out),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(|g| vec![g.clone(), g.clone()])),
    )
}

pub fn sub(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
    let out = (&av - &bv).into_dyn();
    t.push(
        shared(out),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(|g| vec![g.clone(), g.mapv(|x| -x)])),
    )
}

pub fn mul(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
    let out = (&av * &bv).into_dyn();
    t.push(
        shared(out),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| vec![(g * &bv).into_dyn(), (g * &av).into_dyn()])),
    )
}

pub fn scale(t: &Tape, a: Var, c: f64) -> Var {
    let av = t.value(a);
    let out = av.mapv(|x| x * c);
    t.push(
        shared(out),
        vec![t.idx(a)],
        Some(Box::new(move |g| vec![g.mapv(|x| x * c)])),
    )
}

pub fn add_scalar(t: &Tape, a: Var, c: f64) -> Var {
    let av = t.value(a);
    let out = av.mapv(|x| x + c);
    t.push(shared(out), vec![t.idx(a)], Some(Box::new(|g| vec![g.clone()])))
}

/// Re-enters a value as a fresh leaf, cutting the gradient path.
pub fn detach(t: &Tape, a: Var) -> Var {
    t.leaf(t.value(a))
}

pub fn matmul(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    let (a2, b2) = (view2(&av), view2(&bv));
    assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
    let mut out = Array2::<f64>::zeros((a2.nrows(), b2.ncols()));
    general_mat_mul(1.0, &a2, &b2, 0.0, &mut out);
    let (ac, bc) = (av.clone(), bv.clone());
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| {
            let g2 = grad2(g);
            let (a2, b2) = (view2(&ac), view2(&bc));
            let mut da = Array2::<f64>::zeros(a2.raw_dim());
            let mut db = Array2::<f64>::zeros(b2.raw_dim());
            general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut da);
            general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut db);
            vec![da.into_dyn(), db.into_dyn()]
        })),
    )
}

/// a . b^T without materializing the transpose.
pub fn matmul_nt(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    let (a2, b2) = (view2(&av), view2(&bv));
    assert_eq!(a2.ncols(), b2.ncols(), "matmul_nt: inner dimension mismatch");
    let mut out = Array2::<f64>::zeros((a2.nrows(), b2.nrows()));
    general_mat_mul(1.0, &a2, &b2.t(), 0.0, &mut out);
    let (ac, bc) = (av.clone(), bv.clone());
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| {
            let g2 = grad2(g);
            let (a2, b2) = (view2(&ac), view2(&bc));
            let mut da = Array2::<f64>::zeros(a2.raw_dim());
            let mut db = Array2::<f64>::zeros(b2.raw_dim());
            general_mat_mul(1.0, &g2, &b2, 0.0, &mut da);
            general_mat_mul(1.0, &g2.t(), &a2, 0.0, &mut db);
            vec![da.into_dyn(), db.into_dyn()]
        })),
    )
}

/// x . w + bias. `x` may be 1-d (one row) or 2-d; the output keeps its rank.
pub fn linear(t: &Tape, x: Var, w: Var, b: Var) -> Var {
    let (xv, wv, bv) = (t.value(x), t.value(w), t.value(b));
    let one_d = xv.ndim() == 1;
    let in_dim = *xv.shape().last().expect("linear: empty input");
    let x2 = as_rows(&xv, in_dim);
    let w2 = view2(&wv);
    let b1 = bv.view().into_dimensionality::<Ix1>().expect("bias is 1-d");
    assert_eq!(x2.ncols(), w2.nrows(), "linear: input width mismatch");
    assert_eq!(w2.ncols(), b1.len(), "linear: bias width mismatch");
    let mut out = Array2::<f64>::zeros((x2.nrows(), w2.ncols()));
    general_mat_mul(1.0, &x2, &w2, 0.0, &mut out);
    out += &b1;
    let out = if one_d {
        out.into_shape_with_order(w2.ncols()).expect("row").into_dyn()
    } else {
        out.into_dyn()
    };
    let (xc, wc) = (xv.clone(), wv.clone());
    t.push(
        shared(out),
        vec![t.idx(x), t.idx(w), t.idx(b)],
        Some(Box::new(move |g| {
            let out_dim = view2(&wc).ncols();
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / out_dim, out_dim))
                .expect("standard layout gradient");
            let x2 = as_rows(&xc, *xc.shape().last().unwrap());
            let w2 = view2(&wc);
            let mut dx = Array2::<f64>::zeros(x2.raw_dim());
            let mut dw = Array2::<f64>::zeros(w2.raw_dim());
            general_mat_mul(1.0, &g2, &w2.t(), 0.0, &mut dx);
            general_mat_mul(1.0, &x2.t(), &g2, 0.0, &mut dw);
            let db = g2.sum_axis(Axis(0));
            let dx = dx.into_shape_with_order(xc.raw_dim()).expect("input shape");
            vec![dx, dw.into_dyn(), db.into_dyn()]
        })),
    )
}

pub fn gelu(t: &Tape, x: Var) -> Var {
    let xv = t.value(x);
    let out = xv.mapv(kernels::gelu_scalar);
    let xc = xv.clone();
    t.push(
        shared(out),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&xc, |d, &v| *d *= kernels::gelu_prime(v));
            vec![dx]
        })),
    )
}

pub fn sigmoid(t: &Tape, x: Var) -> Var {
    let xv = t.value(x);
    let out = xv.mapv(kernels::sigmoid_scalar);
    let yc = out.clone().into_shared();
    t.push(
        shared(out),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&yc, |d, &y| *d *= y * (1.0 - y));
            vec![dx]
        })),
    )
}

/// clamp(x, 0, 1) with a straight-through gradient: the gradient passes
/// wherever the pre-clamp value lies in the closed interval [0, 1], so pixels
/// sitting exactly at the rails still learn.
pub fn clamp01(t: &Tape, x: Var) -> Var {
    let xv = t.value(x);
    let out = xv.mapv(|v| v.clamp(0.0, 1.0));
    let xc = xv.clone();
    t.push(
        shared(out),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(&xc, |d, &v| {
                if !(0.0..=1.0).contains(&v) {
                    *d = 0.0;
                }
            });
            vec![dx]
        })),
    )
}

/// Layer norm over the last axis at every leading position.
pub fn layer_norm_last(t: &Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
    let (xv, gv, bv) = (t.value(x), t.value(gamma), t.value(beta));
    let c = *xv.shape().last().expect("layer_norm: empty input");
    assert_eq!(gv.len(), c, "layer_norm: gamma width");
    assert_eq!(bv.len(), c, "layer_norm: beta width");
    let x2 = as_rows(&xv, c);
    let rows = x2.nrows();
    let mut xhat = Array2::<f64>::zeros((rows, c));
    let mut inv_std = Array1::<f64>::zeros(rows);
    let g1 = gv.view().into_shape_with_order(c).expect("gamma");
    let b1 = bv.view().into_shape_with_order(c).expect("beta");
    let mut out = Array2::<f64>::zeros((rows, c));
    for r in 0..rows {
        let row = x2.row(r);
        let mean = row.sum() / c as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let xh = (row[j] - mean) * is;
            xhat[[r, j]] = xh;
            out[[r, j]] = g1[j] * xh + b1[j];
        }
    }
    let out = out.into_shape_with_order(xv.raw_dim()).expect("input shape");
    let gc = gv.clone();
    let x_dim = xv.raw_dim();
    t.push(
        shared(out),
        vec![t.idx(x), t.idx(gamma), t.idx(beta)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / c, c))
                .expect("standard layout gradient");
            let g1 = gc.view().into_shape_with_order(c).expect("gamma");
            let rows = g2.nrows();
            let mut dx = Array2::<f64>::zeros((rows, c));
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for r in 0..rows {
                let grow = g2.row(r);
                let xh = xhat.row(r);
                let is = inv_std[r];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..c {
                    let gx = grow[j] * g1[j];
                    m1 += gx;
                    m2 += gx * xh[j];
                    dgamma[j] += grow[j] * xh[j];
                    dbeta[j] += grow[j];
                }
                m1 /= c as f64;
                m2 /= c as f64;
                for j in 0..c {
                    let gx = grow[j] * g1[j];
                    dx[[r, j]] = is * (gx - m1 - xh[j] * m2);
                }
            }
            vec![
                dx.into_shape_with_order(x_dim.clone()).expect("input shape"),
                dgamma.into_dyn(),
                dbeta.into_dyn(),
            ]
        })),
    )
}

/// Row softmax with the full matrix kept on the tape. Probe path; the fused
/// attention below avoids materializing this.
pub fn softmax_rows(t: &Tape, x: Var) -> Var {
    let xv = t.value(x);
    let mut out = view2(&xv).to_owned();
    kernels::softmax_rows_inplace(&mut out.view_mut());
    let yc = out.clone();
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let g2 = grad2(g);
            let mut dx = Array2::<f64>::zeros(yc.raw_dim());
            for r in 0..yc.nrows() {
                let yr = yc.row(r);
                let gr = g2.row(r);
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum();
                for j in 0..yr.len() {
                    dx[[r, j]] = (gr[j] - dot) * yr[j];
                }
            }
            vec![dx.into_dyn()]
        })),
    )
}

/// Single-head attention softmax(scale . q k^T) v.
///
/// With `collect` the attention matrix is materialized on the tape and
/// returned for inspection; otherwise a fused node streams row blocks in the
/// forward pass and recomputes them in the backward pass, so nothing of size
/// rows^2 is retained. Both paths share the same kernels and produce
/// identical values.
pub fn attention(t: &Tape, q: Var, k: Var, v: Var, scale_by: f64, collect: bool) -> (Var, Option<Var>) {
    if collect {
        let scores = scale(t, matmul_nt(t, q, k), scale_by);
        let weights = softmax_rows(t, scores);
        let out = matmul(t, weights, v);
        return (out, Some(weights));
    }
    let (qv, kv, vv) = (t.value(q), t.value(k), t.value(v));
    let (q2, k2, v2) = (view2(&qv), view2(&kv), view2(&vv));
    assert_eq!(q2.ncols(), k2.ncols(), "attention: q/k width mismatch");
    assert_eq!(k2.nrows(), v2.nrows(), "attention: k/v length mismatch");
    let mut out = Array2::<f64>::zeros((q2.nrows(), v2.ncols()));
    kernels::attn_forward(&q2, &k2, &v2, scale_by, &mut out);
    let (qc, kc, vc) = (qv.clone(), kv.clone(), vv.clone());
    let var = t.push(
        shared(out.into_dyn()),
        vec![t.idx(q), t.idx(k), t.idx(v)],
        Some(Box::new(move |g| {
            let g2 = grad2(g);
            let gr = kernels::attn_backward(&view2(&qc), &view2(&kc), &view2(&vc), scale_by, &g2, None);
            vec![gr.dq.into_dyn(), gr.dk.into_dyn(), gr.dv.into_dyn()]
        })),
    );
    (var, None)
}

/// Copies columns [start, start+len) of the last axis.
pub fn narrow_last(t: &Tape, x: Var, start: usize, len: usize) -> Var {
    let xv = t.value(x);
    let c = *xv.shape().last().expect("narrow: empty input");
    assert!(start + len <= c, "narrow: range {start}+{len} exceeds width {c}");
    let x2 = as_rows(&xv, c);
    let out2 = x2.slice(s![.., start..start + len]).to_owned();
    let mut out_shape = xv.shape().to_vec();
    *out_shape.last_mut().unwrap() = len;
    let out = out2.into_shape_with_order(IxDyn(&out_shape)).expect("narrow shape");
    let x_dim = xv.raw_dim();
    t.push(
        shared(out),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / len, len))
                .expect("standard layout gradient");
            let rows = g2.nrows();
            let mut dx = Array2::<f64>::zeros((rows, c));
            dx.slice_mut(s![.., start..start + len]).assign(&g2);
            vec![dx.into_shape_with_order(x_dim.clone()).expect("input shape")]
        })),
    )
}

/// Concatenates along the last axis; leading shapes must match.
pub fn concat_last(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    let ca = *av.shape().last().expect("concat: empty lhs");
    let cb = *bv.shape().last().expect("concat: empty rhs");
    assert_eq!(
        &av.shape()[..av.ndim() - 1],
        &bv.shape()[..bv.ndim() - 1],
        "concat: leading shape mismatch"
    );
    let a2 = as_rows(&av, ca);
    let b2 = as_rows(&bv, cb);
    let rows = a2.nrows();
    let mut out = Array2::<f64>::zeros((rows, ca + cb));
    out.slice_mut(s![.., ..ca]).assign(&a2);
    out.slice_mut(s![.., ca..]).assign(&b2);
    let mut out_shape = av.shape().to_vec();
    *out_shape.last_mut().unwrap() = ca + cb;
    let out = out.into_shape_with_order(IxDyn(&out_shape)).expect("concat shape");
    let (a_dim, b_dim) = (av.raw_dim(), bv.raw_dim());
    t.push(
        shared(out),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / (ca + cb), ca + cb))
                .expect("standard layout gradient");
            let da = g2.slice(s![.., ..ca]).to_owned();
            let db = g2.slice(s![.., ca..]).to_owned();
            vec![
                da.into_shape_with_order(a_dim.clone()).expect("lhs shape"),
                db.into_shape_with_order(b_dim.clone()).expect("rhs shape"),
            ]
        })),
    )
}

pub fn reshape(t: &Tape, x: Var, shape: &[usize]) -> Var {
    let xv = t.value(x);
    assert_eq!(
        xv.len(),
        shape.iter().product::<usize>(),
        "reshape: element count mismatch"
    );
    let x_dim = xv.raw_dim();
    let out = xv
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("standard layout tensor");
    t.push(
        out,
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            vec![g
                .clone()
                .into_shape_with_order(x_dim.clone())
                .expect("standard layout gradient")]
        })),
    )
}

/// x (.., C) * s (C), broadcast over leading axes.
pub fn mul_vec_last(t: &Tape, x: Var, v: Var) -> Var {
    let (xv, vv) = (t.value(x), t.value(v));
    let c = *xv.shape().last().expect("mul_vec: empty input");
    assert_eq!(vv.len(), c, "mul_vec: vector width mismatch");
    let x2 = as_rows(&xv, c);
    let v1 = vv.view().into_shape_with_order(c).expect("vector");
    let out = (&x2 * &v1).into_shape_with_order(xv.raw_dim()).expect("input shape");
    let (xc, vc) = (xv.clone(), vv.clone());
    t.push(
        shared(out),
        vec![t.idx(x), t.idx(v)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / c, c))
                .expect("standard layout gradient");
            let x2 = as_rows(&xc, c);
            let v1 = vc.view().into_shape_with_order(c).expect("vector");
            let dx = (&g2 * &v1)
                .into_shape_with_order(xc.raw_dim())
                .expect("input shape");
            let dv = (&g2 * &x2).sum_axis(Axis(0));
            vec![dx, dv.into_dyn()]
        })),
    )
}

/// x (.., C) + s (C), broadcast over leading axes.
pub fn add_vec_last(t: &Tape, x: Var, v: Var) -> Var {
    let (xv, vv) = (t.value(x), t.value(v));
    let c = *xv.shape().last().expect("add_vec: empty input");
    assert_eq!(vv.len(), c, "add_vec: vector width mismatch");
    let x2 = as_rows(&xv, c);
    let v1 = vv.view().into_shape_with_order(c).expect("vector");
    let out = (&x2 + &v1).into_shape_with_order(xv.raw_dim()).expect("input shape");
    t.push(
        shared(out),
        vec![t.idx(x), t.idx(v)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((g.len() / c, c))
                .expect("standard layout gradient");
            let dv = g2.sum_axis(Axis(0));
            vec![g.clone(), dv.into_dyn()]
        })),
    )
}

/// Mean over all leading axes, leaving the last: (.., C) -> (C).
pub fn global_mean_leading(t: &Tape, x: Var) -> Var {
    let xv = t.value(x);
    let c = *xv.shape().last().expect("global_mean: empty input");
    let x2 = as_rows(&xv, c);
    let rows = x2.nrows();
    let out = x2.mean_axis(Axis(0)).expect("at least one row");
    let x_dim = xv.raw_dim();
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let g1 = g.view().into_shape_with_order(c).expect("vector gradient");
            let mut dx = Array2::<f64>::zeros((rows, c));
            let inv = 1.0 / rows as f64;
            for mut row in dx.rows_mut() {
                row.assign(&g1);
                row *= inv;
            }
            vec![dx.into_shape_with_order(x_dim.clone()).expect("input shape")]
        })),
    )
}

/// Scalar mean |a - b|. The subgradient at ties is zero.
pub fn mean_abs_diff(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    assert_eq!(av.shape(), bv.shape(), "mean_abs_diff: shape mismatch");
    let n = av.len() as f64;
    let total: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y).abs()).sum();
    let (ac, bc) = (av.clone(), bv.clone());
    t.push(
        super::scalar(total / n),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| {
            let gs = as_scalar(&g.view()) / n;
            let mut da = ArrayD::zeros(ac.raw_dim());
            let mut db = ArrayD::zeros(bc.raw_dim());
            {
                let das = da.as_slice_mut().expect("standard layout");
                let dbs = db.as_slice_mut().expect("standard layout");
                for (i, (x, y)) in ac.iter().zip(bc.iter()).enumerate() {
                    let s = (x - y).signum() * ((x - y) != 0.0) as i32 as f64;
                    das[i] = gs * s;
                    dbs[i] = -gs * s;
                }
            }
            vec![da, db]
        })),
    )
}

/// Scalar mean (a - b)^2.
pub fn mean_sq_diff(t: &Tape, a: Var, b: Var) -> Var {
    let (av, bv) = (t.value(a), t.value(b));
    assert_eq!(av.shape(), bv.shape(), "mean_sq_diff: shape mismatch");
    let n = av.len() as f64;
    let total: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let (ac, bc) = (av.clone(), bv.clone());
    t.push(
        super::scalar(total / n),
        vec![t.idx(a), t.idx(b)],
        Some(Box::new(move |g| {
            let gs = as_scalar(&g.view()) * 2.0 / n;
            let diff = (&ac - &bc).into_dyn();
            vec![diff.mapv(|d| gs * d), diff.mapv(|d| -gs * d)]
        })),
    )
}

/// Scalar sum x * w for a fixed weighting tensor.
pub fn dot_const(t: &Tape, x: Var, w: &Data) -> Var {
    let xv = t.value(x);
    assert_eq!(xv.shape(), w.shape(), "dot_const: shape mismatch");
    let total: f64 = xv.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    let wc = w.clone();
    t.push(
        super::scalar(total),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let gs = as_scalar(&g.view());
            vec![wc.mapv(|v| v * gs)]
        })),
    )
}

pub fn pixel_unshuffle_data(x: &ArrayView3<f64>, f: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    assert!(h % f == 0 && w % f == 0, "pixel_unshuffle: {h}x{w} not divisible by {f}");
    let mut out = Array3::<f64>::zeros((h / f, w / f, c * f * f));
    for yy in 0..h / f {
        for xx in 0..w / f {
            for ci in 0..c {
                for dy in 0..f {
                    for dx in 0..f {
                        out[[yy, xx, ci * f * f + dy * f + dx]] = x[[yy * f + dy, xx * f + dx, ci]];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_data(x: &ArrayView3<f64>, f: usize) -> Array3<f64> {
    let (h, w, cff) = x.dim();
    assert!(cff % (f * f) == 0, "pixel_shuffle: channels {cff} not divisible by {}", f * f);
    let c = cff / (f * f);
    let mut out = Array3::<f64>::zeros((h * f, w * f, c));
    for yy in 0..h {
        for xx in 0..w {
            for ci in 0..c {
                for dy in 0..f {
                    for dx in 0..f {
                        out[[yy * f + dy, xx * f + dx, ci]] = x[[yy, xx, ci * f * f + dy * f + dx]];
                    }
                }
            }
        }
    }
    out
}

/// Space-to-depth with factor f: (H, W, C) -> (H/f, W/f, C f^2). Within each
/// cell the layout is row-major, grouped per source channel.
pub fn pixel_unshuffle(t: &Tape, x: Var, f: usize) -> Var {
    let xv = t.value(x);
    let out = pixel_unshuffle_data(&view3(&xv), f);
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d gradient");
            vec![pixel_shuffle_data(&g3, f).into_dyn()]
        })),
    )
}

/// Depth-to-space with factor f; exact inverse of `pixel_unshuffle`.
pub fn pixel_shuffle(t: &Tape, x: Var, f: usize) -> Var {
    let xv = t.value(x);
    let out = pixel_shuffle_data(&view3(&xv), f);
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x)],
        Some(Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d gradient");
            vec![pixel_unshuffle_data(&g3, f).into_dyn()]
        })),
    )
}

fn im2col3(x: &ArrayView3<f64>) -> Array2<f64> {
    let (h, w, c) = x.dim();
    let mut cols = Array2::<f64>::zeros((h * w, c * 9));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ci in 0..c {
                for ky in 0..3usize {
                    let py = y as isize + ky as isize - 1;
                    if py < 0 || py >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let px = xx as isize + kx as isize - 1;
                        if px < 0 || px >= w as isize {
                            continue;
                        }
                        cols[[row, ci * 9 + ky * 3 + kx]] = x[[py as usize, px as usize, ci]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(dcols: &ArrayView2<f64>, h: usize, w: usize, c: usize) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ci in 0..c {
                for ky in 0..3usize {
                    let py = y as isize + ky as isize - 1;
                    if py < 0 || py >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let px = xx as isize + kx as isize - 1;
                        if px < 0 || px >= w as isize {
                            continue;
                        }
                        dx[[py as usize, px as usize, ci]] += dcols[[row, ci * 9 + ky * 3 + kx]];
                    }
                }
            }
        }
    }
    dx
}

/// Dense 3x3 convolution, zero padded to keep H x W. x (H, W, Ci),
/// w (Co, Ci, 3, 3), b (Co). Backward rebuilds the im2col matrix rather than
/// keeping it on the tape.
pub fn conv3x3(t: &Tape, x: Var, w: Var, b: Var) -> Var {
    let (xv, wv, bv) = (t.value(x), t.value(w), t.value(b));
    let x3 = view3(&xv);
    let (h, wd, ci) = x3.dim();
    let wsh = wv.shape().to_vec();
    assert_eq!(wsh.len(), 4, "conv3x3: weight must be (Co, Ci, 3, 3)");
    let co = wsh[0];
    assert_eq!(wsh[1], ci, "conv3x3: input channel mismatch");
    assert_eq!((wsh[2], wsh[3]), (3, 3), "conv3x3: kernel must be 3x3");
    assert_eq!(bv.len(), co, "conv3x3: bias width mismatch");
    let cols = im2col3(&x3);
    let wm = wv
        .view()
        .into_shape_with_order((co, ci * 9))
        .expect("weight layout");
    let b1 = bv.view().into_shape_with_order(co).expect("bias");
    let mut y2 = Array2::<f64>::zeros((h * wd, co));
    general_mat_mul(1.0, &cols.view(), &wm.t(), 0.0, &mut y2);
    y2 += &b1;
    let out = y2.into_shape_with_order((h, wd, co)).expect("output shape");
    let (xc, wc) = (xv.clone(), wv.clone());
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x), t.idx(w), t.idx(b)],
        Some(Box::new(move |g| {
            let g2 = g
                .view()
                .into_shape_with_order((h * wd, co))
                .expect("standard layout gradient");
            let cols = im2col3(&view3(&xc));
            let wm = wc
                .view()
                .into_shape_with_order((co, ci * 9))
                .expect("weight layout");
            let db = g2.sum_axis(Axis(0));
            let mut dwm = Array2::<f64>::zeros((co, ci * 9));
            general_mat_mul(1.0, &g2.t(), &cols.view(), 0.0, &mut dwm);
            let mut dcols = Array2::<f64>::zeros((h * wd, ci * 9));
            general_mat_mul(1.0, &g2, &wm, 0.0, &mut dcols);
            let dx = col2im3(&dcols.view(), h, wd, ci);
            vec![
                dx.into_dyn(),
                dwm.into_shape_with_order((co, ci, 3, 3)).expect("weight shape").into_dyn(),
                db.into_dyn(),
            ]
        })),
    )
}

/// Depthwise 3x3 convolution, zero padded. x (H, W, C), w (C, 3, 3), b (C).
pub fn conv3x3_dw(t: &Tape, x: Var, w: Var, b: Var) -> Var {
    let (xv, wv, bv) = (t.value(x), t.value(w), t.value(b));
    let x3 = view3(&xv);
    let (h, wd, c) = x3.dim();
    assert_eq!(wv.shape(), &[c, 3, 3], "conv3x3_dw: weight must be (C, 3, 3)");
    assert_eq!(bv.len(), c, "conv3x3_dw: bias width mismatch");
    let w3 = view3(&wv);
    let b1 = bv.view().into_shape_with_order(c).expect("bias");
    let mut out = Array3::<f64>::zeros((h, wd, c));
    for y in 0..h {
        for xx in 0..wd {
            for ci in 0..c {
                let mut acc = b1[ci];
                for ky in 0..3usize {
                    let py = y as isize + ky as isize - 1;
                    if py < 0 || py >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let px = xx as isize + kx as isize - 1;
                        if px < 0 || px >= wd as isize {
                            continue;
                        }
                        acc += x3[[py as usize, px as usize, ci]] * w3[[ci, ky, kx]];
                    }
                }
                out[[y, xx, ci]] = acc;
            }
        }
    }
    let (xc, wc) = (xv.clone(), wv.clone());
    t.push(
        shared(out.into_dyn()),
        vec![t.idx(x), t.idx(w), t.idx(b)],
        Some(Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d gradient");
            let x3 = view3(&xc);
            let w3 = view3(&wc);
            let mut dx = Array3::<f64>::zeros((h, wd, c));
            let mut dw = Array3::<f64>::zeros((c, 3, 3));
            let mut db = Array1::<f64>::zeros(c);
            for y in 0..h {
                for xx in 0..wd {
                    for ci in 0..c {
                        let go = g3[[y, xx, ci]];
                        db[ci] += go;
                        for ky in 0..3usize {
                            let py = y as isize + ky as isize - 1;
                            if py < 0 || py >= h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let px = xx as isize + kx as isize - 1;
                                if px < 0 || px >= wd as isize {
                                    continue;
                                }
                                dx[[py as usize, px as usize, ci]] += go * w3[[ci, ky, kx]];
                                dw[[ci, ky, kx]] += go * x3[[py as usize, px as usize, ci]];
                            }
                        }
                    }
                }
            }
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        })),
    )
}
