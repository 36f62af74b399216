//! Forward kernels shared by the graph ops and the inference paths.

use super::{Result, Tensor, TensorError};

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self::strided(rows, cols, cols)
    }

    /// `rows x cols` block inside a matrix whose rows are `stride` apart.
    pub fn strided(rows: usize, cols: usize, stride: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: stride as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = beta * c + a · b` on strided views.
pub fn matmul_into(
    a: &[f64],
    la: MatLayout,
    b: &[f64],
    lb: MatLayout,
    c: &mut [f64],
    lc: MatLayout,
    beta: f64,
) {
    debug_assert_eq!(la.cols, lb.rows);
    debug_assert_eq!(la.rows, lc.rows);
    debug_assert_eq!(lb.cols, lc.cols);
    if la.rows == 0 || lb.cols == 0 {
        return;
    }
    if la.rows == 1 {
        return vecmat_into(a, la, b, lb, c, lc, beta);
    }
    // SAFETY: the layouts describe in-bounds views of the given slices;
    // callers build them from tensor shapes checked beforehand.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            1.0,
            a.as_ptr(),
            la.row_stride,
            la.col_stride,
            b.as_ptr(),
            lb.row_stride,
            lb.col_stride,
            beta,
            c.as_mut_ptr(),
            lc.row_stride,
            lc.col_stride,
        );
    }
}

/// One-row case of [`matmul_into`]. gemm packs both operands on every
/// call, which dominates when `a` is a single row (incremental decode).
fn vecmat_into(a: &[f64], la: MatLayout, b: &[f64], lb: MatLayout, c: &mut [f64], lc: MatLayout, beta: f64) {
    let (k, n) = (lb.rows, lb.cols);
    let (ra, rb, cb, cc) = (la.col_stride, lb.row_stride, lb.col_stride, lc.col_stride);
    let at = |i: usize| a[(i as isize * ra) as usize];
    let bt = |i: usize, j: usize| b[(i as isize * rb + j as isize * cb) as usize];
    for j in 0..n {
        let cj = &mut c[(j as isize * cc) as usize];
        *cj = if beta == 0.0 { 0.0 } else { beta * *cj };
    }
    if rb == 1 {
        // Columns of `b` are contiguous: one dot product per output.
        for j in 0..n {
            let col = &b[(j as isize * cb) as usize..][..k];
            let mut acc = 0.0;
            for (i, bv) in col.iter().enumerate() {
                acc += at(i) * bv;
            }
            c[(j as isize * cc) as usize] += acc;
        }
    } else if cb == 1 && cc == 1 {
        let out = &mut c[..n];
        for i in 0..k {
            let ai = at(i);
            let row = &b[(i as isize * rb) as usize..][..n];
            for (y, bv) in out.iter_mut().zip(row) {
                *y += ai * bv;
            }
        }
    } else {
        for i in 0..k {
            let ai = at(i);
            for j in 0..n {
                c[(j as isize * cc) as usize] += ai * bt(i, j);
            }
        }
    }
}

/// `y = x · w + b` where `x` is `[..., I]`, `w` is `[I, O]` and `b` is `[O]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.shape().len() != 2 || x.last_dim() != w.shape()[0] {
        return Err(TensorError::Shape {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let m = x.rows();
    let mut out = vec![0.0; m * o];
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(TensorError::Shape {
                op: "linear bias",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    matmul_into(
        x.data(),
        MatLayout::row_major(m, i),
        w.data(),
        MatLayout::row_major(i, o),
        &mut out,
        MatLayout::row_major(m, o),
        if b.is_some() { 1.0 } else { 0.0 },
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = o;
    let y = Tensor::new(shape, out)?;
    y.ensure_finite("linear")?;
    Ok(y)
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[B, Tq, D]`, `k` and `v` are `[B, Tk, D]` with `Tq <= Tk`. Under
/// `causal`, query `i` sees keys `0..=i + (Tk - Tq)`, so a single query over
/// a key cache attends to everything before it. Returns the output and the
/// attention probabilities `[B, H, Tq, Tk]`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let shape_err = || TensorError::Shape {
        op: "attention",
        lhs: q.shape().to_vec(),
        rhs: k.shape().to_vec(),
    };
    if q.shape().len() != 3 || k.shape() != v.shape() || k.shape().len() != 3 {
        return Err(shape_err());
    }
    let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let tk = k.shape()[1];
    if k.shape()[0] != b || k.shape()[2] != d || tq > tk || heads == 0 || d % heads != 0 {
        return Err(shape_err());
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = tk - tq;
    let mut probs = vec![0.0; b * heads * tq * tk];
    let mut out = vec![0.0; b * tq * d];
    for bi in 0..b {
        for h in 0..heads {
            let p = &mut probs[(bi * heads + h) * tq * tk..][..tq * tk];
            let qo = bi * tq * d + h * dh;
            let ko = bi * tk * d + h * dh;
            matmul_into(
                &q.data()[qo..],
                MatLayout::strided(tq, dh, d),
                &k.data()[ko..],
                MatLayout::strided(tk, dh, d).t(),
                p,
                MatLayout::row_major(tq, tk),
                0.0,
            );
            for (i, row) in p.chunks_exact_mut(tk).enumerate() {
                let visible = if causal { i + offset + 1 } else { tk };
                let mut max = f64::NEG_INFINITY;
                for s in &mut row[..visible] {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in &mut row[..visible] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in &mut row[..visible] {
                    *s /= z;
                }
                row[visible..].fill(0.0);
            }
            matmul_into(
                p,
                MatLayout::row_major(tq, tk),
                &v.data()[ko..],
                MatLayout::strided(tk, dh, d),
                &mut out[qo..],
                MatLayout::strided(tq, dh, d),
                0.0,
            );
        }
    }
    let out = Tensor::new(vec![b, tq, d], out)?;
    out.ensure_finite("attention")?;
    Ok((out, probs))
}

/// Single-head attention `softmax(q·kᵀ/√D)·v` over `[B, T, D]` inputs.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    if q.shape() != k.shape() {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    multi_head_attention(q, k, v, 1, causal).map(|(o, _)| o)
}

/// Layer normalization over the last axis. Returns the output, the
/// normalized pre-affine values and the per-row reciprocal std.
pub(crate) fn layernorm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::Shape {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "layernorm eps must be positive, got {eps}"
        )));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (xr[j] - mean) * rs;
            o[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("layernorm")?;
    Ok((out, xhat, rstd))
}

pub fn layernorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_parts(x, gamma, beta, eps).map(|(o, _, _)| o)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_weights() {
        let y = linear_forward(
            &t(&[1, 2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            Some(&t(&[2], &[0.0, 0.0])),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_dot_product() {
        let y = linear_forward(
            &t(&[1, 2], &[1.0, 1.0]),
            &t(&[2, 1], &[2.0, 3.0]),
            Some(&t(&[1], &[1.0])),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = Rng::new(7);
        for (m, i, o) in [(5, 7, 3), (1, 9, 4)] {
            check_linear(m, i, o, &mut rng);
        }
    }

    fn check_linear(m: usize, i: usize, o: usize, rng: &mut Rng) {
        let x = Tensor::randn(&[m, i], 1.0, rng);
        let w = Tensor::randn(&[i, o], 1.0, rng);
        let b = Tensor::randn(&[o], 1.0, rng);
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        for r in 0..m {
            for c in 0..o {
                let mut acc = b.data()[c];
                for k in 0..i {
                    acc += x.data()[r * i + k] * w.data()[k * o + c];
                }
                assert!((y.data()[r * o + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_matmul_matches_naive_for_every_layout() {
        let mut rng = Rng::new(3);
        let (k, n) = (5, 4);
        let a = Tensor::randn(&[k], 1.0, &mut rng);
        let bm = Tensor::randn(&[k, n], 1.0, &mut rng);
        let bt: Vec<f64> = (0..n).flat_map(|j| (0..k).map(move |i| (i, j))).map(|(i, j)| bm.data()[i * n + j]).collect();
        let expect: Vec<f64> = (0..n).map(|j| 0.5 + (0..k).map(|i| a.data()[i] * bm.data()[i * n + j]).sum::<f64>()).collect();
        let layouts = [(bm.data(), MatLayout::row_major(k, n)), (&bt[..], MatLayout::row_major(n, k).t())];
        for (b, lb) in layouts {
            // Output written with a column stride of 2.
            let mut c = vec![0.25; 2 * n];
            let lc = MatLayout { rows: 1, cols: n, row_stride: 2 * n as isize, col_stride: 2 };
            matmul_into(a.data(), MatLayout::row_major(1, k), b, lb, &mut c, lc, 2.0);
            for j in 0..n {
                assert!((c[2 * j] - expect[j]).abs() < 1e-12);
                assert_eq!(c[2 * j + 1], 0.25);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear_forward(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 1]), None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 1]"), "{err}");
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut rng = Rng::new(1);
        let q = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 1, 4], 1.0, &mut rng);
        let o = attention_forward(&q, &k, &v, false).unwrap();
        assert_eq!(o.data(), v.data());
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut rng = Rng::new(2);
        let q = Tensor::randn(&[1, 4, 6], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 4, 6], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 4, 6], 1.0, &mut rng);
        let (_, p) = multi_head_attention(&q, &k, &v, 2, true).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                let row = &p[(h * 4 + i) * 4..][..4];
                for (j, &w) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(w, 0.0);
                    }
                }
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let (b, tt, d) = (2, 3, 4);
        let q = Tensor::randn(&[b, tt, d], 1.0, &mut rng);
        let k = Tensor::randn(&[b, tt, d], 1.0, &mut rng);
        let v = Tensor::randn(&[b, tt, d], 1.0, &mut rng);
        for causal in [false, true] {
            let o = attention_forward(&q, &k, &v, causal).unwrap();
            for bi in 0..b {
                for i in 0..tt {
                    let at = |x: &Tensor, t: usize, c: usize| x.data()[(bi * tt + t) * d + c];
                    let visible = if causal { i + 1 } else { tt };
                    let scores: Vec<f64> = (0..visible)
                        .map(|j| (0..d).map(|c| at(&q, i, c) * at(&k, j, c)).sum::<f64>() / 2.0)
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..d {
                        let want: f64 = (0..visible).map(|j| e[j] / z * at(&v, j, c)).sum();
                        assert!((at(&o, i, c) - want).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let y = layernorm_forward(
            &t(&[1, 3], &[5.0, 5.0, 5.0]),
            &Tensor::full(&[3], 1.0),
            &Tensor::zeros(&[3]),
            1e-5,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_zero_gamma_collapses_to_beta() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let y = layernorm_forward(&x, &Tensor::zeros(&[5]), &Tensor::full(&[5], 0.25), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn layernorm_pre_affine_moments() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[1, 16], 3.0, &mut rng);
        let y = layernorm_forward(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-12)
            .unwrap();
        let mean = y.sum() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
