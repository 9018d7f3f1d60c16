//! Shared numeric kernels. The autodiff tape and the KV-cache inference path
//! both call these, so a full-sequence forward and an incremental forward
//! produce bit-identical values: every reduction runs in a fixed ascending
//! order and nothing reassociates.

use crate::tensor::Scalar;

/// out[m,n] = a[m,k] @ b[k,n]. i-k-j loops; per output element the k-sum is
/// strictly ascending.
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] = o_row[j] + av * b_row[j];
            }
        }
    }
    out
}

/// out[m,n] = a[m,k] @ b[n,k]^T.
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for kk in 0..k {
                acc = acc + a_row[kk] * b_row[kk];
            }
            o_row[j] = acc;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T @ b[m,n].
pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] = o_row[j] + av * b_row[j];
            }
        }
    }
    out
}

/// Single-row x[k] @ b[k,n]; the k-outer loop mirrors `matmul_nn` so one row
/// of a full matmul and an incremental step agree bitwise.
pub fn vecmat<E: Scalar>(x: &[E], b: &[E], k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n];
    for (kk, &xv) in x.iter().take(k).enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for j in 0..n {
            out[j] = out[j] + xv * b_row[j];
        }
    }
    out
}

pub fn dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for i in 0..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub fn add_inplace<E: Scalar>(out: &mut [E], x: &[E]) {
    for i in 0..out.len() {
        out[i] = out[i] + x[i];
    }
}

/// Numerically-stable softmax over one row, in place. Max and sum scans run
/// ascending.
pub fn softmax_row<E: Scalar>(row: &mut [E]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// log-softmax over one row, in place.
pub fn log_softmax_row<E: Scalar>(row: &mut [E]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = E::zero();
    for &v in row.iter() {
        sum = sum + (v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

/// Layer norm over one row: y = (x - mean) * rstd * gamma + beta.
/// Returns (mean, rstd) for the backward pass.
pub fn layernorm_row<E: Scalar>(x: &[E], gamma: &[E], beta: &[E], eps: E, out: &mut [E]) -> (E, E) {
    let d = x.len();
    let dn = E::from_f64(d as f64);
    let mut mean = E::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / dn;
    let mut var = E::zero();
    for &v in x {
        let c = v - mean;
        var = var + c * c;
    }
    var = var / dn;
    let rstd = E::one() / (var + eps).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

/// tanh-approximation GELU.
pub fn gelu<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    let du = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * sech2 * du
}

/// Stable softplus ln(1 + e^x).
pub fn softplus<E: Scalar>(x: E) -> E {
    let z = if x > E::zero() { x } else { E::zero() };
    z + (-x.abs()).exp().ln_1p()
}

/// Stable logistic sigmoid, the softplus derivative.
pub fn sigmoid<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub fn sq_norm<E: Scalar>(x: &[E]) -> E {
    let mut acc = E::zero();
    for &v in x {
        acc = acc + v * v;
    }
    acc
}

pub fn sq_dist<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc = acc + d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        assert_eq!(matmul_nn(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn vecmat_matches_matmul_row() {
        let a: Vec<f32> = (0..12).map(|i| (i as f32) * 0.37 - 1.0).collect();
        let b: Vec<f32> = (0..20).map(|i| (i as f32) * 0.11 - 0.7).collect();
        let full = matmul_nn(&a, &b, 3, 4, 5);
        for i in 0..3 {
            let row = vecmat(&a[i * 4..(i + 1) * 4], &b, 4, 5);
            assert_eq!(&full[i * 5..(i + 1) * 5], row.as_slice());
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|i| (i as f64) * 0.3).collect(); // 2x3
        // a[2,3]^T @ b[2,3] = [3,3]
        let tn = matmul_tn(&a, &b, 2, 3, 3);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let want = matmul_nn(&at, &b, 3, 2, 3);
        for (x, y) in tn.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_normalizes() {
        let mut row = [1.0f64, 2.0, 3.0];
        softmax_row(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
