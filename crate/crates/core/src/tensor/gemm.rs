/// `c[m, n] (+)= a[m, k] · b[k, n]` with arbitrary strides on `a` and `b`.
///
/// `c` is row-major contiguous with row stride `n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if b_cs == 1 {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * a_rs + p * a_cs];
                let b_row = &b[p * b_rs..p * b_rs + n];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    } else if a_cs == 1 && b_rs == 1 {
        for i in 0..m {
            let a_row = &a[i * a_rs..i * a_rs + k];
            for j in 0..n {
                let b_col = &b[j * b_cs..j * b_cs + k];
                let dot: f64 = a_row.iter().zip(b_col).map(|(x, y)| x * y).sum();
                c[i * n + j] += dot;
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * a_rs + p * a_cs] * b[p * b_rs + j * b_cs];
                }
                c[i * n + j] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn all_stride_paths_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, k, 1, &b, n, 1, &mut c, false);
        assert_eq!(c, expect);

        // b supplied transposed: bt[j, p] = b[p, j]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &a, k, 1, &bt, 1, k, &mut c2, false);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // a supplied transposed as well
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm(m, k, n, &at, 1, m, &bt, 1, k, &mut c3, false);
        for (x, y) in c3.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
