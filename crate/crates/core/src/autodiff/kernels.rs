//! Dense matrix kernels. Rows of the output are computed independently, so
//! the row-parallel path produces the same bits as the sequential one.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m,k]^T * g[m,n]` -> `[k,n]`
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if n == 0 {
        return out;
    }
    let row = |(p, o): (usize, &mut [f64])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gr = &g[i * n..(i + 1) * n];
            for (ov, &gv) in o.iter_mut().zip(gr) {
                *ov += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `g[m,n] * b[k,n]^T` -> `[m,k]`
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    let row = |(i, o): (usize, &mut [f64])| {
        let gr = &g[i * n..(i + 1) * n];
        for (p, ov) in o.iter_mut().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            *ov = gr.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        // a^T (3x2) as explicit data
        let at = vec![a[0], a[3], a[1], a[4], a[2], a[5]];
        let via_at = matmul_at_b(&a, &ab, 2, 3, 4);
        let expect_at = matmul(&at, &ab, 3, 2, 4);
        for (x, y) in via_at.iter().zip(&expect_at) {
            assert!((x - y).abs() < 1e-12);
        }
        // g b^T with g = ab, b is 3x4 -> 2x3
        let gbt = matmul_a_bt(&ab, &b, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                bt[c * 3 + r] = b[r * 4 + c];
            }
        }
        let expect = matmul(&ab, &bt, 2, 4, 3);
        for (x, y) in gbt.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
