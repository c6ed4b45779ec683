//! Row-major dense kernels. All reductions run in a fixed order so results are
//! reproducible bit for bit for a given shape.

const LANES: usize = 8;

/// Dot product with eight independent accumulators, combined pairwise.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn sum(x: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let cx = x.chunks_exact(LANES);
    let rx = cx.remainder();
    for c in cx {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for v in rx {
        s += v;
    }
    s
}

const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `e^x` for `x <= 0`, branch-free so loops over it vectorize. Inputs below
/// -708 are clamped there. Relative error is a few ulp.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    let x = x.max(-708.0);
    let shifted = x * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (shifted.to_bits() as i64).wrapping_sub(ROUND_MAGIC.to_bits() as i64);
    p * f64::from_bits(((ki + 1023) as u64) << 52)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn nn_axpy(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

fn nt_dot(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c(m×n) += a(m×k) · b(k×n)`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n >= LANES || k < LANES {
        nn_axpy(a, b, c, m, k, n);
    } else {
        let bt = transpose(b, k, n);
        nt_dot(a, &bt, c, m, k, n);
    }
}

/// `c(m×n) += a(m×k) · b(n×k)ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if k >= LANES || n < LANES {
        nt_dot(a, b, c, m, k, n);
    } else {
        let bt = transpose(b, n, k);
        nn_axpy(a, &bt, c, m, k, n);
    }
}

/// `c(k×n) += a(m×k)ᵀ · b(m×n)`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n >= LANES || m < LANES {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for (p, &aip) in a_row.iter().enumerate() {
                axpy(aip, b_row, &mut c[p * n..(p + 1) * n]);
            }
        }
    } else {
        let at = transpose(a, m, k);
        let bt = transpose(b, m, n);
        nt_dot(&at, &bt, c, k, m, n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn seq(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn exp_matches_std_to_a_few_ulp() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -(i as f64) * 3.5e-3;
            let (a, b) = (exp_nonpositive(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-1e4) < 1e-300);
    }

    #[test]
    fn all_gemm_layouts_agree_with_naive() {
        for &(m, k, n) in &[(3, 4, 2), (9, 17, 3), (5, 2, 11), (12, 9, 10), (1, 1, 1)] {
            let a = seq(m * k, 1.0);
            let b = seq(k * n, 2.0);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut c, m, k, n);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            let bt = transpose(&b, k, n);
            let mut c = vec![0.0; m * n];
            gemm_nt(&a, &bt, &mut c, m, k, n);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

            let at = transpose(&a, m, k);
            let mut c = vec![0.0; m * n];
            gemm_tn(&at, &b, &mut c, k, m, n);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(dot(&a, &a), (1..=11).map(|x| (x * x) as f64).sum::<f64>());
        assert_eq!(sum(&a), 66.0);
    }
}
