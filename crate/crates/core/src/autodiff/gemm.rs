//! Dense `C += A * B` on row-major `f64` slices. Each output element
//! accumulates its products in increasing inner-index order, so results do
//! not depend on the blocking or on the instruction set picked at runtime.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m x n] += a[m x k] * b[k x n]`.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected above.
            unsafe { gemm_acc_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_acc_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_acc_body(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_acc_body(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let panels = m.div_ceil(MR);
    let mut apack = vec![0.0; panels * k * MR];
    for p in 0..panels {
        let rows = MR.min(m - p * MR);
        let dst = &mut apack[p * k * MR..(p + 1) * k * MR];
        for r in 0..rows {
            let src = &a[(p * MR + r) * k..(p * MR + r + 1) * k];
            for (kk, v) in src.iter().enumerate() {
                dst[kk * MR + r] = *v;
            }
        }
    }
    let mut bpack = vec![0.0; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let cols = NR.min(n - j0);
        for kk in 0..k {
            let dst = &mut bpack[kk * NR..kk * NR + NR];
            dst[..cols].copy_from_slice(&b[kk * n + j0..kk * n + j0 + cols]);
            dst[cols..].fill(0.0);
        }
        for p in 0..panels {
            let i0 = p * MR;
            let rows = MR.min(m - i0);
            let ap = &apack[p * k * MR..(p + 1) * k * MR];
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate().take(rows) {
                row[..cols].copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + cols]);
            }
            let acc = microkernel(ap, &bpack, acc);
            for (r, row) in acc.iter().enumerate().take(rows) {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + cols].copy_from_slice(&row[..cols]);
            }
        }
        j0 += NR;
    }
}

#[inline(always)]
fn microkernel(ap: &[f64], bp: &[f64], mut acc: [[f64; NR]; MR]) -> [[f64; NR]; MR] {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        let av: &[f64; MR] = av.try_into().unwrap();
        let bv: &[f64; NR] = bv.try_into().unwrap();
        for r in 0..MR {
            for j in 0..NR {
                acc[r][j] += av[r] * bv[j];
            }
        }
    }
    acc
}

/// `c[m x n] += a[m x k] * b[n x k]^T`. Each inner product is split into
/// four interleaved partial sums that are combined in a fixed order.
pub fn gemm_abt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected above.
            unsafe { gemm_abt_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_abt_body(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_abt_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_abt_body(m, k, n, a, b, c);
}

const LANES: usize = 4;
const AR: usize = 2;
const BR: usize = 4;

#[inline(always)]
fn dot_block<const R: usize, const S: usize>(a: [&[f64]; R], b: [&[f64]; S], k: usize) -> [[f64; S]; R] {
    let mut acc = [[[0.0; LANES]; S]; R];
    let body = k / LANES * LANES;
    for k0 in (0..body).step_by(LANES) {
        let av: [&[f64; LANES]; R] = std::array::from_fn(|i| a[i][k0..k0 + LANES].try_into().unwrap());
        let bv: [&[f64; LANES]; S] = std::array::from_fn(|j| b[j][k0..k0 + LANES].try_into().unwrap());
        for i in 0..R {
            for j in 0..S {
                for l in 0..LANES {
                    acc[i][j][l] += av[i][l] * bv[j][l];
                }
            }
        }
    }
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let mut t = acc[i][j];
            for (l, kk) in (body..k).enumerate() {
                t[l] += a[i][kk] * b[j][kk];
            }
            (t[0] + t[1]) + (t[2] + t[3])
        })
    })
}

#[inline(always)]
fn row(x: &[f64], i: usize, k: usize) -> &[f64] {
    &x[i * k..(i + 1) * k]
}

#[inline(always)]
fn gemm_abt_body(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut i = 0;
    while i < m {
        let full_a = i + AR <= m;
        let mut j = 0;
        while j < n {
            if full_a && j + BR <= n {
                let d = dot_block::<AR, BR>(
                    std::array::from_fn(|r| row(a, i + r, k)),
                    std::array::from_fn(|s| row(b, j + s, k)),
                    k,
                );
                for (r, dr) in d.iter().enumerate() {
                    for (s, v) in dr.iter().enumerate() {
                        c[(i + r) * n + j + s] += v;
                    }
                }
                j += BR;
            } else {
                let rows = if full_a { AR } else { 1 };
                for r in 0..rows {
                    let d = dot_block::<1, 1>([row(a, i + r, k)], [row(b, j, k)], k);
                    c[(i + r) * n + j] += d[0][0];
                }
                j += 1;
            }
        }
        i += if full_a { AR } else { 1 };
    }
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
