//! Register-tiled matrix products.
//!
//! Every output element is accumulated from `0.0` over the inner index in
//! ascending order with fused multiply-adds, and only then written (or
//! added) to the output, whatever the tile or block it falls in. A batch of
//! rows therefore produces bit-identical results to the same rows computed
//! one at a time, and every code path agrees with every other.

use super::WriteMode;

const RB: usize = 6;
const JB: usize = 8;
/// Batches below this skip packing the weights.
const PACK_MIN_ROWS: usize = 8;
/// Rows per cache block of the batch-reducing product.
const ROW_BLOCK: usize = 128;

#[inline(always)]
fn store(out: &mut [f64], idx: usize, v: f64, mode: WriteMode) {
    match mode {
        WriteMode::Overwrite => out[idx] = v,
        WriteMode::Accumulate => out[idx] += v,
    }
}

/// Weight columns `[j0, j0 + JB)` for every inner index, contiguous, with
/// columns past `n` zero.
fn pack(m: usize, n: usize, at: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let strips = n.div_ceil(JB);
    let mut p = vec![0.0; strips * m * JB];
    for s in 0..strips {
        let j0 = s * JB;
        let jw = (n - j0).min(JB);
        for k in 0..m {
            let dst = &mut p[(s * m + k) * JB..(s * m + k) * JB + jw];
            for (jj, d) in dst.iter_mut().enumerate() {
                *d = at(k, j0 + jj);
            }
        }
    }
    p
}

/// Full `RB × JB` tile of `x · strip` for `RB` rows of `x`.
#[inline(always)]
fn tile(x: &[f64], strip: &[f64], m: usize, simd: bool) -> [[f64; JB]; RB] {
    #[cfg(target_arch = "x86_64")]
    if simd {
        // SAFETY: `simd` is only set after detecting avx2 and fma.
        return unsafe { tile_avx2(x, strip, m) };
    }
    let _ = simd;
    let mut acc = [[0.0f64; JB]; RB];
    for (k, wr) in strip.chunks_exact(JB).enumerate() {
        for (i, row) in acc.iter_mut().enumerate() {
            let xv = x[i * m + k];
            for (a, &w) in row.iter_mut().zip(wr) {
                *a = xv.mul_add(w, *a);
            }
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tile_avx2(x: &[f64], strip: &[f64], m: usize) -> [[f64; JB]; RB] {
    use std::arch::x86_64::*;
    assert!(x.len() >= RB * m && strip.len() >= m * JB);
    let xp = x.as_ptr();
    let wp = strip.as_ptr();
    let mut acc = [[_mm256_setzero_pd(); 2]; RB];
    for k in 0..m {
        let w0 = _mm256_loadu_pd(wp.add(k * JB));
        let w1 = _mm256_loadu_pd(wp.add(k * JB + 4));
        for (i, a) in acc.iter_mut().enumerate() {
            let xv = _mm256_broadcast_sd(&*xp.add(i * m + k));
            a[0] = _mm256_fmadd_pd(xv, w0, a[0]);
            a[1] = _mm256_fmadd_pd(xv, w1, a[1]);
        }
    }
    let mut out = [[0.0f64; JB]; RB];
    for (o, a) in out.iter_mut().zip(&acc) {
        _mm256_storeu_pd(o.as_mut_ptr(), a[0]);
        _mm256_storeu_pd(o.as_mut_ptr().add(4), a[1]);
    }
    out
}

/// `out[r, j] = Σ_k x[r, k] · w[k, j]` with `x: [rows, m]` and `w` packed
/// by [`pack`] from an `[m, n]` matrix.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn matmul_packed(x: &[f64], packed: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode, simd: bool) {
    let mut r0 = 0;
    while r0 < rows {
        let rr = (rows - r0).min(RB);
        for (s, strip) in packed.chunks_exact(m * JB).enumerate() {
            let j0 = s * JB;
            let jw = (n - j0).min(JB);
            let mut acc = [[0.0f64; JB]; RB];
            if rr == RB {
                acc = tile(&x[r0 * m..(r0 + RB) * m], strip, m, simd);
            } else {
                for i in 0..rr {
                    let xr = &x[(r0 + i) * m..(r0 + i + 1) * m];
                    for (wr, &xv) in strip.chunks_exact(JB).zip(xr) {
                        let wr: &[f64; JB] = wr.try_into().unwrap();
                        for jj in 0..JB {
                            acc[i][jj] = xv.mul_add(wr[jj], acc[i][jj]);
                        }
                    }
                }
            }
            for (i, row) in acc.iter().enumerate().take(rr) {
                for (jj, &v) in row.iter().enumerate().take(jw) {
                    store(out, (r0 + i) * n + j0 + jj, v, mode);
                }
            }
        }
        r0 += RB;
    }
}

/// `out[r, j] = Σ_k x[r, k] · w[k, j]` row by row, for small batches.
#[inline(always)]
fn matmul_rows(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    for r in 0..rows {
        let xr = &x[r * m..(r + 1) * m];
        let mut j0 = 0;
        while j0 < n {
            let jw = (n - j0).min(JB);
            let mut acc = [0.0f64; JB];
            if jw == JB {
                for (k, &xv) in xr.iter().enumerate() {
                    let wr: &[f64; JB] = w[k * n + j0..k * n + j0 + JB].try_into().unwrap();
                    for jj in 0..JB {
                        acc[jj] = xv.mul_add(wr[jj], acc[jj]);
                    }
                }
            } else {
                for (k, &xv) in xr.iter().enumerate() {
                    for jj in 0..jw {
                        acc[jj] = xv.mul_add(w[k * n + j0 + jj], acc[jj]);
                    }
                }
            }
            for (jj, &v) in acc.iter().enumerate().take(jw) {
                store(out, r * n + j0 + jj, v, mode);
            }
            j0 += JB;
        }
    }
}

#[inline(always)]
fn matmul_body(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    if rows < PACK_MIN_ROWS {
        return matmul_rows(x, w, out, rows, m, n, mode);
    }
    let packed = pack(m, n, |k, j| w[k * n + j]);
    matmul_packed(x, &packed, out, rows, m, n, mode, has_simd())
}

/// `out[r, k] = Σ_j g[r, j] · w[k, j]` through a packed transpose of `w`.
#[inline(always)]
fn matmul_tb_packed(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    let packed = pack(n, m, |j, k| w[k * n + j]);
    matmul_packed(g, &packed, out, rows, n, m, mode, has_simd())
}

/// Continues the full tile at `(i0, j0)` of `x^T g` over `rows`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn ta_tile(
    x: &[f64],
    g: &[f64],
    acc: &mut [[f64; JB]; RB],
    rows: std::ops::Range<usize>,
    i0: usize,
    j0: usize,
    m: usize,
    n: usize,
    simd: bool,
) {
    #[cfg(target_arch = "x86_64")]
    if simd {
        // SAFETY: `simd` is only set after detecting avx2 and fma.
        return unsafe { ta_tile_avx2(x, g, acc, rows, i0, j0, m, n) };
    }
    let _ = simd;
    for r in rows {
        let xr: &[f64; RB] = x[r * m + i0..r * m + i0 + RB].try_into().unwrap();
        let gr: &[f64; JB] = g[r * n + j0..r * n + j0 + JB].try_into().unwrap();
        for i in 0..RB {
            for jj in 0..JB {
                acc[i][jj] = xr[i].mul_add(gr[jj], acc[i][jj]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
#[target_feature(enable = "avx2,fma")]
unsafe fn ta_tile_avx2(
    x: &[f64],
    g: &[f64],
    acc: &mut [[f64; JB]; RB],
    rows: std::ops::Range<usize>,
    i0: usize,
    j0: usize,
    m: usize,
    n: usize,
) {
    use std::arch::x86_64::*;
    if rows.is_empty() {
        return;
    }
    assert!(i0 + RB <= m && j0 + JB <= n && x.len() >= rows.end * m && g.len() >= rows.end * n);
    let mut a = [[_mm256_setzero_pd(); 2]; RB];
    for (ai, row) in a.iter_mut().zip(acc.iter()) {
        ai[0] = _mm256_loadu_pd(row.as_ptr());
        ai[1] = _mm256_loadu_pd(row.as_ptr().add(4));
    }
    let (xp, gp) = (x.as_ptr(), g.as_ptr());
    for r in rows {
        let g0 = _mm256_loadu_pd(gp.add(r * n + j0));
        let g1 = _mm256_loadu_pd(gp.add(r * n + j0 + 4));
        for (i, ai) in a.iter_mut().enumerate() {
            let xv = _mm256_broadcast_sd(&*xp.add(r * m + i0 + i));
            ai[0] = _mm256_fmadd_pd(xv, g0, ai[0]);
            ai[1] = _mm256_fmadd_pd(xv, g1, ai[1]);
        }
    }
    for (row, ai) in acc.iter_mut().zip(&a) {
        _mm256_storeu_pd(row.as_mut_ptr(), ai[0]);
        _mm256_storeu_pd(row.as_mut_ptr().add(4), ai[1]);
    }
}

/// Adds `Σ_r x[r, i] · g[r, j]` over the given rows onto the running sums
/// in `part: [m, n]`.
#[inline(always)]
fn matmul_ta_block(x: &[f64], g: &[f64], part: &mut [f64], rows: std::ops::Range<usize>, m: usize, n: usize, simd: bool) {
    let mut i0 = 0;
    while i0 < m {
        let iw = (m - i0).min(RB);
        let mut j0 = 0;
        while j0 < n {
            let jw = (n - j0).min(JB);
            let mut acc = [[0.0f64; JB]; RB];
            for (i, row) in acc.iter_mut().enumerate().take(iw) {
                row[..jw].copy_from_slice(&part[(i0 + i) * n + j0..(i0 + i) * n + j0 + jw]);
            }
            if iw == RB && jw == JB {
                ta_tile(x, g, &mut acc, rows.clone(), i0, j0, m, n, simd);
            } else {
                for r in rows.clone() {
                    let xr = &x[r * m + i0..r * m + i0 + iw];
                    let gr = &g[r * n + j0..r * n + j0 + jw];
                    for i in 0..iw {
                        for jj in 0..jw {
                            acc[i][jj] = xr[i].mul_add(gr[jj], acc[i][jj]);
                        }
                    }
                }
            }
            for (i, row) in acc.iter().enumerate().take(iw) {
                part[(i0 + i) * n + j0..(i0 + i) * n + j0 + jw].copy_from_slice(&row[..jw]);
            }
            j0 += JB;
        }
        i0 += RB;
    }
}

/// `out[i, j] = Σ_r x[r, i] · g[r, j]` with `x: [rows, m]`, `g: [rows, n]`.
#[inline(always)]
fn matmul_ta_body(x: &[f64], g: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    if rows == 1 {
        for (i, &xv) in x[..m].iter().enumerate() {
            for (j, &gv) in g[..n].iter().enumerate() {
                store(out, i * n + j, xv * gv, mode);
            }
        }
        return;
    }
    let mut part = vec![0.0; m * n];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + ROW_BLOCK).min(rows);
        matmul_ta_block(x, g, &mut part, r0..r1, m, n, has_simd());
        r0 = r1;
    }
    for (idx, &v) in part.iter().enumerate() {
        store(out, idx, v, mode);
    }
}

/// `out[r, k] = Σ_j g[r, j] · w[k, j]` with `g: [rows, n]`, `w: [m, n]`.
#[inline(always)]
fn matmul_tb_body(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    if rows < PACK_MIN_ROWS {
        return dot_rows_body(g, w, out, rows, m, n, mode);
    }
    matmul_tb_packed(g, w, out, rows, m, n, mode)
}

#[inline(always)]
fn dot_rows_body(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    for r in 0..rows {
        let gr = &g[r * n..(r + 1) * n];
        let mut k = 0;
        while k + 4 <= m {
            let ws: [&[f64]; 4] = std::array::from_fn(|i| &w[(k + i) * n..(k + i + 1) * n]);
            let mut acc = [0.0f64; 4];
            for (j, &gv) in gr.iter().enumerate() {
                for i in 0..4 {
                    acc[i] = gv.mul_add(ws[i][j], acc[i]);
                }
            }
            for (i, &v) in acc.iter().enumerate() {
                store(out, r * m + k + i, v, mode);
            }
            k += 4;
        }
        while k < m {
            let wk = &w[k * n..(k + 1) * n];
            let mut acc = 0.0f64;
            for (gv, wv) in gr.iter().zip(wk) {
                acc = gv.mul_add(*wv, acc);
            }
            store(out, r * m + k, acc, mode);
            k += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_simd(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    matmul_body(x, w, out, rows, m, n, mode)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_ta_simd(x: &[f64], g: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    matmul_ta_body(x, g, out, rows, m, n, mode)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_tb_simd(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    matmul_tb_body(g, w, out, rows, m, n, mode)
}

#[inline]
fn has_simd() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(super) fn matmul(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    #[cfg(target_arch = "x86_64")]
    if has_simd() {
        // SAFETY: the avx2 and fma features were detected at runtime.
        return unsafe { matmul_simd(x, w, out, rows, m, n, mode) };
    }
    matmul_body(x, w, out, rows, m, n, mode)
}

pub(super) fn matmul_trans_a(x: &[f64], g: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    #[cfg(target_arch = "x86_64")]
    if has_simd() {
        // SAFETY: the avx2 and fma features were detected at runtime.
        return unsafe { matmul_ta_simd(x, g, out, rows, m, n, mode) };
    }
    matmul_ta_body(x, g, out, rows, m, n, mode)
}

pub(super) fn matmul_trans_b(g: &[f64], w: &[f64], out: &mut [f64], rows: usize, m: usize, n: usize, mode: WriteMode) {
    #[cfg(target_arch = "x86_64")]
    if has_simd() {
        // SAFETY: the avx2 and fma features were detected at runtime.
        return unsafe { matmul_tb_simd(g, w, out, rows, m, n, mode) };
    }
    matmul_tb_body(g, w, out, rows, m, n, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], rows: usize, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..m {
                    acc = x[r * m + k].mul_add(w[k * n + j], acc);
                }
                out[r * n + j] = acc;
            }
        }
        out
    }

    fn seq(len: usize, salt: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + salt) * 0.37).sin()).collect()
    }

    #[test]
    fn tiled_matches_naive_bitwise() {
        for &(rows, m, n) in &[(1, 3, 5), (4, 8, 8), (9, 13, 17), (5, 1, 1), (12, 20, 9)] {
            let x = seq(rows * m, 0.5);
            let w = seq(m * n, 1.5);
            let mut out = vec![0.0; rows * n];
            matmul(&x, &w, &mut out, rows, m, n, WriteMode::Overwrite);
            assert_eq!(out, naive(&x, &w, rows, m, n));
        }
    }

    #[test]
    fn trans_b_paths_agree() {
        let (m, n) = (7, 11);
        let w = seq(m * n, 2.0);
        let g = seq(16 * n, 3.0);
        let mut batched = vec![0.0; 16 * m];
        matmul_trans_b(&g, &w, &mut batched, 16, m, n, WriteMode::Overwrite);
        for r in 0..16 {
            let mut single = vec![0.0; m];
            matmul_trans_b(&g[r * n..(r + 1) * n], &w, &mut single, 1, m, n, WriteMode::Overwrite);
            assert_eq!(&batched[r * m..(r + 1) * m], &single[..]);
        }
    }

    #[test]
    fn trans_a_matches_naive() {
        let (rows, m, n) = (6, 5, 10);
        let x = seq(rows * m, 0.1);
        let g = seq(rows * n, 0.2);
        let mut out = vec![1.0; m * n];
        matmul_trans_a(&x, &g, &mut out, rows, m, n, WriteMode::Accumulate);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for r in 0..rows {
                    acc = x[r * m + i].mul_add(g[r * n + j], acc);
                }
                assert_eq!(out[i * n + j], 1.0 + acc);
            }
        }
    }

    #[test]
    fn trans_a_row_blocks_match_unblocked_order() {
        let (rows, m, n) = (ROW_BLOCK * 2 + 37, 6, 9);
        let x = seq(rows * m, 0.7);
        let g = seq(rows * n, 0.9);
        let mut out = vec![0.0; m * n];
        matmul_trans_a(&x, &g, &mut out, rows, m, n, WriteMode::Overwrite);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for r in 0..rows {
                    acc = x[r * m + i].mul_add(g[r * n + j], acc);
                }
                assert_eq!(out[i * n + j], acc);
            }
        }
    }
}
