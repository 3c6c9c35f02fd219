//! Integer kernels. Activations enter as `q − zero_point` in `i16`, weights as
//! `i16`, and products are summed pairwise into `i32` (`pmaddwd` on x86-64).
//!
//! Pair-packed layout: a `K × N` operand is stored as `⌈K/2⌉ × N` pairs,
//! element `(k, n)` at `[((k / 2) · N + n) · 2 + k % 2]`.

const NB: usize = 256;
const KPB: usize = 128;

/// Unfolds one `(C, H, W)` u8 map into the pair-packed `(C·K·K) × n_total`
/// buffer at column offset `col0`, subtracting `zp`; padding becomes 0.
pub(crate) fn im2col_pairs(
    src: &[u8],
    zp: u8,
    (c, h, w): (usize, usize, usize),
    k: usize,
    dst: &mut [i16],
    n_total: usize,
    col0: usize,
) {
    let pad = (k / 2) as isize;
    let z = zp as i16;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ch * k + dy) * k + dx;
                let (kp, lane) = (row / 2, row % 2);
                let base = kp * n_total + col0;
                let ox = dx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy as isize - pad;
                    let out = &mut dst[(base + y * w) * 2..(base + (y + 1) * w) * 2];
                    if sy < 0 || sy >= h as isize {
                        for x in 0..w {
                            out[2 * x + lane] = 0;
                        }
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + ox;
                        out[2 * x + lane] = if sx < 0 || sx >= w as isize { 0 } else { srow[sx as usize] as i16 - z };
                    }
                }
            }
        }
    }
}

/// Packs `(F, K)` int8 weights into one `i32` per `(f, k-pair)`: low half
/// `w[f][2p]`, high half `w[f][2p+1]` (0 past the end).
pub(crate) fn pack_weight_pairs(weights: &[i8], f: usize, k: usize) -> Vec<i32> {
    let kp = k.div_ceil(2);
    let mut out = vec![0i32; f * kp];
    for fi in 0..f {
        for p in 0..kp {
            let lo = weights[fi * k + 2 * p] as i16 as u16 as u32;
            let hi = if 2 * p + 1 < k { weights[fi * k + 2 * p + 1] as i16 as u16 as u32 } else { 0 };
            out[fi * kp + p] = (lo | (hi << 16)) as i32;
        }
    }
    out
}

#[inline]
fn madd_scalar(pair: i32, a: i16, b: i16) -> i32 {
    let lo = pair as i16 as i32;
    let hi = (pair >> 16) as i16 as i32;
    lo * a as i32 + hi * b as i32
}

/// `acc[f×n] = W · cols` over `kp` pairs (overwrites `acc`).
pub(crate) fn gemm_pairs(f: usize, n: usize, kp: usize, wpairs: &[i32], cols: &[i16], acc: &mut [i32]) {
    assert!(wpairs.len() >= f * kp && cols.len() >= kp * n * 2 && acc.len() >= f * n);
    acc[..f * n].fill(0);
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        for p0 in (0..kp).step_by(KPB) {
            let p1 = (p0 + KPB).min(kp);
            let mut i = 0;
            while i + 4 <= f {
                block4(i, n, kp, j0, j1, p0, p1, wpairs, cols, acc);
                i += 4;
            }
            while i < f {
                for j in j0..j1 {
                    let mut s = 0i32;
                    for p in p0..p1 {
                        let b = &cols[(p * n + j) * 2..(p * n + j) * 2 + 2];
                        s += madd_scalar(wpairs[i * kp + p], b[0], b[1]);
                    }
                    acc[i * n + j] += s;
                }
                i += 1;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
fn block4(i: usize, n: usize, kp: usize, j0: usize, j1: usize, p0: usize, p1: usize, wpairs: &[i32], cols: &[i16], acc: &mut [i32]) {
    use std::arch::x86_64::*;
    if p1 == p0 {
        return;
    }
    // every pointer below stays inside these checks, so the loop itself only
    // steps pointers (no per-iteration index arithmetic or bounds checks)
    assert!(((p1 - 1) * n + j1) * 2 <= cols.len() && (i + 3) * kp + p1 <= wpairs.len());
    let rows: [*const i32; 4] = std::array::from_fn(|r| wpairs[(i + r) * kp + p0..].as_ptr());
    let stride = 2 * n;
    let len = p1 - p0;
    let mut j = j0;
    // 8 columns per pass, then one 4-column pass for the remainder
    for width in [8usize, 4] {
        while j + width <= j1 {
            // SSE2 is part of the x86-64 baseline, so these intrinsics are always available.
            unsafe {
                let mut a = [_mm_setzero_si128(); 8];
                let mut bp = cols.as_ptr().wrapping_add((p0 * n + j) * 2);
                for t in 0..len {
                    let b0 = _mm_loadu_si128(bp as *const __m128i);
                    let b1 = if width == 8 { _mm_loadu_si128(bp.wrapping_add(8) as *const __m128i) } else { b0 };
                    for r in 0..4 {
                        let wv = _mm_set1_epi32(*rows[r].wrapping_add(t));
                        a[2 * r] = _mm_add_epi32(a[2 * r], _mm_madd_epi16(b0, wv));
                        a[2 * r + 1] = _mm_add_epi32(a[2 * r + 1], _mm_madd_epi16(b1, wv));
                    }
                    bp = bp.wrapping_add(stride);
                }
                for r in 0..4 {
                    let d = &mut acc[(i + r) * n + j..(i + r) * n + j + width];
                    let lo = _mm_add_epi32(_mm_loadu_si128(d.as_ptr() as *const __m128i), a[2 * r]);
                    _mm_storeu_si128(d.as_mut_ptr() as *mut __m128i, lo);
                    if width == 8 {
                        let hi = _mm_add_epi32(_mm_loadu_si128(d[4..].as_ptr() as *const __m128i), a[2 * r + 1]);
                        _mm_storeu_si128(d[4..].as_mut_ptr() as *mut __m128i, hi);
                    }
                }
            }
            j += width;
        }
    }
    block4_scalar(i, n, kp, j, j1, p0, p1, wpairs, cols, acc);
}

#[cfg(not(target_arch = "x86_64"))]
#[allow(clippy::too_many_arguments)]
fn block4(i: usize, n: usize, kp: usize, j0: usize, j1: usize, p0: usize, p1: usize, wpairs: &[i32], cols: &[i16], acc: &mut [i32]) {
    block4_scalar(i, n, kp, j0, j1, p0, p1, wpairs, cols, acc);
}

#[allow(clippy::too_many_arguments)]
fn block4_scalar(i: usize, n: usize, kp: usize, j0: usize, j1: usize, p0: usize, p1: usize, wpairs: &[i32], cols: &[i16], acc: &mut [i32]) {
    for r in 0..4 {
        for j in j0..j1 {
            let mut s = 0i32;
            for p in p0..p1 {
                let b = &cols[(p * n + j) * 2..(p * n + j) * 2 + 2];
                s += madd_scalar(wpairs[(i + r) * kp + p], b[0], b[1]);
            }
            acc[(i + r) * n + j] += s;
        }
    }
}

/// `Σ a_i · b_i` over equal-length `i16` slices.
pub(crate) fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    assert_eq!(a.len(), b.len());
    let mut i = 0;
    #[cfg(not(target_arch = "x86_64"))]
    let mut total = 0i32;
    #[cfg(target_arch = "x86_64")]
    let mut total = unsafe {
        use std::arch::x86_64::*;
        let mut s0 = _mm_setzero_si128();
        let mut s1 = _mm_setzero_si128();
        for (ca, cb) in a.chunks_exact(16).zip(b.chunks_exact(16)) {
            let (pa, pb) = (ca.as_ptr() as *const __m128i, cb.as_ptr() as *const __m128i);
            let (qa, qb) = (ca[8..].as_ptr() as *const __m128i, cb[8..].as_ptr() as *const __m128i);
            s0 = _mm_add_epi32(s0, _mm_madd_epi16(_mm_loadu_si128(pa), _mm_loadu_si128(pb)));
            s1 = _mm_add_epi32(s1, _mm_madd_epi16(_mm_loadu_si128(qa), _mm_loadu_si128(qb)));
            i += 16;
        }
        let mut lanes = [0i32; 4];
        _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, _mm_add_epi32(s0, s1));
        lanes.iter().sum::<i32>()
    };
    for (&x, &y) in a[i..].iter().zip(&b[i..]) {
        total += x as i32 * y as i32;
    }
    total
}
