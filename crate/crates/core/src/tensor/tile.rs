//! Register-tiled kernels for direct convolution.
//!
//! Every kernel here works on flat buffers with precomputed tap offsets, so
//! the forward pass, the input gradient and the kernel gradient all reduce
//! to the same two loops. On x86-64 an AVX-512 or AVX2+FMA build of each
//! loop is chosen at run time. The tile shapes differ between builds but
//! every output is summed in the same order, so the two FMA builds agree
//! bit for bit.

/// Output channels per tile.
pub(super) const M: usize = 4;
/// Positions per tile.
pub(super) const L: usize = 8;
/// Lanes per partial sum in [`dots`].
const LANES: usize = 4;
/// Taps per block in [`dots`].
const TB: usize = 3;
/// Positions per tile and taps per block with 32 vector registers.
const WIDE_L: usize = 32;
const WIDE_TB: usize = 6;

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        c + a * b
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

#[cfg(target_arch = "x86_64")]
fn has_avx512() -> bool {
    has_fma() && std::is_x86_feature_detected!("avx512f")
}

/// `out[m·stride + p] = init[m] + Σ_t w[t][m] · src[p + offs[t]]` for
/// `p < n` rounded up to a multiple of [`L`].
///
/// Panics if any read or write would leave its buffer.
pub(super) fn correlate(
    out: &mut [f64],
    stride: usize,
    n: usize,
    init: [f64; M],
    src: &[f64],
    offs: &[usize],
    w: &[[f64; M]],
) {
    assert_eq!(offs.len(), w.len());
    let span = n.div_ceil(L) * L;
    let max_off = offs.iter().copied().max().unwrap_or(0);
    assert!(span <= stride || n == 0);
    assert!(out.len() >= (M - 1) * stride + span);
    assert!(src.len() >= span + max_off);
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        // SAFETY: the CPU supports the enabled features; bounds were checked above.
        unsafe { correlate_avx512(out, stride, span, init, src, offs, w) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU supports the enabled features; bounds were checked above.
        unsafe { correlate_fma(out, stride, span, init, src, offs, w) };
        return;
    }
    // SAFETY: bounds were checked above.
    unsafe { correlate_body::<false, L>(out, stride, span, init, src, offs, w) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn correlate_avx512(
    out: &mut [f64],
    stride: usize,
    span: usize,
    init: [f64; M],
    src: &[f64],
    offs: &[usize],
    w: &[[f64; M]],
) {
    correlate_body::<true, WIDE_L>(out, stride, span, init, src, offs, w)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_fma(
    out: &mut [f64],
    stride: usize,
    span: usize,
    init: [f64; M],
    src: &[f64],
    offs: &[usize],
    w: &[[f64; M]],
) {
    correlate_body::<true, L>(out, stride, span, init, src, offs, w)
}

/// Tiles of `W` positions while they fit in `span`, then tiles of [`L`].
#[inline(always)]
unsafe fn correlate_body<const FMA: bool, const W: usize>(
    out: &mut [f64],
    stride: usize,
    span: usize,
    init: [f64; M],
    src: &[f64],
    offs: &[usize],
    w: &[[f64; M]],
) {
    let mut p = 0;
    while p + W <= span {
        correlate_tile::<FMA, W>(out, stride, p, init, src, offs, w);
        p += W;
    }
    while p < span {
        correlate_tile::<FMA, L>(out, stride, p, init, src, offs, w);
        p += L;
    }
}

#[inline(always)]
unsafe fn correlate_tile<const FMA: bool, const W: usize>(
    out: &mut [f64],
    stride: usize,
    p: usize,
    init: [f64; M],
    src: &[f64],
    offs: &[usize],
    w: &[[f64; M]],
) {
    let sp = src.as_ptr();
    let mut acc = [[0.0f64; W]; M];
    for m in 0..M {
        acc[m] = [init[m]; W];
    }
    for (t, &o) in offs.iter().enumerate() {
        let s = &*(sp.add(p + o) as *const [f64; W]);
        let wt = w.get_unchecked(t);
        for m in 0..M {
            for l in 0..W {
                acc[m][l] = madd::<FMA>(wt[m], s[l], acc[m][l]);
            }
        }
    }
    for m in 0..M {
        out[m * stride + p..m * stride + p + W].copy_from_slice(&acc[m]);
    }
}

/// `r[t][m] = Σ_{p < n} g[m·stride + p] · src[p + offs[t]]`, with `n` rounded
/// up to a multiple of 4; the caller zero-pads `g` so the extra terms vanish.
pub(super) fn dots(
    g: &[f64],
    stride: usize,
    n: usize,
    src: &[f64],
    offs: &[usize],
    r: &mut [[f64; M]],
) {
    assert_eq!(offs.len(), r.len());
    let span = n.div_ceil(LANES) * LANES;
    let max_off = offs.iter().copied().max().unwrap_or(0);
    assert!(g.len() >= (M - 1) * stride + span);
    assert!(src.len() >= span + max_off);
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        // SAFETY: the CPU supports the enabled features; bounds were checked above.
        unsafe { dots_avx512(g, stride, span, src, offs, r) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the CPU supports the enabled features; bounds were checked above.
        unsafe { dots_fma(g, stride, span, src, offs, r) };
        return;
    }
    // SAFETY: bounds were checked above.
    unsafe { dots_body::<false, TB>(g, stride, span, src, offs, r) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn dots_avx512(g: &[f64], stride: usize, span: usize, src: &[f64], offs: &[usize], r: &mut [[f64; M]]) {
    dots_body::<true, WIDE_TB>(g, stride, span, src, offs, r)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dots_fma(g: &[f64], stride: usize, span: usize, src: &[f64], offs: &[usize], r: &mut [[f64; M]]) {
    dots_body::<true, TB>(g, stride, span, src, offs, r)
}

/// Taps are taken `TB` at a time; each tap's sums do not depend on `TB`.
#[inline(always)]
unsafe fn dots_body<const FMA: bool, const TB: usize>(
    g: &[f64],
    stride: usize,
    span: usize,
    src: &[f64],
    offs: &[usize],
    r: &mut [[f64; M]],
) {
    let gp = g.as_ptr();
    let sp = src.as_ptr();
    let mut t0 = 0;
    while t0 < offs.len() {
        let tb = TB.min(offs.len() - t0);
        // A short final block repeats its last tap; the duplicate is dropped.
        let o: [usize; TB] = std::array::from_fn(|b| offs[t0 + b.min(tb - 1)]);
        let mut acc = [[[0.0f64; LANES]; M]; TB];
        let mut p = 0;
        while p < span {
            let s: [[f64; LANES]; TB] = std::array::from_fn(|b| *(sp.add(p + o[b]) as *const [f64; LANES]));
            for m in 0..M {
                let gv = *(gp.add(m * stride + p) as *const [f64; LANES]);
                for b in 0..TB {
                    for l in 0..LANES {
                        acc[b][m][l] = madd::<FMA>(gv[l], s[b][l], acc[b][m][l]);
                    }
                }
            }
            p += LANES;
        }
        for b in 0..tb {
            for m in 0..M {
                let a = acc[b][m];
                r[t0 + b][m] = (a[0] + a[1]) + (a[2] + a[3]);
            }
        }
        t0 += tb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 + 11) % 23) as f64 * k - 1.0).collect()
    }

    #[test]
    fn correlate_matches_direct_sum() {
        let (n, stride) = (21, 24);
        let offs = [0, 3, 7, 12];
        let src = seq(24 + 12, 0.1);
        let w: Vec<[f64; M]> = (0..4).map(|t| std::array::from_fn(|m| (t * 4 + m) as f64 * 0.25 - 1.0)).collect();
        let mut out = vec![0.0; M * stride];
        correlate(&mut out, stride, n, [1.0, 2.0, 3.0, 4.0], &src, &offs, &w);
        for m in 0..M {
            for p in 0..n {
                let mut s = (m + 1) as f64;
                for t in 0..4 {
                    s += w[t][m] * src[p + offs[t]];
                }
                assert!((out[m * stride + p] - s).abs() < 1e-12);
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn wide_and_narrow_fma_builds_agree_bitwise() {
        if !has_avx512() {
            return;
        }
        let (n, stride): (usize, usize) = (77, 80);
        let offs: Vec<usize> = (0..20).map(|t| (t * 5) % 23).collect();
        let src = seq(stride + 23 + WIDE_L, 0.13);
        let w: Vec<[f64; M]> = (0..20).map(|t| std::array::from_fn(|m| ((t * 7 + m * 3) % 11) as f64 * 0.37 - 2.0)).collect();
        let (mut a, mut b) = (vec![0.0; M * stride], vec![0.0; M * stride]);
        let span = n.div_ceil(L) * L;
        // SAFETY: both feature sets were detected above; buffers are sized for `span`.
        unsafe {
            correlate_avx512(&mut a, stride, span, [0.5, -1.0, 2.0, 0.0], &src, &offs, &w);
            correlate_fma(&mut b, stride, span, [0.5, -1.0, 2.0, 0.0], &src, &offs, &w);
        }
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        let g = seq(M * stride, 0.29);
        let (mut ra, mut rb) = (vec![[0.0; M]; 20], vec![[0.0; M]; 20]);
        let span = n.div_ceil(LANES) * LANES;
        // SAFETY: as above.
        unsafe {
            dots_avx512(&g, stride, span, &src, &offs, &mut ra);
            dots_fma(&g, stride, span, &src, &offs, &mut rb);
        }
        assert!(ra.iter().flatten().zip(rb.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dots_match_direct_sum() {
        let (n, stride) = (13, 16);
        let mut g = seq(M * stride, 0.3);
        for m in 0..M {
            g[m * stride + n..(m + 1) * stride].fill(0.0);
        }
        let offs = [0, 1, 5];
        let src = seq(16 + 5, 0.2);
        let mut r = vec![[0.0; M]; 3];
        dots(&g, stride, n, &src, &offs, &mut r);
        for t in 0..3 {
            for m in 0..M {
                let s: f64 = (0..n).map(|p| g[m * stride + p] * src[p + offs[t]]).sum();
                assert!((r[t][m] - s).abs() < 1e-12);
            }
        }
    }
}
