//! Dense tensors and the forward/backward kernels the network is built from.
//!
//! All kernels work on channel-first volumes `[C, D, H, W]` stored row-major
//! (last index fastest). Convolutions are valid (no padding), stride 1, and
//! use cross-correlation. Internally the convolution accumulates over a
//! "wide" output that keeps the input row and plane strides, so every kernel
//! tap becomes one long contiguous multiply-add; the columns and rows that
//! fall outside the valid output are discarded when compacting.

use rand::{Rng, RngExt};

use crate::error::{Error, Result};

mod tile;

const MAX_ORDER: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Zero tensor. Panics if `dims` is empty, has more than five axes, or
    /// contains a zero extent.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index order mismatch");
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_ORDER {
        return Err(Error::Shape(format!(
            "tensor order must be in 1..={MAX_ORDER}, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero extent in dims {dims:?}")));
    }
    Ok(())
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "{op}: shape {:?} does not match {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

fn volume_dims(op: &str, what: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.dims() {
        [c, d, h, w] => Ok([c, d, h, w]),
        ref other => Err(Error::Shape(format!(
            "{op}: {what} must be [C, D, H, W], got {other:?}"
        ))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    in_spatial: [usize; 3],
    out_spatial: [usize; 3],
}

impl ConvGeometry {
    fn new(input: &Tensor, kernels: &Tensor) -> Result<Self> {
        let [c_in, d, h, w] = volume_dims("conv3d", "input", input)?;
        let [c_out, kc, k0, k1, k2] = match *kernels.dims() {
            [a, b, c, d, e] => [a, b, c, d, e],
            ref other => {
                return Err(Error::Shape(format!(
                    "conv3d: kernels must be [C_out, C_in, k, k, k], got {other:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv3d: kernels expect {kc} input channels, input has {c_in}"
            )));
        }
        if k0 != k1 || k1 != k2 {
            return Err(Error::Shape(format!(
                "conv3d: kernels must be cubic, got {k0}x{k1}x{k2}"
            )));
        }
        let k = k0;
        if d < k || h < k || w < k {
            return Err(Error::Shape(format!(
                "conv3d: spatial dims {d}x{h}x{w} smaller than kernel {k}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            k,
            in_spatial: [d, h, w],
            out_spatial: [d - k + 1, h - k + 1, w - k + 1],
        })
    }

    fn plane(&self) -> usize {
        self.in_spatial[1] * self.in_spatial[2]
    }

    fn in_channel_len(&self) -> usize {
        self.in_spatial[0] * self.plane()
    }

    fn out_channel_len(&self) -> usize {
        self.out_spatial.iter().product()
    }

    /// Length of the wide accumulation buffer for one output channel.
    fn wide_len(&self) -> usize {
        let [od, oh, ow] = self.out_spatial;
        (od - 1) * self.plane() + (oh - 1) * self.in_spatial[2] + ow
    }

    fn tap_offset(&self, a: usize, b: usize, c: usize) -> usize {
        a * self.plane() + b * self.in_spatial[2] + c
    }

    /// The kernel covers the whole input, so each output channel is a
    /// single dot product.
    fn single_output(&self) -> bool {
        self.out_spatial == [1, 1, 1]
    }

    fn out_dims(&self) -> [usize; 4] {
        let [od, oh, ow] = self.out_spatial;
        [self.c_out, od, oh, ow]
    }

    /// Appends the valid outputs of one wide channel to `out`.
    fn compact(&self, wide: &[f64], out: &mut Vec<f64>) {
        let [od, oh, ow] = self.out_spatial;
        let w = self.in_spatial[2];
        let plane = self.plane();
        for z in 0..od {
            for y in 0..oh {
                let src = z * plane + y * w;
                out.extend_from_slice(&wide[src..src + ow]);
            }
        }
    }

    /// Scatters one compact channel into `wide`, which must be zeroed.
    fn widen(&self, compact: &[f64], wide: &mut [f64]) {
        let [od, oh, ow] = self.out_spatial;
        let w = self.in_spatial[2];
        let plane = self.plane();
        for z in 0..od {
            for y in 0..oh {
                let dst = z * plane + y * w;
                let src = (z * oh + y) * ow;
                wide[dst..dst + ow].copy_from_slice(&compact[src..src + ow]);
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

/// Dot product over four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Backward of a convolution whose output is one position per channel:
/// kernel rows and the input are then the same flat vectors.
fn single_output_backward(input: &Tensor, kernels: &Tensor, grad_out: &Tensor, want_input: bool) -> ConvGrads {
    let n = input.len();
    let g = grad_out.data();
    let mut grad_kernels = Tensor::zeros(kernels.dims());
    for (row, &go) in grad_kernels.data.chunks_exact_mut(n).zip(g) {
        for (d, &x) in row.iter_mut().zip(input.data()) {
            *d = go * x;
        }
    }
    let grad_input = want_input.then(|| {
        let mut gi = Tensor::zeros(input.dims());
        for (row, &go) in kernels.data().chunks_exact(n).zip(g) {
            axpy(&mut gi.data, go, row);
        }
        gi
    });
    ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: g.to_vec(),
    }
}

/// Input channels laid end to end with room for a trailing partial tile.
fn padded_input(input: &Tensor) -> Vec<f64> {
    let mut v = Vec::with_capacity(input.len() + tile::L);
    v.extend_from_slice(input.data());
    v.resize(input.len() + tile::L, 0.0);
    v
}

/// Offset of every kernel tap `(i, a, b, c)` into the padded input, in
/// kernel storage order.
fn input_tap_offsets(g: &ConvGeometry) -> Vec<usize> {
    let k = g.k;
    let mut offs = Vec::with_capacity(g.c_in * k * k * k);
    for i in 0..g.c_in {
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    offs.push(i * g.in_channel_len() + g.tap_offset(a, b, c));
                }
            }
        }
    }
    offs
}

/// Valid 3D cross-correlation with stride 1.
///
/// `input` is `[C_in, D, H, W]`, `kernels` is `[C_out, C_in, k, k, k]` and
/// `bias` has one entry per output channel. The result is
/// `[C_out, D-k+1, H-k+1, W-k+1]`.
pub fn conv3d_forward(input: &Tensor, kernels: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels)?;
    if bias.len() != g.c_out {
        return Err(Error::Shape(format!(
            "conv3d: {} biases for {} output channels",
            bias.len(),
            g.c_out
        )));
    }
    if g.single_output() {
        let data = kernels
            .data()
            .chunks_exact(input.len())
            .zip(bias)
            .map(|(row, b)| b + dot(row, input.data()))
            .collect();
        return Tensor::new(&g.out_dims(), data);
    }
    // Outputs are computed "wide": with the input's row and plane strides,
    // so every tap is a fixed offset into the flat input.
    let wide_len = g.wide_len();
    let out_chan = g.out_channel_len();
    let taps = g.c_in * g.k * g.k * g.k;
    let kdata = kernels.data();
    let src = padded_input(input);
    let offs = input_tap_offsets(&g);
    let span = wide_len.div_ceil(tile::L) * tile::L;

    let mut out = Vec::with_capacity(g.c_out * out_chan);
    let mut wide = vec![0.0; tile::M * span];
    let mut w = vec![[0.0; tile::M]; taps];
    for o0 in (0..g.c_out).step_by(tile::M) {
        let rows = tile::M.min(g.c_out - o0);
        let mut init = [0.0; tile::M];
        for m in 0..tile::M {
            let o = o0 + m;
            init[m] = if m < rows { bias[o] } else { 0.0 };
            for (t, wt) in w.iter_mut().enumerate() {
                wt[m] = if m < rows { kdata[o * taps + t] } else { 0.0 };
            }
        }
        tile::correlate(&mut wide, span, wide_len, init, &src, &offs, &w);
        for m in 0..rows {
            g.compact(&wide[m * span..], &mut out);
        }
    }
    Tensor::new(&g.out_dims(), out)
}

/// Gradients of a loss with respect to the three inputs of [`conv3d_forward`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

/// Exact adjoint of [`conv3d_forward`] for upstream gradient `grad_out`.
pub fn conv3d_backward(input: &Tensor, kernels: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    conv3d_backward_with(input, kernels, grad_out, true)
}

/// As [`conv3d_backward`], optionally skipping the input gradient (the
/// first layer of a network never needs it).
pub fn conv3d_backward_with(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernels)?;
    if grad_out.dims() != g.out_dims() {
        return Err(Error::Shape(format!(
            "conv3d backward: grad_out {:?} does not match forward output {:?}",
            grad_out.dims(),
            g.out_dims()
        )));
    }
    if g.single_output() {
        return Ok(single_output_backward(input, kernels, grad_out, want_input));
    }
    let k = g.k;
    let wide_len = g.wide_len();
    let in_chan = g.in_channel_len();
    let out_chan = g.out_channel_len();
    let taps = g.c_in * k * k * k;
    let kdata = kernels.data();
    let src = padded_input(input);
    let offs = input_tap_offsets(&g);

    // Each output channel's upstream gradient, widened, sits in its own
    // segment after `pad` zeros, so the input gradient can be gathered
    // (gi[q] = Σ w · g[q - off]) with non-negative offsets.
    let pad = g.tap_offset(k - 1, k - 1, k - 1);
    let seg = pad + in_chan + tile::L;
    let groups = g.c_out.div_ceil(tile::M);
    let mut grads = vec![0.0; groups * tile::M * seg];
    let mut bias = vec![0.0; g.c_out];
    for o in 0..g.c_out {
        let go = &grad_out.data()[o * out_chan..(o + 1) * out_chan];
        bias[o] = go.iter().sum();
        g.widen(go, &mut grads[o * seg + pad..o * seg + pad + wide_len]);
    }

    let mut grad_kernels = Tensor::zeros(kernels.dims());
    let mut r = vec![[0.0; tile::M]; taps];
    for o0 in (0..g.c_out).step_by(tile::M) {
        tile::dots(&grads[o0 * seg + pad..], seg, wide_len, &src, &offs, &mut r);
        for m in 0..tile::M.min(g.c_out - o0) {
            let dst = &mut grad_kernels.data[(o0 + m) * taps..(o0 + m + 1) * taps];
            for (d, rt) in dst.iter_mut().zip(&r) {
                *d = rt[m];
            }
        }
    }

    let grad_input = want_input.then(|| {
        // Dense gather when the output is comparable in size to the input;
        // otherwise (e.g. a kernel covering the whole input) scattering the
        // few nonzero gradients is far cheaper.
        if out_chan * 8 >= in_chan {
            let kk = k * k * k;
            let mut goffs = Vec::with_capacity(g.c_out * kk);
            for o in 0..g.c_out {
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            goffs.push(o * seg + pad - g.tap_offset(a, b, c));
                        }
                    }
                }
            }
            let span = in_chan.div_ceil(tile::L) * tile::L;
            let mut gi = Vec::with_capacity(input.len());
            let mut buf = vec![0.0; tile::M * span];
            let mut w = vec![[0.0; tile::M]; g.c_out * kk];
            for i0 in (0..g.c_in).step_by(tile::M) {
                let rows = tile::M.min(g.c_in - i0);
                for o in 0..g.c_out {
                    for t in 0..kk {
                        for m in 0..tile::M {
                            w[o * kk + t][m] =
                                if m < rows { kdata[o * taps + (i0 + m) * kk + t] } else { 0.0 };
                        }
                    }
                }
                tile::correlate(&mut buf, span, in_chan, [0.0; tile::M], &grads, &goffs, &w);
                for m in 0..rows {
                    gi.extend_from_slice(&buf[m * span..m * span + in_chan]);
                }
            }
            Tensor {
                dims: input.dims.clone(),
                data: gi,
            }
        } else {
            let mut gi = Tensor::zeros(input.dims());
            for o in 0..g.c_out {
                let wide = &grads[o * seg + pad..o * seg + pad + wide_len];
                for i in 0..g.c_in {
                    let gi = &mut gi.data[i * in_chan..(i + 1) * in_chan];
                    let kbase = (o * g.c_in + i) * k * k * k;
                    for a in 0..k {
                        for b in 0..k {
                            for c in 0..k {
                                let off = g.tap_offset(a, b, c);
                                axpy(&mut gi[off..off + wide_len], kdata[kbase + (a * k + b) * k + c], wide);
                            }
                        }
                    }
                }
            }
            gi
        }
    });
    Ok(ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias,
    })
}

/// Argmax routing recorded by [`maxpool3d_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolCache {
    input_dims: [usize; 4],
    output_dims: [usize; 4],
    argmax: Vec<u32>,
}

impl PoolCache {
    pub fn input_dims(&self) -> [usize; 4] {
        self.input_dims
    }

    pub fn output_dims(&self) -> [usize; 4] {
        self.output_dims
    }

    /// Flat input index that won each output window.
    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

/// 3D max pooling with a cubic window. Ties resolve to the first maximum in
/// row-major window order.
pub fn maxpool3d_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    let [c, d, h, w] = volume_dims("maxpool3d", "input", input)?;
    if window == 0 || stride == 0 {
        return Err(Error::Parameter(
            "maxpool3d: window and stride must be positive".into(),
        ));
    }
    if d < window || h < window || w < window {
        return Err(Error::Shape(format!(
            "maxpool3d: spatial dims {d}x{h}x{w} smaller than window {window}"
        )));
    }
    if input.len() > u32::MAX as usize {
        return Err(Error::Shape("maxpool3d: input too large".into()));
    }
    let od = (d - window) / stride + 1;
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let out_dims = [c, od, oh, ow];
    // Separable reduction: along x, then y, then z. Each pass keeps the first
    // maximum (strict `>`), so the overall winner is the first maximum in
    // row-major window order.
    let (vals, idx) = pool_rows(input.data(), c * d * h, w, window, stride, ow);
    let (vals, idx) = pool_pass(&vals, &idx, c * d, h, ow, window, stride, oh);
    let (vals, argmax) = pool_pass(&vals, &idx, c, d, oh * ow, window, stride, od);
    Ok((
        Tensor {
            dims: out_dims.to_vec(),
            data: vals,
        },
        PoolCache {
            input_dims: [c, d, h, w],
            output_dims: out_dims,
            argmax,
        },
    ))
}

/// `(v, i)` if `v > best`, else `(best, arg)`, as masks rather than a
/// branch: pooled activations are close to random and defeat prediction.
#[inline(always)]
fn keep_first_max(best: f64, arg: u32, v: f64, i: u32) -> (f64, u32) {
    let m = u64::from(v > best).wrapping_neg();
    let b = best.to_bits();
    let bv = f64::from_bits(b ^ ((b ^ v.to_bits()) & m));
    let ba = arg ^ ((arg ^ i) & m as u32);
    (bv, ba)
}

/// Max over windows along the last axis of an `[outer, len]` array, with
/// flat indices into it.
fn pool_rows(vals: &[f64], outer: usize, len: usize, window: usize, stride: usize, len_out: usize) -> (Vec<f64>, Vec<u32>) {
    let mut best = Vec::with_capacity(outer * len_out);
    let mut arg = Vec::with_capacity(outer * len_out);
    for (o, row) in vals.chunks_exact(len).enumerate().take(outer) {
        let base = (o * len) as u32;
        if stride == 1 {
            // Contiguous shifted slices, so the merge vectorizes.
            let start = best.len();
            best.extend_from_slice(&row[..len_out]);
            arg.extend((0..len_out as u32).map(|j| base + j));
            for t in 1..window {
                let off = base + t as u32;
                let lanes = best[start..].iter_mut().zip(&mut arg[start..]).zip(&row[t..t + len_out]);
                for (j, ((b, a), &v)) in lanes.enumerate() {
                    (*b, *a) = keep_first_max(*b, *a, v, off + j as u32);
                }
            }
            continue;
        }
        for j in 0..len_out {
            let s = j * stride;
            let (mut bv, mut ba) = (row[s], base + s as u32);
            for t in 1..window {
                (bv, ba) = keep_first_max(bv, ba, row[s + t], base + (s + t) as u32);
            }
            best.push(bv);
            arg.push(ba);
        }
    }
    (best, arg)
}

/// Max over windows along the middle axis of an `[outer, len, inner]` array.
#[allow(clippy::too_many_arguments)]
fn pool_pass(
    vals: &[f64],
    idx: &[u32],
    outer: usize,
    len: usize,
    inner: usize,
    window: usize,
    stride: usize,
    len_out: usize,
) -> (Vec<f64>, Vec<u32>) {
    let mut best = Vec::with_capacity(outer * len_out * inner);
    let mut arg = Vec::with_capacity(best.capacity());
    for o in 0..outer {
        for j in 0..len_out {
            let dst = best.len();
            let first = (o * len + j * stride) * inner;
            best.extend_from_slice(&vals[first..first + inner]);
            arg.extend_from_slice(&idx[first..first + inner]);
            for t in 1..window {
                let src = first + t * inner;
                let lanes = best[dst..].iter_mut().zip(&mut arg[dst..]);
                for ((b, a), (&v, &i)) in lanes.zip(vals[src..src + inner].iter().zip(&idx[src..src + inner])) {
                    (*b, *a) = keep_first_max(*b, *a, v, i);
                }
            }
        }
    }
    (best, arg)
}

/// Routes each upstream gradient to its window's argmax. Overlapping windows
/// accumulate.
pub fn maxpool3d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != cache.output_dims {
        return Err(Error::Shape(format!(
            "maxpool3d backward: grad_out {:?} does not match cached output {:?}",
            grad_out.dims(),
            cache.output_dims
        )));
    }
    let mut grad_in = Tensor::zeros(&cache.input_dims);
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        grad_in.data[idx as usize] += g;
    }
    Ok(grad_in)
}

fn check_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Parameter(format!(
            "leaky ReLU slope must lie in (0, 1), got {slope}"
        )));
    }
    Ok(())
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    Ok(input.map(|v| if v >= 0.0 { v } else { slope * v }))
}

/// Backward of [`leaky_relu`] given the forward *input*. The derivative at
/// exactly zero is taken as 1.
pub fn leaky_relu_backward(input: &Tensor, grad_out: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    same_shape("leaky_relu backward", input, grad_out)?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= 0.0 { g } else { slope * g })
        .collect();
    Ok(Tensor {
        dims: input.dims.clone(),
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Keep/drop pattern of one dropout application. An identity mask (eval
/// mode or rate 0) stores nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    dims: Vec<usize>,
    scale: f64,
    keep: Option<Vec<bool>>,
}

impl DropoutMask {
    pub fn is_identity(&self) -> bool {
        self.keep.is_none()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn keep(&self) -> Option<&[bool]> {
        self.keep.as_deref()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, DropoutMask)> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        let mask = DropoutMask {
            dims: input.dims.clone(),
            scale: 1.0,
            keep: None,
        };
        return Ok((input.clone(), mask));
    }
    let scale = 1.0 / (1.0 - rate);
    let keep: Vec<bool> = (0..input.len()).map(|_| rng.random::<f64>() >= rate).collect();
    let data = input
        .data()
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| v * (scale * f64::from(u8::from(k))))
        .collect();
    Ok((
        Tensor {
            dims: input.dims.clone(),
            data,
        },
        DropoutMask {
            dims: input.dims.clone(),
            scale,
            keep: Some(keep),
        },
    ))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.dims() != mask.dims.as_slice() {
        return Err(Error::Shape(format!(
            "dropout backward: grad_out {:?} does not match mask {:?}",
            grad_out.dims(),
            mask.dims
        )));
    }
    match &mask.keep {
        None => Ok(grad_out.clone()),
        Some(keep) => {
            let data = grad_out
                .data()
                .iter()
                .zip(keep)
                .map(|(&g, &k)| g * (mask.scale * f64::from(u8::from(k))))
                .collect();
            Ok(Tensor {
                dims: grad_out.dims.clone(),
                data,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    use rand_pcg::Pcg64;

    fn random(dims: &[usize], rng: &mut Pcg64) -> Tensor {
        Tensor::from_fn(dims, |_| StandardNormal.sample(rng))
    }

    fn naive_conv(input: &Tensor, kernels: &Tensor, bias: &[f64]) -> Tensor {
        let [ci, d, h, w] = <[usize; 4]>::try_from(input.dims()).unwrap();
        let co = kernels.dims()[0];
        let k = kernels.dims()[2];
        let (od, oh, ow) = (d - k + 1, h - k + 1, w - k + 1);
        let mut out = Tensor::zeros(&[co, od, oh, ow]);
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut s = bias[o];
                        for i in 0..ci {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        s += input.get(&[i, z + a, y + b, x + c])
                                            * kernels.get(&[o, i, a, b, c]);
                                    }
                                }
                            }
                        }
                        out.set(&[o, z, y, x], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_sums_to_27() {
        let x = Tensor::filled(&[1, 3, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &k, &[0.0]).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut rng = Pcg64::seed_from_u64(1);
        let x = random(&[2, 6, 5, 7], &mut rng);
        let k = Tensor::zeros(&[3, 2, 3, 3, 3]);
        let y = conv3d_forward(&x, &k, &[0.5, -1.0, 2.0]).unwrap();
        for o in 0..3 {
            let expected = [0.5, -1.0, 2.0][o];
            for z in 0..4 {
                for yy in 0..3 {
                    for xx in 0..5 {
                        assert_eq!(y.get(&[o, z, yy, xx]), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = Pcg64::seed_from_u64(2);
        let x = random(&[2, 5, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3, 3], &mut rng);
        let bias = [0.1, -0.2, 0.3];
        let fast = conv3d_forward(&x, &k, &bias).unwrap();
        let slow = naive_conv(&x, &k, &bias);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[2, 5, 5, 5]);
        let wrong_cin = Tensor::zeros(&[1, 3, 3, 3, 3]);
        assert!(matches!(conv3d_forward(&x, &wrong_cin, &[0.0]), Err(Error::Shape(_))));
        let too_big = Tensor::zeros(&[1, 2, 6, 6, 6]);
        assert!(matches!(conv3d_forward(&x, &too_big, &[0.0]), Err(Error::Shape(_))));
        let k = Tensor::zeros(&[1, 2, 3, 3, 3]);
        assert!(conv3d_forward(&x, &k, &[0.0, 1.0]).is_err());
        let bad_grad = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv3d_backward(&x, &k, &bad_grad).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = Pcg64::seed_from_u64(3);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let k = random(&[2, 2, 3, 3, 3], &mut rng);
        let g = conv3d_backward(&x, &k, &Tensor::zeros(&[2, 2, 2, 2])).unwrap();
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.kernels.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_output_reads_input() {
        let mut rng = Pcg64::seed_from_u64(4);
        let x = random(&[2, 5, 4, 6], &mut rng);
        let k = random(&[3, 2, 3, 3, 3], &mut rng);
        let (o, z, y, xx) = (1, 2, 1, 3);
        let mut go = Tensor::zeros(&[3, 3, 2, 4]);
        go.set(&[o, z, y, xx], 1.0);
        let g = conv3d_backward(&x, &k, &go).unwrap();
        for i in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        assert_eq!(
                            g.kernels.get(&[o, i, a, b, c]),
                            x.get(&[i, z + a, y + b, xx + c])
                        );
                        assert_eq!(g.kernels.get(&[0, i, a, b, c]), 0.0);
                    }
                }
            }
        }
        assert_eq!(g.bias, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_is_linear_in_input_and_kernels() {
        let mut rng = Pcg64::seed_from_u64(5);
        let x = random(&[2, 5, 5, 5], &mut rng);
        let k = random(&[2, 2, 3, 3, 3], &mut rng);
        let zero = [0.0, 0.0];
        let base = conv3d_forward(&x, &k, &zero).unwrap();
        let scaled_x = conv3d_forward(&x.map(|v| 2.5 * v), &k, &zero).unwrap();
        let scaled_k = conv3d_forward(&x, &k.map(|v| -0.75 * v), &zero).unwrap();
        for ((b, sx), sk) in base.data().iter().zip(scaled_x.data()).zip(scaled_k.data()) {
            assert!((2.5 * b - sx).abs() <= 1e-12 * (1.0 + b.abs()));
            assert!((-0.75 * b - sk).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn maxpool_basic_cases() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f64);
        let (y, cache) = maxpool3d_forward(&x, 2, 1).unwrap();
        assert_eq!(y.data(), &[8.0]);
        assert_eq!(cache.argmax(), &[7]);

        let c = Tensor::filled(&[2, 4, 3, 5], -1.25);
        let (y, _) = maxpool3d_forward(&c, 2, 1).unwrap();
        assert_eq!(y.dims(), &[2, 3, 2, 4]);
        assert!(y.data().iter().all(|&v| v == -1.25));

        assert!(maxpool3d_forward(&Tensor::zeros(&[1, 1, 4, 4]), 2, 1).is_err());
    }

    #[test]
    fn maxpool_tie_picks_first_in_window() {
        let x = Tensor::filled(&[1, 3, 3, 3], 2.0);
        let (_, cache) = maxpool3d_forward(&x, 2, 1).unwrap();
        // Output (0,1,1,1) window starts at input (0,1,1,1) = flat 13.
        assert_eq!(cache.argmax()[7], 13);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = Pcg64::seed_from_u64(6);
        let x = random(&[2, 4, 4, 4], &mut rng);
        let (y, cache) = maxpool3d_forward(&x, 2, 1).unwrap();
        for c in 0..2 {
            for z in 0..3 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..2 {
                            for b in 0..2 {
                                for d in 0..2 {
                                    m = m.max(x.get(&[c, z + a, yy + b, xx + d]));
                                }
                            }
                        }
                        assert_eq!(y.get(&[c, z, yy, xx]), m);
                    }
                }
            }
        }
        // Every recorded argmax is inside its window and holds the max.
        for (n, &idx) in cache.argmax().iter().enumerate() {
            assert_eq!(x.data()[idx as usize], y.data()[n]);
        }
    }

    #[test]
    fn maxpool_backward_routes_to_largest_corner() {
        let x = Tensor::from_fn(&[1, 3, 3, 3], |i| i as f64);
        let (_, cache) = maxpool3d_forward(&x, 2, 1).unwrap();
        let g = maxpool3d_backward(&cache, &Tensor::filled(&[1, 2, 2, 2], 1.0)).unwrap();
        // Each window's max is its far corner (z+1, y+1, x+1).
        for z in 0..3 {
            for y in 0..3 {
                for xx in 0..3 {
                    let expected = if z >= 1 && y >= 1 && xx >= 1 { 1.0 } else { 0.0 };
                    assert_eq!(g.get(&[0, z, y, xx]), expected);
                }
            }
        }
        let zero = maxpool3d_backward(&cache, &Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(maxpool3d_backward(&cache, &Tensor::zeros(&[1, 2, 2, 3])).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[3], vec![3.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.01).unwrap();
        assert_eq!(y.data(), &[3.0, -0.02, 0.0]);
        let g = leaky_relu_backward(&x, &Tensor::filled(&[3], 2.0), 0.01).unwrap();
        assert_eq!(g.data(), &[2.0, 0.02, 2.0]);
        assert!(leaky_relu(&x, 1.0).is_err());
        assert!(leaky_relu(&x, 0.0).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Pcg64::seed_from_u64(7);
        let x = random(&[2, 3, 3, 3], &mut rng);
        let (y, m) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(m.is_identity());
        let (y, m) = dropout(&x, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(m.is_identity());
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = Pcg64::seed_from_u64(8);
        let x = Tensor::filled(&[1_000_000], 1.0);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.sum() / y.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_backward_reuses_mask() {
        let mut rng = Pcg64::seed_from_u64(9);
        let x = Tensor::filled(&[1000], 1.0);
        let (y, mask) = dropout(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let g = dropout_backward(&mask, &Tensor::filled(&[1000], 1.0)).unwrap();
        assert_eq!(y, g);
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let x = Tensor::filled(&[500], 1.0);
        let a = dropout(&x, 0.5, Mode::Train, &mut Pcg64::seed_from_u64(3)).unwrap();
        let b = dropout(&x, 0.5, Mode::Train, &mut Pcg64::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_rejects_bad_dims() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
    }
}
