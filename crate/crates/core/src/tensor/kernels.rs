// Pure forward/backward kernels over owned buffers. The tape wires these into
// autodiff nodes; they are also usable directly for inference.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking the log in cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<ConvGeom> {
    let (c_in, h, w) = input.chw()?;
    let [c_out, wc_in, kh, kw] = weight.shape()[..] else {
        return Err(Error::dim(format!(
            "conv weight must be 4-d, got {:?}",
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::dim(format!(
            "conv weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dim(format!("conv kernel must be square and odd, got {kh}×{kw}")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::dim(format!(
            "conv bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::arg("conv stride must be ≥ 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::dim(format!(
            "kernel {kh} larger than padded input {h}×{w} (pad {pad})"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        pad,
        stride,
        oh,
        ow,
    })
}

/// Range of output columns `ox` for which `ox*stride + kx - pad` lands in `[0, w)`.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    // ix = ox*stride + kx - pad >= 0  =>  ox >= ceil((pad - kx)/stride)
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    // ix <= w-1  =>  ox <= (w - 1 + pad - kx)/stride
    let hi = if g.w + g.pad > kx {
        ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[inline]
fn valid_rows(g: &ConvGeom, ky: usize) -> (usize, usize) {
    let lo = if ky >= g.pad {
        0
    } else {
        (g.pad - ky).div_ceil(g.stride)
    };
    let hi = if g.h + g.pad > ky {
        ((g.h - 1 + g.pad - ky) / g.stride + 1).min(g.oh)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-d cross-correlation of a C×H×W input with a C_out×C_in×k×k kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, bias, pad, stride)?;
    Ok(Tensor {
        shape: vec![g.c_out, g.oh, g.ow],
        data: conv_forward(&g, input.data(), weight.data(), bias.data()),
    })
}

/// Unfolds the input into a (C_in·k·k)×(OH·OW) matrix; out-of-frame taps are 0.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * plane];
    for ci in 0..g.c_in {
        let in_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_rows(g, ky);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_cols(g, kx);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        out[ox] = in_row[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let in_plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_rows(g, ky);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_cols(g, kx);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut in_plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * g.stride + kx - g.pad;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], b: &[T]) -> Vec<T> {
    let plane = g.oh * g.ow;
    let ckk = g.c_in * g.k * g.k;
    let cols = im2col(g, x);
    let mut out = vec![T::zero(); g.c_out * plane];
    for (co, row) in out.chunks_mut(plane.max(1)).enumerate() {
        row.fill(b[co]);
    }
    // out[C_out × P] += W[C_out × CKK] · cols[CKK × P]
    T::gemm(g.c_out, ckk, plane, (wt, ckk as isize, 1), (&cols, plane as isize, 1), T::one(), &mut out, plane as isize);
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; the input gradient is only
/// computed when requested.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    gout: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.oh * g.ow;
    let ckk = g.c_in * g.k * g.k;
    let cols = im2col(g, x);
    let gb: Vec<T> = (0..g.c_out).map(|co| gout[co * plane..(co + 1) * plane].iter().copied().sum()).collect();
    // gW[C_out × CKK] = gout[C_out × P] · colsᵀ[P × CKK]
    let mut gw = vec![T::zero(); wt.len()];
    T::gemm(g.c_out, plane, ckk, (gout, plane as isize, 1), (&cols, 1, plane as isize), T::zero(), &mut gw, ckk as isize);
    let gx = need_input.then(|| {
        // gcols[CKK × P] = Wᵀ[CKK × C_out] · gout[C_out × P]
        let mut gcols = vec![T::zero(); ckk * plane];
        T::gemm(ckk, g.c_out, plane, (wt, 1, ckk as isize), (gout, plane as isize, 1), T::zero(), &mut gcols, plane as isize);
        col2im(g, &gcols)
    });
    (gx, gw, gb)
}

/// Per-pixel softmax over the channel axis of a K×H×W tensor.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, h, w) = logits.chw()?;
    if k < 2 {
        return Err(Error::dim(format!("softmax needs K ≥ 2, got {k}")));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "softmax_channels" });
    }
    let hw = h * w;
    let z = logits.data();
    let mut out = vec![T::zero(); z.len()];
    for j in 0..hw {
        let mut m = z[j];
        for c in 1..k {
            m = m.max(z[c * hw + j]);
        }
        let mut s = T::zero();
        for c in 0..k {
            let e = (z[c * hw + j] - m).exp();
            out[c * hw + j] = e;
            s = s + e;
        }
        for c in 0..k {
            out[c * hw + j] = out[c * hw + j] / s;
        }
    }
    Ok(Tensor {
        shape: vec![k, h, w],
        data: out,
    })
}

/// Nearest-neighbour upsampling of a C×H×W tensor by an integer factor.
pub fn upsample_nearest<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::arg("upsample factor must be ≥ 1"));
    }
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let row = &x[ch * h * w + (oy / factor) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

pub(crate) fn upsample_backward<T: Scalar>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let grow = &gout[ch * oh * ow + oy * ow..][..ow];
            let dst = &mut gx[ch * h * w + (oy / factor) * w..][..w];
            for ox in 0..ow {
                dst[ox / factor] = dst[ox / factor] + grow[ox];
            }
        }
    }
    gx
}

/// Cross-entropy target for a single pixel.
#[derive(Clone, Copy, Debug)]
pub enum CeTarget<'a> {
    Class(usize),
    /// A distribution over the K classes.
    Soft(&'a [f32]),
}

/// `−Σ_c t_c · ln(max(p_c, 1e-12))` for one pixel's class probabilities.
pub fn cross_entropy_value(probs: &[f64], target: CeTarget<'_>) -> f64 {
    match target {
        CeTarget::Class(c) => -probs[c].max(LOG_CLAMP).ln(),
        CeTarget::Soft(t) => t
            .iter()
            .zip(probs)
            .filter(|(&tc, _)| tc != 0.0)
            .map(|(&tc, &p)| -(tc as f64) * p.max(LOG_CLAMP).ln())
            .sum(),
    }
}

/// Per-pixel targets for a weighted cross-entropy reduction over an H×W map.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetMap {
    /// One class id per pixel.
    Hard(Vec<u32>),
    /// Pixel-major distributions: `probs[j * classes + c]`.
    Soft { classes: usize, probs: Vec<f32> },
}

impl TargetMap {
    pub fn pixels(&self) -> usize {
        match self {
            TargetMap::Hard(v) => v.len(),
            TargetMap::Soft { classes, probs } => probs.len() / classes,
        }
    }

    pub fn at(&self, j: usize) -> CeTarget<'_> {
        match self {
            TargetMap::Hard(v) => CeTarget::Class(v[j] as usize),
            TargetMap::Soft { classes, probs } => CeTarget::Soft(&probs[j * classes..(j + 1) * classes]),
        }
    }
}

/// Forward of `Σ_j w_j · CE(softmax(z)(j), t_j)`. Returns the loss and the
/// softmax probabilities (reused by the backward pass).
pub(crate) fn weighted_ce_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &TargetMap,
    weights: &[f64],
) -> Result<(f64, Vec<T>)> {
    let (k, h, w) = logits.chw()?;
    let hw = h * w;
    if targets.pixels() != hw || weights.len() != hw {
        return Err(Error::dim(format!(
            "cross-entropy over {hw} pixels got {} targets and {} weights",
            targets.pixels(),
            weights.len()
        )));
    }
    if let TargetMap::Soft { classes, .. } = targets {
        if *classes != k {
            return Err(Error::dim(format!("soft targets have {classes} classes, logits {k}")));
        }
    }
    let probs = softmax_channels(logits)?.into_data();
    let z = logits.data();
    let log_clamp = LOG_CLAMP.ln();
    let mut total = 0.0f64;
    let mut p = vec![0.0f64; k];
    for j in 0..hw {
        let wj = weights[j];
        if wj == 0.0 {
            continue;
        }
        // log-softmax in f64 from the logits keeps the value exact to the clamp.
        let m = (0..k).map(|c| z[c * hw + j].to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..k)
            .map(|c| (z[c * hw + j].to_f64().unwrap() - m).exp())
            .sum::<f64>()
            .ln();
        for (c, pc) in p.iter_mut().enumerate() {
            *pc = z[c * hw + j].to_f64().unwrap() - lse;
        }
        let ce = match targets.at(j) {
            CeTarget::Class(c) => {
                if c >= k {
                    return Err(Error::arg(format!("target class {c} out of range for K={k}")));
                }
                -p[c].max(log_clamp)
            }
            CeTarget::Soft(t) => t
                .iter()
                .zip(&p)
                .map(|(&tc, &lp)| -(tc as f64) * lp.max(log_clamp))
                .sum(),
        };
        total += wj * ce;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((total, probs))
}

/// Gradient of the weighted cross-entropy with respect to the logits.
pub(crate) fn weighted_ce_backward<T: Scalar>(
    upstream: T,
    probs: &[T],
    k: usize,
    hw: usize,
    targets: &TargetMap,
    weights: &[f64],
) -> Vec<T> {
    let mut gz = vec![T::zero(); k * hw];
    let log_clamp = LOG_CLAMP.ln();
    for j in 0..hw {
        let wj = weights[j];
        if wj == 0.0 {
            continue;
        }
        let scale = upstream * T::from_f64_lossy(wj);
        // Clamped log terms are constant, so only unclamped classes carry gradient.
        let unclamped = |c: usize| probs[c * hw + j].to_f64().unwrap().ln() >= log_clamp;
        match targets.at(j) {
            CeTarget::Class(y) => {
                if !unclamped(y) {
                    continue;
                }
                for c in 0..k {
                    let d = if c == y { probs[c * hw + j] - T::one() } else { probs[c * hw + j] };
                    gz[c * hw + j] = scale * d;
                }
            }
            CeTarget::Soft(t) => {
                let s: f64 = (0..k).filter(|&c| unclamped(c)).map(|c| t[c] as f64).sum();
                let s = T::from_f64_lossy(s);
                for c in 0..k {
                    let tk = if unclamped(c) { T::from_f64_lossy(t[c] as f64) } else { T::zero() };
                    gz[c * hw + j] = scale * (probs[c * hw + j] * s - tk);
                }
            }
        }
    }
    gz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    fn naive_conv(
        x: &Tensor<f64>,
        wt: &Tensor<f64>,
        b: &Tensor<f64>,
        pad: usize,
        stride: usize,
    ) -> Vec<f64> {
        let (ci, h, w) = x.chw().unwrap();
        let (co, k) = (wt.shape()[0], wt.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += wt.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn box_sum() {
        let x = t(vec![1, 3, 3], vec![1.0; 9]);
        let wt = t(vec![1, 1, 3, 3], vec![1.0; 9]);
        let b = t(vec![1], vec![0.0]);
        let y = conv2d(&x, &wt, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(vec![1, 4, 5], (0..20).map(|_| rng.random::<f64>()).collect());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d(&x, &t(vec![1, 1, 3, 3], k), &t(vec![1], vec![0.0]), 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (h, w, pad, stride) in [(5, 5, 1, 1), (5, 5, 1, 2), (6, 7, 0, 1), (8, 8, 1, 2), (7, 6, 2, 3)] {
            let x = t(vec![2, h, w], (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
            let wt = t(vec![3, 2, 3, 3], (0..54).map(|_| rng.random_range(-1.0..1.0)).collect());
            let b = t(vec![3], (0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = conv2d(&x, &wt, &b, pad, stride).unwrap();
            let r = naive_conv(&x, &wt, &b, pad, stride);
            assert_eq!(y.len(), r.len());
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = t(vec![2, 4, 4], vec![0.0; 32]);
        let wt = t(vec![1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(
            conv2d(&x, &wt, &t(vec![1], vec![0.0]), 1, 1),
            Err(Error::Dimension(_))
        ));
        let even = t(vec![1, 2, 2, 2], vec![0.0; 8]);
        assert!(conv2d(&x, &even, &t(vec![1], vec![0.0]), 1, 1).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_channels(&t(vec![3, 1, 2], vec![0.5; 6])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax_channels(&t(vec![2, 1, 1], vec![0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f32>::new(vec![4, 2, 2], (0..16).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let p = softmax_channels(&z).unwrap();
        for j in 0..4 {
            let s: f32 = (0..4).map(|c| p.data()[c * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let z = t(vec![2, 1, 1], vec![f64::NAN, 0.0]);
        assert!(matches!(softmax_channels(&z), Err(Error::NonFinite { .. })));
        assert!(softmax_channels(&t(vec![1, 1, 1], vec![0.0])).is_err());
    }

    #[test]
    fn upsample_cases() {
        let x = t(vec![1, 1, 1], vec![5.0]);
        assert_eq!(upsample_nearest(&x, 2).unwrap().data(), &[5.0; 4]);
        let y = t(vec![2, 2, 3], (0..12).map(f64::from).collect());
        assert_eq!(upsample_nearest(&y, 1).unwrap(), y);
        assert!(matches!(upsample_nearest(&y, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy_value(&[0.0, 1.0, 0.0], CeTarget::Class(1)), 0.0);
        let u = [0.25; 4];
        assert!((cross_entropy_value(&u, CeTarget::Class(2)) - 4f64.ln()).abs() < 1e-12);
        // zero probability is clamped rather than infinite
        assert!((cross_entropy_value(&[1.0, 0.0], CeTarget::Class(1)) - 1e12f64.ln()).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let traw: Vec<f32> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let ts: f32 = traw.iter().sum();
        let tgt: Vec<f32> = traw.iter().map(|v| v / ts).collect();
        let oracle: f64 = (0..5).map(|c| -(tgt[c] as f64) * p[c].ln()).sum();
        assert!((cross_entropy_value(&p, CeTarget::Soft(&tgt)) - oracle).abs() < 1e-7);
    }

    #[test]
    fn weighted_ce_forward_matches_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z = t(vec![3, 2, 3], (0..18).map(|_| rng.random_range(-3.0..3.0)).collect());
        let probs = softmax_channels(&z).unwrap();
        let hard: Vec<u32> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let weights: Vec<f64> = (0..6).map(|j| if j == 2 { 0.0 } else { rng.random() }).collect();
        let (loss, _) = weighted_ce_forward(&z, &TargetMap::Hard(hard.clone()), &weights).unwrap();
        let oracle: f64 = (0..6)
            .map(|j| {
                let p: Vec<f64> = (0..3).map(|c| probs.data()[c * 6 + j]).collect();
                weights[j] * cross_entropy_value(&p, CeTarget::Class(hard[j] as usize))
            })
            .sum();
        assert!((loss - oracle).abs() < 1e-12);
    }
}
