//! Differentiable primitives. Each forward has a matching backward that
//! returns exact gradients of the implemented forward.
//!
//! Batch items are processed with rayon; per-item partial gradients are
//! summed in item order, so results do not depend on the thread count.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor4};
use rand::Rng;
use rayon::prelude::*;

/// Geometry of a cross-correlation from a `c x h x w` image to `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(param_err!("kernel and stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!(
                "{}x{} input too small for kernel {} with pad {}",
                h,
                w,
                k,
                pad
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.pad)
            .saturating_sub(kx)
            .div_ceil(self.stride)
            .min(self.ow);
        (lo.min(hi), hi)
    }
}

/// Unfolds `img` (`c x h x w`) into a `(c*k*k) x (oh*ow)` matrix.
pub fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kx);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `img`.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kx);
                    let start = lo * g.stride + kx - g.pad;
                    for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(&src[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution-like layer.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor4<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// A 2-D convolution (cross-correlation) or its transpose.
///
/// Convolution weights are `[out, in, k, k]`; transposed-convolution weights
/// are `[in, out, k, k]`, so a transposed layer is the adjoint of the
/// convolution with the same weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k]
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.transposed {
            let grow = |n: usize| (n.max(1) - 1) * self.stride + self.kernel;
            let (gh, gw) = (grow(h), grow(w));
            if h == 0 || w == 0 || gh < 2 * self.pad + 1 || gw < 2 * self.pad + 1 {
                return Err(shape_err!("{}x{} input too small for transposed layer", h, w));
            }
            Ok((gh - 2 * self.pad, gw - 2 * self.pad))
        } else {
            let g = ConvGeom::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)?;
            Ok((g.oh, g.ow))
        }
    }

    /// Geometry of the underlying cross-correlation for an `h x w` input.
    fn geom(&self, h: usize, w: usize) -> Result<ConvGeom> {
        if self.transposed {
            let (oh, ow) = self.output_size(h, w)?;
            let g = ConvGeom::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad)?;
            if (g.oh, g.ow) != (h, w) {
                return Err(shape_err!("transposed layer does not invert to {}x{}", h, w));
            }
            Ok(g)
        } else {
            ConvGeom::new(self.in_channels, h, w, self.kernel, self.stride, self.pad)
        }
    }

    fn check(&self, x: &Tensor4<impl Real>, weight_len: usize, bias_len: Option<usize>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(shape_err!(
                "layer expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        if weight_len != self.weight_len() {
            return Err(shape_err!(
                "weight has {} values, expected {}",
                weight_len,
                self.weight_len()
            ));
        }
        if let Some(n) = bias_len {
            if n != self.out_channels {
                return Err(shape_err!("bias has {} values, expected {}", n, self.out_channels));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, x: &Tensor4<T>, weight: &[T], bias: Option<&[T]>) -> Result<Tensor4<T>> {
        self.check(x, weight.len(), bias.map(|b| b.len()))?;
        let [b, _, h, w] = x.dims();
        let g = self.geom(h, w)?;
        let (oh, ow) = self.output_size(h, w)?;
        let out_plane = self.out_channels * oh * ow;
        let items: Vec<Vec<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let xi = x.item(i);
                let mut out = vec![T::zero(); out_plane];
                if self.transposed {
                    let mut cols = vec![T::zero(); g.rows() * g.cols()];
                    T::gemm(
                        true,
                        false,
                        g.rows(),
                        g.cols(),
                        self.in_channels,
                        T::one(),
                        weight,
                        xi,
                        T::zero(),
                        &mut cols,
                    );
                    col2im(&g, &cols, &mut out);
                } else {
                    let mut cols = vec![T::zero(); g.rows() * g.cols()];
                    im2col(&g, xi, &mut cols);
                    T::gemm(
                        false,
                        false,
                        self.out_channels,
                        g.cols(),
                        g.rows(),
                        T::one(),
                        weight,
                        &cols,
                        T::zero(),
                        &mut out,
                    );
                }
                if let Some(bias) = bias {
                    for (plane, &bv) in out.chunks_exact_mut(oh * ow).zip(bias) {
                        plane.iter_mut().for_each(|v| *v += bv);
                    }
                }
                out
            })
            .collect();
        Tensor4::from_vec([b, self.out_channels, oh, ow], items.concat())
    }

    pub fn backward<T: Real>(&self, x: &Tensor4<T>, weight: &[T], dy: &Tensor4<T>) -> Result<ConvGrads<T>> {
        self.check(x, weight.len(), None)?;
        let [b, _, h, w] = x.dims();
        let g = self.geom(h, w)?;
        let (oh, ow) = self.output_size(h, w)?;
        if dy.dims() != [b, self.out_channels, oh, ow] {
            return Err(shape_err!("output gradient dims {:?}", dy.dims()));
        }
        let in_plane = self.in_channels * h * w;
        let parts: Vec<(Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let xi = x.item(i);
                let dyi = dy.item(i);
                let mut dx = vec![T::zero(); in_plane];
                let mut dw = vec![T::zero(); weight.len()];
                let mut cols = vec![T::zero(); g.rows() * g.cols()];
                if self.transposed {
                    im2col(&g, dyi, &mut cols);
                    T::gemm(
                        false,
                        false,
                        self.in_channels,
                        g.cols(),
                        g.rows(),
                        T::one(),
                        weight,
                        &cols,
                        T::zero(),
                        &mut dx,
                    );
                    T::gemm(
                        false,
                        true,
                        self.in_channels,
                        g.rows(),
                        g.cols(),
                        T::one(),
                        xi,
                        &cols,
                        T::zero(),
                        &mut dw,
                    );
                } else {
                    im2col(&g, xi, &mut cols);
                    T::gemm(
                        false,
                        true,
                        self.out_channels,
                        g.rows(),
                        g.cols(),
                        T::one(),
                        dyi,
                        &cols,
                        T::zero(),
                        &mut dw,
                    );
                    let mut dcols = cols;
                    T::gemm(
                        true,
                        false,
                        g.rows(),
                        g.cols(),
                        self.out_channels,
                        T::one(),
                        weight,
                        dyi,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&g, &dcols, &mut dx);
                }
                (dx, dw)
            })
            .collect();
        let mut dw = vec![T::zero(); weight.len()];
        let mut dx = Vec::with_capacity(b * in_plane);
        for (dxi, dwi) in parts {
            dx.extend(dxi);
            dw.iter_mut().zip(dwi).for_each(|(a, v)| *a += v);
        }
        let mut db = vec![T::zero(); self.out_channels];
        for i in 0..b {
            for (c, d) in db.iter_mut().enumerate() {
                *d += dy.plane(i, c).iter().copied().sum::<T>();
            }
        }
        Ok(ConvGrads {
            dx: Tensor4::from_vec(x.dims(), dx)?,
            dw,
            db,
        })
    }
}

/// Convolution with `[out, in, k, k]` weights.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    Conv {
        in_channels: x.channels(),
        out_channels,
        kernel,
        stride,
        pad,
        transposed: false,
    }
    .forward(x, weight, bias)
}

/// Transposed convolution with `[in, out, k, k]` weights.
pub fn transposed_conv2d<T: Real>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    Conv {
        in_channels: x.channels(),
        out_channels,
        kernel,
        stride,
        pad,
        transposed: true,
    }
    .forward(x, weight, bias)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Values kept from a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

/// Training-mode batch normalization with per-channel batch statistics.
pub fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BnCache<T>)> {
    let [b, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("batch norm over {} channels with {} scales", c, gamma.len()));
    }
    let n = b * h * w;
    if n < 2 {
        return Err(param_err!("training-mode batch norm needs batch*H*W >= 2, got {}", n));
    }
    let nf = T::from_usize(n).unwrap();
    let eps = T::from_f64_lossy(eps);
    let mut xhat = Tensor4::zeros(x.dims());
    let mut y = Tensor4::zeros(x.dims());
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..b {
            s += x.plane(i, ch).iter().copied().sum::<T>();
        }
        let m = s / nf;
        let mut ss = T::zero();
        for i in 0..b {
            ss += x.plane(i, ch).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        let var = ss / nf;
        let is = T::one() / (var + eps).sqrt();
        for i in 0..b {
            let src = x.plane(i, ch);
            let xh = xhat.plane_mut(i, ch);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * is;
            }
            let xh = xhat.plane(i, ch).to_vec();
            for (d, v) in y.plane_mut(i, ch).iter_mut().zip(xh) {
                *d = gamma[ch] * v + beta[ch];
            }
        }
        inv_std[ch] = is;
        mean[ch] = m;
        var_unbiased[ch] = ss / T::from_usize(n - 1).unwrap();
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var_unbiased,
        },
    ))
}

/// Eval-mode batch normalization with running statistics.
pub fn batch_norm_eval<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor4<T>> {
    let [b, c, _, _] = x.dims();
    if [gamma.len(), beta.len(), running_mean.len(), running_var.len()] != [c; 4] {
        return Err(shape_err!("batch norm parameters do not match {} channels", c));
    }
    let eps = T::from_f64_lossy(eps);
    let mut y = x.clone();
    for i in 0..b {
        for ch in 0..c {
            let k = gamma[ch] / (running_var[ch] + eps).sqrt();
            let off = beta[ch] - running_mean[ch] * k;
            y.plane_mut(i, ch).iter_mut().for_each(|v| *v = *v * k + off);
        }
    }
    Ok(y)
}

/// Exponential update of running statistics with the given momentum.
pub fn update_running_stats<T: Real>(running: &mut [T], batch: &[T], momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    for (r, &v) in running.iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * v;
    }
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    dy: &Tensor4<T>,
    gamma: &[T],
    cache: &BnCache<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    if dy.dims() != cache.xhat.dims() {
        return Err(shape_err!("batch norm gradient dims {:?}", dy.dims()));
    }
    let [b, c, h, w] = dy.dims();
    let nf = T::from_usize(b * h * w).unwrap();
    let mut dx = Tensor4::zeros(dy.dims());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sd, mut sdx) = (T::zero(), T::zero());
        for i in 0..b {
            for (&g, &xh) in dy.plane(i, ch).iter().zip(cache.xhat.plane(i, ch)) {
                sd += g;
                sdx += g * xh;
            }
        }
        dbeta[ch] = sd;
        dgamma[ch] = sdx;
        let k = gamma[ch] * cache.inv_std[ch];
        let (md, mdx) = (sd / nf, sdx / nf);
        for i in 0..b {
            let g = dy.plane(i, ch).to_vec();
            let xh = cache.xhat.plane(i, ch).to_vec();
            for ((d, g), xh) in dx.plane_mut(i, ch).iter_mut().zip(g).zip(xh) {
                *d = k * (g - md - xh * mdx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// `x` for positive inputs, `slope * x` otherwise. `slope = 0` is ReLU.
pub fn leaky_relu<T: Real>(x: &Tensor4<T>, slope: f64) -> Tensor4<T> {
    let s = T::from_f64_lossy(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    leaky_relu(x, 0.0)
}

/// Backward of [`leaky_relu`] given its output `y` (same sign as the input
/// for any positive slope and for ReLU).
pub fn leaky_relu_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>, slope: f64) -> Result<Tensor4<T>> {
    let s = T::from_f64_lossy(slope);
    y.zip_map(dy, |y, g| if y > T::zero() { g } else { g * s })
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1 / (1 - rate)`), or the input unchanged outside training.
pub fn dropout<T: Real>(
    x: &Tensor4<T>,
    rate: f64,
    rng: &mut impl Rng,
    train: bool,
) -> Result<(Tensor4<T>, Option<Tensor4<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(param_err!("dropout rate {} outside [0, 1)", rate));
    }
    if !train || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let k = T::from_f64_lossy(1.0 / keep);
    let mask = Tensor4::from_fn(x.dims(), |_| if rng.random::<f64>() < keep { k } else { T::zero() });
    Ok((x.mul(&mask)?, Some(mask)))
}

/// `s_max * sigmoid(z)`.
pub fn scaled_sigmoid<T: Real>(z: &Tensor4<T>, s_max: f64) -> Tensor4<T> {
    let s = T::from_f64_lossy(s_max);
    z.map(|v| s / (T::one() + (-v).exp()))
}

/// Backward of [`scaled_sigmoid`] given its output `y`.
pub fn scaled_sigmoid_backward<T: Real>(y: &Tensor4<T>, dy: &Tensor4<T>, s_max: f64) -> Result<Tensor4<T>> {
    let s = T::from_f64_lossy(s_max);
    y.zip_map(dy, |y, g| g * y * (T::one() - y / s))
}

/// Mean absolute error over all elements (pixels and batch items) and its
/// gradient; the subgradient at exact ties is 0.
pub fn l1_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    if pred.dims() != target.dims() {
        return Err(shape_err!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        ));
    }
    if pred.is_empty() {
        return Err(shape_err!("empty prediction"));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum::<T>()
        / n;
    let grad = pred.zip_map(target, |p, t| {
        if p > t {
            T::one() / n
        } else if p < t {
            -T::one() / n
        } else {
            T::zero()
        }
    })?;
    Ok((loss, grad))
}

/// Change probability `phi / s_max`.
pub fn change_probability<T: Real>(pred: &Tensor4<T>, s_max: f64) -> Tensor4<T> {
    pred.scale(T::one() / T::from_f64_lossy(s_max))
}
