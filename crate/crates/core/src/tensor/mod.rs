//! Dense tensors, image/flow/mask containers and their file formats.
//!
//! Activations are stored as `Tensor4` in NCHW order. Training code runs in
//! `f32`; gradient checks instantiate the same code with `f64`.

mod flow;
mod image;

pub use self::flow::{flow_to_color, normalize_flow, read_flo, wheel_color, write_flo, FlowField, FLO_MAGIC};
pub use self::image::{denormalize_image, normalize_image, ChangeMask, Image, S_MAX};

use crate::error::{param_err, shape_err, Result};
use std::fmt::Debug;

/// Scalar type usable by the tensor kernels.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of size
    /// `m x k` and `op(b)` of size `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::zero)
    }
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Stored matrix is `rows x cols` when not transposed, `cols x rows` otherwise.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(trans_a, m, k);
                let (rsb, csb) = gemm_strides(trans_b, k, n);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A dense 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(shape_err!(
                "tensor {:?} needs {} values, got {}",
                dims,
                expected,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }
    #[inline]
    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }
    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `H*W` plane of one (batch, channel).
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Contiguous `C*H*W` block of one batch element.
    pub fn item(&self, b: usize) -> &[T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[b * chw..(b + 1) * chw]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[b * chw..(b + 1) * chw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Self {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(0.0)))
                .collect(),
        }
    }

    /// Zero-pads the spatial dims by `(top, bottom, left, right)`.
    pub fn pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let [n, c, h, w] = self.dims;
        let mut out = Self::zeros([n, c, h + top + bottom, w + left + right]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let src = self.offset(b, ch, y, 0);
                    let dst = out.offset(b, ch, y + top, left);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    /// Spatial crop of `height x width` starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if y0 + height > h || x0 + width > w {
            return Err(shape_err!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                height,
                width,
                y0,
                x0,
                h,
                w
            ));
        }
        let mut out = Self::zeros([n, c, height, width]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..height {
                    let src = self.offset(b, ch, y0 + y, x0);
                    let dst = out.offset(b, ch, y, 0);
                    out.data[dst..dst + width].copy_from_slice(&self.data[src..src + width]);
                }
            }
        }
        Ok(out)
    }

    /// Bilinear resize with half-pixel centers and border clamping.
    pub fn bilinear_resize(&self, height: usize, width: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if height == 0 || width == 0 || h == 0 || w == 0 {
            return Err(param_err!("cannot resize {}x{} to {}x{}", h, w, height, width));
        }
        if height == h && width == w {
            return Ok(self.clone());
        }
        let xs = resize_taps(w, width);
        let ys = resize_taps(h, height);
        let mut out = Self::zeros([n, c, height, width]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let fy = T::from_f64_lossy(fy);
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let fx = T::from_f64_lossy(fx);
                        let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                        dst[oy * width + ox] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rotates every plane by 90 degrees: pixel `(x, y)` moves to
    /// `(H - 1 - y, x)`, so a displacement `(dx, dy)` becomes `(-dy, dx)`.
    pub fn rotate90(&self) -> Self {
        let [n, c, h, w] = self.dims;
        let mut out = Self::zeros([n, c, w, h]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..h {
                    for x in 0..w {
                        // new (x', y') = (h - 1 - y, x); new width is h.
                        dst[x * h + (h - 1 - y)] = src[y * w + x];
                    }
                }
            }
        }
        out
    }

    /// Stacks tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| param_err!("nothing to concatenate"))?;
        let [n, _, h, w] = first.dims;
        for p in parts {
            if p.dims[0] != n || p.dims[2] != h || p.dims[3] != w {
                return Err(shape_err!("cannot concatenate {:?} with {:?}", first.dims, p.dims));
            }
        }
        let c: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }

    /// Splits along channels at `at`, the inverse of a two-way concat.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.dims;
        if at > c {
            return Err(shape_err!("split at {} of {} channels", at, c));
        }
        let hw = h * w;
        let mut a = Vec::with_capacity(n * at * hw);
        let mut b = Vec::with_capacity(n * (c - at) * hw);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..at * hw]);
            b.extend_from_slice(&item[at * hw..]);
        }
        Ok((
            Self {
                dims: [n, at, h, w],
                data: a,
            },
            Self {
                dims: [n, c - at, h, w],
                data: b,
            },
        ))
    }

    /// Stacks single-item tensors into one batch.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| param_err!("empty batch"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(shape_err!("cannot stack {:?} with {:?}", first.dims, t.dims));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w).max(1);
        Ok(Self {
            dims: [n, c, h, w],
            data,
        })
    }

    /// Copies batch element `b` into a single-item tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.item(b).to_vec(),
        }
    }
}

/// Source taps `(lo, hi, frac)` for each output coordinate of a bilinear resize.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Stacks `(I, I', I_f)` along channels: 8 channels with flow, 6 without.
pub fn concat_inputs<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, flow: Option<&Tensor4<T>>) -> Result<Tensor4<T>> {
    if a.channels() != 3 || b.channels() != 3 {
        return Err(shape_err!(
            "image inputs need 3 channels, got {} and {}",
            a.channels(),
            b.channels()
        ));
    }
    match flow {
        Some(f) => {
            if f.channels() != 2 {
                return Err(shape_err!("flow input needs 2 channels, got {}", f.channels()));
            }
            Tensor4::concat_channels(&[a, b, f])
        }
        None => Tensor4::concat_channels(&[a, b]),
    }
}
