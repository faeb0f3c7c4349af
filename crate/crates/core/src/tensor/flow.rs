use super::{Image, Real, Tensor4};
use crate::error::{param_err, shape_err, Error, Result};
use std::path::Path;

/// Tag that opens every Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Dense per-pixel displacement from `I` to `I'`: pixel `(x, y)` of the first
/// image corresponds to `(x + u, y + v)` in the second.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(shape_err!(
                "{}x{} flow needs {} components, got {} and {}",
                width,
                height,
                width * height,
                u.len(),
                v.len()
            ));
        }
        if u.iter().chain(&v).any(|c| !c.is_finite()) {
            return Err(param_err!("flow components must be finite"));
        }
        Ok(Self { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn u(&self) -> &[f32] {
        &self.u
    }
    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Displacement magnitudes, row-major.
    pub fn magnitudes(&self) -> Vec<f32> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    }

    /// Magnitude at quantile `q` in [0, 1] (nearest rank).
    pub fn magnitude_percentile(&self, q: f64) -> f32 {
        let mut m = self.magnitudes();
        if m.is_empty() {
            return 0.0;
        }
        m.sort_by(f32::total_cmp);
        let idx = ((q.clamp(0.0, 1.0) * m.len() as f64).ceil() as usize).clamp(1, m.len()) - 1;
        m[idx]
    }

    /// Two-channel tensor `(u, v)` without scaling.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let cast = |s: &[f32]| {
            s.iter()
                .map(|&x| T::from_f32(x).unwrap_or_else(T::zero))
                .collect::<Vec<_>>()
        };
        let mut data = cast(&self.u);
        data.extend(cast(&self.v));
        Tensor4::from_vec([1, 2, self.height, self.width], data).expect("flow dims")
    }

    pub fn from_tensor<T: Real>(t: &Tensor4<T>, item: usize) -> Result<Self> {
        if t.channels() != 2 {
            return Err(shape_err!("flow tensor needs 2 channels, got {}", t.channels()));
        }
        let conv = |s: &[T]| s.iter().map(|x| x.to_f32().unwrap_or(0.0)).collect();
        Self::new(t.width(), t.height(), conv(t.plane(item, 0)), conv(t.plane(item, 1)))
    }

    /// Encodes the Middlebury `.flo` byte stream.
    pub fn to_flo_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a Middlebury `.flo` byte stream. Trailing bytes are rejected.
    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes
                .get(i..i + 4)
                .map(|s| [s[0], s[1], s[2], s[3]])
                .ok_or_else(|| Error::Format(format!("truncated .flo header at byte {}", i)))
        };
        let magic = f32::from_le_bytes(word(0)?);
        if magic.to_bits() != FLO_MAGIC.to_bits() {
            return Err(Error::Format(format!("bad .flo magic {}", magic)));
        }
        let width = i32::from_le_bytes(word(4)?);
        let height = i32::from_le_bytes(word(8)?);
        if width < 0 || height < 0 {
            return Err(Error::Format(format!("negative .flo dims {}x{}", width, height)));
        }
        let (width, height) = (width as usize, height as usize);
        let payload = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("oversized .flo dims".into()))?;
        let body = &bytes[12..];
        if body.len() < payload {
            return Err(Error::Format(format!(
                "truncated .flo payload: {} of {} bytes",
                body.len(),
                payload
            )));
        }
        if body.len() > payload {
            return Err(Error::Format(format!(
                "{} trailing bytes after .flo payload",
                body.len() - payload
            )));
        }
        let n = width * height;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for px in body.chunks_exact(8) {
            u.push(f32::from_le_bytes([px[0], px[1], px[2], px[3]]));
            v.push(f32::from_le_bytes([px[4], px[5], px[6], px[7]]));
        }
        Self::new(width, height, u, v).map_err(|e| Error::Format(e.to_string()))
    }

    /// Bilinear lookup with border clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.width;
        let h = self.height;
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let lerp = |c: &[f32]| {
            let a = c[y0 * w + x0] as f64 * (1.0 - fx) + c[y0 * w + x1] as f64 * fx;
            let b = c[y1 * w + x0] as f64 * (1.0 - fx) + c[y1 * w + x1] as f64 * fx;
            a * (1.0 - fy) + b * fy
        };
        (lerp(&self.u), lerp(&self.v))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        let t = self.to_tensor::<f32>().crop(y0, x0, height, width)?;
        Self::from_tensor(&t, 0)
    }

    /// Rotates the field 90 degrees, moving pixels as [`Tensor4::rotate90`]
    /// does and mapping each displacement `(u, v)` to `(-v, u)`.
    pub fn rotate90(&self) -> Self {
        let t = self.to_tensor::<f32>().rotate90();
        let u: Vec<f32> = t.plane(0, 1).iter().map(|&x| -x).collect();
        let v = t.plane(0, 0).to_vec();
        Self {
            width: self.height,
            height: self.width,
            u,
            v,
        }
    }

    /// Mean endpoint error against another field over a pixel predicate.
    pub fn mean_endpoint_error(&self, other: &FlowField, mut keep: impl FnMut(usize, usize) -> bool) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(shape_err!(
                "{}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if keep(x, y) {
                    let (a, b) = self.at(x, y);
                    let (c, d) = other.at(x, y);
                    sum += (((a - c) as f64).powi(2) + ((b - d) as f64).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }
}

/// Clamps each component to `[-d_max, d_max]` and divides by `d_max`.
pub fn normalize_flow<T: Real>(flow: &FlowField, d_max: f32) -> Result<Tensor4<T>> {
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(param_err!("d_max must be positive, got {}", d_max));
    }
    let t = flow.to_tensor::<T>();
    let d = T::from_f32(d_max).unwrap_or_else(T::one);
    Ok(t.map(|c| c.max(-d).min(d) / d))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    FlowField::from_flo_bytes(&std::fs::read(path)?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, &flow.to_flo_bytes())
}

/// Middlebury wheel segment lengths: red-yellow, yellow-green, green-cyan,
/// cyan-blue, blue-magenta, magenta-red.
const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

fn wheel() -> Vec<[f64; 3]> {
    let [ry, yg, gc, cb, bm, mr] = WHEEL_SEGMENTS;
    let mut w = Vec::with_capacity(55);
    for i in 0..ry {
        w.push([255.0, 255.0 * i as f64 / ry as f64, 0.0]);
    }
    for i in 0..yg {
        w.push([255.0 - 255.0 * i as f64 / yg as f64, 255.0, 0.0]);
    }
    for i in 0..gc {
        w.push([0.0, 255.0, 255.0 * i as f64 / gc as f64]);
    }
    for i in 0..cb {
        w.push([0.0, 255.0 - 255.0 * i as f64 / cb as f64, 255.0]);
    }
    for i in 0..bm {
        w.push([255.0 * i as f64 / bm as f64, 0.0, 255.0]);
    }
    for i in 0..mr {
        w.push([255.0, 0.0, 255.0 - 255.0 * i as f64 / mr as f64]);
    }
    w
}

/// Color at wheel position `turn` (fraction of a full turn, any real) with
/// saturation in [0, 1]; zero saturation is white.
pub fn wheel_color(turn: f64, saturation: f64) -> [u8; 3] {
    let w = wheel();
    let n = w.len();
    let pos = turn.rem_euclid(1.0) * n as f64;
    let k0 = (pos.floor() as usize) % n;
    let k1 = (k0 + 1) % n;
    let f = pos - pos.floor();
    let s = saturation.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = ((1.0 - f) * w[k0][c] + f * w[k1][c]) / 255.0;
        *o = (255.0 * (1.0 - s * (1.0 - col))).round() as u8;
    }
    out
}

/// Renders a flow field on the Middlebury color wheel. Hue follows
/// `atan2(v, u)`; saturation grows with magnitude up to `max_mag`. With
/// `max_mag = None` the 99th-percentile magnitude is used.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f32>) -> Result<Image> {
    let scale = match max_mag {
        Some(m) if m > 0.0 && m.is_finite() => m as f64,
        Some(m) => return Err(param_err!("max_mag must be positive, got {}", m)),
        None => {
            let p = flow.magnitude_percentile(0.99) as f64;
            if p > 0.0 {
                p
            } else {
                1.0
            }
        }
    };
    let mut data = Vec::with_capacity(flow.width * flow.height * 3);
    for (&u, &v) in flow.u.iter().zip(&flow.v) {
        let (u, v) = (u as f64, v as f64);
        let mag = (u * u + v * v).sqrt();
        let turn = v.atan2(u) / std::f64::consts::TAU;
        data.extend_from_slice(&wheel_color(turn, mag / scale));
    }
    Image::new(flow.width, flow.height, 3, data)
}
