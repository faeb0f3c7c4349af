use super::{Real, Tensor4};
use crate::error::{param_err, shape_err, Error, Result};
use crate::io::write_atomic;
use std::path::Path;

/// Maximum gray level of change masks and network outputs.
pub const S_MAX: f32 = 255.0;

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(param_err!("image channels must be 1 or 3, got {}", channels));
        }
        if data.len() != width * height * channels {
            return Err(shape_err!(
                "{}x{}x{} image needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set_sample(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Luma (0.299, 0.587, 0.114) as reals in [0, 255], row-major.
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    /// Replicates gray images to 3 channels; RGB images are returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(shape_err!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                width,
                height,
                x0,
                y0,
                self.width,
                self.height
            ));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Image::new(width, height, self.channels, data)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = ::image::open(path.as_ref())?;
        Ok(match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Image::new(w as usize, h as usize, 1, g.into_raw())?
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Image::new(w as usize, h as usize, 3, rgb.into_raw())?
            }
        })
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_png_bytes()?)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let color = if self.channels == 1 {
            ::image::ExtendedColorType::L8
        } else {
            ::image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        ::image::ImageEncoder::write_image(
            ::image::codecs::png::PngEncoder::new(&mut out),
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }
}

/// Maps each 8-bit sample to `s / 127.5 - 1`, giving a 1xCxHxW tensor.
pub fn normalize_image<T: Real>(img: &Image) -> Tensor4<T> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let k = T::from_f64_lossy(127.5);
    Tensor4::from_fn([1, c, h, w], |[_, ch, y, x]| {
        T::from_u8(img.sample(x, y, ch)).unwrap_or_else(T::zero) / k - T::one()
    })
}

/// Inverse of [`normalize_image`], rounding to the nearest sample.
pub fn denormalize_image<T: Real>(t: &Tensor4<T>, item: usize) -> Result<Image> {
    let [_, c, h, w] = t.dims();
    let mut img = Image::filled(w, h, c, 0)?;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = (t.get(item, ch, y, x).to_f64().unwrap_or(0.0) + 1.0) * 127.5;
                img.set_sample(x, y, ch, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(img)
}

/// Per-pixel change intensity in `[0, s_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask {
    width: usize,
    height: usize,
    values: Vec<f32>,
    s_max: f32,
}

impl ChangeMask {
    pub fn new(width: usize, height: usize, values: Vec<f32>, s_max: f32) -> Result<Self> {
        if !(s_max > 0.0 && s_max.is_finite()) {
            return Err(param_err!("s_max must be positive, got {}", s_max));
        }
        if values.len() != width * height {
            return Err(shape_err!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0 && **v <= s_max)) {
            return Err(param_err!("mask value {} outside [0, {}]", bad, s_max));
        }
        Ok(Self {
            width,
            height,
            values,
            s_max,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            s_max: S_MAX,
        }
    }

    pub fn from_image(img: &Image) -> Self {
        let values = if img.channels == 1 {
            img.data.iter().map(|&v| v as f32).collect()
        } else {
            img.luma().into_iter().map(|v| v as f32).collect()
        };
        Self {
            width: img.width,
            height: img.height,
            values,
            s_max: S_MAX,
        }
    }

    /// 8-bit gray rendering, rounding half up.
    pub fn to_image(&self) -> Image {
        let k = 255.0 / self.s_max;
        let data = self
            .values
            .iter()
            .map(|&v| (v * k + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn s_max(&self) -> f32 {
        self.s_max
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Pixels strictly above `s_max / 2` count as changed.
    pub fn binarize(&self) -> Vec<bool> {
        let half = self.s_max / 2.0;
        self.values.iter().map(|&v| v > half).collect()
    }

    /// Fraction of changed pixels under [`ChangeMask::binarize`].
    pub fn changed_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.binarize().iter().filter(|&&b| b).count() as f64 / self.values.len() as f64
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let data = self
            .values
            .iter()
            .map(|&v| T::from_f32(v).unwrap_or_else(T::zero))
            .collect();
        Tensor4::from_vec([1, 1, self.height, self.width], data).expect("mask dims")
    }

    /// Builds a mask from a 1x1xHxW tensor, clamping into `[0, s_max]`.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, item: usize, s_max: f32) -> Result<Self> {
        if t.channels() != 1 {
            return Err(shape_err!("mask tensor needs 1 channel, got {}", t.channels()));
        }
        let values = t
            .plane(item, 0)
            .iter()
            .map(|v| v.to_f32().unwrap_or(0.0).clamp(0.0, s_max))
            .collect();
        Self::new(t.width(), t.height(), values, s_max)
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_image(&Image::read_png(path)?))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().write_png(path)
    }
}

impl TryFrom<&Tensor4<f32>> for ChangeMask {
    type Error = Error;
    fn try_from(t: &Tensor4<f32>) -> Result<Self> {
        ChangeMask::from_tensor(t, 0, S_MAX)
    }
}
