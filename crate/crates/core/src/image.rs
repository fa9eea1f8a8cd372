//! Ground-truth raster signal.
//!
//! An [`ImageField`] is a `width × height × channels` lattice of values in
//! `[0, 1]`, readable at continuous coordinates of the unit square. Lattice
//! point `i` sits at the pixel center `(i + 0.5) / width`; queries beyond the
//! outermost centers clamp to the edge pixels.

use std::path::Path;

use image::{ColorType, ImageBuffer, Luma, Rgb};
use rand::Rng;

use crate::error::{Error, Result};

/// A point in normalized image coordinates. `u` spans the width, `v` the height.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coord {
    pub u: f64,
    pub v: f64,
}

impl Coord {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// True when both components are finite and inside `[0, 1]`.
    pub fn in_domain(&self) -> bool {
        (0.0..=1.0).contains(&self.u) && (0.0..=1.0).contains(&self.v)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.in_domain() {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                u: self.u,
                v: self.v,
            })
        }
    }

    /// Draws a point uniformly from the unit square.
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(rng.random::<f64>(), rng.random::<f64>())
    }
}

/// Ground-truth image with row-major, channel-interleaved data in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageField {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch("image must be non-empty".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidConfig(format!(
                "image value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image from a per-pixel closure returning channel values.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                if px.len() != channels {
                    return Err(Error::DimensionMismatch(format!(
                        "pixel closure returned {} channels, expected {channels}",
                        px.len()
                    )));
                }
                data.extend(px);
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Loads an 8-bit grayscale or RGB raster, scaling bytes by 1/255.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color() {
            ColorType::L8 => (1, img.into_luma8().into_raw()),
            ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
            other => {
                return Err(Error::UnsupportedChannels(format!(
                    "{other:?} with {} channels",
                    other.channel_count()
                )))
            }
        };
        let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, channels, data)
    }

    /// Writes the image as an 8-bit PNG (values clamped, rounded half up).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&x| quantize(x)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)
        };
        res.map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Normalized coordinate of the center of pixel `(x, y)`.
    pub fn pixel_center(&self, x: usize, y: usize) -> Coord {
        Coord::new(
            (x as f64 + 0.5) / self.width as f64,
            (y as f64 + 0.5) / self.height as f64,
        )
    }

    /// Center of the pixel containing `x`.
    pub fn snap_to_center(&self, x: Coord) -> Coord {
        let px = ((x.u * self.width as f64).max(0.0) as usize).min(self.width - 1);
        let py = ((x.v * self.height as f64).max(0.0) as usize).min(self.height - 1);
        self.pixel_center(px, py)
    }

    /// Pixel centers in row-major order.
    pub fn pixel_centers(&self) -> Vec<Coord> {
        let mut out = Vec::with_capacity(self.pixel_count());
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.pixel_center(x, y));
            }
        }
        out
    }

    /// Bilinear value at `x`.
    pub fn sample(&self, x: Coord) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(x, &mut out, None)?;
        Ok(out)
    }

    /// Bilinear value and its derivative with respect to `(u, v)`.
    ///
    /// The derivative is laid out `[dc0/du, dc0/dv, dc1/du, ...]` and is zero
    /// along an axis wherever that axis is clamped.
    pub fn sample_grad(&self, x: Coord) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut out = vec![0.0; self.channels];
        let mut grad = vec![0.0; 2 * self.channels];
        self.sample_into(x, &mut out, Some(&mut grad))?;
        Ok((out, grad))
    }

    /// Allocation-free form of [`sample`](Self::sample) /
    /// [`sample_grad`](Self::sample_grad).
    pub fn sample_into(&self, x: Coord, out: &mut [f64], grad: Option<&mut [f64]>) -> Result<()> {
        x.check()?;
        let ax = axis(x.u, self.width);
        let ay = axis(x.v, self.height);
        let (x0, x1, tx) = (ax.lo, ax.lo + ax.step, ax.frac);
        let (y0, y1, ty) = (ay.lo, ay.lo + ay.step, ay.frac);
        let c = self.channels;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        for k in 0..c {
            let top = p00[k] + tx * (p10[k] - p00[k]);
            let bot = p01[k] + tx * (p11[k] - p01[k]);
            out[k] = top + ty * (bot - top);
        }
        if let Some(g) = grad {
            for k in 0..c {
                let slope_u = |a: usize| {
                    (1.0 - ty) * (self.pixel(a + 1, y0)[k] - self.pixel(a, y0)[k])
                        + ty * (self.pixel(a + 1, y1)[k] - self.pixel(a, y1)[k])
                };
                let slope_v = |b: usize| {
                    (1.0 - tx) * (self.pixel(x0, b + 1)[k] - self.pixel(x0, b)[k])
                        + tx * (self.pixel(x1, b + 1)[k] - self.pixel(x1, b)[k])
                };
                let su = (1.0 - ty) * (p10[k] - p00[k]) + ty * (p11[k] - p01[k]);
                let sv = (1.0 - tx) * (p01[k] - p00[k]) + tx * (p11[k] - p10[k]);
                let du = if ax.scale == 0.0 {
                    0.0
                } else if ax.kink {
                    0.5 * (slope_u(x0 - 1) + su)
                } else {
                    su
                };
                let dv = if ay.scale == 0.0 {
                    0.0
                } else if ay.kink {
                    0.5 * (slope_v(y0 - 1) + sv)
                } else {
                    sv
                };
                g[2 * k] = du * ax.scale;
                g[2 * k + 1] = dv * ay.scale;
            }
        }
        Ok(())
    }
}

/// Interpolation stencil along one axis of `n` pixels.
struct Axis {
    lo: usize,
    /// 1 when a second lattice point participates, 0 for single-pixel axes.
    step: usize,
    frac: f64,
    /// d(frac)/d(coordinate); zero inside the clamp band.
    scale: f64,
    /// Query sits exactly on an interior lattice point, where the
    /// interpolant has a kink; the derivative there is the mean of both sides.
    kink: bool,
}

fn axis(t: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            lo: 0,
            step: 0,
            frac: 0.0,
            scale: 0.0,
            kink: false,
        };
    }
    let p = t * n as f64 - 0.5;
    let max = (n - 1) as f64;
    if p < 0.0 {
        return Axis {
            lo: 0,
            step: 1,
            frac: 0.0,
            scale: 0.0,
            kink: false,
        };
    }
    if p > max {
        return Axis {
            lo: n - 2,
            step: 1,
            frac: 1.0,
            scale: 0.0,
            kink: false,
        };
    }
    let lo = (p.floor() as usize).min(n - 2);
    let frac = p - lo as f64;
    Axis {
        lo,
        step: 1,
        frac,
        scale: n as f64,
        kink: frac == 0.0 && lo > 0,
    }
}

/// Quantizes a value to a byte: clamp to `[0, 1]`, scale by 255, round half up.
pub fn quantize(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * 255.0 + 0.5).floor() as u8
}

/// Writes a per-pixel scalar map through a blue (low) to red (high) ramp.
/// The ramp is normalized by the map's maximum.
pub fn save_heatmap(
    values: &[f64],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "heatmap of {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let bytes = heatmap_rgb(values);
    ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .expect("length checked above")
        .save(path)
        .map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// RGB bytes of the blue→red ramp used by [`save_heatmap`].
pub fn heatmap_rgb(values: &[f64]) -> Vec<u8> {
    let max = values
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(0.0_f64, f64::max);
    let mut out = Vec::with_capacity(values.len() * 3);
    for &x in values {
        let t = if max > 0.0 {
            (x / max).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.extend([quantize(t), 0, quantize(1.0 - t)]);
    }
    out
}

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(pred: &ImageField, gt: &ImageField) -> Result<f64> {
    if (pred.width, pred.height, pred.channels) != (gt.width, gt.height, gt.channels) {
        return Err(Error::DimensionMismatch(format!(
            "psnr of {}x{}x{} against {}x{}x{}",
            pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels
        )));
    }
    Ok(psnr_from_mse(mse(&pred.data, &gt.data)))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Discrete distribution over the pixel lattice, sampled by inverse CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePdf {
    width: usize,
    height: usize,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EdgePdf {
    /// Normalizes non-negative scores into a PMF. All-zero scores fall back
    /// to the uniform PMF.
    pub fn from_scores(width: usize, height: usize, scores: &[f64]) -> Self {
        assert_eq!(scores.len(), width * height);
        let total: f64 = scores.iter().sum();
        let probs: Vec<f64> = if total > 0.0 && total.is_finite() {
            scores.iter().map(|s| s / total).collect()
        } else {
            vec![1.0 / scores.len() as f64; scores.len()]
        };
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Self {
            width,
            height,
            probs,
            cumulative,
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel index whose CDF interval contains `r ∈ [0, 1)`.
    pub fn pixel_for(&self, r: f64) -> usize {
        let target = r * self.cumulative.last().copied().unwrap_or(1.0);
        let i = self.cumulative.partition_point(|&c| c <= target);
        i.min(self.probs.len() - 1)
    }

    /// Draws a pixel, then a point uniformly inside that pixel's cell.
    pub fn sample_coord<R: Rng + ?Sized>(&self, rng: &mut R) -> Coord {
        let i = self.pixel_for(rng.random::<f64>());
        let (x, y) = (i % self.width, i / self.width);
        Coord::new(
            (x as f64 + rng.random::<f64>()) / self.width as f64,
            (y as f64 + rng.random::<f64>()) / self.height as f64,
        )
    }
}

/// Rec. 601 luminance per pixel.
pub fn luminance(img: &ImageField) -> Vec<f64> {
    match img.channels {
        1 => img.data.clone(),
        _ => img
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
    }
}

/// Sobel gradient magnitude of the luminance, replicate-padded.
pub fn sobel_magnitude(img: &ImageField) -> Vec<f64> {
    let (w, h) = (img.width as isize, img.height as isize);
    let lum = luminance(img);
    let at = |x: isize, y: isize| lum[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut out = Vec::with_capacity(lum.len());
    for y in 0..h {
        for x in 0..w {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Edge-based re-initialization distribution: Sobel magnitudes normalized
/// to sum to one.
pub fn sobel_edge_pdf(img: &ImageField) -> EdgePdf {
    EdgePdf::from_scores(img.width, img.height, &sobel_magnitude(img))
}
