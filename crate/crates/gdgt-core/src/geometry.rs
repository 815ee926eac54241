//! Equirectangular projection geometry.
//!
//! ERP maps longitude/latitude linearly onto the plane, stretching content
//! toward the poles. The per-row distortion map quantifies that stretch and
//! feeds the guidance generator, the weighted loss, and the weighted metrics.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Longitude/latitude on the unit sphere, radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereCoord {
    /// longitude, in (-pi, pi)
    pub theta: f64,
    /// latitude, in (-pi/2, pi/2)
    pub phi: f64,
}

/// Projection-plane coordinates, radians. For ERP, x in (-pi, pi) and
/// y in (-pi/2, pi/2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneCoord {
    pub x: f64,
    pub y: f64,
}

/// ERP projection: the identity map on (longitude, latitude).
pub fn erp_project(s: SphereCoord) -> Result<PlaneCoord> {
    if s.theta.abs() >= std::f64::consts::PI || s.phi.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Range(format!(
            "sphere coordinate out of domain: theta={}, phi={}",
            s.theta, s.phi
        )));
    }
    Ok(PlaneCoord { x: s.theta, y: s.phi })
}

/// Inverse of [`erp_project`].
pub fn erp_unproject(p: PlaneCoord) -> Result<SphereCoord> {
    if p.x.abs() >= std::f64::consts::PI || p.y.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Range(format!(
            "plane coordinate out of ERP domain: x={}, y={}",
            p.x, p.y
        )));
    }
    Ok(SphereCoord { theta: p.x, phi: p.y })
}

/// Area ratio between a spherical microunit and its ERP image: cos(y).
pub fn stretching_ratio_erp(p: PlaneCoord) -> Result<f64> {
    if p.y.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Range(format!("latitude out of range: y={}", p.y)));
    }
    Ok(p.y.cos())
}

/// Stretching ratio for an arbitrary projection with the given Jacobian
/// of (x, y) with respect to (theta, phi): cos(phi) / |det J|.
pub fn stretching_ratio_general(jacobian: [[f64; 2]; 2], phi: f64) -> Result<f64> {
    let det = jacobian[0][0] * jacobian[1][1] - jacobian[0][1] * jacobian[1][0];
    if det == 0.0 {
        return Err(Error::SingularJacobian);
    }
    Ok(phi.cos() / det.abs())
}

/// Per-row ERP stretch weights for an H x W image.
///
/// Row `h` (0-based) carries cos((h + 0.5 - H/2) * pi / H), replicated across
/// the width. The half-pixel term makes the map symmetric about the equator
/// only under 0-based row indexing; with 1-based rows the symmetry breaks,
/// so every accessor here is 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionMap {
    height: usize,
    width: usize,
    /// one weight per row; the full map repeats each across the width
    rows: Vec<f64>,
}

/// Builds the distortion map for the given extents.
pub fn distortion_map(height: usize, width: usize) -> Result<DistortionMap> {
    if height == 0 || width == 0 {
        return Err(Error::dim("distortion_map extents", &[height, width], &[1, 1]));
    }
    let rows = (0..height)
        .map(|h| {
            let arg = (h as f64 + 0.5 - height as f64 / 2.0) * std::f64::consts::PI / height as f64;
            arg.cos()
        })
        .collect();
    Ok(DistortionMap { height, width, rows })
}

impl DistortionMap {
    /// All-ones weights; handy for reducing the weighted metrics to their
    /// plain forms.
    pub fn uniform(height: usize, width: usize) -> DistortionMap {
        DistortionMap {
            height,
            width,
            rows: vec![1.0; height],
        }
    }

    /// Weights 1 - w per row (the inverse-emphasis training variant).
    pub fn complement(&self) -> DistortionMap {
        DistortionMap {
            height: self.height,
            width: self.width,
            rows: self.rows.iter().map(|r| 1.0 - r).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Weight of 0-based row `h`.
    pub fn row(&self, h: usize) -> f64 {
        self.rows[h]
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn sum(&self) -> f64 {
        self.rows.iter().sum::<f64>() * self.width as f64
    }

    /// Sub-map covering rows [y0, y0 + h) at width `w`; weights keep the
    /// latitude of the source image, not of the crop.
    pub fn crop_rows(&self, y0: usize, h: usize, w: usize) -> Result<DistortionMap> {
        if y0 + h > self.height || h == 0 || w == 0 {
            return Err(Error::dim("distortion map crop", &[self.height], &[y0, h]));
        }
        Ok(DistortionMap {
            height: h,
            width: w,
            rows: self.rows[y0..y0 + h].to_vec(),
        })
    }

    /// Full H x W tensor of shape [1, 1, H, W].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.height * self.width);
        for &r in &self.rows {
            data.extend(std::iter::repeat_n(T::from_f64(r), self.width));
        }
        Tensor::new(&[1, 1, self.height, self.width], data).expect("consistent extents")
    }

    /// 16-bit grayscale PNG with value = round(weight * 65535).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for (_, y, p) in img.enumerate_pixels_mut() {
            let v = (self.rows[y as usize] * 65535.0).round().clamp(0.0, 65535.0) as u16;
            *p = image::Luma([v]);
        }
        img.save(path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    /// Raw dump: u32 H, u32 W, then H*W little-endian f64 weights.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        for &r in &self.rows {
            let bytes = r.to_le_bytes();
            for _ in 0..self.width {
                f.write_all(&bytes)?;
            }
        }
        Ok(())
    }

    pub fn read_raw(path: &Path) -> Result<DistortionMap> {
        let mut f = std::fs::File::open(path)?;
        let mut hdr = [0u8; 8];
        f.read_exact(&mut hdr)?;
        let height = u32::from_le_bytes(hdr[0..4].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(hdr[4..8].try_into().unwrap()) as usize;
        let mut data = vec![0u8; height * width * 8];
        f.read_exact(&mut data)?;
        let mut rows = Vec::with_capacity(height);
        for h in 0..height {
            let off = h * width * 8;
            rows.push(f64::from_le_bytes(data[off..off + 8].try_into().unwrap()));
        }
        Ok(DistortionMap { height, width, rows })
    }
}

/// Bicubic resampling with the a = -0.5 kernel, half-pixel alignment, and
/// border replication. `scale` > 0; output extents are rounded to at least 1.
pub fn bicubic_resize<T: Scalar>(img: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("bicubic scale must be positive, got {scale}")));
    }
    let shape = img.shape();
    if shape.len() != 4 {
        return Err(Error::dim("bicubic_resize (rank-4 required)", shape, &[4]));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    if oh == h && ow == w && scale == 1.0 {
        return Ok(img.clone());
    }
    // separable resample: rows, then columns
    let (wy, iy) = bicubic_taps(h, oh);
    let (wx, ix) = bicubic_taps(w, ow);
    let src = img.data();
    let mut tmp = vec![0.0f64; b * c * oh * w];
    for bc in 0..b * c {
        let plane = &src[bc * h * w..(bc + 1) * h * w];
        let dst = &mut tmp[bc * oh * w..(bc + 1) * oh * w];
        for oy in 0..oh {
            for t in 0..4 {
                let wgt = wy[oy * 4 + t];
                let row = &plane[iy[oy * 4 + t] * w..iy[oy * 4 + t] * w + w];
                let out = &mut dst[oy * w..oy * w + w];
                for (o, s) in out.iter_mut().zip(row) {
                    *o += wgt * s.to_f64();
                }
            }
        }
    }
    let mut out = vec![T::ZERO; b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &tmp[bc * oh * w..(bc + 1) * oh * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            let row = &plane[oy * w..oy * w + w];
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for t in 0..4 {
                    acc += wx[ox * 4 + t] * row[ix[ox * 4 + t]];
                }
                dst[oy * ow + ox] = T::from_f64(acc);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// The cubic convolution kernel with a = -0.5.
pub fn bicubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// 4 weights + clamped source indices per output coordinate, half-pixel
/// aligned: src = (dst + 0.5) * in/out - 0.5.
fn bicubic_taps(n_in: usize, n_out: usize) -> (Vec<f64>, Vec<usize>) {
    let ratio = n_in as f64 / n_out as f64;
    let mut weights = vec![0.0f64; n_out * 4];
    let mut indices = vec![0usize; n_out * 4];
    for o in 0..n_out {
        let src = (o as f64 + 0.5) * ratio - 0.5;
        let base = src.floor();
        let frac = src - base;
        for t in 0..4 {
            let pos = base as isize + t as isize - 1;
            indices[o * 4 + t] = pos.clamp(0, n_in as isize - 1) as usize;
            weights[o * 4 + t] = bicubic_kernel(frac - (t as f64 - 1.0));
        }
    }
    (weights, indices)
}
