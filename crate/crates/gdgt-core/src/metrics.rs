//! Training loss and evaluation metrics.
//!
//! The loss weighs per-pixel absolute error by the distortion map, so
//! equator pixels (dense on the sphere) count more than pole pixels. The
//! evaluation metrics are computed in f64 on the BT.601 luminance of 8-bit
//! images, peak 255; the weighted variants reuse the same row weights.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::DistortionMap;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Distortion-weighted absolute-error loss.
///
/// `d` must be a constant `[1|b, 1, h, w]` map matching the image extents.
/// The normalized form divides by the total weight so the loss scale does
/// not depend on the crop extents; `normalized = false` is the raw sum.
pub fn ws_l1<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    gt: Var,
    d: Var,
    normalized: bool,
) -> Result<Var> {
    let so = tape.shape(out).to_vec();
    let sg = tape.shape(gt).to_vec();
    if so != sg {
        return Err(Error::dim("ws_l1 output vs ground truth", &so, &sg));
    }
    let sd = tape.shape(d).to_vec();
    if sd.len() != 4 || sd[1] != 1 || sd[2] != so[2] || sd[3] != so[3] {
        return Err(Error::dim("ws_l1 weight map", &sd, &so));
    }
    let diff = tape.sub(gt, out)?;
    let mag = tape.abs(diff);
    let weighted = tape.mul(mag, d)?;
    let total = tape.sum_all(weighted);
    if !normalized {
        return Ok(total);
    }
    let d_sum: f64 = tape.value(d).data().iter().map(|v| v.to_f64()).sum();
    let copies = (so[0] / sd[0]) * so[1];
    Ok(tape.scale(total, 1.0 / (d_sum * copies as f64)))
}

/// A single-channel f64 image plane (luminance, 0..=255).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("plane", &[height, width], &[data.len()]));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// BT.601 luminance of an 8-bit RGB image: 0.299 R + 0.587 G + 0.114 B.
pub fn luminance_bt601(img: &image::RgbImage) -> Plane {
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64)
        .collect();
    Plane {
        height: h as usize,
        width: w as usize,
        data,
    }
}

fn check_same_extents(a: &Plane, b: &Plane, ctx: &str) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::dim(ctx, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; +infinity for identical inputs.
pub fn psnr(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    check_same_extents(a, b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let e = x - y;
        acc += e * e;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR with the squared error weighted by the distortion map.
pub fn ws_psnr(a: &Plane, b: &Plane, d: &DistortionMap, peak: f64) -> Result<f64> {
    check_same_extents(a, b, "ws_psnr")?;
    if d.height() != a.height || d.width() != a.width {
        return Err(Error::dim(
            "ws_psnr weight map",
            &[d.height(), d.width()],
            &[a.height, a.width],
        ));
    }
    if !(peak > 0.0) {
        return Err(Error::Config(format!("ws_psnr peak must be positive, got {peak}")));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for y in 0..a.height {
        let w = d.row(y);
        for x in 0..a.width {
            let e = a.at(y, x) - b.at(y, x);
            num += e * e * w;
            den += w;
        }
    }
    let wmse = num / den;
    if wmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / wmse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_PEAK: f64 = 255.0;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Per-window structural similarity over the valid region (no padding).
/// Returns the map of (h - 10) x (w - 10) values.
fn ssim_map(a: &Plane, b: &Plane) -> Result<Plane> {
    check_same_extents(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim (image smaller than the window)",
            &[a.height, a.width],
            &[SSIM_WINDOW, SSIM_WINDOW],
        ));
    }
    let w = gaussian_window();
    let (h, wid) = (a.height, a.width);
    let (oh, ow) = (h - SSIM_WINDOW + 1, wid - SSIM_WINDOW + 1);

    // separable weighted sums of x, y, x^2, y^2, xy: horizontal pass first
    let mut rows = vec![[0.0f64; 5]; h * ow];
    for yy in 0..h {
        for ox in 0..ow {
            let mut acc = [0.0f64; 5];
            for (t, wt) in w.iter().enumerate() {
                let xa = a.at(yy, ox + t);
                let xb = b.at(yy, ox + t);
                acc[0] += wt * xa;
                acc[1] += wt * xb;
                acc[2] += wt * xa * xa;
                acc[3] += wt * xb * xb;
                acc[4] += wt * xa * xb;
            }
            rows[yy * ow + ox] = acc;
        }
    }
    let c1 = (SSIM_K1 * SSIM_PEAK) * (SSIM_K1 * SSIM_PEAK);
    let c2 = (SSIM_K2 * SSIM_PEAK) * (SSIM_K2 * SSIM_PEAK);
    let mut map = vec![0.0f64; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = [0.0f64; 5];
            for (t, wt) in w.iter().enumerate() {
                let r = &rows[(oy + t) * ow + ox];
                for k in 0..5 {
                    s[k] += wt * r[k];
                }
            }
            let (mu_a, mu_b) = (s[0], s[1]);
            let va = s[2] - mu_a * mu_a;
            let vb = s[3] - mu_b * mu_b;
            let cov = s[4] - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2);
            map[oy * ow + ox] = num / den;
        }
    }
    Plane::new(oh, ow, map)
}

/// Mean structural similarity; exactly 1.0 for identical inputs.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.data.iter().sum::<f64>() / map.data.len() as f64)
}

/// Structural similarity averaged with distortion weights: each valid window
/// is weighted by the map value at its center pixel.
pub fn ws_ssim(a: &Plane, b: &Plane, d: &DistortionMap) -> Result<f64> {
    if d.height() != a.height || d.width() != a.width {
        return Err(Error::dim(
            "ws_ssim weight map",
            &[d.height(), d.width()],
            &[a.height, a.width],
        ));
    }
    let map = ssim_map(a, b)?;
    let off = SSIM_WINDOW / 2;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for y in 0..map.height {
        let w = d.row(y + off);
        for x in 0..map.width {
            num += map.at(y, x) * w;
            den += w;
        }
    }
    Ok(num / den)
}

/// Per-image metric record; infinite PSNRs serialize as JSON null and are
/// excluded from dataset means.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ws_psnr: f64,
    pub ws_ssim: f64,
}

/// Dataset means; infinite PSNR entries are skipped and counted.
pub fn mean_report(reports: &[MetricReport]) -> (MetricReport, usize) {
    let mut skipped = 0usize;
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for r in reports {
        for (i, v) in [r.psnr, r.ssim, r.ws_psnr, r.ws_ssim].into_iter().enumerate() {
            if v.is_finite() {
                sums[i] += v;
                counts[i] += 1;
            } else {
                skipped += 1;
            }
        }
    }
    let mean = |i: usize| {
        if counts[i] == 0 {
            f64::NAN
        } else {
            sums[i] / counts[i] as f64
        }
    };
    (
        MetricReport {
            name: "mean".into(),
            psnr: mean(0),
            ssim: mean(1),
            ws_psnr: mean(2),
            ws_ssim: mean(3),
        },
        skipped,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::distortion_map;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_from(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Plane {
        Plane::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn ws_l1_zero_for_identical() {
        let mut tape = Tape::<f64>::new();
        let img = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| i[3] as f64));
        let d = tape.constant(distortion_map(4, 4).unwrap().to_tensor());
        let loss = ws_l1(&mut tape, img, img, d, true).unwrap();
        assert_eq!(tape.value(loss).data(), &[0.0]);
    }

    #[test]
    fn ws_l1_uniform_weights_reduce_to_mean_absolute_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| (i[2] * 5 + i[3]) as f64 * 0.1));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| (i[1] + i[3]) as f64 * 0.07));
        let ones = tape.constant(Tensor::ones(&[1, 1, 4, 5]));
        let loss = ws_l1(&mut tape, a, b, ones, true).unwrap();
        let av = tape.value(a).data();
        let bv = tape.value(b).data();
        let mae: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        assert!((tape.value(loss).data()[0] - mae).abs() < 1e-12);
    }

    #[test]
    fn ws_l1_frozen_arithmetic_case() {
        // |diff| = 1 everywhere on 2x2, rows weighted cos(pi/4): loss = 1
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let out = tape.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        let d = tape.constant(distortion_map(2, 2).unwrap().to_tensor());
        let loss = ws_l1(&mut tape, out, gt, d, true).unwrap();
        assert!((tape.value(loss).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ws_l1_scales_exactly_with_error_doubling() {
        // dyadic values keep gt + err and gt + 2*err exact, so the absolute
        // errors really do double
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Tensor::<f64>::from_fn(&[1, 1, 6, 8], |_| rng.random_range(0..256) as f64 / 256.0);
        let err =
            Tensor::<f64>::from_fn(&[1, 1, 6, 8], |_| rng.random_range(-64..64) as f64 / 512.0);
        let mut tape = Tape::new();
        let gtv = tape.constant(gt.clone());
        let out1 = tape.constant(Tensor::from_fn(&[1, 1, 6, 8], |i| gt.at(i) + err.at(i)));
        let out2 = tape.constant(Tensor::from_fn(&[1, 1, 6, 8], |i| gt.at(i) + 2.0 * err.at(i)));
        let d = tape.constant(distortion_map(6, 8).unwrap().to_tensor());
        let l1 = ws_l1(&mut tape, out1, gtv, d, true).unwrap();
        let l2 = ws_l1(&mut tape, out2, gtv, d, true).unwrap();
        assert_eq!(tape.value(l2).data()[0], 2.0 * tape.value(l1).data()[0]);
    }

    #[test]
    fn ws_l1_complement_identity() {
        // raw weighted sums with D and 1 - D add up to the plain l1 sum
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::from_fn(&[1, 2, 4, 6], |_| rng.random_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn(&[1, 2, 4, 6], |_| rng.random_range(0.0..1.0));
        let dm = distortion_map(4, 6).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let d = tape.constant(dm.to_tensor());
        let comp = tape.constant(Tensor::from_fn(&[1, 1, 4, 6], |i| 1.0 - dm.row(i[2])));
        let l_d = ws_l1(&mut tape, av, bv, d, false).unwrap();
        let l_c = ws_l1(&mut tape, av, bv, comp, false).unwrap();
        let plain: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let total = tape.value(l_d).data()[0] + tape.value(l_c).data()[0];
        assert!((total - plain).abs() < 1e-12 * plain.max(1.0));
    }

    #[test]
    fn psnr_sentinel_and_frozen_values() {
        let a = plane_from(8, 8, |y, x| (y * 8 + x) as f64);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);

        let b = plane_from(8, 8, |y, x| (y * 8 + x) as f64 + 255.0);
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), 0.0);

        let c = plane_from(8, 8, |y, x| (y * 8 + x) as f64 + 1.0);
        let p = psnr(&a, &c, 255.0).unwrap();
        assert!((p - 48.1308036086791).abs() < 1e-4, "{p}");
    }

    #[test]
    fn ws_psnr_equals_psnr_for_unit_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = plane_from(12, 16, |_, _| rng.random_range(0.0..255.0));
        let b = plane_from(12, 16, |_, _| rng.random_range(0.0..255.0));
        let uniform = DistortionMap::uniform(12, 16);
        assert_eq!(
            ws_psnr(&a, &b, &uniform, 255.0).unwrap(),
            psnr(&a, &b, 255.0).unwrap()
        );
    }

    #[test]
    fn ws_psnr_prefers_errors_in_low_weight_rows() {
        // same error magnitude placed at the top row scores higher than in a
        // middle row because the top row weighs 0.3827 against 0.9239
        let h = 4;
        let base = plane_from(h, 12, |_, _| 128.0);
        let mut top = base.clone();
        for x in 0..12 {
            top.data[x] += 50.0;
        }
        let mut mid = base.clone();
        for x in 0..12 {
            mid.data[12 + x] += 50.0;
        }
        let d = distortion_map(h, 12).unwrap();
        let p_top = ws_psnr(&base, &top, &d, 255.0).unwrap();
        let p_mid = ws_psnr(&base, &mid, &d, 255.0).unwrap();
        assert!(p_top > p_mid, "{p_top} vs {p_mid}");

        // direct weighted arithmetic oracle
        let wmse_top = 50.0 * 50.0 * 12.0 * d.row(0) / d.sum();
        let expect_top = 10.0 * (255.0 * 255.0 / wmse_top).log10();
        assert!((p_top - expect_top).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = plane_from(16, 20, |_, _| rng.random_range(0.0..255.0));
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ws_ssim(&a, &a, &distortion_map(16, 20).unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn ws_ssim_with_uniform_weights_matches_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = plane_from(16, 20, |_, _| rng.random_range(0.0..255.0));
        let b = plane_from(16, 20, |y, x| a.at(y, x) * 0.9 + 10.0);
        let u = DistortionMap::uniform(16, 20);
        let plain = ssim(&a, &b).unwrap();
        let weighted = ws_ssim(&a, &b, &u).unwrap();
        assert!((plain - weighted).abs() < 1e-12);
    }

    #[test]
    fn inverted_image_scores_near_zero_ssim() {
        // mid-gray-biased random image against its negative
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = plane_from(24, 24, |_, _| 128.0 + rng.random_range(-60.0..60.0));
        let b = plane_from(24, 24, |y, x| 255.0 - a.at(y, x));
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.1, "ssim {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = plane_from(8, 20, |_, _| 0.0);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn mean_report_skips_infinite_entries() {
        let reports = vec![
            MetricReport { name: "a".into(), psnr: 30.0, ssim: 0.9, ws_psnr: 29.0, ws_ssim: 0.89 },
            MetricReport {
                name: "b".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
                ws_psnr: f64::INFINITY,
                ws_ssim: 1.0,
            },
        ];
        let (mean, skipped) = mean_report(&reports);
        assert_eq!(skipped, 2);
        assert_eq!(mean.psnr, 30.0);
        assert!((mean.ssim - 0.95).abs() < 1e-12);
    }

    #[test]
    fn infinite_psnr_serializes_as_null() {
        let r = MetricReport {
            name: "x".into(),
            psnr: f64::INFINITY,
            ssim: 1.0,
            ws_psnr: 40.0,
            ws_ssim: 0.99,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":null"), "{json}");
    }
}
