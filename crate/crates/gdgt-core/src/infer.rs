//! Whole-image and tiled inference, plus image <-> tensor conversion.
//!
//! Large inputs are processed in overlapping tiles whose distortion-map rows
//! come from the full image, so every tile sees the guidance of its true
//! latitude; only the central region of each tile is kept when stitching.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::distortion_map;
use crate::model::Gdgt;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// 8-bit RGB to `[1, 3, h, w]` in the 0..=1 range.
pub fn tensor_from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn(&[1, 3, h as usize, w as usize], |i| {
        img.get_pixel(i[3] as u32, i[2] as u32).0[i[1]] as f32 / 255.0
    })
}

/// `[1, 3, h, w]` back to 8-bit RGB with clamping and rounding.
pub fn rgb_from_tensor(t: &Tensor<f32>) -> Result<RgbImage> {
    let shape = t.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
        return Err(Error::dim("rgb conversion (expected [1,3,h,w])", shape, &[1, 3]));
    }
    let (h, w) = (shape[2], shape[3]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb(std::array::from_fn(|c| {
                (t.at(&[0, c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8
            }));
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

/// Runs the model over the whole input at once.
pub fn super_resolve(model: &Gdgt, store: &ParamStore<f32>, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape: Tape<f32> = Tape::new();
    let bind = store.bind_frozen(&mut tape);
    let input = tape.constant(lr.clone());
    let out = model.forward(&mut tape, &bind, input, None)?;
    Ok(tape.value(out).clone())
}

/// Tiled inference with central-crop stitching. `tile` is the tile extent in
/// low-resolution pixels and must exceed twice the overlap.
pub fn super_resolve_tiled(
    model: &Gdgt,
    store: &ParamStore<f32>,
    lr: &Tensor<f32>,
    tile: usize,
    overlap: usize,
) -> Result<Tensor<f32>> {
    let shape = lr.shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::dim("tiled inference (single image)", &shape, &[1]));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if tile <= 2 * overlap {
        return Err(Error::Config(format!(
            "tile extent {tile} must exceed twice the overlap {overlap}"
        )));
    }
    let s = model.config().scale;
    if tile >= h && tile >= w {
        return super_resolve(model, store, lr);
    }
    let (th, tw) = (tile.min(h), tile.min(w));
    let full_d = distortion_map(h, w)?;
    let mut out = Tensor::<f32>::zeros(&[1, c, h * s, w * s]);

    let positions = |extent: usize, t: usize| -> Vec<usize> {
        let step = t - 2 * overlap;
        let mut pos = Vec::new();
        let mut p = 0usize;
        loop {
            if p + t >= extent {
                pos.push(extent - t);
                break;
            }
            pos.push(p);
            p += step;
        }
        pos
    };

    for &y0 in &positions(h, th) {
        for &x0 in &positions(w, tw) {
            let patch = Tensor::from_fn(&[1, c, th, tw], |i| lr.at(&[0, i[1], y0 + i[2], x0 + i[3]]));
            let d_patch = full_d.crop_rows(y0, th, tw)?.to_tensor::<f32>();
            let mut tape: Tape<f32> = Tape::new();
            let bind = store.bind_frozen(&mut tape);
            let input = tape.constant(patch);
            let dv = tape.constant(d_patch);
            let sr = model.forward(&mut tape, &bind, input, Some(dv))?;
            let sr = tape.value(sr);

            // keep the central region; edges only where the tile touches
            // the image border
            let ry0 = if y0 > 0 { overlap } else { 0 };
            let ry1 = if y0 + th < h { th - overlap } else { th };
            let rx0 = if x0 > 0 { overlap } else { 0 };
            let rx1 = if x0 + tw < w { tw - overlap } else { tw };
            for ci in 0..c {
                for y in ry0 * s..ry1 * s {
                    for x in rx0 * s..rx1 * s {
                        out.set(&[0, ci, y0 * s + y, x0 * s + x], sr.at(&[0, ci, y, x]));
                    }
                }
            }
        }
    }
    Ok(out)
}
