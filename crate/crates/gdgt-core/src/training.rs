//! Desk-scale training loop.
//!
//! Determinism contract: given (seed, config, dataset order), every parameter
//! bit of the result is reproducible, and a run interrupted at a checkpoint
//! resumes bit-identically. The sampler's ChaCha stream position, the Adam
//! moments, and the iteration counters all travel inside the checkpoint.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model_expecting, save_model, Payload};
use crate::error::{Error, Result};
use crate::geometry::{bicubic_resize, distortion_map};
use crate::metrics::ws_l1;
use crate::model::{Gdgt, ModelConfig};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_iters: u64,
    /// fractions of the total run at which the rate halves
    pub milestones: Vec<f64>,
    pub batch_size: usize,
    /// square patch extent in low-resolution pixels
    pub patch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    /// use the literal weighted sum instead of the weight-normalized mean
    pub raw_loss: bool,
    /// horizontal flips keep row weights valid; disabled by default
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            total_iters: 2000,
            milestones: vec![0.5, 0.8, 0.9, 0.95],
            batch_size: 2,
            patch_size: 32,
            seed: 0,
            log_every: 10,
            raw_loss: false,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.total_iters == 0 {
            return Err(Error::Config(
                "batch_size, patch_size and total_iters must be positive".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if m <= prev || m >= 1.0 {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing within (0, 1): {:?}",
                    self.milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }
}

/// Learning rate at an iteration: halves once per passed milestone.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .milestones
        .iter()
        .filter(|&&m| (m * cfg.total_iters as f64).floor() as u64 <= iter)
        .count();
    cfg.lr0 * 0.5f64.powi(passed as i32)
}

/// First/second moment estimates, one pair per parameter.
pub struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Standard bias-corrected update. `grads` follows the store's parameter
    /// order; a `None` gradient leaves the parameter untouched but the moments
    /// still decay consistently.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
        cfg: &TrainConfig,
        iter: u64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - (cfg.beta1 as f32).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f32).powi(t);
        let (lr, eps) = (lr as f32, cfg.eps as f32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if let Some(ix) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!(
                        "gradient of parameter {} at iteration {iter}",
                        store.get(id).name
                    ),
                    index: ix,
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for ((pv, (mv, vv)), gv) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One training image: the high-resolution original and its bicubic
/// low-resolution counterpart, both `[1, c, ., .]` in the 0..=1 range.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<TrainImage>,
    pub scale: usize,
}

impl Dataset {
    /// Pairs each high-resolution image with a bicubic downsample. This is
    /// plain downsampling on the projected image; record it as
    /// "erp-bicubic" wherever results are reported.
    pub fn from_hr_images(hr: Vec<Tensor<f32>>, scale: usize) -> Result<Dataset> {
        let mut images = Vec::with_capacity(hr.len());
        for t in hr {
            let shape = t.shape().to_vec();
            if shape.len() != 4 || shape[2] % scale != 0 || shape[3] % scale != 0 {
                return Err(Error::dim(
                    "training image extents must divide the scale",
                    &shape,
                    &[scale],
                ));
            }
            let lr = bicubic_resize(&t, 1.0 / scale as f64)?;
            images.push(TrainImage { hr: t, lr });
        }
        Ok(Dataset { images, scale })
    }
}

/// Aligned crops plus the matching distortion-map patches. The map rows are
/// cut from the full-image maps, so a patch keeps the weights of its true
/// latitude rather than pretending to span the whole sphere.
pub struct PatchBatch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub d_lr: Tensor<f32>,
    pub d_hr: Tensor<f32>,
}

pub struct Sampler {
    eligible: Vec<usize>,
    patch: usize,
    batch: usize,
    hflip: bool,
}

impl Sampler {
    /// Warns once per undersized image and fails when nothing fits.
    pub fn new(ds: &Dataset, patch: usize, batch: usize, hflip: bool) -> Result<Sampler> {
        let mut eligible = Vec::new();
        for (i, img) in ds.images.iter().enumerate() {
            let s = img.lr.shape();
            if s[2] >= patch && s[3] >= patch {
                eligible.push(i);
            } else {
                eprintln!(
                    "warning: image {i} ({}x{}) is smaller than the {patch}px patch; skipped",
                    s[2], s[3]
                );
            }
        }
        if eligible.is_empty() {
            return Err(Error::Config(format!(
                "no training image is at least {patch}x{patch} after downscaling"
            )));
        }
        Ok(Sampler {
            eligible,
            patch,
            batch,
            hflip,
        })
    }

    pub fn next(&self, ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
        let (p, s) = (self.patch, ds.scale);
        let c = ds.images[self.eligible[0]].lr.shape()[1];
        let mut lr = Tensor::<f32>::zeros(&[self.batch, c, p, p]);
        let mut hr = Tensor::<f32>::zeros(&[self.batch, c, p * s, p * s]);
        let mut d_lr = Tensor::<f32>::zeros(&[self.batch, 1, p, p]);
        let mut d_hr = Tensor::<f32>::zeros(&[self.batch, 1, p * s, p * s]);
        for bi in 0..self.batch {
            let img = &ds.images[self.eligible[rng.random_range(0..self.eligible.len())]];
            let (lh, lw) = (img.lr.shape()[2], img.lr.shape()[3]);
            let y = rng.random_range(0..=lh - p);
            let x = rng.random_range(0..=lw - p);
            let flip = self.hflip && rng.random_range(0..2) == 1;

            copy_crop(&img.lr, &mut lr, bi, y, x, p, p, flip);
            copy_crop(&img.hr, &mut hr, bi, y * s, x * s, p * s, p * s, flip);

            let dm_lr = distortion_map(lh, lw)?.crop_rows(y, p, p)?;
            let dm_hr = distortion_map(lh * s, lw * s)?.crop_rows(y * s, p * s, p * s)?;
            for (row_src, dst, extent) in [(dm_lr, &mut d_lr, p), (dm_hr, &mut d_hr, p * s)] {
                for yy in 0..extent {
                    let wv = row_src.row(yy) as f32;
                    for xx in 0..extent {
                        dst.set(&[bi, 0, yy, xx], wv);
                    }
                }
            }
        }
        Ok(PatchBatch { lr, hr, d_lr, d_hr })
    }
}

#[allow(clippy::too_many_arguments)]
fn copy_crop(
    src: &Tensor<f32>,
    dst: &mut Tensor<f32>,
    bi: usize,
    y0: usize,
    x0: usize,
    ph: usize,
    pw: usize,
    flip: bool,
) {
    let c = src.shape()[1];
    for ci in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                let sx = if flip { x0 + pw - 1 - x } else { x0 + x };
                dst.set(&[bi, ci, y, x], src.at(&[0, ci, y0 + y, sx]));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TracePoint {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub trace: Vec<TracePoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters_run: u64,
}

/// Runs (or resumes) training until `run_until` (capped at the configured
/// total). Emits `loss.csv` and the final/best checkpoints under `out_dir`.
pub fn train_loop(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    run_until: Option<u64>,
    mut on_log: Option<&mut dyn FnMut(&TracePoint)>,
) -> Result<TrainOutcome> {
    mcfg.validate()?;
    tcfg.validate()?;
    if dataset.scale != mcfg.scale {
        return Err(Error::Config(format!(
            "dataset scale {} does not match model scale {}",
            dataset.scale, mcfg.scale
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    init_rng.set_stream(RNG_STREAM_INIT);
    let model = Gdgt::build(mcfg, &mut store, &mut init_rng)?;

    let mut sample_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    sample_rng.set_stream(RNG_STREAM_SAMPLER);

    let mut adam = AdamState::new(&store);
    let mut start_iter = 0u64;
    let mut best_loss = f64::INFINITY;

    if let Some(path) = resume {
        let loaded = load_model_expecting(path, mcfg)?;
        let extras: HashMap<String, Payload> = loaded.extras.into_iter().collect();
        let stored_tcfg: TrainConfig = match extras.get(TRAIN_CONFIG_TENSOR) {
            Some(Payload::Bytes(b)) => serde_json::from_slice(b)
                .map_err(|e| Error::Format(format!("embedded train config: {e}")))?,
            _ => return Err(Error::Integrity(format!("missing tensors: {TRAIN_CONFIG_TENSOR}"))),
        };
        if &stored_tcfg != tcfg {
            return Err(Error::Config(
                "checkpoint was trained with a different training config".into(),
            ));
        }
        store = loaded.store;
        start_iter = read_u64(&extras, "__train__.iter")?;
        best_loss = f64::from_bits(read_u64(&extras, "__train__.best_loss")?);
        adam.step = read_u64(&extras, "__opt__.step")?;
        let pos = read_u128(&extras, "__rng__.sampler.word_pos")?;
        sample_rng.set_word_pos(pos);
        for (i, (_, p)) in store.iter().enumerate() {
            let m = match extras.get(&format!("__opt__.m.{}", p.name)) {
                Some(Payload::F32(t)) => t.clone(),
                _ => return Err(Error::Integrity(format!("missing tensors: __opt__.m.{}", p.name))),
            };
            let v = match extras.get(&format!("__opt__.v.{}", p.name)) {
                Some(Payload::F32(t)) => t.clone(),
                _ => return Err(Error::Integrity(format!("missing tensors: __opt__.v.{}", p.name))),
            };
            adam.m[i] = m;
            adam.v[i] = v;
        }
    }

    let sampler = Sampler::new(dataset, tcfg.patch_size, tcfg.batch_size, tcfg.hflip)?;
    let end_iter = run_until.unwrap_or(tcfg.total_iters).min(tcfg.total_iters);

    let trace_path = out_dir.join("loss.csv");
    let mut trace_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&trace_path)?;
    if start_iter == 0 {
        writeln!(trace_file, "iter,lr,ws_l1")?;
    }

    let final_path = out_dir.join("checkpoint-final.gdgt");
    let best_path = out_dir.join("checkpoint-best.gdgt");
    let mut trace = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for iter in start_iter..end_iter {
        let batch = sampler.next(dataset, &mut sample_rng)?;
        let mut tape: Tape<f32> = Tape::new();
        let bind = store.bind(&mut tape);
        let lr_in = tape.constant(batch.lr);
        let hr_gt = tape.constant(batch.hr);
        let d_lr = tape.constant(batch.d_lr);
        let d_hr = tape.constant(batch.d_hr);
        let out = model.forward(&mut tape, &bind, lr_in, Some(d_lr))?;
        let loss = ws_l1(&mut tape, out, hr_gt, d_hr, !tcfg.raw_loss)?;
        let loss_val = tape.value(loss).data()[0] as f64;
        if iter == start_iter {
            initial_loss = loss_val;
        }
        final_loss = loss_val;

        if !loss_val.is_finite() {
            for t in &trace {
                let TracePoint { iter, lr, loss } = t;
                writeln!(trace_file, "{iter},{lr},{loss}")?;
            }
            return Err(Error::NonFinite {
                context: format!("training loss at iteration {iter}; trace dumped"),
                index: 0,
            });
        }

        tape.backward(loss)?;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let grads: Vec<Option<Tensor<f32>>> = ids
            .iter()
            .map(|&id| tape.grad_tensor(bind.var(id)))
            .collect();
        let lr = lr_at(iter, tcfg);
        adam.step(&mut store, &grads, lr, tcfg, iter)?;

        if iter % tcfg.log_every == 0 || iter + 1 == end_iter {
            let point = TracePoint { iter, lr, loss: loss_val };
            writeln!(trace_file, "{},{},{}", point.iter, point.lr, point.loss)?;
            if let Some(cb) = on_log.as_deref_mut() {
                cb(&point);
            }
            trace.push(point);
            if loss_val < best_loss {
                best_loss = loss_val;
                save_state(&best_path, mcfg, tcfg, &store, &adam, iter + 1, best_loss, &sample_rng)?;
            }
        }
    }

    save_state(
        &final_path,
        mcfg,
        tcfg,
        &store,
        &adam,
        end_iter,
        best_loss,
        &sample_rng,
    )?;
    if !best_path.exists() {
        std::fs::copy(&final_path, &best_path)?;
    }
    Ok(TrainOutcome {
        final_path,
        best_path,
        trace,
        initial_loss,
        final_loss,
        iters_run: end_iter - start_iter,
    })
}

pub const TRAIN_CONFIG_TENSOR: &str = "__train__.config";
const RNG_STREAM_INIT: u64 = 0;
const RNG_STREAM_SAMPLER: u64 = 1;

#[allow(clippy::too_many_arguments)]
fn save_state(
    path: &Path,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    store: &ParamStore<f32>,
    adam: &AdamState,
    iter: u64,
    best_loss: f64,
    sample_rng: &ChaCha8Rng,
) -> Result<()> {
    let tjson = serde_json::to_string(tcfg)
        .map_err(|e| Error::Format(format!("train config serialization: {e}")))?;
    let mut extras = vec![
        (TRAIN_CONFIG_TENSOR.to_string(), Payload::Bytes(tjson.into_bytes())),
        ("__train__.iter".to_string(), Payload::Bytes(iter.to_le_bytes().to_vec())),
        (
            "__train__.best_loss".to_string(),
            Payload::Bytes(best_loss.to_bits().to_le_bytes().to_vec()),
        ),
        ("__opt__.step".to_string(), Payload::Bytes(adam.step.to_le_bytes().to_vec())),
        (
            "__rng__.sampler.word_pos".to_string(),
            Payload::Bytes(sample_rng.get_word_pos().to_le_bytes().to_vec()),
        ),
    ];
    for (i, (_, p)) in store.iter().enumerate() {
        extras.push((format!("__opt__.m.{}", p.name), Payload::F32(adam.m[i].clone())));
        extras.push((format!("__opt__.v.{}", p.name), Payload::F32(adam.v[i].clone())));
    }
    save_model(path, mcfg, store, extras)
}

fn read_u64(extras: &HashMap<String, Payload>, name: &str) -> Result<u64> {
    match extras.get(name) {
        Some(Payload::Bytes(b)) if b.len() == 8 => {
            Ok(u64::from_le_bytes(b.as_slice().try_into().unwrap()))
        }
        _ => Err(Error::Integrity(format!("missing tensors: {name}"))),
    }
}

fn read_u128(extras: &HashMap<String, Payload>, name: &str) -> Result<u128> {
    match extras.get(name) {
        Some(Payload::Bytes(b)) if b.len() == 16 => {
            Ok(u128::from_le_bytes(b.as_slice().try_into().unwrap()))
        }
        _ => Err(Error::Integrity(format!("missing tensors: {name}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DdsaConfig;
    use crate::windowing::WindowSpec;

    #[test]
    fn schedule_matches_published_milestones() {
        let cfg = TrainConfig {
            total_iters: 500_000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 2e-4);
        assert_eq!(lr_at(249_999, &cfg), 2e-4);
        assert_eq!(lr_at(300_000, &cfg), 1e-4);
        assert_eq!(lr_at(449_999, &cfg), 5e-5);
        assert_eq!(lr_at(480_000, &cfg), 1.25e-5);
        // monotone non-increasing, exactly four halvings
        let mut prev = f64::INFINITY;
        let mut halvings = 0;
        for i in 0..cfg.total_iters {
            if i % 1000 != 0 {
                continue;
            }
            let lr = lr_at(i, &cfg);
            if lr < prev && prev.is_finite() {
                halvings += 1;
            }
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(halvings, 4);
    }

    #[test]
    fn config_validation_rejects_bad_milestones() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.milestones = vec![0.5, 0.4];
        assert!(cfg.validate().is_err());
        cfg.milestones = vec![0.5, 1.0];
        assert!(cfg.validate().is_err());
        cfg.milestones = vec![];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn adam_first_step_is_signed_unit_times_lr() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("w".into(), Tensor::new(&[3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let tcfg = TrainConfig::default();
        let mut adam = AdamState::new(&store);
        let g = Tensor::new(&[3], vec![0.3f32, -0.7, 2.0]).unwrap();
        adam.step(&mut store, &[Some(g)], 1e-3, &tcfg, 0).unwrap();
        let w = store.get(store.id_of("w").unwrap()).value.data();
        // bias-corrected first step: p -= lr * g / (|g| + eps')
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-6);
        assert!((w[2] - (0.5 - 1e-3)).abs() < 1e-6);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("w".into(), Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap());
        let tcfg = TrainConfig::default();
        let mut adam = AdamState::new(&store);
        let g = Tensor::zeros(&[2]);
        adam.step(&mut store, &[Some(g)], 1e-3, &tcfg, 0).unwrap();
        assert_eq!(store.get(store.id_of("w").unwrap()).value.data(), &[1.0, 2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_rejects_nonfinite_gradients_with_context() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("dab.0.conv.w".into(), Tensor::new(&[1], vec![1.0f32]).unwrap());
        let tcfg = TrainConfig::default();
        let mut adam = AdamState::new(&store);
        let g = Tensor::new(&[1], vec![f32::NAN]).unwrap();
        match adam.step(&mut store, &[Some(g)], 1e-3, &tcfg, 41) {
            Err(Error::NonFinite { context, .. }) => {
                assert!(context.contains("dab.0.conv.w") && context.contains("41"), "{context}");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    fn synthetic_dataset(n: usize, hr_extent: usize, scale: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<Tensor<f32>> = (0..n)
            .map(|_| {
                let fy = rng.random_range(1.0..3.0f64);
                let fx = rng.random_range(1.0..3.0f64);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                Tensor::from_fn(&[1, 3, hr_extent, hr_extent], |i| {
                    let y = i[2] as f64 / hr_extent as f64;
                    let x = i[3] as f64 / hr_extent as f64;
                    let v = 0.5
                        + 0.25 * (std::f64::consts::TAU * (fy * y + fx * x) + phase).sin()
                        + 0.15 * (std::f64::consts::TAU * fx * x).cos() * (i[1] as f64 * 0.3 + 0.4);
                    v.clamp(0.0, 1.0) as f32
                })
            })
            .collect();
        Dataset::from_hr_images(images, scale).unwrap()
    }

    #[test]
    fn sampler_aligns_crops_and_latitude_rows() {
        let ds = synthetic_dataset(2, 32, 2, 7);
        let sampler = Sampler::new(&ds, 8, 3, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sampler.next(&ds, &mut rng).unwrap();
        assert_eq!(batch.lr.shape(), &[3, 3, 8, 8]);
        assert_eq!(batch.hr.shape(), &[3, 3, 16, 16]);
        assert_eq!(batch.d_lr.shape(), &[3, 1, 8, 8]);
        assert_eq!(batch.d_hr.shape(), &[3, 1, 16, 16]);

        // every d row must appear verbatim in the full-extent map
        let full = distortion_map(16, 1).unwrap();
        for bi in 0..3 {
            for y in 0..8 {
                let v = batch.d_lr.at(&[bi, 0, y, 0]) as f64;
                assert!(
                    full.rows().iter().any(|r| (r - v).abs() < 1e-6),
                    "row weight {v} not from the full map"
                );
            }
            // rows are contiguous in the source map
            let first = batch.d_lr.at(&[bi, 0, 0, 0]) as f64;
            let idx = full.rows().iter().position(|r| (r - first).abs() < 1e-6).unwrap();
            for y in 1..8 {
                assert!((batch.d_lr.at(&[bi, 0, y, 0]) as f64 - full.row(idx + y)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let ds = synthetic_dataset(3, 32, 2, 8);
        let sampler = Sampler::new(&ds, 8, 2, false).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let b1 = sampler.next(&ds, &mut r1).unwrap();
        let b2 = sampler.next(&ds, &mut r2).unwrap();
        assert_eq!(b1.lr, b2.lr);
        assert_eq!(b1.hr, b2.hr);
    }

    #[test]
    fn sampler_skips_undersized_images() {
        let mut ds = synthetic_dataset(2, 32, 2, 9);
        let small = synthetic_dataset(1, 8, 2, 10);
        ds.images.push(small.images[0].clone());
        let sampler = Sampler::new(&ds, 8, 1, false).unwrap();
        assert_eq!(sampler.eligible, vec![0, 1]);
        assert!(Sampler::new(&small, 8, 1, false).is_err());
    }

    fn toy_model_cfg() -> ModelConfig {
        ModelConfig {
            num_dabs: 1,
            dals_per_dab: 1,
            embed_dim: 8,
            heads: 2,
            hwin: WindowSpec { rh: 2, rw: 4 },
            vwin: WindowSpec { rh: 4, rw: 2 },
            ddsa: DdsaConfig { samples: 9, clamp_radius: 2.0 },
            scale: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn interrupted_run_resumes_bit_identically() {
        let mcfg = toy_model_cfg();
        let tcfg = TrainConfig {
            total_iters: 8,
            batch_size: 1,
            patch_size: 8,
            seed: 3,
            log_every: 2,
            ..TrainConfig::default()
        };
        let ds = synthetic_dataset(2, 32, 2, 11);

        let dir = tempfile::tempdir().unwrap();
        let straight_dir = dir.path().join("straight");
        train_loop(&mcfg, &tcfg, &ds, &straight_dir, None, None, None).unwrap();

        let split_dir = dir.path().join("split");
        train_loop(&mcfg, &tcfg, &ds, &split_dir, None, Some(4), None).unwrap();
        let mid = split_dir.join("checkpoint-final.gdgt");
        let resumed = split_dir.join("resumed");
        train_loop(&mcfg, &tcfg, &ds, &resumed, Some(&mid), None, None).unwrap();

        let a = std::fs::read(straight_dir.join("checkpoint-final.gdgt")).unwrap();
        let b = std::fs::read(resumed.join("checkpoint-final.gdgt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let mcfg = toy_model_cfg();
        let tcfg = TrainConfig {
            total_iters: 4,
            batch_size: 1,
            patch_size: 8,
            seed: 5,
            log_every: 1,
            ..TrainConfig::default()
        };
        let ds = synthetic_dataset(2, 32, 2, 12);
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        train_loop(&mcfg, &tcfg, &ds, &d1, None, None, None).unwrap();
        train_loop(&mcfg, &tcfg, &ds, &d2, None, None, None).unwrap();
        let a = std::fs::read(d1.join("checkpoint-final.gdgt")).unwrap();
        let b = std::fs::read(d2.join("checkpoint-final.gdgt")).unwrap();
        assert_eq!(a, b);
    }
}
