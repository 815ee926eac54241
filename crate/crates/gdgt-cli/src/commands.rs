//! Command implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use gdgt_core::checkpoint::load_model;
use gdgt_core::geometry::{bicubic_resize, distortion_map};
use gdgt_core::infer::{rgb_from_tensor, super_resolve, super_resolve_tiled, tensor_from_rgb};
use gdgt_core::metrics::{luminance_bt601, mean_report, psnr, ssim, ws_psnr, ws_ssim, MetricReport};
use gdgt_core::model::ModelConfig;
use gdgt_core::params::ParamStore;
use gdgt_core::tape::Tape;
use gdgt_core::tensor::Tensor;
use gdgt_core::training::{train_loop, Dataset, TrainConfig};

use crate::manifest::{sibling_manifest, ManifestBuilder};

/// Combined run configuration: the model layout and the training knobs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn read_run_config(path: &Path) -> anyhow::Result<(RunConfig, Vec<u8>)> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing config {}", path.display()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok((cfg, bytes))
}

pub fn cmd_distmap(height: usize, width: usize, out: &Path) -> anyhow::Result<()> {
    let d = distortion_map(height, width)?;
    d.write_png(out)?;
    let raw = out.with_extension("bin");
    d.write_raw(&raw)?;
    println!(
        "distortion map {height}x{width}: rows {:.7} (edge) .. {:.7} (middle)",
        d.row(0),
        d.row(height / 2)
    );
    ManifestBuilder::new("distmap")
        .config(format!("height={height} width={width}").as_bytes())
        .output(out)
        .output(&raw)
        .write(&sibling_manifest(out))?;
    Ok(())
}

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub out: &'a Path,
    pub scale: Option<usize>,
    pub tile: Option<usize>,
    pub overlap: usize,
}

pub fn cmd_infer(args: InferArgs<'_>) -> anyhow::Result<()> {
    let loaded = load_model(args.checkpoint)?;
    if let Some(s) = args.scale {
        if s != loaded.cfg.scale {
            bail!(gdgt_core::Error::Config(format!(
                "requested scale {s} but the checkpoint was trained for {}",
                loaded.cfg.scale
            )));
        }
    }
    let img = image::open(args.input)
        .with_context(|| format!("reading image {}", args.input.display()))?
        .into_rgb8();
    let lr = tensor_from_rgb(&img);
    let (h, w) = (lr.shape()[2], lr.shape()[3]);
    let tile = args.tile.unwrap_or(if h.max(w) > 192 { 128 } else { usize::MAX });
    let sr = if tile < h.max(w) {
        super_resolve_tiled(&loaded.model, &loaded.store, &lr, tile, args.overlap)?
    } else {
        super_resolve(&loaded.model, &loaded.store, &lr)?
    };
    let out_img = rgb_from_tensor(&sr)?;
    out_img
        .save(args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} ({h}x{w}) -> {} ({}x{})",
        args.input.display(),
        args.out.display(),
        h * loaded.cfg.scale,
        w * loaded.cfg.scale
    );
    ManifestBuilder::new("infer")
        .config(serde_json::to_string(&loaded.cfg)?.as_bytes())
        .input(args.checkpoint)
        .input(args.input)
        .output(args.out)
        .note("tile", tile.to_string())
        .note("overlap", args.overlap.to_string())
        .write(&sibling_manifest(args.out))?;
    Ok(())
}

pub fn load_hr_images(dir: &Path) -> anyhow::Result<Vec<(String, image::RgbImage)>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .png images found in {}", dir.display());
    }
    let mut out = Vec::with_capacity(entries.len());
    for p in entries {
        let img = image::open(&p)
            .with_context(|| format!("reading image {}", p.display()))?
            .into_rgb8();
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, img));
    }
    Ok(out)
}

pub fn cmd_train(
    config: &Path,
    data: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<()> {
    let (cfg, cfg_bytes) = read_run_config(config)?;
    let images = load_hr_images(data)?;
    let scale = cfg.model.scale;
    let tensors: Vec<Tensor<f32>> = images
        .iter()
        .map(|(_, img)| {
            let t = tensor_from_rgb(img);
            // crop to a scale multiple so LR/HR stay aligned
            let (h, w) = (t.shape()[2], t.shape()[3]);
            let (ch, cw) = (h - h % scale, w - w % scale);
            if (ch, cw) == (h, w) {
                Ok(t)
            } else {
                let mut tape: Tape<f32> = Tape::new();
                let v = tape.constant(t);
                let c = tape.crop2d(v, 0, 0, ch, cw)?;
                Ok(tape.value(c).clone())
            }
        })
        .collect::<gdgt_core::Result<_>>()?;
    let dataset = Dataset::from_hr_images(tensors, scale)?;

    let mut last = None;
    let outcome = train_loop(
        &cfg.model,
        &cfg.train,
        &dataset,
        out_dir,
        resume,
        None,
        Some(&mut |p| {
            println!("iter {:>8}  lr {:.3e}  ws_l1 {:.6}", p.iter, p.lr, p.loss);
            last = Some(*p);
        }),
    )?;
    println!(
        "trained {} iterations: loss {:.6} -> {:.6}; final checkpoint {}",
        outcome.iters_run,
        outcome.initial_loss,
        outcome.final_loss,
        outcome.final_path.display()
    );
    ManifestBuilder::new("train")
        .config(&cfg_bytes)
        .seed(cfg.train.seed)
        .input(data)
        .output(&outcome.final_path)
        .output(&outcome.best_path)
        .output(&out_dir.join("loss.csv"))
        .note("degradation", "erp-bicubic")
        .note("dacb", cfg.model.dacb.clone())
        .write(&out_dir.join("manifest.json"))?;
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub hr_dir: &'a Path,
    pub scale: usize,
    pub out_dir: Option<&'a Path>,
    pub tile: usize,
    pub identity_debug: bool,
}

pub fn cmd_eval(args: EvalArgs<'_>) -> anyhow::Result<()> {
    let loaded = match (args.identity_debug, args.checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(load_model(p)?),
        (false, None) => bail!("--checkpoint is required unless --identity-debug is set"),
    };
    if let Some(l) = &loaded {
        if l.cfg.scale != args.scale {
            bail!(gdgt_core::Error::Config(format!(
                "requested scale {} but the checkpoint was trained for {}",
                args.scale, l.cfg.scale
            )));
        }
    }
    let images = load_hr_images(args.hr_dir)?;
    let mut reports = Vec::with_capacity(images.len());
    for (name, hr_img) in &images {
        let hr_t = tensor_from_rgb(hr_img);
        let (h, w) = (hr_t.shape()[2], hr_t.shape()[3]);
        let (ch, cw) = (h - h % args.scale, w - w % args.scale);
        let hr_t = if (ch, cw) == (h, w) {
            hr_t
        } else {
            let mut tape: Tape<f32> = Tape::new();
            let v = tape.constant(hr_t);
            let c = tape.crop2d(v, 0, 0, ch, cw)?;
            tape.value(c).clone()
        };
        let sr_t = match &loaded {
            None => hr_t.clone(),
            Some(l) => {
                let lr = bicubic_resize(&hr_t, 1.0 / args.scale as f64)?;
                let (lh, lw) = (lr.shape()[2], lr.shape()[3]);
                if args.tile < lh.max(lw) {
                    super_resolve_tiled(&l.model, &l.store, &lr, args.tile, 16)?
                } else {
                    super_resolve(&l.model, &l.store, &lr)?
                }
            }
        };
        let hr_img_c = rgb_from_tensor(&hr_t)?;
        let sr_img = rgb_from_tensor(&sr_t)?;
        let a = luminance_bt601(&hr_img_c);
        let b = luminance_bt601(&sr_img);
        let d = distortion_map(a.height, a.width)?;
        let report = MetricReport {
            name: name.clone(),
            psnr: psnr(&a, &b, 255.0)?,
            ssim: ssim(&a, &b)?,
            ws_psnr: ws_psnr(&a, &b, &d, 255.0)?,
            ws_ssim: ws_ssim(&a, &b, &d)?,
        };
        println!("{}", serde_json::to_string(&report)?);
        reports.push(report);
    }
    let (mean, skipped) = mean_report(&reports);
    if skipped > 0 {
        eprintln!("warning: {skipped} infinite metric value(s) excluded from the means");
    }

    let fmt = |v: f64| {
        if v.is_finite() {
            format!("{v:>8.4}")
        } else {
            format!("{:>8}", "inf")
        }
    };
    println!("\n{:<20} {:>8} {:>8} {:>8} {:>8}", "image", "PSNR", "SSIM", "WS-PSNR", "WS-SSIM");
    for r in reports.iter().chain(std::iter::once(&mean)) {
        println!(
            "{:<20} {} {} {} {}",
            r.name,
            fmt(r.psnr),
            fmt(r.ssim),
            fmt(r.ws_psnr),
            fmt(r.ws_ssim)
        );
    }

    if let Some(dir) = args.out_dir {
        std::fs::create_dir_all(dir)?;
        let report_path = dir.join("report.json");
        #[derive(Serialize)]
        struct FullReport<'a> {
            images: &'a [MetricReport],
            mean: &'a MetricReport,
            skipped_infinite: usize,
        }
        std::fs::write(
            &report_path,
            serde_json::to_string_pretty(&FullReport {
                images: &reports,
                mean: &mean,
                skipped_infinite: skipped,
            })?,
        )?;
        ManifestBuilder::new("eval")
            .config(format!("scale={} identity={}", args.scale, args.identity_debug).as_bytes())
            .input(args.hr_dir)
            .output(&report_path)
            .note("degradation", "erp-bicubic")
            .write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

pub fn cmd_gradcheck(module: Option<&str>, manifest_out: &Path) -> anyhow::Result<bool> {
    let names = match module {
        Some(m) => {
            if !crate::gradchecks::names().contains(&m) {
                bail!(gdgt_core::Error::Config(format!(
                    "unknown module {m:?}; available: {}",
                    crate::gradchecks::names().join(", ")
                )));
            }
            vec![m]
        }
        None => crate::gradchecks::names(),
    };
    let mut all_ok = true;
    println!("{:<22} {:>14}  result", "module", "max rel error");
    for name in names {
        let outcome = crate::gradchecks::run_module(name).expect("registered")?;
        let ok = outcome.max_relative_error < crate::gradchecks::TOLERANCE;
        all_ok &= ok;
        println!(
            "{:<22} {:>14.3e}  {}",
            outcome.name,
            outcome.max_relative_error,
            if ok { "pass" } else { "FAIL" }
        );
    }
    ManifestBuilder::new("gradcheck")
        .config(module.unwrap_or("all").as_bytes())
        .note("pass", all_ok.to_string())
        .write(manifest_out)?;
    Ok(all_ok)
}

pub struct DggDumpArgs<'a> {
    pub checkpoint: &'a Path,
    pub out_dir: &'a Path,
    pub height: usize,
    pub width: usize,
    pub dab: usize,
    pub dal: usize,
}

pub fn cmd_dgg_dump(args: DggDumpArgs<'_>) -> anyhow::Result<()> {
    let loaded = load_model(args.checkpoint)?;
    let Some(dab) = loaded.model.blocks().get(args.dab) else {
        bail!(gdgt_core::Error::Config(format!(
            "block index {} out of range ({} blocks)",
            args.dab,
            loaded.model.blocks().len()
        )));
    };
    let Some(dal) = dab.layers().get(args.dal) else {
        bail!(gdgt_core::Error::Config(format!(
            "layer index {} out of range ({} layers)",
            args.dal,
            dab.layers().len()
        )));
    };
    let Some(dgg) = dal.dgg() else {
        bail!(gdgt_core::Error::Config(
            "this checkpoint was built without a guidance generator".into()
        ));
    };

    std::fs::create_dir_all(args.out_dir)?;
    let store: &ParamStore<f32> = &loaded.store;
    let mut tape: Tape<f32> = Tape::new();
    let bind = store.bind_frozen(&mut tape);
    let d = tape.constant(distortion_map(args.height, args.width)?.to_tensor());
    let g = dgg.forward(&mut tape, &bind, d)?;
    let gv = tape.value(g);
    let channels = gv.shape()[1];
    let mut outputs = Vec::new();
    for c in 0..channels {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for y in 0..args.height {
            for x in 0..args.width {
                let v = gv.at(&[0, c, y, x]);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img =
            image::GrayImage::new(args.width as u32, args.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let v = gv.at(&[0, c, y as usize, x as usize]);
            *p = image::Luma([(255.0 * (v - lo) / span).round() as u8]);
        }
        let path = args.out_dir.join(format!("guidance-c{c:03}.png"));
        img.save(&path)?;
        outputs.push(path);
    }
    println!(
        "wrote {channels} guidance channels ({}x{}) to {}",
        args.height,
        args.width,
        args.out_dir.display()
    );
    let mut mb = ManifestBuilder::new("dgg-dump")
        .config(serde_json::to_string(&loaded.cfg)?.as_bytes())
        .input(args.checkpoint)
        .note("dab", args.dab.to_string())
        .note("dal", args.dal.to_string());
    for o in &outputs {
        mb = mb.output(o);
    }
    mb.write(&args.out_dir.join("manifest.json"))?;
    Ok(())
}
