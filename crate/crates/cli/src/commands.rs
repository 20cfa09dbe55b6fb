use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use t4t_core::complexity::{count_flops, count_params, ComplexityReport};
use t4t_core::io::{
    depth_from_gray, list_replay, mask_from_gray, mask_to_gray, read_pgm_file, read_ppm_file, write_pgm_file,
    write_ppm_file, ReplayEntry,
};
use t4t_core::model::{checkpoint, gradcheck, Model, ModelConfig, ParamSet};
use t4t_core::nav::{run_session, write_walkway_replay, LogRecord, NavConfig, SegFrame};
use t4t_core::pipeline::segment;
use t4t_core::train::{
    evaluate, generate_synth_dataset, measure_latency, toy_config, train_toy, write_loss_csv, AdamConfig,
    LatencyOptions, SynthSample, TrainOptions,
};
use t4t_core::{Error, Tape, Tensor};

use crate::args::*;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

pub fn shapes(a: &ShapesArgs, seed: u64) -> Result<()> {
    let base = a.model.config();
    let model = Model::new(base.clone())?;
    let params = model.init_params::<f32>(seed);
    for &s in &a.sizes {
        base.check_input((s, s))?;
        let tape = Tape::inference();
        let p = params.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(vec![1, 3, s, s]));
        let pyramid = model.encode_pyramid(&p, &x)?;
        let levels = pyramid.shapes();
        let heads: Vec<(String, Vec<usize>)> = base
            .heads
            .heads()
            .iter()
            .zip(&model.heads)
            .map(|(&(name, _), head)| Ok((name.to_string(), head.forward(&p, &pyramid, (s, s))?.shape().to_vec())))
            .collect::<Result<_, Error>>()?;
        if a.json {
            let v = serde_json::json!({
                "size": s,
                "strides": base.stage_strides(),
                "stages": levels,
                "heads": heads.iter().map(|(n, sh)| serde_json::json!({"head": n, "shape": sh})).collect::<Vec<_>>(),
            });
            println!("{v}");
        } else {
            println!("{}x{}", s, s);
            for (i, (shape, stride)) in levels.iter().zip(base.stage_strides()).enumerate() {
                println!("  stage{} stride {:>2}: {:?}", i + 1, stride, shape);
            }
            for (name, shape) in &heads {
                println!("  {name} logits: {shape:?}");
            }
        }
    }
    Ok(())
}

fn print_report(report: &ComplexityReport, depth: usize, json: bool) -> Result<()> {
    let rows = if depth == 0 { report.rows.clone() } else { report.grouped(depth) };
    if json {
        print!("{}", report.to_json_lines(&rows)?);
    } else {
        print!("{}", report.to_text(&rows));
    }
    Ok(())
}

pub fn params(a: &ComplexityArgs) -> Result<()> {
    print_report(&count_params(&a.model.config())?, a.depth, a.json)
}

pub fn flops(a: &ComplexityArgs) -> Result<()> {
    print_report(&count_flops(&a.model.config(), a.size)?, a.depth, a.json)
}

pub fn gradcheck(a: &GradcheckArgs, seed: u64) -> Result<()> {
    let cfg = ModelConfig::nano().with_input_size(a.size, a.size);
    let check = gradcheck::end_to_end(&cfg, seed, (a.per_tensor > 0).then_some(a.per_tensor), a.eps)?;
    let r = &check.report;
    println!(
        "checked {} coordinates over {} parameters and the image",
        r.checked, check.param_count
    );
    println!("max rel err {:.3e} at {}[{}]", r.max_rel_err, check.worst_name, r.worst.1);
    if !(r.max_rel_err < a.tolerance) {
        bail!("gradient check failed: {:.3e} is not below {:.0e}", r.max_rel_err, a.tolerance);
    }
    println!("pass (< {:.0e})", a.tolerance);
    Ok(())
}

fn write_scene(dir: &Path, index: usize, s: &SynthSample) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let rgb = t4t_core::io::image_from_tensor(&s.image.clone().reshaped(vec![1, 3, h, w])?)?;
    write_ppm_file(&dir.join(format!("{index:04}.ppm")), &rgb)?;
    write_pgm_file(&dir.join(format!("{index:04}.general.pgm")), &mask_to_gray(w, h, &s.general_mask)?)?;
    write_pgm_file(&dir.join(format!("{index:04}.trans.pgm")), &mask_to_gray(w, h, &s.trans_mask)?)?;
    Ok(())
}

pub fn synth(a: &SynthArgs, seed: u64) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (h, w) = a.size;
    match a.kind {
        SynthKind::Scenes => {
            for (i, s) in generate_synth_dataset(seed, a.count, h, w)?.iter().enumerate() {
                write_scene(&a.out, i, s)?;
            }
        }
        SynthKind::Walkway => {
            write_walkway_replay(&a.out, seed, a.count, w, h)?;
        }
    }
    println!("wrote {} frames to {}", a.count, a.out.display());
    Ok(())
}

/// Scenes from a directory written by `synth`.
fn load_scenes(dir: &Path) -> Result<Vec<SynthSample>> {
    let entries = list_replay(dir)?;
    if entries.is_empty() {
        return Err(invalid(format!("no NNNN.ppm scenes in {}", dir.display())));
    }
    entries
        .iter()
        .map(|e| {
            let rgb = read_ppm_file(&e.rgb)?;
            let (Some(g), Some(t)) = (&e.general_mask, &e.trans_mask) else {
                return Err(invalid(format!("{} has no mask files", e.rgb.display())));
            };
            let image = t4t_core::io::image_to_tensor(&rgb).reshaped(vec![3, rgb.height, rgb.width])?;
            Ok(SynthSample {
                image,
                general_mask: mask_from_gray(&read_pgm_file(g)?)?,
                trans_mask: mask_from_gray(&read_pgm_file(t)?)?,
            })
        })
        .collect()
}

fn print_eval(model: &Model, params: &ParamSet<f32>, data: &[SynthSample], json: bool) -> Result<()> {
    let heads = model.config().heads.heads();
    let mut preds: Vec<Vec<Vec<u8>>> = vec![Vec::new(); heads.len()];
    for s in data {
        let (h, w) = (s.height(), s.width());
        let logits = model.predict(params, &s.image.clone().reshaped(vec![1, 3, h, w])?)?;
        for (k, l) in logits.iter().enumerate() {
            preds[k].push(t4t_core::model::argmax_masks(l)?.swap_remove(0));
        }
    }
    for (k, &(name, classes)) in heads.iter().enumerate() {
        let gt: Vec<&[u8]> = data
            .iter()
            .map(|s| if k == 0 { &s.general_mask[..] } else { &s.trans_mask[..] })
            .collect();
        let pred: Vec<&[u8]> = preds[k].iter().map(Vec::as_slice).collect();
        let r = evaluate(&pred, &gt, classes, None)?;
        if json {
            let v = serde_json::json!({"head": name, "miou": r.miou, "pixel_accuracy": r.pixel_accuracy, "iou": r.iou});
            println!("{v}");
        } else {
            let per_class: Vec<String> = r
                .iou
                .iter()
                .map(|v| v.map_or("-".into(), |x| format!("{x:.3}")))
                .collect();
            println!(
                "{name}: mIoU {:.4}, pixel accuracy {:.4}, per class [{}]",
                r.miou,
                r.pixel_accuracy,
                per_class.join(", ")
            );
        }
    }
    Ok(())
}

pub fn train_toy_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let cfg = toy_config();
    let (h, w) = cfg.input_size;
    let data = match &a.data {
        Some(dir) => load_scenes(dir)?,
        None => generate_synth_dataset(seed, a.count, h, w)?,
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        seed,
        ..TrainOptions::toy()
    };
    let out = train_toy(&cfg, &data, &opts)?;
    if let Some(last) = out.log.last() {
        println!(
            "epoch {}: loss {:.5} (general {:.5}, transparency {:.5})",
            last.epoch,
            last.total(),
            last.loss_general,
            last.loss_trans
        );
    }
    if let Some(path) = &a.loss_csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_loss_csv(BufWriter::new(f), &out.log)?;
    }
    let model = Model::new(cfg.clone())?;
    print_eval(&model, &out.params, &data, false)?;
    if let Some(path) = &a.checkpoint {
        checkpoint::save_file(path, &cfg, &out.params)?;
        println!("saved {}", path.display());
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load_file(&a.checkpoint)?;
    let model = ckpt.model()?;
    let data = load_scenes(&a.data)?;
    print_eval(&model, &ckpt.params, &data, a.json)
}

fn load_or_init(path: Option<&Path>, fallback: ModelConfig, seed: u64) -> Result<(Model, ParamSet<f32>)> {
    match path {
        Some(p) => {
            let ckpt = checkpoint::load_file(p)?;
            Ok((ckpt.model()?, ckpt.params))
        }
        None => {
            let model = Model::new(fallback)?;
            let params = model.init_params(seed);
            Ok((model, params))
        }
    }
}

pub fn infer(a: &InferArgs, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(invalid(format!("alpha {} outside [0,1]", a.alpha)));
    }
    let (model, params) = load_or_init(a.checkpoint.as_deref(), a.model.config(), seed)?;
    let image = read_ppm_file(&a.image)?;
    let seg = segment(&model, &params, &image)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    for (head, overlay) in seg.heads.iter().zip(seg.overlays(&image, a.alpha)?) {
        let mask_path = a.out_dir.join(format!("{stem}.{}.pgm", head.head));
        write_pgm_file(&mask_path, &mask_to_gray(seg.width, seg.height, &head.mask)?)?;
        write_ppm_file(&a.out_dir.join(format!("{stem}.{}.overlay.ppm", head.head)), &overlay)?;
        let mut counts = vec![0usize; head.class_names.len()];
        for &c in &head.mask {
            counts[c as usize] += 1;
        }
        let present: Vec<String> = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, n)| format!("{} {:.1}%", head.class_names[c], 100.0 * *n as f64 / head.mask.len() as f64))
            .collect();
        println!("{}: {} ({})", head.head, mask_path.display(), present.join(", "));
    }
    Ok(())
}

pub fn latency(a: &LatencyArgs, seed: u64) -> Result<()> {
    let cfg = a.model.config();
    let opts = LatencyOptions {
        runs: a.runs,
        warmup: a.warmup,
        batch: a.batch,
        size: a.size,
        seed,
    };
    let r = measure_latency(&cfg, &opts)?;
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!(
            "{} {}-head {}x{} batch {}: {:.2} ± {:.2} ms per frame over {} runs ({} warm-up)",
            r.variant,
            if r.dual_head { "dual" } else { "single" },
            r.size.0,
            r.size.1,
            r.batch,
            r.mean_ms,
            r.std_ms,
            r.runs,
            r.warmup
        );
    }
    Ok(())
}

fn frame_from_masks(e: &ReplayEntry, general: &Path, trans: &Path) -> t4t_core::Result<SegFrame> {
    let g = read_pgm_file(general)?;
    let depth = depth_from_gray(&read_pgm_file(&e.depth)?);
    SegFrame::new(g.width, g.height, mask_from_gray(&g)?, mask_from_gray(&read_pgm_file(trans)?)?, depth)
}

pub fn navsim(a: &NavsimArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => NavConfig::load(p)?,
        None => NavConfig::default(),
    };
    if let Some(n) = a.interval {
        cfg.interval_s = n;
    }
    cfg.validate()?;
    if !(a.fps.is_finite() && a.fps > 0.0) {
        return Err(invalid(format!("fps {} must be positive", a.fps)));
    }
    let entries = list_replay(&a.frames)?;
    let model = match &a.checkpoint {
        Some(p) => {
            let (model, params) = load_or_init(Some(p), ModelConfig::nano(), seed)?;
            let heads = model.config().heads.heads();
            if heads.len() != 2 || heads[0].1 != cfg.general_classes.len() || heads[1].1 != cfg.trans_classes.len() {
                return Err(invalid(format!(
                    "checkpoint heads {heads:?} do not match the {} general and {} transparency classes of the config",
                    cfg.general_classes.len(),
                    cfg.trans_classes.len()
                )));
            }
            Some((model, params))
        }
        None => {
            if let Some(e) = entries.iter().find(|e| e.general_mask.is_none() || e.trans_mask.is_none()) {
                return Err(invalid(format!(
                    "{} has no precomputed masks; pass --checkpoint to segment it",
                    e.rgb.display()
                )));
            }
            None
        }
    };
    let timed: Vec<(f64, ReplayEntry)> = entries.into_iter().map(|e| (e.index as f64 / a.fps, e)).collect();
    let segment_entry = |e: &ReplayEntry| -> t4t_core::Result<SegFrame> {
        match (&model, &e.general_mask, &e.trans_mask) {
            (None, Some(g), Some(t)) => frame_from_masks(e, g, t),
            (Some((model, params)), _, _) => {
                let rgb = read_ppm_file(&e.rgb)?;
                let depth = depth_from_gray(&read_pgm_file(&e.depth)?);
                segment(model, params, &rgb)?.to_seg_frame(depth)
            }
            _ => unreachable!("checked above"),
        }
    };
    let stdout = std::io::stdout();
    let mut sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(stdout.lock()),
    };
    let log = run_session(&timed, &cfg, segment_entry, Some(&mut *sink))?;
    sink.flush().context("flushing event log")?;
    let skipped = log.iter().filter(|r| matches!(r, LogRecord::Skip { .. })).count();
    log::info!("{} events, {} skipped frames", log.len() - skipped, skipped);
    if a.out.is_some() {
        eprintln!("{} events, {} skipped frames", log.len() - skipped, skipped);
    }
    Ok(())
}
