use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use swinunetr::inference::{ensemble_infer, fuse_labels, plan_tiles, sliding_window_infer, BlendMode, EnsembleSpec, InferenceManifest, TileModel};
use swinunetr::metrics::{evaluate_case, EvalReport};
use swinunetr::model::{count_flops, count_parameters, level_shapes, ModelConfig, SwinUnetr};
use swinunetr::train::{load_model, Trainer};
use swinunetr::verify::{self, Faults, Suite};
use swinunetr::volume::{
    convert_raw, load_mask, load_volume, normalize_nonzero, save_mask, save_volume, write_synthetic_dataset, DatasetManifest, RawDType, SegmentationMask,
    Volume, CHANNEL_NAMES,
};

use crate::config::{self, FileConfig, InferenceConfig};
use crate::{ConvertArgs, EvalArgs, InferArgs, NumericalFailure, SummarizeArgs, SynthArgs, TrainArgs, VerifyArgs};

fn emit(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn extents(flag: &str, v: &[usize]) -> Result<[usize; 3]> {
    match *v {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => bail!("{flag} takes one value or three, got {}", v.len()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn convert(a: ConvertArgs) -> Result<()> {
    let dtype: RawDType = a.dtype.parse().context("--dtype")?;
    let shape = extents("--shape", &a.shape)?;
    let spacing: [f64; 3] = a.spacing.as_slice().try_into().map_err(|_| anyhow!("--spacing takes three values, got {}", a.spacing.len()))?;
    let bytes = fs::read(&a.input).with_context(|| format!("--input: cannot read {}", a.input.display()))?;
    if a.mask {
        let v = convert_raw(&bytes, dtype, 1, shape, spacing, None).context("--input")?;
        let labels = v
            .data
            .iter()
            .map(|&x| if x.fract() == 0.0 && (0.0..=255.0).contains(&x) { Ok(x as u8) } else { Err(anyhow!("--input: label value {x} is not a byte")) })
            .collect::<Result<Vec<u8>>>()?;
        save_mask(&SegmentationMask::new(shape, spacing, labels)?, &a.out)?;
    } else {
        let v = convert_raw(&bytes, dtype, a.channels, shape, spacing, a.channel_names.clone()).context("--input")?;
        save_volume(&v, &a.out)?;
    }
    emit(&json!({
        "command": "convert",
        "config": { "dtype": a.dtype, "shape": shape, "channels": if a.mask { 1 } else { a.channels }, "spacing": spacing, "mask": a.mask, "channel_names": a.channel_names },
        "input": a.input,
        "output": a.out,
    }))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let mut cfg = file.synth.unwrap_or_default();
    if let Some(n) = a.cases {
        cfg.cases = n;
    }
    if let Some(s) = &a.shape {
        cfg.shape = extents("--shape", s)?;
    }
    if let Some(x) = a.noise {
        cfg.noise = x;
    }
    if let Some(k) = a.folds {
        cfg.folds = k;
    }
    cfg.seed = config::pick_seed(cfg.seed, a.seed)?;
    let manifest = write_synthetic_dataset(&cfg, &a.out_dir)?;
    emit(&json!({
        "command": "synth",
        "config": FileConfig { synth: Some(cfg), ..FileConfig::default() },
        "manifest": a.out_dir.join("manifest.json"),
        "cases": manifest.cases.len(),
    }))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let model = file.model.unwrap_or_else(|| a.preset.model());
    let mut tc = file.train.unwrap_or_else(|| a.preset.train());
    if let Some(s) = a.steps {
        tc.steps = Some(s);
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr_max {
        tc.lr_max = lr;
    }
    if let Some(v) = a.val_every {
        tc.val_every = v;
    }
    tc.seed = config::pick_seed(tc.seed, a.seed)?;
    model.validate().context("model config")?;
    tc.validate().context("train config")?;
    let manifest = DatasetManifest::load(&a.manifest).with_context(|| format!("--manifest {}", a.manifest.display()))?;
    if let Some(f) = a.fold {
        if f >= manifest.num_folds() {
            bail!("--fold {f} out of range: the manifest has {} folds", manifest.num_folds());
        }
    }
    let effective = FileConfig { model: Some(model.clone()), train: Some(tc.clone()), ..FileConfig::default() };
    fs::create_dir_all(&a.out_dir).with_context(|| format!("--out-dir {}", a.out_dir.display()))?;
    write_json(&a.out_dir.join("config.json"), &effective)?;
    let mut trainer = Trainer::new(model, tc, manifest, a.fold)?;
    let summary = trainer.run(&a.out_dir, None)?;
    let final_val = summary.history.iter().rev().find_map(|e| e.val_dice);
    emit(&json!({
        "command": "train",
        "config": effective,
        "fold": a.fold,
        "steps": summary.steps,
        "last": summary.last,
        "best": summary.best,
        "log": summary.log,
        "best_val_dice": summary.best_val_dice,
        "final_val_dice": final_val,
        "final_train_loss": summary.history.last().map(|e| e.mean_train_loss),
    }))
}

fn checkpoint_list(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in args {
        if p.extension().is_some_and(|e| e == "json") {
            let spec = EnsembleSpec::load(p).with_context(|| format!("--checkpoints {}", p.display()))?;
            out.extend(spec.members.into_iter().map(|m| m.checkpoint));
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("--checkpoints: no checkpoints given");
    }
    Ok(out)
}

fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "prediction".into());
    out.with_file_name(format!("{stem}.infer.json"))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let mut ic: InferenceConfig = file.inference.unwrap_or_default();
    if let Some(o) = a.overlap {
        ic.plan.overlap = o;
    }
    if let Some(r) = &a.roi {
        ic.plan.roi = extents("--roi", r)?;
    }
    if let Some(b) = &a.blend {
        ic.plan.blend = b.parse::<BlendMode>().context("--blend")?;
    }
    if let Some(t) = a.threshold {
        ic.threshold = t;
    }
    ic.plan.validate().context("--overlap/--roi")?;
    if !(0.0..=1.0).contains(&ic.threshold) {
        bail!("--threshold {} outside [0, 1]", ic.threshold);
    }
    let ckpts = checkpoint_list(&a.checkpoints)?;
    let raw = load_volume(&a.input).with_context(|| format!("--input {}", a.input.display()))?;
    let img = normalize_nonzero(&raw)?;
    let models: Vec<SwinUnetr<f32>> = ckpts.iter().map(|p| load_model(p).with_context(|| format!("--checkpoints {}", p.display()))).collect::<Result<_>>()?;
    for (p, m) in ckpts.iter().zip(&models) {
        if m.config().in_channels != img.channels() || m.config().out_channels != CHANNEL_NAMES.len() {
            bail!("checkpoint {} expects {} -> {} channels, input has {}", p.display(), m.config().in_channels, m.config().out_channels, img.channels());
        }
    }
    let probs = if models.len() == 1 {
        sliding_window_infer(&img, &models[0], &ic.plan)?
    } else {
        let members: Vec<(String, &dyn TileModel)> = models.iter().enumerate().map(|(i, m)| (format!("{i:04}"), m as &dyn TileModel)).collect();
        ensemble_infer(&img, &members, &ic.plan)?
    };
    let labels = fuse_labels(&probs, ic.threshold)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("--out {}", a.out.display()))?;
    }
    save_mask(&SegmentationMask::new(img.shape, img.spacing, labels)?, &a.out)?;
    if let Some(pp) = &a.probs {
        let names = CHANNEL_NAMES.iter().map(|s| s.to_string()).collect();
        save_volume(&Volume::new(img.shape, img.spacing, names, probs.data().to_vec())?, pp)?;
    }
    let padded = [0, 1, 2].map(|k| img.shape[k].max(ic.plan.roi[k]));
    let record = InferenceManifest {
        input: a.input.clone(),
        output: a.out.clone(),
        probabilities: a.probs.clone(),
        checkpoints: ckpts,
        mode: if models.len() == 1 { "single" } else { "ensemble" }.into(),
        step: ic.plan.step(),
        tiles: plan_tiles(padded, ic.plan.roi, ic.plan.overlap)?.len(),
        plan: ic.plan.clone(),
        overlap_semantics: "fraction of roi; step = floor(roi * (1 - overlap))".into(),
        threshold: ic.threshold,
    };
    let side = sidecar(&a.out);
    write_json(&side, &record)?;
    emit(&json!({
        "command": "infer",
        "config": FileConfig { inference: Some(ic), ..FileConfig::default() },
        "manifest": side,
        "record": record,
    }))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if !(0.0..=100.0).contains(&a.hausdorff) {
        bail!("--hausdorff {} outside [0, 100]", a.hausdorff);
    }
    let manifest = DatasetManifest::load(&a.gt_manifest).with_context(|| format!("--gt-manifest {}", a.gt_manifest.display()))?;
    if !a.pred_dir.is_dir() {
        bail!("--pred-dir {} is not a directory", a.pred_dir.display());
    }
    let mut cases = Vec::new();
    let mut missing = Vec::new();
    for c in &manifest.cases {
        if c.mask.is_none() {
            continue;
        }
        let pred_path = a.pred_dir.join(format!("{}.svol", c.id));
        if !pred_path.exists() {
            missing.push(c.id.clone());
            continue;
        }
        let gt = manifest.load_mask(c)?;
        let pred = load_mask(&pred_path)?;
        if pred.shape != gt.shape {
            bail!("case {}: prediction shape {:?} differs from ground truth {:?}", c.id, pred.shape, gt.shape);
        }
        cases.push(evaluate_case(&c.id, &pred.labels, &gt.labels, gt.shape, gt.spacing, a.hausdorff)?);
    }
    let report = EvalReport::new(cases, missing.clone(), a.hausdorff);
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.pred_dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("--out-dir {}", out_dir.display()))?;
    write_json(&out_dir.join("eval.json"), &report)?;
    fs::write(out_dir.join("eval.csv"), report.to_csv()).with_context(|| format!("writing {}", out_dir.join("eval.csv").display()))?;
    emit(&json!({
        "command": "eval",
        "config": { "pred_dir": a.pred_dir, "gt_manifest": a.gt_manifest, "hausdorff": a.hausdorff },
        "cases": report.cases.len(),
        "missing": report.missing,
        "aggregate": report.aggregate,
        "report": out_dir.join("eval.json"),
        "csv": out_dir.join("eval.csv"),
    }))?;
    if !missing.is_empty() {
        bail!("{} case(s) without a prediction: {}", missing.len(), missing.join(", "));
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let suite: Suite = a.suite.parse().context("--suite")?;
    let faults = Faults { swmsa_shift: a.inject_shift };
    let results = verify::run(suite, &faults);
    for r in &results {
        eprintln!("{r}");
    }
    let failures: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| format!("{}/{}", r.suite, r.name)).collect();
    let doc = json!({
        "command": "verify",
        "config": { "suite": suite.to_string(), "inject_shift": a.inject_shift },
        "passed": failures.is_empty(),
        "checks": results.len(),
        "failures": failures,
        "results": results,
    });
    if let Some(p) = &a.out {
        write_json(p, &doc)?;
    }
    emit(&doc)?;
    if !failures.is_empty() {
        return Err(NumericalFailure(format!("{} check(s) failed: {}", failures.len(), failures.join(", "))).into());
    }
    Ok(())
}

pub fn summarize(a: SummarizeArgs) -> Result<()> {
    let file = config::load(a.config.as_deref())?;
    let model: ModelConfig = file.model.unwrap_or_else(|| a.preset.model());
    model.validate().context("model config")?;
    let input = match &a.input {
        Some(v) => extents("--input", v)?,
        None => model.input_size,
    };
    let levels: Vec<_> = level_shapes(&model, input).into_iter().map(|(c, s)| json!({ "channels": c, "shape": s })).collect();
    emit(&json!({
        "command": "summarize",
        "config": FileConfig { model: Some(model.clone()), ..FileConfig::default() },
        "input": input,
        "levels": levels,
        "parameters": count_parameters(&model),
        "flops": count_flops(&model, input),
    }))
}
