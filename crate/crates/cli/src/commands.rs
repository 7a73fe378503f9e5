use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use earseg_core::errormaps::MaskCache;
use earseg_core::eval::{predict_all, render_overlay, save_overlay, score_predictions};
use earseg_core::trainer::{build_error_maps, StageOutcome, TrainLog};
use earseg_core::{
    cross_validate, generate_initial_masks, load_dataset, synth_vessels, train_stage1, train_stage2, Checkpoint,
    Error, EvalOptions, RetinalSample,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run_config::{Command, RunConfig};
use crate::{Common, SynthArgs};

pub const CACHE_ENV: &str = "EARSEG_CACHE_DIR";

pub fn run(command: Command, args: Common) -> Result<()> {
    let rc = RunConfig::resolve(command, &args)?;
    rc.snapshot()?;
    match command {
        Command::Train => train(&rc),
        Command::Refine => refine(&rc),
        Command::Predict => predict(&rc),
        Command::Evaluate if rc.folds.is_some() => crossval(&rc),
        Command::Evaluate => evaluate(&rc),
        Command::Crossval => crossval(&rc),
    }
}

fn load(rc: &RunConfig) -> Result<Vec<RetinalSample>> {
    let root = rc.data_root()?;
    let data = load_dataset(root, rc.layout)?;
    log::info!("loaded {} samples from {}", data.len(), root.display());
    Ok(data)
}

fn stage_dir(rc: &RunConfig, stage: u8) -> PathBuf {
    rc.out.join("checkpoints").join(format!("stage{stage}"))
}

/// Highest-numbered `<epoch>.ckpt` in `dir`.
fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let epoch: u32 = p.file_stem()?.to_str()?.parse().ok()?;
            (p.extension()? == "ckpt").then_some((epoch, p))
        })
        .max_by_key(|(epoch, _)| *epoch)
        .map(|(_, p)| p)
}

fn resolve_checkpoint(rc: &RunConfig, stages: &[u8]) -> Result<(PathBuf, Checkpoint)> {
    let path = match &rc.checkpoint {
        Some(p) => p.clone(),
        None => stages
            .iter()
            .find_map(|&s| latest_checkpoint(&stage_dir(rc, s)))
            .ok_or_else(|| Error::PathNotFound(stage_dir(rc, stages[stages.len() - 1])))?,
    };
    let ckpt = Checkpoint::load(&path)?;
    log::info!("loaded stage-{} checkpoint {}", ckpt.stage, path.display());
    Ok((path, ckpt))
}

fn finish_stage(rc: &RunConfig, stage: u8, result: earseg_core::Result<StageOutcome>, log_name: &str) -> Result<()> {
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFiniteLoss {
            stage,
            epoch,
            step,
            last_good,
        }) => {
            let path = stage_dir(rc, stage).join("last_good.ckpt");
            last_good.save(&path)?;
            eprintln!("last good weights saved to {}", path.display());
            return Err(Error::NonFiniteLoss {
                stage,
                epoch,
                step,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let path = stage_dir(rc, stage).join(format!("{}.ckpt", outcome.checkpoint.epoch));
    outcome.checkpoint.save(&path)?;
    write_log(rc, &outcome.log, log_name)?;
    println!("stage {stage} checkpoint: {}", path.display());
    Ok(())
}

fn write_log(rc: &RunConfig, log: &TrainLog, name: &str) -> Result<()> {
    let dir = rc.out.join("logs");
    log.write(&dir.join(format!("{name}.csv")), &dir.join(format!("{name}_epochs.csv")))?;
    Ok(())
}

fn train(rc: &RunConfig) -> Result<()> {
    let data = load(rc)?;
    finish_stage(rc, 1, train_stage1(&data, &rc.train), "train")
}

fn cache_root(rc: &RunConfig) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| rc.out.join("cache"))
}

fn refine(rc: &RunConfig) -> Result<()> {
    let (_, ckpt) = resolve_checkpoint(rc, &[1])?;
    let data = load(rc)?;
    let root = cache_root(rc);
    let masks = generate_initial_masks(&ckpt, &data, Some(&MaskCache::masks(root.join("masks"))))?;
    println!(
        "mask generation: {} forward passes{}",
        masks.forward_passes,
        if masks.cache_hit { " (cache hit)" } else { "" }
    );
    let em_cache = MaskCache::error_maps(root.join("errormaps"));
    let hash = ckpt.content_hash();
    let error_maps = build_error_maps(&data, &masks.masks, Some((&em_cache, hash.as_str())))?;
    let missed: usize = error_maps.values().map(|e| e.count()).sum();
    log::info!("error maps: {missed} false-negative pixels over {} images", error_maps.len());
    finish_stage(rc, 2, train_stage2(&ckpt, &data, &error_maps, &rc.train), "refine")
}

fn eval_options(rc: &RunConfig, ckpt: &Checkpoint) -> EvalOptions {
    EvalOptions {
        fuse: rc.fuse && ckpt.has_eam(),
        use_fov: rc.use_fov,
        fusion: rc.train.fusion,
    }
}

fn predict(rc: &RunConfig) -> Result<()> {
    let (_, ckpt) = resolve_checkpoint(rc, &[2, 1])?;
    let data = load(rc)?;
    let preds = predict_all(&ckpt, &data, &eval_options(rc, &ckpt))?;
    let dir = rc.out.join("predictions");
    fs::create_dir_all(&dir)?;
    for (s, p) in data.iter().zip(&preds) {
        earseg_core::dataio::save_mask(&dir.join(format!("{}.png", s.id)), &p.data)?;
    }
    println!("wrote {} masks to {}", preds.len(), dir.display());
    Ok(())
}

fn evaluate(rc: &RunConfig) -> Result<()> {
    let (_, ckpt) = resolve_checkpoint(rc, &[2, 1])?;
    let data = load(rc)?;
    let opts = eval_options(rc, &ckpt);
    let preds = predict_all(&ckpt, &data, &opts)?;
    let report = score_predictions(&ckpt, &data, &preds, &opts)?;
    let stem = format!("stage{}", ckpt.stage);
    let reports = rc.out.join("reports");
    report.write(&reports, &stem)?;
    let overlays = reports.join("overlays").join(&stem);
    for (s, p) in data.iter().zip(&preds) {
        let fov = if opts.use_fov { s.fov.as_ref() } else { None };
        let img = render_overlay(&s.image, p, &s.gt, fov)?;
        save_overlay(&overlays.join(format!("{}.png", s.id)), &img)?;
    }
    println!(
        "{stem} ({}, {}): {}",
        if opts.fuse { "refined" } else { "baseline" },
        if report.fov_restricted { "fov" } else { "all pixels" },
        report.aggregate.metrics.summary_line()
    );
    println!("report: {}", reports.join(format!("{stem}.json")).display());
    Ok(())
}

fn crossval(rc: &RunConfig) -> Result<()> {
    let k = rc.folds.unwrap_or(4);
    let data = load(rc)?;
    let report = cross_validate(&data, k, &rc.train, rc.use_fov)?;
    let reports = rc.out.join("reports");
    report.write(&reports, "crossval")?;
    for f in &report.folds {
        println!("fold {} baseline: {}", f.fold, f.baseline.aggregate.metrics.summary_line());
        println!("fold {} refined:  {}", f.fold, f.refined.aggregate.metrics.summary_line());
    }
    println!("mean baseline: {}", report.mean_baseline.summary_line());
    println!("mean refined:  {}", report.mean_refined.summary_line());
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = synth_vessels(args.count, args.size, &mut rng)?;
    earseg_core::dataio::save_generic(&args.out, &samples)
        .with_context(|| format!("writing synthetic dataset to {}", args.out.display()))?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}
