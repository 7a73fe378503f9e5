//! Two-stage protocol: train the trunk, freeze it to predict the training
//! set, derive error maps, then fine-tune trunk and error attention jointly.

mod checkpoint;
mod config;
mod sgd;

pub use checkpoint::{Checkpoint, SegModel, MAGIC, VERSION};
pub use config::{lr_schedule, poly_lr, TrainConfig};
pub use sgd::Sgd;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_item, init_params, SemanticLogits, FEATURE_STRIDE};
use crate::dataio::{AugmentPlan, RetinalSample};
use crate::eam::{refine_batch, refine_batch_backward, Eam, FusionWeights};
use crate::error::{Error, Result};
use crate::errormaps::{align_error_map, binarize, generate_error_map, ErrorMap, MaskCache, PredictedMask};
use crate::losses::{ce_loss_batch, ea_loss_batch, hm_loss_batch, total_loss, LossWeights};
use crate::nn::{upsample_bilinear, upsample_bilinear_backward, Mode, Module};

const STAGE1_SALT: u64 = 0x5347_3031;
const STAGE2_SALT: u64 = 0x5347_3032;
const EAM_SALT: u64 = 0x4541_4d00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lce: f64,
    pub lhm: f64,
    pub lea: f64,
    pub total: f64,
}

/// Per-epoch means of the step losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub lce: f64,
    pub lhm: f64,
    pub lea: f64,
    pub total: f64,
    /// Mean attention value over the epoch's batches (stage 2 only).
    pub mean_attention: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `step,lce,lhm,lea,total`, one row per optimizer step.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,lce,lhm,lea,total\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.lce, r.lhm, r.lea, r.total);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,lce,lhm,lea,total\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.lr, r.lce, r.lhm, r.lea, r.total);
        }
        s
    }

    pub fn write(&self, steps_path: &Path, epochs_path: &Path) -> Result<()> {
        for p in [steps_path, epochs_path] {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(steps_path, self.steps_csv())?;
        fs::write(epochs_path, self.epochs_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

struct Batch {
    images: Array4<f64>,
    gts: Vec<Array2<u8>>,
    /// Aligned error maps, stage 2 only.
    ems: Vec<Array2<f64>>,
}

fn stack_images(images: &[Array3<f64>]) -> Result<Array4<f64>> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|_| {
        let dims: Vec<usize> = images.iter().flat_map(|i| [i.dim().1, i.dim().2]).collect();
        Error::shape("batch images (all images in a batch must share H×W)", &dims[..2.min(dims.len())], &dims)
    })
}

fn make_batch(
    samples: &[&RetinalSample],
    error_maps: Option<&BTreeMap<String, ErrorMap>>,
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut images = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut ems = Vec::new();
    for s in samples {
        let plan = if augment {
            AugmentPlan::draw(rng, s.height() == s.width())
        } else {
            AugmentPlan::identity()
        };
        let out = plan.apply(s, rng);
        if let Some(maps) = error_maps {
            let em = maps.get(&s.id).ok_or_else(|| Error::MissingErrorMap(s.id.clone()))?;
            let full = ErrorMap {
                data: plan.apply_mask(&em.data),
                stride: 1,
            };
            ems.push(align_error_map(&full, FEATURE_STRIDE)?.as_f64());
        }
        images.push(out.image);
        gts.push(out.gt);
    }
    Ok(Batch {
        images: stack_images(&images)?,
        gts,
        ems,
    })
}

struct StagePlan<'a> {
    stage: u8,
    epochs: usize,
    base_lr: f64,
    weights: LossWeights,
    error_maps: Option<&'a BTreeMap<String, ErrorMap>>,
    salt: u64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn run_stage(model: &mut SegModel, data: &[RetinalSample], cfg: &TrainConfig, plan: StagePlan<'_>) -> Result<(TrainLog, Sgd)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ plan.salt);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = TrainLog::default();
    let config_hash = cfg.hash();
    let w = plan.weights;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;

    for epoch in 0..plan.epochs {
        let lr = poly_lr(plan.base_lr, epoch, plan.epochs, cfg.lr_power);
        order.shuffle(&mut rng);
        let (mut lces, mut lhms, mut leas, mut totals, mut attn) = (vec![], vec![], vec![], vec![], vec![]);

        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&RetinalSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = make_batch(&samples, plan.error_maps, cfg.augment, &mut rng)?;
            let gt_refs: Vec<&Array2<u8>> = batch.gts.iter().collect();

            let (trunk, trunk_cache) = model.backbone.forward_batch(&batch.images, Mode::Train)?;
            let attention = match model.eam.as_ref() {
                Some(eam) => Some(eam.forward_batch(&trunk.features, Mode::Train)?),
                None => None,
            };
            let fused = match &attention {
                Some((am, _)) => refine_batch(&trunk.logits, am, cfg.fusion),
                None => trunk.logits.clone(),
            };
            let up = upsample_bilinear(&fused, FEATURE_STRIDE);
            let ce = ce_loss_batch(&up, &gt_refs)?;
            let hm = hm_loss_batch(&trunk.aux_logits, &gt_refs)?;
            let ea = match &attention {
                Some((am, _)) => {
                    let em_refs: Vec<&Array2<f64>> = batch.ems.iter().collect();
                    Some(ea_loss_batch(&em_refs, am)?)
                }
                None => None,
            };
            let lea = ea.as_ref().map_or(0.0, |e| e.value);
            let total = total_loss(ce.value, hm.value, lea, w);
            if !total.is_finite() {
                let last_good = Checkpoint::from_model(model, Some(&sgd), plan.stage, epoch as u32, &config_hash);
                return Err(Error::NonFiniteLoss {
                    stage: plan.stage,
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                });
            }

            model.zero_grad();
            let d_fused = upsample_bilinear_backward(&(ce.grad * w.eta), FEATURE_STRIDE);
            let (d_logits, d_features) = match (attention, model.eam.as_mut()) {
                (Some((am, eam_cache)), Some(eam)) => {
                    attn.push(am.mean().unwrap_or(0.0));
                    let (d_logits, d_am_ce) = refine_batch_backward(&trunk.logits, &am, &d_fused, cfg.fusion);
                    let mut d_am = ea.expect("stage 2 has an attention loss").grad * w.epsilon;
                    if !cfg.detach_attention {
                        d_am += &d_am_ce;
                    }
                    eam.update_running(&eam_cache);
                    (d_logits, Some(eam.backward_batch(eam_cache, &d_am)))
                }
                _ => (d_fused, None),
            };
            let d_aux = (w.gamma != 0.0).then(|| hm.grad * w.gamma);
            model.backbone.update_running(&trunk_cache);
            model
                .backbone
                .backward_batch(trunk_cache, &d_logits, d_features.as_ref(), d_aux.as_ref());
            sgd.step(model, "", lr);

            log.steps.push(StepRecord {
                stage: plan.stage,
                epoch,
                step,
                lce: ce.value,
                lhm: hm.value,
                lea,
                total,
            });
            lces.push(ce.value);
            lhms.push(hm.value);
            leas.push(lea);
            totals.push(total);
            step += 1;
        }
        let rec = EpochRecord {
            stage: plan.stage,
            epoch,
            lr,
            lce: mean(&lces),
            lhm: mean(&lhms),
            lea: mean(&leas),
            total: mean(&totals),
            mean_attention: (!attn.is_empty()).then(|| mean(&attn)),
        };
        log::info!(
            "stage {} epoch {}/{} lr {:.3e} loss {:.4} (ce {:.4} hm {:.4} ea {:.4})",
            plan.stage,
            epoch + 1,
            plan.epochs,
            lr,
            rec.total,
            rec.lce,
            rec.lhm,
            rec.lea
        );
        log.epochs.push(rec);
    }
    Ok((log, sgd))
}

/// Trains the trunk from a seeded initialisation; the attention loss is
/// not part of this stage.
pub fn train_stage1(data: &[RetinalSample], cfg: &TrainConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = SegModel {
        backbone: init_params(cfg.seed, cfg.backbone)?,
        eam: None,
    };
    let weights = LossWeights {
        epsilon: 0.0,
        ..cfg.loss_weights
    };
    let plan = StagePlan {
        stage: 1,
        epochs: cfg.stage1_epochs,
        base_lr: cfg.lr_stage1,
        weights,
        error_maps: None,
        salt: STAGE1_SALT,
    };
    let (log, sgd) = run_stage(&mut model, data, cfg, plan)?;
    let checkpoint = Checkpoint::from_model(&mut model, Some(&sgd), 1, cfg.stage1_epochs as u32, &cfg.hash());
    Ok(StageOutcome { checkpoint, log })
}

/// Stage-1 trunk from `ckpt` plus a freshly seeded attention module: the
/// starting point of stage 2.
pub fn stage2_model(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<SegModel> {
    let base = ckpt.to_model()?;
    let channels = base.backbone.feature_channels();
    Ok(SegModel {
        backbone: base.backbone,
        eam: Some(Eam::new(channels, cfg.seed ^ EAM_SALT)),
    })
}

/// Fine-tunes the stage-1 trunk together with a freshly initialised
/// error-attention module on the full composite objective.
pub fn train_stage2(
    ckpt: &Checkpoint,
    data: &[RetinalSample],
    error_maps: &BTreeMap<String, ErrorMap>,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = data.iter().find(|s| !error_maps.contains_key(&s.id)) {
        return Err(Error::MissingErrorMap(s.id.clone()));
    }
    let mut model = stage2_model(ckpt, cfg)?;
    let plan = StagePlan {
        stage: 2,
        epochs: cfg.stage2_epochs,
        base_lr: cfg.lr_stage2,
        weights: cfg.loss_weights,
        error_maps: Some(error_maps),
        salt: STAGE2_SALT,
    };
    let (log, sgd) = run_stage(&mut model, data, cfg, plan)?;
    let checkpoint = Checkpoint::from_model(&mut model, Some(&sgd), 2, cfg.stage2_epochs as u32, &cfg.hash());
    Ok(StageOutcome { checkpoint, log })
}

/// Eval-mode stride-1 logits for one image, refined with the attention
/// module when `fuse` is given.
pub fn infer_logits(model: &SegModel, image: &Array3<f64>, fuse: Option<FusionWeights>) -> Result<SemanticLogits> {
    let x = image.clone().insert_axis(Axis(0));
    let (out, _) = model.backbone.forward_batch(&x, Mode::Eval)?;
    let logits = match fuse {
        Some(weights) => {
            weights.validate()?;
            let eam = model.eam.as_ref().ok_or(Error::MissingAttentionWeights)?;
            let (am, _) = eam.forward_batch(&out.features, Mode::Eval)?;
            refine_batch(&out.logits, &am, weights)
        }
        None => out.logits,
    };
    SemanticLogits::new(batch_item(&upsample_bilinear(&logits, FEATURE_STRIDE), 0), 1)
}

pub fn predict_mask(model: &SegModel, image: &Array3<f64>, fuse: Option<FusionWeights>) -> Result<PredictedMask> {
    Ok(binarize(&infer_logits(model, image, fuse)?))
}

#[derive(Clone, Debug)]
pub struct MaskGeneration {
    pub masks: BTreeMap<String, PredictedMask>,
    /// Number of network forward passes executed; zero on a cache hit.
    pub forward_passes: usize,
    pub cache_hit: bool,
}

/// Predicts every training image with the frozen stage-1 trunk. With a
/// cache, masks are reused when they were produced by the same checkpoint.
pub fn generate_initial_masks(
    ckpt: &Checkpoint,
    data: &[RetinalSample],
    cache: Option<&MaskCache>,
) -> Result<MaskGeneration> {
    let hash = ckpt.content_hash();
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    if let Some(cache) = cache {
        if let Some(found) = cache.load(&hash, &ids)? {
            log::info!("reusing {} cached stage-1 masks", found.len());
            let masks = found.into_iter().map(|(k, data)| (k, PredictedMask { data })).collect();
            return Ok(MaskGeneration {
                masks,
                forward_passes: 0,
                cache_hit: true,
            });
        }
    }
    let model = ckpt.to_model()?;
    let mut masks = BTreeMap::new();
    for s in data {
        masks.insert(s.id.clone(), predict_mask(&model, &s.image, None)?);
    }
    if let Some(cache) = cache {
        let raw: BTreeMap<String, Array2<u8>> = masks.iter().map(|(k, m)| (k.clone(), m.data.clone())).collect();
        cache.store(&hash, &raw)?;
    }
    Ok(MaskGeneration {
        forward_passes: data.len(),
        masks,
        cache_hit: false,
    })
}

/// Full-resolution error maps for every sample, optionally cached as
/// `<id>_em.png` under `cache` keyed by `checkpoint_hash`.
pub fn build_error_maps(
    data: &[RetinalSample],
    masks: &BTreeMap<String, PredictedMask>,
    cache: Option<(&MaskCache, &str)>,
) -> Result<BTreeMap<String, ErrorMap>> {
    let mut out = BTreeMap::new();
    for s in data {
        let m1 = masks.get(&s.id).ok_or_else(|| Error::MissingErrorMap(s.id.clone()))?;
        out.insert(s.id.clone(), generate_error_map(&s.gt, m1)?);
    }
    if let Some((cache, hash)) = cache {
        let raw: BTreeMap<String, Array2<u8>> = out.iter().map(|(k, e)| (k.clone(), e.data.clone())).collect();
        cache.store(hash, &raw)?;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub stage1: StageOutcome,
    pub masks: MaskGeneration,
    pub error_maps: BTreeMap<String, ErrorMap>,
    pub stage2: StageOutcome,
}

/// Stage 1, mask generation, error maps and stage 2 in one call.
pub fn run_two_stage(data: &[RetinalSample], cfg: &TrainConfig, cache_dir: Option<&Path>) -> Result<TwoStageOutcome> {
    let stage1 = train_stage1(data, cfg)?;
    let mask_cache = cache_dir.map(|d| MaskCache::masks(d.join("masks")));
    let em_cache = cache_dir.map(|d| MaskCache::error_maps(d.join("errormaps")));
    let masks = generate_initial_masks(&stage1.checkpoint, data, mask_cache.as_ref())?;
    let hash = stage1.checkpoint.content_hash();
    let error_maps = build_error_maps(data, &masks.masks, em_cache.as_ref().map(|c| (c, hash.as_str())))?;
    let stage2 = train_stage2(&stage1.checkpoint, data, &error_maps, cfg)?;
    Ok(TwoStageOutcome {
        stage1,
        masks,
        error_maps,
        stage2,
    })
}
