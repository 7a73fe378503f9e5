//! Confusion counts, ACC/SE/SP/mIoU, per-dataset reports, k-fold
//! cross-validation and colour overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataio::{make_folds, RetinalSample};
use crate::eam::FusionWeights;
use crate::error::{Error, Result};
use crate::errormaps::PredictedMask;
use crate::trainer::{predict_mask, run_two_stage, Checkpoint, TrainConfig};

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Counts over pixels with `fov == 1`, or every pixel without a FOV mask.
pub fn confusion(pred: &PredictedMask, gt: &Array2<u8>, fov: Option<&Array2<u8>>) -> Result<ConfusionCounts> {
    let dims = pred.data.dim();
    if gt.dim() != dims {
        return Err(Error::shape("prediction vs ground truth", &[gt.nrows(), gt.ncols()], &[dims.0, dims.1]));
    }
    if let Some(f) = fov {
        if f.dim() != dims {
            return Err(Error::shape("prediction vs fov", &[f.nrows(), f.ncols()], &[dims.0, dims.1]));
        }
    }
    let mut c = ConfusionCounts::default();
    for ((idx, &p), &g) in pred.data.indexed_iter().zip(gt.iter()) {
        if fov.is_some_and(|f| f[idx] == 0) {
            continue;
        }
        match (p == 1, g == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metric values as fractions in `[0, 1]`; `miou_percent` repeats mIoU
/// on the percent scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    pub miou: f64,
    pub miou_percent: f64,
    /// Some denominator was zero and the vacuous value 1 was used.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::InvalidArgument("metrics need at least one evaluated pixel".into()));
    }
    let mut degenerate = false;
    let acc = (c.tp + c.tn) as f64 / total as f64;
    let se = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let sp = ratio(c.tn, c.tn + c.fp, &mut degenerate);
    let iou_fg = ratio(c.tp, c.tp + c.fp + c.fn_, &mut degenerate);
    let iou_bg = ratio(c.tn, c.tn + c.fp + c.fn_, &mut degenerate);
    let miou = 0.5 * (iou_fg + iou_bg);
    if degenerate {
        log::debug!("degenerate confusion counts {c:?}");
    }
    Ok(Metrics {
        acc,
        se,
        sp,
        miou,
        miou_percent: 100.0 * miou,
        degenerate,
    })
}

impl Metrics {
    /// Macro average; the degenerate flag is set if any input had it.
    pub fn mean(items: &[Metrics]) -> Result<Metrics> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Ok(Metrics {
            acc: avg(|m| m.acc),
            se: avg(|m| m.se),
            sp: avg(|m| m.sp),
            miou: avg(|m| m.miou),
            miou_percent: avg(|m| m.miou_percent),
            degenerate: items.iter().any(|m| m.degenerate),
        })
    }

    /// `ACC SP SE mIoU` on one line.
    pub fn summary_line(&self) -> String {
        format!(
            "ACC {:.4}  SP {:.4}  SE {:.4}  mIoU {:.4} ({:.2}%)",
            self.acc, self.sp, self.se, self.miou, self.miou_percent
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl Scored {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        Ok(Scored {
            metrics: metrics(&counts)?,
            counts,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(flatten)]
    pub score: Scored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint: String,
    pub stage: u8,
    pub fused: bool,
    pub fov_restricted: bool,
    pub images: Vec<ImageScore>,
    /// Micro aggregate over the evaluated pixels.
    pub aggregate: Scored,
    /// Micro aggregate over every pixel, present when counting was FOV-restricted.
    pub aggregate_all_pixels: Option<Scored>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub fuse: bool,
    pub use_fov: bool,
    pub fusion: FusionWeights,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            fuse: false,
            use_fov: true,
            fusion: FusionWeights::default(),
        }
    }
}

/// Eval-mode masks for every sample, one image at a time.
pub fn predict_all(ckpt: &Checkpoint, data: &[RetinalSample], opts: &EvalOptions) -> Result<Vec<PredictedMask>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.fuse && !ckpt.has_eam() {
        return Err(Error::MissingAttentionWeights);
    }
    let model = ckpt.to_model()?;
    let fuse = opts.fuse.then_some(opts.fusion);
    data.iter().map(|s| predict_mask(&model, &s.image, fuse)).collect()
}

/// Scores precomputed predictions; `preds[i]` belongs to `data[i]`.
pub fn score_predictions(
    ckpt: &Checkpoint,
    data: &[RetinalSample],
    preds: &[PredictedMask],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != data.len() {
        return Err(Error::shape("predictions vs samples", &[data.len()], &[preds.len()]));
    }
    let mut images = Vec::with_capacity(data.len());
    let mut total = ConfusionCounts::default();
    let mut all = ConfusionCounts::default();
    let mut any_fov = false;
    for (s, p) in data.iter().zip(preds) {
        let fov = if opts.use_fov { s.fov.as_ref() } else { None };
        any_fov |= fov.is_some();
        let c = confusion(p, &s.gt, fov)?;
        total.add(&c);
        all.add(&confusion(p, &s.gt, None)?);
        images.push(ImageScore {
            id: s.id.clone(),
            score: Scored::from_counts(c)?,
        });
    }
    Ok(MetricsReport {
        checkpoint: ckpt.content_hash(),
        stage: ckpt.stage,
        fused: opts.fuse,
        fov_restricted: any_fov,
        images,
        aggregate: Scored::from_counts(total)?,
        aggregate_all_pixels: if any_fov { Some(Scored::from_counts(all)?) } else { None },
    })
}

pub fn evaluate(ckpt: &Checkpoint, data: &[RetinalSample], opts: &EvalOptions) -> Result<MetricsReport> {
    let preds = predict_all(ckpt, data, opts)?;
    score_predictions(ckpt, data, &preds, opts)
}

const CSV_HEADER: &str = "id,tp,tn,fp,fn,acc,sp,se,miou,miou_percent\n";

fn csv_row(out: &mut String, id: &str, s: &Scored) {
    let (c, m) = (&s.counts, &s.metrics);
    let _ = writeln!(
        out,
        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
        id, c.tp, c.tn, c.fp, c.fn_, m.acc, m.sp, m.se, m.miou, m.miou_percent
    );
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image, then `aggregate` (and `aggregate_all_pixels`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        for img in &self.images {
            csv_row(&mut out, &img.id, &img.score);
        }
        csv_row(&mut out, "aggregate", &self.aggregate);
        if let Some(all) = &self.aggregate_all_pixels {
            csv_row(&mut out, "aggregate_all_pixels", all);
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub baseline: MetricsReport,
    pub refined: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    /// Mean of the per-fold aggregate metrics.
    pub mean_baseline: Metrics,
    pub mean_refined: Metrics,
}

impl CrossValReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,model,acc,sp,se,miou,miou_percent\n");
        let mut row = |fold: &str, model: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
                fold, model, m.acc, m.sp, m.se, m.miou, m.miou_percent
            );
        };
        for f in &self.folds {
            row(&f.fold.to_string(), "baseline", &f.baseline.aggregate.metrics);
            row(&f.fold.to_string(), "refined", &f.refined.aggregate.metrics);
        }
        row("mean", "baseline", &self.mean_baseline);
        row("mean", "refined", &self.mean_refined);
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Runs the full two-stage protocol on each of `k` folds and reports the
/// stage-1 baseline next to the refined model on every held-out fold.
pub fn cross_validate(data: &[RetinalSample], k: usize, cfg: &TrainConfig, use_fov: bool) -> Result<CrossValReport> {
    let folds = make_folds(data, k)?;
    let by_id: BTreeMap<&str, &RetinalSample> = data.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Vec<RetinalSample> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };

    let mut reports = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        log::info!("fold {}/{}: {} train, {} test", i + 1, k, fold.train.len(), fold.test.len());
        let train = pick(&fold.train);
        let test = pick(&fold.test);
        let run = run_two_stage(&train, cfg, None)?;
        let base_opts = EvalOptions {
            fuse: false,
            use_fov,
            fusion: cfg.fusion,
        };
        let refined_opts = EvalOptions { fuse: true, ..base_opts };
        reports.push(FoldReport {
            fold: i,
            test_ids: fold.test.clone(),
            baseline: evaluate(&run.stage1.checkpoint, &test, &base_opts)?,
            refined: evaluate(&run.stage2.checkpoint, &test, &refined_opts)?,
        });
    }
    let base: Vec<Metrics> = reports.iter().map(|r| r.baseline.aggregate.metrics).collect();
    let refined: Vec<Metrics> = reports.iter().map(|r| r.refined.aggregate.metrics).collect();
    Ok(CrossValReport {
        k,
        mean_baseline: Metrics::mean(&base)?,
        mean_refined: Metrics::mean(&refined)?,
        folds: reports,
    })
}

/// TP green, FP red, FN blue; true negatives and pixels outside the FOV
/// show the image in grayscale.
pub fn render_overlay(
    image: &Array3<f64>,
    pred: &PredictedMask,
    gt: &Array2<u8>,
    fov: Option<&Array2<u8>>,
) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if c != 3 || pred.data.dim() != (h, w) || gt.dim() != (h, w) || fov.is_some_and(|f| f.dim() != (h, w)) {
        return Err(Error::shape("overlay inputs", &[3, h, w], &[c, pred.data.nrows(), pred.data.ncols()]));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let inside = fov.is_none_or(|f| f[[y, x]] == 1);
            let color = match (inside, pred.data[[y, x]] == 1, gt[[y, x]] == 1) {
                (true, true, true) => TP_COLOR,
                (true, true, false) => FP_COLOR,
                (true, false, true) => FN_COLOR,
                _ => {
                    let l = 0.299 * image[[0, y, x]] + 0.587 * image[[1, y, x]] + 0.114 * image[[2, y, x]];
                    let g = (l.clamp(0.0, 1.0) * 255.0).round() as u8;
                    [g, g, g]
                }
            };
            out.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
    Ok(out)
}

pub fn save_overlay(path: &Path, overlay: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    overlay.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
