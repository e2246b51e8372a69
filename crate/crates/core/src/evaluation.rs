//! Detection and proposal-quality metrics, per-model reports and the
//! ablation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::losses::rpc_targets;
use crate::detector::{Detection, Detector, DetectorConfig, Inference};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::params::Checkpoint;
use crate::scenes::{read_annotated, DatasetManifest, LabeledDataset, UnlabeledImages};
use crate::trainer::{
    run_pipeline, stage_pretrain, IterationRecord, PipelineInputs, TrainConfig, Variant,
    VariantFlags,
};

/// Environment variable selecting single-threaded evaluation (`1`, the
/// default) or a fan-out across images (`0`). Results are identical either
/// way; images are reduced in order.
pub const DETERMINISTIC_ENV: &str = "COTRAIN_DETERMINISTIC";

/// Largest IoU of each ground-truth box with any proposal (0 without proposals).
pub fn proposal_coverage(gt: &[BBox], proposals: &[BBox]) -> Vec<f64> {
    gt.iter()
        .map(|g| proposals.iter().map(|p| iou(g, p)).fold(0.0, f64::max))
        .collect()
}

/// Fraction of ground-truth boxes whose coverage reaches `iou_thresh`.
/// Vacuously 1 without ground truth.
pub fn rpn_recall(gt: &[BBox], proposals: &[BBox], iou_thresh: f64) -> f64 {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "iou_thresh must lie in (0, 1)"
    );
    if gt.is_empty() {
        log::warn!("rpn_recall on an empty ground-truth set");
        return 1.0;
    }
    let hit = proposal_coverage(gt, proposals)
        .iter()
        .filter(|c| **c >= iou_thresh)
        .count();
    hit as f64 / gt.len() as f64
}

/// Fraction of ROIs whose predicted label equals their matched label.
/// Vacuously 1 without ROIs.
pub fn rpc_recall(predicted: &[usize], matched: &[usize]) -> f64 {
    assert_eq!(predicted.len(), matched.len(), "one match per ROI");
    if predicted.is_empty() {
        log::warn!("rpc_recall on an empty ROI set");
        return 1.0;
    }
    let hit = predicted
        .iter()
        .zip(matched)
        .filter(|(p, m)| p == m)
        .count();
    hit as f64 / predicted.len() as f64
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A detection matched against ground truth during AP computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedDetection {
    pub image: usize,
    pub score: f64,
    /// IoU with the matched ground-truth box, `None` for false positives.
    pub iou: Option<f64>,
}

/// Greedy one-to-one matching by descending score: each detection claims the
/// best-overlapping ground-truth box if that overlap reaches `iou_thresh`
/// and the box is still free. Ties keep image then list order.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gt: &[Vec<BBox>],
    iou_thresh: f64,
) -> Vec<MatchedDetection> {
    assert_eq!(dets.len(), gt.len(), "one ground-truth list per image");
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|(i, j)| {
            let d = &dets[i][j];
            let best = gt[i]
                .iter()
                .enumerate()
                .map(|(k, g)| (k, iou(&d.bbox, g)))
                .fold(None, |acc: Option<(usize, f64)>, (k, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((k, v)),
                });
            let iou = match best {
                Some((k, v)) if v >= iou_thresh && !taken[i][k] => {
                    taken[i][k] = true;
                    Some(v)
                }
                _ => None,
            };
            MatchedDetection {
                image: i,
                score: d.score,
                iou,
            }
        })
        .collect()
}

/// Area under the precision/recall curve of score-ordered matches, with
/// precision made monotone from the right. `None` without ground truth.
pub fn ap_from_matches(matches: &[MatchedDetection], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(matches.len());
    for (n, m) in matches.iter().enumerate() {
        tp += usize::from(m.iou.is_some());
        points.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = 0.0;
    let mut interpolated = vec![0.0; points.len()];
    for i in (0..points.len()).rev() {
        envelope = envelope.max(points[i].1);
        interpolated[i] = envelope;
    }
    for (i, &(recall, _)) in points.iter().enumerate() {
        ap += (recall - prev_recall) * interpolated[i];
        prev_recall = recall;
    }
    Some(ap)
}

/// Continuous-interpolation AP over several images.
pub fn average_precision_multi(
    dets: &[Vec<Detection>],
    gt: &[Vec<BBox>],
    iou_thresh: f64,
) -> Option<f64> {
    let num_gt = gt.iter().map(Vec::len).sum();
    ap_from_matches(&match_detections(dets, gt, iou_thresh), num_gt)
}

/// Continuous-interpolation AP on one image.
pub fn average_precision(dets: &[Detection], gt: &[BBox], iou_thresh: f64) -> Option<f64> {
    average_precision_multi(&[dets.to_vec()], &[gt.to_vec()], iou_thresh)
}

/// Proposal coverage distribution over ten uniform bins on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Share of ground-truth boxes in the first bin, coverage below 0.1.
    pub zero_fraction: f64,
    /// Share of ground-truth boxes with coverage at least 0.5.
    pub at_least_half: f64,
}

impl CoverageHistogram {
    pub const BINS: usize = 10;

    pub fn from_coverage(values: &[f64]) -> Self {
        let mut counts = vec![0usize; Self::BINS];
        for &v in values {
            let bin = ((v * Self::BINS as f64).floor() as usize).min(Self::BINS - 1);
            counts[bin] += 1;
        }
        let n = values.len().max(1) as f64;
        let zero_fraction = counts[0] as f64 / n;
        CoverageHistogram {
            bin_edges: (0..=Self::BINS)
                .map(|i| i as f64 / Self::BINS as f64)
                .collect(),
            counts,
            zero_fraction,
            at_least_half: values.iter().filter(|v| **v >= 0.5).count() as f64 / n,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Choices behind metrics whose population is a convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ap_interpolation: String,
    pub avg_iou_population: String,
    pub mean_score_population: String,
    pub match_iou: f64,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        ReportMetadata {
            ap_interpolation: "continuous".into(),
            avg_iou_population: "true-positive detections".into(),
            mean_score_population: "true-positive detections".into(),
            match_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// AP per foreground class; `None` for classes without ground truth.
    pub ap_per_class: Vec<Option<f64>>,
    pub map: f64,
    pub rpn_recall_at_05: f64,
    pub rpc_recall_at_05: f64,
    pub avg_iou: f64,
    pub mean_score: f64,
    pub coverage: CoverageHistogram,
    pub fingerprint: String,
    pub seed: u64,
    pub num_images: usize,
    pub num_gt: usize,
    pub metadata: ReportMetadata,
}

fn deterministic() -> bool {
    std::env::var(DETERMINISTIC_ENV).map_or(true, |v| v != "0")
}

fn infer_all(det: &Detector, data: &LabeledDataset) -> Result<Vec<Inference>> {
    let run = |img: &crate::scenes::LabeledImage| det.infer(&img.image.to_chw());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if deterministic() || threads == 1 || data.len() < 2 {
        return data.images.iter().map(run).collect();
    }
    let chunk = data.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = data
            .images
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Runs the detector over every image of an annotated split and fills a report.
pub fn evaluate_detector(
    det: &Detector,
    data: &LabeledDataset,
    seed: u64,
) -> Result<MetricsReport> {
    let cfg = &det.config;
    let inferences = infer_all(det, data)?;
    let mut coverage = Vec::new();
    let mut predicted = Vec::new();
    let mut matched = Vec::new();
    let mut rpn_hits = 0usize;
    for (img, inf) in data.images.iter().zip(&inferences) {
        let proposals: Vec<BBox> = inf.proposals.iter().map(|p| p.bbox).collect();
        let cov = proposal_coverage(&img.boxes, &proposals);
        rpn_hits += cov.iter().filter(|c| **c >= 0.5).count();
        coverage.extend(cov);
        let labels = rpc_targets(
            &proposals,
            &img.boxes,
            &img.class_ids,
            &cfg.rpc_coder(),
            0.5,
        )
        .labels;
        matched.extend(labels);
        predicted.extend(inf.predictions.iter().map(|p| argmax(&p.class_probs)));
    }
    let num_gt = coverage.len();
    let mut ap_per_class = Vec::with_capacity(cfg.num_fg_classes);
    let mut tp_iou = Vec::new();
    let mut tp_score = Vec::new();
    for class in 0..cfg.num_fg_classes {
        let dets: Vec<Vec<Detection>> = inferences
            .iter()
            .map(|inf| {
                inf.detections
                    .iter()
                    .filter(|d| d.class_id == class + 1)
                    .copied()
                    .collect()
            })
            .collect();
        let gt: Vec<Vec<BBox>> = data
            .images
            .iter()
            .map(|img| {
                img.boxes
                    .iter()
                    .zip(&img.class_ids)
                    .filter(|(_, c)| **c == class)
                    .map(|(b, _)| *b)
                    .collect()
            })
            .collect();
        let matches = match_detections(&dets, &gt, 0.5);
        for m in &matches {
            if let Some(v) = m.iou {
                tp_iou.push(v);
                tp_score.push(m.score);
            }
        }
        ap_per_class.push(ap_from_matches(&matches, gt.iter().map(Vec::len).sum()));
    }
    let present: Vec<f64> = ap_per_class.iter().flatten().copied().collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricsReport {
        map: mean(&present),
        ap_per_class,
        rpn_recall_at_05: if num_gt == 0 {
            1.0
        } else {
            rpn_hits as f64 / num_gt as f64
        },
        rpc_recall_at_05: rpc_recall(&predicted, &matched),
        avg_iou: mean(&tp_iou),
        mean_score: mean(&tp_score),
        coverage: CoverageHistogram::from_coverage(&coverage),
        fingerprint: det.fingerprint(),
        seed,
        num_images: data.len(),
        num_gt,
        metadata: ReportMetadata::default(),
    })
}

/// Annotated split for evaluation or oracle training. Unlike the training
/// loader this also opens evaluation-only annotations.
pub fn load_eval_split(dir: &Path) -> Result<(DatasetManifest, LabeledDataset)> {
    let manifest = DatasetManifest::load(dir)?;
    let data = read_annotated(dir, &manifest)?;
    Ok((manifest, data))
}

/// Loads a checkpoint, checks it against `det_cfg` and the split's scene
/// configuration, and evaluates it on the split.
pub fn evaluate_model(
    checkpoint: &Path,
    det_cfg: &DetectorConfig,
    split_dir: &Path,
) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint, Some(&det_cfg.fingerprint()))?;
    let (manifest, data) = load_eval_split(split_dir)?;
    if manifest.config.image_size != det_cfg.image_size
        || manifest.config.num_fg_classes != det_cfg.num_fg_classes
    {
        return Err(Error::Fingerprint {
            expected: format!(
                "image_size {} / {} classes (detector)",
                det_cfg.image_size, det_cfg.num_fg_classes
            ),
            found: format!(
                "image_size {} / {} classes (dataset {})",
                manifest.config.image_size,
                manifest.config.num_fg_classes,
                split_dir.display()
            ),
        });
    }
    let det = Detector::from_params(det_cfg.clone(), ckpt.params)?;
    evaluate_detector(&det, &data, 0)
}

/// Datasets an ablation runs on.
pub struct AblationData<'a> {
    pub source: &'a LabeledDataset,
    pub target_train: &'a UnlabeledImages,
    pub target_eval: &'a LabeledDataset,
    /// Labeled target training images for the oracle arm.
    pub oracle_train: Option<&'a LabeledDataset>,
    pub data_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Trained with target labels; an upper bound, not an adaptation result.
    pub oracle: bool,
    pub flags: VariantFlags,
    pub runs: Vec<ArmRun>,
    pub map_mean: f64,
    pub map_std: f64,
    pub zero_fraction_mean: f64,
    pub at_least_half_mean: f64,
    pub rpn_recall_mean: f64,
}

impl AblationRow {
    fn new(name: &str, oracle: bool, flags: VariantFlags, runs: Vec<ArmRun>) -> Self {
        let reports: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let stat = |f: &dyn Fn(&MetricsReport) -> f64| -> (f64, f64) {
            if reports.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let v: Vec<f64> = reports.iter().map(|r| f(r)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            } else {
                0.0
            };
            (m, var.sqrt())
        };
        let (map_mean, map_std) = stat(&|r| r.map);
        AblationRow {
            name: name.to_string(),
            oracle,
            flags,
            map_mean,
            map_std,
            zero_fraction_mean: stat(&|r| r.coverage.zero_fraction).0,
            at_least_half_mean: stat(&|r| r.coverage.at_least_half).0,
            rpn_recall_mean: stat(&|r| r.rpn_recall_at_05).0,
            runs,
        }
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }

    /// Per-seed coverage histograms summed bin by bin.
    pub fn coverage_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; CoverageHistogram::BINS];
        for r in self.runs.iter().filter_map(|r| r.report.as_ref()) {
            for (c, v) in counts.iter_mut().zip(&r.coverage.counts) {
                *c += v;
            }
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

/// Coverage distributions of selected arms, the data behind the coverage plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub bin_edges: Vec<f64>,
    pub series: Vec<PlotSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

/// Arms drawn in the coverage plot, with their series names.
pub const PLOT_ARMS: [(&str, &str); 4] = [
    ("source_only", "source_only"),
    ("naive_local", "naive_alignment"),
    ("cst_only", "rpn_adaptation"),
    ("oracle", "oracle"),
];

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(AblationRow::failed)
    }

    /// Aligned plain-text rendering, AP in points.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:>5} {:>5} {:>5} {:>5} {:>8} {:>7} {:>9} {:>9} {:>9}\n",
            "variant", "local", "wloc", "cst", "mcd", "mAP", "std", "rpn_rec", "cov=0", "cov>=0.5"
        );
        let mark = |b: bool| if b { "x" } else { "." };
        for r in &self.rows {
            let name = if r.oracle {
                format!("{} [oracle]", r.name)
            } else {
                r.name.clone()
            };
            out.push_str(&format!(
                "{:<16} {:>5} {:>5} {:>5} {:>5} {:>8.2} {:>7.2} {:>9.3} {:>9.3} {:>9.3}{}\n",
                name,
                mark(r.flags.local_align),
                mark(r.flags.weighted_align),
                mark(r.flags.cst),
                mark(r.flags.mcd),
                100.0 * r.map_mean,
                100.0 * r.map_std,
                r.rpn_recall_mean,
                r.zero_fraction_mean,
                r.at_least_half_mean,
                if r.failed() { "  FAILED" } else { "" }
            ));
        }
        out.push_str(&format!("seeds: {:?}\n", self.seeds));
        out
    }

    pub fn plot_data(&self) -> PlotData {
        let series = PLOT_ARMS
            .iter()
            .map(|(row, label)| {
                let counts = self.row(row).map_or(
                    vec![0; CoverageHistogram::BINS],
                    AblationRow::coverage_counts,
                );
                let total = counts.iter().sum::<usize>().max(1) as f64;
                PlotSeries {
                    name: label.to_string(),
                    fractions: counts.iter().map(|c| *c as f64 / total).collect(),
                    counts,
                }
            })
            .collect();
        PlotData {
            bin_edges: (0..=CoverageHistogram::BINS)
                .map(|i| i as f64 / CoverageHistogram::BINS as f64)
                .collect(),
            series,
        }
    }
}

/// Trains every variant for every seed from a pretrain checkpoint shared per
/// seed, evaluates on the target evaluation split and tabulates the results.
/// Failures are recorded in their row; the table is always produced.
pub fn run_ablation(
    variants: &[Variant],
    seeds: &[u64],
    det_cfg: &DetectorConfig,
    train: &TrainConfig,
    data: &AblationData<'_>,
    mut on_run: impl FnMut(&str, u64, &[IterationRecord]),
) -> AblationTable {
    let mut runs: Vec<Vec<ArmRun>> = vec![Vec::new(); variants.len()];
    let mut oracle_runs = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..train.clone()
        };
        let pretrained = stage_pretrain(det_cfg.clone(), &cfg, data.source);
        for (v, variant) in variants.iter().enumerate() {
            let result =
                pretrained
                    .as_ref()
                    .map_err(|e| e.to_string())
                    .and_then(|(ckpt, pre_log)| {
                        let outcome = run_pipeline(
                            PipelineInputs {
                                detector: det_cfg.clone(),
                                train: cfg.clone(),
                                flags: variant.flags(),
                                source: data.source,
                                target: data.target_train,
                                data_id: data.data_id.clone(),
                                pretrained: Some(ckpt.clone()),
                            },
                            None,
                        )
                        .map_err(|e| e.to_string())?;
                        let mut log = pre_log.clone();
                        log.extend(outcome.log);
                        on_run(variant.name(), seed, &log);
                        evaluate_detector(&outcome.detector, data.target_eval, seed)
                            .map_err(|e| e.to_string())
                    });
            runs[v].push(arm_run(seed, result));
        }
        if let Some(oracle_train) = data.oracle_train {
            let empty = UnlabeledImages::new(Vec::new());
            let result = run_pipeline(
                PipelineInputs {
                    detector: det_cfg.clone(),
                    train: cfg.clone(),
                    flags: VariantFlags::default(),
                    source: oracle_train,
                    target: &empty,
                    data_id: data.data_id.clone(),
                    pretrained: None,
                },
                None,
            )
            .map_err(|e| e.to_string())
            .and_then(|outcome| {
                on_run("oracle", seed, &outcome.log);
                evaluate_detector(&outcome.detector, data.target_eval, seed)
                    .map_err(|e| e.to_string())
            });
            oracle_runs.push(arm_run(seed, result));
        }
    }
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .zip(runs)
        .map(|(v, r)| AblationRow::new(v.name(), false, v.flags(), r))
        .collect();
    if data.oracle_train.is_some() {
        rows.push(AblationRow::new(
            "oracle",
            true,
            VariantFlags::default(),
            oracle_runs,
        ));
    }
    AblationTable {
        rows,
        seeds: seeds.to_vec(),
    }
}

fn arm_run(seed: u64, result: std::result::Result<MetricsReport, String>) -> ArmRun {
    match result {
        Ok(report) => ArmRun {
            seed,
            report: Some(report),
            error: None,
        },
        Err(e) => {
            log::error!("ablation arm failed for seed {seed}: {e}");
            ArmRun {
                seed,
                report: None,
                error: Some(e),
            }
        }
    }
}
