//! Domain-adaptation terms: collaborative self-training between the two
//! heads, the foreground/background discrepancy between them, and the
//! foreground-weighted local adversarial loss.
//!
//! Every loss is a pure function returning its value and its gradient with
//! respect to each input, so the trainer can splice it onto the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::anchors::{
    match_anchors, subsample_labels, AnchorGrid, AnchorLabel, MatchThresholds,
};
use crate::detector::losses::{neg_log, smooth_l1, RpnLoss, PROB_EPS};
use crate::detector::{Detection, RoiPrediction, RpnOutput};
use crate::geometry::{iou, BBox, BoxCoder};

/// Allowed deviation of a probability vector's sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightCurveParams {
    pub lambda_self: f64,
    pub lambda_mcd: f64,
}

impl Default for WeightCurveParams {
    fn default() -> Self {
        WeightCurveParams {
            lambda_self: 5.0,
            lambda_mcd: 2.0,
        }
    }
}

fn check_unit(name: &str, s: f64) {
    assert!(
        (0.0..=1.0).contains(&s),
        "{name} must lie in [0, 1], got {s}"
    );
}

fn check_lambda(lam: f64) {
    assert!(
        lam > 0.0 && lam.is_finite(),
        "lambda must be positive, got {lam}"
    );
}

/// `|1 - 2s|^λ` and its derivative in `s`.
fn confidence_weight(s: f64, lam: f64) -> (f64, f64) {
    let u = 1.0 - 2.0 * s;
    let a = u.abs();
    let value = a.powf(lam);
    let grad = if a == 0.0 {
        if lam > 1.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        -2.0 * lam * a.powf(lam - 1.0) * u.signum()
    };
    (value, grad)
}

/// Self-training weight from the classifier's background probability.
pub fn weight_self_rpc_conf(s_cls_bg: f64, lam: f64) -> f64 {
    check_unit("s_cls_bg", s_cls_bg);
    check_lambda(lam);
    confidence_weight(s_cls_bg, lam).0
}

/// Self-training weight from the RPN foreground probability.
pub fn weight_self_rpn_conf(s_rpn_fg: f64, lam: f64) -> f64 {
    check_unit("s_rpn_fg", s_rpn_fg);
    check_lambda(lam);
    confidence_weight(s_rpn_fg, lam).0
}

/// Derivative of either self-training weight in its argument.
pub fn weight_self_grad(s: f64, lam: f64) -> f64 {
    check_unit("s", s);
    check_lambda(lam);
    confidence_weight(s, lam).1
}

fn check_distribution(probs: &[f64]) {
    assert!(!probs.is_empty(), "empty probability vector");
    assert!(
        probs
            .iter()
            .all(|p| (0.0..=1.0 + NORMALIZATION_TOL).contains(p)),
        "probabilities must be non-negative: {probs:?}"
    );
    let sum: f64 = probs.iter().sum();
    assert!(
        (sum - 1.0).abs() <= NORMALIZATION_TOL,
        "probabilities must sum to 1, got {sum}"
    );
}

/// Shannon entropy over the full distribution (background included), with
/// `0 · ln 0 = 0`.
pub fn entropy(class_probs: &[f64]) -> f64 {
    check_distribution(class_probs);
    class_probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// `∂E/∂p_c = -(ln p_c + 1)`, with `p_c` floored at [`PROB_EPS`] inside the log.
pub fn entropy_grad(class_probs: &[f64]) -> Vec<f64> {
    class_probs
        .iter()
        .map(|p| -(p.max(PROB_EPS).ln() + 1.0))
        .collect()
}

/// Value and gradients of a loss over per-ROI classifier distributions
/// (flattened `[R, K + 1]`) and per-ROI RPN foreground scores.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLoss {
    pub value: f64,
    pub d_class_probs: Vec<f64>,
    pub d_rpn_fg: Vec<f64>,
}

impl HeadLoss {
    fn zero(probs: usize, rois: usize) -> Self {
        HeadLoss {
            value: 0.0,
            d_class_probs: vec![0.0; probs],
            d_rpn_fg: vec![0.0; rois],
        }
    }
}

fn rows<'a>(
    class_probs: &'a [f64],
    classes: usize,
    rpn_fg: &[f64],
) -> std::slice::ChunksExact<'a, f64> {
    assert!(classes >= 2, "need background plus at least one class");
    assert_eq!(
        class_probs.len(),
        classes * rpn_fg.len(),
        "one RPN score per classifier distribution"
    );
    class_probs.chunks_exact(classes)
}

/// Mean over ROIs of `|1 - 2 s_rpn|^λ · E(s_cls)`. `class_probs` is
/// row-major `[R, classes]`; `rpn_fg` holds the objectness of each ROI's
/// source anchor.
pub fn loss_rpc_entropy(class_probs: &[f64], classes: usize, rpn_fg: &[f64], lam: f64) -> HeadLoss {
    check_lambda(lam);
    let mut out = HeadLoss::zero(class_probs.len(), rpn_fg.len());
    if rpn_fg.is_empty() {
        return out;
    }
    let norm = 1.0 / rpn_fg.len() as f64;
    for (r, p) in rows(class_probs, classes, rpn_fg).enumerate() {
        check_unit("rpn_fg", rpn_fg[r]);
        let (w, dw) = confidence_weight(rpn_fg[r], lam);
        let e = entropy(p);
        out.value += norm * w * e;
        out.d_rpn_fg[r] = norm * dw * e;
        for (c, g) in entropy_grad(p).into_iter().enumerate() {
            out.d_class_probs[r * classes + c] = norm * w * g;
        }
    }
    out
}

pub fn loss_rpc_entropy_on(preds: &[RoiPrediction], rpn_fg: &[f64], lam: f64) -> f64 {
    let classes = preds.first().map_or(2, |p| p.class_probs.len());
    let flat: Vec<f64> = preds
        .iter()
        .flat_map(|p| p.class_probs.iter().copied())
        .collect();
    loss_rpc_entropy(&flat, classes, rpn_fg, lam).value
}

/// Classifier foreground probability, `1 - p_background`.
pub fn fg_prob_from_rpc(class_probs: &[f64]) -> f64 {
    (1.0 - class_probs[0]).clamp(0.0, 1.0)
}

pub fn discrepancy(s_cls_fg: f64, s_rpn_fg: f64) -> f64 {
    check_unit("s_cls_fg", s_cls_fg);
    check_unit("s_rpn_fg", s_rpn_fg);
    (s_cls_fg - s_rpn_fg).abs()
}

/// `(2 · min(a, 1-a, b, 1-b))^λ` and its partial derivatives in `a` and `b`.
fn mcd_weight(a: f64, b: f64, lam: f64) -> (f64, f64, f64) {
    let candidates = [
        (a, 1.0, 0.0),
        (1.0 - a, -1.0, 0.0),
        (b, 0.0, 1.0),
        (1.0 - b, 0.0, -1.0),
    ];
    let (m, da, db) =
        candidates
            .into_iter()
            .fold(candidates[0], |best, c| if c.0 < best.0 { c } else { best });
    let base = 2.0 * m;
    let value = base.powf(lam);
    let dbase = if base == 0.0 {
        if lam > 1.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        2.0 * lam * base.powf(lam - 1.0)
    };
    (value, dbase * da, dbase * db)
}

pub fn weight_mcd(s_cls_fg: f64, s_rpn_fg: f64, lam: f64) -> f64 {
    check_unit("s_cls_fg", s_cls_fg);
    check_unit("s_rpn_fg", s_rpn_fg);
    check_lambda(lam);
    mcd_weight(s_cls_fg, s_rpn_fg, lam).0
}

/// Mean over ROIs of `weight_mcd · discrepancy` between the classifier
/// foreground probability and the RPN score of the ROI's anchor. The
/// gradient includes the path through the weight.
pub fn loss_mcd(class_probs: &[f64], classes: usize, rpn_fg: &[f64], lam: f64) -> HeadLoss {
    check_lambda(lam);
    let mut out = HeadLoss::zero(class_probs.len(), rpn_fg.len());
    if rpn_fg.is_empty() {
        return out;
    }
    let norm = 1.0 / rpn_fg.len() as f64;
    for (r, p) in rows(class_probs, classes, rpn_fg).enumerate() {
        let a = fg_prob_from_rpc(p);
        let b = rpn_fg[r];
        let d = discrepancy(a, b);
        let (w, dwa, dwb) = mcd_weight(a, b, lam);
        let sign = (a - b).signum() * f64::from(a != b);
        out.value += norm * w * d;
        let da = norm * (dwa * d + w * sign);
        out.d_rpn_fg[r] = norm * (dwb * d - w * sign);
        // a = 1 - p_bg
        out.d_class_probs[r * classes] = -da;
    }
    out
}

pub fn loss_mcd_on(preds: &[RoiPrediction], rpn_fg: &[f64], lam: f64) -> f64 {
    let classes = preds.first().map_or(2, |p| p.class_probs.len());
    let flat: Vec<f64> = preds
        .iter()
        .flat_map(|p| p.class_probs.iter().copied())
        .collect();
    loss_mcd(&flat, classes, rpn_fg, lam).value
}

/// Per-cell discriminator output in `[0, 1]`: 1 = target domain, 0 = source.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMap {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
}

/// RPN foreground map, `channels x height x width`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ForegroundMap {
    pub fn from_rpn(out: &RpnOutput) -> Self {
        let hw = out.height * out.width;
        ForegroundMap {
            channels: out.objectness.len() / hw.max(1),
            height: out.height,
            width: out.width,
            values: out.objectness.clone(),
        }
    }
}

/// Per-channel bilinear resize with half-pixel alignment and border clamping.
pub fn resize_fg_map(f: &ForegroundMap, height: usize, width: usize) -> ForegroundMap {
    if (height, width) == (f.height, f.width) {
        return f.clone();
    }
    let axis = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let x =
                    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let ys = axis(f.height, height);
    let xs = axis(f.width, width);
    let mut values = Vec::with_capacity(f.channels * height * width);
    for c in 0..f.channels {
        let plane = &f.values[c * f.height * f.width..(c + 1) * f.height * f.width];
        let at = |y: usize, x: usize| plane[y * f.width + x];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                values.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
            }
        }
    }
    ForegroundMap {
        channels: f.channels,
        height,
        width,
        values,
    }
}

/// Value and gradients of an adversarial term.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvLoss {
    pub value: f64,
    pub d_domain: Vec<f64>,
    pub d_fg: Vec<f64>,
}

fn adv_loss(domain: &DomainMap, f: &ForegroundMap, target_label: f64) -> AdvLoss {
    assert_eq!(
        (domain.height, domain.width),
        (f.height, f.width),
        "domain map and foreground map must share spatial size"
    );
    let hw = domain.height * domain.width;
    assert_eq!(domain.probs.len(), hw, "domain map size");
    assert_eq!(f.values.len(), f.channels * hw, "foreground map size");
    let norm = 1.0 / hw as f64;
    let mut out = AdvLoss {
        value: 0.0,
        d_domain: vec![0.0; hw],
        d_fg: vec![0.0; f.values.len()],
    };
    for cell in 0..hw {
        let weight: f64 = (0..f.channels).map(|i| f.values[i * hw + cell]).sum();
        let r = domain.probs[cell] - target_label;
        out.value += norm * r * r * weight;
        out.d_domain[cell] = norm * 2.0 * r * weight;
        for i in 0..f.channels {
            out.d_fg[i * hw + cell] = norm * r * r;
        }
    }
    out
}

/// `(1/HW) Σ_wh D_wh² · Σ_i f_i,wh` on source images.
pub fn loss_adv_source(domain: &DomainMap, f_resized: &ForegroundMap) -> AdvLoss {
    adv_loss(domain, f_resized, 0.0)
}

/// `(1/HW) Σ_wh (1 - D_wh)² · Σ_i f_i,wh` on target images.
pub fn loss_adv_target(domain: &DomainMap, f_resized: &ForegroundMap) -> AdvLoss {
    adv_loss(domain, f_resized, 1.0)
}

/// Gradient reversal: identity forward, upstream gradient scaled by `-mu`
/// backward. The tape counterpart is `Graph::reverse_gradient`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grl {
    pub mu: f64,
}

impl Default for Grl {
    fn default() -> Self {
        Grl { mu: 1.0 }
    }
}

impl Grl {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        upstream.iter().map(|g| -self.mu * g).collect()
    }
}

/// High-confidence classifier outputs reused as RPN supervision on target
/// images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabel {
    pub rois: Vec<BBox>,
    pub is_foreground: Vec<bool>,
    /// Score of the detection (foreground) or background probability.
    pub source_confidence: Vec<f64>,
    /// Every detection regardless of confidence. Anchors overlapping one of
    /// these at the negative-match IoU are never labeled background.
    pub protected: Vec<BBox>,
}

impl PseudoLabel {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.is_foreground.iter().filter(|f| **f).count()
    }
}

/// Foreground entries from detections scoring at least `threshold`,
/// background entries from ROIs whose background probability reaches it.
pub fn build_pseudo_label(
    dets: &[Detection],
    bg_rois: &[RoiPrediction],
    threshold: f64,
) -> PseudoLabel {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "threshold must lie in (0, 1]"
    );
    let mut out = PseudoLabel {
        protected: dets.iter().map(|d| d.bbox).collect(),
        ..PseudoLabel::default()
    };
    for d in dets.iter().filter(|d| d.score >= threshold) {
        out.rois.push(d.bbox);
        out.is_foreground.push(true);
        out.source_confidence.push(d.score);
    }
    for p in bg_rois.iter().filter(|p| p.class_probs[0] >= threshold) {
        out.rois.push(p.roi);
        out.is_foreground.push(false);
        out.source_confidence.push(p.class_probs[0]);
    }
    out
}

/// Anchor labels induced by a pseudo label: anchors matched to a foreground
/// entry become positive; anchors a background entry would match as
/// positive become negative unless they overlap a protected box at the
/// negative-match IoU. Everything else is ignored. The second vector holds
/// the pseudo entry behind each labeled anchor.
pub fn pseudo_anchor_labels(
    grid: &AnchorGrid,
    pseudo: &PseudoLabel,
) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
    let split = |fg: bool| -> (Vec<BBox>, Vec<usize>) {
        (0..pseudo.len())
            .filter(|&i| pseudo.is_foreground[i] == fg)
            .map(|i| (pseudo.rois[i], i))
            .unzip()
    };
    let (fg_boxes, fg_idx) = split(true);
    let (bg_boxes, bg_idx) = split(false);
    let thresholds = MatchThresholds::default();
    let mut labels = vec![AnchorLabel::Ignore; grid.len()];
    let mut source = vec![None; grid.len()];
    if !bg_boxes.is_empty() {
        for (a, l) in match_anchors(&grid.anchors, &bg_boxes, thresholds)
            .into_iter()
            .enumerate()
        {
            let near_object = || {
                pseudo
                    .protected
                    .iter()
                    .any(|b| iou(&grid.anchors[a], b) >= thresholds.negative)
            };
            if let AnchorLabel::Positive(j) = l {
                if !near_object() {
                    labels[a] = AnchorLabel::Negative;
                    source[a] = Some(bg_idx[j]);
                }
            }
        }
    }
    if !fg_boxes.is_empty() {
        for (a, l) in match_anchors(&grid.anchors, &fg_boxes, thresholds)
            .into_iter()
            .enumerate()
        {
            if let AnchorLabel::Positive(j) = l {
                labels[a] = AnchorLabel::Positive(fg_idx[j]);
                source[a] = Some(fg_idx[j]);
            }
        }
    }
    (labels, source)
}

/// Anchor minibatch drawn from a pseudo labeling, as in supervised RPN training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorSampling {
    pub batch: usize,
    pub positive_fraction: f64,
}

/// RPN loss against a pseudo label, each labeled anchor scaled by the weight
/// of the pseudo entry it came from; normalized by the labeled anchor count.
pub fn loss_rpn_selftrain_weighted(
    rpn_out: &RpnOutput,
    grid: &AnchorGrid,
    pseudo: &PseudoLabel,
    entry_weights: &[f64],
) -> RpnLoss {
    let (labels, source) = pseudo_anchor_labels(grid, pseudo);
    rpn_loss_on_pseudo(rpn_out, grid, pseudo, entry_weights, &labels, &source)
}

/// Like [`loss_rpn_selftrain_weighted`], but first subsamples the labeled
/// anchors to a minibatch with at most `positive_fraction` positives.
pub fn loss_rpn_selftrain_sampled(
    rpn_out: &RpnOutput,
    grid: &AnchorGrid,
    pseudo: &PseudoLabel,
    entry_weights: &[f64],
    sampling: AnchorSampling,
    rng: &mut impl Rng,
) -> RpnLoss {
    let (mut labels, source) = pseudo_anchor_labels(grid, pseudo);
    subsample_labels(&mut labels, sampling.batch, sampling.positive_fraction, rng);
    rpn_loss_on_pseudo(rpn_out, grid, pseudo, entry_weights, &labels, &source)
}

fn rpn_loss_on_pseudo(
    rpn_out: &RpnOutput,
    grid: &AnchorGrid,
    pseudo: &PseudoLabel,
    entry_weights: &[f64],
    labels: &[AnchorLabel],
    source: &[Option<usize>],
) -> RpnLoss {
    assert_eq!(
        entry_weights.len(),
        pseudo.len(),
        "one weight per pseudo entry"
    );
    let n = rpn_out.objectness.len();
    assert_eq!(n, grid.len(), "RPN output and anchor grid disagree");
    let mut out = RpnLoss {
        value: 0.0,
        objectness_grad: vec![0.0; n],
        deltas_grad: vec![0.0; rpn_out.deltas.len()],
    };
    if pseudo.is_empty() {
        return out;
    }
    let labeled = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    if labeled == 0 {
        return out;
    }
    let coder = BoxCoder::default();
    let norm = 1.0 / labeled as f64;
    for (a, label) in labels.iter().enumerate() {
        let Some(entry) = source[a] else { continue };
        let w = norm * entry_weights[entry];
        if w == 0.0 {
            continue;
        }
        let p = rpn_out.objectness[a];
        match label {
            AnchorLabel::Negative => {
                let (v, d) = neg_log(1.0 - p);
                out.value += w * v;
                out.objectness_grad[a] = -w * d;
            }
            AnchorLabel::Positive(j) => {
                let (v, d) = neg_log(p);
                out.value += w * v;
                out.objectness_grad[a] = w * d;
                let target = coder.encode(&grid.anchors[a], &pseudo.rois[*j]);
                let pred = rpn_out.anchor_deltas(a);
                for k in 0..4 {
                    let (l, dl) = smooth_l1(pred[k] - target[k]);
                    out.value += w * l;
                    out.deltas_grad[rpn_out.delta_index(a, k)] = w * dl;
                }
            }
            AnchorLabel::Ignore => {}
        }
    }
    out
}

/// Pseudo-label RPN loss with one weight shared by every entry.
pub fn loss_rpn_selftrain(
    rpn_out: &RpnOutput,
    grid: &AnchorGrid,
    pseudo: &PseudoLabel,
    conf_weight: f64,
) -> RpnLoss {
    loss_rpn_selftrain_weighted(rpn_out, grid, pseudo, &vec![conf_weight; pseudo.len()])
}
