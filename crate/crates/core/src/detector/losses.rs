//! Supervised detection losses for both stages, returned together with their
//! gradients with respect to the head outputs.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::{iou, BBox, BoxCoder};

use super::anchors::{match_anchors, subsample_labels, AnchorGrid, AnchorLabel, MatchThresholds};
use super::RpnOutput;

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < SMOOTH_L1_BETA {
        (0.5 * x * x / SMOOTH_L1_BETA, x / SMOOTH_L1_BETA)
    } else {
        (x.abs() - 0.5 * SMOOTH_L1_BETA, x.signum())
    }
}

/// `-ln p` with the clamp applied to the value only, so the gradient
/// `-1/p` stays informative for saturated predictions.
pub fn neg_log(p: f64) -> (f64, f64) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (-c.ln(), -1.0 / c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Regression target per anchor; meaningful for positives only.
    pub deltas: Vec<[f64; 4]>,
}

impl RpnTargets {
    pub fn from_labels(
        grid: &AnchorGrid,
        labels: Vec<AnchorLabel>,
        gt: &[BBox],
        coder: &BoxCoder,
    ) -> Self {
        let deltas = labels
            .iter()
            .zip(&grid.anchors)
            .map(|(l, a)| match l {
                AnchorLabel::Positive(j) => coder.encode(a, &gt[*j]),
                _ => [0.0; 4],
            })
            .collect();
        RpnTargets { labels, deltas }
    }
}

/// Matches anchors to `gt`, subsamples to `batch` and encodes the targets.
pub fn rpn_targets(
    grid: &AnchorGrid,
    gt: &[BBox],
    coder: &BoxCoder,
    batch: usize,
    positive_fraction: f64,
    rng: &mut impl Rng,
) -> RpnTargets {
    let mut labels = match_anchors(&grid.anchors, gt, MatchThresholds::default());
    subsample_labels(&mut labels, batch, positive_fraction, rng);
    RpnTargets::from_labels(grid, labels, gt, coder)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnLoss {
    pub value: f64,
    pub objectness_grad: Vec<f64>,
    pub deltas_grad: Vec<f64>,
}

/// Binary cross-entropy over labeled anchors plus smooth-L1 on positive
/// anchor deltas, both normalized by the number of labeled anchors.
/// Ignored anchors contribute nothing.
pub fn rpn_loss(out: &RpnOutput, targets: &RpnTargets) -> RpnLoss {
    let n = out.objectness.len();
    assert_eq!(targets.labels.len(), n, "rpn_loss: label count mismatch");
    let mut objectness_grad = vec![0.0; n];
    let mut deltas_grad = vec![0.0; out.deltas.len()];
    let sampled = targets
        .labels
        .iter()
        .filter(|l| **l != AnchorLabel::Ignore)
        .count();
    if sampled == 0 {
        return RpnLoss {
            value: 0.0,
            objectness_grad,
            deltas_grad,
        };
    }
    let norm = 1.0 / sampled as f64;
    let mut value = 0.0;
    for (i, label) in targets.labels.iter().enumerate() {
        let p = out.objectness[i];
        match label {
            AnchorLabel::Ignore => {}
            AnchorLabel::Negative => {
                let (v, d) = neg_log(1.0 - p);
                value += norm * v;
                objectness_grad[i] = -norm * d;
            }
            AnchorLabel::Positive(_) => {
                let (v, d) = neg_log(p);
                value += norm * v;
                objectness_grad[i] = norm * d;
                let pred = out.anchor_deltas(i);
                for k in 0..4 {
                    let (l, dl) = smooth_l1(pred[k] - targets.deltas[i][k]);
                    value += norm * l;
                    deltas_grad[out.delta_index(i, k)] = norm * dl;
                }
            }
        }
    }
    RpnLoss {
        value,
        objectness_grad,
        deltas_grad,
    }
}

/// Classifier targets: label 0 is background, `c + 1` is foreground class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpcTargets {
    pub labels: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
}

/// Matches each ROI to its best ground-truth box. IoU `>= fg_iou` (inclusive)
/// is foreground.
pub fn rpc_targets(
    rois: &[BBox],
    gt: &[BBox],
    classes: &[usize],
    coder: &BoxCoder,
    fg_iou: f64,
) -> RpcTargets {
    let mut labels = Vec::with_capacity(rois.len());
    let mut deltas = Vec::with_capacity(rois.len());
    for r in rois {
        let best = gt.iter().enumerate().map(|(j, g)| (j, iou(r, g))).fold(
            None,
            |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            },
        );
        match best {
            Some((j, v)) if v >= fg_iou => {
                labels.push(classes[j] + 1);
                deltas.push(coder.encode(r, &gt[j]));
            }
            _ => {
                labels.push(0);
                deltas.push([0.0; 4]);
            }
        }
    }
    RpcTargets { labels, deltas }
}

/// Picks up to `batch` ROI indices with at most `fg_fraction` foreground.
pub fn sample_rois(
    labels: &[usize],
    batch: usize,
    fg_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    let mut bg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(((batch as f64) * fg_fraction).round() as usize);
    bg.truncate(batch - fg.len());
    let mut picked: Vec<usize> = fg.into_iter().chain(bg).collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpcLoss {
    pub value: f64,
    pub probs_grad: Vec<f64>,
    pub deltas_grad: Vec<f64>,
}

/// Mean cross-entropy over ROIs plus smooth-L1 on the class-agnostic deltas
/// of foreground ROIs (same normalization). `probs` is `[R, classes]`,
/// `deltas` is `[R, 4]`, both row-major.
pub fn rpc_loss(probs: &[f64], deltas: &[f64], classes: usize, targets: &RpcTargets) -> RpcLoss {
    let rois = targets.labels.len();
    assert_eq!(
        probs.len(),
        rois * classes,
        "rpc_loss: probability shape mismatch"
    );
    assert_eq!(deltas.len(), rois * 4, "rpc_loss: delta shape mismatch");
    let mut probs_grad = vec![0.0; probs.len()];
    let mut deltas_grad = vec![0.0; deltas.len()];
    if rois == 0 {
        return RpcLoss {
            value: 0.0,
            probs_grad,
            deltas_grad,
        };
    }
    let norm = 1.0 / rois as f64;
    let mut value = 0.0;
    for (r, &label) in targets.labels.iter().enumerate() {
        let (v, d) = neg_log(probs[r * classes + label]);
        value += norm * v;
        probs_grad[r * classes + label] = norm * d;
        if label > 0 {
            for k in 0..4 {
                let (l, dl) = smooth_l1(deltas[r * 4 + k] - targets.deltas[r][k]);
                value += norm * l;
                deltas_grad[r * 4 + k] = norm * dl;
            }
        }
    }
    RpcLoss {
        value,
        probs_grad,
        deltas_grad,
    }
}
