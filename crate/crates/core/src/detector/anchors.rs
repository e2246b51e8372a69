//! Anchor tiling, anchor/ground-truth matching and proposal selection.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::geometry::{argsort_desc, iou, nms, BBox, BoxCoder};

use super::RpnOutput;

/// Anchors per feature cell.
pub const ANCHORS_PER_CELL: usize = 9;

/// Anchors over a `height x width` feature grid. Index `a * H * W + y * W + x`
/// holds anchor shape `a` (scale-major, then ratio) centered on cell `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    /// `ratios` are height/width.
    pub fn new(
        height: usize,
        width: usize,
        stride: usize,
        scales: &[f64; 3],
        ratios: &[f64; 3],
    ) -> Self {
        let mut anchors = Vec::with_capacity(height * width * ANCHORS_PER_CELL);
        for &s in scales {
            for &r in ratios {
                let (w, h) = (s / r.sqrt(), s * r.sqrt());
                for y in 0..height {
                    for x in 0..width {
                        let cx = (x as f64 + 0.5) * stride as f64;
                        let cy = (y as f64 + 0.5) * stride as f64;
                        anchors.push(BBox::from_center(cx, cy, w, h));
                    }
                }
            }
        }
        AnchorGrid {
            height,
            width,
            stride,
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Feature cell `(y, x)` of an anchor index.
    pub fn cell(&self, index: usize) -> (usize, usize) {
        let c = index % (self.height * self.width);
        (c / self.width, c % self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds {
            positive: 0.7,
            negative: 0.3,
        }
    }
}

/// Labels every anchor against `gt`: positive at IoU >= `positive` or when it
/// is the best anchor of some box (lowest index on ties), negative below
/// `negative`, otherwise ignored.
pub fn match_anchors(anchors: &[BBox], gt: &[BBox], thr: MatchThresholds) -> Vec<AnchorLabel> {
    if gt.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_gt = vec![(0usize, -1.0f64); anchors.len()];
    let mut best_anchor = vec![(usize::MAX, 0.0f64); gt.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(a, g);
            if v > best_gt[i].1 {
                best_gt[i] = (j, v);
            }
            if v > best_anchor[j].1 {
                best_anchor[j] = (i, v);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best_gt
        .iter()
        .map(|&(j, v)| {
            if v >= thr.positive {
                AnchorLabel::Positive(j)
            } else if v < thr.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (j, &(i, v)) in best_anchor.iter().enumerate() {
        if i != usize::MAX && v > 0.0 && !matches!(labels[i], AnchorLabel::Positive(_)) {
            labels[i] = AnchorLabel::Positive(j);
        }
    }
    labels
}

/// Caps the labeled anchors at `batch`, at most `positive_fraction` of them
/// positive; the surplus is turned into `Ignore` at random.
pub fn subsample_labels(
    labels: &mut [AnchorLabel],
    batch: usize,
    positive_fraction: f64,
    rng: &mut impl Rng,
) {
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let max_pos = ((batch as f64) * positive_fraction).floor() as usize;
    if pos.len() > max_pos {
        pos.shuffle(rng);
        for &i in &pos[max_pos..] {
            labels[i] = AnchorLabel::Ignore;
        }
        pos.truncate(max_pos);
    }
    let max_neg = batch - pos.len();
    if neg.len() > max_neg {
        neg.shuffle(rng);
        for &i in &neg[max_neg..] {
            labels[i] = AnchorLabel::Ignore;
        }
    }
}

/// A proposal carries the anchor it was decoded from, so its RPN foreground
/// score can be paired with the classifier output for the same region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub anchor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub k_pre: usize,
    pub k_post: usize,
    pub nms_iou: f64,
    pub min_size: f64,
    pub image_size: f64,
}

/// Decodes every anchor, clips to the image, drops boxes narrower than
/// `min_size`, keeps the `k_pre` best by objectness, applies NMS and returns
/// at most `k_post` proposals by descending score.
pub fn select_proposals(
    out: &RpnOutput,
    grid: &AnchorGrid,
    coder: &BoxCoder,
    params: &ProposalParams,
) -> Vec<Proposal> {
    assert!(params.k_pre >= params.k_post && params.k_post >= 1);
    let mut candidates: Vec<Proposal> = Vec::with_capacity(grid.len());
    for (i, anchor) in grid.anchors.iter().enumerate() {
        let b = coder
            .decode(anchor, &out.anchor_deltas(i))
            .clip(params.image_size, params.image_size);
        if b.width() >= params.min_size && b.height() >= params.min_size {
            candidates.push(Proposal {
                bbox: b,
                score: out.objectness[i],
                anchor: i,
            });
        }
    }
    let scores: Vec<f64> = candidates.iter().map(|p| p.score).collect();
    let top: Vec<Proposal> = argsort_desc(&scores)
        .into_iter()
        .take(params.k_pre)
        .map(|i| candidates[i])
        .collect();
    let boxes: Vec<BBox> = top.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = top.iter().map(|p| p.score).collect();
    let keep = nms(&boxes, &scores, params.nms_iou);
    keep.iter().take(params.k_post).map(|&i| top[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> AnchorGrid {
        AnchorGrid::new(4, 5, 8, &[12.0, 20.0, 32.0], &[0.5, 1.0, 2.0])
    }

    #[test]
    fn anchor_count_and_centers() {
        let g = grid();
        assert_eq!(g.len(), 4 * 5 * 9);
        for (i, a) in g.anchors.iter().enumerate() {
            let (y, x) = g.cell(i);
            let (cx, cy) = a.center();
            assert!((cx - (x as f64 + 0.5) * 8.0).abs() < 1e-9);
            assert!((cy - (y as f64 + 0.5) * 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_gt_makes_everything_negative() {
        let g = grid();
        assert!(match_anchors(&g.anchors, &[], MatchThresholds::default())
            .iter()
            .all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn gt_equal_to_anchor_is_positive() {
        let g = grid();
        let gt = g.anchors[77];
        let labels = match_anchors(&g.anchors, &[gt], MatchThresholds::default());
        assert_eq!(labels[77], AnchorLabel::Positive(0));
    }

    #[test]
    fn toy_matching_agrees_with_brute_force() {
        let anchors = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(2.0, 0.0, 12.0, 10.0),
            BBox::new(5.0, 5.0, 15.0, 15.0),
            BBox::new(30.0, 30.0, 40.0, 40.0),
        ];
        let gt = [BBox::new(1.0, 0.0, 11.0, 10.0)];
        let labels = match_anchors(&anchors, &gt, MatchThresholds::default());
        // brute force: IoUs are 9/11, 9/11, 30/(100+100-30), 0
        let ious: Vec<f64> = anchors.iter().map(|a| iou(a, &gt[0])).collect();
        assert!((ious[0] - 90.0 / 110.0).abs() < 1e-12);
        assert!((ious[2] - 30.0 / 170.0).abs() < 1e-12);
        let expected: Vec<AnchorLabel> = ious
            .iter()
            .map(|&v| {
                if v >= 0.7 {
                    AnchorLabel::Positive(0)
                } else if v < 0.3 {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                }
            })
            .collect();
        assert_eq!(labels, expected);
    }

    #[test]
    fn low_overlap_gt_still_gets_its_best_anchor() {
        let anchors = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 40.0, 40.0),
        ];
        // IoUs 100/441 and 441/1600, both below the negative threshold
        let gt = [BBox::new(0.0, 0.0, 21.0, 21.0)];
        let labels = match_anchors(&anchors, &gt, MatchThresholds::default());
        assert_eq!(
            labels,
            vec![AnchorLabel::Negative, AnchorLabel::Positive(0)]
        );
        // tie: lowest index wins
        let twins = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 0.0, 10.0, 10.0),
        ];
        let labels = match_anchors(
            &twins,
            &[BBox::new(0.0, 0.0, 10.0, 30.0)],
            MatchThresholds::default(),
        );
        assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Ignore]);
    }

    #[test]
    fn subsampling_caps_batch_and_positive_share() {
        let mut labels: Vec<AnchorLabel> = (0..200)
            .map(|i| {
                if i < 50 {
                    AnchorLabel::Positive(0)
                } else {
                    AnchorLabel::Negative
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        subsample_labels(&mut labels, 64, 0.5, &mut rng);
        let pos = labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count();
        let neg = labels
            .iter()
            .filter(|l| **l == AnchorLabel::Negative)
            .count();
        assert_eq!((pos, neg), (32, 32));
    }

    fn rpn_output(g: &AnchorGrid, scores: Vec<f64>) -> RpnOutput {
        RpnOutput {
            height: g.height,
            width: g.width,
            objectness: scores,
            deltas: vec![0.0; g.len() * 4],
        }
    }

    #[test]
    fn best_anchor_is_first_proposal() {
        let g = grid();
        let mut scores = vec![0.1; g.len()];
        scores[100] = 0.99;
        let params = ProposalParams {
            k_pre: 50,
            k_post: 10,
            nms_iou: 0.7,
            min_size: 1.0,
            image_size: 40.0,
        };
        let props = select_proposals(&rpn_output(&g, scores), &g, &BoxCoder::default(), &params);
        assert_eq!(props[0].anchor, 100);
        assert!(props.len() <= 10);
        assert!(props.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
