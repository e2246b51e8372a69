//! Compact two-stage detector: a four-layer convolutional backbone, a region
//! proposal network over a 9-anchor grid, ROI-align pooling and a region
//! classifier, plus the local domain discriminator used for alignment.

pub mod anchors;
pub mod losses;
pub mod roi;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, BoxCoder};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::seeding::stream;
use crate::tape::{roi_align_plan, Graph, Tensor, Var};

use anchors::{select_proposals, AnchorGrid, Proposal, ProposalParams, ANCHORS_PER_CELL};

/// Input pixels per feature cell.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub num_fg_classes: usize,
    /// Output channels of the four backbone convolutions.
    pub channels: [usize; 4],
    pub anchor_scales: [f64; 3],
    /// Height/width ratios.
    pub anchor_ratios: [f64; 3],
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub fc_dim: usize,
    pub disc_hidden: usize,
    pub k_pre: usize,
    pub k_post_train: usize,
    pub k_post_test: usize,
    pub proposal_nms: f64,
    pub min_proposal_size: f64,
    pub detection_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpc_batch: usize,
    pub rpc_fg_fraction: f64,
    pub rpc_fg_iou: f64,
    pub rpc_box_weights: [f64; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            num_fg_classes: 3,
            channels: [16, 32, 48, 48],
            anchor_scales: [12.0, 20.0, 32.0],
            anchor_ratios: [0.5, 1.0, 2.0],
            roi_size: 4,
            roi_sampling: 2,
            fc_dim: 128,
            disc_hidden: 32,
            k_pre: 600,
            k_post_train: 128,
            k_post_test: 64,
            proposal_nms: 0.7,
            min_proposal_size: 2.0,
            detection_nms: 0.5,
            score_threshold: 0.05,
            max_detections: 20,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rpc_batch: 64,
            rpc_fg_fraction: 0.25,
            rpc_fg_iou: 0.5,
            rpc_box_weights: [10.0, 10.0, 5.0, 5.0],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_fg_classes == 0 {
            return fail("num_fg_classes must be at least 1");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(STRIDE) {
            return fail("image_size must be a positive multiple of the backbone stride (8)");
        }
        if self.channels.contains(&0) || self.fc_dim == 0 || self.disc_hidden == 0 {
            return fail("layer widths must be positive");
        }
        if self.roi_size == 0 || self.roi_sampling == 0 {
            return fail("roi_size and roi_sampling must be positive");
        }
        if self.k_post_train == 0 || self.k_post_test == 0 {
            return fail("k_post must be at least 1");
        }
        if self.k_pre < self.k_post_train.max(self.k_post_test) {
            return fail("k_pre must be at least k_post");
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|v| *v <= 0.0)
        {
            return fail("anchor scales and ratios must be positive");
        }
        for (name, v) in [
            ("proposal_nms", self.proposal_nms),
            ("detection_nms", self.detection_nms),
            ("score_threshold", self.score_threshold),
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("rpc_fg_fraction", self.rpc_fg_fraction),
            ("rpc_fg_iou", self.rpc_fg_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / STRIDE
    }

    pub fn num_classes_with_bg(&self) -> usize {
        self.num_fg_classes + 1
    }

    /// Hex sha256 of the canonical JSON form. Checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        let s = self.feature_size();
        AnchorGrid::new(s, s, STRIDE, &self.anchor_scales, &self.anchor_ratios)
    }

    pub fn rpn_coder(&self) -> BoxCoder {
        BoxCoder::default()
    }

    pub fn rpc_coder(&self) -> BoxCoder {
        BoxCoder::new(self.rpc_box_weights)
    }

    pub fn proposal_params(&self, training: bool) -> ProposalParams {
        ProposalParams {
            k_pre: self.k_pre,
            k_post: if training {
                self.k_post_train
            } else {
                self.k_post_test
            },
            nms_iou: self.proposal_nms,
            min_size: self.min_proposal_size,
            image_size: self.image_size as f64,
        }
    }
}

/// Backbone output, `[C, H', W']`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape[2]
    }
}

/// Per-anchor foreground probability and box deltas. Objectness index
/// `a * H * W + cell` lines up with [`AnchorGrid`]; delta `k` of that anchor
/// lives at `(a * 4 + k) * H * W + cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput {
    pub height: usize,
    pub width: usize,
    pub objectness: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RpnOutput {
    pub fn delta_index(&self, anchor: usize, k: usize) -> usize {
        let hw = self.height * self.width;
        (anchor / hw * 4 + k) * hw + anchor % hw
    }

    pub fn anchor_deltas(&self, anchor: usize) -> [f64; 4] {
        std::array::from_fn(|k| self.deltas[self.delta_index(anchor, k)])
    }

    /// Background probability of an anchor.
    pub fn background(&self, anchor: usize) -> f64 {
        1.0 - self.objectness[anchor]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPrediction {
    pub roi: BBox,
    /// Index 0 is background.
    pub class_probs: Vec<f64>,
    /// Class-agnostic refinement shared by every class.
    pub refined_deltas: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// `1 + foreground class id`; 0 is reserved for background.
    pub class_id: usize,
    pub score: f64,
}

/// Graph handles of the RPN outputs: objectness `[9, H', W']` after the
/// sigmoid and deltas `[36, H', W']`.
#[derive(Clone, Copy, Debug)]
pub struct RpnVars {
    pub objectness: Var,
    pub deltas: Var,
}

/// Graph handles of the classifier outputs: probabilities `[R, K + 1]` and
/// deltas `[R, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct RpcVars {
    pub probs: Var,
    pub deltas: Var,
}

/// Everything the detector computes for one image at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub rpn: RpnOutput,
    pub proposals: Vec<Proposal>,
    pub predictions: Vec<RoiPrediction>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layers {
    backbone: [Layer; 4],
    rpn_conv: Layer,
    rpn_cls: Layer,
    rpn_reg: Layer,
    fc: Layer,
    cls: Layer,
    reg: Layer,
    disc_hidden: Layer,
    disc_out: Layer,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    grid: AnchorGrid,
    layers: Layers,
}

impl Detector {
    /// Fresh parameters: He-normal convolutions and hidden layers, small
    /// normal output heads, zero biases.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init", 0);
        let mut params = ParamStore::default();
        let c = config.channels;
        let conv = |params: &mut ParamStore,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    group: ParamGroup,
                    out: usize,
                    inp: usize,
                    k: usize,
                    std: Option<f64>| {
            let fan_in = (inp * k * k) as f64;
            let std = std.unwrap_or((2.0 / fan_in).sqrt());
            let w = normal_tensor(rng, vec![out, inp, k, k], std);
            Layer {
                w: params.add(format!("{name}.weight"), group, w),
                b: params.add(format!("{name}.bias"), group, Tensor::zeros(vec![out])),
            }
        };
        use ParamGroup::*;
        let backbone = [
            conv(
                &mut params,
                &mut rng,
                "backbone.conv1",
                Backbone,
                c[0],
                3,
                3,
                None,
            ),
            conv(
                &mut params,
                &mut rng,
                "backbone.conv2",
                Backbone,
                c[1],
                c[0],
                3,
                None,
            ),
            conv(
                &mut params,
                &mut rng,
                "backbone.conv3",
                Backbone,
                c[2],
                c[1],
                3,
                None,
            ),
            conv(
                &mut params,
                &mut rng,
                "backbone.conv4",
                Backbone,
                c[3],
                c[2],
                3,
                None,
            ),
        ];
        let rpn_conv = conv(&mut params, &mut rng, "rpn.conv", Rpn, c[3], c[3], 3, None);
        let rpn_cls = conv(
            &mut params,
            &mut rng,
            "rpn.cls",
            Rpn,
            ANCHORS_PER_CELL,
            c[3],
            1,
            Some(0.01),
        );
        let rpn_reg = conv(
            &mut params,
            &mut rng,
            "rpn.reg",
            Rpn,
            4 * ANCHORS_PER_CELL,
            c[3],
            1,
            Some(0.01),
        );
        let disc_hidden = conv(
            &mut params,
            &mut rng,
            "disc.hidden",
            Discriminator,
            config.disc_hidden,
            c[3],
            1,
            None,
        );
        let disc_out = conv(
            &mut params,
            &mut rng,
            "disc.out",
            Discriminator,
            1,
            config.disc_hidden,
            1,
            Some(0.01),
        );
        let pooled = c[3] * config.roi_size * config.roi_size;
        let mut linear = |name: &str, out: usize, inp: usize, std: f64| {
            let w = normal_tensor(&mut rng, vec![out, inp], std);
            Layer {
                w: params.add(format!("{name}.weight"), Rpc, w),
                b: params.add(format!("{name}.bias"), Rpc, Tensor::zeros(vec![out])),
            }
        };
        let fc = linear(
            "rpc.fc",
            config.fc_dim,
            pooled,
            (2.0 / pooled as f64).sqrt(),
        );
        let cls = linear("rpc.cls", config.num_classes_with_bg(), config.fc_dim, 0.01);
        let reg = linear("rpc.reg", 4, config.fc_dim, 0.001);
        let grid = config.anchor_grid();
        Ok(Detector {
            config,
            params,
            grid,
            layers: Layers {
                backbone,
                rpn_conv,
                rpn_cls,
                rpn_reg,
                fc,
                cls,
                reg,
                disc_hidden,
                disc_out,
            },
        })
    }

    /// Rebuilds a detector around stored parameters. Names and shapes must
    /// match the layout produced by [`Detector::new`].
    pub fn from_params(config: DetectorConfig, params: ParamStore) -> Result<Self> {
        let mut det = Detector::new(config, 0)?;
        if params.len() != det.params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: expected {}, found {}",
                det.params.len(),
                params.len()
            )));
        }
        for (a, b) in det.params.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape || a.group != b.group {
                return Err(Error::Config(format!(
                    "parameter layout mismatch at {} (found {} {:?})",
                    a.name, b.name, b.tensor.shape
                )));
            }
        }
        det.params = params;
        Ok(det)
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: Layer, stride: usize, pad: usize) -> Var {
        let w = g.param(&self.params, layer.w);
        let b = g.param(&self.params, layer.b);
        g.conv2d(x, w, b, stride, pad)
    }

    fn linear(&self, g: &mut Graph, x: Var, layer: Layer) -> Var {
        let w = g.param(&self.params, layer.w);
        let b = g.param(&self.params, layer.b);
        g.linear(x, w, b)
    }

    /// Input `[3, S, S]` → features `[C, S/8, S/8]`.
    pub fn backbone_graph(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        let s = self.config.image_size;
        if image.shape != [3, s, s] {
            return Err(Error::Config(format!(
                "expected a 3x{s}x{s} image, got {:?}",
                image.shape
            )));
        }
        let mut x = g.constant(image.clone());
        for (i, layer) in self.layers.backbone.iter().enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            x = self.conv(g, x, *layer, stride, 1);
            x = g.relu(x);
        }
        Ok(x)
    }

    pub fn rpn_graph(&self, g: &mut Graph, feat: Var) -> RpnVars {
        let h = self.conv(g, feat, self.layers.rpn_conv, 1, 1);
        let h = g.relu(h);
        let logits = self.conv(g, h, self.layers.rpn_cls, 1, 0);
        RpnVars {
            objectness: g.sigmoid(logits),
            deltas: self.conv(g, h, self.layers.rpn_reg, 1, 0),
        }
    }

    /// `None` when `rois` is empty.
    pub fn rpc_graph(&self, g: &mut Graph, feat: Var, rois: &[BBox]) -> Option<RpcVars> {
        if rois.is_empty() {
            return None;
        }
        let shape = g.value(feat).shape.clone();
        let plans = rois
            .iter()
            .map(|r| {
                roi_align_plan(
                    r,
                    shape[1],
                    shape[2],
                    1.0 / STRIDE as f64,
                    self.config.roi_size,
                    self.config.roi_sampling,
                )
            })
            .collect();
        let pooled = g.roi_align(feat, plans);
        let h = self.linear(g, pooled, self.layers.fc);
        let h = g.relu(h);
        let logits = self.linear(g, h, self.layers.cls);
        Some(RpcVars {
            probs: g.softmax_rows(logits),
            deltas: self.linear(g, h, self.layers.reg),
        })
    }

    /// Per-cell domain probability `[1, H', W']` (1 = target). Features pass
    /// through a gradient reversal of strength `mu` first.
    pub fn discriminator_graph(&self, g: &mut Graph, feat: Var, mu: f64) -> Var {
        let x = g.reverse_gradient(feat, mu);
        let h = self.conv(g, x, self.layers.disc_hidden, 1, 0);
        let h = g.relu(h);
        let logit = self.conv(g, h, self.layers.disc_out, 1, 0);
        g.sigmoid(logit)
    }

    pub fn rpn_output(&self, g: &Graph, vars: RpnVars) -> RpnOutput {
        let t = g.value(vars.objectness);
        RpnOutput {
            height: t.shape[1],
            width: t.shape[2],
            objectness: t.data.clone(),
            deltas: g.value(vars.deltas).data.clone(),
        }
    }

    pub fn rpc_predictions(&self, g: &Graph, vars: RpcVars, rois: &[BBox]) -> Vec<RoiPrediction> {
        let k = self.config.num_classes_with_bg();
        let probs = &g.value(vars.probs).data;
        let deltas = &g.value(vars.deltas).data;
        rois.iter()
            .enumerate()
            .map(|(r, roi)| RoiPrediction {
                roi: *roi,
                class_probs: probs[r * k..(r + 1) * k].to_vec(),
                refined_deltas: std::array::from_fn(|j| deltas[r * 4 + j]),
            })
            .collect()
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let f = self.backbone_graph(&mut g, image)?;
        Ok(FeatureMap {
            values: g.value(f).clone(),
            stride: STRIDE,
        })
    }

    pub fn rpn_forward(&self, feat: &FeatureMap) -> RpnOutput {
        let mut g = Graph::new();
        let f = g.constant(feat.values.clone());
        let vars = self.rpn_graph(&mut g, f);
        self.rpn_output(&g, vars)
    }

    pub fn rpc_forward(&self, feat: &FeatureMap, rois: &[BBox]) -> Vec<RoiPrediction> {
        let mut g = Graph::new();
        let f = g.constant(feat.values.clone());
        match self.rpc_graph(&mut g, f, rois) {
            Some(vars) => self.rpc_predictions(&g, vars, rois),
            None => Vec::new(),
        }
    }

    /// Proposals → classifier → score threshold → per-class NMS.
    pub fn postprocess(&self, predictions: &[RoiPrediction]) -> Vec<Detection> {
        let coder = self.config.rpc_coder();
        let size = self.config.image_size as f64;
        let mut candidates: Vec<Detection> = Vec::new();
        for p in predictions {
            let (class_id, score) = best_foreground(&p.class_probs);
            if score < self.config.score_threshold {
                continue;
            }
            let bbox = coder.decode(&p.roi, &p.refined_deltas).clip(size, size);
            if bbox.is_valid() {
                candidates.push(Detection {
                    bbox,
                    class_id,
                    score,
                });
            }
        }
        let mut kept: Vec<Detection> = Vec::new();
        for class_id in 1..self.config.num_classes_with_bg() {
            let of_class: Vec<Detection> = candidates
                .iter()
                .filter(|d| d.class_id == class_id)
                .copied()
                .collect();
            let boxes: Vec<BBox> = of_class.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = of_class.iter().map(|d| d.score).collect();
            kept.extend(
                nms(&boxes, &scores, self.config.detection_nms)
                    .into_iter()
                    .map(|i| of_class[i]),
            );
        }
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        kept.truncate(self.config.max_detections);
        kept
    }

    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let feat = self.backbone_graph(&mut g, image)?;
        let rpn_vars = self.rpn_graph(&mut g, feat);
        let rpn = self.rpn_output(&g, rpn_vars);
        let proposals = select_proposals(
            &rpn,
            &self.grid,
            &self.config.rpn_coder(),
            &self.config.proposal_params(false),
        );
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let predictions = match self.rpc_graph(&mut g, feat, &rois) {
            Some(vars) => self.rpc_predictions(&g, vars, &rois),
            None => Vec::new(),
        };
        let detections = self.postprocess(&predictions);
        Ok(Inference {
            rpn,
            proposals,
            predictions,
            detections,
        })
    }

    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        Ok(self.infer(image)?.detections)
    }
}

/// Most likely foreground class (as `1 + class id`) and its probability.
pub fn best_foreground(class_probs: &[f64]) -> (usize, f64) {
    let mut best = (1, f64::NEG_INFINITY);
    for (c, &p) in class_probs.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Generator used by tests that need a throwaway RNG.
#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
