//! Three-stage training: supervised source pretraining, foreground-weighted
//! adversarial alignment, then the full objective with collaborative
//! self-training and the alternating discrepancy minimax.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    build_pseudo_label, loss_adv_source, loss_adv_target, loss_mcd, loss_rpc_entropy,
    loss_rpn_selftrain_sampled, weight_self_rpc_conf, AnchorSampling, DomainMap, ForegroundMap,
    HeadLoss, PseudoLabel,
};
use crate::detector::anchors::{select_proposals, Proposal};
use crate::detector::losses::{
    rpc_loss, rpc_targets, rpn_loss, rpn_targets, sample_rois, RpcTargets,
};
use crate::detector::{Detector, DetectorConfig, RpcVars, RpnVars};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{Checkpoint, ParamGroup, Sgd};
use crate::scenes::{LabeledDataset, UnlabeledImages};
use crate::seeding::stream;
use crate::tape::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_mcd: f64,
    pub lambda_self: f64,
    pub pseudo_threshold: f64,
    /// Weight pseudo-labelled anchors by the classifier confidence curve
    /// instead of a constant 1.
    pub rpc_conf_weighting: bool,
    pub lr: f64,
    /// Learning rate of the pretraining stage; `lr` when unset.
    pub pretrain_lr: Option<f64>,
    pub momentum: f64,
    pub iters_pretrain: usize,
    pub iters_align: usize,
    pub iters_full: usize,
    pub seed: u64,
    pub grl_mu: f64,
    /// Images per domain per iteration.
    pub batch_size: usize,
    /// Global gradient-norm clip per step; 0 disables it.
    pub clip_grad_norm: f64,
    /// Progress line every this many iterations; 0 is silent.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.05,
            gamma: 0.1,
            lambda_mcd: 2.0,
            lambda_self: 5.0,
            pseudo_threshold: 0.9,
            rpc_conf_weighting: false,
            lr: 0.001,
            pretrain_lr: None,
            momentum: 0.9,
            iters_pretrain: 500,
            iters_align: 1000,
            iters_full: 600,
            seed: 0,
            grl_mu: 1.0,
            batch_size: 1,
            clip_grad_norm: 10.0,
            log_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("grl_mu", self.grl_mu),
            ("momentum", self.momentum),
            ("clip_grad_norm", self.clip_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        for lr in std::iter::once(self.lr).chain(self.pretrain_lr) {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("learning rates must be positive, got {lr}"));
            }
        }
        if !(self.lambda_mcd > 0.0 && self.lambda_self > 0.0) {
            return fail("lambda_mcd and lambda_self must be positive".into());
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return fail(format!(
                "pseudo_threshold must lie in (0, 1], got {}",
                self.pseudo_threshold
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn stage_lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Pretrain => self.pretrain_lr.unwrap_or(self.lr),
            _ => self.lr,
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.clip_grad_norm > 0.0).then_some(self.clip_grad_norm)
    }
}

/// Which adaptation terms are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantFlags {
    /// Local discriminator on every feature cell with uniform weight.
    pub local_align: bool,
    /// Local discriminator weighted by the RPN foreground map.
    pub weighted_align: bool,
    /// Collaborative self-training between RPN and classifier.
    pub cst: bool,
    /// Discrepancy minimax between RPN and classifier.
    pub mcd: bool,
}

impl VariantFlags {
    pub fn validate(&self) -> Result<()> {
        if self.local_align && self.weighted_align {
            return Err(Error::Config(
                "local_align and weighted_align are exclusive alignment modes".into(),
            ));
        }
        Ok(())
    }

    pub fn aligns(&self) -> bool {
        self.local_align || self.weighted_align
    }
}

/// The ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    NaiveLocal,
    WeightedLocal,
    CstOnly,
    McdOnly,
    WeightedCst,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::SourceOnly,
        Variant::NaiveLocal,
        Variant::WeightedLocal,
        Variant::CstOnly,
        Variant::McdOnly,
        Variant::WeightedCst,
        Variant::Full,
    ];

    pub fn flags(self) -> VariantFlags {
        let f = |local_align, weighted_align, cst, mcd| VariantFlags {
            local_align,
            weighted_align,
            cst,
            mcd,
        };
        match self {
            Variant::SourceOnly => f(false, false, false, false),
            Variant::NaiveLocal => f(true, false, false, false),
            Variant::WeightedLocal => f(false, true, false, false),
            Variant::CstOnly => f(false, false, true, false),
            Variant::McdOnly => f(false, false, false, true),
            Variant::WeightedCst => f(false, true, true, false),
            Variant::Full => f(false, true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::NaiveLocal => "naive_local",
            Variant::WeightedLocal => "weighted_local",
            Variant::CstOnly => "cst_only",
            Variant::McdOnly => "mcd_only",
            Variant::WeightedCst => "weighted_cst",
            Variant::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant {name:?}; expected one of {known:?}"
                ))
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Align,
    Full,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Align, Stage::Full];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Align => "align",
            Stage::Full => "full",
        }
    }

    pub fn iterations(self, cfg: &TrainConfig) -> usize {
        match self {
            Stage::Pretrain => cfg.iters_pretrain,
            Stage::Align => cfg.iters_align,
            Stage::Full => cfg.iters_full,
        }
    }
}

/// Named losses of one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub losses: BTreeMap<String, f64>,
}

impl IterationRecord {
    fn new(iteration: usize, stage: Stage) -> Self {
        IterationRecord {
            iteration,
            stage,
            losses: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: &str, v: f64) {
        *self.losses.entry(name.to_string()).or_insert(0.0) += v;
    }

    fn first_non_finite(&self) -> Option<(&str, f64)> {
        self.losses
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-parameter gradient buffers aligned with a `ParamStore`.
type ParamGrads = Vec<Option<Vec<f64>>>;

fn add_grads(acc: &mut ParamGrads, g: ParamGrads, scale: f64) {
    for (slot, g) in acc.iter_mut().zip(g) {
        let Some(g) = g else { continue };
        match slot {
            Some(a) => a.iter_mut().zip(&g).for_each(|(a, v)| *a += scale * v),
            None => *slot = Some(g.into_iter().map(|v| scale * v).collect()),
        }
    }
}

/// Weights applied to the target-domain head terms in one objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetWeights {
    pub rpn_t: f64,
    pub cls_t: f64,
    pub mcd: f64,
}

impl TargetWeights {
    fn is_zero(&self) -> bool {
        self.rpn_t == 0.0 && self.cls_t == 0.0 && self.mcd == 0.0
    }
}

/// Target-domain head terms computed from one forward pass.
#[derive(Clone, Debug)]
pub struct TargetTerms {
    pub proposals: Vec<Proposal>,
    pub pseudo: PseudoLabel,
    pub rpn_t: f64,
    pub cls_t: HeadLoss,
    pub mcd: HeadLoss,
    rpn_t_obj: Vec<f64>,
    rpn_t_deltas: Vec<f64>,
}

/// Domain-image tensors prepared once per run.
struct SourceSample {
    image: Tensor,
    boxes: Vec<BBox>,
    classes: Vec<usize>,
}

/// Owns the detector, the optimizer state and the iteration log for one
/// training run.
pub struct Trainer<'a> {
    pub detector: Detector,
    pub config: TrainConfig,
    pub flags: VariantFlags,
    source: Vec<SourceSample>,
    target: Vec<Tensor>,
    _target_images: &'a UnlabeledImages,
    optimizers: Optimizers,
    iteration: usize,
    pub log: Vec<IterationRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        detector: Detector,
        config: TrainConfig,
        flags: VariantFlags,
        source: &LabeledDataset,
        target: &'a UnlabeledImages,
    ) -> Result<Self> {
        config.validate()?;
        flags.validate()?;
        if source.is_empty() {
            return Err(Error::Config("source training split is empty".into()));
        }
        let source = source
            .images
            .iter()
            .map(|l| SourceSample {
                image: l.image.to_chw(),
                boxes: l.boxes.clone(),
                classes: l.class_ids.clone(),
            })
            .collect();
        let optimizers = Optimizers::new(&detector.params, &config, config.lr);
        Ok(Trainer {
            source,
            target: target.iter().map(|i| i.to_chw()).collect(),
            _target_images: target,
            optimizers,
            detector,
            config,
            flags,
            iteration: 0,
            log: Vec::new(),
        })
    }

    /// Global iteration counter (iterations completed so far).
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Sets the global iteration counter, e.g. after restoring a checkpoint.
    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    fn reset_optimizer(&mut self, stage: Stage) {
        self.optimizers = Optimizers::new(
            &self.detector.params,
            &self.config,
            self.config.stage_lr(stage),
        );
    }

    /// Runs `stage` for its configured iteration count. Optimizer momentum
    /// starts from zero at every stage boundary.
    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        self.reset_optimizer(stage);

        let n = stage.iterations(&self.config);
        for k in 0..n {
            let record = self.iterate(stage)?;
            if self.config.log_interval > 0 && (k + 1) % self.config.log_interval == 0 {
                let summary: Vec<String> = record
                    .losses
                    .iter()
                    .map(|(name, v)| format!("{name}={v:.4}"))
                    .collect();
                log::info!(
                    "[{}] iter {} {}",
                    stage.name(),
                    record.iteration,
                    summary.join(" ")
                );
            }
            self.log.push(record);
        }
        Ok(())
    }

    fn adversarial(&self, stage: Stage) -> bool {
        stage != Stage::Pretrain && self.flags.aligns()
    }

    fn target_weights(&self, stage: Stage) -> TargetWeights {
        if stage != Stage::Full {
            return TargetWeights {
                rpn_t: 0.0,
                cls_t: 0.0,
                mcd: 0.0,
            };
        }
        let cst = if self.flags.cst { 1.0 } else { 0.0 };
        TargetWeights {
            rpn_t: cst * self.config.alpha,
            cls_t: cst * self.config.beta,
            mcd: if self.flags.mcd {
                self.config.gamma
            } else {
                0.0
            },
        }
    }

    fn batch_indices(&self, purpose: &str, n: usize) -> Vec<usize> {
        let mut rng = stream(self.config.seed, purpose, self.iteration as u64);
        (0..self.config.batch_size)
            .map(|_| rng.random_range(0..n))
            .collect()
    }

    /// One training iteration of `stage`; appends nothing to the log.
    pub fn iterate(&mut self, stage: Stage) -> Result<IterationRecord> {
        let mut record = IterationRecord::new(self.iteration, stage);
        let nparams = self.detector.params.len();
        let adversarial = self.adversarial(stage);
        let scale = 1.0 / self.config.batch_size as f64;
        let mut disc_grads: ParamGrads = vec![None; nparams];

        // source step: detection loss, plus the source adversarial term
        let mut grads: ParamGrads = vec![None; nparams];
        for (b, idx) in self
            .batch_indices("source-batch", self.source.len())
            .into_iter()
            .enumerate()
        {
            let rng_index = (self.iteration * self.config.batch_size + b) as u64;
            let (g, losses) = self.source_pass(idx, rng_index, adversarial)?;
            for (k, v) in losses {
                record.add(k, scale * v);
            }
            add_grads(&mut grads, g, scale);
        }
        add_grads(
            &mut disc_grads,
            take_group(&mut grads, &self.detector.params, ParamGroup::Discriminator),
            1.0,
        );
        self.optimizers.source.step(
            &mut self.detector.params,
            &grads,
            &[ParamGroup::Backbone, ParamGroup::Rpn, ParamGroup::Rpc],
        );

        let weights = self.target_weights(stage);
        if !self.target.is_empty() && (adversarial || !weights.is_zero()) {
            let targets = self.batch_indices("target-batch", self.target.len());
            // head step: RPN and classifier maximize the discrepancy while
            // fitting the self-training terms
            if !weights.is_zero() {
                let head = TargetWeights {
                    mcd: -weights.mcd,
                    ..weights
                };
                let mut grads: ParamGrads = vec![None; nparams];
                for (b, &idx) in targets.iter().enumerate() {
                    let rng_index = (self.iteration * self.config.batch_size + b) as u64;
                    let (g, pass) = self.target_pass(idx, rng_index, head, false, true)?;
                    if let Some(t) = pass.terms {
                        let fg = t.pseudo.foreground_count();
                        record.add("l_rpn_t", scale * t.rpn_t);
                        record.add("l_cls_t", scale * t.cls_t.value);
                        record.add("l_mcd", scale * t.mcd.value);
                        record.add("pseudo_fg", scale * fg as f64);
                        record.add("pseudo_bg", scale * (t.pseudo.len() - fg) as f64);
                    }
                    add_grads(&mut grads, g, scale);
                }
                self.optimizers.head.step(
                    &mut self.detector.params,
                    &grads,
                    &[ParamGroup::Rpn, ParamGroup::Rpc],
                );
            }
            // backbone step: minimize the discrepancy and the self-training
            // terms, confuse the discriminator through the reversal layer
            let mut grads: ParamGrads = vec![None; nparams];
            for (b, &idx) in targets.iter().enumerate() {
                let rng_index = (self.iteration * self.config.batch_size + b) as u64;
                let (mut g, pass) =
                    self.target_pass(idx, rng_index, weights, adversarial, false)?;
                add_grads(
                    &mut disc_grads,
                    take_group(&mut g, &self.detector.params, ParamGroup::Discriminator),
                    scale,
                );
                if let Some(adv) = pass.adv {
                    record.add("l_adv_t", scale * adv);
                }
                add_grads(&mut grads, g, scale);
            }
            self.optimizers.backbone.step(
                &mut self.detector.params,
                &grads,
                &[ParamGroup::Backbone],
            );
        }

        if adversarial {
            let l_d = record.losses.get("l_adv_s").copied().unwrap_or(0.0)
                + record.losses.get("l_adv_t").copied().unwrap_or(0.0);
            record.add("l_d", l_d);
            self.optimizers.disc.step(
                &mut self.detector.params,
                &disc_grads,
                &[ParamGroup::Discriminator],
            );
        }

        if let Some((name, v)) = record.first_non_finite() {
            return Err(Error::Divergence {
                stage: stage.name().to_string(),
                iteration: self.iteration,
                detail: format!("{name} = {v}; record {:?}", record.losses),
            });
        }
        self.iteration += 1;
        Ok(record)
    }

    /// Forward/backward of the supervised source objective on one image.
    fn source_pass(
        &self,
        idx: usize,
        rng_index: u64,
        adversarial: bool,
    ) -> Result<(ParamGrads, Vec<(&'static str, f64)>)> {
        let det = &self.detector;
        let cfg = &det.config;
        let sample = &self.source[idx];
        let mut rng = stream(self.config.seed, "source-sampling", rng_index);
        let mut g = Graph::new();
        let feat = det.backbone_graph(&mut g, &sample.image)?;
        let rpn_vars = det.rpn_graph(&mut g, feat);
        let rpn_out = det.rpn_output(&g, rpn_vars);
        let rpn_t = rpn_targets(
            det.grid(),
            &sample.boxes,
            &cfg.rpn_coder(),
            cfg.rpn_batch,
            cfg.rpn_positive_fraction,
            &mut rng,
        );
        let l_rpn = rpn_loss(&rpn_out, &rpn_t);
        let mut terms = vec![g.scalar_fn(
            l_rpn.value,
            vec![
                (rpn_vars.objectness, l_rpn.objectness_grad),
                (rpn_vars.deltas, l_rpn.deltas_grad),
            ],
        )];

        let mut rois: Vec<BBox> = select_proposals(
            &rpn_out,
            det.grid(),
            &cfg.rpn_coder(),
            &cfg.proposal_params(true),
        )
        .into_iter()
        .map(|p| p.bbox)
        .collect();
        rois.extend(sample.boxes.iter().copied());
        let all = rpc_targets(
            &rois,
            &sample.boxes,
            &sample.classes,
            &cfg.rpc_coder(),
            cfg.rpc_fg_iou,
        );
        let picked = sample_rois(&all.labels, cfg.rpc_batch, cfg.rpc_fg_fraction, &mut rng);
        let rois: Vec<BBox> = picked.iter().map(|&i| rois[i]).collect();
        let targets = RpcTargets {
            labels: picked.iter().map(|&i| all.labels[i]).collect(),
            deltas: picked.iter().map(|&i| all.deltas[i]).collect(),
        };
        let mut l_cls = 0.0;
        if let Some(rpc_vars) = det.rpc_graph(&mut g, feat, &rois) {
            let loss = rpc_loss(
                &g.value(rpc_vars.probs).data,
                &g.value(rpc_vars.deltas).data,
                cfg.num_classes_with_bg(),
                &targets,
            );
            l_cls = loss.value;
            terms.push(g.scalar_fn(
                loss.value,
                vec![
                    (rpc_vars.probs, loss.probs_grad),
                    (rpc_vars.deltas, loss.deltas_grad),
                ],
            ));
        }
        let mut losses = vec![
            ("l_rpn", l_rpn.value),
            ("l_cls", l_cls),
            ("l_det", l_rpn.value + l_cls),
        ];
        if adversarial {
            let d = det.discriminator_graph(&mut g, feat, self.config.grl_mu);
            let f = self.alignment_weights(&rpn_out);
            let adv = loss_adv_source(&domain_map(g.value(d)), &f);
            losses.push(("l_adv_s", adv.value));
            terms.push(g.scalar_fn(adv.value, vec![(d, adv.d_domain)]));
        }
        let root = g.weighted_sum(terms.into_iter().map(|t| (t, 1.0)).collect());
        Ok((g.backward(root, det.params.len()).into_params(), losses))
    }

    /// Foreground map used to weight the adversarial loss: the detached RPN
    /// objectness, or a uniform unit weight for naive alignment.
    fn alignment_weights(&self, rpn_out: &crate::detector::RpnOutput) -> ForegroundMap {
        if self.flags.weighted_align {
            ForegroundMap::from_rpn(rpn_out)
        } else {
            ForegroundMap {
                channels: 1,
                height: rpn_out.height,
                width: rpn_out.width,
                values: vec![1.0; rpn_out.height * rpn_out.width],
            }
        }
    }

    /// Forward/backward of a target-domain objective on one image. With
    /// `heads_only` the backbone output is detached.
    fn target_pass(
        &self,
        idx: usize,
        rng_index: u64,
        weights: TargetWeights,
        adversarial: bool,
        heads_only: bool,
    ) -> Result<(ParamGrads, TargetPass)> {
        let det = &self.detector;
        let mut g = Graph::new();
        let mut feat = det.backbone_graph(&mut g, &self.target[idx])?;
        if heads_only {
            feat = g.detach(feat);
        }
        let mut terms = Vec::new();
        let mut out_terms = None;
        let rpn_vars = det.rpn_graph(&mut g, feat);
        if !weights.is_zero() {
            let purpose = if heads_only {
                "target-head-sampling"
            } else {
                "target-backbone-sampling"
            };
            let mut rng = stream(self.config.seed, purpose, rng_index);
            if let Some((t, vars)) =
                target_terms(det, &self.config, &mut g, feat, rpn_vars, &mut rng)
            {
                terms.push(splice_target_terms(&mut g, &t, rpn_vars, vars, weights));
                out_terms = Some(t);
            }
        }
        let mut adv_value = None;
        if adversarial {
            let rpn_out = det.rpn_output(&g, rpn_vars);
            let d = det.discriminator_graph(&mut g, feat, self.config.grl_mu);
            let f = self.alignment_weights(&rpn_out);
            let adv = loss_adv_target(&domain_map(g.value(d)), &f);
            adv_value = Some(adv.value);
            terms.push(g.scalar_fn(adv.value, vec![(d, adv.d_domain)]));
        }
        let grads = if terms.is_empty() {
            vec![None; det.params.len()]
        } else {
            let root = g.weighted_sum(terms.into_iter().map(|t| (t, 1.0)).collect());
            g.backward(root, det.params.len()).into_params()
        };
        Ok((
            grads,
            TargetPass {
                terms: out_terms,
                adv: adv_value,
            },
        ))
    }
}

/// One momentum state per objective, so a step never replays the velocity
/// accumulated by another objective.
struct Optimizers {
    source: Sgd,
    head: Sgd,
    backbone: Sgd,
    disc: Sgd,
}

impl Optimizers {
    fn new(params: &crate::params::ParamStore, config: &TrainConfig, lr: f64) -> Self {
        let sgd = || Sgd::new(params, lr, config.momentum, config.clip());
        Optimizers {
            source: sgd(),
            head: sgd(),
            backbone: sgd(),
            disc: sgd(),
        }
    }
}

/// Values reported by one target pass.
struct TargetPass {
    terms: Option<TargetTerms>,
    adv: Option<f64>,
}

/// Moves the gradients of one parameter group out of `grads`.
fn take_group(
    grads: &mut ParamGrads,
    store: &crate::params::ParamStore,
    group: ParamGroup,
) -> ParamGrads {
    let mut out: ParamGrads = vec![None; grads.len()];
    for (id, slot) in store.ids().zip(grads.iter_mut()) {
        if store.group_of(id) == group {
            out[id.index()] = slot.take();
        }
    }
    out
}

fn domain_map(t: &Tensor) -> DomainMap {
    DomainMap {
        height: t.shape[1],
        width: t.shape[2],
        probs: t.data.clone(),
    }
}

/// Proposals, pseudo labels and the three target head terms for the graph
/// built so far. `None` when no proposal survives.
pub fn target_terms(
    det: &Detector,
    config: &TrainConfig,
    g: &mut Graph,
    feat: Var,
    rpn_vars: RpnVars,
    rng: &mut impl Rng,
) -> Option<(TargetTerms, RpcVars)> {
    let cfg = &det.config;
    let rpn_out = det.rpn_output(g, rpn_vars);
    let proposals = select_proposals(
        &rpn_out,
        det.grid(),
        &cfg.rpn_coder(),
        &cfg.proposal_params(true),
    );
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let rpc_vars = det.rpc_graph(g, feat, &rois)?;
    let predictions = det.rpc_predictions(g, rpc_vars, &rois);
    let detections = det.postprocess(&predictions);
    let pseudo = build_pseudo_label(&detections, &predictions, config.pseudo_threshold);
    let entry_weights: Vec<f64> = if config.rpc_conf_weighting {
        pseudo
            .source_confidence
            .iter()
            .map(|&c| weight_self_rpc_conf(c.clamp(0.0, 1.0), config.lambda_self))
            .collect()
    } else {
        vec![1.0; pseudo.len()]
    };
    let sampling = AnchorSampling {
        batch: cfg.rpn_batch,
        positive_fraction: cfg.rpn_positive_fraction,
    };
    let rpn_t =
        loss_rpn_selftrain_sampled(&rpn_out, det.grid(), &pseudo, &entry_weights, sampling, rng);
    let probs = &g.value(rpc_vars.probs).data;
    let rpn_fg: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    let classes = cfg.num_classes_with_bg();
    let cls_t = loss_rpc_entropy(probs, classes, &rpn_fg, config.lambda_self);
    let mcd = loss_mcd(probs, classes, &rpn_fg, config.lambda_mcd);
    Some((
        TargetTerms {
            proposals,
            pseudo,
            rpn_t: rpn_t.value,
            cls_t,
            mcd,
            rpn_t_obj: rpn_t.objectness_grad,
            rpn_t_deltas: rpn_t.deltas_grad,
        },
        rpc_vars,
    ))
}

/// Adds `w.rpn_t·L_rpn_t + w.cls_t·L_cls_t + w.mcd·L_MCD` to the graph as
/// one scalar node. The entropy weight is held constant; the discrepancy
/// reaches the RPN through the objectness of each ROI's anchor.
pub fn splice_target_terms(
    g: &mut Graph,
    t: &TargetTerms,
    rpn_vars: RpnVars,
    rpc_vars: RpcVars,
    w: TargetWeights,
) -> Var {
    let mut obj: Vec<f64> = t.rpn_t_obj.iter().map(|v| w.rpn_t * v).collect();
    for (r, p) in t.proposals.iter().enumerate() {
        obj[p.anchor] += w.mcd * t.mcd.d_rpn_fg[r];
    }
    let deltas: Vec<f64> = t.rpn_t_deltas.iter().map(|v| w.rpn_t * v).collect();
    let probs: Vec<f64> = t
        .cls_t
        .d_class_probs
        .iter()
        .zip(&t.mcd.d_class_probs)
        .map(|(c, m)| w.cls_t * c + w.mcd * m)
        .collect();
    let rpc_deltas = vec![0.0; g.value(rpc_vars.deltas).len()];
    let value = w.rpn_t * t.rpn_t + w.cls_t * t.cls_t.value + w.mcd * t.mcd.value;
    g.scalar_fn(
        value,
        vec![
            (rpn_vars.objectness, obj),
            (rpn_vars.deltas, deltas),
            (rpc_vars.probs, probs),
            (rpc_vars.deltas, rpc_deltas),
        ],
    )
}

/// Everything a finished run produces.
pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<IterationRecord>,
}

/// Output locations of a pipeline run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("{}.ckpt", stage.name()))
    }

    pub fn stage_log(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("log_{}.jsonl", stage.name()))
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }

    pub fn run_info(&self) -> PathBuf {
        self.dir.join("run.json")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    detector: DetectorConfig,
    train: TrainConfig,
    flags: VariantFlags,
    data: String,
}

pub fn write_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Inputs of a pipeline run.
pub struct PipelineInputs<'a> {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub flags: VariantFlags,
    pub source: &'a LabeledDataset,
    pub target: &'a UnlabeledImages,
    /// Identifies the datasets (e.g. manifest hashes) for resume checks.
    pub data_id: String,
    /// Start from these parameters instead of a fresh initialization; the
    /// pretrain stage is then skipped.
    pub pretrained: Option<Checkpoint>,
}

/// Runs pretrain, align and full in order. With `out`, writes a checkpoint
/// and a loss log after every stage and resumes from completed stages found
/// there.
pub fn run_pipeline(inputs: PipelineInputs<'_>, out: Option<&RunPaths>) -> Result<TrainOutcome> {
    let PipelineInputs {
        detector: det_cfg,
        train,
        flags,
        source,
        target,
        data_id,
        pretrained,
    } = inputs;
    let fingerprint = det_cfg.fingerprint();
    let mut detector = Detector::new(det_cfg.clone(), train.seed)?;
    let mut start_iteration = 0;
    let mut skip_pretrain = false;
    if let Some(ckpt) = pretrained {
        if ckpt.fingerprint != fingerprint {
            return Err(Error::Fingerprint {
                expected: fingerprint,
                found: ckpt.fingerprint,
            });
        }
        detector = Detector::from_params(det_cfg.clone(), ckpt.params)?;
        start_iteration = ckpt.iteration;
        skip_pretrain = true;
    }
    let info = RunInfo {
        detector: det_cfg.clone(),
        train: train.clone(),
        flags,
        data: data_id,
    };
    if let Some(paths) = out {
        fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
        let info_path = paths.run_info();
        if info_path.exists() {
            let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
            let existing: RunInfo =
                serde_json::from_str(&text).map_err(|e| Error::format(&info_path, e))?;
            if existing != info {
                return Err(Error::Config(format!(
                    "{} holds a run with different settings; choose another output directory or use --force",
                    paths.dir.display()
                )));
            }
        } else {
            crate::scenes::write_json(&info_path, &info)?;
        }
    }
    let mut trainer = Trainer::new(detector, train, flags, source, target)?;
    trainer.set_iteration(start_iteration);
    let mut log = Vec::new();
    for stage in Stage::ALL {
        if stage == Stage::Pretrain && skip_pretrain {
            continue;
        }
        if let Some(paths) = out {
            let ckpt_path = paths.checkpoint(stage);
            let log_path = paths.stage_log(stage);
            if ckpt_path.exists() && log_path.exists() {
                let ckpt = Checkpoint::load(&ckpt_path, Some(&fingerprint))?;
                trainer.detector = Detector::from_params(det_cfg.clone(), ckpt.params)?;
                trainer.set_iteration(ckpt.iteration);
                log.extend(read_log(&log_path)?);
                log::info!("resuming after completed stage {}", stage.name());
                continue;
            }
        }
        trainer.log.clear();
        let result = trainer.run_stage(stage);
        if let (Err(_), Some(paths)) = (&result, out) {
            write_log(
                &paths.stage_log(stage).with_extension("partial.jsonl"),
                &trainer.log,
            )?;
        }
        result?;
        if let Some(paths) = out {
            checkpoint_of(&trainer, stage).save(&paths.checkpoint(stage))?;
            write_log(&paths.stage_log(stage), &trainer.log)?;
        }
        log.append(&mut trainer.log);
    }
    if let Some(paths) = out {
        checkpoint_of(&trainer, Stage::Full).save(&paths.final_checkpoint())?;
        write_log(&paths.log(), &log)?;
    }
    Ok(TrainOutcome {
        detector: trainer.detector,
        log,
    })
}

pub fn checkpoint_of(trainer: &Trainer<'_>, stage: Stage) -> Checkpoint {
    Checkpoint {
        fingerprint: trainer.detector.fingerprint(),
        iteration: trainer.iteration(),
        stage: stage.name().to_string(),
        params: trainer.detector.params.clone(),
    }
}

/// Runs only the pretrain stage from a fresh initialization.
pub fn stage_pretrain(
    det_cfg: DetectorConfig,
    train: &TrainConfig,
    source: &LabeledDataset,
) -> Result<(Checkpoint, Vec<IterationRecord>)> {
    let empty = UnlabeledImages::new(Vec::new());
    let detector = Detector::new(det_cfg, train.seed)?;
    let mut trainer = Trainer::new(
        detector,
        train.clone(),
        VariantFlags::default(),
        source,
        &empty,
    )?;
    trainer.run_stage(Stage::Pretrain)?;
    let ckpt = checkpoint_of(&trainer, Stage::Pretrain);
    Ok((ckpt, trainer.log))
}

/// Fraction of discriminator cells classified correctly (source below 0.5,
/// target at or above).
pub fn discriminator_accuracy(det: &Detector, source: &[Tensor], target: &[Tensor]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (images, is_target) in [(source, false), (target, true)] {
        for img in images {
            let mut g = Graph::new();
            let feat = det.backbone_graph(&mut g, img)?;
            let d = det.discriminator_graph(&mut g, feat, 1.0);
            for &p in &g.value(d).data {
                correct += usize::from((p >= 0.5) == is_target);
                total += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// Outcome of one minimax probe on a frozen target batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinimaxProbe {
    pub before: f64,
    pub after_head_step: f64,
    pub after_backbone_step: f64,
}

/// Discrepancy loss of `det` on fixed ROIs (each tied to its anchor).
pub fn mcd_on_rois(
    det: &Detector,
    image: &Tensor,
    proposals: &[Proposal],
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let feat = det.backbone_graph(&mut g, image)?;
    let rpn_vars = det.rpn_graph(&mut g, feat);
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let Some(rpc_vars) = det.rpc_graph(&mut g, feat, &rois) else {
        return Ok(0.0);
    };
    let obj = &g.value(rpn_vars.objectness).data;
    let rpn_fg: Vec<f64> = proposals.iter().map(|p| obj[p.anchor]).collect();
    Ok(loss_mcd(
        &g.value(rpc_vars.probs).data,
        det.config.num_classes_with_bg(),
        &rpn_fg,
        lambda,
    )
    .value)
}

/// From the same starting parameters, takes one plain gradient step on the
/// heads maximizing the discrepancy and, separately, one step on the
/// backbone minimizing it, with the ROIs of the starting model held fixed.
pub fn minimax_probe(det: &Detector, image: &Tensor, lambda: f64, lr: f64) -> Result<MinimaxProbe> {
    let cfg = &det.config;
    let mut g = Graph::new();
    let feat = det.backbone_graph(&mut g, image)?;
    let rpn_vars = det.rpn_graph(&mut g, feat);
    let rpn_out = det.rpn_output(&g, rpn_vars);
    let proposals = select_proposals(
        &rpn_out,
        det.grid(),
        &cfg.rpn_coder(),
        &cfg.proposal_params(true),
    );
    let before = mcd_on_rois(det, image, &proposals, lambda)?;
    let grads = mcd_gradients(det, image, &proposals, lambda)?;

    let mut heads = det.clone();
    let mut opt = Sgd::new(&heads.params, lr, 0.0, None);
    let ascent: ParamGrads = grads
        .iter()
        .map(|g| g.as_ref().map(|v| v.iter().map(|x| -x).collect()))
        .collect();
    opt.step(
        &mut heads.params,
        &ascent,
        &[ParamGroup::Rpn, ParamGroup::Rpc],
    );
    let after_head_step = mcd_on_rois(&heads, image, &proposals, lambda)?;

    let mut backbone = det.clone();
    let mut opt = Sgd::new(&backbone.params, lr, 0.0, None);
    opt.step(&mut backbone.params, &grads, &[ParamGroup::Backbone]);
    let after_backbone_step = mcd_on_rois(&backbone, image, &proposals, lambda)?;
    Ok(MinimaxProbe {
        before,
        after_head_step,
        after_backbone_step,
    })
}

fn mcd_gradients(
    det: &Detector,
    image: &Tensor,
    proposals: &[Proposal],
    lambda: f64,
) -> Result<ParamGrads> {
    let mut g = Graph::new();
    let feat = det.backbone_graph(&mut g, image)?;
    let rpn_vars = det.rpn_graph(&mut g, feat);
    let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let Some(rpc_vars) = det.rpc_graph(&mut g, feat, &rois) else {
        return Ok(vec![None; det.params.len()]);
    };
    let obj = g.value(rpn_vars.objectness).data.clone();
    let rpn_fg: Vec<f64> = proposals.iter().map(|p| obj[p.anchor]).collect();
    let mcd = loss_mcd(
        &g.value(rpc_vars.probs).data,
        det.config.num_classes_with_bg(),
        &rpn_fg,
        lambda,
    );
    let mut d_obj = vec![0.0; obj.len()];
    for (r, p) in proposals.iter().enumerate() {
        d_obj[p.anchor] += mcd.d_rpn_fg[r];
    }
    let root = g.scalar_fn(
        mcd.value,
        vec![
            (rpn_vars.objectness, d_obj),
            (rpc_vars.probs, mcd.d_class_probs),
        ],
    );
    Ok(g.backward(root, det.params.len()).into_params())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::scenes::{build_split, SceneConfig, ShiftParams};

    fn setup() -> (Detector, LabeledDataset, UnlabeledImages) {
        let scene = SceneConfig::default();
        let source = build_split(2, &scene, &ShiftParams::identity(), 10).unwrap();
        let target = build_split(2, &scene, &ShiftParams::default_target(), 20)
            .unwrap()
            .into_unlabeled();
        (
            Detector::new(DetectorConfig::default(), 3).unwrap(),
            source,
            target,
        )
    }

    fn group_grads<'g>(
        det: &'g Detector,
        grads: &'g ParamGrads,
        group: ParamGroup,
    ) -> impl Iterator<Item = (ParamId, &'g Option<Vec<f64>>)> + 'g {
        det.params
            .ids()
            .filter(move |id| det.params.group_of(*id) == group)
            .map(move |id| (id, &grads[id.index()]))
    }

    fn assert_scaled(got: &Option<Vec<f64>>, reference: &Option<Vec<f64>>, scale: f64) {
        let reference = reference.as_ref().expect("reference gradient");
        let got = got.as_ref().expect("gradient");
        let norm = reference
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        for (g, r) in got.iter().zip(reference) {
            assert!((g - scale * r).abs() <= 1e-9 * norm, "{g} vs {}", scale * r);
        }
    }

    #[test]
    fn discrepancy_enters_heads_negated_and_backbone_positive() {
        let (det, source, target) = setup();
        let config = TrainConfig {
            gamma: 0.1,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(
            det.clone(),
            config,
            Variant::McdOnly.flags(),
            &source,
            &target,
        )
        .unwrap();
        let image = target.get(0).to_chw();
        let mut g = Graph::new();
        let feat = det.backbone_graph(&mut g, &image).unwrap();
        let rpn_vars = det.rpn_graph(&mut g, feat);
        let rpn_out = det.rpn_output(&g, rpn_vars);
        let proposals = select_proposals(
            &rpn_out,
            det.grid(),
            &det.config.rpn_coder(),
            &det.config.proposal_params(true),
        );
        let reference = mcd_gradients(&det, &image, &proposals, trainer.config.lambda_mcd).unwrap();

        let mcd_only = |mcd| TargetWeights {
            rpn_t: 0.0,
            cls_t: 0.0,
            mcd,
        };
        let (head, _) = trainer
            .target_pass(0, 0, mcd_only(-0.1), false, true)
            .unwrap();
        for group in [ParamGroup::Rpn, ParamGroup::Rpc] {
            for (id, got) in group_grads(&det, &head, group) {
                if reference[id.index()].is_some() {
                    assert_scaled(got, &reference[id.index()], -0.1);
                }
            }
        }
        for (_, got) in group_grads(&det, &head, ParamGroup::Backbone) {
            assert!(got.as_ref().is_none_or(|v| v.iter().all(|x| *x == 0.0)));
        }
        let (body, _) = trainer
            .target_pass(0, 0, mcd_only(0.1), false, false)
            .unwrap();
        for (id, got) in group_grads(&det, &body, ParamGroup::Backbone) {
            assert_scaled(got, &reference[id.index()], 0.1);
        }
    }

    #[test]
    fn zero_grl_mu_blocks_adversarial_gradient_to_backbone() {
        let (det, source, target) = setup();
        for (mu, expect_zero) in [(0.0, true), (1.0, false)] {
            let config = TrainConfig {
                grl_mu: mu,
                ..TrainConfig::default()
            };
            let trainer = Trainer::new(
                det.clone(),
                config,
                Variant::WeightedLocal.flags(),
                &source,
                &target,
            )
            .unwrap();
            let zero = TargetWeights {
                rpn_t: 0.0,
                cls_t: 0.0,
                mcd: 0.0,
            };
            let (grads, pass) = trainer.target_pass(0, 0, zero, true, false).unwrap();
            assert!(pass.adv.unwrap() > 0.0);
            let backbone_zero = group_grads(&det, &grads, ParamGroup::Backbone)
                .all(|(_, g)| g.as_ref().is_none_or(|v| v.iter().all(|x| *x == 0.0)));
            assert_eq!(backbone_zero, expect_zero, "mu = {mu}");
            let disc_nonzero = group_grads(&det, &grads, ParamGroup::Discriminator)
                .any(|(_, g)| g.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0)));
            assert!(disc_nonzero);
        }
    }

    #[test]
    fn stage_weights_follow_flags() {
        let (det, source, target) = setup();
        let t = Trainer::new(
            det,
            TrainConfig::default(),
            Variant::CstOnly.flags(),
            &source,
            &target,
        )
        .unwrap();
        assert!(t.target_weights(Stage::Align).is_zero());
        let w = t.target_weights(Stage::Full);
        assert_eq!((w.rpn_t, w.cls_t, w.mcd), (0.1, 0.05, 0.0));
        assert!(!t.adversarial(Stage::Full));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (det, source, target) = setup();
        for cfg in [
            TrainConfig {
                alpha: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                pretrain_lr: Some(0.0),
                ..TrainConfig::default()
            },
            TrainConfig {
                pseudo_threshold: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(
                Trainer::new(det.clone(), cfg, VariantFlags::default(), &source, &target).is_err()
            );
        }
    }
}
