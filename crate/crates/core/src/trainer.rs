//! Alternating training schedule: one main step on the detector and the
//! adversarial discriminators, then for every domain `D` the three updates of
//! the domain-specific classifier banks.

use dgdet_autograd::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{rpn_targets, roi_targets, sample_rois, FeatureDetector, RoiTargets, TinyDetector};
use crate::dglosses::{
    detection_losses, discriminator, loss_cel, loss_cst, loss_dadv, loss_dins, loss_erc, total_loss, CelPhase, GRLConfig,
    InstanceBatch, LossBundle, LossComponents, LossWeights,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DEFAULT_IOU};
use crate::optim::{OptimConfig, Optimizer, OptimizerKind};
use crate::params::{bind, ArchConfig, Bound, Collection, ModelMeta, ModelParams, ParamSet};
use crate::toydata::{balanced_batches, mix_seed, DomainDataset};
use crate::types::{one_hot_domain, DomainSample, OneHotDomain};

/// Negatives kept per image when it has no positive proposal.
pub const MIN_NEGATIVES: usize = 8;

fn default_max_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    2
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_alpha1() -> f64 {
    LossWeights::TUNED.alpha1
}
fn default_alpha2() -> f64 {
    LossWeights::TUNED.alpha2
}
fn default_alpha3() -> f64 {
    LossWeights::TUNED.alpha3
}
fn default_alpha4() -> f64 {
    LossWeights::TUNED.alpha4
}
fn default_alpha5() -> f64 {
    LossWeights::TUNED.alpha5
}
fn default_grl_lambda() -> f64 {
    1.0
}
fn default_patience() -> usize {
    10
}
fn default_val_fraction() -> f64 {
    0.1
}

/// Training configuration as a flat key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Raised to the number of domains when smaller, so every batch spans
    /// all of them.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Defaults to 1e-3 for adamw and 2e-3 for sgd.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default = "default_alpha2")]
    pub alpha2: f64,
    #[serde(default = "default_alpha3")]
    pub alpha3: f64,
    #[serde(default = "default_alpha4")]
    pub alpha4: f64,
    #[serde(default = "default_alpha5")]
    pub alpha5: f64,
    #[serde(default = "default_grl_lambda")]
    pub grl_lambda: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            optimizer: default_optimizer(),
            learning_rate: None,
            weight_decay: default_weight_decay(),
            momentum: default_momentum(),
            alpha1: default_alpha1(),
            alpha2: default_alpha2(),
            alpha3: default_alpha3(),
            alpha4: default_alpha4(),
            alpha5: default_alpha5(),
            grl_lambda: default_grl_lambda(),
            patience: default_patience(),
            seed: 0,
            val_fraction: default_val_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("val_fraction {} is outside [0, 1)", self.val_fraction)));
        }
        let o = self.optim();
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be positive", o.learning_rate)));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        self.weights().validate()?;
        GRLConfig::new(self.grl_lambda)?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            alpha4: self.alpha4,
            alpha5: self.alpha5,
        }
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        [self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5] = w.as_array();
    }

    pub fn grl(&self) -> GRLConfig {
        GRLConfig {
            lambda: self.grl_lambda,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        let base = match self.optimizer {
            OptimizerKind::AdamW => OptimConfig::adamw(),
            OptimizerKind::Sgd => OptimConfig::sgd(),
        };
        OptimConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            ..base
        }
    }
}

/// Mean loss values of one epoch and the validation mAP after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBundle,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,cls,reg,dadv,dins,cst,erc,cel,total,val_map";

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch, l.cls, l.reg, l.dadv, l.dins, l.cst, l.erc, l.cel, l.total, self.val_map
        )
    }
}

/// Loss values of the three inner-loop updates for one domain. A term whose
/// weight is zero is skipped and reported as `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DomainStepLosses {
    pub cel_fit: Option<f64>,
    pub erc: Option<f64>,
    pub cel_align: Option<f64>,
}

struct ImagePass {
    map: Var,
    inst: Var,
    targets: RoiTargets,
}

/// Parameters, optimiser state and the loss configuration of one run.
pub struct Trainer {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub grl: GRLConfig,
    detector: TinyDetector,
    step: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            detector: TinyDetector::new(&params),
            params,
            optimizer: Optimizer::new(config.optim()),
            weights: config.weights(),
            grl: config.grl(),
            step: 0,
            epoch: 0,
        })
    }

    fn context(&self) -> String {
        format!(" at epoch {} step {}", self.epoch, self.step)
    }

    fn with_context(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { component, context } => Error::NonFinite {
                component,
                context: format!("{context}{}", self.context()),
            },
            e => e,
        }
    }

    fn domain_labels(&self, batch: &[&DomainSample]) -> Result<Vec<OneHotDomain>> {
        batch.iter().map(|s| one_hot_domain(s.domain, self.params.num_domains())).collect()
    }

    /// Backbone, proposals plus ground-truth boxes, and the pooled features of
    /// the sampled training boxes.
    fn forward(&self, g: &mut Graph, theta: &Bound, s: &DomainSample) -> Result<(ImagePass, crate::detector::RpnOutput)> {
        let (features, rpn) = self.detector.backbone(g, theta, &s.image)?;
        let mut boxes = self.detector.propose(g, &rpn);
        boxes.extend(s.annotations.iter().map(|a| a.bbox));
        let all = roi_targets(&boxes, &s.annotations);
        let keep = sample_rois(&all, MIN_NEGATIVES);
        let kept: Vec<_> = keep.iter().map(|&i| boxes[i]).collect();
        let inst = self.detector.pool(g, &features, &kept);
        Ok((
            ImagePass {
                map: features.map,
                inst: inst.features,
                targets: all.select(&keep),
            },
            rpn,
        ))
    }

    fn instance_batches(passes: &[ImagePass], batch: &[&DomainSample]) -> Vec<InstanceBatch> {
        passes
            .iter()
            .zip(batch)
            .map(|(p, s)| InstanceBatch {
                features: p.inst,
                classes: p.targets.classes.clone(),
                domain: s.domain.0,
            })
            .collect()
    }

    fn bank(&self, g: &mut Graph, cel: bool, trainable: Option<usize>) -> Result<Vec<Bound>> {
        (0..self.params.num_domains())
            .map(|d| {
                let c = if cel { Collection::Cel(d) } else { Collection::Erc(d) };
                self.params.bind(g, c, trainable == Some(d))
            })
            .collect()
    }

    /// One optimiser step on `cls + reg + a1 dadv + a2 dins + a3 cst` over
    /// theta, phi, beta and both discriminators. A discriminator whose terms
    /// all have zero weight is left alone, so weight decay does not shrink
    /// it. The returned bundle also
    /// carries the current `erc` and `cel` values, which are not optimised
    /// here.
    pub fn step_main(&mut self, batch: &[&DomainSample]) -> Result<LossBundle> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch"));
        }
        let domains = self.domain_labels(batch)?;
        let mut g = Graph::new();
        let theta = self.params.bind(&mut g, Collection::Theta, true)?;
        let phi = self.params.bind(&mut g, Collection::Phi, true)?;
        let beta = self.params.bind(&mut g, Collection::Beta, true)?;
        let psi_img = self.params.bind(&mut g, Collection::PsiImg, true)?;
        let psi_ins = self.params.bind(&mut g, Collection::PsiIns, true)?;

        let mut passes = Vec::with_capacity(batch.len());
        let mut rpn_cls = Vec::with_capacity(batch.len());
        let mut rpn_reg = Vec::with_capacity(batch.len());
        for s in batch {
            let (pass, rpn) = self.forward(&mut g, &theta, s)?;
            let gt: Vec<_> = s.annotations.iter().map(|a| a.bbox).collect();
            let t = rpn_targets(&rpn.anchors, &gt);
            let labels: Vec<usize> = t.labels.iter().map(|&l| usize::from(l == 1)).collect();
            let logp = g.log_softmax(rpn.logits);
            rpn_cls.push(g.weighted_nll(logp, &labels, &t.objectness_weights));
            rpn_reg.push(g.smooth_l1(rpn.deltas, &t.deltas, &t.regression_weights));
            passes.push(pass);
        }
        let scale = 1.0 / batch.len() as f64;
        let rpn_cls = sum(&mut g, &rpn_cls);
        let rpn_cls = g.scale(rpn_cls, scale);
        let rpn_reg = sum(&mut g, &rpn_reg);
        let rpn_reg = g.scale(rpn_reg, scale);

        let parts: Vec<Var> = passes.iter().map(|p| p.inst).collect();
        let all = g.concat_rows(&parts);
        let targets = RoiTargets::concat(&passes.iter().map(|p| p.targets.clone()).collect::<Vec<_>>());
        let logits = self.detector.class_logits(&mut g, &phi, all)?;
        let deltas = self.detector.box_deltas(&mut g, &beta, all)?;
        let det = detection_losses(&mut g, logits, deltas, &targets)?;
        let cls = g.add(det.cls, rpn_cls);
        let reg = g.add(det.reg, rpn_reg);

        let maps: Vec<Var> = passes.iter().map(|p| p.map).collect();
        let dadv = loss_dadv(&mut g, &psi_img, &maps, &domains, self.grl)?;
        let dins = loss_dins(&mut g, &psi_ins, &parts, &domains, self.grl)?;
        let p_img = g.softmax(dadv.logits);
        let p_all = g.softmax(dins.logits);
        let mut p_ins = Vec::with_capacity(passes.len());
        let mut offset = 0;
        for p in &passes {
            let r = p.targets.len();
            let idx: Vec<usize> = (offset..offset + r).collect();
            p_ins.push(g.select_rows(p_all, &idx));
            offset += r;
        }
        let cst = loss_cst(&mut g, p_img, &p_ins)?;

        let inst = Self::instance_batches(&passes, batch);
        let erc_bank = self.bank(&mut g, false, None)?;
        let cel_bank = self.bank(&mut g, true, None)?;
        let erc = loss_erc(&mut g, &erc_bank, &inst, None, self.grl)?;
        let cel_fit = loss_cel(&mut g, &cel_bank, &inst, CelPhase::FitOwnDomain, None)?;
        let cel_align = loss_cel(&mut g, &cel_bank, &inst, CelPhase::AlignTheta, None)?;

        let v = |x: Var| g.value(x).item();
        let components = LossComponents {
            cls: v(cls),
            reg: v(reg),
            dadv: v(dadv.loss),
            dins: v(dins.loss),
            cst: v(cst),
            erc: v(erc),
            cel: v(cel_fit) + v(cel_align),
        };
        let bundle = total_loss(components, self.weights).map_err(|e| self.with_context(e))?;

        let mut root = g.add(cls, reg);
        for (a, term) in [(self.weights.alpha1, dadv.loss), (self.weights.alpha2, dins.loss), (self.weights.alpha3, cst)] {
            if a > 0.0 {
                let t = g.scale(term, a);
                root = g.add(root, t);
            }
        }
        let grads = g.backward(root);
        let w = self.weights;
        let mut stepped = vec![&theta, &phi, &beta];
        if w.alpha1 > 0.0 || w.alpha3 > 0.0 {
            stepped.push(&psi_img);
        }
        if w.alpha2 > 0.0 || w.alpha3 > 0.0 {
            stepped.push(&psi_ins);
        }
        let updates: Vec<(Collection, Vec<Tensor>)> = stepped
            .iter()
            .map(|b| (b.collection, b.gradients(&grads)))
            .collect();
        self.optimizer
            .step(&mut self.params, &updates)
            .map_err(|e| self.with_context(e))?;
        self.step += 1;
        Ok(bundle)
    }

    fn instance_forward(&self, g: &mut Graph, theta: &Bound, batch: &[&DomainSample]) -> Result<Vec<InstanceBatch>> {
        let mut passes = Vec::with_capacity(batch.len());
        for s in batch {
            passes.push(self.forward(g, theta, s)?.0);
        }
        Ok(Self::instance_batches(&passes, batch))
    }

    fn scalar_value(&self, g: &Graph, x: Var, name: &str) -> Result<f64> {
        let v = g.value(x).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.into(),
                context: format!(" (value {v}){}", self.context()),
            });
        }
        Ok(v)
    }

    /// The three inner-loop updates for domain `d`: the stabiliser head of `d`
    /// on its own data with theta fixed, then theta with the entropy
    /// regulariser head of `d`, then theta against the fixed stabiliser head
    /// of `d` on the other domains.
    pub fn step_domain_specific(
        &mut self,
        d: usize,
        own: &[&DomainSample],
        others: &[&DomainSample],
    ) -> Result<DomainStepLosses> {
        let n = self.params.num_domains();
        if d >= n {
            return Err(Error::MissingClassifier { domain: d, available: n });
        }
        if own.is_empty() || own.iter().any(|s| s.domain.0 != d) {
            return Err(Error::Empty("no samples of the domain for its inner-loop updates"));
        }
        if others.is_empty() || others.iter().any(|s| s.domain.0 == d) {
            return Err(Error::Empty("no samples of the other domains for the inner-loop update"));
        }
        let mut out = DomainStepLosses::default();
        if self.weights.alpha5 > 0.0 {
            out.cel_fit = Some(self.fit_stabiliser(d, own)?);
        }
        if self.weights.alpha4 > 0.0 {
            out.erc = Some(self.regularise(d, own)?);
        }
        if self.weights.alpha5 > 0.0 {
            out.cel_align = Some(self.align_theta(d, others)?);
        }
        Ok(out)
    }

    /// Sub-step (a): stabiliser head `d` fits domain `d` with theta fixed.
    pub fn fit_stabiliser(&mut self, d: usize, own: &[&DomainSample]) -> Result<f64> {
        let mut g = Graph::new();
        let theta = self.params.bind(&mut g, Collection::Theta, false)?;
        let bank = self.bank(&mut g, true, Some(d))?;
        let inst = self.instance_forward(&mut g, &theta, own)?;
        let l = loss_cel(&mut g, &bank, &inst, CelPhase::FitOwnDomain, Some(d))?;
        let value = self.scalar_value(&g, l, "cel (fit own domain)")?;
        let root = g.scale(l, self.weights.alpha5);
        let grads = g.backward(root);
        self.optimizer
            .step(&mut self.params, &[(Collection::Cel(d), bank[d].gradients(&grads))])
            .map_err(|e| self.with_context(e))?;
        Ok(value)
    }

    /// Sub-step (b): theta and entropy regulariser head `d`, joined by the
    /// GRL.
    pub fn regularise(&mut self, d: usize, own: &[&DomainSample]) -> Result<f64> {
        let mut g = Graph::new();
        let theta = self.params.bind(&mut g, Collection::Theta, true)?;
        let bank = self.bank(&mut g, false, Some(d))?;
        let inst = self.instance_forward(&mut g, &theta, own)?;
        let l = loss_erc(&mut g, &bank, &inst, Some(d), self.grl)?;
        let value = self.scalar_value(&g, l, "erc")?;
        let root = g.scale(l, self.weights.alpha4);
        let grads = g.backward(root);
        self.optimizer
            .step(
                &mut self.params,
                &[
                    (Collection::Theta, theta.gradients(&grads)),
                    (Collection::Erc(d), bank[d].gradients(&grads)),
                ],
            )
            .map_err(|e| self.with_context(e))?;
        Ok(value)
    }

    /// Sub-step (c): theta alone, scored by the fixed stabiliser head `d` on
    /// the other domains.
    pub fn align_theta(&mut self, d: usize, others: &[&DomainSample]) -> Result<f64> {
        let mut g = Graph::new();
        let theta = self.params.bind(&mut g, Collection::Theta, true)?;
        let bank = self.bank(&mut g, true, None)?;
        let inst = self.instance_forward(&mut g, &theta, others)?;
        let l = loss_cel(&mut g, &bank, &inst, CelPhase::AlignTheta, Some(d))?;
        let value = self.scalar_value(&g, l, "cel (align theta)")?;
        let root = g.scale(l, self.weights.alpha5);
        let grads = g.backward(root);
        self.optimizer
            .step(&mut self.params, &[(Collection::Theta, theta.gradients(&grads))])
            .map_err(|e| self.with_context(e))?;
        Ok(value)
    }

    /// One iteration: the main step on the whole batch, then the inner loop
    /// over every domain present in it.
    pub fn iteration(&mut self, batch: &[&DomainSample]) -> Result<LossBundle> {
        let bundle = self.step_main(batch)?;
        if self.weights.alpha4 > 0.0 || self.weights.alpha5 > 0.0 {
            for d in 0..self.params.num_domains() {
                let own: Vec<&DomainSample> = batch.iter().copied().filter(|s| s.domain.0 == d).collect();
                let others: Vec<&DomainSample> = batch.iter().copied().filter(|s| s.domain.0 != d).collect();
                if own.is_empty() {
                    return Err(Error::Empty("batch is missing a domain"));
                }
                self.step_domain_specific(d, &own, &others)?;
            }
        }
        Ok(bundle)
    }
}

fn sum(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

fn mean_bundle(bundles: &[LossBundle], w: LossWeights) -> Result<LossBundle> {
    let mut acc = [0.0; 7];
    for b in bundles {
        for (a, v) in acc.iter_mut().zip(b.components().as_array()) {
            *a += v / bundles.len() as f64;
        }
    }
    let [cls, reg, dadv, dins, cst, erc, cel] = acc;
    total_loss(
        LossComponents {
            cls,
            reg,
            dadv,
            dins,
            cst,
            erc,
            cel,
        },
        w,
    )
}

pub fn model_meta(ds: &DomainDataset) -> ModelMeta {
    ModelMeta {
        class_names: ds.class_names.clone(),
        domain_names: ds.domain_names.clone(),
        height: ds.height,
        width: ds.width,
    }
}

/// Runs [`train_with`] with the default architecture and no observer.
pub fn train(config: &TrainConfig, dataset: &DomainDataset) -> Result<(ModelParams, TrainHistory)> {
    train_with(config, dataset, &ArchConfig::default(), |_| {})
}

/// Trains on the source domains of `dataset`, holding out `val_fraction` of
/// each domain for early stopping on mAP. Returns the parameters of the best
/// validation epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &DomainDataset,
    arch: &ArchConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let n = dataset.num_domains();
    if n < 2 {
        return Err(Error::TooFewDomains(n));
    }
    if let Some(d) = dataset.domains.iter().position(|s| s.is_empty()) {
        return Err(Error::InvalidSpec(format!("source domain {d} has no samples")));
    }
    let (train_ds, val_ds) = dataset.split(config.val_fraction, config.seed);
    let params = ModelParams::init(arch.clone(), model_meta(dataset), config.seed);
    let mut trainer = Trainer::new(params, config)?;
    let batch_size = config.batch_size.max(n);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 1..=config.max_epochs {
        trainer.epoch = epoch;
        let plan = balanced_batches(&train_ds, batch_size, mix_seed(config.seed, 0x7a1e, epoch as u64))?;
        let mut bundles = Vec::with_capacity(plan.batches.len());
        for refs in plan {
            let batch: Vec<&DomainSample> = refs.iter().map(|&r| train_ds.get(r)).collect();
            bundles.push(trainer.iteration(&batch)?);
        }
        let losses = mean_bundle(&bundles, trainer.weights).map_err(|e| trainer.with_context(e))?;
        let val_map = if val_ds.is_empty() {
            0.0
        } else {
            evaluate(&trainer.params, &val_ds, DEFAULT_IOU)?.map
        };
        let record = EpochRecord { epoch, losses, val_map };
        observer(&record);
        history.records.push(record);
        if best.as_ref().map_or(true, |(m, _)| val_map > *m) {
            best = Some((val_map, trainer.params.clone()));
            history.best_epoch = epoch;
        }
        if epoch - history.best_epoch >= config.patience {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (_, params) = best.expect("at least one epoch ran");
    Ok((params, history))
}

/// Globally pooled backbone features of every sample, one row each.
pub fn image_features(params: &ModelParams, samples: &[&DomainSample]) -> Result<Vec<Vec<f64>>> {
    let det = TinyDetector::new(params);
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let theta = params.bind(&mut g, Collection::Theta, false)?;
            let (f, _) = det.backbone(&mut g, &theta, &s.image)?;
            let p = g.global_avg_pool(f.map);
            Ok(g.value(p).data().to_vec())
        })
        .collect()
}

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::new(&[rows.len(), c], rows.concat())
}

fn accuracy_of(head: &ParamSet, coll: Collection, features: &[Vec<f64>], domains: &[usize]) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let mut g = Graph::new();
    let h = bind(&mut g, head, coll, false);
    let x = g.constant(rows_tensor(features));
    let logits = discriminator(&mut g, &h, x);
    let l = g.value(logits);
    let correct = (0..l.rows())
        .filter(|&r| {
            let row = l.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == domains[r]
        })
        .count();
    correct as f64 / l.rows() as f64
}

/// Accuracy of the image-level domain discriminator on pooled features.
pub fn discriminator_accuracy(params: &ModelParams, features: &[Vec<f64>], domains: &[usize]) -> f64 {
    accuracy_of(&params.discriminators.psi_img, Collection::PsiImg, features, domains)
}

/// Fresh two-layer domain classifier fitted on pooled features with
/// full-batch Adam.
#[derive(Debug, Clone)]
pub struct DomainProbe {
    head: ParamSet,
}

impl DomainProbe {
    pub fn fit(features: &[Vec<f64>], domains: &[usize], num_domains: usize, hidden: usize, steps: usize, seed: u64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("no features to fit the probe on"));
        }
        let dim = features[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f64> {
            use rand_distr::{Distribution, Normal};
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let mut head = ParamSet::new();
        head.push("fc1.w", Tensor::new(&[dim, hidden], normal(dim * hidden, (2.0 / dim as f64).sqrt())));
        head.push("fc1.b", Tensor::zeros(&[1, hidden]));
        head.push("fc2.w", Tensor::new(&[hidden, num_domains], normal(hidden * num_domains, (1.0 / hidden as f64).sqrt())));
        head.push("fc2.b", Tensor::zeros(&[1, num_domains]));

        let x = rows_tensor(features);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            learning_rate: 1e-2,
            ..OptimConfig::adamw()
        };
        let mut moments: Vec<(Vec<f64>, Vec<f64>)> = head.tensors().iter().map(|t| (vec![0.0; t.len()], vec![0.0; t.len()])).collect();
        let w = vec![1.0 / features.len() as f64; features.len()];
        for t in 1..=steps as i32 {
            let mut g = Graph::new();
            let h = bind(&mut g, &head, Collection::PsiImg, true);
            let xv = g.constant(x.clone());
            let logits = discriminator(&mut g, &h, xv);
            let logp = g.log_softmax(logits);
            let loss = g.weighted_nll(logp, domains, &w);
            let grads = g.backward(loss);
            let gs = h.gradients(&grads);
            for ((p, gt), (m, v)) in head.tensors_mut().iter_mut().zip(&gs).zip(moments.iter_mut()) {
                let c1 = 1.0 - cfg.momentum.powi(t);
                let c2 = 1.0 - 0.999f64.powi(t);
                for (j, pd) in p.data_mut().iter_mut().enumerate() {
                    let gj = gt.data()[j];
                    m[j] = cfg.momentum * m[j] + (1.0 - cfg.momentum) * gj;
                    v[j] = 0.999 * v[j] + 0.001 * gj * gj;
                    *pd -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8);
                }
            }
        }
        Ok(Self { head })
    }

    pub fn accuracy(&self, features: &[Vec<f64>], domains: &[usize]) -> f64 {
        accuracy_of(&self.head, Collection::PsiImg, features, domains)
    }
}

/// Shuffled copy of `items` under `seed`.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{render_toy_dataset, ToySpec};

    fn tiny_data(per_domain: usize, seed: u64) -> DomainDataset {
        let spec = ToySpec {
            images_per_domain: per_domain,
            image_size: (32, 32),
            object_size: (10, 14),
            objects_per_image: (1, 2),
            ..ToySpec::new(seed)
        };
        render_toy_dataset(&spec).unwrap().source
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            backbone_channels: vec![8, 8, 8, 8],
            head_hidden: 16,
            img_disc_hidden: 8,
            ins_disc_hidden: 16,
            num_proposals: 16,
            ..ArchConfig::default()
        }
    }

    fn trainer(ds: &DomainDataset, cfg: &TrainConfig) -> Trainer {
        let p = ModelParams::init(small_arch(), model_meta(ds), cfg.seed);
        Trainer::new(p, cfg).unwrap()
    }

    fn batch(ds: &DomainDataset) -> Vec<&DomainSample> {
        (0..ds.num_domains()).map(|d| &ds.domains[d][0]).collect()
    }

    fn changed(a: &ModelParams, b: &ModelParams) -> Vec<Collection> {
        a.collections()
            .into_iter()
            .filter(|&c| a.collection(c).unwrap() != b.collection(c).unwrap())
            .collect()
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c: TrainConfig = toml_like("seed = 3");
        assert_eq!(c.batch_size, 2);
        assert_eq!(c.patience, 10);
        assert_eq!(c.weights(), LossWeights::TUNED);
        assert_eq!(c.optim().learning_rate, 1e-3);
        let s: TrainConfig = toml_like("optimizer = \"sgd\"");
        assert_eq!(s.optim().learning_rate, 2e-3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"nope": 1}"#).is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toml_like(line: &str) -> TrainConfig {
        let (k, v) = line.split_once(" = ").unwrap();
        serde_json::from_str(&format!("{{\"{k}\": {v}}}")).unwrap()
    }

    #[test]
    fn main_step_footprint() {
        let ds = tiny_data(2, 1);
        let mut t = trainer(&ds, &TrainConfig::default());
        let before = t.params.clone();
        let b = t.step_main(&batch(&ds)).unwrap();
        let moved = changed(&before, &t.params);
        assert_eq!(
            moved,
            vec![Collection::Theta, Collection::Phi, Collection::Beta, Collection::PsiImg, Collection::PsiIns]
        );
        assert!(b.total.is_finite());
    }

    #[test]
    fn sub_step_footprints() {
        let ds = tiny_data(2, 3);
        let mut t = trainer(&ds, &TrainConfig::default());
        let all = batch(&ds);
        for d in 0..ds.num_domains() {
            let own: Vec<_> = all.iter().copied().filter(|s| s.domain.0 == d).collect();
            let others: Vec<_> = all.iter().copied().filter(|s| s.domain.0 != d).collect();
            let snap = t.params.clone();
            t.fit_stabiliser(d, &own).unwrap();
            assert_eq!(changed(&snap, &t.params), vec![Collection::Cel(d)]);
            let snap = t.params.clone();
            t.regularise(d, &own).unwrap();
            assert_eq!(changed(&snap, &t.params), vec![Collection::Theta, Collection::Erc(d)]);
            let snap = t.params.clone();
            t.align_theta(d, &others).unwrap();
            assert_eq!(changed(&snap, &t.params), vec![Collection::Theta]);
        }
    }

    #[test]
    fn skipped_sub_steps_report_none() {
        let ds = tiny_data(2, 3);
        let mut t = trainer(&ds, &TrainConfig::default());
        t.weights.alpha4 = 0.0;
        let all = batch(&ds);
        let before = t.params.clone();
        let r = t.step_domain_specific(1, &all[1..2], &[all[0], all[2]]).unwrap();
        assert!(r.cel_fit.is_some() && r.cel_align.is_some() && r.erc.is_none());
        assert_eq!(changed(&before, &t.params), vec![Collection::Theta, Collection::Cel(1)]);
    }

    #[test]
    fn inner_loop_touches_each_stabiliser_once() {
        let ds = tiny_data(2, 4);
        let mut t = trainer(&ds, &TrainConfig::default());
        let before = t.params.clone();
        t.iteration(&batch(&ds)).unwrap();
        for d in 0..ds.num_domains() {
            assert_eq!(t.optimizer.steps(Collection::Cel(d)), 1);
            assert_eq!(t.optimizer.steps(Collection::Erc(d)), 1);
        }
        assert_eq!(changed(&before, &t.params).len(), 5 + 2 * ds.num_domains());
    }

    #[test]
    fn zero_weights_train_only_the_detector() {
        let ds = tiny_data(2, 5);
        let mut cfg = TrainConfig::default();
        cfg.set_weights(LossWeights::ZERO);
        let mut t = trainer(&ds, &cfg);
        let before = t.params.clone();
        t.iteration(&batch(&ds)).unwrap();
        let moved = changed(&before, &t.params);
        assert_eq!(moved, vec![Collection::Theta, Collection::Phi, Collection::Beta]);
    }

    #[test]
    fn main_objective_decreases_on_a_fixed_batch() {
        let ds = tiny_data(2, 6);
        let mut t = trainer(&ds, &TrainConfig::default());
        let b = batch(&ds);
        let w = t.weights;
        let objective = |l: &LossBundle| l.cls + l.reg + w.alpha1 * l.dadv + w.alpha2 * l.dins + w.alpha3 * l.cst;
        let values: Vec<f64> = (0..50).map(|_| objective(&t.step_main(&b).unwrap())).collect();
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let windows: Vec<f64> = values.chunks(10).map(avg).collect();
        for pair in windows.windows(2) {
            assert!(pair[1] < pair[0], "{windows:?}");
        }
    }

    #[test]
    fn missing_domain_data_is_an_error() {
        let ds = tiny_data(2, 7);
        let mut t = trainer(&ds, &TrainConfig::default());
        let all = batch(&ds);
        assert!(t.step_domain_specific(0, &[], &all[1..]).is_err());
        assert!(t.step_domain_specific(0, &all[..1], &[]).is_err());
        assert!(t.step_domain_specific(9, &all[..1], &all[1..]).is_err());
    }

    #[test]
    fn probe_separates_separable_features() {
        let mut f = Vec::new();
        let mut d = Vec::new();
        for i in 0..60 {
            let k = i % 3;
            f.push(vec![k as f64 + 0.01 * i as f64, 1.0 - k as f64]);
            d.push(k);
        }
        let p = DomainProbe::fit(&f, &d, 3, 8, 300, 0).unwrap();
        assert!(p.accuracy(&f, &d) > 0.95);
    }
}
