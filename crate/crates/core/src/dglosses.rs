//! Domain-generalisation loss terms and the detection losses.
//!
//! Every minimax term is folded into one minimised scalar with gradient
//! reversal: the discriminator or classifier sees the features through a GRL,
//! so one backward pass trains it to predict while pushing the feature
//! extractor the other way. All terms are batch means.

use dgdet_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::detector::RoiTargets;
use crate::error::{Error, Result};
use crate::params::{mlp, Bound};
use crate::types::{OneHotDomain, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GRLConfig {
    pub lambda: f64,
}

impl Default for GRLConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GRLConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("GRL lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// Gradient reversal: identity forward, `-lambda * g` backward.
pub fn grl(g: &mut Graph, x: Var, cfg: GRLConfig) -> Var {
    g.grl(x, cfg.lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::TUNED
    }
}

impl LossWeights {
    /// Weights of the adversarial, instance, consistency, entropy and
    /// stabiliser terms reported as best on the validation sweep.
    pub const TUNED: LossWeights = LossWeights {
        alpha1: 1.0,
        alpha2: 0.1,
        alpha3: 1.0,
        alpha4: 0.001,
        alpha5: 0.05,
    };

    pub const ZERO: LossWeights = LossWeights {
        alpha1: 0.0,
        alpha2: 0.0,
        alpha3: 0.0,
        alpha4: 0.0,
        alpha5: 0.0,
    };

    pub fn from_array(a: [f64; 5]) -> Result<Self> {
        let w = LossWeights {
            alpha1: a[0],
            alpha2: a[1],
            alpha3: a[2],
            alpha4: a[3],
            alpha5: a[4],
        };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.alpha5]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.as_array().iter().enumerate() {
            if !(*a >= 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("alpha{} must be >= 0, got {a}", i + 1)));
            }
        }
        Ok(())
    }
}

/// The seven loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub reg: f64,
    pub dadv: f64,
    pub dins: f64,
    pub cst: f64,
    pub erc: f64,
    pub cel: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 7] = ["cls", "reg", "dadv", "dins", "cst", "erc", "cel"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.cls, self.reg, self.dadv, self.dins, self.cst, self.erc, self.cel]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub reg: f64,
    pub dadv: f64,
    pub dins: f64,
    pub cst: f64,
    pub erc: f64,
    pub cel: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            cls: self.cls,
            reg: self.reg,
            dadv: self.dadv,
            dins: self.dins,
            cst: self.cst,
            erc: self.erc,
            cel: self.cel,
        }
    }
}

/// `cls + reg + a1 dadv + a2 dins + a3 cst + a4 erc + a5 cel`.
pub fn total_loss(c: LossComponents, w: LossWeights) -> Result<LossBundle> {
    for (name, v) in LossComponents::NAMES.iter().zip(c.as_array()) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                context: format!(" (value {v})"),
            });
        }
    }
    w.validate()?;
    let total = c.cls
        + c.reg
        + w.alpha1 * c.dadv
        + w.alpha2 * c.dins
        + w.alpha3 * c.cst
        + w.alpha4 * c.erc
        + w.alpha5 * c.cel;
    Ok(LossBundle {
        cls: c.cls,
        reg: c.reg,
        dadv: c.dadv,
        dins: c.dins,
        cst: c.cst,
        erc: c.erc,
        cel: c.cel,
        total,
    })
}

/// Logits and loss of a domain discriminator.
#[derive(Debug, Clone, Copy)]
pub struct DomainLoss {
    pub loss: Var,
    /// `[rows, N]` discriminator logits.
    pub logits: Var,
}

fn check_domains(domains: &[OneHotDomain], n: usize) -> Result<Vec<usize>> {
    domains
        .iter()
        .map(|d| {
            if d.as_slice().len() != n {
                Err(Error::Dimension(format!(
                    "domain vector of length {} for a {n}-way discriminator",
                    d.as_slice().len()
                )))
            } else {
                Ok(d.index())
            }
        })
        .collect()
}

/// Mean of `-sum_j d_j log p_j` over rows of `logits`.
pub fn domain_nll(g: &mut Graph, logits: Var, domains: &[OneHotDomain]) -> Result<Var> {
    let n = g.value(logits).cols();
    let rows = g.value(logits).rows();
    if rows != domains.len() {
        return Err(Error::Dimension(format!("{rows} rows for {} domain labels", domains.len())));
    }
    if rows == 0 {
        return Err(Error::Empty("no rows for the domain loss"));
    }
    let targets = check_domains(domains, n)?;
    let logp = g.log_softmax(logits);
    Ok(g.weighted_nll(logp, &targets, &vec![1.0 / rows as f64; rows]))
}

/// Largest input row norm seen by a domain discriminator.
pub const DISCRIMINATOR_INPUT_NORM: f64 = 1.0;

/// Domain discriminator logits. Input rows are first projected into the ball
/// of radius [`DISCRIMINATOR_INPUT_NORM`], which keeps the feature extractor
/// from winning the adversarial game by inflating feature scale.
pub fn discriminator(g: &mut Graph, psi: &Bound, x: Var) -> Var {
    let x = g.clip_row_norms(x, DISCRIMINATOR_INPUT_NORM);
    mlp(g, psi, x)
}

/// Image-level adversarial loss: pooled backbone maps pass through the GRL
/// into the image discriminator.
pub fn loss_dadv(g: &mut Graph, psi_img: &Bound, maps: &[Var], domains: &[OneHotDomain], cfg: GRLConfig) -> Result<DomainLoss> {
    if maps.len() != domains.len() {
        return Err(Error::Dimension(format!("{} maps for {} domain labels", maps.len(), domains.len())));
    }
    if maps.is_empty() {
        return Err(Error::Empty("no images for the image-level domain loss"));
    }
    let pooled: Vec<Var> = maps.iter().map(|&m| g.global_avg_pool(m)).collect();
    let x = g.concat_rows(&pooled);
    let x = grl(g, x, cfg);
    let logits = discriminator(g, psi_img, x);
    let loss = domain_nll(g, logits, domains)?;
    Ok(DomainLoss { loss, logits })
}

/// Instance-level adversarial loss over every instance row of the batch.
pub fn loss_dins(g: &mut Graph, psi_ins: &Bound, inst: &[Var], domains: &[OneHotDomain], cfg: GRLConfig) -> Result<DomainLoss> {
    if inst.len() != domains.len() {
        return Err(Error::Dimension(format!("{} instance sets for {} domain labels", inst.len(), domains.len())));
    }
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    for (&x, d) in inst.iter().zip(domains) {
        let r = g.value(x).rows();
        rows.extend(std::iter::repeat(d.clone()).take(r));
        if r > 0 {
            parts.push(x);
        }
    }
    if parts.is_empty() {
        return Err(Error::Empty("no instances in the batch for the instance-level domain loss"));
    }
    let x = g.concat_rows(&parts);
    let x = grl(g, x, cfg);
    let logits = discriminator(g, psi_ins, x);
    let loss = domain_nll(g, logits, &rows)?;
    Ok(DomainLoss { loss, logits })
}

/// Consistency between the image-level domain distribution of each image and
/// the mean of its instance-level distributions: the mean over images of
/// `|| mean_i p_ins_i - p_img ||_2`. `p_img` is `[B, N]`; `p_ins[b]` is
/// `[R_b, N]`. Images without instances are skipped.
pub fn loss_cst(g: &mut Graph, p_img: Var, p_ins: &[Var]) -> Result<Var> {
    let (b, n) = (g.value(p_img).rows(), g.value(p_img).cols());
    if b != p_ins.len() {
        return Err(Error::Dimension(format!("{b} image rows for {} instance sets", p_ins.len())));
    }
    let mut terms = Vec::new();
    for (i, &pi) in p_ins.iter().enumerate() {
        if g.value(pi).cols() != n {
            return Err(Error::Dimension(format!(
                "instance distributions have length {}, image distribution {n}",
                g.value(pi).cols()
            )));
        }
        if g.value(pi).rows() == 0 {
            continue;
        }
        let m = g.mean_rows(pi);
        let row = g.select_rows(p_img, &[i]);
        let d = g.sub(m, row);
        terms.push(g.l2_norm(d));
    }
    if terms.is_empty() {
        return Err(Error::Empty("no instances for the consistency loss"));
    }
    let rows: Vec<Var> = terms.iter().map(|&t| g.reshape(t, &[1, 1])).collect();
    let s = g.concat_rows(&rows);
    Ok(g.mean(s))
}

/// Value-level consistency term for one image.
pub fn consistency(p_img: &ProbVector, p_ins: &[ProbVector]) -> Result<f64> {
    if p_ins.is_empty() {
        return Err(Error::Empty("no instance distributions"));
    }
    let n = p_img.len();
    if p_ins.iter().any(|p| p.len() != n) {
        return Err(Error::Dimension("instance and image distributions differ in length".into()));
    }
    let mut mean = vec![0.0; n];
    for p in p_ins {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v / p_ins.len() as f64;
        }
    }
    Ok(mean
        .iter()
        .zip(p_img.as_slice())
        .map(|(m, q)| (m - q) * (m - q))
        .sum::<f64>()
        .sqrt())
}

/// Instance rows of one sample with their class targets and domain.
#[derive(Debug, Clone)]
pub struct InstanceBatch {
    pub features: Var,
    pub classes: Vec<usize>,
    pub domain: usize,
}

fn bank_head<'a>(bank: &'a [Bound], d: usize) -> Result<&'a Bound> {
    bank.get(d).ok_or(Error::MissingClassifier {
        domain: d,
        available: bank.len(),
    })
}

/// Groups the rows of `samples` by a key, concatenating features and targets.
fn gather(g: &mut Graph, samples: &[&InstanceBatch]) -> Option<(Var, Vec<usize>)> {
    let parts: Vec<Var> = samples
        .iter()
        .filter(|s| !s.classes.is_empty())
        .map(|s| s.features)
        .collect();
    if parts.is_empty() {
        return None;
    }
    let classes = samples.iter().flat_map(|s| s.classes.iter().copied()).collect();
    Some((g.concat_rows(&parts), classes))
}

/// Entropy-regulariser term: each sample's instances are classified by the
/// classifier of its own domain, behind a GRL. With `scope = Some(D)` only
/// domain `D` contributes. Mean over the contributing instances.
pub fn loss_erc(g: &mut Graph, bank: &[Bound], batch: &[InstanceBatch], scope: Option<usize>, cfg: GRLConfig) -> Result<Var> {
    let total: usize = batch
        .iter()
        .filter(|s| scope.map_or(true, |d| s.domain == d))
        .map(|s| s.classes.len())
        .sum();
    if total == 0 {
        return Err(Error::Empty("no instances for the entropy-regulariser loss"));
    }
    let domains: Vec<usize> = match scope {
        Some(d) => vec![d],
        None => (0..bank.len().max(batch.iter().map(|s| s.domain + 1).max().unwrap_or(0))).collect(),
    };
    let mut terms = Vec::new();
    for d in domains {
        let own: Vec<&InstanceBatch> = batch.iter().filter(|s| s.domain == d).collect();
        let Some((x, classes)) = gather(g, &own) else { continue };
        let head = bank_head(bank, d)?;
        let x = grl(g, x, cfg);
        let logits = mlp(g, head, x);
        let logp = g.log_softmax(logits);
        terms.push(g.weighted_nll(logp, &classes, &vec![1.0 / total as f64; classes.len()]));
    }
    Ok(sum_vars(g, &terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CelPhase {
    /// Each classifier fits its own domain on fixed features.
    FitOwnDomain,
    /// Fixed classifiers score the other domains; only the features move.
    AlignTheta,
}

/// Stabiliser term. In [`CelPhase::FitOwnDomain`] features are detached, so
/// no gradient reaches the extractor. In [`CelPhase::AlignTheta`] the
/// classifiers are detached and every classifier `D` scores the instances of
/// every domain `j != D`. `scope = Some(D)` restricts either phase to
/// classifier `D`. Mean over (instance, classifier) pairs.
pub fn loss_cel(g: &mut Graph, bank: &[Bound], batch: &[InstanceBatch], phase: CelPhase, scope: Option<usize>) -> Result<Var> {
    let heads: Vec<usize> = match scope {
        Some(d) => vec![d],
        None => (0..bank.len()).collect(),
    };
    for s in batch {
        if s.domain >= bank.len() {
            return Err(Error::MissingClassifier {
                domain: s.domain,
                available: bank.len(),
            });
        }
    }
    let mut pairs: Vec<(usize, Vec<&InstanceBatch>)> = Vec::new();
    for &d in &heads {
        bank_head(bank, d)?;
        let rows: Vec<&InstanceBatch> = batch
            .iter()
            .filter(|s| match phase {
                CelPhase::FitOwnDomain => s.domain == d,
                CelPhase::AlignTheta => s.domain != d,
            })
            .collect();
        pairs.push((d, rows));
    }
    let total: usize = pairs.iter().flat_map(|(_, r)| r.iter().map(|s| s.classes.len())).sum();
    if total == 0 {
        return Err(Error::Empty("no instances for the stabiliser loss"));
    }
    let mut terms = Vec::new();
    for (d, rows) in pairs {
        let Some((x, classes)) = gather(g, &rows) else { continue };
        let (x, head) = match phase {
            CelPhase::FitOwnDomain => (g.detach(x), bank[d].clone()),
            CelPhase::AlignTheta => (x, bank[d].detached(g)),
        };
        let logits = mlp(g, &head, x);
        let logp = g.log_softmax(logits);
        terms.push(g.weighted_nll(logp, &classes, &vec![1.0 / total as f64; classes.len()]));
    }
    Ok(sum_vars(g, &terms))
}

fn sum_vars(g: &mut Graph, terms: &[Var]) -> Var {
    let mut it = terms.iter().copied();
    let first = it.next().unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    it.fold(first, |acc, t| g.add(acc, t))
}

/// Detection losses on instance rows.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub cls: Var,
    pub reg: Var,
}

/// `cls` is the mean cross-entropy over rows; `reg` is the summed smooth-L1
/// over the deltas of positive rows divided by their count. Without rows or
/// without positives the respective term is a constant zero.
pub fn detection_losses(g: &mut Graph, class_logits: Var, box_deltas: Var, targets: &RoiTargets) -> Result<DetectionLoss> {
    let r = targets.len();
    let (lr, dr) = (g.value(class_logits).rows(), g.value(box_deltas).rows());
    if lr != r || dr != r {
        return Err(Error::Dimension(format!(
            "{lr} class rows and {dr} box rows for {r} targets"
        )));
    }
    if r == 0 {
        let z = g.constant(Tensor::scalar(0.0));
        return Ok(DetectionLoss { cls: z, reg: z });
    }
    let logp = g.log_softmax(class_logits);
    let cls = g.nll_mean(logp, &targets.classes);
    let npos = targets.num_positive();
    let reg = if npos == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let w: Vec<f64> = targets
            .positive
            .iter()
            .map(|&p| if p { 1.0 / npos as f64 } else { 0.0 })
            .collect();
        g.smooth_l1(box_deltas, &targets.deltas, &w)
    };
    Ok(DetectionLoss { cls, reg })
}
