//! Parameter collections, graph binding, initialisation and checkpoints.
//!
//! Every trainable tensor belongs to exactly one [`Collection`]:
//! the detector's feature extractor (`Theta`), class head (`Phi`) and box head
//! (`Beta`), the two domain discriminators, and the two per-domain classifier
//! banks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use dgdet_autograd::{Gradients, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "dgdet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FRAMEWORK_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Collection {
    Theta,
    Phi,
    Beta,
    PsiImg,
    PsiIns,
    Erc(usize),
    Cel(usize),
}

impl Collection {
    pub fn key(self) -> String {
        match self {
            Collection::Theta => "theta".into(),
            Collection::Phi => "phi".into(),
            Collection::Beta => "beta".into(),
            Collection::PsiImg => "psi_img".into(),
            Collection::PsiIns => "psi_ins".into(),
            Collection::Erc(d) => format!("erc/{d}"),
            Collection::Cel(d) => format!("cel/{d}"),
        }
    }

    pub fn parse(key: &str) -> Option<Self> {
        Some(match key {
            "theta" => Collection::Theta,
            "phi" => Collection::Phi,
            "beta" => Collection::Beta,
            "psi_img" => Collection::PsiImg,
            "psi_ins" => Collection::PsiIns,
            _ => {
                let (bank, d) = key.split_once('/')?;
                let d = d.parse().ok()?;
                match bank {
                    "erc" => Collection::Erc(d),
                    "cel" => Collection::Cel(d),
                    _ => return None,
                }
            }
        })
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A [`ParamSet`] recorded on a graph, either as trainable leaves or as
/// constants.
#[derive(Debug, Clone)]
pub struct Bound {
    pub collection: Collection,
    pub trainable: bool,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("{} has no parameter {name}", self.collection));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Constant copies of every tensor, so no gradient can reach the originals.
    pub fn detached(&self, g: &mut Graph) -> Bound {
        Bound {
            collection: self.collection,
            trainable: false,
            names: self.names.clone(),
            vars: self.vars.iter().map(|&v| g.detach(v)).collect(),
        }
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

pub fn bind(g: &mut Graph, set: &ParamSet, collection: Collection, trainable: bool) -> Bound {
    let vars = set
        .tensors
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    Bound {
        collection,
        trainable,
        names: set.names.clone(),
        vars,
    }
}

/// Two-layer perceptron `x -> relu(x W1 + b1) W2 + b2` over the rows of `x`.
pub fn mlp(g: &mut Graph, p: &Bound, x: Var) -> Var {
    let h = g.linear(x, p.var("fc1.w"), p.var("fc1.b"));
    let h = g.relu(h);
    g.linear(h, p.var("fc2.w"), p.var("fc2.b"))
}

/// Layer sizes and inference settings of the reference detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub anchor_sizes: Vec<f64>,
    pub roi_bins: usize,
    pub head_hidden: usize,
    pub img_disc_hidden: usize,
    pub ins_disc_hidden: usize,
    pub num_proposals: usize,
    pub rpn_nms_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            anchor_sizes: vec![10.0, 15.0, 21.0],
            roi_bins: 3,
            head_hidden: 64,
            img_disc_hidden: 32,
            ins_disc_hidden: 64,
            num_proposals: 64,
            rpn_nms_iou: 0.7,
            nms_iou: 0.5,
            score_threshold: 0.05,
            max_detections: 50,
        }
    }
}

impl ArchConfig {
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("non-empty backbone")
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Width of a pooled instance feature row.
    pub fn instance_dim(&self) -> usize {
        self.feature_channels() * self.roi_bins * self.roi_bins
    }

    pub fn feature_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.backbone_strides
            .iter()
            .fold((height, width), |(h, w), &s| (h.div_ceil(s), w.div_ceil(s)))
    }
}

/// Names recorded alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub height: usize,
    pub width: usize,
}

impl ModelMeta {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub beta: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub psi_img: ParamSet,
    pub psi_ins: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifierBank {
    pub erc: Vec<ParamSet>,
    pub cel: Vec<ParamSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub meta: ModelMeta,
    pub detector: DetectorParams,
    pub discriminators: DiscriminatorParams,
    pub banks: DomainClassifierBank,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let d = Normal::new(0.0, std).expect("positive std");
        Tensor::new(shape, (0..n).map(|_| d.sample(&mut self.rng)).collect())
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    fn conv(&mut self, set: &mut ParamSet, name: &str, cin: usize, cout: usize) {
        set.push(format!("{name}.w"), self.he(&[cout, cin, 3, 3], cin * 9));
        set.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear(&mut self, set: &mut ParamSet, name: &str, din: usize, dout: usize, std: Option<f64>) {
        let w = match std {
            Some(s) => self.normal(&[din, dout], s),
            None => self.he(&[din, dout], din),
        };
        set.push(format!("{name}.w"), w);
        set.push(format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    fn mlp(&mut self, din: usize, hidden: usize, dout: usize, out_std: f64) -> ParamSet {
        let mut s = ParamSet::new();
        self.linear(&mut s, "fc1", din, hidden, None);
        self.linear(&mut s, "fc2", hidden, dout, Some(out_std));
        s
    }
}

impl ModelParams {
    /// Freshly initialised parameters for `meta.num_classes()` classes and
    /// `meta.num_domains()` training domains.
    pub fn init(arch: ArchConfig, meta: ModelMeta, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k1 = meta.num_classes() + 1;
        let n = meta.num_domains();
        let cf = arch.feature_channels();
        let di = arch.instance_dim();
        let a = arch.num_anchors();

        let mut theta = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in arch.backbone_channels.iter().enumerate() {
            init.conv(&mut theta, &format!("conv{}", i + 1), cin, c);
            cin = c;
        }
        init.conv(&mut theta, "rpn.conv", cf, cf);
        init.linear(&mut theta, "rpn.cls", cf, 2 * a, Some(0.01));
        init.linear(&mut theta, "rpn.box", cf, 4 * a, Some(0.01));

        let phi = init.mlp(di, arch.head_hidden, k1, 0.01);
        let beta = init.mlp(di, arch.head_hidden, 4, 0.001);
        let psi_img = init.mlp(cf, arch.img_disc_hidden, n, 0.01);
        let psi_ins = init.mlp(di, arch.ins_disc_hidden, n, 0.01);
        let erc = (0..n).map(|_| init.mlp(di, arch.head_hidden, k1, 0.01)).collect();
        let cel = (0..n).map(|_| init.mlp(di, arch.head_hidden, k1, 0.01)).collect();
        Self {
            arch,
            meta,
            detector: DetectorParams { theta, phi, beta },
            discriminators: DiscriminatorParams { psi_img, psi_ins },
            banks: DomainClassifierBank { erc, cel },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes()
    }

    pub fn num_domains(&self) -> usize {
        self.meta.num_domains()
    }

    pub fn collections(&self) -> Vec<Collection> {
        let mut v = vec![
            Collection::Theta,
            Collection::Phi,
            Collection::Beta,
            Collection::PsiImg,
            Collection::PsiIns,
        ];
        v.extend((0..self.banks.erc.len()).map(Collection::Erc));
        v.extend((0..self.banks.cel.len()).map(Collection::Cel));
        v
    }

    pub fn collection(&self, c: Collection) -> Result<&ParamSet> {
        let n = self.num_domains();
        match c {
            Collection::Theta => Ok(&self.detector.theta),
            Collection::Phi => Ok(&self.detector.phi),
            Collection::Beta => Ok(&self.detector.beta),
            Collection::PsiImg => Ok(&self.discriminators.psi_img),
            Collection::PsiIns => Ok(&self.discriminators.psi_ins),
            Collection::Erc(d) => self.banks.erc.get(d).ok_or(Error::MissingClassifier { domain: d, available: n }),
            Collection::Cel(d) => self.banks.cel.get(d).ok_or(Error::MissingClassifier { domain: d, available: n }),
        }
    }

    pub fn collection_mut(&mut self, c: Collection) -> Result<&mut ParamSet> {
        let n = self.num_domains();
        match c {
            Collection::Theta => Ok(&mut self.detector.theta),
            Collection::Phi => Ok(&mut self.detector.phi),
            Collection::Beta => Ok(&mut self.detector.beta),
            Collection::PsiImg => Ok(&mut self.discriminators.psi_img),
            Collection::PsiIns => Ok(&mut self.discriminators.psi_ins),
            Collection::Erc(d) => self
                .banks
                .erc
                .get_mut(d)
                .ok_or(Error::MissingClassifier { domain: d, available: n }),
            Collection::Cel(d) => self
                .banks
                .cel
                .get_mut(d)
                .ok_or(Error::MissingClassifier { domain: d, available: n }),
        }
    }

    pub fn bind(&self, g: &mut Graph, c: Collection, trainable: bool) -> Result<Bound> {
        Ok(bind(g, self.collection(c)?, c, trainable))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut collections = BTreeMap::new();
        for c in self.collections() {
            let set = self.collection(c)?;
            let layers = set
                .iter()
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect();
            collections.insert(c.key(), layers);
        }
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            framework_version: FRAMEWORK_VERSION.into(),
            meta: self.meta.clone(),
            arch: self.arch.clone(),
            collections,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string(&file).expect("checkpoint serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        // a fresh model fixes the expected layer names and shapes
        let mut model = ModelParams::init(file.arch.clone(), file.meta.clone(), 0);
        let mut stored = file.collections;
        for c in model.collections() {
            let key = c.key();
            let mut layers = stored
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing collection `{key}`")))?;
            let set = model.collection_mut(c)?;
            for i in 0..set.len() {
                let name = set.names[i].clone();
                let st = layers
                    .remove(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing layer `{key}/{name}`")))?;
                let expect = set.tensors[i].shape().to_vec();
                if st.shape != expect || st.data.len() != set.tensors[i].len() {
                    return Err(Error::Checkpoint(format!(
                        "layer `{key}/{name}` has shape {:?}, expected {expect:?}",
                        st.shape
                    )));
                }
                set.tensors[i] = Tensor::new(&st.shape, st.data);
            }
            if let Some(extra) = layers.keys().next() {
                return Err(Error::Checkpoint(format!("unexpected layer `{key}/{extra}`")));
            }
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected collection `{extra}`")));
        }
        Ok(model)
    }

    /// Rejects a checkpoint whose class or domain count differs from the data.
    pub fn check_compatible(&self, num_classes: usize, num_domains: Option<usize>) -> Result<()> {
        if self.num_classes() != num_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint has K = {}, dataset has K = {num_classes}",
                self.num_classes()
            )));
        }
        if let Some(n) = num_domains {
            if self.num_domains() != n {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has N = {}, dataset has N = {n}",
                    self.num_domains()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    framework_version: String,
    meta: ModelMeta,
    arch: ArchConfig,
    collections: BTreeMap<String, BTreeMap<String, StoredTensor>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(k: usize, n: usize) -> ModelMeta {
        ModelMeta {
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
            domain_names: (0..n).map(|d| format!("d{d}")).collect(),
            height: 64,
            width: 64,
        }
    }

    #[test]
    fn collection_keys_round_trip() {
        for c in [
            Collection::Theta,
            Collection::Phi,
            Collection::Beta,
            Collection::PsiImg,
            Collection::PsiIns,
            Collection::Erc(2),
            Collection::Cel(0),
        ] {
            assert_eq!(Collection::parse(&c.key()), Some(c));
        }
        assert_eq!(Collection::parse("erc/x"), None);
    }

    #[test]
    fn collections_are_disjoint() {
        let m = ModelParams::init(ArchConfig::default(), meta(3, 3), 1);
        let cs = m.collections();
        assert_eq!(cs.len(), 5 + 2 * 3);
        // every tensor is owned by exactly one collection: compare addresses
        let mut ptrs = Vec::new();
        for c in &cs {
            for t in m.collection(*c).unwrap().tensors() {
                ptrs.push(t.data().as_ptr() as usize);
            }
        }
        let n = ptrs.len();
        ptrs.sort();
        ptrs.dedup();
        assert_eq!(ptrs.len(), n);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = ModelParams::init(ArchConfig::default(), meta(2, 3), 9);
        m.save(&p).unwrap();
        let back = ModelParams::load(&p).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn compatibility_guard() {
        let m = ModelParams::init(ArchConfig::default(), meta(3, 3), 0);
        assert!(m.check_compatible(3, Some(3)).is_ok());
        assert!(m.check_compatible(3, None).is_ok());
        assert!(m.check_compatible(2, None).is_err());
        assert!(m.check_compatible(3, Some(2)).is_err());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ModelParams::init(ArchConfig::default(), meta(2, 2), 0).save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap().replace("\"psi_ins\"", "\"psi_other\"");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(ModelParams::load(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn feature_size_arithmetic() {
        let a = ArchConfig::default();
        assert_eq!(a.stride(), 8);
        assert_eq!(a.feature_size(64, 64), (8, 8));
        assert_eq!(a.feature_size(65, 60), (9, 8));
        assert_eq!(a.instance_dim(), 288);
    }
}
