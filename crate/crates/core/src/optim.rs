//! One optimiser with a parameter group per [`Collection`].
//!
//! A step only touches the groups it is given, so frozen collections stay
//! bit-identical and keep their moment estimates.

use std::collections::BTreeMap;

use dgdet_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Collection, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl OptimConfig {
    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }

    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 2e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct GroupState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    state: BTreeMap<Collection, GroupState>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    /// Number of steps group `c` has taken.
    pub fn steps(&self, c: Collection) -> u64 {
        self.state.get(&c).map_or(0, |s| s.step)
    }

    /// Applies one update to each listed group.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[(Collection, Vec<Tensor>)]) -> Result<()> {
        for (c, g) in grads {
            let set = params.collection_mut(*c)?;
            if g.len() != set.len() {
                return Err(Error::Dimension(format!("{} gradients for {} tensors in {c}", g.len(), set.len())));
            }
            for (gt, (name, pt)) in g.iter().zip(set.iter()) {
                if gt.shape() != pt.shape() {
                    return Err(Error::Dimension(format!("gradient shape {:?} for {c}/{name}", gt.shape())));
                }
                if !gt.all_finite() {
                    return Err(Error::NonFinite {
                        component: format!("gradient of {c}/{name}"),
                        context: String::new(),
                    });
                }
            }
            let st = self.state.entry(*c).or_insert_with(|| GroupState {
                step: 0,
                first: set.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
                second: set.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            });
            st.step += 1;
            let cfg = self.config;
            let t = st.step as i32;
            for (i, (p, gt)) in set.tensors_mut().iter_mut().zip(g).enumerate() {
                let m = &mut st.first[i];
                let v = &mut st.second[i];
                let pd = p.data_mut();
                match cfg.kind {
                    OptimizerKind::AdamW => {
                        let b1 = cfg.momentum;
                        let c1 = 1.0 - b1.powi(t);
                        let c2 = 1.0 - BETA2.powi(t);
                        for j in 0..pd.len() {
                            let gj = gt.data()[j];
                            m[j] = b1 * m[j] + (1.0 - b1) * gj;
                            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                            let mh = m[j] / c1;
                            let vh = v[j] / c2;
                            pd[j] -= cfg.learning_rate * (mh / (vh.sqrt() + EPS) + cfg.weight_decay * pd[j]);
                        }
                    }
                    OptimizerKind::Sgd => {
                        for j in 0..pd.len() {
                            let gj = gt.data()[j] + cfg.weight_decay * pd[j];
                            m[j] = cfg.momentum * m[j] + gj;
                            pd[j] -= cfg.learning_rate * m[j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
