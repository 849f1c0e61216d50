//! Exact checks of the entropy identities behind the conditional-invariance
//! argument, on small discrete joints `P(C, Z)`.
//!
//! `C` is the class (K values) and `Z` stands for the pair of box and pooled
//! feature, discretised to `m` cells. Natural logarithms throughout.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

/// `K x m` joint probability table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    k: usize,
    m: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(k: usize, m: usize, p: Vec<f64>) -> Result<Self> {
        if k == 0 || m == 0 || p.len() != k * m {
            return Err(Error::NotDistribution(format!("{} entries for a {k}x{m} table", p.len())));
        }
        check_distribution(&p, DISTRIBUTION_TOLERANCE)?;
        Ok(Self { k, m, p })
    }

    /// Joint with class marginal `prior` and conditionals `P(Z | C = c)`.
    pub fn from_conditionals(prior: &[f64], conditionals: &[Vec<f64>]) -> Result<Self> {
        if prior.len() != conditionals.len() || conditionals.is_empty() {
            return Err(Error::Dimension("one conditional per class is required".into()));
        }
        let m = conditionals[0].len();
        let mut p = Vec::with_capacity(prior.len() * m);
        for (pc, cond) in prior.iter().zip(conditionals) {
            if cond.len() != m {
                return Err(Error::Dimension("conditionals differ in length".into()));
            }
            p.extend(cond.iter().map(|q| pc * q));
        }
        Self::new(prior.len(), m, p)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn num_cells(&self) -> usize {
        self.m
    }

    pub fn get(&self, c: usize, z: usize) -> f64 {
        self.p[c * self.m + z]
    }

    pub fn class_marginal(&self) -> Vec<f64> {
        (0..self.k).map(|c| (0..self.m).map(|z| self.get(c, z)).sum()).collect()
    }

    pub fn cell_marginal(&self) -> Vec<f64> {
        (0..self.m).map(|z| (0..self.k).map(|c| self.get(c, z)).sum()).collect()
    }

    /// `P(Z | C = c)` for every class; a class with zero mass gets a uniform
    /// row.
    pub fn conditionals(&self) -> Vec<Vec<f64>> {
        let pc = self.class_marginal();
        (0..self.k)
            .map(|c| {
                if pc[c] > 0.0 {
                    (0..self.m).map(|z| self.get(c, z) / pc[c]).collect()
                } else {
                    vec![1.0 / self.m as f64; self.m]
                }
            })
            .collect()
    }

    /// `H(C | Z)`.
    pub fn conditional_entropy_c_given_z(&self) -> f64 {
        let pz = self.cell_marginal();
        let mut h = 0.0;
        for z in 0..self.m {
            for c in 0..self.k {
                let p = self.get(c, z);
                if p > 0.0 {
                    h -= p * (p / pz[z]).ln();
                }
            }
        }
        h
    }

    /// `H(Z | C)`.
    pub fn conditional_entropy_z_given_c(&self) -> f64 {
        let pc = self.class_marginal();
        let mut h = 0.0;
        for c in 0..self.k {
            for z in 0..self.m {
                let p = self.get(c, z);
                if p > 0.0 {
                    h -= p * (p / pc[c]).ln();
                }
            }
        }
        h
    }
}

fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::NotDistribution(format!("entry {v} is negative or not finite")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::NotDistribution(format!("entries sum to {s}")));
    }
    Ok(())
}

/// `H(p) = -sum p_i ln p_i`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, 1e-9)?;
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("lengths {} and {}", p.len(), q.len())));
    }
    check_distribution(p, 1e-9)?;
    check_distribution(q, 1e-9)?;
    let mut s = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::AbsoluteContinuity { index: i });
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// Information gain `G(L, M) = H(L) - H(L | M)` of the row variable `L`
/// about the column variable `M`.
pub fn info_gain(joint: &DiscreteJoint) -> f64 {
    let pl = joint.class_marginal();
    let hl = -pl.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    hl - joint.conditional_entropy_c_given_z()
}

/// Generalised Jensen-Shannon divergence under a uniform prior:
/// `(1/K) sum_i KL(P_i || mean_j P_j)`.
pub fn js(conditionals: &[Vec<f64>]) -> Result<f64> {
    if conditionals.len() < 2 {
        return Err(Error::Dimension("at least two conditionals are required".into()));
    }
    let m = conditionals[0].len();
    if conditionals.iter().any(|c| c.len() != m) {
        return Err(Error::Dimension("conditionals differ in length".into()));
    }
    let k = conditionals.len() as f64;
    let mix: Vec<f64> = (0..m).map(|z| conditionals.iter().map(|c| c[z]).sum::<f64>() / k).collect();
    let mut s = 0.0;
    for c in conditionals {
        s += kl(c, &mix)?;
    }
    Ok(s / k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub checks: Vec<Check>,
    pub js: f64,
    pub conditional_entropy: f64,
    pub max_entropy: f64,
}

impl TheoremReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
    }
}

/// Verifies the identity chain on one joint:
/// (a) `-H(C|Z) = G(Z;C) - H(C)`;
/// (b) `G(Z;C) = (1/K) sum_c KL(P(Z|c) || P(Z))`;
/// (c) that average equals `js` of the conditionals;
/// (d) `js = 0` exactly when all conditionals agree;
/// (e) `H(C|Z) = ln K` exactly when `js = 0`.
///
/// `G(Z;C)` in (a) is computed from the `Z` side as `H(Z) - H(Z|C)`, so the
/// check is not a restatement of [`info_gain`]. In strict mode a class
/// marginal that is not uniform within `tolerance` is rejected.
pub fn verify_theorem1(joint: &DiscreteJoint, tolerance: f64, strict: bool) -> Result<TheoremReport> {
    let k = joint.num_classes();
    let pc = joint.class_marginal();
    let dev = pc.iter().map(|p| (p - 1.0 / k as f64).abs()).fold(0.0, f64::max);
    if strict && dev > tolerance {
        return Err(Error::NonUniformMarginal { max_deviation: dev });
    }
    let pz = joint.cell_marginal();
    let h_c = entropy(&pc)?;
    let h_z = entropy(&pz)?;
    let h_c_given_z = joint.conditional_entropy_c_given_z();
    let g_zc = h_z - joint.conditional_entropy_z_given_c();

    let conds = joint.conditionals();
    let mut avg_kl = 0.0;
    for (c, cond) in conds.iter().enumerate() {
        avg_kl += pc[c] * kl(cond, &pz)?;
    }
    let uniform_avg: f64 = conds.iter().map(|c| kl(c, &pz)).sum::<Result<f64>>()? / k as f64;
    let jsd = js(&conds)?;

    let spread = conds
        .iter()
        .flat_map(|c| c.iter().zip(&conds[0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let equal = spread <= tolerance;
    let js_zero = jsd.abs() <= tolerance;
    let max_h = (k as f64).ln();
    let h_max = (h_c_given_z - max_h).abs() <= tolerance;

    let mk = |name, residual: f64| Check {
        name,
        residual,
        passed: residual <= tolerance,
    };
    let flag = |name, ok: bool| Check {
        name,
        residual: if ok { 0.0 } else { 1.0 },
        passed: ok,
    };
    let checks = vec![
        mk("(a) -H(C|Z) = G(Z;C) - H(C)", (-h_c_given_z - (g_zc - h_c)).abs()),
        mk("(b) G(Z;C) = mean KL(P(Z|c) || P(Z))", (g_zc - avg_kl).abs().max((g_zc - uniform_avg).abs())),
        mk("(c) mean KL = JS", (uniform_avg - jsd).abs()),
        flag("(d) JS = 0 iff conditionals equal", js_zero == equal),
        flag("(e) H(C|Z) = ln K iff JS = 0", h_max == js_zero),
    ];
    Ok(TheoremReport {
        checks,
        js: jsd,
        conditional_entropy: h_c_given_z,
        max_entropy: max_h,
    })
}

/// Random joint with uniform class marginal: each conditional is a random
/// point of the simplex (normalised exponential draws).
pub fn random_uniform_joint<R: rand::Rng>(rng: &mut R, k: usize, m: usize) -> DiscreteJoint {
    let conds: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    DiscreteJoint::from_conditionals(&vec![1.0 / k as f64; k], &conds).expect("valid by construction")
}

/// Outcome of [`verify_random_joints`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchVerification {
    pub num_classes: usize,
    pub num_cells: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_residual: f64,
    pub failures: usize,
    /// Worst residual and failure count of each check across the samples.
    pub checks: Vec<CheckSummary>,
    /// Joint whose conditionals are all equal.
    pub equal_case: TheoremReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: &'static str,
    pub max_residual: f64,
    pub failures: usize,
}

impl BatchVerification {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.equal_case.passed()
    }
}

/// Checks the identity chain on `samples` random joints with uniform class
/// marginal, plus one joint with equal conditionals. The joints are uniform by
/// construction, so the strict marginal check is skipped.
pub fn verify_random_joints(k: usize, m: usize, samples: usize, seed: u64, tolerance: f64) -> Result<BatchVerification> {
    if k < 2 || m < 1 {
        return Err(Error::Dimension(format!("need K >= 2 and m >= 1, got K={k}, m={m}")));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut max_residual: f64 = 0.0;
    let mut failures = 0;
    let mut checks: Vec<CheckSummary> = Vec::new();
    for _ in 0..samples {
        let j = random_uniform_joint(&mut rng, k, m);
        let r = verify_theorem1(&j, tolerance, false)?;
        max_residual = max_residual.max(r.max_residual());
        failures += usize::from(!r.passed());
        for c in &r.checks {
            match checks.iter_mut().find(|s| s.name == c.name) {
                Some(s) => {
                    s.max_residual = s.max_residual.max(c.residual);
                    s.failures += usize::from(!c.passed);
                }
                None => checks.push(CheckSummary {
                    name: c.name,
                    max_residual: c.residual,
                    failures: usize::from(!c.passed),
                }),
            }
        }
    }
    let shared = random_uniform_joint(&mut rng, 1, m).conditionals().remove(0);
    let equal = DiscreteJoint::from_conditionals(&vec![1.0 / k as f64; k], &vec![shared; k])?;
    let equal_case = verify_theorem1(&equal, tolerance, false)?;
    Ok(BatchVerification {
        num_classes: k,
        num_cells: m,
        samples,
        seed,
        tolerance,
        max_residual,
        failures,
        checks,
        equal_case,
    })
}
