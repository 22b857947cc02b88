//! Probability that a private value is disclosed when each link's privacy
//! is broken independently with probability `b`:
//!
//! `P(b) = Σ_{m=pc}^{Dmax} P(k=m) · (1 − (1 − b^(m−1))^m)`
//!
//! For cluster-based aggregation `P(k=m)` is the cluster-size distribution.
//! The ring scheme is the degenerate case `pc = Dmax = 2`, `P(k=2) = 1`.
//!
//! The formula is evaluated as given. Note that at small `b` it ranks the
//! ring scheme above a size-3 cluster (0.19 vs 0.029701 at `b = 0.1`), so
//! no ordering between the two curves is asserted anywhere.
//!
//! The Monte Carlo side measures a concrete simulator event instead: a
//! middle source is disclosed when the links carrying its incoming and its
//! outgoing masked value are both broken, which happens with probability
//! `b²`. The two are reported side by side, not forced to agree.

use thiserror::Error;

use crate::adversary::{self, LinkExposure};
use crate::config::ScenarioConfig;
use crate::rng::{self, Stream};
use crate::simnet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("b = {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("minimum cluster size must be at least 2, got {0}")]
    MinClusterTooSmall(usize),
    #[error("Dmax = {dmax} is below pc = {pc}")]
    EmptyRange { pc: usize, dmax: usize },
    #[error("cluster distribution has {got} entries, expected {expected}")]
    DistributionLength { got: usize, expected: usize },
    #[error("cluster distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("cluster distribution has a negative or non-finite entry")]
    BadMass,
}

pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DisclosureModel {
    pub b: f64,
    pub pc: usize,
    pub dmax: usize,
    /// `cluster_dist[i]` is `P(k = pc + i)`.
    pub cluster_dist: Vec<f64>,
}

impl DisclosureModel {
    pub fn new(b: f64, pc: usize, dmax: usize, cluster_dist: Vec<f64>) -> Result<Self, ModelError> {
        let model = DisclosureModel {
            b,
            pc,
            dmax,
            cluster_dist,
        };
        model.validate()?;
        Ok(model)
    }

    /// Uniform cluster sizes over `[pc, dmax]`.
    pub fn uniform(b: f64, pc: usize, dmax: usize) -> Result<Self, ModelError> {
        let n = dmax.checked_sub(pc).map_or(0, |d| d + 1);
        if n == 0 {
            return Err(ModelError::EmptyRange { pc, dmax });
        }
        Self::new(b, pc, dmax, vec![1.0 / n as f64; n])
    }

    /// All clusters have size `m`.
    pub fn fixed(b: f64, m: usize) -> Result<Self, ModelError> {
        Self::new(b, m, m, vec![1.0])
    }

    pub fn with_b(&self, b: f64) -> Result<Self, ModelError> {
        let mut m = self.clone();
        m.b = b;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_b(self.b)?;
        if self.pc < 2 {
            return Err(ModelError::MinClusterTooSmall(self.pc));
        }
        if self.dmax < self.pc {
            return Err(ModelError::EmptyRange {
                pc: self.pc,
                dmax: self.dmax,
            });
        }
        let expected = self.dmax - self.pc + 1;
        if self.cluster_dist.len() != expected {
            return Err(ModelError::DistributionLength {
                got: self.cluster_dist.len(),
                expected,
            });
        }
        if self.cluster_dist.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(ModelError::BadMass);
        }
        let total: f64 = self.cluster_dist.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(ModelError::NotNormalized(total));
        }
        Ok(())
    }
}

fn check_b(b: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&b) {
        Ok(())
    } else {
        Err(ModelError::BadProbability(b))
    }
}

/// Disclosure probability of a single cluster of size `m`.
fn cluster_term(b: f64, m: usize) -> f64 {
    let m_i = m as i32;
    1.0 - (1.0 - b.powi(m_i - 1)).powi(m_i)
}

pub fn disclosure_probability(model: &DisclosureModel) -> Result<f64, ModelError> {
    model.validate()?;
    Ok(model
        .cluster_dist
        .iter()
        .enumerate()
        .map(|(i, &p)| p * cluster_term(model.b, model.pc + i))
        .sum())
}

/// The ring scheme's instance: `1 − (1 − b)²`.
pub fn disclosure_probability_ours(b: f64) -> Result<f64, ModelError> {
    check_b(b)?;
    Ok(cluster_term(b, 2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub b: f64,
    pub p_formula: f64,
    pub p_empirical: Option<f64>,
    pub trials: Option<u64>,
}

/// Which curve to sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum Curve<'a> {
    Cluster(&'a DisclosureModel),
    Ours,
}

/// `count` evenly spaced points from `start` to `stop` inclusive.
pub fn linear_grid(start: f64, stop: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| {
                if i == count - 1 {
                    stop
                } else {
                    start + (stop - start) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// Evaluates the formula at every grid point. For the ring scheme with
/// `trials > 0`, also estimates the middle-node disclosure rate by link
/// compromise on a three-source ring; grid point `i` draws from the
/// generator for `(seed, i)` so points are independent of evaluation order.
pub fn sweep_curve(
    curve: Curve<'_>,
    grid: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<CurvePoint>, ModelError> {
    let exposure = match (&curve, trials) {
        (Curve::Ours, t) if t > 0 => Some(reference_ring(seed)),
        _ => None,
    };
    grid.iter()
        .enumerate()
        .map(|(i, &b)| {
            let p_formula = match &curve {
                Curve::Cluster(model) => disclosure_probability(&model.with_b(b)?)?,
                Curve::Ours => disclosure_probability_ours(b)?,
            };
            let p_empirical = exposure.as_ref().map(|(exp, middle)| {
                let mut rng = rng::derive(seed, Stream::Trials, i as u64);
                adversary::empirical_disclosure(exp, *middle, b, trials, &mut rng)
            });
            Ok(CurvePoint {
                b,
                p_formula,
                p_empirical,
                trials: p_empirical.map(|_| trials),
            })
        })
        .collect()
}

/// A direct-mode round on three fully connected sources; returns its link
/// exposure and the source visited second.
pub fn reference_ring(seed: u64) -> (LinkExposure, crate::NodeId) {
    let config = ScenarioConfig::with_values(vec![1, 2, 3], 1 << 16, seed);
    let transcript = simnet::run_scenario(&config).expect("reference scenario is valid");
    let middle = transcript.rounds[0].visitation[1];
    let exposure = LinkExposure::new(&transcript, 0).expect("round 0 exists");
    (exposure, middle)
}

/// Standard error of a Bernoulli(p) mean over `trials`.
pub fn binomial_sigma(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}
