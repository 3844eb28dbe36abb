//! Tail-risk measures.
//!
//! Two conventions meet here. Scenario tables hold *losses* (shed energy or
//! its monetary value), where larger is worse and [`cvar_alpha`] averages the
//! upper tail. Quantile distributions hold *returns*, where larger is better
//! and [`phi_alpha`] averages the lower tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CDF_TOL: f64 = 1e-12;

/// Finite loss distribution over scenario outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLossDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteLossDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Contract("loss distribution is empty".into()));
        }
        if values.len() != probs.len() {
            return Err(Error::Contract(format!(
                "{} values but {} probabilities",
                values.len(),
                probs.len()
            )));
        }
        if values.iter().chain(&probs).any(|x| !x.is_finite()) || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Contract("loss distribution has invalid entries".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > CDF_TOL {
            return Err(Error::Contract(format!("probabilities sum to {total}")));
        }
        Ok(DiscreteLossDistribution { values, probs })
    }

    pub fn degenerate(value: f64) -> Self {
        DiscreteLossDistribution {
            values: vec![value],
            probs: vec![1.0],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    fn sorted(&self) -> Vec<(f64, f64)> {
        let mut atoms: Vec<(f64, f64)> = self.values.iter().cloned().zip(self.probs.iter().cloned()).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    }
}

/// Risk settings: confidence level and the shed-loss coefficient σ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub alpha: f64,
    /// currency/kWh
    pub sigma: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        RiskConfig { alpha: 0.9, sigma: 10.0 }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Smallest loss value whose cumulative probability reaches `alpha`.
pub fn var_alpha(dist: &DiscreteLossDistribution, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let atoms = dist.sorted();
    let mut cdf = 0.0;
    for &(v, p) in &atoms {
        cdf += p;
        if cdf >= alpha - CDF_TOL {
            return Ok(v);
        }
    }
    Ok(atoms.last().expect("non-empty").0)
}

/// `VaR_α + (1/(1-α))·Σ p·max(loss - VaR_α, 0)`.
pub fn cvar_alpha(dist: &DiscreteLossDistribution, alpha: f64) -> Result<f64> {
    let var = var_alpha(dist, alpha)?;
    let excess: f64 = dist
        .values
        .iter()
        .zip(&dist.probs)
        .map(|(v, p)| p * (v - var).max(0.0))
        .sum();
    Ok(var + excess / (1.0 - alpha))
}

/// Loss table over composite scenarios: atom `(b, d)` has value
/// `sigma · shed[b][d]` and probability `pv_probs[b] · load_probs[d]`.
pub fn scenario_loss_table(
    shed: &[Vec<f64>],
    pv_probs: &[f64],
    load_probs: &[f64],
    sigma: f64,
) -> Result<DiscreteLossDistribution> {
    if shed.len() != pv_probs.len() || shed.iter().any(|row| row.len() != load_probs.len()) {
        return Err(Error::Contract(format!(
            "shed table shape does not match {}x{} probabilities",
            pv_probs.len(),
            load_probs.len()
        )));
    }
    let mut values = Vec::with_capacity(pv_probs.len() * load_probs.len());
    let mut probs = Vec::with_capacity(values.capacity());
    for (row, &pb) in shed.iter().zip(pv_probs) {
        for (&s, &qd) in row.iter().zip(load_probs) {
            values.push(sigma * s);
            probs.push(pb * qd);
        }
    }
    DiscreteLossDistribution::new(values, probs)
}

/// Evenly spaced quantile levels `(2j - 1) / (2J)`, `j = 1..=J`.
pub fn midpoint_levels(j: usize) -> Vec<f64> {
    (1..=j).map(|k| (2 * k - 1) as f64 / (2 * j) as f64).collect()
}

/// Return distribution as `J` equally weighted atoms at fixed levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileDistribution {
    pub atoms: Vec<f64>,
    pub levels: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(atoms: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != levels.len() {
            return Err(Error::Contract("atoms and levels must be non-empty and equal in length".into()));
        }
        let increasing = levels.windows(2).all(|w| w[0] < w[1]);
        if !increasing || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return Err(Error::Contract("levels must increase strictly within (0, 1)".into()));
        }
        Ok(QuantileDistribution { atoms, levels })
    }

    pub fn with_midpoints(atoms: Vec<f64>) -> Self {
        let levels = midpoint_levels(atoms.len());
        QuantileDistribution { atoms, levels }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }
}

/// Number of atoms in the lower tail at level `alpha`: `⌈(1-α)·J⌉`, at least one.
pub fn tail_count(alpha: f64, j: usize) -> usize {
    let raw = (1.0 - alpha) * j as f64;
    // absorb representation error such as (1 - 0.7) * 10 = 3.0000000000000004
    let m = (raw - 1e-9).ceil() as usize;
    m.clamp(1, j)
}

/// Mean of the `⌈(1-α)·J⌉` lowest return atoms.
pub fn phi_alpha(q: &QuantileDistribution, alpha: f64) -> f64 {
    tail_mean(&q.atoms, alpha)
}

/// [`phi_alpha`] on a bare atom slice.
pub fn tail_mean(atoms: &[f64], alpha: f64) -> f64 {
    assert!(!atoms.is_empty(), "tail of an empty distribution");
    let m = tail_count(alpha, atoms.len());
    let mut sorted = atoms.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[..m].iter().sum::<f64>() / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_var_and_cvar() {
        let d = DiscreteLossDistribution::new(vec![0.0, 10.0], vec![0.9, 0.1]).unwrap();
        assert_eq!(var_alpha(&d, 0.9).unwrap(), 0.0);
        assert!((cvar_alpha(&d, 0.9).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_distribution() {
        let d = DiscreteLossDistribution::degenerate(3.5);
        for alpha in [0.01, 0.5, 0.9, 0.999] {
            assert_eq!(var_alpha(&d, alpha).unwrap(), 3.5);
            assert!((cvar_alpha(&d, alpha).unwrap() - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_near_one_picks_the_maximum() {
        let d = DiscreteLossDistribution::new(vec![4.0, 1.0, 9.0], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(var_alpha(&d, 1.0 - 1e-9).unwrap(), 9.0);
        assert!((cvar_alpha(&d, 1.0 - 1e-9).unwrap() - 9.0).abs() < 1e-6);
    }

    #[test]
    fn empty_distribution_is_a_contract_violation() {
        assert!(matches!(
            DiscreteLossDistribution::new(vec![], vec![]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_table_weights_are_products() {
        let t = scenario_loss_table(&[vec![50.0]], &[1.0], &[1.0], 10.0).unwrap();
        assert_eq!(t.values(), &[500.0]);
        assert_eq!(t.probs(), &[1.0]);
        let z = scenario_loss_table(&[vec![0.0, 0.0], vec![0.0, 0.0]], &[0.3, 0.7], &[0.5, 0.5], 10.0).unwrap();
        assert_eq!(cvar_alpha(&z, 0.9).unwrap(), 0.0);
        assert!((z.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(scenario_loss_table(&[vec![1.0]], &[0.5, 0.5], &[1.0], 1.0).is_err());
    }

    #[test]
    fn phi_hand_values() {
        let q = QuantileDistribution::with_midpoints(vec![0.0, -4.0, 2.0, -2.0]);
        assert_eq!(phi_alpha(&q, 0.75), -4.0);
        assert_eq!(phi_alpha(&q, 1e-9), -1.0);
        let c = QuantileDistribution::with_midpoints(vec![1.25; 32]);
        assert_eq!(phi_alpha(&c, 0.9), 1.25);
    }

    #[test]
    fn tail_count_rule() {
        assert_eq!(tail_count(0.9, 32), 4);
        assert_eq!(tail_count(0.75, 4), 1);
        assert_eq!(tail_count(0.7, 10), 3);
        assert_eq!(tail_count(0.5, 32), 16);
        assert_eq!(tail_count(1e-12, 32), 32);
        assert_eq!(tail_count(0.999, 32), 1);
    }

    #[test]
    fn midpoint_levels_are_symmetric() {
        let l = midpoint_levels(32);
        assert_eq!(l[0], 1.0 / 64.0);
        assert_eq!(l[31], 63.0 / 64.0);
        assert_eq!(midpoint_levels(1), vec![0.5]);
    }
}
