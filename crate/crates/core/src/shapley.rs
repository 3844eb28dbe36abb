//! Cost allocation among microgrids by exact Shapley values.
//!
//! Coalitions are bit masks over agent indices: bit `i` set means MG `i`
//! is a member. Weights `|S|!(n-|S|-1)!/n!` are kept as exact rationals and
//! each agent's allocation is converted to `f64` once at the end.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scenarios::ScenarioSet;
use crate::trainer::{evaluate, train};

/// Largest supported player count; tables hold `2^n` entries.
pub const MAX_PLAYERS: usize = 16;

/// Value `Y(S)` of every coalition, in currency. `Y(∅) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharacteristicTable {
    pub n: usize,
    /// Keyed by coalition members written as e.g. `"0,2"`; the empty
    /// coalition may be omitted.
    pub values: BTreeMap<String, f64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Comma-separated member list of a coalition mask.
pub fn coalition_key(mask: usize, n: usize) -> String {
    (0..n)
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_key(key: &str, n: usize) -> Result<usize> {
    let mut mask = 0usize;
    for part in key.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let i: usize = part
            .parse()
            .map_err(|_| Error::Contract(format!("coalition key {key:?} is not a list of agent indices")))?;
        if i >= n {
            return Err(Error::Contract(format!("coalition key {key:?} names agent {i} of {n}")));
        }
        if mask & (1 << i) != 0 {
            return Err(Error::Contract(format!("coalition key {key:?} repeats agent {i}")));
        }
        mask |= 1 << i;
    }
    Ok(mask)
}

impl CharacteristicTable {
    /// Table from a function of the coalition mask; `f(0)` is not called.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_n(n)?;
        let values = (1..1usize << n).map(|m| (coalition_key(m, n), f(m))).collect();
        Ok(CharacteristicTable {
            n,
            values,
            config_hash: None,
        })
    }

    /// Dense values indexed by mask, with every coalition present.
    pub fn dense(&self) -> Result<Vec<f64>> {
        check_n(self.n)?;
        let mut out = vec![None; 1 << self.n];
        out[0] = Some(0.0);
        for (key, &v) in &self.values {
            let m = parse_key(key, self.n)?;
            if !v.is_finite() {
                return Err(Error::Contract(format!("coalition {{{key}}} has value {v}")));
            }
            if m == 0 && v != 0.0 {
                return Err(Error::Contract("the empty coalition must have value 0".into()));
            }
            if out[m].is_some() && m != 0 {
                return Err(Error::Contract(format!("coalition {{{key}}} appears twice")));
            }
            out[m] = Some(v);
        }
        out.iter()
            .enumerate()
            .map(|(m, v)| v.ok_or_else(|| Error::Contract(format!("coalition {{{}}} is missing", coalition_key(m, self.n)))))
            .collect()
    }

    pub fn value(&self, mask: usize) -> Result<f64> {
        Ok(self.dense()?[mask])
    }

    /// Pointwise sum of two games on the same players.
    pub fn sum(&self, other: &CharacteristicTable) -> Result<CharacteristicTable> {
        if self.n != other.n {
            return Err(Error::Contract(format!("games on {} and {} players", self.n, other.n)));
        }
        let (a, b) = (self.dense()?, other.dense()?);
        CharacteristicTable::from_fn(self.n, |m| a[m] + b[m])
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: CharacteristicTable = serde_json::from_str(&text)?;
        table.dense()?;
        Ok(table)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 || n > MAX_PLAYERS {
        Err(Error::Contract(format!("player count {n} must lie in 1..={MAX_PLAYERS}")))
    } else {
        Ok(())
    }
}

/// Cost share `Ψ_i` of each agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub shares: Vec<f64>,
    /// `Y(N)`, which the shares sum to.
    pub grand_value: f64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn factorial(k: usize) -> BigInt {
    (1..=k).fold(BigInt::one(), |acc, x| acc * BigInt::from(x))
}

fn exact(v: f64) -> Result<BigRational> {
    BigRational::from_float(v).ok_or_else(|| Error::Contract(format!("value {v} is not finite")))
}

/// Exact Shapley weights `|S|!(n-|S|-1)!/n!` indexed by `|S|`.
pub fn shapley_weights(n: usize) -> Vec<BigRational> {
    let total = factorial(n);
    (0..n)
        .map(|s| BigRational::new(factorial(s) * factorial(n - s - 1), total.clone()))
        .collect()
}

/// Exact rational Shapley values of a complete table.
pub fn shapley_exact(table: &CharacteristicTable) -> Result<Vec<BigRational>> {
    let n = table.n;
    let values: Vec<BigRational> = table.dense()?.into_iter().map(exact).collect::<Result<_>>()?;
    let weights = shapley_weights(n);
    Ok((0..n)
        .map(|i| {
            let bit = 1 << i;
            let mut acc = BigRational::zero();
            for s in (0..1usize << n).filter(|s| s & bit == 0) {
                let marginal = &values[s | bit] - &values[s];
                acc += &weights[s.count_ones() as usize] * marginal;
            }
            acc
        })
        .collect())
}

/// Average marginal contribution of each agent over all coalitions that
/// exclude it.
pub fn shapley_allocate(table: &CharacteristicTable) -> Result<Allocation> {
    let exact = shapley_exact(table)?;
    let shares = exact
        .iter()
        .map(|r| r.to_f64().ok_or_else(|| Error::Numerical("share does not fit in f64".into())))
        .collect::<Result<_>>()?;
    Ok(Allocation {
        shares,
        grand_value: table.value((1 << table.n) - 1)?,
        config_hash: table.config_hash.clone(),
    })
}

/// Result of valuing one coalition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoalitionValue {
    pub members: Vec<usize>,
    /// Expected cost plus σ·CVaR_α of shed energy, currency.
    pub value: f64,
    pub total_cost: f64,
    pub risk_kwh: f64,
    pub seed: u64,
}

/// Trains the configured variant for `budget` episodes on the system
/// restricted to `members` and prices the resulting policy on the test grid.
pub fn coalition_value(
    members: &[usize],
    cfg: &RunConfig,
    train_set: &ScenarioSet,
    test_set: &ScenarioSet,
    budget: usize,
) -> Result<CoalitionValue> {
    if budget == 0 {
        return Err(Error::Contract("coalition training budget must be at least one episode".into()));
    }
    if members.is_empty() {
        return Err(Error::Contract("coalition must have at least one member".into()));
    }
    let n = cfg.system.n_agents();
    if let Some(&bad) = members.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("coalition names MG {bad} of {n}")));
    }
    let mut system = cfg.system.subsystem(members);
    if cfg.shapley.scale_grid_limits {
        let f = members.len() as f64 / n as f64;
        system.grid_buy_max *= f;
        system.grid_sell_max *= f;
    }
    let mut training = cfg.training.clone();
    training.episodes = budget;
    let out = train(&system, train_set, &cfg.risk, &training)?;
    let report = evaluate(&out.model, &system, test_set, &cfg.risk, &cfg.hash(), 1)?;
    Ok(CoalitionValue {
        members: members.to_vec(),
        value: report.total_cost + report.risk_cost,
        total_cost: report.total_cost,
        risk_kwh: report.risk_kwh,
        seed: training.seed,
    })
}

/// Values every non-empty coalition of the configured system.
pub fn characteristic_table(
    cfg: &RunConfig,
    train_set: &ScenarioSet,
    test_set: &ScenarioSet,
    budget: usize,
) -> Result<(CharacteristicTable, Vec<CoalitionValue>)> {
    let n = cfg.system.n_agents();
    check_n(n)?;
    let mut details = Vec::with_capacity((1 << n) - 1);
    for mask in 1..1usize << n {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        details.push(coalition_value(&members, cfg, train_set, test_set, budget)?);
    }
    let mut table = CharacteristicTable::from_fn(n, |m| details[m - 1].value)?;
    table.config_hash = Some(cfg.hash());
    Ok((table, details))
}
