//! Scenario generation: Monte-Carlo ensembles of PV and load profiles around
//! a base shape, reduced by k-means to weighted representative scenarios.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A time series of power values, kW, one per step.
pub type Profile = Vec<f64>;

const SIMPLEX_TOL: f64 = 1e-12;

/// Reduced PV and load scenarios with their probabilities. PV and load are
/// indexed independently; a composite scenario `(b, d)` has weight
/// `pv_probs[b] * load_probs[d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSet {
    pub pv_profiles: Vec<Profile>,
    pub load_profiles: Vec<Profile>,
    pub pv_probs: Vec<f64>,
    pub load_probs: Vec<f64>,
}

impl ScenarioSet {
    pub fn new(
        pv_profiles: Vec<Profile>,
        load_profiles: Vec<Profile>,
        pv_probs: Vec<f64>,
        load_probs: Vec<f64>,
    ) -> Result<Self> {
        let set = ScenarioSet {
            pv_profiles,
            load_profiles,
            pv_probs,
            load_probs,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn n_pv(&self) -> usize {
        self.pv_profiles.len()
    }

    pub fn n_load(&self) -> usize {
        self.load_profiles.len()
    }

    /// Shortest profile length.
    pub fn horizon(&self) -> usize {
        self.pv_profiles
            .iter()
            .chain(&self.load_profiles)
            .map(Vec::len)
            .min()
            .unwrap_or(0)
    }

    /// Joint probability of composite scenario `(b, d)`.
    pub fn weight(&self, b: usize, d: usize) -> f64 {
        self.pv_probs[b] * self.load_probs[d]
    }

    /// All composite scenarios in row-major `(b, d)` order with their weights.
    pub fn grid(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n_pv())
            .flat_map(|b| (0..self.n_load()).map(move |d| (b, d)))
            .map(|(b, d)| (b, d, self.weight(b, d)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex("pv_probs", &self.pv_probs, self.pv_profiles.len())?;
        check_simplex("load_probs", &self.load_probs, self.load_profiles.len())?;
        for (kind, profiles) in [("pv", &self.pv_profiles), ("load", &self.load_profiles)] {
            for (i, p) in profiles.iter().enumerate() {
                if p.is_empty() {
                    return Err(Error::Config(format!("{kind} profile {i} is empty")));
                }
                if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(Error::Config(format!(
                        "{kind} profile {i} has a negative or non-finite value {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: ScenarioSet = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn check_simplex(name: &str, probs: &[f64], expected_len: usize) -> Result<()> {
    if probs.len() != expected_len {
        return Err(Error::Config(format!(
            "{name} has {} entries for {expected_len} profiles",
            probs.len()
        )));
    }
    if expected_len == 0 {
        return Err(Error::Config(format!("{name} is empty")));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config(format!("{name} has a negative or non-finite entry")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Config(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Perturbation model for [`generate_ensemble`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of the independent per-step multiplicative factor.
    pub multiplicative_std: f64,
    /// Standard deviation of the independent per-step additive term, kW.
    pub additive_std: f64,
    /// Output range, kW.
    pub clamp: (f64, f64),
    /// Standard deviation of one multiplicative factor shared by every step
    /// of a profile (day-to-day level variation).
    #[serde(default)]
    pub profile_scale_std: f64,
}

impl NoiseSpec {
    pub fn none(clamp: (f64, f64)) -> Self {
        NoiseSpec {
            multiplicative_std: 0.0,
            additive_std: 0.0,
            clamp,
            profile_scale_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stds = [self.multiplicative_std, self.additive_std, self.profile_scale_std];
        if stds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        if !(self.clamp.0 <= self.clamp.1) {
            return Err(Error::Config(format!("noise clamp {:?} is empty", self.clamp)));
        }
        Ok(())
    }
}

/// `count` perturbed copies of `base`. Each value is
/// `clamp(base[t]·s·(1+ε_m[t]) + ε_a[t])` with independent Gaussian draws;
/// `s = 1 + ε_s` is drawn once per profile.
pub fn generate_ensemble(base: &[f64], noise: &NoiseSpec, count: usize, seed: u64) -> Result<Vec<Profile>> {
    noise.validate()?;
    if count == 0 {
        return Err(Error::Contract("ensemble count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |std: f64| Normal::new(0.0, std).expect("validated std");
    let (scale, mult, add) = (
        normal(noise.profile_scale_std),
        normal(noise.multiplicative_std),
        normal(noise.additive_std),
    );
    let (lo, hi) = noise.clamp;
    Ok((0..count)
        .map(|_| {
            let s = 1.0 + scale.sample(&mut rng);
            base.iter()
                .map(|&b| {
                    let em = mult.sample(&mut rng);
                    let ea = add.sample(&mut rng);
                    (b * s * (1.0 + em) + ea).clamp(lo, hi)
                })
                .collect()
        })
        .collect())
}

/// Outcome of [`reduce_kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansReduction {
    pub centroids: Vec<Profile>,
    /// Share of ensemble members assigned to each centroid.
    pub probs: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, recorded after
    /// each assignment pass.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm on profiles as points in `R^T`.
///
/// Initial centroids are `k` distinct members sampled uniformly with `seed`.
/// A cluster that ends up empty is re-seeded with the member farthest from
/// its current centroid (lowest index on ties). Iteration stops when no
/// centroid moves more than `tol` or after `max_iters` passes.
pub fn reduce_kmeans(ensemble: &[Profile], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansReduction> {
    let n = ensemble.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} must lie in 1..={n}")));
    }
    let dim = ensemble[0].len();
    if ensemble.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("ensemble profiles differ in length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Profile> = index::sample(&mut rng, n, k).into_iter().map(|i| ensemble[i].clone()).collect();
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for (i, p) in ensemble.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
            assignments[i] = best;
            dists[i] = d;
        }

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            let Some(far) = far else { break };
            counts[assignments[far]] -= 1;
            counts[j] = 1;
            assignments[far] = j;
            dists[far] = 0.0;
            centroids[j] = ensemble[far].clone();
        }
        trace.push(dists.iter().sum());

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in ensemble.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let mean: Profile = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            movement = movement.max(sq_dist(&mean, &centroids[j]).sqrt());
            centroids[j] = mean;
        }
        if movement < tol {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let probs = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(KMeansReduction {
        centroids,
        probs,
        assignments,
        objective_trace: trace,
        iterations,
    })
}

/// Reads one profile per row. Rows must all have the same number of
/// non-negative numeric columns. `header` skips the first line.
pub fn load_profiles_csv(path: &Path, header: bool) -> Result<Vec<Profile>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profiles_csv(&text, header).map_err(|(row, message)| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    })
}

/// Parses CSV text; errors carry the 1-based data row.
pub fn parse_profiles_csv(text: &str, header: bool) -> std::result::Result<Vec<Profile>, (usize, String)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut profiles: Vec<Profile> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| (row, e.to_string()))?;
        let values = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| (row, format!("column {}: '{field}' is not a number", c + 1)))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err((row, format!("column {}: {v} is not a non-negative finite value", c + 1)));
                }
                Ok(v)
            })
            .collect::<std::result::Result<Profile, _>>()?;
        if let Some(first) = profiles.first() {
            if values.len() != first.len() {
                return Err((row, format!("expected {} columns, found {}", first.len(), values.len())));
            }
        }
        profiles.push(values);
    }
    Ok(profiles)
}

pub fn write_profiles_csv(path: &Path, profiles: &[Profile]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for p in profiles {
        w.write_record(p.iter().map(|v| v.to_string()))
            .map_err(|e| Error::io(path, e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bell-shaped clear-sky PV output peaking at `peak` kW around 12:00,
/// zero between 19:00 and 06:00.
pub fn solar_shape(horizon: usize, dt: f64, peak: f64) -> Profile {
    (0..horizon)
        .map(|t| {
            let hour = (t as f64 * dt) % 24.0 + 0.5 * dt;
            if (6.0..=19.0).contains(&hour) {
                let x = (hour - 6.0) / 13.0 * std::f64::consts::PI;
                peak * x.sin().powi(2)
            } else {
                0.0
            }
        })
        .collect()
}

/// Residential load with a daytime shoulder and an evening peak centred at
/// 19:00.
pub fn evening_peak_load(horizon: usize, dt: f64, night: f64, day: f64, peak: f64) -> Profile {
    (0..horizon)
        .map(|t| {
            let hour = (t as f64 * dt) % 24.0 + 0.5 * dt;
            let daytime = if (7.0..=22.0).contains(&hour) { day - night } else { 0.0 };
            let evening = (peak - day) * (-((hour - 19.0) / 1.8).powi(2)).exp();
            night + daytime + evening
        })
        .collect()
}
