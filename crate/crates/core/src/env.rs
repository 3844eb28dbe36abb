//! Multi-microgrid dispatch environment.
//!
//! Each microgrid (MG) has PV, a microturbine (MT), a battery (ESS) and a
//! load, and trades with the upstream grid through a shared connection whose
//! aggregate import and export are limited. Agents choose ESS and MT power;
//! grid exchange is whatever closes each MG's power balance. When aggregate
//! imports exceed the limit the excess load is shed, pro-rata to each MG's
//! purchase. When aggregate exports exceed the limit the surplus is curtailed
//! pro-rata with no revenue and no penalty.
//!
//! Stepping is a pure function of `(state, actions)` for a given [`Env`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenarios::ScenarioSet;

/// Number of features in one MG's observation.
pub const OBS_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridParams {
    /// kW
    pub pv_max: f64,
    pub pv_min: f64,
    pub mt_max: f64,
    pub mt_min: f64,
    /// kW/h
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub ess_charge_max: f64,
    pub ess_discharge_max: f64,
    /// kWh
    pub ess_capacity: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    /// currency/kWh
    pub mt_cost: f64,
    pub shed_penalty: f64,
    /// Multiplier applied to the scenario PV profile for this MG.
    #[serde(default = "one")]
    pub pv_factor: f64,
    /// Multiplier applied to the scenario load profile for this MG.
    #[serde(default = "one")]
    pub load_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for MicrogridParams {
    fn default() -> Self {
        MicrogridParams {
            pv_max: 350.0,
            pv_min: 0.0,
            mt_max: 300.0,
            mt_min: 0.0,
            ramp_up: 100.0,
            ramp_down: 100.0,
            ess_charge_max: 200.0,
            ess_discharge_max: 200.0,
            ess_capacity: 400.0,
            eta_c: 0.98,
            eta_d: 0.98,
            soc_min: 0.1,
            soc_max: 0.9,
            soc_init: 0.5,
            mt_cost: 1.01,
            shed_penalty: 10.0,
            pv_factor: 1.0,
            load_factor: 1.0,
        }
    }
}

impl MicrogridParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let powers = [
            ("pv_max", self.pv_max),
            ("pv_min", self.pv_min),
            ("mt_max", self.mt_max),
            ("mt_min", self.mt_min),
            ("ramp_up", self.ramp_up),
            ("ramp_down", self.ramp_down),
            ("ess_charge_max", self.ess_charge_max),
            ("ess_discharge_max", self.ess_discharge_max),
            ("ess_capacity", self.ess_capacity),
            ("mt_cost", self.mt_cost),
            ("shed_penalty", self.shed_penalty),
            ("pv_factor", self.pv_factor),
            ("load_factor", self.load_factor),
        ];
        for (name, v) in powers {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.mt_min > self.mt_max {
            return bad(format!("mt_min {} exceeds mt_max {}", self.mt_min, self.mt_max));
        }
        if self.pv_min > self.pv_max {
            return bad(format!("pv_min {} exceeds pv_max {}", self.pv_min, self.pv_max));
        }
        for (name, eta) in [("eta_c", self.eta_c), ("eta_d", self.eta_d)] {
            if !(eta > 0.0 && eta <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {eta}"));
            }
        }
        if !(0.0 <= self.soc_min && self.soc_min <= self.soc_init && self.soc_init <= self.soc_max && self.soc_max <= 1.0)
        {
            return bad(format!(
                "need 0 <= soc_min <= soc_init <= soc_max <= 1, got {} / {} / {}",
                self.soc_min, self.soc_init, self.soc_max
            ));
        }
        Ok(())
    }
}

/// Hourly time-of-use purchase prices; sale price is a fixed fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffSchedule {
    /// 24 entries, currency/kWh, indexed by hour of day.
    pub buy_price: Vec<f64>,
    pub sell_ratio: f64,
}

impl TariffSchedule {
    /// Three-level schedule: valley 0.423, flat 0.775, peak 1.189 CNY/kWh,
    /// selling at half the purchase price.
    pub fn time_of_use() -> Self {
        let mut buy_price = vec![0.0; 24];
        for (h, p) in buy_price.iter_mut().enumerate() {
            *p = match h {
                0..=5 | 21..=23 => 0.423,
                6 | 10 | 11 | 15 | 16 => 0.775,
                _ => 1.189,
            };
        }
        TariffSchedule {
            buy_price,
            sell_ratio: 0.5,
        }
    }

    pub fn buy(&self, hour: usize) -> f64 {
        self.buy_price[hour % 24]
    }

    pub fn sell(&self, hour: usize) -> f64 {
        self.sell_ratio * self.buy(hour)
    }

    pub fn max_buy(&self) -> f64 {
        self.buy_price.iter().cloned().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buy_price.len() != 24 {
            return Err(Error::Config(format!(
                "tariff needs 24 hourly prices, got {}",
                self.buy_price.len()
            )));
        }
        if let Some(p) = self.buy_price.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Config(format!("tariff prices must be positive, got {p}")));
        }
        if !(0.0..=1.0).contains(&self.sell_ratio) {
            return Err(Error::Config(format!("sell_ratio must lie in [0, 1], got {}", self.sell_ratio)));
        }
        Ok(())
    }
}

impl Default for TariffSchedule {
    fn default() -> Self {
        Self::time_of_use()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub mgs: Vec<MicrogridParams>,
    /// Aggregate import limit, kW.
    pub grid_buy_max: f64,
    /// Aggregate export limit, kW.
    pub grid_sell_max: f64,
    /// Step length, hours.
    pub dt: f64,
    /// Steps per episode.
    pub horizon: usize,
    pub tariff: TariffSchedule,
}

impl SystemParams {
    pub fn n_agents(&self) -> usize {
        self.mgs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mgs.is_empty() {
            return Err(Error::Config("system needs at least one microgrid".into()));
        }
        for (i, mg) in self.mgs.iter().enumerate() {
            mg.validate().map_err(|e| Error::Config(format!("microgrid {i}: {e}")))?;
            if mg.mt_min > mg.ramp_up * self.dt {
                return Err(Error::Config(format!(
                    "microgrid {i}: mt_min {} is unreachable from a cold start with ramp {}",
                    mg.mt_min, mg.ramp_up
                )));
            }
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        for (name, v) in [("grid_buy_max", self.grid_buy_max), ("grid_sell_max", self.grid_sell_max)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        self.tariff.validate()
    }

    /// System restricted to the listed MGs, in the given order. Grid limits
    /// are kept at their full values.
    pub fn subsystem(&self, members: &[usize]) -> SystemParams {
        SystemParams {
            mgs: members.iter().map(|&i| self.mgs[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn hour_of(&self, t: usize) -> usize {
        ((t as f64 * self.dt).floor() as usize) % 24
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    pub soc: Vec<f64>,
    pub mt_prev: Vec<f64>,
    pub scenario_pv: usize,
    pub scenario_load: usize,
}

/// One MG's local view at the current step, in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Hour of day scaled to `[0, 1)`.
    pub t_norm: f64,
    pub buy_price: f64,
    pub pv: f64,
    pub mt_prev: f64,
    pub load: f64,
    pub soc: f64,
}

/// Fixed per-field divisors that bring observations to order one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObsScale {
    pub price: f64,
    pub pv: f64,
    pub mt: f64,
    pub load: f64,
}

impl ObsScale {
    pub fn new(mg: &MicrogridParams, tariff: &TariffSchedule) -> Self {
        let nz = |x: f64| if x > 0.0 { x } else { 1.0 };
        ObsScale {
            price: nz(tariff.max_buy()),
            pv: nz(mg.pv_max),
            mt: nz(mg.mt_max),
            load: nz(mg.pv_max + mg.mt_max + mg.ess_discharge_max),
        }
    }
}

impl Observation {
    pub fn features(&self, scale: &ObsScale) -> [f64; OBS_DIM] {
        [
            self.t_norm,
            self.buy_price / scale.price,
            self.pv / scale.pv,
            self.mt_prev / scale.mt,
            self.load / scale.load,
            self.soc,
        ]
    }
}

/// Signed ESS power (positive discharges) and MT setpoint, kW.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub p_es: f64,
    pub p_mt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgOutcome {
    pub pv: f64,
    pub load: f64,
    pub p_mt: f64,
    pub p_es: f64,
    pub p_c: f64,
    pub p_d: f64,
    pub p_gb: f64,
    pub p_gs: f64,
    /// Load shed, kW.
    pub p_tl: f64,
    /// Surplus curtailed by the export limit, kW.
    pub p_cur: f64,
    pub soc: f64,
    pub reward: f64,
}

impl MgOutcome {
    /// Left minus right side of the power balance, curtailment included.
    pub fn balance_residual(&self) -> f64 {
        (self.pv + self.p_mt + self.p_d - self.p_c + self.p_gb - self.p_gs - self.p_cur) - (self.load - self.p_tl)
    }
}

/// Cost components of a step, already multiplied by the step length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub mt_cost: f64,
    pub buy_cost: f64,
    pub sell_revenue: f64,
    pub shed_cost: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.mt_cost + self.buy_cost - self.sell_revenue + self.shed_cost
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: usize,
    pub mgs: Vec<MgOutcome>,
    pub team_reward: f64,
    pub cost: CostBreakdown,
}

/// Recorded episode: one outcome per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub horizon: usize,
    pub steps: Vec<StepOutcome>,
}

impl Trajectory {
    pub fn new(dt: f64, horizon: usize) -> Self {
        Trajectory {
            dt,
            horizon,
            steps: Vec::with_capacity(horizon),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.horizon
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "trajectory has {} of {} steps",
                self.steps.len(),
                self.horizon
            )))
        }
    }

    /// Total operating cost over the horizon.
    pub fn episode_cost(&self) -> Result<f64> {
        self.require_complete()?;
        Ok(self.steps.iter().map(|s| s.cost.total()).sum())
    }

    /// Shed energy over the horizon and all MGs, kWh.
    pub fn shed_energy(&self) -> Result<f64> {
        self.require_complete()?;
        Ok(self.steps.iter().flat_map(|s| &s.mgs).map(|m| m.p_tl).sum::<f64>() * self.dt)
    }

    pub fn shed_loss(&self, sigma: f64) -> Result<f64> {
        Ok(sigma * self.shed_energy()?)
    }

    /// Load actually supplied, kWh.
    pub fn served_energy(&self) -> Result<f64> {
        self.require_complete()?;
        Ok(self.steps.iter().flat_map(|s| &s.mgs).map(|m| m.load - m.p_tl).sum::<f64>() * self.dt)
    }
}

/// Environment bound to a system and a scenario set.
#[derive(Clone, Debug)]
pub struct Env {
    params: SystemParams,
    scenarios: ScenarioSet,
    scales: Vec<ObsScale>,
}

impl Env {
    pub fn new(params: SystemParams, scenarios: ScenarioSet) -> Result<Self> {
        params.validate()?;
        scenarios.validate()?;
        if scenarios.horizon() < params.horizon {
            return Err(Error::Config(format!(
                "scenario profiles cover {} steps but the horizon is {}",
                scenarios.horizon(),
                params.horizon
            )));
        }
        let scales = params.mgs.iter().map(|m| ObsScale::new(m, &params.tariff)).collect();
        Ok(Env {
            params,
            scenarios,
            scales,
        })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn scenarios(&self) -> &ScenarioSet {
        &self.scenarios
    }

    pub fn n_agents(&self) -> usize {
        self.params.mgs.len()
    }

    pub fn obs_scale(&self, i: usize) -> &ObsScale {
        &self.scales[i]
    }

    pub fn reset(&self, scenario_pv: usize, scenario_load: usize) -> Result<(EnvState, Vec<Observation>)> {
        if scenario_pv >= self.scenarios.n_pv() || scenario_load >= self.scenarios.n_load() {
            return Err(Error::Config(format!(
                "scenario ({scenario_pv}, {scenario_load}) out of range for a {}x{} set",
                self.scenarios.n_pv(),
                self.scenarios.n_load()
            )));
        }
        let n = self.n_agents();
        let state = EnvState {
            t: 0,
            soc: self.params.mgs.iter().map(|m| m.soc_init).collect(),
            mt_prev: vec![0.0; n],
            scenario_pv,
            scenario_load,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    fn pv(&self, state: &EnvState, i: usize, t: usize) -> f64 {
        let mg = &self.params.mgs[i];
        (mg.pv_factor * self.scenarios.pv_profiles[state.scenario_pv][t]).clamp(mg.pv_min, mg.pv_max)
    }

    fn load(&self, state: &EnvState, i: usize, t: usize) -> f64 {
        self.params.mgs[i].load_factor * self.scenarios.load_profiles[state.scenario_load][t]
    }

    /// Observations at `state.t`. At the terminal step the last profile
    /// values are repeated.
    pub fn observe(&self, state: &EnvState) -> Vec<Observation> {
        let tp = state.t.min(self.params.horizon - 1);
        let hour = self.params.hour_of(state.t);
        let t_norm = ((state.t as f64 * self.params.dt) % 24.0) / 24.0;
        (0..self.n_agents())
            .map(|i| Observation {
                t_norm,
                buy_price: self.params.tariff.buy(hour),
                pv: self.pv(state, i, tp),
                mt_prev: state.mt_prev[i],
                load: self.load(state, i, tp),
                soc: state.soc[i],
            })
            .collect()
    }

    pub fn features(&self, obs: &[Observation]) -> Vec<[f64; OBS_DIM]> {
        obs.iter().zip(&self.scales).map(|(o, s)| o.features(s)).collect()
    }

    /// Clips a raw action into the feasible set of MG `i`: MT output and ramp
    /// limits, ESS power limits, and the tighter ESS limits that keep the next
    /// state of charge within bounds.
    pub fn project_action(&self, raw: Action, state: &EnvState, i: usize) -> Action {
        project_action(raw, &self.params.mgs[i], state.soc[i], state.mt_prev[i], self.params.dt)
    }

    pub fn step(&self, state: &EnvState, actions: &[Action]) -> (EnvState, StepOutcome) {
        assert_eq!(actions.len(), self.n_agents(), "one action per microgrid");
        assert!(state.t < self.params.horizon, "step past the horizon");
        let p = &self.params;
        let dt = p.dt;
        let t = state.t;
        let hour = p.hour_of(t);
        let buy = p.tariff.buy(hour);
        let sell = p.tariff.sell(hour);

        let mut outs: Vec<MgOutcome> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let pv = self.pv(state, i, t);
                let load = self.load(state, i, t);
                let p_c = (-a.p_es).max(0.0);
                let p_d = a.p_es.max(0.0);
                let net = load - pv - a.p_mt - p_d + p_c;
                MgOutcome {
                    pv,
                    load,
                    p_mt: a.p_mt,
                    p_es: a.p_es,
                    p_c,
                    p_d,
                    p_gb: net.max(0.0),
                    p_gs: (-net).max(0.0),
                    p_tl: 0.0,
                    p_cur: 0.0,
                    soc: 0.0,
                    reward: 0.0,
                }
            })
            .collect();

        let shed = ration(outs.iter().map(|o| o.p_gb).collect(), p.grid_buy_max);
        let curtailed = ration(outs.iter().map(|o| o.p_gs).collect(), p.grid_sell_max);
        for (o, ((gb, tl), (gs, cur))) in outs.iter_mut().zip(shed.into_iter().zip(curtailed)) {
            o.p_gb = gb;
            o.p_tl = tl;
            o.p_gs = gs;
            o.p_cur = cur;
        }

        let mut cost = CostBreakdown::default();
        let mut next = state.clone();
        next.t = t + 1;
        for (i, o) in outs.iter_mut().enumerate() {
            let mg = &p.mgs[i];
            let soc = if mg.ess_capacity > 0.0 {
                state.soc[i] + (o.p_c * mg.eta_c - o.p_d / mg.eta_d) * dt / mg.ess_capacity
            } else {
                state.soc[i]
            };
            // Projection guarantees feasibility; the clamp only absorbs rounding.
            o.soc = soc.clamp(mg.soc_min, mg.soc_max);
            next.soc[i] = o.soc;
            next.mt_prev[i] = o.p_mt;
            let mt = mg.mt_cost * o.p_mt;
            let bought = buy * o.p_gb;
            let sold = sell * o.p_gs;
            let shed_cost = mg.shed_penalty * o.p_tl;
            o.reward = -(mt + bought - sold + shed_cost);
            cost.mt_cost += mt * dt;
            cost.buy_cost += bought * dt;
            cost.sell_revenue += sold * dt;
            cost.shed_cost += shed_cost * dt;
        }
        let team_reward = outs.iter().map(|o| o.reward).sum();
        (
            next,
            StepOutcome {
                t,
                mgs: outs,
                team_reward,
                cost,
            },
        )
    }

    /// Runs a full episode from `reset(b, d)` with a per-step policy that maps
    /// `(state, observations)` to raw actions. Actions are projected.
    pub fn rollout<F>(&self, scenario_pv: usize, scenario_load: usize, mut policy: F) -> Result<Trajectory>
    where
        F: FnMut(&EnvState, &[Observation]) -> Vec<Action>,
    {
        let (mut state, mut obs) = self.reset(scenario_pv, scenario_load)?;
        let mut traj = Trajectory::new(self.params.dt, self.params.horizon);
        for _ in 0..self.params.horizon {
            let raw = policy(&state, &obs);
            let actions: Vec<Action> = raw
                .iter()
                .enumerate()
                .map(|(i, a)| self.project_action(*a, &state, i))
                .collect();
            let (next, out) = self.step(&state, &actions);
            traj.steps.push(out);
            state = next;
            obs = self.observe(&state);
        }
        Ok(traj)
    }
}

/// Free-standing projection for one MG; see [`Env::project_action`].
pub fn project_action(raw: Action, mg: &MicrogridParams, soc: f64, mt_prev: f64, dt: f64) -> Action {
    let finite = |x: f64| if x.is_nan() { 0.0 } else { x };
    let mt_lo = mg.mt_min.max(mt_prev - mg.ramp_down * dt);
    let mt_hi = mg.mt_max.min(mt_prev + mg.ramp_up * dt);
    let p_mt = finite(raw.p_mt).clamp(mt_lo, mt_hi.max(mt_lo));

    let (charge_room, discharge_room) = if mg.ess_capacity > 0.0 {
        (
            ((mg.soc_max - soc) * mg.ess_capacity / (mg.eta_c * dt)).max(0.0),
            ((soc - mg.soc_min) * mg.ess_capacity * mg.eta_d / dt).max(0.0),
        )
    } else {
        (0.0, 0.0)
    };
    let es_lo = -mg.ess_charge_max.min(charge_room);
    let es_hi = mg.ess_discharge_max.min(discharge_room);
    let p_es = finite(raw.p_es).clamp(es_lo, es_hi);
    Action { p_es, p_mt }
}

/// Caps the sum of `requests` at `limit` by scaling each pro-rata. Returns
/// `(granted, refused)` per entry; `granted + refused == request` and the
/// granted total never exceeds `limit`.
fn ration(requests: Vec<f64>, limit: f64) -> Vec<(f64, f64)> {
    let total: f64 = requests.iter().sum();
    if total <= limit {
        return requests.into_iter().map(|r| (r, 0.0)).collect();
    }
    let ratio = limit / total;
    let mut granted: Vec<f64> = requests.iter().map(|r| r * ratio).collect();
    // Scaling can overshoot the limit by a few ulps; take the excess off the
    // largest grant until the sum is within the limit.
    loop {
        let sum: f64 = granted.iter().sum();
        if sum <= limit {
            break;
        }
        let (k, _) = granted
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (k, &g)| if g > best.1 { (k, g) } else { best });
        granted[k] = (granted[k] - (sum - limit)).max(0.0);
        if sum - limit < f64::EPSILON * limit {
            granted[k] = granted[k].next_down().max(0.0);
        }
    }
    requests.into_iter().zip(granted).map(|(r, g)| (g, r - g)).collect()
}
