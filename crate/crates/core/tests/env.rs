use proptest::prelude::*;

use riskgrid::config::RunConfig;
use riskgrid::env::{project_action, Action, Env, MicrogridParams, OBS_DIM};

fn finite_or_nan() -> impl Strategy<Value = f64> {
    prop_oneof![9 => -1000.0..1000.0f64, 1 => Just(f64::NAN)]
}

proptest! {
    #[test]
    fn projection_respects_ramp_and_storage(
        p_es in finite_or_nan(),
        p_mt in finite_or_nan(),
        soc in 0.1..=0.9f64,
        mt_prev in 0.0..=300.0f64,
    ) {
        let mg = MicrogridParams::default();
        let a = project_action(Action { p_es, p_mt }, &mg, soc, mt_prev, 1.0);
        prop_assert!(a.p_mt.is_finite() && a.p_es.is_finite());
        prop_assert!(a.p_mt >= mg.mt_min && a.p_mt <= mg.mt_max);
        prop_assert!((a.p_mt - mt_prev).abs() <= mg.ramp_up + 1e-9);
        prop_assert!(a.p_es <= mg.ess_discharge_max && -a.p_es <= mg.ess_charge_max);
        let (p_c, p_d) = ((-a.p_es).max(0.0), a.p_es.max(0.0));
        let next = soc + (p_c * mg.eta_c - p_d / mg.eta_d) / mg.ess_capacity;
        prop_assert!(next >= mg.soc_min - 1e-12 && next <= mg.soc_max + 1e-12);
    }

    #[test]
    fn projection_is_idempotent(p_es in -500.0..500.0f64, p_mt in -100.0..500.0f64, soc in 0.1..=0.9f64, mt_prev in 0.0..=300.0f64) {
        let mg = MicrogridParams::default();
        let once = project_action(Action { p_es, p_mt }, &mg, soc, mt_prev, 1.0);
        prop_assert_eq!(project_action(once, &mg, soc, mt_prev, 1.0), once);
    }
}

#[test]
fn random_rollouts_balance_and_respect_limits() {
    let cfg = RunConfig::desk();
    let (_, test) = cfg.build_scenarios().unwrap();
    let env = Env::new(cfg.system.clone(), test).unwrap();
    let mut k = 0u64;
    for b in 0..env.scenarios().n_pv() {
        for d in 0..env.scenarios().n_load() {
            let traj = env
                .rollout(b, d, |_, obs| {
                    obs.iter()
                        .map(|_| {
                            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            let u = (k >> 11) as f64 / (1u64 << 53) as f64;
                            Action { p_es: 600.0 * u - 300.0, p_mt: 400.0 * (1.0 - u) }
                        })
                        .collect()
                })
                .unwrap();
            assert!(traj.is_complete());
            for step in &traj.steps {
                let buy: f64 = step.mgs.iter().map(|m| m.p_gb).sum();
                let sell: f64 = step.mgs.iter().map(|m| m.p_gs).sum();
                assert!(buy <= cfg.system.grid_buy_max && sell <= cfg.system.grid_sell_max);
                let team: f64 = step.mgs.iter().map(|m| m.reward).sum();
                assert!((team - step.team_reward).abs() < 1e-9);
                assert!((step.team_reward + step.cost.total()).abs() < 1e-6 * step.cost.total().abs().max(1.0));
                for m in &step.mgs {
                    assert!(m.balance_residual().abs() < 1e-9);
                    assert!(m.p_tl >= 0.0 && m.p_tl <= m.load + 1e-9);
                    assert_eq!(m.p_gb * m.p_gs, 0.0);
                }
            }
            let cost = traj.episode_cost().unwrap();
            let rewards: f64 = traj.steps.iter().map(|s| s.team_reward).sum();
            assert!((cost + rewards).abs() < 1e-6 * cost.abs().max(1.0));
        }
    }
}

#[test]
fn features_are_order_one() {
    let cfg = RunConfig::desk();
    let (train, _) = cfg.build_scenarios().unwrap();
    let env = Env::new(cfg.system.clone(), train).unwrap();
    let (state, obs) = env.reset(0, 0).unwrap();
    let f = env.features(&obs);
    assert_eq!(f.len(), cfg.system.n_agents());
    assert!(f.iter().flatten().all(|x| x.is_finite() && (0.0..=2.0).contains(x)));
    assert_eq!(f[0].len(), OBS_DIM);
    let (next, _) = env.step(&state, &vec![Action::default(); cfg.system.n_agents()]);
    assert_eq!(next.t, 1);
}
