use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riskgrid::agent::{gae, normalize_advantages, ActMode, ActionMap, ActorPolicy, LOG_STD_MAX};
use riskgrid::env::MicrogridParams;
use riskgrid::neural::{Graph, ParamStore, Tensor};

fn series(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

proptest! {
    #[test]
    fn gae_limits((r, v) in (1usize..20).prop_flat_map(|n| (series(n), series(n))), gamma in 0.5..1.0f64) {
        let n = r.len();
        let td = gae(&r, &v, gamma, 0.0).unwrap();
        let mc = gae(&r, &v, gamma, 1.0).unwrap();
        for t in 0..n {
            let next = if t + 1 < n { v[t + 1] } else { 0.0 };
            prop_assert!((td[t] - (r[t] + gamma * next - v[t])).abs() < 1e-12);
            let ret: f64 = (t..n).map(|k| gamma.powi((k - t) as i32) * r[k]).sum();
            prop_assert!((mc[t] - (ret - v[t])).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_advantages_are_standard(mut adv in prop::collection::vec(-100.0..100.0f64, 2..50)) {
        let spread = adv.iter().cloned().fold(f64::MIN, f64::max) - adv.iter().cloned().fold(f64::MAX, f64::min);
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        if spread > 1e-6 {
            let var = adv.iter().map(|a| a * a).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(gae(&[1.0, 2.0], &[0.0], 0.99, 0.95).is_err());
}

#[test]
fn mean_actions_stay_in_the_box_and_map_to_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let policy = ActorPolicy::new(&mut store, "p", 4, 8, -0.5, &mut rng);
    for k in 0..100 {
        let f = [k as f64, -(k as f64), 0.5, 100.0];
        let (a, _) = policy.act(&store, &f, ActMode::Mean, &mut rng);
        assert!(a.iter().all(|x| x.abs() <= 1.0));
    }
    let mg = MicrogridParams::default();
    let map = ActionMap::new(&mg);
    let lo = map.to_physical(&[-1.0, -1.0]);
    let hi = map.to_physical(&[1.0, 1.0]);
    assert_eq!((lo.p_es, lo.p_mt), (-mg.ess_charge_max, mg.mt_min));
    assert_eq!((hi.p_es, hi.p_mt), (mg.ess_discharge_max, mg.mt_max));
}

#[test]
fn sampled_log_prob_matches_the_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let policy = ActorPolicy::new(&mut store, "p", 3, 5, 0.3, &mut rng);
    let f = [0.2, -0.4, 0.9];
    for _ in 0..20 {
        let (a, lp) = policy.act(&store, &f, ActMode::Sample, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(&f));
        let node = policy.log_prob(&mut g, &store, x, &Tensor::row_vector(&a));
        assert!((g.value(node).data()[0] - lp).abs() < 1e-12);
    }
}

#[test]
fn log_std_is_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let policy = ActorPolicy::new(&mut store, "p", 2, 2, 10.0, &mut rng);
    assert_eq!(policy.log_std_values(&store), [LOG_STD_MAX; 2]);
}
