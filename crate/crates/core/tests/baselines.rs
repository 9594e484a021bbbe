use oreo_core::baselines::{
    dpo_loss, dpo_margin, dpo_train, make_preference_pairs, read_pairs_jsonl, rejection_sampling_train, sft_loss,
    sft_train, write_pairs_jsonl, PreferencePair, DEFAULT_PAIR_CAP,
};
use oreo_core::envs::{
    full_coverage_dataset, generate_offline_dataset, DigitChain, DigitChainSpec, Keyhole, KeyholeSpec,
};
use oreo_core::mdp::{PolicyTable, TaskMdp, DEFAULT_ENUM_CAP};
use oreo_core::trainer::TrainConfig;
use oreo_core::OreoError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CAP: usize = DEFAULT_ENUM_CAP;

fn keyhole() -> (Keyhole, PolicyTable) {
    let mdp = Keyhole::new(KeyholeSpec::default()).unwrap();
    let u = PolicyTable::uniform(&mdp, CAP).unwrap();
    (mdp, u)
}

#[test]
fn sft_loss_of_deterministic_matching_policy_is_zero() {
    let (mdp, _) = keyhole();
    let pi = PolicyTable::from_fn(&mdp, CAP, |_, a| {
        a.iter()
            .map(|x| if *x == 1 { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    })
    .unwrap();
    let t = full_coverage_dataset(&mdp, CAP).unwrap().trajectories.remove(7);
    assert!(t.steps.iter().all(|s| s.action == 1));
    assert_eq!(sft_loss(&t, &pi).unwrap(), 0.0);
}

#[test]
fn rejection_sampling_raises_key_probability_each_epoch() {
    let (mdp, u) = keyhole();
    let data = generate_offline_dataset(&mdp, &u, 10, 1).unwrap();
    let s0 = &mdp.initial_states()[0];
    let positives = data.filter(|t| t.total_reward() > 0.0);
    let mut prev_key = 0.5;
    let mut prev_ll = f64::NEG_INFINITY;
    for epochs in 1..=12 {
        let cfg = TrainConfig {
            epochs,
            ..Default::default()
        };
        let m = rejection_sampling_train(&data, &mdp, &u, &cfg).unwrap();
        let key = m.policy.probs(s0).unwrap()[1];
        assert!(key > prev_key, "epoch {epochs}: {key} <= {prev_key}");
        prev_key = key;
        let ll: f64 = positives
            .trajectories
            .iter()
            .map(|t| -sft_loss(t, &m.policy).unwrap())
            .sum();
        assert!(ll >= prev_ll);
        prev_ll = ll;
        assert!(m.value.iter().all(|(_, v)| *v == 0.0));
    }
}

#[test]
fn rejection_sampling_on_positive_only_data_is_sft() {
    let (mdp, u) = keyhole();
    let data = generate_offline_dataset(&mdp, &u, 10, 2)
        .unwrap()
        .filter(|t| t.total_reward() > 0.0);
    let cfg = TrainConfig {
        epochs: 7,
        ..Default::default()
    };
    let a = rejection_sampling_train(&data, &mdp, &u, &cfg).unwrap();
    let b = sft_train(&data, &mdp, &u, &cfg).unwrap();
    assert_eq!(a.policy, b.policy);
}

#[test]
fn dpo_separates_winners_from_losers() {
    let mdp = DigitChain::new(DigitChainSpec {
        instances: 5,
        ..Default::default()
    })
    .unwrap();
    let u = PolicyTable::uniform(&mdp, CAP).unwrap();
    let data = full_coverage_dataset(&mdp, CAP).unwrap();
    let pairs = make_preference_pairs(&data, DEFAULT_PAIR_CAP, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(pairs.len(), 5 * 6);
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::dpo_default()
    };
    let m = dpo_train(&pairs, &mdp, &u, &cfg).unwrap();
    let mean_margin: f64 = pairs
        .iter()
        .map(|p| dpo_margin(p, &m.policy, &u, cfg.beta).unwrap())
        .sum::<f64>()
        / pairs.len() as f64;
    assert!(mean_margin > 0.0);
    let first = m.history.first().unwrap().policy_loss;
    assert!(first < 2f64.ln());
    assert!(m.value.iter().all(|(_, v)| *v == 0.0));
    assert!(matches!(dpo_train(&[], &mdp, &u, &cfg), Err(OreoError::Contract(_))));
}

#[test]
fn pairs_are_seeded_and_round_trip() {
    let (mdp, u) = keyhole();
    let data = generate_offline_dataset(&mdp, &u, 10, 5).unwrap();
    let a = make_preference_pairs(&data, 6, &mut ChaCha8Rng::seed_from_u64(3));
    let b = make_preference_pairs(&data, 6, &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(a, b);
    let mut buf = Vec::new();
    write_pairs_jsonl("keyhole", &a, &mut buf).unwrap();
    let back = read_pairs_jsonl(buf.as_slice(), &mdp).unwrap();
    assert_eq!(back, a);
    for p in &a {
        assert!(p.winner.total_reward() > p.loser.total_reward());
        assert_eq!(p.winner.initial_state().tokens(), p.task.as_slice());
    }
}

proptest! {
    #[test]
    fn dpo_loss_depends_only_on_scaled_margin(
        z in prop::collection::vec(-3.0f64..3.0, 7),
        beta in 0.01f64..2.0,
        c in 0.1f64..10.0,
    ) {
        let (mdp, u) = keyhole();
        let mut it = z.into_iter();
        let pi = PolicyTable::from_fn(&mdp, CAP, |_, a| {
            let x = it.next().unwrap();
            a.iter().map(|b| if *b == 1 { x } else { 0.0 }).collect()
        }).unwrap();
        let ts = full_coverage_dataset(&mdp, CAP).unwrap().trajectories;
        let pair = PreferencePair {
            task: ts[0].initial_state().tokens().to_vec(),
            winner: ts[5].clone(),
            loser: ts[2].clone(),
        };
        let m = dpo_margin(&pair, &pi, &u, beta).unwrap();
        let l = dpo_loss(&pair, &pi, &u, beta).unwrap();
        prop_assert!((l - (1.0 + (-m).exp()).ln()).abs() <= 1e-12 * l.max(1.0));
        let mc = dpo_margin(&pair, &pi, &u, beta * c).unwrap();
        prop_assert!((mc - c * m).abs() <= 1e-12 * mc.abs().max(1.0));
        prop_assert!((dpo_loss(&pair, &u, &u, beta).unwrap() - 2f64.ln()).abs() <= 1e-15);
    }
}
