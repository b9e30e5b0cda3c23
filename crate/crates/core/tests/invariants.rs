use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use airground::env::{trip_breakdown, Assignment, Env, EnvConfig, EventKind, Stage};
use airground::harness::{validate_trace, Stat, TraceRecord};
use airground::neural::{decode, encode, ActorCritic, Checkpoint, ModelConfig, Tensor};
use airground::ppo::{clip_loss, ratio};

fn small_env(passengers: usize, seats: usize, interval: usize, seed: u64) -> Env {
    let cfg = EnvConfig {
        total_passengers: passengers,
        seats,
        request_interval_steps: interval,
        progress_feature: true,
        ..EnvConfig::default()
    };
    Env::new(cfg, seed).unwrap()
}

/// Plays random assignments, a quarter of them ground-only.
fn play_random(env: &mut Env, rng: &mut ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    while !env.is_done() {
        let a = if rng.gen_bool(0.25) {
            Assignment::GroundOnly
        } else {
            let ids = env.departure_ids();
            Assignment::Vertiport(ids[rng.gen_range(0..ids.len())])
        };
        total += env.step_assignment(a).unwrap().0;
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_trip_is_ordered_and_consistent(
        passengers in 1usize..60,
        seats in 1usize..5,
        interval in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut env = small_env(passengers, seats, interval, seed);
        env.enable_trace();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reward = play_random(&mut env, &mut rng);

        let mut att = 0.0;
        for p in env.passengers() {
            prop_assert_eq!(p.stage, Stage::Delivered);
            let b = trip_breakdown(p, 0.0).unwrap();
            for part in [b.ground_access, b.wait, b.air, b.ground_egress] {
                prop_assert!(part >= 0.0, "negative stage {part} for passenger {}", p.id);
            }
            if p.ground_only {
                prop_assert_eq!(b.wait + b.air, 0.0);
            }
            att += b.total();
        }
        att /= passengers as f64;
        prop_assert!((reward + att).abs() < 1e-6);

        let trace = env.take_trace();
        for d in trace.iter().filter(|e| e.kind == EventKind::Depart) {
            prop_assert!(!d.passengers.is_empty() && d.passengers.len() <= seats);
        }
        let records: Vec<TraceRecord> = trace
            .into_iter()
            .map(|event| TraceRecord { policy: "random".into(), seed, event })
            .collect();
        prop_assert!(validate_trace(&records).is_ok());
    }

    #[test]
    fn same_seed_same_episode(passengers in 1usize..40, seed in any::<u64>()) {
        let run = || {
            let mut env = small_env(passengers, 3, 2, seed);
            env.enable_trace();
            play_random(&mut env, &mut ChaCha8Rng::seed_from_u64(seed));
            env.take_trace()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn clipped_surrogate_is_pessimistic(logp_new in -5.0f64..0.0, logp_old in -5.0f64..0.0, adv in -10.0f64..10.0, eps in 0.01f64..0.5) {
        let rho = ratio(logp_new, logp_old);
        let l = clip_loss(rho, adv, eps);
        prop_assert!(l <= rho * adv + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&rho) {
            prop_assert!((l - rho * adv).abs() < 1e-12);
        }
    }

    #[test]
    fn population_variance(xs in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let s = Stat::of(&xs);
        prop_assert!(s.var >= 0.0);
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-9 && s.mean <= hi + 1e-9);
        prop_assert!(s.var <= (hi - lo).powi(2) / 4.0 + 1e-6);
    }

    #[test]
    fn policy_is_a_distribution(seed in any::<u64>(), msce in any::<bool>(), stin in any::<bool>()) {
        let cfg = ModelConfig { d_raw: 5, stack_len: 3, d_model: 8, layers: 1, heads: 2, d_ff: 8, d_out: 8, n_actions: 3, use_msce: msce, use_stin: stin };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ActorCritic::new(cfg, &mut rng).unwrap();
        let states = Tensor::from_vec(4, 15, (0..60).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (probs, values) = model.evaluate(&states).unwrap();
        prop_assert_eq!(values.len(), 4);
        for p in probs {
            prop_assert!(p.iter().all(|&x| x > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), layers in 1usize..3) {
        let cfg = ModelConfig { d_raw: 4, stack_len: 2, d_model: 8, layers, heads: 2, d_ff: 8, d_out: 4, n_actions: 2, use_msce: true, use_stin: true };
        let model = ActorCritic::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bytes = encode(&Checkpoint::from_model(&model, "meta")).unwrap();
        let back = decode(&bytes).unwrap().into_model().unwrap();
        prop_assert_eq!(back.params().values(), model.params().values());
    }
}
