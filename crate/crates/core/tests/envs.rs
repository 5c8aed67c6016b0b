use o2o_core::envs::{
    derive_score_reference, reset, scripted_action, scripted_mean_return, step, Dynamics, EnvId,
    ScoreReference, ScriptedPolicy, SCORE_REFERENCE_EPISODES, SCORE_REFERENCE_SEED,
};
use o2o_core::numerics::Rng;

#[test]
fn committed_score_references_reproduce() {
    for id in EnvId::ALL {
        let derived = derive_score_reference(&id.spec(), SCORE_REFERENCE_EPISODES, SCORE_REFERENCE_SEED);
        assert_eq!(derived, ScoreReference::builtin(id), "{id}");
        assert!(derived.expert_return > derived.random_return);
    }
}

#[test]
fn expert_matches_stored_return_within_two_percent() {
    let rng = Rng::seed_from(777);
    for id in EnvId::ALL {
        let reference = ScoreReference::builtin(id);
        let mean = scripted_mean_return(&id.spec(), ScriptedPolicy::Expert, 100, &rng);
        let rel = (mean - reference.expert_return).abs() / reference.expert_return.abs();
        assert!(rel < 0.02, "{id}: mean {mean} vs stored {}", reference.expert_return);
    }
}

#[test]
fn medium_policy_lands_in_band() {
    let rng = Rng::seed_from(4242);
    for id in EnvId::ALL {
        let reference = ScoreReference::builtin(id);
        let mean = scripted_mean_return(&id.spec(), ScriptedPolicy::Medium, 100, &rng);
        let score = reference.normalized_score(mean).unwrap();
        assert!((40.0..=70.0).contains(&score), "{id}: medium score {score}");
    }
}

#[test]
fn initial_states_stay_in_documented_box() {
    let rng = Rng::seed_from(5);
    for id in EnvId::ALL {
        let spec = id.spec();
        for k in 0..10_000 {
            let s = reset(&spec, &mut rng.substream_indexed("reset", k));
            let o = &s.observation;
            match spec.dynamics {
                Dynamics::PointMass {
                    init_center,
                    init_half_width,
                    init_speed_half_width,
                    ..
                } => {
                    for i in 0..2 {
                        assert!((o[i] - init_center[i]).abs() <= init_half_width);
                        assert!(o[2 + i].abs() <= init_speed_half_width);
                    }
                }
                Dynamics::Pendulum {
                    init_angle_half_width,
                    init_speed_half_width,
                    ..
                } => {
                    // Hanging down: cos θ near -1.
                    assert!(o[0] <= -init_angle_half_width.cos() + 1e-12);
                    assert!(o[1].abs() <= init_angle_half_width.sin() + 1e-12);
                    assert!(o[2].abs() <= init_speed_half_width);
                }
            }
        }
    }
}

#[test]
fn replaying_actions_reproduces_returns_bit_exactly() {
    for id in EnvId::ALL {
        let spec = id.spec();
        let mut rng = Rng::seed_from(99);
        let start = reset(&spec, &mut rng);
        let mut actions = Vec::new();
        let mut s = start.clone();
        let mut first = 0.0;
        while !s.terminal {
            let a = scripted_action(&spec, ScriptedPolicy::Medium, &s.observation, &mut rng);
            let out = step(&spec, &s, &a).unwrap();
            first += out.reward;
            actions.push(a);
            s = out.next;
        }
        let mut s = start;
        let mut second = 0.0;
        for a in &actions {
            let out = step(&spec, &s, a).unwrap();
            second += out.reward;
            s = out.next;
        }
        assert_eq!(first.to_bits(), second.to_bits());
    }
}
