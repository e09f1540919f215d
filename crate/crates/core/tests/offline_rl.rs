use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tge_core::nncore::soft_update;
use tge_core::offline_rl::*;
use tge_core::trajdata::*;
use tge_core::Error;

fn small_opts(steps: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        steps,
        seed,
        log_every: steps / 2,
        eval_env: None,
        eval_episodes: 5,
    }
}

/// Normalized random-policy data with rewards in [0, 1] given by `f(state row)`.
fn buffer_with<F: Fn(usize) -> f32>(
    env: EnvSpec,
    kind: PolicyKind,
    n: usize,
    f: F,
) -> TransitionBuffer {
    let ds = generate_toy_dataset(env, kind, n, 5).unwrap();
    let (ds, _) = normalize_observations(&ds).unwrap();
    let rewards: Vec<f32> = (0..ds.num_transitions()).map(f).collect();
    TransitionBuffer::from_parts(&ds, &rewards).unwrap()
}

#[test]
fn scripted_anchors_score_100_and_0() {
    for env in [EnvSpec::PointMass2d, EnvSpec::SineWalker1d] {
        let expert = evaluate_policy(
            env,
            &ScriptedPolicy {
                env,
                kind: PolicyKind::Expert,
            },
            50,
            7,
        )
        .unwrap();
        let random = evaluate_policy(
            env,
            &ScriptedPolicy {
                env,
                kind: PolicyKind::Random,
            },
            50,
            8,
        )
        .unwrap();
        assert!(
            (expert.normalized_score - 100.0).abs() <= 3.0,
            "{env} expert {}",
            expert.normalized_score
        );
        assert!(
            random.normalized_score.abs() <= 3.0,
            "{env} random {}",
            random.normalized_score
        );
        assert_eq!(expert.returns.len(), 50);
    }
}

#[test]
fn evaluation_is_repeatable_and_needs_episodes() {
    let env = EnvSpec::SineWalker1d;
    let p = ScriptedPolicy {
        env,
        kind: PolicyKind::Medium,
    };
    let a = evaluate_policy(env, &p, 12, 3).unwrap();
    let b = evaluate_policy(env, &p, 12, 3).unwrap();
    assert_eq!(a, b);
    // Episode i only depends on its own stream.
    let c = evaluate_policy(env, &p, 4, 3).unwrap();
    assert_eq!(&a.returns[..4], &c.returns[..]);
    assert!(evaluate_policy(env, &p, 0, 3).unwrap_err().is_config());
}

#[test]
fn target_contraction_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ReBRACConfig {
        hidden: vec![16, 16],
        ..Default::default()
    };
    let mut b = PolicyBundle::new(Backbone::Rebrac, cfg.architecture(), 4, 2, &mut rng);
    // Move the online critic away from its target.
    for p in b.q1.as_mut().unwrap().params.iter_mut() {
        p.value.mapv_inplace(|x| x * 1.5 + 0.1);
    }
    let online = b.q1.as_ref().unwrap().params.clone();
    let target = b.q1_target.as_mut().unwrap();
    let before = target.distance_sq(&online).sqrt();
    soft_update(target, &online, cfg.tau);
    let after = target.distance_sq(&online).sqrt();
    assert!(
        (after / before - (1.0 - cfg.tau)).abs() < 1e-5,
        "{}",
        after / before
    );
}

#[test]
fn reward_shift_keeps_greedy_actions() {
    // Two states, two actions, deterministic transitions next[s][a].
    let next = [[0usize, 1], [0, 1]];
    let r = [[0.2f64, 0.0], [0.0, 0.5]];
    let gamma = 0.9;
    let solve = |shift: f64| {
        let mut q = [[0.0f64; 2]; 2];
        for _ in 0..2000 {
            let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
            let mut nq = [[0.0; 2]; 2];
            for s in 0..2 {
                for a in 0..2 {
                    nq[s][a] = r[s][a] + shift + gamma * v[next[s][a]];
                }
            }
            q = nq;
        }
        q
    };
    let q0 = solve(0.0);
    for c in [-3.0, 0.7, 10.0] {
        let qc = solve(c);
        for s in 0..2 {
            let g0 = (q0[s][1] > q0[s][0]) as usize;
            let gc = (qc[s][1] > qc[s][0]) as usize;
            assert_eq!(g0, gc, "state {s} shift {c}");
            for a in 0..2 {
                // The whole table moves by the discounted offset.
                assert!((qc[s][a] - q0[s][a] - c / (1.0 - gamma)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rebrac_rejects_unnormalized_rewards() {
    let buf = buffer_with(EnvSpec::SineWalker1d, PolicyKind::Random, 300, |i| i as f32);
    let err = rebrac_train_buffer(&buf, &ReBRACConfig::default(), &small_opts(4, 0)).unwrap_err();
    assert!(matches!(err, Error::OutOfRange(_)), "{err}");
    let unweighted = ReBRACConfig {
        reward_weighted_bc: false,
        hidden: vec![8],
        batch_size: 16,
        ..Default::default()
    };
    assert!(rebrac_train_buffer(&buf, &unweighted, &small_opts(4, 0)).is_ok());
}

#[test]
fn trainers_need_a_normalizer() {
    let ds = generate_toy_dataset(EnvSpec::SineWalker1d, PolicyKind::Random, 300, 5).unwrap();
    let buf = TransitionBuffer::from_parts(&ds, &vec![0.5; 300]).unwrap();
    assert!(
        iql_train_buffer(&buf, &IQLConfig::default(), &small_opts(2, 0))
            .unwrap_err()
            .is_config()
    );
    assert!(bc_train(&ds, &BCConfig::default(), &small_opts(2, 0))
        .unwrap_err()
        .is_config());
}

#[test]
fn training_is_deterministic_and_bundles_round_trip() {
    let buf = buffer_with(EnvSpec::PointMass2d, PolicyKind::Medium, 600, |i| {
        (i % 7) as f32 / 6.0
    });
    let dir = tempfile::tempdir().unwrap();
    let rebrac = ReBRACConfig {
        hidden: vec![16, 16],
        batch_size: 32,
        ..Default::default()
    };
    let iql = IQLConfig {
        hidden: vec![16, 16],
        batch_size: 32,
        dropout: 0.1,
        ..Default::default()
    };
    let runs: Vec<(TrainOutput, TrainOutput)> = vec![
        (
            rebrac_train_buffer(&buf, &rebrac, &small_opts(40, 9)).unwrap(),
            rebrac_train_buffer(&buf, &rebrac, &small_opts(40, 9)).unwrap(),
        ),
        (
            iql_train_buffer(&buf, &iql, &small_opts(40, 9)).unwrap(),
            iql_train_buffer(&buf, &iql, &small_opts(40, 9)).unwrap(),
        ),
    ];
    let states = Array2::from_shape_fn((5, 4), |(i, j)| (i as f32 - 2.0) * 0.3 + j as f32 * 0.1);
    for (k, (a, b)) in runs.iter().enumerate() {
        assert_eq!(a.bundle.encode().unwrap(), b.bundle.encode().unwrap());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        assert!(a
            .log
            .iter()
            .all(|r| r.critic_loss.unwrap().is_finite() && r.actor_loss.unwrap().is_finite()));
        assert_eq!(a.bundle.step, 40);
        let path = dir.path().join(format!("policy{k}.bin"));
        a.bundle.save(&path).unwrap();
        let loaded = PolicyBundle::load(&path).unwrap();
        assert_eq!(loaded.encode().unwrap(), a.bundle.encode().unwrap());
        let acts = loaded.act(&states).unwrap();
        assert_eq!(acts, a.bundle.act(&states).unwrap());
        assert!(acts.iter().all(|x| x.abs() <= 1.0));
    }
    assert!(runs[1].0.log[0].value_loss.is_some());
    assert!(runs[0].0.log[0].value_loss.is_none());

    let mut bytes = runs[0].0.bundle.encode().unwrap();
    bytes.pop();
    assert!(PolicyBundle::decode(&bytes).is_err());
}

#[test]
fn bc_on_expert_data_recovers_the_expert() {
    let env = EnvSpec::PointMass2d;
    let ds = generate_toy_dataset(env, PolicyKind::Expert, 3000, 1).unwrap();
    let (ds, _) = normalize_observations(&ds).unwrap();
    let cfg = BCConfig {
        hidden: vec![64, 64],
        ..Default::default()
    };
    let opts = TrainOptions {
        eval_env: Some(env),
        eval_episodes: 20,
        ..small_opts(1500, 2)
    };
    let out = bc_train(&ds, &cfg, &opts).unwrap();
    let score = out.log.last().unwrap().normalized_score.unwrap();
    assert!(score > 90.0, "bc score {score}");
    let csv = log_to_csv(&out.log);
    assert!(csv.starts_with(LOG_COLUMNS));
    assert_eq!(csv.lines().count(), 3);
}
