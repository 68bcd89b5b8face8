use ndarray::Array2;
use num_complex::Complex64;
use risloc::channel::PilotParams;
use risloc::dataset::{sample_episodes, Episode};
use risloc::features::FeatureMode;
use risloc::graph::BatchConsts;
use risloc::policy::{
    check_policy_gradients, loss_average, loss_final, lstm_step, position_head, ris_head, rollout,
    run_episodes, ActivePolicy, EpisodeTrace, LstmVars, PolicyShape, PolicyVars, PolicyWeights,
};
use risloc::scene::{Scene, Vec3};
use risloc::training::{fit, LossKind, Trainable, TrainingConfig};
use risloc_autodiff::Tape;

fn small_shape() -> PolicyShape {
    PolicyShape {
        hidden: 4,
        head_width: 6,
        head_layers: 4,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn trace_with(estimates: Vec<Vec3>) -> EpisodeTrace {
    EpisodeTrace {
        thetas: vec![],
        pilots: vec![],
        features: vec![],
        hidden: vec![],
        cell: vec![],
        estimates,
    }
}

#[test]
fn zero_weights_kill_the_cell_from_zero_state() {
    let w = PolicyWeights::zeros(small_shape(), FeatureMode::Pilot, 4);
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let feat = tape.constant(Array2::from_shape_vec((2, 2), vec![0.3, -1.7, 5.0, 2.0]).unwrap());
    let st = LstmVars::zeros(&mut tape, 2, 4);
    let next = lstm_step(&mut tape, &p, st, feat).unwrap();
    assert!(tape.value(next.c).iter().all(|v| *v == 0.0));
    assert!(tape.value(next.s).iter().all(|v| *v == 0.0));
}

#[test]
fn zero_weights_halve_the_prior_cell() {
    let w = PolicyWeights::zeros(small_shape(), FeatureMode::Pilot, 4);
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let c0 = Array2::from_shape_vec((1, 4), vec![1.0, -2.0, 0.5, 4.0]).unwrap();
    let st = LstmVars {
        s: tape.constant(Array2::zeros((1, 4))),
        c: tape.constant(c0.clone()),
    };
    let feat = tape.constant(Array2::from_elem((1, 2), 0.9));
    let next = lstm_step(&mut tape, &p, st, feat).unwrap();
    for k in 0..4 {
        let c = tape.value(next.c)[[0, k]];
        let s = tape.value(next.s)[[0, k]];
        assert!((c - 0.5 * c0[[0, k]]).abs() < 1e-15);
        assert!((s - 0.5 * (0.5 * c0[[0, k]]).tanh()).abs() < 1e-15);
    }
}

#[test]
fn lstm_step_matches_straight_line_loops() {
    let shape = small_shape();
    let mut w = PolicyWeights::random(shape, FeatureMode::Pilot, 4, 11);
    w.randomize_biases(0.7, 11);
    let h = shape.hidden;
    let x = [0.4, -1.1];
    let s0 = [0.2, -0.3, 0.6, 0.1];
    let c0 = [-0.5, 0.9, 0.05, 1.2];

    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let feat = tape.constant(Array2::from_shape_vec((1, 2), x.to_vec()).unwrap());
    let st = LstmVars {
        s: tape.constant(Array2::from_shape_vec((1, h), s0.to_vec()).unwrap()),
        c: tape.constant(Array2::from_shape_vec((1, h), c0.to_vec()).unwrap()),
    };
    let next = lstm_step(&mut tape, &p, st, feat).unwrap();

    let u = w.params.get("lstm.u").unwrap();
    let wm = w.params.get("lstm.w").unwrap();
    let b = w.params.get("lstm.b").unwrap();
    let pre = |col: usize| {
        let mut z = b[[0, col]];
        for (i, xi) in x.iter().enumerate() {
            z += xi * u[[i, col]];
        }
        for (i, si) in s0.iter().enumerate() {
            z += si * wm[[i, col]];
        }
        z
    };
    for k in 0..h {
        let cand = pre(k).tanh();
        let f = sigmoid(pre(h + k));
        let i = sigmoid(pre(2 * h + k));
        let o = sigmoid(pre(3 * h + k));
        let c = f * c0[k] + i * cand;
        let s = o * c.tanh();
        assert!((tape.value(next.c)[[0, k]] - c).abs() < 1e-14);
        assert!((tape.value(next.s)[[0, k]] - s).abs() < 1e-14);
    }
}

#[test]
fn ris_head_bias_only_and_three_four_five() {
    let n = 4;
    let mut w = PolicyWeights::zeros(small_shape(), FeatureMode::Pilot, n);
    w.params.insert("head.b4", Array2::ones((1, 2 * n)));
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let s = tape.constant(Array2::from_elem((1, 4), 0.3));
    let th = ris_head(&mut tape, &p, s).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..2 * n {
        assert!((tape.value(th)[[0, k]] - r).abs() < 1e-15);
    }

    let mut b4 = Array2::zeros((1, 2 * n));
    for k in 0..n {
        b4[[0, k]] = 3.0;
        b4[[0, n + k]] = 4.0;
    }
    w.params.insert("head.b4", b4);
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let s = tape.constant(Array2::zeros((1, 4)));
    let th = ris_head(&mut tape, &p, s).unwrap();
    for k in 0..n {
        assert!((tape.value(th)[[0, k]] - 0.6).abs() < 1e-15);
        assert!((tape.value(th)[[0, n + k]] - 0.8).abs() < 1e-15);
    }
}

#[test]
fn ris_head_output_is_unit_modulus_for_random_inputs() {
    let n = 9;
    let w = PolicyWeights::random(small_shape(), FeatureMode::Pilot, n, 3);
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let s = tape.constant(Array2::from_shape_fn((16, 4), |(i, j)| {
        ((i * 7 + j * 3) as f64).sin()
    }));
    let th = ris_head(&mut tape, &p, s).unwrap();
    let v = tape.value(th);
    for r in 0..16 {
        for k in 0..n {
            let m = Complex64::new(v[[r, k]], v[[r, n + k]]).norm();
            assert!((m - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn position_head_examples() {
    let mut w = PolicyWeights::zeros(small_shape(), FeatureMode::Pilot, 4);
    let mut sel = Array2::zeros((4, 3));
    for k in 0..3 {
        sel[[k, k]] = 1.0;
    }
    w.params.insert("pos.l", sel);
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let zero = tape.constant(Array2::zeros((1, 4)));
    let e0 = position_head(&mut tape, &p, zero).unwrap();
    assert!(tape.value(e0).iter().all(|v| *v == 0.0));
    let c = tape.constant(Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 9.0]).unwrap());
    let e = position_head(&mut tape, &p, c).unwrap();
    assert_eq!(tape.value(e).as_slice().unwrap(), &[1.0, 2.0, 3.0]);

    let w = PolicyWeights::random(small_shape(), FeatureMode::Pilot, 4, 5);
    let l = w.params.get("pos.l").unwrap().clone();
    let cvals = [0.3, -0.8, 1.5, 0.2];
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let c = tape.constant(Array2::from_shape_vec((1, 4), cvals.to_vec()).unwrap());
    let e = position_head(&mut tape, &p, c).unwrap();
    for j in 0..3 {
        let want: f64 = (0..4).map(|i| cvals[i] * l[[i, j]]).sum();
        assert!((tape.value(e)[[0, j]] - want).abs() < 1e-15);
    }
}

#[test]
fn single_frame_rollout_has_no_head_call() {
    let scene = Scene::reference().with_ris(2, 2);
    let pilot = PilotParams::new(20.0, 1);
    let w = PolicyWeights::random(small_shape(), FeatureMode::Pilot, 4, 1);
    let eps = sample_episodes(&scene, 1, 1, 0, 3).unwrap();
    let mut tape = Tape::new();
    let bound = w.params.bind_frozen(&mut tape);
    let p = PolicyVars::new(&w, &bound).unwrap();
    let consts = BatchConsts::new(&mut tape, &eps, 1, scene.noise_power).unwrap();
    let before = tape.len();
    let r = rollout(&mut tape, &p, &consts, &pilot, 1).unwrap();
    assert_eq!(
        (r.thetas.len(), r.pilots.len(), r.estimates.len()),
        (1, 1, 1)
    );
    // head.a1 feeds only the RIS head; with one frame nothing reads it.
    let head_a1 = bound.var("head.a1").unwrap();
    let loss = tape.sum(r.estimates[0]);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(head_a1).iter().all(|v| *v == 0.0));
    assert!(tape.len() > before);
}

#[test]
fn dead_network_without_noise_is_constant() {
    let mut scene = Scene::reference().with_ris(2, 2);
    scene.noise_power = 0.0;
    let pilot = PilotParams::new(20.0, 4);
    let w = PolicyWeights::zeros(small_shape(), FeatureMode::Pilot, 4);
    let eps = sample_episodes(&scene, 4, 2, 0, 5).unwrap();
    for tr in run_episodes(&scene, &eps, &pilot, &w).unwrap() {
        for t in 0..4 {
            assert_eq!(tr.estimates[t], [0.0; 3]);
            assert_eq!(tr.thetas[t], tr.thetas[0]);
        }
        assert!(tr.thetas[0]
            .as_slice()
            .iter()
            .all(|z| *z == Complex64::new(1.0, 0.0)));
    }
}

#[test]
fn repeated_runs_match_and_future_noise_is_causal() {
    let scene = Scene::reference().with_ris(2, 2);
    let pilot = PilotParams::new(20.0, 3);
    let mut w = PolicyWeights::for_scene(small_shape(), FeatureMode::Pilot, &scene, &pilot, 500, 4)
        .unwrap();
    w.randomize_biases(0.5, 4);
    let ep = sample_episodes(&scene, 3, 6, 0, 1).unwrap();
    let a = run_episodes(&scene, &ep, &pilot, &w).unwrap();
    let b = run_episodes(&scene, &ep, &pilot, &w).unwrap();
    assert_eq!(a, b);

    let mut perturbed = ep.clone();
    perturbed[0].noise[1] += Complex64::new(3.0, -2.0);
    let c = run_episodes(&scene, &perturbed, &pilot, &w).unwrap();
    let (a, c) = (&a[0], &c[0]);
    assert_eq!(a.thetas[..2], c.thetas[..2]);
    assert_eq!(a.estimates[0], c.estimates[0]);
    assert_ne!(a.pilots[1], c.pilots[1]);
    assert_ne!(a.thetas[2], c.thetas[2]);
    assert_ne!(a.estimates[1], c.estimates[1]);
}

#[test]
fn batch_order_does_not_change_per_episode_results() {
    let scene = Scene::reference().with_ris(2, 2);
    let pilot = PilotParams::new(10.0, 3);
    let w = PolicyWeights::for_scene(small_shape(), FeatureMode::Pilot, &scene, &pilot, 500, 8)
        .unwrap();
    let eps = sample_episodes(&scene, 3, 3, 0, 6).unwrap();
    let perm = [4, 0, 5, 2, 1, 3];
    let shuffled: Vec<Episode> = perm.iter().map(|&i| eps[i].clone()).collect();
    let a = run_episodes(&scene, &eps, &pilot, &w).unwrap();
    let b = run_episodes(&scene, &shuffled, &pilot, &w).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        for t in 0..3 {
            for k in 0..3 {
                assert!((a[i].estimates[t][k] - b[j].estimates[t][k]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn loss_examples() {
    assert_eq!(
        loss_final(&[trace_with(vec![[2.0, 1.0, 0.0]])], &[[2.0, 1.0, 0.0]]),
        0.0
    );
    assert_eq!(
        loss_final(&[trace_with(vec![[1.0, 1.0, 1.0]])], &[[0.0; 3]]),
        3.0
    );

    let two = trace_with(vec![[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]]);
    assert_eq!(loss_average(&[two], &[[0.0; 3]]), 3.0);
    let exact = trace_with(vec![[1.0, 2.0, 3.0]; 4]);
    assert_eq!(loss_average(&[exact], &[[1.0, 2.0, 3.0]]), 0.0);

    let pairs: [(Vec3, Vec3); 4] = [
        ([1.0, 2.0, 3.0], [0.5, 2.5, 3.0]),
        ([-4.0, 0.0, 1.0], [-4.0, 1.0, 1.0]),
        ([0.0, 0.0, 0.0], [3.0, 4.0, 0.0]),
        ([7.0, -1.0, 2.0], [7.0, -1.0, -2.0]),
    ];
    let traces: Vec<EpisodeTrace> = pairs.iter().map(|(e, _)| trace_with(vec![*e])).collect();
    let truth: Vec<Vec3> = pairs.iter().map(|(_, p)| *p).collect();
    let hand = (0.5 + 1.0 + 25.0 + 16.0) / 4.0;
    assert!((loss_final(&traces, &truth) - hand).abs() < 1e-15);
    assert_eq!(loss_average(&traces, &truth), loss_final(&traces, &truth));
}

#[test]
fn end_to_end_gradient_check() {
    let scene = Scene::reference().with_ris(2, 2);
    let pilot = PilotParams::new(20.0, 2);
    let shape = PolicyShape {
        hidden: 8,
        head_width: 8,
        head_layers: 4,
    };
    let mut w =
        PolicyWeights::for_scene(shape, FeatureMode::Pilot, &scene, &pilot, 1000, 2).unwrap();
    w.randomize_biases(0.5, 2);
    let eps = sample_episodes(&scene, 2, 2, 0, 3).unwrap();
    for loss in [LossKind::Final, LossKind::Average] {
        let report = check_policy_gradients(&scene, &pilot, &w, &eps, loss, 1e-6).unwrap();
        assert!(report.passes(1e-4), "{loss:?}: {}", report.max_rel_error);
    }
}

fn desk_policy(steps: usize) -> (ActivePolicy, Scene, TrainingConfig) {
    let scene = Scene::reference().with_ris(4, 4);
    let pilot = PilotParams::new(20.0, 4);
    let shape = PolicyShape {
        hidden: 64,
        head_width: 128,
        head_layers: 4,
    };
    let weights =
        PolicyWeights::for_scene(shape, FeatureMode::Pilot, &scene, &pilot, 2000, 21).unwrap();
    let policy = ActivePolicy {
        weights,
        scene: scene.clone(),
        pilot,
        loss: LossKind::Final,
    };
    let cfg = TrainingConfig {
        steps,
        batch_size: 256,
        ..TrainingConfig::default()
    };
    (policy, scene, cfg)
}

#[test]
fn zero_steps_leave_weights_unchanged() {
    let (mut policy, scene, cfg) = desk_policy(0);
    let before = policy.weights.clone();
    let (log, _) = fit(&mut policy, &scene, &cfg, 1).unwrap();
    assert_eq!(policy.weights, before);
    assert!(log.epochs.is_empty());
}

#[test]
fn two_hundred_steps_improve_validation_mse() {
    let (mut policy, scene, cfg) = desk_policy(200);
    let (log, _) = fit(&mut policy, &scene, &cfg, 1).unwrap();
    assert_eq!(log.epochs.len(), 200 / cfg.steps_per_epoch);
    let initial = log.initial_val_mse.unwrap();
    let best = log
        .epochs
        .iter()
        .map(|e| e.val_mse)
        .fold(f64::INFINITY, f64::min);
    let val = sample_episodes(
        &scene,
        4,
        risloc::training::validation_seed(1),
        0,
        cfg.validation_size,
    )
    .unwrap();
    let after = policy.evaluate_mse(&val).unwrap();
    assert_eq!(after, best);
    assert!(after < initial, "{after} vs {initial}");
}
