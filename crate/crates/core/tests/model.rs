use dkn_core::model::{
    answer_prob_gradients, backprop_neuron_grad, predict_prob, train, AnswerTail, FreezeMask, InterventionPlan,
    ModelConfig, NeuronId, ToyTransformer, TrainHyperParams, ValueEdit,
};

fn cfg(seed: u64) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, d_ff: 12, n_heads: 2, vocab_size: 23, max_seq: 8, seed }
}

/// Larger-than-init weights so gradients are not all vanishingly small.
fn spiky(seed: u64) -> ToyTransformer {
    let mut m = ToyTransformer::init(cfg(seed)).unwrap();
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        *p *= 6.0;
        *p += 0.01 * ((i % 7) as f64 - 3.0);
    }
    m
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

const QUERY: [usize; 5] = [4, 9, 13, 2, 17];
const ANSWER: usize = 11;

#[test]
fn parameter_gradients_match_central_differences() {
    let model = spiky(1);
    let plan = InterventionPlan::new()
        .with_value(NeuronId::new(0, 3), ValueEdit::Scale { factor: 1.7 })
        .unwrap()
        .with_edge(NeuronId::new(0, 5), NeuronId::new(1, 2), 0.3)
        .unwrap();
    let (_, g) = answer_prob_gradients(&model, &QUERY, QUERY.len() - 1, ANSWER, &plan, true).unwrap();
    let h = 1e-5;
    let n = model.params().len();
    let mut checked = 0;
    for k in 0..60 {
        let idx = (k * 7919 + 13) % n;
        let mut up = model.clone();
        up.params_mut()[idx] += h;
        let mut dn = model.clone();
        dn.params_mut()[idx] -= h;
        let fd = (predict_prob(&up, &QUERY, ANSWER, &plan).unwrap()
            - predict_prob(&dn, &QUERY, ANSWER, &plan).unwrap())
            / (2.0 * h);
        if fd.abs() < 1e-7 && g.params[idx].abs() < 1e-7 {
            continue;
        }
        assert!(rel_err(fd, g.params[idx]) < 1e-4, "param {idx}: fd {fd} vs analytic {}", g.params[idx]);
        checked += 1;
    }
    assert!(checked > 20, "only {checked} informative parameters");
}

#[test]
fn activation_gradient_matches_difference_of_injections() {
    let model = spiky(2);
    for n in [NeuronId::new(0, 0), NeuronId::new(0, 7), NeuronId::new(1, 4), NeuronId::new(1, 11)] {
        for x in [-0.3, 0.4, 1.5] {
            let h = 1e-5;
            let p = |v: f64| {
                let plan = InterventionPlan::new().with_value(n, ValueEdit::inject(v)).unwrap();
                predict_prob(&model, &QUERY, ANSWER, &plan).unwrap()
            };
            let fd = (p(x + h) - p(x - h)) / (2.0 * h);
            let g = backprop_neuron_grad(&model, &QUERY, ANSWER, n, x).unwrap();
            assert!(rel_err(fd, g) < 1e-5 || (fd - g).abs() < 1e-10, "{n} at {x}: {fd} vs {g}");
        }
    }
}

#[test]
fn answer_tail_agrees_with_full_route() {
    let model = spiky(3);
    let tail = AnswerTail::new(&model, &QUERY, ANSWER).unwrap();
    let base = model.forward(&QUERY, &InterventionPlan::new(), true).unwrap();
    for n in model.config().neurons() {
        assert!((tail.natural_activation(n) - base.trace.as_ref().unwrap().last(n)).abs() < 1e-12);
        for x in [-0.2, 0.0, 0.9] {
            let plan = InterventionPlan::new().with_value(n, ValueEdit::inject(x)).unwrap();
            let p_full = predict_prob(&model, &QUERY, ANSWER, &plan).unwrap();
            let g_full = backprop_neuron_grad(&model, &QUERY, ANSWER, n, x).unwrap();
            let (p_tail, g_tail) = tail.eval(n, x);
            assert!((p_full - p_tail).abs() < 1e-12, "{n}: prob {p_full} vs {p_tail}");
            assert!((g_full - g_tail).abs() < 1e-10, "{n}: grad {g_full} vs {g_tail}");
        }
    }
}

#[test]
fn identity_plans_are_bitwise_no_ops() {
    let model = spiky(4);
    let base = model.forward(&QUERY, &InterventionPlan::new(), true).unwrap();
    let a = NeuronId::new(0, 1);
    let b = NeuronId::new(1, 6);
    let plan = InterventionPlan::new()
        .with_value(a, ValueEdit::Scale { factor: 1.0 })
        .unwrap()
        .with_value(b, ValueEdit::Interpolate { alpha: 1.0, baseline: 0.0 })
        .unwrap()
        .with_edge(a, NeuronId::new(1, 0), 1.0)
        .unwrap();
    let out = model.forward(&QUERY, &plan, true).unwrap();
    assert!(base.logits.iter().zip(&out.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn zero_edit_zeroes_every_position_and_changes_output() {
    let model = spiky(5);
    let n = NeuronId::new(0, 2);
    let plan = InterventionPlan::new().with_value(n, ValueEdit::Zero).unwrap();
    let out = model.forward(&QUERY, &plan, true).unwrap();
    for t in 0..QUERY.len() {
        assert_eq!(out.trace.as_ref().unwrap().activation(n, t), 0.0);
    }
    let base = predict_prob(&model, &QUERY, ANSWER, &InterventionPlan::new()).unwrap();
    let cut = predict_prob(&model, &QUERY, ANSWER, &plan).unwrap();
    assert_ne!(base, cut);
}

#[test]
fn edge_cut_equals_explicit_preactivation_correction() {
    // Removing one pathway must move B's pre-activation by exactly -a_A * w_AB.
    let model = spiky(6);
    let (a, b) = (NeuronId::new(0, 4), NeuronId::new(1, 9));
    let plan = InterventionPlan::new().with_edge(a, b, 0.0).unwrap();
    let base = model.forward(&QUERY, &InterventionPlan::new(), true).unwrap();
    let cut = model.forward(&QUERY, &plan, true).unwrap();
    // neurons other than B in the upper layer are untouched
    for pos in 0..model.config().d_ff {
        let n = NeuronId::new(1, pos);
        let same = (0..QUERY.len())
            .all(|t| base.trace.as_ref().unwrap().activation(n, t) == cut.trace.as_ref().unwrap().activation(n, t));
        assert_eq!(same, pos != b.pos, "{n}");
    }
    // lower layer untouched
    for pos in 0..model.config().d_ff {
        let n = NeuronId::new(0, pos);
        assert_eq!(base.trace.as_ref().unwrap().last(n), cut.trace.as_ref().unwrap().last(n));
    }
}

#[test]
fn untrained_model_is_near_uniform() {
    let model = ToyTransformer::init(ModelConfig::small(64, 0)).unwrap();
    let p = predict_prob(&model, &[5, 6, 7], 9, &InterventionPlan::new()).unwrap();
    assert!(p > 0.5 / 64.0 && p < 2.0 / 64.0, "p = {p}");
}

#[test]
fn init_and_training_are_deterministic() {
    let corpus: Vec<Vec<usize>> = (0..12).map(|i| vec![4 + i % 5, 9, 10 + i % 3, 0]).collect();
    let hp = TrainHyperParams {
        steps: 15,
        batch_size: 4,
        learning_rate: 1e-2,
        clip_norm: 1.0,
        seed: 9,
        ..Default::default()
    };
    let m = ToyTransformer::init(cfg(7)).unwrap();
    let mask = FreezeMask::all(m.config());
    let (a, ra) = train(&m, &corpus, &hp, &mask).unwrap();
    let (b, rb) = train(&m, &corpus, &hp, &mask).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(ra, rb);
    assert!(ToyTransformer::init(cfg(7)).unwrap().bitwise_eq(&m));
}

#[test]
fn training_reduces_loss() {
    let corpus: Vec<Vec<usize>> = (0..8).map(|i| vec![4 + i, 15, 16 + i % 4, 0]).collect();
    let hp = TrainHyperParams {
        steps: 150,
        batch_size: 8,
        learning_rate: 1e-2,
        clip_norm: 1.0,
        seed: 1,
        ..Default::default()
    };
    let m = ToyTransformer::init(cfg(8)).unwrap();
    let (_, report) = train(&m, &corpus, &hp, &FreezeMask::all(m.config())).unwrap();
    let first = report.losses[0];
    let last = *report.losses.last().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn frozen_parameters_stay_bitwise_identical() {
    let corpus: Vec<Vec<usize>> = (0..8).map(|i| vec![4 + i, 15, 16 + i % 4, 0]).collect();
    let hp = TrainHyperParams {
        steps: 20,
        batch_size: 4,
        learning_rate: 1e-2,
        clip_norm: 1.0,
        seed: 1,
        ..Default::default()
    };
    let m = spiky(9);
    let keep = [NeuronId::new(0, 3), NeuronId::new(1, 8)];
    let mask = FreezeMask::neurons_only(keep);
    let (t, _) = train(&m, &corpus, &hp, &mask).unwrap();
    let cfg = m.config();
    let lay = m.layout();
    let mut trainable = vec![false; m.params().len()];
    for n in keep {
        let ls = &lay.layers[n.layer];
        for i in 0..cfg.d_model {
            trainable[ls.w_fc.offset + i * cfg.d_ff + n.pos] = true;
            trainable[ls.w_proj.offset + n.pos * cfg.d_model + i] = true;
        }
        trainable[ls.b_fc.offset + n.pos] = true;
    }
    let mut moved = 0;
    for (i, (a, b)) in m.params().iter().zip(t.params()).enumerate() {
        if trainable[i] {
            moved += usize::from(a != b);
        } else {
            assert_eq!(a.to_bits(), b.to_bits(), "frozen element {i} changed");
        }
    }
    assert!(moved > 0);
    let (same, report) = train(&m, &corpus, &hp, &FreezeMask::frozen()).unwrap();
    assert!(same.bitwise_eq(&m));
    assert!(report.losses.is_empty());
}

#[test]
fn rejects_out_of_range_inputs() {
    let m = spiky(10);
    let none = InterventionPlan::new();
    assert!(predict_prob(&m, &[1, 2, 99], 3, &none).is_err());
    assert!(predict_prob(&m, &[1, 2], 99, &none).is_err());
    assert!(predict_prob(&m, &[], 3, &none).is_err());
    assert!(predict_prob(&m, &[1; 9], 3, &none).is_err());
    let bad = InterventionPlan::new().with_value(NeuronId::new(5, 0), ValueEdit::Zero).unwrap();
    assert!(predict_prob(&m, &[1, 2], 3, &bad).is_err());
}
