mod common;

use std::collections::BTreeMap;

use common::*;
use thoughtroute::autodiff::{Graph, ParameterStore, Tensor};
use thoughtroute::config::{LossConfig, ModelConfig};
use thoughtroute::model;
use thoughtroute::synth::{make_batch, SynthConfig, SyntheticSample, Synthesizer};
use thoughtroute::train::checkpoint::{Checkpoint, CheckpointError};
use thoughtroute::train::{
    inspect, AdamConfig, AdamState, Plateau, ScheduleConfig, StopReason, TrainConfig, TrainState, Trainer, LOG_HEADER,
};

fn scalar_store(v: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("x", Tensor::new([1], vec![v]).unwrap()).unwrap();
    s
}

fn grad_of(store: &ParameterStore, g: f64) -> thoughtroute::autodiff::GradientMap {
    let mut m = store.zeros_like();
    for (_, t) in m.iter_mut() {
        t.data_mut()[0] = g;
    }
    m
}

fn x(store: &ParameterStore) -> f64 {
    store.get("x").unwrap().data()[0]
}

#[test]
fn zero_gradients_without_decay_leave_parameters() {
    let cfg = tiny_config();
    let mut store = params(&cfg, 1);
    let before = store.clone();
    let mut adam = AdamState::new(&store);
    let ac = AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let zero = store.zeros_like();
    for _ in 0..3 {
        adam.update(&mut store, &zero, 1e-3, &ac).unwrap();
    }
    assert_eq!(store, before);
    assert_eq!(adam.step, 3);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let mut store = scalar_store(0.5);
    let mut adam = AdamState::new(&store);
    let ac = AdamConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let one = grad_of(&store, 1.0);
    adam.update(&mut store, &one, 1e-3, &ac).unwrap();
    let want = 0.5 - 1e-3 / (1.0 + 1e-8);
    assert!((x(&store) - want).abs() < 1e-16);
    assert!((x(&store) - (0.5 - 1e-3)).abs() < 1e-10);
}

#[test]
fn quadratic_matches_hand_stepped_adam() {
    let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.998, 1e-8, 3e-3);
    let ac = AdamConfig {
        beta1: b1,
        beta2: b2,
        eps,
        weight_decay: wd,
    };
    let mut store = scalar_store(1.0);
    let mut adam = AdamState::new(&store);
    let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=5 {
        let g = 2.0 * th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * wd * th;
        th -= lr * mh / (vh.sqrt() + eps);
        let grad = grad_of(&store, 2.0 * x(&store));
        adam.update(&mut store, &grad, lr, &ac).unwrap();
        assert!((x(&store) - th).abs() < 1e-12, "step {t}");
    }
    assert!(th < 1.0);
}

#[test]
fn schedule_examples() {
    let cfg = ScheduleConfig::default();
    let p = Plateau::default();
    assert!((p.lr_at(1000, &cfg) - 0.5e-3).abs() < 1e-18);
    assert_eq!(p.lr_at(2000, &cfg), 1e-3);

    let mut p = Plateau::default();
    assert!(p.observe(0.5, 2500, &cfg));
    for _ in 0..3 {
        assert!(!p.observe(0.4, 2500, &cfg));
    }
    assert_eq!(p.reductions, 1);
    assert!((p.lr_at(3000, &cfg) - 0.8e-3).abs() < 1e-18);

    let mut n = 1;
    while !p.should_stop(&cfg) {
        for _ in 0..3 {
            p.observe(0.4, 2500, &cfg);
        }
        n += 1;
    }
    assert_eq!(n, 11);
    assert!(0.8f64.powi(10) * 1e-3 >= 1e-4 && 0.8f64.powi(11) * 1e-3 < 1e-4);
}

#[test]
fn warmup_evaluations_never_reduce() {
    let cfg = ScheduleConfig::default();
    let mut p = Plateau::default();
    p.observe(0.9, 10, &cfg);
    for step in 11..100 {
        p.observe(0.1, step, &cfg);
    }
    assert_eq!((p.reductions, p.bad_evals), (0, 0));
    p.observe(0.95, 150, &cfg);
    assert_eq!(p.best, Some(0.95));
}

struct Setup {
    model: ModelConfig,
    loss: LossConfig,
    train: TrainConfig,
    data: Vec<SyntheticSample>,
}

fn setup(n: usize) -> Setup {
    let mut model = tiny_config();
    model.decoder.vocab_size = 8;
    let syn = Synthesizer::new(SynthConfig {
        lexicon_size: 4,
        d_x: 5,
        seg_len_range: (2, 3),
        segs_per_clip_range: (2, 3),
        ..Default::default()
    })
    .unwrap();
    let train = TrainConfig {
        lr: 1e-2,
        warmup_steps: 0,
        batch_size: n,
        eval_bleu: false,
        stop_lr: 1e-4,
        ..Default::default()
    };
    Setup {
        model,
        loss: LossConfig::default(),
        train,
        data: syn.dataset(7, n),
    }
}

#[test]
fn fifty_steps_mostly_reduce_the_loss() {
    let s = setup(8);
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let mut state = tr.init_state().unwrap();
    let batch: Vec<&SyntheticSample> = s.data.iter().collect();
    let losses: Vec<f64> = (0..51).map(|_| tr.train_step(&mut state, &batch).unwrap().total).collect();
    let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(down >= 40, "{down}/50 decreases: {losses:?}");
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[50] < 0.5 * losses[0]);
}

#[test]
fn regularizer_weights_only_add_their_terms() {
    let s = setup(4);
    let off = LossConfig {
        lambda_mono: 0.0,
        lambda_cont: 0.0,
        ..Default::default()
    };
    let params = params(&s.model, 5);
    let batch: Vec<&SyntheticSample> = s.data.iter().collect();
    let with = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let without = Trainer {
        model: &s.model,
        loss: &off,
        cfg: &s.train,
    };
    let (a, _) = with.batch_gradients(&params, &batch, None).unwrap();
    let (b, _) = without.batch_gradients(&params, &batch, None).unwrap();
    assert_eq!(b.total, b.ce);
    assert_eq!((a.ce, a.mono, a.cont), (b.ce, b.mono, b.cont));
    assert!((a.total - b.total - (0.1 * a.mono + 0.2 * a.cont)).abs() < 1e-12);
}

#[test]
fn per_sample_gradients_sum_to_the_padded_batch() {
    let s = setup(3);
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let params = params(&s.model, 2);
    let batch: Vec<&SyntheticSample> = s.data.iter().collect();
    let (lv, grads) = tr.batch_gradients(&params, &batch, None).unwrap();
    let (clip, tokens) = make_batch(&batch).unwrap();
    let mut g = Graph::with_store(&params);
    let fwd = model::forward(&mut g, &s.model, &clip, &tokens).unwrap();
    let norm = thoughtroute::objectives::Normalizers::of(&tokens);
    let loss = thoughtroute::objectives::total_loss(&mut g, &fwd, &tokens, &s.loss, norm).unwrap();
    assert!((g.value(loss.total).item() - lv.total).abs() < 1e-12);
    let full = g.backward(loss.total).unwrap();
    for (name, t) in full.iter() {
        assert!(t.max_abs_diff(grads.get(name).unwrap()) < 1e-10, "{name}");
    }
}

fn run_steps(tr: &Trainer, state: &mut TrainState, data: &[SyntheticSample], steps: u64) {
    let mut cfg = tr.cfg.clone();
    cfg.max_steps = state.step() + steps;
    cfg.eval_every = 2;
    let t = Trainer {
        model: tr.model,
        loss: tr.loss,
        cfg: &cfg,
    };
    let r = t.run(state, data, &data[..2], |_, _, _| Ok(())).unwrap();
    assert_eq!(r, StopReason::MaxSteps);
}

#[test]
fn training_is_deterministic() {
    let mut s = setup(6);
    s.model.encoder.dropout = 0.1;
    s.train.batch_size = 2;
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let mut a = tr.init_state().unwrap();
    let mut b = tr.init_state().unwrap();
    run_steps(&tr, &mut a, &s.data, 7);
    run_steps(&tr, &mut b, &s.data, 7);
    assert_eq!(a, b);
    assert_eq!((a.step(), a.epoch, a.batch_in_epoch), (7, 2, 1));
    let order = tr.epoch_order(0, 6);
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    assert_eq!(order, tr.epoch_order(0, 6));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut s = setup(6);
    s.train.batch_size = 2;
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let mut state = tr.init_state().unwrap();
    run_steps(&tr, &mut state, &s.data, 4);
    let mut conf = BTreeMap::new();
    conf.insert("thoughts".to_string(), "3".to_string());
    let ck = Checkpoint::from_state(conf.clone(), &state, 9);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.manifest.config, conf);
    assert_eq!((back.manifest.step, back.manifest.rng_seed), (4, 9));
    back.check_against(&state.params).unwrap();
    assert_eq!(back.into_state(), state);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sgtc");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    let lean = Checkpoint::from_params(conf, state.params.clone(), 9);
    let lean = Checkpoint::from_bytes(&lean.to_bytes().unwrap()).unwrap();
    let fresh = lean.into_state();
    assert_eq!(fresh.step(), 0);
    assert_eq!(fresh.params, state.params);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let mut s = setup(6);
    s.train.batch_size = 2;
    s.model.encoder.dropout = 0.1;
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let mut straight = tr.init_state().unwrap();
    run_steps(&tr, &mut straight, &s.data, 4);
    let bytes = Checkpoint::from_state(BTreeMap::new(), &straight, 1).to_bytes().unwrap();
    run_steps(&tr, &mut straight, &s.data, 5);

    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_state();
    assert_eq!(resumed.step(), 4);
    run_steps(&tr, &mut resumed, &s.data, 5);
    assert_eq!(resumed.step(), 9);
    for sample in &s.data {
        let a = inspect(&s.model, &straight.params, sample).unwrap().logits;
        let b = inspect(&s.model, &resumed.params, sample).unwrap().logits;
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }
}

#[test]
fn mismatched_thought_count_names_the_parameter() {
    let s = setup(2);
    let store = params(&s.model, 1);
    let ck = Checkpoint::from_params(BTreeMap::new(), store, 1);
    let mut other = s.model.clone();
    other.think.thoughts = 5;
    let template = model::init_params(&other, 1).unwrap();
    match ck.check_against(&template) {
        Err(e @ CheckpointError::ShapeMismatch { .. }) => {
            let CheckpointError::ShapeMismatch { name, expected, found } = &e else {
                unreachable!()
            };
            assert!(template.contains(name));
            assert_eq!(template.get(name).unwrap().shape(), &expected[..]);
            assert_ne!(expected, found);
            assert!(e.to_string().contains(name.as_str()));
        }
        other => panic!("{other:?}"),
    }
    let mut missing = ParameterStore::new();
    missing.insert("extra", Tensor::zeros([1])).unwrap();
    assert!(matches!(ck.check_against(&missing), Err(CheckpointError::Missing(_))));
    let mut extra = ck.params.clone();
    extra.insert("zz.extra", Tensor::zeros([1])).unwrap();
    let wide = Checkpoint::from_params(BTreeMap::new(), extra, 1);
    assert!(matches!(wide.check_against(&ck.params), Err(CheckpointError::Unexpected(_))));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let s = setup(2);
    let state = TrainState::new(params(&s.model, 1));
    let bytes = Checkpoint::from_state(BTreeMap::new(), &state, 1).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(b"SGTD1xxxx"), Err(CheckpointError::BadMagic)));
    assert!(matches!(Checkpoint::from_bytes(b"SGT"), Err(CheckpointError::Truncated)));
    for cut in (0..bytes.len()).step_by(7) {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(CheckpointError::Manifest(_))));
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/m.sgtc")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn run_stops_for_each_reason() {
    let mut s = setup(4);
    s.train.batch_size = 2;
    s.train.max_epochs = 2;
    let tr = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &s.train,
    };
    let mut rows = Vec::new();
    let mut state = tr.init_state().unwrap();
    let r = tr
        .run(&mut state, &s.data, &s.data, |_, row, _| {
            rows.push(row.csv());
            Ok(())
        })
        .unwrap();
    assert_eq!(r, StopReason::MaxEpochs);
    assert_eq!(rows.len(), 2);
    let fields = LOG_HEADER.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == fields));

    let mut cfg = s.train.clone();
    cfg.target_dev_acc = 1e-9;
    let t = Trainer {
        model: &s.model,
        loss: &s.loss,
        cfg: &cfg,
    };
    let mut state = t.init_state().unwrap();
    assert_eq!(t.run(&mut state, &s.data, &s.data, |_, _, _| Ok(())).unwrap(), StopReason::TargetReached);

    let mut state = tr.init_state().unwrap();
    state.plateau.reductions = 21;
    assert!(state.plateau.should_stop(&s.train.schedule()));
    assert_eq!(tr.run(&mut state, &s.data, &s.data, |_, _, _| Ok(())).unwrap(), StopReason::LearningRate);
    assert!(tr.run(&mut state, &[], &s.data, |_, _, _| Ok(())).is_err());
}

#[test]
fn inspection_shapes_follow_the_sample() {
    let s = setup(1);
    let p = params(&s.model, 3);
    let sample = &s.data[0];
    let ins = inspect(&s.model, &p, sample).unwrap();
    let (k, m, t, n) = (3, 4, sample.len(), sample.tokens.len());
    assert_eq!(ins.a.shape(), &[k, m]);
    assert_eq!(ins.w_seg.shape(), &[m, t]);
    assert_eq!(ins.r.shape(), &[k, t]);
    assert_eq!(ins.w.shape(), &[n, t]);
    assert_eq!(ins.logits.shape(), &[n, 8]);
    for i in 0..n {
        assert!((ins.w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
