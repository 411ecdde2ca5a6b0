use super::*;
use crate::gradcheck::{numeric_gradient, relative_error};

fn tiny() -> RnnConfig {
    RnnConfig {
        input: 3,
        hidden: 4,
        outputs: 5,
        dropout: 0.5,
        truncation: 15,
    }
}

fn random_params(config: &RnnConfig, seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_rnn(config, seed).unwrap().cast::<f64>();
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
    p
}

fn random_seq(steps: usize, width: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![steps, width], |_| rng.gen_range(-1.0..1.0))
}

fn repeat_target(steps: usize, label: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![steps, label.len()], label.iter().copied().cycle().take(steps * label.len()).collect()).unwrap()
}

/// Sequence loss from the forward pass alone, with masks fixed.
fn forward_loss(p: &ParamSet<f64>, x: &Tensor<f64>, y: &Tensor<f64>, masks: Option<&DropoutMasks<f64>>, weight: f64) -> f64 {
    let hidden = p.get("lstm1.w_h").unwrap().shape()[0];
    let out = run_segment(p, &RnnState::zeros(hidden), x, masks).unwrap().outputs;
    out.data().iter().zip(y.data()).map(|(a, b)| weight * (a - b).abs()).sum()
}

#[test]
fn manifest_names_and_forget_bias() {
    let cfg = RnnConfig::standard(512);
    let p = init_rnn(&cfg, 0).unwrap();
    let names: Vec<&str> = p.names().collect();
    assert_eq!(names, vec!["lstm1.w_x", "lstm1.w_h", "lstm1.b", "lstm2.w_x", "lstm2.w_h", "lstm2.b", "out.w", "out.b"]);
    assert_eq!(p.get("lstm1.w_x").unwrap().shape(), &[512, 2048]);
    assert_eq!(p.get("out.w").unwrap().shape(), &[512, 5]);
    let b = p.get("lstm2.b").unwrap().data();
    assert!(b[..512].iter().all(|&v| v == 0.0));
    assert!(b[512..1024].iter().all(|&v| v == 1.0));
    assert!(b[1024..].iter().all(|&v| v == 0.0));
    assert_eq!(RnnConfig::detect(&p).unwrap(), cfg);
    assert!(init_rnn(&cfg, 0).unwrap().bitwise_eq(&p));
}

#[test]
fn zero_output_layer_gives_one_half() {
    let cfg = tiny();
    let mut p = init_rnn(&cfg, 1).unwrap();
    p.get_mut("out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let y = rnn_forward(&random_seq(7, 3, 2).cast(), &p, &cfg, Mode::Eval, None).unwrap();
    assert_eq!(y.shape(), &[7, 5]);
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn eval_is_deterministic_and_train_needs_rng() {
    let cfg = tiny();
    let p = init_rnn(&cfg, 4).unwrap();
    let x = random_seq(9, 3, 5).cast::<f32>();
    let a = rnn_forward(&x, &p, &cfg, Mode::Eval, None).unwrap();
    let b = rnn_forward(&x, &p, &cfg, Mode::Eval, None).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(rnn_forward(&x, &p, &cfg, Mode::Train, None).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = rnn_forward(&x, &p, &cfg, Mode::Train, Some(&mut rng)).unwrap();
    assert!(!t.bitwise_eq(&a));
}

#[test]
fn forward_composes_layer_steps() {
    let cfg = tiny();
    let p = random_params(&cfg, 6);
    let x = random_seq(3, 3, 7);
    let y = run_segment(&p, &RnnState::zeros(4), &x, None).unwrap().outputs;
    let (p1, p2) = (lstm(&p, "lstm1").unwrap(), lstm(&p, "lstm2").unwrap());
    let mut s = RnnState::<f64>::zeros(4);
    for t in 0..3 {
        let xt = x.index_outer(t).unwrap().reshape(vec![1, 3]).unwrap();
        let (h1, c1, _) = lstm_step(&xt, &s.h1, &s.c1, p1).unwrap();
        let (h2, c2, _) = lstm_step(&h1, &s.h2, &s.c2, p2).unwrap();
        let z = h2.matmul(p.get("out.w").unwrap()).unwrap();
        for k in 0..5 {
            let zk = z.data()[k] + p.get("out.b").unwrap().data()[k];
            let expected = 0.5 * (zk.tanh() + 1.0);
            assert!((y.data()[t * 5 + k] - expected).abs() < 1e-12);
        }
        s = RnnState { h1, c1, h2, c2 };
    }
}

#[test]
fn segment_gradients_match_central_differences() {
    let cfg = tiny();
    let p = random_params(&cfg, 8);
    let x = random_seq(4, 3, 9);
    let y = repeat_target(4, &[0.1, 0.9, 0.4, 0.6, 0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let masks = DropoutMasks::<f64>::draw(4, 4, 0.5, &mut rng);
    let weight = 1.0 / 20.0;
    for m in [None, Some(&masks)] {
        let seg = bptt_segment(&p, &RnnState::zeros(4), &x, &y, m, weight).unwrap();
        assert!((seg.loss - forward_loss(&p, &x, &y, m, weight)).abs() < 1e-12);
        for (name, g) in seg.grads.iter() {
            let numeric = numeric_gradient(p.get(name).unwrap(), None, 1e-6, |t| {
                let mut q = p.clone();
                *q.get_mut(name).unwrap() = t.clone();
                forward_loss(&q, &x, &y, m, weight)
            });
            let err = relative_error(g.data(), &numeric);
            assert!(err <= 1e-5, "{name}: {err:e}");
        }
    }
}

#[test]
fn truncated_gradient_is_sum_of_carried_segments() {
    let cfg = tiny();
    let p = random_params(&cfg, 11);
    let x = random_seq(30, 3, 12);
    let y = repeat_target(30, &[0.2, 0.8, 0.5, 0.5, 0.1]);
    let w = 1.0 / 150.0;
    let (loss, total) = tbptt_gradients(&p, &cfg, &x, &y, None).unwrap();
    let split = |t: &Tensor<f64>, r: std::ops::Range<usize>| {
        let c = t.shape()[1];
        Tensor::new(vec![r.len(), c], t.data()[r.start * c..r.end * c].to_vec()).unwrap()
    };
    let first = bptt_segment(&p, &RnnState::zeros(4), &split(&x, 0..15), &split(&y, 0..15), None, w).unwrap();
    let second = bptt_segment(&p, &first.final_state, &split(&x, 15..30), &split(&y, 15..30), None, w).unwrap();
    assert!((loss - first.loss - second.loss).abs() < 1e-12);
    for (name, g) in total.iter() {
        let expected = first.grads.get(name).unwrap().add(second.grads.get(name).unwrap()).unwrap();
        assert!(g.sub(&expected).unwrap().max_abs() < 1e-12, "{name}");
    }
    // The cut stops gradient flow across the boundary, so the result
    // differs from full backpropagation through all 30 steps.
    let full = bptt_segment(&p, &RnnState::zeros(4), &x, &y, None, w).unwrap();
    let gap = total.get("lstm1.w_x").unwrap().sub(full.grads.get("lstm1.w_x").unwrap()).unwrap().max_abs();
    assert!(gap > 1e-9);
    // Sequences no longer than the window get the exact gradient.
    let short = split(&x, 0..12);
    let ys = split(&y, 0..12);
    let (_, g) = tbptt_gradients(&p, &cfg, &short, &ys, None).unwrap();
    let exact = bptt_segment(&p, &RnnState::zeros(4), &short, &ys, None, 1.0 / 60.0).unwrap();
    for (name, t) in g.iter() {
        assert!(t.sub(exact.grads.get(name).unwrap()).unwrap().max_abs() < 1e-15);
    }
}

#[test]
fn dropout_masks_preserve_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let m = DropoutMasks::<f64>::draw(200, 100, 0.5, &mut rng);
    let values: Vec<f64> = m.layer1.iter().chain(&m.layer2).flat_map(|t| t.data().to_vec()).collect();
    assert!(values.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn time_average_by_hand() {
    let y = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.4, 0.6, 0.7, 1.0]).unwrap();
    let m = average_over_time(&y);
    assert!((m[0] - 0.4).abs() < 1e-7);
    assert!((m[1] - 0.6).abs() < 1e-7);
}

fn feature_clip(seconds_tenths: usize) -> Clip {
    let samples = SAMPLE_RATE * seconds_tenths / 10;
    let frames = FRAMES_PER_SECOND * seconds_tenths / 10;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let audio = (0..samples).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let pixels = (0..frames * 3 * 32 * 32).map(|_| rng.gen()).collect();
    Clip::new(audio, pixels, frames, 32, 32).unwrap()
}

#[test]
fn features_are_per_second_stream_outputs() {
    let arch = Architecture::mini();
    let params = model::build_network(&arch, 15);
    let clip = feature_clip(25);
    let f = extract_features(&arch, &params, &clip).unwrap();
    assert_eq!(f.shape(), &[2, 64]);
    for t in 0..2 {
        let mut row = model::audio_features(&arch, &params, &clip.audio()[t * 16000..(t + 1) * 16000]).unwrap();
        let frames: Vec<usize> = (t * 25..(t + 1) * 25).collect();
        row.extend(model::clip_visual_features(&arch, &params, &clip, &frames).unwrap());
        assert_eq!(&f.data()[t * 64..(t + 1) * 64], row.as_slice());
    }
    assert!(extract_features(&arch, &params, &feature_clip(9)).is_err());
}

#[test]
fn training_reduces_loss_and_checkpoint_round_trips() {
    let cfg = RnnConfig {
        dropout: 0.1,
        truncation: 4,
        ..tiny()
    };
    let seqs: Vec<Sequence> = (0..4)
        .map(|i| {
            let x = random_seq(9, 3, 20 + i as u64).cast::<f32>();
            let v = i as f32 / 4.0 + 0.1;
            Sequence {
                id: format!("s{i}"),
                features: x,
                label: TraitVector::new([v, 1.0 - v, v, 0.5, v]).unwrap(),
            }
        })
        .collect();
    let start = RnnCheckpoint::fresh(&cfg, 3).unwrap();
    let before = rnn_mae(&cfg, &start.params, &seqs).unwrap();
    let train = RnnTrainConfig {
        epochs: 150,
        schedule: LrSchedule {
            initial_alpha: 5e-3,
            ..Default::default()
        },
    };
    let (done, losses) = train_rnn(&cfg, &seqs, &train, start.clone(), |_, _| {}).unwrap();
    assert_eq!(losses.len(), 150);
    let after = rnn_mae(&cfg, &done.params, &seqs).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.ckpt");
    done.save(&path).unwrap();
    let (back, detected) = RnnCheckpoint::load(&path).unwrap();
    assert_eq!(detected.hidden, 4);
    assert_eq!(back.epoch, 150);
    assert!(back.params.bitwise_eq(&done.params));
    assert!(back.adam.m.bitwise_eq(&done.adam.m) && back.adam.v.bitwise_eq(&done.adam.v));
    assert_eq!(back.rng, done.rng);

    // Resuming from a mid-run checkpoint reproduces the uninterrupted run.
    let half = RnnTrainConfig { epochs: 75, ..train.clone() };
    let (mid, _) = train_rnn(&cfg, &seqs, &half, start, |_, _| {}).unwrap();
    mid.save(&path).unwrap();
    let (mid, _) = RnnCheckpoint::load(&path).unwrap();
    let (resumed, _) = train_rnn(&cfg, &seqs, &train, mid, |_, _| {}).unwrap();
    assert!(resumed.params.bitwise_eq(&done.params));
}

#[test]
fn feature_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.bin");
    let feats = vec![
        ("a".to_string(), random_seq(3, 4, 1).cast::<f32>()),
        ("b".to_string(), random_seq(5, 4, 2).cast::<f32>()),
    ];
    save_feature_cache(&path, &feats).unwrap();
    let back = load_feature_cache(&path).unwrap();
    assert_eq!(back.len(), 2);
    for ((ia, ta), (ib, tb)) in feats.iter().zip(&back) {
        assert_eq!(ia, ib);
        assert!(ta.bitwise_eq(tb));
    }
}
