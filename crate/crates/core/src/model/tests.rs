use super::*;
use rand::Rng;

fn random_inputs<T: Scalar>(b: usize, audio: usize, frame: usize, seed: u64) -> (Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_fn(vec![b, 1, audio], |_| T::from_f64(rng.gen_range(-1.0..1.0)));
    let v = Tensor::from_fn(vec![b, 3, frame, frame], |_| T::from_f64(rng.gen_range(0.0..1.0)));
    (a, v)
}

fn floor_extent(len: usize, k: usize, s: usize, p: usize) -> usize {
    (len + 2 * p - k) / s + 1
}

#[test]
fn build_is_deterministic_and_shaped() {
    let arch = Architecture::full();
    let a = build_network(&arch, 3);
    let b = build_network(&arch, 3);
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&build_network(&arch, 4)));
    assert_eq!(a.get("visual.stem.conv.w").unwrap().shape(), &[32, 3, 7, 7]);
    assert_eq!(a.get("audio.stem.conv.w").unwrap().shape(), &[32, 1, 49]);
    assert_eq!(a.get("fusion.w").unwrap().shape(), &[512, 5]);
    assert_eq!(a.get("fusion.b").unwrap().shape(), &[5]);
    assert!(a.get("fusion.b").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get("visual.stage1.block1.bn1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(a.get("visual.stage1.block1.bn1.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    arch.validate(&a).unwrap();
    assert_eq!(Architecture::detect(&a).unwrap(), arch);
}

#[test]
fn he_std_for_fan_in_256() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = he_normal(vec![256, 256], 256, &mut rng);
    let n = t.len() as f64;
    let mean = t.sum() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let want = (2.0f64 / 256.0).sqrt();
    assert!((var.sqrt() - want).abs() < 0.1 * want, "{} vs {want}", var.sqrt());
}

/// Name/shape manifest rebuilt by hand from the architecture table.
#[test]
fn golden_manifest() {
    let arch = Architecture::full();
    let mut want: Vec<(String, Vec<usize>)> = Vec::new();
    let bn = |want: &mut Vec<(String, Vec<usize>)>, p: &str, c: usize| {
        for s in ["gamma", "beta", "running_mean", "running_var"] {
            want.push((format!("{p}.{s}"), vec![c]));
        }
    };
    for (m, stem_w, k) in [
        ("audio", vec![32, 1, 49], vec![9]),
        ("visual", vec![32, 3, 7, 7], vec![3, 3]),
    ] {
        want.push((format!("{m}.stem.conv.w"), stem_w));
        bn(&mut want, &format!("{m}.stem.bn"), 32);
        let mut cin = 32;
        for (s, cout) in [32usize, 64, 128, 256].into_iter().enumerate() {
            for b in 1..=2 {
                let p = format!("{m}.stage{}.block{b}", s + 1);
                let shape = |o: usize, i: usize, kk: &[usize]| [vec![o, i], kk.to_vec()].concat();
                want.push((format!("{p}.conv1.w"), shape(cout, cin, &k)));
                bn(&mut want, &format!("{p}.bn1"), cout);
                want.push((format!("{p}.conv2.w"), shape(cout, cout, &k)));
                bn(&mut want, &format!("{p}.bn2"), cout);
                if s > 0 && b == 1 {
                    want.push((format!("{p}.proj.w"), shape(cout, cin, &vec![1; k.len()])));
                    bn(&mut want, &format!("{p}.proj_bn"), cout);
                }
                cin = cout;
            }
        }
    }
    want.push(("fusion.w".into(), vec![512, 5]));
    want.push(("fusion.b".into(), vec![5]));
    let got: Vec<(String, Vec<usize>)> = arch.manifest().into_iter().map(|e| (e.name, e.shape)).collect();
    assert_eq!(got, want);
    let convs = got.iter().filter(|(n, _)| n.starts_with("visual") && (n.ends_with("conv1.w") || n.ends_with("conv2.w") || n.ends_with("stem.conv.w"))).count();
    assert_eq!(convs, 17);
}

#[test]
fn canonical_crops_reach_49_and_7x7() {
    let mut e = 50176;
    e = floor_extent(e, 49, 4, 24);
    e = floor_extent(e, 9, 4, 4);
    for stride in [1, 1, 4, 1, 4, 1, 4, 1] {
        e = floor_extent(e, 9, stride, 4);
        e = floor_extent(e, 9, 1, 4);
    }
    assert_eq!(e, 49);
    let mut v = 224;
    v = floor_extent(v, 7, 2, 3);
    v = floor_extent(v, 3, 2, 1);
    for stride in [1, 1, 2, 1, 2, 1, 2, 1] {
        v = floor_extent(v, 3, stride, 1);
        v = floor_extent(v, 3, 1, 1);
    }
    assert_eq!(v, 7);

    let arch = Architecture::full();
    let mut params = build_network(&arch, 1);
    let (a, f) = random_inputs::<f32>(2, 50176, 224, 2);
    let (y, tape) = forward_train(&arch, &mut params, &a, &f).unwrap();
    assert_eq!(y.shape(), &[2, 5]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let (ga, gv) = tape.pre_gap_shapes();
    assert_eq!(ga, &[2, 256, 49]);
    assert_eq!(gv, &[2, 256, 7, 7]);
}

#[test]
fn forward_train_rejects_wrong_crops_and_single_batches() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 1);
    let (a, f) = random_inputs::<f32>(2, 1000, 32, 0);
    assert!(matches!(forward_train(&arch, &mut params, &a, &f), Err(Error::ShapeMismatch { .. })));
    let (a, f) = random_inputs::<f32>(2, 1024, 30, 0);
    assert!(forward_train(&arch, &mut params, &a, &f).is_err());
    let (a, f) = random_inputs::<f32>(1, 1024, 32, 0);
    assert!(forward_train(&arch, &mut params, &a, &f).is_err());
}

#[test]
fn zero_fusion_weights_give_one_half() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 1);
    *params.get_mut("fusion.w").unwrap() = Tensor::zeros(vec![64, 5]);
    let (a, f) = random_inputs::<f32>(3, 1024, 32, 5);
    let (y, _) = forward_train(&arch, &mut params, &a, &f).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn train_forward_updates_running_stats_eval_does_not() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 1);
    let before = params.clone();
    let (a, f) = random_inputs::<f32>(2, 1024, 32, 6);
    forward_batch_eval(&arch, &params, &a, &f).unwrap();
    assert!(params.bitwise_eq(&before));
    forward_train(&arch, &mut params, &a, &f).unwrap();
    assert!(!params.get("visual.stem.bn.running_mean").unwrap().bitwise_eq(before.get("visual.stem.bn.running_mean").unwrap()));
    assert!(params.get("fusion.w").unwrap().bitwise_eq(before.get("fusion.w").unwrap()));
}

#[test]
fn zero_upstream_gives_zero_gradients_and_bias_is_column_sum() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 2);
    let (a, f) = random_inputs::<f32>(2, 1024, 32, 7);
    let (_, tape) = forward_train(&arch, &mut params, &a, &f).unwrap();
    let g = backward(&arch, &params, &tape, &Tensor::zeros(vec![2, 5])).unwrap();
    assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert!(!g.contains("audio.stem.bn.running_mean"));
    assert_eq!(
        g.len(),
        arch.manifest().iter().filter(|e| is_trainable(&e.name)).count()
    );

    let up = Tensor::new(vec![2, 5], vec![0.3, -0.1, 0.2, 0.5, -0.7, 1.0, 0.4, -0.2, 0.1, 0.6]).unwrap();
    let g = backward(&arch, &params, &tape, &up).unwrap();
    let z = tape.z.data();
    for k in 0..5 {
        let want: f64 = (0..2)
            .map(|b| {
                let s = 1.0 / (1.0 + (-2.0 * z[b * 5 + k] as f64).exp());
                up.data()[b * 5 + k] as f64 * 2.0 * s * (1.0 - s)
            })
            .sum();
        let got = g.get("fusion.b").unwrap().data()[k] as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn stale_tape_rejected() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 2);
    let (a, f) = random_inputs::<f32>(2, 1024, 32, 7);
    let (_, tape) = forward_train(&arch, &mut params, &a, &f).unwrap();
    params.bump_generation();
    assert!(matches!(
        backward(&arch, &params, &tape, &Tensor::zeros(vec![2, 5])),
        Err(Error::StaleTape(_))
    ));
}

/// Full miniature network against 64-bit central differences, sampling
/// coordinates of every trainable tensor.
#[test]
fn mini_network_gradcheck() {
    let report = crate::gradcheck::network_gradcheck(0, 16).unwrap();
    for (name, err) in &report {
        assert!(*err <= 1e-4, "{name}: {err}");
    }
}

fn clip_of(frames: &[Vec<u8>], h: usize, w: usize, audio: Vec<f32>) -> Clip {
    Clip::new(audio, frames.concat(), frames.len(), h, w).unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    (0..3 * h * w).map(|_| rng.gen()).collect()
}

#[test]
fn identical_frames_match_single_frame_forward() {
    let arch = Architecture::mini();
    let mut params = build_network(&arch, 3);
    let (a, f) = random_inputs::<f32>(4, 1024, 32, 8);
    forward_train(&arch, &mut params, &a, &f).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frame = random_frame(&mut rng, 40, 56);
    let audio: Vec<f32> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let one = forward_infer(&arch, &params, &clip_of(&[frame.clone()], 40, 56, audio.clone()), InferOptions::default()).unwrap();
    let single = forward_batch_eval(
        &arch,
        &params,
        &Tensor::new(vec![1, 1, 1024], audio.clone()).unwrap(),
        &clip_of(&[frame.clone()], 40, 56, audio.clone()).frame_tensor(0).unwrap().into_shape(vec![1, 3, 40, 56]).unwrap(),
    )
    .unwrap();
    assert_eq!(&one.0[..], single.scores.data());
    for t in [2, 3, 7] {
        let many = forward_infer(&arch, &params, &clip_of(&vec![frame.clone(); t], 40, 56, audio.clone()), InferOptions::default()).unwrap();
        assert_eq!(many, one, "T = {t}");
    }
}

#[test]
fn frame_order_invariance_and_determinism() {
    let arch = Architecture::mini();
    let params = build_network(&arch, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let frames: Vec<Vec<u8>> = (0..5).map(|_| random_frame(&mut rng, 33, 47)).collect();
    let audio: Vec<f32> = (0..3000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = forward_infer(&arch, &params, &clip_of(&frames, 33, 47, audio.clone()), InferOptions::default()).unwrap();
    let mut shuffled = frames.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let perm = forward_infer(&arch, &params, &clip_of(&shuffled, 33, 47, audio.clone()), InferOptions::default()).unwrap();
    assert_eq!(base, perm);
    let again = forward_infer(&arch, &params, &clip_of(&frames, 33, 47, audio), InferOptions::default()).unwrap();
    assert_eq!(base, again);
}

#[test]
fn short_audio_is_padded_symmetrically() {
    assert_eq!(pad_audio(&[1.0, 2.0], 5), vec![0.0, 1.0, 2.0, 0.0, 0.0]);
    let arch = Architecture::mini();
    let params = build_network(&arch, 5);
    let clip = Clip::new(vec![0.1; 10], vec![128; 3 * 16 * 16], 1, 16, 16).unwrap();
    let out = forward_infer(&arch, &params, &clip, InferOptions::default()).unwrap();
    assert!(out.values().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn frame_stride_subsamples() {
    let arch = Architecture::mini();
    let params = build_network(&arch, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames: Vec<Vec<u8>> = (0..4).map(|_| random_frame(&mut rng, 20, 20)).collect();
    let audio = vec![0.0; 1024];
    let strided = forward_infer(&arch, &params, &clip_of(&frames, 20, 20, audio.clone()), InferOptions { frame_stride: 2 }).unwrap();
    let picked = forward_infer(&arch, &params, &clip_of(&[frames[0].clone(), frames[2].clone()], 20, 20, audio), InferOptions::default()).unwrap();
    assert_eq!(strided, picked);
}

#[test]
fn dimensional_correspondence_of_pre_gap_counts() {
    let arch = Architecture::full();
    for l in [32usize, 64, 224] {
        let a = arch.audio.pre_gap_extent([l * l, 1]).unwrap();
        let v = arch.visual.pre_gap_extent([l, l]).unwrap();
        assert_eq!(a[0] * a[1], v[0] * v[1], "L = {l}");
    }
}

#[test]
fn audio_of_fifteen_seconds_reaches_235() {
    let mut e = 240000;
    e = floor_extent(e, 49, 4, 24);
    e = floor_extent(e, 9, 4, 4);
    for s in [1, 1, 4, 1, 4, 1, 4, 1] {
        e = floor_extent(floor_extent(e, 9, s, 4), 9, 1, 4);
    }
    assert_eq!(e, 235);
    assert_eq!(Architecture::full().audio.pre_gap_extent([240000, 1]).unwrap(), [235, 1]);
}

#[test]
fn order_invariant_mean_is_exact_for_repeats() {
    let row = vec![0.1f32, -3.7, 1e-8];
    let m = order_invariant_mean(&vec![row.clone(); 9]).unwrap();
    assert_eq!(m, row);
    assert!(order_invariant_mean(&[]).is_err());
}

#[test]
fn trait_vector_range_checked() {
    assert!(TraitVector::new([0.0, 1.0, 0.5, 0.2, 0.3]).is_ok());
    assert!(TraitVector::new([0.0, 1.1, 0.5, 0.2, 0.3]).is_err());
}
