use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcpllm::model::{
    effective_weight, lora_param_count, select_cca, BackboneConfig, EncoderConfig, EncoderVariant, ModelConfig,
    Normalizer, Task, TcpLlm, Window, NUM_CCAS,
};
use tcpllm::simnet::CcaId;
use tcpllm::tensor::{check_gradients, matmul, Adam, AdamConfig, ParamStore, Tape, Tensor};

fn tiny(task: Task, variant: EncoderVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        task,
        encoder: EncoderConfig { variant, kernel: 2, ..Default::default() },
        backbone: BackboneConfig { layers: 1, heads: 2, token_dim: 8, ff_mult: 2, context_len: 24, ..Default::default() },
        context_steps: 3,
        init_seed: seed,
        ..Default::default()
    }
}

fn random_window(rng: &mut ChaCha8Rng, k: usize) -> Window {
    let valid = rng.random_range(1..=k);
    let pad = k - valid;
    let cca = |rng: &mut ChaCha8Rng| CcaId::from_index(rng.random_range(0..3)).unwrap();
    Window {
        valid,
        returns: (0..k).map(|t| if t < pad { 0.0 } else { rng.random_range(-1.0..1.0) }).collect(),
        states: (0..k).map(|t| if t < pad { [0.0; 4] } else { [0; 4].map(|_| rng.random_range(0.0..1.5)) }).collect(),
        actions: (0..k).map(|t| (t >= pad).then(|| cca(rng))).collect(),
        targets: (0..k).map(|t| (t >= pad).then(|| cca(rng))).collect(),
        value_target: Some(rng.random_range(0.0..1.0)),
    }
}

fn randomize_adapters(model: &mut TcpLlm, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.store.iter().filter(|(_, n, _)| n.starts_with("lora.")).map(|(id, _, _)| id).collect();
    for id in ids {
        for x in model.store.get_mut(id).data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
    }
}

fn targets_of(windows: &[Window]) -> Vec<Option<usize>> {
    windows.iter().flat_map(|w| w.targets.iter().map(|t| t.map(CcaId::index))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn full_pipeline_gradients(seed in any::<u64>(), cnn in any::<bool>(), rl in any::<bool>()) {
        let variant = if cnn { EncoderVariant::TemporalCnn } else { EncoderVariant::PerMetricFc };
        let task = if rl { Task::Rl } else { Task::SlClassify };
        let mut model = TcpLlm::new(tiny(task, variant, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize_adapters(&mut model, &mut rng);
        let windows: Vec<Window> = (0..2).map(|_| random_window(&mut rng, 3)).collect();
        let targets = targets_of(&windows);
        let mut s64: ParamStore<f64> = model.store.cast();
        let report = check_gradients(&mut s64, 1e-3, |tape, s| {
            let f = model.forward(tape, s, &windows)?;
            tape.cross_entropy_masked(f.logits, &targets)
        }).unwrap();
        prop_assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn regression_head_gradients(seed in any::<u64>()) {
        let mut model = TcpLlm::new(tiny(Task::SlRegress, EncoderVariant::PerMetricFc, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize_adapters(&mut model, &mut rng);
        let windows: Vec<Window> = (0..2).map(|_| random_window(&mut rng, 3)).collect();
        let y: Vec<f64> = windows.iter().map(|w| w.value_target.unwrap() as f64).collect();
        let mut s64: ParamStore<f64> = model.store.cast();
        let report = check_gradients(&mut s64, 1e-3, |tape, s| {
            let f = model.forward(tape, s, &windows)?;
            let t = tape.constant(Tensor::new([2, 1], y.clone())?);
            tape.mse(f.value.unwrap(), t)
        }).unwrap();
        prop_assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn cnn_output_ignores_the_future(seed in any::<u64>(), seq in 3usize..12, cut in 0usize..12) {
        let model = TcpLlm::new(tiny(Task::SlClassify, EncoderVariant::TemporalCnn, seed)).unwrap();
        let t = cut % seq;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([1, seq, 4], |_| rng.random_range(-1.0f32..1.0));
        let mut y = x.clone();
        for v in &mut y.data_mut()[(t + 1) * 4..] {
            *v += 1.0;
        }
        let a = model.encoder().encode_tensor(&model.store, &x).unwrap();
        let b = model.encoder().encode_tensor(&model.store, &y).unwrap();
        let d = 8;
        prop_assert_eq!(&a.data()[..(t + 1) * d], &b.data()[..(t + 1) * d]);
    }

    #[test]
    fn argmax_ignores_positive_affine_maps(z in prop::array::uniform3(-10.0f32..10.0), a in 0.1f32..10.0, c in -10.0f32..10.0) {
        let chosen = select_cca(&z).unwrap();
        // an exact shift keeps ties; compare in f64 to avoid rounding new ties
        let mapped: Vec<f32> = z.iter().map(|&x| ((a as f64) * (x as f64) + c as f64) as f32).collect();
        let distinct = z.iter().all(|&x| z.iter().filter(|&&y| y == x).count() == 1);
        let mapped_distinct = mapped.iter().all(|&x| mapped.iter().filter(|&&y| y == x).count() == 1);
        if distinct && mapped_distinct {
            prop_assert_eq!(select_cca(&mapped).unwrap(), chosen);
        }
        let shifted: Vec<f32> = z.iter().map(|&x| x + 0.0).collect();
        prop_assert_eq!(select_cca(&shifted).unwrap(), chosen);
    }

    #[test]
    fn encoder_is_equivariant_over_the_batch(seed in any::<u64>()) {
        let model = TcpLlm::new(tiny(Task::Rl, EncoderVariant::PerMetricFc, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([3, 5, 4], |_| rng.random_range(-1.0f32..2.0));
        let out = model.encoder().encode_tensor(&model.store, &x).unwrap();
        let block = 5 * 4;
        let mut swapped = x.data().to_vec();
        swapped.rotate_left(block);
        let sx = Tensor::new([3, 5, 4], swapped).unwrap();
        let sout = model.encoder().encode_tensor(&model.store, &sx).unwrap();
        let row = 5 * 4 * 8;
        let mut expect = out.data().to_vec();
        expect.rotate_left(row);
        prop_assert_eq!(sout.data(), &expect[..]);
    }
}

#[test]
fn encoder_shapes_and_statistics() {
    let cfg = ModelConfig { backbone: BackboneConfig { token_dim: 16, ..Default::default() }, ..Default::default() };
    let model = TcpLlm::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn([2, 10, 4], |_| rng.random_range(0.0f32..2.0));
    let out = model.encoder().encode_tensor(&model.store, &x).unwrap();
    assert_eq!(out.shape(), &[2, 10, 4, 16]);
    for tok in out.data().chunks(16) {
        let mean = tok.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
        let var = tok.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4, "mean {mean} var {var}");
    }
    // identical timesteps give identical token blocks
    let same = Tensor::new([1, 2, 4], vec![0.3, 0.1, 1.2, 0.5, 0.3, 0.1, 1.2, 0.5]).unwrap();
    let o = model.encoder().encode_tensor(&model.store, &same).unwrap();
    assert_eq!(&o.data()[..64], &o.data()[64..]);

    let bad = Tensor::zeros([1, 3, 5]);
    assert!(matches!(model.encoder().encode_tensor(&model.store, &bad), Err(tcpllm::Error::Shape(_))));

    let cnn = ModelConfig {
        task: Task::SlClassify,
        encoder: EncoderConfig { variant: EncoderVariant::TemporalCnn, ..Default::default() },
        backbone: BackboneConfig { token_dim: 32, ..Default::default() },
        ..Default::default()
    };
    let model = TcpLlm::new(cnn).unwrap();
    let x = Tensor::from_fn([1, 20, 4], |_| rng.random_range(0.0f32..2.0));
    assert_eq!(model.encoder().encode_tensor(&model.store, &x).unwrap().shape(), &[1, 20, 32]);
    let short = Tensor::zeros([1, 2, 4]);
    assert!(matches!(model.encoder().encode_tensor(&model.store, &short), Err(tcpllm::Error::Shape(_))));
}

#[test]
fn zero_fc_weights_give_normalized_bias() {
    let mut model = TcpLlm::new(tiny(Task::Rl, EncoderVariant::PerMetricFc, 2)).unwrap();
    let bias: Vec<f32> = (0..8).map(|i| i as f32 * 0.5 - 1.0).collect();
    for m in ["thrup", "loss", "rtt", "send"] {
        let w = model.store.id(&format!("enc.fc_{m}.w")).unwrap();
        model.store.get_mut(w).data_mut().fill(0.0);
        let b = model.store.id(&format!("enc.fc_{m}.b")).unwrap();
        model.store.get_mut(b).data_mut().copy_from_slice(&bias);
    }
    let mut tape = Tape::<f32>::new();
    let bv = tape.constant(Tensor::new([8], bias).unwrap());
    let expect = tape.layer_norm(bv, 1e-5).unwrap();
    let expect = tape.value(expect).data().to_vec();
    let x = Tensor::from_fn([1, 3, 4], |i| i as f32);
    let out = model.encoder().encode_tensor(&model.store, &x).unwrap();
    for tok in out.data().chunks(8) {
        assert_eq!(tok, &expect[..]);
    }
}

#[test]
fn unit_kernel_cnn_is_summed_affine_map() {
    let cfg = ModelConfig {
        task: Task::SlClassify,
        encoder: EncoderConfig { variant: EncoderVariant::TemporalCnn, kernel: 1, ..Default::default() },
        backbone: BackboneConfig { token_dim: 8, ..Default::default() },
        ..Default::default()
    };
    let model = TcpLlm::new(cfg).unwrap();
    let w = model.store.by_name("enc.cnn.w").unwrap();
    let b = model.store.by_name("enc.cnn.b").unwrap();
    let x = Tensor::new([1, 1, 4], vec![0.5, 0.01, 1.3, 0.7]).unwrap();
    let mut pre = b.data().to_vec();
    for m in 0..4 {
        for j in 0..8 {
            pre[j] += x.data()[m] * w.data()[m * 8 + j];
        }
    }
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(Tensor::new([8], pre).unwrap());
    let ln = tape.layer_norm(p, 1e-5).unwrap();
    let out = model.encoder().encode_tensor(&model.store, &x).unwrap();
    for (a, e) in out.data().iter().zip(tape.value(ln).data()) {
        assert!((a - e).abs() < 1e-5);
    }
}

#[test]
fn normalizer_anchor_and_round_trip() {
    let n = Normalizer::new(Some(100.0), Some(10.0)).unwrap();
    let s = [100.0, 0.0, 13.0, 120.0];
    let scaled = n.scale(&s);
    assert_eq!(scaled[0], 1.0);
    assert_eq!(scaled[1], 0.0);
    let back = n.unscale(&scaled);
    for (a, b) in back.iter().zip(&s) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(matches!(Normalizer::new(None, Some(10.0)), Err(tcpllm::Error::Config(_))));
    assert!(Normalizer::fit(std::iter::empty()).is_err());
}

#[test]
fn effective_weight_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w0 = Tensor::from_fn([6, 5], |_| rng.random_range(-1.0f32..1.0));
    let a = Tensor::from_fn([6, 2], |_| rng.random_range(-1.0f32..1.0));
    assert_eq!(effective_weight(&w0, &a, &Tensor::zeros([2, 5])).unwrap(), w0);

    let b = Tensor::from_fn([2, 5], |_| rng.random_range(-1.0f32..1.0));
    let w = effective_weight(&w0, &a, &b).unwrap();
    for i in 0..6 {
        for l in 0..5 {
            let mut acc = w0.data()[i * 5 + l];
            let mut ab = 0.0f32;
            for j in 0..2 {
                ab += a.data()[i * 2 + j] * b.data()[j * 5 + l];
            }
            acc += ab;
            assert!((w.data()[i * 5 + l] - acc).abs() < 1e-6);
        }
    }

    let sq = Tensor::from_fn([5, 5], |_| rng.random_range(-1.0f32..1.0));
    let bb = Tensor::from_fn([5, 5], |_| rng.random_range(-1.0f32..1.0));
    let w = effective_weight(&sq, &Tensor::eye(5), &bb).unwrap();
    for ((x, y), z) in w.data().iter().zip(sq.data()).zip(bb.data()) {
        assert_eq!(*x, y + z);
    }

    let err = effective_weight(&w0, &Tensor::zeros([5, 2]), &b).unwrap_err().to_string();
    assert!(err.contains("d=6") && err.contains("k=5"), "{err}");
}

#[test]
fn adapter_counts_and_fractions() {
    let model = TcpLlm::new(ModelConfig::default()).unwrap();
    for ad in model.backbone().adapters() {
        let a = model.store.get(ad.a).len();
        let b = model.store.get(ad.b).len();
        assert_eq!(a + b, 512);
        assert_eq!(lora_param_count(64, 64, 4), a + b);
    }
    assert_eq!(model.backbone().adapters().count(), 8);
    assert_eq!(lora_param_count(64, 64, 4) as f64 / 4096.0, 0.125);
    let frac = lora_param_count(512, 512, 4) as f64 / (512.0 * 512.0);
    assert!((frac - 0.015_625).abs() < 1e-12);

    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = std::mem::take(&mut model.store);
    let err = model.backbone_mut().attach_lora(&mut store, "layer0.attn_q", 4, &mut rng).unwrap_err();
    assert!(matches!(err, tcpllm::Error::Contract(_)));
}

fn no_adapter_config() -> ModelConfig {
    ModelConfig { lora_targets: vec![], ..Default::default() }
}

#[test]
fn zero_b_adapters_leave_forward_unchanged() {
    let adapted = TcpLlm::new(ModelConfig::default()).unwrap();
    let plain = TcpLlm::new(no_adapter_config()).unwrap();
    assert_eq!(adapted.frozen_hash(), plain.frozen_hash());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn([1, 6, 64], |_| rng.random_range(-1.0f32..1.0));
    let a = adapted.backbone().forward_tensor(&adapted.store, &x).unwrap();
    let p = plain.backbone().forward_tensor(&plain.store, &x).unwrap();
    assert_eq!(a.shape(), &[1, 6, 64]);
    assert_eq!(a.data(), p.data());
}

#[test]
fn backbone_is_causal_and_bounded() {
    let mut model = TcpLlm::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    randomize_adapters(&mut model, &mut rng);
    let x = Tensor::from_fn([1, 12, 64], |_| rng.random_range(-1.0f32..1.0));
    let mut y = x.clone();
    for v in &mut y.data_mut()[7 * 64..8 * 64] {
        *v += 3.0;
    }
    let hx = model.backbone().forward_tensor(&model.store, &x).unwrap();
    let hy = model.backbone().forward_tensor(&model.store, &y).unwrap();
    assert_eq!(&hx.data()[..7 * 64], &hy.data()[..7 * 64]);
    assert_ne!(&hx.data()[7 * 64..8 * 64], &hy.data()[7 * 64..8 * 64]);
    let long = Tensor::zeros([1, 129, 64]);
    assert!(matches!(model.backbone().forward_tensor(&model.store, &long), Err(tcpllm::Error::Shape(_))));
}

#[test]
fn merge_matches_unmerged_forward() {
    let mut model = TcpLlm::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    randomize_adapters(&mut model, &mut rng);
    let x = Tensor::from_fn([2, 10, 64], |_| rng.random_range(-1.0f32..1.0));
    let before = model.backbone().forward_tensor(&model.store, &x).unwrap();
    let hash = model.current_base_hash();
    let targets: Vec<String> = model.backbone().adapters().map(|a| a.target.clone()).collect();
    let store = model.store.clone();
    for t in &targets {
        model.backbone_mut().merge_lora(&store, t).unwrap();
    }
    let after = model.backbone().forward_tensor(&model.store, &x).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    assert_eq!(model.current_base_hash(), hash);
    assert!(model.backbone_mut().merge_lora(&store, &targets[0]).is_err());

    let mut fresh = TcpLlm::new(ModelConfig::default()).unwrap();
    let plain = fresh.backbone().forward_tensor(&fresh.store, &x).unwrap();
    let store = fresh.store.clone();
    fresh.backbone_mut().merge_lora(&store, "layer0.attn_q").unwrap();
    assert_eq!(fresh.backbone().forward_tensor(&fresh.store, &x).unwrap(), plain);
}

#[test]
fn freezing_is_stable_under_training() {
    let mut model = TcpLlm::new(tiny(Task::Rl, EncoderVariant::PerMetricFc, 3)).unwrap();
    let hash = model.frozen_hash().to_string();
    let store = std::mem::take(&mut model.store);
    let mut store = store;
    assert_eq!(model.backbone_mut().freeze_base(&mut store), hash);
    model.store = store;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<Window> = (0..4).map(|_| random_window(&mut rng, 3)).collect();
    let targets = targets_of(&windows);
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
    for _ in 0..20 {
        model.store.zero_grad();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &model.store, &windows).unwrap();
        let loss = tape.cross_entropy_masked(f.logits, &targets).unwrap();
        tape.backward(loss, &mut model.store).unwrap();
        adam.step(&mut model.store).unwrap();
    }
    assert_eq!(model.current_base_hash(), hash);
    for id in adam.tracked_ids() {
        assert!(!model.store.name(id).starts_with("base."));
    }
}

#[test]
fn trainable_count_matches_formula() {
    let model = TcpLlm::new(ModelConfig::default()).unwrap();
    let d = 64;
    let lora: usize = 2 * 4 * lora_param_count(d, d, 4);
    let enc = 4 * (d + d);
    let head = d * NUM_CCAS + NUM_CCAS;
    let embed = 2 * d + NUM_CCAS * d;
    assert_eq!(model.store.trainable_count(), lora + enc + head + embed);
    let breakdown = model.trainable_breakdown();
    assert_eq!(breakdown, [("lora", lora), ("enc", enc), ("head", head), ("embed", embed)]);
}

#[test]
fn higher_rank_fits_at_least_as_well() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let target = Tensor::<f64>::from_fn([6, 5], |_| rng.random_range(-1.0..1.0));
    let residual = |r: usize| -> f64 {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = store.insert("A", Tensor::from_fn([6, r], |_| rng.random_range(-0.5..0.5)).with_requires_grad(true)).unwrap();
        let b = store.insert("B", Tensor::from_fn([r, 5], |_| rng.random_range(-0.5..0.5)).with_requires_grad(true)).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.02, ..Default::default() });
        for _ in 0..3000 {
            store.zero_grad();
            let mut tape = Tape::new();
            let (av, bv) = (tape.param(&store, a), tape.param(&store, b));
            let ab = tape.matmul(av, bv).unwrap();
            let t = tape.constant(target.clone());
            let loss = tape.mse(ab, t).unwrap();
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        let ab = matmul(store.get(a), store.get(b)).unwrap();
        ab.data().iter().zip(target.data()).map(|(x, y)| (x - y).powi(2)).sum()
    };
    let res: Vec<f64> = (1..=5).map(residual).collect();
    for w in res.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{res:?}");
    }
    assert!(res[4] < 1e-6, "{res:?}");
}

#[test]
fn constant_head_and_readout_bounds() {
    let mut model = TcpLlm::new(ModelConfig::default()).unwrap();
    let w = model.store.id("head.w").unwrap();
    model.store.get_mut(w).data_mut().fill(0.0);
    let b = model.store.id("head.b").unwrap();
    model.store.get_mut(b).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hidden = Tensor::from_fn([2, 6, 64], |_| rng.random_range(-1.0f32..1.0));
    let z = model.head().predict_logits(&model.store, &hidden, 5).unwrap();
    assert_eq!(z.shape(), &[2, 3]);
    assert_eq!(z.data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    assert!(model.head().predict_logits(&model.store, &hidden, 6).is_err());
}

#[test]
fn head_weights_pass_finite_differences() {
    let model = TcpLlm::new(tiny(Task::Rl, EncoderVariant::PerMetricFc, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hidden = Tensor::<f64>::from_fn([4, 8], |_| rng.random_range(-1.0..1.0));
    let mut store = ParamStore::<f64>::new();
    for name in ["head.w", "head.b"] {
        let t: Tensor<f64> = model.store.by_name(name).unwrap().cast();
        store.insert(name, t.with_requires_grad(true)).unwrap();
    }
    let report = check_gradients(&mut store, 1e-3, |tape, s| {
        let h = tape.constant(hidden.clone());
        let w = tape.param(s, s.id("head.w")?);
        let z = tape.matmul(h, w)?;
        let b = tape.param(s, s.id("head.b")?);
        let z = tape.add_row(z, b)?;
        tape.softmax_cross_entropy(z, &[0, 2, 1, 1])
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
}

#[test]
fn decide_runs_one_forward_and_is_deterministic() {
    let model = TcpLlm::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_window(&mut rng, 10);
    let before = model.forward_count();
    let d1 = model.decide(3, 12.0, &w).unwrap();
    assert_eq!(model.forward_count(), before + 1);
    assert_eq!(d1.inference_steps, 1);
    assert_eq!(d1.flow_id, 3);
    let d2 = model.decide(3, 12.0, &w).unwrap();
    assert_eq!((d1.chosen, d1.logits), (d2.chosen, d2.logits));
    assert_eq!(d1.chosen, select_cca(&d1.logits).unwrap());
}

#[test]
fn config_rejects_overlong_windows() {
    let cfg = ModelConfig { context_steps: 22, ..Default::default() };
    assert!(matches!(TcpLlm::new(cfg), Err(tcpllm::Error::Config(_))));
    let cfg = ModelConfig { lora_rank: 65, ..Default::default() };
    assert!(TcpLlm::new(cfg).is_err());
}
