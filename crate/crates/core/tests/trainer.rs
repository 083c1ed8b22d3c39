use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcpllm::control::{oracle_pool, OracleConfig, PoolConfig, Scenario};
use tcpllm::model::{
    lora_param_count, BackboneConfig, Calibration, ModelConfig, Normalizer, Task, TcpLlm, Window,
};
use tcpllm::simnet::{CcaId, LinkConfig, SimConfig};
use tcpllm::telemetry::{DetectorConfig, ExperiencePool, Trajectory};
use tcpllm::tensor::Tape;
use tcpllm::trainer::*;
use tcpllm::Error;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { layers: 1, heads: 2, token_dim: 16, context_len: 64, ..BackboneConfig::default() },
        context_steps: 5,
        ..ModelConfig::default()
    }
}

fn cal() -> Calibration {
    Calibration { normalizer: Normalizer::new(Some(100.0), Some(10.0)).unwrap(), return_scale: 100.0, target_return: 50.0 }
}

fn random_traj(rng: &mut ChaCha8Rng, episode: u64, len: usize, label: Option<CcaId>) -> Trajectory {
    let states: Vec<[f64; 4]> = (0..len)
        .map(|_| [rng.random_range(1.0..100.0), rng.random_range(0.0..0.1), rng.random_range(10.0..20.0), rng.random_range(1.0..110.0)])
        .collect();
    let actions: Vec<CcaId> = (0..len).map(|_| CcaId::ALL[rng.random_range(0..3)]).collect();
    let labels = Some(match label {
        Some(l) => vec![l; len],
        None => (0..len).map(|_| CcaId::ALL[rng.random_range(0..3)]).collect(),
    });
    Trajectory::from_states("synthetic", episode, 0, states, actions, labels).unwrap()
}

fn random_pool(seed: u64, episodes: u64, len: usize, label: Option<CcaId>) -> ExperiencePool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ExperiencePool::new();
    for e in 0..episodes {
        pool.push(random_traj(&mut rng, e, len, label)).unwrap();
    }
    pool
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, record_wall_time: false, ..TrainConfig::default() }
}

#[test]
fn full_window_has_six_tokens_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_traj(&mut rng, 0, 20, None);
    let w = tokenize(&t, 20, &cal()).unwrap();
    assert_eq!(w.len(), 1);
    let slots = slot_layout(&w[0], 4, 0);
    assert_eq!(slots.len(), 120);
    assert!(!slots.contains(&Slot::Pad));
    assert_eq!(slots[..6], [Slot::Return(0), Slot::State(0, 0), Slot::State(0, 1), Slot::State(0, 2), Slot::State(0, 3), Slot::Action(0)]);
}

#[test]
fn short_trajectory_is_left_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_traj(&mut rng, 0, 5, None);
    let w = tokenize(&t, 20, &cal()).unwrap();
    assert_eq!(w.len(), 1);
    let slots = slot_layout(&w[0], 4, 0);
    assert_eq!(slots.iter().filter(|s| **s == Slot::Pad).count(), 90);
    assert!(slots[..90].iter().all(|s| *s == Slot::Pad));
    assert_eq!(w[0].targets.iter().flatten().count(), 5);
    assert_eq!(slots.iter().filter(|s| matches!(s, Slot::Action(_))).count(), 5);
}

#[test]
fn sliding_windows_share_all_but_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 8;
    let t = random_traj(&mut rng, 0, 30, None);
    let ws = tokenize(&t, k, &cal()).unwrap();
    assert_eq!(ws.len(), 30 - k + 1);
    for (i, pair) in ws.windows(2).enumerate() {
        let a = slot_layout(&pair[0], 4, i);
        let b = slot_layout(&pair[1], 4, i + 1);
        let shared = 6 * (k - 1);
        assert_eq!(a[6..], b[..shared]);
        assert_eq!(pair[0].states[1..], pair[1].states[..k - 1]);
        assert_eq!(pair[0].returns[1..], pair[1].returns[..k - 1]);
        assert_eq!(pair[0].actions[1..], pair[1].actions[..k - 1]);
    }
    let strided = tokenize_strided(&t, k, &cal(), 4).unwrap();
    assert_eq!(strided.last(), ws.last());
    assert_eq!(strided.len(), (30 - k) / 4 + 1);
}

#[test]
fn initial_loss_is_near_ln3() {
    let pool = random_pool(4, 6, 30, None);
    let cfg = quick(1);
    let mut m = tiny_model();
    m.task = Task::Rl;
    let model = TcpLlm::new(m).unwrap();
    let mut ws = Vec::new();
    for t in pool.trajectories() {
        ws.extend(tokenize(t, 5, &cal()).unwrap());
    }
    let (loss, _) = evaluate(&model, &ws, cfg.batch_size).unwrap();
    let ln3 = 3f64.ln();
    assert!((loss.unwrap() - ln3).abs() < 0.05 * ln3, "initial loss {loss:?}");
}

#[test]
fn constant_labels_fit_in_one_epoch() {
    let pool = random_pool(5, 10, 40, Some(CcaId::Bbr));
    let cfg = TrainConfig { lr: 1e-2, ..quick(1) };
    let tr = train_rl(&pool, &tiny_model(), &cfg).unwrap();
    assert_eq!(tr.report.last().test_acc, Some(1.0));
}

#[test]
fn accumulation_matches_one_larger_step_under_constant_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = random_traj(&mut rng, 0, 5, None);
    let w = tokenize(&t, 5, &cal()).unwrap().remove(0);
    let mut m = tiny_model();
    m.task = Task::Rl;
    let base = TcpLlm::new(m).unwrap();
    let one = TrainConfig { batch_size: 1, grad_accum_steps: 1, ..quick(1) };
    let three = TrainConfig { grad_accum_steps: 3, ..one.clone() };
    let mut a = base.clone();
    let ra = fit(&mut a, std::slice::from_ref(&w), &[], &one).unwrap();
    let mut b = base.clone();
    let rb = fit(&mut b, &[w.clone(), w.clone(), w.clone()], &[], &three).unwrap();
    assert_eq!((ra.optimizer_steps, rb.optimizer_steps), (1, 1));
    for ((_, name, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-5, "{name}: {p} vs {q}");
        }
    }
}

#[test]
fn single_example_is_memorized() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pool = ExperiencePool::new();
    pool.push(random_traj(&mut rng, 0, 5, Some(CcaId::Cubic))).unwrap();
    let ds = SlDataset::from_pool(&pool, 5, SlTarget::Classify, 5).unwrap();
    assert_eq!(ds.len(), 1);
    let cfg = TrainConfig { mode: Mode::Sl, lr: 1e-2, test_fraction: 0.0, batch_size: 1, ..quick(200) };
    let tr = train_sl(&ds, &tiny_model(), &cfg).unwrap();
    assert_eq!(tr.report.optimizer_steps, 200);
    assert!(tr.report.last().train_loss < 1e-3, "{:?}", tr.report.last());
}

#[test]
fn regression_target_trains() {
    let pool = random_pool(8, 4, 30, None);
    let ds = SlDataset::from_pool(&pool, 5, SlTarget::Regress, 2).unwrap();
    assert!(ds.examples.iter().all(|e| e.label.is_none() && e.next_throughput.is_some()));
    let cfg = TrainConfig { mode: Mode::Sl, sl_target: SlTarget::Regress, lr: 3e-3, ..quick(15) };
    let tr = train_sl(&ds, &tiny_model(), &cfg).unwrap();
    assert_eq!(tr.model.config.task, Task::SlRegress);
    assert!(tr.report.last().train_loss < tr.report.epochs[0].train_loss);
    assert_eq!(tr.report.last().train_acc, None);
    assert!(train_sl(&ds, &tiny_model(), &TrainConfig { mode: Mode::Sl, ..quick(1) }).is_err());
}

#[test]
fn empty_inputs_are_config_errors() {
    let err = train_rl(&ExperiencePool::new(), &tiny_model(), &quick(1)).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train_sl(&SlDataset::default(), &tiny_model(), &TrainConfig { mode: Mode::Sl, ..quick(1) }).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = train_rl(&random_pool(1, 2, 10, None), &tiny_model(), &TrainConfig { grad_accum_steps: 0, ..quick(1) })
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)));
    let too_long = ModelConfig { context_steps: 11, ..tiny_model() };
    assert!(matches!(train_rl(&random_pool(1, 2, 10, None), &too_long, &quick(1)), Err(Error::Config(_))));
}

#[test]
fn training_is_seed_deterministic() {
    let pool = random_pool(9, 5, 30, None);
    let run = || {
        let tr = train_rl(&pool, &tiny_model(), &quick(3)).unwrap();
        let mut buf = Vec::new();
        tr.report.write_jsonl(&mut buf).unwrap();
        (buf, encode_weights(&tr.model).unwrap())
    };
    let (r1, w1) = run();
    let (r2, w2) = run();
    assert_eq!(r1, r2);
    assert_eq!(w1, w2);
    let line: serde_json::Value = serde_json::from_slice(r1.split(|&b| b == b'\n').next().unwrap()).unwrap();
    let keys: Vec<&str> = line.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["epoch", "test_acc", "test_loss", "train_acc", "train_loss", "wall_s"]);
}

#[test]
fn training_touches_only_the_trainable_set() {
    let pool = random_pool(10, 4, 30, None);
    let m = tiny_model();
    let fresh = TcpLlm::new(ModelConfig { task: Task::Rl, ..m.clone() }).unwrap();
    let tr = train_rl(&pool, &m, &quick(2)).unwrap();
    assert_eq!(tr.model.current_base_hash(), fresh.frozen_hash());
    assert_eq!(tr.model.frozen_hash(), fresh.frozen_hash());
    let d = 16;
    let lora = 4 * lora_param_count(d, d, 4);
    let enc = 4 * (d + d);
    let head = d * 3 + 3;
    let embed = d + d + 3 * d;
    assert_eq!(tr.model.store.trainable_count(), lora + enc + head + embed);
    for (_, name, t) in tr.model.store.iter() {
        let expect = ["lora.", "enc.", "head.", "embed."].iter().any(|p| name.starts_with(p));
        assert_eq!(t.requires_grad(), expect, "{name}");
    }

    let ds = SlDataset::from_pool(&pool, 5, SlTarget::Classify, 3).unwrap();
    let sl = train_sl(&ds, &m, &TrainConfig { mode: Mode::Sl, ..quick(2) }).unwrap();
    assert_eq!(sl.model.current_base_hash(), sl.model.frozen_hash());
    assert_eq!(sl.model.store.trainable_count(), lora + enc + head);
    assert_ne!(encode_weights(&sl.model).unwrap(), encode_weights(&tr.model).unwrap());
}

#[test]
fn every_trainable_tensor_receives_gradient_after_a_step() {
    let pool = random_pool(11, 4, 30, None);
    let mut tr = train_rl(&pool, &tiny_model(), &TrainConfig { batch_size: 4, ..quick(1) }).unwrap();
    let ws: Vec<Window> = tokenize(&pool.trajectories()[0], 5, &tr.model.calibration.unwrap()).unwrap();
    let model = tr.model.clone();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &model.store, &ws[..4]).unwrap();
    let targets: Vec<Option<usize>> = ws[..4].iter().flat_map(|w| w.targets.iter().map(|t| t.map(CcaId::index))).collect();
    let loss = tape.cross_entropy_masked(out.logits, &targets).unwrap();
    tr.model.store.zero_grad();
    tape.backward(loss, &mut tr.model.store).unwrap();
    for (_, name, t) in tr.model.store.iter().filter(|(_, _, t)| t.requires_grad()) {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pool = random_pool(12, 4, 20, None);
    let cfg = quick(1);
    let tr = train_rl(&pool, &tiny_model(), &cfg).unwrap();
    let p1 = dir.path().join("a.tcpl");
    let p2 = dir.path().join("b.tcpl");
    save_checkpoint(&tr.model, Some(&cfg), &p1).unwrap();
    let (loaded, meta) = load_checkpoint(&p1).unwrap();
    assert_eq!(meta.train.as_ref(), Some(&cfg));
    assert_eq!(loaded.calibration, tr.model.calibration);
    for ((_, n, a), (_, _, b)) in tr.model.store.iter().zip(loaded.store.iter()) {
        let bits = |t: &tcpllm::tensor::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n}");
        assert_eq!(a.requires_grad(), b.requires_grad(), "{n}");
    }
    save_checkpoint(&loaded, Some(&cfg), &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(fs::read(sidecar_path(&p1)).unwrap(), fs::read(sidecar_path(&p2)).unwrap());
    let bytes = fs::read(&p1).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, tr.model.store.len());
}

#[test]
fn checkpoint_rejects_wrong_shapes_and_versions() {
    let dir = tempfile::tempdir().unwrap();
    let m = TcpLlm::new(tiny_model()).unwrap();
    let p = dir.path().join("m.tcpl");
    save_checkpoint(&m, None, &p).unwrap();
    let wider = ModelConfig {
        backbone: BackboneConfig { token_dim: 32, ..tiny_model().backbone },
        ..tiny_model()
    };
    match load_with_config(&p, wider) {
        Err(Error::Shape(msg)) => assert!(msg.contains('`'), "{msg}"),
        other => panic!("expected a shape error, got {:?}", other.err()),
    }
    let mut bytes = fs::read(&p).unwrap();
    bytes[4] = 2;
    assert!(matches!(decode_weights(&bytes), Err(Error::Version { found: 2, expected: 1 })));
    let side = sidecar_path(&p);
    let meta = fs::read_to_string(&side).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    fs::write(&side, meta).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Version { found: 7, .. })));
}

#[test]
fn merged_models_are_not_saved() {
    let mut m = TcpLlm::new(tiny_model()).unwrap();
    let store = m.store.clone();
    m.backbone_mut().merge_lora(&store, "layer0.attn_q").unwrap();
    assert!(matches!(encode_weights(&m), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_corrupted_payload_byte_is_detected(pos in 0usize..100_000, flip in 1u8..=255) {
        let dir = tempfile::tempdir().unwrap();
        let m = TcpLlm::new(tiny_model()).unwrap();
        let p = dir.path().join("m.tcpl");
        save_checkpoint(&m, None, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let i = pos % bytes.len();
        bytes[i] ^= flip;
        fs::write(&p, &bytes).unwrap();
        prop_assert!(matches!(load_checkpoint(&p), Err(Error::Integrity(_))));
    }
}

#[test]
fn every_sidecar_byte_is_covered() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = TcpLlm::new(tiny_model()).unwrap();
    m.calibration = Some(cal());
    let p = dir.path().join("m.tcpl");
    save_checkpoint(&m, None, &p).unwrap();
    let side = sidecar_path(&p);
    let clean = fs::read(&side).unwrap();
    for i in 0..clean.len() {
        for flip in [0x01u8, 0x20] {
            let mut bytes = clean.clone();
            bytes[i] ^= flip;
            fs::write(&side, &bytes).unwrap();
            match load_checkpoint(&p) {
                Err(Error::Integrity(_) | Error::Version { .. }) => {}
                other => panic!("byte {i} ^ {flip:#x} gave {:?}", other.map(|_| ())),
            }
        }
    }
    fs::write(&side, &clean).unwrap();
    assert!(load_checkpoint(&p).is_ok());
}

#[test]
fn untrained_policy_still_closes_the_loop() {
    let mut model = TcpLlm::new(tiny_model()).unwrap();
    model.calibration = Some(cal());
    let link = LinkConfig::default();
    let sim = SimConfig::default();
    let det = DetectorConfig::default();
    let settings = EvalSettings { link: &link, sim: &sim, seed: 3, switch_interval_s: 5.0, detectors: &det, settle_s: 5.0 };
    let ev = evaluate_policy(&model, Scenario::CubicBbr, &settings).unwrap();
    for f in &ev.trace.flows {
        assert_eq!(f.samples.len(), 100);
        let n = ev.decisions.iter().filter(|d| d.flow_id == f.flow_id).count();
        assert!(n <= 20 && n > 0, "{n} decisions");
    }
    assert!(ev.decisions.iter().all(|d| d.inference_steps == 1 && CcaId::ALL.contains(&d.chosen)));
    let mut no_cal = model.clone();
    no_cal.calibration = None;
    assert!(matches!(evaluate_policy(&no_cal, Scenario::CubicBbr, &settings), Err(Error::Config(_))));
}

#[test]
fn oracle_pool_is_labeled_and_sized() {
    let sim = SimConfig { duration_s: 20.0, ..SimConfig::default() };
    let cfg = PoolConfig { seeds: vec![4], oracle_pairs: false, ..PoolConfig::default() };
    assert_eq!(cfg.episodes(), 3);
    let pool = oracle_pool(&LinkConfig::default(), &sim, &cfg, &OracleConfig::default()).unwrap();
    assert_eq!(pool.len(), 6);
    for t in pool.trajectories() {
        assert_eq!(t.labels.as_ref().unwrap().len(), t.horizon());
        assert_eq!(t.source, "oracle");
    }
    let ep: std::collections::BTreeSet<u64> = pool.trajectories().iter().map(|t| t.episode).collect();
    assert_eq!(ep.len(), 3);
    let none = PoolConfig { seeds: vec![], ..PoolConfig::default() };
    assert!(oracle_pool(&LinkConfig::default(), &sim, &none, &OracleConfig::default()).is_err());
}
