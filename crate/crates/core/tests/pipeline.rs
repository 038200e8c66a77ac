use proptest::prelude::*;
use ttacil_core::data::idx::{load_idx_dataset, write_idx};
use ttacil_core::data::stream::{build_task_stream, TaskStream};
use ttacil_core::data::synth::{synth_dataset, SynthSpec};
use ttacil_core::encoder::io::{load_checkpoint, save_checkpoint};
use ttacil_core::encoder::EncoderConfig;
use ttacil_core::proto::predict;
use ttacil_core::protocol::{evaluate_session, prepare_session, run_protocol, Method, ProtocolConfig};
use ttacil_core::trainer::Phase1Config;
use ttacil_core::tta::engine::TtaConfig;

fn tiny_cfg() -> ProtocolConfig {
    ProtocolConfig {
        encoder: EncoderConfig { image_size: 8, patch_size: 4, embed_dim: 16, depth: 1, heads: 2, ..Default::default() },
        phase1: Phase1Config { epochs: 2, ..Default::default() },
        tta: TtaConfig { m: 2, b: 8, ..Default::default() },
        ..Default::default()
    }
}

fn spec(seed: u64) -> SynthSpec {
    SynthSpec { classes: 6, train_per_class: 5, test_per_class: 3, image_size: 8, seed, ..Default::default() }
}

fn stream(order_seed: u64) -> TaskStream {
    build_task_stream(&synth_dataset(&spec(0)).unwrap(), &[2, 2, 2], order_seed).unwrap()
}

#[test]
fn idx_files_drive_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(&spec(1)).unwrap();
    let p = |n: &str| dir.path().join(n);
    write_idx(p("a"), p("b"), &ds.train).unwrap();
    write_idx(p("c"), p("d"), &ds.test).unwrap();
    let loaded = load_idx_dataset(p("a"), p("b"), p("c"), p("d")).unwrap();
    assert_eq!(loaded.num_classes, 6);
    let s = build_task_stream(&loaded, &[3, 3], 2).unwrap();
    for method in Method::ALL {
        let out = run_protocol(&s, method, &tiny_cfg(), 0).unwrap();
        assert_eq!(out.metrics.per_task.len(), 2);
        assert!(out.metrics.per_task.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(out.tta_logs.is_empty(), method != Method::Ttacil);
    }
}

#[test]
fn saved_model_reproduces_predictions() {
    let s = stream(0);
    let cfg = tiny_cfg();
    let session = prepare_session(&s, &cfg, 3, true).unwrap();
    let bank = session.banks.last().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &session.checkpoint, Some(bank)).unwrap();

    let (ckpt, loaded_bank) = load_checkpoint(&path).unwrap();
    let loaded_bank = loaded_bank.unwrap();
    let mut fresh = prepare_session(&s, &cfg, 99, false).unwrap().encoder;
    fresh.params_mut().restore(&ckpt).unwrap();
    for sample in s.tasks.iter().flat_map(|t| &t.test) {
        let a = predict(&session.encoder.encode(&sample.image).unwrap(), bank).unwrap();
        let b = predict(&fresh.encode(&sample.image).unwrap(), &loaded_bank).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn pre_adaptation_accuracy_is_first_session_only() {
    let s = stream(1);
    let cfg = tiny_cfg();
    let session = prepare_session(&s, &cfg, 5, true).unwrap();
    let fso = evaluate_session(&session, &s, Method::FirstSessionOnly, &cfg, 5).unwrap();
    let ttacil = evaluate_session(&session, &s, Method::Ttacil, &cfg, 5).unwrap();
    assert_eq!(ttacil.pre_adaptation.unwrap(), fso.metrics.per_task);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn banks_only_grow(order_seed in 0u64..1000, seed in 0u64..1000) {
        let s = stream(order_seed);
        let session = prepare_session(&s, &tiny_cfg(), seed, false).unwrap();
        let mut expected = 0;
        for (t, bank) in session.banks.iter().enumerate() {
            expected += s.tasks[t].classes.len();
            prop_assert_eq!(bank.len(), expected);
            if t > 0 {
                for (c, proto) in session.banks[t - 1].iter() {
                    prop_assert_eq!(bank.get(c), Some(proto));
                }
            }
        }
    }
}
