//! Checkpoint format: bit-exact round trips, adapter-only reassembly, and
//! distinct failures for each kind of corrupt file.

use std::collections::BTreeMap;
use std::fs;

use lrsl_core::adapters::{apply_adapters, AdapterConfig, Scheme};
use lrsl_core::nn::{Model, Placement, TransformerConfig};
use lrsl_core::trainer::{
    generate_task, load_adapter_into, load_checkpoint, save_adapter_checkpoint, save_checkpoint,
    train, CheckpointError, TaskKind, TaskSpec, TrainConfig, TrainMode,
};

fn model_config() -> TransformerConfig {
    TransformerConfig {
        vocab_size: 10,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 24,
        max_seq_len: 16,
        seed: 31,
    }
}

fn adapter_config() -> AdapterConfig {
    AdapterConfig {
        scheme: Scheme::Milora,
        rank: 2,
        alpha: 2.0,
        dropout: 0.0,
        placement: [Placement::Query, Placement::Value, Placement::MlpUp].into_iter().collect(),
        seed: 4,
    }
}

fn assert_bitwise_equal(a: &Model, b: &Model) {
    let names_a: Vec<&str> = a.params().map(|(n, _)| n).collect();
    let names_b: Vec<&str> = b.params().map(|(n, _)| n).collect();
    assert_eq!(names_a, names_b, "parameter sets differ");
    for (name, p) in a.params() {
        let q = b.param(name).unwrap();
        assert_eq!(p.value.data(), q.value.data(), "tensor `{name}` differs bitwise");
        assert_eq!(p.requires_grad, q.requires_grad, "trainability of `{name}` differs");
    }
}

#[test]
fn full_model_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.ckpt");
    let model = Model::new(model_config()).unwrap();
    let metrics = BTreeMap::from([("final_loss".to_string(), 0.25)]);
    save_checkpoint(&model, None, 7, &metrics, &path).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_bitwise_equal(&model, &loaded);
    assert_eq!(meta.step, 7);
    assert_eq!(meta.metrics["final_loss"], 0.25);
    assert!(meta.adapter.is_none());
}

#[test]
fn adapted_model_round_trip_restores_attachments() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapted.ckpt");
    let acfg = adapter_config();
    let (model, _) = apply_adapters(Model::new(model_config()).unwrap(), &acfg).unwrap();
    save_checkpoint(&model, Some(&acfg), 0, &BTreeMap::new(), &path).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_bitwise_equal(&model, &loaded);
    assert_eq!(meta.adapter.as_ref(), Some(&acfg));
    assert_eq!(loaded.attachments().len(), model.attachments().len());
    let probe = vec![2u32, 5, 3, 9];
    assert_eq!(
        model.forward(&probe).unwrap().max_abs_diff(&loaded.forward(&probe).unwrap()),
        0.0,
        "forward must agree bitwise after reload"
    );
}

#[test]
fn adapter_only_file_reassembles_the_trained_model_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let full_path = dir.path().join("full.ckpt");
    let thin_path = dir.path().join("adapters.ckpt");

    let base = Model::new(model_config()).unwrap();
    let data = generate_task(&TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: 10,
        seq_len: 3,
        num_train: 30,
        num_eval: 5,
        seed: 11,
    })
    .unwrap();
    let acfg = adapter_config();
    let cfg = TrainConfig {
        lr: 1e-3,
        warmup_steps: 5,
        total_steps: 25,
        batch_size: 4,
        seed: 13,
        ..TrainConfig::default()
    };
    let out = train(base.clone(), &TrainMode::Adapter(acfg.clone()), &data.train, &cfg).unwrap();

    save_checkpoint(&out.model, Some(&acfg), 25, &BTreeMap::new(), &full_path).unwrap();
    save_adapter_checkpoint(&out.model, &acfg, 25, &BTreeMap::new(), &thin_path).unwrap();
    // The thin file must be much smaller than the full checkpoint.
    let full_len = fs::metadata(&full_path).unwrap().len();
    let thin_len = fs::metadata(&thin_path).unwrap().len();
    assert!(thin_len * 2 < full_len, "adapter file {thin_len} vs full {full_len}");

    let (reassembled, _) = load_adapter_into(base, &thin_path).unwrap();
    let (reference, _) = load_checkpoint(&full_path).unwrap();
    assert_bitwise_equal(&reference, &reassembled);
}

#[test]
fn corrupt_files_fail_with_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(model_config()).unwrap();
    save_checkpoint(&model, None, 0, &BTreeMap::new(), &path).unwrap();
    let pristine = fs::read(&path).unwrap();

    // Bad magic.
    let mut bytes = pristine.clone();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::BadMagic { .. }));

    // Wrong version.
    let mut bytes = pristine.clone();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path).unwrap_err(),
        CheckpointError::VersionMismatch { found: 99 }
    ));

    // Truncated payload.
    let bytes = &pristine[..pristine.len() - 64];
    fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::Truncated { .. }));

    // Unknown tensor name: rewrite the metadata, renaming one tensor.
    let meta_len = u64::from_le_bytes(pristine[8..16].try_into().unwrap()) as usize;
    let meta_text = std::str::from_utf8(&pristine[16..16 + meta_len]).unwrap();
    let hacked = meta_text.replace("embed.tokens", "embed.bogus!");
    assert_ne!(hacked, meta_text);
    let mut bytes = pristine.clone();
    bytes[16..16 + meta_len].copy_from_slice(hacked.as_bytes());
    fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path).unwrap_err() {
        CheckpointError::UnknownTensor(name) => assert_eq!(name, "embed.bogus!"),
        other => panic!("expected unknown-tensor error, got {other}"),
    }

    // Garbage that is too short for even a header.
    fs::write(&path, b"ML").unwrap();
    assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::Truncated { .. }));
}

#[test]
fn adapter_file_against_wrong_base_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("thin.ckpt");
    let acfg = adapter_config();
    let (model, _) = apply_adapters(Model::new(model_config()).unwrap(), &acfg).unwrap();
    save_adapter_checkpoint(&model, &acfg, 0, &BTreeMap::new(), &path).unwrap();

    let mut other_cfg = model_config();
    other_cfg.n_layers = 1;
    let err = load_adapter_into(Model::new(other_cfg).unwrap(), &path).unwrap_err();
    assert!(matches!(err, CheckpointError::ModelConfigMismatch));

    // A full checkpoint is not an adapter file.
    let full = dir.path().join("full.ckpt");
    let plain = Model::new(model_config()).unwrap();
    save_checkpoint(&plain, None, 0, &BTreeMap::new(), &full).unwrap();
    let err = load_adapter_into(Model::new(model_config()).unwrap(), &full).unwrap_err();
    assert!(matches!(err, CheckpointError::NoAdapterConfig));
}
