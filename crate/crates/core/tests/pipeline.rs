use attrhash::io::{ingest, write_dataset, Checkpoint, TrainingMeta};
use attrhash::model::{Model, ModelConfig};
use attrhash::objective::{train, TrainConfig};
use attrhash::pyramid::{LevelShape, PyramidGeometry};
use attrhash::retrieval::{encode_database, PackedCodes};
use attrhash::synthgen::{generate, SynthSpec};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        classes: 4,
        attributes: 6,
        images_per_class: 4,
        geometry: PyramidGeometry::new(vec![
            LevelShape { channels: 6, width: 2, height: 2 },
            LevelShape { channels: 4, width: 4, height: 4 },
        ])
        .unwrap(),
        seed,
        ..SynthSpec::default()
    }
}

fn small_model(spec: &SynthSpec, branches: usize) -> ModelConfig {
    ModelConfig {
        geometry: spec.geometry.clone(),
        width: 8,
        heads: 2,
        ffn_hidden: 16,
        bits: 6,
        branches,
    }
}

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-4,
        samples: 6,
        batch_size: 3,
        outer_iterations: 2,
        inner_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn generated_dataset_reads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small_spec(3)).unwrap();
    let path = write_dataset(&ds, dir.path(), "small").unwrap();
    let first = std::fs::read(dir.path().join("small.f32")).unwrap();
    assert_eq!(ingest(&path).unwrap().load().unwrap(), ds);

    let again = tempfile::tempdir().unwrap();
    write_dataset(&generate(&small_spec(3)).unwrap(), again.path(), "small").unwrap();
    assert_eq!(std::fs::read(again.path().join("small.f32")).unwrap(), first);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let spec = small_spec(1);
    let ds = generate(&spec).unwrap();
    let mc = small_model(&spec, 2);
    let a = train(&ds, &mc, &quick_train(5)).unwrap();
    let b = train(&ds, &mc, &quick_train(5)).unwrap();
    let meta = TrainingMeta { beta: 1.0, gamma: 200.0, seed: 5, iterations: 2 };
    let ca = Checkpoint { model: a.model, meta: meta.clone() };
    let cb = Checkpoint { model: b.model, meta };
    assert_eq!(ca.to_bytes(), cb.to_bytes());
    assert_eq!(a.log, b.log);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ck");
    ca.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let before = encode_database(&ca.model, &ds.images).unwrap();
    let after = encode_database(&loaded.model, &ds.images).unwrap();
    assert_eq!(before, after);
    assert_eq!(before.bits(), 6);

    let codes = dir.path().join("codes.aqhc");
    after.save(&codes).unwrap();
    assert_eq!(PackedCodes::load(&codes).unwrap(), after);
}

#[test]
fn zero_iterations_return_the_initial_model() {
    let spec = small_spec(2);
    let ds = generate(&spec).unwrap();
    let mc = small_model(&spec, 1);
    let cfg = TrainConfig { outer_iterations: 0, ..quick_train(9) };
    let out = train(&ds, &mc, &cfg).unwrap();
    assert_eq!(out.model, Model::init(mc, 9).unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn oversized_sample_is_rejected() {
    let spec = small_spec(2);
    let ds = generate(&spec).unwrap();
    let cfg = TrainConfig { samples: 1000, ..quick_train(0) };
    assert!(train(&ds, &small_model(&spec, 1), &cfg).is_err());
}
