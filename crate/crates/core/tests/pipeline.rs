use attn_adapter::archive::{
    load_archive, load_checkpoint, save_archive, save_checkpoint, Container, MAGIC,
};
use attn_adapter::episodes::{synth_dataset, SynthConfig};
use attn_adapter::trainer::{evaluate, train, TrainConfig};
use attn_adapter::Error;

fn small() -> SynthConfig {
    SynthConfig {
        seed: 3,
        n_classes: 4,
        shots: 4,
        queries: 6,
        dim: 12,
        locals: 3,
        ..SynthConfig::default()
    }
}

#[test]
fn archive_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.atna");
    let archive = synth_dataset(&small()).unwrap();
    save_archive(&path, &archive).unwrap();
    let loaded = load_archive(&path).unwrap();
    assert_eq!(loaded, archive);

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    save_archive(&path, &loaded).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn header_count_disagreeing_with_payload_is_a_shape_error() {
    let archive = synth_dataset(&small()).unwrap();
    let mut c = archive.to_container().unwrap();
    c.header.meta.insert("num_classes".into(), 5.into());
    let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
    c.header.meta.insert("class_names".into(), names.into());
    let decoded = Container::decode(&c.encode().unwrap()).unwrap();
    let err = attn_adapter::archive::EmbeddingArchive::from_container(&decoded).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.atna");
    let err = load_archive(&path).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("absent.atna"));
}

#[test]
fn trained_checkpoint_reloads_to_identical_scores() {
    let dir = tempfile::tempdir().unwrap();
    let archive = synth_dataset(&small()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        shots: 4,
        ..TrainConfig::default()
    };
    let (params, history) = train(&archive, &cfg).unwrap();
    assert_eq!(history.len(), 3);

    let path = dir.path().join("adapters.atnc");
    save_checkpoint(&path, &params).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();
    assert_eq!(reloaded, params);

    let classes: Vec<usize> = (0..4).collect();
    let a = evaluate(&params, &archive, &classes, 4, 9).unwrap();
    let b = evaluate(&reloaded, &archive, &classes, 4, 9).unwrap();
    assert_eq!(a, b);
}
