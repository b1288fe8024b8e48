use icq_core::dataset::collect_mmdp_dataset;
use icq_core::learners::{train, Algorithm, Checkpoint, LearnerConfig, LearnerError};
use icq_core::mdp::build_mmdp;
use icq_core::{MmdpSpec, OfflineDataset};

#[test]
fn collected_data_survives_disk_and_trains_to_a_reloadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MmdpSpec::new(2);
    let env = build_mmdp(&spec).unwrap();
    let ds = collect_mmdp_dataset(&spec, 8, 2, 21).unwrap();
    let data_path = dir.path().join("d.jsonl");
    ds.save(&data_path).unwrap();
    let loaded = OfflineDataset::load(&data_path).unwrap();
    assert_eq!(loaded, ds);

    for algorithm in Algorithm::ALL {
        let mut config = LearnerConfig::new(algorithm);
        config.total_steps = 40;
        config.log_every = 10;
        let fresh = train(&ds, &env, &config, &mut |_| {}).unwrap();
        let reloaded = train(&loaded, &env, &config, &mut |_| {}).unwrap();
        assert_eq!(fresh.metrics, reloaded.metrics, "{algorithm}");

        let path = dir.path().join(format!("{algorithm}.json"));
        fresh.checkpoint.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), fresh.checkpoint);
    }
}

#[test]
fn collection_is_seed_deterministic() {
    let spec = MmdpSpec::new(3);
    let a = collect_mmdp_dataset(&spec, 6, 1, 4).unwrap();
    let b = collect_mmdp_dataset(&spec, 6, 1, 4).unwrap();
    let c = collect_mmdp_dataset(&spec, 6, 1, 5).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_ne!(a.to_jsonl(), c.to_jsonl());
}

#[test]
fn corrupt_checkpoint_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"algorithm\": \"icq-ma\", \"num_states\": 2").unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(LearnerError::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::load(dir.path().join("missing.json")),
        Err(LearnerError::Io(_))
    ));
}
