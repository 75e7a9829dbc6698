use wfperf::checkpoint::{load_checkpoint, save_checkpoint};
use wfperf::encoders::{HashingTextEmbedder, StructFeatureProvider};
use wfperf::evaluation::{evaluate, report_from_scores};
use wfperf::model::FeatureSet;
use wfperf::scalar::Scalar;
use wfperf::search::{synthetic_corpus, OracleSpec, SyntheticSpaceConfig};
use wfperf::training::{fit, TrainConfig};
use wfperf::workflow::{Corpus, LabeledDataset};

fn tiny() -> TrainConfig {
    TrainConfig {
        d: 8,
        text_dim: 16,
        sem_dim: 4,
        gnn_layers: 1,
        gnn_heads: 2,
        fusion_layers: 1,
        fusion_heads: 2,
        learning_rate: 3e-3,
        batch_size: 64,
        max_epochs: 3,
        patience: 3,
        pretrain_steps: 4,
        pretrain_batch_workflows: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn setup<T: Scalar>() -> (LabeledDataset, Corpus, FeatureSet<T>) {
    let ds = synthetic_corpus(&SyntheticSpaceConfig::default(), &OracleSpec::default(), 30, 3).unwrap();
    let corpus = Corpus::split(&ds, 3);
    let feats = FeatureSet::from_dataset(&ds, &HashingTextEmbedder::new(16), &StructFeatureProvider::new(4)).unwrap();
    (ds, corpus, feats)
}

fn pairs(ds: &LabeledDataset) -> Vec<(&str, &str)> {
    ds.samples.iter().map(|s| (s.workflow_id.as_str(), s.task_id.as_str())).collect()
}

fn round_trip<T: Scalar>() {
    let (_, corpus, feats) = setup::<T>();
    let cfg = tiny();
    let run = fit::<T>(&feats, &corpus, &cfg).unwrap();
    assert!(!run.history.epochs.is_empty());
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &run.model, &cfg, Some(&run.history)).unwrap();
    let back = load_checkpoint::<T>(dir.path()).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.history.as_ref(), Some(&run.history));
    let p = pairs(&corpus.test);
    assert_eq!(run.model.predict(&feats, &p, 17).unwrap(), back.model.predict(&feats, &p, 64).unwrap());
}

#[test]
fn checkpoint_round_trip_f32() {
    round_trip::<f32>();
}

#[test]
fn checkpoint_round_trip_f64() {
    round_trip::<f64>();
}

#[test]
fn same_seed_same_model() {
    let (_, corpus, feats) = setup::<f64>();
    let a = fit::<f64>(&feats, &corpus, &tiny()).unwrap();
    let b = fit::<f64>(&feats, &corpus, &tiny()).unwrap();
    assert_eq!(a.history, b.history);
    let p = pairs(&corpus.validation);
    assert_eq!(a.model.predict(&feats, &p, 32).unwrap(), b.model.predict(&feats, &p, 32).unwrap());
}

#[test]
fn evaluate_agrees_with_scores() {
    let (_, corpus, feats) = setup::<f64>();
    let run = fit::<f64>(&feats, &corpus, &tiny()).unwrap();
    let scores = run.model.predict(&feats, &pairs(&corpus.test), 32).unwrap();
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    let direct = report_from_scores(&corpus.test, &scores, 0.5).unwrap();
    let report = evaluate(&run.model, &feats, &corpus.test).unwrap();
    assert_eq!(report.samples, corpus.test.samples.len());
    assert!((report.accuracy - direct.accuracy).abs() < 1e-12);
    assert!((report.utility - direct.utility).abs() < 1e-12);
}

#[test]
fn constant_scores_give_the_positive_rate() {
    let (_, corpus, _) = setup::<f64>();
    let ds = &corpus.test;
    let positives = ds.samples.iter().filter(|s| s.label == 1).count() as f64;
    let half = vec![0.5; ds.samples.len()];
    let r = report_from_scores(ds, &half, 0.5).unwrap();
    assert!((r.accuracy - 100.0 * positives / ds.samples.len() as f64).abs() < 1e-9);
}

#[test]
fn missing_features_are_reported() {
    let (ds, corpus, _) = setup::<f64>();
    let mut partial = FeatureSet::<f64>::new();
    let text = HashingTextEmbedder::new(16);
    for t in ds.tasks.values() {
        partial.add_task(t, &text).unwrap();
    }
    let err = fit::<f64>(&partial, &corpus, &tiny()).err().expect("fit without workflow features");
    assert!(!err.to_string().is_empty());
}

#[test]
fn mismatched_snapshot_is_rejected() {
    let (_, corpus, feats) = setup::<f32>();
    let run = fit::<f32>(&feats, &corpus, &tiny()).unwrap();
    let other = TrainConfig { d: 12, ..tiny() };
    let dir = tempfile::tempdir().unwrap();
    assert!(save_checkpoint(dir.path(), &run.model, &other, None).is_err());
}
