use evowarn_nn::neural::{Model, ModelKind, ModelSpec};
use evowarn_nn::trainer::{evaluate, predict_samples, separable_samples, train_samples, TrainConfig};

const WS: usize = 30;

#[test]
fn every_architecture_separates_the_synthetic_classes() {
    let train = separable_samples(256, WS, 1);
    let test = separable_samples(128, WS, 2);
    let config = TrainConfig { max_epochs: 20, batch_size: 32, seed: 3, ..TrainConfig::default() };
    for kind in ModelKind::ALL {
        let out = train_samples(ModelSpec::new(kind, WS, 4), &train, &config).unwrap();
        assert!(out.history.epochs() <= 20);
        let (_, acc) = evaluate(&out.model, &test).unwrap();
        assert_eq!(acc, 1.0, "{kind} reached {acc} after {} epochs", out.history.epochs());
    }
}

#[test]
fn snapshots_reproduce_predictions() {
    let train = separable_samples(64, WS, 5);
    let config = TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let out = train_samples(ModelSpec::new(kind, WS, 6), &train, &config).unwrap();
        let path = dir.path().join(format!("{kind}.json"));
        out.model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, out.model);
        assert_eq!(predict_samples(&loaded, &train).unwrap(), predict_samples(&out.model, &train).unwrap());
    }
}

#[test]
fn window_mismatch_is_rejected() {
    let data = separable_samples(16, WS, 7);
    assert!(train_samples(ModelSpec::new(ModelKind::SeqLstm, WS + 1, 0), &data, &TrainConfig::default()).is_err());
}
