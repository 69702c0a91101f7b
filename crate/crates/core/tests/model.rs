use autoformer::autocorr::MechanismKind;
use autoformer::data::{collate, generate_synthetic, make_windows, SyntheticSpec};
use autoformer::model::{AutoformerModel, ModelConfig};
use autoformer::train::{evaluate, train, TrainConfig};

fn windows() -> Vec<autoformer::data::WindowSample> {
    let frame = generate_synthetic(&SyntheticSpec {
        length: 120,
        channels: 2,
        periods: vec![6.0],
        trend_slope: 0.0,
        noise_sd: 0.1,
        seed: 3,
    })
    .unwrap();
    make_windows(&frame, 16, 8, 3).unwrap()
}

#[test]
fn saved_model_predicts_identically() {
    let w = windows();
    let refs: Vec<_> = w.iter().take(4).collect();
    let (batch, _) = collate(&refs).unwrap();
    for kind in [MechanismKind::AutocorrStandard, MechanismKind::AutocorrSpeedup, MechanismKind::FullAttention] {
        let model = AutoformerModel::new(ModelConfig {
            mechanism: kind,
            ..ModelConfig::tiny()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = AutoformerModel::load(&path).unwrap();
        assert_eq!(model.predict(&batch).unwrap(), back.predict(&batch).unwrap());
    }
}

#[test]
fn single_window_forward_matches_batched() {
    let w = windows();
    let model = AutoformerModel::new(ModelConfig::tiny()).unwrap();
    let one = model.autoformer_forward(&w[0].x_enc, &w[0].marks_enc, &w[0].marks_dec).unwrap();
    assert_eq!(one.shape(), &[8, 2]);
    let (batch, _) = collate(&[&w[0]]).unwrap();
    assert_eq!(model.predict(&batch).unwrap().data(), one.data());
}

#[test]
fn training_beats_untrained_on_validation() {
    let w = windows();
    let (tr, va) = w.split_at(w.len() - 6);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        max_epochs: 4,
        patience: 4,
        seed: 1,
    };
    let model = AutoformerModel::new(ModelConfig::tiny()).unwrap();
    let before = evaluate(&model, va, cfg.batch_size).unwrap().mse;
    let out = train(model, tr, va, &cfg).unwrap();
    assert!(out.best_val_mse < before);
    assert!(out.history.len() <= cfg.max_epochs);
}
