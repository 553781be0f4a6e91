use tinyvad_core::backbone::{build_backbone, pretrain_teacher, BackboneSpec, PretrainConfig};
use tinyvad_core::data::shapes_dataset;

#[test]
fn shapes_pretraining_reaches_high_accuracy_for_two_seeds() {
    let mut spec = BackboneSpec::tiny_irnet8();
    spec.input_hw = (32, 32);
    let data = shapes_dataset(24, 32, 1);
    let mut trained = Vec::new();
    for seed in [1, 2] {
        let b = build_backbone(&spec, seed).unwrap();
        let cfg = PretrainConfig {
            epochs: 20,
            seed,
            ..PretrainConfig::default()
        };
        let (model, report) = pretrain_teacher(&b, &data, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.9, "seed {seed}: {report:?}");
        assert_eq!(report.epoch_losses.len(), 20);
        trained.push(model);
    }
    assert_ne!(trained[0], trained[1]);
}
