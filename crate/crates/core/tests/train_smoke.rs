use skipforge_core::checkpoint::Checkpoint;
use skipforge_core::scheduler::ScheduleConfig;
use skipforge_core::train::{train, write_loss_log, TrainConfig};
use skipforge_core::unet::UNetConfig;

#[test]
fn short_run_logs_finite_falling_loss_and_round_trips() {
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::smoke() };
    let mut seen = 0;
    let out = train(&UNetConfig::smoke(), &cfg, ScheduleConfig::default(), |_| seen += 1).unwrap();
    let unet: Vec<_> = out.log.iter().filter(|e| e.phase == "unet").collect();
    assert_eq!(unet.len(), 3);
    assert_eq!(seen, out.log.len());
    assert!(unet.iter().all(|e| e.loss.is_finite()));
    assert!(unet[2].loss < unet[0].loss, "loss did not fall: {unet:?}");

    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("loss.csv");
    write_loss_log(&log_path, &out.log).unwrap();
    let text = std::fs::read_to_string(&log_path).unwrap();
    assert_eq!(text.lines().count(), out.log.len() + 1);

    let path = dir.path().join("smoke.ckpt");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load_expecting(&path, &UNetConfig::smoke()).unwrap();
    assert_eq!(back.hash().unwrap(), out.checkpoint.hash().unwrap());
    assert!(back.raw.is_some() && back.classifier.is_some());
    assert!(Checkpoint::load_expecting(&path, &UNetConfig::desk()).is_err());
}

#[test]
fn same_seeds_give_identical_checkpoints() {
    let cfg = TrainConfig::smoke();
    let a = train(&UNetConfig::smoke(), &cfg, ScheduleConfig::default(), |_| {}).unwrap();
    let b = train(&UNetConfig::smoke(), &cfg, ScheduleConfig::default(), |_| {}).unwrap();
    assert_eq!(a.checkpoint.hash().unwrap(), b.checkpoint.hash().unwrap());
    let c = train(&UNetConfig::smoke(), &TrainConfig { seed: 1, ..cfg }, ScheduleConfig::default(), |_| {}).unwrap();
    assert_ne!(a.checkpoint.hash().unwrap(), c.checkpoint.hash().unwrap());
}

#[test]
fn null_condition_frequency_tracks_dropout() {
    let cfg = TrainConfig { dataset_size: 2048, batch_size: 64, classifier_epochs: 0, ..TrainConfig::smoke() };
    let out = train(&UNetConfig::smoke(), &cfg, ScheduleConfig::default(), |_| {}).unwrap();
    let frac = out.log.iter().find(|e| e.phase == "unet").unwrap().null_fraction;
    assert!((frac - 0.1).abs() <= 0.02, "null fraction {frac}");
}
