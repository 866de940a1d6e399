use angioseg_core::data::io::{write_dataset, Manifest};
use angioseg_core::data::{generate_dataset, split, AugmentPolicy, Sample, SynthConfig};
use angioseg_core::train::{
    evaluate, evaluate_checkpoint, evaluate_masks, load_pretrained, run_ablation, train, train_on,
    AblationEntry, Checkpoint, Control, LoadMode, TrainConfig,
};
use angioseg_core::{ArchConfig, ArchKind, Error, Network, Tensor};

fn data(count: usize, size: usize, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig {
        size,
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, count, 1).unwrap()
}

fn config(size: usize, epochs: usize) -> TrainConfig {
    let mut arch = ArchConfig::new(ArchKind::Unet3p, 3, size);
    arch.base_channels = 2;
    TrainConfig {
        arch,
        epochs,
        batch_size: 2,
        lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_smoke() {
    let s = data(2, 16, 1);
    let mut cfg = config(16, 1);
    cfg.batch_size = 1;
    let out = train_on(&cfg, None, &s, &s, |_, _| Control::Continue).unwrap();
    assert_eq!(out.history.rows.len(), 1);
    let row = out.history.rows[0];
    assert!(row.train_loss.is_finite() && row.train_loss > 0.0);
    assert!((0.0..=1.0).contains(&row.val_dsc));
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn same_seed_same_history_and_weights() {
    let s = data(4, 16, 2);
    let cfg = config(16, 3);
    let a = train_on(&cfg, None, &s[..3], &s[3..], |_, _| Control::Continue).unwrap();
    let b = train_on(&cfg, None, &s[..3], &s[3..], |_, _| Control::Continue).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.network, b.network);
}

#[test]
fn loss_falls_on_a_small_fixture() {
    let s = data(4, 16, 3);
    let mut cfg = config(16, 20);
    cfg.augment = AugmentPolicy::none();
    let out = train_on(&cfg, None, &s, &s, |_, _| Control::Continue).unwrap();
    let rows = &out.history.rows;
    assert!(rows[19].train_loss < rows[0].train_loss);
}

#[test]
fn callback_can_stop_early() {
    let s = data(2, 16, 4);
    let out = train_on(&config(16, 10), None, &s, &s, |row, _| {
        if row.epoch == 2 { Control::Stop } else { Control::Continue }
    })
    .unwrap();
    assert_eq!(out.history.rows.len(), 2);
}

#[test]
fn bad_inputs_fail_before_training() {
    let s = data(2, 16, 5);
    let cfg = config(16, 1);
    assert!(matches!(train_on(&cfg, None, &[], &s, |_, _| Control::Continue), Err(Error::Usage(_))));
    let big = data(1, 32, 5);
    assert!(matches!(
        train_on(&cfg, None, &big, &s, |_, _| Control::Continue),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn checkpoint_file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = data(2, 16, 6);
    let out = train_on(&config(16, 2), None, &s, &s, |_, _| Control::Continue).unwrap();
    let path = dir.path().join("best.vnck");
    out.best.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.best);
    let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 17) as f32 / 16.0);
    let net = back.to_network().unwrap();
    assert_eq!(net.forward(&x).unwrap(), out.best_network.forward(&x).unwrap());
    assert_eq!(back.epoch().unwrap(), out.best_epoch as u64);
    assert!(back.rng().unwrap().is_some());
    assert!(back.optimizer(&net, Default::default()).is_some());
}

#[test]
fn corrupted_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&config(16, 1).arch, 1).unwrap();
    let mut bytes = Checkpoint::from_network(&net, 0, None, None).to_bytes();
    bytes[0] = b'X';
    let path = dir.path().join("bad.vnck");
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
}

#[test]
fn by_name_transfers_the_shared_part() {
    let mut big = ArchConfig::new(ArchKind::Unet3p, 5, 32);
    big.base_channels = 2;
    let src = Checkpoint::from_network(&Network::build(&big, 1).unwrap(), 0, None, None);
    let mut small_cfg = big.clone();
    small_cfg.num_scales = 4;
    let mut net = Network::build(&small_cfg, 2).unwrap();
    let report = load_pretrained(&src, &mut net, LoadMode::ByName).unwrap();
    assert!(report.fraction() > 0.0 && report.fraction() < 1.0, "{report:?}");
    let i = net.param_index("enc1.block1.conv.weight").unwrap();
    assert_eq!(Some(&net.params()[i].value), src.get("enc1.block1.conv.weight"));
    let before = net.clone();
    assert!(matches!(load_pretrained(&src, &mut net, LoadMode::Strict), Err(Error::Load { .. })));
    assert_eq!(net, before);
}

#[test]
fn ground_truth_as_prediction_is_perfect() {
    let s = data(3, 16, 7);
    let pairs: Vec<_> = s.iter().map(|x| (x.id.clone(), x.mask.clone(), x.mask.clone())).collect();
    let report = evaluate_masks("oracle", &pairs).unwrap();
    for m in &report.images {
        assert_eq!((m.dsc, m.sn, m.sp), (1.0, 1.0, 1.0));
        assert_eq!((m.hd_mm, m.asd_mm), (Some(0.0), Some(0.0)));
    }
    assert!(matches!(evaluate_masks("oracle", &[]), Err(Error::Usage(_))));
    let net = Network::build(&config(16, 1).arch, 1).unwrap();
    assert!(matches!(evaluate(&net, &[], "net"), Err(Error::Usage(_))));
}

#[test]
fn manifest_training_and_evaluation_keep_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = data(6, 16, 8);
    write_dataset(dir.path(), &s).unwrap();
    let manifest = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
    let plan = split(&manifest.patient_items(), [0.5, 0.2, 0.3], 1).unwrap();
    let out = train(&config(16, 1), None, &manifest, &plan).unwrap();
    let report = evaluate_checkpoint(&out.best, &manifest, None, "m").unwrap();
    let ids: Vec<&str> = report.images.iter().map(|m| m.id.as_str()).collect();
    let want: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, want);
    let sub = vec![s[4].id.clone(), s[1].id.clone()];
    let report = evaluate_checkpoint(&out.best, &manifest, Some(&sub), "m").unwrap();
    assert_eq!(report.images.len(), 2);
    assert_eq!(report.images[0].id, s[1].id);
    assert!(matches!(
        evaluate_checkpoint(&out.best, &manifest, Some(&[]), "m"),
        Err(Error::Usage(_))
    ));
}

#[test]
fn identical_entries_give_identical_rows() {
    let s = data(6, 16, 9);
    let entry = AblationEntry {
        name: "a".into(),
        config: config(16, 1),
        init: None,
    };
    let twin = AblationEntry {
        name: "b".into(),
        ..entry.clone()
    };
    let result = run_ablation(&[entry.clone(), twin], &s, 3, 2).unwrap();
    let table = result.table_csv();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "model,HD(mm),DSC,SN,SP,ASD(mm)");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1].strip_prefix("a,"), lines[2].strip_prefix("b,"));
    let series = result.fold_series_csv("DSC").unwrap();
    assert_eq!(series.lines().count(), 1 + 3);
    assert!(result.fold_series_csv("IoU").is_err());
    assert!(run_ablation(&[entry], &s, 3, 2).is_err());
}
