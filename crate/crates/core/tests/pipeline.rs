use dkn_core::inference::{upsample, UpsampleRequest};
use dkn_core::io::{load_scene, read_image, scan_dataset, write_image, write_scene};
use dkn_core::metrics::{evaluate, Protocol};
use dkn_core::model::{ModelConfig, Network, Variant};
use dkn_core::training::{
    generate_scene, load_checkpoint, load_checkpoint_as, save_checkpoint, synthesize_pair, train, TrainConfig,
    TrainSet, Trainer,
};
use dkn_core::Error;

#[test]
fn dataset_train_checkpoint_upsample() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..2 {
        write_scene(dir.path(), &format!("s{seed}"), &generate_scene(seed, 64, 64).unwrap()).unwrap();
    }
    let scenes: Vec<_> = scan_dataset(dir.path()).unwrap().iter().map(|e| load_scene(e).unwrap()).collect();
    assert_eq!(scenes.len(), 2);

    let tc = TrainConfig { iterations: 3, crop: 16, seed: 2, ..TrainConfig::default() };
    let trainer = train(Network::new(ModelConfig::dkn(), 2).unwrap(), &scenes, tc).unwrap();
    assert_eq!(trainer.history.len(), 3);
    let path = dir.path().join("m.dknc");
    save_checkpoint(&trainer.checkpoint(), &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.network.params().bit_eq(trainer.network.params()));
    assert_eq!(loaded.history, trainer.history);
    assert!(matches!(load_checkpoint_as(&path, &ModelConfig::fdkn()), Err(Error::ConfigMismatch(_))));

    let pair = synthesize_pair(&scenes[0], 4).unwrap();
    let lr_path = dir.path().join("lr.pfm");
    write_image(&pair.lr_depth, &lr_path).unwrap();
    let lr = read_image(&lr_path).unwrap();
    let req = UpsampleRequest { lr_depth: &lr, hr_guidance: Some(&pair.guidance), scale: 4 };
    let a = upsample(&trainer.network, &req).unwrap();
    let b = upsample(&loaded.network, &req).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [1, 1, 64, 64]);

    let unguided = UpsampleRequest { hr_guidance: None, ..req };
    assert!(matches!(upsample(&loaded.network, &unguided), Err(Error::GuidanceRequired)));
}

#[test]
fn eval_is_repeatable() {
    let scenes: Vec<_> = (5..7).map(|s| generate_scene(s, 64, 64).unwrap()).collect();
    let net = Network::<f32>::new(ModelConfig::fdkn(), 4).unwrap();
    let a = evaluate(&net, &scenes, 4, Protocol::Scaled255, 2).unwrap();
    let b = evaluate(&net, &scenes, 4, Protocol::Scaled255, 2).unwrap();
    let rm = |r: &dkn_core::metrics::EvalReport| r.images.iter().map(|i| (i.rmse, i.bicubic_rmse)).collect::<Vec<_>>();
    assert_eq!(rm(&a), rm(&b));
    let cm = evaluate(&net, &scenes, 4, Protocol::Centimeters { cm_per_unit: 1000.0 }, 2).unwrap();
    let ratio = cm.average_rmse() / a.average_rmse();
    assert!((ratio - 1000.0 / 255.0).abs() < 1e-9, "{ratio}");
}

/// A DKN fitted to a single scene for 500 iterations drives its training
/// loss below a quarter of the starting value.
#[test]
fn single_scene_overfits() {
    let scene = generate_scene(0, 96, 96).unwrap();
    let set = TrainSet::new(std::slice::from_ref(&scene), 4, Variant::Dkn).unwrap();
    let tc = TrainConfig { iterations: 500, crop: 96, seed: 1, ..TrainConfig::default() };
    let mut t = Trainer::new(Network::new(ModelConfig::dkn(), 1).unwrap(), tc).unwrap();
    t.run(&set, |_| Ok(())).unwrap();
    let first = t.history[0];
    let last = t.history[t.history.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.25 * first, "first {first:.5} last {last:.5}");
}
