use lau_core::config::ExperimentConfig;
use lau_core::net::{LauNet, LossKind};
use lau_core::train::{evaluate, read_checkpoint, train, write_checkpoint};
use lau_core::Rng;

fn tiny(loss: LossKind) -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        train_count: 8,
        val_count: 4,
        epochs: 3,
        batch: 4,
        c_prime: 4,
        decoder_channels: 6,
        lr: 0.01,
        loss,
        ..Default::default()
    }
}

#[test]
fn every_loss_trains_to_finite_metrics() {
    for loss in [LossKind::Ce, LossKind::Off, LossKind::Reg] {
        let cfg = tiny(loss);
        let (tr, va) = cfg.datasets().unwrap();
        let out = train(&cfg.train_config(), &tr, &va).unwrap();
        assert_eq!(out.metrics.len(), 2 * cfg.epochs);
        for m in &out.metrics {
            assert!(m.loss.is_finite() && m.loss > 0.0, "{loss:?}: {m:?}");
            assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.pixacc));
        }
        // Offsets start at zero and must have moved for the LaU losses.
        let p = out.net.predictor.as_ref().unwrap();
        assert!(p.expand.weights.iter().any(|w| *w != 0.0), "{loss:?}");
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let cfg = tiny(LossKind::Off);
    let (tr, va) = cfg.datasets().unwrap();
    let out = train(&cfg.train_config(), &tr, &va).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&out.net, &mut bytes).unwrap();

    let mut fresh = LauNet::new(cfg.net_config(), &mut Rng::new(99)).unwrap();
    read_checkpoint(&mut fresh, &mut bytes.as_slice()).unwrap();
    assert_eq!(fresh.flat_params(), out.net.flat_params());
    let x = &va[0].features;
    assert_eq!(fresh.predict(x).unwrap(), out.net.predict(x).unwrap());
    let last = out.final_val().unwrap();
    assert_eq!(&evaluate(&fresh, &va, cfg.batch, last.epoch).unwrap(), last);
}

#[test]
fn checkpoint_rejects_other_architectures() {
    let cfg = tiny(LossKind::Off);
    let net = LauNet::new(cfg.net_config(), &mut Rng::new(1)).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&net, &mut bytes).unwrap();
    let other = ExperimentConfig { c_prime: 8, ..cfg };
    let mut wrong = LauNet::new(other.net_config(), &mut Rng::new(1)).unwrap();
    assert!(read_checkpoint(&mut wrong, &mut bytes.as_slice()).is_err());
    assert!(read_checkpoint(&mut wrong, &mut &b"garbage\n"[..]).is_err());
}
