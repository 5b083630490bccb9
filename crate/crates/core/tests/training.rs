use causal_vqa::data::{prepare, PreparedData};
use causal_vqa::synthetic::{generate_synthetic, SyntheticTaskSpec, SPLIT_TRAIN};
use causal_vqa::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use causal_vqa::train::{TrainConfig, Trainer};

fn two_class(seed: u64) -> PreparedData {
    let spec = SyntheticTaskSpec {
        num_samples: 32,
        answer_space: 2,
        bias_strength: 0.0,
        noise: 0.0,
        feature_dims: (12, 10),
        clip_shape: (2, 2),
        seed,
        ..Default::default()
    };
    let (m, r) = generate_synthetic(&spec).unwrap();
    prepare(&m, &r, None, SPLIT_TRAIN).unwrap()
}

fn small() -> TrainConfig {
    TrainConfig {
        dim: 16,
        heads: 2,
        layers: 1,
        codebook_k: 4,
        batch_size: 4,
        ..TrainConfig::toy()
    }
}

#[test]
fn loss_falls_on_a_separable_task() {
    let data = two_class(3);
    let config = TrainConfig { epochs: 10, ..small() };
    let mut t = Trainer::new(&config, &data).unwrap();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        losses.push(t.run_epoch().unwrap().loss);
    }
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn optimizer_state_survives_encoding() {
    let data = two_class(5);
    let config = TrainConfig { epochs: 3, ..small() };
    let mut t = Trainer::new(&config, &data).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let ck = t.checkpoint();
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back.adam, ck.adam);
    assert_eq!(back.adam.lr.to_bits(), ck.adam.lr.to_bits());
    assert!(back.adam.step > 0);
    assert_eq!(back.plateau, ck.plateau);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.sampler, ck.sampler);
    assert_eq!(back.trace, ck.trace);
    assert_eq!(back.params, ck.params);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let data = two_class(7);
    let config = TrainConfig { epochs: 4, dropout: 0.1, ..small() };

    let mut straight = Trainer::new(&config, &data).unwrap();
    for _ in 0..4 {
        straight.run_epoch().unwrap();
    }

    let mut first = Trainer::new(&config, &data).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(decode_checkpoint(&bytes).unwrap(), &config, &data).unwrap();
    resumed.run_epoch().unwrap();
    resumed.run_epoch().unwrap();

    let bits = |t: &Trainer| t.state.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&straight), bits(&resumed));
    assert_eq!(straight.checkpoint().params, resumed.checkpoint().params);
}
