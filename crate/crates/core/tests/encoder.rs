mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use partsmine::encoder::{
    load_checkpoint, predict, save_checkpoint, train, Aggregation, EncoderConfig, LossConfig, OptimConfig, PatchSequence, SequenceDataset,
    StackedLstm,
};
use partsmine::feature::FeatureVec;
use partsmine::rng::stream;

use common::{gradient_check, reference_forward};

fn seq_from(values: &[f64], steps: usize, dim: usize) -> PatchSequence {
    PatchSequence::new(values.chunks(dim).take(steps).map(|c| FeatureVec::new(c.to_vec()).unwrap()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_match_finite_differences(
        input in 1usize..4,
        hidden in 1usize..4,
        classes in 2usize..4,
        steps in 1usize..4,
        seed in any::<u64>(),
        label_pick in any::<u32>(),
    ) {
        let mut rng = stream(seed, "grad");
        let mut net = StackedLstm::zeros(input, hidden, classes);
        for buf in net.buffers_mut() {
            buf.iter_mut().for_each(|x| *x = 0.5 * rng.sample::<f64, _>(StandardNormal));
        }
        let values: Vec<f64> = (0..steps * input).map(|_| rng.sample(StandardNormal)).collect();
        let seq = seq_from(&values, steps, input);
        let label = label_pick % classes as u32;
        for cfg in [LossConfig::Multi, LossConfig::Single] {
            let err = gradient_check(&net, &seq, label, &cfg, 1e-4);
            prop_assert!(err < 1e-4, "{cfg:?}: {err:e}");
        }
    }

    #[test]
    fn forward_matches_reference(input in 1usize..6, hidden in 1usize..6, steps in 1usize..6, seed in any::<u64>()) {
        let mut rng = stream(seed, "forward");
        let net = StackedLstm::init(input, hidden, 3, &mut rng).unwrap();
        let values: Vec<f64> = (0..steps * input).map(|_| rng.sample(StandardNormal)).collect();
        let seq = seq_from(&values, steps, input);
        let got = net.forward(&seq).unwrap();
        let want = reference_forward(&net, &seq);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
    }
}

/// Class decided by the sign of the first feature at step 2; the whole-image
/// step carries no signal.
fn toy(n: usize, seed: u64) -> SequenceDataset {
    let mut rng = stream(seed, "toy");
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u32;
        let steps = (0..3)
            .map(|t| {
                let mut v: Vec<f64> = (0..4).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                if t == 2 {
                    v[0] += if label == 1 { 1.5 } else { -1.5 };
                }
                FeatureVec::new(v).unwrap()
            })
            .collect();
        items.push(PatchSequence::new(steps).unwrap());
        labels.push(label);
    }
    SequenceDataset::new(2, items, labels).unwrap()
}

#[test]
fn trained_network_survives_a_checkpoint() {
    let data = toy(64, 1);
    let cfg = EncoderConfig {
        hidden: 8,
        optim: OptimConfig {
            lr: 0.05,
            epochs: 15,
            batch_size: 4,
            step_epochs: 10,
            ..OptimConfig::default()
        },
        ..EncoderConfig::default()
    };
    let (net, report) = train(&data, None, &cfg, 3).unwrap();
    assert!(report.last().unwrap().train_accuracy >= 0.95, "{:?}", report.last());

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &net, &cfg, 3).unwrap();
    let (back, manifest) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!((back.input_dim(), back.hidden(), back.classes), (4, 8, 2));
    let held_out = toy(32, 2);
    for seq in &held_out.items {
        let a = predict(seq, &net, Aggregation::WholeImage).unwrap();
        let b = predict(seq, &back, Aggregation::WholeImage).unwrap();
        assert_eq!(a.label, b.label);
        // parameters are stored as f32
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}

#[test]
fn single_loss_ignores_patch_steps_in_the_gradient() {
    let data = toy(8, 4);
    let mut rng = stream(4, "net");
    let net = StackedLstm::init(4, 5, 2, &mut rng).unwrap();
    let single = net.backward(&data.items[0], data.labels[0], &LossConfig::Single).unwrap();
    let weighted = net
        .backward(&data.items[0], data.labels[0], &LossConfig::Weighted { gamma: vec![0.0, 0.0] })
        .unwrap();
    assert_eq!(single.loss, weighted.loss);
    assert_eq!(single.grads, weighted.grads);
}
