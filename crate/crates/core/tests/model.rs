mod common;

use airid::autograd::{Checkpoint, Tape, Tensor};
use airid::losses::semantic_consistency_loss;
use airid::model::{Bind, Mode, Model, ModelConfig, CLASSIFIER, GENERATOR};
use proptest::prelude::*;
use rand::Rng;

fn small() -> ModelConfig {
    ModelConfig {
        attribute_size: 6,
        image_len: 12,
        embedding_size: 5,
        num_train_ids: 4,
        generator_hidden: vec![8],
        image_hidden: vec![9, 7],
        discriminator_hidden: vec![6, 3],
        ..ModelConfig::default()
    }
}

fn binary_rows(seed: u64, n: usize, d: usize) -> Tensor<f64> {
    let mut rng = common::rng(seed);
    let data: Vec<f64> = (0..n * d)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_f64(&[n, d], &data).unwrap()
}

#[test]
fn eval_output_survives_checkpoint_file_round_trip() {
    let cfg = ModelConfig {
        embedding_size: 16,
        ..ModelConfig::default()
    };
    let mut model: Model<f32> = Model::new(cfg, 21).unwrap();
    // Move the running statistics off their initial values first.
    let attrs = binary_rows(1, 8, 14);
    let attrs32 = Tensor::<f32>::from_f64(attrs.shape(), &attrs.to_f64_vec()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(attrs32.clone()).unwrap();
    model
        .forward_generator(&mut tape, x, Mode::Train, Bind::Trainable)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.airc");
    model.to_checkpoint().save(&path).unwrap();
    let loaded = Model::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();

    let a = model.embed_attributes(attrs32.clone()).unwrap();
    let b = loaded.embed_attributes(attrs32).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(model.store().entries(), loaded.store().entries());
    assert_eq!(
        std::fs::read(&path).unwrap(),
        loaded.to_checkpoint().to_bytes().unwrap()
    );
}

#[test]
fn train_and_eval_batchnorm_agree_once_running_stats_match() {
    let mut model: Model<f64> = Model::new(small(), 4).unwrap();
    let x = binary_rows(2, 10, 6);

    let train = |model: &mut Model<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let y = model
            .forward_generator(&mut tape, v, Mode::TrainFrozenStats, Bind::Frozen)
            .unwrap();
        tape.value(y).to_f64_vec()
    };
    let before = train(&mut model);
    let eval = model.embed_attributes(x.clone()).unwrap().to_f64_vec();
    assert!(before.iter().zip(&eval).any(|(a, b)| (a - b).abs() > 1e-3));

    // Pre-batchnorm activations of the single hidden block, recomputed by hand.
    let store = model.store();
    let w = store
        .get(store.lookup("generator.fc0.weight").unwrap())
        .to_f64_vec();
    let b = store
        .get(store.lookup("generator.fc0.bias").unwrap())
        .to_f64_vec();
    let (n, din, h) = (10, 6, 8);
    let xs = x.to_f64_vec();
    let mut z = vec![0.0; n * h];
    for i in 0..n {
        for j in 0..h {
            z[i * h + j] = b[j]
                + (0..din)
                    .map(|k| xs[i * din + k] * w[k * h + j])
                    .sum::<f64>();
        }
    }
    let mean: Vec<f64> = (0..h)
        .map(|j| (0..n).map(|i| z[i * h + j]).sum::<f64>() / n as f64)
        .collect();
    let var: Vec<f64> = (0..h)
        .map(|j| {
            (0..n)
                .map(|i| (z[i * h + j] - mean[j]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    model
        .store_mut()
        .load_value("generator.bn0.running_mean", &[h], mean)
        .unwrap();
    model
        .store_mut()
        .load_value("generator.bn0.running_var", &[h], var)
        .unwrap();

    let eval = model.embed_attributes(x.clone()).unwrap().to_f64_vec();
    let after = train(&mut model);
    assert_eq!(before, after);
    for (a, b) in after.iter().zip(&eval) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn consistency_step_moves_image_logits() {
    let mut model: Model<f64> = Model::new(small(), 5).unwrap();
    let images = Tensor::from_f64(
        &[3, 12],
        &(0..36).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
    )
    .unwrap();
    let image_logits = |m: &Model<f64>| {
        let c = m.embed_images(images.clone()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(c).unwrap();
        let l = m.forward_classifier(&mut tape, v, Bind::Frozen).unwrap();
        tape.value(l).to_f64_vec()
    };
    let before = image_logits(&model);

    let mut tape = Tape::new();
    let a = tape.constant(binary_rows(3, 4, 6)).unwrap();
    let ca = model
        .forward_generator(&mut tape, a, Mode::Train, Bind::Trainable)
        .unwrap();
    let logits = model
        .forward_classifier(&mut tape, ca, Bind::Trainable)
        .unwrap();
    let l_sc = semantic_consistency_loss(&mut tape, logits, &[0, 1, 2, 3]).unwrap();
    let grads = tape.backward(l_sc).unwrap();

    let mut touched_classifier = false;
    for id in model.params(CLASSIFIER) {
        let g = grads.param(id).expect("classifier gets an l_sc gradient");
        touched_classifier |= g.data().iter().any(|&v| v != 0.0);
        let p = model.store_mut().get_mut(id);
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= 0.1 * d;
        }
    }
    assert!(touched_classifier);
    assert!(model.params(GENERATOR).iter().any(|&id| grads
        .param(id)
        .is_some_and(|g| g.data().iter().any(|&v| v != 0.0))));
    let after = image_logits(&model);
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}

#[test]
fn head_shapes_and_ranges() {
    let mut model: Model<f64> = Model::new(small(), 6).unwrap();
    let mut tape = Tape::new();
    let mut rng = common::rng(7);
    let imgs = tape
        .constant(common::random_tensor(&mut rng, &[5, 12], 0.0, 1.0))
        .unwrap();
    let ci = model
        .forward_image(&mut tape, imgs, Mode::Train, Bind::Trainable)
        .unwrap();
    assert_eq!(tape.shape(ci), &[5, 5]);
    assert!(tape.value(ci).data().iter().all(|v| v.is_finite()));
    let p = model
        .forward_discriminator(&mut tape, ci, Mode::Train, Bind::Trainable)
        .unwrap();
    assert_eq!(tape.shape(p), &[5, 1]);
    assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let logits = model
        .forward_classifier(&mut tape, ci, Bind::Trainable)
        .unwrap();
    assert_eq!(tape.shape(logits), &[5, 4]);
}

#[test]
fn image_concepts_are_not_squashed() {
    let mut model: Model<f64> = Model::new(small(), 8).unwrap();
    let mut tape = Tape::new();
    let imgs = tape
        .constant(Tensor::from_f64(&[2, 12], &[0.0, 1.0].repeat(12)).unwrap())
        .unwrap();
    for id in model.params("image.head.bias") {
        model.store_mut().get_mut(id).data_mut().fill(3.0);
    }
    let ci = model
        .forward_image(&mut tape, imgs, Mode::Eval, Bind::Frozen)
        .unwrap();
    assert!(tape.value(ci).data().iter().any(|v| v.abs() > 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_output_is_inside_tanh_range(seed in any::<u64>(), n in 2usize..9) {
        let mut model: Model<f64> = Model::new(small(), seed).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(binary_rows(seed, n, 6)).unwrap();
        let y = model.forward_generator(&mut tape, x, Mode::Train, Bind::Trainable).unwrap();
        prop_assert_eq!(tape.shape(y), &[n, 5]);
        prop_assert!(tape.value(y).data().iter().all(|v| v.abs() < 1.0));
    }
}
