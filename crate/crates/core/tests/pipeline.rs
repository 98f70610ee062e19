mod common;

use camclass::dataset::{
    load_image, read_manifest, rgb_to_tensor, scan_dataset, stratified_split, write_manifest, Normalization, Split,
};
use camclass::evaluator::{confusion_matrix, per_class_metrics};
use camclass::explain::hirescam;
use camclass::model::{load_checkpoint, BlockConfig, HeadConfig, HeadKind, Model, ModelConfig};
use camclass::synth::{generate_shapes, render, Shape};
use camclass::trainer::{
    argmax_rows, predict_set, read_epoch_log, train, train_on_sets, Hyperparams, LabeledSet, TrainOptions,
};
use camclass::{Error, Tape, Tensor};
use common::{rng, REFERENCE_FAMILIES, REFERENCE_TOTALS};

fn small_config(classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        input_channels: 3,
        blocks: vec![BlockConfig::new(4, 3, 1, 1, true), BlockConfig::new(8, 3, 1, 1, true)],
        head: HeadConfig {
            kind: HeadKind::GapAffine,
            num_classes: classes,
        },
        seed,
    }
}

fn shape_set(per_class: usize, size: usize, seed: u64, classes: usize) -> LabeledSet<f32> {
    let mut r = rng(seed);
    let mut set = LabeledSet::default();
    for (label, shape) in Shape::ALL.iter().take(classes).enumerate() {
        for _ in 0..per_class {
            let px = render(*shape, size, &mut r);
            let img = image::RgbImage::from_raw(size as u32, size as u32, px).unwrap();
            set.images.push(rgb_to_tensor(&img, size, Normalization::UnitRange));
            set.labels.push(label);
        }
    }
    set
}

fn model(classes: usize, seed: u64) -> Model<f32> {
    Model::build(small_config(classes, seed)).unwrap()
}

#[test]
fn reference_corpus_split_matches_table() {
    let dir = tempfile::tempdir().unwrap();
    let pixel = image::RgbImage::from_pixel(2, 2, image::Rgb([10, 20, 30]));
    for (family, n, _) in REFERENCE_FAMILIES {
        let d = dir.path().join(family);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..n {
            pixel.save(d.join(format!("{i:04}.png"))).unwrap();
        }
    }
    let index = scan_dataset(dir.path()).unwrap();
    assert_eq!(index.len(), 3556);
    let m = stratified_split(&index, 0);
    let table = m.count_table();
    let mut totals = (0, 0, 0);
    for (row, (family, n, expected)) in table.iter().zip(REFERENCE_FAMILIES) {
        assert_eq!(row.family, family);
        assert_eq!(row.total(), n);
        assert_eq!((row.train, row.val, row.test), expected, "{family}");
        totals = (totals.0 + row.train, totals.1 + row.val, totals.2 + row.test);
    }
    assert_eq!(totals, REFERENCE_TOTALS);

    let path = dir.path().join("manifest.csv");
    write_manifest(&m, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    write_manifest(&stratified_split(&index, 0), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(read_manifest(&path).unwrap(), m);
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let (train_set, val) = (shape_set(3, 16, 1, 4), shape_set(2, 16, 2, 4));
    let mut m = model(4, 3);
    let before: Vec<Vec<f32>> = m.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    let hp = Hyperparams {
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.0,
        ..Default::default()
    };
    let out = train_on_sets(&mut m, &train_set, &val, &hp, &TrainOptions::default()).unwrap();
    for (p, b) in m.params().iter().zip(&before) {
        assert!(p.tensor.data().iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for l in &out.logs[1..] {
        assert_eq!(
            (l.val_loss, l.top1, l.top5),
            (out.logs[0].val_loss, out.logs[0].top1, out.logs[0].top5)
        );
    }
}

#[test]
fn plain_sgd_step_is_minus_lr_times_gradient() {
    let train_set = shape_set(1, 16, 4, 1);
    let mut m = model(3, 5);
    let before = m.clone();
    // recorded gradient of the single-image loss
    let mut tape = Tape::new();
    let ids = before.bind(&mut tape, true);
    let x = tape.constant(Tensor::stack(&[&train_set.images[0]]).unwrap());
    let pass = before.forward(&mut tape, x, &ids, &[]).unwrap();
    let (loss, _) = tape.softmax_cross_entropy(pass.logits, &[0]).unwrap();
    tape.backward(loss).unwrap();

    let lr = 0.05f32;
    let hp = Hyperparams {
        epochs: 1,
        learning_rate: lr as f64,
        momentum: 0.0,
        weight_decay: 0.0,
        ..Default::default()
    };
    train_on_sets(&mut m, &train_set, &train_set, &hp, &TrainOptions::default()).unwrap();
    for ((after, b), id) in m.params().iter().zip(before.params()).zip(&ids) {
        let g = tape.grad(*id).unwrap().unwrap();
        for ((&p1, &p0), &gi) in after.tensor.data().iter().zip(b.tensor.data()).zip(g) {
            assert_eq!(p1, p0 - lr * gi, "{}", after.name);
        }
    }
}

#[test]
fn single_image_is_memorized() {
    let one = shape_set(1, 64, 6, 1);
    let mut m = Model::<f32>::build(ModelConfig::desk_default(4, 7)).unwrap();
    let hp = Hyperparams {
        epochs: 200,
        ..Default::default()
    };
    let out = train_on_sets(&mut m, &one, &one, &hp, &TrainOptions::default()).unwrap();
    let last = out.logs.last().unwrap();
    assert!(last.train_loss < 1e-2, "final train loss {}", last.train_loss);
    assert_eq!(last.top1, 1.0);

    // a confidently classified image gives a non-constant attribution map
    let input = Tensor::stack(&[&one.images[0]]).unwrap();
    let cam = hirescam(&m, &input, 0, m.last_conv_layer()).unwrap();
    assert!(cam.probability > 0.99);
    let mean = cam.raw.iter().sum::<f64>() / cam.raw.len() as f64;
    let var = cam.raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    assert!(var > 0.0);
}

#[test]
fn training_is_reproducible_and_consistent_with_evaluator() {
    let (train_set, val) = (shape_set(4, 16, 8, 3), shape_set(3, 16, 9, 3));
    let hp = Hyperparams {
        epochs: 3,
        batch_size: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = model(3, 10);
        let out = train_on_sets(&mut m, &train_set, &val, &hp, &TrainOptions::default()).unwrap();
        (m, out.logs)
    };
    let (m1, logs1) = run();
    let (m2, logs2) = run();
    assert_eq!(logs1, logs2);
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    // k = 5 with three classes saturates
    assert!(logs1.iter().all(|l| l.top5 == 1.0 && l.top1 <= l.top5));

    let logits = predict_set(&m1, &val, 4).unwrap();
    let cm = confusion_matrix(&val.labels, &argmax_rows(&logits), 3).unwrap();
    let report = per_class_metrics(&cm);
    assert_eq!(logs1.last().unwrap().top1, cm.trace() as f64 / cm.total() as f64);
    assert_eq!(report.accuracy, logs1.last().unwrap().top1);
}

#[test]
fn capture_does_not_change_logits() {
    let set = shape_set(2, 16, 11, 4);
    let m = model(4, 12);
    let batch = Tensor::stack(&set.images.iter().collect::<Vec<_>>()).unwrap();
    let plain = m.predict(&batch, &[]).unwrap();
    let captured = m.predict(&batch, &["conv1", "conv2"]).unwrap();
    assert_eq!(plain.logits.data(), captured.logits.data());
    assert_eq!(captured.records.len(), 2);
    assert_eq!(captured.records[1].activation.shape(), &[8, 8, 4, 4]);
}

#[test]
fn file_pipeline_with_checkpoints_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_shapes(&data, 10, 16, 13).unwrap();
    let m = stratified_split(&scan_dataset(&data).unwrap(), 5);
    let out_dir = dir.path().join("run");
    let opts = TrainOptions {
        out_dir: Some(out_dir.clone()),
    };

    let mut net = model(4, 14).with_labels(m.families()).unwrap();
    let hp = Hyperparams {
        epochs: 2,
        checkpoint_every: 1,
        batch_size: 8,
        ..Default::default()
    };
    let out = train(&mut net, &m, &hp, &opts).unwrap();
    assert_eq!(out.logs.len(), 2);
    assert!(out_dir.join("checkpoints/epoch_0001.ckpt").exists());
    let ckpt = out.final_checkpoint.unwrap();

    let mut resumed = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(resumed.trained_epochs(), 2);
    train(&mut resumed, &m, &hp, &opts).unwrap();
    let log = read_epoch_log(out_dir.join("epochs.csv")).unwrap();
    assert_eq!(log.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);

    // the checkpointed model reproduces in-memory predictions
    let test = LabeledSet::load(&m, Split::Test, resumed.labels(), 16).unwrap();
    let reloaded = load_checkpoint::<f32>(out_dir.join("model.ckpt")).unwrap();
    assert_eq!(
        predict_set(&resumed, &test, 3).unwrap().data(),
        predict_set(&reloaded, &test, 3).unwrap().data()
    );
    let img = load_image::<f32>(&test.paths[0], 16, Normalization::UnitRange).unwrap();
    assert_eq!(img.data(), test.images[0].data());
}

#[test]
fn one_epoch_gives_one_log_row() {
    let (train_set, val) = (shape_set(2, 16, 15, 4), shape_set(1, 16, 16, 4));
    let mut m = model(4, 17);
    let hp = Hyperparams {
        epochs: 1,
        ..Default::default()
    };
    let out = train_on_sets(&mut m, &train_set, &val, &hp, &TrainOptions::default()).unwrap();
    assert_eq!(out.logs.len(), 1);
    assert_eq!(out.logs[0].epoch, 1);
}

#[test]
fn training_errors_are_reported() {
    let set = shape_set(1, 16, 18, 2);
    let empty = LabeledSet::default();
    let mut m = model(2, 19);
    let hp = Hyperparams {
        epochs: 1,
        ..Default::default()
    };
    assert!(matches!(
        train_on_sets(&mut m, &empty, &set, &hp, &TrainOptions::default()),
        Err(Error::Training(_))
    ));
    let n = m.params().len();
    m.params_mut()[n - 1].tensor.data_mut()[0] = f32::NAN;
    match train_on_sets(&mut m, &set, &set, &hp, &TrainOptions::default()) {
        Err(Error::NonFiniteLoss { epoch: 1, batch: 0, .. }) => {}
        other => panic!("expected a non-finite loss abort, got {other:?}"),
    }
}

#[test]
fn manifest_families_must_match_model_labels() {
    let dir = tempfile::tempdir().unwrap();
    generate_shapes(dir.path(), 4, 16, 20).unwrap();
    let m = stratified_split(&scan_dataset(dir.path()).unwrap(), 0);
    let mut net = model(4, 21);
    let hp = Hyperparams {
        epochs: 1,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut net, &m, &hp, &TrainOptions::default()),
        Err(Error::LabelMap(_))
    ));
}
