use sparse_pose_core::coco::{crop_rect, parse_coco_annotations, prepare_sample};
use sparse_pose_core::synth::synth_dataset;
use sparse_pose_core::training::sample_loss;
use sparse_pose_core::{
    Checkpoint, Gradients, Graph, ImageTensor, Model, ModelConfig, RunConfig, SynthSample, Tensor,
    TrainConfig, Trainer,
};

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 4,
        train_samples: 8,
        val_samples: 4,
        ..TrainConfig::default()
    }
}

fn trainer(seed: u64) -> Trainer {
    Trainer::new(
        Model::new(ModelConfig::toy(), seed).unwrap(),
        small_train(),
        seed,
    )
    .unwrap()
}

fn batch_loss(model: &Model, batch: &[SynthSample], lambda: f64) -> f64 {
    let mut grads = Gradients::for_store(&model.store);
    let total: f64 = batch
        .iter()
        .map(|s| sample_loss(model, s, lambda, &mut grads).unwrap().total)
        .sum();
    total / batch.len() as f64
}

#[test]
fn resumed_trainer_reproduces_the_next_step() {
    let cfg = ModelConfig::toy();
    let data = synth_dataset(500, 8, &cfg).unwrap();
    let val = synth_dataset(600, 4, &cfg).unwrap();
    let mut a = trainer(17);
    a.run_epoch(&data, &val).unwrap();

    let run = RunConfig {
        model: cfg.clone(),
        seed: 17,
        train: small_train(),
        ..RunConfig::default()
    };
    let bytes = Checkpoint::from_trainer(&a, &run).encode();
    let restored = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(restored.encode(), bytes);
    let (_, mut b) = restored.to_trainer().unwrap();
    assert_eq!(b.epoch, 1);

    let batch: Vec<&SynthSample> = data.iter().take(4).collect();
    let ra = a.step(&batch, 0.03, 1e-3).unwrap();
    let rb = b.step(&batch, 0.03, 1e-3).unwrap();
    assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    let la = a.run_epoch(&data, &val).unwrap();
    let lb = b.run_epoch(&data, &val).unwrap();
    assert_eq!(la.l_heatmap.to_bits(), lb.l_heatmap.to_bits());
    assert_eq!(la.eval_error.to_bits(), lb.eval_error.to_bits());
    for ((_, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
}

#[test]
fn quality_head_is_frozen_while_lambda_is_zero() {
    let cfg = ModelConfig::toy();
    let data = synth_dataset(700, 4, &cfg).unwrap();
    let mut t = trainer(5);
    let ids = t.model.quality.param_ids();
    let before: Vec<Tensor> = ids
        .iter()
        .map(|&id| t.model.store.get(id).clone())
        .collect();

    let mut grads = Gradients::for_store(&t.model.store);
    sample_loss(&t.model, &data[0], 0.0, &mut grads).unwrap();
    for &id in &ids {
        assert!(grads.get(id).data().iter().all(|&v| v == 0.0));
    }

    let batch: Vec<&SynthSample> = data.iter().collect();
    t.step(&batch, 0.0, 1e-3).unwrap();
    for (&id, old) in ids.iter().zip(&before) {
        assert_eq!(t.model.store.get(id), old);
    }
    // and they do move once the quality term is on
    t.step(&batch, 0.03, 1e-3).unwrap();
    assert!(ids
        .iter()
        .zip(&before)
        .any(|(&id, old)| t.model.store.get(id) != old));
}

#[test]
fn loss_report_adds_up() {
    let cfg = ModelConfig::toy();
    let data = synth_dataset(800, 3, &cfg).unwrap();
    let model = Model::new(cfg, 2).unwrap();
    for s in &data {
        let mut grads = Gradients::for_store(&model.store);
        let r = sample_loss(&model, s, 0.03, &mut grads).unwrap();
        assert_eq!(r.total, r.l_heatmap + 0.03 * r.l_qp);
        let r0 = sample_loss(&model, s, 0.0, &mut grads).unwrap();
        assert_eq!(r0.total, r0.l_heatmap);
    }
}

#[test]
fn one_step_lowers_the_batch_loss() {
    let cfg = ModelConfig::toy();
    let batch = synth_dataset(900, 4, &cfg).unwrap();
    let refs: Vec<&SynthSample> = batch.iter().collect();
    let seeds = 20;
    let mut decreased = 0;
    for seed in 0..seeds {
        let mut t = trainer(seed);
        let before = batch_loss(&t.model, &batch, 0.03);
        t.step(&refs, 0.03, 1e-3).unwrap();
        if batch_loss(&t.model, &batch, 0.03) < before {
            decreased += 1;
        }
    }
    assert!(decreased * 100 >= 95 * seeds, "{decreased}/{seeds}");
}

#[test]
fn both_stages_read_the_same_parameters() {
    let cfg = ModelConfig::toy();
    let img = synth_dataset(1000, 1, &cfg).unwrap().remove(0).image;
    let mut model = Model::new(cfg, 9).unwrap();
    let (_, fine_before, _) = model.infer_both(&img).unwrap();
    // nudge a coarse-stage encoder weight and the shared decoder bias
    for name in ["encoder.0.fc2.b", "decoder.b"] {
        let id = model.store.find(name).unwrap_or_else(|| panic!("{name}"));
        let bumped = model.store.get(id).map(|v| v + 0.05);
        model.store.set(id, bumped).unwrap();
    }
    let (_, fine_after, _) = model.infer_both(&img).unwrap();
    assert_ne!(fine_before.maps, fine_after.maps);
}

#[test]
fn zero_quality_head_predicts_one_half() {
    let cfg = ModelConfig::toy();
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    for id in [model.quality.fc2_w, model.quality.fc2_b] {
        let zero = Tensor::zeros(model.store.get(id).shape());
        model.store.set(id, zero).unwrap();
    }
    let img = ImageTensor::filled(cfg.height, cfg.width, 3, 0.3);
    let mut g = Graph::new(&model.store);
    let pass = model.coarse_pass(&mut g, &img, false).unwrap();
    assert_eq!(g.value(pass.quality).item(), 0.5);
}

const MINIMAL_COCO: &str = r#"{
  "images": [{"id": 7, "file_name": "000000000007.jpg", "width": 640, "height": 480}],
  "annotations": [
    {"id": 1, "image_id": 7, "category_id": 1, "iscrowd": 0, "area": 5000.0,
     "bbox": [100.0, 50.0, 60.0, 160.0],
     "keypoints": [130,60,2, 0,0,0, 125,58,1, 0,0,0, 0,0,0, 115,90,2, 145,90,2, 110,120,2, 150,120,2,
                   105,150,2, 155,150,2, 120,150,2, 140,150,2, 118,185,2, 142,185,2, 117,205,1, 143,205,2]},
    {"id": 2, "image_id": 7, "category_id": 1, "iscrowd": 1, "area": 1.0,
     "bbox": [0, 0, 1, 1], "keypoints": []}
  ]
}"#;

#[test]
fn minimal_coco_file_gives_one_instance() {
    let instances = parse_coco_annotations(MINIMAL_COCO).unwrap();
    assert_eq!(instances.len(), 1);
    let inst = &instances[0];
    assert_eq!(inst.file_name, "000000000007.jpg");
    assert_eq!(inst.keypoints.len(), 17);
    assert_eq!(inst.keypoints[1].v, 0);
    assert!(!inst.keypoints[1].labeled());
    assert_eq!(inst.keypoints[2].v, 1);

    assert!(parse_coco_annotations("{ not json").is_err());
    let missing = MINIMAL_COCO.replacen("\"keypoints\": [130", "\"kp\": [130", 1);
    assert!(parse_coco_annotations(&missing).is_err());
}

#[test]
fn coco_crop_follows_the_input_aspect() {
    let cfg = ModelConfig::toy();
    let inst = parse_coco_annotations(MINIMAL_COCO).unwrap().remove(0);
    let rect = crop_rect(inst.bbox, 0.75);
    // tall box: height fixed, width widened to 3:4, then 1.25× padding about the center
    assert!((rect.h - 200.0).abs() < 1e-12 && (rect.w - 150.0).abs() < 1e-12);
    assert!((rect.x - (130.0 - 75.0)).abs() < 1e-12 && (rect.y - (130.0 - 100.0)).abs() < 1e-12);

    let img = ImageTensor::filled(480, 640, 1, 0.5);
    let s = prepare_sample(&inst, &img, &cfg).unwrap();
    assert_eq!(
        (s.image.height, s.image.width, s.image.channels),
        (64, 48, 3)
    );
    let k = s.keypoints[0];
    assert!((k.x - ((130.0 - rect.x + 0.5) * 48.0 / 150.0 - 0.5)).abs() < 1e-12);
    assert!((k.y - ((60.0 - rect.y + 0.5) * 64.0 / 200.0 - 0.5)).abs() < 1e-12);
    assert_eq!(s.keypoints[1].v, 0);
}
