use std::fs;
use std::path::Path;

use focusad::backbone::StubBackbone;
use focusad::dataset::{categories, load_dataset, Layout, Split};
use focusad::error::Error;
use focusad::eval::{evaluate_few_shot, evaluate_zero_shot, EvalMode, FewShotPlan, MetricsReport};
use focusad::fewshot::{BankSource, FusionConfig};
use focusad::imageio::Mask;
use focusad::losses::LossConfig;
use focusad::model::ModelConfig;
use focusad::synthetic::{generate, write_flat_layout, SyntheticConfig, SyntheticSample};
use focusad::trainer::{train, Checkpoint, TrainConfig};

fn samples(count: usize) -> Vec<SyntheticSample> {
    generate(&SyntheticConfig { count, ..Default::default() })
}

fn save(s: &SyntheticSample, image: &Path, mask: Option<&Path>) {
    fs::create_dir_all(image.parent().unwrap()).unwrap();
    s.image.to_rgb8().save(image).unwrap();
    if let Some(m) = mask {
        fs::create_dir_all(m.parent().unwrap()).unwrap();
        s.mask.to_luma8().save(m).unwrap();
    }
}

fn quick_checkpoint(backbone: &StubBackbone) -> Checkpoint {
    let data: Vec<_> = samples(8).iter().map(|s| s.to_training()).collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 1,
        image_size: 32,
        ..Default::default()
    };
    train(backbone, &data, &ModelConfig::default(), &cfg, &LossConfig::default(), "fixture")
        .unwrap()
        .checkpoint
}

#[test]
fn flat_fixture_of_six_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(6);
    write_flat_layout(dir.path(), "tiles", &data).unwrap();
    let found = load_dataset(dir.path(), Layout::FlatSynthetic).unwrap();
    assert_eq!(found.len(), 6);
    assert_eq!(categories(&found), vec!["tiles".to_string()]);
    assert_eq!(found.iter().filter(|s| s.label).count(), data.iter().filter(|s| s.is_anomalous()).count());
    for s in &found {
        assert_eq!(s.mask.is_some(), s.label);
        let (img, mask) = s.load(32, 32).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
        assert_eq!(mask.positive_count() > 0, s.label);
    }
}

#[test]
fn mvtec_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = samples(8);
    let normals: Vec<_> = data.iter().filter(|s| !s.is_anomalous()).collect();
    let defects: Vec<_> = data.iter().filter(|s| s.is_anomalous()).collect();
    save(normals[0], &root.join("bottle/train/good/000.png"), None);
    save(normals[1], &root.join("bottle/train/good/001.png"), None);
    save(normals[2], &root.join("bottle/test/good/000.png"), None);
    save(defects[0], &root.join("bottle/test/crack/000.png"), Some(&root.join("bottle/ground_truth/crack/000_mask.png")));
    save(defects[1], &root.join("bottle/test/crack/001.png"), Some(&root.join("bottle/ground_truth/crack/001_mask.png")));
    save(normals[3], &root.join("cable/test/good/000.png"), None);
    save(defects[2], &root.join("cable/test/cut/000.png"), Some(&root.join("cable/ground_truth/cut/000_mask.png")));

    let found = load_dataset(root, Layout::Mvtec).unwrap();
    assert_eq!(found.len(), 7);
    assert_eq!(categories(&found), vec!["bottle".to_string(), "cable".to_string()]);
    assert_eq!(found.iter().filter(|s| s.split == Split::Train).count(), 2);
    assert_eq!(found.iter().filter(|s| s.label).count(), 3);
    assert!(found.iter().filter(|s| s.label).all(|s| s.mask.as_ref().unwrap().exists()));

    fs::remove_file(root.join("cable/ground_truth/cut/000_mask.png")).unwrap();
    let err = load_dataset(root, Layout::Mvtec).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("000_mask.png"), "{err}");
}

#[test]
fn visa_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = samples(4);
    let normal = data.iter().find(|s| !s.is_anomalous()).unwrap();
    let defect = data.iter().find(|s| s.is_anomalous()).unwrap();
    save(normal, &root.join("candle/Data/Images/Normal/0000.png"), None);
    save(normal, &root.join("candle/Data/Images/Normal/0001.png"), None);
    save(defect, &root.join("candle/Data/Images/Anomaly/0000.png"), Some(&root.join("candle/Data/Masks/Anomaly/0000.png")));
    fs::create_dir_all(root.join("split_csv")).unwrap();
    fs::write(
        root.join("split_csv/1cls.csv"),
        "object,split,label,image,mask\n\
         candle,train,normal,candle/Data/Images/Normal/0000.png,\n\
         candle,test,normal,candle/Data/Images/Normal/0001.png,\n\
         candle,test,anomaly,candle/Data/Images/Anomaly/0000.png,candle/Data/Masks/Anomaly/0000.png\n",
    )
    .unwrap();
    let found = load_dataset(root, Layout::VisaCsv).unwrap();
    assert_eq!(found.len(), 3);
    assert_eq!(found.iter().map(|s| s.label).filter(|&l| l).count(), 1);
    assert_eq!(found.iter().filter(|s| s.split == Split::Train).count(), 1);
}

#[test]
fn corrupt_mask_size_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(4);
    write_flat_layout(dir.path(), "tiles", &data).unwrap();
    let victim = data.iter().find(|s| s.is_anomalous()).unwrap();
    let path = dir.path().join("tiles/mask").join(format!("{}.png", victim.name));
    Mask::zeros(20, 24).to_luma8().save(&path).unwrap();
    let err = load_dataset(dir.path(), Layout::FlatSynthetic).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let msg = err.to_string();
    assert!(msg.contains(&victim.name), "{msg}");
}

#[test]
fn missing_root_is_a_config_error() {
    assert!(matches!(
        load_dataset(Path::new("/nonexistent/focusad"), Layout::Mvtec),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluation_on_disk_and_report_round_trip() {
    let backbone = StubBackbone::new(0);
    let ckpt = quick_checkpoint(&backbone);
    let dir = tempfile::tempdir().unwrap();
    let data = samples(12);
    write_flat_layout(dir.path(), "tiles", &data).unwrap();
    let found = load_dataset(dir.path(), Layout::FlatSynthetic).unwrap();

    let zero = evaluate_zero_shot(&backbone, &ckpt, found.as_slice(), 0.3, "abc").unwrap();
    assert_eq!(zero.mode, EvalMode::ZeroShot);
    assert_eq!(zero.categories.len(), 1);
    assert_eq!(zero.categories[0].samples, 12);
    let m = zero.mean;
    for v in [m.i_auroc, m.i_ap, m.p_auroc, m.p_pro] {
        assert!((0.0..=100.0).contains(&v));
    }

    let path = dir.path().join("report.json");
    zero.save(&path).unwrap();
    assert_eq!(MetricsReport::load(&path).unwrap(), zero);
    assert!(zero.table().contains("tiles"));

    let plan = FewShotPlan {
        shots: 2,
        seeds: vec![0, 1],
        fusion: FusionConfig::default(),
        source: BankSource::Aggregated,
    };
    let few = evaluate_few_shot(&backbone, &ckpt, found.as_slice(), &plan, 0.3, "abc").unwrap();
    assert_eq!(few.mode, EvalMode::FewShot);
    assert_eq!(few.shot_seeds, vec![0, 1]);
    assert!(few.std.is_some());
    assert_eq!(MetricsReport::from_json(&few.to_json().unwrap()).unwrap(), few);

    let none = FewShotPlan { shots: 0, ..plan };
    assert_eq!(
        evaluate_few_shot(&backbone, &ckpt, found.as_slice(), &none, 0.3, "abc").unwrap(),
        zero
    );
}

#[test]
fn report_rejects_foreign_documents() {
    assert!(MetricsReport::from_json("{\"format\": \"other\", \"version\": 1}").is_err());
}

#[test]
fn evaluation_refuses_a_different_backbone() {
    let ckpt = quick_checkpoint(&StubBackbone::new(0));
    let data = samples(4);
    assert!(matches!(
        evaluate_zero_shot(&StubBackbone::new(7), &ckpt, data.as_slice(), 0.3, "x"),
        Err(Error::Checksum { .. })
    ));
}
