use super::*;
use crate::models::PromptableConfig;
use crate::synth::{generate_dataset, DatasetSpec, MANIFEST_FILE};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: ExperimentConfig,
}

fn fixture(epochs: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    generate_dataset(&DatasetSpec::new(42, 10, 48, 48), &root.join("data")).unwrap();
    let ckpt = root.join("base.ckpt");
    Segmenter::foundation(PromptableConfig { embed_dim: 8 }, 16, 5)
        .unwrap()
        .save(&ckpt)
        .unwrap();
    let mut config = ExperimentConfig::new(root.join("data").join(MANIFEST_FILE), root.join("out"));
    config.foundation_checkpoint = ckpt.to_string_lossy().into_owned();
    config.cell_size = 24;
    config.train = TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    config.unet = UnetConfig {
        depth: 2,
        base_width: 4,
    };
    config.unet_train = TrainConfig {
        epochs,
        batch_size: 16,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    Fixture {
        _dir: dir,
        root,
        config,
    }
}

#[test]
fn zero_shot_writes_three_evaluations_and_a_comparison() {
    let f = fixture(1);
    let record = run_experiment(ExperimentKind::ZeroShot, &f.config).unwrap();
    assert_eq!(record.train_modalities, vec![ModalityName::Argon]);
    assert_eq!(record.eval_modalities.len(), 3);
    let eval = f.config.out_dir.join(EVAL_DIR);
    let mut csvs: Vec<String> = fs::read_dir(&eval)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(
        csvs,
        ["comparison.csv", "fc72.csv", "nitrogen.csv", "water.csv"]
    );
    assert_eq!(
        read_comparison_csv(&eval.join(COMPARISON_FILE))
            .unwrap()
            .len(),
        6
    );
    assert!(f
        .config
        .out_dir
        .join(REPORTS_DIR)
        .join(TABLE_FILE)
        .is_file());
    assert!(!f.config.out_dir.join(LOCK_FILE).exists());

    let reloaded = RunRecord::load(&f.config.out_dir.join(RUN_RECORD_FILE)).unwrap();
    assert_eq!(reloaded, record);
    let tuned = &record.models[1];
    assert_eq!(tuned.epochs.len(), 1);
    assert_eq!(tuned.frozen_digest, record.models[0].frozen_digest);
    let saved = Segmenter::load(tuned.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(saved.weights_digest(), tuned.weights_digest);
}

#[test]
fn untrained_multi_modality_matches_the_base_model() {
    let f = fixture(0);
    let record = run_experiment(ExperimentKind::MultiModality, &f.config).unwrap();
    assert_eq!(record.eval_modalities.len(), 4);
    for pair in record.results.chunks(2) {
        assert_eq!(
            (pair[0].model.as_str(), pair[1].model.as_str()),
            (MODEL_BASE, MODEL_TUNED)
        );
        assert_eq!((pair[0].iou, pair[0].f1), (pair[1].iou, pair[1].f1));
    }
}

#[test]
fn unet_comparison_has_three_models_per_fluid() {
    let f = fixture(1);
    let record = run_experiment(ExperimentKind::UnetComparison, &f.config).unwrap();
    assert_eq!(record.results.len(), 12);
    assert_eq!(record.models[0].backend, Backend::Unet);
    let table = fs::read_to_string(f.config.out_dir.join(REPORTS_DIR).join(TABLE_FILE)).unwrap();
    for label in [
        "U-Net",
        "Base",
        "Fine-tuned",
        "Water",
        "FC-72",
        "Nitrogen",
        "Argon",
    ] {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }
    let plot =
        fs::read_to_string(f.config.out_dir.join(REPORTS_DIR).join("boxplot_iou.svg")).unwrap();
    assert_eq!(plot.matches("<rect x=").count(), 12);
}

#[test]
fn missing_checkpoint_fails_before_any_output() {
    let mut f = fixture(1);
    f.config.foundation_checkpoint = f.root.join("absent.ckpt").to_string_lossy().into_owned();
    match run_experiment(ExperimentKind::ZeroShot, &f.config) {
        Err(Error::Config(msg)) => assert!(msg.contains("foundation"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(!f.config.out_dir.exists());

    f.config.foundation_checkpoint = fixture(0).config.foundation_checkpoint;
    f.config.unet_checkpoint = Some("no/such-unet".into());
    assert!(matches!(
        plan(ExperimentKind::UnetComparison, &f.config),
        Err(Error::Config(_))
    ));
}

#[test]
fn locked_output_is_refused() {
    let f = fixture(0);
    let _held = OutputLock::acquire(&f.config.out_dir).unwrap();
    assert!(matches!(
        run_experiment(ExperimentKind::MultiModality, &f.config),
        Err(Error::Locked { .. })
    ));
}

#[test]
fn plan_describes_without_writing() {
    let f = fixture(2);
    let p = plan(ExperimentKind::ZeroShot, &f.config).unwrap();
    assert_eq!(
        p.eval_modalities,
        vec![
            ModalityName::Nitrogen,
            ModalityName::FC72,
            ModalityName::Water
        ]
    );
    let text = p.to_string();
    assert!(text.contains("Fine-tuned: train"));
    assert!(!f.config.out_dir.exists());
}

#[test]
fn experiment_names_parse() {
    for k in ExperimentKind::ALL {
        assert_eq!(k.as_str().parse::<ExperimentKind>().unwrap(), k);
    }
    assert_eq!(
        "unet-comparison".parse::<ExperimentKind>().unwrap(),
        ExperimentKind::UnetComparison
    );
    assert!("other".parse::<ExperimentKind>().is_err());
}
