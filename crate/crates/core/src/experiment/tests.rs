use super::*;

fn tempdir(tag: &str) -> PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "ivgan-exp-{tag}-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn tiny(dir: PathBuf, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusConfig {
            dim: 8,
            latent_dim: 3,
            num_speakers: 15,
            longs_per_speaker: 3,
            segments_per_long: 3,
            bias_rank: 2,
            ..CorpusConfig::default()
        },
        gan: GanConfig {
            noise_dim: 4,
            generator_hidden: vec![16],
            critic_hidden: vec![16],
            batch_size: 16,
            epochs,
            ..GanConfig::default()
        },
        plda: PldaSettings { q: 3, iterations: 5 },
        eval: EvalSettings {
            num_target: 40,
            num_nontarget: 120,
            ..EvalSettings::default()
        },
        output_dir: dir,
        seed: 3,
    }
}

fn quiet(_: &str) {}

#[test]
fn partial_json_fills_defaults() {
    let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 9, "gan": {"epochs": 2}, "eval": {"dcf": {"p_target": 0.05}}}"#).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.gan.epochs, 2);
    assert_eq!(cfg.gan.batch_size, 64);
    assert_eq!(cfg.eval.dcf.c_miss, 10.0);
    assert_eq!(cfg.eval.dcf.p_target, 0.05);
    assert_eq!(cfg.corpus, CorpusConfig::default());
    let empty: ExperimentConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(empty, ExperimentConfig::default());
    assert_eq!(empty.gan.epochs, DEFAULT_EPOCHS);
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 1}"#).is_err());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"gan": {"epoch": 1}}"#).is_err());
}

#[test]
fn resolution_propagates_seed_and_speaker_count() {
    let cfg = ExperimentConfig {
        seed: 42,
        ..ExperimentConfig::default()
    }
    .resolved();
    assert_eq!(cfg.corpus.seed, 42);
    assert_eq!(cfg.gan.seed, 42);
    assert_eq!(cfg.gan.num_speakers, 80);
    let single = cfg.single_g();
    assert_eq!(single.weights.adversarial, 0.0);
    assert_eq!(single.weights.cosine, cfg.gan.weights.cosine);
    assert!(!single.critic_enabled());
}

#[test]
fn invalid_configs_are_config_errors() {
    let base = ExperimentConfig::default();
    let mut bad = Vec::new();
    let mut c = base.clone();
    c.plda.q = 0;
    bad.push(c);
    let mut c = base.clone();
    c.eval.conditions = vec![TrialMode::ShortShort, TrialMode::ShortShort];
    bad.push(c);
    let mut c = base.clone();
    c.eval.conditions.clear();
    bad.push(c);
    let mut c = base.clone();
    c.gan.weights = LossWeights::SINGLE_G;
    bad.push(c);
    let mut c = base.clone();
    c.eval.dcf.p_target = 1.0;
    bad.push(c);
    let mut c = base.clone();
    c.eval.num_target = 0;
    bad.push(c);
    let mut c = base;
    c.eval.fusion_weights = FusionWeights { base: 0.0, other: 0.0 };
    bad.push(c);
    for c in bad {
        let e = c.resolved().validate().unwrap_err();
        assert_eq!(e.kind(), crate::ErrorKind::Config, "{e}");
    }
}

#[test]
fn zero_epochs_reports_baseline_only() {
    let dir = tempdir("zero");
    let report = run_experiment(&tiny(dir.clone(), 0), &mut quiet).unwrap();
    assert_eq!(report.rows.len(), 10);
    for r in &report.rows {
        let baseline = r.system == System::Baseline.label();
        assert_eq!(r.status == RowStatus::Ok, baseline, "{r:?}");
        assert_eq!(r.eer.is_some(), baseline);
        assert_eq!((r.c_miss, r.c_fa, r.p_target), (10.0, 1.0, 0.01));
    }
    let paths = ArtifactPaths::new(&dir);
    assert!(!paths.models(System::DWcgan).generator.exists());
    assert!(paths.scores(System::Baseline, TrialMode::ShortShort).exists());
    let text = String::from_utf8(fs::read(paths.report()).unwrap()).unwrap();
    assert!(text.contains("untrained"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn full_run_is_reproducible_and_resumable() {
    let dir_a = tempdir("a");
    let dir_b = tempdir("b");
    let report = run_experiment(&tiny(dir_a.clone(), 2), &mut quiet).unwrap();
    let labels: Vec<_> = report.rows.iter().map(|r| (r.condition, r.system.as_str())).collect();
    let mut expected = Vec::new();
    for mode in [TrialMode::LongShort, TrialMode::ShortShort] {
        for s in System::ALL {
            expected.push((mode, s.label()));
        }
    }
    assert_eq!(labels, expected);
    assert!(report.rows.iter().all(|r| r.status == RowStatus::Ok && r.eer.is_some() && r.min_dcf.is_some()));
    assert!(report.heldout_cosine(System::Baseline).unwrap() > 0.0);
    assert!(report.heldout_cosine(System::DWcgan).is_ok());
    assert!(report.heldout_cosine(System::SingleGFused).is_err());

    let paths = ArtifactPaths::new(&dir_a);
    let first = fs::read(paths.report()).unwrap();
    assert_eq!(Report::from_csv(&first).unwrap(), report);
    assert_eq!(read_report(&dir_a).unwrap(), report);

    // Resume from the persisted artifacts.
    let model_bytes = fs::read(&paths.models(System::DWcgan).generator).unwrap();
    run_experiment(&tiny(dir_a.clone(), 2), &mut quiet).unwrap();
    assert_eq!(fs::read(paths.report()).unwrap(), first);
    assert_eq!(fs::read(&paths.models(System::DWcgan).generator).unwrap(), model_bytes);

    // From scratch in another directory.
    run_experiment(&tiny(dir_b.clone(), 2), &mut quiet).unwrap();
    assert_eq!(fs::read(ArtifactPaths::new(&dir_b).report()).unwrap(), first);

    for system in [System::SingleG, System::DWcgan] {
        let history = crate::io::history_from_csv(&fs::read(paths.history(system)).unwrap()).unwrap();
        assert_eq!(history.epochs.len(), 2);
    }
    fs::remove_dir_all(dir_a).unwrap();
    fs::remove_dir_all(dir_b).unwrap();
}

#[test]
fn changed_config_refuses_existing_directory() {
    let dir = tempdir("clash");
    run_experiment(&tiny(dir.clone(), 0), &mut quiet).unwrap();
    let mut other = tiny(dir.clone(), 0);
    other.seed = 4;
    let e = run_experiment(&other, &mut quiet).unwrap_err();
    assert_eq!(e.kind(), crate::ErrorKind::Config);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn single_condition_runs() {
    let dir = tempdir("single");
    let mut cfg = tiny(dir.clone(), 0);
    cfg.eval.conditions = vec![TrialMode::ShortShort];
    let report = run_experiment(&cfg, &mut quiet).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert!(report.row(TrialMode::LongShort, System::Baseline).is_none());
    assert!(!ArtifactPaths::new(&dir).trials(TrialMode::LongShort).exists());
    fs::remove_dir_all(dir).unwrap();
}
