use super::*;
use crate::eval::{det_points, ScoredTrialSet};
use crate::gan::{build_models, EpochRecord, GanConfig};
use crate::nn::init_mlp;
use crate::plda::train_plda;
use crate::synth::{generate_corpus, make_trials};
use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

fn tiny_gan() -> (GanConfig, GanModels<f64>) {
    let config = GanConfig {
        noise_dim: 3,
        num_speakers: 4,
        generator_hidden: vec![7, 5],
        critic_hidden: vec![6],
        ..GanConfig::default()
    };
    let models = build_models(5, &config).unwrap();
    (config, models)
}

fn small_corpus() -> Corpus<f64> {
    generate_corpus(&CorpusConfig {
        dim: 6,
        latent_dim: 2,
        num_speakers: 8,
        longs_per_speaker: 2,
        segments_per_long: 3,
        bias_rank: 1,
        eval_fraction: 0.25,
        ..CorpusConfig::default()
    })
    .unwrap()
}

#[test]
fn mlp_round_trip_preserves_forward_outputs() {
    let (config, models) = tiny_gan();
    let bytes = encode_mlp(&models.generator, ContainerKind::Generator, serde_json::to_value(&config).unwrap(), 9).unwrap();
    let c = decode_container(&bytes).unwrap();
    assert_eq!(c.header.seed, 9);
    assert_eq!(c.header.kind, ContainerKind::Generator);
    let back: Mlp<f64> = mlp_from_container(&c, ContainerKind::Generator).unwrap();
    assert_eq!(back.sizes(), models.generator.sizes());
    assert_eq!(back.activations(), models.generator.activations());
    for i in 0..back.param_count() {
        let (a, b) = (models.generator.param(i), back.param(i));
        assert_eq!(b, a as f32 as f64);
    }
    let batch = Array2::from_shape_fn((4, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
    let before = models.generator.predict(batch.view()).unwrap();
    let after = back.predict(batch.view()).unwrap();
    let worst = (&before - &after).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(worst < 1e-5, "{worst:e}");
}

#[test]
fn gan_models_round_trip_through_files() {
    let (config, models) = tiny_gan();
    let dir = tempdir();
    let paths = GanPaths::in_dir(&dir, "m");
    assert!(!paths.all_exist());
    save_gan_models(&paths, &models, serde_json::to_value(&config).unwrap(), 1).unwrap();
    assert!(paths.all_exist());
    let back: GanModels<f64> = load_gan_models(&paths).unwrap();
    assert_eq!(back.dim(), 5);
    assert_eq!(back.num_speakers(), 4);
    // Swapped files are caught by the kind check.
    let swapped = GanPaths {
        generator: paths.critic.clone(),
        ..paths.clone()
    };
    assert!(matches!(load_gan_models::<f64>(&swapped), Err(Error::Format(_))));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn plda_round_trip_keeps_scores_close() {
    let corpus = small_corpus();
    let longs = corpus.training_longs();
    let vectors: Vec<_> = longs.iter().map(|l| l.vector.clone()).collect();
    let labels: Vec<_> = longs.iter().map(|l| l.speaker).collect();
    let model = train_plda(&vectors, &labels, 2, 5, 0).unwrap();
    let bytes = encode_plda(&model, serde_json::json!({"q": 2}), 0).unwrap();
    let back: PldaModel<f64> = plda_from_container(&decode_container(&bytes).unwrap()).unwrap();
    let a = &corpus.pairs[0].short_vec;
    let b = &corpus.pairs[5].short_vec;
    let s0 = crate::plda::plda_llr(&model, a, b).unwrap();
    let s1 = crate::plda::plda_llr(&back, a, b).unwrap();
    assert!((s0 - s1).abs() < 1e-3 * s0.abs().max(1.0), "{s0} vs {s1}");
}

#[test]
fn corpus_round_trip_is_exact() {
    let corpus = small_corpus();
    let back: Corpus<f64> = corpus_from_container(&decode_container(&encode_corpus(&corpus).unwrap()).unwrap()).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn corrupted_magic_is_rejected() {
    let (_, models) = tiny_gan();
    let mut bytes = encode_mlp(&models.critic, ContainerKind::Critic, serde_json::Value::Null, 0).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode_container(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    assert!(decode_container(b"IVG").is_err());
}

#[test]
fn truncated_payload_names_counts() {
    let (_, models) = tiny_gan();
    let bytes = encode_mlp(&models.critic, ContainerKind::Critic, serde_json::Value::Null, 0).unwrap();
    let expected = models.critic.param_count();
    let cut = &bytes[..bytes.len() - 8];
    match decode_container(cut) {
        Err(e @ Error::PayloadLength { .. }) => {
            let msg = e.to_string();
            assert!(msg.contains(&expected.to_string()) && msg.contains(&(expected - 2).to_string()), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 4]);
    assert!(matches!(
        decode_container(&longer),
        Err(Error::PayloadLength { actual, .. }) if actual == expected + 1
    ));
}

#[test]
fn header_shape_must_match_payload() {
    let mut header = ContainerHeader::new(ContainerKind::Plda, Dtype::F32, serde_json::Value::Null, 0);
    header.tensors.push(TensorSpec::new("mean", &[3]));
    assert!(matches!(
        encode_container(&header, &[1.0, 2.0]),
        Err(Error::PayloadLength { expected: 3, actual: 2 })
    ));
}

#[test]
fn truncated_header_and_bad_version() {
    let (_, models) = tiny_gan();
    let bytes = encode_mlp(&models.critic, ContainerKind::Critic, serde_json::Value::Null, 0).unwrap();
    assert!(matches!(decode_container(&bytes[..20]), Err(Error::Format(_))));
    let mut c = decode_container(&bytes).unwrap();
    c.header.format_version = 99;
    let re = encode_container(&c.header, &c.values).unwrap();
    assert!(matches!(decode_container(&re), Err(Error::Format(m)) if m.contains("version")));
}

#[test]
fn kind_mismatch_is_rejected() {
    let (_, models) = tiny_gan();
    let bytes = encode_mlp(&models.critic, ContainerKind::Critic, serde_json::Value::Null, 0).unwrap();
    let c = decode_container(&bytes).unwrap();
    assert!(mlp_from_container::<f64>(&c, ContainerKind::Generator).is_err());
    assert!(plda_from_container::<f64>(&c).is_err());
    assert!(corpus_from_container::<f64>(&c).is_err());
}

#[test]
fn atomic_write_leaves_no_partial_file() {
    let dir = tempdir();
    let path = dir.join("nested").join("x.bin");
    write_atomic(&path, b"abc").unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"abc");
    let names: Vec<_> = fs::read_dir(dir.join("nested")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn score_csv_round_trip() {
    let corpus = small_corpus();
    let trials = make_trials(&corpus, TrialMode::ShortShort, 3, 4, 0).unwrap();
    let scores = ScoredTrialSet::new(
        trials.entries.iter().enumerate().map(|(i, t)| (i as f64 * 0.1 - 0.25, t.is_target)).collect(),
        "x",
    )
    .unwrap();
    let table = ScoreTable::from_trials(&trials, &scores).unwrap();
    let csv = table.to_csv().unwrap();
    assert!(String::from_utf8_lossy(&csv).starts_with("trial_id,enroll_ref,test_ref,is_target,score\n"));
    let back = ScoreTable::from_csv(&csv).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.to_scored_set("x").unwrap(), scores);
    back.check_aligned(&table).unwrap();
}

#[test]
fn misaligned_score_tables_are_detected() {
    let row = |id, e: &str| ScoreRow {
        trial_id: id,
        enroll_ref: e.into(),
        test_ref: "S1".into(),
        is_target: 1,
        score: 0.0,
    };
    let a = ScoreTable { rows: vec![row(0, "S0")] };
    let b = ScoreTable { rows: vec![row(0, "S2")] };
    assert!(a.check_aligned(&b).is_err());
    assert!(a.check_aligned(&ScoreTable { rows: vec![] }).is_err());
}

#[test]
fn trials_csv_round_trip() {
    let corpus = small_corpus();
    for mode in [TrialMode::LongShort, TrialMode::ShortShort] {
        let trials = make_trials(&corpus, mode, 3, 4, 0).unwrap();
        let back = trials_from_csv(&trials_to_csv(&trials).unwrap()).unwrap();
        assert_eq!(back, trials);
    }
    assert!(trials_from_csv(b"trial_id,enroll_ref,test_ref,is_target\n").is_err());
    assert!(trials_from_csv(b"trial_id,enroll_ref,test_ref,is_target\n0,L0,S1,1\n1,S0,S1,0\n").is_err());
    assert!(trials_from_csv(b"trial_id,enroll_ref,test_ref,is_target\n0,L0,S1,2\n").is_err());
}

#[test]
fn det_csv_round_trip_with_infinite_threshold() {
    let set = ScoredTrialSet::new(vec![(0.5, true), (0.1, false), (0.5, false)], "x").unwrap();
    let det = det_points(&set);
    let csv = det_to_csv(&det).unwrap();
    assert!(String::from_utf8_lossy(&csv).starts_with("threshold,p_fa,p_miss\n"));
    assert_eq!(det_from_csv(&csv).unwrap(), det);
}

#[test]
fn history_csv_round_trip() {
    let record = |epoch| EpochRecord {
        epoch,
        critic_objective: 0.125,
        generator_adversarial: -1.5e-3,
        cosine: 0.3,
        cross_entropy: 4.25,
        combined: 7.0 / 3.0,
        heldout_cosine_distance: 0.1,
    };
    let history = TrainHistory {
        epochs: vec![record(0), record(1)],
    };
    let csv = history_to_csv(&history).unwrap();
    assert_eq!(history_from_csv(&csv).unwrap(), history);
    let empty = history_to_csv(&TrainHistory::default()).unwrap();
    let first_line = String::from_utf8_lossy(&csv).lines().next().unwrap().to_string();
    assert_eq!(String::from_utf8_lossy(&empty).trim_end(), first_line);
    assert_eq!(history_from_csv(&empty).unwrap(), TrainHistory::default());
}

#[test]
fn vectors_csv_round_trip_and_errors() {
    let rows = vec![
        ("S0".to_string(), IVector::from_vec(vec![0.1, -2.0 / 3.0, 1e-300]).unwrap()),
        ("L4".to_string(), IVector::from_vec(vec![1.0, 0.0, -0.0]).unwrap()),
    ];
    let csv = vectors_to_csv(&rows).unwrap();
    assert_eq!(vectors_from_csv::<f64>(&csv).unwrap(), rows);
    assert!(vectors_from_csv::<f64>(b"id\nS0\n").is_err());
    assert!(vectors_from_csv::<f64>(b"id,x0\nS0,abc\n").is_err());
    let ragged = vec![rows[0].clone(), ("x".into(), IVector::from_vec(vec![1.0]).unwrap())];
    assert!(vectors_to_csv(&ragged).is_err());
}

#[test]
fn mlp_loader_checks_tensor_names() {
    let net: Mlp<f64> = init_mlp(&[2, 3], &[Activation::Linear], 0).unwrap();
    let bytes = encode_mlp(&net, ContainerKind::Critic, serde_json::Value::Null, 0).unwrap();
    let mut c = decode_container(&bytes).unwrap();
    c.header.tensors[0].name = "w".into();
    assert!(mlp_from_container::<f64>(&c, ContainerKind::Critic).is_err());
    let mut c = decode_container(&bytes).unwrap();
    c.header.activations.clear();
    assert!(mlp_from_container::<f64>(&c, ContainerKind::Critic).is_err());
}

fn tempdir() -> std::path::PathBuf {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let dir = std::env::temp_dir().join(format!(
        "ivgan-io-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::create_dir_all(&dir).unwrap();
    dir
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn score_csv_round_trips_arbitrary_scores(scores in proptest::collection::vec(-1e6f64..1e6, 2..40)) {
        let rows: Vec<ScoreRow> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRow {
                trial_id: i,
                enroll_ref: format!("L{i}"),
                test_ref: format!("S{}", i + 1),
                is_target: (i % 2) as u8,
                score: s,
            })
            .collect();
        let table = ScoreTable { rows };
        prop_assert_eq!(ScoreTable::from_csv(&table.to_csv().unwrap()).unwrap(), table);
    }
}
