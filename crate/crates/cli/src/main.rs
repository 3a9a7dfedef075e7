//! `ivgan`: command-line front end for the compensation pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ivgan_core::eval::{compute_eer, compute_min_dcf, det_points, evaluate_condition, fuse_scores, DcfParams, EvalMode, FusionNorm, FusionWeights};
use ivgan_core::experiment::{run_experiment, ExperimentConfig, System};
use ivgan_core::gan::{train_gan, transform_batch, CachedTransform, GanModels, NoisePolicy};
use ivgan_core::gradcheck::{run_gradient_suite, GradCheckSetup, GRADCHECK_TOLERANCE};
use ivgan_core::io::{
    det_to_csv, history_to_csv, load_corpus, load_gan_models, load_plda, save_corpus, save_gan_models, save_plda,
    trials_from_csv, trials_to_csv, vectors_from_csv, vectors_to_csv, write_atomic, GanPaths, ScoreTable,
};
use ivgan_core::plda::train_plda;
use ivgan_core::synth::{generate_corpus, make_trials, Corpus, VectorRef};
use ivgan_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "ivgan", version, about = "GAN compensation of short-utterance i-vectors")]
struct Cli {
    /// Force single-threaded reference code paths.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, its trial lists and vector CSVs.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a PLDA back-end on the training speakers' long utterances.
    TrainPlda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Train G, G_sup and D; writes `<stem>.{g,gsup,d}.ivm` and `history-<stem>.csv`.
    TrainGan {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "d-wcgan")]
        stem: String,
        /// Drop the adversarial term and the critic (the Single-G system).
        #[arg(long)]
        single_g: bool,
    },
    /// Transform a vectors CSV with a trained generator.
    Transform {
        /// `<stem>.g.ivm`; the sibling `.gsup.ivm` and `.d.ivm` files must exist.
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Score a trial list with PLDA, optionally through a generator.
    Score {
        #[arg(long)]
        plda: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Defaults to `baseline` without a generator and to the trial mode with one.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Print EER and minDCF of a score file.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        dcf: DcfArgs,
        /// Write the DET curve here.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Weighted fusion of two aligned score files.
    Fuse {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[arg(long, default_value_t = 7.0)]
        w_base: f64,
        #[arg(long, default_value_t = 3.0)]
        w_other: f64,
        #[arg(long, value_enum, default_value_t = NormArg::ZScore)]
        norm: NormArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every training gradient.
    Gradcheck {
        #[arg(long, default_value_t = GradCheckSetup::default().seed)]
        seed: u64,
    },
    /// Full pipeline with a report of systems a) to e).
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config file plus the most common overrides. Precedence: file, then
/// `IVR_SEED`, then flags.
#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read(path)?;
                serde_json::from_slice(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Ok(seed) = std::env::var("IVR_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("IVR_SEED must be an unsigned integer, got {seed:?}")))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.gan.epochs = epochs;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Test-time noise: zero, or the mean over `--samples` noise draws.
    #[arg(long, value_enum, default_value_t = PolicyArg::Zero)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    noise_seed: u64,
}

impl PolicyArgs {
    fn policy(&self) -> NoisePolicy {
        match self.policy {
            PolicyArg::Zero => NoisePolicy::Zero,
            PolicyArg::Average => NoisePolicy::Average {
                samples: self.samples,
                sigma: self.sigma,
                seed: self.noise_seed,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Zero,
    Average,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    ZScore,
    Raw,
}

#[derive(Args)]
struct DcfArgs {
    #[arg(long, default_value_t = DcfParams::default().c_miss)]
    c_miss: f64,
    #[arg(long, default_value_t = DcfParams::default().c_fa)]
    c_fa: f64,
    #[arg(long, default_value_t = DcfParams::default().p_target)]
    p_target: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ivgan: error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Result<()> {
    // Every code path is single-threaded, so `--deterministic` has nothing to switch off.
    let _ = cli.deterministic;
    match cli.command {
        Command::Synth { config, out } => synth(&config.load()?, &out),
        Command::TrainPlda {
            config,
            corpus,
            out,
            q,
            iterations,
        } => {
            let mut cfg = config.load()?;
            cfg.plda.q = q.unwrap_or(cfg.plda.q);
            cfg.plda.iterations = iterations.unwrap_or(cfg.plda.iterations);
            let corpus: Corpus<f64> = load_corpus(&corpus)?;
            let longs = corpus.training_longs();
            let vectors: Vec<_> = longs.iter().map(|l| l.vector.clone()).collect();
            let labels: Vec<_> = longs.iter().map(|l| l.speaker).collect();
            let model = train_plda(&vectors, &labels, cfg.plda.q, cfg.plda.iterations, cfg.seed)?;
            save_plda(&out, &model, serde_json::to_value(cfg.plda)?, cfg.seed)
        }
        Command::TrainGan {
            config,
            corpus,
            out_dir,
            stem,
            single_g,
        } => {
            let cfg = config.load()?;
            let corpus: Corpus<f64> = load_corpus(&corpus)?;
            let mut gan = if single_g { cfg.single_g() } else { cfg.gan.clone() };
            gan.num_speakers = corpus.training_speaker_count();
            log(&format!("training {stem} for {} epochs", gan.epochs));
            let (models, history) = train_gan::<f64>(&corpus.training_pairs(), &corpus.heldout_pairs(), &gan)?;
            fs::create_dir_all(&out_dir)?;
            write_atomic(&out_dir.join(format!("history-{stem}.csv")), &history_to_csv(&history)?)?;
            save_gan_models(&GanPaths::in_dir(&out_dir, &stem), &models, serde_json::to_value(&gan)?, gan.seed)
        }
        Command::Transform {
            generator,
            vectors,
            out,
            policy,
        } => {
            let models = load_generator(&generator)?;
            let rows = vectors_from_csv::<f64>(&fs::read(&vectors)?)?;
            if rows.is_empty() {
                return Err(Error::Data(format!("{} holds no vectors", vectors.display())));
            }
            let mut xs = ndarray::Array2::zeros((rows.len(), rows[0].1.dim()));
            for (i, (_, v)) in rows.iter().enumerate() {
                if v.dim() != models.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: models.dim(),
                        actual: v.dim(),
                    });
                }
                xs.row_mut(i).assign(v.as_array());
            }
            let ys = transform_batch(&models, xs.view(), &policy.policy())?;
            let out_rows = rows
                .iter()
                .zip(ys.rows())
                .map(|((id, _), y)| Ok((id.clone(), ivgan_core::vecspace::IVector::new(y.to_owned())?)))
                .collect::<Result<Vec<_>>>()?;
            write_atomic(&out, &vectors_to_csv(&out_rows)?)
        }
        Command::Score {
            plda,
            corpus,
            trials,
            generator,
            mode,
            out,
            policy,
        } => {
            let plda = load_plda::<f64>(&plda)?;
            let corpus: Corpus<f64> = load_corpus(&corpus)?;
            let trials = trials_from_csv(&fs::read(&trials)?)?;
            let models = generator.as_deref().map(load_generator).transpose()?;
            let mode = match (mode, &models) {
                (Some(m), _) => m.parse()?,
                (None, Some(_)) => EvalMode::transformed(trials.mode),
                (None, None) => EvalMode::Baseline,
            };
            let params = DcfParams::default();
            let metrics = match &models {
                Some(models) if mode != EvalMode::Baseline => {
                    let transform = CachedTransform::new(models, policy.policy());
                    let mut vectors = Vec::new();
                    for t in &trials.entries {
                        vectors.push(corpus.resolve(t.enroll)?.0);
                        vectors.push(corpus.resolve(t.test)?.0);
                    }
                    transform.prime(vectors)?;
                    evaluate_condition(&corpus, &trials, &plda, Some(&transform), mode, &params)?
                }
                _ => evaluate_condition(&corpus, &trials, &plda, None, mode, &params)?,
            };
            write_atomic(&out, &ScoreTable::from_trials(&trials, &metrics.scores)?.to_csv()?)
        }
        Command::Eval { scores, dcf, det } => {
            let params = DcfParams {
                c_miss: dcf.c_miss,
                c_fa: dcf.c_fa,
                p_target: dcf.p_target,
            };
            params.validate()?;
            let set = ScoreTable::from_csv(&fs::read(&scores)?)?.to_scored_set("scores")?;
            println!("trials {} (targets {}, nontargets {})", set.len(), set.target_count(), set.nontarget_count());
            println!("eer {}", compute_eer(&set));
            println!(
                "min_dcf {} (c_miss {}, c_fa {}, p_target {})",
                compute_min_dcf(&set, &params)?,
                params.c_miss,
                params.c_fa,
                params.p_target
            );
            if let Some(path) = det {
                write_atomic(&path, &det_to_csv(&det_points(&set))?)?;
            }
            Ok(())
        }
        Command::Fuse {
            base,
            other,
            w_base,
            w_other,
            norm,
            out,
        } => {
            let a = ScoreTable::from_csv(&fs::read(&base)?)?;
            let b = ScoreTable::from_csv(&fs::read(&other)?)?;
            a.check_aligned(&b)?;
            let norm = match norm {
                NormArg::ZScore => FusionNorm::ZScore,
                NormArg::Raw => FusionNorm::Raw,
            };
            let weights = FusionWeights {
                base: w_base,
                other: w_other,
            };
            let fused = fuse_scores(&a.to_scored_set("a")?, &b.to_scored_set("b")?, weights, norm)?;
            write_atomic(&out, &a.with_scores(&fused)?.to_csv()?)
        }
        Command::Gradcheck { seed } => {
            let setup = GradCheckSetup {
                seed,
                ..GradCheckSetup::default()
            };
            let results = run_gradient_suite(&setup)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.passed(GRADCHECK_TOLERANCE);
                failed += usize::from(!ok);
                println!(
                    "{} {:<28} max_rel_err {:.3e} params {} kink_skips {}",
                    if ok { "pass" } else { "FAIL" },
                    r.name,
                    r.max_relative_error,
                    r.params_checked,
                    r.skipped_at_kinks
                );
            }
            if failed > 0 {
                return Err(Error::NonFinite(format!(
                    "{failed} gradient check(s) above tolerance {GRADCHECK_TOLERANCE:e}"
                )));
            }
            Ok(())
        }
        Command::Experiment { config, out } => {
            let mut cfg = config.load()?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let report = run_experiment(&cfg, &mut |m| log(m))?;
            println!("{:<12} {:<12} {:>9} {:>9}", "condition", "system", "EER", "minDCF");
            for r in &report.rows {
                let fmt = |v: Option<f64>| v.map_or("untrained".to_string(), |x| format!("{x:.4}"));
                println!("{:<12} {:<12} {:>9} {:>9}", r.condition.to_string(), r.system, fmt(r.eer), fmt(r.min_dcf));
            }
            if let Ok(c) = report.heldout_cosine(System::DWcgan) {
                println!(
                    "held-out cosine distance: raw {:.4}, D-WCGAN {:.4}",
                    report.heldout_cosine(System::Baseline)?,
                    c
                );
            }
            Ok(())
        }
    }
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let corpus: Corpus<f64> = generate_corpus(&cfg.corpus)?;
    fs::create_dir_all(out)?;
    save_corpus(&out.join("corpus.ivc"), &corpus)?;
    for &mode in &cfg.eval.conditions {
        let trials = make_trials(&corpus, mode, cfg.eval.num_target, cfg.eval.num_nontarget, cfg.seed)?;
        write_atomic(&out.join(format!("trials-{mode}.csv")), &trials_to_csv(&trials)?)?;
    }
    let shorts: Vec<_> = corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (VectorRef::Short(i).to_string(), p.short_vec.clone()))
        .collect();
    let longs: Vec<_> = corpus
        .longs
        .iter()
        .enumerate()
        .map(|(i, l)| (VectorRef::Long(i).to_string(), l.vector.clone()))
        .collect();
    write_atomic(&out.join("vectors-short.csv"), &vectors_to_csv(&shorts)?)?;
    write_atomic(&out.join("vectors-long.csv"), &vectors_to_csv(&longs)?)
}

/// Loads the model set whose generator file is `path` (`<stem>.g.ivm`).
fn load_generator(path: &Path) -> Result<GanModels<f64>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name
        .strip_suffix(".g.ivm")
        .ok_or_else(|| Error::InvalidConfig(format!("generator file must be named <stem>.g.ivm, got {name:?}")))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    load_gan_models(&GanPaths::in_dir(dir, stem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_distinct_and_nonzero() {
        let codes = [ErrorKind::Config, ErrorKind::Data, ErrorKind::Numeric].map(exit_code);
        assert!(codes.iter().all(|&c| c != 0));
        assert!(codes[0] != codes[1] && codes[1] != codes[2] && codes[0] != codes[2]);
    }
}
