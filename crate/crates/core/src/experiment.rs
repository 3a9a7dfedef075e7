//! The full pipeline: corpus, PLDA back-end, baseline scores, the Single-G and
//! D-WCGAN generators, transformed scores and 7:3 fusion, summarized in one
//! report table per run.
//!
//! Every stage writes its artifact into the output directory. A rerun with the
//! same configuration loads the corpus, trial lists, PLDA model and generators
//! from there instead of recomputing them. Scoring always uses the generators
//! as read back from disk, so fresh and resumed runs produce identical reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_condition, fuse_scores, ConditionMetrics, DcfParams, EvalMode, FusionNorm, FusionWeights};
use crate::gan::{mean_raw_cosine_distance, mean_transformed_cosine_distance, train_gan, CachedTransform, GanConfig, GanModels, LossWeights, NoisePolicy};
use crate::io::{
    history_to_csv, load_corpus, load_gan_models, load_plda, read_container, save_corpus, save_gan_models, save_plda,
    trials_from_csv, trials_to_csv, write_atomic, ScoreTable,
};
use crate::plda::{train_plda, PldaModel};
use crate::synth::{generate_corpus, make_trials, Corpus, CorpusConfig, TrialList, TrialMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldaSettings {
    pub q: usize,
    pub iterations: usize,
}

impl Default for PldaSettings {
    fn default() -> Self {
        Self { q: 10, iterations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub dcf: DcfParams,
    pub fusion_weights: FusionWeights,
    pub fusion_norm: FusionNorm,
    pub num_target: usize,
    pub num_nontarget: usize,
    pub conditions: Vec<TrialMode>,
    pub noise_policy: NoisePolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            dcf: DcfParams::default(),
            fusion_weights: FusionWeights::default(),
            fusion_norm: FusionNorm::default(),
            num_target: 1000,
            num_nontarget: 10000,
            conditions: vec![TrialMode::LongShort, TrialMode::ShortShort],
            noise_policy: NoisePolicy::Zero,
        }
    }
}

/// Everything one experiment run depends on.
///
/// `seed` is the single source of randomness: [`ExperimentConfig::resolved`]
/// copies it into the corpus and GAN configs and uses it for PLDA
/// initialization and trial sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Settings of the D-WCGAN system. The Single-G system uses the same
    /// settings with the adversarial weight set to zero.
    pub gan: GanConfig,
    pub plda: PldaSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    pub seed: u64,
}

pub const DEFAULT_EPOCHS: usize = 10;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            gan: GanConfig {
                epochs: DEFAULT_EPOCHS,
                ..GanConfig::default()
            },
            plda: PldaSettings::default(),
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("ivgan-out"),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Copy with the global seed and the training speaker count propagated
    /// into the nested configs.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.corpus.seed = self.seed;
        out.gan.seed = self.seed;
        out.gan.num_speakers = self.corpus.num_speakers.saturating_sub(self.corpus.eval_speaker_count());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        self.corpus.validate()?;
        self.gan.validate()?;
        if self.gan.weights.adversarial <= 0.0 {
            return fail("the D-WCGAN system needs a positive adversarial weight".into());
        }
        if self.plda.q == 0 || self.plda.q > self.corpus.dim || self.plda.iterations == 0 {
            return fail(format!(
                "PLDA needs 1 <= q <= dim ({}) and at least one iteration",
                self.corpus.dim
            ));
        }
        self.eval.dcf.validate()?;
        self.eval.fusion_weights.normalized()?;
        if self.eval.num_target == 0 || self.eval.num_nontarget == 0 {
            return fail("trial counts must be positive".into());
        }
        let c = &self.eval.conditions;
        if c.is_empty() || (1..c.len()).any(|i| c[..i].contains(&c[i])) {
            return fail("conditions must be a non-empty list without repeats".into());
        }
        if let NoisePolicy::Average { samples, sigma, .. } = self.eval.noise_policy {
            if samples == 0 || !(sigma > 0.0) {
                return fail("averaging noise policy needs samples > 0 and sigma > 0".into());
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return fail("output_dir must be set".into());
        }
        Ok(())
    }

    pub fn single_g(&self) -> GanConfig {
        GanConfig {
            weights: LossWeights {
                adversarial: 0.0,
                ..self.gan.weights
            },
            ..self.gan.clone()
        }
    }
}

/// The five systems of the report, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum System {
    Baseline,
    SingleG,
    SingleGFused,
    DWcgan,
    DWcganFused,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Baseline,
        System::SingleG,
        System::SingleGFused,
        System::DWcgan,
        System::DWcganFused,
    ];

    pub fn label(self) -> &'static str {
        match self {
            System::Baseline => "a) Baseline",
            System::SingleG => "b) Single G",
            System::SingleGFused => "c) a + b",
            System::DWcgan => "d) D-WCGAN",
            System::DWcganFused => "e) a + d",
        }
    }

    /// File-name stem for this system's artifacts.
    pub fn slug(self) -> &'static str {
        match self {
            System::Baseline => "baseline",
            System::SingleG => "single-g",
            System::SingleGFused => "single-g-fused",
            System::DWcgan => "d-wcgan",
            System::DWcganFused => "d-wcgan-fused",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    Untrained,
}

/// One line of the report. Metrics are empty for untrained systems;
/// `heldout_cosine` is only set for the unfused rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: TrialMode,
    pub system: String,
    pub status: RowStatus,
    pub eer: Option<f64>,
    pub min_dcf: Option<f64>,
    pub heldout_cosine: Option<f64>,
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, condition: TrialMode, system: System) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.system == system.label())
    }

    /// EER of a trained row.
    pub fn eer(&self, condition: TrialMode, system: System) -> Result<f64> {
        self.row(condition, system)
            .and_then(|r| r.eer)
            .ok_or_else(|| Error::Data(format!("report has no EER for {system} / {condition}")))
    }

    pub fn heldout_cosine(&self, system: System) -> Result<f64> {
        self.rows
            .iter()
            .find(|r| r.system == system.label() && r.heldout_cosine.is_some())
            .and_then(|r| r.heldout_cosine)
            .ok_or_else(|| Error::Data(format!("report has no held-out cosine for {system}")))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Where each artifact of a run lives.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.ivc")
    }

    pub fn plda(&self) -> PathBuf {
        self.dir.join("plda.ivm")
    }

    pub fn trials(&self, mode: TrialMode) -> PathBuf {
        self.dir.join(format!("trials-{mode}.csv"))
    }

    pub fn models(&self, system: System) -> crate::io::GanPaths {
        crate::io::GanPaths::in_dir(&self.dir, system.slug())
    }

    pub fn history(&self, system: System) -> PathBuf {
        self.dir.join(format!("history-{}.csv", system.slug()))
    }

    pub fn scores(&self, system: System, mode: TrialMode) -> PathBuf {
        self.dir.join(format!("scores-{}-{mode}.csv", system.slug()))
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }
}

/// Runs (or resumes) the experiment described by `config`, reporting stage
/// progress through `log`.
pub fn run_experiment(config: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Report> {
    let cfg = config.resolved();
    cfg.validate()?;
    let paths = ArtifactPaths::new(&cfg.output_dir);
    fs::create_dir_all(&paths.dir)?;
    claim_directory(&paths, &cfg)?;

    let corpus = stage_corpus(&paths, &cfg, log)?;
    let plda = stage_plda(&paths, &cfg, &corpus, log)?;
    let mut trials = Vec::new();
    for &mode in &cfg.eval.conditions {
        trials.push(stage_trials(&paths, &cfg, &corpus, mode, log)?);
    }

    let dcf = cfg.eval.dcf;
    let heldout = corpus.heldout_pairs();
    let raw_cosine = mean_raw_cosine_distance(&heldout)?;
    let mut rows = Vec::new();
    let row = |condition, system: System, metrics: Option<&ConditionMetrics>, cosine| ReportRow {
        condition,
        system: system.label().to_string(),
        status: if metrics.is_some() { RowStatus::Ok } else { RowStatus::Untrained },
        eer: metrics.map(|m| m.eer),
        min_dcf: metrics.map(|m| m.min_dcf),
        heldout_cosine: cosine,
        c_miss: dcf.c_miss,
        c_fa: dcf.c_fa,
        p_target: dcf.p_target,
    };

    let mut generators = Vec::new();
    if cfg.gan.epochs > 0 {
        for (system, gan) in [(System::SingleG, cfg.single_g()), (System::DWcgan, cfg.gan.clone())] {
            let models = stage_gan(&paths, &gan, &corpus, system, log)?;
            let cosine = mean_transformed_cosine_distance(&models, &heldout)?;
            generators.push((system, models, cosine));
        }
    } else {
        log("epochs = 0: transformed systems left untrained");
    }

    for trial_list in &trials {
        let mode = trial_list.mode;
        log(&format!("scoring {mode} trials"));
        let baseline = evaluate_condition(&corpus, trial_list, &plda, None, EvalMode::Baseline, &dcf)?;
        write_scores(&paths, System::Baseline, trial_list, &baseline)?;
        rows.push(row(mode, System::Baseline, Some(&baseline), Some(raw_cosine)));
        if generators.is_empty() {
            for system in &System::ALL[1..] {
                rows.push(row(mode, *system, None, None));
            }
            continue;
        }
        for (system, models, cosine) in &generators {
            let transform = CachedTransform::new(models, cfg.eval.noise_policy);
            transform.prime(trial_vectors(&corpus, trial_list)?)?;
            let transformed = evaluate_condition(
                &corpus,
                trial_list,
                &plda,
                Some(&transform),
                EvalMode::transformed(mode),
                &dcf,
            )?;
            let fused = fuse_scores(
                &baseline.scores,
                &transformed.scores,
                cfg.eval.fusion_weights,
                cfg.eval.fusion_norm,
            )?;
            let fused = ConditionMetrics::from_scores(fused, &dcf)?;
            let fused_system = match system {
                System::SingleG => System::SingleGFused,
                _ => System::DWcganFused,
            };
            write_scores(&paths, *system, trial_list, &transformed)?;
            write_scores(&paths, fused_system, trial_list, &fused)?;
            rows.push(row(mode, *system, Some(&transformed), Some(*cosine)));
            rows.push(row(mode, fused_system, Some(&fused), None));
        }
    }
    rows.sort_by_key(|r| {
        let cond = cfg.eval.conditions.iter().position(|c| *c == r.condition);
        let sys = System::ALL.iter().position(|s| s.label() == r.system);
        (cond, sys)
    });
    let report = Report { rows };
    write_atomic(&paths.report(), &report.to_csv()?)?;
    log(&format!("report written to {}", paths.report().display()));
    Ok(report)
}

/// Writes the resolved config, or checks that an existing one matches.
fn claim_directory(paths: &ArtifactPaths, cfg: &ExperimentConfig) -> Result<()> {
    let current = serde_json::to_value(cfg)?;
    let path = paths.config();
    if path.exists() {
        let existing: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
        if existing != current {
            return Err(Error::InvalidConfig(format!(
                "{} holds artifacts of a different configuration; use a fresh output directory",
                paths.dir.display()
            )));
        }
        return Ok(());
    }
    write_atomic(&path, &serde_json::to_vec_pretty(&current)?)
}

fn stage_corpus(paths: &ArtifactPaths, cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Corpus<f64>> {
    let path = paths.corpus();
    if path.exists() {
        let corpus: Corpus<f64> = load_corpus(&path)?;
        if corpus.config != cfg.corpus {
            return Err(Error::Data(format!("{} was generated from a different config", path.display())));
        }
        log("corpus: loaded");
        return Ok(corpus);
    }
    log("corpus: generating");
    let corpus = generate_corpus(&cfg.corpus)?;
    save_corpus(&path, &corpus)?;
    Ok(corpus)
}

fn stage_trials(
    paths: &ArtifactPaths,
    cfg: &ExperimentConfig,
    corpus: &Corpus<f64>,
    mode: TrialMode,
    log: &mut dyn FnMut(&str),
) -> Result<TrialList> {
    let path = paths.trials(mode);
    if path.exists() {
        let trials = trials_from_csv(&fs::read(&path)?)?;
        if trials.mode != mode {
            return Err(Error::Data(format!("{} does not hold {mode} trials", path.display())));
        }
        log(&format!("{mode} trials: loaded"));
        return Ok(trials);
    }
    let trials = make_trials(corpus, mode, cfg.eval.num_target, cfg.eval.num_nontarget, cfg.seed)?;
    write_atomic(&path, &trials_to_csv(&trials)?)?;
    Ok(trials)
}

fn stage_plda(
    paths: &ArtifactPaths,
    cfg: &ExperimentConfig,
    corpus: &Corpus<f64>,
    log: &mut dyn FnMut(&str),
) -> Result<PldaModel<f64>> {
    let path = paths.plda();
    if !path.exists() {
        log("PLDA: training on training-speaker long utterances");
        let longs = corpus.training_longs();
        let vectors: Vec<_> = longs.iter().map(|l| l.vector.clone()).collect();
        let labels: Vec<_> = longs.iter().map(|l| l.speaker).collect();
        let model = train_plda(&vectors, &labels, cfg.plda.q, cfg.plda.iterations, cfg.seed)?;
        save_plda(&path, &model, serde_json::to_value(cfg.plda)?, cfg.seed)?;
    } else {
        log("PLDA: loaded");
    }
    load_plda(&path)
}

fn stage_gan(
    paths: &ArtifactPaths,
    gan: &GanConfig,
    corpus: &Corpus<f64>,
    system: System,
    log: &mut dyn FnMut(&str),
) -> Result<GanModels<f64>> {
    let files = paths.models(system);
    let echo = serde_json::to_value(gan)?;
    if files.all_exist() {
        let header = read_container(&files.generator)?.header;
        if header.config != echo {
            return Err(Error::Data(format!(
                "{} was trained with a different config",
                files.generator.display()
            )));
        }
        log(&format!("{}: loaded", system.label()));
    } else {
        log(&format!("{}: training {} epochs", system.label(), gan.epochs));
        let (models, history) = train_gan::<f64>(&corpus.training_pairs(), &corpus.heldout_pairs(), gan)?;
        write_atomic(&paths.history(system), &history_to_csv(&history)?)?;
        save_gan_models(&files, &models, echo, gan.seed)?;
    }
    load_gan_models(&files)
}

fn trial_vectors<'c>(
    corpus: &'c Corpus<f64>,
    trials: &TrialList,
) -> Result<Vec<&'c crate::vecspace::IVector<f64>>> {
    let mut out = Vec::with_capacity(2 * trials.entries.len());
    for t in &trials.entries {
        out.push(corpus.resolve(t.enroll)?.0);
        out.push(corpus.resolve(t.test)?.0);
    }
    Ok(out)
}

fn write_scores(paths: &ArtifactPaths, system: System, trials: &TrialList, metrics: &ConditionMetrics) -> Result<()> {
    let table = ScoreTable::from_trials(trials, &metrics.scores)?;
    write_atomic(&paths.scores(system, trials.mode), &table.to_csv()?)
}

/// Reads a finished report from an output directory.
pub fn read_report(dir: &Path) -> Result<Report> {
    Report::from_csv(&fs::read(ArtifactPaths::new(dir).report())?)
}

#[cfg(test)]
mod tests;
