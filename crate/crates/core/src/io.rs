//! On-disk formats.
//!
//! Binary containers start with the 8-byte tag `IVGAN1\0\0`, then a `u32`
//! little-endian header length, a UTF-8 JSON header and a little-endian float
//! payload holding the header's tensors in order, each row-major. Networks and
//! PLDA models are stored as `f32`; corpora keep `f64`.
//!
//! Tabular artifacts (scores, trials, DET curves, training history, vectors)
//! are CSV files with a header row.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{DetPoint, ScoredTrialSet};
use crate::gan::{EpochRecord, GanModels, TrainHistory};
use crate::nn::{Activation, Dense, Mlp};
use crate::plda::PldaModel;
use crate::scalar::Scalar;
use crate::synth::{Corpus, CorpusConfig, LongUtterance, Trial, TrialList, TrialMode, UtterancePair, VectorRef};
use crate::vecspace::IVector;

pub const MAGIC: &[u8; 8] = b"IVGAN1\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerKind {
    Generator,
    Supplement,
    Critic,
    Plda,
    Corpus,
}

impl std::fmt::Display for ContainerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned));
        f.write_str(s.as_deref().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    pub kind: ContainerKind,
    pub dtype: Dtype,
    pub tensors: Vec<TensorSpec>,
    #[serde(default)]
    pub activations: Vec<Activation>,
    /// Echo of the configuration that produced the artifact.
    #[serde(default)]
    pub config: serde_json::Value,
    pub seed: u64,
    /// Kind-specific integer metadata (corpus labels).
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl ContainerHeader {
    fn new(kind: ContainerKind, dtype: Dtype, config: serde_json::Value, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            dtype,
            tensors: Vec::new(),
            activations: Vec::new(),
            config,
            seed,
            extra: serde_json::Value::Null,
        }
    }

    pub fn value_count(&self) -> usize {
        self.tensors.iter().map(TensorSpec::len).sum()
    }
}

/// A decoded container: header plus payload widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub values: Vec<f64>,
}

impl Container {
    /// Splits the payload into one slice per declared tensor.
    pub fn tensors(&self) -> Vec<(&TensorSpec, &[f64])> {
        let mut offset = 0;
        self.header
            .tensors
            .iter()
            .map(|t| {
                let slice = &self.values[offset..offset + t.len()];
                offset += t.len();
                (t, slice)
            })
            .collect()
    }

    fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} container, found {}",
                self.header.kind
            )));
        }
        Ok(())
    }
}

pub fn encode_container(header: &ContainerHeader, values: &[f64]) -> Result<Vec<u8>> {
    if header.value_count() != values.len() {
        return Err(Error::PayloadLength {
            expected: header.value_count(),
            actual: values.len(),
        });
    }
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + values.len() * header.dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for &v in values {
        match header.dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic: not a model container".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 4] = rest
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let json = rest
        .get(4..4 + header_len)
        .ok_or_else(|| Error::Format(format!("truncated header: declared {header_len} bytes")))?;
    let header: ContainerHeader =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let payload = &rest[4 + header_len..];
    let width = header.dtype.width();
    let expected = header.value_count();
    if payload.len() != expected * width {
        return Err(Error::PayloadLength {
            expected,
            actual: payload.len() / width,
        });
    }
    let values: Vec<f64> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("payload holds non-finite values".into()));
    }
    Ok(Container { header, values })
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode_container(&fs::read(path)?)
}

fn to_f64<T: Scalar>(values: impl IntoIterator<Item = T>) -> impl Iterator<Item = f64> {
    values.into_iter().map(|v| v.to_f64_lossy())
}

fn array2<T: Scalar>(spec: &TensorSpec, values: &[f64]) -> Result<Array2<T>> {
    let [rows, cols] = spec.shape[..] else {
        return Err(Error::Format(format!("tensor {} must be 2-d, has shape {:?}", spec.name, spec.shape)));
    };
    Array2::from_shape_vec((rows, cols), values.iter().map(|&v| T::from_f64_lossy(v)).collect())
        .map_err(|e| Error::Format(format!("tensor {}: {e}", spec.name)))
}

fn array1<T: Scalar>(spec: &TensorSpec, values: &[f64]) -> Result<Array1<T>> {
    if spec.shape.len() != 1 {
        return Err(Error::Format(format!("tensor {} must be 1-d, has shape {:?}", spec.name, spec.shape)));
    }
    Ok(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
}

fn expect_name(spec: &TensorSpec, name: &str) -> Result<()> {
    if spec.name != name {
        return Err(Error::Format(format!("expected tensor {name}, found {}", spec.name)));
    }
    Ok(())
}

pub fn encode_mlp<T: Scalar>(
    net: &Mlp<T>,
    kind: ContainerKind,
    config: serde_json::Value,
    seed: u64,
) -> Result<Vec<u8>> {
    let mut header = ContainerHeader::new(kind, Dtype::F32, config, seed);
    let mut values = Vec::with_capacity(net.param_count());
    for (k, layer) in net.layers().iter().enumerate() {
        let (rows, cols) = layer.weight.dim();
        header.tensors.push(TensorSpec::new(format!("layer{k}.weight"), &[rows, cols]));
        header.tensors.push(TensorSpec::new(format!("layer{k}.bias"), &[rows]));
        header.activations.push(layer.activation);
        values.extend(to_f64(layer.weight.iter().copied()));
        values.extend(to_f64(layer.bias.iter().copied()));
    }
    encode_container(&header, &values)
}

pub fn mlp_from_container<T: Scalar>(c: &Container, kind: ContainerKind) -> Result<Mlp<T>> {
    c.expect_kind(kind)?;
    let tensors = c.tensors();
    if tensors.len() != 2 * c.header.activations.len() {
        return Err(Error::Format(format!(
            "{} tensors for {} activations",
            tensors.len(),
            c.header.activations.len()
        )));
    }
    let mut layers = Vec::new();
    for (k, (pair, &activation)) in tensors.chunks(2).zip(&c.header.activations).enumerate() {
        let (ws, wv) = pair[0];
        let (bs, bv) = pair[1];
        expect_name(ws, &format!("layer{k}.weight"))?;
        expect_name(bs, &format!("layer{k}.bias"))?;
        layers.push(Dense {
            weight: array2(ws, wv)?,
            bias: array1(bs, bv)?,
            activation,
        });
    }
    Mlp::from_layers(layers)
}

pub fn save_mlp<T: Scalar>(
    path: &Path,
    net: &Mlp<T>,
    kind: ContainerKind,
    config: serde_json::Value,
    seed: u64,
) -> Result<()> {
    write_atomic(path, &encode_mlp(net, kind, config, seed)?)
}

pub fn load_mlp<T: Scalar>(path: &Path, kind: ContainerKind) -> Result<(Mlp<T>, ContainerHeader)> {
    let c = read_container(path)?;
    let net = mlp_from_container(&c, kind)?;
    Ok((net, c.header))
}

/// File locations of the three networks of a GAN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GanPaths {
    pub generator: std::path::PathBuf,
    pub supplement: std::path::PathBuf,
    pub critic: std::path::PathBuf,
}

impl GanPaths {
    /// `<stem>.g.ivm`, `<stem>.gsup.ivm`, `<stem>.d.ivm` inside `dir`.
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            generator: dir.join(format!("{stem}.g.ivm")),
            supplement: dir.join(format!("{stem}.gsup.ivm")),
            critic: dir.join(format!("{stem}.d.ivm")),
        }
    }

    pub fn all_exist(&self) -> bool {
        self.generator.exists() && self.supplement.exists() && self.critic.exists()
    }
}

pub fn save_gan_models<T: Scalar>(paths: &GanPaths, models: &GanModels<T>, config: serde_json::Value, seed: u64) -> Result<()> {
    save_mlp(&paths.generator, &models.generator, ContainerKind::Generator, config.clone(), seed)?;
    save_mlp(&paths.supplement, &models.supplement, ContainerKind::Supplement, config.clone(), seed)?;
    save_mlp(&paths.critic, &models.critic, ContainerKind::Critic, config, seed)
}

pub fn load_gan_models<T: Scalar>(paths: &GanPaths) -> Result<GanModels<T>> {
    let models = GanModels {
        generator: load_mlp(&paths.generator, ContainerKind::Generator)?.0,
        supplement: load_mlp(&paths.supplement, ContainerKind::Supplement)?.0,
        critic: load_mlp(&paths.critic, ContainerKind::Critic)?.0,
    };
    models.validate()?;
    Ok(models)
}

pub fn encode_plda<T: Scalar>(model: &PldaModel<T>, config: serde_json::Value, seed: u64) -> Result<Vec<u8>> {
    let (d, q) = model.speaker_subspace().dim();
    let mut header = ContainerHeader::new(ContainerKind::Plda, Dtype::F32, config, seed);
    header.tensors = vec![
        TensorSpec::new("mean", &[d]),
        TensorSpec::new("speaker_subspace", &[d, q]),
        TensorSpec::new("residual_cov", &[d, d]),
    ];
    let mut values: Vec<f64> = to_f64(model.mean().view().iter().copied()).collect();
    values.extend(to_f64(model.speaker_subspace().iter().copied()));
    values.extend(to_f64(model.residual_cov().iter().copied()));
    encode_container(&header, &values)
}

pub fn plda_from_container<T: Scalar>(c: &Container) -> Result<PldaModel<T>> {
    c.expect_kind(ContainerKind::Plda)?;
    let t = c.tensors();
    let [(ms, mv), (vs, vv), (ss, sv)] = t[..] else {
        return Err(Error::Format(format!("PLDA container needs 3 tensors, has {}", t.len())));
    };
    expect_name(ms, "mean")?;
    expect_name(vs, "speaker_subspace")?;
    expect_name(ss, "residual_cov")?;
    PldaModel::new(IVector::new(array1(ms, mv)?)?, array2(vs, vv)?, array2(ss, sv)?)
}

pub fn save_plda<T: Scalar>(path: &Path, model: &PldaModel<T>, config: serde_json::Value, seed: u64) -> Result<()> {
    write_atomic(path, &encode_plda(model, config, seed)?)
}

pub fn load_plda<T: Scalar>(path: &Path) -> Result<PldaModel<T>> {
    plda_from_container(&read_container(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLabels {
    long_speakers: Vec<usize>,
    pair_long_index: Vec<usize>,
}

pub fn encode_corpus<T: Scalar>(corpus: &Corpus<T>) -> Result<Vec<u8>> {
    let d = corpus.dim();
    let config = serde_json::to_value(&corpus.config)?;
    let mut header = ContainerHeader::new(ContainerKind::Corpus, Dtype::F64, config, corpus.config.seed);
    header.tensors = vec![
        TensorSpec::new("longs", &[corpus.longs.len(), d]),
        TensorSpec::new("shorts", &[corpus.pairs.len(), d]),
    ];
    header.extra = serde_json::to_value(CorpusLabels {
        long_speakers: corpus.longs.iter().map(|l| l.speaker).collect(),
        pair_long_index: corpus.pairs.iter().map(|p| p.long_index).collect(),
    })?;
    let mut values = Vec::with_capacity(header.value_count());
    for l in &corpus.longs {
        values.extend(to_f64(l.vector.view().iter().copied()));
    }
    for p in &corpus.pairs {
        values.extend(to_f64(p.short_vec.view().iter().copied()));
    }
    encode_container(&header, &values)
}

pub fn corpus_from_container<T: Scalar>(c: &Container) -> Result<Corpus<T>> {
    c.expect_kind(ContainerKind::Corpus)?;
    let config: CorpusConfig = serde_json::from_value(c.header.config.clone())
        .map_err(|e| Error::Format(format!("corpus config echo: {e}")))?;
    let labels: CorpusLabels = serde_json::from_value(c.header.extra.clone())
        .map_err(|e| Error::Format(format!("corpus labels: {e}")))?;
    let t = c.tensors();
    let [(ls, lv), (ss, sv)] = t[..] else {
        return Err(Error::Format(format!("corpus container needs 2 tensors, has {}", t.len())));
    };
    expect_name(ls, "longs")?;
    expect_name(ss, "shorts")?;
    let longs_m: Array2<T> = array2(ls, lv)?;
    let shorts_m: Array2<T> = array2(ss, sv)?;
    if labels.long_speakers.len() != longs_m.nrows() || labels.pair_long_index.len() != shorts_m.nrows() {
        return Err(Error::Format("corpus label counts do not match tensor rows".into()));
    }
    let longs: Vec<LongUtterance<T>> = longs_m
        .rows()
        .into_iter()
        .zip(&labels.long_speakers)
        .map(|(row, &speaker)| {
            Ok(LongUtterance {
                speaker,
                vector: IVector::new(row.to_owned())?,
            })
        })
        .collect::<Result<_>>()?;
    let pairs = shorts_m
        .rows()
        .into_iter()
        .zip(&labels.pair_long_index)
        .map(|(row, &long_index)| {
            let long = longs
                .get(long_index)
                .ok_or_else(|| Error::Format(format!("pair refers to missing long utterance {long_index}")))?;
            Ok(UtterancePair {
                short_vec: IVector::new(row.to_owned())?,
                long_vec: long.vector.clone(),
                speaker: long.speaker,
                long_index,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { config, longs, pairs })
}

pub fn save_corpus<T: Scalar>(path: &Path, corpus: &Corpus<T>) -> Result<()> {
    write_atomic(path, &encode_corpus(corpus)?)
}

pub fn load_corpus<T: Scalar>(path: &Path) -> Result<Corpus<T>> {
    corpus_from_container(&read_container(path)?)
}

fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_rows<R: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// One row of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub trial_id: usize,
    pub enroll_ref: String,
    pub test_ref: String,
    pub is_target: u8,
    pub score: f64,
}

/// A score file: per-trial scores with their references.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn from_trials(trials: &TrialList, scores: &ScoredTrialSet) -> Result<Self> {
        if trials.entries.len() != scores.len() {
            return Err(Error::Data(format!(
                "{} trials but {} scores",
                trials.entries.len(),
                scores.len()
            )));
        }
        let rows = trials
            .entries
            .iter()
            .zip(scores.entries())
            .enumerate()
            .map(|(i, (t, &(score, is_target)))| {
                if t.is_target != is_target {
                    return Err(Error::Data(format!("trial {i}: target flag disagrees with score set")));
                }
                Ok(ScoreRow {
                    trial_id: i,
                    enroll_ref: t.enroll.to_string(),
                    test_ref: t.test.to_string(),
                    is_target: u8::from(is_target),
                    score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn to_scored_set(&self, condition: &str) -> Result<ScoredTrialSet> {
        let entries = self
            .rows
            .iter()
            .map(|r| match r.is_target {
                0 => Ok((r.score, false)),
                1 => Ok((r.score, true)),
                other => Err(Error::Data(format!("trial {}: is_target must be 0 or 1, got {other}", r.trial_id))),
            })
            .collect::<Result<_>>()?;
        ScoredTrialSet::new(entries, condition)
    }

    /// Checks that two tables describe the same trials in the same order.
    pub fn check_aligned(&self, other: &ScoreTable) -> Result<()> {
        if self.rows.len() != other.rows.len() {
            return Err(Error::Data(format!(
                "score files hold {} and {} trials",
                self.rows.len(),
                other.rows.len()
            )));
        }
        for (a, b) in self.rows.iter().zip(&other.rows) {
            if (a.trial_id, &a.enroll_ref, &a.test_ref, a.is_target) != (b.trial_id, &b.enroll_ref, &b.test_ref, b.is_target) {
                return Err(Error::Data(format!("score files disagree at trial {}", a.trial_id)));
            }
        }
        Ok(())
    }

    /// Same trials, new scores.
    pub fn with_scores(&self, scores: &ScoredTrialSet) -> Result<Self> {
        if scores.len() != self.rows.len() {
            return Err(Error::Data(format!("{} rows but {} scores", self.rows.len(), scores.len())));
        }
        let rows = self
            .rows
            .iter()
            .zip(scores.entries())
            .map(|(r, &(score, _))| ScoreRow { score, ..r.clone() })
            .collect();
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(&self.rows)
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        Ok(Self { rows: csv_rows(bytes)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrialRow {
    trial_id: usize,
    enroll_ref: String,
    test_ref: String,
    is_target: u8,
}

pub fn trials_to_csv(trials: &TrialList) -> Result<Vec<u8>> {
    csv_bytes(trials.entries.iter().enumerate().map(|(i, t)| TrialRow {
        trial_id: i,
        enroll_ref: t.enroll.to_string(),
        test_ref: t.test.to_string(),
        is_target: u8::from(t.is_target),
    }))
}

/// Parses a trial file; the mode follows from the enrolment references
/// (`L…` for long-short, `S…` for short-short).
pub fn trials_from_csv(bytes: &[u8]) -> Result<TrialList> {
    let rows: Vec<TrialRow> = csv_rows(bytes)?;
    let mut entries = Vec::with_capacity(rows.len());
    let mut mode = None;
    for (i, r) in rows.iter().enumerate() {
        if r.trial_id != i {
            return Err(Error::Data(format!("trial ids must run 0.. in order; row {i} has {}", r.trial_id)));
        }
        let enroll: VectorRef = r.enroll_ref.parse()?;
        let test: VectorRef = r.test_ref.parse()?;
        let row_mode = match (enroll, test) {
            (VectorRef::Long(_), VectorRef::Short(_)) => TrialMode::LongShort,
            (VectorRef::Short(_), VectorRef::Short(_)) => TrialMode::ShortShort,
            _ => return Err(Error::Data(format!("trial {i}: unsupported reference pair {enroll}/{test}"))),
        };
        if mode.is_some_and(|m| m != row_mode) {
            return Err(Error::Data("trial file mixes long-short and short-short trials".into()));
        }
        mode = Some(row_mode);
        let is_target = match r.is_target {
            0 => false,
            1 => true,
            other => return Err(Error::Data(format!("trial {i}: is_target must be 0 or 1, got {other}"))),
        };
        entries.push(Trial { enroll, test, is_target });
    }
    let mode = mode.ok_or_else(|| Error::Data("empty trial file".into()))?;
    TrialList::new(mode, entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DetRow {
    threshold: f64,
    p_fa: f64,
    p_miss: f64,
}

pub fn det_to_csv(points: &[DetPoint]) -> Result<Vec<u8>> {
    csv_bytes(points.iter().map(|p| DetRow {
        threshold: p.threshold,
        p_fa: p.p_fa,
        p_miss: p.p_miss,
    }))
}

pub fn det_from_csv(bytes: &[u8]) -> Result<Vec<DetPoint>> {
    let rows: Vec<DetRow> = csv_rows(bytes)?;
    Ok(rows
        .into_iter()
        .map(|r| DetPoint {
            threshold: r.threshold,
            p_fa: r.p_fa,
            p_miss: r.p_miss,
        })
        .collect())
}

pub fn history_to_csv(history: &TrainHistory) -> Result<Vec<u8>> {
    if history.epochs.is_empty() {
        // serde-driven writers only emit a header with the first record
        return Ok(b"epoch,critic_objective,generator_adversarial,cosine,cross_entropy,combined,heldout_cosine_distance\n".to_vec());
    }
    csv_bytes(&history.epochs)
}

pub fn history_from_csv(bytes: &[u8]) -> Result<TrainHistory> {
    let epochs: Vec<EpochRecord> = csv_rows(bytes)?;
    Ok(TrainHistory { epochs })
}

/// Named vectors, one per row: `id,x0,x1,…`.
pub fn vectors_to_csv<T: Scalar>(rows: &[(String, IVector<T>)]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, |(_, v)| v.dim());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (id, v) in rows {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        let mut record = vec![id.clone()];
        record.extend(v.view().iter().map(|x| format!("{:?}", x.to_f64_lossy())));
        w.write_record(&record)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn vectors_from_csv<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, IVector<T>)>> {
    let mut r = csv::Reader::from_reader(bytes);
    let dim = r.headers()?.len().saturating_sub(1);
    if dim == 0 {
        return Err(Error::Data("vector file needs an id column and at least one component".into()));
    }
    let mut out = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or_default().to_string();
        let values = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map(T::from_f64_lossy)
                    .map_err(|_| Error::Data(format!("row {line}: bad number {f:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        out.push((id, IVector::from_vec(values)?));
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests;
