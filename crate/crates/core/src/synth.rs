//! Synthetic corpus of (short-utterance, long-utterance) embedding pairs and
//! verification trial lists.
//!
//! Each speaker `s` has a latent factor `h_s ~ N(0, I)`. A long utterance is
//! `y = V h_s + e_long`; each of its short segments is
//! `x = y + B p + e_short`, where `B p` is a low-rank per-segment bias standing
//! in for the skewed phonetic content of short speech. Every stored vector is
//! length-normalized.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vecspace::{normalize_view, IVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub dim: usize,
    pub latent_dim: usize,
    pub num_speakers: usize,
    pub longs_per_speaker: usize,
    pub segments_per_long: usize,
    pub bias_rank: usize,
    pub short_noise_scale: f64,
    pub long_noise_scale: f64,
    /// Fraction of speakers held out for evaluation trials (at least two).
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            latent_dim: 10,
            num_speakers: 100,
            longs_per_speaker: 4,
            segments_per_long: 5,
            bias_rank: 5,
            short_noise_scale: 0.3,
            long_noise_scale: 0.05,
            eval_fraction: 0.2,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.latent_dim == 0 || self.dim < self.latent_dim {
            return fail(format!(
                "need dim >= latent_dim >= 1 (dim {}, latent_dim {})",
                self.dim, self.latent_dim
            ));
        }
        if self.num_speakers == 0 || self.longs_per_speaker == 0 || self.segments_per_long == 0 {
            return fail("speaker, long-utterance and segment counts must be >= 1".into());
        }
        if !(self.long_noise_scale > 0.0) || !(self.short_noise_scale > 0.0) {
            return fail("noise scales must be positive".into());
        }
        if !(self.short_noise_scale > self.long_noise_scale) {
            return fail(format!(
                "short_noise_scale {} must exceed long_noise_scale {}",
                self.short_noise_scale, self.long_noise_scale
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail(format!("eval_fraction {} not in [0, 1)", self.eval_fraction));
        }
        Ok(())
    }

    /// Number of held-out evaluation speakers: `round(S·fraction)`, at least 2, at most S.
    pub fn eval_speaker_count(&self) -> usize {
        let n = (self.num_speakers as f64 * self.eval_fraction).round() as usize;
        n.max(2).min(self.num_speakers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongUtterance<T> {
    pub speaker: usize,
    pub vector: IVector<T>,
}

/// A short-segment vector with the long-utterance vector it was carved from.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePair<T> {
    pub short_vec: IVector<T>,
    pub long_vec: IVector<T>,
    pub speaker: usize,
    pub long_index: usize,
}

/// Identifies a stored vector: `L<i>` is long utterance `i`, `S<j>` the short side of pair `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VectorRef {
    Long(usize),
    Short(usize),
}

impl fmt::Display for VectorRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorRef::Long(i) => write!(f, "L{i}"),
            VectorRef::Short(i) => write!(f, "S{i}"),
        }
    }
}

impl FromStr for VectorRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad vector reference {s:?}"));
        let (tag, rest) = s.split_at_checked(1).ok_or_else(bad)?;
        let index: usize = rest.parse().map_err(|_| bad())?;
        match tag {
            "L" => Ok(VectorRef::Long(index)),
            "S" => Ok(VectorRef::Short(index)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    pub config: CorpusConfig,
    pub longs: Vec<LongUtterance<T>>,
    pub pairs: Vec<UtterancePair<T>>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

fn to_ivector<T: Scalar>(v: &Array1<f64>) -> Result<IVector<T>> {
    let unit = normalize_view(v.view())?;
    IVector::new(unit.mapv(T::from_f64_lossy))
}

/// Generates the corpus. Speaker `s` draws from its own ChaCha stream, so the
/// output is independent of generation order.
pub fn generate_corpus<T: Scalar>(config: &CorpusConfig) -> Result<Corpus<T>> {
    config.validate()?;
    let mut shared = ChaCha8Rng::seed_from_u64(config.seed);
    // unit expected variance per component for both the speaker and bias terms
    let speaker_basis = gaussian_matrix(&mut shared, config.dim, config.latent_dim, (1.0 / config.latent_dim as f64).sqrt());
    let bias_basis = if config.bias_rank > 0 {
        gaussian_matrix(&mut shared, config.dim, config.bias_rank, (1.0 / config.bias_rank as f64).sqrt())
    } else {
        Array2::zeros((config.dim, 0))
    };

    let mut longs = Vec::with_capacity(config.num_speakers * config.longs_per_speaker);
    let mut pairs = Vec::with_capacity(longs.capacity() * config.segments_per_long);
    for speaker in 0..config.num_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(speaker as u64 + 1);
        let latent = gaussian_vector(&mut rng, config.latent_dim, 1.0);
        let center = speaker_basis.dot(&latent);
        for _ in 0..config.longs_per_speaker {
            let raw_long = &center + &gaussian_vector(&mut rng, config.dim, config.long_noise_scale);
            let long_vec: IVector<T> = to_ivector(&raw_long)?;
            let long_index = longs.len();
            for _ in 0..config.segments_per_long {
                let phonetic = gaussian_vector(&mut rng, config.bias_rank, 1.0);
                let raw_short = &raw_long
                    + &bias_basis.dot(&phonetic)
                    + &gaussian_vector(&mut rng, config.dim, config.short_noise_scale);
                pairs.push(UtterancePair {
                    short_vec: to_ivector(&raw_short)?,
                    long_vec: long_vec.clone(),
                    speaker,
                    long_index,
                });
            }
            longs.push(LongUtterance {
                speaker,
                vector: long_vec,
            });
        }
    }
    Ok(Corpus {
        config: config.clone(),
        longs,
        pairs,
    })
}

impl<T: Scalar> Corpus<T> {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_speakers(&self) -> usize {
        self.config.num_speakers
    }

    /// Speakers `[S - n_eval, S)` supply evaluation trials only.
    pub fn eval_speakers(&self) -> Range<usize> {
        let s = self.config.num_speakers;
        (s - self.config.eval_speaker_count())..s
    }

    /// Training speakers are labelled `0..training_speaker_count()`.
    pub fn training_speaker_count(&self) -> usize {
        self.eval_speakers().start
    }

    pub fn is_eval_speaker(&self, speaker: usize) -> bool {
        self.eval_speakers().contains(&speaker)
    }

    pub fn training_pairs(&self) -> Vec<UtterancePair<T>> {
        self.pairs.iter().filter(|p| !self.is_eval_speaker(p.speaker)).cloned().collect()
    }

    /// Pairs of the evaluation speakers, used to measure compensation on unseen data.
    pub fn heldout_pairs(&self) -> Vec<UtterancePair<T>> {
        self.pairs.iter().filter(|p| self.is_eval_speaker(p.speaker)).cloned().collect()
    }

    pub fn training_longs(&self) -> Vec<&LongUtterance<T>> {
        self.longs.iter().filter(|l| !self.is_eval_speaker(l.speaker)).collect()
    }

    pub fn resolve(&self, r: VectorRef) -> Result<(&IVector<T>, usize)> {
        match r {
            VectorRef::Long(i) => self.longs.get(i).map(|l| (&l.vector, l.speaker)),
            VectorRef::Short(i) => self.pairs.get(i).map(|p| (&p.short_vec, p.speaker)),
        }
        .ok_or_else(|| Error::Data(format!("unknown vector reference {r}")))
    }

    /// Long utterance a reference was recorded in (a long vector is its own source).
    pub fn source_long(&self, r: VectorRef) -> Result<usize> {
        match r {
            VectorRef::Long(i) if i < self.longs.len() => Ok(i),
            VectorRef::Short(i) if i < self.pairs.len() => Ok(self.pairs[i].long_index),
            _ => Err(Error::Data(format!("unknown vector reference {r}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialMode {
    /// Long-utterance enrollment against a short test segment.
    LongShort,
    /// Two short segments from different long utterances.
    ShortShort,
}

impl fmt::Display for TrialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialMode::LongShort => "long-short",
            TrialMode::ShortShort => "short-short",
        })
    }
}

impl FromStr for TrialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long-short" => Ok(TrialMode::LongShort),
            "short-short" => Ok(TrialMode::ShortShort),
            other => Err(Error::InvalidConfig(format!("unknown trial mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub enroll: VectorRef,
    pub test: VectorRef,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialList {
    pub mode: TrialMode,
    pub entries: Vec<Trial>,
}

impl TrialList {
    pub fn new(mode: TrialMode, entries: Vec<Trial>) -> Result<Self> {
        let targets = entries.iter().filter(|t| t.is_target).count();
        if targets == 0 || targets == entries.len() {
            return Err(Error::Data("trial list needs at least one target and one nontarget".into()));
        }
        Ok(Self { mode, entries })
    }

    pub fn target_count(&self) -> usize {
        self.entries.iter().filter(|t| t.is_target).count()
    }

    pub fn nontarget_count(&self) -> usize {
        self.entries.len() - self.target_count()
    }
}

/// Draws trials from the held-out speakers only, so no trial vector is ever
/// part of the training pairs. Targets come first, then nontargets.
pub fn make_trials<T: Scalar>(
    corpus: &Corpus<T>,
    mode: TrialMode,
    num_target: usize,
    num_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    if num_target == 0 || num_nontarget == 0 {
        return Err(Error::InvalidConfig(
            "trial list needs at least one target and one nontarget".into(),
        ));
    }
    if corpus.eval_speakers().len() < 2 {
        return Err(Error::InsufficientData("need at least two evaluation speakers".into()));
    }

    let eval_shorts: Vec<usize> = (0..corpus.pairs.len())
        .filter(|&i| corpus.is_eval_speaker(corpus.pairs[i].speaker))
        .collect();
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    match mode {
        TrialMode::LongShort => {
            let eval_longs = (0..corpus.longs.len()).filter(|&i| corpus.is_eval_speaker(corpus.longs[i].speaker));
            for l in eval_longs {
                for &s in &eval_shorts {
                    let pair = &corpus.pairs[s];
                    if pair.long_index == l {
                        continue;
                    }
                    let trial = (VectorRef::Long(l), VectorRef::Short(s));
                    if pair.speaker == corpus.longs[l].speaker {
                        targets.push(trial);
                    } else {
                        nontargets.push(trial);
                    }
                }
            }
        }
        TrialMode::ShortShort => {
            for (k, &a) in eval_shorts.iter().enumerate() {
                for &b in &eval_shorts[k + 1..] {
                    let (pa, pb) = (&corpus.pairs[a], &corpus.pairs[b]);
                    if pa.long_index == pb.long_index {
                        continue;
                    }
                    let trial = (VectorRef::Short(a), VectorRef::Short(b));
                    if pa.speaker == pb.speaker {
                        targets.push(trial);
                    } else {
                        nontargets.push(trial);
                    }
                }
            }
        }
    }
    if targets.len() < num_target || nontargets.len() < num_nontarget {
        return Err(Error::InsufficientData(format!(
            "requested {num_target} targets / {num_nontarget} nontargets, corpus offers {} / {}",
            targets.len(),
            nontargets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let entries = targets
        .into_iter()
        .take(num_target)
        .map(|(e, t)| (e, t, true))
        .chain(nontargets.into_iter().take(num_nontarget).map(|(e, t)| (e, t, false)))
        .map(|(enroll, test, is_target)| Trial { enroll, test, is_target })
        .collect();
    TrialList::new(mode, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecspace::cosine_distance;
    use std::collections::HashSet;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            num_speakers: 10,
            longs_per_speaker: 2,
            segments_per_long: 3,
            seed,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let c: Corpus<f64> = generate_corpus(&small(4)).unwrap();
        assert_eq!(c.longs.len(), 20);
        assert_eq!(c.pairs.len(), 60);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a: Corpus<f64> = generate_corpus(&small(4)).unwrap();
        let b: Corpus<f64> = generate_corpus(&small(4)).unwrap();
        assert_eq!(a, b);
        let c: Corpus<f64> = generate_corpus(&small(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vectors_are_unit_norm_and_pairs_consistent() {
        let c: Corpus<f64> = generate_corpus(&small(6)).unwrap();
        for p in &c.pairs {
            assert!((p.short_vec.norm() - 1.0).abs() < 1e-9);
            assert!((p.long_vec.norm() - 1.0).abs() < 1e-9);
            assert_eq!(c.longs[p.long_index].speaker, p.speaker);
            assert_eq!(c.longs[p.long_index].vector, p.long_vec);
        }
    }

    #[test]
    fn short_segments_are_noisier_than_repeat_longs() {
        let c: Corpus<f64> = generate_corpus(&CorpusConfig::default()).unwrap();
        let short_long: Vec<f64> =
            c.pairs.iter().map(|p| cosine_distance(&p.short_vec, &p.long_vec).unwrap()).collect();
        let mut long_long = Vec::new();
        for (i, a) in c.longs.iter().enumerate() {
            for b in &c.longs[i + 1..] {
                if a.speaker == b.speaker {
                    long_long.push(cosine_distance(&a.vector, &b.vector).unwrap());
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&short_long) > mean(&long_long), "{} vs {}", mean(&short_long), mean(&long_long));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = CorpusConfig::default();
        c.short_noise_scale = 0.01;
        assert!(generate_corpus::<f64>(&c).is_err());
        let mut c = CorpusConfig::default();
        c.latent_dim = 60;
        assert!(generate_corpus::<f64>(&c).is_err());
        let mut c = CorpusConfig::default();
        c.segments_per_long = 0;
        assert!(matches!(generate_corpus::<f64>(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn vector_refs_round_trip_through_text() {
        for r in [VectorRef::Long(0), VectorRef::Short(1234)] {
            assert_eq!(r.to_string().parse::<VectorRef>().unwrap(), r);
        }
        assert!("X3".parse::<VectorRef>().is_err());
        assert!("L".parse::<VectorRef>().is_err());
    }

    #[test]
    fn zero_targets_is_an_error() {
        let c: Corpus<f64> = generate_corpus(&small(1)).unwrap();
        assert!(make_trials(&c, TrialMode::ShortShort, 0, 5, 0).is_err());
    }

    #[test]
    fn unsatisfiable_counts_are_an_error() {
        let c: Corpus<f64> = generate_corpus(&small(1)).unwrap();
        assert!(matches!(
            make_trials(&c, TrialMode::LongShort, 10_000, 5, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn trial_audit() {
        let config = CorpusConfig {
            num_speakers: 20,
            ..CorpusConfig::default()
        };
        let c: Corpus<f64> = generate_corpus(&config).unwrap();
        let training: HashSet<VectorRef> = (0..c.pairs.len())
            .filter(|&i| !c.is_eval_speaker(c.pairs[i].speaker))
            .flat_map(|i| [VectorRef::Short(i), VectorRef::Long(c.pairs[i].long_index)])
            .collect();
        for mode in [TrialMode::LongShort, TrialMode::ShortShort] {
            let trials = make_trials(&c, mode, 100, 100, 7).unwrap();
            assert_eq!(trials.target_count(), 100);
            assert_eq!(trials.nontarget_count(), 100);
            for t in &trials.entries {
                let (_, se) = c.resolve(t.enroll).unwrap();
                let (_, st) = c.resolve(t.test).unwrap();
                assert_eq!(se == st, t.is_target);
                assert_ne!(c.source_long(t.enroll).unwrap(), c.source_long(t.test).unwrap());
                assert!(!training.contains(&t.enroll) && !training.contains(&t.test));
                match mode {
                    TrialMode::LongShort => {
                        assert!(matches!((t.enroll, t.test), (VectorRef::Long(_), VectorRef::Short(_))))
                    }
                    TrialMode::ShortShort => {
                        assert!(matches!((t.enroll, t.test), (VectorRef::Short(_), VectorRef::Short(_))))
                    }
                }
            }
        }
    }
}
