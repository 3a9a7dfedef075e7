//! Conditional Wasserstein GAN with a multi-task generator objective.
//!
//! The generator `G` maps `[x ‖ z]` (short-utterance vector, Gaussian noise)
//! to a compensated vector. The critic `D` scores `[x ‖ candidate]` and is
//! trained to separate real long-utterance vectors from generated ones, with
//! its parameters clipped after every update. `G` minimizes
//! `a·adv + b·cos + c·ce`, where the cross-entropy comes from a speaker
//! classifier `G_sup` stacked on top of `G` and trained jointly with it.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Gradients, Mlp, OutputLoss};
use crate::optim::{clip_parameters, rmsprop_step, RmsPropState, DEFAULT_DECAY, DEFAULT_EPSILON};
use crate::scalar::{compensated_sum, lit, Scalar};
use crate::synth::UtterancePair;
use crate::vecspace::{cosine_distance_view, normalize_view, IVector};

/// Weights `(a, b, c)` of the adversarial, cosine and cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adversarial: f64,
    pub cosine: f64,
    pub cross_entropy: f64,
}

impl LossWeights {
    /// The full multi-task objective, 4:7:1.
    pub const D_WCGAN: LossWeights = LossWeights {
        adversarial: 4.0,
        cosine: 7.0,
        cross_entropy: 1.0,
    };

    /// Same generator without the critic term.
    pub const SINGLE_G: LossWeights = LossWeights {
        adversarial: 0.0,
        cosine: 7.0,
        cross_entropy: 1.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub noise_sigma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_c: f64,
    pub weights: LossWeights,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub epochs: usize,
    pub num_speakers: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Hidden width of `G_sup`; `None` means one unit per speaker.
    pub supplement_hidden: Option<usize>,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 50,
            noise_sigma: 0.5,
            batch_size: 64,
            lr: 1e-4,
            clip_c: 0.01,
            weights: LossWeights::D_WCGAN,
            n_critic: 5,
            epochs: 20,
            num_speakers: 80,
            generator_hidden: vec![512; 3],
            critic_hidden: vec![512; 4],
            supplement_hidden: None,
            rms_decay: DEFAULT_DECAY,
            rms_epsilon: DEFAULT_EPSILON,
            seed: 1,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.noise_dim == 0 || self.batch_size == 0 || self.n_critic == 0 || self.num_speakers == 0 {
            return fail("noise_dim, batch_size, n_critic and num_speakers must be positive");
        }
        if !(self.noise_sigma > 0.0) || !(self.lr > 0.0) || !(self.clip_c > 0.0) {
            return fail("noise_sigma, lr and clip_c must be positive");
        }
        let w = self.weights;
        let ws = [w.adversarial, w.cosine, w.cross_entropy];
        if ws.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || ws.iter().all(|v| *v == 0.0) {
            return fail("loss weights must be non-negative with at least one positive");
        }
        if self.generator_hidden.contains(&0) || self.critic_hidden.contains(&0) || self.supplement_hidden == Some(0) {
            return fail("hidden widths must be positive");
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) || !(self.rms_epsilon > 0.0) {
            return fail("RMSProp decay must lie in (0, 1) and epsilon be positive");
        }
        Ok(())
    }

    pub fn critic_enabled(&self) -> bool {
        self.weights.adversarial > 0.0
    }
}

/// Generator, speaker head and critic.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModels<T> {
    pub generator: Mlp<T>,
    pub supplement: Mlp<T>,
    pub critic: Mlp<T>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn hidden_stack(input: usize, hidden: &[usize], output: usize, last: Activation) -> (Vec<usize>, Vec<Activation>) {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    let mut acts = vec![Activation::leaky_relu(); hidden.len()];
    acts.push(last);
    (sizes, acts)
}

/// Builds `G: [dim+noise] → hidden → dim (tanh)`, `G_sup: dim → H → speakers (softmax)`
/// and `D: [2·dim] → hidden → 1 (linear)`, hidden layers leaky ReLU.
pub fn build_models<T: Scalar>(dim: usize, config: &GanConfig) -> Result<GanModels<T>> {
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }
    config.validate()?;
    let (g_sizes, g_acts) = hidden_stack(dim + config.noise_dim, &config.generator_hidden, dim, Activation::Tanh);
    let sup_hidden = config.supplement_hidden.unwrap_or(config.num_speakers);
    let (s_sizes, s_acts) = hidden_stack(dim, &[sup_hidden], config.num_speakers, Activation::Softmax);
    let (d_sizes, d_acts) = hidden_stack(2 * dim, &config.critic_hidden, 1, Activation::Linear);
    Ok(GanModels {
        generator: Mlp::init(&g_sizes, &g_acts, &mut rng_stream(config.seed, 1))?,
        supplement: Mlp::init(&s_sizes, &s_acts, &mut rng_stream(config.seed, 2))?,
        critic: Mlp::init(&d_sizes, &d_acts, &mut rng_stream(config.seed, 3))?,
    })
}

impl<T: Scalar> GanModels<T> {
    /// Embedding dimension the models were built for.
    pub fn dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.generator.input_dim() - self.dim()
    }

    pub fn num_speakers(&self) -> usize {
        self.supplement.output_dim()
    }

    /// Checks the architectural invariants of a (possibly loaded) model set.
    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        let bad = |msg: &str| Err(Error::Shape(msg.to_string()));
        if self.generator.input_dim() <= dim {
            return bad("generator input must hold the vector and a noise block");
        }
        if self.generator.activations().last() != Some(&Activation::Tanh) {
            return bad("generator output activation must be tanh");
        }
        if self.supplement.input_dim() != dim || self.supplement.activations().last() != Some(&Activation::Softmax) {
            return bad("speaker head must map generated vectors to a softmax");
        }
        if self.critic.input_dim() != 2 * dim
            || self.critic.output_dim() != 1
            || self.critic.activations().last() != Some(&Activation::Linear)
        {
            return bad("critic must map two concatenated vectors to one linear unit");
        }
        Ok(())
    }
}

/// `count × noise_dim` i.i.d. `N(0, σ²)` draws.
pub fn sample_noise<T: Scalar>(count: usize, config: &GanConfig, rng: &mut ChaCha8Rng) -> Array2<T> {
    sample_noise_with(count, config.noise_dim, config.noise_sigma, rng)
}

fn sample_noise_with<T: Scalar>(count: usize, width: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((count, width), || {
        let v: f64 = StandardNormal.sample(rng);
        lit(v * sigma)
    })
}

fn concat_columns<T: Scalar>(left: ArrayView2<'_, T>, right: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if left.nrows() != right.nrows() {
        return Err(Error::Shape(format!("batch sizes differ: {} vs {}", left.nrows(), right.nrows())));
    }
    Ok(concatenate(Axis(1), &[left, right]).expect("row counts checked"))
}

fn check_width<T>(batch: &ArrayView2<'_, T>, expected: usize) -> Result<()> {
    if batch.ncols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: batch.ncols(),
        });
    }
    Ok(())
}

/// `G([x ‖ z])`.
pub fn g_forward<T: Scalar>(models: &GanModels<T>, x: ArrayView2<'_, T>, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_width(&x, models.dim())?;
    check_width(&z, models.noise_dim())?;
    models.generator.predict(concat_columns(x, z)?.view())
}

fn critic_scores<T: Scalar>(critic: &Mlp<T>, x: ArrayView2<'_, T>, candidate: ArrayView2<'_, T>) -> Result<Array1<T>> {
    let out = critic.predict(concat_columns(x, candidate)?.view())?;
    Ok(out.column(0).to_owned())
}

fn mean<T: Scalar>(values: ArrayView1<'_, T>) -> T {
    compensated_sum(values.iter().copied()) / lit(values.len() as f64)
}

/// `mean D(y|x) − mean D(ŷ|x)`: the quantity the critic ascends.
pub fn critic_objective<T: Scalar>(
    models: &GanModels<T>,
    x: ArrayView2<'_, T>,
    y: ArrayView2<'_, T>,
    yhat: ArrayView2<'_, T>,
) -> Result<T> {
    let dim = models.dim();
    for b in [&x, &y, &yhat] {
        check_width(b, dim)?;
    }
    if y.nrows() != x.nrows() || yhat.nrows() != x.nrows() {
        return Err(Error::Shape("critic batches must have equal size".into()));
    }
    let real = critic_scores(&models.critic, x, y)?;
    let fake = critic_scores(&models.critic, x, yhat)?;
    Ok(mean(real.view()) - mean(fake.view()))
}

/// Loss on the critic's output for a stacked batch `[real; fake]`:
/// `−(mean real − mean fake)`.
#[derive(Debug, Clone, Copy)]
pub struct CriticLoss {
    pub real_rows: usize,
}

impl<T: Scalar> OutputLoss<T> for CriticLoss {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        let n = self.real_rows;
        if output.ncols() != 1 || output.nrows() != 2 * n || n == 0 {
            return Err(Error::Shape("critic output must stack equal real and fake halves".into()));
        }
        let real = mean(output.slice(s![..n, 0]));
        let fake = mean(output.slice(s![n.., 0]));
        let inv: T = T::one() / lit(n as f64);
        let mut grad = Array2::from_elem(output.raw_dim(), inv);
        grad.slice_mut(s![..n, ..]).fill(-inv);
        Ok((fake - real, grad))
    }
}

/// Adversarial generator term `−mean D(g|x)` as a function of the generator output.
/// The gradient reaches `g` through the critic; critic parameters are untouched.
pub struct AdversarialTerm<'a, T> {
    pub critic: &'a Mlp<T>,
    pub conditions: ArrayView2<'a, T>,
}

impl<T: Scalar> OutputLoss<T> for AdversarialTerm<'_, T> {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        let dim = self.conditions.ncols();
        check_width(&output, dim)?;
        let input = concat_columns(self.conditions, output)?;
        let cache = self.critic.forward(input.view())?;
        let n = output.nrows();
        let value = -mean(cache.output().column(0));
        let upstream = Array2::from_elem((n, 1), -T::one() / lit(n as f64));
        let (_, dinput) = self.critic.backward(&cache, upstream.view())?;
        Ok((value, dinput.slice(s![.., dim..]).to_owned()))
    }

    fn kink_signature(&self, output: ArrayView2<'_, T>) -> Result<Vec<bool>> {
        let mut sig = Vec::new();
        self.critic
            .predict_with_kinks(concat_columns(self.conditions, output)?.view(), &mut sig)?;
        Ok(sig)
    }
}

/// Mean cosine distance between generated rows and their targets.
pub struct CosineTerm<'a, T> {
    pub targets: ArrayView2<'a, T>,
}

impl<T: Scalar> OutputLoss<T> for CosineTerm<'_, T> {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        if output.dim() != self.targets.dim() {
            return Err(Error::Shape(format!(
                "generated batch {:?} vs targets {:?}",
                output.dim(),
                self.targets.dim()
            )));
        }
        let n: T = lit(output.nrows() as f64);
        let mut terms = Vec::with_capacity(output.nrows());
        let mut grad = Array2::zeros(output.raw_dim());
        for ((g, y), mut dg) in output.rows().into_iter().zip(self.targets.rows()).zip(grad.rows_mut()) {
            let gn = g.dot(&g).sqrt();
            let yn = y.dot(&y).sqrt();
            if gn == T::zero() || yn == T::zero() {
                return Err(Error::ZeroNorm);
            }
            let cos = g.dot(&y) / (gn * yn);
            terms.push(T::one() - cos);
            // ∂(1 − cos)/∂g = −(y/(|g||y|) − cos·g/|g|²)
            let a = -T::one() / (gn * yn * n);
            let b = cos / (gn * gn * n);
            dg.zip_mut_with(&g, |d, &gi| *d = b * gi);
            dg.scaled_add(a, &y);
        }
        Ok((compensated_sum(terms) / n, grad))
    }
}

/// `mean(1 − cos(generated_i, target_i))`.
pub fn cosine_loss<T: Scalar>(generated: ArrayView2<'_, T>, targets: ArrayView2<'_, T>) -> Result<T> {
    CosineTerm { targets }.evaluate(generated).map(|(v, _)| v)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Cross-entropy on class probabilities: `mean −ln p[label]`.
pub struct SoftmaxCrossEntropy<'a> {
    pub labels: &'a [usize],
}

impl<T: Scalar> OutputLoss<T> for SoftmaxCrossEntropy<'_> {
    fn evaluate(&self, probs: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        check_labels(self.labels, probs.nrows(), probs.ncols())?;
        let n: T = lit(probs.nrows() as f64);
        let mut grad = Array2::zeros(probs.raw_dim());
        let mut terms = Vec::with_capacity(self.labels.len());
        for (i, &k) in self.labels.iter().enumerate() {
            let p = probs[[i, k]];
            terms.push(-p.ln());
            grad[[i, k]] = -T::one() / (n * p);
        }
        let value = compensated_sum(terms) / n;
        if !value.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        Ok((value, grad))
    }
}

/// Speaker cross-entropy of `G_sup(g)` as a function of the generator output.
pub struct CrossEntropyTerm<'a, T> {
    pub supplement: &'a Mlp<T>,
    pub labels: &'a [usize],
}

impl<T: Scalar> CrossEntropyTerm<'_, T> {
    /// Value, gradient w.r.t. the generator output, and `G_sup` parameter gradients.
    pub fn evaluate_full(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>, Gradients<T>)> {
        let cache = self.supplement.forward(output)?;
        let (value, upstream) = SoftmaxCrossEntropy { labels: self.labels }.evaluate(cache.output().view())?;
        let (grads, dinput) = self.supplement.backward(&cache, upstream.view())?;
        Ok((value, dinput, grads))
    }
}

impl<T: Scalar> OutputLoss<T> for CrossEntropyTerm<'_, T> {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        self.evaluate_full(output).map(|(v, g, _)| (v, g))
    }

    fn kink_signature(&self, output: ArrayView2<'_, T>) -> Result<Vec<bool>> {
        let mut sig = Vec::new();
        self.supplement.predict_with_kinks(output, &mut sig)?;
        Ok(sig)
    }
}

/// `mean −ln G_sup(generated)[label]`.
pub fn ce_loss<T: Scalar>(models: &GanModels<T>, generated: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
    check_labels(labels, generated.nrows(), models.num_speakers())?;
    CrossEntropyTerm {
        supplement: &models.supplement,
        labels,
    }
    .evaluate(generated)
    .map(|(v, _)| v)
}

/// `−mean D(G(z|x)|x)`.
pub fn g_adversarial_loss<T: Scalar>(models: &GanModels<T>, x: ArrayView2<'_, T>, z: ArrayView2<'_, T>) -> Result<T> {
    let generated = g_forward(models, x, z)?;
    let scores = critic_scores(&models.critic, x, generated.view())?;
    Ok(-mean(scores.view()))
}

/// `a·adv + (b·cos + c·ce)`.
pub fn combined_g_loss<T: Scalar>(adversarial: T, cosine: T, cross_entropy: T, weights: LossWeights) -> T {
    let a: T = lit(weights.adversarial);
    let b: T = lit(weights.cosine);
    let c: T = lit(weights.cross_entropy);
    a * adversarial + (b * cosine + c * cross_entropy)
}

/// Per-term values of one generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLosses<T> {
    pub adversarial: T,
    pub cosine: T,
    pub cross_entropy: T,
    pub combined: T,
}

/// Full weighted generator objective on the generator output. Terms with
/// zero weight are neither evaluated nor differentiated and report 0.
pub struct GeneratorObjective<'a, T> {
    pub models: &'a GanModels<T>,
    pub conditions: ArrayView2<'a, T>,
    pub targets: ArrayView2<'a, T>,
    pub labels: &'a [usize],
    pub weights: LossWeights,
}

impl<T: Scalar> GeneratorObjective<'_, T> {
    pub fn evaluate_full(&self, output: ArrayView2<'_, T>) -> Result<(GeneratorLosses<T>, Array2<T>, Option<Gradients<T>>)> {
        let w = self.weights;
        let mut grad = Array2::zeros(output.raw_dim());
        let mut adversarial = T::zero();
        let mut cosine = T::zero();
        let mut cross_entropy = T::zero();
        let mut sup_grads = None;
        if w.adversarial > 0.0 {
            let (v, g) = AdversarialTerm {
                critic: &self.models.critic,
                conditions: self.conditions,
            }
            .evaluate(output)?;
            adversarial = v;
            grad.scaled_add(lit(w.adversarial), &g);
        }
        if w.cosine > 0.0 {
            let (v, g) = CosineTerm { targets: self.targets }.evaluate(output)?;
            cosine = v;
            grad.scaled_add(lit(w.cosine), &g);
        }
        if w.cross_entropy > 0.0 {
            let (v, g, mut sg) = CrossEntropyTerm {
                supplement: &self.models.supplement,
                labels: self.labels,
            }
            .evaluate_full(output)?;
            cross_entropy = v;
            grad.scaled_add(lit(w.cross_entropy), &g);
            let c: T = lit(w.cross_entropy);
            for (gw, gb) in &mut sg.layers {
                gw.mapv_inplace(|v| v * c);
                gb.mapv_inplace(|v| v * c);
            }
            sup_grads = Some(sg);
        }
        let losses = GeneratorLosses {
            adversarial,
            cosine,
            cross_entropy,
            combined: combined_g_loss(adversarial, cosine, cross_entropy, w),
        };
        Ok((losses, grad, sup_grads))
    }
}

impl<T: Scalar> OutputLoss<T> for GeneratorObjective<'_, T> {
    fn evaluate(&self, output: ArrayView2<'_, T>) -> Result<(T, Array2<T>)> {
        self.evaluate_full(output).map(|(l, g, _)| (l.combined, g))
    }

    fn kink_signature(&self, output: ArrayView2<'_, T>) -> Result<Vec<bool>> {
        let mut sig = AdversarialTerm {
            critic: &self.models.critic,
            conditions: self.conditions,
        }
        .kink_signature(output)?;
        sig.extend(
            CrossEntropyTerm {
                supplement: &self.models.supplement,
                labels: self.labels,
            }
            .kink_signature(output)?,
        );
        Ok(sig)
    }
}

/// Noise used when transforming vectors at test time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePolicy {
    /// `z = 0`; deterministic.
    Zero,
    /// Average of `samples` outputs with independent noise drawn from `seed`.
    Average { samples: usize, sigma: f64, seed: u64 },
}

/// `normalize(G([x ‖ z]))` for one explicit noise vector.
pub fn transform_with_noise<T: Scalar>(models: &GanModels<T>, x: &IVector<T>, z: ArrayView1<'_, T>) -> Result<IVector<T>> {
    let xs = x.view().insert_axis(Axis(0));
    let zs = z.insert_axis(Axis(0));
    let out = g_forward(models, xs, zs)?;
    IVector::new(normalize_view(out.row(0))?)
}

pub fn transform_ivector<T: Scalar>(models: &GanModels<T>, x: &IVector<T>, policy: &NoisePolicy) -> Result<IVector<T>> {
    let xs = x.view().insert_axis(Axis(0)).to_owned();
    let out = transform_batch(models, xs.view(), policy)?;
    IVector::new(out.row(0).to_owned())
}

/// Row-wise transform of a batch; rows of the result have unit norm.
pub fn transform_batch<T: Scalar>(models: &GanModels<T>, xs: ArrayView2<'_, T>, policy: &NoisePolicy) -> Result<Array2<T>> {
    check_width(&xs, models.dim())?;
    let n = xs.nrows();
    let raw = match *policy {
        NoisePolicy::Zero => g_forward(models, xs, Array2::zeros((n, models.noise_dim())).view())?,
        NoisePolicy::Average { samples, sigma, seed } => {
            if samples == 0 {
                return Err(Error::InvalidConfig("noise averaging needs at least one sample".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = Array2::zeros((n, models.dim()));
            for _ in 0..samples {
                let z: Array2<T> = sample_noise_with(n, models.noise_dim(), sigma, &mut rng);
                acc += &g_forward(models, xs, z.view())?;
            }
            acc / lit::<T>(samples as f64)
        }
    };
    let mut out = Array2::zeros(raw.raw_dim());
    for (src, mut dst) in raw.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&normalize_view(src)?);
    }
    Ok(out)
}

/// Maps one i-vector to another; implemented by the trained generator.
pub trait VectorTransform<T> {
    fn transform(&self, x: &IVector<T>) -> Result<IVector<T>>;
}

/// A generator together with its test-time noise policy.
pub struct GanTransform<'a, T> {
    pub models: &'a GanModels<T>,
    pub policy: NoisePolicy,
}

impl<T: Scalar> VectorTransform<T> for GanTransform<'_, T> {
    fn transform(&self, x: &IVector<T>) -> Result<IVector<T>> {
        transform_ivector(self.models, x, &self.policy)
    }
}

/// Memoizes a generator transform by the exact bits of each input vector.
///
/// [`CachedTransform::prime`] fills the cache with one batched forward pass,
/// which is much cheaper than transforming trial vectors one at a time.
pub struct CachedTransform<'a, T> {
    inner: GanTransform<'a, T>,
    cache: RefCell<HashMap<Vec<u64>, IVector<T>>>,
}

fn bit_key<T: Scalar>(v: ArrayView1<'_, T>) -> Vec<u64> {
    v.iter().map(|x| x.to_f64_lossy().to_bits()).collect()
}

impl<'a, T: Scalar> CachedTransform<'a, T> {
    pub fn new(models: &'a GanModels<T>, policy: NoisePolicy) -> Self {
        Self {
            inner: GanTransform { models, policy },
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Transforms all not-yet-cached vectors in one batch.
    pub fn prime<'v>(&self, vectors: impl IntoIterator<Item = &'v IVector<T>>) -> Result<()>
    where
        T: 'v,
    {
        let mut cache = self.cache.borrow_mut();
        let mut pending: Vec<&IVector<T>> = Vec::new();
        let mut seen = HashSet::new();
        for v in vectors {
            let key = bit_key(v.view());
            if !cache.contains_key(&key) && seen.insert(key) {
                pending.push(v);
            }
        }
        if pending.is_empty() {
            return Ok(());
        }
        let dim = self.inner.models.dim();
        let mut xs = Array2::<T>::zeros((pending.len(), dim));
        for (i, v) in pending.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            xs.row_mut(i).assign(v.as_array());
        }
        let out = transform_batch(self.inner.models, xs.view(), &self.inner.policy)?;
        for (v, row) in pending.iter().zip(out.rows()) {
            cache.insert(bit_key(v.view()), IVector::new(row.to_owned())?);
        }
        Ok(())
    }

    pub fn cached_count(&self) -> usize {
        self.cache.borrow().len()
    }
}

impl<T: Scalar> VectorTransform<T> for CachedTransform<'_, T> {
    fn transform(&self, x: &IVector<T>) -> Result<IVector<T>> {
        let key = bit_key(x.view());
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let out = self.inner.transform(x)?;
        self.cache.borrow_mut().insert(key, out.clone());
        Ok(out)
    }
}

/// Mean `cosine_distance(G(x|z=0), y)` over pairs.
pub fn mean_transformed_cosine_distance<T: Scalar>(models: &GanModels<T>, pairs: &[UtterancePair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let (x, y, _) = stack_pairs(pairs, &(0..pairs.len()).collect::<Vec<_>>())?;
    let generated = transform_batch(models, x.view(), &NoisePolicy::Zero)?;
    let mut total = 0.0;
    for (g, t) in generated.rows().into_iter().zip(y.rows()) {
        total += cosine_distance_view(g, t)?.to_f64_lossy();
    }
    Ok(total / pairs.len() as f64)
}

/// Mean `cosine_distance(x, y)` over pairs, the untransformed reference.
pub fn mean_raw_cosine_distance<T: Scalar>(pairs: &[UtterancePair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += cosine_distance_view(p.short_vec.view(), p.long_vec.view())?.to_f64_lossy();
    }
    Ok(total / pairs.len() as f64)
}

/// Nested average: mean over long utterances of the mean over their segments.
pub fn nested_cosine_loss<T: Scalar>(models: &GanModels<T>, pairs: &[UtterancePair<T>]) -> Result<f64> {
    use std::collections::BTreeMap;
    if pairs.is_empty() {
        return Err(Error::InsufficientData("no pairs to evaluate".into()));
    }
    let (x, y, _) = stack_pairs(pairs, &(0..pairs.len()).collect::<Vec<_>>())?;
    let generated = transform_batch(models, x.view(), &NoisePolicy::Zero)?;
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let d = cosine_distance_view(generated.row(i), y.row(i))?.to_f64_lossy();
        let e = groups.entry(p.long_index).or_default();
        e.0 += d;
        e.1 += 1;
    }
    Ok(groups.values().map(|(s, n)| s / *n as f64).sum::<f64>() / groups.len() as f64)
}

fn stack_pairs<T: Scalar>(pairs: &[UtterancePair<T>], indices: &[usize]) -> Result<(Array2<T>, Array2<T>, Vec<usize>)> {
    let dim = pairs[0].short_vec.dim();
    let mut x = Array2::zeros((indices.len(), dim));
    let mut y = Array2::zeros((indices.len(), dim));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let p = &pairs[i];
        if p.short_vec.dim() != dim || p.long_vec.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.short_vec.dim().max(p.long_vec.dim()),
            });
        }
        x.row_mut(row).assign(p.short_vec.as_array());
        y.row_mut(row).assign(p.long_vec.as_array());
        labels.push(p.speaker);
    }
    Ok((x, y, labels))
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean critic objective measured before each critic update; 0 when the critic is disabled.
    pub critic_objective: f64,
    pub generator_adversarial: f64,
    pub cosine: f64,
    pub cross_entropy: f64,
    pub combined: f64,
    pub heldout_cosine_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePhase {
    Critic,
    Generator,
}

/// Hook called after every parameter update during training.
pub trait TrainObserver<T> {
    fn after_update(&mut self, phase: UpdatePhase, epoch: usize, models: &GanModels<T>) -> Result<()>;
}

impl<T> TrainObserver<T> for () {
    fn after_update(&mut self, _: UpdatePhase, _: usize, _: &GanModels<T>) -> Result<()> {
        Ok(())
    }
}

/// Owns the models and optimizer states for one training run.
pub struct GanTrainer<'a, T> {
    config: &'a GanConfig,
    pairs: &'a [UtterancePair<T>],
    heldout: &'a [UtterancePair<T>],
    models: GanModels<T>,
    generator_state: RmsPropState<T>,
    supplement_state: RmsPropState<T>,
    critic_state: RmsPropState<T>,
    rng: ChaCha8Rng,
    history: TrainHistory,
}

impl<'a, T: Scalar> GanTrainer<'a, T> {
    /// `heldout` pairs feed the per-epoch compensation metric; when empty the
    /// training pairs are used instead.
    pub fn new(pairs: &'a [UtterancePair<T>], heldout: &'a [UtterancePair<T>], config: &'a GanConfig) -> Result<Self> {
        config.validate()?;
        if pairs.len() < config.batch_size {
            return Err(Error::InsufficientData(format!(
                "{} training pairs for batch size {}",
                pairs.len(),
                config.batch_size
            )));
        }
        let dim = pairs[0].short_vec.dim();
        for p in pairs.iter().chain(heldout) {
            if p.short_vec.dim() != dim || p.long_vec.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: p.short_vec.dim().max(p.long_vec.dim()),
                });
            }
        }
        if let Some(p) = pairs.iter().find(|p| p.speaker >= config.num_speakers) {
            return Err(Error::LabelOutOfRange {
                label: p.speaker,
                classes: config.num_speakers,
            });
        }
        let models = build_models(dim, config)?;
        let state = |net: &Mlp<T>| RmsPropState::new(net, config.rms_decay, config.rms_epsilon);
        Ok(Self {
            generator_state: state(&models.generator)?,
            supplement_state: state(&models.supplement)?,
            critic_state: state(&models.critic)?,
            models,
            config,
            pairs,
            heldout,
            rng: rng_stream(config.seed, 4),
            history: TrainHistory::default(),
        })
    }

    pub fn models(&self) -> &GanModels<T> {
        &self.models
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    /// One critic step on a fresh random batch: ascend the critic objective,
    /// then clip. Returns the objective measured before the step.
    pub fn critic_update(&mut self) -> Result<T> {
        let n = self.config.batch_size;
        let picked = sample(&mut self.rng, self.pairs.len(), n).into_vec();
        let (x, y, _) = stack_pairs(self.pairs, &picked)?;
        let z: Array2<T> = sample_noise(n, self.config, &mut self.rng);
        let fake = g_forward(&self.models, x.view(), z.view())?;
        let real_in = concat_columns(x.view(), y.view())?;
        let fake_in = concat_columns(x.view(), fake.view())?;
        let stacked = concatenate(Axis(0), &[real_in.view(), fake_in.view()]).expect("equal widths");
        let cache = self.models.critic.forward(stacked.view())?;
        let (loss, upstream) = CriticLoss { real_rows: n }.evaluate(cache.output().view())?;
        let (grads, _) = self.models.critic.backward(&cache, upstream.view())?;
        rmsprop_step(&mut self.models.critic, &grads, &mut self.critic_state, lit(self.config.lr))?;
        clip_parameters(&mut self.models.critic, lit(self.config.clip_c));
        Ok(-loss)
    }

    /// Joint step of `G` and `G_sup` on the given pair indices.
    pub fn generator_update(&mut self, indices: &[usize]) -> Result<GeneratorLosses<T>> {
        let (x, y, labels) = stack_pairs(self.pairs, indices)?;
        let z: Array2<T> = sample_noise(indices.len(), self.config, &mut self.rng);
        let g_in = concat_columns(x.view(), z.view())?;
        let cache = self.models.generator.forward(g_in.view())?;
        let objective = GeneratorObjective {
            models: &self.models,
            conditions: x.view(),
            targets: y.view(),
            labels: &labels,
            weights: self.config.weights,
        };
        let (losses, upstream, sup_grads) = objective.evaluate_full(cache.output().view())?;
        let (g_grads, _) = self.models.generator.backward(&cache, upstream.view())?;
        let lr: T = lit(self.config.lr);
        if !g_grads.is_finite() || sup_grads.as_ref().is_some_and(|g| !g.is_finite()) {
            return Err(Error::NonFinite("generator gradient".into()));
        }
        rmsprop_step(&mut self.models.generator, &g_grads, &mut self.generator_state, lr)?;
        if let Some(sg) = sup_grads {
            rmsprop_step(&mut self.models.supplement, &sg, &mut self.supplement_state, lr)?;
        }
        Ok(losses)
    }

    fn run_epoch_inner(&mut self, epoch: usize, observer: &mut dyn TrainObserver<T>) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut critic_sum = 0.0;
        let mut critic_steps = 0usize;
        let mut sums = [0.0f64; 4];
        let mut g_steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.critic_enabled() {
                for _ in 0..self.config.n_critic {
                    critic_sum += self.critic_update()?.to_f64_lossy();
                    critic_steps += 1;
                    observer.after_update(UpdatePhase::Critic, epoch, &self.models)?;
                }
            }
            let l = self.generator_update(chunk)?;
            for (s, v) in sums.iter_mut().zip([l.adversarial, l.cosine, l.cross_entropy, l.combined]) {
                *s += v.to_f64_lossy();
            }
            g_steps += 1;
            observer.after_update(UpdatePhase::Generator, epoch, &self.models)?;
        }
        let heldout = if self.heldout.is_empty() { self.pairs } else { self.heldout };
        let g = g_steps as f64;
        let record = EpochRecord {
            epoch,
            critic_objective: if critic_steps > 0 { critic_sum / critic_steps as f64 } else { 0.0 },
            generator_adversarial: sums[0] / g,
            cosine: sums[1] / g,
            cross_entropy: sums[2] / g,
            combined: sums[3] / g,
            heldout_cosine_distance: mean_transformed_cosine_distance(&self.models, heldout)?,
        };
        let values = [
            record.critic_objective,
            record.generator_adversarial,
            record.cosine,
            record.cross_entropy,
            record.combined,
            record.heldout_cosine_distance,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("epoch summary".into()));
        }
        Ok(record)
    }

    /// One pass over the shuffled pairs. Numeric failures become
    /// [`Error::Divergence`] tagged with the epoch index.
    pub fn run_epoch(&mut self, observer: &mut dyn TrainObserver<T>) -> Result<EpochRecord> {
        let epoch = self.history.epochs.len();
        let record = self.run_epoch_inner(epoch, observer).map_err(|e| match e {
            Error::NonFinite(detail) | Error::NotPositiveDefinite(detail) => Error::Divergence { epoch, detail },
            Error::ZeroNorm | Error::ZeroVector => Error::Divergence {
                epoch,
                detail: "generator produced a zero vector".into(),
            },
            other => other,
        })?;
        self.history.epochs.push(record);
        Ok(record)
    }

    pub fn into_parts(self) -> (GanModels<T>, TrainHistory) {
        (self.models, self.history)
    }
}

/// Trains for `config.epochs` epochs. Per generator batch: `n_critic` clipped
/// critic updates (skipped when the adversarial weight is 0), then one joint
/// `G`/`G_sup` update on the weighted objective.
pub fn train_gan<T: Scalar>(
    pairs: &[UtterancePair<T>],
    heldout: &[UtterancePair<T>],
    config: &GanConfig,
) -> Result<(GanModels<T>, TrainHistory)> {
    train_gan_observed(pairs, heldout, config, &mut ())
}

pub fn train_gan_observed<T: Scalar>(
    pairs: &[UtterancePair<T>],
    heldout: &[UtterancePair<T>],
    config: &GanConfig,
    observer: &mut dyn TrainObserver<T>,
) -> Result<(GanModels<T>, TrainHistory)> {
    let mut trainer = GanTrainer::new(pairs, heldout, config)?;
    for _ in 0..config.epochs {
        trainer.run_epoch(observer)?;
    }
    Ok(trainer.into_parts())
}
