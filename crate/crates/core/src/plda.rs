//! Two-covariance PLDA back-end.
//!
//! The generative model is `w = m + V y + ε` with `y ~ N(0, I_q)` and
//! `ε ~ N(0, Σ)`. Channel variability is not modelled by a separate
//! eigenchannel matrix; it lives in the full residual covariance `Σ`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky, cholesky_solve, inverse_quadratic_form, log_det_from_cholesky, max_asymmetry, spd_inverse,
    symmetric_eigen, symmetrize,
};
use crate::scalar::{compensated_sum, lit, Scalar};
use crate::vecspace::IVector;

/// Largest asymmetry tolerated in a supplied residual covariance.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Trained PLDA parameters plus the matrices needed for closed-form scoring.
///
/// `mean` is `m`, `speaker_subspace` is `V` (dim × q, the eigenvoices) and
/// `residual_cov` is `Σ`, which also absorbs the eigenchannel term.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel<T> {
    mean: IVector<T>,
    speaker_subspace: Array2<T>,
    residual_cov: Array2<T>,
    scoring: Scoring<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Scoring<T> {
    q_mat: Array2<T>,
    p_mat: Array2<T>,
    constant: T,
}

impl<T: Scalar> PldaModel<T> {
    /// Builds a model from explicit parameters.
    ///
    /// `V` may be rank deficient (including all zeros or zero columns); only
    /// [`train_plda`] insists on full column rank.
    pub fn new(mean: IVector<T>, speaker_subspace: Array2<T>, residual_cov: Array2<T>) -> Result<Self> {
        let dim = mean.dim();
        if speaker_subspace.nrows() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: speaker_subspace.nrows(),
            });
        }
        if speaker_subspace.ncols() > dim {
            return Err(Error::InvalidConfig(format!(
                "speaker subspace rank {} exceeds dimension {dim}",
                speaker_subspace.ncols()
            )));
        }
        if residual_cov.dim() != (dim, dim) {
            return Err(Error::Shape(format!(
                "residual covariance is {:?}, expected {dim}x{dim}",
                residual_cov.dim()
            )));
        }
        if speaker_subspace.iter().chain(residual_cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PLDA parameters".into()));
        }
        let asym = max_asymmetry(residual_cov.view()).to_f64_lossy();
        if asym > SYMMETRY_TOLERANCE {
            return Err(Error::NotPositiveDefinite(format!("residual covariance asymmetric by {asym:e}")));
        }
        cholesky(residual_cov.view())?;
        let scoring = Scoring::build(speaker_subspace.view(), residual_cov.view())?;
        Ok(Self {
            mean,
            speaker_subspace,
            residual_cov,
            scoring,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }

    /// Speaker-factor dimension.
    pub fn q(&self) -> usize {
        self.speaker_subspace.ncols()
    }

    pub fn mean(&self) -> &IVector<T> {
        &self.mean
    }

    pub fn speaker_subspace(&self) -> &Array2<T> {
        &self.speaker_subspace
    }

    pub fn residual_cov(&self) -> &Array2<T> {
        &self.residual_cov
    }

    /// `V Vᵀ`, the between-speaker covariance.
    pub fn between_cov(&self) -> Array2<T> {
        self.speaker_subspace.dot(&self.speaker_subspace.t())
    }

    /// `V Vᵀ + Σ`, the marginal covariance of one observation.
    pub fn total_cov(&self) -> Array2<T> {
        self.between_cov() + &self.residual_cov
    }

    pub fn cast<U: Scalar>(&self) -> Result<PldaModel<U>> {
        let conv = |a: &Array2<T>| a.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
        PldaModel::new(self.mean.cast(), conv(&self.speaker_subspace), conv(&self.residual_cov))
    }

    /// LLR on raw views; callers must have checked dimensions.
    pub(crate) fn llr_view(&self, enroll: ArrayView1<'_, T>, test: ArrayView1<'_, T>) -> T {
        let a = &enroll - self.mean.as_array();
        let b = &test - self.mean.as_array();
        let half: T = lit(0.5);
        let s = &self.scoring;
        half * a.dot(&s.q_mat.dot(&a)) + half * b.dot(&s.q_mat.dot(&b)) + a.dot(&s.p_mat.dot(&b)) + s.constant
    }
}

impl<T: Scalar> Scoring<T> {
    fn build(v: ArrayView2<'_, T>, sigma: ArrayView2<'_, T>) -> Result<Self> {
        let between = v.dot(&v.t());
        let total = symmetrize((&between + &sigma).view());
        let total_inv = spd_inverse(total.view())?;
        let total_chol = cholesky(total.view())?;
        // Conditional covariance of one observation given the other under
        // the same-speaker hypothesis.
        let cond = symmetrize((&total - &between.dot(&total_inv).dot(&between)).view());
        let cond_chol = cholesky(cond.view())?;
        let cond_inv = spd_inverse(cond.view())?;
        let q_mat = &total_inv - &cond_inv;
        let p_mat = symmetrize(total_inv.dot(&between).dot(&cond_inv).view());
        let half: T = lit(0.5);
        let constant = half * (log_det_from_cholesky(total_chol.view()) - log_det_from_cholesky(cond_chol.view()));
        Ok(Self {
            q_mat,
            p_mat,
            constant,
        })
    }
}

fn check_dims<T: Scalar>(model: &PldaModel<T>, v: &IVector<T>) -> Result<()> {
    if v.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: v.dim(),
        });
    }
    Ok(())
}

/// Same-speaker versus different-speaker log-likelihood ratio, in closed form.
pub fn plda_llr<T: Scalar>(model: &PldaModel<T>, enroll: &IVector<T>, test: &IVector<T>) -> Result<T> {
    check_dims(model, enroll)?;
    check_dims(model, test)?;
    Ok(model.llr_view(enroll.view(), test.view()))
}

/// Largest dimension accepted by [`llr_density_oracle`].
pub const ORACLE_MAX_DIM: usize = 16;

fn gaussian_log_density<T: Scalar>(x: ArrayView1<'_, T>, cov: ArrayView2<'_, T>) -> Result<T> {
    let l = cholesky(cov)?;
    let n: T = lit(x.len() as f64);
    let two_pi: T = lit(std::f64::consts::TAU);
    let half: T = lit(0.5);
    Ok(-half * (n * two_pi.ln() + log_det_from_cholesky(l.view()) + inverse_quadratic_form(l.view(), x)))
}

/// Reference LLR built from the explicit 2·dim joint Gaussians of both
/// hypotheses. Slow; meant for verifying [`plda_llr`].
pub fn llr_density_oracle<T: Scalar>(model: &PldaModel<T>, enroll: &IVector<T>, test: &IVector<T>) -> Result<T> {
    check_dims(model, enroll)?;
    check_dims(model, test)?;
    let d = model.dim();
    if d > ORACLE_MAX_DIM {
        return Err(Error::InvalidConfig(format!(
            "density oracle limited to dim <= {ORACLE_MAX_DIM}, got {d}"
        )));
    }
    let between = model.between_cov();
    let total = model.total_cov();
    let mut stacked = Array1::<T>::zeros(2 * d);
    for i in 0..d {
        stacked[i] = enroll.view()[i] - model.mean().view()[i];
        stacked[d + i] = test.view()[i] - model.mean().view()[i];
    }
    let mut same = Array2::<T>::zeros((2 * d, 2 * d));
    let mut diff = Array2::<T>::zeros((2 * d, 2 * d));
    for i in 0..d {
        for j in 0..d {
            same[[i, j]] = total[[i, j]];
            same[[d + i, d + j]] = total[[i, j]];
            same[[i, d + j]] = between[[i, j]];
            same[[d + i, j]] = between[[i, j]];
            diff[[i, j]] = total[[i, j]];
            diff[[d + i, d + j]] = total[[i, j]];
        }
    }
    let same = symmetrize(same.view());
    let diff = symmetrize(diff.view());
    Ok(gaussian_log_density(stacked.view(), same.view())? - gaussian_log_density(stacked.view(), diff.view())?)
}

/// EM settings for [`train_plda`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldaConfig {
    /// Speaker-factor dimension.
    pub q: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PldaConfig {
    fn default() -> Self {
        Self {
            q: 10,
            iterations: 20,
            seed: 1,
        }
    }
}

/// A trained model plus the training log-likelihood before the first and
/// after every EM iteration.
#[derive(Debug, Clone)]
pub struct PldaFit<T> {
    pub model: PldaModel<T>,
    pub log_likelihood: Vec<f64>,
}

struct SpeakerStats<T> {
    count: usize,
    sum: Array1<T>,
}

struct EmData<T> {
    centered: Array2<T>,
    speakers: Vec<SpeakerStats<T>>,
    scatter: Array2<T>,
}

/// Fits the PLDA model by EM. The mean is fixed at the sample mean.
pub fn train_plda<T: Scalar>(
    vectors: &[IVector<T>],
    labels: &[usize],
    q: usize,
    iterations: usize,
    seed: u64,
) -> Result<PldaModel<T>> {
    train_plda_with_history(vectors, labels, &PldaConfig { q, iterations, seed }).map(|fit| fit.model)
}

pub fn train_plda_with_history<T: Scalar>(
    vectors: &[IVector<T>],
    labels: &[usize],
    config: &PldaConfig,
) -> Result<PldaFit<T>> {
    let (mean, data) = prepare(vectors, labels)?;
    let dim = mean.dim();
    if config.q > dim {
        return Err(Error::InvalidConfig(format!("q = {} exceeds dimension {dim}", config.q)));
    }
    let (mut v, mut sigma) = initialize(&data, dim, config.q, config.seed)?;
    let mut history = vec![log_likelihood(&data, v.view(), sigma.view())?];
    for _ in 0..config.iterations {
        (v, sigma) = em_step(&data, v.view(), sigma.view())?;
        history.push(log_likelihood(&data, v.view(), sigma.view())?);
    }
    check_full_rank(v.view())?;
    let model = PldaModel::new(mean, v, sigma)?;
    Ok(PldaFit {
        model,
        log_likelihood: history,
    })
}

fn prepare<T: Scalar>(vectors: &[IVector<T>], labels: &[usize]) -> Result<(IVector<T>, EmData<T>)> {
    if vectors.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} vectors but {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let Some(first) = vectors.first() else {
        return Err(Error::InsufficientData("no training vectors".into()));
    };
    let dim = first.dim();
    let mut data = Array2::<T>::zeros((vectors.len(), dim));
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        data.row_mut(i).assign(v.as_array());
    }
    let n: T = lit(vectors.len() as f64);
    let mean = data.sum_axis(Axis(0)) / n;
    let centered = &data - &mean;

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "PLDA needs at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if groups.values().all(|g| g.len() < 2) {
        return Err(Error::InsufficientData(
            "every speaker has a single vector; between- and within-speaker variability are not separable".into(),
        ));
    }
    let speakers = groups
        .values()
        .map(|rows| {
            let mut sum = Array1::<T>::zeros(dim);
            for &r in rows {
                sum += &centered.row(r);
            }
            SpeakerStats { count: rows.len(), sum }
        })
        .collect();
    let scatter = symmetrize(centered.t().dot(&centered).view());
    Ok((
        IVector::new(mean)?,
        EmData {
            centered,
            speakers,
            scatter,
        },
    ))
}

/// PCA of the speaker means for `V`, pooled within-speaker covariance for `Σ`.
fn initialize<T: Scalar>(data: &EmData<T>, dim: usize, q: usize, seed: u64) -> Result<(Array2<T>, Array2<T>)> {
    let n = data.centered.nrows();
    let mut between = Array2::<T>::zeros((dim, dim));
    let mut within = data.scatter.clone();
    for s in &data.speakers {
        let count: T = lit(s.count as f64);
        let mu = &s.sum / count;
        let outer = outer(mu.view(), mu.view());
        between = between + &outer * count;
        within = within - &outer * count;
    }
    let n_t: T = lit(n as f64);
    let between = symmetrize((between / n_t).view());
    let within = symmetrize((within / n_t).view());
    cholesky(within.view()).map_err(|_| {
        Error::InsufficientData(format!(
            "within-speaker covariance is singular ({n} vectors, {} speakers, dim {dim})",
            data.speakers.len()
        ))
    })?;

    let (values, vectors) = symmetric_eigen(between.view())?;
    let mean_var = (0..dim).map(|i| within[[i, i]]).fold(T::zero(), |a, b| a + b) / lit(dim as f64);
    let floor = values.first().copied().unwrap_or(T::zero()).max(T::zero()) * lit(1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array2::<T>::zeros((dim, q));
    for k in 0..q {
        if values[k] > floor && values[k] > T::zero() {
            let scale = values[k].sqrt();
            v.column_mut(k).assign(&(&vectors.column(k) * scale));
        } else {
            let scale = mean_var.sqrt() * lit(1e-3);
            for i in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                v[[i, k]] = T::from_f64_lossy(z) * scale;
            }
        }
    }
    Ok((v, within))
}

fn outer<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Per-speaker posterior precision `I + n VᵀΣ⁻¹V` and projection `VᵀΣ⁻¹`.
fn posterior_terms<T: Scalar>(v: ArrayView2<'_, T>, sigma: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
    let sigma_chol = cholesky(sigma)?;
    let sinv_v = cholesky_solve(sigma_chol.view(), v);
    let vt_sinv = sinv_v.t().to_owned();
    let vt_sinv_v = symmetrize(vt_sinv.dot(&v).view());
    Ok((vt_sinv, vt_sinv_v))
}

fn em_step<T: Scalar>(
    data: &EmData<T>,
    v: ArrayView2<'_, T>,
    sigma: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (dim, q) = v.dim();
    let (vt_sinv, vt_sinv_v) = posterior_terms(v, sigma)?;
    let mut r = Array2::<T>::zeros((dim, q));
    let mut a = Array2::<T>::zeros((q, q));
    let mut by_count: BTreeMap<usize, Array2<T>> = BTreeMap::new();
    for s in &data.speakers {
        let count: T = lit(s.count as f64);
        if !by_count.contains_key(&s.count) {
            let precision = Array2::<T>::eye(q) + &vt_sinv_v * count;
            by_count.insert(s.count, spd_inverse(precision.view())?);
        }
        let cov = &by_count[&s.count];
        let ey = cov.dot(&vt_sinv.dot(&s.sum));
        r = r + outer(s.sum.view(), ey.view());
        a = a + (cov + &outer(ey.view(), ey.view())) * count;
    }
    let a = symmetrize(a.view());
    let a_chol = cholesky(a.view())?;
    // V = R A⁻¹, solved as A Vᵀ = Rᵀ.
    let new_v = cholesky_solve(a_chol.view(), r.t()).t().to_owned();
    let n: T = lit(data.centered.nrows() as f64);
    let new_sigma = symmetrize(((&data.scatter - &new_v.dot(&r.t())) / n).view());
    if new_v.iter().chain(new_sigma.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("PLDA EM update".into()));
    }
    Ok((new_v, new_sigma))
}

/// Marginal log-likelihood of the training data with `y` integrated out.
fn log_likelihood<T: Scalar>(data: &EmData<T>, v: ArrayView2<'_, T>, sigma: ArrayView2<'_, T>) -> Result<f64> {
    let (n, dim) = data.centered.dim();
    let q = v.ncols();
    let sigma_chol = cholesky(sigma)?;
    let log_det_sigma = log_det_from_cholesky(sigma_chol.view()).to_f64_lossy();
    let quad = compensated_sum(
        data.centered
            .rows()
            .into_iter()
            .map(|x| inverse_quadratic_form(sigma_chol.view(), x).to_f64_lossy()),
    );
    let mut terms = vec![-0.5 * (n as f64 * (dim as f64 * std::f64::consts::TAU.ln() + log_det_sigma) + quad)];
    let (vt_sinv, vt_sinv_v) = posterior_terms(v, sigma)?;
    let mut by_count: BTreeMap<usize, (Array2<T>, f64)> = BTreeMap::new();
    for s in &data.speakers {
        if !by_count.contains_key(&s.count) {
            let count: T = lit(s.count as f64);
            let precision = Array2::<T>::eye(q) + &vt_sinv_v * count;
            let l = cholesky(precision.view())?;
            let log_det = log_det_from_cholesky(l.view()).to_f64_lossy();
            by_count.insert(s.count, (l, log_det));
        }
        let (l, log_det) = &by_count[&s.count];
        let b = vt_sinv.dot(&s.sum);
        terms.push(0.5 * inverse_quadratic_form(l.view(), b.view()).to_f64_lossy() - 0.5 * log_det);
    }
    let total = compensated_sum(terms);
    if !total.is_finite() {
        return Err(Error::NonFinite("PLDA log-likelihood".into()));
    }
    Ok(total)
}

fn check_full_rank<T: Scalar>(v: ArrayView2<'_, T>) -> Result<()> {
    if v.ncols() == 0 {
        return Ok(());
    }
    let gram = v.t().dot(&v);
    let (values, _) = symmetric_eigen(gram.view())?;
    let largest = values[0].to_f64_lossy();
    let smallest = values[values.len() - 1].to_f64_lossy();
    if !(largest > 0.0) || smallest <= largest * 1e-14 {
        return Err(Error::InsufficientData(format!(
            "speaker subspace lost rank (eigenvalues of VᵀV span {smallest:e}..{largest:e})"
        )));
    }
    Ok(())
}
