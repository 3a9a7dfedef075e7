//! Finite-difference verification of every gradient path used in training.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gan::{
    build_models, AdversarialTerm, CosineTerm, CriticLoss, CrossEntropyTerm, GanConfig, GanModels,
    GeneratorObjective, LossWeights, SoftmaxCrossEntropy,
};
use crate::nn::{finite_diff_report, FiniteDiffOptions, OutputLoss};
use crate::vecspace::normalize_view;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub params_checked: usize,
    pub skipped_at_kinks: usize,
    pub max_relative_error: f64,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Tolerance on the maximum relative error for every check in the suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckSetup {
    pub dim: usize,
    pub hidden: usize,
    pub noise_dim: usize,
    pub num_speakers: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            dim: 8,
            hidden: 16,
            noise_dim: 4,
            num_speakers: 5,
            batch: 64,
            seed: 7,
        }
    }
}

struct Fixture {
    models: GanModels<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
    z: Array2<f64>,
    labels: Vec<usize>,
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let unit = normalize_view(row.view()).expect("random row is nonzero");
        row.assign(&unit);
    }
    m
}

fn fixture(setup: &GradCheckSetup) -> Result<Fixture> {
    let config = GanConfig {
        noise_dim: setup.noise_dim,
        num_speakers: setup.num_speakers,
        generator_hidden: vec![setup.hidden; 3],
        critic_hidden: vec![setup.hidden; 4],
        supplement_hidden: Some(setup.hidden),
        seed: setup.seed,
        ..GanConfig::default()
    };
    let models = build_models(setup.dim, &config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9e37_79b9);
    let x = unit_rows(&mut rng, setup.batch, setup.dim);
    let y = unit_rows(&mut rng, setup.batch, setup.dim);
    let z = Array2::from_shape_simple_fn((setup.batch, setup.noise_dim), || rng.random_range(-1.0..1.0) * 0.5);
    let labels = (0..setup.batch).map(|i| i % setup.num_speakers).collect();
    Ok(Fixture { models, x, y, z, labels })
}

/// Checks `G` under each generator term and the 4:7:1 composite, `G_sup`
/// under cross-entropy and the composite, and `D` under the critic objective.
pub fn run_gradient_suite(setup: &GradCheckSetup) -> Result<Vec<GradCheck>> {
    let f = fixture(setup)?;
    let opts = FiniteDiffOptions {
        seed: setup.seed,
        ..FiniteDiffOptions::default()
    };
    let g_input = concatenate(Axis(1), &[f.x.view(), f.z.view()]).expect("equal rows");
    let g_out = f.models.generator.predict(g_input.view())?;
    let g = &f.models.generator;
    let mut results = Vec::new();
    let mut check = |name: &'static str, net: &crate::nn::Mlp<f64>, loss: &dyn OutputLoss<f64>, input: &Array2<f64>| -> Result<()> {
        let report = finite_diff_report(net, loss, input.view(), opts)?;
        results.push(GradCheck {
            name,
            params_checked: report.checked,
            skipped_at_kinks: report.skipped_at_kinks,
            max_relative_error: report.max_relative_error,
        });
        Ok(())
    };

    let adversarial = AdversarialTerm {
        critic: &f.models.critic,
        conditions: f.x.view(),
    };
    check("generator/adversarial", g, &adversarial, &g_input)?;
    let cosine = CosineTerm { targets: f.y.view() };
    check("generator/cosine", g, &cosine, &g_input)?;
    let ce = CrossEntropyTerm {
        supplement: &f.models.supplement,
        labels: &f.labels,
    };
    check("generator/cross-entropy", g, &ce, &g_input)?;
    let composite = GeneratorObjective {
        models: &f.models,
        conditions: f.x.view(),
        targets: f.y.view(),
        labels: &f.labels,
        weights: LossWeights::D_WCGAN,
    };
    check("generator/composite", g, &composite, &g_input)?;

    let head_ce = SoftmaxCrossEntropy { labels: &f.labels };
    check("supplement/cross-entropy", &f.models.supplement, &head_ce, &g_out)?;
    let c = LossWeights::D_WCGAN.cross_entropy;
    let weighted_ce = |probs: ndarray::ArrayView2<'_, f64>| {
        let (v, g) = head_ce.evaluate(probs)?;
        Ok((c * v, g * c))
    };
    check("supplement/composite", &f.models.supplement, &weighted_ce, &g_out)?;

    let real = concatenate(Axis(1), &[f.x.view(), f.y.view()]).expect("equal rows");
    let fake = concatenate(Axis(1), &[f.x.view(), g_out.view()]).expect("equal rows");
    let stacked = concatenate(Axis(0), &[real.view(), fake.view()]).expect("equal widths");
    let critic_loss = CriticLoss { real_rows: setup.batch };
    check("critic/objective", &f.models.critic, &critic_loss, &stacked)?;
    Ok(results)
}
