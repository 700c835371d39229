//! Minibatch ELBO assembly, its gradient, and the stochastic training loop.
//!
//! Per step, the responsibilities of the batch instances are refreshed in
//! closed form. Everything else is then moved by one Adam step along the
//! gradient of the batch ELBO estimate:
//!
//! ```text
//! ELBO ≈ (N/N_b)·Σ_{n∈batch}[annotation_n + likelihood_n + entropy_n] − KL_gauss − KL_dirichlet
//! ```
//!
//! Because the refreshed `q_n` maximizes the batch terms, the responsibilities
//! are held fixed while differentiating.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crowd::{entropy_term, AnnotationSet, CrowdPosterior, LabelPosterior};
use crate::data_io::MinibatchSampler;
use crate::error::{Result, SvgpcrError};
use crate::kernel::SeKernel;
use crate::likelihood::{RobustMax, DEFAULT_EPSILON, DEFAULT_QUADRATURE_POINTS};
use crate::optim::Adam;
use crate::sparse_gp::{GpGrad, VariationalGp};

/// Rows evaluated at once when predicting or refreshing every instance.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub quadrature_points: usize,
    pub jitter: f64,
    pub num_inducing: usize,
    /// Steps between training-log records.
    pub eval_every: usize,
    /// Robust-max label-noise level ε (held fixed).
    pub likelihood_epsilon: f64,
    /// Added to the diagonal of the all-ones Dirichlet prior.
    pub prior_diagonal_boost: f64,
    /// Added to the prior diagonal when initializing the posterior α̃.
    pub init_diagonal_boost: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch_size: 500,
            learning_rate: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            epochs: 100,
            seed: 0,
            quadrature_points: DEFAULT_QUADRATURE_POINTS,
            jitter: 1e-6,
            num_inducing: 100,
            eval_every: 10,
            likelihood_epsilon: DEFAULT_EPSILON,
            prior_diagonal_boost: 0.0,
            init_diagonal_boost: crate::crowd::DEFAULT_INIT_DIAGONAL_BOOST,
        }
    }
}

impl TrainConfig {
    /// Checks every field against a training set of `n` instances.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |msg: String| Err(SvgpcrError::InvalidConfig(msg));
        if self.minibatch_size == 0 || self.minibatch_size > n {
            return fail(format!(
                "minibatch_size must be in 1..={n} (the number of training instances), got {}",
                self.minibatch_size
            ));
        }
        if self.num_inducing == 0 || self.num_inducing > n {
            return fail(format!("num_inducing must be in 1..={n}, got {}", self.num_inducing));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return fail(format!("adam_betas must lie in (0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.jitter > 0.0) {
            return fail(format!("jitter must be positive, got {}", self.jitter));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.prior_diagonal_boost < 0.0 || self.init_diagonal_boost < 0.0 {
            return fail("diagonal boosts must be nonnegative".into());
        }
        RobustMax::new(2, self.likelihood_epsilon, self.quadrature_points)?;
        Ok(())
    }
}

/// The five ELBO terms of one evaluation.
///
/// `entropy` is the entropy `−Σ q log q ≥ 0` of the batch responsibilities, so
/// `total = scale·(annotation + likelihood + entropy) − gaussian_kl − dirichlet_kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub annotation: f64,
    pub likelihood: f64,
    pub entropy: f64,
    pub gaussian_kl: f64,
    pub dirichlet_kl: f64,
    pub scale: f64,
    pub total: f64,
}

impl ElboBreakdown {
    fn assemble(annotation: f64, likelihood: f64, entropy: f64, gaussian_kl: f64, dirichlet_kl: f64, scale: f64) -> Result<Self> {
        let named = [
            ("annotation_term", annotation),
            ("likelihood_term", likelihood),
            ("entropy_term", entropy),
            ("gaussian_kl", gaussian_kl),
            ("dirichlet_kl", dirichlet_kl),
        ];
        if let Some((term, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
            return Err(SvgpcrError::Numerical {
                term,
                detail: format!("evaluated to {v}"),
            });
        }
        Ok(Self {
            annotation,
            likelihood,
            entropy,
            gaussian_kl,
            dirichlet_kl,
            scale,
            total: scale * (annotation + likelihood + entropy) - gaussian_kl - dirichlet_kl,
        })
    }
}

/// Gradient of the ELBO with respect to every unconstrained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gp: GpGrad,
    pub log_alpha: Vec<DMatrix<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`SvgpcrModel::pack`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.gp.means.as_slice());
        for g in &self.gp.scale_raw {
            push_lower(&mut out, g);
        }
        out.extend_from_slice(self.gp.inducing.as_slice());
        out.push(self.gp.kernel.log_variance);
        out.push(self.gp.kernel.log_lengthscale);
        for g in &self.log_alpha {
            out.extend_from_slice(g.as_slice());
        }
        out
    }
}

fn push_lower(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in j..m.nrows() {
            out.push(m[(i, j)]);
        }
    }
}

fn pull_lower(src: &[f64], m: &mut DMatrix<f64>) -> usize {
    let mut c = 0;
    for j in 0..m.ncols() {
        for i in j..m.nrows() {
            m[(i, j)] = src[c];
            c += 1;
        }
    }
    c
}

/// Full model state: GP posterior, annotator posteriors, and responsibilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgpcrModel {
    pub gp: VariationalGp,
    pub crowd: CrowdPosterior,
    pub labels: LabelPosterior,
    pub likelihood: RobustMax,
    /// Responsibilities are clamped to known labels (gold-label training).
    pub labels_fixed: bool,
}

impl SvgpcrModel {
    /// Initial state: inducing inputs drawn without replacement from `x`,
    /// `m_k = 0`, `S_k = I`, `α̃ = α + boost·I`, uniform responsibilities.
    pub fn init(
        x: &DMatrix<f64>,
        num_classes: usize,
        num_annotators: usize,
        config: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = x.nrows();
        if config.num_inducing > n {
            return Err(SvgpcrError::InvalidConfig(format!(
                "num_inducing {} exceeds the {n} training instances",
                config.num_inducing
            )));
        }
        let mut picks = sample(rng, n, config.num_inducing).into_vec();
        picks.sort_unstable();
        let inducing = DMatrix::from_fn(picks.len(), x.ncols(), |i, d| x[(picks[i], d)]);
        let gp = VariationalGp::new(inducing, num_classes, SeKernel::default_for_dim(x.ncols()), config.jitter)?;
        let prior = CrowdPosterior::uniform_prior(num_classes, config.prior_diagonal_boost);
        let crowd = CrowdPosterior::new(num_annotators, prior, config.init_diagonal_boost)?;
        Ok(Self {
            gp,
            crowd,
            labels: LabelPosterior::uniform(n, num_classes),
            likelihood: RobustMax::new(num_classes, config.likelihood_epsilon, config.quadrature_points)?,
            labels_fixed: false,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.gp.num_classes()
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.gp.means().as_slice());
        for raw in self.gp.scale_raw() {
            push_lower(&mut out, raw);
        }
        out.extend_from_slice(self.gp.inducing().as_slice());
        out.push(self.gp.kernel().log_variance);
        out.push(self.gp.kernel().log_lengthscale);
        for la in self.crowd.log_alpha() {
            out.extend_from_slice(la.as_slice());
        }
        out
    }

    pub fn unpack(&mut self, params: &[f64]) {
        let mut c = 0;
        let take = |c: &mut usize, len: usize| {
            let s = &params[*c..*c + len];
            *c += len;
            s
        };
        let len = self.gp.means().len();
        self.gp.means_mut().as_mut_slice().copy_from_slice(take(&mut c, len));
        for raw in self.gp.scale_raw_mut() {
            c += pull_lower(&params[c..], raw);
        }
        let len = self.gp.inducing().len();
        self.gp.inducing_mut().as_mut_slice().copy_from_slice(take(&mut c, len));
        self.gp.kernel_mut().log_variance = params[c];
        self.gp.kernel_mut().log_lengthscale = params[c + 1];
        c += 2;
        for la in self.crowd.log_alpha_mut() {
            let len = la.len();
            la.as_mut_slice().copy_from_slice(take(&mut c, len));
        }
        debug_assert_eq!(c, params.len());
    }

    pub fn num_params(&self) -> usize {
        let m = self.gp.num_inducing();
        let k = self.num_classes();
        m * k + k * m * (m + 1) / 2 + m * self.gp.input_dim() + 2 + self.crowd.num_annotators() * k * k
    }

    fn check_features(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.gp.input_dim() {
            return Err(SvgpcrError::Shape(format!(
                "features have {} columns but the model was trained on {}",
                x.ncols(),
                self.gp.input_dim()
            )));
        }
        Ok(())
    }

    /// Predictive class probabilities at new inputs.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_features(x)?;
        let prior = self.gp.prior()?;
        let mut out = DMatrix::zeros(x.nrows(), self.num_classes());
        for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(x.nrows() - start);
            let xb = x.rows(start, len).into_owned();
            let (marg, _) = self.gp.marginals_with(&prior, &xb)?;
            let probs = self.likelihood.predict_class_probs(&marg.means, &marg.variances)?;
            out.rows_mut(start, len).copy_from(&probs);
        }
        Ok(out)
    }

    /// Refreshes the responsibilities of the given instances.
    pub fn refresh_responsibilities(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet, batch: &[usize]) -> Result<()> {
        if self.labels_fixed || batch.is_empty() {
            return Ok(());
        }
        self.check_features(x)?;
        let xb = gather_rows(x, batch);
        let marg = self.gp.marginals(&xb)?;
        let ve = self.likelihood.variational_expectation(&marg.means, &marg.variances)?;
        self.crowd.update_responsibilities(ann, &ve, batch, &mut self.labels)
    }

    /// Refreshes the responsibilities of every instance.
    pub fn refresh_all(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet) -> Result<()> {
        let all: Vec<usize> = (0..x.nrows()).collect();
        for chunk in all.chunks(EVAL_CHUNK) {
            self.refresh_responsibilities(x, ann, chunk)?;
        }
        Ok(())
    }
}

pub fn gather_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, d| x[(rows[i], d)])
}

fn check_batch(x: &DMatrix<f64>, batch: &[usize], n_total: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(SvgpcrError::InvalidInput("empty minibatch".into()));
    }
    if let Some(&b) = batch.iter().find(|&&b| b >= x.nrows()) {
        return Err(SvgpcrError::Data(format!("batch index {b} out of range for {} instances", x.nrows())));
    }
    if n_total < batch.len() {
        return Err(SvgpcrError::InvalidInput(format!(
            "dataset size {n_total} smaller than the batch ({})",
            batch.len()
        )));
    }
    Ok(())
}

/// Minibatch ELBO estimate with the current responsibilities. `n_total` is the
/// training-set size N; the data terms are scaled by `N / batch.len()`.
pub fn elbo_minibatch(
    model: &SvgpcrModel,
    x: &DMatrix<f64>,
    ann: &AnnotationSet,
    batch: &[usize],
    n_total: usize,
) -> Result<ElboBreakdown> {
    check_batch(x, batch, n_total)?;
    let prior = model.gp.prior()?;
    let xb = gather_rows(x, batch);
    let (marg, _) = model.gp.marginals_with(&prior, &xb)?;
    let ve = model.likelihood.variational_expectation(&marg.means, &marg.variances)?;
    let qb = model.labels.rows(batch);
    let likelihood = qb.component_mul(&ve).sum();
    let annotation = model.crowd.annotation_term(&model.labels, ann, batch)?;
    let entropy = -entropy_term(&model.labels, batch)?;
    ElboBreakdown::assemble(
        annotation,
        likelihood,
        entropy,
        model.gp.gaussian_kl_with(&prior),
        model.crowd.dirichlet_kl(),
        n_total as f64 / batch.len() as f64,
    )
}

/// Minibatch ELBO and its gradient with the responsibilities held fixed.
pub fn gradients(
    model: &SvgpcrModel,
    x: &DMatrix<f64>,
    ann: &AnnotationSet,
    batch: &[usize],
    n_total: usize,
) -> Result<(ElboBreakdown, Gradients)> {
    check_batch(x, batch, n_total)?;
    let scale = n_total as f64 / batch.len() as f64;
    let prior = model.gp.prior()?;
    let xb = gather_rows(x, batch);
    let (marg, cache) = model.gp.marginals_with(&prior, &xb)?;
    let qb = model.labels.rows(batch);
    let (likelihood, g_mean, g_var) = model
        .likelihood
        .weighted_expectation_grad(&marg.means, &marg.variances, &qb)?;
    let annotation = model.crowd.annotation_term(&model.labels, ann, batch)?;
    let entropy = -entropy_term(&model.labels, batch)?;
    let breakdown = ElboBreakdown::assemble(
        annotation,
        likelihood,
        entropy,
        model.gp.gaussian_kl_with(&prior),
        model.crowd.dirichlet_kl(),
        scale,
    )?;

    let mut gp = model
        .gp
        .marginals_backward(&prior, &xb, &cache, &(g_mean * scale), &(g_var * scale));
    gp.add_scaled(&model.gp.gaussian_kl_grad(&prior), -1.0);
    let ann_grad = model.crowd.annotation_term_grad(&model.labels, ann, batch)?;
    let kl_grad = model.crowd.dirichlet_kl_grad();
    let log_alpha = ann_grad
        .iter()
        .zip(&kl_grad)
        .map(|(a, k)| a * scale - k)
        .collect();
    Ok((breakdown, Gradients { gp, log_alpha }))
}

/// Full-data ELBO after refreshing every responsibility.
pub fn full_elbo(model: &mut SvgpcrModel, x: &DMatrix<f64>, ann: &AnnotationSet) -> Result<ElboBreakdown> {
    model.refresh_all(x, ann)?;
    let all: Vec<usize> = (0..x.nrows()).collect();
    elbo_minibatch(model, x, ann, &all, x.nrows())
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub elbo: ElboBreakdown,
}

/// Training log; `elapsed_secs[i]` is the wall-clock time at `records[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub elapsed_secs: Vec<f64>,
}

/// Owns the single mutable copy of the model and the optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SvgpcrModel,
    pub optimizer: Adam,
    pub sampler: MinibatchSampler,
    pub step: u64,
    pub num_instances: usize,
}

impl Trainer {
    /// Crowdsourced training from an annotation set.
    pub fn new(x: &DMatrix<f64>, ann: &AnnotationSet, num_classes: usize, config: TrainConfig) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(SvgpcrError::EmptyDataset("no training instances".into()));
        }
        config.validate(n)?;
        if ann.num_instances() > n {
            return Err(SvgpcrError::Data(format!(
                "annotations reference {} instances but only {n} feature rows exist",
                ann.num_instances()
            )));
        }
        if let Some(k) = ann.inferred_num_classes() {
            if k > num_classes {
                return Err(SvgpcrError::Data(format!(
                    "annotations contain label {} but only {num_classes} classes were requested",
                    k - 1
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SvgpcrModel::init(x, num_classes, ann.num_annotators(), &config, &mut rng)?;
        Ok(Self::assemble(model, config, n))
    }

    /// Plain sparse-GP classification on known labels (responsibilities fixed
    /// to one-hot rows, no annotators).
    pub fn new_gold(x: &DMatrix<f64>, labels: &[usize], num_classes: usize, config: TrainConfig) -> Result<Self> {
        let n = x.nrows();
        if labels.len() != n {
            return Err(SvgpcrError::Shape(format!("{} labels for {n} instances", labels.len())));
        }
        config.validate(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = SvgpcrModel::init(x, num_classes, 0, &config, &mut rng)?;
        model.labels = LabelPosterior::one_hot(labels, num_classes)?;
        model.labels_fixed = true;
        Ok(Self::assemble(model, config, n))
    }

    fn assemble(model: SvgpcrModel, config: TrainConfig, n: usize) -> Self {
        let (b1, b2) = config.adam_betas;
        let optimizer = Adam::new(model.num_params(), config.learning_rate, b1, b2, config.adam_eps);
        let sampler = MinibatchSampler::new(n, config.minibatch_size, config.seed.wrapping_add(1));
        Self {
            config,
            model,
            optimizer,
            sampler,
            step: 0,
            num_instances: n,
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.sampler.epochs_completed()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_completed() >= self.config.epochs
    }

    /// Refresh batch responsibilities, then one Adam step. A failure leaves the
    /// model and optimizer as they were; the offending batch is still consumed.
    pub fn step(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet) -> Result<StepRecord> {
        if x.nrows() != self.num_instances {
            return Err(SvgpcrError::Shape(format!(
                "trainer was built for {} instances, got {}",
                self.num_instances,
                x.nrows()
            )));
        }
        let (epoch, batch) = self.sampler.next_batch();
        let snapshot = self.model.labels.rows(&batch);
        let outcome = self.update(x, ann, &batch);
        if outcome.is_err() {
            self.model.labels.set_rows(&batch, &snapshot)?;
        }
        let elbo = outcome?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            batch_size: batch.len(),
            elbo,
        })
    }

    fn update(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet, batch: &[usize]) -> Result<ElboBreakdown> {
        self.model.refresh_responsibilities(x, ann, batch)?;
        let (elbo, grad) = gradients(&self.model, x, ann, batch, self.num_instances)?;
        let flat = grad.flatten();
        if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
            return Err(SvgpcrError::Numerical {
                term: "gradient",
                detail: format!("non-finite gradient entry {i} at step {}", self.step + 1),
            });
        }
        let loss_grad: Vec<f64> = flat.iter().map(|g| -g).collect();
        let mut params = self.model.pack();
        let mut optimizer = self.optimizer.clone();
        optimizer.step(&mut params, &loss_grad);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(SvgpcrError::Numerical {
                term: "parameters",
                detail: format!("non-finite parameter after step {}", self.step + 1),
            });
        }
        self.optimizer = optimizer;
        self.model.unpack(&params);
        Ok(elbo)
    }

    /// Runs until the configured number of epochs is complete, logging every
    /// `eval_every` steps and the final step.
    pub fn run(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet, log: &mut TrainingLog) -> Result<()> {
        let started = Instant::now();
        while !self.is_finished() {
            let rec = self.step(x, ann)?;
            if rec.step % self.config.eval_every as u64 == 0 || self.is_finished() {
                log.records.push(rec);
                log.elapsed_secs.push(started.elapsed().as_secs_f64());
            }
        }
        Ok(())
    }

    /// Runs at most `steps` further steps.
    pub fn run_steps(&mut self, x: &DMatrix<f64>, ann: &AnnotationSet, steps: u64, log: &mut TrainingLog) -> Result<()> {
        let started = Instant::now();
        for _ in 0..steps {
            if self.is_finished() {
                break;
            }
            let rec = self.step(x, ann)?;
            if rec.step % self.config.eval_every as u64 == 0 || self.is_finished() {
                log.records.push(rec);
                log.elapsed_secs.push(started.elapsed().as_secs_f64());
            }
        }
        Ok(())
    }
}

/// Crowdsourced training from scratch. Responsibilities of every instance are
/// refreshed once more at the end.
pub fn train(
    x: &DMatrix<f64>,
    ann: &AnnotationSet,
    num_classes: usize,
    config: TrainConfig,
) -> Result<(Trainer, TrainingLog)> {
    let mut trainer = Trainer::new(x, ann, num_classes, config)?;
    let mut log = TrainingLog::default();
    trainer.run(x, ann, &mut log)?;
    trainer.model.refresh_all(x, ann)?;
    Ok((trainer, log))
}

/// Gold-label training of the same GP for reference comparisons.
pub fn train_gold(
    x: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    config: TrainConfig,
) -> Result<(Trainer, TrainingLog)> {
    let mut trainer = Trainer::new_gold(x, labels, num_classes, config)?;
    let empty = AnnotationSet::from_records(std::iter::empty(), 0)?;
    let mut log = TrainingLog::default();
    trainer.run(x, &empty, &mut log)?;
    Ok((trainer, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_annotations, make_toy_dataset, AnnotatorKind, AnnotatorSpec, ToyKind};
    use rand::Rng;

    fn toy(n: usize, k: usize, m: usize, seed: u64) -> (DMatrix<f64>, AnnotationSet, SvgpcrModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5..1.5));
        let triples: Vec<(i64, i64, i64)> = (0..n)
            .flat_map(|i| (0..2).map(move |a| (i as i64, a, ((i + a as usize) % k) as i64)))
            .collect();
        let mut ann = AnnotationSet::from_triples(triples).unwrap();
        ann.bind(n).unwrap();
        let cfg = TrainConfig {
            num_inducing: m,
            minibatch_size: n,
            ..TrainConfig::default()
        };
        let mut model = SvgpcrModel::init(&x, k, 2, &cfg, &mut rng).unwrap();
        // move every parameter group away from its initial value
        let mut p = model.pack();
        for v in p.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        model.unpack(&p);
        let q = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.1..1.0));
        let q = DMatrix::from_fn(n, k, |i, j| q[(i, j)] / q.row(i).sum());
        model.labels = LabelPosterior::from_matrix(q).unwrap();
        (x, ann, model)
    }

    #[test]
    fn pack_round_trip() {
        let (_, _, mut model) = toy(5, 3, 3, 1);
        let p = model.pack();
        assert_eq!(p.len(), model.num_params());
        let before = model.clone();
        model.unpack(&p);
        assert_eq!(model, before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (x, ann, model) = toy(6, 3, 3, seed);
            let batch = [0, 2, 3, 5];
            let (_, grad) = gradients(&model, &x, &ann, &batch, 6).unwrap();
            let g = grad.flatten();
            let p0 = model.pack();
            for i in 0..p0.len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut p = p0.clone();
                    p[i] += delta;
                    m.unpack(&p);
                    elbo_minibatch(&m, &x, &ann, &batch, 6).unwrap().total
                };
                let h = 1e-5;
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
                assert!(err < 1e-4, "seed {seed} param {i}: fd {fd} analytic {}", g[i]);
            }
        }
    }

    #[test]
    fn breakdown_total_is_assembled_from_terms() {
        let (x, ann, model) = toy(6, 2, 2, 4);
        let b = elbo_minibatch(&model, &x, &ann, &[1, 4], 6).unwrap();
        assert_eq!(b.scale, 3.0);
        let expect = 3.0 * (b.annotation + b.likelihood + b.entropy) - b.gaussian_kl - b.dirichlet_kl;
        assert!((b.total - expect).abs() < 1e-12);
        assert!(b.entropy >= 0.0);
    }

    #[test]
    fn empty_annotations_zero_the_annotation_term() {
        let (x, _, mut model) = toy(6, 2, 2, 5);
        model.crowd = CrowdPosterior::new(0, CrowdPosterior::uniform_prior(2, 0.0), 0.1).unwrap();
        model.labels = LabelPosterior::uniform(6, 2);
        let empty = AnnotationSet::from_records(std::iter::empty(), 0).unwrap();
        let b = elbo_minibatch(&model, &x, &empty, &[0, 1, 2, 3, 4, 5], 6).unwrap();
        assert_eq!(b.annotation, 0.0);
        assert_eq!(b.dirichlet_kl, 0.0);
        assert!((b.entropy - 6.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn minibatch_estimate_is_unbiased_over_all_batches() {
        let (x, ann, model) = toy(6, 2, 2, 6);
        let all: Vec<usize> = (0..6).collect();
        let full = elbo_minibatch(&model, &x, &ann, &all, 6).unwrap().total;
        let mut sum = 0.0;
        let mut count = 0;
        for a in 0..6 {
            for b in a + 1..6 {
                for c in b + 1..6 {
                    sum += elbo_minibatch(&model, &x, &ann, &[a, b, c], 6).unwrap().total;
                    count += 1;
                }
            }
        }
        assert_eq!(count, 20);
        assert!((sum / 20.0 - full).abs() < 1e-9 * full.abs().max(1.0));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(matches!(cfg.validate(100), Err(SvgpcrError::InvalidConfig(_))));
        let ok = TrainConfig {
            minibatch_size: 100,
            num_inducing: 10,
            ..cfg.clone()
        };
        ok.validate(100).unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { adam_betas: (0.9, 1.0), ..ok.clone() },
            TrainConfig { adam_eps: -1.0, ..ok.clone() },
            TrainConfig { eval_every: 0, ..ok.clone() },
            TrainConfig { quadrature_points: 1, ..ok.clone() },
            TrainConfig { likelihood_epsilon: 1.0, ..ok.clone() },
        ] {
            assert!(bad.validate(100).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn config_reads_partial_toml() {
        let cfg: TrainConfig = toml::from_str("learning_rate = 0.05\nadam_betas = [0.8, 0.99]\n").unwrap();
        assert_eq!(cfg.learning_rate, 0.05);
        assert_eq!(cfg.adam_betas, (0.8, 0.99));
        assert_eq!(cfg.minibatch_size, 500);
        assert!(toml::from_str::<TrainConfig>("learnin_rate = 0.05").is_err());
    }

    #[test]
    fn two_class_crowd_reconstructs_training_labels() {
        let (x, truth) = make_toy_dataset(ToyKind::Gaussians, 200, 2, 3).unwrap();
        let specs = vec![
            AnnotatorSpec::full(AnnotatorKind::Reliable { accuracy: 0.9 }),
            AnnotatorSpec::full(AnnotatorKind::Reliable { accuracy: 0.8 }),
            AnnotatorSpec::full(AnnotatorKind::Spammer),
        ];
        let sim = generate_annotations(&truth, 2, &specs, 3).unwrap();
        let cfg = TrainConfig {
            minibatch_size: 50,
            num_inducing: 10,
            epochs: 40,
            learning_rate: 0.05,
            eval_every: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let (trainer, log) = train(&x, &sim.annotations, 2, cfg).unwrap();
        let q = trainer.model.labels.matrix();
        let correct = (0..200)
            .filter(|&n| crate::metrics::argmax(q.row(n).iter().copied()) == truth[n])
            .count();
        assert!(correct as f64 / 200.0 >= 0.95, "reconstruction {correct}/200");
        assert!(log.records.iter().all(|r| r.elbo.total.is_finite()));
        assert!(trainer.model.pack().iter().all(|p| p.is_finite()));
    }

    #[test]
    fn nan_features_abort_without_touching_the_model() {
        let (x, ann, model) = toy(6, 2, 2, 7);
        let cfg = TrainConfig {
            minibatch_size: 6,
            num_inducing: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&x, &ann, 2, cfg).unwrap();
        trainer.model = model;
        let before = trainer.model.clone();
        let mut bad = x.clone();
        bad[(3, 1)] = f64::NAN;
        assert!(trainer.step(&bad, &ann).is_err());
        assert_eq!(trainer.model, before);
        assert_eq!(trainer.step, 0);
    }
}
