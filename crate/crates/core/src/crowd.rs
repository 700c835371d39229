//! Annotator model: Dirichlet posteriors over column-stochastic confusion
//! matrices, the true-label responsibilities `q(z_n)`, and the ELBO terms that
//! depend on them.
//!
//! Confusion matrices follow the convention `r_ij = p(label i | true class j)`,
//! so every column is a distribution and carries its own Dirichlet.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvgpcrError};
use crate::special::{digamma, ln_gamma, trigamma};

/// Diagonal boost added to the prior when initializing the posterior.
pub const DEFAULT_INIT_DIAGONAL_BOOST: f64 = 0.1;

/// One distinct (instance, annotator, label) triple and its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance: usize,
    pub annotator: usize,
    pub label: usize,
    pub count: u32,
}

/// Sparse annotation store indexed by instance.
///
/// Annotator ids are remapped to `0..A` in increasing order of their external
/// value; [`annotator_ids`](Self::annotator_ids) recovers the originals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    records: Vec<AnnotationRecord>,
    offsets: Vec<usize>,
    annotator_ids: Vec<i64>,
}

impl AnnotationSet {
    /// Builds the store from `(instance, external annotator id, label)` triples.
    /// Repeated triples accumulate into one record.
    pub fn from_triples<I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (i64, i64, i64)>,
    {
        let mut counts: BTreeMap<(usize, i64, usize), u32> = BTreeMap::new();
        for (row, (instance, annotator, label)) in triples.into_iter().enumerate() {
            if instance < 0 {
                return Err(SvgpcrError::Data(format!("annotation {row}: negative instance id {instance}")));
            }
            if label < 0 {
                return Err(SvgpcrError::Data(format!("annotation {row}: negative label {label}")));
            }
            *counts.entry((instance as usize, annotator, label as usize)).or_insert(0) += 1;
        }
        let annotator_ids: Vec<i64> = {
            let mut ids: Vec<i64> = counts.keys().map(|k| k.1).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        };
        let remap: BTreeMap<i64, usize> = annotator_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut records: Vec<AnnotationRecord> = counts
            .into_iter()
            .map(|((instance, annotator, label), count)| AnnotationRecord {
                instance,
                annotator: remap[&annotator],
                label,
                count,
            })
            .collect();
        records.sort_by_key(|r| (r.instance, r.annotator, r.label));
        let num_instances = records.last().map_or(0, |r| r.instance + 1);
        let mut set = Self {
            records,
            offsets: Vec::new(),
            annotator_ids,
        };
        set.rebuild_offsets(num_instances);
        Ok(set)
    }

    /// Builds the store from already-contiguous annotator indices.
    pub fn from_records(records: impl IntoIterator<Item = AnnotationRecord>, num_annotators: usize) -> Result<Self> {
        let mut set = Self::from_triples(
            records
                .into_iter()
                .flat_map(|r| std::iter::repeat_n((r.instance as i64, r.annotator as i64, r.label as i64), r.count as usize)),
        )?;
        if let Some(&max) = set.annotator_ids.last() {
            if max as usize >= num_annotators {
                return Err(SvgpcrError::Data(format!(
                    "annotator index {max} out of range for {num_annotators} annotators"
                )));
            }
        }
        // keep every annotator addressable even if it produced no labels
        let present = set.annotator_ids.clone();
        set.annotator_ids = (0..num_annotators as i64).collect();
        for r in &mut set.records {
            r.annotator = present[r.annotator] as usize;
        }
        Ok(set)
    }

    fn rebuild_offsets(&mut self, num_instances: usize) {
        let mut offsets = vec![0usize; num_instances + 1];
        for r in &self.records {
            offsets[r.instance + 1] += 1;
        }
        for i in 0..num_instances {
            offsets[i + 1] += offsets[i];
        }
        self.offsets = offsets;
    }

    /// Validates against a feature table of `n` rows and extends the index so
    /// that every row is addressable.
    pub fn bind(&mut self, n: usize) -> Result<()> {
        if let Some(r) = self.records.iter().find(|r| r.instance >= n) {
            return Err(SvgpcrError::Data(format!(
                "annotation references instance {} but the feature table has {n} rows",
                r.instance
            )));
        }
        self.rebuild_offsets(n);
        Ok(())
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn for_instance(&self, n: usize) -> &[AnnotationRecord] {
        if n + 1 >= self.offsets.len() {
            return &[];
        }
        &self.records[self.offsets[n]..self.offsets[n + 1]]
    }

    pub fn num_instances(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_annotators(&self) -> usize {
        self.annotator_ids.len()
    }

    pub fn annotator_ids(&self) -> &[i64] {
        &self.annotator_ids
    }

    /// Annotators that labelled instance `n`.
    pub fn annotators_of(&self, n: usize) -> Vec<usize> {
        let mut a: Vec<usize> = self.for_instance(n).iter().map(|r| r.annotator).collect();
        a.dedup();
        a
    }

    /// Number of annotations counting multiplicity.
    pub fn total_count(&self) -> u64 {
        self.records.iter().map(|r| r.count as u64).sum()
    }

    /// `max label + 1`, or `None` for an empty set.
    pub fn inferred_num_classes(&self) -> Option<usize> {
        self.records.iter().map(|r| r.label + 1).max()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Categorical responsibilities `q_n` over the true class of every instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPosterior {
    q: DMatrix<f64>,
}

impl LabelPosterior {
    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            q: DMatrix::from_element(n, k, 1.0 / k as f64),
        }
    }

    /// One-hot rows at the given labels.
    pub fn one_hot(labels: &[usize], k: usize) -> Result<Self> {
        let mut q = DMatrix::zeros(labels.len(), k);
        for (n, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(SvgpcrError::Data(format!("label {y} at row {n} out of range for {k} classes")));
            }
            q[(n, y)] = 1.0;
        }
        Ok(Self { q })
    }

    pub fn from_matrix(q: DMatrix<f64>) -> Result<Self> {
        for (n, row) in q.row_iter().enumerate() {
            let s = row.sum();
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) || (s - 1.0).abs() > 1e-10 {
                return Err(SvgpcrError::InvalidInput(format!("row {n} of responsibilities is not a distribution")));
            }
        }
        Ok(Self { q })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn num_instances(&self) -> usize {
        self.q.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.q.ncols()
    }

    pub fn row(&self, n: usize) -> Vec<f64> {
        self.q.row(n).iter().copied().collect()
    }

    /// Rows for a batch, stacked in batch order.
    pub fn rows(&self, batch: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(batch.len(), self.q.ncols(), |b, k| self.q[(batch[b], k)])
    }

    /// Overwrites the rows of `batch` with the rows of `rows`, e.g. to restore
    /// a snapshot taken with [`rows`](Self::rows).
    pub fn set_rows(&mut self, batch: &[usize], rows: &DMatrix<f64>) -> Result<()> {
        self.check_batch(batch)?;
        if rows.shape() != (batch.len(), self.q.ncols()) {
            return Err(SvgpcrError::Shape(format!(
                "got {:?} rows for a batch of {} over {} classes",
                rows.shape(),
                batch.len(),
                self.q.ncols()
            )));
        }
        for (b, &n) in batch.iter().enumerate() {
            self.q.row_mut(n).copy_from(&rows.row(b));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if let Some(&n) = batch.iter().find(|&&n| n >= self.q.nrows()) {
            return Err(SvgpcrError::Data(format!(
                "instance {n} has no responsibilities ({} instances known)",
                self.q.nrows()
            )));
        }
        Ok(())
    }
}

/// Negative-entropy contribution `Σ_n Σ_k q_nk log q_nk` over a batch, with
/// `0·log 0 = 0`.
pub fn entropy_term(q: &LabelPosterior, batch: &[usize]) -> Result<f64> {
    q.check_batch(batch)?;
    let mut s = 0.0;
    for &n in batch {
        for v in q.q.row(n).iter() {
            if *v > 0.0 {
                s += v * v.ln();
            }
        }
    }
    Ok(s)
}

/// Dirichlet posteriors over every annotator's confusion-matrix columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdPosterior {
    /// `log α̃ᵃ`, one K×K matrix per annotator.
    log_alpha: Vec<DMatrix<f64>>,
    prior: DMatrix<f64>,
}

impl CrowdPosterior {
    /// Posterior initialized at `α̃ = α + boost·I` for every annotator.
    pub fn new(num_annotators: usize, prior: DMatrix<f64>, diagonal_boost: f64) -> Result<Self> {
        let k = prior.nrows();
        if prior.ncols() != k || k < 2 {
            return Err(SvgpcrError::InvalidInput(format!("prior must be square with K >= 2, got {:?}", prior.shape())));
        }
        if prior.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(SvgpcrError::InvalidInput("Dirichlet prior entries must be positive".into()));
        }
        if diagonal_boost < 0.0 {
            return Err(SvgpcrError::InvalidInput("diagonal boost must be nonnegative".into()));
        }
        let init = DMatrix::from_fn(k, k, |i, j| {
            let v = prior[(i, j)] + if i == j { diagonal_boost } else { 0.0 };
            v.ln()
        });
        Ok(Self {
            log_alpha: vec![init; num_annotators],
            prior,
        })
    }

    /// Uniform prior `α_ij = 1` plus an optional diagonal boost.
    pub fn uniform_prior(k: usize, diagonal_boost: f64) -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 + diagonal_boost } else { 1.0 })
    }

    /// Builds a posterior with explicit concentration parameters.
    pub fn from_alpha(alpha: Vec<DMatrix<f64>>, prior: DMatrix<f64>) -> Result<Self> {
        let k = prior.nrows();
        for (a, m) in alpha.iter().enumerate() {
            if m.shape() != (k, k) || m.iter().any(|v| !(*v > 0.0)) {
                return Err(SvgpcrError::InvalidInput(format!(
                    "annotator {a}: concentration matrix must be {k}x{k} and positive"
                )));
            }
        }
        Ok(Self {
            log_alpha: alpha.into_iter().map(|m| m.map(f64::ln)).collect(),
            prior,
        })
    }

    pub fn num_annotators(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn num_classes(&self) -> usize {
        self.prior.nrows()
    }

    pub fn prior(&self) -> &DMatrix<f64> {
        &self.prior
    }

    pub fn log_alpha(&self) -> &[DMatrix<f64>] {
        &self.log_alpha
    }

    pub fn log_alpha_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.log_alpha
    }

    fn check_annotator(&self, a: usize) -> Result<()> {
        if a >= self.log_alpha.len() {
            return Err(SvgpcrError::UnknownAnnotator(a));
        }
        Ok(())
    }

    pub fn alpha(&self, a: usize) -> Result<DMatrix<f64>> {
        self.check_annotator(a)?;
        Ok(self.log_alpha[a].map(f64::exp))
    }

    /// `E[log r_ij] = ψ(α̃_ij) − ψ(Σ_c α̃_cj)`.
    pub fn expected_log_confusion(&self, a: usize) -> Result<DMatrix<f64>> {
        let alpha = self.alpha(a)?;
        let k = alpha.nrows();
        let mut out = DMatrix::zeros(k, k);
        for j in 0..k {
            let psi_total = digamma(alpha.column(j).sum());
            for i in 0..k {
                out[(i, j)] = digamma(alpha[(i, j)]) - psi_total;
            }
        }
        Ok(out)
    }

    /// Posterior-mean confusion matrix (columns normalized).
    pub fn posterior_mean(&self, a: usize) -> Result<DMatrix<f64>> {
        let mut alpha = self.alpha(a)?;
        for mut col in alpha.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        Ok(alpha)
    }

    /// Entrywise posterior variance of the confusion matrix.
    pub fn posterior_variance(&self, a: usize) -> Result<DMatrix<f64>> {
        let alpha = self.alpha(a)?;
        let k = alpha.nrows();
        Ok(DMatrix::from_fn(k, k, |i, j| {
            let total = alpha.column(j).sum();
            let ai = alpha[(i, j)];
            ai * (total - ai) / (total * total * (total + 1.0))
        }))
    }

    fn all_expected_log(&self) -> Vec<DMatrix<f64>> {
        (0..self.num_annotators())
            .map(|a| self.expected_log_confusion(a).expect("annotator in range"))
            .collect()
    }

    /// Checks the annotator count and the labels of the batch records.
    fn check_annotations(&self, ann: &AnnotationSet, batch: &[usize]) -> Result<()> {
        if ann.num_annotators() > self.num_annotators() {
            return Err(SvgpcrError::Data(format!(
                "annotation set has {} annotators but the posterior holds {}",
                ann.num_annotators(),
                self.num_annotators()
            )));
        }
        let mut records = batch.iter().flat_map(|&n| ann.for_instance(n));
        if let Some(r) = records.find(|r| r.label >= self.num_classes()) {
            return Err(SvgpcrError::Data(format!(
                "label {} out of range for {} classes",
                r.label,
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Per-annotator soft counts `C_yj = Σ count·q_nj` over the batch records.
    fn soft_counts(&self, q: &LabelPosterior, ann: &AnnotationSet, batch: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        self.check_annotations(ann, batch)?;
        q.check_batch(batch)?;
        let k = self.num_classes();
        let mut counts = vec![DMatrix::zeros(k, k); self.num_annotators()];
        for &n in batch {
            for r in ann.for_instance(n) {
                let c = &mut counts[r.annotator];
                for j in 0..k {
                    c[(r.label, j)] += r.count as f64 * q.q[(n, j)];
                }
            }
        }
        Ok(counts)
    }

    /// `Σ_{n∈batch} Σ_{records} count·Σ_k q_nk E[log r_{y,k}]`.
    pub fn annotation_term(&self, q: &LabelPosterior, ann: &AnnotationSet, batch: &[usize]) -> Result<f64> {
        let counts = self.soft_counts(q, ann, batch)?;
        let mut total = 0.0;
        for (a, c) in counts.iter().enumerate() {
            if c.iter().all(|v| *v == 0.0) {
                continue;
            }
            total += c.component_mul(&self.expected_log_confusion(a)?).sum();
        }
        Ok(total)
    }

    /// Gradient of [`annotation_term`](Self::annotation_term) with respect to `log α̃`.
    pub fn annotation_term_grad(&self, q: &LabelPosterior, ann: &AnnotationSet, batch: &[usize]) -> Result<Vec<DMatrix<f64>>> {
        let counts = self.soft_counts(q, ann, batch)?;
        let k = self.num_classes();
        let mut grads = Vec::with_capacity(counts.len());
        for (a, c) in counts.iter().enumerate() {
            let mut g = DMatrix::zeros(k, k);
            if c.iter().any(|v| *v != 0.0) {
                let alpha = self.alpha(a)?;
                for j in 0..k {
                    let col_total = c.column(j).sum();
                    let tri_total = trigamma(alpha.column(j).sum());
                    for i in 0..k {
                        g[(i, j)] = (c[(i, j)] * trigamma(alpha[(i, j)]) - col_total * tri_total) * alpha[(i, j)];
                    }
                }
            }
            grads.push(g);
        }
        Ok(grads)
    }

    /// `Σ_a Σ_j KL(Dir(α̃ᵃ_j) ‖ Dir(αᵃ_j))`.
    pub fn dirichlet_kl(&self) -> f64 {
        let k = self.num_classes();
        let mut kl = 0.0;
        for la in &self.log_alpha {
            for j in 0..k {
                let post: Vec<f64> = la.column(j).iter().map(|v| v.exp()).collect();
                let prior: Vec<f64> = self.prior.column(j).iter().copied().collect();
                kl += dirichlet_kl_column(&post, &prior);
            }
        }
        kl
    }

    /// Gradient of [`dirichlet_kl`](Self::dirichlet_kl) with respect to `log α̃`.
    pub fn dirichlet_kl_grad(&self) -> Vec<DMatrix<f64>> {
        let k = self.num_classes();
        self.log_alpha
            .iter()
            .map(|la| {
                let alpha = la.map(f64::exp);
                let mut g = DMatrix::zeros(k, k);
                for j in 0..k {
                    let total = alpha.column(j).sum();
                    let excess: f64 = (0..k).map(|i| alpha[(i, j)] - self.prior[(i, j)]).sum();
                    let tri_total = trigamma(total);
                    for i in 0..k {
                        let a = alpha[(i, j)];
                        g[(i, j)] = ((a - self.prior[(i, j)]) * trigamma(a) - excess * tri_total) * a;
                    }
                }
                g
            })
            .collect()
    }

    /// Mean-field update of the responsibilities of the batch instances:
    /// `log q_nk = E[log p(e_k|f_n)] + Σ_records count·E[log r_{y,k}] + const`.
    ///
    /// `gp_expectations` holds one row per batch entry.
    pub fn update_responsibilities(
        &self,
        ann: &AnnotationSet,
        gp_expectations: &DMatrix<f64>,
        batch: &[usize],
        q: &mut LabelPosterior,
    ) -> Result<()> {
        self.check_annotations(ann, batch)?;
        q.check_batch(batch)?;
        let k = self.num_classes();
        if gp_expectations.nrows() != batch.len() || gp_expectations.ncols() != k {
            return Err(SvgpcrError::Shape(format!(
                "expectations are {:?}, expected {} x {k}",
                gp_expectations.shape(),
                batch.len()
            )));
        }
        let elog = self.all_expected_log();
        let mut scores = vec![0.0; k];
        for (b, &n) in batch.iter().enumerate() {
            for (j, s) in scores.iter_mut().enumerate() {
                *s = gp_expectations[(b, j)];
            }
            for r in ann.for_instance(n) {
                let e = &elog[r.annotator];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s += r.count as f64 * e[(r.label, j)];
                }
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let log_norm = max + norm.ln();
            for (j, s) in scores.iter().enumerate() {
                q.q[(n, j)] = (s - log_norm).exp();
            }
        }
        Ok(())
    }

    /// Closed-form conjugate update `α̃ᵃ_ij = αᵃ_ij + Σ_n q_nj·count(n, a, i)`
    /// over the full annotation set.
    pub fn update_alpha(&self, q: &LabelPosterior, ann: &AnnotationSet) -> Result<CrowdPosterior> {
        let all: Vec<usize> = (0..q.num_instances()).collect();
        let counts = self.soft_counts(q, ann, &all)?;
        let log_alpha = counts.iter().map(|c| (c + &self.prior).map(f64::ln)).collect();
        Ok(CrowdPosterior {
            log_alpha,
            prior: self.prior.clone(),
        })
    }
}

/// KL divergence between two Dirichlet distributions.
pub fn dirichlet_kl_column(post: &[f64], prior: &[f64]) -> f64 {
    let post_total: f64 = post.iter().sum();
    let prior_total: f64 = prior.iter().sum();
    let ln_b_prior = prior.iter().map(|v| ln_gamma(*v)).sum::<f64>() - ln_gamma(prior_total);
    let ln_b_post = post.iter().map(|v| ln_gamma(*v)).sum::<f64>() - ln_gamma(post_total);
    let psi_total = digamma(post_total);
    let cross: f64 = post
        .iter()
        .zip(prior)
        .map(|(a, b)| (a - b) * (digamma(*a) - psi_total))
        .sum();
    ln_b_prior - ln_b_post + cross
}
