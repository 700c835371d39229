//! Synthetic crowds: toy feature sets with known labels, and simulated
//! annotators that relabel them through known confusion matrices.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::crowd::{AnnotationRecord, AnnotationSet};
use crate::error::{Result, SvgpcrError};

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotatorKind {
    /// `accuracy` on the diagonal, the rest spread randomly down each column.
    Reliable { accuracy: f64 },
    /// Every label equally likely whatever the true class.
    Spammer,
    /// True class `j` is reported as `(j + shift) mod K` with probability
    /// `accuracy`; the rest is spread randomly.
    Adversarial { shift: usize, accuracy: f64 },
    /// A given column-stochastic matrix.
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorSpec {
    pub kind: AnnotatorKind,
    /// Fraction of instances this annotator labels, in `(0, 1]`.
    pub coverage: f64,
}

impl AnnotatorSpec {
    pub fn full(kind: AnnotatorKind) -> Self {
        Self { kind, coverage: 1.0 }
    }
}

/// Parses `reliable:P`, `spammer`, `adversarial:SHIFT:P`, each optionally
/// followed by `@COVERAGE`.
impl FromStr for AnnotatorSpec {
    type Err = SvgpcrError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || SvgpcrError::InvalidConfig(format!(
            "cannot parse annotator '{s}'; expected reliable:P, spammer, or adversarial:SHIFT:P with optional @COVERAGE"
        ));
        let (body, coverage) = match s.split_once('@') {
            Some((b, c)) => (b, c.trim().parse::<f64>().map_err(|_| bad())?),
            None => (s, 1.0),
        };
        let parts: Vec<&str> = body.trim().split(':').map(str::trim).collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        let kind = match parts.as_slice() {
            ["reliable", p] => AnnotatorKind::Reliable { accuracy: num(p)? },
            ["spammer"] => AnnotatorKind::Spammer,
            ["adversarial", shift, p] => AnnotatorKind::Adversarial {
                shift: shift.parse().map_err(|_| bad())?,
                accuracy: num(p)?,
            },
            _ => return Err(bad()),
        };
        let spec = Self { kind, coverage };
        spec.validate()?;
        Ok(spec)
    }
}

impl AnnotatorSpec {
    fn validate(&self) -> Result<()> {
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(SvgpcrError::InvalidConfig(format!("coverage must lie in (0, 1], got {}", self.coverage)));
        }
        match &self.kind {
            AnnotatorKind::Reliable { accuracy } | AnnotatorKind::Adversarial { accuracy, .. } => {
                if !(*accuracy > 0.0 && *accuracy <= 1.0) {
                    return Err(SvgpcrError::InvalidConfig(format!("accuracy must lie in (0, 1], got {accuracy}")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Five annotators of decreasing reliability: 95%, 90%, 80%, a spammer, and
/// an adversary shifting every class by one with probability 0.9.
pub fn reference_crowd() -> Vec<AnnotatorSpec> {
    vec![
        AnnotatorSpec::full(AnnotatorKind::Reliable { accuracy: 0.95 }),
        AnnotatorSpec::full(AnnotatorKind::Reliable { accuracy: 0.90 }),
        AnnotatorSpec::full(AnnotatorKind::Reliable { accuracy: 0.80 }),
        AnnotatorSpec::full(AnnotatorKind::Spammer),
        AnnotatorSpec::full(AnnotatorKind::Adversarial { shift: 1, accuracy: 0.9 }),
    ]
}

/// Puts `p` at row `target` of column `j` and splits `1 − p` over the other
/// rows with Dirichlet(1, …, 1) weights. The last free entry absorbs rounding
/// so the column sums to one.
fn fill_column(m: &mut DMatrix<f64>, j: usize, target: usize, p: f64, rng: &mut ChaCha8Rng) {
    let k = m.nrows();
    let others: Vec<usize> = (0..k).filter(|&i| i != target).collect();
    let draws: Vec<f64> = others.iter().map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let rest = 1.0 - p;
    m[(target, j)] = p;
    let mut used = 0.0;
    for (idx, (&i, w)) in others.iter().zip(&draws).enumerate() {
        let v = if idx + 1 == others.len() {
            (rest - used).max(0.0)
        } else {
            rest * w / total
        };
        m[(i, j)] = v;
        used += v;
    }
}

/// Confusion matrix with entry `(i, j)` = P(label `i` | true class `j`).
pub fn build_confusion(kind: &AnnotatorKind, k: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if k < 2 {
        return Err(SvgpcrError::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    AnnotatorSpec::full(kind.clone()).validate()?;
    let mut m = DMatrix::zeros(k, k);
    match kind {
        AnnotatorKind::Reliable { accuracy } => {
            for j in 0..k {
                fill_column(&mut m, j, j, *accuracy, rng);
            }
        }
        AnnotatorKind::Spammer => m.fill(1.0 / k as f64),
        AnnotatorKind::Adversarial { shift, accuracy } => {
            for j in 0..k {
                fill_column(&mut m, j, (j + shift) % k, *accuracy, rng);
            }
        }
        AnnotatorKind::Explicit(given) => {
            if given.shape() != (k, k) {
                return Err(SvgpcrError::Shape(format!("explicit matrix is {:?}, expected {k}x{k}", given.shape())));
            }
            for j in 0..k {
                let col = given.column(j);
                if col.iter().any(|v| !(*v >= 0.0)) || (col.sum() - 1.0).abs() > 1e-9 {
                    return Err(SvgpcrError::InvalidConfig(format!("explicit matrix column {j} is not a distribution")));
                }
            }
            m = given.clone();
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCrowd {
    pub annotations: AnnotationSet,
    /// The matrices the labels were drawn from, one per annotator.
    pub confusions: Vec<DMatrix<f64>>,
}

/// Each annotator labels `round(coverage·N)` instances chosen at random,
/// drawing each label from the column of its true class.
pub fn generate_annotations(labels: &[usize], k: usize, specs: &[AnnotatorSpec], seed: u64) -> Result<SimulatedCrowd> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(SvgpcrError::Data(format!("true label {bad} out of range for {k} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let mut confusions = Vec::with_capacity(specs.len());
    let mut records = Vec::new();
    for (a, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let m = build_confusion(&spec.kind, k, &mut rng)?;
        let count = ((spec.coverage * n as f64).round() as usize).min(n);
        let mut covered = sample(&mut rng, n, count).into_vec();
        covered.sort_unstable();
        for i in covered {
            let col = m.column(labels[i]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut label = k - 1;
            for (c, p) in col.iter().enumerate() {
                acc += p;
                if u < acc {
                    label = c;
                    break;
                }
            }
            records.push(AnnotationRecord {
                instance: i,
                annotator: a,
                label,
                count: 1,
            });
        }
        confusions.push(m);
    }
    let mut annotations = AnnotationSet::from_records(records, specs.len())?;
    annotations.bind(n)?;
    Ok(SimulatedCrowd { annotations, confusions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Unit-variance 2-D blobs on a circle, adjacent centres six standard
    /// deviations apart.
    Gaussians,
    /// Two interleaved half circles with Gaussian noise (K = 2 only).
    TwoMoons,
}

impl FromStr for ToyKind {
    type Err = SvgpcrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" | "blobs" => Ok(ToyKind::Gaussians),
            "two_moons" | "moons" => Ok(ToyKind::TwoMoons),
            _ => Err(SvgpcrError::InvalidConfig(format!("unknown dataset kind '{s}'"))),
        }
    }
}

/// Blob separation in standard deviations.
pub const BLOB_SEPARATION: f64 = 6.0;

/// `n` labelled 2-D points; instance `i` has class `i mod K`.
pub fn make_toy_dataset(kind: ToyKind, n: usize, k: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if n == 0 {
        return Err(SvgpcrError::EmptyDataset("requested zero instances".into()));
    }
    if k < 2 {
        return Err(SvgpcrError::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = DMatrix::zeros(n, 2);
    match kind {
        ToyKind::Gaussians => {
            let radius = 0.5 * BLOB_SEPARATION / (PI / k as f64).sin();
            for (i, &c) in labels.iter().enumerate() {
                let angle = 2.0 * PI * c as f64 / k as f64;
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                x[(i, 0)] = radius * angle.cos() + e0;
                x[(i, 1)] = radius * angle.sin() + e1;
            }
        }
        ToyKind::TwoMoons => {
            if k != 2 {
                return Err(SvgpcrError::InvalidConfig(format!("two_moons has 2 classes, got {k}")));
            }
            for (i, &c) in labels.iter().enumerate() {
                let t: f64 = PI * rng.random::<f64>();
                let (px, py) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                let e0: f64 = StandardNormal.sample(&mut rng);
                let e1: f64 = StandardNormal.sample(&mut rng);
                x[(i, 0)] = px + 0.1 * e0;
                x[(i, 1)] = py + 0.1 * e1;
            }
        }
    }
    Ok((x, labels))
}
