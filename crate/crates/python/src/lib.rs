//! Python bindings for the `svgpcr` crate.
//!
//! Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use svgpcr::crowd::AnnotationSet;
use svgpcr::data_io::{load_checkpoint, save_checkpoint, Checkpoint};
use svgpcr::kernel::SeKernel;
use svgpcr::likelihood::{gauss_hermite, prob_argmax as argmax_prob};
use svgpcr::simulator::{generate_annotations, make_toy_dataset, reference_crowd, AnnotatorSpec, ToyKind};
use svgpcr::trainer::{train, Trainer, TrainConfig};
use svgpcr::SvgpcrError;

fn to_py(e: SvgpcrError) -> PyErr {
    match e {
        SvgpcrError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("row {bad} has {} columns, expected {d}", rows[bad].len())));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Squared-exponential kernel matrix between two sets of points.
#[pyfunction]
fn kernel_matrix(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, variance: f64, lengthscale: f64) -> PyResult<Vec<Vec<f64>>> {
    let k = SeKernel::new(variance, lengthscale).map_err(to_py)?;
    Ok(rows(&k.matrix(&matrix(&a)?, &matrix(&b)?).map_err(to_py)?))
}

/// Gauss–Hermite nodes and weights for the weight function e^{−x²}.
#[pyfunction]
fn gauss_hermite_rule(points: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let rule = gauss_hermite(points).map_err(to_py)?;
    Ok((rule.nodes().to_vec(), rule.weights().to_vec()))
}

/// Probability that latent `k` is the largest of independent Gaussians.
#[pyfunction]
#[pyo3(signature = (means, variances, k, points=20))]
fn prob_argmax(means: Vec<f64>, variances: Vec<f64>, k: usize, points: usize) -> PyResult<f64> {
    if means.len() != variances.len() || k >= means.len() {
        return Err(PyValueError::new_err("means and variances must have equal length greater than k"));
    }
    let rule = gauss_hermite(points).map_err(to_py)?;
    Ok(argmax_prob(&means, &variances, k, &rule))
}

/// Toy dataset plus simulated crowd.
///
/// Returns `(features, labels, annotations, confusions)` where annotations
/// are `(instance, annotator, label)` triples. An empty `annotators` list
/// uses the five-member reference crowd.
#[pyfunction]
#[pyo3(signature = (n, k, seed, annotators=Vec::new(), dataset="gaussians"))]
#[allow(clippy::type_complexity)]
fn simulate(
    n: usize,
    k: usize,
    seed: u64,
    annotators: Vec<String>,
    dataset: &str,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<(usize, usize, usize)>, Vec<Vec<Vec<f64>>>)> {
    let kind: ToyKind = dataset.parse().map_err(to_py)?;
    let specs = if annotators.is_empty() {
        reference_crowd()
    } else {
        annotators
            .iter()
            .map(|s| s.parse::<AnnotatorSpec>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?
    };
    let (x, labels) = make_toy_dataset(kind, n, k, seed).map_err(to_py)?;
    let crowd = generate_annotations(&labels, k, &specs, seed + 1).map_err(to_py)?;
    let triples = crowd
        .annotations
        .records()
        .iter()
        .flat_map(|r| std::iter::repeat_n((r.instance, r.annotator, r.label), r.count as usize))
        .collect();
    Ok((rows(&x), labels, triples, crowd.confusions.iter().map(rows).collect()))
}

/// A trained crowdsourcing classifier.
#[pyclass]
struct Model {
    trainer: Trainer,
    annotator_ids: Vec<i64>,
}

#[pymethods]
impl Model {
    /// Train from features and `(instance, annotator, label)` triples.
    ///
    /// `config` is a TOML string with any subset of the training settings.
    #[staticmethod]
    #[pyo3(signature = (features, annotations, num_classes, config=""))]
    fn train(
        features: Vec<Vec<f64>>,
        annotations: Vec<(i64, i64, i64)>,
        num_classes: usize,
        config: &str,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = toml::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let x = matrix(&features)?;
        let mut ann = AnnotationSet::from_triples(annotations).map_err(to_py)?;
        ann.bind(x.nrows()).map_err(to_py)?;
        let (trainer, _) = train(&x, &ann, num_classes, cfg).map_err(to_py)?;
        Ok(Model {
            trainer,
            annotator_ids: ann.annotator_ids().to_vec(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        Ok(Model {
            trainer: ck.trainer,
            annotator_ids: ck.annotator_ids,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            trainer: self.trainer.clone(),
            annotator_ids: self.annotator_ids.clone(),
        };
        save_checkpoint(&ck, &path).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.trainer.model.num_classes()
    }

    #[getter]
    fn annotator_ids(&self) -> Vec<i64> {
        self.annotator_ids.clone()
    }

    /// Class probabilities for new inputs, one row per input.
    fn predict_proba(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.trainer.model.predict_proba(&matrix(&features)?).map_err(to_py)?))
    }

    /// Posterior over the true label of each training instance.
    fn responsibilities(&self) -> Vec<Vec<f64>> {
        rows(self.trainer.model.labels.matrix())
    }

    /// Posterior mean confusion matrix of each annotator, indexed
    /// `[label][true_class]`.
    fn confusion_means(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        (0..self.trainer.model.crowd.num_annotators())
            .map(|a| Ok(rows(&self.trainer.model.crowd.posterior_mean(a).map_err(to_py)?)))
            .collect()
    }
}

#[pymodule]
fn svgpcr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(gauss_hermite_rule, m)?)?;
    m.add_function(wrap_pyfunction!(prob_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
