//! Python bindings for the mixture-prototype head: build or load a head,
//! score feature grids, detect out-of-distribution inputs, prune components,
//! and compute the evaluation metrics from Python.

use mgproto::density::{self, ClassMixture, Decision, FeatureGrid, ModelHead};
use mgproto::metrics::{self, ScoreSet};
use mgproto::train;
use mgproto::Error;
use ndarray::{Array1, Array2, Array3};
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingFile(path) => PyFileNotFoundError::new_err(path),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_grid(values: Vec<Vec<Vec<f64>>>) -> PyResult<FeatureGrid> {
    let h = values.len();
    let w = values.first().map_or(0, |row| row.len());
    let d = values
        .first()
        .and_then(|row| row.first())
        .map_or(0, |cell| cell.len());
    let mut arr = Array3::zeros((h, w, d));
    for (i, row) in values.iter().enumerate() {
        if row.len() != w {
            return Err(PyValueError::new_err("grid rows have unequal widths"));
        }
        for (j, cell) in row.iter().enumerate() {
            if cell.len() != d {
                return Err(PyValueError::new_err("grid cells have unequal dims"));
            }
            for (k, v) in cell.iter().enumerate() {
                arr[[i, j, k]] = *v;
            }
        }
    }
    FeatureGrid::new(arr).map_err(py_err)
}

/// A per-class Gaussian-mixture prototype head.
#[pyclass]
struct Head {
    inner: ModelHead,
}

#[pymethods]
impl Head {
    /// Builds a head from nested lists: `means[c][m]` is the mean vector of
    /// component `m` of class `c`, `priors[c]` its mixture weights.
    #[staticmethod]
    fn from_parts(means: Vec<Vec<Vec<f64>>>, priors: Vec<Vec<f64>>) -> PyResult<Self> {
        if means.len() != priors.len() {
            return Err(PyValueError::new_err(
                "means and priors must list the same classes",
            ));
        }
        let mut classes = Vec::with_capacity(means.len());
        for (c, (class_means, class_priors)) in means.into_iter().zip(priors).enumerate() {
            let m = class_means.len();
            let d = class_means.first().map_or(0, |v| v.len());
            if class_means.iter().any(|v| v.len() != d) {
                return Err(PyValueError::new_err("mean vectors have unequal dims"));
            }
            let flat: Vec<f64> = class_means.into_iter().flatten().collect();
            let means = Array2::from_shape_vec((m, d), flat)
                .map_err(|e| PyValueError::new_err(e.to_string()))?;
            classes.push(
                ClassMixture::new(c, means, Array1::from_vec(class_priors)).map_err(py_err)?,
            );
        }
        Ok(Head {
            inner: ModelHead::new(classes).map_err(py_err)?,
        })
    }

    /// Loads the head section of a checkpoint file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let checkpoint = mgproto::checkpoint::load(std::path::Path::new(path)).map_err(py_err)?;
        Ok(Head {
            inner: checkpoint.head,
        })
    }

    /// Saves the head as a checkpoint file (without a network section).
    fn save(&self, path: &str) -> PyResult<()> {
        mgproto::checkpoint::save(std::path::Path::new(path), &self.inner, None).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_components(&self) -> usize {
        self.inner.num_components()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Mixture weights of class `c`.
    fn priors(&self, c: usize) -> PyResult<Vec<f64>> {
        self.check_class(c)?;
        Ok(self.inner.class(c).priors().to_vec())
    }

    /// Component mean vectors of class `c`.
    fn means(&self, c: usize) -> PyResult<Vec<Vec<f64>>> {
        self.check_class(c)?;
        Ok(self
            .inner
            .class(c)
            .means()
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect())
    }

    /// Class posterior for an `H x W x D` feature grid (nested lists).
    fn posterior(&self, grid: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        density::posterior(&to_grid(grid)?, &self.inner).map_err(py_err)
    }

    /// Marginal density of a feature grid: the out-of-distribution score.
    fn ood_score(&self, grid: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
        density::ood_score(&to_grid(grid)?, &self.inner).map_err(py_err)
    }

    /// Predicted class, or `None` when the marginal density falls below
    /// `threshold`.
    fn classify_or_abstain(
        &self,
        grid: Vec<Vec<Vec<f64>>>,
        threshold: f64,
    ) -> PyResult<Option<usize>> {
        match density::classify_or_abstain(&to_grid(grid)?, &self.inner, threshold)
            .map_err(py_err)?
        {
            Decision::Classify(c) => Ok(Some(c)),
            Decision::Abstain => Ok(None),
        }
    }

    /// Keeps the `keep` heaviest components per class. Without
    /// `renormalize`, the surviving priors keep their trained values.
    #[pyo3(signature = (keep, renormalize = false))]
    fn prune(&self, keep: usize, renormalize: bool) -> PyResult<Self> {
        Ok(Head {
            inner: train::prune_head(&self.inner, keep, renormalize).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Head(num_classes={}, num_components={}, dim={})",
            self.inner.num_classes(),
            self.inner.num_components(),
            self.inner.dim()
        )
    }
}

impl Head {
    fn check_class(&self, c: usize) -> PyResult<()> {
        if c >= self.inner.num_classes() {
            return Err(PyValueError::new_err(format!(
                "class {c} out of range for {} classes",
                self.inner.num_classes()
            )));
        }
        Ok(())
    }
}

/// Likelihood of feature `f` under an isotropic Gaussian at `mean`:
/// `exp(-pi * ||f - mean||^2)`.
#[pyfunction]
fn gaussian_likelihood(f: Vec<f64>, mean: Vec<f64>) -> PyResult<f64> {
    let f = Array1::from_vec(f);
    let mean = Array1::from_vec(mean);
    density::gaussian_likelihood(f.view(), mean.view()).map_err(py_err)
}

/// Fraction of predictions equal to their labels.
#[pyfunction]
fn accuracy(predictions: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::accuracy(&predictions, &labels).map_err(py_err)
}

/// Area under the ROC curve for ID-vs-OoD scores (higher score = more ID).
#[pyfunction]
fn auroc(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&ScoreSet::new(id_scores, ood_scores).map_err(py_err)?).map_err(py_err)
}

/// False-positive rate at the threshold giving 95% true-positive rate.
#[pyfunction]
fn fpr95(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> PyResult<f64> {
    metrics::fpr95(&ScoreSet::new(id_scores, ood_scores).map_err(py_err)?).map_err(py_err)
}

#[pymodule]
fn mgproto_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Head>()?;
    m.add_function(wrap_pyfunction!(gaussian_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(fpr95, m)?)?;
    Ok(())
}
