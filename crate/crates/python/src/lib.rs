//! Python bindings: datasets, splits, the encoder, joint transition tables,
//! cascade inference, training and F1 scoring.

use std::path::PathBuf;

use cascade_hmm::data::{self, DatasetSplit, Preset, SampleSequence, SplitFile, SynthSpec};
use cascade_hmm::encoder::{EmissionScores, EncoderConfig, EncoderParams, HeadKind, YearlySeries};
use cascade_hmm::eval;
use cascade_hmm::hmm::{self, JointTransitionTable};
use cascade_hmm::training::{self, TrainConfig};
use cascade_hmm::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for cascade_hmm::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn emissions(scores: Vec<Vec<f64>>) -> Vec<EmissionScores> {
    scores.into_iter().map(EmissionScores::new).collect()
}

fn train_config(json: Option<&str>) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    cfg.validate().py()?;
    Ok(cfg)
}

/// A list of multiyear samples.
#[pyclass(module = "pycascade", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    samples: Vec<SampleSequence>,
}

#[pymethods]
impl Dataset {
    /// Reads a JSONL dataset.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset { samples: data::read_dataset(&path).py()? })
    }

    /// Samples `n` sequences from the built-in rotation benchmark.
    #[staticmethod]
    #[pyo3(signature = (n, seed, classes=6, years=6, timesteps=30, bands=4, noise_sigma=0.45))]
    fn synthetic(n: usize, seed: u64, classes: usize, years: usize, timesteps: usize, bands: usize, noise_sigma: f64) -> PyResult<Self> {
        let preset = Preset { classes, years, timesteps, bands, noise_sigma, ..Default::default() };
        let spec = SynthSpec::preset(&preset, seed).py()?;
        Ok(Dataset { samples: data::generate(&spec, n, seed).py()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&path, &self.samples).py()
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn labels(&self) -> Vec<Vec<usize>> {
        self.samples.iter().map(SampleSequence::labels).collect()
    }

    fn classes(&self) -> usize {
        data::infer_classes(&self.samples)
    }

    fn bands(&self) -> usize {
        self.samples.first().and_then(|s| s.years.first()).map_or(0, |r| r.series.bands())
    }

    /// Clusters label sequences under rotation distance and splits clusters
    /// into train, validation and test.
    #[pyo3(signature = (seed, threshold=1.0, probabilities=(0.6, 0.2, 0.2)))]
    fn split(&self, seed: u64, threshold: f64, probabilities: (f64, f64, f64)) -> PyResult<Split> {
        let clusters = data::cluster(&self.labels(), threshold).py()?;
        let (a, b, c) = probabilities;
        let split = data::stratified_split(&clusters, [a, b, c], seed).py()?;
        Ok(Split { file: SplitFile::from_split(&self.samples, &split, threshold, seed), split })
    }
}

#[pyclass(module = "pycascade", skip_from_py_object)]
#[derive(Clone)]
struct Split {
    split: DatasetSplit,
    file: SplitFile,
}

#[pymethods]
impl Split {
    #[staticmethod]
    fn read(path: PathBuf, dataset: &Dataset) -> PyResult<Self> {
        let file = SplitFile::read(&path).py()?;
        Ok(Split { split: file.to_split(&dataset.samples).py()?, file })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.file.write(&path).py()
    }

    #[getter]
    fn train(&self) -> Vec<usize> {
        self.split.train.clone()
    }

    #[getter]
    fn validation(&self) -> Vec<usize> {
        self.split.validation.clone()
    }

    #[getter]
    fn test(&self) -> Vec<usize> {
        self.split.test.clone()
    }

    #[getter]
    fn clusters(&self) -> usize {
        self.file.clusters
    }
}

/// Per-year emission model.
#[pyclass(module = "pycascade", skip_from_py_object)]
#[derive(Clone)]
struct Encoder {
    inner: EncoderParams,
}

#[pymethods]
impl Encoder {
    #[new]
    #[pyo3(signature = (classes, bands, seed=0, head="generative", d_model=64, heads=4, layers=2, d_ff=128))]
    #[allow(clippy::too_many_arguments)]
    fn new(classes: usize, bands: usize, seed: u64, head: &str, d_model: usize, heads: usize, layers: usize, d_ff: usize) -> PyResult<Self> {
        let head_kind: HeadKind = head.parse().py()?;
        let config = EncoderConfig { classes, bands, head_kind, d_model, heads, layers, d_ff, ..Default::default() };
        Ok(Encoder { inner: EncoderParams::init(config, seed).py()? })
    }

    /// Loads a checkpoint directory; returns the encoder and its stage tag.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, String)> {
        let (inner, stage) = EncoderParams::load(&path).py()?;
        Ok((Encoder { inner }, stage))
    }

    fn save(&self, path: PathBuf, stage: &str) -> PyResult<()> {
        self.inner.save(&path, stage).py()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn head(&self) -> &'static str {
        match self.inner.head_kind() {
            HeadKind::Generative => "generative",
            HeadKind::Discriminative => "discriminative",
        }
    }

    #[getter]
    fn class_prior(&self) -> Vec<f64> {
        self.inner.class_prior.clone()
    }

    /// Log-scores for one year given `rows[t][band]` and day-of-year tags.
    fn encode(&self, rows: Vec<Vec<f64>>, days: Vec<u32>) -> PyResult<Vec<f64>> {
        let series = YearlySeries::from_rows(&rows, days).py()?;
        Ok(self.inner.encode(&series).py()?.log_scores)
    }
}

/// Joint label priors for consecutive year pairs (order 1) or triples (order 2).
#[pyclass(module = "pycascade", skip_from_py_object)]
#[derive(Clone)]
struct JointTable {
    inner: JointTransitionTable,
}

#[pymethods]
impl JointTable {
    #[staticmethod]
    fn uniform(order: usize, classes: usize, years: usize) -> PyResult<Self> {
        Ok(JointTable { inner: JointTransitionTable::uniform(order, classes, years).py()? })
    }

    /// Builds a table from flattened joint probabilities, one list per table.
    #[staticmethod]
    fn from_probabilities(order: usize, classes: usize, years: usize, probabilities: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(JointTable { inner: JointTransitionTable::from_probabilities(order, classes, years, probabilities).py()? })
    }

    /// Label co-occurrence counts of the training split with additive smoothing.
    #[staticmethod]
    #[pyo3(signature = (dataset, split, order, alpha=1.0))]
    fn estimate(dataset: &Dataset, split: &Split, order: usize, alpha: f64) -> PyResult<Self> {
        let classes = dataset.classes();
        Ok(JointTable { inner: training::init_table(&dataset.samples, &split.split, classes, order, alpha).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, String)> {
        let (inner, stage) = JointTransitionTable::load(&path).py()?;
        Ok((JointTable { inner }, stage))
    }

    fn save(&self, path: PathBuf, stage: &str) -> PyResult<()> {
        self.inner.save(&path, stage).py()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn years(&self) -> usize {
        self.inner.years()
    }

    fn log_joint(&self, t: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.log_joint(t).py()?.to_vec())
    }
}

/// Fused per-year posteriors from `log_scores[year][class]`.
#[pyfunction]
fn cascade(table: &JointTable, log_scores: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(hmm::cascade(&table.inner, &emissions(log_scores)).py()?.posteriors)
}

/// Most probable joint label sequence.
#[pyfunction]
fn viterbi(table: &JointTable, log_scores: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    hmm::viterbi(&table.inner, &emissions(log_scores)).py()
}

#[pyfunction]
fn rotation_hamming(a: Vec<usize>, b: Vec<usize>) -> PyResult<usize> {
    data::rotation_hamming(&a, &b).py()
}

/// Trains a fresh encoder; `config` is a JSON training configuration.
/// Returns the encoder and the JSON report.
#[pyfunction]
#[pyo3(signature = (dataset, split, config=None, d_model=64, heads=4, layers=2, d_ff=128))]
#[allow(clippy::too_many_arguments)]
fn train_emission(
    py: Python<'_>,
    dataset: &Dataset,
    split: &Split,
    config: Option<&str>,
    d_model: usize,
    heads: usize,
    layers: usize,
    d_ff: usize,
) -> PyResult<(Encoder, String)> {
    let cfg = train_config(config)?;
    let enc_cfg = EncoderConfig { d_model, heads, layers, d_ff, classes: dataset.classes(), bands: dataset.bands(), ..Default::default() };
    let (inner, report) = py.detach(|| training::train_emission(&dataset.samples, &split.split, enc_cfg, &cfg)).py()?;
    Ok((Encoder { inner }, serde_json::to_string(&report).expect("report serializes")))
}

/// Jointly fine-tunes an encoder and table through the cascade.
#[pyfunction]
#[pyo3(signature = (encoder, table, dataset, split, config=None))]
fn finetune(
    py: Python<'_>,
    encoder: &Encoder,
    table: &JointTable,
    dataset: &Dataset,
    split: &Split,
    config: Option<&str>,
) -> PyResult<(Encoder, JointTable, String)> {
    let mut cfg = train_config(config)?;
    cfg.hmm_order = table.inner.order();
    let (e, t, report) = py
        .detach(|| training::finetune_cascade(encoder.inner.clone(), table.inner.clone(), &dataset.samples, &split.split, &cfg))
        .py()?;
    Ok((Encoder { inner: e }, JointTable { inner: t }, serde_json::to_string(&report).expect("report serializes")))
}

/// Predicted labels per sample; emission-only when `table` is None.
#[pyfunction]
#[pyo3(signature = (encoder, dataset, table=None, prior_correction=true))]
fn predict(encoder: &Encoder, dataset: &Dataset, table: Option<&JointTable>, prior_correction: bool) -> PyResult<Vec<Vec<usize>>> {
    dataset
        .samples
        .iter()
        .map(|s| Ok(training::predict(&encoder.inner, table.map(|t| &t.inner), s, prior_correction).py()?.labels))
        .collect()
}

/// Pooled F1 report as `(mean_f1, accuracy, per_class_f1)`.
#[pyfunction]
fn f1_score(predictions: Vec<usize>, references: Vec<usize>, classes: usize) -> PyResult<(f64, f64, Vec<f64>)> {
    let report = eval::f1_report(&eval::score(&predictions, &references, classes).py()?);
    Ok((report.mean_f1, report.accuracy, report.per_class.iter().map(|c| c.f1).collect()))
}

#[pymodule]
fn pycascade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Split>()?;
    m.add_class::<Encoder>()?;
    m.add_class::<JointTable>()?;
    m.add_function(wrap_pyfunction!(cascade, m)?)?;
    m.add_function(wrap_pyfunction!(viterbi, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_hamming, m)?)?;
    m.add_function(wrap_pyfunction!(train_emission, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    Ok(())
}
