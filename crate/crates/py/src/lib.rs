//! Python bindings: corpus generation, the cascade, evaluation and the
//! gradient suite. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tipsynth::pipeline::trajfile::TrajectoryFile;
use tipsynth::pipeline::{generate_synthetic_corpus, run_pipeline, Corpus, CorpusSpec, Models, PipelineConfig, Split, Stage};
use tipsynth::score::{parse_fingering, parse_midi, FrameGrid};

fn py_err(e: tipsynth::Error) -> PyErr {
    match e {
        tipsynth::Error::Io(io) => PyIOError::new_err(io.to_string()),
        tipsynth::Error::Config(_) | tipsynth::Error::Argument(_) | tipsynth::Error::Validation { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(path: Option<PathBuf>) -> PyResult<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(py_err),
        None => {
            let mut c = PipelineConfig::default();
            c.apply_env().map_err(py_err)?;
            Ok(c)
        }
    }
}

/// Writes a synthetic corpus to `out_dir`; returns the piece count.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, pieces = 20, jitter_mm = 0.0))]
fn generate_corpus(out_dir: PathBuf, seed: u64, pieces: usize, jitter_mm: f64) -> PyResult<usize> {
    let spec = CorpusSpec { seed, pieces, jitter_mm, ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&spec, &Default::default()).map_err(py_err)?;
    corpus.save(out_dir).map_err(py_err)?;
    Ok(corpus.pieces.len())
}

/// Builds the stage-1 prior from a corpus train split into
/// `model_dir/prior.json`; returns the number of measured slots.
#[pyfunction]
fn build_priors(corpus_dir: PathBuf, model_dir: PathBuf) -> PyResult<usize> {
    let cfg = PipelineConfig { model_dir, ..PipelineConfig::default() };
    let corpus = Corpus::load(corpus_dir).map_err(py_err)?;
    let models = tipsynth::pipeline::build_priors(&cfg, &corpus.split(Split::Train), &cfg.geometry().map_err(py_err)?).map_err(py_err)?;
    models.save(&cfg).map_err(py_err)?;
    Ok(models.prior.measured())
}

/// Reads a trajectory file into a dict with `hand`, `stage`, `frames`,
/// `joints` and the flat `data` list.
#[pyfunction]
fn read_trajectory<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let f = TrajectoryFile::load(path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("hand", f.hand.tag().to_string())?;
    d.set_item("stage", f.stage)?;
    d.set_item("frames", f.frames)?;
    d.set_item("joints", f.joints)?;
    d.set_item("data", f.data)?;
    Ok(d)
}

/// Runs the cascade on one piece through `through_stage` and returns the
/// contact metrics at the configured tap. With `out_dir` the per-stage
/// trajectory files are written there.
#[pyfunction]
#[pyo3(signature = (midi, fingering, config_path = None, through_stage = "4", out_dir = None))]
fn synthesize<'py>(
    py: Python<'py>,
    midi: PathBuf,
    fingering: PathBuf,
    config_path: Option<PathBuf>,
    through_stage: &str,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_path)?;
    let through = Stage::parse(through_stage).map_err(py_err)?;
    cfg.check_models(through).map_err(py_err)?;
    let geom = cfg.geometry().map_err(py_err)?;
    let models = Models::load(&cfg).map_err(py_err)?;
    let notes = parse_midi(&std::fs::read(&midi)?).map_err(py_err)?.events;
    let text = std::fs::read_to_string(&fingering)?;
    let annotated = parse_fingering(&text, None).map_err(py_err)?.frames();
    let end = notes.iter().map(|n| n.end()).fold(0.0, f64::max);
    let frames = annotated.max(FrameGrid::covering(end).frame_count);
    let fing = parse_fingering(&text, Some(frames)).map_err(py_err)?;
    let out = py.detach(|| run_pipeline(&cfg, &models, &notes, &fing, &geom, through)).map_err(py_err)?;
    if let Some(dir) = out_dir {
        out.write(dir).map_err(py_err)?;
    }
    let tap = cfg.tap.min(through);
    let metrics = tipsynth::pipeline::evaluate_output(&out, &notes, None, &geom, &cfg, tap).map_err(py_err)?;
    to_py(py, &metrics)
}

/// Finite-difference check of every learned block, one dict per block.
#[pyfunction]
#[pyo3(signature = (seed = 0, coords = 12))]
fn gradient_suite<'py>(py: Python<'py>, seed: u64, coords: usize) -> PyResult<Bound<'py, PyAny>> {
    let checks = py.detach(|| tipsynth::gradsuite::gradient_suite(seed, coords)).map_err(py_err)?;
    to_py(py, &checks)
}

#[pymodule]
fn tipsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(build_priors, m)?)?;
    m.add_function(wrap_pyfunction!(read_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    Ok(())
}
