//! Python bindings: pipeline commands with the CLI's config handling, plus
//! the standalone metrics.

use std::path::PathBuf;

use mlang_core::metrics::{self, BeatConfig, GaussianStats};
use mlang_core::motion::{MotionSequence, Part};
use mlang_core::pipeline::{
    self, exit_code, Command, ExportFormat, ExportRequest, GenerateMode, GenerateRequest, Phase, PipelineConfig,
};
use mlang_core::speech::AudioClip;
use mlang_core::Error;
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(mlang, MlangError, PyException, "A pipeline failure; subclasses follow the CLI exit codes.");
create_exception!(mlang, ConfigError, MlangError, "Bad configuration (exit code 2).");
create_exception!(mlang, MissingArtifactError, MlangError, "Missing or mismatched upstream artifact (exit code 3).");
create_exception!(mlang, DivergedTrainingError, MlangError, "Training produced a non-finite loss (exit code 4).");

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match exit_code(&e) {
        2 => ConfigError::new_err(msg),
        3 => MissingArtifactError::new_err(msg),
        4 => DivergedTrainingError::new_err(msg),
        _ => MlangError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (v.to_string(),))?.unbind())
}

fn config(path: Option<PathBuf>, seed: Option<u64>, overrides: Option<Vec<String>>) -> PyResult<PipelineConfig> {
    PipelineConfig::load(path.as_deref(), seed, &overrides.unwrap_or_default()).map_err(py_err)
}

fn execute(py: Python<'_>, command: Command, config: PipelineConfig) -> PyResult<Py<PyAny>> {
    let summary = py.detach(move || pipeline::run(&command, &config)).map_err(py_err)?;
    json_to_py(py, &summary)
}

/// The resolved configuration as a dict, exactly as a command would see it.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None, overrides=None))]
fn load_config(py: Python<'_>, config: Option<PathBuf>, seed: Option<u64>, overrides: Option<Vec<String>>) -> PyResult<Py<PyAny>> {
    let c = self::config(config, seed, overrides)?;
    json_to_py(py, &serde_json::to_value(&c).map_err(|e| py_err(e.into()))?)
}

/// Runs one pipeline stage by its CLI name and returns its summary.
#[pyfunction]
#[pyo3(signature = (command, config=None, seed=None, overrides=None, phase=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Option<Vec<String>>,
    phase: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let cmd = match command {
        "synth-data" => Command::SynthData,
        "codec-train" => Command::CodecTrain,
        "audio-fit" => Command::AudioFit,
        "text-train" => Command::TextTrain,
        "vocab-build" => Command::VocabBuild,
        "tasks-compile" => {
            let phase = phase.ok_or_else(|| ConfigError::new_err("tasks-compile needs phase='pretrain' or 'posttrain'"))?;
            Command::TasksCompile(parse::<Phase>(phase)?)
        }
        "pretrain" => Command::Pretrain,
        "posttrain" => Command::Posttrain,
        "eval" => Command::Eval,
        other => return Err(ConfigError::new_err(format!("unknown command {other:?}; use generate() or export() for those"))),
    };
    execute(py, cmd, self::config(config, seed, overrides)?)
}

/// Generates from the post-trained model and writes `output` plus its
/// `.tokens.json` record, which is returned.
#[pyfunction]
#[pyo3(signature = (
    mode, output, audio=None, caption=None, motion=None, frames=None, text_parts=None, checkpoint=None,
    config=None, seed=None, overrides=None
))]
#[allow(clippy::too_many_arguments)]
fn generate(
    py: Python<'_>,
    mode: &str,
    output: PathBuf,
    audio: Option<PathBuf>,
    caption: Option<String>,
    motion: Option<PathBuf>,
    frames: Option<usize>,
    text_parts: Option<Vec<String>>,
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    overrides: Option<Vec<String>>,
) -> PyResult<Py<PyAny>> {
    let mut req = GenerateRequest::new(parse::<GenerateMode>(mode)?, output);
    req.audio = audio;
    req.caption = caption;
    req.motion = motion;
    req.frames = frames;
    req.checkpoint = checkpoint;
    if let Some(parts) = text_parts {
        req.text_parts = parts.iter().map(|p| parse::<Part>(p)).collect::<PyResult<_>>()?;
    }
    execute(py, Command::Generate(req), self::config(config, seed, overrides)?)
}

/// Writes a motion-json file as marker CSV or motion-json.
#[pyfunction]
#[pyo3(signature = (input, output, format="csv"))]
fn export(py: Python<'_>, input: PathBuf, output: PathBuf, format: &str) -> PyResult<Py<PyAny>> {
    let req = ExportRequest {
        input,
        output,
        format: parse::<ExportFormat>(format)?,
    };
    execute(py, Command::Export(req), PipelineConfig::reduced())
}

/// `(bleu1, rouge_l)` on a 0–100 scale.
#[pyfunction]
fn text_overlap(prediction: &str, reference: &str) -> (f64, f64) {
    let s = metrics::text_overlap(prediction, reference);
    (s.bleu1, s.rouge_l)
}

fn stats(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<GaussianStats> {
    let d = cov.len();
    if cov.iter().any(|r| r.len() != d) {
        return Err(ConfigError::new_err("covariance must be square"));
    }
    let flat: Vec<f64> = cov.into_iter().flatten().collect();
    Ok(GaussianStats {
        mean,
        cov: Array2::from_shape_vec((d, d), flat).expect("checked square"),
    })
}

/// Fréchet distance between two Gaussians given as mean vectors and
/// covariance matrices (nested lists).
#[pyfunction]
fn frechet_distance(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::frechet_distance(&stats(mean_a, cov_a)?, &stats(mean_b, cov_b)?).map_err(py_err)
}

/// Beat consistency of a motion-json file against a WAV file.
#[pyfunction]
fn beat_consistency(audio: PathBuf, motion: PathBuf) -> PyResult<f64> {
    let a = AudioClip::read_wav(&audio).map_err(py_err)?;
    let m = MotionSequence::read_json(&motion).map_err(py_err)?;
    metrics::beat_consistency(&a, &m, &BeatConfig::default()).map_err(py_err)
}

#[pymodule]
pub fn mlang(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("MlangError", py.get_type::<MlangError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("MissingArtifactError", py.get_type::<MissingArtifactError>())?;
    m.add("DivergedTrainingError", py.get_type::<DivergedTrainingError>())?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(export, m)?)?;
    m.add_function(wrap_pyfunction!(text_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(beat_consistency, m)?)?;
    Ok(())
}
