//! Python bindings: build models from the same JSON experiment
//! documents the CLI consumes, generate toy batches, run forward
//! passes and training, and drive the memory module directly.

use ndarray::ArrayD;
use numpy::{IntoPyArray, PyArrayDyn, PyReadonlyArrayDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use voxmem::backbone::{build_variant, load_checkpoint, restore_params, TokenInput};
use voxmem::cli::ExperimentConfig;
use voxmem::memory::{MemoryConfig, MemoryModule, MemoryState, TraceLevel};
use voxmem::tensor::{grad_check, with_no_grad, ParamStore, Tensor};
use voxmem::toys::{gen_batch as core_gen_batch, ToySpec};
use voxmem::trainer::{answer_loss, train_run};

fn err(e: voxmem::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(json: &str) -> PyResult<ExperimentConfig> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn token_input(
    ids: Option<Vec<Vec<usize>>>,
    feats: Option<PyReadonlyArrayDyn<f64>>,
) -> PyResult<TokenInput> {
    match (ids, feats) {
        (Some(ids), None) => Ok(TokenInput::Ids(ids)),
        (None, Some(f)) => Ok(TokenInput::Feats(f.as_array().to_owned())),
        _ => Err(PyValueError::new_err(
            "pass exactly one of ids= or feats=",
        )),
    }
}

/// A built model plus its parameter store, driven by one experiment
/// config document.
#[pyclass(unsendable)]
struct Model {
    cfg: ExperimentConfig,
    model: voxmem::backbone::Model,
    store: ParamStore,
}

#[pymethods]
impl Model {
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = parse_config(config_json)?;
        let (spec, _, _) = cfg.resolve().map_err(err)?;
        let (model, store) = build_variant(&spec, cfg.model_seed).map_err(err)?;
        Ok(Model { cfg, model, store })
    }

    /// Logits [B, N, n_classes] for discrete ids or continuous feats.
    #[pyo3(signature = (ids=None, feats=None))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        ids: Option<Vec<Vec<usize>>>,
        feats: Option<PyReadonlyArrayDyn<'py, f64>>,
    ) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
        let input = token_input(ids, feats)?;
        let logits = with_no_grad(|| self.model.forward(&input, None)).map_err(err)?;
        Ok(logits.value().as_ref().clone().into_pyarray_bound(py))
    }

    /// Train with the config's schedule; returns the run record as a
    /// JSON string (points, best accuracy, divergence flag).
    fn train(&self) -> PyResult<String> {
        let (_, toy, train_cfg) = self.cfg.resolve().map_err(err)?;
        let rec = train_run(&self.model, &self.store, &toy, &train_cfg).map_err(err)?;
        serde_json::to_string(&rec).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Mean training loss of one generated batch (no parameter update).
    fn loss_on_batch(&self, batch_index: u64) -> PyResult<f64> {
        let (_, toy, _) = self.cfg.resolve().map_err(err)?;
        let batch = core_gen_batch(&toy, batch_index).map_err(err)?;
        let loss = with_no_grad(|| {
            let logits = self.model.forward(&batch.tokens, None)?;
            answer_loss(&logits, &batch)
        })
        .map_err(err)?;
        Ok(loss.value().as_ref().iter().copied().next().unwrap())
    }

    /// Current residual-gate value σ(γ) per memory-bearing layer.
    fn gates(&self) -> Vec<f64> {
        self.model.gates()
    }

    fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(n, _)| n.to_string()).collect()
    }

    fn get_param<'py>(
        &self,
        py: Python<'py>,
        name: &str,
    ) -> PyResult<Bound<'py, PyArrayDyn<f64>>> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter {name}")))?;
        Ok(t.value().as_ref().clone().into_pyarray_bound(py))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let echo = serde_json::to_string(&self.cfg)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        voxmem::backbone::save_checkpoint(std::path::Path::new(path), &self.store, &echo)
            .map_err(err)
    }

    fn load(&self, path: &str) -> PyResult<String> {
        let (echo, params) = load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        restore_params(&self.store, &params).map_err(err)?;
        Ok(echo)
    }

    /// Central-difference gradient check of the full model on one
    /// generated batch; returns the worst relative error.
    fn gradcheck(&self) -> PyResult<f64> {
        let (_, toy, _) = self.cfg.resolve().map_err(err)?;
        let mut small = toy.clone();
        small.batch_size = 1;
        let batch = core_gen_batch(&small, 0).map_err(err)?;
        let report = grad_check(
            &self.store,
            || {
                let logits = self.model.forward(&batch.tokens, None)?;
                Ok(answer_loss(&logits, &batch)?.scale(1e-3))
            },
            3e-5,
        )
        .map_err(err)?;
        Ok(report.worst)
    }
}

/// The tensor-memory module alone: scan a token sequence and return
/// the fused readout and the final hidden volume.
#[pyclass(unsendable)]
struct Memory {
    module: MemoryModule,
    cfg: MemoryConfig,
}

#[pymethods]
impl Memory {
    #[new]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: MemoryConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut store = ParamStore::new();
        let module = MemoryModule::build(&cfg, &mut store, "mem", seed).map_err(err)?;
        Ok(Memory { module, cfg })
    }

    /// Scan feats [B, N, d]; returns (readout [B, N, d], h [B, C, D, H, W]).
    fn scan<'py>(
        &self,
        py: Python<'py>,
        feats: PyReadonlyArrayDyn<'py, f64>,
    ) -> PyResult<(Bound<'py, PyArrayDyn<f64>>, Bound<'py, PyArrayDyn<f64>>)> {
        let x = Tensor::constant(feats.as_array().to_owned());
        let (out, state, _) =
            with_no_grad(|| self.module.scan(&x, None, None, TraceLevel::Off)).map_err(err)?;
        Ok((
            out.value().as_ref().clone().into_pyarray_bound(py),
            state.h.value().as_ref().clone().into_pyarray_bound(py),
        ))
    }

    /// State element count — fixed regardless of sequence length.
    fn state_elems(&self, batch: usize) -> usize {
        MemoryState::zeros(batch, &self.cfg).elem_count()
    }

    fn gate(&self) -> f64 {
        self.module.gate_value()
    }
}

/// Generate one toy batch from a ToySpec JSON document. Returns
/// (ids_or_none, feats_or_none, answers) where answers is a list per
/// batch element of (position, label) pairs.
#[pyfunction]
fn gen_batch<'py>(
    py: Python<'py>,
    spec_json: &str,
    index: u64,
) -> PyResult<(
    Option<Vec<Vec<usize>>>,
    Option<Bound<'py, PyArrayDyn<f64>>>,
    Vec<Vec<(usize, usize)>>,
)> {
    let spec: ToySpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let batch = core_gen_batch(&spec, index).map_err(err)?;
    let (ids, feats): (Option<Vec<Vec<usize>>>, Option<ArrayD<f64>>) = match batch.tokens {
        TokenInput::Ids(ids) => (Some(ids), None),
        TokenInput::Feats(f) => (None, Some(f)),
    };
    Ok((
        ids,
        feats.map(|f| f.into_pyarray_bound(py)),
        batch.answers,
    ))
}

#[pymodule]
fn voxmem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Memory>()?;
    m.add_function(wrap_pyfunction!(gen_batch, m)?)?;
    Ok(())
}
