//! Model runtime: deployments consume a binary input topic, run a builtin
//! function and publish a JSON `f64` array to their output topic.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::bus::{run_group, Bus, Headers, Record, Step};
use crate::codec::{self, Format};
use crate::frame::SyncPolicy;
use crate::kv::{KvError, KvStore};
use crate::metrics::Metrics;
use crate::worker::{StopFlag, Worker};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MlError {
    #[error("model `{0}` already deployed")]
    DuplicateModel(String),
    #[error("model `{0}` not found")]
    NotFound(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("decode: {0}")]
    Decode(String),
    #[error("ml runtime unavailable: {0}")]
    Unavailable(String),
}

impl From<KvError> for MlError {
    fn from(e: KvError) -> Self {
        MlError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = MlError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFn {
    Identity,
    /// `y = w . x + b`, a single output.
    Linear { weights: Vec<f64>, #[serde(default)] bias: f64 },
    /// Non-finite inputs are replaced by the previous value of that element.
    LastValueHold,
    /// Element-wise mean over the last `window` inputs.
    MovingAverage { window: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDeployment {
    pub model_id: String,
    pub input_topic: String,
    pub output_topic: String,
    pub input_schema: Vec<Format>,
    pub function: ModelFn,
}

impl ModelDeployment {
    pub fn validate(&self) -> Result<()> {
        if self.model_id.is_empty() || self.input_topic.is_empty() || self.output_topic.is_empty() {
            return Err(MlError::InvalidSchema("model_id, input_topic and output_topic are required".into()));
        }
        if self.input_schema.is_empty() {
            return Err(MlError::InvalidSchema("input schema is empty".into()));
        }
        match &self.function {
            ModelFn::Linear { weights, .. } if weights.len() != self.input_schema.len() => Err(MlError::InvalidSchema(
                format!("{} weights for {} inputs", weights.len(), self.input_schema.len()),
            )),
            ModelFn::MovingAverage { window: 0 } => Err(MlError::InvalidSchema("window must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn dead_letter_topic(&self) -> String {
        format!("ml/{}/dead-letter", self.model_id)
    }

    pub fn group(&self) -> String {
        format!("ml-{}", self.model_id)
    }
}

/// Stateful evaluator for one deployment.
#[derive(Debug, Clone)]
pub struct Evaluator {
    function: ModelFn,
    held: Vec<Option<f64>>,
    window: VecDeque<Vec<f64>>,
}

impl Evaluator {
    pub fn new(function: ModelFn) -> Self {
        Evaluator { function, held: Vec::new(), window: VecDeque::new() }
    }

    pub fn apply(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let y = match &self.function {
            ModelFn::Identity => x.to_vec(),
            ModelFn::Linear { weights, bias } => vec![weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias],
            ModelFn::LastValueHold => {
                self.held.resize(x.len(), None);
                let mut out = Vec::with_capacity(x.len());
                for (i, v) in x.iter().enumerate() {
                    if v.is_finite() {
                        self.held[i] = Some(*v);
                    }
                    out.push(self.held[i].ok_or_else(|| MlError::Decode(format!("no value held for input {i}")))?);
                }
                out
            }
            ModelFn::MovingAverage { window } => {
                self.window.push_back(x.to_vec());
                while self.window.len() > *window {
                    self.window.pop_front();
                }
                let n = self.window.len() as f64;
                (0..x.len()).map(|i| self.window.iter().map(|r| r[i]).sum::<f64>() / n).collect()
            }
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MlError::Decode("non-finite output".into()));
        }
        Ok(y)
    }
}

/// Decodes, evaluates and encodes one input record.
pub fn infer(model: &ModelDeployment, eval: &mut Evaluator, payload: &[u8]) -> Result<Vec<u8>> {
    let x = codec::decode(&model.input_schema, payload).map_err(|e| MlError::Decode(e.to_string()))?;
    let y = eval.apply(&x)?;
    Ok(serde_json::to_vec(&y).expect("json"))
}

pub fn parse_output(bytes: &[u8]) -> Option<Vec<f64>> {
    serde_json::from_slice(bytes).ok()
}

fn model_key(id: &str) -> String {
    format!("model/{id}")
}

struct Deployed {
    model: ModelDeployment,
    worker: Option<Worker>,
}

pub struct MlRuntime {
    kv: KvStore,
    bus: Arc<Bus>,
    metrics: Arc<Metrics>,
    models: Mutex<BTreeMap<String, Deployed>>,
}

impl std::fmt::Debug for MlRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MlRuntime").field("store", &self.kv.path()).finish()
    }
}

impl MlRuntime {
    pub fn open(path: impl AsRef<Path>, sync: SyncPolicy, bus: Arc<Bus>, metrics: Arc<Metrics>) -> Result<Arc<Self>> {
        let kv = KvStore::open(path, sync)?;
        let mut models = BTreeMap::new();
        for (_, m) in kv.scan_as::<ModelDeployment>("model/")? {
            models.insert(m.model_id.clone(), Deployed { model: m, worker: None });
        }
        Ok(Arc::new(MlRuntime { kv, bus, metrics, models: Mutex::new(models) }))
    }

    /// Starts inference loops for every persisted deployment.
    pub fn start(&self) {
        let mut models = self.models.lock();
        for d in models.values_mut() {
            if d.worker.is_none() {
                d.worker = Some(self.spawn(d.model.clone()));
            }
        }
    }

    pub fn shutdown(&self) {
        let workers: Vec<Worker> = self.models.lock().values_mut().filter_map(|d| d.worker.take()).collect();
        drop(workers);
    }

    fn spawn(&self, model: ModelDeployment) -> Worker {
        let bus = self.bus.clone();
        let metrics = self.metrics.clone();
        Worker::spawn(format!("ml-{}", model.model_id), move |stop| infer_loop(bus, metrics, model, stop))
    }

    pub fn deploy(&self, model: ModelDeployment) -> Result<ModelDeployment> {
        model.validate()?;
        let mut models = self.models.lock();
        if models.contains_key(&model.model_id) {
            return Err(MlError::DuplicateModel(model.model_id));
        }
        self.kv.put(&model_key(&model.model_id), &model)?;
        let worker = self.spawn(model.clone());
        models.insert(model.model_id.clone(), Deployed { model: model.clone(), worker: Some(worker) });
        Ok(model)
    }

    pub fn undeploy(&self, model_id: &str) -> Result<()> {
        let removed = {
            let mut models = self.models.lock();
            let d = models.remove(model_id).ok_or_else(|| MlError::NotFound(model_id.to_string()))?;
            self.kv.delete(&model_key(model_id))?;
            d
        };
        drop(removed);
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Result<ModelDeployment> {
        self.models
            .lock()
            .get(model_id)
            .map(|d| d.model.clone())
            .ok_or_else(|| MlError::NotFound(model_id.to_string()))
    }

    pub fn list(&self) -> Vec<ModelDeployment> {
        self.models.lock().values().map(|d| d.model.clone()).collect()
    }
}

impl Drop for MlRuntime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle(bus: &Bus, metrics: &Metrics, model: &ModelDeployment, eval: &mut Evaluator, rec: &Record) -> crate::bus::Result<()> {
    let mut headers: Headers = rec.headers.clone();
    headers.insert("x-model".into(), model.model_id.clone());
    match infer(model, eval, &rec.payload) {
        Ok(out) => {
            bus.publish(&model.output_topic, &headers, &out)?;
            Metrics::inc(&metrics.inferences);
        }
        Err(e) => {
            headers.insert("x-reason".into(), e.to_string());
            bus.publish(&model.dead_letter_topic(), &headers, &rec.payload)?;
            Metrics::inc(&metrics.dead_lettered);
        }
    }
    Ok(())
}

fn infer_loop(bus: Arc<Bus>, metrics: Arc<Metrics>, model: ModelDeployment, stop: StopFlag) {
    let mut eval = Evaluator::new(model.function.clone());
    run_group(&bus, &model.input_topic, &model.group(), &stop, |rec| {
        match handle(&bus, &metrics, &model, &mut eval, rec) {
            Ok(()) => Step::Done,
            Err(_) => Step::Retry,
        }
    });
}
