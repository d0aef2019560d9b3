//! Checkpoint registry backed by a directory of `*.ckpt` files, plus
//! background training jobs that add to it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;

use ldam_core::adversarial::{pretrain_discriminator, DEFAULT_PRETRAIN_STEPS};
use ldam_core::dataset::{load_mnist, Split};
use ldam_core::model::build_discriminator;
use ldam_core::train::{train_classifier_with, EpochReport};
use ldam_core::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ApiError;

pub const CHECKPOINT_EXT: &str = "ckpt";

/// Model ids double as file stems, so only a conservative alphabet is allowed.
pub fn check_id(id: &str) -> Result<(), ApiError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!(
            "invalid id `{id}`: use letters, digits, '-', '_' or '.'"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub num_layers: usize,
    pub num_params: usize,
    pub meta: CheckpointMeta,
}

impl ModelInfo {
    fn of(id: &str, c: &Checkpoint) -> Self {
        Self {
            id: id.to_string(),
            arch: c.arch.name.clone(),
            input_shape: c.arch.input_shape.clone(),
            num_layers: c.arch.layers.len(),
            num_params: c.num_params(),
            meta: c.meta.clone(),
        }
    }
}

/// Loads checkpoints lazily and keeps them shared. A file that changes on
/// disk after being loaded is not re-read; training jobs write new ids.
pub struct ModelStore {
    dir: PathBuf,
    cache: Mutex<HashMap<String, Arc<Checkpoint>>>,
}

impl ModelStore {
    pub fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.{CHECKPOINT_EXT}"))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Checkpoint>, ApiError> {
        check_id(id)?;
        if let Some(c) = self.cache.lock().expect("model cache").get(id) {
            return Ok(c.clone());
        }
        let path = self.path_of(id);
        if !path.is_file() {
            return Err(ApiError::NotFound(format!("no model `{id}` in {}", self.dir.display())));
        }
        let ckpt = Arc::new(load_checkpoint(&path)?);
        self.cache
            .lock()
            .expect("model cache")
            .insert(id.to_string(), ckpt.clone());
        Ok(ckpt)
    }

    /// Every readable checkpoint in the directory, sorted by id. Unreadable
    /// files are skipped with a warning.
    pub fn list(&self) -> Result<Vec<ModelInfo>, ApiError> {
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ApiError::Internal(e.to_string())),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
            .filter(|id| check_id(id).is_ok())
            .collect();
        ids.sort();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            match self.get(&id) {
                Ok(c) => out.push(ModelInfo::of(&id, &c)),
                Err(e) => tracing::warn!("skipping model {id}: {e}"),
            }
        }
        Ok(out)
    }

    pub fn insert(&self, id: &str, ckpt: Checkpoint) -> Result<(), ApiError> {
        check_id(id)?;
        save_checkpoint(&ckpt, &self.path_of(id))?;
        self.cache
            .lock()
            .expect("model cache")
            .insert(id.to_string(), Arc::new(ckpt));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Classifier,
    /// Real-vs-noise discriminator, warm-started for adversarial sessions.
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    /// Id (file stem) of the resulting checkpoint. Classifier jobs also write
    /// `<id>-avg` and `<id>-snapshot-NN`.
    pub id: String,
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub config: TrainConfig,
    /// Optimizer steps for discriminator jobs.
    #[serde(default = "default_disc_steps")]
    pub disc_steps: usize,
    /// Train on the first `limit` training images only.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_disc_steps() -> usize {
    DEFAULT_PRETRAIN_STEPS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub id: String,
    pub request: TrainRequest,
    pub state: JobState,
    pub epochs: Vec<EpochReport>,
    /// Model ids written by the job.
    pub models: Vec<String>,
    pub error: Option<String>,
}

pub type JobTable = Arc<Mutex<HashMap<String, TrainJob>>>;

/// Starts `req` on its own thread and returns the job id immediately.
pub fn spawn_training(
    store: Arc<ModelStore>,
    data_dir: Option<PathBuf>,
    jobs: JobTable,
    req: TrainRequest,
) -> Result<String, ApiError> {
    check_id(&req.id)?;
    if req.kind == ModelKind::Classifier {
        req.config.validate()?;
    }
    let data_dir = data_dir.ok_or_else(|| {
        ApiError::BadRequest(format!(
            "training needs data: start the service with {} set",
            ldam_core::dataset::DATA_DIR_ENV
        ))
    })?;
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    jobs.lock().expect("job table").insert(
        job_id.clone(),
        TrainJob {
            id: job_id.clone(),
            request: req.clone(),
            state: JobState::Running,
            epochs: Vec::new(),
            models: Vec::new(),
            error: None,
        },
    );
    let jid = job_id.clone();
    thread::Builder::new()
        .name(format!("train-{job_id}"))
        .spawn(move || {
            let result = run_job(&store, &data_dir, &req, |r| {
                if let Some(j) = jobs.lock().expect("job table").get_mut(&jid) {
                    j.epochs.push(r.clone());
                }
            });
            let mut table = jobs.lock().expect("job table");
            let Some(job) = table.get_mut(&jid) else { return };
            match result {
                Ok(models) => {
                    job.state = JobState::Done;
                    job.models = models;
                }
                Err(e) => {
                    tracing::warn!("training job {jid} failed: {e}");
                    job.state = JobState::Failed;
                    job.error = Some(e.to_string());
                }
            }
        })
        .map_err(|e| ApiError::Internal(format!("cannot start training thread: {e}")))?;
    Ok(job_id)
}

fn run_job(
    store: &ModelStore,
    data_dir: &Path,
    req: &TrainRequest,
    progress: impl FnMut(&EpochReport),
) -> Result<Vec<String>, ApiError> {
    let mut train = load_mnist(data_dir, Split::Train)?;
    if let Some(n) = req.limit {
        train = train.take(n)?;
    }
    match req.kind {
        ModelKind::Classifier => {
            let test = load_mnist(data_dir, Split::Test)?;
            let out = train_classifier_with(&req.config, &train, Some(&test), progress)?;
            let paths = out.save(store.dir(), &req.id)?;
            Ok(paths
                .iter()
                .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .collect())
        }
        ModelKind::Discriminator => {
            let init = build_discriminator(req.config.seed);
            let d = pretrain_discriminator(
                &init,
                &train,
                req.disc_steps,
                16,
                0.01,
                ldam_core::sampler::DEFAULT_INIT_STD,
                req.config.seed,
            )?;
            store.insert(&req.id, d)?;
            Ok(vec![req.id.clone()])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldam_core::build_lenet;

    #[test]
    fn ids_reject_path_tricks() {
        for bad in ["", "../x", "a/b", ".hidden", "a b"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
        assert!(check_id("lenet-seed0_avg.v2").is_ok());
    }

    #[test]
    fn store_lists_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::new(dir.path().to_path_buf());
        assert!(store.list().unwrap().is_empty());
        store.insert("m1", build_lenet(3)).unwrap();
        std::fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
        let list = store.list().unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list[0].id, "m1");
        assert_eq!(list[0].input_shape, vec![1, 28, 28]);
        assert!(matches!(store.get("missing"), Err(ApiError::NotFound(_))));
        let a = store.get("m1").unwrap();
        let b = store.get("m1").unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }
}
