//! Training session. One worker thread owns the trainer and the annotation
//! set; HTTP handlers talk to it through a bounded command queue and read
//! immutable snapshots it publishes.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use volseg::features::{pca_rgb, FeatureMap};
use volseg::field::Field;
use volseg::objective::{AnnotationIndex, AnnotationSet, AnnotationStroke, ClassInfo, LossBreakdown, LossWeights};
use volseg::scene::{
    encode_class_png, encode_gray_png, encode_rgb_png, load_checkpoint, load_scene, prepare_feature_targets,
    save_checkpoint, SceneDataset, Split,
};
use volseg::trainer::{render_frame, RenderOptions, TrainConfig, Trainer};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub train: TrainConfig,
    /// Steps between snapshot publications and overlay refreshes.
    pub refresh_every: u64,
    /// Steps between status events.
    pub status_every: u64,
    pub queue_capacity: usize,
    /// Most recently annotated or viewed frames kept fresh by the worker.
    pub watched_frames: usize,
    /// Resumed from when compatible; written on pause and shutdown.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            refresh_every: 250,
            status_every: 10,
            queue_capacity: 64,
            watched_frames: 8,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingState {
    /// No scene loaded.
    Idle,
    Running,
    Paused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub state: TrainingState,
    pub iteration: u64,
    pub losses: LossBreakdown,
    pub labels: usize,
    pub strokes: usize,
    pub revision: u64,
    /// Set when the trainer stopped on a fault.
    pub diagnostic: Option<String>,
}

impl Default for Status {
    fn default() -> Self {
        Self {
            state: TrainingState::Idle,
            iteration: 0,
            losses: LossBreakdown::default(),
            labels: 0,
            strokes: 0,
            revision: 0,
            diagnostic: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameInfo {
    pub index: usize,
    pub id: String,
    pub split: Split,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSummary {
    pub root: PathBuf,
    pub frames: Vec<FrameInfo>,
    pub classes: Vec<ClassInfo>,
    pub near: f64,
    pub far: f64,
    pub has_features: bool,
}

/// Parameters published at a refresh boundary. Never mutated afterwards.
#[derive(Debug)]
pub struct Snapshot {
    pub field: Field<f32>,
    pub iteration: u64,
    pub revision: u64,
    pub options: RenderOptions,
}

/// Rendered views of one frame from one snapshot, PNG encoded.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub frame: usize,
    /// Bumped each time the worker refreshes this frame.
    pub version: u64,
    pub revision: u64,
    pub iteration: u64,
    pub segmentation: Vec<u8>,
    pub color: Vec<u8>,
    pub depth: Vec<u8>,
    pub features: Vec<u8>,
    /// Argmax class per pixel, row-major.
    pub classes: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Status(Status),
    SegmentationUpdated {
        frame: usize,
        version: u64,
        revision: u64,
        iteration: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("no scene loaded")]
    NoScene,
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("command queue is full")]
    Busy,
    #[error("{0}")]
    Internal(String),
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrokeReceipt {
    pub id: u64,
    pub pixels: usize,
    pub revision: u64,
}

type Reply<T> = oneshot::Sender<ServiceResult<T>>;

enum Command {
    LoadScene(PathBuf, Reply<SceneSummary>),
    AddStroke {
        frame: usize,
        class: u32,
        pixels: Vec<[u32; 2]>,
        reply: Reply<StrokeReceipt>,
    },
    DeleteStroke(u64, Reply<u64>),
    ListStrokes(Reply<Vec<AnnotationStroke>>),
    AddClass(String, [u8; 3], Reply<ClassInfo>),
    SetRunning(bool, Reply<Status>),
    View(usize),
    Shutdown,
}

struct Shared {
    scene: RwLock<Option<Arc<SceneDataset>>>,
    classes: RwLock<Vec<ClassInfo>>,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    status: RwLock<Status>,
    overlays: RwLock<HashMap<usize, Arc<Overlay>>>,
    events: broadcast::Sender<Event>,
    closing: watch::Sender<bool>,
}

impl Shared {
    fn set_status(&self, status: Status, announce: bool) {
        *self.status.write().expect("status lock") = status.clone();
        if announce {
            let _ = self.events.send(Event::Status(status));
        }
    }
}

/// Cheap handle shared by all request handlers.
#[derive(Clone)]
pub struct Session {
    shared: Arc<Shared>,
    commands: mpsc::Sender<Command>,
    worker: Arc<Mutex<Option<JoinHandle<()>>>>,
}

impl Session {
    /// Spawns the worker thread. Must be called outside async contexts or
    /// from a multi-threaded runtime.
    pub fn start(config: ServiceConfig) -> Self {
        let (tx, rx) = mpsc::channel(config.queue_capacity.max(1));
        let (events, _) = broadcast::channel(256);
        let shared = Arc::new(Shared {
            scene: RwLock::new(None),
            classes: RwLock::new(Vec::new()),
            snapshot: RwLock::new(None),
            status: RwLock::new(Status::default()),
            overlays: RwLock::new(HashMap::new()),
            events,
            closing: watch::channel(false).0,
        });
        let worker = Worker {
            config,
            shared: shared.clone(),
            commands: rx,
            loaded: None,
            running: false,
            diagnostic: None,
        };
        let handle = std::thread::Builder::new()
            .name("volseg-trainer".into())
            .spawn(move || worker.run())
            .expect("spawn trainer thread");
        Self {
            shared,
            commands: tx,
            worker: Arc::new(Mutex::new(Some(handle))),
        }
    }

    async fn request<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> ServiceResult<T> {
        let (tx, rx) = oneshot::channel();
        self.commands
            .try_send(make(tx))
            .map_err(|e| match e {
                mpsc::error::TrySendError::Full(_) => ServiceError::Busy,
                mpsc::error::TrySendError::Closed(_) => ServiceError::Internal("trainer worker stopped".into()),
            })?;
        rx.await
            .map_err(|_| ServiceError::Internal("trainer worker dropped the request".into()))?
    }

    pub async fn load_scene(&self, path: PathBuf) -> ServiceResult<SceneSummary> {
        self.request(|r| Command::LoadScene(path, r)).await
    }

    pub async fn add_stroke(&self, frame: usize, class: u32, pixels: Vec<[u32; 2]>) -> ServiceResult<StrokeReceipt> {
        self.request(|reply| Command::AddStroke {
            frame,
            class,
            pixels,
            reply,
        })
        .await
    }

    /// Returns the new annotation revision.
    pub async fn delete_stroke(&self, id: u64) -> ServiceResult<u64> {
        self.request(|r| Command::DeleteStroke(id, r)).await
    }

    pub async fn strokes(&self) -> ServiceResult<Vec<AnnotationStroke>> {
        self.request(Command::ListStrokes).await
    }

    pub async fn add_class(&self, name: String, color: [u8; 3]) -> ServiceResult<ClassInfo> {
        self.request(|r| Command::AddClass(name, color, r)).await
    }

    pub async fn set_running(&self, running: bool) -> ServiceResult<Status> {
        self.request(|r| Command::SetRunning(running, r)).await
    }

    /// Marks a frame as viewed so the worker keeps its overlay fresh. Dropped
    /// when the queue is full.
    pub fn mark_viewed(&self, frame: usize) {
        let _ = self.commands.try_send(Command::View(frame));
    }

    pub fn status(&self) -> Status {
        self.shared.status.read().expect("status lock").clone()
    }

    pub fn scene(&self) -> Option<Arc<SceneDataset>> {
        self.shared.scene.read().expect("scene lock").clone()
    }

    pub fn classes(&self) -> Vec<ClassInfo> {
        self.shared.classes.read().expect("classes lock").clone()
    }

    pub fn summary(&self) -> ServiceResult<SceneSummary> {
        let scene = self.scene().ok_or(ServiceError::NoScene)?;
        Ok(summarize(&scene, self.classes()))
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.shared.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.shared.events.subscribe()
    }

    /// Latest overlay for `frame`. Renders one from the current snapshot when
    /// the worker has not produced any yet. Blocking; call off the runtime.
    pub fn overlay(&self, frame: usize) -> ServiceResult<Arc<Overlay>> {
        let scene = self.scene().ok_or(ServiceError::NoScene)?;
        if frame >= scene.frames.len() {
            return Err(ServiceError::NotFound(format!("frame {frame} does not exist")));
        }
        if let Some(o) = self.shared.overlays.read().expect("overlay lock").get(&frame) {
            return Ok(o.clone());
        }
        let snapshot = self.snapshot().ok_or(ServiceError::NoScene)?;
        let overlay = Arc::new(render_overlay(&scene, &self.classes(), &snapshot, frame, 0)?);
        let mut map = self.shared.overlays.write().expect("overlay lock");
        Ok(map.entry(frame).or_insert(overlay).clone())
    }

    /// Becomes true once the server starts shutting down; event streams end.
    pub fn closing(&self) -> watch::Receiver<bool> {
        self.shared.closing.subscribe()
    }

    pub fn close_streams(&self) {
        self.shared.closing.send_replace(true);
    }

    /// Stops the worker, writing the checkpoint if one is configured.
    pub fn shutdown(&self) {
        self.close_streams();
        let _ = self.commands.try_send(Command::Shutdown);
        if let Some(h) = self.worker.lock().expect("worker lock").take() {
            let _ = h.join();
        }
    }
}

fn summarize(scene: &SceneDataset, classes: Vec<ClassInfo>) -> SceneSummary {
    SceneSummary {
        root: scene.root.clone(),
        frames: scene
            .frames
            .iter()
            .enumerate()
            .map(|(index, f)| FrameInfo {
                index,
                id: f.id.clone(),
                split: f.split,
                width: f.camera.width,
                height: f.camera.height,
            })
            .collect(),
        classes,
        near: scene.near,
        far: scene.far,
        has_features: scene.has_features(),
    }
}

/// Renders every view of `frame` from `snapshot`.
pub fn render_overlay(
    scene: &SceneDataset,
    classes: &[ClassInfo],
    snapshot: &Snapshot,
    frame: usize,
    version: u64,
) -> ServiceResult<Overlay> {
    let f = &scene.frames[frame];
    let mut options = snapshot.options;
    options.semantic = true;
    let r = render_frame(&snapshot.field, &f.camera, scene.near, scene.far, &options)
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    let (w, h) = (r.width, r.height);
    let segmentation = encode_class_png(w, h, &r.classes, classes).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let depth: Vec<u8> = r
        .depth
        .iter()
        .map(|&d| (d as f64 / scene.far * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let map = FeatureMap::new(h, w, r.feature_dim as u32, r.features.clone()).map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(Overlay {
        frame,
        version,
        revision: snapshot.revision,
        iteration: snapshot.iteration,
        segmentation,
        color: encode_rgb_png(w, h, &r.rgb),
        depth: encode_gray_png(w, h, &depth),
        features: encode_rgb_png(w, h, &pca_rgb(&map, 4096)),
        classes: r.classes,
    })
}

struct Loaded {
    dataset: Arc<SceneDataset>,
    trainer: Trainer,
    annotations: AnnotationSet,
    index: AnnotationIndex,
    watched: VecDeque<usize>,
    last: LossBreakdown,
}

struct Worker {
    config: ServiceConfig,
    shared: Arc<Shared>,
    commands: mpsc::Receiver<Command>,
    loaded: Option<Loaded>,
    running: bool,
    diagnostic: Option<String>,
}

impl Worker {
    fn run(mut self) {
        loop {
            let command = if self.running && self.loaded.is_some() {
                match self.commands.try_recv() {
                    Ok(c) => Some(c),
                    Err(mpsc::error::TryRecvError::Empty) => None,
                    Err(mpsc::error::TryRecvError::Disconnected) => break,
                }
            } else {
                match self.commands.blocking_recv() {
                    Some(c) => Some(c),
                    None => break,
                }
            };
            match command {
                Some(Command::Shutdown) => break,
                Some(c) => self.handle(c),
                None => self.train_step(),
            }
        }
        self.save_checkpoint();
    }

    fn status(&self) -> Status {
        let Some(l) = &self.loaded else {
            return Status::default();
        };
        Status {
            state: if self.running {
                TrainingState::Running
            } else {
                TrainingState::Paused
            },
            iteration: l.trainer.iteration(),
            losses: l.last,
            labels: l.annotations.labeled_pixel_count(),
            strokes: l.annotations.strokes().len(),
            revision: l.annotations.revision(),
            diagnostic: self.diagnostic.clone(),
        }
    }

    fn publish_status(&self, announce: bool) {
        self.shared.set_status(self.status(), announce);
    }

    fn handle(&mut self, command: Command) {
        match command {
            Command::LoadScene(path, reply) => {
                let r = self.load(&path);
                self.publish_status(true);
                let _ = reply.send(r);
            }
            Command::AddStroke {
                frame,
                class,
                pixels,
                reply,
            } => {
                let r = self.add_stroke(frame, class, pixels);
                self.publish_status(true);
                let _ = reply.send(r);
            }
            Command::DeleteStroke(id, reply) => {
                let r = match &mut self.loaded {
                    None => Err(ServiceError::NoScene),
                    Some(l) => match l.annotations.strokes().iter().find(|s| s.id == id).map(|s| s.frame) {
                        None => Err(ServiceError::NotFound(format!("stroke {id} does not exist"))),
                        Some(frame) => {
                            l.annotations.remove_stroke(id);
                            l.index = l.annotations.index();
                            watch(&mut l.watched, frame, self.config.watched_frames);
                            Ok(l.annotations.revision())
                        }
                    },
                };
                self.publish_status(true);
                let _ = reply.send(r);
            }
            Command::ListStrokes(reply) => {
                let r = self
                    .loaded
                    .as_ref()
                    .map(|l| l.annotations.strokes().to_vec())
                    .ok_or(ServiceError::NoScene);
                let _ = reply.send(r);
            }
            Command::AddClass(name, color, reply) => {
                let r = self.add_class(name, color);
                let _ = reply.send(r);
            }
            Command::SetRunning(running, reply) => {
                let r = if self.loaded.is_none() {
                    Err(ServiceError::NoScene)
                } else {
                    if running {
                        self.diagnostic = None;
                    } else if self.running {
                        self.publish_snapshot();
                        self.save_checkpoint();
                    }
                    self.running = running;
                    self.publish_status(true);
                    Ok(self.status())
                };
                let _ = reply.send(r);
            }
            Command::View(frame) => {
                if let Some(l) = &mut self.loaded {
                    if frame < l.dataset.frames.len() {
                        watch(&mut l.watched, frame, self.config.watched_frames);
                    }
                }
            }
            Command::Shutdown => {}
        }
    }

    fn load(&mut self, path: &Path) -> ServiceResult<SceneSummary> {
        let mut dataset = load_scene(path).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let mut config = self.config.train.clone();
        config.field.num_classes = dataset.num_classes();
        if config.loss_weights.feature > 0.0 {
            prepare_feature_targets(&mut dataset, &config.autoencoder).map_err(|e| ServiceError::Invalid(e.to_string()))?;
            if !dataset.has_targets() {
                log::info!("scene has no feature maps; feature loss disabled");
                config.loss_weights = LossWeights {
                    feature: 0.0,
                    ..config.loss_weights
                };
            }
        }
        let resumed = self
            .config
            .checkpoint
            .as_ref()
            .filter(|p| p.exists())
            .map(|p| load_checkpoint(p).and_then(|c| Trainer::from_checkpoint(config.clone(), &c)));
        let trainer = match resumed {
            Some(Ok(t)) => t,
            Some(Err(e)) => {
                log::warn!("not resuming from checkpoint: {e}");
                Trainer::new(config).map_err(|e| ServiceError::Invalid(e.to_string()))?
            }
            None => Trainer::new(config).map_err(|e| ServiceError::Invalid(e.to_string()))?,
        };
        let annotations = dataset.empty_annotations();
        let dataset = Arc::new(dataset);
        *self.shared.scene.write().expect("scene lock") = Some(dataset.clone());
        *self.shared.classes.write().expect("classes lock") = annotations.classes().to_vec();
        self.shared.overlays.write().expect("overlay lock").clear();
        self.loaded = Some(Loaded {
            dataset: dataset.clone(),
            index: annotations.index(),
            trainer,
            annotations,
            watched: VecDeque::new(),
            last: LossBreakdown::default(),
        });
        self.running = false;
        self.diagnostic = None;
        self.publish_snapshot();
        Ok(summarize(&dataset, self.shared.classes.read().expect("classes lock").clone()))
    }

    fn add_stroke(&mut self, frame: usize, class: u32, pixels: Vec<[u32; 2]>) -> ServiceResult<StrokeReceipt> {
        let l = self.loaded.as_mut().ok_or(ServiceError::NoScene)?;
        if frame >= l.dataset.frames.len() {
            return Err(ServiceError::NotFound(format!("frame {frame} does not exist")));
        }
        if class as usize >= l.annotations.num_classes() {
            return Err(ServiceError::Invalid(format!("class {class} does not exist")));
        }
        let count = pixels.len();
        let id = l
            .annotations
            .add_stroke(frame, class, pixels)
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        l.index = l.annotations.index();
        watch(&mut l.watched, frame, self.config.watched_frames);
        Ok(StrokeReceipt {
            id,
            pixels: count,
            revision: l.annotations.revision(),
        })
    }

    fn add_class(&mut self, name: String, color: [u8; 3]) -> ServiceResult<ClassInfo> {
        let l = self.loaded.as_mut().ok_or(ServiceError::NoScene)?;
        if name.trim().is_empty() {
            return Err(ServiceError::Invalid("class name is empty".into()));
        }
        l.trainer.add_class().map_err(|e| ServiceError::Internal(e.to_string()))?;
        let id = l.annotations.add_class(name, color);
        l.index = l.annotations.index();
        let classes = l.annotations.classes().to_vec();
        let info = classes[id as usize].clone();
        *self.shared.classes.write().expect("classes lock") = classes;
        self.publish_snapshot();
        Ok(info)
    }

    fn train_step(&mut self) {
        let l = self.loaded.as_mut().expect("running implies a scene");
        let outcome = catch_unwind(AssertUnwindSafe(|| l.trainer.step(&l.dataset, &l.index)));
        match outcome {
            Ok(Ok(losses)) => {
                l.last = losses;
                let it = l.trainer.iteration();
                let announce = it.is_multiple_of(self.config.status_every.max(1));
                if it.is_multiple_of(self.config.refresh_every.max(1)) {
                    self.publish_snapshot();
                    self.refresh_overlays();
                }
                self.publish_status(announce);
            }
            Ok(Err(e)) => self.fault(e.to_string()),
            Err(_) => self.fault("trainer panicked".into()),
        }
    }

    fn fault(&mut self, message: String) {
        log::error!("training paused: {message}");
        self.running = false;
        self.diagnostic = Some(message);
        self.publish_snapshot();
        self.publish_status(true);
    }

    fn publish_snapshot(&self) {
        let Some(l) = &self.loaded else { return };
        let snapshot = Snapshot {
            field: l.trainer.field().clone(),
            iteration: l.trainer.iteration(),
            revision: l.annotations.revision(),
            options: RenderOptions::from_config(l.trainer.config()),
        };
        *self.shared.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    fn refresh_overlays(&self) {
        let Some(l) = &self.loaded else { return };
        let Some(snapshot) = self.shared.snapshot.read().expect("snapshot lock").clone() else {
            return;
        };
        let classes = self.shared.classes.read().expect("classes lock").clone();
        for &frame in &l.watched {
            let version = self
                .shared
                .overlays
                .read()
                .expect("overlay lock")
                .get(&frame)
                .map_or(1, |o| o.version + 1);
            match render_overlay(&l.dataset, &classes, &snapshot, frame, version) {
                Ok(o) => {
                    let event = Event::SegmentationUpdated {
                        frame,
                        version,
                        revision: o.revision,
                        iteration: o.iteration,
                    };
                    self.shared.overlays.write().expect("overlay lock").insert(frame, Arc::new(o));
                    let _ = self.shared.events.send(event);
                }
                Err(e) => log::warn!("overlay refresh for frame {frame} failed: {e}"),
            }
        }
    }

    fn save_checkpoint(&self) {
        let (Some(path), Some(l)) = (&self.config.checkpoint, &self.loaded) else {
            return;
        };
        if let Err(e) = save_checkpoint(path, &l.trainer.checkpoint()) {
            log::warn!("checkpoint not written: {e}");
        }
    }
}

fn watch(watched: &mut VecDeque<usize>, frame: usize, limit: usize) {
    watched.retain(|&f| f != frame);
    watched.push_front(frame);
    watched.truncate(limit.max(1));
}
