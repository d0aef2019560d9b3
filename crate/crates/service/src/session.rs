//! One sampling session: a chain owned by a dedicated worker thread.
//!
//! Commands reach the worker over a channel and are applied between steps,
//! so an accepted edit is in force for the very next frame. Every edit and
//! reset is recorded against the session tick (steps executed since
//! creation); replaying that history from the initial spec reproduces the
//! trajectory bit for bit.

use std::collections::BTreeMap;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use ldam_core::frame::FrameMessage;
use ldam_core::sampler::{BurnInConfig, StepSchedule};
use ldam_core::{
    AdversarialConfig, AdversarialLoop, Chain, Checkpoint, LabeledDataset, LdamError,
    NeuronObjective, NeuronRef, OuterReport, RegularizerKind, RegularizerSpec, SamplerConfig,
    SamplerMode,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, watch};

/// Everything needed to recreate a session from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub model: String,
    pub neuron: NeuronRef,
    #[serde(default)]
    pub discriminator: Option<String>,
    #[serde(default)]
    pub config: SamplerConfig,
    /// Upper bound on the step rate; unlimited when absent.
    #[serde(default)]
    pub max_steps_per_second: Option<f64>,
    /// A frame is published every `emit_stride` steps.
    #[serde(default = "default_stride")]
    pub emit_stride: u64,
    /// When present, the discriminator is retrained on the session's own
    /// samples: each time a sample escapes (or the step cap is hit) the
    /// discriminator takes one update and the chain restarts from fresh noise.
    #[serde(default)]
    pub adversarial: Option<AdversarialConfig>,
}

fn default_stride() -> u64 {
    1
}

impl SessionSpec {
    pub fn validate(&self) -> Result<(), LdamError> {
        if self.emit_stride == 0 {
            return Err(LdamError::InvalidArgument("emit_stride must be at least 1".into()));
        }
        if let Some(r) = self.max_steps_per_second {
            if !(r.is_finite() && r > 0.0) {
                return Err(LdamError::InvalidArgument(format!(
                    "max_steps_per_second must be positive, got {r}"
                )));
            }
        }
        if self.adversarial.is_some() && self.discriminator.is_none() {
            return Err(LdamError::InvalidArgument(
                "discriminator retraining needs a discriminator model".into(),
            ));
        }
        self.config.validate()
    }
}

/// Partial update of the sampler parameters. Absent fields are unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamPatch {
    pub neuron: Option<NeuronRef>,
    pub temperature: Option<f32>,
    pub sigma: Option<f32>,
    pub schedule: Option<StepSchedule>,
    pub momentum: Option<f32>,
    pub normalize_gradients: Option<bool>,
    pub activation_weight: Option<f32>,
    /// Sets the weight of each listed regularizer kind, adding it if absent.
    pub weights: Option<BTreeMap<RegularizerKind, f32>>,
    /// Replaces the whole regularizer list.
    pub regularizers: Option<Vec<RegularizerSpec>>,
    pub init_std: Option<f32>,
    pub burn_in: Option<BurnInConfig>,
    pub avg_window: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<SamplerMode>,
}

impl ParamPatch {
    /// Names of fields that cannot change while the chain is running.
    pub fn non_tunable_fields(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.seed.is_some() {
            v.push("seed");
        }
        if self.mode.is_some() {
            v.push("mode");
        }
        v
    }

    pub fn apply(&self, cfg: &SamplerConfig) -> SamplerConfig {
        let mut c = cfg.clone();
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$f = v; })*};
        }
        set!(
            temperature,
            sigma,
            schedule,
            momentum,
            normalize_gradients,
            activation_weight,
            regularizers,
            init_std,
            burn_in,
            avg_window,
            seed,
            mode
        );
        if let Some(w) = &self.weights {
            for (&kind, &weight) in w {
                match c.regularizers.iter_mut().find(|r| r.kind == kind) {
                    Some(r) => r.weight = weight,
                    None => c.regularizers.push(RegularizerSpec { kind, weight }),
                }
            }
        }
        c
    }
}

/// A recorded change, keyed by the session tick at which it took effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryEvent {
    Edit {
        tick: u64,
        /// Wall-clock time of the edit in Unix milliseconds; not used by replay.
        #[serde(default)]
        at_ms: u64,
        config: SamplerConfig,
        neuron: NeuronRef,
    },
    Reset {
        tick: u64,
        #[serde(default)]
        at_ms: u64,
    },
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl HistoryEvent {
    pub fn tick(&self) -> u64 {
        match self {
            HistoryEvent::Edit { tick, .. } | HistoryEvent::Reset { tick, .. } => *tick,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Paused,
    /// Stopped by a failed step; `start` or `reset` clears it.
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ControlAction {
    Start,
    Pause,
    Reset,
    /// Runs `count` steps synchronously while paused.
    Step { count: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub id: String,
    pub state: RunState,
    /// Step number of the latest frame. A plain chain restarts at 1 after a
    /// reset; with discriminator retraining it counts all inner steps.
    pub step: u64,
    /// Steps executed since the session was created.
    pub tick: u64,
    pub revision: u64,
    pub burn_in_done: bool,
    pub activation: Option<f64>,
    pub disc_score: Option<f64>,
    pub neuron: NeuronRef,
    pub config: SamplerConfig,
    pub model: String,
    pub discriminator: Option<String>,
    pub error: Option<String>,
    /// Last failure to write the run directory, if any.
    pub persist_error: Option<String>,
    /// Progress of discriminator retraining, when enabled.
    pub adversarial: Option<AdversarialStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialStatus {
    /// Completed outer iterations (discriminator updates).
    pub iteration: usize,
    /// Steps taken in the current outer iteration.
    pub inner_steps: usize,
    pub last: Option<OuterReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAck {
    pub revision: u64,
    /// Step number of the first frame produced under the new parameters.
    pub applies_at_step: u64,
    pub tick: u64,
    /// Configuration in force after the patch.
    pub config: SamplerConfig,
    pub neuron: NeuronRef,
}

/// Errors surfaced to API clients.
#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Rejected(String),
    #[error(transparent)]
    Core(#[from] LdamError),
    #[error("session worker has stopped")]
    Gone,
}

/// Latest encoded frame, shared with every subscriber.
pub type FrameSlot = Option<Arc<Vec<u8>>>;

enum Command {
    Patch(ParamPatch, oneshot::Sender<Result<PatchAck, SessionError>>),
    Control(ControlAction, oneshot::Sender<Result<SessionStatus, SessionError>>),
    Status(oneshot::Sender<SessionStatus>),
    History(oneshot::Sender<(SessionSpec, Vec<HistoryEvent>, u64)>),
    Snapshot(oneshot::Sender<(SessionStatus, FrameMessage)>),
    Shutdown(oneshot::Sender<()>),
}

/// Called by the worker whenever the durable state changes.
pub type PersistHook = Box<dyn Fn(&PersistedSession) -> Result<(), String> + Send>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedSession {
    pub id: String,
    pub spec: SessionSpec,
    pub history: Vec<HistoryEvent>,
    pub tick: u64,
    pub state: RunState,
    /// PNG of the current sample next to its average, when available.
    #[serde(skip)]
    pub snapshot_png: Option<Vec<u8>>,
}

/// Resolved models for a session.
#[derive(Clone)]
pub struct SessionModels {
    pub model: Arc<Checkpoint>,
    pub discriminator: Option<Arc<Checkpoint>>,
    /// Real images for discriminator retraining.
    pub real: Option<Arc<LabeledDataset>>,
}

/// What a session steps: a plain chain, or a chain inside the discriminator
/// retraining loop.
pub enum Engine {
    Plain(Chain),
    Adversarial {
        lp: Box<AdversarialLoop>,
        last: Option<OuterReport>,
    },
}

impl Engine {
    /// Builds the engine described by `spec` with no steps taken.
    pub fn build(spec: &SessionSpec, models: &SessionModels) -> Result<Self, LdamError> {
        let obj = Arc::new(NeuronObjective::new(models.model.clone(), spec.neuron)?);
        let Some(cfg) = spec.adversarial else {
            return Ok(Engine::Plain(Chain::new(
                obj,
                models.discriminator.clone(),
                spec.config.clone(),
            )?));
        };
        let (Some(disc), Some(real)) = (&models.discriminator, &models.real) else {
            return Err(LdamError::InvalidArgument(
                "discriminator retraining needs a discriminator model and real images".into(),
            ));
        };
        let lp = AdversarialLoop::new(obj, (**disc).clone(), real.clone(), spec.config.clone(), cfg)?;
        Ok(Engine::Adversarial {
            lp: Box::new(lp),
            last: None,
        })
    }

    pub fn chain(&self) -> &Chain {
        match self {
            Engine::Plain(c) => c,
            Engine::Adversarial { lp, .. } => lp.chain(),
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Engine::Adversarial { .. })
    }

    /// Step number carried by the next frame minus one.
    pub fn step_count(&self) -> u64 {
        match self {
            Engine::Plain(c) => c.state().t,
            Engine::Adversarial { lp, .. } => lp.total_steps(),
        }
    }

    pub fn frame(&self) -> FrameMessage {
        match self {
            Engine::Plain(c) => c.frame(),
            Engine::Adversarial { lp, .. } => lp.frame(),
        }
    }

    pub fn advance(&mut self) -> Result<(), LdamError> {
        match self {
            Engine::Plain(c) => c.advance().map(|_| ()),
            Engine::Adversarial { lp, last } => {
                if let (_, Some(r)) = lp.step()? {
                    *last = Some(r);
                }
                Ok(())
            }
        }
    }

    /// Points the objective at `neuron` (if it changed) and installs `cfg`.
    fn edit(&mut self, models: &SessionModels, cfg: SamplerConfig, neuron: NeuronRef) -> Result<(), LdamError> {
        let objective = (self.chain().objective().neuron() != Some(neuron))
            .then(|| NeuronObjective::new(models.model.clone(), neuron))
            .transpose()?
            .map(Arc::new);
        match self {
            Engine::Plain(c) => {
                if let Some(o) = objective {
                    c.set_objective(o)?;
                }
                c.set_config(cfg)
            }
            Engine::Adversarial { lp, .. } => {
                if let Some(o) = objective {
                    lp.set_objective(o)?;
                }
                lp.set_sampler_config(cfg)
            }
        }
    }

    /// A plain chain restarts from its initial sample; with retraining the
    /// current outer iteration is abandoned and the trained discriminator kept.
    fn reset(&mut self) -> Result<(), LdamError> {
        match self {
            Engine::Plain(c) => c.reset(),
            Engine::Adversarial { lp, .. } => {
                lp.restart_iteration();
                Ok(())
            }
        }
    }

    fn adversarial_status(&self) -> Option<AdversarialStatus> {
        match self {
            Engine::Plain(_) => None,
            Engine::Adversarial { lp, last } => Some(AdversarialStatus {
                iteration: lp.iteration(),
                inner_steps: lp.inner_steps(),
                last: last.clone(),
            }),
        }
    }
}

/// Re-executes `history` from `spec` for `ticks` steps. Returns the engine
/// with every recorded event applied, together with the frame produced by
/// the last step (before any events recorded after it).
pub fn replay(
    spec: &SessionSpec,
    models: &SessionModels,
    history: &[HistoryEvent],
    ticks: u64,
) -> Result<(Engine, Option<FrameMessage>), LdamError> {
    let mut engine = Engine::build(spec, models)?;
    let mut events = history.iter().peekable();
    for tick in 0..ticks {
        while let Some(e) = events.next_if(|e| e.tick() == tick) {
            apply_event(&mut engine, models, e)?;
        }
        engine.advance()?;
    }
    let frame = (ticks > 0).then(|| engine.frame());
    for e in events {
        if e.tick() != ticks {
            return Err(LdamError::InvalidArgument(format!(
                "history event at tick {} lies beyond the recorded {ticks} steps",
                e.tick()
            )));
        }
        apply_event(&mut engine, models, e)?;
    }
    Ok((engine, frame))
}

fn apply_event(engine: &mut Engine, models: &SessionModels, e: &HistoryEvent) -> Result<(), LdamError> {
    match e {
        // mirrors the worker exactly so revisions line up
        HistoryEvent::Edit { config, neuron, .. } => engine.edit(models, config.clone(), *neuron),
        HistoryEvent::Reset { .. } => engine.reset(),
    }
}

/// Client handle to a session worker.
#[derive(Clone)]
pub struct SessionHandle {
    pub id: String,
    tx: mpsc::Sender<Command>,
    frames: watch::Receiver<FrameSlot>,
}

impl SessionHandle {
    /// Spawns the worker. With `restore`, the chain is rebuilt by replaying
    /// the persisted history and the session starts paused.
    pub fn spawn(
        id: String,
        spec: SessionSpec,
        models: SessionModels,
        restore: Option<(Vec<HistoryEvent>, u64)>,
        persist: PersistHook,
    ) -> Result<Self, SessionError> {
        spec.validate()?;
        let (engine, history, tick, frame) = match restore {
            Some((history, tick)) => {
                let (engine, frame) = replay(&spec, &models, &history, tick)?;
                (engine, history, tick, frame)
            }
            None => (Engine::build(&spec, &models)?, Vec::new(), 0, None),
        };
        let (tx, rx) = mpsc::channel();
        // a restored session shows the frame it last published
        let first = frame.map(|f| f.encode()).transpose()?.map(Arc::new);
        let (ftx, frx) = watch::channel(first);
        let mut worker = Worker {
            id: id.clone(),
            spec,
            models,
            engine,
            history,
            tick,
            state: RunState::Paused,
            error: None,
            persist_error: None,
            frames: ftx,
            persist,
        };
        worker.save();
        thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || worker.run(rx))
            .map_err(|e| SessionError::Rejected(format!("cannot start worker: {e}")))?;
        Ok(Self { id, tx, frames: frx })
    }

    pub fn subscribe(&self) -> watch::Receiver<FrameSlot> {
        self.frames.clone()
    }

    pub fn latest_frame(&self) -> FrameSlot {
        self.frames.borrow().clone()
    }

    async fn ask<T>(
        &self,
        make: impl FnOnce(oneshot::Sender<T>) -> Command,
    ) -> Result<T, SessionError> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(make(tx)).map_err(|_| SessionError::Gone)?;
        rx.await.map_err(|_| SessionError::Gone)
    }

    pub async fn patch(&self, p: ParamPatch) -> Result<PatchAck, SessionError> {
        self.ask(|tx| Command::Patch(p, tx)).await?
    }

    pub async fn control(&self, a: ControlAction) -> Result<SessionStatus, SessionError> {
        self.ask(|tx| Command::Control(a, tx)).await?
    }

    pub async fn status(&self) -> Result<SessionStatus, SessionError> {
        self.ask(Command::Status).await
    }

    pub async fn history(&self) -> Result<(SessionSpec, Vec<HistoryEvent>, u64), SessionError> {
        self.ask(Command::History).await
    }

    /// Current status and frame, taken atomically between steps.
    pub async fn snapshot(&self) -> Result<(SessionStatus, FrameMessage), SessionError> {
        self.ask(Command::Snapshot).await
    }

    pub async fn shutdown(&self) -> Result<(), SessionError> {
        self.ask(Command::Shutdown).await
    }
}

struct Worker {
    id: String,
    spec: SessionSpec,
    models: SessionModels,
    engine: Engine,
    history: Vec<HistoryEvent>,
    tick: u64,
    state: RunState,
    error: Option<String>,
    persist_error: Option<String>,
    frames: watch::Sender<FrameSlot>,
    persist: PersistHook,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        let mut next_due = Instant::now();
        loop {
            let cmd = match self.state {
                RunState::Running => match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(mpsc::TryRecvError::Empty) => None,
                    Err(mpsc::TryRecvError::Disconnected) => break,
                },
                RunState::Paused | RunState::Error => match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => break,
                },
            };
            if let Some(cmd) = cmd {
                if !self.handle(cmd) {
                    return;
                }
                continue;
            }
            if let Some(rate) = self.spec.max_steps_per_second.filter(|r| *r > 0.0) {
                let now = Instant::now();
                if next_due > now {
                    // wait for the next slot, staying responsive to commands
                    match rx.recv_timeout(next_due - now) {
                        Ok(c) => {
                            if !self.handle(c) {
                                return;
                            }
                            continue;
                        }
                        Err(mpsc::RecvTimeoutError::Timeout) => {}
                        Err(mpsc::RecvTimeoutError::Disconnected) => break,
                    }
                }
                next_due = Instant::now() + Duration::from_secs_f64(1.0 / rate);
            }
            self.step();
        }
        if self.state == RunState::Running {
            self.state = RunState::Paused;
        }
        self.save();
    }

    /// Returns false when the worker should exit.
    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Patch(p, reply) => {
                let _ = reply.send(self.patch(p));
            }
            Command::Control(a, reply) => {
                let r = self.control(a).map(|_| self.status());
                let _ = reply.send(r);
            }
            Command::Status(reply) => {
                let _ = reply.send(self.status());
            }
            Command::History(reply) => {
                let _ = reply.send((self.spec.clone(), self.history.clone(), self.tick));
            }
            Command::Snapshot(reply) => {
                let _ = reply.send((self.status(), self.engine.frame()));
            }
            Command::Shutdown(reply) => {
                if self.state == RunState::Running {
                    self.state = RunState::Paused;
                }
                self.save();
                let _ = reply.send(());
                return false;
            }
        }
        true
    }

    fn patch(&mut self, p: ParamPatch) -> Result<PatchAck, SessionError> {
        if self.state == RunState::Running {
            let fixed = p.non_tunable_fields();
            if !fixed.is_empty() {
                return Err(SessionError::Rejected(format!(
                    "{} cannot change while the session is running; pause it first",
                    fixed.join(" and ")
                )));
            }
        }
        let chain = self.engine.chain();
        let cfg = p.apply(chain.config());
        let current = chain.objective().neuron().unwrap_or(self.spec.neuron);
        let neuron = p.neuron.unwrap_or(current);
        // Validate everything before touching the chain so a rejected patch
        // leaves no trace.
        cfg.validate()?;
        if neuron != self.spec.neuron || p.neuron.is_some() {
            neuron.flat_index(&self.models.model.arch)?;
        }
        let has_disc = cfg.regularizers.iter().any(|r| r.kind == RegularizerKind::Discriminator);
        if has_disc && self.models.discriminator.is_none() {
            return Err(SessionError::Rejected(
                "this session has no discriminator model".into(),
            ));
        }
        if !has_disc && self.engine.is_adversarial() {
            return Err(SessionError::Rejected(
                "discriminator retraining needs the discriminator regularizer; set its weight to 0 instead".into(),
            ));
        }
        if cfg != *self.engine.chain().config() || neuron != current {
            self.engine.edit(&self.models, cfg.clone(), neuron)?;
            self.history.push(HistoryEvent::Edit {
                tick: self.tick,
                at_ms: now_ms(),
                config: cfg.clone(),
                neuron,
            });
            self.save();
        }
        Ok(PatchAck {
            revision: self.engine.chain().revision(),
            applies_at_step: self.engine.step_count() + 1,
            tick: self.tick,
            config: cfg,
            neuron,
        })
    }

    fn control(&mut self, a: ControlAction) -> Result<(), SessionError> {
        match a {
            ControlAction::Start => {
                self.error = None;
                self.state = RunState::Running;
            }
            ControlAction::Pause => {
                if self.state == RunState::Running {
                    self.state = RunState::Paused;
                }
            }
            ControlAction::Reset => {
                self.engine.reset()?;
                self.history.push(HistoryEvent::Reset {
                    tick: self.tick,
                    at_ms: now_ms(),
                });
                self.error = None;
                if self.state == RunState::Error {
                    self.state = RunState::Paused;
                }
            }
            ControlAction::Step { count } => {
                if self.state != RunState::Paused {
                    return Err(SessionError::Rejected(
                        "explicit steps need a paused session".into(),
                    ));
                }
                for _ in 0..count {
                    if !self.step() {
                        break;
                    }
                }
            }
        }
        self.save();
        Ok(())
    }

    /// Returns false if the step failed.
    fn step(&mut self) -> bool {
        match self.engine.advance() {
            Ok(()) => {
                self.tick += 1;
                if self.engine.step_count() % self.spec.emit_stride == 0 {
                    self.publish();
                }
                true
            }
            Err(e) => {
                if let LdamError::NonFiniteStep { frame, .. } = &e {
                    if let Ok(bytes) = frame.encode() {
                        self.frames.send_replace(Some(Arc::new(bytes)));
                    }
                }
                self.error = Some(e.to_string());
                self.state = RunState::Error;
                self.save();
                false
            }
        }
    }

    fn publish(&self) {
        if let Ok(bytes) = self.engine.frame().encode() {
            self.frames.send_replace(Some(Arc::new(bytes)));
        }
    }

    fn status(&self) -> SessionStatus {
        let chain = self.engine.chain();
        SessionStatus {
            id: self.id.clone(),
            state: self.state,
            step: self.engine.step_count(),
            tick: self.tick,
            revision: chain.revision(),
            burn_in_done: chain.state().burn_in.done(),
            activation: chain.activation(),
            disc_score: chain.disc_score(),
            neuron: chain.objective().neuron().unwrap_or(self.spec.neuron),
            config: chain.config().clone(),
            model: self.spec.model.clone(),
            discriminator: self.spec.discriminator.clone(),
            error: self.error.clone(),
            persist_error: self.persist_error.clone(),
            adversarial: self.engine.adversarial_status(),
        }
    }

    fn save(&mut self) {
        let frame = self.engine.frame();
        let snapshot_png = ldam_core::grid::tile_grid(
            &[frame.display.clone(), frame.averaged_display.clone()],
            frame.height as usize,
            frame.width as usize * frame.channels as usize,
            2,
        )
        .and_then(|g| g.encode_png())
        .ok();
        let record = PersistedSession {
            id: self.id.clone(),
            spec: self.spec.clone(),
            history: self.history.clone(),
            tick: self.tick,
            state: self.state,
            snapshot_png,
        };
        self.persist_error = (self.persist)(&record).err();
    }
}
