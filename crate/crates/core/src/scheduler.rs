//! Pipelined inverse-root computation.
//!
//! The training thread owns every [`PreconditionerState`]. At gather
//! boundaries (`t % kappa == 0`) it adopts finished roots and hands deep
//! copies of the current statistics to a pool of worker threads. The step
//! itself never waits for a worker, so a root is at most two intervals stale
//! when workers keep up.
//!
//! `SyncDelayed` computes roots inline and releases each result exactly
//! `delay_steps` later, which makes staleness reproducible bit for bit.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ShampooConfig;
use crate::linalg::{mat_power_oracle, Matrix};
use crate::root::{inverse_pth_root, RootConfig, RootDiagnostics, RootError};
use crate::state::{Adoption, PreconditionerState, RootPair, Side};

#[derive(Debug, Clone, PartialEq)]
pub struct RootJob {
    pub tensor_id: usize,
    pub side: Side,
    /// Deep copy of the statistic at submission time.
    pub snapshot: Matrix,
    pub snapshot_step: u64,
    pub exponent: f64,
    pub root_cfg: RootConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootResult {
    pub tensor_id: usize,
    pub side: Side,
    pub root: Matrix,
    pub snapshot_step: u64,
    pub diagnostics: RootDiagnostics,
    pub compute_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerMode {
    Async { workers: usize },
    SyncDelayed { delay_steps: u64 },
}

impl SchedulerMode {
    /// Async with one worker per core, minus the training thread.
    pub fn default_async() -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        SchedulerMode::Async {
            workers: cores.saturating_sub(1).max(1),
        }
    }
}

/// Computes the root for one job. Swappable so tests can stand in slow or
/// instantaneous workers.
pub type RootComputer = Arc<dyn Fn(&RootJob) -> Result<(Matrix, RootDiagnostics), RootError> + Send + Sync>;

/// Coupled Newton; on non-convergence retry once with ten times the ridge,
/// then fall back to the eigendecomposition.
pub fn compute_with_fallback(job: &RootJob) -> Result<(Matrix, RootDiagnostics), RootError> {
    let cfg = job.root_cfg;
    let mut last_ridge = None;
    if let Ok((x, diag)) = inverse_pth_root(&job.snapshot, &cfg) {
        if diag.converged {
            return Ok((x, diag));
        }
        last_ridge = Some(diag.ridge);
    }
    let wider = RootConfig {
        ridge_rel: cfg.ridge_rel * 10.0,
        ridge_abs: cfg.ridge_abs * 10.0,
        ..cfg
    };
    if let Ok((x, diag)) = inverse_pth_root(&job.snapshot, &wider) {
        if diag.converged {
            log::debug!("root for tensor {} converged only with 10x ridge", job.tensor_id);
            return Ok((x, diag));
        }
        last_ridge = Some(diag.ridge);
    }
    let ridge = last_ridge.ok_or_else(|| {
        RootError::InvalidConfig(format!("statistics of tensor {} rejected by root solver", job.tensor_id))
    })?;
    log::warn!(
        "coupled Newton did not converge for tensor {} ({}); using eigendecomposition",
        job.tensor_id,
        job.side.name()
    );
    let mut a_hat = job.snapshot.symmetrized()?;
    a_hat.add_diagonal(ridge);
    let x = mat_power_oracle(&a_hat, -1.0 / cfg.p as f64)?;
    Ok((
        x,
        RootDiagnostics {
            iterations: 0,
            residual: 0.0,
            lambda_max_estimate: 0.0,
            ridge,
            condition_estimate: f64::NAN,
            converged: true,
        },
    ))
}

pub fn default_computer() -> RootComputer {
    Arc::new(compute_with_fallback)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submit,
    Complete,
    Adopt,
    Drop,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Submit => "submit",
            EventKind::Complete => "complete",
            EventKind::Adopt => "adopt",
            EventKind::Drop => "drop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerEvent {
    pub step: u64,
    pub kind: EventKind,
    pub tensor_id: usize,
    /// `None` for events about a whole root pair.
    pub side: Option<Side>,
    pub snapshot_step: u64,
    pub ms: f64,
}

pub const EVENTS_CSV_HEADER: &str = "step,event,tensor_id,side,snapshot_step,ms";

pub fn events_csv(events: &[SchedulerEvent]) -> String {
    let mut out = String::from(EVENTS_CSV_HEADER);
    out.push('\n');
    for e in events {
        let side = e.side.map_or("both", Side::name);
        out.push_str(&format!(
            "{},{},{},{},{},{:.3}\n",
            e.step,
            e.kind.name(),
            e.tensor_id,
            side,
            e.snapshot_step,
            e.ms
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdoptionEvent {
    pub step: u64,
    pub tensor_id: usize,
    pub snapshot_step: u64,
}

type Completion = Result<RootResult, (usize, Side, u64, RootError)>;

fn run_job(computer: &RootComputer, job: &RootJob) -> Completion {
    let start = Instant::now();
    match computer(job) {
        Ok((root, diagnostics)) => Ok(RootResult {
            tensor_id: job.tensor_id,
            side: job.side,
            root,
            snapshot_step: job.snapshot_step,
            diagnostics,
            compute_ms: start.elapsed().as_secs_f64() * 1e3,
        }),
        Err(e) => Err((job.tensor_id, job.side, job.snapshot_step, e)),
    }
}

#[derive(Default)]
struct Queue {
    jobs: VecDeque<RootJob>,
    running: usize,
    shutdown: bool,
}

struct Shared {
    queue: Mutex<Queue>,
    changed: Condvar,
}

struct WorkerPool {
    shared: Arc<Shared>,
    results: Receiver<Completion>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    fn new(workers: usize, computer: RootComputer) -> Self {
        let shared = Arc::new(Shared {
            queue: Mutex::new(Queue::default()),
            changed: Condvar::new(),
        });
        let (tx, rx) = mpsc::channel();
        let handles = (0..workers.max(1))
            .map(|i| {
                let shared = Arc::clone(&shared);
                let tx: Sender<Completion> = tx.clone();
                let computer = Arc::clone(&computer);
                std::thread::Builder::new()
                    .name(format!("root-worker-{i}"))
                    .spawn(move || worker_loop(&shared, &tx, &computer))
                    .expect("spawn root worker")
            })
            .collect();
        Self {
            shared,
            results: rx,
            handles,
        }
    }

    /// Queues a job; an unstarted job for the same `(tensor, side)` is
    /// replaced in place. Returns `true` when something was superseded.
    fn submit(&self, job: RootJob) -> bool {
        let mut q = self.shared.queue.lock().expect("queue lock");
        let existing = q
            .jobs
            .iter_mut()
            .find(|j| j.tensor_id == job.tensor_id && j.side == job.side);
        let superseded = match existing {
            Some(slot) => {
                *slot = job;
                true
            }
            None => {
                q.jobs.push_back(job);
                false
            }
        };
        drop(q);
        self.shared.changed.notify_all();
        superseded
    }

    fn wait_idle(&self) {
        let mut q = self.shared.queue.lock().expect("queue lock");
        while !q.jobs.is_empty() || q.running > 0 {
            q = self.shared.changed.wait(q).expect("queue lock");
        }
    }
}

fn worker_loop(shared: &Shared, tx: &Sender<Completion>, computer: &RootComputer) {
    loop {
        let job = {
            let mut q = shared.queue.lock().expect("queue lock");
            loop {
                if q.shutdown {
                    return;
                }
                if let Some(job) = q.jobs.pop_front() {
                    q.running += 1;
                    break job;
                }
                q = shared.changed.wait(q).expect("queue lock");
            }
        };
        let done = run_job(computer, &job);
        let _ = tx.send(done);
        shared.queue.lock().expect("queue lock").running -= 1;
        shared.changed.notify_all();
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        {
            let mut q = self.shared.queue.lock().expect("queue lock");
            q.shutdown = true;
            q.jobs.clear();
        }
        self.shared.changed.notify_all();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

enum Backend {
    Async(WorkerPool),
    SyncDelayed {
        delay: u64,
        computer: RootComputer,
        /// `(release_step, completion)` in submission order.
        pending: VecDeque<(u64, Completion)>,
    },
}

pub struct Scheduler {
    kappa: u64,
    submit_every: u64,
    root_cfg: RootConfig,
    backend: Backend,
    /// Finished results not yet adopted.
    mailbox: Vec<RootResult>,
    events: Vec<SchedulerEvent>,
}

impl Scheduler {
    pub fn new(mode: SchedulerMode, cfg: &ShampooConfig) -> Self {
        Self::with_computer(mode, cfg, default_computer())
    }

    pub fn with_computer(mode: SchedulerMode, cfg: &ShampooConfig, computer: RootComputer) -> Self {
        let backend = match mode {
            SchedulerMode::Async { workers } => Backend::Async(WorkerPool::new(workers, computer)),
            SchedulerMode::SyncDelayed { delay_steps } => Backend::SyncDelayed {
                delay: delay_steps,
                computer,
                pending: VecDeque::new(),
            },
        };
        Self {
            kappa: cfg.kappa.max(1),
            submit_every: cfg.kappa.max(1) * cfg.root_update_interval.max(1),
            root_cfg: cfg.root_cfg,
            backend,
            mailbox: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[SchedulerEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<SchedulerEvent> {
        std::mem::take(&mut self.events)
    }

    fn event(&mut self, step: u64, kind: EventKind, tensor_id: usize, side: Option<Side>, snapshot_step: u64, ms: f64) {
        self.events.push(SchedulerEvent {
            step,
            kind,
            tensor_id,
            side,
            snapshot_step,
            ms,
        });
    }

    /// Called once per training step, after statistics were updated and
    /// before the update uses the roots.
    pub fn on_step(&mut self, t: u64, states: &mut [PreconditionerState]) -> Vec<AdoptionEvent> {
        let submit = t % self.submit_every == 0;
        match self.backend {
            Backend::Async(_) => {
                if t % self.kappa != 0 {
                    return Vec::new();
                }
                self.collect_async(t);
                let adopted = self.adopt(t, states);
                if submit {
                    self.submit_all(t, states);
                }
                adopted
            }
            Backend::SyncDelayed { .. } => {
                if submit {
                    self.submit_all(t, states);
                }
                self.release_due(t);
                self.adopt(t, states)
            }
        }
    }

    fn jobs_for(&self, states: &[PreconditionerState]) -> Vec<RootJob> {
        let mut jobs = Vec::new();
        for (tensor_id, state) in states.iter().enumerate() {
            for side in state.sides() {
                let factor = state.factor(side).expect("side present");
                jobs.push(RootJob {
                    tensor_id,
                    side,
                    snapshot: factor.stats.clone(),
                    snapshot_step: state.stats_step,
                    exponent: factor.exponent,
                    root_cfg: self.root_cfg.with_p(factor.root_order()),
                });
            }
        }
        jobs
    }

    fn submit_all(&mut self, t: u64, states: &[PreconditionerState]) {
        let jobs = self.jobs_for(states);
        for job in jobs {
            self.event(t, EventKind::Submit, job.tensor_id, Some(job.side), job.snapshot_step, 0.0);
            match &mut self.backend {
                Backend::Async(pool) => {
                    if pool.submit(job) {
                        log::debug!("superseded a queued root job at step {t}");
                    }
                }
                Backend::SyncDelayed {
                    delay,
                    computer,
                    pending,
                } => {
                    let done = run_job(computer, &job);
                    pending.push_back((t + *delay, done));
                }
            }
        }
    }

    fn receive(&mut self, t: u64, done: Completion) {
        match done {
            Ok(result) => {
                self.event(
                    t,
                    EventKind::Complete,
                    result.tensor_id,
                    Some(result.side),
                    result.snapshot_step,
                    result.compute_ms,
                );
                self.mailbox.push(result);
            }
            Err((tensor_id, side, snapshot_step, err)) => {
                log::warn!("root job for tensor {tensor_id} ({}) failed: {err}; keeping previous root", side.name());
                self.event(t, EventKind::Drop, tensor_id, Some(side), snapshot_step, 0.0);
            }
        }
    }

    fn collect_async(&mut self, t: u64) {
        let mut done = Vec::new();
        if let Backend::Async(pool) = &self.backend {
            while let Ok(c) = pool.results.try_recv() {
                done.push(c);
            }
        }
        for c in done {
            self.receive(t, c);
        }
    }

    fn release_due(&mut self, t: u64) {
        let mut due = Vec::new();
        if let Backend::SyncDelayed { pending, .. } = &mut self.backend {
            while pending.front().is_some_and(|(release, _)| *release <= t) {
                due.push(pending.pop_front().expect("front exists").1);
            }
        }
        for c in due {
            self.receive(t, c);
        }
    }

    /// Adopts, per tensor, the newest snapshot for which every required side
    /// has a result. Older results are discarded; newer partial ones wait.
    fn adopt(&mut self, t: u64, states: &mut [PreconditionerState]) -> Vec<AdoptionEvent> {
        if self.mailbox.is_empty() {
            return Vec::new();
        }
        let mut by_tensor: BTreeMap<usize, Vec<RootResult>> = BTreeMap::new();
        for r in self.mailbox.drain(..) {
            by_tensor.entry(r.tensor_id).or_default().push(r);
        }
        let mut adopted = Vec::new();
        for (tensor_id, mut results) in by_tensor {
            let Some(state) = states.get_mut(tensor_id) else {
                log::warn!("dropping roots for unknown tensor {tensor_id}");
                continue;
            };
            let needs_left = state.left.is_some();
            let needs_right = state.right.is_some();
            let mut steps: Vec<u64> = results.iter().map(|r| r.snapshot_step).collect();
            steps.sort_unstable();
            steps.dedup();
            let complete = steps.iter().rev().copied().find(|&s| {
                let has = |side| results.iter().any(|r| r.snapshot_step == s && r.side == side);
                (!needs_left || has(Side::Left)) && (!needs_right || has(Side::Right))
            });
            if let Some(step) = complete {
                let take = |results: &mut Vec<RootResult>, side| {
                    results
                        .iter()
                        .rposition(|r| r.snapshot_step == step && r.side == side)
                        .map(|i| results.swap_remove(i).root)
                };
                let pair = RootPair {
                    snapshot_step: step,
                    left: if needs_left { take(&mut results, Side::Left) } else { None },
                    right: if needs_right { take(&mut results, Side::Right) } else { None },
                };
                match state.adopt_roots(pair) {
                    Ok(Adoption::Adopted) => {
                        self.event(t, EventKind::Adopt, tensor_id, None, step, 0.0);
                        adopted.push(AdoptionEvent {
                            step: t,
                            tensor_id,
                            snapshot_step: step,
                        });
                    }
                    Ok(Adoption::Stale) | Ok(Adoption::Rejected) => {
                        self.event(t, EventKind::Drop, tensor_id, None, step, 0.0);
                    }
                    Err(e) => {
                        log::warn!("refusing roots for tensor {tensor_id}: {e}");
                        self.event(t, EventKind::Drop, tensor_id, None, step, 0.0);
                    }
                }
            }
            let floor = state.root_step;
            results.retain(|r| floor.is_none_or(|f| r.snapshot_step > f));
            self.mailbox.extend(results);
        }
        adopted
    }

    /// Blocks until no job is queued or running. Results stay in the
    /// channel until the next gather boundary or [`Scheduler::drain`].
    pub fn wait_idle(&self) {
        if let Backend::Async(pool) = &self.backend {
            pool.wait_idle();
        }
    }

    /// Waits for outstanding work and returns every finished, unadopted
    /// result, clearing the mailbox.
    pub fn drain(&mut self) -> Vec<RootResult> {
        let mut done = Vec::new();
        match &mut self.backend {
            Backend::Async(pool) => {
                pool.wait_idle();
                while let Ok(c) = pool.results.try_recv() {
                    done.push(c);
                }
            }
            Backend::SyncDelayed { pending, .. } => {
                done.extend(pending.drain(..).map(|(_, c)| c));
            }
        }
        let step = self.events.last().map_or(0, |e| e.step);
        for c in done {
            self.receive(step, c);
        }
        std::mem::take(&mut self.mailbox)
    }
}
