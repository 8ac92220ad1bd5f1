use std::collections::VecDeque;
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde_json::Value;

use super::{Event, Invocation, LambdaBody, LambdaDescriptor, LambdaFailure, Outcome, Shared};

pub(crate) type Completion = Box<dyn FnOnce(&Invocation) + Send>;

pub(crate) struct Job {
    pub id: String,
    pub event: Event,
    pub done: Completion,
}

/// Decides whether to add a worker after an enqueue.
pub trait ScalePolicy: Send + Sync + std::fmt::Debug {
    fn scale_up(&self, queued: usize, workers: usize, max: usize) -> bool;
}

/// Adds one worker whenever the queue is deeper than the worker count.
#[derive(Debug, Clone, Copy, Default)]
pub struct QueueDepthPolicy;

impl ScalePolicy for QueueDepthPolicy {
    fn scale_up(&self, queued: usize, workers: usize, max: usize) -> bool {
        workers < max && (workers == 0 || queued > workers)
    }
}

#[derive(Default)]
pub(crate) struct PoolState {
    pub queue: VecDeque<Job>,
    pub workers: usize,
    pub busy: usize,
    pub peak_workers: usize,
    pub peak_busy: usize,
    pub terminating: bool,
    pub recycled: u64,
    handles: Vec<JoinHandle<()>>,
}

pub(crate) struct Pool {
    pub descriptor: LambdaDescriptor,
    body: LambdaBody,
    pub state: Mutex<PoolState>,
    wake: Condvar,
}

/// Runs lambda bodies on a helper thread so a stuck body can be abandoned
/// when it exceeds the invocation timeout.
struct Executor {
    tx: mpsc::Sender<(Event, mpsc::Sender<Result<Value, LambdaFailure>>)>,
}

impl Executor {
    fn spawn(body: LambdaBody, name: &str) -> Self {
        let (tx, rx) = mpsc::channel::<(Event, mpsc::Sender<Result<Value, LambdaFailure>>)>();
        thread::Builder::new()
            .name(format!("lambda-{name}"))
            .spawn(move || {
                for (event, reply) in rx {
                    let result = panic::catch_unwind(AssertUnwindSafe(|| body(&event)))
                        .unwrap_or_else(|_| Err(LambdaFailure("lambda panicked".into())));
                    let _ = reply.send(result);
                }
            })
            .expect("spawn lambda executor");
        Self { tx }
    }
}

impl Pool {
    pub fn new(descriptor: LambdaDescriptor, body: LambdaBody) -> Arc<Self> {
        Arc::new(Self {
            descriptor,
            body,
            state: Mutex::new(PoolState::default()),
            wake: Condvar::new(),
        })
    }

    pub fn start(self: &Arc<Self>, shared: &Arc<Shared>) {
        let mut state = self.state.lock();
        for _ in 0..self.descriptor.min_instances {
            self.spawn_worker(&mut state, shared);
        }
    }

    fn spawn_worker(self: &Arc<Self>, state: &mut PoolState, shared: &Arc<Shared>) {
        state.workers += 1;
        state.peak_workers = state.peak_workers.max(state.workers);
        state.handles.retain(|h| !h.is_finished());
        let pool = Arc::clone(self);
        let shared = Arc::clone(shared);
        let handle = thread::Builder::new()
            .name(format!("faas-{}", self.descriptor.name))
            .spawn(move || pool.worker_loop(&shared))
            .expect("spawn faas worker");
        state.handles.push(handle);
    }

    /// Queues a job; false when the pool is shutting down.
    pub fn enqueue(self: &Arc<Self>, job: Job, shared: &Arc<Shared>) -> Result<(), Job> {
        let mut state = self.state.lock();
        if state.terminating {
            return Err(job);
        }
        state.queue.push_back(job);
        if shared
            .scale
            .scale_up(state.queue.len(), state.workers, self.descriptor.max_instances)
        {
            self.spawn_worker(&mut state, shared);
        }
        drop(state);
        self.wake.notify_one();
        Ok(())
    }

    fn worker_loop(self: Arc<Self>, shared: &Shared) {
        let mut executor = Executor::spawn(Arc::clone(&self.body), &self.descriptor.name);
        let mut state = self.state.lock();
        loop {
            let mut idle_since = Instant::now();
            while state.queue.is_empty() {
                if state.terminating {
                    state.workers -= 1;
                    return;
                }
                let idle = idle_since.elapsed();
                if idle >= self.descriptor.idle_ttl {
                    if state.workers > self.descriptor.min_instances {
                        state.workers -= 1;
                        return;
                    }
                    idle_since = Instant::now();
                    continue;
                }
                self.wake.wait_for(&mut state, self.descriptor.idle_ttl - idle);
            }
            let job = state.queue.pop_front().expect("queue checked non-empty");
            state.busy += 1;
            state.peak_busy = state.peak_busy.max(state.busy);
            drop(state);

            let (invocation, timed_out) = self.run(&executor, job.id, &job.event, shared);
            if timed_out {
                executor = Executor::spawn(Arc::clone(&self.body), &self.descriptor.name);
            }
            shared.record(invocation.clone());
            (job.done)(&invocation);

            state = self.state.lock();
            state.busy -= 1;
            if timed_out {
                state.recycled += 1;
            }
        }
    }

    fn run(&self, executor: &Executor, id: String, event: &Event, shared: &Shared) -> (Invocation, bool) {
        let start_ts = shared.clock.now();
        let started = Instant::now();
        let (reply_tx, reply_rx) = mpsc::channel();
        let result = match executor.tx.send((event.clone(), reply_tx)) {
            Ok(()) => reply_rx.recv_timeout(self.descriptor.invocation_timeout),
            Err(_) => Err(mpsc::RecvTimeoutError::Disconnected),
        };
        let latency = started.elapsed();
        let (outcome, result, error, timed_out) = match result {
            Ok(Ok(value)) => (Outcome::Ok, Some(value), None, false),
            Ok(Err(failure)) => (Outcome::Error, None, Some(failure.0), false),
            Err(mpsc::RecvTimeoutError::Timeout) => (
                Outcome::Timeout,
                None,
                Some(format!("no result within {:?}", self.descriptor.invocation_timeout)),
                true,
            ),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                (Outcome::Error, None, Some("executor lost".into()), true)
            }
        };
        let invocation = Invocation {
            invocation_id: id,
            lambda: self.descriptor.name.clone(),
            version: self.descriptor.version.clone(),
            event_topic: event.topic.clone(),
            start_ts,
            end_ts: start_ts + latency,
            latency,
            outcome,
            result,
            error,
        };
        (invocation, timed_out)
    }

    /// Stops intake, fails queued jobs, lets in-flight ones finish and joins
    /// the workers. Returns the failed queued jobs for recording.
    pub fn shutdown(&self) -> Vec<Job> {
        let (dropped, handles) = {
            let mut state = self.state.lock();
            state.terminating = true;
            (
                state.queue.drain(..).collect::<Vec<_>>(),
                std::mem::take(&mut state.handles),
            )
        };
        self.wake.notify_all();
        for handle in handles {
            let _ = handle.join();
        }
        dropped
    }

    pub fn wait_timeout(&self) -> Duration {
        self.descriptor.invocation_timeout + Duration::from_secs(1)
    }
}
