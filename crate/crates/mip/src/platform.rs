//! Assembles every component into one running platform.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

use crate::blockstore::{BlockStore, BlockStoreConfig, BlockStoreError, Journal};
use crate::broker::{Broker, BrokerError, MessageId, SubscribeOptions, SubscriptionId};
use crate::clock::{SharedClock, SystemClock};
use crate::connectivity::{ConnectivityError, ConnectivityService, MachineConfig};
use crate::faas::{self, FaasConsumer, FaasEngine, FaasError, LambdaDescriptor};
use crate::ids::IdGen;
use crate::mdie::{ChannelDescriptor, IngestOutcome, Mdie, MdieError, Modality, OutboundRecord};
use crate::nlu::{Grammar, HorizonMode, InternalEngine, NluConfig, NluError, Router, Ruleset};
use crate::services::lambdas::{self, AUTHENTICATOR, JOURNAL_WRITER, OEE_READER, VARIABLE_READER, WORK_ORDER_DISPATCHER};
use crate::services::{
    AuthEngine, CoreConfig, CoreServices, CoreWorkers, Directory, Imdg, JournalSink, ReasoningEngine, ReasoningError,
    ReasoningRuleset, SessionManager, TurnRecord, DEFAULT_TOKEN_TTL,
};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Mdie(#[from] MdieError),
    #[error(transparent)]
    Faas(#[from] FaasError),
    #[error(transparent)]
    Connectivity(#[from] ConnectivityError),
    #[error(transparent)]
    BlockStore(#[from] BlockStoreError),
    #[error(transparent)]
    Nlu(#[from] NluError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error("channel {0} is rate limited")]
    RateLimited(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub seed: u64,
    pub tenant: String,
    pub channels: Vec<ChannelDescriptor>,
    pub machines: Vec<MachineConfig>,
    pub directory: Directory,
    pub reasoning: ReasoningRuleset,
    pub nlu: NluConfig,
    pub horizon: HorizonMode,
    pub core: CoreConfig,
    pub core_workers: usize,
    /// Options for the core group on `ingest/#`.
    pub ingest_options: SubscribeOptions,
    /// Options for the FaaS trigger consumer.
    pub faas_options: SubscribeOptions,
    pub token_ttl: Duration,
    pub blockstore: BlockStoreConfig,
    /// Persist the block store here; in memory when absent.
    pub blockstore_root: Option<PathBuf>,
    /// Per-invocation timeout for the platform lambdas.
    pub lambda_timeout: Duration,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            tenant: "plant-1".into(),
            channels: vec![
                ChannelDescriptor::new("web01", Modality::Text),
                ChannelDescriptor::new("voice01", Modality::Voice),
                ChannelDescriptor::new("api01", Modality::Api),
            ],
            machines: vec![MachineConfig::new("press01", 0.9, 0.95, 0.99)],
            directory: Directory::builtin(),
            reasoning: ReasoningRuleset::builtin(),
            nlu: NluConfig::builtin(),
            horizon: HorizonMode::FixedTable,
            core: CoreConfig::default(),
            core_workers: 3,
            ingest_options: SubscribeOptions::default(),
            faas_options: SubscribeOptions::default(),
            token_ttl: DEFAULT_TOKEN_TTL,
            blockstore: BlockStoreConfig::default(),
            blockstore_root: None,
            lambda_timeout: faas::DEFAULT_INVOCATION_TIMEOUT,
        }
    }
}

#[derive(Default)]
struct Inbox {
    seen: HashSet<MessageId>,
    records: Vec<OutboundRecord>,
    by_trace: HashMap<String, usize>,
}

/// Collects everything published on `egress/#`.
struct EgressTap {
    inbox: Arc<(Mutex<Inbox>, Condvar)>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl EgressTap {
    fn start(broker: &Broker) -> Result<Self, BrokerError> {
        let sub = broker.subscribe("egress/#", SubscribeOptions::default())?;
        let inbox: Arc<(Mutex<Inbox>, Condvar)> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let (shared, flag) = (inbox.clone(), stop.clone());
        let handle = thread::Builder::new()
            .name("egress-tap".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    let Ok(Some(envelope)) = sub.recv_timeout(Duration::from_millis(20)) else {
                        continue;
                    };
                    let _ = sub.ack(envelope.message_id);
                    let Ok(record) = envelope.decode::<OutboundRecord>() else {
                        continue;
                    };
                    let (lock, cv) = &*shared;
                    let mut inbox = lock.lock();
                    if !inbox.seen.insert(envelope.message_id) {
                        continue;
                    }
                    if let Some(t) = &record.trace_id {
                        let at = inbox.records.len();
                        inbox.by_trace.insert(t.clone(), at);
                    }
                    inbox.records.push(record);
                    cv.notify_all();
                }
            })
            .expect("spawn egress tap");
        Ok(Self {
            inbox,
            stop,
            handle: Some(handle),
        })
    }

    fn wait(&self, trace: &str, timeout: Duration) -> Option<OutboundRecord> {
        let deadline = Instant::now() + timeout;
        let (lock, cv) = &*self.inbox;
        let mut inbox = lock.lock();
        loop {
            if let Some(&i) = inbox.by_trace.get(trace) {
                return Some(inbox.records[i].clone());
            }
            if cv.wait_until(&mut inbox, deadline).timed_out() {
                return inbox.by_trace.get(trace).map(|&i| inbox.records[i].clone());
            }
        }
    }

    fn records(&self) -> Vec<OutboundRecord> {
        self.inbox.0.lock().records.clone()
    }
}

impl Drop for EgressTap {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// One answered user turn.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub trace_id: String,
    pub reply: OutboundRecord,
    pub turn: TurnRecord,
}

pub struct Platform {
    broker: Broker,
    business: SharedClock,
    imdg: Arc<Imdg>,
    mdie: Arc<Mdie>,
    faas: FaasEngine,
    connectivity: Arc<ConnectivityService>,
    blockstore: Arc<BlockStore>,
    journal: Journal,
    core: Arc<CoreServices>,
    workers: Mutex<Option<CoreWorkers>>,
    faas_consumer: Mutex<Option<FaasConsumer>>,
    sink: Mutex<Option<JournalSink>>,
    tap: EgressTap,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform").field("imdg", &self.imdg).finish_non_exhaustive()
    }
}

impl Platform {
    /// Starts every component. `business` drives tokens, sessions, grid
    /// TTLs and order deadlines; broker and FaaS run on real time.
    pub fn start(config: PlatformConfig, business: SharedClock) -> Result<Self, PlatformError> {
        let seed = config.seed;
        let real = SystemClock::shared();
        let broker = Broker::with_clock(real.clone());
        let imdg = Arc::new(Imdg::new(business.clone()));

        let mdie = Arc::new(Mdie::new(
            broker.clone(),
            business.clone(),
            IdGen::for_component(seed, "mdie"),
            config.tenant.clone(),
        ));
        for channel in &config.channels {
            mdie.register_channel(channel.clone())?;
        }

        let connectivity = Arc::new(ConnectivityService::new(
            broker.clone(),
            business.clone(),
            IdGen::for_component(seed, "connectivity"),
        ));
        for machine in &config.machines {
            connectivity.register(machine)?;
        }

        let mut store_config = config.blockstore.clone();
        store_config.seed = seed;
        let blockstore = Arc::new(match &config.blockstore_root {
            Some(root) => BlockStore::open(root, store_config, business.clone())?,
            None => BlockStore::new(store_config, business.clone())?,
        });
        let journal = Journal::new(blockstore.clone());

        let sessions = SessionManager::new(imdg.clone(), IdGen::for_component(seed, "sessions"));
        let auth = Arc::new(
            AuthEngine::new(imdg.clone(), IdGen::for_component(seed, "auth"), config.directory.clone())
                .with_ttl(config.token_ttl),
        );
        ReasoningEngine::new(imdg.clone()).install(&config.reasoning)?;

        let grammar = Arc::new(Grammar::from_config(&config.nlu.grammar, config.horizon)?);
        let deadlines = grammar.deadlines().clone();
        let router = Arc::new(Router::new(
            Ruleset::new(&config.nlu.routing)?,
            Arc::new(InternalEngine::new(grammar)),
        ));

        let faas = FaasEngine::new(real);
        faas.set_dead_letter_broker(broker.clone());
        let desc = |name: &str| LambdaDescriptor::new(name, "1").timeout(config.lambda_timeout);
        faas.register(desc(AUTHENTICATOR), lambdas::authenticator(auth.clone(), sessions.clone()))?;
        faas.register(desc(OEE_READER), lambdas::oee_reader(connectivity.clone()))?;
        faas.register(desc(VARIABLE_READER), lambdas::variable_reader(connectivity.clone()))?;
        faas.register(desc(WORK_ORDER_DISPATCHER), lambdas::work_order_dispatcher(connectivity.clone()))?;
        faas.register(desc(JOURNAL_WRITER), lambdas::journal_writer(broker.clone()))?;
        faas.register(
            desc(faas::ANSWERING_LOGIC),
            faas::answering_logic(mdie.clone(), Arc::new(sessions.clone()), broker.clone()),
        )?;
        faas.register(desc(faas::HTTP_REST), faas::http_rest(Some(Arc::new(DecisionResponses(imdg.clone())))))?;

        let core = Arc::new(CoreServices::new(
            broker.clone(),
            imdg.clone(),
            sessions,
            auth,
            router,
            deadlines,
            config.core.clone(),
        ));

        let tap = EgressTap::start(&broker)?;
        let sink = JournalSink::start(&broker, imdg.clone(), journal.clone(), SubscribeOptions::default())?;
        let faas_consumer = faas.attach(&broker, config.faas_options.clone())?;
        let workers = CoreWorkers::start(core.clone(), config.core_workers, config.ingest_options.clone())?;

        Ok(Self {
            broker,
            business,
            imdg,
            mdie,
            faas,
            connectivity,
            blockstore,
            journal,
            core,
            workers: Mutex::new(Some(workers)),
            faas_consumer: Mutex::new(Some(faas_consumer)),
            sink: Mutex::new(Some(sink)),
            tap,
        })
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn business_clock(&self) -> &SharedClock {
        &self.business
    }

    pub fn imdg(&self) -> &Arc<Imdg> {
        &self.imdg
    }

    pub fn mdie(&self) -> &Arc<Mdie> {
        &self.mdie
    }

    pub fn faas(&self) -> &FaasEngine {
        &self.faas
    }

    pub fn connectivity(&self) -> &Arc<ConnectivityService> {
        &self.connectivity
    }

    pub fn blockstore(&self) -> &Arc<BlockStore> {
        &self.blockstore
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn core(&self) -> &Arc<CoreServices> {
        &self.core
    }

    /// Publishes one utterance and returns its trace id.
    pub fn send(&self, channel: &str, text: &str) -> Result<String, PlatformError> {
        match self.mdie.ingest_now(channel, text)? {
            IngestOutcome::Dispatched { trace_id, .. } => Ok(trace_id),
            IngestOutcome::RateLimited => Err(PlatformError::RateLimited(channel.to_string())),
        }
    }

    /// Waits for the answer and the completed turn of `trace_id`.
    pub fn wait(&self, trace_id: &str, timeout: Duration) -> Result<Exchange, PlatformError> {
        let deadline = Instant::now() + timeout;
        let reply = self
            .tap
            .wait(trace_id, timeout)
            .ok_or_else(|| PlatformError::Timeout(format!("reply to {trace_id}")))?;
        loop {
            if let Some(turn) = self.core.turn(trace_id) {
                return Ok(Exchange {
                    trace_id: trace_id.to_string(),
                    reply,
                    turn,
                });
            }
            if Instant::now() >= deadline {
                return Err(PlatformError::Timeout(format!("turn {trace_id}")));
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    pub fn say(&self, channel: &str, text: &str, timeout: Duration) -> Result<Exchange, PlatformError> {
        let trace = self.send(channel, text)?;
        self.wait(&trace, timeout)
    }

    /// Every answer published so far, in arrival order.
    pub fn replies(&self) -> Vec<OutboundRecord> {
        self.tap.records()
    }

    pub fn core_members(&self) -> Vec<SubscriptionId> {
        self.workers.lock().as_ref().map(CoreWorkers::members).unwrap_or_default()
    }

    pub fn kill_core_worker(&self, member: SubscriptionId) -> bool {
        self.workers.lock().as_mut().is_some_and(|w| w.kill(member))
    }

    pub fn shutdown(&self) {
        if let Some(w) = self.workers.lock().take() {
            w.stop();
        }
        if let Some(c) = self.faas_consumer.lock().take() {
            c.stop();
        }
        if let Some(s) = self.sink.lock().take() {
            s.stop();
        }
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Attaches http-rest responses to the decisions that fired them.
struct DecisionResponses(Arc<Imdg>);

impl faas::ResponseSink for DecisionResponses {
    fn attach(&self, decision_key: &str, response: &faas::HttpResponseRecord) {
        let value = serde_json::to_value(response).expect("response serializes");
        let _ = self.0.update(decision_key, None, |current| {
            let mut decision = current?.clone();
            decision.as_object_mut()?.insert("http_response".into(), value);
            Some(decision)
        });
    }
}
