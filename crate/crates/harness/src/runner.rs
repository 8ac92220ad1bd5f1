use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use mip::clock::{ManualClock, SharedClock};
use mip::broker::SubscribeOptions;
use mip::platform::{Platform, PlatformConfig};
use mip::services::Directory;
use regex::Regex;

use crate::scenario::{Chaos, Scenario};
use crate::transcript::{Conservation, DecisionSummary, FinalMetrics, Latencies, StepRecord, Transcript};
use crate::HarnessError;

/// Ack timeout used by every consumer group while chaos is active, so
/// dropped acks come back quickly.
pub const CHAOS_ACK_TIMEOUT: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub ack_drop: Option<f64>,
    pub kill_consumer_at: Option<usize>,
    pub kill_datanode_at: Option<usize>,
    pub step_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            ack_drop: None,
            kill_consumer_at: None,
            kill_datanode_at: None,
            step_timeout: Duration::from_secs(10),
        }
    }
}

impl RunOptions {
    fn chaos(&self, base: &Chaos) -> Chaos {
        Chaos {
            ack_drop_prob: self.ack_drop.unwrap_or(base.ack_drop_prob),
            kill_consumer_at_step: self.kill_consumer_at.or(base.kill_consumer_at_step),
            kill_datanode_at_step: self.kill_datanode_at.or(base.kill_datanode_at_step),
        }
    }
}

pub fn platform_config(scenario: &Scenario, seed: u64, chaos: &Chaos) -> PlatformConfig {
    let mut config = PlatformConfig {
        seed,
        channels: scenario.channel_descriptors(),
        machines: vec![scenario.machine.clone()],
        directory: scenario.directory.clone().unwrap_or_else(Directory::builtin),
        ..PlatformConfig::default()
    };
    if !chaos.is_quiet() {
        config.ingest_options = SubscribeOptions::default().ack_timeout(CHAOS_ACK_TIMEOUT);
        config.faas_options = SubscribeOptions::default().ack_timeout(CHAOS_ACK_TIMEOUT);
    }
    config
}

/// Boots a platform, plays the steps in order and collects the transcript.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<Transcript, HarnessError> {
    scenario.validate()?;
    let chaos = options.chaos(&scenario.chaos);
    let probe = Scenario {
        chaos: chaos.clone(),
        ..scenario.clone()
    };
    probe.validate()?;
    let seed = options.seed.unwrap_or(scenario.seed);
    let clock = ManualClock::shared(scenario.clock_start()?);
    let business: SharedClock = clock.clone();
    let platform = Platform::start(platform_config(scenario, seed, &chaos), business)?;
    if chaos.ack_drop_prob > 0.0 {
        platform.broker().set_ack_drop(chaos.ack_drop_prob, seed);
    }
    let result = play(&platform, &clock, scenario, &chaos, seed, options.step_timeout);
    platform.shutdown();
    result
}

fn play(
    platform: &Platform,
    clock: &Arc<ManualClock>,
    scenario: &Scenario,
    chaos: &Chaos,
    seed: u64,
    timeout: Duration,
) -> Result<Transcript, HarnessError> {
    let mut steps = Vec::with_capacity(scenario.steps.len());
    for (i, step) in scenario.steps.iter().enumerate() {
        let n = i + 1;
        if n > 1 {
            clock.advance(Duration::from_millis(scenario.step_advance_ms));
        }
        if chaos.kill_consumer_at_step == Some(n) {
            if let Some(&member) = platform.core_members().first() {
                platform.kill_core_worker(member);
                tracing::info!(step = n, member = member.0, "killed core consumer");
            }
        }
        if chaos.kill_datanode_at_step == Some(n) {
            if let Some(node) = platform.blockstore().node_ids().first() {
                platform.blockstore().set_node_alive(node, false)?;
                tracing::info!(step = n, node = %node, "killed data node");
            }
        }
        let started = Instant::now();
        let exchange = platform
            .say(&step.channel, &step.text(), timeout)
            .map_err(|source| HarnessError::Step { step: n, source })?;
        let turn_ms = started.elapsed().as_secs_f64() * 1e3;
        let reply = exchange.reply.plain_text();
        let intent = exchange.turn.result.intent.as_str().to_string();
        let reply_ok = match &step.expect_reply {
            Some(re) => Some(Regex::new(re).map_err(|e| HarnessError::Scenario(e.to_string()))?.is_match(&reply)),
            None => None,
        };
        steps.push(StepRecord {
            step: n,
            channel: step.channel.clone(),
            request: step.text(),
            trace_id: exchange.trace_id.clone(),
            session_id: exchange.turn.session_id.clone(),
            turn: exchange.turn.turn,
            engine: exchange.turn.engine.clone(),
            intent_ok: step.expect_intent.as_ref().map(|want| *want == intent),
            intent,
            entity: exchange.turn.result.entity.as_str().to_string(),
            decisions: exchange.turn.decisions.iter().map(DecisionSummary::from).collect(),
            reply,
            modality: exchange.reply.modality.as_str().to_string(),
            latencies: Some(Latencies { turn_ms }),
            reply_ok,
        });
    }

    let deadline = Instant::now() + timeout;
    while platform.journal().len().unwrap_or(0) < steps.len() && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(2));
    }
    if !chaos.is_quiet() {
        // let dropped acks come back at least a few times
        thread::sleep(CHAOS_ACK_TIMEOUT * 3);
    }

    let replies = platform.replies();
    let answered = steps
        .iter()
        .filter(|s| {
            replies
                .iter()
                .filter(|r| r.trace_id.as_deref() == Some(s.trace_id.as_str()) && r.channel_id == s.channel)
                .count()
                == 1
        })
        .count();
    let conservation = Conservation {
        turns: steps.len(),
        journal_lines: platform.journal().len()?,
        replies: answered,
    };
    let broker = platform.broker().stats();
    let metrics = FinalMetrics {
        dead_letters: broker.dead_lettered,
        broker,
        core: platform.core().metrics(),
        lambdas: platform.faas().benchmark_all(),
    };
    let passed = steps.iter().all(StepRecord::passed) && conservation.holds();
    Ok(Transcript {
        scenario: scenario.name.clone(),
        seed,
        steps,
        conservation,
        metrics: Some(metrics),
        passed,
    })
}
