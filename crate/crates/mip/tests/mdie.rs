use std::sync::Arc;
use std::time::Duration;

use mip::broker::{Broker, SubscribeOptions};
use mip::clock::ManualClock;
use mip::ids::IdGen;
use mip::mdie::{
    journalist_dispatch, ChannelDescriptor, IngestOutcome, Mdie, MdieError, MetaDatagram,
    Modality, OutboundRecord, RateDecision, RawInput,
};
use proptest::prelude::*;

fn setup() -> (Mdie, Broker, Arc<ManualClock>) {
    let clock = ManualClock::shared(Duration::from_secs(1_700_000_000));
    let broker = Broker::with_clock(clock.clone());
    let mdie = Mdie::new(broker.clone(), clock.clone(), IdGen::seeded(1), "acme");
    mdie.register_channel(ChannelDescriptor::new("web01", Modality::Voice)).unwrap();
    mdie.register_channel(ChannelDescriptor::new("console", Modality::Text)).unwrap();
    mdie.register_channel(ChannelDescriptor::new("plc-bridge", Modality::Api)).unwrap();
    (mdie, broker, clock)
}

#[test]
fn rate_limit_burst_and_refill() {
    let (mdie, _, _) = setup();
    let t0 = Duration::ZERO;
    for _ in 0..5 {
        assert_eq!(mdie.rate_limit_check("web01", t0).unwrap(), RateDecision::Allow);
    }
    assert_eq!(mdie.rate_limit_check("web01", t0).unwrap(), RateDecision::Deny);
    assert_eq!(
        mdie.rate_limit_check("web01", Duration::from_millis(200)).unwrap(),
        RateDecision::Allow
    );
    // Buckets are per channel.
    assert_eq!(mdie.rate_limit_check("console", t0).unwrap(), RateDecision::Allow);
    assert!(matches!(
        mdie.rate_limit_check("nope", t0),
        Err(MdieError::UnknownChannel(_))
    ));
}

#[test]
fn transcription_is_verbatim() {
    let (mdie, _, _) = setup();
    let voice = RawInput::voice("web01", "Hi Machine, my secret is ABCXYZ", Duration::ZERO);
    assert_eq!(mdie.transcribe(&voice).unwrap(), "Hi Machine, my secret is ABCXYZ");
    let text = RawInput::new("console", "status", Duration::ZERO);
    assert_eq!(mdie.transcribe(&text).unwrap(), "status");
    let api = RawInput::new("plc-bridge", r#"{"cmd":"read_oee"}"#, Duration::ZERO);
    assert_eq!(mdie.transcribe(&api).unwrap(), r#"{"cmd":"read_oee"}"#);
}

#[test]
fn to_meta_builds_fresh_datagrams() {
    let (mdie, _, _) = setup();
    let now = Duration::from_secs(1_700_000_000);
    let a = mdie.to_meta("Hi Machine, my secret is ABCXYZ", "web01", now).unwrap();
    assert_eq!(a.modality, Modality::Voice);
    assert_eq!(a.text, "Hi Machine, my secret is ABCXYZ");
    assert_eq!(a.version, 1);
    assert_eq!(a.tenant, "acme");
    assert_eq!(a.timestamp, 1_700_000_000_000);
    let b = mdie.to_meta("Hi Machine, my secret is ABCXYZ", "web01", now).unwrap();
    assert_ne!(a.trace_id, b.trace_id);
    assert!(matches!(mdie.to_meta("", "web01", now), Err(MdieError::EmptyText)));
}

#[test]
fn session_hint_follows_bound_session() {
    let (mdie, _, _) = setup();
    let d = mdie.to_meta("hello", "web01", Duration::ZERO).unwrap();
    assert_eq!(d.session_hint, None);
    mdie.render_answer("Welcome", "web01", Some("sess-1"), None).unwrap();
    let d = mdie.to_meta("hello", "web01", Duration::ZERO).unwrap();
    assert_eq!(d.session_hint.as_deref(), Some("sess-1"));
    let other = mdie.to_meta("hello", "console", Duration::ZERO).unwrap();
    assert_eq!(other.session_hint, None);
}

#[test]
fn journalist_topic_template() {
    let (mdie, _, _) = setup();
    let voice = mdie.to_meta("x", "web01", Duration::ZERO).unwrap();
    assert_eq!(journalist_dispatch(&voice).topic, "ingest/voice/web01");
    let api = mdie.to_meta("x", "plc-bridge", Duration::ZERO).unwrap();
    let plan = journalist_dispatch(&api);
    assert_eq!(plan.topic, "ingest/api/plc-bridge");
    assert_eq!(plan, journalist_dispatch(&api));
    assert_eq!(MetaDatagram::from_json(&plan.record).unwrap(), api);
}

#[test]
fn dispatch_retries_transient_refusals() {
    let (mdie, broker, _) = setup();
    let sub = broker.subscribe("ingest/#", SubscribeOptions::default().group("core")).unwrap();
    let d = mdie.to_meta("status", "console", Duration::ZERO).unwrap();
    let plan = journalist_dispatch(&d);
    broker.refuse_next_publishes(3);
    let id = mdie.dispatch(&plan).unwrap();
    let env = sub.try_recv().unwrap().unwrap();
    assert_eq!(env.message_id, id);
    assert_eq!(MetaDatagram::from_json(env.payload_str().unwrap()).unwrap(), d);
}

#[test]
fn ingest_reports_rate_limiting() {
    let (mdie, broker, _) = setup();
    let sub = broker.subscribe("ingest/#", SubscribeOptions::default()).unwrap();
    let mut dispatched = 0;
    let mut limited = 0;
    for _ in 0..7 {
        let raw = RawInput::new("console", "status", Duration::from_secs(5));
        match mdie.ingest(&raw).unwrap() {
            IngestOutcome::Dispatched { .. } => dispatched += 1,
            IngestOutcome::RateLimited => limited += 1,
        }
    }
    assert_eq!((dispatched, limited), (5, 2));
    let mut seen = 0;
    while sub.try_recv().unwrap().is_some() {
        seen += 1;
    }
    assert_eq!(seen, 5);
}

#[test]
fn render_answer_per_modality() {
    let (mdie, broker, _) = setup();
    let voice_out = broker.subscribe("egress/web01", SubscribeOptions::default()).unwrap();
    let text_out = broker.subscribe("egress/console", SubscribeOptions::default()).unwrap();
    let spoken = mdie.render_answer("OEE is 0.85", "web01", None, None).unwrap();
    assert_eq!(spoken.body, r#"simulated-speech:"OEE is 0.85""#);
    assert_eq!(spoken.plain_text(), "OEE is 0.85");
    let plain = mdie.render_answer("OEE is 0.85", "console", None, None).unwrap();
    assert_eq!(plain.body, "OEE is 0.85");

    let got: OutboundRecord = voice_out.try_recv().unwrap().unwrap().decode().unwrap();
    assert_eq!(got, spoken);
    let got: OutboundRecord = text_out.try_recv().unwrap().unwrap().decode().unwrap();
    assert_eq!(got, plain);
    assert!(matches!(
        mdie.render_answer("x", "ghost", None, None),
        Err(MdieError::UnknownChannel(_))
    ));
}

#[test]
fn channel_registration_is_validated() {
    let (mdie, _, _) = setup();
    assert!(matches!(
        mdie.register_channel(ChannelDescriptor::new("web01", Modality::Text)),
        Err(MdieError::DuplicateChannel(_))
    ));
    assert!(mdie
        .register_channel(ChannelDescriptor::new("a/b", Modality::Text))
        .is_err());
    assert!(mdie
        .register_channel(ChannelDescriptor::new("slow", Modality::Text).with_rate(0.0, 1))
        .is_err());
    assert!(mdie
        .register_channel(ChannelDescriptor::new("slow", Modality::Text).with_rate(1.0, 0))
        .is_err());
}

fn modality() -> impl Strategy<Value = Modality> {
    prop_oneof![Just(Modality::Voice), Just(Modality::Text), Just(Modality::Api)]
}

proptest! {
    #[test]
    fn datagram_json_round_trip(
        trace_id in "[a-z0-9-]{1,24}",
        channel_id in "[a-z0-9-]{1,12}",
        modality in modality(),
        text in "\\PC{1,80}",
        session_hint in proptest::option::of("[a-z0-9-]{1,16}"),
        tenant in "[a-z]{1,8}",
        timestamp in any::<u64>(),
    ) {
        let d = MetaDatagram { version: 1, trace_id, channel_id, modality, text, session_hint, tenant, timestamp };
        prop_assert_eq!(MetaDatagram::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn datagrams_only_reach_their_own_ingest_topic(text in "[a-zA-Z][a-zA-Z ]{0,29}", pick in 0usize..3) {
        let (mdie, broker, _) = setup();
        let channels = ["web01", "console", "plc-bridge"];
        let subs: Vec<_> = channels
            .iter()
            .map(|c| {
                let desc = mdie.channel(c).unwrap();
                broker.subscribe(&desc.ingress_topic, SubscribeOptions::default()).unwrap()
            })
            .collect();
        let raw = RawInput::new(channels[pick], text.clone(), Duration::ZERO);
        mdie.ingest(&raw).unwrap();
        for (i, sub) in subs.iter().enumerate() {
            let got = sub.try_recv().unwrap();
            prop_assert_eq!(got.is_some(), i == pick);
        }
    }
}
