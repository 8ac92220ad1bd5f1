use std::collections::BTreeMap;
use std::sync::{Arc, LazyLock};
use std::thread;
use std::time::Duration;

use mip::clock::{ManualClock, SharedClock};
use mip::connectivity::MachineConfig;
use mip::ids::IdGen;
use mip::mdie::{MetaDatagram, Modality};
use mip::nlu::{
    ContextFrame, EntityKind, EntityRef, Grammar, HorizonMode, Intent, IntentResult, IntentSource,
};
use mip::platform::{Platform, PlatformConfig};
use mip::services::*;
use proptest::prelude::*;
use serde_json::json;

const START: Duration = Duration::from_secs(1_736_150_400);
const WAIT: Duration = Duration::from_secs(10);

static GRAMMAR: LazyLock<Grammar> = LazyLock::new(|| Grammar::builtin(HorizonMode::FixedTable));

fn grid() -> (Arc<ManualClock>, Arc<Imdg>) {
    let clock = ManualClock::shared(START);
    let imdg = Arc::new(Imdg::new(clock.clone()));
    (clock, imdg)
}

// ---- IMDG ----

#[test]
fn imdg_put_get_and_unknown_key() {
    let (_, imdg) = grid();
    imdg.put("a", json!({"x": 1}), None).unwrap();
    assert_eq!(imdg.get("a"), Some(json!({"x": 1})));
    assert_eq!(imdg.get("nope"), None);
    assert!(matches!(imdg.put("", json!(1), None), Err(ImdgError::EmptyKey)));
}

#[test]
fn imdg_entry_expires_after_ttl() {
    let (clock, imdg) = grid();
    imdg.put("k", json!("v"), Some(Duration::from_millis(100))).unwrap();
    clock.advance(Duration::from_millis(50));
    assert_eq!(imdg.get("k"), Some(json!("v")));
    clock.advance(Duration::from_millis(150));
    assert_eq!(imdg.get("k"), None);
    assert!(imdg.scan_prefix("k").is_empty());
    assert!(imdg.put_if_absent("k", json!("w"), None).unwrap());
    assert_eq!(imdg.purge_expired(), 0);
}

#[test]
fn imdg_put_if_absent_has_one_winner() {
    let (_, imdg) = grid();
    let winners: usize = (0..16)
        .map(|i| {
            let imdg = imdg.clone();
            thread::spawn(move || imdg.put_if_absent("claim", json!(i), None).unwrap() as usize)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .sum();
    assert_eq!(winners, 1);
}

#[test]
fn imdg_update_is_atomic_and_scan_is_ordered() {
    let (_, imdg) = grid();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let imdg = imdg.clone();
            thread::spawn(move || {
                for _ in 0..250 {
                    imdg.update("n", None, |v| Some(json!(v.and_then(|v| v.as_u64()).unwrap_or(0) + 1)))
                        .unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(imdg.get("n"), Some(json!(2000)));
    for k in ["p/b", "p/a", "q/a", "p/c"] {
        imdg.put(k, json!(k), None).unwrap();
    }
    let keys: Vec<_> = imdg.scan_prefix("p/").into_iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["p/a", "p/b", "p/c"]);
}

// ---- rooms and sessions ----

fn manager() -> (Arc<ManualClock>, SessionManager) {
    let (clock, imdg) = grid();
    (clock, SessionManager::new(imdg, IdGen::seeded(3)))
}

#[test]
fn rooms_are_per_channel_and_idempotent() {
    let (_, sm) = manager();
    let a = sm.get_or_create_room("web01").unwrap();
    let b = sm.get_or_create_room("web01").unwrap();
    let c = sm.get_or_create_room("voice01").unwrap();
    assert_eq!(a, b);
    assert_ne!(a.room_id, c.room_id);
}

#[test]
fn concurrent_room_creation_yields_one_room() {
    let (_, sm) = manager();
    let ids: Vec<String> = (0..8)
        .map(|_| {
            let sm = sm.clone();
            thread::spawn(move || sm.get_or_create_room("web01").unwrap().room_id)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    assert!(ids.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn session_hint_semantics() {
    let (_, sm) = manager();
    let room = sm.get_or_create_room("web01").unwrap();
    let fresh = sm.get_or_create_session(&room, None).unwrap();
    assert!(fresh.state_vars.is_empty());
    assert_eq!(fresh.status, SessionStatus::Active);

    sm.set_state_var(&fresh.session_id, "fav_machine", json!("press01")).unwrap();
    let before = sm.get(&fresh.session_id).unwrap().state_vars;
    sm.park_session(&fresh.session_id).unwrap();
    let parked = sm.get(&fresh.session_id).unwrap();
    assert_eq!(parked.status, SessionStatus::Parked);
    assert_eq!(parked.state_vars, before);

    let resumed = sm.get_or_create_session(&room, Some(&fresh.session_id)).unwrap();
    assert_eq!(resumed.session_id, fresh.session_id);
    assert_eq!(resumed.status, SessionStatus::Active);
    assert_eq!(resumed.state_vars, before);

    let stale = sm.get_or_create_session(&room, Some("sess-unknown")).unwrap();
    assert_ne!(stale.session_id, fresh.session_id);
    assert!(stale.state_vars.is_empty());

    sm.close_session(&fresh.session_id).unwrap();
    let after_close = sm.get_or_create_session(&room, Some(&fresh.session_id)).unwrap();
    assert_ne!(after_close.session_id, fresh.session_id);
}

#[test]
fn park_is_idempotent_and_rejects_unknown() {
    let (_, sm) = manager();
    let room = sm.get_or_create_room("web01").unwrap();
    let s = sm.get_or_create_session(&room, None).unwrap();
    let once = sm.park_session(&s.session_id).unwrap();
    let twice = sm.park_session(&s.session_id).unwrap();
    assert_eq!(once, twice);
    assert!(matches!(sm.park_session("nope"), Err(SessionError::UnknownSession(_))));
}

#[test]
fn idle_sessions_auto_park_after_thirty_minutes() {
    let (clock, sm) = manager();
    let room = sm.get_or_create_room("web01").unwrap();
    let s = sm.get_or_create_session(&room, None).unwrap();
    clock.advance(Duration::from_secs(30 * 60));
    assert!(sm.park_idle().is_empty());
    clock.advance(Duration::from_secs(1));
    assert_eq!(sm.park_idle(), vec![s.session_id.clone()]);
    assert_eq!(sm.get(&s.session_id).unwrap().status, SessionStatus::Parked);
}

// ---- context ----

fn result(intent: Intent, source: IntentSource, entity: EntityKind, slots: &[(&str, &str)]) -> IntentResult {
    IntentResult {
        intent,
        entity,
        slots: slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        confidence: 1.0,
        source,
    }
}

fn machine(device: Option<&str>) -> Option<EntityRef> {
    Some(EntityRef {
        kind: EntityKind::Machine,
        device: device.map(str::to_string),
    })
}

#[test]
fn context_entity_swap_keeps_intent() {
    let frame = ContextFrame {
        active_intent: Some(Intent::WorkOrder),
        active_entity: machine(Some("press01")),
        slot_memory: BTreeMap::new(),
    };
    let follow = result(Intent::WorkOrder, IntentSource::Inherited, EntityKind::Machine, &[("device", "press02")]);
    let next = context_update(&frame, &follow);
    assert_eq!(next.active_intent, Some(Intent::WorkOrder));
    assert_eq!(next.active_entity, machine(Some("press02")));
}

#[test]
fn context_initialises_and_explicit_wins() {
    let login = result(Intent::Login, IntentSource::Explicit, EntityKind::Machine, &[("secret", "ABCXYZ")]);
    let frame = context_update(&ContextFrame::default(), &login);
    assert_eq!(frame.active_intent, Some(Intent::Login));
    assert_eq!(frame.active_entity, machine(None));

    let oee = ContextFrame {
        active_intent: Some(Intent::ReadOee),
        ..Default::default()
    };
    let order = result(Intent::WorkOrder, IntentSource::Explicit, EntityKind::None, &[("units", "5")]);
    let next = context_update(&oee, &order);
    assert_eq!(next.active_intent, Some(Intent::WorkOrder));
    assert_eq!(next.slot_memory.get("units").map(String::as_str), Some("5"));

    let unknown = IntentResult::unknown();
    assert_eq!(context_update(&next, &unknown), next);
}

#[test]
fn entity_only_turn_through_grammar_keeps_intent() {
    let first = GRAMMAR.extract("What is the OEE of press01?", None);
    let frame = context_update(&ContextFrame::default(), &first);
    let follow = GRAMMAR.extract("and the machine press02", Some(&frame));
    assert!(follow.is_entity_only());
    let next = context_update(&frame, &follow);
    assert_eq!(next.active_intent, Some(Intent::ReadOee));
    assert_eq!(next.active_entity, machine(Some("press02")));
}

fn arb_intent() -> impl Strategy<Value = Intent> {
    prop_oneof![
        Just(Intent::Login),
        Just(Intent::ReadOee),
        Just(Intent::WorkOrder),
        Just(Intent::Logout),
    ]
}

fn arb_frame() -> impl Strategy<Value = ContextFrame> {
    (
        proptest::option::of(arb_intent()),
        proptest::option::of(proptest::option::of("[a-z]{3}[0-9]{2}")),
    )
        .prop_map(|(intent, entity)| ContextFrame {
            active_intent: intent,
            active_entity: entity.map(|d| EntityRef {
                kind: EntityKind::Machine,
                device: d,
            }),
            slot_memory: BTreeMap::new(),
        })
}

proptest! {
    #[test]
    fn context_law(frame in arb_frame(), intent in arb_intent(), device in "[a-z]{3}[0-9]{2}") {
        let follow = result(intent, IntentSource::Inherited, EntityKind::Machine, &[("device", &device)]);
        let next = context_update(&frame, &follow);
        prop_assert_eq!(next.active_intent, frame.active_intent);
        prop_assert_eq!(next.active_entity, machine(Some(&device)));
    }
}

// ---- interpreter ----

fn scope_parts() -> (Session, ContextFrame) {
    let session = Session {
        session_id: "sess-1".into(),
        room_id: "room-1".into(),
        channel_id: "web01".into(),
        principal: None,
        state_vars: BTreeMap::new(),
        status: SessionStatus::Active,
        last_activity_ts: 0,
    };
    (session, ContextFrame::default())
}

fn datagram(text: &str) -> MetaDatagram {
    MetaDatagram {
        version: 1,
        trace_id: "tr-1".into(),
        channel_id: "web01".into(),
        modality: Modality::Text,
        text: text.into(),
        session_hint: None,
        tenant: "plant-1".into(),
        timestamp: 0,
    }
}

fn run_interpret(text: &str, r: &IntentResult) -> Result<Vec<MicroOp>, InterpretError> {
    let (session, frame) = scope_parts();
    let scope = TurnScope {
        session: &session,
        frame: &frame,
        default_device: "press01",
        deadlines: GRAMMAR.deadlines(),
        now: START,
    };
    interpret(&datagram(text), r, &scope)
}

fn kinds(ops: &[MicroOp]) -> Vec<OpKind> {
    ops.iter().map(MicroOp::kind).collect()
}

#[test]
fn interpret_login() {
    let text = "Hi Machine, my secret is ABCXYZ";
    let ops = run_interpret(text, &GRAMMAR.extract(text, None)).unwrap();
    assert_eq!(kinds(&ops), [OpKind::Authenticate, OpKind::Respond, OpKind::Journal]);
    assert_eq!(
        ops[0],
        MicroOp::Authenticate {
            secret: "ABCXYZ".into(),
            entity: "#MACHINE".into()
        }
    );
}

#[test]
fn interpret_oee_and_order() {
    let text = "What is the OEE of the machine?";
    let ops = run_interpret(text, &GRAMMAR.extract(text, None)).unwrap();
    assert_eq!(
        ops[0],
        MicroOp::QueryVar {
            device: "press01".into(),
            variable: "oee".into()
        }
    );
    let text = "Activate a new working order for further 2300 units by the end of the following week.";
    let ops = run_interpret(text, &GRAMMAR.extract(text, None)).unwrap();
    assert_eq!(kinds(&ops), [OpKind::Actuate, OpKind::Respond, OpKind::Journal]);
    assert_eq!(
        ops[0],
        MicroOp::Actuate {
            device: "press01".into(),
            order_units: 2300,
            deadline_hours: 168.0
        }
    );
}

#[test]
fn interpret_logout_unknown_and_malformed() {
    let ops = run_interpret("log out", &GRAMMAR.extract("log out", None)).unwrap();
    assert_eq!(kinds(&ops), [OpKind::Respond, OpKind::Journal]);
    let ops = run_interpret("blorp", &IntentResult::unknown()).unwrap();
    assert_eq!(ops[0], MicroOp::Respond { text: HELP_TEXT.into() });

    let zero = result(Intent::WorkOrder, IntentSource::Explicit, EntityKind::None, &[("units", "0")]);
    assert!(matches!(
        run_interpret("x", &zero),
        Err(InterpretError::MalformedSlots { intent: Intent::WorkOrder, .. })
    ));
    let no_deadline = result(Intent::WorkOrder, IntentSource::Explicit, EntityKind::None, &[("units", "10")]);
    assert!(matches!(run_interpret("x", &no_deadline), Err(InterpretError::MalformedSlots { .. })));
}

#[test]
fn micro_op_constructors_validate() {
    assert!(MicroOp::authenticate("", "#MACHINE").is_err());
    assert!(MicroOp::actuate("press01", 0, 1.0).is_err());
    assert!(MicroOp::actuate("press01", 1, f64::NAN).is_err());
    assert!(MicroOp::query_var("press01", " ").is_err());
    let op: MicroOp = serde_json::from_value(json!({"kind": "RESPOND", "args": {"text": ""}})).unwrap();
    assert!(op.validate().is_err());
}

// ---- auth and reasoning ----

fn auth(imdg: &Arc<Imdg>) -> AuthEngine {
    AuthEngine::new(imdg.clone(), IdGen::seeded(9), Directory::builtin())
}

#[test]
fn authenticate_mints_and_expires_tokens() {
    let (clock, imdg) = grid();
    let auth = auth(&imdg);
    let token = auth.authenticate("ABCXYZ", "#MACHINE", "s1").unwrap();
    assert_eq!(token.principal, "operator1");
    assert_eq!(token.roles, ["operator"]);
    assert_eq!(token.ttl_ms, 15 * 60 * 1000);
    assert_eq!(auth.valid_token("s1"), Some(token));
    assert!(imdg.contains(&token_key("s1")));
    assert!(matches!(auth.authenticate("WRONG", "#MACHINE", "s2"), Err(AuthError::Failure)));
    assert!(auth.valid_token("s2").is_none());

    clock.advance(DEFAULT_TOKEN_TTL);
    assert!(auth.valid_token("s1").is_none());

    auth.authenticate("ABCXYZ", "#MACHINE", "s3").unwrap();
    assert!(auth.revoke("s3"));
    assert!(auth.valid_token("s3").is_none());

    auth.set_directory_down(true);
    assert!(matches!(
        auth.authenticate("ABCXYZ", "#MACHINE", "s4"),
        Err(AuthError::DirectoryUnavailable)
    ));
}

#[test]
fn directory_rejects_duplicate_secrets() {
    let json = r#"{"principals":[{"principal":"a","secret":"X"},{"principal":"b","secret":"X"}]}"#;
    assert!(Directory::from_json(json).is_err());
}

fn turn(session: &str, n: u64, token: Option<AccessToken>) -> TurnContext {
    TurnContext {
        session_id: session.into(),
        trace_id: format!("tr-{n}"),
        turn: n,
        token,
    }
}

fn oee_ops() -> Vec<MicroOp> {
    vec![
        MicroOp::query_var("press01", "oee").unwrap(),
        MicroOp::respond(RESULT_PLACEHOLDER).unwrap(),
        MicroOp::journal("oee?", "#READ_OEE", "#MACHINE").unwrap(),
    ]
}

#[test]
fn reasoning_requires_a_ruleset() {
    let (_, imdg) = grid();
    let engine = ReasoningEngine::new(imdg);
    assert!(matches!(engine.reason(&oee_ops(), &turn("s", 1, None)), Err(ReasoningError::MissingRuleset)));
}

#[test]
fn authenticated_query_binds_oee_reader() {
    let (_, imdg) = grid();
    let engine = ReasoningEngine::new(imdg.clone());
    engine.install(&ReasoningRuleset::builtin()).unwrap();
    let token = auth(&imdg).authenticate("ABCXYZ", "#MACHINE", "s").unwrap();
    let decisions = engine.reason(&oee_ops(), &turn("s", 1, Some(token.clone()))).unwrap();
    let functions: Vec<_> = decisions.iter().map(|d| d.function.as_deref()).collect();
    assert_eq!(functions, [Some("oee-reader"), Some("answering-logic"), Some("journal-writer")]);
    assert_eq!(decisions[0].authorized_by.as_deref(), Some(token.token_id.as_str()));
    assert_eq!(decisions[0].topic().as_deref(), Some("faas/trigger/oee-reader"));
    assert_eq!(imdg.count_prefix(&decision_prefix("s")), 3);
    assert_eq!(decisions[1].key, "decision/s/0001-01");
}

#[test]
fn unauthenticated_actuation_is_gated() {
    let (_, imdg) = grid();
    let engine = ReasoningEngine::new(imdg.clone());
    engine.install(&ReasoningRuleset::builtin()).unwrap();
    let ops = vec![
        MicroOp::actuate("press01", 2300, 168.0).unwrap(),
        MicroOp::respond(RESULT_PLACEHOLDER).unwrap(),
        MicroOp::journal("order", "#WORK_ORDER", "#MACHINE").unwrap(),
    ];
    let decisions = engine.reason(&ops, &turn("s", 1, None)).unwrap();
    assert_eq!(decisions[0].gate, Some(Gate::AuthenticationRequired));
    assert_eq!(decisions[0].effective, MicroOp::Respond { text: AUTH_REQUIRED_TEXT.into() });
    assert_eq!(decisions[0].function.as_deref(), Some("answering-logic"));
    assert!(decisions[1].suppressed && decisions[1].function.is_none());
    assert!(decisions.iter().all(|d| d.function.as_deref() != Some("work-order-dispatcher")));
    assert_eq!(engine.decisions("s").len(), ops.len());
    assert!(engine.reason(&[], &turn("s", 2, None)).unwrap().is_empty());
}

#[test]
fn acl_forbids_missing_permission_and_expired_tokens_gate() {
    let (clock, imdg) = grid();
    let engine = ReasoningEngine::new(imdg.clone());
    engine.install(&ReasoningRuleset::builtin()).unwrap();
    let viewer = auth(&imdg).authenticate("VIEW42", "#MACHINE", "v").unwrap();
    let ops = vec![MicroOp::actuate("press01", 10, 24.0).unwrap()];
    let d = engine.reason(&ops, &turn("v", 1, Some(viewer.clone()))).unwrap();
    assert_eq!(d[0].gate, Some(Gate::Forbidden));
    let d = engine.reason(&oee_ops(), &turn("v", 2, Some(viewer.clone()))).unwrap();
    assert_eq!(d[0].gate, None);
    clock.advance(DEFAULT_TOKEN_TTL + Duration::from_secs(1));
    let d = engine.reason(&oee_ops(), &turn("v", 3, Some(viewer))).unwrap();
    assert_eq!(d[0].gate, Some(Gate::AuthenticationRequired));
}

#[test]
fn ruleset_validation() {
    let mut set = ReasoningRuleset::builtin();
    set.rules.retain(|r| r.event_pattern.kind != OpKind::Journal);
    assert!(set.validate().is_err());
    let mut set = ReasoningRuleset::builtin();
    set.rules[2].priority = set.rules[1].priority;
    assert!(set.validate().is_err());
    let set = ReasoningRuleset::builtin();
    let other = MicroOp::query_var("press01", "Availability").unwrap();
    assert_eq!(set.select(&other).unwrap().action, "variable-reader");
}

// ---- end to end ----

fn platform(config: PlatformConfig) -> (Arc<ManualClock>, Platform) {
    let clock = ManualClock::shared(START);
    let shared: SharedClock = clock.clone();
    let platform = Platform::start(config, shared).unwrap();
    (clock, platform)
}

const LOGIN: &str = "Hi Machine, my secret is ABCXYZ";
const OEE: &str = "What is the OEE of the machine?";
const ORDER: &str = "Activate a new working order for further 2300 units by the end of the following week.";

#[test]
fn three_turn_conversation_end_to_end() {
    let (clock, p) = platform(PlatformConfig::default());
    let login = p.say("web01", LOGIN, WAIT).unwrap();
    assert_eq!(login.reply.plain_text(), welcome_text("operator1"));
    clock.advance(Duration::from_secs(1));
    let oee = p.say("web01", OEE, WAIT).unwrap();
    assert_eq!(oee.turn.session_id, login.turn.session_id);
    assert!(oee.reply.plain_text().contains("0.84645"), "{}", oee.reply.plain_text());
    let value = oee.turn.outcomes[0].result.as_ref().unwrap()["value"].as_f64().unwrap();
    assert!((value - 0.84645).abs() <= 1e-12);
    clock.advance(Duration::from_secs(1));
    let order = p.say("web01", ORDER, WAIT).unwrap();
    let text = order.reply.plain_text();
    assert!(text.contains("accepted") && text.contains("2856"), "{text}");

    let session = p.core().sessions().get(&login.turn.session_id).unwrap();
    assert_eq!(session.principal.as_deref(), Some("operator1"));
    assert_eq!(session.state_vars["device"], json!("press01"));
    assert_eq!(session.state_vars["last_oee"].as_f64(), Some(value));

    let deadline = std::time::Instant::now() + WAIT;
    while p.journal().len().unwrap() < 3 && std::time::Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    let records = p.journal().records().unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[2].intent, "#WORK_ORDER");
    assert_eq!(p.replies().len(), 3);
    let ops: usize = [&login, &oee, &order].iter().map(|e| e.turn.decisions.len()).sum();
    assert_eq!(p.core().reasoning().decisions(&login.turn.session_id).len(), ops);
}

#[test]
fn auth_gate_before_login_and_after_expiry() {
    let (clock, p) = platform(PlatformConfig::default());
    let early = p.say("web01", OEE, WAIT).unwrap();
    assert_eq!(early.reply.plain_text(), AUTH_REQUIRED_TEXT);
    let early_order = p.say("web01", ORDER, WAIT).unwrap();
    assert_eq!(early_order.reply.plain_text(), AUTH_REQUIRED_TEXT);
    p.say("web01", LOGIN, WAIT).unwrap();
    clock.advance(DEFAULT_TOKEN_TTL);
    let late = p.say("web01", ORDER, WAIT).unwrap();
    assert_eq!(late.reply.plain_text(), AUTH_REQUIRED_TEXT);
    assert!(p.connectivity().orders("press01").unwrap().is_empty());
    let invoked: Vec<_> = p.faas().invocations().into_iter().map(|i| i.lambda).collect();
    assert!(!invoked.iter().any(|l| l == "oee-reader" || l == "work-order-dispatcher"));
}

#[test]
fn logout_revokes_and_unknown_gets_help() {
    let (_, p) = platform(PlatformConfig::default());
    let login = p.say("web01", LOGIN, WAIT).unwrap();
    let bye = p.say("web01", "please log out", WAIT).unwrap();
    assert_eq!(bye.reply.plain_text(), LOGOUT_TEXT);
    assert!(p.core().auth().valid_token(&login.turn.session_id).is_none());
    let after = p.say("web01", OEE, WAIT).unwrap();
    assert_eq!(after.reply.plain_text(), AUTH_REQUIRED_TEXT);
    let help = p.say("web01", "colorless green ideas", WAIT).unwrap();
    assert_eq!(help.reply.plain_text(), HELP_TEXT);
    let bad = p.say("web01", "wrong: my secret is NOPE", WAIT).unwrap();
    assert_eq!(bad.reply.plain_text(), FAILURE_TEXT);
}

#[test]
fn redelivered_datagram_is_processed_once() {
    let (_, p) = platform(PlatformConfig::default());
    p.say("web01", LOGIN, WAIT).unwrap();
    let dg = p.mdie().to_meta(ORDER, "web01", START).unwrap();
    let topic = mip::mdie::ingest_topic(Modality::Text, "web01");
    for _ in 0..3 {
        p.broker().publish(&topic, dg.to_json()).unwrap();
    }
    let first = p.wait(&dg.trace_id, WAIT).unwrap();
    let deadline = std::time::Instant::now() + WAIT;
    while p.core().metrics().duplicates + p.core().metrics().in_progress < 2 && std::time::Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    thread::sleep(Duration::from_millis(50));
    assert_eq!(p.connectivity().orders("press01").unwrap().len(), 1);
    let answers = p.replies().iter().filter(|r| r.trace_id.as_deref() == Some(&dg.trace_id)).count();
    assert_eq!(answers, 1);
    assert_eq!(p.core().reasoning().decisions(&first.turn.session_id).len(), 6);
    while p.journal().len().unwrap() < 2 && std::time::Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    thread::sleep(Duration::from_millis(50));
    assert_eq!(p.journal().len().unwrap(), 2);
}

#[test]
fn park_and_resume_keeps_state() {
    let (_, p) = platform(PlatformConfig::default());
    let login = p.say("web01", LOGIN, WAIT).unwrap();
    p.say("web01", OEE, WAIT).unwrap();
    let id = login.turn.session_id.clone();
    let before = p.core().sessions().get(&id).unwrap().state_vars;
    assert!(before.contains_key("last_oee"));
    p.core().sessions().park_session(&id).unwrap();
    assert_eq!(p.core().sessions().get(&id).unwrap().status, SessionStatus::Parked);
    let next = p.say("web01", OEE, WAIT).unwrap();
    assert_eq!(next.turn.session_id, id);
    let after = p.core().sessions().get(&id).unwrap();
    assert_eq!(after.status, SessionStatus::Active);
    assert_eq!(after.state_vars, before);
}

#[test]
fn entity_only_follow_up_switches_device() {
    let mut config = PlatformConfig::default();
    config.machines.push(MachineConfig::new("press02", 0.5, 1.0, 1.0));
    let (_, p) = platform(config);
    p.say("web01", LOGIN, WAIT).unwrap();
    p.say("web01", "What is the OEE of press01?", WAIT).unwrap();
    let follow = p.say("web01", "and the machine press02", WAIT).unwrap();
    assert_eq!(follow.turn.result.source, IntentSource::Inherited);
    assert_eq!(follow.turn.frame.active_intent, Some(Intent::ReadOee));
    assert_eq!(follow.turn.frame.active_entity, machine(Some("press02")));
    assert!(follow.reply.plain_text().contains("press02 is 0.5"), "{}", follow.reply.plain_text());
}

#[test]
fn lowered_oee_rejects_the_order() {
    let mut config = PlatformConfig::default();
    config.machines = vec![MachineConfig::new("press01", 0.5, 1.0, 1.0)];
    let (_, p) = platform(config);
    p.say("web01", LOGIN, WAIT).unwrap();
    let order = p.say("web01", ORDER, WAIT).unwrap();
    let text = order.reply.plain_text();
    assert!(text.contains("NON_DISPATCHABLE") && text.contains("1680"), "{text}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    /// Random interleavings of logins, logouts, queries, orders and clock
    /// jumps never let a read or an actuation through without a valid token.
    #[test]
    fn auth_gate_holds_under_random_schedules(steps in proptest::collection::vec((0u8..6, 0u64..20), 4..14)) {
        let (clock, p) = platform(PlatformConfig::default());
        let mut traces = Vec::new();
        for (action, minutes) in steps {
            let text = match action {
                0 => LOGIN,
                1 => "log out",
                2 | 3 => OEE,
                _ => "Start a work order for 10 units by tomorrow",
            };
            traces.push(p.say("web01", text, WAIT).unwrap().turn);
            clock.advance(Duration::from_secs(minutes * 60));
        }
        let mut gated_kinds = 0;
        for turn in &traces {
            for d in &turn.decisions {
                let gated = matches!(d.function.as_deref(), Some("oee-reader" | "work-order-dispatcher"));
                if gated {
                    gated_kinds += 1;
                    prop_assert!(d.authorized_by.is_some());
                    prop_assert!(d.gate.is_none());
                }
            }
        }
        let reads_and_orders = p
            .faas()
            .invocations()
            .into_iter()
            .filter(|i| i.lambda == "oee-reader" || i.lambda == "work-order-dispatcher")
            .count();
        prop_assert_eq!(reads_and_orders, gated_kinds);
        for turn in &traces {
            for d in turn.decisions.iter().filter(|d| d.authorized_by.is_some()) {
                let logged_in_before = traces
                    .iter()
                    .take_while(|t| t.trace_id != turn.trace_id)
                    .filter(|t| t.result.intent == Intent::Login || t.result.intent == Intent::Logout)
                    .last()
                    .map(|t| (t.result.intent, t.ts, t.outcomes.first().and_then(|o| o.result.clone())));
                let (intent, ts, minted) = logged_in_before.expect("a login precedes every authorised op");
                prop_assert_eq!(intent, Intent::Login);
                prop_assert!(d.ts < ts + DEFAULT_TOKEN_TTL.as_millis() as u64);
                let minted = minted.and_then(|r| r["token_id"].as_str().map(str::to_string));
                prop_assert_eq!(d.authorized_by.clone(), minted);
            }
        }
    }
}

#[test]
fn business_clock_is_shared() {
    let (clock, p) = platform(PlatformConfig::default());
    clock.advance(Duration::from_secs(5));
    assert_eq!(p.business_clock().now(), START + Duration::from_secs(5));
}
