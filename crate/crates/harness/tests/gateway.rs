use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use mip::clock::ManualClock;
use mip::mdie::{ChannelDescriptor, Modality};
use mip::platform::{Platform, PlatformConfig};
use mip_harness::gateway::{serve, GatewayState};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio_tungstenite::connect_async;
use tokio_tungstenite::tungstenite::Message;

const LOAD_CHANNELS: usize = 4;
const TURNS_PER_CHANNEL: usize = 10;

struct Gateway {
    addr: String,
    platform: Arc<Platform>,
}

async fn start() -> Gateway {
    let mut config = PlatformConfig::default();
    for i in 0..LOAD_CHANNELS {
        config
            .channels
            .push(ChannelDescriptor::new(format!("load{i}"), Modality::Text).with_rate(1000.0, 1000));
    }
    let clock = Arc::new(ManualClock::new(Duration::from_secs(1_736_150_400)));
    let platform = Arc::new(Platform::start(config, clock).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let state = Arc::new(GatewayState::new(platform.clone()));
    tokio::spawn(serve(listener, state));
    Gateway { addr, platform }
}

async fn http_get(url: String) -> Result<Value, u16> {
    tokio::task::spawn_blocking(move || match ureq::get(&url).call() {
        Ok(mut r) => Ok(r.body_mut().read_json::<Value>().unwrap()),
        Err(ureq::Error::StatusCode(code)) => Err(code),
        Err(e) => panic!("{e}"),
    })
    .await
    .unwrap()
}

async fn http_post(url: String, body: Value) -> Result<Value, u16> {
    tokio::task::spawn_blocking(move || match ureq::post(&url).send_json(&body) {
        Ok(mut r) => Ok(r.body_mut().read_json::<Value>().unwrap()),
        Err(ureq::Error::StatusCode(code)) => Err(code),
        Err(e) => panic!("{e}"),
    })
    .await
    .unwrap()
}

async fn say<S>(ws: &mut S, text: &str) -> Value
where
    S: SinkExt<Message> + StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
    <S as futures_util::Sink<Message>>::Error: std::fmt::Debug,
{
    ws.send(Message::text(json!({ "text": text }).to_string())).await.unwrap();
    loop {
        let msg = ws.next().await.expect("socket open").unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn websocket_login_and_session_view() {
    let gw = start().await;
    let (mut ws, _) = connect_async(format!("ws://{}/channel/web01", gw.addr)).await.unwrap();
    let frame = say(&mut ws, "Hi Machine, my secret is ABCXYZ").await;
    assert_eq!(frame["reply"], "Welcome operator1, you are now logged in.");
    assert_eq!(frame["modality"], "text");
    assert_eq!(frame["turn"], 1);
    let session = frame["session"].as_str().unwrap().to_string();

    let frame = say(&mut ws, "What is the OEE of the machine?").await;
    assert!(frame["reply"].as_str().unwrap().contains("0.84645"), "{frame}");
    assert_eq!(frame["session"], session.as_str());

    let bad = {
        ws.send(Message::text("not json")).await.unwrap();
        let Message::Text(t) = ws.next().await.unwrap().unwrap() else { panic!() };
        serde_json::from_str::<Value>(t.as_str()).unwrap()
    };
    assert!(bad["error"].is_string());

    let view = http_get(format!("http://{}/sessions/{session}", gw.addr)).await.unwrap();
    assert_eq!(view["session_id"], session.as_str());
    assert_eq!(view["principal"], "operator1");
    assert_eq!(view["authenticated"], true);
    assert_eq!(view["channel_id"], "web01");
    assert!(view["context"].is_object());

    assert_eq!(http_get(format!("http://{}/sessions/nope", gw.addr)).await, Err(404));

    let metrics = http_get(format!("http://{}/metrics", gw.addr)).await.unwrap();
    for field in ["broker", "redelivered", "dead_letters", "core", "core_consumers", "lambdas", "journal_lines"] {
        assert!(metrics.get(field).is_some(), "missing {field}: {metrics}");
    }
    assert_eq!(metrics["core_consumers"], json!(["core-1", "core-2", "core-3"]));
    assert_eq!(metrics["core"]["processed"], 2);
    gw.platform.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unknown_channel_is_registered_on_connect() {
    let gw = start().await;
    let (mut ws, _) = connect_async(format!("ws://{}/channel/kiosk7", gw.addr)).await.unwrap();
    let frame = say(&mut ws, "help").await;
    assert!(frame["reply"].is_string(), "{frame}");
    assert!(gw.platform.mdie().channel("kiosk7").is_some());
    gw.platform.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn chaos_endpoint_validates_requests() {
    let gw = start().await;
    let url = format!("http://{}/chaos", gw.addr);
    assert_eq!(http_post(url.clone(), json!({ "kill_consumer": "core-9" })).await, Err(400));
    assert_eq!(http_post(url.clone(), json!({ "ack_drop": 2.0 })).await, Err(400));
    assert!(matches!(http_post(url.clone(), json!({ "bogus": 1 })).await, Err(code) if code >= 400));
    let r = http_post(url.clone(), json!({ "directory_down": true })).await.unwrap();
    assert_eq!(r["applied"], json!(["directory_down=true"]));

    let (mut ws, _) = connect_async(format!("ws://{}/channel/web01", gw.addr)).await.unwrap();
    let frame = say(&mut ws, "Hi Machine, my secret is ABCXYZ").await;
    assert!(!frame["reply"].as_str().unwrap_or("").starts_with("Welcome"), "{frame}");
    gw.platform.shutdown();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn killing_a_core_consumer_loses_no_replies() {
    let gw = start().await;
    let mut tasks = Vec::new();
    for c in 0..LOAD_CHANNELS {
        let addr = gw.addr.clone();
        tasks.push(tokio::spawn(async move {
            let (mut ws, _) = connect_async(format!("ws://{addr}/channel/load{c}")).await.unwrap();
            let mut frames = vec![say(&mut ws, "Hi Machine, my secret is ABCXYZ").await];
            for _ in 0..TURNS_PER_CHANNEL {
                frames.push(say(&mut ws, "What is the OEE of the machine?").await);
                tokio::time::sleep(Duration::from_millis(5)).await;
            }
            frames
        }));
    }
    tokio::time::sleep(Duration::from_millis(30)).await;
    let r = http_post(format!("http://{}/chaos", gw.addr), json!({ "kill_consumer": "core-2" }))
        .await
        .unwrap();
    assert_eq!(r["core_consumers"], json!(["core-1", "core-3"]));

    let mut traces = std::collections::HashSet::new();
    for t in tasks {
        let frames = t.await.unwrap();
        assert!(frames[0]["reply"].as_str().unwrap().starts_with("Welcome"), "{}", frames[0]);
        for f in &frames[1..] {
            assert!(f["reply"].as_str().unwrap().contains("0.84645"), "{f}");
        }
        for f in &frames {
            assert!(traces.insert(f["trace_id"].as_str().unwrap().to_string()));
        }
    }
    let total = LOAD_CHANNELS * (TURNS_PER_CHANNEL + 1);
    assert_eq!(traces.len(), total);
    let metrics = http_get(format!("http://{}/metrics", gw.addr)).await.unwrap();
    assert_eq!(metrics["core"]["processed"], total);
    assert_eq!(metrics["dead_letters"], 0);
    for _ in 0..100 {
        if gw.platform.journal().len().unwrap() >= total {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(gw.platform.journal().len().unwrap(), total);
    gw.platform.shutdown();
}
