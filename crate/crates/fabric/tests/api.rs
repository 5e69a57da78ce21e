use std::net::Ipv4Addr;

use qfabric::config::bundled;
use qfabric::node::{self, NodeConfig, RunningNode};
use reqwest::{Client, StatusCode};

async fn start(token: Option<&str>) -> (RunningNode, String) {
    let sc = bundled("two-node").unwrap();
    let cfg = NodeConfig {
        http: (Ipv4Addr::LOCALHOST, 0).into(),
        control_base_port: 0,
        token: token.map(str::to_owned),
        ..NodeConfig::default()
    };
    let node = node::start(&sc, cfg).await.unwrap();
    let base = format!("http://{}", node.http);
    (node, base)
}

async fn get(c: &Client, url: String) -> (StatusCode, String) {
    let r = c.get(url).send().await.unwrap();
    (r.status(), r.text().await.unwrap())
}

async fn post(c: &Client, url: String, body: &str) -> (StatusCode, String) {
    let r = c.post(url).body(body.to_owned()).send().await.unwrap();
    (r.status(), r.text().await.unwrap())
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_and_unknown_ids() {
    let (node, base) = start(None).await;
    let c = Client::new();
    for path in ["/qchannel/x/1", "/qchannel/1/2", "/qchannel/1/up", "/status/abc", "/status/70000"] {
        assert_eq!(get(&c, format!("{base}{path}")).await.0, StatusCode::BAD_REQUEST, "{path}");
    }
    assert_eq!(get(&c, format!("{base}/status/9")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&c, format!("{base}/qchannel/9/1")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&c, format!("{base}/qkey/9"), "00ff").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&c, format!("{base}/fault/99"), "cut").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&c, format!("{base}/qkey/1"), "xyz").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&c, format!("{base}/qkey/1"), "abc").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&c, format!("{base}/fault/1"), "melt").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&c, format!("{base}/nowhere")).await.0, StatusCode::NOT_FOUND);
    node.shutdown();
}

#[tokio::test(flavor = "multi_thread")]
async fn token_is_enforced() {
    let (node, base) = start(Some("s3cret")).await;
    let c = Client::new();
    assert_eq!(get(&c, format!("{base}/map")).await.0, StatusCode::UNAUTHORIZED);
    let wrong = c.get(format!("{base}/map")).bearer_auth("nope").send().await.unwrap();
    assert_eq!(wrong.status(), StatusCode::UNAUTHORIZED);
    let ok = c.get(format!("{base}/map")).bearer_auth("s3cret").send().await.unwrap();
    assert_eq!(ok.status(), StatusCode::OK);
    node.shutdown();
}

#[tokio::test(flavor = "multi_thread")]
async fn repeated_status_issues_nothing() {
    let (node, base) = start(None).await;
    let c = Client::new();
    let (code, _) = get(&c, format!("{base}/qchannel/1/0")).await;
    assert_eq!(code, StatusCode::OK);
    let (_, once) = get(&c, format!("{base}/log")).await;
    for _ in 0..3 {
        assert_eq!(get(&c, format!("{base}/qchannel/1/0")).await.0, StatusCode::OK);
    }
    let (_, thrice) = get(&c, format!("{base}/log")).await;
    assert_eq!(once, thrice);
    node.shutdown();
}

#[tokio::test(flavor = "multi_thread")]
async fn fault_moves_the_channel_off_quantum() {
    let (node, base) = start(None).await;
    let c = Client::new();
    assert_eq!(post(&c, format!("{base}/qkey/1"), &"0123456789abcdef".repeat(8)).await.0, StatusCode::OK);
    let (_, st) = get(&c, format!("{base}/status/1")).await;
    assert!(st.contains("mode DirectOtp"), "{st}");

    assert_eq!(post(&c, format!("{base}/fault/1"), "cut").await.0, StatusCode::OK);
    let (_, st) = get(&c, format!("{base}/status/1")).await;
    assert!(st.contains("mode ClassicalOnly"), "{st}");
    let (code, map) = get(&c, format!("{base}/map")).await;
    assert_eq!(code, StatusCode::OK);
    assert!(map.contains("channel 1"), "{map}");
    let (_, log) = get(&c, format!("{base}/log")).await;
    assert!(log.lines().any(|l| l.contains("ClassicalOnly")), "{log}");

    assert_eq!(post(&c, format!("{base}/fault/1"), "clear").await.0, StatusCode::OK);
    // a clear measures the plant; a fresh status report lifts the suspicion
    assert_eq!(get(&c, format!("{base}/qchannel/1/0")).await.0, StatusCode::OK);
    assert_eq!(get(&c, format!("{base}/qchannel/1/1")).await.0, StatusCode::OK);
    let (_, st) = get(&c, format!("{base}/status/1")).await;
    assert!(st.contains("mode DirectOtp"), "{st}");
    node.shutdown();
}
