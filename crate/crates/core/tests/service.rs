use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use vlpsense::channel::ChannelBase;
use vlpsense::ensemble::EnsembleBundle;
use vlpsense::fingerprint::{sweep_grid_with, Baseline, GridSpec, NormStats, Split};
use vlpsense::neural::{build_model, ModelSpec};
use vlpsense::scene::{build_scene, SceneConfig};
use vlpsense::service::{handle_request, serve_loop, Server, ServiceState, WireResponse};

struct Fixture {
    bundle: EnsembleBundle,
    baseline: Baseline,
    drss: Vec<[f64; 9]>,
}

fn fixture() -> Fixture {
    let cfg = SceneConfig {
        resolution_m: 1.0,
        ..SceneConfig::default()
    };
    let base = ChannelBase::new(&build_scene(&cfg).unwrap(), 3).unwrap();
    let mut ds = sweep_grid_with(
        &base,
        GridSpec {
            start: 1.0,
            step: 1.0,
            count: 4,
        },
    )
    .unwrap();
    for r in &mut ds.rows {
        r.split = Split::Train;
    }
    ds.norm = Some(NormStats::fit(ds.rows.iter().map(|r| &r.drss)).unwrap());
    let members = (0..3)
        .map(|s| {
            let mut w = build_model(&ModelSpec::mlp(), s).unwrap();
            w.norm = ds.norm.clone();
            w
        })
        .collect();
    Fixture {
        bundle: EnsembleBundle::uniform(members, &ds).unwrap(),
        baseline: Baseline::from_gains(base.scene(), 3, base.empty_gains()),
        drss: ds.rows.iter().map(|r| r.drss).collect(),
    }
}

fn request(id: &str, drss: &[f64; 9]) -> String {
    json!({"id": id, "drss_mw": drss}).to_string()
}

fn exchange(addr: SocketAddr, lines: &[String]) -> Vec<Value> {
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    // Pipelined: every request goes out before any response is read.
    for l in lines {
        writer.write_all(format!("{l}\n").as_bytes()).unwrap();
    }
    writer.flush().unwrap();
    (0..lines.len())
        .map(|_| {
            let mut s = String::new();
            reader.read_line(&mut s).unwrap();
            serde_json::from_str(&s).unwrap()
        })
        .collect()
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

#[test]
fn hundred_requests_come_back_in_order() {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.bundle.clone(), Some(f.baseline.clone())).unwrap());
    let server = Server::start(state, "127.0.0.1:0").unwrap();
    let lines: Vec<String> = (0..100)
        .map(|i| request(&format!("q{i}"), &f.drss[i % f.drss.len()]))
        .collect();
    let out = exchange(server.local_addr(), &lines);
    for (i, v) in out.iter().enumerate() {
        assert_eq!(v["id"], format!("q{i}"));
        let x = v["x_m"].as_f64().unwrap();
        let y = v["y_m"].as_f64().unwrap();
        let (ex, ey) =
            vlpsense::ensemble::ensemble_predict(&f.bundle, &f.drss[i % f.drss.len()]).unwrap();
        assert_eq!((x, y), (ex, ey));
        assert!((0.0..=5.0).contains(&x) && (0.0..=5.0).contains(&y));
    }
    server.shutdown();
}

#[test]
fn concurrent_connections_keep_independent_order() {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.bundle.clone(), None).unwrap());
    let server = Server::start(state, "127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let handles: Vec<_> = ["a", "b"]
        .into_iter()
        .map(|tag| {
            let lines: Vec<String> = (0..50)
                .map(|i| request(&format!("{tag}{i}"), &f.drss[(i * 7) % f.drss.len()]))
                .collect();
            std::thread::spawn(move || (tag, exchange(addr, &lines)))
        })
        .collect();
    for h in handles {
        let (tag, out) = h.join().unwrap();
        assert_eq!(out.len(), 50);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v["id"], format!("{tag}{i}"));
        }
    }
    server.shutdown();
}

#[test]
fn baseline_rss_gives_repeatable_zero_feature_output() {
    let f = fixture();
    let state = ServiceState::new(f.bundle.clone(), Some(f.baseline.clone())).unwrap();
    let line = json!({"id": "z", "rss_mw": f.baseline.rss_mw}).to_string();
    let strip = |r: WireResponse| match r {
        WireResponse::Position { id, x_m, y_m, .. } => (id, x_m, y_m),
        other => panic!("unexpected {other:?}"),
    };
    let first = strip(handle_request(&state, &line));
    for _ in 0..5 {
        assert_eq!(strip(handle_request(&state, &line)), first);
    }
    let zero = vlpsense::ensemble::ensemble_predict(&f.bundle, &[0.0; 9]).unwrap();
    assert_eq!((first.1, first.2), zero);

    let bare = ServiceState::new(f.bundle.clone(), None).unwrap();
    let v: Value = serde_json::from_str(&handle_request(&bare, &line).to_line()).unwrap();
    assert_eq!(v["error"]["code"], "NO_BASELINE");
    assert_eq!(v["id"], "z");
}

#[test]
fn malformed_line_keeps_connection_open() {
    let f = fixture();
    let state = Arc::new(ServiceState::new(f.bundle.clone(), None).unwrap());
    let server = Server::start(state, "127.0.0.1:0").unwrap();
    let lines = vec![
        "not json".to_string(),
        json!({"id": "n", "drss_mw": [1.0, f64::MAX, 0, 0, 0, 0, 0, 0]}).to_string(),
        request("ok", &f.drss[0]),
    ];
    let out = exchange(server.local_addr(), &lines);
    assert_eq!(out[0]["error"]["code"], "PARSE");
    assert_eq!(out[1]["error"]["code"], "BAD_ARITY");
    assert_eq!(out[2]["id"], "ok");
    assert!(out[2]["x_m"].is_number());
    server.shutdown();
}

#[test]
fn mismatched_baseline_is_refused() {
    let f = fixture();
    let other = SceneConfig {
        resolution_m: 1.0,
        wall_reflectance: 0.7,
        ..SceneConfig::default()
    };
    let base = ChannelBase::new(&build_scene(&other).unwrap(), 3).unwrap();
    let wrong = Baseline::from_gains(base.scene(), 3, base.empty_gains());
    let err = ServiceState::new(f.bundle, Some(wrong)).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn serving_leaves_artifacts_untouched() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bundle_dir = dir.path().join("bundle");
    let baseline = dir.path().join("baseline.json");
    f.bundle.save(&bundle_dir).unwrap();
    f.baseline.save(&baseline).unwrap();
    let files: Vec<_> = std::fs::read_dir(&bundle_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .chain([baseline.clone()])
        .collect();
    let before: Vec<String> = files.iter().map(|p| sha(p)).collect();

    // Reserve a free port, then hand it to the blocking loop.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let bind = format!("127.0.0.1:{port}");
    let flag = Arc::new(AtomicBool::new(false));
    let loop_flag = flag.clone();
    let (b, bl, addr) = (bundle_dir.clone(), baseline.clone(), bind.clone());
    let h = std::thread::spawn(move || serve_loop(&b, Some(&bl), &addr, loop_flag));

    let mut out = Vec::new();
    for _ in 0..100 {
        if let Ok(addr) = bind.parse::<SocketAddr>() {
            if TcpStream::connect(addr).is_ok() {
                out = exchange(addr, &[request("s", &f.drss[1])]);
                break;
            }
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    assert_eq!(out.len(), 1, "server never came up");
    assert_eq!(out[0]["id"], "s");
    flag.store(true, std::sync::atomic::Ordering::SeqCst);
    h.join().unwrap().unwrap();
    let after: Vec<String> = files.iter().map(|p| sha(p)).collect();
    assert_eq!(before, after);
}
