//! HTTP catalog and downloader against an in-process server.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;

use chrono::NaiveDate;
use serde_json::{json, Value};

use hcforge::refs::{SearchQuery, TimeWindow};
use hcforge::stac::{
    AssetRequest, Catalog, Downloader, HttpCatalog, HttpFetcher, RetryPolicy, StacError,
};

struct Request {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { method, path, body })
}

fn respond(stream: &mut TcpStream, status: u16, body: &[u8]) {
    let head = format!(
        "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body);
}

type Log = Arc<Mutex<Vec<(String, String, Value)>>>;

fn item(id: &str) -> Value {
    json!({"type": "Feature", "id": id, "collection": "sentinel-2-l2a",
        "properties": {"datetime": "2019-07-15T10:30:00Z", "grid:code": "MGRS-32TQM", "platform": "sentinel-2a"},
        "assets": {"visual": {"href": format!("https://example.invalid/{id}.tif")}}})
}

fn query() -> SearchQuery {
    let d = NaiveDate::from_ymd_opt(2019, 7, 15).unwrap();
    SearchQuery {
        tier: 1,
        collections: vec!["sentinel-2-l2a".into()],
        id_filter: None,
        tile_filter: Some("32TQM".into()),
        datetime_window: TimeWindow::around(d, 3),
        geometry: None,
    }
}

fn bytes(v: Value) -> Vec<u8> {
    serde_json::to_vec(&v).unwrap()
}

#[test]
fn search_follows_post_next_links_and_retries() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let mut script = HashMap::new();
    let page1 = json!({"type": "FeatureCollection", "features": [item("B"), item("A")],
        "links": [{"rel": "next", "href": format!("{base}/search"), "method": "POST", "merge": true, "body": {"token": "p2"}}]});
    let page2 =
        json!({"type": "FeatureCollection", "features": [item("C"), item("A")], "links": []});
    script.insert(
        "/search".to_string(),
        vec![(503, b"busy".to_vec()), (200, bytes(page1))],
    );
    script.insert("/search#p2".to_string(), vec![(200, bytes(page2))]);
    let (addr, log) = spawn_with(listener, script);

    let catalog = HttpCatalog::new(&addr, 2, 5, RetryPolicy::no_delay(1));
    let found = catalog.search(&query()).unwrap();
    let ids: Vec<&str> = found.iter().map(|c| c.item_id.as_str()).collect();
    assert_eq!(ids, ["A", "B", "C"]);
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 3);
    let first = &log[0].2;
    assert_eq!(first["query"]["grid:code"]["eq"], "MGRS-32TQM");
    assert_eq!(first["limit"], 2);
    let merged = &log[2].2;
    assert_eq!(merged["token"], "p2");
    assert_eq!(merged["collections"], json!(["sentinel-2-l2a"]));
}

/// Serves scripted responses per path (and POST `token`); the last entry repeats.
fn spawn_with(
    listener: TcpListener,
    script: HashMap<String, Vec<(u16, Vec<u8>)>>,
) -> (String, Log) {
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let log: Log = Arc::default();
    let seen = log.clone();
    thread::spawn(move || {
        let mut served: HashMap<String, usize> = HashMap::new();
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else {
                continue;
            };
            let body: Value = serde_json::from_slice(&req.body).unwrap_or(Value::Null);
            seen.lock()
                .unwrap()
                .push((req.method.clone(), req.path.clone(), body.clone()));
            let key = match body.get("token").and_then(Value::as_str) {
                Some(t) => format!("{}#{t}", req.path),
                None => req.path.clone(),
            };
            match script.get(&key) {
                Some(queue) => {
                    let n = served.entry(key).or_default();
                    let (status, bytes) = &queue[(*n).min(queue.len() - 1)];
                    *n += 1;
                    respond(&mut stream, *status, bytes);
                }
                None => respond(&mut stream, 404, b"not found"),
            }
        }
    });
    (addr, log)
}

#[test]
fn permanent_search_errors_are_not_retried() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let (addr, log) = spawn_with(
        listener,
        HashMap::from([("/search".to_string(), vec![(400, b"bad".to_vec())])]),
    );
    let catalog = HttpCatalog::new(&addr, 10, 5, RetryPolicy::no_delay(3));
    assert!(matches!(
        catalog.search(&query()),
        Err(StacError::Transport(_))
    ));
    assert_eq!(log.lock().unwrap().len(), 1);
}

fn request(addr: &str, name: &str) -> AssetRequest {
    AssetRequest {
        item_id: name.into(),
        asset: "visual".into(),
        href: format!("{addr}/assets/{name}.tif"),
        filename: format!("{name}.tif"),
    }
}

#[test]
fn downloads_retry_dedupe_and_persist() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let payload = vec![7u8; 4096];
    let script = HashMap::from([
        (
            "/assets/flaky.tif".to_string(),
            vec![(500, b"oops".to_vec()), (200, payload.clone())],
        ),
        ("/assets/gone.tif".to_string(), vec![(404, b"no".to_vec())]),
        ("/assets/down.tif".to_string(), vec![(503, b"no".to_vec())]),
    ]);
    let (addr, log) = spawn_with(listener, script);
    let store = tempfile::tempdir().unwrap();
    let dl = Downloader::new(
        store.path(),
        Arc::new(HttpFetcher::new()),
        RetryPolicy::no_delay(2),
    );

    let got = dl.fetch(&request(&addr, "flaky")).unwrap();
    assert!(got.transferred);
    assert_eq!(got.attempts, 2);
    assert_eq!(got.record.content_length_bytes, 4096);
    assert_eq!(
        std::fs::read(store.path().join(&got.record.path)).unwrap(),
        payload
    );
    assert!(Path::new(&format!(
        "{}.json",
        store.path().join(&got.record.path).display()
    ))
    .is_file());

    let again = dl.fetch(&request(&addr, "flaky")).unwrap();
    assert!(!again.transferred);
    let fresh = Downloader::new(
        store.path(),
        Arc::new(HttpFetcher::new()),
        RetryPolicy::no_delay(2),
    );
    assert!(!fresh.fetch(&request(&addr, "flaky")).unwrap().transferred);

    assert!(dl.fetch(&request(&addr, "gone")).is_err());
    assert!(dl.fetch(&request(&addr, "down")).is_err());
    let log = log.lock().unwrap();
    let hits = |p: &str| log.iter().filter(|(_, path, _)| path == p).count();
    assert_eq!(hits("/assets/flaky.tif"), 2);
    assert_eq!(hits("/assets/gone.tif"), 1);
    assert_eq!(hits("/assets/down.tif"), 3);
    assert!(!store.path().join("gone.tif").exists());
    assert!(std::fs::read_dir(store.path()).unwrap().all(|e| !e
        .unwrap()
        .path()
        .to_string_lossy()
        .ends_with(".partial")));
}
