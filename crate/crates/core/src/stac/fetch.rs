use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use super::{CandidateScene, RetryPolicy, StacError};
use crate::refs::Level;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchError {
    /// Worth retrying: timeouts, 5xx, 408, 429, dropped connections.
    Transient(String),
    Permanent(String),
    /// Body shorter or longer than announced.
    Integrity(String),
}

/// Streams an asset href into a writer and returns the byte count.
pub trait AssetFetcher: Send + Sync {
    fn fetch(&self, href: &str, out: &mut dyn Write) -> Result<u64, FetchError>;
}

pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl HttpFetcher {
    pub fn new() -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        HttpFetcher { agent }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl AssetFetcher for HttpFetcher {
    fn fetch(&self, href: &str, out: &mut dyn Write) -> Result<u64, FetchError> {
        let mut resp = self
            .agent
            .get(href)
            .call()
            .map_err(|e| FetchError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let msg = format!("HTTP {status} for {href}");
            return Err(if status >= 500 || status == 408 || status == 429 {
                FetchError::Transient(msg)
            } else {
                FetchError::Permanent(msg)
            });
        }
        let expected = resp.body().content_length();
        let n = io::copy(&mut resp.body_mut().as_reader(), out)
            .map_err(|e| FetchError::Transient(e.to_string()))?;
        match expected {
            Some(len) if len != n => Err(FetchError::Integrity(format!(
                "expected {len} bytes, received {n}"
            ))),
            _ => Ok(n),
        }
    }
}

/// Reads hrefs from the local filesystem; relative hrefs resolve against `base`.
pub struct FileFetcher {
    base: PathBuf,
}

impl FileFetcher {
    pub fn new(base: &Path) -> Self {
        FileFetcher {
            base: base.to_path_buf(),
        }
    }

    fn resolve(&self, href: &str) -> PathBuf {
        let p = Path::new(href.strip_prefix("file://").unwrap_or(href));
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

impl AssetFetcher for FileFetcher {
    fn fetch(&self, href: &str, out: &mut dyn Write) -> Result<u64, FetchError> {
        let path = self.resolve(href);
        let mut f = File::open(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => {
                FetchError::Permanent(format!("{}: not found", path.display()))
            }
            _ => FetchError::Transient(e.to_string()),
        })?;
        io::copy(&mut f, out).map_err(|e| FetchError::Transient(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalFileRecord {
    /// Relative to the download store.
    pub path: String,
    pub item_id: String,
    pub asset: String,
    pub content_length_bytes: u64,
    pub checksum: String,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadOutcome {
    pub record: LocalFileRecord,
    pub transferred: bool,
    pub attempts: u32,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// `{platform}_{tile}_{YYYYMMDD}_{level}_{asset}.tif`
pub fn local_filename(scene: &CandidateScene, asset: &str) -> String {
    filename_from_parts(
        &scene.platform,
        &scene.tile_id,
        scene.datetime,
        scene.level,
        asset,
    )
}

pub fn filename_from_parts(
    platform: &str,
    tile: &str,
    datetime: DateTime<Utc>,
    level: Level,
    asset: &str,
) -> String {
    format!(
        "{}_{}_{}_{}_{}.tif",
        sanitize(platform),
        sanitize(tile),
        datetime.format("%Y%m%d"),
        level.as_str(),
        sanitize(asset)
    )
}

/// One asset to place in the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssetRequest {
    pub item_id: String,
    pub asset: String,
    pub href: String,
    pub filename: String,
}

impl AssetRequest {
    pub fn for_scene(scene: &CandidateScene, asset: &str) -> Result<AssetRequest, StacError> {
        let href = scene
            .assets
            .get(asset)
            .ok_or_else(|| StacError::NoUsableAsset {
                item_id: scene.item_id.clone(),
            })?
            .href
            .clone();
        Ok(AssetRequest {
            item_id: scene.item_id.clone(),
            asset: asset.to_string(),
            href,
            filename: local_filename(scene, asset),
        })
    }
}

pub fn sha256_file(path: &Path) -> io::Result<(u64, String)> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    Ok((n, hex::encode(h.finalize())))
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
    written: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

type Slot = Arc<OnceLock<Result<DownloadOutcome, StacError>>>;

/// Deduplicating downloader. Each `(item_id, asset)` is fetched at most once
/// per instance; concurrent callers for the same key wait for the first one.
pub struct Downloader {
    store: PathBuf,
    fetcher: Arc<dyn AssetFetcher>,
    retry: RetryPolicy,
    slots: Mutex<HashMap<(String, String), Slot>>,
    fetch_calls: AtomicU64,
    transfers: AtomicU64,
}

impl Downloader {
    pub fn new(store: &Path, fetcher: Arc<dyn AssetFetcher>, retry: RetryPolicy) -> Self {
        Downloader {
            store: store.to_path_buf(),
            fetcher,
            retry,
            slots: Mutex::new(HashMap::new()),
            fetch_calls: AtomicU64::new(0),
            transfers: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &Path {
        &self.store
    }

    /// Number of fetch attempts issued, failed ones included.
    pub fn fetch_calls(&self) -> u64 {
        self.fetch_calls.load(Ordering::Relaxed)
    }

    /// Number of completed transfers.
    pub fn transfers(&self) -> u64 {
        self.transfers.load(Ordering::Relaxed)
    }

    pub fn download(
        &self,
        scene: &CandidateScene,
        asset: &str,
    ) -> Result<DownloadOutcome, StacError> {
        self.fetch(&AssetRequest::for_scene(scene, asset)?)
    }

    pub fn fetch(&self, req: &AssetRequest) -> Result<DownloadOutcome, StacError> {
        let key = (req.item_id.clone(), req.asset.clone());
        let slot = {
            let mut slots = self.slots.lock().expect("slot registry poisoned");
            slots.entry(key).or_default().clone()
        };
        let mut first = false;
        let result = slot.get_or_init(|| {
            first = true;
            self.download_uncached(req)
        });
        match result {
            // Later callers did not transfer anything themselves.
            Ok(o) if !first => Ok(DownloadOutcome {
                transferred: false,
                attempts: 0,
                ..o.clone()
            }),
            other => other.clone(),
        }
    }

    fn existing(&self, path: &Path, req: &AssetRequest) -> Option<LocalFileRecord> {
        let sidecar = sidecar_path(path);
        let rec: LocalFileRecord = serde_json::from_slice(&fs::read(sidecar).ok()?).ok()?;
        if rec.item_id != req.item_id || rec.asset != req.asset {
            return None;
        }
        let meta = fs::metadata(path).ok()?;
        if meta.len() != rec.content_length_bytes {
            return None;
        }
        let (_, sum) = sha256_file(path).ok()?;
        (sum == rec.checksum).then_some(rec)
    }

    fn download_uncached(&self, req: &AssetRequest) -> Result<DownloadOutcome, StacError> {
        let href = &req.href;
        let name = req.filename.clone();
        let path = self.store.join(&name);
        if let Some(record) = self.existing(&path, req) {
            debug!(file = %name, "already downloaded");
            return Ok(DownloadOutcome {
                record,
                transferred: false,
                attempts: 0,
            });
        }
        fs::create_dir_all(&self.store).map_err(|e| StacError::Storage(e.to_string()))?;
        let partial = self.store.join(format!("{name}.partial"));
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.fetch_calls.fetch_add(1, Ordering::Relaxed);
            match self.fetch_to(href, &partial) {
                Ok((len, checksum)) => {
                    fs::rename(&partial, &path).map_err(|e| StacError::Storage(e.to_string()))?;
                    let record = LocalFileRecord {
                        path: name,
                        item_id: req.item_id.clone(),
                        asset: req.asset.clone(),
                        content_length_bytes: len,
                        checksum,
                        fetched_at: Utc::now().trunc_subsecs(0),
                    };
                    write_json_atomic(&sidecar_path(&path), &record)?;
                    self.transfers.fetch_add(1, Ordering::Relaxed);
                    return Ok(DownloadOutcome {
                        record,
                        transferred: true,
                        attempts,
                    });
                }
                Err(e) => {
                    let _ = fs::remove_file(&partial);
                    let retryable = !matches!(e, FetchError::Permanent(_));
                    if retryable && attempts < self.retry.max_attempts() {
                        warn!(item = %req.item_id, attempts, error = ?e, "download failed, retrying");
                        thread::sleep(self.retry.delay(attempts));
                        continue;
                    }
                    return Err(match e {
                        FetchError::Integrity(m) => StacError::Integrity(m),
                        FetchError::Transient(m) | FetchError::Permanent(m) => {
                            StacError::Transport(format!("{m} after {attempts} attempt(s)"))
                        }
                    });
                }
            }
        }
    }

    fn fetch_to(&self, href: &str, partial: &Path) -> Result<(u64, String), FetchError> {
        let file = File::create(partial).map_err(|e| FetchError::Permanent(e.to_string()))?;
        let mut w = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
            written: 0,
        };
        let n = self.fetcher.fetch(href, &mut w)?;
        w.flush()
            .map_err(|e| FetchError::Permanent(e.to_string()))?;
        if n != w.written {
            return Err(FetchError::Integrity(format!(
                "fetcher reported {n} bytes, wrote {}",
                w.written
            )));
        }
        Ok((n, hex::encode(w.hasher.finalize())))
    }
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StacError> {
    let tmp = sidecar_path(&path.with_extension("tmp"));
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| StacError::Storage(e.to_string()))?;
    fs::write(&tmp, bytes).map_err(|e| StacError::Storage(e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| StacError::Storage(e.to_string()))
}
