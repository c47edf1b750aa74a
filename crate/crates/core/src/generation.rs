//! Text-to-image backends and the resumable generation loop.
//!
//! Every backend takes `{prompt, seed, size}` and returns PNG bytes. Images
//! land under `<run>/<model>/<prompt_id>/<seed>.png` and each attempt is
//! appended to `<run>/<model>/manifest.jsonl` as one JSON line.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::PromptSpec;
use crate::synth::{mock_image, MockConfig};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("backend {model} unreachable: {reason}")]
    BackendUnreachable { model: String, reason: String },
    #[error("backend {model} quota exceeded after {completed} new records")]
    QuotaExceeded { model: String, completed: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path}: line {line}: {reason}")]
    BadManifest { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenerationError + '_ {
    move |source| GenerationError::Io { path: path.to_path_buf(), source }
}

/// Outcome of a single backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying.
    Transient(String),
    /// The backend refused the prompt.
    Filtered,
    /// Rate limit or quota exhausted; stops the run.
    Quota,
}

pub trait Backend: Send + Sync {
    /// Cheap reachability check run once before any request.
    fn probe(&self) -> Result<(), String>;
    fn generate(&self, prompt: &str, seed: u64, size: u32) -> Result<Vec<u8>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    RemoteEndpoint,
    LocalProcess,
}

fn default_images() -> u32 {
    1
}
fn default_size() -> u32 {
    512
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub backend: BackendKind,
    /// URL for remote endpoints.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Program and arguments for local processes.
    #[serde(default)]
    pub command: Vec<String>,
    /// Environment variable holding a bearer token for the endpoint.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_images")]
    pub images_per_prompt: u32,
    /// Image `k` of a prompt uses seed `seed0 + k`.
    #[serde(default)]
    pub seed0: u64,
    #[serde(default = "default_size")]
    pub size: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub mock: MockConfig,
}

impl ModelSpec {
    pub fn mock(id: &str, images_per_prompt: u32) -> Self {
        Self {
            id: id.to_string(),
            backend: BackendKind::Mock,
            endpoint: None,
            command: Vec::new(),
            api_key_env: None,
            images_per_prompt,
            seed0: 0,
            size: MockConfig::default().size,
            concurrency: default_concurrency(),
            timeout_secs: default_timeout(),
            mock: MockConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidSpec(m));
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return bad(format!("model id {:?} is not a valid directory name", self.id));
        }
        if self.images_per_prompt == 0 {
            return bad(format!("{}: images_per_prompt must be at least 1", self.id));
        }
        if self.size < 16 {
            return bad(format!("{}: size {} too small", self.id, self.size));
        }
        if self.concurrency == 0 {
            return bad(format!("{}: concurrency must be at least 1", self.id));
        }
        match self.backend {
            BackendKind::RemoteEndpoint if self.endpoint.is_none() => bad(format!("{}: remote backend needs an endpoint", self.id)),
            BackendKind::LocalProcess if self.command.is_empty() => bad(format!("{}: local backend needs a command", self.id)),
            _ => Ok(()),
        }
    }

    pub fn backend(&self) -> Result<Box<dyn Backend>, GenerationError> {
        self.validate()?;
        Ok(match self.backend {
            BackendKind::Mock => Box::new(MockBackend { config: MockConfig { size: self.size, ..self.mock.clone() } }),
            BackendKind::RemoteEndpoint => Box::new(RemoteBackend::new(
                self.endpoint.clone().unwrap_or_default(),
                self.api_key_env.as_deref().and_then(|v| std::env::var(v).ok()),
                Duration::from_secs(self.timeout_secs),
            )),
            BackendKind::LocalProcess => Box::new(ProcessBackend { command: self.command.clone() }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationStatus {
    Ok,
    Failed,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub model_id: String,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub duration: f64,
    pub status: GenerationStatus,
    /// Hex sha256 of the PNG bytes for ok records.
    #[serde(default)]
    pub content_hash: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("PNG encoding into memory");
    out.into_inner()
}

/// Deterministic synthetic image for `(prompt, seed)`.
pub fn mock_backend(prompt: &str, seed: u64, config: &MockConfig) -> RgbImage {
    mock_image(prompt, seed, config).0
}

pub struct MockBackend {
    pub config: MockConfig,
}

impl Backend for MockBackend {
    fn probe(&self) -> Result<(), String> {
        Ok(())
    }

    fn generate(&self, prompt: &str, seed: u64, size: u32) -> Result<Vec<u8>, BackendError> {
        let cfg = MockConfig { size, ..self.config.clone() };
        Ok(encode_png(&mock_backend(prompt, seed, &cfg)))
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    prompt: &'a str,
    seed: u64,
    size: u32,
}

const MAX_IMAGE_BYTES: u64 = 64 << 20;

/// JSON-over-HTTP backend: POST `{prompt, seed, size}`, receive PNG.
///
/// 429 maps to [`BackendError::Quota`] once retries run out, 451 to
/// [`BackendError::Filtered`].
pub struct RemoteBackend {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
    timeout: Duration,
}

impl RemoteBackend {
    pub fn new(endpoint: String, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint, token, agent, timeout }
    }
}

fn host_port(url: &str) -> Result<(String, u16), String> {
    let uri: ureq::http::Uri = url.parse().map_err(|e| format!("bad endpoint {url}: {e}"))?;
    let host = uri.host().ok_or_else(|| format!("endpoint {url} has no host"))?;
    let port = uri.port_u16().unwrap_or(if uri.scheme_str() == Some("https") { 443 } else { 80 });
    Ok((host.trim_matches(['[', ']']).to_string(), port))
}

impl Backend for RemoteBackend {
    fn probe(&self) -> Result<(), String> {
        let (host, port) = host_port(&self.endpoint)?;
        let addrs: Vec<_> = (host.as_str(), port).to_socket_addrs().map_err(|e| format!("resolve {host}: {e}"))?.collect();
        let wait = self.timeout.min(Duration::from_secs(5));
        let mut last = format!("no address for {host}");
        for a in addrs {
            match TcpStream::connect_timeout(&a, wait) {
                Ok(_) => return Ok(()),
                Err(e) => last = format!("connect {a}: {e}"),
            }
        }
        Err(last)
    }

    fn generate(&self, prompt: &str, seed: u64, size: u32) -> Result<Vec<u8>, BackendError> {
        let body = serde_json::to_vec(&RequestBody { prompt, seed, size }).expect("request serializes");
        let mut req = self.agent.post(&self.endpoint).header("content-type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(&body[..]).map_err(|e| BackendError::Transient(e.to_string()))?;
        match resp.status().as_u16() {
            200 => resp
                .body_mut()
                .with_config()
                .limit(MAX_IMAGE_BYTES)
                .read_to_vec()
                .map_err(|e| BackendError::Transient(e.to_string())),
            429 => Err(BackendError::Quota),
            451 => Err(BackendError::Filtered),
            s => Err(BackendError::Transient(format!("http status {s}"))),
        }
    }
}

/// Local inference process: reads the JSON request on stdin and writes PNG
/// bytes to stdout. Exit status 3 reports a filtered prompt, 4 an exhausted
/// quota; any other failure is retried.
pub struct ProcessBackend {
    pub command: Vec<String>,
}

fn find_program(program: &str) -> bool {
    let p = Path::new(program);
    if p.components().count() > 1 {
        return p.is_file();
    }
    std::env::var_os("PATH").is_some_and(|paths| std::env::split_paths(&paths).any(|d| d.join(program).is_file()))
}

impl Backend for ProcessBackend {
    fn probe(&self) -> Result<(), String> {
        let program = self.command.first().ok_or("empty command")?;
        if find_program(program) {
            Ok(())
        } else {
            Err(format!("program {program} not found"))
        }
    }

    fn generate(&self, prompt: &str, seed: u64, size: u32) -> Result<Vec<u8>, BackendError> {
        let body = serde_json::to_vec(&RequestBody { prompt, seed, size }).expect("request serializes");
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Transient(format!("spawn: {e}")))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(&body));
        let out = child.wait_with_output().map_err(|e| BackendError::Transient(e.to_string()))?;
        let _ = writer.join();
        match out.status.code() {
            Some(0) => Ok(out.stdout),
            Some(3) => Err(BackendError::Filtered),
            Some(4) => Err(BackendError::Quota),
            _ => Err(BackendError::Transient(format!(
                "{}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each further failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, base_delay: Duration::from_secs(1) }
    }
}

/// One backend call with bounded retries. Returns PNG bytes that decode.
pub fn call_with_retry(backend: &dyn Backend, prompt: &str, seed: u64, size: u32, policy: RetryPolicy) -> Result<Vec<u8>, BackendError> {
    let mut delay = policy.base_delay;
    let mut last = BackendError::Transient("no attempts made".into());
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match backend.generate(prompt, seed, size) {
            Ok(bytes) => match image::load_from_memory_with_format(&bytes, ImageFormat::Png) {
                Ok(_) => return Ok(bytes),
                Err(e) => last = BackendError::Transient(format!("invalid PNG: {e}")),
            },
            Err(BackendError::Filtered) => return Err(BackendError::Filtered),
            Err(e) => last = e,
        }
    }
    Err(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub ok: usize,
    pub failed: usize,
    pub filtered: usize,
    /// Triples already present in the manifest.
    pub skipped: usize,
}

pub fn manifest_path(run_dir: &Path, model_id: &str) -> PathBuf {
    run_dir.join(model_id).join("manifest.jsonl")
}

pub fn read_generation_manifest(path: &Path) -> Result<Vec<GenerationRecord>, GenerationError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            // A torn final line from an interrupted append is dropped.
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => {
                return Err(GenerationError::BadManifest { path: path.into(), line: i + 1, reason: e.to_string() })
            }
        }
    }
    Ok(out)
}

/// Releases items tagged with their job index in index order.
pub(crate) struct InOrder<T> {
    next: usize,
    pending: BTreeMap<usize, T>,
}

impl<T> Default for InOrder<T> {
    fn default() -> Self {
        Self { next: 0, pending: BTreeMap::new() }
    }
}

impl<T> InOrder<T> {
    pub(crate) fn push(&mut self, index: usize, item: T) -> Vec<T> {
        self.pending.insert(index, item);
        let mut ready = Vec::new();
        while let Some(item) = self.pending.remove(&self.next) {
            ready.push(item);
            self.next += 1;
        }
        ready
    }

    pub(crate) fn drain(self) -> Vec<T> {
        self.pending.into_values().collect()
    }
}

/// Cuts an unterminated last line left by an interrupted append, so the next
/// record starts on a fresh line.
pub(crate) fn drop_torn_tail(path: &Path) -> std::io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    if bytes.last().is_none_or(|&b| b == b'\n') {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)
}

fn write_atomically(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("png.part");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

struct Job<'a> {
    prompt: &'a PromptSpec,
    seed: u64,
}

/// Generates `images_per_prompt` images per prompt with seeds
/// `seed0..seed0+n`, skipping triples already in the manifest.
///
/// Quota exhaustion stops new requests; in-flight ones finish and are
/// recorded before [`GenerationError::QuotaExceeded`] is returned.
pub fn generate(
    suite: &[PromptSpec],
    model: &ModelSpec,
    run_dir: &Path,
    backend: &dyn Backend,
    retry: RetryPolicy,
) -> Result<GenerationSummary, GenerationError> {
    model.validate()?;
    backend
        .probe()
        .map_err(|reason| GenerationError::BackendUnreachable { model: model.id.clone(), reason })?;
    let model_dir = run_dir.join(&model.id);
    fs::create_dir_all(&model_dir).map_err(io_err(&model_dir))?;
    let mpath = manifest_path(run_dir, &model.id);
    let done: HashSet<(String, u64)> =
        read_generation_manifest(&mpath)?.into_iter().map(|r| (r.prompt_id, r.seed)).collect();

    let mut summary = GenerationSummary::default();
    let mut jobs = Vec::new();
    for p in suite {
        for k in 0..u64::from(model.images_per_prompt) {
            let seed = model.seed0 + k;
            if done.contains(&(p.id.clone(), seed)) {
                summary.skipped += 1;
            } else {
                jobs.push(Job { prompt: p, seed });
            }
        }
    }
    if jobs.is_empty() {
        return Ok(summary);
    }

    drop_torn_tail(&mpath).map_err(io_err(&mpath))?;
    let mut manifest = OpenOptions::new().create(true).append(true).open(&mpath).map_err(io_err(&mpath))?;
    let next = AtomicUsize::new(0);
    let halt = AtomicBool::new(false);
    let workers = model.concurrency.min(jobs.len());
    let (tx, rx) = mpsc::channel::<Result<(usize, GenerationRecord), GenerationError>>();
    let mut first_error = None;

    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (jobs, next, halt, model_dir) = (&jobs, &next, &halt, &model_dir);
            s.spawn(move || loop {
                if halt.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let rel = format!("{}/{}.png", job.prompt.id, job.seed);
                let start = Instant::now();
                let result = call_with_retry(backend, &job.prompt.text, job.seed, model.size, retry);
                let mut rec = GenerationRecord {
                    prompt_id: job.prompt.id.clone(),
                    model_id: model.id.clone(),
                    seed: job.seed,
                    image_path: rel.clone(),
                    duration: 0.0,
                    status: GenerationStatus::Ok,
                    content_hash: None,
                    error: None,
                };
                match result {
                    Ok(bytes) => {
                        let dir = model_dir.join(&job.prompt.id);
                        let path = model_dir.join(&rel);
                        let written = fs::create_dir_all(&dir).and_then(|_| write_atomically(&path, &bytes));
                        if let Err(e) = written {
                            let _ = tx.send(Err(GenerationError::Io { path, source: e }));
                            halt.store(true, Ordering::SeqCst);
                            break;
                        }
                        rec.content_hash = Some(content_hash(&bytes));
                    }
                    Err(BackendError::Filtered) => rec.status = GenerationStatus::Filtered,
                    Err(BackendError::Quota) => {
                        halt.store(true, Ordering::SeqCst);
                        let _ = tx.send(Err(GenerationError::QuotaExceeded { model: model.id.clone(), completed: 0 }));
                        break;
                    }
                    Err(BackendError::Transient(msg)) => {
                        rec.status = GenerationStatus::Failed;
                        rec.error = Some(msg);
                    }
                }
                rec.duration = start.elapsed().as_secs_f64();
                if tx.send(Ok((i, rec))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut order = InOrder::default();
        let mut write = |rec: GenerationRecord, first_error: &mut Option<GenerationError>| {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            if let Err(e) = manifest.write_all(line.as_bytes()).and_then(|_| manifest.flush()) {
                halt.store(true, Ordering::SeqCst);
                first_error.get_or_insert(io_err(&mpath)(e));
                return;
            }
            match rec.status {
                GenerationStatus::Ok => summary.ok += 1,
                GenerationStatus::Failed => summary.failed += 1,
                GenerationStatus::Filtered => summary.filtered += 1,
            }
        };
        for msg in rx {
            match msg {
                Ok((i, rec)) => {
                    for rec in order.push(i, rec) {
                        write(rec, &mut first_error);
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        // jobs halted mid-run leave gaps; keep what finished
        for rec in order.drain() {
            write(rec, &mut first_error);
        }
    });

    match first_error {
        Some(GenerationError::QuotaExceeded { model, .. }) => {
            Err(GenerationError::QuotaExceeded { model, completed: summary.ok + summary.failed + summary.filtered })
        }
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Checks every ok record: the file exists and hashes to the stored value.
pub fn verify_manifest(run_dir: &Path, model_id: &str) -> Result<Vec<String>, GenerationError> {
    let mpath = manifest_path(run_dir, model_id);
    let base = mpath.parent().expect("manifest has a parent");
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for r in read_generation_manifest(&mpath)? {
        if !seen.insert((r.prompt_id.clone(), r.seed)) {
            problems.push(format!("duplicate record {} seed {}", r.prompt_id, r.seed));
        }
        if r.status != GenerationStatus::Ok {
            continue;
        }
        let path = base.join(&r.image_path);
        let mut bytes = Vec::new();
        match File::open(&path).and_then(|mut f| f.read_to_end(&mut bytes)) {
            Ok(_) if Some(content_hash(&bytes)) == r.content_hash => {}
            Ok(_) => problems.push(format!("{} does not match its hash", r.image_path)),
            Err(e) => problems.push(format!("{}: {e}", r.image_path)),
        }
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{prompt_id, PromptKind, TargetDomain};
    use std::sync::Mutex;

    fn suite(n: usize) -> Vec<PromptSpec> {
        (0..n)
            .map(|i| {
                let text = format!("A photo of a person number {i}, portrait, natural light");
                PromptSpec {
                    id: prompt_id(PromptKind::Representation, &text),
                    text,
                    domain: TargetDomain::Occupations,
                    kind: PromptKind::Representation,
                    gender: None,
                    skintone: None,
                    background: "natural light".into(),
                }
            })
            .collect()
    }

    fn small(id: &str, n: u32) -> ModelSpec {
        ModelSpec { size: 64, ..ModelSpec::mock(id, n) }
    }

    const NO_WAIT: RetryPolicy = RetryPolicy { attempts: 3, base_delay: Duration::ZERO };

    #[test]
    fn in_order_releases_by_index() {
        let mut o = InOrder::default();
        assert!(o.push(1, 'b').is_empty());
        assert_eq!(o.push(0, 'a'), ['a', 'b']);
        assert!(o.push(3, 'd').is_empty());
        assert_eq!(o.drain(), ['d']);
    }

    #[test]
    fn mock_is_deterministic() {
        let b = MockBackend { config: MockConfig::default() };
        assert_eq!(b.generate("a nurse", 4, 64).unwrap(), b.generate("a nurse", 4, 64).unwrap());
        assert_ne!(b.generate("a nurse", 4, 64).unwrap(), b.generate("a nurse", 5, 64).unwrap());
    }

    #[test]
    fn mock_run_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let s = suite(3);
        let m = small("mock", 2);
        let b = m.backend().unwrap();
        let first = generate(&s[..2], &m, dir.path(), b.as_ref(), NO_WAIT).unwrap();
        assert_eq!(first.ok, 4);
        let second = generate(&s, &m, dir.path(), b.as_ref(), NO_WAIT).unwrap();
        assert_eq!((second.ok, second.skipped), (2, 4));
        let recs = read_generation_manifest(&manifest_path(dir.path(), "mock")).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(verify_manifest(dir.path(), "mock").unwrap().is_empty());
        let again = generate(&s, &m, dir.path(), b.as_ref(), NO_WAIT).unwrap();
        assert_eq!((again.ok, again.skipped), (0, 6));
    }

    struct Scripted {
        calls: Mutex<Vec<Result<(), BackendError>>>,
    }

    impl Backend for Scripted {
        fn probe(&self) -> Result<(), String> {
            Ok(())
        }
        fn generate(&self, prompt: &str, seed: u64, size: u32) -> Result<Vec<u8>, BackendError> {
            let next = self.calls.lock().unwrap().pop().unwrap_or(Ok(()));
            next.map(|_| MockBackend { config: MockConfig::default() }.generate(prompt, seed, size).unwrap())
        }
    }

    #[test]
    fn retries_then_fails_or_filters() {
        let t = || Err(BackendError::Transient("boom".into()));
        let b = Scripted { calls: Mutex::new(vec![Ok(()), t(), t()]) };
        assert!(call_with_retry(&b, "x", 0, 32, NO_WAIT).is_ok());
        let b = Scripted { calls: Mutex::new(vec![t(), t(), t()]) };
        assert!(matches!(call_with_retry(&b, "x", 0, 32, NO_WAIT), Err(BackendError::Transient(_))));
        let b = Scripted { calls: Mutex::new(vec![Err(BackendError::Filtered)]) };
        assert_eq!(call_with_retry(&b, "x", 0, 32, NO_WAIT), Err(BackendError::Filtered));
    }

    #[test]
    fn quota_halts_with_partial_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = ModelSpec { concurrency: 1, ..small("q", 3) };
        let quota = || Err(BackendError::Quota);
        let b = Scripted { calls: Mutex::new(vec![quota(), quota(), quota(), Ok(()), Ok(())]) };
        let err = generate(&suite(2), &m, dir.path(), &b, NO_WAIT).unwrap_err();
        assert!(matches!(err, GenerationError::QuotaExceeded { completed: 2, .. }));
        assert_eq!(read_generation_manifest(&manifest_path(dir.path(), "q")).unwrap().len(), 2);
    }

    #[test]
    fn unreachable_endpoint_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let m = ModelSpec {
            backend: BackendKind::RemoteEndpoint,
            endpoint: Some(format!("http://127.0.0.1:{port}/generate")),
            ..small("remote", 1)
        };
        let b = m.backend().unwrap();
        let err = generate(&suite(1), &m, dir.path(), b.as_ref(), NO_WAIT).unwrap_err();
        assert!(matches!(err, GenerationError::BackendUnreachable { .. }));
        assert!(!manifest_path(dir.path(), "remote").exists());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::mock("m", 0).validate().is_err());
        assert!(ModelSpec::mock("a/b", 1).validate().is_err());
        let remote = ModelSpec { backend: BackendKind::RemoteEndpoint, ..ModelSpec::mock("r", 1) };
        assert!(remote.validate().is_err());
    }
}
