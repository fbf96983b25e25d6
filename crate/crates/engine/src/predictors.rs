//! Predictor kinds: oracle, per-case probability files, and external processes
//! speaking the line protocol over stdio or a Unix socket.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use kipa_core::pipeline::{PatchRequest, Predictor, StageId, StubMode, StubPredictor};
use kipa_core::volume::{ProbVolume, ScalarVolume, VolumeHeader};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::nifti::{self, ReadOptions};
use crate::protocol::{self, RequestHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    StubOracle,
    FileBacked,
    ExternalProcess,
}

fn one() -> usize {
    1
}

fn ideal() -> StubMode {
    StubMode::Ideal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorHandle {
    pub kind: PredictorKind,
    /// Truth directory (stub-oracle), probability directory (file-backed),
    /// or command line / `unix:<path>` (external-process).
    pub endpoint: String,
    #[serde(default = "one")]
    pub capacity: usize,
    /// Oracle behaviour for the stub-oracle kind.
    #[serde(default = "ideal")]
    pub stub: StubMode,
}

/// `{dir}/{case_id}_{stage}_{class}.nii.gz`
pub fn prob_map_path(dir: &Path, case_id: &str, stage: StageId, class: usize) -> PathBuf {
    dir.join(format!("{case_id}_{}_{class}.nii.gz", stage.name()))
}

/// Loads the per-class maps of one case and stage, which must lie on `grid`.
pub fn load_prob_field(
    dir: &Path,
    case_id: &str,
    stage: StageId,
    grid: &VolumeHeader,
    opts: &ReadOptions,
) -> Result<StubPredictor> {
    let mut field = Vec::with_capacity(stage.num_classes());
    for c in 0..stage.num_classes() {
        let path = prob_map_path(dir, case_id, stage, c);
        let vol = nifti::read_scalar(&path, opts)?;
        if !vol.header().same_grid(grid) {
            return Err(EngineError::Invalid(format!(
                "{}: grid {:?} does not match the inference grid {:?}",
                path.display(),
                vol.shape(),
                grid.shape
            )));
        }
        field.push(vol.into_data());
    }
    Ok(StubPredictor::from_field(stage, grid.shape, field)?)
}

/// Writes one map per class in the file-backed layout.
pub fn write_prob_maps(dir: &Path, case_id: &str, stage: StageId, prob: &ProbVolume) -> Result<()> {
    for c in 0..prob.num_classes() {
        let vol = ScalarVolume::scalar(prob.header().clone(), prob.channel(c).to_vec())?;
        nifti::write_scalar(&prob_map_path(dir, case_id, stage, c), &vol)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    Command(Vec<String>),
    Unix(PathBuf),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("unix:") {
            return Ok(Endpoint::Unix(PathBuf::from(path)));
        }
        let words = shlex::split(s).filter(|w| !w.is_empty()).ok_or_else(|| {
            EngineError::config("predictor.endpoint", format!("cannot split command line {s:?}"))
        })?;
        Ok(Endpoint::Command(words))
    }
}

struct Conn {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Conn {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct Pool {
    idle: Vec<Conn>,
    open: usize,
}

/// Client for an external predictor; at most `capacity` requests in flight.
pub struct ExternalPredictor {
    endpoint: Endpoint,
    capacity: usize,
    pool: Mutex<Pool>,
    ready: Condvar,
    next_id: AtomicU64,
}

impl ExternalPredictor {
    pub fn new(endpoint: Endpoint, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EngineError::config("predictor.capacity", "must be >= 1"));
        }
        Ok(ExternalPredictor {
            endpoint,
            capacity,
            pool: Mutex::new(Pool { idle: Vec::new(), open: 0 }),
            ready: Condvar::new(),
            next_id: AtomicU64::new(0),
        })
    }

    fn connect(&self) -> std::io::Result<Conn> {
        match &self.endpoint {
            Endpoint::Command(words) => {
                let mut child = Command::new(&words[0])
                    .args(&words[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Conn {
                    reader: BufReader::new(Box::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                })
            }
            Endpoint::Unix(path) => {
                let stream = std::os::unix::net::UnixStream::connect(path)?;
                let read_half = stream.try_clone()?;
                Ok(Conn {
                    reader: BufReader::new(Box::new(read_half)),
                    writer: Box::new(stream),
                    child: None,
                })
            }
        }
    }

    fn checkout(&self) -> std::result::Result<Conn, String> {
        let mut pool = self.pool.lock().expect("pool lock");
        loop {
            if let Some(c) = pool.idle.pop() {
                return Ok(c);
            }
            if pool.open < self.capacity {
                pool.open += 1;
                drop(pool);
                return self.connect().map_err(|e| {
                    self.release(None);
                    format!("cannot reach predictor {:?}: {e}", self.endpoint)
                });
            }
            pool = self.ready.wait(pool).expect("pool lock");
        }
    }

    /// Returns a healthy connection to the pool or retires a broken one.
    fn release(&self, conn: Option<Conn>) {
        let mut pool = self.pool.lock().expect("pool lock");
        match conn {
            Some(c) => pool.idle.push(c),
            None => pool.open -= 1,
        }
        self.ready.notify_one();
    }
}

impl Predictor for ExternalPredictor {
    fn predict(&self, req: &PatchRequest<'_>) -> std::result::Result<Vec<f32>, String> {
        let header = RequestHeader {
            request_id: self.next_id.fetch_add(1, Ordering::Relaxed),
            stage_id: req.stage.name().into(),
            shape: req.shape,
            spacing: req.spacing,
            dtype: protocol::DTYPE.into(),
            num_classes: req.num_classes,
            channels: req.channels.len(),
            case_id: Some(req.case_id.into()),
            offset: Some(req.offset),
            grid_shape: Some(req.grid_shape),
        };
        let mut conn = self.checkout()?;
        let result = protocol::write_request(&mut conn.writer, &header, req.channels)
            .and_then(|_| protocol::read_response(&mut conn.reader, &header));
        match result {
            Ok(v) => {
                self.release(Some(conn));
                Ok(v)
            }
            Err(e) => {
                drop(conn);
                self.release(None);
                Err(e.to_string())
            }
        }
    }
}

/// Answers protocol requests.
pub trait PatchServer: Sync {
    fn answer(&self, header: &RequestHeader, channels: &[Vec<f32>]) -> std::result::Result<Vec<f32>, String>;
}

/// Serves patches cut from a file-backed probability directory. Requests must
/// carry `case_id`, `offset` and `grid_shape`.
pub struct ProbDirServer {
    dir: PathBuf,
    opts: ReadOptions,
    cache: Mutex<HashMap<(String, StageId), Arc<StubPredictor>>>,
}

impl ProbDirServer {
    pub fn new(dir: PathBuf, opts: ReadOptions) -> Self {
        ProbDirServer {
            dir,
            opts,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn field(&self, case_id: &str, stage: StageId, grid: [usize; 3]) -> Result<Arc<StubPredictor>> {
        let key = (case_id.to_string(), stage);
        if let Some(p) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(p.clone());
        }
        let mut field = Vec::new();
        for c in 0..stage.num_classes() {
            let path = prob_map_path(&self.dir, case_id, stage, c);
            let vol = nifti::read_scalar(&path, &self.opts)?;
            if vol.shape() != grid {
                return Err(EngineError::Invalid(format!(
                    "{} has shape {:?}, request grid is {grid:?}",
                    path.display(),
                    vol.shape()
                )));
            }
            field.push(vol.into_data());
        }
        let p = Arc::new(StubPredictor::from_field(stage, grid, field)?);
        self.cache.lock().expect("cache lock").insert(key, p.clone());
        Ok(p)
    }
}

impl PatchServer for ProbDirServer {
    fn answer(&self, h: &RequestHeader, channels: &[Vec<f32>]) -> std::result::Result<Vec<f32>, String> {
        let stage = StageId::from_name(&h.stage_id).ok_or_else(|| format!("unknown stage {:?}", h.stage_id))?;
        let (Some(case_id), Some(offset), Some(grid)) = (&h.case_id, h.offset, h.grid_shape) else {
            return Err("probability-directory mode needs case_id, offset and grid_shape".into());
        };
        let field = self.field(case_id, stage, grid).map_err(|e| e.to_string())?;
        field.predict(&PatchRequest {
            case_id,
            stage,
            patch_index: h.request_id as usize,
            grid_shape: grid,
            offset,
            shape: h.shape,
            spacing: h.spacing,
            num_classes: h.num_classes,
            channels,
        })
    }
}

/// Answers requests until the input stream ends. Malformed requests get an
/// error response and the loop continues.
pub fn serve(reader: &mut impl BufRead, writer: &mut impl Write, server: &dyn PatchServer) -> Result<usize> {
    let mut served = 0;
    while let Some(line) = protocol::read_line(reader)? {
        if line.trim().is_empty() {
            continue;
        }
        match protocol::read_request_payload(reader, &line) {
            Ok((h, ch)) => {
                match server.answer(&h, &ch) {
                    Ok(p) => protocol::write_response(writer, &h, &p)?,
                    Err(e) => protocol::write_error(writer, h.request_id, &e)?,
                }
                served += 1;
            }
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id")?.as_u64())
                    .unwrap_or(0);
                protocol::write_error(writer, id, &e.to_string())?;
            }
        }
    }
    Ok(served)
}

/// Serves each connection on a Unix socket in its own thread, forever.
pub fn serve_unix(path: &Path, server: &dyn PatchServer) -> Result<()> {
    let _ = std::fs::remove_file(path);
    let listener = std::os::unix::net::UnixListener::bind(path).map_err(EngineError::io(path))?;
    std::thread::scope(|s| {
        for stream in listener.incoming() {
            let stream = stream.map_err(EngineError::io(path))?;
            s.spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().expect("socket clone"));
                let mut writer = stream;
                if let Err(e) = serve(&mut reader, &mut writer, server) {
                    tracing::warn!(error = %e, "predictor connection closed");
                }
            });
        }
        Ok(())
    })
}
