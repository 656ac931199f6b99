//! One-round, summary-only exchange between sites through a shared
//! directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run_dir/
//!   broadcast.json            pooled target covariate summary
//!   site_<id>.summary.json    one envelope per site
//!   result.json               aggregation result
//! ```
//!
//! Every envelope carries the SHA-256 of its payload's canonical JSON
//! (sorted keys, no whitespace, shortest round-trip floats).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregate::AggregationResult;
use crate::data::SiteData;
use crate::error::{FaceError, Result};
use crate::pipeline::{
    leading_phase, make_broadcast, source_phase, target_phase, Broadcast, LambdaChoice,
    PipelineConfig, SourcePacket, TargetPacket,
};

pub const PROTOCOL_VERSION: &str = "face/1";
pub const BROADCAST_FILE: &str = "broadcast.json";
pub const RESULT_FILE: &str = "result.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TargetBroadcast,
    TargetSummary,
    SourceSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "data")]
pub enum Payload {
    Broadcast(Broadcast<f64>),
    Target(TargetPacket<f64>),
    Source(SourcePacket<f64>),
}

impl Payload {
    pub fn phase(&self) -> Phase {
        match self {
            Payload::Broadcast(_) => Phase::TargetBroadcast,
            Payload::Target(_) => Phase::TargetSummary,
            Payload::Source(_) => Phase::SourceSummary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub protocol_version: String,
    pub sender_site: String,
    pub phase: Phase,
    pub payload: Payload,
    pub checksum: String,
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<S: Serialize>(v: &S) -> Result<Vec<u8>> {
    // `Value` keeps objects in a BTreeMap, so re-serialising sorts the keys.
    Ok(serde_json::to_vec(&serde_json::to_value(v)?)?)
}

pub fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Envelope {
    pub fn seal(sender_site: impl Into<String>, payload: Payload) -> Result<Self> {
        Ok(Self {
            protocol_version: PROTOCOL_VERSION.to_string(),
            sender_site: sender_site.into(),
            phase: payload.phase(),
            checksum: checksum(&canonical_json(&payload)?),
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = canonical_json(self)?;
        b.push(b'\n');
        Ok(b)
    }

    /// Parses and verifies an envelope: version first, then checksum, then
    /// that the declared phase matches the payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let v: Value = serde_json::from_slice(bytes)?;
        let version = v.get("protocol_version").and_then(Value::as_str);
        if version != Some(PROTOCOL_VERSION) {
            return Err(FaceError::Protocol(format!(
                "protocol version {} is not {PROTOCOL_VERSION}",
                version.map_or_else(|| "missing".to_string(), |s| format!("{s:?}"))
            )));
        }
        let payload = v
            .get("payload")
            .ok_or_else(|| FaceError::Protocol("envelope has no payload".into()))?;
        let declared = v.get("checksum").and_then(Value::as_str).unwrap_or("");
        let actual = checksum(&serde_json::to_vec(payload)?);
        if declared != actual {
            return Err(FaceError::Protocol(format!(
                "checksum mismatch: envelope says {declared}, payload hashes to {actual}"
            )));
        }
        let env: Envelope = serde_json::from_value(v)?;
        if env.phase != env.payload.phase() {
            return Err(FaceError::Protocol(format!(
                "phase {:?} does not match a {:?} payload",
                env.phase,
                env.payload.phase()
            )));
        }
        Ok(env)
    }
}

pub fn summary_file_name(site_id: &str) -> String {
    format!("site_{site_id}.summary.json")
}

fn check_site_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(FaceError::Validation(format!(
            "site id {id:?} must be non-empty ASCII letters, digits, '_', '-' or '.'"
        )))
    }
}

pub trait Transport: Sync {
    fn publish(&self, name: &str, envelope: &Envelope) -> Result<()>;
    fn fetch(&self, name: &str) -> Result<Envelope>;
    /// Names of every published site summary, sorted.
    fn summaries(&self) -> Result<Vec<String>>;
}

/// One JSON file per envelope in a shared directory. Writes go to a
/// temporary file that is renamed into place.
#[derive(Debug, Clone)]
pub struct DirTransport {
    root: PathBuf,
}

impl DirTransport {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| FaceError::io(&root, e))?;
        Ok(Self { root })
    }

    /// Opens an existing run directory without creating it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(FaceError::Validation(format!(
                "run directory {} does not exist",
                root.display()
            )));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| FaceError::Validation(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| FaceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FaceError::io(path, e))
}

impl Transport for DirTransport {
    fn publish(&self, name: &str, envelope: &Envelope) -> Result<()> {
        write_atomic(&self.root.join(name), &envelope.to_bytes()?)
    }

    fn fetch(&self, name: &str) -> Result<Envelope> {
        let path = self.root.join(name);
        let bytes = fs::read(&path).map_err(|e| FaceError::io(&path, e))?;
        Envelope::from_bytes(&bytes)
    }

    fn summaries(&self) -> Result<Vec<String>> {
        let entries = fs::read_dir(&self.root).map_err(|e| FaceError::io(&self.root, e))?;
        let mut names = Vec::new();
        for e in entries {
            let e = e.map_err(|e| FaceError::io(&self.root, e))?;
            if let Some(n) = e.file_name().to_str() {
                if n.starts_with("site_") && n.ends_with(".summary.json") {
                    names.push(n.to_string());
                }
            }
        }
        names.sort();
        Ok(names)
    }
}

/// Wraps a transport and counts publications per file name.
#[derive(Debug)]
pub struct CountingTransport<T> {
    inner: T,
    published: Mutex<BTreeMap<String, usize>>,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            published: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.published.lock().expect("counter lock").clone()
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn publish(&self, name: &str, envelope: &Envelope) -> Result<()> {
        *self
            .published
            .lock()
            .expect("counter lock")
            .entry(name.to_string())
            .or_insert(0) += 1;
        self.inner.publish(name, envelope)
    }

    fn fetch(&self, name: &str) -> Result<Envelope> {
        self.inner.fetch(name)
    }

    fn summaries(&self) -> Result<Vec<String>> {
        self.inner.summaries()
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        check_site_id(id)?;
        if !seen.insert(id) {
            return Err(FaceError::Validation(format!("duplicate site id {id}")));
        }
    }
    Ok(())
}

/// Publishes one summary per target site, then the pooled broadcast.
pub fn run_target_phase<X: Transport>(
    transport: &X,
    sites: &[SiteData<f64>],
    cfg: &PipelineConfig<f64>,
) -> Result<Broadcast<f64>> {
    check_unique(sites.iter().map(SiteData::site_id))?;
    let packets: Vec<TargetPacket<f64>> = sites
        .par_iter()
        .map(|d| target_phase(d, &cfg.step, cfg.needs_folds(), cfg.split_seed))
        .collect::<Result<_>>()?;
    for (d, p) in sites.iter().zip(&packets) {
        let env = Envelope::seal(d.site_id(), Payload::Target(p.clone()))?;
        transport.publish(&summary_file_name(d.site_id()), &env)?;
    }
    publish_broadcast(transport, &packets)
}

/// Pools published target summaries into the broadcast file.
pub fn publish_broadcast<X: Transport>(
    transport: &X,
    targets: &[TargetPacket<f64>],
) -> Result<Broadcast<f64>> {
    let broadcast = make_broadcast(targets)?;
    let sender = targets
        .iter()
        .map(|t| t.summary.site_id.as_str())
        .collect::<Vec<_>>()
        .join(",");
    transport.publish(
        BROADCAST_FILE,
        &Envelope::seal(sender, Payload::Broadcast(broadcast.clone()))?,
    )?;
    Ok(broadcast)
}

pub fn read_broadcast<X: Transport>(transport: &X) -> Result<Broadcast<f64>> {
    match transport.fetch(BROADCAST_FILE)?.payload {
        Payload::Broadcast(b) => Ok(b),
        _ => Err(FaceError::Protocol(format!(
            "{BROADCAST_FILE} holds no broadcast"
        ))),
    }
}

/// Each source site reads only the broadcast and publishes its summary.
pub fn run_source_phase<X: Transport>(
    transport: &X,
    sites: &[SiteData<f64>],
    cfg: &PipelineConfig<f64>,
) -> Result<()> {
    check_unique(sites.iter().map(SiteData::site_id))?;
    let broadcast = read_broadcast(transport)?;
    let packets: Vec<SourcePacket<f64>> = sites
        .par_iter()
        .map(|d| source_phase(d, &broadcast, cfg.mode, &cfg.step, cfg.split_seed))
        .collect::<Result<_>>()?;
    for (d, p) in sites.iter().zip(packets) {
        let env = Envelope::seal(d.site_id(), Payload::Source(p))?;
        transport.publish(&summary_file_name(d.site_id()), &env)?;
    }
    Ok(())
}

/// Target and source packets found in a run directory.
pub type Summaries = (Vec<TargetPacket<f64>>, Vec<SourcePacket<f64>>);

/// Every site summary in the run directory, split by phase.
pub fn collect_summaries<X: Transport>(transport: &X) -> Result<Summaries> {
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for name in transport.summaries()? {
        let env = transport.fetch(&name)?;
        let id = match &env.payload {
            Payload::Target(t) => t.summary.site_id.clone(),
            Payload::Source(s) => s.summary.site_id.clone(),
            Payload::Broadcast(_) => {
                return Err(FaceError::Protocol(format!("{name} holds a broadcast")))
            }
        };
        if id != env.sender_site || summary_file_name(&id) != name {
            return Err(FaceError::Protocol(format!(
                "{name} was sent by {} for site {id}",
                env.sender_site
            )));
        }
        match env.payload {
            Payload::Target(t) => targets.push(t),
            Payload::Source(s) => sources.push(s),
            Payload::Broadcast(_) => unreachable!(),
        }
    }
    if targets.is_empty() {
        return Err(FaceError::Validation(
            "run directory holds no target site summary".into(),
        ));
    }
    Ok((targets, sources))
}

/// Aggregates whatever summaries are present and writes `result.json`.
pub fn run_leading_phase<X: Transport>(
    transport: &X,
    result_path: Option<&Path>,
    lambda: &LambdaChoice<f64>,
    alpha: f64,
) -> Result<AggregationResult<f64>> {
    let (targets, sources) = collect_summaries(transport)?;
    let result = leading_phase(&targets, &sources, lambda, alpha)?;
    if let Some(path) = result_path {
        write_result(path, &result)?;
    }
    Ok(result)
}

pub fn result_bytes(result: &AggregationResult<f64>) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(&serde_json::to_value(result)?)?;
    b.push(b'\n');
    Ok(b)
}

pub fn write_result(path: &Path, result: &AggregationResult<f64>) -> Result<()> {
    write_atomic(path, &result_bytes(result)?)
}
