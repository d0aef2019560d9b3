//! Run directories: `runs/<id>/session.json` holds the spec and edit
//! history, `latest.png` the current sample next to its average, and
//! `snapshots/` explicit snapshots as PNG + JSON.

use std::io;
use std::path::{Path, PathBuf};

use ldam_core::frame::FrameMessage;
use ldam_core::grid::tile_grid;
use serde::{Deserialize, Serialize};

use crate::session::{PersistHook, PersistedSession, SessionStatus};

pub const RECORD_FILE: &str = "session.json";
pub const LATEST_PNG: &str = "latest.png";
pub const SNAPSHOT_DIR: &str = "snapshots";

/// Replaces `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn write_record(dir: &Path, rec: &PersistedSession) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join(RECORD_FILE), &serde_json::to_vec_pretty(rec)?)?;
    if let Some(png) = &rec.snapshot_png {
        write_atomic(&dir.join(LATEST_PNG), png)?;
    }
    Ok(())
}

pub fn read_record(dir: &Path) -> io::Result<PersistedSession> {
    let bytes = std::fs::read(dir.join(RECORD_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn persist_hook(dir: PathBuf) -> PersistHook {
    Box::new(move |rec| write_record(&dir, rec).map_err(|e| format!("{}: {e}", dir.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    pub name: String,
    pub tick: u64,
    pub step: u64,
    pub files: Vec<String>,
}

/// Writes the frame's current and averaged images plus `status` under
/// `snapshots/`, named by session tick.
pub fn write_snapshot(dir: &Path, status: &SessionStatus, frame: &FrameMessage) -> ldam_core::Result<SnapshotInfo> {
    let snaps = dir.join(SNAPSHOT_DIR);
    std::fs::create_dir_all(&snaps)?;
    let name = format!("tick-{:010}", status.tick);
    let (h, w) = (frame.height as usize, frame.width as usize * frame.channels as usize);
    let raw = format!("{name}-raw.png");
    let avg = format!("{name}-avg.png");
    let json = format!("{name}.json");
    tile_grid(std::slice::from_ref(&frame.display), h, w, 1)?.save_png(&snaps.join(&raw))?;
    tile_grid(std::slice::from_ref(&frame.averaged_display), h, w, 1)?.save_png(&snaps.join(&avg))?;
    let body = serde_json::to_vec_pretty(status).map_err(|e| ldam_core::LdamError::InvalidArgument(e.to_string()))?;
    write_atomic(&snaps.join(&json), &body)?;
    Ok(SnapshotInfo {
        name,
        tick: status.tick,
        step: status.step,
        files: vec![raw, avg, json],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub model: String,
    pub tick: u64,
    pub edits: usize,
    /// True while a live session is attached to the run.
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub record: PersistedSession,
    /// Snapshot file names, sorted.
    pub snapshots: Vec<String>,
    pub live: bool,
}

/// Run ids with a readable record, sorted.
pub fn list_run_dirs(runs_dir: &Path) -> io::Result<Vec<(String, PersistedSession)>> {
    let entries = match std::fs::read_dir(runs_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for e in entries.filter_map(|e| e.ok()) {
        let path = e.path();
        if !path.is_dir() {
            continue;
        }
        let Some(id) = path.file_name().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        match read_record(&path) {
            Ok(rec) => out.push((id, rec)),
            Err(err) => tracing::warn!("ignoring run {}: {err}", path.display()),
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn snapshot_names(dir: &Path) -> io::Result<Vec<String>> {
    let mut names: Vec<String> = match std::fs::read_dir(dir.join(SNAPSHOT_DIR)) {
        Ok(e) => e
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .filter(|n| !n.ends_with(".partial"))
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    names.sort();
    Ok(names)
}
