//! JSON Lines files for demonstrations and episode logs.

use crate::density::{Demonstration, Point, SceneContext, Trajectory};
use crate::error::{Error, Result};
use crate::world::EpisodeLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    scene_id: String,
    step: usize,
    ctx: SceneContext,
    plan: Vec<Point>,
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON document per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_demonstrations(path: impl AsRef<Path>, data: &[Demonstration]) -> Result<()> {
    write_jsonl(
        path,
        data.iter().map(|d| DemoRecord {
            scene_id: d.scene_id.clone(),
            step: d.step,
            ctx: d.ctx.clone(),
            plan: d.plan.states.clone(),
        }),
    )
}

/// Plans are given the step length `dt`, which the file does not carry.
pub fn read_demonstrations(path: impl AsRef<Path>, dt: f64) -> Result<Vec<Demonstration>> {
    let records: Vec<DemoRecord> = read_jsonl(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if r.plan.is_empty() {
            return Err(Error::Format(format!("record {}: empty plan", i + 1)));
        }
        out.push(Demonstration { scene_id: r.scene_id, step: r.step, ctx: r.ctx, plan: Trajectory::new(r.plan, dt) });
    }
    Ok(out)
}

pub fn write_logs(path: impl AsRef<Path>, logs: &[EpisodeLog]) -> Result<()> {
    write_jsonl(path, logs)
}

pub fn read_logs(path: impl AsRef<Path>) -> Result<Vec<EpisodeLog>> {
    read_jsonl(path)
}
