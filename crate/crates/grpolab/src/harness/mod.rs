//! Configuration loading, seeded experiment execution, and report emission.
//!
//! Reports are JSON files written atomically (temp file + rename);
//! wall-clock metadata lives in a sibling `.meta.json` so the report files
//! themselves are byte-identical across reruns of the same config and seed.

mod cli;
mod config;

pub use cli::{cli_main, zoo_listing};
pub use config::{ConfigError, ExperimentsSection, GroupSection, HooksSection, ObjectiveSection,
    OptimizerSection, PolicySection, RunConfig};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adamw::AdamWState;
use crate::lab::ExperimentReport;

/// Write bytes to `path` via a temp file in the same directory plus a rename,
/// so interrupted runs never leave partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("output");
    let tmp = path.with_file_name(format!("{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Write `<name>.json` for the report and `<name>.meta.json` for the
/// wall-clock metadata; returns the report path.
pub fn write_report(
    dir: &Path,
    report: &ExperimentReport,
    duration_ms: u128,
) -> std::io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", report.name));
    write_json_atomic(&path, report)?;
    let written_at_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "written_at_unix_ms": written_at_unix_ms,
        "duration_ms": duration_ms,
    });
    write_json_atomic(&dir.join(format!("{}.meta.json", report.name)), &meta)?;
    Ok(path)
}

/// Optimizer-state audit dump in the same per-context line layout as policy
/// checkpoints: first-moment block, then second-moment block.
pub fn write_moments(
    out: &mut impl Write,
    layout: &[Vec<u32>],
    state: &AdamWState,
    vocab_size: u32,
) -> std::io::Result<()> {
    writeln!(out, "grpolab-moments v1")?;
    writeln!(out, "step {}", state.t)?;
    writeln!(out, "vocab_size {vocab_size}")?;
    writeln!(out, "contexts {}", layout.len())?;
    let v = vocab_size as usize;
    for (i, ctx) in layout.iter().enumerate() {
        write!(out, "ctx {}", ctx.len())?;
        for t in ctx {
            write!(out, " {t}")?;
        }
        write!(out, " : m")?;
        for x in &state.m[i * v..(i + 1) * v] {
            write!(out, " {x:.16e}")?;
        }
        write!(out, " v")?;
        for x in &state.v[i * v..(i + 1) * v] {
            write!(out, " {x:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
