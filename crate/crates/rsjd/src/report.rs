//! Artifact writers: path dumps, coupling and resolvent tables (CSV), and
//! verdict files (JSON lines). Files are written atomically (temp file +
//! rename) and embed the configuration hash and library version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coupling::CoupledPath;
use crate::error::Result;
use crate::paths::{EventKind, RegimePath};
use crate::stats::MCEstimate;
use crate::verify::CheckReport;

/// Identification embedded in every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputMeta {
    pub config_hash: String,
    pub version: String,
}

impl OutputMeta {
    pub fn new(config_hash: String) -> Self {
        OutputMeta {
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// FNV-1a hash of the canonical (sorted-key) JSON encoding of a config.
pub fn config_hash(config: &serde_json::Value) -> String {
    let canonical = config.to_string();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canonical.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One verdict line of a JSONL file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictLine {
    #[serde(flatten)]
    pub report: CheckReport,
    pub config_hash: String,
    pub version: String,
}

pub fn write_verdicts_jsonl(path: &Path, reports: &[CheckReport], meta: &OutputMeta) -> Result<()> {
    let mut buf = String::new();
    for r in reports {
        let line = VerdictLine {
            report: r.clone(),
            config_hash: meta.config_hash.clone(),
            version: meta.version.clone(),
        };
        buf.push_str(&serde_json::to_string(&line)?);
        buf.push('\n');
    }
    atomic_write(path, buf.as_bytes())
}

pub fn read_verdicts_jsonl(path: &Path) -> Result<Vec<VerdictLine>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn meta_comment(meta: &OutputMeta) -> String {
    format!(
        "# config_hash={} version={}\n",
        meta.config_hash, meta.version
    )
}

/// Path dump: one concatenated CSV with a `path_id` column; events annotate
/// the grid row at their exact time.
pub fn paths_to_csv(paths: &[RegimePath], meta: &OutputMeta) -> String {
    let dim = paths.first().map_or(0, |p| p.dim());
    let mut out = meta_comment(meta);
    out.push_str("path_id,t");
    for j in 1..=dim {
        out.push_str(&format!(",x_{j}"));
    }
    out.push_str(",regime,event_kind,event_payload\n");
    for (pid, p) in paths.iter().enumerate() {
        let mut ev = 0usize;
        for i in 0..p.len() {
            let t = p.time(i);
            while ev < p.events.len() && p.events[ev].time < t {
                ev += 1;
            }
            let (kind, payload) = if ev < p.events.len() && p.events[ev].time == t {
                match &p.events[ev].kind {
                    EventKind::Switch { from, to } => ("switch".to_string(), format!("{from}->{to}")),
                    EventKind::Jump { size, large } => (
                        if *large { "jump_large" } else { "jump_small" }.to_string(),
                        size.iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(";"),
                    ),
                }
            } else {
                (String::new(), String::new())
            };
            out.push_str(&format!("{pid},{t}"));
            for v in p.state_slice(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{kind},{payload}\n", p.regime(i)));
        }
    }
    out
}

pub fn write_paths_csv(path: &Path, paths: &[RegimePath], meta: &OutputMeta) -> Result<()> {
    atomic_write(path, paths_to_csv(paths, meta).as_bytes())
}

/// Coupled-path dump with both copies side by side.
pub fn coupled_paths_to_csv(paths: &[CoupledPath], dim: usize, meta: &OutputMeta) -> String {
    let mut out = meta_comment(meta);
    out.push_str("path_id,t");
    for j in 1..=dim {
        out.push_str(&format!(",x_{j}"));
    }
    for j in 1..=dim {
        out.push_str(&format!(",z_{j}"));
    }
    out.push_str(",glued\n");
    for (pid, p) in paths.iter().enumerate() {
        for i in 0..p.len() {
            out.push_str(&format!("{pid},{}", p.time(i)));
            for v in p.x_slice(i) {
                out.push_str(&format!(",{v}"));
            }
            for v in p.z_slice(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", u8::from(p.glued(i))));
        }
    }
    out
}

/// Coupling mean-distance report: `t, mean_dist, se, analytic_bound, n_paths`.
pub fn coupling_report_csv(
    rows: &[(f64, MCEstimate, f64)],
    n_paths: usize,
    meta: &OutputMeta,
) -> String {
    let mut out = meta_comment(meta);
    out.push_str("t,mean_dist,se,analytic_bound,n_paths\n");
    for (t, est, bound) in rows {
        out.push_str(&format!(
            "{t},{},{},{bound},{n_paths}\n",
            est.value, est.se
        ));
    }
    out
}

/// Coupling-time tail report: `t, surv_emp, se, tail_bound`.
pub fn tail_report_csv(rows: &[(f64, MCEstimate, f64)], meta: &OutputMeta) -> String {
    let mut out = meta_comment(meta);
    out.push_str("t,surv_emp,se,tail_bound\n");
    for (t, est, bound) in rows {
        out.push_str(&format!("{t},{},{},{bound}\n", est.value, est.se));
    }
    out
}

/// Resolvent report row.
#[derive(Debug, Clone)]
pub struct ResolventRow {
    pub alpha: f64,
    pub method: String,
    pub estimate: f64,
    pub se: f64,
    pub residual_bound: f64,
    pub runtime_ms: u64,
}

pub fn resolvent_report_csv(rows: &[ResolventRow], meta: &OutputMeta) -> String {
    let mut out = meta_comment(meta);
    out.push_str("alpha,method,estimate,se,residual_bound,runtime_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha, r.method, r.estimate, r.se, r.residual_bound, r.runtime_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_key_order_free() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b": 1, "a": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a": [1,2], "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"a": [1,3], "b": 1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn atomic_write_and_verdict_round_trip() {
        let dir = std::env::temp_dir().join(format!("rsjd-report-test-{}", std::process::id()));
        let path = dir.join("verdicts.jsonl");
        let started = std::time::Instant::now();
        let reports = vec![CheckReport::new(
            "mean-one",
            "reweighting-unit-mean",
            0.001,
            0.002,
            0.006,
            1e-3,
            1000,
            7,
            started,
        )];
        let meta = OutputMeta::new("deadbeef".into());
        write_verdicts_jsonl(&path, &reports, &meta).unwrap();
        let lines = read_verdicts_jsonl(&path).unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].report.check, "mean-one");
        assert!(lines[0].report.pass);
        assert_eq!(lines[0].config_hash, "deadbeef");
        std::fs::remove_dir_all(dir).ok();
    }
}
