//! Raw event logs and retention snapshots to fixed-shape [`UserRecord`]s.
//!
//! Input is one JSON object per line:
//!
//! ```text
//! {"user_id":"u1","type":"event","app":"com.foo","kind":"install","date":"2019-11-02"}
//! {"user_id":"u1","type":"retention","app":"com.foo","date":"2019-12-31"}
//! ```
//!
//! A retention line's date is the user's snapshot date.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::catalog::{AppCatalog, PAD};
use crate::error::{Error, Result};
use crate::record::UserRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    /// Sequence length `I`.
    pub seq_len: usize,
    /// Number of date buckets `T`.
    pub num_dates: usize,
    /// Operations kept per calendar week, installs and uninstalls jointly.
    pub per_week_cap: usize,
    /// Days per date bucket.
    pub bucket_days: u32,
    /// Snapshot for users without retention lines. Defaults to the latest
    /// date seen in the log.
    pub snapshot_date: Option<NaiveDate>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            seq_len: 25,
            num_dates: 180,
            per_week_cap: 10,
            bucket_days: 1,
            snapshot_date: None,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.num_dates == 0 || self.per_week_cap == 0 || self.bucket_days == 0
        {
            return Err(Error::Invalid(
                "seq_len, num_dates, per_week_cap and bucket_days must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Install,
    Uninstall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineType {
    Event,
    Retention,
}

/// One line of the ingest input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub user_id: String,
    #[serde(rename = "type")]
    pub line_type: LineType,
    #[serde(alias = "package")]
    pub app: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<EventKind>,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub user_id: String,
    pub app: String,
    pub kind: EventKind,
    pub date: NaiveDate,
}

/// An event whose app has been resolved to a dense index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operation {
    pub app: u32,
    pub kind: EventKind,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: u64,
    pub users: u64,
    pub events_kept: u64,
    pub dropped_unresolved: u64,
    pub dropped_out_of_window: u64,
    pub dropped_weekly_cap: u64,
    pub dropped_sequence_overflow: u64,
    pub retention_unresolved: u64,
}

/// Age bucket of an event; `None` if it falls outside `[0, T)` buckets.
pub fn date_bucket(event: NaiveDate, snapshot: NaiveDate, config: &IngestConfig) -> Option<u32> {
    let days = (snapshot - event).num_days();
    if days < 0 {
        return None;
    }
    let bucket = days / config.bucket_days as i64;
    (bucket < config.num_dates as i64).then_some(bucket as u32)
}

/// Apply the per-week cap, then keep the latest `I` installs and `I`
/// uninstalls. Input must be in chronological order (later entries are
/// more recent on equal dates); output preserves that order.
pub fn window_truncate(ops: &[Operation], config: &IngestConfig) -> Vec<Operation> {
    let mut keep = vec![true; ops.len()];
    let mut per_week: BTreeMap<(i32, u32), usize> = BTreeMap::new();
    for (i, op) in ops.iter().enumerate().rev() {
        let week = op.date.iso_week();
        let seen = per_week.entry((week.year(), week.week())).or_insert(0);
        if *seen >= config.per_week_cap {
            keep[i] = false;
        } else {
            *seen += 1;
        }
    }
    let (mut installs, mut uninstalls) = (0, 0);
    for (i, op) in ops.iter().enumerate().rev() {
        if !keep[i] {
            continue;
        }
        let counter = match op.kind {
            EventKind::Install => &mut installs,
            EventKind::Uninstall => &mut uninstalls,
        };
        if *counter >= config.seq_len {
            keep[i] = false;
        } else {
            *counter += 1;
        }
    }
    ops.iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(op, _)| *op)
        .collect()
}

/// Build the record from resolved, truncated, chronologically ordered
/// operations. Sequences are left-padded with PAD.
pub fn assemble_record(
    user_id: &str,
    retention: &BTreeSet<u32>,
    ops: &[Operation],
    snapshot: NaiveDate,
    config: &IngestConfig,
) -> UserRecord {
    let mut rec = UserRecord::empty(user_id, config.seq_len);
    rec.retention = retention.iter().copied().collect();
    for (kind, apps, dates, count) in [
        (
            EventKind::Install,
            &mut rec.install_apps,
            &mut rec.install_dates,
            &mut rec.n_install,
        ),
        (
            EventKind::Uninstall,
            &mut rec.uninstall_apps,
            &mut rec.uninstall_dates,
            &mut rec.n_uninstall,
        ),
    ] {
        let seq: Vec<(u32, u32)> = ops
            .iter()
            .filter(|op| op.kind == kind)
            .filter_map(|op| date_bucket(op.date, snapshot, config).map(|b| (op.app, b)))
            .collect();
        let seq = &seq[seq.len().saturating_sub(config.seq_len)..];
        let start = config.seq_len - seq.len();
        for (i, &(app, bucket)) in seq.iter().enumerate() {
            apps[start + i] = app;
            dates[start + i] = bucket;
        }
        apps[..start].fill(PAD);
        *count = seq.len() as u32;
    }
    rec
}

#[derive(Default)]
struct UserLog {
    events: Vec<RawEvent>,
    retention: Vec<String>,
    snapshot: Option<NaiveDate>,
}

/// Parse line-delimited JSON input.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogLine>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if parsed.line_type == LineType::Event && parsed.kind.is_none() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "event line without `kind`".into(),
            });
        }
        out.push(parsed);
    }
    Ok(out)
}

pub fn write_log<W: Write>(lines: &[LogLine], mut w: W) -> Result<()> {
    for l in lines {
        serde_json::to_writer(&mut w, l).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Full pipeline: group by user, resolve apps, drop out-of-window events,
/// truncate and assemble. Users are emitted sorted by id.
pub fn ingest(
    lines: &[LogLine],
    catalog: &AppCatalog,
    config: &IngestConfig,
) -> Result<(Vec<UserRecord>, IngestStats)> {
    config.validate()?;
    let mut stats = IngestStats {
        lines: lines.len() as u64,
        ..IngestStats::default()
    };
    let default_snapshot = config
        .snapshot_date
        .or_else(|| lines.iter().map(|l| l.date).max());

    let mut users: BTreeMap<&str, UserLog> = BTreeMap::new();
    for l in lines {
        let u = users.entry(l.user_id.as_str()).or_default();
        match l.line_type {
            LineType::Event => u.events.push(RawEvent {
                user_id: l.user_id.clone(),
                app: l.app.clone(),
                kind: l.kind.expect("checked on parse"),
                date: l.date,
            }),
            LineType::Retention => {
                u.retention.push(l.app.clone());
                u.snapshot = Some(u.snapshot.map_or(l.date, |d: NaiveDate| d.max(l.date)));
            }
        }
    }

    let mut records = Vec::with_capacity(users.len());
    for (user_id, mut log) in users {
        let Some(snapshot) = log.snapshot.or(default_snapshot) else {
            continue;
        };
        let mut retention = BTreeSet::new();
        for name in &log.retention {
            match catalog.resolve(name) {
                Some(a) => {
                    retention.insert(a);
                }
                None => stats.retention_unresolved += 1,
            }
        }
        log.events.sort_by_key(|e| e.date);
        let mut ops = Vec::with_capacity(log.events.len());
        for e in &log.events {
            let Some(app) = catalog.resolve(&e.app) else {
                stats.dropped_unresolved += 1;
                continue;
            };
            if date_bucket(e.date, snapshot, config).is_none() {
                stats.dropped_out_of_window += 1;
                continue;
            }
            ops.push(Operation {
                app,
                kind: e.kind,
                date: e.date,
            });
        }
        let capped = window_truncate(
            &ops,
            &IngestConfig {
                seq_len: usize::MAX,
                ..config.clone()
            },
        );
        stats.dropped_weekly_cap += (ops.len() - capped.len()) as u64;
        let kept = window_truncate(&ops, config);
        stats.dropped_sequence_overflow += (capped.len() - kept.len()) as u64;
        stats.events_kept += kept.len() as u64;
        records.push(assemble_record(user_id, &retention, &kept, snapshot, config));
    }
    stats.users = records.len() as u64;
    Ok((records, stats))
}
