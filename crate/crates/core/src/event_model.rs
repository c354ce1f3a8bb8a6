//! Event-stream data model: timestamped per-user events, half-open time
//! windows, goal specifications, and JSON-lines ingestion.
//!
//! Timestamps are integer epoch milliseconds. Every window in the crate is
//! half-open, `[start, end)`, so adjacent windows partition time exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epoch milliseconds.
pub type Millis = i64;

pub const SECOND: Millis = 1_000;
pub const MINUTE: Millis = 60 * SECOND;
pub const HOUR: Millis = 60 * MINUTE;
pub const DAY: Millis = 24 * HOUR;

/// Fraction of rejected lines above which ingestion fails as a whole.
pub const MAX_REJECTED_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("i/o error reading event log: {0}")]
    Io(#[from] std::io::Error),
    #[error("{rejected} of {total} lines rejected; refusing to load a mostly corrupt log")]
    TooManyRejected { rejected: usize, total: usize },
    #[error("invalid window: start {start} is after end {end}")]
    InvalidWindow { start: Millis, end: Millis },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("stream for {expected} contains a record for {found}")]
    MixedUsers { expected: String, found: String },
    #[error("invalid goal spec: {0}")]
    InvalidGoal(String),
}

/// Half-open interval `[start, end)` of epoch milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawWindow")]
pub struct Window {
    start: Millis,
    end: Millis,
}

#[derive(Deserialize)]
struct RawWindow {
    start: Millis,
    end: Millis,
}

impl TryFrom<RawWindow> for Window {
    type Error = EventError;
    fn try_from(raw: RawWindow) -> Result<Self, Self::Error> {
        Window::new(raw.start, raw.end)
    }
}

impl Window {
    pub fn new(start: Millis, end: Millis) -> Result<Self, EventError> {
        if start > end {
            return Err(EventError::InvalidWindow { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> Millis {
        self.start
    }

    pub fn end(&self) -> Millis {
        self.end
    }

    pub fn duration(&self) -> Millis {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, t: Millis) -> bool {
        self.start <= t && t < self.end
    }
}

/// One observed event for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user_id: String,
    #[serde(rename = "ts")]
    pub timestamp: Millis,
    #[serde(rename = "event")]
    pub event_name: String,
    /// Metadata such as order value or dwell time. Absent means 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl EventRecord {
    pub fn new(user_id: impl Into<String>, timestamp: Millis, event_name: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            timestamp,
            event_name: event_name.into(),
            value: None,
        }
    }

    pub fn with_value(mut self, value: f64) -> Self {
        self.value = Some(value);
        self
    }

    /// The multiplicative metadata factor, 1.0 when absent.
    pub fn weight_value(&self) -> f64 {
        self.value.unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        if self.user_id.is_empty() {
            return Err(EventError::InvalidRecord("empty user_id".into()));
        }
        if self.event_name.is_empty() {
            return Err(EventError::InvalidRecord("empty event name".into()));
        }
        if self.timestamp < 0 {
            return Err(EventError::InvalidRecord(format!(
                "negative timestamp {}",
                self.timestamp
            )));
        }
        if let Some(v) = self.value {
            if !v.is_finite() || v < 0.0 {
                return Err(EventError::InvalidRecord(format!(
                    "value {v} is not a finite non-negative number"
                )));
            }
        }
        Ok(())
    }
}

/// All events of one user, sorted ascending by timestamp (stable on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    user_id: String,
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Builds a stream, sorting records stably by timestamp.
    pub fn new(user_id: impl Into<String>, mut records: Vec<EventRecord>) -> Result<Self, EventError> {
        let user_id = user_id.into();
        for r in &records {
            if r.user_id != user_id {
                return Err(EventError::MixedUsers {
                    expected: user_id,
                    found: r.user_id.clone(),
                });
            }
            r.validate()?;
        }
        records.sort_by_key(|r| r.timestamp);
        Ok(Self { user_id, records })
    }

    pub fn empty(user_id: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            records: Vec::new(),
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Borrowed view of the records falling in `window`.
    pub fn records_in(&self, window: Window) -> &[EventRecord] {
        let lo = self.records.partition_point(|r| r.timestamp < window.start);
        let hi = self.records.partition_point(|r| r.timestamp < window.end);
        &self.records[lo..hi.max(lo)]
    }

    /// Merges another stream of the same user into this one, keeping order
    /// stable: on equal timestamps existing records come first.
    pub fn extend(&mut self, other: EventStream) -> Result<(), EventError> {
        if other.user_id != self.user_id {
            return Err(EventError::MixedUsers {
                expected: self.user_id.clone(),
                found: other.user_id,
            });
        }
        self.records.extend(other.records);
        self.records.sort_by_key(|r| r.timestamp);
        Ok(())
    }

    /// Drops every record at or after `t`.
    pub fn truncate_at(&mut self, t: Millis) {
        let cut = self.records.partition_point(|r| r.timestamp < t);
        self.records.truncate(cut);
    }
}

/// Records of `stream` with `window.start() <= ts < window.end()`, order preserved.
pub fn slice_window(stream: &EventStream, window: Window) -> EventStream {
    EventStream {
        user_id: stream.user_id.clone(),
        records: stream.records_in(window).to_vec(),
    }
}

/// Which events count as goals, and how far ahead of an event a goal may
/// occur to be attributed to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGoalSpec")]
pub struct GoalSpec {
    goal_events: BTreeSet<String>,
    attribution_window_ms: Millis,
}

#[derive(Deserialize)]
struct RawGoalSpec {
    goal_events: BTreeSet<String>,
    attribution_window_ms: Millis,
}

impl TryFrom<RawGoalSpec> for GoalSpec {
    type Error = EventError;
    fn try_from(raw: RawGoalSpec) -> Result<Self, Self::Error> {
        GoalSpec::new(raw.goal_events, raw.attribution_window_ms)
    }
}

impl GoalSpec {
    pub const DEFAULT_ATTRIBUTION_WINDOW: Millis = DAY;

    pub fn new<I, S>(goal_events: I, attribution_window_ms: Millis) -> Result<Self, EventError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let goal_events: BTreeSet<String> = goal_events.into_iter().map(Into::into).collect();
        if goal_events.is_empty() {
            return Err(EventError::InvalidGoal("no goal events".into()));
        }
        if goal_events.iter().any(String::is_empty) {
            return Err(EventError::InvalidGoal("empty goal event name".into()));
        }
        if attribution_window_ms <= 0 {
            return Err(EventError::InvalidGoal(format!(
                "attribution window must be positive, got {attribution_window_ms}"
            )));
        }
        Ok(Self {
            goal_events,
            attribution_window_ms,
        })
    }

    pub fn goal_events(&self) -> &BTreeSet<String> {
        &self.goal_events
    }

    pub fn attribution_window(&self) -> Millis {
        self.attribution_window_ms
    }

    pub fn is_goal(&self, event_name: &str) -> bool {
        self.goal_events.contains(event_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based line number in the source.
    pub line: usize,
    pub reason: String,
}

/// Per-line outcome of an ingestion. Blank lines are not counted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

impl IngestReport {
    pub fn error_count(&self) -> usize {
        self.rejected.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub streams: BTreeMap<String, EventStream>,
    pub report: IngestReport,
}

fn parse_line(bytes: &[u8]) -> Result<EventRecord, String> {
    let text = std::str::from_utf8(bytes).map_err(|e| format!("not utf-8: {e}"))?;
    let record: EventRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    record.validate().map_err(|e| e.to_string())?;
    Ok(record)
}

/// Reads a JSON-lines event log into per-user streams.
///
/// Malformed lines are collected into the report. If more than half of the
/// non-blank lines are rejected the whole ingestion fails.
pub fn ingest_events<R: BufRead>(source: R) -> Result<Ingested, EventError> {
    let mut per_user: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
    let mut report = IngestReport::default();
    for (idx, line) in source.split(b'\n').enumerate() {
        let mut line = line?;
        if line.last() == Some(&b'\r') {
            line.pop();
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        report.lines += 1;
        match parse_line(&line) {
            Ok(record) => {
                report.accepted += 1;
                per_user.entry(record.user_id.clone()).or_default().push(record);
            }
            Err(reason) => report.rejected.push(RejectedLine { line: idx + 1, reason }),
        }
    }
    if report.lines > 0 && report.error_count() as f64 > MAX_REJECTED_FRACTION * report.lines as f64 {
        return Err(EventError::TooManyRejected {
            rejected: report.error_count(),
            total: report.lines,
        });
    }
    let streams = per_user
        .into_iter()
        .map(|(user, mut records)| {
            records.sort_by_key(|r| r.timestamp);
            (user.clone(), EventStream { user_id: user, records })
        })
        .collect();
    Ok(Ingested { streams, report })
}

/// Writes records as JSON lines in the ingestion format.
pub fn write_events<'a, W, I>(mut sink: W, records: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a EventRecord>,
{
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes every stream, user by user.
pub fn write_streams<'a, W, I>(mut sink: W, streams: I) -> std::io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a EventStream>,
{
    for s in streams {
        write_events(&mut sink, s.records())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream_at(times: &[Millis]) -> EventStream {
        let recs = times.iter().map(|&t| EventRecord::new("u", t, "e")).collect();
        EventStream::new("u", recs).unwrap()
    }

    #[test]
    fn empty_input_is_empty_map() {
        let got = ingest_events(&b""[..]).unwrap();
        assert!(got.streams.is_empty());
        assert_eq!(got.report.error_count(), 0);
    }

    #[test]
    fn out_of_order_lines_are_sorted() {
        let src = br#"{"user_id":"u1","ts":30,"event":"a"}
{"user_id":"u1","ts":10,"event":"b"}
{"user_id":"u1","ts":20,"event":"c","value":2.5}
"#;
        let got = ingest_events(&src[..]).unwrap();
        let s = &got.streams["u1"];
        assert_eq!(s.len(), 3);
        let ts: Vec<_> = s.records().iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
        assert_eq!(s.records()[1].value, Some(2.5));
    }

    #[test]
    fn malformed_line_is_reported() {
        let src = br#"{"user_id":"u1","ts":1,"event":"a"}
{"user_id":"u1","event":"missing-ts"}
{"user_id":"u2","ts":5,"event":"b"}
"#;
        let got = ingest_events(&src[..]).unwrap();
        let total: usize = got.streams.values().map(EventStream::len).sum();
        assert_eq!(total, 2);
        assert_eq!(got.report.error_count(), 1);
        assert_eq!(got.report.rejected[0].line, 2);
    }

    #[test]
    fn mostly_corrupt_log_fails() {
        let src = b"{\"user_id\":\"u\",\"ts\":1,\"event\":\"a\"}\nnot json\n{}\n";
        assert!(matches!(
            ingest_events(&src[..]),
            Err(EventError::TooManyRejected { rejected: 2, total: 3 })
        ));
        // exactly half is tolerated
        let src = b"{\"user_id\":\"u\",\"ts\":1,\"event\":\"a\"}\nnot json\n";
        assert!(ingest_events(&src[..]).is_ok());
    }

    #[test]
    fn invalid_field_values_rejected() {
        for line in [
            r#"{"user_id":"u","ts":-1,"event":"a"}"#,
            r#"{"user_id":"u","ts":1,"event":""}"#,
            r#"{"user_id":"","ts":1,"event":"a"}"#,
            r#"{"user_id":"u","ts":1,"event":"a","value":-2}"#,
            r#"{"user_id":"u","ts":1.5,"event":"a"}"#,
        ] {
            assert!(parse_line(line.as_bytes()).is_err(), "{line}");
        }
    }

    #[test]
    fn window_boundaries() {
        let s = stream_at(&[1, 2, 3]);
        let got = slice_window(&s, Window::new(2, 3).unwrap());
        assert_eq!(got.len(), 1);
        assert_eq!(got.records()[0].timestamp, 2);
        assert!(slice_window(&s, Window::new(2, 2).unwrap()).is_empty());
        assert!(Window::new(3, 2).is_err());
    }

    #[test]
    fn stream_rejects_foreign_records() {
        let recs = vec![EventRecord::new("a", 1, "x"), EventRecord::new("b", 2, "x")];
        assert!(matches!(
            EventStream::new("a", recs),
            Err(EventError::MixedUsers { .. })
        ));
    }

    #[test]
    fn goal_spec_validation() {
        assert!(GoalSpec::new(["buy"], 0).is_err());
        assert!(GoalSpec::new(Vec::<String>::new(), 10).is_err());
        let g = GoalSpec::new(["buy"], 10).unwrap();
        assert!(g.is_goal("buy"));
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<GoalSpec>(&json).unwrap(), g);
        assert!(serde_json::from_str::<GoalSpec>(r#"{"goal_events":["a"],"attribution_window_ms":-3}"#).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<EventRecord>> {
        prop::collection::vec(
            (
                0i64..1_000,
                prop::sample::select(vec!["open", "view", "buy"]),
                prop::option::of(0.0f64..1e6),
            ),
            0..100,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(t, e, val)| EventRecord {
                    user_id: "u".into(),
                    timestamp: t,
                    event_name: e.into(),
                    value: val,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn slice_matches_brute_force(recs in arb_records(), a in -10i64..1_010, len in 0i64..600) {
            let s = EventStream::new("u", recs).unwrap();
            let w = Window::new(a, a + len).unwrap();
            let expected: Vec<EventRecord> = s
                .records()
                .iter()
                .filter(|r| a <= r.timestamp && r.timestamp < a + len)
                .cloned()
                .collect();
            let sliced = slice_window(&s, w);
            prop_assert_eq!(sliced.records(), &expected[..]);
        }

        #[test]
        fn adjacent_slices_partition(recs in arb_records(), a in 0i64..400, b in 0i64..400, c in 0i64..400) {
            let mut cuts = [a, b, c];
            cuts.sort();
            let s = EventStream::new("u", recs).unwrap();
            let left = slice_window(&s, Window::new(cuts[0], cuts[1]).unwrap());
            let right = slice_window(&s, Window::new(cuts[1], cuts[2]).unwrap());
            let whole = slice_window(&s, Window::new(cuts[0], cuts[2]).unwrap());
            let mut joined = left.records().to_vec();
            joined.extend_from_slice(right.records());
            prop_assert_eq!(&joined[..], whole.records());
        }

        #[test]
        fn ingest_write_ingest_is_fixed_point(recs in arb_records()) {
            let mut buf = Vec::new();
            write_events(&mut buf, &recs).unwrap();
            let first = ingest_events(&buf[..]).unwrap();
            let mut again = Vec::new();
            write_streams(&mut again, first.streams.values()).unwrap();
            let second = ingest_events(&again[..]).unwrap();
            prop_assert_eq!(&first.streams, &second.streams);
            let mut third = Vec::new();
            write_streams(&mut third, second.streams.values()).unwrap();
            prop_assert_eq!(again, third);
        }
    }
}
