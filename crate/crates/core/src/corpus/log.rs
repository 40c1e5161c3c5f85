use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// First line written to every log file; lines starting with `#` are
/// skipped on read.
pub const LOG_HEADER: &str = "# user_id\ttimestamp_secs\tquery_text\tengagement_flag";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryEvent {
    pub user: String,
    pub timestamp: u64,
    /// Lower-cased, single-space separated tokens.
    pub query: String,
    /// Positive action or long dwell on the results of this query.
    pub engaged: bool,
}

impl QueryEvent {
    pub fn new(user: impl Into<String>, timestamp: u64, query: &str, engaged: bool) -> Result<Self> {
        let query = super::tokenize(query).join(" ");
        if query.is_empty() {
            return Err(Error::Data("query text is empty after tokenization".into()));
        }
        Ok(QueryEvent { user: user.into(), timestamp, query, engaged })
    }
}

pub fn parse_log(text: &str, origin: &Path) -> Result<Vec<QueryEvent>> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let timestamp: u64 =
            fields[1].trim().parse().map_err(|_| bad(format!("malformed timestamp {:?}", fields[1])))?;
        let engaged = match fields[3].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("engagement flag must be 0 or 1, got {other:?}"))),
        };
        let ev = QueryEvent::new(fields[0], timestamp, fields[2], engaged).map_err(|e| bad(e.to_string()))?;
        events.push(ev);
    }
    Ok(events)
}

pub fn read_log(path: &Path) -> Result<Vec<QueryEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, path)
}

pub fn format_log(events: &[QueryEvent]) -> String {
    let mut out = String::with_capacity(events.len() * 32 + LOG_HEADER.len() + 1);
    out.push_str(LOG_HEADER);
    out.push('\n');
    for e in events {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", e.user, e.timestamp, e.query, u8::from(e.engaged));
    }
    out
}

pub fn write_log(path: &Path, events: &[QueryEvent]) -> Result<()> {
    std::fs::write(path, format_log(events)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip() {
        let events = vec![
            QueryEvent::new("u1", 10, "AI Jobs", true).unwrap(),
            QueryEvent::new("u2", 11, "google", false).unwrap(),
        ];
        let text = format_log(&events);
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(parse_log(&text, Path::new("x")).unwrap(), events);
    }

    #[test]
    fn malformed_timestamp_reports_line() {
        let text = format!("{LOG_HEADER}\nu1\t5\tai\t0\nu1\tsoon\tai\t1\n");
        match parse_log(&text, Path::new("log.tsv")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("timestamp"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(parse_log("u\t1\t   \t0\n", Path::new("x")).is_err());
        assert!(parse_log("u\t1\tq\t2\n", Path::new("x")).is_err());
        assert!(parse_log("u\t1\tq\n", Path::new("x")).is_err());
    }
}
