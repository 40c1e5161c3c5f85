use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::QueryEvent;
use crate::error::{Error, Result};

/// Inactivity gap (seconds) that closes a search session.
pub const DEFAULT_SESSION_WINDOW: u64 = 300;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSession {
    pub user: String,
    pub events: Vec<QueryEvent>,
}

impl SearchSession {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Consecutive query pair `(source, target)` with its session feedback label.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QueryPair {
    pub source: String,
    pub target: String,
    pub u_plus: bool,
}

/// Splits each user's events into sessions. Users appear in order of first
/// occurrence; events of a user are stably sorted by timestamp.
pub fn segment_sessions(events: &[QueryEvent], window_seconds: u64) -> Vec<SearchSession> {
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&QueryEvent>> = HashMap::new();
    for e in events {
        per_user
            .entry(e.user.as_str())
            .or_insert_with(|| {
                order.push(e.user.as_str());
                Vec::new()
            })
            .push(e);
    }
    let mut sessions = Vec::new();
    for user in order {
        let mut evs = per_user.remove(user).unwrap_or_default();
        evs.sort_by_key(|e| e.timestamp);
        let mut current: Vec<QueryEvent> = Vec::new();
        for e in evs {
            if let Some(prev) = current.last() {
                if e.timestamp - prev.timestamp > window_seconds {
                    sessions.push(SearchSession { user: user.to_string(), events: std::mem::take(&mut current) });
                }
            }
            current.push(e.clone());
        }
        if !current.is_empty() {
            sessions.push(SearchSession { user: user.to_string(), events: current });
        }
    }
    sessions
}

/// Session feedback for the pair whose target sits at `target_pos`: true iff
/// any event at or after that position is engaged.
pub fn label_feedback(session: &SearchSession, target_pos: usize) -> Result<bool> {
    if target_pos == 0 || target_pos >= session.events.len() {
        return Err(Error::Invalid(format!(
            "no pair ends at position {target_pos} in a session of {} queries",
            session.events.len()
        )));
    }
    Ok(session.events[target_pos..].iter().any(|e| e.engaged))
}

/// All `N - 1` consecutive pairs of a session, in order and unfiltered.
pub fn extract_pairs(session: &SearchSession) -> Vec<QueryPair> {
    (1..session.events.len())
        .map(|k| QueryPair {
            source: session.events[k - 1].query.clone(),
            target: session.events[k].query.clone(),
            u_plus: label_feedback(session, k).expect("position in range"),
        })
        .collect()
}

/// Pairs from every session, with queries truncated to `t_max` tokens.
pub fn pairs_from_sessions(sessions: &[SearchSession], t_max: usize) -> Vec<QueryPair> {
    let trunc = |q: &str| q.split(' ').take(t_max).collect::<Vec<_>>().join(" ");
    sessions
        .iter()
        .flat_map(extract_pairs)
        .map(|p| QueryPair { source: trunc(&p.source), target: trunc(&p.target), u_plus: p.u_plus })
        .collect()
}

pub fn format_pairs(pairs: &[QueryPair]) -> String {
    let mut out = String::with_capacity(pairs.len() * 24);
    for p in pairs {
        let _ = writeln!(out, "{}\t{}\t{}", p.source, p.target, u8::from(p.u_plus));
    }
    out
}

pub fn write_pairs(path: &Path, pairs: &[QueryPair]) -> Result<()> {
    std::fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<QueryPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", f.len())));
        }
        let source = super::tokenize(f[0]).join(" ");
        let target = super::tokenize(f[1]).join(" ");
        if source.is_empty() || target.is_empty() {
            return Err(bad("empty query".into()));
        }
        let u_plus = match f[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("u_plus must be 0 or 1, got {other:?}"))),
        };
        pairs.push(QueryPair { source, target, u_plus });
    }
    Ok(pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<QueryPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

/// Exact-match lookups over logged pairs.
///
/// `engaged_pairs` answers the session-feedback question for a generated
/// `(source, candidate)`; `engaged_queries` holds every logged query that
/// was followed (itself included) by a positive action in its session.
#[derive(Clone, Debug, Default)]
pub struct FeedbackIndex {
    engaged_pairs: HashSet<(String, String)>,
    engaged_queries: HashSet<String>,
}

impl FeedbackIndex {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a QueryPair>) -> Self {
        let mut idx = FeedbackIndex::default();
        for p in pairs {
            if p.u_plus {
                idx.engaged_pairs.insert((p.source.clone(), p.target.clone()));
                idx.engaged_queries.insert(p.target.clone());
            }
        }
        idx
    }

    /// Index built directly from sessions; also covers each session's first
    /// query, which is never a pair target.
    pub fn from_sessions(sessions: &[SearchSession]) -> Self {
        let mut idx = FeedbackIndex::default();
        for s in sessions {
            for p in extract_pairs(s) {
                if p.u_plus {
                    idx.engaged_pairs.insert((p.source, p.target));
                }
            }
            for (k, e) in s.events.iter().enumerate() {
                if s.events[k..].iter().any(|x| x.engaged) {
                    idx.engaged_queries.insert(e.query.clone());
                }
            }
        }
        idx
    }

    /// Session feedback for a generated candidate; unmatched pairs get 0.
    pub fn u_plus(&self, source: &str, candidate: &str) -> bool {
        !self.engaged_pairs.is_empty() && self.engaged_pairs.contains(&(source.to_string(), candidate.to_string()))
    }

    pub fn is_engaged_query(&self, query: &str) -> bool {
        self.engaged_queries.contains(query)
    }

    pub fn num_pairs(&self) -> usize {
        self.engaged_pairs.len()
    }
}
