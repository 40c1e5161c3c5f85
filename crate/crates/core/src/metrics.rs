//! Test-set metrics over six suggestions per query, with t-based 95%
//! confidence intervals.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{FeedbackIndex, Vocabulary};
use crate::error::{ensure, Error, Result};

pub const SUGGESTIONS: usize = 6;
const UNK_TEXT: &str = "<UNK>";

fn has_unk(s: &str) -> bool {
    s.split(' ').any(|w| w == UNK_TEXT)
}

/// Whether any suggestion is a query followed by engagement in its session.
pub fn sessions_plus_at6<S: AsRef<str>>(suggestions: &[S], index: &FeedbackIndex) -> bool {
    suggestions.iter().any(|s| index.is_engaged_query(s.as_ref()))
}

/// Distinct suggestions, ignoring empty ones and any containing `<UNK>`.
pub fn unique_at6<S: AsRef<str>>(suggestions: &[S]) -> usize {
    suggestions.iter().map(AsRef::as_ref).filter(|s| !s.is_empty() && !has_unk(s)).collect::<HashSet<_>>().len()
}

pub fn precision_at6<S: AsRef<str>>(suggestions: &[S], next: &str) -> bool {
    suggestions.iter().any(|s| s.as_ref() == next)
}

/// `(tokens - distinct tokens) / tokens`.
pub fn repetitions_s(suggestion: &str) -> Result<f64> {
    let toks: Vec<&str> = suggestion.split_whitespace().collect();
    ensure!(!toks.is_empty(), Invalid, "repetitions of an empty suggestion");
    let distinct = toks.iter().collect::<HashSet<_>>().len();
    Ok((toks.len() - distinct) as f64 / toks.len() as f64)
}

/// Sum of natural-log prior word probabilities.
pub fn prior_sentence_prob(suggestion: &str, vocab: &Vocabulary) -> Result<f64> {
    let toks: Vec<&str> = suggestion.split_whitespace().collect();
    ensure!(!toks.is_empty(), Invalid, "prior probability of an empty suggestion");
    let mut total = 0.0;
    for t in toks {
        let p = vocab.prior(vocab.id(t));
        ensure!(p > 0.0, Data, "token {t:?} has zero prior probability");
        total += p.ln();
    }
    Ok(total)
}

/// Mean and 95% half-width `t_{0.975, n-1} * s / sqrt(n)`.
pub fn mean_with_ci(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    ensure!(n >= 2, Invalid, "a confidence interval needs at least two values, got {n}");
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok((mean, 0.0));
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Invalid(e.to_string()))?.inverse_cdf(0.975);
    Ok((mean, t * (var / n as f64).sqrt()))
}

/// Suggestions generated for one test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SuggestionSet {
    pub source: String,
    pub next: String,
    pub suggestions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub mean: f64,
    pub ci: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

pub const METRIC_NAMES: [&str; 5] = ["sessions_plus@6", "unique@6", "precision@6", "repetitions_s", "p_s"];

/// Per-pair metric values: binary and count metrics per pair; repetitions
/// and prior probability averaged over the pair's non-empty suggestions.
pub fn per_pair_values(sets: &[SuggestionSet], index: &FeedbackIndex, vocab: &Vocabulary) -> Result<[Vec<f64>; 5]> {
    let mut out: [Vec<f64>; 5] = Default::default();
    for s in sets {
        ensure!(s.suggestions.len() <= SUGGESTIONS, Invalid, "more than {SUGGESTIONS} suggestions");
        out[0].push(f64::from(u8::from(sessions_plus_at6(&s.suggestions, index))));
        out[1].push(unique_at6(&s.suggestions) as f64);
        out[2].push(f64::from(u8::from(precision_at6(&s.suggestions, &s.next))));
        let texts: Vec<&str> = s.suggestions.iter().map(String::as_str).filter(|t| !t.trim().is_empty()).collect();
        if !texts.is_empty() {
            let n = texts.len() as f64;
            let mut rep = 0.0;
            let mut ps = 0.0;
            for t in &texts {
                rep += repetitions_s(t)?;
                ps += prior_sentence_prob(t, vocab)?;
            }
            out[3].push(rep / n);
            out[4].push(ps / n);
        }
    }
    Ok(out)
}

impl MetricsReport {
    pub fn compute(sets: &[SuggestionSet], index: &FeedbackIndex, vocab: &Vocabulary) -> Result<Self> {
        let values = per_pair_values(sets, index, vocab)?;
        let mut rows = Vec::with_capacity(5);
        for (name, v) in METRIC_NAMES.iter().zip(values.iter()) {
            let (mean, ci) = mean_with_ci(v)?;
            rows.push(MetricRow { name: name.to_string(), mean, ci, n: v.len() });
        }
        Ok(MetricsReport { rows })
    }

    pub fn get(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.get(name).map_or(f64::NAN, |r| r.mean)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from("metric\tmean\tci\tn\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.name, r.mean, r.ci, r.n);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |msg: &str| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg: msg.into() };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected metric, mean, ci, n"));
            }
            rows.push(MetricRow {
                name: f[0].to_string(),
                mean: f[1].parse().map_err(|_| bad("bad mean"))?,
                ci: f[2].parse().map_err(|_| bad("bad ci"))?,
                n: f[3].parse().map_err(|_| bad("bad n"))?,
            });
        }
        Ok(MetricsReport { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Relative change `(other - base) / |base|` per metric shared by both.
pub fn compare(base: &MetricsReport, other: &MetricsReport) -> String {
    let mut out = String::from("metric\tbase\tother\trelative_delta\n");
    for b in &base.rows {
        if let Some(o) = other.get(&b.name) {
            let delta = if b.mean == 0.0 { f64::NAN } else { (o.mean - b.mean) / b.mean.abs() };
            let _ = writeln!(out, "{}\t{}\t{}\t{}", b.name, b.mean, o.mean, delta);
        }
    }
    out
}

/// Suggestion file: one line per query, the query followed by its
/// suggestions, tab-separated.
pub fn format_suggestions(rows: &[(String, Vec<String>)]) -> String {
    let mut out = String::new();
    for (q, sugg) in rows {
        out.push_str(q);
        for s in sugg {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
    }
    out
}

pub fn parse_suggestions(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut f = l.split('\t');
            let q = f.next().unwrap_or_default().to_string();
            (q, f.map(str::to_string).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, extract_pairs, QueryEvent, SearchSession};
    use proptest::prelude::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unique_rules() {
        assert_eq!(unique_at6(&["a", "b", "c", "d", "e", "f"]), 6);
        assert_eq!(unique_at6(&["a"; 6]), 1);
        assert_eq!(unique_at6(&["a", "b", "c", "d", "x <UNK>", "<UNK>"]), 4);
    }

    #[test]
    fn precision_rules() {
        let s = ["a", "b", "c", "d", "e", "ai jobs"];
        assert!(precision_at6(&s, "ai jobs"));
        assert!(!precision_at6(&s, "ml"));
        assert!(!precision_at6(&s, "jobs ai"));
    }

    #[test]
    fn repetition_counts() {
        assert_eq!(repetitions_s("ai jobs").unwrap(), 0.0);
        assert_eq!(repetitions_s("ai ai jobs jobs").unwrap(), 0.5);
        assert_eq!(repetitions_s("ai").unwrap(), 0.0);
        assert!(repetitions_s("").is_err());
    }

    #[test]
    fn prior_probability() {
        let v = build_vocab(["a b c d e f g h i j"], 100).unwrap();
        assert!((prior_sentence_prob("a b", &v).unwrap() - 2.0 * 0.1f64.ln()).abs() < 1e-12);
        let single = build_vocab(["z z"], 10).unwrap();
        assert_eq!(prior_sentence_prob("z", &single).unwrap(), 0.0);
    }

    #[test]
    fn ci_cases() {
        assert_eq!(mean_with_ci(&[3.0; 10]).unwrap(), (3.0, 0.0));
        let v: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let (m, ci) = mean_with_ci(&v).unwrap();
        assert_eq!(m, 0.5);
        assert!((ci - 0.0997).abs() < 5e-5, "{ci}");
        assert!(mean_with_ci(&[1.0]).is_err());
    }

    #[test]
    fn sessions_plus_fixture() {
        let ev = |q: &str, e: bool| QueryEvent::new("u", 0, q, e).unwrap();
        let mut sessions = vec![
            SearchSession { user: "u".into(), events: vec![ev("a", false), ev("b", false)] },
            SearchSession { user: "u".into(), events: vec![ev("c", false), ev("d", true)] },
            SearchSession { user: "u".into(), events: vec![ev("e", false), ev("f", false)] },
        ];
        let pairs = |s: &[SearchSession]| s.iter().flat_map(extract_pairs).collect::<Vec<_>>();
        let sugg = ["x", "d"];
        assert!(sessions_plus_at6(&sugg, &FeedbackIndex::from_pairs(&pairs(&sessions))));
        sessions[1].events[1].engaged = false;
        assert!(!sessions_plus_at6(&sugg, &FeedbackIndex::from_pairs(&pairs(&sessions))));
        assert!(!sessions_plus_at6(&["zz"], &FeedbackIndex::default()));
    }

    #[test]
    fn report_roundtrip_and_compare() {
        let v = build_vocab(["a b c"], 10).unwrap();
        let sets = vec![
            SuggestionSet { source: "a".into(), next: "b".into(), suggestions: strs(&["b", "c c"]) },
            SuggestionSet { source: "b".into(), next: "c".into(), suggestions: strs(&["a", ""]) },
        ];
        let rep = MetricsReport::compute(&sets, &FeedbackIndex::default(), &v).unwrap();
        assert_eq!(rep.mean("precision@6"), 0.5);
        assert_eq!(rep.mean("repetitions_s"), 0.125);
        assert_eq!(rep.get("unique@6").unwrap().n, 2);
        let back = MetricsReport::parse(&rep.to_file_string(), Path::new("r")).unwrap();
        assert_eq!(back, rep);
        let cmp = compare(&rep, &rep);
        assert!(cmp.lines().nth(3).unwrap().starts_with("precision@6\t0.5\t0.5\t0"));
    }

    #[test]
    fn suggestion_file_roundtrip() {
        let rows = vec![("ai".to_string(), strs(&["ai jobs", "", "ml"]))];
        assert_eq!(parse_suggestions(&format_suggestions(&rows)), rows);
    }

    proptest! {
        #[test]
        fn unique_is_permutation_invariant_and_duplication_monotone(
            s in proptest::collection::vec("[ab]{1,2}( <UNK>)?", 0..6),
            rot in 0usize..6,
        ) {
            let u = unique_at6(&s);
            prop_assert!(u <= 6);
            let mut p = s.clone();
            if !p.is_empty() {
                let k = rot % p.len();
                p.rotate_left(k);
            }
            prop_assert_eq!(u, unique_at6(&p));
            if let Some(first) = s.first() {
                let mut d = s.clone();
                d.push(first.clone());
                prop_assert!(unique_at6(&d) <= u);
            }
        }
    }
}
