//! Query-log ingestion: sessions, consecutive query pairs with session
//! feedback labels, vocabulary with prior word distribution, dataset
//! splits, and synthetic log generation.

mod log;
mod session;
mod split;
pub mod synth;
mod vocab;

pub use log::{parse_log, read_log, write_log, QueryEvent, LOG_HEADER};
pub use session::{
    extract_pairs, label_feedback, pairs_from_sessions, parse_pairs, read_pairs, segment_sessions, write_pairs,
    FeedbackIndex, QueryPair, SearchSession, DEFAULT_SESSION_WINDOW,
};
pub use split::split_dataset;
pub use vocab::{
    build_vocab, decode, encode, encode_pairs, encode_target, EncodedPair, Vocabulary, END, NUM_RESERVED, PAD, SEP,
    START, UNK,
};

/// Lower-cases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Canonical form of a query: tokens joined by single spaces, truncated to
/// `t_max` tokens. Returns `None` when nothing is left.
pub fn normalize_query(text: &str, t_max: usize) -> Option<String> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return None;
    }
    Some(toks.into_iter().take(t_max).collect::<Vec<_>>().join(" "))
}

/// Maximum query length in tokens.
pub const DEFAULT_T_MAX: usize = 8;
