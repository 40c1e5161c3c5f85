use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const START: u32 = 2;
pub const END: u32 = 3;
/// Separates context and candidate in naturalness-estimator inputs.
pub const SEP: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const RESERVED: [&str; NUM_RESERVED as usize] = ["<PAD>", "<UNK>", "<START>", "<END>", "<SEP>"];

/// Token ids with counts and the prior word distribution
/// `p(w) = n_w / N`, where `N` sums the counts of kept tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    counts: Vec<u64>,
    total: u64,
    oov_count: u64,
}

impl Vocabulary {
    fn from_sorted(kept: Vec<(String, u64)>, oov_count: u64) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; RESERVED.len()];
        counts[UNK as usize] = oov_count;
        for (tok, n) in kept {
            tokens.push(tok);
            counts.push(n);
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let total = counts[NUM_RESERVED as usize..].iter().sum();
        Vocabulary { tokens, ids, counts, total, oov_count }
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED as usize
    }

    pub fn num_real(&self) -> usize {
        self.tokens.len() - NUM_RESERVED as usize
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().filter(|&i| i >= NUM_RESERVED).unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id(token) != UNK
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    /// Real (non-reserved) token ids.
    pub fn real_ids(&self) -> impl Iterator<Item = u32> {
        NUM_RESERVED..self.tokens.len() as u32
    }

    /// Prior probability of a token id. Reserved ids share the `<UNK>`
    /// prior, `max(oov_count, 1) / N`.
    pub fn prior(&self, id: u32) -> f64 {
        if id >= NUM_RESERVED && (id as usize) < self.tokens.len() {
            self.counts[id as usize] as f64 / self.total as f64
        } else {
            self.oov_count.max(1) as f64 / self.total as f64
        }
    }

    /// Prior probabilities of real tokens, in id order.
    pub fn priors(&self) -> Vec<f64> {
        self.real_ids().map(|id| self.prior(id)).collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "<UNK>\t{}", self.oov_count);
        for id in self.real_ids() {
            let _ = writeln!(out, "{}\t{}", self.token(id), self.count(id));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kept = Vec::new();
        let mut oov = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { path: origin.to_path_buf(), line: i + 1, msg };
            let (tok, n) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>count".into()))?;
            let n: u64 = n.trim().parse().map_err(|_| bad(format!("bad count {n:?}")))?;
            if tok == "<UNK>" {
                oov = n;
            } else if RESERVED.contains(&tok) {
                return Err(bad(format!("reserved token {tok} in vocabulary file")));
            } else {
                kept.push((tok.to_string(), n));
            }
        }
        if kept.is_empty() {
            return Err(Error::Data(format!("{}: empty vocabulary", origin.display())));
        }
        Ok(Self::from_sorted(kept, oov))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Keeps the `max_size` most frequent tokens, ties broken lexicographically.
pub fn build_vocab<'a, I, Q>(corpus: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = Q>,
    Q: AsRef<str> + 'a,
{
    let mut counts: HashMap<String, u64> = HashMap::new();
    for q in corpus {
        for tok in super::tokenize(q.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    if max_size == 0 {
        return Err(Error::Invalid("vocabulary size must be at least 1".into()));
    }
    let mut all: Vec<(String, u64)> = counts.into_iter().collect();
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let oov: u64 = all.iter().skip(max_size).map(|(_, n)| n).sum();
    all.truncate(max_size);
    Ok(Vocabulary::from_sorted(all, oov))
}

/// Token ids of a query, unknown tokens mapped to `<UNK>`, truncated to
/// `t_max`.
pub fn encode(text: &str, vocab: &Vocabulary, t_max: usize) -> Result<Vec<u32>> {
    let toks = super::tokenize(text);
    if toks.is_empty() {
        return Err(Error::Data("query text is empty after tokenization".into()));
    }
    Ok(toks.iter().take(t_max).map(|t| vocab.id(t)).collect())
}

/// Decoder target: [`encode`] followed by `<END>`.
pub fn encode_target(text: &str, vocab: &Vocabulary, t_max: usize) -> Result<Vec<u32>> {
    let mut ids = encode(text, vocab, t_max)?;
    ids.push(END);
    Ok(ids)
}

/// A query pair as token ids: `target` ends with `<END>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub u_plus: bool,
}

pub fn encode_pairs(pairs: &[super::QueryPair], vocab: &Vocabulary, t_max: usize) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            Ok(EncodedPair {
                source: encode(&p.source, vocab, t_max)?,
                target: encode_target(&p.target, vocab, t_max.saturating_sub(1).max(1))?,
                u_plus: p.u_plus,
            })
        })
        .collect()
}

/// Text of a token sequence, stopping at the first `<END>`.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter().take_while(|&&id| id != END).map(|&id| vocab.token(id)).collect::<Vec<_>>().join(" ")
}
