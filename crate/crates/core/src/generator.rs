//! Seq2seq generator: BiLSTM encoder, additive attention and an LSTM
//! decoder fed `[embedding(y_{t-1}); context]`.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{EncodedPair, END, START};
use crate::error::{ensure, Error, Result};
use crate::nn::{apply_dropout, uniform_tensor, Attention, AttentionMemory, BiLstm, Linear, LstmCell, INIT_RANGE};
use crate::optim::Adam;
use crate::tensor::{kernels, Real};
use crate::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub attn_dim: usize,
    pub dropout: f64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab_size > END as usize + 1, Config, "vocabulary too small: {}", self.vocab_size);
        ensure!(
            self.emb_dim > 0 && self.hidden > 0 && self.attn_dim > 0,
            Config,
            "generator dimensions must be positive"
        );
        ensure!(self.enc_layers > 0 && self.dec_layers > 0, Config, "generator needs at least one layer");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must lie in [0, 1), got {}", self.dropout);
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    emb: ParamId,
    encoder: BiLstm,
    bridge: Vec<Linear>,
    attention: Attention,
    decoder: Vec<LstmCell>,
    out: Linear,
}

/// The policy `G_theta`. Parameters live in `params`; every other field is
/// derived from the configuration.
#[derive(Clone, Debug)]
pub struct Generator<F: Real = f32> {
    pub cfg: GeneratorConfig,
    pub params: ParamStore<F>,
    layers: Layers,
}

/// Recurrent decoder state, one `(h, c)` per layer.
#[derive(Clone, Debug)]
pub struct DecState {
    h: Vec<Var>,
    c: Vec<Var>,
}

struct Encoded {
    mem: AttentionMemory,
    init: DecState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens before `<END>`.
    pub fn body(&self) -> &[u32] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Beam,
    Categorical { temperature: f64 },
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Beam => f.write_str("beam"),
            Strategy::Categorical { .. } => f.write_str("categorical"),
        }
    }
}

fn rng_opt<'a>(rng: &'a mut Option<&mut SeedRng>) -> Option<&'a mut SeedRng> {
    rng.as_deref_mut()
}

impl<F: Real> Generator<F> {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let emb = p.add("emb", uniform_tensor(&[cfg.vocab_size, cfg.emb_dim], INIT_RANGE, rng));
        let encoder = BiLstm::new(&mut p, "enc", cfg.emb_dim, cfg.hidden, cfg.enc_layers, rng);
        let enc_w = encoder.output_width();
        let bridge =
            (0..cfg.dec_layers).map(|l| Linear::new(&mut p, &format!("bridge{l}"), enc_w, cfg.hidden, rng)).collect();
        let attention = Attention::new(&mut p, "attn", cfg.hidden, enc_w, cfg.attn_dim, rng);
        let decoder = (0..cfg.dec_layers)
            .map(|l| {
                let inp = if l == 0 { cfg.emb_dim + enc_w } else { cfg.hidden };
                LstmCell::new(&mut p, &format!("dec.l{l}"), inp, cfg.hidden, rng)
            })
            .collect();
        let out = Linear::new(&mut p, "out", cfg.hidden + enc_w, cfg.vocab_size, rng);
        let layers = Layers { emb, encoder, bridge, attention, decoder, out };
        Ok(Generator { cfg, params: p, layers })
    }

    pub fn seeded(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, &mut SeedRng::seed_from_u64(seed))
    }

    pub fn cast<G: Real>(&self) -> Generator<G> {
        Generator { cfg: self.cfg.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn check_tokens(&self, ids: &[u32], what: &str) -> Result<()> {
        ensure!(!ids.is_empty(), Invalid, "{what} is empty");
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("{what} token {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph<'_, F>, src: &[u32], mut drop: Option<&mut SeedRng>) -> Result<Encoded> {
        self.check_tokens(src, "source")?;
        let l = &self.layers;
        let mut xs = Vec::with_capacity(src.len());
        for &t in src {
            let e = g.embed(l.emb, t as usize)?;
            xs.push(apply_dropout(g, e, self.cfg.dropout, rng_opt(&mut drop))?);
        }
        let states = l.encoder.encode(g, &xs)?;
        let h = self.cfg.hidden;
        let fwd_last = g.slice(states[states.len() - 1], 0, h)?;
        let bwd_first = g.slice(states[0], h, h)?;
        let summary = g.concat(&[fwd_last, bwd_first]);
        let mut init = DecState { h: Vec::new(), c: Vec::new() };
        for b in &l.bridge {
            let z = b.forward(g, summary)?;
            init.h.push(g.tanh(z));
            init.c.push(g.zeros(h));
        }
        let mem = l.attention.memory(g, &states)?;
        Ok(Encoded { mem, init })
    }

    /// One decoder step from `prev`; returns the new state and the logits.
    fn step(
        &self,
        g: &mut Graph<'_, F>,
        enc: &Encoded,
        st: &DecState,
        prev: u32,
        drop: Option<&mut SeedRng>,
    ) -> Result<(DecState, Var)> {
        let l = &self.layers;
        let top = st.h.len() - 1;
        let e = g.embed(l.emb, prev as usize)?;
        let (ctx, _) = l.attention.attend(g, st.h[top], &enc.mem)?;
        let x = g.concat(&[e, ctx]);
        let mut x = apply_dropout(g, x, self.cfg.dropout, drop)?;
        let mut next = DecState { h: Vec::with_capacity(st.h.len()), c: Vec::with_capacity(st.h.len()) };
        for (k, cell) in l.decoder.iter().enumerate() {
            let (h, c) = cell.step(g, x, st.h[k], st.c[k])?;
            next.h.push(h);
            next.c.push(c);
            x = h;
        }
        let o = g.concat(&[x, ctx]);
        let logits = l.out.forward(g, o)?;
        Ok((next, logits))
    }

    fn check_target(&self, y: &[u32]) -> Result<()> {
        self.check_tokens(y, "target")?;
        ensure!(!y[..y.len() - 1].contains(&END), Invalid, "target has tokens after <END>");
        Ok(())
    }

    /// Teacher-forced `-log G(y | src)` recorded on `g`.
    pub fn nll_graph(
        &self,
        g: &mut Graph<'_, F>,
        src: &[u32],
        y: &[u32],
        mut drop: Option<&mut SeedRng>,
    ) -> Result<Var> {
        let enc = self.encode(g, src, rng_opt(&mut drop))?;
        self.decode_nll(g, &enc, y, drop)
    }

    fn decode_nll(
        &self,
        g: &mut Graph<'_, F>,
        enc: &Encoded,
        y: &[u32],
        mut drop: Option<&mut SeedRng>,
    ) -> Result<Var> {
        self.check_target(y)?;
        let mut st = enc.init.clone();
        let mut prev = START;
        let mut terms = Vec::with_capacity(y.len());
        for &t in y {
            let (next, logits) = self.step(g, enc, &st, prev, rng_opt(&mut drop))?;
            terms.push(g.nll(logits, t as usize)?);
            st = next;
            prev = t;
        }
        g.sum(&terms)
    }

    /// Accumulates the gradient of `sum_k w_k * -log G(y_k | src)` into
    /// `grads` and returns the weighted loss together with each `log G(y_k)`.
    pub fn weighted_nll_backward(
        &self,
        src: &[u32],
        samples: &[(&[u32], f64)],
        grads: &mut Gradients<F>,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, src, None)?;
        let mut terms = Vec::with_capacity(samples.len());
        let mut log_probs = Vec::with_capacity(samples.len());
        for &(y, w) in samples {
            let nll = self.decode_nll(&mut g, &enc, y, None)?;
            log_probs.push(-g.scalar(nll).to_f64());
            terms.push(g.scale(nll, F::from_f64(w)));
        }
        let loss = g.sum(&terms)?;
        let value = g.scalar(loss).to_f64();
        ensure!(value.is_finite(), NonFinite, "non-finite policy loss");
        g.backward(loss, grads)?;
        Ok((value, log_probs))
    }

    /// Exact `log G(y | src)`; `y` may end with `<END>`.
    pub fn sequence_log_prob(&self, src: &[u32], y: &[u32]) -> Result<f64> {
        self.check_target(y)?;
        let mut s = self.session(src)?;
        let mut st = s.start();
        let mut prev = START;
        let mut total = 0.0;
        for &t in y {
            let (next, lp) = s.step(&st, prev)?;
            total += lp[t as usize];
            st = next;
            prev = t;
        }
        Ok(total)
    }

    pub fn session(&self, src: &[u32]) -> Result<DecodeSession<'_, F>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, src, None)?;
        Ok(DecodeSession { gen: self, g, enc, steps: 0, fed: Vec::new() })
    }

    /// Per-step argmax decoding; ties go to the smaller token id.
    pub fn greedy(&self, src: &[u32], t_max: usize) -> Result<Hypothesis> {
        let mut s = self.session(src)?;
        let mut st = s.start();
        let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
        let mut prev = START;
        while !h.finished {
            let (next, lp) = s.step(&st, prev)?;
            let best = argmax(&lp);
            h.tokens.push(best);
            h.log_prob += lp[best as usize];
            h.finished = best == END || h.tokens.len() >= t_max;
            st = next;
            prev = best;
        }
        Ok(h)
    }

    /// Up to `width` finished hypotheses ranked by total log-probability.
    pub fn beam_search(&self, src: &[u32], width: usize, t_max: usize) -> Result<Vec<Hypothesis>> {
        self.session(src)?.beam(width, t_max)
    }

    /// `k` independent samples from the per-step softmax at `temperature`.
    /// Reported log-probabilities are under the untempered policy.
    pub fn sample_categorical(
        &self,
        src: &[u32],
        k: usize,
        t_max: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Hypothesis>> {
        self.session(src)?.sample(k, t_max, temperature, rng)
    }

    /// `k` complete sequences from the start state. Returns them with the
    /// number of decoder steps spent.
    pub fn rollout(
        &self,
        src: &[u32],
        k: usize,
        t_max: usize,
        strategy: Strategy,
        rng: &mut impl Rng,
    ) -> Result<(Vec<Hypothesis>, usize)> {
        let mut s = self.session(src)?;
        let hyps = match strategy {
            Strategy::Beam => s.beam(k, t_max)?,
            Strategy::Categorical { temperature } => s.sample(k, t_max, temperature, rng)?,
        };
        Ok((hyps, s.steps()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ModelKind::Generator);
        let c = &self.cfg;
        ck.set_meta("vocab_size", c.vocab_size);
        ck.set_meta("emb_dim", c.emb_dim);
        ck.set_meta("hidden", c.hidden);
        ck.set_meta("enc_layers", c.enc_layers);
        ck.set_meta("dec_layers", c.dec_layers);
        ck.set_meta("attn_dim", c.attn_dim);
        ck.set_meta("dropout", c.dropout);
        ck.add_store("param/", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Generator)?;
        let cfg = GeneratorConfig {
            vocab_size: ck.meta("vocab_size")?,
            emb_dim: ck.meta("emb_dim")?,
            hidden: ck.meta("hidden")?,
            enc_layers: ck.meta("enc_layers")?,
            dec_layers: ck.meta("dec_layers")?,
            attn_dim: ck.meta("attn_dim")?,
            dropout: ck.meta("dropout")?,
        };
        let mut gen = Self::seeded(cfg, 0)?;
        ck.load_store("param/", &mut gen.params)?;
        Ok(gen)
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Ranking for hypotheses: higher score first, then the lexicographically
/// smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Forward-only decoding over one encoded source. Counts decoder steps and
/// records every token fed back into the decoder.
pub struct DecodeSession<'a, F: Real> {
    gen: &'a Generator<F>,
    g: Graph<'a, F>,
    enc: Encoded,
    steps: usize,
    fed: Vec<u32>,
}

impl<F: Real> DecodeSession<'_, F> {
    pub fn start(&self) -> DecState {
        self.enc.init.clone()
    }

    /// Advances one step; returns the next state and `log p(. | prefix)`.
    pub fn step(&mut self, st: &DecState, prev: u32) -> Result<(DecState, Vec<f64>)> {
        let (next, logits) = self.gen.step(&mut self.g, &self.enc, st, prev, None)?;
        self.steps += 1;
        self.fed.push(prev);
        let z = self.g.value(logits);
        let mut lp = vec![F::ZERO; z.len()];
        kernels::log_softmax(z, &mut lp);
        let lp: Vec<f64> = lp.iter().map(|v| v.to_f64()).collect();
        ensure!(lp.iter().all(|v| !v.is_nan()), NonFinite, "non-finite decoder output");
        Ok((next, lp))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Tokens given to the decoder as previous-token input, in call order.
    pub fn fed_tokens(&self) -> &[u32] {
        &self.fed
    }

    pub fn beam(&mut self, width: usize, t_max: usize) -> Result<Vec<Hypothesis>> {
        ensure!(width >= 1, Invalid, "beam width must be at least 1");
        ensure!(t_max >= 1, Invalid, "maximum length must be at least 1");
        let v = self.gen.cfg.vocab_size;
        let mut alive: Vec<(Hypothesis, DecState)> =
            vec![(Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }, self.start())];
        let mut done: Vec<Hypothesis> = Vec::new();
        while !alive.is_empty() {
            let mut pool: Vec<(Hypothesis, Option<usize>)> = done.drain(..).map(|h| (h, None)).collect();
            let mut states = Vec::with_capacity(alive.len());
            for (h, st) in &alive {
                let prev = h.tokens.last().copied().unwrap_or(START);
                let (next, lp) = self.step(st, prev)?;
                let mut order: Vec<u32> = (0..v as u32).collect();
                // Only the best `width` extensions of a beam can survive.
                let keep = width.min(v);
                order.select_nth_unstable_by(keep - 1, |&a, &b| {
                    lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b))
                });
                for &tok in &order[..keep] {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    let finished = tok == END || tokens.len() >= t_max;
                    let cand = Hypothesis { tokens, log_prob: h.log_prob + lp[tok as usize], finished };
                    pool.push((cand, Some(states.len())));
                }
                states.push(next);
            }
            pool.sort_by(|a, b| rank(&a.0, &b.0));
            pool.dedup_by(|a, b| a.0.tokens == b.0.tokens);
            pool.truncate(width);
            alive = Vec::new();
            for (h, src) in pool {
                if h.finished {
                    done.push(h);
                } else {
                    let st = states[src.expect("alive hypotheses come from this step")].clone();
                    alive.push((h, st));
                }
            }
        }
        done.sort_by(rank);
        Ok(done)
    }

    pub fn sample(&mut self, k: usize, t_max: usize, temperature: f64, rng: &mut impl Rng) -> Result<Vec<Hypothesis>> {
        ensure!(k >= 1, Invalid, "sample count must be at least 1");
        ensure!(t_max >= 1, Invalid, "maximum length must be at least 1");
        ensure!(temperature > 0.0 && temperature.is_finite(), Invalid, "temperature must be positive");
        let mut out = Vec::with_capacity(k);
        let mut probs = Vec::new();
        for _ in 0..k {
            let mut st = self.start();
            let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
            let mut prev = START;
            while !h.finished {
                let (next, lp) = self.step(&st, prev)?;
                tempered(&lp, temperature, &mut probs);
                let tok = draw(&probs, rng);
                h.tokens.push(tok);
                h.log_prob += lp[tok as usize];
                h.finished = tok == END || h.tokens.len() >= t_max;
                st = next;
                prev = tok;
            }
            out.push(h);
        }
        Ok(out)
    }
}

/// `softmax(lp / temperature)`.
fn tempered(lp: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let m = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.extend(lp.iter().map(|&x| ((x - m) / temperature).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left `u` above the total; take the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean per-token training loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Per-token validation loss after each epoch.
    pub valid_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl PretrainReport {
    pub fn best_valid_loss(&self) -> f64 {
        self.valid_loss[self.best_epoch]
    }
}

impl Generator<f32> {
    /// Mean per-token cross-entropy of `pairs`.
    pub fn eval_loss(&self, pairs: &[EncodedPair]) -> Result<f64> {
        ensure!(!pairs.is_empty(), Data, "no pairs to evaluate");
        let (mut total, mut tokens) = (0.0, 0usize);
        for p in pairs {
            let mut g = Graph::new(&self.params);
            let nll = self.nll_graph(&mut g, &p.source, &p.target, None)?;
            total += g.scalar(nll) as f64;
            tokens += p.target.len();
        }
        Ok(total / tokens as f64)
    }

    /// One Adam step on a batch; returns the summed token loss and the
    /// number of target tokens. The gradient is the per-token mean.
    pub fn train_batch(
        &mut self,
        batch: &[&EncodedPair],
        opt: &mut Adam<f32>,
        grads: &mut Gradients<f32>,
        rng: &mut SeedRng,
    ) -> Result<(f64, usize)> {
        ensure!(!batch.is_empty(), Data, "empty batch");
        grads.zero();
        let tokens: usize = batch.iter().map(|p| p.target.len()).sum();
        let w = 1.0 / tokens as f32;
        let mut sum = 0.0;
        for p in batch {
            let mut g = Graph::new(&self.params);
            let nll = self.nll_graph(&mut g, &p.source, &p.target, Some(&mut *rng))?;
            let v = g.scalar(nll);
            ensure!(v.is_finite(), NonFinite, "non-finite training loss");
            sum += v as f64;
            let loss = g.scale(nll, w);
            g.backward(loss, grads)?;
        }
        opt.step(&mut self.params, grads)?;
        Ok((sum, tokens))
    }

    /// Teacher-forced training with Adam. Keeps the parameters of the epoch
    /// with the lowest validation loss.
    pub fn pretrain(
        &mut self,
        train: &[EncodedPair],
        valid: &[EncodedPair],
        cfg: &PretrainConfig,
    ) -> Result<PretrainReport> {
        ensure!(!train.is_empty(), Data, "no training pairs");
        ensure!(!valid.is_empty(), Data, "no validation pairs");
        ensure!(cfg.batch_size >= 1 && cfg.epochs >= 1, Config, "batch size and epochs must be positive");
        let mut rng = SeedRng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(&self.params, cfg.lr);
        let mut grads = Gradients::zeros_like(&self.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut report = PretrainReport::default();
        let mut best = self.params.clone();
        for epoch in 0..cfg.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let (mut sum, mut count) = (0.0, 0usize);
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&EncodedPair> = idx.iter().map(|&i| &train[i]).collect();
                let (s, n) = self.train_batch(&batch, &mut opt, &mut grads, &mut rng).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} in epoch {epoch}")),
                    other => other,
                })?;
                sum += s;
                count += n;
            }
            report.train_loss.push(sum / count as f64);
            let vl = self.eval_loss(valid)?;
            ensure!(vl.is_finite(), NonFinite, "non-finite validation loss in epoch {epoch}");
            if report.valid_loss.is_empty() || vl < report.best_valid_loss() {
                report.best_epoch = epoch;
                best.copy_from(&self.params)?;
            }
            report.valid_loss.push(vl);
        }
        self.params.copy_from(&best)?;
        Ok(report)
    }
}
