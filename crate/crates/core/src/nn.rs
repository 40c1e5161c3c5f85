//! Recurrent and attention layers built on the autodiff [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};
use crate::SeedRng;

/// Half-width of the uniform initialiser for weight matrices.
pub const INIT_RANGE: f64 = 0.08;

pub fn uniform_tensor<F: Real>(shape: &[usize], range: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.random_range(-range..range))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Affine map `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_tensor(&[output, input], INIT_RANGE, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]));
        Linear { w, b, input, output }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let wx = g.matvec(w, x)?;
        g.add(wx, b)
    }
}

/// Single LSTM cell with fused gate weights laid out as
/// `[input; forget; candidate; output]` blocks of `hidden` rows.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_x = store.add(format!("{name}.w_x"), uniform_tensor(&[4 * hidden, input], INIT_RANGE, rng));
        let w_h = store.add(format!("{name}.w_h"), uniform_tensor(&[4 * hidden, hidden], INIT_RANGE, rng));
        let mut bias = vec![F::ZERO; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = F::ONE);
        let b = store.add(format!("{name}.b"), Tensor::vector(bias));
        LstmCell { w_x, w_h, b, input, hidden }
    }

    /// One time step; returns `(h, c)`.
    pub fn step<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        ensure!(g.value(x).len() == self.input, Shape, "lstm input {} != {}", g.value(x).len(), self.input);
        ensure!(g.value(h_prev).len() == hd, Shape, "lstm hidden {} != {hd}", g.value(h_prev).len());
        ensure!(g.value(c_prev).len() == hd, Shape, "lstm cell {} != {hd}", g.value(c_prev).len());
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.b);
        let zx = g.matvec(w_x, x)?;
        let zh = g.matvec(w_h, h_prev)?;
        let z = g.sum(&[zx, zh, b])?;
        let zi = g.slice(z, 0, hd)?;
        let zf = g.slice(z, hd, hd)?;
        let zg = g.slice(z, 2 * hd, hd)?;
        let zo = g.slice(z, 3 * hd, hd)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c_prev)?;
        let ig = g.mul(i, cand)?;
        let c = g.add(fc, ig)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Stacked bidirectional LSTM. Layer `l > 0` consumes the concatenated
/// outputs of layer `l - 1`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), inp, hidden, rng);
                let bwd = LstmCell::new(store, &format!("{name}.l{l}.bwd"), inp, hidden, rng);
                (fwd, bwd)
            })
            .collect();
        BiLstm { layers, hidden }
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a sequence; output `t` is `concat(h_fwd_t, h_bwd_t)` of the
    /// top layer.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, xs: &[Var]) -> Result<Vec<Var>> {
        ensure!(!xs.is_empty(), Invalid, "cannot encode an empty sequence");
        let mut inputs = xs.to_vec();
        for (fwd, bwd) in &self.layers {
            let n = inputs.len();
            let mut fw = Vec::with_capacity(n);
            let (mut h, mut c) = (g.zeros(self.hidden), g.zeros(self.hidden));
            for &x in &inputs {
                (h, c) = fwd.step(g, x, h, c)?;
                fw.push(h);
            }
            let mut bw = vec![h; n];
            let (mut h, mut c) = (g.zeros(self.hidden), g.zeros(self.hidden));
            for t in (0..n).rev() {
                (h, c) = bwd.step(g, inputs[t], h, c)?;
                bw[t] = h;
            }
            inputs = fw.iter().zip(&bw).map(|(&f, &b)| g.concat(&[f, b])).collect();
        }
        Ok(inputs)
    }
}

/// Additive alignment model: `score_t = v · tanh(W_q s + W_k e_t + b)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

/// Encoder states prepared for repeated attention queries.
#[derive(Clone, Debug)]
pub struct AttentionMemory {
    pub states: Var,
    pub keys: Vec<Var>,
    pub len: usize,
}

impl Attention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_q = store.add(format!("{name}.w_q"), uniform_tensor(&[dim, query_dim], INIT_RANGE, rng));
        let w_k = store.add(format!("{name}.w_k"), uniform_tensor(&[dim, key_dim], INIT_RANGE, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dim]));
        let v = store.add(format!("{name}.v"), uniform_tensor(&[1, dim], INIT_RANGE, rng));
        Attention { w_q, w_k, b, v, dim }
    }

    pub fn memory<F: Real>(&self, g: &mut Graph<'_, F>, encoder_states: &[Var]) -> Result<AttentionMemory> {
        ensure!(!encoder_states.is_empty(), Invalid, "attention over an empty encoder sequence");
        let w_k = g.param(self.w_k);
        let b = g.param(self.b);
        let mut keys = Vec::with_capacity(encoder_states.len());
        for &e in encoder_states {
            let k = g.matvec(w_k, e)?;
            keys.push(g.add(k, b)?);
        }
        let states = g.stack(encoder_states)?;
        Ok(AttentionMemory { states, keys, len: encoder_states.len() })
    }

    /// Returns `(context, weights)`.
    pub fn attend<F: Real>(&self, g: &mut Graph<'_, F>, query: Var, mem: &AttentionMemory) -> Result<(Var, Var)> {
        let w_q = g.param(self.w_q);
        let v = g.param(self.v);
        let q = g.matvec(w_q, query)?;
        let mut scores = Vec::with_capacity(mem.len);
        for &k in &mem.keys {
            let pre = g.add(q, k)?;
            let act = g.tanh(pre);
            scores.push(g.matvec(v, act)?);
        }
        let scores = g.concat(&scores);
        let weights = g.softmax(scores)?;
        let ctx = g.mat_t_vec(mem.states, weights)?;
        Ok((ctx, weights))
    }
}

/// Inverted-dropout mask: kept units are scaled by `1 / (1 - p)`.
pub fn dropout_mask<F: Real>(n: usize, p: f64, rng: &mut impl Rng) -> Vec<F> {
    let keep = F::from_f64(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { F::ZERO } else { keep }).collect()
}

/// Applies dropout when a training RNG is supplied; identity otherwise.
pub fn apply_dropout<F: Real>(g: &mut Graph<'_, F>, x: Var, p: f64, rng: Option<&mut SeedRng>) -> Result<Var> {
    match rng {
        Some(rng) if p > 0.0 => {
            let n = g.value(x).len();
            let mask = dropout_mask(n, p, rng);
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}
