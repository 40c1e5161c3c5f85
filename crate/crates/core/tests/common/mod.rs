//! Central finite-difference gradient checks in f64.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use relquery::autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
use relquery::estimator::{Estimator, EstimatorConfig};
use relquery::generator::{Generator, GeneratorConfig};
use relquery::nn::{Attention, BiLstm, Linear, LstmCell};
use relquery::tensor::Tensor;
use relquery::SeedRng;

pub const EPS: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;

/// Largest entry-wise `|a - n| / max(|a|, |n|, FLOOR)` between the
/// backward-pass gradient and central differences, over every parameter.
pub fn max_rel_error(store: &mut ParamStore<f64>, loss: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let mut grads = Gradients::zeros_like(store);
    {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l, &mut grads).unwrap();
    }
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.scalar(l)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + EPS;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - EPS;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads.get(id).data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_vec(rng: &mut SeedRng, n: usize) -> Tensor<f64> {
    Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn rand_mat(rng: &mut SeedRng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces a vector to a scalar through a fixed random projection.
fn project(g: &mut Graph<'_, f64>, x: Var, probe: ParamId) -> Var {
    let p = g.param(probe);
    g.dot(x, p).unwrap()
}

/// One random instance of a named case, returning its max relative error.
pub type Case = fn(u64) -> f64;

fn unary(seed: u64, op: fn(&mut Graph<'_, f64>, Var) -> Var) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let n = rng.random_range(1..6);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_vec(&mut rng, n));
    let probe = s.add("probe", rand_vec(&mut rng, n));
    max_rel_error(&mut s, &move |g| {
        let x = g.param(a);
        let y = op(g, x);
        project(g, y, probe)
    })
}

fn binary(seed: u64, op: fn(&mut Graph<'_, f64>, Var, Var) -> Var) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let n = rng.random_range(1..6);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_vec(&mut rng, n));
    let b = s.add("b", rand_vec(&mut rng, n));
    let probe = s.add("probe", rand_vec(&mut rng, n));
    max_rel_error(&mut s, &move |g| {
        let (x, y) = (g.param(a), g.param(b));
        let z = op(g, x, y);
        project(g, z, probe)
    })
}

fn case_add(seed: u64) -> f64 {
    binary(seed, |g, a, b| g.add(a, b).unwrap())
}

fn case_mul(seed: u64) -> f64 {
    binary(seed, |g, a, b| g.mul(a, b).unwrap())
}

fn case_sum(seed: u64) -> f64 {
    binary(seed, |g, a, b| g.sum(&[a, b, a]).unwrap())
}

fn case_concat_slice(seed: u64) -> f64 {
    binary(seed, |g, a, b| {
        let c = g.concat(&[a, b]);
        let n = g.value(a).len();
        g.slice(c, n / 2, n).unwrap()
    })
}

fn case_scale(seed: u64) -> f64 {
    unary(seed, |g, a| g.scale(a, -1.7))
}

fn case_mul_const(seed: u64) -> f64 {
    unary(seed, |g, a| {
        let n = g.value(a).len();
        let c = (0..n).map(|i| 0.5 + i as f64).collect();
        g.mul_const(a, c).unwrap()
    })
}

fn case_sigmoid(seed: u64) -> f64 {
    unary(seed, |g, a| g.sigmoid(a))
}

fn case_tanh(seed: u64) -> f64 {
    unary(seed, |g, a| g.tanh(a))
}

fn case_softmax(seed: u64) -> f64 {
    unary(seed, |g, a| g.softmax(a).unwrap())
}

fn case_dot(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let n = rng.random_range(1..6);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_vec(&mut rng, n));
    let b = s.add("b", rand_vec(&mut rng, n));
    max_rel_error(&mut s, &move |g| {
        let (x, y) = (g.param(a), g.param(b));
        g.dot(x, y).unwrap()
    })
}

fn case_matvec(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut s = ParamStore::new();
    let w = s.add("w", rand_mat(&mut rng, r, c));
    let x = s.add("x", rand_vec(&mut rng, c));
    let probe = s.add("probe", rand_vec(&mut rng, r));
    max_rel_error(&mut s, &move |g| {
        let (wv, xv) = (g.param(w), g.param(x));
        let y = g.matvec(wv, xv).unwrap();
        project(g, y, probe)
    })
}

fn case_stack_mat_t_vec(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (rows, d) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut s = ParamStore::new();
    let rs: Vec<ParamId> = (0..rows).map(|i| s.add(format!("r{i}"), rand_vec(&mut rng, d))).collect();
    let x = s.add("x", rand_vec(&mut rng, rows));
    let probe = s.add("probe", rand_vec(&mut rng, d));
    max_rel_error(&mut s, &move |g| {
        let vars: Vec<Var> = rs.iter().map(|&r| g.param(r)).collect();
        let m = g.stack(&vars).unwrap();
        let xv = g.param(x);
        let y = g.mat_t_vec(m, xv).unwrap();
        project(g, y, probe)
    })
}

fn case_embed(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (v, d) = (rng.random_range(2..6), rng.random_range(1..5));
    let rows: Vec<usize> = (0..3).map(|_| rng.random_range(0..v)).collect();
    let mut s = ParamStore::new();
    let table = s.add("emb", rand_mat(&mut rng, v, d));
    let probe = s.add("probe", rand_vec(&mut rng, d));
    max_rel_error(&mut s, &move |g| {
        let es: Vec<Var> = rows.iter().map(|&r| g.embed(table, r).unwrap()).collect();
        let y = g.sum(&es).unwrap();
        let t = g.tanh(y);
        project(g, t, probe)
    })
}

fn case_nll(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let n = rng.random_range(2..7);
    let target = rng.random_range(0..n);
    let mut s = ParamStore::new();
    let mut logits = rand_vec(&mut rng, n);
    logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    let a = s.add("logits", logits);
    max_rel_error(&mut s, &move |g| {
        let x = g.param(a);
        g.nll(x, target).unwrap()
    })
}

fn case_bce(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let label = if rng.random::<bool>() { 1.0 } else { 0.0 };
    let mut s = ParamStore::new();
    let z = s.add("z", Tensor::vector(vec![rng.random_range(-4.0..4.0)]));
    max_rel_error(&mut s, &move |g| {
        let x = g.param(z);
        g.bce_logit(x, label).unwrap()
    })
}

fn case_linear(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (i, o) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "lin", i, o, &mut rng);
    randomize(&mut s, &mut rng);
    let x = s.add("x", rand_vec(&mut rng, i));
    let probe = s.add("probe", rand_vec(&mut rng, o));
    max_rel_error(&mut s, &move |g| {
        let xv = g.param(x);
        let y = lin.forward(g, xv).unwrap();
        project(g, y, probe)
    })
}

fn case_lstm_cell(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (i, h) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut s = ParamStore::new();
    let cell = LstmCell::new(&mut s, "cell", i, h, &mut rng);
    randomize(&mut s, &mut rng);
    let x = s.add("x", rand_vec(&mut rng, i));
    let h0 = s.add("h0", rand_vec(&mut rng, h));
    let c0 = s.add("c0", rand_vec(&mut rng, h));
    let (p1, p2) = (s.add("p1", rand_vec(&mut rng, h)), s.add("p2", rand_vec(&mut rng, h)));
    max_rel_error(&mut s, &move |g| {
        let (xv, hv, cv) = (g.param(x), g.param(h0), g.param(c0));
        let (h1, c1) = cell.step(g, xv, hv, cv).unwrap();
        let (h2, c2) = cell.step(g, xv, h1, c1).unwrap();
        let a = project(g, h2, p1);
        let b = project(g, c2, p2);
        g.add(a, b).unwrap()
    })
}

fn case_bilstm(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (i, h, layers, len) =
        (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
    let mut s = ParamStore::new();
    let enc = BiLstm::new(&mut s, "enc", i, h, layers, &mut rng);
    randomize(&mut s, &mut rng);
    let xs: Vec<ParamId> = (0..len).map(|t| s.add(format!("x{t}"), rand_vec(&mut rng, i))).collect();
    let probes: Vec<ParamId> = (0..len).map(|t| s.add(format!("p{t}"), rand_vec(&mut rng, 2 * h))).collect();
    max_rel_error(&mut s, &move |g| {
        let inputs: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
        let out = enc.encode(g, &inputs).unwrap();
        let terms: Vec<Var> = out.iter().zip(&probes).map(|(&o, &p)| project(g, o, p)).collect();
        g.sum(&terms).unwrap()
    })
}

fn case_attention(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let (qd, kd, dim, len) =
        (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let mut s = ParamStore::new();
    let att = Attention::new(&mut s, "att", qd, kd, dim, &mut rng);
    randomize(&mut s, &mut rng);
    let states: Vec<ParamId> = (0..len).map(|t| s.add(format!("e{t}"), rand_vec(&mut rng, kd))).collect();
    let q = s.add("q", rand_vec(&mut rng, qd));
    let (pc, pw) = (s.add("pc", rand_vec(&mut rng, kd)), s.add("pw", rand_vec(&mut rng, len)));
    max_rel_error(&mut s, &move |g| {
        let es: Vec<Var> = states.iter().map(|&e| g.param(e)).collect();
        let mem = att.memory(g, &es).unwrap();
        let qv = g.param(q);
        let (ctx, w) = att.attend(g, qv, &mem).unwrap();
        let a = project(g, ctx, pc);
        let b = project(g, w, pw);
        g.add(a, b).unwrap()
    })
}

/// Replaces every parameter with draws from [-0.5, 0.5] so biases and
/// saturating regions are exercised too.
fn randomize(s: &mut ParamStore<f64>, rng: &mut SeedRng) {
    let ids: Vec<ParamId> = s.ids().collect();
    for id in ids {
        s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn random_tokens(rng: &mut SeedRng, vocab: usize, len: usize) -> Vec<u32> {
    // Real tokens only; `<END>` is appended by the caller where needed.
    (0..len).map(|_| rng.random_range(5..vocab as u32)).collect()
}

fn case_seq2seq(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let vocab = rng.random_range(6..9);
    let layers = rng.random_range(1..3);
    let cfg = GeneratorConfig {
        vocab_size: vocab,
        emb_dim: rng.random_range(1..4),
        hidden: rng.random_range(1..3),
        enc_layers: layers,
        dec_layers: layers,
        attn_dim: rng.random_range(1..3),
        dropout: 0.0,
    };
    let mut gen = Generator::<f64>::new(cfg, &mut rng).unwrap();
    randomize(&mut gen.params, &mut rng);
    let n = rng.random_range(1..4);
    let src = random_tokens(&mut rng, vocab, n);
    let n = rng.random_range(0..3);
    let mut y = random_tokens(&mut rng, vocab, n);
    y.push(relquery::corpus::END);
    // The graph reads parameters from `store`; the shell only holds layout.
    let mut store = std::mem::take(&mut gen.params);
    let shell = gen;
    max_rel_error(&mut store, &move |g| shell.nll_graph(g, &src, &y, None).unwrap())
}

fn case_estimator(seed: u64) -> f64 {
    let mut rng = SeedRng::seed_from_u64(seed);
    let vocab = rng.random_range(6..9);
    let cfg = EstimatorConfig {
        vocab_size: vocab,
        emb_dim: rng.random_range(1..4),
        hidden: rng.random_range(1..3),
        layers: rng.random_range(1..3),
        dropout: 0.0,
    };
    let mut est = Estimator::<f64>::new(cfg, &mut rng).unwrap();
    randomize(&mut est.params, &mut rng);
    let n = rng.random_range(1..4);
    let ctx = random_tokens(&mut rng, vocab, n);
    let n = rng.random_range(1..4);
    let cand = random_tokens(&mut rng, vocab, n);
    let label = if rng.random::<bool>() { 1.0 } else { 0.0 };
    let mut store = std::mem::take(&mut est.params);
    let shell = est;
    max_rel_error(&mut store, &move |g| {
        let z = shell.logit_graph(g, &ctx, &cand, None).unwrap();
        g.bce_logit(z, label).unwrap()
    })
}

pub const CASES: &[(&str, Case)] = &[
    ("add", case_add),
    ("mul", case_mul),
    ("sum", case_sum),
    ("concat+slice", case_concat_slice),
    ("scale", case_scale),
    ("mul_const", case_mul_const),
    ("sigmoid", case_sigmoid),
    ("tanh", case_tanh),
    ("softmax", case_softmax),
    ("dot", case_dot),
    ("matvec", case_matvec),
    ("stack+mat_t_vec", case_stack_mat_t_vec),
    ("embed", case_embed),
    ("nll", case_nll),
    ("bce_logit", case_bce),
    ("linear", case_linear),
    ("lstm_cell", case_lstm_cell),
    ("bilstm", case_bilstm),
    ("attention", case_attention),
    ("seq2seq_loss", case_seq2seq),
    ("estimator_loss", case_estimator),
];
