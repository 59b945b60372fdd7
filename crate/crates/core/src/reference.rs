//! Plain-loop reimplementations used as oracles in unit tests. Nothing here
//! touches the tape.

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn linear(x: &[f64], n: usize, fan_in: usize, fan_out: usize, w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let mut y = matmul(x, w, n, fan_in, fan_out);
    if let Some(b) = b {
        add_bias(&mut y, b);
    }
    y
}

pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
}

pub fn layer_norm(x: &[f64], cols: usize, gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gain[j] + shift[j]);
        }
    }
    out
}

pub fn relu(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

#[allow(clippy::too_many_arguments)]
pub fn ffn(x: &[f64], n: usize, d: usize, hidden: usize, out: usize, first: (&[f64], &[f64]), second: (&[f64], &[f64])) -> Vec<f64> {
    let mut h = linear(x, n, d, hidden, first.0, Some(first.1));
    relu(&mut h);
    linear(&h, n, hidden, out, second.0, Some(second.1))
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

use crate::nn::{Attention, DecoderBlock, EncoderBlock, FeedForward, LayerNorm, Linear};
use crate::numerics::{tol, ParamStore};

fn p(store: &ParamStore, id: crate::numerics::ParamId) -> Vec<f64> {
    store.tensor(id).data().to_vec()
}

pub fn apply_linear(store: &ParamStore, l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.tensor(l.weight);
    let (fan_in, fan_out) = w.dims2();
    let b = l.bias.map(|b| p(store, b));
    linear(x, rows, fan_in, fan_out, w.data(), b.as_deref())
}

pub fn apply_ffn(store: &ParamStore, f: &FeedForward, x: &[f64], rows: usize) -> Vec<f64> {
    let mut h = apply_linear(store, &f.first, x, rows);
    relu(&mut h);
    apply_linear(store, &f.second, &h, rows)
}

pub fn apply_norm(store: &ParamStore, l: &LayerNorm, x: &[f64]) -> Vec<f64> {
    let gain = p(store, l.gain);
    layer_norm(x, gain.len(), &gain, &p(store, l.shift), tol::LN_EPS)
}

/// Returns the output and the attention weights.
pub fn apply_attention(store: &ParamStore, a: &Attention, q_in: &[f64], nq: usize, kv: &[f64], nk: usize) -> (Vec<f64>, Vec<f64>) {
    let c = store.tensor(a.query.weight).cols();
    let q = apply_linear(store, &a.query, q_in, nq);
    let k = apply_linear(store, &a.key, kv, nk);
    let v = apply_linear(store, &a.value, kv, nk);
    let mut w = matmul(&q, &transpose(&k, nk, c), nq, c, nk);
    w.iter_mut().for_each(|x| *x /= (c as f64).sqrt());
    softmax_rows(&mut w, nk);
    (apply_linear(store, &a.out, &matmul(&w, &v, nq, nk, c), nq), w)
}

pub fn apply_decoder(store: &ParamStore, block: &DecoderBlock, x: &[f64], n: usize, mem: &[f64], s: usize) -> Vec<f64> {
    let (a, _) = apply_attention(store, &block.self_attn, x, n, x, n);
    let x = apply_norm(store, &block.norm1, &add(x, &a));
    let (a, _) = apply_attention(store, &block.cross_attn, &x, n, mem, s);
    let x = apply_norm(store, &block.norm2, &add(&x, &a));
    let f = apply_ffn(store, &block.ffn, &x, n);
    apply_norm(store, &block.norm3, &add(&x, &f))
}

pub fn apply_encoder(store: &ParamStore, block: &EncoderBlock, x: &[f64], n: usize) -> Vec<f64> {
    let (a, _) = apply_attention(store, &block.attn, x, n, x, n);
    let x = apply_norm(store, &block.norm1, &add(x, &a));
    let f = apply_ffn(store, &block.ffn, &x, n);
    apply_norm(store, &block.norm2, &add(&x, &f))
}
