//! Decoder-only transformer: learned positional embeddings, pre-layer-norm
//! blocks with causal multi-head self-attention and a GELU feed-forward
//! network, final layer norm and a vocabulary projection.

use super::ops::{self, gelu, gelu_grad};
use super::{Gradients, Init, ModelConfig, ModelParameters};

const PER_LAYER: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_Q: usize = 2;
const B_Q: usize = 3;
const W_K: usize = 4;
const B_K: usize = 5;
const W_V: usize = 6;
const B_V: usize = 7;
const W_O: usize = 8;
const B_O: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W_1: usize = 12;
const B_1: usize = 13;
const W_2: usize = 14;
const B_2: usize = 15;

pub(super) fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, f) = (c.vocab_size, c.embedding_dim, c.hidden_dim);
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d], Init::Normal),
        ("position_embedding".to_string(), vec![c.context_length, d], Init::Normal),
    ];
    for l in 0..c.num_layers {
        let p = |n: &str| format!("block.{l}.{n}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.shift"), vec![d], Init::Zeros),
            (p("attn.w_q"), vec![d, d], Init::Normal),
            (p("attn.b_q"), vec![d], Init::Zeros),
            (p("attn.w_k"), vec![d, d], Init::Normal),
            (p("attn.b_k"), vec![d], Init::Zeros),
            (p("attn.w_v"), vec![d, d], Init::Normal),
            (p("attn.b_v"), vec![d], Init::Zeros),
            (p("attn.w_o"), vec![d, d], Init::Normal),
            (p("attn.b_o"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.shift"), vec![d], Init::Zeros),
            (p("ffn.w_1"), vec![f, d], Init::Normal),
            (p("ffn.b_1"), vec![f], Init::Zeros),
            (p("ffn.w_2"), vec![d, f], Init::Normal),
            (p("ffn.b_2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("final_ln.gain".to_string(), vec![d], Init::Ones),
        ("final_ln.shift".to_string(), vec![d], Init::Zeros),
        ("output.weight".to_string(), vec![v, d], Init::Normal),
        ("output.bias".to_string(), vec![v], Init::Zeros),
    ]);
    out
}

fn base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// Row-major `[rows, cols]` activations.
#[derive(Clone)]
struct Mat {
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat { cols, data: vec![0.0; rows * cols] }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

struct LayerCache {
    ln1: Mat,
    xhat1: Mat,
    inv1: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// `att[h][i]` holds weights over keys `0..=i`.
    att: Vec<Vec<Vec<f64>>>,
    attended: Mat,
    ln2: Mat,
    xhat2: Mat,
    inv2: Vec<f64>,
    pre_act: Mat,
    act: Mat,
}

struct Forward {
    layers: Vec<LayerCache>,
    xhat_f: Mat,
    inv_f: Vec<f64>,
    final_norm: Mat,
    probs: Vec<Vec<f64>>,
}

fn forward(p: &ModelParameters, ids: &[u32]) -> Forward {
    let c = &p.config;
    let (d, f, heads) = (c.embedding_dim, c.hidden_dim, c.num_heads);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let steps = ids.len();
    debug_assert!(steps >= 1 && steps <= c.context_length);
    let t = &p.tensors;

    let mut x = Mat::zeros(steps, d);
    for (i, &id) in ids.iter().enumerate() {
        let tok = &t[0].data[id as usize * d..(id as usize + 1) * d];
        let pos = &t[1].data[i * d..(i + 1) * d];
        for (j, out) in x.row_mut(i).iter_mut().enumerate() {
            *out = tok[j] + pos[j];
        }
    }

    let mut layers = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let b = base(l);
        let w = |i: usize| t[b + i].data.as_slice();
        let x_in = x.clone();

        let mut ln1 = Mat::zeros(steps, d);
        let mut xhat1 = Mat::zeros(steps, d);
        let mut inv1 = vec![0.0; steps];
        for (i, slot) in inv1.iter_mut().enumerate() {
            let (xh, inv) = ops::layer_norm(x.row(i), w(LN1_G), w(LN1_B), ln1.row_mut(i));
            xhat1.row_mut(i).copy_from_slice(&xh);
            *slot = inv;
        }

        let mut q = Mat::zeros(steps, d);
        let mut k = Mat::zeros(steps, d);
        let mut v = Mat::zeros(steps, d);
        for i in 0..steps {
            ops::affine(w(W_Q), w(B_Q), ln1.row(i), q.row_mut(i));
            ops::affine(w(W_K), w(B_K), ln1.row(i), k.row_mut(i));
            ops::affine(w(W_V), w(B_V), ln1.row(i), v.row_mut(i));
        }

        let mut att = vec![Vec::with_capacity(steps); heads];
        let mut attended = Mat::zeros(steps, d);
        for (h, att_h) in att.iter_mut().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..steps {
                let qi = &q.row(i)[cols.clone()];
                let mut scores: Vec<f64> = (0..=i).map(|j| ops::dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
                ops::softmax_in_place(&mut scores);
                let out = &mut attended.row_mut(i)[cols.clone()];
                for (j, &a) in scores.iter().enumerate() {
                    ops::axpy(a, &v.row(j)[cols.clone()], out);
                }
                att_h.push(scores);
            }
        }

        let mut x_mid = x_in.clone();
        let mut proj = vec![0.0; d];
        for i in 0..steps {
            ops::affine(w(W_O), w(B_O), attended.row(i), &mut proj);
            ops::add_assign(x_mid.row_mut(i), &proj);
        }

        let mut ln2 = Mat::zeros(steps, d);
        let mut xhat2 = Mat::zeros(steps, d);
        let mut inv2 = vec![0.0; steps];
        for (i, slot) in inv2.iter_mut().enumerate() {
            let (xh, inv) = ops::layer_norm(x_mid.row(i), w(LN2_G), w(LN2_B), ln2.row_mut(i));
            xhat2.row_mut(i).copy_from_slice(&xh);
            *slot = inv;
        }

        let mut pre_act = Mat::zeros(steps, f);
        let mut act = Mat::zeros(steps, f);
        let mut x_out = x_mid.clone();
        let mut m = vec![0.0; d];
        for i in 0..steps {
            ops::affine(w(W_1), w(B_1), ln2.row(i), pre_act.row_mut(i));
            for (a, &z) in act.row_mut(i).iter_mut().zip(pre_act.row(i)) {
                *a = gelu(z);
            }
            ops::affine(w(W_2), w(B_2), act.row(i), &mut m);
            ops::add_assign(x_out.row_mut(i), &m);
        }

        layers.push(LayerCache { ln1, xhat1, inv1, q, k, v, att, attended, ln2, xhat2, inv2, pre_act, act });
        x = x_out;
    }

    let fin = base(c.num_layers);
    let mut final_norm = Mat::zeros(steps, d);
    let mut xhat_f = Mat::zeros(steps, d);
    let mut inv_f = vec![0.0; steps];
    let mut probs = Vec::with_capacity(steps);
    for (i, slot) in inv_f.iter_mut().enumerate() {
        let (xh, inv) = ops::layer_norm(x.row(i), &t[fin].data, &t[fin + 1].data, final_norm.row_mut(i));
        xhat_f.row_mut(i).copy_from_slice(&xh);
        *slot = inv;
        let mut logits = vec![0.0; c.vocab_size];
        ops::affine(&t[fin + 2].data, &t[fin + 3].data, final_norm.row(i), &mut logits);
        ops::softmax_in_place(&mut logits);
        probs.push(logits);
    }
    Forward { layers, xhat_f, inv_f, final_norm, probs }
}

/// Next-token distributions after each prefix of `ids` (at most
/// `context_length` ids).
pub(super) fn distributions(p: &ModelParameters, ids: &[u32]) -> Vec<Vec<f64>> {
    forward(p, ids).probs
}

pub(super) fn scan(p: &ModelParameters, ids: &[u32], visit: &mut dyn FnMut(usize, &[f64])) {
    let window = p.config.context_length;
    let head = ids.len().min(window);
    if head > 0 {
        for (i, dist) in distributions(p, &ids[..head]).iter().enumerate() {
            visit(i, dist);
        }
    }
    // Past the window every position needs its own truncated context.
    for i in head..ids.len() {
        let dist = forward(p, &ids[i + 1 - window..=i]).probs.pop().expect("non-empty window");
        visit(i, &dist);
    }
}

pub(super) fn sequence_backward(p: &ModelParameters, seq: &[u32], grads: &mut Gradients) -> f64 {
    let c = &p.config;
    let (d, f, heads) = (c.embedding_dim, c.hidden_dim, c.num_heads);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let inputs = &seq[..seq.len() - 1];
    let steps = inputs.len();
    let t = &p.tensors;
    let fwd = forward(p, inputs);

    let mut nll = 0.0;
    let fin = base(c.num_layers);
    let mut dx = Mat::zeros(steps, d);
    for i in 0..steps {
        let mut dlogits = fwd.probs[i].clone();
        let target = seq[i + 1] as usize;
        nll -= dlogits[target].ln();
        dlogits[target] -= 1.0;
        ops::outer_add(&mut grads.0[fin + 2], &dlogits, fwd.final_norm.row(i));
        ops::add_assign(&mut grads.0[fin + 3], &dlogits);
        let mut dnorm = vec![0.0; d];
        ops::matvec_t_add(&t[fin + 2].data, &dlogits, &mut dnorm);
        let (g_lo, g_hi) = grads.0.split_at_mut(fin + 1);
        ops::layer_norm_backward(
            &dnorm,
            fwd.xhat_f.row(i),
            fwd.inv_f[i],
            &t[fin].data,
            &mut g_lo[fin],
            &mut g_hi[0],
            dx.row_mut(i),
        );
    }

    for l in (0..c.num_layers).rev() {
        let b = base(l);
        let w = |i: usize| t[b + i].data.as_slice();
        let cache = &fwd.layers[l];

        // Feed-forward sub-block; dx currently holds d(x_out).
        let mut dx_mid = dx.clone();
        for i in 0..steps {
            let dm = dx.row(i);
            ops::outer_add(&mut grads.0[b + W_2], dm, cache.act.row(i));
            ops::add_assign(&mut grads.0[b + B_2], dm);
            let mut dpre = vec![0.0; f];
            ops::matvec_t_add(w(W_2), dm, &mut dpre);
            for (g, &z) in dpre.iter_mut().zip(cache.pre_act.row(i)) {
                *g *= gelu_grad(z);
            }
            ops::outer_add(&mut grads.0[b + W_1], &dpre, cache.ln2.row(i));
            ops::add_assign(&mut grads.0[b + B_1], &dpre);
            let mut dln = vec![0.0; d];
            ops::matvec_t_add(w(W_1), &dpre, &mut dln);
            let (g_lo, g_hi) = grads.0.split_at_mut(b + LN2_B);
            ops::layer_norm_backward(
                &dln,
                cache.xhat2.row(i),
                cache.inv2[i],
                w(LN2_G),
                &mut g_lo[b + LN2_G],
                &mut g_hi[0],
                dx_mid.row_mut(i),
            );
        }

        // Attention sub-block.
        let mut dattended = Mat::zeros(steps, d);
        for i in 0..steps {
            let dy = dx_mid.row(i);
            ops::outer_add(&mut grads.0[b + W_O], dy, cache.attended.row(i));
            ops::add_assign(&mut grads.0[b + B_O], dy);
            ops::matvec_t_add(w(W_O), dy, dattended.row_mut(i));
        }
        let mut dq = Mat::zeros(steps, d);
        let mut dk = Mat::zeros(steps, d);
        let mut dv = Mat::zeros(steps, d);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..steps {
                let att = &cache.att[h][i];
                let dout = &dattended.row(i)[cols.clone()];
                let datt: Vec<f64> = (0..=i).map(|j| ops::dot(dout, &cache.v.row(j)[cols.clone()])).collect();
                let weighted: f64 = att.iter().zip(&datt).map(|(a, g)| a * g).sum();
                for j in 0..=i {
                    ops::axpy(att[j], dout, &mut dv.row_mut(j)[cols.clone()]);
                    let dscore = att[j] * (datt[j] - weighted) * scale;
                    if dscore != 0.0 {
                        ops::axpy(dscore, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                        ops::axpy(dscore, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                    }
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        for i in 0..steps {
            let a = cache.ln1.row(i);
            let mut dln = vec![0.0; d];
            for (wi, bi, g) in [(W_Q, B_Q, &dq), (W_K, B_K, &dk), (W_V, B_V, &dv)] {
                ops::outer_add(&mut grads.0[b + wi], g.row(i), a);
                ops::add_assign(&mut grads.0[b + bi], g.row(i));
                ops::matvec_t_add(w(wi), g.row(i), &mut dln);
            }
            let (g_lo, g_hi) = grads.0.split_at_mut(b + LN1_B);
            ops::layer_norm_backward(
                &dln,
                cache.xhat1.row(i),
                cache.inv1[i],
                w(LN1_G),
                &mut g_lo[b + LN1_G],
                &mut g_hi[0],
                dx_in.row_mut(i),
            );
        }
        dx = dx_in;
    }

    for (i, &id) in inputs.iter().enumerate() {
        let row = id as usize;
        ops::add_assign(&mut grads.0[0][row * d..(row + 1) * d], dx.row(i));
        ops::add_assign(&mut grads.0[1][i * d..(i + 1) * d], dx.row(i));
    }
    nll
}
