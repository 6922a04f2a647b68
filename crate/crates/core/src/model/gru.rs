//! Multi-layer GRU language model.
//!
//! Each layer uses the update/reset-gate cell
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 - z) ⊙ h + z ⊙ n
//! ```
//!
//! and the top layer's state is projected to vocabulary logits.

use super::ops::{self, sigmoid};
use super::{DecodeState, Gradients, Init, LmError, ModelConfig, ModelParameters};

const PER_LAYER: usize = 9;
const W_Z: usize = 0;
const U_Z: usize = 1;
const B_Z: usize = 2;
const W_R: usize = 3;
const U_R: usize = 4;
const B_R: usize = 5;
const W_N: usize = 6;
const U_N: usize = 7;
const B_N: usize = 8;

pub(super) fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d, h) = (c.vocab_size, c.embedding_dim, c.hidden_dim);
    let mut out = vec![("embedding".to_string(), vec![v, d], Init::Normal)];
    for l in 0..c.num_layers {
        let input = if l == 0 { d } else { h };
        for gate in ["z", "r", "n"] {
            out.push((format!("gru.{l}.w_{gate}"), vec![h, input], Init::Normal));
            out.push((format!("gru.{l}.u_{gate}"), vec![h, h], Init::Normal));
            out.push((format!("gru.{l}.b_{gate}"), vec![h], Init::Zeros));
        }
    }
    out.push(("output.weight".to_string(), vec![v, h], Init::Normal));
    out.push(("output.bias".to_string(), vec![v], Init::Zeros));
    out
}

fn layer_base(l: usize) -> usize {
    1 + PER_LAYER * l
}

fn out_w(p: &ModelParameters) -> usize {
    layer_base(p.config.num_layers)
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

fn step(p: &ModelParameters, l: usize, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, StepCache) {
    let t = &p.tensors;
    let base = layer_base(l);
    let hdim = p.config.hidden_dim;
    let w = |i: usize| t[base + i].data.as_slice();

    let mut z = vec![0.0; hdim];
    ops::affine(w(W_Z), w(B_Z), x, &mut z);
    ops::matvec_add(w(U_Z), h_prev, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = vec![0.0; hdim];
    ops::affine(w(W_R), w(B_R), x, &mut r);
    ops::matvec_add(w(U_R), h_prev, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let q: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut n = vec![0.0; hdim];
    ops::affine(w(W_N), w(B_N), x, &mut n);
    ops::matvec_add(w(U_N), &q, &mut n);
    n.iter_mut().for_each(|v| *v = v.tanh());

    let h: Vec<f64> = (0..hdim).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * n[i]).collect();
    (h, StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), z, r, n })
}

/// Backpropagates `dh` through one cell step; returns `(dx, dh_prev)`.
fn step_backward(
    p: &ModelParameters,
    l: usize,
    c: &StepCache,
    dh: &[f64],
    grads: &mut Gradients,
) -> (Vec<f64>, Vec<f64>) {
    let t = &p.tensors;
    let base = layer_base(l);
    let hdim = dh.len();
    let w = |i: usize| t[base + i].data.as_slice();
    let mut dx = vec![0.0; c.x.len()];
    let mut dh_prev: Vec<f64> = (0..hdim).map(|i| dh[i] * (1.0 - c.z[i])).collect();

    // Candidate.
    let da_n: Vec<f64> = (0..hdim).map(|i| dh[i] * c.z[i] * (1.0 - c.n[i] * c.n[i])).collect();
    let q: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(a, b)| a * b).collect();
    ops::outer_add(&mut grads.0[base + W_N], &da_n, &c.x);
    ops::outer_add(&mut grads.0[base + U_N], &da_n, &q);
    ops::add_assign(&mut grads.0[base + B_N], &da_n);
    ops::matvec_t_add(w(W_N), &da_n, &mut dx);
    let mut dq = vec![0.0; hdim];
    ops::matvec_t_add(w(U_N), &da_n, &mut dq);

    // Reset gate.
    let da_r: Vec<f64> = (0..hdim).map(|i| dq[i] * c.h_prev[i] * c.r[i] * (1.0 - c.r[i])).collect();
    for i in 0..hdim {
        dh_prev[i] += dq[i] * c.r[i];
    }
    ops::outer_add(&mut grads.0[base + W_R], &da_r, &c.x);
    ops::outer_add(&mut grads.0[base + U_R], &da_r, &c.h_prev);
    ops::add_assign(&mut grads.0[base + B_R], &da_r);
    ops::matvec_t_add(w(W_R), &da_r, &mut dx);
    ops::matvec_t_add(w(U_R), &da_r, &mut dh_prev);

    // Update gate.
    let da_z: Vec<f64> = (0..hdim).map(|i| dh[i] * (c.n[i] - c.h_prev[i]) * c.z[i] * (1.0 - c.z[i])).collect();
    ops::outer_add(&mut grads.0[base + W_Z], &da_z, &c.x);
    ops::outer_add(&mut grads.0[base + U_Z], &da_z, &c.h_prev);
    ops::add_assign(&mut grads.0[base + B_Z], &da_z);
    ops::matvec_t_add(w(W_Z), &da_z, &mut dx);
    ops::matvec_t_add(w(U_Z), &da_z, &mut dh_prev);

    (dx, dh_prev)
}

fn embed(p: &ModelParameters, id: u32) -> &[f64] {
    let d = p.config.embedding_dim;
    &p.tensors[0].data[id as usize * d..(id as usize + 1) * d]
}

fn output_distribution(p: &ModelParameters, h: &[f64]) -> Vec<f64> {
    let o = out_w(p);
    let mut logits = vec![0.0; p.config.vocab_size];
    ops::affine(&p.tensors[o].data, &p.tensors[o + 1].data, h, &mut logits);
    ops::softmax_in_place(&mut logits);
    logits
}

fn advance(p: &ModelParameters, hidden: &mut [Vec<f64>], id: u32) {
    let mut x = embed(p, id).to_vec();
    for (l, h) in hidden.iter_mut().enumerate() {
        let (next, _) = step(p, l, &x, h);
        *h = next;
        x.clone_from(h);
    }
}

fn fresh_state(p: &ModelParameters) -> Vec<Vec<f64>> {
    vec![vec![0.0; p.config.hidden_dim]; p.config.num_layers]
}

pub(super) fn last_distribution(p: &ModelParameters, context: &[u32]) -> Vec<f64> {
    let mut hidden = fresh_state(p);
    for &id in context {
        advance(p, &mut hidden, id);
    }
    output_distribution(p, hidden.last().expect("at least one layer"))
}

pub(super) fn scan(p: &ModelParameters, ids: &[u32], visit: &mut dyn FnMut(usize, &[f64])) {
    let mut hidden = fresh_state(p);
    for (i, &id) in ids.iter().enumerate() {
        advance(p, &mut hidden, id);
        visit(i, &output_distribution(p, hidden.last().expect("at least one layer")));
    }
}

pub(super) struct GruState<'a> {
    params: &'a ModelParameters,
    hidden: Vec<Vec<f64>>,
    dist: Vec<f64>,
}

impl<'a> GruState<'a> {
    pub(super) fn new(params: &'a ModelParameters, context: &[u32]) -> Self {
        let mut hidden = fresh_state(params);
        for &id in context {
            advance(params, &mut hidden, id);
        }
        let dist = output_distribution(params, hidden.last().expect("at least one layer"));
        GruState { params, hidden, dist }
    }
}

impl DecodeState for GruState<'_> {
    fn distribution(&self) -> &[f64] {
        &self.dist
    }

    fn push(&mut self, id: u32) -> Result<(), LmError> {
        let vocab_size = self.params.config.vocab_size;
        if id as usize >= vocab_size {
            return Err(LmError::IdOutOfRange { id, vocab_size });
        }
        advance(self.params, &mut self.hidden, id);
        self.dist = output_distribution(self.params, self.hidden.last().expect("at least one layer"));
        Ok(())
    }
}

/// Forward and backward over one sequence. Gradients of the summed
/// negative log-likelihood are added to `grads`; the sum is returned.
pub(super) fn sequence_backward(p: &ModelParameters, seq: &[u32], grads: &mut Gradients) -> f64 {
    let layers = p.config.num_layers;
    let steps = seq.len() - 1;
    let o = out_w(p);
    let d = p.config.embedding_dim;

    let mut hidden = fresh_state(p);
    let mut caches: Vec<Vec<StepCache>> = Vec::with_capacity(steps);
    let mut tops = Vec::with_capacity(steps);
    let mut dlogits = Vec::with_capacity(steps);
    let mut nll = 0.0;
    for t in 0..steps {
        let mut x = embed(p, seq[t]).to_vec();
        let mut layer_caches = Vec::with_capacity(layers);
        for (l, h) in hidden.iter_mut().enumerate() {
            let (next, cache) = step(p, l, &x, h);
            layer_caches.push(cache);
            *h = next;
            x.clone_from(h);
        }
        let mut probs = output_distribution(p, &x);
        let target = seq[t + 1] as usize;
        nll -= probs[target].ln();
        probs[target] -= 1.0;
        dlogits.push(probs);
        tops.push(x);
        caches.push(layer_caches);
    }

    let mut carry = fresh_state(p);
    for t in (0..steps).rev() {
        ops::outer_add(&mut grads.0[o], &dlogits[t], &tops[t]);
        ops::add_assign(&mut grads.0[o + 1], &dlogits[t]);
        let mut dh = carry[layers - 1].clone();
        ops::matvec_t_add(&p.tensors[o].data, &dlogits[t], &mut dh);
        for l in (0..layers).rev() {
            if l < layers - 1 {
                ops::add_assign(&mut dh, &carry[l]);
            }
            let (dx, dh_prev) = step_backward(p, l, &caches[t][l], &dh, grads);
            carry[l] = dh_prev;
            dh = dx;
        }
        let row = seq[t] as usize;
        ops::add_assign(&mut grads.0[0][row * d..(row + 1) * d], &dh);
    }
    nll
}
