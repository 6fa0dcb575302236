//! Trainable dense Q-network with hand-written backpropagation.
//!
//! Weights are kept input-major (`n_in x n_out`) so that a sparse
//! observation only touches the fan-out rows of its non-zero pixels, both in
//! the forward pass and in the first-layer weight update.

use crate::ann::{Activation, LayerKind, LayerSpec, NetworkDescription};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

use super::replay::SparseObs;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub n_in: usize,
    pub n_out: usize,
    /// `weights_t[i * n_out + j]` is the weight from input `i` to output `j`.
    pub weights_t: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseQNet {
    input_shape: Vec<usize>,
    layers: Vec<DenseParams>,
}

/// Post-activation outputs of every layer for one sample.
#[derive(Clone, Debug)]
pub struct Trace {
    pub outputs: Vec<Vec<f32>>,
}

impl Trace {
    pub fn q(&self) -> &[f32] {
        self.outputs.last().expect("non-empty trace")
    }
}

/// Gradient of the batch loss. The first layer's weight gradient is kept as
/// a sum of sparse outer products `x_b ⊗ delta_b`.
#[derive(Clone, Debug)]
pub struct Gradient {
    first_terms: Vec<(Vec<(usize, f32)>, Vec<f32>)>,
    first_bias: Vec<f32>,
    rest: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Gradient {
    /// First-layer terms grouped by input row, rows ascending.
    fn first_rows(&self) -> RowIndex {
        by_row(self.first_terms.iter().map(|(x, _)| x.iter().copied()))
    }

    /// Dense `(weights_t, bias)` gradient of every layer.
    pub fn to_dense(&self, net: &DenseQNet) -> Vec<(Vec<f32>, Vec<f32>)> {
        let l0 = &net.layers[0];
        let mut gw = vec![0.0f32; l0.n_in * l0.n_out];
        for (x, delta) in &self.first_terms {
            for &(i, v) in x {
                tensor::axpy(v, delta, &mut gw[i * l0.n_out..(i + 1) * l0.n_out]);
            }
        }
        let mut out = vec![(gw, self.first_bias.clone())];
        out.extend(self.rest.iter().cloned());
        out
    }
}

/// Batch inputs grouped by row: rows ascending, samples ascending within a
/// row.
struct RowIndex {
    rows: Vec<(usize, usize, usize)>,
    items: Vec<(u32, f32)>,
}

impl RowIndex {
    fn groups(&self) -> impl Iterator<Item = (usize, &[(u32, f32)])> + '_ {
        self.rows.iter().map(|&(i, lo, hi)| (i, &self.items[lo..hi]))
    }
}

fn by_row<I, J>(samples: I) -> RowIndex
where
    I: Iterator<Item = J>,
    J: Iterator<Item = (usize, f32)>,
{
    let mut entries: Vec<(u32, u32, f32)> = Vec::new();
    for (b, x) in samples.enumerate() {
        entries.extend(x.map(|(i, v)| (i as u32, b as u32, v)));
    }
    entries.sort_unstable_by_key(|&(i, b, _)| (i, b));
    let mut rows = Vec::new();
    let mut lo = 0;
    for k in 1..=entries.len() {
        if k == entries.len() || entries[k].0 != entries[lo].0 {
            rows.push((entries[lo].0 as usize, lo, k));
            lo = k;
        }
    }
    RowIndex {
        rows,
        items: entries.into_iter().map(|(_, b, v)| (b, v)).collect(),
    }
}

impl DenseQNet {
    pub fn from_description(net: &NetworkDescription) -> Result<Self> {
        net.validate()?;
        let mut layers = Vec::with_capacity(net.n_layers());
        for (i, l) in net.layers.iter().enumerate() {
            if l.kind != LayerKind::Dense {
                return Err(Error::invalid(
                    format!("layer {i}"),
                    "only dense networks are trainable",
                ));
            }
            let (n_out, n_in) = (l.weights.shape()[0], l.weights.shape()[1]);
            layers.push(DenseParams {
                n_in,
                n_out,
                weights_t: tensor::transpose(&l.weights)?.into_data(),
                bias: l.bias.data().to_vec(),
            });
        }
        Ok(DenseQNet {
            input_shape: net.input_shape.clone(),
            layers,
        })
    }

    pub fn to_description(&self) -> NetworkDescription {
        let last = self.layers.len() - 1;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let wt = Tensor::new(vec![p.n_in, p.n_out], p.weights_t.clone()).expect("shape");
                LayerSpec {
                    kind: LayerKind::Dense,
                    weights: tensor::transpose(&wt).expect("2-D"),
                    bias: Tensor::vector(p.bias.clone()),
                    stride: 1,
                    activation: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        NetworkDescription {
            input_shape: self.input_shape.clone(),
            n_actions: self.n_actions(),
            layers,
        }
    }

    pub fn layers(&self) -> &[DenseParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseParams] {
        &mut self.layers
    }

    pub fn n_actions(&self) -> usize {
        self.layers.last().expect("layers").n_out
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn forward(&self, x: &SparseObs) -> Trace {
        self.forward_batch(&[x]).pop().expect("one sample")
    }

    /// Forward pass over a batch. Each first-layer weight row is read once
    /// for all samples that use it; every sample still accumulates its
    /// inputs in ascending order, so results match [`DenseQNet::forward`]
    /// bit for bit.
    pub fn forward_batch(&self, xs: &[&SparseObs]) -> Vec<Trace> {
        let l0 = &self.layers[0];
        let n = l0.n_out;
        let mut h = vec![0.0f32; xs.len() * n];
        for (i, group) in by_row(xs.iter().map(|x| x.iter())).groups() {
            let w = &l0.weights_t[i * n..(i + 1) * n];
            for &(b, v) in group {
                tensor::axpy(v, w, &mut h[b as usize * n..(b as usize + 1) * n]);
            }
        }
        h.chunks(n).map(|hb| self.finish(hb)).collect()
    }

    /// Bias, activation and the layers above the first, from the first
    /// layer's weighted input sum.
    fn finish(&self, sum: &[f32]) -> Trace {
        let last = self.layers.len() - 1;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h: Vec<f32> = sum.iter().zip(&self.layers[0].bias).map(|(o, b)| b + o).collect();
        if last > 0 {
            tensor::relu_in_place(&mut h);
        }
        outputs.push(h);
        for (l, p) in self.layers.iter().enumerate().skip(1) {
            let mut out = vec![0.0f32; p.n_out];
            tensor::dense_forward_sparse(&outputs[l - 1], &p.weights_t, &p.bias, &mut out);
            if l < last {
                tensor::relu_in_place(&mut out);
            }
            outputs.push(out);
        }
        Trace { outputs }
    }

    pub fn q_values(&self, x: &SparseObs) -> Vec<f32> {
        self.forward(x).outputs.pop().expect("layers")
    }

    pub fn max_q(&self, x: &SparseObs) -> f32 {
        self.q_values(x).into_iter().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Loss `mean_b (Q(s_b, a_b) - y_b)^2` and its gradient.
    pub fn backward(&self, batch: &[(&SparseObs, usize, f32)]) -> (Gradient, f32) {
        let n_layers = self.layers.len();
        let scale = 2.0 / batch.len() as f32;
        let mut first_terms = Vec::with_capacity(batch.len());
        let mut first_bias = vec![0.0f32; self.layers[0].n_out];
        let mut rest: Vec<(Vec<f32>, Vec<f32>)> = self.layers[1..]
            .iter()
            .map(|p| (vec![0.0; p.n_in * p.n_out], vec![0.0; p.n_out]))
            .collect();
        let mut loss = 0.0f32;
        let xs: Vec<&SparseObs> = batch.iter().map(|&(x, _, _)| x).collect();
        let traces = self.forward_batch(&xs);
        for (&(x, a, y), trace) in batch.iter().zip(traces) {
            let err = trace.q()[a] - y;
            loss += err * err;
            let mut delta = vec![0.0f32; self.n_actions()];
            delta[a] = scale * err;
            for l in (1..n_layers).rev() {
                let p = &self.layers[l];
                let h = &trace.outputs[l - 1];
                let (gw, gb) = &mut rest[l - 1];
                for (g, d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
                let mut back = vec![0.0f32; p.n_in];
                for (i, &hi) in h.iter().enumerate() {
                    if hi > 0.0 {
                        let w = &p.weights_t[i * p.n_out..(i + 1) * p.n_out];
                        let g = &mut gw[i * p.n_out..(i + 1) * p.n_out];
                        let mut acc = 0.0f32;
                        for j in 0..p.n_out {
                            g[j] += hi * delta[j];
                            acc += w[j] * delta[j];
                        }
                        back[i] = acc;
                    }
                }
                delta = back;
            }
            for (g, d) in first_bias.iter_mut().zip(&delta) {
                *g += d;
            }
            first_terms.push((x.iter().collect(), delta));
        }
        (
            Gradient {
                first_terms,
                first_bias,
                rest,
            },
            loss / batch.len() as f32,
        )
    }

    /// Plain gradient step `theta -= lr * grad`.
    pub fn apply(&mut self, grad: &Gradient, lr: f32) {
        let l0 = &mut self.layers[0];
        let n = l0.n_out;
        let mut g = vec![0.0f32; n];
        for (i, group) in grad.first_rows().groups() {
            g.fill(0.0);
            for &(b, v) in group {
                tensor::axpy(v, &grad.first_terms[b as usize].1, &mut g);
            }
            tensor::axpy(-lr, &g, &mut l0.weights_t[i * n..(i + 1) * n]);
        }
        tensor::axpy(-lr, &grad.first_bias, &mut l0.bias);
        for (p, (gw, gb)) in self.layers[1..].iter_mut().zip(&grad.rest) {
            tensor::axpy(-lr, gw, &mut p.weights_t);
            tensor::axpy(-lr, gb, &mut p.bias);
        }
    }
}

/// Adam moments for every parameter. First-layer rows are updated lazily:
/// only rows of inputs that were non-zero somewhere in the batch move, and
/// their moments decay only when they do.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<(Vec<f32>, Vec<f32>)>,
    v: Vec<(Vec<f32>, Vec<f32>)>,
    /// Update count per first-layer row, for bias correction.
    row_t: Vec<u32>,
    t: u32,
}

/// Moments of units that stop receiving gradient decay geometrically into
/// the subnormal range, where arithmetic is orders of magnitude slower.
#[inline(always)]
fn flush(x: f32) -> f32 {
    if x.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Adam step over one first-layer row with per-row bias correction.
struct AdamRow {
    b1: f32,
    b2: f32,
    c1: f32,
    c2: f32,
    eps: f32,
    lr: f32,
}

impl AdamRow {
    fn apply(&self, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just checked.
            unsafe { self.apply_avx(w, m, v, g) };
            return;
        }
        self.apply_plain(w, m, v, g);
    }

    #[inline(always)]
    fn apply_plain(&self, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]) {
        for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(g) {
            *m = flush(self.b1 * *m + (1.0 - self.b1) * g);
            *v = flush(self.b2 * *v + (1.0 - self.b2) * g * g);
            *w -= self.lr * (*m / self.c1) / ((*v / self.c2).sqrt() + self.eps);
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn apply_avx(&self, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32]) {
        self.apply_plain(w, m, v, g);
    }
}

impl AdamState {
    pub fn new(net: &DenseQNet) -> Self {
        let zeros = |net: &DenseQNet| {
            net.layers
                .iter()
                .map(|p| (vec![0.0; p.weights_t.len()], vec![0.0; p.bias.len()]))
                .collect::<Vec<_>>()
        };
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(net),
            v: zeros(net),
            row_t: vec![0; net.input_len()],
            t: 0,
        }
    }

    fn step(&self, m: &mut f32, v: &mut f32, g: f32, t: u32, lr: f32) -> f32 {
        *m = flush(self.beta1 * *m + (1.0 - self.beta1) * g);
        *v = flush(self.beta2 * *v + (1.0 - self.beta2) * g * g);
        let mh = *m / (1.0 - self.beta1.powi(t as i32));
        let vh = *v / (1.0 - self.beta2.powi(t as i32));
        -lr * mh / (vh.sqrt() + self.eps)
    }

    fn update(&self, params: &mut [f32], m: &mut [f32], v: &mut [f32], grad: &[f32], t: u32, lr: f32) {
        for (((p, m), v), &g) in params.iter_mut().zip(m).zip(v).zip(grad) {
            *p += self.step(m, v, g, t, lr);
        }
    }
}

impl DenseQNet {
    /// Adam step with learning rate `lr`.
    pub fn apply_adam(&mut self, grad: &Gradient, state: &mut AdamState, lr: f32) {
        state.t += 1;
        let t = state.t;
        let n_out = self.layers[0].n_out;
        let (b1, b2) = (state.beta1, state.beta2);
        let (m0, v0) = (&mut state.m[0].0, &mut state.v[0].0);
        let l0 = &mut self.layers[0];
        let mut g = vec![0.0f32; n_out];
        for (i, group) in grad.first_rows().groups() {
            g.fill(0.0);
            for &(b, v) in group {
                tensor::axpy(v, &grad.first_terms[b as usize].1, &mut g);
            }
            state.row_t[i] += 1;
            let rt = state.row_t[i] as i32;
            let (c1, c2) = (1.0 - b1.powi(rt), 1.0 - b2.powi(rt));
            let r = i * n_out..(i + 1) * n_out;
            let row = AdamRow {
                b1,
                b2,
                c1,
                c2,
                eps: state.eps,
                lr,
            };
            row.apply(&mut l0.weights_t[r.clone()], &mut m0[r.clone()], &mut v0[r], &g);
        }
        let mut mb = std::mem::take(&mut state.m[0].1);
        let mut vb = std::mem::take(&mut state.v[0].1);
        state.update(&mut self.layers[0].bias, &mut mb, &mut vb, &grad.first_bias, t, lr);
        state.m[0].1 = mb;
        state.v[0].1 = vb;
        for (l, (gw, gb)) in grad.rest.iter().enumerate() {
            let l = l + 1;
            let (mut mw, mut vw) = (std::mem::take(&mut state.m[l].0), std::mem::take(&mut state.v[l].0));
            let (mut mb, mut vb) = (std::mem::take(&mut state.m[l].1), std::mem::take(&mut state.v[l].1));
            state.update(&mut self.layers[l].weights_t, &mut mw, &mut vw, gw, t, lr);
            state.update(&mut self.layers[l].bias, &mut mb, &mut vb, gb, t, lr);
            state.m[l] = (mw, mb);
            state.v[l] = (vw, vb);
        }
    }
}
