//! Neural-network building blocks on top of the autodiff tape.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and kept in
//! insertion order, so initialisation, optimiser updates, and checkpoint
//! round-trips all see the same deterministic sequence.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::tape::{Gradients, Matrix, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Ordered, named parameter set for one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Matrix)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &Matrix {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.entries[i].1
    }

    pub fn set(&mut self, name: &str, value: Matrix) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(self.entries[i].1.dim(), value.dim(), "shape change for {name}");
        self.entries[i].1 = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    /// Register every parameter as a tape leaf. With `trainable = false` the
    /// leaves are constants and backward skips everything upstream of them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            let v = if trainable {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Gradients for every parameter in store order, zero-filled where the
    /// loss did not touch the parameter.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.entries
            .iter()
            .map(|(name, value)| grads.get_or_zeros(bound.var(name), value.dim()))
            .collect()
    }

    /// Merge another store under a name prefix (used to freeze one model's
    /// parameters inside another's checkpoint).
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore) {
        for (name, value) in other.iter() {
            self.insert(&format!("{prefix}.{name}"), value.clone());
        }
    }

    /// Extract the sub-store under a prefix, stripping it from the names.
    pub fn extract(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            if let Some(rest) = name.strip_prefix(&dotted) {
                out.insert(rest, value.clone());
            }
        }
        out
    }
}

/// Tape handles for one bound parameter set.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }
}

// ---------------------------------------------------------------------------
// initialisation

/// Glorot-uniform weight and zero bias for a linear layer.
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, d_in: usize, d_out: usize) {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let w = Matrix::from_shape_fn((d_in, d_out), |_| rng.random_range(-limit..limit));
    store.insert(&format!("{prefix}.w"), w);
    store.insert(&format!("{prefix}.b"), Matrix::zeros((1, d_out)));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{prefix}.gamma"), Matrix::from_elem((1, d), 1.0));
    store.insert(&format!("{prefix}.beta"), Matrix::zeros((1, d)));
}

/// Small-normal token embeddings (rows are tokens).
pub fn init_tokens(store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, count: usize, d: usize) {
    let t = Matrix::from_shape_fn((count, d), |_| {
        normal_sample(rng) * 0.02
    });
    store.insert(name, t);
}

/// Standard normal draw from the shared generator.
pub fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Matrix of iid standard normal draws.
pub fn normal_matrix(rng: &mut ChaCha12Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| normal_sample(rng))
}

// ---------------------------------------------------------------------------
// layers

pub fn linear(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.var(&format!("{prefix}.w"));
    let b = p.var(&format!("{prefix}.b"));
    let h = t.matmul(x, w);
    t.add_row_vec(h, b)
}

pub fn layer_norm(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let gamma = p.var(&format!("{prefix}.gamma"));
    let beta = p.var(&format!("{prefix}.beta"));
    let h = t.layer_norm_rows(x, LN_EPS);
    let h = t.mul_row_vec(h, gamma);
    t.add_row_vec(h, beta)
}

/// Multi-head scaled dot-product attention. `x` provides the queries and
/// `memory` the keys and values; pass the same var for self-attention.
pub fn attention(t: &mut Tape, p: &Bound, prefix: &str, x: Var, memory: Var, heads: usize) -> Var {
    let d = t.value(x).ncols();
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let q = linear(t, p, &format!("{prefix}.q"), x);
    let k = linear(t, p, &format!("{prefix}.k"), memory);
    let v = linear(t, p, &format!("{prefix}.v"), memory);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * hd, hd);
        let kh = t.slice_cols(k, h * hd, hd);
        let vh = t.slice_cols(v, h * hd, hd);
        let kt = t.transpose(kh);
        let scores = t.matmul(qh, kt);
        let scores = t.scale(scores, scale);
        let weights = t.softmax_rows(scores);
        head_outs.push(t.matmul(weights, vh));
    }
    let merged = t.concat_cols(&head_outs);
    linear(t, p, &format!("{prefix}.o"), merged)
}

/// Pre-norm transformer encoder block: self-attention then a GELU MLP, each
/// behind a residual connection.
pub fn encoder_block(t: &mut Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    let n1 = layer_norm(t, p, &format!("{prefix}.ln1"), x);
    let a = attention(t, p, &format!("{prefix}.attn"), n1, n1, heads);
    let x = t.add(x, a);
    let n2 = layer_norm(t, p, &format!("{prefix}.ln2"), x);
    let f = feed_forward(t, p, prefix, n2);
    t.add(x, f)
}

/// Pre-norm transformer decoder block: self-attention, cross-attention over
/// `memory`, then the MLP, each behind a residual connection.
pub fn decoder_block(t: &mut Tape, p: &Bound, prefix: &str, x: Var, memory: Var, heads: usize) -> Var {
    let n1 = layer_norm(t, p, &format!("{prefix}.ln1"), x);
    let a = attention(t, p, &format!("{prefix}.attn"), n1, n1, heads);
    let x = t.add(x, a);
    let n2 = layer_norm(t, p, &format!("{prefix}.ln_x"), x);
    let c = attention(t, p, &format!("{prefix}.cross"), n2, memory, heads);
    let x = t.add(x, c);
    let n3 = layer_norm(t, p, &format!("{prefix}.ln2"), x);
    let f = feed_forward(t, p, prefix, n3);
    t.add(x, f)
}

fn feed_forward(t: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(t, p, &format!("{prefix}.fc1"), x);
    let h = t.gelu(h);
    linear(t, p, &format!("{prefix}.fc2"), h)
}

pub fn init_attention(store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, d: usize) {
    init_linear(store, rng, &format!("{prefix}.q"), d, d);
    init_linear(store, rng, &format!("{prefix}.k"), d, d);
    init_linear(store, rng, &format!("{prefix}.v"), d, d);
    init_linear(store, rng, &format!("{prefix}.o"), d, d);
}

pub fn init_encoder_block(store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, d: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, rng, &format!("{prefix}.fc1"), d, 4 * d);
    init_linear(store, rng, &format!("{prefix}.fc2"), 4 * d, d);
}

pub fn init_decoder_block(store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, d: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln_x"), d);
    init_attention(store, rng, &format!("{prefix}.cross"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, rng, &format!("{prefix}.fc1"), d, 4 * d);
    init_linear(store, rng, &format!("{prefix}.fc2"), 4 * d, d);
}

/// Long skip connection pairing around the stack's midpoint: the input of
/// block `layers-1-i` receives a learned linear projection of block `i`'s
/// input, for `i < layers/2`. An odd middle block is left unpaired.
pub fn skip_pairs(layers: usize) -> Vec<(usize, usize)> {
    (0..layers / 2)
        .map(|i| (i, layers - 1 - i))
        .filter(|&(i, j)| i != j)
        .collect()
}

pub fn init_skip_weights(store: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str, layers: usize, d: usize) {
    for (i, _) in skip_pairs(layers) {
        let limit = (6.0 / (2 * d) as f64).sqrt();
        let w = Matrix::from_shape_fn((d, d), |_| rng.random_range(-limit..limit));
        store.insert(&format!("{prefix}.skip{i}.w"), w);
    }
}

/// Run a stack of encoder blocks, with long skip connections when `skips`.
pub fn encoder_stack(
    t: &mut Tape,
    p: &Bound,
    prefix: &str,
    mut x: Var,
    layers: usize,
    heads: usize,
    skips: bool,
) -> Var {
    let pairs = if skips { skip_pairs(layers) } else { Vec::new() };
    let mut saved: BTreeMap<usize, Var> = BTreeMap::new();
    for l in 0..layers {
        if let Some(&(i, _)) = pairs.iter().find(|&&(_, j)| j == l) {
            let w = p.var(&format!("{prefix}.skip{i}.w"));
            let proj = t.matmul(saved[&i], w);
            x = t.add(x, proj);
        }
        if pairs.iter().any(|&(i, _)| i == l) {
            saved.insert(l, x);
        }
        x = encoder_block(t, p, &format!("{prefix}.block{l}"), x, heads);
    }
    x
}

pub fn init_encoder_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    layers: usize,
    d: usize,
    skips: bool,
) {
    for l in 0..layers {
        init_encoder_block(store, rng, &format!("{prefix}.block{l}"), d);
    }
    if skips {
        init_skip_weights(store, rng, prefix, layers, d);
    }
}

/// Run a stack of decoder blocks cross-attending to `memory`, with long skip
/// connections when `skips`.
pub fn decoder_stack(
    t: &mut Tape,
    p: &Bound,
    prefix: &str,
    mut x: Var,
    memory: Var,
    layers: usize,
    heads: usize,
    skips: bool,
) -> Var {
    let pairs = if skips { skip_pairs(layers) } else { Vec::new() };
    let mut saved: BTreeMap<usize, Var> = BTreeMap::new();
    for l in 0..layers {
        if let Some(&(i, _)) = pairs.iter().find(|&&(_, j)| j == l) {
            let w = p.var(&format!("{prefix}.skip{i}.w"));
            let proj = t.matmul(saved[&i], w);
            x = t.add(x, proj);
        }
        if pairs.iter().any(|&(i, _)| i == l) {
            saved.insert(l, x);
        }
        x = decoder_block(t, p, &format!("{prefix}.block{l}"), x, memory, heads);
    }
    x
}

pub fn init_decoder_stack(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    layers: usize,
    d: usize,
    skips: bool,
) {
    for l in 0..layers {
        init_decoder_block(store, rng, &format!("{prefix}.block{l}"), d);
    }
    if skips {
        init_skip_weights(store, rng, prefix, layers, d);
    }
}

// ---------------------------------------------------------------------------
// positional encodings

/// Sinusoidal positional encoding table, one row per position.
pub fn sinusoidal_pe(len: usize, d: usize) -> Matrix {
    assert_eq!(d % 2, 0, "positional encoding width must be even");
    Matrix::from_shape_fn((len, d), |(pos, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Sinusoidal embedding of a scalar position (used for diffusion timesteps).
pub fn sinusoidal_scalar(pos: f64, d: usize) -> Matrix {
    assert_eq!(d % 2, 0);
    Matrix::from_shape_fn((1, d), |(_, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

// ---------------------------------------------------------------------------
// losses

/// Mean squared error over all elements.
pub fn mse_mean(t: &mut Tape, pred: Var, target: Var) -> Var {
    let d = t.sub(pred, target);
    let sq = t.mul(d, d);
    t.mean_all(sq)
}

/// Sum of squared elements.
pub fn sum_sq(t: &mut Tape, x: Var) -> Var {
    let sq = t.mul(x, x);
    t.sum_all(sq)
}

// ---------------------------------------------------------------------------
// optimiser

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Weight decay applies only to linear weight matrices; biases, norm affines,
/// and learned tokens are excluded.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// AdamW with decoupled weight decay. Moment buffers follow store order.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| Matrix::zeros(p.dim())).collect();
        let v = store.iter().map(|(_, p)| Matrix::zeros(p.dim())).collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must align with the store's insertion order,
    /// as produced by [`ParamStore::collect_grads`].
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (i, (name, p)) in store.entries.iter_mut().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + wd * *p);
                });
        }
    }
}

/// Global L2 norm across a gradient list.
pub fn grad_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// True if any value in the list is NaN or infinite.
pub fn any_non_finite(grads: &[Matrix]) -> bool {
    grads.iter().any(|g| g.iter().any(|x| !x.is_finite()))
}

/// Mean over rows, returned as a 1-row matrix.
pub fn mean_rows(m: &Matrix) -> Matrix {
    (m.sum_axis(Axis(0)) / m.nrows() as f64).insert_axis(Axis(0))
}
