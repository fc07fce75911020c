//! Dense GCN with mean aggregation, hand-written reverse mode and Adam.
//!
//! A layer reads a *table* of embeddings from the level below: the rows this
//! worker computed itself, followed by rows fetched from other workers.
//! Fetched rows are constants for backprop; gradients only flow into the
//! computed rows.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Bits per parameter or embedding entry when billing traffic.
pub const BITS_PER_VALUE: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcLayerParams {
    /// `d_l x 2 d_{l-1}`, applied to `[h_self || mean_neighbors]`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<GcLayerParams>,
    /// `num_classes x d_L`.
    pub head_weight: DMatrix<f64>,
    pub head_bias: DVector<f64>,
}

fn glorot(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

impl ModelParams {
    /// `dims = [d_0, d_1, .., d_L]`.
    pub fn init(dims: &[usize], num_classes: usize, rng: &mut SimRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("a GCN needs at least one layer"));
        }
        if dims.contains(&0) || num_classes == 0 {
            return Err(Error::config(
                "layer widths and class count must be positive",
            ));
        }
        let layers = dims
            .windows(2)
            .map(|w| GcLayerParams {
                weight: glorot(w[1], 2 * w[0], rng),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        let d_last = *dims.last().unwrap();
        Ok(Self {
            layers,
            head_weight: glorot(num_classes, d_last, rng),
            head_bias: DVector::zeros(num_classes),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.map_inplace(|_| 0.0);
        z
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[d_0, .., d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.ncols() / 2];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum::<usize>()
            + self.head_weight.len()
            + self.head_bias.len()
    }

    pub fn size_bits(&self) -> u64 {
        self.num_params() as u64 * BITS_PER_VALUE
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.head_weight.as_slice());
        out.push(self.head_bias.as_slice());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head_weight.as_mut_slice());
        out.push(self.head_bias.as_mut_slice());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
            && self.head_weight.shape() == other.head_weight.shape()
            && self.head_bias.len() == other.head_bias.len()
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        for s in self.slices_mut() {
            for x in s {
                *x = f(*x);
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Euclidean distance between two flattened parameter vectors.
pub fn param_l2_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("parameter sets have different shapes"));
    }
    let d2: f64 = a
        .slices()
        .iter()
        .zip(b.slices())
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(d2.sqrt())
}

pub fn param_size_bits(params: &ModelParams) -> u64 {
    params.size_bits()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `[d_1, .., d_L]`; `L` is its length.
    pub hidden_dims: Vec<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 3e-4,
            batch_size: 64,
            hidden_dims: vec![16, 16],
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "need at least one layer, all widths positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len()
    }
}

/// One GC layer's view of the sampling plan in table-row space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerPlan {
    /// Row of each output node's own embedding in the table below.
    pub self_rows: Vec<usize>,
    /// Rows of each output node's sampled neighbours in the table below.
    pub neighbor_rows: Vec<Vec<usize>>,
}

impl LayerPlan {
    pub fn len(&self) -> usize {
        self.self_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.self_rows.is_empty()
    }
}

/// Inputs for an `L`-layer forward pass.
#[derive(Debug, Clone)]
pub struct ForwardInput {
    /// Level-0 rows computed locally (raw features).
    pub features: DMatrix<f64>,
    /// Per level `0..L`, fetched rows appended after the computed rows.
    pub remote: Vec<DMatrix<f64>>,
    /// `layers[l - 1]` drives GC layer `l`.
    pub layers: Vec<LayerPlan>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Number of computed (gradient-carrying) rows in the table below.
    pub computed_below: usize,
    /// Rows in the table below, computed and fetched.
    pub table_rows: usize,
    pub concat: DMatrix<f64>,
    pub pre: DMatrix<f64>,
    pub plan: LayerPlan,
}

/// Cached forward state for manual backprop.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub layers: Vec<LayerCache>,
    /// Post-activation embeddings per level `1..=L`.
    pub post: Vec<DMatrix<f64>>,
    pub logits: DMatrix<f64>,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if bottom.nrows() == 0 {
        return Ok(top.clone());
    }
    if top.ncols() != bottom.ncols() {
        return Err(Error::shape(format!(
            "computed rows have width {}, fetched rows {}",
            top.ncols(),
            bottom.ncols()
        )));
    }
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.rows_mut(0, top.nrows()).copy_from(top);
    out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    Ok(out)
}

/// Mean-aggregate sampled neighbours and apply `ReLU(W [h || agg] + b)`.
pub fn gc_layer_forward(
    table: &DMatrix<f64>,
    computed_below: usize,
    plan: &LayerPlan,
    layer: &GcLayerParams,
) -> Result<(DMatrix<f64>, LayerCache)> {
    let d_in = table.ncols();
    if layer.weight.ncols() != 2 * d_in {
        return Err(Error::shape(format!(
            "layer expects input width {}, table has {}",
            layer.weight.ncols() / 2,
            d_in
        )));
    }
    if plan.self_rows.len() != plan.neighbor_rows.len() {
        return Err(Error::shape(
            "self rows and neighbour lists differ in length",
        ));
    }
    let n = plan.len();
    let rows = table.nrows();
    let mut concat = DMatrix::zeros(n, 2 * d_in);
    for (i, (&s, nbrs)) in plan.self_rows.iter().zip(&plan.neighbor_rows).enumerate() {
        if s >= rows {
            return Err(Error::protocol(format!(
                "self row {s} not in a table of {rows}"
            )));
        }
        for j in 0..d_in {
            concat[(i, j)] = table[(s, j)];
        }
        if nbrs.is_empty() {
            continue;
        }
        let inv = 1.0 / nbrs.len() as f64;
        for &u in nbrs {
            if u >= rows {
                return Err(Error::protocol(format!(
                    "neighbour row {u} unresolved in a table of {rows}"
                )));
            }
            for j in 0..d_in {
                concat[(i, d_in + j)] += table[(u, j)] * inv;
            }
        }
    }
    let mut pre = &concat * layer.weight.transpose();
    for mut row in pre.row_iter_mut() {
        row += layer.bias.transpose();
    }
    let post = pre.map(relu);
    Ok((
        post,
        LayerCache {
            computed_below,
            table_rows: rows,
            concat,
            pre,
            plan: plan.clone(),
        },
    ))
}

/// Runs all GC layers and returns the top-level embeddings with their cache.
pub fn forward_embeddings(
    params: &ModelParams,
    input: &ForwardInput,
) -> Result<(DMatrix<f64>, Vec<LayerCache>, Vec<DMatrix<f64>>)> {
    forward_upto(params, input, params.num_layers())
}

/// Runs the first `depth` GC layers.
pub fn forward_upto(
    params: &ModelParams,
    input: &ForwardInput,
    depth: usize,
) -> Result<(DMatrix<f64>, Vec<LayerCache>, Vec<DMatrix<f64>>)> {
    if depth > params.num_layers() || input.layers.len() < depth {
        return Err(Error::shape(format!(
            "asked for {depth} layers; model has {}, plan has {}",
            params.num_layers(),
            input.layers.len()
        )));
    }
    let mut computed = input.features.clone();
    let mut caches = Vec::with_capacity(depth);
    let mut posts = Vec::with_capacity(depth);
    for l in 0..depth {
        let empty = DMatrix::zeros(0, computed.ncols());
        let remote = input.remote.get(l).unwrap_or(&empty);
        let table = stack_rows(&computed, remote)?;
        let (h, cache) = gc_layer_forward(
            &table,
            computed.nrows(),
            &input.layers[l],
            &params.layers[l],
        )?;
        caches.push(cache);
        posts.push(h.clone());
        computed = h;
    }
    Ok((computed, caches, posts))
}

/// Per-node linear head.
pub fn predict(h_top: &DMatrix<f64>, params: &ModelParams) -> DMatrix<f64> {
    let mut logits = h_top * params.head_weight.transpose();
    for mut row in logits.row_iter_mut() {
        row += params.head_bias.transpose();
    }
    logits
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Mean softmax cross-entropy.
pub fn loss(logits: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let b = logits.nrows();
    if b == 0 {
        return 0.0;
    }
    let total: f64 = (0..b)
        .map(|i| {
            let row = row_vec(logits, i);
            log_sum_exp(&row) - row[labels[i]]
        })
        .sum();
    total / b as f64
}

pub fn argmax_rows(logits: &DMatrix<f64>) -> Vec<usize> {
    (0..logits.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..logits.ncols() {
                if logits[(i, j)] > logits[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Full forward pass with loss.
pub fn forward(
    params: &ModelParams,
    input: &ForwardInput,
    labels: &[usize],
) -> Result<(f64, LayerActivations)> {
    let (h, caches, post) = forward_embeddings(params, input)?;
    if h.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} output rows but {} labels",
            h.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= params.num_classes()) {
        return Err(Error::shape(format!("label {bad} out of range")));
    }
    let logits = predict(&h, params);
    let value = loss(&logits, labels);
    Ok((
        value,
        LayerActivations {
            layers: caches,
            post,
            logits,
        },
    ))
}

fn colsum(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.ncols());
    for row in m.row_iter() {
        out += row.transpose();
    }
    out
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub fn backward(params: &ModelParams, acts: &LayerActivations, labels: &[usize]) -> ModelParams {
    let b = acts.logits.nrows();
    let mut grads = params.zeros_like();
    if b == 0 {
        return grads;
    }
    let mut d_logits = DMatrix::zeros(b, acts.logits.ncols());
    for i in 0..b {
        let row = row_vec(&acts.logits, i);
        let lse = log_sum_exp(&row);
        for (j, x) in row.iter().enumerate() {
            d_logits[(i, j)] = (x - lse).exp() / b as f64;
        }
        d_logits[(i, labels[i])] -= 1.0 / b as f64;
    }
    let h_top = acts.post.last().expect("at least one layer");
    grads.head_weight = d_logits.transpose() * h_top;
    grads.head_bias = colsum(&d_logits);
    let mut d_post = &d_logits * &params.head_weight;

    for l in (0..params.num_layers()).rev() {
        let cache = &acts.layers[l];
        let mut d_pre = d_post;
        d_pre.zip_apply(&cache.pre, |g, z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        grads.layers[l].weight = d_pre.transpose() * &cache.concat;
        grads.layers[l].bias = colsum(&d_pre);
        if l == 0 {
            break;
        }
        let d_concat = &d_pre * &params.layers[l].weight;
        let d_in = cache.concat.ncols() / 2;
        let mut d_table = DMatrix::zeros(cache.table_rows, d_in);
        for (i, (&s, nbrs)) in cache
            .plan
            .self_rows
            .iter()
            .zip(&cache.plan.neighbor_rows)
            .enumerate()
        {
            for j in 0..d_in {
                d_table[(s, j)] += d_concat[(i, j)];
            }
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            for &u in nbrs {
                for j in 0..d_in {
                    d_table[(u, j)] += d_concat[(i, d_in + j)] * inv;
                }
            }
        }
        d_post = d_table.rows(0, cache.computed_below).into_owned();
    }
    grads
}

/// Adam moments, flattened in `ModelParams::flatten` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.num_params())
    }

    /// One bias-corrected Adam step on a flat vector. Weight decay is added to the gradient.
    pub fn step_flat(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        assert_eq!(theta.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i] + weight_decay * theta[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    hyper: &Hyperparams,
) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::shape("gradient shape does not match parameters"));
    }
    let mut theta = params.flatten();
    state.step_flat(&mut theta, &grads.flatten(), hyper.lr, hyper.weight_decay);
    params.set_flat(&theta)
}
