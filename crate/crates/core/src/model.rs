//! Mean-aggregator GCN: parameters, exact and historical forward passes,
//! softmax cross-entropy with backpropagation, Adam, evaluation and
//! checkpoints.
//!
//! Layer `l` computes, for every row node `v`,
//!
//! ```text
//! h_v^l = act( h_v^{l-1} W_self + mean_{w in S(v)} h_w^{l-1} W_neigh + b )
//! ```
//!
//! with `act = ReLU` on hidden layers and the identity on the classifier.
//! `S(v)` is the (possibly capped) neighbor set; an isolated node gets a zero
//! neighbor term. Both forward passes compile to a [`ForwardPass`] whose
//! inputs are either freshly computed rows of the previous layer or constant
//! rows read from a historical table; gradients only flow through fresh rows.

use std::borrow::Cow;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingTable, Stamp};
use crate::error::{Error, Result};
use crate::graph::{Graph, Partition, Split};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w_self: Array2<f64>,
    pub w_neigh: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w_self: Array2::zeros((d_in, d_out)),
            w_neigh: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    fn tensors(&self) -> [&[f64]; 3] {
        [
            self.w_self.as_slice().expect("standard layout"),
            self.w_neigh.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w_self.as_slice_mut().expect("standard layout"),
            self.w_neigh.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Weights of an `L`-layer network with widths `dims = [d0, d1, .., dL]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::param(format!(
                "dims must have at least two positive entries, got {dims:?}"
            )));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        let mut rng = rng_for(seed, &[tag::INIT]);
        for layer in &mut params.layers {
            let (d_in, d_out) = layer.w_self.dim();
            let limit = (6.0 / (d_in + d_out) as f64).sqrt();
            for w in layer.w_self.iter_mut().chain(layer.w_neigh.iter_mut()) {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(params)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (d_in, d_out) = layer.w_self.dim();
            if layer.w_neigh.dim() != (d_in, d_out) || layer.bias.len() != d_out {
                return Err(Error::Dimension(format!("layer {} shapes disagree", i + 1)));
            }
            if i > 0 && layers[i - 1].w_self.ncols() != d_in {
                return Err(Error::Dimension(format!(
                    "layer {} input width {d_in} does not match previous output {}",
                    i + 1,
                    layers[i - 1].w_self.ncols()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w_self.nrows()];
        dims.extend(self.layers.iter().map(|l| l.w_self.ncols()));
        dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w_self.len() + l.w_neigh.len() + l.bias.len())
            .sum()
    }

    /// Row-major concatenation of every tensor, layer by layer
    /// (`w_self`, `w_neigh`, `bias`).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for layer in &self.layers {
            for t in layer.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn scalars_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut().into_iter().flat_map(|t| t.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.w_self.dim() == b.w_self.dim()
                    && a.w_neigh.dim() == b.w_neigh.dim()
                    && a.bias.len() == b.bias.len()
            })
    }

    pub fn l2_norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean distance between two parameter vectors of the same shape.
    pub fn distance(&self, other: &Self) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_self.scaled_add(alpha, &b.w_self);
            a.w_neigh.scaled_add(alpha, &b.w_neigh);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in self.scalars_mut() {
            *x *= alpha;
        }
    }

    /// Unweighted mean of same-shaped parameter sets, summed in slice order.
    pub fn mean_of(models: &[ModelParams]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::param("cannot average zero models"))?;
        let mut acc = first.clone();
        for m in &models[1..] {
            if !m.same_shape(first) {
                return Err(Error::Dimension("averaging models of different shapes".into()));
            }
            acc.add_scaled(1.0, m);
        }
        acc.scale(1.0 / models.len() as f64);
        Ok(acc)
    }
}

/// Neighbor selection for one forward pass. With a cap, nodes whose degree
/// exceeds it use a uniform sample without replacement drawn from a stream
/// keyed by `(seed, round, epoch, node)`, so every pass in the same epoch
/// sees the same neighbor set for a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborSampler {
    pub cap: Option<usize>,
    pub seed: u64,
    pub round: usize,
    pub epoch: usize,
}

impl NeighborSampler {
    pub const FULL: NeighborSampler = NeighborSampler {
        cap: None,
        seed: 0,
        round: 0,
        epoch: 0,
    };

    pub fn capped(cap: Option<usize>, seed: u64, round: usize, epoch: usize) -> Self {
        Self {
            cap,
            seed,
            round,
            epoch,
        }
    }

    pub fn neighbors<'g>(&self, g: &'g Graph, v: usize) -> Cow<'g, [usize]> {
        let all = g.neighbors(v);
        match self.cap {
            Some(cap) if all.len() > cap => {
                let mut rng = rng_for(
                    self.seed,
                    &[tag::NEIGHBOR, self.round as u64, self.epoch as u64, v as u64],
                );
                let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, all.len(), cap)
                    .into_iter()
                    .map(|i| all[i])
                    .collect();
                picked.sort_unstable();
                Cow::Owned(picked)
            }
            _ => Cow::Borrowed(all),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    /// Row of the previous layer's freshly computed output.
    Fresh(usize),
    /// Row of this layer's constant historical input block.
    Hist(usize),
}

#[derive(Debug, Clone)]
struct LayerPlan {
    rows: Vec<usize>,
    self_src: Vec<Source>,
    neigh_src: Vec<Vec<Source>>,
    hist: Array2<f64>,
}

/// One historical read made by [`forward_historical`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoricalRead {
    pub node: usize,
    pub layer: usize,
    pub stamp: Stamp,
    pub cross_client: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub reads: Vec<HistoricalRead>,
}

impl AccessLog {
    pub fn cross_client_reads(&self) -> impl Iterator<Item = &HistoricalRead> {
        self.reads.iter().filter(|r| r.cross_client)
    }
}

/// A compiled forward pass together with every activation needed for
/// backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    model_layers: usize,
    input_nodes: Vec<usize>,
    inputs: Array2<f64>,
    plans: Vec<LayerPlan>,
    xself: Vec<Array2<f64>>,
    xmean: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardPass {
    pub fn num_layers(&self) -> usize {
        self.plans.len()
    }

    /// Nodes whose layer-`l` embedding was computed (`l = 0` are the fresh inputs).
    pub fn rows(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_nodes
        } else {
            &self.plans[layer - 1].rows
        }
    }

    pub fn embeddings(&self, layer: usize) -> &Array2<f64> {
        if layer == 0 {
            &self.inputs
        } else {
            &self.post[layer - 1]
        }
    }

    pub fn embedding_of(&self, layer: usize, node: usize) -> Option<ArrayView1<'_, f64>> {
        let row = self.rows(layer).binary_search(&node).ok()?;
        Some(self.embeddings(layer).row(row))
    }

    /// Output nodes, in logit row order.
    pub fn targets(&self) -> &[usize] {
        self.rows(self.num_layers())
    }

    pub fn logits(&self) -> &Array2<f64> {
        self.embeddings(self.num_layers())
    }

    /// Node-aggregation operations performed: one per (row, layer).
    pub fn compute_units(&self) -> usize {
        self.plans.iter().map(|p| p.rows.len()).sum()
    }
}

fn check_depth(params: &ModelParams, depth: usize) -> Result<()> {
    if depth == 0 || depth > params.num_layers() {
        return Err(Error::param(format!(
            "depth {depth} outside 1..={}",
            params.num_layers()
        )));
    }
    Ok(())
}

fn check_input_dim(g: &Graph, params: &ModelParams) -> Result<()> {
    if g.feature_dim() != params.dims()[0] {
        return Err(Error::Dimension(format!(
            "graph features have width {}, model expects {}",
            g.feature_dim(),
            params.dims()[0]
        )));
    }
    Ok(())
}

fn gather<'a>(prev: &'a Array2<f64>, hist: &'a Array2<f64>, src: Source) -> ArrayView1<'a, f64> {
    match src {
        Source::Fresh(i) => prev.row(i),
        Source::Hist(i) => hist.row(i),
    }
}

fn run_plans(params: &ModelParams, input_nodes: Vec<usize>, inputs: Array2<f64>, plans: Vec<LayerPlan>) -> ForwardPass {
    let num_layers = plans.len();
    let model_layers = params.num_layers();
    let mut xself = Vec::with_capacity(num_layers);
    let mut xmean = Vec::with_capacity(num_layers);
    let mut pre = Vec::with_capacity(num_layers);
    let mut post: Vec<Array2<f64>> = Vec::with_capacity(num_layers);
    for (l, (plan, layer)) in plans.iter().zip(params.layers()).enumerate() {
        let prev = if l == 0 { &inputs } else { &post[l - 1] };
        let d_in = layer.w_self.nrows();
        let rows = plan.rows.len();
        let mut xs = Array2::zeros((rows, d_in));
        let mut xm = Array2::zeros((rows, d_in));
        for r in 0..rows {
            xs.row_mut(r).assign(&gather(prev, &plan.hist, plan.self_src[r]));
            let nbrs = &plan.neigh_src[r];
            if !nbrs.is_empty() {
                let mut acc = xm.row_mut(r);
                for &s in nbrs {
                    acc += &gather(prev, &plan.hist, s);
                }
                acc /= nbrs.len() as f64;
            }
        }
        let mut z = xs.dot(&layer.w_self) + xm.dot(&layer.w_neigh);
        z += &layer.bias;
        let h = if l + 1 < model_layers {
            z.mapv(|x| x.max(0.0))
        } else {
            z.clone()
        };
        xself.push(xs);
        xmean.push(xm);
        pre.push(z);
        post.push(h);
    }
    ForwardPass {
        model_layers,
        input_nodes,
        inputs,
        plans,
        xself,
        xmean,
        pre,
        post,
    }
}

fn feature_rows(g: &Graph, nodes: &[usize]) -> Array2<f64> {
    g.features().select(Axis(0), nodes)
}

/// Exact recursive forward pass for `nodes`: computes every embedding in
/// their `L`-hop receptive field.
pub fn forward_exact(
    g: &Graph,
    params: &ModelParams,
    nodes: &[usize],
    sampler: &NeighborSampler,
) -> Result<ForwardPass> {
    forward_exact_to(g, params, nodes, sampler, params.num_layers())
}

/// [`forward_exact`] stopped after layer `depth` (`1..=L`). Hidden layers
/// keep their activation, so layer `l < L` matches the full pass.
pub fn forward_exact_to(
    g: &Graph,
    params: &ModelParams,
    nodes: &[usize],
    sampler: &NeighborSampler,
    depth: usize,
) -> Result<ForwardPass> {
    check_depth(params, depth)?;
    if nodes.is_empty() {
        return Err(Error::param("forward pass needs at least one node"));
    }
    check_input_dim(g, params)?;
    let n = g.num_nodes();
    if let Some(&v) = nodes.iter().find(|&&v| v >= n) {
        return Err(Error::param(format!("node {v} not in graph")));
    }
    let num_layers = depth;
    // rows[l]: nodes whose layer-l embedding is needed, widening by one hop
    // per layer from the targets down to the raw features
    let mut nbr: Vec<Option<Cow<'_, [usize]>>> = vec![None; n];
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_layers + 1];
    let mut mark = vec![false; n];
    for &v in nodes {
        mark[v] = true;
    }
    rows[num_layers] = (0..n).filter(|&v| mark[v]).collect();
    for l in (0..num_layers).rev() {
        let mut m = vec![false; n];
        for &v in &rows[l + 1] {
            m[v] = true;
            for &w in nbr[v].get_or_insert_with(|| sampler.neighbors(g, v)).iter() {
                m[w] = true;
            }
        }
        rows[l] = (0..n).filter(|&v| m[v]).collect();
    }

    let mut index = vec![usize::MAX; n];
    let mut plans = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        for (i, &v) in rows[l - 1].iter().enumerate() {
            index[v] = i;
        }
        let self_src = rows[l].iter().map(|&v| Source::Fresh(index[v])).collect();
        let neigh_src = rows[l]
            .iter()
            .map(|&v| {
                nbr[v]
                    .as_deref()
                    .unwrap_or(&[])
                    .iter()
                    .map(|&w| Source::Fresh(index[w]))
                    .collect()
            })
            .collect();
        plans.push(LayerPlan {
            rows: rows[l].clone(),
            self_src,
            neigh_src,
            hist: Array2::zeros((0, params.dims()[l - 1])),
        });
    }
    let inputs = feature_rows(g, &rows[0]);
    Ok(run_plans(params, rows.swap_remove(0), inputs, plans))
}

/// Exact forward pass over every node with full neighborhoods.
pub fn forward_full(g: &Graph, params: &ModelParams) -> Result<ForwardPass> {
    let all: Vec<usize> = (0..g.num_nodes()).collect();
    forward_exact(g, params, &all, &NeighborSampler::FULL)
}

/// Historical-embedding forward pass for a batch held by `client`.
///
/// In-batch neighbors contribute freshly computed embeddings; out-of-batch
/// neighbors (local or on other clients) are read from `table`. The table is
/// not modified.
pub fn forward_historical(
    g: &Graph,
    params: &ModelParams,
    batch: &[usize],
    table: &EmbeddingTable,
    partition: &Partition,
    client: usize,
    sampler: &NeighborSampler,
) -> Result<(ForwardPass, AccessLog)> {
    forward_historical_to(g, params, batch, table, partition, client, sampler, params.num_layers())
}

/// [`forward_historical`] stopped after layer `depth`.
#[allow(clippy::too_many_arguments)]
pub fn forward_historical_to(
    g: &Graph,
    params: &ModelParams,
    batch: &[usize],
    table: &EmbeddingTable,
    partition: &Partition,
    client: usize,
    sampler: &NeighborSampler,
    depth: usize,
) -> Result<(ForwardPass, AccessLog)> {
    check_depth(params, depth)?;
    if batch.is_empty() {
        return Err(Error::param("forward pass needs at least one node"));
    }
    check_input_dim(g, params)?;
    let mut rows = batch.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if let Some(&v) = rows.iter().find(|&&v| v >= g.num_nodes() || !partition.is_local(client, v)) {
        return Err(Error::param(format!("batch node {v} is not held by client {client}")));
    }
    let num_layers = depth;
    let dims = params.dims();
    let neighbor_sets: Vec<Cow<'_, [usize]>> = rows.iter().map(|&v| sampler.neighbors(g, v)).collect();

    let mut log = AccessLog::default();
    let mut plans = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let src_layer = l - 1;
        let mut hist_nodes: Vec<usize> = Vec::new();
        let mut neigh_src = Vec::with_capacity(rows.len());
        for nbrs in &neighbor_sets {
            let mut srcs = Vec::with_capacity(nbrs.len());
            for &w in nbrs.iter() {
                match rows.binary_search(&w) {
                    Ok(i) => srcs.push(Source::Fresh(i)),
                    Err(_) => {
                        let slot = match hist_nodes.iter().position(|&h| h == w) {
                            Some(i) => i,
                            None => {
                                hist_nodes.push(w);
                                hist_nodes.len() - 1
                            }
                        };
                        srcs.push(Source::Hist(slot));
                    }
                }
            }
            neigh_src.push(srcs);
        }
        let mut hist = Array2::zeros((hist_nodes.len(), dims[src_layer]));
        for (i, &w) in hist_nodes.iter().enumerate() {
            let entry = table
                .get(w, src_layer)
                .ok_or(Error::MissingEntry { node: w, layer: src_layer })?;
            if entry.vector.len() != dims[src_layer] {
                return Err(Error::Dimension(format!(
                    "table entry for node {w} layer {src_layer} has width {}, expected {}",
                    entry.vector.len(),
                    dims[src_layer]
                )));
            }
            hist.row_mut(i).assign(&ArrayView1::from(&entry.vector[..]));
            log.reads.push(HistoricalRead {
                node: w,
                layer: src_layer,
                stamp: entry.stamp,
                cross_client: !partition.is_local(client, w),
            });
        }
        plans.push(LayerPlan {
            rows: rows.clone(),
            self_src: (0..rows.len()).map(Source::Fresh).collect(),
            neigh_src,
            hist,
        });
    }
    let inputs = feature_rows(g, &rows);
    Ok((run_plans(params, rows, inputs, plans), log))
}

/// Where a training step happens, for error reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepContext {
    pub round: usize,
    pub epoch: usize,
}

fn log_softmax_row(z: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn check_logits(fwd: &ForwardPass, ctx: StepContext) -> Result<()> {
    if fwd.logits().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            round: ctx.round,
            epoch: ctx.epoch,
            what: "non-finite logits".into(),
        })
    }
}

/// Cross-entropy of every output row.
pub fn per_node_losses(fwd: &ForwardPass, labels: &[usize], ctx: StepContext) -> Result<Vec<f64>> {
    check_logits(fwd, ctx)?;
    Ok(fwd
        .targets()
        .iter()
        .enumerate()
        .map(|(r, &v)| -log_softmax_row(fwd.logits().row(r))[labels[v]])
        .collect())
}

/// Mean softmax cross-entropy over the output rows and its gradient.
/// `labels` is indexed by node id.
pub fn loss_and_grad(
    fwd: &ForwardPass,
    labels: &[usize],
    params: &ModelParams,
    ctx: StepContext,
) -> Result<(f64, Gradients)> {
    check_logits(fwd, ctx)?;
    let logits = fwd.logits();
    let batch = logits.nrows() as f64;
    let mut d_out = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (r, &v) in fwd.targets().iter().enumerate() {
        let logp = log_softmax_row(logits.row(r));
        loss -= logp[labels[v]];
        for (c, lp) in logp.iter().enumerate() {
            let y = if c == labels[v] { 1.0 } else { 0.0 };
            d_out[[r, c]] = (lp.exp() - y) / batch;
        }
    }
    loss /= batch;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            round: ctx.round,
            epoch: ctx.epoch,
            what: "non-finite loss".into(),
        });
    }
    Ok((loss, backward(fwd, params, d_out)))
}

/// Backpropagates `d_out` (gradient w.r.t. the logits) through the pass.
pub fn backward(fwd: &ForwardPass, params: &ModelParams, d_out: Array2<f64>) -> Gradients {
    let num_layers = fwd.num_layers();
    let mut grads = ModelParams::zeros(&params.dims()).expect("dims already validated");
    let mut d_h = d_out;
    for l in (0..num_layers).rev() {
        let layer = &params.layers()[l];
        let d_z = if l + 1 < fwd.model_layers {
            let mut dz = d_h;
            dz.zip_mut_with(&fwd.pre[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz
        } else {
            d_h
        };
        let g = &mut grads.layers_mut()[l];
        g.w_self = fwd.xself[l].t().dot(&d_z);
        g.w_neigh = fwd.xmean[l].t().dot(&d_z);
        g.bias = d_z.sum_axis(Axis(0));
        if l == 0 {
            break;
        }
        let d_self = d_z.dot(&layer.w_self.t());
        let d_mean = d_z.dot(&layer.w_neigh.t());
        let plan = &fwd.plans[l];
        let mut d_prev = Array2::zeros(fwd.post[l - 1].dim());
        for r in 0..plan.rows.len() {
            if let Source::Fresh(i) = plan.self_src[r] {
                let mut row = d_prev.row_mut(i);
                row += &d_self.row(r);
            }
            let nbrs = &plan.neigh_src[r];
            let share = 1.0 / nbrs.len().max(1) as f64;
            for &s in nbrs {
                if let Source::Fresh(i) = s {
                    d_prev.row_mut(i).scaled_add(share, &d_mean.row(r));
                }
            }
        }
        d_h = d_prev;
    }
    grads
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; params.num_scalars()],
            second: vec![0.0; params.num_scalars()],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam step with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grads) || state.first.len() != params.num_scalars() {
        return Err(Error::Dimension("gradient or optimizer shape mismatch".into()));
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let flat_grads = grads.flatten();
    for (((theta, g), m), v) in params
        .scalars_mut()
        .zip(flat_grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
    }
    Ok(())
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (c, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub nodes: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Server-side evaluation with an exact full-neighborhood forward pass.
pub fn evaluate(g: &Graph, params: &ModelParams, split: Split) -> Result<Evaluation> {
    let nodes = g.nodes_in(split);
    if nodes.is_empty() {
        return Err(Error::param(format!("split {split:?} has no nodes")));
    }
    let fwd = forward_exact(g, params, &nodes, &NeighborSampler::FULL)?;
    let losses = per_node_losses(&fwd, g.labels(), StepContext::default())?;
    let predictions: Vec<usize> = (0..nodes.len()).map(|r| argmax(fwd.logits().row(r))).collect();
    let correct = nodes
        .iter()
        .zip(&predictions)
        .filter(|(&v, &p)| g.labels()[v] == p)
        .count();
    Ok(Evaluation {
        loss: losses.iter().sum::<f64>() / nodes.len() as f64,
        accuracy: correct as f64 / nodes.len() as f64,
        nodes,
        predictions,
    })
}

pub const CHECKPOINT_FORMAT: &str = "fedais-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointLayer {
    w_self: Vec<f64>,
    w_neigh: Vec<f64>,
    bias: Vec<f64>,
}

/// JSON checkpoint: `{"format", "version", "dims", "layers": [{"w_self",
/// "w_neigh", "bias"}]}` with weight matrices flattened row-major
/// (`d_in x d_out`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

impl ModelParams {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let [s, n, b] = l.tensors();
                    CheckpointLayer {
                        w_self: s.to_vec(),
                        w_neigh: n.to_vec(),
                        bias: b.to_vec(),
                    }
                })
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_checkpoint(&bytes)
    }
}

/// Parses and validates a JSON checkpoint.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    if ckpt.dims.len() != ckpt.layers.len() + 1 || ckpt.dims.contains(&0) {
        return Err(Error::Format(format!(
            "dims {:?} do not describe {} layers",
            ckpt.dims,
            ckpt.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(ckpt.layers.len());
    for (i, (l, w)) in ckpt.layers.into_iter().zip(ckpt.dims.windows(2)).enumerate() {
        let (d_in, d_out) = (w[0], w[1]);
        let bad = |what: &str| Error::Format(format!("layer {}: {what} has the wrong length", i + 1));
        let expect = d_in
            .checked_mul(d_out)
            .ok_or_else(|| Error::Format("dims overflow".into()))?;
        if l.w_self.len() != expect {
            return Err(bad("w_self"));
        }
        if l.w_neigh.len() != expect {
            return Err(bad("w_neigh"));
        }
        if l.bias.len() != d_out {
            return Err(bad("bias"));
        }
        layers.push(Layer {
            w_self: Array2::from_shape_vec((d_in, d_out), l.w_self).map_err(|e| Error::Format(e.to_string()))?,
            w_neigh: Array2::from_shape_vec((d_in, d_out), l.w_neigh).map_err(|e| Error::Format(e.to_string()))?,
            bias: Array1::from(l.bias),
        });
    }
    ModelParams::from_layers(layers)
}
