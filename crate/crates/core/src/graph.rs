//! Graph storage, synthetic generation, client partitioning and
//! cross-client edge bookkeeping.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Undirected attributed graph in CSR form. Self-loops and duplicate edges
/// are never stored; every edge appears once in each direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    splits: Vec<Split>,
}

impl Graph {
    /// Builds a graph from a possibly directed, possibly redundant edge
    /// list. Edges are symmetrized, self-loops dropped and duplicates merged.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize)],
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::Format(format!(
                "{} labels for {} nodes",
                labels.len(),
                n
            )));
        }
        if splits.len() != n {
            return Err(Error::Format(format!(
                "{} split tags for {} nodes",
                splits.len(),
                n
            )));
        }
        if num_classes == 0 {
            return Err(Error::Format("num_classes must be positive".into()));
        }
        if let Some((v, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Format(format!(
                "label {y} of node {v} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }

        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Format(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u != v {
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut targets = Vec::new();
        for nbrs in &adj {
            targets.extend(nbrs.iter().copied());
            offsets.push(targets.len());
        }

        Ok(Self {
            features,
            labels,
            num_classes,
            offsets,
            targets,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Sorted neighbor list of `v`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes()).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    /// Number of directed CSR entries (twice the undirected edge count).
    pub fn csr_entries(&self) -> usize {
        self.targets.len()
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Undirected edges as `(u, v)` with `u < v`, in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .filter(move |&&v| v > u)
                .map(move |&v| (u, v))
        })
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn nodes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&v| self.splits[v] == split)
            .collect()
    }

    /// Same nodes, features and labels with a different edge set.
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            edges,
            self.splits.clone(),
        )
    }

    pub fn to_file_format(&self) -> GraphFile {
        GraphFile {
            n: self.num_nodes(),
            d0: self.feature_dim(),
            num_classes: self.num_classes,
            features: self.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            labels: self.labels.clone(),
            edges: self.edges().map(|(u, v)| [u, v]).collect(),
            splits: self.splits.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file_format())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// On-disk JSON graph. The edge list may be directed; loading symmetrizes it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub n: usize,
    pub d0: usize,
    pub num_classes: usize,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    pub splits: Vec<Split>,
}

impl GraphFile {
    pub fn into_graph(self) -> Result<Graph> {
        if self.features.len() != self.n {
            return Err(Error::Format(format!(
                "{} feature rows for n = {}",
                self.features.len(),
                self.n
            )));
        }
        if let Some((v, row)) = self
            .features
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.d0)
        {
            return Err(Error::Format(format!(
                "feature row {v} has length {}, expected d0 = {}",
                row.len(),
                self.d0
            )));
        }
        let flat: Vec<f64> = self.features.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((self.n, self.d0), flat)
            .map_err(|e| Error::Format(e.to_string()))?;
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(features, self.labels, self.num_classes, &edges, self.splits)
    }
}

/// Parses a JSON graph document.
pub fn parse_graph(bytes: &[u8]) -> Result<Graph> {
    let file: GraphFile = serde_json::from_slice(bytes)?;
    file.into_graph()
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&bytes).map_err(|e| match e {
        Error::Json(j) => Error::Format(format!("{}: {j}", path.display())),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SbmParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-node noise added to the class mean.
    pub feature_noise: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SbmParams {
    fn default() -> Self {
        Self {
            num_nodes: 200,
            num_classes: 4,
            p_in: 0.05,
            p_out: 0.005,
            feature_dim: 16,
            feature_noise: 1.0,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

impl SbmParams {
    pub fn new(num_nodes: usize, num_classes: usize, p_in: f64, p_out: f64, d0: usize) -> Self {
        Self {
            num_nodes,
            num_classes,
            p_in,
            p_out,
            feature_dim: d0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_in) || !prob(self.p_out) || self.p_out > self.p_in {
            return Err(Error::param(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in = {}, p_out = {}",
                self.p_in, self.p_out
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::param("num_classes must be at least 2"));
        }
        if self.num_nodes == 0 {
            return Err(Error::param("num_nodes must be positive"));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::param("feature_noise must be finite and non-negative"));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return Err(Error::param(format!(
                "split fractions train = {t}, val = {v} do not fit in (0, 1]"
            )));
        }
        Ok(())
    }
}

/// Stochastic block model with `num_classes` equal blocks. Node `v` belongs
/// to class `v % num_classes`; its features are the class mean plus
/// isotropic Gaussian noise.
pub fn generate_sbm(params: &SbmParams, seed: u64) -> Result<Graph> {
    params.validate()?;
    let n = params.num_nodes;
    let c = params.num_classes;
    let d0 = params.feature_dim;
    let mut rng = rng_for(seed, &[tag::GRAPH]);

    let labels: Vec<usize> = (0..n).map(|v| v % c).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let means = Array2::from_shape_fn((c, d0), |_| rng.sample::<f64, _>(StandardNormal));
    let features = Array2::from_shape_fn((n, d0), |(v, j)| {
        means[[labels[v], j]] + params.feature_noise * rng.sample::<f64, _>(StandardNormal)
    });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = ((n as f64) * params.train_fraction).round() as usize;
    let n_val = ((n as f64) * params.val_fraction).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (i, &v) in order.iter().enumerate() {
        splits[v] = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    Graph::new(features, labels, c, &edges, splits)
}

/// Node-to-client assignment with the derived per-client views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    local_nodes: Vec<Vec<usize>>,
    train_nodes: Vec<Vec<usize>>,
    halo: Vec<Vec<usize>>,
    cross_edges: Vec<(usize, usize)>,
}

impl Partition {
    pub fn from_assignment(g: &Graph, assignment: Vec<usize>, num_clients: usize) -> Result<Self> {
        if assignment.len() != g.num_nodes() {
            return Err(Error::param(format!(
                "assignment covers {} of {} nodes",
                assignment.len(),
                g.num_nodes()
            )));
        }
        if num_clients == 0 {
            return Err(Error::param("need at least one client"));
        }
        if let Some(&k) = assignment.iter().find(|&&k| k >= num_clients) {
            return Err(Error::param(format!("client {k} out of range")));
        }
        let mut local_nodes = vec![Vec::new(); num_clients];
        let mut train_nodes = vec![Vec::new(); num_clients];
        for (v, &k) in assignment.iter().enumerate() {
            local_nodes[k].push(v);
            if g.splits()[v] == Split::Train {
                train_nodes[k].push(v);
            }
        }
        let mut halo_sets = vec![BTreeSet::new(); num_clients];
        let mut cross_edges = Vec::new();
        for u in 0..g.num_nodes() {
            for &v in g.neighbors(u) {
                if assignment[u] != assignment[v] {
                    halo_sets[assignment[u]].insert(v);
                    if u < v {
                        cross_edges.push((u, v));
                    }
                }
            }
        }
        Ok(Self {
            assignment,
            local_nodes,
            train_nodes,
            halo: halo_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            cross_edges,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.local_nodes.len()
    }

    pub fn client_of(&self, v: usize) -> usize {
        self.assignment[v]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// All nodes held by client `k`, sorted.
    pub fn local_nodes(&self, k: usize) -> &[usize] {
        &self.local_nodes[k]
    }

    /// Training nodes held by client `k`, sorted.
    pub fn train_nodes(&self, k: usize) -> &[usize] {
        &self.train_nodes[k]
    }

    /// `n_k`: training-node count of client `k`.
    pub fn n_train(&self, k: usize) -> usize {
        self.train_nodes[k].len()
    }

    /// Nodes owned by other clients that neighbor client `k`, sorted.
    pub fn cross_neighbors(&self, k: usize) -> &[usize] {
        &self.halo[k]
    }

    /// Undirected edges `(u, v)`, `u < v`, whose endpoints lie on different clients.
    pub fn cross_edges(&self) -> &[(usize, usize)] {
        &self.cross_edges
    }

    pub fn is_local(&self, k: usize, v: usize) -> bool {
        self.assignment[v] == k
    }
}

fn deal_round_robin(nodes: &mut [usize], k: usize, assignment: &mut [usize], rng: &mut impl Rng) {
    nodes.shuffle(rng);
    for (i, &v) in nodes.iter().enumerate() {
        assignment[v] = i % k;
    }
}

/// Uniform random partition: shuffled training nodes are dealt to clients
/// round-robin (so client train counts differ by at most one), and the
/// remaining nodes likewise.
pub fn partition_iid(g: &Graph, num_clients: usize, seed: u64) -> Result<Partition> {
    let mut train = g.nodes_in(Split::Train);
    if num_clients == 0 {
        return Err(Error::param("need at least one client"));
    }
    if num_clients > train.len() {
        return Err(Error::param(format!(
            "{num_clients} clients but only {} training nodes",
            train.len()
        )));
    }
    let mut rng = rng_for(seed, &[tag::PARTITION]);
    let mut assignment = vec![0; g.num_nodes()];
    deal_round_robin(&mut train, num_clients, &mut assignment, &mut rng);
    let mut rest: Vec<usize> = (0..g.num_nodes())
        .filter(|&v| g.splits()[v] != Split::Train)
        .collect();
    deal_round_robin(&mut rest, num_clients, &mut assignment, &mut rng);
    Partition::from_assignment(g, assignment, num_clients)
}

/// Draws a point on the probability simplex from a symmetric Dirichlet via
/// normalized Gamma variates.
fn dirichlet(k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::param(e.to_string()))?;
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        Ok(draws.into_iter().map(|x| x / total).collect())
    } else {
        // every variate underflowed (tiny alpha); the limit is uniform
        Ok(vec![1.0 / k as f64; k])
    }
}

/// Splits `count` items into integer shares proportional to `props`
/// with the largest-remainder method. Ties go to the lower index.
pub fn largest_remainder(count: usize, props: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * count as f64).collect();
    let mut shares: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(count.saturating_sub(assigned)) {
        shares[k] += 1;
    }
    shares
}

/// Label-skewed partition: for each class a proportion vector is drawn from
/// `Dirichlet_K(alpha)` and that class's nodes are allocated to clients in
/// those proportions. Training nodes and held-out nodes of a class are
/// allocated separately with the same proportions.
pub fn partition_dirichlet(
    g: &Graph,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be positive, got {alpha}")));
    }
    if num_clients == 0 {
        return Err(Error::param("need at least one client"));
    }
    let mut rng = rng_for(seed, &[tag::PARTITION]);
    let mut assignment = vec![0; g.num_nodes()];
    for class in 0..g.num_classes() {
        let props = dirichlet(num_clients, alpha, &mut rng)?;
        for train_group in [true, false] {
            let mut nodes: Vec<usize> = (0..g.num_nodes())
                .filter(|&v| {
                    g.labels()[v] == class && (g.splits()[v] == Split::Train) == train_group
                })
                .collect();
            nodes.shuffle(&mut rng);
            let shares = largest_remainder(nodes.len(), &props);
            let mut it = nodes.into_iter();
            for (k, &share) in shares.iter().enumerate() {
                for v in it.by_ref().take(share) {
                    assignment[v] = k;
                }
            }
        }
    }
    Partition::from_assignment(g, assignment, num_clients)
}

/// Keeps each within-client edge independently with probability
/// `keep_ratio`; cross-client edges are untouched.
pub fn downsample_local_edges(
    g: &Graph,
    p: &Partition,
    keep_ratio: f64,
    seed: u64,
) -> Result<Graph> {
    downsample_edges(g, p, keep_ratio, false, seed)
}

/// Edge downsampling; `include_cross` also thins cross-client edges.
pub fn downsample_edges(
    g: &Graph,
    p: &Partition,
    keep_ratio: f64,
    include_cross: bool,
    seed: u64,
) -> Result<Graph> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::param(format!(
            "keep_ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    let mut rng = rng_for(seed, &[tag::DOWNSAMPLE]);
    let kept: Vec<(usize, usize)> = g
        .edges()
        .filter(|&(u, v)| {
            let eligible = include_cross || p.client_of(u) == p.client_of(v);
            !eligible || rng.random::<f64>() < keep_ratio
        })
        .collect();
    g.with_edges(&kept)
}

/// Drops edges, visited in a seeded random order, until no node has more
/// than `max_degree` neighbors. An edge is kept iff both endpoints still
/// have room when it is visited.
pub fn cap_degree(g: &Graph, max_degree: usize, seed: u64) -> Result<Graph> {
    let mut edges: Vec<(usize, usize)> = g.edges().collect();
    edges.shuffle(&mut rng_for(seed, &[tag::DOWNSAMPLE, max_degree as u64]));
    let mut degree = vec![0usize; g.num_nodes()];
    let kept: Vec<(usize, usize)> = edges
        .into_iter()
        .filter(|&(u, v)| {
            let room = degree[u] < max_degree && degree[v] < max_degree;
            if room {
                degree[u] += 1;
                degree[v] += 1;
            }
            room
        })
        .collect();
    g.with_edges(&kept)
}
