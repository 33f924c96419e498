//! Chain-classification study and benchmark inputs.
//!
//! Provides the synthetic chain dataset, node-wise F1 metrics, first-order
//! message-passing baselines, a linear message-passing reference, the
//! training loop shared by every chain model, and the random attachment
//! graphs fed to the scaling benchmark.

use crate::attention::{AttnKernel, FeatureMap};
use crate::autodiff::traced::{self, LossKind};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{build_model, Activation, LayerDesc, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::linear::EquivariantLinear;
use crate::mat::Mat;
use crate::partitions::ClassSet;
use crate::rng::{rng_from_seed, split_seed};
use crate::tensor::{add_self_loops, project_edges, EdgeSet, SparseTensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

/// Hidden width shared by every chain model.
const CHAIN_WIDTH: usize = 16;

/// Random-feature count used by the kernelized chain model.
pub const PERFORMER_QK_DIM: usize = 64;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// One labeled chain graph encoded as an order-2 sparse tensor.
///
/// Channels 0 and 1 hold the chain label as a one-hot vector on the
/// diagonal entry of the labeled terminal node; channel 2 is 1 on every
/// stored entry (adjacency in both directions plus self-loops).
#[derive(Clone, Debug)]
pub struct ChainGraph {
    pub tensor: SparseTensor,
    /// Per-node target; every node inherits the chain label.
    pub labels: Vec<usize>,
    /// Directed adjacency without self-loops, as (source, target).
    pub pairs: Vec<(usize, usize)>,
    pub label: usize,
}

impl ChainGraph {
    pub fn n(&self) -> usize {
        self.tensor.n()
    }

    /// Node features for first-order baselines: the one-hot label columns
    /// read off the diagonal entries.
    pub fn node_features(&self) -> Mat {
        let n = self.n();
        let mut x = Mat::zeros(n, 2);
        for (r, edge) in self.tensor.edges().iter().enumerate() {
            if edge[0] == edge[1] {
                let row = self.tensor.row(r);
                x.set(edge[0], 0, row[0]);
                x.set(edge[0], 1, row[1]);
            }
        }
        x
    }
}

/// Builds a path graph on `n` nodes with the label one-hot placed on the
/// diagonal entry of node 0.
pub fn chain_graph(n: usize, label: usize) -> Result<ChainGraph> {
    if n < 2 {
        return Err(Error::Shape("a chain needs at least two nodes".into()));
    }
    if label > 1 {
        return Err(Error::Shape("chain labels are binary".into()));
    }
    let mut pairs = Vec::with_capacity(2 * (n - 1));
    let mut tuples = Vec::with_capacity(2 * (n - 1));
    for v in 0..n - 1 {
        pairs.push((v, v + 1));
        pairs.push((v + 1, v));
        tuples.push(vec![v, v + 1]);
        tuples.push(vec![v + 1, v]);
    }
    let edges = add_self_loops(&EdgeSet::from_tuples(n, 2, &tuples)?)?;
    let mut tensor = SparseTensor::zeros(edges, 3);
    for r in 0..tensor.len() {
        tensor.values_mut().set(r, 2, 1.0);
    }
    let terminal = tensor
        .edges()
        .position_of(&[0, 0])
        .ok_or_else(|| Error::Shape("missing terminal self-loop".into()))?;
    tensor.values_mut().set(terminal, label, 1.0);
    Ok(ChainGraph {
        tensor,
        labels: vec![label; n],
        pairs,
        label,
    })
}

/// The chain study corpus: 40 training chains of 20 nodes and 20 test
/// chains of 200 nodes, labels drawn uniformly.
#[derive(Clone, Debug)]
pub struct ChainDataset {
    pub train: Vec<ChainGraph>,
    pub test: Vec<ChainGraph>,
}

pub fn gen_chains(seed: u64) -> Result<ChainDataset> {
    let mut rng = rng_from_seed(split_seed(seed, "chains"));
    let mut train = Vec::with_capacity(40);
    for _ in 0..40 {
        train.push(chain_graph(20, rng.gen_range(0..2))?);
    }
    let mut test = Vec::with_capacity(20);
    for _ in 0..20 {
        test.push(chain_graph(200, rng.gen_range(0..2))?);
    }
    Ok(ChainDataset { train, test })
}

/// Row-wise argmax with ties broken toward the lower class index.
pub fn argmax_rows(logits: &Mat) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let mut best = 0;
            let mut best_v = logits.get(r, 0);
            for c in 1..logits.cols() {
                let v = logits.get(r, c);
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// Micro and macro F1 over predicted class indices.
///
/// Micro counts true/false positives globally (for single-label outputs
/// this equals accuracy); macro averages per-class F1 uniformly over all
/// classes mentioned by either side, scoring absent denominators as 0.
pub fn f1_scores(pred: &[usize], truth: &[usize]) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::Shape("f1 needs at least one prediction".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let classes = pred.iter().chain(truth.iter()).max().unwrap() + 1;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let (tps, fps, fns) = (
        tp.iter().sum::<usize>() as f64,
        fp.iter().sum::<usize>() as f64,
        fn_.iter().sum::<usize>() as f64,
    );
    let micro = if 2.0 * tps + fps + fns == 0.0 {
        0.0
    } else {
        2.0 * tps / (2.0 * tps + fps + fns)
    };
    let mut macro_sum = 0.0;
    for c in 0..classes {
        let (tpc, fpc, fnc) = (tp[c] as f64, fp[c] as f64, fn_[c] as f64);
        let prec = if tpc + fpc == 0.0 { 0.0 } else { tpc / (tpc + fpc) };
        let rec = if tpc + fnc == 0.0 { 0.0 } else { tpc / (tpc + fnc) };
        macro_sum += if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        };
    }
    Ok((micro, macro_sum / classes as f64))
}

/// Optimizer and schedule settings for the chain study.
#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 16,
            epochs: 100,
            loss: LossKind::Bce,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Shape("learning rate must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Shape("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A node classifier trainable on chain graphs.
///
/// `traced_loss` records one forward pass plus the classification loss on
/// a fresh tape, registering parameters under the same names that
/// `named_params` reports. It takes `&mut self` because batch-normalized
/// baselines update running statistics during training passes. `logits` is
/// the evaluation-mode forward.
pub trait ChainNet {
    fn name(&self) -> &'static str;
    fn named_params(&self) -> Vec<(String, &Mat)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)>;
    fn traced_loss(&mut self, tape: &mut Tape, g: &ChainGraph, kind: LossKind) -> Result<Var>;
    fn logits(&self, g: &ChainGraph) -> Result<Mat>;
}

/// Second-order encoder stack wrapped as a chain classifier.
pub struct EncoderChainNet {
    pub model: Model,
    name: &'static str,
}

impl EncoderChainNet {
    pub fn new(model: Model, name: &'static str) -> Self {
        EncoderChainNet { model, name }
    }
}

impl ChainNet for EncoderChainNet {
    fn name(&self) -> &'static str {
        self.name
    }

    fn named_params(&self) -> Vec<(String, &Mat)> {
        self.model.named_params()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        self.model.named_params_mut()
    }

    fn traced_loss(&mut self, tape: &mut Tape, g: &ChainGraph, kind: LossKind) -> Result<Var> {
        traced::model_loss(tape, &self.model, &g.tensor, &g.labels, kind).map(|(loss, _)| loss)
    }

    fn logits(&self, g: &ChainGraph) -> Result<Mat> {
        let out = self.model.forward_sparse(&g.tensor, false, 0)?;
        if out.k() != 1 || out.len() != g.n() {
            return Err(Error::Shape("chain model must emit one row per node".into()));
        }
        // Singleton edges are sorted, so row r belongs to node r.
        Ok(out.values().clone())
    }
}

fn chain_spec(kernel: AttnKernel) -> Result<ModelSpec> {
    Ok(ModelSpec {
        d_in: 3,
        layers: vec![
            LayerDesc::full(2, 2, CHAIN_WIDTH, CHAIN_WIDTH, 1, kernel.clone())?,
            LayerDesc::full(2, 1, CHAIN_WIDTH, CHAIN_WIDTH, 1, kernel)?,
        ],
        final_norm: true,
        projection: Some(2),
        activation: Activation::Gelu,
        dropout: 0.0,
    })
}

/// Two-layer second-order encoder with softmax attention.
pub fn ours_s(seed: u64) -> Result<EncoderChainNet> {
    let model = build_model(&chain_spec(AttnKernel::Softmax)?, seed)?;
    Ok(EncoderChainNet::new(model, "ours-s"))
}

/// The same stack with random-feature kernel attention.
pub fn ours_s_phi(seed: u64, d_k: usize) -> Result<EncoderChainNet> {
    let kernel = AttnKernel::Feature(FeatureMap::Performer {
        d_k,
        seed: split_seed(seed, "kernel"),
    });
    let model = build_model(&chain_spec(kernel)?, seed)?;
    Ok(EncoderChainNet::new(model, "ours-s-phi"))
}

/// Softmax stack with the globally pooling attention classes removed.
pub fn ours_ablated(seed: u64) -> Result<EncoderChainNet> {
    let base = ours_s(seed)?;
    Ok(EncoderChainNet::new(ablate_global(&base.model)?, "ours-ablated"))
}

/// Drops attention classes that pool globally.
///
/// A class is kept only when every block of its partition contains at
/// least one output position. A block living entirely on input positions
/// leaves those key indices unconstrained by the query, so the class sums
/// over the whole edge set; removing such classes removes the model's
/// global pooling paths. Weights of retained classes are preserved.
pub fn ablate_global(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for (t, layer) in out.layers.iter_mut().enumerate() {
        let k = layer.attn.class_set().k;
        layer.attn.retain_classes(|class| {
            class
                .partition()
                .blocks()
                .iter()
                .all(|block| block.iter().any(|&pos| pos >= k))
        })?;
        out.spec.layers[t].classes = layer.attn.class_set().descriptor();
    }
    Ok(out)
}

/// Permutation-equivariant linear stack: order-preserving layer, ReLU,
/// node-pooling layer, then a per-node linear head. No attention.
pub struct MlpPiNet {
    pub l1: EquivariantLinear,
    pub l2: EquivariantLinear,
    pub head_w: Mat,
    pub head_b: Mat,
}

pub fn mlp_pi(seed: u64) -> Result<MlpPiNet> {
    let mut rng = rng_from_seed(split_seed(seed, "mlp-pi"));
    let mut l1 = EquivariantLinear::new(ClassSet::full(2, 2)?, 3, CHAIN_WIDTH)?;
    l1.init_fan_scaled(&mut rng);
    let mut l2 = EquivariantLinear::new(ClassSet::full(2, 1)?, CHAIN_WIDTH, CHAIN_WIDTH)?;
    l2.init_fan_scaled(&mut rng);
    Ok(MlpPiNet {
        l1,
        l2,
        head_w: Mat::fan_scaled_uniform(CHAIN_WIDTH, 2, &mut rng),
        head_b: Mat::zeros(1, 2),
    })
}

impl ChainNet for MlpPiNet {
    fn name(&self) -> &'static str {
        "mlp-pi"
    }

    fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = self.l1.named_params("l1");
        out.extend(self.l2.named_params("l2"));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = self.l1.named_params_mut("l1");
        out.extend(self.l2.named_params_mut("l2"));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    fn traced_loss(&mut self, tape: &mut Tape, g: &ChainGraph, kind: LossKind) -> Result<Var> {
        let ein = g.tensor.edges();
        let nodes = project_edges(ein, 1)?;
        let x = tape.constant(g.tensor.values().clone());
        let h1 = traced::sparse_linear(tape, &self.l1, "l1", x, ein, ein)?;
        let r1 = tape.activation(h1, Activation::Relu);
        let h2 = traced::sparse_linear(tape, &self.l2, "l2", r1, ein, &nodes)?;
        let w = tape.param("head.w", self.head_w.clone());
        let b = tape.param("head.b", self.head_b.clone());
        let z = tape.matmul(h2, w);
        let logits = tape.add_row_broadcast(z, b);
        traced::classification_loss(tape, logits, &g.labels, kind)
    }

    fn logits(&self, g: &ChainGraph) -> Result<Mat> {
        let nodes = project_edges(g.tensor.edges(), 1)?;
        let h1 = self.l1.forward_sparse(&g.tensor, g.tensor.edges())?;
        let mut v = h1.values().clone();
        Activation::Relu.apply(&mut v);
        let h1 = SparseTensor::from_values(h1.edges().clone(), v)?;
        let h2 = self.l2.forward_sparse(&h1, &nodes)?;
        let mut z = h2.values().matmul(&self.head_w);
        add_row_inplace(&mut z, &self.head_b);
        Ok(z)
    }
}

fn add_row_inplace(m: &mut Mat, row: &Mat) {
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            m.set(r, c, m.get(r, c) + row.get(0, c));
        }
    }
}

/// Dense adjacency with self-loops from a directed pair list.
fn adjacency_with_loops(n: usize, pairs: &[(usize, usize)]) -> Result<Mat> {
    let mut a = Mat::zeros(n, n);
    for &(u, v) in pairs {
        if u >= n || v >= n {
            return Err(Error::IndexOutOfRange(u.max(v), n));
        }
        a.set(u, v, 1.0);
    }
    for v in 0..n {
        a.set(v, v, 1.0);
    }
    Ok(a)
}

/// Symmetric-normalized adjacency D^{-1/2} (A + I) D^{-1/2}.
fn sym_norm_adjacency(n: usize, pairs: &[(usize, usize)]) -> Result<Mat> {
    let mut a = adjacency_with_loops(n, pairs)?;
    let deg: Vec<f64> = (0..n).map(|r| (0..n).map(|c| a.get(r, c)).sum()).collect();
    for r in 0..n {
        for c in 0..n {
            let v = a.get(r, c);
            if v != 0.0 {
                a.set(r, c, v / (deg[r] * deg[c]).sqrt());
            }
        }
    }
    Ok(a)
}

/// Two-layer graph convolution baseline with a linear output head.
///
/// Each convolution multiplies by the symmetric-normalized adjacency
/// (self-loops included) and a weight matrix plus bias; one ReLU sits
/// between the convolutions.
pub struct GcnNet {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
}

pub fn gcn(seed: u64) -> Result<GcnNet> {
    let mut rng = rng_from_seed(split_seed(seed, "gcn"));
    Ok(GcnNet {
        w1: Mat::fan_scaled_uniform(2, CHAIN_WIDTH, &mut rng),
        b1: Mat::zeros(1, CHAIN_WIDTH),
        w2: Mat::fan_scaled_uniform(CHAIN_WIDTH, CHAIN_WIDTH, &mut rng),
        b2: Mat::zeros(1, CHAIN_WIDTH),
        head_w: Mat::fan_scaled_uniform(CHAIN_WIDTH, 2, &mut rng),
        head_b: Mat::zeros(1, 2),
    })
}

impl ChainNet for GcnNet {
    fn name(&self) -> &'static str {
        "gcn"
    }

    fn named_params(&self) -> Vec<(String, &Mat)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
            ("head.w".into(), &mut self.head_w),
            ("head.b".into(), &mut self.head_b),
        ]
    }

    fn traced_loss(&mut self, tape: &mut Tape, g: &ChainGraph, kind: LossKind) -> Result<Var> {
        let a = tape.constant(sym_norm_adjacency(g.n(), &g.pairs)?);
        let x = tape.constant(g.node_features());
        let w1 = tape.param("w1", self.w1.clone());
        let b1 = tape.param("b1", self.b1.clone());
        let w2 = tape.param("w2", self.w2.clone());
        let b2 = tape.param("b2", self.b2.clone());
        let hw = tape.param("head.w", self.head_w.clone());
        let hb = tape.param("head.b", self.head_b.clone());
        let h = tape.matmul(a, x);
        let h = tape.matmul(h, w1);
        let h = tape.add_row_broadcast(h, b1);
        let h = tape.activation(h, Activation::Relu);
        let h = tape.matmul(a, h);
        let h = tape.matmul(h, w2);
        let h = tape.add_row_broadcast(h, b2);
        let z = tape.matmul(h, hw);
        let logits = tape.add_row_broadcast(z, hb);
        traced::classification_loss(tape, logits, &g.labels, kind)
    }

    fn logits(&self, g: &ChainGraph) -> Result<Mat> {
        let a = sym_norm_adjacency(g.n(), &g.pairs)?;
        let mut h = a.matmul(&g.node_features()).matmul(&self.w1);
        add_row_inplace(&mut h, &self.b1);
        Activation::Relu.apply(&mut h);
        let mut h = a.matmul(&h).matmul(&self.w2);
        add_row_inplace(&mut h, &self.b2);
        let mut z = h.matmul(&self.head_w);
        add_row_inplace(&mut z, &self.head_b);
        Ok(z)
    }
}

/// One sum-aggregation convolution: MLP((A + I) x) where the MLP is
/// linear, ReLU, linear, ReLU, batch norm.
pub struct GinConv {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub gamma: Mat,
    pub beta: Mat,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl GinConv {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        GinConv {
            w1: Mat::fan_scaled_uniform(d_in, d_out, rng),
            b1: Mat::zeros(1, d_out),
            w2: Mat::fan_scaled_uniform(d_out, d_out, rng),
            b2: Mat::zeros(1, d_out),
            gamma: Mat::from_vec(1, d_out, vec![1.0; d_out]),
            beta: Mat::zeros(1, d_out),
            running_mean: vec![0.0; d_out],
            running_var: vec![1.0; d_out],
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Mat)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
        ]
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        vec![
            (format!("{prefix}.w1"), &mut self.w1),
            (format!("{prefix}.b1"), &mut self.b1),
            (format!("{prefix}.w2"), &mut self.w2),
            (format!("{prefix}.b2"), &mut self.b2),
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
        ]
    }

    /// Training pass: normalizes with batch statistics and folds them into
    /// the running estimates (momentum 0.1, unbiased variance).
    fn traced(&mut self, tape: &mut Tape, adj: Var, x: Var, prefix: &str) -> Var {
        let w1 = tape.param(&format!("{prefix}.w1"), self.w1.clone());
        let b1 = tape.param(&format!("{prefix}.b1"), self.b1.clone());
        let w2 = tape.param(&format!("{prefix}.w2"), self.w2.clone());
        let b2 = tape.param(&format!("{prefix}.b2"), self.b2.clone());
        let gamma = tape.param(&format!("{prefix}.gamma"), self.gamma.clone());
        let beta = tape.param(&format!("{prefix}.beta"), self.beta.clone());
        let agg = tape.matmul(adj, x);
        let h = tape.matmul(agg, w1);
        let h = tape.add_row_broadcast(h, b1);
        let h = tape.activation(h, Activation::Relu);
        let h = tape.matmul(h, w2);
        let h = tape.add_row_broadcast(h, b2);
        let h = tape.activation(h, Activation::Relu);
        let rows = tape.value(h).rows() as f64;
        let out = tape.batch_norm_cols(h, gamma, beta, BN_EPS);
        let (mean, var) = tape.bn_stats(out).expect("batch norm node");
        let bessel = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * bessel;
        }
        out
    }

    /// Evaluation pass: normalizes with the running estimates.
    fn eval(&self, adj: &Mat, x: &Mat) -> Mat {
        let mut h = adj.matmul(x).matmul(&self.w1);
        add_row_inplace(&mut h, &self.b1);
        Activation::Relu.apply(&mut h);
        let mut h = h.matmul(&self.w2);
        add_row_inplace(&mut h, &self.b2);
        Activation::Relu.apply(&mut h);
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                let norm = (h.get(r, c) - self.running_mean[c])
                    / (self.running_var[c] + BN_EPS).sqrt();
                h.set(r, c, norm * self.gamma.get(0, c) + self.beta.get(0, c));
            }
        }
        h
    }
}

/// Two-layer sum-aggregation baseline with a linear output head.
pub struct GinNet {
    pub conv1: GinConv,
    pub conv2: GinConv,
    pub head_w: Mat,
    pub head_b: Mat,
}

pub fn gin0(seed: u64) -> Result<GinNet> {
    let mut rng = rng_from_seed(split_seed(seed, "gin0"));
    Ok(GinNet {
        conv1: GinConv::new(2, CHAIN_WIDTH, &mut rng),
        conv2: GinConv::new(CHAIN_WIDTH, CHAIN_WIDTH, &mut rng),
        head_w: Mat::fan_scaled_uniform(CHAIN_WIDTH, 2, &mut rng),
        head_b: Mat::zeros(1, 2),
    })
}

impl ChainNet for GinNet {
    fn name(&self) -> &'static str {
        "gin0"
    }

    fn named_params(&self) -> Vec<(String, &Mat)> {
        let mut out = self.conv1.named_params("conv1");
        out.extend(self.conv2.named_params("conv2"));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = self.conv1.named_params_mut("conv1");
        out.extend(self.conv2.named_params_mut("conv2"));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    fn traced_loss(&mut self, tape: &mut Tape, g: &ChainGraph, kind: LossKind) -> Result<Var> {
        let a = tape.constant(adjacency_with_loops(g.n(), &g.pairs)?);
        let x = tape.constant(g.node_features());
        let h1 = self.conv1.traced(tape, a, x, "conv1");
        let r1 = tape.activation(h1, Activation::Relu);
        let h2 = self.conv2.traced(tape, a, r1, "conv2");
        let hw = tape.param("head.w", self.head_w.clone());
        let hb = tape.param("head.b", self.head_b.clone());
        let z = tape.matmul(h2, hw);
        let logits = tape.add_row_broadcast(z, hb);
        traced::classification_loss(tape, logits, &g.labels, kind)
    }

    fn logits(&self, g: &ChainGraph) -> Result<Mat> {
        let a = adjacency_with_loops(g.n(), &g.pairs)?;
        let mut h = self.conv1.eval(&a, &g.node_features());
        Activation::Relu.apply(&mut h);
        let h = self.conv2.eval(&a, &h);
        let mut z = h.matmul(&self.head_w);
        add_row_inplace(&mut z, &self.head_b);
        Ok(z)
    }
}

/// Builds a chain classifier by its command-line identifier.
pub fn build_chain_net(id: &str, seed: u64) -> Result<Box<dyn ChainNet>> {
    Ok(match id {
        "ours-s" => Box::new(ours_s(seed)?),
        "ours-s-phi" => Box::new(ours_s_phi(seed, PERFORMER_QK_DIM)?),
        "ours-ablated" => Box::new(ours_ablated(seed)?),
        "mlp-pi" => Box::new(mlp_pi(seed)?),
        "gcn" => Box::new(gcn(seed)?),
        "gin0" => Box::new(gin0(seed)?),
        other => return Err(Error::Unsupported(format!("unknown model id {other}"))),
    })
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_micro: f64,
    pub test_micro: f64,
    pub test_macro: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("training ran at least one epoch")
    }
}

/// Pooled node-wise (micro, macro) F1 of a model over a set of graphs.
pub fn evaluate(net: &dyn ChainNet, graphs: &[ChainGraph]) -> Result<(f64, f64)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for g in graphs {
        pred.extend(argmax_rows(&net.logits(g)?));
        truth.extend_from_slice(&g.labels);
    }
    f1_scores(&pred, &truth)
}

/// Trains a chain classifier with Adam and gradient accumulation.
///
/// Each batch accumulates per-graph gradients scaled by 1/|batch| into a
/// parameter store, applies one Adam step, and writes the updated values
/// back into the model. Shuffling, batching, and every forward are driven
/// by `cfg.seed`, so reruns are bit-identical.
pub fn train_model(
    net: &mut dyn ChainNet,
    data: &ChainDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Shape("training needs non-empty splits".into()));
    }
    let mut store = ParamStore::from_named(&net.named_params());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = rng_from_seed(split_seed(cfg.seed, "epoch-shuffle"));
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            store.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &gi in chunk {
                let g = &data.train[gi];
                let mut tape = Tape::new();
                let loss = net.traced_loss(&mut tape, g, cfg.loss)?;
                let value = tape.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, graph {gi}"
                    )));
                }
                loss_sum += value;
                tape.backward(loss)?;
                for (name, grad) in tape.param_grads() {
                    store.accumulate(name, grad, scale)?;
                }
            }
            store.adam_step(cfg.lr, 0.9, 0.999, 1e-8)?;
            store.write_to(net.named_params_mut())?;
        }
        let (train_micro, _) = evaluate(&*net, &data.train)?;
        let (test_micro, test_macro) = evaluate(&*net, &data.test)?;
        rows.push(EpochRow {
            epoch,
            loss: loss_sum / data.train.len() as f64,
            train_micro,
            test_micro,
            test_macro,
        });
    }
    Ok(TrainReport { rows })
}

/// Linear message-passing reference: one aggregation round with message
/// map `wm` on (X_j, X_i, E_ij) and update map `wu` on (X_j, M_j).
pub struct MpnnOracle {
    pub d_v: usize,
    pub d_e: usize,
    pub d_m: usize,
    pub d: usize,
    pub wm: Mat,
    pub wu: Mat,
}

impl MpnnOracle {
    pub fn random(d_v: usize, d_e: usize, d_m: usize, d: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(split_seed(seed, "mpnn-oracle"));
        MpnnOracle {
            d_v,
            d_e,
            d_m,
            d,
            wm: Mat::fan_scaled_uniform(2 * d_v + d_e, d_m, &mut rng),
            wu: Mat::fan_scaled_uniform(d_v + d_m, d, &mut rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wm.rows() != 2 * self.d_v + self.d_e || self.wm.cols() != self.d_m {
            return Err(Error::Shape("message map has wrong shape".into()));
        }
        if self.wu.rows() != self.d_v + self.d_m || self.wu.cols() != self.d {
            return Err(Error::Shape("update map has wrong shape".into()));
        }
        Ok(())
    }
}

/// H_j = U(X_j, sum_{i in N(j)} M(X_j, X_i, E_ij)), written as the two
/// defining equations.
pub fn mpnn_oracle_forward(
    oracle: &MpnnOracle,
    x: &Mat,
    efeat: &dyn Fn(usize, usize) -> Vec<f64>,
    pairs: &[(usize, usize)],
) -> Result<Mat> {
    oracle.validate()?;
    if x.cols() != oracle.d_v {
        return Err(Error::Shape("node features disagree with d_v".into()));
    }
    let n = x.rows();
    if pairs.iter().any(|&(u, v)| u >= n || v >= n) {
        return Err(Error::IndexOutOfRange(n, n));
    }
    let mut out = Mat::zeros(n, oracle.d);
    for j in 0..n {
        let mut msg = vec![0.0; oracle.d_m];
        for &(src, dst) in pairs {
            if dst != j {
                continue;
            }
            let mut packed = x.row(j).to_vec();
            packed.extend_from_slice(x.row(src));
            packed.extend(efeat(src, dst));
            for (t, slot) in msg.iter_mut().enumerate() {
                for (r, &pv) in packed.iter().enumerate() {
                    *slot += pv * oracle.wm.get(r, t);
                }
            }
        }
        let mut state = x.row(j).to_vec();
        state.extend_from_slice(&msg);
        for c in 0..oracle.d {
            let mut acc = 0.0;
            for (r, &sv) in state.iter().enumerate() {
                acc += sv * oracle.wu.get(r, c);
            }
            out.set(j, c, acc);
        }
    }
    Ok(out)
}

/// Directed entry count of [ba_random_graph] for given n and attach.
pub fn ba_edge_count(n: usize, attach: usize) -> usize {
    (1..n).map(|t| 2 * t.min(attach)).sum()
}

/// Uniform-attachment random graph: node t links to min(t, attach)
/// distinct earlier nodes chosen uniformly; both directions are stored,
/// no self-loops.
pub fn ba_random_graph(n: usize, attach: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::Shape("attachment graph needs at least one node".into()));
    }
    if attach == 0 || attach >= n {
        return Err(Error::Shape(format!(
            "attachment count must satisfy 0 < attach < n (got {attach} for n = {n})"
        )));
    }
    let mut rng = rng_from_seed(split_seed(seed, "attach-graph"));
    let mut pairs = Vec::with_capacity(ba_edge_count(n, attach));
    for t in 1..n {
        let want = t.min(attach);
        for s in rand::seq::index::sample(&mut rng, t, want).iter() {
            pairs.push((s, t));
            pairs.push((t, s));
        }
    }
    Ok(pairs)
}
