//! Reverse-mode automatic differentiation over matrix programs.
//!
//! A `Tape` records an eager single-assignment program: every builder
//! method computes its value immediately and appends one node. `backward`
//! walks the nodes in reverse, accumulating adjoints. The op set is the
//! closure of what the training models need: dense matrix algebra, row
//! gather/scatter plumbing for sparse tensors, segmented softmax and
//! feature-map reductions for attention, row/column normalizations, and
//! classification losses.
//!
//! The builders mirror the float evaluation order of the untraced forward
//! paths term for term, so a traced forward reproduces the untraced value
//! bit for bit; the bit equality is asserted by the traced-model tests.

pub mod store;
pub mod traced;

pub use store::ParamStore;

use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::mat::{dot, Mat};

/// Handle to one tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// a (m x d) plus a row vector b (1 x d) broadcast over rows.
    AddRowBroadcast(Var, Var),
    /// Repeats a 1 x d row `copies` times.
    BroadcastRow(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// out[rows[p]] += a[p]; output has `out_rows` rows.
    ScatterAddRows(Var, Vec<usize>, usize),
    /// out[p] = <a[rows_a[p]], b[rows_b[p]]>, a column vector.
    PairDot(Var, Var, Vec<usize>, Vec<usize>),
    /// Softmax within contiguous segments of a column vector; `ends[s]` is
    /// the exclusive end of segment s.
    SegmentSoftmax(Var, Vec<usize>),
    /// out[rows_out[p]] += w[p] * v[rows_v[p]].
    WeightedScatterAdd {
        v: Var,
        w: Var,
        rows_v: Vec<usize>,
        rows_out: Vec<usize>,
        n_out: usize,
    },
    /// Per row: half the sum of squared entries, as a column vector.
    RowSumSqHalf(Var),
    /// a (m x d) minus a column vector b (m x 1) broadcast over columns.
    SubColBroadcast(Var, Var),
    /// a / b per row with b a column vector; rows where b = 0 pass through.
    DivColBroadcast(Var, Var),
    Exp(Var),
    Act(Var, Activation),
    /// Componentwise x + 1 for x >= 0, exp(x) otherwise.
    Elu1(Var),
    /// Stacked per-segment outer products: for each row r of phi,
    /// out[seg[r]*d_k + f] += phi[r][f] * v[rows_v[r]].
    SegmentOuter {
        phi: Var,
        v: Var,
        rows_v: Vec<usize>,
        seg: Vec<usize>,
        groups: usize,
    },
    /// Per-segment row sums of phi: out[seg[r]] += phi[r].
    SegmentSum { phi: Var, seg: Vec<usize>, groups: usize },
    /// out[q] = sum_f phi[q][f] * stack[seg[q]*d_k + f].
    QuerySegMatmul { phi: Var, stack: Var, seg: Vec<usize> },
    LayerNormRows { x: Var, scale: Var, shift: Var, eps: f64 },
    /// Per-column normalization over rows with batch statistics; the
    /// computed mean and variance stay on the node for running-stat reads.
    BatchNormCols {
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    SumAll(Var),
    /// Binary cross-entropy on the logit difference z[:,1] - z[:,0],
    /// averaged over rows; targets are 0/1.
    BceWithLogits { z: Var, targets: Vec<f64> },
    /// Multi-class cross-entropy with integer class targets, row-averaged.
    CeWithLogits { z: Var, targets: Vec<usize> },
}

struct Node {
    op: Op,
    value: Mat,
    grad: Option<Mat>,
}

/// Eager differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Handle of the node at position `i` in recording order.
    pub fn var(&self, i: usize) -> Var {
        assert!(i < self.nodes.len(), "node {i} out of range");
        Var(i)
    }

    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of all parameters that received one, with their names.
    pub fn param_grads(&self) -> Vec<(&str, &Mat)> {
        self.params
            .iter()
            .filter_map(|(v, name)| self.nodes[v.0].grad.as_ref().map(|g| (name.as_str(), g)))
            .collect()
    }

    /// Batch statistics of a `batch_norm_cols` node.
    pub fn bn_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNormCols { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// A named leaf whose gradient is collected by `param_grads`.
    pub fn param(&mut self, name: &str, value: Mat) -> Var {
        assert!(
            self.params.iter().all(|(_, n)| n != name),
            "parameter bound twice: {name}"
        );
        let v = self.push(Op::Leaf, value);
        self.params.push((v, name.to_string()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut value = va.clone();
        for (x, y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x -= y;
        }
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut value = va.clone();
        for (x, y) in value.data_mut().iter_mut().zip(vb.data()) {
            *x *= y;
        }
        self.push(Op::MulElem(a, b), value)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for x in value.data_mut() {
            *x += s;
        }
        self.push(Op::AddScalar(a, s), value)
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vb.cols());
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (c, slot) in row.iter_mut().enumerate() {
                *slot += vb.get(0, c);
            }
        }
        self.push(Op::AddRowBroadcast(a, b), value)
    }

    pub fn broadcast_row(&mut self, a: Var, copies: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows(), 1);
        let mut value = Mat::zeros(copies, va.cols());
        for r in 0..copies {
            value.row_mut(r).copy_from_slice(va.row(0));
        }
        self.push(Op::BroadcastRow(a, copies), value)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = Mat::zeros(rows.len(), va.cols());
        for (p, &r) in rows.iter().enumerate() {
            value.row_mut(p).copy_from_slice(va.row(r));
        }
        self.push(Op::GatherRows(a, rows), value)
    }

    pub fn scatter_add_rows(&mut self, a: Var, rows: Vec<usize>, out_rows: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.rows(), rows.len());
        let mut value = Mat::zeros(out_rows, va.cols());
        for (p, &r) in rows.iter().enumerate() {
            let dst = value.row_mut(r);
            for (slot, &x) in dst.iter_mut().zip(va.row(p)) {
                *slot += x;
            }
        }
        self.push(Op::ScatterAddRows(a, rows, out_rows), value)
    }

    pub fn pair_dot(&mut self, a: Var, b: Var, rows_a: Vec<usize>, rows_b: Vec<usize>) -> Var {
        assert_eq!(rows_a.len(), rows_b.len());
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.cols(), vb.cols());
        let mut value = Mat::zeros(rows_a.len(), 1);
        for p in 0..rows_a.len() {
            value.set(p, 0, dot(va.row(rows_a[p]), vb.row(rows_b[p])));
        }
        self.push(Op::PairDot(a, b, rows_a, rows_b), value)
    }

    pub fn segment_softmax(&mut self, scores: Var, ends: Vec<usize>) -> Var {
        let vs = &self.nodes[scores.0].value;
        assert_eq!(vs.cols(), 1);
        assert_eq!(ends.last().copied().unwrap_or(0), vs.rows());
        let mut value = vs.clone();
        let mut start = 0;
        for &end in &ends {
            let seg = &mut value.data_mut()[start..end];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in seg.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for s in seg.iter_mut() {
                *s /= z;
            }
            start = end;
        }
        self.push(Op::SegmentSoftmax(scores, ends), value)
    }

    pub fn weighted_scatter_add(
        &mut self,
        v: Var,
        w: Var,
        rows_v: Vec<usize>,
        rows_out: Vec<usize>,
        n_out: usize,
    ) -> Var {
        let (vv, vw) = (&self.nodes[v.0].value, &self.nodes[w.0].value);
        assert_eq!(vw.cols(), 1);
        assert_eq!(vw.rows(), rows_v.len());
        assert_eq!(rows_v.len(), rows_out.len());
        let mut value = Mat::zeros(n_out, vv.cols());
        for p in 0..rows_v.len() {
            let alpha = vw.get(p, 0);
            let dst = value.row_mut(rows_out[p]);
            for (slot, &x) in dst.iter_mut().zip(vv.row(rows_v[p])) {
                *slot += alpha * x;
            }
        }
        self.push(
            Op::WeightedScatterAdd {
                v,
                w,
                rows_v,
                rows_out,
                n_out,
            },
            value,
        )
    }

    pub fn row_sum_sq_half(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = Mat::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            let mut acc = 0.0;
            for &x in va.row(r) {
                acc += x * x;
            }
            value.set(r, 0, acc / 2.0);
        }
        self.push(Op::RowSumSqHalf(a), value)
    }

    pub fn sub_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.cols(), 1);
        assert_eq!(va.rows(), vb.rows());
        let mut value = va.clone();
        for r in 0..value.rows() {
            let s = vb.get(r, 0);
            for x in value.row_mut(r) {
                *x -= s;
            }
        }
        self.push(Op::SubColBroadcast(a, b), value)
    }

    pub fn div_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.cols(), 1);
        assert_eq!(va.rows(), vb.rows());
        let mut value = va.clone();
        for r in 0..value.rows() {
            let den = vb.get(r, 0);
            if den != 0.0 {
                for x in value.row_mut(r) {
                    *x /= den;
                }
            }
        }
        self.push(Op::DivColBroadcast(a, b), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for x in value.data_mut() {
            *x = x.exp();
        }
        self.push(Op::Exp(a), value)
    }

    pub fn activation(&mut self, a: Var, f: Activation) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        f.apply(&mut value);
        self.push(Op::Act(a, f), value)
    }

    pub fn elu1(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for x in value.data_mut() {
            *x = if *x >= 0.0 { *x + 1.0 } else { x.exp() };
        }
        self.push(Op::Elu1(a), value)
    }

    pub fn segment_outer(
        &mut self,
        phi: Var,
        v: Var,
        rows_v: Vec<usize>,
        seg: Vec<usize>,
        groups: usize,
    ) -> Var {
        let (vp, vv) = (&self.nodes[phi.0].value, &self.nodes[v.0].value);
        assert_eq!(vp.rows(), rows_v.len());
        assert_eq!(rows_v.len(), seg.len());
        let d_k = vp.cols();
        let mut value = Mat::zeros(groups * d_k, vv.cols());
        for r in 0..vp.rows() {
            let base = seg[r] * d_k;
            let vrow = vv.row(rows_v[r]);
            for (f, &p) in vp.row(r).iter().enumerate() {
                let dst = value.row_mut(base + f);
                for (slot, &x) in dst.iter_mut().zip(vrow) {
                    *slot += p * x;
                }
            }
        }
        self.push(
            Op::SegmentOuter {
                phi,
                v,
                rows_v,
                seg,
                groups,
            },
            value,
        )
    }

    pub fn segment_sum(&mut self, phi: Var, seg: Vec<usize>, groups: usize) -> Var {
        let vp = &self.nodes[phi.0].value;
        assert_eq!(vp.rows(), seg.len());
        let mut value = Mat::zeros(groups, vp.cols());
        for r in 0..vp.rows() {
            let dst = value.row_mut(seg[r]);
            for (slot, &x) in dst.iter_mut().zip(vp.row(r)) {
                *slot += x;
            }
        }
        self.push(Op::SegmentSum { phi, seg, groups }, value)
    }

    pub fn query_seg_matmul(&mut self, phi: Var, stack: Var, seg: Vec<usize>) -> Var {
        let (vp, vs) = (&self.nodes[phi.0].value, &self.nodes[stack.0].value);
        assert_eq!(vp.rows(), seg.len());
        let d_k = vp.cols();
        let mut value = Mat::zeros(vp.rows(), vs.cols());
        for q in 0..vp.rows() {
            let base = seg[q] * d_k;
            let dst = value.row_mut(q);
            for (f, &p) in vp.row(q).iter().enumerate() {
                for (slot, &x) in dst.iter_mut().zip(vs.row(base + f)) {
                    *slot += p * x;
                }
            }
        }
        self.push(Op::QuerySegMatmul { phi, stack, seg }, value)
    }

    pub fn layer_norm_rows(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
        let (vx, vs, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[scale.0].value,
            &self.nodes[shift.0].value,
        );
        let d = vx.cols();
        assert_eq!((vs.rows(), vs.cols()), (1, d));
        assert_eq!((vb.rows(), vb.cols()), (1, d));
        let mut value = Mat::zeros(vx.rows(), d);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = value.row_mut(r);
            for (c, slot) in orow.iter_mut().enumerate() {
                *slot = (row[c] - mean) * inv * vs.get(0, c) + vb.get(0, c);
            }
        }
        self.push(Op::LayerNormRows { x, scale, shift, eps }, value)
    }

    pub fn batch_norm_cols(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Var {
        let (vx, vs, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[scale.0].value,
            &self.nodes[shift.0].value,
        );
        let (n, d) = (vx.rows(), vx.cols());
        assert!(n > 0);
        assert_eq!((vs.rows(), vs.cols()), (1, d));
        assert_eq!((vb.rows(), vb.cols()), (1, d));
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..n {
                acc += vx.get(r, c);
            }
            let m = acc / n as f64;
            let mut vv = 0.0;
            for r in 0..n {
                let dlt = vx.get(r, c) - m;
                vv += dlt * dlt;
            }
            mean[c] = m;
            var[c] = vv / n as f64;
        }
        let mut value = Mat::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let inv = 1.0 / (var[c] + eps).sqrt();
                value.set(r, c, (vx.get(r, c) - mean[c]) * inv * vs.get(0, c) + vb.get(0, c));
            }
        }
        self.push(
            Op::BatchNormCols {
                x,
                scale,
                shift,
                eps,
                mean,
                var,
            },
            value,
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll(a), Mat::from_vec(1, 1, vec![s]))
    }

    pub fn bce_with_logits(&mut self, z: Var, targets: Vec<f64>) -> Var {
        let vz = &self.nodes[z.0].value;
        assert_eq!(vz.cols(), 2);
        assert_eq!(vz.rows(), targets.len());
        let m = targets.len() as f64;
        let mut acc = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let s = vz.get(r, 1) - vz.get(r, 0);
            acc += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        }
        self.push(Op::BceWithLogits { z, targets }, Mat::from_vec(1, 1, vec![acc / m]))
    }

    pub fn ce_with_logits(&mut self, z: Var, targets: Vec<usize>) -> Var {
        let vz = &self.nodes[z.0].value;
        assert_eq!(vz.rows(), targets.len());
        let m = targets.len() as f64;
        let mut acc = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = vz.row(r);
            assert!(y < row.len());
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        self.push(Op::CeWithLogits { z, targets }, Mat::from_vec(1, 1, vec![acc / m]))
    }

    /// Recomputes every node value from the leaves in recorded order.
    ///
    /// The recorded program is single-assignment, so one forward sweep with
    /// the same per-op loops reproduces every stored value bit for bit.
    pub fn replay(&self) -> Vec<Mat> {
        let mut vals: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul(a, b) => vals[a.0].matmul(&vals[b.0]),
                Op::Add(a, b) => vals[a.0].add(&vals[b.0]),
                Op::Sub(a, b) => {
                    let mut v = vals[a.0].clone();
                    for (x, y) in v.data_mut().iter_mut().zip(vals[b.0].data()) {
                        *x -= y;
                    }
                    v
                }
                Op::MulElem(a, b) => {
                    let mut v = vals[a.0].clone();
                    for (x, y) in v.data_mut().iter_mut().zip(vals[b.0].data()) {
                        *x *= y;
                    }
                    v
                }
                Op::Scale(a, s) => vals[a.0].scale(*s),
                Op::AddScalar(a, s) => {
                    let mut v = vals[a.0].clone();
                    for x in v.data_mut() {
                        *x += s;
                    }
                    v
                }
                Op::AddRowBroadcast(a, b) => {
                    let mut v = vals[a.0].clone();
                    for r in 0..v.rows() {
                        for (c, slot) in v.row_mut(r).iter_mut().enumerate() {
                            *slot += vals[b.0].get(0, c);
                        }
                    }
                    v
                }
                Op::BroadcastRow(a, copies) => {
                    let src = &vals[a.0];
                    let mut v = Mat::zeros(*copies, src.cols());
                    for r in 0..*copies {
                        v.row_mut(r).copy_from_slice(src.row(0));
                    }
                    v
                }
                Op::GatherRows(a, rows) => {
                    let src = &vals[a.0];
                    let mut v = Mat::zeros(rows.len(), src.cols());
                    for (p, &r) in rows.iter().enumerate() {
                        v.row_mut(p).copy_from_slice(src.row(r));
                    }
                    v
                }
                Op::ScatterAddRows(a, rows, out_rows) => {
                    let src = &vals[a.0];
                    let mut v = Mat::zeros(*out_rows, src.cols());
                    for (p, &r) in rows.iter().enumerate() {
                        for (slot, &x) in v.row_mut(r).iter_mut().zip(src.row(p)) {
                            *slot += x;
                        }
                    }
                    v
                }
                Op::PairDot(a, b, rows_a, rows_b) => {
                    let (va, vb) = (&vals[a.0], &vals[b.0]);
                    let mut v = Mat::zeros(rows_a.len(), 1);
                    for p in 0..rows_a.len() {
                        v.set(p, 0, dot(va.row(rows_a[p]), vb.row(rows_b[p])));
                    }
                    v
                }
                Op::SegmentSoftmax(scores, ends) => {
                    let mut v = vals[scores.0].clone();
                    let mut start = 0;
                    for &end in ends {
                        let seg = &mut v.data_mut()[start..end];
                        let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for s in seg.iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        for s in seg.iter_mut() {
                            *s /= z;
                        }
                        start = end;
                    }
                    v
                }
                Op::WeightedScatterAdd {
                    v,
                    w,
                    rows_v,
                    rows_out,
                    n_out,
                } => {
                    let (vv, vw) = (&vals[v.0], &vals[w.0]);
                    let mut out = Mat::zeros(*n_out, vv.cols());
                    for p in 0..rows_v.len() {
                        let alpha = vw.get(p, 0);
                        let dst = out.row_mut(rows_out[p]);
                        for (slot, &x) in dst.iter_mut().zip(vv.row(rows_v[p])) {
                            *slot += alpha * x;
                        }
                    }
                    out
                }
                Op::RowSumSqHalf(a) => {
                    let src = &vals[a.0];
                    let mut v = Mat::zeros(src.rows(), 1);
                    for r in 0..src.rows() {
                        let mut acc = 0.0;
                        for &x in src.row(r) {
                            acc += x * x;
                        }
                        v.set(r, 0, acc / 2.0);
                    }
                    v
                }
                Op::SubColBroadcast(a, b) => {
                    let mut v = vals[a.0].clone();
                    for r in 0..v.rows() {
                        let s = vals[b.0].get(r, 0);
                        for x in v.row_mut(r) {
                            *x -= s;
                        }
                    }
                    v
                }
                Op::DivColBroadcast(a, b) => {
                    let mut v = vals[a.0].clone();
                    for r in 0..v.rows() {
                        let den = vals[b.0].get(r, 0);
                        if den != 0.0 {
                            for x in v.row_mut(r) {
                                *x /= den;
                            }
                        }
                    }
                    v
                }
                Op::Exp(a) => {
                    let mut v = vals[a.0].clone();
                    for x in v.data_mut() {
                        *x = x.exp();
                    }
                    v
                }
                Op::Act(a, f) => {
                    let mut v = vals[a.0].clone();
                    f.apply(&mut v);
                    v
                }
                Op::Elu1(a) => {
                    let mut v = vals[a.0].clone();
                    for x in v.data_mut() {
                        *x = if *x >= 0.0 { *x + 1.0 } else { x.exp() };
                    }
                    v
                }
                Op::SegmentOuter {
                    phi,
                    v,
                    rows_v,
                    seg,
                    groups,
                } => {
                    let (vp, vv) = (&vals[phi.0], &vals[v.0]);
                    let d_k = vp.cols();
                    let mut out = Mat::zeros(groups * d_k, vv.cols());
                    for r in 0..vp.rows() {
                        let base = seg[r] * d_k;
                        let vrow = vv.row(rows_v[r]);
                        for (f, &p) in vp.row(r).iter().enumerate() {
                            let dst = out.row_mut(base + f);
                            for (slot, &x) in dst.iter_mut().zip(vrow) {
                                *slot += p * x;
                            }
                        }
                    }
                    out
                }
                Op::SegmentSum { phi, seg, groups } => {
                    let vp = &vals[phi.0];
                    let mut out = Mat::zeros(*groups, vp.cols());
                    for r in 0..vp.rows() {
                        for (slot, &x) in out.row_mut(seg[r]).iter_mut().zip(vp.row(r)) {
                            *slot += x;
                        }
                    }
                    out
                }
                Op::QuerySegMatmul { phi, stack, seg } => {
                    let (vp, vs) = (&vals[phi.0], &vals[stack.0]);
                    let d_k = vp.cols();
                    let mut out = Mat::zeros(vp.rows(), vs.cols());
                    for q in 0..vp.rows() {
                        let base = seg[q] * d_k;
                        let dst = out.row_mut(q);
                        for (f, &p) in vp.row(q).iter().enumerate() {
                            for (slot, &x) in dst.iter_mut().zip(vs.row(base + f)) {
                                *slot += p * x;
                            }
                        }
                    }
                    out
                }
                Op::LayerNormRows { x, scale, shift, eps } => {
                    let (vx, vs, vb) = (&vals[x.0], &vals[scale.0], &vals[shift.0]);
                    let d = vx.cols();
                    let mut out = Mat::zeros(vx.rows(), d);
                    for r in 0..vx.rows() {
                        let row = vx.row(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let orow = out.row_mut(r);
                        for (c, slot) in orow.iter_mut().enumerate() {
                            *slot = (row[c] - mean) * inv * vs.get(0, c) + vb.get(0, c);
                        }
                    }
                    out
                }
                Op::BatchNormCols {
                    x, scale, shift, eps, ..
                } => {
                    let (vx, vs, vb) = (&vals[x.0], &vals[scale.0], &vals[shift.0]);
                    let (n, d) = (vx.rows(), vx.cols());
                    let mut mean = vec![0.0; d];
                    let mut var = vec![0.0; d];
                    for c in 0..d {
                        let mut acc = 0.0;
                        for r in 0..n {
                            acc += vx.get(r, c);
                        }
                        let m = acc / n as f64;
                        let mut vv = 0.0;
                        for r in 0..n {
                            let dlt = vx.get(r, c) - m;
                            vv += dlt * dlt;
                        }
                        mean[c] = m;
                        var[c] = vv / n as f64;
                    }
                    let mut out = Mat::zeros(n, d);
                    for r in 0..n {
                        for c in 0..d {
                            let inv = 1.0 / (var[c] + eps).sqrt();
                            out.set(r, c, (vx.get(r, c) - mean[c]) * inv * vs.get(0, c) + vb.get(0, c));
                        }
                    }
                    out
                }
                Op::SumAll(a) => {
                    let s: f64 = vals[a.0].data().iter().sum();
                    Mat::from_vec(1, 1, vec![s])
                }
                Op::BceWithLogits { z, targets } => {
                    let vz = &vals[z.0];
                    let m = targets.len() as f64;
                    let mut acc = 0.0;
                    for (r, &y) in targets.iter().enumerate() {
                        let s = vz.get(r, 1) - vz.get(r, 0);
                        acc += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
                    }
                    Mat::from_vec(1, 1, vec![acc / m])
                }
                Op::CeWithLogits { z, targets } => {
                    let vz = &vals[z.0];
                    let m = targets.len() as f64;
                    let mut acc = 0.0;
                    for (r, &y) in targets.iter().enumerate() {
                        let row = vz.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                        acc += lse - row[y];
                    }
                    Mat::from_vec(1, 1, vec![acc / m])
                }
            };
            vals.push(value);
        }
        vals
    }

    /// Accumulates adjoints of every node reachable from `root`, which must
    /// hold a finite scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        {
            let v = &self.nodes[root.0].value;
            if v.rows() != 1 || v.cols() != 1 {
                return Err(Error::Shape("backward needs a scalar root".into()));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Mat::from_vec(1, 1, vec![1.0]));
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_ref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&head[b.0].value.transpose());
                    add_grad(&mut head[a.0], &da);
                    let db = head[a.0].value.transpose().matmul(g);
                    add_grad(&mut head[b.0], &db);
                }
                Op::Add(a, b) => {
                    let g = g.clone();
                    add_grad(&mut head[a.0], &g);
                    add_grad(&mut head[b.0], &g);
                }
                Op::Sub(a, b) => {
                    let g = g.clone();
                    add_grad(&mut head[a.0], &g);
                    let neg = g.scale(-1.0);
                    add_grad(&mut head[b.0], &neg);
                }
                Op::MulElem(a, b) => {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(head[b.0].value.data()) {
                        *x *= y;
                    }
                    let mut db = g.clone();
                    for (x, y) in db.data_mut().iter_mut().zip(head[a.0].value.data()) {
                        *x *= y;
                    }
                    add_grad(&mut head[a.0], &da);
                    add_grad(&mut head[b.0], &db);
                }
                Op::Scale(a, s) => {
                    let da = g.scale(*s);
                    add_grad(&mut head[a.0], &da);
                }
                Op::AddScalar(a, _) => {
                    let g = g.clone();
                    add_grad(&mut head[a.0], &g);
                }
                Op::AddRowBroadcast(a, b) => {
                    let g = g.clone();
                    add_grad(&mut head[a.0], &g);
                    let mut db = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, &x) in g.row(r).iter().enumerate() {
                            db.row_mut(0)[c] += x;
                        }
                    }
                    add_grad(&mut head[b.0], &db);
                }
                Op::BroadcastRow(a, _) => {
                    let mut da = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, &x) in g.row(r).iter().enumerate() {
                            da.row_mut(0)[c] += x;
                        }
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::GatherRows(a, rows) => {
                    let mut da = zeros_like(&head[a.0].value);
                    for (p, &r) in rows.iter().enumerate() {
                        for (slot, &x) in da.row_mut(r).iter_mut().zip(g.row(p)) {
                            *slot += x;
                        }
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::ScatterAddRows(a, rows, _) => {
                    let mut da = zeros_like(&head[a.0].value);
                    for (p, &r) in rows.iter().enumerate() {
                        da.row_mut(p).copy_from_slice(g.row(r));
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::PairDot(a, b, rows_a, rows_b) => {
                    let mut da = zeros_like(&head[a.0].value);
                    let mut db = zeros_like(&head[b.0].value);
                    let (va, vb) = (&head[a.0].value, &head[b.0].value);
                    for p in 0..rows_a.len() {
                        let gp = g.get(p, 0);
                        for (slot, &x) in da.row_mut(rows_a[p]).iter_mut().zip(vb.row(rows_b[p])) {
                            *slot += gp * x;
                        }
                        for (slot, &x) in db.row_mut(rows_b[p]).iter_mut().zip(va.row(rows_a[p])) {
                            *slot += gp * x;
                        }
                    }
                    add_grad(&mut head[a.0], &da);
                    add_grad(&mut head[b.0], &db);
                }
                Op::SegmentSoftmax(a, ends) => {
                    let y = &node.value;
                    let mut da = zeros_like(&head[a.0].value);
                    let mut start = 0;
                    for &end in ends {
                        let mut inner = 0.0;
                        for p in start..end {
                            inner += g.get(p, 0) * y.get(p, 0);
                        }
                        for p in start..end {
                            da.set(p, 0, y.get(p, 0) * (g.get(p, 0) - inner));
                        }
                        start = end;
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::WeightedScatterAdd {
                    v,
                    w,
                    rows_v,
                    rows_out,
                    ..
                } => {
                    let mut dv = zeros_like(&head[v.0].value);
                    let mut dw = zeros_like(&head[w.0].value);
                    let (vv, vw) = (&head[v.0].value, &head[w.0].value);
                    for p in 0..rows_v.len() {
                        let grow = g.row(rows_out[p]);
                        dw.data_mut()[p] += dot(grow, vv.row(rows_v[p]));
                        let alpha = vw.get(p, 0);
                        for (slot, &x) in dv.row_mut(rows_v[p]).iter_mut().zip(grow) {
                            *slot += alpha * x;
                        }
                    }
                    add_grad(&mut head[v.0], &dv);
                    add_grad(&mut head[w.0], &dw);
                }
                Op::RowSumSqHalf(a) => {
                    let mut da = head[a.0].value.clone();
                    for r in 0..da.rows() {
                        let gr = g.get(r, 0);
                        for x in da.row_mut(r) {
                            *x *= gr;
                        }
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::SubColBroadcast(a, b) => {
                    let g = g.clone();
                    add_grad(&mut head[a.0], &g);
                    let mut db = Mat::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        db.set(r, 0, -g.row(r).iter().sum::<f64>());
                    }
                    add_grad(&mut head[b.0], &db);
                }
                Op::DivColBroadcast(a, b) => {
                    let y = &node.value;
                    let vb = &head[b.0].value;
                    let mut da = g.clone();
                    let mut db = Mat::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let den = vb.get(r, 0);
                        if den != 0.0 {
                            let mut acc = 0.0;
                            for (c, x) in da.row_mut(r).iter_mut().enumerate() {
                                acc += *x * y.get(r, c);
                                *x /= den;
                            }
                            db.set(r, 0, -acc / den);
                        }
                    }
                    add_grad(&mut head[a.0], &da);
                    add_grad(&mut head[b.0], &db);
                }
                Op::Exp(a) => {
                    let mut da = g.clone();
                    for (x, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y;
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::Act(a, f) => {
                    let mut da = g.clone();
                    for (x, &v) in da.data_mut().iter_mut().zip(head[a.0].value.data()) {
                        *x *= f.grad(v);
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::Elu1(a) => {
                    let mut da = g.clone();
                    for ((x, &v), &y) in da
                        .data_mut()
                        .iter_mut()
                        .zip(head[a.0].value.data())
                        .zip(node.value.data())
                    {
                        *x *= if v >= 0.0 { 1.0 } else { y };
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::SegmentOuter {
                    phi,
                    v,
                    rows_v,
                    seg,
                    ..
                } => {
                    let d_k = head[phi.0].value.cols();
                    let mut dphi = zeros_like(&head[phi.0].value);
                    let mut dv = zeros_like(&head[v.0].value);
                    let (vp, vv) = (&head[phi.0].value, &head[v.0].value);
                    for r in 0..vp.rows() {
                        let base = seg[r] * d_k;
                        let vrow = vv.row(rows_v[r]);
                        let prow = vp.row(r);
                        let drow = dphi.row_mut(r);
                        for f in 0..d_k {
                            let grow = g.row(base + f);
                            drow[f] += dot(grow, vrow);
                            let p = prow[f];
                            for (slot, &x) in dv.row_mut(rows_v[r]).iter_mut().zip(grow) {
                                *slot += p * x;
                            }
                        }
                    }
                    add_grad(&mut head[phi.0], &dphi);
                    add_grad(&mut head[v.0], &dv);
                }
                Op::SegmentSum { phi, seg, .. } => {
                    let mut dphi = zeros_like(&head[phi.0].value);
                    for (r, &s) in seg.iter().enumerate() {
                        dphi.row_mut(r).copy_from_slice(g.row(s));
                    }
                    add_grad(&mut head[phi.0], &dphi);
                }
                Op::QuerySegMatmul { phi, stack, seg } => {
                    let d_k = head[phi.0].value.cols();
                    let mut dphi = zeros_like(&head[phi.0].value);
                    let mut dstack = zeros_like(&head[stack.0].value);
                    let (vp, vs) = (&head[phi.0].value, &head[stack.0].value);
                    for q in 0..vp.rows() {
                        let base = seg[q] * d_k;
                        let grow = g.row(q);
                        let prow = vp.row(q);
                        let drow = dphi.row_mut(q);
                        for f in 0..d_k {
                            drow[f] += dot(grow, vs.row(base + f));
                            let p = prow[f];
                            for (slot, &x) in dstack.row_mut(base + f).iter_mut().zip(grow) {
                                *slot += p * x;
                            }
                        }
                    }
                    add_grad(&mut head[phi.0], &dphi);
                    add_grad(&mut head[stack.0], &dstack);
                }
                Op::LayerNormRows { x, scale, shift, eps } => {
                    let vx = &head[x.0].value;
                    let vs = &head[scale.0].value;
                    let d = vx.cols();
                    let mut dx = zeros_like(vx);
                    let mut dscale = Mat::zeros(1, d);
                    let mut dshift = Mat::zeros(1, d);
                    for r in 0..vx.rows() {
                        let row = vx.row(r);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let grow = g.row(r);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for c in 0..d {
                            let xh = (row[c] - mean) * inv;
                            let dxh = grow[c] * vs.get(0, c);
                            dscale.row_mut(0)[c] += grow[c] * xh;
                            dshift.row_mut(0)[c] += grow[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for c in 0..d {
                            let xh = (row[c] - mean) * inv;
                            let dxh = grow[c] * vs.get(0, c);
                            dx.row_mut(r)[c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                    add_grad(&mut head[x.0], &dx);
                    add_grad(&mut head[scale.0], &dscale);
                    add_grad(&mut head[shift.0], &dshift);
                }
                Op::BatchNormCols {
                    x,
                    scale,
                    shift,
                    eps,
                    mean,
                    var,
                } => {
                    let vx = &head[x.0].value;
                    let vs = &head[scale.0].value;
                    let (n, d) = (vx.rows(), vx.cols());
                    let mut dx = zeros_like(vx);
                    let mut dscale = Mat::zeros(1, d);
                    let mut dshift = Mat::zeros(1, d);
                    for c in 0..d {
                        let inv = 1.0 / (var[c] + eps).sqrt();
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for r in 0..n {
                            let xh = (vx.get(r, c) - mean[c]) * inv;
                            let dxh = g.get(r, c) * vs.get(0, c);
                            dscale.row_mut(0)[c] += g.get(r, c) * xh;
                            dshift.row_mut(0)[c] += g.get(r, c);
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for r in 0..n {
                            let xh = (vx.get(r, c) - mean[c]) * inv;
                            let dxh = g.get(r, c) * vs.get(0, c);
                            dx.row_mut(r)[c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                    add_grad(&mut head[x.0], &dx);
                    add_grad(&mut head[scale.0], &dscale);
                    add_grad(&mut head[shift.0], &dshift);
                }
                Op::SumAll(a) => {
                    let gs = g.get(0, 0);
                    let mut da = zeros_like(&head[a.0].value);
                    for x in da.data_mut() {
                        *x = gs;
                    }
                    add_grad(&mut head[a.0], &da);
                }
                Op::BceWithLogits { z, targets } => {
                    let gs = g.get(0, 0) / targets.len() as f64;
                    let vz = &head[z.0].value;
                    let mut dz = zeros_like(vz);
                    for (r, &y) in targets.iter().enumerate() {
                        let s = vz.get(r, 1) - vz.get(r, 0);
                        let p = 1.0 / (1.0 + (-s).exp());
                        let ds = (p - y) * gs;
                        dz.set(r, 1, ds);
                        dz.set(r, 0, -ds);
                    }
                    add_grad(&mut head[z.0], &dz);
                }
                Op::CeWithLogits { z, targets } => {
                    let gs = g.get(0, 0) / targets.len() as f64;
                    let vz = &head[z.0].value;
                    let mut dz = zeros_like(vz);
                    for (r, &y) in targets.iter().enumerate() {
                        let row = vz.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let zsum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for c in 0..row.len() {
                            let p = (row[c] - max).exp() / zsum;
                            let delta = if c == y { 1.0 } else { 0.0 };
                            dz.set(r, c, (p - delta) * gs);
                        }
                    }
                    add_grad(&mut head[z.0], &dz);
                }
            }
        }
        Ok(())
    }
}

fn zeros_like(m: &Mat) -> Mat {
    Mat::zeros(m.rows(), m.cols())
}

fn add_grad(node: &mut Node, delta: &Mat) {
    match &mut node.grad {
        Some(g) => g.add_assign(delta),
        None => node.grad = Some(delta.clone()),
    }
}

/// Central-difference gradient check.
///
/// Evaluates `f` at perturbed copies of `points` and returns the largest
/// relative error against `grads`, with steps h = 1e-5 * max(1, |x|) and
/// errors measured as |fd - g| / max(|fd|, |g|, 1e-8).
pub fn fd_check<F: FnMut(&[Mat]) -> f64>(mut f: F, points: &[Mat], grads: &[Mat]) -> f64 {
    assert_eq!(points.len(), grads.len());
    let mut xs: Vec<Mat> = points.to_vec();
    let mut worst = 0.0f64;
    for i in 0..points.len() {
        assert_eq!(
            (points[i].rows(), points[i].cols()),
            (grads[i].rows(), grads[i].cols())
        );
        for e in 0..points[i].data().len() {
            let x = points[i].data()[e];
            let h = 1e-5 * x.abs().max(1.0);
            xs[i].data_mut()[e] = x + h;
            let up = f(&xs);
            xs[i].data_mut()[e] = x - h;
            let down = f(&xs);
            xs[i].data_mut()[e] = x;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i].data()[e];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Builds the graph twice: once for analytic gradients, then inside the
    /// finite-difference closure. Nudges inputs away from activation kinks.
    fn check_graph<F>(shapes: &[(usize, usize)], seed: u64, build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = rng_from_seed(seed);
        let points: Vec<Mat> = shapes
            .iter()
            .map(|&(r, c)| {
                let mut m = Mat::standard_normal(r, c, &mut rng);
                for v in m.data_mut() {
                    if v.abs() < 1e-3 {
                        *v = 0.5;
                    }
                }
                m
            })
            .collect();
        let eval = |xs: &[Mat]| -> (Tape, Var, Vec<Var>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs
                .iter()
                .enumerate()
                .map(|(i, m)| tape.param(&format!("p{i}"), m.clone()))
                .collect();
            let root = build(&mut tape, &vars);
            (tape, root, vars)
        };
        let (mut tape, root, vars) = eval(&points);
        tape.backward(root).unwrap();
        let grads: Vec<Mat> = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.value(v).rows(), tape.value(v).cols()))
            })
            .collect();
        let f = |xs: &[Mat]| -> f64 {
            let (t, r, _) = eval(xs);
            t.value(r).get(0, 0)
        };
        fd_check(f, &points, &grads)
    }

    /// Row- and column-sensitive scalar readout.
    fn scalarize(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let (r, c) = (tape.value(y).rows(), tape.value(y).cols());
        let w = tape.constant(Mat::standard_normal(r, c, &mut rng_from_seed(seed)));
        let prod = tape.mul_elem(y, w);
        tape.sum_all(prod)
    }

    #[test]
    fn matmul_add_sub_gradients_pass_fd() {
        let err = check_graph(&[(3, 4), (4, 2), (3, 2)], 11, |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.sub(p, v[2]);
            let r = t.add(q, v[2]);
            scalarize(t, r, 99)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn broadcast_and_scale_gradients_pass_fd() {
        let err = check_graph(&[(3, 4), (1, 4), (1, 4)], 12, |t, v| {
            let a = t.add_row_broadcast(v[0], v[1]);
            let b = t.broadcast_row(v[2], 3);
            let c = t.add(a, b);
            let d = t.scale(c, -1.7);
            let e = t.add_scalar(d, 0.3);
            scalarize(t, e, 98)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn gather_scatter_gradients_pass_fd() {
        let err = check_graph(&[(4, 3)], 13, |t, v| {
            let g = t.gather_rows(v[0], vec![2, 0, 2, 3, 1]);
            let s = t.scatter_add_rows(g, vec![0, 1, 1, 0, 2], 3);
            scalarize(t, s, 97)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn pair_dot_and_segment_softmax_gradients_pass_fd() {
        let err = check_graph(&[(3, 4), (4, 4), (5, 2)], 14, |t, v| {
            let scores = t.pair_dot(v[0], v[1], vec![0, 0, 1, 2, 2], vec![1, 3, 0, 2, 3]);
            let scaled = t.scale(scores, 0.5);
            let alpha = t.segment_softmax(scaled, vec![2, 3, 5]);
            let pooled = t.weighted_scatter_add(v[2], alpha, vec![1, 3, 0, 2, 4], vec![0, 0, 1, 2, 2], 3);
            scalarize(t, pooled, 96)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn feature_map_primitive_gradients_pass_fd() {
        let err = check_graph(&[(4, 3), (3, 5)], 15, |t, v| {
            let xs = t.scale(v[0], 0.7);
            let pre = t.matmul(xs, v[1]);
            let norm = t.row_sum_sq_half(xs);
            let cent = t.sub_col_broadcast(pre, norm);
            let shifted = t.add_scalar(cent, -0.9);
            let phi = t.exp(shifted);
            scalarize(t, phi, 95)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn div_col_broadcast_gradient_passes_fd() {
        let err = check_graph(&[(3, 4)], 16, |t, v| {
            let e = t.exp(v[0]);
            let den = t.row_sum_sq_half(e);
            let y = t.div_col_broadcast(e, den);
            scalarize(t, y, 94)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn activation_gradients_pass_fd() {
        for (act, seed) in [(Activation::Gelu, 17), (Activation::Relu, 18)] {
            let err = check_graph(&[(4, 5)], seed, |t, v| {
                let y = t.activation(v[0], act);
                scalarize(t, y, 93)
            });
            assert!(err < 1e-6, "{act:?} max rel err {err}");
        }
        let err = check_graph(&[(4, 5)], 19, |t, v| {
            let y = t.elu1(v[0]);
            scalarize(t, y, 92)
        });
        assert!(err < 1e-6, "elu1 max rel err {err}");
    }

    #[test]
    fn segment_reduction_gradients_pass_fd() {
        // phi 5x2 over 2 groups against values gathered from 4 rows.
        let seg = vec![0, 1, 0, 1, 1];
        let rows_v = vec![3, 0, 1, 2, 0];
        let err = check_graph(&[(5, 2), (4, 3), (2, 2)], 20, |t, v| {
            let stack = t.segment_outer(v[0], v[1], rows_v.clone(), seg.clone(), 2);
            let zs = t.segment_sum(v[0], seg.clone(), 2);
            let num = t.query_seg_matmul(v[2], stack, vec![1, 0]);
            let den = t.pair_dot(v[2], zs, vec![0, 1], vec![1, 0]);
            let y = t.div_col_broadcast(num, den);
            scalarize(t, y, 91)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn normalization_gradients_pass_fd() {
        let err = check_graph(&[(4, 6), (1, 6), (1, 6)], 21, |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-5);
            scalarize(t, y, 90)
        });
        assert!(err < 1e-6, "layer norm max rel err {err}");
        let err = check_graph(&[(5, 3), (1, 3), (1, 3)], 22, |t, v| {
            let y = t.batch_norm_cols(v[0], v[1], v[2], 1e-5);
            scalarize(t, y, 89)
        });
        assert!(err < 1e-6, "batch norm max rel err {err}");
    }

    #[test]
    fn loss_gradients_pass_fd() {
        let err = check_graph(&[(6, 2)], 23, |t, v| {
            t.bce_with_logits(v[0], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
        });
        assert!(err < 1e-6, "bce max rel err {err}");
        let err = check_graph(&[(5, 3)], 24, |t, v| {
            t.ce_with_logits(v[0], vec![2, 0, 1, 1, 0])
        });
        assert!(err < 1e-6, "ce max rel err {err}");
    }

    #[test]
    fn bce_equals_two_class_ce() {
        // The logit-difference sigmoid is the two-class softmax, so both
        // losses agree on the same logits and targets.
        let mut rng = rng_from_seed(31);
        let z = Mat::standard_normal(8, 2, &mut rng);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let mut t = Tape::new();
        let zv = t.constant(z);
        let b = t.bce_with_logits(zv, labels.iter().map(|&y| y as f64).collect());
        let c = t.ce_with_logits(zv, labels);
        assert!((t.value(b).get(0, 0) - t.value(c).get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_rows_are_stochastic() {
        let mut t = Tape::new();
        let s = t.constant(Mat::from_vec(5, 1, vec![0.3, -2.0, 1.1, 40.0, 39.0]));
        let y = t.segment_softmax(s, vec![3, 5]);
        let v = t.value(y);
        assert!((v.get(0, 0) + v.get(1, 0) + v.get(2, 0) - 1.0).abs() < 1e-12);
        assert!((v.get(3, 0) + v.get(4, 0) - 1.0).abs() < 1e-12);
        assert!(v.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_non_finite_roots() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 2));
        assert!(t.backward(a).is_err());
        let mut t = Tape::new();
        let a = t.constant(Mat::from_vec(1, 1, vec![f64::NAN]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn duplicate_parameter_names_panic() {
        let result = std::panic::catch_unwind(|| {
            let mut t = Tape::new();
            t.param("w", Mat::zeros(1, 1));
            t.param("w", Mat::zeros(1, 1));
        });
        assert!(result.is_err());
    }

    #[test]
    fn gradients_accumulate_over_shared_subexpressions() {
        // y = sum(x) + sum(x) has gradient 2 everywhere.
        let mut t = Tape::new();
        let x = t.param("x", Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let s = t.sum_all(x);
        let y = t.add(s, s);
        t.backward(y).unwrap();
        let g = t.grad(x).unwrap();
        assert!(g.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn batch_norm_stats_are_batch_moments() {
        let mut t = Tape::new();
        let x = t.constant(Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 6.0]));
        let s = t.constant(Mat::from_vec(1, 1, vec![1.0]));
        let b = t.constant(Mat::zeros(1, 1));
        let y = t.batch_norm_cols(x, s, b, 0.0);
        let (mean, var) = t.bn_stats(y).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-12);
        assert!((var[0] - 3.5).abs() < 1e-12);
        // Normalized column has zero mean and unit variance.
        let v = t.value(y);
        let m: f64 = v.data().iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn replay_reproduces_recorded_values_bitwise() {
        // One graph touching every op family, then a fresh forward sweep.
        let mut rng = rng_from_seed(25);
        let mut t = Tape::new();
        let a = t.param("a", Mat::standard_normal(4, 3, &mut rng));
        let b = t.param("b", Mat::standard_normal(3, 3, &mut rng));
        let rowv = t.constant(Mat::standard_normal(1, 3, &mut rng));
        let p = t.matmul(a, b);
        let q = t.add_row_broadcast(p, rowv);
        let r1 = t.broadcast_row(rowv, 4);
        let q2 = t.mul_elem(q, r1);
        let q3 = t.sub(q2, p);
        let q4 = t.scale(q3, -1.3);
        let q5 = t.add_scalar(q4, 0.2);
        let g = t.gather_rows(q5, vec![0, 2, 2, 3, 1]);
        let sc = t.pair_dot(g, g, vec![0, 1, 2, 3, 4], vec![1, 0, 3, 2, 4]);
        let al = t.segment_softmax(sc, vec![2, 5]);
        let pooled = t.weighted_scatter_add(g, al, vec![0, 1, 2, 3, 4], vec![0, 0, 1, 1, 1], 2);
        let sa = t.scatter_add_rows(g, vec![1, 0, 1, 0, 1], 2);
        let e = t.elu1(pooled);
        let x = t.exp(sa);
        let merged = t.add(e, x);
        let n = t.row_sum_sq_half(merged);
        let cent = t.sub_col_broadcast(merged, n);
        let dv = t.div_col_broadcast(cent, n);
        let act = t.activation(dv, Activation::Gelu);
        let scl = t.constant(Mat::from_vec(1, 3, vec![1.0, 0.9, 1.1]));
        let sft = t.constant(Mat::from_vec(1, 3, vec![0.0, 0.1, -0.1]));
        let ln = t.layer_norm_rows(act, scl, sft, 1e-5);
        let bn = t.batch_norm_cols(ln, scl, sft, 1e-5);
        let so = t.segment_outer(bn, a, vec![0, 1], vec![0, 1], 2);
        let ss = t.segment_sum(bn, vec![0, 0], 1);
        let qs = t.query_seg_matmul(bn, so, vec![1, 0]);
        let ce = t.ce_with_logits(qs, vec![0, 2]);
        let tot = t.sum_all(ss);
        let both = t.add(ce, tot);
        assert!(t.value(both).is_finite());
        let re = t.replay();
        assert_eq!(re.len(), t.len());
        for (i, m) in re.iter().enumerate() {
            assert_eq!(m.data(), t.value(Var(i)).data(), "node {i}");
        }
    }
}
