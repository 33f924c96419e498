//! Dense and sparse order-k tensors over n nodes with d channels.
//!
//! A dense tensor stores all n^k index tuples row-major (last position
//! fastest). A sparse tensor stores a sorted, duplicate-free list of
//! hyperedges; absent entries are structural zeros. Node permutations act
//! on values by relabeling indices: (pi . A)[i] = A[pi^-1(i)].

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::mem;

/// A sorted list of m distinct hyperedges of order k over n nodes.
///
/// Order zero is the single empty tuple, used by invariant layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSet {
    n: usize,
    k: usize,
    m: usize,
    indices: Vec<usize>,
}

impl EdgeSet {
    /// Builds an edge set from tuples, sorting and deduplicating.
    pub fn from_tuples(n: usize, k: usize, tuples: &[Vec<usize>]) -> Result<Self> {
        let mut rows: Vec<&[usize]> = Vec::with_capacity(tuples.len());
        for t in tuples {
            if t.len() != k {
                return Err(Error::ArityMismatch {
                    expected: k,
                    got: t.len(),
                });
            }
            for &v in t {
                if v >= n {
                    return Err(Error::IndexOutOfRange(v, n));
                }
            }
            rows.push(t.as_slice());
        }
        rows.sort();
        rows.dedup();
        let mut indices = mem::alloc_usize(rows.len() * k);
        for (r, row) in rows.iter().enumerate() {
            indices[r * k..(r + 1) * k].copy_from_slice(row);
        }
        let m = if k == 0 {
            1.min(tuples.len().max(1))
        } else {
            rows.len()
        };
        Ok(EdgeSet { n, k, m, indices })
    }

    /// The full grid [n]^k as an edge set.
    pub fn full_grid(n: usize, k: usize) -> Result<Self> {
        let m = checked_pow(n, k)?;
        let mut indices = mem::alloc_usize(m * k);
        let mut idx = vec![0usize; k];
        for r in 0..m {
            indices[r * k..(r + 1) * k].copy_from_slice(&idx);
            increment_index(&mut idx, n);
        }
        Ok(EdgeSet { n, k, m, indices })
    }

    /// The order-zero edge set holding the single empty tuple.
    pub fn scalar(n: usize) -> Self {
        EdgeSet {
            n,
            k: 0,
            m: 1,
            indices: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn edge(&self, row: usize) -> &[usize] {
        &self.indices[row * self.k..(row + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.m).map(move |r| self.edge(r))
    }

    /// Binary search for an edge; the list is sorted by construction.
    pub fn position_of(&self, edge: &[usize]) -> Option<usize> {
        debug_assert_eq!(edge.len(), self.k);
        if self.k == 0 {
            return if self.m == 1 { Some(0) } else { None };
        }
        let mut lo = 0usize;
        let mut hi = self.m;
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.edge(mid).cmp(edge) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    /// Applies a node permutation and restores sorted order.
    ///
    /// Returns the permuted edge set and, for each new row, the old row it
    /// came from, so values can follow their edges.
    pub fn permuted(&self, perm: &NodePerm) -> Result<(EdgeSet, Vec<usize>)> {
        perm.check(self.n)?;
        if self.k == 0 {
            return Ok((self.clone(), vec![0; self.m]));
        }
        let mut rows: Vec<(Vec<usize>, usize)> = (0..self.m)
            .map(|r| {
                let mapped: Vec<usize> = self.edge(r).iter().map(|&v| perm.map(v)).collect();
                (mapped, r)
            })
            .collect();
        rows.sort();
        let mut indices = mem::alloc_usize(self.m * self.k);
        let mut origin = Vec::with_capacity(self.m);
        for (r, (edge, old)) in rows.iter().enumerate() {
            indices[r * self.k..(r + 1) * self.k].copy_from_slice(edge);
            origin.push(*old);
        }
        Ok((
            EdgeSet {
                n: self.n,
                k: self.k,
                m: self.m,
                indices,
            },
            origin,
        ))
    }
}

/// A permutation of node labels.
#[derive(Clone, Debug)]
pub struct NodePerm {
    map: Vec<usize>,
}

impl NodePerm {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || seen[v] {
                return Err(Error::InvalidPermutation(n));
            }
            seen[v] = true;
        }
        Ok(NodePerm { map })
    }

    pub fn identity(n: usize) -> Self {
        NodePerm {
            map: (0..n).collect(),
        }
    }

    /// A uniformly random permutation from the given RNG.
    pub fn random(n: usize, rng: &mut impl rand::Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        NodePerm { map }
    }

    pub fn n(&self) -> usize {
        self.map.len()
    }

    pub fn map(&self, v: usize) -> usize {
        self.map[v]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        NodePerm { map: inv }
    }

    pub fn compose(&self, first: &NodePerm) -> Result<Self> {
        if first.n() != self.n() {
            return Err(Error::InvalidPermutation(self.n()));
        }
        Ok(NodePerm {
            map: (0..self.n()).map(|v| self.map(first.map(v))).collect(),
        })
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.map.len() != n {
            return Err(Error::InvalidPermutation(n));
        }
        Ok(())
    }
}

/// Dense order-k tensor: n^k rows of d channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    n: usize,
    k: usize,
    d: usize,
    values: Mat,
}

impl DenseTensor {
    pub fn zeros(n: usize, k: usize, d: usize) -> Result<Self> {
        let rows = checked_pow(n, k)?;
        Ok(DenseTensor {
            n,
            k,
            d,
            values: Mat::zeros(rows, d),
        })
    }

    pub fn from_values(n: usize, k: usize, values: Mat) -> Result<Self> {
        let rows = checked_pow(n, k)?;
        if values.rows() != rows {
            return Err(Error::Shape(format!(
                "dense tensor expects {} rows, got {}",
                rows,
                values.rows()
            )));
        }
        Ok(DenseTensor {
            n,
            k,
            d: values.cols(),
            values,
        })
    }

    /// Seeded uniform values in [-1, 1].
    pub fn random(n: usize, k: usize, d: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut t = Self::zeros(n, k, d)?;
        for v in t.values.data_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Mat {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn row_of_index(&self, idx: &[usize]) -> usize {
        row_of(idx, self.n)
    }

    pub fn get(&self, idx: &[usize]) -> &[f64] {
        self.values.row(row_of(idx, self.n))
    }

    pub fn set(&mut self, idx: &[usize], channel: usize, v: f64) {
        let r = row_of(idx, self.n);
        self.values.set(r, channel, v);
    }

    /// Applies a node permutation: out[pi(i)] = in[i].
    pub fn permuted(&self, perm: &NodePerm) -> Result<DenseTensor> {
        perm.check(self.n)?;
        let mut out = DenseTensor::zeros(self.n, self.k, self.d)?;
        let mut idx = vec![0usize; self.k];
        let mut mapped = vec![0usize; self.k];
        for r in 0..self.rows() {
            for (m, &v) in mapped.iter_mut().zip(&idx) {
                *m = perm.map(v);
            }
            let target = row_of(&mapped, self.n);
            out.values.row_mut(target).copy_from_slice(self.values.row(r));
            increment_index(&mut idx, self.n);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.values.max_abs_diff(&other.values)
    }
}

/// Sparse order-k tensor: values on an explicit edge set, zeros elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTensor {
    edges: EdgeSet,
    d: usize,
    values: Mat,
}

impl SparseTensor {
    pub fn zeros(edges: EdgeSet, d: usize) -> Self {
        let rows = edges.len();
        SparseTensor {
            edges,
            d,
            values: Mat::zeros(rows, d),
        }
    }

    pub fn from_values(edges: EdgeSet, values: Mat) -> Result<Self> {
        if values.rows() != edges.len() {
            return Err(Error::Shape(format!(
                "sparse tensor expects {} rows, got {}",
                edges.len(),
                values.rows()
            )));
        }
        Ok(SparseTensor {
            d: values.cols(),
            edges,
            values,
        })
    }

    /// Seeded uniform values in [-1, 1] on the given edges.
    pub fn random(edges: EdgeSet, d: usize, rng: &mut impl rand::Rng) -> Self {
        let mut t = Self::zeros(edges, d);
        for v in t.values.data_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        t
    }

    pub fn n(&self) -> usize {
        self.edges.n()
    }

    pub fn k(&self) -> usize {
        self.edges.k()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Mat {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    /// Applies a node permutation; rows move with their edges.
    pub fn permuted(&self, perm: &NodePerm) -> Result<SparseTensor> {
        let (edges, origin) = self.edges.permuted(perm)?;
        let mut values = Mat::zeros(self.values.rows(), self.d);
        for (new_row, &old_row) in origin.iter().enumerate() {
            values.row_mut(new_row).copy_from_slice(self.values.row(old_row));
        }
        Ok(SparseTensor {
            edges,
            d: self.d,
            values,
        })
    }

    pub fn max_abs_diff(&self, other: &SparseTensor) -> f64 {
        self.values.max_abs_diff(&other.values)
    }
}

/// Materializes a sparse tensor as dense; absent entries become zero rows.
pub fn densify(sparse: &SparseTensor) -> Result<DenseTensor> {
    let mut out = DenseTensor::zeros(sparse.n(), sparse.k(), sparse.d())?;
    for (r, edge) in sparse.edges().iter().enumerate() {
        let target = row_of(edge, sparse.n());
        out.values_mut().row_mut(target).copy_from_slice(sparse.row(r));
    }
    Ok(out)
}

/// Restricts a dense tensor to an explicit edge set.
pub fn sparsify(dense: &DenseTensor, edges: &EdgeSet) -> Result<SparseTensor> {
    if edges.n() != dense.n() || edges.k() != dense.k() {
        return Err(Error::Shape(
            "edge set does not match tensor order".to_string(),
        ));
    }
    let mut out = SparseTensor::zeros(edges.clone(), dense.d());
    for r in 0..edges.len() {
        let row = dense.get(edges.edge(r)).to_vec();
        out.values_mut().row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// Network projection of hyperedges to order l.
///
/// Each source edge contributes every l-tuple over its distinct node set,
/// so the result covers exactly the positions a sparse k -> l layer can
/// populate. Rejects l > k; l = 0 yields the scalar edge set.
pub fn project_edges(edges: &EdgeSet, l: usize) -> Result<EdgeSet> {
    let k = edges.k();
    if l > k {
        return Err(Error::ProjectionOrder { k, l });
    }
    if l == 0 {
        return Ok(EdgeSet::scalar(edges.n()));
    }
    let mut tuples: Vec<Vec<usize>> = Vec::new();
    let mut uniq: Vec<usize> = Vec::with_capacity(k);
    for edge in edges.iter() {
        uniq.clear();
        for &v in edge {
            if !uniq.contains(&v) {
                uniq.push(v);
            }
        }
        uniq.sort_unstable();
        let u = uniq.len();
        let count = u.pow(l as u32);
        let mut pick = vec![0usize; l];
        for _ in 0..count {
            tuples.push(pick.iter().map(|&p| uniq[p]).collect());
            increment_index(&mut pick, u);
        }
    }
    EdgeSet::from_tuples(edges.n(), l, &tuples)
}

/// Adds the self-loop (v, v) for every node to an order-2 edge set.
pub fn add_self_loops(edges: &EdgeSet) -> Result<EdgeSet> {
    if edges.k() != 2 {
        return Err(Error::Shape("self-loops need an order-2 edge set".into()));
    }
    let mut tuples: Vec<Vec<usize>> = edges.iter().map(|e| e.to_vec()).collect();
    for v in 0..edges.n() {
        tuples.push(vec![v, v]);
    }
    EdgeSet::from_tuples(edges.n(), 2, &tuples)
}

/// Encodes node features and optional edge features as an order-2 sparse
/// tensor with d_v + d_e channels.
///
/// Diagonal entries carry node features with zero edge channels; off
/// diagonal entries carry edge features with zero node channels. The edge
/// set becomes the input edges plus all self-loops.
pub fn encode_graph(
    x: &Mat,
    edge_feat: Option<&dyn Fn(usize, usize) -> Vec<f64>>,
    d_e: usize,
    edges: &EdgeSet,
) -> Result<SparseTensor> {
    let n = edges.n();
    if x.rows() != n {
        return Err(Error::Shape("node feature rows must equal n".into()));
    }
    let d_v = x.cols();
    let with_loops = add_self_loops(edges)?;
    let mut out = SparseTensor::zeros(with_loops, d_v + d_e);
    for r in 0..out.len() {
        let edge = out.edges().edge(r);
        let (a, b) = (edge[0], edge[1]);
        let row_values: Vec<f64> = if a == b {
            let mut v = x.row(a).to_vec();
            v.extend(std::iter::repeat(0.0).take(d_e));
            v
        } else {
            let mut v = vec![0.0; d_v];
            match edge_feat {
                Some(f) => v.extend(f(a, b)),
                None => v.extend(std::iter::repeat(0.0).take(d_e)),
            }
            v
        };
        out.values_mut().row_mut(r).copy_from_slice(&row_values);
    }
    Ok(out)
}

/// Packs message-passing inputs into an order-2 sparse tensor.
///
/// Entry (i, j) holds (X_j, X_i, E_ij) followed by `pad` zero channels, on
/// the edge set E plus all self-loops, so that an output position (j, j)
/// can aggregate messages flowing into node j.
pub fn mpnn_pack(
    x: &Mat,
    edge_feat: Option<&dyn Fn(usize, usize) -> Vec<f64>>,
    d_e: usize,
    edges: &EdgeSet,
    pad: usize,
) -> Result<SparseTensor> {
    let n = edges.n();
    if x.rows() != n {
        return Err(Error::Shape("node feature rows must equal n".into()));
    }
    let d_v = x.cols();
    let with_loops = add_self_loops(edges)?;
    let mut out = SparseTensor::zeros(with_loops, 2 * d_v + d_e + pad);
    for r in 0..out.len() {
        let edge = out.edges().edge(r);
        let (i, j) = (edge[0], edge[1]);
        let mut v = Vec::with_capacity(2 * d_v + d_e + pad);
        v.extend_from_slice(x.row(j));
        v.extend_from_slice(x.row(i));
        if i != j {
            match edge_feat {
                Some(f) => v.extend(f(i, j)),
                None => v.extend(std::iter::repeat(0.0).take(d_e)),
            }
        } else {
            v.extend(std::iter::repeat(0.0).take(d_e));
        }
        v.extend(std::iter::repeat(0.0).take(pad));
        out.values_mut().row_mut(r).copy_from_slice(&v);
    }
    Ok(out)
}

/// n^k with overflow checking.
pub fn checked_pow(n: usize, k: usize) -> Result<usize> {
    let mut out: usize = 1;
    for _ in 0..k {
        out = out
            .checked_mul(n)
            .ok_or_else(|| Error::Shape(format!("n^k overflows usize for n = {n}, k = {k}")))?;
    }
    Ok(out)
}

/// Row of a multi-index in row-major order (last position fastest).
#[inline]
pub fn row_of(idx: &[usize], n: usize) -> usize {
    let mut row = 0usize;
    for &v in idx {
        debug_assert!(v < n);
        row = row * n + v;
    }
    row
}

/// Decodes a row back into a multi-index.
pub fn decode_row(mut row: usize, n: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = row % n;
        row /= n;
    }
}

/// Advances a multi-index in row-major order; wraps to all zeros at the end.
pub fn increment_index(idx: &mut [usize], n: usize) {
    for slot in idx.iter_mut().rev() {
        *slot += 1;
        if *slot < n {
            return;
        }
        *slot = 0;
    }
}

/// All multi-indices of [n]^k in row order, materialized.
pub fn all_indices(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let rows = checked_pow(n, k)?;
    let mut out = Vec::with_capacity(rows);
    let mut idx = vec![0usize; k];
    for _ in 0..rows {
        out.push(idx.clone());
        increment_index(&mut idx, n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn row_roundtrip() {
        let n = 5;
        for k in 0..=3 {
            let mut idx = vec![0usize; k];
            for r in 0..checked_pow(n, k).unwrap() {
                assert_eq!(row_of(&idx, n), r);
                let mut back = vec![0usize; k];
                decode_row(r, n, &mut back);
                assert_eq!(back, idx);
                increment_index(&mut idx, n);
            }
        }
    }

    #[test]
    fn edge_set_sorts_and_dedups() {
        let e = EdgeSet::from_tuples(4, 2, &[vec![2, 1], vec![0, 3], vec![2, 1]]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e.edge(0), &[0, 3]);
        assert_eq!(e.edge(1), &[2, 1]);
        assert_eq!(e.position_of(&[2, 1]), Some(1));
        assert_eq!(e.position_of(&[1, 2]), None);
    }

    #[test]
    fn permutation_action_composes() {
        let mut rng = rng_from_seed(7);
        let n = 5;
        let a = DenseTensor::random(n, 2, 3, &mut rng).unwrap();
        let p = NodePerm::random(n, &mut rng);
        let q = NodePerm::random(n, &mut rng);
        let seq = a.permuted(&p).unwrap().permuted(&q).unwrap();
        let composed = a.permuted(&q.compose(&p).unwrap()).unwrap();
        assert_eq!(seq.max_abs_diff(&composed), 0.0);
        let undone = a.permuted(&p).unwrap().permuted(&p.inverse()).unwrap();
        assert_eq!(undone.max_abs_diff(&a), 0.0);
    }

    #[test]
    fn densify_sparsify_roundtrip() {
        let mut rng = rng_from_seed(3);
        let edges =
            EdgeSet::from_tuples(4, 2, &[vec![0, 1], vec![1, 0], vec![2, 2], vec![3, 1]]).unwrap();
        let s = SparseTensor::random(edges.clone(), 3, &mut rng);
        let dense = densify(&s).unwrap();
        let back = sparsify(&dense, &edges).unwrap();
        assert_eq!(back.max_abs_diff(&s), 0.0);
        // Entries outside the edge set are zero.
        assert_eq!(dense.get(&[0, 2]), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sparse_permutation_matches_dense_permutation() {
        let mut rng = rng_from_seed(11);
        let edges = EdgeSet::from_tuples(5, 2, &[vec![0, 1], vec![1, 2], vec![4, 4]]).unwrap();
        let s = SparseTensor::random(edges, 2, &mut rng);
        let p = NodePerm::random(5, &mut rng);
        let via_sparse = densify(&s.permuted(&p).unwrap()).unwrap();
        let via_dense = densify(&s).unwrap().permuted(&p).unwrap();
        assert_eq!(via_sparse.max_abs_diff(&via_dense), 0.0);
    }

    #[test]
    fn projection_creates_all_tuples_over_edge_supports() {
        let edges = EdgeSet::from_tuples(6, 2, &[vec![1, 2], vec![3, 3]]).unwrap();
        let proj = project_edges(&edges, 2).unwrap();
        // (1,2) spawns 4 tuples over {1,2}; (3,3) spawns (3,3).
        assert_eq!(proj.len(), 5);
        for t in [[1, 1], [1, 2], [2, 1], [2, 2], [3, 3]] {
            assert!(proj.position_of(&t).is_some(), "{t:?}");
        }
        let nodes = project_edges(&edges, 1).unwrap();
        assert_eq!(nodes.len(), 3);
        assert!(project_edges(&edges, 3).is_err());
        assert_eq!(project_edges(&edges, 0).unwrap().len(), 1);
    }

    #[test]
    fn self_loops_cover_all_nodes() {
        let edges = EdgeSet::from_tuples(4, 2, &[vec![0, 1]]).unwrap();
        let with = add_self_loops(&edges).unwrap();
        assert_eq!(with.len(), 5);
        for v in 0..4 {
            assert!(with.position_of(&[v, v]).is_some());
        }
    }

    #[test]
    fn encode_graph_separates_node_and_edge_channels() {
        let x = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let edges = EdgeSet::from_tuples(3, 2, &[vec![0, 1], vec![1, 0]]).unwrap();
        let feat = |a: usize, b: usize| vec![(a * 10 + b) as f64];
        let s = encode_graph(&x, Some(&feat), 1, &edges).unwrap();
        assert_eq!(s.d(), 3);
        let r = s.edges().position_of(&[1, 1]).unwrap();
        assert_eq!(s.row(r), &[3.0, 4.0, 0.0]);
        let r = s.edges().position_of(&[0, 1]).unwrap();
        assert_eq!(s.row(r), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn mpnn_pack_convention() {
        let x = Mat::from_vec(3, 1, vec![10.0, 20.0, 30.0]);
        let edges = EdgeSet::from_tuples(3, 2, &[vec![0, 1]]).unwrap();
        let feat = |a: usize, b: usize| vec![100.0 + (a * 10 + b) as f64];
        let s = mpnn_pack(&x, Some(&feat), 1, &edges, 2).unwrap();
        assert_eq!(s.d(), 5);
        // Entry (0, 1): (X_1, X_0, E_01, pad).
        let r = s.edges().position_of(&[0, 1]).unwrap();
        assert_eq!(s.row(r), &[20.0, 10.0, 101.0, 0.0, 0.0]);
        // Loop (2, 2): (X_2, X_2, 0, pad).
        let r = s.edges().position_of(&[2, 2]).unwrap();
        assert_eq!(s.row(r), &[30.0, 30.0, 0.0, 0.0, 0.0]);
    }
}
