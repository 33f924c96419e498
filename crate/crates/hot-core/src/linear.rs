//! Equivariant linear layers between tensor orders.
//!
//! A layer from order k to order l carries one d_in x d_out weight matrix
//! per equivalence class of (input, output) index pairs and one d_out bias
//! vector per output equality pattern. The output at index j is
//!
//!   out_j = sum_mu (sum_{i : (i,j) in mu} A_i) w_mu + b_{pattern(j)}
//!
//! which commutes with node relabeling because class membership depends
//! only on equality patterns. Pooling per class before the weight multiply
//! fixes the float accumulation order: members in lexicographic input
//! order, classes in canonical order, so dense, lightweight, and sparse
//! paths agree exactly on common cases.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::ops_count::{bump, Counter};
use crate::partitions::{
    enumerate_partitions, pattern_of, write_pattern_labels, ClassLookup, ClassSet, EqClass,
    Partition, NO_CLASS,
};
use crate::tensor::{DenseTensor, EdgeSet, SparseTensor};

/// Linear layer equivariant to node permutations.
#[derive(Clone, Debug)]
pub struct EquivariantLinear {
    class_set: ClassSet,
    d_in: usize,
    d_out: usize,
    weights: Vec<Mat>,
    bias_parts: Vec<Partition>,
    biases: Vec<Mat>,
}

impl EquivariantLinear {
    /// A layer with zero weights and biases over the given class set.
    pub fn new(class_set: ClassSet, d_in: usize, d_out: usize) -> Result<Self> {
        let weights = (0..class_set.len())
            .map(|_| Mat::zeros(d_in, d_out))
            .collect();
        let bias_parts = enumerate_partitions(class_set.l)?;
        let biases = (0..bias_parts.len()).map(|_| Mat::zeros(1, d_out)).collect();
        Ok(EquivariantLinear {
            class_set,
            d_in,
            d_out,
            weights,
            bias_parts,
            biases,
        })
    }

    /// Per-class uniform init with bound sqrt(6 / (d_in + d_out)); biases zero.
    pub fn init_fan_scaled(&mut self, rng: &mut impl rand::Rng) {
        for w in &mut self.weights {
            *w = Mat::fan_scaled_uniform(self.d_in, self.d_out, rng);
        }
        for b in &mut self.biases {
            *b = Mat::zeros(1, self.d_out);
        }
    }

    pub fn k(&self) -> usize {
        self.class_set.k
    }

    pub fn l(&self) -> usize {
        self.class_set.l
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    pub fn class_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, class: usize) -> &Mat {
        &self.weights[class]
    }

    pub fn weight_mut(&mut self, class: usize) -> &mut Mat {
        &mut self.weights[class]
    }

    pub fn bias_count(&self) -> usize {
        self.biases.len()
    }

    pub fn bias_partitions(&self) -> &[Partition] {
        &self.bias_parts
    }

    pub fn bias(&self, idx: usize) -> &Mat {
        &self.biases[idx]
    }

    pub fn bias_mut(&mut self, idx: usize) -> &mut Mat {
        &mut self.biases[idx]
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.weights.len() * self.d_in * self.d_out + self.biases.len() * self.d_out
    }

    /// Parameters in canonical order: class weights, then pattern biases.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mut out = Vec::with_capacity(self.weights.len() + self.biases.len());
        for (c, w) in self.weights.iter().enumerate() {
            out.push((format!("{prefix}.w{c}"), w));
        }
        for (b, m) in self.biases.iter().enumerate() {
            out.push((format!("{prefix}.b{b}"), m));
        }
        out
    }

    /// Mutable view of the parameters, same order as `named_params`.
    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::with_capacity(self.weights.len() + self.biases.len());
        for (c, w) in self.weights.iter_mut().enumerate() {
            out.push((format!("{prefix}.w{c}"), w));
        }
        for (b, m) in self.biases.iter_mut().enumerate() {
            out.push((format!("{prefix}.b{b}"), m));
        }
        out
    }

    fn check_input(&self, k: usize, d: usize) -> Result<()> {
        if k != self.k() {
            return Err(Error::ArityMismatch {
                expected: self.k(),
                got: k,
            });
        }
        if d != self.d_in {
            return Err(Error::Dimension(format!(
                "layer expects {} input channels, got {}",
                self.d_in, d
            )));
        }
        Ok(())
    }

    fn bias_index_of(&self, j: &[usize]) -> usize {
        if j.is_empty() {
            return 0;
        }
        let mut labels = vec![0u8; j.len()];
        write_pattern_labels(j, &mut labels);
        self.bias_parts
            .iter()
            .position(|p| p.rgs() == labels.as_slice())
            .expect("bias partitions enumerate every output pattern")
    }

    /// Writes bias_{pattern(j)} into `row`.
    fn write_bias(&self, j: &[usize], row: &mut [f64]) {
        row.copy_from_slice(self.biases[self.bias_index_of(j)].row(0));
    }

    /// Adds `pooled`-per-class times class weights into `row`, classes in
    /// canonical order, input channels ascending.
    fn apply_weights(&self, pooled: &Mat, row: &mut [f64]) {
        for (c, w) in self.weights.iter().enumerate() {
            let p = pooled.row(c);
            for (cc, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (ci, &pv) in p.iter().enumerate() {
                    acc += pv * w.get(ci, cc);
                }
                *slot += acc;
            }
        }
    }

    /// Dense evaluation over the full index grids.
    pub fn forward_dense(&self, a: &DenseTensor) -> Result<DenseTensor> {
        self.check_input(a.k(), a.d())?;
        let n = a.n();
        let (k, l) = (self.k(), self.l());
        let lookup = ClassLookup::for_class_set(&self.class_set)?;
        let mut out = DenseTensor::zeros(n, l, self.d_out)?;
        let rows_in = a.rows();
        let rows_out = out.rows();
        let mut pooled = Mat::zeros(self.class_count(), self.d_in);
        let mut i_idx = vec![0usize; k];
        let mut j_idx = vec![0usize; l];
        for jr in 0..rows_out {
            let row = out.values_mut().row_mut(jr);
            self.write_bias(&j_idx, row);
            for v in pooled.data_mut() {
                *v = 0.0;
            }
            for slot in i_idx.iter_mut() {
                *slot = 0;
            }
            for ir in 0..rows_in {
                let c = lookup.class_of_pair(&i_idx, &j_idx);
                if c != NO_CLASS {
                    let dst = pooled.row_mut(c as usize);
                    for (d, &s) in dst.iter_mut().zip(a.row(ir)) {
                        *d += s;
                    }
                }
                crate::tensor::increment_index(&mut i_idx, n);
            }
            bump(Counter::PairVisits, rows_in as u64);
            self.apply_weights(&pooled, row);
            crate::tensor::increment_index(&mut j_idx, n);
        }
        Ok(out)
    }

    /// Fast path when every class determines its input index from the
    /// output index; cost O(n^l) instead of O(n^{k+l}).
    pub fn forward_lightweight(&self, a: &DenseTensor) -> Result<DenseTensor> {
        self.check_input(a.k(), a.d())?;
        if self.l() == 0 {
            return Err(Error::LightweightUnsupported {
                k: self.k(),
                l: 0,
            });
        }
        if !self.class_set.iter().all(|c| c.is_lightweight()) {
            return Err(Error::NotLightweight);
        }
        let n = a.n();
        let l = self.l();
        let mut out = DenseTensor::zeros(n, l, self.d_out)?;
        let rows_out = out.rows();
        let mut pooled = Mat::zeros(self.class_count(), self.d_in);
        let mut j_idx = vec![0usize; l];
        let mut j_labels = vec![0u8; l];
        for jr in 0..rows_out {
            let row = out.values_mut().row_mut(jr);
            self.write_bias(&j_idx, row);
            for v in pooled.data_mut() {
                *v = 0.0;
            }
            write_pattern_labels(&j_idx, &mut j_labels);
            for (c, class) in self.class_set.iter().enumerate() {
                if class.output().pattern.rgs() != j_labels.as_slice() {
                    continue;
                }
                let i = class.fix_index(&j_idx)?;
                let src = a.get(&i);
                let dst = pooled.row_mut(c);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
                bump(Counter::GatherVisits, 1);
            }
            self.apply_weights(&pooled, row);
            crate::tensor::increment_index(&mut j_idx, n);
        }
        Ok(out)
    }

    /// Sparse evaluation: inputs on edge set E, outputs on `eout`.
    ///
    /// Positions absent from E are structural zeros. When every class is
    /// lightweight the per-output cost is O(classes * log m) lookups;
    /// otherwise each output scans E once.
    pub fn forward_sparse(&self, s: &SparseTensor, eout: &EdgeSet) -> Result<SparseTensor> {
        self.check_input(s.k(), s.d())?;
        if eout.k() != self.l() {
            return Err(Error::ArityMismatch {
                expected: self.l(),
                got: eout.k(),
            });
        }
        if eout.n() != s.n() {
            return Err(Error::Shape("edge sets disagree on node count".into()));
        }
        let fix_only = self.class_set.iter().all(|c| c.is_lightweight());
        let lookup = if fix_only {
            None
        } else {
            Some(ClassLookup::for_class_set(&self.class_set)?)
        };
        let mut out = SparseTensor::zeros(eout.clone(), self.d_out);
        let m = s.len();
        let mut pooled = Mat::zeros(self.class_count(), self.d_in);
        let mut j_labels = vec![0u8; self.l()];
        for jr in 0..eout.len() {
            let j = eout.edge(jr);
            let row = out.values_mut().row_mut(jr);
            self.write_bias(j, row);
            for v in pooled.data_mut() {
                *v = 0.0;
            }
            if let Some(lookup) = &lookup {
                for ir in 0..m {
                    let c = lookup.class_of_pair(s.edges().edge(ir), j);
                    if c != NO_CLASS {
                        let dst = pooled.row_mut(c as usize);
                        for (d, &v) in dst.iter_mut().zip(s.row(ir)) {
                            *d += v;
                        }
                    }
                }
                bump(Counter::PairVisits, m as u64);
            } else {
                write_pattern_labels(j, &mut j_labels);
                for (c, class) in self.class_set.iter().enumerate() {
                    if class.output().pattern.rgs() != j_labels.as_slice() {
                        continue;
                    }
                    let i = class.fix_index(j)?;
                    if let Some(ir) = s.edges().position_of(&i) {
                        let dst = pooled.row_mut(c);
                        for (d, &v) in dst.iter_mut().zip(s.row(ir)) {
                            *d += v;
                        }
                    }
                    bump(Counter::GatherVisits, 1);
                }
            }
            self.apply_weights(&pooled, row);
        }
        Ok(out)
    }
}

/// Whether a compact layer stands in for the query or the key side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompactRole {
    Query,
    Key,
}

/// Compact query/key construction for one attention class.
///
/// Attention over class mu only ever reads query values at output indices
/// matching mu's output restriction, which carry u_q distinct values. A
/// layer of output order u_q therefore suffices; this plan maps full
/// indices to compact ones and transfers weights from a full-order layer
/// so that the compact values match the full ones exactly.
#[derive(Clone, Debug)]
pub struct CompactPlan {
    class: EqClass,
    role: CompactRole,
}

impl CompactPlan {
    pub fn new(class: EqClass, role: CompactRole) -> Self {
        CompactPlan { class, role }
    }

    /// Compact output order: u_q for queries, u_k for keys.
    pub fn u(&self) -> usize {
        match self.role {
            CompactRole::Query => self.class.u_q(),
            CompactRole::Key => self.class.u_k(),
        }
    }

    /// Order of the full-layer output this plan compacts.
    fn source_order(&self) -> usize {
        match self.role {
            CompactRole::Query => self.class.l(),
            CompactRole::Key => self.class.k(),
        }
    }

    fn side(&self) -> &crate::partitions::SideView {
        match self.role {
            CompactRole::Query => self.class.output(),
            CompactRole::Key => self.class.input(),
        }
    }

    /// The index map: distinct values of `full` in block order.
    pub fn map_index(&self, full: &[usize]) -> Vec<usize> {
        match self.role {
            CompactRole::Query => self.class.compact_query_index(full),
            CompactRole::Key => self.class.compact_key_index(full),
        }
    }

    /// Whether a full-layer class contributes on indices this plan keeps:
    /// its output restriction must equal the side pattern.
    pub fn is_effective(&self, alpha: &EqClass) -> bool {
        alpha.output().pattern == self.side().pattern
    }

    /// The compact-layer class paired with an effective full class: output
    /// positions sharing a side block merge into one position.
    pub fn merged_partition(&self, alpha: &EqClass) -> Result<Partition> {
        let k = self.class.k();
        let u = self.u();
        let side = self.side();
        let mut values = Vec::with_capacity(k + u);
        for t in 0..k {
            values.push(alpha.partition().label(t) as usize);
        }
        for c in 0..u {
            values.push(alpha.partition().label(k + side.first_pos[c]) as usize);
        }
        pattern_of(&values)
    }

    /// Builds the compact layer from a full-order layer.
    ///
    /// Weights of effective classes move to their merged classes; all other
    /// compact weights are zero. The single effective bias (the side
    /// pattern itself) moves to the all-distinct compact pattern.
    pub fn transfer(&self, full: &EquivariantLinear) -> Result<EquivariantLinear> {
        let k = self.class.k();
        if full.k() != k || full.l() != self.source_order() {
            return Err(Error::ArityMismatch {
                expected: self.source_order(),
                got: full.l(),
            });
        }
        let u = self.u();
        let target_set = ClassSet::full(k, u)?;
        let mut compact = EquivariantLinear::new(target_set, full.d_in(), full.d_out())?;
        for (ca, alpha) in full.class_set().iter().enumerate() {
            if !self.is_effective(alpha) {
                continue;
            }
            let beta = self.merged_partition(alpha)?;
            let idx = compact
                .class_set()
                .iter()
                .position(|c| c.partition() == &beta)
                .expect("merged class is a partition of the compact arity");
            *compact.weight_mut(idx) = full.weight(ca).clone();
        }
        let side_pattern = self.side().pattern.clone();
        if let Some(src) = full
            .bias_partitions()
            .iter()
            .position(|p| p == &side_pattern)
        {
            let dst = compact
                .bias_partitions()
                .iter()
                .position(|p| p == &Partition::all_distinct(u))
                .expect("all-distinct pattern is enumerated");
            *compact.bias_mut(dst) = full.bias(src).clone();
        }
        Ok(compact)
    }
}

/// Lightweight class set when the compact order allows it, full otherwise.
///
/// Invariant-side compact layers (u = 0) fall back to full classes, whose
/// count Bell(k) stays small for the orders used here.
pub fn compact_class_set(k: usize, u: usize, prefer_lightweight: bool) -> Result<ClassSet> {
    if prefer_lightweight && u >= 1 {
        ClassSet::lightweight(k, u)
    } else {
        ClassSet::full(k, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::{all_indices, densify, sparsify};
    use rand::Rng;

    fn filled_layer(k: usize, l: usize, d_in: usize, d_out: usize, seed: u64) -> EquivariantLinear {
        let mut rng = rng_from_seed(seed);
        let mut layer =
            EquivariantLinear::new(ClassSet::full(k, l).unwrap(), d_in, d_out).unwrap();
        layer.init_fan_scaled(&mut rng);
        for b in 0..layer.bias_count() {
            for v in layer.bias_mut(b).data_mut() {
                *v = rng.gen_range(-1.0..=1.0);
            }
        }
        layer
    }

    #[test]
    fn identity_class_with_identity_weight_is_identity() {
        let mut layer = EquivariantLinear::new(ClassSet::full(1, 1).unwrap(), 3, 3).unwrap();
        // Canonical order: [0,0] = same value first, then [0,1].
        *layer.weight_mut(0) = Mat::eye(3);
        let mut rng = rng_from_seed(1);
        let a = DenseTensor::random(5, 1, 3, &mut rng).unwrap();
        let out = layer.forward_dense(&a).unwrap();
        assert_eq!(out.values().data(), a.values().data());
    }

    #[test]
    fn first_order_layer_is_a_deepsets_layer() {
        // out = I A w1 + 1 1^T A w2 + 1 b^T with w1 = w_same - w_diff,
        // w2 = w_diff: pooling over i != j is (column sum) - (own row).
        let layer = filled_layer(1, 1, 3, 2, 9);
        let mut rng = rng_from_seed(10);
        let n = 5;
        let a = DenseTensor::random(n, 1, 3, &mut rng).unwrap();
        let got = layer.forward_dense(&a).unwrap();
        let w_same = layer.weight(0);
        let w_diff = layer.weight(1);
        let b = layer.bias(0);
        let mut want = Mat::zeros(n, 2);
        let mut colsum = vec![0.0; 3];
        for r in 0..n {
            for (c, &v) in a.row(r).iter().enumerate() {
                colsum[c] += v;
            }
        }
        for r in 0..n {
            for cc in 0..2 {
                let mut acc = 0.0;
                for ci in 0..3 {
                    let w1 = w_same.get(ci, cc) - w_diff.get(ci, cc);
                    acc += a.row(r)[ci] * w1 + colsum[ci] * w_diff.get(ci, cc);
                }
                want.set(r, cc, acc + b.get(0, cc));
            }
        }
        let diff = got.values().max_abs_diff(&want);
        assert!(diff <= 1e-12, "deepsets gap {diff}");
    }

    #[test]
    fn pure_bias_layer_is_constant_per_output_pattern() {
        let mut rng = rng_from_seed(3);
        let mut layer =
            EquivariantLinear::new(ClassSet::lightweight(2, 2).unwrap(), 2, 2).unwrap();
        for b in 0..layer.bias_count() {
            for v in layer.bias_mut(b).data_mut() {
                *v = rng.gen_range(-1.0..=1.0);
            }
        }
        let a = DenseTensor::random(4, 2, 2, &mut rng).unwrap();
        let out = layer.forward_lightweight(&a).unwrap();
        for (jr, j) in all_indices(4, 2).unwrap().iter().enumerate() {
            let expect = if j[0] == j[1] {
                layer.bias(0).row(0)
            } else {
                layer.bias(1).row(0)
            };
            assert_eq!(out.row(jr), expect);
        }
    }

    #[test]
    fn lightweight_rejects_invariant_output_and_foreign_classes() {
        let layer = EquivariantLinear::new(ClassSet::full(2, 0).unwrap(), 2, 2).unwrap();
        let mut rng = rng_from_seed(4);
        let a = DenseTensor::random(3, 2, 2, &mut rng).unwrap();
        assert!(matches!(
            layer.forward_lightweight(&a),
            Err(Error::LightweightUnsupported { .. })
        ));
        let full = EquivariantLinear::new(ClassSet::full(1, 1).unwrap(), 2, 2).unwrap();
        let a1 = DenseTensor::random(3, 1, 2, &mut rng).unwrap();
        assert!(matches!(
            full.forward_lightweight(&a1),
            Err(Error::NotLightweight)
        ));
    }

    #[test]
    fn sparse_full_grid_matches_dense() {
        for l in [0usize, 1, 2] {
            let layer = filled_layer(2, l, 2, 3, 20 + l as u64);
            let mut rng = rng_from_seed(30 + l as u64);
            let n = 4;
            let a = DenseTensor::random(n, 2, 2, &mut rng).unwrap();
            let grid_in = EdgeSet::full_grid(n, 2).unwrap();
            let grid_out = EdgeSet::full_grid(n, l).unwrap();
            let s = sparsify(&a, &grid_in).unwrap();
            let got = densify(&layer.forward_sparse(&s, &grid_out).unwrap()).unwrap();
            let want = layer.forward_dense(&a).unwrap();
            let diff = got.max_abs_diff(&want);
            assert!(diff <= 1e-10, "l={l} gap {diff}");
        }
    }

    #[test]
    fn sparse_empty_input_yields_bias_field() {
        let layer = filled_layer(2, 2, 2, 2, 44);
        let empty = EdgeSet::from_tuples(4, 2, &[]).unwrap();
        let s = SparseTensor::zeros(empty, 2);
        let eout = EdgeSet::from_tuples(4, 2, &[vec![0, 1], vec![2, 2]]).unwrap();
        let out = layer.forward_sparse(&s, &eout).unwrap();
        assert_eq!(out.row(0), layer.bias(1).row(0));
        assert_eq!(out.row(1), layer.bias(0).row(0));
    }

    #[test]
    fn sparse_respects_structural_zeros() {
        // A single off-diagonal edge: diagonal outputs see it only through
        // classes whose member sets include it.
        let mut layer = EquivariantLinear::new(ClassSet::full(1, 1).unwrap(), 1, 1).unwrap();
        *layer.weight_mut(0) = Mat::from_vec(1, 1, vec![1.0]);
        *layer.weight_mut(1) = Mat::from_vec(1, 1, vec![10.0]);
        let edges = EdgeSet::from_tuples(3, 1, &[vec![0]]).unwrap();
        let s = SparseTensor::from_values(edges, Mat::from_vec(1, 1, vec![2.0])).unwrap();
        let eout = EdgeSet::full_grid(3, 1).unwrap();
        let out = layer.forward_sparse(&s, &eout).unwrap();
        // j=0: same-value class pools node 0 -> 2*1; j=1,2: distinct class -> 2*10.
        assert_eq!(out.row(0), &[2.0]);
        assert_eq!(out.row(1), &[20.0]);
        assert_eq!(out.row(2), &[20.0]);
    }

    #[test]
    fn compact_plan_for_first_order_identity_class_is_identity() {
        let class = EqClass::new(Partition::from_rgs(vec![0, 0]).unwrap(), 1, 1).unwrap();
        let plan = CompactPlan::new(class, CompactRole::Query);
        assert_eq!(plan.u(), 1);
        assert_eq!(plan.map_index(&[4]), vec![4]);
        let full = filled_layer(1, 1, 2, 2, 50);
        let compact = plan.transfer(&full).unwrap();
        let mut rng = rng_from_seed(51);
        let a = DenseTensor::random(4, 1, 2, &mut rng).unwrap();
        let diff = compact
            .forward_dense(&a)
            .unwrap()
            .max_abs_diff(&full.forward_dense(&a).unwrap());
        assert!(diff <= 1e-15);
    }

    #[test]
    fn compact_key_of_merged_input_block_is_first_order() {
        // Class {{i1,i2},{j1}}: keys carry one distinct value.
        let class = EqClass::new(Partition::from_rgs(vec![0, 0, 1]).unwrap(), 2, 1).unwrap();
        let plan = CompactPlan::new(class.clone(), CompactRole::Key);
        assert_eq!(plan.u(), 1);
        assert_eq!(plan.map_index(&[3, 3]), vec![3]);
        let qplan = CompactPlan::new(class, CompactRole::Query);
        assert_eq!(qplan.u(), 1);
    }

    #[test]
    fn compact_query_values_match_full_layer_on_class_members() {
        // For every class of a 2->2 layer: zero the non-effective classes
        // of a random full layer, transfer, and compare on member outputs.
        let n = 4;
        let mut rng = rng_from_seed(60);
        let a = DenseTensor::random(n, 2, 3, &mut rng).unwrap();
        for class in ClassSet::full(2, 2).unwrap().iter() {
            let plan = CompactPlan::new(class.clone(), CompactRole::Query);
            let mut full = filled_layer(2, 2, 3, 2, 61);
            for (c, alpha) in full.class_set().clone().iter().enumerate() {
                if !plan.is_effective(alpha) {
                    for v in full.weight_mut(c).data_mut() {
                        *v = 0.0;
                    }
                }
            }
            let side = class.output().pattern.clone();
            for (b, p) in full.bias_partitions().to_vec().iter().enumerate() {
                if p != &side {
                    for v in full.bias_mut(b).data_mut() {
                        *v = 0.0;
                    }
                }
            }
            let compact = plan.transfer(&full).unwrap();
            let q_full = full.forward_dense(&a).unwrap();
            let q_compact = compact.forward_dense(&a).unwrap();
            let mut checked = 0;
            for (jr, j) in all_indices(n, 2).unwrap().iter().enumerate() {
                if pattern_of(j).unwrap() != class.output().pattern {
                    continue;
                }
                let jc = plan.map_index(j);
                let row_c = q_compact.get(&jc);
                let row_f = q_full.row(jr);
                let gap = row_f
                    .iter()
                    .zip(row_c)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(gap <= 1e-12, "class {:?} gap {gap}", class.partition());
                checked += 1;
            }
            assert!(checked > 0 || class.u_q() > n);
        }
    }

    #[test]
    fn same_seed_reproduces_parameters() {
        let a = filled_layer(2, 2, 3, 3, 99);
        let b = filled_layer(2, 2, 3, 3, 99);
        for c in 0..a.class_count() {
            assert_eq!(a.weight(c).data(), b.weight(c).data());
        }
    }

    #[test]
    fn class_count_drives_parameter_count() {
        let full = EquivariantLinear::new(ClassSet::full(2, 2).unwrap(), 2, 3).unwrap();
        assert_eq!(full.param_count(), 15 * 2 * 3 + 2 * 3);
        let light = EquivariantLinear::new(ClassSet::lightweight(2, 2).unwrap(), 2, 3).unwrap();
        assert_eq!(light.param_count(), 5 * 2 * 3 + 2 * 3);
    }
}
