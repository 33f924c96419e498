//! Higher-order self-attention between tensor orders.
//!
//! Attention from order k to order l carries, per equivalence class mu and
//! head, compact query/key layers (outputs of order u_q and u_k, the
//! distinct-value counts of mu's two sides) plus value and output matrices.
//! The output at index j sums, over classes matching j's pattern and over
//! heads, coefficient-weighted values of compatible inputs i.
//!
//! Three coefficient regimes:
//! - softmax: exp(<Q_j, K_i>/sqrt(d_h)) normalized over the exact
//!   compatible key set of each query (quadratic in entries);
//! - unit: every compatible pair gets coefficient 1 (the reduction mode
//!   that turns attention into a plain equivariant linear layer);
//! - feature maps: positive features phi make the numerator and
//!   denominator sums over keys independent of the query, so keys are
//!   aggregated once per key group and reused by every query (linear in
//!   entries). Keys group by the values at blocks shared between input and
//!   output positions; queries address exactly one group. Classes with no
//!   shared block have a single global group. Grouping drops the
//!   cross-index inequality constraints of the exact key set, so a query
//!   may attend to extra keys; the deviation is reported by the
//!   verification suites.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linear::{compact_class_set, EquivariantLinear};
use crate::mat::{dot, Mat};
use crate::ops_count::{bump, Counter};
use crate::partitions::{write_pattern_labels, ClassLookup, ClassSet, EqClass};
use crate::rng::rng_from_seed;
use crate::tensor::{checked_pow, increment_index, row_of, DenseTensor, EdgeSet, SparseTensor};

/// Positive feature map for kernelized attention coefficients.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum FeatureMap {
    /// Random-feature softmax estimator: phi(x) = exp(Wx - |x|^2/2 - shift)
    /// / sqrt(d_k) with W drawn i.i.d. standard normal from `seed`.
    Performer { d_k: usize, seed: u64 },
    /// Componentwise elu(x) + 1; feature count equals the head width.
    Elu1,
}

/// Coefficient regime of an attention layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum AttnKernel {
    Softmax,
    Feature(FeatureMap),
}

/// Per-(class, head) parameter bundle.
#[derive(Clone, Debug)]
pub struct ClassHeadParams {
    /// Compact query layer, order k -> u_q, channels d -> d_h.
    pub query: EquivariantLinear,
    /// Compact key layer, order k -> u_k, channels d -> d_h.
    pub key: EquivariantLinear,
    /// Value map, d x d_h.
    pub w_v: Mat,
    /// Output map, d_h x d.
    pub w_o: Mat,
}

/// Multi-head equivariant self-attention layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    class_set: ClassSet,
    d_in: usize,
    d_out: usize,
    d_h: usize,
    heads: usize,
    bundles: Vec<Vec<ClassHeadParams>>,
    kernel: AttnKernel,
    /// Divide feature-map coefficients by their per-query sum.
    pub normalize: bool,
    /// Replace every compatible-pair coefficient with 1.
    pub force_unit_alpha: bool,
    /// Fixed feature projection shared by all classes and heads.
    projection: Option<Mat>,
}

impl AttentionLayer {
    /// Builds a zero-initialized layer; `lightweight_qk` picks the compact
    /// query/key class sets (full sets are used where u = 0).
    pub fn new(
        class_set: ClassSet,
        d_in: usize,
        d_out: usize,
        d_h: usize,
        heads: usize,
        kernel: AttnKernel,
        lightweight_qk: bool,
    ) -> Result<Self> {
        if heads == 0 || d_h == 0 {
            return Err(Error::Dimension("needs at least one head and channel".into()));
        }
        let k = class_set.k;
        let mut bundles = Vec::with_capacity(class_set.len());
        for class in class_set.iter() {
            let mut per_head = Vec::with_capacity(heads);
            for _ in 0..heads {
                per_head.push(ClassHeadParams {
                    query: EquivariantLinear::new(
                        compact_class_set(k, class.u_q(), lightweight_qk)?,
                        d_in,
                        d_h,
                    )?,
                    key: EquivariantLinear::new(
                        compact_class_set(k, class.u_k(), lightweight_qk)?,
                        d_in,
                        d_h,
                    )?,
                    w_v: Mat::zeros(d_in, d_h),
                    w_o: Mat::zeros(d_h, d_out),
                });
            }
            bundles.push(per_head);
        }
        let projection = match &kernel {
            AttnKernel::Feature(FeatureMap::Performer { d_k, seed }) => Some(
                Mat::standard_normal(*d_k, d_h, &mut rng_from_seed(*seed)),
            ),
            _ => None,
        };
        Ok(AttentionLayer {
            class_set,
            d_in,
            d_out,
            d_h,
            heads,
            bundles,
            kernel,
            normalize: true,
            force_unit_alpha: false,
            projection,
        })
    }

    /// Seeded init of every query/key layer and value/output matrix.
    pub fn init_fan_scaled(&mut self, rng: &mut impl rand::Rng) {
        for per_head in &mut self.bundles {
            for b in per_head {
                b.query.init_fan_scaled(rng);
                b.key.init_fan_scaled(rng);
                b.w_v = Mat::fan_scaled_uniform(self.d_in, self.d_h, rng);
                b.w_o = Mat::fan_scaled_uniform(self.d_h, self.d_out, rng);
            }
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

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn kernel(&self) -> &AttnKernel {
        &self.kernel
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.class_set
    }

    pub fn bundle(&self, class: usize, head: usize) -> &ClassHeadParams {
        &self.bundles[class][head]
    }

    pub fn bundle_mut(&mut self, class: usize, head: usize) -> &mut ClassHeadParams {
        &mut self.bundles[class][head]
    }

    /// Restricts the layer to the classes accepted by `keep`; weights of
    /// retained classes are preserved.
    pub fn retain_classes(&mut self, keep: impl Fn(&EqClass) -> bool) -> Result<()> {
        let mut parts = Vec::new();
        let mut kept_bundles = Vec::new();
        for (c, class) in self.class_set.iter().enumerate() {
            if keep(class) {
                parts.push(class.partition().clone());
                kept_bundles.push(self.bundles[c].clone());
            }
        }
        self.class_set = ClassSet::explicit(self.class_set.k, self.class_set.l, parts)?;
        self.bundles = kept_bundles;
        Ok(())
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (c, per_head) in self.bundles.iter().enumerate() {
            for (h, b) in per_head.iter().enumerate() {
                out.extend(b.query.named_params(&format!("{prefix}.c{c}.h{h}.q")));
                out.extend(b.key.named_params(&format!("{prefix}.c{c}.h{h}.k")));
                out.push((format!("{prefix}.c{c}.h{h}.v"), &b.w_v));
                out.push((format!("{prefix}.c{c}.h{h}.o"), &b.w_o));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (c, per_head) in self.bundles.iter_mut().enumerate() {
            for (h, b) in per_head.iter_mut().enumerate() {
                out.extend(b.query.named_params_mut(&format!("{prefix}.c{c}.h{h}.q")));
                out.extend(b.key.named_params_mut(&format!("{prefix}.c{c}.h{h}.k")));
                out.push((format!("{prefix}.c{c}.h{h}.v"), &mut b.w_v));
                out.push((format!("{prefix}.c{c}.h{h}.o"), &mut b.w_o));
            }
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
                "attention expects {} channels, got {}",
                self.d_in, d
            )));
        }
        Ok(())
    }

    pub(crate) fn featurizer(&self, shift: f64) -> Featurizer {
        match &self.kernel {
            AttnKernel::Feature(FeatureMap::Performer { d_k, .. }) => Featurizer {
                kind: FeatKind::Performer,
                d_k: *d_k,
                prescale: 1.0 / (self.d_h as f64).sqrt().sqrt(),
                shift,
                proj: self.projection.clone(),
            },
            AttnKernel::Feature(FeatureMap::Elu1) => Featurizer {
                kind: FeatKind::Elu1,
                d_k: self.d_h,
                prescale: 1.0,
                shift: 0.0,
                proj: None,
            },
            AttnKernel::Softmax => unreachable!("softmax has no feature map"),
        }
    }

    /// Dense forward over full index grids.
    pub fn forward_dense(&self, a: &DenseTensor) -> Result<DenseTensor> {
        self.check_input(a.k(), a.d())?;
        let n = a.n();
        let mut out = DenseTensor::zeros(n, self.l(), self.d_out)?;
        let coeff = self.coeff_mode();
        let lookup = ClassLookup::for_class_set(&self.class_set)?;
        for (c, class) in self.class_set.iter().enumerate() {
            let keys = dense_side_rows(n, self.k(), class, Side::Key)?;
            let queries = dense_side_rows(n, self.l(), class, Side::Query)?;
            if keys.is_empty() || queries.is_empty() {
                continue;
            }
            let heads = self.head_ctx_dense(c, a)?;
            self.run_class(class, &lookup, c, &heads, &keys, &queries, out.values_mut(), &coeff)?;
        }
        Ok(out)
    }

    /// Sparse forward: inputs on E, outputs on `eout`.
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
        let mut out = SparseTensor::zeros(eout.clone(), self.d_out);
        let coeff = self.coeff_mode();
        let lookup = ClassLookup::for_class_set(&self.class_set)?;
        for (c, class) in self.class_set.iter().enumerate() {
            let mut keys = sparse_side_rows(s.edges(), class, Side::Key);
            let mut queries = sparse_side_rows(eout, class, Side::Query);
            if keys.is_empty() || queries.is_empty() {
                continue;
            }
            // Compact positions actually addressed by this class's rows.
            let k_tuples: Vec<Vec<usize>> = keys
                .iter()
                .map(|e| class.compact_key_index(&e.full))
                .collect();
            let q_tuples: Vec<Vec<usize>> = queries
                .iter()
                .map(|e| class.compact_query_index(&e.full))
                .collect();
            let k_pos = EdgeSet::from_tuples(s.n(), class.u_k(), &k_tuples)?;
            let q_pos = EdgeSet::from_tuples(s.n(), class.u_q(), &q_tuples)?;
            assign_side_rows(&mut keys, class, Side::Key, &k_pos);
            assign_side_rows(&mut queries, class, Side::Query, &q_pos);
            let heads = self.head_ctx_sparse(c, s, &k_pos, &q_pos)?;
            self.run_class(class, &lookup, c, &heads, &keys, &queries, out.values_mut(), &coeff)?;
        }
        Ok(out)
    }

    /// Feature-map coefficients evaluated with exact per-query key sets.
    ///
    /// This is the coupled reference for the decoupled (grouped) fast path:
    /// identical for classes whose key set does not depend on the query.
    pub fn forward_dense_coupled(&self, a: &DenseTensor) -> Result<DenseTensor> {
        if matches!(self.kernel, AttnKernel::Softmax) {
            return Err(Error::Unsupported(
                "coupled evaluation needs a feature map".into(),
            ));
        }
        self.check_input(a.k(), a.d())?;
        let n = a.n();
        let mut out = DenseTensor::zeros(n, self.l(), self.d_out)?;
        let lookup = ClassLookup::for_class_set(&self.class_set)?;
        for (c, class) in self.class_set.iter().enumerate() {
            let keys = dense_side_rows(n, self.k(), class, Side::Key)?;
            let queries = dense_side_rows(n, self.l(), class, Side::Query)?;
            if keys.is_empty() || queries.is_empty() {
                continue;
            }
            let heads = self.head_ctx_dense(c, a)?;
            self.run_class(
                class,
                &lookup,
                c,
                &heads,
                &keys,
                &queries,
                out.values_mut(),
                &CoeffMode::CoupledFeature,
            )?;
        }
        Ok(out)
    }

    fn coeff_mode(&self) -> CoeffMode {
        if self.force_unit_alpha {
            CoeffMode::Unit
        } else {
            match self.kernel {
                AttnKernel::Softmax => CoeffMode::Softmax,
                AttnKernel::Feature(_) => CoeffMode::Decoupled,
            }
        }
    }

    fn head_ctx_dense(&self, c: usize, a: &DenseTensor) -> Result<Vec<HeadCtx>> {
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let b = &self.bundles[c][h];
            let qt = eval_compact_dense(&b.query, a)?;
            let kt = eval_compact_dense(&b.key, a)?;
            heads.push(HeadCtx {
                qt: qt.values().clone(),
                kt: kt.values().clone(),
                vmat: a.values().matmul(&b.w_v),
                w_o: b.w_o.clone(),
            });
        }
        Ok(heads)
    }

    fn head_ctx_sparse(
        &self,
        c: usize,
        s: &SparseTensor,
        k_pos: &EdgeSet,
        q_pos: &EdgeSet,
    ) -> Result<Vec<HeadCtx>> {
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let b = &self.bundles[c][h];
            let qt = eval_compact_sparse(&b.query, s, q_pos)?;
            let kt = eval_compact_sparse(&b.key, s, k_pos)?;
            heads.push(HeadCtx {
                qt: qt.values().clone(),
                kt: kt.values().clone(),
                vmat: s.values().matmul(&b.w_v),
                w_o: b.w_o.clone(),
            });
        }
        Ok(heads)
    }

    /// Core per-class accumulation shared by the dense and sparse paths.
    #[allow(clippy::too_many_arguments)]
    fn run_class(
        &self,
        class: &EqClass,
        lookup: &ClassLookup,
        class_idx: usize,
        heads: &[HeadCtx],
        keys: &[RowEntry],
        queries: &[RowEntry],
        out: &mut Mat,
        coeff: &CoeffMode,
    ) -> Result<()> {
        match coeff {
            CoeffMode::Decoupled => self.run_class_decoupled(class, heads, keys, queries, out),
            _ => self.run_class_coupled(lookup, class_idx, heads, keys, queries, out, coeff),
        }
    }

    fn run_class_coupled(
        &self,
        lookup: &ClassLookup,
        class_idx: usize,
        heads: &[HeadCtx],
        keys: &[RowEntry],
        queries: &[RowEntry],
        out: &mut Mat,
        coeff: &CoeffMode,
    ) -> Result<()> {
        let d_h = self.d_h;
        let scale = 1.0 / (d_h as f64).sqrt();
        let feat = matches!(coeff, CoeffMode::CoupledFeature).then(|| self.featurizer(0.0));
        let mut members: Vec<usize> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        let mut pooled = vec![0.0; d_h];
        let mut phi_q = Vec::new();
        let mut phi_k = Vec::new();
        for q in queries {
            members.clear();
            for (ki, key) in keys.iter().enumerate() {
                if lookup.class_of_pair(&key.full, &q.full) == class_idx as u16 {
                    members.push(ki);
                }
            }
            bump(Counter::PairVisits, keys.len() as u64);
            if members.is_empty() {
                continue;
            }
            for ctx in heads {
                let qrow = ctx.qt.row(q.side_row);
                scores.clear();
                match coeff {
                    CoeffMode::Unit => scores.extend(members.iter().map(|_| 1.0)),
                    CoeffMode::Softmax => {
                        for &ki in &members {
                            let s = dot(qrow, ctx.kt.row(keys[ki].side_row)) * scale;
                            scores.push(s);
                        }
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            z += *s;
                        }
                        for s in scores.iter_mut() {
                            *s /= z;
                        }
                    }
                    CoeffMode::CoupledFeature => {
                        let feat = feat.as_ref().expect("feature context");
                        feat.features(qrow, &mut phi_q);
                        let mut z = 0.0;
                        for &ki in &members {
                            feat.features(ctx.kt.row(keys[ki].side_row), &mut phi_k);
                            let s = dot(&phi_q, &phi_k);
                            scores.push(s);
                            z += s;
                        }
                        if self.normalize {
                            for s in scores.iter_mut() {
                                *s /= z;
                            }
                        }
                    }
                    CoeffMode::Decoupled => unreachable!(),
                }
                for p in pooled.iter_mut() {
                    *p = 0.0;
                }
                for (&ki, &alpha) in members.iter().zip(&scores) {
                    let v = ctx.vmat.row(keys[ki].data_row);
                    for (p, &vv) in pooled.iter_mut().zip(v) {
                        *p += alpha * vv;
                    }
                }
                let orow = out.row_mut(q.data_row);
                for (cc, slot) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (ci, &p) in pooled.iter().enumerate() {
                        acc += p * ctx.w_o.get(ci, cc);
                    }
                    *slot += acc;
                }
            }
        }
        Ok(())
    }

    fn run_class_decoupled(
        &self,
        class: &EqClass,
        heads: &[HeadCtx],
        keys: &[RowEntry],
        queries: &[RowEntry],
        out: &mut Mat,
    ) -> Result<()> {
        let shared = class.shared_blocks();
        // Group keys by values at shared blocks; queries address one group.
        let mut group_of: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut key_group: Vec<usize> = Vec::with_capacity(keys.len());
        for key in keys {
            let sig: Vec<usize> = shared.iter().map(|sb| key.full[sb.key_pos]).collect();
            let next = group_of.len();
            let g = *group_of.entry(sig).or_insert(next);
            key_group.push(g);
        }
        let groups = group_of.len();
        let d_h = self.d_h;
        for ctx in heads {
            let feat0 = self.featurizer(0.0);
            let d_k = feat0.d_k;
            // First pass: raw features bases to find the stabilizing shift.
            let mut pre_k = Mat::zeros(keys.len(), d_k);
            let mut norm_k = vec![0.0; keys.len()];
            for (r, key) in keys.iter().enumerate() {
                feat0.project(ctx.kt.row(key.side_row), pre_k.row_mut(r), &mut norm_k[r]);
            }
            let mut pre_q = Mat::zeros(queries.len(), d_k);
            let mut norm_q = vec![0.0; queries.len()];
            for (r, q) in queries.iter().enumerate() {
                feat0.project(ctx.qt.row(q.side_row), pre_q.row_mut(r), &mut norm_q[r]);
            }
            let shift = pre_k
                .data()
                .iter()
                .chain(pre_q.data().iter())
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            let feat = self.featurizer(shift);
            // Key aggregation: one matrix and one vector per group.
            let mut agg = vec![Mat::zeros(d_k, d_h); groups];
            let mut zs = vec![vec![0.0; d_k]; groups];
            let mut phi = vec![0.0; d_k];
            for (r, key) in keys.iter().enumerate() {
                feat.finalize(pre_k.row(r), norm_k[r], &mut phi);
                let g = key_group[r];
                let s = &mut agg[g];
                let v = ctx.vmat.row(key.data_row);
                for (fk, &pv) in phi.iter().enumerate() {
                    let srow = s.row_mut(fk);
                    for (sv, &vv) in srow.iter_mut().zip(v) {
                        *sv += pv * vv;
                    }
                    zs[g][fk] += pv;
                }
                bump(Counter::KeyVisits, 1);
            }
            // Query pass.
            let mut num = vec![0.0; d_h];
            for (r, q) in queries.iter().enumerate() {
                let sig: Vec<usize> = shared.iter().map(|sb| q.full[sb.query_pos]).collect();
                let Some(&g) = group_of.get(&sig) else {
                    continue;
                };
                feat.finalize(pre_q.row(r), norm_q[r], &mut phi);
                let s = &agg[g];
                for nv in num.iter_mut() {
                    *nv = 0.0;
                }
                for (fk, &pq) in phi.iter().enumerate() {
                    let srow = s.row(fk);
                    for (nv, &sv) in num.iter_mut().zip(srow) {
                        *nv += pq * sv;
                    }
                }
                if self.normalize {
                    let den = dot(&phi, &zs[g]);
                    if den != 0.0 {
                        for nv in num.iter_mut() {
                            *nv /= den;
                        }
                    }
                }
                let orow = out.row_mut(q.data_row);
                for (cc, slot) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (ci, &p) in num.iter().enumerate() {
                        acc += p * ctx.w_o.get(ci, cc);
                    }
                    *slot += acc;
                }
                bump(Counter::QueryVisits, 1);
            }
        }
        Ok(())
    }

    /// Softmax coefficients of one (class, head) on a dense input, as
    /// (key row, query row, alpha) triples; a verification hook.
    pub fn softmax_coeffs_dense(
        &self,
        a: &DenseTensor,
        class_idx: usize,
        head: usize,
    ) -> Result<Vec<(usize, usize, f64)>> {
        self.check_input(a.k(), a.d())?;
        if !matches!(self.kernel, AttnKernel::Softmax) {
            return Err(Error::Unsupported("coefficients need softmax mode".into()));
        }
        let n = a.n();
        let class = self.class_set.get(class_idx);
        let keys = dense_side_rows(n, self.k(), class, Side::Key)?;
        let queries = dense_side_rows(n, self.l(), class, Side::Query)?;
        let b = &self.bundles[class_idx][head];
        let qt = eval_compact_dense(&b.query, a)?;
        let kt = eval_compact_dense(&b.key, a)?;
        let scale = 1.0 / (self.d_h as f64).sqrt();
        let mut out = Vec::new();
        for q in &queries {
            let mut members = Vec::new();
            for key in &keys {
                if class.in_class(&key.full, &q.full)? {
                    members.push(key);
                }
            }
            if members.is_empty() {
                continue;
            }
            let qrow = qt.values().row(q.side_row);
            let mut scores: Vec<f64> = members
                .iter()
                .map(|key| dot(qrow, kt.values().row(key.side_row)) * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for (key, s) in members.iter().zip(&scores) {
                out.push((key.data_row, q.data_row, s / z));
            }
        }
        Ok(out)
    }

    /// Union of the grouped key sets of a class, as data rows; equals the
    /// union over queries of exact compatible key sets (soundness check).
    pub fn decoupled_key_union(&self, edges: &EdgeSet, class_idx: usize) -> Vec<usize> {
        let class = self.class_set.get(class_idx);
        let keys = sparse_side_rows(edges, class, Side::Key);
        keys.iter().map(|k| k.data_row).collect()
    }
}

/// Evaluates a compact query/key layer on a dense input, using the fast
/// path when its class set allows it.
fn eval_compact_dense(layer: &EquivariantLinear, a: &DenseTensor) -> Result<DenseTensor> {
    if layer.l() >= 1 && layer.class_set().iter().all(|c| c.is_lightweight()) {
        layer.forward_lightweight(a)
    } else {
        layer.forward_dense(a)
    }
}

fn eval_compact_sparse(
    layer: &EquivariantLinear,
    s: &SparseTensor,
    eout: &EdgeSet,
) -> Result<SparseTensor> {
    layer.forward_sparse(s, eout)
}

/// A query or key row of one class: the full index tuple, the row in the
/// value matrix (keys) or output matrix (queries), and the row in the
/// compact query/key tensor.
pub(crate) struct RowEntry {
    pub(crate) full: Vec<usize>,
    pub(crate) data_row: usize,
    pub(crate) side_row: usize,
}

pub(crate) enum Side {
    Key,
    Query,
}

enum CoeffMode {
    Unit,
    Softmax,
    CoupledFeature,
    Decoupled,
}

struct HeadCtx {
    qt: Mat,
    kt: Mat,
    vmat: Mat,
    w_o: Mat,
}

/// Rows of the full grid whose pattern matches one side of a class; the
/// compact row addresses the dense compact tensor by row-major encoding.
fn dense_side_rows(n: usize, order: usize, class: &EqClass, side: Side) -> Result<Vec<RowEntry>> {
    let rows = checked_pow(n, order)?;
    let (pattern, u): (&[u8], usize) = match side {
        Side::Key => (class.input().pattern.rgs(), class.u_k()),
        Side::Query => (class.output().pattern.rgs(), class.u_q()),
    };
    let mut out = Vec::new();
    let mut idx = vec![0usize; order];
    let mut labels = vec![0u8; order];
    for r in 0..rows {
        write_pattern_labels(&idx, &mut labels);
        if labels.as_slice() == pattern {
            let compact = match side {
                Side::Key => class.compact_key_index(&idx),
                Side::Query => class.compact_query_index(&idx),
            };
            debug_assert_eq!(compact.len(), u);
            out.push(RowEntry {
                full: idx.clone(),
                data_row: r,
                side_row: row_of(&compact, n),
            });
        }
        increment_index(&mut idx, n);
    }
    Ok(out)
}

/// Edge rows whose pattern matches one side of a class; compact rows are
/// positions in the deduplicated compact edge set built over these rows.
pub(crate) fn sparse_side_rows(edges: &EdgeSet, class: &EqClass, side: Side) -> Vec<RowEntry> {
    let pattern: &[u8] = match side {
        Side::Key => class.input().pattern.rgs(),
        Side::Query => class.output().pattern.rgs(),
    };
    let order = edges.k();
    let mut labels = vec![0u8; order];
    let mut out = Vec::new();
    for r in 0..edges.len() {
        let idx = edges.edge(r);
        write_pattern_labels(idx, &mut labels);
        if labels.as_slice() == pattern {
            out.push(RowEntry {
                full: idx.to_vec(),
                data_row: r,
                side_row: 0,
            });
        }
    }
    out
}

/// Fills in compact-tensor rows for sparse entries once the compact edge
/// sets are known.
pub(crate) fn assign_side_rows(entries: &mut [RowEntry], class: &EqClass, side: Side, pos: &EdgeSet) {
    for e in entries {
        let compact = match side {
            Side::Key => class.compact_key_index(&e.full),
            Side::Query => class.compact_query_index(&e.full),
        };
        e.side_row = pos
            .position_of(&compact)
            .expect("compact position was inserted for this row");
    }
}

/// Positive feature map application.
#[derive(Clone)]
pub struct Featurizer {
    pub(crate) kind: FeatKind,
    pub(crate) d_k: usize,
    pub(crate) prescale: f64,
    pub(crate) shift: f64,
    pub(crate) proj: Option<Mat>,
}

#[derive(Clone, Copy, PartialEq)]
pub(crate) enum FeatKind {
    Performer,
    Elu1,
}

impl Featurizer {
    /// Standalone constructor for estimator tests: no input prescaling.
    pub fn performer(d_k: usize, d_h: usize, seed: u64) -> Self {
        Featurizer {
            kind: FeatKind::Performer,
            d_k,
            prescale: 1.0,
            shift: 0.0,
            proj: Some(Mat::standard_normal(d_k, d_h, &mut rng_from_seed(seed))),
        }
    }

    pub fn elu1(d_h: usize) -> Self {
        Featurizer {
            kind: FeatKind::Elu1,
            d_k: d_h,
            prescale: 1.0,
            shift: 0.0,
            proj: None,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// Pre-exponential projection (Performer) or final features (elu1).
    fn project(&self, x: &[f64], out: &mut [f64], norm: &mut f64) {
        match self.kind {
            FeatKind::Performer => {
                let w = self.proj.as_ref().expect("performer projection");
                let mut nrm = 0.0;
                for &v in x {
                    let sv = v * self.prescale;
                    nrm += sv * sv;
                }
                *norm = nrm / 2.0;
                for (r, slot) in out.iter_mut().enumerate() {
                    let wrow = w.row(r);
                    let mut acc = 0.0;
                    for (c, &v) in x.iter().enumerate() {
                        acc += wrow[c] * (v * self.prescale);
                    }
                    *slot = acc;
                }
            }
            FeatKind::Elu1 => {
                *norm = 0.0;
                for (slot, &v) in out.iter_mut().zip(x) {
                    *slot = if v >= 0.0 { v + 1.0 } else { v.exp() };
                }
            }
        }
    }

    fn finalize(&self, pre: &[f64], norm: f64, out: &mut [f64]) {
        match self.kind {
            FeatKind::Performer => {
                let scale = 1.0 / (self.d_k as f64).sqrt();
                for (slot, &p) in out.iter_mut().zip(pre) {
                    *slot = (p - norm - self.shift).exp() * scale;
                }
            }
            FeatKind::Elu1 => out.copy_from_slice(pre),
        }
    }

    /// One-shot feature computation.
    pub fn features(&self, x: &[f64], out: &mut Vec<f64>) {
        let mut pre = vec![0.0; self.d_k];
        let mut norm = 0.0;
        self.project(x, &mut pre, &mut norm);
        out.resize(self.d_k, 0.0);
        self.finalize(&pre, norm, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partitions::Partition;
    use crate::tensor::{densify, sparsify, NodePerm};
    use rand::Rng;

    fn random_layer(
        k: usize,
        l: usize,
        d: usize,
        d_h: usize,
        heads: usize,
        kernel: AttnKernel,
        seed: u64,
    ) -> AttentionLayer {
        let mut layer =
            AttentionLayer::new(ClassSet::full(k, l).unwrap(), d, d, d_h, heads, kernel, true)
                .unwrap();
        layer.init_fan_scaled(&mut rng_from_seed(seed));
        layer
    }

    #[test]
    fn single_member_softmax_coefficient_is_one() {
        // Class {{1,2}} for k=l=1: the only compatible key of j is j itself.
        let layer = random_layer(1, 1, 2, 4, 1, AttnKernel::Softmax, 3);
        let mut rng = rng_from_seed(4);
        let a = DenseTensor::random(4, 1, 2, &mut rng).unwrap();
        let coeffs = layer.softmax_coeffs_dense(&a, 0, 0).unwrap();
        assert_eq!(coeffs.len(), 4);
        for (i, j, alpha) in coeffs {
            assert_eq!(i, j);
            assert!((alpha - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_coefficients() {
        let mut layer = random_layer(1, 1, 2, 4, 1, AttnKernel::Softmax, 5);
        let b = layer.bundle_mut(1, 0);
        for (_, m) in b.query.named_params_mut("") {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        for (_, m) in b.key.named_params_mut("") {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = rng_from_seed(6);
        let n = 5;
        let a = DenseTensor::random(n, 1, 2, &mut rng).unwrap();
        let coeffs = layer.softmax_coeffs_dense(&a, 1, 0).unwrap();
        for (_, _, alpha) in coeffs {
            assert!((alpha - 1.0 / (n - 1) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let layer = random_layer(2, 2, 3, 4, 2, AttnKernel::Softmax, 7);
        let mut rng = rng_from_seed(8);
        let a = DenseTensor::random(4, 2, 3, &mut rng).unwrap();
        for c in 0..layer.class_set().len() {
            for h in 0..2 {
                let coeffs = layer.softmax_coeffs_dense(&a, c, h).unwrap();
                let mut per_query: HashMap<usize, f64> = HashMap::new();
                for (_, j, alpha) in coeffs {
                    *per_query.entry(j).or_insert(0.0) += alpha;
                }
                for (_, total) in per_query {
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_value_matrices_give_zero_output() {
        let mut layer = random_layer(2, 1, 2, 4, 2, AttnKernel::Softmax, 9);
        for c in 0..layer.class_set().len() {
            for h in 0..2 {
                for v in layer.bundle_mut(c, h).w_v.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut rng = rng_from_seed(10);
        let a = DenseTensor::random(4, 2, 2, &mut rng).unwrap();
        let out = layer.forward_dense(&a).unwrap();
        assert!(out.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparse_full_grid_matches_dense_softmax() {
        let layer = random_layer(2, 2, 2, 4, 2, AttnKernel::Softmax, 11);
        let mut rng = rng_from_seed(12);
        let n = 4;
        let a = DenseTensor::random(n, 2, 2, &mut rng).unwrap();
        let grid = EdgeSet::full_grid(n, 2).unwrap();
        let s = sparsify(&a, &grid).unwrap();
        let got = densify(&layer.forward_sparse(&s, &grid).unwrap()).unwrap();
        let want = layer.forward_dense(&a).unwrap();
        let diff = got.max_abs_diff(&want);
        assert!(diff <= 1e-10, "gap {diff}");
    }

    #[test]
    fn sparse_full_grid_matches_dense_kernel() {
        let kernel = AttnKernel::Feature(FeatureMap::Performer { d_k: 16, seed: 99 });
        let layer = random_layer(2, 1, 2, 4, 2, kernel, 13);
        let mut rng = rng_from_seed(14);
        let n = 4;
        let a = DenseTensor::random(n, 2, 2, &mut rng).unwrap();
        let grid_in = EdgeSet::full_grid(n, 2).unwrap();
        let grid_out = EdgeSet::full_grid(n, 1).unwrap();
        let s = sparsify(&a, &grid_in).unwrap();
        let got = densify(&layer.forward_sparse(&s, &grid_out).unwrap()).unwrap();
        let want = layer.forward_dense(&a).unwrap();
        let diff = got.max_abs_diff(&want);
        assert!(diff <= 1e-10, "gap {diff}");
    }

    #[test]
    fn attention_is_equivariant() {
        for kernel in [
            AttnKernel::Softmax,
            AttnKernel::Feature(FeatureMap::Performer { d_k: 8, seed: 1 }),
            AttnKernel::Feature(FeatureMap::Elu1),
        ] {
            let layer = random_layer(2, 2, 2, 4, 2, kernel, 15);
            let mut rng = rng_from_seed(16);
            let n = 4;
            let a = DenseTensor::random(n, 2, 2, &mut rng).unwrap();
            let p = NodePerm::random(n, &mut rng);
            let lhs = layer.forward_dense(&a.permuted(&p).unwrap()).unwrap();
            let rhs = layer.forward_dense(&a).unwrap().permuted(&p).unwrap();
            let diff = lhs.max_abs_diff(&rhs);
            assert!(diff <= 1e-10, "gap {diff}");
        }
    }

    #[test]
    fn unit_alpha_pools_compatible_inputs() {
        // One class, one head, identity value/output: forced unit
        // coefficients sum inputs over the class member set.
        let part = Partition::from_rgs(vec![0, 1]).unwrap();
        let set = ClassSet::explicit(1, 1, vec![part]).unwrap();
        let mut layer =
            AttentionLayer::new(set, 2, 2, 2, 1, AttnKernel::Softmax, true).unwrap();
        layer.force_unit_alpha = true;
        layer.bundle_mut(0, 0).w_v = Mat::eye(2);
        layer.bundle_mut(0, 0).w_o = Mat::eye(2);
        let mut rng = rng_from_seed(17);
        let n = 4;
        let a = DenseTensor::random(n, 1, 2, &mut rng).unwrap();
        let out = layer.forward_dense(&a).unwrap();
        for j in 0..n {
            for c in 0..2 {
                let want: f64 = (0..n).filter(|&i| i != j).map(|i| a.row(i)[c]).sum();
                assert!((out.row(j)[c] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_equals_coupled_when_key_set_is_query_free() {
        // Invariant attention (l = 0): no shared blocks, one global group,
        // and the exact key set of the single query is the whole class.
        let kernel = AttnKernel::Feature(FeatureMap::Performer { d_k: 8, seed: 2 });
        let layer = random_layer(2, 0, 2, 4, 2, kernel, 19);
        let mut rng = rng_from_seed(20);
        let a = DenseTensor::random(4, 2, 2, &mut rng).unwrap();
        let fast = layer.forward_dense(&a).unwrap();
        let coupled = layer.forward_dense_coupled(&a).unwrap();
        let diff = fast.max_abs_diff(&coupled);
        assert!(diff <= 1e-12, "gap {diff}");
    }

    #[test]
    fn grouped_key_union_covers_exact_unions() {
        // For each class, the union over queries of exact key sets must
        // equal the union of grouped key sets (no key lost or invented
        // beyond pattern filtering).
        let n = 4;
        let layer = random_layer(2, 2, 2, 4, 1, AttnKernel::Softmax, 21);
        let grid = EdgeSet::full_grid(n, 2).unwrap();
        for (c, class) in layer.class_set().iter().enumerate() {
            let grouped = layer.decoupled_key_union(&grid, c);
            let mut exact: Vec<usize> = Vec::new();
            let queries = dense_side_rows(n, 2, class, Side::Query).unwrap();
            let keys = dense_side_rows(n, 2, class, Side::Key).unwrap();
            for q in &queries {
                for key in &keys {
                    if class.in_class(&key.full, &q.full).unwrap() {
                        exact.push(key.data_row);
                    }
                }
            }
            exact.sort_unstable();
            exact.dedup();
            let mut grouped_sorted = grouped.clone();
            grouped_sorted.sort_unstable();
            if queries.is_empty() {
                continue;
            }
            assert_eq!(grouped_sorted, exact, "class {:?}", class.partition());
        }
    }

    #[test]
    fn performer_estimates_the_exponential_kernel() {
        // E[phi(q)^T phi(k)] = exp(<q,k>) for the unshifted estimator.
        let d_h = 4;
        let feat = Featurizer::performer(512, d_h, 77);
        let mut rng = rng_from_seed(78);
        let mut worst: f64 = 0.0;
        let mut phi_q = Vec::new();
        let mut phi_k = Vec::new();
        for _ in 0..100 {
            let q: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            let k: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            feat.features(&q, &mut phi_q);
            feat.features(&k, &mut phi_k);
            let est = dot(&phi_q, &phi_k);
            let want = dot(&q, &k).exp();
            worst = worst.max((est - want).abs() / want);
        }
        assert!(worst <= 0.15, "relative error {worst}");
    }

    #[test]
    fn same_seed_reproduces_features() {
        let a = Featurizer::performer(16, 4, 5);
        let b = Featurizer::performer(16, 4, 5);
        let x = vec![0.3, -0.2, 0.8, 0.1];
        let mut fa = Vec::new();
        let mut fb = Vec::new();
        a.features(&x, &mut fa);
        b.features(&x, &mut fb);
        assert_eq!(fa, fb);
        assert!(fa.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_input_performer_features_are_uniform() {
        let feat = Featurizer::performer(16, 4, 6);
        let mut f = Vec::new();
        feat.features(&[0.0; 4], &mut f);
        for v in f {
            assert!((v - 1.0 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn retain_classes_keeps_weights() {
        let mut layer = random_layer(2, 2, 2, 4, 1, AttnKernel::Softmax, 23);
        let all_one = layer.bundle(0, 0).w_v.clone();
        layer
            .retain_classes(|c| c.partition().block_count() == 1)
            .unwrap();
        assert_eq!(layer.class_set().len(), 1);
        assert_eq!(layer.bundle(0, 0).w_v.data(), all_one.data());
    }

    #[test]
    fn sparse_query_with_no_keys_contributes_nothing() {
        // Keys exist only for the diagonal class; off-diagonal outputs get
        // zero from classes without compatible keys.
        let kernel = AttnKernel::Softmax;
        let layer = random_layer(2, 2, 2, 4, 1, kernel, 25);
        let edges = EdgeSet::from_tuples(4, 2, &[vec![0, 0]]).unwrap();
        let mut rng = rng_from_seed(26);
        let s = SparseTensor::random(edges, 2, &mut rng);
        let eout = EdgeSet::from_tuples(4, 2, &[vec![0, 1], vec![1, 1], vec![2, 3]]).unwrap();
        let out = layer.forward_sparse(&s, &eout).unwrap();
        // (2,3) shares no node with the key (0,0): all its classes with
        // shared blocks are empty; only fully-global classes contribute.
        assert!(out.values().is_finite());
    }
}
