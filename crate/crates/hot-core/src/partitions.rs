//! Set partitions of index positions and the equivalence classes they induce.
//!
//! A partition of positions {0, .., arity-1} is stored as a restricted
//! growth string (RGS): `rgs[t]` is the block label of position `t`, labels
//! appear in first-occurrence order, so `rgs[0] == 0` and
//! `rgs[t] <= 1 + max(rgs[..t])`. Two index tuples are equivalent when the
//! equality pattern of their entries matches the partition exactly: equal
//! within a block, distinct across blocks.
//!
//! Lexicographic RGS order is the canonical class order used for weight
//! layout, serialization, and reports.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest position count supported by the partition machinery.
pub const MAX_ARITY: usize = 12;

/// A set partition in restricted growth string form.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct Partition {
    rgs: Vec<u8>,
}

impl Partition {
    /// Builds a partition from an RGS, validating the growth restriction.
    pub fn from_rgs(rgs: Vec<u8>) -> Result<Self> {
        if rgs.len() > MAX_ARITY {
            return Err(Error::ArityTooLarge(rgs.len(), MAX_ARITY));
        }
        let mut max_seen: i32 = -1;
        for &v in &rgs {
            if v as i32 > max_seen + 1 {
                return Err(Error::InvalidRgs(rgs.clone()));
            }
            max_seen = max_seen.max(v as i32);
        }
        Ok(Partition { rgs })
    }

    /// The partition with every position in one block.
    pub fn all_in_one(arity: usize) -> Self {
        Partition {
            rgs: vec![0; arity],
        }
    }

    /// The partition with every position in its own block.
    pub fn all_distinct(arity: usize) -> Self {
        Partition {
            rgs: (0..arity as u8).collect(),
        }
    }

    pub fn arity(&self) -> usize {
        self.rgs.len()
    }

    /// Number of blocks; zero only for the empty partition.
    pub fn block_count(&self) -> usize {
        self.rgs.iter().map(|&v| v as usize + 1).max().unwrap_or(0)
    }

    pub fn rgs(&self) -> &[u8] {
        &self.rgs
    }

    pub fn label(&self, pos: usize) -> u8 {
        self.rgs[pos]
    }

    /// Positions grouped by block, blocks in first-occurrence order.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.block_count()];
        for (pos, &b) in self.rgs.iter().enumerate() {
            out[b as usize].push(pos);
        }
        out
    }
}

/// Writes the first-occurrence block labels of `values` into `out`.
///
/// `out` must have the same length as `values`. Works for empty input.
pub fn write_pattern_labels(values: &[usize], out: &mut [u8]) {
    debug_assert_eq!(values.len(), out.len());
    let mut next = 0u8;
    for t in 0..values.len() {
        let mut found = None;
        for s in 0..t {
            if values[s] == values[t] {
                found = Some(out[s]);
                break;
            }
        }
        out[t] = match found {
            Some(lbl) => lbl,
            None => {
                let lbl = next;
                next += 1;
                lbl
            }
        };
    }
}

/// The equality pattern of an index tuple as a partition of its positions.
///
/// `pattern_of(&[5, 2, 5])` yields RGS `[0, 1, 0]`. Empty indices are
/// rejected; internal callers that need the empty pattern use
/// [`write_pattern_labels`] directly.
pub fn pattern_of(index: &[usize]) -> Result<Partition> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if index.len() > MAX_ARITY {
        return Err(Error::ArityTooLarge(index.len(), MAX_ARITY));
    }
    let mut rgs = vec![0u8; index.len()];
    write_pattern_labels(index, &mut rgs);
    Ok(Partition { rgs })
}

/// All partitions of the given arity in lexicographic RGS order.
///
/// Arity zero yields the single empty partition.
pub fn enumerate_partitions(arity: usize) -> Result<Vec<Partition>> {
    if arity > MAX_ARITY {
        return Err(Error::ArityTooLarge(arity, MAX_ARITY));
    }
    if arity == 0 {
        return Ok(vec![Partition { rgs: Vec::new() }]);
    }
    let mut out = Vec::new();
    let mut rgs = vec![0u8; arity];
    loop {
        out.push(Partition { rgs: rgs.clone() });
        // Successor in lexicographic order: bump the rightmost position that
        // can still grow, then reset the suffix to zero.
        let mut t = arity;
        let mut advanced = false;
        while t > 1 {
            t -= 1;
            let max_prefix = rgs[..t].iter().copied().max().unwrap();
            if rgs[t] <= max_prefix {
                rgs[t] += 1;
                for v in rgs.iter_mut().skip(t + 1) {
                    *v = 0;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    Ok(out)
}

/// The Bell number counting partitions of the given arity.
pub fn bell_number(arity: usize) -> Result<u64> {
    // Bell triangle in u128 so the u64 overflow check is exact.
    let mut row: Vec<u128> = vec![1];
    let mut bell: u128 = 1;
    for _ in 0..arity {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        bell = next[0];
        row = next;
    }
    u64::try_from(bell).map_err(|_| Error::BellOverflow(arity))
}

/// Restriction of a class partition to one side of its positions.
#[derive(Clone, Debug)]
pub struct SideView {
    /// The restriction relabeled to a partition of the side's positions.
    pub pattern: Partition,
    /// Side position to side block label; identical to `pattern.rgs()`.
    pub block_of: Vec<u8>,
    /// Side block to its first side position.
    pub first_pos: Vec<usize>,
    /// Side block to the block label in the unrestricted partition.
    pub parent_label: Vec<u8>,
}

impl SideView {
    fn restrict(parent: &Partition, start: usize, len: usize) -> Self {
        let mut block_of = vec![0u8; len];
        let mut first_pos = Vec::new();
        let mut parent_label = Vec::new();
        for t in 0..len {
            let lbl = parent.label(start + t);
            match parent_label.iter().position(|&p| p == lbl) {
                Some(b) => block_of[t] = b as u8,
                None => {
                    block_of[t] = parent_label.len() as u8;
                    parent_label.push(lbl);
                    first_pos.push(t);
                }
            }
        }
        SideView {
            pattern: Partition {
                rgs: block_of.clone(),
            },
            block_of,
            first_pos,
            parent_label,
        }
    }

    pub fn block_count(&self) -> usize {
        self.first_pos.len()
    }
}

/// A block of a class partition holding both input and output positions.
///
/// For a compatible pair the value at `key_pos` of the input index equals
/// the value at `query_pos` of the output index, which is what lets kernel
/// attention group keys and queries into exact segments.
#[derive(Clone, Debug)]
pub struct SharedBlock {
    /// Offset into the input index.
    pub key_pos: usize,
    /// Offset into the output index.
    pub query_pos: usize,
}

/// An equivalence class of (input, output) index pairs for a k -> l layer.
#[derive(Clone, Debug)]
pub struct EqClass {
    partition: Partition,
    k: usize,
    l: usize,
    input: SideView,
    output: SideView,
    shared: Vec<SharedBlock>,
    lightweight: bool,
    /// Input position -> output offset carrying the same block, when one exists.
    fix_map: Vec<Option<usize>>,
}

impl EqClass {
    pub fn new(partition: Partition, k: usize, l: usize) -> Result<Self> {
        if partition.arity() != k + l {
            return Err(Error::ArityMismatch {
                expected: k + l,
                got: partition.arity(),
            });
        }
        let input = SideView::restrict(&partition, 0, k);
        let output = SideView::restrict(&partition, k, l);
        let mut shared = Vec::new();
        for b in 0..partition.block_count() {
            let first_in = (0..k).find(|&p| partition.label(p) as usize == b);
            let first_out = (0..l).find(|&q| partition.label(k + q) as usize == b);
            if let (Some(p), Some(q)) = (first_in, first_out) {
                shared.push(SharedBlock {
                    key_pos: p,
                    query_pos: q,
                });
            }
        }
        let mut lightweight = k > 0;
        let mut fix_map = vec![None; k];
        for p in 0..k {
            let lbl = partition.label(p);
            let out_pos = (0..l).find(|&q| partition.label(k + q) == lbl);
            fix_map[p] = out_pos;
            if out_pos.is_none() {
                lightweight = false;
            }
        }
        Ok(EqClass {
            partition,
            k,
            l,
            input,
            output,
            shared,
            lightweight,
            fix_map,
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn input(&self) -> &SideView {
        &self.input
    }

    pub fn output(&self) -> &SideView {
        &self.output
    }

    pub fn shared_blocks(&self) -> &[SharedBlock] {
        &self.shared
    }

    /// Number of distinct values in a compatible input index.
    pub fn u_k(&self) -> usize {
        self.input.block_count()
    }

    /// Number of distinct values in a compatible output index.
    pub fn u_q(&self) -> usize {
        self.output.block_count()
    }

    /// True when every block holding an input position also holds an output
    /// position, so the compatible input is a function of the output index.
    pub fn is_lightweight(&self) -> bool {
        self.lightweight
    }

    /// Whether the pair (i, j) matches this class's equality pattern.
    pub fn in_class(&self, i: &[usize], j: &[usize]) -> Result<bool> {
        if i.len() != self.k {
            return Err(Error::ArityMismatch {
                expected: self.k,
                got: i.len(),
            });
        }
        if j.len() != self.l {
            return Err(Error::ArityMismatch {
                expected: self.l,
                got: j.len(),
            });
        }
        let mut values = [0usize; MAX_ARITY];
        values[..self.k].copy_from_slice(i);
        values[self.k..self.k + self.l].copy_from_slice(j);
        let mut labels = [0u8; MAX_ARITY];
        write_pattern_labels(
            &values[..self.k + self.l],
            &mut labels[..self.k + self.l],
        );
        Ok(&labels[..self.k + self.l] == self.partition.rgs())
    }

    /// Compacts an output index to its distinct values in block order.
    pub fn compact_query_index(&self, j: &[usize]) -> Vec<usize> {
        self.output.first_pos.iter().map(|&p| j[p]).collect()
    }

    /// Compacts an input index to its distinct values in block order.
    pub fn compact_key_index(&self, i: &[usize]) -> Vec<usize> {
        self.input.first_pos.iter().map(|&p| i[p]).collect()
    }

    /// The unique compatible input index for a lightweight class.
    ///
    /// The output index must match the class's output restriction pattern.
    pub fn fix_index(&self, j: &[usize]) -> Result<Vec<usize>> {
        if !self.lightweight {
            return Err(Error::NotLightweight);
        }
        if j.len() != self.l {
            return Err(Error::ArityMismatch {
                expected: self.l,
                got: j.len(),
            });
        }
        let mut labels = [0u8; MAX_ARITY];
        write_pattern_labels(j, &mut labels[..j.len()]);
        if &labels[..j.len()] != self.output.pattern.rgs() {
            return Err(Error::PatternMismatch);
        }
        Ok(self
            .fix_map
            .iter()
            .map(|q| j[q.expect("lightweight class has a fix target per input position")])
            .collect())
    }
}

/// Which classes a layer carries weights for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassSetKind {
    /// Every partition of the k + l positions.
    Full,
    /// Classes whose compatible input is a function of the output index.
    Lightweight,
    /// For 1 -> k layers: classes whose output positions are pairwise
    /// distinct, which suffices on outputs with no repeated entries.
    UniformTarget,
    /// An explicit list, used by ablations and constructed models.
    Explicit,
}

/// An ordered set of equivalence classes for a k -> l layer.
#[derive(Clone, Debug)]
pub struct ClassSet {
    pub k: usize,
    pub l: usize,
    kind: ClassSetKind,
    classes: Vec<EqClass>,
}

/// Serializable description of a class set.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassSetDescriptor {
    pub k: usize,
    pub l: usize,
    pub kind: ClassSetKind,
    pub rgs: Vec<Vec<u8>>,
}

impl ClassSet {
    fn from_partitions(
        k: usize,
        l: usize,
        kind: ClassSetKind,
        parts: Vec<Partition>,
    ) -> Result<Self> {
        let classes = parts
            .into_iter()
            .map(|p| EqClass::new(p, k, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassSet { k, l, kind, classes })
    }

    /// All Bell(k + l) classes in canonical order.
    pub fn full(k: usize, l: usize) -> Result<Self> {
        let parts = enumerate_partitions(k + l)?;
        Self::from_partitions(k, l, ClassSetKind::Full, parts)
    }

    /// The lightweight subset; requires k >= 1 and l >= 1.
    pub fn lightweight(k: usize, l: usize) -> Result<Self> {
        if k == 0 || l == 0 {
            return Err(Error::LightweightUnsupported { k, l });
        }
        let parts = enumerate_partitions(k + l)?;
        let mut set = Self::from_partitions(k, l, ClassSetKind::Lightweight, parts)?;
        set.classes.retain(|c| c.is_lightweight());
        Ok(set)
    }

    /// The 1 + k classes of a 1 -> k layer that act on outputs with
    /// pairwise-distinct entries.
    pub fn uniform_target(k: usize) -> Result<Self> {
        let parts = enumerate_partitions(1 + k)?;
        let filtered = parts
            .into_iter()
            .filter(|p| {
                let outs = &p.rgs()[1..];
                (0..outs.len()).all(|a| (a + 1..outs.len()).all(|b| outs[a] != outs[b]))
            })
            .collect();
        Self::from_partitions(1, k, ClassSetKind::UniformTarget, filtered)
    }

    /// An explicit class list; partitions are sorted into canonical order.
    pub fn explicit(k: usize, l: usize, mut parts: Vec<Partition>) -> Result<Self> {
        parts.sort();
        parts.dedup();
        Self::from_partitions(k, l, ClassSetKind::Explicit, parts)
    }

    pub fn kind(&self) -> ClassSetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, idx: usize) -> &EqClass {
        &self.classes[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &EqClass> {
        self.classes.iter()
    }

    pub fn descriptor(&self) -> ClassSetDescriptor {
        ClassSetDescriptor {
            k: self.k,
            l: self.l,
            kind: self.kind,
            rgs: self.classes.iter().map(|c| c.partition().rgs().to_vec()).collect(),
        }
    }

    pub fn from_descriptor(d: &ClassSetDescriptor) -> Result<Self> {
        let parts = d
            .rgs
            .iter()
            .map(|r| Partition::from_rgs(r.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_partitions(d.k, d.l, d.kind, parts)
    }
}

/// Constant-time pattern-to-class lookup for hot loops.
///
/// Index tuples are labeled first-occurrence and the label string is read as
/// a base-arity number into a table. Covers arities up to 7, far beyond any
/// layer order used here.
pub struct ClassLookup {
    arity: usize,
    lut: Vec<u16>,
}

pub const NO_CLASS: u16 = u16::MAX;

impl ClassLookup {
    /// Builds a lookup that maps a pair pattern to its index in `set`.
    pub fn for_class_set(set: &ClassSet) -> Result<Self> {
        let arity = set.k + set.l;
        Self::build(arity, set.iter().map(|c| c.partition().clone()))
    }

    /// Builds a lookup over raw partitions in the given order.
    pub fn for_partitions(arity: usize, parts: &[Partition]) -> Result<Self> {
        Self::build(arity, parts.iter().cloned())
    }

    fn build(arity: usize, parts: impl Iterator<Item = Partition>) -> Result<Self> {
        if arity > 7 {
            return Err(Error::ArityTooLarge(arity, 7));
        }
        let size = (arity.max(1)).pow(arity as u32);
        let mut lut = vec![NO_CLASS; size];
        for (idx, p) in parts.enumerate() {
            debug_assert_eq!(p.arity(), arity);
            let code = Self::code_of_labels(arity, p.rgs());
            lut[code] = idx as u16;
        }
        Ok(ClassLookup { arity, lut })
    }

    fn code_of_labels(arity: usize, labels: &[u8]) -> usize {
        let base = arity.max(1);
        let mut code = 0usize;
        for &v in labels.iter().rev() {
            code = code * base + v as usize;
        }
        code
    }

    /// Class index of the concatenated (i, j) pattern, or `NO_CLASS`.
    #[inline]
    pub fn class_of_pair(&self, i: &[usize], j: &[usize]) -> u16 {
        debug_assert_eq!(i.len() + j.len(), self.arity);
        let mut values = [0usize; MAX_ARITY];
        values[..i.len()].copy_from_slice(i);
        values[i.len()..i.len() + j.len()].copy_from_slice(j);
        self.class_of(&values[..self.arity])
    }

    /// Class index of a single index tuple's pattern, or `NO_CLASS`.
    #[inline]
    pub fn class_of(&self, values: &[usize]) -> u16 {
        debug_assert_eq!(values.len(), self.arity);
        let base = self.arity.max(1);
        let mut labels = [0u8; MAX_ARITY];
        write_pattern_labels(values, &mut labels[..self.arity]);
        let mut code = 0usize;
        for &v in labels[..self.arity].iter().rev() {
            code = code * base + v as usize;
        }
        self.lut[code]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_of_basic() {
        assert_eq!(pattern_of(&[5, 2, 5]).unwrap().rgs(), &[0, 1, 0]);
        assert_eq!(pattern_of(&[7]).unwrap().rgs(), &[0]);
        assert_eq!(pattern_of(&[1, 1, 1]).unwrap().rgs(), &[0, 0, 0]);
        assert!(matches!(pattern_of(&[]), Err(Error::EmptyIndex)));
    }

    #[test]
    fn bell_numbers_match_known_values() {
        let expect = [1u64, 1, 2, 5, 15, 52, 203, 877, 4140];
        for (arity, &b) in expect.iter().enumerate() {
            assert_eq!(bell_number(arity).unwrap(), b, "bell({arity})");
        }
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        for arity in 0..=6 {
            let parts = enumerate_partitions(arity).unwrap();
            assert_eq!(parts.len() as u64, bell_number(arity).unwrap());
            for w in parts.windows(2) {
                assert!(w[0] < w[1], "not strictly increasing");
            }
        }
        let p4 = enumerate_partitions(4).unwrap();
        assert_eq!(p4[0].rgs(), &[0, 0, 0, 0]);
        assert_eq!(p4.last().unwrap().rgs(), &[0, 1, 2, 3]);
    }

    #[test]
    fn invalid_rgs_rejected() {
        assert!(Partition::from_rgs(vec![1]).is_err());
        assert!(Partition::from_rgs(vec![0, 2]).is_err());
        assert!(Partition::from_rgs(vec![0, 1, 3]).is_err());
        assert!(Partition::from_rgs(vec![0, 1, 2]).is_ok());
    }

    #[test]
    fn restriction_of_class_partition() {
        // {{i1, j1}, {i2}, {j2}} over k = 2, l = 2.
        let p = Partition::from_rgs(vec![0, 1, 0, 2]).unwrap();
        let c = EqClass::new(p, 2, 2).unwrap();
        assert_eq!(c.u_k(), 2);
        assert_eq!(c.u_q(), 2);
        assert_eq!(c.input().pattern.rgs(), &[0, 1]);
        assert_eq!(c.output().pattern.rgs(), &[0, 1]);
        assert_eq!(c.shared_blocks().len(), 1);
        assert_eq!(c.shared_blocks()[0].key_pos, 0);
        assert_eq!(c.shared_blocks()[0].query_pos, 0);
    }

    #[test]
    fn lightweight_membership() {
        // {{i1, j1}, {j2}} for k = 1, l = 2: fix((a, b)) = (a).
        let p = Partition::from_rgs(vec![0, 0, 1]).unwrap();
        let c = EqClass::new(p, 1, 2).unwrap();
        assert!(c.is_lightweight());
        assert_eq!(c.fix_index(&[4, 7]).unwrap(), vec![4]);
        assert!(matches!(c.fix_index(&[4, 4]), Err(Error::PatternMismatch)));

        // {{i1}, {j1}} is not lightweight: block {i1} has no output position.
        let p = Partition::from_rgs(vec![0, 1]).unwrap();
        let c = EqClass::new(p, 1, 1).unwrap();
        assert!(!c.is_lightweight());
        assert!(matches!(c.fix_index(&[3]), Err(Error::NotLightweight)));
    }

    #[test]
    fn lightweight_counts() {
        assert_eq!(ClassSet::lightweight(1, 1).unwrap().len(), 1);
        assert_eq!(ClassSet::lightweight(1, 2).unwrap().len(), 3);
        assert_eq!(ClassSet::lightweight(2, 1).unwrap().len(), 1);
        assert_eq!(ClassSet::lightweight(2, 2).unwrap().len(), 5);
        assert!(ClassSet::lightweight(2, 0).is_err());
        assert!(ClassSet::lightweight(0, 2).is_err());
    }

    #[test]
    fn all_in_one_block_is_always_lightweight() {
        for k in 1..=3 {
            for l in 1..=3 {
                let set = ClassSet::lightweight(k, l).unwrap();
                assert!(set
                    .iter()
                    .any(|c| c.partition() == &Partition::all_in_one(k + l)));
            }
        }
    }

    #[test]
    fn uniform_target_counts() {
        for k in 1..=4 {
            assert_eq!(ClassSet::uniform_target(k).unwrap().len(), 1 + k, "k = {k}");
        }
    }

    #[test]
    fn in_class_checks_pattern_exactly() {
        // {{i1, j1}, {i2, j2}}: identity pairs with distinct entries.
        let p = Partition::from_rgs(vec![0, 1, 0, 1]).unwrap();
        let c = EqClass::new(p, 2, 2).unwrap();
        assert!(c.in_class(&[3, 5], &[3, 5]).unwrap());
        assert!(!c.in_class(&[3, 3], &[3, 3]).unwrap());
        assert!(!c.in_class(&[3, 5], &[5, 3]).unwrap());
        assert!(c.in_class(&[3], &[3, 5]).is_err());
    }

    #[test]
    fn class_lookup_matches_in_class() {
        let set = ClassSet::full(2, 1).unwrap();
        let lut = ClassLookup::for_class_set(&set).unwrap();
        let n = 4;
        for a in 0..n {
            for b in 0..n {
                for q in 0..n {
                    let idx = lut.class_of_pair(&[a, b], &[q]);
                    for (ci, class) in set.iter().enumerate() {
                        let member = class.in_class(&[a, b], &[q]).unwrap();
                        assert_eq!(member, idx == ci as u16);
                    }
                }
            }
        }
    }

    #[test]
    fn bell_overflow_is_checked() {
        assert!(bell_number(25).is_ok());
        assert!(matches!(bell_number(26), Err(Error::BellOverflow(26))));
    }
}
