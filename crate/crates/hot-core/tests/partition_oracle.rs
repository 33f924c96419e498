//! Cross-checks the partition machinery against brute-force oracles.

use hot_core::partitions::{
    bell_number, enumerate_partitions, pattern_of, ClassLookup, ClassSet, Partition,
};
use proptest::prelude::*;

/// Oracle: all valid restricted growth strings by exhaustive recursion,
/// independent of the successor algorithm under test.
fn oracle_rgs(arity: usize) -> Vec<Vec<u8>> {
    fn extend(prefix: &mut Vec<u8>, arity: usize, out: &mut Vec<Vec<u8>>) {
        if prefix.len() == arity {
            out.push(prefix.clone());
            return;
        }
        let max = prefix.iter().copied().max().map_or(0, |m| m + 1);
        for v in 0..=max {
            prefix.push(v);
            extend(prefix, arity, out);
            prefix.pop();
        }
    }
    if arity == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    extend(&mut vec![0u8], arity, &mut out);
    let mut sorted = out;
    sorted.sort();
    sorted
}

#[test]
fn enumeration_matches_brute_force_oracle() {
    for arity in 0..=6 {
        let oracle = oracle_rgs(arity);
        let got: Vec<Vec<u8>> = enumerate_partitions(arity)
            .unwrap()
            .iter()
            .map(|p| p.rgs().to_vec())
            .collect();
        assert_eq!(got, oracle, "arity {arity}");
        assert_eq!(oracle.len() as u64, bell_number(arity).unwrap());
    }
}

#[test]
fn oracle_counts_pin_bell_values() {
    assert_eq!(oracle_rgs(4).len(), 15);
    assert_eq!(oracle_rgs(6).len(), 203);
}

#[test]
fn full_class_set_partitions_the_index_grid() {
    // Every (i, j) pair over [n]^k x [n]^l lies in exactly one class.
    let n = 3;
    let set = ClassSet::full(2, 2).unwrap();
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    let hits: Vec<usize> = set
                        .iter()
                        .enumerate()
                        .filter(|(_, cl)| cl.in_class(&[a, b], &[c, d]).unwrap())
                        .map(|(i, _)| i)
                        .collect();
                    assert_eq!(hits.len(), 1, "pair ({a},{b})->({c},{d})");
                    let lut = ClassLookup::for_class_set(&set).unwrap();
                    assert_eq!(lut.class_of_pair(&[a, b], &[c, d]) as usize, hits[0]);
                }
            }
        }
    }
}

#[test]
fn lightweight_fix_is_the_unique_compatible_input() {
    let n = 4;
    let set = ClassSet::lightweight(2, 2).unwrap();
    for class in set.iter() {
        for a in 0..n {
            for b in 0..n {
                let j = [a, b];
                let compatible: Vec<[usize; 2]> = (0..n)
                    .flat_map(|x| (0..n).map(move |y| [x, y]))
                    .filter(|i| class.in_class(i, &j).unwrap())
                    .collect();
                match class.fix_index(&j) {
                    Ok(fix) => {
                        assert_eq!(compatible, vec![[fix[0], fix[1]]]);
                    }
                    Err(_) => assert!(compatible.is_empty()),
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn pattern_is_invariant_under_injective_relabeling(
        idx in prop::collection::vec(0usize..5, 1..6),
        shift in 1usize..100,
    ) {
        // x -> x * 101 + shift is injective on small naturals.
        let relabeled: Vec<usize> = idx.iter().map(|&v| v * 101 + shift).collect();
        prop_assert_eq!(
            pattern_of(&idx).unwrap(),
            pattern_of(&relabeled).unwrap()
        );
    }

    #[test]
    fn pattern_rgs_is_always_valid(idx in prop::collection::vec(0usize..4, 1..7)) {
        let p = pattern_of(&idx).unwrap();
        prop_assert!(Partition::from_rgs(p.rgs().to_vec()).is_ok());
    }

    #[test]
    fn block_count_matches_distinct_values(idx in prop::collection::vec(0usize..6, 1..7)) {
        let mut distinct = idx.clone();
        distinct.sort();
        distinct.dedup();
        prop_assert_eq!(pattern_of(&idx).unwrap().block_count(), distinct.len());
    }
}
