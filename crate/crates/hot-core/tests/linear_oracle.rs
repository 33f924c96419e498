//! Correctness reference for the equivariant linear layer.
//!
//! The oracle below loops over every (input index, output index) pair and
//! tests class membership by recomputing equality patterns from scratch; it
//! is the literal basis-tensor sum. The library's forward must reproduce it
//! bit for bit because the float accumulation order (pool members per class
//! in lexicographic input order, then multiply) is part of the contract.

use hot_core::linear::EquivariantLinear;
use hot_core::mat::Mat;
use hot_core::partitions::ClassSet;
use hot_core::rng::rng_from_seed;
use hot_core::tensor::{all_indices, DenseTensor, EdgeSet, NodePerm};

/// First-occurrence equality labels, recomputed independently.
fn labels_of(values: &[usize]) -> Vec<usize> {
    let mut labels = Vec::with_capacity(values.len());
    let mut seen: Vec<usize> = Vec::new();
    for &v in values {
        match seen.iter().position(|&s| s == v) {
            Some(b) => labels.push(b),
            None => {
                labels.push(seen.len());
                seen.push(v);
            }
        }
    }
    labels
}

/// Exhaustive-loop evaluation of the layer on a dense input.
///
/// out_j = sum_mu (sum_{i : (i,j) in mu} A_i) w_mu + b_{pattern(j)}.
fn oracle_forward(layer: &EquivariantLinear, a: &DenseTensor) -> DenseTensor {
    let n = a.n();
    let (k, l) = (layer.k(), layer.l());
    let inputs = all_indices(n, k).unwrap();
    let outputs = all_indices(n, l).unwrap();
    let mut out = DenseTensor::zeros(n, l, layer.d_out()).unwrap();
    for (jr, j) in outputs.iter().enumerate() {
        let mut row = vec![0.0; layer.d_out()];
        let j_labels = labels_of(j);
        for (b, part) in layer.bias_partitions().iter().enumerate() {
            let rgs: Vec<usize> = part.rgs().iter().map(|&x| x as usize).collect();
            if rgs == j_labels {
                row.copy_from_slice(layer.bias(b).row(0));
            }
        }
        for (c, class) in layer.class_set().iter().enumerate() {
            let target: Vec<usize> = class.partition().rgs().iter().map(|&x| x as usize).collect();
            let mut pooled = vec![0.0; layer.d_in()];
            for i in &inputs {
                let mut cat = i.clone();
                cat.extend_from_slice(j);
                if labels_of(&cat) == target {
                    for (p, &v) in pooled.iter_mut().zip(a.get(i)) {
                        *p += v;
                    }
                }
            }
            let w = layer.weight(c);
            for (cc, slot) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (ci, &p) in pooled.iter().enumerate() {
                    acc += p * w.get(ci, cc);
                }
                *slot += acc;
            }
        }
        out.values_mut().row_mut(jr).copy_from_slice(&row);
    }
    out
}

fn random_layer(k: usize, l: usize, d_in: usize, d_out: usize, seed: u64) -> EquivariantLinear {
    let mut rng = rng_from_seed(seed);
    let mut layer = EquivariantLinear::new(ClassSet::full(k, l).unwrap(), d_in, d_out).unwrap();
    layer.init_fan_scaled(&mut rng);
    for b in 0..layer.bias_count() {
        for v in layer.bias_mut(b).data_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
    }
    layer
}

use rand::Rng;

#[test]
fn dense_forward_matches_exhaustive_oracle_bitwise() {
    let mut seed = 100;
    for (k, l) in [(1, 1), (2, 1), (1, 2), (2, 2), (1, 0), (2, 0), (0, 0)] {
        for n in [3, 4] {
            seed += 1;
            let layer = random_layer(k, l, 2, 3, seed);
            let mut rng = rng_from_seed(seed ^ 0xabcd);
            let a = DenseTensor::random(n, k, 2, &mut rng).unwrap();
            let got = layer.forward_dense(&a).unwrap();
            let want = oracle_forward(&layer, &a);
            assert_eq!(
                got.values().data(),
                want.values().data(),
                "k={k} l={l} n={n}"
            );
        }
    }
}

#[test]
fn third_order_output_matches_oracle() {
    let layer = random_layer(1, 3, 2, 2, 77);
    let mut rng = rng_from_seed(78);
    let a = DenseTensor::random(3, 1, 2, &mut rng).unwrap();
    let got = layer.forward_dense(&a).unwrap();
    let want = oracle_forward(&layer, &a);
    assert_eq!(got.values().data(), want.values().data());
}

#[test]
fn second_order_to_first_matches_oracle_triple_loop() {
    // Random L_{2->1} at n=3, d=2 against the exhaustive pair loop.
    let layer = random_layer(2, 1, 2, 2, 17);
    let mut rng = rng_from_seed(18);
    let a = DenseTensor::random(3, 2, 2, &mut rng).unwrap();
    let got = layer.forward_dense(&a).unwrap();
    let want = oracle_forward(&layer, &a);
    assert_eq!(got.values().data(), want.values().data());
}

#[test]
fn oracle_agrees_that_forward_is_equivariant() {
    // Independent cross-check: permute-then-oracle equals oracle-then-permute.
    let layer = random_layer(2, 2, 2, 2, 41);
    let mut rng = rng_from_seed(42);
    let a = DenseTensor::random(4, 2, 2, &mut rng).unwrap();
    let p = NodePerm::random(4, &mut rng);
    let lhs = oracle_forward(&layer, &a.permuted(&p).unwrap());
    let rhs = oracle_forward(&layer, &a).permuted(&p).unwrap();
    let diff = lhs.max_abs_diff(&rhs);
    assert!(diff <= 1e-10, "oracle equivariance violated: {diff}");
}

#[test]
fn sparse_on_full_grid_matches_oracle() {
    let layer = random_layer(2, 2, 2, 2, 55);
    let mut rng = rng_from_seed(56);
    let n = 4;
    let a = DenseTensor::random(n, 2, 2, &mut rng).unwrap();
    let grid = EdgeSet::full_grid(n, 2).unwrap();
    let s = hot_core::tensor::sparsify(&a, &grid).unwrap();
    let got = hot_core::tensor::densify(&layer.forward_sparse(&s, &grid).unwrap()).unwrap();
    let want = oracle_forward(&layer, &a);
    let diff = got.max_abs_diff(&want);
    assert!(diff <= 1e-10, "sparse/dense oracle gap {diff}");
}

#[test]
fn lightweight_matches_oracle_with_zeroed_complement() {
    // A full layer whose non-lightweight weights are zero, evaluated by the
    // oracle, must equal the lightweight fast path of the restricted layer.
    for (k, l) in [(1, 1), (1, 2), (2, 2)] {
        let mut rng = rng_from_seed(90 + k as u64 * 10 + l as u64);
        let light_set = ClassSet::lightweight(k, l).unwrap();
        let mut light = EquivariantLinear::new(light_set, 2, 2).unwrap();
        light.init_fan_scaled(&mut rng);
        for b in 0..light.bias_count() {
            for v in light.bias_mut(b).data_mut() {
                *v = rng.gen_range(-1.0..=1.0);
            }
        }
        let mut full = EquivariantLinear::new(ClassSet::full(k, l).unwrap(), 2, 2).unwrap();
        for (c, class) in full.class_set().clone().iter().enumerate() {
            if let Some(idx) = light
                .class_set()
                .iter()
                .position(|lc| lc.partition() == class.partition())
            {
                *full.weight_mut(c) = light.weight(idx).clone();
            }
        }
        for b in 0..full.bias_count() {
            *full.bias_mut(b) = light.bias(b).clone();
        }
        let a = DenseTensor::random(4, k, 2, &mut rng).unwrap();
        let got = light.forward_lightweight(&a).unwrap();
        let want = oracle_forward(&full, &a);
        let diff = got.max_abs_diff(&want);
        assert!(diff <= 1e-12, "k={k} l={l} gap {diff}");
    }
}

#[test]
fn degenerate_small_n_has_empty_distinct_classes() {
    // Fewer nodes than positions: classes needing more unique values than n
    // have no members, so only the all-equal pooling survives.
    let layer = random_layer(2, 1, 2, 2, 61);
    let mut rng = rng_from_seed(62);
    let a = DenseTensor::random(1, 2, 2, &mut rng).unwrap();
    let got = layer.forward_dense(&a).unwrap();
    let want = oracle_forward(&layer, &a);
    assert_eq!(got.values().data(), want.values().data());
}

#[test]
fn init_statistics_match_fan_scaling() {
    // Uniform(-b, b) with b^2 = 6/(fan_in+fan_out) has variance 2/(fan_in+fan_out).
    let mut rng = rng_from_seed(7);
    let d_in = 50;
    let d_out = 50;
    let mut layer =
        EquivariantLinear::new(ClassSet::full(1, 1).unwrap(), d_in, d_out).unwrap();
    layer.init_fan_scaled(&mut rng);
    let samples: Vec<f64> = (0..layer.class_count())
        .flat_map(|c| layer.weight(c).data().to_vec())
        .collect();
    assert!(samples.len() >= 5000);
    let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
    let var: f64 =
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / samples.len() as f64;
    let expect = 2.0 / (d_in + d_out) as f64;
    assert!(
        (var - expect).abs() <= 0.2 * expect,
        "variance {var} vs {expect}"
    );
}
