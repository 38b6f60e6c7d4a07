mod common;

use common::rand_labels;
use cpnet::affinity::{
    affinity_loss, affinity_loss_batch, downsample_labels, global_affinity_loss, ideal_affinity_map,
    unary_affinity_loss, IdealAffinityMap, PriorMap,
};
use cpnet::rng::{self, Rng};
use cpnet::{LabelMap, IGNORE_INDEX};
use proptest::prelude::*;

const EPS: f64 = 1e-7;

/// `A[i][j]` by comparing labels pair by pair.
fn brute_affinity(lm: &LabelMap) -> Vec<u8> {
    let l = lm.labels();
    let n = l.len();
    let mut out = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            if l[i] != IGNORE_INDEX && l[j] != IGNORE_INDEX && l[i] == l[j] {
                out[i * n + j] = 1;
            }
        }
    }
    out
}

fn rand_prior(rng: &mut Rng, n: usize) -> PriorMap<f64> {
    PriorMap::new(n, (0..n * n).map(|_| rng::uniform(rng, 0.02, 0.98)).collect()).unwrap()
}

/// Per-row precision, recall and specificity logs written out from their
/// definitions, pooled over the valid rows of every map.
fn global_oracle(ps: &[PriorMap<f64>], labels: &[LabelMap]) -> f64 {
    let mut sum = 0.0;
    let mut rows = 0usize;
    for (p, lm) in ps.iter().zip(labels) {
        let l = lm.labels();
        let n = l.len();
        let valid: Vec<usize> = (0..n).filter(|&i| l[i] != IGNORE_INDEX).collect();
        for &r in &valid {
            rows += 1;
            let same = |c: usize| l[c] == l[r];
            let tp: f64 = valid.iter().filter(|&&c| same(c)).map(|&c| p.get(r, c)).sum();
            let all_p: f64 = valid.iter().map(|&c| p.get(r, c)).sum();
            let pos = valid.iter().filter(|&&c| same(c)).count() as f64;
            let neg = valid.len() as f64 - pos;
            let tn: f64 = valid.iter().filter(|&&c| !same(c)).map(|&c| 1.0 - p.get(r, c)).sum();
            let clamp_log = |x: f64| x.clamp(EPS, 1.0).ln();
            sum += clamp_log(tp / all_p) + clamp_log(tp / pos);
            if neg > 0.0 {
                sum += clamp_log(tn / neg);
            }
        }
    }
    -sum / rows as f64
}

#[test]
fn affinity_matches_pairwise_oracle() {
    let mut r = rng::seeded(10);
    for _ in 0..100 {
        let (h, w) = (rng::below(&mut r, 1, 9), rng::below(&mut r, 1, 9));
        let c = rng::below(&mut r, 1, 6);
        let lm = rand_labels(&mut r, h, w, c, 0.15);
        let a = ideal_affinity_map(&lm, c).unwrap();
        assert_eq!(a.values(), &brute_affinity(&lm)[..]);
        for (i, &v) in a.valid_mask().iter().enumerate() {
            assert_eq!(v, !lm.is_ignored(i));
        }
    }
}

#[test]
fn downsample_matches_index_oracle() {
    let mut r = rng::seeded(11);
    for _ in 0..20 {
        let lm = rand_labels(&mut r, 8, 8, 5, 0.1);
        let small = downsample_labels(&lm, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(small.get(i, j), lm.labels()[(2 * i) * 8 + 2 * j]);
            }
        }
    }
    assert!(downsample_labels(&LabelMap::filled(8, 8, 0), 3, 3).is_err());
}

#[test]
fn reversed_prior_hits_clamp() {
    let lm = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let a = ideal_affinity_map(&lm, 2).unwrap();
    let p = PriorMap::<f64>::from_affinity(&a).reversed();
    let lu = unary_affinity_loss(&p, &a).unwrap();
    assert!((lu - (-EPS.ln())).abs() < 1e-9, "{lu}");
    assert!((lu - 16.1181).abs() < 1e-4);
}

#[test]
fn global_matches_scalar_oracle() {
    let mut r = rng::seeded(12);
    for trial in 0..50 {
        let ignore = if trial % 2 == 0 { 0.0 } else { 0.2 };
        let labels: Vec<LabelMap> = (0..1 + trial % 3).map(|_| rand_labels(&mut r, 4, 4, 3, ignore)).collect();
        if labels.iter().all(|l| l.valid_count() == 0) {
            continue;
        }
        let maps: Vec<IdealAffinityMap> = labels.iter().map(|l| ideal_affinity_map(l, 3).unwrap()).collect();
        let ps: Vec<PriorMap<f64>> = labels.iter().map(|_| rand_prior(&mut r, 16)).collect();
        let (terms, _) = affinity_loss_batch(&ps, &maps, 1.0, 1.0).unwrap();
        let want = global_oracle(&ps, &labels);
        assert!((terms.global - want).abs() <= 1e-10 * want.abs(), "{} vs {want}", terms.global);
    }
}

#[test]
fn loss_gradient_matches_differences() {
    let mut r = rng::seeded(13);
    for _ in 0..10 {
        let labels: Vec<LabelMap> = (0..2).map(|_| rand_labels(&mut r, 3, 3, 3, 0.2)).collect();
        let maps: Vec<IdealAffinityMap> = labels.iter().map(|l| ideal_affinity_map(l, 3).unwrap()).collect();
        if maps.iter().all(|m| m.num_valid() == 0) {
            continue;
        }
        let mut ps: Vec<PriorMap<f64>> = (0..2).map(|_| rand_prior(&mut r, 9)).collect();
        let (_, grads) = affinity_loss_batch(&ps, &maps, 1.0, 1.0).unwrap();
        let h = 1e-6;
        for b in 0..2 {
            for k in 0..81 {
                let orig = ps[b].values()[k];
                let mut at = |v: f64| {
                    let mut vals = ps[b].values().to_vec();
                    vals[k] = v;
                    ps[b] = PriorMap::new(9, vals).unwrap();
                    affinity_loss_batch(&ps, &maps, 1.0, 1.0).unwrap().0.total
                };
                let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
                at(orig);
                let analytic = grads[b][k];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-5, "map {b} entry {k}: {analytic} vs {numeric}");
            }
        }
    }
}

fn labels_and_classes() -> impl Strategy<Value = (LabelMap, usize)> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(h, w, c)| {
        proptest::collection::vec(prop_oneof![5 => 0..c as i32, 1 => Just(IGNORE_INDEX)], h * w)
            .prop_map(move |v| (LabelMap::new(h, w, v).unwrap(), c))
    })
}

proptest! {
    #[test]
    fn affinity_structure((lm, c) in labels_and_classes()) {
        let a = ideal_affinity_map(&lm, c).unwrap();
        let n = a.n();
        prop_assert_eq!(a.values(), &brute_affinity(&lm)[..]);
        for i in 0..n {
            prop_assert_eq!(a.get(i, i), u8::from(a.valid_mask()[i]));
            for j in 0..n {
                prop_assert_eq!(a.get(i, j), a.get(j, i));
                if !a.valid_mask()[i] {
                    prop_assert_eq!(a.get(i, j), 0);
                }
            }
        }
    }

    #[test]
    fn zero_point_of_both_terms((lm, c) in labels_and_classes(), seed in any::<u64>()) {
        let a = ideal_affinity_map(&lm, c).unwrap();
        prop_assume!(a.num_valid() > 0);
        let exact = PriorMap::<f64>::from_affinity(&a);
        let t = affinity_loss(&exact, &a, 1.0, 1.0).unwrap();
        prop_assert!(t.unary <= 3e-6 && t.unary >= -3e-6);
        prop_assert!(t.global <= 3e-6 && t.global >= -3e-6);
        prop_assert!(t.total <= 6e-6);

        // Moving one valid entry away from A lifts both terms off zero.
        let mut r = rng::seeded(seed);
        let valid: Vec<usize> = (0..a.n()).filter(|&i| a.valid_mask()[i]).collect();
        let (i, j) = (valid[rng::below(&mut r, 0, valid.len())], valid[rng::below(&mut r, 0, valid.len())]);
        let mut vals = exact.values().to_vec();
        vals[i * a.n() + j] = if a.get(i, j) == 1 { 0.7 } else { 0.3 };
        let off = PriorMap::new(a.n(), vals).unwrap();
        prop_assert!(unary_affinity_loss(&off, &a).unwrap() > 3e-6);
        prop_assert!(global_affinity_loss(&off, &a).unwrap().loss > 3e-6);
    }

    #[test]
    fn losses_are_nonnegative((lm, c) in labels_and_classes(), seed in any::<u64>()) {
        let a = ideal_affinity_map(&lm, c).unwrap();
        prop_assume!(a.num_valid() > 0);
        let p = rand_prior(&mut rng::seeded(seed), a.n());
        let t = affinity_loss(&p, &a, 1.0, 1.0).unwrap();
        prop_assert!(t.unary >= -3e-6 && t.global >= -3e-6);
    }

    #[test]
    fn permutation_equivariance((lm, c) in labels_and_classes(), seed in any::<u64>()) {
        let a = ideal_affinity_map(&lm, c).unwrap();
        prop_assume!(a.num_valid() > 0);
        let n = a.n();
        let mut r = rng::seeded(seed);
        let p = rand_prior(&mut r, n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng::below(&mut r, 0, i + 1));
        }
        let lm2 = LabelMap::new(lm.height(), lm.width(), perm.iter().map(|&k| lm.labels()[k]).collect()).unwrap();
        let a2 = ideal_affinity_map(&lm2, c).unwrap();
        let p2 = PriorMap::new(n, (0..n * n).map(|k| p.get(perm[k / n], perm[k % n])).collect()).unwrap();
        let t1 = affinity_loss(&p, &a, 1.0, 1.0).unwrap();
        let t2 = affinity_loss(&p2, &a2, 1.0, 1.0).unwrap();
        prop_assert!((t1.unary - t2.unary).abs() < 1e-10);
        prop_assert!((t1.global - t2.global).abs() < 1e-10);
    }
}
