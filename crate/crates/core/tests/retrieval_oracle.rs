use milnce::evalkit::{median, retrieval_eval};
use milnce::numkernel::Matrix;
use milnce::rng::Rng;
use proptest::prelude::*;

/// Rank by sorting: position of the correct item after a stable sort by
/// descending score with the correct item placed ahead of its ties.
fn brute_force_rank(row: &[f64], gt: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap()
            .then_with(|| (b == gt).cmp(&(a == gt)))
    });
    order.iter().position(|&j| j == gt).unwrap() + 1
}

fn check(m: &Matrix, gt: &[usize]) {
    let ks = [1, 2, 3, 5];
    let r = retrieval_eval(m, gt, &ks).unwrap();
    let ranks: Vec<usize> = gt.iter().enumerate().map(|(q, &g)| brute_force_rank(m.row(q), g)).collect();
    for k in ks {
        let expect = ranks.iter().filter(|&&x| x <= k).count() as f64 / ranks.len() as f64;
        assert_eq!(r.recall_at_k[&k], expect);
    }
    let mut f: Vec<f64> = ranks.iter().map(|&x| x as f64).collect();
    assert_eq!(r.median_rank, median(&mut f).unwrap());
}

#[test]
fn matches_brute_force_on_random_5x5_matrices() {
    let mut rng = Rng::new(2024);
    for trial in 0..1000 {
        // Half of the trials draw from three levels so ties are common.
        let data: Vec<f64> = (0..25)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.below(3) as f64
                } else {
                    rng.normal()
                }
            })
            .collect();
        let m = Matrix::from_vec(5, 5, data).unwrap();
        let gt: Vec<usize> = (0..5).map(|_| rng.below_usize(5)).collect();
        check(&m, &gt);
    }
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(data in prop::collection::vec(-3i32..3, 36), gt in prop::collection::vec(0usize..6, 6)) {
        let m = Matrix::from_vec(6, 6, data.into_iter().map(f64::from).collect()).unwrap();
        let r = retrieval_eval(&m, &gt, &[1, 2, 3, 4, 5, 6]).unwrap();
        let v: Vec<f64> = r.recall_at_k.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(v[5], 1.0);
    }

    #[test]
    fn permuting_items_consistently_keeps_ranks(data in prop::collection::vec(-1.0..1.0f64, 25), seed in any::<u64>()) {
        let m = Matrix::from_vec(5, 5, data).unwrap();
        let gt: Vec<usize> = (0..5).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        Rng::new(seed).shuffle(&mut perm);
        let mut pm = Matrix::zeros(5, 5);
        for q in 0..5 {
            for (j, &to) in perm.iter().enumerate() {
                pm.set(q, to, m.get(q, j));
            }
        }
        let moved: Vec<usize> = gt.iter().map(|&g| perm[g]).collect();
        let a = retrieval_eval(&m, &gt, &[1, 3]).unwrap();
        let b = retrieval_eval(&pm, &moved, &[1, 3]).unwrap();
        prop_assert_eq!(a, b);
    }
}
