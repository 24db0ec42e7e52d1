use milnce::numkernel::{
    add_row_bias, col_max_pool, logsumexp, matmul, relu, score_matrix, Backward, Matrix,
};
use milnce::rng::Rng;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / s.max(1e-3)
}

/// Central differences of `f` at `x` for every entry.
fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.data().len())
        .map(|e| {
            let o = probe.data()[e];
            probe.data_mut()[e] = o + H;
            let up = f(&probe);
            probe.data_mut()[e] = o - H;
            let down = f(&probe);
            probe.data_mut()[e] = o;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Random linear readout `Σ w ⊙ out`, so that `d out = w`.
fn readout(out: &Matrix, w: &Matrix) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn kernel_gradients_match_finite_differences_over_100_seeds() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let (m, k, n) = (1 + rng.below_usize(4), 1 + rng.below_usize(4), 1 + rng.below_usize(4));
        let a = random_matrix(&mut rng, m, k);
        let b = random_matrix(&mut rng, k, n);
        let w = random_matrix(&mut rng, m, n);

        let (da, db) = matmul(&a, &b).unwrap().grad_fn.backward(&w);
        let na = numeric_grad(&a, |x| readout(&matmul(x, &b).unwrap().value, &w));
        let nb = numeric_grad(&b, |x| readout(&matmul(&a, x).unwrap().value, &w));
        assert!(rel_err(da.data(), &na) < 1e-8, "matmul dA seed {seed}");
        assert!(rel_err(db.data(), &nb) < 1e-8, "matmul dB seed {seed}");

        let g = random_matrix(&mut rng, n, k);
        let ws = random_matrix(&mut rng, m, n);
        let (df, dg) = score_matrix(&a, &g).unwrap().grad_fn.backward(&ws);
        let nf = numeric_grad(&a, |x| readout(&score_matrix(x, &g).unwrap().value, &ws));
        let ng = numeric_grad(&g, |x| readout(&score_matrix(&a, x).unwrap().value, &ws));
        assert!(rel_err(df.data(), &nf) < 1e-8, "score dF seed {seed}");
        assert!(rel_err(dg.data(), &ng) < 1e-8, "score dG seed {seed}");

        // Inputs kept away from the kink so differences do not straddle it.
        let mut r = random_matrix(&mut rng, m, k);
        r.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v = 0.5
            }
        });
        let wr = random_matrix(&mut rng, m, k);
        let dr = relu(&r).grad_fn.backward(&wr);
        let nr = numeric_grad(&r, |x| readout(&relu(x).value, &wr));
        assert!(rel_err(dr.data(), &nr) < 1e-8, "relu seed {seed}");

        // Redrawn until every column's top two entries are well separated.
        let pool_in = loop {
            let c = random_matrix(&mut rng, m, k);
            let separated = (0..k).all(|j| {
                let mut col: Vec<f64> = (0..m).map(|i| c.get(i, j)).collect();
                col.sort_by(|a, b| b.total_cmp(a));
                col.len() < 2 || col[0] - col[1] > 1e-3
            });
            if separated {
                break c;
            }
        };
        let wp: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let dp = col_max_pool(&pool_in).unwrap().grad_fn.backward(&wp);
        let np = numeric_grad(&pool_in, |x| {
            col_max_pool(x).unwrap().value.iter().zip(&wp).map(|(a, b)| a * b).sum()
        });
        assert!(rel_err(dp.data(), &np) < 1e-8, "col_max_pool seed {seed}");

        let v = random_matrix(&mut rng, 1, k);
        let dl = logsumexp(v.data()).unwrap().grad_fn.backward(&1.7);
        let nl = numeric_grad(&v, |x| 1.7 * logsumexp(x.data()).unwrap().value);
        assert!(rel_err(&dl, &nl) < 1e-8, "logsumexp seed {seed}");

        let bias: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let (dm, dbias) = add_row_bias(&r, &bias).unwrap().grad_fn.backward(&wr);
        let nm = numeric_grad(&r, |x| readout(&add_row_bias(x, &bias).unwrap().value, &wr));
        let bm = Matrix::row_vector(&bias);
        let nbias = numeric_grad(&bm, |x| readout(&add_row_bias(&r, x.data()).unwrap().value, &wr));
        assert!(rel_err(dm.data(), &nm) < 1e-8, "bias dM seed {seed}");
        assert!(rel_err(&dbias, &nbias) < 1e-8, "bias db seed {seed}");
    }
}

fn small_matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0..10.0f64, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn logsumexp_shift_invariance(v in prop::collection::vec(-50.0..50.0f64, 1..12), c in -1e3..1e3f64) {
        let base = logsumexp(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let moved = logsumexp(&shifted).unwrap();
        prop_assert!((moved.value - base.value - c).abs() <= 1e-9 * (1.0 + c.abs()));
        for (p, q) in base.grad_fn.softmax().iter().zip(moved.grad_fn.softmax()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        let total: f64 = base.grad_fn.softmax().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_bounds(v in prop::collection::vec(-50.0..50.0f64, 1..12)) {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = logsumexp(&v).unwrap().value;
        prop_assert!(l >= m - 1e-12);
        prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn col_max_pool_ignores_row_order(m in small_matrix(6), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..m.rows()).collect();
        Rng::new(seed).shuffle(&mut order);
        let shuffled = m.select_rows(&order);
        prop_assert_eq!(col_max_pool(&m).unwrap().value, col_max_pool(&shuffled).unwrap().value);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), d in prop::array::uniform4(1usize..5)) {
        let mut rng = Rng::new(seed);
        let a = random_matrix(&mut rng, d[0], d[1]);
        let b = random_matrix(&mut rng, d[1], d[2]);
        let c = random_matrix(&mut rng, d[2], d[3]);
        let left = a.dot(&b).unwrap().dot(&c).unwrap();
        let right = a.dot(&b.dot(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn transposed_products_agree(seed in any::<u64>(), d in prop::array::uniform3(1usize..5)) {
        let mut rng = Rng::new(seed);
        let a = random_matrix(&mut rng, d[0], d[1]);
        let b = random_matrix(&mut rng, d[0], d[2]);
        let c = random_matrix(&mut rng, d[2], d[1]);
        prop_assert_eq!(a.dot_tn(&b).unwrap(), a.transpose().dot(&b).unwrap());
        prop_assert_eq!(a.dot_nt(&c).unwrap(), a.dot(&c.transpose()).unwrap());
    }
}
