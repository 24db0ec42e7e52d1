//! Acceptance criteria. Runs as a plain binary (no libtest harness) so every
//! criterion prints one PASS/FAIL line; the process fails if any criterion does.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use milnce::corpus::{generate_corpus, Corpus, GenConfig};
use milnce::evalkit::{
    evaluate, localize_steps, median, retrieval_eval, EvalOptions, RandomScorer,
};
use milnce::gradcheck::{gradcheck, GradcheckConfig};
use milnce::losses::{
    attn_nce, binary_ce, max_margin, max_nce, mil_nce, nce, LossKind, SampleScores,
};
use milnce::numkernel::Matrix;
use milnce::rng::Rng;
use milnce::sampling::{build_negatives, NegativeMode, NegativeSpec, PairIndex};
use milnce::trainer::{train, TrainConfig, Trainer};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_scores(rng: &mut Rng, n_pos: usize, n_neg: usize, scale: f64) -> SampleScores {
    SampleScores::new(
        (0..n_pos).map(|_| scale * rng.normal()).collect(),
        (0..n_neg).map(|_| scale * rng.normal()).collect(),
    )
}

fn reduction_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below_usize(64);
        let s = random_scores(&mut rng, 1, n, 3.0);
        worst = worst.max((mil_nce(&s).unwrap().value - nce(&s).unwrap().value).abs());
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-12 && took < Duration::from_secs(1),
        format!("max |mil_nce - nce| = {worst:.2e} over 100 sets in {took:.2?}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut kinds = BTreeSet::new();
    for seed in 0..20 {
        let r = gradcheck(&GradcheckConfig {
            seed,
            ..GradcheckConfig::default()
        })
        .unwrap();
        worst = worst.max(r.max_rel_error);
        kinds.extend(r.checks.iter().map(|c| c.loss.name()));
    }
    let took = start.elapsed();
    outcome(
        worst <= 1e-6 && kinds.len() == 7 && took < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 7 losses x 20 seeds in {took:.2?}"),
    )
}

fn ordering_invariant() -> Outcome {
    let mut rng = Rng::new(3);
    let mut violations = 0;
    for _ in 0..1000 {
        let (np, nn) = (1 + rng.below_usize(8), 1 + rng.below_usize(32));
        let s = random_scores(&mut rng, np, nn, 4.0);
        // One-ulp-scale slack for rounding when a single positive dominates.
        if max_nce(&s).unwrap().value > mil_nce(&s).unwrap().value + 1e-12 {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations of max_nce <= mil_nce in 1000 sets"))
}

fn shift_invariance() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst: f64 = 0.0;
    let mut min_bce_change = f64::INFINITY;
    for _ in 0..100 {
        let (np, nn) = (1 + rng.below_usize(5), 2 + rng.below_usize(10));
        let s = random_scores(&mut rng, np, nn, 2.0);
        let attn: Vec<f64> = (0..s.positives.len()).map(|_| rng.normal()).collect();
        let b = 2 + rng.below_usize(4);
        let m = Matrix::from_vec(b, b, (0..b * b).map(|_| rng.normal()).collect()).unwrap();
        let values = |s: &SampleScores, m: &Matrix| {
            [
                nce(&SampleScores::new(vec![s.positives[0]], s.negatives.clone())).unwrap().value,
                mil_nce(s).unwrap().value,
                max_nce(s).unwrap().value,
                attn_nce(&s.clone().with_attention(attn.clone())).unwrap().value,
                max_margin(m, 0.2).unwrap().value,
            ]
        };
        let base = values(&s, &m);
        let bce = binary_ce(&s.positives, &s.negatives).unwrap().value;
        for c in [-100.0, 3.0, 1e3] {
            let t = SampleScores::new(
                s.positives.iter().map(|x| x + c).collect(),
                s.negatives.iter().map(|x| x + c).collect(),
            );
            let mut mt = m.clone();
            mt.data_mut().iter_mut().for_each(|x| *x += c);
            for (a, b) in base.iter().zip(values(&t, &mt)) {
                worst = worst.max((a - b).abs());
            }
            let moved = binary_ce(&t.positives, &t.negatives).unwrap().value;
            min_bce_change = min_bce_change.min((moved - bce).abs());
        }
    }
    outcome(
        worst <= 1e-9 && min_bce_change > 1e-3,
        format!("max change {worst:.2e}; smallest binary-ce change {min_bce_change:.3}"),
    )
}

fn equal_score_closed_form() -> Outcome {
    let s = SampleScores::new(vec![0.7; 5], vec![0.7; 512]);
    let v = mil_nce(&s).unwrap().value;
    let expect = (5.0f64 / 517.0).ln();
    outcome((v - expect).abs() <= 1e-9, format!("mil_nce = {v:.12}, ln(5/517) = {expect:.12}"))
}

fn negative_cardinalities() -> Outcome {
    let mut bad = Vec::new();
    for b in [2usize, 3, 8, 32] {
        let batch: Vec<usize> = (0..b).collect();
        for i in 0..b {
            let get = |mode| {
                build_negatives(&NegativeSpec { mode, batch: batch.clone() }, i).unwrap()
            };
            let joint = get(NegativeMode::Joint);
            let tv = get(NegativeMode::TextGivenVideo);
            let vt = get(NegativeMode::VideoGivenText);
            let set = |v: &[PairIndex]| v.iter().map(|p| (p.clip, p.narration)).collect::<BTreeSet<_>>();
            let (sj, st, sv) = (set(&joint), set(&tv), set(&vt));
            let union: BTreeSet<_> = st.union(&sv).copied().collect();
            let ok = joint.len() == 2 * (b - 1)
                && tv.len() == b - 1
                && vt.len() == b - 1
                && st.is_disjoint(&sv)
                && union == sj
                && sj.len() == joint.len();
            if !ok {
                bad.push(format!("B={b} i={i}"));
            }
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() {
        "joint 2(B-1), asymmetric B-1 each, disjoint, union = joint for B in {2,3,8,32}".to_string()
    } else {
        format!("failed at {}", bad.join(", "))
    })
}

fn brute_rank(row: &[f64], gt: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap().then_with(|| (b == gt).cmp(&(a == gt)))
    });
    order.iter().position(|&j| j == gt).unwrap() + 1
}

fn metric_oracle() -> Outcome {
    let mut rng = Rng::new(7);
    let ks = [1, 2, 3, 4, 5];
    let mut mismatches = 0;
    let mut tie_trials = 0;
    for trial in 0..1000 {
        let data: Vec<f64> = (0..25)
            .map(|_| if trial % 2 == 0 { rng.below(3) as f64 } else { rng.normal() })
            .collect();
        let m = Matrix::from_vec(5, 5, data).unwrap();
        let gt: Vec<usize> = (0..5).map(|_| rng.below_usize(5)).collect();
        let ranks: Vec<usize> = (0..5).map(|q| brute_rank(m.row(q), gt[q])).collect();
        if (0..5).any(|q| m.row(q).iter().filter(|&&v| v == m.get(q, gt[q])).count() > 1) {
            tie_trials += 1;
        }
        let r = retrieval_eval(&m, &gt, &ks).unwrap();
        let mut f: Vec<f64> = ranks.iter().map(|&x| x as f64).collect();
        let same = ks.iter().all(|&k| {
            r.recall_at_k[&k] == ranks.iter().filter(|&&x| x <= k).count() as f64 / 5.0
        }) && r.median_rank == median(&mut f).unwrap();
        if !same {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in 1000 matrices ({tie_trials} with ties at the correct item)"),
    )
}

/// Held-out R@10 of one trained run.
fn r10(cfg: &TrainConfig, corpus: &Corpus) -> f64 {
    let (ck, _) = train(cfg, corpus).unwrap();
    let opts = EvalOptions {
        run_probe: false,
        ..EvalOptions::default()
    };
    evaluate(&ck.params, corpus, &opts).unwrap().retrieval.recall_at_k[&10]
}

fn median_r10(base: &TrainConfig, corpus: &Corpus) -> f64 {
    let mut v: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| r10(&TrainConfig { seed, ..base.clone() }, corpus))
        .collect();
    median(&mut v).unwrap()
}

struct Grid {
    nce_k1: f64,
    mil_k3: f64,
    mil_k5: f64,
    mil_k5_text_given_video: f64,
    mil_k5_b8: f64,
    took: Duration,
}

fn run_grid(corpus: &Corpus) -> Grid {
    let start = Instant::now();
    let base = TrainConfig::default();
    let nce_k1 = median_r10(&TrainConfig { loss: LossKind::Nce, bag_size: 1, ..base.clone() }, corpus);
    let mil_k3 = median_r10(&TrainConfig { bag_size: 3, ..base.clone() }, corpus);
    let mil_k5 = median_r10(&base, corpus);
    let took = start.elapsed();
    let mil_k5_text_given_video = median_r10(
        &TrainConfig { negative_mode: NegativeMode::TextGivenVideo, ..base.clone() },
        corpus,
    );
    let mil_k5_b8 = median_r10(&TrainConfig { batch_size: 8, ..base.clone() }, corpus);
    Grid { nce_k1, mil_k3, mil_k5, mil_k5_text_given_video, mil_k5_b8, took }
}

fn bag_size_trend(g: &Grid) -> Outcome {
    let keeps = g.mil_k5 >= g.mil_k3 - 0.01;
    let beats = g.mil_k5 > g.nce_k1 + 0.02;
    outcome(
        keeps && beats && g.took < Duration::from_secs(15 * 60),
        format!(
            "median R@10: NCE(K=1) {:.4}, MIL-NCE(K=3) {:.4}, MIL-NCE(K=5) {:.4}; K5 >= K3-1pt: {keeps}, K5 > NCE+2pt: {beats}; grid {:.1?}",
            g.nce_k1, g.mil_k3, g.mil_k5, g.took
        ),
    )
}

fn symmetric_negatives_trend(g: &Grid) -> Outcome {
    outcome(
        g.mil_k5 >= g.mil_k5_text_given_video,
        format!("median R@10: joint {:.4}, (y|x) {:.4}", g.mil_k5, g.mil_k5_text_given_video),
    )
}

fn negatives_count_trend(g: &Grid) -> Outcome {
    outcome(
        g.mil_k5 >= g.mil_k5_b8 - 0.01,
        format!("median R@10: |N|=62 (B=32) {:.4}, |N|=14 (B=8) {:.4}", g.mil_k5, g.mil_k5_b8),
    )
}

fn no_noise_sanity() -> Outcome {
    let gen = GenConfig {
        p_aligned: 1.0,
        p_irrelevant: 0.0,
        ..GenConfig::default()
    };
    let corpus = generate_corpus(&gen).unwrap();
    let base = TrainConfig {
        loss: LossKind::Nce,
        bag_size: 1,
        total_steps: 2000,
        ..TrainConfig::default()
    };
    let held = corpus.heldout_streams();
    let mut trained = Vec::new();
    let mut random = Vec::new();
    let mut queries = 0;
    for &seed in &SEEDS {
        let (ck, _) = train(&TrainConfig { seed, ..base.clone() }, &corpus).unwrap();
        trained.push(localize_steps(held, &ck.params).unwrap().average_recall);
        let r = localize_steps(held, &RandomScorer { seed, dim: 16 }).unwrap();
        queries = r.queries;
        random.push(r.average_recall);
    }
    let loc = median(&mut trained).unwrap();
    let rand = median(&mut random).unwrap();
    let p = 1.0 / gen.segments_per_stream as f64;
    let sigma = (p * (1.0 - p) / queries as f64).sqrt();
    let z = (rand - p) / sigma;
    outcome(
        loc >= 0.9 && z.abs() <= 3.0,
        format!(
            "median localization {loc:.4}; random baseline {rand:.4} vs 1/L = {p:.4} ({z:+.2} sigma over {queries} queries)"
        ),
    )
}

fn determinism_and_round_trip() -> Outcome {
    let corpus = generate_corpus(&GenConfig::default()).unwrap();
    let cfg = TrainConfig {
        total_steps: 300,
        log_every: 25,
        ..TrainConfig::default()
    };
    let (a, ma) = train(&cfg, &corpus).unwrap();
    let (b, mb) = train(&cfg, &corpus).unwrap();
    let a_bytes = a.to_bytes().unwrap();
    let identical = a_bytes == b.to_bytes().unwrap()
        && serde_json::to_vec(&ma).unwrap() == serde_json::to_vec(&mb).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut t = Trainer::new(cfg.clone(), &corpus).unwrap();
    let mut log = Vec::new();
    t.run_until(130, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    t.checkpoint().save(&path).unwrap();
    drop(t);
    let mut resumed =
        Trainer::from_checkpoint(milnce::checkpoint::Checkpoint::load(&path).unwrap(), &corpus).unwrap();
    resumed
        .run_until(cfg.total_steps, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
    let resumed_same = resumed.checkpoint().to_bytes().unwrap() == a_bytes && log == ma;
    outcome(
        identical && resumed_same,
        format!("repeat run byte-identical: {identical}; save/load at step 130 then resume bit-identical: {resumed_same}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!(
                "{} criterion {n:>2} ({name}): {}",
                if o.pass { "PASS" } else { "FAIL" },
                o.detail
            );
            results.push((n, name, o));
        }
    };

    record(1, "reduction identity", &reduction_identity);
    record(2, "gradient correctness", &gradient_correctness);
    record(3, "ordering invariant", &ordering_invariant);
    record(4, "shift invariance", &shift_invariance);
    record(5, "equal-score closed form", &equal_score_closed_form);
    record(6, "negative-set cardinalities", &negative_cardinalities);
    record(7, "metric oracle", &metric_oracle);
    if wanted(8) || wanted(9) || wanted(10) {
        let corpus = generate_corpus(&GenConfig::default()).unwrap();
        let grid = run_grid(&corpus);
        record(8, "bag-size trend", &|| bag_size_trend(&grid));
        record(9, "symmetric negatives trend", &|| symmetric_negatives_trend(&grid));
        record(10, "negative-count trend", &|| negatives_count_trend(&grid));
    }
    record(11, "no-noise sanity", &no_noise_sanity);
    record(12, "determinism and round-trip", &determinism_and_round_trip);

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| !o.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
