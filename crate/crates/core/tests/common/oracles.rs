//! Independent reference implementations for the evaluation metrics.

use rand::Rng;
use surgtag::evaluation::{Confusion, EvalRecord};

/// Rank of `i` under a stable descending sort, 1-based.
fn stable_rank(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn brute_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = stable_rank(scores, i);
            let hits = pos.iter().filter(|&&j| stable_rank(scores, j) <= r).count();
            hits as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

pub fn brute_confusion(records: &[EvalRecord], t: f64) -> Confusion {
    let mut c = Confusion::default();
    for r in records {
        for k in 0..r.scores.len() {
            let pred = r.scores[k] >= t;
            let y = r.truth[k] == 1;
            if pred && y {
                c.tp += 1;
            } else if pred {
                c.fp += 1;
            } else if y {
                c.fn_ += 1;
            }
        }
    }
    c
}

pub fn f_of(c: Confusion, beta: f64) -> f64 {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        (1.0 + beta * beta) * p * r / (beta * beta * p + r)
    }
}

/// Exhaustive search over every score, 0, and 1: lowest threshold reaching
/// the best F-beta.
pub fn grid_oracle(records: &[EvalRecord], beta: f64) -> (f64, Confusion) {
    let mut grid: Vec<f64> = records.iter().flat_map(|r| r.scores.clone()).collect();
    grid.extend([0.0, 1.0]);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut best = (f64::NEG_INFINITY, Confusion::default());
    for t in grid {
        let c = brute_confusion(records, t);
        let f = f_of(c, beta);
        if f > best.0 + 1e-12 {
            best = (f, c);
        }
    }
    best
}

pub fn random_records(rng: &mut impl Rng, n: usize, k: usize, coarse: bool) -> Vec<EvalRecord> {
    (0..n)
        .map(|i| EvalRecord {
            sample_id: format!("s{i}"),
            scores: (0..k)
                .map(|_| {
                    if coarse {
                        rng.gen_range(0..5) as f64 / 4.0
                    } else {
                        rng.gen::<f64>()
                    }
                })
                .collect(),
            truth: (0..k).map(|_| rng.gen_bool(0.35) as u8).collect(),
        })
        .collect()
}

/// Scores and labels for one AP instance; even cases draw from a few
/// levels so ties are common.
pub fn random_ap_case(rng: &mut impl Rng, case: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(1..30);
    let coarse = case.is_multiple_of(2);
    let scores = (0..n)
        .map(|_| {
            if coarse {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen()
            }
        })
        .collect();
    let truth = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    (scores, truth)
}
