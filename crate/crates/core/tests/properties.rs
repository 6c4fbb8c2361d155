mod common;

use p2g_core::domain::{fit_centroids, within_cluster_sse, DomainPosterior};
use p2g_core::ensembler::{decide, decide_with, hard_select_baseline, weight_scores, Branch, EnsembleRule, ScorePair};
use p2g_core::Label;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn scores(t: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-1.0f64..1.0, t), prop::collection::vec(-1.0f64..1.0, t))
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(scores)
}

fn posterior_case() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(0.0f64..50.0, 1..8), 1e-3f64..10.0)
}

fn oracle_decision(s_r: &[f64], s_f: &[f64]) -> (Label, Branch) {
    let max = |s: &[f64]| s.iter().cloned().fold(f64::MIN, f64::max);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let label = |r: f64, f: f64| if r > f { Label::Real } else { Label::Fake };
    if (max(s_r) - max(s_f)).abs() >= (mean(s_r) - mean(s_f)).abs() {
        (label(max(s_r), max(s_f)), Branch::Max)
    } else {
        (label(mean(s_r), mean(s_f)), Branch::Mean)
    }
}

proptest! {
    #[test]
    fn decide_matches_oracle((s_r, s_f) in pair()) {
        let d = decide(&ScorePair::new(s_r.clone(), s_f.clone()).unwrap());
        prop_assert_eq!((d.y_hat, d.branch), oracle_decision(&s_r, &s_f));
    }

    #[test]
    fn single_task_rules_agree((s_r, s_f) in scores(1)) {
        let p = ScorePair::new(s_r, s_f).unwrap();
        let ys: Vec<Label> = EnsembleRule::ALL.iter().map(|&r| decide_with(&p, r).y_hat).collect();
        prop_assert!(ys.iter().all(|&y| y == ys[0]));
    }

    #[test]
    fn swapping_real_and_fake_flips_strict_decisions((s_r, s_f) in pair()) {
        let a = decide(&ScorePair::new(s_r.clone(), s_f.clone()).unwrap());
        let b = decide(&ScorePair::new(s_f.clone(), s_r.clone()).unwrap());
        prop_assert_eq!(a.branch, b.branch);
        let margin = match a.branch {
            Branch::Max => a.scores.s_r_star() - a.scores.s_f_star(),
            _ => a.scores.s_r_bar() - a.scores.s_f_bar(),
        };
        if margin != 0.0 {
            prop_assert_ne!(a.y_hat, b.y_hat);
        }
    }

    #[test]
    fn posterior_is_a_distribution((d, tau) in posterior_case()) {
        let w = DomainPosterior::from_distances(&d, tau).unwrap().w;
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_ignores_a_common_offset((d, tau) in posterior_case(), shift in 0.0f64..100.0) {
        let a = DomainPosterior::from_distances(&d, tau).unwrap().w;
        let shifted: Vec<f64> = d.iter().map(|x| x + shift).collect();
        let b = DomainPosterior::from_distances(&shifted, tau).unwrap().w;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_argmax_is_nearest_task((d, tau) in posterior_case()) {
        let p = DomainPosterior::from_distances(&d, tau).unwrap();
        let nearest = d.iter().enumerate().fold(0, |best, (i, &x)| if x < d[best] { i } else { best });
        prop_assert_eq!(p.argmax(), nearest);
    }

    #[test]
    fn posterior_is_monotone_in_distance((d, tau) in posterior_case()) {
        let w = DomainPosterior::from_distances(&d, tau).unwrap().w;
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn weighting_is_elementwise((s, _) in pair(), raw in prop::collection::vec(0.01f64..1.0, 8)) {
        let total: f64 = raw[..s.len()].iter().sum();
        let w = DomainPosterior { w: raw[..s.len()].iter().map(|x| x / total).collect() };
        let out = weight_scores(&s, &w).unwrap();
        for i in 0..s.len() {
            prop_assert_eq!(out[i], s[i] * w.w[i]);
        }
    }

    #[test]
    fn hard_selection_reads_the_argmax_task((s_r, s_f) in pair(), raw in prop::collection::vec(0.01f64..1.0, 8)) {
        let t = s_r.len();
        let total: f64 = raw[..t].iter().sum();
        let w = DomainPosterior { w: raw[..t].iter().map(|x| x / total).collect() };
        let k = w.argmax();
        let d = hard_select_baseline(&s_r, &s_f, &w).unwrap();
        prop_assert_eq!(d.branch, Branch::Selected);
        prop_assert_eq!(d.y_hat, if s_r[k] > s_f[k] { Label::Real } else { Label::Fake });
    }

    #[test]
    fn kmeans_sse_never_increases(seed in 0u64..1000, k in 1usize..5, n in 10usize..60) {
        let mut rng = common::rng(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| unit.sample(&mut rng)).collect()).collect();
        let fit = fit_centroids(&pts, k, seed).unwrap();
        prop_assert_eq!(fit.centroids.len(), k);
        for w in fit.sse_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let last = *fit.sse_history.last().unwrap();
        prop_assert!((within_cluster_sse(&pts, &fit.centroids) - last).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn kmeans_is_deterministic(seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..2).map(|_| unit.sample(&mut rng)).collect()).collect();
        prop_assert_eq!(fit_centroids(&pts, 3, 7).unwrap().centroids, fit_centroids(&pts, 3, 7).unwrap().centroids);
    }
}

/// Plain Lloyd iterations from fixed starting centers.
fn naive_lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let nearest = |c: &[Vec<f64>], p: &[f64]| {
        let mut best = 0;
        for j in 1..c.len() {
            if sq(p, &c[j]) < sq(p, &c[best]) {
                best = j;
            }
        }
        best
    };
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; points[0].len()]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for p in points {
            let j = nearest(&centers, p);
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..centers.len() {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    points.iter().map(|p| sq(p, &centers[nearest(&centers, p)])).sum()
}

#[test]
fn three_blobs_match_reference_lloyd() {
    let mut rng = common::rng(11);
    let sigma = 0.1;
    let noise = Normal::new(0.0, sigma).unwrap();
    let centers = [vec![0.0, 0.0], vec![1.5, 0.0], vec![0.0, 1.5]];
    let mut pts = Vec::new();
    for c in &centers {
        for _ in 0..200 {
            pts.push(c.iter().map(|&x| x + noise.sample(&mut rng)).collect::<Vec<f64>>());
        }
    }
    let ours = *fit_centroids(&pts, 3, 5).unwrap().sse_history.last().unwrap();
    // The reference starts from one point of each blob.
    let reference = naive_lloyd(&pts, vec![pts[0].clone(), pts[200].clone(), pts[400].clone()]);
    assert!((ours - reference).abs() / reference < 0.01, "{ours} vs {reference}");
}

#[test]
fn sharp_posterior_clamps_far_tasks() {
    let w = DomainPosterior::from_distances(&[0.0, 1.0], 1e-3).unwrap().w;
    assert_eq!(w, vec![1.0, 0.0]);
}
