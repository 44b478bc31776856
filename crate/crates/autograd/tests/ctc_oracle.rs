//! CTC against exhaustive enumeration of frame-level paths.

use cyclevc_autograd::ctc::{ctc_nll, min_frames};
use cyclevc_autograd::CTC_INFEASIBLE_LOSS;
use proptest::prelude::*;

/// Collapse repeats, drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// -log Σ over every path of length `frames` that collapses to `labels`.
fn brute_force(logp: &[f64], frames: usize, vocab: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path, 0) == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp[t * vocab + k]).sum();
            total += lp.exp();
        }
        let mut d = 0;
        loop {
            if d == frames {
                return -total.ln();
            }
            path[d] += 1;
            if path[d] < vocab {
                break;
            }
            path[d] = 0;
            d += 1;
        }
    }
}

fn log_softmax_rows(raw: &[f64], vocab: usize) -> Vec<f64> {
    raw.chunks(vocab)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            r.iter().map(move |x| x - lse).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn label_ab_over_three_frames() {
    let vocab = 3;
    let raw = [0.1, -0.3, 0.2, 0.05, 0.4, -0.2, -0.1, 0.0, 0.3];
    let logp = log_softmax_rows(&raw, vocab);
    let (loss, _) = ctc_nll(&logp, 3, vocab, &[1, 2], 0);
    assert!((loss - brute_force(&logp, 3, vocab, &[1, 2])).abs() < 1e-12);
}

#[test]
fn certain_path_has_zero_loss() {
    // one-hot rows spelling a, blank, b
    let ninf = -1e30;
    let logp = [ninf, 0.0, ninf, 0.0, ninf, ninf, ninf, ninf, 0.0];
    let (loss, _) = ctc_nll(&logp, 3, 3, &[1, 2], 0);
    assert!(loss.abs() < 1e-12);
}

proptest! {
    #[test]
    fn matches_exhaustive_alignment_sum(
        frames in 1usize..=4,
        vocab in 2usize..=3,
        raw in proptest::collection::vec(-2.0f64..2.0, 12),
        labels in proptest::collection::vec(1usize..3, 0..=3),
    ) {
        let labels: Vec<usize> = labels.into_iter().filter(|&l| l < vocab).collect();
        let logp = log_softmax_rows(&raw[..frames * vocab], vocab);
        let (loss, _) = ctc_nll(&logp, frames, vocab, &labels, 0);
        if min_frames(&labels) > frames {
            prop_assert_eq!(loss, CTC_INFEASIBLE_LOSS);
        } else {
            let want = brute_force(&logp, frames, vocab, &labels);
            prop_assert!((loss - want).abs() < 1e-6, "ctc {} vs brute force {}", loss, want);
        }
    }
}
