//! Connectionist temporal classification: forward-backward over the
//! blank-extended label lattice, in log space.

/// Loss returned for labels that cannot fit in the available frames.
pub const CTC_INFEASIBLE_LOSS: f64 = 1.0e6;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `labels` (repeats need a blank).
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `labels` and its gradient w.r.t. the
/// log-probabilities `logp` (`frames × vocab`, rows are log-softmax outputs).
///
/// Infeasible labels yield [`CTC_INFEASIBLE_LOSS`] with a zero gradient.
pub fn ctc_nll(logp: &[f64], frames: usize, vocab: usize, labels: &[usize], blank: usize) -> (f64, Vec<f64>) {
    assert!(logp.len() >= frames * vocab, "ctc input too small");
    let mut grad = vec![0.0; frames * vocab];
    if frames == 0 || min_frames(labels) > frames {
        return (CTC_INFEASIBLE_LOSS, grad);
    }
    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| if s % 2 == 0 { blank } else { labels[s / 2] };
    let lp = |t: usize, k: usize| logp[t * vocab + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext(s)) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = lp(last, blank);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = lp(last, ext(s_len - 2));
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext(s) != blank && ext(s) != ext(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext(s)) };
        }
    }

    let mut log_p = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last * s_len + s_len - 2]);
    }
    if !log_p.is_finite() {
        return (CTC_INFEASIBLE_LOSS, grad);
    }

    // d(-log p)/d logp[t,k] = -(1/p) * sum_{s: ext(s)=k} alpha_t(s) beta_t(s) / y_t(k)
    for t in 0..frames {
        let mut acc = vec![ninf; vocab];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            if v > ninf {
                let k = ext(s);
                acc[k] = log_add(acc[k], v);
            }
        }
        for k in 0..vocab {
            if acc[k] > ninf {
                grad[t * vocab + k] = -(acc[k] - lp(t, k) - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}
