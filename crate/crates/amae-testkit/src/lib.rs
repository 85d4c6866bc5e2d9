//! Independent oracles for the test suites: finite differences, quadrature,
//! and brute-force metric references.
//!
//! Nothing in here may call into the main crate; every function recomputes
//! its answer from first principles so the tests compare two unrelated
//! routes to the same value.

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// Infinity-norm relative error between two gradient vectors.
///
/// Normalizes by the larger of the two magnitudes so a vector of
/// near-zero gradients does not blow the ratio up on FD noise.
pub fn rel_err_inf(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
        / scale
}

// ── Student-t tail probability by adaptive quadrature ──────────────────

/// Integrand of the t density after the substitution t = tan(theta).
///
/// (1 + tan^2/v)^(-(v+1)/2) * sec^2 simplifies to
/// (cos^2 + sin^2/v)^(-(v+1)/2) * cos^(v-1), which is finite at theta =
/// pi/2 for every v >= 1, so no normalization constant (and no gamma
/// function) is needed: the tail is divided by the full integral.
fn t_integrand(theta: f64, df: f64) -> f64 {
    let c = theta.cos();
    let s = theta.sin();
    let base = c * c + s * s / df;
    base.powf(-(df + 1.0) / 2.0) * c.abs().powf(df - 1.0)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, eps / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, eps / 2.0, depth - 1)
    }
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    simpson(&f, a, b, fa, fm, fb, eps, 60)
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom,
/// computed by adaptive Simpson quadrature of the (unnormalized) density.
pub fn t_two_sided_p_oracle(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0, "oracle supports df >= 1");
    let abs_t = t.abs();
    if abs_t == 0.0 {
        return 1.0;
    }
    let half = std::f64::consts::FRAC_PI_2;
    let lo = abs_t.atan();
    let g = |theta: f64| t_integrand(theta, df);
    let tail = integrate(g, lo, half, 1e-13);
    let total = 2.0 * integrate(g, 0.0, half, 1e-13);
    (2.0 * tail / total).clamp(0.0, 1.0)
}

// ── Ranking-metric references ───────────────────────────────────────────

/// AUROC by exhaustive positive/negative pair counting in integer
/// arithmetic: (2*wins + ties) / (2 * n_pos * n_neg).
pub fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    let mut n_pos: u64 = 0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        n_pos += 1;
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1;
            } else if scores[i] == scores[j] {
                ties += 1;
            }
        }
    }
    let n_neg = labels.iter().filter(|&&l| l == 0).count() as u64;
    ((2 * wins + ties) as f64) / ((2 * n_pos * n_neg) as f64)
}

/// Average precision by re-scanning the ranked list once per positive.
///
/// Ranking is stable descending (ties keep original index order).
pub fn average_precision_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    assert!(n_pos > 0, "oracle needs at least one positive");
    let mut sum = 0.0;
    for rank in 1..=order.len() {
        if labels[order[rank - 1]] != 1 {
            continue;
        }
        let hits = order[..rank].iter().filter(|&&i| labels[i] == 1).count();
        sum += hits as f64 / rank as f64;
    }
    sum / n_pos as f64
}

/// Top-ceil(k_percent/100 * n) selection by full sort, descending.
/// Returns the selected original indices. Assumes tie-free values.
pub fn top_k_percent_oracle(confidences: &[f64], k_percent: f64) -> Vec<usize> {
    if confidences.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let keep = ((k_percent / 100.0) * confidences.len() as f64).ceil() as usize;
    let keep = keep.max(1).min(confidences.len());
    let mut selected = order[..keep].to_vec();
    selected.sort_unstable();
    selected
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_derivative() {
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = fd_gradient(&mut f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn t_oracle_matches_tables() {
        // Two-sided p for t=2.086, df=20 is ~0.05 (classic table entry).
        let p = t_two_sided_p_oracle(2.086, 20.0);
        assert!((p - 0.05).abs() < 5e-4, "p = {p}");
        // Cauchy case df=1, t=1 -> p = 0.5.
        let p = t_two_sided_p_oracle(1.0, 1.0);
        assert!((p - 0.5).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn auroc_oracle_worked_example() {
        let auc = auroc_oracle(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn ap_oracle_worked_example() {
        let ap = average_precision_oracle(&[0.9, 0.8, 0.7], &[1, 0, 1]);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn topk_oracle_worked_example() {
        let sel = top_k_percent_oracle(&[0.6, 0.7, 0.8, 0.9], 50.0);
        assert_eq!(sel, vec![2, 3]);
    }
}
