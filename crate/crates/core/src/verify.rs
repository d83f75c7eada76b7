//! Ownership verification.
//!
//! The defender holds index-aligned pairs of unwatermarked and watermarked
//! CF explanations. A suspect model is evaluated on both versions of every
//! pair, each probability taken for the CF training label, and the paired
//! differences feed a one-sided t-test with null offset `tau`: H0 says the
//! mean probability gap equals `tau`, H1 that it exceeds it. A model trained
//! on served (watermarked) CFs is systematically more confident on them, so
//! rejecting H0 flags the suspect as extracted.
//!
//! The Student-t CDF is computed from the regularized incomplete beta
//! function; no external statistics library is involved (the test suite
//! cross-checks against an independent implementation).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, MlpParams};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

// ── Special functions ─────────────────────────────────────────────────

/// ln Gamma via the Lanczos approximation (g = 5, n = 6), accurate to well
/// below 1e-10 over the range used here (positive half-integers).
fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let x = z;
    let mut y = z;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Continued-fraction core of the incomplete beta function (Lentz's method).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x must be in [0,1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // use the symmetry relation where the continued fraction converges fast
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

// ── Student-t distribution ────────────────────────────────────────────

/// CDF of Student's t with `df` degrees of freedom, via
/// I_{df/(df+x^2)}(df/2, 1/2). Absolute error below 1e-10.
pub fn t_cdf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::ZeroDegreesOfFreedom);
    }
    if x == 0.0 {
        return Ok(0.5);
    }
    let nu = df as f64;
    let tail = 0.5 * reg_inc_beta(0.5 * nu, 0.5, nu / (nu + x * x));
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

/// Quantile (inverse CDF) by bracketed bisection; the result satisfies
/// |t_cdf(result, df) - q| < 1e-9.
pub fn t_quantile(q: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::ZeroDegreesOfFreedom);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidConfig(format!("quantile level must be in (0,1), got {q}")));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    // expand until bracketed
    let mut lo = -1.0;
    let mut hi = 1.0;
    while t_cdf(lo, df)? > q {
        lo *= 2.0;
    }
    while t_cdf(hi, df)? < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = t_cdf(mid, df)?;
        if (f - q).abs() < 1e-13 || (hi - lo) < 1e-14 {
            return Ok(mid);
        }
        if f < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ── Paired test ───────────────────────────────────────────────────────

/// Index-aligned probabilities of a suspect model on watermarked and
/// unwatermarked versions of the same CFs, each taken for the CF training
/// label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedSample {
    pub p_wm: Vec<f64>,
    pub p_unwm: Vec<f64>,
}

impl PairedSample {
    pub fn new(p_wm: Vec<f64>, p_unwm: Vec<f64>) -> Result<Self> {
        if p_wm.len() != p_unwm.len() {
            return Err(Error::LengthMismatch { left: p_wm.len(), right: p_unwm.len() });
        }
        for &v in p_wm.iter().chain(&p_unwm) {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "probabilities must lie strictly inside (0,1), got {v}"
                )));
            }
        }
        Ok(PairedSample { p_wm, p_unwm })
    }

    pub fn n(&self) -> usize {
        self.p_wm.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Positive,
    Negative,
}

/// Everything the harness records about one verification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationResult {
    /// mean paired difference
    pub d_bar: f64,
    /// sum of squared differences
    pub d_tilde: f64,
    /// sample standard deviation of the differences
    pub s_d: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub tau: f64,
    pub alpha: f64,
    pub n: usize,
    pub decision: Decision,
}

impl VerificationResult {
    pub fn is_positive(&self) -> bool {
        self.decision == Decision::Positive
    }
}

/// One-sided paired t-test of H0: mean difference = tau against
/// H1: mean difference > tau, at significance `alpha`.
///
/// Degenerate samples with zero variance are decided directly by the sign
/// of `d_bar - tau`, with the p-value pinned to 0 or 1.
pub fn paired_t_test(sample: &PairedSample, tau: f64, alpha: f64) -> Result<VerificationResult> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::SampleTooSmall { n });
    }
    let d: Vec<f64> = sample.p_wm.iter().zip(&sample.p_unwm).map(|(a, b)| a - b).collect();
    let nf = n as f64;
    let d_bar = d.iter().sum::<f64>() / nf;
    let d_tilde = d.iter().map(|v| v * v).sum::<f64>();
    let ssq = d.iter().map(|v| (v - d_bar) * (v - d_bar)).sum::<f64>();
    let s_d = (ssq / (nf - 1.0)).sqrt();

    let (t_stat, p_value) = if s_d == 0.0 {
        if d_bar > tau {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        }
    } else {
        let t = nf.sqrt() * (d_bar - tau) / s_d;
        (t, 1.0 - t_cdf(t, n - 1)?)
    };
    let decision = if p_value < alpha { Decision::Positive } else { Decision::Negative };
    Ok(VerificationResult { d_bar, d_tilde, s_d, t_stat, p_value, tau, alpha, n, decision })
}

/// Which variance identity the closed-form rejection condition uses.
///
/// The standard expansion gives `sum (d_i - dbar)^2 = d_tilde - n dbar^2`;
/// `PaperLiteral` keeps a `+` sign instead and is kept only for
/// comparability — it is not algebraically consistent with the t-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    #[default]
    Corrected,
    Literal,
}

/// Closed-form rejection condition from the summary statistics alone:
/// `sqrt(n^2 - n) (dbar - tau) - t_{1-alpha} sqrt(d_tilde - n dbar^2) > 0`
/// in [`VarianceMode::Corrected`]. For every consistent summary this agrees
/// exactly with `paired_t_test(..).p_value < alpha`.
pub fn theorem_condition(
    d_bar: f64,
    d_tilde: f64,
    n: usize,
    tau: f64,
    alpha: f64,
    mode: VarianceMode,
) -> Result<bool> {
    if n < 2 {
        return Err(Error::SampleTooSmall { n });
    }
    let nf = n as f64;
    let ssq = match mode {
        VarianceMode::Corrected => {
            let ssq = d_tilde - nf * d_bar * d_bar;
            if ssq < -1e-12 {
                return Err(Error::InconsistentSummary {
                    dtilde: d_tilde,
                    ndbar2: nf * d_bar * d_bar,
                });
            }
            ssq.max(0.0)
        }
        VarianceMode::Literal => d_tilde + nf * d_bar * d_bar,
    };
    let t_crit = t_quantile(1.0 - alpha, n - 1)?;
    Ok((nf * nf - nf).sqrt() * (d_bar - tau) - t_crit * ssq.sqrt() > 0.0)
}

/// Full verification of a suspect model against a pair set.
///
/// `labels` holds the CF training label of each row; the probability used on
/// both versions is the suspect's probability for that label. At most
/// `max_n` pairs are used, sampled without replacement from a seeded stream.
#[allow(clippy::too_many_arguments)]
pub fn verify_ownership(
    suspect: &MlpParams,
    wm_cfs: &Matrix,
    unwm_cfs: &Matrix,
    labels: &[u8],
    tau: f64,
    alpha: f64,
    max_n: usize,
    seed: u64,
) -> Result<VerificationResult> {
    if wm_cfs.rows() != unwm_cfs.rows() || wm_cfs.rows() != labels.len() {
        return Err(Error::LengthMismatch { left: wm_cfs.rows(), right: unwm_cfs.rows() });
    }
    if wm_cfs.cols() != suspect.input_dim() {
        return Err(Error::WidthMismatch { expected: suspect.input_dim(), actual: wm_cfs.cols() });
    }
    let mut indices: Vec<usize> = (0..wm_cfs.rows()).collect();
    if indices.len() > max_n {
        let mut stream = rng::stream(seed, "verify/sample");
        indices.shuffle(&mut stream);
        indices.truncate(max_n);
        indices.sort_unstable();
    }
    let p_wm_all = mlp::predict_proba(suspect, &wm_cfs.gather_rows(&indices))?;
    let p_unwm_all = mlp::predict_proba(suspect, &unwm_cfs.gather_rows(&indices))?;
    let for_label = |p: f64, label: u8| if label == 1 { p } else { 1.0 - p };
    let p_wm: Vec<f64> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| for_label(p_wm_all.get(k, 0), labels[i]))
        .collect();
    let p_unwm: Vec<f64> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| for_label(p_unwm_all.get(k, 0), labels[i]))
        .collect();
    paired_t_test(&PairedSample::new(p_wm, p_unwm)?, tau, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn t_cdf_at_zero_is_half() {
        for df in [1, 2, 10, 100] {
            assert_eq!(t_cdf(0.0, df).unwrap(), 0.5);
        }
    }

    #[test]
    fn t_cdf_rejects_zero_df() {
        assert!(matches!(t_cdf(1.0, 0), Err(Error::ZeroDegreesOfFreedom)));
    }

    #[test]
    fn t_cdf_table_value() {
        // 95th percentile of t(10) is 1.8125 in standard tables
        let c = t_cdf(1.8125, 10).unwrap();
        assert!((c - 0.95).abs() < 1e-4, "cdf(1.8125, 10) = {c}");
    }

    #[test]
    fn t_cdf_symmetry() {
        for df in [1, 3, 7, 30] {
            for x in [0.1, 0.77, 1.5, 2.9, 10.0] {
                let s = t_cdf(x, df).unwrap() + t_cdf(-x, df).unwrap();
                assert!((s - 1.0).abs() < 1e-12, "df {df} x {x}: {s}");
            }
        }
    }

    #[test]
    fn t_cdf_matches_reference_library() {
        for df in [1usize, 2, 5, 10, 25, 60, 120] {
            let reference = StudentsT::new(0.0, 1.0, df as f64).unwrap();
            for x in [-4.0, -1.3, -0.2, 0.4, 1.1, 2.7, 5.5] {
                let ours = t_cdf(x, df).unwrap();
                let theirs = reference.cdf(x);
                assert!(
                    (ours - theirs).abs() < 1e-10,
                    "df {df} x {x}: {ours} vs {theirs}"
                );
            }
        }
    }

    #[test]
    fn t_quantile_examples() {
        assert_eq!(t_quantile(0.5, 10).unwrap(), 0.0);
        let q = t_quantile(0.95, 10).unwrap();
        assert!((q - 1.8125).abs() < 1e-3, "q(0.95, 10) = {q}");
    }

    #[test]
    fn t_quantile_roundtrip() {
        for df in [1, 4, 10, 50] {
            for q in [0.01, 0.2, 0.5, 0.8, 0.975, 0.999] {
                let x = t_quantile(q, df).unwrap();
                let back = t_cdf(x, df).unwrap();
                assert!((back - q).abs() < 1e-9, "df {df} q {q}: {back}");
            }
        }
    }

    #[test]
    fn identical_pairs_are_negative() {
        let p = vec![0.4, 0.6, 0.7, 0.55];
        let sample = PairedSample::new(p.clone(), p).unwrap();
        let result = paired_t_test(&sample, 0.05, 0.05).unwrap();
        assert_eq!(result.decision, Decision::Negative);
        assert_eq!(result.d_bar, 0.0);
    }

    #[test]
    fn zero_variance_positive_when_gap_clears_tau() {
        // binary-exact values so every difference is bitwise identical
        let n = 100;
        let p_unwm = vec![0.5; n];
        let p_wm = vec![0.75; n]; // every difference is exactly 0.25
        let sample = PairedSample::new(p_wm, p_unwm).unwrap();
        let result = paired_t_test(&sample, 0.05, 0.05).unwrap();
        assert_eq!(result.s_d, 0.0);
        assert_eq!(result.p_value, 0.0);
        assert_eq!(result.decision, Decision::Positive);

        // and negative when the gap does not clear tau
        let sample = PairedSample::new(vec![0.53125; 4], vec![0.5; 4]).unwrap();
        let result = paired_t_test(&sample, 0.05, 0.05).unwrap();
        assert_eq!(result.p_value, 1.0);
        assert_eq!(result.decision, Decision::Negative);
    }

    #[test]
    fn strong_signal_sample_rejects() {
        let d = [0.10, 0.12, 0.08, 0.11, 0.09, 0.13, 0.10, 0.12, 0.09, 0.11];
        let p_unwm = vec![0.5; 10];
        let p_wm: Vec<f64> = d.iter().map(|v| 0.5 + v).collect();
        let sample = PairedSample::new(p_wm, p_unwm).unwrap();
        let result = paired_t_test(&sample, 0.05, 0.05).unwrap();
        assert!(result.p_value < 1e-6, "p = {}", result.p_value);
        assert_eq!(result.decision, Decision::Positive);

        // cross-check against the reference distribution
        let reference = StudentsT::new(0.0, 1.0, 9.0).unwrap();
        let p_ref = 1.0 - reference.cdf(result.t_stat);
        assert!((result.p_value - p_ref).abs() < 1e-12);
    }

    #[test]
    fn sample_too_small_rejected() {
        let sample = PairedSample::new(vec![0.5], vec![0.4]).unwrap();
        assert!(matches!(paired_t_test(&sample, 0.0, 0.05), Err(Error::SampleTooSmall { n: 1 })));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(matches!(
            PairedSample::new(vec![0.5, 0.6], vec![0.4]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn theorem_condition_false_at_tau() {
        // d_bar == tau makes the statistic exactly zero
        assert!(!theorem_condition(0.05, 0.5, 20, 0.05, 0.05, VarianceMode::Corrected).unwrap());
    }

    #[test]
    fn theorem_condition_rejects_inconsistent_summary() {
        assert!(matches!(
            theorem_condition(0.5, 0.1, 10, 0.0, 0.05, VarianceMode::Corrected),
            Err(Error::InconsistentSummary { .. })
        ));
    }

    #[test]
    fn theorem_condition_matches_t_test_on_random_samples() {
        let mut stream = rng::stream(20240601, "verify/equivalence");
        for trial in 0..2000 {
            let n = stream.gen_range(2..40);
            let tau: f64 = stream.gen_range(-0.1..0.2);
            let spread: f64 = stream.gen_range(0.001..0.2);
            let center: f64 = stream.gen_range(0.3..0.7);
            let shift: f64 = stream.gen_range(-0.15..0.25);
            let p_unwm: Vec<f64> = (0..n)
                .map(|_| (center + spread * stream.gen_range(-1.0..1.0)).clamp(0.01, 0.99))
                .collect();
            let p_wm: Vec<f64> = p_unwm
                .iter()
                .map(|v| (v + shift + spread * stream.gen_range(-1.0..1.0)).clamp(0.01, 0.99))
                .collect();
            let sample = PairedSample::new(p_wm, p_unwm).unwrap();
            let result = paired_t_test(&sample, tau, 0.05).unwrap();
            let cond = theorem_condition(
                result.d_bar,
                result.d_tilde,
                result.n,
                tau,
                0.05,
                VarianceMode::Corrected,
            )
            .unwrap();
            assert_eq!(cond, result.is_positive(), "trial {trial} disagreed");
        }
    }

    #[test]
    fn strong_sample_satisfies_theorem_condition() {
        let d = [0.10, 0.12, 0.08, 0.11, 0.09, 0.13, 0.10, 0.12, 0.09, 0.11];
        let d_bar = d.iter().sum::<f64>() / 10.0;
        let d_tilde = d.iter().map(|v| v * v).sum::<f64>();
        assert!(theorem_condition(d_bar, d_tilde, 10, 0.05, 0.05, VarianceMode::Corrected).unwrap());
    }

    #[test]
    fn p_value_monotone_in_dbar() {
        // fixed spread and n; rising d_bar must not raise the p-value
        let base = [0.0, 0.01, -0.01, 0.005, -0.005, 0.002];
        let mut last_p = f64::INFINITY;
        for lift in [0.0, 0.02, 0.05, 0.1, 0.2] {
            let p_unwm = vec![0.5; base.len()];
            let p_wm: Vec<f64> = base.iter().map(|v| 0.5 + v + lift).collect();
            let sample = PairedSample::new(p_wm, p_unwm).unwrap();
            let p = paired_t_test(&sample, 0.03, 0.05).unwrap().p_value;
            assert!(p <= last_p + 1e-15, "p rose from {last_p} to {p} at lift {lift}");
            last_p = p;
        }
    }

    #[test]
    fn increasing_tau_never_creates_positives() {
        let mut stream = rng::stream(99, "verify/tau-mono");
        for _ in 0..300 {
            let n = stream.gen_range(3..25);
            let p_unwm: Vec<f64> = (0..n).map(|_| stream.gen_range(0.2..0.8)).collect();
            let p_wm: Vec<f64> = p_unwm
                .iter()
                .map(|v| (v + stream.gen_range(-0.1..0.2)).clamp(0.01, 0.99))
                .collect();
            let sample = PairedSample::new(p_wm, p_unwm).unwrap();
            let lo = paired_t_test(&sample, 0.02, 0.05).unwrap();
            let hi = paired_t_test(&sample, 0.08, 0.05).unwrap();
            if !lo.is_positive() {
                assert!(!hi.is_positive(), "raising tau flipped a negative to positive");
            }
        }
    }

    #[test]
    fn size_under_null_is_controlled() {
        // mean-zero symmetric differences: rejection rate stays near alpha
        let alpha = 0.05;
        let trials = 4000;
        let mut stream = rng::stream(7, "verify/size");
        let mut positives = 0;
        for _ in 0..trials {
            let n = 30;
            let p_unwm: Vec<f64> = (0..n).map(|_| stream.gen_range(0.3..0.7)).collect();
            let p_wm: Vec<f64> = p_unwm
                .iter()
                .map(|v| (v + stream.gen_range(-0.05..0.05)).clamp(0.01, 0.99))
                .collect();
            let sample = PairedSample::new(p_wm, p_unwm).unwrap();
            if paired_t_test(&sample, 0.0, alpha).unwrap().is_positive() {
                positives += 1;
            }
        }
        let rate = positives as f64 / trials as f64;
        let bound = alpha + 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(rate <= bound, "H0 rejection rate {rate} exceeds {bound}");
    }

    #[test]
    fn constant_half_suspect_is_negative() {
        use crate::mlp::{Layer, MlpParams};
        let suspect = MlpParams {
            layers: vec![Layer { weight: Matrix::zeros(2, 1), bias: Matrix::zeros(1, 1) }],
        };
        let wm = Matrix::from_rows(&[vec![0.1, 0.9], vec![0.3, 0.4], vec![0.8, 0.2]]);
        let unwm = Matrix::from_rows(&[vec![0.15, 0.85], vec![0.25, 0.45], vec![0.75, 0.25]]);
        let result =
            verify_ownership(&suspect, &wm, &unwm, &[1, 0, 1], 0.05, 0.05, 128, 0).unwrap();
        assert_eq!(result.d_bar, 0.0);
        assert_eq!(result.decision, Decision::Negative);
    }

    #[test]
    fn verify_rejects_width_mismatch() {
        let suspect = MlpParams::init(3, &[2], 0);
        let wm = Matrix::zeros(4, 2);
        let unwm = Matrix::zeros(4, 2);
        assert!(matches!(
            verify_ownership(&suspect, &wm, &unwm, &[0; 4], 0.05, 0.05, 128, 0),
            Err(Error::WidthMismatch { .. })
        ));
    }
}
