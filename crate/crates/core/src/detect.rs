//! Sliding-window binomial likelihood-ratio test and the posterior reset
//! ("introspection-rebirth") sweep built on it.

use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::PosteriorTable;
use crate::rng::{derive_rng, Stream};
use crate::scalar::Scalar;
use crate::tree::DomainId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectError {
    #[error("history of {count} observations does not exceed window width {w}")]
    WindowTooShort { count: u64, w: u64 },
    #[error("window ({window_successes}/{w}) cannot be a suffix of history ({history_successes}/{history_count})")]
    InconsistentCounts {
        window_successes: u64,
        w: u64,
        history_successes: u64,
        history_count: u64,
    },
    #[error("probability {0} outside (0, 1)")]
    OutOfRange(f64),
    #[error("invalid detector configuration: {0}")]
    InvalidConfig(String),
}

/// Window width, quantile parameter, and the cached chi-squared threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrConfig<T> {
    pub w: usize,
    pub u: T,
    pub threshold: T,
}

impl<T: Scalar> IrConfig<T> {
    pub fn new(w: usize, u: T) -> Result<Self, DetectError> {
        if w == 0 {
            return Err(DetectError::InvalidConfig("w must be positive".into()));
        }
        let threshold = chi2_quantile_1dof(T::one() - u)?;
        Ok(Self { w, u, threshold })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwblrtResult<T> {
    pub lambda_win: T,
    pub lambda_all: T,
    pub statistic: T,
    pub reject: bool,
}

/// `k * ln(num / den)` with `0 * ln(0 / x) = 0`.
fn xlogratio<T: Scalar>(k: u64, num: T, den: T) -> T {
    if k == 0 {
        T::zero()
    } else {
        T::from_count(k) * (num / den).ln()
    }
}

/// Exact check that the window rate equals the history rate.
pub fn rates_equal(window_successes: u64, w: u64, history_successes: u64, history_count: u64) -> bool {
    u128::from(window_successes) * u128::from(history_count)
        == u128::from(history_successes) * u128::from(w)
}

/// Likelihood-ratio statistic from counts: window of width `w` holding
/// `window_successes`, tested against the whole-history rate.
pub fn swblrt_from_counts<T: Scalar>(
    window_successes: u64,
    w: u64,
    history_successes: u64,
    history_count: u64,
    threshold: T,
) -> Result<SwblrtResult<T>, DetectError> {
    if history_count <= w {
        return Err(DetectError::WindowTooShort { count: history_count, w });
    }
    let inconsistent = window_successes > w
        || window_successes > history_successes
        || history_successes - window_successes > history_count - w
        || history_successes > history_count;
    if inconsistent {
        return Err(DetectError::InconsistentCounts {
            window_successes,
            w,
            history_successes,
            history_count,
        });
    }
    let lambda_win = T::from_count(window_successes) / T::from_count(w);
    let lambda_all = T::from_count(history_successes) / T::from_count(history_count);
    let statistic = if rates_equal(window_successes, w, history_successes, history_count) {
        T::zero()
    } else {
        // lambda_all in {0, 1} forces lambda_win to match, handled above.
        debug_assert!(lambda_all > T::zero() && lambda_all < T::one());
        let one = T::one();
        let raw = xlogratio(window_successes, lambda_win, lambda_all)
            + xlogratio(w - window_successes, one - lambda_win, one - lambda_all);
        (raw + raw).max(T::zero())
    };
    Ok(SwblrtResult {
        lambda_win,
        lambda_all,
        statistic,
        reject: statistic > threshold,
    })
}

/// Statistic for a window of binary rewards that is the suffix of a history
/// with the given totals.
pub fn swblrt_statistic<T: Scalar>(
    window: &[u8],
    history_successes: u64,
    history_count: u64,
    threshold: T,
) -> Result<SwblrtResult<T>, DetectError> {
    let s = window.iter().map(|&r| u64::from(r.min(1))).sum();
    swblrt_from_counts(s, window.len() as u64, history_successes, history_count, threshold)
}

// Wichura, AS241 (PPND16): standard normal quantile, ~1e-16 relative accuracy.
const A: [f64; 8] = [
    3.387_132_872_796_366_5,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_5,
    4.630_337_846_156_546,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_9e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288_1e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_88e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

fn ratio<T: Scalar>(num: &[f64; 8], den: &[f64; 8], x: T) -> T {
    let horner = |c: &[f64; 8]| c.iter().rev().fold(T::zero(), |acc, &k| acc * x + T::lit(k));
    horner(num) / horner(den)
}

/// Inverse CDF of the standard normal distribution.
pub fn normal_quantile<T: Scalar>(p: T) -> Result<T, DetectError> {
    if !(p > T::zero() && p < T::one()) {
        return Err(DetectError::OutOfRange(p.to_f64().unwrap_or(f64::NAN)));
    }
    let half = T::lit(0.5);
    let q = p - half;
    if q.abs() <= T::lit(0.425) {
        let r = T::lit(0.180_625) - q * q;
        return Ok(q * ratio(&A, &B, r));
    }
    let tail = if q < T::zero() { p } else { T::one() - p };
    let mut r = (-tail.ln()).sqrt();
    let z = if r <= T::lit(5.0) {
        r = r - T::lit(1.6);
        ratio(&C, &D, r)
    } else {
        r = r - T::lit(5.0);
        ratio(&E, &F, r)
    };
    Ok(if q < T::zero() { -z } else { z })
}

/// Quantile of the chi-squared distribution with one degree of freedom:
/// the square of the normal quantile at `(1 + p) / 2`.
pub fn chi2_quantile_1dof<T: Scalar>(p: T) -> Result<T, DetectError> {
    if !(p > T::zero() && p < T::one()) {
        return Err(DetectError::OutOfRange(p.to_f64().unwrap_or(f64::NAN)));
    }
    let z = normal_quantile((T::one() + p) / T::lit(2.0))?;
    Ok(z * z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrOutcome<T> {
    pub arm_id: DomainId,
    pub result: Option<SwblrtResult<T>>,
    pub reset_applied: bool,
}

/// Tests every named, active arm whose current epoch is longer than the
/// window. On rejection the posterior restarts from the window:
/// `Beta(max(1, S), max(1, w - S))` with the epoch counters set to the window.
pub fn ir_sweep<T: Scalar>(posteriors: &mut PosteriorTable<T>, config: &IrConfig<T>) -> Vec<IrOutcome<T>> {
    let w = config.w as u64;
    let mut out = Vec::new();
    for (arm_id, arm) in posteriors.iter_mut() {
        let Some(window) = arm.window.as_ref() else { continue };
        if arm.deactivated {
            continue;
        }
        if arm.history_count <= w || window.len() as u64 != w {
            out.push(IrOutcome {
                arm_id,
                result: None,
                reset_applied: false,
            });
            continue;
        }
        let s = window.successes();
        let res = swblrt_from_counts(s, w, arm.history_successes, arm.history_count, config.threshold)
            .expect("window is the suffix of the epoch history");
        if res.reject {
            arm.alpha = T::from_count(s.max(1));
            arm.beta = T::from_count((w - s).max(1));
            arm.history_successes = s;
            arm.history_count = w;
        }
        out.push(IrOutcome {
            arm_id,
            result: Some(res),
            reset_applied: res.reject,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub w: usize,
    pub n: u64,
    pub lambda: f64,
    pub trials: u64,
    pub rejections: u64,
    pub rate: f64,
    pub nominal: f64,
    pub threshold: f64,
    /// 95% Wilson score interval for the rejection rate.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Monte Carlo rejection rate under a stationary Bernoulli(`lambda`) stream:
/// each trial draws `n` rewards and tests the last `w` once.
pub fn calibrate_type_one(
    w: usize,
    u: f64,
    lambda: f64,
    trials: u64,
    n: u64,
    seed: u64,
) -> Result<CalibrationReport, DetectError> {
    if trials == 0 {
        return Err(DetectError::InvalidConfig("trials must be at least 1".into()));
    }
    if n <= w as u64 {
        return Err(DetectError::InvalidConfig("n must exceed w".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DetectError::InvalidConfig("lambda must lie in [0, 1]".into()));
    }
    let cfg = IrConfig::<f64>::new(w, u)?;
    let wu = w as u64;
    let rejections: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = derive_rng(seed, Stream::Calibration, &[t]);
            let mut total = 0u64;
            let mut window = 0u64;
            for i in 0..n {
                let r = u64::from(rng.random::<f64>() < lambda);
                total += r;
                if i >= n - wu {
                    window += r;
                }
            }
            let res = swblrt_from_counts(window, wu, total, n, cfg.threshold).expect("consistent by construction");
            u64::from(res.reject)
        })
        .sum();
    let rate = rejections as f64 / trials as f64;
    let (ci_low, ci_high) = wilson_interval(rejections, trials, 1.959_963_984_540_054);
    Ok(CalibrationReport {
        w,
        n,
        lambda,
        trials,
        rejections,
        rate,
        nominal: u,
        threshold: cfg.threshold,
        ci_low,
        ci_high,
    })
}

fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::ArmPosterior;
    use crate::tree::KnowledgeTree;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// -2 (log L(H0) - log L(H1)) with the binomial coefficient kept in both terms.
    fn explicit_llr(s: u64, w: u64, hs: u64, n: u64) -> f64 {
        let ln_choose = |n: u64, k: u64| -> f64 {
            (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
        };
        let loglik = |p: f64| -> f64 {
            let mut v = ln_choose(w, s);
            if s > 0 {
                v += s as f64 * p.ln();
            }
            if w > s {
                v += (w - s) as f64 * (1.0 - p).ln();
            }
            v
        };
        -2.0 * (loglik(hs as f64 / n as f64) - loglik(s as f64 / w as f64))
    }

    fn chi2_oracle(p: f64) -> f64 {
        // bisection on the reference CDF
        let d = ChiSquared::new(1.0).unwrap();
        let (mut lo, mut hi) = (0.0f64, 100.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn chi2_quantile_matches_inverted_cdf() {
        for (p, expect) in [(0.8, 1.6424), (0.95, 3.8415), (0.5, 0.4549)] {
            let q: f64 = chi2_quantile_1dof(p).unwrap();
            assert!((q - chi2_oracle(p)).abs() < 1e-6, "p={p}: {q}");
            assert!((q - expect).abs() < 1e-4);
        }
        for i in 1..200 {
            let p = i as f64 / 200.0;
            let q: f64 = chi2_quantile_1dof(p).unwrap();
            assert!((q - chi2_oracle(p)).abs() < 1e-6, "p={p}");
        }
        assert!(chi2_quantile_1dof(0.0f64).is_err());
        assert!(chi2_quantile_1dof(1.0f64).is_err());
        assert!(chi2_quantile_1dof(f64::NAN).is_err());
    }

    #[test]
    fn normal_quantile_tails() {
        let z: f64 = normal_quantile(0.975).unwrap();
        assert!((z - 1.959_963_984_540_054).abs() < 1e-12);
        let z: f64 = normal_quantile(1e-10).unwrap();
        assert!((z + 6.361_340_902_404_056).abs() < 1e-9);
        let z: f32 = normal_quantile(0.9f32).unwrap();
        assert!((z - 1.281_551_6).abs() < 1e-5);
    }

    #[test]
    fn ir_config_threshold() {
        let c = IrConfig::<f64>::new(20, 0.2).unwrap();
        assert!((c.threshold - chi2_oracle(0.8)).abs() < 1e-6);
        assert!(IrConfig::<f64>::new(0, 0.2).is_err());
        assert!(IrConfig::<f64>::new(20, 1.5).is_err());
    }

    #[test]
    fn worked_statistics() {
        let th = chi2_quantile_1dof(0.8f64).unwrap();
        let r = swblrt_from_counts(10, 20, 20, 40, th).unwrap();
        assert_eq!((r.lambda_win, r.lambda_all, r.statistic, r.reject), (0.5, 0.5, 0.0, false));

        let r = swblrt_from_counts(16, 20, 20, 40, th).unwrap();
        assert!((r.statistic - explicit_llr(16, 20, 20, 40)).abs() < 1e-9);
        assert!((r.statistic - 7.710).abs() < 1e-3, "{}", r.statistic);
        assert!(r.reject);

        let r = swblrt_from_counts(0, 20, 30, 100, th).unwrap();
        assert!((r.statistic - explicit_llr(0, 20, 30, 100)).abs() < 1e-9);
        assert!((r.statistic - 40.0 * (1.0f64 / 0.7).ln()).abs() < 1e-12);
        assert!((r.statistic - 14.267).abs() < 1e-3);
        assert!(r.reject);
    }

    #[test]
    fn statistic_errors() {
        assert_eq!(
            swblrt_from_counts::<f64>(5, 20, 5, 20, 1.0),
            Err(DetectError::WindowTooShort { count: 20, w: 20 })
        );
        // window has more successes than the whole history
        assert!(matches!(
            swblrt_from_counts::<f64>(6, 20, 5, 40, 1.0),
            Err(DetectError::InconsistentCounts { .. })
        ));
        // prefix of 20 observations cannot hold 25 successes
        assert!(matches!(
            swblrt_from_counts::<f64>(5, 20, 30, 40, 1.0),
            Err(DetectError::InconsistentCounts { .. })
        ));
    }

    #[test]
    fn degenerate_histories_are_finite() {
        let th = 1.0f64;
        let all_zero = swblrt_from_counts(0, 10, 0, 30, th).unwrap();
        assert_eq!(all_zero.statistic, 0.0);
        let all_one = swblrt_from_counts(10, 10, 30, 30, th).unwrap();
        assert_eq!(all_one.statistic, 0.0);
        let r = swblrt_from_counts(10, 10, 10, 30, th).unwrap();
        assert!(r.statistic.is_finite() && r.statistic > 0.0);
    }

    fn arm_with(history: &[u8], w: usize) -> ArmPosterior<f64> {
        let mut a = ArmPosterior::prior(Some(w));
        for &r in history {
            a.update(r).unwrap();
        }
        a
    }

    fn table_with(arm: ArmPosterior<f64>, w: usize) -> (PosteriorTable<f64>, DomainId) {
        let mut tree = KnowledgeTree::new();
        let a = tree.add_domain(tree.root(), "A").unwrap();
        let mut t = PosteriorTable::new(w);
        *t.entry(&tree, a).unwrap() = arm;
        (t, a)
    }

    #[test]
    fn sweep_resets_on_change() {
        // 20 observations with 4 successes, then a window with 16.
        let mut h = vec![0u8; 16];
        h.extend([1u8; 4]);
        h.extend([1u8; 16]);
        h.extend([0u8; 4]);
        let (mut t, a) = table_with(arm_with(&h, 20), 20);
        let cfg = IrConfig::new(20, 0.2).unwrap();
        let out = ir_sweep(&mut t, &cfg);
        assert_eq!(out.len(), 1);
        assert!(out[0].reset_applied);
        assert!((out[0].result.unwrap().statistic - 7.710).abs() < 1e-3);
        let p = t.get(a).unwrap();
        assert_eq!((p.alpha, p.beta), (16.0, 4.0));
        assert_eq!((p.history_successes, p.history_count), (16, 20));
        assert_eq!(p.window.as_ref().unwrap().len(), 20);

        // second sweep with the same window: history equals window, no reset
        let again = ir_sweep(&mut t, &cfg);
        assert!(again[0].result.is_none() && !again[0].reset_applied);
        t.get_mut(a).unwrap().update(1).unwrap();
        let after = ir_sweep(&mut t, &cfg);
        assert!(after[0].result.is_some());
    }

    #[test]
    fn sweep_skips_short_and_stationary() {
        let (mut t, a) = table_with(arm_with(&[1u8; 15], 20), 20);
        let before = t.get(a).unwrap().clone();
        let cfg = IrConfig::new(20, 0.2).unwrap();
        let out = ir_sweep(&mut t, &cfg);
        assert!(out[0].result.is_none() && !out[0].reset_applied);
        assert_eq!(t.get(a).unwrap(), &before);

        let h: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let (mut t, a) = table_with(arm_with(&h, 20), 20);
        let before = t.get(a).unwrap().clone();
        let out = ir_sweep(&mut t, &cfg);
        assert_eq!(out[0].result.unwrap().statistic, 0.0);
        assert_eq!(t.get(a).unwrap(), &before);
    }

    #[test]
    fn reset_clamps_extreme_windows() {
        let mut h = vec![1u8; 30];
        h.extend([0u8; 20]);
        let (mut t, a) = table_with(arm_with(&h, 20), 20);
        let out = ir_sweep(&mut t, &IrConfig::new(20, 0.2).unwrap());
        assert!(out[0].reset_applied);
        let p = t.get(a).unwrap();
        assert_eq!((p.alpha, p.beta), (1.0, 20.0));
    }

    #[test]
    fn calibration_rejects_bad_input() {
        assert!(calibrate_type_one(20, 0.2, 0.5, 0, 200, 1).is_err());
        assert!(calibrate_type_one(20, 0.2, 0.5, 10, 20, 1).is_err());
    }

    #[test]
    fn calibration_agrees_with_exact_rejection_probability() {
        // Exact P(reject) under H0 by summing over the independent binomial
        // counts of the window and the prefix.
        let (w, n, lambda) = (20u64, 60u64, 0.5f64);
        let th = chi2_quantile_1dof(0.8f64).unwrap();
        let pmf = |k: u64, m: u64| -> f64 {
            let lc: f64 = (1..=k).map(|i| ((m - k + i) as f64).ln() - (i as f64).ln()).sum();
            (lc + k as f64 * lambda.ln() + (m - k) as f64 * (1.0 - lambda).ln()).exp()
        };
        let mut exact = 0.0;
        for s in 0..=w {
            for rest in 0..=(n - w) {
                let r = swblrt_from_counts(s, w, s + rest, n, th).unwrap();
                if r.reject {
                    exact += pmf(s, w) * pmf(rest, n - w);
                }
            }
        }
        let rep = calibrate_type_one(w as usize, 0.2, lambda, 20_000, n, 42).unwrap();
        assert!((rep.rate - exact).abs() < 0.015, "mc {} exact {exact}", rep.rate);
        assert!(rep.ci_low <= rep.rate && rep.rate <= rep.ci_high);
    }

    proptest! {
        #[test]
        fn closed_form_matches_explicit_likelihoods(
            w in 2u64..=25,
            s_frac in 0.0f64..=1.0,
            prefix in 1u64..200,
            prefix_frac in 0.0f64..=1.0,
        ) {
            let s = (s_frac * w as f64).round() as u64;
            let ps = (prefix_frac * prefix as f64).round() as u64;
            let r = swblrt_from_counts(s, w, s + ps, w + prefix, 1.0f64).unwrap();
            prop_assert!(r.statistic >= 0.0);
            prop_assert!((r.statistic - explicit_llr(s, w, s + ps, w + prefix)).abs() < 1e-9);
            let equal = rates_equal(s, w, s + ps, w + prefix);
            prop_assert_eq!(equal, r.statistic == 0.0);
            if !equal {
                prop_assert!(r.statistic > 1e-12);
            }
        }

        #[test]
        fn f32_tracks_f64(s in 0u64..=20, ps in 0u64..=40) {
            let a = swblrt_from_counts(s, 20, s + ps, 60, 1.0f64).unwrap().statistic;
            let b = swblrt_from_counts(s, 20, s + ps, 60, 1.0f32).unwrap().statistic;
            prop_assert!((a - f64::from(b)).abs() < 1e-3 * (1.0 + a));
        }
    }
}
