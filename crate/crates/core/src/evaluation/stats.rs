//! Non-parametric tests, binomial inference and agreement statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::EvalError;
use crate::numerics::Scalar;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Mid-ranks (1-based) of `values` and the sizes of tied groups.
pub fn midranks<T: Scalar>(values: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![T::zero(); values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share the mean of ranks i+1..=j
        let r = T::of((i + 1 + j) as f64 / 2.0);
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn check_finite<T: Scalar>(values: &[T]) -> Result<(), EvalError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(EvalError::Invalid("scores must be finite".into()))
    }
}

fn chi2_upper(stat: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive degrees of freedom").sf(stat)
}

fn normal_upper(z: f64) -> f64 {
    Normal::standard().sf(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult<T> {
    pub statistic: T,
    pub p_value: T,
    pub df: usize,
    pub mean_ranks: Vec<T>,
    /// Every row is constant, so the statistic is undefined; reported as
    /// χ² = 0, p = 1.
    pub degenerate: bool,
}

/// Friedman test over an `n × k` score matrix (rows are samples), with
/// within-row mid-ranks and the tie correction.
pub fn friedman<T: Scalar>(scores: &[Vec<T>]) -> Result<FriedmanResult<T>, EvalError> {
    let n = scores.len();
    let k = scores.first().map_or(0, Vec::len);
    if n < 2 || k < 3 {
        return Err(EvalError::Invalid(format!("Friedman needs n ≥ 2 and k ≥ 3, got n={n}, k={k}")));
    }
    let mut rank_sums = vec![T::zero(); k];
    let mut tie_term = T::zero();
    for row in scores {
        if row.len() != k {
            return Err(EvalError::Invalid("ragged score matrix".into()));
        }
        check_finite(row)?;
        let (r, ties) = midranks(row);
        for (s, v) in rank_sums.iter_mut().zip(r) {
            *s += v;
        }
        for t in ties {
            let t = T::of(t as f64);
            tie_term += t * t * t - t;
        }
    }
    let (nf, kf) = (T::of(n as f64), T::of(k as f64));
    let mean_ranks: Vec<T> = rank_sums.iter().map(|&s| s / nf).collect();
    let centre = (kf + T::one()) / T::of(2.0);
    let ss: T = mean_ranks.iter().map(|&r| (r - centre) * (r - centre)).sum();
    let raw = T::of(12.0) * nf / (kf * (kf + T::one())) * ss;
    let correction = T::one() - tie_term / (nf * kf * (kf * kf - T::one()));
    if correction <= T::epsilon() {
        return Ok(FriedmanResult {
            statistic: T::zero(),
            p_value: T::one(),
            df: k - 1,
            mean_ranks,
            degenerate: true,
        });
    }
    let statistic = raw / correction;
    let p = chi2_upper(statistic.to_f64().unwrap_or(f64::NAN), (k - 1) as f64);
    Ok(FriedmanResult {
        statistic,
        p_value: T::of(p),
        df: k - 1,
        mean_ranks,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    /// Exact enumeration for n ≤ 10 non-zero differences, normal above.
    Auto,
    Exact,
    Normal,
}

pub const EXACT_LIMIT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult<T> {
    /// Sum of ranks of the positive differences.
    pub statistic: T,
    pub n_nonzero: usize,
    pub z: Option<T>,
    pub p_value: T,
    pub exact: bool,
    /// All differences were zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Two-sided Wilcoxon signed-rank test of `x − y`, dropping zero
/// differences and using mid-ranks for ties.
pub fn wilcoxon_signed_rank<T: Scalar>(x: &[T], y: &[T], method: WilcoxonMethod) -> Result<WilcoxonResult<T>, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Invalid(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    check_finite(x)?;
    check_finite(y)?;
    let diffs: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).filter(|d| *d != T::zero()).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: T::zero(),
            n_nonzero: 0,
            z: None,
            p_value: T::one(),
            exact: false,
            degenerate: true,
        });
    }
    let abs: Vec<T> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus: T = ranks.iter().zip(&diffs).filter(|(_, d)| **d > T::zero()).map(|(r, _)| *r).sum();
    let nf = T::of(n as f64);
    let mean = nf * (nf + T::one()) / T::of(4.0);
    let exact = match method {
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
        WilcoxonMethod::Auto => n <= EXACT_LIMIT,
    };
    if exact {
        if n > 24 {
            return Err(EvalError::Invalid(format!("exact enumeration over {n} differences is too large")));
        }
        let observed = (w_plus - mean).abs();
        let slack = T::of(1e-9);
        let mut extreme = 0u64;
        for mask in 0u64..(1 << n) {
            let w: T = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (w - mean).abs() >= observed - slack {
                extreme += 1;
            }
        }
        return Ok(WilcoxonResult {
            statistic: w_plus,
            n_nonzero: n,
            z: None,
            p_value: T::of(extreme as f64 / (1u64 << n) as f64),
            exact: true,
            degenerate: false,
        });
    }
    let tie_term: T = ties.iter().map(|&t| T::of((t * t * t - t) as f64)).sum();
    let var = nf * (nf + T::one()) * (T::of(2.0) * nf + T::one()) / T::of(24.0) - tie_term / T::of(48.0);
    let num = ((w_plus - mean).abs() - T::of(0.5)).max(T::zero());
    let z = num / var.sqrt();
    let p = (2.0 * normal_upper(z.to_f64().unwrap_or(f64::NAN))).min(1.0);
    Ok(WilcoxonResult {
        statistic: w_plus,
        n_nonzero: n,
        z: Some(z),
        p_value: T::of(p),
        exact: false,
        degenerate: false,
    })
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm<T: Scalar>(p: &[T]) -> Vec<T> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).expect("finite p-values").then(a.cmp(&b)));
    let mut out = vec![T::zero(); m];
    let mut running = T::zero();
    for (i, &o) in order.iter().enumerate() {
        let adj = (T::of((m - i) as f64) * p[o]).min(T::one());
        running = running.max(adj);
        out[o] = running;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTest<T> {
    pub label: String,
    pub statistic: T,
    pub n_nonzero: usize,
    pub raw_p: T,
    pub adjusted_p: T,
    pub significant: bool,
    pub degenerate: bool,
}

/// Minimum non-zero differences for a pair to be tested.
pub const MIN_NONZERO: usize = 6;

/// Wilcoxon tests for each labelled pair, Holm-adjusted across the family.
pub fn wilcoxon_holm<T: Scalar>(pairs: &[(String, Vec<T>, Vec<T>)], alpha: f64, method: WilcoxonMethod) -> Result<Vec<PairTest<T>>, EvalError> {
    let mut results = Vec::with_capacity(pairs.len());
    for (label, x, y) in pairs {
        let r = wilcoxon_signed_rank(x, y, method)?;
        if !r.degenerate && r.n_nonzero < MIN_NONZERO {
            return Err(EvalError::Invalid(format!(
                "pair {label} has {} non-zero differences; at least {MIN_NONZERO} are needed",
                r.n_nonzero
            )));
        }
        results.push((label.clone(), r));
    }
    let adjusted = holm(&results.iter().map(|(_, r)| r.p_value).collect::<Vec<_>>());
    Ok(results
        .into_iter()
        .zip(adjusted)
        .map(|((label, r), adj)| PairTest {
            label,
            statistic: r.statistic,
            n_nonzero: r.n_nonzero,
            raw_p: r.p_value,
            adjusted_p: adj,
            significant: !r.degenerate && adj < T::of(alpha),
            degenerate: r.degenerate,
        })
        .collect())
}

fn ln_choose<T: Scalar>(n: u64, k: u64) -> T {
    let k = k.min(n - k);
    (0..k).map(|i| T::of(((n - i) as f64).ln() - ((i + 1) as f64).ln())).sum()
}

/// Probability of exactly `k` successes in `n` fair trials.
pub fn binomial_pmf_half<T: Scalar>(k: u64, n: u64) -> T {
    (ln_choose::<T>(n, k) - T::of(n as f64 * std::f64::consts::LN_2)).exp()
}

/// Exact two-sided binomial p-value against p = 0.5: the total probability
/// of outcomes no more likely than the observed one.
pub fn binomial_two_sided<T: Scalar>(k: u64, n: u64) -> Result<T, EvalError> {
    if k > n {
        return Err(EvalError::Invalid(format!("{k} successes out of {n} trials")));
    }
    if n == 0 {
        return Ok(T::one());
    }
    let observed = binomial_pmf_half::<T>(k, n);
    let bound = observed * T::of(1.0 + 1e-7);
    let p: T = (0..=n).map(|i| binomial_pmf_half::<T>(i, n)).filter(|&q| q <= bound).sum();
    Ok(p.min(T::one()))
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval<T: Scalar>(k: u64, n: u64, z: f64) -> Result<(T, T), EvalError> {
    if n == 0 || k > n {
        return Err(EvalError::Invalid(format!("Wilson interval for {k} of {n}")));
    }
    let (nf, z) = (T::of(n as f64), T::of(z));
    let p = T::of(k as f64) / nf;
    let z2 = z * z;
    let denom = T::one() + z2 / nf;
    let centre = (p + z2 / (T::of(2.0) * nf)) / denom;
    let half = z * (p * (T::one() - p) / nf + z2 / (T::of(4.0) * nf * nf)).sqrt() / denom;
    Ok(((centre - half).max(T::zero()), (centre + half).min(T::one())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinomialResult<T> {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// Wins among decisive cases.
    pub win_rate: T,
    pub p_value: T,
    pub ci95: (T, T),
}

/// Exact binomial test of wins against losses, ties excluded, with a
/// Wilson 95% interval on the win probability.
pub fn binomial_preference_test<T: Scalar>(wins: u64, losses: u64, ties: u64) -> Result<BinomialResult<T>, EvalError> {
    let n = wins + losses;
    if n == 0 {
        return Err(EvalError::Invalid("no decisive judgments".into()));
    }
    Ok(BinomialResult {
        wins,
        losses,
        ties,
        win_rate: T::of(wins as f64 / n as f64),
        p_value: binomial_two_sided(wins, n)?,
        ci95: wilson_interval(wins, n, Z_95)?,
    })
}

/// Cohen's κ between two labelings of the same items.
pub fn cohens_kappa<L: Ord, T: Scalar>(a: &[L], b: &[L]) -> Result<T, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid(format!("label sequences differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(EvalError::Invalid("kappa of no items".into()));
    }
    let n = T::of(a.len() as f64);
    let mut ma: BTreeMap<&L, usize> = BTreeMap::new();
    let mut mb: BTreeMap<&L, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1;
        *mb.entry(y).or_default() += 1;
        agree += usize::from(x == y);
    }
    let po = T::of(agree as f64) / n;
    let pe: T = ma
        .iter()
        .map(|(l, &c)| T::of(c as f64) / n * T::of(mb.get(l).copied().unwrap_or(0) as f64) / n)
        .sum();
    if (T::one() - pe).abs() <= T::epsilon() {
        return Err(EvalError::Undefined("kappa: chance agreement is 1".into()));
    }
    Ok((po - pe) / (T::one() - pe))
}
