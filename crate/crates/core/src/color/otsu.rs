//! Otsu's histogram threshold.
//!
//! Candidate scores are compared exactly. For a split at `t` with lower class
//! weight `w0`, lower class level sum `s0`, total weight `n` and total level
//! sum `s`, the between-class variance is proportional to
//! `(n*s0 - w0*s)^2 / (w0 * (n - w0))`; the numerator is kept as an integer
//! and two candidates are compared by cross multiplication.

use num_bigint::BigUint;

use super::ColorError;

/// A 256-bin histogram of 8-bit levels.
pub type Histogram = [u64; 256];

pub fn histogram<I: IntoIterator<Item = u8>>(levels: I) -> Histogram {
    let mut h = [0u64; 256];
    for v in levels {
        h[usize::from(v)] += 1;
    }
    h
}

#[derive(Clone, Copy)]
struct Score {
    // |n*s0 - w0*s|
    diff: u128,
    // w0 * w1
    weight: u128,
}

impl Score {
    fn exceeds(&self, other: &Score) -> bool {
        // diff_a^2 / weight_a > diff_b^2 / weight_b
        let lhs = BigUint::from(self.diff).pow(2) * BigUint::from(other.weight);
        let rhs = BigUint::from(other.diff).pow(2) * BigUint::from(self.weight);
        lhs > rhs
    }
}

/// Returns the level `t` maximizing the between-class variance of the split
/// `{<= t}` / `{> t}`, choosing the smallest such `t`. Only splits with both
/// classes non-empty compete; a histogram occupying a single level returns that
/// level.
///
/// Exact for histograms whose total count stays below 2^56.
pub fn otsu_threshold(hist: &Histogram) -> Result<u8, ColorError> {
    let total: u128 = hist.iter().map(|&c| u128::from(c)).sum();
    if total == 0 {
        return Err(ColorError::EmptyHistogram);
    }
    let level_sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * u128::from(c)).sum();

    let mut best: Option<(u8, Score)> = None;
    let mut w0: u128 = 0;
    let mut s0: u128 = 0;
    for t in 0..=255usize {
        w0 += u128::from(hist[t]);
        s0 += t as u128 * u128::from(hist[t]);
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let score = Score { diff: (total * s0).abs_diff(w0 * level_sum), weight: w0 * w1 };
        match &best {
            Some((_, b)) if !score.exceeds(b) => {}
            _ => best = Some((t as u8, score)),
        }
    }
    Ok(match best {
        Some((t, _)) => t,
        // single occupied level
        None => hist.iter().position(|&c| c > 0).expect("total > 0") as u8,
    })
}
