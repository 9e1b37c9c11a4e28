//! Scalar helpers shared by the model, sampler and diagnostics.

use statrs::function::erf::erfc_inv;
use statrs::function::gamma::ln_gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Logistic function, evaluated without overflow for any finite input.
#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(inv_logit(x))`.
#[inline]
pub fn log_inv_logit(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub fn normal_lpdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

/// Gamma log-density with shape/rate parameterization.
pub fn gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn lgamma(x: f64) -> f64 {
    ln_gamma(x)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator (two-pass).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Sorts a copy of `xs` with NaNs last.
pub fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Linearly interpolated quantile of already sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Inverse empirical CDF quantile of sorted data (R type 1). Always returns an
/// observed value, so it commutes with monotone transforms.
pub fn quantile_sorted_step(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let k = (n as f64 * q.clamp(0.0, 1.0)).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

pub fn median(xs: &[f64]) -> f64 {
    quantile_sorted(&sorted(xs), 0.5)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_helpers_are_stable_in_the_tails() {
        assert_eq!(inv_logit(800.0), 1.0);
        assert_eq!(inv_logit(-800.0), 0.0);
        assert_relative_eq!(log_inv_logit(-700.0), -700.0, max_relative = 1e-15);
        assert_relative_eq!(softplus(700.0), 700.0, max_relative = 1e-15);
        assert_relative_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(logit(inv_logit(1.3)), 1.3, epsilon = 1e-12);
    }

    #[test]
    fn normal_quantile_matches_known_values() {
        assert_relative_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-14);
        assert_relative_eq!(normal_quantile(0.975), 1.959_963_984_540_054, epsilon = 1e-12);
        assert_relative_eq!(normal_quantile(0.05), -1.644_853_626_951_472_2, epsilon = 1e-12);
    }

    #[test]
    fn quantile_types() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted_step(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted_step(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted_step(&s, 1.0), 4.0);
    }
}
