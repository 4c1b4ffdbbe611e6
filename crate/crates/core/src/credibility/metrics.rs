//! Similarity metrics between two equal-length scalar series.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::CredibilityError;

fn check_equal(a: &[f64], b: &[f64], min: usize) -> Result<usize, CredibilityError> {
    if a.len() != b.len() {
        return Err(CredibilityError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min {
        return Err(CredibilityError::TooShort { need: min, got: a.len() });
    }
    Ok(a.len())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation coefficient.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64, CredibilityError> {
    check_equal(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CredibilityError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64, CredibilityError> {
    let n = check_equal(a, b, 1)?;
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / n as f64).sqrt())
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Theil's inequality coefficient.
pub fn tic(a: &[f64], b: &[f64]) -> Result<f64, CredibilityError> {
    let e = rmse(a, b)?;
    let den = rms(a) + rms(b);
    if den == 0.0 {
        return Err(CredibilityError::ZeroVariance);
    }
    Ok((e / den).clamp(0.0, 1.0))
}

/// Zero-mean, unit-variance copy (population variance).
pub fn standardize(x: &[f64]) -> Result<Vec<f64>, CredibilityError> {
    if x.is_empty() {
        return Err(CredibilityError::Empty);
    }
    let m = mean(x);
    let sd = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt();
    if sd == 0.0 {
        return Err(CredibilityError::ZeroVariance);
    }
    Ok(x.iter().map(|v| (v - m) / sd).collect())
}

/// Mean fuzzy similarity between all template pairs of length `len`, using
/// the first `count` start positions of each series.
fn phi(a: &[f64], b: &[f64], len: usize, count: usize, r: f64, n: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..count {
        for j in 0..count {
            let d = (0..len)
                .map(|k| (a[i + k] - b[j + k]).abs())
                .fold(0.0, f64::max);
            sum += (-(d / r).powf(n)).exp();
        }
    }
    sum / (count * count) as f64
}

/// Cross fuzzy entropy `ln φ^m − ln φ^(m+1)` with Chebyshev template
/// distance and membership `exp(−(d/r)^n)`. Both template lengths use the
/// same `N − m` start positions, so the value is never negative. Inputs are
/// expected to be standardized already. Returns infinity when a similarity
/// mean underflows to zero.
pub fn cross_fuzzy_en(a: &[f64], b: &[f64], m: usize, r: f64, n: f64) -> Result<f64, CredibilityError> {
    let len = check_equal(a, b, m + 2)?;
    if m == 0 || !(r > 0.0) || !(n > 0.0) {
        return Err(CredibilityError::BadParameter);
    }
    let count = len - m;
    let pm = phi(a, b, m, count, r, n);
    let pm1 = phi(a, b, m + 1, count, r, n);
    if pm == 0.0 || pm1 == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((pm.ln() - pm1.ln()).max(0.0))
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// One-sided Hann-windowed periodogram without the DC bin: bins 1..=N/2.
pub fn periodogram(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let w = hann(n);
    let mut buf: Vec<Complex<f64>> = x.iter().zip(&w).map(|(v, w)| Complex::new(v * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect()
}

/// Cosine similarity of the two power spectra.
pub fn cs_psd(a: &[f64], b: &[f64]) -> Result<f64, CredibilityError> {
    check_equal(a, b, 8)?;
    let (pa, pb) = (periodogram(a), periodogram(b));
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let na = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CredibilityError::ZeroSpectrum);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
