//! Image-fidelity metrics: SSIM, PSNR and a Fréchet distance over frozen
//! quality-net encoder features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonoError};
use crate::frame::Frame;
use crate::quality::Encoder;

pub const SSIM_WINDOW: usize = 8;
pub const PSNR_CAP: f64 = 100.0;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssim: f64,
    pub psnr: f64,
    pub ffd: f64,
    pub sample_count: usize,
}

fn check_sizes(a: &Frame, b: &Frame) -> Result<()> {
    if a.size() != b.size() {
        return Err(SonoError::Contract(format!(
            "dimension mismatch: {0}x{0} vs {1}x{1}",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// Summed-area table with a zero first row and column.
fn integral(n: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let w = n + 1;
    let mut s = vec![0.0; w * w];
    for y in 0..n {
        let mut row = 0.0;
        for x in 0..n {
            row += f(y * n + x);
            s[(y + 1) * w + x + 1] = s[y * w + x + 1] + row;
        }
    }
    s
}

/// Mean local SSIM of two `[0,1]` images of side `n` over every 8×8 window.
pub fn ssim_unit(a: &[f64], b: &[f64], n: usize) -> Result<f64> {
    if a.len() != n * n || b.len() != n * n {
        return Err(SonoError::Contract("ssim: buffer does not match side length".into()));
    }
    if n < SSIM_WINDOW {
        return Err(SonoError::Contract(format!("ssim needs frames of at least {SSIM_WINDOW} px")));
    }
    let sa = integral(n, |i| a[i]);
    let sb = integral(n, |i| b[i]);
    let saa = integral(n, |i| a[i] * a[i]);
    let sbb = integral(n, |i| b[i] * b[i]);
    let sab = integral(n, |i| a[i] * b[i]);
    let w = n + 1;
    let k = SSIM_WINDOW;
    let area = (k * k) as f64;
    let boxsum = |s: &[f64], y: usize, x: usize| s[(y + k) * w + x + k] - s[y * w + x + k] - s[(y + k) * w + x] + s[y * w + x];
    let m = n - k + 1;
    let mut total = 0.0;
    for y in 0..m {
        for x in 0..m {
            let mu_a = boxsum(&sa, y, x) / area;
            let mu_b = boxsum(&sb, y, x) / area;
            let var_a = (boxsum(&saa, y, x) / area - mu_a * mu_a).max(0.0);
            let var_b = (boxsum(&sbb, y, x) / area - mu_b * mu_b).max(0.0);
            let cov = boxsum(&sab, y, x) / area - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
        }
    }
    Ok(total / (m * m) as f64)
}

pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_sizes(a, b)?;
    ssim_unit(&a.to_unit(), &b.to_unit(), a.size())
}

/// PSNR in dB with both frames mapped to `[0,1]`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_sizes(a, b)?;
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let mse = ua.iter().zip(&ub).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ua.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_fit(xs: &[Vec<f64>], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in xs {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| SonoError::Numerical("eigendecomposition did not converge".into()))
}

/// Symmetric PSD square root with negative eigenvalues clipped at 0.
fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m)?;
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|x| x.len() != d) || d == 0 {
        return Err(SonoError::Contract("feature vectors must share a nonzero length".into()));
    }
    for set in [a, b] {
        if set.len() < d + 1 {
            return Err(SonoError::SampleSize {
                need: d + 1,
                got: set.len(),
            });
        }
    }
    let (mu_a, cov_a) = gaussian_fit(a, d);
    let (mu_b, cov_b) = gaussian_fit(b, d);
    let ra = sqrt_psd(cov_a.clone())?;
    let mut inner = &ra * &cov_b * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = eigen(inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dist = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

pub fn frechet_feature_distance(a: &[&Frame], b: &[&Frame], encoder: &Encoder) -> Result<f64> {
    frechet_distance(&encoder.features(a)?, &encoder.features(b)?)
}

/// Mean pairwise SSIM and PSNR of `generated[i]` against `reference[i]`
/// plus the set-level FFD.
pub fn evaluate(generated: &[&Frame], reference: &[&Frame], encoder: &Encoder) -> Result<MetricReport> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(SonoError::Contract(format!(
            "need equally sized nonempty sets, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let n = generated.len();
    let mut s = 0.0;
    let mut p = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        s += ssim(g, r)?;
        p += psnr(g, r)?;
    }
    Ok(MetricReport {
        ssim: s / n as f64,
        psnr: p / n as f64,
        ffd: frechet_feature_distance(generated, reference, encoder)?,
        sample_count: n,
    })
}
