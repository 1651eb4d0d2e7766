//! Distribution and paired image metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::raster::GrayImage;

/// Maps images to fixed-width feature vectors for FID.
pub trait FeatureExtractor {
    fn name(&self) -> String;
    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>>;
}

/// Raw pixels as features.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn name(&self) -> String {
        "pixels".into()
    }

    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|i| i.pixels().iter().map(|&p| p as f64).collect())
            .collect())
    }
}

/// Means over `factor × factor` blocks; keeps covariance small enough to
/// estimate from a few dozen images.
#[derive(Debug, Clone, Copy)]
pub struct PooledPixels {
    pub factor: usize,
}

impl FeatureExtractor for PooledPixels {
    fn name(&self) -> String {
        format!("pooled-pixels-{}", self.factor)
    }

    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let f = self.factor;
        images
            .iter()
            .map(|img| {
                let (h, w) = img.dims();
                if f == 0 || h % f != 0 || w % f != 0 {
                    return Err(Error::Invalid(format!("pool factor {f} does not divide {h}x{w}")));
                }
                let mut out = Vec::with_capacity(h / f * (w / f));
                for by in 0..h / f {
                    for bx in 0..w / f {
                        let mut s = 0.0;
                        for y in by * f..(by + 1) * f {
                            for x in bx * f..(bx + 1) * f {
                                s += img.get(y, x) as f64;
                            }
                        }
                        out.push(s / (f * f) as f64);
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 samples for a covariance, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("feature rows differ in width".into()));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians. `Tr((Σ1Σ2)^½)` is taken
/// as the trace of the root of the symmetric `Σ1^½ Σ2 Σ1^½`, with negative
/// eigenvalues clipped to zero.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::shape(
            format!("mean {d}, covariance {d}x{d}"),
            format!("mean {}, covariances {:?} / {:?}", mu2.len(), sigma1.shape(), sigma2.shape()),
        ));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !mu1.iter().chain(mu2.iter()).all(|v| v.is_finite()) || !finite(sigma1) || !finite(sigma2) {
        return Err(Error::NonFinite("Gaussian moments".into()));
    }
    let diff = (mu1 - mu2).norm_squared();
    let r1 = psd_sqrt(sigma1);
    let inner = &r1 * sigma2 * &r1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let fd = diff + sigma1.trace() + sigma2.trace() - 2.0 * cross;
    // Rounding can push an exact zero slightly negative.
    Ok(fd.max(0.0))
}

pub fn compute_fid(
    real: &[&GrayImage],
    generated: &[&GrayImage],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::Invalid("FID needs at least 2 images per set".into()));
    }
    let (m1, s1) = gaussian_moments(&extractor.features(real)?)?;
    let (m2, s2) = gaussian_moments(&extractor.features(generated)?)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

fn check_pairs(a: &[&GrayImage], b: &[&GrayImage]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "need equally many paired images, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.dims() != y.dims() {
            return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", y.dims())));
        }
    }
    Ok(())
}

pub fn rmse(a: &[&GrayImage], b: &[&GrayImage]) -> Result<f64> {
    check_pairs(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.pixels().iter().zip(y.pixels()) {
            sum += ((p - q) as f64).powi(2);
        }
        n += x.pixels().len();
    }
    Ok((sum / n as f64).sqrt())
}

pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Summed-area table with a zero border row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            s[(y + 1) * (w + 1) + x + 1] =
                f(y, x) + s[y * (w + 1) + x + 1] + s[(y + 1) * (w + 1) + x] - s[y * (w + 1) + x];
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let w1 = w + 1;
    s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
}

/// Mean SSIM over every full 7×7 window, unit dynamic range, sample
/// covariances.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let (h, w) = a.dims();
    if b.dims() != (h, w) {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Invalid(format!("SSIM needs images of at least {k}x{k}")));
    }
    let pa = |y, x| a.get(y, x) as f64;
    let pb = |y, x| b.get(y, x) as f64;
    let sa = integral(h, w, pa);
    let sb = integral(h, w, pb);
    let saa = integral(h, w, |y, x| pa(y, x) * pa(y, x));
    let sbb = integral(h, w, |y, x| pb(y, x) * pb(y, x));
    let sab = integral(h, w, |y, x| pa(y, x) * pb(y, x));
    let n = (k * k) as f64;
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mx = box_sum(&sa, w, y, x, k) / n;
            let my = box_sum(&sb, w, y, x, k) / n;
            let unbias = n / (n - 1.0);
            let vx = (box_sum(&saa, w, y, x, k) / n - mx * mx) * unbias;
            let vy = (box_sum(&sbb, w, y, x, k) / n - my * my) * unbias;
            let cxy = (box_sum(&sab, w, y, x, k) / n - mx * my) * unbias;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn mssim(a: &[&GrayImage], b: &[&GrayImage]) -> Result<f64> {
    check_pairs(a, b)?;
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += ssim(x, y)?;
    }
    Ok(s / a.len() as f64)
}

/// Learned perceptual distance between paired images. No weights ship with
/// this crate; implementations wrap an external network.
pub trait PerceptualMetric {
    fn name(&self) -> String;
    fn distance(&self, a: &GrayImage, b: &GrayImage) -> Result<f64>;
}

pub fn mean_perceptual(metric: &dyn PerceptualMetric, a: &[&GrayImage], b: &[&GrayImage]) -> Result<f64> {
    check_pairs(a, b)?;
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += metric.distance(x, y)?;
    }
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn d1(m: f64, v: f64) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::from_element(1, m), DMatrix::from_element(1, 1, v))
    }

    #[test]
    fn frechet_closed_forms() {
        let (a, sa) = d1(0.0, 1.0);
        let (b, sb) = d1(1.0, 1.0);
        assert!((frechet_distance(&a, &sa, &b, &sb).unwrap() - 1.0).abs() < 1e-12);
        let (a, sa) = d1(0.0, 4.0);
        let (b, sb) = d1(0.0, 1.0);
        assert!((frechet_distance(&a, &sa, &b, &sb).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(frechet_distance(&a, &sa, &a, &sa).unwrap(), 0.0);
        let (c, sc) = (DVector::zeros(2), DMatrix::identity(2, 2));
        assert!(frechet_distance(&a, &sa, &c, &sc).is_err());
        let nan = DMatrix::from_element(1, 1, f64::NAN);
        assert!(frechet_distance(&a, &nan, &b, &sb).is_err());
    }

    #[test]
    fn diagonal_gaussians_match_closed_form() {
        // Σ diagonal: FD = |Δμ|² + Σ (σ1ᵢ − σ2ᵢ)².
        let mu1 = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let mu2 = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let v1 = [1.0, 4.0, 0.25];
        let v2 = [9.0, 1.0, 0.25];
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(v1.to_vec()));
        let s2 = DMatrix::from_diagonal(&DVector::from_vec(v2.to_vec()));
        let want = 0.25 + 4.0 + v1.iter().zip(&v2).map(|(a, b): (&f64, &f64)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
        assert!((frechet_distance(&mu1, &s1, &mu2, &s2).unwrap() - want).abs() < 1e-9);
    }

    fn tiny(values: &[f32]) -> GrayImage {
        GrayImage::from_vec(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn fid_sets() {
        let mut r = rng::seeded(2);
        let imgs: Vec<GrayImage> = (0..20)
            .map(|_| GrayImage::from_fn(8, 8, |_, _| r.random::<f32>()))
            .collect();
        let refs: Vec<&GrayImage> = imgs.iter().collect();
        assert!(compute_fid(&refs, &refs, &PixelFeatures).unwrap() < 1e-6);
        let white: Vec<GrayImage> = (0..4).map(|_| GrayImage::filled(8, 8, 1.0)).collect();
        let black: Vec<GrayImage> = (0..4).map(|_| GrayImage::filled(8, 8, 0.0)).collect();
        let fid = compute_fid(
            &white.iter().collect::<Vec<_>>(),
            &black.iter().collect::<Vec<_>>(),
            &PixelFeatures,
        )
        .unwrap();
        assert!(fid > 0.0);
        assert!(compute_fid(&refs[..1], &refs, &PixelFeatures).is_err());
    }

    #[test]
    fn fid_of_constructed_gaussian_sets() {
        // Two pixels per image, independent Gaussians with known moments.
        let mut r = rng::seeded(9);
        let n = 20000;
        let draw = |r: &mut rng::Rng, m: [f32; 2], s: [f32; 2]| -> Vec<GrayImage> {
            (0..n)
                .map(|_| {
                    let g = rng::normal_vec(r, 2);
                    tiny(&[m[0] + s[0] * g[0], m[1] + s[1] * g[1]])
                })
                .collect()
        };
        let a = draw(&mut r, [0.0, 1.0], [1.0, 2.0]);
        let b = draw(&mut r, [1.0, 1.0], [3.0, 1.0]);
        let fid = compute_fid(
            &a.iter().collect::<Vec<_>>(),
            &b.iter().collect::<Vec<_>>(),
            &PixelFeatures,
        )
        .unwrap();
        let want = 1.0 + (1.0f64 - 3.0).powi(2) + (2.0f64 - 1.0).powi(2);
        assert!((fid - want).abs() / want < 0.01, "{fid} vs {want}");
    }

    #[test]
    fn paired_metrics() {
        let zero = GrayImage::filled(16, 16, 0.0);
        let one = GrayImage::filled(16, 16, 1.0);
        let half = GrayImage::filled(16, 16, 0.5);
        assert_eq!(rmse(&[&zero], &[&zero]).unwrap(), 0.0);
        assert_eq!(rmse(&[&zero], &[&one]).unwrap(), 1.0);
        assert_eq!(rmse(&[&zero], &[&half]).unwrap(), 0.5);
        assert!((mssim(&[&half], &[&half]).unwrap() - 1.0).abs() < 1e-12);
        let x = GrayImage::from_fn(16, 16, |y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let inv = GrayImage::from_fn(16, 16, |y, xx| 1.0 - x.get(y, xx));
        assert!((mssim(&[&x], &[&x]).unwrap() - 1.0).abs() < 1e-9);
        assert!(mssim(&[&x], &[&inv]).unwrap() < 1.0);
        assert!(rmse(&[&x], &[&GrayImage::filled(8, 16, 0.0)]).is_err());
        assert!(mssim(&[&x, &x], &[&x]).is_err());
    }

    #[test]
    fn pooled_features_shape() {
        let img = GrayImage::from_fn(8, 16, |y, _| y as f32);
        let f = PooledPixels { factor: 4 }.features(&[&img]).unwrap();
        assert_eq!(f[0].len(), 8);
        assert_eq!(f[0][0], 1.5);
        assert!(PooledPixels { factor: 3 }.features(&[&img]).is_err());
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric(
            m in prop::collection::vec(-2f64..2.0, 4),
            a in prop::collection::vec(-1f64..1.0, 4),
            b in prop::collection::vec(-1f64..1.0, 4),
        ) {
            // Rank-one-plus-identity covariances are SPD.
            let va = DVector::from_vec(a);
            let vb = DVector::from_vec(b);
            let s1 = DMatrix::identity(2, 2) + &va.rows(0, 2) * va.rows(0, 2).transpose();
            let s2 = DMatrix::identity(2, 2) * 0.5 + &vb.rows(2, 2) * vb.rows(2, 2).transpose();
            let m1 = DVector::from_vec(m[..2].to_vec());
            let m2 = DVector::from_vec(m[2..].to_vec());
            let ab = frechet_distance(&m1, &s1, &m2, &s2).unwrap();
            let ba = frechet_distance(&m2, &s2, &m1, &s1).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            prop_assert!(ab >= 0.0);
            prop_assert!(frechet_distance(&m1, &s1, &m1, &s1).unwrap() < 1e-8);
        }
    }
}
