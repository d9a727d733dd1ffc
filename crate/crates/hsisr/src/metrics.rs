//! Reconstruction quality metrics for normalized hyperspectral cubes:
//! mean per-band PSNR, mean per-band SSIM, per-pixel spectral angle,
//! mean per-band Pearson correlation, and global RMSE.
//!
//! Conventions documented here because they vary across the literature:
//! PSNR uses MAX = 1 (cubes are normalized) and caps a band at 100 dB when
//! its MSE falls below 1e-10; SSIM uses an 11x11 Gaussian window with
//! sigma 1.5 (truncated and renormalized), C1 = 0.01^2, C2 = 0.03^2, and
//! aggregates only fully-inside window positions; SAM is the per-pixel mean
//! in degrees, skipping pixels whose reference or test spectrum has nearly
//! zero norm; CC skips bands that are constant in either cube. All
//! accumulation is in f64 with a fixed order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

/// PSNR cap applied when a band's MSE is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// SSIM stabilizers for data in [0, 1].
pub const SSIM_C1: f64 = 1e-4; // (0.01)^2
pub const SSIM_C2: f64 = 9e-4; // (0.03)^2
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Spectra with norm below this are skipped by SAM.
pub const SAM_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image {h}x{w} is smaller than the {win}x{win} SSIM window")]
    WindowTooLarge { h: usize, w: usize, win: usize },
    #[error("every pixel has a degenerate spectrum; SAM is undefined")]
    AllPixelsDegenerate,
    #[error("every band is constant; CC is undefined")]
    AllBandsConstant,
    #[error("reports with different band counts cannot be aggregated")]
    MixedBandCounts,
    #[error("cannot aggregate an empty report list")]
    EmptyAggregate,
}

fn check_same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(), MetricsError> {
    if !a.same_dims(b) {
        return Err(MetricsError::Tensor(TensorError::ShapeMismatch {
            left: a.dims(),
            right: b.dims(),
        }));
    }
    Ok(())
}

/// Per-band mean squared errors.
fn band_mse<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Vec<f64> {
    let c = reference.channels();
    let mut acc = vec![0.0f64; c];
    for (rp, tp) in reference
        .data()
        .chunks_exact(c)
        .zip(test.data().chunks_exact(c))
    {
        for ci in 0..c {
            let d = rp[ci].to_f64() - tp[ci].to_f64();
            acc[ci] += d * d;
        }
    }
    let n = (reference.len() / c) as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Mean over bands of per-band PSNR in dB, with the per-band breakdown.
pub fn mpsnr<T: Scalar>(
    reference: &Tensor<T>,
    test: &Tensor<T>,
) -> Result<(f64, Vec<f64>), MetricsError> {
    check_same_dims(reference, test)?;
    let per_band: Vec<f64> = band_mse(reference, test)
        .into_iter()
        .map(|mse| {
            if mse < PSNR_MSE_FLOOR {
                PSNR_CAP_DB
            } else {
                10.0 * (1.0 / mse).log10()
            }
        })
        .collect();
    let mean = per_band.iter().sum::<f64>() / per_band.len() as f64;
    Ok((mean, per_band))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let denom = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    for i in -half..=half {
        for j in -half..=half {
            w.push((-((i * i + j * j) as f64) / denom).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean over bands of per-band SSIM, valid-region aggregation.
pub fn mssim<T: Scalar>(
    reference: &Tensor<T>,
    test: &Tensor<T>,
) -> Result<(f64, Vec<f64>), MetricsError> {
    check_same_dims(reference, test)?;
    let (b, h, w, c) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::WindowTooLarge {
            h,
            w,
            win: SSIM_WINDOW,
        });
    }
    let window = gaussian_window();
    let mut per_band = vec![0.0f64; c];
    let positions = (b * (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)) as f64;
    for ci in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            for oy in 0..=h - SSIM_WINDOW {
                for ox in 0..=w - SSIM_WINDOW {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut sxx = 0.0;
                    let mut syy = 0.0;
                    let mut sxy = 0.0;
                    let mut wi = 0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let weight = window[wi];
                            wi += 1;
                            let xv = reference.at(bi, oy + dy, ox + dx, ci).to_f64();
                            let yv = test.at(bi, oy + dy, ox + dx, ci).to_f64();
                            mx += weight * xv;
                            my += weight * yv;
                            sxx += weight * xv * xv;
                            syy += weight * yv * yv;
                            sxy += weight * xv * yv;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                }
            }
        }
        per_band[ci] = acc / positions;
    }
    let mean = per_band.iter().sum::<f64>() / c as f64;
    Ok((mean, per_band))
}

/// Mean per-pixel spectral angle in degrees, plus the number of pixels
/// skipped because one of the spectra had a vanishing norm.
pub fn sam<T: Scalar>(
    reference: &Tensor<T>,
    test: &Tensor<T>,
) -> Result<(f64, usize), MetricsError> {
    check_same_dims(reference, test)?;
    let c = reference.channels();
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (rp, tp) in reference
        .data()
        .chunks_exact(c)
        .zip(test.data().chunks_exact(c))
    {
        let mut dot = 0.0;
        let mut nr2 = 0.0;
        let mut nt2 = 0.0;
        for ci in 0..c {
            let r = rp[ci].to_f64();
            let t = tp[ci].to_f64();
            dot += r * t;
            nr2 += r * r;
            nt2 += t * t;
        }
        if nr2.sqrt() < SAM_NORM_FLOOR || nt2.sqrt() < SAM_NORM_FLOOR {
            skipped += 1;
            continue;
        }
        // Parallel spectra must report exactly 0 (or 180) degrees; comparing
        // dot^2 against the norm product avoids acos amplifying rounding.
        let angle = if dot * dot >= nr2 * nt2 {
            if dot >= 0.0 {
                0.0
            } else {
                180.0
            }
        } else {
            let cos = (dot / (nr2 * nt2).sqrt()).clamp(-1.0, 1.0);
            cos.acos().to_degrees()
        };
        sum += angle;
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::AllPixelsDegenerate);
    }
    Ok((sum / counted as f64, skipped))
}

/// Mean over bands of the per-band Pearson correlation; constant bands in
/// either cube are skipped (reported as `None` in the breakdown).
pub fn cc<T: Scalar>(
    reference: &Tensor<T>,
    test: &Tensor<T>,
) -> Result<(f64, Vec<Option<f64>>), MetricsError> {
    check_same_dims(reference, test)?;
    let c = reference.channels();
    let n = (reference.len() / c) as f64;

    let mut sums = vec![[0.0f64; 5]; c]; // sx, sy, sxx, syy, sxy
    for (rp, tp) in reference
        .data()
        .chunks_exact(c)
        .zip(test.data().chunks_exact(c))
    {
        for ci in 0..c {
            let x = rp[ci].to_f64();
            let y = tp[ci].to_f64();
            let s = &mut sums[ci];
            s[0] += x;
            s[1] += y;
            s[2] += x * x;
            s[3] += y * y;
            s[4] += x * y;
        }
    }
    let per_band: Vec<Option<f64>> = sums
        .iter()
        .map(|s| {
            let vx = s[2] - s[0] * s[0] / n;
            let vy = s[3] - s[1] * s[1] / n;
            if vx <= 1e-24 || vy <= 1e-24 {
                None
            } else {
                Some((s[4] - s[0] * s[1] / n) / (vx * vy).sqrt())
            }
        })
        .collect();
    let valid: Vec<f64> = per_band.iter().filter_map(|v| *v).collect();
    if valid.is_empty() {
        return Err(MetricsError::AllBandsConstant);
    }
    Ok((valid.iter().sum::<f64>() / valid.len() as f64, per_band))
}

/// Root mean square error over all elements.
pub fn rmse<T: Scalar>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64, MetricsError> {
    check_same_dims(reference, test)?;
    let mut sum = 0.0;
    for (&r, &t) in reference.data().iter().zip(test.data()) {
        let d = Scalar::to_f64(r) - Scalar::to_f64(t);
        sum += d * d;
    }
    Ok((sum / reference.len() as f64).sqrt())
}

/// All five metrics plus per-band breakdowns and degenerate-case counters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpsnr_db: f64,
    pub mssim: f64,
    pub sam_deg: f64,
    pub cc: f64,
    pub rmse: f64,
    pub mpsnr_db_per_band: Vec<f64>,
    pub mssim_per_band: Vec<f64>,
    pub cc_per_band: Vec<Option<f64>>,
    pub sam_skipped_pixels: usize,
    pub cc_skipped_bands: usize,
}

impl MetricsReport {
    /// Computes every metric for a reference/test cube pair.
    pub fn compute<T: Scalar>(
        reference: &Tensor<T>,
        test: &Tensor<T>,
    ) -> Result<Self, MetricsError> {
        let (mpsnr_db, mpsnr_db_per_band) = mpsnr(reference, test)?;
        let (mssim_v, mssim_per_band) = mssim(reference, test)?;
        let (sam_deg, sam_skipped_pixels) = sam(reference, test)?;
        let (cc_v, cc_per_band) = cc(reference, test)?;
        let cc_skipped_bands = cc_per_band.iter().filter(|v| v.is_none()).count();
        let rmse_v = rmse(reference, test)?;
        Ok(Self {
            mpsnr_db,
            mssim: mssim_v,
            sam_deg,
            cc: cc_v,
            rmse: rmse_v,
            mpsnr_db_per_band,
            mssim_per_band,
            cc_per_band,
            sam_skipped_pixels,
            cc_skipped_bands,
        })
    }

    /// Mean of scalar metrics and per-band arrays over several reports;
    /// skip counters are summed. All reports must share the band count.
    pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
        let first = reports.first().ok_or(MetricsError::EmptyAggregate)?;
        let bands = first.mpsnr_db_per_band.len();
        if reports.iter().any(|r| r.mpsnr_db_per_band.len() != bands) {
            return Err(MetricsError::MixedBandCounts);
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut mpsnr_band = vec![0.0; bands];
        let mut mssim_band = vec![0.0; bands];
        let mut cc_band: Vec<Option<f64>> = vec![Some(0.0); bands];
        for r in reports {
            for i in 0..bands {
                mpsnr_band[i] += r.mpsnr_db_per_band[i] / n;
                mssim_band[i] += r.mssim_per_band[i] / n;
                cc_band[i] = match (cc_band[i], r.cc_per_band[i]) {
                    (Some(acc), Some(v)) => Some(acc + v / n),
                    _ => None,
                };
            }
        }
        Ok(MetricsReport {
            mpsnr_db: mean(|r| r.mpsnr_db),
            mssim: mean(|r| r.mssim),
            sam_deg: mean(|r| r.sam_deg),
            cc: mean(|r| r.cc),
            rmse: mean(|r| r.rmse),
            mpsnr_db_per_band: mpsnr_band,
            mssim_per_band: mssim_band,
            cc_per_band: cc_band,
            sam_skipped_pixels: reports.iter().map(|r| r.sam_skipped_pixels).sum(),
            cc_skipped_bands: reports.iter().map(|r| r.cc_skipped_bands).sum(),
        })
    }

    /// Flat `key = value` rendering; arrays are comma-separated, skipped CC
    /// bands print as `nan`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mpsnr_db = {:.6}", self.mpsnr_db);
        let _ = writeln!(s, "mssim = {:.6}", self.mssim);
        let _ = writeln!(s, "sam_deg = {:.6}", self.sam_deg);
        let _ = writeln!(s, "cc = {:.6}", self.cc);
        let _ = writeln!(s, "rmse = {:.6}", self.rmse);
        let _ = writeln!(s, "sam_skipped_pixels = {}", self.sam_skipped_pixels);
        let _ = writeln!(s, "cc_skipped_bands = {}", self.cc_skipped_bands);
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "mpsnr_db_per_band = {}", join(&self.mpsnr_db_per_band));
        let _ = writeln!(s, "mssim_per_band = {}", join(&self.mssim_per_band));
        let cc_join = self
            .cc_per_band
            .iter()
            .map(|v| v.map_or("nan".to_string(), |x| format!("{x:.6}")))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "cc_per_band = {cc_join}");
        s
    }

    /// Machine-readable rendering (JSON).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, seeded_tensor};

    #[test]
    fn mpsnr_closed_form_and_cap() {
        // Every band MSE = 0.01 -> 20 dB.
        let reference = Tensor::<f64>::zeros(1, 4, 4, 3);
        let test = Tensor::<f64>::filled(1, 4, 4, 3, 0.1);
        let (v, per_band) = mpsnr(&reference, &test).unwrap();
        assert_close(v, 20.0, 1e-9);
        assert!(per_band.iter().all(|&p| (p - 20.0).abs() < 1e-9));
        // Identical cubes hit the documented cap.
        let (v, _) = mpsnr(&reference, &reference).unwrap();
        assert_eq!(v, PSNR_CAP_DB);
    }

    #[test]
    fn mpsnr_matches_per_band_loop_oracle() {
        let a = seeded_tensor::<f64>(300, 1, 6, 6, 4, 0.0, 1.0);
        let b = seeded_tensor::<f64>(301, 1, 6, 6, 4, 0.0, 1.0);
        let (v, per_band) = mpsnr(&a, &b).unwrap();
        let mut want = Vec::new();
        for ci in 0..4 {
            let mut mse = 0.0;
            for h in 0..6 {
                for w in 0..6 {
                    let d = a.at(0, h, w, ci) - b.at(0, h, w, ci);
                    mse += d * d;
                }
            }
            mse /= 36.0;
            want.push(10.0 * (1.0 / mse).log10());
        }
        for (g, w) in per_band.iter().zip(&want) {
            assert_close(*g, *w, 1e-9);
        }
        assert_close(v, want.iter().sum::<f64>() / 4.0, 1e-9);
    }

    #[test]
    fn mpsnr_decreases_when_band_mse_grows() {
        let reference = Tensor::<f64>::zeros(1, 4, 4, 2);
        let t1 = Tensor::<f64>::filled(1, 4, 4, 2, 0.1);
        let t2 = Tensor::<f64>::filled(1, 4, 4, 2, 0.2);
        assert!(mpsnr(&reference, &t2).unwrap().0 < mpsnr(&reference, &t1).unwrap().0);
    }

    #[test]
    fn mssim_identical_is_one() {
        let a = seeded_tensor::<f64>(302, 1, 12, 13, 2, 0.0, 1.0);
        let (v, per_band) = mssim(&a, &a).unwrap();
        assert_close(v, 1.0, 1e-12);
        assert!(per_band.iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn mssim_constant_pair_closed_form() {
        // ref constant c, test constant c + d: variance terms vanish and
        // SSIM = (2c(c+d) + C1) / (c^2 + (c+d)^2 + C1).
        let c = 0.4;
        let d = 0.2;
        let reference = Tensor::<f64>::filled(1, 11, 11, 1, c);
        let test = Tensor::<f64>::filled(1, 11, 11, 1, c + d);
        let (v, _) = mssim(&reference, &test).unwrap();
        let want = (2.0 * c * (c + d) + SSIM_C1) / (c * c + (c + d) * (c + d) + SSIM_C1);
        assert_close(v, want, 1e-9);
    }

    #[test]
    fn mssim_matches_sliding_window_oracle() {
        let a = seeded_tensor::<f64>(303, 1, 13, 12, 2, 0.0, 1.0);
        let b = a.map(|v| (v * 0.9 + 0.03).min(1.0));
        let (got, _) = mssim(&a, &b).unwrap();

        // Direct oracle: same statistics computed with scalar loops.
        let window = gaussian_window();
        let mut total = 0.0;
        for ci in 0..2 {
            let mut acc = 0.0;
            let mut count = 0.0;
            for oy in 0..=13 - SSIM_WINDOW {
                for ox in 0..=12 - SSIM_WINDOW {
                    let mut stats = [0.0f64; 5];
                    let mut wi = 0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = window[wi];
                            wi += 1;
                            let x = a.at(0, oy + dy, ox + dx, ci);
                            let y = b.at(0, oy + dy, ox + dx, ci);
                            stats[0] += wgt * x;
                            stats[1] += wgt * y;
                            stats[2] += wgt * x * x;
                            stats[3] += wgt * y * y;
                            stats[4] += wgt * x * y;
                        }
                    }
                    let (mx, my) = (stats[0], stats[1]);
                    let vx = stats[2] - mx * mx;
                    let vy = stats[3] - my * my;
                    let cov = stats[4] - mx * my;
                    acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1.0;
                }
            }
            total += acc / count;
        }
        assert_close(got, total / 2.0, 1e-6);
    }

    #[test]
    fn mssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(1, 8, 8, 1);
        assert!(matches!(
            mssim(&a, &a),
            Err(MetricsError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn sam_basic_angles() {
        let a = seeded_tensor::<f64>(304, 1, 3, 3, 4, 0.1, 1.0);
        assert_close(sam(&a, &a).unwrap().0, 0.0, 1e-9);
        // Positive scaling is invisible to the angle.
        let scaled = a.map(|v| v * 3.7);
        assert_close(sam(&a, &scaled).unwrap().0, 0.0, 1e-6);
        // Orthogonal unit axes: 90 degrees.
        let e1 = Tensor::<f64>::new(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::<f64>::new(1, 1, 1, 2, vec![0.0, 1.0]).unwrap();
        assert_close(sam(&e1, &e2).unwrap().0, 90.0, 1e-9);
    }

    #[test]
    fn sam_skips_degenerate_pixels() {
        let mut data = vec![0.0; 4];
        data[2] = 1.0;
        data[3] = 1.0;
        // Pixel 0 has zero norm in both cubes, pixel 1 is fine.
        let a = Tensor::<f64>::new(1, 1, 2, 2, data.clone()).unwrap();
        let (angle, skipped) = sam(&a, &a).unwrap();
        assert_eq!(skipped, 1);
        assert_close(angle, 0.0, 1e-9);
        // All-degenerate input is an error.
        let z = Tensor::<f64>::zeros(1, 2, 2, 3);
        assert!(matches!(sam(&z, &z), Err(MetricsError::AllPixelsDegenerate)));
    }

    #[test]
    fn sam_range_is_bounded() {
        let a = seeded_tensor::<f64>(305, 1, 5, 5, 3, 0.0, 1.0);
        let b = seeded_tensor::<f64>(306, 1, 5, 5, 3, 0.0, 1.0);
        let (angle, _) = sam(&a, &b).unwrap();
        assert!((0.0..=180.0).contains(&angle));
    }

    #[test]
    fn cc_perfect_and_anti_correlation() {
        let a = seeded_tensor::<f64>(307, 1, 5, 5, 3, 0.0, 1.0);
        assert_close(cc(&a, &a).unwrap().0, 1.0, 1e-12);
        let b = a.map(|v| -v + 2.0);
        assert_close(cc(&a, &b).unwrap().0, -1.0, 1e-12);
    }

    #[test]
    fn cc_matches_two_pass_oracle_and_skips_constant_bands() {
        let a = seeded_tensor::<f64>(308, 1, 6, 6, 3, 0.0, 1.0);
        let b = seeded_tensor::<f64>(309, 1, 6, 6, 3, 0.0, 1.0);
        let (got, per_band) = cc(&a, &b).unwrap();
        let mut want = Vec::new();
        for ci in 0..3 {
            let n = 36.0;
            let mut mx = 0.0;
            let mut my = 0.0;
            for h in 0..6 {
                for w in 0..6 {
                    mx += a.at(0, h, w, ci);
                    my += b.at(0, h, w, ci);
                }
            }
            mx /= n;
            my /= n;
            let mut cov = 0.0;
            let mut vx = 0.0;
            let mut vy = 0.0;
            for h in 0..6 {
                for w in 0..6 {
                    let dx = a.at(0, h, w, ci) - mx;
                    let dy = b.at(0, h, w, ci) - my;
                    cov += dx * dy;
                    vx += dx * dx;
                    vy += dy * dy;
                }
            }
            want.push(cov / (vx * vy).sqrt());
        }
        for (g, w) in per_band.iter().zip(&want) {
            assert_close(g.unwrap(), *w, 1e-9);
        }
        assert_close(got, want.iter().sum::<f64>() / 3.0, 1e-9);

        // A constant band in one cube is skipped, not propagated as NaN.
        let mut data = a.data().to_vec();
        for px in data.chunks_exact_mut(3) {
            px[1] = 0.5;
        }
        let flat = Tensor::new(1, 6, 6, 3, data).unwrap();
        let (_, per_band) = cc(&flat, &b).unwrap();
        assert!(per_band[1].is_none());
        assert!(per_band[0].is_some() && per_band[2].is_some());

        let k = Tensor::<f64>::filled(1, 3, 3, 2, 0.5);
        assert!(matches!(cc(&k, &k), Err(MetricsError::AllBandsConstant)));
    }

    #[test]
    fn rmse_uniform_difference() {
        let a = Tensor::<f64>::zeros(1, 3, 3, 2);
        let b = Tensor::<f64>::filled(1, 3, 3, 2, 0.5);
        assert_close(rmse(&a, &b).unwrap(), 0.5, 1e-15);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_invariant_under_band_permutation() {
        // Permuting bands identically in both cubes leaves mpsnr, rmse and
        // cc unchanged (they are means over bands).
        let a = seeded_tensor::<f64>(310, 1, 6, 6, 4, 0.0, 1.0);
        let b = seeded_tensor::<f64>(311, 1, 6, 6, 4, 0.0, 1.0);
        let perm = [2usize, 0, 3, 1];
        let ap = Tensor::from_fn(1, 6, 6, 4, |bi, h, w, c| a.at(bi, h, w, perm[c]));
        let bp = Tensor::from_fn(1, 6, 6, 4, |bi, h, w, c| b.at(bi, h, w, perm[c]));
        assert_close(mpsnr(&a, &b).unwrap().0, mpsnr(&ap, &bp).unwrap().0, 1e-12);
        assert_close(rmse(&a, &b).unwrap(), rmse(&ap, &bp).unwrap(), 1e-12);
        assert_close(cc(&a, &b).unwrap().0, cc(&ap, &bp).unwrap().0, 1e-12);
        // MSE and the spatial loss are also band-order blind.
        let (m1, _) = crate::loss::mse_loss(&a, &b).unwrap();
        let (m2, _) = crate::loss::mse_loss(&ap, &bp).unwrap();
        assert_close(m1, m2, 1e-12);
        let (s1, _) = crate::loss::spatial_gradient_loss(&a, &b).unwrap();
        let (s2, _) = crate::loss::spatial_gradient_loss(&ap, &bp).unwrap();
        assert_close(s1, s2, 1e-12);
    }

    #[test]
    fn report_scalar_summaries_match_band_means() {
        let a = seeded_tensor::<f64>(312, 1, 12, 12, 3, 0.0, 1.0);
        let b = a.map(|v| (v * 0.95 + 0.01).min(1.0));
        let r = MetricsReport::compute(&a, &b).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_close(r.mpsnr_db, mean(&r.mpsnr_db_per_band), 1e-9);
        assert_close(r.mssim, mean(&r.mssim_per_band), 1e-9);
        let valid: Vec<f64> = r.cc_per_band.iter().filter_map(|v| *v).collect();
        assert_close(r.cc, mean(&valid), 1e-9);
        assert!((-1.0..=1.0).contains(&r.mssim));
        assert!(r.sam_deg >= 0.0 && r.rmse >= 0.0);
    }

    #[test]
    fn aggregate_is_arithmetic_mean() {
        let a = seeded_tensor::<f64>(313, 1, 12, 12, 2, 0.0, 1.0);
        let b = a.map(|v| (v * 0.9).max(0.0));
        let c1 = MetricsReport::compute(&a, &b).unwrap();
        let c2 = MetricsReport::compute(&b, &a).unwrap();
        let agg = MetricsReport::aggregate(&[c1.clone(), c2.clone()]).unwrap();
        assert_close(agg.mpsnr_db, (c1.mpsnr_db + c2.mpsnr_db) / 2.0, 1e-9);
        assert_close(agg.rmse, (c1.rmse + c2.rmse) / 2.0, 1e-9);
        assert!(MetricsReport::aggregate(&[]).is_err());
    }

    #[test]
    fn text_and_json_render_deterministically() {
        let a = seeded_tensor::<f64>(314, 1, 11, 11, 2, 0.0, 1.0);
        let b = a.map(|v| v * 0.98);
        let r = MetricsReport::compute(&a, &b).unwrap();
        assert_eq!(r.to_text(), r.to_text());
        assert_eq!(r.to_json(), r.to_json());
        assert!(r.to_text().contains("mpsnr_db = "));
        let parsed: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(parsed.mpsnr_db, r.mpsnr_db);
    }
}
