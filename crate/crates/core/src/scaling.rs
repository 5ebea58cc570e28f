//! Runtime scaling harness: times the reconstruction core (unfolding plus
//! fusion, no file I/O) over a range of pixel counts and fits the log-log
//! slope, which should sit near 1 for this all-local architecture.

use crate::cube::{Cube, MultiResCube, ResClass};
use crate::error::{Error, Result};
use crate::fuse::{fuse_forward, select_hr_bands, FusionParams};
use crate::simulate::{default_band_classes, default_hsi_wavelengths, default_msi_wavelengths};
use crate::unfold::{run_unfolding, Strategy, UnfoldConfig, UnfoldParams};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct SizeTiming {
    pub side: usize,
    pub pixels: usize,
    pub median_secs: f64,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub entries: Vec<SizeTiming>,
    /// Least-squares slope of `ln(median time)` against `ln(pixels)`.
    pub slope: f64,
    /// True when some size's spread `(max - min)` exceeds half its median.
    pub noisy: bool,
    pub reps: usize,
    pub strategy: Strategy,
}

impl ScalingReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("side,pixels,median_secs,reps\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{:?},{}\n",
                e.side,
                e.pixels,
                e.median_secs,
                self.reps
            ));
        }
        s
    }
}

/// Random block-constant multi-resolution input of the given side length.
fn random_multires(side: usize, classes: &[ResClass], rng: &mut ChaCha8Rng) -> MultiResCube<f64> {
    let l = side * side;
    let mm = classes.len();
    let mut data = Array2::<f64>::zeros((mm, l));
    for (b, class) in classes.iter().enumerate() {
        let e = class.block_edge();
        let grid = side.div_ceil(e);
        let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.random::<f64>()).collect();
        for y in 0..side {
            for x in 0..side {
                data[[b, y * side + x]] = coarse[(y / e) * grid + x / e];
            }
        }
    }
    let wl = default_msi_wavelengths(mm);
    let cube = Cube::new(data, side, side, wl).expect("valid cube");
    MultiResCube::new(cube, classes.to_vec()).expect("block constancy by construction")
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time the reconstruction core over the given side lengths.
pub fn scaling_benchmark(
    sides: &[usize],
    reps: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<ScalingReport> {
    let mut unique = sides.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() < 3 {
        return Err(Error::InvalidSpec(format!(
            "need at least 3 distinct sizes, got {}",
            unique.len()
        )));
    }
    if reps < 1 {
        return Err(Error::InvalidSpec("reps must be >= 1".into()));
    }
    for &s in &unique {
        if s < 2 || s % 2 != 0 {
            return Err(Error::InvalidSpec(format!("side {s} must be even and >= 2")));
        }
    }
    let (bands_m, bands_h, n_hr) = (6usize, 32usize, 4usize);
    let classes = default_band_classes(bands_m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = match strategy {
        Strategy::Learnable => UnfoldConfig::learnable(4),
        Strategy::Hybrid => UnfoldConfig::hybrid(4),
        Strategy::Mathematical => {
            let mut c = UnfoldConfig::mathematical(4);
            c.stop_tol = None;
            c
        }
    };
    let params = UnfoldParams::<f64>::init(
        &cfg,
        bands_m,
        bands_h,
        default_hsi_wavelengths(bands_h),
        &mut rng,
    )?;
    let fusion = FusionParams::<f64>::init(bands_h, n_hr, 2, &mut rng);

    // warmup at the smallest size so first-touch costs stay out of the data
    {
        let input = random_multires(unique[0], &classes, &mut rng);
        let y_tilde = run_unfolding(&input, &cfg, &params)?;
        let hr = select_hr_bands(&input, n_hr)?;
        let _ = fuse_forward(&y_tilde, &hr, &fusion)?;
    }

    let mut entries = Vec::with_capacity(unique.len());
    let mut noisy = false;
    for &side in &unique {
        let input = random_multires(side, &classes, &mut rng);
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let y_tilde = run_unfolding(&input, &cfg, &params)?;
            let hr = select_hr_bands(&input, n_hr)?;
            let out = fuse_forward(&y_tilde, &hr, &fusion)?;
            let dt = t0.elapsed().as_secs_f64();
            std::hint::black_box(out.data()[[0, 0]]);
            times.push(dt);
        }
        let mut sorted = times.clone();
        let med = median(&mut sorted);
        let spread = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - times.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 0.5 * med {
            noisy = true;
        }
        entries.push(SizeTiming {
            side,
            pixels: side * side,
            median_secs: med,
            times,
        });
    }

    let slope = fit_loglog_slope(
        &entries
            .iter()
            .map(|e| (e.pixels as f64, e.median_secs))
            .collect::<Vec<_>>(),
    );
    Ok(ScalingReport {
        entries,
        slope,
        noisy,
        reps,
        strategy,
    })
}

/// Least-squares slope of `ln(y)` on `ln(x)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(x, _)| x.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, y)| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys.iter()).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [64.0, 256.0, 1024.0, 4096.0]
            .iter()
            .map(|&x| (x, 3.0e-6 * x))
            .collect();
        assert!((fit_loglog_slope(&pts) - 1.0).abs() < 1e-12);
        let pts2: Vec<(f64, f64)> = pts.iter().map(|&(x, _)| (x, 2.0e-9 * x * x)).collect();
        assert!((fit_loglog_slope(&pts2) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_runs_on_tiny_sizes() {
        let report = scaling_benchmark(&[8, 12, 16], 2, Strategy::Learnable, 5).unwrap();
        assert_eq!(report.entries.len(), 3);
        assert!(report.entries.iter().all(|e| e.median_secs > 0.0));
        assert!(report.csv().lines().count() == 4);
    }

    #[test]
    fn benchmark_rejects_too_few_sizes() {
        assert!(matches!(
            scaling_benchmark(&[8, 16], 2, Strategy::Learnable, 0),
            Err(Error::InvalidSpec(_))
        ));
    }
}
