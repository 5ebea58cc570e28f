//! Image-quality metrics: per-band PSNR, spectral angle mapper (mean and
//! per-pixel map), global RMSE, and windowed SSIM. All accumulation runs in
//! f64 regardless of the cube scalar type.

use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::Scalar;
use ndarray::Array2;

/// Quantitative comparison of a reconstruction against a reference.
#[derive(Debug, Clone)]
pub struct MetricReport {
    /// Mean over bands of `10 log10(1 / MSE_band)` at unit peak; infinite
    /// when every band matches exactly.
    pub psnr_db: f64,
    /// Bands with zero MSE that were excluded from the PSNR average.
    pub psnr_zero_mse_bands: usize,
    pub sam_mean_deg: f64,
    pub rmse: f64,
    pub ssim: f64,
    /// Per-pixel spectral angle in degrees, as a 1-band cube.
    pub sam_map: Cube<f64>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "psnr_db,sam_deg,rmse,ssim"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?}",
            self.psnr_db, self.sam_mean_deg, self.rmse, self.ssim
        )
    }

    /// Human-readable table. PSNR/SSIM are averaged per band; the header
    /// notes the convention.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric            value   (PSNR/SSIM averaged per band, peak 1.0)\n");
        s.push_str(&format!("PSNR (dB)         {:.4}\n", self.psnr_db));
        if self.psnr_zero_mse_bands > 0 {
            s.push_str(&format!(
                "                  ({} zero-MSE bands excluded)\n",
                self.psnr_zero_mse_bands
            ));
        }
        s.push_str(&format!("SAM (degrees)     {:.4}\n", self.sam_mean_deg));
        s.push_str(&format!("RMSE              {:.6}\n", self.rmse));
        s.push_str(&format!("SSIM              {:.4}\n", self.ssim));
        s
    }
}

fn check_shapes<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<()> {
    if x.data().dim() != reference.data().dim()
        || x.width() != reference.width()
        || x.height() != reference.height()
    {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} ({}x{}) vs {}x{} ({}x{})",
            x.bands(),
            x.pixels(),
            x.width(),
            x.height(),
            reference.bands(),
            reference.pixels(),
            reference.width(),
            reference.height()
        )));
    }
    Ok(())
}

/// Per-band PSNR at unit peak, averaged over bands. Bands with zero MSE are
/// excluded from the average; if every band is exact the +infinity sentinel
/// is returned. Also reports how many bands were excluded.
pub fn psnr_detailed<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<(f64, usize)> {
    check_shapes(x, reference)?;
    let l = x.pixels() as f64;
    let mut sum_db = 0.0;
    let mut counted = 0usize;
    let mut zero_bands = 0usize;
    for (xr, rr) in x.data().rows().into_iter().zip(reference.data().rows()) {
        let mse: f64 = xr
            .iter()
            .zip(rr.iter())
            .map(|(a, b)| {
                let d = a.to_f64().expect("finite") - b.to_f64().expect("finite");
                d * d
            })
            .sum::<f64>()
            / l;
        if mse == 0.0 {
            zero_bands += 1;
        } else {
            sum_db += 10.0 * (1.0 / mse).log10();
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok((f64::INFINITY, zero_bands));
    }
    Ok((sum_db / counted as f64, zero_bands))
}

pub fn psnr<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<f64> {
    psnr_detailed(x, reference).map(|(db, _)| db)
}

/// Spectral angle mapper: per-pixel angle between reconstructed and reference
/// spectra in degrees (clamped to [0, 180]), plus the mean over pixels.
pub fn sam<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<(f64, Cube<f64>)> {
    check_shapes(x, reference)?;
    let (m, l) = x.data().dim();
    let mut map = Array2::<f64>::zeros((1, l));
    let mut sum = 0.0;
    for px in 0..l {
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut nr = 0.0;
        for b in 0..m {
            let a = x.data()[[b, px]].to_f64().expect("finite");
            let r = reference.data()[[b, px]].to_f64().expect("finite");
            dot += a * r;
            nx += a * a;
            nr += r * r;
        }
        if nx == 0.0 || nr == 0.0 {
            return Err(Error::ZeroSpectrum(px));
        }
        let c = (dot / (nx.sqrt() * nr.sqrt())).clamp(-1.0, 1.0);
        let deg = c.acos().to_degrees().clamp(0.0, 180.0);
        map[[0, px]] = deg;
        sum += deg;
    }
    let map = Cube::new(map, x.width(), x.height(), vec![0.0])?;
    Ok((sum / l as f64, map))
}

/// Root mean squared error over all bands and pixels.
pub fn rmse<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<f64> {
    check_shapes(x, reference)?;
    let n = (x.bands() * x.pixels()) as f64;
    let ss: f64 = x
        .data()
        .iter()
        .zip(reference.data().iter())
        .map(|(a, b)| {
            let d = a.to_f64().expect("finite") - b.to_f64().expect("finite");
            d * d
        })
        .sum();
    Ok((ss / n).sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let t = (i as f64 - mid) / SSIM_SIGMA;
        *v = (-0.5 * t * t).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering of one band.
fn filter_valid(band: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (hv, wv) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * wv];
    for y in 0..h {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * band[y * w + x + i];
            }
            tmp[y * wv + x] = acc;
        }
    }
    let mut out = vec![0.0; hv * wv];
    for y in 0..hv {
        for x in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wv + x];
            }
            out[y * wv + x] = acc;
        }
    }
    out
}

/// Mean structural similarity per band (Gaussian window 11, sigma 1.5,
/// `C1 = 0.01^2`, `C2 = 0.03^2` on unit dynamic range), averaged over bands.
pub fn ssim<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<f64> {
    check_shapes(x, reference)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmallForWindow(format!(
            "{w}x{h} vs window {SSIM_WINDOW}"
        )));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for (xr, rr) in x.data().rows().into_iter().zip(reference.data().rows()) {
        let a: Vec<f64> = xr.iter().map(|v| v.to_f64().expect("finite")).collect();
        let b: Vec<f64> = rr.iter().map(|v| v.to_f64().expect("finite")).collect();
        let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let e_a2 = filter_valid(&a2, h, w, &k);
        let e_b2 = filter_valid(&b2, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_a2[i] - ma * ma;
            let vb = e_b2[i] - mb * mb;
            let cab = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / x.bands() as f64)
}

/// Compute the full metric report.
pub fn evaluate<F: Scalar>(x: &Cube<F>, reference: &Cube<F>) -> Result<MetricReport> {
    let (psnr_db, zero_bands) = psnr_detailed(x, reference)?;
    let (sam_mean_deg, sam_map) = sam(x, reference)?;
    let rmse_v = rmse(x, reference)?;
    let ssim_v = ssim(x, reference)?;
    Ok(MetricReport {
        psnr_db,
        psnr_zero_mse_bands: zero_bands,
        sam_mean_deg,
        rmse: rmse_v,
        ssim: ssim_v,
        sam_map,
    })
}
