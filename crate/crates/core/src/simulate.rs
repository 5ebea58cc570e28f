//! Forward sensor model and synthetic scene generation: linear mixtures of
//! smooth endmember spectra over smooth simplex abundance fields, spectral
//! response integration, multi-resolution degradation, and the spectral
//! upsampling used to initialize the unfolding solver.

use crate::cube::{Cube, MultiResCube, ResClass, SrtMatrix};
use crate::error::{Error, Result};
use crate::nn::reflect_index;
use crate::{sc, Scalar};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Synthetic scene description. Spatial dimensions must tile the 6x6
/// low-resolution blocks exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands_h: usize,
    pub bands_m: usize,
    pub n_sources: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 6 != 0 || self.height % 6 != 0 {
            return Err(Error::InvalidSpec(format!(
                "width and height must be positive multiples of 6, got {}x{}",
                self.width, self.height
            )));
        }
        if self.bands_m >= self.bands_h {
            return Err(Error::InvalidSpec(format!(
                "bands_m {} must be < bands_h {}",
                self.bands_m, self.bands_h
            )));
        }
        if self.n_sources < 2 {
            return Err(Error::InvalidSpec("n_sources must be >= 2".into()));
        }
        let l = self.width * self.height;
        if self.n_sources > self.bands_m.min(l) {
            return Err(Error::InvalidSpec(format!(
                "n_sources {} exceeds min(bands_m, pixels) = {}",
                self.n_sources,
                self.bands_m.min(l)
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Line-oriented `key = value` form consumed by the CLI.
    pub fn to_kv(&self) -> String {
        format!(
            "width = {}\nheight = {}\nbands_h = {}\nbands_m = {}\nn_sources = {}\nseed = {}\nnoise_sigma = {:?}\n",
            self.width, self.height, self.bands_h, self.bands_m, self.n_sources, self.seed,
            self.noise_sigma
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = SceneSpec {
            width: 24,
            height: 24,
            bands_h: 32,
            bands_m: 6,
            n_sources: 5,
            seed: 0,
            noise_sigma: 0.0,
        };
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::InvalidSpec(format!("line {}: '{line}'", idx + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            let bad = |what: &str| Error::InvalidSpec(format!("bad {what}: '{v}'"));
            match k {
                "width" => spec.width = v.parse().map_err(|_| bad("width"))?,
                "height" => spec.height = v.parse().map_err(|_| bad("height"))?,
                "bands_h" => spec.bands_h = v.parse().map_err(|_| bad("bands_h"))?,
                "bands_m" => spec.bands_m = v.parse().map_err(|_| bad("bands_m"))?,
                "n_sources" => spec.n_sources = v.parse().map_err(|_| bad("n_sources"))?,
                "seed" => spec.seed = v.parse().map_err(|_| bad("seed"))?,
                "noise_sigma" => spec.noise_sigma = v.parse().map_err(|_| bad("noise_sigma"))?,
                other => {
                    return Err(Error::InvalidSpec(format!("unknown scene key '{other}'")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Linear mixing model behind a synthetic scene: endmember spectra in the
/// columns of `endmembers`, per-pixel simplex weights in `abundances`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingModel {
    pub endmembers: Array2<f64>,
    pub abundances: Array2<f64>,
}

impl MixingModel {
    pub fn new(endmembers: Array2<f64>, abundances: Array2<f64>) -> Result<Self> {
        if endmembers.ncols() != abundances.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} endmembers vs {} abundance rows",
                endmembers.ncols(),
                abundances.nrows()
            )));
        }
        for col in abundances.columns() {
            let mut sum = 0.0;
            for v in col.iter() {
                if *v < 0.0 {
                    return Err(Error::InvalidSpec("negative abundance".into()));
                }
                sum += *v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec(format!("abundance column sums to {sum}")));
            }
        }
        Ok(Self {
            endmembers,
            abundances,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.endmembers.ncols()
    }
}

/// Evenly spaced hyperspectral band centers over 400-2400 nm.
pub fn default_hsi_wavelengths(bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![400.0];
    }
    (0..bands)
        .map(|i| 400.0 + 2000.0 * i as f64 / (bands - 1) as f64)
        .collect()
}

/// Multispectral band centers. The 12-band layout follows the Sentinel-2
/// usable bands; the 6-band desk-scale layout keeps the four 10-m visible/NIR
/// centers plus two SWIR bands. Other counts spread evenly.
pub fn default_msi_wavelengths(bands: usize) -> Vec<f64> {
    match bands {
        6 => vec![490.0, 560.0, 665.0, 842.0, 1610.0, 2190.0],
        12 => vec![
            443.0, 490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 945.0, 1610.0, 2190.0,
        ],
        _ => {
            if bands == 1 {
                vec![842.0]
            } else {
                (0..bands)
                    .map(|i| 450.0 + 1750.0 * i as f64 / (bands - 1) as f64)
                    .collect()
            }
        }
    }
}

/// Default per-band resolution classes for a given multispectral band count.
pub fn default_band_classes(bands: usize) -> Vec<ResClass> {
    use ResClass::*;
    match bands {
        6 => vec![Hr, Hr, Hr, Hr, Med, Low],
        12 => vec![Low, Hr, Hr, Hr, Med, Med, Med, Hr, Med, Low, Med, Med],
        _ => {
            let hr = 1.max(4.min(bands.saturating_sub(2)));
            let low = if bands > hr { 1.max((bands - hr) / 4) } else { 0 };
            let med = bands - hr - low;
            let mut classes = vec![Hr; hr];
            classes.extend(std::iter::repeat(Med).take(med));
            classes.extend(std::iter::repeat(Low).take(low));
            classes
        }
    }
}

/// Gaussian spectral responses centered at the multispectral band centers,
/// sampled at the hyperspectral wavelengths and normalized to unit row sum.
pub fn srt_gaussian(wavelengths_h: &[f64], centers_m: &[f64]) -> Result<SrtMatrix<f64>> {
    let (m, mm) = (wavelengths_h.len(), centers_m.len());
    let mut d = Array2::<f64>::zeros((mm, m));
    for (r, &c) in centers_m.iter().enumerate() {
        let width = (0.055 * c).max(40.0);
        let mut sum = 0.0;
        for (j, &wl) in wavelengths_h.iter().enumerate() {
            let t = (wl - c) / width;
            let v = (-0.5 * t * t).exp();
            let v = if v < 1e-8 { 0.0 } else { v };
            d[[r, j]] = v;
            sum += v;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "MSI band at {c} nm has no support on the hyperspectral grid"
            )));
        }
        for j in 0..m {
            d[[r, j]] /= sum;
        }
    }
    SrtMatrix::new(d)
}

fn spectral_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let c = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Characteristic feature wavelengths (nm) shared by every generated
/// endmember, standing in for the fixed absorption/reflectance bands of real
/// materials. Amplitudes and widths vary per endmember; the locations do
/// not, which gives the spectral distribution learnable structure.
const FEATURE_CENTERS_NM: [f64; 9] = [
    460.0, 560.0, 680.0, 860.0, 1130.0, 1400.0, 1650.0, 1930.0, 2210.0,
];

fn sample_endmember(wavelengths: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = 0.15 + 0.25 * rng.random::<f64>();
    let slope = -0.1 + 0.2 * rng.random::<f64>();
    let mut bumps: Vec<(f64, f64, f64)> = Vec::with_capacity(FEATURE_CENTERS_NM.len() + 1);
    for &mu in FEATURE_CENTERS_NM.iter() {
        let keep = rng.random::<f64>() < 0.7;
        let sigma = 45.0 + 75.0 * rng.random::<f64>();
        let amp = -0.4 + 0.9 * rng.random::<f64>();
        if keep {
            bumps.push((mu, sigma, amp));
        }
    }
    // one free-floating bump keeps endmembers from collapsing onto a small
    // dictionary
    bumps.push((
        400.0 + 2000.0 * rng.random::<f64>(),
        80.0 + 150.0 * rng.random::<f64>(),
        -0.2 + 0.5 * rng.random::<f64>(),
    ));
    wavelengths
        .iter()
        .map(|&wl| {
            let mut v = base + slope * (wl - 1400.0) / 1000.0;
            for &(mu, sigma, amp) in &bumps {
                let t = (wl - mu) / sigma;
                v += amp * (-0.5 * t * t).exp();
            }
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Deterministically spread anchor pixels for the abundance blobs.
fn anchor_pixels(w: usize, h: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let cells = (n as f64).sqrt().ceil() as usize;
    let mut slots: Vec<(usize, usize)> = (0..cells * cells)
        .map(|i| {
            let (cy, cx) = (i / cells, i % cells);
            let x = (2 * cx + 1) * w / (2 * cells);
            let y = (2 * cy + 1) * h / (2 * cells);
            (y.min(h - 1), x.min(w - 1))
        })
        .collect();
    slots.shuffle(rng);
    slots.truncate(n);
    slots
}

/// Generate a synthetic hyperspectral scene: `Y_H = E * A` with smooth
/// endmember spectra (sums of Gaussian bumps over wavelength) and spatially
/// smooth simplex abundance fields carrying one exactly pure pixel per
/// source, plus optional additive Gaussian noise. Deterministic per seed.
pub fn synth_scene(spec: &SceneSpec) -> Result<(Cube<f64>, MixingModel)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h, n, m) = (spec.width, spec.height, spec.n_sources, spec.bands_h);
    let l = w * h;
    let wavelengths = default_hsi_wavelengths(m);

    // endmembers, resampled until pairwise spectrally distinct
    let mut endmembers = Array2::<f64>::zeros((m, n));
    for col in 0..n {
        let mut attempts = 0;
        loop {
            let e = sample_endmember(&wavelengths, &mut rng);
            let distinct = (0..col).all(|prev| {
                let p: Vec<f64> = endmembers.column(prev).to_vec();
                spectral_angle_deg(&e, &p) > 4.0
            });
            let lively = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - e.iter().cloned().fold(f64::INFINITY, f64::min)
                > 0.05;
            if (distinct && lively) || attempts > 200 {
                for (row, v) in e.iter().enumerate() {
                    endmembers[[row, col]] = *v;
                }
                break;
            }
            attempts += 1;
        }
    }

    // smooth positive fields: one anchored blob per source plus weaker texture
    let anchors = anchor_pixels(w, h, n, &mut rng);
    let min_dim = w.min(h) as f64;
    let mut fields = Array2::<f64>::zeros((n, l));
    for src in 0..n {
        let (ay, ax) = anchors[src];
        let s_main = (0.22 + 0.12 * rng.random::<f64>()) * min_dim;
        let extras: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=2usize))
            .map(|_| {
                (
                    rng.random::<f64>() * h as f64,
                    rng.random::<f64>() * w as f64,
                    (0.10 + 0.20 * rng.random::<f64>()) * min_dim,
                    0.05 + 0.30 * rng.random::<f64>(),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let d2 = ((y as f64 - ay as f64).powi(2) + (x as f64 - ax as f64).powi(2))
                    / (2.0 * s_main * s_main);
                let mut v = 0.02 + (-d2).exp();
                for &(ey, ex, es, ea) in &extras {
                    let d2 = ((y as f64 - ey).powi(2) + (x as f64 - ex).powi(2)) / (2.0 * es * es);
                    v += ea * (-d2).exp();
                }
                fields[[src, y * w + x]] = v;
            }
        }
    }
    // simplex normalization, then pin the anchors to exactly pure columns
    let mut abundances = Array2::<f64>::zeros((n, l));
    for px in 0..l {
        let mut sum = 0.0;
        for src in 0..n {
            sum += fields[[src, px]];
        }
        for src in 0..n {
            abundances[[src, px]] = fields[[src, px]] / sum;
        }
    }
    for (src, &(ay, ax)) in anchors.iter().enumerate() {
        let px = ay * w + ax;
        for s in 0..n {
            abundances[[s, px]] = if s == src { 1.0 } else { 0.0 };
        }
    }

    let mut data = endmembers.dot(&abundances);
    if spec.noise_sigma > 0.0 {
        for v in data.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_sigma * g;
        }
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let cube = Cube::new(data, w, h, wavelengths)?;
    let model = MixingModel::new(endmembers, abundances)?;
    Ok((cube, model))
}

/// Apply the spectral response transform: `Y_S = D * Y_H`.
pub fn apply_srt<F: Scalar>(d: &SrtMatrix<F>, y_h: &Cube<F>) -> Result<Cube<F>> {
    apply_srt_matrix(d.matrix(), y_h)
}

/// Raw-matrix variant of [`apply_srt`]; output band centers are the
/// response-weighted means of the input wavelengths.
pub fn apply_srt_matrix<F: Scalar>(d: &Array2<F>, y_h: &Cube<F>) -> Result<Cube<F>> {
    if d.ncols() != y_h.bands() {
        return Err(Error::DimensionMismatch(format!(
            "SRT has {} columns, cube has {} bands",
            d.ncols(),
            y_h.bands()
        )));
    }
    let out = d.dot(y_h.data());
    let centers: Vec<f64> = d
        .rows()
        .into_iter()
        .map(|row| {
            let mut wsum = 0.0;
            let mut num = 0.0;
            for (j, v) in row.iter().enumerate() {
                let v = v.to_f64().expect("finite");
                wsum += v;
                num += v * y_h.wavelengths()[j];
            }
            if wsum.abs() > 0.0 {
                num / wsum
            } else {
                0.0
            }
        })
        .collect();
    // fall back to synthetic strictly increasing centers when the responses
    // do not define an ordered set (e.g. a learned D with sign changes)
    let ordered = centers.windows(2).all(|p| p[1] > p[0]);
    let centers = if ordered {
        centers
    } else {
        (0..d.nrows()).map(|i| (i + 1) as f64).collect()
    };
    Cube::new(out, y_h.width(), y_h.height(), centers)
}

fn gaussian_blur_band<F: Scalar>(band: &[F], h: usize, w: usize, sigma: f64) -> Vec<F> {
    if sigma <= 0.0 {
        return band.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let t = i as f64 / sigma;
        let v = (-0.5 * t * t).exp();
        kernel.push(v);
        sum += v;
    }
    let kernel: Vec<F> = kernel.into_iter().map(|v| sc::<F>(v / sum)).collect();
    // horizontal
    let mut tmp = vec![F::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = F::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect_index(x as isize + ki as isize - radius, w);
                acc += *kv * band[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // vertical
    let mut out = vec![F::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = F::zero();
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect_index(y as isize + ki as isize - radius, h);
                acc += *kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn block_average_replicate<F: Scalar>(band: &mut [F], h: usize, w: usize, edge: usize) {
    for by in (0..h).step_by(edge) {
        for bx in (0..w).step_by(edge) {
            let first = band[by * w + bx];
            let mut acc = F::zero();
            let mut count = 0usize;
            let mut constant = true;
            for y in by..(by + edge).min(h) {
                for x in bx..(bx + edge).min(w) {
                    let v = band[y * w + x];
                    constant &= v == first;
                    acc += v;
                    count += 1;
                }
            }
            // already-constant blocks pass through bit-exactly, which makes
            // degradation idempotent
            let mean = if constant {
                first
            } else {
                acc / sc::<F>(count as f64)
            };
            for y in by..(by + edge).min(h) {
                for x in bx..(bx + edge).min(w) {
                    band[y * w + x] = mean;
                }
            }
        }
    }
}

/// Degrade a multispectral cube to multi-resolution form: HR bands pass
/// through; MED/LOW bands are Gaussian-blurred, block-averaged (2x2 / 6x6)
/// and block-replicated back onto the fine grid.
pub fn degrade_multires<F: Scalar>(
    msi: &Cube<F>,
    classes: &[ResClass],
    blur_sigma: f64,
) -> Result<MultiResCube<F>> {
    if msi.width() % 6 != 0 || msi.height() % 6 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "spatial dims {}x{} not divisible by 6",
            msi.width(),
            msi.height()
        )));
    }
    if classes.len() != msi.bands() {
        return Err(Error::DimensionMismatch(format!(
            "{} classes for {} bands",
            classes.len(),
            msi.bands()
        )));
    }
    let (h, w) = (msi.height(), msi.width());
    let mut data = msi.data().clone();
    for (b, class) in classes.iter().enumerate() {
        let edge = class.block_edge();
        if edge == 1 {
            continue;
        }
        let row: Vec<F> = data.row(b).to_vec();
        let mut blurred = gaussian_blur_band(&row, h, w, blur_sigma);
        block_average_replicate(&mut blurred, h, w, edge);
        for (px, v) in blurred.into_iter().enumerate() {
            data[[b, px]] = v;
        }
    }
    let cube = Cube::new(data, w, h, msi.wavelengths().to_vec())?;
    MultiResCube::new(cube, classes.to_vec())
}

/// Per-pixel piecewise-linear interpolation of the multispectral values onto
/// the target wavelength grid, with constant extrapolation outside the
/// multispectral range. Output is clipped to [0, 1]. This is the unfolding
/// initialization and the spectral-interpolation baseline.
pub fn spectral_upsample_init<F: Scalar>(
    y_s: &MultiResCube<F>,
    wavelengths_h: &[f64],
) -> Result<Cube<F>> {
    for pair in wavelengths_h.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(Error::WavelengthOrder(format!(
                "target wavelengths: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let src = y_s.cube();
    let sw = src.wavelengths();
    let mm = src.bands();
    let l = src.pixels();
    let m = wavelengths_h.len();
    // precompute interpolation stencil per target band
    #[derive(Clone, Copy)]
    struct Stencil {
        lo: usize,
        hi: usize,
        t: f64,
    }
    let stencils: Vec<Stencil> = wavelengths_h
        .iter()
        .map(|&wl| {
            if wl <= sw[0] {
                Stencil { lo: 0, hi: 0, t: 0.0 }
            } else if wl >= sw[mm - 1] {
                Stencil {
                    lo: mm - 1,
                    hi: mm - 1,
                    t: 0.0,
                }
            } else {
                let hi = sw.partition_point(|&s| s < wl).max(1);
                let lo = hi - 1;
                let t = (wl - sw[lo]) / (sw[hi] - sw[lo]);
                Stencil { lo, hi, t }
            }
        })
        .collect();
    let d = src.data();
    let mut out = Array2::<F>::zeros((m, l));
    for (bt, st) in stencils.iter().enumerate() {
        let t = sc::<F>(st.t);
        let omt = F::one() - t;
        for px in 0..l {
            let v = omt * d[[st.lo, px]] + t * d[[st.hi, px]];
            out[[bt, px]] = v.max(F::zero()).min(F::one());
        }
    }
    Cube::new(out, src.width(), src.height(), wavelengths_h.to_vec())
}

/// One simulated training/evaluation pair plus its generating model.
#[derive(Debug, Clone)]
pub struct SimulatedPair {
    pub y_s: MultiResCube<f64>,
    pub y_h: Cube<f64>,
    pub model: MixingModel,
    pub srt: SrtMatrix<f64>,
}

/// Full forward simulation: scene, spectral response integration, and
/// multi-resolution degradation with the default band layout.
pub fn simulate_pair(spec: &SceneSpec, blur_sigma: f64) -> Result<SimulatedPair> {
    let (y_h, model) = synth_scene(spec)?;
    let centers = default_msi_wavelengths(spec.bands_m);
    let srt = srt_gaussian(y_h.wavelengths(), &centers)?;
    let msi = apply_srt(&srt, &y_h)?;
    let classes = default_band_classes(spec.bands_m);
    let y_s = degrade_multires(&msi, &classes, blur_sigma)?;
    Ok(SimulatedPair {
        y_s,
        y_h,
        model,
        srt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn desk_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            width: 12,
            height: 12,
            bands_h: 16,
            bands_m: 4,
            n_sources: 3,
            seed,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let spec = desk_spec(42);
        let (a, ma) = synth_scene(&spec).unwrap();
        let (b, mb) = synth_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn two_source_pixels_lie_on_the_segment() {
        let spec = SceneSpec {
            n_sources: 2,
            ..desk_spec(7)
        };
        let (cube, model) = synth_scene(&spec).unwrap();
        let e0 = model.endmembers.column(0);
        let e1 = model.endmembers.column(1);
        for px in 0..cube.pixels() {
            let a = model.abundances[[0, px]];
            for b in 0..cube.bands() {
                let expect = a * e0[b] + (1.0 - a) * e1[b];
                assert!((cube.data()[[b, px]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_source_has_a_near_pure_pixel() {
        let (_, model) = synth_scene(&desk_spec(3)).unwrap();
        for src in 0..3 {
            let best = model
                .abundances
                .row(src)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= 0.99, "source {src} max abundance {best}");
        }
    }

    #[test]
    fn abundances_live_on_the_simplex() {
        let (_, model) = synth_scene(&desk_spec(11)).unwrap();
        for col in model.abundances.columns() {
            let sum: f64 = col.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn apply_srt_examples() {
        let wl: Vec<f64> = vec![400.0, 500.0, 600.0, 700.0];
        let y = Cube::new(Array2::from_elem((4, 4), 0.5), 2, 2, wl).unwrap();
        // single all-ones row -> every output pixel 2.0
        let d = SrtMatrix::new(Array2::<f64>::from_elem((1, 4), 1.0)).unwrap();
        let out = apply_srt(&d, &y).unwrap();
        assert!(out.data().iter().all(|v| (*v - 2.0).abs() < 1e-14));
        // identity via the raw-matrix form
        let eye = Array2::<f64>::eye(4);
        let out = apply_srt_matrix(&eye, &y).unwrap();
        assert_eq!(out.data(), y.data());
        // indicator row selects band k
        let mut sel = Array2::<f64>::zeros((1, 4));
        sel[[0, 2]] = 1.0;
        let y2 = Cube::new(
            Array2::from_shape_fn((4, 4), |(b, p)| (b * 4 + p) as f64 / 16.0),
            2,
            2,
            vec![400.0, 500.0, 600.0, 700.0],
        )
        .unwrap();
        let out = apply_srt_matrix(&sel, &y2).unwrap();
        for px in 0..4 {
            assert_eq!(out.data()[[0, px]], y2.data()[[2, px]]);
        }
    }

    #[test]
    fn apply_srt_is_linear() {
        let spec = desk_spec(5);
        let (ya, _) = synth_scene(&spec).unwrap();
        let (yb, _) = synth_scene(&SceneSpec { seed: 6, ..spec }).unwrap();
        let srt = srt_gaussian(ya.wavelengths(), &default_msi_wavelengths(4)).unwrap();
        let (a, b) = (0.3, -1.7);
        let combo = ya.with_data(ya.data() * a + &(yb.data() * b)).unwrap();
        let lhs = apply_srt(&srt, &combo).unwrap();
        let ra = apply_srt(&srt, &ya).unwrap();
        let rb = apply_srt(&srt, &yb).unwrap();
        let rhs = ra.data() * a + &(rb.data() * b);
        for (x, y) in lhs.data().iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn degrade_examples() {
        // constant band unchanged under any class
        let wl = vec![500.0, 600.0];
        let msi = Cube::new(Array2::<f64>::from_elem((2, 36), 0.4), 6, 6, wl.clone()).unwrap();
        let out = degrade_multires(&msi, &[ResClass::Hr, ResClass::Low], 1.0).unwrap();
        assert!(out.cube().data().iter().all(|v| (*v - 0.4).abs() < 1e-12));

        // MED band on a 2x2 checkerboard of {0,1} with sigma -> 0 gives 0.5
        let mut data = Array2::<f64>::zeros((1, 36));
        for y in 0..6 {
            for x in 0..6 {
                data[[0, y * 6 + x]] = ((x / 1 + y / 1) % 2) as f64;
            }
        }
        let msi = Cube::new(data, 6, 6, vec![500.0]).unwrap();
        // MED requires an HR band alongside; build 2-band cube
        let mut two = Array2::<f64>::zeros((2, 36));
        two.row_mut(1).assign(&msi.data().row(0));
        let msi2 = Cube::new(two, 6, 6, vec![450.0, 500.0]).unwrap();
        let out = degrade_multires(&msi2, &[ResClass::Hr, ResClass::Med], 0.0).unwrap();
        for px in 0..36 {
            assert!((out.cube().data()[[1, px]] - 0.5).abs() < 1e-14);
        }

        // all-HR leaves the cube untouched
        let spec = desk_spec(9);
        let (y, _) = synth_scene(&spec).unwrap();
        let srt = srt_gaussian(y.wavelengths(), &default_msi_wavelengths(4)).unwrap();
        let msi = apply_srt(&srt, &y).unwrap();
        let out = degrade_multires(&msi, &[ResClass::Hr; 4], 1.0).unwrap();
        assert_eq!(out.cube().data(), msi.data());
    }

    #[test]
    fn degrade_is_idempotent_without_blur() {
        let spec = desk_spec(13);
        let pair = simulate_pair(&spec, 0.7).unwrap();
        let classes = pair.y_s.classes().to_vec();
        let again = degrade_multires(pair.y_s.cube(), &classes, 0.0).unwrap();
        assert_eq!(again.cube().data(), pair.y_s.cube().data());
    }

    #[test]
    fn upsample_examples() {
        // 2 input bands at 400/800 with values 0/1 -> 0.5 at 600
        let data: Array2<f64> = array![[0.0], [1.0]];
        let cube = Cube::new(data, 1, 1, vec![400.0, 800.0]).unwrap();
        let mrc = MultiResCube::new(cube, vec![ResClass::Hr, ResClass::Hr]).unwrap();
        let up = spectral_upsample_init(&mrc, &[300.0, 600.0, 900.0]).unwrap();
        assert_eq!(up.data()[[0, 0]], 0.0); // constant extrapolation below
        assert!((up.data()[[1, 0]] - 0.5).abs() < 1e-14);
        assert_eq!(up.data()[[2, 0]], 1.0); // constant extrapolation above

        // spectrally constant pixel stays constant
        let data = Array2::<f64>::from_elem((3, 1), 0.33);
        let cube = Cube::new(data, 1, 1, vec![400.0, 600.0, 800.0]).unwrap();
        let mrc = MultiResCube::new(cube, vec![ResClass::Hr; 3]).unwrap();
        let up = spectral_upsample_init(&mrc, &default_hsi_wavelengths(9)).unwrap();
        assert!(up.data().iter().all(|v| (*v - 0.33).abs() < 1e-14));
    }

    #[test]
    fn scene_spec_kv_round_trip() {
        let spec = SceneSpec {
            width: 36,
            height: 24,
            bands_h: 32,
            bands_m: 6,
            n_sources: 5,
            seed: 99,
            noise_sigma: 0.005,
        };
        let text = spec.to_kv();
        let back = SceneSpec::from_kv(&text).unwrap();
        assert_eq!(spec, back);
        assert!(SceneSpec::from_kv("bogus_key = 3").is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(matches!(
            synth_scene(&SceneSpec { width: 10, ..desk_spec(0) }),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            synth_scene(&SceneSpec { n_sources: 1, ..desk_spec(0) }),
            Err(Error::InvalidSpec(_))
        ));
        assert!(matches!(
            synth_scene(&SceneSpec { bands_m: 16, ..desk_spec(0) }),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn srt_rows_are_normalized_responses() {
        let wl = default_hsi_wavelengths(32);
        let srt = srt_gaussian(&wl, &default_msi_wavelengths(6)).unwrap();
        for row in srt.matrix().rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}
