//! Core data model: hyperspectral cubes, multi-resolution cubes, and the
//! spectral response transform matrix.
//!
//! A cube stores reflectance band-major: `data` is `M x L` with `M` bands and
//! `L = width * height` pixels. Pixels are flattened row-major over
//! (row, column); every pooling/replication operation in the crate assumes
//! this ordering.

use crate::error::{Error, Result};
use crate::{sc, Scalar};
use ndarray::{Array1, Array2};

/// Hyperspectral (or multispectral) image cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube<F: Scalar = f64> {
    data: Array2<F>,
    width: usize,
    height: usize,
    wavelengths: Vec<f64>,
}

impl<F: Scalar> Cube<F> {
    /// Build a cube and validate its invariants.
    pub fn new(data: Array2<F>, width: usize, height: usize, wavelengths: Vec<f64>) -> Result<Self> {
        let cube = Self::new_unchecked(data, width, height, wavelengths);
        cube.validate()?;
        Ok(cube)
    }

    /// Build without validation; callers guarantee the invariants hold.
    pub(crate) fn new_unchecked(
        data: Array2<F>,
        width: usize,
        height: usize,
        wavelengths: Vec<f64>,
    ) -> Self {
        Self {
            data,
            width,
            height,
            wavelengths,
        }
    }

    /// Check all cube invariants: `L = width * height`, finite values, a
    /// strictly increasing wavelength list of the right length.
    pub fn validate(&self) -> Result<()> {
        let (m, l) = self.data.dim();
        if l != self.width * self.height {
            return Err(Error::DimensionMismatch(format!(
                "pixel count {} != width {} * height {}",
                l, self.width, self.height
            )));
        }
        if self.wavelengths.len() != m {
            return Err(Error::WavelengthOrder(format!(
                "{} wavelengths for {} bands",
                self.wavelengths.len(),
                m
            )));
        }
        for w in self.wavelengths.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::WavelengthOrder(format!("{} then {}", w[0], w[1])));
            }
        }
        if self.wavelengths.iter().any(|w| !w.is_finite()) {
            return Err(Error::WavelengthOrder("non-finite wavelength".into()));
        }
        if let Some((idx, _)) = self.data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (m, l) = (idx / self.data.ncols(), idx % self.data.ncols());
            return Err(Error::NonFinite(format!("band {m}, pixel {l}")));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Band-major data matrix, `bands x pixels`.
    pub fn data(&self) -> &Array2<F> {
        &self.data
    }

    pub fn into_data(self) -> Array2<F> {
        self.data
    }

    /// New cube with the same geometry and wavelengths but different values.
    pub fn with_data(&self, data: Array2<F>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::ShapeMismatch(format!(
                "with_data: {:?} vs {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Ok(Self::new_unchecked(
            data,
            self.width,
            self.height,
            self.wavelengths.clone(),
        ))
    }

    /// Pixel spectrum as an owned vector.
    pub fn pixel(&self, l: usize) -> Array1<F> {
        self.data.column(l).to_owned()
    }

    pub fn value(&self, band: usize, row: usize, col: usize) -> F {
        self.data[[band, row * self.width + col]]
    }

    /// Clamp every entry into `[0, 1]`.
    pub fn clip01(&mut self) {
        let one = F::one();
        let zero = F::zero();
        self.data.mapv_inplace(|v| v.max(zero).min(one));
    }

    /// Convert the scalar type (lossy when narrowing).
    pub fn cast<G: Scalar>(&self) -> Cube<G> {
        let data = self.data.mapv(|v| {
            G::from_f64(v.to_f64().expect("finite")).expect("representable")
        });
        Cube::new_unchecked(data, self.width, self.height, self.wavelengths.clone())
    }
}

/// Validate a cube against its invariants (function form of [`Cube::validate`]).
pub fn validate_cube<F: Scalar>(cube: &Cube<F>) -> Result<()> {
    cube.validate()
}

/// Per-band resolution class of a multi-resolution multispectral cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResClass {
    /// Native resolution; one pixel per grid cell.
    Hr,
    /// Medium resolution; each value replicated over an aligned 2x2 block.
    Med,
    /// Low resolution; each value replicated over an aligned 6x6 block.
    Low,
}

impl ResClass {
    /// Pixel replication factor on the fine grid (1, 4, 36).
    pub fn replication(self) -> usize {
        let e = self.block_edge();
        e * e
    }

    /// Edge length of the constant block (1, 2, 6).
    pub fn block_edge(self) -> usize {
        match self {
            ResClass::Hr => 1,
            ResClass::Med => 2,
            ResClass::Low => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResClass::Hr => "HR",
            ResClass::Med => "MED",
            ResClass::Low => "LOW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HR" => Ok(ResClass::Hr),
            "MED" => Ok(ResClass::Med),
            "LOW" => Ok(ResClass::Low),
            other => Err(Error::HeaderParse(format!("unknown band class '{other}'"))),
        }
    }
}

/// A multispectral cube on the fine pixel grid with per-band resolution
/// classes. Coarse bands are block-replicated, so block constancy must hold
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResCube<F: Scalar = f64> {
    cube: Cube<F>,
    classes: Vec<ResClass>,
}

impl<F: Scalar> MultiResCube<F> {
    pub fn new(cube: Cube<F>, classes: Vec<ResClass>) -> Result<Self> {
        if classes.len() != cube.bands() {
            return Err(Error::DimensionMismatch(format!(
                "{} classes for {} bands",
                classes.len(),
                cube.bands()
            )));
        }
        if !classes.iter().any(|c| *c == ResClass::Hr) {
            return Err(Error::MissingHrBands("no band tagged HR".into()));
        }
        let mrc = Self { cube, classes };
        mrc.check_block_constancy()?;
        Ok(mrc)
    }

    /// Verify that every MED band is constant over aligned 2x2 blocks and
    /// every LOW band over aligned 6x6 blocks (edge blocks may be clipped).
    pub fn check_block_constancy(&self) -> Result<()> {
        let (w, h) = (self.cube.width(), self.cube.height());
        for (b, class) in self.classes.iter().enumerate() {
            let e = class.block_edge();
            if e == 1 {
                continue;
            }
            for by in (0..h).step_by(e) {
                for bx in (0..w).step_by(e) {
                    let v0 = self.cube.value(b, by, bx);
                    for y in by..(by + e).min(h) {
                        for x in bx..(bx + e).min(w) {
                            if self.cube.value(b, y, x) != v0 {
                                return Err(Error::DimensionMismatch(format!(
                                    "band {b} ({}) not constant on block ({by},{bx})",
                                    class.as_str()
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cube(&self) -> &Cube<F> {
        &self.cube
    }

    pub fn classes(&self) -> &[ResClass] {
        &self.classes
    }

    pub fn bands(&self) -> usize {
        self.cube.bands()
    }

    pub fn hr_band_indices(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == ResClass::Hr)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn into_parts(self) -> (Cube<F>, Vec<ResClass>) {
        (self.cube, self.classes)
    }
}

/// Spectral response transform: each row integrates the hyperspectral bands
/// into one multispectral band. Physical responses are nonnegative with at
/// least one active entry per row; the learned surrogate used by the
/// unfolding network is unconstrained and lives outside this type.
#[derive(Debug, Clone, PartialEq)]
pub struct SrtMatrix<F: Scalar = f64> {
    d: Array2<F>,
}

impl<F: Scalar> SrtMatrix<F> {
    pub fn new(d: Array2<F>) -> Result<Self> {
        let (mm, m) = d.dim();
        if mm >= m {
            return Err(Error::DimensionMismatch(format!(
                "SRT must be wide: got {mm} x {m}"
            )));
        }
        for (r, row) in d.rows().into_iter().enumerate() {
            let mut any_pos = false;
            for v in row.iter() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("SRT row {r}")));
                }
                if *v < F::zero() {
                    return Err(Error::InvalidSpec(format!("SRT row {r} has negative entry")));
                }
                if *v > F::zero() {
                    any_pos = true;
                }
            }
            if !any_pos {
                return Err(Error::InvalidSpec(format!("SRT row {r} is all zero")));
            }
        }
        Ok(Self { d })
    }

    pub fn matrix(&self) -> &Array2<F> {
        &self.d
    }

    pub fn msi_bands(&self) -> usize {
        self.d.nrows()
    }

    pub fn hsi_bands(&self) -> usize {
        self.d.ncols()
    }

    pub fn cast<G: Scalar>(&self) -> SrtMatrix<G> {
        SrtMatrix {
            d: self.d.mapv(|v| sc::<G>(v.to_f64().expect("finite"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_cube() -> Cube<f64> {
        Cube::new(
            array![[0.0, 0.5, 0.5, 1.0]],
            2,
            2,
            vec![400.0],
        )
        .unwrap()
    }

    #[test]
    fn valid_cube_passes() {
        let c = tiny_cube();
        assert!(validate_cube(&c).is_ok());
        assert_eq!(c.bands(), 1);
        assert_eq!(c.pixels(), 4);
    }

    #[test]
    fn nan_entry_is_nonfinite() {
        let r = Cube::new(array![[0.0, f64::NAN, 0.5, 1.0]], 2, 2, vec![400.0]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn decreasing_wavelengths_rejected() {
        let r = Cube::new(
            array![[0.0, 0.1, 0.2, 0.3], [0.0, 0.1, 0.2, 0.3]],
            2,
            2,
            vec![500.0, 400.0],
        );
        assert!(matches!(r, Err(Error::WavelengthOrder(_))));
    }

    #[test]
    fn pixel_count_mismatch_rejected() {
        let r = Cube::new(array![[0.0, 0.5, 0.5]], 2, 2, vec![400.0]);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn row_major_pixel_indexing() {
        let c = Cube::new(
            array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]],
            3,
            2,
            vec![400.0],
        )
        .unwrap();
        assert_eq!(c.value(0, 0, 2), 3.0);
        assert_eq!(c.value(0, 1, 0), 4.0);
    }

    #[test]
    fn multires_requires_block_constancy() {
        // 2-band 4x4: band 0 HR arbitrary, band 1 MED block-constant.
        let mut med = Array2::<f64>::zeros((1, 16));
        for y in 0..4 {
            for x in 0..4 {
                med[[0, y * 4 + x]] = ((y / 2) * 2 + x / 2) as f64 / 4.0;
            }
        }
        let hr = Array2::from_shape_fn((1, 16), |(_, l)| l as f64 / 16.0);
        let mut data = Array2::<f64>::zeros((2, 16));
        data.row_mut(0).assign(&hr.row(0));
        data.row_mut(1).assign(&med.row(0));
        let cube = Cube::new(data.clone(), 4, 4, vec![400.0, 500.0]).unwrap();
        assert!(MultiResCube::new(cube, vec![ResClass::Hr, ResClass::Med]).is_ok());

        // break one pixel of the MED band
        data[[1, 1]] += 0.01;
        let cube = Cube::new(data, 4, 4, vec![400.0, 500.0]).unwrap();
        assert!(MultiResCube::new(cube, vec![ResClass::Hr, ResClass::Med]).is_err());
    }

    #[test]
    fn multires_requires_an_hr_band() {
        let c = Cube::new(Array2::from_elem((1, 16), 0.25), 4, 4, vec![400.0]).unwrap();
        assert!(matches!(
            MultiResCube::new(c, vec![ResClass::Med]),
            Err(Error::MissingHrBands(_))
        ));
    }

    #[test]
    fn srt_shape_and_positivity_checks() {
        assert!(SrtMatrix::new(array![[0.5, 0.5, 0.0], [0.0, 0.2, 0.8]]).is_ok());
        // square is not wide
        assert!(SrtMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).is_err());
        // all-zero row
        assert!(SrtMatrix::new(array![[0.0, 0.0, 0.0], [0.0, 0.2, 0.8]]).is_err());
        // negative entry
        assert!(SrtMatrix::new(array![[-0.1, 0.5, 0.6], [0.0, 0.2, 0.8]]).is_err());
    }

    #[test]
    fn replication_factors() {
        assert_eq!(ResClass::Hr.replication(), 1);
        assert_eq!(ResClass::Med.replication(), 4);
        assert_eq!(ResClass::Low.replication(), 36);
    }
}
