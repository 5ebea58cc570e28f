//! ENVI-style cube I/O: a line-oriented `key = value` text header (`.hdr`)
//! next to a raw little-endian 32-bit float band-sequential payload (`.bsq`).
//!
//! Reflectance is normalized at ingestion by the per-file
//! `reflectance scale factor`; files written here always declare a factor of
//! 1 since cubes are stored already normalized. When the key is absent the
//! common level-2 convention of 10000 applies.

use crate::cube::{Cube, MultiResCube, ResClass};
use crate::error::{Error, Result};
use crate::{sc, Scalar};
use ndarray::Array2;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const DEFAULT_SCALE_FACTOR: f64 = 10000.0;

fn header_path(payload: &Path) -> PathBuf {
    payload.with_extension("hdr")
}

fn format_f64(v: f64) -> String {
    // shortest round-trip representation
    format!("{v:?}")
}

fn render_header<F: Scalar>(cube: &Cube<F>, classes: Option<&[ResClass]>) -> String {
    let mut s = String::from("ENVI\n");
    s.push_str(&format!("samples = {}\n", cube.width()));
    s.push_str(&format!("lines = {}\n", cube.height()));
    s.push_str(&format!("bands = {}\n", cube.bands()));
    s.push_str("data type = 4\n");
    s.push_str("interleave = bsq\n");
    s.push_str("byte order = 0\n");
    s.push_str("reflectance scale factor = 1\n");
    let wl: Vec<String> = cube.wavelengths().iter().map(|w| format_f64(*w)).collect();
    s.push_str(&format!("wavelength = {{{}}}\n", wl.join(", ")));
    if let Some(classes) = classes {
        let cl: Vec<&str> = classes.iter().map(|c| c.as_str()).collect();
        s.push_str(&format!("band classes = {{{}}}\n", cl.join(", ")));
    }
    s
}

fn write_payload<F: Scalar>(cube: &Cube<F>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(cube.bands() * cube.pixels() * 4);
    for band in cube.data().rows() {
        for v in band.iter() {
            let f = v.to_f64().expect("finite") as f32;
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Write a cube as `.bsq` payload plus `.hdr` header.
pub fn write_envi<F: Scalar>(cube: &Cube<F>, path: impl AsRef<Path>) -> Result<()> {
    cube.validate()?;
    let payload = path.as_ref().to_path_buf();
    fs::write(header_path(&payload), render_header(cube, None))?;
    write_payload(cube, &payload)
}

/// Write a multi-resolution cube; band classes are carried in the header.
pub fn write_envi_multires<F: Scalar>(mrc: &MultiResCube<F>, path: impl AsRef<Path>) -> Result<()> {
    let payload = path.as_ref().to_path_buf();
    fs::write(
        header_path(&payload),
        render_header(mrc.cube(), Some(mrc.classes())),
    )?;
    write_payload(mrc.cube(), &payload)
}

struct Header {
    samples: usize,
    lines: usize,
    bands: usize,
    scale: f64,
    wavelengths: Vec<f64>,
    classes: Option<Vec<ResClass>>,
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .trim()
        .trim_start_matches('{')
        .trim_end_matches('}')
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_header(text: &str) -> Result<Header> {
    let mut kv: HashMap<String, String> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == "ENVI" || line.starts_with(';') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::HeaderParse(format!("line {}: '{line}'", idx + 1)));
        };
        kv.insert(key.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::HeaderParse(format!("missing key '{key}'")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse::<usize>()
            .map_err(|_| Error::HeaderParse(format!("bad integer for '{key}'")))
    };
    let samples = parse_usize("samples")?;
    let lines = parse_usize("lines")?;
    let bands = parse_usize("bands")?;
    let data_type = parse_usize("data type")?;
    if data_type != 4 {
        return Err(Error::HeaderParse(format!(
            "unsupported data type {data_type} (only 4 = 32-bit float)"
        )));
    }
    let interleave = get("interleave")?.to_ascii_lowercase();
    if interleave != "bsq" {
        return Err(Error::UnsupportedInterleave(interleave));
    }
    if let Some(bo) = kv.get("byte order") {
        if bo.trim() != "0" {
            return Err(Error::HeaderParse(format!("unsupported byte order {bo}")));
        }
    }
    let scale = match kv.get("reflectance scale factor") {
        Some(v) => v
            .parse::<f64>()
            .map_err(|_| Error::HeaderParse("bad scale factor".into()))?,
        None => DEFAULT_SCALE_FACTOR,
    };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::HeaderParse(format!("invalid scale factor {scale}")));
    }
    let mut wavelengths = Vec::with_capacity(bands);
    for tok in parse_list(get("wavelength")?) {
        wavelengths.push(
            tok.parse::<f64>()
                .map_err(|_| Error::HeaderParse(format!("bad wavelength '{tok}'")))?,
        );
    }
    if wavelengths.len() != bands {
        return Err(Error::HeaderParse(format!(
            "{} wavelengths for {} bands",
            wavelengths.len(),
            bands
        )));
    }
    let classes = match kv.get("band classes") {
        Some(v) => {
            let mut cl = Vec::with_capacity(bands);
            for tok in parse_list(v) {
                cl.push(ResClass::parse(&tok)?);
            }
            if cl.len() != bands {
                return Err(Error::HeaderParse(format!(
                    "{} band classes for {} bands",
                    cl.len(),
                    bands
                )));
            }
            Some(cl)
        }
        None => None,
    };
    Ok(Header {
        samples,
        lines,
        bands,
        scale,
        wavelengths,
        classes,
    })
}

fn read_cube_and_classes<F: Scalar>(
    path: &Path,
) -> Result<(Cube<F>, Option<Vec<ResClass>>)> {
    let hdr_text = fs::read_to_string(header_path(path))?;
    let hdr = parse_header(&hdr_text)?;
    let payload = fs::read(path)?;
    let expect = hdr
        .samples
        .checked_mul(hdr.lines)
        .and_then(|l| l.checked_mul(hdr.bands))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::HeaderParse("dimension overflow".into()))?;
    if payload.len() != expect {
        return Err(Error::PayloadSizeMismatch(format!(
            "payload {} bytes, header implies {}",
            payload.len(),
            expect
        )));
    }
    let l = hdr.samples * hdr.lines;
    let inv_scale = 1.0 / hdr.scale;
    let mut data = Array2::<F>::zeros((hdr.bands, l));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        data[[i / l, i % l]] = sc::<F>(raw * inv_scale);
    }
    let cube = Cube::new(data, hdr.samples, hdr.lines, hdr.wavelengths)?;
    Ok((cube, hdr.classes))
}

/// Read a cube written by [`write_envi`] (or any conforming BSQ float file).
pub fn read_envi<F: Scalar>(path: impl AsRef<Path>) -> Result<Cube<F>> {
    let (cube, _) = read_cube_and_classes(path.as_ref())?;
    Ok(cube)
}

/// Read a multi-resolution cube; the header must carry `band classes`.
pub fn read_envi_multires<F: Scalar>(path: impl AsRef<Path>) -> Result<MultiResCube<F>> {
    let (cube, classes) = read_cube_and_classes(path.as_ref())?;
    let classes = classes.ok_or_else(|| {
        Error::HeaderParse("header lacks 'band classes' needed for a multi-resolution cube".into())
    })?;
    MultiResCube::new(cube, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_cube(seed: u64, m: usize, w: usize, h: usize) -> Cube<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // values quantized to f32 so the 32-bit payload round trip is exact
        let data = Array2::from_shape_fn((m, w * h), |_| rng.random::<f32>() as f64);
        let wl: Vec<f64> = (0..m).map(|i| 400.0 + 25.0 * i as f64).collect();
        Cube::new(data, w, h, wl).unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube.bsq");
        let cube = random_cube(11, 4, 8, 8);
        write_envi(&cube, &path).unwrap();
        let back: Cube<f64> = read_envi(&path).unwrap();
        assert_eq!(cube, back);
    }

    #[test]
    fn round_trip_f32_cube() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cube32.bsq");
        let cube = random_cube(13, 3, 6, 6).cast::<f32>();
        write_envi(&cube, &path).unwrap();
        let back: Cube<f32> = read_envi(&path).unwrap();
        assert_eq!(cube, back);
    }

    #[test]
    fn payload_size_mismatch_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bsq");
        let cube = random_cube(7, 2, 4, 4);
        write_envi(&cube, &path).unwrap();
        // doctor the header to declare 3 bands over a 2-band payload
        let hdr = path.with_extension("hdr");
        let text = fs::read_to_string(&hdr).unwrap().replace("bands = 2", "bands = 3");
        fs::write(&hdr, text).unwrap();
        let text = fs::read_to_string(&hdr).unwrap();
        assert!(text.contains("bands = 3"));
        let err = read_envi::<f64>(&path);
        assert!(matches!(err, Err(Error::HeaderParse(_)) | Err(Error::PayloadSizeMismatch(_))));
    }

    #[test]
    fn non_bsq_interleave_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bil.bsq");
        let cube = random_cube(5, 2, 4, 4);
        write_envi(&cube, &path).unwrap();
        let hdr = path.with_extension("hdr");
        let text = fs::read_to_string(&hdr)
            .unwrap()
            .replace("interleave = bsq", "interleave = bil");
        fs::write(&hdr, text).unwrap();
        assert!(matches!(
            read_envi::<f64>(&path),
            Err(Error::UnsupportedInterleave(_))
        ));
    }

    #[test]
    fn missing_scale_factor_defaults_to_10000() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scaled.bsq");
        let cube = random_cube(3, 1, 2, 2);
        write_envi(&cube, &path).unwrap();
        let hdr = path.with_extension("hdr");
        let text: String = fs::read_to_string(&hdr)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("reflectance scale factor"))
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(&hdr, text).unwrap();
        let back: Cube<f64> = read_envi(&path).unwrap();
        for (a, b) in back.data().iter().zip(cube.data().iter()) {
            assert!((a - b / 10000.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multires_round_trip_keeps_classes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mrc.bsq");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = 6;
        let h = 6;
        let mut data = Array2::<f64>::zeros((2, w * h));
        for l in 0..w * h {
            data[[0, l]] = rng.random::<f32>() as f64;
        }
        let v = rng.random::<f32>() as f64;
        for l in 0..w * h {
            data[[1, l]] = v; // LOW band: constant on the single 6x6 block
        }
        let cube = Cube::new(data, w, h, vec![490.0, 945.0]).unwrap();
        let mrc = MultiResCube::new(cube, vec![ResClass::Hr, ResClass::Low]).unwrap();
        write_envi_multires(&mrc, &path).unwrap();
        let back: MultiResCube<f64> = read_envi_multires(&path).unwrap();
        assert_eq!(mrc, back);
    }
}
