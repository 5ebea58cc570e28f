//! Versioned binary checkpoint: magic bytes, format version, a `key = value`
//! config echo, then named tensors as shapes plus 64-bit little-endian
//! floats. Round trips are bit-exact.

use super::pipeline::{Model, PipelineConfig};
use crate::error::{Error, Result};
use crate::fuse::FusionParams;
use crate::nn::Conv2d;
use crate::prox::DenoiserParams;
use crate::unfold::{PhiMode, ProxKind, Strategy, UnfoldParams};
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HSSRCKP1";
const VERSION: u32 = 1;

fn push_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn conv_tensors(out: &mut Vec<u8>, name: &str, conv: &Conv2d<f64>) {
    let (a, b, c, d) = conv.weight.dim();
    push_tensor(
        out,
        &format!("{name}.weight"),
        &[a, b, c, d],
        conv.weight.as_slice().expect("contiguous"),
    );
    push_tensor(
        out,
        &format!("{name}.bias"),
        &[conv.bias.len()],
        conv.bias.as_slice().expect("contiguous"),
    );
}

fn config_echo(model: &Model) -> String {
    let c = &model.cfg;
    let mut s = String::new();
    s.push_str(&format!("bands_h = {}\n", c.bands_h));
    s.push_str(&format!("bands_m = {}\n", c.bands_m));
    s.push_str(&format!("n_hr = {}\n", c.n_hr));
    s.push_str(&format!("stages = {}\n", c.stages));
    s.push_str(&format!("strategy = {}\n", c.strategy.as_str()));
    s.push_str(&format!("phi_mode = {}\n", c.phi_mode.as_str()));
    s.push_str(&format!("share_d = {}\n", c.share_d));
    s.push_str(&format!("rho_init = {:?}\n", c.rho_init));
    s.push_str(&format!("rho_learnable = {}\n", c.rho_learnable));
    s.push_str(&format!("denoiser_blocks = {}\n", c.denoiser_blocks));
    s.push_str(&format!("denoiser_convs = {}\n", c.denoiser_convs));
    s.push_str(&format!("res_blocks = {}\n", c.res_blocks));
    s.push_str(&format!(
        "spectral_attention = {}\n",
        model.fusion.spectral_attention
    ));
    s.push_str(&format!(
        "spatial_attention = {}\n",
        model.fusion.spatial_attention
    ));
    s
}

/// Serialize a model to disk.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_echo(model);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let mut tensors = Vec::new();
    let mut count = 0u32;
    {
        let mut emit = |name: &str, dims: &[usize], data: &[f64]| {
            push_tensor(&mut tensors, name, dims, data);
            count += 1;
        };
        let u = &model.unfold;
        for (i, d) in u.d.iter().enumerate() {
            emit(
                &format!("unfold.d.{i}"),
                &[d.nrows(), d.ncols()],
                d.as_slice().expect("contiguous"),
            );
        }
        emit("unfold.rho_theta", &[1], &[u.rho_theta]);
        if let Some(p) = &u.phi_raw {
            emit(
                "unfold.phi_raw",
                &[p.nrows(), p.ncols()],
                p.as_slice().expect("contiguous"),
            );
        }
        emit(
            "unfold.target_wavelengths",
            &[u.target_wavelengths.len()],
            &u.target_wavelengths,
        );
    }
    if let Some(den) = &model.unfold.denoiser {
        for (bi, block) in den.blocks.iter().enumerate() {
            for (ci, conv) in block.convs.iter().enumerate() {
                conv_tensors(&mut tensors, &format!("unfold.denoiser.{bi}.{ci}"), conv);
                count += 2;
            }
        }
    }
    {
        let f = &model.fusion;
        push_tensor(
            &mut tensors,
            "fusion.fc.weight",
            &[f.fc_w.nrows(), f.fc_w.ncols()],
            f.fc_w.as_slice().expect("contiguous"),
        );
        push_tensor(
            &mut tensors,
            "fusion.fc.bias",
            &[f.fc_b.len()],
            f.fc_b.as_slice().expect("contiguous"),
        );
        count += 2;
        conv_tensors(&mut tensors, "fusion.spat", &f.spat_conv);
        conv_tensors(&mut tensors, "fusion.entry", &f.entry);
        count += 4;
        for (i, (a, b)) in f.res_blocks.iter().enumerate() {
            conv_tensors(&mut tensors, &format!("fusion.res.{i}.0"), a);
            conv_tensors(&mut tensors, &format!("fusion.res.{i}.1"), b);
            count += 4;
        }
        conv_tensors(&mut tensors, "fusion.proj", &f.proj);
        count += 2;
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&tensors);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::HeaderParse("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::HeaderParse(format!("bad config line '{line}'")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn cfg_get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| Error::HeaderParse(format!("checkpoint config missing '{key}'")))
}

fn cfg_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    cfg_get(map, key)?
        .parse::<T>()
        .map_err(|_| Error::HeaderParse(format!("bad value for '{key}'")))
}

type TensorMap = BTreeMap<String, ArrayD<f64>>;

fn remove2(tensors: &mut TensorMap, name: &str) -> Result<Array2<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::HeaderParse(format!("missing tensor '{name}'")))?;
    t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::HeaderParse(format!("tensor '{name}' is not 2-D")))
}

fn remove1(tensors: &mut TensorMap, name: &str) -> Result<Array1<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::HeaderParse(format!("missing tensor '{name}'")))?;
    t.into_dimensionality::<ndarray::Ix1>()
        .map_err(|_| Error::HeaderParse(format!("tensor '{name}' is not 1-D")))
}

fn remove_conv(tensors: &mut TensorMap, name: &str) -> Result<Conv2d<f64>> {
    let w = tensors
        .remove(&format!("{name}.weight"))
        .ok_or_else(|| Error::HeaderParse(format!("missing tensor '{name}.weight'")))?;
    let weight: Array4<f64> = w
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::HeaderParse(format!("tensor '{name}.weight' is not 4-D")))?;
    let bias = remove1(tensors, &format!("{name}.bias"))?;
    Ok(Conv2d { weight, bias })
}

/// Load a model back from disk; forward outputs reproduce bit-exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::HeaderParse("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::HeaderParse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::HeaderParse("config not UTF-8".into()))?;
    let map = parse_config(&cfg_text)?;
    let cfg = PipelineConfig {
        bands_h: cfg_parse(&map, "bands_h")?,
        bands_m: cfg_parse(&map, "bands_m")?,
        n_hr: cfg_parse(&map, "n_hr")?,
        stages: cfg_parse(&map, "stages")?,
        strategy: Strategy::parse(cfg_get(&map, "strategy")?)?,
        phi_mode: PhiMode::parse(cfg_get(&map, "phi_mode")?)?,
        share_d: cfg_parse(&map, "share_d")?,
        rho_init: cfg_parse(&map, "rho_init")?,
        rho_learnable: cfg_parse(&map, "rho_learnable")?,
        denoiser_blocks: cfg_parse(&map, "denoiser_blocks")?,
        denoiser_convs: cfg_parse(&map, "denoiser_convs")?,
        res_blocks: cfg_parse(&map, "res_blocks")?,
    };
    let spectral_attention: bool = cfg_parse(&map, "spectral_attention")?;
    let spatial_attention: bool = cfg_parse(&map, "spatial_attention")?;

    let n_tensors = r.u32()? as usize;
    let mut tensors: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::HeaderParse("tensor name not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let total: usize = dims.iter().product();
        let data = r.f64s(total)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::HeaderParse(format!("bad shape for tensor '{name}'")))?;
        tensors.insert(name, arr);
    }
    if r.pos != r.buf.len() {
        return Err(Error::HeaderParse("trailing bytes in checkpoint".into()));
    }

    let n_d = if cfg.share_d { 1 } else { cfg.stages };
    let mut d = Vec::with_capacity(n_d);
    for i in 0..n_d {
        d.push(remove2(&mut tensors, &format!("unfold.d.{i}"))?);
    }
    let phi_raw = match cfg.phi_mode {
        PhiMode::Learned => Some(remove2(&mut tensors, "unfold.phi_raw")?),
        PhiMode::Exact => None,
    };
    let rho_theta = remove1(&mut tensors, "unfold.rho_theta")?[0];
    let target_wavelengths = remove1(&mut tensors, "unfold.target_wavelengths")?.to_vec();

    let denoiser = match cfg.strategy.prox_kind() {
        ProxKind::Denoiser => {
            let mut blocks = Vec::with_capacity(cfg.denoiser_blocks);
            for bi in 0..cfg.denoiser_blocks {
                let mut convs = Vec::with_capacity(cfg.denoiser_convs);
                for ci in 0..cfg.denoiser_convs {
                    convs.push(remove_conv(&mut tensors, &format!("unfold.denoiser.{bi}.{ci}"))?);
                }
                blocks.push(crate::prox::DenoiserBlock { convs });
            }
            Some(DenoiserParams { blocks })
        }
        ProxKind::SpectralTv => None,
    };

    let fc_w = remove2(&mut tensors, "fusion.fc.weight")?;
    let fc_b = remove1(&mut tensors, "fusion.fc.bias")?;
    let spat_conv = remove_conv(&mut tensors, "fusion.spat")?;
    let entry = remove_conv(&mut tensors, "fusion.entry")?;
    let mut res_blocks = Vec::with_capacity(cfg.res_blocks);
    for i in 0..cfg.res_blocks {
        res_blocks.push((
            remove_conv(&mut tensors, &format!("fusion.res.{i}.0"))?,
            remove_conv(&mut tensors, &format!("fusion.res.{i}.1"))?,
        ));
    }
    let proj = remove_conv(&mut tensors, "fusion.proj")?;

    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(Error::HeaderParse(format!(
            "unexpected tensors in checkpoint: {}",
            extra.join(", ")
        )));
    }

    let model = Model {
        cfg,
        unfold: UnfoldParams {
            d,
            rho_theta,
            phi_raw,
            denoiser,
            target_wavelengths,
        },
        fusion: FusionParams {
            fc_w,
            fc_b,
            spat_conv,
            entry,
            res_blocks,
            proj,
            n_hr: cfg_parse(&map, "n_hr")?,
            spectral_attention,
            spatial_attention,
        },
    };
    model.fusion.validate(model.cfg.bands_h)?;
    Ok(model)
}
