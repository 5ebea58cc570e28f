//! End-to-end model: unfolding parameters plus fusion parameters, a traced
//! forward pass, and hand-derived reverse-mode gradients for every learnable
//! block (response matrix, penalty, symmetric data-step kernel, denoiser
//! convolutions, and the fusion network).

use crate::cube::{Cube, MultiResCube};
use crate::error::{Error, Result};
use crate::fuse::{fuse_forward_impl, select_hr_bands, FuseCache, FusionParams};
use crate::nn::conv2d_backward;
use crate::prox::{denoiser_backward_data, DenoiserParams};
use crate::unfold::{
    exact_phi, run_unfolding_impl, symmetrize, PhiMode, ProxKind, StageTrace, Strategy,
    UnfoldConfig, UnfoldParams, UnfoldTrace,
};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Architecture and strategy of the trainable pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub bands_h: usize,
    pub bands_m: usize,
    pub n_hr: usize,
    pub stages: usize,
    pub strategy: Strategy,
    pub phi_mode: PhiMode,
    pub share_d: bool,
    pub rho_init: f64,
    pub rho_learnable: bool,
    pub denoiser_blocks: usize,
    pub denoiser_convs: usize,
    pub res_blocks: usize,
}

impl PipelineConfig {
    /// Desk-scale defaults: 6 multi-resolution bands to 32 hyperspectral
    /// bands, 4 unfolding stages, learnable strategy.
    pub fn desk_default() -> Self {
        Self {
            bands_h: 32,
            bands_m: 6,
            n_hr: 4,
            stages: 4,
            strategy: Strategy::Learnable,
            phi_mode: PhiMode::Learned,
            share_d: true,
            rho_init: 1.0,
            rho_learnable: true,
            denoiser_blocks: 2,
            denoiser_convs: 2,
            res_blocks: 2,
        }
    }

    pub fn unfold_config(&self) -> UnfoldConfig {
        UnfoldConfig {
            stages: self.stages,
            strategy: self.strategy,
            rho_init: self.rho_init,
            rho_learnable: self.rho_learnable,
            share_d: self.share_d,
            prox: self.strategy.prox_kind(),
            phi_mode: self.phi_mode,
            stop_tol: None,
        }
    }
}

/// All learnable state of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub unfold: UnfoldParams<f64>,
    pub fusion: FusionParams<f64>,
}

impl Model {
    pub fn init<R: Rng>(
        cfg: PipelineConfig,
        target_wavelengths: Vec<f64>,
        spectral_attention: bool,
        spatial_attention: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let ucfg = cfg.unfold_config();
        let mut unfold =
            UnfoldParams::init(&ucfg, cfg.bands_m, cfg.bands_h, target_wavelengths, rng)?;
        if ucfg.prox == ProxKind::Denoiser {
            unfold.denoiser = Some(DenoiserParams::init(
                cfg.bands_h,
                cfg.denoiser_blocks,
                cfg.denoiser_convs,
                rng,
            ));
        }
        let mut fusion = FusionParams::init(cfg.bands_h, cfg.n_hr, cfg.res_blocks, rng);
        fusion.spectral_attention = spectral_attention;
        fusion.spatial_attention = spatial_attention;
        Ok(Self {
            cfg,
            unfold,
            fusion,
        })
    }

    /// Zero-valued clone with the same shapes (the gradient container).
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for d in g.unfold.d.iter_mut() {
            d.fill(0.0);
        }
        g.unfold.rho_theta = 0.0;
        if let Some(p) = g.unfold.phi_raw.as_mut() {
            p.fill(0.0);
        }
        if let Some(den) = g.unfold.denoiser.as_mut() {
            for block in den.blocks.iter_mut() {
                for conv in block.convs.iter_mut() {
                    conv.weight.fill(0.0);
                    conv.bias.fill(0.0);
                }
            }
        }
        g.fusion.fc_w.fill(0.0);
        g.fusion.fc_b.fill(0.0);
        for conv in [&mut g.fusion.spat_conv, &mut g.fusion.entry, &mut g.fusion.proj] {
            conv.weight.fill(0.0);
            conv.bias.fill(0.0);
        }
        for (a, b) in g.fusion.res_blocks.iter_mut() {
            a.weight.fill(0.0);
            a.bias.fill(0.0);
            b.weight.fill(0.0);
            b.bias.fill(0.0);
        }
        g
    }

    /// Named parameter blocks in flattening order.
    pub fn block_layout(&self) -> Vec<(String, usize, bool)> {
        let trainable_unfold = self.cfg.strategy != Strategy::Mathematical;
        let mut blocks = Vec::new();
        for (i, d) in self.unfold.d.iter().enumerate() {
            blocks.push((format!("unfold.d.{i}"), d.len(), trainable_unfold));
        }
        blocks.push((
            "unfold.rho_theta".to_string(),
            1,
            trainable_unfold && self.cfg.rho_learnable,
        ));
        if let Some(p) = &self.unfold.phi_raw {
            blocks.push(("unfold.phi_raw".to_string(), p.len(), trainable_unfold));
        }
        if let Some(den) = &self.unfold.denoiser {
            for (bi, block) in den.blocks.iter().enumerate() {
                for (ci, conv) in block.convs.iter().enumerate() {
                    blocks.push((
                        format!("unfold.denoiser.{bi}.{ci}.weight"),
                        conv.weight.len(),
                        trainable_unfold,
                    ));
                    blocks.push((
                        format!("unfold.denoiser.{bi}.{ci}.bias"),
                        conv.bias.len(),
                        trainable_unfold,
                    ));
                }
            }
        }
        blocks.push(("fusion.fc.weight".into(), self.fusion.fc_w.len(), true));
        blocks.push(("fusion.fc.bias".into(), self.fusion.fc_b.len(), true));
        for (name, conv) in [
            ("fusion.spat", &self.fusion.spat_conv),
            ("fusion.entry", &self.fusion.entry),
        ] {
            blocks.push((format!("{name}.weight"), conv.weight.len(), true));
            blocks.push((format!("{name}.bias"), conv.bias.len(), true));
        }
        for (i, (a, b)) in self.fusion.res_blocks.iter().enumerate() {
            blocks.push((format!("fusion.res.{i}.0.weight"), a.weight.len(), true));
            blocks.push((format!("fusion.res.{i}.0.bias"), a.bias.len(), true));
            blocks.push((format!("fusion.res.{i}.1.weight"), b.weight.len(), true));
            blocks.push((format!("fusion.res.{i}.1.bias"), b.bias.len(), true));
        }
        blocks.push(("fusion.proj.weight".into(), self.fusion.proj.weight.len(), true));
        blocks.push(("fusion.proj.bias".into(), self.fusion.proj.bias.len(), true));
        blocks
    }

    /// Flat parameter vector in [`Self::block_layout`] order.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for d in &self.unfold.d {
            out.extend(d.iter().copied());
        }
        out.push(self.unfold.rho_theta);
        if let Some(p) = &self.unfold.phi_raw {
            out.extend(p.iter().copied());
        }
        if let Some(den) = &self.unfold.denoiser {
            for block in &den.blocks {
                for conv in &block.convs {
                    out.extend(conv.weight.iter().copied());
                    out.extend(conv.bias.iter().copied());
                }
            }
        }
        out.extend(self.fusion.fc_w.iter().copied());
        out.extend(self.fusion.fc_b.iter().copied());
        for conv in [&self.fusion.spat_conv, &self.fusion.entry] {
            out.extend(conv.weight.iter().copied());
            out.extend(conv.bias.iter().copied());
        }
        for (a, b) in &self.fusion.res_blocks {
            out.extend(a.weight.iter().copied());
            out.extend(a.bias.iter().copied());
            out.extend(b.weight.iter().copied());
            out.extend(b.bias.iter().copied());
        }
        out.extend(self.fusion.proj.weight.iter().copied());
        out.extend(self.fusion.proj.bias.iter().copied());
        out
    }

    /// Per-index trainability mask aligned with [`Self::param_vec`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for (_, len, trainable) in self.block_layout() {
            mask.extend(std::iter::repeat(trainable).take(len));
        }
        mask
    }

    pub fn set_params(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        let mut take = |dst: &mut [f64]| {
            for slot in dst.iter_mut() {
                *slot = it.next().expect("parameter vector too short");
            }
        };
        for d in self.unfold.d.iter_mut() {
            take(d.as_slice_mut().expect("contiguous"));
        }
        let mut theta = [0.0];
        take(&mut theta);
        self.unfold.rho_theta = theta[0];
        if let Some(p) = self.unfold.phi_raw.as_mut() {
            take(p.as_slice_mut().expect("contiguous"));
        }
        if let Some(den) = self.unfold.denoiser.as_mut() {
            for block in den.blocks.iter_mut() {
                for conv in block.convs.iter_mut() {
                    take(conv.weight.as_slice_mut().expect("contiguous"));
                    take(conv.bias.as_slice_mut().expect("contiguous"));
                }
            }
        }
        take(self.fusion.fc_w.as_slice_mut().expect("contiguous"));
        take(self.fusion.fc_b.as_slice_mut().expect("contiguous"));
        for conv in [&mut self.fusion.spat_conv, &mut self.fusion.entry] {
            take(conv.weight.as_slice_mut().expect("contiguous"));
            take(conv.bias.as_slice_mut().expect("contiguous"));
        }
        for (a, b) in self.fusion.res_blocks.iter_mut() {
            take(a.weight.as_slice_mut().expect("contiguous"));
            take(a.bias.as_slice_mut().expect("contiguous"));
            take(b.weight.as_slice_mut().expect("contiguous"));
            take(b.bias.as_slice_mut().expect("contiguous"));
        }
        take(self.fusion.proj.weight.as_slice_mut().expect("contiguous"));
        take(self.fusion.proj.bias.as_slice_mut().expect("contiguous"));
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn parameter_count(&self) -> usize {
        self.param_vec().len()
    }

    /// Inference: intermediate reconstruction and fused output.
    pub fn forward(&self, y_s: &MultiResCube<f64>) -> Result<(Cube<f64>, Cube<f64>)> {
        let cfg = self.cfg.unfold_config();
        let (y_tilde, _) = run_unfolding_impl(y_s, &cfg, &self.unfold, None)?;
        let hr = select_hr_bands(y_s, self.cfg.n_hr)?;
        let y_star = fuse_forward_impl(&y_tilde, &hr, &self.fusion, None)?;
        Ok((y_tilde, y_star))
    }

    pub(crate) fn forward_traced(
        &self,
        y_s: &MultiResCube<f64>,
    ) -> Result<(Cube<f64>, Cube<f64>, FullTrace)> {
        let cfg = self.cfg.unfold_config();
        let mut utrace = UnfoldTrace {
            stages: Vec::new(),
            exact_phi: None,
        };
        let (y_tilde, _) = run_unfolding_impl(y_s, &cfg, &self.unfold, Some(&mut utrace))?;
        let hr = select_hr_bands(y_s, self.cfg.n_hr)?;
        let mut fcache = None;
        let y_star = fuse_forward_impl(&y_tilde, &hr, &self.fusion, Some(&mut fcache))?;
        Ok((
            y_tilde,
            y_star,
            FullTrace {
                unfold: utrace,
                fuse: fcache.expect("cache requested"),
            },
        ))
    }
}

pub(crate) struct FullTrace {
    pub unfold: UnfoldTrace<f64>,
    pub fuse: FuseCache<f64>,
}

fn relu_mask_into(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, p| {
        if !(*p > 0.0) {
            *g = 0.0;
        }
    });
}

/// Backward pass through the fusion network. Accumulates parameter gradients
/// into `grads.fusion` and returns the gradient with respect to the
/// intermediate reconstruction.
pub(crate) fn fuse_backward(
    p: &FusionParams<f64>,
    grads: &mut FusionParams<f64>,
    cache: &FuseCache<f64>,
    h: usize,
    w: usize,
    g_out: &Array2<f64>,
) -> Array2<f64> {
    let m = p.bands();
    let l = h * w;
    let mut g_yup = g_out.clone();

    // projection conv
    let (g_z, gw, gb) = conv2d_backward(&p.proj, &cache.z_final, h, w, g_out);
    grads.proj.weight = &grads.proj.weight + &gw;
    grads.proj.bias = &grads.proj.bias + &gb;
    let mut g_z = g_z;

    // residual refinement, reversed
    for bi in (0..p.res_blocks.len()).rev() {
        let (c1, c2) = &p.res_blocks[bi];
        let (x_in, pre1, a1) = &cache.res[bi];
        let (mut g_a1, gw2, gb2) = conv2d_backward(c2, a1, h, w, &g_z);
        relu_mask_into(&mut g_a1, pre1);
        let (g_x, gw1, gb1) = conv2d_backward(c1, x_in, h, w, &g_a1);
        let gref = &mut grads.res_blocks[bi];
        gref.1.weight = &gref.1.weight + &gw2;
        gref.1.bias = &gref.1.bias + &gb2;
        gref.0.weight = &gref.0.weight + &gw1;
        gref.0.bias = &gref.0.bias + &gb1;
        g_z = &g_z + &g_x;
    }

    // fusion entry
    let mut g_entry_pre = g_z;
    relu_mask_into(&mut g_entry_pre, &cache.entry_pre);
    let (g_cat, gw_e, gb_e) = conv2d_backward(&p.entry, &cache.cat, h, w, &g_entry_pre);
    grads.entry.weight = &grads.entry.weight + &gw_e;
    grads.entry.bias = &grads.entry.bias + &gb_e;

    // emphasis: cat[band, px] = w_spec[band] * y_up[band, px] * w_spat[px]
    let mut g_wspec = Array1::<f64>::zeros(m);
    let mut g_wspat = Array1::<f64>::zeros(l);
    for band in 0..m {
        let ws = cache.w_spec[band];
        for px in 0..l {
            let ge = g_cat[[band, px]];
            let yu = cache.y_up[[band, px]];
            g_wspec[band] += ge * yu * cache.w_spat[px];
            g_yup[[band, px]] += ge * ws * cache.w_spat[px];
            g_wspat[px] += ge * ws * yu;
        }
    }

    // averaged attention distributes its gradient uniformly
    let g_wspec0 = if p.spectral_attention {
        g_wspec
    } else {
        Array1::from_elem(m, g_wspec.sum() / m as f64)
    };
    let g_wspat0 = if p.spatial_attention {
        g_wspat
    } else {
        Array1::from_elem(l, g_wspat.sum() / l as f64)
    };

    // spectral attention chain
    let v_spec = &cache.v_spec;
    let g_fc_pre = Array1::from_shape_fn(m, |i| {
        let s = cache.w_spec0[i];
        g_wspec0[i] * s * (1.0 - s)
    });
    grads.fc_b = &grads.fc_b + &g_fc_pre;
    for r in 0..m {
        for c in 0..m {
            grads.fc_w[[r, c]] += g_fc_pre[r] * v_spec[c];
        }
    }
    let g_vspec = p.fc_w.t().dot(&g_fc_pre);

    // spatial attention chain
    let g_spat_pre = Array2::from_shape_fn((1, l), |(_, px)| {
        let s = cache.w_spat0[px];
        g_wspat0[px] * s * (1.0 - s)
    });
    let (_g_vspat, gw_s, gb_s) = conv2d_backward(&p.spat_conv, &cache.v_spat, h, w, &g_spat_pre);
    grads.spat_conv.weight = &grads.spat_conv.weight + &gw_s;
    grads.spat_conv.bias = &grads.spat_conv.bias + &gb_s;

    // back through the Kronecker upsampling and the band means
    let (h2, w2) = (h / 2, w / 2);
    let l4 = h2 * w2;
    let mut g_ydown = Array2::<f64>::zeros((m, l4));
    for band in 0..m {
        let gv = g_vspec[band] / l4 as f64;
        for yy in 0..h2 {
            for xx in 0..w2 {
                let mut acc = gv;
                let base = 2 * yy * w + 2 * xx;
                acc += g_yup[[band, base]]
                    + g_yup[[band, base + 1]]
                    + g_yup[[band, base + w]]
                    + g_yup[[band, base + w + 1]];
                g_ydown[[band, yy * w2 + xx]] = acc;
            }
        }
    }
    // back through the 2x2 average pooling
    let mut g_ytilde = Array2::<f64>::zeros((m, l));
    for band in 0..m {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let g = 0.25 * g_ydown[[band, yy * w2 + xx]];
                let base = 2 * yy * w + 2 * xx;
                g_ytilde[[band, base]] += g;
                g_ytilde[[band, base + 1]] += g;
                g_ytilde[[band, base + w]] += g;
                g_ytilde[[band, base + w + 1]] += g;
            }
        }
    }
    g_ytilde
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Backward through the spectral-TV prox using its segment structure: within
/// each constant run of the output the Jacobian averages the incoming
/// gradient; the run level also moves with the prox weight through the
/// boundary jump signs. Returns the input gradient and `d loss / d w_col`.
fn tv_prox_backward(v: &Array2<f64>, g_v: &Array2<f64>) -> (Array2<f64>, f64) {
    let (m, l) = v.dim();
    let mut g_z = Array2::<f64>::zeros((m, l));
    let mut g_w = 0.0;
    for px in 0..l {
        let mut a = 0usize;
        while a < m {
            let mut b = a;
            while b + 1 < m && v[[b + 1, px]] == v[[a, px]] {
                b += 1;
            }
            let len = (b - a + 1) as f64;
            let mut gsum = 0.0;
            for i in a..=b {
                gsum += g_v[[i, px]];
            }
            let mean = gsum / len;
            for i in a..=b {
                g_z[[i, px]] = mean;
            }
            let sig_l = if a == 0 {
                0.0
            } else {
                sign0(v[[a, px]] - v[[a - 1, px]])
            };
            let sig_r = if b == m - 1 {
                0.0
            } else {
                sign0(v[[b + 1, px]] - v[[b, px]])
            };
            g_w += gsum * (sig_r - sig_l) / len;
            a = b + 1;
        }
    }
    (g_z, g_w)
}

/// Backward through one prox application.
fn prox_backward(
    cfg: &UnfoldConfig,
    params: &UnfoldParams<f64>,
    grads: &mut UnfoldParams<f64>,
    stage: &StageTrace<f64>,
    h: usize,
    w: usize,
    g_v: &Array2<f64>,
    g_rho: &mut f64,
    rho: f64,
) -> Array2<f64> {
    match cfg.prox {
        ProxKind::Denoiser => {
            let p = params.denoiser.as_ref().expect("denoiser present");
            let gden = grads.denoiser.as_mut().expect("gradient slot present");
            let cache = stage
                .denoiser_cache
                .as_ref()
                .expect("denoiser cache recorded during traced forward");
            denoiser_backward_data(p, gden, cache, h, w, g_v)
        }
        ProxKind::SpectralTv => {
            let (m, l) = stage.v.dim();
            let (g_z, g_w) = tv_prox_backward(&stage.v, g_v);
            // per-column weight w_col = (1/rho) / (L (M-1))
            let norm = 1.0 / ((l * (m - 1)) as f64);
            let w_col = norm / rho;
            *g_rho += g_w * (-w_col / rho);
            g_z
        }
    }
}

/// Backward through the Woodbury data step. Returns the gradient with respect
/// to `X` and accumulates gradients for `D`, the kernel, and `rho`.
#[allow(clippy::too_many_arguments)]
fn y_step_backward(
    phi_mode: PhiMode,
    d: &Array2<f64>,
    rho: f64,
    params: &UnfoldParams<f64>,
    grads: &mut UnfoldParams<f64>,
    d_slot: usize,
    cached_exact_phi: Option<&Array2<f64>>,
    x: &Array2<f64>,
    g_y: &Array2<f64>,
    g_rho: &mut f64,
) -> Result<Array2<f64>> {
    match phi_mode {
        PhiMode::Learned => {
            let phi = symmetrize(params.phi_raw.as_ref().expect("phi present"));
            let c = -2.0 / (rho * rho);
            let t1 = d.dot(g_y); // D G
            let t2 = phi.dot(&t1); // Phi D G
            let dx = d.dot(x); // D X
            let t3 = phi.dot(&dx); // Phi D X
            let g_x = &(g_y * (1.0 / rho)) + &(d.t().dot(&t2) * c);
            let g_phi = t1.dot(&dx.t()) * c;
            if let Some(gp) = grads.phi_raw.as_mut() {
                *gp = &*gp + &symmetrize(&g_phi);
            }
            let g_d = (t3.dot(&g_y.t()) + t2.dot(&x.t())) * c;
            grads.d[d_slot] = &grads.d[d_slot] + &g_d;
            let z = d.t().dot(&t3); // D^T Phi D X
            let mut acc = 0.0;
            for ((g, xv), zv) in g_y.iter().zip(x.iter()).zip(z.iter()) {
                acc += g * (-xv / (rho * rho) + 4.0 * zv / (rho * rho * rho));
            }
            *g_rho += acc;
            Ok(g_x)
        }
        PhiMode::Exact => {
            let phi_owned;
            let phi = match cached_exact_phi {
                Some(p) => p,
                None => {
                    phi_owned = exact_phi(d, rho)?;
                    &phi_owned
                }
            };
            // Y = A^{-1} X with A = 2 D^T D + rho I; the Woodbury form gives
            // both the forward value and the adjoint solve.
            let apply_inv = |g: &Array2<f64>| -> Array2<f64> {
                let t = phi.dot(&d.dot(g));
                &(g * (1.0 / rho)) - &(d.t().dot(&t) * (2.0 / (rho * rho)))
            };
            let y = apply_inv(x);
            let g_x = apply_inv(g_y);
            // S = dL/dA = -(A^{-1} G) Y^T
            let s = g_x.dot(&y.t()) * (-1.0);
            let sym = &s + &s.t();
            grads.d[d_slot] = &grads.d[d_slot] + &(d.dot(&sym) * 2.0);
            let mut tr = 0.0;
            for i in 0..s.nrows() {
                tr += s[[i, i]];
            }
            *g_rho += tr;
            Ok(g_x)
        }
    }
}

/// Normalized per-sample training loss:
/// `(|Y_tilde - gt|_1 + |Y_star - gt|_1) / (M L) + lambda (TVspec + TVspat)`.
pub fn training_loss_parts(
    y_tilde: &Cube<f64>,
    y_star: &Cube<f64>,
    y_gt: &Cube<f64>,
    lambda: f64,
) -> Result<f64> {
    if y_tilde.data().dim() != y_gt.data().dim() || y_star.data().dim() != y_gt.data().dim() {
        return Err(Error::ShapeMismatch("loss operand shapes differ".into()));
    }
    let (m, l) = y_gt.data().dim();
    let norm = 1.0 / ((m * l) as f64);
    let l1 = |a: &Cube<f64>| -> f64 {
        a.data()
            .iter()
            .zip(y_gt.data().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
    };
    let mut loss = (l1(y_tilde) + l1(y_star)) * norm;
    if lambda != 0.0 {
        loss += lambda * (crate::prox::tv_spec(y_tilde)? + crate::prox::tv_spat(y_star)?);
    }
    Ok(loss)
}

/// Loss and analytic gradients for one `(Y_S, Y_gt)` sample. The returned
/// gradient container shares the model's shapes.
pub fn sample_loss_and_grad(
    model: &Model,
    y_s: &MultiResCube<f64>,
    y_gt: &Cube<f64>,
    lambda: f64,
) -> Result<(f64, Model)> {
    let (y_tilde, y_star, trace) = model.forward_traced(y_s)?;
    let loss = training_loss_parts(&y_tilde, &y_star, y_gt, lambda)?;
    let (m, l) = y_gt.data().dim();
    let norm = 1.0 / ((m * l) as f64);

    let mut g_star = Array2::<f64>::zeros((m, l));
    g_star.zip_mut_with(y_star.data(), |g, v| *g = *v);
    g_star.zip_mut_with(y_gt.data(), |g, v| *g = sign0(*g - *v) * norm);
    if lambda != 0.0 {
        g_star = &g_star + &(crate::prox::tv_spat_grad(&y_star)? * lambda);
    }

    let mut g_tilde = Array2::<f64>::zeros((m, l));
    g_tilde.zip_mut_with(y_tilde.data(), |g, v| *g = *v);
    g_tilde.zip_mut_with(y_gt.data(), |g, v| *g = sign0(*g - *v) * norm);
    if lambda != 0.0 {
        g_tilde = &g_tilde + &(crate::prox::tv_spec_grad(&y_tilde)? * lambda);
    }

    let mut grads = model.zeros_like();
    let (h, w) = (y_gt.height(), y_gt.width());
    let g_from_fuse = fuse_backward(&model.fusion, &mut grads.fusion, &trace.fuse, h, w, &g_star);
    let g_tilde_total = &g_tilde + &g_from_fuse;

    if model.cfg.strategy != Strategy::Mathematical {
        unfold_backward(model, &mut grads, &trace.unfold, y_s, h, w, &g_tilde_total)?;
    }
    if grads.param_vec().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient overflow".into()));
    }
    Ok((loss, grads))
}

fn unfold_backward(
    model: &Model,
    grads: &mut Model,
    trace: &UnfoldTrace<f64>,
    y_s: &MultiResCube<f64>,
    h: usize,
    w: usize,
    g_tilde: &Array2<f64>,
) -> Result<()> {
    let cfg = model.cfg.unfold_config();
    let params = &model.unfold;
    let rho = params.rho();
    let y_s_flat = y_s.cube().data();
    let k_eff = trace.stages.len();
    let mut g_rho = 0.0f64;

    // final stage: only the prox ran
    let last = &trace.stages[k_eff - 1];
    let g_z = prox_backward(
        &cfg,
        params,
        &mut grads.unfold,
        last,
        h,
        w,
        g_tilde,
        &mut g_rho,
        rho,
    );
    let mut g_y = g_z.clone();
    let mut g_u = -g_z;

    for i in (0..k_eff - 1).rev() {
        let st = &trace.stages[i];
        let x = st.x.as_ref().expect("non-final stage stores X");
        let v_plus_u = st.v_plus_u.as_ref().expect("non-final stage stores V+U");
        // U^k = U^{k-1} - Y^k + V^k
        let mut g_u_prev = g_u.clone();
        let g_y_total = &g_y - &g_u;
        let mut g_v = g_u.clone();
        // data step
        let d_slot = if params.d.len() == 1 { 0 } else { i };
        let d = params.d_for_stage(i);
        let g_x = y_step_backward(
            cfg.phi_mode,
            d,
            rho,
            params,
            &mut grads.unfold,
            d_slot,
            trace.exact_phi.as_ref(),
            x,
            &g_y_total,
            &mut g_rho,
        )?;
        // X = 2 D^T Y_S + rho (V + U)
        grads.unfold.d[d_slot] = &grads.unfold.d[d_slot] + &(y_s_flat.dot(&g_x.t()) * 2.0);
        let mut acc = 0.0;
        for (g, vu) in g_x.iter().zip(v_plus_u.iter()) {
            acc += g * vu;
        }
        g_rho += acc;
        g_v = &g_v + &(&g_x * rho);
        g_u_prev = &g_u_prev + &(&g_x * rho);
        // prox
        let g_z = prox_backward(
            &cfg,
            params,
            &mut grads.unfold,
            st,
            h,
            w,
            &g_v,
            &mut g_rho,
            rho,
        );
        g_y = g_z.clone();
        g_u = &g_u_prev - &g_z;
    }
    // rho = exp(theta)
    grads.unfold.rho_theta += g_rho * rho;
    Ok(())
}

/// Sum of losses and gradients over a batch (gradients are sums, so
/// duplicating every sample doubles them).
pub fn backward_batch(
    model: &Model,
    batch: &[(MultiResCube<f64>, Cube<f64>)],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::DataEmpty("empty batch".into()));
    }
    let per_sample: Result<Vec<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|(ys, gt)| sample_loss_and_grad(model, ys, gt, lambda).map(|(l, g)| (l, g.param_vec())))
        .collect();
    let per_sample = per_sample?;
    let n = model.parameter_count();
    let mut loss = 0.0;
    let mut grads = vec![0.0; n];
    // ordered reduction keeps results bit-identical across thread counts
    for (l, g) in per_sample {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g.iter()) {
            *acc += gi;
        }
    }
    Ok((loss, grads))
}

/// Forward-only loss over a dataset (mean per sample).
pub fn mean_loss(
    model: &Model,
    data: &[(MultiResCube<f64>, Cube<f64>)],
    lambda: f64,
) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(Error::DataEmpty("empty dataset".into()));
    }
    let losses: Result<Vec<f64>> = data
        .par_iter()
        .map(|(ys, gt)| {
            let (y_tilde, y_star) = model.forward(ys)?;
            training_loss_parts(&y_tilde, &y_star, gt, lambda)
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[allow(unused_imports)]
use ndarray::s;
#[allow(unused_imports)]
use std::ops::AddAssign;
#[allow(unused_imports)]
use Axis as _Axis;
