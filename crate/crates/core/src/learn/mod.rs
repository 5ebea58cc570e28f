//! Training: the composite loss, the ADAM optimizer with a milestone
//! schedule, finite-difference gradient checking, and the end-to-end training
//! loop over synthetic pairs.

pub mod checkpoint;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pipeline::{
    backward_batch, mean_loss, sample_loss_and_grad, training_loss_parts, Model, PipelineConfig,
};

use crate::cube::{Cube, MultiResCube};
use crate::error::{Error, Result};
use crate::prox::{tv_spat, tv_spec};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Composite loss configuration. `loss_total` keeps the four terms exactly
/// as written: unnormalized entrywise l1 sums plus the weighted TV
/// regularizers. The training objective additionally normalizes the l1 terms
/// by `M * L * batch` so the default weight keeps its meaning across cube
/// sizes (see [`training_loss_parts`]).
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub lambda: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { lambda: 1e-4 }
    }
}

impl LossSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidSpec(format!("lambda {lambda} must be >= 0")));
        }
        Ok(Self { lambda })
    }
}

/// The four-term objective:
/// `|Y_tilde - gt|_1 + |Y_star - gt|_1 + lambda (TVspec(Y_tilde) + TVspat(Y_star))`.
pub fn loss_total(
    y_tilde: &Cube<f64>,
    y_star: &Cube<f64>,
    y_gt: &Cube<f64>,
    spec: LossSpec,
) -> Result<f64> {
    if y_tilde.data().dim() != y_gt.data().dim() || y_star.data().dim() != y_gt.data().dim() {
        return Err(Error::ShapeMismatch("loss operand shapes differ".into()));
    }
    let l1 = |a: &Cube<f64>| -> f64 {
        a.data()
            .iter()
            .zip(y_gt.data().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
    };
    let mut loss = l1(y_tilde) + l1(y_star);
    if spec.lambda != 0.0 {
        loss += spec.lambda * (tv_spec(y_tilde)? + tv_spat(y_star)?);
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter moment accumulators plus the learning-rate
/// schedule (base 1e-4, halved after epochs 30, 60 and 90).
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl OptimState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            base_lr: 1e-4,
            milestones: vec![30, 60, 90],
            factor: 0.5,
        }
    }

    /// Learning rate in effect during a given (1-based) epoch.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}

/// One bias-corrected ADAM update. Indices where `mask` is false are frozen.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    hyper: &AdamHyper,
    mask: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments, {} mask",
            params.len(),
            grads.len(),
            state.m.len(),
            mask.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient fed to ADAM".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        if !mask[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Compare an analytic gradient against central finite differences of `f`.
/// Returns the worst relative error, with the denominator floored at 1e-6 to
/// keep finite-difference noise on near-zero coordinates from dominating.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let fp = f(&p);
        p[i] = orig - eps;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    worst
}

/// Training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub pipeline: PipelineConfig,
    pub spectral_attention: bool,
    pub spatial_attention: bool,
    pub target_wavelengths: Vec<f64>,
}

impl TrainConfig {
    pub fn desk_default(target_wavelengths: Vec<f64>) -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            seed: 0,
            lambda: 1e-4,
            base_lr: 1e-4,
            milestones: vec![30, 60, 90],
            lr_factor: 0.5,
            pipeline: PipelineConfig::desk_default(),
            spectral_attention: true,
            spatial_attention: true,
            target_wavelengths,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Set when a non-finite loss or gradient aborted training; the model is
    /// the last good state.
    pub aborted_nonfinite: bool,
}

impl TrainResult {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss\n");
        for row in &self.log {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                row.epoch, row.lr, row.train_loss, row.val_loss
            ));
        }
        s
    }
}

/// End-to-end training on simulated pairs. Per-sample gradients run in
/// parallel; the reduction is ordered, so results are bit-reproducible for a
/// fixed seed regardless of thread count. Epoch 0 logs the pre-training
/// losses.
pub fn train(
    train_set: &[(MultiResCube<f64>, Cube<f64>)],
    val_set: &[(MultiResCube<f64>, Cube<f64>)],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if train_set.is_empty() {
        return Err(Error::DataEmpty("no training pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(
        cfg.pipeline.clone(),
        cfg.target_wavelengths.clone(),
        cfg.spectral_attention,
        cfg.spatial_attention,
        &mut rng,
    )?;
    let mut params = model.param_vec();
    let mask = model.trainable_mask();
    let mut state = OptimState::new(params.len());
    state.base_lr = cfg.base_lr;
    state.milestones = cfg.milestones.clone();
    state.factor = cfg.lr_factor;
    let hyper = AdamHyper::default();

    let eval = |model: &Model, data: &[(MultiResCube<f64>, Cube<f64>)]| -> Result<f64> {
        if data.is_empty() {
            Ok(f64::NAN)
        } else {
            mean_loss(model, data, cfg.lambda)
        }
    };

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    log.push(EpochLog {
        epoch: 0,
        lr: state.lr_for_epoch(1),
        train_loss: eval(&model, train_set)?,
        val_loss: eval(&model, val_set)?,
    });

    let mut last_good = params.clone();
    let mut aborted = false;
    'outer: for epoch in 1..=cfg.epochs {
        let lr = state.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<(MultiResCube<f64>, Cube<f64>)> = chunk
                .iter()
                .map(|&i| (train_set[i].0.clone(), train_set[i].1.clone()))
                .collect();
            let (sum_loss, sum_grads) = match backward_batch(&model, &batch, cfg.lambda) {
                Ok(ok) => ok,
                Err(Error::NonFinite(_)) => {
                    aborted = true;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let b = batch.len() as f64;
            if !sum_loss.is_finite() {
                aborted = true;
                break 'outer;
            }
            let mean_grads: Vec<f64> = sum_grads.iter().map(|g| g / b).collect();
            adam_step(&mut params, &mean_grads, &mut state, lr, &hyper, &mask)?;
            model.set_params(&params);
            epoch_loss += sum_loss;
            seen += batch.len();
            last_good = params.clone();
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss: eval(&model, val_set)?,
        });
    }
    if aborted {
        model.set_params(&last_good);
    }
    Ok(TrainResult {
        model,
        log,
        aborted_nonfinite: aborted,
    })
}
