//! Mini-batch SGD on the joint objective with flip and scale augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::RunConfig;
use crate::network::{loss_total, AmrModel, Checkpoint};
use crate::numcore::{sgd_step, Graph, OptimState, Tensor};
use crate::synthdata::{Dataset, SampleBatch};

pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);
/// Fill value for canvas pixels uncovered after shrinking an image.
pub const PAD_VALUE: f32 = 0.5;

/// Losses of one optimizer step, all taken from the same forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    /// The optimized objective.
    pub all: f64,
    pub cls: f64,
    /// Zero when the consistency loss is disabled.
    pub cps: f64,
    /// Global L2 norm of the parameter gradients.
    pub grad_norm: f64,
}

/// Mean step losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub all: f64,
    pub cls: f64,
    pub cps: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: AmrModel<f32>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLoss>,
}

/// Trains with non-finite batches dumped to the system temp directory.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutput> {
    train_in(config, data, &std::env::temp_dir())
}

/// Trains a fresh model. A non-finite loss or activation aborts the run after
/// writing the offending batch to `dump_dir`.
pub fn train_in(config: &RunConfig, data: &Dataset, dump_dir: &Path) -> Result<TrainOutput> {
    config.validate()?;
    if data.config.n_classes != config.dataset.n_classes || data.config.image_size != config.dataset.image_size {
        return Err(Error::Config("dataset does not match the run configuration".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut model = AmrModel::<f32>::new(config.model_config(), config.seed)?;
    let mut optim = OptimState::new(config.lr, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_0F0F_5A5A_F0F0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let total_steps = config.epochs * data.len().div_ceil(config.batch_size);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let first = steps.len();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = data.batch(chunk)?;
            if config.augment {
                augment_batch(&mut batch, &mut rng);
            }
            optim.learning_rate = learning_rate(config, steps.len(), total_steps);
            let log = match train_step(&mut model, config, &batch, &mut optim, epoch, step) {
                Err(Error::NonFinite(msg)) => {
                    let path = dump_batch(dump_dir, &batch, epoch, step)?;
                    return Err(Error::NonFinite(format!(
                        "{msg} at epoch {epoch} step {step}; batch written to {}",
                        path.display()
                    )));
                }
                other => other?,
            };
            log::debug!(
                "epoch {epoch} step {step}: all {:.5} cls {:.5} cps {:.5} |g| {:.4}",
                log.all,
                log.cls,
                log.cps,
                log.grad_norm
            );
            steps.push(log);
        }
        let ran = &steps[first..];
        let mean = |f: fn(&StepLog) -> f64| ran.iter().map(f).sum::<f64>() / ran.len() as f64;
        let e = EpochLoss {
            epoch,
            all: mean(|s| s.all),
            cls: mean(|s| s.cls),
            cps: mean(|s| s.cps),
        };
        log::info!("epoch {epoch}: all {:.5} cls {:.5} cps {:.5}", e.all, e.cls, e.cps);
        epochs.push(e);
    }
    Ok(TrainOutput { model, steps, epochs })
}

/// Polynomial decay from `config.lr` towards 0 over the whole run.
pub fn learning_rate(config: &RunConfig, step: usize, total_steps: usize) -> f64 {
    let progress = step as f64 / total_steps.max(1) as f64;
    config.lr * (1.0 - progress).max(0.0).powf(config.lr_power)
}

fn train_step(
    model: &mut AmrModel<f32>,
    config: &RunConfig,
    batch: &SampleBatch,
    optim: &mut OptimState<f32>,
    epoch: usize,
    step: usize,
) -> Result<StepLog> {
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let out = model.forward(&mut g, x, &config.modulation)?;
    let losses = loss_total(&mut g, &out, &batch.labels, config.use_cps)?;
    let value = |g: &Graph<f32>, v| g.value(v).item() as f64;
    let mut log = StepLog {
        epoch,
        step,
        all: value(&g, losses.all),
        cls: value(&g, losses.cls),
        cps: losses.cps.map_or(0.0, |v| value(&g, v)),
        grad_norm: 0.0,
    };
    if !log.all.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", log.all)));
    }
    g.backward(losses.all)?;
    model.collect_grads(&mut g, &out)?;
    log.grad_norm = model
        .named_params()
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flatten()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    let mut params = model.params_mut();
    sgd_step(&mut params, optim)?;
    for p in model.params_mut() {
        if !p.is_finite() {
            return Err(Error::NonFinite("parameter update".into()));
        }
    }
    Ok(log)
}

fn dump_batch(dir: &Path, batch: &SampleBatch, epoch: usize, step: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("nonfinite_epoch{epoch}_step{step}.tnsr"));
    let labels = Tensor::new(vec![batch.len(), batch.n_classes], batch.labels.clone())?;
    let mut bytes = batch.images.to_dump_bytes();
    bytes.extend(labels.to_dump_bytes());
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn augment_batch(batch: &mut SampleBatch, rng: &mut ChaCha8Rng) {
    let s = batch.image_size;
    let px = s * s;
    for b in 0..batch.len() {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let image = &mut batch.images.data_mut()[b * 3 * px..(b + 1) * 3 * px];
        let mask = &mut batch.masks[b * px..(b + 1) * px];
        let (new_image, new_mask) = augment(image, mask, s, flip, scale);
        image.copy_from_slice(&new_image);
        mask.copy_from_slice(&new_mask);
    }
}

/// Optional mirror, then resize by `scale` and centre-crop or pad back to
/// `size`. The image is resampled bilinearly and the mask by nearest
/// neighbour; padded pixels become [`PAD_VALUE`] and background.
pub fn augment(image: &[f32], mask: &[u8], size: usize, flip: bool, scale: f64) -> (Vec<f32>, Vec<u8>) {
    let px = size * size;
    let scaled = ((size as f64 * scale).round() as usize).max(1);
    let offset = (scaled as isize - size as isize) / 2;
    let ratio = size as f64 / scaled as f64;
    let mut out_image = vec![PAD_VALUE; 3 * px];
    let mut out_mask = vec![0u8; px];
    let src = |v: usize| {
        let pos = ((v as f64 + 0.5) * ratio - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(size - 1), (pos - lo as f64) as f32)
    };
    let nearest = |v: usize| (((v as f64 + 0.5) * ratio) as usize).min(size - 1);
    for y in 0..size {
        let sy = y as isize + offset;
        if sy < 0 || sy >= scaled as isize {
            continue;
        }
        let (y0, y1, fy) = src(sy as usize);
        let ny = nearest(sy as usize);
        for x in 0..size {
            let sx = x as isize + offset;
            if sx < 0 || sx >= scaled as isize {
                continue;
            }
            let sx = sx as usize;
            let (mut x0, mut x1, fx) = src(sx);
            let mut nx = nearest(sx);
            if flip {
                x0 = size - 1 - x0;
                x1 = size - 1 - x1;
                nx = size - 1 - nx;
            }
            for c in 0..3 {
                let p = &image[c * px..(c + 1) * px];
                let top = p[y0 * size + x0] * (1.0 - fx) + p[y0 * size + x1] * fx;
                let bottom = p[y1 * size + x0] * (1.0 - fx) + p[y1 * size + x1] * fx;
                out_image[c * px + y * size + x] = top * (1.0 - fy) + bottom * fy;
            }
            out_mask[y * size + x] = mask[ny * size + nx];
        }
    }
    (out_image, out_mask)
}

/// Parameters plus the full run configuration as metadata.
pub fn to_checkpoint(model: &AmrModel<f32>, config: &RunConfig) -> Checkpoint {
    Checkpoint {
        metadata: config.to_pairs(),
        params: model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone().with_requires_grad(false)))
            .collect(),
    }
}

/// Rebuilds the model and run configuration stored by [`to_checkpoint`].
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(AmrModel<f32>, RunConfig)> {
    let config = RunConfig::from_pairs(ck.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let mut model = AmrModel::<f32>::new(config.model_config(), config.seed)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if names.len() != ck.params.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, configuration expects {}",
            ck.params.len(),
            names.len()
        )));
    }
    for (name, slot) in names.iter().zip(model.params_mut()) {
        let t = ck
            .param(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Config(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok((model, config))
}
