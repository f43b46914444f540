//! Pseudo-label quality: mIoU and CAM-region precision/recall against the
//! ground-truth masks.

use crate::error::{Error, Result};
use crate::harness::train::EpochLoss;
use crate::harness::RunConfig;
use crate::network::AmrModel;
use crate::numcore::{Graph, Tensor};
use crate::recalib::{pseudo_label, recalibrate, CamStack};
use crate::synthdata::Dataset;

/// Square confusion matrix over `n_classes + 1` labels (0 is background),
/// indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        let k = n_classes + 1;
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, prediction: &[u8], truth: &[u8]) -> Result<()> {
        if prediction.len() != truth.len() {
            return Err(Error::dim(format!(
                "prediction has {} pixels, truth {}",
                prediction.len(),
                truth.len()
            )));
        }
        for (&p, &t) in prediction.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Argument(format!("label {} outside 0..{}", p.max(t), self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.k + prediction]
    }

    fn truth_total(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    fn prediction_total(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }

    /// IoU of every label that occurs in the truth; `None` otherwise.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let t = self.truth_total(c);
                if t == 0 {
                    return None;
                }
                let tp = self.get(c, c);
                let union = t + self.prediction_total(c) - tp;
                Some(tp as f64 / union as f64)
            })
            .collect()
    }

    /// Unweighted mean IoU over labels present in the truth.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    /// Fraction of ground-truth object pixels given their correct class.
    pub fn recall(&self) -> f64 {
        let tp: u64 = (1..self.k).map(|c| self.get(c, c)).sum();
        let total: u64 = (1..self.k).map(|c| self.truth_total(c)).sum();
        ratio(tp, total)
    }

    /// Fraction of foreground-labelled pixels whose class is correct.
    pub fn precision(&self) -> f64 {
        let tp: u64 = (1..self.k).map(|c| self.get(c, c)).sum();
        let total: u64 = (1..self.k).map(|c| self.prediction_total(c)).sum();
        ratio(tp, total)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// mIoU of a single prediction against its truth.
pub fn miou(prediction: &[u8], truth: &[u8], n_classes: usize) -> Result<f64> {
    let mut c = Confusion::new(n_classes);
    c.add(prediction, truth)?;
    Ok(c.miou())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchMetrics {
    /// Background first, then one entry per class.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl BranchMetrics {
    fn from_confusion(c: &Confusion) -> Self {
        Self {
            per_class_iou: c.per_class_iou(),
            miou: c.miou(),
            precision: c.precision(),
            recall: c.recall(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub xi: f64,
    pub bg_threshold: f64,
    pub spotlight: BranchMetrics,
    /// Absent when the model has no compensation branch.
    pub compensation: Option<BranchMetrics>,
    pub weighted: BranchMetrics,
    pub loss_curve: Vec<EpochLoss>,
}

/// Normalized feature-resolution CAMs of one sample.
#[derive(Clone, Debug)]
pub struct CamOutputs {
    pub index: usize,
    pub spotlight: CamStack,
    pub compensation: Option<CamStack>,
}

const EVAL_BATCH: usize = 32;

fn mirror(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let w = s[s.len() - 1];
    Tensor::from_fn(s.to_vec(), |i| t.data()[i - i % w + (w - 1 - i % w)])
}

/// Runs both heads on the given samples and normalizes their CAMs with the
/// image-level labels.
pub fn cam_outputs(model: &AmrModel<f32>, config: &RunConfig, data: &Dataset, indices: &[usize]) -> Result<Vec<CamOutputs>> {
    if model.config.n_classes != data.config.n_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.config.n_classes, data.config.n_classes
        )));
    }
    let n = data.config.n_classes;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk)?;
        let (mut cam_s, mut cam_c) = raw_cams(model, config, &batch.images)?;
        if config.flip_average {
            let (fs, fc) = raw_cams(model, config, &mirror(&batch.images))?;
            cam_s = average(&cam_s, &mirror(&fs))?;
            cam_c = match (cam_c, fc) {
                (Some(a), Some(b)) => Some(average(&a, &mirror(&b))?),
                _ => None,
            };
        }
        let shape = cam_s.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let per = n * h * w;
        for (b, &index) in chunk.iter().enumerate() {
            let mask: Vec<bool> = batch.sample_labels(b).iter().map(|&l| l > 0.5).collect();
            let stack = |t: &Tensor<f32>| -> Result<CamStack> {
                let maps = Tensor::new(vec![n, h, w], t.data()[b * per..(b + 1) * per].to_vec())?;
                CamStack::raw(maps, mask.clone())?.normalize()
            };
            out.push(CamOutputs {
                index,
                spotlight: stack(&cam_s)?,
                compensation: cam_c.as_ref().map(stack).transpose()?,
            });
        }
    }
    Ok(out)
}

fn raw_cams(model: &AmrModel<f32>, config: &RunConfig, images: &Tensor<f32>) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let f = model.forward(&mut g, x, &config.modulation)?;
    Ok((g.value(f.cam_s).clone(), f.cam_c.map(|v| g.value(v).clone())))
}

fn average(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| 0.5 * (x + y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Scores precomputed CAMs at one `(xi, bg_threshold)` setting. The blend is
/// taken at feature resolution and then upsampled, which is the same map
/// as blending upsampled CAMs since bilinear resizing is linear.
pub fn evaluate_cams(outputs: &[CamOutputs], data: &Dataset, xi: f64, bg_threshold: f64) -> Result<MetricsReport> {
    let n = data.config.n_classes;
    let size = data.config.image_size;
    let mut conf_s = Confusion::new(n);
    let mut conf_c = Confusion::new(n);
    let mut conf_w = Confusion::new(n);
    let has_c = outputs.first().is_some_and(|o| o.compensation.is_some());
    for o in outputs {
        let truth = &data.samples[o.index].mask;
        let score = |stack: &CamStack, conf: &mut Confusion| -> Result<()> {
            let up = stack.upsample(size, size)?;
            conf.add(&pseudo_label(&up, bg_threshold).labels, truth)
        };
        score(&o.spotlight, &mut conf_s)?;
        match &o.compensation {
            Some(c) => {
                score(c, &mut conf_c)?;
                score(&recalibrate(&o.spotlight, c, xi)?, &mut conf_w)?;
            }
            None => score(&o.spotlight, &mut conf_w)?,
        }
    }
    Ok(MetricsReport {
        xi,
        bg_threshold,
        spotlight: BranchMetrics::from_confusion(&conf_s),
        compensation: has_c.then(|| BranchMetrics::from_confusion(&conf_c)),
        weighted: BranchMetrics::from_confusion(&conf_w),
        loss_curve: Vec::new(),
    })
}

/// Evaluates every sample of `data` at the configured `xi` and `bg_threshold`.
pub fn evaluate(model: &AmrModel<f32>, config: &RunConfig, data: &Dataset) -> Result<MetricsReport> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let outputs = cam_outputs(model, config, data, &indices)?;
    evaluate_cams(&outputs, data, config.xi, config.bg_threshold)
}
