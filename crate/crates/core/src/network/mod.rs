//! The dual-branch classifier: a shared backbone feeding a plain spotlight
//! head and an AMM-equipped compensation head, both bias-free so that each
//! head's CAM is exactly its weight matrix applied to the features it pools.

pub mod cam;
mod checkpoint;
pub mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::Checkpoint;
pub use loss::{loss_cls, loss_cps, loss_total, LossVars};

use crate::amm::{self, AmmParams, AmmVars, DEFAULT_CHANNEL_KERNEL, DEFAULT_SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::modulation::ModulationFn;
use crate::numcore::{Graph, PoolMode, Real, Tensor, Var};

pub const MIN_IMAGE_SIZE: usize = 32;
pub const OUTPUT_STRIDE: usize = 8;
/// Pixels are standardized with these constants before the first conv.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;
/// Head weights are drawn with standard deviation `HEAD_GAIN / sqrt(C_feat)`.
pub const HEAD_GAIN: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub image_size: usize,
    /// Output channels of the four backbone blocks; the last is `C_feat`.
    pub widths: [usize; 4],
    pub channel_kernel: usize,
    pub spatial_kernel: usize,
    pub use_amm_c: bool,
    pub use_amm_s: bool,
    /// Whether the compensation head exists at all.
    pub compensation: bool,
}

impl ModelConfig {
    pub fn new(n_classes: usize, image_size: usize) -> Self {
        let feat = feature_extent(image_size);
        // largest odd kernel that fits the feature map, capped at the default
        let fit = if feat % 2 == 1 { feat } else { feat - 1 };
        Self {
            n_classes,
            image_size,
            widths: [16, 32, 64, 64],
            channel_kernel: DEFAULT_CHANNEL_KERNEL,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL.min(fit.max(1)),
            use_amm_c: true,
            use_amm_s: true,
            compensation: true,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[3]
    }

    pub fn feature_extent(&self) -> usize {
        feature_extent(self.image_size)
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::dim(format!(
                "image size {} below the minimum {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if (self.use_amm_c || self.use_amm_s) && !self.compensation {
            return Err(Error::Config("AMM requires the compensation branch".into()));
        }
        if self.use_amm_c && self.feature_channels() < self.channel_kernel {
            return Err(Error::dim("fewer feature channels than the channel kernel"));
        }
        if self.use_amm_s && self.feature_extent() < self.spatial_kernel {
            return Err(Error::dim("feature map smaller than the spatial kernel"));
        }
        Ok(())
    }
}

/// Spatial extent after three ceil-mode halvings.
pub fn feature_extent(image_size: usize) -> usize {
    image_size.div_ceil(2).div_ceil(2).div_ceil(2)
}

/// Four 3x3 conv blocks; the first three end in a 2x2 average downsample.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T = f32> {
    pub convs: [Tensor<T>; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmrModel<T = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    /// `(N, C_feat)`
    pub spotlight_head: Tensor<T>,
    pub amm: AmmParams<T>,
    /// `(N, C_feat)`, present iff the compensation branch is enabled.
    pub compensation_head: Option<Tensor<T>>,
}

/// Graph handles produced by one forward pass. Every CAM stack is
/// `(B, N, H', W')` and un-normalized.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub logits_s: Var,
    pub logits_c: Option<Var>,
    pub cam_s: Var,
    pub cam_c: Option<Var>,
    pub features: Var,
    pub compensated_features: Option<Var>,
    pub channel_attention: Option<Var>,
    pub spatial_attention: Option<Var>,
    /// One handle per parameter, in [`AmrModel::named_params`] order.
    pub params: Vec<Var>,
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

impl<T: Real> AmrModel<T> {
    /// He-initialized backbone, one random head copied into both branches,
    /// and near-delta AMM kernels.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let convs = config.widths.map(|out_ch| {
            let fan_in = in_ch * 9;
            let t = normal_tensor(&mut rng, vec![out_ch, in_ch, 3, 3], (2.0 / fan_in as f64).sqrt());
            in_ch = out_ch;
            t
        });
        let c = config.feature_channels();
        let head_std = HEAD_GAIN / (c as f64).sqrt();
        let spotlight_head = normal_tensor(&mut rng, vec![config.n_classes, c], head_std);
        // both heads start from the same weights
        let compensation_head = config.compensation.then(|| spotlight_head.clone());
        let mut amm = AmmParams::delta(
            config.use_amm_c.then_some(config.channel_kernel),
            config.use_amm_s.then_some(config.spatial_kernel),
        )?;
        for k in [amm.channel.as_mut(), amm.spatial.as_mut()].into_iter().flatten() {
            for v in k.data_mut() {
                *v = *v + T::from_f64(rng.random_range(-0.01..0.01));
            }
        }
        Ok(Self {
            config,
            backbone: Backbone { convs },
            spotlight_head,
            amm,
            compensation_head,
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .backbone
            .convs
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("backbone.conv{}", i + 1), t))
            .collect();
        out.push(("spotlight.weight".into(), &self.spotlight_head));
        if let Some(t) = &self.amm.channel {
            out.push(("amm.channel.weight".into(), t));
        }
        if let Some(t) = &self.amm.spatial {
            out.push(("amm.spatial.weight".into(), t));
        }
        if let Some(t) = &self.compensation_head {
            out.push(("compensation.weight".into(), t));
        }
        out
    }

    /// Mutable parameters, same order as [`AmrModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.backbone.convs.iter_mut().collect();
        out.push(&mut self.spotlight_head);
        out.extend(self.amm.channel.as_mut());
        out.extend(self.amm.spatial.as_mut());
        out.extend(self.compensation_head.as_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn num_amm_params(&self) -> usize {
        self.amm.num_params()
    }

    pub fn cast<U: Real>(&self) -> AmrModel<U> {
        AmrModel {
            config: self.config.clone(),
            backbone: Backbone {
                convs: self.backbone.convs.each_ref().map(|t| t.cast()),
            },
            spotlight_head: self.spotlight_head.cast(),
            amm: AmmParams {
                channel: self.amm.channel.as_ref().map(Tensor::cast),
                spatial: self.amm.spatial.as_ref().map(Tensor::cast),
            },
            compensation_head: self.compensation_head.as_ref().map(Tensor::cast),
        }
    }

    /// Runs both branches on `(B,3,S,S)` images. Parameters enter the graph as
    /// leaves that require gradients.
    pub fn forward(&self, g: &mut Graph<T>, images: Var, f: &ModulationFn) -> Result<ForwardOut> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dim(format!("expected (B,3,H,W) images, got {shape:?}")));
        }
        if shape[2] < MIN_IMAGE_SIZE || shape[3] < MIN_IMAGE_SIZE {
            return Err(Error::dim(format!(
                "images of {}x{} are below the minimum {MIN_IMAGE_SIZE}",
                shape[2], shape[3]
            )));
        }
        let params: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let mut it = params.iter().copied();
        let convs: Vec<Var> = it.by_ref().take(4).collect();
        let w_s = it.next().expect("spotlight head");
        let amm_vars = AmmVars {
            channel: self.amm.channel.as_ref().map(|_| it.next().expect("channel kernel")),
            spatial: self.amm.spatial.as_ref().map(|_| it.next().expect("spatial kernel")),
        };
        let w_c = self.compensation_head.as_ref().map(|_| it.next().expect("compensation head"));

        let mean = g.constant(Tensor::full(vec![1, 1, 1, 1], T::from_f64(INPUT_MEAN)));
        let centred = g.sub(images, mean)?;
        let mut x = g.scale(centred, 1.0 / INPUT_STD)?;
        for (i, &k) in convs.iter().enumerate() {
            x = g.conv2d(x, k, 1, 1)?;
            x = g.relu(x)?;
            if i < 3 {
                x = g.downsample2(x)?;
            }
        }
        let features = x;

        let (logits_s, cam_s) = head(g, features, w_s)?;
        let mut out = ForwardOut {
            logits_s,
            logits_c: None,
            cam_s,
            cam_c: None,
            features,
            compensated_features: None,
            channel_attention: None,
            spatial_attention: None,
            params,
        };
        if let Some(w_c) = w_c {
            let modulated = amm::amm_forward(g, features, amm_vars, f)?;
            let (logits_c, cam_c) = head(g, modulated.features, w_c)?;
            out.logits_c = Some(logits_c);
            out.cam_c = Some(cam_c);
            out.compensated_features = Some(modulated.features);
            out.channel_attention = modulated.channel_attention;
            out.spatial_attention = modulated.spatial_attention;
        }
        Ok(out)
    }

    /// Copies gradients from a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, out: &ForwardOut) -> Result<()> {
        let vars = out.params.clone();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            let grad = g.take_grad(v).unwrap_or_else(|| vec![T::zero(); p.numel()]);
            p.set_grad(grad)?;
        }
        Ok(())
    }
}

/// GAP logits and the CAM stack `sum_c w[n,c] F[c]` for one bias-free head.
fn head<T: Real>(g: &mut Graph<T>, features: Var, weight: Var) -> Result<(Var, Var)> {
    let pooled = g.pool(features, PoolMode::GlobalAvg)?;
    let logits = g.linear(pooled, weight)?;
    let ws = g.shape(weight).to_vec();
    let kernel = g.reshape(weight, vec![ws[0], ws[1], 1, 1])?;
    let cam = g.conv2d(features, kernel, 1, 0)?;
    Ok((logits, cam))
}

/// Normalizes a `(B,N,H,W)` CAM tensor eagerly (relu, label mask, max-divide).
pub fn normalize_cam<T: Real>(cams: &Tensor<T>, labels: &[f32]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(cams.clone());
    let present: Vec<bool> = labels.iter().map(|&l| l > 0.5).collect();
    let y = g.normalize_cam(x, &present)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::new(3, 64);
        c.widths = [4, 6, 8, 8];
        c
    }

    fn images(b: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![b, 3, s, s], |i| ((i * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn cam_shape_contract() {
        let model = AmrModel::<f64>::new(ModelConfig::new(5, 64), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2, 64));
        let out = model.forward(&mut g, x, &ModulationFn::gaussian()).unwrap();
        assert_eq!(g.shape(out.cam_s), &[2, 5, 8, 8]);
        assert_eq!(g.shape(out.cam_c.unwrap()), &[2, 5, 8, 8]);
        assert_eq!(g.shape(out.logits_s), &[2, 5]);
    }

    #[test]
    fn logits_are_cam_means() {
        let model = AmrModel::<f64>::new(small_config(), 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2, 64));
        let out = model.forward(&mut g, x, &ModulationFn::gaussian()).unwrap();
        for (cam, logits) in [(out.cam_s, out.logits_s), (out.cam_c.unwrap(), out.logits_c.unwrap())] {
            let cam = g.value(cam).data();
            for (m, &l) in g.value(logits).data().iter().enumerate() {
                let mean: f64 = cam[m * 64..(m + 1) * 64].iter().sum::<f64>() / 64.0;
                assert!((mean - l).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selector_head_reproduces_feature_channel() {
        let mut model = AmrModel::<f64>::new(small_config(), 3).unwrap();
        model.spotlight_head = Tensor::from_fn(vec![3, 8], |i| if i == 2 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let x = g.constant(images(1, 64));
        let out = model.forward(&mut g, x, &ModulationFn::gaussian()).unwrap();
        assert_eq!(&g.value(out.cam_s).data()[..64], &g.value(out.features).data()[2 * 64..3 * 64]);
    }

    #[test]
    fn uniform_attention_makes_branches_agree() {
        // A threshold below every value yields attention 1 everywhere.
        let mut model = AmrModel::<f64>::new(small_config(), 4).unwrap();
        model.compensation_head = Some(model.spotlight_head.clone());
        let f = ModulationFn::threshold(crate::modulation::ThresholdLevel::Fixed(-1e9));
        let mut g = Graph::new();
        let x = g.constant(images(2, 64));
        let out = model.forward(&mut g, x, &f).unwrap();
        assert_eq!(g.value(out.logits_s).data(), g.value(out.logits_c.unwrap()).data());
    }

    #[test]
    fn baseline_has_no_amm_parameters() {
        let mut c = small_config();
        c.use_amm_c = false;
        c.use_amm_s = false;
        c.compensation = false;
        let model = AmrModel::<f32>::new(c, 5).unwrap();
        assert_eq!(model.num_amm_params(), 0);
        assert_eq!(model.named_params().len(), 5);
    }

    #[test]
    fn rejects_small_images() {
        let mut c = small_config();
        c.image_size = 16;
        assert!(AmrModel::<f32>::new(c, 0).is_err());
        let model = AmrModel::<f64>::new(small_config(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(1, 24));
        assert!(matches!(
            model.forward(&mut g, x, &ModulationFn::gaussian()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn small_images_shrink_spatial_kernel() {
        assert_eq!(ModelConfig::new(5, 64).spatial_kernel, 7);
        assert_eq!(ModelConfig::new(5, 40).spatial_kernel, 5);
        assert_eq!(feature_extent(36), 5);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = AmrModel::<f32>::new(small_config(), 9).unwrap();
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(images(2, 64).cast());
            let out = model.forward(&mut g, x, &ModulationFn::gaussian()).unwrap();
            (g.value(out.cam_s).clone(), g.value(out.cam_c.unwrap()).clone())
        };
        assert_eq!(run(), run());
    }
}
