//! Attention modulation module: channel attention followed by spatial
//! attention, each redistributed through a [`ModulationFn`].

use crate::error::{Error, Result};
use crate::modulation::ModulationFn;
use crate::numcore::{Graph, PoolMode, Real, Tensor, Var};

pub const DEFAULT_CHANNEL_KERNEL: usize = 5;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Convolution kernels of the module. A missing kernel disables that stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AmmParams<T = f32> {
    /// 1-d kernel over the channel axis, shape `(k_c)`.
    pub channel: Option<Tensor<T>>,
    /// Single-channel 2-d kernel, shape `(1,1,k_s,k_s)`.
    pub spatial: Option<Tensor<T>>,
}

impl<T: Real> AmmParams<T> {
    /// Delta kernels: the convolutions start out as the identity.
    pub fn delta(channel_kernel: Option<usize>, spatial_kernel: Option<usize>) -> Result<Self> {
        for k in [channel_kernel, spatial_kernel].into_iter().flatten() {
            if k % 2 == 0 {
                return Err(Error::Argument(format!("kernel size {k} must be odd")));
            }
        }
        Ok(Self {
            channel: channel_kernel.map(|k| Tensor::from_fn(vec![k], |i| delta_at(i, k / 2))),
            spatial: spatial_kernel
                .map(|k| Tensor::from_fn(vec![1, 1, k, k], |i| delta_at(i, (k / 2) * k + k / 2))),
        })
    }

    pub fn num_params(&self) -> usize {
        self.channel.as_ref().map_or(0, Tensor::numel) + self.spatial.as_ref().map_or(0, Tensor::numel)
    }
}

fn delta_at<T: Real>(i: usize, centre: usize) -> T {
    if i == centre {
        T::one()
    } else {
        T::zero()
    }
}

/// `F_c = A_c ⊙ F` with `A_c = G(conv1d(spatial_avg(F)))`.
/// Returns `(F_c, A_c)` with `A_c` shaped `(B,C)`.
pub fn channel_amm<T: Real>(g: &mut Graph<T>, features: Var, kernel: Var, f: &ModulationFn) -> Result<(Var, Var)> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("channel AMM expects (B,C,H,W), got {shape:?}")));
    }
    let k = g.shape(kernel).iter().product::<usize>();
    if shape[1] < k {
        return Err(Error::dim(format!(
            "channel AMM over {} channels needs at least the kernel size {k}",
            shape[1]
        )));
    }
    let pooled = g.pool(features, PoolMode::SpatialAvg)?;
    let mixed = g.channel_conv(pooled, kernel)?;
    let attention = g.modulate(mixed, f)?;
    let out = g.mul(attention, features)?;
    let flat = g.reshape(attention, vec![shape[0], shape[1]])?;
    Ok((out, flat))
}

/// `F_s = A_s ⊙ F` with `A_s = G(conv2d(channel_avg(F)))`.
/// Returns `(F_s, A_s)` with `A_s` shaped `(B,1,H,W)`.
pub fn spatial_amm<T: Real>(g: &mut Graph<T>, features: Var, kernel: Var, f: &ModulationFn) -> Result<(Var, Var)> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(format!("spatial AMM expects (B,C,H,W), got {shape:?}")));
    }
    let ks = g.shape(kernel).to_vec();
    if ks.len() != 4 || ks[0] != 1 || ks[1] != 1 || ks[2] != ks[3] || ks[2] % 2 == 0 {
        return Err(Error::dim(format!("spatial AMM kernel must be (1,1,k,k) with odd k, got {ks:?}")));
    }
    if shape[2] < ks[2] || shape[3] < ks[3] {
        return Err(Error::dim(format!(
            "spatial extent {}x{} smaller than kernel {}",
            shape[2], shape[3], ks[2]
        )));
    }
    let pooled = g.pool(features, PoolMode::ChannelAvg)?;
    let mixed = g.conv2d(pooled, kernel, 1, (ks[2] - 1) / 2)?;
    let attention = g.modulate(mixed, f)?;
    let out = g.mul(attention, features)?;
    Ok((out, attention))
}

/// Graph handles of the module's kernels.
#[derive(Clone, Copy, Debug, Default)]
pub struct AmmVars {
    pub channel: Option<Var>,
    pub spatial: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct AmmOut {
    pub features: Var,
    pub channel_attention: Option<Var>,
    pub spatial_attention: Option<Var>,
}

/// Channel stage first, then spatial stage, on the channel stage's output.
pub fn amm_forward<T: Real>(g: &mut Graph<T>, features: Var, params: AmmVars, f: &ModulationFn) -> Result<AmmOut> {
    let mut x = features;
    let mut channel_attention = None;
    let mut spatial_attention = None;
    if let Some(k) = params.channel {
        let (out, att) = channel_amm(g, x, k, f)?;
        x = out;
        channel_attention = Some(att);
    }
    if let Some(k) = params.spatial {
        let (out, att) = spatial_amm(g, x, k, f)?;
        x = out;
        spatial_attention = Some(att);
    }
    Ok(AmmOut {
        features: x,
        channel_attention,
        spatial_attention,
    })
}

/// Eager evaluation of the module on a tensor.
pub struct AmmResult<T> {
    pub features: Tensor<T>,
    pub channel_attention: Option<Tensor<T>>,
    pub spatial_attention: Option<Tensor<T>>,
}

pub fn apply<T: Real>(features: &Tensor<T>, params: &AmmParams<T>, f: &ModulationFn) -> Result<AmmResult<T>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let vars = AmmVars {
        channel: params.channel.as_ref().map(|k| g.constant(k.clone())),
        spatial: params.spatial.as_ref().map(|k| g.constant(k.clone())),
    };
    let out = amm_forward(&mut g, x, vars, f)?;
    Ok(AmmResult {
        features: g.value(out.features).clone(),
        channel_attention: out.channel_attention.map(|v| g.value(v).clone()),
        spatial_attention: out.spatial_attention.map(|v| g.value(v).clone()),
    })
}
