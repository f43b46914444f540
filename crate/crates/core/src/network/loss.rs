//! Classification and cross-branch consistency losses.

use super::ForwardOut;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Var};

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean over all (sample, class) entries of the multi-label soft margin loss,
/// i.e. the batch mean of the per-sample class average.
pub(crate) fn soft_margin_forward<T: Real>(logits: &[T], labels: &[T], _classes: usize) -> T {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            y * softplus(-x) + (1.0 - y) * softplus(x)
        })
        .sum();
    T::from_f64(total / logits.len() as f64)
}

pub(crate) fn soft_margin_backward<T: Real>(logits: &[T], labels: &[T], _classes: usize, g: T) -> Vec<T> {
    let scale = g.as_f64() / logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let s = crate::numcore::ops::sigmoid_f64(x.as_f64());
            T::from_f64((s - y.as_f64()) * scale)
        })
        .collect()
}

/// Multi-label soft margin loss of `(B,N)` logits.
pub fn loss_cls<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[f32]) -> Result<Var> {
    g.soft_margin_loss(logits, labels)
}

/// The three recorded loss terms of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub all: Var,
    pub cls: Var,
    /// `None` when the consistency term is disabled; it then contributes 0.
    pub cps: Option<Var>,
}

/// Mean absolute difference between the normalized spotlight and compensation
/// CAMs over the maps of present classes. Gradients reach both branches.
pub fn loss_cps<T: Real>(g: &mut Graph<T>, cam_s: Var, cam_c: Var, labels: &[f32]) -> Result<Var> {
    let shape = g.shape(cam_s).to_vec();
    if g.shape(cam_c) != shape.as_slice() {
        return Err(Error::dim(format!(
            "CAM stacks differ in shape: {shape:?} vs {:?}",
            g.shape(cam_c)
        )));
    }
    let present: Vec<bool> = labels.iter().map(|&l| l > 0.5).collect();
    let maps = present.iter().filter(|&&p| p).count();
    let ns = g.normalize_cam(cam_s, &present)?;
    let nc = g.normalize_cam(cam_c, &present)?;
    let diff = g.sub(ns, nc)?;
    let abs = g.abs(diff)?;
    let total = g.sum(abs)?;
    let denom = (maps * shape[2] * shape[3]).max(1);
    g.scale(total, 1.0 / denom as f64)
}

/// `L_all = L_cls + L_cps` with `L_cls` averaged over the active heads.
pub fn loss_total<T: Real>(g: &mut Graph<T>, out: &ForwardOut, labels: &[f32], use_cps: bool) -> Result<LossVars> {
    let ls = loss_cls(g, out.logits_s, labels)?;
    let cls = match out.logits_c {
        Some(lc) => {
            let lc = loss_cls(g, lc, labels)?;
            let both = g.add(ls, lc)?;
            g.scale(both, 0.5)?
        }
        None => ls,
    };
    let cps = match (use_cps, out.cam_c) {
        (true, Some(cam_c)) => Some(loss_cps(g, out.cam_s, cam_c, labels)?),
        (true, None) => {
            return Err(Error::Config(
                "consistency loss needs the compensation branch".into(),
            ))
        }
        (false, _) => None,
    };
    let all = match cps {
        Some(c) => g.add(cls, c)?,
        None => cls,
    };
    Ok(LossVars { all, cls, cps })
}
