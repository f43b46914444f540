//! Weighted CAMs and the pseudo labels derived from them.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network;
use crate::numcore::Tensor;

pub const DEFAULT_XI: f64 = 0.5;
pub const DEFAULT_BG_THRESHOLD: f64 = 0.25;

/// Per-class activation maps of one image, `(N,H,W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamStack {
    pub maps: Tensor<f32>,
    pub normalized: bool,
    pub class_mask: Vec<bool>,
}

impl CamStack {
    /// Raw `(N,H,W)` maps straight from a head.
    pub fn raw(maps: Tensor<f32>, class_mask: Vec<bool>) -> Result<Self> {
        if maps.rank() != 3 || maps.shape()[0] != class_mask.len() {
            return Err(Error::dim(format!(
                "CAM stack {:?} with {} class flags",
                maps.shape(),
                class_mask.len()
            )));
        }
        Ok(Self {
            maps,
            normalized: false,
            class_mask,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    pub fn map(&self, class: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.maps.data()[class * hw..(class + 1) * hw]
    }

    /// Relu, absent-class masking and per-map max normalization.
    pub fn normalize(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let (n, h, w) = (self.n_classes(), self.height(), self.width());
        let as4 = self.maps.reshape(vec![1, n, h, w])?;
        let labels: Vec<f32> = self.class_mask.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        let normed = network::normalize_cam(&as4, &labels)?;
        Ok(Self {
            maps: normed.reshape(vec![n, h, w])?,
            normalized: true,
            class_mask: self.class_mask.clone(),
        })
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Self> {
        let (n, h, w) = (self.n_classes(), self.height(), self.width());
        let mut out = Vec::with_capacity(n * height * width);
        let ys: Vec<_> = (0..height).map(|y| source_taps(y, h, height)).collect();
        let xs: Vec<_> = (0..width).map(|x| source_taps(x, w, width)).collect();
        for c in 0..n {
            let src = self.map(c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
                    let bottom = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
                    out.push((top * (1.0 - fy) + bottom * fy) as f32);
                }
            }
        }
        Ok(Self {
            maps: Tensor::new(vec![n, height, width], out)?,
            normalized: self.normalized,
            class_mask: self.class_mask.clone(),
        })
    }
}

fn source_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// `M_W = xi * M_S + (1 - xi) * M_C`.
pub fn recalibrate(cam_s: &CamStack, cam_c: &CamStack, xi: f64) -> Result<CamStack> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Argument(format!("recalibration coefficient {xi} outside [0,1]")));
    }
    if cam_s.maps.shape() != cam_c.maps.shape() || cam_s.class_mask != cam_c.class_mask {
        return Err(Error::dim(format!(
            "cannot blend CAM stacks {:?} and {:?}",
            cam_s.maps.shape(),
            cam_c.maps.shape()
        )));
    }
    if !cam_s.normalized || !cam_c.normalized {
        return Err(Error::Argument("recalibration expects normalized CAMs".into()));
    }
    let data = cam_s
        .maps
        .data()
        .iter()
        .zip(cam_c.maps.data())
        .map(|(&s, &c)| (xi * s as f64 + (1.0 - xi) * c as f64) as f32)
        .collect();
    Ok(CamStack {
        maps: Tensor::new(cam_s.maps.shape().to_vec(), data)?,
        normalized: true,
        class_mask: cam_s.class_mask.clone(),
    })
}

/// Per-pixel class index: 0 is background, `n + 1` is class `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

/// Argmax over classes where the winning score exceeds `bg_threshold`;
/// the lowest class index wins ties.
pub fn pseudo_label(cam: &CamStack, bg_threshold: f64) -> PseudoLabel {
    let (n, h, w) = (cam.n_classes(), cam.height(), cam.width());
    let mut labels = vec![0u8; h * w];
    for (p, out) in labels.iter_mut().enumerate() {
        let mut best: Option<(usize, f32)> = None;
        for c in 0..n {
            let v = cam.map(c)[p];
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, v)) = best {
            if v as f64 > bg_threshold {
                *out = (c + 1) as u8;
            }
        }
    }
    PseudoLabel {
        height: h,
        width: w,
        labels,
    }
}

impl PseudoLabel {
    /// 8-bit binary PGM holding the class index of each pixel.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::harness::export::write_gray(path, self.width, self.height, &self.labels)
    }
}
