//! PGM/PPM writers and CAM heatmap export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::harness::eval::{cam_outputs, CamOutputs};
use crate::harness::RunConfig;
use crate::network::AmrModel;
use crate::recalib::recalibrate;
use crate::synthdata::Dataset;

/// Linear 8-bit quantization of a value in [0,1]; out-of-range values clamp.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(width: usize, height: usize) -> Result<(u32, u32)> {
    let w = u32::try_from(width).map_err(|_| Error::Argument("image too wide".into()))?;
    let h = u32::try_from(height).map_err(|_| Error::Argument("image too tall".into()))?;
    Ok((w, h))
}

/// Binary 8-bit PGM.
pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let (w, h) = dims(width, height)?;
    if pixels.len() != width * height {
        return Err(Error::dim(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    encode(path, pixels, w, h, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Binary PPM from a channel-major `(3,H,W)` buffer in [0,1].
pub fn write_rgb(path: &Path, width: usize, height: usize, chw: &[f32]) -> Result<()> {
    let (w, h) = dims(width, height)?;
    let px = width * height;
    if chw.len() != 3 * px {
        return Err(Error::dim(format!("{} values for a 3x{height}x{width} image", chw.len())));
    }
    let mut raw = Vec::with_capacity(3 * px);
    for i in 0..px {
        for c in 0..3 {
            raw.push(quantize(chw[c * px + i]));
        }
    }
    encode(path, &raw, w, h, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

fn encode(path: &Path, raw: &[u8], w: u32, h: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out).with_subtype(subtype).write_image(raw, w, h, color)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `sample<i>_input.ppm` and, for every present class `n`,
/// `sample<i>_class<n>_{spotlight,compensation,weighted}.pgm` at image
/// resolution. Without a compensation branch the spotlight maps stand in for
/// the compensation maps.
pub fn export_heatmaps(
    model: &AmrModel<f32>,
    config: &RunConfig,
    data: &Dataset,
    indices: &[usize],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Argument(format!("sample index {bad} out of range 0..{}", data.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = data.config.image_size;
    let mut written = Vec::new();
    for &i in indices {
        let sample = &data.samples[i];
        let path = dir.join(format!("sample{i}_input.ppm"));
        write_rgb(&path, size, size, &sample.image)?;
        written.push(path);

        let CamOutputs { spotlight, compensation, .. } =
            cam_outputs(model, config, data, &[i])?.pop().expect("one sample");
        let s = spotlight.upsample(size, size)?;
        let c = match compensation {
            Some(c) => c.upsample(size, size)?,
            None => s.clone(),
        };
        let w = recalibrate(&s, &c, config.xi)?;
        for n in (0..s.n_classes()).filter(|&n| s.class_mask[n]) {
            for (tag, stack) in [("spotlight", &s), ("compensation", &c), ("weighted", &w)] {
                let path = dir.join(format!("sample{i}_class{n}_{tag}.pgm"));
                let pixels: Vec<u8> = stack.map(n).iter().map(|&v| quantize(v)).collect();
                write_gray(&path, size, size, &pixels)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
