//! Deterministic synthetic multi-label images with part-structured objects.
//!
//! Every object is a large body (rectangle or ellipse) painted with a texture
//! shared by all classes, carrying a small signature patch whose colour and
//! stripe direction identify the class. Classification can therefore be
//! solved from the signature alone, while the segmentation mask covers the
//! whole body. Backgrounds use a third shared texture.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Upper bound on signature pixels as a fraction of the object's visible pixels.
pub const MAX_SIGNATURE_FRACTION: f64 = 0.10;
const BODY_AREA: (f64, f64) = (0.15, 0.30);
const SIGNATURE_AREA: (f64, f64) = (0.07, 0.10);
const PLACEMENT_RETRIES: usize = 64;
const SAMPLE_RETRIES: u64 = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub max_objects_per_image: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            image_size: 64,
            train_samples: 2000,
            val_samples: 500,
            max_objects_per_image: 2,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size {} < 32", self.image_size)));
        }
        if self.n_classes == 0 || self.n_classes > 250 {
            return Err(Error::Config(format!("n_classes {} out of range", self.n_classes)));
        }
        if self.max_objects_per_image == 0 || self.max_objects_per_image > self.n_classes {
            return Err(Error::Config(
                "max_objects_per_image must be in 1..=n_classes".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Val => 0x7661_6c,
        }
    }
}

/// One generated image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3,S,S)` channel-major, values in [0,1].
    pub image: Vec<f32>,
    /// Multi-hot, one entry per class.
    pub labels: Vec<f32>,
    /// Per pixel: 0 background, `n + 1` for class `n`.
    pub mask: Vec<u8>,
    /// Per pixel: `n + 1` where the signature of class `n` is visible.
    pub signature: Vec<u8>,
}

/// A stack of samples ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub images: Tensor<f32>,
    /// `(B,N)` multi-hot, row-major.
    pub labels: Vec<f32>,
    /// `(B,S,S)` ground-truth masks; evaluation only.
    pub masks: Vec<u8>,
    pub n_classes: usize,
    pub image_size: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_labels(&self, b: usize) -> &[f32] {
        &self.labels[b * self.n_classes..(b + 1) * self.n_classes]
    }

    pub fn sample_mask(&self, b: usize) -> &[u8] {
        let px = self.image_size * self.image_size;
        &self.masks[b * px..(b + 1) * px]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, split: Split) -> Result<Self> {
        config.validate()?;
        let count = match split {
            Split::Train => config.train_samples,
            Split::Val => config.val_samples,
        };
        let samples = (0..count)
            .map(|i| generate_sample(config, split, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            split,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SampleBatch> {
        batch_of(indices.iter().map(|&i| &self.samples[i]), &self.config)
    }

    /// Consecutive batches in index order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<SampleBatch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Writes `NNNNN.ppm`, `NNNNN_mask.pgm` and a `labels.txt` manifest with
    /// one line `index class_0 ... class_{N-1}` per sample.
    pub fn write_cache(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = self.config.image_size;
        let manifest_path = dir.join("labels.txt");
        let mut manifest = BufWriter::new(File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
        for (i, sample) in self.samples.iter().enumerate() {
            crate::harness::export::write_rgb(&dir.join(format!("{i:05}.ppm")), s, s, &sample.image)?;
            crate::harness::export::write_gray(&dir.join(format!("{i:05}_mask.pgm")), s, s, &sample.mask)?;
            let mut line = i.to_string();
            for l in &sample.labels {
                line.push_str(if *l > 0.5 { " 1" } else { " 0" });
            }
            writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
        }
        manifest.flush().map_err(|e| Error::io(&manifest_path, e))
    }
}

/// Train and validation splits of `config`.
pub fn generate(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    Ok((Dataset::generate(config, Split::Train)?, Dataset::generate(config, Split::Val)?))
}

pub fn batch_of<'a>(samples: impl IntoIterator<Item = &'a Sample>, config: &DatasetConfig) -> Result<SampleBatch> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut count = 0;
    for s in samples {
        images.extend_from_slice(&s.image);
        labels.extend_from_slice(&s.labels);
        masks.extend_from_slice(&s.mask);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let sz = config.image_size;
    Ok(SampleBatch {
        images: Tensor::new(vec![count, 3, sz, sz], images)?,
        labels,
        masks,
        n_classes: config.n_classes,
        image_size: sz,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_seed(config: &DatasetConfig, split: Split, index: usize, attempt: u64) -> u64 {
    splitmix(splitmix(splitmix(config.seed ^ split.tag()) ^ index as u64) ^ attempt)
}

/// Pure function of `(config, split, index)`. Infeasible layouts are
/// redrawn from a fresh derived seed a bounded number of times.
pub fn generate_sample(config: &DatasetConfig, split: Split, index: usize) -> Result<Sample> {
    let mut last = None;
    for attempt in 0..SAMPLE_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config, split, index, attempt));
        match try_generate(config, &mut rng) {
            Ok(s) => return Ok(s),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generation("no attempts made".into())))
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Body {
    shape: Shape,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Body {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self.shape {
            Shape::Rect => px >= self.x0 && px < self.x0 + self.w && py >= self.y0 && py < self.y0 + self.h,
            Shape::Ellipse => {
                let dx = (px - (self.x0 + self.w / 2.0)) / (self.w / 2.0);
                let dy = (py - (self.y0 + self.h / 2.0)) / (self.h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

struct Placed {
    class: usize,
    body: Vec<bool>,
    sig: Vec<bool>,
    sig_area: usize,
}

fn try_generate(config: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let s = config.image_size;
    let px = s * s;
    let n_objects = rng.random_range(1..=config.max_objects_per_image);
    let mut classes: Vec<usize> = (0..config.n_classes).collect();
    for i in 0..n_objects {
        let j = rng.random_range(i..classes.len());
        classes.swap(i, j);
    }
    classes.truncate(n_objects);

    let mut placed: Vec<Placed> = Vec::new();
    for &class in &classes {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            if let Some(p) = place_object(class, s, rng) {
                if compatible(&placed, &p) {
                    ok = Some(p);
                    break;
                }
            }
        }
        placed.push(ok.ok_or_else(|| Error::Generation(format!("could not place class {class}")))?);
    }

    let mut mask = vec![0u8; px];
    let mut signature = vec![0u8; px];
    for p in &placed {
        for i in 0..px {
            if p.body[i] {
                mask[i] = (p.class + 1) as u8;
                signature[i] = if p.sig[i] { (p.class + 1) as u8 } else { 0 };
            }
        }
    }

    let mut labels = vec![0.0f32; config.n_classes];
    for &m in &mask {
        if m > 0 {
            labels[m as usize - 1] = 1.0;
        }
    }

    let mut image = vec![0.0f32; 3 * px];
    let bg = BackgroundTexture::random(rng);
    let phase = (rng.random_range(0..4usize), rng.random_range(0..4usize));
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let rgb = if signature[i] > 0 {
                signature_color(signature[i] as usize - 1, config.n_classes, x, y)
            } else if mask[i] > 0 {
                body_color(x + phase.0, y + phase.1)
            } else {
                bg.color(x, y)
            };
            for c in 0..3 {
                image[c * px + i] = rgb[c];
            }
        }
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut image {
            *v = (*v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample {
        image,
        labels,
        mask,
        signature,
    })
}

fn place_object(class: usize, s: usize, rng: &mut ChaCha8Rng) -> Option<Placed> {
    let sf = s as f64;
    let area = rng.random_range(BODY_AREA.0..BODY_AREA.1) * sf * sf;
    let aspect = rng.random_range(0.7..1.4);
    let shape = if rng.random_bool(0.5) { Shape::Rect } else { Shape::Ellipse };
    let box_area = match shape {
        Shape::Rect => area,
        Shape::Ellipse => area * 4.0 / std::f64::consts::PI,
    };
    let w = (box_area * aspect).sqrt();
    let h = box_area / w;
    if w > sf - 2.0 || h > sf - 2.0 {
        return None;
    }
    let body = Body {
        shape,
        x0: rng.random_range(1.0..sf - w - 1.0),
        y0: rng.random_range(1.0..sf - h - 1.0),
        w,
        h,
    };
    let mut body_mask = vec![false; s * s];
    let mut body_px = 0usize;
    for y in 0..s {
        for x in 0..s {
            if body.contains(x, y) {
                body_mask[y * s + x] = true;
                body_px += 1;
            }
        }
    }
    let side = ((rng.random_range(SIGNATURE_AREA.0..SIGNATURE_AREA.1) * body_px as f64).sqrt().floor() as usize).max(3);
    if (side * side) as f64 > MAX_SIGNATURE_FRACTION * body_px as f64 {
        return None;
    }
    for _ in 0..PLACEMENT_RETRIES {
        let sx = rng.random_range(body.x0.floor() as usize..=(body.x0 + body.w).ceil() as usize);
        let sy = rng.random_range(body.y0.floor() as usize..=(body.y0 + body.h).ceil() as usize);
        if sx + side > s || sy + side > s {
            continue;
        }
        let inside = (sy..sy + side).all(|y| (sx..sx + side).all(|x| body_mask[y * s + x]));
        if inside {
            let mut sig = vec![false; s * s];
            for y in sy..sy + side {
                for x in sx..sx + side {
                    sig[y * s + x] = true;
                }
            }
            return Some(Placed {
                class,
                body: body_mask,
                sig,
                sig_area: side * side,
            });
        }
    }
    None
}

/// A later object may occlude earlier bodies but never their signatures, and
/// must leave every earlier object large enough for its signature bound.
fn compatible(earlier: &[Placed], new: &Placed) -> bool {
    earlier.iter().all(|p| {
        if p.sig.iter().zip(&new.body).any(|(&s, &b)| s && b) {
            return false;
        }
        let visible = p.body.iter().zip(&new.body).filter(|&(&b, &o)| b && !o).count();
        p.sig_area as f64 <= MAX_SIGNATURE_FRACTION * visible as f64
    })
}

struct BackgroundTexture {
    dir: (f64, f64),
    phase: f64,
}

impl BackgroundTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            dir: (theta.cos(), theta.sin()),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn color(&self, x: usize, y: usize) -> [f32; 3] {
        let t = (x as f64 * self.dir.0 + y as f64 * self.dir.1) * std::f64::consts::TAU / 16.0 + self.phase;
        let v = 0.04 * t.sin();
        [(0.47 + v) as f32, (0.51 + v) as f32, (0.49 + v) as f32]
    }
}

fn body_color(x: usize, y: usize) -> [f32; 3] {
    if ((x / 4) + (y / 4)) % 2 == 0 {
        [0.60, 0.52, 0.42]
    } else {
        [0.50, 0.43, 0.34]
    }
}

/// Saturated class hue; the stripe direction also depends on the class.
pub fn signature_color(class: usize, n_classes: usize, x: usize, y: usize) -> [f32; 3] {
    let base = hue_rgb(class as f64 / n_classes as f64);
    let on = match class % 5 {
        0 => (y / 2) % 2 == 0,
        1 => (x / 2) % 2 == 0,
        2 => ((x + y) / 2) % 2 == 0,
        3 => ((x + s_mod(y)) / 2) % 2 == 0,
        _ => true,
    };
    if on {
        base
    } else {
        base.map(|c| c * 0.1)
    }
}

fn s_mod(y: usize) -> usize {
    // anti-diagonal stripes without depending on the image size
    1023 - (y % 1024)
}

fn hue_rgb(h: f64) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let f = h6.fract();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [(0.05 + 0.9 * r) as f32, (0.05 + 0.9 * g) as f32, (0.05 + 0.9 * b) as f32]
}
