//! Run configuration and its plain-text `key=value` form.
//!
//! ```text
//! # comments and blank lines are ignored
//! epochs=8
//! modulation=gaussian
//! use_cps=false
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::modulation::ModulationFn;
use crate::network::ModelConfig;
use crate::recalib::{DEFAULT_BG_THRESHOLD, DEFAULT_XI};
use crate::synthdata::DatasetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// Exponent of the polynomial decay `lr * (1 - step / total)^lr_power`;
    /// 0 keeps the rate constant.
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub xi: f64,
    pub bg_threshold: f64,
    pub modulation: ModulationFn,
    /// Seeds model initialization, shuffling and augmentation.
    pub seed: u64,
    pub use_amm_c: bool,
    pub use_amm_s: bool,
    pub use_cps: bool,
    /// Average CAMs of the image and its mirror at evaluation time.
    pub flip_average: bool,
    pub augment: bool,
    pub widths: [usize; 4],
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            xi: DEFAULT_XI,
            bg_threshold: DEFAULT_BG_THRESHOLD,
            modulation: ModulationFn::gaussian(),
            seed: 0,
            use_amm_c: true,
            use_amm_s: true,
            use_cps: true,
            flip_average: false,
            augment: true,
            widths: [16, 32, 64, 64],
            dataset: DatasetConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// The spotlight-only baseline: no AMM stages and no consistency loss.
    pub fn baseline(&self) -> Self {
        Self {
            use_amm_c: false,
            use_amm_s: false,
            use_cps: false,
            ..self.clone()
        }
    }

    pub fn has_compensation(&self) -> bool {
        self.use_amm_c || self.use_amm_s || self.use_cps
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::new(self.dataset.n_classes, self.dataset.image_size);
        m.widths = self.widths;
        m.use_amm_c = self.use_amm_c;
        m.use_amm_s = self.use_amm_s;
        m.compensation = self.has_compensation();
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi {} outside [0,1]", self.xi)));
        }
        if !(0.0..=1.0).contains(&self.bg_threshold) {
            return Err(Error::Config(format!("bg_threshold {} outside [0,1]", self.bg_threshold)));
        }
        self.dataset.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_power" => self.lr_power = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "xi" => self.xi = parse(key, value)?,
            "bg_threshold" => self.bg_threshold = parse(key, value)?,
            "modulation" => self.modulation = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "use_amm_c" => self.use_amm_c = parse(key, value)?,
            "use_amm_s" => self.use_amm_s = parse(key, value)?,
            "use_cps" => self.use_cps = parse(key, value)?,
            "flip_average" => self.flip_average = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "widths" => {
                let w: Vec<usize> = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("widths needs four comma-separated values".into()))?;
            }
            "n_classes" => self.dataset.n_classes = parse(key, value)?,
            "image_size" => self.dataset.image_size = parse(key, value)?,
            "train_samples" => self.dataset.train_samples = parse(key, value)?,
            "val_samples" => self.dataset.val_samples = parse(key, value)?,
            "max_objects_per_image" => self.dataset.max_objects_per_image = parse(key, value)?,
            "noise_std" => self.dataset.noise_std = parse(key, value)?,
            "data_seed" => self.dataset.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every setting as ordered `(key, value)` pairs that [`RunConfig::set`]
    /// reads back unchanged.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = self.widths.map(|v| v.to_string()).join(",");
        let d = &self.dataset;
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_power", self.lr_power.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("xi", self.xi.to_string()),
            ("bg_threshold", self.bg_threshold.to_string()),
            ("modulation", self.modulation.to_string()),
            ("seed", self.seed.to_string()),
            ("use_amm_c", self.use_amm_c.to_string()),
            ("use_amm_s", self.use_amm_s.to_string()),
            ("use_cps", self.use_cps.to_string()),
            ("flip_average", self.flip_average.to_string()),
            ("augment", self.augment.to_string()),
            ("widths", w),
            ("n_classes", d.n_classes.to_string()),
            ("image_size", d.image_size.to_string()),
            ("train_samples", d.train_samples.to_string()),
            ("val_samples", d.val_samples.to_string()),
            ("max_objects_per_image", d.max_objects_per_image.to_string()),
            ("noise_std", d.noise_std.to_string()),
            ("data_seed", d.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    /// Applies every `key=value` line of `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.batch_size), (8, 16));
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.01, 0.9, 1e-4));
        assert_eq!((c.xi, c.bg_threshold), (0.5, 0.25));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.modulation = "threshold:0.3".parse().unwrap();
        c.widths = [4, 6, 8, 8];
        c.dataset.noise_std = 0.125;
        c.use_cps = false;
        assert_eq!(RunConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_errors() {
        assert!(RunConfig::parse_str("epochs=two").is_err());
        assert!(RunConfig::parse_str("nonsense=1").is_err());
        assert!(RunConfig::parse_str("epochs").is_err());
        assert!(RunConfig::parse_str("# c\n\n epochs = 3 \n").unwrap().epochs == 3);
    }

    #[test]
    fn baseline_has_no_compensation() {
        let b = RunConfig::default().baseline();
        assert!(!b.has_compensation());
        assert!(!b.model_config().compensation);
    }
}
