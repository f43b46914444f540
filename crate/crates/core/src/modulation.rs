//! Activation redistribution used by the attention modulation module.
//!
//! The Gaussian modulation maps every value of an activation map through
//! `exp(-(v - mu)^2 / (2 sigma^2))`, where `mu` and `sigma` are the population
//! mean and standard deviation of that same map. Values near the mean are
//! promoted to attention 1 while both extremes are suppressed. The statistics
//! are treated as constants when differentiating.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdLevel {
    /// Per-map adaptive cut at the map mean.
    MapMean,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModulationKind {
    Gaussian,
    Threshold(ThresholdLevel),
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationFn {
    pub kind: ModulationKind,
    /// Floor on sigma below which the Gaussian returns uniform attention.
    pub epsilon: f64,
}

impl ModulationFn {
    pub const fn new(kind: ModulationKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub const fn gaussian() -> Self {
        Self::new(ModulationKind::Gaussian)
    }

    pub const fn threshold(level: ThresholdLevel) -> Self {
        Self::new(ModulationKind::Threshold(level))
    }

    pub const fn identity() -> Self {
        Self::new(ModulationKind::Identity)
    }
}

impl Default for ModulationFn {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl fmt::Display for ModulationFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModulationKind::Gaussian => f.write_str("gaussian"),
            ModulationKind::Identity => f.write_str("identity"),
            ModulationKind::Threshold(ThresholdLevel::MapMean) => f.write_str("threshold"),
            ModulationKind::Threshold(ThresholdLevel::Fixed(t)) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for ModulationFn {
    type Err = Error;

    /// Accepts `gaussian`, `identity`, `threshold` (map-mean cut) and `threshold:<t>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let kind = match s.as_str() {
            "gaussian" | "gauss" => ModulationKind::Gaussian,
            "identity" => ModulationKind::Identity,
            "threshold" => ModulationKind::Threshold(ThresholdLevel::MapMean),
            other => match other.strip_prefix("threshold:") {
                Some(t) => ModulationKind::Threshold(ThresholdLevel::Fixed(t.parse().map_err(|_| {
                    Error::Argument(format!("bad threshold value in {other:?}"))
                })?)),
                None => return Err(Error::Argument(format!("unknown modulation function {other:?}"))),
            },
        };
        Ok(Self::new(kind))
    }
}

/// Population statistics of one activation map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationStats {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
}

pub fn stats<T: Real>(values: &Tensor<T>) -> Result<ActivationStats> {
    slice_stats(values.data())
}

pub(crate) fn slice_stats<T: Real>(values: &[T]) -> Result<ActivationStats> {
    if values.is_empty() {
        return Err(Error::dim("statistics of an empty activation map"));
    }
    let m = values.len() as f64;
    let mu = values.iter().map(|v| v.as_f64()).sum::<f64>() / m;
    let var = values.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / m;
    Ok(ActivationStats {
        mu,
        sigma: var.sqrt(),
        count: values.len(),
    })
}

/// Modulates `values` as a single activation map.
pub fn modulate<T: Real>(values: &Tensor<T>, f: &ModulationFn) -> Result<Tensor<T>> {
    let st = stats(values)?;
    let (out, _) = modulate_map(values.data(), f, &st, None);
    Tensor::new(values.shape().to_vec(), out)
}

/// Kernel for one map. `mask` replays a previously recorded threshold
/// decision; the returned mask is the one actually applied.
pub(crate) fn modulate_map<T: Real>(
    values: &[T],
    f: &ModulationFn,
    st: &ActivationStats,
    mask: Option<&[bool]>,
) -> (Vec<T>, Option<Vec<bool>>) {
    match f.kind {
        ModulationKind::Identity => (values.to_vec(), None),
        ModulationKind::Gaussian => {
            if st.sigma < f.epsilon {
                return (vec![T::one(); values.len()], None);
            }
            let denom = 2.0 * st.sigma * st.sigma;
            let out = values
                .iter()
                .map(|v| T::from_f64((-(v.as_f64() - st.mu).powi(2) / denom).exp()))
                .collect();
            (out, None)
        }
        ModulationKind::Threshold(level) => {
            let t = match level {
                ThresholdLevel::MapMean => st.mu,
                ThresholdLevel::Fixed(t) => t,
            };
            let mask: Vec<bool> = match mask {
                Some(m) => m.to_vec(),
                None => values.iter().map(|v| v.as_f64() > t).collect(),
            };
            let out = mask.iter().map(|&on| if on { T::one() } else { T::zero() }).collect();
            (out, Some(mask))
        }
    }
}

pub(crate) fn modulate_map_backward<T: Real>(
    values: &[T],
    output: &[T],
    f: &ModulationFn,
    st: &ActivationStats,
    grad_out: &[T],
) -> Vec<T> {
    match f.kind {
        ModulationKind::Identity => grad_out.to_vec(),
        ModulationKind::Threshold(_) => vec![T::zero(); values.len()],
        ModulationKind::Gaussian => {
            if st.sigma < f.epsilon {
                return vec![T::zero(); values.len()];
            }
            let inv_var = 1.0 / (st.sigma * st.sigma);
            values
                .iter()
                .zip(output)
                .zip(grad_out)
                .map(|((v, o), g)| {
                    T::from_f64(g.as_f64() * o.as_f64() * (-(v.as_f64() - st.mu) * inv_var))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn stats_of_small_vectors() {
        let s = stats(&t(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.mu, 2.0);
        assert!((s.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.count, 3);
        let s = stats(&t(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!((s.mu, s.sigma), (5.0, 0.0));
        assert!(slice_stats::<f64>(&[]).is_err());
    }

    #[test]
    fn stats_of_seeded_uniform_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let s = stats(&t(&v)).unwrap();
        assert!((s.mu - 0.5).abs() < 0.02, "mu {}", s.mu);
        assert!((s.sigma - 0.2887).abs() < 0.02, "sigma {}", s.sigma);
    }

    #[test]
    fn gaussian_on_one_two_three() {
        let out = modulate(&t(&[1.0, 2.0, 3.0]), &ModulationFn::gaussian()).unwrap();
        let e = (-0.75f64).exp();
        assert!((out.data()[0] - e).abs() < 1e-12);
        assert_eq!(out.data()[1], 1.0);
        assert!((out.data()[2] - 0.47237).abs() < 1e-5);
    }

    #[test]
    fn constant_map_gets_uniform_attention() {
        let out = modulate(&t(&[4.0; 6]), &ModulationFn::gaussian()).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn threshold_is_a_step() {
        let f = ModulationFn::threshold(ThresholdLevel::Fixed(0.5));
        let out = modulate(&t(&[0.2, 0.7]), &f).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
        let f = ModulationFn::threshold(ThresholdLevel::MapMean);
        let out = modulate(&t(&[1.0, 2.0, 3.0, 4.0]), &f).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_passes_through() {
        let v = t(&[-1.0, 0.5, 3.0]);
        assert_eq!(modulate(&v, &ModulationFn::identity()).unwrap(), v);
    }

    #[test]
    fn parse_names() {
        assert_eq!("gaussian".parse::<ModulationFn>().unwrap(), ModulationFn::gaussian());
        assert_eq!(
            "threshold:0.25".parse::<ModulationFn>().unwrap(),
            ModulationFn::threshold(ThresholdLevel::Fixed(0.25))
        );
        assert!("softmax".parse::<ModulationFn>().is_err());
        for f in [
            ModulationFn::gaussian(),
            ModulationFn::identity(),
            ModulationFn::threshold(ThresholdLevel::MapMean),
        ] {
            assert_eq!(f.to_string().parse::<ModulationFn>().unwrap(), f);
        }
    }

    #[test]
    fn gaussian_gradient_has_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = ModulationFn::gaussian();
        let st = slice_stats(&v).unwrap();
        let (out, _) = modulate_map(&v, &f, &st, None);
        let ones = vec![1.0; v.len()];
        let g = modulate_map_backward(&v, &out, &f, &st, &ones);
        let h = 1e-6;
        for i in 0..v.len() {
            let mut p = v.clone();
            p[i] += h;
            let mut m = v.clone();
            m[i] -= h;
            // statistics stay frozen
            let fp = modulate_map(&p, &f, &st, None).0[i];
            let fm = modulate_map(&m, &f, &st, None).0[i];
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", g[i]);
        }
    }
}
