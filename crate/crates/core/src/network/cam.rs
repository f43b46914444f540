//! Max-normalization of class activation maps.

use crate::numcore::Real;

/// Maps whose post-relu maximum falls below this become all-zero.
pub const MIN_CAM_PEAK: f64 = 1e-8;

/// What one map did during normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDecision {
    pub present: bool,
    pub active: bool,
    pub argmax: usize,
    pub gate: Vec<bool>,
}

impl MapDecision {
    fn absent() -> Self {
        Self {
            present: false,
            active: false,
            argmax: 0,
            gate: Vec::new(),
        }
    }
}

/// Normalizes consecutive maps of `hw` elements; `present[m]` says whether
/// map `m` belongs to a labelled class.
pub(crate) fn normalize_forward<T: Real>(
    x: &[T],
    hw: usize,
    present: &[bool],
    replay: Option<Vec<MapDecision>>,
) -> (Vec<T>, Vec<MapDecision>) {
    let mut out = vec![T::zero(); x.len()];
    let mut decisions = Vec::with_capacity(present.len());
    for (m, &is_present) in present.iter().enumerate() {
        let src = &x[m * hw..(m + 1) * hw];
        let prior = replay.as_ref().map(|r| &r[m]);
        if !is_present || prior.is_some_and(|d| !d.present) {
            decisions.push(MapDecision::absent());
            continue;
        }
        let gate: Vec<bool> = match prior {
            Some(d) => d.gate.clone(),
            None => src.iter().map(|&v| v > T::zero()).collect(),
        };
        let relu = |i: usize| if gate[i] { src[i].as_f64() } else { 0.0 };
        let argmax = match prior {
            Some(d) => d.argmax,
            // first index of the maximum
            None => (0..hw).fold(0, |best, i| if relu(i) > relu(best) { i } else { best }),
        };
        let peak = relu(argmax);
        let active = prior.map_or(peak >= MIN_CAM_PEAK, |d| d.active);
        if active {
            let dst = &mut out[m * hw..(m + 1) * hw];
            for (i, o) in dst.iter_mut().enumerate() {
                *o = T::from_f64(relu(i) / peak);
            }
        }
        decisions.push(MapDecision {
            present: true,
            active,
            argmax,
            gate,
        });
    }
    (out, decisions)
}

pub(crate) fn normalize_backward<T: Real>(x: &[T], hw: usize, maps: &[MapDecision], g: &[T]) -> Vec<T> {
    let mut grad = vec![T::zero(); x.len()];
    for (m, d) in maps.iter().enumerate() {
        if !d.active {
            continue;
        }
        let src = &x[m * hw..(m + 1) * hw];
        let go = &g[m * hw..(m + 1) * hw];
        let peak = src[d.argmax].as_f64();
        let mut through_peak = 0.0f64;
        let dst = &mut grad[m * hw..(m + 1) * hw];
        for i in 0..hw {
            if d.gate[i] {
                let gi = go[i].as_f64();
                dst[i] = T::from_f64(gi / peak);
                through_peak += gi * src[i].as_f64();
            }
        }
        dst[d.argmax] = dst[d.argmax] - T::from_f64(through_peak / (peak * peak));
    }
    grad
}
