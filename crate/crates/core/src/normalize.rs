//! Intensity normalization.
//!
//! Stage-1 models see a globally z-scored image. Stage-2 models see the raw
//! image mapped from a foreground percentile range onto `(0, 1)` through a
//! smooth clamp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{Volume, VolumeKind};

pub const DEFAULT_SOFTCLIP_K: f64 = 10.0;
pub const DEFAULT_PERCENTILES: (f64, f64) = (5.0, 95.0);

/// Intensity range measured inside a foreground mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileBounds {
    pub lo: f64,
    pub hi: f64,
}

impl PercentileBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidArgument(format!("invalid bounds lo={lo} hi={hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn is_degenerate(&self) -> bool {
        self.hi <= self.lo
    }
}

#[derive(Debug, Clone)]
pub struct ZScore {
    pub volume: Volume,
    pub mean: f64,
    pub std: f64,
    /// Set when the input was constant; `volume` is then all zeros.
    pub degenerate: bool,
}

fn require_image(vol: &Volume) -> Result<()> {
    if vol.kind() != VolumeKind::Image {
        return Err(Error::InvalidArgument("intensity normalization needs an image volume".into()));
    }
    Ok(())
}

/// Global zero-mean / unit-variance normalization (population std).
pub fn zscore_normalize(vol: &Volume) -> Result<ZScore> {
    require_image(vol)?;
    let n = vol.len() as f64;
    let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        log::warn!("z-score normalization of a constant volume; returning zeros");
        return Ok(ZScore {
            volume: vol.with_data(vec![0.0; vol.len()])?,
            mean,
            std,
            degenerate: true,
        });
    }
    let data = vol.data().iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Ok(ZScore {
        volume: vol.with_data(data)?,
        mean,
        std,
        degenerate: false,
    })
}

/// Percentiles (linear interpolation between order statistics) of the
/// intensities at nonzero `mask` voxels.
pub fn foreground_percentile_bounds(vol: &Volume, mask: &Volume, p_lo: f64, p_hi: f64) -> Result<PercentileBounds> {
    if vol.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ in shape",
            vol.shape(),
            mask.shape()
        )));
    }
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo >= p_hi {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})"
        )));
    }
    let mut values: Vec<f64> = vol
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v as f64)
        .collect();
    if values.is_empty() {
        return Err(Error::EmptyForeground("mask selects no voxels".into()));
    }
    values.sort_by(f64::total_cmp);
    let lo = stats::percentile_sorted(&values, p_lo).expect("nonempty");
    let hi = stats::percentile_sorted(&values, p_hi).expect("nonempty");
    PercentileBounds::new(lo, hi)
}

/// `ln(1 + exp(-|t|))`
#[inline]
fn softplus_tail(t: f64) -> f64 {
    (-t.abs()).exp().ln_1p()
}

/// Smooth clamp of `v` onto `(0, 1)`:
/// `S_k(v) = (1/k) ln((1 + e^{kv}) / (1 + e^{k(v-1)}))`.
///
/// Evaluated piecewise so that `S_k(0.5) == 0.5` exactly and large `|kv|`
/// does not overflow.
pub fn softclip(v: f64, k: f64) -> f64 {
    let a = k * v;
    let b = k * (v - 1.0);
    if v < 0.0 {
        (softplus_tail(a) - softplus_tail(b)) / k
    } else if v <= 1.0 {
        v + (softplus_tail(a) - softplus_tail(b)) / k
    } else {
        1.0 + (softplus_tail(a) - softplus_tail(b)) / k
    }
}

/// Maps `x` through `v = (x - lo) / (hi - lo)` and then [`softclip`].
pub fn softclip_rescale(vol: &Volume, bounds: PercentileBounds, k: f64) -> Result<Volume> {
    require_image(vol)?;
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidArgument(format!("soft-clip steepness must be > 0, got {k}")));
    }
    if bounds.is_degenerate() {
        return Err(Error::DegenerateRange(format!(
            "lo ({}) must be below hi ({})",
            bounds.lo, bounds.hi
        )));
    }
    let range = bounds.hi - bounds.lo;
    let data = vol
        .data()
        .iter()
        .map(|&x| softclip((x as f64 - bounds.lo) / range, k) as f32)
        .collect();
    vol.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(data: Vec<f32>) -> Volume {
        let n = data.len();
        Volume::new(data, [n, 1, 1], [1.0; 3], [0.0; 3], VolumeKind::Image).unwrap()
    }

    fn mask(data: Vec<f32>) -> Volume {
        let n = data.len();
        Volume::new(data, [n, 1, 1], [1.0; 3], [0.0; 3], VolumeKind::Label).unwrap()
    }

    #[test]
    fn zscore_two_point() {
        let z = zscore_normalize(&image(vec![0.0, 2.0, 0.0, 2.0])).unwrap();
        assert_eq!(z.volume.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn zscore_direct_arithmetic() {
        let z = zscore_normalize(&image(vec![10.0, 20.0, 30.0, 40.0])).unwrap();
        let s = 125f64.sqrt();
        for (out, x) in z.volume.data().iter().zip([10.0, 20.0, 30.0, 40.0]) {
            assert!((*out as f64 - (x - 25.0) / s).abs() < 1e-6);
        }
        assert_eq!(z.mean, 25.0);
    }

    #[test]
    fn zscore_idempotent_and_constant() {
        let z = zscore_normalize(&image(vec![1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_eq!(z.volume.data(), &[1.0, -1.0, 1.0, -1.0]);
        let c = zscore_normalize(&image(vec![5.0; 6])).unwrap();
        assert!(c.degenerate);
        assert!(c.volume.data().iter().all(|v| *v == 0.0));
        assert!(zscore_normalize(&mask(vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn percentile_bounds_oracle() {
        let vals: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let b = foreground_percentile_bounds(&image(vals), &mask(vec![1.0; 100]), 5.0, 95.0).unwrap();
        // sort-based oracle: rank = p/100 * 99
        let oracle = |p: f64| {
            let r = p / 100.0 * 99.0;
            let (i, f) = (r.floor(), r - r.floor());
            (i + 1.0) + f
        };
        assert!((b.lo - oracle(5.0)).abs() < 1e-9 && (b.lo - 5.95).abs() < 1e-9);
        assert!((b.hi - oracle(95.0)).abs() < 1e-9 && (b.hi - 95.05).abs() < 1e-9);
    }

    #[test]
    fn percentile_bounds_degenerate_and_extremes() {
        let img = image(vec![42.0, 7.0, 9.0, -3.0]);
        let b = foreground_percentile_bounds(&img, &mask(vec![1.0, 0.0, 0.0, 0.0]), 5.0, 95.0).unwrap();
        assert_eq!((b.lo, b.hi), (42.0, 42.0));
        let b = foreground_percentile_bounds(&img, &mask(vec![1.0, 1.0, 0.0, 1.0]), 0.0, 100.0).unwrap();
        assert_eq!((b.lo, b.hi), (-3.0, 42.0));
        let err = foreground_percentile_bounds(&img, &mask(vec![0.0; 4]), 5.0, 95.0);
        assert!(matches!(err, Err(Error::EmptyForeground(_))));
        assert!(foreground_percentile_bounds(&img, &mask(vec![1.0; 4]), 95.0, 5.0).is_err());
    }

    #[test]
    fn softclip_closed_form_at_lo() {
        let k: f64 = 10.0;
        let expected = (2.0 / (1.0 + (-k).exp())).ln() / k;
        assert!((softclip(0.0, k) - expected).abs() < 1e-14);
        assert!((softclip(0.0, k) - 0.0693).abs() < 1e-4);
        for k in [0.5, 1.0, 10.0, 100.0] {
            assert_eq!(softclip(0.5, k), 0.5);
        }
    }

    #[test]
    fn softclip_naive_formula_agrees() {
        for i in 0..=50 {
            let v = -1.0 + 3.0 * i as f64 / 50.0;
            let k = 4.0;
            let naive = ((1.0 + (k * v).exp()) / (1.0 + (k * (v - 1.0)).exp())).ln() / k;
            assert!((softclip(v, k) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn softclip_rescale_errors() {
        let img = image(vec![1.0, 2.0]);
        let b = PercentileBounds { lo: 3.0, hi: 3.0 };
        assert!(matches!(softclip_rescale(&img, b, 10.0), Err(Error::DegenerateRange(_))));
        let b = PercentileBounds { lo: 0.0, hi: 3.0 };
        assert!(softclip_rescale(&img, b, 0.0).is_err());
        let out = softclip_rescale(&image(vec![0.0, 1.5, 3.0]), b, 10.0).unwrap();
        assert_eq!(out.data()[1], 0.5);
    }

    proptest! {
        #[test]
        fn softclip_symmetric_bounded_monotone(v in -3.0f64..4.0, dv in 1e-6f64..1.0, k in 0.5f64..50.0) {
            let s = softclip(v, k);
            // 1 - S(v) == S(1 - v); checking the complement keeps strictness
            // visible where S(v) itself rounds to 1.
            prop_assert!(s > 0.0 && s <= 1.0 && softclip(1.0 - v, k) > 0.0);
            prop_assert!((s + softclip(1.0 - v, k) - 1.0).abs() < 1e-12);
            let w = v + dv;
            if w <= 0.5 {
                prop_assert!(softclip(w, k) > s);
            } else if v >= 0.5 {
                prop_assert!(softclip(1.0 - w, k) < softclip(1.0 - v, k));
            } else {
                prop_assert!(s < 0.5 && softclip(1.0 - w, k) < 0.5);
            }
        }

        #[test]
        fn zscore_affine_invariant(data in prop::collection::vec(-500.0f32..500.0, 4..40), a in 0.5f32..3.0, c in -200.0f32..200.0) {
            prop_assume!(stats::std_dev(&data.iter().map(|v| *v as f64).collect::<Vec<_>>()) > 1.0);
            let z0 = zscore_normalize(&image(data.clone())).unwrap();
            let z1 = zscore_normalize(&image(data.iter().map(|x| a * x + c).collect())).unwrap();
            for (p, q) in z0.volume.data().iter().zip(z1.volume.data()) {
                prop_assert!((p - q).abs() < 1e-4);
            }
        }

        #[test]
        fn bounds_permutation_invariant(mut data in prop::collection::vec(-100.0f32..100.0, 2..50), seed in 0u64..1000) {
            let n = data.len();
            let m = mask(vec![1.0; n]);
            let b0 = foreground_percentile_bounds(&image(data.clone()), &m, 5.0, 95.0).unwrap();
            // deterministic shuffle
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                data.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b1 = foreground_percentile_bounds(&image(data), &m, 5.0, 95.0).unwrap();
            prop_assert_eq!(b0, b1);
        }
    }
}
