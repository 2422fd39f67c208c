//! Training-time cropping and augmentation.
//!
//! Spatial transforms act on image (trilinear) and label (nearest) together;
//! intensity transforms touch the image only. All randomness comes from the
//! caller's rng, so a seeded rng reproduces every output bitwise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{sample_grid, Interp, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: [usize; 3],
    /// Probability that a crop is forced to contain foreground.
    pub foreground_bias: f64,
    /// Per-axis flip probability.
    pub p_flip: f64,
    pub p_affine: f64,
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub p_intensity_scale: f64,
    pub intensity_scale: f64,
    pub p_intensity_shift: f64,
    pub intensity_shift: f64,
    pub p_noise: f64,
    pub noise_std: f64,
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    /// Mixed into the training seed for the augmentation stream.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: [64, 64, 64],
            foreground_bias: 0.5,
            p_flip: 0.5,
            p_affine: 0.5,
            rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
            p_intensity_scale: 0.2,
            intensity_scale: 0.1,
            p_intensity_shift: 0.2,
            intensity_shift: 0.1,
            p_noise: 0.2,
            noise_std: 0.05,
            p_blur: 0.2,
            blur_sigma: (0.5, 1.0),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled; cropping still applies.
    pub fn disabled(crop_size: [usize; 3]) -> Self {
        Self {
            crop_size,
            foreground_bias: 0.0,
            p_flip: 0.0,
            p_affine: 0.0,
            p_intensity_scale: 0.0,
            p_intensity_shift: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.contains(&0) {
            return Err(Error::InvalidArgument(format!("crop_size must be >= 1, got {:?}", self.crop_size)));
        }
        let probs = [
            self.foreground_bias,
            self.p_flip,
            self.p_affine,
            self.p_intensity_scale,
            self.p_intensity_shift,
            self.p_noise,
            self.p_blur,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("augmentation probabilities must be in [0, 1]".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(Error::InvalidArgument(format!("bad scale_range {:?}", self.scale_range)));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::InvalidArgument(format!("bad blur_sigma {:?}", self.blur_sigma)));
        }
        if self.noise_std < 0.0 || self.rotation_deg < 0.0 {
            return Err(Error::InvalidArgument("noise_std and rotation_deg must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_pair(image: &Volume, label: &Volume) -> Result<()> {
    if image.shape() != label.shape() {
        return Err(Error::Shape(format!(
            "image {:?} and label {:?} shapes differ",
            image.shape(),
            label.shape()
        )));
    }
    Ok(())
}

/// Pads symmetrically with zeros so every axis is at least `min`.
pub fn pad_to(vol: &Volume, min: [usize; 3]) -> Result<Volume> {
    let s = vol.shape();
    if (0..3).all(|a| s[a] >= min[a]) {
        return Ok(vol.clone());
    }
    let out: [usize; 3] = std::array::from_fn(|a| s[a].max(min[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (out[a] - s[a]) / 2);
    let mut data = vec![0.0f32; out.iter().product()];
    for x in 0..s[0] {
        for y in 0..s[1] {
            let src = vol.index(x, y, 0);
            let dst = ((x + before[0]) * out[1] + y + before[1]) * out[2] + before[2];
            data[dst..dst + s[2]].copy_from_slice(&vol.data()[src..src + s[2]]);
        }
    }
    Volume::new(data, out, vol.spacing(), vol.origin(), vol.kind())
}

/// Copies the `size` window starting at `start`.
pub fn crop(vol: &Volume, start: [usize; 3], size: [usize; 3]) -> Result<Volume> {
    let s = vol.shape();
    if (0..3).any(|a| start[a] + size[a] > s[a]) {
        return Err(Error::Shape(format!("window {start:?}+{size:?} outside {s:?}")));
    }
    let mut data = Vec::with_capacity(size.iter().product());
    for x in 0..size[0] {
        for y in 0..size[1] {
            let i = vol.index(start[0] + x, start[1] + y, start[2]);
            data.extend_from_slice(&vol.data()[i..i + size[2]]);
        }
    }
    Volume::new(data, size, vol.spacing(), vol.origin(), vol.kind())
}

/// Chooses a window start. With probability `foreground_bias`, and when the
/// label has foreground, the window is drawn among those containing a
/// uniformly chosen foreground voxel.
pub fn crop_window<R: Rng>(label: &Volume, size: [usize; 3], foreground_bias: f64, rng: &mut R) -> [usize; 3] {
    let s = label.shape();
    let biased = foreground_bias > 0.0 && rng.random_bool(foreground_bias);
    if biased {
        let fg: Vec<usize> = (0..label.len()).filter(|&i| label.data()[i] != 0.0).collect();
        if !fg.is_empty() {
            let i = fg[rng.random_range(0..fg.len())];
            let p = [i / (s[1] * s[2]), (i / s[2]) % s[1], i % s[2]];
            return std::array::from_fn(|a| {
                let lo = (p[a] + 1).saturating_sub(size[a]);
                let hi = p[a].min(s[a] - size[a]);
                rng.random_range(lo..=hi)
            });
        }
    }
    std::array::from_fn(|a| rng.random_range(0..=s[a] - size[a]))
}

/// Random `crop_size` window taken from image and label alike, padding both
/// with zeros first when they are smaller.
pub fn random_crop_pair<R: Rng>(
    image: &Volume,
    label: &Volume,
    crop_size: [usize; 3],
    foreground_bias: f64,
    rng: &mut R,
) -> Result<(Volume, Volume)> {
    check_pair(image, label)?;
    if crop_size.contains(&0) {
        return Err(Error::InvalidArgument("crop size must be >= 1".into()));
    }
    let image = pad_to(image, crop_size)?;
    let label = pad_to(label, crop_size)?;
    let start = crop_window(&label, crop_size, foreground_bias, rng);
    Ok((crop(&image, start, crop_size)?, crop(&label, start, crop_size)?))
}

/// Reverses the voxel order along `axis`.
pub fn flip(vol: &Volume, axis: usize) -> Result<Volume> {
    let s = vol.shape();
    let mut data = vec![0.0f32; vol.len()];
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                let mut q = [x, y, z];
                q[axis] = s[axis] - 1 - q[axis];
                data[vol.index(q[0], q[1], q[2])] = vol.get(x, y, z);
            }
        }
    }
    vol.with_data(data)
}

pub type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Rotation by `angle` radians about `axis`.
pub fn rotation(axis: usize, angle: f64) -> Mat3 {
    let (s, c) = (snap(angle.sin()), snap(angle.cos()));
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

/// Resamples `vol` so output voxel `o` takes the input value at
/// `centre + m (o - centre)`, with edge clamping. Images interpolate
/// trilinearly, labels take the nearest voxel.
pub fn apply_affine(vol: &Volume, m: &Mat3) -> Result<Volume> {
    let s = vol.shape();
    let c: [f64; 3] = std::array::from_fn(|a| (s[a] as f64 - 1.0) / 2.0);
    let interp = match vol.kind() {
        VolumeKind::Image => Interp::Linear,
        VolumeKind::Label => Interp::Nearest,
    };
    let data = sample_grid(
        vol,
        s,
        |o| {
            let d: [f64; 3] = std::array::from_fn(|a| o[a] as f64 - c[a]);
            std::array::from_fn(|i| c[i] + m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2])
        },
        interp,
    );
    vol.with_data(data)
}

/// Separable Gaussian smoothing with edge clamping (kernel radius `ceil(3 sigma)`).
pub fn gaussian_blur(vol: &Volume, sigma: f64) -> Result<Volume> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    let s = vol.shape();
    let mut cur: Vec<f32> = vol.data().to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        let stride = match axis {
            0 => s[1] * s[2],
            1 => s[2],
            _ => 1,
        };
        let n = s[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % s[axis]) as isize;
            let base = i as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = (pos + t as isize - r).clamp(0, n - 1);
                acc += w * cur[(base + q * stride as isize) as usize] as f64;
            }
            *out = acc as f32;
        }
        cur = next;
    }
    vol.with_data(cur)
}

/// Random flips, affine and intensity transforms per `cfg`.
pub fn apply_augmentations<R: Rng>(image: &Volume, label: &Volume, cfg: &AugmentConfig, rng: &mut R) -> Result<(Volume, Volume)> {
    check_pair(image, label)?;
    let mut img = image.clone();
    let mut lab = label.clone();
    for axis in 0..3 {
        if cfg.p_flip > 0.0 && rng.random_bool(cfg.p_flip) {
            img = flip(&img, axis)?;
            lab = flip(&lab, axis)?;
        }
    }
    if cfg.p_affine > 0.0 && rng.random_bool(cfg.p_affine) {
        let max = cfg.rotation_deg.to_radians();
        let mut m: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for axis in 0..3 {
            let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
            m = matmul(&m, &rotation(axis, angle));
        }
        // m is orthonormal, so the inverse of (R * S) is S^-1 * R^T.
        let inv_scale: [f64; 3] = std::array::from_fn(|_| 1.0 / rng.random_range(cfg.scale_range.0..=cfg.scale_range.1));
        let inv: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| inv_scale[i] * m[j][i]));
        img = apply_affine(&img, &inv)?;
        lab = apply_affine(&lab, &inv)?;
    }
    if cfg.p_intensity_scale > 0.0 && rng.random_bool(cfg.p_intensity_scale) {
        let f = 1.0 + rng.random_range(-cfg.intensity_scale..=cfg.intensity_scale);
        img = img.with_data(img.data().iter().map(|v| (*v as f64 * f) as f32).collect())?;
    }
    if cfg.p_intensity_shift > 0.0 && rng.random_bool(cfg.p_intensity_shift) {
        let d = rng.random_range(-cfg.intensity_shift..=cfg.intensity_shift);
        img = img.with_data(img.data().iter().map(|v| (*v as f64 + d) as f32).collect())?;
    }
    if cfg.p_noise > 0.0 && rng.random_bool(cfg.p_noise) {
        let sd = cfg.noise_std;
        let data = img
            .data()
            .iter()
            .map(|v| {
                let n: f64 = StandardNormal.sample(rng);
                (*v as f64 + sd * n) as f32
            })
            .collect();
        img = img.with_data(data)?;
    }
    if cfg.p_blur > 0.0 && rng.random_bool(cfg.p_blur) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        img = gaussian_blur(&img, sigma)?;
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(shape: [usize; 3], f: impl Fn(usize) -> f32, kind: VolumeKind) -> Volume {
        let n = shape.iter().product();
        Volume::new((0..n).map(f).collect(), shape, [1.0; 3], [0.0; 3], kind).unwrap()
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = vol([4, 3, 2], |i| i as f32, VolumeKind::Image);
        let lab = vol([4, 3, 2], |i| (i % 2) as f32, VolumeKind::Label);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = random_crop_pair(&img, &lab, [4, 3, 2], 0.5, &mut rng).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let img = vol([4, 4, 4], |i| i as f32, VolumeKind::Image);
        let lab = vol([4, 4, 4], |i| (i == 21) as u8 as f32, VolumeKind::Label);
        let run = || random_crop_pair(&img, &lab, [2, 2, 2], 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a, c);
        assert_eq!(b, d);
    }

    #[test]
    fn small_volume_is_padded_symmetrically() {
        let img = vol([2, 1, 1], |i| 1.0 + i as f32, VolumeKind::Image);
        let p = pad_to(&img, [4, 3, 1]).unwrap();
        assert_eq!(p.shape(), [4, 3, 1]);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let img = vol([5, 4, 3], |i| (i * 7 % 11) as f32, VolumeKind::Image);
        let lab = vol([5, 4, 3], |i| (i % 3 == 0) as u8 as f32, VolumeKind::Label);
        let cfg = AugmentConfig::disabled([5, 4, 3]);
        let (a, b) = apply_augmentations(&img, &lab, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = vol([3, 4, 5], |i| i as f32, VolumeKind::Image);
        let mut v = img.clone();
        for _ in 0..2 {
            for a in 0..3 {
                v = flip(&v, a).unwrap();
            }
        }
        assert_eq!(v, img);
        assert_ne!(flip(&img, 1).unwrap(), img);
    }

    #[test]
    fn quarter_turn_about_z_permutes_voxels() {
        let img = vol([3, 3, 3], |i| (i * i) as f32, VolumeKind::Image);
        let out = apply_affine(&img, &rotation(2, std::f64::consts::FRAC_PI_2)).unwrap();
        // input offset = m * (o - c): x_in = 1 - (y - 1), y_in = 1 + (x - 1)
        for x in 0..3 {
            for y in 0..3 {
                for z in 0..3 {
                    assert_eq!(out.get(x, y, z), img.get(2 - y, x, z), "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constant() {
        let img = vol([5, 5, 5], |_| 3.5, VolumeKind::Image);
        let b = gaussian_blur(&img, 0.8).unwrap();
        assert!(b.data().iter().all(|v| (v - 3.5).abs() < 1e-5));
    }
}
