//! Soft Dice + focal loss with deep-supervision weighting.
//!
//! Everything is evaluated in f64 on the softmax of the logits, and every
//! loss returns its analytic gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// Level 0 is the full-resolution output. Truncated to the levels in use
    /// and renormalized to sum to one.
    pub ds_weights: Vec<f64>,
    pub include_background_in_dice: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            ds_weights: vec![1.0, 0.5, 0.25, 0.125],
            include_background_in_dice: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::InvalidArgument(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        if self.ds_weights.is_empty() || self.ds_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("ds_weights must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Normalized weights for `levels` outputs (full resolution first).
    pub fn level_weights(&self, levels: usize) -> Result<Vec<f64>> {
        if levels == 0 || levels > self.ds_weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ds_weights configured but {levels} output levels in use",
                self.ds_weights.len()
            )));
        }
        let w = &self.ds_weights[..levels];
        let sum: f64 = w.iter().sum();
        Ok(w.iter().map(|v| v / sum).collect())
    }
}

/// Dense f64 array with the `(batch, channel, x, y, z)` layout of [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor64 {
    pub shape: [usize; 5],
    pub data: Vec<f64>,
}

impl Tensor64 {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} does not match {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape(),
            data: t.data().iter().map(|v| *v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|v| *v as f32).collect()).expect("consistent shape")
    }

    fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }
}

/// One-hot encodes integer class labels laid out as `(batch, x, y, z)`.
pub fn one_hot(labels: &[f32], batch: usize, spatial: [usize; 3], classes: usize) -> Result<Tensor64> {
    let v: usize = spatial.iter().product();
    if labels.len() != batch * v {
        return Err(Error::Shape(format!("{} labels for batch {batch} of {spatial:?}", labels.len())));
    }
    let mut data = vec![0.0; batch * classes * v];
    for n in 0..batch {
        for i in 0..v {
            let c = labels[n * v + i];
            if c < 0.0 || c.fract() != 0.0 || c as usize >= classes {
                return Err(Error::InvalidArgument(format!("label value {c} outside [0, {classes})")));
            }
            data[(n * classes + c as usize) * v + i] = 1.0;
        }
    }
    Tensor64::new([batch, classes, spatial[0], spatial[1], spatial[2]], data)
}

/// Nearest downsampling of a one-hot target to `spatial`; output voxel `i`
/// takes input voxel `i * factor` on each axis.
pub fn downsample_target(t: &Tensor64, spatial: [usize; 3]) -> Result<Tensor64> {
    let src = t.spatial();
    let mut factor = [0; 3];
    for a in 0..3 {
        if spatial[a] == 0 || src[a] % spatial[a] != 0 {
            return Err(Error::Shape(format!("cannot downsample {src:?} to {spatial:?}")));
        }
        factor[a] = src[a] / spatial[a];
    }
    let [b, c] = [t.shape[0], t.shape[1]];
    let mut data = Vec::with_capacity(b * c * spatial.iter().product::<usize>());
    for nc in 0..b * c {
        let base = nc * t.voxels();
        for x in 0..spatial[0] {
            for y in 0..spatial[1] {
                for z in 0..spatial[2] {
                    let (sx, sy, sz) = (x * factor[0], y * factor[1], z * factor[2]);
                    data.push(t.data[base + (sx * src[1] + sy) * src[2] + sz]);
                }
            }
        }
    }
    Tensor64::new([b, c, spatial[0], spatial[1], spatial[2]], data)
}

fn check_pair(logits: &Tensor64, target: &Tensor64) -> Result<()> {
    if logits.shape != target.shape {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} differ",
            logits.shape, target.shape
        )));
    }
    if logits.shape[1] < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    Ok(())
}

/// Softmax over the channel axis, plus log-probabilities.
fn softmax(logits: &Tensor64) -> (Vec<f64>, Vec<f64>) {
    let [b, c] = [logits.shape[0], logits.shape[1]];
    let v = logits.voxels();
    let mut p = vec![0.0; logits.data.len()];
    let mut logp = vec![0.0; logits.data.len()];
    for n in 0..b {
        for i in 0..v {
            let idx = |k: usize| (n * c + k) * v + i;
            let m = (0..c).map(|k| logits.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c).map(|k| (logits.data[idx(k)] - m).exp()).sum();
            let ls = s.ln();
            for k in 0..c {
                let l = logits.data[idx(k)] - m - ls;
                logp[idx(k)] = l;
                p[idx(k)] = l.exp();
            }
        }
    }
    (p, logp)
}

/// Chains `g = dL/dp` through the softmax: `dz_j = p_j (g_j - sum_c p_c g_c)`.
fn softmax_backward(shape: [usize; 5], p: &[f64], g: &[f64]) -> Vec<f64> {
    let [b, c] = [shape[0], shape[1]];
    let v = shape[2] * shape[3] * shape[4];
    let mut dz = vec![0.0; p.len()];
    for n in 0..b {
        for i in 0..v {
            let idx = |k: usize| (n * c + k) * v + i;
            let dot: f64 = (0..c).map(|k| p[idx(k)] * g[idx(k)]).sum();
            for k in 0..c {
                dz[idx(k)] = p[idx(k)] * (g[idx(k)] - dot);
            }
        }
    }
    dz
}

/// `1 - mean_c (2 sum p t + eps) / (sum p + sum t + eps)`, sums pooled over
/// batch and voxels.
pub fn dice_loss(logits: &Tensor64, target: &Tensor64, cfg: &LossConfig) -> Result<f64> {
    dice_loss_grad(logits, target, cfg).map(|(l, _)| l)
}

pub fn dice_loss_grad(logits: &Tensor64, target: &Tensor64, cfg: &LossConfig) -> Result<(f64, Tensor64)> {
    check_pair(logits, target)?;
    let (p, _) = softmax(logits);
    let [b, c] = [logits.shape[0], logits.shape[1]];
    let v = logits.voxels();
    let first = if cfg.include_background_in_dice { 0 } else { 1 };
    let counted = (c - first) as f64;
    let eps = cfg.dice_smooth;
    let mut g = vec![0.0; p.len()];
    let mut mean_dice = 0.0;
    for k in first..c {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for n in 0..b {
            let off = (n * c + k) * v;
            for i in off..off + v {
                inter += p[i] * target.data[i];
                ps += p[i];
                ts += target.data[i];
            }
        }
        let num = 2.0 * inter + eps;
        let den = ps + ts + eps;
        mean_dice += num / den / counted;
        for n in 0..b {
            let off = (n * c + k) * v;
            for i in off..off + v {
                g[i] = -(2.0 * target.data[i] * den - num) / (den * den) / counted;
            }
        }
    }
    let dz = softmax_backward(logits.shape, &p, &g);
    Ok((1.0 - mean_dice, Tensor64 { shape: logits.shape, data: dz }))
}

/// Mean over voxels of `-sum_c t_c (1 - p_c)^gamma ln p_c`.
pub fn focal_loss(logits: &Tensor64, target: &Tensor64, cfg: &LossConfig) -> Result<f64> {
    focal_loss_grad(logits, target, cfg).map(|(l, _)| l)
}

pub fn focal_loss_grad(logits: &Tensor64, target: &Tensor64, cfg: &LossConfig) -> Result<(f64, Tensor64)> {
    check_pair(logits, target)?;
    let (p, logp) = softmax(logits);
    let [b, c] = [logits.shape[0], logits.shape[1]];
    let v = logits.voxels();
    let gamma = cfg.focal_gamma;
    let count = (b * v) as f64;
    let mut total = 0.0;
    let mut dz = vec![0.0; p.len()];
    let mut a = vec![0.0; c];
    for n in 0..b {
        for i in 0..v {
            let idx = |k: usize| (n * c + k) * v + i;
            for k in 0..c {
                let t = target.data[idx(k)];
                if t == 0.0 {
                    a[k] = 0.0;
                    continue;
                }
                // 1 - p_k as the sum of the other probabilities keeps precision
                // when p_k is close to one.
                let q: f64 = (0..c).filter(|&j| j != k).map(|j| p[idx(j)]).sum();
                let w = q.powf(gamma);
                total -= t * w * logp[idx(k)];
                // a_k = p_k dL/dp_k (per voxel, before averaging)
                let kink = if gamma == 0.0 || q <= 0.0 {
                    0.0
                } else {
                    gamma * q.powf(gamma - 1.0) * p[idx(k)] * logp[idx(k)]
                };
                a[k] = t * (kink - w);
            }
            let sa: f64 = a.iter().sum();
            for k in 0..c {
                dz[idx(k)] = (a[k] - p[idx(k)] * sa) / count;
            }
        }
    }
    Ok((total / count, Tensor64 { shape: logits.shape, data: dz }))
}

/// Weighted deep-supervision loss with gradients for every output.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    /// `dice + focal` per level, unweighted.
    pub level_losses: Vec<f64>,
    pub logits_grad: Tensor64,
    pub ds_grads: Vec<Tensor64>,
}

/// `sum_l w_l (dice_l + focal_l)`; level 0 is the full-resolution output and
/// deeper targets are nearest-downsampled from `target`.
pub fn total_loss(logits: &Tensor64, ds_outputs: &[Tensor64], target: &Tensor64, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let weights = cfg.level_weights(ds_outputs.len() + 1)?;
    let mut value = 0.0;
    let mut level_losses = Vec::new();
    let mut grads = Vec::new();
    for (l, out) in std::iter::once(logits).chain(ds_outputs).enumerate() {
        let t = if l == 0 {
            target.clone()
        } else {
            downsample_target(target, out.spatial())?
        };
        let (d, gd) = dice_loss_grad(out, &t, cfg)?;
        let (f, gf) = focal_loss_grad(out, &t, cfg)?;
        let w = weights[l];
        value += w * (d + f);
        level_losses.push(d + f);
        grads.push(Tensor64 {
            shape: out.shape,
            data: gd.data.iter().zip(&gf.data).map(|(a, b)| w * (a + b)).collect(),
        });
    }
    let logits_grad = grads.remove(0);
    Ok(TotalLoss {
        value,
        level_losses,
        logits_grad,
        ds_grads: grads,
    })
}
