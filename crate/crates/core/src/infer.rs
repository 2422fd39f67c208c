//! Sliding-window prediction, probability ensembling and the two-stage
//! adaptive-normalization pipeline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::metrics::largest_component;
use crate::nn::Tensor;
use crate::normalize::{foreground_percentile_bounds, softclip_rescale, zscore_normalize, PercentileBounds};
use crate::segresnet::{NormalizationMode, SegResNet};
use crate::volume::{resample, resample_to_grid, Volume, VolumeKind};

/// Anything that maps a `(1, in_channels, x, y, z)` window to class logits of
/// the same spatial size.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;

    /// Window sizes must be multiples of this on every axis.
    fn divisor(&self) -> usize {
        1
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for SegResNet {
    fn num_classes(&self) -> usize {
        SegResNet::num_classes(self)
    }

    fn divisor(&self) -> usize {
        self.arch().divisor()
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_logits(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    #[default]
    Gaussian,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub roi_size: [usize; 3],
    pub overlap: f64,
    pub blend: Blend,
    /// Gaussian sigma as a fraction of the window size.
    pub sigma_scale: f64,
}

impl WindowConfig {
    pub fn new(roi_size: [usize; 3], overlap: f64) -> Self {
        Self {
            roi_size,
            overlap,
            blend: Blend::Gaussian,
            sigma_scale: 0.125,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {}", self.overlap)));
        }
        if self.roi_size.contains(&0) {
            return Err(Error::InvalidArgument(format!("roi_size must be >= 1, got {:?}", self.roi_size)));
        }
        if !(self.sigma_scale > 0.0) {
            return Err(Error::InvalidArgument("sigma_scale must be > 0".into()));
        }
        Ok(())
    }

    fn stride(&self, axis: usize) -> usize {
        ((self.roi_size[axis] as f64 * (1.0 - self.overlap)).floor() as usize).max(1)
    }
}

/// Per-voxel class probabilities on a volume grid, stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub classes: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn class(&self, c: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    /// Argmax label volume (first class wins ties).
    pub fn argmax(&self) -> Result<Volume> {
        let v = self.voxels();
        let labels = (0..v)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * v + i] > self.data[best * v + i] {
                        best = c;
                    }
                }
                best as f32
            })
            .collect();
        Volume::new(labels, self.shape, self.spacing, self.origin, VolumeKind::Label)
    }

    fn same_grid(&self, o: &ProbMap) -> bool {
        self.classes == o.classes && self.shape == o.shape && self.spacing == o.spacing
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Gaussian importance map over a window, peak 1.
pub fn importance_map(roi: [usize; 3], blend: Blend, sigma_scale: f64) -> Vec<f64> {
    let axis = |a: usize| -> Vec<f64> {
        let c = (roi[a] as f64 - 1.0) / 2.0;
        let s = roi[a] as f64 * sigma_scale;
        (0..roi[a])
            .map(|i| match blend {
                Blend::Gaussian => (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp(),
                Blend::Constant => 1.0,
            })
            .collect()
    };
    let (wx, wy, wz) = (axis(0), axis(1), axis(2));
    let mut w = Vec::with_capacity(roi.iter().product());
    for x in &wx {
        for y in &wy {
            for z in &wz {
                w.push(x * y * z);
            }
        }
    }
    w
}

/// Window start positions along one axis of length `size`.
pub fn window_starts(size: usize, roi: usize, stride: usize) -> Vec<usize> {
    if size <= roi {
        return vec![0];
    }
    let n = (size - roi).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(size - roi)).collect()
}

/// Tiles `image` with overlapping windows, blends per-window softmax outputs
/// with the importance map and normalizes to unit sum per voxel. Volumes
/// smaller than the window are reflect-padded first.
pub fn sliding_window_predict<P: Predictor + ?Sized>(model: &P, image: &Volume, cfg: &WindowConfig) -> Result<ProbMap> {
    cfg.validate()?;
    let d = model.divisor();
    if let Some(a) = (0..3).find(|&a| cfg.roi_size[a] % d != 0) {
        return Err(Error::Shape(format!(
            "roi size {} on axis {} is not divisible by the model divisor {d}",
            cfg.roi_size[a],
            ["x", "y", "z"][a]
        )));
    }
    let s = image.shape();
    let roi = cfg.roi_size;
    let padded: [usize; 3] = std::array::from_fn(|a| s[a].max(roi[a]));
    let before: [usize; 3] = std::array::from_fn(|a| (padded[a] - s[a]) / 2);
    let src = |p: [usize; 3]| -> f32 {
        let q: [usize; 3] = std::array::from_fn(|a| reflect(p[a] as isize - before[a] as isize, s[a]));
        image.get(q[0], q[1], q[2])
    };
    let classes = model.num_classes();
    let pv: usize = padded.iter().product();
    let mut acc = vec![0.0f64; classes * pv];
    let mut wsum = vec![0.0f64; pv];
    let w = importance_map(roi, cfg.blend, cfg.sigma_scale);
    let rv: usize = roi.iter().product();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_starts(padded[a], roi[a], cfg.stride(a))).collect();
    let mut win = vec![0.0f32; rv];
    for &sx in &starts[0] {
        for &sy in &starts[1] {
            for &sz in &starts[2] {
                let mut i = 0;
                for x in 0..roi[0] {
                    for y in 0..roi[1] {
                        for z in 0..roi[2] {
                            win[i] = src([sx + x, sy + y, sz + z]);
                            i += 1;
                        }
                    }
                }
                let logits = model.predict_logits(&Tensor::from_vec([1, 1, roi[0], roi[1], roi[2]], win.clone())?)?;
                if logits.shape() != [1, classes, roi[0], roi[1], roi[2]] {
                    return Err(Error::Shape(format!("predictor returned {:?}", logits.shape())));
                }
                let l = logits.data();
                let mut i = 0;
                for x in 0..roi[0] {
                    for y in 0..roi[1] {
                        let row = ((sx + x) * padded[1] + sy + y) * padded[2] + sz;
                        for z in 0..roi[2] {
                            let o = row + z;
                            let m = (0..classes).map(|c| l[c * rv + i] as f64).fold(f64::NEG_INFINITY, f64::max);
                            let e: f64 = (0..classes).map(|c| (l[c * rv + i] as f64 - m).exp()).sum();
                            for c in 0..classes {
                                acc[c * pv + o] += w[i] * (l[c * rv + i] as f64 - m).exp() / e;
                            }
                            wsum[o] += w[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    let v = s.iter().product::<usize>();
    let mut data = vec![0.0f32; classes * v];
    let mut j = 0;
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                let o = ((x + before[0]) * padded[1] + y + before[1]) * padded[2] + z + before[2];
                let probs: Vec<f64> = (0..classes).map(|c| acc[c * pv + o] / wsum[o]).collect();
                let total: f64 = probs.iter().sum();
                for c in 0..classes {
                    data[c * v + j] = (probs[c] / total) as f32;
                }
                j += 1;
            }
        }
    }
    Ok(ProbMap {
        classes,
        shape: s,
        spacing: image.spacing(),
        origin: image.origin(),
        data,
    })
}

/// Running f64 sum of probability maps, reduced in insertion order.
#[derive(Debug, Clone)]
struct ProbSum {
    first: ProbMap,
    sum: Vec<f64>,
    count: usize,
}

impl ProbSum {
    fn new(map: &ProbMap) -> Self {
        Self {
            first: map.clone(),
            sum: map.data.iter().map(|v| *v as f64).collect(),
            count: 1,
        }
    }

    fn add(&mut self, map: &ProbMap) -> Result<()> {
        if !self.first.same_grid(map) {
            return Err(Error::Shape("probability maps differ in grid or classes".into()));
        }
        self.sum.iter_mut().zip(&map.data).for_each(|(s, v)| *s += *v as f64);
        self.count += 1;
        Ok(())
    }

    fn merge(&mut self, other: &ProbSum) -> Result<()> {
        if !self.first.same_grid(&other.first) {
            return Err(Error::Shape("probability maps differ in grid or classes".into()));
        }
        self.sum.iter_mut().zip(&other.sum).for_each(|(s, v)| *s += v);
        self.count += other.count;
        Ok(())
    }

    fn mean(&self) -> ProbMap {
        let n = self.count as f64;
        ProbMap {
            data: self.sum.iter().map(|s| (s / n) as f32).collect(),
            ..self.first.clone()
        }
    }
}

/// Unweighted voxelwise mean.
pub fn ensemble_average(maps: &[ProbMap]) -> Result<ProbMap> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty list of maps".into()))?;
    let mut s = ProbSum::new(first);
    for m in rest {
        s.add(m)?;
    }
    Ok(s.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Defaults to the training crop stored in the checkpoints.
    pub roi_size: Option<[usize; 3]>,
    pub overlap: f64,
    pub blend: Blend,
    pub sigma_scale: f64,
    pub stage1_count: usize,
    pub percentiles: (f64, f64),
    pub softclip_k: f64,
    /// Stage-2 models are z-score trained (as in the original protocol)
    /// rather than trained on soft-clipped input.
    pub paper_literal: bool,
    pub postfilter: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            roi_size: None,
            overlap: 0.25,
            blend: Blend::Gaussian,
            sigma_scale: 0.125,
            stage1_count: 5,
            percentiles: (5.0, 95.0),
            softclip_k: 10.0,
            paper_literal: false,
            postfilter: true,
        }
    }
}

/// Settings resolved from an [`InferConfig`] and the checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageConfig {
    pub window: WindowConfig,
    pub target_spacing: [f64; 3],
    pub percentiles: (f64, f64),
    pub softclip_k: f64,
    pub postfilter: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub postprocess_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub stage1_models: usize,
    pub stage2_models: usize,
    pub stage1_foreground_voxels: usize,
    pub bounds: Option<PercentileBounds>,
    pub fallback: bool,
    pub fallback_reason: Option<String>,
    pub input_shape: [usize; 3],
    pub working_shape: [usize; 3],
    pub output_foreground_voxels: usize,
    pub timings: StageTimings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_stage<P: Predictor>(models: &[P], image: &Volume, window: &WindowConfig) -> Result<Option<ProbSum>> {
    let mut sum: Option<ProbSum> = None;
    for m in models {
        let p = sliding_window_predict(m, image, window)?;
        match &mut sum {
            Some(s) => s.add(&p)?,
            None => sum = Some(ProbSum::new(&p)),
        }
    }
    Ok(sum)
}

/// The two-stage ensemble:
///
/// 1. resample to the training spacing and z-score normalize;
/// 2. average the stage-1 models and take the argmax mask;
/// 3. take foreground percentile bounds of the resampled raw intensities and
///    soft-clip rescale the image to them;
/// 4. average the stage-2 models on the rescaled image;
/// 5. average all maps, argmax, keep the largest component, and resample the
///    mask back to the raw grid.
///
/// An empty stage-1 mask or degenerate bounds make stage 2 run on the z-score
/// image instead (`report.fallback`).
pub fn two_stage_predict<P: Predictor>(stage1: &[P], stage2: &[P], raw: &Volume, cfg: &TwoStageConfig) -> Result<(Volume, InferReport)> {
    if stage1.is_empty() {
        return Err(Error::InvalidArgument("two-stage inference needs at least one stage-1 model".into()));
    }
    if raw.kind() != VolumeKind::Image {
        return Err(Error::InvalidArgument("input must be an image volume".into()));
    }
    let t_total = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let resampled = resample(raw, cfg.target_spacing)?;
    let z = zscore_normalize(&resampled)?;
    timings.preprocess_ms = ms(t);

    let t = Instant::now();
    let s1 = run_stage(stage1, &z.volume, &cfg.window)?.expect("non-empty stage 1");
    let mask1 = s1.mean().argmax()?;
    let fg1 = mask1.count_nonzero();
    timings.stage1_ms = ms(t);

    let t = Instant::now();
    let mut fallback_reason = None;
    let mut bounds = None;
    let stage2_input = if fg1 == 0 {
        fallback_reason = Some("stage-1 ensemble produced no foreground".to_string());
        z.volume.clone()
    } else {
        let b = foreground_percentile_bounds(&resampled, &mask1, cfg.percentiles.0, cfg.percentiles.1)?;
        bounds = Some(b);
        match softclip_rescale(&resampled, b, cfg.softclip_k) {
            Ok(v) => v,
            Err(Error::DegenerateRange(m)) => {
                fallback_reason = Some(format!("degenerate foreground intensity range: {m}"));
                z.volume.clone()
            }
            Err(e) => return Err(e),
        }
    };
    if let Some(r) = &fallback_reason {
        log::warn!("two-stage fallback to z-score input: {r}");
    }
    let mut all = s1;
    if let Some(s2) = run_stage(stage2, &stage2_input, &cfg.window)? {
        all.merge(&s2)?;
    }
    timings.stage2_ms = ms(t);

    let t = Instant::now();
    let mut mask = all.mean().argmax()?;
    if cfg.postfilter {
        mask = largest_component(&mask)?;
    }
    let out = resample_to_grid(&mask, raw.shape(), raw.spacing())?;
    let out = Volume::new(out.into_data(), raw.shape(), raw.spacing(), raw.origin(), VolumeKind::Label)?;
    timings.postprocess_ms = ms(t);
    timings.total_ms = ms(t_total);

    let report = InferReport {
        stage1_models: stage1.len(),
        stage2_models: stage2.len(),
        stage1_foreground_voxels: fg1,
        bounds,
        fallback: fallback_reason.is_some(),
        fallback_reason,
        input_shape: raw.shape(),
        working_shape: resampled.shape(),
        output_foreground_voxels: out.count_nonzero(),
        timings,
    };
    Ok((out, report))
}

/// A network restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub path: PathBuf,
    pub meta: CheckpointMeta,
    pub model: SegResNet,
}

impl Predictor for LoadedModel {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn divisor(&self) -> usize {
        self.model.arch().divisor()
    }

    fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.model.infer_logits(x)
    }
}

/// Checkpoints split into the two stages.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub stage1: Vec<LoadedModel>,
    pub stage2: Vec<LoadedModel>,
}

/// Every `best.ckpt` under `dir` (one level of `fold*_rep*` subdirectories),
/// sorted by (repeat, fold).
pub fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path().join("best.ckpt");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl Ensemble {
    /// Loads all checkpoints in `dir`. Stage 1 is the first `stage1_count`
    /// checkpoints in (repeat, fold) order and must be z-score models; the
    /// rest form stage 2 and must be soft-clip models unless `paper_literal`.
    pub fn load(dir: &Path, cfg: &InferConfig) -> Result<Self> {
        let mut models = Vec::new();
        for p in find_checkpoints(dir)? {
            let ck = Checkpoint::load(&p)?;
            models.push(LoadedModel {
                model: ck.to_model()?,
                meta: ck.meta,
                path: p,
            });
        }
        Self::from_models(models, cfg)
    }

    pub fn from_models(mut models: Vec<LoadedModel>, cfg: &InferConfig) -> Result<Self> {
        models.sort_by_key(|m| (m.meta.repeat, m.meta.fold));
        if cfg.stage1_count == 0 || cfg.stage1_count >= models.len() {
            return Err(Error::Checkpoint(format!(
                "need more than stage1_count = {} checkpoints, found {}",
                cfg.stage1_count,
                models.len()
            )));
        }
        let stage2 = models.split_off(cfg.stage1_count);
        let stage1 = models;
        if let Some(m) = stage1.iter().find(|m| m.meta.normalization_mode != NormalizationMode::Zscore || m.meta.repeat != 0) {
            return Err(Error::Checkpoint(format!(
                "stage-1 checkpoint {} must be a repeat-0 z-score model (got repeat {}, {})",
                m.path.display(),
                m.meta.repeat,
                m.meta.normalization_mode
            )));
        }
        let want = if cfg.paper_literal {
            NormalizationMode::Zscore
        } else {
            NormalizationMode::PercentileSoftclip
        };
        if let Some(m) = stage2.iter().find(|m| m.meta.normalization_mode != want) {
            return Err(Error::Checkpoint(format!(
                "stage-2 checkpoint {} was trained with {} but {want} is required{}",
                m.path.display(),
                m.meta.normalization_mode,
                if cfg.paper_literal { "" } else { " (use --paper-literal for z-score-trained ensembles)" }
            )));
        }
        let first = &stage1[0].meta;
        if let Some(m) = stage1.iter().chain(&stage2).find(|m| m.meta.target_spacing != first.target_spacing) {
            return Err(Error::Checkpoint(format!("{} uses a different target spacing", m.path.display())));
        }
        Ok(Self { stage1, stage2 })
    }

    pub fn two_stage_config(&self, cfg: &InferConfig) -> TwoStageConfig {
        let meta = &self.stage1[0].meta;
        TwoStageConfig {
            window: WindowConfig {
                roi_size: cfg.roi_size.unwrap_or(meta.crop_size),
                overlap: cfg.overlap,
                blend: cfg.blend,
                sigma_scale: cfg.sigma_scale,
            },
            target_spacing: meta.target_spacing,
            percentiles: cfg.percentiles,
            softclip_k: cfg.softclip_k,
            postfilter: cfg.postfilter,
        }
    }

    pub fn predict(&self, raw: &Volume, cfg: &InferConfig) -> Result<(Volume, InferReport)> {
        two_stage_predict(&self.stage1, &self.stage2, raw, &self.two_stage_config(cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits `(0, a * x)` for input value `x`.
    struct Linear(f32);

    impl Predictor for Linear {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
            let n = x.voxels();
            let mut d = vec![0.0; 2 * n];
            d[n..].iter_mut().zip(x.data()).for_each(|(o, v)| *o = self.0 * v);
            Tensor::from_vec([1, 2, x.spatial()[0], x.spatial()[1], x.spatial()[2]], d)
        }
    }

    fn image(shape: [usize; 3], f: impl Fn(usize) -> f32) -> Volume {
        let n = shape.iter().product();
        Volume::new((0..n).map(f).collect(), shape, [1.0; 3], [0.0; 3], VolumeKind::Image).unwrap()
    }

    #[test]
    fn window_positions() {
        assert_eq!(window_starts(8, 4, 3), vec![0, 3, 4]);
        assert_eq!(window_starts(8, 4, 4), vec![0, 4]);
        assert_eq!(window_starts(3, 4, 2), vec![0]);
    }

    #[test]
    fn reflect_indices() {
        let r: Vec<usize> = (-3..6).map(|i| reflect(i, 3)).collect();
        assert_eq!(r, vec![1, 2, 1, 0, 1, 2, 1, 0, 1]);
    }

    #[test]
    fn pointwise_model_is_blend_invariant() {
        let img = image([6, 5, 7], |i| (i as f32 * 0.37).sin());
        let a = sliding_window_predict(&Linear(2.0), &img, &WindowConfig::new([4, 4, 4], 0.5)).unwrap();
        let mut c = WindowConfig::new([3, 2, 4], 0.25);
        c.blend = Blend::Constant;
        let b = sliding_window_predict(&Linear(2.0), &img, &c).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn small_volume_is_reflect_padded() {
        let img = image([2, 2, 2], |i| i as f32);
        let p = sliding_window_predict(&Linear(1.0), &img, &WindowConfig::new([4, 4, 4], 0.25)).unwrap();
        assert_eq!(p.shape, [2, 2, 2]);
        let expect = 1.0 / (1.0 + (-7.0f64).exp());
        assert!((p.class(1)[7] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn ensemble_arithmetic() {
        let map = |p: f32| ProbMap {
            classes: 2,
            shape: [1, 1, 1],
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![1.0 - p, p],
        };
        let m = ensemble_average(&[map(0.2), map(0.5), map(0.8)]).unwrap();
        assert!((m.data[1] - 0.5).abs() < 1e-7);
        assert_eq!(ensemble_average(&[map(0.3)]).unwrap(), map(0.3));
        assert!(ensemble_average(&[]).is_err());
        let mut other = map(0.1);
        other.shape = [1, 1, 2];
        other.data = vec![0.0; 4];
        assert!(ensemble_average(&[map(0.1), other]).is_err());
    }

    #[test]
    fn fallback_when_stage1_empty() {
        struct Background;
        impl Predictor for Background {
            fn num_classes(&self) -> usize {
                2
            }
            fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
                let n = x.voxels();
                let mut d = vec![5.0; 2 * n];
                d[n..].iter_mut().for_each(|v| *v = -5.0);
                let s = x.spatial();
                Tensor::from_vec([1, 2, s[0], s[1], s[2]], d)
            }
        }
        let img = image([4, 4, 4], |i| i as f32);
        let cfg = TwoStageConfig {
            window: WindowConfig::new([4, 4, 4], 0.25),
            target_spacing: [1.0; 3],
            percentiles: (5.0, 95.0),
            softclip_k: 10.0,
            postfilter: true,
        };
        let (mask, report) = two_stage_predict(&[Background], &[Background], &img, &cfg).unwrap();
        assert!(report.fallback);
        assert_eq!(mask.shape(), [4, 4, 4]);
        assert_eq!(mask.count_nonzero(), 0);
    }
}
