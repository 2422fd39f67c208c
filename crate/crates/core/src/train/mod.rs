//! Fold splitting, optimization and the k-fold x repeat training protocol.

mod folds;
mod optim;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use folds::{make_folds, Datalist, DatalistEntry};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use crate::augment::{apply_augmentations, random_crop_pair, AugmentConfig};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::infer::{sliding_window_predict, WindowConfig};
use crate::losses::{one_hot, total_loss, LossConfig, Tensor64};
use crate::metrics::dice_score;
use crate::nn::Tensor;
use crate::normalize::{foreground_percentile_bounds, softclip_rescale, zscore_normalize};
use crate::segresnet::{ArchConfig, NormalizationMode, SegResNet};
use crate::volume::{load_volume_as, resample, Volume, VolumeKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_per_device: usize,
    pub num_devices: usize,
    /// Samples per optimizer step; reached by gradient accumulation over
    /// `effective_batch / batch_per_device` micro-batches.
    pub effective_batch: usize,
    /// Random crops drawn from each training case per epoch.
    pub crops_per_case: usize,
    pub folds: usize,
    pub repeats: usize,
    pub target_spacing: [f64; 3],
    /// Validate every this many epochs (the last epoch always validates).
    pub val_interval: usize,
    pub val_overlap: f64,
    /// Train every repeat on z-score input (stage-2 models then see
    /// soft-clipped input only at inference).
    pub paper_literal: bool,
    pub percentiles: (f64, f64),
    pub softclip_k: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            weight_decay: 1e-5,
            optimizer: AdamWConfig::default(),
            epochs: 100,
            batch_per_device: 1,
            num_devices: 1,
            effective_batch: 8,
            crops_per_case: 1,
            folds: 5,
            repeats: 3,
            target_spacing: [0.7, 0.7, 1.0],
            val_interval: 1,
            val_overlap: 0.25,
            paper_literal: false,
            percentiles: (5.0, 95.0),
            softclip_k: 10.0,
            seed: 0,
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.folds < 2 || self.repeats < 1 || self.epochs < 1 {
            return bad("need folds >= 2, repeats >= 1, epochs >= 1".into());
        }
        if self.batch_per_device == 0 || self.num_devices == 0 || self.crops_per_case == 0 || self.val_interval == 0 {
            return bad("batch_per_device, num_devices, crops_per_case and val_interval must be >= 1".into());
        }
        if self.effective_batch < self.batch_per_device {
            return bad("effective_batch must be >= batch_per_device".into());
        }
        if self.target_spacing.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("target_spacing must be positive, got {:?}", self.target_spacing));
        }
        self.arch.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let d = self.arch.divisor();
        if self.augment.crop_size.iter().any(|c| c % d != 0) {
            return bad(format!("crop_size {:?} must be divisible by {d}", self.augment.crop_size));
        }
        if self.arch.deep_supervision_levels + 1 > self.loss.ds_weights.len() {
            return bad("not enough ds_weights for the deep supervision levels".into());
        }
        Ok(())
    }

    /// Micro-batches accumulated per optimizer step.
    pub fn accumulation_steps(&self) -> usize {
        (self.effective_batch / self.batch_per_device).max(1)
    }

    pub fn normalization_for(&self, repeat: usize) -> NormalizationMode {
        if repeat == 0 || self.paper_literal {
            NormalizationMode::Zscore
        } else {
            NormalizationMode::PercentileSoftclip
        }
    }

    /// Seed of a (fold, repeat) run; repeats differ by construction.
    pub fn run_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ a) ^ b)
}

/// A case resampled to the training spacing, before normalization.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub id: String,
    pub fold: usize,
    pub image: Volume,
    pub label: Volume,
}

/// Loads and resamples every datalist entry.
pub fn load_cases(datalist: &Datalist, dataroot: &Path, target_spacing: [f64; 3]) -> Result<Vec<CaseData>> {
    datalist
        .training
        .iter()
        .map(|e| {
            let image = load_volume_as(&Datalist::resolve(dataroot, &e.image), VolumeKind::Image)?;
            let label = load_volume_as(&Datalist::resolve(dataroot, &e.label), VolumeKind::Label)?;
            if image.shape() != label.shape() {
                return Err(Error::Shape(format!("{}: image and label shapes differ", e.image)));
            }
            Ok(CaseData {
                id: Datalist::case_id(e),
                fold: e.fold,
                image: resample(&image, target_spacing)?,
                label: resample(&label, target_spacing)?,
            })
        })
        .collect()
}

/// Network input for a case under `mode`. Soft-clip bounds come from the
/// ground-truth mask; cases without usable bounds fall back to z-score.
pub fn prepare_image(case: &CaseData, mode: NormalizationMode, cfg: &TrainConfig) -> Result<Volume> {
    let z = || zscore_normalize(&case.image).map(|z| z.volume);
    match mode {
        NormalizationMode::Zscore => z(),
        NormalizationMode::PercentileSoftclip => {
            let b = match foreground_percentile_bounds(&case.image, &case.label, cfg.percentiles.0, cfg.percentiles.1) {
                Ok(b) => b,
                Err(Error::EmptyForeground(_)) => {
                    log::warn!("{}: empty label, using z-score input", case.id);
                    return z();
                }
                Err(e) => return Err(e),
            };
            match softclip_rescale(&case.image, b, cfg.softclip_k) {
                Err(Error::DegenerateRange(_)) => {
                    log::warn!("{}: degenerate foreground range, using z-score input", case.id);
                    z()
                }
                r => r,
            }
        }
    }
}

/// Mean foreground Dice of sliding-window predictions over `cases`.
pub fn validate_model(model: &SegResNet, images: &[Volume], labels: &[Volume], window: &WindowConfig) -> Result<f64> {
    let mut total = 0.0;
    for (img, lab) in images.iter().zip(labels) {
        let pred = sliding_window_predict(model, img, window)?.argmax()?;
        let fg = |v: &Volume| v.with_data(v.data().iter().map(|x| (*x == 1.0) as u8 as f32).collect());
        total += dice_score(&fg(&pred)?, &fg(lab)?)?;
    }
    Ok(total / images.len() as f64)
}

fn stack(vols: &[Volume]) -> Result<Tensor> {
    let s = vols[0].shape();
    let mut data = Vec::with_capacity(vols.len() * vols[0].len());
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec([vols.len(), 1, s[0], s[1], s[2]], data)
}

/// Trains one (fold, repeat) model on all cases outside `fold` and returns
/// the checkpoint with the best validation Dice on `fold` (ties go to the
/// later epoch). When `save_to` is given the best checkpoint is also written
/// there atomically every time it improves.
pub fn train_fold(cfg: &TrainConfig, cases: &[CaseData], fold: usize, repeat: usize, save_to: Option<&Path>) -> Result<Checkpoint> {
    cfg.validate()?;
    if fold >= cfg.folds {
        return Err(Error::InvalidArgument(format!("fold {fold} outside [0, {})", cfg.folds)));
    }
    let train_idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].fold != fold).collect();
    let val_idx: Vec<usize> = (0..cases.len()).filter(|&i| cases[i].fold == fold).collect();
    if train_idx.is_empty() {
        return Err(Error::Training(format!("fold {fold}: empty training split")));
    }
    if val_idx.is_empty() {
        return Err(Error::Training(format!("fold {fold}: empty validation split")));
    }
    let train_ids: HashSet<&str> = train_idx.iter().map(|&i| cases[i].id.as_str()).collect();
    if let Some(&i) = val_idx.iter().find(|&&i| train_ids.contains(cases[i].id.as_str())) {
        return Err(Error::Training(format!("case {} is in both training and validation", cases[i].id)));
    }

    let mode = cfg.normalization_for(repeat);
    let run_seed = cfg.run_seed(repeat);
    let prep = |idx: &[usize]| -> Result<(Vec<Volume>, Vec<Volume>)> {
        let mut imgs = Vec::new();
        let mut labs = Vec::new();
        for &i in idx {
            imgs.push(prepare_image(&cases[i], mode, cfg)?);
            labs.push(cases[i].label.clone());
        }
        Ok((imgs, labs))
    };
    let (train_imgs, train_labs) = prep(&train_idx)?;
    let (val_imgs, val_labs) = prep(&val_idx)?;

    let mut model = SegResNet::new(cfg.arch.clone(), mode, derive_seed(run_seed, fold as u64, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed ^ cfg.augment.seed, fold as u64, 1));
    let mut opt = AdamW::new(cfg.optimizer, cfg.weight_decay);
    let window = WindowConfig::new(cfg.augment.crop_size, cfg.val_overlap);

    let samples_per_epoch = train_idx.len() * cfg.crops_per_case;
    let micro = cfg.batch_per_device;
    let accum = cfg.accumulation_steps();
    let micro_per_epoch = samples_per_epoch.div_ceil(micro);
    let steps_per_epoch = micro_per_epoch.div_ceil(accum);
    let total_steps = steps_per_epoch * cfg.epochs;
    let classes = cfg.arch.num_classes;

    let mut step = 0;
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut val_history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let t0 = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_idx.len()).flat_map(|i| std::iter::repeat_n(i, cfg.crops_per_case)).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut pending = 0;
        for (mi, chunk) in order.chunks(micro).enumerate() {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (ci, cl) = random_crop_pair(&train_imgs[i], &train_labs[i], cfg.augment.crop_size, cfg.augment.foreground_bias, &mut rng)?;
                let (ai, al) = apply_augmentations(&ci, &cl, &cfg.augment, &mut rng)?;
                imgs.push(ai);
                labs.push(al);
            }
            let x = stack(&imgs)?;
            let label_data: Vec<f32> = labs.iter().flat_map(|l| l.data().iter().copied()).collect();
            let target = one_hot(&label_data, chunk.len(), cfg.augment.crop_size, classes)?;
            let out = model.forward_train(&x)?;
            let ds: Vec<Tensor64> = out.ds_outputs.iter().map(Tensor64::from_tensor).collect();
            let loss = total_loss(&Tensor64::from_tensor(&out.logits), &ds, &target, &cfg.loss)?;
            if !loss.value.is_finite() {
                return Err(Error::Training(format!(
                    "fold {fold} repeat {repeat}: non-finite loss {} at epoch {epoch}, micro-batch {mi} (lr {:.3e}, level losses {:?})",
                    loss.value,
                    cosine_lr(step, total_steps, cfg.lr0),
                    loss.level_losses
                )));
            }
            epoch_loss += loss.value * chunk.len() as f64;
            let ds_grads: Vec<Tensor> = loss.ds_grads.iter().map(Tensor64::to_tensor).collect();
            model.backward(&loss.logits_grad.to_tensor(), &ds_grads)?;
            pending += 1;
            let last = mi + 1 == micro_per_epoch;
            if pending == accum || last {
                let lr = cosine_lr(step, total_steps, cfg.lr0);
                opt.step(&mut model, lr, 1.0 / pending as f64);
                model.zero_grad();
                pending = 0;
                step += 1;
            }
        }
        let mean_loss = epoch_loss / samples_per_epoch as f64;
        loss_history.push(mean_loss);

        let validate_now = (epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs;
        if validate_now {
            let dice = validate_model(&model, &val_imgs, &val_labs, &window)?;
            val_history.push((epoch, dice));
            log::info!(
                "fold {fold} rep {repeat} epoch {}/{} loss {mean_loss:.4} val dice {dice:.4} ({:.1}s)",
                epoch + 1,
                cfg.epochs,
                t0.elapsed().as_secs_f64()
            );
            if best.as_ref().is_none_or(|b| dice >= b.meta.val_dice) {
                let meta = CheckpointMeta {
                    arch: cfg.arch.clone(),
                    normalization_mode: mode,
                    fold,
                    repeat,
                    seed: run_seed,
                    target_spacing: cfg.target_spacing,
                    crop_size: cfg.augment.crop_size,
                    epoch,
                    val_dice: dice,
                    train_loss_history: loss_history.clone(),
                    val_dice_history: val_history.clone(),
                };
                let ck = Checkpoint::from_model(&mut model, meta);
                if let Some(p) = save_to {
                    ck.save(p)?;
                }
                best = Some(ck);
            }
        } else {
            log::debug!("fold {fold} rep {repeat} epoch {} loss {mean_loss:.4}", epoch + 1);
        }
    }
    let mut best = best.expect("last epoch always validates");
    // keep the full curves in the stored metadata
    best.meta.train_loss_history = loss_history;
    best.meta.val_dice_history = val_history;
    if let Some(p) = save_to {
        best.save(p)?;
    }
    Ok(best)
}

/// Path of the best checkpoint of a (fold, repeat) run under `ckpt_dir`.
pub fn checkpoint_path(ckpt_dir: &Path, fold: usize, repeat: usize) -> PathBuf {
    ckpt_dir.join(format!("fold{fold}_rep{repeat}")).join("best.ckpt")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub fold: usize,
    pub repeat: usize,
    pub path: PathBuf,
    pub skipped: bool,
    pub val_dice: Option<f64>,
    pub error: Option<String>,
    pub seconds: f64,
}

/// Trains every (fold, repeat) pair, skipping pairs whose checkpoint already
/// loads from disk. Failures are collected; the others still run. Returns
/// the per-run summaries, or an error naming the failed runs.
pub fn train_all(cfg: &TrainConfig, cases: &[CaseData], ckpt_dir: &Path) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for repeat in 0..cfg.repeats {
        for fold in 0..cfg.folds {
            let path = checkpoint_path(ckpt_dir, fold, repeat);
            let t = Instant::now();
            if path.is_file() {
                match Checkpoint::load(&path) {
                    Ok(ck) if ck.meta.fold == fold && ck.meta.repeat == repeat => {
                        log::info!("fold {fold} rep {repeat}: found {}, skipping", path.display());
                        runs.push(RunSummary {
                            fold,
                            repeat,
                            path,
                            skipped: true,
                            val_dice: Some(ck.meta.val_dice),
                            error: None,
                            seconds: 0.0,
                        });
                        continue;
                    }
                    _ => log::warn!("{} is unreadable or mislabelled, retraining", path.display()),
                }
            }
            let r = train_fold(cfg, cases, fold, repeat, Some(&path));
            runs.push(RunSummary {
                fold,
                repeat,
                path,
                skipped: false,
                val_dice: r.as_ref().ok().map(|c| c.meta.val_dice),
                error: r.as_ref().err().map(|e| e.to_string()),
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("fold{}_rep{}: {e}", r.fold, r.repeat)))
        .collect();
    if !failed.is_empty() {
        return Err(Error::Training(format!("{} run(s) failed: {}", failed.len(), failed.join("; "))));
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_bookkeeping() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.accumulation_steps(), 8);
        assert_eq!((cfg.run_seed(0), cfg.run_seed(2)), (0, 2));
        assert_eq!(cfg.normalization_for(0), NormalizationMode::Zscore);
        assert_eq!(cfg.normalization_for(1), NormalizationMode::PercentileSoftclip);
        assert_eq!(checkpoint_path(Path::new("ck"), 3, 1), Path::new("ck/fold3_rep1/best.ckpt"));
    }

    #[test]
    fn validation_rejects_bad_recipes() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let bad = [
            TrainConfig { effective_batch: 0, ..ok.clone() },
            TrainConfig { folds: 1, ..ok.clone() },
            TrainConfig {
                augment: AugmentConfig {
                    crop_size: [40, 64, 64],
                    ..AugmentConfig::default()
                },
                ..ok.clone()
            },
            TrainConfig {
                loss: LossConfig {
                    ds_weights: vec![1.0, 0.5],
                    ..LossConfig::default()
                },
                ..ok.clone()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let s: HashSet<u64> = (0..5).flat_map(|f| (0..2).map(move |k| derive_seed(0, f, k))).collect();
        assert_eq!(s.len(), 10);
    }
}
