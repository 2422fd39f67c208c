//! Residual encoder-decoder segmentation network with deep supervision.
//!
//! Stage `s` of the encoder runs at spatial scale `1/2^s` with
//! `init_filters * 2^s` channels. Every stage after the first starts with a
//! stride-2 convolution. Residual blocks are pre-activation:
//! `x + conv(relu(bn(conv(relu(bn(x))))))`.
//!
//! Each decoder level upsamples the coarser feature map with a 2x2x2
//! transposed convolution (halving channels), adds the encoder output of the
//! same scale and applies one residual block. Heads are `bn -> relu ->
//! 1x1x1 conv`; the main head reads the full-resolution decoder output and
//! deep-supervision heads read scales `1/2, 1/4, ...`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm3d, Conv3d, ConvTranspose3d, Module, Param, Relu, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub init_filters: usize,
    pub blocks_per_stage: Vec<usize>,
    /// Cubic kernel edge of the feature convolutions.
    pub kernel: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub norm: NormKind,
    pub deep_supervision_levels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            init_filters: 32,
            blocks_per_stage: vec![1, 2, 2, 4, 4],
            kernel: 3,
            in_channels: 1,
            num_classes: 2,
            norm: NormKind::Batch,
            deep_supervision_levels: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("arch config: {m}")));
        if self.blocks_per_stage.len() < 2 {
            return bad("at least two stages are required".into());
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return bad("every stage needs at least one block".into());
        }
        if self.init_filters == 0 {
            return bad("init_filters must be >= 1".into());
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("need in_channels >= 1 and num_classes >= 2".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.deep_supervision_levels >= self.blocks_per_stage.len() {
            return bad(format!(
                "deep_supervision_levels ({}) must be below the number of stages ({})",
                self.deep_supervision_levels,
                self.blocks_per_stage.len()
            ));
        }
        if self.num_stages() > 16 {
            return bad("too many stages".into());
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.blocks_per_stage.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.init_filters << stage
    }

    pub fn channel_widths(&self) -> Vec<usize> {
        (0..self.num_stages()).map(|s| self.stage_channels(s)).collect()
    }

    /// Spatial dimensions of the input must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_stages() - 1)
    }
}

/// Preprocessing a model was trained under (and expects at inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    Zscore,
    PercentileSoftclip,
}

impl std::fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormalizationMode::Zscore => "zscore",
            NormalizationMode::PercentileSoftclip => "percentile_softclip",
        })
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    bn1: BatchNorm3d,
    act1: Relu,
    conv1: Conv3d,
    bn2: BatchNorm3d,
    act2: Relu,
    conv2: Conv3d,
}

impl ResBlock {
    fn new(ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn1: BatchNorm3d::new(ch),
            act1: Relu::default(),
            conv1: Conv3d::new(ch, ch, kernel, 1, false, rng),
            bn2: BatchNorm3d::new(ch),
            act2: Relu::default(),
            conv2: Conv3d::new(ch, ch, kernel, 1, false, rng),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let h = self.conv1.infer(&Relu::infer(&self.bn1.infer(x)));
        let h = self.conv2.infer(&Relu::infer(&self.bn2.infer(&h)));
        h.add(x)
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.bn1.forward(x);
        let h = self.act1.forward(&h);
        let h = self.conv1.forward(&h);
        let h = self.bn2.forward(&h);
        let h = self.act2.forward(&h);
        self.conv2.forward(&h).add(x)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.conv2.backward(dy);
        let d = self.act2.backward(&d);
        let d = self.bn2.backward(&d);
        let d = self.conv1.backward(&d);
        let d = self.act1.backward(&d);
        self.bn1.backward(&d).add(dy)
    }
}

impl Module for ResBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn1.visit_params(f);
        self.conv1.visit_params(f);
        self.bn2.visit_params(f);
        self.conv2.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
}

#[derive(Debug, Clone)]
struct Head {
    bn: BatchNorm3d,
    act: Relu,
    conv: Conv3d,
}

impl Head {
    fn new(ch: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm3d::new(ch),
            act: Relu::default(),
            conv: Conv3d::new(ch, classes, 1, 1, true, rng),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.conv.infer(&Relu::infer(&self.bn.infer(x)))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let h = self.bn.forward(x);
        let h = self.act.forward(&h);
        self.conv.forward(&h)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.conv.backward(dy);
        let d = self.act.backward(&d);
        self.bn.backward(&d)
    }
}

impl Module for Head {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.bn.visit_buffers(f);
    }
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Class scores at input resolution, `(batch, classes, x, y, z)`.
    pub logits: Tensor,
    /// Deep-supervision class scores at `1/2, 1/4, ...` resolution.
    pub ds_outputs: Vec<Tensor>,
    /// Shape of the deepest encoder feature map.
    pub bottleneck_shape: [usize; 5],
}

#[derive(Debug, Clone)]
pub struct SegResNet {
    arch: ArchConfig,
    pub normalization_mode: NormalizationMode,
    stem: Conv3d,
    /// `down[s - 1]` opens encoder stage `s`.
    down: Vec<Conv3d>,
    enc_blocks: Vec<Vec<ResBlock>>,
    /// `up[s]` maps scale `s + 1` to scale `s`.
    up: Vec<ConvTranspose3d>,
    dec_blocks: Vec<ResBlock>,
    head: Head,
    /// `ds_heads[i]` reads scale `i + 1`.
    ds_heads: Vec<Head>,
    trained_forward: bool,
}

/// Builds a network with parameters drawn deterministically from `seed`.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<SegResNet> {
    SegResNet::new(cfg.clone(), NormalizationMode::Zscore, seed)
}

impl SegResNet {
    pub fn new(arch: ArchConfig, normalization_mode: NormalizationMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_count = arch.num_stages();
        let k = arch.kernel;
        let stem = Conv3d::new(arch.in_channels, arch.stage_channels(0), k, 1, false, &mut rng);
        let mut down = Vec::new();
        let mut enc_blocks = Vec::new();
        for s in 0..s_count {
            let ch = arch.stage_channels(s);
            if s > 0 {
                down.push(Conv3d::new(arch.stage_channels(s - 1), ch, k, 2, false, &mut rng));
            }
            enc_blocks.push((0..arch.blocks_per_stage[s]).map(|_| ResBlock::new(ch, k, &mut rng)).collect());
        }
        let mut up: Vec<Option<ConvTranspose3d>> = (0..s_count - 1).map(|_| None).collect();
        let mut dec: Vec<Option<ResBlock>> = (0..s_count - 1).map(|_| None).collect();
        for s in (0..s_count - 1).rev() {
            let ch = arch.stage_channels(s);
            up[s] = Some(ConvTranspose3d::new(arch.stage_channels(s + 1), ch, &mut rng));
            dec[s] = Some(ResBlock::new(ch, k, &mut rng));
        }
        let head = Head::new(arch.stage_channels(0), arch.num_classes, &mut rng);
        let ds_heads = (1..=arch.deep_supervision_levels)
            .map(|s| Head::new(arch.stage_channels(s), arch.num_classes, &mut rng))
            .collect();
        Ok(Self {
            stem,
            down,
            enc_blocks,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec_blocks: dec.into_iter().map(Option::unwrap).collect(),
            head,
            ds_heads,
            arch,
            normalization_mode,
            trained_forward: false,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.arch.in_channels,
                x.channels()
            )));
        }
        let d = self.arch.divisor();
        for (axis, n) in ["x", "y", "z"].iter().zip(x.spatial()) {
            if n % d != 0 {
                return Err(Error::Shape(format!(
                    "spatial axis {axis} has size {n}, which is not divisible by {d} (2^(stages-1))"
                )));
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward pass (running batch-norm statistics, no
    /// caching). Deterministic.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let feats = self.infer_features(x);
        let logits = self.head.infer(&feats[0]);
        let ds_outputs = self.ds_heads.iter().enumerate().map(|(i, h)| h.infer(&feats[i + 1])).collect();
        Ok(ForwardOutput {
            logits,
            ds_outputs,
            bottleneck_shape: feats[self.arch.num_stages() - 1].shape(),
        })
    }

    /// Full-resolution logits only.
    pub fn infer_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let feats = self.infer_features(x);
        Ok(self.head.infer(&feats[0]))
    }

    /// Decoder features per scale; the last entry is the bottleneck.
    fn infer_features(&self, x: &Tensor) -> Vec<Tensor> {
        let s_count = self.arch.num_stages();
        let mut enc = Vec::with_capacity(s_count);
        let mut h = self.stem.infer(x);
        for s in 0..s_count {
            if s > 0 {
                h = self.down[s - 1].infer(&h);
            }
            for b in &self.enc_blocks[s] {
                h = b.infer(&h);
            }
            enc.push(h.clone());
        }
        let mut feats: Vec<Tensor> = enc.clone();
        let mut cur = enc[s_count - 1].clone();
        for s in (0..s_count - 1).rev() {
            let sum = self.up[s].infer(&cur).add(&enc[s]);
            cur = self.dec_blocks[s].infer(&sum);
            feats[s] = cur.clone();
        }
        feats
    }

    /// Training-mode forward pass: batch statistics, caches activations for
    /// [`SegResNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let s_count = self.arch.num_stages();
        let mut enc = Vec::with_capacity(s_count);
        let mut h = self.stem.forward(x);
        for s in 0..s_count {
            if s > 0 {
                h = self.down[s - 1].forward(&h);
            }
            for b in &mut self.enc_blocks[s] {
                h = b.forward(&h);
            }
            enc.push(h.clone());
        }
        let bottleneck_shape = enc[s_count - 1].shape();
        let mut feats: Vec<Tensor> = enc.clone();
        let mut cur = enc[s_count - 1].clone();
        for s in (0..s_count - 1).rev() {
            let sum = self.up[s].forward(&cur).add(&enc[s]);
            cur = self.dec_blocks[s].forward(&sum);
            feats[s] = cur.clone();
        }
        let logits = self.head.forward(&feats[0]);
        let ds_outputs = self
            .ds_heads
            .iter_mut()
            .enumerate()
            .map(|(i, hd)| hd.forward(&feats[i + 1]))
            .collect();
        self.trained_forward = true;
        Ok(ForwardOutput {
            logits,
            ds_outputs,
            bottleneck_shape,
        })
    }

    /// Backpropagates gradients of the loss with respect to the logits and
    /// deep-supervision outputs, accumulating into every parameter's `grad`.
    pub fn backward(&mut self, d_logits: &Tensor, d_ds: &[Tensor]) -> Result<()> {
        if !self.trained_forward {
            return Err(Error::InvalidArgument("backward called without forward_train".into()));
        }
        if d_ds.len() != self.ds_heads.len() {
            return Err(Error::Shape(format!(
                "expected {} deep-supervision gradients, got {}",
                self.ds_heads.len(),
                d_ds.len()
            )));
        }
        self.trained_forward = false;
        let s_count = self.arch.num_stages();
        let mut d_feat: Vec<Option<Tensor>> = (0..s_count).map(|_| None).collect();
        d_feat[0] = Some(self.head.backward(d_logits));
        for (i, (hd, g)) in self.ds_heads.iter_mut().zip(d_ds).enumerate() {
            accumulate(&mut d_feat[i + 1], hd.backward(g));
        }
        let mut d_enc: Vec<Option<Tensor>> = (0..s_count).map(|_| None).collect();
        for s in 0..s_count - 1 {
            let g = d_feat[s].take().expect("decoder gradient present");
            let d_sum = self.dec_blocks[s].backward(&g);
            let d_up = self.up[s].backward(&d_sum);
            accumulate(&mut d_enc[s], d_sum);
            accumulate(&mut d_feat[s + 1], d_up);
        }
        if let Some(g) = d_feat[s_count - 1].take() {
            accumulate(&mut d_enc[s_count - 1], g);
        }
        let mut g = d_enc[s_count - 1].take().expect("bottleneck gradient");
        for s in (0..s_count).rev() {
            for b in self.enc_blocks[s].iter_mut().rev() {
                g = b.backward(&g);
            }
            if s > 0 {
                g = self.down[s - 1].backward(&g);
                if let Some(skip) = d_enc[s - 1].take() {
                    g.add_assign(&skip);
                }
            } else {
                self.stem.backward(&g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Module for SegResNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params(f);
        for s in 0..self.enc_blocks.len() {
            if s > 0 {
                self.down[s - 1].visit_params(f);
            }
            for b in &mut self.enc_blocks[s] {
                b.visit_params(f);
            }
        }
        for s in (0..self.up.len()).rev() {
            self.up[s].visit_params(f);
            self.dec_blocks[s].visit_params(f);
        }
        self.head.visit_params(f);
        for h in &mut self.ds_heads {
            h.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        for blocks in &mut self.enc_blocks {
            for b in blocks {
                b.visit_buffers(f);
            }
        }
        for s in (0..self.dec_blocks.len()).rev() {
            self.dec_blocks[s].visit_buffers(f);
        }
        self.head.visit_buffers(f);
        for h in &mut self.ds_heads {
            h.visit_buffers(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ArchConfig {
        ArchConfig {
            init_filters: 2,
            blocks_per_stage: vec![1, 1, 1],
            deep_supervision_levels: 2,
            ..ArchConfig::default()
        }
    }

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_channel_widths() {
        assert_eq!(ArchConfig::default().channel_widths(), vec![32, 64, 128, 256, 512]);
        assert_eq!(ArchConfig::default().divisor(), 16);
    }

    #[test]
    fn config_validation() {
        let mut c = ArchConfig::default();
        c.blocks_per_stage = vec![1];
        assert!(c.validate().is_err());
        let mut c = ArchConfig::default();
        c.deep_supervision_levels = 5;
        assert!(c.validate().is_err());
        let mut c = ArchConfig::default();
        c.init_filters = 0;
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn minimal_two_stage_net_runs() {
        let cfg = ArchConfig {
            init_filters: 2,
            blocks_per_stage: vec![1, 1],
            deep_supervision_levels: 1,
            ..ArchConfig::default()
        };
        let m = build_model(&cfg, 3).unwrap();
        let out = m.infer(&random_input([1, 1, 4, 2, 6], 1)).unwrap();
        assert_eq!(out.logits.shape(), [1, 2, 4, 2, 6]);
        assert_eq!(out.ds_outputs[0].shape(), [1, 2, 2, 1, 3]);
        assert_eq!(out.bottleneck_shape, [1, 4, 2, 1, 3]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = build_model(&tiny(), 11).unwrap();
        let mut b = build_model(&tiny(), 11).unwrap();
        let mut pa = Vec::new();
        a.visit_params(&mut |p| pa.extend_from_slice(&p.value));
        let mut pb = Vec::new();
        b.visit_params(&mut |p| pb.extend_from_slice(&p.value));
        assert_eq!(pa, pb);
        let mut c = build_model(&tiny(), 12).unwrap();
        let mut pc = Vec::new();
        c.visit_params(&mut |p| pc.extend_from_slice(&p.value));
        assert_ne!(pa, pc);
    }

    #[test]
    fn indivisible_input_names_axis() {
        let m = build_model(&tiny(), 0).unwrap();
        let err = m.infer(&Tensor::zeros([1, 1, 8, 8, 6])).unwrap_err();
        assert!(err.to_string().contains("axis z"), "{err}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut m = build_model(&tiny(), 5).unwrap();
        let x = random_input([2, 1, 8, 8, 8], 9);
        let out = m.forward_train(&x).unwrap();
        let dl = random_input(out.logits.shape(), 10);
        let dds: Vec<Tensor> = out.ds_outputs.iter().enumerate().map(|(i, t)| random_input(t.shape(), 20 + i as u64)).collect();
        m.backward(&dl, &dds).unwrap();
        let mut idx = 0;
        m.visit_params(&mut |p| {
            assert!(p.grad.iter().any(|g| *g != 0.0), "parameter {idx} has no gradient");
            idx += 1;
        });
    }

    /// Directional finite-difference check of the full backward pass.
    #[test]
    fn backward_matches_directional_derivative() {
        let x = random_input([1, 1, 8, 8, 8], 2);
        let mut m = build_model(&tiny(), 7).unwrap();
        let out = m.forward_train(&x).unwrap();
        let wl = random_input(out.logits.shape(), 3);
        let wds: Vec<Tensor> = out.ds_outputs.iter().enumerate().map(|(i, t)| random_input(t.shape(), 30 + i as u64)).collect();
        m.backward(&wl, &wds).unwrap();
        let mut grads = Vec::new();
        m.visit_params(&mut |p| grads.extend_from_slice(&p.grad));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dir: Vec<f32> = grads.iter().map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| *g as f64 * *d as f64).sum();

        let objective = |eps: f32| -> f64 {
            let mut mm = build_model(&tiny(), 7).unwrap();
            let mut i = 0;
            mm.visit_params(&mut |p| {
                for v in p.value.iter_mut() {
                    *v += eps * dir[i];
                    i += 1;
                }
            });
            let o = mm.forward_train(&x).unwrap();
            let mut s: f64 = o.logits.data().iter().zip(wl.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
            for (t, w) in o.ds_outputs.iter().zip(&wds) {
                s += t.data().iter().zip(w.data()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>();
            }
            s
        };
        // ReLU kinks and small-batch statistics make the map only piecewise
        // smooth, so the step has to stay small.
        let h = 1e-4;
        let numeric = (objective(h) - objective(-h)) / (2.0 * h as f64);
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-3);
        assert!(rel < 2e-2, "numeric {numeric} analytic {analytic}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let m = build_model(&tiny(), 1).unwrap();
        let x = random_input([1, 1, 8, 4, 8], 2);
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(m.infer_logits(&x).unwrap(), a.logits);
    }
}
