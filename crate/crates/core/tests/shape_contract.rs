use aortaseg::nn::Tensor;
use aortaseg::segresnet::{build_model, ArchConfig};
use proptest::prelude::*;

/// Parameter count derived from the layer structure alone.
fn count_oracle(a: &ArchConfig) -> usize {
    let k3 = a.kernel.pow(3);
    let c = |s: usize| a.init_filters << s;
    let block = |ch: usize| 2 * (ch * ch * k3) + 2 * (2 * ch);
    let head = |ch: usize| 2 * ch + ch * a.num_classes + a.num_classes;
    let stages = a.blocks_per_stage.len();
    let mut n = a.in_channels * c(0) * k3;
    for s in 0..stages {
        if s > 0 {
            n += c(s - 1) * c(s) * k3;
        }
        n += a.blocks_per_stage[s] * block(c(s));
    }
    for s in 0..stages - 1 {
        n += c(s + 1) * c(s) * 8 + c(s) + block(c(s));
    }
    n += head(c(0));
    n += (1..=a.deep_supervision_levels).map(|s| head(c(s))).sum::<usize>();
    n
}

#[test]
fn default_config_widths_and_pinned_parameter_count() {
    let arch = ArchConfig::default();
    assert_eq!(arch.channel_widths(), vec![32, 64, 128, 256, 512]);
    let mut a = build_model(&arch, 0).unwrap();
    let mut b = build_model(&arch, 12345).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_eq!(a.parameter_count(), count_oracle(&arch));
    // regression pin
    assert_eq!(a.parameter_count(), 83_858_120);
}

#[test]
fn default_config_on_64_cubed() {
    let m = build_model(&ArchConfig::default(), 0).unwrap();
    let x = Tensor::from_vec([1, 1, 64, 64, 64], (0..64 * 64 * 64).map(|i| ((i % 97) as f32 - 48.0) / 30.0).collect()).unwrap();
    let out = m.infer(&x).unwrap();
    assert_eq!(out.logits.shape(), [1, 2, 64, 64, 64]);
    let ds: Vec<[usize; 5]> = out.ds_outputs.iter().map(|t| t.shape()).collect();
    assert_eq!(ds, vec![[1, 2, 32, 32, 32], [1, 2, 16, 16, 16], [1, 2, 8, 8, 8]]);
    assert_eq!(out.bottleneck_shape, [1, 512, 4, 4, 4]);
    assert!(out.logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn indivisible_input_is_rejected() {
    let m = build_model(&ArchConfig::default(), 0).unwrap();
    let x = Tensor::zeros([1, 1, 32, 32, 24]);
    let e = m.infer(&x).unwrap_err();
    assert_eq!(e.kind(), "shape");
    assert!(e.to_string().contains("spatial axis z"), "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_contract_holds_for_small_configs(
        stages in 2usize..5,
        filters in 1usize..4,
        blocks in prop::collection::vec(1usize..3, 4),
        classes in 2usize..4,
        ds_frac in 0.0f64..1.0,
        mult in prop::collection::vec(1usize..3, 3),
        batch in 1usize..3,
    ) {
        let ds_levels = ((stages - 1) as f64 * ds_frac) as usize;
        let arch = ArchConfig {
            init_filters: filters,
            blocks_per_stage: blocks[..stages].to_vec(),
            num_classes: classes,
            deep_supervision_levels: ds_levels,
            ..ArchConfig::default()
        };
        let d = 1 << (stages - 1);
        let sp: [usize; 3] = std::array::from_fn(|a| d * mult[a]);
        let mut m = build_model(&arch, 1).unwrap();
        prop_assert_eq!(m.parameter_count(), count_oracle(&arch));
        let x = Tensor::from_vec([batch, 1, sp[0], sp[1], sp[2]], vec![0.5; batch * sp.iter().product::<usize>()]).unwrap();
        let out = m.infer(&x).unwrap();
        prop_assert_eq!(out.logits.shape(), [batch, classes, sp[0], sp[1], sp[2]]);
        prop_assert_eq!(out.ds_outputs.len(), ds_levels);
        for (i, t) in out.ds_outputs.iter().enumerate() {
            let f = 2 << i;
            prop_assert_eq!(t.shape(), [batch, classes, sp[0] / f, sp[1] / f, sp[2] / f]);
        }
        let top = filters << (stages - 1);
        prop_assert_eq!(out.bottleneck_shape, [batch, top, sp[0] / d, sp[1] / d, sp[2] / d]);
        let train = m.forward_train(&x).unwrap();
        prop_assert_eq!(train.logits.shape(), out.logits.shape());
    }
}
